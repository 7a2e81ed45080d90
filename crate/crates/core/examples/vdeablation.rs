//! Held-out low-frequency PSNR with and without VDE infusion on the specular
//! synthetic scene, plus the VDE activation contrast inside the highlight.
//!
//! `cargo run --release -p nvde-core --example vdeablation -- [seeds] [size] [iters] [baseline] [first]`

use nvde::fit::{evaluate_frame, fit_scene, FitConfig};
use nvde::synthoracle::{generate_scene, standard_poses, SceneSpec, HELD_OUT, SOURCE};

fn main() -> nvde::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let arg = |i: usize, d: f64| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(d);
    let seeds = arg(1, 5.0) as u64;
    let size = arg(2, 32.0) as usize;
    let iters = arg(3, 600.0) as usize;
    let baseline = arg(4, 0.4);
    let first = arg(5, 0.0) as u64;
    for seed in first..first + seeds {
        let spec = SceneSpec::specular(size, seed);
        let frames = generate_scene(&spec, &standard_poses(baseline))?;
        let mut line = format!("seed {seed}:");
        for vde in [true, false] {
            let mut cfg = FitConfig {
                iters,
                seed,
                ..FitConfig::per_scene()
            };
            cfg.model.vde_enabled = vde;
            let r = fit_scene(&frames, &frames.poses, &cfg)?;
            let e = evaluate_frame(&r.checkpoint, &frames, HELD_OUT)?;
            line += &format!(" vde={vde} psnr_lf {:.3} psnr {:.3}", e.report.psnr_lf, e.report.psnr);
            if vde {
                let mask = &frames.highlight[SOURCE];
                let act = &e.view.activation;
                let (mut si, mut ni, mut so, mut no) = (0.0, 0.0, 0.0, 0.0);
                for i in 0..mask.pixels() {
                    if mask.data()[i] > 0.5 {
                        si += act.data()[i].abs();
                        ni += 1.0;
                    } else {
                        so += act.data()[i].abs();
                        no += 1.0;
                    }
                }
                line += &format!(" |V| in {:.4} out {:.4} ratio {:.2} |", si / ni, so / no, (si / ni) / (so / no));
            }
        }
        println!("{line}");
    }
    Ok(())
}
