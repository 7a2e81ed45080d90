//! Fit a two-plane synthetic sequence and report held-out quality.
//!
//! `cargo run --release -p nvde-core --example lambertian -- [size] [iters] [lr] [baseline]`
//!
//! `NVDE_ALPHA_SM` overrides the smoothness weight; `NVDE_NO_VDE` disables infusion.

use std::time::Instant;

use nvde::fit::{evaluate_frame, fit_scene, windowed_means, FitConfig};
use nvde::synthoracle::{generate_scene, standard_poses, SceneSpec, HELD_OUT};

fn main() -> nvde::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let arg = |i: usize, d: f64| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(d);
    let size = arg(1, 64.0) as usize;
    let iters = arg(2, 2000.0) as usize;
    let lr = arg(3, FitConfig::PER_SCENE_LR);
    let baseline = arg(4, 0.2);

    let frames = generate_scene(&SceneSpec::two_plane(size, 0), &standard_poses(baseline))?;
    let mut cfg = FitConfig {
        iters,
        lr,
        ..FitConfig::per_scene()
    };
    if let Some(a) = std::env::var("NVDE_ALPHA_SM").ok().and_then(|s| s.parse().ok()) {
        cfg.weights.alpha_sm = a;
    }
    if std::env::var_os("NVDE_NO_VDE").is_some() {
        cfg.model.vde_enabled = false;
    }
    let start = Instant::now();
    let result = fit_scene(&frames, &frames.poses, &cfg)?;
    let elapsed = start.elapsed().as_secs_f64();
    let means = windowed_means(&result.trace, 50);
    println!("loss by 50-step window: {:?}", means.iter().map(|m| format!("{m:.4}")).collect::<Vec<_>>());
    let eval = evaluate_frame(&result.checkpoint, &frames, HELD_OUT)?;
    println!(
        "{size}x{size}, {iters} iterations in {elapsed:.1}s ({:.3}s/it): held-out PSNR {:.2} dB, PSNR_lf {:.2} dB, depth rel. MAE {:.4}",
        elapsed / iters as f64,
        eval.report.psnr,
        eval.report.psnr_lf,
        eval.depth_rel_mae
    );
    let gt = &frames.depth[0];
    let d = &eval.view.depth;
    for (name, target) in [("card", 2.0), ("back", 4.0)] {
        let v: Vec<f64> = (0..gt.pixels()).filter(|&i| gt.data()[i] == target).map(|i| d.data()[i]).collect();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let rel = v.iter().map(|x| (x - target).abs() / target).sum::<f64>() / v.len() as f64;
        println!("{name}: mean depth {mean:.3} rel err {rel:.3}");
    }
    Ok(())
}
