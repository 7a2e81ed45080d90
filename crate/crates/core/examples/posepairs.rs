//! Two-stage versus single-stage pose estimation on random synthetic pairs.
//!
//! `cargo run --release -p nvde-core --example posepairs -- [pairs] [size] [iters_per_level]`

use std::time::Instant;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use nvde::geometry::PoseSE3;
use nvde::posefit::{estimate_pose, estimate_pose_single_stage, PoseFitConfig};
use nvde::synthoracle::{generate_scene, SceneSpec};

fn unit(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let n = v.norm();
        if n > 0.1 && n <= 1.0 {
            return v / n;
        }
    }
}

fn main() -> nvde::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let arg = |i: usize, d: usize| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(d);
    let pairs = arg(1, 20);
    let size = arg(2, 64);
    // `NVDE_POSE_CONFIG` holds a partial PoseFitConfig as JSON
    let mut cfg: PoseFitConfig = match std::env::var("NVDE_POSE_CONFIG") {
        Ok(json) => serde_json::from_str(&json).map_err(|e| nvde::Error::InvalidArgument(format!("NVDE_POSE_CONFIG: {e}")))?,
        Err(_) => PoseFitConfig::default(),
    };
    cfg.iters_per_level = arg(3, cfg.iters_per_level);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let deg = 180.0 / std::f64::consts::PI;
    let (mut two_rot, mut one_rot, mut two_tr, mut one_tr) = (0.0, 0.0, 0.0, 0.0);
    let start = Instant::now();
    for i in 0..pairs {
        let w = unit(&mut rng) * rng.gen_range(1.0..3.0) / deg;
        let mut t = unit(&mut rng);
        t.z *= 0.3;
        let t = t.normalize() * rng.gen_range(0.15..0.25);
        let gt = PoseSE3::from_axis_angle(w, t);
        let frames = generate_scene(&SceneSpec::two_plane(size, i as u64), &[PoseSE3::identity(), gt])?;
        let (src, tgt) = (&frames.images[0], &frames.images[1]);
        let a = estimate_pose(src, tgt, &frames.cam, &cfg)?;
        let b = estimate_pose_single_stage(src, tgt, &frames.cam, &cfg)?;
        let (ar, at) = (a.final_pose.rotation_error(&gt) * deg, a.final_pose.translation_direction_error(&gt) * deg);
        let (br, bt) = (b.final_pose.rotation_error(&gt) * deg, b.final_pose.translation_direction_error(&gt) * deg);
        let cr = a.coarse.rotation_error(&gt) * deg;
        let ct = a.coarse.translation_direction_error(&gt) * deg;
        println!(
            "pair {i:2}: two-stage rot {ar:.3} tr {at:.3} (coarse rot {cr:.3} tr {ct:.3}, loss {:.5} -> {:.5}) | single rot {br:.3} tr {bt:.3}",
            a.coarse_loss, a.final_loss
        );
        two_rot += ar;
        one_rot += br;
        two_tr += at;
        one_tr += bt;
    }
    let n = pairs as f64;
    println!(
        "mean: two-stage rot {:.3} tr {:.3} | single rot {:.3} tr {:.3} | {:.1}s",
        two_rot / n,
        two_tr / n,
        one_rot / n,
        one_tr / n,
        start.elapsed().as_secs_f64()
    );
    Ok(())
}
