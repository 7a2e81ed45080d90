use nalgebra::Vector3;
use diffcore::Tensor;
use nvde::geometry::PoseSE3;
use nvde::heads::{GammaMode, ModelConfig, SceneParams};
use nvde::pipeline::{render_view, Source};
use nvde::reference::reference_render;
use nvde::synthoracle::{generate_scene, SceneSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random scene, parameters and pose; the sampler gets non-zero weights so
/// the fine path is exercised.
fn case(seed: u64, cfg: &ModelConfig) -> (Source, SceneParams, PoseSE3) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = SceneSpec::specular(16, seed);
    let frames = generate_scene(&spec, &[PoseSE3::identity()]).unwrap();
    let mut params = SceneParams::init(cfg, 16, 16, seed).unwrap();
    for l in params.f_s.layers.iter_mut() {
        l.weight = Tensor::from_fn(l.weight.shape(), |_| rng.gen_range(-0.3..0.3));
        l.bias = Tensor::from_fn(l.bias.shape(), |_| rng.gen_range(-0.5..0.5));
    }
    let pose = PoseSE3::from_axis_angle(
        Vector3::new(rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05)),
        Vector3::new(rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), rng.gen_range(-0.2..0.2)),
    );
    let src = Source::new(frames.images[0].clone(), spec.cam, cfg).unwrap();
    (src, params, pose)
}

fn max_diff(a: &nvde::Image, b: &nvde::Image) -> f64 {
    a.tensor().max_abs_diff(b.tensor())
}

#[test]
fn vectorized_matches_reference_on_random_scenes() {
    let cfgs = [
        ModelConfig::default(),
        ModelConfig {
            gamma: GammaMode::Periodic { frequencies: 4 },
            ..ModelConfig::default()
        },
        ModelConfig {
            vde_enabled: false,
            ..ModelConfig::default()
        },
    ];
    let mut worst: f64 = 0.0;
    for seed in 0..12u64 {
        let cfg = &cfgs[seed as usize % cfgs.len()];
        let (src, params, pose) = case(seed, cfg);
        let fast = render_view(cfg, &src, &params, &pose).unwrap();
        let slow = reference_render(cfg, &src.image, &src.cam, &params, &pose.params()).unwrap();
        worst = worst
            .max(max_diff(&fast.infused, &slow.infused))
            .max(max_diff(&fast.coarse, &slow.coarse))
            .max(max_diff(&fast.fine, &slow.fine));
    }
    assert!(worst < 1e-12, "max deviation {worst:e}");
}
