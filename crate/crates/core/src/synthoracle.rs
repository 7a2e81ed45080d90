//! Synthetic scenes with known geometry, poses and a view-dependent
//! highlight, rendered analytically.
//!
//! Scenes are stacks of fronto-parallel planes in the source camera frame.
//! A plane's texture is a function of source-pixel coordinates, so the
//! source frame shows each texture undistorted. Highlights are image-space
//! Gaussian blobs painted onto one plane; in a target frame the blob moves
//! with its surface point minus `gain` times the translation-induced flow
//! of that point, so `gain = 0` is a surface marking and `gain = 1` stays
//! put in the image. Relative to the surface this is a disparity of
//! `-gain / depth`, within the `|v| <= 1 / depth` bound of the VDE model.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Camera, PoseSE3};
use crate::image::Image;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Texture {
    /// Two octaves of quintic value noise with lattice spacing `cell` pixels.
    ValueNoise { cell: f64, seed: u64 },
    /// Checkerboard with softened edges.
    Checker { cell: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlaneSpec {
    pub depth: f64,
    /// `[u0, v0, u1, v1]` in source pixels; the plane covers the points whose
    /// source projection falls inside.
    pub extent: [f64; 4],
    pub texture: Texture,
    /// Mean color per channel.
    pub base: [f64; 3],
    /// Texture amplitude.
    pub contrast: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HighlightSpec {
    pub plane: usize,
    /// Source-frame centre in pixels.
    pub center: [f64; 2],
    /// Gaussian standard deviation in pixels.
    pub radius: f64,
    pub intensity: f64,
    /// Fraction of the translation flow the highlight lags behind its surface, in (0, 1].
    pub gain: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    #[serde(rename = "intrinsics")]
    pub cam: Camera,
    /// Ordered far to near.
    pub planes: Vec<PlaneSpec>,
    #[serde(default)]
    pub highlight: Option<HighlightSpec>,
    #[serde(default)]
    pub seed: u64,
}

/// Rendered frames with ground truth. Frame 0 is the source.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSet {
    pub cam: Camera,
    pub images: Vec<Image>,
    pub poses: Vec<PoseSE3>,
    /// Depth along each frame's optical axis.
    pub depth: Vec<Image>,
    /// 1 where the surface seen by the frame is visible in the source frame.
    pub visibility: Vec<Image>,
    /// 1 where the highlight adds at least a tenth of its peak.
    pub highlight: Vec<Image>,
}

/// Frame roles in the standard four-frame layout.
pub const SOURCE: usize = 0;
pub const PREV: usize = 1;
pub const NEXT: usize = 2;
pub const HELD_OUT: usize = 3;

const WHOLE_PLANE: f64 = 1.0e6;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Deterministic lattice value in `[-1, 1]`.
fn lattice(seed: u64, i: i64, j: i64, octave: u64) -> f64 {
    let h = mix(seed ^ mix((i as u64).wrapping_mul(0x9e3779b97f4a7c15) ^ mix((j as u64) ^ (octave << 48))));
    (h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}

fn quintic(t: f64) -> f64 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

fn value_noise(seed: u64, u: f64, v: f64, cell: f64, octave: u64) -> f64 {
    let (x, y) = (u / cell, v / cell);
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (quintic(x - x0), quintic(y - y0));
    let (i, j) = (x0 as i64, y0 as i64);
    let a = lattice(seed, i, j, octave);
    let b = lattice(seed, i + 1, j, octave);
    let c = lattice(seed, i, j + 1, octave);
    let d = lattice(seed, i + 1, j + 1, octave);
    let top = a + (b - a) * fx;
    let bot = c + (d - c) * fx;
    top + (bot - top) * fy
}

impl Texture {
    /// Zero-mean pattern value in roughly `[-1, 1]` for channel `ch`.
    fn eval(&self, u: f64, v: f64, ch: usize, scene_seed: u64) -> f64 {
        match *self {
            Texture::ValueNoise { cell, seed } => {
                let s = mix(seed ^ mix(scene_seed));
                let shared = 0.65 * value_noise(s, u, v, cell, 0) + 0.35 * value_noise(s, u, v, cell / 2.0, 1);
                let own = value_noise(s ^ mix(ch as u64 + 1), u, v, cell, 2);
                0.7 * shared + 0.3 * own
            }
            Texture::Checker { cell } => {
                let w = std::f64::consts::PI / cell;
                let s = (u * w).sin() * (v * w).sin();
                (3.0 * s).tanh() / 3.0f64.tanh()
            }
        }
    }
}

impl PlaneSpec {
    fn contains(&self, q: [f64; 2]) -> bool {
        let [u0, v0, u1, v1] = self.extent;
        q[0] >= u0 && q[0] <= u1 && q[1] >= v0 && q[1] <= v1
    }

    fn color(&self, q: [f64; 2], ch: usize, seed: u64) -> f64 {
        self.base[ch] + self.contrast * self.texture.eval(q[0], q[1], ch, seed)
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        self.cam.validate()?;
        if self.planes.is_empty() {
            return Err(Error::invalid("scene has no planes"));
        }
        for w in self.planes.windows(2) {
            if w[1].depth >= w[0].depth {
                return Err(Error::invalid("planes must be ordered far to near"));
            }
        }
        if self.planes.iter().any(|p| !(p.depth > 0.0) || !p.depth.is_finite()) {
            return Err(Error::invalid("plane depths must be positive"));
        }
        if let Some(h) = &self.highlight {
            if h.plane >= self.planes.len() || !(h.gain > 0.0 && h.gain <= 1.0) || !(h.radius > 0.0) {
                return Err(Error::invalid("highlight needs a valid plane, gain in (0, 1] and radius > 0"));
            }
        }
        Ok(())
    }

    /// Textured background at depth 4 and a nearer textured card at depth 2.
    pub fn two_plane(size: usize, seed: u64) -> SceneSpec {
        let cam = Camera::centered(size as f64, size, size).expect("positive size");
        let s = size as f64;
        SceneSpec {
            cam,
            planes: vec![
                PlaneSpec {
                    depth: 4.0,
                    extent: [-WHOLE_PLANE, -WHOLE_PLANE, WHOLE_PLANE, WHOLE_PLANE],
                    texture: Texture::ValueNoise { cell: 6.0, seed: 1 },
                    base: [-0.05, -0.08, -0.02],
                    contrast: 0.3,
                },
                PlaneSpec {
                    depth: 2.0,
                    extent: [0.3 * s, 0.25 * s, 0.7 * s, 0.75 * s],
                    texture: Texture::ValueNoise { cell: 5.0, seed: 2 },
                    base: [0.02, -0.04, -0.1],
                    contrast: 0.3,
                },
            ],
            highlight: None,
            seed,
        }
    }

    /// [`two_plane`](Self::two_plane) with a glossy highlight on the card.
    pub fn specular(size: usize, seed: u64) -> SceneSpec {
        let mut spec = Self::two_plane(size, seed);
        let s = size as f64;
        // keep the blob inside the card; small jitter per seed
        let jitter = |k: u64| (lattice(seed, k as i64, 7, 9) * 0.04) * s;
        // card texture finer than the VDE low-pass box, highlight coarser, so
        // the low-frequency band holds mostly the view-dependent part
        spec.planes[1].texture = Texture::ValueNoise { cell: 2.5, seed: 2 };
        spec.highlight = Some(HighlightSpec {
            plane: 1,
            center: [0.5 * s + jitter(1), 0.5 * s + jitter(2)],
            radius: 0.1 * s,
            intensity: 0.4,
            gain: 0.5,
        });
        spec
    }
}

/// `[identity, -b, +b, +b/2]` translations with a small vertical component.
pub fn standard_poses(baseline: f64) -> Vec<PoseSE3> {
    let t = |s: f64| PoseSE3::from_axis_angle(Vector3::zeros(), Vector3::new(s * baseline, 0.2 * s * baseline, 0.0));
    vec![PoseSE3::identity(), t(-1.0), t(1.0), t(0.5)]
}

struct Hit {
    plane: usize,
    /// Source-pixel coordinates of the hit point.
    q: [f64; 2],
    /// Depth along the rendering camera's axis.
    depth: f64,
    point: Vector3<f64>,
}

/// Nearest plane hit by the ray through target pixel `p` for a camera with
/// `x_target = R x_source + t`.
fn cast(spec: &SceneSpec, pose: &PoseSE3, p: [f64; 2]) -> Option<Hit> {
    let cam = &spec.cam;
    let rt = pose.rotation.transpose();
    let origin = -(rt * pose.translation);
    let dir = rt * cam.ray(p[0], p[1]);
    let mut best: Option<Hit> = None;
    for (k, plane) in spec.planes.iter().enumerate() {
        if dir.z.abs() < 1e-12 {
            continue;
        }
        let s = (plane.depth - origin.z) / dir.z;
        if s <= 0.0 {
            continue;
        }
        let x = origin + dir * s;
        let q = [
            cam.fx * x.x / plane.depth + cam.cx,
            cam.fy * x.y / plane.depth + cam.cy,
        ];
        if !plane.contains(q) {
            continue;
        }
        if best.as_ref().is_none_or(|b| s < b.depth) {
            best = Some(Hit {
                plane: k,
                q,
                depth: s,
                point: x,
            });
        }
    }
    best
}

/// Highlight centre in a frame with pose `pose`.
pub fn highlight_center(spec: &SceneSpec, h: &HighlightSpec, pose: &PoseSE3) -> Option<[f64; 2]> {
    let cam = &spec.cam;
    let z = spec.planes[h.plane].depth;
    let x = cam.ray(h.center[0], h.center[1]) * z;
    let surf = cam.project(&pose.transform(&x))?;
    let rot_only = cam.project(&(pose.rotation * x))?;
    Some([
        surf[0] - h.gain * (surf[0] - rot_only[0]),
        surf[1] - h.gain * (surf[1] - rot_only[1]),
    ])
}

/// Render all frames of `spec` at `poses` (first pose must be the identity).
pub fn generate_scene(spec: &SceneSpec, poses: &[PoseSE3]) -> Result<FrameSet> {
    spec.validate()?;
    if poses.is_empty() || !poses[0].is_identity() {
        return Err(Error::invalid("the first pose must be the identity"));
    }
    let cam = spec.cam;
    let (w, h) = (cam.width, cam.height);
    let source_depth: Vec<f64> = (0..w * h)
        .map(|i| {
            cast(spec, &PoseSE3::identity(), [(i % w) as f64, (i / w) as f64]).map_or(f64::INFINITY, |x| x.depth)
        })
        .collect();
    let mut out = FrameSet {
        cam,
        images: Vec::new(),
        poses: poses.to_vec(),
        depth: Vec::new(),
        visibility: Vec::new(),
        highlight: Vec::new(),
    };
    for pose in poses {
        let hl = spec
            .highlight
            .as_ref()
            .and_then(|hs| highlight_center(spec, hs, pose).map(|c| (hs, c)));
        let mut img = Image::new(h, w, 3);
        let mut depth = Image::new(h, w, 1);
        let mut vis = Image::new(h, w, 1);
        let mut mask = Image::new(h, w, 1);
        for y in 0..h {
            for x in 0..w {
                let Some(hit) = cast(spec, pose, [x as f64, y as f64]) else {
                    continue;
                };
                let plane = &spec.planes[hit.plane];
                let glow = match hl {
                    Some((hs, c)) if hs.plane == hit.plane => {
                        let d2 = (x as f64 - c[0]).powi(2) + (y as f64 - c[1]).powi(2);
                        hs.intensity * (-d2 / (2.0 * hs.radius * hs.radius)).exp()
                    }
                    _ => 0.0,
                };
                for ch in 0..3 {
                    img.set(x, y, ch, (plane.color(hit.q, ch, spec.seed) + glow).clamp(-0.5, 0.5));
                }
                depth.set(x, y, 0, hit.depth);
                if let Some((hs, _)) = hl {
                    if glow >= 0.1 * hs.intensity {
                        mask.set(x, y, 0, 1.0);
                    }
                }
                // visible in the source if the source ray through the hit's
                // projection stops at the same point
                let (qu, qv) = (hit.q[0].round(), hit.q[1].round());
                let inside = qu >= 0.0 && qv >= 0.0 && (qu as usize) < w && (qv as usize) < h;
                if inside {
                    let sd = source_depth[qv as usize * w + qu as usize];
                    if (sd - hit.point.z).abs() < 1e-6 * sd.max(1.0) {
                        vis.set(x, y, 0, 1.0);
                    }
                }
            }
        }
        out.images.push(img);
        out.depth.push(depth);
        out.visibility.push(vis);
        out.highlight.push(mask);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::epipolar_project;

    #[test]
    fn deterministic_and_identity_source() {
        let spec = SceneSpec::specular(24, 3);
        let poses = standard_poses(0.05);
        let a = generate_scene(&spec, &poses).unwrap();
        let b = generate_scene(&spec, &poses).unwrap();
        assert_eq!(a, b);
        let only = generate_scene(&spec, &poses[..1]).unwrap();
        assert_eq!(only.images[0], a.images[0]);
        assert!(a.visibility[0].data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn translation_flow_closed_form() {
        let spec = SceneSpec::specular(32, 0);
        let hs = spec.highlight.unwrap();
        let tx = 0.1;
        let pose = PoseSE3::from_axis_angle(Vector3::zeros(), Vector3::new(tx, 0.0, 0.0));
        let c = highlight_center(&spec, &hs, &pose).unwrap();
        let flow = spec.cam.fx * tx / spec.planes[hs.plane].depth;
        // relative to its surface point the highlight moves by -gain * flow
        let surf = hs.center[0] + flow;
        assert!((c[0] - surf + hs.gain * flow).abs() < 1e-9);
        assert!((c[1] - hs.center[1]).abs() < 1e-9);

        // surface texture shifts by fx * t / depth
        let frames = generate_scene(&SceneSpec::two_plane(32, 0), &[PoseSE3::identity(), pose]).unwrap();
        let back = frames.depth[1].get(2, 2, 0);
        assert!((back - 4.0).abs() < 1e-12);
        let shift = spec.cam.fx * tx / 4.0;
        let x = 4.0;
        let y = 3.0;
        let want = frames.images[0].get(x as usize, y as usize, 0);
        // sample the target at the shifted position analytically
        let hit = cast(&SceneSpec::two_plane(32, 0), &pose, [x + shift, y]).unwrap();
        assert!((hit.q[0] - x).abs() < 1e-9);
        let got = SceneSpec::two_plane(32, 0).planes[hit.plane].color(hit.q, 0, 0);
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn rotation_keeps_highlight_on_surface() {
        let spec = SceneSpec::specular(32, 1);
        let hs = spec.highlight.unwrap();
        let pose = PoseSE3::from_axis_angle(Vector3::new(0.0, 0.03, 0.01), Vector3::zeros());
        let c = highlight_center(&spec, &hs, &pose).unwrap();
        let surf = epipolar_project(hs.center, spec.planes[hs.plane].depth, &pose.inverse(), &spec.cam).unwrap();
        assert!((c[0] - surf.pixel[0]).abs() < 1e-9 && (c[1] - surf.pixel[1]).abs() < 1e-9);
    }

    #[test]
    fn rejects_bad_specs() {
        let mut spec = SceneSpec::two_plane(16, 0);
        spec.planes.reverse();
        assert!(generate_scene(&spec, &[PoseSE3::identity()]).is_err());
        spec.planes.clear();
        assert!(generate_scene(&spec, &[PoseSE3::identity()]).is_err());
        let spec = SceneSpec::two_plane(16, 0);
        assert!(generate_scene(&spec, &standard_poses(0.1)[1..]).is_err());
    }
}
