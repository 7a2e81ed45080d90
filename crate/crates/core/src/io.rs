//! On-disk formats: NVDE1 checkpoints, PNG color images, PFM scalar maps,
//! JSON scene/pose files and the command-line pose string.
//!
//! Every decoder validates sizes against the available bytes before
//! allocating and reports malformed input as [`Error::Format`].

use std::fs;
use std::io::{BufWriter, Cursor, Write};
use std::path::{Path, PathBuf};

use diffcore::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{Camera, PoseSE3};
use crate::heads::{GammaMode, ModelConfig, SceneParams};
use crate::image::Image;
use crate::synthoracle::FrameSet;

pub const MAGIC: &[u8; 6] = b"NVDE1\0";
pub const VERSION: u32 = 1;
/// Upper bound on elements in one decoded tensor or image.
const MAX_ELEMENTS: usize = 1 << 28;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    F64 = 1,
}

/// Ordered named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorArchive {
    pub entries: Vec<(String, DType, Tensor)>,
}

impl TensorArchive {
    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.entries.push((name.into(), DType::F64, tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _, _)| n == name).map(|(_, _, t)| t)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&u32::try_from(self.entries.len()).map_err(|_| Error::invalid("too many tensors"))?.to_le_bytes());
        for (name, dtype, t) in &self.entries {
            let nb = name.as_bytes();
            let len = u16::try_from(nb.len()).map_err(|_| Error::invalid("tensor name too long"))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(nb);
            out.push(*dtype as u8);
            out.push(u8::try_from(t.shape().len()).map_err(|_| Error::invalid("too many dimensions"))?);
            for &d in t.shape() {
                out.extend_from_slice(&u32::try_from(d).map_err(|_| Error::invalid("extent too large"))?.to_le_bytes());
            }
            for &v in t.data() {
                match dtype {
                    DType::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                    DType::F64 => out.extend_from_slice(&v.to_le_bytes()),
                }
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(6)? != MAGIC {
            return Err(Error::format("checkpoint", "bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format("checkpoint", format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut entries = Vec::new();
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::format("checkpoint", "tensor name is not UTF-8"))?
                .to_string();
            let dtype = match r.u8()? {
                0 => DType::F32,
                1 => DType::F64,
                d => return Err(Error::format("checkpoint", format!("unknown dtype tag {d}"))),
            };
            let ndim = r.u8()? as usize;
            if ndim == 0 {
                return Err(Error::format("checkpoint", format!("tensor {name} has no dimensions")));
            }
            let mut shape = Vec::with_capacity(ndim);
            let mut total: usize = 1;
            for _ in 0..ndim {
                let d = r.u32()? as usize;
                if d == 0 {
                    return Err(Error::format("checkpoint", format!("tensor {name} has a zero extent")));
                }
                total = total
                    .checked_mul(d)
                    .filter(|&t| t <= MAX_ELEMENTS)
                    .ok_or_else(|| Error::format("checkpoint", format!("tensor {name} is too large")))?;
                shape.push(d);
            }
            let width = if dtype == DType::F32 { 4 } else { 8 };
            let raw = r.take(total * width)?;
            let data: Vec<f64> = match dtype {
                DType::F32 => raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect(),
                DType::F64 => raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            };
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::format("checkpoint", format!("tensor {name} holds non-finite values")));
            }
            entries.push((name, dtype, Tensor::new(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::format("checkpoint", "trailing bytes"));
        }
        Ok(TensorArchive { entries })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format("checkpoint", "truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Everything needed to render novel views of one fitted scene.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub cam: Camera,
    pub source: Image,
    pub params: SceneParams,
    /// Target poses used during fitting.
    pub poses: Vec<PoseSE3>,
}

fn config_vector(c: &ModelConfig) -> Vec<f64> {
    let (mode, freq) = match c.gamma {
        GammaMode::Learnable => (0.0, 0.0),
        GammaMode::Periodic { frequencies } => (1.0, frequencies as f64),
    };
    vec![
        c.n as f64,
        c.n_v as f64,
        c.n_star as f64,
        c.near,
        c.far,
        c.feature_channels as f64,
        c.recal_hidden as f64,
        c.sampler_hidden as f64,
        mode,
        freq,
        c.gamma_hidden as f64,
        c.gamma_width as f64,
        c.epsilon_vde,
        if c.vde_enabled { 1.0 } else { 0.0 },
    ]
}

fn count(v: f64) -> Result<usize> {
    if v.fract() != 0.0 || !(0.0..=1e6).contains(&v) {
        return Err(Error::format("checkpoint", format!("bad count {v} in config")));
    }
    Ok(v as usize)
}

fn config_from_vector(v: &[f64]) -> Result<ModelConfig> {
    if v.len() != 14 {
        return Err(Error::format("checkpoint", "config tensor has the wrong length"));
    }
    let gamma = match v[8] {
        m if m == 0.0 => GammaMode::Learnable,
        m if m == 1.0 => GammaMode::Periodic {
            frequencies: count(v[9])?,
        },
        m => return Err(Error::format("checkpoint", format!("unknown encoding mode {m}"))),
    };
    let cfg = ModelConfig {
        n: count(v[0])?,
        n_v: count(v[1])?,
        n_star: count(v[2])?,
        near: v[3],
        far: v[4],
        feature_channels: count(v[5])?,
        recal_hidden: count(v[6])?,
        sampler_hidden: count(v[7])?,
        gamma,
        gamma_hidden: count(v[10])?,
        gamma_width: count(v[11])?,
        epsilon_vde: v[12],
        vde_enabled: v[13] != 0.0,
    };
    cfg.validate().map_err(|e| Error::format("checkpoint", e.to_string()))?;
    Ok(cfg)
}

/// SHA-256 of the canonical config vector, first 8 bytes as four 16-bit words.
pub fn config_hash(c: &ModelConfig) -> [u16; 4] {
    let mut h = Sha256::new();
    for v in config_vector(c) {
        h.update(v.to_le_bytes());
    }
    let d = h.finalize();
    std::array::from_fn(|i| u16::from_le_bytes([d[2 * i], d[2 * i + 1]]))
}

impl Checkpoint {
    pub fn to_archive(&self) -> Result<TensorArchive> {
        let mut a = TensorArchive::default();
        a.push(
            "header.config_hash",
            Tensor::from_vec(config_hash(&self.config).iter().map(|&x| x as f64).collect()),
        );
        a.push("header.config", Tensor::from_vec(config_vector(&self.config)));
        let c = &self.cam;
        a.push(
            "camera",
            Tensor::from_vec(vec![c.fx, c.fy, c.cx, c.cy, c.width as f64, c.height as f64]),
        );
        a.push("source", self.source.tensor().clone());
        for (name, t) in self.params.named() {
            a.push(name, t.clone());
        }
        if !self.poses.is_empty() {
            let data = self.poses.iter().flat_map(|p| p.to_rt_rows()).collect();
            a.push("poses", Tensor::new(vec![self.poses.len(), 12], data)?);
        }
        Ok(a)
    }

    pub fn from_archive(a: &TensorArchive) -> Result<Self> {
        let need = |n: &str| a.get(n).ok_or_else(|| Error::format("checkpoint", format!("missing tensor {n}")));
        let config = config_from_vector(need("header.config")?.data())?;
        let stored: Vec<f64> = need("header.config_hash")?.data().to_vec();
        let want: Vec<f64> = config_hash(&config).iter().map(|&x| x as f64).collect();
        if stored != want {
            return Err(Error::format("checkpoint", "config hash mismatch"));
        }
        let cv = need("camera")?.data();
        if cv.len() != 6 {
            return Err(Error::format("checkpoint", "camera tensor has the wrong length"));
        }
        let cam = Camera::new(cv[0], cv[1], cv[2], cv[3], count(cv[4])?, count(cv[5])?)
            .map_err(|e| Error::format("checkpoint", e.to_string()))?;
        let source = Image::from_tensor(need("source")?.clone())?;
        if source.width() != cam.width || source.height() != cam.height {
            return Err(Error::format("checkpoint", "source image does not match the camera"));
        }
        let params = SceneParams::from_named(&config, cam.height, cam.width, |n| a.get(n).cloned())?;
        let poses = match a.get("poses") {
            None => Vec::new(),
            Some(t) if t.shape().len() == 2 && t.shape()[1] == 12 => t
                .data()
                .chunks(12)
                .map(|c| PoseSE3::from_rt_rows(c).map_err(|e| Error::format("checkpoint", e.to_string())))
                .collect::<Result<_>>()?,
            Some(_) => return Err(Error::format("checkpoint", "poses must be [K, 12]")),
        };
        Ok(Checkpoint {
            config,
            cam,
            source,
            params,
            poses,
        })
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        self.to_archive()?.encode()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        Self::from_archive(&TensorArchive::decode(bytes)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(fs::write(path, self.encode()?)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}

// ---- PNG ------------------------------------------------------------------

fn to_byte(v: f64) -> u8 {
    ((v + 0.5) * 255.0).round().clamp(0.0, 255.0) as u8
}

/// 8-bit gray or RGB PNG with `[-0.5, 0.5] -> [0, 255]`.
pub fn encode_png(img: &Image) -> Result<Vec<u8>> {
    let color = match img.channels() {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        c => return Err(Error::invalid(format!("PNG output needs 1 or 3 channels, got {c}"))),
    };
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width() as u32, img.height() as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc
            .write_header()
            .map_err(|e| Error::format("png", e.to_string()))?;
        let bytes: Vec<u8> = img.data().iter().map(|&v| to_byte(v)).collect();
        w.write_image_data(&bytes)
            .map_err(|e| Error::format("png", e.to_string()))?;
    }
    Ok(out)
}

/// Decode any PNG to 8-bit RGB colors in `[-0.5, 0.5]`.
pub fn decode_png(bytes: &[u8]) -> Result<Image> {
    let mut dec = png::Decoder::new(Cursor::new(bytes));
    dec.set_transformations(png::Transformations::normalize_to_color8());
    dec.set_limits(png::Limits { bytes: 1 << 28 });
    let mut reader = dec.read_info().map_err(|e| Error::format("png", e.to_string()))?;
    let (w, h) = {
        let info = reader.info();
        (info.width as usize, info.height as usize)
    };
    if w == 0 || h == 0 || w.saturating_mul(h) > MAX_ELEMENTS / 4 {
        return Err(Error::format("png", "unsupported dimensions"));
    }
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::format("png", "image too large"))?;
    let mut buf = vec![0u8; size];
    let frame = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::format("png", e.to_string()))?;
    let (ct, _) = reader.output_color_type();
    let stride = frame.line_size;
    let channels = match ct {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(Error::format("png", "palette was not expanded")),
    };
    let data = &buf[..frame.buffer_size()];
    Ok(Image::from_fn(h, w, 3, |x, y, c| {
        let px = &data[y * stride + x * channels..];
        let b = if channels < 3 { px[0] } else { px[c] };
        b as f64 / 255.0 - 0.5
    }))
}

// ---- PFM ------------------------------------------------------------------

/// Single-channel little-endian PFM (scale `-1.0`), bottom row first.
pub fn encode_pfm(img: &Image) -> Result<Vec<u8>> {
    if img.channels() != 1 {
        return Err(Error::invalid("PFM output needs a single channel"));
    }
    let (w, h) = (img.width(), img.height());
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    for y in (0..h).rev() {
        for x in 0..w {
            out.extend_from_slice(&(img.get(x, y, 0) as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_pfm(bytes: &[u8]) -> Result<Image> {
    let bad = |r: &str| Error::format("pfm", r.to_string());
    // three whitespace-separated header tokens after the magic, then one
    // whitespace byte before the raster
    let mut pos = 0;
    let mut token = || -> Result<&[u8]> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos || pos - start > 32 {
            return Err(bad("truncated header"));
        }
        Ok(&bytes[start..pos])
    };
    match token()? {
        b"Pf" => {}
        b"PF" => return Err(bad("three-channel PFM is not supported")),
        _ => return Err(bad("bad magic")),
    }
    let num = |t: &[u8]| std::str::from_utf8(t).ok().map(str::to_owned);
    let w: usize = num(token()?).and_then(|s| s.parse().ok()).ok_or_else(|| bad("bad width"))?;
    let h: usize = num(token()?).and_then(|s| s.parse().ok()).ok_or_else(|| bad("bad height"))?;
    let scale: f64 = num(token()?).and_then(|s| s.parse().ok()).ok_or_else(|| bad("bad scale"))?;
    if w == 0 || h == 0 || w.saturating_mul(h) > MAX_ELEMENTS {
        return Err(bad("unsupported dimensions"));
    }
    if scale == 0.0 || !scale.is_finite() {
        return Err(bad("scale must be nonzero"));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(bad("missing raster separator"));
    }
    pos += 1;
    let raster = &bytes[pos..];
    if raster.len() != w * h * 4 {
        return Err(bad("raster size does not match the header"));
    }
    let little = scale < 0.0;
    let mut img = Image::new(h, w, 1);
    for (i, c) in raster.chunks_exact(4).enumerate() {
        let b: [u8; 4] = c.try_into().unwrap();
        let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        if !v.is_finite() {
            return Err(bad("non-finite sample"));
        }
        let (x, row) = (i % w, i / w);
        img.set(x, h - 1 - row, 0, v as f64);
    }
    Ok(img)
}

// ---- JSON and pose strings ---------------------------------------------------

/// Camera intrinsics plus `[R | t]` poses as 12 row-major reals each.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseFile {
    pub intrinsics: Camera,
    pub poses: Vec<Vec<f64>>,
}

impl PoseFile {
    pub fn new(cam: Camera, poses: &[PoseSE3]) -> Self {
        PoseFile {
            intrinsics: cam,
            poses: poses.iter().map(|p| p.to_rt_rows().to_vec()).collect(),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let f: PoseFile = serde_json::from_str(text)?;
        f.intrinsics
            .validate()
            .map_err(|e| Error::format("pose file", e.to_string()))?;
        f.decoded()?;
        Ok(f)
    }

    pub fn decoded(&self) -> Result<Vec<PoseSE3>> {
        self.poses
            .iter()
            .map(|p| PoseSE3::from_rt_rows(p).map_err(|e| Error::format("pose file", e.to_string())))
            .collect()
    }
}

pub fn parse_scene(text: &str) -> Result<crate::synthoracle::SceneSpec> {
    let spec: crate::synthoracle::SceneSpec = serde_json::from_str(text)?;
    spec.validate().map_err(|e| Error::format("scene", e.to_string()))?;
    Ok(spec)
}

/// `rx,ry,rz,tx,ty,tz`: axis-angle rotation then translation.
pub fn parse_pose_string(s: &str) -> Result<PoseSE3> {
    let vals: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::format("pose", e.to_string()))?;
    if vals.len() != 6 || vals.iter().any(|v| !v.is_finite()) {
        return Err(Error::format("pose", "expected six finite comma-separated numbers"));
    }
    Ok(PoseSE3::from_params(&vals.try_into().unwrap()))
}

// ---- frame sets on disk ------------------------------------------------------------

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(bytes)?;
    w.flush()?;
    Ok(())
}

pub fn frame_path(dir: &Path, kind: &str, i: usize, ext: &str) -> PathBuf {
    dir.join(format!("{kind}_{i:03}.{ext}"))
}

/// `poses.json`, `frame_NNN.png`, `depth_NNN.pfm`, `visibility_NNN.pfm`
/// and `highlight_NNN.pfm`.
pub fn write_frameset(dir: &Path, frames: &FrameSet) -> Result<()> {
    fs::create_dir_all(dir)?;
    let pf = PoseFile::new(frames.cam, &frames.poses);
    write_file(&dir.join("poses.json"), serde_json::to_string_pretty(&pf)?.as_bytes())?;
    for i in 0..frames.images.len() {
        write_file(&frame_path(dir, "frame", i, "png"), &encode_png(&frames.images[i])?)?;
        write_file(&frame_path(dir, "depth", i, "pfm"), &encode_pfm(&frames.depth[i])?)?;
        write_file(&frame_path(dir, "visibility", i, "pfm"), &encode_pfm(&frames.visibility[i])?)?;
        write_file(&frame_path(dir, "highlight", i, "pfm"), &encode_pfm(&frames.highlight[i])?)?;
    }
    Ok(())
}

/// Inverse of [`write_frameset`]; colors carry 8-bit quantization.
pub fn read_frameset(dir: &Path) -> Result<FrameSet> {
    let pf = PoseFile::parse(&fs::read_to_string(dir.join("poses.json"))?)?;
    let poses = pf.decoded()?;
    let mut fs_ = FrameSet {
        cam: pf.intrinsics,
        images: Vec::new(),
        poses,
        depth: Vec::new(),
        visibility: Vec::new(),
        highlight: Vec::new(),
    };
    let read_pfm = |kind: &str, i: usize| -> Result<Image> { decode_pfm(&fs::read(frame_path(dir, kind, i, "pfm"))?) };
    for i in 0..fs_.poses.len() {
        let img = decode_png(&fs::read(frame_path(dir, "frame", i, "png"))?)?;
        if img.width() != fs_.cam.width || img.height() != fs_.cam.height {
            return Err(Error::format("frame set", format!("frame {i} does not match the intrinsics")));
        }
        fs_.images.push(img);
        fs_.depth.push(read_pfm("depth", i)?);
        fs_.visibility.push(read_pfm("visibility", i)?);
        fs_.highlight.push(read_pfm("highlight", i)?);
    }
    Ok(fs_)
}
