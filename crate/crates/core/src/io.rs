//! On-disk formats: binary checkpoints and maps, PNG images, ASCII PLY
//! clouds, JSON manifests/results, and the loss-curve CSV.
//!
//! Every binary format is little-endian and starts with a 4-byte ASCII magic
//! followed by `u32` header fields; float payloads are stored as `f32`
//! regardless of the in-memory scalar type. Readers check the magic, the
//! header, and the exact byte length, so truncated or trailing-garbage files
//! fail with `ParseError` instead of being silently accepted.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{CameraView, Intrinsics};
use crate::efd::{Decoder, InstanceMap};
use crate::error::{Error, Result};
use crate::field::GaussianField;
use crate::float::{cast, Float};
use crate::geometry::PointCloud;
use crate::grasp::GraspProposal;
use crate::image::Image;
use crate::math::{Quat, RigidTransform, Vec3};
use crate::sh::SH_VALUES;
use crate::train::{LossReport, TrainConfig};

/// Field checkpoint magic.
pub const FIELD_MAGIC: &[u8; 4] = b"GGF1";
/// Rendered feature-map magic.
pub const FEATURE_MAP_MAGIC: &[u8; 4] = b"GGFM";
/// Per-view instance-feature file magic.
pub const INSTANCE_FEATURES_MAGIC: &[u8; 4] = b"GGIF";
/// Named embedding file magic.
pub const EMBEDDINGS_MAGIC: &[u8; 4] = b"GGQE";
/// Decoder checkpoint magic.
pub const DECODER_MAGIC: &[u8; 4] = b"GGDC";
/// Manifest schema accepted by [`read_manifest`].
pub const MANIFEST_SCHEMA: &str = "ggs-scene/1";
/// Orthonormality tolerance for poses read from files.
pub const POSE_TOLERANCE: f64 = 1e-5;

fn parse_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::ParseError { path: path.display().to_string(), detail: detail.into() }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path.display().to_string())
        } else {
            Error::Io(e)
        }
    })
}

fn read_text(path: &Path) -> Result<String> {
    let bytes = read_bytes(path)?;
    String::from_utf8(bytes).map_err(|e| parse_err(path, format!("not valid UTF-8: {e}")))
}

/// Bounds-checked little-endian reader over an in-memory file.
struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn new(buf: &'a [u8], path: &'a Path) -> Self {
        Self { buf, pos: 0, path }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(parse_err(
                self.path,
                format!(
                    "unexpected end of file (need {} bytes at offset {}, have {})",
                    n,
                    self.pos,
                    self.buf.len() - self.pos
                ),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn magic(&mut self, expect: &[u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != expect {
            return Err(parse_err(
                self.path,
                format!(
                    "bad magic: expected {:?}, found {:?}",
                    String::from_utf8_lossy(expect),
                    String::from_utf8_lossy(got)
                ),
            ));
        }
        Ok(())
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32(&mut self) -> Result<f32> {
        let b = self.take(4)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32s<T: Float>(&mut self, n: usize) -> Result<Vec<T>> {
        let b = self.take(n * 4)?;
        Ok(b.chunks_exact(4)
            .map(|c| cast(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect())
    }

    /// Rejects files with payload bytes past the declared contents.
    fn done(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(parse_err(
                self.path,
                format!("{} trailing bytes after declared contents", self.buf.len() - self.pos),
            ));
        }
        Ok(())
    }
}

fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_f32<T: Float>(out: &mut Vec<u8>, v: T) {
    out.extend_from_slice(&(v.to_f64_cfg() as f32).to_le_bytes());
}

// ---------------------------------------------------------------------------
// Field checkpoint (GGF1)
// ---------------------------------------------------------------------------

/// Bytes per primitive in a checkpoint with the given latent width.
fn field_stride(d_latent: usize) -> usize {
    (3 + 4 + 3 + 1 + SH_VALUES + d_latent) * 4
}

/// Serializes a field checkpoint: magic, `u32` count, `u32` latent width,
/// then per primitive `f32` mean (3), quaternion (w,x,y,z), scale (3),
/// opacity, harmonics (48), latent feature.
pub fn field_to_bytes<T: Float>(field: &GaussianField<T>) -> Vec<u8> {
    let n = field.len();
    let mut out = Vec::with_capacity(12 + n * field_stride(field.d_latent));
    out.extend_from_slice(FIELD_MAGIC);
    push_u32(&mut out, n as u32);
    push_u32(&mut out, field.d_latent as u32);
    for i in 0..n {
        for k in 0..3 {
            push_f32(&mut out, field.means[i][k]);
        }
        let q = field.rotations[i];
        for v in [q.w, q.x, q.y, q.z] {
            push_f32(&mut out, v);
        }
        for k in 0..3 {
            push_f32(&mut out, field.scales[i][k]);
        }
        push_f32(&mut out, field.opacities[i]);
        for v in field.sh_of(i) {
            push_f32(&mut out, *v);
        }
        for v in field.feature_of(i) {
            push_f32(&mut out, *v);
        }
    }
    out
}

pub fn write_field<T: Float>(path: &Path, field: &GaussianField<T>) -> Result<()> {
    fs::write(path, field_to_bytes(field))?;
    Ok(())
}

pub fn field_from_bytes<T: Float>(bytes: &[u8], origin: &Path) -> Result<GaussianField<T>> {
    let mut cur = Cursor::new(bytes, origin);
    cur.magic(FIELD_MAGIC)?;
    let n = cur.u32()? as usize;
    let d_latent = cur.u32()? as usize;
    let expect = 12 + n * field_stride(d_latent);
    if bytes.len() != expect {
        return Err(parse_err(
            origin,
            format!(
                "size mismatch: {} primitives at latent width {} need {} bytes, file has {}",
                n,
                d_latent,
                expect,
                bytes.len()
            ),
        ));
    }
    let mut field = GaussianField::empty(d_latent);
    for _ in 0..n {
        let m = cur.f32s::<T>(3)?;
        field.means.push(Vec3::new(m[0], m[1], m[2]));
        let q = cur.f32s::<T>(4)?;
        field.rotations.push(Quat::new(q[0], q[1], q[2], q[3]));
        let s = cur.f32s::<T>(3)?;
        field.scales.push(Vec3::new(s[0], s[1], s[2]));
        field.opacities.push(cast(cur.f32()? as f64));
        field.sh.extend(cur.f32s::<T>(SH_VALUES)?);
        field.features.extend(cur.f32s::<T>(d_latent)?);
    }
    cur.done()?;
    Ok(field)
}

pub fn read_field<T: Float>(path: &Path) -> Result<GaussianField<T>> {
    field_from_bytes(&read_bytes(path)?, path)
}

// ---------------------------------------------------------------------------
// Feature map (GGFM)
// ---------------------------------------------------------------------------

/// Writes a rendered multi-channel map as raw `f32`: 16-byte header (magic,
/// `u32` height, width, channels), then row-major data, channels innermost.
pub fn write_feature_map<T: Float>(path: &Path, map: &Image<T>) -> Result<()> {
    let mut out = Vec::with_capacity(16 + map.data().len() * 4);
    out.extend_from_slice(FEATURE_MAP_MAGIC);
    push_u32(&mut out, map.height() as u32);
    push_u32(&mut out, map.width() as u32);
    push_u32(&mut out, map.channels() as u32);
    for v in map.data() {
        push_f32(&mut out, *v);
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_feature_map<T: Float>(path: &Path) -> Result<Image<T>> {
    let bytes = read_bytes(path)?;
    let mut cur = Cursor::new(&bytes, path);
    cur.magic(FEATURE_MAP_MAGIC)?;
    let h = cur.u32()? as usize;
    let w = cur.u32()? as usize;
    let c = cur.u32()? as usize;
    let data = cur.f32s::<T>(h * w * c)?;
    cur.done()?;
    Ok(Image::from_vec(h, w, c, data))
}

// ---------------------------------------------------------------------------
// Instance features (GGIF)
// ---------------------------------------------------------------------------

/// Writes per-mask embeddings: magic, `u32` mask count, `u32` embedding
/// width, then per mask `u32` id + `f32` vector. Masks are ordered by id.
pub fn write_instance_features<T: Float>(
    path: &Path,
    features: &BTreeMap<u32, Vec<T>>,
    d_clip: usize,
) -> Result<()> {
    for (id, v) in features {
        if v.len() != d_clip {
            return Err(Error::ShapeMismatch(format!(
                "mask {} embedding has {} values, expected {}",
                id,
                v.len(),
                d_clip
            )));
        }
    }
    let mut out = Vec::with_capacity(12 + features.len() * (4 + d_clip * 4));
    out.extend_from_slice(INSTANCE_FEATURES_MAGIC);
    push_u32(&mut out, features.len() as u32);
    push_u32(&mut out, d_clip as u32);
    for (id, v) in features {
        push_u32(&mut out, *id);
        for x in v {
            push_f32(&mut out, *x);
        }
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_instance_features<T: Float>(path: &Path) -> Result<BTreeMap<u32, Vec<T>>> {
    let bytes = read_bytes(path)?;
    let mut cur = Cursor::new(&bytes, path);
    cur.magic(INSTANCE_FEATURES_MAGIC)?;
    let count = cur.u32()? as usize;
    let d_clip = cur.u32()? as usize;
    let mut map = BTreeMap::new();
    for _ in 0..count {
        let id = cur.u32()?;
        let v = cur.f32s::<T>(d_clip)?;
        if map.insert(id, v).is_some() {
            return Err(parse_err(path, format!("duplicate mask id {id}")));
        }
    }
    cur.done()?;
    Ok(map)
}

// ---------------------------------------------------------------------------
// Named embeddings (GGQE)
// ---------------------------------------------------------------------------

/// Writes named embeddings: magic, `u32` entry count, `u32` embedding width,
/// then per entry `u16` name length, UTF-8 name bytes, `f32` vector.
pub fn write_embeddings<T: Float>(path: &Path, entries: &[(String, Vec<T>)]) -> Result<()> {
    let d_clip = entries.first().map_or(0, |(_, v)| v.len());
    let mut out = Vec::new();
    out.extend_from_slice(EMBEDDINGS_MAGIC);
    push_u32(&mut out, entries.len() as u32);
    push_u32(&mut out, d_clip as u32);
    for (name, v) in entries {
        if v.len() != d_clip {
            return Err(Error::ShapeMismatch(format!(
                "embedding '{}' has {} values, expected {}",
                name,
                v.len(),
                d_clip
            )));
        }
        let name_bytes = name.as_bytes();
        if name_bytes.len() > u16::MAX as usize {
            return Err(Error::InvariantViolation(format!(
                "embedding name longer than {} bytes",
                u16::MAX
            )));
        }
        out.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        out.extend_from_slice(name_bytes);
        for x in v {
            push_f32(&mut out, *x);
        }
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_embeddings<T: Float>(path: &Path) -> Result<Vec<(String, Vec<T>)>> {
    let bytes = read_bytes(path)?;
    let mut cur = Cursor::new(&bytes, path);
    cur.magic(EMBEDDINGS_MAGIC)?;
    let count = cur.u32()? as usize;
    let d_clip = cur.u32()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let len = cur.u16()? as usize;
        let name = std::str::from_utf8(cur.take(len)?)
            .map_err(|e| parse_err(path, format!("embedding name is not UTF-8: {e}")))?
            .to_string();
        let v = cur.f32s::<T>(d_clip)?;
        entries.push((name, v));
    }
    cur.done()?;
    Ok(entries)
}

// ---------------------------------------------------------------------------
// Decoder checkpoint (GGDC)
// ---------------------------------------------------------------------------

/// Writes the feature decoder: magic, `u32` latent width, `u32` hidden
/// width, `u32` output width, then `f32` first-layer weights (hidden ×
/// latent, row-major), first-layer biases, second-layer weights (output ×
/// hidden, row-major), second-layer biases.
pub fn write_decoder<T: Float>(path: &Path, decoder: &Decoder<T>) -> Result<()> {
    let mut out = Vec::with_capacity(16 + decoder.param_count() * 4);
    out.extend_from_slice(DECODER_MAGIC);
    push_u32(&mut out, decoder.d_latent as u32);
    push_u32(&mut out, decoder.hidden as u32);
    push_u32(&mut out, decoder.d_clip as u32);
    for block in [&decoder.w1, &decoder.b1, &decoder.w2, &decoder.b2] {
        for v in block {
            push_f32(&mut out, *v);
        }
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_decoder<T: Float>(path: &Path) -> Result<Decoder<T>> {
    let bytes = read_bytes(path)?;
    let mut cur = Cursor::new(&bytes, path);
    cur.magic(DECODER_MAGIC)?;
    let d_latent = cur.u32()? as usize;
    let hidden = cur.u32()? as usize;
    let d_clip = cur.u32()? as usize;
    let decoder = Decoder {
        w1: cur.f32s::<T>(hidden * d_latent)?,
        b1: cur.f32s::<T>(hidden)?,
        w2: cur.f32s::<T>(d_clip * hidden)?,
        b2: cur.f32s::<T>(d_clip)?,
        d_latent,
        hidden,
        d_clip,
    };
    cur.done()?;
    Ok(decoder)
}

// ---------------------------------------------------------------------------
// PNG images
// ---------------------------------------------------------------------------

fn image_err(path: &Path, e: image::ImageError) -> Error {
    if let image::ImageError::IoError(ref io) = e {
        if io.kind() == std::io::ErrorKind::NotFound {
            return Error::MissingFile(path.display().to_string());
        }
    }
    parse_err(path, e.to_string())
}

fn open_png(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|e| image_err(path, e))
}

fn to_u8<T: Float>(v: T) -> u8 {
    (v.to_f64_cfg().clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a 3-channel image with values in `[0, 1]` as 8-bit RGB.
pub fn write_color_png<T: Float>(path: &Path, img: &Image<T>) -> Result<()> {
    if img.channels() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "color export needs 3 channels, got {}",
            img.channels()
        )));
    }
    let buf = image::RgbImage::from_fn(img.width() as u32, img.height() as u32, |x, y| {
        let p = img.px(y as usize, x as usize);
        image::Rgb([to_u8(p[0]), to_u8(p[1]), to_u8(p[2])])
    });
    buf.save_with_format(path, image::ImageFormat::Png).map_err(|e| image_err(path, e))
}

pub fn read_color_png<T: Float>(path: &Path) -> Result<Image<T>> {
    let buf = open_png(path)?.to_rgb8();
    let (w, h) = buf.dimensions();
    let data = buf.as_raw().iter().map(|&b| cast::<T>(b as f64 / 255.0)).collect();
    Ok(Image::from_vec(h as usize, w as usize, 3, data))
}

/// Writes a 1-channel depth map (meters) as 16-bit PNG. Stored units are
/// `depth_scale_mm` millimeters each; 0 marks invalid pixels, and depths
/// beyond the representable range saturate.
pub fn write_depth_png<T: Float>(path: &Path, depth: &Image<T>, depth_scale_mm: f64) -> Result<()> {
    if depth.channels() != 1 {
        return Err(Error::ShapeMismatch(format!(
            "depth export needs 1 channel, got {}",
            depth.channels()
        )));
    }
    if !(depth_scale_mm.is_finite() && depth_scale_mm > 0.0) {
        return Err(Error::InvariantViolation("depth scale must be positive".into()));
    }
    let buf = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_fn(
        depth.width() as u32,
        depth.height() as u32,
        |x, y| {
            let d = depth.at(y as usize, x as usize).to_f64_cfg();
            let units = if d > 0.0 { (d * 1000.0 / depth_scale_mm).round() } else { 0.0 };
            image::Luma([units.clamp(0.0, u16::MAX as f64) as u16])
        },
    );
    buf.save_with_format(path, image::ImageFormat::Png).map_err(|e| image_err(path, e))
}

/// Reads a 16-bit depth PNG back to meters; stored 0 stays 0 (invalid).
pub fn read_depth_png<T: Float>(path: &Path, depth_scale_mm: f64) -> Result<Image<T>> {
    let buf = open_png(path)?.to_luma16();
    let (w, h) = buf.dimensions();
    let data = buf
        .as_raw()
        .iter()
        .map(|&u| cast::<T>(u as f64 * depth_scale_mm / 1000.0))
        .collect();
    Ok(Image::from_vec(h as usize, w as usize, 1, data))
}

/// Writes an instance-id map as 16-bit PNG (pixel value = id, 0 = none).
pub fn write_instance_png(path: &Path, map: &InstanceMap) -> Result<()> {
    if let Some(&id) = map.data().iter().find(|&&id| id > u16::MAX as u32) {
        return Err(Error::InvariantViolation(format!(
            "instance id {id} exceeds the 16-bit PNG range"
        )));
    }
    let buf = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_fn(
        map.width() as u32,
        map.height() as u32,
        |x, y| image::Luma([map.id(y as usize, x as usize) as u16]),
    );
    buf.save_with_format(path, image::ImageFormat::Png).map_err(|e| image_err(path, e))
}

pub fn read_instance_png(path: &Path) -> Result<InstanceMap> {
    let buf = open_png(path)?.to_luma16();
    let (w, h) = buf.dimensions();
    let data = buf.as_raw().iter().map(|&u| u as u32).collect();
    Ok(InstanceMap::new(h as usize, w as usize, data))
}

/// Writes a 3-channel normal map as 8-bit RGB with components mapped
/// `(n + 1) / 2`. Quantization makes this lossy (~1/255 per component).
pub fn write_normal_png<T: Float>(path: &Path, normals: &Image<T>) -> Result<()> {
    if normals.channels() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "normal export needs 3 channels, got {}",
            normals.channels()
        )));
    }
    let buf = image::RgbImage::from_fn(normals.width() as u32, normals.height() as u32, |x, y| {
        let p = normals.px(y as usize, x as usize);
        let map = |v: T| to_u8((v + T::one()) * cast::<T>(0.5));
        image::Rgb([map(p[0]), map(p[1]), map(p[2])])
    });
    buf.save_with_format(path, image::ImageFormat::Png).map_err(|e| image_err(path, e))
}

/// Reads a normal PNG back to components in `[-1, 1]` (not re-normalized).
pub fn read_normal_png<T: Float>(path: &Path) -> Result<Image<T>> {
    let buf = open_png(path)?.to_rgb8();
    let (w, h) = buf.dimensions();
    let data = buf.as_raw().iter().map(|&b| cast::<T>(b as f64 / 255.0 * 2.0 - 1.0)).collect();
    Ok(Image::from_vec(h as usize, w as usize, 3, data))
}

/// Colormap anchors for relevance heatmaps, evenly spaced over `[0, 1]`:
/// 0.00 → (13, 8, 135), 0.25 → (126, 3, 168), 0.50 → (204, 71, 120),
/// 0.75 → (248, 149, 64), 1.00 → (240, 249, 33). Values between anchors
/// interpolate linearly per channel; out-of-range values clamp.
pub const RELEVANCE_COLORMAP: [[u8; 3]; 5] =
    [[13, 8, 135], [126, 3, 168], [204, 71, 120], [248, 149, 64], [240, 249, 33]];

/// Maps one relevance value through [`RELEVANCE_COLORMAP`].
pub fn relevance_color<T: Float>(v: T) -> [u8; 3] {
    let t = v.to_f64_cfg().clamp(0.0, 1.0) * (RELEVANCE_COLORMAP.len() - 1) as f64;
    let lo = (t.floor() as usize).min(RELEVANCE_COLORMAP.len() - 2);
    let f = t - lo as f64;
    let a = RELEVANCE_COLORMAP[lo];
    let b = RELEVANCE_COLORMAP[lo + 1];
    let mut out = [0u8; 3];
    for c in 0..3 {
        out[c] = (a[c] as f64 + (b[c] as f64 - a[c] as f64) * f).round() as u8;
    }
    out
}

/// Writes a 1-channel relevance map as an 8-bit color PNG using
/// [`RELEVANCE_COLORMAP`]. Exact values belong in the raw sidecar written
/// with [`write_feature_map`].
pub fn write_relevance_png<T: Float>(path: &Path, map: &Image<T>) -> Result<()> {
    if map.channels() != 1 {
        return Err(Error::ShapeMismatch(format!(
            "relevance export needs 1 channel, got {}",
            map.channels()
        )));
    }
    let buf = image::RgbImage::from_fn(map.width() as u32, map.height() as u32, |x, y| {
        image::Rgb(relevance_color(map.at(y as usize, x as usize)))
    });
    buf.save_with_format(path, image::ImageFormat::Png).map_err(|e| image_err(path, e))
}

// ---------------------------------------------------------------------------
// ASCII PLY point clouds
// ---------------------------------------------------------------------------

fn fmt_f32<T: Float>(v: T) -> String {
    format!("{}", v.to_f64_cfg() as f32)
}

/// Writes a point cloud as ASCII PLY: positions, then 8-bit `red green
/// blue` when colors are present, then `nx ny nz` when normals are present.
/// Floats print in shortest round-trip form, so `f32` data survives a
/// write/read cycle bit-for-bit; colors quantize to 8 bits.
pub fn write_ply<T: Float>(path: &Path, cloud: &PointCloud<T>) -> Result<()> {
    cloud.validate()?;
    let mut s = String::new();
    s.push_str("ply\nformat ascii 1.0\n");
    s.push_str(&format!("element vertex {}\n", cloud.len()));
    s.push_str("property float x\nproperty float y\nproperty float z\n");
    if cloud.colors.is_some() {
        s.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    }
    if cloud.normals.is_some() {
        s.push_str("property float nx\nproperty float ny\nproperty float nz\n");
    }
    s.push_str("end_header\n");
    for i in 0..cloud.len() {
        let p = &cloud.points[i];
        s.push_str(&format!("{} {} {}", fmt_f32(p[0]), fmt_f32(p[1]), fmt_f32(p[2])));
        if let Some(colors) = &cloud.colors {
            let c = colors[i];
            s.push_str(&format!(" {} {} {}", to_u8(c[0]), to_u8(c[1]), to_u8(c[2])));
        }
        if let Some(normals) = &cloud.normals {
            let n = &normals[i];
            s.push_str(&format!(" {} {} {}", fmt_f32(n[0]), fmt_f32(n[1]), fmt_f32(n[2])));
        }
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

/// Reads the ASCII PLY subset produced by [`write_ply`] (float x/y/z,
/// optional uchar red/green/blue, optional float nx/ny/nz, any property
/// order; unknown properties are skipped).
pub fn read_ply<T: Float>(path: &Path) -> Result<PointCloud<T>> {
    let text = read_text(path)?;
    let mut lines = text.lines();
    let mut header = Vec::new();
    for line in lines.by_ref() {
        header.push(line.trim().to_string());
        if line.trim() == "end_header" {
            break;
        }
    }
    if header.first().map(String::as_str) != Some("ply") {
        return Err(parse_err(path, "missing 'ply' signature"));
    }
    if header.last().map(String::as_str) != Some("end_header") {
        return Err(parse_err(path, "missing 'end_header'"));
    }
    if !header.iter().any(|l| l == "format ascii 1.0") {
        return Err(parse_err(path, "only 'format ascii 1.0' is supported"));
    }
    let mut count = None;
    let mut props = Vec::new();
    for line in &header {
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.as_slice() {
            ["element", "vertex", n] => {
                count = Some(
                    n.parse::<usize>()
                        .map_err(|e| parse_err(path, format!("bad vertex count: {e}")))?,
                );
            }
            ["element", kind, _] => {
                return Err(parse_err(path, format!("unsupported element '{kind}'")));
            }
            ["property", _, name] if count.is_some() => props.push(name.to_string()),
            _ => {}
        }
    }
    let count = count.ok_or_else(|| parse_err(path, "no vertex element"))?;
    let col_of = |name: &str| props.iter().position(|p| p == name);
    let (px, py, pz) = match (col_of("x"), col_of("y"), col_of("z")) {
        (Some(a), Some(b), Some(c)) => (a, b, c),
        _ => return Err(parse_err(path, "vertex element lacks x/y/z properties")),
    };
    let color_cols = match (col_of("red"), col_of("green"), col_of("blue")) {
        (Some(a), Some(b), Some(c)) => Some((a, b, c)),
        _ => None,
    };
    let normal_cols = match (col_of("nx"), col_of("ny"), col_of("nz")) {
        (Some(a), Some(b), Some(c)) => Some((a, b, c)),
        _ => None,
    };

    let mut cloud = PointCloud {
        points: Vec::with_capacity(count),
        colors: color_cols.map(|_| Vec::with_capacity(count)),
        normals: normal_cols.map(|_| Vec::with_capacity(count)),
    };
    for (i, line) in lines.take(count).enumerate() {
        let tok: Vec<&str> = line.split_whitespace().collect();
        if tok.len() != props.len() {
            return Err(parse_err(
                path,
                format!("vertex {}: {} values for {} properties", i, tok.len(), props.len()),
            ));
        }
        let f = |col: usize| -> Result<T> {
            tok[col]
                .parse::<f32>()
                .map(|v| cast(v as f64))
                .map_err(|e| parse_err(path, format!("vertex {i}: {e}")))
        };
        cloud.points.push(Vec3::new(f(px)?, f(py)?, f(pz)?));
        if let (Some((r, g, b)), Some(colors)) = (color_cols, cloud.colors.as_mut()) {
            let u = |col: usize| -> Result<T> {
                tok[col]
                    .parse::<u8>()
                    .map(|v| cast(v as f64 / 255.0))
                    .map_err(|e| parse_err(path, format!("vertex {i}: {e}")))
            };
            colors.push([u(r)?, u(g)?, u(b)?]);
        }
        if let (Some((nx, ny, nz)), Some(normals)) = (normal_cols, cloud.normals.as_mut()) {
            normals.push(Vec3::new(f(nx)?, f(ny)?, f(nz)?));
        }
    }
    if cloud.points.len() != count {
        return Err(parse_err(
            path,
            format!("expected {} vertices, file has {}", count, cloud.points.len()),
        ));
    }
    Ok(cloud)
}

// ---------------------------------------------------------------------------
// Scene manifest and loading
// ---------------------------------------------------------------------------

/// One view's file references and camera; paths are relative to the
/// manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewRecord {
    pub rgb: String,
    pub depth: String,
    pub instance_map: String,
    pub instance_features: String,
    /// `fx, fy, cx, cy` in pixels.
    pub intrinsics: [f64; 4],
    /// Camera-to-world pose, 4x4 row-major.
    pub pose: [f64; 16],
    /// Depth-validity ceiling in meters.
    pub max_range: f64,
}

/// Scene description on disk (JSON, schema [`MANIFEST_SCHEMA`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneManifest {
    pub schema: String,
    /// World-frame label for every pose and point in the scene.
    pub frame: String,
    /// Millimeters per stored unit in the depth PNGs.
    pub depth_scale_mm: f64,
    /// Named embedding file (queries + canonical phrases), relative path.
    pub embeddings: String,
    pub views: Vec<ViewRecord>,
}

pub fn read_manifest(path: &Path) -> Result<SceneManifest> {
    let text = read_text(path)?;
    let manifest: SceneManifest =
        serde_json::from_str(&text).map_err(|e| parse_err(path, e.to_string()))?;
    if manifest.schema != MANIFEST_SCHEMA {
        return Err(parse_err(
            path,
            format!("unsupported schema '{}', expected '{}'", manifest.schema, MANIFEST_SCHEMA),
        ));
    }
    Ok(manifest)
}

pub fn write_manifest(path: &Path, manifest: &SceneManifest) -> Result<()> {
    let mut text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Everything a scene directory provides, loaded and validated.
#[derive(Debug, Clone)]
pub struct SceneData<T> {
    pub manifest: SceneManifest,
    pub views: Vec<CameraView<T>>,
    /// Per-view instance maps, parallel to `views`.
    pub instances: Vec<InstanceMap>,
    /// Mask id → embedding, merged across views (first view wins).
    pub instance_embeddings: BTreeMap<u32, Vec<T>>,
    /// Named entries from the embedding file, in file order.
    pub embedding_entries: Vec<(String, Vec<T>)>,
}

fn named_invariant(view: usize, e: Error) -> Error {
    match e {
        Error::InvariantViolation(m) => Error::InvariantViolation(format!("view {view}: {m}")),
        Error::BadIntrinsics(m) => Error::BadIntrinsics(format!("view {view}: {m}")),
        other => other,
    }
}

/// Loads every view referenced by a manifest (in parallel), converts depth
/// to meters, and validates poses, intrinsics, and per-view resolutions.
pub fn load_scene<T: Float>(manifest_path: &Path) -> Result<SceneData<T>> {
    let manifest = read_manifest(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    if manifest.views.is_empty() {
        return Err(Error::InvariantViolation(format!(
            "{}: manifest lists no views",
            manifest_path.display()
        )));
    }
    if !(manifest.depth_scale_mm.is_finite() && manifest.depth_scale_mm > 0.0) {
        return Err(Error::InvariantViolation(format!(
            "{}: depth scale must be positive",
            manifest_path.display()
        )));
    }

    type Loaded<T> = (CameraView<T>, InstanceMap, BTreeMap<u32, Vec<T>>);
    let per_view: Vec<Loaded<T>> = manifest
        .views
        .par_iter()
        .enumerate()
        .map(|(i, rec)| -> Result<Loaded<T>> {
            let pose_rows: [T; 16] = std::array::from_fn(|k| cast(rec.pose[k]));
            let pose = RigidTransform::from_matrix4_rows(&pose_rows, cast(POSE_TOLERANCE))
                .map_err(|e| named_invariant(i, e))?;
            let intrinsics = Intrinsics {
                fx: cast::<T>(rec.intrinsics[0]),
                fy: cast(rec.intrinsics[1]),
                cx: cast(rec.intrinsics[2]),
                cy: cast(rec.intrinsics[3]),
            };
            intrinsics.validate().map_err(|e| named_invariant(i, e))?;
            let rgb = read_color_png::<T>(&dir.join(&rec.rgb))?;
            let depth = read_depth_png::<T>(&dir.join(&rec.depth), manifest.depth_scale_mm)?;
            let instances = read_instance_png(&dir.join(&rec.instance_map))?;
            let features = read_instance_features::<T>(&dir.join(&rec.instance_features))?;
            if depth.height() != rgb.height()
                || depth.width() != rgb.width()
                || instances.height() != rgb.height()
                || instances.width() != rgb.width()
            {
                return Err(Error::InvariantViolation(format!(
                    "view {}: resolutions disagree (rgb {}x{}, depth {}x{}, instances {}x{})",
                    i,
                    rgb.height(),
                    rgb.width(),
                    depth.height(),
                    depth.width(),
                    instances.height(),
                    instances.width()
                )));
            }
            let view = CameraView {
                intrinsics,
                pose,
                rgb,
                depth,
                max_range: cast(rec.max_range),
            };
            view.validate().map_err(|e| named_invariant(i, e))?;
            Ok((view, instances, features))
        })
        .collect::<Result<_>>()?;

    let mut views = Vec::with_capacity(per_view.len());
    let mut instances = Vec::with_capacity(per_view.len());
    let mut instance_embeddings = BTreeMap::new();
    for (view, map, features) in per_view {
        views.push(view);
        instances.push(map);
        for (id, v) in features {
            instance_embeddings.entry(id).or_insert(v);
        }
    }
    let embedding_entries = read_embeddings::<T>(&dir.join(&manifest.embeddings))?;
    Ok(SceneData { manifest, views, instances, instance_embeddings, embedding_entries })
}

/// Writes a loaded scene back to `dir` using the manifest's relative paths.
/// Loading the result reproduces the input bit-for-bit (depth and colors are
/// already quantized to their on-disk grids after a load).
pub fn write_scene<T: Float>(dir: &Path, manifest_name: &str, data: &SceneData<T>) -> Result<()> {
    if data.views.len() != data.manifest.views.len() || data.views.len() != data.instances.len() {
        return Err(Error::ShapeMismatch(format!(
            "scene has {} views, {} records, {} instance maps",
            data.views.len(),
            data.manifest.views.len(),
            data.instances.len()
        )));
    }
    fs::create_dir_all(dir)?;
    for ((view, map), rec) in data.views.iter().zip(&data.instances).zip(&data.manifest.views) {
        write_color_png(&dir.join(&rec.rgb), &view.rgb)?;
        write_depth_png(&dir.join(&rec.depth), &view.depth, data.manifest.depth_scale_mm)?;
        write_instance_png(&dir.join(&rec.instance_map), map)?;
        let mut per_view = BTreeMap::new();
        for id in map.areas().keys() {
            if let Some(v) = data.instance_embeddings.get(id) {
                per_view.insert(*id, v.clone());
            }
        }
        let d_clip = per_view.values().next().map_or(0, Vec::len);
        write_instance_features(&dir.join(&rec.instance_features), &per_view, d_clip)?;
    }
    write_embeddings(&dir.join(&data.manifest.embeddings), &data.embedding_entries)?;
    write_manifest(&dir.join(manifest_name), &data.manifest)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Loss curves (CSV)
// ---------------------------------------------------------------------------

/// Writes loss curves as CSV: iteration, view, per-term columns, total.
pub fn write_loss_csv<T: Float>(path: &Path, reports: &[LossReport<T>]) -> Result<()> {
    let mut s = String::from("iteration,view,rgb,depth,normal,contrastive,distill,total\n");
    for r in reports {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.iteration,
            r.view,
            r.rgb.to_f64_cfg(),
            r.depth.to_f64_cfg(),
            r.normal.to_f64_cfg(),
            r.contrastive.to_f64_cfg(),
            r.distill.to_f64_cfg(),
            r.total.to_f64_cfg(),
        ));
    }
    fs::write(path, s)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Train config file
// ---------------------------------------------------------------------------

pub fn read_train_config(path: &Path) -> Result<TrainConfig> {
    TrainConfig::parse_str(&read_text(path)?, &path.display().to_string())
}

pub fn write_train_config(path: &Path, cfg: &TrainConfig) -> Result<()> {
    fs::write(path, cfg.to_text())?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Grasp proposal JSON
// ---------------------------------------------------------------------------

/// One proposal as stored in JSON; `feasible`/`angle_sum_rad` appear only in
/// filter output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalRecord {
    /// Gripper frame in world coordinates, 4x4 row-major.
    pub pose: [f64; 16],
    pub width: f64,
    pub height: f64,
    pub depth: f64,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contacts: Option<[[f64; 3]; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feasible: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub angle_sum_rad: Option<f64>,
}

impl ProposalRecord {
    pub fn from_proposal<T: Float>(p: &GraspProposal<T>) -> Self {
        let rows = p.pose.to_matrix4_rows();
        Self {
            pose: std::array::from_fn(|k| rows[k].to_f64_cfg()),
            width: p.width.to_f64_cfg(),
            height: p.height.to_f64_cfg(),
            depth: p.depth.to_f64_cfg(),
            score: p.score.to_f64_cfg(),
            contacts: p
                .contacts
                .map(|cs| cs.map(|c| [c[0].to_f64_cfg(), c[1].to_f64_cfg(), c[2].to_f64_cfg()])),
            feasible: None,
            angle_sum_rad: None,
        }
    }

    pub fn to_proposal<T: Float>(&self, index: usize) -> Result<GraspProposal<T>> {
        let rows: [T; 16] = std::array::from_fn(|k| cast(self.pose[k]));
        let pose = RigidTransform::from_matrix4_rows(&rows, cast(POSE_TOLERANCE))
            .map_err(|e| named_proposal(index, e))?;
        let p = GraspProposal {
            pose,
            width: cast::<T>(self.width),
            height: cast(self.height),
            depth: cast(self.depth),
            score: cast(self.score),
            contacts: self
                .contacts
                .map(|cs| cs.map(|c| Vec3::new(cast(c[0]), cast(c[1]), cast(c[2])))),
        };
        p.validate().map_err(|e| named_proposal(index, e))?;
        Ok(p)
    }
}

fn named_proposal(index: usize, e: Error) -> Error {
    match e {
        Error::InvariantViolation(m) => {
            Error::InvariantViolation(format!("proposal {index}: {m}"))
        }
        other => other,
    }
}

/// Reads a JSON array of proposals and validates each.
pub fn read_proposals<T: Float>(path: &Path) -> Result<Vec<GraspProposal<T>>> {
    let text = read_text(path)?;
    let records: Vec<ProposalRecord> =
        serde_json::from_str(&text).map_err(|e| parse_err(path, e.to_string()))?;
    records.iter().enumerate().map(|(i, r)| r.to_proposal(i)).collect()
}

/// Writes a JSON array of proposals (annotated records included verbatim).
pub fn write_proposals(path: &Path, records: &[ProposalRecord]) -> Result<()> {
    let mut text = serde_json::to_string_pretty(records).expect("records serialize");
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Query result and transform JSON
// ---------------------------------------------------------------------------

/// Localization output for one query: bounding box and hull vertices of the
/// re-projected surface points, plus the threshold used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResultRecord {
    pub query: String,
    pub threshold: f64,
    pub bbox_min: [f64; 3],
    pub bbox_max: [f64; 3],
    pub hull_vertices: Vec<[f64; 3]>,
}

pub fn write_query_result(path: &Path, result: &QueryResultRecord) -> Result<()> {
    let mut text = serde_json::to_string_pretty(result).expect("query result serializes");
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_query_result(path: &Path) -> Result<QueryResultRecord> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| parse_err(path, e.to_string()))
}

/// A rigid transform on disk: `{"matrix": [16 row-major floats]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformRecord {
    pub matrix: [f64; 16],
}

pub fn read_transform<T: Float>(path: &Path) -> Result<RigidTransform<T>> {
    let text = read_text(path)?;
    let rec: TransformRecord =
        serde_json::from_str(&text).map_err(|e| parse_err(path, e.to_string()))?;
    let rows: [T; 16] = std::array::from_fn(|k| cast(rec.matrix[k]));
    RigidTransform::from_matrix4_rows(&rows, cast(POSE_TOLERANCE))
}

pub fn write_transform<T: Float>(path: &Path, transform: &RigidTransform<T>) -> Result<()> {
    let rows = transform.to_matrix4_rows();
    let rec = TransformRecord { matrix: std::array::from_fn(|k| rows[k].to_f64_cfg()) };
    let mut text = serde_json::to_string_pretty(&rec).expect("transform serializes");
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};
    use std::path::PathBuf;

    fn scratch(name: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("ggs-io-{}-{}", std::process::id(), name));
        fs::create_dir_all(&dir).unwrap();
        dir
    }

    fn random_field(n: usize, d_latent: usize, rng: &mut StdRng) -> GaussianField<f32> {
        let mut f = GaussianField::empty(d_latent);
        for _ in 0..n {
            f.means.push(Vec3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(1.0..3.0),
            ));
            let q = Quat::new(
                rng.gen_range(-1.0..1.0f32),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            )
            .normalized();
            f.rotations.push(q);
            f.scales.push(Vec3::new(
                rng.gen_range(0.01..0.1),
                rng.gen_range(0.01..0.1),
                rng.gen_range(0.01..0.1),
            ));
            f.opacities.push(rng.gen_range(0.05..0.95));
            for _ in 0..SH_VALUES {
                f.sh.push(rng.gen_range(-0.5..0.5));
            }
            let mut lat: Vec<f32> = (0..d_latent).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let norm = lat.iter().map(|v| v * v).sum::<f32>().sqrt();
            for v in &mut lat {
                *v /= norm;
            }
            f.features.extend(lat);
        }
        f
    }

    #[test]
    fn field_checkpoint_round_trips_bit_for_bit() {
        let dir = scratch("field");
        let mut rng = StdRng::seed_from_u64(7);
        let field = random_field(23, 16, &mut rng);
        let path = dir.join("field.ggf");
        write_field(&path, &field).unwrap();
        let back = read_field::<f32>(&path).unwrap();
        assert_eq!(back.d_latent, field.d_latent);
        assert_eq!(back.means, field.means);
        assert_eq!(back.rotations, field.rotations);
        assert_eq!(back.scales, field.scales);
        assert_eq!(back.opacities, field.opacities);
        assert_eq!(back.sh, field.sh);
        assert_eq!(back.features, field.features);
        // A second write of the re-read field is byte-identical.
        assert_eq!(field_to_bytes(&back), fs::read(&path).unwrap());
    }

    #[test]
    fn field_reader_rejects_corruption() {
        let dir = scratch("field-bad");
        let mut rng = StdRng::seed_from_u64(8);
        let field = random_field(3, 4, &mut rng);
        let mut bytes = field_to_bytes(&field);

        let truncated = &bytes[..bytes.len() - 5];
        let err = field_from_bytes::<f32>(truncated, &dir.join("t.ggf")).unwrap_err();
        assert_eq!(err.code(), "ParseError");

        bytes[0] = b'X';
        let err = field_from_bytes::<f32>(&bytes, &dir.join("m.ggf")).unwrap_err();
        assert_eq!(err.code(), "ParseError");

        let err = read_field::<f32>(&dir.join("absent.ggf")).unwrap_err();
        assert_eq!(err.code(), "MissingFile");
    }

    #[test]
    fn feature_map_has_a_16_byte_header_and_round_trips() {
        let dir = scratch("fmap");
        let mut rng = StdRng::seed_from_u64(9);
        let data: Vec<f32> = (0..5 * 4 * 3).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let map = Image::from_vec(5, 4, 3, data);
        let path = dir.join("feat.ggfm");
        write_feature_map(&path, &map).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(bytes.len(), 16 + 5 * 4 * 3 * 4);
        assert_eq!(&bytes[..4], FEATURE_MAP_MAGIC);
        let back = read_feature_map::<f32>(&path).unwrap();
        assert_eq!(back.height(), 5);
        assert_eq!(back.width(), 4);
        assert_eq!(back.channels(), 3);
        assert_eq!(back.data(), map.data());
    }

    #[test]
    fn instance_features_round_trip_ordered_by_id() {
        let dir = scratch("gif");
        let mut features = BTreeMap::new();
        features.insert(2u32, vec![0.5f32, -0.25, 0.125]);
        features.insert(1u32, vec![1.0f32, 0.0, 0.0]);
        let path = dir.join("masks.ggif");
        write_instance_features(&path, &features, 3).unwrap();
        let back = read_instance_features::<f32>(&path).unwrap();
        assert_eq!(back, features);

        let err = write_instance_features(&path, &features, 4).unwrap_err();
        assert_eq!(err.code(), "ShapeMismatch");
    }

    #[test]
    fn named_embeddings_round_trip_with_long_names() {
        let dir = scratch("gqe");
        let long = "q".repeat(300);
        let entries = vec![
            ("object".to_string(), vec![1.0f32, 0.0]),
            (long, vec![0.0f32, -1.0]),
            ("obj1".to_string(), vec![0.6f32, 0.8]),
        ];
        let path = dir.join("emb.ggqe");
        write_embeddings(&path, &entries).unwrap();
        let back = read_embeddings::<f32>(&path).unwrap();
        assert_eq!(back, entries);
    }

    #[test]
    fn decoder_checkpoint_round_trips_bit_for_bit() {
        let dir = scratch("dec");
        let mut rng = StdRng::seed_from_u64(11);
        let dec = Decoder::<f32>::init(8, 32, 64, &mut rng);
        let path = dir.join("decoder.ggdc");
        write_decoder(&path, &dec).unwrap();
        let back = read_decoder::<f32>(&path).unwrap();
        assert_eq!(back.w1, dec.w1);
        assert_eq!(back.b1, dec.b1);
        assert_eq!(back.w2, dec.w2);
        assert_eq!(back.b2, dec.b2);
        assert_eq!((back.d_latent, back.hidden, back.d_clip), (8, 32, 64));
    }

    #[test]
    fn color_png_round_trips_on_the_8_bit_grid() {
        let dir = scratch("rgb");
        let mut rng = StdRng::seed_from_u64(12);
        let data: Vec<f32> =
            (0..6 * 5 * 3).map(|_| rng.gen_range(0u32..=255) as f32 / 255.0).collect();
        let img = Image::from_vec(6, 5, 3, data);
        let path = dir.join("color.png");
        write_color_png(&path, &img).unwrap();
        let back = read_color_png::<f32>(&path).unwrap();
        assert_eq!(back.data(), img.data());

        // Arbitrary values land on the nearest 8-bit level.
        let odd = Image::from_vec(1, 1, 3, vec![0.5f32, 1.7, -0.3]);
        write_color_png(&path, &odd).unwrap();
        let back = read_color_png::<f32>(&path).unwrap();
        assert!((back.px(0, 0)[0] - 0.5).abs() <= 0.51 / 255.0);
        assert_eq!(back.px(0, 0)[1], 1.0);
        assert_eq!(back.px(0, 0)[2], 0.0);
    }

    #[test]
    fn depth_png_keeps_millimeters_and_invalid_zero() {
        let dir = scratch("depth");
        let depth =
            Image::from_vec(2, 3, 1, vec![0.0f32, 0.001, 1.234, 2.5, 65.535, 100.0]);
        let path = dir.join("depth.png");
        write_depth_png(&path, &depth, 1.0).unwrap();
        let back = read_depth_png::<f32>(&path, 1.0).unwrap();
        assert_eq!(back.at(0, 0), 0.0);
        assert_eq!(back.at(0, 1), 0.001);
        assert_eq!(back.at(0, 2), 1.234);
        assert_eq!(back.at(1, 0), 2.5);
        assert_eq!(back.at(1, 1), 65.535);
        // Past the representable range saturates rather than wrapping.
        assert_eq!(back.at(1, 2), 65.535);

        // Coarser stored units extend the range at reduced resolution.
        write_depth_png(&path, &depth, 4.0).unwrap();
        let coarse = read_depth_png::<f32>(&path, 4.0).unwrap();
        assert_eq!(coarse.at(1, 2), 100.0);
        // f32's 1.234 sits just under the 4 mm half-step, so it rounds down.
        assert_eq!(coarse.at(0, 2), 1.232);
    }

    #[test]
    fn instance_png_round_trips_ids() {
        let dir = scratch("inst");
        let map = InstanceMap::new(2, 2, vec![0, 1, 2, 65535]);
        let path = dir.join("inst.png");
        write_instance_png(&path, &map).unwrap();
        let back = read_instance_png(&path).unwrap();
        assert_eq!(back, map);

        let too_big = InstanceMap::new(1, 1, vec![65536]);
        let err = write_instance_png(&path, &too_big).unwrap_err();
        assert_eq!(err.code(), "InvariantViolation");
    }

    #[test]
    fn normal_png_quantizes_to_the_mapped_grid() {
        let dir = scratch("norm");
        let frac = 1.0f32 / 3.0;
        let normals = Image::from_vec(
            1,
            2,
            3,
            vec![0.0, 0.0, -1.0, frac.sqrt(), frac.sqrt(), frac.sqrt()],
        );
        let path = dir.join("normal.png");
        write_normal_png(&path, &normals).unwrap();
        let back = read_normal_png::<f32>(&path).unwrap();
        for k in 0..6 {
            let (r, c, ch) = (0, k / 3, k % 3);
            assert!(
                (back.px(r, c)[ch] - normals.px(r, c)[ch]).abs() <= 1.01 / 255.0,
                "component {k} drifted past one quantization step"
            );
        }
    }

    #[test]
    fn relevance_colormap_hits_its_anchors() {
        for (i, anchor) in RELEVANCE_COLORMAP.iter().enumerate() {
            let v = i as f64 / (RELEVANCE_COLORMAP.len() - 1) as f64;
            assert_eq!(relevance_color(v), *anchor);
        }
        assert_eq!(relevance_color(-0.5), RELEVANCE_COLORMAP[0]);
        assert_eq!(relevance_color(1.5), RELEVANCE_COLORMAP[4]);

        let dir = scratch("relevance");
        let map = Image::from_vec(1, 5, 1, vec![0.0f32, 0.25, 0.5, 0.75, 1.0]);
        let path = dir.join("rel.png");
        write_relevance_png(&path, &map).unwrap();
        let rgb = read_color_png::<f32>(&path).unwrap();
        for (c, anchor) in RELEVANCE_COLORMAP.iter().enumerate() {
            for ch in 0..3 {
                assert_eq!(rgb.px(0, c)[ch], anchor[ch] as f32 / 255.0);
            }
        }
    }

    #[test]
    fn ply_round_trips_float_payloads_exactly() {
        let dir = scratch("ply");
        let mut rng = StdRng::seed_from_u64(13);
        let n = 40;
        let mut cloud = PointCloud::<f32> {
            points: Vec::new(),
            colors: Some(Vec::new()),
            normals: Some(Vec::new()),
        };
        for _ in 0..n {
            cloud.points.push(Vec3::new(
                rng.gen_range(-10.0..10.0),
                rng.gen_range(-10.0..10.0),
                rng.gen_range(-10.0..10.0),
            ));
            cloud.colors.as_mut().unwrap().push([
                rng.gen_range(0u32..=255) as f32 / 255.0,
                rng.gen_range(0u32..=255) as f32 / 255.0,
                rng.gen_range(0u32..=255) as f32 / 255.0,
            ]);
            let v = Vec3::new(
                rng.gen_range(-1.0..1.0f32),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            )
            .normalize();
            cloud.normals.as_mut().unwrap().push(v);
        }
        let path = dir.join("cloud.ply");
        write_ply(&path, &cloud).unwrap();
        let back = read_ply::<f32>(&path).unwrap();
        assert_eq!(back.points, cloud.points);
        assert_eq!(back.colors, cloud.colors);
        assert_eq!(back.normals, cloud.normals);
    }

    #[test]
    fn ply_omits_absent_attributes() {
        let dir = scratch("ply-bare");
        let cloud = PointCloud::<f32> {
            points: vec![Vec3::new(1.0, 2.0, 3.0), Vec3::new(-0.5, 0.25, 0.125)],
            colors: None,
            normals: None,
        };
        let path = dir.join("bare.ply");
        write_ply(&path, &cloud).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(!text.contains("red"));
        assert!(!text.contains("nx"));
        let back = read_ply::<f32>(&path).unwrap();
        assert_eq!(back.points, cloud.points);
        assert!(back.colors.is_none());
        assert!(back.normals.is_none());
    }

    fn tiny_scene(dir: &Path) -> SceneManifest {
        let rgb = Image::from_vec(
            2,
            2,
            3,
            (0..12).map(|k| (k * 20) as f32 / 255.0).collect(),
        );
        let depth = Image::from_vec(2, 2, 1, vec![1.5f32, 2.0, 0.0, 2.5]);
        let inst = InstanceMap::new(2, 2, vec![0, 1, 1, 0]);
        write_color_png(&dir.join("v0_rgb.png"), &rgb).unwrap();
        write_depth_png(&dir.join("v0_depth.png"), &depth, 1.0).unwrap();
        write_instance_png(&dir.join("v0_inst.png"), &inst).unwrap();
        let mut feats = BTreeMap::new();
        feats.insert(1u32, vec![0.6f32, 0.8]);
        write_instance_features(&dir.join("v0_feat.ggif"), &feats, 2).unwrap();
        write_embeddings(
            &dir.join("emb.ggqe"),
            &[("obj1".to_string(), vec![0.6f32, 0.8])],
        )
        .unwrap();
        SceneManifest {
            schema: MANIFEST_SCHEMA.to_string(),
            frame: "world".to_string(),
            depth_scale_mm: 1.0,
            embeddings: "emb.ggqe".to_string(),
            views: vec![ViewRecord {
                rgb: "v0_rgb.png".to_string(),
                depth: "v0_depth.png".to_string(),
                instance_map: "v0_inst.png".to_string(),
                instance_features: "v0_feat.ggif".to_string(),
                intrinsics: [2.0, 2.0, 1.0, 1.0],
                pose: [
                    1.0, 0.0, 0.0, 0.1,
                    0.0, 1.0, 0.0, -0.2,
                    0.0, 0.0, 1.0, 0.3,
                    0.0, 0.0, 0.0, 1.0,
                ],
                max_range: 10.0,
            }],
        }
    }

    #[test]
    fn minimal_scene_loads_with_counts_intact() {
        let dir = scratch("scene");
        let manifest = tiny_scene(&dir);
        write_manifest(&dir.join("scene.json"), &manifest).unwrap();
        let data = load_scene::<f32>(&dir.join("scene.json")).unwrap();
        assert_eq!(data.views.len(), 1);
        assert_eq!(data.instances.len(), 1);
        assert_eq!(data.views[0].height(), 2);
        assert_eq!(data.views[0].depth.at(0, 0), 1.5);
        assert_eq!(data.views[0].depth.at(1, 0), 0.0);
        assert_eq!(data.instances[0].id(0, 1), 1);
        assert_eq!(data.instance_embeddings[&1], vec![0.6, 0.8]);
        assert_eq!(data.embedding_entries.len(), 1);
        assert_eq!(data.views[0].pose.translation, Vec3::new(0.1, -0.2, 0.3));
    }

    #[test]
    fn scene_load_write_load_is_a_fixed_point() {
        let dir = scratch("scene-fp");
        let manifest = tiny_scene(&dir);
        write_manifest(&dir.join("scene.json"), &manifest).unwrap();
        let first = load_scene::<f32>(&dir.join("scene.json")).unwrap();

        let copy = scratch("scene-fp-copy");
        write_scene(&copy, "scene.json", &first).unwrap();
        let second = load_scene::<f32>(&copy.join("scene.json")).unwrap();

        assert_eq!(second.manifest, first.manifest);
        assert_eq!(second.views[0].rgb.data(), first.views[0].rgb.data());
        assert_eq!(second.views[0].depth.data(), first.views[0].depth.data());
        assert_eq!(second.instances, first.instances);
        assert_eq!(second.instance_embeddings, first.instance_embeddings);
        assert_eq!(second.embedding_entries, first.embedding_entries);
    }

    #[test]
    fn scene_loader_names_the_offending_view() {
        let dir = scratch("scene-bad");
        let mut manifest = tiny_scene(&dir);
        manifest.views[0].pose[0] = 1.1;
        write_manifest(&dir.join("scene.json"), &manifest).unwrap();
        let err = load_scene::<f32>(&dir.join("scene.json")).unwrap_err();
        assert_eq!(err.code(), "InvariantViolation");
        assert!(err.to_string().contains("view 0"), "got: {err}");

        manifest.views[0].pose[0] = 1.0;
        manifest.views[0].rgb = "nowhere.png".to_string();
        write_manifest(&dir.join("scene.json"), &manifest).unwrap();
        let err = load_scene::<f32>(&dir.join("scene.json")).unwrap_err();
        assert_eq!(err.code(), "MissingFile");

        manifest.views[0].rgb = "v0_rgb.png".to_string();
        manifest.schema = "ggs-scene/2".to_string();
        write_manifest(&dir.join("scene.json"), &manifest).unwrap();
        let err = load_scene::<f32>(&dir.join("scene.json")).unwrap_err();
        assert_eq!(err.code(), "ParseError");
    }

    #[test]
    fn scene_loader_rejects_mismatched_resolutions() {
        let dir = scratch("scene-res");
        let manifest = tiny_scene(&dir);
        let wide = Image::from_vec(2, 3, 1, vec![1.0f32; 6]);
        write_depth_png(&dir.join("v0_depth.png"), &wide, 1.0).unwrap();
        write_manifest(&dir.join("scene.json"), &manifest).unwrap();
        let err = load_scene::<f32>(&dir.join("scene.json")).unwrap_err();
        assert_eq!(err.code(), "InvariantViolation");
        assert!(err.to_string().contains("view 0"), "got: {err}");
    }

    #[test]
    fn loss_csv_matches_the_documented_layout() {
        let dir = scratch("csv");
        let reports = vec![LossReport {
            iteration: 3,
            view: 1,
            rgb: 0.5f64,
            depth: 0.25,
            normal: 0.125,
            contrastive: 0.0625,
            distill: 0.03125,
            total: 0.96875,
            valid_depth_px: 42,
        }];
        let path = dir.join("loss.csv");
        write_loss_csv(&path, &reports).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(
            text,
            "iteration,view,rgb,depth,normal,contrastive,distill,total\n\
             3,1,0.5,0.25,0.125,0.0625,0.03125,0.96875\n"
        );
    }

    #[test]
    fn proposals_round_trip_and_derive_missing_contacts() {
        let dir = scratch("props");
        let json = r#"[
            {"pose": [1,0,0, 0.1, 0,1,0, 0.2, 0,0,1, 0.3, 0,0,0,1],
             "width": 0.04, "height": 0.02, "depth": 0.01, "score": 0.9},
            {"pose": [1,0,0,0, 0,1,0,0, 0,0,1,0, 0,0,0,1],
             "width": 0.04, "height": 0.02, "depth": 0.01, "score": 0.5,
             "contacts": [[0.0, -0.02, 0.01], [0.0, 0.02, 0.01]]}
        ]"#;
        let path = dir.join("props.json");
        fs::write(&path, json).unwrap();
        let props = read_proposals::<f64>(&path).unwrap();
        assert_eq!(props.len(), 2);
        assert!(props[0].contacts.is_none());
        let tips = props[0].contact_points();
        assert!((tips[0] - Vec3::new(0.1, 0.2 - 0.02, 0.3 + 0.01)).norm() < 1e-12);
        assert!(props[1].contacts.is_some());

        let mut records: Vec<ProposalRecord> =
            props.iter().map(ProposalRecord::from_proposal).collect();
        records[0].feasible = Some(true);
        records[0].angle_sum_rad = Some(0.25);
        let out = dir.join("out.json");
        write_proposals(&out, &records).unwrap();
        let text = fs::read_to_string(&out).unwrap();
        assert!(text.contains("\"feasible\": true"));
        assert!(text.contains("\"angle_sum_rad\": 0.25"));
        let back: Vec<ProposalRecord> = serde_json::from_str(&text).unwrap();
        assert_eq!(back, records);
    }

    #[test]
    fn proposal_with_inconsistent_contacts_is_rejected_by_index() {
        let dir = scratch("props-bad");
        let json = r#"[{"pose": [1,0,0,0, 0,1,0,0, 0,0,1,0, 0,0,0,1],
             "width": 0.01, "height": 0.02, "depth": 0.01, "score": 0.5,
             "contacts": [[0.0, -0.5, 0.0], [0.0, 0.5, 0.0]]}]"#;
        let path = dir.join("bad.json");
        fs::write(&path, json).unwrap();
        let err = read_proposals::<f64>(&path).unwrap_err();
        assert_eq!(err.code(), "InvariantViolation");
        assert!(err.to_string().contains("proposal 0"), "got: {err}");
    }

    #[test]
    fn transform_and_query_records_round_trip() {
        let dir = scratch("json-misc");
        let t = RigidTransform::<f64> {
            rotation: crate::math::Mat3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0),
            translation: Vec3::new(0.5, -0.25, 0.125),
        };
        let path = dir.join("transform.json");
        write_transform(&path, &t).unwrap();
        let back = read_transform::<f64>(&path).unwrap();
        assert!((back.rotation - t.rotation).norm() < 1e-15);
        assert!((back.translation - t.translation).norm() < 1e-15);

        let refl = TransformRecord {
            matrix: [
                -1.0, 0.0, 0.0, 0.0,
                0.0, 1.0, 0.0, 0.0,
                0.0, 0.0, 1.0, 0.0,
                0.0, 0.0, 0.0, 1.0,
            ],
        };
        let bad = dir.join("reflection.json");
        fs::write(&bad, serde_json::to_string(&refl).unwrap()).unwrap();
        let err = read_transform::<f64>(&bad).unwrap_err();
        assert_eq!(err.code(), "InvariantViolation");

        let q = QueryResultRecord {
            query: "obj1".to_string(),
            threshold: 0.72,
            bbox_min: [-0.1, -0.2, 0.9],
            bbox_max: [0.1, 0.0, 1.1],
            hull_vertices: vec![[-0.1, -0.2, 0.9], [0.1, 0.0, 1.1], [0.0, -0.1, 1.0]],
        };
        let qpath = dir.join("query.json");
        write_query_result(&qpath, &q).unwrap();
        assert_eq!(read_query_result(&qpath).unwrap(), q);
    }

    #[test]
    fn train_config_file_round_trips() {
        let dir = scratch("cfg");
        let mut cfg = TrainConfig::default();
        cfg.iterations = 123;
        cfg.lambda_depth = 0.75;
        cfg.seed = 99;
        let path = dir.join("train.cfg");
        write_train_config(&path, &cfg).unwrap();
        let back = read_train_config(&path).unwrap();
        assert_eq!(back, cfg);
    }
}
