//! On-disk clip layout and manifest.
//!
//! ```text
//! <root>/manifest.txt            clip_id \t T \t H \t W   (one line per clip)
//! <root>/<clip_id>/frame_%05d.png  real-domain frames (16-bit RGB)
//! <root>/<clip_id>/sim_%05d.png    sim-domain frames (16-bit RGB)
//! <root>/<clip_id>/mask_%05d.png   instance ids (8-bit grey)
//! <root>/<clip_id>/meta.txt        key=value: T, H, W, seed, num_objects, motion_speed, texture
//! ```
//!
//! Frames are stored losslessly at 16 bits per sample, so a stored frame
//! differs from the in-memory rendering by at most half a quantisation step.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array3, Array4, ArrayView2, ArrayView3, Axis};

use crate::error::{Error, Result};
use crate::scene::{generate_clip, SceneSpec, TextureLevel};
use crate::video::VideoClip;

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const REAL_PREFIX: &str = "frame";
pub const SIM_PREFIX: &str = "sim";
pub const MASK_PREFIX: &str = "mask";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub clip_id: String,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|e| format!("{}\t{}\t{}\t{}\n", e.clip_id, e.frames, e.height, e.width))
            .collect()
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            let bad = || Error::format(path, format!("line {}: expected clip_id\\tT\\tH\\tW", lineno + 1));
            if cols.len() != 4 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<usize>().map_err(|_| bad());
            entries.push(ManifestEntry {
                clip_id: cols[0].to_string(),
                frames: num(cols[1])?,
                height: num(cols[2])?,
                width: num(cols[3])?,
            });
        }
        Ok(Self { entries })
    }

    pub fn read(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Self::parse(&text, &path)
    }
}

pub fn clip_id(index: usize) -> String {
    format!("clip_{index:04}")
}

fn frame_path(dir: &Path, prefix: &str, t: usize) -> PathBuf {
    dir.join(format!("{prefix}_{t:05}.png"))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Renders every spec and writes one clip directory per spec plus the
/// manifest. Writing the same specs twice produces identical files.
pub fn write_dataset(specs: &[SceneSpec], root: &Path) -> Result<Manifest> {
    create_dir(root)?;
    let mut manifest = Manifest::default();
    for (i, spec) in specs.iter().enumerate() {
        let id = clip_id(i);
        let dir = root.join(&id);
        create_dir(&dir)?;
        let clip = generate_clip(spec)?;
        write_frames(&dir, REAL_PREFIX, &clip.real)?;
        write_frames(&dir, SIM_PREFIX, &clip.sim)?;
        for t in 0..spec.frames {
            write_mask_png(&frame_path(&dir, MASK_PREFIX, t), clip.masks.index_axis(Axis(0), t))?;
        }
        write_meta(&dir, spec)?;
        manifest.entries.push(ManifestEntry {
            clip_id: id,
            frames: spec.frames,
            height: spec.height,
            width: spec.width,
        });
    }
    let path = root.join(MANIFEST_FILE);
    fs::write(&path, manifest.to_text()).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn write_meta(dir: &Path, spec: &SceneSpec) -> Result<()> {
    let text = format!(
        "T={}\nH={}\nW={}\nseed={}\nnum_objects={}\nmotion_speed={}\ntexture={}\n",
        spec.frames,
        spec.height,
        spec.width,
        spec.seed,
        spec.num_objects,
        spec.motion_speed,
        spec.texture.as_str()
    );
    let path = dir.join("meta.txt");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Reads `meta.txt` back into the spec that generated the clip.
pub fn read_meta(dir: &Path) -> Result<SceneSpec> {
    let path = dir.join("meta.txt");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut spec = SceneSpec::new(0, 1, 0, 0, 0);
    let mut seen = 0usize;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format(&path, format!("malformed line `{line}`")))?;
        let bad = || Error::format(&path, format!("bad value for {k}: `{v}`"));
        match k.trim() {
            "T" => spec.frames = v.trim().parse().map_err(|_| bad())?,
            "H" => spec.height = v.trim().parse().map_err(|_| bad())?,
            "W" => spec.width = v.trim().parse().map_err(|_| bad())?,
            "seed" => spec.seed = v.trim().parse().map_err(|_| bad())?,
            "num_objects" => spec.num_objects = v.trim().parse().map_err(|_| bad())?,
            "motion_speed" => spec.motion_speed = v.trim().parse().map_err(|_| bad())?,
            "texture" => spec.texture = TextureLevel::parse(v.trim())?,
            _ => continue,
        }
        seen += 1;
    }
    if seen < 4 {
        return Err(Error::format(&path, "missing T/H/W/seed keys"));
    }
    Ok(spec)
}

pub fn write_frames(dir: &Path, prefix: &str, clip: &VideoClip) -> Result<()> {
    create_dir(dir)?;
    for t in 0..clip.num_frames() {
        write_rgb_png(&frame_path(dir, prefix, t), clip.frame(t))?;
    }
    Ok(())
}

/// Reads `<prefix>_00000.png ..` until the first missing index.
pub fn read_frames(dir: &Path, prefix: &str) -> Result<VideoClip> {
    let mut frames = Vec::new();
    loop {
        let path = frame_path(dir, prefix, frames.len());
        if !path.exists() {
            break;
        }
        frames.push(read_rgb_png(&path)?);
    }
    if frames.is_empty() {
        return Err(Error::data(format!(
            "no {prefix}_*.png frames in {}",
            dir.display()
        )));
    }
    let (h, w, _) = frames[0].dim();
    let mut out = Array4::zeros((frames.len(), h, w, 3));
    for (t, f) in frames.iter().enumerate() {
        if f.dim() != (h, w, 3) {
            return Err(Error::data(format!("frame {t} in {} changes size", dir.display())));
        }
        out.index_axis_mut(Axis(0), t).assign(f);
    }
    VideoClip::new(out, 10.0)
}

pub fn read_masks(dir: &Path) -> Result<Array3<u8>> {
    let mut masks = Vec::new();
    loop {
        let path = frame_path(dir, MASK_PREFIX, masks.len());
        if !path.exists() {
            break;
        }
        masks.push(read_mask_png(&path)?);
    }
    if masks.is_empty() {
        return Err(Error::data(format!("no mask_*.png in {}", dir.display())));
    }
    let (h, w) = masks[0].dim();
    let mut out = Array3::zeros((masks.len(), h, w));
    for (t, m) in masks.iter().enumerate() {
        out.index_axis_mut(Axis(0), t).assign(m);
    }
    Ok(out)
}

fn png_writer(path: &Path, width: usize, height: usize, color: png::ColorType, depth: png::BitDepth) -> Result<png::Writer<BufWriter<File>>> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(depth);
    enc.write_header()
        .map_err(|e| Error::format(path, format!("png header: {e}")))
}

pub fn write_rgb_png(path: &Path, frame: ArrayView3<f32>) -> Result<()> {
    let (h, w, _) = frame.dim();
    let mut bytes = Vec::with_capacity(h * w * 6);
    for v in frame.iter() {
        let q = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
        bytes.extend_from_slice(&q.to_be_bytes());
    }
    let mut writer = png_writer(path, w, h, png::ColorType::Rgb, png::BitDepth::Sixteen)?;
    writer
        .write_image_data(&bytes)
        .map_err(|e| Error::format(path, format!("png write: {e}")))?;
    writer.finish().map_err(|e| Error::format(path, format!("png finish: {e}")))?;
    Ok(())
}

pub fn write_mask_png(path: &Path, mask: ArrayView2<u8>) -> Result<()> {
    let (h, w) = mask.dim();
    let bytes: Vec<u8> = mask.iter().copied().collect();
    let mut writer = png_writer(path, w, h, png::ColorType::Grayscale, png::BitDepth::Eight)?;
    writer
        .write_image_data(&bytes)
        .map_err(|e| Error::format(path, format!("png write: {e}")))?;
    writer.finish().map_err(|e| Error::format(path, format!("png finish: {e}")))?;
    Ok(())
}

fn decode_png(path: &Path) -> Result<(png::OutputInfo, Vec<u8>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::format(path, format!("png decode: {e}")))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::format(path, "png too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::format(path, format!("png decode: {e}")))?;
    buf.truncate(info.buffer_size());
    Ok((info, buf))
}

pub fn read_rgb_png(path: &Path) -> Result<Array3<f32>> {
    let (info, buf) = decode_png(path)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let values: Vec<f32> = match (info.color_type, info.bit_depth) {
        (png::ColorType::Rgb, png::BitDepth::Sixteen) => buf
            .chunks_exact(2)
            .map(|c| f32::from(u16::from_be_bytes([c[0], c[1]])) / 65535.0)
            .collect(),
        (png::ColorType::Rgb, png::BitDepth::Eight) => {
            buf.iter().map(|&b| f32::from(b) / 255.0).collect()
        }
        (ct, bd) => {
            return Err(Error::format(path, format!("unsupported png format {ct:?}/{bd:?}")));
        }
    };
    Array3::from_shape_vec((h, w, 3), values)
        .map_err(|e| Error::format(path, format!("png shape: {e}")))
}

pub fn read_mask_png(path: &Path) -> Result<ndarray::Array2<u8>> {
    let (info, buf) = decode_png(path)?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::format(path, "mask must be 8-bit greyscale"));
    }
    ndarray::Array2::from_shape_vec((info.height as usize, info.width as usize), buf)
        .map_err(|e| Error::format(path, format!("png shape: {e}")))
}

/// A clip as read back from disk.
#[derive(Debug, Clone)]
pub struct StoredClip {
    pub id: String,
    pub spec: SceneSpec,
    pub real: VideoClip,
    pub sim: VideoClip,
    pub masks: Array3<u8>,
}

pub fn load_clip(root: &Path, id: &str) -> Result<StoredClip> {
    let dir = root.join(id);
    Ok(StoredClip {
        id: id.to_string(),
        spec: read_meta(&dir)?,
        real: read_frames(&dir, REAL_PREFIX)?,
        sim: read_frames(&dir, SIM_PREFIX)?,
        masks: read_masks(&dir)?,
    })
}

pub fn load_dataset(root: &Path) -> Result<Vec<StoredClip>> {
    let manifest = Manifest::read(root)?;
    if manifest.is_empty() {
        return Err(Error::data(format!("dataset {} is empty", root.display())));
    }
    manifest
        .entries
        .iter()
        .map(|e| load_clip(root, &e.clip_id))
        .collect()
}

/// Writes a text file atomically (temp file + rename).
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_roundtrip() {
        let m = Manifest {
            entries: vec![ManifestEntry {
                clip_id: "clip_0000".into(),
                frames: 17,
                height: 64,
                width: 80,
            }],
        };
        assert_eq!(Manifest::parse(&m.to_text(), Path::new("m")).unwrap(), m);
        assert!(Manifest::parse("a\tb\n", Path::new("m")).is_err());
    }

    #[test]
    fn png_roundtrip_within_quantisation() {
        let dir = tempfile::tempdir().unwrap();
        let clip = generate_clip(&SceneSpec::new(1, 2, 5, 64, 64)).unwrap();
        write_frames(dir.path(), "frame", &clip.real).unwrap();
        let back = read_frames(dir.path(), "frame").unwrap();
        let max_err = clip
            .real
            .frames
            .iter()
            .zip(back.frames.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max_err <= 0.5 / 65535.0 + 1e-7, "{max_err}");
    }

    #[test]
    fn meta_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = SceneSpec::new(99, 3, 17, 64, 96);
        spec.motion_speed = 2.25;
        write_meta(dir.path(), &spec).unwrap();
        assert_eq!(read_meta(dir.path()).unwrap(), spec);
    }
}
