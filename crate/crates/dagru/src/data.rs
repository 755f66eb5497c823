//! Clip ingestion and dataset plumbing.
//!
//! Clips are stored pre-decoded in a small binary container:
//!
//! ```text
//! magic   "DACL" (4 bytes)
//! version u32 LE (currently 1)
//! height  u16 LE
//! width   u16 LE
//! channels u16 LE (must be 3)
//! frames  u16 LE
//! payload frames × height × width × channels bytes, row-major u8
//! ```
//!
//! Datasets are indexed by a comma-separated manifest (`path,label,split`
//! with a header row); relative clip paths resolve against the manifest's
//! directory. Class indices are assigned by sorted label order.

use crate::error::{Error, Result};
use crate::pnm;
use crate::rng::Rng;
use crate::tensor::{Real, Tensor};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

pub const CLIP_MAGIC: &[u8; 4] = b"DACL";
pub const CLIP_VERSION: u32 = 1;

/// Decoded clip: 8-bit RGB frames, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawClip {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub frame_count: usize,
    pub payload: Vec<u8>,
}

impl RawClip {
    pub fn new(height: usize, width: usize, frame_count: usize, payload: Vec<u8>) -> Result<Self> {
        let expected = frame_count * height * width * 3;
        if payload.len() != expected {
            return Err(Error::shape(format!(
                "clip payload must be {expected} bytes, got {}",
                payload.len()
            )));
        }
        Ok(RawClip {
            height,
            width,
            channels: 3,
            frame_count,
            payload,
        })
    }

    pub fn frame(&self, index: usize) -> &[u8] {
        let len = self.height * self.width * self.channels;
        &self.payload[index * len..(index + 1) * len]
    }
}

/// Write a clip atomically (temp file + rename).
pub fn write_clip(path: &Path, clip: &RawClip) -> Result<()> {
    for (name, value) in [
        ("height", clip.height),
        ("width", clip.width),
        ("frame_count", clip.frame_count),
    ] {
        if value == 0 || value > u16::MAX as usize {
            return Err(Error::data(format!("clip {name} {value} out of u16 range")));
        }
    }
    let tmp = temp_sibling(path);
    {
        let mut file = std::fs::File::create(&tmp)?;
        file.write_all(CLIP_MAGIC)?;
        file.write_all(&CLIP_VERSION.to_le_bytes())?;
        file.write_all(&(clip.height as u16).to_le_bytes())?;
        file.write_all(&(clip.width as u16).to_le_bytes())?;
        file.write_all(&(clip.channels as u16).to_le_bytes())?;
        file.write_all(&(clip.frame_count as u16).to_le_bytes())?;
        file.write_all(&clip.payload)?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub(crate) fn temp_sibling(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    path.with_file_name(name)
}

/// Load a clip, validating magic, version and exact payload length.
pub fn load_clip(path: &Path) -> Result<RawClip> {
    const CONTEXT: &str = "clip file";
    let mut file = std::fs::File::open(path)?;
    let mut header = [0u8; 16];
    file.read_exact(&mut header).map_err(|_| Error::Truncated {
        context: CONTEXT,
        detail: "file shorter than the 16-byte header".into(),
    })?;
    if &header[0..4] != CLIP_MAGIC {
        return Err(Error::BadMagic {
            context: CONTEXT,
            expected: "DACL",
        });
    }
    let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
    if version != CLIP_VERSION {
        return Err(Error::UnsupportedVersion {
            context: CONTEXT,
            found: version,
            supported: CLIP_VERSION,
        });
    }
    let height = u16::from_le_bytes(header[8..10].try_into().unwrap()) as usize;
    let width = u16::from_le_bytes(header[10..12].try_into().unwrap()) as usize;
    let channels = u16::from_le_bytes(header[12..14].try_into().unwrap()) as usize;
    let frame_count = u16::from_le_bytes(header[14..16].try_into().unwrap()) as usize;
    if channels != 3 {
        return Err(Error::Corrupt {
            context: CONTEXT,
            detail: format!("channels must be 3, got {channels}"),
        });
    }
    if height == 0 || width == 0 || frame_count == 0 {
        return Err(Error::Corrupt {
            context: CONTEXT,
            detail: format!("degenerate dimensions {frame_count}×{height}×{width}"),
        });
    }
    let expected = frame_count * height * width * channels;
    let mut payload = Vec::with_capacity(expected);
    file.read_to_end(&mut payload)?;
    if payload.len() < expected {
        return Err(Error::Truncated {
            context: CONTEXT,
            detail: format!("payload has {} of {expected} bytes", payload.len()),
        });
    }
    if payload.len() > expected {
        return Err(Error::Corrupt {
            context: CONTEXT,
            detail: format!("{} trailing bytes after payload", payload.len() - expected),
        });
    }
    Ok(RawClip {
        height,
        width,
        channels,
        frame_count,
        payload,
    })
}

// ── preprocessing ────────────────────────────────────────────────────

/// Bilinear resample with half-pixel centers and clamped edges.
pub fn bilinear_resize<T: Real>(
    src: &[T],
    sh: usize,
    sw: usize,
    c: usize,
    th: usize,
    tw: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); th * tw * c];
    let one = T::one();
    for ty in 0..th {
        let sy = T::from_f64(((ty as f64 + 0.5) * sh as f64 / th as f64 - 0.5)
            .clamp(0.0, sh as f64 - 1.0));
        let y0 = sy.floor().as_f64() as usize;
        let y1 = (y0 + 1).min(sh - 1);
        let fy = sy - T::from_f64(y0 as f64);
        for tx in 0..tw {
            let sx = T::from_f64(((tx as f64 + 0.5) * sw as f64 / tw as f64 - 0.5)
                .clamp(0.0, sw as f64 - 1.0));
            let x0 = sx.floor().as_f64() as usize;
            let x1 = (x0 + 1).min(sw - 1);
            let fx = sx - T::from_f64(x0 as f64);
            for ch in 0..c {
                let v00 = src[(y0 * sw + x0) * c + ch];
                let v01 = src[(y0 * sw + x1) * c + ch];
                let v10 = src[(y1 * sw + x0) * c + ch];
                let v11 = src[(y1 * sw + x1) * c + ch];
                let top = v00 * (one - fx) + v01 * fx;
                let bot = v10 * (one - fx) + v11 * fx;
                out[(ty * tw + tx) * c + ch] = top * (one - fy) + bot * fy;
            }
        }
    }
    out
}

/// Resize every frame to the model input size and normalize into [0,1].
pub fn preprocess<T: Real>(
    clip: &RawClip,
    target_h: usize,
    target_w: usize,
) -> Result<Vec<Tensor<T>>> {
    if target_h == 0 || target_w == 0 || target_h % 16 != 0 || target_w % 16 != 0 {
        return Err(Error::config(format!(
            "preprocess target {target_h}×{target_w} must be divisible by 16"
        )));
    }
    let c = clip.channels;
    let max_val = T::from_f64(255.0);
    let mut frames = Vec::with_capacity(clip.frame_count);
    for f in 0..clip.frame_count {
        let raw: Vec<T> = clip
            .frame(f)
            .iter()
            .map(|&b| T::from_f64(b as f64))
            .collect();
        let resized = if (clip.height, clip.width) == (target_h, target_w) {
            raw
        } else {
            bilinear_resize(&raw, clip.height, clip.width, c, target_h, target_w)
        };
        let data: Vec<T> = resized.iter().map(|&v| v / max_val).collect();
        frames.push(Tensor::new(vec![target_h, target_w, c], data)?);
    }
    Ok(frames)
}

// ── sequence extraction ──────────────────────────────────────────────

/// Non-overlapping window start offsets: `[0, len, 2·len, ...]`; the
/// trailing remainder shorter than `len` is discarded.
pub fn make_sequences(frame_count: usize, len: usize) -> Result<Vec<usize>> {
    if frame_count < len {
        return Err(Error::data(format!(
            "clip too short: {frame_count} frames, need at least {len}"
        )));
    }
    Ok((0..=frame_count - len).step_by(len).collect())
}

/// One training sample: exactly `sequence_length` normalized frames plus a
/// class index.
#[derive(Clone, Debug)]
pub struct ClipSample<T> {
    pub frames: Vec<Tensor<T>>,
    pub label: usize,
}

// ── manifests ────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::data(format!(
                "unknown split {other:?} (expected train/val/test)"
            ))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ManifestRow {
    pub path: PathBuf,
    pub label: String,
    pub split: Split,
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let tmp = temp_sibling(path);
    {
        let mut file = std::fs::File::create(&tmp)?;
        writeln!(file, "path,label,split")?;
        for row in rows {
            writeln!(
                file,
                "{},{},{}",
                row.path.display(),
                row.label,
                row.split.as_str()
            )?;
        }
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some("path,label,split") => {}
        other => {
            return Err(Error::data(format!(
                "manifest must start with 'path,label,split', got {other:?}"
            )))
        }
    }
    let mut rows = Vec::new();
    for (n, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(Error::data(format!(
                "manifest line {}: expected 3 fields, got {}",
                n + 2,
                fields.len()
            )));
        }
        rows.push(ManifestRow {
            path: PathBuf::from(fields[0]),
            label: fields[1].to_string(),
            split: Split::parse(fields[2])?,
        });
    }
    if rows.is_empty() {
        return Err(Error::data("manifest has no rows"));
    }
    Ok(rows)
}

/// Sorted unique labels; index in this list is the class index.
pub fn class_labels(rows: &[ManifestRow]) -> Vec<String> {
    let mut labels: Vec<String> = rows.iter().map(|r| r.label.clone()).collect();
    labels.sort();
    labels.dedup();
    labels
}

/// Stratified split: per class, a seeded shuffle sends the first
/// ceil(fraction·n) clips to train and the rest to val, keeping at least
/// one clip of every class on each side.
pub fn split_dataset(
    rows: &mut [ManifestRow],
    train_fraction: f64,
    seed: u64,
) -> Result<()> {
    if !(0.0..1.0).contains(&train_fraction) || train_fraction == 0.0 {
        return Err(Error::config(format!(
            "train_fraction must be in (0,1), got {train_fraction}"
        )));
    }
    let mut by_class: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, row) in rows.iter().enumerate() {
        by_class.entry(row.label.clone()).or_default().push(i);
    }
    let mut rng = Rng::new(seed);
    for (label, mut indices) in by_class {
        let n = indices.len();
        if n < 2 {
            return Err(Error::data(format!(
                "class {label:?} has {n} clip(s); need at least 2 to split"
            )));
        }
        rng.shuffle(&mut indices);
        // cap keeps both splits non-empty for tiny classes
        let train_n = ((train_fraction * n as f64).ceil() as usize).min(n - 1);
        for (k, &i) in indices.iter().enumerate() {
            rows[i].split = if k < train_n { Split::Train } else { Split::Val };
        }
    }
    Ok(())
}

// ── synthetic dataset ────────────────────────────────────────────────

/// Parameters of the synthetic motion dataset. Classes share identical
/// per-clip frame multisets and differ only in frame order, so the label
/// is recoverable from temporal structure alone.
#[derive(Clone, Debug)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub clips_per_class: usize,
    pub frames: usize,
    pub size: usize,
    pub train_fraction: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_classes: 3,
            clips_per_class: 20,
            frames: 16,
            size: 32,
            train_fraction: 0.7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config("synth dataset needs at least 2 classes"));
        }
        if self.clips_per_class < 2 {
            return Err(Error::config("synth dataset needs >= 2 clips per class"));
        }
        if self.frames < 2 || self.frames % 2 != 0 || self.frames > u16::MAX as usize {
            return Err(Error::config(format!(
                "synth frames must be even and >= 2, got {}",
                self.frames
            )));
        }
        if self.size % 16 != 0 || self.size == 0 {
            return Err(Error::config(format!(
                "synth size must be a positive multiple of 16, got {}",
                self.size
            )));
        }
        Ok(())
    }

    pub fn label_of(&self, class: usize) -> String {
        match class {
            0 => "sweep-right".to_string(),
            1 => "sweep-left".to_string(),
            2 => "oscillate".to_string(),
            k => format!("oscillate-p{}", k - 2),
        }
    }
}

/// Sprite station at time `t` for a generator class; every class walks a
/// permutation of stations 0..frames-1, so per-clip frame multisets are
/// class-independent.
pub fn trajectory(class: usize, t: usize, frames: usize) -> usize {
    let triangle = |t: usize| {
        if t < frames / 2 {
            2 * t
        } else {
            2 * frames - 1 - 2 * t
        }
    };
    match class {
        0 => t,
        1 => frames - 1 - t,
        k => triangle((t + 3 * (k - 2)) % frames),
    }
}

fn render_frame(
    size: usize,
    side: usize,
    station: usize,
    stations: usize,
    y_off: usize,
    sprite_rgb: [u8; 3],
    background: u8,
) -> Vec<u8> {
    let travel = size - side;
    let x_off =
        ((station as f64 * travel as f64 / (stations - 1) as f64).round()) as usize;
    let mut frame = vec![background; size * size * 3];
    for y in y_off..y_off + side {
        for x in x_off..x_off + side {
            let base = (y * size + x) * 3;
            frame[base..base + 3].copy_from_slice(&sprite_rgb);
        }
    }
    frame
}

/// Generate the synthetic dataset into `out_dir`, returning the manifest
/// rows (also written to `out_dir/manifest.csv`, paths relative to it).
/// Byte-reproducible for a given spec and seed.
pub fn synth_dataset(spec: &SynthSpec, seed: u64, out_dir: &Path) -> Result<Vec<ManifestRow>> {
    spec.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let size = spec.size;
    let side = (size / 4).max(2);
    let mut rows = Vec::new();
    for clip_idx in 0..spec.clips_per_class {
        // appearance is shared across classes so it carries no label signal
        let mut looks = Rng::new(seed ^ (clip_idx as u64).wrapping_mul(0x517c_c1b7_2722_0a95));
        let sprite_rgb = [
            looks.range_u8(170, 255),
            looks.range_u8(170, 255),
            looks.range_u8(170, 255),
        ];
        let background = looks.range_u8(10, 60);
        let y_max = size - side;
        let y_center = y_max / 2;
        let jitter = looks.below(5) as isize - 2;
        let y_off = (y_center as isize + jitter).clamp(0, y_max as isize) as usize;

        for class in 0..spec.num_classes {
            let mut payload = Vec::with_capacity(spec.frames * size * size * 3);
            for t in 0..spec.frames {
                let station = trajectory(class, t, spec.frames);
                payload.extend(render_frame(
                    size,
                    side,
                    station,
                    spec.frames,
                    y_off,
                    sprite_rgb,
                    background,
                ));
            }
            let clip = RawClip::new(size, size, spec.frames, payload)?;
            let name = format!("{}_clip{clip_idx:02}.dacl", spec.label_of(class));
            write_clip(&out_dir.join(&name), &clip)?;
            rows.push(ManifestRow {
                path: PathBuf::from(name),
                label: spec.label_of(class),
                split: Split::Train,
            });
        }
    }
    split_dataset(&mut rows, spec.train_fraction, seed)?;
    write_manifest(&out_dir.join("manifest.csv"), &rows)?;
    Ok(rows)
}

/// Pack a directory of P6 PPM frames (sorted by file name) into a clip.
pub fn import_frames(frames_dir: &Path, out_path: &Path) -> Result<RawClip> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(frames_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "ppm"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::data(format!(
            "no .ppm frames found in {}",
            frames_dir.display()
        )));
    }
    let first = pnm::read_ppm(&paths[0])?;
    let (h, w) = (first.height, first.width);
    let mut payload = first.pixels;
    for path in &paths[1..] {
        let img = pnm::read_ppm(path)?;
        if (img.height, img.width) != (h, w) {
            return Err(Error::data(format!(
                "frame {} is {}×{}, expected {h}×{w}",
                path.display(),
                img.height,
                img.width
            )));
        }
        payload.extend(img.pixels);
    }
    let clip = RawClip::new(h, w, paths.len(), payload)?;
    write_clip(out_path, &clip)?;
    Ok(clip)
}

// ── dataset loading ──────────────────────────────────────────────────

/// One clip prepared for the model: all of its non-overlapping windows.
#[derive(Clone, Debug)]
pub struct LoadedClip<T> {
    pub windows: Vec<Vec<Tensor<T>>>,
    pub label: usize,
}

#[derive(Clone, Debug)]
pub struct Dataset<T> {
    pub labels: Vec<String>,
    pub train: Vec<LoadedClip<T>>,
    pub val: Vec<LoadedClip<T>>,
    pub test: Vec<LoadedClip<T>>,
}

impl<T: Real> Dataset<T> {
    /// Flat (frames, label) training samples, one per window.
    pub fn train_windows(&self) -> Vec<ClipSample<T>> {
        self.train
            .iter()
            .flat_map(|clip| {
                clip.windows.iter().map(|w| ClipSample {
                    frames: w.clone(),
                    label: clip.label,
                })
            })
            .collect()
    }
}

/// Load every manifest clip, resize/normalize, and cut into windows.
pub fn load_dataset<T: Real>(
    manifest_path: &Path,
    input_h: usize,
    input_w: usize,
    sequence_length: usize,
) -> Result<Dataset<T>> {
    let rows = load_manifest(manifest_path)?;
    let labels = class_labels(&rows);
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut dataset = Dataset {
        labels: labels.clone(),
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for row in &rows {
        let path = if row.path.is_absolute() {
            row.path.clone()
        } else {
            base.join(&row.path)
        };
        let raw = load_clip(&path)?;
        let frames = preprocess::<T>(&raw, input_h, input_w)?;
        let starts = make_sequences(raw.frame_count, sequence_length)?;
        let windows: Vec<Vec<Tensor<T>>> = starts
            .iter()
            .map(|&s| frames[s..s + sequence_length].to_vec())
            .collect();
        let label = labels
            .binary_search(&row.label)
            .expect("label set built from rows");
        let clip = LoadedClip { windows, label };
        match row.split {
            Split::Train => dataset.train.push(clip),
            Split::Val => dataset.val.push(clip),
            Split::Test => dataset.test.push(clip),
        }
    }
    Ok(dataset)
}
