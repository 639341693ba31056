//! Synthetic echo-like videos, clip frame sampling, few-shot subsets and
//! on-disk datasets.
//!
//! A synthetic clip shows a dark elliptical "ventricle" on a speckled bright
//! background. Its area follows a raised cosine between the end-diastolic
//! area (EDA) and the end-systolic area `ESA = EDA (1 - ef / 100)`, so the
//! area-based ejection fraction of the noise-free masks equals the label up
//! to pixel quantisation.

use std::collections::{BTreeMap, HashSet};
use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffcore::{Real, Tensor};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "FileList.csv";
pub const CLIP_MAGIC: &[u8; 4] = b"EFV1";
pub const CLIP_EXTENSION: &str = "efv";

const BACKGROUND: f64 = 0.7;
const SPECKLE_SPREAD: f64 = 0.2;
const CAVITY: f64 = 0.12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub resolution: usize,
    pub total_frames: usize,
    pub cycle_period: usize,
    pub ef_range: [f64; 2],
    pub noise_sigma: f64,
    /// End-diastolic area as a fraction of the frame, drawn per clip.
    pub eda_fraction: [f64; 2],
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            resolution: 112,
            total_frames: 175,
            cycle_period: 32,
            ef_range: [10.0, 90.0],
            noise_sigma: 0.02,
            eda_fraction: [0.06, 0.14],
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.ef_range;
        if !(0.0..=100.0).contains(&lo) || !(0.0..=100.0).contains(&hi) || lo > hi {
            return Err(Error::Validation(format!("ef_range {lo}..{hi} must lie within [0, 100]")));
        }
        if self.cycle_period < 8 {
            return Err(Error::Validation(format!(
                "cycle_period {} must be at least 8",
                self.cycle_period
            )));
        }
        if self.resolution < 8 || self.total_frames == 0 {
            return Err(Error::Validation("resolution >= 8 and total_frames >= 1 required".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Validation(format!("noise_sigma {} must be >= 0", self.noise_sigma)));
        }
        let [a, b] = self.eda_fraction;
        if !(a > 0.0 && a <= b && b <= 0.35) {
            return Err(Error::Validation(format!("eda_fraction {a}..{b} must satisfy 0 < a <= b <= 0.35")));
        }
        Ok(())
    }
}

/// `T x H x W` grayscale frames in `[0, 1]` with an ejection-fraction label.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    pub id: String,
    pub ef: f64,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl VideoClip {
    pub fn new(id: impl Into<String>, ef: f64, dims: [usize; 3], data: Vec<f32>) -> Result<Self> {
        let [t, h, w] = dims;
        if t == 0 || h == 0 || w == 0 || data.len() != t * h * w {
            return Err(Error::Shape(format!(
                "clip dims {dims:?} do not match {} samples",
                data.len()
            )));
        }
        Ok(Self {
            id: id.into(),
            ef,
            frames: t,
            height: h,
            width: w,
            data,
        })
    }

    pub fn frame(&self, i: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[i * n..(i + 1) * n]
    }

    /// Frame `i` as a `1 x H x W` tensor.
    pub fn frame_tensor<T: Real>(&self, i: usize) -> Tensor<T> {
        let data = self.frame(i).iter().map(|&v| T::c(v as f64)).collect();
        Tensor::new(&[1, self.height, self.width], data).expect("frame extents are positive")
    }
}

/// Per-clip geometry drawn before rendering; fully determines the masks.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipGeometry {
    pub resolution: usize,
    pub center: (f64, f64),
    /// Ratio of the long to the short semi-axis.
    pub aspect: f64,
    pub angle: f64,
    pub eda: f64,
    pub esa: f64,
    pub period: usize,
    /// Integer frame offset into the cycle, so both extremes occur on frames.
    pub phase: usize,
}

impl ClipGeometry {
    /// Target cavity area at frame `t`: EDA at cycle start, ESA half a cycle later.
    pub fn area(&self, t: usize) -> f64 {
        let x = ((t + self.phase) % self.period) as f64 / self.period as f64;
        self.esa + (self.eda - self.esa) * 0.5 * (1.0 + (2.0 * PI * x).cos())
    }

    /// Noise-free cavity mask at frame `t`: pixel centres inside the ellipse.
    pub fn mask(&self, t: usize) -> Vec<bool> {
        let n = self.resolution;
        let short = (self.area(t) / (PI * self.aspect)).sqrt();
        let long = short * self.aspect;
        let (s, c) = self.angle.sin_cos();
        let mut out = Vec::with_capacity(n * n);
        for y in 0..n {
            for x in 0..n {
                let dx = x as f64 + 0.5 - self.center.0;
                let dy = y as f64 + 0.5 - self.center.1;
                let u = c * dx + s * dy;
                let v = -s * dx + c * dy;
                out.push((u / short).powi(2) + (v / long).powi(2) <= 1.0);
            }
        }
        out
    }
}

fn check_ef(ef: f64, cfg: &SyntheticConfig) -> Result<()> {
    let [lo, hi] = cfg.ef_range;
    if !(ef >= lo && ef <= hi) {
        return Err(Error::Validation(format!("ef {ef} outside synthetic range [{lo}, {hi}]")));
    }
    Ok(())
}

fn draw_geometry(ef: f64, cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> ClipGeometry {
    let n = cfg.resolution as f64;
    let [flo, fhi] = cfg.eda_fraction;
    let eda = rng.gen_range(flo..=fhi) * n * n;
    let jitter = 0.04 * n;
    ClipGeometry {
        resolution: cfg.resolution,
        center: (
            n / 2.0 + rng.gen_range(-jitter..=jitter),
            n / 2.0 + rng.gen_range(-jitter..=jitter),
        ),
        aspect: rng.gen_range(1.2..=1.6),
        angle: rng.gen_range(-0.4..=0.4),
        eda,
        esa: eda * (1.0 - ef / 100.0),
        period: cfg.cycle_period,
        phase: rng.gen_range(0..cfg.cycle_period),
    }
}

/// Geometry used by [`gen_clip`] for the same `(ef, cfg, seed)`.
pub fn clip_geometry(ef: f64, cfg: &SyntheticConfig, seed: u64) -> Result<ClipGeometry> {
    cfg.validate()?;
    check_ef(ef, cfg)?;
    Ok(draw_geometry(ef, cfg, &mut ChaCha8Rng::seed_from_u64(seed)))
}

pub fn gen_clip(ef: f64, cfg: &SyntheticConfig, seed: u64) -> Result<VideoClip> {
    cfg.validate()?;
    check_ef(ef, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let geom = draw_geometry(ef, cfg, &mut rng);
    let n = cfg.resolution;
    // Static tissue texture, fixed for the whole clip.
    let texture: Vec<f64> = (0..n * n)
        .map(|_| BACKGROUND + SPECKLE_SPREAD * (rng.gen::<f64>() - 0.5))
        .collect();
    let noise = Normal::new(0.0, cfg.noise_sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Validation(e.to_string()))?;
    let mut data = Vec::with_capacity(cfg.total_frames * n * n);
    for t in 0..cfg.total_frames {
        for (inside, &tex) in geom.mask(t).into_iter().zip(&texture) {
            let clean = if inside { CAVITY } else { tex };
            let v = if cfg.noise_sigma > 0.0 {
                clean + noise.sample(&mut rng)
            } else {
                clean
            };
            data.push(v.clamp(0.0, 1.0) as f32);
        }
    }
    VideoClip::new(format!("synth_{seed:016x}"), ef, [cfg.total_frames, n, n], data)
}

/// Area-based ejection fraction of the noise-free masks over the first `frames` frames.
pub fn measured_ef(geom: &ClipGeometry, frames: usize) -> f64 {
    let areas: Vec<usize> = (0..frames)
        .map(|t| geom.mask(t).iter().filter(|&&m| m).count())
        .collect();
    let max = *areas.iter().max().unwrap_or(&0) as f64;
    let min = *areas.iter().min().unwrap_or(&0) as f64;
    if max == 0.0 {
        return 0.0;
    }
    (max - min) / max * 100.0
}

/// Clip indices `offset + i * stride` for `i < length`, wrapped modulo `total`.
pub fn frame_indices(total: usize, length: usize, stride: usize, offset: usize) -> Result<Vec<usize>> {
    if total == 0 {
        return Err(Error::Contract("frame_sample on an empty clip".into()));
    }
    if length == 0 || stride == 0 {
        return Err(Error::Validation(format!(
            "clip length {length} and stride {stride} must be >= 1"
        )));
    }
    Ok((0..length).map(|i| (offset + i * stride) % total).collect())
}

pub fn frame_sample<T: Real>(clip: &VideoClip, length: usize, stride: usize, offset: usize) -> Result<Vec<Tensor<T>>> {
    Ok(frame_indices(clip.frames, length, stride, offset)?
        .into_iter()
        .map(|i| clip.frame_tensor(i))
        .collect())
}

/// Uniform random start frame for training-time sampling.
pub fn random_offset<R: Rng>(rng: &mut R, total: usize) -> usize {
    rng.gen_range(0..total.max(1))
}

/// Serialized upper case; parsed case-insensitively.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String")]
pub enum Split {
    #[serde(rename = "TRAIN")]
    Train,
    #[serde(rename = "VAL")]
    Val,
    #[serde(rename = "TEST")]
    Test,
}

impl TryFrom<String> for Split {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "TRAIN",
            Split::Val => "VAL",
            Split::Test => "TEST",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "TRAIN" => Ok(Split::Train),
            "VAL" => Ok(Split::Val),
            "TEST" => Ok(Split::Test),
            _ => Err(Error::Validation(format!("unknown split `{s}`"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    #[serde(rename = "FileName")]
    pub file_name: String,
    #[serde(rename = "EF")]
    pub ef: f64,
    #[serde(rename = "Split")]
    pub split: Split,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    rows: Vec<ManifestRow>,
}

impl Manifest {
    pub fn new(rows: Vec<ManifestRow>) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &rows {
            if !seen.insert(r.file_name.as_str()) {
                return Err(Error::Validation(format!("duplicate file name `{}`", r.file_name)));
            }
            if !(0.0..=100.0).contains(&r.ef) {
                return Err(Error::Validation(format!("`{}`: ef {} outside [0, 100]", r.file_name, r.ef)));
            }
        }
        Ok(Self { rows })
    }

    pub fn rows(&self) -> &[ManifestRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRow> {
        self.rows.iter().filter(move |r| r.split == split)
    }

    /// Parses CSV with at least the `FileName,EF,Split` columns; extra
    /// columns such as those of a full EchoNet-Dynamic file list are ignored.
    pub fn from_csv_bytes(bytes: &[u8]) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(bytes);
        let headers = rdr.headers().map_err(csv_format)?.clone();
        for col in ["FileName", "EF", "Split"] {
            if !headers.iter().any(|h| h == col) {
                return Err(Error::Format {
                    offset: 0,
                    message: format!("manifest header lacks column `{col}`"),
                });
            }
        }
        let mut rows = Vec::new();
        for rec in rdr.deserialize::<ManifestRow>() {
            rows.push(rec.map_err(csv_format)?);
        }
        Self::new(rows)
    }

    pub fn to_csv_bytes(&self) -> Result<Vec<u8>> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r)?;
        }
        if self.rows.is_empty() {
            w.write_record(["FileName", "EF", "Split"])?;
        }
        w.into_inner().map_err(|e| Error::Io(e.into_error()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_csv_bytes(&fs::read(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv_bytes()?)?;
        Ok(())
    }
}

fn csv_format(e: csv::Error) -> Error {
    let offset = e.position().map_or(0, |p| p.byte());
    Error::Format {
        offset,
        message: e.to_string(),
    }
}

/// Integer label class used by the few-shot protocol.
pub fn ef_class(ef: f64) -> u32 {
    (ef.floor() as i64).clamp(1, 100) as u32
}

/// Up to `n_shot` TRAIN rows per integer EF class, skipping empty classes.
///
/// Each class is shuffled once from the seed and the first `n_shot` rows are
/// kept, so for a fixed seed smaller shot counts give subsets of larger ones.
/// Rows keep their manifest order.
pub fn few_shot_sample(manifest: &Manifest, n_shot: usize, seed: u64) -> Result<Manifest> {
    if n_shot == 0 {
        return Err(Error::Validation("n_shot must be >= 1".into()));
    }
    let mut classes: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, r) in manifest.rows.iter().enumerate() {
        if r.split == Split::Train {
            classes.entry(ef_class(r.ef)).or_default().push(i);
        }
    }
    if classes.is_empty() {
        return Err(Error::Validation("manifest has no TRAIN rows".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = Vec::new();
    for members in classes.values_mut() {
        members.shuffle(&mut rng);
        keep.extend(members.iter().take(n_shot).copied());
    }
    keep.sort_unstable();
    Ok(Manifest {
        rows: keep.into_iter().map(|i| manifest.rows[i].clone()).collect(),
    })
}

pub fn encode_clip(clip: &VideoClip) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * clip.data.len());
    out.extend_from_slice(CLIP_MAGIC);
    for d in [clip.frames, clip.height, clip.width] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in &clip.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Parses a clip file body; `id` and `ef` come from the manifest.
pub fn decode_clip(bytes: &[u8], id: &str, ef: f64) -> Result<VideoClip> {
    let fail = |offset: usize, message: String| Error::Format {
        offset: offset as u64,
        message,
    };
    if bytes.len() < 4 || &bytes[..4] != CLIP_MAGIC {
        return Err(fail(0, "missing EFV1 magic".into()));
    }
    let mut dims = [0usize; 3];
    for (k, d) in dims.iter_mut().enumerate() {
        let at = 4 + 4 * k;
        let raw = bytes
            .get(at..at + 4)
            .ok_or_else(|| fail(bytes.len(), "truncated header".into()))?;
        *d = u32::from_le_bytes(raw.try_into().expect("4 bytes")) as usize;
        if *d == 0 {
            return Err(fail(at, "zero extent in header".into()));
        }
    }
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| fail(4, "extent product overflows".into()))?;
    let body = &bytes[16..];
    let expected = count.checked_mul(4).ok_or_else(|| fail(4, "extent product overflows".into()))?;
    if body.len() < expected {
        return Err(fail(
            bytes.len(),
            format!("truncated data: {} of {expected} payload bytes", body.len()),
        ));
    }
    if body.len() > expected {
        return Err(fail(16 + expected, "trailing bytes after payload".into()));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    VideoClip::new(id, ef, dims, data)
}

pub fn clip_path(dir: &Path, file_name: &str) -> PathBuf {
    dir.join(format!("{file_name}.{CLIP_EXTENSION}"))
}

pub fn write_clip(path: &Path, clip: &VideoClip) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(&encode_clip(clip))?;
    w.flush()?;
    Ok(())
}

pub fn read_clip(path: &Path, id: &str, ef: f64) -> Result<VideoClip> {
    decode_clip(&fs::read(path)?, id, ef)
}

/// A manifest plus the clips it names, in manifest order.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub clips: Vec<VideoClip>,
}

impl Dataset {
    pub fn new(manifest: Manifest, clips: Vec<VideoClip>) -> Result<Self> {
        if manifest.len() != clips.len()
            || manifest.rows.iter().zip(&clips).any(|(r, c)| r.file_name != c.id || r.ef != c.ef)
        {
            return Err(Error::Validation("clips do not match manifest rows".into()));
        }
        Ok(Self { manifest, clips })
    }

    pub fn clips_in(&self, split: Split) -> Vec<&VideoClip> {
        self.manifest
            .rows
            .iter()
            .zip(&self.clips)
            .filter(|(r, _)| r.split == split)
            .map(|(_, c)| c)
            .collect()
    }

    /// Clips named by `subset`, in subset order.
    pub fn select(&self, subset: &Manifest) -> Result<Vec<&VideoClip>> {
        subset
            .rows
            .iter()
            .map(|r| {
                self.clips
                    .iter()
                    .find(|c| c.id == r.file_name)
                    .ok_or_else(|| Error::Validation(format!("clip `{}` not in dataset", r.file_name)))
            })
            .collect()
    }
}

pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    for c in &ds.clips {
        write_clip(&clip_path(dir, &c.id), c)?;
    }
    ds.manifest.write(&dir.join(MANIFEST_FILE))
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = Manifest::read(&dir.join(MANIFEST_FILE))?;
    let clips = manifest
        .rows
        .iter()
        .map(|r| read_clip(&clip_path(dir, &r.file_name), &r.file_name, r.ef))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(manifest, clips)
}

/// Per-split clip counts for each integer EF class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

/// One integer class per EF in `ef_min..=ef_max`; each clip's label is
/// drawn uniformly inside its class and clipped to the synthetic range.
pub fn synth_dataset(
    cfg: &SyntheticConfig,
    counts: SplitCounts,
    ef_min: u32,
    ef_max: u32,
    seed: u64,
) -> Result<Dataset> {
    cfg.validate()?;
    if ef_min > ef_max {
        return Err(Error::Validation(format!("ef_min {ef_min} > ef_max {ef_max}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    let mut clips = Vec::new();
    for (split, n) in [(Split::Train, counts.train), (Split::Val, counts.val), (Split::Test, counts.test)] {
        for class in ef_min..=ef_max {
            for k in 0..n {
                let ef = (class as f64 + rng.gen::<f64>()).min(cfg.ef_range[1]);
                let clip_seed = rng.gen::<u64>();
                let mut clip = gen_clip(ef, cfg, clip_seed)?;
                clip.id = format!("{}_{class:03}_{k}", split.as_str().to_ascii_lowercase());
                rows.push(ManifestRow {
                    file_name: clip.id.clone(),
                    ef,
                    split,
                });
                clips.push(clip);
            }
        }
    }
    Dataset::new(Manifest::new(rows)?, clips)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn small_cfg() -> SyntheticConfig {
        SyntheticConfig {
            resolution: 32,
            total_frames: 12,
            cycle_period: 8,
            ..SyntheticConfig::default()
        }
    }

    fn row(name: &str, ef: f64, split: Split) -> ManifestRow {
        ManifestRow {
            file_name: name.into(),
            ef,
            split,
        }
    }

    #[test]
    fn zero_fraction_keeps_area_constant() {
        let cfg = SyntheticConfig {
            ef_range: [0.0, 90.0],
            ..SyntheticConfig::default()
        };
        let geom = clip_geometry(0.0, &cfg, 3).unwrap();
        let areas: Vec<usize> = (0..40).map(|t| geom.mask(t).iter().filter(|&&m| m).count()).collect();
        let (max, min) = (*areas.iter().max().unwrap(), *areas.iter().min().unwrap());
        assert!((max - min) as f64 / max as f64 <= 0.01);
    }

    #[test]
    fn ef_sixty_matches_mask_oracle() {
        let cfg = SyntheticConfig::default();
        let geom = clip_geometry(60.0, &cfg, 11).unwrap();
        let measured = measured_ef(&geom, cfg.total_frames);
        assert!((measured - 60.0).abs() <= 2.0, "{measured}");
    }

    #[test]
    fn label_fidelity_over_twenty_draws() {
        let cfg = SyntheticConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for i in 0..20 {
            let ef = rng.gen_range(cfg.ef_range[0]..=cfg.ef_range[1]);
            let geom = clip_geometry(ef, &cfg, i).unwrap();
            let measured = measured_ef(&geom, cfg.cycle_period);
            assert!((measured - ef).abs() <= 2.0, "ef {ef}: measured {measured}");
        }
    }

    #[test]
    fn rendered_frames_follow_mask() {
        let cfg = SyntheticConfig {
            noise_sigma: 0.0,
            ..small_cfg()
        };
        let clip = gen_clip(50.0, &cfg, 5).unwrap();
        let geom = clip_geometry(50.0, &cfg, 5).unwrap();
        for t in 0..cfg.total_frames {
            for (&v, m) in clip.frame(t).iter().zip(geom.mask(t)) {
                if m {
                    assert_eq!(v, CAVITY as f32);
                } else {
                    assert!(v as f64 >= BACKGROUND - SPECKLE_SPREAD / 2.0 - 1e-6);
                }
            }
        }
        assert_eq!(clip.ef, 50.0);
    }

    #[test]
    fn generation_is_deterministic_and_bounded() {
        let cfg = small_cfg();
        let a = gen_clip(42.0, &cfg, 9).unwrap();
        assert_eq!(a, gen_clip(42.0, &cfg, 9).unwrap());
        assert_ne!(a.data, gen_clip(42.0, &cfg, 10).unwrap().data);
        assert!(a.data.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!((a.frames, a.height, a.width), (12, 32, 32));
    }

    #[test]
    fn out_of_range_ef_is_rejected() {
        let cfg = small_cfg();
        for ef in [5.0, 95.0, f64::NAN] {
            assert!(matches!(gen_clip(ef, &cfg, 0), Err(Error::Validation(_))));
        }
        let bad = SyntheticConfig {
            cycle_period: 4,
            ..small_cfg()
        };
        assert!(matches!(gen_clip(50.0, &bad, 0), Err(Error::Validation(_))));
    }

    #[test]
    fn frame_index_examples() {
        let idx = frame_indices(175, 48, 2, 0).unwrap();
        assert_eq!(idx, (0..48).map(|i| 2 * i).collect::<Vec<_>>());
        assert_eq!(*idx.last().unwrap(), 94);
        let wrapped = frame_indices(10, 48, 2, 0).unwrap();
        assert_eq!(wrapped.len(), 48);
        assert_eq!(&wrapped[..7], &[0, 2, 4, 6, 8, 0, 2]);
        assert_eq!(frame_indices(10, 3, 4, 7).unwrap(), vec![7, 1, 5]);
        for len in [16, 36, 48, 54, 64, 96, 128] {
            assert_eq!(frame_indices(175, len, 2, 3).unwrap().len(), len);
        }
        assert!(matches!(frame_indices(0, 4, 2, 0), Err(Error::Contract(_))));
        assert!(matches!(frame_indices(5, 0, 2, 0), Err(Error::Validation(_))));
    }

    #[test]
    fn frame_sample_copies_selected_frames() {
        let clip = VideoClip::new("c", 50.0, [3, 1, 2], vec![0.0, 0.1, 1.0, 1.1, 2.0, 2.1]).unwrap();
        let frames = frame_sample::<f64>(&clip, 4, 2, 1).unwrap();
        let firsts: Vec<f64> = frames.iter().map(|f| (f.data()[0] * 10.0).round() / 10.0).collect();
        assert_eq!(firsts, vec![1.0, 0.0, 2.0, 1.0]);
        assert_eq!(frames[0].dims(), &[1, 1, 2]);
    }

    #[test]
    fn few_shot_full_coverage_minus_missing_classes() {
        let rows = (20..=80).map(|c| row(&format!("c{c}"), c as f64 + 0.5, Split::Train)).collect();
        let m = Manifest::new(rows).unwrap();
        assert_eq!(few_shot_sample(&m, 1, 0).unwrap().len(), 61);
    }

    #[test]
    fn few_shot_clamps_and_groups_by_floor() {
        let rows = vec![
            row("a", 0.3, Split::Train),
            row("b", 1.9, Split::Train),
            row("c", 100.0, Split::Train),
            row("d", 99.5, Split::Train),
            row("e", 50.0, Split::Test),
        ];
        let m = Manifest::new(rows).unwrap();
        // 0.3 and 1.9 share class 1; 99.5 is class 99; 100 is class 100
        assert_eq!(few_shot_sample(&m, 1, 4).unwrap().len(), 3);
        let all = few_shot_sample(&m, 50, 4).unwrap();
        assert_eq!(all.len(), 4);
        assert!(all.split(Split::Test).next().is_none());
    }

    #[test]
    fn few_shot_rejects_empty_train_and_zero_shots() {
        let m = Manifest::new(vec![row("a", 40.0, Split::Val)]).unwrap();
        assert!(matches!(few_shot_sample(&m, 1, 0), Err(Error::Validation(_))));
        let m = Manifest::new(vec![row("a", 40.0, Split::Train)]).unwrap();
        assert!(matches!(few_shot_sample(&m, 0, 0), Err(Error::Validation(_))));
    }

    #[test]
    fn manifest_validation() {
        assert!(Manifest::new(vec![row("a", 1.0, Split::Train), row("a", 2.0, Split::Val)]).is_err());
        assert!(Manifest::new(vec![row("a", 101.0, Split::Train)]).is_err());
    }

    #[test]
    fn manifest_csv_round_trip_and_echonet_columns() {
        let m = Manifest::new(vec![row("x1", 55.25, Split::Train), row("x2", 0.1, Split::Test)]).unwrap();
        let bytes = m.to_csv_bytes().unwrap();
        assert!(bytes.starts_with(b"FileName,EF,Split\n"));
        assert!(!bytes.contains(&b'\r'));
        assert_eq!(Manifest::from_csv_bytes(&bytes).unwrap(), m);

        let echonet = b"FileName,EF,ESV,EDV,FrameHeight,FrameWidth,FPS,NumberOfFrames,Split\n\
0X100009310A3BD7FC,78.49,14.88,69.21,112,112,50,174,VAL\n\
0X1002E8FBACD08477,59.10,40.38,98.74,112,112,50,215,TRAIN\n";
        let m = Manifest::from_csv_bytes(echonet).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m.rows()[1].split, Split::Train);
        assert_eq!(m.rows()[0].ef, 78.49);
    }

    #[test]
    fn malformed_manifest_reports_offset() {
        match Manifest::from_csv_bytes(b"Name,EF,Split\na,1,TRAIN\n") {
            Err(Error::Format { offset: 0, .. }) => {}
            other => panic!("{other:?}"),
        }
        let bad = b"FileName,EF,Split\na,1,TRAIN\nb,oops,TRAIN\n";
        match Manifest::from_csv_bytes(bad) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 28),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn clip_encoding_layout() {
        let clip = VideoClip::new("c", 1.0, [1, 1, 2], vec![0.5, 1.0]).unwrap();
        let bytes = encode_clip(&clip);
        assert_eq!(&bytes[..4], b"EFV1");
        assert_eq!(&bytes[4..16], &[1, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(&bytes[16..20], &0.5f32.to_le_bytes());
        assert_eq!(bytes.len(), 24);
    }

    #[test]
    fn truncated_or_corrupt_clip_reports_offset() {
        let clip = VideoClip::new("c", 1.0, [2, 2, 2], vec![0.25; 8]).unwrap();
        let bytes = encode_clip(&clip);
        match decode_clip(&bytes[..30], "c", 1.0) {
            Err(Error::Format { offset: 30, .. }) => {}
            other => panic!("{other:?}"),
        }
        match decode_clip(&bytes[..10], "c", 1.0) {
            Err(Error::Format { offset: 10, .. }) => {}
            other => panic!("{other:?}"),
        }
        match decode_clip(b"EFV2....", "c", 1.0) {
            Err(Error::Format { offset: 0, .. }) => {}
            other => panic!("{other:?}"),
        }
        let mut long = bytes.clone();
        long.push(0);
        match decode_clip(&long, "c", 1.0) {
            Err(Error::Format { offset: 48, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn synth_dataset_layout() {
        let counts = SplitCounts { train: 1, val: 0, test: 2 };
        let ds = synth_dataset(&small_cfg(), counts, 30, 33, 1).unwrap();
        assert_eq!(ds.clips_in(Split::Train).len(), 4);
        assert_eq!(ds.clips_in(Split::Test).len(), 8);
        for c in &ds.clips {
            let class = c.id[c.id.find('_').unwrap() + 1..][..3].parse::<u32>().unwrap();
            assert_eq!(ef_class(c.ef), class);
        }
        let sub = few_shot_sample(&ds.manifest, 1, 0).unwrap();
        assert_eq!(ds.select(&sub).unwrap().len(), 4);
    }

    #[test]
    fn dataset_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let counts = SplitCounts { train: 1, val: 1, test: 1 };
        let ds = synth_dataset(&small_cfg(), counts, 40, 41, 7).unwrap();
        write_dataset(dir.path(), &ds).unwrap();
        assert_eq!(read_dataset(dir.path()).unwrap(), ds);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn sampled_length_is_exact(total in 1usize..300, length in 1usize..200, stride in 1usize..5, offset in 0usize..400) {
            let idx = frame_indices(total, length, stride, offset).unwrap();
            prop_assert_eq!(idx.len(), length);
            prop_assert!(idx.iter().all(|&i| i < total));
        }

        #[test]
        fn few_shot_is_nested(efs in prop::collection::vec(1.0f64..99.0, 1..80), seed in any::<u64>()) {
            let rows = efs.iter().enumerate().map(|(i, &ef)| row(&format!("r{i}"), ef, Split::Train)).collect();
            let m = Manifest::new(rows).unwrap();
            let mut prev: Option<HashSet<String>> = None;
            for n in [1, 2, 4, 8] {
                let sub = few_shot_sample(&m, n, seed).unwrap();
                let mut per_class: BTreeMap<u32, usize> = BTreeMap::new();
                for r in sub.rows() {
                    *per_class.entry(ef_class(r.ef)).or_default() += 1;
                }
                let mut sizes: BTreeMap<u32, usize> = BTreeMap::new();
                for r in m.rows() {
                    *sizes.entry(ef_class(r.ef)).or_default() += 1;
                }
                for (c, size) in &sizes {
                    prop_assert_eq!(per_class.get(c).copied().unwrap_or(0), (*size).min(n));
                }
                let names: HashSet<String> = sub.rows().iter().map(|r| r.file_name.clone()).collect();
                if let Some(p) = &prev {
                    prop_assert!(p.is_subset(&names));
                }
                prev = Some(names);
            }
        }

        #[test]
        fn clip_codec_round_trip(t in 1usize..4, h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f32> = (0..t * h * w).map(|_| rng.gen()).collect();
            let clip = VideoClip::new("p", 33.0, [t, h, w], data).unwrap();
            prop_assert_eq!(decode_clip(&encode_clip(&clip), "p", 33.0).unwrap(), clip);
        }
    }
}
