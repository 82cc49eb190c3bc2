//! Synthetic 32-frame sequences, shift-and-median stacking, multi-depth
//! channel assembly, augmentation, standardization and splitting.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::canonical;
use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{read_mdt_file, write_mdt_file, Tensor};

pub const FRAMES: usize = 32;
pub const CUTOUT: usize = 20;
pub const DEPTHS: [usize; 4] = [32, 16, 8, 4];
pub const DATASET_FORMAT_VERSION: u32 = 1;

// ------------------------------------------------------------------ combos

/// Ordered set of stacking depths, kept in descending order.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Combo(Vec<usize>);

impl Combo {
    pub fn new(depths: &[usize]) -> Result<Self> {
        if depths.is_empty() {
            return Err(Error::invalid("combo needs at least one depth"));
        }
        let set: BTreeSet<usize> = depths.iter().copied().collect();
        if set.len() != depths.len() {
            return Err(Error::invalid(format!("duplicate depth in combo {depths:?}")));
        }
        if let Some(d) = depths.iter().find(|d| !DEPTHS.contains(d)) {
            return Err(Error::invalid(format!("depth {d} not in {{32, 16, 8, 4}}")));
        }
        Ok(Combo(set.into_iter().rev().collect()))
    }

    pub fn depths(&self) -> &[usize] {
        &self.0
    }

    /// One channel per group of `d` frames, summed over depths.
    pub fn channels(&self) -> usize {
        self.0.iter().map(|d| FRAMES / d).sum()
    }

    /// The five combinations the experiments enumerate.
    pub fn paper_set() -> Vec<Combo> {
        [&[32][..], &[32, 16], &[32, 16, 8], &[32, 16, 8, 4], &[32, 4]]
            .iter()
            .map(|d| Combo::new(d).expect("valid"))
            .collect()
    }
}

impl TryFrom<Vec<usize>> for Combo {
    type Error = Error;
    fn try_from(v: Vec<usize>) -> Result<Self> {
        Combo::new(&v)
    }
}

impl From<Combo> for Vec<usize> {
    fn from(c: Combo) -> Self {
        c.0
    }
}

impl fmt::Display for Combo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|d| d.to_string()).collect();
        f.write_str(&parts.join(","))
    }
}

impl FromStr for Combo {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let depths = s
            .split(',')
            .map(|p| {
                p.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::invalid(format!("bad depth {p:?} in combo {s:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Combo::new(&depths)
    }
}

// ------------------------------------------------------------------ scenes

/// A point source: sub-pixel position at frame 0, velocity in px/frame and
/// peak amplitude of the continuous Gaussian profile.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Track {
    pub x0: f64,
    pub y0: f64,
    pub vx: f64,
    pub vy: f64,
    pub peak: f64,
}

impl Track {
    pub fn position(&self, k: usize) -> (f64, f64) {
        (self.x0 + k as f64 * self.vx, self.y0 + k as f64 * self.vy)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub frame_size: usize,
    pub psf_sigma: f64,
    pub noise_sigma: f64,
    pub moving: Option<Track>,
    /// Static stars (velocity ignored).
    pub stars: Vec<Track>,
    /// Single hot pixels: (x, y, value).
    pub hot_pixels: Vec<(usize, usize, f64)>,
}

impl Scene {
    pub fn empty(frame_size: usize, psf_sigma: f64, noise_sigma: f64) -> Self {
        Scene {
            frame_size,
            psf_sigma,
            noise_sigma,
            moving: None,
            stars: Vec::new(),
            hot_pixels: Vec::new(),
        }
    }

    /// Pixel index of the frame centre; a source at `centre() + 0.5` sits
    /// in the middle of that pixel.
    pub fn centre(&self) -> usize {
        self.frame_size / 2
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence {
    pub size: usize,
    /// `FRAMES` row-major `size × size` images.
    pub frames: Vec<Vec<f32>>,
    pub truth: Option<Track>,
    pub noise_sigma: f64,
    pub psf_sigma: f64,
}

fn erf_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Adds a Gaussian of the given peak, integrated over each pixel, to `img`.
fn render_psf(img: &mut [f32], size: usize, x: f64, y: f64, peak: f64, sigma: f64) {
    let total = peak * 2.0 * std::f64::consts::PI * sigma * sigma;
    let reach = (5.0 * sigma).ceil() as i64 + 1;
    let span = |c: f64| {
        let lo = ((c.floor() as i64) - reach).max(0) as usize;
        let hi = ((c.floor() as i64) + reach + 1).clamp(0, size as i64) as usize;
        (lo, hi)
    };
    let (x_lo, x_hi) = span(x);
    let (y_lo, y_hi) = span(y);
    if x_lo >= x_hi || y_lo >= y_hi {
        return;
    }
    let weights = |lo: usize, hi: usize, c: f64| -> Vec<f64> {
        (lo..hi)
            .map(|p| erf_cdf((p as f64 + 1.0 - c) / sigma) - erf_cdf((p as f64 - c) / sigma))
            .collect()
    };
    let wx = weights(x_lo, x_hi, x);
    let wy = weights(y_lo, y_hi, y);
    for (r, &fy) in (y_lo..y_hi).zip(&wy) {
        let row = &mut img[r * size..(r + 1) * size];
        for (px, &fx) in row[x_lo..x_hi].iter_mut().zip(&wx) {
            *px += (total * fx * fy) as f32;
        }
    }
}

fn inside(size: usize, x: f64, y: f64) -> bool {
    let s = size as f64;
    (0.0..s).contains(&x) && (0.0..s).contains(&y)
}

/// Renders `FRAMES` noisy frames of `scene`.
pub fn synth_sequence<R: Rng + ?Sized>(scene: &Scene, rng: &mut R) -> Result<FrameSequence> {
    if !(scene.psf_sigma > 0.0) {
        return Err(Error::invalid(format!("psf_sigma must be > 0, got {}", scene.psf_sigma)));
    }
    if !(scene.noise_sigma >= 0.0) {
        return Err(Error::invalid(format!("noise_sigma must be >= 0, got {}", scene.noise_sigma)));
    }
    let size = scene.frame_size;
    if let Some(t) = scene.moving {
        for k in 0..FRAMES {
            let (x, y) = t.position(k);
            if !inside(size, x, y) {
                return Err(Error::invalid(format!(
                    "moving source leaves the {size}x{size} frame at frame {k} ({x:.2}, {y:.2})"
                )));
            }
        }
    }
    let mut still = vec![0f32; size * size];
    for s in &scene.stars {
        render_psf(&mut still, size, s.x0, s.y0, s.peak, scene.psf_sigma);
    }
    for &(x, y, v) in &scene.hot_pixels {
        if x >= size || y >= size {
            return Err(Error::invalid(format!("hot pixel ({x}, {y}) outside frame")));
        }
        still[y * size + x] += v as f32;
    }
    let noise = Normal::new(0.0, scene.noise_sigma).map_err(|e| Error::invalid(e.to_string()))?;
    let mut frames = Vec::with_capacity(FRAMES);
    for k in 0..FRAMES {
        let mut img = still.clone();
        if let Some(t) = scene.moving {
            let (x, y) = t.position(k);
            render_psf(&mut img, size, x, y, t.peak, scene.psf_sigma);
        }
        if scene.noise_sigma > 0.0 {
            for p in img.iter_mut() {
                *p += noise.sample(rng) as f32;
            }
        }
        frames.push(img);
    }
    Ok(FrameSequence {
        size,
        frames,
        truth: scene.moving,
        noise_sigma: scene.noise_sigma,
        psf_sigma: scene.psf_sigma,
    })
}

// ---------------------------------------------------------------- stacking

/// Median of a scratch buffer; even lengths average the two central values.
pub fn median(values: &mut [f32]) -> f32 {
    assert!(!values.is_empty(), "median of empty slice");
    values.sort_unstable_by(f32::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        ((values[n / 2 - 1] as f64 + values[n / 2] as f64) / 2.0) as f32
    }
}

/// Integer shift applied to frame `k`, truncated toward zero.
pub fn frame_shift(k: usize, v: f64) -> i64 {
    (k as f64 * v).trunc() as i64
}

/// Shift-and-median stacks of `seq` at one depth.
///
/// The cutout is `CUTOUT` pixels square, centred on the frame centre at
/// frame 0. Frame `k` (global index) is read through a window displaced by
/// `trunc(k·v)`, so a source moving at `v` stays put in every group.
pub fn shift_stack(seq: &FrameSequence, velocity: (f64, f64), depth: usize) -> Result<Vec<Tensor<f32>>> {
    if depth == 0 || FRAMES % depth != 0 {
        return Err(Error::invalid(format!("depth {depth} does not divide {FRAMES}")));
    }
    if seq.frames.len() != FRAMES {
        return Err(Error::invalid(format!("expected {FRAMES} frames, got {}", seq.frames.len())));
    }
    let size = seq.size as i64;
    let origin = (seq.size / 2) as i64 - (CUTOUT / 2) as i64;
    let mut offsets = Vec::with_capacity(FRAMES);
    for k in 0..FRAMES {
        let ox = origin + frame_shift(k, velocity.0);
        let oy = origin + frame_shift(k, velocity.1);
        if ox < 0 || oy < 0 || ox + CUTOUT as i64 > size || oy + CUTOUT as i64 > size {
            return Err(Error::invalid(format!(
                "stacking window leaves the {size}x{size} frame at frame {k}"
            )));
        }
        offsets.push((ox as usize, oy as usize));
    }
    let s = seq.size;
    let mut out = Vec::with_capacity(FRAMES / depth);
    let mut scratch = vec![0f32; depth];
    for g in 0..FRAMES / depth {
        let mut img = vec![0f32; CUTOUT * CUTOUT];
        for (i, px) in img.iter_mut().enumerate() {
            let (r, c) = (i / CUTOUT, i % CUTOUT);
            for (j, slot) in scratch.iter_mut().enumerate() {
                let k = g * depth + j;
                let (ox, oy) = offsets[k];
                *slot = seq.frames[k][(oy + r) * s + ox + c];
            }
            *px = median(&mut scratch);
        }
        out.push(Tensor::new(vec![CUTOUT, CUTOUT], img)?);
    }
    Ok(out)
}

/// All depths of `combo`, keyed by depth.
pub fn stack_all(seq: &FrameSequence, velocity: (f64, f64), combo: &Combo) -> Result<BTreeMap<usize, Vec<Tensor<f32>>>> {
    combo
        .depths()
        .iter()
        .map(|&d| Ok((d, shift_stack(seq, velocity, d)?)))
        .collect()
}

// ----------------------------------------------------------------- samples

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleKind {
    Object,
    Noise,
    Mismatched,
    StaticStar,
    HotPixel,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// Shared by all augmented variants of one source image.
    pub source: u64,
    pub label: u8,
    pub kind: SampleKind,
    pub combo: Combo,
    /// `C × 20 × 20`.
    pub channels: Tensor<f32>,
}

/// Stacks every depth of `combo` along the channel axis: descending depth,
/// then group index. Pixel values are copied verbatim.
pub fn assemble_channels(stacks: &BTreeMap<usize, Vec<Tensor<f32>>>, combo: &Combo) -> Result<Tensor<f32>> {
    let mut data = Vec::with_capacity(combo.channels() * CUTOUT * CUTOUT);
    for d in combo.depths() {
        let group = stacks
            .get(d)
            .ok_or_else(|| Error::invalid(format!("missing stacks for depth {d}")))?;
        if group.len() != FRAMES / d {
            return Err(Error::invalid(format!(
                "depth {d}: expected {} stacks, got {}",
                FRAMES / d,
                group.len()
            )));
        }
        for t in group {
            if t.dims() != [CUTOUT, CUTOUT] {
                return Err(Error::shape("assemble_sample", "cutout", "20x20", format!("{:?}", t.dims())));
            }
            data.extend_from_slice(t.data());
        }
    }
    Tensor::new(vec![combo.channels(), CUTOUT, CUTOUT], data)
}

pub fn assemble_sample(
    id: impl Into<String>,
    source: u64,
    label: u8,
    kind: SampleKind,
    stacks: &BTreeMap<usize, Vec<Tensor<f32>>>,
    combo: &Combo,
) -> Result<Sample> {
    Ok(Sample {
        id: id.into(),
        source,
        label,
        kind,
        combo: combo.clone(),
        channels: assemble_channels(stacks, combo)?,
    })
}

// ------------------------------------------------------------ augmentation

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Transform {
    Identity,
    Rot90,
    Rot180,
    Rot270,
    HFlip,
    VFlip,
}

impl Transform {
    pub const ALL: [Transform; 6] = [
        Transform::Identity,
        Transform::Rot90,
        Transform::Rot180,
        Transform::Rot270,
        Transform::HFlip,
        Transform::VFlip,
    ];

    pub fn suffix(self) -> &'static str {
        match self {
            Transform::Identity => "orig",
            Transform::Rot90 => "rot90",
            Transform::Rot180 => "rot180",
            Transform::Rot270 => "rot270",
            Transform::HFlip => "hflip",
            Transform::VFlip => "vflip",
        }
    }

    /// Source pixel `(row, col)` for output pixel `(r, c)` of an `n × n` image.
    /// Rotations are counter-clockwise.
    fn source(self, n: usize, r: usize, c: usize) -> (usize, usize) {
        let m = n - 1;
        match self {
            Transform::Identity => (r, c),
            Transform::Rot90 => (c, m - r),
            Transform::Rot180 => (m - r, m - c),
            Transform::Rot270 => (m - c, r),
            Transform::HFlip => (r, m - c),
            Transform::VFlip => (m - r, c),
        }
    }

    /// Applies the transform to every channel of a `C × n × n` tensor.
    pub fn apply(self, t: &Tensor<f32>) -> Result<Tensor<f32>> {
        let (c, n) = match t.dims() {
            [c, h, w] if h == w => (*c, *h),
            d => return Err(Error::shape("augment", "square cutout", "C x n x n", format!("{d:?}"))),
        };
        let src = t.data();
        let mut out = vec![0f32; src.len()];
        for ch in 0..c {
            let base = ch * n * n;
            for r in 0..n {
                for col in 0..n {
                    let (sr, sc) = self.source(n, r, col);
                    out[base + r * n + col] = src[base + sr * n + sc];
                }
            }
        }
        Tensor::new(t.dims().to_vec(), out)
    }
}

/// Original plus five geometric variants, labels preserved.
pub fn augment(sample: &Sample) -> Result<Vec<Sample>> {
    Transform::ALL
        .iter()
        .map(|&tr| {
            Ok(Sample {
                id: format!("{}-{}", sample.id, tr.suffix()),
                channels: tr.apply(&sample.channels)?,
                ..sample.clone()
            })
        })
        .collect()
}

/// Uniformly random reordering of the channel axis.
pub fn permute_channels<R: Rng + ?Sized>(sample: &Sample, rng: &mut R) -> Sample {
    let dims = sample.channels.dims();
    let c = dims[0];
    let plane = sample.channels.len() / c.max(1);
    let mut order: Vec<usize> = (0..c).collect();
    order.shuffle(rng);
    let src = sample.channels.data();
    let mut data = Vec::with_capacity(src.len());
    for &o in &order {
        data.extend_from_slice(&src[o * plane..(o + 1) * plane]);
    }
    Sample {
        channels: Tensor::new(dims.to_vec(), data).expect("same size"),
        ..sample.clone()
    }
}

// --------------------------------------------------------- standardization

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Standardization {
    pub mean: f32,
    pub std: f32,
}

/// Global mean and population standard deviation over every pixel.
pub fn fit_standardization(samples: &[Sample]) -> Result<Standardization> {
    let n: usize = samples.iter().map(|s| s.channels.len()).sum();
    if n == 0 {
        return Err(Error::Empty("standardize"));
    }
    let mean = samples
        .iter()
        .flat_map(|s| s.channels.data())
        .map(|&v| v as f64)
        .sum::<f64>()
        / n as f64;
    let var = samples
        .iter()
        .flat_map(|s| s.channels.data())
        .map(|&v| (v as f64 - mean).powi(2))
        .sum::<f64>()
        / n as f64;
    let std = var.sqrt();
    if !(std > 0.0) || (std as f32) == 0.0 {
        return Err(Error::invalid("zero variance: cannot standardize"));
    }
    Ok(Standardization {
        mean: mean as f32,
        std: std as f32,
    })
}

pub fn apply_standardization(samples: &mut [Sample], stats: Standardization) {
    let (m, s) = (stats.mean as f64, stats.std as f64);
    for sample in samples {
        for v in sample.channels.data_mut() {
            *v = ((*v as f64 - m) / s) as f32;
        }
    }
}

pub fn standardize(samples: &mut [Sample]) -> Result<Standardization> {
    let stats = fit_standardization(samples)?;
    apply_standardization(samples, stats);
    Ok(stats)
}

// --------------------------------------------------------------- splitting

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSplit {
    pub seed: u64,
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

/// Shuffles source images by `seed` and allocates them 70/10/20 (floors,
/// remainder to train). Augmented variants follow their source.
pub fn split(samples: &[Sample], seed: u64) -> Result<DatasetSplit> {
    if samples.len() < 10 {
        return Err(Error::invalid(format!("split needs >= 10 samples, got {}", samples.len())));
    }
    let mut sources: Vec<u64> = samples.iter().map(|s| s.source).collect::<BTreeSet<_>>().into_iter().collect();
    sources.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = sources.len();
    let n_val = n / 10;
    let n_test = n / 5;
    let n_train = n - n_val - n_test;
    let mut bucket = BTreeMap::new();
    for (i, s) in sources.iter().enumerate() {
        let b = if i < n_train {
            0
        } else if i < n_train + n_val {
            1
        } else {
            2
        };
        bucket.insert(*s, b);
    }
    let mut out = DatasetSplit {
        seed,
        ..Default::default()
    };
    for s in samples {
        match bucket[&s.source] {
            0 => out.train.push(s.id.clone()),
            1 => out.validation.push(s.id.clone()),
            _ => out.test.push(s.id.clone()),
        }
    }
    Ok(out)
}

// --------------------------------------------------------------- generator

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    /// Source images before augmentation.
    pub samples: usize,
    pub positive_fraction: f64,
    pub combo: Combo,
    pub frame_size: usize,
    pub psf_sigma: f64,
    pub noise_sigma: f64,
    /// Moving-source peak range, in units of `noise_sigma`.
    pub peak_min: f64,
    pub peak_max: f64,
    /// Assumed-velocity magnitude range, px/frame.
    pub speed_min: f64,
    pub speed_max: f64,
    /// Minimum velocity error of mismatched negatives, px/frame.
    pub mismatch_min: f64,
    pub max_background_stars: usize,
    pub augment: bool,
    pub permute_channels: bool,
    pub standardize: bool,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            samples: 2000,
            positive_fraction: 0.75,
            combo: Combo::new(&[32, 4]).expect("valid"),
            frame_size: 64,
            psf_sigma: 1.5,
            noise_sigma: 1.0,
            peak_min: 1.5,
            peak_max: 4.0,
            speed_min: 0.2,
            speed_max: 0.6,
            mismatch_min: 0.4,
            max_background_stars: 3,
            augment: false,
            permute_channels: false,
            standardize: true,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::invalid("samples must be positive"));
        }
        if !(0.0..=1.0).contains(&self.positive_fraction) {
            return Err(Error::invalid("positive_fraction must lie in [0, 1]"));
        }
        if !(self.peak_min > 0.0 && self.peak_min <= self.peak_max) {
            return Err(Error::invalid("need 0 < peak_min <= peak_max"));
        }
        if !(self.speed_min >= 0.0 && self.speed_min <= self.speed_max) {
            return Err(Error::invalid("need 0 <= speed_min <= speed_max"));
        }
        if (self.frame_size as f64) < CUTOUT as f64 + 2.0 * (FRAMES - 1) as f64 * self.speed_max + 2.0 {
            return Err(Error::invalid(format!(
                "frame_size {} too small for speed_max {}",
                self.frame_size, self.speed_max
            )));
        }
        if self.mismatch_min > 0.9 * mismatch_limit(self.frame_size) {
            return Err(Error::invalid(format!(
                "mismatch_min {} unreachable inside a {}px frame",
                self.mismatch_min, self.frame_size
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub combo: Combo,
    pub samples: Vec<Sample>,
    pub standardization: Option<Standardization>,
}

impl Dataset {
    pub fn channels(&self) -> usize {
        self.combo.channels()
    }

    pub fn index(&self) -> BTreeMap<&str, usize> {
        self.samples.iter().enumerate().map(|(i, s)| (s.id.as_str(), i)).collect()
    }

    pub fn summary(&self) -> LabelSummary {
        LabelSummary::of(self.samples.iter())
    }

    /// Samples in the order of `ids`.
    pub fn select(&self, ids: &[String]) -> Result<Vec<&Sample>> {
        let index = self.index();
        ids.iter()
            .map(|id| {
                index
                    .get(id.as_str())
                    .map(|&i| &self.samples[i])
                    .ok_or_else(|| Error::invalid(format!("unknown sample id {id}")))
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSummary {
    pub total: usize,
    pub positive: usize,
    pub negative: usize,
}

impl LabelSummary {
    pub fn of<'a>(samples: impl Iterator<Item = &'a Sample>) -> Self {
        let mut s = LabelSummary::default();
        for x in samples {
            s.total += 1;
            if x.label == 1 {
                s.positive += 1;
            } else {
                s.negative += 1;
            }
        }
        s
    }
}

fn random_velocity<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> (f64, f64) {
    let speed = if hi > lo { rng.random_range(lo..hi) } else { lo };
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    (speed * angle.cos(), speed * angle.sin())
}

/// Fastest true motion that keeps a centred source inside the frame.
fn mismatch_limit(frame_size: usize) -> f64 {
    ((frame_size as f64 / 2.0 - 1.0) / (FRAMES - 1) as f64).max(0.0)
}

/// Scene and assumed velocity for one candidate.
pub fn candidate_scene<R: Rng + ?Sized>(cfg: &GenConfig, kind: SampleKind, rng: &mut R) -> (Scene, (f64, f64)) {
    let mut scene = Scene::empty(cfg.frame_size, cfg.psf_sigma, cfg.noise_sigma);
    let c = scene.centre() as f64 + 0.5;
    let size = cfg.frame_size as f64;
    let sigma = cfg.noise_sigma.max(1e-12);
    let assumed = random_velocity(rng, cfg.speed_min, cfg.speed_max);
    let peak = rng.random_range(cfg.peak_min..=cfg.peak_max) * sigma;
    for _ in 0..rng.random_range(0..=cfg.max_background_stars) {
        scene.stars.push(Track {
            x0: rng.random_range(0.0..size),
            y0: rng.random_range(0.0..size),
            vx: 0.0,
            vy: 0.0,
            peak: rng.random_range(2.0..20.0) * sigma,
        });
    }
    match kind {
        SampleKind::Object => {
            scene.moving = Some(Track {
                x0: c,
                y0: c,
                vx: assumed.0,
                vy: assumed.1,
                peak,
            });
        }
        SampleKind::Mismatched => {
            // true motion differs from the assumed one by at least mismatch_min
            let limit = mismatch_limit(cfg.frame_size);
            let v = loop {
                let v = random_velocity(rng, 0.0, limit);
                if ((v.0 - assumed.0).powi(2) + (v.1 - assumed.1).powi(2)).sqrt() >= cfg.mismatch_min {
                    break v;
                }
            };
            scene.moving = Some(Track {
                x0: c,
                y0: c,
                vx: v.0,
                vy: v.1,
                peak,
            });
        }
        SampleKind::StaticStar => scene.stars.push(Track {
            x0: c,
            y0: c,
            vx: 0.0,
            vy: 0.0,
            peak,
        }),
        SampleKind::HotPixel => {
            let v = rng.random_range(3.0..10.0) * sigma;
            scene.hot_pixels.push((scene.centre(), scene.centre(), v));
        }
        SampleKind::Noise => {}
    }
    (scene, assumed)
}

/// Per-item generator: stream `index` of the ChaCha sequence seeded by `seed`.
pub fn item_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

const NEGATIVE_KINDS: [SampleKind; 4] = [
    SampleKind::Noise,
    SampleKind::Mismatched,
    SampleKind::StaticStar,
    SampleKind::HotPixel,
];

/// Builds a full synthetic dataset. Output order and content depend only on
/// `cfg` and `seed`.
pub fn generate(cfg: &GenConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let n = cfg.samples;
    let n_pos = (n as f64 * cfg.positive_fraction).round() as usize;
    let mut labels: Vec<u8> = (0..n).map(|i| u8::from(i < n_pos)).collect();
    labels.shuffle(&mut item_rng(seed, u64::MAX));
    let width = n.to_string().len().max(5);
    let produced = par::map_range(n, |i| -> Result<Vec<Sample>> {
        let mut rng = item_rng(seed, i as u64);
        let kind = if labels[i] == 1 {
            SampleKind::Object
        } else {
            NEGATIVE_KINDS[rng.random_range(0..NEGATIVE_KINDS.len())]
        };
        let (scene, assumed) = candidate_scene(cfg, kind, &mut rng);
        let seq = synth_sequence(&scene, &mut rng)?;
        let stacks = stack_all(&seq, assumed, &cfg.combo)?;
        let base = assemble_sample(format!("s{i:0width$}"), i as u64, labels[i], kind, &stacks, &cfg.combo)?;
        let mut variants = if cfg.augment { augment(&base)? } else { vec![base] };
        if cfg.permute_channels {
            for v in variants.iter_mut() {
                *v = permute_channels(v, &mut rng);
            }
        }
        Ok(variants)
    });
    let mut samples = Vec::with_capacity(if cfg.augment { 6 * n } else { n });
    for r in produced {
        samples.extend(r?);
    }
    let standardization = if cfg.standardize {
        Some(standardize(&mut samples)?)
    } else {
        None
    };
    Ok(Dataset {
        combo: cfg.combo.clone(),
        samples,
        standardization,
    })
}

/// `[N, C, 20, 20]` batch and labels for the given samples.
pub fn batch(samples: &[&Sample]) -> Result<(Tensor<f32>, Vec<f32>)> {
    let first = samples.first().ok_or(Error::Empty("batch"))?;
    let per = first.channels.len();
    let mut data = Vec::with_capacity(per * samples.len());
    for s in samples {
        if s.channels.dims() != first.channels.dims() {
            return Err(Error::shape(
                "batch",
                "sample dims",
                format!("{:?}", first.channels.dims()),
                format!("{:?}", s.channels.dims()),
            ));
        }
        data.extend_from_slice(s.channels.data());
    }
    let mut dims = vec![samples.len()];
    dims.extend_from_slice(first.channels.dims());
    let labels = samples.iter().map(|s| s.label as f32).collect();
    Ok((Tensor::new(dims, data)?, labels))
}

// ---------------------------------------------------------------- storage

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    file: String,
    id: String,
    kind: SampleKind,
    label: u8,
    source: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    channels: usize,
    combo: Combo,
    format_version: u32,
    samples: Vec<ManifestEntry>,
    size: usize,
    standardization: Option<Standardization>,
    summary: LabelSummary,
}

fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

pub fn manifest_text(ds: &Dataset) -> Result<String> {
    let samples = ds
        .samples
        .iter()
        .map(|s| {
            if !valid_id(&s.id) {
                return Err(Error::invalid(format!("sample id {:?} is not file-safe", s.id)));
            }
            Ok(ManifestEntry {
                file: format!("tensors/{}.mdt", s.id),
                id: s.id.clone(),
                kind: s.kind,
                label: s.label,
                source: s.source,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let m = Manifest {
        channels: ds.channels(),
        combo: ds.combo.clone(),
        format_version: DATASET_FORMAT_VERSION,
        samples,
        size: CUTOUT,
        standardization: ds.standardization,
        summary: ds.summary(),
    };
    canonical::to_string(&m)
}

/// Writes `manifest.json` and `tensors/<id>.mdt` under `dir`.
pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    let text = manifest_text(ds)?;
    fs::create_dir_all(dir.join("tensors"))?;
    for s in &ds.samples {
        if s.channels.dims() != [ds.channels(), CUTOUT, CUTOUT] {
            return Err(Error::shape(
                "write_dataset",
                "sample dims",
                format!("[{}, {CUTOUT}, {CUTOUT}]", ds.channels()),
                format!("{:?}", s.channels.dims()),
            ));
        }
        write_mdt_file(&dir.join("tensors").join(format!("{}.mdt", s.id)), &s.channels)?;
    }
    fs::write(dir.join("manifest.json"), text)?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(dir.join("manifest.json"))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Format(format!("manifest: {e}")))?;
    if m.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::Format(format!("dataset format version {}", m.format_version)));
    }
    if m.channels != m.combo.channels() || m.size != CUTOUT {
        return Err(Error::Format(format!(
            "manifest says {} channels of {}px, combo {} implies {} of {CUTOUT}px",
            m.channels,
            m.size,
            m.combo,
            m.combo.channels()
        )));
    }
    let mut samples = Vec::with_capacity(m.samples.len());
    for e in m.samples {
        if !valid_id(&e.id) || e.file != format!("tensors/{}.mdt", e.id) {
            return Err(Error::Format(format!("bad manifest entry for {:?}", e.id)));
        }
        if e.label > 1 {
            return Err(Error::Format(format!("label {} for {}", e.label, e.id)));
        }
        let channels = read_mdt_file(&dir.join(&e.file))?;
        if channels.dims() != [m.channels, CUTOUT, CUTOUT] {
            return Err(Error::Format(format!(
                "{}: dims {:?} disagree with manifest",
                e.id,
                channels.dims()
            )));
        }
        samples.push(Sample {
            id: e.id,
            source: e.source,
            label: e.label,
            kind: e.kind,
            combo: m.combo.clone(),
            channels,
        });
    }
    let ds = Dataset {
        combo: m.combo,
        samples,
        standardization: m.standardization,
    };
    if ds.summary() != m.summary {
        return Err(Error::Format("manifest summary disagrees with its entries".into()));
    }
    if ds.index().len() != ds.samples.len() {
        return Err(Error::Format("duplicate sample ids".into()));
    }
    Ok(ds)
}
