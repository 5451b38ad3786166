//! Procedural "localized lesion" images.
//!
//! Every image holds a bright disk whose interior carries a glyph: one, two
//! or three dark strokes, straight for family A and bowed for family B, so
//! the subtype is visible only inside the disk's bounding square. Clutter
//! strokes of the same kind are scattered outside that square.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::stn::{self, BBoxParams, WarpParams};
use crate::tensor::{read_tensor_file, write_tensor_file, Tensor};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const MIN_CLASS_COUNT: usize = 5;

const DISK_TONE: f64 = 0.85;
const STROKE_TONE: f64 = 0.12;
const STROKE_WIDTH: f64 = 1.6;
const GLYPH_EXTENT: f64 = 0.8;
const GLYPH_MASK: f64 = 0.85;
const STROKE_GAP: f64 = 0.45;
const BOW_DEPTH: f64 = 0.3;
const MAX_TILT_DEG: f64 = 25.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Label6 {
    N,
    A1,
    A2,
    A3,
    B1,
    B2,
    B3,
}

impl Label6 {
    pub const ALL: [Label6; 7] = [
        Label6::N,
        Label6::A1,
        Label6::A2,
        Label6::A3,
        Label6::B1,
        Label6::B2,
        Label6::B3,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Label6::N => "N",
            Label6::A1 => "A1",
            Label6::A2 => "A2",
            Label6::A3 => "A3",
            Label6::B1 => "B1",
            Label6::B2 => "B2",
            Label6::B3 => "B3",
        }
    }

    pub fn label3(self) -> Label3 {
        match self {
            Label6::N => Label3::N,
            Label6::A1 | Label6::A2 | Label6::A3 => Label3::A,
            Label6::B1 | Label6::B2 | Label6::B3 => Label3::B,
        }
    }

    pub fn label2(self) -> Label2 {
        match self {
            Label6::N => Label2::Normal,
            _ => Label2::Fracture,
        }
    }

    pub fn is_fracture(self) -> bool {
        self != Label6::N
    }

    /// Number of parallel strokes in the glyph (0 for an intact disk).
    pub fn strokes(self) -> usize {
        match self {
            Label6::N => 0,
            Label6::A1 | Label6::B1 => 1,
            Label6::A2 | Label6::B2 => 2,
            Label6::A3 | Label6::B3 => 3,
        }
    }

    pub fn bowed(self) -> bool {
        matches!(self, Label6::B1 | Label6::B2 | Label6::B3)
    }
}

impl fmt::Display for Label6 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Label3 {
    A,
    B,
    N,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label2 {
    Fracture,
    Normal,
}

/// Which label granularity a run classifies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scenario {
    /// fracture vs normal
    #[serde(rename = "2")]
    Two,
    /// A, B, N
    #[serde(rename = "3")]
    Three,
    /// A1..B3; normal images are not part of this task
    #[serde(rename = "6")]
    Six,
}

impl Scenario {
    pub fn from_classes(n: usize) -> Result<Self> {
        match n {
            2 => Ok(Scenario::Two),
            3 => Ok(Scenario::Three),
            6 => Ok(Scenario::Six),
            other => Err(Error::Config(format!(
                "class count must be 2, 3 or 6, got {other}"
            ))),
        }
    }

    pub fn classes(self) -> usize {
        match self {
            Scenario::Two => 2,
            Scenario::Three => 3,
            Scenario::Six => 6,
        }
    }

    pub fn class_names(self) -> Vec<String> {
        let names: &[&str] = match self {
            Scenario::Two => &["fracture", "normal"],
            Scenario::Three => &["A", "B", "N"],
            Scenario::Six => &["A1", "A2", "A3", "B1", "B2", "B3"],
        };
        names.iter().map(|s| s.to_string()).collect()
    }

    /// Class index of a sample in this scenario, or `None` if excluded.
    pub fn class_of(self, label: Label6) -> Option<usize> {
        match self {
            Scenario::Two => Some(if label.is_fracture() { 0 } else { 1 }),
            Scenario::Three => Some(match label.label3() {
                Label3::A => 0,
                Label3::B => 1,
                Label3::N => 2,
            }),
            Scenario::Six => match label {
                Label6::N => None,
                other => Some(other as usize - 1),
            },
        }
    }

    pub fn includes(self, label: Label6) -> bool {
        self.class_of(label).is_some()
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        s.parse::<usize>()
            .map_err(|_| Error::Config(format!("class count must be 2, 3 or 6, got `{s}`")))
            .and_then(Scenario::from_classes)
    }
}

/// Relative class frequencies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Skewed counts: 567 normal, 327 type A and 453 type B per 1347 images,
    /// with A3 the rarest subtype (15) and B2 the most common (241).
    Paper,
    Uniform,
}

impl Profile {
    fn weights(self) -> [f64; 7] {
        match self {
            Profile::Paper => [567.0, 140.0, 172.0, 15.0, 110.0, 241.0, 102.0],
            Profile::Uniform => [1.0; 7],
        }
    }
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "paper" => Ok(Profile::Paper),
            "uniform" => Ok(Profile::Uniform),
            other => Err(Error::Config(format!(
                "unknown profile `{other}` (expected paper or uniform)"
            ))),
        }
    }
}

/// Integer allocation of `total` proportional to `weights`, largest remainder first.
pub fn largest_remainder(weights: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if sum <= 0.0 {
        return vec![0; weights.len()];
    }
    let quotas: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.partial_cmp(&ra)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let assigned: usize = counts.iter().sum();
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub total: usize,
    pub profile: Profile,
    pub scenario: Scenario,
    pub image_size: usize,
    pub radius_min: f64,
    pub radius_max: f64,
    pub distractors: usize,
    pub noise: f64,
    pub seed: u64,
    pub ratios: SplitRatios,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            total: 1347,
            profile: Profile::Paper,
            scenario: Scenario::Three,
            image_size: 64,
            radius_min: 8.0,
            radius_max: 12.0,
            distractors: 4,
            noise: 0.02,
            seed: 0,
            ratios: SplitRatios::default(),
        }
    }
}

impl GenConfig {
    /// Per-label counts in [`Label6::ALL`] order.
    pub fn counts(&self) -> Result<[usize; 7]> {
        let mut w = self.profile.weights();
        for (wi, label) in w.iter_mut().zip(Label6::ALL) {
            if !self.scenario.includes(label) {
                *wi = 0.0;
            }
        }
        let alloc = largest_remainder(&w, self.total);
        let mut out = [0; 7];
        out.copy_from_slice(&alloc);
        for (label, &n) in Label6::ALL.iter().zip(&out) {
            if self.scenario.includes(*label) && n < MIN_CLASS_COUNT {
                return Err(Error::Config(format!(
                    "class {label} would get {n} samples from a total of {}; at least {MIN_CLASS_COUNT} are needed",
                    self.total
                )));
            }
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 {
            return Err(Error::Config(format!(
                "image size must be at least 16, got {}",
                self.image_size
            )));
        }
        if !(self.radius_min > 1.0 && self.radius_min <= self.radius_max) {
            return Err(Error::Config(format!(
                "disk radius range [{}, {}] is invalid",
                self.radius_min, self.radius_max
            )));
        }
        if 2.0 * self.radius_max + 2.0 >= self.image_size as f64 {
            return Err(Error::Config("disk does not fit in the image".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!(
                "noise amplitude must be nonnegative, got {}",
                self.noise
            )));
        }
        self.ratios.validate()?;
        self.counts().map(|_| ())
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

/// Train/validation/test fractions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.7,
            val: 0.1,
            test: 0.2,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|p| !(0.0..=1.0).contains(p))
            || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(Error::Config(format!(
                "split ratios must be in [0, 1] and sum to 1, got {} / {} / {}",
                self.train, self.val, self.test
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub index: usize,
    /// `1×H×W`, values in `[0, 1]`.
    pub image: Tensor,
    pub label6: Label6,
    pub roi: BBoxParams,
    pub split: Split,
    pub sample_seed: u64,
    /// Original sample this one was augmented from.
    pub source_index: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub path: String,
    pub label6: Label6,
    pub label3: Label3,
    pub label2: Label2,
    pub roi: BBoxParams,
    pub split: Split,
    pub sample_seed: u64,
    pub source_index: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub master_seed: u64,
    pub config: GenConfig,
    pub config_hash: String,
    pub class_counts: BTreeMap<String, usize>,
    pub samples: Vec<SampleRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: GenConfig,
    pub samples: Vec<LabeledSample>,
}

/// 64-bit mix used to derive independent per-sample seeds.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub fn derive_seed(master: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(master ^ splitmix64(stream)) ^ index)
}

const STREAM_SAMPLE: u64 = 1;
const STREAM_LABELS: u64 = 2;
const STREAM_SPLIT: u64 = 3;
const STREAM_BALANCE: u64 = 4;

pub fn rng_for(master: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, stream, index))
}

/// Pixel-space geometry of a glyph.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Glyph {
    pub label: Label6,
    /// Stroke direction in radians, measured from the column axis.
    pub tilt: f64,
    /// `+1` or `-1`: which side family-B strokes bow towards.
    pub bow: f64,
}

/// Coverage in `[0, 1]` of a pixel at local offset `(u, v)` (along and
/// across the stroke) by a stroke of half-length `len` whose centreline sits
/// at `v = offset + depth·(1 − (u/len)²)`.
fn stroke_coverage(u: f64, v: f64, len: f64, offset: f64, depth: f64) -> f64 {
    let dist = if u.abs() <= len {
        let t = u / len;
        (v - offset - depth * (1.0 - t * t)).abs()
    } else {
        let eu = u.abs() - len;
        let ev = v - offset;
        (eu * eu + ev * ev).sqrt()
    };
    (STROKE_WIDTH / 2.0 - dist + 0.5).clamp(0.0, 1.0)
}

/// Darkening coverage of the glyph at pixel `(r, c)` for a disk at `centre`
/// with radius `radius`.
pub fn glyph_coverage(glyph: &Glyph, centre: (f64, f64), radius: f64, r: f64, c: f64) -> f64 {
    let k = glyph.label.strokes();
    if k == 0 {
        return 0.0;
    }
    let (dr, dc) = (r - centre.0, c - centre.1);
    let d = (dr * dr + dc * dc).sqrt();
    let mask = (GLYPH_MASK * radius - d + 0.5).clamp(0.0, 1.0);
    if mask == 0.0 {
        return 0.0;
    }
    let (sin, cos) = glyph.tilt.sin_cos();
    let u = dc * cos + dr * sin;
    let v = -dc * sin + dr * cos;
    let len = GLYPH_EXTENT * radius;
    let depth = if glyph.label.bowed() {
        glyph.bow * BOW_DEPTH * radius
    } else {
        0.0
    };
    let mut cov: f64 = 0.0;
    for i in 0..k {
        let offset = (i as f64 - (k - 1) as f64 / 2.0) * STROKE_GAP * radius;
        cov = cov.max(stroke_coverage(u, v, len, offset, depth));
    }
    cov * mask
}

fn blend(px: &mut f64, tone: f64, cov: f64) {
    *px = *px * (1.0 - cov) + tone * cov;
}

struct Distractor {
    centre: (f64, f64),
    tilt: f64,
    len: f64,
    depth: f64,
    tone: f64,
}

impl Distractor {
    fn reach(&self) -> f64 {
        self.len + self.depth.abs() + STROKE_WIDTH
    }
}

/// Renders one sample from its own seed.
pub fn render_sample(cfg: &GenConfig, label: Label6, seed: u64) -> (Tensor, BBoxParams) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.image_size;
    let nf = n as f64;
    let radius = rng.gen_range(cfg.radius_min..=cfg.radius_max);
    let lo = radius + 1.0;
    let hi = nf - 2.0 - radius;
    let centre = (rng.gen_range(lo..=hi), rng.gen_range(lo..=hi));
    let glyph = Glyph {
        label,
        tilt: rng.gen_range(-MAX_TILT_DEG..=MAX_TILT_DEG).to_radians(),
        bow: if rng.gen_bool(0.5) { 1.0 } else { -1.0 },
    };

    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            let freq = rng.gen_range(0.05..0.25);
            let angle = rng.gen_range(0.0..std::f64::consts::PI);
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            let amp = rng.gen_range(0.02..0.06);
            (freq, angle, phase, amp)
        })
        .collect();

    // clutter stays outside the ROI square, with a stroke-width margin
    let mut distractors = Vec::with_capacity(cfg.distractors);
    let mut attempts = 0;
    while distractors.len() < cfg.distractors && attempts < 200 {
        attempts += 1;
        let len = rng.gen_range(3.0..7.0);
        let depth = if rng.gen_bool(0.5) {
            rng.gen_range(-0.3..0.3) * len
        } else {
            0.0
        };
        let tone = if rng.gen_bool(0.6) { STROKE_TONE } else { 0.7 };
        let d = Distractor {
            centre: (rng.gen_range(0.0..nf - 1.0), rng.gen_range(0.0..nf - 1.0)),
            tilt: rng.gen_range(0.0..std::f64::consts::PI),
            len,
            depth,
            tone,
        };
        let gap = radius + d.reach() + 1.0;
        if (d.centre.0 - centre.0).abs() > gap || (d.centre.1 - centre.1).abs() > gap {
            distractors.push(d);
        }
    }

    let mut data = vec![0.0; n * n];
    for r in 0..n {
        for c in 0..n {
            let (rf, cf) = (r as f64, c as f64);
            let mut px = 0.3;
            for &(freq, angle, phase, amp) in &waves {
                px += amp * (freq * (rf * angle.sin() + cf * angle.cos()) + phase).sin();
            }
            for d in &distractors {
                let (dr, dc) = (rf - d.centre.0, cf - d.centre.1);
                let (sin, cos) = d.tilt.sin_cos();
                let cov = stroke_coverage(
                    dc * cos + dr * sin,
                    -dc * sin + dr * cos,
                    d.len,
                    0.0,
                    d.depth,
                );
                blend(&mut px, d.tone, cov);
            }
            let (dr, dc) = (rf - centre.0, cf - centre.1);
            let disk = (radius - (dr * dr + dc * dc).sqrt() + 0.5).clamp(0.0, 1.0);
            blend(&mut px, DISK_TONE, disk);
            blend(
                &mut px,
                STROKE_TONE,
                glyph_coverage(&glyph, centre, radius, rf, cf),
            );
            data[r * n + c] = px;
        }
    }
    if cfg.noise > 0.0 {
        for px in data.iter_mut() {
            *px += rng.gen_range(-cfg.noise..=cfg.noise);
        }
    }
    data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));

    let scale = 2.0 / (nf - 1.0);
    let roi = BBoxParams::new(
        -1.0 + centre.0 * scale,
        -1.0 + centre.1 * scale,
        radius * scale,
    );
    (Tensor::new(vec![1, n, n], data).expect("square image"), roi)
}

/// Reads the glyph inside `roi` by matching against rendered templates over
/// every label, a fine tilt grid and both bow directions.
pub fn decode_glyph(image: &Tensor, roi: &BBoxParams) -> Label6 {
    let n = image.shape()[1];
    let w = image.shape()[2];
    let half = (n - 1) as f64 / 2.0;
    let centre = (
        (roi.t_r + 1.0) * half,
        (roi.t_c + 1.0) * ((w - 1) as f64 / 2.0),
    );
    let radius = roi.s * half;
    let inner = radius - 1.5;
    let mut pixels = Vec::new();
    let r0 = (centre.0 - inner).floor().max(0.0) as usize;
    let r1 = ((centre.0 + inner).ceil() as usize).min(n - 1);
    let c0 = (centre.1 - inner).floor().max(0.0) as usize;
    let c1 = ((centre.1 + inner).ceil() as usize).min(w - 1);
    for r in r0..=r1 {
        for c in c0..=c1 {
            let (dr, dc) = (r as f64 - centre.0, c as f64 - centre.1);
            if (dr * dr + dc * dc).sqrt() <= inner {
                pixels.push((r as f64, c as f64, image.data()[r * w + c]));
            }
        }
    }
    let sse = |glyph: &Glyph| -> f64 {
        pixels
            .iter()
            .map(|&(r, c, v)| {
                let mut t = DISK_TONE;
                blend(
                    &mut t,
                    STROKE_TONE,
                    glyph_coverage(glyph, centre, radius, r, c),
                );
                (t - v) * (t - v)
            })
            .sum()
    };
    let steps = (2.0 * MAX_TILT_DEG / 0.5).round() as usize;
    let mut best = (f64::INFINITY, Label6::N);
    for label in Label6::ALL {
        let tilts: Vec<f64> = if label.strokes() == 0 {
            vec![0.0]
        } else {
            (0..=steps)
                .map(|i| (-MAX_TILT_DEG + 0.5 * i as f64).to_radians())
                .collect()
        };
        let bows: &[f64] = if label.bowed() { &[1.0, -1.0] } else { &[1.0] };
        for &tilt in &tilts {
            for &bow in bows {
                let e = sse(&Glyph { label, tilt, bow });
                if e < best.0 {
                    best = (e, label);
                }
            }
        }
    }
    best.1
}

/// Generates a dataset with split tags assigned. No augmentation is applied.
pub fn generate(cfg: &GenConfig) -> Result<Dataset> {
    cfg.validate()?;
    let counts = cfg.counts()?;
    let mut labels: Vec<Label6> = Label6::ALL
        .iter()
        .zip(counts)
        .flat_map(|(&l, n)| std::iter::repeat_n(l, n))
        .collect();
    labels.shuffle(&mut rng_for(cfg.seed, STREAM_LABELS, 0));
    let samples = labels
        .into_iter()
        .enumerate()
        .map(|(index, label6)| {
            let sample_seed = derive_seed(cfg.seed, STREAM_SAMPLE, index as u64);
            let (image, roi) = render_sample(cfg, label6, sample_seed);
            LabeledSample {
                index,
                image,
                label6,
                roi,
                split: Split::Train,
                sample_seed,
                source_index: None,
            }
        })
        .collect();
    let mut ds = Dataset {
        config: cfg.clone(),
        samples,
    };
    split(&mut ds, cfg.ratios, cfg.seed)?;
    Ok(ds)
}

/// Zoom, rotation and translation applied jointly to an image and its ROI.
/// Output coordinates are `zoom·R·x + t` in normalized units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub zoom: f64,
    pub rotation_deg: f64,
    pub t_r: f64,
    pub t_c: f64,
}

pub const ZOOM_OUT: (f64, f64) = (0.4, 0.9);
pub const ZOOM_IN: (f64, f64) = (1.3, 1.9);
pub const ROTATION_DEG: (f64, f64) = (5.0, 15.0);
/// Translation bound per axis in normalized units: half the image extent.
pub const TRANSLATION: f64 = 1.0;
pub const MAX_AUGMENT_DRAWS: usize = 100;

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams {
        zoom: 1.0,
        rotation_deg: 0.0,
        t_r: 0.0,
        t_c: 0.0,
    };

    pub fn sample(rng: &mut impl Rng) -> Self {
        let zoom = if rng.gen_bool(0.5) {
            rng.gen_range(ZOOM_OUT.0..=ZOOM_OUT.1)
        } else {
            rng.gen_range(ZOOM_IN.0..=ZOOM_IN.1)
        };
        let mag = rng.gen_range(ROTATION_DEG.0..=ROTATION_DEG.1);
        let rotation_deg = if rng.gen_bool(0.5) { mag } else { -mag };
        AugmentParams {
            zoom,
            rotation_deg,
            t_r: rng.gen_range(-TRANSLATION..=TRANSLATION),
            t_c: rng.gen_range(-TRANSLATION..=TRANSLATION),
        }
    }

    /// Inverse map used by the sampler: source coordinate of each output cell.
    pub fn sampling_matrix(&self) -> [f64; 6] {
        let (sin, cos) = self.rotation_deg.to_radians().sin_cos();
        let k = 1.0 / self.zoom;
        // Rᵀ/z applied to (x - t)
        let (a, b, c, d) = (cos * k, sin * k, -sin * k, cos * k);
        [
            a,
            b,
            -(a * self.t_r + b * self.t_c),
            c,
            d,
            -(c * self.t_r + d * self.t_c),
        ]
    }

    pub fn map_roi(&self, roi: &BBoxParams) -> BBoxParams {
        let (sin, cos) = self.rotation_deg.to_radians().sin_cos();
        let z = self.zoom;
        BBoxParams::new(
            z * (cos * roi.t_r - sin * roi.t_c) + self.t_r,
            z * (sin * roi.t_r + cos * roi.t_c) + self.t_c,
            z * roi.s,
        )
    }
}

pub fn augment_with(sample: &LabeledSample, params: &AugmentParams) -> Result<LabeledSample> {
    let (h, w) = (sample.image.shape()[1], sample.image.shape()[2]);
    let grid = stn::grid_generate(&WarpParams::affine(params.sampling_matrix())?, h, w)?;
    let image = stn::bilinear_sample(&sample.image, &grid)?;
    Ok(LabeledSample {
        image,
        roi: params.map_roi(&sample.roi),
        ..sample.clone()
    })
}

/// Random augmentation whose ROI stays inside the image; after
/// [`MAX_AUGMENT_DRAWS`] rejected draws the sample is returned unchanged.
pub fn augment(sample: &LabeledSample, rng: &mut impl Rng) -> LabeledSample {
    for _ in 0..MAX_AUGMENT_DRAWS {
        let p = AugmentParams::sample(rng);
        if p.map_roi(&sample.roi).inside_image() {
            if let Ok(out) = augment_with(sample, &p) {
                return out;
            }
        }
    }
    sample.clone()
}

/// Adds augmented copies to the training split until every class of the
/// scenario matches the largest one. Validation and test are untouched.
pub fn balance_by_augmentation(ds: &Dataset, scenario: Scenario) -> Dataset {
    let mut out = ds.clone();
    let classes = scenario.classes();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, s) in ds.samples.iter().enumerate() {
        if s.split == Split::Train {
            if let Some(c) = scenario.class_of(s.label6) {
                members[c].push(i);
            }
        }
    }
    let target = members.iter().map(Vec::len).max().unwrap_or(0);
    let mut next = ds
        .samples
        .iter()
        .map(|s| s.index)
        .max()
        .map_or(0, |m| m + 1);
    for (c, idx) in members.iter().enumerate() {
        if idx.is_empty() {
            continue;
        }
        for j in 0..target - idx.len() {
            let src = &ds.samples[idx[j % idx.len()]];
            let seed = derive_seed(
                ds.config.seed,
                STREAM_BALANCE,
                ((c as u64) << 32) | j as u64,
            );
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut copy = augment(src, &mut rng);
            copy.index = next;
            copy.sample_seed = seed;
            copy.source_index = Some(src.source_index.unwrap_or(src.index));
            next += 1;
            out.samples.push(copy);
        }
    }
    out
}

/// Rounds the `classes × splits` quota table to integers so that every cell
/// is the floor or ceiling of its quota, rows keep the class sizes and
/// columns hit the largest-remainder split totals. The rounding is found as
/// a max flow over the cells with a fractional quota.
fn split_sizes(sizes: &[usize], ratios: [f64; 3]) -> Vec<[usize; 3]> {
    let total: usize = sizes.iter().sum();
    let column_target = largest_remainder(&ratios, total);
    let quota = |n: usize, r: f64| {
        let q = n as f64 * r;
        if (q - q.round()).abs() < 1e-9 {
            q.round()
        } else {
            q
        }
    };
    let mut cells: Vec<[usize; 3]> = Vec::with_capacity(sizes.len());
    let mut open: Vec<[bool; 3]> = Vec::with_capacity(sizes.len());
    for &n in sizes {
        let q = ratios.map(|r| quota(n, r));
        cells.push(q.map(|v| v.floor() as usize));
        open.push(q.map(|v| v.fract() > 0.0));
    }
    let mut row_need: Vec<usize> = sizes
        .iter()
        .zip(&cells)
        .map(|(&n, c)| n - c.iter().sum::<usize>())
        .collect();
    let mut col_need: Vec<usize> = (0..3)
        .map(|j| column_target[j].saturating_sub(cells.iter().map(|c| c[j]).sum()))
        .collect();
    // `used[i][j]`: cell (i, j) was rounded up
    let mut used = vec![[false; 3]; sizes.len()];
    fn augment(
        i: usize,
        open: &[[bool; 3]],
        used: &mut [[bool; 3]],
        col_need: &mut [usize],
        seen: &mut [bool],
    ) -> bool {
        for j in 0..3 {
            if !open[i][j] || used[i][j] || seen[j] {
                continue;
            }
            seen[j] = true;
            if col_need[j] > 0 {
                col_need[j] -= 1;
                used[i][j] = true;
                return true;
            }
            // take the unit of column j from another row that can move elsewhere
            for k in 0..used.len() {
                if used[k][j] {
                    used[k][j] = false;
                    if augment(k, open, used, col_need, seen) {
                        used[i][j] = true;
                        return true;
                    }
                    used[k][j] = true;
                }
            }
        }
        false
    }
    for i in 0..sizes.len() {
        while row_need[i] > 0 {
            let mut seen = [false; 3];
            if !augment(i, &open, &mut used, &mut col_need, &mut seen) {
                break;
            }
            row_need[i] -= 1;
        }
        // no feasible column left (cannot happen for consistent targets); keep rows exact
        while row_need[i] > 0 {
            let j = (0..3).find(|&j| open[i][j] && !used[i][j]).unwrap_or(2);
            cells[i][j] += 1;
            row_need[i] -= 1;
        }
    }
    for (c, u) in cells.iter_mut().zip(&used) {
        for j in 0..3 {
            c[j] += usize::from(u[j]);
        }
    }
    cells
}

/// Stratified split by subtype: every class is within one sample of its
/// share in each split, and the split totals match a largest-remainder
/// allocation of the whole set. Augmented copies follow their source.
pub fn split(ds: &mut Dataset, ratios: SplitRatios, seed: u64) -> Result<()> {
    ratios.validate()?;
    let mut by_class: BTreeMap<Label6, Vec<usize>> = BTreeMap::new();
    for (i, s) in ds.samples.iter().enumerate() {
        if s.source_index.is_none() {
            by_class.entry(s.label6).or_default().push(i);
        }
    }
    let sizes: Vec<usize> = by_class.values().map(Vec::len).collect();
    let alloc = split_sizes(&sizes, [ratios.test, ratios.val, ratios.train]);
    let mut assigned = BTreeMap::new();
    for (k, (label, idx)) in by_class.iter().enumerate() {
        let mut idx = idx.clone();
        idx.shuffle(&mut rng_for(seed, STREAM_SPLIT, *label as u64));
        let [n_test, n_val, _] = alloc[k];
        for (j, &i) in idx.iter().enumerate() {
            let s = if j < n_test {
                Split::Test
            } else if j < n_test + n_val {
                Split::Val
            } else {
                Split::Train
            };
            assigned.insert(ds.samples[i].index, s);
        }
    }
    for s in ds.samples.iter_mut() {
        let key = s.source_index.unwrap_or(s.index);
        s.split = *assigned.get(&key).ok_or_else(|| {
            Error::Usage(format!(
                "sample {} derives from unknown sample {key}",
                s.index
            ))
        })?;
    }
    Ok(())
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.config.image_size
    }

    pub fn split_samples(&self, split: Split) -> Vec<&LabeledSample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    /// Per-label counts over the original (non-augmented) samples.
    pub fn class_counts(&self) -> BTreeMap<String, usize> {
        let mut m: BTreeMap<String, usize> = Label6::ALL
            .iter()
            .map(|l| (l.name().to_string(), 0))
            .collect();
        for s in self.samples.iter().filter(|s| s.source_index.is_none()) {
            *m.get_mut(s.label6.name()).expect("known label") += 1;
        }
        m
    }

    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest {
            version: MANIFEST_VERSION,
            master_seed: self.config.seed,
            config: self.config.clone(),
            config_hash: self.config.hash(),
            class_counts: self.class_counts(),
            samples: self
                .samples
                .iter()
                .map(|s| SampleRecord {
                    path: image_path(s.index),
                    label6: s.label6,
                    label3: s.label6.label3(),
                    label2: s.label6.label2(),
                    roi: s.roi,
                    split: s.split,
                    sample_seed: s.sample_seed,
                    source_index: s.source_index,
                })
                .collect(),
        }
    }

    /// Writes `manifest.json` and one tensor file per image under `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let images = dir.join("images");
        fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
        for s in &self.samples {
            write_tensor_file(&s.image, dir.join(image_path(s.index)))?;
        }
        let path = dir.join(MANIFEST_FILE);
        let mut json = serde_json::to_string_pretty(&self.manifest())?;
        json.push('\n');
        fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Dataset> {
        let dir = dir.as_ref();
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.clone(),
            detail: e.to_string(),
        })?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::Format {
                path,
                detail: format!("unsupported manifest version {}", manifest.version),
            });
        }
        let mut samples = Vec::with_capacity(manifest.samples.len());
        for rec in manifest.samples {
            let file: PathBuf = dir.join(&rec.path);
            let image = read_tensor_file(&file)?;
            let index = rec
                .path
                .trim_start_matches("images/")
                .trim_end_matches(".wltn")
                .parse()
                .map_err(|_| Error::Format {
                    path: file.clone(),
                    detail: "image name is not a sample index".into(),
                })?;
            samples.push(LabeledSample {
                index,
                image,
                label6: rec.label6,
                roi: rec.roi,
                split: rec.split,
                sample_seed: rec.sample_seed,
                source_index: rec.source_index,
            });
        }
        Ok(Dataset {
            config: manifest.config,
            samples,
        })
    }
}

fn image_path(index: usize) -> String {
    format!("images/{index:06}.wltn")
}
