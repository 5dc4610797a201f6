//! Synthetic intake-photo benchmark.
//!
//! Each pill class gets a procedural appearance (shape, colors, imprint).
//! Confusable pairs share one appearance, differing only by a brightness
//! offset proportional to `noise_level`, and are attached to disjoint
//! diagnoses so that co-prescribed pills tell them apart. No prescription ever
//! contains both members of a confusable pair.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::embed::derive_seed;
use crate::error::{Error, Result};
use crate::rx::{Corpus, PillDictionary, PrescriptionRecord};

pub const CHANNELS: usize = 3;

/// 116 of 168 prescriptions go to training.
pub const TRAIN_FRACTION: f64 = 116.0 / 168.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub num_prescriptions: usize,
    pub images_per_prescription: usize,
    pub crop_size: usize,
    pub confusable_pairs: Vec<(usize, usize)>,
    pub noise_level: f64,
    pub seed: u64,
    /// Latent diagnosis groups; `None` derives `max(2, round(3N / 8))`.
    pub num_diagnoses: Option<usize>,
    pub min_pills: usize,
    pub max_pills: usize,
    pub train_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_classes: 76,
            num_prescriptions: 168,
            images_per_prescription: 5,
            crop_size: 64,
            confusable_pairs: (0..8).map(|k| (2 * k, 2 * k + 1)).collect(),
            noise_level: 0.5,
            seed: 0,
            num_diagnoses: None,
            min_pills: 2,
            max_pills: 6,
            train_fraction: TRAIN_FRACTION,
        }
    }
}

impl SynthConfig {
    /// Reduced benchmark: 16 classes, 4 confusable pairs, 60 prescriptions,
    /// 16-pixel crops.
    pub fn desk() -> Self {
        Self {
            num_classes: 16,
            num_prescriptions: 60,
            crop_size: 16,
            confusable_pairs: (0..4).map(|k| (2 * k, 2 * k + 1)).collect(),
            ..Self::default()
        }
    }

    pub fn diagnoses(&self) -> usize {
        self.num_diagnoses
            .unwrap_or_else(|| ((3 * self.num_classes + 4) / 8).max(2))
    }

    pub fn validate(&self) -> Result<()> {
        if self.crop_size < 8 {
            return Err(Error::Config(format!(
                "crop_size {} is below the minimum of 8",
                self.crop_size
            )));
        }
        if self.num_classes == 0 || self.images_per_prescription == 0 {
            return Err(Error::Config("num_classes and images_per_prescription must be positive".into()));
        }
        if self.num_prescriptions < 2 {
            return Err(Error::Config("need at least 2 prescriptions for a train/test split".into()));
        }
        if !(0.0..=1.0).contains(&self.noise_level) {
            return Err(Error::Config(format!("noise_level {} outside [0, 1]", self.noise_level)));
        }
        if self.min_pills == 0 || self.min_pills > self.max_pills {
            return Err(Error::Config("need 1 <= min_pills <= max_pills".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config("train_fraction must lie in (0, 1)".into()));
        }
        let mut used = BTreeSet::new();
        for &(a, b) in &self.confusable_pairs {
            if a == b || a >= self.num_classes || b >= self.num_classes {
                return Err(Error::Config(format!("invalid confusable pair ({a}, {b})")));
            }
            if !used.insert(a) || !used.insert(b) {
                return Err(Error::Config("confusable pairs must be disjoint".into()));
            }
        }
        if !self.confusable_pairs.is_empty() && self.diagnoses() < 2 {
            return Err(Error::Config("confusable pairs need at least 2 diagnoses".into()));
        }
        Ok(())
    }

    fn twin_of(&self) -> Vec<Option<usize>> {
        let mut twin = vec![None; self.num_classes];
        for &(a, b) in &self.confusable_pairs {
            twin[a] = Some(b);
            twin[b] = Some(a);
        }
        twin
    }
}

/// One intake photo: its pill crops (CHW, values in [0, 1]) and their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct IntakeSample {
    pub sample_id: String,
    pub prescription_id: String,
    pub crop_size: usize,
    pub crops: Vec<Vec<f32>>,
    pub labels: Vec<usize>,
}

const MAGIC: &[u8; 8] = b"PILLCROP";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct SampleHeader {
    sample_id: String,
    prescription_id: String,
    labels: Vec<usize>,
    crop_size: usize,
    channels: usize,
}

impl IntakeSample {
    pub fn num_crops(&self) -> usize {
        self.crops.len()
    }

    /// Binary container: `PILLCROP`, u32 version, u32 header length, JSON
    /// header, then `M * 3 * S * S` little-endian f32 values.
    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        let header = serde_json::to_vec(&SampleHeader {
            sample_id: self.sample_id.clone(),
            prescription_id: self.prescription_id.clone(),
            labels: self.labels.clone(),
            crop_size: self.crop_size,
            channels: CHANNELS,
        })?;
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(header.len() as u32).to_le_bytes())?;
        w.write_all(&header)?;
        for crop in &self.crops {
            for v in crop {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let bad = |m: &str| Error::Validation(format!("sample container: {m}"));
        let mut magic = [0u8; 8];
        let mut word = [0u8; 4];
        let io = |e| Error::io("<sample>", e);
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != MAGIC {
            return Err(bad("bad magic"));
        }
        r.read_exact(&mut word).map_err(io)?;
        if u32::from_le_bytes(word) != FORMAT_VERSION {
            return Err(bad("unsupported version"));
        }
        r.read_exact(&mut word).map_err(io)?;
        let mut header = vec![0u8; u32::from_le_bytes(word) as usize];
        r.read_exact(&mut header).map_err(io)?;
        let header: SampleHeader = serde_json::from_slice(&header)?;
        if header.channels != CHANNELS {
            return Err(bad("expected 3 channels"));
        }
        let per_crop = CHANNELS * header.crop_size * header.crop_size;
        let mut raw = Vec::new();
        r.read_to_end(&mut raw).map_err(io)?;
        if raw.len() != header.labels.len() * per_crop * 4 {
            return Err(bad("payload length does not match header"));
        }
        let values: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let crops = values.chunks(per_crop.max(1)).map(<[f32]>::to_vec).collect();
        Ok(Self {
            sample_id: header.sample_id,
            prescription_id: header.prescription_id,
            crop_size: header.crop_size,
            crops,
            labels: header.labels,
        })
    }
}

/// A corpus plus intake samples split by prescription.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub corpus: Corpus,
    pub train: Vec<IntakeSample>,
    pub test: Vec<IntakeSample>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Shape {
    Round,
    Oval,
    Capsule,
    Oblong,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Imprint {
    None,
    Line,
    Cross,
    Dot,
    Ring,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Appearance {
    shape: Shape,
    size: f32,
    body: [f32; 3],
    accent: [f32; 3],
    imprint: Imprint,
}

#[derive(Debug, Clone, Copy)]
struct Pose {
    dx: f32,
    dy: f32,
    gain: f32,
    background: f32,
}

const CANONICAL: Pose = Pose {
    dx: 0.0,
    dy: 0.0,
    gain: 1.0,
    background: 0.12,
};

fn hsv(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn appearance(visual_id: usize, hue_offset: f32) -> Appearance {
    const SHAPES: [Shape; 4] = [Shape::Round, Shape::Capsule, Shape::Oblong, Shape::Oval];
    const IMPRINTS: [Imprint; 5] = [Imprint::None, Imprint::Line, Imprint::Cross, Imprint::Dot, Imprint::Ring];
    let v = visual_id;
    let hue = hue_offset + v as f32 * 0.618_034;
    let sat = [0.85, 0.55, 0.95][(v / 4) % 3];
    let val = [0.95, 0.75][(v / 2) % 2];
    Appearance {
        shape: SHAPES[v % 4],
        size: 0.72 + 0.08 * ((v * 7) % 3) as f32,
        body: hsv(hue, sat, val),
        accent: hsv(hue + 0.5, 0.7, 0.9),
        imprint: IMPRINTS[(v / 3) % 5],
    }
}

fn scaled(c: [f32; 3], gain: f32) -> [f32; 3] {
    c.map(|x| (x * gain).min(1.0))
}

/// Per-class appearances; the second member of each confusable pair copies the
/// first, brightened by `8% * noise_level`.
fn class_appearances(cfg: &SynthConfig) -> Vec<Appearance> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0xa11, 0));
    let hue_offset: f32 = rng.random();
    let twin = cfg.twin_of();
    let mut visual = vec![usize::MAX; cfg.num_classes];
    let mut next = 0;
    for c in 0..cfg.num_classes {
        if let Some(t) = twin[c] {
            if t < c {
                visual[c] = visual[t];
                continue;
            }
        }
        visual[c] = next;
        next += 1;
    }
    (0..cfg.num_classes)
        .map(|c| {
            let base = appearance(visual[c], hue_offset);
            match twin[c] {
                Some(t) if t < c => {
                    let g = 1.0 + 0.08 * cfg.noise_level as f32;
                    Appearance {
                        body: scaled(base.body, g),
                        accent: scaled(base.accent, g),
                        ..base
                    }
                }
                _ => base,
            }
        })
        .collect()
}

fn signed_distance(shape: Shape, r: f32, x: f32, y: f32) -> f32 {
    match shape {
        Shape::Round => (x * x + y * y).sqrt() - r,
        Shape::Oval => {
            let (a, b) = (r, 0.68 * r);
            let k = ((x / a).powi(2) + (y / b).powi(2)).sqrt();
            (k - 1.0) * b
        }
        Shape::Capsule => {
            let half = 0.45 * r;
            let px = x.clamp(-half, half);
            ((x - px).powi(2) + y * y).sqrt() - 0.5 * r
        }
        Shape::Oblong => {
            let (hx, hy, rad) = (0.95 * r, 0.55 * r, 0.2 * r);
            let qx = x.abs() - hx + rad;
            let qy = y.abs() - hy + rad;
            let outside = (qx.max(0.0).powi(2) + qy.max(0.0).powi(2)).sqrt();
            outside + qx.max(qy).min(0.0) - rad
        }
    }
}

fn imprint_hit(imprint: Imprint, r: f32, x: f32, y: f32) -> bool {
    let line = |u: f32, v: f32| u.abs() < 0.07 && v.abs() < 0.6 * r;
    match imprint {
        Imprint::None => false,
        Imprint::Line => line(y, x),
        Imprint::Cross => line(y, x) || line(x, y),
        Imprint::Dot => (x * x + y * y).sqrt() < 0.2 * r,
        Imprint::Ring => ((x * x + y * y).sqrt() - 0.45 * r).abs() < 0.06,
    }
}

fn render(app: &Appearance, size: usize, pose: Pose) -> Vec<f32> {
    let mut out = vec![0.0f32; CHANNELS * size * size];
    let px = 2.0 / size as f32;
    let bg = [pose.background, pose.background, pose.background * 1.15];
    for row in 0..size {
        for col in 0..size {
            let x = (col as f32 + 0.5) * px - 1.0 - pose.dx;
            let y = (row as f32 + 0.5) * px - 1.0 - pose.dy;
            let d = signed_distance(app.shape, app.size, x, y);
            let alpha = (0.5 - d / px).clamp(0.0, 1.0);
            let mut color = if app.shape == Shape::Capsule && x < 0.0 {
                app.accent
            } else {
                app.body
            };
            if imprint_hit(app.imprint, app.size, x, y) {
                color = app.accent.map(|c| c * 0.45);
            }
            for ch in 0..CHANNELS {
                let pill = (color[ch] * pose.gain).min(1.0);
                out[ch * size * size + row * size + col] = bg[ch] * (1.0 - alpha) + pill * alpha;
            }
        }
    }
    out
}

/// Noise-free rendering of every class at its canonical pose.
pub fn class_prototypes(cfg: &SynthConfig) -> Vec<Vec<f32>> {
    class_appearances(cfg)
        .iter()
        .map(|a| render(a, cfg.crop_size, CANONICAL))
        .collect()
}

fn sample_crop(app: &Appearance, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let nl = cfg.noise_level as f32;
    if nl == 0.0 {
        return render(app, cfg.crop_size, CANONICAL);
    }
    let pose = Pose {
        dx: rng.random_range(-1.0..1.0) * 0.1 * nl,
        dy: rng.random_range(-1.0..1.0) * 0.1 * nl,
        gain: 1.0 + rng.random_range(-1.0..1.0) * 0.25 * nl,
        background: 0.12 + rng.random_range(-1.0..1.0) * 0.08 * nl,
    };
    let mut img = render(app, cfg.crop_size, pose);
    let noise = Normal::new(0.0f32, 0.06 * nl).expect("valid std");
    for v in &mut img {
        *v = (*v + noise.sample(rng)).clamp(0.0, 1.0);
    }
    img
}

/// Normalized RMSE between two images with values in [0, 1].
pub fn rmse(a: &[f32], b: &[f32]) -> f64 {
    let sum: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| {
            let d = (*x - *y) as f64;
            d * d
        })
        .sum();
    (sum / a.len() as f64).sqrt()
}

struct Prescription {
    diagnoses: BTreeSet<usize>,
    pills: BTreeSet<usize>,
}

/// Pairs up diagnoses as comorbidities; two-diagnosis prescriptions only
/// combine partners. With an odd count the leftover diagnosis has none.
fn comorbid_partners(nd: usize, rng: &mut ChaCha8Rng) -> Vec<Option<usize>> {
    let mut order: Vec<usize> = (0..nd).collect();
    order.shuffle(rng);
    let mut partner = vec![None; nd];
    for pair in order.chunks_exact(2) {
        partner[pair[0]] = Some(pair[1]);
        partner[pair[1]] = Some(pair[0]);
    }
    partner
}

fn assign_diagnoses(cfg: &SynthConfig, partner: &[Option<usize>], rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let nd = cfg.diagnoses();
    let twin = cfg.twin_of();
    let mut pools: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); nd];
    for &(a, b) in &cfg.confusable_pairs {
        let da = rng.random_range(0..nd);
        // Keep the twin away from `da` and, when possible, from its comorbid
        // partner so the two neighborhoods do not overlap.
        let mut far: Vec<usize> = (0..nd).filter(|&d| d != da && partner[da] != Some(d)).collect();
        if far.is_empty() {
            far = (0..nd).filter(|&d| d != da).collect();
        }
        let db = *far.choose(rng).expect("at least two diagnoses");
        pools[da].insert(a);
        pools[db].insert(b);
    }
    let mut others: Vec<usize> = (0..cfg.num_classes).filter(|&c| twin[c].is_none()).collect();
    others.shuffle(rng);
    let mut order: Vec<usize> = (0..nd).collect();
    order.shuffle(rng);
    for (k, &c) in others.iter().enumerate() {
        let primary = order[k % nd];
        pools[primary].insert(c);
        if nd > 1 && rng.random_bool(0.3) {
            let mut second = rng.random_range(0..nd - 1);
            if second >= primary {
                second += 1;
            }
            pools[second].insert(c);
        }
    }
    for d in 0..nd {
        while pools[d].len() < 2 && others.iter().any(|c| !pools[d].contains(c)) {
            let c = *others.choose(rng).expect("non-empty");
            pools[d].insert(c);
        }
    }
    pools.into_iter().map(|p| p.into_iter().collect()).collect()
}

fn sample_prescriptions(
    cfg: &SynthConfig,
    pools: &[Vec<usize>],
    partner: &[Option<usize>],
    rng: &mut ChaCha8Rng,
) -> Vec<Prescription> {
    let nd = pools.len();
    let twin = cfg.twin_of();
    let usable: Vec<usize> = (0..nd).filter(|&d| !pools[d].is_empty()).collect();
    (0..cfg.num_prescriptions)
        .map(|_| {
            let primary = *usable.choose(rng).expect("some diagnosis has pills");
            let mut diagnoses = BTreeSet::from([primary]);
            if let Some(p) = partner[primary].filter(|&p| !pools[p].is_empty()) {
                if rng.random_bool(0.3) {
                    diagnoses.insert(p);
                }
            }
            let pool: Vec<usize> = diagnoses
                .iter()
                .flat_map(|&d| pools[d].iter().copied())
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect();
            let m = rng.random_range(cfg.min_pills..=cfg.max_pills).min(pool.len());
            let mut pills: BTreeSet<usize> = pool.choose_multiple(rng, m).copied().collect();
            for &(a, b) in &cfg.confusable_pairs {
                if pills.contains(&a) && pills.contains(&b) {
                    pills.remove(if rng.random_bool(0.5) { &a } else { &b });
                }
            }
            debug_assert!(pills.iter().all(|&p| twin[p].is_none_or(|t| !pills.contains(&t))));
            Prescription { diagnoses, pills }
        })
        .collect()
}

/// Adds every class missing from a split to one of that split's
/// prescriptions, preferring prescriptions that share a diagnosis with it.
fn cover_classes(
    cfg: &SynthConfig,
    class_diags: &[Vec<usize>],
    rx: &mut [Prescription],
    split: &[usize],
    rng: &mut ChaCha8Rng,
) {
    let twin = cfg.twin_of();
    let mut counts = vec![0usize; cfg.num_classes];
    for &r in split {
        for &p in &rx[r].pills {
            counts[p] += 1;
        }
    }
    for c in 0..cfg.num_classes {
        if counts[c] > 0 {
            continue;
        }
        let candidates: Vec<usize> = split
            .iter()
            .copied()
            .filter(|&r| twin[c].is_none_or(|t| !rx[r].pills.contains(&t)))
            .collect();
        let preferred: Vec<usize> = candidates
            .iter()
            .copied()
            .filter(|&r| class_diags[c].iter().any(|d| rx[r].diagnoses.contains(d)))
            .collect();
        let Some(&r) = preferred.choose(rng).or_else(|| candidates.choose(rng)) else {
            continue;
        };
        let target = &mut rx[r];
        if !class_diags[c].iter().any(|d| target.diagnoses.contains(d)) {
            if let Some(&d) = class_diags[c].first() {
                target.diagnoses.insert(d);
            }
        }
        if target.pills.len() >= cfg.max_pills {
            let spare: Vec<usize> = target.pills.iter().copied().filter(|&p| counts[p] > 1).collect();
            if let Some(&p) = spare.choose(rng) {
                target.pills.remove(&p);
                counts[p] -= 1;
            }
        }
        target.pills.insert(c);
        counts[c] += 1;
    }
}

fn width(n: usize) -> usize {
    n.saturating_sub(1).to_string().len().max(2)
}

pub fn class_name(c: usize, num_classes: usize) -> String {
    format!("pill-{c:0w$}", w = width(num_classes))
}

/// Generates a corpus and train/test intake samples, split by prescription.
pub fn generate_dataset(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0xda7a, 0));
    let partner = comorbid_partners(cfg.diagnoses(), &mut rng);
    let pools = assign_diagnoses(cfg, &partner, &mut rng);
    let mut class_diags = vec![Vec::new(); cfg.num_classes];
    for (d, pool) in pools.iter().enumerate() {
        for &c in pool {
            class_diags[c].push(d);
        }
    }
    let mut rx = sample_prescriptions(cfg, &pools, &partner, &mut rng);

    let n = cfg.num_prescriptions;
    let n_train = ((n as f64 * cfg.train_fraction).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let (train_rx, test_rx) = order.split_at(n_train);
    let (mut train_rx, mut test_rx) = (train_rx.to_vec(), test_rx.to_vec());
    train_rx.sort_unstable();
    test_rx.sort_unstable();
    cover_classes(cfg, &class_diags, &mut rx, &train_rx, &mut rng);
    cover_classes(cfg, &class_diags, &mut rx, &test_rx, &mut rng);

    let nd = cfg.diagnoses();
    let diag_name = |d: usize| format!("DX-{d:0w$}", w = width(nd));
    let rx_name = |r: usize| format!("RX-{r:0w$}", w = width(n).max(4));
    let names: Vec<String> = (0..cfg.num_classes).map(|c| class_name(c, cfg.num_classes)).collect();
    let records: Vec<PrescriptionRecord> = rx
        .iter()
        .enumerate()
        .map(|(r, p)| PrescriptionRecord {
            id: rx_name(r),
            diagnoses: p.diagnoses.iter().map(|&d| diag_name(d)).collect(),
            pills: p.pills.iter().map(|&c| names[c].clone()).collect(),
        })
        .collect();
    let corpus = Corpus::with_dictionary(records, PillDictionary::new(names)?)?;

    let appearances = class_appearances(cfg);
    let make_samples = |split: &[usize]| -> Vec<IntakeSample> {
        let mut out = Vec::new();
        for &r in split {
            let pills: Vec<usize> = rx[r].pills.iter().copied().collect();
            for img in 0..cfg.images_per_prescription {
                let mut srng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, r as u64 + 1, img as u64));
                let mut labels: Vec<usize> = pills
                    .iter()
                    .enumerate()
                    .filter(|&(k, _)| k % cfg.images_per_prescription == img || srng.random_bool(0.85))
                    .map(|(_, &p)| p)
                    .collect();
                let want = pills.len().min(2);
                while labels.len() < want {
                    let missing: Vec<usize> = pills.iter().copied().filter(|p| !labels.contains(p)).collect();
                    labels.push(*missing.choose(&mut srng).expect("pills remain"));
                }
                if srng.random_bool(0.15) {
                    let dup = *labels.choose(&mut srng).expect("non-empty");
                    labels.push(dup);
                }
                labels.shuffle(&mut srng);
                let crops = labels
                    .iter()
                    .map(|&c| sample_crop(&appearances[c], cfg, &mut srng))
                    .collect();
                out.push(IntakeSample {
                    sample_id: format!("{}-img{img}", rx_name(r)),
                    prescription_id: rx_name(r),
                    crop_size: cfg.crop_size,
                    crops,
                    labels,
                });
            }
        }
        out
    };
    let train = make_samples(&train_rx);
    let test = make_samples(&test_rx);
    Ok(Dataset { corpus, train, test })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CooccurrenceCount {
    pub a: usize,
    pub b: usize,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetReport {
    pub samples: usize,
    pub crops: usize,
    /// class -> number of crops
    pub class_counts: BTreeMap<usize, usize>,
    /// Samples in which both classes appear, for each unordered pair `a < b`.
    pub cooccurrence: Vec<CooccurrenceCount>,
}

pub fn dataset_report(samples: &[IntakeSample]) -> Result<DatasetReport> {
    if samples.is_empty() {
        return Err(Error::Domain("cannot report on an empty sample set".into()));
    }
    let mut class_counts = BTreeMap::new();
    let mut pairs: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for s in samples {
        for &l in &s.labels {
            *class_counts.entry(l).or_insert(0) += 1;
        }
        let present: Vec<usize> = s.labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
        for (k, &a) in present.iter().enumerate() {
            for &b in &present[k + 1..] {
                *pairs.entry((a, b)).or_insert(0) += 1;
            }
        }
    }
    Ok(DatasetReport {
        samples: samples.len(),
        crops: samples.iter().map(IntakeSample::num_crops).sum(),
        class_counts,
        cooccurrence: pairs
            .into_iter()
            .map(|((a, b), count)| CooccurrenceCount { a, b, count })
            .collect(),
    })
}

pub const CORPUS_FILE: &str = "corpus.json";
pub const DICTIONARY_FILE: &str = "dictionary.json";

/// Writes `corpus.json`, `dictionary.json` and `samples/{train,test}/*.bin`.
pub fn write_dataset(dir: impl AsRef<Path>, data: &Dataset) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    data.corpus.save(dir.join(CORPUS_FILE))?;
    data.corpus.dictionary().save(dir.join(DICTIONARY_FILE))?;
    for (split, samples) in [("train", &data.train), ("test", &data.test)] {
        let sub = dir.join("samples").join(split);
        fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        for s in samples {
            let path = sub.join(format!("{}.bin", s.sample_id));
            let mut buf = Vec::new();
            s.write_to(&mut buf).map_err(|e| Error::io(&path, e))?;
            fs::write(&path, buf).map_err(|e| Error::io(&path, e))?;
        }
    }
    Ok(())
}

fn read_split(dir: &Path) -> Result<Vec<IntakeSample>> {
    let mut paths: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "bin"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let mut f = fs::File::open(p).map_err(|e| Error::io(p, e))?;
            IntakeSample::read_from(&mut f)
        })
        .collect()
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let corpus = crate::rx::load_corpus_with_dictionary(dir.join(CORPUS_FILE), dir.join(DICTIONARY_FILE))?;
    let train = read_split(&dir.join("samples").join("train"))?;
    let test = read_split(&dir.join("samples").join("test"))?;
    let n = corpus.num_classes();
    if let Some(bad) = train.iter().chain(&test).flat_map(|s| &s.labels).find(|&&l| l >= n) {
        return Err(Error::Validation(format!("sample label {bad} outside the {n}-class dictionary")));
    }
    Ok(Dataset { corpus, train, test })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn small(noise: f64, pairs: Vec<(usize, usize)>) -> SynthConfig {
        SynthConfig {
            num_classes: 4,
            num_prescriptions: 10,
            crop_size: 16,
            confusable_pairs: pairs,
            noise_level: noise,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn confusable_prototypes_are_close() {
        for seed in 0..5 {
            let cfg = SynthConfig { seed, ..small(0.5, vec![(0, 1)]) };
            let protos = class_prototypes(&cfg);
            assert!(rmse(&protos[0], &protos[1]) < 0.05);
            assert!(rmse(&protos[0], &protos[2]) > 0.3, "seed {seed}: {}", rmse(&protos[0], &protos[2]));
        }
    }

    #[test]
    fn zero_noise_crops_equal_prototypes() {
        let cfg = small(0.0, vec![]);
        let protos = class_prototypes(&cfg);
        let data = generate_dataset(&cfg).unwrap();
        for s in data.train.iter().chain(&data.test) {
            for (crop, &l) in s.crops.iter().zip(&s.labels) {
                assert_eq!(crop, &protos[l]);
            }
        }
    }

    #[test]
    fn full_scale_defaults() {
        let cfg = SynthConfig { crop_size: 8, ..SynthConfig::default() };
        let data = generate_dataset(&cfg).unwrap();
        let stats = crate::rx::corpus_stats(&data.corpus);
        assert_eq!((stats.records, stats.classes), (168, 76));
        let train_rx: HashSet<_> = data.train.iter().map(|s| &s.prescription_id).collect();
        let test_rx: HashSet<_> = data.test.iter().map(|s| &s.prescription_id).collect();
        assert_eq!((train_rx.len(), test_rx.len()), (116, 52));
        assert!(train_rx.is_disjoint(&test_rx));
        let report = dataset_report(&data.train).unwrap();
        assert_eq!(report.class_counts.len(), 76);
    }

    #[test]
    fn split_hygiene_and_label_subsets() {
        let data = generate_dataset(&SynthConfig::desk()).unwrap();
        let by_id: BTreeMap<_, _> = data.corpus.records().iter().map(|r| (r.id.clone(), r)).collect();
        let train_rx: HashSet<_> = data.train.iter().map(|s| s.prescription_id.clone()).collect();
        for s in &data.test {
            assert!(!train_rx.contains(&s.prescription_id));
        }
        for s in data.train.iter().chain(&data.test) {
            assert!(!s.labels.is_empty());
            assert_eq!(s.labels.len(), s.crops.len());
            let rec = by_id[&s.prescription_id];
            let allowed = data.corpus.pill_indices(rec);
            assert!(s.labels.iter().all(|l| allowed.contains(l)));
        }
        for rec in data.corpus.records() {
            let pills = data.corpus.pill_indices(rec);
            for &(a, b) in &SynthConfig::desk().confusable_pairs {
                assert!(!(pills.contains(&a) && pills.contains(&b)));
            }
        }
        for split in [&data.train, &data.test] {
            let seen: HashSet<usize> = split.iter().flat_map(|s| s.labels.iter().copied()).collect();
            assert_eq!(seen.len(), 16);
        }
    }

    #[test]
    fn deterministic_from_seed() {
        let cfg = SynthConfig { seed: 7, ..SynthConfig::desk() };
        let a = generate_dataset(&cfg).unwrap();
        let b = generate_dataset(&cfg).unwrap();
        assert_eq!(a.corpus, b.corpus);
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
        let c = generate_dataset(&SynthConfig { seed: 8, ..cfg }).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn config_errors() {
        assert!(matches!(
            generate_dataset(&SynthConfig { crop_size: 7, ..SynthConfig::desk() }),
            Err(Error::Config(_))
        ));
        let overlapping = SynthConfig { confusable_pairs: vec![(0, 1), (1, 2)], ..SynthConfig::desk() };
        assert!(overlapping.validate().is_err());
    }

    #[test]
    fn report_counts() {
        let s = IntakeSample {
            sample_id: "s".into(),
            prescription_id: "r".into(),
            crop_size: 8,
            crops: vec![vec![0.0; 192]; 3],
            labels: vec![2, 2, 5],
        };
        let r = dataset_report(std::slice::from_ref(&s)).unwrap();
        assert_eq!(r.class_counts[&2], 2);
        assert_eq!(r.class_counts[&5], 1);
        assert_eq!(r.cooccurrence, vec![CooccurrenceCount { a: 2, b: 5, count: 1 }]);
        assert!(dataset_report(&[]).is_err());
    }

    /// Exhaustive check on a 4-class instance at zero noise: appearance alone
    /// cannot separate the confusable pair, appearance plus the prescription's
    /// pill set always can.
    #[test]
    fn context_separability_oracle() {
        let cfg = SynthConfig { num_prescriptions: 40, ..small(0.0, vec![(0, 1)]) };
        let data = generate_dataset(&cfg).unwrap();
        let protos = class_prototypes(&cfg);
        let by_id: BTreeMap<_, _> = data.corpus.records().iter().map(|r| (r.id.clone(), r)).collect();
        let matching = |crop: &Vec<f32>| -> Vec<usize> { (0..4).filter(|&c| &protos[c] == crop).collect() };

        let crops: Vec<(&Vec<f32>, usize, &str)> = data
            .test
            .iter()
            .flat_map(|s| s.crops.iter().zip(&s.labels).map(move |(c, &l)| (c, l, s.prescription_id.as_str())))
            .collect();

        // Visual-only Bayes rule: most frequent class among look-alikes.
        let mut freq = [0usize; 4];
        crops.iter().for_each(|&(_, l, _)| freq[l] += 1);
        let visual_correct = crops
            .iter()
            .filter(|&&(c, l, _)| {
                let cands = matching(c);
                let best = *cands.iter().max_by_key(|&&k| (freq[k], std::cmp::Reverse(k))).unwrap();
                best == l
            })
            .count();
        let confusable = crops.iter().filter(|&&(_, l, _)| l < 2).count();
        let minority = freq[0].min(freq[1]);
        assert_eq!(visual_correct, crops.len() - minority);
        assert!(confusable > 0 && minority > 0);

        // Visual + prescription context: the candidate set is always a singleton.
        for &(c, l, rx) in &crops {
            let pills = data.corpus.pill_indices(by_id[rx]);
            let cands: Vec<usize> = matching(c).into_iter().filter(|k| pills.contains(k)).collect();
            assert_eq!(cands, vec![l]);
        }
    }

    #[test]
    fn container_roundtrip() {
        let data = generate_dataset(&SynthConfig { num_prescriptions: 6, ..small(0.3, vec![(0, 1)]) }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &data).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.corpus, data.corpus);
        let mut train = data.train.clone();
        train.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
        assert_eq!(back.train, train);
    }
}
