//! Synthetic snapshot-mosaic scenes, dataset directories and stratified folds.
//!
//! A scene is a label map of axis-aligned rectangles over a background on
//! the band-plane grid. Every class has a reflectance signature; a pixel's
//! spectrum is `illumination * signature + noise`. The generator runs the
//! preprocessing chain backwards: bands are sampled at their physical tile
//! offsets, laid out as a mosaic, and turned into sensor counts through the
//! dark and flat fields.

use std::collections::BTreeMap;
use std::f32::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::{self, LabelPlane};
use crate::error::{Error, Result};
use crate::netgraph::LabeledCube;
use crate::preprocess::{
    compute_clip_thresholds, CalibrationPair, ChannelStats, FloatFrame, PreprocessConfig, Preprocessor, RawFrame,
    TILE, TILE_BANDS,
};
use crate::tensor::{Layout, Tensor};

pub const DEFAULT_CLASS_NAMES: [&str; 5] = ["road", "marks", "vegetation", "sky", "others"];

fn d_classes() -> usize {
    5
}
fn d_margin() -> f32 {
    0.2
}
fn d_rects() -> [usize; 2] {
    [2, 6]
}
fn d_illumination() -> [f32; 2] {
    [0.5, 1.5]
}
fn d_sigma() -> f32 {
    0.005
}
fn d_dark() -> f32 {
    64.0
}
fn d_gain() -> f32 {
    900.0
}
fn d_frame() -> [usize; 2] {
    [1088, 2048]
}

/// Scene generator parameters. `preprocess.band_alignment` doubles as the
/// misalignment switch: when set, every band is sampled at its physical
/// tile offset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    #[serde(default = "d_classes")]
    pub classes: usize,
    /// `classes x 25` reflectances in `[0, 1]`; empty means "derive from seed".
    #[serde(default)]
    pub signatures: Vec<Vec<f32>>,
    /// Minimum pairwise L2 distance between signatures.
    #[serde(default = "d_margin")]
    pub signature_margin: f32,
    /// Inclusive range of foreground rectangles per image.
    #[serde(default = "d_rects")]
    pub rects: [usize; 2],
    /// Multiplicative illumination range, one draw per image.
    #[serde(default = "d_illumination")]
    pub illumination: [f32; 2],
    /// Per-sample reflectance noise.
    #[serde(default = "d_sigma")]
    pub noise_sigma: f32,
    /// Sensor counts of the dark field (mean).
    #[serde(default = "d_dark")]
    pub dark_level: f32,
    /// Counts between dark and flat field (mean).
    #[serde(default = "d_gain")]
    pub flat_gain: f32,
    /// Raw frame size; the active area sits at `preprocess.crop_origin`.
    #[serde(default = "d_frame")]
    pub frame: [usize; 2],
    /// Make the truth cube exactly what the sensor can represent, so a
    /// noiseless aligned scene is recovered bit for bit.
    #[serde(default)]
    pub snap_to_sensor: bool,
    #[serde(default)]
    pub preprocess: PreprocessConfig,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            classes: d_classes(),
            signatures: Vec::new(),
            signature_margin: d_margin(),
            rects: d_rects(),
            illumination: d_illumination(),
            noise_sigma: d_sigma(),
            dark_level: d_dark(),
            flat_gain: d_gain(),
            frame: d_frame(),
            snap_to_sensor: false,
            preprocess: PreprocessConfig::default(),
        }
    }
}

impl SceneSpec {
    /// Small scenes for the CPU benchmark: a 20x36 band plane cropped to
    /// 16x32 for a depth-3 network, inside a 104x184 raw frame.
    pub fn desk() -> Self {
        Self {
            frame: [104, 184],
            preprocess: PreprocessConfig {
                crop_origin: [2, 2],
                cube_size: [20, 36],
                depth: 3,
                ..PreprocessConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        self.preprocess.validate()?;
        if !(2..=255).contains(&self.classes) {
            return bad(format!("class count {} outside 2..=255", self.classes));
        }
        if self.rects[0] > self.rects[1] {
            return bad(format!("rectangle range {:?} is empty", self.rects));
        }
        let [lo, hi] = self.illumination;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return bad(format!("illumination range {:?} invalid", self.illumination));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise sigma {} invalid", self.noise_sigma));
        }
        let full = ((1u32 << self.preprocess.bit_depth) - 1) as f32;
        if !(self.dark_level >= 0.0 && self.flat_gain > 1.0 && self.dark_level * 1.1 + self.flat_gain <= full) {
            return bad(format!(
                "dark {} + gain {} does not fit {} bits",
                self.dark_level, self.flat_gain, self.preprocess.bit_depth
            ));
        }
        let (ah, aw) = self.preprocess.active_size();
        let [top, left] = self.preprocess.crop_origin;
        if top + ah > self.frame[0] || left + aw > self.frame[1] {
            return bad(format!("active area {ah}x{aw} at ({top},{left}) exceeds frame {:?}", self.frame));
        }
        if self.snap_to_sensor && self.preprocess.band_alignment {
            return bad("snap_to_sensor requires band_alignment = false".into());
        }
        if !self.signatures.is_empty() {
            check_signatures(&self.signatures, self.classes, self.signature_margin)?;
        }
        Ok(())
    }

    /// The configured signatures, or a seed-derived set.
    pub fn resolve_signatures(&self, seed: u64) -> Result<Vec<Vec<f32>>> {
        if !self.signatures.is_empty() {
            check_signatures(&self.signatures, self.classes, self.signature_margin)?;
            return Ok(self.signatures.clone());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(u64::MAX);
        for _ in 0..1000 {
            let sigs: Vec<Vec<f32>> = (0..self.classes).map(|_| random_signature(&mut rng)).collect();
            if check_signatures(&sigs, self.classes, self.signature_margin).is_ok() {
                return Ok(sigs);
            }
        }
        Err(Error::InvalidArgument(format!(
            "no {} signatures with margin {} found",
            self.classes, self.signature_margin
        )))
    }

    /// Dark and flat fields over the whole raw frame: smooth, low-frequency
    /// offset and gain variations.
    pub fn calibration(&self) -> Result<CalibrationPair> {
        let [h, w] = self.frame;
        let mut dark = Vec::with_capacity(h * w);
        let mut flat = Vec::with_capacity(h * w);
        for y in 0..h {
            let fy = y as f32 / h as f32;
            for x in 0..w {
                let fx = x as f32 / w as f32;
                let d = self.dark_level * (1.0 + 0.1 * (2.0 * PI * fy).sin() * (2.0 * PI * fx).cos());
                dark.push(d);
                flat.push(d + self.flat_gain * (0.9 + 0.1 * (2.0 * PI * (fx + fy)).cos()));
            }
        }
        CalibrationPair::new(FloatFrame::new(h, w, dark)?, FloatFrame::new(h, w, flat)?)
    }
}

/// Smooth spectrum: a base level plus two Gaussian bumps.
fn random_signature(rng: &mut ChaCha8Rng) -> Vec<f32> {
    let base = rng.random_range(0.05f32..0.25);
    let bumps: Vec<(f32, f32, f32)> = (0..2)
        .map(|_| {
            (
                rng.random_range(0.0f32..TILE_BANDS as f32),
                rng.random_range(2.0f32..5.0),
                rng.random_range(-0.1f32..0.35),
            )
        })
        .collect();
    (0..TILE_BANDS)
        .map(|b| {
            let v = bumps.iter().fold(base, |acc, &(c, s, a)| {
                let t = (b as f32 - c) / s;
                acc + a * (-0.5 * t * t).exp()
            });
            v.clamp(0.02, 0.6)
        })
        .collect()
}

fn check_signatures(sigs: &[Vec<f32>], classes: usize, margin: f32) -> Result<()> {
    if sigs.len() != classes || sigs.iter().any(|s| s.len() != TILE_BANDS) {
        return Err(Error::Dimension(format!("signatures must be {classes}x{TILE_BANDS}")));
    }
    if sigs.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::InvalidArgument("signature values outside [0, 1]".into()));
    }
    for a in 0..classes {
        for b in a + 1..classes {
            let d = sigs[a].iter().zip(&sigs[b]).map(|(x, y)| (x - y) * (x - y)).sum::<f32>().sqrt();
            if d < margin {
                return Err(Error::InvalidArgument(format!(
                    "signatures {a} and {b} are {d:.4} apart, margin {margin}"
                )));
            }
        }
    }
    Ok(())
}

/// Rectangle covering band-plane rows `top..bottom` and columns `left..right`.
#[derive(Debug, Clone, Copy)]
struct Rect {
    top: usize,
    left: usize,
    bottom: usize,
    right: usize,
    class: u8,
}

struct Scene {
    background: u8,
    rects: Vec<Rect>,
}

impl Scene {
    fn random(rng: &mut ChaCha8Rng, spec: &SceneSpec) -> Self {
        let [h, w] = spec.preprocess.cube_size;
        let classes = spec.classes as u8;
        let n = rng.random_range(spec.rects[0]..=spec.rects[1]);
        let rects = (0..n)
            .map(|_| {
                let rh = rng.random_range((h / 8).max(1)..=(h / 2).max(1));
                let rw = rng.random_range((w / 8).max(1)..=(w / 2).max(1));
                let top = rng.random_range(0..=h - rh);
                let left = rng.random_range(0..=w - rw);
                Rect {
                    top,
                    left,
                    bottom: top + rh,
                    right: left + rw,
                    class: rng.random_range(0..classes),
                }
            })
            .collect();
        Self {
            background: rng.random_range(0..classes),
            rects,
        }
    }

    /// Class at a continuous band-plane position; pixel centres sit on
    /// integer coordinates and rectangles own `[top - 0.5, bottom - 0.5)`.
    fn class_at(&self, y: f32, x: f32) -> u8 {
        self.rects
            .iter()
            .rev()
            .find(|r| {
                y >= r.top as f32 - 0.5 && y < r.bottom as f32 - 0.5 && x >= r.left as f32 - 0.5 && x < r.right as f32 - 0.5
            })
            .map_or(self.background, |r| r.class)
    }
}

/// One generated or loaded frame. `labels` and `truth` are in the
/// coordinates of the network-ready cube (after the final crop).
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub raw: RawFrame,
    pub labels: LabelPlane,
    /// Noiseless aligned reflectance cube (BIP, before per-pixel normalization).
    pub truth: Option<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub classes: usize,
    pub class_names: Vec<String>,
    pub preprocess: PreprocessConfig,
    pub calib: CalibrationPair,
    pub samples: Vec<LabeledSample>,
}

fn class_names(classes: usize) -> Vec<String> {
    (0..classes)
        .map(|k| DEFAULT_CLASS_NAMES.get(k).map_or_else(|| format!("class{k}"), |s| s.to_string()))
        .collect()
}

/// `count` samples, deterministic in `seed`; sample `i` draws from its own
/// random stream so generation order does not matter.
pub fn generate(spec: &SceneSpec, seed: u64, count: usize) -> Result<Dataset> {
    spec.validate()?;
    let sigs = spec.resolve_signatures(seed)?;
    let calib = spec.calibration()?;
    let samples = (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            generate_one(spec, &sigs, &calib, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        classes: spec.classes,
        class_names: class_names(spec.classes),
        preprocess: spec.preprocess.clone(),
        calib,
        samples,
    })
}

fn generate_one(spec: &SceneSpec, sigs: &[Vec<f32>], calib: &CalibrationPair, rng: &mut ChaCha8Rng) -> Result<LabeledSample> {
    let cfg = &spec.preprocess;
    let [h, w] = cfg.cube_size;
    let [top, left] = cfg.crop_origin;
    let [fh, fw] = spec.frame;
    let geom = cfg.geometry();
    let scene = Scene::random(rng, spec);
    let illum = rng.random_range(spec.illumination[0]..=spec.illumination[1]);
    let noise = (spec.noise_sigma > 0.0)
        .then(|| Normal::new(0.0f32, spec.noise_sigma).map_err(|e| Error::InvalidArgument(e.to_string())))
        .transpose()?;
    let full = ((1u32 << cfg.bit_depth) - 1) as f32;
    let sensor = |v: f32, y: usize, x: usize| -> u16 {
        let (d, f) = (calib.dark.data[y * fw + x], calib.flat.data[y * fw + x]);
        (d + v * (f - d)).round().clamp(0.0, full) as u16
    };

    let mut raw: Vec<u16> = calib.dark.data.iter().map(|&d| d.round().clamp(0.0, full) as u16).collect();
    debug_assert_eq!(raw.len(), fh * fw);
    let mut truth = vec![0.0f32; h * w * TILE_BANDS];
    let mut labels = vec![0u8; h * w];
    for r in 0..h {
        for c in 0..w {
            let k = scene.class_at(r as f32, c as f32);
            labels[r * w + c] = k;
            for b in 0..TILE_BANDS {
                let (dy, dx) = geom.shift(b);
                // Band b sees the scene displaced by its tile offset.
                let clean = illum * sigs[scene.class_at(r as f32 - dy, c as f32 - dx) as usize][b];
                let v = clean + noise.map_or(0.0, |n| n.sample(&mut *rng));
                let (y, x) = (top + TILE * r + b / TILE, left + TILE * c + b % TILE);
                raw[y * fw + x] = sensor(v, y, x);
                let t = illum * sigs[k as usize][b];
                truth[(r * w + c) * TILE_BANDS + b] = if spec.snap_to_sensor {
                    let (d, f) = (calib.dark.data[y * fw + x], calib.flat.data[y * fw + x]);
                    ((sensor(t, y, x) as f32 - d) / (f - d)).clamp(0.0, 1.0)
                } else {
                    t
                };
            }
        }
    }
    let (oh, ow) = cfg.output_size()?;
    let (or, oc) = ((h - oh) / 2, (w - ow) / 2);
    let truth = Tensor::from_f32(h, w, TILE_BANDS, Layout::Bip, truth)?.crop(or, oc, oh, ow)?;
    let labels = (0..oh)
        .flat_map(|r| labels[(or + r) * w + oc..][..ow].to_vec())
        .collect();
    Ok(LabeledSample {
        raw: RawFrame::new(fh, fw, cfg.bit_depth, raw)?,
        labels: LabelPlane {
            height: oh,
            width: ow,
            data: labels,
        },
        truth: Some(truth),
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn preprocessor(&self, stats: Option<ChannelStats>, fused: bool) -> Result<Preprocessor> {
        let config = PreprocessConfig {
            symmetric_normalize: !fused,
            ..self.preprocess.clone()
        };
        Preprocessor::new(config, &self.calib, stats)
    }

    /// Runs the preprocessing chain on the selected samples.
    pub fn cubes(&self, indices: &[usize], stats: Option<&ChannelStats>, fused: bool) -> Result<Vec<Tensor>> {
        let pre = self.preprocessor(stats.cloned(), fused)?;
        indices
            .par_iter()
            .map(|&i| {
                let s = self.samples.get(i).ok_or_else(|| Error::InvalidArgument(format!("no sample {i}")))?;
                pre.run(&s.raw)
            })
            .collect()
    }

    /// Clip statistics gathered over the per-pixel-normalized cubes of `indices`.
    pub fn clip_stats(&self, indices: &[usize]) -> Result<ChannelStats> {
        compute_clip_thresholds(&self.cubes(indices, None, false)?, self.preprocess.coverage)
    }

    pub fn labeled_cubes(&self, indices: &[usize], stats: &ChannelStats, fused: bool) -> Result<Vec<LabeledCube>> {
        Ok(self
            .cubes(indices, Some(stats), fused)?
            .into_iter()
            .zip(indices)
            .map(|(cube, &i)| LabeledCube {
                cube,
                labels: self.samples[i].labels.data.clone(),
            })
            .collect())
    }

    pub fn label_planes(&self) -> Vec<&[u8]> {
        self.samples.iter().map(|s| s.labels.data.as_slice()).collect()
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        for sub in ["raw", "labels", "truth", "calib"] {
            fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
        }
        let manifest = Manifest {
            format: MANIFEST_FORMAT.into(),
            count: self.samples.len(),
            classes: self.classes,
            class_names: self.class_names.clone(),
            preprocess: self.preprocess.clone(),
        };
        let text = toml::to_string(&manifest).map_err(|e| Error::parse(dir.display().to_string(), e.to_string()))?;
        let path = dir.join("manifest");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        container::write_plane(&dir.join("calib/dark.hsrw"), &self.calib.dark.to_plane())?;
        container::write_plane(&dir.join("calib/flat.hsrw"), &self.calib.flat.to_plane())?;
        for (i, s) in self.samples.iter().enumerate() {
            let name = sample_name(i);
            container::write_plane(&dir.join(format!("raw/{name}.hsrw")), &s.raw.to_plane())?;
            container::write_labels(&dir.join(format!("labels/{name}.hslb")), &s.labels)?;
            if let Some(t) = &s.truth {
                container::write_cube(&dir.join(format!("truth/{name}.hscb")), t)?;
            }
        }
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Manifest = toml::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
        if m.format != MANIFEST_FORMAT {
            return Err(Error::parse(path.display().to_string(), format!("unknown format {:?}", m.format)));
        }
        if m.class_names.len() != m.classes {
            return Err(Error::parse(path.display().to_string(), "class_names length differs from classes"));
        }
        m.preprocess.validate()?;
        let raw_files = list_with_extension(&dir.join("raw"), "hsrw")?;
        if raw_files.len() != m.count {
            return Err(Error::parse(
                path.display().to_string(),
                format!("manifest lists {} samples, raw/ holds {}", m.count, raw_files.len()),
            ));
        }
        let calib = CalibrationPair::new(
            FloatFrame::from_plane(container::read_plane(&dir.join("calib/dark.hsrw"))?)?,
            FloatFrame::from_plane(container::read_plane(&dir.join("calib/flat.hsrw"))?)?,
        )?;
        let samples = (0..m.count)
            .map(|i| {
                let name = sample_name(i);
                let raw_path = dir.join(format!("raw/{name}.hsrw"));
                let raw = RawFrame::from_plane(container::read_plane(&raw_path)?, m.preprocess.bit_depth)?;
                let label_path = dir.join(format!("labels/{name}.hslb"));
                if !label_path.exists() {
                    return Err(Error::parse(label_path.display().to_string(), format!("sample {name} has no label file")));
                }
                let labels = container::read_labels(&label_path)?;
                if let Some(&bad) = labels.data.iter().find(|&&l| l as usize >= m.classes) {
                    return Err(Error::parse(label_path.display().to_string(), format!("label {bad} >= {} classes", m.classes)));
                }
                let truth_path = dir.join(format!("truth/{name}.hscb"));
                let truth = truth_path.exists().then(|| container::read_cube(&truth_path)).transpose()?;
                Ok(LabeledSample { raw, labels, truth })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            classes: m.classes,
            class_names: m.class_names,
            preprocess: m.preprocess,
            calib,
            samples,
        })
    }
}

const MANIFEST_FORMAT: &str = "hsicomp-dataset-v1";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    count: usize,
    classes: usize,
    class_names: Vec<String>,
    preprocess: PreprocessConfig,
}

pub fn sample_name(i: usize) -> String {
    format!("{i:04}")
}

fn list_with_extension(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.extension().is_some_and(|e| e == ext) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// Fold index per sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Folds {
    pub k: usize,
    pub assignment: Vec<usize>,
}

/// Index sets of one cross-validation round.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Folds {
    pub fn fold(&self, f: usize) -> Vec<usize> {
        (0..self.assignment.len()).filter(|&i| self.assignment[i] == f).collect()
    }

    /// Round `r` tests on fold `r`, validates on fold `r + 1` and trains on
    /// the rest.
    pub fn round(&self, r: usize) -> Split {
        let (test, val) = (r % self.k, (r + 1) % self.k);
        let mut train = Vec::new();
        for (i, &f) in self.assignment.iter().enumerate() {
            if f != test && f != val {
                train.push(i);
            }
        }
        Split {
            train,
            val: self.fold(val),
            test: self.fold(test),
        }
    }

    pub fn rounds(&self) -> Vec<Split> {
        (0..self.k).map(|r| self.round(r)).collect()
    }
}

/// Greedy stratification. Classes are ranked by global pixel count, samples
/// are sorted by their share of each class rarest first, and each sample in
/// turn goes to the fold whose class totals it brings closest to the global
/// proportions (relative squared error). A swap pass then exchanges samples
/// between folds while that lowers the total error. Fold sizes differ by at
/// most one.
pub fn stratified_folds(labels: &[&[u8]], classes: usize, k: usize) -> Result<Folds> {
    if k < 3 {
        return Err(Error::InvalidArgument(format!("need at least 3 folds, got {k}")));
    }
    let n = labels.len();
    if n < k {
        return Err(Error::InvalidArgument(format!("{n} samples cannot fill {k} folds")));
    }
    let hist: Vec<Vec<f64>> = labels
        .iter()
        .map(|l| {
            let mut h = vec![0.0; classes];
            for &v in *l {
                if (v as usize) < classes {
                    h[v as usize] += 1.0;
                }
            }
            h
        })
        .collect();
    let mut global = vec![0.0; classes];
    for h in &hist {
        for c in 0..classes {
            global[c] += h[c];
        }
    }
    let total_px: f64 = global.iter().sum();
    let mut rarity: Vec<usize> = (0..classes).collect();
    rarity.sort_by(|&a, &b| global[a].total_cmp(&global[b]).then(a.cmp(&b)));
    let share = |i: usize, c: usize| hist[i][c] / labels[i].len().max(1) as f64;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        rarity
            .iter()
            .map(|&c| share(b, c).total_cmp(&share(a, c)))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });

    let (base, extra) = (n / k, n % k);
    let mut sizes = vec![0usize; k];
    let mut totals = vec![vec![0.0f64; classes]; k];
    let mut assignment = vec![0; n];
    for &i in &order {
        let full = sizes.iter().filter(|&&s| s > base).count();
        let px: f64 = hist[i].iter().sum();
        let cost = |f: usize| -> f64 {
            let fold_px: f64 = totals[f].iter().sum::<f64>() + px;
            (0..classes)
                .filter(|&c| global[c] > 0.0)
                .map(|c| {
                    let expect = global[c] / total_px * fold_px;
                    let d = totals[f][c] + hist[i][c] - expect;
                    d * d / global[c]
                })
                .sum::<f64>()
                - (0..classes)
                    .filter(|&c| global[c] > 0.0)
                    .map(|c| {
                        let expect = global[c] / total_px * (fold_px - px);
                        let d = totals[f][c] - expect;
                        d * d / global[c]
                    })
                    .sum::<f64>()
        };
        let best = (0..k)
            .filter(|&f| sizes[f] < base || (sizes[f] == base && full < extra))
            .min_by(|&a, &b| cost(a).total_cmp(&cost(b)).then(sizes[a].cmp(&sizes[b])).then(a.cmp(&b)))
            .expect("a fold below its cap always exists");
        assignment[i] = best;
        sizes[best] += 1;
        for c in 0..classes {
            totals[best][c] += hist[i][c];
        }
    }
    // Pairwise swaps keep fold sizes and only ever lower the deviation.
    let dev = |totals: &[Vec<f64>]| -> f64 {
        totals
            .iter()
            .map(|t| {
                let fp: f64 = t.iter().sum();
                (0..classes)
                    .filter(|&c| global[c] > 0.0)
                    .map(|c| (t[c] - global[c] / total_px * fp).powi(2) / global[c])
                    .sum::<f64>()
            })
            .sum()
    };
    let mut current = dev(&totals);
    for _ in 0..MAX_SWAP_PASSES {
        let mut improved = false;
        for a in 0..n {
            for b in a + 1..n {
                let (fa, fb) = (assignment[a], assignment[b]);
                if fa == fb {
                    continue;
                }
                for c in 0..classes {
                    let d = hist[b][c] - hist[a][c];
                    totals[fa][c] += d;
                    totals[fb][c] -= d;
                }
                let next = dev(&totals);
                if next < current - 1e-9 * current.max(1.0) {
                    assignment.swap(a, b);
                    current = next;
                    improved = true;
                } else {
                    for c in 0..classes {
                        let d = hist[b][c] - hist[a][c];
                        totals[fa][c] -= d;
                        totals[fb][c] += d;
                    }
                }
            }
        }
        if !improved {
            break;
        }
    }
    Ok(Folds { k, assignment })
}

const MAX_SWAP_PASSES: usize = 20;

/// Pixel count per class for the selected samples.
pub fn class_pixels(labels: &[&[u8]], indices: &[usize], classes: usize) -> Vec<u64> {
    let mut counts = vec![0u64; classes];
    for &i in indices {
        for &v in labels[i] {
            if (v as usize) < classes {
                counts[v as usize] += 1;
            }
        }
    }
    counts
}

/// Human-readable summary of a dataset's class balance.
pub fn class_summary(ds: &Dataset) -> BTreeMap<String, u64> {
    let labels = ds.label_planes();
    let all: Vec<usize> = (0..labels.len()).collect();
    ds.class_names.iter().cloned().zip(class_pixels(&labels, &all, ds.classes)).collect()
}
