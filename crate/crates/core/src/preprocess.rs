//! Raw snapshot-mosaic frame to network-ready cube.
//!
//! Step order (each step tagged with the layout it runs in):
//!
//! 1. `crop_and_clip`        raw frame, row-major u16
//! 2. `reflectance_correct`  f32 frame
//! 3. `demosaic`             frame -> BSQ cube
//! 4. `align_bands`          BSQ
//! 5. `crop_to_multiple`     BSQ
//! 6. BSQ -> BIP conversion
//! 7. `pixel_normalize`      BIP
//! 8. `clip_channels`        BIP
//! 9. `symmetric_normalize`  BIP (skipped when the network carries the fused
//!    depthwise normalization layer)
//!
//! Band-plane steps only accept BSQ and per-pixel steps only accept BIP; a
//! tensor in the wrong layout is rejected rather than silently converted.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{Plane, PlaneData};
use crate::error::{Error, Result};
use crate::tensor::{Layout, Tensor};

/// Side length of the spectral filter tile.
pub const TILE: usize = 5;
/// Bands per tile.
pub const TILE_BANDS: usize = TILE * TILE;

/// Minimum `flat - dark` accepted by reflectance correction.
pub const CALIBRATION_EPS: f32 = 1e-6;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawFrame {
    pub height: usize,
    pub width: usize,
    pub bit_depth: u32,
    pub data: Vec<u16>,
}

impl RawFrame {
    pub fn new(height: usize, width: usize, bit_depth: u32, data: Vec<u16>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Dimension(format!(
                "raw frame {height}x{width} holds {} values",
                data.len()
            )));
        }
        if !(1..=16).contains(&bit_depth) {
            return Err(Error::InvalidArgument(format!("bit depth {bit_depth} outside 1..=16")));
        }
        Ok(Self {
            height,
            width,
            bit_depth,
            data,
        })
    }

    pub fn to_plane(&self) -> Plane {
        Plane {
            height: self.height,
            width: self.width,
            data: PlaneData::U16(self.data.clone()),
        }
    }

    pub fn from_plane(plane: Plane, bit_depth: u32) -> Result<Self> {
        match plane.data {
            PlaneData::U16(v) => Self::new(plane.height, plane.width, bit_depth, v),
            PlaneData::F32(_) => Err(Error::ElementType("raw frame must be u16".into())),
        }
    }
}

/// Row-major f32 plane (reflectance-corrected frame, dark or flat field).
#[derive(Debug, Clone, PartialEq)]
pub struct FloatFrame {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl FloatFrame {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Dimension(format!(
                "frame {height}x{width} holds {} values",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<FloatFrame> {
        if top + h > self.height || left + w > self.width {
            return Err(Error::Dimension(format!(
                "window ({top},{left}) {h}x{w} exceeds {}x{} frame",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(h * w);
        for r in top..top + h {
            data.extend_from_slice(&self.data[r * self.width + left..r * self.width + left + w]);
        }
        Ok(FloatFrame { height: h, width: w, data })
    }

    pub fn to_plane(&self) -> Plane {
        Plane {
            height: self.height,
            width: self.width,
            data: PlaneData::F32(self.data.clone()),
        }
    }

    pub fn from_plane(plane: Plane) -> Result<Self> {
        match plane.data {
            PlaneData::F32(v) => Self::new(plane.height, plane.width, v),
            PlaneData::U16(_) => Err(Error::ElementType("calibration plane must be f32".into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationPair {
    pub dark: FloatFrame,
    pub flat: FloatFrame,
}

impl CalibrationPair {
    pub fn new(dark: FloatFrame, flat: FloatFrame) -> Result<Self> {
        if (dark.height, dark.width) != (flat.height, flat.width) {
            return Err(Error::Dimension(format!(
                "dark {}x{} vs flat {}x{}",
                dark.height, dark.width, flat.height, flat.width
            )));
        }
        Ok(Self { dark, flat })
    }

    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Self> {
        Ok(Self {
            dark: self.dark.crop(top, left, h, w)?,
            flat: self.flat.crop(top, left, h, w)?,
        })
    }
}

/// 5x5 filter tile geometry.
///
/// `band_of(i, j) = 5*i + j`. Each band also has a physical sampling position
/// inside the tile (frame-pixel units); for the standard sensor that is just
/// `(i, j)`. Alignment resamples every band onto the reference position.
#[derive(Debug, Clone, PartialEq)]
pub struct MosaicGeometry {
    pub reference: (usize, usize),
    pub positions: Vec<(f32, f32)>,
}

impl MosaicGeometry {
    pub fn standard(reference: (usize, usize)) -> Self {
        let positions = (0..TILE_BANDS)
            .map(|b| ((b / TILE) as f32, (b % TILE) as f32))
            .collect();
        Self { reference, positions }
    }

    /// Every band already sits on the reference grid; alignment is the identity.
    pub fn aligned(reference: (usize, usize)) -> Self {
        let p = (reference.0 as f32, reference.1 as f32);
        Self {
            reference,
            positions: vec![p; TILE_BANDS],
        }
    }

    #[inline]
    pub fn band_of(i: usize, j: usize) -> usize {
        TILE * i + j
    }

    #[inline]
    pub fn tile_position(band: usize) -> (usize, usize) {
        (band / TILE, band % TILE)
    }

    /// Sampling shift `(dy, dx)` in band-plane pixels that maps band `b` onto
    /// the reference grid: `aligned(r, c) = band(r + dy, c + dx)`.
    pub fn shift(&self, band: usize) -> (f32, f32) {
        let (pi, pj) = self.positions[band];
        (
            (self.reference.0 as f32 - pi) / TILE as f32,
            (self.reference.1 as f32 - pj) / TILE as f32,
        )
    }
}

/// Per-band clip thresholds and symmetric-normalization bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelStats {
    pub th: Vec<f32>,
    pub min: Vec<f32>,
    pub max: Vec<f32>,
}

impl ChannelStats {
    pub fn bands(&self) -> usize {
        self.th.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.min.len() != self.th.len() || self.max.len() != self.th.len() {
            return Err(Error::Dimension(format!(
                "channel stats lengths th={} min={} max={}",
                self.th.len(),
                self.min.len(),
                self.max.len()
            )));
        }
        if let Some((b, &t)) = self.th.iter().enumerate().find(|(_, &t)| !(t > 0.0)) {
            return Err(Error::InvalidArgument(format!("clip threshold th[{b}] = {t} must be positive")));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let stats: Self = toml::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
        stats.validate()?;
        Ok(stats)
    }
}

fn default_crop_origin() -> [usize; 2] {
    [0, 0]
}
fn default_cube_size() -> [usize; 2] {
    [216, 409]
}
fn default_bit_depth() -> u32 {
    10
}
fn default_coverage() -> f64 {
    0.9995
}
fn default_reference() -> [usize; 2] {
    [2, 2]
}
fn default_true() -> bool {
    true
}
fn default_depth() -> u32 {
    5
}

/// Preprocessing parameters. Every field has a default matching the
/// 1088x2048 sensor and the depth-5 network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessConfig {
    /// Top-left corner of the active area inside the raw frame.
    #[serde(default = "default_crop_origin")]
    pub crop_origin: [usize; 2],
    /// Band-plane size after demosaicing; the active area is 5x this.
    #[serde(default = "default_cube_size")]
    pub cube_size: [usize; 2],
    #[serde(default = "default_bit_depth")]
    pub bit_depth: u32,
    /// Fraction of values kept unclipped per channel.
    #[serde(default = "default_coverage")]
    pub coverage: f64,
    /// Tile position the bands are aligned to.
    #[serde(default = "default_reference")]
    pub reference_tile: [usize; 2],
    /// When false the sensor is treated as having no intra-tile offsets.
    #[serde(default = "default_true")]
    pub band_alignment: bool,
    /// Network depth; spatial size is cropped to a multiple of `2^depth`.
    #[serde(default = "default_depth")]
    pub depth: u32,
    /// Apply symmetric normalization in software (false when fused into the graph).
    #[serde(default = "default_true")]
    pub symmetric_normalize: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            crop_origin: default_crop_origin(),
            cube_size: default_cube_size(),
            bit_depth: default_bit_depth(),
            coverage: default_coverage(),
            reference_tile: default_reference(),
            band_alignment: true,
            depth: default_depth(),
            symmetric_normalize: true,
        }
    }
}

impl PreprocessConfig {
    pub fn geometry(&self) -> MosaicGeometry {
        let reference = (self.reference_tile[0], self.reference_tile[1]);
        if self.band_alignment {
            MosaicGeometry::standard(reference)
        } else {
            MosaicGeometry::aligned(reference)
        }
    }

    pub fn active_size(&self) -> (usize, usize) {
        (self.cube_size[0] * TILE, self.cube_size[1] * TILE)
    }

    /// Output spatial size after `crop_to_multiple`.
    pub fn output_size(&self) -> Result<(usize, usize)> {
        let m = 1usize << self.depth;
        let (h, w) = (self.cube_size[0] / m * m, self.cube_size[1] / m * m);
        if h == 0 || w == 0 {
            return Err(Error::Dimension(format!(
                "{}x{} cube smaller than one {m}x{m} tile",
                self.cube_size[0], self.cube_size[1]
            )));
        }
        Ok((h, w))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.coverage > 0.0 && self.coverage <= 1.0) {
            return Err(Error::InvalidArgument(format!("coverage {} outside (0, 1]", self.coverage)));
        }
        if self.reference_tile[0] >= TILE || self.reference_tile[1] >= TILE {
            return Err(Error::InvalidArgument(format!("reference tile {:?} outside 5x5", self.reference_tile)));
        }
        if !(1..=16).contains(&self.bit_depth) {
            return Err(Error::InvalidArgument(format!("bit depth {} outside 1..=16", self.bit_depth)));
        }
        self.output_size()?;
        Ok(())
    }
}

/// Cuts the active area out of the raw frame and clips to the sensor range.
pub fn crop_and_clip(raw: &RawFrame, config: &PreprocessConfig) -> Result<RawFrame> {
    let (h, w) = config.active_size();
    let [top, left] = config.crop_origin;
    if top + h > raw.height || left + w > raw.width {
        return Err(Error::Dimension(format!(
            "raw frame {}x{} smaller than crop window ({top},{left}) {h}x{w}",
            raw.height, raw.width
        )));
    }
    let ceiling = ((1u32 << config.bit_depth) - 1) as u16;
    let mut data = Vec::with_capacity(h * w);
    for r in top..top + h {
        let row = &raw.data[r * raw.width + left..r * raw.width + left + w];
        data.extend(row.iter().map(|&v| v.min(ceiling)));
    }
    Ok(RawFrame {
        height: h,
        width: w,
        bit_depth: config.bit_depth,
        data,
    })
}

/// `(raw - dark) / (flat - dark)`, clamped to `[0, 1]`.
pub fn reflectance_correct(raw: &RawFrame, calib: &CalibrationPair) -> Result<FloatFrame> {
    if (raw.height, raw.width) != (calib.dark.height, calib.dark.width) {
        return Err(Error::Dimension(format!(
            "raw {}x{} vs calibration {}x{}",
            raw.height, raw.width, calib.dark.height, calib.dark.width
        )));
    }
    let mut data = Vec::with_capacity(raw.data.len());
    for (i, ((&v, &d), &f)) in raw.data.iter().zip(&calib.dark.data).zip(&calib.flat.data).enumerate() {
        let span = f - d;
        if !(span >= CALIBRATION_EPS) {
            return Err(Error::Calibration {
                row: i / raw.width,
                col: i % raw.width,
                diff: span,
            });
        }
        data.push(((v as f32 - d) / span).clamp(0.0, 1.0));
    }
    Ok(FloatFrame {
        height: raw.height,
        width: raw.width,
        data,
    })
}

/// Partial demosaic: one value per band per tile, no upsampling.
pub fn demosaic(frame: &FloatFrame) -> Result<Tensor> {
    if frame.height % TILE != 0 || frame.width % TILE != 0 {
        return Err(Error::Dimension(format!(
            "frame {}x{} not divisible by the {TILE}x{TILE} tile",
            frame.height, frame.width
        )));
    }
    let (h, w) = (frame.height / TILE, frame.width / TILE);
    let mut data = vec![0.0f32; h * w * TILE_BANDS];
    for i in 0..TILE {
        for j in 0..TILE {
            let band = &mut data[MosaicGeometry::band_of(i, j) * h * w..][..h * w];
            for r in 0..h {
                let src = &frame.data[(TILE * r + i) * frame.width..][..frame.width];
                let dst = &mut band[r * w..(r + 1) * w];
                for (c, d) in dst.iter_mut().enumerate() {
                    *d = src[TILE * c + j];
                }
            }
        }
    }
    Tensor::from_f32(h, w, TILE_BANDS, Layout::Bsq, data)
}

/// Bilinear resampling of one band plane at `(r + dy, c + dx)`, clamping
/// sample coordinates to the plane.
pub fn shift_plane(src: &[f32], h: usize, w: usize, dy: f32, dx: f32, out: &mut [f32]) {
    if dy == 0.0 && dx == 0.0 {
        out.copy_from_slice(src);
        return;
    }
    let (ymax, xmax) = ((h - 1) as f32, (w - 1) as f32);
    let cols: Vec<(usize, usize, f32)> = (0..w)
        .map(|c| {
            let x = (c as f32 + dx).clamp(0.0, xmax);
            let x0 = x.floor() as usize;
            (x0, (x0 + 1).min(w - 1), x - x0 as f32)
        })
        .collect();
    for r in 0..h {
        let y = (r as f32 + dy).clamp(0.0, ymax);
        let y0 = y.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = y - y0 as f32;
        let row0 = &src[y0 * w..(y0 + 1) * w];
        let row1 = &src[y1 * w..(y1 + 1) * w];
        for (c, &(x0, x1, fx)) in cols.iter().enumerate() {
            let top = (1.0 - fx) * row0[x0] + fx * row0[x1];
            let bottom = (1.0 - fx) * row1[x0] + fx * row1[x1];
            out[r * w + c] = (1.0 - fy) * top + fy * bottom;
        }
    }
}

/// Resamples every band onto the reference band's grid.
pub fn align_bands(cube: &Tensor, geom: &MosaicGeometry) -> Result<Tensor> {
    cube.expect_layout("align_bands", Layout::Bsq)?;
    if cube.bands() != geom.positions.len() {
        return Err(Error::Dimension(format!(
            "cube has {} bands, geometry {}",
            cube.bands(),
            geom.positions.len()
        )));
    }
    let (h, w) = (cube.height(), cube.width());
    let src = cube.as_f32()?;
    let mut out = vec![0.0f32; src.len()];
    for b in 0..cube.bands() {
        let (dy, dx) = geom.shift(b);
        let plane = h * w;
        shift_plane(&src[b * plane..(b + 1) * plane], h, w, dy, dx, &mut out[b * plane..(b + 1) * plane]);
    }
    Tensor::from_f32(h, w, cube.bands(), Layout::Bsq, out)
}

/// Centered crop to the largest multiple of `2^depth`. Returns the cropped
/// cube and the `(top, left)` offsets used.
pub fn crop_to_multiple(cube: &Tensor, depth: u32) -> Result<(Tensor, (usize, usize))> {
    cube.expect_layout("crop_to_multiple", Layout::Bsq)?;
    let m = 1usize << depth;
    let (h, w) = (cube.height(), cube.width());
    let (th, tw) = (h / m * m, w / m * m);
    if th == 0 || tw == 0 {
        return Err(Error::Dimension(format!("{h}x{w} cube smaller than one {m}x{m} tile")));
    }
    let offsets = ((h - th) / 2, (w - tw) / 2);
    Ok((cube.crop(offsets.0, offsets.1, th, tw)?, offsets))
}

/// Divides each pixel's spectrum by its band sum; zero-sum pixels stay zero.
pub fn pixel_normalize(cube: &Tensor) -> Result<Tensor> {
    cube.expect_layout("pixel_normalize", Layout::Bip)?;
    let nb = cube.bands();
    let mut out = cube.as_f32()?.to_vec();
    for px in out.chunks_exact_mut(nb.max(1)) {
        let sum = px.iter().map(|&v| v as f64).sum::<f64>() as f32;
        if sum == 0.0 {
            px.fill(0.0);
        } else {
            px.iter_mut().for_each(|v| *v /= sum);
        }
    }
    Tensor::from_f32(cube.height(), cube.width(), nb, Layout::Bip, out)
}

/// Smallest value `v` of a sample such that at least `coverage` of the
/// values are `<= v`.
pub fn quantile(values: &mut [f32], coverage: f64) -> f32 {
    let n = values.len();
    let rank = ((coverage * n as f64) - 1e-9).ceil().clamp(1.0, n as f64) as usize - 1;
    let (_, v, _) = values.select_nth_unstable_by(rank, f32::total_cmp);
    *v
}

/// Per-band clip thresholds at `coverage` over all pixels of all cubes.
/// `min` is the smallest value after clipping, `max` the threshold itself.
pub fn compute_clip_thresholds(cubes: &[Tensor], coverage: f64) -> Result<ChannelStats> {
    let first = cubes.first().ok_or_else(|| Error::Empty("no cubes for clip thresholds".into()))?;
    if !(coverage > 0.0 && coverage <= 1.0) {
        return Err(Error::InvalidArgument(format!("coverage {coverage} outside (0, 1]")));
    }
    let nb = first.bands();
    let mut per_band: Vec<Vec<f32>> = vec![Vec::new(); nb];
    for cube in cubes {
        cube.expect_layout("compute_clip_thresholds", Layout::Bip)?;
        if cube.bands() != nb {
            return Err(Error::Dimension(format!("band count {} vs {nb}", cube.bands())));
        }
        for px in cube.as_f32()?.chunks_exact(nb) {
            for (b, &v) in px.iter().enumerate() {
                per_band[b].push(v);
            }
        }
    }
    let mut stats = ChannelStats {
        th: Vec::with_capacity(nb),
        min: Vec::with_capacity(nb),
        max: Vec::with_capacity(nb),
    };
    for mut values in per_band {
        if values.is_empty() {
            return Err(Error::Empty("cubes contain no pixels".into()));
        }
        let th = quantile(&mut values, coverage);
        let lo = values.iter().copied().fold(f32::INFINITY, f32::min).min(th);
        stats.th.push(th);
        stats.min.push(lo);
        stats.max.push(th);
    }
    Ok(stats)
}

pub fn clip_channels(cube: &Tensor, stats: &ChannelStats) -> Result<Tensor> {
    cube.expect_layout("clip_channels", Layout::Bip)?;
    let nb = cube.bands();
    if stats.bands() != nb {
        return Err(Error::Dimension(format!("stats for {} bands, cube has {nb}", stats.bands())));
    }
    let mut out = cube.as_f32()?.to_vec();
    for px in out.chunks_exact_mut(nb) {
        for (v, &t) in px.iter_mut().zip(&stats.th) {
            *v = v.min(t);
        }
    }
    Tensor::from_f32(cube.height(), cube.width(), nb, Layout::Bip, out)
}

/// `2 (x - min) / (max - min) - 1` per band.
pub fn symmetric_normalize(cube: &Tensor, stats: &ChannelStats) -> Result<Tensor> {
    cube.expect_layout("symmetric_normalize", Layout::Bip)?;
    let nb = cube.bands();
    if stats.bands() != nb {
        return Err(Error::Dimension(format!("stats for {} bands, cube has {nb}", stats.bands())));
    }
    for b in 0..nb {
        if !(stats.max[b] > stats.min[b]) {
            return Err(Error::DegenerateChannel {
                band: b,
                value: stats.min[b],
            });
        }
    }
    let mut out = cube.as_f32()?.to_vec();
    for px in out.chunks_exact_mut(nb) {
        for (b, v) in px.iter_mut().enumerate() {
            let (lo, hi) = (stats.min[b], stats.max[b]);
            *v = 2.0 * (*v - lo) / (hi - lo) - 1.0;
        }
    }
    Tensor::from_f32(cube.height(), cube.width(), nb, Layout::Bip, out)
}

/// Step-wise preprocessor with calibration already cut to the active area.
/// The pipeline executor drives the individual steps; [`run_preprocess`] runs
/// them back to back.
#[derive(Debug, Clone)]
pub struct Preprocessor {
    pub config: PreprocessConfig,
    geometry: MosaicGeometry,
    calib: CalibrationPair,
    stats: Option<ChannelStats>,
}

impl Preprocessor {
    /// `calib` may cover the full raw frame (it is cropped with the same
    /// window) or just the active area.
    pub fn new(config: PreprocessConfig, calib: &CalibrationPair, stats: Option<ChannelStats>) -> Result<Self> {
        config.validate()?;
        let (h, w) = config.active_size();
        let calib = if (calib.dark.height, calib.dark.width) == (h, w) {
            calib.clone()
        } else {
            calib.crop(config.crop_origin[0], config.crop_origin[1], h, w)?
        };
        if let Some(s) = &stats {
            s.validate()?;
        }
        Ok(Self {
            geometry: config.geometry(),
            config,
            calib,
            stats,
        })
    }

    pub fn stats(&self) -> Option<&ChannelStats> {
        self.stats.as_ref()
    }

    pub fn crop_and_clip(&self, raw: &RawFrame) -> Result<RawFrame> {
        crop_and_clip(raw, &self.config)
    }

    pub fn reflectance(&self, raw: &RawFrame) -> Result<FloatFrame> {
        reflectance_correct(raw, &self.calib)
    }

    pub fn demosaic(&self, frame: &FloatFrame) -> Result<Tensor> {
        demosaic(frame)
    }

    pub fn align(&self, cube: &Tensor) -> Result<Tensor> {
        align_bands(cube, &self.geometry)
    }

    /// Final crop followed by the BSQ -> BIP conversion.
    pub fn crop_and_interleave(&self, cube: &Tensor) -> Result<Tensor> {
        let (cropped, _) = crop_to_multiple(cube, self.config.depth)?;
        Ok(cropped.convert_layout(Layout::Bip))
    }

    /// Per-pixel normalization, channel clipping and (unless fused) the
    /// symmetric normalization.
    pub fn normalize(&self, cube: &Tensor) -> Result<Tensor> {
        let mut out = pixel_normalize(cube)?;
        if let Some(stats) = &self.stats {
            out = clip_channels(&out, stats)?;
            if self.config.symmetric_normalize {
                out = symmetric_normalize(&out, stats)?;
            }
        }
        Ok(out)
    }

    pub fn run(&self, raw: &RawFrame) -> Result<Tensor> {
        let raw = self.crop_and_clip(raw)?;
        let frame = self.reflectance(&raw)?;
        let cube = self.demosaic(&frame)?;
        let cube = self.align(&cube)?;
        let cube = self.crop_and_interleave(&cube)?;
        self.normalize(&cube)
    }
}

/// Whole chain in order. Without `stats` the output stops after per-pixel
/// normalization (used to gather the clip statistics themselves).
pub fn run_preprocess(
    raw: &RawFrame,
    calib: &CalibrationPair,
    stats: Option<&ChannelStats>,
    config: &PreprocessConfig,
) -> Result<Tensor> {
    Preprocessor::new(config.clone(), calib, stats.cloned())?.run(raw)
}
