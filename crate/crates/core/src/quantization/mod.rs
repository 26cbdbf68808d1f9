//! Per-tensor 8-bit post-training quantization with power-of-two scales.
//!
//! A tensor value `x` maps to `q = clamp(round(x / 2^e) + zp)` with rounding
//! half away from zero. Weights use the narrow range [-127, 127]; everything
//! else uses [-128, 127]. Simulated inference keeps every tensor on its grid
//! and computes in f64, where sums of grid products are exact, so it matches
//! an integer pipeline with wide accumulators.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::ConfusionMatrix;
use crate::netgraph::{argmax_labels, kernels, DepthwiseParams, FeatureMap, Layer, LabeledCube, NetGraph, Node};
use crate::tensor::{Layout, Tensor};

pub const QMAX: i32 = 127;
/// Exponent for tensors with no range to cover.
pub const DEGENERATE_EXPONENT: i32 = -7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantMode {
    Symmetric,
    Affine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantParams {
    pub exponent: i32,
    pub zero_point: i32,
    pub mode: QuantMode,
    /// Lowest code is -127 instead of -128.
    #[serde(default)]
    pub narrow: bool,
}

impl QuantParams {
    pub fn symmetric(exponent: i32, narrow: bool) -> Self {
        Self {
            exponent,
            zero_point: 0,
            mode: QuantMode::Symmetric,
            narrow,
        }
    }

    pub fn scale(&self) -> f64 {
        (self.exponent as f64).exp2()
    }

    pub fn qmin(&self) -> i32 {
        if self.narrow {
            -QMAX
        } else {
            -QMAX - 1
        }
    }

    pub fn quantize(&self, x: f64) -> i32 {
        let q = (x * (-self.exponent as f64).exp2()).round() + self.zero_point as f64;
        q.clamp(self.qmin() as f64, QMAX as f64) as i32
    }

    pub fn dequantize(&self, q: i32) -> f64 {
        (q - self.zero_point) as f64 * self.scale()
    }

    pub fn fake(&self, x: f64) -> f64 {
        self.dequantize(self.quantize(x))
    }

    /// Integer bits of a signed 8-bit fixed-point value at this exponent.
    pub fn integer_bits(&self) -> i32 {
        7 + self.exponent
    }

    fn validate(&self, id: &str) -> Result<()> {
        let ok = match self.mode {
            QuantMode::Symmetric => self.zero_point == 0,
            QuantMode::Affine => (self.qmin()..=QMAX).contains(&self.zero_point),
        };
        if !ok || !(-126..=126).contains(&self.exponent) {
            return Err(Error::Quantization(format!("{id}: invalid parameters {self:?}")));
        }
        Ok(())
    }
}

/// Smallest power-of-two scale whose grid covers `[lo, hi]`.
pub fn min_max_params(lo: f64, hi: f64, mode: QuantMode, narrow: bool) -> QuantParams {
    match mode {
        QuantMode::Symmetric => {
            let m = lo.abs().max(hi.abs());
            if m == 0.0 {
                return QuantParams::symmetric(DEGENERATE_EXPONENT, narrow);
            }
            let mut e = (m / QMAX as f64).log2().ceil() as i32;
            while (QMAX as f64) * (e as f64).exp2() < m {
                e += 1;
            }
            while (QMAX as f64) * ((e - 1) as f64).exp2() >= m {
                e -= 1;
            }
            QuantParams::symmetric(e, narrow)
        }
        QuantMode::Affine => {
            let (lo, hi) = (lo.min(0.0), hi.max(0.0));
            let span = hi - lo;
            if span == 0.0 {
                return QuantParams {
                    exponent: DEGENERATE_EXPONENT,
                    zero_point: 0,
                    mode,
                    narrow,
                };
            }
            let qmin = if narrow { -QMAX } else { -QMAX - 1 };
            let levels = (QMAX - qmin) as f64;
            let mut e = (span / levels).log2().floor() as i32 - 1;
            loop {
                let s = (e as f64).exp2();
                let zp = qmin + (-lo / s).ceil() as i32;
                if levels * s >= span && zp <= QMAX && (QMAX - zp) as f64 * s >= hi {
                    return QuantParams {
                        exponent: e,
                        zero_point: zp,
                        mode,
                        narrow,
                    };
                }
                e += 1;
            }
        }
    }
}

/// Mean squared quantize-dequantize error, accumulated in order.
pub fn quantization_mse(values: &[f64], p: &QuantParams) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().map(|&x| (p.fake(x) - x).powi(2)).sum::<f64>() / values.len() as f64
}

/// Lowest-MSE parameters among the Min-Max exponent and the `window`
/// exponents below it. Ties keep the larger exponent.
pub fn min_mse_params(values: &[f64], lo: f64, hi: f64, mode: QuantMode, narrow: bool, window: u32) -> QuantParams {
    let mm = min_max_params(lo, hi, mode, narrow);
    let mut best = (quantization_mse(values, &mm), mm);
    for d in 1..=window as i32 {
        let e = mm.exponent - d;
        let p = match mode {
            QuantMode::Symmetric => QuantParams::symmetric(e, narrow),
            QuantMode::Affine => {
                let centre = (lo.min(0.0) + hi.max(0.0)) / 2.0;
                let zp = (-0.5 - centre / (e as f64).exp2()).round() as i32;
                QuantParams {
                    exponent: e,
                    zero_point: zp.clamp(mm.qmin(), QMAX),
                    mode,
                    narrow,
                }
            }
        };
        let mse = quantization_mse(values, &p);
        if mse < best.0 {
            best = (mse, p);
        }
    }
    best.1
}

fn range(values: &[f64]) -> (f64, f64) {
    values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)))
}

/// Parameters keyed by tensor id: `<node>` for a node's output,
/// `<node>.weight` and `<node>.bias` for its parameters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct QuantTable {
    pub params: BTreeMap<String, QuantParams>,
}

impl QuantTable {
    pub fn get(&self, id: &str) -> Result<&QuantParams> {
        self.params.get(id).ok_or_else(|| Error::Quantization(format!("no quantization parameters for tensor {id}")))
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("quantization table serializes")
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let t: Self = toml::from_str(text).map_err(|e| Error::parse("quantization parameters", e.message()))?;
        for (id, p) in &t.params {
            p.validate(id)?;
        }
        Ok(t)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

fn d_window() -> u32 {
    4
}
fn d_samples() -> usize {
    1 << 20
}
fn d_input_mode() -> QuantMode {
    QuantMode::Symmetric
}

/// Input and bias use Min-Max, weights symmetric Min-MSE, activations affine
/// Min-MSE.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantPolicy {
    #[serde(default = "d_input_mode")]
    pub input_mode: QuantMode,
    /// Exponents below the Min-Max one tried by Min-MSE.
    #[serde(default = "d_window")]
    pub mse_window: u32,
    /// Activation values kept per tensor for the MSE search, by even stride.
    #[serde(default = "d_samples")]
    pub max_samples: usize,
}

impl Default for QuantPolicy {
    fn default() -> Self {
        Self {
            input_mode: d_input_mode(),
            mse_window: d_window(),
            max_samples: d_samples(),
        }
    }
}

/// Nodes whose outputs are requantized. A conv feeding only a ReLU is fused
/// with it; pooling and dropout keep their input grid; softmax stays float.
pub fn activation_points(g: &NetGraph) -> Vec<bool> {
    g.nodes()
        .iter()
        .enumerate()
        .map(|(i, n)| match n.layer {
            Layer::Conv2d(_) | Layer::ConvTranspose2d(_) => {
                let c = g.consumers(i);
                !(c.len() == 1 && matches!(g.nodes()[c[0]].layer, Layer::Relu))
            }
            Layer::Input { .. } | Layer::DepthwiseNorm(_) | Layer::BatchNorm(_) | Layer::Relu | Layer::Concat => true,
            Layer::MaxPool | Layer::Dropout { .. } | Layer::Softmax => false,
        })
        .collect()
}

fn weight_tensors(layer: &Layer) -> Option<(&[f32], &[f32])> {
    match layer {
        Layer::Conv2d(p) | Layer::ConvTranspose2d(p) => Some((&p.weight, &p.bias)),
        Layer::DepthwiseNorm(p) => Some((&p.weight, &p.bias)),
        _ => None,
    }
}

fn weight_tensors_mut(layer: &mut Layer) -> Option<(&mut [f32], &mut [f32])> {
    match layer {
        Layer::Conv2d(p) | Layer::ConvTranspose2d(p) => Some((&mut p.weight, &mut p.bias)),
        Layer::DepthwiseNorm(p) => Some((&mut p.weight, &mut p.bias)),
        _ => None,
    }
}

fn to_f64_map(x: &Tensor) -> Result<FeatureMap<f64>> {
    x.expect_layout("quantized forward", Layout::Bip)?;
    Ok(FeatureMap {
        n: 1,
        h: x.height(),
        w: x.width(),
        c: x.bands(),
        data: x.as_f32()?.iter().map(|&v| v as f64).collect(),
    })
}

struct ActStats {
    lo: f64,
    hi: f64,
    stride: usize,
    seen: usize,
    samples: Vec<f64>,
}

pub fn calibrate(g: &NetGraph, calib: &[Tensor], policy: &QuantPolicy) -> Result<QuantTable> {
    if calib.is_empty() {
        return Err(Error::Empty("calibration needs at least one cube".into()));
    }
    if policy.max_samples == 0 {
        return Err(Error::InvalidArgument("max_samples must be positive".into()));
    }
    let mut table = QuantTable::default();
    for n in g.nodes() {
        if let Some((w, b)) = weight_tensors(&n.layer) {
            let wv: Vec<f64> = w.iter().map(|&v| v as f64).collect();
            let (lo, hi) = range(&wv);
            let wp = min_mse_params(&wv, lo, hi, QuantMode::Symmetric, true, policy.mse_window);
            let bv: Vec<f64> = b.iter().map(|&v| v as f64).collect();
            let (blo, bhi) = range(&bv);
            table.params.insert(format!("{}.weight", n.id), wp);
            table.params.insert(format!("{}.bias", n.id), min_max_params(blo, bhi, QuantMode::Symmetric, false));
        }
    }
    let points = activation_points(g);
    let mut totals = vec![0usize; g.nodes().len()];
    for x in calib {
        for (t, (h, w, c)) in totals.iter_mut().zip(g.shapes(x.height(), x.width())?) {
            *t += h * w * c;
        }
    }
    let mut stats: Vec<Option<ActStats>> = points
        .iter()
        .zip(&totals)
        .map(|(&p, &t)| {
            p.then(|| ActStats {
                lo: f64::INFINITY,
                hi: f64::NEG_INFINITY,
                stride: t.div_ceil(policy.max_samples).max(1),
                seen: 0,
                samples: Vec::new(),
            })
        })
        .collect();
    for x in calib {
        g.forward_hooked(to_f64_map(x)?, &mut |i, fm| {
            if let Some(s) = stats[i].as_mut() {
                for &v in &fm.data {
                    s.lo = s.lo.min(v);
                    s.hi = s.hi.max(v);
                    if s.seen % s.stride == 0 {
                        s.samples.push(v);
                    }
                    s.seen += 1;
                }
            }
            Ok(())
        })?;
    }
    for (n, s) in g.nodes().iter().zip(stats) {
        let Some(s) = s else { continue };
        let p = if matches!(n.layer, Layer::Input { .. }) {
            min_max_params(s.lo, s.hi, policy.input_mode, false)
        } else {
            min_mse_params(&s.samples, s.lo, s.hi, QuantMode::Affine, false, policy.mse_window)
        };
        table.params.insert(n.id.clone(), p);
    }
    Ok(table)
}

/// Folds every batch norm into the conv feeding it.
pub fn fold_bn(g: &NetGraph) -> Result<NetGraph> {
    let mut nodes: Vec<Node> = g.nodes().to_vec();
    let mut renames: BTreeMap<String, String> = BTreeMap::new();
    let mut removed = vec![false; nodes.len()];
    for i in 0..g.nodes().len() {
        let Layer::BatchNorm(bn) = &g.nodes()[i].layer else { continue };
        let src = g.input_indices(i)[0];
        if g.nodes()[src].layer.conv().is_none() || g.consumers(src).len() != 1 {
            return Err(Error::Structure(format!(
                "batch norm {} does not directly follow a convolution it alone consumes",
                g.nodes()[i].id
            )));
        }
        let p = nodes[src].layer.conv_mut().expect("checked above");
        for o in 0..p.out_ch {
            let a = bn.gamma[o] as f64 / (bn.var[o] as f64 + bn.eps as f64).sqrt();
            p.filter_mut(o).iter_mut().for_each(|w| *w = (*w as f64 * a) as f32);
            p.bias[o] = ((p.bias[o] as f64 - bn.mean[o] as f64) * a + bn.beta[o] as f64) as f32;
        }
        removed[i] = true;
        renames.insert(g.nodes()[i].id.clone(), g.nodes()[src].id.clone());
    }
    let nodes = nodes
        .into_iter()
        .zip(removed)
        .filter(|(_, r)| !r)
        .map(|(mut n, _)| {
            for inp in &mut n.inputs {
                if let Some(r) = renames.get(inp) {
                    *inp = r.clone();
                }
            }
            n
        })
        .collect();
    NetGraph::from_nodes(nodes, g.classes())
}

/// conv -> ReLU -> [Dropout] -> conv chains where each link has one consumer.
pub fn equalization_pairs(g: &NetGraph) -> Vec<(usize, usize)> {
    let single = |i: usize| -> Option<usize> {
        let c = g.consumers(i);
        (c.len() == 1).then(|| c[0])
    };
    let mut pairs = Vec::new();
    for (a, n) in g.nodes().iter().enumerate() {
        if n.layer.conv().is_none() {
            continue;
        }
        let Some(r) = single(a).filter(|&r| matches!(g.nodes()[r].layer, Layer::Relu)) else { continue };
        let Some(mut b) = single(r) else { continue };
        if matches!(g.nodes()[b].layer, Layer::Dropout { .. }) {
            let Some(next) = single(b) else { continue };
            b = next;
        }
        if g.nodes()[b].layer.conv().is_some() {
            pairs.push((a, b));
        }
    }
    pairs
}

/// Per-channel rescaling of equalization pairs so that each shared channel has
/// the same max-abs range on both sides.
pub fn cross_layer_equalize(g: &NetGraph, passes: usize) -> Result<NetGraph> {
    if g.nodes().iter().any(|n| matches!(n.layer, Layer::BatchNorm(_))) {
        return Err(Error::Structure("fold batch norms before equalization".into()));
    }
    let pairs = equalization_pairs(g);
    let mut out = g.clone();
    for _ in 0..passes {
        for &(a, b) in &pairs {
            let pa = out.nodes()[a].layer.conv().expect("pair endpoints are convs").clone();
            let pb = out.nodes()[b].layer.conv().expect("pair endpoints are convs");
            let ic = pb.in_ch;
            let mut r2 = vec![0.0f64; ic];
            for (k, w) in pb.weight.iter().enumerate() {
                r2[k % ic] = r2[k % ic].max(w.abs() as f64);
            }
            let s: Vec<f64> = (0..pa.out_ch)
                .map(|i| {
                    let r1 = pa.filter(i).iter().fold(pa.bias[i].abs() as f64, |m, w| m.max(w.abs() as f64));
                    if r1 == 0.0 || r2[i] == 0.0 {
                        1.0
                    } else {
                        (r1 / r2[i]).sqrt()
                    }
                })
                .collect();
            let ca = out.layer_mut(a).conv_mut().expect("conv");
            for (i, &si) in s.iter().enumerate() {
                ca.filter_mut(i).iter_mut().for_each(|w| *w = (*w as f64 / si) as f32);
                ca.bias[i] = (ca.bias[i] as f64 / si) as f32;
            }
            let cb = out.layer_mut(b).conv_mut().expect("conv");
            for (k, w) in cb.weight.iter_mut().enumerate() {
                *w = (*w as f64 * s[k % ic]) as f32;
            }
        }
    }
    Ok(out)
}

/// A graph with on-grid weights plus the activation grids applied during
/// inference.
#[derive(Debug, Clone)]
pub struct QuantizedModel {
    graph: NetGraph,
    points: Vec<Option<QuantParams>>,
}

impl QuantizedModel {
    pub fn new(g: &NetGraph, table: &QuantTable) -> Result<Self> {
        let mut graph = g.clone();
        for i in 0..graph.nodes().len() {
            let id = graph.nodes()[i].id.clone();
            if weight_tensors(&graph.nodes()[i].layer).is_none() {
                continue;
            }
            let wp = *table.get(&format!("{id}.weight"))?;
            let bp = *table.get(&format!("{id}.bias"))?;
            let (w, b) = weight_tensors_mut(graph.layer_mut(i)).expect("checked above");
            w.iter_mut().for_each(|v| *v = wp.fake(*v as f64) as f32);
            b.iter_mut().for_each(|v| *v = bp.fake(*v as f64) as f32);
        }
        let points = activation_points(g)
            .into_iter()
            .zip(g.nodes())
            .map(|(p, n)| if p { table.get(&n.id).map(|q| Some(*q)) } else { Ok(None) })
            .collect::<Result<_>>()?;
        Ok(Self { graph, points })
    }

    /// The graph with weights and biases snapped to their grids.
    pub fn graph(&self) -> &NetGraph {
        &self.graph
    }

    pub fn forward_map(&self, x: FeatureMap<f64>) -> Result<FeatureMap<f64>> {
        let points = &self.points;
        self.graph.forward_hooked(x, &mut |i, fm| {
            if let Some(p) = &points[i] {
                fm.data.iter_mut().for_each(|v| *v = p.fake(*v));
            }
            Ok(())
        })
    }

    /// Class probabilities as an `H x W x classes` BIP tensor.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let out = self.forward_map(to_f64_map(x)?)?;
        Tensor::from_f32(out.h, out.w, out.c, Layout::Bip, out.data.iter().map(|&v| v as f32).collect())
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<u8>> {
        Ok(argmax_labels(&self.forward_map(to_f64_map(x)?)?))
    }

    pub fn evaluate(&self, set: &[LabeledCube]) -> Result<ConfusionMatrix> {
        let mut cm = ConfusionMatrix::new(self.graph.classes());
        for s in set {
            cm.add(&self.predict(&s.cube)?, &s.labels)?;
        }
        Ok(cm)
    }
}

/// BN folding followed by `passes` rounds of cross-layer equalization.
pub fn fold_and_equalize(g: &NetGraph, passes: usize) -> Result<NetGraph> {
    cross_layer_equalize(&fold_bn(g)?, passes)
}

/// Fraction of pixels on which `q` picks the same class as the float graph.
pub fn argmax_agreement(float: &NetGraph, q: &QuantizedModel, cubes: &[Tensor]) -> Result<f64> {
    if cubes.is_empty() {
        return Err(Error::Empty("agreement needs at least one cube".into()));
    }
    let (mut same, mut total) = (0usize, 0usize);
    for x in cubes {
        let (a, b) = (float.predict(x)?, q.predict(x)?);
        same += a.iter().zip(&b).filter(|(p, r)| p == r).count();
        total += a.len();
    }
    Ok(same as f64 / total as f64)
}

/// Splits a graph with a fused normalization after its input into the graph
/// without it and the normalization; graphs without one get an identity.
pub fn split_fused(g: &NetGraph) -> Result<(NetGraph, DepthwiseParams)> {
    let input_id = g.nodes()[0].id.clone();
    let norm = g.consumers(0).into_iter().find(|&i| matches!(g.nodes()[i].layer, Layer::DepthwiseNorm(_)));
    let Some(ni) = norm else {
        let c = g.in_bands();
        return Ok((
            g.clone(),
            DepthwiseParams {
                weight: vec![1.0; c],
                bias: vec![0.0; c],
            },
        ));
    };
    if g.consumers(0).len() != 1 {
        return Err(Error::Structure("fused normalization must be the input's only consumer".into()));
    }
    let Layer::DepthwiseNorm(p) = &g.nodes()[ni].layer else { unreachable!() };
    let norm_id = g.nodes()[ni].id.clone();
    let nodes = g
        .nodes()
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != ni)
        .map(|(_, n)| {
            let mut n = n.clone();
            for inp in &mut n.inputs {
                if *inp == norm_id {
                    *inp = input_id.clone();
                }
            }
            n
        })
        .collect();
    Ok((NetGraph::from_nodes(nodes, g.classes())?, p.clone()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DriftReport {
    pub mean_fraction: f64,
    pub per_image: Vec<f64>,
    /// Row-major changed-pixel map per image.
    pub maps: Vec<Vec<bool>>,
}

impl DriftReport {
    /// Share of changed pixels whose 3x3 neighbourhood in `labels` holds more
    /// than one class.
    pub fn boundary_share(&self, labels: &[Vec<u8>], width: usize) -> Result<f64> {
        if labels.len() != self.maps.len() {
            return Err(Error::Dimension(format!("{} label maps for {} drift maps", labels.len(), self.maps.len())));
        }
        let (mut changed, mut on_boundary) = (0usize, 0usize);
        for (map, lab) in self.maps.iter().zip(labels) {
            if lab.len() != map.len() || width == 0 || map.len() % width != 0 {
                return Err(Error::Dimension("label map does not match drift map".into()));
            }
            let h = map.len() / width;
            for (k, _) in map.iter().enumerate().filter(|(_, &c)| c) {
                changed += 1;
                let (r, c) = (k / width, k % width);
                let centre = lab[k];
                let mixed = (r.saturating_sub(1)..=(r + 1).min(h - 1))
                    .flat_map(|rr| (c.saturating_sub(1)..=(c + 1).min(width - 1)).map(move |cc| (rr, cc)))
                    .any(|(rr, cc)| lab[rr * width + cc] != centre);
                on_boundary += mixed as usize;
            }
        }
        Ok(if changed == 0 { 0.0 } else { on_boundary as f64 / changed as f64 })
    }
}

/// Fraction of pixels whose winning class differs between the explicit and
/// fused models. `eval` holds fused-model inputs; the explicit model sees them
/// after the fused normalization. `None` parameters mean float inference.
pub fn requantization_drift(
    g_explicit: &NetGraph,
    g_fused: &NetGraph,
    params_e: Option<&QuantTable>,
    params_f: Option<&QuantTable>,
    eval: &[Tensor],
) -> Result<DriftReport> {
    if eval.is_empty() {
        return Err(Error::Empty("drift evaluation needs at least one cube".into()));
    }
    let (stripped, norm) = split_fused(g_fused)?;
    if !stripped.bitwise_eq(g_explicit) {
        return Err(Error::InvalidArgument("model pair mismatch: fused graph without its normalization differs from the explicit graph".into()));
    }
    let qe = params_e.map(|t| QuantizedModel::new(g_explicit, t)).transpose()?;
    let qf = params_f.map(|t| QuantizedModel::new(g_fused, t)).transpose()?;
    let mut per_image = Vec::with_capacity(eval.len());
    let mut maps = Vec::with_capacity(eval.len());
    for x in eval {
        x.expect_layout("drift evaluation", Layout::Bip)?;
        let fm = FeatureMap {
            n: 1,
            h: x.height(),
            w: x.width(),
            c: x.bands(),
            data: x.as_f32()?.to_vec(),
        };
        let normalized = kernels::channel_affine(&fm, &norm.weight, &norm.bias);
        let xe = Tensor::from_f32(fm.h, fm.w, fm.c, Layout::Bip, normalized.data)?;
        let pe = match &qe {
            Some(m) => m.predict(&xe)?,
            None => g_explicit.predict(&xe)?,
        };
        let pf = match &qf {
            Some(m) => m.predict(x)?,
            None => g_fused.predict(x)?,
        };
        let map: Vec<bool> = pe.iter().zip(&pf).map(|(a, b)| a != b).collect();
        per_image.push(map.iter().filter(|&&c| c).count() as f64 / map.len() as f64);
        maps.push(map);
    }
    Ok(DriftReport {
        mean_fraction: per_image.iter().sum::<f64>() / per_image.len() as f64,
        per_image,
        maps,
    })
}

#[cfg(test)]
mod tests;
