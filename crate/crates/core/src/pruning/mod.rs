//! Structured filter pruning.
//!
//! Filters are ranked by L1 norm and removed per layer; removal propagates to
//! every consumer through channelwise layers and concatenations. Per-layer
//! ratios come from single-layer sensitivity curves and a search over a shared
//! degradation budget that meets a conv-FLOPS target.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::complexity::{analyze, conv_flops, ComplexityReport};
use crate::error::{Error, Result};
use crate::metrics::ConfusionMatrix;
use crate::netgraph::{evaluate, train, Layer, LabeledCube, NetGraph, Node, TrainConfig, TrainHistory};

/// Ratios are stored in tenths; 9 is the cap and marks a locked layer.
pub const MAX_TENTHS: u8 = 9;
pub const RATIO_STEPS: usize = MAX_TENTHS as usize + 1;

/// Filters removed from a layer of `o_f` filters at `tenths`/10, rounding half
/// up and always keeping one.
pub fn pruned_count(tenths: u8, o_f: usize) -> usize {
    ((tenths as usize * o_f + 5) / 10).min(o_f.saturating_sub(1))
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PruningScheme {
    tenths: BTreeMap<String, u8>,
}

impl PruningScheme {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, id: &str, tenths: u8) -> Result<()> {
        if tenths > MAX_TENTHS {
            return Err(Error::Scheme(format!("{id}: ratio {:.1} exceeds 0.9", tenths as f64 / 10.0)));
        }
        self.tenths.insert(id.to_string(), tenths);
        Ok(())
    }

    pub fn set_ratio(&mut self, id: &str, ratio: f64) -> Result<()> {
        let t = (ratio * 10.0).round();
        if !ratio.is_finite() || (ratio * 10.0 - t).abs() > 1e-6 || !(0.0..=MAX_TENTHS as f64).contains(&t) {
            return Err(Error::Scheme(format!("{id}: ratio {ratio} is not one of 0.0, 0.1, ..., 0.9")));
        }
        self.set(id, t as u8)
    }

    pub fn tenths(&self, id: &str) -> u8 {
        self.tenths.get(id).copied().unwrap_or(0)
    }

    pub fn ratio(&self, id: &str) -> f64 {
        self.tenths(id) as f64 / 10.0
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, u8)> {
        self.tenths.iter().map(|(k, &v)| (k.as_str(), v))
    }

    pub fn locked(&self) -> usize {
        self.tenths.values().filter(|&&t| t == MAX_TENTHS).count()
    }

    pub fn is_zero(&self) -> bool {
        self.tenths.values().all(|&t| t == 0)
    }

    /// `layer = ratio` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (id, t) in self.entries() {
            writeln!(s, "{id} = {:.1}", t as f64 / 10.0).unwrap();
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let table: BTreeMap<String, f64> = toml::from_str(text).map_err(|e| Error::parse("scheme", e.message()))?;
        let mut s = Self::new();
        for (id, r) in table {
            s.set_ratio(&id, r)?;
        }
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Kept filter indices, ascending, for every layer the scheme touched.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ChannelMask {
    pub kept: BTreeMap<String, Vec<usize>>,
}

/// Index of the conv feeding the softmax; it fixes the class count.
pub fn final_conv(g: &NetGraph) -> usize {
    let sm = g.nodes().iter().position(|n| matches!(n.layer, Layer::Softmax)).expect("validated graphs end in a softmax");
    g.channel_source(g.input_indices(sm)[0])
}

/// Conv layers open to pruning, in graph order.
pub fn prunable_layers(g: &NetGraph) -> Vec<String> {
    let last = final_conv(g);
    g.nodes()
        .iter()
        .enumerate()
        .filter(|(i, n)| *i != last && n.layer.conv().is_some())
        .map(|(_, n)| n.id.clone())
        .collect()
}

/// Filter indices by ascending L1 norm of the weights; ties keep index order.
pub fn rank_filters_l1(p: &crate::netgraph::ConvParams) -> Vec<usize> {
    let norms: Vec<f64> = (0..p.out_ch).map(|o| p.filter(o).iter().map(|w| w.abs() as f64).sum()).collect();
    let mut order: Vec<usize> = (0..p.out_ch).collect();
    order.sort_by(|&a, &b| norms[a].total_cmp(&norms[b]));
    order
}

fn validate_scheme(g: &NetGraph, scheme: &PruningScheme) -> Result<()> {
    let last = final_conv(g);
    for (id, _) in scheme.entries() {
        let i = g.index_of(id).ok_or_else(|| Error::Scheme(format!("unknown layer {id}")))?;
        if g.nodes()[i].layer.conv().is_none() {
            return Err(Error::Scheme(format!("{id} is a {}, not a convolution", g.nodes()[i].layer.kind())));
        }
        if i == last {
            return Err(Error::Scheme(format!("{id} is the final convolution and cannot be pruned")));
        }
    }
    Ok(())
}

pub fn apply_scheme(g: &NetGraph, scheme: &PruningScheme) -> Result<(NetGraph, ChannelMask)> {
    validate_scheme(g, scheme)?;
    let chans = g.channels()?;
    let mut kept: Vec<Vec<usize>> = Vec::with_capacity(g.nodes().len());
    let mut mask = ChannelMask::default();
    let mut nodes = Vec::with_capacity(g.nodes().len());
    for (i, node) in g.nodes().iter().enumerate() {
        let ins = g.input_indices(i);
        let in_kept: Vec<usize> = if matches!(node.layer, Layer::Concat) {
            let mut offset = 0;
            let mut all = Vec::new();
            for &j in ins {
                all.extend(kept[j].iter().map(|c| c + offset));
                offset += chans[j];
            }
            all
        } else {
            ins.first().map(|&j| kept[j].clone()).unwrap_or_default()
        };
        let mut layer = node.layer.clone();
        let own = match &mut layer {
            Layer::Input { bands } => (0..*bands).collect(),
            Layer::Conv2d(p) | Layer::ConvTranspose2d(p) => {
                let t = scheme.tenths(&node.id);
                let keep: Vec<usize> = if t == 0 {
                    (0..p.out_ch).collect()
                } else {
                    let order = rank_filters_l1(p);
                    let mut keep = order[pruned_count(t, p.out_ch)..].to_vec();
                    keep.sort_unstable();
                    mask.kept.insert(node.id.clone(), keep.clone());
                    keep
                };
                if in_kept.len() != p.in_ch {
                    p.select_inputs(&in_kept);
                }
                if keep.len() != p.out_ch {
                    p.select_outputs(&keep);
                }
                keep
            }
            Layer::BatchNorm(b) => {
                if in_kept.len() != b.channels() {
                    b.select(&in_kept);
                }
                in_kept
            }
            Layer::DepthwiseNorm(d) => {
                if in_kept.len() != d.weight.len() {
                    d.weight = in_kept.iter().map(|&c| d.weight[c]).collect();
                    d.bias = in_kept.iter().map(|&c| d.bias[c]).collect();
                }
                in_kept
            }
            Layer::Relu | Layer::MaxPool | Layer::Dropout { .. } | Layer::Concat | Layer::Softmax => in_kept,
        };
        kept.push(own);
        nodes.push(Node {
            id: node.id.clone(),
            layer,
            inputs: node.inputs.clone(),
        });
    }
    Ok((NetGraph::from_nodes(nodes, g.classes())?, mask))
}

/// Conv FLOPS and parameters the graph behind `report` would have after `scheme`.
pub fn cost_under(report: &ComplexityReport, scheme: &PruningScheme) -> (u64, u64) {
    let remaining = |id: Option<&String>, n: usize| n - id.map_or(0, |s| pruned_count(scheme.tenths(s), n));
    let (mut flops, mut params) = (0, 0);
    for r in report.conv_records() {
        let o_f = remaining(Some(&r.id), r.o_f);
        let i_c: usize = r.input_groups.iter().map(|(s, n)| remaining(s.as_ref(), *n)).sum();
        flops += conv_flops(r.kind, r.o_h, r.o_w, o_f, r.k_h, r.k_w, i_c);
        params += (o_f * r.k_h * r.k_w * i_c) as u64;
    }
    (flops, params)
}

pub fn flops_under(report: &ComplexityReport, scheme: &PruningScheme) -> u64 {
    cost_under(report, scheme).0
}

/// Quality measure used by sensitivity curves and gates, in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Metric {
    #[default]
    WeightedIou,
    GlobalIou,
    ClassIou(usize),
}

impl Metric {
    pub fn value(&self, cm: &ConfusionMatrix) -> Result<f64> {
        let none = || Error::Empty(format!("{self} is undefined on an evaluation set without that ground truth"));
        match *self {
            Metric::WeightedIou => cm.aggregate().map(|a| a.wiou).ok_or_else(none),
            Metric::GlobalIou => cm.aggregate().map(|a| a.giou).ok_or_else(none),
            Metric::ClassIou(c) => {
                if c >= cm.classes() {
                    return Err(Error::InvalidArgument(format!("class {c} out of range for {} classes", cm.classes())));
                }
                cm.scores()[c].iou.ok_or_else(none)
            }
        }
    }

    pub fn evaluate(&self, g: &NetGraph, set: &[LabeledCube]) -> Result<f64> {
        self.value(&evaluate(g, set)?)
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Metric::WeightedIou => f.write_str("wiou"),
            Metric::GlobalIou => f.write_str("giou"),
            Metric::ClassIou(c) => write!(f, "class:{c}"),
        }
    }
}

impl FromStr for Metric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wiou" => Ok(Metric::WeightedIou),
            "giou" => Ok(Metric::GlobalIou),
            _ => s
                .strip_prefix("class:")
                .and_then(|c| c.parse().ok())
                .map(Metric::ClassIou)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown metric {s:?}; expected wiou, giou or class:N"))),
        }
    }
}

impl TryFrom<String> for Metric {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Metric> for String {
    fn from(m: Metric) -> String {
        m.to_string()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerCurve {
    pub id: String,
    /// Metric with only this layer pruned at 0.0, 0.1, ..., 0.9.
    pub values: [f64; RATIO_STEPS],
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityCurves {
    pub metric: Metric,
    pub baseline: f64,
    pub layers: Vec<LayerCurve>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CurvesFile {
    metric: Metric,
    baseline: f64,
    #[serde(default)]
    layer: Vec<CurveEntry>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CurveEntry {
    id: String,
    values: Vec<f64>,
}

impl SensitivityCurves {
    pub fn get(&self, id: &str) -> Option<&LayerCurve> {
        self.layers.iter().find(|c| c.id == id)
    }

    /// Baseline minus the metric at `tenths`; positive means worse.
    pub fn drop_at(&self, curve: &LayerCurve, tenths: u8) -> f64 {
        self.baseline - curve.values[tenths as usize]
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("metric = \"{}\"\nbaseline = {:?}\n", self.metric, self.baseline);
        for c in &self.layers {
            let v: Vec<String> = c.values.iter().map(|x| format!("{x:?}")).collect();
            write!(s, "\n[[layer]]\nid = \"{}\"\nvalues = [{}]\n", c.id, v.join(", ")).unwrap();
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let f: CurvesFile = toml::from_str(text).map_err(|e| Error::parse("sensitivity curves", e.message()))?;
        let mut layers: Vec<LayerCurve> = Vec::with_capacity(f.layer.len());
        for CurveEntry { id, values: v } in f.layer {
            if layers.iter().any(|c| c.id == id) {
                return Err(Error::parse(format!("curve {id}"), "duplicate layer"));
            }
            let values: [f64; RATIO_STEPS] = v
                .try_into()
                .map_err(|v: Vec<f64>| Error::parse(format!("curve {id}"), format!("{} values, expected {RATIO_STEPS}", v.len())))?;
            if values[0].to_bits() != f.baseline.to_bits() {
                return Err(Error::parse(format!("curve {id}"), "ratio 0 differs from the baseline"));
            }
            layers.push(LayerCurve { id, values });
        }
        Ok(Self {
            metric: f.metric,
            baseline: f.baseline,
            layers,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Prunes each prunable layer alone at every ratio step and records the metric.
pub fn sensitivity_analysis(g: &NetGraph, eval_set: &[LabeledCube], metric: Metric) -> Result<SensitivityCurves> {
    if eval_set.is_empty() {
        return Err(Error::Empty("sensitivity analysis needs a non-empty evaluation set".into()));
    }
    let baseline = metric.evaluate(g, eval_set)?;
    let ids = prunable_layers(g);
    let jobs: Vec<(usize, u8)> = (0..ids.len()).flat_map(|l| (1..=MAX_TENTHS).map(move |t| (l, t))).collect();
    let values: Vec<f64> = jobs
        .par_iter()
        .map(|&(l, t)| {
            let mut s = PruningScheme::new();
            s.set(&ids[l], t)?;
            metric.evaluate(&apply_scheme(g, &s)?.0, eval_set)
        })
        .collect::<Result<_>>()?;
    let layers = ids
        .into_iter()
        .zip(values.chunks(MAX_TENTHS as usize))
        .map(|(id, v)| {
            let mut values = [baseline; RATIO_STEPS];
            values[1..].copy_from_slice(v);
            LayerCurve { id, values }
        })
        .collect();
    Ok(SensitivityCurves { metric, baseline, layers })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    pub scheme: PruningScheme,
    /// Conv FLOPS after pruning over conv FLOPS before.
    pub achieved_ratio: f64,
    /// Largest tolerated single-layer metric drop.
    pub budget: f64,
    /// Layers held at ratio 0 by the exclusion threshold.
    pub excluded: Vec<String>,
}

/// Finds the smallest degradation budget whose scheme removes at least
/// `overall_pr` of the conv FLOPS, then settles ties at that budget. `exclusion_threshold` is in metric points
/// (hundredths).
pub fn search_scheme(
    curves: &SensitivityCurves,
    report: &ComplexityReport,
    overall_pr: f64,
    exclusion_threshold: f64,
) -> Result<SearchOutcome> {
    if !(0.0..1.0).contains(&overall_pr) {
        return Err(Error::InvalidArgument(format!("overall pruning ratio {overall_pr} outside [0, 1)")));
    }
    for c in &curves.layers {
        if !report.record(&c.id).is_some_and(|r| r.is_conv()) {
            return Err(Error::Scheme(format!("curve {} has no convolution in the complexity report", c.id)));
        }
    }
    let total = report.total_flops as f64;
    let (excluded, open): (Vec<&LayerCurve>, Vec<&LayerCurve>) =
        curves.layers.iter().partition(|c| curves.drop_at(c, 1) > exclusion_threshold / 100.0);
    let excluded: Vec<String> = excluded.into_iter().map(|c| c.id.clone()).collect();
    let scheme_at = |t: f64| {
        let mut s = PruningScheme::new();
        for c in &open {
            let r = (0..=MAX_TENTHS).rev().find(|&r| r == 0 || curves.drop_at(c, r) <= t).unwrap();
            s.set(&c.id, r).unwrap();
        }
        s
    };
    if overall_pr == 0.0 {
        return Ok(SearchOutcome {
            scheme: PruningScheme::new(),
            achieved_ratio: 1.0,
            budget: 0.0,
            excluded,
        });
    }
    let target = (1.0 - overall_pr) * total;
    // The scheme only changes where t crosses a curve value, so searching the
    // sorted drops finds the exact smallest feasible budget.
    let mut budgets: Vec<f64> = open.iter().flat_map(|c| (1..=MAX_TENTHS).map(|r| curves.drop_at(c, r))).collect();
    budgets.sort_by(f64::total_cmp);
    budgets.dedup();
    let feasible = |t: f64| flops_under(report, &scheme_at(t)) as f64 <= target;
    if !budgets.last().is_some_and(|&t| feasible(t)) {
        let best = budgets.last().map_or(total, |&t| flops_under(report, &scheme_at(t)) as f64);
        return Err(Error::Infeasible {
            target: 1.0 - overall_pr,
            achievable: best / total,
        });
    }
    let (mut lo, mut hi) = (0, budgets.len() - 1);
    while lo < hi {
        let mid = (lo + hi) / 2;
        if feasible(budgets[mid]) {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    let budget = budgets[hi];
    let scheme = settle_ties(curves, &open, report, target, budget, hi.checked_sub(1).map(|i| scheme_at(budgets[i])), scheme_at(budget));
    Ok(SearchOutcome {
        achieved_ratio: flops_under(report, &scheme) as f64 / total,
        scheme,
        budget,
        excluded,
    })
}

/// Layers that change ratio exactly at the critical budget share the same
/// drop, so any mix of their admissible ratios respects the budget. They are
/// raised together one admissible step per round, stopping at the first
/// round that meets the target. Without this, flat curves would all jump to
/// the cap at once and overshoot the target.
fn settle_ties(
    curves: &SensitivityCurves,
    open: &[&LayerCurve],
    report: &ComplexityReport,
    target: f64,
    budget: f64,
    below: Option<PruningScheme>,
    at: PruningScheme,
) -> PruningScheme {
    let below = below.unwrap_or_default();
    let steps: Vec<(&str, Vec<u8>)> = open
        .iter()
        .filter_map(|c| {
            let (from, to) = (below.tenths(&c.id), at.tenths(&c.id));
            let s: Vec<u8> = (from + 1..=to).filter(|&r| curves.drop_at(c, r) <= budget).collect();
            (to > from).then_some((c.id.as_str(), s))
        })
        .collect();
    let rounds = steps.iter().map(|(_, s)| s.len()).max().unwrap_or(0);
    let mut scheme = below;
    for k in 0..rounds {
        for (id, s) in &steps {
            if let Some(&r) = s.get(k) {
                scheme.set(id, r).expect("ratios come from the curves");
                if flops_under(report, &scheme) as f64 <= target {
                    return scheme;
                }
            }
        }
    }
    at
}

fn d_prs() -> Vec<f64> {
    vec![0.5]
}
fn d_layer_gate() -> f64 {
    0.25
}
fn d_locked_gate() -> f64 {
    0.25
}
fn d_model_gate() -> f64 {
    1.0
}
fn d_exclusion() -> f64 {
    5.0
}
fn d_retries() -> usize {
    4
}
fn d_backoff() -> f64 {
    0.05
}
fn d_finetune() -> TrainConfig {
    TrainConfig {
        epochs: 60,
        lr: 1e-6,
        ..TrainConfig::default()
    }
}

/// Gate thresholds are in metric points except `locked_gate`, a fraction of
/// the prunable layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IterationConfig {
    /// One target per iteration.
    #[serde(default = "d_prs")]
    pub overall_pr: Vec<f64>,
    #[serde(default = "d_layer_gate")]
    pub layer_gate: f64,
    #[serde(default = "d_locked_gate")]
    pub locked_gate: f64,
    #[serde(default = "d_model_gate")]
    pub model_gate: f64,
    #[serde(default = "d_exclusion")]
    pub exclusion_threshold: f64,
    #[serde(default)]
    pub metric: Metric,
    /// Further attempts per iteration, each lowering the target by `pr_backoff`.
    #[serde(default = "d_retries")]
    pub max_retries: usize,
    #[serde(default = "d_backoff")]
    pub pr_backoff: f64,
    #[serde(default = "d_finetune")]
    pub finetune: TrainConfig,
}

impl Default for IterationConfig {
    fn default() -> Self {
        Self {
            overall_pr: d_prs(),
            layer_gate: d_layer_gate(),
            locked_gate: d_locked_gate(),
            model_gate: d_model_gate(),
            exclusion_threshold: d_exclusion(),
            metric: Metric::default(),
            max_retries: d_retries(),
            pr_backoff: d_backoff(),
            finetune: d_finetune(),
        }
    }
}

impl IterationConfig {
    pub fn validate(&self) -> Result<()> {
        let gates = [
            ("layer_gate", self.layer_gate),
            ("locked_gate", self.locked_gate),
            ("model_gate", self.model_gate),
            ("exclusion_threshold", self.exclusion_threshold),
            ("pr_backoff", self.pr_backoff),
        ];
        for (name, v) in gates {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")));
            }
        }
        if self.overall_pr.is_empty() {
            return Err(Error::InvalidArgument("overall_pr needs at least one iteration".into()));
        }
        for &pr in &self.overall_pr {
            if !(0.0..1.0).contains(&pr) {
                return Err(Error::InvalidArgument(format!("overall pruning ratio {pr} outside [0, 1)")));
            }
        }
        Ok(())
    }
}

/// Training data for finetuning; sensitivity and gates use `val`.
#[derive(Debug, Clone, Copy)]
pub struct PruneData<'a> {
    pub train: &'a [LabeledCube],
    pub val: &'a [LabeledCube],
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Attempt {
    pub overall_pr: f64,
    pub outcome: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationReport {
    pub requested_pr: f64,
    pub used_pr: f64,
    pub last: bool,
    pub attempts: Vec<Attempt>,
    pub metric: Metric,
    pub budget_points: f64,
    pub worst_layer_drop_points: f64,
    pub locked: usize,
    pub prunable: usize,
    pub excluded: Vec<String>,
    pub achieved_ratio: f64,
    pub flops_before: u64,
    pub flops_after: u64,
    pub params_before: u64,
    pub params_after: u64,
    pub metric_before: f64,
    pub metric_after_prune: f64,
    pub metric_after_finetune: f64,
    pub finetune_epochs: usize,
    pub scheme: BTreeMap<String, f64>,
}

impl IterationReport {
    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("report fields serialize")
    }
}

fn input_shape(set: &[LabeledCube]) -> Result<(usize, usize, usize)> {
    let c = &set.first().ok_or_else(|| Error::Empty("evaluation set is empty".into()))?.cube;
    Ok((c.height(), c.width(), c.bands()))
}

fn scheme_map(s: &PruningScheme) -> BTreeMap<String, f64> {
    s.entries().map(|(id, t)| (id.to_string(), t as f64 / 10.0)).collect()
}

/// One prune-and-finetune round. Intermediate rounds must also pass the
/// per-layer and locked-layer gates; every round must keep the post-finetune
/// metric within `model_gate` of the unpruned one. A failed attempt retries
/// with a lower target.
pub fn run_iteration(g: &NetGraph, data: PruneData<'_>, cfg: &IterationConfig, overall_pr: f64, last: bool) -> Result<(NetGraph, IterationReport)> {
    cfg.validate()?;
    let report = analyze(g, input_shape(data.val)?)?;
    let curves = sensitivity_analysis(g, data.val, cfg.metric)?;
    let prunable = curves.layers.len();
    let mut attempts = Vec::new();
    for k in 0..=cfg.max_retries {
        let pr = ((overall_pr - k as f64 * cfg.pr_backoff) * 1e9).round() / 1e9;
        if pr <= 0.0 {
            break;
        }
        let mut fail = |outcome: String| attempts.push(Attempt { overall_pr: pr, outcome });
        let found = match search_scheme(&curves, &report, pr, cfg.exclusion_threshold) {
            Ok(f) => f,
            Err(e @ Error::Infeasible { .. }) => {
                fail(e.to_string());
                continue;
            }
            Err(e) => return Err(e),
        };
        let worst = curves
            .layers
            .iter()
            .filter(|c| found.scheme.tenths(&c.id) > 0)
            .map(|c| curves.drop_at(c, found.scheme.tenths(&c.id)))
            .fold(0.0, f64::max);
        let locked = found.scheme.locked();
        if !last {
            if worst * 100.0 >= cfg.layer_gate {
                fail(format!("worst single-layer drop {:.3} points, gate {}", worst * 100.0, cfg.layer_gate));
                continue;
            }
            let frac = locked as f64 / prunable.max(1) as f64;
            if frac >= cfg.locked_gate {
                fail(format!("{locked} of {prunable} layers locked, gate {}", cfg.locked_gate));
                continue;
            }
        }
        let (mut pruned, _) = apply_scheme(g, &found.scheme)?;
        let after_prune = cfg.metric.evaluate(&pruned, data.val)?;
        let history: TrainHistory = train(&mut pruned, data.train, data.val, &cfg.finetune)?;
        let after = cfg.metric.evaluate(&pruned, data.val)?;
        let loss_points = (curves.baseline - after) * 100.0;
        if loss_points >= cfg.model_gate {
            fail(format!("model drop {loss_points:.3} points after finetuning, gate {}", cfg.model_gate));
            continue;
        }
        let (flops_after, params_after) = cost_under(&report, &found.scheme);
        attempts.push(Attempt {
            overall_pr: pr,
            outcome: "passed".into(),
        });
        let out = IterationReport {
            requested_pr: overall_pr,
            used_pr: pr,
            last,
            attempts,
            metric: cfg.metric,
            budget_points: found.budget * 100.0,
            worst_layer_drop_points: worst * 100.0,
            locked,
            prunable,
            excluded: found.excluded,
            achieved_ratio: found.achieved_ratio,
            flops_before: report.total_flops,
            flops_after,
            params_before: report.total_params,
            params_after,
            metric_before: curves.baseline,
            metric_after_prune: after_prune,
            metric_after_finetune: after,
            finetune_epochs: history.records.len(),
            scheme: scheme_map(&found.scheme),
        };
        return Ok((pruned, out));
    }
    let tried: Vec<String> = attempts.iter().map(|a| format!("pr {}: {}", a.overall_pr, a.outcome)).collect();
    Err(Error::Iteration(format!("no scheme passed for target {overall_pr}; {}", tried.join("; "))))
}

/// Runs one iteration per entry of `cfg.overall_pr`, each on the previous result.
pub fn run_iterations(g: &NetGraph, data: PruneData<'_>, cfg: &IterationConfig) -> Result<(NetGraph, Vec<IterationReport>)> {
    cfg.validate()?;
    let mut current = g.clone();
    let mut reports = Vec::with_capacity(cfg.overall_pr.len());
    for (k, &pr) in cfg.overall_pr.iter().enumerate() {
        let (next, r) = run_iteration(&current, data, cfg, pr, k + 1 == cfg.overall_pr.len())?;
        current = next;
        reports.push(r);
    }
    Ok((current, reports))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InitReport {
    pub overall_pr: f64,
    pub achieved_ratio: f64,
    pub params_before: u64,
    pub params_after: u64,
    pub locked: usize,
    pub epochs_trained: usize,
    pub metric: Metric,
    pub metric_after_training: f64,
    /// Ratios of every prunable layer in graph order.
    pub ratios: Vec<(String, f64)>,
}

impl InitReport {
    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("report fields serialize")
    }
}

/// Chooses a scheme from the untrained network's curves, prunes, then trains.
pub fn prune_at_init(
    g: &NetGraph,
    data: PruneData<'_>,
    overall_pr: f64,
    cfg: &IterationConfig,
    train_cfg: &TrainConfig,
) -> Result<(NetGraph, InitReport)> {
    cfg.validate()?;
    let report = analyze(g, input_shape(data.val)?)?;
    let curves = sensitivity_analysis(g, data.val, cfg.metric)?;
    let found = search_scheme(&curves, &report, overall_pr, cfg.exclusion_threshold)?;
    let (mut pruned, _) = apply_scheme(g, &found.scheme)?;
    let history = train(&mut pruned, data.train, data.val, train_cfg)?;
    let after = cfg.metric.evaluate(&pruned, data.val)?;
    let out = InitReport {
        overall_pr,
        achieved_ratio: found.achieved_ratio,
        params_before: report.total_params,
        params_after: cost_under(&report, &found.scheme).1,
        locked: found.scheme.locked(),
        epochs_trained: history.records.len(),
        metric: cfg.metric,
        metric_after_training: after,
        ratios: curves.layers.iter().map(|c| (c.id.clone(), found.scheme.ratio(&c.id))).collect(),
    };
    Ok((pruned, out))
}
