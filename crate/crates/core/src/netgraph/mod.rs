//! U-Net style compute graphs: construction, shape inference, execution,
//! gradients, training and a manifest + weight-blob file format.
//!
//! Nodes are kept in topological order; every node names its producers by id.
//! The graph has exactly one `Input` node (first) and one `Softmax` node (last).

mod exec;
pub mod kernels;
mod train;

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::ChannelStats;

pub use exec::{argmax_labels, Gradients, NodeGrad, TrainPass};
pub use kernels::{FeatureMap, Real};
pub use train::{evaluate, predict_set, train, Adam, EpochRecord, LabeledCube, TrainConfig, TrainHistory};

pub const BN_EPS: f32 = 1e-5;

/// Conv weights are `out_ch x kh x kw x in_ch`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub out_ch: usize,
    pub in_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl ConvParams {
    pub fn zeros(out_ch: usize, in_ch: usize, kh: usize, kw: usize) -> Self {
        Self {
            out_ch,
            in_ch,
            kh,
            kw,
            weight: vec![0.0; out_ch * kh * kw * in_ch],
            bias: vec![0.0; out_ch],
        }
    }

    pub fn filter_len(&self) -> usize {
        self.kh * self.kw * self.in_ch
    }

    pub fn filter(&self, o: usize) -> &[f32] {
        let k = self.filter_len();
        &self.weight[o * k..(o + 1) * k]
    }

    pub fn filter_mut(&mut self, o: usize) -> &mut [f32] {
        let k = self.filter_len();
        &mut self.weight[o * k..(o + 1) * k]
    }

    pub fn view<T: Real>(&self) -> kernels::ConvView<'_, T> {
        kernels::ConvView {
            out_ch: self.out_ch,
            in_ch: self.in_ch,
            kh: self.kh,
            kw: self.kw,
            weight: T::cast_slice(&self.weight),
            bias: T::cast_slice(&self.bias),
        }
    }

    /// Keeps the listed output filters.
    pub fn select_outputs(&mut self, keep: &[usize]) {
        let k = self.filter_len();
        self.weight = keep.iter().flat_map(|&o| self.weight[o * k..(o + 1) * k].to_vec()).collect();
        self.bias = keep.iter().map(|&o| self.bias[o]).collect();
        self.out_ch = keep.len();
    }

    /// Keeps the listed input channels.
    pub fn select_inputs(&mut self, keep: &[usize]) {
        let spatial = self.out_ch * self.kh * self.kw;
        let ic = self.in_ch;
        self.weight = (0..spatial)
            .flat_map(|s| keep.iter().map(move |&c| (s, c)))
            .map(|(s, c)| self.weight[s * ic + c])
            .collect();
        self.in_ch = keep.len();
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub eps: f32,
}

impl BatchNormParams {
    pub fn identity(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            eps: BN_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn select(&mut self, keep: &[usize]) {
        for v in [&mut self.gamma, &mut self.beta, &mut self.mean, &mut self.var] {
            *v = keep.iter().map(|&c| v[c]).collect();
        }
    }
}

/// Per-band `y = x * weight + bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthwiseParams {
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Input { bands: usize },
    Conv2d(ConvParams),
    /// Always 2x2 kernel, stride 2.
    ConvTranspose2d(ConvParams),
    DepthwiseNorm(DepthwiseParams),
    BatchNorm(BatchNormParams),
    Relu,
    MaxPool,
    Dropout { rate: f32 },
    Concat,
    Softmax,
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Input { .. } => "input",
            Layer::Conv2d(_) => "conv2d",
            Layer::ConvTranspose2d(_) => "conv_transpose2d",
            Layer::DepthwiseNorm(_) => "depthwise_norm",
            Layer::BatchNorm(_) => "batch_norm",
            Layer::Relu => "relu",
            Layer::MaxPool => "max_pool",
            Layer::Dropout { .. } => "dropout",
            Layer::Concat => "concat",
            Layer::Softmax => "softmax",
        }
    }

    pub fn conv(&self) -> Option<&ConvParams> {
        match self {
            Layer::Conv2d(p) | Layer::ConvTranspose2d(p) => Some(p),
            _ => None,
        }
    }

    pub fn conv_mut(&mut self) -> Option<&mut ConvParams> {
        match self {
            Layer::Conv2d(p) | Layer::ConvTranspose2d(p) => Some(p),
            _ => None,
        }
    }

    /// Layers that pass channels through one-to-one.
    pub fn is_channelwise(&self) -> bool {
        matches!(
            self,
            Layer::BatchNorm(_) | Layer::Relu | Layer::MaxPool | Layer::Dropout { .. } | Layer::DepthwiseNorm(_)
        )
    }

    /// Trainable tensors: (weight, bias) for convs, (gamma, beta) for BN.
    pub fn trainable(&self) -> Option<(&[f32], &[f32])> {
        match self {
            Layer::Conv2d(p) | Layer::ConvTranspose2d(p) => Some((&p.weight, &p.bias)),
            Layer::BatchNorm(p) => Some((&p.gamma, &p.beta)),
            _ => None,
        }
    }

    pub fn trainable_mut(&mut self) -> Option<(&mut [f32], &mut [f32])> {
        match self {
            Layer::Conv2d(p) | Layer::ConvTranspose2d(p) => Some((&mut p.weight, &mut p.bias)),
            Layer::BatchNorm(p) => Some((&mut p.gamma, &mut p.beta)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub id: String,
    pub layer: Layer,
    pub inputs: Vec<String>,
}

impl Node {
    pub fn new(id: impl Into<String>, layer: Layer, inputs: &[&str]) -> Self {
        Self {
            id: id.into(),
            layer,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetGraph {
    nodes: Vec<Node>,
    index: HashMap<String, usize>,
    inputs: Vec<Vec<usize>>,
    classes: usize,
}

impl NetGraph {
    /// Validates and indexes a topologically ordered node list.
    pub fn from_nodes(nodes: Vec<Node>, classes: usize) -> Result<Self> {
        let mut index = HashMap::new();
        let mut inputs = Vec::with_capacity(nodes.len());
        for (i, node) in nodes.iter().enumerate() {
            let mut idx = Vec::with_capacity(node.inputs.len());
            for name in &node.inputs {
                match index.get(name) {
                    Some(&j) => idx.push(j),
                    None => {
                        return Err(Error::Structure(format!(
                            "node {} consumes {name}, which is not defined before it",
                            node.id
                        )))
                    }
                }
            }
            let arity_ok = match &node.layer {
                Layer::Input { .. } => idx.is_empty() && i == 0,
                Layer::Concat => idx.len() >= 2,
                _ => idx.len() == 1,
            };
            if !arity_ok {
                return Err(Error::Structure(format!(
                    "node {} ({}) has {} inputs",
                    node.id,
                    node.layer.kind(),
                    idx.len()
                )));
            }
            if index.insert(node.id.clone(), i).is_some() {
                return Err(Error::Structure(format!("duplicate node id {}", node.id)));
            }
            inputs.push(idx);
        }
        if !matches!(nodes.first().map(|n| &n.layer), Some(Layer::Input { .. })) {
            return Err(Error::Structure("first node must be the input".into()));
        }
        if !matches!(nodes.last().map(|n| &n.layer), Some(Layer::Softmax)) {
            return Err(Error::Structure("last node must be a softmax".into()));
        }
        if nodes.iter().filter(|n| matches!(n.layer, Layer::Input { .. } | Layer::Softmax)).count() != 2 {
            return Err(Error::Structure("graph needs exactly one input and one softmax".into()));
        }
        let mut used = vec![false; nodes.len()];
        inputs.iter().flatten().for_each(|&j| used[j] = true);
        if let Some(i) = (0..nodes.len() - 1).find(|&i| !used[i]) {
            return Err(Error::Structure(format!("node {} has no consumer", nodes[i].id)));
        }
        let g = Self {
            nodes,
            index,
            inputs,
            classes,
        };
        let channels = g.channels()?;
        if channels[g.nodes.len() - 1] != classes {
            return Err(Error::Structure(format!(
                "output has {} channels for {classes} classes",
                channels[g.nodes.len() - 1]
            )));
        }
        Ok(g)
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn into_nodes(self) -> Vec<Node> {
        self.nodes
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn in_bands(&self) -> usize {
        match self.nodes[0].layer {
            Layer::Input { bands } => bands,
            _ => unreachable!("validated in from_nodes"),
        }
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn node(&self, id: &str) -> Option<&Node> {
        self.index_of(id).map(|i| &self.nodes[i])
    }

    pub fn input_indices(&self, i: usize) -> &[usize] {
        &self.inputs[i]
    }

    pub fn consumers(&self, i: usize) -> Vec<usize> {
        (0..self.nodes.len()).filter(|&j| self.inputs[j].contains(&i)).collect()
    }

    /// Mutable access to a node's parameters. Shape-changing edits must go
    /// through [`NetGraph::from_nodes`] again.
    pub fn layer_mut(&mut self, i: usize) -> &mut Layer {
        &mut self.nodes[i].layer
    }

    /// Ids of all conv-kind layers in graph order.
    pub fn conv_ids(&self) -> Vec<String> {
        self.nodes.iter().filter(|n| n.layer.conv().is_some()).map(|n| n.id.clone()).collect()
    }

    /// Output channel count of every node.
    pub fn channels(&self) -> Result<Vec<usize>> {
        let mut ch: Vec<usize> = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let ins: Vec<usize> = self.inputs[i].iter().map(|&j| ch[j]).collect();
            let mismatch = |expected: usize| {
                Error::Structure(format!(
                    "node {} expects {expected} input channels, producer gives {}",
                    node.id, ins[0]
                ))
            };
            let c = match &node.layer {
                Layer::Input { bands } => *bands,
                Layer::Conv2d(p) | Layer::ConvTranspose2d(p) => {
                    if ins[0] != p.in_ch {
                        return Err(mismatch(p.in_ch));
                    }
                    if p.weight.len() != p.out_ch * p.kh * p.kw * p.in_ch || p.bias.len() != p.out_ch {
                        return Err(Error::Structure(format!("node {} parameter sizes disagree with its shape", node.id)));
                    }
                    if matches!(node.layer, Layer::ConvTranspose2d(_)) && (p.kh, p.kw) != (2, 2) {
                        return Err(Error::Structure(format!("transposed conv {} must be 2x2", node.id)));
                    }
                    if matches!(node.layer, Layer::Conv2d(_)) && (p.kh % 2 == 0 || p.kw % 2 == 0) {
                        return Err(Error::Structure(format!("conv {} needs an odd kernel", node.id)));
                    }
                    p.out_ch
                }
                Layer::BatchNorm(p) => {
                    if [&p.beta, &p.mean, &p.var].iter().any(|v| v.len() != p.channels()) || p.channels() != ins[0] {
                        return Err(mismatch(p.channels()));
                    }
                    ins[0]
                }
                Layer::DepthwiseNorm(p) => {
                    if p.weight.len() != ins[0] || p.bias.len() != ins[0] {
                        return Err(mismatch(p.weight.len()));
                    }
                    ins[0]
                }
                Layer::Concat => ins.iter().sum(),
                _ => ins[0],
            };
            ch.push(c);
        }
        Ok(ch)
    }

    /// `(h, w, c)` of every node for an `h x w` input.
    pub fn shapes(&self, h: usize, w: usize) -> Result<Vec<(usize, usize, usize)>> {
        let ch = self.channels()?;
        let mut out: Vec<(usize, usize, usize)> = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let first = self.inputs[i].first().map(|&j| out[j]);
            let (sh, sw) = match (&node.layer, first) {
                (Layer::Input { .. }, _) => (h, w),
                (Layer::ConvTranspose2d(_), Some((ph, pw, _))) => (2 * ph, 2 * pw),
                (Layer::MaxPool, Some((ph, pw, _))) => {
                    if ph % 2 != 0 || pw % 2 != 0 || ph == 0 || pw == 0 {
                        return Err(Error::Dimension(format!("{} cannot pool a {ph}x{pw} map", node.id)));
                    }
                    (ph / 2, pw / 2)
                }
                (Layer::Concat, Some((ph, pw, _))) => {
                    for &j in &self.inputs[i] {
                        if (out[j].0, out[j].1) != (ph, pw) {
                            return Err(Error::Dimension(format!(
                                "{} concatenates {}x{} with {}x{}",
                                node.id, ph, pw, out[j].0, out[j].1
                            )));
                        }
                    }
                    (ph, pw)
                }
                (_, Some((ph, pw, _))) => (ph, pw),
                (_, None) => unreachable!("validated in from_nodes"),
            };
            out.push((sh, sw, ch[i]));
        }
        Ok(out)
    }

    /// Spatial multiple the input must satisfy (2^pool levels along the deepest path).
    pub fn spatial_multiple(&self) -> usize {
        let mut level = vec![0u32; self.nodes.len()];
        for i in 1..self.nodes.len() {
            let base = self.inputs[i].iter().map(|&j| level[j]).max().unwrap_or(0);
            level[i] = base + matches!(self.nodes[i].layer, Layer::MaxPool) as u32;
        }
        1 << level.iter().copied().max().unwrap_or(0)
    }

    pub fn param_count(&self) -> usize {
        self.nodes
            .iter()
            .map(|n| match &n.layer {
                Layer::Conv2d(p) | Layer::ConvTranspose2d(p) => p.weight.len() + p.bias.len(),
                Layer::BatchNorm(p) => 4 * p.channels(),
                Layer::DepthwiseNorm(p) => 2 * p.weight.len(),
                _ => 0,
            })
            .sum()
    }

    /// Inserts the per-band affine normalization right after the input.
    pub fn fuse_symmetric_norm(&self, p: &NormalizationParams) -> Result<NetGraph> {
        if self.nodes.iter().any(|n| matches!(n.layer, Layer::DepthwiseNorm(_))) {
            return Err(Error::Structure("graph already contains a depthwise normalization".into()));
        }
        if p.min.len() != self.in_bands() || p.max.len() != self.in_bands() {
            return Err(Error::Dimension(format!(
                "normalization for {} bands, graph input has {}",
                p.min.len(),
                self.in_bands()
            )));
        }
        let layer = Layer::DepthwiseNorm(p.depthwise()?);
        let input_id = self.nodes[0].id.clone();
        let mut id = "norm".to_string();
        while self.index.contains_key(&id) {
            id.push('_');
        }
        let mut nodes = Vec::with_capacity(self.nodes.len() + 1);
        nodes.push(self.nodes[0].clone());
        nodes.push(Node {
            id: id.clone(),
            layer,
            inputs: vec![input_id.clone()],
        });
        for node in &self.nodes[1..] {
            let mut n = node.clone();
            n.inputs.iter_mut().filter(|s| **s == input_id).for_each(|s| *s = id.clone());
            nodes.push(n);
        }
        NetGraph::from_nodes(nodes, self.classes)
    }
}

/// The `min_i`, `max_i` of the symmetric normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizationParams {
    pub min: Vec<f32>,
    pub max: Vec<f32>,
}

impl NormalizationParams {
    pub fn from_stats(stats: &ChannelStats) -> Self {
        Self {
            min: stats.min.clone(),
            max: stats.max.clone(),
        }
    }

    /// `w = 2 / (max - min)`, `b = 2 min / (min - max) - 1`.
    pub fn depthwise(&self) -> Result<DepthwiseParams> {
        let mut weight = Vec::with_capacity(self.min.len());
        let mut bias = Vec::with_capacity(self.min.len());
        for (b, (&lo, &hi)) in self.min.iter().zip(&self.max).enumerate() {
            if !(hi > lo) {
                return Err(Error::DegenerateChannel { band: b, value: lo });
            }
            let (lo, hi) = (lo as f64, hi as f64);
            weight.push((2.0 / (hi - lo)) as f32);
            bias.push((2.0 * lo / (lo - hi) - 1.0) as f32);
        }
        Ok(DepthwiseParams { weight, bias })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnetConfig {
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default = "default_filters")]
    pub init_filters: usize,
    #[serde(default = "default_bands")]
    pub in_bands: usize,
    #[serde(default = "default_classes")]
    pub classes: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f32,
}

fn default_depth() -> usize {
    5
}
fn default_filters() -> usize {
    32
}
fn default_bands() -> usize {
    25
}
fn default_classes() -> usize {
    5
}
fn default_dropout() -> f32 {
    0.2
}

impl Default for UnetConfig {
    fn default() -> Self {
        Self {
            depth: default_depth(),
            init_filters: default_filters(),
            in_bands: default_bands(),
            classes: default_classes(),
            dropout: default_dropout(),
        }
    }
}

fn glorot(rng: &mut ChaCha8Rng, o: usize, ic: usize, kh: usize, kw: usize) -> ConvParams {
    let fan_in = (kh * kw * ic) as f64;
    let fan_out = (kh * kw * o) as f64;
    let limit = (6.0 / (fan_in + fan_out)).sqrt() as f32;
    let dist = Uniform::new_inclusive(-limit, limit).expect("finite Glorot limit");
    ConvParams {
        out_ch: o,
        in_ch: ic,
        kh,
        kw,
        weight: (0..o * kh * kw * ic).map(|_| dist.sample(rng)).collect(),
        bias: vec![0.0; o],
    }
}

/// Standard U-Net with `depth` pooling levels. Convs are numbered
/// `cnv_0..` in execution order, transposed convs `cnv_tr_0..` from the
/// deepest level up, and the 1x1 classifier is `cnv_out`.
pub fn build_unet(cfg: &UnetConfig, seed: u64) -> Result<NetGraph> {
    if cfg.depth < 1 || cfg.init_filters < 1 || cfg.in_bands < 1 || cfg.classes < 1 {
        return Err(Error::InvalidArgument(format!("invalid U-Net configuration {cfg:?}")));
    }
    if !(0.0..1.0).contains(&cfg.dropout) {
        return Err(Error::InvalidArgument(format!("dropout rate {} outside [0, 1)", cfg.dropout)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut nodes = vec![Node::new("input", Layer::Input { bands: cfg.in_bands }, &[])];
    let mut conv = 0usize;
    let mut block = |nodes: &mut Vec<Node>, rng: &mut ChaCha8Rng, from: String, ic: usize, o: usize| -> String {
        let c = conv;
        conv += 1;
        nodes.push(Node::new(format!("cnv_{c}"), Layer::Conv2d(glorot(rng, o, ic, 3, 3)), &[&from]));
        nodes.push(Node::new(format!("bn_{c}"), Layer::BatchNorm(BatchNormParams::identity(o)), &[&format!("cnv_{c}")]));
        nodes.push(Node::new(format!("relu_{c}"), Layer::Relu, &[&format!("bn_{c}")]));
        format!("relu_{c}")
    };

    let mut skips = Vec::new();
    let mut last = "input".to_string();
    let mut ch = cfg.in_bands;
    for level in 0..=cfg.depth {
        if level > 0 {
            let id = format!("pool_{level}");
            nodes.push(Node::new(&id, Layer::MaxPool, &[&last]));
            last = id;
        }
        let f = cfg.init_filters << level;
        last = block(&mut nodes, &mut rng, last, ch, f);
        last = block(&mut nodes, &mut rng, last, f, f);
        ch = f;
        if level < cfg.depth {
            skips.push((last.clone(), f));
            let id = format!("drop_{level}");
            nodes.push(Node::new(&id, Layer::Dropout { rate: cfg.dropout }, &[&last]));
            last = id;
        }
    }
    for k in 0..cfg.depth {
        let (skip, f) = skips.pop().expect("one skip per encoder level");
        let tr = format!("cnv_tr_{k}");
        nodes.push(Node::new(&tr, Layer::ConvTranspose2d(glorot(&mut rng, f, ch, 2, 2)), &[&last]));
        let cat = format!("concat_{k}");
        nodes.push(Node::new(&cat, Layer::Concat, &[&tr, &skip]));
        last = block(&mut nodes, &mut rng, cat, 2 * f, f);
        last = block(&mut nodes, &mut rng, last, f, f);
        ch = f;
    }
    nodes.push(Node::new("cnv_out", Layer::Conv2d(glorot(&mut rng, cfg.classes, ch, 1, 1)), &[&last]));
    nodes.push(Node::new("softmax", Layer::Softmax, &["cnv_out"]));
    NetGraph::from_nodes(nodes, cfg.classes)
}

// ---------------------------------------------------------------------------
// Model directory: `graph` (TOML manifest) + `weights.bin`.

const MANIFEST_FORMAT: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: u32,
    classes: usize,
    node: Vec<NodeEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeEntry {
    id: String,
    kind: String,
    inputs: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    channels: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    out_ch: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    in_ch: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    kernel: Option<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    eps: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rate: Option<f32>,
}

fn entry_for(node: &Node) -> NodeEntry {
    let mut e = NodeEntry {
        id: node.id.clone(),
        kind: node.layer.kind().to_string(),
        inputs: node.inputs.clone(),
        channels: None,
        out_ch: None,
        in_ch: None,
        kernel: None,
        eps: None,
        rate: None,
    };
    match &node.layer {
        Layer::Input { bands } => e.channels = Some(*bands),
        Layer::Conv2d(p) | Layer::ConvTranspose2d(p) => {
            e.out_ch = Some(p.out_ch);
            e.in_ch = Some(p.in_ch);
            e.kernel = Some([p.kh, p.kw]);
        }
        Layer::BatchNorm(p) => {
            e.channels = Some(p.channels());
            e.eps = Some(p.eps);
        }
        Layer::DepthwiseNorm(p) => e.channels = Some(p.weight.len()),
        Layer::Dropout { rate } => e.rate = Some(*rate),
        Layer::Relu | Layer::MaxPool | Layer::Concat | Layer::Softmax => {}
    }
    e
}

fn tensors_of(layer: &Layer) -> Vec<&[f32]> {
    match layer {
        Layer::Conv2d(p) | Layer::ConvTranspose2d(p) => vec![&p.weight, &p.bias],
        Layer::BatchNorm(p) => vec![&p.gamma, &p.beta, &p.mean, &p.var],
        Layer::DepthwiseNorm(p) => vec![&p.weight, &p.bias],
        _ => vec![],
    }
}

pub fn save(g: &NetGraph, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = Manifest {
        format: MANIFEST_FORMAT,
        classes: g.classes,
        node: g.nodes.iter().map(entry_for).collect(),
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::parse("graph", e.to_string()))?;
    let mut blob = Vec::new();
    for node in &g.nodes {
        for t in tensors_of(&node.layer) {
            blob.extend_from_slice(&(t.len() as u64).to_le_bytes());
            t.iter().for_each(|v| blob.extend_from_slice(&v.to_le_bytes()));
        }
    }
    let gp = dir.join("graph");
    fs::write(&gp, text).map_err(|e| Error::io(&gp, e))?;
    let wp = dir.join("weights.bin");
    fs::write(&wp, blob).map_err(|e| Error::io(&wp, e))
}

struct BlobReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: String,
}

impl BlobReader<'_> {
    fn tensor(&mut self, layer: &str, expected: usize) -> Result<Vec<f32>> {
        let loc = || format!("{} (layer {layer}, byte {})", self.path, self.pos);
        let head = self
            .bytes
            .get(self.pos..self.pos + 8)
            .ok_or_else(|| Error::parse(loc(), "truncated element count"))?;
        let n = u64::from_le_bytes(head.try_into().expect("8 bytes"));
        if n != expected as u64 {
            return Err(Error::parse(loc(), format!("manifest expects {expected} values, blob holds {n}")));
        }
        let start = self.pos + 8;
        let end = expected
            .checked_mul(4)
            .and_then(|b| b.checked_add(start))
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::parse(loc(), "truncated tensor data"))?;
        let out = self.bytes[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        self.pos = end;
        Ok(out)
    }
}

fn required<T: Copy>(v: Option<T>, id: &str, field: &str) -> Result<T> {
    v.ok_or_else(|| Error::parse(format!("graph: node {id}"), format!("missing field `{field}`")))
}

pub fn load(dir: &Path) -> Result<NetGraph> {
    let gp = dir.join("graph");
    let text = fs::read_to_string(&gp).map_err(|e| Error::io(&gp, e))?;
    let manifest: Manifest = toml::from_str(&text).map_err(|e| Error::parse(gp.display().to_string(), e.to_string()))?;
    if manifest.format != MANIFEST_FORMAT {
        return Err(Error::parse(gp.display().to_string(), format!("unsupported format {}", manifest.format)));
    }
    let wp = dir.join("weights.bin");
    let bytes = fs::read(&wp).map_err(|e| Error::io(&wp, e))?;
    let mut blob = BlobReader {
        bytes: &bytes,
        pos: 0,
        path: wp.display().to_string(),
    };
    let mut nodes = Vec::with_capacity(manifest.node.len());
    for e in manifest.node {
        let id = e.id.as_str();
        let layer = match e.kind.as_str() {
            "input" => Layer::Input {
                bands: required(e.channels, id, "channels")?,
            },
            "conv2d" | "conv_transpose2d" => {
                let (o, ic) = (required(e.out_ch, id, "out_ch")?, required(e.in_ch, id, "in_ch")?);
                let [kh, kw] = required(e.kernel, id, "kernel")?;
                let len = o
                    .checked_mul(ic)
                    .and_then(|v| v.checked_mul(kh))
                    .and_then(|v| v.checked_mul(kw))
                    .ok_or_else(|| Error::parse(format!("graph: node {id}"), "weight shape overflows"))?;
                let p = ConvParams {
                    out_ch: o,
                    in_ch: ic,
                    kh,
                    kw,
                    weight: blob.tensor(id, len)?,
                    bias: blob.tensor(id, o)?,
                };
                if e.kind == "conv2d" {
                    Layer::Conv2d(p)
                } else {
                    Layer::ConvTranspose2d(p)
                }
            }
            "batch_norm" => {
                let c = required(e.channels, id, "channels")?;
                Layer::BatchNorm(BatchNormParams {
                    gamma: blob.tensor(id, c)?,
                    beta: blob.tensor(id, c)?,
                    mean: blob.tensor(id, c)?,
                    var: blob.tensor(id, c)?,
                    eps: required(e.eps, id, "eps")?,
                })
            }
            "depthwise_norm" => {
                let c = required(e.channels, id, "channels")?;
                Layer::DepthwiseNorm(DepthwiseParams {
                    weight: blob.tensor(id, c)?,
                    bias: blob.tensor(id, c)?,
                })
            }
            "relu" => Layer::Relu,
            "max_pool" => Layer::MaxPool,
            "dropout" => Layer::Dropout {
                rate: required(e.rate, id, "rate")?,
            },
            "concat" => Layer::Concat,
            "softmax" => Layer::Softmax,
            other => return Err(Error::parse(format!("graph: node {id}"), format!("unknown kind `{other}`"))),
        };
        nodes.push(Node {
            id: e.id,
            layer,
            inputs: e.inputs,
        });
    }
    if blob.pos != bytes.len() {
        return Err(Error::parse(
            blob.path.clone(),
            format!("{} trailing bytes after the last layer", bytes.len() - blob.pos),
        ));
    }
    NetGraph::from_nodes(nodes, manifest.classes)
}

impl NetGraph {
    /// Bitwise comparison of structure and every parameter.
    pub fn bitwise_eq(&self, other: &NetGraph) -> bool {
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        self.classes == other.classes
            && self.nodes.len() == other.nodes.len()
            && self.nodes.iter().zip(&other.nodes).all(|(a, b)| {
                a.id == b.id
                    && a.inputs == b.inputs
                    && a.layer.kind() == b.layer.kind()
                    && entry_eq(&entry_for(a), &entry_for(b))
                    && tensors_of(&a.layer).iter().map(|t| bits(t)).eq(tensors_of(&b.layer).iter().map(|t| bits(t)))
            })
    }

    /// Nearest producer of node `i` (or `i` itself) that is not channelwise.
    pub fn channel_source(&self, mut i: usize) -> usize {
        while self.nodes[i].layer.is_channelwise() {
            i = self.inputs[i][0];
        }
        i
    }

    pub fn ids(&self) -> HashSet<&str> {
        self.nodes.iter().map(|n| n.id.as_str()).collect()
    }
}

fn entry_eq(a: &NodeEntry, b: &NodeEntry) -> bool {
    a.channels == b.channels
        && a.out_ch == b.out_ch
        && a.in_ch == b.in_ch
        && a.kernel == b.kernel
        && a.eps.map(f32::to_bits) == b.eps.map(f32::to_bits)
        && a.rate.map(f32::to_bits) == b.rate.map(f32::to_bits)
}

#[cfg(test)]
mod tests;
