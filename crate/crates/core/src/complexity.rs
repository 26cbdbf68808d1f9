//! Static per-layer FLOPS and parameter counts.
//!
//! Only convolutions are counted: `o_h * o_w * o_f * k_h * k_w * i_c` MACs at
//! 2 FLOPS each, a quarter of that for the stride-2 transposed convolutions
//! (each output pixel sees one kernel tap per input channel). Parameters are
//! `o_f * k_h * k_w * i_c`; bias, BN, pooling and softmax are left out of both
//! totals and reported separately by [`exact_extra_ops`].

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::netgraph::{Layer, NetGraph};

pub const MIB: f64 = 1024.0 * 1024.0;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerRecord {
    pub id: String,
    pub kind: &'static str,
    pub o_h: usize,
    pub o_w: usize,
    pub o_f: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub i_c: usize,
    pub flops: u64,
    pub params: u64,
    /// Input channels split by the conv that produced them (`None` for the
    /// network input), in channel order.
    pub input_groups: Vec<(Option<String>, usize)>,
}

impl LayerRecord {
    pub fn is_conv(&self) -> bool {
        matches!(self.kind, "conv2d" | "conv_transpose2d")
    }
}

/// Conv-only FLOPS of one record with explicit output filters and input channels.
pub fn conv_flops(kind: &str, o_h: usize, o_w: usize, o_f: usize, k_h: usize, k_w: usize, i_c: usize) -> u64 {
    let full = 2 * (o_h * o_w * o_f * k_h * k_w * i_c) as u64;
    match kind {
        "conv2d" => full,
        "conv_transpose2d" => full / 4,
        _ => 0,
    }
}

pub fn layer_flops(r: &LayerRecord) -> u64 {
    conv_flops(r.kind, r.o_h, r.o_w, r.o_f, r.k_h, r.k_w, r.i_c)
}

pub fn layer_params(r: &LayerRecord) -> u64 {
    if r.is_conv() {
        (r.o_f * r.k_h * r.k_w * r.i_c) as u64
    } else {
        0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComplexityReport {
    pub input: (usize, usize, usize),
    /// One record per graph node, in graph order.
    pub records: Vec<LayerRecord>,
    pub total_flops: u64,
    pub total_params: u64,
}

impl ComplexityReport {
    pub fn size_bytes_f32(&self) -> u64 {
        self.total_params * 4
    }

    pub fn size_bytes_int8(&self) -> u64 {
        self.total_params
    }

    pub fn record(&self, id: &str) -> Option<&LayerRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn conv_records(&self) -> impl Iterator<Item = &LayerRecord> {
        self.records.iter().filter(|r| r.is_conv())
    }

    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<10} {:<17} {:>5} {:>5} {:>5} {:>3} {:>3} {:>5} {:>16} {:>12} {:>6}",
            "layer", "kind", "o_h", "o_w", "o_f", "k_h", "k_w", "i_c", "FLOPS", "params", "%FLOPS"
        );
        for r in self.conv_records() {
            let _ = writeln!(
                out,
                "{:<10} {:<17} {:>5} {:>5} {:>5} {:>3} {:>3} {:>5} {:>16} {:>12} {:>6.2}",
                r.id,
                r.kind,
                r.o_h,
                r.o_w,
                r.o_f,
                r.k_h,
                r.k_w,
                r.i_c,
                r.flops,
                r.params,
                100.0 * r.flops as f64 / self.total_flops.max(1) as f64
            );
        }
        let _ = writeln!(
            out,
            "total: {:.2} GFLOPS, {:.2} M params, {:.2} MiB (f32), {:.2} MiB (int8)",
            self.total_flops as f64 / 1e9,
            self.total_params as f64 / 1e6,
            self.size_bytes_f32() as f64 / MIB,
            self.size_bytes_int8() as f64 / MIB
        );
        out
    }

    /// One comma-separated record per conv layer, header first.
    pub fn records_text(&self) -> String {
        let mut out = String::from("id,kind,o_h,o_w,o_f,k_h,k_w,i_c,flops,params\n");
        for r in self.conv_records() {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                r.id, r.kind, r.o_h, r.o_w, r.o_f, r.k_h, r.k_w, r.i_c, r.flops, r.params
            );
        }
        out
    }
}

/// Channel groups feeding node `i`, tracing back through channelwise layers
/// and concatenations to the producing convs.
pub fn channel_groups(g: &NetGraph, i: usize) -> Vec<(Option<usize>, usize)> {
    let s = g.channel_source(i);
    match &g.nodes()[s].layer {
        Layer::Conv2d(p) | Layer::ConvTranspose2d(p) => vec![(Some(s), p.out_ch)],
        Layer::Concat => g.input_indices(s).iter().flat_map(|&j| channel_groups(g, j)).collect(),
        Layer::Input { bands } => vec![(None, *bands)],
        other => unreachable!("{} is not a channel source", other.kind()),
    }
}

pub fn analyze(g: &NetGraph, input: (usize, usize, usize)) -> Result<ComplexityReport> {
    let (h, w, c) = input;
    if c != g.in_bands() {
        return Err(Error::Dimension(format!("input has {c} bands, network expects {}", g.in_bands())));
    }
    let shapes = g.shapes(h, w)?;
    let mut records = Vec::with_capacity(g.nodes().len());
    for (i, node) in g.nodes().iter().enumerate() {
        let (o_h, o_w, o_f) = shapes[i];
        let (k_h, k_w, i_c, groups) = match node.layer.conv() {
            Some(p) => {
                let groups = channel_groups(g, g.input_indices(i)[0])
                    .into_iter()
                    .map(|(s, n)| (s.map(|s| g.nodes()[s].id.clone()), n))
                    .collect();
                (p.kh, p.kw, p.in_ch, groups)
            }
            None => (0, 0, 0, Vec::new()),
        };
        let mut r = LayerRecord {
            id: node.id.clone(),
            kind: node.layer.kind(),
            o_h,
            o_w,
            o_f,
            k_h,
            k_w,
            i_c,
            flops: 0,
            params: 0,
            input_groups: groups,
        };
        r.flops = layer_flops(&r);
        r.params = layer_params(&r);
        records.push(r);
    }
    Ok(ComplexityReport {
        input,
        total_flops: records.iter().map(|r| r.flops).sum(),
        total_params: records.iter().map(|r| r.params).sum(),
        records,
    })
}

/// Operations the conv-only totals leave out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ExtraOps {
    pub bias_flops: u64,
    pub batch_norm_flops: u64,
    pub normalization_flops: u64,
    pub relu_ops: u64,
    pub pool_ops: u64,
    pub softmax_ops: u64,
    /// Bias, BN and depthwise-normalization parameters.
    pub extra_params: u64,
}

impl ExtraOps {
    pub fn total_ops(&self) -> u64 {
        self.bias_flops + self.batch_norm_flops + self.normalization_flops + self.relu_ops + self.pool_ops + self.softmax_ops
    }
}

/// Counts per output element: bias add 1, inference BN 2 (scale and shift),
/// depthwise normalization 2, ReLU 1 compare, 2x2 max pool 3 compares,
/// softmax 3 per class (exp, accumulate, divide).
pub fn exact_extra_ops(g: &NetGraph, input: (usize, usize, usize)) -> Result<ExtraOps> {
    let shapes = g.shapes(input.0, input.1)?;
    let mut ops = ExtraOps::default();
    for (i, node) in g.nodes().iter().enumerate() {
        let (h, w, c) = shapes[i];
        let elems = (h * w * c) as u64;
        match &node.layer {
            Layer::Conv2d(p) | Layer::ConvTranspose2d(p) => {
                ops.bias_flops += elems;
                ops.extra_params += p.out_ch as u64;
            }
            Layer::BatchNorm(p) => {
                ops.batch_norm_flops += 2 * elems;
                ops.extra_params += 4 * p.channels() as u64;
            }
            Layer::DepthwiseNorm(p) => {
                ops.normalization_flops += 2 * elems;
                ops.extra_params += 2 * p.weight.len() as u64;
            }
            Layer::Relu => ops.relu_ops += elems,
            Layer::MaxPool => ops.pool_ops += 3 * elems,
            Layer::Softmax => ops.softmax_ops += 3 * elems,
            Layer::Input { .. } | Layer::Dropout { .. } | Layer::Concat => {}
        }
    }
    Ok(ops)
}
