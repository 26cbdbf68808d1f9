//! Graph execution: inference (optionally hooked), and the tape-based
//! training pass with reverse-mode gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels::{self, BnCache, FeatureMap, Real};
use super::{Layer, NetGraph};
use crate::error::{Error, Result};
use crate::tensor::{Layout, Tensor};

/// Gradient of one node's trainable pair: (weight, bias) or (gamma, beta).
#[derive(Debug, Clone)]
pub struct NodeGrad<T> {
    pub a: Vec<T>,
    pub b: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct Gradients<T> {
    pub loss: f64,
    /// Indexed like the graph's nodes.
    pub nodes: Vec<Option<NodeGrad<T>>>,
    /// Batch `(mean, biased variance)` observed by each BN node.
    pub bn_stats: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

/// Options of a training-mode pass.
#[derive(Debug, Clone, Copy)]
pub struct TrainPass {
    /// Dropout masks are drawn from this seed (and the node index), so two
    /// passes with the same seed see identical masks.
    pub dropout_seed: u64,
    pub dropout: bool,
}

enum Aux<T> {
    None,
    Bn(BnCache<T>),
    Pool(Vec<u8>),
    Drop(Vec<T>),
}

/// Per-pixel argmax (lowest class index wins ties).
pub fn argmax_labels<T: Real>(probs: &FeatureMap<T>) -> Vec<u8> {
    probs
        .data
        .chunks_exact(probs.c)
        .map(|px| {
            let mut best = 0;
            for (c, &v) in px.iter().enumerate() {
                if v > px[best] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}

fn dropout_mask<T: Real>(seed: u64, node: usize, len: usize, rate: f32) -> Vec<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (node as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let keep = T::from_f64(1.0 / (1.0 - rate as f64));
    (0..len)
        .map(|_| if rng.random::<f32>() < rate { T::ZERO } else { keep })
        .collect()
}

impl NetGraph {
    fn check_input<T: Real>(&self, x: &FeatureMap<T>) -> Result<()> {
        if x.c != self.in_bands() {
            return Err(Error::Dimension(format!(
                "input has {} bands, network expects {}",
                x.c,
                self.in_bands()
            )));
        }
        if x.data.len() != x.n * x.h * x.w * x.c {
            return Err(Error::Dimension("feature map buffer size disagrees with its shape".into()));
        }
        self.shapes(x.h, x.w).map(|_| ())
    }

    fn last_uses(&self) -> Vec<usize> {
        let mut last = vec![0usize; self.nodes.len()];
        for i in 0..self.nodes.len() {
            for &j in &self.inputs[i] {
                last[j] = i;
            }
        }
        last
    }

    fn eval_node<T: Real>(&self, i: usize, ins: &[&FeatureMap<T>]) -> FeatureMap<T> {
        match &self.nodes[i].layer {
            Layer::Input { .. } => unreachable!("input is seeded by the caller"),
            Layer::Conv2d(p) => kernels::conv2d(ins[0], &p.view()),
            Layer::ConvTranspose2d(p) => kernels::conv_transpose2d(ins[0], &p.view()),
            Layer::DepthwiseNorm(p) => kernels::channel_affine(ins[0], &T::cast_slice(&p.weight), &T::cast_slice(&p.bias)),
            Layer::BatchNorm(p) => {
                let (scale, shift) = kernels::bn_coefficients::<T>(&p.gamma, &p.beta, &p.mean, &p.var, p.eps);
                kernels::channel_affine(ins[0], &scale, &shift)
            }
            Layer::Relu => kernels::relu(ins[0]),
            Layer::MaxPool => kernels::max_pool(ins[0]).0,
            Layer::Dropout { .. } => ins[0].clone(),
            Layer::Concat => kernels::concat(ins),
            Layer::Softmax => kernels::softmax(ins[0]),
        }
    }

    /// Inference with a hook that may inspect or rewrite every node's output
    /// (including the input node) before consumers see it.
    pub fn forward_hooked<T: Real>(
        &self,
        x: FeatureMap<T>,
        hook: &mut dyn FnMut(usize, &mut FeatureMap<T>) -> Result<()>,
    ) -> Result<FeatureMap<T>> {
        self.check_input(&x)?;
        let last = self.last_uses();
        let n = self.nodes.len();
        let mut values: Vec<Option<FeatureMap<T>>> = (0..n).map(|_| None).collect();
        let mut x = x;
        hook(0, &mut x)?;
        values[0] = Some(x);
        for i in 1..n {
            let ins: Vec<&FeatureMap<T>> = self.inputs[i]
                .iter()
                .map(|&j| values[j].as_ref().expect("producer evaluated earlier"))
                .collect();
            let mut out = self.eval_node(i, &ins);
            hook(i, &mut out)?;
            values[i] = Some(out);
            for &j in &self.inputs[i] {
                if last[j] == i {
                    values[j] = None;
                }
            }
        }
        Ok(values[n - 1].take().expect("softmax output"))
    }

    pub fn forward_map<T: Real>(&self, x: FeatureMap<T>) -> Result<FeatureMap<T>> {
        self.forward_hooked(x, &mut |_, _| Ok(()))
    }

    /// Class probabilities for one BIP cube, as an `H x W x classes` BIP tensor.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let out = self.forward_map(cube_to_map(x)?)?;
        Tensor::from_f32(out.h, out.w, out.c, Layout::Bip, out.data)
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<u8>> {
        Ok(argmax_labels(&self.forward_map(cube_to_map(x)?)?))
    }

    /// Training-mode pass: batch-statistics BN, optional dropout, pixelwise
    /// cross-entropy on the softmax input. `labels` holds one class id per
    /// pixel of the batch; the value `classes` marks ignored pixels.
    pub fn loss_and_grads<T: Real>(&self, x: FeatureMap<T>, labels: &[u8], pass: TrainPass) -> Result<Gradients<T>> {
        self.check_input(&x)?;
        if labels.len() != x.pixels() {
            return Err(Error::Dimension(format!(
                "{} labels for {} pixels",
                labels.len(),
                x.pixels()
            )));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l as usize > self.classes) {
            return Err(Error::Label(format!("pixel {i} has label {l} with {} classes", self.classes)));
        }
        let n = self.nodes.len();
        let mut outs: Vec<FeatureMap<T>> = Vec::with_capacity(n);
        let mut aux: Vec<Aux<T>> = Vec::with_capacity(n);
        outs.push(x);
        aux.push(Aux::None);
        for i in 1..n {
            let ins: Vec<&FeatureMap<T>> = self.inputs[i].iter().map(|&j| &outs[j]).collect();
            let (out, a) = match &self.nodes[i].layer {
                Layer::BatchNorm(p) => {
                    let (o, cache) = kernels::batch_norm_train(ins[0], &T::cast_slice(&p.gamma), &T::cast_slice(&p.beta), p.eps);
                    (o, Aux::Bn(cache))
                }
                Layer::MaxPool => {
                    let (o, arg) = kernels::max_pool(ins[0]);
                    (o, Aux::Pool(arg))
                }
                Layer::Dropout { rate } if pass.dropout && *rate > 0.0 => {
                    let mask = dropout_mask::<T>(pass.dropout_seed, i, ins[0].data.len(), *rate);
                    let mut o = ins[0].clone();
                    o.data.iter_mut().zip(&mask).for_each(|(v, &m)| *v *= m);
                    (o, Aux::Drop(mask))
                }
                // The loss works on logits; the softmax output itself is not needed.
                Layer::Softmax => (FeatureMap::zeros(0, 0, 0, 0), Aux::None),
                _ => (self.eval_node(i, &ins), Aux::None),
            };
            outs.push(out);
            aux.push(a);
        }

        let logits_idx = self.inputs[n - 1][0];
        let (loss, dlogits) =
            kernels::cross_entropy(&outs[logits_idx], labels).ok_or_else(|| Error::Empty("every pixel carries the ignore label".into()))?;
        if !loss.is_finite() {
            return Err(Error::Training(format!("non-finite loss {loss}")));
        }

        let mut grads: Vec<Option<FeatureMap<T>>> = (0..n).map(|_| None).collect();
        let mut node_grads: Vec<Option<NodeGrad<T>>> = (0..n).map(|_| None).collect();
        let mut bn_stats: Vec<Option<(Vec<f64>, Vec<f64>)>> = (0..n).map(|_| None).collect();
        grads[logits_idx] = Some(dlogits);
        for i in (1..n - 1).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let src = self.inputs[i][0];
            let need_dx = !matches!(self.nodes[src].layer, Layer::Input { .. });
            match (&self.nodes[i].layer, &aux[i]) {
                (Layer::Conv2d(p), _) => {
                    let g = kernels::conv2d_backward(&outs[src], &p.view(), &dy, need_dx);
                    if need_dx {
                        accumulate(&mut grads[src], g.dx);
                    }
                    node_grads[i] = Some(NodeGrad { a: g.dw, b: g.db });
                }
                (Layer::ConvTranspose2d(p), _) => {
                    let g = kernels::conv_transpose2d_backward(&outs[src], &p.view(), &dy);
                    accumulate(&mut grads[src], g.dx);
                    node_grads[i] = Some(NodeGrad { a: g.dw, b: g.db });
                }
                (Layer::BatchNorm(p), Aux::Bn(cache)) => {
                    let (dx, dg, db) = kernels::batch_norm_backward(&dy, &T::cast_slice(&p.gamma), cache);
                    accumulate(&mut grads[src], dx);
                    node_grads[i] = Some(NodeGrad { a: dg, b: db });
                    bn_stats[i] = Some((cache.mean.clone(), cache.var.clone()));
                }
                (Layer::DepthwiseNorm(p), _) => {
                    if need_dx {
                        let zero = vec![T::ZERO; p.weight.len()];
                        accumulate(&mut grads[src], kernels::channel_affine(&dy, &T::cast_slice(&p.weight), &zero));
                    }
                }
                (Layer::Relu, _) => accumulate(&mut grads[src], kernels::relu_backward(&outs[i], &dy)),
                (Layer::MaxPool, Aux::Pool(arg)) => {
                    let (ih, iw) = (outs[src].h, outs[src].w);
                    accumulate(&mut grads[src], kernels::max_pool_backward(&dy, arg, ih, iw));
                }
                (Layer::Dropout { .. }, Aux::Drop(mask)) => {
                    let mut dx = dy;
                    dx.data.iter_mut().zip(mask).for_each(|(v, &m)| *v *= m);
                    accumulate(&mut grads[src], dx);
                }
                (Layer::Dropout { .. }, _) => accumulate(&mut grads[src], dy),
                (Layer::Concat, _) => {
                    let widths: Vec<usize> = self.inputs[i].iter().map(|&j| outs[j].c).collect();
                    for (&j, part) in self.inputs[i].iter().zip(kernels::concat_backward(&dy, &widths)) {
                        accumulate(&mut grads[j], part);
                    }
                }
                (layer, _) => unreachable!("no backward rule for {}", layer.kind()),
            }
        }
        Ok(Gradients {
            loss,
            nodes: node_grads,
            bn_stats,
        })
    }
}

fn accumulate<T: Real>(slot: &mut Option<FeatureMap<T>>, g: FeatureMap<T>) {
    match slot {
        Some(acc) => acc.data.iter_mut().zip(&g.data).for_each(|(a, &b)| *a += b),
        None => *slot = Some(g),
    }
}

/// One BIP f32 cube as a single-image feature map.
pub(crate) fn cube_to_map(x: &Tensor) -> Result<FeatureMap<f32>> {
    x.expect_layout("forward", Layout::Bip)?;
    Ok(FeatureMap {
        n: 1,
        h: x.height(),
        w: x.width(),
        c: x.bands(),
        data: x.as_f32()?.to_vec(),
    })
}
