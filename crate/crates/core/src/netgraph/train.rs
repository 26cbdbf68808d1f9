//! Mini-batch training with Adam and early stopping on validation wIoU.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::exec::{argmax_labels, Gradients, TrainPass};
use super::kernels::FeatureMap;
use super::{Layer, NetGraph};
use crate::error::{Error, Result};
use crate::metrics::ConfusionMatrix;
use crate::tensor::{Layout, Tensor};

/// A network-ready BIP cube with one label per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledCube {
    pub cube: Tensor,
    pub labels: Vec<u8>,
}

fn d_epochs() -> usize {
    200
}
fn d_batch() -> usize {
    30
}
fn d_lr() -> f32 {
    1e-3
}
fn d_patience() -> usize {
    20
}
fn d_momentum() -> f32 {
    0.1
}
fn d_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_lr")]
    pub lr: f32,
    /// Epochs without validation improvement before stopping.
    #[serde(default = "d_patience")]
    pub patience: usize,
    /// Weight of the newest batch in the BN running statistics.
    #[serde(default = "d_momentum")]
    pub bn_momentum: f32,
    #[serde(default = "d_true")]
    pub dropout: bool,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: d_epochs(),
            batch_size: d_batch(),
            lr: d_lr(),
            patience: d_patience(),
            bn_momentum: d_momentum(),
            dropout: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub val_giou: f64,
    pub val_wiou: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    /// Epoch whose weights were kept; `None` when no epoch ran.
    pub best_epoch: Option<usize>,
}

pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    t: i32,
    state: Vec<Option<[Vec<f32>; 4]>>,
}

impl Adam {
    pub fn new(g: &NetGraph, lr: f32) -> Self {
        let state = g
            .nodes()
            .iter()
            .map(|n| {
                n.layer.trainable().map(|(a, b)| {
                    [vec![0.0; a.len()], vec![0.0; a.len()], vec![0.0; b.len()], vec![0.0; b.len()]]
                })
            })
            .collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-7,
            t: 0,
            state,
        }
    }

    pub fn step(&mut self, g: &mut NetGraph, grads: &Gradients<f32>) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let update = |p: &mut [f32], g: &[f32], m: &mut [f32], v: &mut [f32]| {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        };
        for (i, slot) in self.state.iter_mut().enumerate() {
            let (Some([ma, va, mb, vb]), Some(gr)) = (slot.as_mut(), grads.nodes[i].as_ref()) else { continue };
            let (pa, pb) = g.layer_mut(i).trainable_mut().expect("state exists only for trainable layers");
            update(pa, &gr.a, ma, va);
            update(pb, &gr.b, mb, vb);
        }
    }
}

/// Stacks same-sized cubes into one batch plus concatenated labels.
pub(crate) fn stack(set: &[LabeledCube], idx: &[usize]) -> Result<(FeatureMap<f32>, Vec<u8>)> {
    let first = &set[idx[0]].cube;
    let (h, w, c) = (first.height(), first.width(), first.bands());
    let mut data = Vec::with_capacity(idx.len() * h * w * c);
    let mut labels = Vec::with_capacity(idx.len() * h * w);
    for &i in idx {
        let s = &set[i];
        s.cube.expect_layout("training batch", Layout::Bip)?;
        if (s.cube.height(), s.cube.width(), s.cube.bands()) != (h, w, c) {
            return Err(Error::Dimension(format!(
                "sample {i} is {}x{}x{}, batch is {h}x{w}x{c}",
                s.cube.height(),
                s.cube.width(),
                s.cube.bands()
            )));
        }
        if s.labels.len() != h * w {
            return Err(Error::Dimension(format!("sample {i} has {} labels for {} pixels", s.labels.len(), h * w)));
        }
        data.extend_from_slice(s.cube.as_f32()?);
        labels.extend_from_slice(&s.labels);
    }
    Ok((
        FeatureMap {
            n: idx.len(),
            h,
            w,
            c,
            data,
        },
        labels,
    ))
}

const EVAL_BATCH: usize = 16;

/// Argmax label maps for every cube of `set`.
pub fn predict_set(g: &NetGraph, set: &[LabeledCube]) -> Result<Vec<Vec<u8>>> {
    let mut out = Vec::with_capacity(set.len());
    let idx: Vec<usize> = (0..set.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, _) = stack(set, chunk)?;
        let px = x.h * x.w;
        let labels = argmax_labels(&g.forward_map(x)?);
        out.extend(labels.chunks(px).map(|l| l.to_vec()));
    }
    Ok(out)
}

pub fn evaluate(g: &NetGraph, set: &[LabeledCube]) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(g.classes());
    for (pred, s) in predict_set(g, set)?.iter().zip(set) {
        cm.add(pred, &s.labels)?;
    }
    Ok(cm)
}

fn update_running_stats(g: &mut NetGraph, grads: &Gradients<f32>, momentum: f32, pixels: usize) {
    let unbias = if pixels > 1 { pixels as f64 / (pixels - 1) as f64 } else { 1.0 };
    let m = momentum as f64;
    for (i, stats) in grads.bn_stats.iter().enumerate() {
        let Some((mean, var)) = stats else { continue };
        if let Layer::BatchNorm(p) = g.layer_mut(i) {
            for c in 0..p.channels() {
                p.mean[c] = ((1.0 - m) * p.mean[c] as f64 + m * mean[c]) as f32;
                p.var[c] = ((1.0 - m) * p.var[c] as f64 + m * var[c] * unbias) as f32;
            }
        }
    }
}

/// Trains in place and leaves the best-validation weights in `g`.
pub fn train(g: &mut NetGraph, train_set: &[LabeledCube], val_set: &[LabeledCube], cfg: &TrainConfig) -> Result<TrainHistory> {
    let mut history = TrainHistory::default();
    if cfg.epochs == 0 {
        return Ok(history);
    }
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Empty("training needs non-empty train and validation sets".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(g, cfg.lr);
    let mut best: Option<(f64, NetGraph)> = None;
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let (x, labels) = stack(train_set, chunk)?;
            let pixels = x.pixels();
            let pass = TrainPass {
                dropout_seed: rng.random(),
                dropout: cfg.dropout,
            };
            let grads = match g.loss_and_grads(x, &labels, pass) {
                Ok(gr) => gr,
                Err(Error::Empty(_)) => continue,
                Err(e) => return Err(e),
            };
            adam.step(g, &grads);
            update_running_stats(g, &grads, cfg.bn_momentum, pixels);
            loss_sum += grads.loss;
            batches += 1;
        }
        let loss = if batches > 0 { loss_sum / batches as f64 } else { 0.0 };
        let agg = evaluate(g, val_set)?
            .aggregate()
            .ok_or_else(|| Error::Empty("validation set has no labelled pixels".into()))?;
        history.records.push(EpochRecord {
            epoch,
            loss,
            val_giou: agg.giou,
            val_wiou: agg.wiou,
        });
        if best.as_ref().is_none_or(|(w, _)| agg.wiou > *w) {
            best = Some((agg.wiou, g.clone()));
            history.best_epoch = Some(epoch);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    if let Some((_, b)) = best {
        *g = b;
    }
    Ok(history)
}
