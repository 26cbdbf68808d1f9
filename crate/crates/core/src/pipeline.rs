//! Staged frame pipeline: preprocessing and inference split over 1, 2 or 3
//! worker threads with a two-slot handoff at every stage boundary.
//!
//! Stage A runs loading through band alignment, stage B the final crop,
//! layout conversion and normalization, stage C inference. The 2-stage plan
//! merges A and B. Every step is a pure function of its input, so the plan
//! never changes the output bytes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::ops::Range;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netgraph::NetGraph;
use crate::preprocess::{FloatFrame, Preprocessor, RawFrame};
use crate::quantization::QuantizedModel;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Step {
    Load,
    CropClip,
    Reflectance,
    Demosaic,
    Align,
    CropInterleave,
    Normalize,
    Inference,
}

impl Step {
    pub const ALL: [Step; 8] = [
        Step::Load,
        Step::CropClip,
        Step::Reflectance,
        Step::Demosaic,
        Step::Align,
        Step::CropInterleave,
        Step::Normalize,
        Step::Inference,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Step::Load => "Image loading",
            Step::CropClip => "Cropping and clipping",
            Step::Reflectance => "Reflectance correction",
            Step::Demosaic => "Demosaicing",
            Step::Align => "Spatial bilinear interpolation",
            Step::CropInterleave => "Cropping + BSQ to BIP",
            Step::Normalize => "Clipping + PN",
            Step::Inference => "Inference",
        }
    }
}

/// Logical stage groups A, B, C as step ranges.
const GROUPS: [Range<usize>; 3] = [0..5, 5..7, 7..8];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "usize", into = "usize")]
pub struct StagePlan {
    stages: usize,
}

impl StagePlan {
    pub fn new(stages: usize) -> Result<Self> {
        if !(1..=3).contains(&stages) {
            return Err(Error::InvalidArgument(format!("stage count {stages} not in 1..=3")));
        }
        Ok(Self { stages })
    }

    pub fn stages(self) -> usize {
        self.stages
    }

    /// Step ranges run by each worker; they partition the step list in order.
    pub fn ranges(self) -> Vec<Range<usize>> {
        match self.stages {
            1 => vec![0..8],
            2 => vec![0..7, 7..8],
            _ => GROUPS.to_vec(),
        }
    }

    pub fn stage_of(self, step: usize) -> usize {
        self.ranges().iter().position(|r| r.contains(&step)).expect("ranges cover every step")
    }
}

impl TryFrom<usize> for StagePlan {
    type Error = Error;
    fn try_from(v: usize) -> Result<Self> {
        Self::new(v)
    }
}

impl From<StagePlan> for usize {
    fn from(p: StagePlan) -> usize {
        p.stages
    }
}

/// Anything that maps a network-ready cube to class probabilities.
pub trait Infer: Sync {
    fn infer(&self, cube: &Tensor) -> Result<Tensor>;
}

impl Infer for NetGraph {
    fn infer(&self, cube: &Tensor) -> Result<Tensor> {
        self.forward(cube)
    }
}

impl Infer for QuantizedModel {
    fn infer(&self, cube: &Tensor) -> Result<Tensor> {
        self.forward(cube)
    }
}

/// Source of raw frames; frame `i` of a run is `load(i % len())`.
pub trait FrameSource: Sync {
    fn len(&self) -> usize;
    fn load(&self, i: usize) -> Result<RawFrame>;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl FrameSource for [RawFrame] {
    fn len(&self) -> usize {
        <[RawFrame]>::len(self)
    }
    fn load(&self, i: usize) -> Result<RawFrame> {
        Ok(self[i].clone())
    }
}

impl FrameSource for Vec<RawFrame> {
    fn len(&self) -> usize {
        <[RawFrame]>::len(self)
    }
    fn load(&self, i: usize) -> Result<RawFrame> {
        Ok(self[i].clone())
    }
}

fn d_warmup() -> usize {
    3
}
fn d_repeat() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Leading frames run but left out of the statistics.
    #[serde(default = "d_warmup")]
    pub warmup: usize,
    /// Measured frames.
    #[serde(default = "d_repeat")]
    pub repeat: usize,
    /// Extra sleep per logical stage A, B, C in milliseconds, spent inside the
    /// group's last step.
    #[serde(default)]
    pub delays_ms: [f64; 3],
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            warmup: d_warmup(),
            repeat: d_repeat(),
            delays_ms: [0.0; 3],
        }
    }
}

enum Payload {
    Raw(RawFrame),
    Frame(FloatFrame),
    Cube(Tensor),
}

struct Slots<T> {
    slots: [Option<(usize, T)>; 2],
    write: usize,
    read: usize,
    closed: bool,
    aborted: bool,
}

/// Two dedicated buffers between a producer and its single consumer. The
/// producer fills them alternately and blocks while the next one is still
/// unread; taking a buffer moves it to the consumer.
struct Handoff<T> {
    state: Mutex<Slots<T>>,
    ready: Condvar,
}

impl<T> Handoff<T> {
    fn new() -> Self {
        Self {
            state: Mutex::new(Slots {
                slots: [None, None],
                write: 0,
                read: 0,
                closed: false,
                aborted: false,
            }),
            ready: Condvar::new(),
        }
    }

    /// False once the pipeline was aborted.
    fn put(&self, frame: usize, value: T) -> bool {
        let mut s = self.state.lock().unwrap_or_else(|e| e.into_inner());
        while s.slots[s.write].is_some() && !s.aborted {
            s = self.ready.wait(s).unwrap_or_else(|e| e.into_inner());
        }
        if s.aborted {
            return false;
        }
        let w = s.write;
        s.slots[w] = Some((frame, value));
        s.write ^= 1;
        self.ready.notify_all();
        true
    }

    /// `None` after close (once drained) or abort.
    fn take(&self) -> Option<(usize, T)> {
        let mut s = self.state.lock().unwrap_or_else(|e| e.into_inner());
        loop {
            if s.aborted {
                return None;
            }
            let r = s.read;
            if let Some(v) = s.slots[r].take() {
                s.read ^= 1;
                self.ready.notify_all();
                return Some(v);
            }
            if s.closed {
                return None;
            }
            s = self.ready.wait(s).unwrap_or_else(|e| e.into_inner());
        }
    }

    fn close(&self) {
        self.state.lock().unwrap_or_else(|e| e.into_inner()).closed = true;
        self.ready.notify_all();
    }

    fn abort(&self) {
        self.state.lock().unwrap_or_else(|e| e.into_inner()).aborted = true;
        self.ready.notify_all();
    }
}

struct Ctx<'a> {
    source: &'a dyn FrameSource,
    pre: &'a Preprocessor,
    model: &'a dyn Infer,
    delays: [Duration; 3],
}

impl Ctx<'_> {
    fn run_step(&self, step: usize, frame: usize, input: Option<Payload>) -> Result<Payload> {
        let wrong = || Error::Pipeline {
            frame,
            message: format!("{} received the wrong payload", Step::ALL[step].name()),
        };
        let out = match (Step::ALL[step], input) {
            (Step::Load, _) => Payload::Raw(self.source.load(frame % self.source.len())?),
            (Step::CropClip, Some(Payload::Raw(r))) => Payload::Raw(self.pre.crop_and_clip(&r)?),
            (Step::Reflectance, Some(Payload::Raw(r))) => Payload::Frame(self.pre.reflectance(&r)?),
            (Step::Demosaic, Some(Payload::Frame(f))) => Payload::Cube(self.pre.demosaic(&f)?),
            (Step::Align, Some(Payload::Cube(c))) => Payload::Cube(self.pre.align(&c)?),
            (Step::CropInterleave, Some(Payload::Cube(c))) => Payload::Cube(self.pre.crop_and_interleave(&c)?),
            (Step::Normalize, Some(Payload::Cube(c))) => Payload::Cube(self.pre.normalize(&c)?),
            (Step::Inference, Some(Payload::Cube(c))) => Payload::Cube(self.model.infer(&c)?),
            _ => return Err(wrong()),
        };
        if let Some(g) = GROUPS.iter().position(|r| r.end == step + 1) {
            if !self.delays[g].is_zero() {
                thread::sleep(self.delays[g]);
            }
        }
        Ok(out)
    }

    /// Runs `steps` on one frame, recording each step's duration in ms.
    fn run_range(&self, steps: Range<usize>, frame: usize, mut data: Option<Payload>, times: &mut [Vec<f64>]) -> Result<Payload> {
        for s in steps {
            let t = Instant::now();
            let out = catch_unwind(AssertUnwindSafe(|| self.run_step(s, frame, data.take())))
                .unwrap_or_else(|p| {
                    let message = p
                        .downcast_ref::<&str>()
                        .map(|s| s.to_string())
                        .or_else(|| p.downcast_ref::<String>().cloned())
                        .unwrap_or_else(|| "stage panicked".into());
                    Err(Error::Pipeline { frame, message })
                })
                .map_err(|e| match e {
                    Error::Pipeline { .. } => e,
                    other => Error::Pipeline {
                        frame,
                        message: format!("{}: {other}", Step::ALL[s].name()),
                    },
                })?;
            times[s].push(t.elapsed().as_secs_f64() * 1e3);
            data = Some(out);
        }
        Ok(data.expect("ranges are non-empty"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: Step,
    pub stage: usize,
    pub mean_ms: f64,
    pub std_ms: f64,
}

/// Per-step latency over the measured frames of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageProfile {
    pub stages: usize,
    pub frames: usize,
    pub warmup: usize,
    pub steps: Vec<StepStats>,
    /// Mean busy time per stage.
    pub stage_ms: Vec<f64>,
    pub longest_task_ms: f64,
    /// Measured frames per second; absent for profiles built from given means.
    pub throughput_fps: Option<f64>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

impl StageProfile {
    /// Profile from known per-step means (ms, in step order).
    pub fn from_step_means(plan: StagePlan, means: &[f64; 8]) -> Self {
        let steps: Vec<StepStats> = Step::ALL
            .iter()
            .enumerate()
            .map(|(i, &step)| StepStats {
                step,
                stage: plan.stage_of(i),
                mean_ms: means[i],
                std_ms: 0.0,
            })
            .collect();
        let stage_ms: Vec<f64> = plan.ranges().iter().map(|r| means[r.clone()].iter().sum()).collect();
        Self {
            stages: plan.stages(),
            frames: 1,
            warmup: 0,
            longest_task_ms: stage_ms.iter().copied().fold(0.0, f64::max),
            steps,
            stage_ms,
            throughput_fps: None,
        }
    }

    fn from_times(plan: StagePlan, cfg: &PipelineConfig, times: &[Vec<f64>], throughput: f64) -> Self {
        let measured: Vec<&[f64]> = times.iter().map(|t| &t[cfg.warmup.min(t.len())..]).collect();
        let steps = Step::ALL
            .iter()
            .enumerate()
            .map(|(i, &step)| {
                let (mean_ms, std_ms) = mean_std(measured[i]);
                StepStats {
                    step,
                    stage: plan.stage_of(i),
                    mean_ms,
                    std_ms,
                }
            })
            .collect();
        let stage_ms: Vec<f64> = plan
            .ranges()
            .iter()
            .map(|r| {
                let per_frame: Vec<f64> = (0..cfg.repeat).map(|f| r.clone().map(|s| measured[s][f]).sum()).collect();
                mean_std(&per_frame).0
            })
            .collect();
        Self {
            stages: plan.stages(),
            frames: cfg.repeat,
            warmup: cfg.warmup,
            longest_task_ms: stage_ms.iter().copied().fold(0.0, f64::max),
            steps,
            stage_ms,
            throughput_fps: Some(throughput),
        }
    }

    /// `throughput * longest task`; close to 1 for a saturated pipeline.
    pub fn saturation(&self) -> Option<f64> {
        self.throughput_fps.map(|t| t * self.longest_task_ms / 1e3)
    }

    pub fn to_text(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::parse("stage profile", e.to_string()))
    }
}

/// Runs `cfg.warmup + cfg.repeat` frames through the plan. `sink` receives
/// every output in frame order on the calling thread.
pub fn run_pipeline(
    source: &dyn FrameSource,
    plan: StagePlan,
    pre: &Preprocessor,
    model: &dyn Infer,
    cfg: &PipelineConfig,
    sink: &mut dyn FnMut(usize, Tensor) -> Result<()>,
) -> Result<StageProfile> {
    if cfg.repeat == 0 {
        return Err(Error::Empty("pipeline run needs at least one measured frame".into()));
    }
    if source.is_empty() {
        return Err(Error::Empty("no frames to process".into()));
    }
    if let Some(d) = cfg.delays_ms.iter().find(|d| !(d.is_finite() && **d >= 0.0)) {
        return Err(Error::InvalidArgument(format!("stage delay {d} ms")));
    }
    let total = cfg.warmup + cfg.repeat;
    let ctx = Ctx {
        source,
        pre,
        model,
        delays: cfg.delays_ms.map(|d| Duration::from_secs_f64(d / 1e3)),
    };
    let ranges = plan.ranges();
    let handoffs: Vec<Handoff<Payload>> = ranges.iter().map(|_| Handoff::new()).collect();
    let abort_all = || handoffs.iter().for_each(Handoff::abort);
    let start = Instant::now();
    let mut done = Vec::with_capacity(total);
    let mut first_error: Option<Error> = None;

    let worker_times: Vec<Result<Vec<Vec<f64>>>> = thread::scope(|scope| {
        let workers: Vec<_> = ranges
            .iter()
            .enumerate()
            .map(|(w, range)| {
                let (ctx, handoffs, range) = (&ctx, &handoffs, range.clone());
                let abort_all = &abort_all;
                scope.spawn(move || -> Result<Vec<Vec<f64>>> {
                    let mut times = vec![Vec::with_capacity(total); Step::ALL.len()];
                    let out = &handoffs[w];
                    for i in 0..total {
                        let (frame, input) = if w == 0 {
                            (i, None)
                        } else {
                            match handoffs[w - 1].take() {
                                Some((f, p)) => (f, Some(p)),
                                None => break,
                            }
                        };
                        debug_assert_eq!(frame, i, "frames arrive in order");
                        match ctx.run_range(range.clone(), frame, input, &mut times) {
                            Ok(p) => {
                                if !out.put(frame, p) {
                                    break;
                                }
                            }
                            Err(e) => {
                                abort_all();
                                return Err(e);
                            }
                        }
                    }
                    out.close();
                    Ok(times)
                })
            })
            .collect();

        let last = handoffs.last().expect("at least one stage");
        while let Some((frame, payload)) = last.take() {
            done.push(start.elapsed().as_secs_f64());
            let result = match payload {
                Payload::Cube(t) => sink(frame, t),
                _ => Err(Error::Pipeline {
                    frame,
                    message: "final stage produced no tensor".into(),
                }),
            };
            if let Err(e) = result {
                first_error = Some(e);
                abort_all();
                break;
            }
        }
        workers
            .into_iter()
            .map(|h| {
                h.join().unwrap_or_else(|_| {
                    Err(Error::Pipeline {
                        frame: 0,
                        message: "worker thread panicked".into(),
                    })
                })
            })
            .collect()
    });

    let mut per_worker = Vec::with_capacity(worker_times.len());
    for r in worker_times {
        match r {
            Ok(t) => per_worker.push(t),
            Err(e) => {
                first_error.get_or_insert(e);
            }
        }
    }
    if let Some(e) = first_error {
        return Err(e);
    }
    if done.len() != total {
        return Err(Error::Pipeline {
            frame: done.len(),
            message: format!("{} of {total} frames completed", done.len()),
        });
    }
    let mut times = vec![Vec::new(); Step::ALL.len()];
    for (w, range) in ranges.iter().enumerate() {
        for s in range.clone() {
            times[s] = std::mem::take(&mut per_worker[w][s]);
        }
    }
    let t0 = if cfg.warmup > 0 { done[cfg.warmup - 1] } else { 0.0 };
    let span = done[total - 1] - t0;
    let throughput = if span > 0.0 { cfg.repeat as f64 / span } else { f64::INFINITY };
    Ok(StageProfile::from_times(plan, cfg, &times, throughput))
}

/// Table with one row per step, stage subtotals in parentheses on each
/// stage's last step, the longest task and the throughput.
pub fn profile_report(p: &StageProfile) -> Result<String> {
    if p.frames == 0 || p.steps.is_empty() {
        return Err(Error::Empty("profile has no measured frames".into()));
    }
    let mut out = String::new();
    let _ = writeln!(out, "{}-stage pipeline, mean over {} frames (ms)", p.stages, p.frames);
    let _ = writeln!(out, "{:<32} {:>5} {:>10} {:>9} {:>11}", "step", "stage", "mean", "std", "(stage)");
    for (i, s) in p.steps.iter().enumerate() {
        let last_of_stage = p.steps.get(i + 1).is_none_or(|n| n.stage != s.stage);
        let subtotal = if last_of_stage {
            format!("({:.3})", p.stage_ms[s.stage])
        } else {
            String::new()
        };
        let _ = writeln!(
            out,
            "{:<32} {:>5} {:>10.3} {:>9.3} {:>11}",
            s.step.name(),
            s.stage + 1,
            s.mean_ms,
            s.std_ms,
            subtotal
        );
    }
    let _ = writeln!(out, "{:<32} {:>5} {:>10.3}", "Longest task time", "", p.longest_task_ms);
    match p.throughput_fps {
        Some(t) => {
            let _ = writeln!(out, "{:<32} {:>5} {:>10.3} frames/s", "Throughput", "", t);
        }
        None => {
            let _ = writeln!(out, "{:<32} {:>5} {:>10}", "Throughput", "", "n/a");
        }
    }
    Ok(out)
}

/// Throughput of each configuration divided by the slowest one.
pub fn throughput_ratios(throughputs: &[f64]) -> Vec<f64> {
    let slowest = throughputs.iter().copied().fold(f64::INFINITY, f64::min);
    throughputs.iter().map(|t| t / slowest).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub variant: String,
    pub stages: usize,
    pub throughput_fps: f64,
    pub inference_ms: f64,
    pub longest_task_ms: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchMatrix {
    pub rows: Vec<BenchRow>,
}

impl BenchMatrix {
    pub fn report(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<20} {:>6} {:>12} {:>14} {:>12} {:>7}",
            "variant", "stages", "frames/s", "inference ms", "longest ms", "ratio"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<20} {:>6} {:>12.3} {:>14.3} {:>12.3} {:>7.3}",
                r.variant, r.stages, r.throughput_fps, r.inference_ms, r.longest_task_ms, r.ratio
            );
        }
        out
    }

    pub fn to_text(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::parse("bench matrix", e.to_string()))
    }

    /// Mean inference latency per variant, averaged over plans.
    pub fn inference_by_variant(&self) -> BTreeMap<String, f64> {
        let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for r in &self.rows {
            let e = acc.entry(r.variant.clone()).or_default();
            e.0 += r.inference_ms;
            e.1 += 1;
        }
        acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
    }
}

/// Every variant under every plan; outputs are discarded.
pub fn bench_matrix(
    variants: &[(String, &dyn Infer)],
    plans: &[StagePlan],
    source: &dyn FrameSource,
    pre: &Preprocessor,
    cfg: &PipelineConfig,
) -> Result<BenchMatrix> {
    if variants.is_empty() || plans.is_empty() {
        return Err(Error::Empty("bench needs at least one variant and one plan".into()));
    }
    let mut rows = Vec::new();
    for (name, model) in variants {
        for &plan in plans {
            let p = run_pipeline(source, plan, pre, *model, cfg, &mut |_, _| Ok(()))?;
            rows.push(BenchRow {
                variant: name.clone(),
                stages: plan.stages(),
                throughput_fps: p.throughput_fps.unwrap_or(0.0),
                inference_ms: p.steps[Step::Inference as usize].mean_ms,
                longest_task_ms: p.longest_task_ms,
                ratio: 1.0,
            });
        }
    }
    let ratios = throughput_ratios(&rows.iter().map(|r| r.throughput_fps).collect::<Vec<_>>());
    rows.iter_mut().zip(ratios).for_each(|(r, q)| r.ratio = q);
    Ok(BenchMatrix { rows })
}

#[cfg(test)]
mod tests;
