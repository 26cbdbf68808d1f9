use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use hsicomp::bench::DeskBench;
use hsicomp::complexity::{analyze, exact_extra_ops};
use hsicomp::container::write_cube;
use hsicomp::data::{class_summary, generate, sample_name, Dataset};
use hsicomp::netgraph::{self, build_unet, evaluate, Layer, LabeledCube, NetGraph, NormalizationParams};
use hsicomp::pipeline::{profile_report, run_pipeline, throughput_ratios, BenchRow, Infer, StagePlan, StageProfile, Step};
use hsicomp::preprocess::{ChannelStats, RawFrame};
use hsicomp::pruning::{prune_at_init, run_iterations, sensitivity_analysis, IterationConfig, IterationReport, Metric, PruneData};
use hsicomp::quantization::{argmax_agreement, calibrate, fold_and_equalize, QuantTable, QuantizedModel};
use hsicomp::{Error, Result};
use serde::Serialize;

use crate::config::RunConfig;
use crate::DataArg;

pub struct Ctx {
    pub cfg: RunConfig,
    workdir: PathBuf,
}

pub struct BenchOverrides {
    pub stages: Vec<usize>,
    pub frames: Option<usize>,
    pub repeat: Option<usize>,
    pub warmup: Option<usize>,
    pub delays: Vec<f64>,
}

fn io(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| io(path, e))
}

fn toml_text<T: Serialize>(value: &T, what: &str) -> Result<String> {
    toml::to_string(value).map_err(|e| Error::Parse {
        location: what.to_string(),
        message: e.to_string(),
    })
}

/// Graphs carrying their own input normalization expect cubes without it.
fn is_fused(g: &NetGraph) -> bool {
    g.nodes().iter().any(|n| matches!(n.layer, Layer::DepthwiseNorm(_)))
}

fn parse_shape(s: &str) -> Result<(usize, usize, usize)> {
    let bad = || Error::InvalidArgument(format!("input shape {s:?} is not HxWxB"));
    let dims: Vec<usize> = s.split('x').map(|d| d.trim().parse().map_err(|_| bad())).collect::<Result<_>>()?;
    match dims[..] {
        [h, w, b] if h > 0 && w > 0 && b > 0 => Ok((h, w, b)),
        _ => Err(bad()),
    }
}

fn cubes_of(set: &[LabeledCube]) -> Vec<hsicomp::Tensor> {
    set.iter().map(|s| s.cube.clone()).collect()
}

#[derive(Serialize)]
struct PruneOutput<'a> {
    test_metric_before: f64,
    test_metric_after: f64,
    cumulative_ratio: f64,
    iteration: &'a [IterationReport],
}

#[derive(Serialize)]
struct QuantSummary {
    fused_normalization: bool,
    calibration_images: usize,
    argmax_agreement: f64,
    test_wiou_float: f64,
    test_wiou_int8: f64,
    tensors: usize,
}

#[derive(Serialize)]
struct BenchOutput {
    rows: Vec<BenchRow>,
    profile: Vec<StageProfile>,
}

impl Ctx {
    pub fn new(cfg: RunConfig, workdir: PathBuf) -> Self {
        Self { cfg, workdir }
    }

    /// Path inside the workdir; parents are created.
    fn out(&self, rel: &str) -> Result<PathBuf> {
        let p = self.workdir.join(rel);
        let parent = p.parent().unwrap_or(&self.workdir);
        fs::create_dir_all(parent).map_err(|e| io(parent, e))?;
        Ok(p)
    }

    fn dataset(&self, arg: &DataArg) -> Result<Dataset> {
        let dir = arg
            .dataset
            .clone()
            .or_else(|| self.cfg.paths.dataset.clone())
            .unwrap_or_else(|| self.workdir.join("dataset"));
        Dataset::read(&dir)
    }

    fn model(&self, path: Option<&Path>) -> Result<NetGraph> {
        let dir = path
            .map(Path::to_path_buf)
            .or_else(|| self.cfg.paths.model.clone())
            .unwrap_or_else(|| self.workdir.join("model"));
        netgraph::load(&dir)
    }

    fn bench_sets(&self, arg: &DataArg) -> Result<DeskBench> {
        DeskBench::from_dataset(&self.cfg.desk(), self.dataset(arg)?)
    }

    /// Train, val and test sets in the input convention of `g`.
    fn sets_for(&self, b: &DeskBench, fused: bool) -> Result<[Vec<LabeledCube>; 3]> {
        if !fused {
            return Ok([b.train.clone(), b.val.clone(), b.test.clone()]);
        }
        let s = &b.split;
        Ok([
            b.dataset.labeled_cubes(&s.train, &b.stats, true)?,
            b.dataset.labeled_cubes(&s.val, &b.stats, true)?,
            b.dataset.labeled_cubes(&s.test, &b.stats, true)?,
        ])
    }

    pub fn gen_data(&self, count: Option<usize>) -> Result<()> {
        let n = count.unwrap_or(self.cfg.data.samples);
        let ds = generate(&self.cfg.scene, self.cfg.seed, n)?;
        let dir = self.out("dataset")?;
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| io(&dir, e))?;
        }
        ds.write(&dir)?;
        let summary = class_summary(&ds);
        let total: u64 = summary.values().sum();
        println!("{n} images written to {}", dir.display());
        for (name, px) in summary {
            println!("{name:<12} {:6.2}% of pixels", 100.0 * px as f64 / total.max(1) as f64);
        }
        Ok(())
    }

    pub fn train(&self, data: &DataArg) -> Result<()> {
        let b = self.bench_sets(data)?;
        let (g, history) = b.train_baseline()?;
        netgraph::save(&g, &self.workdir.join("model"))?;
        b.stats.save(&self.out("stats.toml")?)?;
        let mut csv = String::from("epoch,loss,val_giou,val_wiou\n");
        for r in &history.records {
            let _ = writeln!(csv, "{},{:.6},{:.6},{:.6}", r.epoch, r.loss, r.val_giou, r.val_wiou);
        }
        write_text(&self.out("train_history.csv")?, &csv)?;
        let m = Metric::WeightedIou;
        println!(
            "trained {} epochs (kept epoch {}); val wIoU {:.4}, test wIoU {:.4}",
            history.records.len(),
            history.best_epoch.map_or("-".into(), |e| e.to_string()),
            m.evaluate(&g, &b.val)?,
            m.evaluate(&g, &b.test)?
        );
        Ok(())
    }

    pub fn preprocess(&self, data: &DataArg, stats: Option<&Path>, fused: bool, limit: Option<usize>) -> Result<()> {
        let ds = self.dataset(data)?;
        let stats = stats.map(ChannelStats::load).transpose()?;
        let pre = ds.preprocessor(stats, fused)?;
        let n = limit.unwrap_or(ds.len()).min(ds.len());
        let mut shape = None;
        for (i, s) in ds.samples.iter().take(n).enumerate() {
            let cube = pre.run(&s.raw)?;
            shape = Some((cube.height(), cube.width(), cube.bands()));
            write_cube(&self.out(&format!("cubes/{}.hscb", sample_name(i)))?, &cube)?;
        }
        match shape {
            Some((h, w, b)) => println!("{n} cubes of {h}x{w}x{b} (BIP) written to {}", self.workdir.join("cubes").display()),
            None => println!("no images to process"),
        }
        Ok(())
    }

    pub fn analyze(&self, model: Option<&Path>, input: &str) -> Result<()> {
        let shape = parse_shape(input)?;
        let g = match model {
            Some(p) => netgraph::load(p)?,
            None => build_unet(&self.cfg.unet, self.cfg.seed)?,
        };
        let r = analyze(&g, shape)?;
        let extra = exact_extra_ops(&g, shape)?;
        print!("{}", r.table());
        println!(
            "outside conv layers: {} ops, {} parameters",
            extra.total_ops(),
            extra.extra_params
        );
        write_text(&self.out("complexity.csv")?, &r.records_text())
    }

    pub fn sensitivity(&self, model: Option<&Path>, data: &DataArg, metric: Option<&str>) -> Result<()> {
        let metric: Metric = metric.map(str::parse).transpose()?.unwrap_or(self.cfg.prune.metric);
        let g = self.model(model)?;
        let b = self.bench_sets(data)?;
        let [_, val, _] = self.sets_for(&b, is_fused(&g))?;
        let curves = sensitivity_analysis(&g, &val, metric)?;
        curves.save(&self.out("sensitivity.toml")?)?;
        let mut csv = String::from("layer");
        (0..10).for_each(|r| {
            let _ = write!(csv, ",{:.1}", r as f64 / 10.0);
        });
        csv.push('\n');
        for c in &curves.layers {
            csv.push_str(&c.id);
            c.values.iter().for_each(|v| {
                let _ = write!(csv, ",{v:.6}");
            });
            csv.push('\n');
        }
        write_text(&self.out("sensitivity.csv")?, &csv)?;
        print!("{csv}");
        Ok(())
    }

    pub fn prune(&self, model: Option<&Path>, data: &DataArg, prs: &[f64], iterations: Option<usize>) -> Result<()> {
        let base = if prs.is_empty() { self.cfg.prune.overall_pr.clone() } else { prs.to_vec() };
        let overall_pr = match (iterations, base.len()) {
            (None, _) => base,
            (Some(n), 1) => vec![base[0]; n],
            (Some(n), k) if n == k => base,
            (Some(n), k) => {
                return Err(Error::InvalidArgument(format!("{k} pruning ratios given for {n} iterations")));
            }
        };
        let pcfg = IterationConfig {
            overall_pr,
            ..self.cfg.prune.clone()
        };
        pcfg.validate()?;
        let g = self.model(model)?;
        let b = self.bench_sets(data)?;
        let [train, val, test] = self.sets_for(&b, is_fused(&g))?;
        let (pruned, reports) = run_iterations(&g, PruneData { train: &train, val: &val }, &pcfg)?;
        let before = pcfg.metric.evaluate(&g, &test)?;
        let after = pcfg.metric.evaluate(&pruned, &test)?;
        let cumulative = reports.last().map_or(1.0, |r| r.flops_after as f64 / reports[0].flops_before as f64);
        netgraph::save(&pruned, &self.workdir.join("pruned/model"))?;
        let out = PruneOutput {
            test_metric_before: before,
            test_metric_after: after,
            cumulative_ratio: cumulative,
            iteration: &reports,
        };
        write_text(&self.out("pruned/report.toml")?, &toml_text(&out, "prune report")?)?;
        for (k, r) in reports.iter().enumerate() {
            println!(
                "iteration {}: pr {:.2} -> FLOPS ratio {:.4}, {} of {} layers locked, {} {:.4} -> {:.4} after finetune",
                k + 1,
                r.used_pr,
                r.achieved_ratio,
                r.locked,
                r.prunable,
                r.metric,
                r.metric_before,
                r.metric_after_finetune
            );
        }
        println!("cumulative FLOPS ratio {cumulative:.4}; test {} {before:.4} -> {after:.4}", pcfg.metric);
        Ok(())
    }

    pub fn prune_at_init(&self, data: &DataArg, overall_pr: f64, seeds: u64) -> Result<()> {
        let pcfg = IterationConfig {
            overall_pr: vec![overall_pr],
            ..self.cfg.prune.clone()
        };
        pcfg.validate()?;
        if seeds == 0 {
            return Err(Error::InvalidArgument("--seeds must be positive".into()));
        }
        let b = self.bench_sets(data)?;
        let m = pcfg.metric;
        for s in self.cfg.seed..self.cfg.seed + seeds {
            let g = build_unet(&self.cfg.unet, s)?;
            let tcfg = hsicomp::netgraph::TrainConfig {
                seed: s,
                ..self.cfg.train.clone()
            };
            let (p, report) = prune_at_init(&g, PruneData { train: &b.train, val: &b.val }, overall_pr, &pcfg, &tcfg)?;
            netgraph::save(&p, &self.workdir.join(format!("init/seed_{s}")))?;
            write_text(&self.out(&format!("init/seed_{s}.toml"))?, &report.to_text())?;
            println!(
                "seed {s}: FLOPS ratio {:.4}, params {} -> {}, {} locked, test {m} {:.4}",
                report.achieved_ratio,
                report.params_before,
                report.params_after,
                report.locked,
                m.evaluate(&p, &b.test)?
            );
        }
        Ok(())
    }

    pub fn quantize(&self, model: Option<&Path>, data: &DataArg, calib: Option<usize>, fused: bool) -> Result<()> {
        let mut g = self.model(model)?;
        let b = self.bench_sets(data)?;
        let fuse = fused || self.cfg.quant.fuse_normalization;
        if fuse && !is_fused(&g) {
            g = g.fuse_symmetric_norm(&NormalizationParams::from_stats(&b.stats))?;
        }
        let fused = is_fused(&g);
        let prepared = fold_and_equalize(&g, self.cfg.quant.cle_passes)?;
        let [train, _, test] = self.sets_for(&b, fused)?;
        let n = calib.unwrap_or(self.cfg.quant.calib_samples).min(train.len());
        if n == 0 {
            return Err(Error::InvalidArgument("calibration needs at least one image".into()));
        }
        let table = calibrate(&prepared, &cubes_of(&train[..n]), &self.cfg.quant.policy)?;
        let q = QuantizedModel::new(&prepared, &table)?;
        let agreement = argmax_agreement(&prepared, &q, &cubes_of(&test))?;
        let m = Metric::WeightedIou;
        let summary = QuantSummary {
            fused_normalization: fused,
            calibration_images: n,
            argmax_agreement: agreement,
            test_wiou_float: m.evaluate(&prepared, &test)?,
            test_wiou_int8: m.value(&q.evaluate(&test)?)?,
            tensors: table.params.len(),
        };
        netgraph::save(&prepared, &self.workdir.join("quantized/model"))?;
        table.save(&self.out("quantized/quant.toml")?)?;
        write_text(&self.out("quantized/summary.toml")?, &toml_text(&summary, "quantization summary")?)?;
        println!(
            "{} tensors calibrated on {n} images; INT8 agrees with float on {:.2}% of test pixels; test wIoU {:.4} float, {:.4} INT8",
            summary.tensors,
            100.0 * agreement,
            summary.test_wiou_float,
            summary.test_wiou_int8
        );
        Ok(())
    }

    pub fn eval(&self, model: Option<&Path>, data: &DataArg, quant: Option<&Path>, split: &str) -> Result<()> {
        let g = self.model(model)?;
        let b = self.bench_sets(data)?;
        let [train, val, test] = self.sets_for(&b, is_fused(&g))?;
        let set = match split {
            "train" => train,
            "val" => val,
            _ => test,
        };
        let quant = quant.map(Path::to_path_buf).or_else(|| self.cfg.paths.calib.clone());
        let cm = match &quant {
            Some(p) => QuantizedModel::new(&g, &QuantTable::load(p)?)?.evaluate(&set)?,
            None => evaluate(&g, &set)?,
        };
        let mut report = format!(
            "{} model, {split} split, {} images\n",
            if quant.is_some() { "INT8" } else { "float" },
            set.len()
        );
        report.push_str(&cm.report(&b.dataset.class_names));
        print!("{report}");
        write_text(&self.out(&format!("eval_{split}.txt"))?, &report)
    }

    pub fn bench(&self, data: &DataArg, model: Option<&Path>, quant: Option<&Path>, o: BenchOverrides) -> Result<()> {
        let bc = &self.cfg.bench;
        let mut pcfg = bc.pipeline.clone();
        if let Some(r) = o.repeat {
            pcfg.repeat = r;
        }
        if let Some(w) = o.warmup {
            pcfg.warmup = w;
        }
        if let [a, b, c] = o.delays[..] {
            pcfg.delays_ms = [a, b, c];
        }
        if pcfg.delays_ms.iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
            return Err(Error::InvalidArgument("stage delays must be non-negative".into()));
        }
        let stages = if o.stages.is_empty() { bc.stages.clone() } else { o.stages };
        let plans: Vec<StagePlan> = stages.into_iter().map(StagePlan::new).collect::<Result<_>>()?;
        let frames = o.frames.unwrap_or(bc.frames);
        if frames == 0 {
            return Err(Error::InvalidArgument("--frames must be positive".into()));
        }
        let g = self.model(model)?;
        let b = self.bench_sets(data)?;
        let pre = b.dataset.preprocessor(Some(b.stats.clone()), is_fused(&g))?;
        let source: Vec<RawFrame> = b.dataset.samples.iter().take(frames).map(|s| s.raw.clone()).collect();
        let quant = quant.map(Path::to_path_buf).or_else(|| self.cfg.paths.calib.clone());
        let q = quant.map(|p| QuantTable::load(&p).and_then(|t| QuantizedModel::new(&g, &t))).transpose()?;
        let mut variants: Vec<(&str, &dyn Infer)> = vec![("float", &g)];
        if let Some(q) = &q {
            variants.push(("int8", q));
        }
        let mut rows = Vec::new();
        let mut profiles = Vec::new();
        for (name, infer) in &variants {
            for &plan in &plans {
                let p = run_pipeline(&source, plan, &pre, *infer, &pcfg, &mut |_, _| Ok(()))?;
                println!("{name}, {} stage(s):", plan.stages());
                print!("{}", profile_report(&p)?);
                rows.push(BenchRow {
                    variant: name.to_string(),
                    stages: plan.stages(),
                    throughput_fps: p.throughput_fps.unwrap_or(0.0),
                    inference_ms: p.steps[Step::Inference as usize].mean_ms,
                    longest_task_ms: p.longest_task_ms,
                    ratio: 1.0,
                });
                profiles.push(p);
            }
        }
        let ratios = throughput_ratios(&rows.iter().map(|r| r.throughput_fps).collect::<Vec<_>>());
        rows.iter_mut().zip(ratios).for_each(|(r, q)| r.ratio = q);
        let matrix = hsicomp::pipeline::BenchMatrix { rows };
        print!("{}", matrix.report());
        let out = BenchOutput {
            rows: matrix.rows,
            profile: profiles,
        };
        write_text(&self.out("bench.toml")?, &toml_text(&out, "bench report")?)
    }
}
