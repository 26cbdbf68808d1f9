use super::*;
use crate::data::{generate, SceneSpec};
use crate::netgraph::{build_unet, UnetConfig};
use crate::preprocess::PreprocessConfig;
use std::sync::atomic::{AtomicUsize, Ordering};

struct Fixture {
    frames: Vec<RawFrame>,
    pre: Preprocessor,
    model: NetGraph,
}

fn fixture(count: usize) -> Fixture {
    let spec = SceneSpec {
        frame: [44, 64],
        preprocess: PreprocessConfig {
            crop_origin: [1, 3],
            cube_size: [8, 12],
            depth: 2,
            ..PreprocessConfig::default()
        },
        ..SceneSpec::default()
    };
    let ds = generate(&spec, 9, count).unwrap();
    let stats = ds.clip_stats(&(0..count).collect::<Vec<_>>()).unwrap();
    let pre = ds.preprocessor(Some(stats), false).unwrap();
    let model = build_unet(
        &UnetConfig {
            depth: 2,
            init_filters: 4,
            in_bands: 25,
            classes: 5,
            dropout: 0.2,
        },
        1,
    )
    .unwrap();
    Fixture {
        frames: ds.samples.into_iter().map(|s| s.raw).collect(),
        pre,
        model,
    }
}

fn collect(f: &Fixture, plan: usize, cfg: &PipelineConfig) -> (Vec<(usize, Tensor)>, StageProfile) {
    let mut out = Vec::new();
    let p = run_pipeline(&f.frames, StagePlan::new(plan).unwrap(), &f.pre, &f.model, cfg, &mut |i, t| {
        out.push((i, t));
        Ok(())
    })
    .unwrap();
    (out, p)
}

#[test]
fn plans_partition_the_steps() {
    for n in 1..=3 {
        let r = StagePlan::new(n).unwrap().ranges();
        assert_eq!(r.len(), n);
        assert_eq!(r[0].start, 0);
        assert_eq!(r.last().unwrap().end, Step::ALL.len());
        assert!(r.windows(2).all(|w| w[0].end == w[1].start));
    }
    assert_eq!(StagePlan::new(3).unwrap().stage_of(4), 0, "alignment closes stage A");
    assert_eq!(StagePlan::new(3).unwrap().stage_of(5), 1);
    assert_eq!(StagePlan::new(2).unwrap().stage_of(6), 0);
    assert!(StagePlan::new(0).is_err() && StagePlan::new(4).is_err());
}

#[test]
fn published_step_latencies_give_published_longest_task() {
    let one = [3.255, 1.377, 19.337, 9.197, 12.015, 26.548, 5.697, 32.842];
    let two = [4.790, 8.832, 25.789, 9.851, 12.904, 29.930, 5.568, 61.581];
    let three = [7.039, 9.302, 37.224, 18.164, 15.409, 52.791, 12.309, 62.217];
    let p1 = StageProfile::from_step_means(StagePlan::new(1).unwrap(), &one);
    let p2 = StageProfile::from_step_means(StagePlan::new(2).unwrap(), &two);
    let p3 = StageProfile::from_step_means(StagePlan::new(3).unwrap(), &three);
    assert!((p1.longest_task_ms - 110.268).abs() < 1e-9);
    assert!((p2.longest_task_ms - 97.664).abs() < 1e-9);
    assert!((p3.longest_task_ms - 87.138).abs() < 1e-9);
    assert!((p3.stage_ms[1] - 65.100).abs() < 1e-9);
    let report = profile_report(&p3).unwrap();
    assert!(report.contains("(87.138)") && report.contains("(65.100)") && report.contains("(62.217)"));
}

#[test]
fn every_plan_matches_the_sequential_reference() {
    let f = fixture(5);
    let cfg = PipelineConfig {
        warmup: 0,
        repeat: 20,
        delays_ms: [0.0; 3],
    };
    let reference: Vec<Tensor> = (0..20)
        .map(|i| f.model.forward(&f.pre.run(&f.frames[i % 5]).unwrap()).unwrap())
        .collect();
    for plan in 1..=3 {
        let (out, p) = collect(&f, plan, &cfg);
        assert_eq!(out.len(), 20);
        for (k, (i, t)) in out.iter().enumerate() {
            assert_eq!(*i, k);
            assert!(t.bitwise_eq(&reference[k]), "plan {plan} frame {k}");
        }
        assert_eq!(p.stages, plan);
        assert_eq!(p.stage_ms.len(), plan);
    }
}

#[test]
fn slow_consumer_stalls_without_losing_frames() {
    let f = fixture(3);
    let cfg = PipelineConfig {
        warmup: 2,
        repeat: 12,
        delays_ms: [0.0; 3],
    };
    let mut seen = Vec::new();
    run_pipeline(&f.frames, StagePlan::new(3).unwrap(), &f.pre, &f.model, &cfg, &mut |i, _| {
        thread::sleep(Duration::from_millis(3));
        seen.push(i);
        Ok(())
    })
    .unwrap();
    assert_eq!(seen, (0..14).collect::<Vec<_>>());
}

#[test]
fn handoff_preserves_order_under_contention() {
    let h: Handoff<usize> = Handoff::new();
    let got = thread::scope(|s| {
        s.spawn(|| {
            for i in 0..500 {
                assert!(h.put(i, i * 3));
            }
            h.close();
        });
        let mut got = Vec::new();
        while let Some((i, v)) = h.take() {
            assert_eq!(v, i * 3);
            got.push(i);
        }
        got
    });
    assert_eq!(got, (0..500).collect::<Vec<_>>());
}

#[test]
fn handoff_never_holds_more_than_two_buffers() {
    let h: Handoff<usize> = Handoff::new();
    let produced = AtomicUsize::new(0);
    thread::scope(|s| {
        s.spawn(|| {
            for i in 0..5 {
                h.put(i, i);
                produced.fetch_add(1, Ordering::SeqCst);
            }
            h.close();
        });
        thread::sleep(Duration::from_millis(50));
        assert_eq!(produced.load(Ordering::SeqCst), 2, "producer blocks on the third buffer");
        while h.take().is_some() {}
    });
    assert_eq!(produced.load(Ordering::SeqCst), 5);
}

struct Failing {
    frames: Vec<RawFrame>,
    bad: usize,
}

impl FrameSource for Failing {
    fn len(&self) -> usize {
        usize::MAX
    }
    fn load(&self, i: usize) -> Result<RawFrame> {
        if i == self.bad {
            return Err(Error::Empty("frame vanished".into()));
        }
        Ok(self.frames[i % self.frames.len()].clone())
    }
}

struct Panicking<'a> {
    inner: &'a NetGraph,
    calls: AtomicUsize,
    bad: usize,
}

impl Infer for Panicking<'_> {
    fn infer(&self, cube: &Tensor) -> Result<Tensor> {
        if self.calls.fetch_add(1, Ordering::SeqCst) == self.bad {
            panic!("inference blew up");
        }
        self.inner.forward(cube)
    }
}

#[test]
fn failures_surface_with_the_frame_index() {
    let f = fixture(2);
    let cfg = PipelineConfig {
        warmup: 0,
        repeat: 10,
        delays_ms: [0.0; 3],
    };
    for plan in 1..=3 {
        let src = Failing {
            frames: f.frames.clone(),
            bad: 5,
        };
        let e = run_pipeline(&src, StagePlan::new(plan).unwrap(), &f.pre, &f.model, &cfg, &mut |_, _| Ok(())).unwrap_err();
        assert!(matches!(e, Error::Pipeline { frame: 5, .. }), "{e}");

        let model = Panicking {
            inner: &f.model,
            calls: AtomicUsize::new(0),
            bad: 3,
        };
        let e = run_pipeline(&f.frames, StagePlan::new(plan).unwrap(), &f.pre, &model, &cfg, &mut |_, _| Ok(())).unwrap_err();
        match e {
            Error::Pipeline { frame: 3, message } => assert!(message.contains("blew up")),
            other => panic!("{other}"),
        }
    }
    let e = run_pipeline(&f.frames, StagePlan::new(2).unwrap(), &f.pre, &f.model, &cfg, &mut |i, _| {
        if i == 4 {
            Err(Error::InvalidArgument("sink full".into()))
        } else {
            Ok(())
        }
    })
    .unwrap_err();
    assert!(matches!(e, Error::InvalidArgument(_)));
}

#[test]
fn profile_edge_cases() {
    let f = fixture(1);
    let empty = PipelineConfig {
        repeat: 0,
        ..PipelineConfig::default()
    };
    let r = run_pipeline(&f.frames, StagePlan::new(1).unwrap(), &f.pre, &f.model, &empty, &mut |_, _| Ok(()));
    assert!(matches!(r, Err(Error::Empty(_))));

    let one = PipelineConfig {
        warmup: 0,
        repeat: 1,
        delays_ms: [0.0; 3],
    };
    let (_, p) = collect(&f, 3, &one);
    assert!(p.steps.iter().all(|s| s.std_ms == 0.0 && s.mean_ms >= 0.0));
    let total: f64 = p.steps.iter().map(|s| s.mean_ms).sum();
    assert!((p.stage_ms.iter().sum::<f64>() - total).abs() < 1e-9);

    let mut hollow = p.clone();
    hollow.frames = 0;
    assert!(profile_report(&hollow).is_err());

    let hundred = PipelineConfig {
        warmup: 3,
        repeat: 100,
        delays_ms: [0.0; 3],
    };
    let (out, p) = collect(&f, 2, &hundred);
    assert_eq!(out.len(), 103);
    assert_eq!(p.frames, 100);
    let report = profile_report(&p).unwrap();
    assert!(report.contains("std") && report.contains("Longest task time") && report.contains("frames/s"));
    assert_eq!(report.lines().count(), 2 + 8 + 2);
    let text = p.to_text().unwrap();
    assert!(text.contains("longest_task_ms"));
}

#[test]
fn saturated_three_stage_run_follows_the_slowest_stage() {
    let f = fixture(2);
    let cfg = PipelineConfig {
        warmup: 3,
        repeat: 15,
        delays_ms: [24.0, 12.0, 6.0],
    };
    let (_, p3) = collect(&f, 3, &cfg);
    let t = p3.throughput_fps.unwrap();
    let law = 1e3 / p3.longest_task_ms;
    assert!(p3.longest_task_ms >= 24.0);
    assert!((t / law - 1.0).abs() < 0.15, "{t} vs {law}");
    let s = p3.saturation().unwrap();
    assert!((0.85..1.15).contains(&s), "{s}");
    let (_, p1) = collect(&f, 1, &cfg);
    assert!(p1.longest_task_ms >= 42.0);
    assert!(t > 1.3 * p1.throughput_fps.unwrap());
}

#[test]
fn ratios_against_the_slowest() {
    assert_eq!(throughput_ratios(&[5.0, 5.0, 5.0]), vec![1.0; 3]);
    assert_eq!(throughput_ratios(&[2.0, 4.0, 3.0]), vec![1.0, 2.0, 1.5]);
    let f = fixture(2);
    let cfg = PipelineConfig {
        warmup: 1,
        repeat: 3,
        delays_ms: [0.0; 3],
    };
    let plans = [StagePlan::new(1).unwrap(), StagePlan::new(3).unwrap()];
    let m = bench_matrix(&[("a".to_string(), &f.model as &dyn Infer)], &plans, &f.frames, &f.pre, &cfg).unwrap();
    assert_eq!(m.rows.len(), 2);
    assert!(m.rows.iter().any(|r| r.ratio == 1.0) && m.rows.iter().all(|r| r.ratio >= 1.0));
    assert!(m.report().contains("variant"));
    assert!(bench_matrix(&[], &plans, &f.frames, &f.pre, &cfg).is_err());
}
