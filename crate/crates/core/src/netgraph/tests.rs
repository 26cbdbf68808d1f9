use super::*;
use crate::tensor::{Layout, Tensor};
use rand::Rng;
use std::borrow::Cow;

fn cfg(depth: usize, init_filters: usize, in_bands: usize, classes: usize) -> UnetConfig {
    UnetConfig {
        depth,
        init_filters,
        in_bands,
        classes,
        dropout: 0.2,
    }
}

fn random_cube(rng: &mut ChaCha8Rng, h: usize, w: usize, b: usize) -> Tensor {
    Tensor::from_fn(h, w, b, Layout::Bip, |_, _, _| rng.random_range(-1.0..1.0))
}

/// Gives every BN non-trivial statistics so tests exercise them.
fn randomize_bn(g: &mut NetGraph, rng: &mut ChaCha8Rng) {
    for i in 0..g.nodes().len() {
        if let Layer::BatchNorm(p) = g.layer_mut(i) {
            for c in 0..p.channels() {
                p.gamma[c] = rng.random_range(0.5..1.5);
                p.beta[c] = rng.random_range(-0.2..0.2);
                p.mean[c] = rng.random_range(-0.2..0.2);
                p.var[c] = rng.random_range(0.5..1.5);
            }
        }
    }
}

fn kind_counts(g: &NetGraph) -> (usize, usize, usize) {
    let mut c = (0, 0, 0);
    for n in g.nodes() {
        match &n.layer {
            Layer::Conv2d(p) if p.kh == 3 => c.0 += 1,
            Layer::ConvTranspose2d(_) => c.1 += 1,
            Layer::Conv2d(p) if p.kh == 1 => c.2 += 1,
            _ => {}
        }
    }
    c
}

#[test]
fn reference_unet_structure_and_size() {
    let g = build_unet(&UnetConfig::default(), 0).unwrap();
    assert_eq!(kind_counts(&g), (22, 5, 1));
    let conv_weights: usize = g.nodes().iter().filter_map(|n| n.layer.conv()).map(|p| p.weight.len()).sum();
    // Independent count: encoder/base levels, then decoder levels.
    let (f, d, b, k) = (32usize, 5u32, 25usize, 5usize);
    let mut oracle = 0usize;
    let mut ic = b;
    for l in 0..=d {
        let o = f << l;
        oracle += 9 * ic * o + 9 * o * o;
        ic = o;
    }
    for l in (0..d).rev() {
        let o = f << l;
        oracle += 4 * ic * o + 9 * 2 * o * o + 9 * o * o;
        ic = o;
    }
    oracle += ic * k;
    assert_eq!(conv_weights, oracle);
    assert!((31_090_000..=31_130_000).contains(&conv_weights), "{conv_weights}");
    assert!(g.node("cnv_21").is_some() && g.node("cnv_22").is_none());
    assert!(g.node("cnv_tr_4").is_some() && g.node("cnv_out").is_some());
}

#[test]
fn depth_one_structure() {
    let g = build_unet(&cfg(1, 8, 4, 2), 0).unwrap();
    assert_eq!(kind_counts(&g), (6, 1, 1));
    assert_eq!(g.spatial_multiple(), 2);
}

#[test]
fn input_must_divide_by_two_to_the_depth() {
    let g = build_unet(&UnetConfig::default(), 0).unwrap();
    assert_eq!(g.spatial_multiple(), 32);
    assert!(g.shapes(192, 384).is_ok());
    assert!(matches!(g.shapes(100, 384), Err(Error::Dimension(_))));
    let shapes = g.shapes(192, 384).unwrap();
    assert_eq!(*shapes.last().unwrap(), (192, 384, 5));
    assert_eq!(shapes[g.index_of("cnv_tr_0").unwrap()], (12, 24, 512));
}

#[test]
fn impulse_kernels() {
    use kernels::{conv2d, ConvView};
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let c = 3;
    let x = FeatureMap {
        n: 1,
        h: 6,
        w: 5,
        c,
        data: (0..90).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
    };
    let impulse = |ky: usize, kx: usize| {
        let mut w = vec![0.0f32; c * 9 * c];
        for o in 0..c {
            w[((o * 3 + ky) * 3 + kx) * c + o] = 1.0;
        }
        w
    };
    let zero = vec![0.0f32; c];
    let centre = impulse(1, 1);
    let view = ConvView {
        out_ch: c,
        in_ch: c,
        kh: 3,
        kw: 3,
        weight: Cow::Borrowed(&centre[..]),
        bias: Cow::Borrowed(&zero[..]),
    };
    assert_eq!(conv2d(&x, &view).data, x.data);
    // Top-left tap: out(r, c) = in(r - 1, c - 1), zero padding on the first row/column.
    let corner = impulse(0, 0);
    let view = ConvView {
        weight: Cow::Borrowed(&corner[..]),
        ..view
    };
    let out = conv2d(&x, &view);
    for r in 0..6 {
        for col in 0..5 {
            for ch in 0..c {
                let got = out.data[(r * 5 + col) * c + ch];
                let want = if r == 0 || col == 0 { 0.0 } else { x.data[((r - 1) * 5 + col - 1) * c + ch] };
                assert_eq!(got, want);
            }
        }
    }
}

#[test]
fn uniform_logits_give_uniform_probabilities() {
    let mut g = build_unet(&cfg(1, 4, 3, 4), 1).unwrap();
    let i = g.index_of("cnv_out").unwrap();
    let p = g.layer_mut(i).conv_mut().unwrap();
    p.weight.fill(0.0);
    p.bias.fill(0.7);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = g.forward(&random_cube(&mut rng, 4, 6, 3)).unwrap();
    assert!(out.as_f32().unwrap().iter().all(|&v| (v - 0.25).abs() < 1e-7));
}

// ---------------------------------------------------------------------------
// Independent loop-nest evaluator in f64, straight from the layer definitions.

type Img = Vec<Vec<Vec<f64>>>; // [row][col][channel]

fn img_from(t: &Tensor) -> Img {
    (0..t.height())
        .map(|r| (0..t.width()).map(|c| (0..t.bands()).map(|b| t.get_f32(r, c, b).unwrap() as f64).collect()).collect())
        .collect()
}

fn naive_forward(g: &NetGraph, x: &Tensor) -> Img {
    let mut vals: Vec<Img> = Vec::new();
    for (i, node) in g.nodes().iter().enumerate() {
        let ins: Vec<&Img> = g.input_indices(i).iter().map(|&j| &vals[j]).collect();
        let out: Img = match &node.layer {
            Layer::Input { .. } => img_from(x),
            Layer::Conv2d(p) => {
                let a = ins[0];
                let (h, w) = (a.len(), a[0].len());
                let mut o = vec![vec![vec![0.0; p.out_ch]; w]; h];
                for r in 0..h {
                    for c in 0..w {
                        for f in 0..p.out_ch {
                            let mut s = p.bias[f] as f64;
                            for ky in 0..p.kh {
                                for kx in 0..p.kw {
                                    let rr = r as isize + ky as isize - (p.kh / 2) as isize;
                                    let cc = c as isize + kx as isize - (p.kw / 2) as isize;
                                    if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
                                        continue;
                                    }
                                    for ic in 0..p.in_ch {
                                        s += a[rr as usize][cc as usize][ic] * p.weight[((f * p.kh + ky) * p.kw + kx) * p.in_ch + ic] as f64;
                                    }
                                }
                            }
                            o[r][c][f] = s;
                        }
                    }
                }
                o
            }
            Layer::ConvTranspose2d(p) => {
                let a = ins[0];
                let (h, w) = (a.len(), a[0].len());
                let mut o = vec![vec![vec![0.0; p.out_ch]; 2 * w]; 2 * h];
                for r in 0..2 * h {
                    for c in 0..2 * w {
                        for f in 0..p.out_ch {
                            let mut s = p.bias[f] as f64;
                            for ic in 0..p.in_ch {
                                s += a[r / 2][c / 2][ic] * p.weight[((f * 2 + r % 2) * 2 + c % 2) * p.in_ch + ic] as f64;
                            }
                            o[r][c][f] = s;
                        }
                    }
                }
                o
            }
            Layer::BatchNorm(p) => ins[0]
                .iter()
                .map(|row| {
                    row.iter()
                        .map(|px| {
                            px.iter()
                                .enumerate()
                                .map(|(c, &v)| {
                                    p.gamma[c] as f64 * (v - p.mean[c] as f64) / (p.var[c] as f64 + p.eps as f64).sqrt() + p.beta[c] as f64
                                })
                                .collect()
                        })
                        .collect()
                })
                .collect(),
            Layer::DepthwiseNorm(p) => ins[0]
                .iter()
                .map(|row| row.iter().map(|px| px.iter().enumerate().map(|(c, &v)| v * p.weight[c] as f64 + p.bias[c] as f64).collect()).collect())
                .collect(),
            Layer::Relu => ins[0].iter().map(|row| row.iter().map(|px| px.iter().map(|&v| v.max(0.0)).collect()).collect()).collect(),
            Layer::Dropout { .. } => ins[0].clone(),
            Layer::MaxPool => {
                let a = ins[0];
                (0..a.len() / 2)
                    .map(|r| {
                        (0..a[0].len() / 2)
                            .map(|c| {
                                (0..a[0][0].len())
                                    .map(|ch| {
                                        [a[2 * r][2 * c][ch], a[2 * r][2 * c + 1][ch], a[2 * r + 1][2 * c][ch], a[2 * r + 1][2 * c + 1][ch]]
                                            .into_iter()
                                            .fold(f64::NEG_INFINITY, f64::max)
                                    })
                                    .collect()
                            })
                            .collect()
                    })
                    .collect()
            }
            Layer::Concat => (0..ins[0].len())
                .map(|r| (0..ins[0][0].len()).map(|c| ins.iter().flat_map(|a| a[r][c].clone()).collect()).collect())
                .collect(),
            Layer::Softmax => ins[0]
                .iter()
                .map(|row| {
                    row.iter()
                        .map(|px| {
                            let e: Vec<f64> = px.iter().map(|v| v.exp()).collect();
                            let s: f64 = e.iter().sum();
                            e.iter().map(|v| v / s).collect()
                        })
                        .collect()
                })
                .collect(),
        };
        vals.push(out);
    }
    vals.pop().unwrap()
}

#[test]
fn forward_matches_loop_nest_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (depth, f, hw) in [(1, 4, (2, 2)), (1, 3, (4, 6)), (2, 4, (8, 4))] {
        let mut g = build_unet(&cfg(depth, f, 3, 3), rng.random()).unwrap();
        randomize_bn(&mut g, &mut rng);
        let x = random_cube(&mut rng, hw.0, hw.1, 3);
        let got = g.forward(&x).unwrap();
        let want = naive_forward(&g, &x);
        for r in 0..hw.0 {
            for c in 0..hw.1 {
                for k in 0..3 {
                    let d = (got.get_f32(r, c, k).unwrap() as f64 - want[r][c][k]).abs();
                    assert!(d < 1e-6, "depth {depth}: ({r},{c},{k}) differs by {d}");
                }
            }
        }
    }
}

#[test]
fn probabilities_sum_to_one_and_forward_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let g = build_unet(&cfg(2, 8, 5, 4), 9).unwrap();
    let x = random_cube(&mut rng, 24, 36, 5);
    let a = g.forward(&x).unwrap();
    for px in a.as_f32().unwrap().chunks(4) {
        assert!((px.iter().sum::<f32>() - 1.0).abs() < 1e-5);
    }
    let run_with = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| g.forward(&x).unwrap())
    };
    assert!(a.bitwise_eq(&run_with(1)));
    assert!(a.bitwise_eq(&run_with(3)));
}

#[test]
fn zeroed_filter_zeroes_its_channel() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut g = build_unet(&cfg(1, 6, 3, 2), 2).unwrap();
    let i = g.index_of("cnv_1").unwrap();
    let p = g.layer_mut(i).conv_mut().unwrap();
    p.filter_mut(4).fill(0.0);
    p.bias[4] = 0.0;
    let mut seen = false;
    g.forward_hooked(
        super::exec::cube_to_map(&random_cube(&mut rng, 4, 4, 3)).unwrap(),
        &mut |n, out: &mut FeatureMap<f32>| {
            if n == i {
                seen = true;
                assert!(out.data.chunks(6).all(|px| px[4] == 0.0));
                assert!(out.data.chunks(6).any(|px| px[3] != 0.0));
            }
            Ok(())
        },
    )
    .unwrap();
    assert!(seen);
}

fn batch_of(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize, c: usize) -> FeatureMap<f64> {
    FeatureMap {
        n,
        h,
        w,
        c,
        data: (0..n * h * w * c).map(|_| rng.random_range(-1.0..1.0)).collect(),
    }
}

#[test]
fn gradients_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut g = build_unet(&cfg(1, 3, 2, 3), 4).unwrap();
    randomize_bn(&mut g, &mut rng);
    for i in 0..g.nodes().len() {
        if let Some(p) = g.layer_mut(i).conv_mut() {
            p.bias.iter_mut().for_each(|b| *b = rng.random_range(-0.3..0.3));
        }
    }
    let x = batch_of(&mut rng, 2, 4, 4, 2);
    // Label 3 is the ignore value; the first pixel is ignored.
    let mut labels: Vec<u8> = (0..32).map(|_| rng.random_range(0..3)).collect();
    labels[0] = 3;
    let pass = TrainPass {
        dropout_seed: 77,
        dropout: true,
    };
    let analytic = g.loss_and_grads(x.clone(), &labels, pass).unwrap();

    let mut checked = std::collections::HashMap::<&'static str, usize>::new();
    for i in 0..g.nodes().len() {
        let Some(grad) = analytic.nodes[i].clone() else { continue };
        let kind = g.nodes()[i].layer.kind();
        for (which, gvec) in [(0usize, &grad.a), (1, &grad.b)] {
            for idx in (0..gvec.len()).step_by(gvec.len().div_ceil(4).max(1)) {
                let a = gvec[idx];
                if a.abs() < 1e-5 {
                    continue;
                }
                let eval = |delta: f32| -> (f64, f64) {
                    let mut h = g.clone();
                    let (pa, pb) = h.layer_mut(i).trainable_mut().unwrap();
                    let slot = if which == 0 { &mut pa[idx] } else { &mut pb[idx] };
                    *slot += delta;
                    let actual = *slot as f64;
                    (h.loss_and_grads(x.clone(), &labels, pass).unwrap().loss, actual)
                };
                let base = if which == 0 { g.nodes()[i].layer.trainable().unwrap().0[idx] } else { g.nodes()[i].layer.trainable().unwrap().1[idx] };
                let step = 1e-3f32 * base.abs().max(0.1);
                let (lp, wp) = eval(step);
                let (lm, wm) = eval(-step);
                let fd = (lp - lm) / (wp - wm);
                let rel = (a - fd).abs() / a.abs();
                assert!(rel < 1e-3, "{} {kind} tensor {which} [{idx}]: analytic {a:e} fd {fd:e}", g.nodes()[i].id);
                *checked.entry(kind).or_default() += 1;
            }
        }
    }
    for kind in ["conv2d", "conv_transpose2d", "batch_norm"] {
        assert!(checked.get(kind).copied().unwrap_or(0) >= 2, "too few checks for {kind}: {checked:?}");
    }
}

#[test]
fn loss_edge_cases() {
    let g = build_unet(&cfg(1, 2, 2, 2), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = batch_of(&mut rng, 1, 2, 2, 2);
    let pass = TrainPass {
        dropout_seed: 0,
        dropout: false,
    };
    assert!(matches!(g.loss_and_grads(x.clone(), &[2, 2, 2, 2], pass), Err(Error::Empty(_))));
    assert!(matches!(g.loss_and_grads(x.clone(), &[0, 1, 3, 0], pass), Err(Error::Label(_))));
    assert!(matches!(g.loss_and_grads(x, &[0, 1], pass), Err(Error::Dimension(_))));
}

#[test]
fn normalization_parameters() {
    let p = NormalizationParams {
        min: vec![0.0, -1.0],
        max: vec![0.149, 1.0],
    }
    .depthwise()
    .unwrap();
    assert!((p.weight[0] - 13.422_819).abs() < 1e-4);
    assert_eq!(p.bias[0], -1.0);
    assert_eq!((p.weight[1], p.bias[1]), (1.0, 0.0));
    let bad = NormalizationParams {
        min: vec![0.1],
        max: vec![0.1],
    };
    assert!(matches!(bad.depthwise(), Err(Error::DegenerateChannel { band: 0, .. })));
}

#[test]
fn fused_normalization_matches_explicit() {
    use crate::preprocess::{symmetric_normalize, ChannelStats};
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let g = build_unet(&cfg(2, 6, 4, 3), 3).unwrap();
    let stats = ChannelStats {
        th: vec![0.149, 0.08, 0.1, 0.06],
        min: vec![0.0, 0.01, 0.02, 0.005],
        max: vec![0.149, 0.08, 0.1, 0.06],
    };
    let fused = g.fuse_symmetric_norm(&NormalizationParams::from_stats(&stats)).unwrap();
    assert!(matches!(
        fused.fuse_symmetric_norm(&NormalizationParams::from_stats(&stats)),
        Err(Error::Structure(_))
    ));
    for _ in 0..5 {
        let cube = Tensor::from_fn(8, 12, 4, Layout::Bip, |_, _, b| rng.random_range(stats.min[b]..stats.max[b]));
        let a = g.forward(&symmetric_normalize(&cube, &stats).unwrap()).unwrap();
        let b = fused.forward(&cube).unwrap();
        let diff = a
            .as_f32()
            .unwrap()
            .iter()
            .zip(b.as_f32().unwrap())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f32, f32::max);
        assert!(diff < 1e-6, "{diff}");
    }
}

#[test]
fn save_load_roundtrip_and_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut g = build_unet(&cfg(2, 4, 3, 3), 12).unwrap();
    randomize_bn(&mut g, &mut rng);
    let g = g
        .fuse_symmetric_norm(&NormalizationParams {
            min: vec![0.0; 3],
            max: vec![0.2; 3],
        })
        .unwrap();
    save(&g, dir.path()).unwrap();
    assert!(load(dir.path()).unwrap().bitwise_eq(&g));

    let wp = dir.path().join("weights.bin");
    let blob = std::fs::read(&wp).unwrap();
    std::fs::write(&wp, &blob[..blob.len() - 3]).unwrap();
    assert!(matches!(load(dir.path()), Err(Error::Parse { .. })));

    let mut longer = blob.clone();
    longer.extend_from_slice(&[0; 4]);
    std::fs::write(&wp, &longer).unwrap();
    assert!(matches!(load(dir.path()), Err(Error::Parse { .. })));

    std::fs::write(&wp, &blob).unwrap();
    let gp = dir.path().join("graph");
    let text = std::fs::read_to_string(&gp).unwrap();
    std::fs::write(&gp, text.replacen("out_ch = 4", "out_ch = 5", 1)).unwrap();
    match load(dir.path()) {
        Err(Error::Parse { location, .. }) => assert!(location.contains("cnv_0"), "{location}"),
        other => panic!("unexpected {other:?}"),
    }
    std::fs::write(&gp, format!("{text}\nunexpected = 1\n")).unwrap();
    assert!(matches!(load(dir.path()), Err(Error::Parse { .. })));
}

#[test]
fn zero_epochs_and_zero_learning_rate() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let set: Vec<LabeledCube> = (0..4)
        .map(|_| LabeledCube {
            cube: random_cube(&mut rng, 4, 4, 3),
            labels: (0..16).map(|_| rng.random_range(0..2)).collect(),
        })
        .collect();
    let g0 = build_unet(&cfg(1, 4, 3, 2), 1).unwrap();
    let mut g = g0.clone();
    let none = TrainConfig {
        epochs: 0,
        ..Default::default()
    };
    let h = train(&mut g, &set, &set, &none).unwrap();
    assert!(h.records.is_empty() && h.best_epoch.is_none());
    assert!(g.bitwise_eq(&g0));

    let frozen = TrainConfig {
        epochs: 3,
        batch_size: 2,
        lr: 0.0,
        ..Default::default()
    };
    train(&mut g, &set, &set, &frozen).unwrap();
    for (a, b) in g.nodes().iter().zip(g0.nodes()) {
        assert_eq!(a.layer.trainable(), b.layer.trainable());
    }
}
