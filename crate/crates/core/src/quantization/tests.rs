use super::*;
use crate::netgraph::{build_unet, BatchNormParams, ConvParams, NormalizationParams, UnetConfig};
use crate::preprocess::ChannelStats;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_cube(rng: &mut ChaCha8Rng, h: usize, w: usize, b: usize, lo: f32, hi: f32) -> Tensor {
    Tensor::from_fn(h, w, b, Layout::Bip, |_, _, _| rng.random_range(lo..hi))
}

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

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f32 {
    a.as_f32().unwrap().iter().zip(b.as_f32().unwrap()).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

fn small_unet(seed: u64) -> NetGraph {
    let mut g = build_unet(
        &UnetConfig {
            depth: 2,
            init_filters: 4,
            in_bands: 3,
            classes: 3,
            dropout: 0.2,
        },
        seed,
    )
    .unwrap();
    randomize_bn(&mut g, &mut ChaCha8Rng::seed_from_u64(seed + 100));
    g
}

/// input -> conv_a -> relu -> conv_b -> softmax, all 1x1.
fn pair_graph(a: ConvParams, b: ConvParams) -> NetGraph {
    let classes = b.out_ch;
    let bands = a.in_ch;
    NetGraph::from_nodes(
        vec![
            Node::new("input", Layer::Input { bands }, &[]),
            Node::new("cnv_0", Layer::Conv2d(a), &["input"]),
            Node::new("relu_0", Layer::Relu, &["cnv_0"]),
            Node::new("cnv_out", Layer::Conv2d(b), &["relu_0"]),
            Node::new("softmax", Layer::Softmax, &["cnv_out"]),
        ],
        classes,
    )
    .unwrap()
}

fn is_power_of_two(x: f64) -> bool {
    x > 0.0 && x.to_bits() & ((1u64 << 52) - 1) == 0
}

#[test]
fn min_max_examples() {
    assert_eq!(min_max_params(-0.7, 0.7, QuantMode::Symmetric, true).exponent, -7);
    let z = min_max_params(0.0, 0.0, QuantMode::Symmetric, true);
    assert_eq!((z.exponent, z.zero_point), (-7, 0));
    let z = min_max_params(0.0, 0.0, QuantMode::Affine, false);
    assert_eq!((z.exponent, z.zero_point), (-7, 0));
    let unit = min_max_params(0.0, 1.0, QuantMode::Symmetric, false);
    let clipped = min_max_params(0.0, 0.149, QuantMode::Symmetric, false);
    assert_eq!(unit.integer_bits() - clipped.integer_bits(), 3);
    let a = min_max_params(0.0, 0.149, QuantMode::Affine, false);
    assert_eq!((a.exponent, a.zero_point), (-10, -128));
}

#[test]
fn grid_points_survive_quantization() {
    let p = QuantParams::symmetric(-7, false);
    for k in -128..=127 {
        let x = 0.0078125 * k as f64;
        assert_eq!(p.fake(x), x);
        assert_eq!(p.quantize(x), k);
    }
    assert_eq!(p.quantize(0.5 * 0.0078125), 1, "halves round away from zero");
    assert_eq!(p.quantize(-0.5 * 0.0078125), -1);
    assert_eq!(QuantParams::symmetric(-7, true).quantize(-5.0), -127);
}

proptest! {
    #[test]
    fn fake_quantization_is_idempotent(e in -12i32..4, zp in -128i32..=127, affine in any::<bool>(), x in -100.0f64..100.0) {
        let p = if affine {
            QuantParams { exponent: e, zero_point: zp, mode: QuantMode::Affine, narrow: false }
        } else {
            QuantParams::symmetric(e, true)
        };
        prop_assert_eq!(p.fake(p.fake(x)), p.fake(x));
    }

    #[test]
    fn min_mse_never_worse_than_min_max(seed in any::<u64>(), n in 1usize..200, spread in 0.01f64..10.0, affine in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-spread..spread) * rng.random_range(0.0..1.0f64).powi(3)).collect();
        let (lo, hi) = range(&v);
        let mode = if affine { QuantMode::Affine } else { QuantMode::Symmetric };
        let mm = min_max_params(lo, hi, mode, !affine);
        let ms = min_mse_params(&v, lo, hi, mode, !affine, 4);
        prop_assert!(quantization_mse(&v, &ms) <= quantization_mse(&v, &mm));
        prop_assert!(is_power_of_two(ms.scale()) && ms.exponent <= mm.exponent && ms.exponent >= mm.exponent - 4);
    }

    #[test]
    fn min_max_grid_covers_the_range(lo in -50.0f64..0.0, hi in 0.0f64..50.0, affine in any::<bool>()) {
        prop_assume!(hi - lo > 1e-9);
        let mode = if affine { QuantMode::Affine } else { QuantMode::Symmetric };
        let p = min_max_params(lo, hi, mode, false);
        prop_assert!(p.dequantize(p.qmin()) <= lo && p.dequantize(QMAX) >= hi);
        prop_assert_eq!(p.fake(lo), p.dequantize(p.quantize(lo)));
        // One exponent lower can never cover the same span with 255 steps.
        let smaller = ((p.exponent - 2) as f64).exp2();
        prop_assert!(255.0 * smaller < hi - lo || !affine);
    }
}

#[test]
fn fold_bn_by_hand() {
    let mut conv = ConvParams::zeros(1, 1, 1, 1);
    conv.weight = vec![1.0];
    let mut bn = BatchNormParams::identity(1);
    bn.gamma = vec![2.0];
    bn.beta = vec![1.0];
    bn.var = vec![1.0 - bn.eps];
    let g = NetGraph::from_nodes(
        vec![
            Node::new("input", Layer::Input { bands: 1 }, &[]),
            Node::new("cnv_out", Layer::Conv2d(conv), &["input"]),
            Node::new("bn", Layer::BatchNorm(bn), &["cnv_out"]),
            Node::new("softmax", Layer::Softmax, &["bn"]),
        ],
        1,
    )
    .unwrap();
    let f = fold_bn(&g).unwrap();
    assert_eq!(f.nodes().len(), 3);
    let p = f.node("cnv_out").unwrap().layer.conv().unwrap();
    assert!((p.weight[0] - 2.0).abs() < 1e-6 && (p.bias[0] - 1.0).abs() < 1e-6);
    assert_eq!(f.node("softmax").unwrap().inputs, vec!["cnv_out".to_string()]);
}

#[test]
fn fold_identity_bn_keeps_weights() {
    let mut g = build_unet(&UnetConfig { depth: 1, init_filters: 3, in_bands: 2, classes: 2, dropout: 0.2 }, 4).unwrap();
    for i in 0..g.nodes().len() {
        if let Layer::BatchNorm(p) = g.layer_mut(i) {
            p.var.iter_mut().for_each(|v| *v = 1.0 - p.eps);
        }
    }
    let f = fold_bn(&g).unwrap();
    for n in f.nodes() {
        if let Some(p) = n.layer.conv() {
            let orig = g.node(&n.id).unwrap().layer.conv().unwrap();
            for (a, b) in p.weight.iter().zip(&orig.weight) {
                assert!((a - b).abs() <= 1e-7 * b.abs().max(1.0));
            }
        }
    }
    assert!(!f.nodes().iter().any(|n| matches!(n.layer, Layer::BatchNorm(_))));
}

#[test]
fn fold_rejects_orphan_bn() {
    let g = NetGraph::from_nodes(
        vec![
            Node::new("input", Layer::Input { bands: 2 }, &[]),
            Node::new("bn", Layer::BatchNorm(BatchNormParams::identity(2)), &["input"]),
            Node::new("cnv_out", Layer::Conv2d(ConvParams::zeros(2, 2, 1, 1)), &["bn"]),
            Node::new("softmax", Layer::Softmax, &["cnv_out"]),
        ],
        2,
    )
    .unwrap();
    assert!(matches!(fold_bn(&g), Err(Error::Structure(_))));
}

#[test]
fn equalization_by_hand() {
    let mut a = ConvParams::zeros(1, 1, 1, 1);
    a.weight = vec![4.0];
    let mut b = ConvParams::zeros(2, 1, 1, 1);
    b.weight = vec![1.0, -0.5];
    let g = pair_graph(a, b);
    assert_eq!(equalization_pairs(&g), vec![(1, 3)]);
    let e = cross_layer_equalize(&g, 1).unwrap();
    assert_eq!(e.node("cnv_0").unwrap().layer.conv().unwrap().weight, vec![2.0]);
    assert_eq!(e.node("cnv_out").unwrap().layer.conv().unwrap().weight, vec![2.0, -1.0]);
    let again = cross_layer_equalize(&e, 1).unwrap();
    assert!(again.bitwise_eq(&e));
}

#[test]
fn equalization_skips_dead_channels_and_needs_folding() {
    let mut a = ConvParams::zeros(2, 1, 1, 1);
    a.weight = vec![0.0, 3.0];
    let mut b = ConvParams::zeros(1, 2, 1, 1);
    b.weight = vec![5.0, 0.0];
    let g = pair_graph(a.clone(), b.clone());
    let e = cross_layer_equalize(&g, 2).unwrap();
    assert!(e.bitwise_eq(&g));
    assert!(matches!(cross_layer_equalize(&small_unet(0), 1), Err(Error::Structure(_))));
}

#[test]
fn fold_and_equalize_preserve_float_forward() {
    for seed in 0..6 {
        let g = small_unet(seed);
        let folded = fold_bn(&g).unwrap();
        let eq = cross_layer_equalize(&folded, 2).unwrap();
        assert!(!equalization_pairs(&folded).is_empty());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_cube(&mut rng, 8, 12, 3, -1.0, 1.0);
        let y = g.forward(&x).unwrap();
        assert!(max_abs_diff(&y, &folded.forward(&x).unwrap()) < 1e-5);
        assert!(max_abs_diff(&y, &eq.forward(&x).unwrap()) < 1e-5);
    }
}

#[test]
fn activation_points_follow_fusion_rules() {
    let g = fold_bn(&small_unet(1)).unwrap();
    let pts = activation_points(&g);
    let at = |id: &str| pts[g.index_of(id).unwrap()];
    assert!(at("input") && at("relu_0") && at("concat_0") && at("cnv_out") && at("cnv_tr_0"));
    assert!(!at("cnv_0") && !at("pool_1") && !at("softmax"));
}

#[test]
fn calibration_covers_every_tensor_with_power_of_two_scales() {
    let g = fold_bn(&small_unet(2)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let calib: Vec<Tensor> = (0..3).map(|_| random_cube(&mut rng, 8, 8, 3, -1.0, 1.0)).collect();
    let table = calibrate(&g, &calib, &QuantPolicy::default()).unwrap();
    let pts = activation_points(&g);
    for (i, n) in g.nodes().iter().enumerate() {
        assert_eq!(table.params.contains_key(&n.id), pts[i], "{}", n.id);
        if n.layer.conv().is_some() {
            let w = table.get(&format!("{}.weight", n.id)).unwrap();
            assert!(w.narrow && w.mode == QuantMode::Symmetric);
            assert_eq!(table.get(&format!("{}.bias", n.id)).unwrap().mode, QuantMode::Symmetric);
        }
    }
    assert_eq!(table.get("input").unwrap().mode, QuantMode::Symmetric);
    assert_eq!(table.get("relu_0").unwrap().mode, QuantMode::Affine);
    assert!(table.params.values().all(|p| is_power_of_two(p.scale())));

    let sampled = calibrate(&g, &calib, &QuantPolicy { max_samples: 7, ..QuantPolicy::default() }).unwrap();
    assert_eq!(sampled.get("input").unwrap(), table.get("input").unwrap(), "Min-Max ignores sampling");
    assert!(matches!(calibrate(&g, &[], &QuantPolicy::default()), Err(Error::Empty(_))));

    let affine = QuantPolicy {
        input_mode: QuantMode::Affine,
        ..QuantPolicy::default()
    };
    let pos: Vec<Tensor> = (0..2).map(|_| random_cube(&mut rng, 8, 8, 3, 0.0, 0.149)).collect();
    let t = calibrate(&g, &pos, &affine).unwrap();
    assert_eq!(t.get("input").unwrap().zero_point, -128);
}

#[test]
fn table_text_round_trip_and_validation() {
    let g = fold_bn(&small_unet(3)).unwrap();
    let calib = vec![random_cube(&mut ChaCha8Rng::seed_from_u64(1), 8, 8, 3, -1.0, 1.0)];
    let table = calibrate(&g, &calib, &QuantPolicy::default()).unwrap();
    assert_eq!(QuantTable::from_text(&table.to_text()).unwrap(), table);
    let bad = "[x]\nexponent = -3\nzero_point = 4\nmode = \"symmetric\"\n";
    assert!(matches!(QuantTable::from_text(bad), Err(Error::Quantization(_))));
    assert!(QuantTable::from_text("[x]\nexponent = 1\nzero_point = 0\nmode = \"weird\"\n").is_err());
    let mut missing = table.clone();
    missing.params.remove("cnv_3.bias");
    let e = QuantizedModel::new(&g, &missing).unwrap_err();
    assert!(matches!(e, Error::Quantization(_)) && e.to_string().contains("cnv_3.bias"));
}

#[test]
fn impulse_conv_on_grid_is_exact() {
    let mut p = ConvParams::zeros(2, 2, 3, 3);
    for o in 0..2 {
        p.weight[(o * 9 + 4) * 2 + o] = 1.0;
    }
    let g = NetGraph::from_nodes(
        vec![
            Node::new("input", Layer::Input { bands: 2 }, &[]),
            Node::new("cnv_out", Layer::Conv2d(p), &["input"]),
            Node::new("softmax", Layer::Softmax, &["cnv_out"]),
        ],
        2,
    )
    .unwrap();
    let mut table = QuantTable::default();
    table.params.insert("input".into(), QuantParams::symmetric(-7, false));
    table.params.insert("cnv_out.weight".into(), QuantParams::symmetric(-6, true));
    table.params.insert("cnv_out.bias".into(), QuantParams::symmetric(-7, false));
    table.params.insert("cnv_out".into(), QuantParams { exponent: -7, zero_point: 0, mode: QuantMode::Affine, narrow: false });
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = Tensor::from_fn(5, 4, 2, Layout::Bip, |_, _, _| rng.random_range(-128..=127) as f32 / 128.0);
    let out = QuantizedModel::new(&g, &table).unwrap().forward_map(to_f64_map(&x).unwrap()).unwrap();
    let expect = kernels::softmax(&to_f64_map(&x).unwrap());
    assert_eq!(out.data, expect.data);
}

/// Integer-only 3x3 same-padded convolution with an i32 accumulator.
fn conv_i8(x: &[i8], h: usize, w: usize, ic: usize, wq: &[i8], oc: usize, bias_acc: &[i32]) -> Vec<i32> {
    let mut out = vec![0i32; h * w * oc];
    for r in 0..h {
        for c in 0..w {
            for o in 0..oc {
                let mut acc = bias_acc[o];
                for a in 0..3 {
                    for b in 0..3 {
                        let (rr, cc) = (r as isize + a as isize - 1, c as isize + b as isize - 1);
                        if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
                            continue;
                        }
                        for i in 0..ic {
                            let xv = x[(rr as usize * w + cc as usize) * ic + i] as i32;
                            acc += xv * wq[((o * 3 + a) * 3 + b) * ic + i] as i32;
                        }
                    }
                }
                out[(r * w + c) * oc + o] = acc;
            }
        }
    }
    out
}

#[test]
fn simulated_conv_matches_integer_reference() {
    let (h, w, ic, oc) = (6, 5, 3, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut p = ConvParams::zeros(oc, ic, 3, 3);
    p.weight.iter_mut().for_each(|v| *v = rng.random_range(-0.6..0.6));
    p.bias.iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3));
    let g = NetGraph::from_nodes(
        vec![
            Node::new("input", Layer::Input { bands: ic }, &[]),
            Node::new("cnv_out", Layer::Conv2d(p.clone()), &["input"]),
            Node::new("softmax", Layer::Softmax, &["cnv_out"]),
        ],
        oc,
    )
    .unwrap();
    let x = random_cube(&mut rng, h, w, ic, -1.0, 1.0);
    let table = calibrate(&g, std::slice::from_ref(&x), &QuantPolicy::default()).unwrap();
    let (px, pw, pb, po) = (
        *table.get("input").unwrap(),
        *table.get("cnv_out.weight").unwrap(),
        *table.get("cnv_out.bias").unwrap(),
        *table.get("cnv_out").unwrap(),
    );
    let xq: Vec<i8> = x.as_f32().unwrap().iter().map(|&v| px.quantize(v as f64) as i8).collect();
    let wq: Vec<i8> = p.weight.iter().map(|&v| pw.quantize(v as f64) as i8).collect();
    // Bias is shifted onto the accumulator grid, which is finer here.
    let acc_e = px.exponent + pw.exponent;
    assert!(pb.exponent >= acc_e);
    let bias_acc: Vec<i32> = p.bias.iter().map(|&v| pb.quantize(v as f64) << (pb.exponent - acc_e)).collect();
    let acc = conv_i8(&xq, h, w, ic, &wq, oc, &bias_acc);
    let logits: Vec<f64> = acc.iter().map(|&a| po.fake(a as f64 * (acc_e as f64).exp2())).collect();
    let expect = kernels::softmax(&FeatureMap { n: 1, h, w, c: oc, data: logits });
    let got = QuantizedModel::new(&g, &table).unwrap().forward_map(to_f64_map(&x).unwrap()).unwrap();
    assert_eq!(got.data, expect.data);
}

fn fused_pair(seed: u64) -> (NetGraph, NetGraph) {
    let g = small_unet(seed);
    let stats = ChannelStats {
        th: vec![0.149, 0.12, 0.1],
        min: vec![0.0, 0.01, 0.02],
        max: vec![0.149, 0.12, 0.1],
    };
    let fused = g.fuse_symmetric_norm(&NormalizationParams::from_stats(&stats)).unwrap();
    (fold_bn(&g).unwrap(), fold_bn(&fused).unwrap())
}

#[test]
fn float_drift_between_fused_and_explicit_is_zero() {
    let (e, f) = fused_pair(5);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let eval: Vec<Tensor> = (0..3).map(|_| random_cube(&mut rng, 8, 8, 3, 0.0, 0.149)).collect();
    let d = requantization_drift(&e, &f, None, None, &eval).unwrap();
    assert_eq!(d.mean_fraction, 0.0);
    assert_eq!(d.maps.len(), 3);
    assert!(d.maps.iter().all(|m| m.len() == 64 && m.iter().all(|&c| !c)));
}

#[test]
fn identical_models_and_tables_never_drift() {
    let g = fold_bn(&small_unet(6)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let eval: Vec<Tensor> = (0..2).map(|_| random_cube(&mut rng, 8, 8, 3, -1.0, 1.0)).collect();
    let t = calibrate(&g, &eval, &QuantPolicy::default()).unwrap();
    let d = requantization_drift(&g, &g, Some(&t), Some(&t), &eval).unwrap();
    assert_eq!(d.mean_fraction, 0.0);
    let other = fold_bn(&small_unet(7)).unwrap();
    assert!(matches!(requantization_drift(&g, &other, None, None, &eval), Err(Error::InvalidArgument(_))));
}

#[test]
fn quantized_fused_pair_runs_and_reports_maps() {
    let (e, f) = fused_pair(8);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let raw: Vec<Tensor> = (0..3).map(|_| random_cube(&mut rng, 8, 8, 3, 0.0, 0.149)).collect();
    let (_, norm) = split_fused(&f).unwrap();
    let normalized: Vec<Tensor> = raw
        .iter()
        .map(|x| {
            let fm = FeatureMap { n: 1, h: 8, w: 8, c: 3, data: x.as_f32().unwrap().to_vec() };
            Tensor::from_f32(8, 8, 3, Layout::Bip, kernels::channel_affine(&fm, &norm.weight, &norm.bias).data).unwrap()
        })
        .collect();
    let te = calibrate(&e, &normalized, &QuantPolicy::default()).unwrap();
    let tf = calibrate(&f, &raw, &QuantPolicy { input_mode: QuantMode::Affine, ..QuantPolicy::default() }).unwrap();
    assert!(tf.params.contains_key("norm.weight") && tf.params.contains_key("norm"));
    let d = requantization_drift(&e, &f, Some(&te), Some(&tf), &raw).unwrap();
    assert!((0.0..=1.0).contains(&d.mean_fraction));
    let labels: Vec<Vec<u8>> = (0..3).map(|k| (0..64).map(|p| ((p % 8 >= 4) as u8 + k) % 3).collect()).collect();
    let share = d.boundary_share(&labels, 8).unwrap();
    assert!((0.0..=1.0).contains(&share));
}

#[test]
fn boundary_share_by_hand() {
    let d = DriftReport {
        mean_fraction: 0.5,
        per_image: vec![0.5],
        maps: vec![vec![true, false, false, true]],
    };
    // Labels [0, 0 | 1, 1] on a 2x2 grid: every pixel touches the other row.
    assert_eq!(d.boundary_share(&[vec![0, 0, 1, 1]], 2).unwrap(), 1.0);
    assert_eq!(d.boundary_share(&[vec![2, 2, 2, 2]], 2).unwrap(), 0.0);
    assert!(d.boundary_share(&[vec![0; 3]], 2).is_err());
}

#[test]
fn agreement_counts_matching_pixels() {
    let g = fold_and_equalize(&small_unet(9), 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let cubes: Vec<Tensor> = (0..2).map(|_| random_cube(&mut rng, 8, 8, 3, -1.0, 1.0)).collect();
    let table = calibrate(&g, &cubes, &QuantPolicy::default()).unwrap();
    let q = QuantizedModel::new(&g, &table).unwrap();
    let a = argmax_agreement(&g, &q, &cubes).unwrap();
    let mut same = 0;
    for x in &cubes {
        same += g.predict(x).unwrap().iter().zip(q.predict(x).unwrap()).filter(|(p, r)| **p == *r).count();
    }
    assert_eq!(a, same as f64 / 128.0);
    assert!(argmax_agreement(&g, &q, &[]).is_err());
}
