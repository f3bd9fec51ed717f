use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::nn::fd::rel_err;
use crate::nn::{batchnorm_forward, ConvGeometry};
use crate::nn::{conv2d_forward, Mode};
use crate::sparse::csr_from_rows;

pub(crate) fn tiny_cfg() -> NetConfig {
    NetConfig {
        image_shape: [3, 8, 8],
        conv: ConvSpec {
            first_kernel: 3,
            first_channels: 4,
            first_stride: 1,
            groups: vec![ConvGroupSpec {
                layers: 1,
                channels: 4,
                downsample: true,
            }],
        },
        image_tower: ImageTowerKind::Conv,
        embed_dim: 6,
        basic_dim: 20,
        basic_hidden: 5,
        comb_hidden: vec![8, 6],
        dropout_rate: 0.0,
        use_bn_comb: true,
        pretrain_hidden: vec![7],
        n_categories: 3,
    }
}

pub(crate) fn random_batch(cfg: &NetConfig, n: usize, k: usize, seed: u64) -> GroupedBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [c, h, w] = cfg.image_shape;
    let images = Tensor::from_fn(&[n, c, h, w], |_| rng.random());
    let rows: Vec<Vec<(usize, f64)>> = (0..n * k)
        .map(|_| {
            let mut idx: Vec<usize> = (0..cfg.basic_dim).collect();
            rand::seq::SliceRandom::shuffle(&mut idx[..], &mut rng);
            idx[..3].iter().map(|&j| (j, rng.random_range(0.5..1.5))).collect()
        })
        .collect();
    let mut labels: Vec<f64> = (0..n * k).map(|_| f64::from(rng.random_bool(0.5))).collect();
    labels[0] = 1.0;
    labels[1] = 0.0;
    GroupedBatch {
        groups: (0..n).collect(),
        images,
        features: csr_from_rows(&rows, cfg.basic_dim).unwrap(),
        labels,
        rows: (0..n * k).collect(),
        k,
        rng_after: ChaCha8Rng::seed_from_u64(0),
    }
}

/// The same batch with every image physically repeated per impression.
pub(crate) fn unrolled(b: &GroupedBatch) -> GroupedBatch {
    let idx: Vec<usize> = (0..b.num_rows()).map(|r| r / b.k).collect();
    GroupedBatch {
        groups: idx.iter().map(|&i| b.groups[i]).collect(),
        images: b.images.gather_rows(&idx),
        k: 1,
        ..b.clone()
    }
}

fn grads(net: &mut DeepCtrNet) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    net.visit(&mut |name, _, s| {
        if let Slot::Param(p) = s {
            out.push((name.to_string(), p.grad.clone()));
        }
    });
    out
}

fn nudge(net: &mut DeepCtrNet, name: &str, i: usize, delta: f64) {
    net.visit(&mut |n, _, s| {
        if let (true, Slot::Param(p)) = (n == name, s) {
            p.value.data_mut()[i] += delta;
        }
    });
}

/// Zero-initialised biases can park a ReLU input exactly on its kink; a
/// random offset moves the check to a generic point.
fn jitter_biases(net: &mut DeepCtrNet, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb1a5);
    net.visit(&mut |name, _, s| {
        if let (true, Slot::Param(p)) = (name.ends_with(".b") || name.ends_with("beta"), s) {
            p.value
                .data_mut()
                .iter_mut()
                .for_each(|v| *v += rng.random_range(-0.1..0.1));
        }
    });
}

/// Max-norm difference of two gradient tensors relative to `floor`, the
/// largest gradient anywhere in the network. Biases that feed batch norm
/// have a true gradient of exactly zero, so a per-tensor scale would only
/// compare rounding noise.
fn tensor_rel_diff(a: &Tensor, c: &Tensor, floor: f64) -> f64 {
    let scale = a.max_abs().max(c.max_abs()).max(floor);
    a.data()
        .iter()
        .zip(c.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
        / scale
}

fn global_scale(g: &[(String, Tensor)]) -> f64 {
    g.iter().map(|(_, t)| t.max_abs()).fold(0.0, f64::max)
}

/// Central difference at the largest step whose forward and backward slopes
/// agree, i.e. no ReLU kink lies within the step. `None` if every step
/// straddles a kink.
pub(crate) fn smooth_central_diff(mut f: impl FnMut(f64) -> f64) -> Option<f64> {
    let f0 = f(0.0);
    for h in [1e-5, 1e-6, 1e-7] {
        let (up, down) = (f(h), f(-h));
        let (fwd, back) = ((up - f0) / h, (f0 - down) / h);
        if rel_err(fwd, back) < 1e-2 {
            return Some((up - down) / (2.0 * h));
        }
    }
    None
}

fn batch_loss(net: &mut DeepCtrNet, b: &GroupedBatch) -> f64 {
    let z = net.forward(&b.images, &b.features, b.k, Mode::Train).unwrap();
    sigmoid_logloss(&z, &b.labels, 0.0, 0.0).unwrap().0
}

#[test]
fn parameter_count_matches_closed_form() {
    for tower in [ImageTowerKind::Conv, ImageTowerKind::Frozen, ImageTowerKind::None] {
        for bn in [true, false] {
            let cfg = NetConfig {
                image_tower: tower,
                use_bn_comb: bn,
                ..NetConfig::default()
            };
            let (mut net, _) = build_networks(&cfg, 0).unwrap();
            assert_eq!(net.num_params(), cfg.num_params(), "{:?} bn={}", tower, bn);
        }
    }
    let cfg = NetConfig::default();
    assert_eq!(cfg.comb_input_width(), 128 + cfg.basic_hidden);
    // 5x5x3x16+16+32, two 3x3x16x16+16+32, 3x3x16x32+32+64, 3x3x32x32+32+64
    let conv = (1200 + 48) + 2 * (2304 + 48) + (4608 + 96) + (9216 + 96);
    let expect = conv + (32 * 128 + 128) + (2048 * 128 + 128) + 2 * 256 + (256 * 256 + 256) + (256 * 128 + 128) + 129;
    assert_eq!(cfg.num_params(), expect);
}

#[test]
fn same_seed_same_parameters() {
    let cfg = tiny_cfg();
    let (a, ha) = build_networks(&cfg, 4).unwrap();
    let (b, hb) = build_networks(&cfg, 4).unwrap();
    assert_eq!(a, b);
    assert_eq!(ha, hb);
    let (c, _) = build_networks(&cfg, 5).unwrap();
    assert_ne!(a.basic, c.basic);
}

#[test]
fn invalid_configs_rejected() {
    let mut cfg = tiny_cfg();
    cfg.dropout_rate = 1.0;
    assert!(build_networks(&cfg, 0).is_err());
    let mut cfg = tiny_cfg();
    cfg.image_shape = [3, 0, 8];
    assert!(build_networks(&cfg, 0).is_err());
    let mut cfg = tiny_cfg();
    cfg.conv.first_kernel = 4;
    assert!(build_networks(&cfg, 0).is_err());
    let mut cfg = tiny_cfg();
    cfg.comb_hidden.clear();
    assert!(build_networks(&cfg, 0).is_err());
}

#[test]
fn convnet_output_shapes_and_finiteness() {
    let (mut net, _) = build_networks(&NetConfig::default(), 1).unwrap();
    let zero = Tensor::zeros(&[3, 3, 32, 32]);
    let f = net.image_features(&zero, Mode::Train).unwrap().unwrap();
    assert_eq!(f.shape(), &[3, 128]);
    assert!(f.is_finite());
    let f = net.image_features(&zero, Mode::Eval).unwrap().unwrap();
    assert!(f.is_finite());
}

#[test]
fn convnet_equals_manual_composition() {
    let cfg = tiny_cfg();
    let (mut net, _) = build_networks(&cfg, 2).unwrap();
    let b = random_batch(&cfg, 3, 1, 9);
    let mut manual_layers = net.convnet().unwrap().layers.clone();
    let pooled = net.convnet_mut().unwrap().forward(&b.images, Mode::Train).unwrap();
    let mut x = b.images.clone();
    for l in &mut manual_layers {
        let y = conv2d_forward(&x, &l.params, l.geom).unwrap();
        x = relu(&batchnorm_forward(&y, &mut l.bn, Mode::Train).unwrap());
    }
    let manual = global_avg_pool(&x).unwrap();
    assert_eq!(pooled, manual);
    assert_eq!(net.convnet().unwrap().layers[1].geom, ConvGeometry::new(2, 1));
}

#[test]
fn grouped_forward_equals_unrolled() {
    let cfg = tiny_cfg();
    let b = random_batch(&cfg, 2, 3, 1);
    let u = unrolled(&b);
    for mode in [Mode::Train, Mode::Eval] {
        let (mut net, _) = build_networks(&cfg, 3).unwrap();
        let (zg, yg) = deepctr_forward(&mut net, &b, mode).unwrap();
        let (zu, _) = deepctr_forward(&mut net, &u, mode).unwrap();
        for (a, c) in zg.data().iter().zip(zu.data()) {
            assert!((a - c).abs() <= 1e-12, "{a} vs {c}");
        }
        assert!(yg.data().iter().all(|&p| p > 0.0 && p < 1.0));
    }
}

#[test]
fn identical_impressions_give_identical_predictions() {
    let cfg = tiny_cfg();
    let mut b = random_batch(&cfg, 2, 3, 5);
    let row0 = b.features.row_pairs(0);
    let rows: Vec<Vec<(usize, f64)>> = (0..6)
        .map(|r| if r < 3 { row0.clone() } else { b.features.row_pairs(r) })
        .collect();
    b.features = csr_from_rows(&rows, cfg.basic_dim).unwrap();
    let (mut net, _) = build_networks(&cfg, 3).unwrap();
    let (z, _) = deepctr_forward(&mut net, &b, Mode::Train).unwrap();
    assert_eq!(z.data()[0], z.data()[1]);
    assert_eq!(z.data()[1], z.data()[2]);
}

#[test]
fn predictions_follow_row_permutation_within_group() {
    let cfg = tiny_cfg();
    let b = random_batch(&cfg, 2, 3, 6);
    let perm = [2usize, 0, 1, 3, 5, 4];
    let mut p = b.clone();
    let rows: Vec<Vec<(usize, f64)>> = perm.iter().map(|&r| b.features.row_pairs(r)).collect();
    p.features = csr_from_rows(&rows, cfg.basic_dim).unwrap();
    p.labels = perm.iter().map(|&r| b.labels[r]).collect();
    let (mut net, _) = build_networks(&cfg, 3).unwrap();
    let (z, _) = deepctr_forward(&mut net, &b, Mode::Train).unwrap();
    let (zp, _) = deepctr_forward(&mut net, &p, Mode::Train).unwrap();
    for (i, &r) in perm.iter().enumerate() {
        assert!((zp.data()[i] - z.data()[r]).abs() < 1e-12);
    }
}

#[test]
fn exact_mode_gradients_match_finite_differences() {
    let cfg = tiny_cfg();
    let (mut checked, mut kinked) = (0usize, 0usize);
    for seed in 0..20 {
        let b = random_batch(&cfg, 2, 3, 100 + seed);
        let (mut net, _) = build_networks(&cfg, seed).unwrap();
        jitter_biases(&mut net, seed);
        forward_backward(&mut net, &b, 0.0, GradMode::Exact).unwrap();
        let analytic = grads(&mut net);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, g) in &analytic {
            // every coordinate of small tensors, a sample of large ones
            let coords: Vec<usize> = if g.len() <= 64 {
                (0..g.len()).collect()
            } else {
                (0..24).map(|_| rng.random_range(0..g.len())).collect()
            };
            for i in coords {
                checked += 1;
                let numeric = smooth_central_diff(|d| {
                    nudge(&mut net, name, i, d);
                    let l = batch_loss(&mut net, &b);
                    nudge(&mut net, name, i, -d);
                    l
                });
                let Some(numeric) = numeric else {
                    kinked += 1;
                    continue;
                };
                let e = rel_err(g.data()[i], numeric);
                assert!(
                    e < 1e-4,
                    "seed {seed} {name}[{i}]: {} vs {numeric} ({e:e})",
                    g.data()[i]
                );
            }
        }
    }
    assert!(
        kinked * 100 <= checked,
        "{kinked} of {checked} coordinates sit on a kink"
    );
}

#[test]
fn paper_mode_scales_only_the_image_pathway() {
    let cfg = tiny_cfg();
    let k = 3;
    let b = random_batch(&cfg, 2, k, 7);
    let (mut net, _) = build_networks(&cfg, 7).unwrap();
    let mut paper = net.clone();
    let le = forward_backward(&mut net, &b, 0.0, GradMode::Exact).unwrap();
    let lp = forward_backward(&mut paper, &b, 0.0, GradMode::Paper).unwrap();
    assert_eq!(le, lp);
    let (ge_all, gp_all) = (grads(&mut net), grads(&mut paper));
    let floor = global_scale(&ge_all);
    for ((name, ge), (_, gp)) in ge_all.iter().zip(gp_all.iter()) {
        let image_path = name.starts_with("conv") || name.starts_with("embed");
        let mut scaled = ge.clone();
        if image_path {
            scaled.scale(1.0 / k as f64);
        }
        assert!(
            tensor_rel_diff(&scaled, gp, floor) <= 1e-10,
            "{name}: {:?} vs {:?}",
            scaled.data(),
            gp.data()
        );
    }
}

#[test]
fn exact_grouped_gradients_equal_unrolled() {
    let cfg = tiny_cfg();
    let b = random_batch(&cfg, 2, 3, 8);
    let (mut net, _) = build_networks(&cfg, 8).unwrap();
    let mut flat = net.clone();
    forward_backward(&mut net, &b, 0.0, GradMode::Exact).unwrap();
    forward_backward(&mut flat, &unrolled(&b), 0.0, GradMode::Exact).unwrap();
    let (ga, gc) = (grads(&mut net), grads(&mut flat));
    let floor = global_scale(&ga);
    for ((name, a), (_, c)) in ga.iter().zip(gc.iter()) {
        assert!(
            tensor_rel_diff(a, c, floor) <= 1e-10,
            "{name}: {:?} vs {:?}",
            a.data(),
            c.data()
        );
    }
}

#[test]
fn k_one_modes_agree() {
    let cfg = tiny_cfg();
    let b = random_batch(&cfg, 4, 1, 2);
    let (mut a, _) = build_networks(&cfg, 1).unwrap();
    let mut p = a.clone();
    forward_backward(&mut a, &b, 0.0, GradMode::Exact).unwrap();
    forward_backward(&mut p, &b, 0.0, GradMode::Paper).unwrap();
    assert_eq!(grads(&mut a), grads(&mut p));
}

#[test]
fn loss_includes_decay_term() {
    let cfg = tiny_cfg();
    let b = random_batch(&cfg, 2, 3, 2);
    let (mut net, _) = build_networks(&cfg, 1).unwrap();
    let l0 = forward_backward(&mut net, &b, 0.0, GradMode::Paper).unwrap();
    let l1 = forward_backward(&mut net, &b, 1e-3, GradMode::Paper).unwrap();
    let sq = net.weight_sq_norm();
    assert!((l1 - l0 - 1e-3 * sq).abs() < 1e-12);
}

#[test]
fn fused_batchnorm_centres_each_feature() {
    let cfg = NetConfig {
        dropout_rate: 0.0,
        ..tiny_cfg()
    };
    let b = random_batch(&cfg, 4, 5, 3);
    let (mut net, _) = build_networks(&cfg, 3).unwrap();
    let conv = net.image_features(&b.images, Mode::Train).unwrap().unwrap();
    let basic = relu(&sparse_fc_forward(&b.features, &net.basic).unwrap());
    let fused = concat_cols(&[&replicate_image_features(&conv, b.k), &basic]).unwrap();
    let mut bn = net.comb.bn.clone().unwrap();
    let y = batchnorm_forward(&fused, &mut bn, Mode::Train).unwrap();
    let (rows, cols) = y.dims2().unwrap();
    for c in 0..cols {
        let mean: f64 = (0..rows).map(|r| y.row(r)[c]).sum::<f64>() / rows as f64;
        assert!(mean.abs() < 1e-10);
    }
}

#[test]
fn pretraining_updates_the_shared_conv_stack() {
    let cfg = tiny_cfg();
    let (mut net, mut head) = build_networks(&cfg, 1).unwrap();
    let before = net.convnet().unwrap().layers[0].params.weights.value.clone();
    let b = random_batch(&cfg, 4, 1, 3);
    {
        let mut p = net.pretrain_net(&mut head).unwrap();
        pretrain_forward_backward(&mut p, &b.images, &[0, 1, 2, 0]).unwrap();
        p.visit(&mut |_, _, s| {
            if let Slot::Param(p) = s {
                let g = p.grad.clone();
                p.value.axpy(-0.1, &g).unwrap();
            }
        });
    }
    assert_ne!(net.convnet().unwrap().layers[0].params.weights.value, before);
    let (mut basic_only, mut h) = build_networks(
        &NetConfig {
            image_tower: ImageTowerKind::None,
            ..cfg
        },
        1,
    )
    .unwrap();
    assert!(basic_only.pretrain_net(&mut h).is_err());
}

#[test]
fn pretrain_initial_loss_near_uniform() {
    let cfg = NetConfig {
        n_categories: 4,
        ..NetConfig::default()
    };
    let mut total = 0.0;
    for seed in 0..5 {
        let (mut net, mut head) = build_networks(&cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let images = Tensor::from_fn(&[16, 3, 32, 32], |_| rng.random());
        let labels: Vec<usize> = (0..16).map(|i| i % 4).collect();
        let mut p = net.pretrain_net(&mut head).unwrap();
        total += pretrain_forward_backward(&mut p, &images, &labels).unwrap();
    }
    let mean = total / 5.0;
    let ln4 = 4f64.ln();
    assert!((mean / ln4 - 1.0).abs() < 0.2, "mean first loss {mean}");
}

#[test]
fn pretrain_gradients_match_finite_differences() {
    let cfg = tiny_cfg();
    let b = random_batch(&cfg, 4, 1, 11);
    let labels = [0usize, 2, 1, 2];
    let (mut net, mut head) = build_networks(&cfg, 11).unwrap();
    let mut p = net.pretrain_net(&mut head).unwrap();
    pretrain_forward_backward(&mut p, &b.images, &labels).unwrap();
    let mut analytic = Vec::new();
    p.visit(&mut |n, _, s| {
        if let Slot::Param(q) = s {
            analytic.push((n.to_string(), q.grad.clone()));
        }
    });
    let loss = |p: &mut PretrainNet<'_>| {
        let logits = p.forward(&b.images, Mode::Train).unwrap();
        softmax_cross_entropy(&logits, &labels).unwrap().0
    };
    for (name, g) in &analytic {
        for i in (0..g.len()).step_by(1 + g.len() / 16) {
            let h = 1e-5;
            let set = |p: &mut PretrainNet<'_>, d: f64| {
                p.visit(&mut |n, _, s| {
                    if let (true, Slot::Param(q)) = (n == name, s) {
                        q.value.data_mut()[i] += d;
                    }
                })
            };
            set(&mut p, h);
            let up = loss(&mut p);
            set(&mut p, -2.0 * h);
            let down = loss(&mut p);
            set(&mut p, h);
            let numeric = (up - down) / (2.0 * h);
            assert!(rel_err(g.data()[i], numeric) < 1e-4, "{name}[{i}]");
        }
    }
}

#[test]
fn input_gradient_matches_finite_differences() {
    let cfg = NetConfig {
        dropout_rate: 0.3,
        ..tiny_cfg()
    };
    let (mut net, _) = build_networks(&cfg, 12).unwrap();
    // warm the running statistics so eval mode is not the identity
    let b = random_batch(&cfg, 4, 2, 12);
    forward_backward(&mut net, &b, 0.0, GradMode::Paper).unwrap();
    let image = b.images.gather_rows(&[1]).reshape(&[3, 8, 8]).unwrap();
    let row = b.features.gather_rows(&[0]);
    let g = net.input_gradient(&image, &row).unwrap();
    assert_eq!(g.shape(), &[3, 8, 8]);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let z_at = |net: &mut DeepCtrNet, img: &Tensor| {
        let x = img.clone().reshape(&[1, 3, 8, 8]).unwrap();
        net.forward(&x, &row, 1, Mode::Eval).unwrap().data()[0]
    };
    for _ in 0..10 {
        let i = rng.random_range(0..g.len());
        let h = 1e-5;
        let mut up = image.clone();
        up.data_mut()[i] += h;
        let mut down = image.clone();
        down.data_mut()[i] -= h;
        let numeric = (z_at(&mut net, &up) - z_at(&mut net, &down)) / (2.0 * h);
        assert!(
            rel_err(g.data()[i], numeric) < 1e-4,
            "pixel {i}: {} vs {numeric}",
            g.data()[i]
        );
    }
}

#[test]
fn predict_matches_batch_forward_in_eval() {
    use crate::data::{Dataset, ImageStore, Impression};
    let cfg = tiny_cfg();
    let b = random_batch(&cfg, 3, 2, 13);
    let mut store = ImageStore::in_memory();
    let mut imps = Vec::new();
    for r in 0..6 {
        let id = format!("i{}", r / 2);
        store.insert(id.clone(), b.images.gather_rows(&[r / 2]).reshape(&[3, 8, 8]).unwrap());
        imps.push(Impression::new(id, b.labels[r] as u8, b.features.row_pairs(r)));
    }
    let ds = Dataset::new(imps, cfg.basic_dim, &store).unwrap();
    let (mut net, _) = build_networks(&cfg, 13).unwrap();
    forward_backward(&mut net, &b, 0.0, GradMode::Paper).unwrap();
    let (z, _) = deepctr_forward(&mut net, &b, Mode::Eval).unwrap();
    let p = net.predict_logits(&ds, &[5, 0, 3, 1, 2, 4]).unwrap();
    for (i, &r) in [5usize, 0, 3, 1, 2, 4].iter().enumerate() {
        assert!((p[i] - z.data()[r]).abs() < 1e-12);
    }
}
