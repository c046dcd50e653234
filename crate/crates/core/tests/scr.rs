use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use relcorr_core::graph::Graph;
use relcorr_core::scr::{scr_block_g, scr_forward, self_correlation, ScrConfig};
use relcorr_tensor::{NormMode, ParamSet, Tape, Tensor, EPS};

fn widen(t: &Tensor<f32>) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

fn corr(z: &Tensor<f32>, du: usize, dv: usize, group: usize) -> Tensor<f32> {
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone());
    let r = self_correlation(&mut tape, zv, du, dv, group).unwrap();
    tape.value(r).clone()
}

fn params_for(cfg: &ScrConfig, c: usize, seed: u64, random_out: bool) -> (ParamSet<f32>, ParamSet<f32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut p, mut b) = (ParamSet::new(), ParamSet::new());
    cfg.init_params(c, &mut p, &mut b, &mut rng);
    if random_out {
        let cp = cfg.c_prime;
        p.insert("scr.pw_out.weight", Tensor::randn(&[cp, c], 0.3, &mut rng));
        p.insert("scr.pw_out.bias", Tensor::randn(&[c], 0.3, &mut rng));
        for name in p.names().to_vec() {
            if name.ends_with(".shift") || name.ends_with(".scale") {
                let n = p.get(&name).unwrap().numel();
                let base = if name.ends_with(".scale") { 1.0 } else { 0.0 };
                p.insert(name, Tensor::<f32>::randn(&[n], 0.2, &mut rng).map(|v| v + base));
            }
        }
    }
    (p, b)
}

fn batch_norm_rows(x: &mut [f64], f: usize, scale: &[f64], shift: &[f64]) {
    let rows = x.len() / f;
    for j in 0..f {
        let mean = (0..rows).map(|r| x[r * f + j]).sum::<f64>() / rows as f64;
        let var = (0..rows).map(|r| (x[r * f + j] - mean).powi(2)).sum::<f64>() / rows as f64;
        for r in 0..rows {
            let v = (x[r * f + j] - mean) / (var + EPS).sqrt() * scale[j] + shift[j];
            x[r * f + j] = v.max(0.0);
        }
    }
}

/// Block g evaluated layer by layer with nested loops, train-mode norms.
fn g_oracle(r: &[f64], (positions, u, cg): (usize, usize, usize), cfg: &ScrConfig, p: &ParamSet<f32>) -> Vec<f64> {
    let w = |n: &str| widen(p.get(n).unwrap());
    let cp = cfg.c_prime;
    let mut x = relcorr_oracles::pointwise(r, positions * u * u, cg, &w("scr.pw_in.weight"), cp);
    batch_norm_rows(&mut x, cp, &w("scr.bn_in.scale"), &w("scr.bn_in.shift"));
    let mut extent = u;
    for k in 0..cfg.du {
        let (y, (oh, _)) =
            relcorr_oracles::conv2d(&x, (positions, extent, extent, cp), &w(&format!("scr.conv{k}.weight")), (3, 3, cp), 1, 0);
        extent = oh;
        x = y;
        batch_norm_rows(&mut x, cp, &w(&format!("scr.bn{k}.scale")), &w(&format!("scr.bn{k}.shift")));
    }
    let c = p.get("scr.pw_out.bias").unwrap().numel();
    let mut y = relcorr_oracles::pointwise(&x, positions, cp, &w("scr.pw_out.weight"), c);
    let bias = w("scr.pw_out.bias");
    for (i, v) in y.iter_mut().enumerate() {
        *v += bias[i % c];
    }
    y
}

fn run_g(cfg: &ScrConfig, p: &ParamSet<f32>, b: &ParamSet<f32>, r: &Tensor<f32>) -> Tensor<f32> {
    let mut tape = Tape::new();
    let mut g = Graph::bind(&mut tape, p, false, Some(b), NormMode::Train);
    let rv = g.tape.constant(r.clone());
    let y = scr_block_g(&mut g, cfg, rv).unwrap();
    tape.value(y).clone()
}

#[test]
fn unit_window_self_product_sums_to_one() {
    let z = Tensor::new(&[1, 1, 1, 2], vec![3.0f32, 4.0]).unwrap();
    let r = corr(&z, 0, 0, 1);
    assert_eq!(r.shape(), &[1, 1, 1, 1, 1, 2]);
    assert!((r.data()[0] - 0.36).abs() < 1e-6 && (r.data()[1] - 0.64).abs() < 1e-6);
    assert!((r.sum() - 1.0).abs() < 1e-6);
}

#[test]
fn off_map_offsets_are_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let z = Tensor::<f32>::randn(&[1, 3, 3, 4], 1.0, &mut rng);
    let r = corr(&z, 1, 1, 1);
    for c in 0..4 {
        assert_eq!(r.at(&[0, 0, 0, 0, 0, c]), 0.0);
        assert_eq!(r.at(&[0, 2, 2, 2, 2, c]), 0.0);
    }
}

#[test]
fn self_correlation_matches_loop_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let z = Tensor::<f32>::randn(&[1, 4, 4, 8], 1.0, &mut rng);
    let r = corr(&z, 1, 1, 1);
    let want = relcorr_oracles::self_correlation(&widen(&z), (4, 4, 8), 1, 1, 1, EPS);
    for (a, b) in r.data().iter().zip(&want) {
        assert!((*a as f64 - b).abs() < 1e-6);
    }
}

#[test]
fn grouped_full_width_is_cosine() {
    let same = Tensor::new(&[1, 1, 2, 3], vec![1.0f32, 2.0, 3.0, 2.0, 4.0, 6.0]).unwrap();
    let r = corr(&same, 0, 1, 3);
    // in-map offsets: (x=0, p=+1) and (x=1, p=-1), plus the centres
    assert!((r.at(&[0, 0, 0, 0, 2, 0]) - 1.0).abs() < 1e-6);
    assert!((r.at(&[0, 0, 1, 0, 0, 0]) - 1.0).abs() < 1e-6);
    assert!((r.at(&[0, 0, 0, 0, 1, 0]) - 1.0).abs() < 1e-6);
    assert_eq!(r.at(&[0, 0, 0, 0, 0, 0]), 0.0);
    let orth = Tensor::new(&[1, 1, 2, 2], vec![1.0f32, 0.0, 0.0, 1.0]).unwrap();
    assert_eq!(corr(&orth, 0, 1, 2).at(&[0, 0, 0, 0, 2, 0]), 0.0);
}

#[test]
fn grouped_matches_group_loop_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let z = Tensor::<f32>::randn(&[1, 4, 4, 8], 1.0, &mut rng);
    let r = corr(&z, 1, 1, 2);
    assert_eq!(r.shape(), &[1, 4, 4, 3, 3, 4]);
    let want = relcorr_oracles::self_correlation(&widen(&z), (4, 4, 8), 1, 1, 2, EPS);
    for (a, b) in r.data().iter().zip(&want) {
        assert!((*a as f64 - b).abs() < 1e-6);
    }
}

#[test]
fn non_divisor_group_is_rejected() {
    let mut tape = Tape::<f32>::new();
    let z = tape.constant(Tensor::ones(&[1, 2, 2, 6]));
    assert!(self_correlation(&mut tape, z, 1, 1, 4).is_err());
    assert!(ScrConfig { group_size: 4, ..Default::default() }.validate(6, 5).is_err());
    assert!(ScrConfig { du: 2, dv: 1, ..Default::default() }.validate(8, 5).is_err());
}

#[test]
fn window_five_shrinks_to_one_in_two_layers() {
    let cfg = ScrConfig { c_prime: 4, ..Default::default() };
    assert_eq!(cfg.window(), (5, 5));
    assert_eq!(cfg.layers(), 2);
    let (p, b) = params_for(&cfg, 8, 4, true);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let r = Tensor::<f32>::uniform(&[1, 2, 2, 5, 5, 8], -1.0, 1.0, &mut rng);
    let mut tape = Tape::new();
    let mut g = Graph::bind(&mut tape, &p, false, Some(&b), NormMode::Train);
    let rv = g.tape.constant(r);
    let y = scr_block_g(&mut g, &cfg, rv).unwrap();
    let extents: Vec<Vec<usize>> = tape
        .entries()
        .filter(|&v| tape.op_name(v) == "conv2d")
        .map(|v| tape.shape(v).to_vec())
        .collect();
    assert_eq!(extents, vec![vec![4, 3, 3, 4], vec![4, 1, 1, 4]]);
    assert_eq!(tape.shape(y), &[1, 2, 2, 8]);
}

#[test]
fn zero_correlation_gives_zero_output() {
    let cfg = ScrConfig { c_prime: 4, du: 1, dv: 1, ..Default::default() };
    let (mut p, b) = params_for(&cfg, 8, 6, false);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    p.insert("scr.pw_out.weight", Tensor::randn(&[4, 8], 1.0, &mut rng));
    let y = run_g(&cfg, &p, &b, &Tensor::zeros(&[1, 2, 2, 3, 3, 8]));
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn block_g_matches_loop_reference() {
    let cfg = ScrConfig { c_prime: 4, ..Default::default() };
    for seed in 0..5 {
        let (p, b) = params_for(&cfg, 8, 10 + seed, true);
        let mut rng = ChaCha8Rng::seed_from_u64(20 + seed);
        let r = Tensor::<f32>::uniform(&[2, 2, 3, 5, 5, 8], -1.0, 1.0, &mut rng);
        let y = run_g(&cfg, &p, &b, &r);
        let want = g_oracle(&widen(&r), (12, 5, 8), &cfg, &p);
        for (a, w) in y.data().iter().zip(&want) {
            assert!((*a as f64 - w).abs() < 1e-5, "{a} vs {w}");
        }
    }
}

fn forward(cfg: &ScrConfig, p: &ParamSet<f32>, b: &ParamSet<f32>, z: &Tensor<f32>) -> Tensor<f32> {
    let mut tape = Tape::new();
    let mut g = Graph::bind(&mut tape, p, false, Some(b), NormMode::Train);
    let zv = g.tape.constant(z.clone());
    let f = scr_forward(&mut g, cfg, zv).unwrap();
    tape.value(f).clone()
}

#[test]
fn zero_initialized_output_layer_is_identity() {
    let cfg = ScrConfig { c_prime: 4, ..Default::default() };
    let (p, b) = params_for(&cfg, 8, 30, false);
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let z = Tensor::<f32>::randn(&[2, 5, 5, 8], 1.0, &mut rng);
    assert_eq!(forward(&cfg, &p, &b, &z), z);
    let off = ScrConfig { enabled: false, ..cfg };
    let f = forward(&off, &p, &b, &z);
    assert!(f.data().iter().zip(z.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn forward_matches_composed_oracles() {
    let cfg = ScrConfig { c_prime: 4, du: 1, dv: 1, group_size: 1, enabled: true };
    let (p, b) = params_for(&cfg, 8, 40, true);
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let z = Tensor::<f32>::randn(&[1, 4, 4, 8], 1.0, &mut rng);
    let f = forward(&cfg, &p, &b, &z);
    let zd = widen(&z);
    let r = relcorr_oracles::self_correlation(&zd, (4, 4, 8), 1, 1, 1, EPS);
    let g = g_oracle(&r, (16, 3, 8), &cfg, &p);
    for ((a, gv), zv) in f.data().iter().zip(&g).zip(&zd) {
        assert!((*a as f64 - (gv + zv)).abs() < 1e-5);
    }
}

#[test]
fn output_shape_equals_input_over_config_matrix() {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    for (d, group, cp) in [(0, 1, 4), (1, 1, 4), (2, 1, 8), (1, 2, 4), (2, 8, 3), (1, 4, 2)] {
        let cfg = ScrConfig { enabled: true, du: d, dv: d, c_prime: cp, group_size: group };
        cfg.validate(8, 5).unwrap();
        let (p, b) = params_for(&cfg, 8, 51, true);
        let z = Tensor::<f32>::randn(&[2, 5, 5, 8], 1.0, &mut rng);
        assert_eq!(forward(&cfg, &p, &b, &z).shape(), z.shape());
    }
}

#[test]
fn earlier_layers_receive_gradient_after_first_update() {
    let cfg = ScrConfig { c_prime: 4, du: 1, dv: 1, ..Default::default() };
    let (mut p, b) = params_for(&cfg, 8, 60, false);
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let z = Tensor::<f32>::randn(&[1, 4, 4, 8], 1.0, &mut rng);
    let target = Tensor::<f32>::randn(&[1, 4, 4, 8], 1.0, &mut rng);
    let mut sgd = relcorr_tensor::Sgd::new(0.1, 0.9, vec![]).unwrap();
    let mut norms = Vec::new();
    for _ in 0..2 {
        let mut tape = Tape::new();
        let mut g = Graph::bind(&mut tape, &p, true, Some(&b), NormMode::Train);
        let zv = g.tape.constant(z.clone());
        let f = scr_forward(&mut g, &cfg, zv).unwrap();
        let vars: HashMap<String, relcorr_tensor::Var> = g.var_map().clone();
        let t = tape.constant(target.clone());
        let d = tape.sub(f, t).unwrap();
        let sq = tape.mul(d, d).unwrap();
        let loss = tape.mean_all(sq).unwrap();
        let mut grads = tape.backward(loss).unwrap();
        let gs: Vec<Option<Tensor<f32>>> = p.names().iter().map(|n| grads.take(vars[n])).collect();
        let norm = |name: &str| {
            let i = p.names().iter().position(|n| n == name).unwrap();
            gs[i].as_ref().map_or(0.0, |g| g.data().iter().map(|v| v.abs()).sum::<f32>())
        };
        norms.push((norm("scr.pw_in.weight"), norm("scr.conv0.weight"), norm("scr.pw_out.weight")));
        sgd.step(&mut p, &gs, 0).unwrap();
    }
    assert_eq!(norms[0].0, 0.0);
    assert!(norms[0].2 > 0.0);
    assert!(norms[1].0 > 0.0 && norms[1].1 > 0.0, "{norms:?}");
}
