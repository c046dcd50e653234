use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use relcorr_core::cca::*;
use relcorr_core::graph::Graph;
use relcorr_tensor::{conv4d_macs, conv4d_separable_macs, NormMode, ParamSet, Tape, Tensor, EPS};

fn widen(t: &Tensor<f32>) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

fn full_params(cfg: &CcaConfig, c: usize, seed: u64) -> (ParamSet<f32>, ParamSet<f32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut p, mut b) = (ParamSet::new(), ParamSet::new());
    cfg.init_params(c, &mut p, &mut b, &mut rng);
    (p, b)
}

#[test]
fn reduce_channels_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let f = Tensor::<f32>::randn(&[1, 4, 4, 16], 1.0, &mut rng);
    let mut eye = Tensor::zeros(&[16, 16]);
    for i in 0..16 {
        eye.set(&[i, i], 1.0);
    }
    let w = Tensor::<f32>::randn(&[16, 4], 1.0, &mut rng);
    for (weight, check) in [(eye, 0), (Tensor::zeros(&[16, 4]), 1), (w.clone(), 2)] {
        let mut p = ParamSet::new();
        p.insert("cca.reduce.weight", weight);
        let mut tape = Tape::new();
        let mut g = Graph::bind(&mut tape, &p, false, None, NormMode::Eval);
        let fv = g.tape.constant(f.clone());
        let y = reduce_channels(&mut g, fv).unwrap();
        let y = tape.value(y).clone();
        match check {
            0 => assert_eq!(y, f),
            1 => assert!(y.data().iter().all(|&v| v == 0.0) && y.shape() == [1, 4, 4, 4]),
            _ => {
                let want = relcorr_oracles::pointwise(&widen(&f), 16, 16, &widen(&w), 4);
                for (a, b) in y.data().iter().zip(&want) {
                    assert!((*a as f64 - b).abs() < 1e-6);
                }
            }
        }
    }
}

fn xcorr(a: &Tensor<f32>, b: &Tensor<f32>) -> Tensor<f32> {
    let mut tape = Tape::new();
    let (av, bv) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let c = cross_correlation(&mut tape, av, bv).unwrap();
    tape.value(c).clone()
}

#[test]
fn cross_correlation_self_pair_is_symmetric_with_unit_diagonal() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let f = Tensor::<f32>::randn(&[1, 3, 3, 8], 1.0, &mut rng);
    let c = xcorr(&f, &f);
    for i in 0..9 {
        assert!((c.data()[i * 9 + i] - 1.0).abs() < 1e-6);
        for j in 0..9 {
            assert_eq!(c.data()[i * 9 + j], c.data()[j * 9 + i]);
        }
    }
}

#[test]
fn cross_correlation_orthogonal_features_are_zero() {
    let mut a = Tensor::<f32>::zeros(&[1, 2, 2, 8]);
    let mut b = Tensor::<f32>::zeros(&[1, 2, 2, 8]);
    for p in 0..4 {
        a.set(&[0, p / 2, p % 2, p], 1.0 + p as f32);
        b.set(&[0, p / 2, p % 2, 4 + p], 2.0);
    }
    assert!(xcorr(&a, &b).data().iter().all(|&v| v == 0.0));
}

#[test]
fn cross_correlation_matches_loop_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = Tensor::<f32>::randn(&[1, 4, 4, 8], 1.0, &mut rng);
    let b = Tensor::<f32>::randn(&[1, 4, 4, 8], 1.0, &mut rng);
    let want = relcorr_oracles::cross_correlation(&widen(&a), &widen(&b), 16, 8, EPS);
    for (x, y) in xcorr(&a, &b).data().iter().zip(&want) {
        assert!((*x as f64 - y).abs() < 1e-6);
    }
    let mut tape = Tape::<f32>::new();
    let (av, cv) = (tape.constant(a), tape.constant(Tensor::zeros(&[1, 4, 3, 8])));
    assert!(cross_correlation(&mut tape, av, cv).is_err());
}

fn layer(p: &ParamSet<f32>, mode: KernelMode, x: &Tensor<f32>) -> Tensor<f32> {
    let mut tape = Tape::new();
    let mut g = Graph::bind(&mut tape, p, false, None, NormMode::Eval);
    let xv = g.tape.constant(x.clone());
    let y = conv4d_layer(&mut g, xv, "k", mode).unwrap();
    tape.value(y).clone()
}

fn delta(shape: &[usize], center: &[usize]) -> Tensor<f32> {
    let mut t = Tensor::zeros(shape);
    t.set(center, 1.0);
    t
}

#[test]
fn vanilla_4d_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = Tensor::<f32>::uniform(&[1, 4, 4, 4, 4, 1], -1.0, 1.0, &mut rng);
    let mut p = ParamSet::new();
    p.insert("k.kernel", delta(&[3, 3, 3, 3, 1, 1], &[1, 1, 1, 1, 0, 0]));
    assert_eq!(layer(&p, KernelMode::Vanilla, &x), x);
    p.insert("k.kernel", Tensor::uniform(&[3, 3, 3, 3, 1, 1], -1.0, 1.0, &mut rng));
    assert!(layer(&p, KernelMode::Vanilla, &Tensor::zeros(&[1, 4, 4, 4, 4, 1])).data().iter().all(|&v| v == 0.0));
    let k = p.get("k.kernel").unwrap().clone();
    let want = relcorr_oracles::conv4d(&widen(&x), 1, [4, 4, 4, 4], 1, &widen(&k), 1);
    for (a, b) in layer(&p, KernelMode::Vanilla, &x).data().iter().zip(&want) {
        assert!((*a as f64 - b).abs() < 1e-5);
    }
}

#[test]
fn separable_4d_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Tensor::<f32>::uniform(&[2, 3, 4, 4, 3, 2], -1.0, 1.0, &mut rng);
    let mut p = ParamSet::new();
    p.insert("k.plane_q", {
        let mut t = Tensor::zeros(&[3, 3, 2]);
        t.set(&[1, 1, 0], 1.0);
        t.set(&[1, 1, 1], 1.0);
        t
    });
    p.insert("k.plane_s", p.get("k.plane_q").unwrap().clone());
    p.insert("k.point", Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    assert_eq!(layer(&p, KernelMode::Separable, &x), x);

    p.insert("k.plane_q", Tensor::zeros(&[3, 3, 2]));
    assert!(layer(&p, KernelMode::Separable, &x).data().iter().all(|&v| v == 0.0));

    for _ in 0..5 {
        let (kq, ks) = (Tensor::uniform(&[3, 3, 2], -1.0, 1.0, &mut rng), Tensor::uniform(&[3, 3, 2], -1.0, 1.0, &mut rng));
        let pw = Tensor::uniform(&[2, 3], -1.0, 1.0, &mut rng);
        p.insert("k.plane_q", kq.clone());
        p.insert("k.plane_s", ks.clone());
        p.insert("k.point", pw.clone());
        let d = [3, 4, 4, 3];
        let a = relcorr_oracles::plane_conv(&widen(&x), 2, d, 2, &widen(&kq), true);
        let b = relcorr_oracles::plane_conv(&a, 2, d, 2, &widen(&ks), false);
        let want = relcorr_oracles::pointwise(&b, x.numel() / 2, 2, &widen(&pw), 3);
        let got = layer(&p, KernelMode::Separable, &x);
        assert_eq!(got.shape(), &[2, 3, 4, 4, 3, 3]);
        for (g, w) in got.data().iter().zip(&want) {
            assert!((*g as f64 - w).abs() < 1e-5);
        }
    }
}

#[test]
fn separable_counts_fewer_multiply_adds() {
    let positions = 5usize.pow(4);
    for (ci, co) in [(1, 16), (16, 1), (16, 16)] {
        assert!(conv4d_separable_macs(positions, ci, co) < conv4d_macs(positions, ci, co));
    }
}

fn refine(cfg: &CcaConfig, corr: &Tensor<f32>, seed: u64) -> (Tensor<f32>, Vec<Vec<usize>>) {
    let (p, b) = full_params(cfg, 8, seed);
    let mut tape = Tape::new();
    let mut g = Graph::bind(&mut tape, &p, false, Some(&b), NormMode::Train);
    let cv = g.tape.constant(corr.clone());
    let y = matching_block_h(&mut g, cfg, cv).unwrap();
    let shapes = tape.entries().filter(|&v| tape.op_name(v) == "batch_norm").map(|v| tape.shape(v).to_vec()).collect();
    (tape.value(y).clone(), shapes)
}

#[test]
fn refined_correlation_is_standardized() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for kernel in [KernelMode::Separable, KernelMode::Vanilla] {
        let cfg = CcaConfig { kernel, ..Default::default() };
        let corr = Tensor::<f32>::uniform(&[3, 4, 4, 4, 4], -1.0, 1.0, &mut rng);
        let (y, bn) = refine(&cfg, &corr, 7);
        assert_eq!(bn, vec![vec![3 * 256, 16]]);
        for pair in y.data().chunks(256) {
            let mean = pair.iter().map(|&v| v as f64).sum::<f64>() / 256.0;
            let var = pair.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / 256.0;
            assert!(mean.abs() < 1e-4 && (var - 1.0).abs() < 1e-3, "{mean} {var}");
        }
    }
    let cfg = CcaConfig { norm_scope: NormScope::Slice, ..Default::default() };
    let corr = Tensor::<f32>::uniform(&[1, 3, 3, 3, 3], -1.0, 1.0, &mut rng);
    let (y, _) = refine(&cfg, &corr, 8);
    for row in y.data().chunks(9) {
        assert!(row.iter().map(|&v| v as f64).sum::<f64>().abs() < 1e-4);
    }
}

fn attend(c: &Tensor<f32>, gamma: f64, side: Side) -> Tensor<f32> {
    let mut tape = Tape::new();
    let cv = tape.constant(c.clone());
    let a = co_attention(&mut tape, cv, gamma, side).unwrap();
    tape.value(a).clone()
}

#[test]
fn co_attention_cases() {
    let a = attend(&Tensor::zeros(&[1, 5, 5, 5, 5]), 5.0, Side::Query);
    assert!(a.data().iter().all(|&v| (v - 0.04).abs() < 1e-7));
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let c = Tensor::<f32>::randn(&[2, 3, 4, 3, 4], 2.0, &mut rng);
    for gamma in [5.0, 2.0] {
        for side in [Side::Query, Side::Support] {
            let a = attend(&c, gamma, side);
            for m in a.data().chunks(12) {
                assert!((m.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
        let a = attend(&c, gamma, Side::Query);
        let want = relcorr_oracles::co_attention(&widen(&c)[..144], 12, gamma, true);
        for (x, y) in a.data()[..12].iter().zip(&want) {
            assert!((*x as f64 - y).abs() < 1e-6);
        }
    }
    let mut tape = Tape::new();
    let cv = tape.constant(c);
    assert!(co_attention(&mut tape, cv, 0.0, Side::Query).is_err());
}

fn pool(f: &Tensor<f32>, a: &Tensor<f32>) -> Tensor<f32> {
    let mut tape = Tape::new();
    let (fv, av) = (tape.constant(f.clone()), tape.constant(a.clone()));
    let y = attentive_pool(&mut tape, fv, av).unwrap();
    tape.value(y).clone()
}

#[test]
fn attentive_pool_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let f = Tensor::<f32>::randn(&[1, 3, 3, 4], 1.0, &mut rng);
    let uniform = pool(&f, &Tensor::full(&[1, 3, 3], 1.0 / 9.0));
    for c in 0..4 {
        let mean = (0..9).map(|p| f.data()[p * 4 + c] as f64).sum::<f64>() / 9.0;
        assert!((uniform.data()[c] as f64 - mean).abs() < 1e-6);
    }
    let mut one = Tensor::zeros(&[1, 3, 3]);
    one.set(&[0, 2, 1], 1.0);
    assert_eq!(pool(&f, &one).data(), &f.data()[7 * 4..8 * 4]);
    let raw: Vec<f32> = (0..9).map(|_| rng.gen_range(0.01..1.0)).collect();
    let total: f32 = raw.iter().sum();
    let a = Tensor::new(&[1, 3, 3], raw.iter().map(|v| v / total).collect()).unwrap();
    let got = pool(&f, &a);
    for c in 0..4 {
        let want: f64 = (0..9).map(|p| a.data()[p] as f64 * f.data()[p * 4 + c] as f64).sum();
        assert!((got.data()[c] as f64 - want).abs() < 1e-6);
    }
    let mut tape = Tape::new();
    let (fv, av) = (tape.constant(f), tape.constant(Tensor::<f32>::zeros(&[1, 2, 3])));
    assert!(attentive_pool(&mut tape, fv, av).is_err());
}

fn embed(cfg: &CcaConfig, maps: &Tensor<f32>, pairs: &[(usize, usize)], p: &ParamSet<f32>, b: &ParamSet<f32>) -> (Tensor<f32>, Tensor<f32>, Option<Tensor<f32>>) {
    let mut tape = Tape::new();
    let mut g = Graph::bind(&mut tape, p, false, Some(b), NormMode::Train);
    let mv = g.tape.constant(maps.clone());
    let e = relational_embed_pairs(&mut g, cfg, mv, pairs).unwrap();
    (tape.value(e.q).clone(), tape.value(e.s).clone(), e.corr.map(|c| tape.value(c).clone()))
}

#[test]
fn off_mode_returns_global_averages() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let maps = Tensor::<f32>::randn(&[2, 3, 3, 4], 1.0, &mut rng);
    let cfg = CcaConfig { mode: CcaMode::Off, ..Default::default() };
    let (q, s, corr) = embed(&cfg, &maps, &[(0, 1)], &ParamSet::new(), &ParamSet::new());
    assert!(corr.is_none());
    for c in 0..4 {
        let m = |i: usize| (0..9).map(|p| maps.data()[i * 36 + p * 4 + c] as f64).sum::<f64>() / 9.0;
        assert!((q.data()[c] as f64 - m(0)).abs() < 1e-6);
        assert!((s.data()[c] as f64 - m(1)).abs() < 1e-6);
    }
}

#[test]
fn identical_inputs_give_identical_embeddings() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let one = Tensor::<f32>::randn(&[1, 4, 4, 8], 1.0, &mut rng);
    let maps = Tensor::new(&[2, 4, 4, 8], [one.data(), one.data()].concat()).unwrap();
    let np = CcaConfig { mode: CcaMode::Nonparametric, ..Default::default() };
    let (q, s, _) = embed(&np, &maps, &[(0, 1)], &ParamSet::new(), &ParamSet::new());
    assert!(q.max_abs_diff(&s) < 1e-6);

    let cfg = CcaConfig { c_prime: 4, ..Default::default() };
    let (mut p, b) = full_params(&cfg, 8, 13);
    for layer in ["cca.h1", "cca.h2"] {
        let kq = p.get(&format!("{layer}.plane_q")).unwrap().clone();
        p.insert(format!("{layer}.plane_s"), kq);
    }
    let (q, s, _) = embed(&cfg, &maps, &[(0, 1)], &p, &b);
    assert!(q.max_abs_diff(&s) < 1e-6, "{}", q.max_abs_diff(&s));
}

#[test]
fn nonparametric_mode_uses_raw_correlation() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let maps = Tensor::<f32>::randn(&[2, 3, 3, 4], 1.0, &mut rng);
    let np = CcaConfig { mode: CcaMode::Nonparametric, ..Default::default() };
    let (_, _, corr) = embed(&np, &maps, &[(1, 0)], &ParamSet::new(), &ParamSet::new());
    let raw = xcorr(
        &Tensor::new(&[1, 3, 3, 4], maps.data()[36..].to_vec()).unwrap(),
        &Tensor::new(&[1, 3, 3, 4], maps.data()[..36].to_vec()).unwrap(),
    );
    assert_eq!(corr.unwrap().data(), raw.data());
}

#[test]
fn matrix_form_matches_attention_path() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let cfg = CcaConfig { c_prime: 8, ..Default::default() };
    for inst in 0..30 {
        let (p, b) = full_params(&cfg, 16, 100 + inst);
        let maps = Tensor::<f32>::randn(&[2, 5, 5, 16], 1.0, &mut rng);
        let (q, s, corr) = embed(&cfg, &maps, &[(0, 1)], &p, &b);
        let corr = corr.unwrap();
        let (mq, ms) = relational_embed_matform(&maps.data()[..400], &maps.data()[400..], corr.data(), 25, cfg.gamma).unwrap();
        for (a, m) in q.data().iter().zip(&mq).chain(s.data().iter().zip(&ms)) {
            assert!((a - m).abs() < 1e-6, "instance {inst}: {a} vs {m}");
        }
    }
}

#[test]
fn matrix_form_trivial_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let fq = Tensor::<f64>::randn(&[9, 3], 1.0, &mut rng);
    let fs = Tensor::<f64>::randn(&[9, 3], 1.0, &mut rng);
    let (q, s) = relational_embed_matform(fq.data(), fs.data(), &[0.0; 81], 9, 5.0).unwrap();
    for c in 0..3 {
        let mq = (0..9).map(|p| fq.data()[p * 3 + c]).sum::<f64>() / 9.0;
        let ms = (0..9).map(|p| fs.data()[p * 3 + c]).sum::<f64>() / 9.0;
        assert!((q[c] - mq).abs() < 1e-12 && (s[c] - ms).abs() < 1e-12);
    }
    let (q, s) = relational_embed_matform(&[1.0, 2.0], &[3.0, 4.0], &[0.7], 1, 2.0).unwrap();
    assert_eq!((q, s), (vec![1.0, 2.0], vec![3.0, 4.0]));
}
