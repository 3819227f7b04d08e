use rand::Rng;

use super::*;
use crate::tensorops::gradcheck::check_gradients;

fn tiny(direct: bool) -> ModelConfig {
    ModelConfig {
        feature_dim: 8,
        hidden_dim: 8,
        context_dim: 8,
        motion_dim: 16,
        levels: 2,
        radius: 2,
        rnn_blocks: 1,
        direct_regression: direct,
        ..ModelConfig::default()
    }
}

fn random_image(seed: u64, h: usize, w: usize) -> Tensor4<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor4::from_fn([1, 3, h, w], |_| rng.gen_range(0.0..1.0))
}

/// Add uniform noise to every weight so zero-initialized heads carry signal.
fn perturb<T: Scalar>(model: &mut Model<T>, scale: f64, seed: u64, skip: &[&str]) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (name, t) in model.params_mut().iter_mut() {
        let frozen = skip.iter().any(|s| name.starts_with(s));
        for v in t.value.data_mut() {
            let d = rng.gen_range(-scale..scale);
            if !frozen {
                *v += T::of(d);
            }
        }
    }
}

fn run(model: &Model<f64>, a: &Tensor4<f64>, b: &Tensor4<f64>, n: usize) -> Vec<Tensor4<f64>> {
    let mut g = Graph::new();
    let v = model.params().bind(&mut g, false);
    let (x, y) = (g.constant(a.clone()), g.constant(b.clone()));
    let preds = model.forward(&mut g, &v, x, y, n).unwrap();
    preds.iter().map(|p| g.value(p.flow).clone()).collect()
}

#[test]
fn forward_shapes_and_length() {
    let model = Model::<f64>::new(&tiny(true), LossKind::Mol, 0).unwrap();
    let (a, b) = (random_image(1, 24, 32), random_image(2, 24, 32));
    for n in [0, 3] {
        let mut g = Graph::new();
        let v = model.params().bind(&mut g, false);
        let (x, y) = (g.constant(a.clone()), g.constant(b.clone()));
        let preds = model.forward(&mut g, &v, x, y, n).unwrap();
        assert_eq!(preds.len(), n + 1);
        for p in &preds {
            assert_eq!(g.shape(p.flow), [1, 2, 24, 32]);
            assert_eq!(g.shape(p.info.unwrap()), [1, 2, 24, 32]);
        }
    }
    let state = {
        let mut g = Graph::new();
        let v = model.params().bind(&mut g, false);
        let (x, y) = (g.constant(a.clone()), g.constant(b.clone()));
        let s = model.encode_context(&mut g, &v, x, y).unwrap();
        (g.shape(s.context), g.shape(s.hidden), g.shape(s.flow), g.shape(s.info.unwrap()))
    };
    assert_eq!(state, ([1, 8, 3, 4], [1, 8, 3, 4], [1, 2, 3, 4], [1, 2, 3, 4]));
    let l1 = Model::<f64>::new(&tiny(true), LossKind::L1, 0).unwrap();
    let mut g = Graph::new();
    let v = l1.params().bind(&mut g, false);
    let (x, y) = (g.constant(a.clone()), g.constant(b));
    assert!(l1.forward(&mut g, &v, x, y, 1).unwrap().iter().all(|p| p.info.is_none()));
}

#[test]
fn feature_encoder_is_shared_and_alive() {
    let model = Model::<f64>::new(&tiny(true), LossKind::Mol, 3).unwrap();
    let a = random_image(4, 64, 64);
    let mut g = Graph::new();
    let v = model.params().bind(&mut g, false);
    let (x, y) = (g.constant(a.clone()), g.constant(a));
    let (f1, f2) = (
        model.encode_features(&mut g, &v, x).unwrap(),
        model.encode_features(&mut g, &v, y).unwrap(),
    );
    assert_eq!(g.shape(f1), [1, 8, 8, 8]);
    assert_eq!(g.value(f1), g.value(f2));
    let d = g.value(f1).data();
    assert!(d.iter().all(|x| x.is_finite()));
    let (lo, hi) = d.iter().fold((f64::MAX, f64::MIN), |(l, h), &x| (l.min(x), h.max(x)));
    assert!(hi - lo > 1e-3);
    let bad = g.constant(Tensor4::zeros([1, 3, 20, 16]));
    assert!(model.encode_features(&mut g, &v, bad).is_err());
    let gray = g.constant(Tensor4::zeros([1, 1, 16, 16]));
    assert!(model.encode_features(&mut g, &v, gray).is_err());
}

#[test]
fn fresh_model_predicts_zero_flow() {
    for direct in [true, false] {
        let model = Model::<f64>::new(&tiny(direct), LossKind::Mol, 5).unwrap();
        let a = random_image(6, 16, 16);
        for b in [a.clone(), random_image(7, 16, 16)] {
            for f in run(&model, &a, &b, 3) {
                assert!(f.data().iter().all(|&x| x == 0.0));
            }
        }
    }
}

#[test]
fn frame_mismatch_and_overrun_rejected() {
    let model = Model::<f64>::new(&tiny(true), LossKind::Mol, 0).unwrap();
    let mut g = Graph::new();
    let v = model.params().bind(&mut g, false);
    let x = g.constant(random_image(1, 16, 16));
    let y = g.constant(random_image(1, 16, 24));
    assert!(matches!(model.encode_context(&mut g, &v, x, y), Err(Error::Shape(_))));
    let y = g.constant(random_image(2, 16, 16));
    assert!(matches!(
        model.forward(&mut g, &v, x, y, 13),
        Err(Error::LoopOverrun { iteration: 13, limit: 12 })
    ));
    assert!(model.forward(&mut g, &v, x, y, 12).is_ok());
}

#[test]
fn zero_flow_head_keeps_flow_through_twelve_steps() {
    let mut model = Model::<f64>::new(&tiny(true), LossKind::Mol, 8).unwrap();
    perturb(&mut model, 0.05, 9, &["flow_head.conv1"]);
    let mut g = Graph::new();
    let v = model.params().bind(&mut g, false);
    let x = g.constant(random_image(10, 16, 24));
    let y = g.constant(random_image(11, 16, 24));
    let mut state = model.encode_context(&mut g, &v, x, y).unwrap();
    let f1 = model.encode_features(&mut g, &v, x).unwrap();
    let f2 = model.encode_features(&mut g, &v, y).unwrap();
    let pyr = build_pyramid(&mut g, f1, f2, 2).unwrap();
    // give the state a nonzero flow so "unchanged" is not trivially zero
    state.flow = g.constant(Tensor4::from_fn([1, 2, 2, 3], |[_, c, y, x]| 0.3 * c as f64 - 0.1 * (y + x) as f64));
    let start = g.value(state.flow).clone();
    let hidden_shape = g.shape(state.hidden);
    for i in 1..=12 {
        state = model.refine_step(&mut g, &v, &state, &pyr).unwrap();
        assert_eq!(state.iteration, i);
        assert_eq!(g.value(state.flow), &start);
        assert_eq!(g.shape(state.hidden), hidden_shape);
    }
    assert!(matches!(
        model.refine_step(&mut g, &v, &state, &pyr),
        Err(Error::LoopOverrun { iteration: 12, limit: 12 })
    ));
}

#[test]
fn iterations_are_prefix_consistent() {
    let mut model = Model::<f64>::new(&tiny(true), LossKind::Mol, 12).unwrap();
    perturb(&mut model, 0.05, 13, &[]);
    let (a, b) = (random_image(14, 16, 16), random_image(15, 16, 16));
    let short = run(&model, &a, &b, 4);
    let long = run(&model, &a, &b, 12);
    assert_eq!(long.len(), 13);
    assert_eq!(&long[..5], &short[..]);
    assert!(long[12].data().iter().all(|x| x.is_finite()));
}

/// Independent gather formulation: fine pixel `(Y, X)` pulls from parent
/// `(Y / f, X / f)` with mask channel `k * f * f + (Y % f) * f + X % f`.
fn upsample_oracle(x: &Tensor4<f64>, w: &Tensor4<f64>, f: usize) -> Tensor4<f64> {
    let [n, c, h, wd] = x.shape();
    Tensor4::from_fn([n, c, h * f, wd * f], |[b, ch, yy, xx]| {
        let (py, px, s) = (yy / f, xx / f, (yy % f) * f + xx % f);
        let mut acc = 0.0;
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let k = ((dy + 1) * 3 + dx + 1) as usize;
                let ny = (py as i64 + dy).clamp(0, h as i64 - 1) as usize;
                let nx = (px as i64 + dx).clamp(0, wd as i64 - 1) as usize;
                acc += w.at(b, k * f * f + s, py, px) * x.at(b, ch, ny, nx);
            }
        }
        acc
    })
}

#[test]
fn convex_upsample_matches_gather_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    for f in [1, 2, 8] {
        let x = Tensor4::from_fn([2, 3, 3, 4], |_| rng.gen_range(-2.0..2.0));
        let w = Tensor4::from_fn([2, 9 * f * f, 3, 4], |_| rng.gen_range(-1.0..1.0));
        let mut g = Graph::new();
        let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
        let out = convex_upsample(&mut g, xv, wv, f).unwrap();
        let want = upsample_oracle(&x, &w, f);
        let err = g.value(out).data().iter().zip(want.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-12);
    }
}

#[test]
fn convex_upsample_gradients_match_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let x = Tensor4::from_fn([1, 2, 3, 3], |_| rng.gen_range(-1.0..1.0));
    let w = Tensor4::from_fn([1, 36, 3, 3], |_| rng.gen_range(-1.0..1.0));
    let r = check_gradients(&[x, w], |g, v| convex_upsample(g, v[0], v[1], 2), 1e-5, None, 1).unwrap();
    assert!(r.max_err < 1e-8, "{r:?}");
}

#[test]
fn upsampling_preserves_constants_and_hulls() {
    let model = Model::<f64>::new(&tiny(true), LossKind::Mol, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let [h, w] = [3, 4];
    let mut g = Graph::new();
    // constant coarse flow with random mask logits
    let flow = g.constant(Tensor4::from_fn([1, 2, h, w], |[_, c, _, _]| if c == 0 { 0.75 } else { -1.25 }));
    let logits = g.constant(Tensor4::from_fn([1, 576, h, w], |_| rng.gen_range(-3.0..3.0)));
    let mask = g.softmax_channels(logits, 9).unwrap();
    let scaled = g.scale(flow, 8.0);
    let up = convex_upsample(&mut g, scaled, mask, 8).unwrap();
    for (i, &v) in g.value(up).data().iter().enumerate() {
        let want: f64 = if i < 32 * 24 { 6.0 } else { -10.0 };
        assert!((v - want).abs() < 1e-12);
    }
    // one-hot centre mask: nearest-neighbour times 8
    let coarse = Tensor4::from_fn([1, 2, h, w], |_| rng.gen_range(-2.0..2.0));
    let cv = g.constant(coarse.clone());
    let onehot = g.constant(Tensor4::from_fn([1, 576, h, w], |[_, c, _, _]| if c / 64 == 4 { 1.0 } else { 0.0 }));
    let cs = g.scale(cv, 8.0);
    let up = convex_upsample(&mut g, cs, onehot, 8).unwrap();
    let t = g.value(up);
    for c in 0..2 {
        for y in 0..8 * h {
            for x in 0..8 * w {
                assert_eq!(t.at(0, c, y, x), 8.0 * coarse.at(0, c, y / 8, x / 8));
            }
        }
    }
    // random mask: every fine vector is inside the hull of its scaled
    // neighbours, checked by support functions in 64 directions
    let ml = g.constant(Tensor4::from_fn([1, 576, h, w], |_| rng.gen_range(-4.0..4.0)));
    let m = g.softmax_channels(ml, 9).unwrap();
    let up = convex_upsample(&mut g, cs, m, 8).unwrap();
    let t = g.value(up);
    for y in 0..8 * h {
        for x in 0..8 * w {
            let p = [t.at(0, 0, y, x), t.at(0, 1, y, x)];
            let nbrs: Vec<[f64; 2]> = OFFSETS_FOR_TEST
                .iter()
                .map(|&(dy, dx)| {
                    let ny = (y as i64 / 8 + dy).clamp(0, h as i64 - 1) as usize;
                    let nx = (x as i64 / 8 + dx).clamp(0, w as i64 - 1) as usize;
                    [8.0 * coarse.at(0, 0, ny, nx), 8.0 * coarse.at(0, 1, ny, nx)]
                })
                .collect();
            for k in 0..64 {
                let a = k as f64 * std::f64::consts::TAU / 64.0;
                let d = [a.cos(), a.sin()];
                let sp = nbrs.iter().map(|q| d[0] * q[0] + d[1] * q[1]).fold(f64::MIN, f64::max);
                assert!(d[0] * p[0] + d[1] * p[1] <= sp + 1e-9);
            }
        }
    }
    // the model's own upsampler agrees on a fresh (uniform-mask) state
    let mut g = Graph::new();
    let v = model.params().bind(&mut g, false);
    let hidden = g.constant(Tensor4::from_fn([1, 8, h, w], |_| rng.gen_range(-1.0..1.0)));
    let state = RefineState {
        hidden,
        context: hidden,
        flow: g.constant(Tensor4::full([1, 2, h, w], 0.5)),
        info: None,
        iteration: 0,
    };
    let p = model.upsample(&mut g, &v, &state).unwrap();
    assert!(g.value(p.flow).data().iter().all(|&v| (v - 4.0).abs() < 1e-12));
}

const OFFSETS_FOR_TEST: [(i64, i64); 9] = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 0), (0, 1), (1, -1), (1, 0), (1, 1)];

/// Gradient of `sum(new flow)` with respect to an injected incoming flow.
fn incoming_flow_grad(model: &Model<f64>) -> Tensor4<f64> {
    let mut g = Graph::new();
    let v = model.params().bind(&mut g, false);
    let x = g.constant(random_image(20, 16, 16));
    let y = g.constant(random_image(21, 16, 16));
    let mut state = model.encode_context(&mut g, &v, x, y).unwrap();
    let f1 = model.encode_features(&mut g, &v, x).unwrap();
    let f2 = model.encode_features(&mut g, &v, y).unwrap();
    let pyr = build_pyramid(&mut g, f1, f2, 2).unwrap();
    let mu = g.param(Tensor4::from_fn([1, 2, 2, 2], |[_, c, y, x]| 0.37 + 0.21 * c as f64 - 0.43 * y as f64 + 0.29 * x as f64));
    state.flow = mu;
    let next = model.refine_step(&mut g, &v, &state, &pyr).unwrap();
    let s = g.sum(next.flow);
    g.backward_scalar(s).unwrap().get(mu).unwrap().clone()
}

#[test]
fn skip_path_gradient_is_stopped() {
    let mut model = Model::<f64>::new(&tiny(true), LossKind::Mol, 22).unwrap();
    perturb(&mut model, 0.05, 23, &[]);
    let stopped = incoming_flow_grad(&model);
    model.set_detach_flow(false);
    let full = incoming_flow_grad(&model);
    // the skip contributes exactly the identity, so removing the stop adds 1
    for (a, b) in full.data().iter().zip(stopped.data()) {
        assert!((a - b - 1.0).abs() < 1e-12, "{a} {b}");
    }
    // the motion path is non-trivial, so the stop does not zero everything
    assert!(stopped.data().iter().any(|v| v.abs() > 1e-6));
}

/// Loss of a tiny perturbed model on a 16x16 pair, as a function of every
/// weight tensor (in store order).
fn end_to_end_check(direct: bool, detach: bool, kind: LossKind, n_iters: usize, per_tensor: usize) -> f64 {
    let mut model = Model::<f64>::new(&tiny(direct), kind, 30).unwrap();
    perturb(&mut model, 0.05, 31, &[]);
    model.set_detach_flow(detach);
    let a = random_image(32, 16, 16);
    let b = random_image(33, 16, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    let gt = FlowField::from_fn(16, 16, |_, _| ([rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)], rng.gen_bool(0.9)));
    let target = Target::from_fields(&[&gt]).unwrap();
    let weights: Vec<Tensor4<f64>> = model.params().iter().map(|(_, t)| t.value.clone()).collect();
    let cfg = LossConfig::default();
    let r = check_gradients(
        &weights,
        |g, v| {
            let x = g.constant(a.clone());
            let y = g.constant(b.clone());
            let preds = model.forward(g, v, x, y, n_iters)?;
            model.sequence_loss(g, &preds, &target, &cfg)
        },
        1e-6,
        Some(per_tensor),
        35,
    )
    .unwrap();
    assert!(r.checked >= weights.len());
    r.max_err
}

#[test]
fn end_to_end_gradients_match_fd() {
    let e = end_to_end_check(true, false, LossKind::Mol, 2, 3);
    assert!(e < 1e-3, "direct regression: {e}");
    // without direct regression the first lookup sits at zero flow and a
    // single step has no detached path to differ on
    let e = end_to_end_check(false, true, LossKind::L1, 1, 3);
    assert!(e < 1e-3, "zero init: {e}");
}

#[test]
fn sequence_loss_skips_constant_initial_prediction() {
    let model = Model::<f64>::new(&tiny(false), LossKind::L1, 0).unwrap();
    let mut g = Graph::new();
    let v = model.params().bind(&mut g, false);
    let x = g.constant(random_image(1, 16, 16));
    let y = g.constant(random_image(2, 16, 16));
    let preds = model.forward(&mut g, &v, x, y, 2).unwrap();
    let gt = FlowField::constant(16, 16, 1.0, 0.0);
    let target = Target::from_fields(&[&gt]).unwrap();
    let l = model.sequence_loss(&mut g, &preds, &target, &LossConfig::default()).unwrap();
    // two zero predictions against unit flow, each with per-pixel L1 of 1
    let per = 1.0;
    assert!((g.value(l).data()[0] - (0.8 * per + per)).abs() < 1e-12);
}

#[test]
fn refinement_cost_is_constant_per_iteration() {
    let model = Model::<f64>::new(&tiny(true), LossKind::Mol, 0).unwrap();
    let s = model.summary(32, 32).unwrap();
    assert_eq!(s.parameters, model.params().count());
    assert!(s.iteration_macs > 0 && s.setup_macs > 0);
    let costs: Vec<u64> = (1..=3)
        .map(|n| {
            let mut g = Graph::new();
            let v = model.params().bind(&mut g, false);
            let x = g.constant(Tensor4::zeros([1, 3, 32, 32]));
            let y = g.constant(Tensor4::zeros([1, 3, 32, 32]));
            model.forward(&mut g, &v, x, y, n).unwrap();
            g.macs()
        })
        .collect();
    assert_eq!(costs[1] - costs[0], s.iteration_macs);
    assert_eq!(costs[2] - costs[1], s.iteration_macs);
}

#[test]
fn weights_round_trip_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.bin");
    let mut a = Model::<f64>::new(&tiny(true), LossKind::Mol, 40).unwrap();
    perturb(&mut a, 0.1, 41, &[]);
    a.save_weights(&path, &serde_json::json!({"note": "x"})).unwrap();
    let mut b = Model::<f64>::new(&tiny(true), LossKind::Mol, 42).unwrap();
    let meta = b.load_weights(&path).unwrap();
    assert_eq!(meta["note"], "x");
    for ((na, ta), (nb, tb)) in a.params().iter().zip(b.params().iter()) {
        assert_eq!(na, nb);
        assert_eq!(ta.value, tb.value);
    }
    // f32 models store f32 payloads and reload exactly
    let mut c = Model::<f32>::new(&tiny(true), LossKind::Mol, 43).unwrap();
    perturb(&mut c, 0.1, 44, &[]);
    c.save_weights(&path, &serde_json::Value::Null).unwrap();
    let mut d = Model::<f32>::new(&tiny(true), LossKind::Mol, 45).unwrap();
    d.load_weights(&path).unwrap();
    assert!(c.params().iter().zip(d.params().iter()).all(|(x, y)| x.1.value == y.1.value));
    // a differently shaped model refuses the archive
    let mut e = Model::<f32>::new(&ModelConfig { hidden_dim: 16, ..tiny(true) }, LossKind::Mol, 0).unwrap();
    assert!(e.load_weights(&path).is_err());
}

#[test]
fn damaged_archives_are_rejected() {
    let model = Model::<f64>::new(&tiny(true), LossKind::Mol, 0).unwrap();
    let bytes = encode_archive(&model.named_weights(), &serde_json::Value::Null);
    let p = Path::new("mem");
    assert!(decode_archive::<f64>(&bytes, p).is_ok());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode_archive::<f64>(&bad, p), Err(Error::Format { .. })));
    let mut bad = bytes.clone();
    bad[8] = 9;
    assert!(matches!(decode_archive::<f64>(&bad, p), Err(Error::Format { .. })));
    assert!(matches!(decode_archive::<f64>(&bytes[..bytes.len() - 1], p), Err(Error::Corrupt { .. })));
    let mut long = bytes.clone();
    long.push(0);
    assert!(matches!(decode_archive::<f64>(&long, p), Err(Error::Corrupt { .. })));
    assert!(matches!(decode_archive::<f64>(&bytes[..30], p), Err(Error::Corrupt { .. })));
}

#[test]
fn infer_returns_every_iteration() {
    let mut model = Model::<f32>::new(&tiny(true), LossKind::Mol, 0).unwrap();
    perturb(&mut model, 0.05, 1, &[]);
    let a = Image::from_fn(16, 24, |y, x| [(x as f32 / 24.0), (y as f32 / 16.0), 0.5]);
    let b = Image::from_fn(16, 24, |y, x| [((x + 1) as f32 / 24.0).min(1.0), (y as f32 / 16.0), 0.5]);
    let out = model.infer(&a, &b, 3).unwrap();
    assert_eq!(out.len(), 4);
    for o in &out {
        assert_eq!((o.flow.height(), o.flow.width()), (16, 24));
        let m = o.mol.as_ref().unwrap();
        assert!(m.alpha.data().iter().all(|&a| (0.0..=1.0).contains(&a)));
        assert!(m.beta2.data().iter().all(|&b| (0.0..=10.0).contains(&b)));
    }
}
