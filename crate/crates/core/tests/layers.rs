use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vntpose_core::geometry::{sample_rigid, RigidTransform};
use vntpose_core::layers::{
    func, run_stack, run_stack_features, vn_batchnorm, vn_invariant, vn_linear, vn_meanpool, vnt_leaky_relu,
    vnt_linear, vnt_maxpool, Contract, Ctx, Features, Layer, LayerKind, Mode, NonlinearityConfig, ParamStore,
    RowStochasticWeights, VectorFeature, VectorFeatureSet,
};
use vntpose_core::{Tape, Tensor};

type V3 = [f64; 3];

fn random_set(rng: &mut ChaCha8Rng, n: usize, c: usize) -> VectorFeatureSet {
    let feats = (0..n)
        .map(|_| VectorFeature::new((0..c).map(|_| [0; 3].map(|_| rng.random_range(-1.0..1.0))).collect()).unwrap())
        .collect();
    VectorFeatureSet::new(feats).unwrap()
}

fn param(store: &ParamStore, name: &str) -> Tensor {
    store.param(store.find_param(name).unwrap()).clone()
}

fn stochastic(store: &ParamStore, name: &str) -> RowStochasticWeights {
    RowStochasticWeights::from_free(param(store, name)).unwrap()
}

fn run(layer: &Layer, store: &ParamStore, input: &VectorFeatureSet, mode: Mode) -> VectorFeatureSet {
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, store, mode, false);
    let x = ctx.tape.constant(input.to_tensor()).unwrap();
    let y = layer.forward(&mut ctx, x).unwrap();
    VectorFeatureSet::from_tensor(tape.value(y)).unwrap()
}

fn per_point(set: &VectorFeatureSet, f: impl Fn(&VectorFeature) -> VectorFeature) -> VectorFeatureSet {
    VectorFeatureSet::new((0..set.points()).map(|n| f(&set.feature(n))).collect()).unwrap()
}

fn rigid(g: &RigidTransform) -> impl Fn(V3) -> V3 + '_ {
    move |v| g.apply_point(v)
}

const EXACT: f64 = 1e-12;

#[test]
fn linear_layers_match_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let vnt = Layer::vnt_linear(&mut store, "a", 5, 4, &mut rng).unwrap();
    let vn = Layer::vn_linear(&mut store, "b", 5, 4, &mut rng).unwrap();
    let x = random_set(&mut rng, 7, 5);
    let w = stochastic(&store, "a.w");
    let want = per_point(&x, |v| vnt_linear(v, &w).unwrap());
    assert!(run(&vnt, &store, &x, Mode::Train).max_abs_diff(&want) < EXACT);
    let w = param(&store, "b.w");
    let want = per_point(&x, |v| vn_linear(v, &w).unwrap());
    assert!(run(&vn, &store, &x, Mode::Train).max_abs_diff(&want) < EXACT);
}

#[test]
fn leaky_relu_layers_match_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for shared in [true, false] {
        let cfg = NonlinearityConfig { alpha: 0.2, shared_direction: shared };
        let mut store = ParamStore::new();
        let layer = Layer::vnt_linear_leaky_relu(&mut store, "l", 4, 6, cfg, &mut rng).unwrap();
        let (q, k, o) = (stochastic(&store, "l.q"), stochastic(&store, "l.k"), stochastic(&store, "l.o"));
        let x = random_set(&mut rng, 9, 4);
        let want = per_point(&x, |v| {
            let (qv, kv, ov) = (vnt_linear(v, &q).unwrap(), vnt_linear(v, &k).unwrap(), vnt_linear(v, &o).unwrap());
            let rows = (0..6)
                .map(|c| {
                    let d = if shared { 0 } else { c };
                    vnt_leaky_relu(qv.rows()[c], kv.rows()[d], ov.rows()[d], 0.2).unwrap()
                })
                .collect();
            VectorFeature::new(rows).unwrap()
        });
        assert!(run(&layer, &store, &x, Mode::Train).max_abs_diff(&want) < EXACT);

        let mut store = ParamStore::new();
        let layer = Layer::vn_linear_leaky_relu(&mut store, "m", 4, 6, cfg, &mut rng).unwrap();
        let (q, k) = (param(&store, "m.q"), param(&store, "m.k"));
        let want = per_point(&x, |v| {
            let (qv, kv) = (vn_linear(v, &q).unwrap(), vn_linear(v, &k).unwrap());
            let rows = (0..6)
                .map(|c| func::vn_leaky_relu(qv.rows()[c], kv.rows()[if shared { 0 } else { c }], 0.2).unwrap())
                .collect();
            VectorFeature::new(rows).unwrap()
        });
        assert!(run(&layer, &store, &x, Mode::Train).max_abs_diff(&want) < EXACT);
    }
}

#[test]
fn pooling_layers_match_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let max = Layer::vnt_maxpool(&mut store, "p", 4, &mut rng).unwrap();
    let mean = Layer::mean_pool("q", 4);
    let x = random_set(&mut rng, 11, 4);
    let sel = vnt_maxpool(&x, &stochastic(&store, "p.k"), &stochastic(&store, "p.o")).unwrap();
    let got = run(&max, &store, &x, Mode::Train);
    assert_eq!(got.points(), 1);
    assert!(got.feature(0).max_abs_diff(&sel.feature) < EXACT);
    let got = run(&mean, &store, &x, Mode::Train);
    assert!(got.feature(0).max_abs_diff(&vn_meanpool(&x)) < EXACT);
}

#[test]
fn translation_invariant_layer_matches_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    let layer = Layer::translation_invariant(&mut store, "t", 5, &mut rng).unwrap();
    let head = stochastic(&store, "t.head");
    let x = random_set(&mut rng, 6, 5);
    let want = per_point(&x, |v| {
        let pooled = vnt_linear(v, &head).unwrap();
        func::translation_invariant(&VectorFeatureSet::new(vec![v.clone()]).unwrap(), &pooled)
            .unwrap()
            .feature(0)
    });
    assert!(run(&layer, &store, &x, Mode::Train).max_abs_diff(&want) < EXACT);
}

#[test]
fn rotation_invariant_layer_matches_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let frame = vec![Layer::vn_linear(&mut store, "f", 4, 3, &mut rng).unwrap()];
    let layer = Layer::rotation_invariant("r", frame).unwrap();
    let w = param(&store, "f.w");
    let x = random_set(&mut rng, 5, 4);
    let want = vn_invariant(&x, |v| vn_linear(v, &w)).unwrap();
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, &store, Mode::Train, false);
    let xv = ctx.tape.constant(x.to_tensor()).unwrap();
    let y = layer.forward(&mut ctx, xv).unwrap();
    let got = VectorFeatureSet::from_tensor(tape.value(y)).unwrap();
    for n in 0..5 {
        for c in 0..4 {
            for j in 0..3 {
                assert!((got.get(n, c)[j] - want[n][c * 3 + j]).abs() < EXACT);
            }
        }
    }
    let m = layer.invariant_max(&mut Ctx::new(&mut tape, &store, Mode::Train, false), xv).unwrap();
    let maxed = tape.value(m).data();
    for i in 0..12 {
        let best = (0..5).map(|n| want[n][i]).fold(f64::NEG_INFINITY, f64::max);
        assert!((maxed[i] - best).abs() < EXACT);
    }
}

#[test]
fn batchnorm_matches_reference_and_tracks_running_stats() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut store = ParamStore::new();
    let layer = Layer::vn_batchnorm(&mut store, "bn", 3, 0.9).unwrap();
    let id = store.find_param("bn.gamma").unwrap();
    *store.param_mut(id) = Tensor::new(&[3, 1], vec![0.5, 1.0, 2.0]).unwrap();
    let x = random_set(&mut rng, 8, 3);
    let want = vn_batchnorm(std::slice::from_ref(&x), &[0.5, 1.0, 2.0]).unwrap();
    assert!(run(&layer, &store, &x, Mode::Train).max_abs_diff(&want[0]) < EXACT);

    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, &store, Mode::Train, false);
    ctx.set_record_stats(true);
    let xv = ctx.tape.constant(x.to_tensor()).unwrap();
    layer.forward(&mut ctx, xv).unwrap();
    let stats = ctx.take_stats();
    assert_eq!(stats.len(), 1);
    let means = func::channel_mean_norms(std::slice::from_ref(&x)).unwrap();
    for (r, m) in stats[0].1.data().iter().zip(&means) {
        assert!((r - (0.9 + 0.1 * m)).abs() < EXACT);
    }

    // Eval normalizes with the stored running norms (all ones here).
    let got = run(&layer, &store, &x, Mode::Eval);
    let want = x.map(|v| v);
    for n in 0..8 {
        for (c, g) in [0.5, 1.0, 2.0].iter().enumerate() {
            let f = g / (1.0 + func::BATCHNORM_EPS);
            for j in 0..3 {
                assert!((got.get(n, c)[j] - f * want.get(n, c)[j]).abs() < EXACT);
            }
        }
    }
}

#[test]
fn factored_features_equal_explicit_concatenation() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::new();
    let net = vec![Layer::vn_linear_leaky_relu(&mut store, "n", 4, 3, NonlinearityConfig::default(), &mut rng).unwrap()];
    let stack = vec![
        Layer::pool_concat("pc", 4, net).unwrap(),
        Layer::vn_linear_leaky_relu(&mut store, "after", 7, 5, NonlinearityConfig::default(), &mut rng).unwrap(),
        Layer::pool_concat("pc2", 5, Vec::new()).unwrap(),
        Layer::vn_linear(&mut store, "out", 10, 2, &mut rng).unwrap(),
    ];
    let x = random_set(&mut rng, 6, 4);
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, &store, Mode::Train, false);
    let xv = ctx.tape.constant(x.to_tensor()).unwrap();
    let fused = run_stack_features(&stack, &mut ctx, Features::Dense(xv)).unwrap().materialize(&mut ctx).unwrap();
    let mut explicit = xv;
    for l in &stack {
        explicit = l.forward(&mut ctx, explicit).unwrap();
    }
    let diff = tape.value(fused).max_abs_diff(tape.value(explicit));
    assert!(diff < 1e-14, "{diff:e}");

    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, &store, Mode::Train, false);
    let xv = ctx.tape.constant(x.to_tensor()).unwrap();
    let pc = stack[0].forward(&mut ctx, xv).unwrap();
    let got = VectorFeatureSet::from_tensor(ctx.tape.value(pc)).unwrap();
    let mean = vn_meanpool(&x);
    for n in 0..6 {
        for c in 0..4 {
            assert_eq!(got.get(n, c), x.get(n, c));
        }
        // the appended channels are identical at every point
        for c in 4..7 {
            assert_eq!(got.get(n, c), got.get(0, c));
        }
    }
    let plain = Layer::pool_concat("plain", 4, Vec::new()).unwrap();
    let out = run_stack(std::slice::from_ref(&plain), &mut ctx, xv).unwrap();
    let appended = VectorFeatureSet::from_tensor(tape.value(out)).unwrap();
    for c in 0..4 {
        assert!((0..3).all(|j| (appended.get(3, 4 + c)[j] - mean.rows()[c][j]).abs() < EXACT));
    }
}

#[test]
fn layer_contracts_compose() {
    use Contract::*;
    assert_eq!(Se3Equivariant.then(TranslationInvariant), TranslationInvariant);
    assert_eq!(TranslationInvariant.then(So3Equivariant), TranslationInvariant);
    assert_eq!(TranslationInvariant.then(RotationInvariant), Invariant);
    assert_eq!(So3Equivariant.then(Se3Equivariant), So3Equivariant);
    assert_eq!(Se3Equivariant.meet(So3Equivariant), Some(So3Equivariant));
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut store = ParamStore::new();
    // the frame must end in exactly three vectors
    let frame = vec![Layer::mean_pool("m", 4)];
    assert!(Layer::rotation_invariant("bad", frame).is_err());
    assert!(Layer::rotation_invariant("empty", Vec::new()).is_err());
    let bad = vec![Layer::vn_linear(&mut store, "x", 4, 3, &mut rng).unwrap()];
    assert!(Layer::pool_concat("pc", 5, bad).is_err());
    let bad = NonlinearityConfig { alpha: 1.0, shared_direction: true };
    assert!(Layer::vnt_linear_leaky_relu(&mut store, "y", 3, 3, bad, &mut rng).is_err());
    for k in LayerKind::ALL {
        assert_eq!(LayerKind::from_name(k.name()), Some(k));
    }
}

#[test]
fn reference_layers_are_equivariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..50 {
        let g = sample_rigid(&mut rng, 10.0).unwrap();
        let rot = RigidTransform::rotation(g.rotation);
        let v = random_set(&mut rng, 1, 5).feature(0);
        let w = RowStochasticWeights::random(4, 5, &mut rng).unwrap();
        let lhs = vnt_linear(&v.map(rigid(&g)), &w).unwrap();
        assert!(lhs.max_abs_diff(&vnt_linear(&v, &w).unwrap().map(rigid(&g))) < 1e-9);

        let free = w.free().clone();
        let lhs = vn_linear(&v.map(rigid(&rot)), &free).unwrap();
        assert!(lhs.max_abs_diff(&vn_linear(&v, &free).unwrap().map(rigid(&rot))) < 1e-9);

        let [q, k, o]: [V3; 3] = std::array::from_fn(|_| [0; 3].map(|_| rng.random_range(-1.0..1.0)));
        let moved = vnt_leaky_relu(g.apply_point(q), g.apply_point(k), g.apply_point(o), 0.2).unwrap();
        let want = g.apply_point(vnt_leaky_relu(q, k, o, 0.2).unwrap());
        assert!((0..3).all(|i| (moved[i] - want[i]).abs() < 1e-9));
    }
}

proptest! {
    #[test]
    fn row_stochastic_rows_sum_to_one(rows in 1usize..6, cols in 1usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = RowStochasticWeights::random(rows, cols, &mut rng).unwrap().effective();
        for r in w.data().chunks(cols) {
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn maxpool_selects_the_reference_point(n in 1usize..9, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let layer = Layer::vnt_maxpool(&mut store, "p", 3, &mut rng).unwrap();
        let x = random_set(&mut rng, n, 3);
        let (k, o) = (stochastic(&store, "p.k"), stochastic(&store, "p.o"));
        let sel = vnt_maxpool(&x, &k, &o).unwrap();
        // brute force over every point with the scalar score
        let (ke, oe) = (k.effective(), o.effective());
        for c in 0..3 {
            let mut best = (0, f64::NEG_INFINITY);
            for p in 0..n {
                let v = x.feature(p);
                let kv = vn_linear(&v, &ke).unwrap().rows()[c];
                let ov = vn_linear(&v, &oe).unwrap().rows()[c];
                let a: V3 = std::array::from_fn(|i| v.rows()[c][i] - ov[i]);
                let b: V3 = std::array::from_fn(|i| kv[i] - ov[i]);
                let s: f64 = (0..3).map(|i| a[i] * b[i]).sum();
                if s > best.1 {
                    best = (p, s);
                }
            }
            prop_assert_eq!(sel.selected[c], best.0);
        }
        let got = run(&layer, &store, &x, Mode::Train);
        prop_assert_eq!(got.feature(0), sel.feature);
    }
}
