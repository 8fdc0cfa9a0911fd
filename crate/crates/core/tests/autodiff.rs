use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vntpose_core::suite::finite_difference_error;
use vntpose_core::tensor::linalg::{svd3, Mat3};
use vntpose_core::{Reduction, Result, Tape, Tensor, Var};

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-5;
/// Gradient entries below this magnitude are compared absolutely.
const FLOOR: f64 = 1e-3;
const SEEDS: u64 = 50;

type Build = dyn Fn(&mut Tape, &[Var]) -> Result<Var>;

#[derive(Clone, Copy)]
enum Fill {
    Signed,
    /// Away from zero, for denominators and square roots.
    Positive,
    /// Distinct values at least 0.05 apart, so max has no near ties.
    Spread,
}

fn random(rng: &mut ChaCha8Rng, dims: &[usize], fill: Fill) -> Tensor {
    let n = dims.iter().product();
    if let Fill::Spread = fill {
        let mut data: Vec<f64> = (0..n).map(|i| 0.1 * i as f64 + rng.random_range(0.0..0.05)).collect();
        data.shuffle(rng);
        return Tensor::new(dims, data).unwrap();
    }
    let data = (0..n)
        .map(|_| match fill {
            Fill::Signed => rng.random_range(-1.0..1.0),
            Fill::Positive => rng.random_range(0.5..1.5),
            Fill::Spread => unreachable!(),
        })
        .collect();
    Tensor::new(dims, data).unwrap()
}

/// Scalar `Σ w ⊙ f(inputs)` for a fixed random `w`.
fn project(tape: &mut Tape, out: Var, w: &Tensor) -> Result<Var> {
    let wv = tape.constant(w.clone())?;
    let p = tape.mul(out, wv)?;
    tape.sum_all(p)
}

fn eval(build: &Build, inputs: &[Tensor], w: &Tensor, track: bool) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), track).unwrap()).collect();
    let out = build(&mut tape, &vars)?;
    let loss = project(&mut tape, out, w)?;
    let value = tape.value(loss).data()[0];
    if !track {
        return Ok((value, Vec::new()));
    }
    tape.backward(loss)?;
    let grads = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| tape.grad(*v).map_or(vec![0.0; t.numel()], |g| g.into_data()))
        .collect();
    Ok((value, grads))
}

/// Worst relative error over `SEEDS` random draws.
fn check(name: &str, shapes: &[(&[usize], Fill)], build: &Build) {
    let mut worst = 0.0f64;
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<Tensor> = shapes.iter().map(|(d, f)| random(&mut rng, d, *f)).collect();
        let mut probe = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| probe.constant(t.clone()).unwrap()).collect();
        let out = build(&mut probe, &vars).unwrap();
        let w = random(&mut rng, probe.value(out).dims(), Fill::Signed);
        let (_, grads) = eval(build, &inputs, &w, true).unwrap();
        let flat: Vec<f64> = inputs.iter().flat_map(|t| t.data().to_vec()).collect();
        let analytic: Vec<f64> = grads.concat();
        let err = finite_difference_error(
            |x| {
                let mut at = 0;
                let moved: Vec<Tensor> = inputs
                    .iter()
                    .map(|t| {
                        let d = x[at..at + t.numel()].to_vec();
                        at += t.numel();
                        Tensor::new(t.dims(), d).unwrap()
                    })
                    .collect();
                Ok(eval(build, &moved, &w, false)?.0)
            },
            &flat,
            &analytic,
            STEP,
            FLOOR,
        )
        .unwrap();
        worst = worst.max(err);
    }
    assert!(worst < TOL, "{name}: relative error {worst:e}");
}

use Fill::{Positive as P, Signed as S};

#[test]
fn elementwise_primitives_match_finite_differences() {
    check("add_broadcast", &[(&[2, 3, 3], S), (&[1, 3], S)], &|t, v| t.add(v[0], v[1]));
    check("sub", &[(&[4, 3], S), (&[4, 3], S)], &|t, v| t.sub(v[0], v[1]));
    check("mul_broadcast", &[(&[2, 4], S), (&[2, 1], S)], &|t, v| t.mul(v[0], v[1]));
    check("div", &[(&[3, 3], S), (&[3, 3], P)], &|t, v| t.div(v[0], v[1]));
    check("affine", &[(&[5], S)], &|t, v| t.affine(v[0], -1.5, 0.25));
    check("scale", &[(&[5], S)], &|t, v| t.scale(v[0], 3.0));
    check("sqrt", &[(&[6], P)], &|t, v| t.sqrt(v[0]));
    check("relu", &[(&[3, 4], S)], &|t, v| t.relu(v[0]));
    check("mse", &[(&[3, 3], S), (&[3, 3], S)], &|t, v| t.mse(v[0], v[1]));
}

#[test]
fn structural_primitives_match_finite_differences() {
    check("matmul", &[(&[3, 4], S), (&[4, 2], S)], &|t, v| t.matmul(v[0], v[1]));
    check("matmul_batched", &[(&[2, 3, 4], S), (&[4, 5], S)], &|t, v| t.matmul(v[0], v[1]));
    check("channel_mix", &[(&[3, 4], S), (&[4, 5, 3], S)], &|t, v| t.channel_mix(v[0], v[1]));
    check("transpose", &[(&[3, 4], S)], &|t, v| t.transpose(v[0]));
    check("reshape", &[(&[3, 4], S)], &|t, v| t.reshape(v[0], &[2, 6]));
    check("broadcast", &[(&[1, 3], S)], &|t, v| t.broadcast_to(v[0], &[4, 3]));
    check("concat", &[(&[2, 3], S), (&[1, 3], S)], &|t, v| t.concat(&[v[0], v[1]], 0));
    check("concat_axis1", &[(&[2, 3], S), (&[2, 2], S)], &|t, v| t.concat(&[v[0], v[1]], 1));
    check("slice", &[(&[2, 5, 3], S)], &|t, v| t.slice(v[0], 1, 1, 3));
    check("gather_mean", &[(&[5, 3], S)], &|t, v| t.gather_mean(v[0], &[0, 3, 3, 4, 1, 1], 2));
}

#[test]
fn reductions_match_finite_differences() {
    for kind in [Reduction::Sum, Reduction::Mean, Reduction::Max] {
        for axis in 0..3 {
            let fill = if kind == Reduction::Max { Fill::Spread } else { S };
            check(&format!("reduce {kind:?} {axis}"), &[(&[2, 3, 4], fill)], &move |t, v| t.reduce(v[0], axis, kind, axis == 1));
        }
    }
    check("sum_all", &[(&[3, 2], S)], &|t, v| t.sum_all(v[0]));
    check("mean_all", &[(&[3, 2], S)], &|t, v| t.mean_all(v[0]));
}

#[test]
fn vector_neuron_primitives_match_finite_differences() {
    check("row_stochastic", &[(&[3, 4], S)], &|t, v| t.row_stochastic(v[0]));
    check("clip_shared", &[(&[3, 4, 3], S), (&[1, 4, 3], S)], &|t, v| {
        t.vn_clip(v[0], v[1], None, 0.2, 1e-8)
    });
    check("clip_origin", &[(&[3, 4, 3], S), (&[3, 4, 3], S), (&[1, 4, 3], S)], &|t, v| {
        t.vn_clip(v[0], v[1], Some(v[2]), 0.2, 1e-8)
    });
    check("clip_relu", &[(&[2, 5, 3], S), (&[2, 5, 3], S), (&[2, 5, 3], S)], &|t, v| {
        t.vn_clip(v[0], v[1], Some(v[2]), 0.0, 1e-8)
    });
    check("frame_project", &[(&[4, 5, 3], S), (&[3, 5, 3], S)], &|t, v| t.frame_project(v[0], v[1]));
    check("frame_max", &[(&[4, 5, 3], S), (&[3, 5, 3], S)], &|t, v| t.frame_max(v[0], v[1]));
    check("norm_scale_batch", &[(&[3, 6, 3], S), (&[3, 1], S)], &|t, v| {
        Ok(t.norm_scale(v[0], v[1], None, 1e-10, 1e-24)?.0)
    });
    check("norm_scale_running", &[(&[3, 6, 3], S), (&[3, 1], S)], &|t, v| {
        Ok(t.norm_scale(v[0], v[1], Some(&[0.7, 1.1, 0.9]), 1e-10, 1e-24)?.0)
    });
    check("chamfer", &[(&[5, 3], S), (&[4, 3], S)], &|t, v| t.chamfer(v[0], v[1]));
}

#[test]
fn fused_ops_equal_their_compositions() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let z = random(&mut rng, &[4, 6, 3], S);
    let f = random(&mut rng, &[3, 6, 3], S);
    let gamma = random(&mut rng, &[4, 1], S);
    let mut t = Tape::new();
    let (zv, fv, gv) = (t.constant(z).unwrap(), t.constant(f).unwrap(), t.constant(gamma).unwrap());

    let fused = t.frame_max(zv, fv).unwrap();
    let proj = t.frame_project(zv, fv).unwrap();
    let slow = t.reduce(proj, 1, Reduction::Max, false).unwrap();
    assert!(t.value(fused).max_abs_diff(&t.value(slow).clone().reshape(&[12]).unwrap()) < 1e-15);

    let (fused, means) = t.norm_scale(zv, gv, None, 1e-10, 1e-24).unwrap();
    let sq = t.mul(zv, zv).unwrap();
    let sq = t.reduce(sq, 2, Reduction::Sum, true).unwrap();
    let sq = t.affine(sq, 1.0, 1e-24).unwrap();
    let norm = t.sqrt(sq).unwrap();
    let mean = t.reduce(norm, 1, Reduction::Mean, true).unwrap();
    let denom = t.affine(mean, 1.0, 1e-10).unwrap();
    let g3 = t.reshape(gv, &[4, 1, 1]).unwrap();
    let factor = t.div(g3, denom).unwrap();
    let slow = t.mul(zv, factor).unwrap();
    assert!(t.value(fused).max_abs_diff(t.value(slow)) < 1e-14);
    for (m, s) in means.iter().zip(t.value(mean).data()) {
        assert!((m - s).abs() < 1e-15);
    }
}

#[test]
fn hand_examples() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::scalar(3.0), true).unwrap();
    let y = t.mul(x, x).unwrap();
    t.backward(y).unwrap();
    assert_eq!(t.grad(x).unwrap().data(), &[6.0]);

    let mut t = Tape::new();
    let v = Tensor::new(&[4], vec![0.5, -1.0, 2.0, 0.25]).unwrap();
    let x = t.leaf(v.clone(), true).unwrap();
    let sq = t.mul(x, x).unwrap();
    let s = t.sum_all(sq).unwrap();
    t.backward(s).unwrap();
    let g = t.grad(x).unwrap();
    for (a, b) in g.data().iter().zip(v.data()) {
        assert_eq!(*a, 2.0 * b);
    }

    let mut t = Tape::new();
    let x = t.constant(Tensor::new(&[2], vec![2.0, 4.0]).unwrap()).unwrap();
    let m = t.reduce(x, 0, Reduction::Mean, false).unwrap();
    assert_eq!(t.value(m).data(), &[3.0]);
    let z = t.constant(Tensor::zeros(&[3]).unwrap()).unwrap();
    let s = t.reduce(z, 0, Reduction::Sum, false).unwrap();
    assert_eq!(t.value(s).data(), &[0.0]);

    let mut t = Tape::new();
    let i2 = t.constant(Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap()).unwrap();
    let a = t.constant(Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap()).unwrap();
    let p = t.matmul(i2, a).unwrap();
    assert_eq!(t.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);
    let r = t.constant(Tensor::from_rows(&[[1.0, 2.0]]).unwrap()).unwrap();
    let c = t.constant(Tensor::from_rows(&[[3.0], [4.0]]).unwrap()).unwrap();
    let d = t.matmul(r, c).unwrap();
    assert_eq!(t.value(d).data(), &[11.0]);
}

#[test]
fn max_ties_route_to_lowest_index() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::new(&[4], vec![1.0, 3.0, 3.0, 2.0]).unwrap(), true).unwrap();
    let m = t.reduce(x, 0, Reduction::Max, false).unwrap();
    t.backward(m).unwrap();
    assert_eq!(t.grad(x).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);
}

#[test]
fn backward_preconditions() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::new(&[2], vec![1.0, 2.0]).unwrap(), true).unwrap();
    let y = t.mul(x, x).unwrap();
    assert!(t.backward(y).is_err(), "non-scalar root");
    let s = t.sum_all(y).unwrap();
    t.backward(s).unwrap();
    assert!(t.backward(s).is_err(), "second backward without reset");
    t.reset_grads();
    t.backward(s).unwrap();
    assert_eq!(t.grad(x).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn shape_errors() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::zeros(&[2, 3]).unwrap()).unwrap();
    let b = t.constant(Tensor::zeros(&[2, 3]).unwrap()).unwrap();
    assert!(t.matmul(a, b).is_err());
    assert!(t.reduce(a, 2, Reduction::Sum, false).is_err());
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let a = random(&mut rng, &[3, 3], S);
        let b = random(&mut rng, &[3, 3], S);
        let mut t = Tape::new();
        let (av, bv) = (t.constant(a.clone()).unwrap(), t.constant(b.clone()).unwrap());
        let c = t.matmul(av, bv).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let mut s = 0.0;
                for k in 0..3 {
                    s += a.data()[i * 3 + k] * b.data()[k * 3 + j];
                }
                assert!((t.value(c).data()[i * 3 + j] - s).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn non_finite_values_are_rejected() {
    let mut t = Tape::new();
    assert!(t.leaf(Tensor::new(&[1], vec![f64::NAN]).unwrap(), false).is_err());
    // intermediate results are only checked with debug assertions on
    if cfg!(debug_assertions) {
        let one = t.constant(Tensor::scalar(1.0)).unwrap();
        let zero = t.constant(Tensor::scalar(0.0)).unwrap();
        assert!(t.div(one, zero).is_err());
    }
}

#[test]
fn svd_reconstructs_random_matrices() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..1000 {
        let m = Mat3(std::array::from_fn(|_| std::array::from_fn(|_| rng.random_range(-2.0..2.0))));
        let s = svd3(&m).unwrap();
        assert!((s.reconstruct() - m).max_abs() < 1e-10);
        assert!(s.sigma[0] >= s.sigma[1] && s.sigma[1] >= s.sigma[2] && s.sigma[2] >= 0.0);
        assert!(s.u.orthonormality_error() < 1e-12 && s.v.orthonormality_error() < 1e-12);
    }
    let s = svd3(&Mat3::diag([3.0, 2.0, 1.0])).unwrap();
    assert_eq!(s.sigma, [3.0, 2.0, 1.0]);
    let s = svd3(&Mat3::IDENTITY).unwrap();
    assert_eq!(s.sigma, [1.0, 1.0, 1.0]);
    let mut bad = Mat3::IDENTITY;
    bad.0[1][2] = f64::INFINITY;
    assert!(svd3(&bad).is_err());
}
