//! Per-vector kernels shared by the tape and the plain layer functions.

pub(crate) type V3 = [f64; 3];

#[inline]
pub(crate) fn dot(a: V3, b: V3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub(crate) fn sub(a: V3, b: V3) -> V3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
fn norm(a: V3) -> f64 {
    libm::sqrt(dot(a, a))
}

/// Half-space clipping about a learned origin, blended with the raw
/// feature by `alpha`.
///
/// With `qo = q - o` and `ko = k - o`, the clipped vector is `q` when
/// `<qo, ko> >= 0`, and otherwise `q` with the component of `qo` along
/// `ko / (|ko| + eps)` removed. The result is `alpha·q + (1-alpha)·clipped`.
#[inline]
pub(crate) fn clip_forward(q: V3, k: V3, o: V3, alpha: f64, eps: f64) -> V3 {
    let qo = sub(q, o);
    let ko = sub(k, o);
    let d = dot(qo, ko);
    if d >= 0.0 {
        return q;
    }
    let n = norm(ko) + eps;
    let s = d / (n * n);
    let w = 1.0 - alpha;
    [
        q[0] - w * s * ko[0],
        q[1] - w * s * ko[1],
        q[2] - w * s * ko[2],
    ]
}

/// Vector-Jacobian product of [`clip_forward`]: returns `(dq, dk, do)` for
/// upstream gradient `g`.
#[inline]
pub(crate) fn clip_backward(q: V3, k: V3, o: V3, alpha: f64, eps: f64, g: V3) -> (V3, V3, V3) {
    let qo = sub(q, o);
    let ko = sub(k, o);
    let d = dot(qo, ko);
    if d >= 0.0 {
        return (g, [0.0; 3], [0.0; 3]);
    }
    let w = 1.0 - alpha;
    let raw_norm = norm(ko);
    let n = raw_norm + eps;
    let n2 = n * n;
    let s = d / n2;
    let gk = dot(g, ko);
    // clipped = q - s·ko with s = <qo,ko>/n², n = |ko| + eps
    let mut dq = [0.0; 3];
    let mut dko = [0.0; 3];
    let radial = if raw_norm > 0.0 { 2.0 * d / (n2 * n * raw_norm) } else { 0.0 };
    for i in 0..3 {
        let dqo_i = -w * gk * ko[i] / n2;
        dq[i] = g[i] + dqo_i;
        dko[i] = -w * (gk * (qo[i] / n2 - radial * ko[i]) + s * g[i]);
    }
    let mut dob = [0.0; 3];
    for i in 0..3 {
        // o enters through qo (negated) and ko (negated)
        dob[i] = -(dq[i] - g[i]) - dko[i];
    }
    (dq, dko, dob)
}

/// For each point of `from` (flat `N×3`), the index of and squared
/// distance to its nearest point in `to`; ties go to the lowest index.
pub(crate) fn nearest(from: &[f64], to: &[f64]) -> alloc::vec::Vec<(usize, f64)> {
    from.chunks_exact(3)
        .map(|a| {
            let mut best = (0, f64::INFINITY);
            for (j, b) in to.chunks_exact(3).enumerate() {
                let d0 = a[0] - b[0];
                let d1 = a[1] - b[1];
                let d2 = a[2] - b[2];
                let d = d0 * d0 + d1 * d1 + d2 * d2;
                if d < best.1 {
                    best = (j, d);
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_check(q: V3, k: V3, o: V3, alpha: f64) {
        let eps = 1e-8;
        let g = [0.3, -0.7, 1.1];
        let f = |q: V3, k: V3, o: V3| dot(clip_forward(q, k, o, alpha, eps), g);
        let (dq, dk, dob) = clip_backward(q, k, o, alpha, eps, g);
        let h = 1e-6;
        for (which, analytic) in [(0, dq), (1, dk), (2, dob)] {
            for i in 0..3 {
                let mut args = [q, k, o];
                args[which][i] += h;
                let up = f(args[0], args[1], args[2]);
                args[which][i] -= 2.0 * h;
                let down = f(args[0], args[1], args[2]);
                let num = (up - down) / (2.0 * h);
                assert!(
                    (num - analytic[i]).abs() < 1e-6 * (1.0 + num.abs()),
                    "arg {which} comp {i}: {num} vs {}",
                    analytic[i]
                );
            }
        }
    }

    #[test]
    fn clip_gradient_matches_finite_differences() {
        // clipped branch
        fd_check([1.0, 0.2, -0.3], [-1.0, 0.5, 0.1], [0.1, 0.1, 0.2], 0.0);
        fd_check([1.0, 0.2, -0.3], [-1.0, 0.5, 0.1], [0.1, 0.1, 0.2], 0.2);
        // pass-through branch
        fd_check([1.0, 0.2, -0.3], [1.0, 0.5, 0.1], [0.1, -0.1, 0.2], 0.2);
    }
}
