//! Points of the probability simplex, weighted empirical measures and
//! intrinsic derivatives.
//!
//! States are indexed from 0. The intrinsic gradient of `h` at `p` is the
//! tangent vector
//!
//! ```text
//! d_i h(p) = -(1/d) * sum_{j != i} d/dp_j  h^i(p^{-i}),
//! ```
//!
//! where `h^i` is `h` read in the chart that eliminates coordinate `i`. It is
//! the orthogonal projection of any ambient gradient onto `{v : sum v = 0}`,
//! so `d_i h - d_j h` is the directional derivative along `e_i - e_j`.
//! Second derivatives are the projected Hessian `P H P` with
//! `P = I - 11^T / d`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on `sum p = 1` and `sum y = N`.
pub const SIMPLEX_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct SimplexPoint(Vec<f64>);

impl SimplexPoint {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if p.is_empty() {
            return Err(Error::NotSimplex("empty vector".into()));
        }
        if let Some(x) = p.iter().find(|x| !x.is_finite() || **x < 0.0) {
            return Err(Error::NotSimplex(format!("coordinate {x} in {p:?}")));
        }
        let s: f64 = p.iter().sum();
        if (s - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::NotSimplex(format!("coordinates sum to {s}")));
        }
        Ok(Self(p))
    }

    pub fn uniform(d: usize) -> Self {
        Self(vec![1.0 / d as f64; d])
    }

    pub fn vertex(d: usize, i: usize) -> Self {
        let mut p = vec![0.0; d];
        p[i] = 1.0;
        Self(p)
    }

    /// Clips negative coordinates and renormalises.
    pub fn project(mut v: Vec<f64>) -> Result<Self> {
        for x in v.iter_mut() {
            if !x.is_finite() {
                return Err(Error::NonFinite(format!("{v:?}")));
            }
            *x = x.max(0.0);
        }
        let s: f64 = v.iter().sum();
        if s <= 0.0 {
            return Err(Error::NotSimplex("all coordinates clipped to zero".into()));
        }
        v.iter_mut().for_each(|x| *x /= s);
        Ok(Self(v))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn min_coordinate(&self) -> f64 {
        self.0.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl TryFrom<Vec<f64>> for SimplexPoint {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<SimplexPoint> for Vec<f64> {
    fn from(p: SimplexPoint) -> Self {
        p.0
    }
}

impl std::ops::Index<usize> for SimplexPoint {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Vector of the tangent space `{v : sum v = 0}`.
#[derive(Clone, Debug, PartialEq)]
pub struct TangentVector(Vec<f64>);

impl TangentVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn sum(&self) -> f64 {
        self.0.iter().sum()
    }
}

impl std::ops::Index<usize> for TangentVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Writes `mu[i] = (1/N) sum_l y^l 1{x^l = i}` into `out` without validation.
pub fn weighted_measure_into(x: &[usize], y: &[f64], out: &mut [f64]) {
    out.iter_mut().for_each(|m| *m = 0.0);
    for (&xi, &yi) in x.iter().zip(y) {
        out[xi] += yi;
    }
    let n = x.len() as f64;
    out.iter_mut().for_each(|m| *m /= n);
}

/// Weighted empirical measure of `N` players at states `x` carrying masses `y`.
pub fn empirical_measure(x: &[usize], y: &[f64], d: usize) -> Result<SimplexPoint> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::InvalidParameter(format!(
            "{} states for {} weights",
            x.len(),
            y.len()
        )));
    }
    if let Some(&s) = x.iter().find(|&&s| s >= d) {
        return Err(Error::OutOfRange(format!("state {s} with d = {d}")));
    }
    if let Some(w) = y.iter().find(|w| !(**w >= 0.0)) {
        return Err(Error::Negative(format!("weight {w}")));
    }
    let n = x.len() as f64;
    let sum: f64 = y.iter().sum();
    if (sum - n).abs() > SIMPLEX_TOL {
        return Err(Error::MassMismatch { sum, expected: n });
    }
    let mut mu = vec![0.0; d];
    weighted_measure_into(x, y, &mut mu);
    Ok(SimplexPoint(mu))
}

fn check_interior(p: &SimplexPoint, step: f64) -> Result<()> {
    if !(step > 0.0) {
        return Err(Error::InvalidParameter(format!("step {step}")));
    }
    if p.dim() < 2 {
        return Err(Error::InvalidParameter("simplex of dimension 0".into()));
    }
    if p.min_coordinate() < step * (1.0 - 1e-9) {
        return Err(Error::Boundary {
            point: p.0.clone(),
            margin: step,
        });
    }
    Ok(())
}

/// `p + t * (e_a - e_b)`; the chart direction `a` is paired with the eliminated
/// last coordinate.
fn shifted(p: &[f64], moves: &[(usize, f64)], buf: &mut [f64]) {
    buf.copy_from_slice(p);
    for &(i, t) in moves {
        buf[i] += t;
    }
}

/// Intrinsic gradient by central differences of step `step` along the chart
/// directions `e_a - e_{d-1}`.
pub fn intrinsic_gradient<F>(h: F, p: &SimplexPoint, step: f64) -> Result<TangentVector>
where
    F: Fn(&[f64]) -> f64,
{
    check_interior(p, step)?;
    let d = p.dim();
    let last = d - 1;
    let mut buf = vec![0.0; d];
    let mut chart = vec![0.0; d];
    for a in 0..last {
        shifted(&p.0, &[(a, step), (last, -step)], &mut buf);
        let fwd = h(&buf);
        shifted(&p.0, &[(a, -step), (last, step)], &mut buf);
        let bwd = h(&buf);
        chart[a] = (fwd - bwd) / (2.0 * step);
    }
    let mean = chart.iter().sum::<f64>() / d as f64;
    Ok(TangentVector(chart.into_iter().map(|g| g - mean).collect()))
}

/// Intrinsic Hessian `(d^2_{jk} h)(p)` as a dense `d x d` matrix.
pub fn intrinsic_hessian<F>(h: F, p: &SimplexPoint, step: f64) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&[f64]) -> f64,
{
    check_interior(p, step)?;
    let d = p.dim();
    let last = d - 1;
    let mut buf = vec![0.0; d];
    let h0 = h(&p.0);
    // chart Hessian, padded with a zero row/column for the eliminated coordinate
    let mut g = vec![vec![0.0; d]; d];
    for a in 0..last {
        shifted(&p.0, &[(a, step), (last, -step)], &mut buf);
        let fwd = h(&buf);
        shifted(&p.0, &[(a, -step), (last, step)], &mut buf);
        let bwd = h(&buf);
        g[a][a] = (fwd - 2.0 * h0 + bwd) / (step * step);
    }
    let t = 0.5 * step;
    for a in 0..last {
        for b in (a + 1)..last {
            shifted(&p.0, &[(a, t), (b, t), (last, -2.0 * t)], &mut buf);
            let pp = h(&buf);
            shifted(&p.0, &[(a, t), (b, -t)], &mut buf);
            let pm = h(&buf);
            shifted(&p.0, &[(a, -t), (b, t)], &mut buf);
            let mp = h(&buf);
            shifted(&p.0, &[(a, -t), (b, -t), (last, 2.0 * t)], &mut buf);
            let mm = h(&buf);
            let v = (pp - pm - mp + mm) / (4.0 * t * t);
            g[a][b] = v;
            g[b][a] = v;
        }
    }
    Ok(project_matrix(&g))
}

/// `P G P` with `P = I - 11^T/d`.
fn project_matrix(g: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let d = g.len();
    let dn = d as f64;
    let row_mean: Vec<f64> = g.iter().map(|r| r.iter().sum::<f64>() / dn).collect();
    let col_mean: Vec<f64> = (0..d)
        .map(|k| g.iter().map(|r| r[k]).sum::<f64>() / dn)
        .collect();
    let all_mean = row_mean.iter().sum::<f64>() / dn;
    (0..d)
        .map(|j| {
            (0..d)
                .map(|k| g[j][k] - row_mean[j] - col_mean[k] + all_mean)
                .collect()
        })
        .collect()
}

/// Kimura contraction `sum_{j,k} (p_j delta_{jk} - p_j p_k) m_{jk}`.
pub fn kimura_contraction(m: &[Vec<f64>], p: &[f64]) -> f64 {
    let d = p.len();
    let mut s = 0.0;
    for j in 0..d {
        s += p[j] * m[j][j];
        for k in 0..d {
            s -= p[j] * p[k] * m[j][k];
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sp(v: &[f64]) -> SimplexPoint {
        SimplexPoint::new(v.to_vec()).unwrap()
    }

    #[test]
    fn empirical_measure_examples() {
        let mu = empirical_measure(&[0, 1], &[1.0, 1.0], 2).unwrap();
        assert_eq!(mu.as_slice(), &[0.5, 0.5]);
        let mu = empirical_measure(&[0, 0], &[0.0, 2.0], 2).unwrap();
        assert_eq!(mu.as_slice(), &[1.0, 0.0]);
        // (2 + 0.5)/3 and 0.5/3
        let mu = empirical_measure(&[0, 0, 1], &[2.0, 0.5, 0.5], 2).unwrap();
        assert!((mu[0] - 2.5 / 3.0).abs() < 1e-15);
        assert!((mu[1] - 0.5 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn empirical_measure_rejects_mass_mismatch() {
        let err = empirical_measure(&[0, 1], &[1.0, 1.5], 2).unwrap_err();
        assert!(matches!(err, Error::MassMismatch { .. }));
        assert!(empirical_measure(&[0, 1], &[-0.5, 2.5], 2).is_err());
    }

    #[test]
    fn gradient_examples() {
        let p = sp(&[0.3, 0.7]);
        let g = intrinsic_gradient(|_| 4.2, &p, 0.01).unwrap();
        assert!(g.as_slice().iter().all(|x| x.abs() < 1e-12));

        let g = intrinsic_gradient(|q| q[0], &p, 0.01).unwrap();
        assert!((g[0] - 0.5).abs() < 1e-12 && (g[1] + 0.5).abs() < 1e-12);

        let half = sp(&[0.5, 0.5]);
        let g = intrinsic_gradient(|q| q[0] * q[0], &half, 0.01).unwrap();
        assert!((g[0] - 0.5).abs() < 1e-12 && (g[1] + 0.5).abs() < 1e-12);
    }

    #[test]
    fn linear_gradient_is_centered_coefficients() {
        let c = [1.0, -2.0, 0.5, 3.0];
        let p = sp(&[0.1, 0.2, 0.3, 0.4]);
        let h = |q: &[f64]| q.iter().zip(&c).map(|(a, b)| a * b).sum::<f64>();
        let g = intrinsic_gradient(h, &p, 0.05).unwrap();
        let mean = c.iter().sum::<f64>() / 4.0;
        for i in 0..4 {
            assert!((g[i] - (c[i] - mean)).abs() < 1e-12);
        }
    }

    #[test]
    fn hessian_examples() {
        let p = sp(&[0.2, 0.3, 0.5]);
        let m = intrinsic_hessian(|q| 2.0 * q[0] - q[2] + 1.0, &p, 0.01).unwrap();
        assert!(m.iter().flatten().all(|x| x.abs() < 1e-9));

        for p0 in [0.2, 0.5, 0.8] {
            let p = sp(&[p0, 1.0 - p0]);
            let m = intrinsic_hessian(|q| q[0] * q[0], &p, 0.01).unwrap();
            let c = m[0][0] - m[0][1] - m[1][0] + m[1][1];
            assert!((c - 2.0).abs() < 1e-8, "{c}");
        }
        let half = sp(&[0.5, 0.5]);
        let m = intrinsic_hessian(|q| q[0] * q[0], &half, 0.01).unwrap();
        assert!((kimura_contraction(&m, half.as_slice()) - 0.5).abs() < 1e-8);
    }

    #[test]
    fn boundary_is_rejected() {
        let p = sp(&[0.005, 0.995]);
        assert!(matches!(
            intrinsic_gradient(|q| q[0], &p, 0.01),
            Err(Error::Boundary { .. })
        ));
    }

    #[test]
    fn hessian_contraction_matches_ambient_trace() {
        // for h(p) = p^T A p the contraction equals tr(diag(p) - pp^T) * 2A
        let a = [[1.0, 0.3, -0.2], [0.3, -0.5, 0.7], [-0.2, 0.7, 2.0]];
        let h = |q: &[f64]| {
            let mut s = 0.0;
            for j in 0..3 {
                for k in 0..3 {
                    s += a[j][k] * q[j] * q[k];
                }
            }
            s
        };
        let p = sp(&[0.2, 0.35, 0.45]);
        let m = intrinsic_hessian(h, &p, 0.02).unwrap();
        let two_a: Vec<Vec<f64>> = a.iter().map(|r| r.iter().map(|x| 2.0 * x).collect()).collect();
        let expected = kimura_contraction(&two_a, p.as_slice());
        assert!((kimura_contraction(&m, p.as_slice()) - expected).abs() < 1e-8);
    }

    fn interior_point(d: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.2f64..1.0, d).prop_map(|v| {
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect()
        })
    }

    proptest! {
        #[test]
        fn gradient_is_tangent_and_matches_ambient_differences(
            p in interior_point(3),
            c in prop::collection::vec(-2.0f64..2.0, 3),
        ) {
            let h = |q: &[f64]| (c[0] * q[0]).sin() + c[1] * q[1] * q[2] + c[2] * q[2] * q[2];
            let dh = |q: &[f64]| [c[0] * (c[0] * q[0]).cos(), c[1] * q[2], c[1] * q[1] + 2.0 * c[2] * q[2]];
            let pt = SimplexPoint::new(p.clone()).unwrap();
            let g = intrinsic_gradient(h, &pt, 1e-4).unwrap();
            prop_assert!(g.sum().abs() < 1e-8);
            let amb = dh(&p);
            for i in 0..3 {
                for j in 0..3 {
                    prop_assert!(((g[i] - g[j]) - (amb[i] - amb[j])).abs() < 1e-6);
                }
            }
        }
    }
}
