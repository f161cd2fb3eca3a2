//! Backward solver for the master equation on the simplex.
//!
//! The measure variable lives on the lattice `{k / n : k in N^d, sum k = n}`.
//! Every first-order term is a transport along some edge direction
//! `e_a - e_b` with a nonnegative coefficient, so it is discretised by the
//! forward difference toward `p + h (e_a - e_b)`; the coefficient of such a
//! term carries the factor `p_b`, which vanishes exactly where the neighbour
//! would leave the simplex. The Kimura diffusion is written as
//! `sum_{j<k} p_j p_k D^2_{e_j - e_k}` and uses three-point differences along
//! the same edges. With explicit Euler steps the scheme is monotone under the
//! step restriction checked by [`admissible_dt`].

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::SimplexLattice;
use crate::model::{a_star_into, hamiltonian, GameSpec, NoiseConvention};
use crate::nplayer::Policy;
use crate::simplex::{intrinsic_gradient, intrinsic_hessian, SimplexPoint, TangentVector};

/// Anything that provides `U^i(t, p)` for all `i` at once.
pub trait ValueField: Sync {
    fn d(&self) -> usize;
    fn horizon(&self) -> f64;
    fn values_into(&self, t: f64, p: &[f64], out: &mut [f64]);
}

/// A value field given by a closure `(t, i, p) -> U^i(t, p)`.
pub struct FnField<F> {
    d: usize,
    horizon: f64,
    f: F,
}

impl<F> FnField<F>
where
    F: Fn(f64, usize, &[f64]) -> f64 + Sync,
{
    pub fn new(d: usize, horizon: f64, f: F) -> Self {
        Self { d, horizon, f }
    }
}

impl<F> ValueField for FnField<F>
where
    F: Fn(f64, usize, &[f64]) -> f64 + Sync,
{
    fn d(&self) -> usize {
        self.d
    }

    fn horizon(&self) -> f64 {
        self.horizon
    }

    fn values_into(&self, t: f64, p: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = (self.f)(t, i, p);
        }
    }
}

/// Discretisation parameters of [`solve_master_with`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MasterGrid {
    /// number of lattice subdivisions, `1 / dx`
    pub n: usize,
    /// requested time step; the solver uses `T / ceil(T / dt)`
    pub dt: f64,
    /// keep every `store_every`-th time slice (the terminal slice is always kept)
    pub store_every: usize,
}

impl MasterGrid {
    /// Admissible grid on `n` subdivisions keeping `slices` equally spaced
    /// time slices besides the terminal one.
    pub fn with_slices(spec: &GameSpec, n: usize, slices: usize) -> Result<Self> {
        if slices == 0 {
            return Err(Error::InvalidParameter("at least one slice is required".into()));
        }
        let adm = admissible_dt(spec, n)?;
        let per_slice = (spec.horizon() / slices as f64 / adm).ceil().max(1.0) as usize;
        Ok(Self {
            n,
            dt: spec.horizon() / (per_slice * slices) as f64,
            store_every: per_slice,
        })
    }
}

/// Number of steps of size at most `dt` covering `[0, horizon]`; a step that
/// divides the horizon up to round-off is taken as exact.
pub fn step_count(horizon: f64, dt: f64) -> usize {
    let r = horizon / dt;
    let near = r.round();
    if (r - near).abs() <= 1e-9 * near.max(1.0) {
        near.max(1.0) as usize
    } else {
        r.ceil().max(1.0) as usize
    }
}

/// `U^i(t, p)` on a time grid times a simplex lattice.
///
/// Values are stored slice-major, then by lattice node, then by state.
#[derive(Clone, Debug)]
pub struct ValueSurface {
    d: usize,
    n: usize,
    horizon: f64,
    dt: f64,
    slice_dt: f64,
    sigma2: f64,
    noise: NoiseConvention,
    lattice: SimplexLattice,
    values: Vec<f64>,
}

/// On-disk layout of a [`ValueSurface`].
///
/// `values` has `slices * nodes * d` entries; slice `s` sits at time
/// `s * slice_dt`; nodes are the compositions `k` of `n` into `d` parts in
/// lexicographic order (first coordinate slowest); the state index is fastest.
#[derive(Serialize, Deserialize)]
struct SurfaceFile {
    format: String,
    d: usize,
    n: usize,
    horizon: f64,
    dt: f64,
    slice_dt: f64,
    slices: usize,
    nodes: usize,
    sigma2: f64,
    noise_convention: NoiseConvention,
    values: Vec<f64>,
}

const SURFACE_FORMAT: &str = "value-surface/1";

impl ValueSurface {
    /// Tabulates a closure on the given grid; used for manufactured surfaces.
    pub fn from_fn<F>(spec: &GameSpec, n: usize, slice_dt: f64, f: F) -> Result<Self>
    where
        F: Fn(f64, usize, &[f64]) -> f64,
    {
        let d = spec.d();
        let lattice = SimplexLattice::new(d, n, 1.0)?;
        let steps = step_count(spec.horizon(), slice_dt);
        let slice_dt = spec.horizon() / steps as f64;
        let mut values = Vec::with_capacity((steps + 1) * lattice.len() * d);
        let mut p = vec![0.0; d];
        for s in 0..=steps {
            let t = s as f64 * slice_dt;
            for idx in 0..lattice.len() {
                lattice.point_into(idx, &mut p);
                for i in 0..d {
                    values.push(f(t, i, &p));
                }
            }
        }
        Ok(Self {
            d,
            n,
            horizon: spec.horizon(),
            dt: slice_dt,
            slice_dt,
            sigma2: spec.sigma2(),
            noise: spec.noise(),
            lattice,
            values,
        })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn subdivisions(&self) -> usize {
        self.n
    }

    pub fn spacing(&self) -> f64 {
        1.0 / self.n as f64
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// Solver time step.
    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Time between stored slices.
    pub fn slice_dt(&self) -> f64 {
        self.slice_dt
    }

    pub fn slices(&self) -> usize {
        self.values.len() / (self.lattice.len() * self.d)
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    pub fn noise(&self) -> NoiseConvention {
        self.noise
    }

    pub fn lattice(&self) -> &SimplexLattice {
        &self.lattice
    }

    /// Values of all states at a node of a stored slice.
    pub fn node_values(&self, slice: usize, node: usize) -> &[f64] {
        let off = (slice * self.lattice.len() + node) * self.d;
        &self.values[off..off + self.d]
    }

    pub fn slice_values(&self, slice: usize) -> &[f64] {
        let len = self.lattice.len() * self.d;
        &self.values[slice * len..(slice + 1) * len]
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    fn eval_clamped(&self, t: f64, p: &[f64], out: &mut [f64]) {
        let st = self.lattice.stencil(p);
        let last = self.slices() - 1;
        let s = (t.clamp(0.0, self.horizon) / self.slice_dt).max(0.0);
        let s0 = (s.floor() as usize).min(last);
        let theta = if s0 == last { 0.0 } else { s - s0 as f64 };
        let len = self.lattice.len() * self.d;
        let a = &self.values[s0 * len..(s0 + 1) * len];
        for (i, o) in out.iter_mut().enumerate() {
            let va = st.apply(a, self.d, i);
            *o = if theta > 0.0 {
                let b = &self.values[(s0 + 1) * len..(s0 + 2) * len];
                (1.0 - theta) * va + theta * st.apply(b, self.d, i)
            } else {
                va
            };
        }
    }

    /// `U(t, p)` with piecewise-linear interpolation in space and linear
    /// interpolation in time.
    pub fn value_at(&self, t: f64, p: &[f64], out: &mut [f64]) -> Result<()> {
        let tol = 1e-9;
        if !(t >= -tol && t <= self.horizon + tol) {
            return Err(Error::OutOfRange(format!("time {t} outside [0, {}]", self.horizon)));
        }
        if p.len() != self.d {
            return Err(Error::OutOfRange(format!("point of dimension {}", p.len())));
        }
        let s: f64 = p.iter().sum();
        if p.iter().any(|&v| v < -tol) || (s - 1.0).abs() > tol {
            return Err(Error::OutOfRange(format!("point {p:?} is not in the simplex")));
        }
        self.eval_clamped(t, p, out);
        Ok(())
    }

    /// Intrinsic gradient of `U^i(t, .)` using the lattice spacing as step.
    pub fn gradient(&self, t: f64, i: usize, p: &SimplexPoint) -> Result<TangentVector> {
        intrinsic_gradient(
            |q: &[f64]| {
                let mut b = vec![0.0; self.d];
                self.eval_clamped(t, q, &mut b);
                b[i]
            },
            p,
            self.spacing(),
        )
    }

    pub fn hessian(&self, t: f64, i: usize, p: &SimplexPoint) -> Result<Vec<Vec<f64>>> {
        intrinsic_hessian(
            |q: &[f64]| {
                let mut b = vec![0.0; self.d];
                self.eval_clamped(t, q, &mut b);
                b[i]
            },
            p,
            self.spacing(),
        )
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let file = SurfaceFile {
            format: SURFACE_FORMAT.into(),
            d: self.d,
            n: self.n,
            horizon: self.horizon,
            dt: self.dt,
            slice_dt: self.slice_dt,
            slices: self.slices(),
            nodes: self.lattice.len(),
            sigma2: self.sigma2,
            noise_convention: self.noise,
            values: self.values.clone(),
        };
        serde_json::to_writer(BufWriter::new(File::create(path)?), &file)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let file: SurfaceFile = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        if file.format != SURFACE_FORMAT {
            return Err(Error::Config {
                path: "format".into(),
                message: format!("unsupported surface format `{}`", file.format),
            });
        }
        let lattice = SimplexLattice::new(file.d, file.n, 1.0)?;
        if lattice.len() != file.nodes || file.values.len() != file.slices * file.nodes * file.d {
            return Err(Error::Config {
                path: "values".into(),
                message: "array length does not match the header".into(),
            });
        }
        Ok(Self {
            d: file.d,
            n: file.n,
            horizon: file.horizon,
            dt: file.dt,
            slice_dt: file.slice_dt,
            sigma2: file.sigma2,
            noise: file.noise_convention,
            lattice,
            values: file.values,
        })
    }
}

impl ValueField for ValueSurface {
    fn d(&self) -> usize {
        self.d
    }

    fn horizon(&self) -> f64 {
        self.horizon
    }

    fn values_into(&self, t: f64, p: &[f64], out: &mut [f64]) {
        self.eval_clamped(t, p, out);
    }
}

/// Neighbour table: `nb[(node * d + a) * d + b]` is the node at
/// `k + e_a - e_b`, or `usize::MAX` off the lattice.
fn neighbours(lat: &SimplexLattice) -> Vec<usize> {
    let d = lat.dim();
    let mut nb = vec![usize::MAX; lat.len() * d * d];
    for idx in 0..lat.len() {
        for a in 0..d {
            for b in 0..d {
                if let Some(j) = lat.shift(idx, a, b) {
                    nb[(idx * d + a) * d + b] = j;
                }
            }
        }
    }
    nb
}

/// Largest explicit time step keeping the scheme monotone on `n` subdivisions.
pub fn admissible_dt(spec: &GameSpec, n: usize) -> Result<f64> {
    let d = spec.d();
    let lat = SimplexLattice::new(d, n, 1.0)?;
    let h = 1.0 / n as f64;
    let sigma2 = spec.sigma2();
    let a_bar = spec.rate_bound().feedback();
    let mut p = vec![0.0; d];
    let mut worst: f64 = 0.0;
    for idx in 0..lat.len() {
        lat.point_into(idx, &mut p);
        let phis: f64 = p.iter().map(|&r| spec.phi(r)).sum();
        let mut out = phis + (d as f64 - 1.0) * a_bar;
        for k in 0..d {
            for j in 0..d {
                if j != k {
                    out += p[k] * (spec.phi(p[j]) + a_bar) / h;
                    out += sigma2 * p[j] / h;
                }
            }
            for j in k + 1..d {
                out += sigma2 * p[j] * p[k] / (h * h);
            }
        }
        worst = worst.max(out);
    }
    Ok(if worst > 0.0 { 1.0 / worst } else { f64::INFINITY })
}

/// Solves the master equation with lattice spacing `dx` (must be `1/n`) and
/// time step at most `dt`, keeping every time slice.
pub fn solve_master(spec: &GameSpec, dx: f64, dt: f64) -> Result<ValueSurface> {
    let n = (1.0 / dx).round();
    if !(n >= 1.0) || (n * dx - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidParameter(format!(
            "dx = {dx} is not the reciprocal of an integer"
        )));
    }
    solve_master_with(
        spec,
        &MasterGrid {
            n: n as usize,
            dt,
            store_every: 1,
        },
    )
}

pub fn solve_master_with(spec: &GameSpec, grid: &MasterGrid) -> Result<ValueSurface> {
    let d = spec.d();
    if d > 4 {
        return Err(Error::InvalidParameter(format!(
            "the master solver supports d <= 4, got {d}"
        )));
    }
    if !(grid.dt > 0.0) || grid.store_every == 0 {
        return Err(Error::InvalidParameter("dt must be positive and store_every >= 1".into()));
    }
    let lat = SimplexLattice::new(d, grid.n, 1.0)?;
    let steps = step_count(spec.horizon(), grid.dt);
    let dt = spec.horizon() / steps as f64;
    let admissible = admissible_dt(spec, grid.n)?;
    if dt > admissible * (1.0 + 1e-12) {
        return Err(Error::Cfl { dt, admissible });
    }

    if !steps.is_multiple_of(grid.store_every) {
        return Err(Error::InvalidParameter(format!(
            "store_every = {} does not divide the {steps} time steps",
            grid.store_every
        )));
    }

    let nodes = lat.len();
    let nb = neighbours(&lat);
    let points: Vec<f64> = (0..nodes).flat_map(|i| lat.point(i)).collect();
    let h = 1.0 / grid.n as f64;
    let sigma2 = spec.sigma2();

    let mut cur = vec![0.0; nodes * d];
    for (idx, chunk) in cur.chunks_mut(d).enumerate() {
        let p = &points[idx * d..(idx + 1) * d];
        for (i, v) in chunk.iter_mut().enumerate() {
            *v = spec.terminal_cost(i, p);
        }
    }

    // slices are produced backward; collect then reverse
    let kept = steps / grid.store_every + 1;
    let mut stored: Vec<Vec<f64>> = Vec::with_capacity(kept);
    stored.push(cur.clone());
    let mut next = vec![0.0; nodes * d];

    for step in (0..steps).rev() {
        next.par_chunks_mut(d).enumerate().for_each(|(idx, out)| {
            let p = &points[idx * d..(idx + 1) * d];
            let u = &cur[idx * d..(idx + 1) * d];
            let drift = master_operator(spec, p, u, &cur, &nb[idx * d * d..(idx + 1) * d * d], h, sigma2);
            for i in 0..d {
                out[i] = u[i] + dt * drift[i];
            }
        });
        if let Some(bad) = next.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "master solution at node {} at time {}",
                bad / d,
                step as f64 * dt
            )));
        }
        std::mem::swap(&mut cur, &mut next);
        if step % grid.store_every == 0 {
            stored.push(cur.clone());
        }
    }
    let slice_dt = dt * grid.store_every as f64;
    stored.reverse();
    Ok(ValueSurface {
        d,
        n: grid.n,
        horizon: spec.horizon(),
        dt,
        slice_dt,
        sigma2,
        noise: spec.noise(),
        lattice: lat,
        values: stored.concat(),
    })
}

/// Everything except the time derivative, with upwind differences, at one node.
#[allow(clippy::too_many_arguments)]
#[inline]
fn master_operator(
    spec: &GameSpec,
    p: &[f64],
    u: &[f64],
    all: &[f64],
    nb: &[usize],
    h: f64,
    sigma2: f64,
) -> [f64; 4] {
    let d = p.len();
    let mut out = [0.0; 4];
    let mut phis = [0.0; 4];
    for j in 0..d {
        phis[j] = spec.phi(p[j]);
    }
    for i in 0..d {
        let ui = u[i];
        let mut acc = hamiltonian(i, u) + spec.running_cost(i, p);
        for j in 0..d {
            if j != i {
                acc += phis[j] * (u[j] - ui);
            }
        }
        for k in 0..d {
            for j in 0..d {
                if j == k {
                    continue;
                }
                // transport along e_j - e_k with weight p_k [phi(p_j) + (U^k - U^j)_+]
                let c = p[k] * (phis[j] + (u[k] - u[j]).max(0.0));
                let m = nb[j * d + k];
                if c > 0.0 {
                    acc += c * (all[m * d + i] - ui) / h;
                }
            }
        }
        for j in 0..d {
            if j == i || p[j] == 0.0 {
                continue;
            }
            let m = nb[i * d + j];
            acc += sigma2 * p[j] * (all[m * d + i] - ui) / h;
        }
        for j in 0..d {
            for k in j + 1..d {
                let c = p[j] * p[k];
                if c > 0.0 {
                    let plus = nb[j * d + k];
                    let minus = nb[k * d + j];
                    acc += 0.5 * sigma2 * c * (all[plus * d + i] - 2.0 * ui + all[minus * d + i])
                        / (h * h);
                }
            }
        }
        out[i] = acc;
    }
    out
}

/// Left-hand side of the master equation for a value field at `(t, p)`,
/// using central differences of step equal to the lattice spacing and a
/// forward difference between neighbouring stored slices in time.
pub fn residual_master(u: &ValueSurface, spec: &GameSpec, t: f64, p: &[f64]) -> Result<Vec<f64>> {
    residual_field(u, spec, t, p, u.spacing(), u.slice_dt())
}

/// [`residual_master`] for an arbitrary field with explicit steps.
pub fn residual_field<V: ValueField + ?Sized>(
    u: &V,
    spec: &GameSpec,
    t: f64,
    p: &[f64],
    h: f64,
    tau: f64,
) -> Result<Vec<f64>> {
    let d = u.d();
    if p.iter().any(|&v| v < h) {
        return Err(Error::Boundary {
            point: p.to_vec(),
            margin: h,
        });
    }
    let horizon = u.horizon();
    let (t0, t1) = if t + tau <= horizon + 1e-12 {
        (t, t + tau)
    } else {
        (t - tau, t)
    };
    let mut a = vec![0.0; d];
    let mut b = vec![0.0; d];
    u.values_into(t0, p, &mut a);
    u.values_into(t1, p, &mut b);
    let sigma2 = spec.sigma2();
    let mut vals = vec![0.0; d];
    u.values_into(t1, p, &mut vals);

    let mut q = p.to_vec();
    let mut plus = vec![0.0; d];
    let mut minus = vec![0.0; d];
    // directional first and second differences along e_j - e_k
    let mut first = vec![0.0; d * d * d];
    let mut second = vec![0.0; d * d * d];
    for j in 0..d {
        for k in 0..d {
            if j == k {
                continue;
            }
            q.copy_from_slice(p);
            q[j] += h;
            q[k] -= h;
            u.values_into(t1, &q, &mut plus);
            q.copy_from_slice(p);
            q[j] -= h;
            q[k] += h;
            u.values_into(t1, &q, &mut minus);
            for i in 0..d {
                first[(j * d + k) * d + i] = (plus[i] - minus[i]) / (2.0 * h);
                second[(j * d + k) * d + i] = (plus[i] - 2.0 * vals[i] + minus[i]) / (h * h);
            }
        }
    }

    let mut res = vec![0.0; d];
    for i in 0..d {
        let dt_term = (b[i] - a[i]) / (t1 - t0);
        let mut acc = dt_term + hamiltonian(i, &vals) + spec.running_cost(i, p);
        for j in 0..d {
            if j != i {
                acc += spec.phi(p[j]) * (vals[j] - vals[i]);
            }
        }
        for k in 0..d {
            for j in 0..d {
                if j != k {
                    let c = p[k] * (spec.phi(p[j]) + (vals[k] - vals[j]).max(0.0));
                    acc += c * first[(j * d + k) * d + i];
                }
            }
        }
        for j in 0..d {
            if j != i {
                acc += sigma2 * p[j] * first[(i * d + j) * d + i];
            }
        }
        for j in 0..d {
            for k in j + 1..d {
                acc += 0.5 * sigma2 * p[j] * p[k] * second[(j * d + k) * d + i];
            }
        }
        res[i] = acc;
    }
    Ok(res)
}

/// Feedback `a*(x^l, U(t, mu))` read from a value field.
pub struct SurfacePolicy<'a, V: ValueField + ?Sized> {
    field: &'a V,
    bound: f64,
}

impl<'a, V: ValueField + ?Sized> SurfacePolicy<'a, V> {
    pub fn new(field: &'a V, bound: f64) -> Self {
        Self { field, bound }
    }
}

/// Mean-field feedback of a solved surface; its declared bound is the
/// spread of the surface values.
pub fn policy_from_surface(u: &ValueSurface) -> Result<SurfacePolicy<'_, ValueSurface>> {
    if u.values.is_empty() {
        return Err(Error::OutOfRange("empty value surface".into()));
    }
    let mut bound: f64 = 0.0;
    for chunk in u.values.chunks(u.d) {
        let (lo, hi) = chunk
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        bound = bound.max(hi - lo);
    }
    Ok(SurfacePolicy::new(u, bound))
}

impl<V: ValueField + ?Sized> Policy for SurfacePolicy<'_, V> {
    fn rates(&self, t: f64, x: &[usize], _y: &[f64], l: usize, mu: &[f64], out: &mut [f64]) {
        let mut u = [0.0; crate::lattice::MAX_DIM];
        let d = mu.len();
        self.field.values_into(t, mu, &mut u[..d]);
        a_star_into(x[l], &u[..d], out);
    }

    fn bound(&self) -> f64 {
        self.bound
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{preset_scenario, Scenario};
    use std::sync::Arc;

    #[test]
    fn constant_terminal_cost_is_preserved() {
        let spec = Scenario::ConstantCost { c: 1.75 }.build(3).unwrap();
        let n = 12;
        let dt = admissible_dt(&spec, n).unwrap();
        let u = solve_master(&spec, 1.0 / n as f64, dt).unwrap();
        assert!(u.values.iter().all(|v| (v - 1.75).abs() < 1e-10));
    }

    #[test]
    fn cfl_violation_is_reported() {
        let spec = preset_scenario("voter").unwrap();
        let adm = admissible_dt(&spec, 50).unwrap();
        match solve_master(&spec, 0.02, adm * 4.0) {
            Err(Error::Cfl { admissible, .. }) => assert!((admissible - adm).abs() < 1e-15),
            other => panic!("expected a CFL error, got {other:?}"),
        }
    }

    #[test]
    fn relabeling_symmetry_in_two_states() {
        let spec = preset_scenario("voter").unwrap().with_horizon(0.5).unwrap();
        let n = 40;
        let u = solve_master(&spec, 1.0 / n as f64, admissible_dt(&spec, n).unwrap()).unwrap();
        let lat = u.lattice();
        for s in [0, u.slices() / 2] {
            for idx in 0..lat.len() {
                let k = lat.composition(idx);
                let mirror = lat.index_of(&[k[1], k[0]]).unwrap();
                let a = u.node_values(s, idx)[0];
                let b = u.node_values(s, mirror)[1];
                assert!((a - b).abs() < 1e-8, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn maximum_principle_and_comparison() {
        let base = preset_scenario("sellers").unwrap();
        let n = 10;
        let dt = admissible_dt(&base, n).unwrap();
        let lo = solve_master(&base, 0.1, dt).unwrap();
        let bound = base.value_bound() + 10.0 * lo.dt() * base.f_sup();
        assert!(lo.max_abs() <= bound + 1e-12);

        let raised = base
            .clone()
            .with_costs(
                Arc::new(|i, p: &[f64]| p[i]),
                Arc::new(|i, p: &[f64]| p[i] + 0.3 * p[(i + 1) % 3]),
            )
            .unwrap();
        let hi = solve_master(&raised, 0.1, dt.min(admissible_dt(&raised, n).unwrap())).unwrap();
        let lo = solve_master(&base, 0.1, hi.dt()).unwrap();
        for (a, b) in lo.values.iter().zip(&hi.values) {
            assert!(b >= &(a - 1e-12));
        }
    }

    #[test]
    fn residual_of_manufactured_fields() {
        let spec = Scenario::ZeroCost.build(3).unwrap();
        let c = ValueSurface::from_fn(&spec, 10, 0.1, |_, _, _| 2.0).unwrap();
        let r = residual_master(&c, &spec, 0.2, &[0.3, 0.3, 0.4]).unwrap();
        assert!(r.iter().all(|&v| v == 0.0));

        let unit_cost = spec
            .clone()
            .with_costs(Arc::new(|_, _| 1.0), Arc::new(|_, _| 0.0))
            .unwrap();
        let z = ValueSurface::from_fn(&unit_cost, 10, 0.1, |_, _, _| 0.0).unwrap();
        let r = residual_master(&z, &unit_cost, 0.2, &[0.3, 0.3, 0.4]).unwrap();
        assert!(r.iter().all(|&v| v == 1.0));

        assert!(matches!(
            residual_master(&z, &unit_cost, 0.2, &[0.05, 0.5, 0.45]),
            Err(Error::Boundary { .. })
        ));
    }

    #[test]
    fn residual_shrinks_under_refinement() {
        let spec = preset_scenario("voter").unwrap().with_horizon(0.25).unwrap();
        let probes = [[0.4, 0.6], [0.5, 0.5], [0.7, 0.3]];
        let mut prev = f64::INFINITY;
        for n in [20, 40, 80] {
            let u = solve_master(&spec, 1.0 / n as f64, admissible_dt(&spec, n).unwrap()).unwrap();
            let worst = probes
                .iter()
                .map(|p| {
                    residual_master(&u, &spec, 0.1, p)
                        .unwrap()
                        .iter()
                        .fold(0.0f64, |m, v| m.max(v.abs()))
                })
                .fold(0.0f64, f64::max);
            assert!(worst < prev, "residual {worst} did not shrink from {prev}");
            prev = worst;
        }
    }

    #[test]
    fn surface_policy_follows_value_differences() {
        let spec = preset_scenario("voter").unwrap();
        let u = ValueSurface::from_fn(&spec, 8, 0.5, |_, i, _| if i == 0 { 3.0 } else { 1.0 }).unwrap();
        let pol = policy_from_surface(&u).unwrap();
        let mut out = [0.0; 2];
        pol.rates(0.3, &[0, 1], &[1.0, 1.0], 0, &[0.5, 0.5], &mut out);
        assert_eq!(out, [0.0, 2.0]);
        pol.rates(0.3, &[0, 1], &[1.0, 1.0], 1, &[0.5, 0.5], &mut out);
        assert_eq!(out, [0.0, 0.0]);
        assert_eq!(pol.bound(), 2.0);
    }

    #[test]
    fn json_round_trip() {
        let spec = preset_scenario("voter").unwrap();
        let u = ValueSurface::from_fn(&spec, 6, 0.25, |t, i, p| t + i as f64 * p[0]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("u.json");
        u.save_json(&path).unwrap();
        let v = ValueSurface::load_json(&path).unwrap();
        assert_eq!(u.values, v.values);
        assert_eq!(v.slices(), 5);
    }
}
