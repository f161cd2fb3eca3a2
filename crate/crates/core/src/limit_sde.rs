//! Euler–Maruyama simulation of the limiting measure flow `P` and of the
//! density `Q` of a representative player.

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::MAX_DIM;
use crate::master_eq::ValueField;
use crate::model::GameSpec;
use crate::nplayer::Policy;
use crate::rng::SeedTree;
use crate::simplex::SimplexPoint;
use crate::stats::Estimate;

/// A discretised path on `[0, T]` with step `dt`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SdePath {
    pub d: usize,
    pub dt: f64,
    pub steps: usize,
    pub seed_root: u64,
    pub path: u64,
    /// `(steps + 1) * d` values
    pub p: Vec<f64>,
    /// `steps * d (d - 1) / 2` Brownian increments, one per unordered pair
    pub increments: Vec<f64>,
    /// `(steps + 1) * d` values once [`simulate_q`] has run
    pub q: Option<Vec<f64>>,
    /// cost of the representative player along this path, if computed
    pub q_cost: Option<f64>,
    /// number of steps at which a coordinate had to be clipped
    pub clipped_steps: usize,
    /// largest `|sum P - 1|` observed before projection
    pub max_sum_defect: f64,
}

impl SdePath {
    pub fn at(&self, step: usize) -> &[f64] {
        &self.p[step * self.d..(step + 1) * self.d]
    }

    pub fn terminal(&self) -> &[f64] {
        self.at(self.steps)
    }

    pub fn q_at(&self, step: usize) -> Option<&[f64]> {
        self.q.as_ref().map(|q| &q[step * self.d..(step + 1) * self.d])
    }

    /// Fraction of steps at which the projection was active.
    pub fn projection_activity(&self) -> f64 {
        self.clipped_steps as f64 / self.steps.max(1) as f64
    }

    fn pairs(&self) -> usize {
        self.d * (self.d - 1) / 2
    }
}

#[inline]
fn pair_index(d: usize, i: usize, j: usize) -> usize {
    // i < j
    i * d - i * (i + 1) / 2 + (j - i - 1)
}

/// Simulates `P` from `p0` under the feedback read from `u`.
pub fn simulate_p<V: ValueField + ?Sized>(
    spec: &GameSpec,
    u: &V,
    p0: &SimplexPoint,
    dt: f64,
    seeds: &SeedTree,
    path: u64,
) -> Result<SdePath> {
    let d = spec.d();
    if p0.dim() != d || u.d() != d {
        return Err(Error::InvalidParameter("dimension mismatch between spec, field and p0".into()));
    }
    if !(dt > 0.0) {
        return Err(Error::InvalidParameter(format!("time step {dt}")));
    }
    let steps = crate::master_eq::step_count(spec.horizon(), dt);
    let dt = spec.horizon() / steps as f64;
    let pairs = d * (d - 1) / 2;
    let sigma = spec.sigma2().sqrt();
    let sq = dt.sqrt();
    let mut rng = seeds.stream(path, 0);

    let mut p = Vec::with_capacity((steps + 1) * d);
    p.extend_from_slice(p0.as_slice());
    let mut increments = Vec::with_capacity(steps * pairs);
    let mut cur = [0.0; MAX_DIM];
    cur[..d].copy_from_slice(p0.as_slice());
    let mut vals = [0.0; MAX_DIM];
    let mut phis = [0.0; MAX_DIM];
    let mut next = [0.0; MAX_DIM];
    let (mut clipped_steps, mut max_sum_defect) = (0usize, 0.0f64);

    for s in 0..steps {
        let t = s as f64 * dt;
        u.values_into(t, &cur[..d], &mut vals[..d]);
        for j in 0..d {
            phis[j] = spec.phi(cur[j]);
        }
        for i in 0..d {
            let mut b = 0.0;
            for j in 0..d {
                if j != i {
                    b += cur[j] * (phis[i] + (vals[j] - vals[i]).max(0.0))
                        - cur[i] * (phis[j] + (vals[i] - vals[j]).max(0.0));
                }
            }
            next[i] = cur[i] + b * dt;
        }
        for i in 0..d {
            for j in i + 1..d {
                let z: f64 = StandardNormal.sample(&mut rng);
                let dw = z * sq;
                increments.push(dw);
                let kick = sigma * (cur[i] * cur[j]).max(0.0).sqrt() * dw;
                next[i] += kick;
                next[j] -= kick;
            }
        }
        let sum: f64 = next[..d].iter().sum();
        max_sum_defect = max_sum_defect.max((sum - 1.0).abs());
        if next[..d].iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("limit path at step {s}")));
        }
        if next[..d].iter().any(|&v| v < 0.0) {
            clipped_steps += 1;
            for v in next[..d].iter_mut() {
                *v = v.max(0.0);
            }
        }
        let total: f64 = next[..d].iter().sum();
        for i in 0..d {
            cur[i] = next[i] / total;
        }
        p.extend_from_slice(&cur[..d]);
    }
    Ok(SdePath {
        d,
        dt,
        steps,
        seed_root: seeds.root(),
        path,
        p,
        increments,
        q: None,
        q_cost: None,
        clipped_steps,
        max_sum_defect,
    })
}

/// Runs the density of a representative player using control `beta`
/// (`beta.rates(t, [i], [1], 0, P)` are the rates out of state `i`) along
/// the increments stored in `path`, and evaluates its cost.
pub fn simulate_q(spec: &GameSpec, beta: &dyn Policy, path: &SdePath, q0: &[f64]) -> Result<SdePath> {
    let d = path.d;
    if path.increments.len() != path.steps * path.pairs() {
        return Err(Error::MissingIncrements);
    }
    if q0.len() != d || q0.iter().any(|&v| v < 0.0) {
        return Err(Error::InvalidParameter("q0 must be a nonnegative vector of length d".into()));
    }
    let dt = path.dt;
    let sigma = spec.sigma2().sqrt();
    let mut q = Vec::with_capacity((path.steps + 1) * d);
    q.extend_from_slice(q0);
    let mut cur = [0.0; MAX_DIM];
    cur[..d].copy_from_slice(q0);
    let mut next = [0.0; MAX_DIM];
    let mut beta_rows = vec![0.0; d * d];
    let mut phis = [0.0; MAX_DIM];
    let unit = [1.0];
    let mut cost = 0.0;

    for s in 0..path.steps {
        let t = s as f64 * dt;
        let p = path.at(s);
        for j in 0..d {
            phis[j] = spec.phi(p[j]);
        }
        for i in 0..d {
            let row = &mut beta_rows[i * d..(i + 1) * d];
            beta.rates(t, &[i], &unit, 0, p, row);
            row[i] = 0.0;
        }
        for i in 0..d {
            let row = &beta_rows[i * d..(i + 1) * d];
            let run = spec.running_cost(i, p) + 0.5 * row.iter().map(|a| a * a).sum::<f64>();
            cost += cur[i] * run * dt;
        }
        for i in 0..d {
            let mut b = 0.0;
            for j in 0..d {
                if j != i {
                    b += cur[j] * (phis[i] + beta_rows[j * d + i]) - cur[i] * (phis[j] + beta_rows[i * d + j]);
                }
            }
            next[i] = cur[i] + b * dt;
        }
        let inc = &path.increments[s * path.pairs()..(s + 1) * path.pairs()];
        for i in 0..d {
            if p[i] <= 0.0 {
                continue;
            }
            for j in 0..d {
                if j == i {
                    continue;
                }
                let dw = if i < j {
                    inc[pair_index(d, i, j)]
                } else {
                    -inc[pair_index(d, j, i)]
                };
                next[i] += sigma * cur[i] * (p[j] / p[i]).sqrt() * dw;
            }
        }
        for i in 0..d {
            if !next[i].is_finite() {
                return Err(Error::NonFinite(format!("density at step {s}")));
            }
            cur[i] = next[i].max(0.0);
        }
        q.extend_from_slice(&cur[..d]);
    }
    let pt = path.terminal();
    for i in 0..d {
        cost += cur[i] * spec.terminal_cost(i, pt);
    }
    let mut out = path.clone();
    out.q = Some(q);
    out.q_cost = Some(cost);
    Ok(out)
}

/// Monte-Carlo estimate of the cost of control `beta` against the flow
/// generated by `u`, started from `q0 = p0`.
pub fn mfg_cost<V: ValueField + ?Sized>(
    spec: &GameSpec,
    u: &V,
    beta: &dyn Policy,
    p0: &SimplexPoint,
    dt: f64,
    paths: usize,
    seeds: &SeedTree,
) -> Result<Estimate> {
    let samples = (0..paths as u64)
        .into_par_iter()
        .map(|k| {
            let path = simulate_p(spec, u, p0, dt, seeds, k)?;
            let with_q = simulate_q(spec, beta, &path, p0.as_slice())?;
            Ok(with_q.q_cost.unwrap_or(f64::NAN))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(Estimate::from_samples(&samples))
}

/// Terminal values of `paths` independent limit paths.
pub fn terminal_ensemble<V: ValueField + ?Sized>(
    spec: &GameSpec,
    u: &V,
    p0: &SimplexPoint,
    dt: f64,
    paths: usize,
    seeds: &SeedTree,
) -> Result<Vec<Vec<f64>>> {
    (0..paths as u64)
        .into_par_iter()
        .map(|k| simulate_p(spec, u, p0, dt, seeds, k).map(|p| p.terminal().to_vec()))
        .collect()
}
