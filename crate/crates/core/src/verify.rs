//! Oracles and statistical checks: multinomial moments, weight and boundary
//! estimates, remainders of the Nash system evaluated on a mean-field value,
//! weak convergence of the empirical measure and best responses.

use num_rational::Ratio;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::lattice::MAX_DIM;
use crate::limit_sde::simulate_p;
use crate::master_eq::{policy_from_surface, ValueField, ValueSurface};
use crate::model::GameSpec;
use crate::nash::{
    equilibrium_policy, nash_admissible_dt, nash_operator, solve_nash_with, NashGrid, MAX_PLAYERS, MAX_STATES,
};
use crate::nplayer::{
    composition_count, compositions, in_safe_set, multinomial_pmf, simulate, simulate_observed, Observer, Policy,
    SimOptions, WeightedConfiguration,
};
use crate::rng::SeedTree;
use crate::simplex::{intrinsic_gradient, intrinsic_hessian, kimura_contraction, weighted_measure_into, SimplexPoint};
use crate::stats::{ks_two_sample, Estimate};

/// Largest number of multinomial outcomes an oracle will enumerate.
pub const ENUMERATION_LIMIT: usize = 2_000_000;

/// Exponents of exponential functionals are capped here.
pub const EXP_CAP: f64 = 700.0;

/// Fraction of capped paths above which a saturation warning is raised.
pub const SATURATION_WARNING: f64 = 0.01;

/// Parameters shared by the checks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerificationConfig {
    /// boundary exponent of the localising stopping time
    pub eps_exp: f64,
    /// moment order
    pub ell: u32,
    /// exponential-bound parameter
    pub lambda: f64,
    pub paths: usize,
    pub n_list: Vec<usize>,
    /// probe times as fractions of the horizon
    pub probe_times: Vec<f64>,
}

impl Default for VerificationConfig {
    fn default() -> Self {
        Self {
            eps_exp: 0.125,
            ell: 3,
            lambda: 1.0,
            paths: 1000,
            n_list: vec![8, 32, 128],
            probe_times: vec![1.0],
        }
    }
}

impl VerificationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps_exp > 0.0 && self.eps_exp < 0.25) {
            return Err(Error::InvalidParameter(format!(
                "eps_exp = {} violates 0 < eps_exp < 1/4",
                self.eps_exp
            )));
        }
        if self.ell < 1 {
            return Err(Error::InvalidParameter("ell must be an integer >= 1".into()));
        }
        if !(self.lambda >= 1.0) {
            return Err(Error::InvalidParameter(format!("lambda = {} violates lambda >= 1", self.lambda)));
        }
        if self.paths == 0 {
            return Err(Error::InvalidParameter("paths must be positive".into()));
        }
        if self.n_list.contains(&0) {
            return Err(Error::InvalidParameter("n_list entries must be positive".into()));
        }
        if self.probe_times.iter().any(|&t| !(0.0..=1.0).contains(&t)) {
            return Err(Error::InvalidParameter("probe_times must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Machine-readable outcome of a check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub name: String,
    pub inputs: Value,
    pub statistics: Value,
    pub thresholds: Value,
    pub pass: bool,
}

impl Verdict {
    pub fn new(name: &str, inputs: impl Serialize, statistics: impl Serialize, thresholds: impl Serialize, pass: bool) -> Result<Self> {
        Ok(Self {
            name: name.to_string(),
            inputs: serde_json::to_value(inputs)?,
            statistics: serde_json::to_value(statistics)?,
            thresholds: serde_json::to_value(thresholds)?,
            pass,
        })
    }
}

fn check_enumeration(n: u64, d: usize) -> Result<()> {
    let terms = composition_count(n, d);
    if terms > ENUMERATION_LIMIT {
        return Err(Error::EnumerationSize {
            terms,
            limit: ENUMERATION_LIMIT,
        });
    }
    Ok(())
}

/// `v[k+1] <= (1 + slack) v[k]` for every `k`.
pub fn non_increasing(v: &[f64], slack: f64) -> bool {
    v.windows(2).all(|w| w[1] <= (1.0 + slack) * w[0] + 1e-15)
}

pub fn strictly_decreasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] < w[0])
}

// ---------------------------------------------------------------------------
// multinomial moments

/// Exact moments of `R = S[i] / (N mu[i])` for `S ~ Mult(N, mu)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentReport {
    pub n: u64,
    pub mu: Vec<f64>,
    pub ell: u32,
    pub i: usize,
    pub j: usize,
    /// `E[R^ell - 1]`
    pub mean_moment: f64,
    /// `E[(S[j] / (N mu[j])) (R^ell - 1)]`
    pub cross_moment: f64,
    /// `E[|R^ell - 1|^2]`
    pub abs_moment_p2: f64,
    /// `E[|R^ell - 1|^4]`
    pub abs_moment_p4: f64,
    /// leading term `ell (ell - 1) / (2 N mu[i])`; the whole bound when `ell <= 2`
    pub mean_bound: f64,
    /// leading term `ell (ell + 1) / (2 N min mu)`; the whole bound when `ell = 1`
    pub cross_bound: f64,
    /// `1 / (2 N min mu)`, a sharper cross bound valid for `i != j` and `ell = 1`
    pub pair_cross_bound: f64,
    pub mean_bound_holds: Option<bool>,
    pub cross_bound_holds: Option<bool>,
}

pub fn multinomial_moment_oracle(n: u64, mu: &[f64], ell: u32, i: usize, j: usize) -> Result<MomentReport> {
    let d = mu.len();
    SimplexPoint::new(mu.to_vec())?;
    if i >= d || j >= d {
        return Err(Error::OutOfRange(format!("states ({i}, {j}) with d = {d}")));
    }
    if n == 0 || mu.iter().any(|&m| m <= 0.0) {
        return Err(Error::InvalidParameter("the oracle needs N >= 1 and mu > 0".into()));
    }
    check_enumeration(n, d)?;
    let nf = n as f64;
    let (mut m1, mut cross, mut p2, mut p4) = (0.0, 0.0, 0.0, 0.0);
    for k in compositions(n, d) {
        let w = multinomial_pmf(&k, mu);
        let r = k[i] as f64 / (nf * mu[i]);
        let rj = k[j] as f64 / (nf * mu[j]);
        let c = r.powi(ell as i32) - 1.0;
        m1 += w * c;
        cross += w * rj * c;
        p2 += w * c * c;
        p4 += w * c.powi(4);
    }
    let min_mu = mu.iter().cloned().fold(f64::INFINITY, f64::min);
    let lf = ell as f64;
    let mean_bound = lf * (lf - 1.0) / (2.0 * nf * mu[i]);
    let cross_bound = lf * (lf + 1.0) / (2.0 * nf * min_mu);
    let tol = 1e-12;
    Ok(MomentReport {
        n,
        mu: mu.to_vec(),
        ell,
        i,
        j,
        mean_moment: m1,
        cross_moment: cross,
        abs_moment_p2: p2,
        abs_moment_p4: p4,
        mean_bound,
        cross_bound,
        pair_cross_bound: 1.0 / (2.0 * nf * min_mu),
        mean_bound_holds: (ell <= 2).then(|| m1.abs() <= mean_bound + tol),
        cross_bound_holds: (ell == 1).then(|| cross.abs() <= cross_bound + tol),
    })
}

impl MomentReport {
    pub fn verdict(&self) -> Result<Verdict> {
        let pass = self.mean_bound_holds.unwrap_or(true) && self.cross_bound_holds.unwrap_or(true);
        Verdict::new(
            "multinomial-moments",
            serde_json::json!({"n": self.n, "mu": self.mu, "ell": self.ell, "i": self.i, "j": self.j}),
            serde_json::json!({
                "mean_moment": self.mean_moment,
                "cross_moment": self.cross_moment,
                "abs_moment_p2": self.abs_moment_p2,
                "abs_moment_p4": self.abs_moment_p4,
            }),
            serde_json::json!({
                "mean_bound": self.mean_bound,
                "cross_bound": self.cross_bound,
                "pair_cross_bound": self.pair_cross_bound,
                "mean_bound_explicit": self.ell <= 2,
                "cross_bound_explicit": self.ell == 1,
            }),
            pass,
        )
    }
}

/// Moments of [`multinomial_moment_oracle`] in exact rational arithmetic,
/// for `mu = numerators / denominator`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExactMoments {
    pub mean_moment: Ratio<i128>,
    pub cross_moment: Ratio<i128>,
}

pub fn exact_multinomial_moments(n: u64, numerators: &[u64], denominator: u64, ell: u32, i: usize, j: usize) -> Result<ExactMoments> {
    let d = numerators.len();
    if i >= d || j >= d {
        return Err(Error::OutOfRange(format!("states ({i}, {j}) with d = {d}")));
    }
    if numerators.iter().sum::<u64>() != denominator || numerators.contains(&0) {
        return Err(Error::InvalidParameter("numerators must be positive and sum to the denominator".into()));
    }
    check_enumeration(n, d)?;
    let mu: Vec<Ratio<i128>> = numerators
        .iter()
        .map(|&a| Ratio::new(a as i128, denominator as i128))
        .collect();
    let nr = Ratio::from_integer(n as i128);
    let one = Ratio::from_integer(1);
    let fact = |m: u64| (1..=m as i128).product::<i128>();
    let mut mean = Ratio::from_integer(0);
    let mut cross = Ratio::from_integer(0);
    for k in compositions(n, d) {
        let mut w = Ratio::from_integer(fact(n));
        for (e, &ke) in k.iter().enumerate() {
            w /= fact(ke);
            w *= mu[e].pow(ke as i32);
        }
        let r = Ratio::from_integer(k[i] as i128) / (nr * mu[i]);
        let rj = Ratio::from_integer(k[j] as i128) / (nr * mu[j]);
        let c = r.pow(ell as i32) - one;
        mean += w * c;
        cross += w * rj * c;
    }
    Ok(ExactMoments {
        mean_moment: mean,
        cross_moment: cross,
    })
}

/// Exact tails `P(|R^ell - 1| >= eta)` across `N`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TailReport {
    pub mu_i: f64,
    pub ell: u32,
    pub eta: f64,
    pub rows: Vec<TailRow>,
    /// least-squares slope of `ln tail` against `N mu_i^2` over nonzero tails
    pub slope: Option<f64>,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TailRow {
    pub n: u64,
    pub tail: f64,
    pub n_mu2: f64,
}

/// Exact tail of the centred moment; `S[i]` is binomial, so this works for any `N`.
pub fn exact_tail(n: u64, mu_i: f64, ell: u32, eta: f64) -> f64 {
    if mu_i >= 1.0 {
        return 0.0;
    }
    let nf = n as f64;
    (0..=n)
        .filter(|&s| ((s as f64 / (nf * mu_i)).powi(ell as i32) - 1.0).abs() >= eta)
        .map(|s| multinomial_pmf(&[s, n - s], &[mu_i, 1.0 - mu_i]))
        .sum()
}

pub fn hoeffding_tail_check(n_list: &[u64], mu_i: f64, ell: u32, eta: f64) -> Result<TailReport> {
    if !(mu_i > 0.0 && mu_i <= 1.0) || !(eta > 0.0) {
        return Err(Error::InvalidParameter(format!("mu_i = {mu_i}, eta = {eta}")));
    }
    let rows: Vec<TailRow> = n_list
        .iter()
        .map(|&n| TailRow {
            n,
            tail: exact_tail(n, mu_i, ell, eta),
            n_mu2: n as f64 * mu_i * mu_i,
        })
        .collect();
    let pts: Vec<(f64, f64)> = rows.iter().filter(|r| r.tail > 0.0).map(|r| (r.n_mu2, r.tail.ln())).collect();
    let slope = if pts.len() >= 2 {
        let m = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / m;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / m;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        Some(sxy / sxx)
    } else {
        None
    };
    // all-zero tails are the degenerate case of the bound
    let pass = slope.map_or(pts.is_empty(), |s| s < 0.0);
    Ok(TailReport {
        mu_i,
        ell,
        eta,
        rows,
        slope,
        pass,
    })
}

// ---------------------------------------------------------------------------
// weight moments and boundary integrability

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightMomentReport {
    pub n: usize,
    pub ell: u32,
    pub eps_exp: f64,
    pub mu0: Vec<f64>,
    pub times: Vec<f64>,
    /// `E[(1/N) sum |Y_{t ^ tau}|^ell]` per time
    pub moment: Vec<Estimate>,
    /// `E[((1/N) sum |Y_{t ^ tau}|^ell)^{-1}]` per time
    pub inverse: Vec<Estimate>,
    /// the same without stopping
    pub moment_unstopped: Vec<Estimate>,
    pub inverse_unstopped: Vec<Estimate>,
    pub sup_moment: Estimate,
    pub sup_inverse: Estimate,
    pub sup_moment_unstopped: Estimate,
    pub sup_inverse_unstopped: Estimate,
    /// `(N^{-1} sum |y_0|^{2 ell})^{1/2} prod_i (N^{-e} + mu_0[i])^{-1/(2d)}`
    pub reference_shape: f64,
    /// fraction of paths with `tau = 0`
    pub tau_zero_fraction: f64,
    pub finite: bool,
}

struct WeightSampler<'a> {
    times: &'a [f64],
    next: usize,
    eps_exp: f64,
    start: f64,
    tau: Option<f64>,
    y_tau: Vec<f64>,
    stopped: Vec<Vec<f64>>,
    unstopped: Vec<Vec<f64>>,
}

impl Observer for WeightSampler<'_> {
    fn segment(&mut self, t0: f64, t1: f64, _x: &[usize], y: &[f64], mu: &[f64]) {
        if self.tau.is_none() && !in_safe_set(mu, y, self.eps_exp) {
            self.tau = Some(t0);
            self.y_tau = y.to_vec();
        }
        while self.next < self.times.len() && self.times[self.next] < t1 {
            self.unstopped.push(y.to_vec());
            self.stopped.push(if self.tau.is_some() { self.y_tau.clone() } else { y.to_vec() });
            self.next += 1;
        }
    }
}

fn power_mean(y: &[f64], ell: u32) -> f64 {
    y.iter().map(|v| v.abs().powi(ell as i32)).sum::<f64>() / y.len() as f64
}

fn uniform_times(horizon: f64, count: usize) -> Vec<f64> {
    (0..=count).map(|k| horizon * k as f64 / count as f64).collect()
}

fn sup_estimate(es: &[Estimate]) -> Estimate {
    *es.iter().max_by(|a, b| a.mean.total_cmp(&b.mean)).expect("at least one time")
}

/// Monte-Carlo moments of the weights on a uniform grid of 33 times.
pub fn weight_moment_check(
    spec: &GameSpec,
    policy: &dyn Policy,
    init: &WeightedConfiguration,
    cfg: &VerificationConfig,
    seeds: &SeedTree,
) -> Result<WeightMomentReport> {
    cfg.validate()?;
    let n = init.n();
    let times = uniform_times(spec.horizon(), 32);
    let opts = SimOptions::new(spec).without_events();
    let per_path: Vec<(Vec<Vec<f64>>, Vec<Vec<f64>>, bool)> = (0..cfg.paths as u64)
        .into_par_iter()
        .map(|p| {
            let mut obs = WeightSampler {
                times: &times,
                next: 0,
                eps_exp: cfg.eps_exp,
                start: 0.0,
                tau: None,
                y_tau: Vec::new(),
                stopped: Vec::new(),
                unstopped: Vec::new(),
            };
            let rec = simulate_observed(spec, policy, init, &opts, seeds, p, &mut obs)?;
            while obs.unstopped.len() < times.len() {
                let y = rec.terminal.y.clone();
                obs.stopped.push(if obs.tau.is_some() { obs.y_tau.clone() } else { y.clone() });
                obs.unstopped.push(y);
            }
            let zero = obs.tau == Some(obs.start);
            Ok((obs.stopped, obs.unstopped, zero))
        })
        .collect::<Result<_>>()?;
    let column = |k: usize, stopped: bool, inverse: bool| {
        let xs: Vec<f64> = per_path
            .iter()
            .map(|(s, u, _)| {
                let m = power_mean(if stopped { &s[k] } else { &u[k] }, cfg.ell);
                if inverse {
                    1.0 / m
                } else {
                    m
                }
            })
            .collect();
        Estimate::from_samples(&xs)
    };
    let build = |stopped, inverse| (0..times.len()).map(|k| column(k, stopped, inverse)).collect::<Vec<_>>();
    let moment = build(true, false);
    let inverse = build(true, true);
    let moment_unstopped = build(false, false);
    let inverse_unstopped = build(false, true);
    let mu0 = init.mu();
    let d = mu0.len() as f64;
    let floor = (n as f64).powf(-cfg.eps_exp);
    let reference_shape = power_mean(&init.y, 2 * cfg.ell).sqrt()
        * mu0.iter().map(|&m| (floor + m).powf(-1.0 / (2.0 * d))).product::<f64>();
    let finite = [&moment, &inverse, &moment_unstopped, &inverse_unstopped]
        .iter()
        .all(|v| v.iter().all(|e| e.mean.is_finite()));
    let tau_zero_fraction = per_path.iter().filter(|p| p.2).count() as f64 / cfg.paths as f64;
    Ok(WeightMomentReport {
        n,
        ell: cfg.ell,
        eps_exp: cfg.eps_exp,
        mu0,
        times,
        sup_moment: sup_estimate(&moment),
        sup_inverse: sup_estimate(&inverse),
        sup_moment_unstopped: sup_estimate(&moment_unstopped),
        sup_inverse_unstopped: sup_estimate(&inverse_unstopped),
        moment,
        inverse,
        moment_unstopped,
        inverse_unstopped,
        reference_shape,
        tau_zero_fraction,
        finite,
    })
}

/// Region on which the exponential functional is accumulated.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Localisation {
    /// the safe set of the stopping time with exponent `eps_exp`
    StoppingTime { eps_exp: f64 },
    /// `min_i mu[i] >= floor`, ignoring the weights
    Floor { floor: f64 },
}

impl Localisation {
    fn inside(&self, mu: &[f64], y: &[f64]) -> bool {
        match *self {
            Self::StoppingTime { eps_exp } => in_safe_set(mu, y, eps_exp),
            Self::Floor { floor } => mu.iter().all(|&m| m >= floor),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpBoundReport {
    pub n: usize,
    pub lambda: f64,
    pub kappa: f64,
    pub localisation: Localisation,
    /// `E[exp(int_0^tau lambda / mu_t[i] dt)]` per state
    pub per_state: Vec<Estimate>,
    pub cap: f64,
    pub saturated_fraction: f64,
    pub saturation_warning: bool,
    pub tau_zero_fraction: f64,
    pub finite: bool,
    /// per-path exponents, kept for paired comparisons
    #[serde(skip)]
    pub exponents: Vec<Vec<f64>>,
}

struct ExpAccumulator {
    lambda: f64,
    loc: Localisation,
    start: f64,
    exited: bool,
    tau_zero: bool,
    integral: Vec<f64>,
}

impl Observer for ExpAccumulator {
    fn segment(&mut self, t0: f64, t1: f64, _x: &[usize], y: &[f64], mu: &[f64]) {
        if self.exited {
            return;
        }
        if !self.loc.inside(mu, y) {
            self.exited = true;
            self.tau_zero = t0 == self.start;
            return;
        }
        for (acc, &m) in self.integral.iter_mut().zip(mu) {
            *acc += self.lambda * (t1 - t0) / m;
        }
    }
}

pub fn exp_bound_check(
    spec: &GameSpec,
    policy: &dyn Policy,
    init: &WeightedConfiguration,
    lambda: f64,
    loc: Localisation,
    paths: usize,
    seeds: &SeedTree,
) -> Result<ExpBoundReport> {
    if !(lambda >= 1.0) {
        return Err(Error::InvalidParameter(format!("lambda = {lambda} violates lambda >= 1")));
    }
    let d = spec.d();
    let opts = SimOptions::new(spec).without_events();
    let runs: Vec<(Vec<f64>, bool)> = (0..paths as u64)
        .into_par_iter()
        .map(|p| {
            let mut acc = ExpAccumulator {
                lambda,
                loc,
                start: 0.0,
                exited: false,
                tau_zero: false,
                integral: vec![0.0; d],
            };
            simulate_observed(spec, policy, init, &opts, seeds, p, &mut acc)?;
            Ok((acc.integral, acc.tau_zero))
        })
        .collect::<Result<_>>()?;
    let mut saturated = 0;
    let exponents: Vec<Vec<f64>> = runs
        .iter()
        .map(|(v, _)| {
            if v.iter().any(|&e| e > EXP_CAP) {
                saturated += 1;
            }
            v.iter().map(|&e| e.min(EXP_CAP)).collect()
        })
        .collect();
    let per_state: Vec<Estimate> = (0..d)
        .map(|i| Estimate::from_samples(&exponents.iter().map(|e| e[i].exp()).collect::<Vec<_>>()))
        .collect();
    let saturated_fraction = saturated as f64 / paths.max(1) as f64;
    Ok(ExpBoundReport {
        n: init.n(),
        lambda,
        kappa: spec.kappa(),
        localisation: loc,
        finite: per_state.iter().all(|e| e.mean.is_finite()),
        per_state,
        cap: EXP_CAP,
        saturated_fraction,
        saturation_warning: saturated_fraction > SATURATION_WARNING,
        tau_zero_fraction: runs.iter().filter(|r| r.1).count() as f64 / paths.max(1) as f64,
        exponents,
    })
}

/// Paired comparison of the exponential functional at `kappa` and `2 kappa`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KappaComparison {
    pub base: ExpBoundReport,
    pub doubled: ExpBoundReport,
    /// per-state paired differences `doubled - base`
    pub difference: Vec<Estimate>,
    pub pass: bool,
}

pub fn exp_bound_kappa_comparison(
    spec: &GameSpec,
    policy: &dyn Policy,
    init: &WeightedConfiguration,
    lambda: f64,
    loc: Localisation,
    paths: usize,
    seeds: &SeedTree,
) -> Result<KappaComparison> {
    let base = exp_bound_check(spec, policy, init, lambda, loc, paths, seeds)?;
    let twice = spec.clone().with_kappa(2.0 * spec.kappa())?;
    let doubled = exp_bound_check(&twice, policy, init, lambda, loc, paths, seeds)?;
    let difference: Vec<Estimate> = (0..spec.d())
        .map(|i| {
            let xs: Vec<f64> = base
                .exponents
                .iter()
                .zip(&doubled.exponents)
                .map(|(a, b)| b[i].exp() - a[i].exp())
                .collect();
            Estimate::from_samples(&xs)
        })
        .collect();
    let pass = base.finite && doubled.finite && difference.iter().all(|e| e.mean <= 3.0 * e.se + 1e-12);
    Ok(KappaComparison {
        base,
        doubled,
        difference,
        pass,
    })
}

// ---------------------------------------------------------------------------
// remainders on probes

/// Point `(t, x, y)` at which remainders are evaluated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub t: f64,
    pub x: Vec<usize>,
    pub y: Vec<f64>,
}

/// Configuration of `n` players whose weighted measure is exactly `mu`.
///
/// Players are spread over the occupied states by largest remainder, with
/// at least one player per occupied state, and share their state's mass equally.
pub fn probe_configuration(n: usize, mu: &[f64]) -> Result<WeightedConfiguration> {
    let d = mu.len();
    SimplexPoint::new(mu.to_vec())?;
    let occupied: Vec<usize> = (0..d).filter(|&i| mu[i] > 0.0).collect();
    if occupied.len() > n {
        return Err(Error::InvalidParameter(format!("{} occupied states for {n} players", occupied.len())));
    }
    let mut counts = vec![0usize; d];
    for &i in &occupied {
        counts[i] = 1;
    }
    let mut rest = n - occupied.len();
    while rest > 0 {
        // give the next player to the state with the largest mass per player
        let &i = occupied
            .iter()
            .max_by(|&&a, &&b| (mu[a] / counts[a] as f64).total_cmp(&(mu[b] / counts[b] as f64)).then(b.cmp(&a)))
            .expect("nonempty");
        counts[i] += 1;
        rest -= 1;
    }
    let mut x = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for i in 0..d {
        for _ in 0..counts[i] {
            x.push(i);
            y.push(n as f64 * mu[i] / counts[i] as f64);
        }
    }
    WeightedConfiguration::new(d, x, y)
}

/// Probes at the given times and measures for every `n`.
pub fn probes_for(n: usize, times: &[f64], measures: &[Vec<f64>]) -> Result<Vec<Probe>> {
    let mut out = Vec::new();
    for &t in times {
        for mu in measures {
            let c = probe_configuration(n, mu)?;
            out.push(Probe { t, x: c.x, y: c.y });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpansionRow {
    pub n: usize,
    pub t: f64,
    pub x: Vec<usize>,
    pub y: Vec<f64>,
    pub l: usize,
    /// `N E[(S[i] / (N mu[i])) U^i(t, S / N) - U^i(t, mu)]`, `i = x^l`
    pub lhs: f64,
    pub first_order: f64,
    pub second_order: f64,
    pub remainder: f64,
}

fn eval_component(u: &dyn ValueField, t: f64, i: usize, p: &[f64]) -> f64 {
    let mut b = [0.0; MAX_DIM];
    u.values_into(t, p, &mut b[..p.len()]);
    b[i]
}

/// Remainder of the second-order expansion of the common-noise term for
/// player `l`. Derivatives use central differences of size `step`.
pub fn common_noise_remainder(u: &dyn ValueField, probe: &Probe, l: usize, step: f64) -> Result<ExpansionRow> {
    let d = u.d();
    let n = probe.x.len();
    let mut mu = vec![0.0; d];
    weighted_measure_into(&probe.x, &probe.y, &mut mu);
    let i = probe.x[l];
    if !(probe.y[l] > 0.0) {
        return Err(Error::InvalidParameter(format!("player {l} has no weight")));
    }
    check_enumeration(n as u64, d)?;
    let t = probe.t;
    let nf = n as f64;
    let mut e = 0.0;
    let mut p = vec![0.0; d];
    for k in compositions(n as u64, d) {
        let w = multinomial_pmf(&k, &mu);
        if w == 0.0 {
            continue;
        }
        for (pe, &ke) in p.iter_mut().zip(&k) {
            *pe = ke as f64 / nf;
        }
        e += w * k[i] as f64 / (nf * mu[i]) * eval_component(u, t, i, &p);
    }
    let lhs = nf * (e - eval_component(u, t, i, &mu));
    let point = SimplexPoint::new(mu.clone())?;
    let h = |q: &[f64]| eval_component(u, t, i, q);
    let grad = intrinsic_gradient(h, &point, step)?;
    let hess = intrinsic_hessian(h, &point, step)?;
    let first_order: f64 = (0..d)
        .map(|j| ((j == i) as u8 as f64 - mu[j]) * grad.as_slice()[j])
        .sum();
    let second_order = 0.5 * kimura_contraction(&hess, &mu);
    Ok(ExpansionRow {
        n,
        t,
        x: probe.x.clone(),
        y: probe.y.clone(),
        l,
        lhs,
        first_order,
        second_order,
        remainder: lhs - first_order - second_order,
    })
}

/// Max remainder per `N`, in order of first appearance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrendReport<R> {
    pub rows: Vec<R>,
    pub n_list: Vec<usize>,
    pub max_by_n: Vec<f64>,
    pub slack: f64,
    pub pass: bool,
}

fn max_by_n(items: impl Iterator<Item = (usize, f64)>) -> (Vec<usize>, Vec<f64>) {
    let mut ns: Vec<usize> = Vec::new();
    let mut mx: Vec<f64> = Vec::new();
    for (n, v) in items {
        match ns.iter().position(|&m| m == n) {
            Some(k) => mx[k] = mx[k].max(v.abs()),
            None => {
                ns.push(n);
                mx.push(v.abs());
            }
        }
    }
    (ns, mx)
}

/// Remainders for every probe and player; passes when the max remainder
/// decays across the probe sizes (or vanishes).
pub fn common_noise_expansion_check(u: &dyn ValueField, probes: &[Probe], step: f64) -> Result<TrendReport<ExpansionRow>> {
    let mut rows = Vec::new();
    for p in probes {
        for l in 0..p.x.len() {
            if p.y[l] > 0.0 {
                rows.push(common_noise_remainder(u, p, l, step)?);
            }
        }
    }
    let (n_list, max) = max_by_n(rows.iter().map(|r| (r.n, r.remainder)));
    let vanishes = max.iter().all(|&v| v <= 1e-12);
    let pass = vanishes || (non_increasing(&max, 0.0) && max.last() < max.first());
    Ok(TrendReport {
        rows,
        n_list,
        max_by_n: max,
        slack: 0.0,
        pass,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RemainderRow {
    pub n: usize,
    pub t: f64,
    pub x: Vec<usize>,
    pub y: Vec<f64>,
    pub l: usize,
    pub remainder: f64,
}

/// `z^l(t, x, y) = U^{x^l}(t, mu_{x,y})` for all players.
fn mean_field_values(u: &dyn ValueField, t: f64, x: &[usize], y: &[f64], out: &mut [f64]) {
    let d = u.d();
    let mut mu = [0.0; MAX_DIM];
    let mut z = [0.0; MAX_DIM];
    weighted_measure_into(x, y, &mut mu[..d]);
    u.values_into(t, &mu[..d], &mut z[..d]);
    for (o, &xi) in out.iter_mut().zip(x) {
        *o = z[xi];
    }
}

/// Residual of the normalised Nash system at `probe` for the candidate
/// `z^l = U^{x^l}(t, mu)`, per player. The time derivative is a central
/// difference of size `time_step`, one-sided at the ends of `[0, T]`.
pub fn nash_remainder(u: &dyn ValueField, spec: &GameSpec, probe: &Probe, time_step: f64) -> Result<Vec<f64>> {
    let n = probe.x.len();
    if u.d() != spec.d() {
        return Err(Error::InvalidParameter("field and game have different d".into()));
    }
    let t = probe.t;
    let t0 = (t - time_step).max(0.0);
    let t1 = (t + time_step).min(spec.horizon());
    let mut a = vec![0.0; n];
    let mut b = vec![0.0; n];
    mean_field_values(u, t0, &probe.x, &probe.y, &mut a);
    mean_field_values(u, t1, &probe.x, &probe.y, &mut b);
    let mut op = vec![0.0; n];
    nash_operator(spec, &probe.x, &probe.y, &|xx, yy, o| mean_field_values(u, t, xx, yy, o), &mut op)?;
    Ok((0..n).map(|l| (b[l] - a[l]) / (t1 - t0) + op[l]).collect())
}

pub fn nash_remainder_check(
    u: &dyn ValueField,
    spec: &GameSpec,
    probes: &[Probe],
    time_step: f64,
    slack: f64,
) -> Result<TrendReport<RemainderRow>> {
    let mut rows = Vec::new();
    for p in probes {
        let r = nash_remainder(u, spec, p, time_step)?;
        for (l, v) in r.into_iter().enumerate() {
            rows.push(RemainderRow {
                n: p.x.len(),
                t: p.t,
                x: p.x.clone(),
                y: p.y.clone(),
                l,
                remainder: v,
            });
        }
    }
    let (n_list, max) = max_by_n(rows.iter().map(|r| (r.n, r.remainder)));
    let pass = non_increasing(&max, slack);
    Ok(TrendReport {
        rows,
        n_list,
        max_by_n: max,
        slack,
        pass,
    })
}

// ---------------------------------------------------------------------------
// weak convergence

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub n: usize,
    /// `nash` for the exact equilibrium, `master-feedback` for the proxy
    pub policy: String,
    pub time: f64,
    /// per-coordinate Kolmogorov-Smirnov distances
    pub ks: Vec<f64>,
    pub ks_max: f64,
    pub mean_n: Vec<Estimate>,
    pub mean_limit: Vec<Estimate>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceTable {
    pub rows: Vec<ConvergenceRow>,
    /// `ks_max` at the last probe time, one entry per `N`
    pub terminal_ks: Vec<f64>,
    pub pass: bool,
}

struct MeasureSampler<'a> {
    times: &'a [f64],
    next: usize,
    samples: Vec<Vec<f64>>,
}

impl Observer for MeasureSampler<'_> {
    fn segment(&mut self, _t0: f64, t1: f64, _x: &[usize], _y: &[f64], mu: &[f64]) {
        while self.next < self.times.len() && self.times[self.next] < t1 {
            self.samples.push(mu.to_vec());
            self.next += 1;
        }
    }
}

/// Settings of [`weak_convergence_study`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyOptions {
    pub p0: Vec<f64>,
    pub n_list: Vec<usize>,
    pub paths: usize,
    /// absolute probe times
    pub times: Vec<f64>,
    pub sde_dt: f64,
    /// use the exact equilibrium for `N <= 4`; otherwise always the proxy
    pub exact_small_n: bool,
}

/// Compares the laws of the N-player empirical measure and of the limit
/// process at the probe times. For `N` up to four the exact equilibrium is
/// used; above that the feedback read from `u` stands in for it.
pub fn weak_convergence_study(spec: &GameSpec, u: &ValueSurface, opts: &StudyOptions, seeds: &SeedTree) -> Result<ConvergenceTable> {
    let d = spec.d();
    if opts.times.is_empty() || opts.times.iter().any(|&t| !(0.0..=spec.horizon()).contains(&t)) {
        return Err(Error::InvalidParameter("probe times must lie in [0, T]".into()));
    }
    let p0 = SimplexPoint::new(opts.p0.clone())?;
    let steps = (spec.horizon() / opts.sde_dt).round() as usize;
    let dt = spec.horizon() / steps.max(1) as f64;
    let limit_seeds = seeds.child("limit");
    let limit: Vec<Vec<Vec<f64>>> = (0..opts.paths as u64)
        .into_par_iter()
        .map(|k| {
            let path = simulate_p(spec, u, &p0, dt, &limit_seeds, k)?;
            Ok(opts
                .times
                .iter()
                .map(|&t| path.at(((t / dt).round() as usize).min(path.steps)).to_vec())
                .collect())
        })
        .collect::<Result<_>>()?;
    let surface_policy = policy_from_surface(u)?;
    let mut rows = Vec::new();
    let mut terminal_ks = Vec::new();
    for &n in &opts.n_list {
        let init = WeightedConfiguration::from_measure(n, p0.as_slice())?;
        let exact = if opts.exact_small_n && n <= MAX_PLAYERS && d <= MAX_STATES {
            let dt = nash_admissible_dt(spec, n);
            Some(solve_nash_with(spec, &NashGrid::new(n, dt, 4 * n))?)
        } else {
            None
        };
        let eq = exact.as_ref().map(equilibrium_policy);
        let (policy, label): (&dyn Policy, &str) = match &eq {
            Some(p) => (p, "nash"),
            None => (&surface_policy, "master-feedback"),
        };
        let sim = SimOptions::new(spec).without_events();
        let n_seeds = seeds.child(&format!("n{n}"));
        let samples: Vec<Vec<Vec<f64>>> = (0..opts.paths as u64)
            .into_par_iter()
            .map(|k| {
                let mut obs = MeasureSampler {
                    times: &opts.times,
                    next: 0,
                    samples: Vec::new(),
                };
                let rec = simulate_observed(spec, policy, &init, &sim, &n_seeds, k, &mut obs)?;
                while obs.samples.len() < opts.times.len() {
                    obs.samples.push(rec.terminal_mu());
                }
                Ok(obs.samples)
            })
            .collect::<Result<_>>()?;
        for (ti, &t) in opts.times.iter().enumerate() {
            let mut ks = Vec::with_capacity(d);
            let mut mean_n = Vec::with_capacity(d);
            let mut mean_limit = Vec::with_capacity(d);
            for i in 0..d {
                let a: Vec<f64> = samples.iter().map(|s| s[ti][i]).collect();
                let b: Vec<f64> = limit.iter().map(|s| s[ti][i]).collect();
                ks.push(ks_two_sample(&a, &b));
                mean_n.push(Estimate::from_samples(&a));
                mean_limit.push(Estimate::from_samples(&b));
            }
            let ks_max = ks.iter().cloned().fold(0.0, f64::max);
            if ti + 1 == opts.times.len() {
                terminal_ks.push(ks_max);
            }
            rows.push(ConvergenceRow {
                n,
                policy: label.to_string(),
                time: t,
                ks,
                ks_max,
                mean_n,
                mean_limit,
            });
        }
    }
    let pass = strictly_decreasing(&terminal_ks);
    Ok(ConvergenceTable { rows, terminal_ks, pass })
}

// ---------------------------------------------------------------------------
// best response

/// Mixture of a base policy with a fixed random rate table:
/// `(1 - mix) base + mix table[x^l][j]`.
pub struct PerturbedPolicy<'a> {
    pub base: &'a dyn Policy,
    pub mix: f64,
    pub table: Vec<Vec<f64>>,
}

impl Policy for PerturbedPolicy<'_> {
    fn rates(&self, t: f64, x: &[usize], y: &[f64], l: usize, mu: &[f64], out: &mut [f64]) {
        self.base.rates(t, x, y, l, mu, out);
        let row = &self.table[x[l]];
        for (j, o) in out.iter_mut().enumerate() {
            *o = (1.0 - self.mix) * *o + self.mix * row[j];
        }
        out[x[l]] = 0.0;
    }

    fn bound(&self) -> f64 {
        let t = self.table.iter().flatten().cloned().fold(0.0, f64::max);
        self.base.bound().max(t)
    }

    fn mean_field(&self) -> bool {
        self.base.mean_field()
    }
}

/// `count` random perturbations of `base` with rates in `[0, bound]`.
pub fn random_perturbations<'a>(base: &'a dyn Policy, d: usize, bound: f64, count: usize, seeds: &SeedTree) -> Vec<PerturbedPolicy<'a>> {
    let mut rng = seeds.child("deviations").stream(0, 0);
    (0..count)
        .map(|_| PerturbedPolicy {
            base,
            mix: rng.gen_range(0.25..=1.0),
            table: (0..d).map(|_| (0..d).map(|_| rng.gen_range(0.0..=bound)).collect()).collect(),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviationRow {
    pub index: usize,
    pub equilibrium: Estimate,
    pub deviation: Estimate,
    /// paired `J(deviation) - J(equilibrium)`
    pub difference: Estimate,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestResponseReport {
    pub player: usize,
    pub paths: usize,
    pub rows: Vec<DeviationRow>,
    pub pass: bool,
}

/// Paired-seed comparison of player `l`'s cost under the equilibrium and
/// under each unilateral deviation.
pub fn best_response_check(
    spec: &GameSpec,
    equilibrium: &dyn Policy,
    init: &WeightedConfiguration,
    opts: &SimOptions,
    l: usize,
    deviations: &[&dyn Policy],
    paths: usize,
    seeds: &SeedTree,
) -> Result<BestResponseReport> {
    if l >= init.n() {
        return Err(Error::OutOfRange(format!("player {l} with N = {}", init.n())));
    }
    let opts = SimOptions {
        record_events: false,
        tilt: None,
        ..*opts
    };
    let cost = |policy: &dyn Policy| -> Result<Vec<f64>> {
        (0..paths as u64)
            .into_par_iter()
            .map(|p| simulate(spec, policy, init, &opts, seeds, p).map(|r| r.weighted_cost[l]))
            .collect()
    };
    let base = cost(equilibrium)?;
    let base_est = Estimate::from_samples(&base);
    let mut rows = Vec::new();
    for (index, alt) in deviations.iter().enumerate() {
        let dev = crate::nplayer::Deviation {
            base: equilibrium,
            alt: *alt,
            player: l,
        };
        let xs = cost(&dev)?;
        let diff: Vec<f64> = xs.iter().zip(&base).map(|(a, b)| a - b).collect();
        let difference = Estimate::from_samples(&diff);
        rows.push(DeviationRow {
            index,
            equilibrium: base_est,
            deviation: Estimate::from_samples(&xs),
            pass: difference.mean >= -3.0 * difference.se - 1e-12,
            difference,
        });
    }
    Ok(BestResponseReport {
        player: l,
        paths,
        pass: rows.iter().all(|r| r.pass),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::master_eq::FnField;
    use crate::model::{preset_scenario, Scenario};
    use crate::nplayer::ZeroPolicy;

    #[test]
    fn moment_examples() {
        let r = multinomial_moment_oracle(2, &[0.5, 0.5], 2, 0, 1).unwrap();
        assert!((r.mean_moment - 0.5).abs() < 1e-15);
        assert_eq!(r.mean_bound, 1.0);
        assert_eq!(r.mean_bound_holds, Some(true));
        let c = multinomial_moment_oracle(2, &[0.5, 0.5], 1, 0, 1).unwrap();
        assert!((c.cross_moment + 0.5).abs() < 1e-15);
        assert!(c.mean_moment.abs() < 1e-15);
        assert_eq!(c.pair_cross_bound, 0.5);
        assert_eq!(c.cross_bound, 1.0);
        assert!(matches!(
            multinomial_moment_oracle(2, &[1.0, 0.0], 1, 0, 1),
            Err(Error::InvalidParameter(_))
        ));
    }

    #[test]
    fn exact_moments_match_closed_forms() {
        // variance identity: E[R^2 - 1] = (1 - mu) / (N mu); covariance: -1/N off the diagonal
        for n in 1..=6u64 {
            let e = exact_multinomial_moments(n, &[1, 2, 3], 6, 2, 1, 0).unwrap();
            assert_eq!(e.mean_moment, Ratio::new(2, n as i128));
            let c = exact_multinomial_moments(n, &[1, 2, 3], 6, 1, 1, 0).unwrap();
            assert_eq!(c.mean_moment, Ratio::from_integer(0));
            assert_eq!(c.cross_moment, Ratio::new(-1, n as i128));
        }
    }

    #[test]
    fn enumeration_limit_is_enforced() {
        let mu = vec![1.0 / 8.0; 8];
        assert!(matches!(
            multinomial_moment_oracle(60, &mu, 1, 0, 1),
            Err(Error::EnumerationSize { .. })
        ));
    }

    #[test]
    fn tails() {
        assert_eq!(exact_tail(6, 0.5, 1, 5.0), 0.0);
        assert_eq!(exact_tail(6, 1.0, 1, 0.1), 0.0);
        assert!((exact_tail(4, 0.5, 1, 0.5) - 10.0 / 16.0).abs() < 1e-15);
        assert!((exact_tail(6, 0.5, 1, 0.5) - 14.0 / 64.0).abs() < 1e-15);
        assert!((exact_tail(8, 0.5, 1, 0.5) - 74.0 / 256.0).abs() < 1e-15);
        let r = hoeffding_tail_check(&[4, 8, 16, 32, 64], 0.5, 1, 0.5).unwrap();
        assert!(r.pass && r.slope.unwrap() < 0.0);
    }

    #[test]
    fn frozen_weights_have_unit_moments() {
        let spec = preset_scenario("voter").unwrap().without_common_noise();
        let init = WeightedConfiguration::from_measure(8, &[0.5, 0.5]).unwrap();
        let cfg = VerificationConfig {
            paths: 20,
            ..Default::default()
        };
        let r = weight_moment_check(&spec, &ZeroPolicy, &init, &cfg, &SeedTree::new(3)).unwrap();
        for e in r.moment.iter().chain(&r.inverse).chain(&r.moment_unstopped) {
            assert_eq!(e.mean, 1.0);
        }
    }

    #[test]
    fn first_moment_is_conserved() {
        let spec = preset_scenario("voter").unwrap();
        let init = WeightedConfiguration::from_measure(8, &[0.5, 0.5]).unwrap();
        let cfg = VerificationConfig {
            paths: 50,
            ell: 1,
            ..Default::default()
        };
        let r = weight_moment_check(&spec, &ZeroPolicy, &init, &cfg, &SeedTree::new(4)).unwrap();
        for e in &r.moment_unstopped {
            assert!((e.mean - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn exp_bound_degenerate_cases() {
        let spec = preset_scenario("voter").unwrap();
        let init = WeightedConfiguration::from_measure(16, &[0.5, 0.5]).unwrap();
        // with d = 2 and N = 16 the safe set is empty, so the functional is 1
        let r = exp_bound_check(
            &spec,
            &ZeroPolicy,
            &init,
            1.0,
            Localisation::StoppingTime { eps_exp: 0.125 },
            30,
            &SeedTree::new(5),
        )
        .unwrap();
        assert!(r.per_state.iter().all(|e| e.mean == 1.0));
        assert_eq!(r.tau_zero_fraction, 1.0);

        // no common noise: occupancy stays positive and the functional is finite
        let quiet = spec.without_common_noise();
        let r = exp_bound_check(&quiet, &ZeroPolicy, &init, 1.0, Localisation::Floor { floor: 0.0 }, 30, &SeedTree::new(6)).unwrap();
        assert!(r.finite && !r.saturation_warning);
        assert!(r.per_state.iter().all(|e| e.mean > 1.0));
    }

    #[test]
    fn probe_configuration_reproduces_measure() {
        for n in 2..6 {
            let c = probe_configuration(n, &[0.5, 0.5]).unwrap();
            let mu = c.mu();
            assert!((mu[0] - 0.5).abs() < 1e-15 && (mu[1] - 0.5).abs() < 1e-15);
        }
        let c = probe_configuration(3, &[0.2, 0.0, 0.8]).unwrap();
        assert_eq!(c.x, vec![0, 2, 2]);
    }

    #[test]
    fn expansion_remainder_for_constant_and_linear_fields() {
        let probes = [2, 4, 8]
            .iter()
            .flat_map(|&n| probes_for(n, &[0.5], &[vec![0.5, 0.5]]).unwrap())
            .collect::<Vec<_>>();
        let c = FnField::new(2, 1.0, |_, _, _| 2.5);
        let r = common_noise_expansion_check(&c, &probes, 1e-3).unwrap();
        assert!(r.max_by_n.iter().all(|&v| v < 1e-12) && r.pass);

        let lin = FnField::new(2, 1.0, |_, i, p: &[f64]| (i as f64 + 1.0) * (0.3 * p[0] - 1.2 * p[1]));
        let r = common_noise_expansion_check(&lin, &probes, 1e-3).unwrap();
        assert!(r.max_by_n.iter().all(|&v| v < 1e-9), "{:?}", r.max_by_n);

        let quad = FnField::new(2, 1.0, |_, _, p: &[f64]| p[0] * p[0] * p[0]);
        let r = common_noise_expansion_check(&quad, &probes, 1e-3).unwrap();
        assert!(r.pass, "{:?}", r.max_by_n);
    }

    #[test]
    fn nash_remainder_vanishes_for_constant_costs() {
        let spec = Scenario::ConstantCost { c: 1.5 }.build(2).unwrap();
        let u = FnField::new(2, 1.0, |_, _, _| 1.5);
        let probes = probes_for(3, &[0.3], &[vec![0.4, 0.6]]).unwrap();
        let r = nash_remainder_check(&u, &spec, &probes, 1e-3, 0.1).unwrap();
        assert!(r.max_by_n[0] < 1e-12);
    }

    #[test]
    fn zero_deviation_is_not_better() {
        let spec = Scenario::ZeroCost.build(2).unwrap();
        let init = WeightedConfiguration::from_measure(2, &[0.5, 0.5]).unwrap();
        let devs = random_perturbations(&ZeroPolicy, 2, 1.0, 2, &SeedTree::new(7));
        let refs: Vec<&dyn Policy> = devs.iter().map(|p| p as &dyn Policy).collect();
        let r = best_response_check(&spec, &ZeroPolicy, &init, &SimOptions::new(&spec), 0, &refs, 200, &SeedTree::new(8)).unwrap();
        // costs only come from the control effort, so deviating costs something
        assert!(r.pass);
        assert!(r.rows.iter().all(|row| row.equilibrium.mean == 0.0 && row.difference.mean > 0.0));
    }

    #[test]
    fn trend_helpers() {
        assert!(non_increasing(&[1.0, 1.05, 1.0], 0.1));
        assert!(!non_increasing(&[1.0, 1.2], 0.1));
        assert!(strictly_decreasing(&[3.0, 2.0, 1.0]));
        assert!(!strictly_decreasing(&[3.0, 3.0]));
    }
}
