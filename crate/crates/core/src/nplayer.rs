//! Event-driven simulator of the N-player weighted game.
//!
//! Player `l` jumps from `x^l` to `j` at rate `phi(mu[j]) + alpha^l[j]`; a
//! common shuffle fires at total rate `epsilon N` and rescales every weight by
//! `k^{x^l} / (N mu[x^l])` with `k ~ Multinomial(N, mu)`. The tilted variant
//! draws `k = e_{x^n} + Multinomial(N - 1, mu)` for a tagged player `n`.
//!
//! Rates are frozen on a fixed grid of hold cells (evaluated at the cell
//! midpoint), so between events and cell boundaries the chain is a
//! homogeneous Markov chain and the direct method is exact for it.

use rand::Rng;
use rand_distr::{Binomial, Distribution, Exp1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::MAX_DIM;
use crate::model::{lagrangian, GameSpec};
use crate::rng::{SeedTree, StreamRng, CLOCK_SOURCE, COMMON_SOURCE};
use crate::simplex::{weighted_measure_into, SimplexPoint};
use crate::stats::Estimate;

/// Markov feedback control.
pub trait Policy: Send + Sync {
    /// Rates of player `l` toward every state; `out[x[l]]` is ignored.
    fn rates(&self, t: f64, x: &[usize], y: &[f64], l: usize, mu: &[f64], out: &mut [f64]);

    /// Declared bound on every rate.
    fn bound(&self) -> f64;

    /// `true` when the rates depend on the player only through its state.
    fn mean_field(&self) -> bool {
        false
    }
}

pub struct ZeroPolicy;

impl Policy for ZeroPolicy {
    fn rates(&self, _: f64, _: &[usize], _: &[f64], _: usize, _: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }

    fn bound(&self) -> f64 {
        0.0
    }

    fn mean_field(&self) -> bool {
        true
    }
}

/// Policy given by a closure `(t, x, y, l, mu, out)`.
pub struct FnPolicy<F> {
    f: F,
    bound: f64,
}

impl<F> FnPolicy<F>
where
    F: Fn(f64, &[usize], &[f64], usize, &[f64], &mut [f64]) + Send + Sync,
{
    pub fn new(bound: f64, f: F) -> Self {
        Self { f, bound }
    }
}

impl<F> Policy for FnPolicy<F>
where
    F: Fn(f64, &[usize], &[f64], usize, &[f64], &mut [f64]) + Send + Sync,
{
    fn rates(&self, t: f64, x: &[usize], y: &[f64], l: usize, mu: &[f64], out: &mut [f64]) {
        (self.f)(t, x, y, l, mu, out)
    }

    fn bound(&self) -> f64 {
        self.bound
    }
}

/// Player `player` follows `alt`, everybody else follows `base`.
pub struct Deviation<'a> {
    pub base: &'a dyn Policy,
    pub alt: &'a dyn Policy,
    pub player: usize,
}

impl Policy for Deviation<'_> {
    fn rates(&self, t: f64, x: &[usize], y: &[f64], l: usize, mu: &[f64], out: &mut [f64]) {
        if l == self.player {
            self.alt.rates(t, x, y, l, mu, out)
        } else {
            self.base.rates(t, x, y, l, mu, out)
        }
    }

    fn bound(&self) -> f64 {
        self.base.bound().max(self.alt.bound())
    }
}

/// Joint state `(x, y)` of the N players; weights sum to `N`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightedConfiguration {
    pub d: usize,
    pub x: Vec<usize>,
    pub y: Vec<f64>,
}

impl WeightedConfiguration {
    pub fn new(d: usize, x: Vec<usize>, y: Vec<f64>) -> Result<Self> {
        crate::simplex::empirical_measure(&x, &y, d)?;
        Ok(Self { d, x, y })
    }

    /// Unit weights with states allocated so that the empirical measure is
    /// the largest-remainder rounding of `p`.
    pub fn from_measure(n: usize, p: &[f64]) -> Result<Self> {
        let d = p.len();
        SimplexPoint::new(p.to_vec())?;
        if n == 0 {
            return Err(Error::InvalidParameter("at least one player is required".into()));
        }
        let raw: Vec<f64> = p.iter().map(|v| v * n as f64).collect();
        let mut counts: Vec<usize> = raw.iter().map(|v| v.floor() as usize).collect();
        let mut rest = n - counts.iter().sum::<usize>();
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| (raw[b] - raw[b].floor()).total_cmp(&(raw[a] - raw[a].floor())).then(a.cmp(&b)));
        for &i in order.iter().cycle() {
            if rest == 0 {
                break;
            }
            counts[i] += 1;
            rest -= 1;
        }
        let x: Vec<usize> = counts.iter().enumerate().flat_map(|(i, &c)| std::iter::repeat_n(i, c)).collect();
        Ok(Self { d, x, y: vec![1.0; n] })
    }

    pub fn n(&self) -> usize {
        self.x.len()
    }

    pub fn mu(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.d];
        weighted_measure_into(&self.x, &self.y, &mut m);
        m
    }
}

/// Draws `k ~ Multinomial(n, mu)` by sequential binomials.
pub fn multinomial_sample<R: Rng + ?Sized>(n: u64, mu: &[f64], rng: &mut R) -> Vec<u64> {
    let mut k = vec![0u64; mu.len()];
    multinomial_into(n, mu, rng, &mut k);
    k
}

fn multinomial_into<R: Rng + ?Sized>(n: u64, mu: &[f64], rng: &mut R, k: &mut [u64]) {
    let d = mu.len();
    let mut left = n;
    let mut mass: f64 = mu.iter().sum();
    for i in 0..d {
        if left == 0 {
            k[i] = 0;
            continue;
        }
        if i + 1 == d || mass <= 0.0 {
            k[i] = if mu[i] > 0.0 || i + 1 == d { left } else { 0 };
            left -= k[i];
            continue;
        }
        let q = (mu[i] / mass).clamp(0.0, 1.0);
        k[i] = if q == 0.0 {
            0
        } else if q == 1.0 {
            left
        } else {
            Binomial::new(left, q).expect("valid binomial").sample(rng)
        };
        left -= k[i];
        mass -= mu[i];
    }
}

/// All `k in N^d` with `sum k = n`, in lexicographic order.
pub fn compositions(n: u64, d: usize) -> Vec<Vec<u64>> {
    fn rec(pos: usize, left: u64, k: &mut Vec<u64>, out: &mut Vec<Vec<u64>>) {
        if pos + 1 == k.len() {
            k[pos] = left;
            out.push(k.clone());
            return;
        }
        for v in 0..=left {
            k[pos] = v;
            rec(pos + 1, left - v, k, out);
        }
    }
    let mut out = Vec::new();
    if d > 0 {
        rec(0, n, &mut vec![0; d], &mut out);
    }
    out
}

/// Number of compositions of `n` into `d` parts, `C(n + d - 1, d - 1)`.
pub fn composition_count(n: u64, d: usize) -> usize {
    let mut c = 1u128;
    for i in 1..d as u128 {
        c = c * (n as u128 + i) / i;
    }
    c.min(usize::MAX as u128) as usize
}

/// Probability of `k` under `Multinomial(sum k, mu)`, with `0^0 = 1`.
pub fn multinomial_pmf(k: &[u64], mu: &[f64]) -> f64 {
    let n: u64 = k.iter().sum();
    let mut log_coef = ln_factorial(n);
    let mut p = 1.0;
    for (&ki, &mi) in k.iter().zip(mu) {
        log_coef -= ln_factorial(ki);
        if ki > 0 {
            if mi <= 0.0 {
                return 0.0;
            }
            p *= mi.powi(ki as i32);
        }
    }
    log_coef.exp() * p
}

fn ln_factorial(n: u64) -> f64 {
    (2..=n).map(|v| (v as f64).ln()).sum()
}

/// Multinomial shuffle of the weights. Players of a state share its new mass
/// `k[i]` in proportion to their old weights; weights are then renormalised
/// to total `N` exactly.
pub fn shuffle_weights(x: &[usize], y: &[f64], k: &[u64]) -> Result<Vec<f64>> {
    let mut out = y.to_vec();
    let mut mass = [0.0; MAX_DIM];
    shuffle_in_place(x, &mut out, k, &mut mass[..k.len()])?;
    Ok(out)
}

fn shuffle_in_place(x: &[usize], y: &mut [f64], k: &[u64], mass: &mut [f64]) -> Result<()> {
    let n = y.len() as f64;
    mass.fill(0.0);
    for (&xi, &yi) in x.iter().zip(y.iter()) {
        mass[xi] += yi;
    }
    if let Some(state) = (0..k.len()).find(|&i| k[i] > 0 && mass[i] <= 0.0) {
        return Err(Error::SupportViolation { state });
    }
    if (k.iter().sum::<u64>() as f64 - n).abs() > 0.5 {
        return Err(Error::MassMismatch {
            sum: k.iter().sum::<u64>() as f64,
            expected: n,
        });
    }
    for (yl, &xl) in y.iter_mut().zip(x) {
        if mass[xl] > 0.0 {
            *yl *= k[xl] as f64 / mass[xl];
        }
    }
    let total: f64 = y.iter().sum();
    let scale = n / total;
    if scale != 1.0 {
        for v in y.iter_mut() {
            *v *= scale;
        }
    }
    Ok(())
}

/// One recorded event. Jumps leave `y` unchanged and shuffles leave `x`
/// unchanged, so the post-event weights are only stored for shuffles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Event {
    Jump { t: f64, player: usize, from: usize, to: usize },
    Shuffle { t: f64, k: Vec<u64>, y: Vec<f64> },
}

impl Event {
    pub fn time(&self) -> f64 {
        match self {
            Self::Jump { t, .. } | Self::Shuffle { t, .. } => *t,
        }
    }
}

/// Callbacks fired while a trajectory is generated.
pub trait Observer {
    /// The state is constant on `[t0, t1)`.
    fn segment(&mut self, _t0: f64, _t1: f64, _x: &[usize], _y: &[f64], _mu: &[f64]) {}
    /// Called after an event has been applied, with the post-event state.
    fn event(&mut self, _ev: &Event, _x: &[usize], _y: &[f64], _mu: &[f64]) {}
}

impl Observer for () {}

/// Options of [`simulate`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimOptions {
    pub t0: f64,
    /// tagged player of the tilted variant
    pub tilt: Option<usize>,
    /// width of the cells on which rates are frozen
    pub hold: f64,
    pub record_events: bool,
}

impl SimOptions {
    pub fn new(spec: &GameSpec) -> Self {
        Self {
            t0: 0.0,
            tilt: None,
            hold: spec.horizon() / 256.0,
            record_events: true,
        }
    }

    pub fn hold(mut self, hold: f64) -> Self {
        self.hold = hold;
        self
    }

    pub fn from_time(mut self, t0: f64) -> Self {
        self.t0 = t0;
        self
    }

    pub fn tilted(mut self, player: usize) -> Self {
        self.tilt = Some(player);
        self
    }

    pub fn without_events(mut self) -> Self {
        self.record_events = false;
        self
    }
}

/// Result of one simulated path.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub d: usize,
    pub t0: f64,
    pub horizon: f64,
    pub seed_root: u64,
    pub path: u64,
    pub tilt: Option<usize>,
    pub initial: WeightedConfiguration,
    pub events: Vec<Event>,
    pub terminal: WeightedConfiguration,
    pub event_count: usize,
    pub shuffle_count: usize,
    /// `int Y^l (L + f) dt + Y^l_T g` per player
    pub weighted_cost: Vec<f64>,
    /// the same functional without the weight, the tilted-game cost
    pub plain_cost: Vec<f64>,
}

impl TrajectoryRecord {
    pub fn terminal_mu(&self) -> Vec<f64> {
        self.terminal.mu()
    }

    /// Replays the recorded events, calling `obs` as during generation.
    pub fn replay(&self, obs: &mut dyn Observer) {
        let mut x = self.initial.x.clone();
        let mut y = self.initial.y.clone();
        let mut mu = vec![0.0; self.d];
        weighted_measure_into(&x, &y, &mut mu);
        let mut t = self.t0;
        for ev in &self.events {
            obs.segment(t, ev.time(), &x, &y, &mu);
            match ev {
                Event::Jump { player, to, .. } => x[*player] = *to,
                Event::Shuffle { y: post, .. } => y.copy_from_slice(post),
            }
            weighted_measure_into(&x, &y, &mut mu);
            obs.event(ev, &x, &y, &mu);
            t = ev.time();
        }
        obs.segment(t, self.horizon, &x, &y, &mu);
    }
}

/// Simulates one path on `[t0, T]`.
pub fn simulate(
    spec: &GameSpec,
    policy: &dyn Policy,
    init: &WeightedConfiguration,
    opts: &SimOptions,
    seeds: &SeedTree,
    path: u64,
) -> Result<TrajectoryRecord> {
    simulate_observed(spec, policy, init, opts, seeds, path, &mut ())
}

pub fn simulate_observed(
    spec: &GameSpec,
    policy: &dyn Policy,
    init: &WeightedConfiguration,
    opts: &SimOptions,
    seeds: &SeedTree,
    path: u64,
    obs: &mut dyn Observer,
) -> Result<TrajectoryRecord> {
    let d = spec.d();
    let n = init.n();
    if init.d != d {
        return Err(Error::InvalidParameter(format!("configuration has d = {}, spec has {d}", init.d)));
    }
    crate::simplex::empirical_measure(&init.x, &init.y, d)?;
    if let Some(tag) = opts.tilt {
        if tag >= n {
            return Err(Error::OutOfRange(format!("tagged player {tag} with N = {n}")));
        }
    }
    if !(opts.hold > 0.0) {
        return Err(Error::InvalidParameter(format!("hold width {}", opts.hold)));
    }
    let horizon = spec.horizon();
    let bound = policy.bound();
    let tol = 1e-9 * bound.max(1.0);

    let mut clock = seeds.stream(path, CLOCK_SOURCE);
    let mut common = seeds.stream(path, COMMON_SOURCE);
    let mut players: Vec<StreamRng> = (0..n).map(|l| seeds.stream(path, 1 + l as u64)).collect();

    let mut x = init.x.clone();
    let mut y = init.y.clone();
    let mut mu = vec![0.0; d];
    weighted_measure_into(&x, &y, &mut mu);
    let mut events = Vec::new();
    let mut weighted_cost = vec![0.0; n];
    let mut plain_cost = vec![0.0; n];
    let (mut event_count, mut shuffle_count) = (0usize, 0usize);

    let mut rates = vec![0.0; n * d];
    let mut totals = vec![0.0; n];
    let mut flow = vec![0.0; n]; // L + f per player
    let mut cache = vec![0.0; d * d];
    let mut k = vec![0u64; d];
    let mut mass = vec![0.0; d];
    let shuffle_rate = spec.epsilon() * n as f64;
    let mean_field = policy.mean_field();

    let mut t = opts.t0;
    let mut cell = 0usize;
    let mut dirty = true;
    while t < horizon {
        let cell_start = opts.t0 + cell as f64 * opts.hold;
        let cell_end = (cell_start + opts.hold).min(horizon);
        if t >= cell_end {
            cell += 1;
            dirty = true;
            continue;
        }
        if dirty {
            let tm = 0.5 * (cell_start.max(opts.t0) + cell_end);
            fill_rates(
                spec, policy, tm, &x, &y, &mu, mean_field, bound, tol, &mut rates, &mut totals, &mut flow,
                &mut cache,
            )?;
            dirty = false;
        }
        let total: f64 = totals.iter().sum::<f64>() + shuffle_rate;
        let wait = if total > 0.0 {
            let e: f64 = clock.sample(Exp1);
            e / total
        } else {
            f64::INFINITY
        };
        let t_next = t + wait;
        let t_stop = t_next.min(cell_end);
        obs.segment(t, t_stop, &x, &y, &mu);
        for l in 0..n {
            weighted_cost[l] += y[l] * flow[l] * (t_stop - t);
            plain_cost[l] += flow[l] * (t_stop - t);
        }
        t = t_stop;
        if t_next >= cell_end {
            continue;
        }

        let u: f64 = clock.gen::<f64>() * total;
        let mut acc = 0.0;
        let mut fired = None;
        for (l, &r) in totals.iter().enumerate() {
            acc += r;
            if u < acc {
                fired = Some(l);
                break;
            }
        }
        event_count += 1;
        let ev = match fired {
            Some(l) => {
                let row = &rates[l * d..(l + 1) * d];
                let v: f64 = players[l].gen::<f64>() * totals[l];
                let mut a = 0.0;
                let mut to = (0..d).rfind(|&j| row[j] > 0.0).unwrap_or(x[l]);
                for (j, &r) in row.iter().enumerate() {
                    a += r;
                    if v < a && r > 0.0 {
                        to = j;
                        break;
                    }
                }
                let from = x[l];
                x[l] = to;
                Event::Jump { t, player: l, from, to }
            }
            None => {
                shuffle_count += 1;
                match opts.tilt {
                    Some(tag) if mu[x[tag]] > 0.0 => {
                        multinomial_into(n as u64 - 1, &mu, &mut common, &mut k);
                        k[x[tag]] += 1;
                    }
                    _ => multinomial_into(n as u64, &mu, &mut common, &mut k),
                }
                shuffle_in_place(&x, &mut y, &k, &mut mass)?;
                Event::Shuffle {
                    t,
                    k: k.clone(),
                    y: if opts.record_events { y.clone() } else { Vec::new() },
                }
            }
        };
        weighted_measure_into(&x, &y, &mut mu);
        obs.event(&ev, &x, &y, &mu);
        if opts.record_events {
            events.push(ev);
        }
        dirty = true;
    }

    for l in 0..n {
        let g = spec.terminal_cost(x[l], &mu);
        weighted_cost[l] += y[l] * g;
        plain_cost[l] += g;
    }
    Ok(TrajectoryRecord {
        d,
        t0: opts.t0,
        horizon,
        seed_root: seeds.root(),
        path,
        tilt: opts.tilt,
        initial: init.clone(),
        events,
        terminal: WeightedConfiguration { d, x, y },
        event_count,
        shuffle_count,
        weighted_cost,
        plain_cost,
    })
}

#[allow(clippy::too_many_arguments)]
fn fill_rates(
    spec: &GameSpec,
    policy: &dyn Policy,
    t: f64,
    x: &[usize],
    y: &[f64],
    mu: &[f64],
    mean_field: bool,
    bound: f64,
    tol: f64,
    rates: &mut [f64],
    totals: &mut [f64],
    flow: &mut [f64],
    cache: &mut [f64],
) -> Result<()> {
    let d = mu.len();
    let mut phis = [0.0; MAX_DIM];
    for j in 0..d {
        phis[j] = spec.phi(mu[j]);
    }
    let mut ready = [false; MAX_DIM];
    for l in 0..x.len() {
        let i = x[l];
        let row = &mut rates[l * d..(l + 1) * d];
        if mean_field {
            if !ready[i] {
                policy.rates(t, x, y, l, mu, &mut cache[i * d..(i + 1) * d]);
                ready[i] = true;
            }
            row.copy_from_slice(&cache[i * d..(i + 1) * d]);
        } else {
            policy.rates(t, x, y, l, mu, row);
        }
        row[i] = 0.0;
        for (j, &r) in row.iter().enumerate() {
            if !(r >= 0.0) {
                return Err(Error::Negative(format!("rate of player {l} toward {j} is {r}")));
            }
            if r > bound + tol {
                return Err(Error::RateOverflow { rate: r, bound });
            }
        }
        flow[l] = lagrangian(i, row)? + spec.running_cost(i, mu);
        let mut s = 0.0;
        for j in 0..d {
            if j != i {
                row[j] += phis[j];
                s += row[j];
            }
        }
        totals[l] = s;
    }
    Ok(())
}

/// Monte-Carlo estimate of the cost of player `l`.
///
/// Without tilt this is `J^l`, the weighted cost. With a tilt on `l` it is
/// the unweighted cost of the tilted game, whose mean is the normalised value.
pub fn estimate_cost(
    spec: &GameSpec,
    policy: &dyn Policy,
    init: &WeightedConfiguration,
    opts: &SimOptions,
    l: usize,
    paths: usize,
    seeds: &SeedTree,
) -> Result<Estimate> {
    if l >= init.n() {
        return Err(Error::OutOfRange(format!("player {l} with N = {}", init.n())));
    }
    let opts = SimOptions {
        record_events: false,
        ..*opts
    };
    let samples = (0..paths as u64)
        .into_par_iter()
        .map(|p| {
            simulate(spec, policy, init, &opts, seeds, p).map(|r| {
                if opts.tilt.is_some() {
                    r.plain_cost[l]
                } else {
                    r.weighted_cost[l]
                }
            })
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(Estimate::from_samples(&samples))
}

/// Thresholds `(N^{-e}, N^{1-e} / 2)` of the localising stopping time.
pub fn tau_thresholds(n: usize, eps_exp: f64) -> (f64, f64) {
    let nf = n as f64;
    (nf.powf(-eps_exp), 0.5 * nf.powf(1.0 - eps_exp))
}

/// `true` when `(mu, y)` lies in the safe set of the stopping time.
pub fn in_safe_set(mu: &[f64], y: &[f64], eps_exp: f64) -> bool {
    let (lo, hi) = tau_thresholds(y.len(), eps_exp);
    mu.iter().all(|&m| m >= lo) && y.iter().all(|&v| v <= hi)
}

/// Online computation of the stopping time.
pub struct TauMonitor {
    eps_exp: f64,
    pub tau: Option<f64>,
}

impl TauMonitor {
    pub fn new(eps_exp: f64) -> Self {
        Self { eps_exp, tau: None }
    }
}

impl Observer for TauMonitor {
    fn segment(&mut self, t0: f64, _t1: f64, _x: &[usize], y: &[f64], mu: &[f64]) {
        if self.tau.is_none() && !in_safe_set(mu, y, self.eps_exp) {
            self.tau = Some(t0);
        }
    }
}

/// First time the empirical measure gets closer than `N^{-e}` to the
/// boundary or some weight exceeds `N^{1-e} / 2`, capped at `T`.
pub fn stopping_time_tau(traj: &TrajectoryRecord, eps_exp: f64) -> Result<f64> {
    if !(eps_exp > 0.0 && eps_exp < 0.25) {
        return Err(Error::InvalidParameter(format!("exponent {eps_exp} outside (0, 1/4)")));
    }
    if traj.event_count > 0 && traj.events.is_empty() {
        return Err(Error::InvalidParameter("trajectory was generated without events".into()));
    }
    let mut m = TauMonitor::new(eps_exp);
    traj.replay(&mut m);
    Ok(m.tau.unwrap_or(traj.horizon))
}
