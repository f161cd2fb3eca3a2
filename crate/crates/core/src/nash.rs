//! Normalised Nash system for a handful of players.
//!
//! Unknowns are `w^l(t, x, y)` for every player `l`, every configuration
//! `x in [d]^N` and every weight vector `y` on the lattice
//! `G = {y >= 0, sum y = N}` with spacing `N / ny`. The system is integrated
//! backward with explicit Euler steps. The tilted common-noise expectation is
//! computed exactly over all multinomial outcomes; shuffled weights usually
//! fall between lattice nodes and are read by piecewise-linear interpolation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{SimplexLattice, Stencil, MAX_DIM};
use crate::master_eq::{step_count, ValueField};
use crate::model::GameSpec;
use crate::nplayer::{compositions, in_safe_set, multinomial_pmf, shuffle_weights, Policy};
use crate::simplex::weighted_measure_into;

/// Largest supported number of players and states.
pub const MAX_PLAYERS: usize = 4;
pub const MAX_STATES: usize = 3;

/// Default memory ceiling for the precomputed shuffle tables and slices.
pub const DEFAULT_MEMORY_LIMIT: usize = 4 << 30;

/// Configurations `x in [d]^N`, encoded with player 0 as the lowest digit.
#[derive(Clone, Debug)]
pub struct Configs {
    n: usize,
    d: usize,
    digits: Vec<usize>,
    moves: Vec<usize>,
}

impl Configs {
    pub fn new(n: usize, d: usize) -> Self {
        let count = d.pow(n as u32);
        let mut digits = Vec::with_capacity(count * n);
        for c in 0..count {
            let mut v = c;
            for _ in 0..n {
                digits.push(v % d);
                v /= d;
            }
        }
        let mut moves = vec![0; count * n * d];
        for c in 0..count {
            for m in 0..n {
                let here = digits[c * n + m];
                let unit = d.pow(m as u32);
                for j in 0..d {
                    moves[(c * n + m) * d + j] = c + j * unit - here * unit;
                }
            }
        }
        Self { n, d, digits, moves }
    }

    pub fn count(&self) -> usize {
        self.digits.len() / self.n.max(1)
    }

    pub fn states(&self, c: usize) -> &[usize] {
        &self.digits[c * self.n..(c + 1) * self.n]
    }

    pub fn index(&self, x: &[usize]) -> usize {
        x.iter().rev().fold(0, |acc, &v| acc * self.d + v)
    }

    /// Configuration with player `m` moved to state `j`.
    #[inline]
    pub fn moved(&self, c: usize, m: usize, j: usize) -> usize {
        self.moves[(c * self.n + m) * self.d + j]
    }
}

/// Discretisation of [`solve_nash_with`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NashGrid {
    pub players: usize,
    pub dt: f64,
    /// subdivisions of the weight lattice; spacing `players / ny`
    pub ny: usize,
    pub store_every: usize,
    pub memory_limit: usize,
}

impl NashGrid {
    pub fn new(players: usize, dt: f64, ny: usize) -> Self {
        Self {
            players,
            dt,
            ny,
            store_every: 1,
            memory_limit: DEFAULT_MEMORY_LIMIT,
        }
    }

    pub fn store_every(mut self, k: usize) -> Self {
        self.store_every = k;
        self
    }
}

/// Solved values `w^l(t, x, y)`, stored slice-major, then configuration,
/// then lattice node, then player.
#[derive(Clone, Debug)]
pub struct NashSolution {
    n: usize,
    d: usize,
    horizon: f64,
    dt: f64,
    slice_dt: f64,
    ny: usize,
    configs: Configs,
    lattice: SimplexLattice,
    values: Vec<f64>,
}

/// Serializable header of a [`NashSolution`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NashHeader {
    pub players: usize,
    pub d: usize,
    pub horizon: f64,
    pub dt: f64,
    pub slice_dt: f64,
    pub ny: usize,
    pub slices: usize,
    pub configurations: usize,
    pub weight_nodes: usize,
}

/// Largest explicit step for which every update is a convex combination.
///
/// Jump outflow is at most `N (d - 1) M`, the Hamiltonian adds `(d - 1) M`
/// and the common noise `epsilon N`.
pub fn nash_admissible_dt(spec: &GameSpec, n: usize) -> f64 {
    let d = spec.d() as f64;
    let m = spec.rate_bound().m;
    let nf = n as f64;
    let jumps = (nf * d).max((nf + 1.0) * (d - 1.0)) * m;
    let rate = jumps + spec.epsilon() * nf;
    if rate > 0.0 {
        1.0 / rate
    } else {
        f64::INFINITY
    }
}

#[derive(Clone, Copy)]
struct ShuffleTerm {
    /// `pmf(k) * k_i / (N mu_i)` by state `i` (`pmf(k)` where `mu_i = 0`)
    coef: [f64; MAX_DIM],
    stencil: Stencil,
}

/// Per `(configuration, node)` data that does not change in time.
struct NodeTables {
    /// `d` entries per (config, node)
    phis: Vec<f64>,
    /// `d` entries per (config, node): running cost by state
    costs: Vec<f64>,
    /// start offsets into `terms`, one more than nodes
    offsets: Vec<usize>,
    terms: Vec<ShuffleTerm>,
}

fn build_tables(spec: &GameSpec, configs: &Configs, lat: &SimplexLattice) -> Result<NodeTables> {
    let (n, d) = (configs.n, configs.d);
    let outcomes = compositions(n as u64, d);
    let nodes = lat.len();
    let per_config: Vec<(Vec<f64>, Vec<f64>, Vec<usize>, Vec<ShuffleTerm>)> = (0..configs.count())
        .into_par_iter()
        .map(|c| {
            let x = configs.states(c);
            let mut phis = Vec::with_capacity(nodes * d);
            let mut costs = Vec::with_capacity(nodes * d);
            let mut counts = Vec::with_capacity(nodes);
            let mut terms = Vec::new();
            let mut mu = vec![0.0; d];
            for node in 0..nodes {
                let y = lat.point(node);
                weighted_measure_into(x, &y, &mut mu);
                for i in 0..d {
                    phis.push(spec.phi(mu[i]));
                    costs.push(spec.running_cost(i, &mu));
                }
                let before = terms.len();
                for k in &outcomes {
                    let pmf = multinomial_pmf(k, &mu);
                    if pmf == 0.0 {
                        continue;
                    }
                    let mut coef = [0.0; MAX_DIM];
                    for i in 0..d {
                        coef[i] = if mu[i] > 0.0 {
                            pmf * k[i] as f64 / (n as f64 * mu[i])
                        } else {
                            pmf
                        };
                    }
                    let shuffled = shuffle_weights(x, &y, k)?;
                    terms.push(ShuffleTerm {
                        coef,
                        stencil: lat.stencil(&shuffled),
                    });
                }
                counts.push(terms.len() - before);
            }
            Ok((phis, costs, counts, terms))
        })
        .collect::<Result<_>>()?;
    let mut t = NodeTables {
        phis: Vec::with_capacity(configs.count() * nodes * d),
        costs: Vec::with_capacity(configs.count() * nodes * d),
        offsets: Vec::with_capacity(configs.count() * nodes + 1),
        terms: Vec::new(),
    };
    t.offsets.push(0);
    for (phis, costs, counts, terms) in per_config {
        t.phis.extend(phis);
        t.costs.extend(costs);
        for c in counts {
            let last = *t.offsets.last().unwrap();
            t.offsets.push(last + c);
        }
        t.terms.extend(terms);
    }
    Ok(t)
}

/// Solves with `ny` chosen from the spacing `dy` (which must divide `N`).
pub fn solve_nash(spec: &GameSpec, players: usize, dt: f64, dy: f64) -> Result<NashSolution> {
    let ny = (players as f64 / dy).round();
    if !(ny >= 1.0) || (ny * dy - players as f64).abs() > 1e-9 {
        return Err(Error::InvalidParameter(format!(
            "weight spacing {dy} does not divide N = {players}"
        )));
    }
    solve_nash_with(spec, &NashGrid::new(players, dt, ny as usize))
}

pub fn solve_nash_with(spec: &GameSpec, grid: &NashGrid) -> Result<NashSolution> {
    solve_inner(spec, grid, None)
}

/// One Picard sweep: re-solves every player's equation with the opponents'
/// feedback frozen at `sol`. Returns the new solution; at a fixed point it
/// coincides with `sol`.
pub fn picard_sweep(spec: &GameSpec, sol: &NashSolution) -> Result<NashSolution> {
    let grid = NashGrid {
        players: sol.n,
        dt: sol.dt,
        ny: sol.ny,
        store_every: (sol.slice_dt / sol.dt).round() as usize,
        memory_limit: DEFAULT_MEMORY_LIMIT,
    };
    solve_inner(spec, &grid, Some(sol))
}

fn solve_inner(spec: &GameSpec, grid: &NashGrid, frozen: Option<&NashSolution>) -> Result<NashSolution> {
    let (n, d) = (grid.players, spec.d());
    if n == 0 || n > MAX_PLAYERS || d > MAX_STATES {
        return Err(Error::InvalidParameter(format!(
            "the Nash solver handles N <= {MAX_PLAYERS} and d <= {MAX_STATES}, got N = {n}, d = {d}"
        )));
    }
    if grid.ny == 0 || grid.store_every == 0 || !(grid.dt > 0.0) {
        return Err(Error::InvalidParameter("ny, store_every and dt must be positive".into()));
    }
    let steps = step_count(spec.horizon(), grid.dt);
    let dt = spec.horizon() / steps as f64;
    let admissible = nash_admissible_dt(spec, n);
    if dt > admissible * (1.0 + 1e-12) {
        return Err(Error::Cfl { dt, admissible });
    }
    if !steps.is_multiple_of(grid.store_every) {
        return Err(Error::InvalidParameter(format!(
            "store_every = {} does not divide the {steps} time steps",
            grid.store_every
        )));
    }

    let configs = Configs::new(n, d);
    let lat = SimplexLattice::new(n, grid.ny, n as f64)?;
    let nodes = lat.len();
    let slice_len = configs.count() * nodes * n;
    let slices = steps / grid.store_every + 1;
    let terms_estimate = configs.count() * nodes * compositions(n as u64, d).len();
    let bytes = terms_estimate * std::mem::size_of::<ShuffleTerm>() + (slices + 2) * slice_len * 8;
    if bytes > grid.memory_limit {
        return Err(Error::Memory {
            bytes,
            limit: grid.memory_limit,
        });
    }
    if let Some(f) = frozen {
        if f.n != n || f.d != d || f.ny != grid.ny || (f.dt - dt).abs() > 1e-15 {
            return Err(Error::InvalidParameter("frozen solution uses a different grid".into()));
        }
    }

    let tables = build_tables(spec, &configs, &lat)?;
    let mut cur = vec![0.0; slice_len];
    let mut mu = vec![0.0; d];
    for c in 0..configs.count() {
        let x = configs.states(c);
        for node in 0..nodes {
            let y = lat.point(node);
            weighted_measure_into(x, &y, &mut mu);
            for l in 0..n {
                cur[(c * nodes + node) * n + l] = spec.terminal_cost(x[l], &mu);
            }
        }
    }
    let mut stored = Vec::with_capacity(slices * slice_len);
    let mut kept = vec![cur.clone()];
    let mut next = vec![0.0; slice_len];
    let ctx = StepContext {
        n,
        d,
        nodes,
        configs: &configs,
        tables: &tables,
        shuffle_rate: spec.epsilon() * n as f64,
    };
    let parallel = slice_len >= 4096;
    let mut opp = vec![0.0; if frozen.is_some() { slice_len } else { 0 }];

    for step in (0..steps).rev() {
        let t_next = (step + 1) as f64 * dt;
        if let Some(f) = frozen {
            f.slice_at(t_next, &mut opp);
        }
        let opponents: &[f64] = if frozen.is_some() { &opp } else { &cur };
        let run = |(cn, out): (usize, &mut [f64])| ctx.update(cn, &cur, opponents, dt, out);
        if parallel {
            next.par_chunks_mut(n).enumerate().for_each(run);
        } else {
            next.chunks_mut(n).enumerate().for_each(run);
        }
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("Nash values at time {}", step as f64 * dt)));
        }
        std::mem::swap(&mut cur, &mut next);
        if step % grid.store_every == 0 {
            kept.push(cur.clone());
        }
    }
    kept.reverse();
    for s in kept {
        stored.extend(s);
    }
    Ok(NashSolution {
        n,
        d,
        horizon: spec.horizon(),
        dt,
        slice_dt: dt * grid.store_every as f64,
        ny: grid.ny,
        configs,
        lattice: lat,
        values: stored,
    })
}

struct StepContext<'a> {
    n: usize,
    d: usize,
    nodes: usize,
    configs: &'a Configs,
    tables: &'a NodeTables,
    shuffle_rate: f64,
}

impl StepContext<'_> {
    /// Explicit update of all players at one `(configuration, node)` cell.
    #[inline]
    fn update(&self, cn: usize, cur: &[f64], opp: &[f64], dt: f64, out: &mut [f64]) {
        let (n, d, nodes) = (self.n, self.d, self.nodes);
        let c = cn / nodes;
        let node = cn % nodes;
        let x = self.configs.states(c);
        let here = &cur[cn * n..(cn + 1) * n];
        let opp_here = &opp[cn * n..(cn + 1) * n];
        let phis = &self.tables.phis[cn * d..(cn + 1) * d];
        let costs = &self.tables.costs[cn * d..(cn + 1) * d];
        let terms = &self.tables.terms[self.tables.offsets[cn]..self.tables.offsets[cn + 1]];
        let block = &cur[c * nodes * n..(c + 1) * nodes * n];
        for l in 0..n {
            let wl = here[l];
            let mut acc = costs[x[l]];
            for m in 0..n {
                for j in 0..d {
                    if j == x[m] {
                        continue;
                    }
                    let other = (self.configs.moved(c, m, j) * nodes + node) * n;
                    let diff = cur[other + l] - wl;
                    if m == l {
                        let a = (-diff).max(0.0);
                        acc += phis[j] * diff - 0.5 * a * a;
                    } else {
                        let a = (opp_here[m] - opp[other + m]).max(0.0);
                        acc += (phis[j] + a) * diff;
                    }
                }
            }
            let mut noise = 0.0;
            for term in terms {
                noise += term.coef[x[l]] * (term.stencil.apply(block, n, l) - wl);
            }
            out[l] = wl + dt * (acc + self.shuffle_rate * noise);
        }
    }
}

impl NashSolution {
    /// Tabulates `f(t, x, y, l)` on the grid; used for manufactured solutions.
    pub fn from_fn<F>(spec: &GameSpec, players: usize, ny: usize, slice_dt: f64, f: F) -> Result<Self>
    where
        F: Fn(f64, &[usize], &[f64], usize) -> f64,
    {
        let d = spec.d();
        let configs = Configs::new(players, d);
        let lattice = SimplexLattice::new(players, ny, players as f64)?;
        let steps = step_count(spec.horizon(), slice_dt);
        let slice_dt = spec.horizon() / steps as f64;
        let mut values = Vec::new();
        for s in 0..=steps {
            let t = s as f64 * slice_dt;
            for c in 0..configs.count() {
                for node in 0..lattice.len() {
                    let y = lattice.point(node);
                    for l in 0..players {
                        values.push(f(t, configs.states(c), &y, l));
                    }
                }
            }
        }
        Ok(Self {
            n: players,
            d,
            horizon: spec.horizon(),
            dt: slice_dt,
            slice_dt,
            ny,
            configs,
            lattice,
            values,
        })
    }

    pub fn players(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn slice_dt(&self) -> f64 {
        self.slice_dt
    }

    pub fn slices(&self) -> usize {
        self.values.len() / self.slice_len()
    }

    pub fn configs(&self) -> &Configs {
        &self.configs
    }

    pub fn lattice(&self) -> &SimplexLattice {
        &self.lattice
    }

    pub fn header(&self) -> NashHeader {
        NashHeader {
            players: self.n,
            d: self.d,
            horizon: self.horizon,
            dt: self.dt,
            slice_dt: self.slice_dt,
            ny: self.ny,
            slices: self.slices(),
            configurations: self.configs.count(),
            weight_nodes: self.lattice.len(),
        }
    }

    fn slice_len(&self) -> usize {
        self.configs.count() * self.lattice.len() * self.n
    }

    /// `w^l` at a stored slice, configuration index and lattice node.
    pub fn node_value(&self, slice: usize, c: usize, node: usize, l: usize) -> f64 {
        self.values[slice * self.slice_len() + (c * self.lattice.len() + node) * self.n + l]
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    fn slice_weights(&self, t: f64) -> (usize, f64) {
        let last = self.slices() - 1;
        let s = t.clamp(0.0, self.horizon) / self.slice_dt;
        let s0 = (s.floor() as usize).min(last);
        let theta = if s0 == last { 0.0 } else { s - s0 as f64 };
        (s0, theta)
    }

    fn slice_at(&self, t: f64, out: &mut [f64]) {
        let (s0, theta) = self.slice_weights(t);
        let len = self.slice_len();
        let a = &self.values[s0 * len..(s0 + 1) * len];
        if theta == 0.0 {
            out.copy_from_slice(a);
        } else {
            let b = &self.values[(s0 + 1) * len..(s0 + 2) * len];
            for ((o, &va), &vb) in out.iter_mut().zip(a).zip(b) {
                *o = (1.0 - theta) * va + theta * vb;
            }
        }
    }

    /// `w^l(t, x, y)` for all players, interpolated in `t` and `y`.
    pub fn values_at(&self, t: f64, x: &[usize], y: &[f64], out: &mut [f64]) {
        let c = self.configs.index(x);
        let st = self.lattice.stencil(y);
        self.values_with(t, c, &st, out);
    }

    fn values_with(&self, t: f64, c: usize, st: &Stencil, out: &mut [f64]) {
        let (s0, theta) = self.slice_weights(t);
        let len = self.slice_len();
        let nodes = self.lattice.len();
        let n = self.n;
        let block = |s: usize| &self.values[s * len + c * nodes * n..s * len + (c + 1) * nodes * n];
        for (l, o) in out.iter_mut().enumerate() {
            let va = st.apply(block(s0), n, l);
            *o = if theta > 0.0 {
                (1.0 - theta) * va + theta * st.apply(block(s0 + 1), n, l)
            } else {
                va
            };
        }
    }

    /// Largest equilibrium rate over all stored nodes.
    pub fn max_rate(&self) -> f64 {
        let (n, d, nodes) = (self.n, self.d, self.lattice.len());
        let mut best: f64 = 0.0;
        for s in 0..self.slices() {
            for c in 0..self.configs.count() {
                let x = self.configs.states(c);
                for node in 0..nodes {
                    for l in 0..n {
                        let w = self.node_value(s, c, node, l);
                        for j in 0..d {
                            if j != x[l] {
                                let o = self.node_value(s, self.configs.moved(c, l, j), node, l);
                                best = best.max(w - o);
                            }
                        }
                    }
                }
            }
        }
        best
    }

    /// Writes `(t, x, y, l, w, z, gap)` rows, with `z = U^{x^l}(t, mu)`.
    pub fn write_gap_csv<V: ValueField + ?Sized, W: std::io::Write>(&self, u: &V, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        wtr.write_record(["t", "x", "y", "l", "w", "z", "gap"])?;
        let mut mu = vec![0.0; self.d];
        let mut z = vec![0.0; self.d];
        for s in 0..self.slices() {
            let t = s as f64 * self.slice_dt;
            for c in 0..self.configs.count() {
                let x = self.configs.states(c);
                let xs = x.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ");
                for node in 0..self.lattice.len() {
                    let y = self.lattice.point(node);
                    let ys = y.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ");
                    weighted_measure_into(x, &y, &mut mu);
                    u.values_into(t, &mu, &mut z);
                    for l in 0..self.n {
                        let w = self.node_value(s, c, node, l);
                        let zl = z[x[l]];
                        wtr.write_record([
                            t.to_string(),
                            xs.clone(),
                            ys.clone(),
                            l.to_string(),
                            w.to_string(),
                            zl.to_string(),
                            (zl - w).to_string(),
                        ])?;
                    }
                }
            }
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Feedback `(w^l(x) - w^l(j, x^{-l}))_+` read from a solution.
pub struct NashPolicy<'a> {
    sol: &'a NashSolution,
    bound: f64,
}

pub fn equilibrium_policy(sol: &NashSolution) -> NashPolicy<'_> {
    NashPolicy {
        sol,
        bound: sol.max_rate(),
    }
}

impl Policy for NashPolicy<'_> {
    fn rates(&self, t: f64, x: &[usize], y: &[f64], l: usize, _mu: &[f64], out: &mut [f64]) {
        let sol = self.sol;
        let c = sol.configs.index(x);
        let st = sol.lattice.stencil(y);
        let mut w = [0.0; MAX_PLAYERS];
        sol.values_with(t, c, &st, &mut w[..sol.n]);
        let here = w[l];
        for (j, o) in out.iter_mut().enumerate() {
            if j == x[l] {
                *o = 0.0;
                continue;
            }
            sol.values_with(t, sol.configs.moved(c, l, j), &st, &mut w[..sol.n]);
            *o = (here - w[l]).max(0.0);
        }
    }

    fn bound(&self) -> f64 {
        self.bound
    }
}

/// Nash operator (everything except the time derivative) at `(x, y)` for a
/// family `w(x', y', out)` of player values at one fixed time, with the
/// common-noise expectation enumerated exactly.
pub fn nash_operator(
    spec: &GameSpec,
    x: &[usize],
    y: &[f64],
    w: &dyn Fn(&[usize], &[f64], &mut [f64]),
    out: &mut [f64],
) -> Result<()> {
    let n = x.len();
    let d = spec.d();
    let mut mu = vec![0.0; d];
    weighted_measure_into(x, y, &mut mu);
    let mut here = vec![0.0; n];
    w(x, y, &mut here);
    let mut moved = x.to_vec();
    let mut other = vec![0.0; n];
    out.fill(0.0);
    for l in 0..n {
        out[l] = spec.running_cost(x[l], &mu);
    }
    for m in 0..n {
        for j in 0..d {
            if j == x[m] {
                continue;
            }
            moved[m] = j;
            w(&moved, y, &mut other);
            moved[m] = x[m];
            let phi = spec.phi(mu[j]);
            let a_m = (here[m] - other[m]).max(0.0);
            for l in 0..n {
                let diff = other[l] - here[l];
                if m == l {
                    let a = (-diff).max(0.0);
                    out[l] += phi * diff - 0.5 * a * a;
                } else {
                    out[l] += (phi + a_m) * diff;
                }
            }
        }
    }
    let rate = spec.epsilon() * n as f64;
    if rate > 0.0 {
        for k in compositions(n as u64, d) {
            let pmf = multinomial_pmf(&k, &mu);
            if pmf == 0.0 {
                continue;
            }
            let shuffled = shuffle_weights(x, y, &k)?;
            w(x, &shuffled, &mut other);
            for l in 0..n {
                let i = x[l];
                let ratio = if mu[i] > 0.0 {
                    k[i] as f64 / (n as f64 * mu[i])
                } else {
                    1.0
                };
                out[l] += rate * pmf * ratio * (other[l] - here[l]);
            }
        }
    }
    Ok(())
}

/// Discrete left-hand side of the normalised system on `sol` at `(t, x, y)`:
/// a forward slice difference in time plus [`nash_operator`] at the later slice.
pub fn nash_residual(spec: &GameSpec, sol: &NashSolution, t: f64, x: &[usize], y: &[f64]) -> Result<Vec<f64>> {
    let n = sol.n;
    if x.len() != n || y.len() != n {
        return Err(Error::InvalidParameter("configuration size differs from the solution".into()));
    }
    let tau = sol.slice_dt;
    let (t0, t1) = if t + tau <= sol.horizon + 1e-12 {
        (t, t + tau)
    } else {
        (t - tau, t)
    };
    let mut a = vec![0.0; n];
    let mut b = vec![0.0; n];
    sol.values_at(t0, x, y, &mut a);
    sol.values_at(t1, x, y, &mut b);
    let mut op = vec![0.0; n];
    nash_operator(spec, x, y, &|xx, yy, o| sol.values_at(t1, xx, yy, o), &mut op)?;
    Ok((0..n).map(|l| (b[l] - a[l]) / (t1 - t0) + op[l]).collect())
}

/// Distance between the finite game and the mean-field values.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct GapReport {
    pub players: usize,
    pub eps_exp: f64,
    pub ell: u32,
    /// `sup |z - w|` over all stored nodes
    pub raw: f64,
    /// `sup theta` over all stored nodes
    pub weighted: f64,
    /// the same sups restricted to the safe set of the stopping time
    pub raw_safe: f64,
    pub weighted_safe: f64,
    pub safe_nodes: usize,
    pub total_nodes: usize,
    pub raw_by_player: Vec<f64>,
    pub weighted_by_player: Vec<f64>,
}

/// Weight of the squared gap: `prod_i (N^{-e} + mu_i)^{1/d} / ((1/N) sum y^ell)`.
pub fn theta_weight(mu: &[f64], y: &[f64], eps_exp: f64, ell: u32) -> f64 {
    let n = y.len() as f64;
    let d = mu.len() as f64;
    let floor = n.powf(-eps_exp);
    let prod: f64 = mu.iter().map(|&m| (floor + m).powf(1.0 / d)).product();
    let moment: f64 = y.iter().map(|&v| v.abs().powi(ell as i32)).sum::<f64>() / n;
    prod / moment
}

pub fn value_gap<V: ValueField + ?Sized>(sol: &NashSolution, u: &V, eps_exp: f64, ell: u32) -> GapReport {
    let (n, d) = (sol.n, sol.d);
    let mut r = GapReport {
        players: n,
        eps_exp,
        ell,
        raw_by_player: vec![0.0; n],
        weighted_by_player: vec![0.0; n],
        ..Default::default()
    };
    let mut mu = vec![0.0; d];
    let mut z = vec![0.0; d];
    for s in 0..sol.slices() {
        let t = s as f64 * sol.slice_dt;
        for c in 0..sol.configs.count() {
            let x = sol.configs.states(c);
            for node in 0..sol.lattice.len() {
                let y = sol.lattice.point(node);
                weighted_measure_into(x, &y, &mut mu);
                u.values_into(t, &mu, &mut z);
                let weight = theta_weight(&mu, &y, eps_exp, ell);
                let safe = in_safe_set(&mu, &y, eps_exp);
                r.total_nodes += 1;
                r.safe_nodes += usize::from(safe);
                for l in 0..n {
                    let gap = (z[x[l]] - sol.node_value(s, c, node, l)).abs();
                    let th = weight * gap * gap;
                    r.raw = r.raw.max(gap);
                    r.weighted = r.weighted.max(th);
                    r.raw_by_player[l] = r.raw_by_player[l].max(gap);
                    r.weighted_by_player[l] = r.weighted_by_player[l].max(th);
                    if safe {
                        r.raw_safe = r.raw_safe.max(gap);
                        r.weighted_safe = r.weighted_safe.max(th);
                    }
                }
            }
        }
    }
    r
}

/// Largest absolute difference between two solutions on the same grid.
pub fn max_difference(a: &NashSolution, b: &NashSolution) -> f64 {
    a.values
        .iter()
        .zip(&b.values)
        .fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}
