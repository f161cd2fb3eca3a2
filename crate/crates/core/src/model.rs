//! Game primitives: the inward drift `phi`, the Hamiltonian and its
//! minimiser, the running Lagrangian, cost functions and scenario presets.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::SimplexLattice;

/// Cost function `(state, measure) -> value`.
pub type CostFn = Arc<dyn Fn(usize, &[f64]) -> f64 + Send + Sync>;

/// Scaling of the common-noise covariance in the limit objects.
///
/// `Eps2` uses `sigma^2 = epsilon^2` in the master equation and the limit
/// SDE. `Eps` uses `sigma^2 = epsilon`, which is the scaling produced by the
/// N-player shuffle compensator; any study comparing the particle system with
/// the limit must use it.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseConvention {
    #[default]
    Eps2,
    Eps,
}

impl NoiseConvention {
    pub fn sigma2(self, epsilon: f64) -> f64 {
        match self {
            Self::Eps2 => epsilon * epsilon,
            Self::Eps => epsilon,
        }
    }
}

impl fmt::Display for NoiseConvention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Eps2 => "eps2",
            Self::Eps => "eps",
        })
    }
}

/// Named cost structure, kept alongside the closures so runs can be recorded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum Scenario {
    /// Two opinions; terminal cost `-s(i) (p[0] - p[1])`, `s = (+1, -1)`.
    Voter,
    /// `f(i, p) = a p[i]`, `g(i, p) = b p[i]`.
    Sellers { a: f64, b: f64 },
    /// `f = 0`, `g = c`.
    ConstantCost { c: f64 },
    ZeroCost,
    /// User-supplied closures.
    Custom,
}

impl Scenario {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "voter" => Ok(Self::Voter),
            "sellers" => Ok(Self::Sellers { a: 1.0, b: 1.0 }),
            "constant-cost" => Ok(Self::ConstantCost { c: 1.0 }),
            "zero-cost" => Ok(Self::ZeroCost),
            other => Err(Error::UnknownScenario(other.to_string())),
        }
    }

    pub fn default_dim(&self) -> usize {
        match self {
            Self::Sellers { .. } => 3,
            _ => 2,
        }
    }

    fn costs(&self) -> (CostFn, CostFn) {
        match *self {
            Self::Voter => (
                Arc::new(|_, _| 0.0),
                Arc::new(|i, p| {
                    let m = p[0] - p[1];
                    if i == 0 {
                        -m
                    } else {
                        m
                    }
                }),
            ),
            Self::Sellers { a, b } => (Arc::new(move |i, p| a * p[i]), Arc::new(move |i, p| b * p[i])),
            Self::ConstantCost { c } => (Arc::new(|_, _| 0.0), Arc::new(move |_, _| c)),
            Self::ZeroCost | Self::Custom => (Arc::new(|_, _| 0.0), Arc::new(|_, _| 0.0)),
        }
    }

    /// Game with this cost structure on `d` states and default parameters
    /// `T = 1`, `epsilon = 0.3`, `kappa = 5`, `delta = 0.1`.
    pub fn build(&self, d: usize) -> Result<GameSpec> {
        if matches!(self, Self::Voter) && d != 2 {
            return Err(Error::InvalidParameter(format!(
                "the voter scenario has two states, got d = {d}"
            )));
        }
        let (f, g) = self.costs();
        let mut spec = GameSpec::new(d, 1.0, 0.3, 5.0, 0.1, f, g)?;
        spec.scenario = self.clone();
        Ok(spec)
    }
}

/// Looks up a preset by name and builds it on its default number of states.
pub fn preset_scenario(name: &str) -> Result<GameSpec> {
    let s = Scenario::from_name(name)?;
    s.build(s.default_dim())
}

/// Inward drift: `kappa` on `[0, delta]`, linear down to 0 on `(delta, 2 delta]`.
pub fn phi(r: f64, kappa: f64, delta: f64) -> Result<f64> {
    if r < 0.0 {
        return Err(Error::Negative(format!("phi argument {r}")));
    }
    Ok(phi_unchecked(r, kappa, delta))
}

/// `phi` for arguments already known to be nonnegative; negatives are treated as 0.
#[inline]
pub fn phi_unchecked(r: f64, kappa: f64, delta: f64) -> f64 {
    if r <= delta {
        kappa
    } else if r > 2.0 * delta {
        0.0
    } else {
        kappa * (2.0 * delta - r) / delta
    }
}

/// `H(i, u) = -1/2 sum_{j != i} (u_i - u_j)_+^2`.
#[inline]
pub fn hamiltonian(i: usize, u: &[f64]) -> f64 {
    let ui = u[i];
    -0.5 * u
        .iter()
        .map(|&uj| {
            let a = (ui - uj).max(0.0);
            a * a
        })
        .sum::<f64>()
}

/// Minimiser of the Hamiltonian, written into `out` (length d; `out[i] = 0`).
#[inline]
pub fn a_star_into(i: usize, u: &[f64], out: &mut [f64]) {
    let ui = u[i];
    for (o, &uj) in out.iter_mut().zip(u) {
        *o = (ui - uj).max(0.0);
    }
    out[i] = 0.0;
}

pub fn a_star(i: usize, u: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; u.len()];
    a_star_into(i, u, &mut out);
    out
}

/// `L(i, alpha) = 1/2 sum_{j != i} alpha_j^2`; the entry `alpha[i]` is ignored.
pub fn lagrangian(i: usize, alpha: &[f64]) -> Result<f64> {
    let mut s = 0.0;
    for (j, &a) in alpha.iter().enumerate() {
        if j == i {
            continue;
        }
        if a < 0.0 {
            return Err(Error::Negative(format!("control component {j} = {a}")));
        }
        s += a * a;
    }
    Ok(0.5 * s)
}

/// Default `kappa` making the boundary exponential moments of order `lambda` finite.
pub fn default_kappa(delta: f64, lambda: f64) -> f64 {
    5.0 / (2.0 * (1.0 - delta)) * (lambda + 3.0)
}

/// Upper bound on any jump rate: `M = kappa + 2 (T |f| + |g|)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateBound {
    pub m: f64,
    pub kappa: f64,
}

impl RateBound {
    /// Bound on equilibrium feedback rates, `M - kappa`.
    pub fn feedback(&self) -> f64 {
        self.m - self.kappa
    }
}

/// All model parameters. Immutable once built; the `with_*` methods return
/// revalidated copies.
#[derive(Clone)]
pub struct GameSpec {
    d: usize,
    horizon: f64,
    epsilon: f64,
    kappa: f64,
    delta: f64,
    noise: NoiseConvention,
    running: CostFn,
    terminal: CostFn,
    f_sup: f64,
    g_sup: f64,
    scenario: Scenario,
}

impl fmt::Debug for GameSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GameSpec")
            .field("d", &self.d)
            .field("horizon", &self.horizon)
            .field("epsilon", &self.epsilon)
            .field("kappa", &self.kappa)
            .field("delta", &self.delta)
            .field("noise", &self.noise)
            .field("scenario", &self.scenario)
            .field("f_sup", &self.f_sup)
            .field("g_sup", &self.g_sup)
            .finish()
    }
}

/// Serializable summary of a [`GameSpec`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpecRecord {
    pub d: usize,
    pub horizon: f64,
    pub epsilon: f64,
    pub kappa: f64,
    pub delta: f64,
    pub noise_convention: NoiseConvention,
    pub sigma2: f64,
    pub scenario: Scenario,
    pub f_sup: f64,
    pub g_sup: f64,
}

impl GameSpec {
    pub fn new(
        d: usize,
        horizon: f64,
        epsilon: f64,
        kappa: f64,
        delta: f64,
        running: CostFn,
        terminal: CostFn,
    ) -> Result<Self> {
        validate_dims(d, horizon)?;
        validate_epsilon(epsilon)?;
        validate_drift(d, kappa, delta)?;
        let (f_sup, g_sup) = scan_sup(d, &running, &terminal)?;
        Ok(Self {
            d,
            horizon,
            epsilon,
            kappa,
            delta,
            noise: NoiseConvention::default(),
            running,
            terminal,
            f_sup,
            g_sup,
            scenario: Scenario::Custom,
        })
    }

    pub fn with_horizon(mut self, horizon: f64) -> Result<Self> {
        validate_dims(self.d, horizon)?;
        self.horizon = horizon;
        Ok(self)
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Result<Self> {
        validate_epsilon(epsilon)?;
        self.epsilon = epsilon;
        Ok(self)
    }

    /// Switches the common noise off. This leaves the admissible range
    /// `(0, 1)` on purpose; it is the degenerate limit used to isolate the
    /// idiosyncratic dynamics.
    pub fn without_common_noise(mut self) -> Self {
        self.epsilon = 0.0;
        self
    }

    pub fn with_kappa(mut self, kappa: f64) -> Result<Self> {
        validate_drift(self.d, kappa, self.delta)?;
        self.kappa = kappa;
        Ok(self)
    }

    pub fn with_delta(mut self, delta: f64) -> Result<Self> {
        validate_drift(self.d, self.kappa, delta)?;
        self.delta = delta;
        Ok(self)
    }

    pub fn with_noise(mut self, noise: NoiseConvention) -> Self {
        self.noise = noise;
        self
    }

    pub fn with_costs(mut self, running: CostFn, terminal: CostFn) -> Result<Self> {
        let (f_sup, g_sup) = scan_sup(self.d, &running, &terminal)?;
        self.running = running;
        self.terminal = terminal;
        self.f_sup = f_sup;
        self.g_sup = g_sup;
        self.scenario = Scenario::Custom;
        Ok(self)
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn noise(&self) -> NoiseConvention {
        self.noise
    }

    pub fn sigma2(&self) -> f64 {
        self.noise.sigma2(self.epsilon)
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    #[inline]
    pub fn phi(&self, r: f64) -> f64 {
        phi_unchecked(r, self.kappa, self.delta)
    }

    #[inline]
    pub fn running_cost(&self, i: usize, p: &[f64]) -> f64 {
        (self.running)(i, p)
    }

    #[inline]
    pub fn terminal_cost(&self, i: usize, p: &[f64]) -> f64 {
        (self.terminal)(i, p)
    }

    pub fn f_sup(&self) -> f64 {
        self.f_sup
    }

    pub fn g_sup(&self) -> f64 {
        self.g_sup
    }

    /// `T |f| + |g|`, the a-priori bound on value functions.
    pub fn value_bound(&self) -> f64 {
        self.horizon * self.f_sup + self.g_sup
    }

    pub fn rate_bound(&self) -> RateBound {
        RateBound {
            m: self.kappa + 2.0 * self.value_bound(),
            kappa: self.kappa,
        }
    }

    pub fn record(&self) -> SpecRecord {
        SpecRecord {
            d: self.d,
            horizon: self.horizon,
            epsilon: self.epsilon,
            kappa: self.kappa,
            delta: self.delta,
            noise_convention: self.noise,
            sigma2: self.sigma2(),
            scenario: self.scenario.clone(),
            f_sup: self.f_sup,
            g_sup: self.g_sup,
        }
    }
}

fn validate_dims(d: usize, horizon: f64) -> Result<()> {
    if d < 2 {
        return Err(Error::InvalidParameter(format!("need at least two states, got d = {d}")));
    }
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(Error::InvalidParameter(format!("horizon must be positive, got {horizon}")));
    }
    Ok(())
}

fn validate_epsilon(epsilon: f64) -> Result<()> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "epsilon must lie in (0, 1), got {epsilon}"
        )));
    }
    Ok(())
}

fn validate_drift(d: usize, kappa: f64, delta: f64) -> Result<()> {
    if !(kappa >= 0.0 && kappa.is_finite()) {
        return Err(Error::InvalidParameter(format!("kappa must be >= 0, got {kappa}")));
    }
    let cap = 1.0 / (4.0 * (d as f64).sqrt());
    if !(delta > 0.0 && delta < cap) {
        return Err(Error::InvalidParameter(format!(
            "delta must lie in (0, 1/(4 sqrt d)) = (0, {cap:.6}), got {delta}"
        )));
    }
    Ok(())
}

/// Sup norms of the costs from a lattice scan of the simplex.
fn scan_sup(d: usize, f: &CostFn, g: &CostFn) -> Result<(f64, f64)> {
    let n = match d {
        2 => 512,
        3 => 96,
        4 => 32,
        5 => 16,
        _ => 8,
    };
    let lat = SimplexLattice::new(d, n, 1.0)?;
    let mut p = vec![0.0; d];
    let (mut fs, mut gs) = (0.0f64, 0.0f64);
    for idx in 0..lat.len() {
        lat.point_into(idx, &mut p);
        for i in 0..d {
            let (fv, gv) = (f(i, &p), g(i, &p));
            if !fv.is_finite() || !gv.is_finite() {
                return Err(Error::NonFinite(format!("cost at state {i}, p = {p:?}")));
            }
            fs = fs.max(fv.abs());
            gs = gs.max(gv.abs());
        }
    }
    Ok((fs, gs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn phi_examples() {
        assert_eq!(phi(0.05, 10.0, 0.1).unwrap(), 10.0);
        assert_eq!(phi(0.25, 10.0, 0.1).unwrap(), 0.0);
        assert!((phi(0.15, 10.0, 0.1).unwrap() - 5.0).abs() < 1e-12);
        assert!(phi(-0.1, 10.0, 0.1).is_err());
    }

    #[test]
    fn hamiltonian_and_minimiser_examples() {
        assert_eq!(hamiltonian(0, &[3.0, 1.0]), -2.0);
        assert_eq!(hamiltonian(1, &[3.0, 1.0]), 0.0);
        assert_eq!(hamiltonian(0, &[2.0, 2.0, 2.0]), 0.0);
        assert_eq!(a_star(0, &[3.0, 1.0]), vec![0.0, 2.0]);
        assert_eq!(a_star(1, &[3.0, 1.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn lagrangian_examples() {
        assert_eq!(lagrangian(0, &[0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(lagrangian(0, &[0.0, 2.0]).unwrap(), 2.0);
        assert_eq!(lagrangian(0, &[9.0, 1.0, 1.0]).unwrap(), 1.0);
        assert!(lagrangian(0, &[0.0, -1.0]).is_err());
    }

    #[test]
    fn presets() {
        let z = preset_scenario("zero-cost").unwrap();
        assert_eq!(z.terminal_cost(1, &[0.2, 0.8]), 0.0);
        let v = preset_scenario("voter").unwrap();
        let p = [0.7, 0.3];
        assert!((v.terminal_cost(0, &p) + 0.4).abs() < 1e-12);
        assert!((v.terminal_cost(1, &p) - 0.4).abs() < 1e-12);
        assert_eq!(v.g_sup(), 1.0);
        assert_eq!(v.rate_bound().m, 7.0);
        let c = Scenario::ConstantCost { c: 2.5 }.build(3).unwrap();
        assert_eq!(c.terminal_cost(2, &[0.1, 0.2, 0.7]), 2.5);
        assert!(matches!(preset_scenario("nope"), Err(Error::UnknownScenario(_))));
    }

    #[test]
    fn parameter_ranges_are_enforced() {
        let v = preset_scenario("voter").unwrap();
        assert!(v.clone().with_delta(0.2).is_err());
        assert!(v.clone().with_delta(0.17).is_ok());
        assert!(v.clone().with_epsilon(1.5).is_err());
        assert!(v.clone().with_epsilon(0.0).is_err());
        assert!(v.with_kappa(-1.0).is_err());
    }

    #[test]
    fn noise_conventions() {
        assert!((NoiseConvention::Eps2.sigma2(0.3) - 0.09).abs() < 1e-15);
        assert_eq!(NoiseConvention::Eps.sigma2(0.3), 0.3);
    }

    proptest! {
        #[test]
        fn hamiltonian_is_attained_by_minimiser(
            u in prop::collection::vec(-5.0f64..5.0, 2..6),
            shift in -3.0f64..3.0,
        ) {
            for i in 0..u.len() {
                let a = a_star(i, &u);
                let lin: f64 = a.iter().zip(&u).map(|(aj, uj)| aj * (uj - u[i])).sum();
                let h = hamiltonian(i, &u);
                prop_assert!(h <= 0.0);
                prop_assert!((h - lin - lagrangian(i, &a).unwrap()).abs() < 1e-12);
                let shifted: Vec<f64> = u.iter().map(|x| x + shift).collect();
                let b = a_star(i, &shifted);
                for (x, y) in a.iter().zip(&b) {
                    prop_assert!((x - y).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn phi_is_non_increasing(r1 in 0.0f64..1.0, dr in 0.0f64..1.0) {
            prop_assert!(phi_unchecked(r1, 3.0, 0.1) >= phi_unchecked(r1 + dr, 3.0, 0.1));
        }
    }
}
