//! Overdamped chain dynamics.
//!
//! Element `i` sits between nodes `i-1` and `i`; every node carries a linear
//! damper to ground and the last node is driven at the input rate `v`. With
//! `W` the tridiagonal damping matrix this gives
//! `d(eps)/dt = W F(eps) + v e_N`.

mod integrator;
mod schedule;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::profiles::{ForceProfile, Phase};

pub use schedule::{
    integrate, IntegrateOptions, RateSchedule, Sample, Segment, SegmentOutcome, StopCondition, StopReason, Trajectory,
    TransitionEvent,
};

/// Ordered elements plus the damping coefficient (N·s/mm).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawChain")]
pub struct ChainConfig {
    #[serde(default)]
    name: String,
    c: f64,
    elements: Vec<ForceProfile>,
}

#[derive(Deserialize)]
struct RawChain {
    #[serde(default)]
    name: String,
    c: f64,
    elements: Vec<ForceProfile>,
}

impl TryFrom<RawChain> for ChainConfig {
    type Error = Error;

    fn try_from(raw: RawChain) -> Result<Self> {
        ChainConfig::new(raw.elements, raw.c, raw.name)
    }
}

impl ChainConfig {
    /// Builds a chain. The ordering rule on critical forces is not enforced
    /// here; see [`ChainConfig::ordering_violations`] and
    /// [`ChainConfig::new_strict`].
    pub fn new(elements: Vec<ForceProfile>, c: f64, name: impl Into<String>) -> Result<Self> {
        let mut problems = Vec::new();
        if elements.is_empty() {
            problems.push("chain needs at least one element".to_string());
        }
        if !(c > 0.0) || !c.is_finite() {
            problems.push(format!("damping coefficient must be positive, got {c}"));
        }
        if !problems.is_empty() {
            return Err(Error::InvalidConfig(problems));
        }
        Ok(ChainConfig {
            name: name.into(),
            c,
            elements,
        })
    }

    /// Like [`ChainConfig::new`] but rejects chains whose critical forces are
    /// not strictly graded along the chain.
    pub fn new_strict(elements: Vec<ForceProfile>, c: f64, name: impl Into<String>) -> Result<Self> {
        let cfg = ChainConfig::new(elements, c, name)?;
        let v = cfg.ordering_violations();
        if v.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::InvalidConfig(v))
        }
    }

    /// Every adjacent pair breaking `F_i^max < F_{i+1}^max` or
    /// `F_i^min > F_{i+1}^min`. Indices are 1-based.
    pub fn ordering_violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (i, pair) in self.elements.windows(2).enumerate() {
            let (a, b) = (pair[0].critical_points(), pair[1].critical_points());
            if !(a.f_max < b.f_max) {
                out.push(format!(
                    "F_max of element {} ({}) is not below element {} ({})",
                    i + 1,
                    a.f_max,
                    i + 2,
                    b.f_max
                ));
            }
            if !(a.f_min > b.f_min) {
                out.push(format!(
                    "F_min of element {} ({}) is not above element {} ({})",
                    i + 1,
                    a.f_min,
                    i + 2,
                    b.f_min
                ));
            }
        }
        out
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn c(&self) -> f64 {
        self.c
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn elements(&self) -> &[ForceProfile] {
        &self.elements
    }

    pub fn element(&self, index: usize) -> &ForceProfile {
        &self.elements[index]
    }

    pub fn phases_of(&self, eps: &[f64]) -> Vec<Phase> {
        self.elements.iter().zip(eps).map(|(p, &e)| p.phase_of(e)).collect()
    }

    /// Copy with every element passed through `f`.
    pub fn map_elements<F>(&self, f: F) -> Result<ChainConfig>
    where
        F: FnMut(&ForceProfile) -> Result<ForceProfile>,
    {
        let elements = self.elements.iter().map(f).collect::<Result<Vec<_>>>()?;
        ChainConfig::new(elements, self.c, self.name.clone())
    }
}

/// Elongations at time `t` with the matching phase labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainState {
    pub t: f64,
    pub eps: Vec<f64>,
    pub phases: Vec<Phase>,
}

impl ChainState {
    /// State with phases derived from `eps`. Fails when the vector length
    /// does not match the chain or a value lies outside its element's domain.
    pub fn new(config: &ChainConfig, eps: Vec<f64>, t: f64) -> Result<Self> {
        if eps.len() != config.len() {
            return Err(Error::InvalidState(format!(
                "expected {} elongations, got {}",
                config.len(),
                eps.len()
            )));
        }
        if !t.is_finite() {
            return Err(Error::InvalidState(format!("non-finite time {t}")));
        }
        for (i, (p, &e)) in config.elements().iter().zip(&eps).enumerate() {
            if !e.is_finite() || !p.contains(e) {
                let (lo, hi) = p.domain();
                return Err(Error::InvalidState(format!(
                    "element {} elongation {e} mm outside [{lo}, {hi}]",
                    i + 1
                )));
            }
        }
        let phases = config.phases_of(&eps);
        Ok(ChainState { t, eps, phases })
    }

    /// All elements unstretched at `t = 0`.
    pub fn at_rest(config: &ChainConfig) -> Self {
        let eps = vec![0.0; config.len()];
        let phases = config.phases_of(&eps);
        ChainState { t: 0.0, eps, phases }
    }

    /// Checks the phase labels against the elongations.
    pub fn validate(&self, config: &ChainConfig) -> Result<()> {
        let fresh = ChainState::new(config, self.eps.clone(), self.t)?;
        if fresh.phases != self.phases {
            return Err(Error::InvalidState(format!(
                "phase labels {} do not match elongations (expected {})",
                phase_string(&self.phases),
                phase_string(&fresh.phases)
            )));
        }
        Ok(())
    }

    pub fn length(&self) -> f64 {
        self.eps.iter().sum()
    }

    pub fn label(&self) -> String {
        phase_string(&self.phases)
    }
}

/// Renders phases with element 1 leftmost, e.g. `"0s1"`.
pub fn phase_string(phases: &[Phase]) -> String {
    phases.iter().map(|p| p.as_char()).collect()
}

/// `(1/c)` times the tridiagonal matrix with diagonal `(-1, -2, ..., -2, -1)`
/// and unit off-diagonals. A single element has no free node, so `N = 1`
/// gives the 1×1 zero matrix.
pub fn build_damping_matrix(n: usize, c: f64) -> DMatrix<f64> {
    let mut w = DMatrix::zeros(n, n);
    if n < 2 {
        return w;
    }
    for i in 0..n {
        let diag = if i == 0 || i == n - 1 { -1.0 } else { -2.0 };
        w[(i, i)] = diag / c;
        if i + 1 < n {
            w[(i, i + 1)] = 1.0 / c;
            w[(i + 1, i)] = 1.0 / c;
        }
    }
    w
}

/// Applies `W` to a force vector without forming the matrix.
pub(crate) fn apply_w(forces: &[f64], c: f64, out: &mut [f64]) {
    let n = forces.len();
    if n == 1 {
        out[0] = 0.0;
        return;
    }
    for i in 0..n {
        let mut s = 0.0;
        if i > 0 {
            s += forces[i - 1] - forces[i];
        }
        if i + 1 < n {
            s += forces[i + 1] - forces[i];
        }
        out[i] = s / c;
    }
}

/// Elongation rates `W F(eps) + v e_N`, with forces evaluated on each
/// element's current phase branch.
pub fn rhs(config: &ChainConfig, eps: &[f64], v: f64) -> Result<Vec<f64>> {
    if eps.len() != config.len() {
        return Err(Error::InvalidState(format!(
            "expected {} elongations, got {}",
            config.len(),
            eps.len()
        )));
    }
    let forces = config
        .elements()
        .iter()
        .zip(eps)
        .map(|(p, &e)| p.force(e))
        .collect::<Result<Vec<_>>>()?;
    let mut out = vec![0.0; eps.len()];
    apply_w(&forces, config.c(), &mut out);
    *out.last_mut().expect("non-empty chain") += v;
    Ok(out)
}

/// Sign of the input rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Extend,
    Contract,
}

impl Direction {
    pub fn sign(self) -> f64 {
        match self {
            Direction::Extend => 1.0,
            Direction::Contract => -1.0,
        }
    }

    pub fn of_rate(v: f64) -> Direction {
        if v < 0.0 {
            Direction::Contract
        } else {
            Direction::Extend
        }
    }
}

impl std::fmt::Display for Direction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Direction::Extend => "extend",
            Direction::Contract => "contract",
        })
    }
}

/// Generous upper bound on the time to the first phase change when pulling
/// at `|v|`: four times the time needed to move the total length across
/// every element's spinodal span plus its current elongation, plus 1 mm.
pub fn first_event_time_cap(config: &ChainConfig, state: &ChainState, v: f64) -> f64 {
    let span: f64 = config
        .elements()
        .iter()
        .zip(&state.eps)
        .map(|(p, e)| {
            let cp = p.critical_points();
            cp.eps_min.abs() + cp.eps_max.abs() + e.abs()
        })
        .sum();
    4.0 * (span + 1.0) / v.abs().max(1e-12)
}

/// The first phase change when the chain is driven at constant `v` from
/// `state`, or `None` when nothing happens before `t_cap` seconds.
pub fn first_event(
    config: &ChainConfig,
    state: &ChainState,
    v: f64,
    t_cap: f64,
    opts: &IntegrateOptions,
) -> Result<Option<TransitionEvent>> {
    let sched = RateSchedule::new(vec![Segment::new(
        v,
        StopCondition::Transition {
            element: None,
            to_phase: None,
            timeout: t_cap,
        },
    )]);
    let opts = IntegrateOptions {
        record_samples: false,
        ..*opts
    };
    let tr = integrate(config, state, &sched, &opts)?;
    Ok(tr.events.into_iter().next())
}

/// Exact response of two tri-linear elements, both in phase 0 and starting
/// unstretched, to a constant rate `v`. Returns `(eps1, eps2)`.
pub fn closed_form_two_element(k1: f64, k2: f64, c: f64, v: f64, t: f64) -> (f64, f64) {
    let s = k1 + k2;
    let decay = -(-s * t / c).exp_m1();
    let eps1 = (k2 * t / s - c * k2 * decay / (s * s)) * v;
    let eps2 = v * t - eps1;
    (eps1, eps2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::profiles::{trilinear_from_critical, CriticalPoints};

    fn linear_element(k: f64) -> ForceProfile {
        // corners far away so everything stays on the phase-0 segment
        let cp = CriticalPoints::new(1000.0, 1000.0 * k, 1001.0, 0.0).unwrap();
        trilinear_from_critical(cp, 1.0).unwrap()
    }

    #[test]
    fn two_element_matrix() {
        let w = build_damping_matrix(2, 1.0);
        assert_eq!(w, DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 1.0, -1.0]));
    }

    #[test]
    fn four_element_diagonal() {
        let w = build_damping_matrix(4, 2.0);
        let d: Vec<f64> = (0..4).map(|i| w[(i, i)]).collect();
        assert_eq!(d, vec![-0.5, -1.0, -1.0, -0.5]);
    }

    #[test]
    fn rows_sum_to_zero() {
        for n in 1..9 {
            let w = build_damping_matrix(n, 0.7);
            for i in 0..n {
                assert_eq!(w.row(i).sum(), 0.0);
            }
        }
    }

    #[test]
    fn apply_w_matches_matrix() {
        let f = [0.3, -1.2, 2.5, 0.1, 4.0];
        let mut out = [0.0; 5];
        apply_w(&f, 0.3, &mut out);
        let w = build_damping_matrix(5, 0.3);
        let expect = &w * nalgebra::DVector::from_row_slice(&f);
        for i in 0..5 {
            assert!((out[i] - expect[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn rhs_hand_evaluated() {
        let cfg = ChainConfig::new(vec![linear_element(1.0), linear_element(1.0)], 1.0, "t").unwrap();
        assert_eq!(rhs(&cfg, &[1.0, 0.0], 0.0).unwrap(), vec![-1.0, 1.0]);
        assert_eq!(rhs(&cfg, &[0.5, 0.5], 0.0).unwrap(), vec![0.0, 0.0]);
        let r = rhs(&cfg, &[0.3, 2.0], 4.0).unwrap();
        assert!((r.iter().sum::<f64>() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn closed_form_basics() {
        assert_eq!(closed_form_two_element(1.0, 2.0, 0.1, 5.0, 0.0), (0.0, 0.0));
        let (a, b) = closed_form_two_element(1.3, 0.7, 0.02, 11.0, 0.37);
        assert!((a + b - 11.0 * 0.37).abs() < 1e-12);
        let (a, b) = closed_form_two_element(2.0, 2.0, 0.05, 3.0, 50.0);
        assert!((b - a - 0.05 * 3.0 / 4.0).abs() < 1e-12);
    }

    #[test]
    fn closed_form_solves_the_ode() {
        // central difference of the closed form against the right-hand side
        let (k1, k2, c, v) = (1.5, 0.8, 0.03, 7.0);
        let h = 1e-6;
        for &t in &[0.001, 0.01, 0.05, 0.2] {
            let (a0, b0) = closed_form_two_element(k1, k2, c, v, t - h);
            let (a1, b1) = closed_form_two_element(k1, k2, c, v, t + h);
            let (a, b) = closed_form_two_element(k1, k2, c, v, t);
            let da = (a1 - a0) / (2.0 * h);
            let db = (b1 - b0) / (2.0 * h);
            let f = (k2 * b - k1 * a) / c;
            assert!((da - f).abs() < 1e-5 * f.abs().max(1.0));
            assert!((db - (-f + v)).abs() < 1e-5 * v);
        }
    }

    #[test]
    fn ordering_rules() {
        let mk = |fmax: f64, fmin: f64| {
            trilinear_from_critical(CriticalPoints::new(4.0, fmax, 6.0, fmin).unwrap(), 1.0).unwrap()
        };
        let good = ChainConfig::new_strict(vec![mk(2.0, 1.0), mk(2.2, 0.8)], 0.015, "g");
        assert!(good.is_ok());
        let bad = ChainConfig::new(vec![mk(2.2, 1.0), mk(2.0, 1.2)], 0.015, "b").unwrap();
        assert_eq!(bad.ordering_violations().len(), 2);
        assert!(ChainConfig::new_strict(bad.elements().to_vec(), 0.015, "b").is_err());
        assert!(ChainConfig::new(vec![], 0.015, "e").is_err());
        assert!(ChainConfig::new(vec![mk(2.0, 1.0)], 0.0, "z").is_err());
    }

    #[test]
    fn state_labels() {
        let cp = CriticalPoints::new(4.0, 2.0, 6.0, 1.0).unwrap();
        let p = trilinear_from_critical(cp, 1.0).unwrap();
        let cfg = ChainConfig::new(vec![p.clone(), p.clone(), p], 0.015, "s").unwrap();
        let s = ChainState::new(&cfg, vec![0.0, 5.0, 7.0], 0.0).unwrap();
        assert_eq!(s.label(), "0s1");
        let mut wrong = s.clone();
        wrong.phases[0] = Phase::One;
        assert!(wrong.validate(&cfg).is_err());
        assert!(ChainState::new(&cfg, vec![0.0], 0.0).is_err());
    }
}
