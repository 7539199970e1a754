//! Critical input rates at which the first snapping element changes.
//!
//! Two elements with `F_1^max < F_2^max` pulled slowly snap element 1 first;
//! above the critical rate the damping lag lets element 2, at the driven end,
//! reach its peak force first. Three estimates are offered: the asymptotic
//! formula, the transcendental equation it simplifies, and bisection over
//! full simulations.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{first_event, first_event_time_cap, ChainConfig, ChainState, Direction, IntegrateOptions};
use crate::error::{Error, Result};
use crate::profiles::Phase;
use crate::roots;

/// Variability of a two-element chain. `beta = 1` (no variability) is
/// accepted and gives a zero critical rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VariabilityParams {
    pub f1_max: f64,
    pub f2_max: f64,
    pub beta: f64,
    pub f_bar: f64,
    pub d_f: f64,
    pub alpha: f64,
}

impl VariabilityParams {
    pub fn new(f1_max: f64, f2_max: f64) -> Result<Self> {
        if !(f2_max > 0.0) || !(f1_max > 0.0) || !f1_max.is_finite() || !f2_max.is_finite() {
            return Err(Error::InvalidVariability(format!(
                "critical forces must be positive, got {f1_max} and {f2_max}"
            )));
        }
        if f1_max > f2_max {
            return Err(Error::InvalidVariability(format!(
                "beta = {} exceeds 1 (F1_max = {f1_max} > F2_max = {f2_max})",
                f1_max / f2_max
            )));
        }
        let f_bar = 0.5 * (f1_max + f2_max);
        let d_f = f2_max - f1_max;
        Ok(VariabilityParams {
            f1_max,
            f2_max,
            beta: f1_max / f2_max,
            f_bar,
            d_f,
            alpha: d_f / f_bar,
        })
    }

    /// Parameters of the first two elements of a chain.
    pub fn of_chain(config: &ChainConfig) -> Result<Self> {
        if config.len() != 2 {
            return Err(Error::NotTwoElements(config.len()));
        }
        let (a, b) = (config.element(0).critical_points(), config.element(1).critical_points());
        VariabilityParams::new(a.f_max, b.f_max)
    }

    /// The exponent `((1 + 1/beta)(2 - alpha) + (1 + beta)(2 + alpha)) / 2`
    /// appearing in the transcendental equation, before division by the rate.
    pub fn exponent_numerator(&self) -> f64 {
        let b = self.beta;
        let a = self.alpha;
        0.5 * ((1.0 + 1.0 / b) * (2.0 - a) + (1.0 + b) * (2.0 + a))
    }
}

/// Variability for contraction: `beta = 1 - (F1_min - F2_min) / F2_max`,
/// with `F2_max` kept and `F1_max` replaced by `beta * F2_max`.
pub fn contraction_params(f1_min: f64, f2_min: f64, f2_max: f64) -> Result<VariabilityParams> {
    if f1_min < f2_min {
        return Err(Error::InvalidVariability(format!(
            "contraction needs F1_min >= F2_min, got {f1_min} < {f2_min}"
        )));
    }
    if !(f2_max > 0.0) {
        return Err(Error::InvalidVariability(format!(
            "F2_max must be positive, got {f2_max}"
        )));
    }
    let beta = 1.0 - (f1_min - f2_min) / f2_max;
    if !(beta > 0.0) {
        return Err(Error::InvalidVariability(format!(
            "contraction beta = {beta} is not positive"
        )));
    }
    VariabilityParams::new(beta * f2_max, f2_max)
}

/// Contraction parameters of a two-element chain.
pub fn contraction_params_of_chain(config: &ChainConfig) -> Result<VariabilityParams> {
    if config.len() != 2 {
        return Err(Error::NotTwoElements(config.len()));
    }
    let (a, b) = (config.element(0).critical_points(), config.element(1).critical_points());
    contraction_params(a.f_min, b.f_min, b.f_max)
}

fn check_c(c: f64) -> Result<()> {
    if c > 0.0 && c.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidVariability(format!("damping must be positive, got {c}")))
    }
}

/// `v_c = 2 (1 - beta) F_bar / c`, in mm/s for forces in N and `c` in N·s/mm.
pub fn asymptotic_vc(params: &VariabilityParams, c: f64) -> Result<f64> {
    check_c(c)?;
    Ok(2.0 * (1.0 - params.beta) * params.f_bar / c)
}

/// Residual of the transcendental equation in the dimensionless rate
/// `u = c v / F_bar`.
pub fn transcendental_residual(params: &VariabilityParams, u: f64) -> f64 {
    let e = params.exponent_numerator();
    -u * (-e / u).exp_m1() - params.alpha * (1.0 + params.beta)
}

/// Dimensionless root of [`transcendental_residual`]. The left-hand side
/// increases monotonically from 0 to the exponent numerator, so the root is
/// unique when it exists.
pub fn transcendental_vc_dimensionless(params: &VariabilityParams) -> Result<f64> {
    let target = params.alpha * (1.0 + params.beta);
    if target == 0.0 {
        return Ok(0.0);
    }
    let lo = 1e-12;
    let mut hi = 1.0;
    let mut grow = 0;
    while transcendental_residual(params, hi) < 0.0 {
        hi *= 2.0;
        grow += 1;
        if grow > 200 {
            return Err(Error::NoRootBracket { lo, hi });
        }
    }
    roots::brent(lo, hi, |u| transcendental_residual(params, u), 1e-15, 500).ok_or(Error::NoRootBracket { lo, hi })
}

/// Critical rate from the transcendental equation, in mm/s.
pub fn transcendental_vc(params: &VariabilityParams, c: f64) -> Result<f64> {
    check_c(c)?;
    Ok(transcendental_vc_dimensionless(params)? * params.f_bar / c)
}

/// Equal-force state with every element on its phase-0 branch at zero
/// force; the unstretched state for profiles through the origin.
pub fn extension_start(config: &ChainConfig) -> Result<ChainState> {
    let eps = config
        .elements()
        .iter()
        .map(|p| p.eps_on_branch(Phase::Zero, 0.0).unwrap_or(0.0))
        .collect();
    ChainState::new(config, eps, 0.0)
}

/// Equal-force state with every element on its phase-1 branch, at the force
/// `min F_min + max F_max`. This mirrors the extension start: the weakest
/// contraction threshold is as far below as the strongest extension
/// threshold is above zero. The force is clipped to what the phase-1
/// branches can carry.
pub fn contraction_start(config: &ChainConfig) -> Result<ChainState> {
    let cps: Vec<_> = config.elements().iter().map(|p| p.critical_points()).collect();
    let f_min = cps.iter().map(|c| c.f_min).fold(f64::INFINITY, f64::min);
    let f_max = cps.iter().map(|c| c.f_max).fold(f64::NEG_INFINITY, f64::max);
    let cap = config
        .elements()
        .iter()
        .map(|p| p.branch_force_range(Phase::One).1)
        .fold(f64::INFINITY, f64::min);
    let force = (f_min + f_max).min(cap);
    let eps = config
        .elements()
        .iter()
        .map(|p| {
            p.eps_on_branch(Phase::One, force)
                .ok_or_else(|| Error::InvalidState(format!("phase-1 branch cannot carry {force} N")))
        })
        .collect::<Result<Vec<_>>>()?;
    let state = ChainState::new(config, eps, 0.0)?;
    if state.phases.iter().any(|&p| p != Phase::One) {
        return Err(Error::InvalidState(format!(
            "contraction start {} is not all phase 1",
            state.label()
        )));
    }
    Ok(state)
}

/// Settings for [`numeric_vc`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NumericOptions {
    /// Relative width of the final bracket.
    pub rel_tol: f64,
    /// Rates tried per bisection round (run in parallel).
    pub probes: usize,
    pub integrate: IntegrateOptions,
}

impl Default for NumericOptions {
    fn default() -> Self {
        NumericOptions {
            rel_tol: 1e-4,
            probes: 7,
            integrate: IntegrateOptions::without_samples(),
        }
    }
}

/// Result of [`numeric_vc`]. Rates are magnitudes in mm/s.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NumericRate {
    pub v_c: f64,
    pub lo: f64,
    pub hi: f64,
    /// First snapping element (1-based) just below and just above `v_c`.
    pub first_below: Option<usize>,
    pub first_above: Option<usize>,
    pub simulations: usize,
}

/// First snapping element (1-based) at rate magnitude `speed`.
pub fn first_snapper(
    config: &ChainConfig,
    from: &ChainState,
    direction: Direction,
    speed: f64,
    opts: &IntegrateOptions,
) -> Result<Option<usize>> {
    let v = direction.sign() * speed;
    let cap = first_event_time_cap(config, from, v);
    Ok(first_event(config, from, v, cap, opts)?.map(|e| e.element))
}

/// Default bracket: `[0.1, 10]` times the asymptotic estimate for the
/// direction.
pub fn default_bracket(config: &ChainConfig, direction: Direction) -> Result<(f64, f64)> {
    let params = match direction {
        Direction::Extend => VariabilityParams::of_chain(config)?,
        Direction::Contract => contraction_params_of_chain(config)?,
    };
    let est = asymptotic_vc(&params, config.c())?;
    if !(est > 0.0) {
        return Err(Error::InvalidVariability(
            "no variability in this direction, the critical rate is zero".into(),
        ));
    }
    Ok((0.1 * est, 10.0 * est))
}

/// Boundary rate between "`target` snaps first" and "something else snaps
/// first", found by repeated geometric subdivision of `bracket`. With
/// `target = None` the boundary is where the first snapper stops matching
/// the one at the lower end.
pub fn numeric_vc(
    config: &ChainConfig,
    from: &ChainState,
    direction: Direction,
    target: Option<usize>,
    bracket: Option<(f64, f64)>,
    opts: &NumericOptions,
) -> Result<NumericRate> {
    let (lo, hi) = match bracket {
        Some(b) => b,
        None => default_bracket(config, direction)?,
    };
    if !(lo > 0.0 && hi > lo && hi.is_finite()) {
        return Err(Error::InvalidConfig(vec![format!("bad rate bracket [{lo}, {hi}]")]));
    }
    let first = |v: f64| first_snapper(config, from, direction, v, &opts.integrate);
    let f_lo = first(lo)?;
    let f_hi = first(hi)?;
    let mut sims = 2;
    let reference = target.or(f_lo);
    let side = |f: Option<usize>| f.is_some() && f == reference;
    let (s_lo, s_hi) = (side(f_lo), side(f_hi));
    if s_lo == s_hi {
        return Err(Error::SameFirstSnapper { lo, hi, first: f_lo });
    }
    let ((lo, below), (hi, above), extra) =
        refine_boundary((lo, f_lo), (hi, f_hi), |f| side(*f), first, opts.rel_tol, opts.probes)?;
    sims += extra;
    Ok(NumericRate {
        v_c: (lo * hi).sqrt(),
        lo,
        hi,
        first_below: below,
        first_above: above,
        simulations: sims,
    })
}

/// Lower end, upper end and evaluation count of a refined bracket.
pub type Refined<T> = ((f64, T), (f64, T), usize);

/// Narrows a rate bracket whose ends fall on different sides of `side`.
/// Each round evaluates `probes` geometrically spaced interior rates in
/// parallel and keeps the sub-bracket holding the first change of side.
/// Stops once `hi / lo - 1 <= rel_tol`. Returns both ends with their values
/// and the number of evaluations.
pub fn refine_boundary<T, F, S>(
    lo: (f64, T),
    hi: (f64, T),
    side: S,
    eval: F,
    rel_tol: f64,
    probes: usize,
) -> Result<Refined<T>>
where
    T: Send + Clone,
    F: Fn(f64) -> Result<T> + Sync,
    S: Fn(&T) -> bool,
{
    let (mut lo, mut hi) = (lo, hi);
    let s_lo = side(&lo.1);
    let probes = probes.max(1);
    let mut evals = 0;
    while hi.0 / lo.0 - 1.0 > rel_tol {
        let ratio = (hi.0 / lo.0).ln();
        let rates: Vec<f64> = (1..=probes)
            .map(|j| lo.0 * (ratio * j as f64 / (probes + 1) as f64).exp())
            .collect();
        let vals = rates.par_iter().map(|&v| eval(v)).collect::<Result<Vec<_>>>()?;
        evals += probes;
        let mut new_lo = lo.clone();
        let mut new_hi = hi.clone();
        for (&v, val) in rates.iter().zip(vals) {
            if side(&val) == s_lo {
                new_lo = (v, val);
            } else {
                new_hi = (v, val);
                break;
            }
        }
        if new_lo.0 == lo.0 && new_hi.0 == hi.0 {
            break;
        }
        lo = new_lo;
        hi = new_hi;
    }
    Ok((lo, hi, evals))
}

/// One row of a method comparison: rates in mm/s for each direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateRow {
    pub method: String,
    pub extend: Option<f64>,
    pub contract: Option<f64>,
}

/// Asymptotic, transcendental and numeric critical rates of a two-element
/// chain in both directions. Cells that cannot be computed are `None`.
pub fn rate_table(config: &ChainConfig, opts: &NumericOptions) -> Result<Vec<RateRow>> {
    let c = config.c();
    let ext = VariabilityParams::of_chain(config)?;
    let con = contraction_params_of_chain(config).ok();
    let numeric = |dir: Direction| -> Option<f64> {
        let start = match dir {
            Direction::Extend => extension_start(config),
            Direction::Contract => contraction_start(config),
        }
        .ok()?;
        numeric_vc(config, &start, dir, None, None, opts).ok().map(|r| r.v_c)
    };
    Ok(vec![
        RateRow {
            method: "asymptotic".into(),
            extend: asymptotic_vc(&ext, c).ok(),
            contract: con.and_then(|p| asymptotic_vc(&p, c).ok()),
        },
        RateRow {
            method: "transcendental".into(),
            extend: transcendental_vc(&ext, c).ok(),
            contract: con.and_then(|p| transcendental_vc(&p, c).ok()),
        },
        RateRow {
            method: "numeric".into(),
            extend: numeric(Direction::Extend),
            contract: numeric(Direction::Contract),
        },
    ])
}
