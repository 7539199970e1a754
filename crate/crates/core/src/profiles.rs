//! Bi-stable force-displacement laws.
//!
//! A [`ForceProfile`] is either a tri-linear law (two positive-stiffness
//! segments joined by a negative-stiffness spinodal segment) or a degree-5
//! polynomial with exactly one local maximum followed by one local minimum
//! inside its working interval. Either kind may carry a linear spring in
//! series; the composite keeps the critical forces and shifts the critical
//! displacements.
//!
//! Units are N and mm throughout.

use std::fmt;

use nalgebra::{DMatrix, DVector, Matrix6, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::roots;

/// Default lower end of a polynomial working interval, in mm.
pub const DEFAULT_POLY_LO: f64 = -2.0;
/// Default headroom above `eps_min` for a polynomial working interval, in mm.
pub const DEFAULT_POLY_HEADROOM: f64 = 10.0;

const CONTINUITY_TOL: f64 = 1e-9;

/// Phase label of a single element.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Phase {
    #[serde(rename = "0")]
    Zero,
    #[serde(rename = "s")]
    Spinodal,
    #[serde(rename = "1")]
    One,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::Zero, Phase::Spinodal, Phase::One];

    pub fn as_char(self) -> char {
        match self {
            Phase::Zero => '0',
            Phase::Spinodal => 's',
            Phase::One => '1',
        }
    }

    pub fn from_char(c: char) -> Option<Phase> {
        match c {
            '0' => Some(Phase::Zero),
            's' | 'S' => Some(Phase::Spinodal),
            '1' => Some(Phase::One),
            _ => None,
        }
    }

    pub fn is_binary(self) -> bool {
        self != Phase::Spinodal
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_char())
    }
}

/// Local maximum `(eps_max, f_max)` and local minimum `(eps_min, f_min)` of a
/// bi-stable law.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CriticalPoints {
    pub eps_max: f64,
    pub f_max: f64,
    pub eps_min: f64,
    pub f_min: f64,
}

impl CriticalPoints {
    pub fn new(eps_max: f64, f_max: f64, eps_min: f64, f_min: f64) -> Result<Self> {
        let cp = CriticalPoints {
            eps_max,
            f_max,
            eps_min,
            f_min,
        };
        cp.validate()?;
        Ok(cp)
    }

    pub fn validate(&self) -> Result<()> {
        let vals = [self.eps_max, self.f_max, self.eps_min, self.f_min];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidCriticalPoints(format!("non-finite value in {self:?}")));
        }
        if self.eps_max >= self.eps_min {
            return Err(Error::InvalidCriticalPoints(format!(
                "eps_max ({}) must be below eps_min ({})",
                self.eps_max, self.eps_min
            )));
        }
        if self.f_min >= self.f_max {
            return Err(Error::InvalidCriticalPoints(format!(
                "f_min ({}) must be below f_max ({})",
                self.f_min, self.f_max
            )));
        }
        if self.f_max <= 0.0 {
            return Err(Error::InvalidCriticalPoints(format!(
                "f_max ({}) must be positive",
                self.f_max
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Trilinear {
    k0: f64,
    ks: f64,
    k1: f64,
    critical: CriticalPoints,
}

impl Trilinear {
    /// `(anchor_eps, anchor_force, slope)` of the straight line carrying `phase`.
    fn segment(&self, phase: Phase) -> (f64, f64, f64) {
        let cp = &self.critical;
        match phase {
            Phase::Zero => (0.0, 0.0, self.k0),
            Phase::Spinodal => (cp.eps_max, cp.f_max, self.ks),
            Phase::One => (cp.eps_min, cp.f_min, self.k1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Polynomial5 {
    coeffs: [f64; 6],
    lo: f64,
    hi: f64,
    critical: CriticalPoints,
}

fn poly_eval(c: &[f64; 6], x: f64) -> f64 {
    ((((c[5] * x + c[4]) * x + c[3]) * x + c[2]) * x + c[1]) * x + c[0]
}

fn poly_deriv(c: &[f64; 6], x: f64) -> f64 {
    (((5.0 * c[5] * x + 4.0 * c[4]) * x + 3.0 * c[3]) * x + 2.0 * c[2]) * x + c[1]
}

fn poly_second(c: &[f64; 6], x: f64) -> f64 {
    ((20.0 * c[5] * x + 12.0 * c[4]) * x + 6.0 * c[3]) * x + 2.0 * c[2]
}

impl Polynomial5 {
    fn branch_eps_bounds(&self, phase: Phase) -> (f64, f64) {
        let cp = &self.critical;
        match phase {
            Phase::Zero => (self.lo, cp.eps_max),
            Phase::Spinodal => (cp.eps_max, cp.eps_min),
            Phase::One => (cp.eps_min, self.hi),
        }
    }

    fn invert_on_branch(&self, phase: Phase, force: f64) -> Option<f64> {
        let (a, b) = self.branch_eps_bounds(phase);
        let fa = poly_eval(&self.coeffs, a);
        let fb = poly_eval(&self.coeffs, b);
        let (f_lo, f_hi) = if fa <= fb { (fa, fb) } else { (fb, fa) };
        if force < f_lo || force > f_hi {
            return None;
        }
        if force == fa {
            return Some(a);
        }
        if force == fb {
            return Some(b);
        }
        roots::bisect(a, b, |x| poly_eval(&self.coeffs, x) - force, 200)
    }
}

/// Finds the interior stationary points of a quintic on `[lo, hi]`, checking
/// that there are exactly two and that they are a maximum then a minimum.
pub fn polynomial_critical_points(coeffs: &[f64; 6], lo: f64, hi: f64) -> Result<CriticalPoints> {
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::InvalidProfile(format!("bad working interval [{lo}, {hi}]")));
    }
    if coeffs.iter().any(|c| !c.is_finite()) {
        return Err(Error::InvalidProfile("non-finite polynomial coefficient".into()));
    }
    let n = ((hi - lo) / 1e-3).clamp(4096.0, 400_000.0) as usize;
    let stationary: Vec<f64> = roots::scan_roots(lo, hi, n, |x| poly_deriv(coeffs, x), 1e-15)
        .into_iter()
        .filter(|&x| x > lo && x < hi)
        .collect();
    if stationary.len() != 2 {
        return Err(Error::NotBistable {
            found: stationary.len(),
            lo,
            hi,
        });
    }
    let (e1, e2) = (stationary[0], stationary[1]);
    let is_max = poly_deriv(coeffs, 0.5 * (lo + e1)) > 0.0 && poly_second(coeffs, e1) <= 0.0;
    let is_min = poly_deriv(coeffs, 0.5 * (e2 + hi)) > 0.0 && poly_second(coeffs, e2) >= 0.0;
    if !is_max || !is_min {
        return Err(Error::NotBistable { found: 2, lo, hi });
    }
    CriticalPoints::new(e1, poly_eval(coeffs, e1), e2, poly_eval(coeffs, e2)).map_err(|_| Error::NotBistable {
        found: 2,
        lo,
        hi,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Shape {
    Trilinear(Trilinear),
    Polynomial5(Polynomial5),
}

/// Which law a profile uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileKind {
    Trilinear,
    Polynomial5,
}

/// A validated bi-stable force-displacement law, optionally with a linear
/// spring in series. Immutable after construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ProfileSpec", into = "ProfileSpec")]
pub struct ForceProfile {
    shape: Shape,
    series_spring: Option<f64>,
    /// Critical points of the composite element (total elongation).
    critical: CriticalPoints,
    lo: f64,
    hi: f64,
}

impl ForceProfile {
    /// Tri-linear law through the origin. All four parameters must be
    /// mutually consistent: `k0 * eps_max == f_max` and `ks` equal to the
    /// chord slope between the two corners.
    pub fn trilinear(k0: f64, ks: f64, k1: f64, critical: CriticalPoints) -> Result<Self> {
        critical.validate()?;
        if !(k0 > 0.0) || !(k1 > 0.0) || !(ks < 0.0) {
            return Err(Error::InvalidProfile(format!(
                "trilinear stiffnesses need k0 > 0, ks < 0, k1 > 0 (got {k0}, {ks}, {k1})"
            )));
        }
        let cp = critical;
        let scale = cp.f_max.abs().max(1.0);
        if (k0 * cp.eps_max - cp.f_max).abs() > CONTINUITY_TOL * scale {
            return Err(Error::InvalidProfile(format!(
                "phase-0 segment k0 * eps_max = {} does not meet f_max = {}",
                k0 * cp.eps_max,
                cp.f_max
            )));
        }
        let chord = (cp.f_min - cp.f_max) / (cp.eps_min - cp.eps_max);
        if (ks - chord).abs() > CONTINUITY_TOL * ks.abs().max(1.0) {
            return Err(Error::InvalidProfile(format!(
                "spinodal slope {ks} does not join the corners (chord slope {chord})"
            )));
        }
        Ok(ForceProfile {
            shape: Shape::Trilinear(Trilinear { k0, ks, k1, critical }),
            series_spring: None,
            critical,
            lo: f64::NEG_INFINITY,
            hi: f64::INFINITY,
        })
    }

    /// Degree-5 polynomial `sum c[j] * eps^j`. Without an explicit interval the
    /// default `[-2, eps_min + 10]` mm is used, with `eps_min` located by a
    /// scan upward from -2 mm.
    pub fn polynomial5(coeffs: [f64; 6], domain: Option<(f64, f64)>) -> Result<Self> {
        let (lo, hi) = match domain {
            Some(d) => d,
            None => default_polynomial_domain(&coeffs)?,
        };
        let critical = polynomial_critical_points(&coeffs, lo, hi)?;
        Ok(ForceProfile {
            shape: Shape::Polynomial5(Polynomial5 {
                coeffs,
                lo,
                hi,
                critical,
            }),
            series_spring: None,
            critical,
            lo,
            hi,
        })
    }

    /// Quintic through the origin with initial stiffness `k_initial` and
    /// stationary points at the given corners.
    pub fn polynomial_through_extrema(
        critical: CriticalPoints,
        k_initial: f64,
        domain: Option<(f64, f64)>,
    ) -> Result<Self> {
        critical.validate()?;
        let (e1, e2) = (critical.eps_max, critical.eps_min);
        let value_row = |x: f64| [1.0, x, x * x, x.powi(3), x.powi(4), x.powi(5)];
        let slope_row = |x: f64| [0.0, 1.0, 2.0 * x, 3.0 * x * x, 4.0 * x.powi(3), 5.0 * x.powi(4)];
        let rows = [
            value_row(0.0),
            slope_row(0.0),
            value_row(e1),
            slope_row(e1),
            value_row(e2),
            slope_row(e2),
        ];
        let a = Matrix6::from_fn(|i, j| rows[i][j]);
        let b = Vector6::new(0.0, k_initial, critical.f_max, 0.0, critical.f_min, 0.0);
        let sol = a
            .lu()
            .solve(&b)
            .ok_or_else(|| Error::InvalidProfile("singular extremum constraints".into()))?;
        let coeffs = [sol[0], sol[1], sol[2], sol[3], sol[4], sol[5]];
        let domain = domain.unwrap_or((DEFAULT_POLY_LO, e2 + DEFAULT_POLY_HEADROOM));
        ForceProfile::polynomial5(coeffs, Some(domain))
    }

    pub fn kind(&self) -> ProfileKind {
        match self.shape {
            Shape::Trilinear(_) => ProfileKind::Trilinear,
            Shape::Polynomial5(_) => ProfileKind::Polynomial5,
        }
    }

    /// True when every branch is a straight line (trilinear, with or without
    /// a series spring).
    pub fn is_piecewise_linear(&self) -> bool {
        matches!(self.shape, Shape::Trilinear(_))
    }

    pub fn series_spring(&self) -> Option<f64> {
        self.series_spring
    }

    /// The bi-stable element alone, with any series spring removed.
    pub fn without_series_spring(&self) -> ForceProfile {
        let base_cp = match &self.shape {
            Shape::Trilinear(t) => t.critical,
            Shape::Polynomial5(p) => p.critical,
        };
        let (lo, hi) = match &self.shape {
            Shape::Trilinear(_) => (f64::NEG_INFINITY, f64::INFINITY),
            Shape::Polynomial5(p) => (p.lo, p.hi),
        };
        ForceProfile {
            shape: self.shape,
            series_spring: None,
            critical: base_cp,
            lo,
            hi,
        }
    }

    pub fn critical_points(&self) -> CriticalPoints {
        self.critical
    }

    /// Working interval in total elongation. Unbounded for tri-linear laws.
    pub fn domain(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }

    pub fn contains(&self, eps: f64) -> bool {
        eps >= self.lo && eps <= self.hi
    }

    /// Polynomial coefficients of the bi-stable part, lowest order first.
    pub fn coefficients(&self) -> Option<[f64; 6]> {
        match &self.shape {
            Shape::Polynomial5(p) => Some(p.coeffs),
            Shape::Trilinear(_) => None,
        }
    }

    /// Segment stiffnesses `(k0, ks, k1)` of the composite element, for
    /// tri-linear laws.
    pub fn trilinear_stiffnesses(&self) -> Option<(f64, f64, f64)> {
        match &self.shape {
            Shape::Trilinear(t) => Some((self.series(t.k0), self.series(t.ks), self.series(t.k1))),
            Shape::Polynomial5(_) => None,
        }
    }

    fn series(&self, k: f64) -> f64 {
        match self.series_spring {
            Some(kl) => 1.0 / (1.0 / k + 1.0 / kl),
            None => k,
        }
    }

    pub fn phase_of(&self, eps: f64) -> Phase {
        if eps < self.critical.eps_max {
            Phase::Zero
        } else if eps > self.critical.eps_min {
            Phase::One
        } else {
            Phase::Spinodal
        }
    }

    /// Force at total elongation `eps`, checked against the working interval.
    pub fn force(&self, eps: f64) -> Result<f64> {
        if !self.contains(eps) {
            return Err(Error::OutOfDomain {
                eps,
                lo: self.lo,
                hi: self.hi,
            });
        }
        Ok(self.branch_force(self.phase_of(eps), eps))
    }

    /// Local stiffness `dF/deps` at `eps`, on the branch `phase_of(eps)`.
    pub fn stiffness(&self, eps: f64) -> f64 {
        self.branch_stiffness(self.phase_of(eps), eps)
    }

    /// Force on the branch carrying `phase`, extended past its corners for
    /// tri-linear laws. Polynomial laws ignore `phase`. No domain check.
    pub fn branch_force(&self, phase: Phase, eps: f64) -> f64 {
        match (&self.shape, self.series_spring) {
            (Shape::Trilinear(t), None) => {
                let (ea, fa, k) = t.segment(phase);
                fa + k * (eps - ea)
            }
            (Shape::Trilinear(t), Some(kl)) => {
                let (ea, fa, k) = t.segment(phase);
                (eps - ea + fa / k) / (1.0 / k + 1.0 / kl)
            }
            (Shape::Polynomial5(p), None) => poly_eval(&p.coeffs, eps),
            (Shape::Polynomial5(p), Some(kl)) => {
                let inner = composite_inner(p, kl, eps);
                poly_eval(&p.coeffs, inner)
            }
        }
    }

    /// Stiffness of the branch carrying `phase` at `eps`. No domain check.
    pub fn branch_stiffness(&self, phase: Phase, eps: f64) -> f64 {
        match (&self.shape, self.series_spring) {
            (Shape::Trilinear(t), _) => self.series(t.segment(phase).2),
            (Shape::Polynomial5(p), None) => poly_deriv(&p.coeffs, eps),
            (Shape::Polynomial5(p), Some(_)) => {
                let inner = composite_inner(p, self.series_spring.unwrap_or(f64::INFINITY), eps);
                self.series(poly_deriv(&p.coeffs, inner))
            }
        }
    }

    /// Closed force interval covered by the branch carrying `phase` within the
    /// working interval.
    pub fn branch_force_range(&self, phase: Phase) -> (f64, f64) {
        let cp = &self.critical;
        match (&self.shape, phase) {
            (_, Phase::Spinodal) => (cp.f_min, cp.f_max),
            (Shape::Trilinear(_), Phase::Zero) => (f64::NEG_INFINITY, cp.f_max),
            (Shape::Trilinear(_), Phase::One) => (cp.f_min, f64::INFINITY),
            (Shape::Polynomial5(p), Phase::Zero) => (poly_eval(&p.coeffs, p.lo), cp.f_max),
            (Shape::Polynomial5(p), Phase::One) => (cp.f_min, poly_eval(&p.coeffs, p.hi)),
        }
    }

    /// Total elongation at which the branch carrying `phase` has force
    /// `force`, or `None` when the branch does not reach that force.
    pub fn eps_on_branch(&self, phase: Phase, force: f64) -> Option<f64> {
        let (f_lo, f_hi) = self.branch_force_range(phase);
        if !(force >= f_lo && force <= f_hi) {
            return None;
        }
        let inner = match &self.shape {
            Shape::Trilinear(t) => {
                let (ea, fa, k) = t.segment(phase);
                ea + (force - fa) / k
            }
            Shape::Polynomial5(p) => p.invert_on_branch(phase, force)?,
        };
        Some(match self.series_spring {
            Some(kl) => inner + force / kl,
            None => inner,
        })
    }
}

/// Elongation of the bi-stable part of a polynomial element with a series
/// spring, given the total elongation. The map `x -> x + p(x)/kl` is
/// increasing (checked when the spring is attached), so a bracketed solve
/// is enough.
fn composite_inner(p: &Polynomial5, kl: f64, total: f64) -> f64 {
    let g = |x: f64| x + poly_eval(&p.coeffs, x) / kl - total;
    let span = (p.hi - p.lo).max(1.0);
    let (mut a, mut b) = (p.lo, p.hi);
    let mut widen = 0;
    while g(a) > 0.0 && widen < 60 {
        a -= span * (1 << widen.min(20)) as f64;
        widen += 1;
    }
    widen = 0;
    while g(b) < 0.0 && widen < 60 {
        b += span * (1 << widen.min(20)) as f64;
        widen += 1;
    }
    // Newton from the linearised guess, falling back to bisection.
    let mut x = total - poly_eval(&p.coeffs, total.clamp(p.lo, p.hi)) / kl;
    x = x.clamp(a, b);
    for _ in 0..50 {
        let gx = g(x);
        if gx == 0.0 {
            return x;
        }
        if gx > 0.0 {
            b = x;
        } else {
            a = x;
        }
        let dg = 1.0 + poly_deriv(&p.coeffs, x) / kl;
        let mut next = x - gx / dg;
        if !(next > a && next < b) || !next.is_finite() {
            next = 0.5 * (a + b);
        }
        if (next - x).abs() <= 1e-15 * x.abs().max(1.0) {
            return next;
        }
        x = next;
    }
    x
}

fn default_polynomial_domain(coeffs: &[f64; 6]) -> Result<(f64, f64)> {
    let lo = DEFAULT_POLY_LO;
    // Look for the first two stationary points above `lo` within a wide window.
    let search_hi = 1000.0;
    let stationary = roots::scan_roots(lo, search_hi, 400_000, |x| poly_deriv(coeffs, x), 1e-15);
    let interior: Vec<f64> = stationary.into_iter().filter(|&x| x > lo).collect();
    if interior.len() < 2 {
        return Err(Error::NotBistable {
            found: interior.len(),
            lo,
            hi: search_hi,
        });
    }
    Ok((lo, interior[1] + DEFAULT_POLY_HEADROOM))
}

/// Evaluates `F(eps)` with a domain check.
pub fn eval_force(profile: &ForceProfile, eps: f64) -> Result<f64> {
    profile.force(eps)
}

pub fn critical_points(profile: &ForceProfile) -> CriticalPoints {
    profile.critical_points()
}

pub fn phase_of(profile: &ForceProfile, eps: f64) -> Phase {
    profile.phase_of(eps)
}

/// Tri-linear law with `k0 = f_max / eps_max`, spinodal slope from the chord
/// between the corners, and the given phase-1 stiffness.
pub fn trilinear_from_critical(critical: CriticalPoints, k1: f64) -> Result<ForceProfile> {
    critical.validate()?;
    let k0 = critical.f_max / critical.eps_max;
    let ks = (critical.f_min - critical.f_max) / (critical.eps_min - critical.eps_max);
    ForceProfile::trilinear(k0, ks, k1, critical)
}

/// Connects a linear spring of stiffness `kl` (N/mm) in series with the
/// element. The composite keeps `f_max` and `f_min` and shifts the critical
/// displacements by `f/kl`. Springs softer than the steepest spinodal slope
/// would fold the composite curve back on itself and are rejected.
pub fn compose_series_spring(profile: &ForceProfile, kl: f64) -> Result<ForceProfile> {
    if !(kl > 0.0) || !kl.is_finite() {
        return Err(Error::SeriesSpring(format!("stiffness must be positive, got {kl}")));
    }
    let total_kl = match profile.series_spring {
        Some(existing) => 1.0 / (1.0 / existing + 1.0 / kl),
        None => kl,
    };
    let steepest = match &profile.shape {
        Shape::Trilinear(t) => -t.ks,
        Shape::Polynomial5(p) => steepest_spinodal_slope(p),
    };
    if total_kl <= steepest {
        return Err(Error::SeriesSpring(format!(
            "spring stiffness {total_kl} N/mm does not exceed the steepest spinodal slope {steepest} N/mm; the composite would snap back"
        )));
    }
    let base = profile.without_series_spring();
    let cp = base.critical;
    let critical = CriticalPoints {
        eps_max: cp.eps_max + cp.f_max / total_kl,
        f_max: cp.f_max,
        eps_min: cp.eps_min + cp.f_min / total_kl,
        f_min: cp.f_min,
    };
    let (lo, hi) = match &base.shape {
        Shape::Trilinear(_) => (f64::NEG_INFINITY, f64::INFINITY),
        Shape::Polynomial5(p) => (
            p.lo + poly_eval(&p.coeffs, p.lo) / total_kl,
            p.hi + poly_eval(&p.coeffs, p.hi) / total_kl,
        ),
    };
    Ok(ForceProfile {
        shape: base.shape,
        series_spring: Some(total_kl),
        critical,
        lo,
        hi,
    })
}

/// Magnitude of the most negative slope on the spinodal branch.
fn steepest_spinodal_slope(p: &Polynomial5) -> f64 {
    let (a, b) = (p.critical.eps_max, p.critical.eps_min);
    let n = 2000;
    let mut best = 0.0f64;
    let mut best_x = a;
    for k in 0..=n {
        let x = a + (b - a) * k as f64 / n as f64;
        let s = -poly_deriv(&p.coeffs, x);
        if s > best {
            best = s;
            best_x = x;
        }
    }
    let h = (b - a) / n as f64;
    let (l, r) = ((best_x - h).max(a), (best_x + h).min(b));
    if let Some(x) = roots::bisect(l, r, |x| poly_second(&p.coeffs, x), 200) {
        best = best.max(-poly_deriv(&p.coeffs, x));
    }
    best
}

/// Minimum number of samples accepted by [`fit_polynomial5`].
pub const MIN_FIT_SAMPLES: usize = 12;

/// Least-squares degree-5 fit of `(eps, force)` samples. The fit is done in
/// a centred and scaled variable and expanded back to monomial coefficients.
/// Without an explicit working interval the sample span is used.
pub fn fit_polynomial5(samples: &[(f64, f64)], domain: Option<(f64, f64)>) -> Result<ForceProfile> {
    if samples.len() < MIN_FIT_SAMPLES {
        return Err(Error::InsufficientSamples {
            got: samples.len(),
            need: MIN_FIT_SAMPLES,
        });
    }
    if samples.iter().any(|(e, f)| !e.is_finite() || !f.is_finite()) {
        return Err(Error::InvalidProfile("non-finite sample".into()));
    }
    let n = samples.len();
    let e_lo = samples.iter().map(|s| s.0).fold(f64::INFINITY, f64::min);
    let e_hi = samples.iter().map(|s| s.0).fold(f64::NEG_INFINITY, f64::max);
    let center = 0.5 * (e_lo + e_hi);
    let scale = (0.5 * (e_hi - e_lo)).max(f64::MIN_POSITIVE);
    let a = DMatrix::from_fn(n, 6, |i, j| ((samples[i].0 - center) / scale).powi(j as i32));
    let b = DVector::from_iterator(n, samples.iter().map(|s| s.1));
    let svd = a.svd(true, true);
    let s_max = svd.singular_values.max();
    let s_min = svd.singular_values.min();
    let condition = if s_min > 0.0 { s_max / s_min } else { f64::INFINITY };
    if !(condition < 1e12) {
        return Err(Error::RankDeficient { condition });
    }
    let scaled = svd.solve(&b, 0.0).map_err(|e| Error::InvalidProfile(e.to_string()))?;
    // p(eps) = sum_j b_j ((eps - m)/s)^j, expanded binomially.
    let mut coeffs = [0.0f64; 6];
    #[allow(clippy::needless_range_loop)]
    for j in 0..6 {
        let bj = scaled[j] / scale.powi(j as i32);
        let mut binom = 1.0;
        for i in 0..=j {
            if i > 0 {
                binom = binom * (j - i + 1) as f64 / i as f64;
            }
            coeffs[i] += bj * binom * (-center).powi((j - i) as i32);
        }
    }
    ForceProfile::polynomial5(coeffs, Some(domain.unwrap_or((e_lo, e_hi))))
}

/// Serialized form of a profile inside a chain config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProfileSpec {
    Trilinear {
        eps_max: f64,
        f_max: f64,
        eps_min: f64,
        f_min: f64,
        k1: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        k0: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        ks: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        series_spring: Option<f64>,
    },
    Polynomial5 {
        coefficients: [f64; 6],
        #[serde(default, skip_serializing_if = "Option::is_none")]
        domain: Option<[f64; 2]>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        series_spring: Option<f64>,
    },
}

impl TryFrom<ProfileSpec> for ForceProfile {
    type Error = Error;

    fn try_from(spec: ProfileSpec) -> Result<Self> {
        let (base, kl) = match spec {
            ProfileSpec::Trilinear {
                eps_max,
                f_max,
                eps_min,
                f_min,
                k1,
                k0,
                ks,
                series_spring,
            } => {
                let cp = CriticalPoints::new(eps_max, f_max, eps_min, f_min)?;
                let p = match (k0, ks) {
                    (None, None) => trilinear_from_critical(cp, k1)?,
                    (k0, ks) => ForceProfile::trilinear(
                        k0.unwrap_or(f_max / eps_max),
                        ks.unwrap_or((f_min - f_max) / (eps_min - eps_max)),
                        k1,
                        cp,
                    )?,
                };
                (p, series_spring)
            }
            ProfileSpec::Polynomial5 {
                coefficients,
                domain,
                series_spring,
            } => (
                ForceProfile::polynomial5(coefficients, domain.map(|d| (d[0], d[1])))?,
                series_spring,
            ),
        };
        match kl {
            Some(kl) => compose_series_spring(&base, kl),
            None => Ok(base),
        }
    }
}

impl From<ForceProfile> for ProfileSpec {
    fn from(p: ForceProfile) -> Self {
        match p.shape {
            Shape::Trilinear(t) => ProfileSpec::Trilinear {
                eps_max: t.critical.eps_max,
                f_max: t.critical.f_max,
                eps_min: t.critical.eps_min,
                f_min: t.critical.f_min,
                k1: t.k1,
                k0: Some(t.k0),
                ks: Some(t.ks),
                series_spring: p.series_spring,
            },
            Shape::Polynomial5(poly) => ProfileSpec::Polynomial5 {
                coefficients: poly.coeffs,
                domain: Some([poly.lo, poly.hi]),
                series_spring: p.series_spring,
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corners() -> CriticalPoints {
        CriticalPoints::new(5.0, 10.0, 9.0, 4.0).unwrap()
    }

    fn tri() -> ForceProfile {
        trilinear_from_critical(corners(), 2.0).unwrap()
    }

    /// Quintic with p'(x) = a (x-5)(x-9)((x-6)^2 + 4) and prescribed values at
    /// the stationary points, integrated by hand (independent of
    /// `polynomial_through_extrema`).
    fn prescribed_quintic() -> [f64; 6] {
        // (x-5)(x-9) = x^2 - 14x + 45 ; (x-6)^2 + 4 = x^2 - 12x + 40
        // product: x^4 - 26x^3 + (40 + 168 + 45)x^2 - (560 + 540)x + 1800
        let q = [1800.0, -1100.0, 253.0, -26.0, 1.0];
        let prim = |x: f64| {
            q[0] * x + q[1] * x * x / 2.0 + q[2] * x.powi(3) / 3.0 + q[3] * x.powi(4) / 4.0 + q[4] * x.powi(5) / 5.0
        };
        let a = (4.0 - 10.0) / (prim(9.0) - prim(5.0));
        let c0 = 10.0 - a * prim(5.0);
        [
            c0,
            a * q[0],
            a * q[1] / 2.0,
            a * q[2] / 3.0,
            a * q[3] / 4.0,
            a * q[4] / 5.0,
        ]
    }

    #[test]
    fn trilinear_values() {
        let p = ForceProfile::trilinear(1.0, -0.75, 1.0, CriticalPoints::new(5.0, 5.0, 9.0, 2.0).unwrap()).unwrap();
        assert_eq!(p.force(0.0).unwrap(), 0.0);
        assert_eq!(p.force(2.5).unwrap(), 2.5);
    }

    #[test]
    fn trilinear_from_critical_slopes() {
        let p = tri();
        let (k0, ks, k1) = p.trilinear_stiffnesses().unwrap();
        assert_eq!(k0, 2.0);
        assert_eq!(ks, -1.5);
        assert_eq!(k1, 2.0);
    }

    #[test]
    fn degenerate_corners_rejected() {
        assert!(CriticalPoints::new(5.0, 10.0, 9.0, 10.0).is_err());
        let bad = CriticalPoints {
            eps_max: 5.0,
            f_max: 10.0,
            eps_min: 9.0,
            f_min: 10.0,
        };
        assert!(trilinear_from_critical(bad, 2.0).is_err());
    }

    #[test]
    fn symmetric_corners_give_mirrored_spinodal() {
        // (f_max - f_min) / (eps_min - eps_max) = 2 = k0
        let cp = CriticalPoints::new(5.0, 10.0, 8.0, 4.0).unwrap();
        let (k0, ks, _) = trilinear_from_critical(cp, 1.0)
            .unwrap()
            .trilinear_stiffnesses()
            .unwrap();
        assert_eq!(ks, -k0);
    }

    #[test]
    fn inconsistent_trilinear_rejected() {
        assert!(ForceProfile::trilinear(3.0, -1.5, 2.0, corners()).is_err());
        assert!(ForceProfile::trilinear(2.0, -1.0, 2.0, corners()).is_err());
        assert!(ForceProfile::trilinear(2.0, -1.5, -2.0, corners()).is_err());
    }

    #[test]
    fn phase_labels() {
        let p = tri();
        assert_eq!(p.phase_of(0.0), Phase::Zero);
        assert_eq!(p.phase_of(7.0), Phase::Spinodal);
        assert_eq!(p.phase_of(5.0), Phase::Spinodal);
        assert_eq!(p.phase_of(9.0), Phase::Spinodal);
        assert_eq!(p.phase_of(9.0 + 1e-12), Phase::One);
    }

    #[test]
    fn quintic_with_prescribed_stationary_points() {
        let c = prescribed_quintic();
        let p = ForceProfile::polynomial5(c, Some((-2.0, 19.0))).unwrap();
        let cp = p.critical_points();
        assert!((cp.eps_max - 5.0).abs() < 1e-8, "{cp:?}");
        assert!((cp.f_max - 10.0).abs() < 1e-8, "{cp:?}");
        assert!((cp.eps_min - 9.0).abs() < 1e-8, "{cp:?}");
        assert!((cp.f_min - 4.0).abs() < 1e-8, "{cp:?}");
        assert!((p.force(cp.eps_max).unwrap() - cp.f_max).abs() < 1e-9);
    }

    #[test]
    fn default_polynomial_domain_brackets_extrema() {
        let p = ForceProfile::polynomial5(prescribed_quintic(), None).unwrap();
        let (lo, hi) = p.domain();
        assert_eq!(lo, -2.0);
        assert!((hi - 19.0).abs() < 1e-8);
    }

    #[test]
    fn monotone_polynomial_not_bistable() {
        let c = [0.0, 1.0, 0.0, 0.01, 0.0, 0.0];
        let err = ForceProfile::polynomial5(c, Some((-2.0, 20.0))).unwrap_err();
        assert!(matches!(err, Error::NotBistable { found: 0, .. }));
    }

    #[test]
    fn out_of_domain_is_error() {
        let p = ForceProfile::polynomial5(prescribed_quintic(), Some((-2.0, 19.0))).unwrap();
        assert!(matches!(p.force(25.0), Err(Error::OutOfDomain { .. })));
    }

    #[test]
    fn through_extrema_matches_hand_built() {
        let p = ForceProfile::polynomial_through_extrema(corners(), 3.0, None).unwrap();
        let cp = p.critical_points();
        assert!((cp.eps_max - 5.0).abs() < 1e-9);
        assert!((cp.f_min - 4.0).abs() < 1e-9);
        assert!(p.force(0.0).unwrap().abs() < 1e-12);
        assert!((p.stiffness(0.0) - 3.0).abs() < 1e-9);
    }

    #[test]
    fn fit_recovers_exact_quintic() {
        let c = prescribed_quintic();
        let samples: Vec<(f64, f64)> = (0..40)
            .map(|i| {
                let x = -1.0 + 17.0 * i as f64 / 39.0;
                (x, poly_eval(&c, x))
            })
            .collect();
        let fit = fit_polynomial5(&samples, Some((-2.0, 19.0))).unwrap();
        let got = fit.coefficients().unwrap();
        for (g, e) in got.iter().zip(c.iter()) {
            assert!(((g - e) / e).abs() < 1e-6, "{got:?} vs {c:?}");
        }
    }

    #[test]
    fn fit_of_noisy_samples_keeps_critical_forces() {
        let c = prescribed_quintic();
        let truth = ForceProfile::polynomial5(c, Some((-1.0, 16.0))).unwrap().critical_points();
        // Deterministic noise of up to 1% of the peak force.
        let samples: Vec<(f64, f64)> = (0..200)
            .map(|i| {
                let x = 12.0 * i as f64 / 199.0;
                let noise = 0.01 * truth.f_max * (12.9898 * i as f64).sin();
                (x, poly_eval(&c, x) + noise)
            })
            .collect();
        let cp = fit_polynomial5(&samples, None).unwrap().critical_points();
        assert!((cp.f_max / truth.f_max - 1.0).abs() < 0.05);
        assert!((cp.f_min / truth.f_min - 1.0).abs() < 0.05);
    }

    #[test]
    fn fit_needs_enough_samples() {
        let samples: Vec<(f64, f64)> = (0..5).map(|i| (i as f64, i as f64)).collect();
        assert!(matches!(
            fit_polynomial5(&samples, None),
            Err(Error::InsufficientSamples { got: 5, .. })
        ));
    }

    #[test]
    fn fit_rejects_repeated_abscissae() {
        let samples: Vec<(f64, f64)> = (0..20).map(|i| (1.0 + (i % 3) as f64, i as f64)).collect();
        assert!(matches!(
            fit_polynomial5(&samples, None),
            Err(Error::RankDeficient { .. })
        ));
    }

    #[test]
    fn series_spring_rigid_limit() {
        let p = tri();
        let q = compose_series_spring(&p, 1e9).unwrap();
        for k in 0..=120 {
            let e = -1.0 + 0.1 * k as f64;
            assert!((p.force(e).unwrap() - q.force(e).unwrap()).abs() < 1e-6);
        }
    }

    #[test]
    fn series_spring_halves_matched_stiffness() {
        let q = compose_series_spring(&tri(), 2.0).unwrap();
        assert!((q.stiffness(1.0) - 1.0).abs() < 1e-12);
        assert_eq!(q.critical_points().f_max, 10.0);
        assert_eq!(q.critical_points().f_min, 4.0);
        assert!((q.critical_points().eps_max - 10.0).abs() < 1e-12);
        assert!((q.critical_points().eps_min - 11.0).abs() < 1e-12);
    }

    #[test]
    fn series_spring_rejects_bad_stiffness() {
        assert!(compose_series_spring(&tri(), 0.0).is_err());
        assert!(compose_series_spring(&tri(), -1.0).is_err());
        // softer than |ks| = 1.5 folds the composite back
        assert!(compose_series_spring(&tri(), 1.0).is_err());
    }

    #[test]
    fn polynomial_series_spring_keeps_forces() {
        let p = ForceProfile::polynomial5(prescribed_quintic(), Some((-2.0, 19.0))).unwrap();
        let q = compose_series_spring(&p, 50.0).unwrap();
        let (cp, cq) = (p.critical_points(), q.critical_points());
        assert_eq!(cp.f_max, cq.f_max);
        assert_eq!(cp.f_min, cq.f_min);
        assert!((q.force(cq.eps_max).unwrap() - cq.f_max).abs() < 1e-9);
        assert!((q.force(cq.eps_min).unwrap() - cq.f_min).abs() < 1e-9);
    }

    #[test]
    fn spec_round_trip() {
        for p in [
            tri(),
            compose_series_spring(&tri(), 3.0).unwrap(),
            ForceProfile::polynomial5(prescribed_quintic(), Some((-2.0, 19.0))).unwrap(),
        ] {
            let json = serde_json::to_string(&p).unwrap();
            let back: ForceProfile = serde_json::from_str(&json).unwrap();
            assert_eq!(p, back, "{json}");
        }
    }

    #[test]
    fn minimal_trilinear_spec_parses() {
        let p: ForceProfile =
            serde_json::from_str(r#"{"kind":"trilinear","eps_max":5,"f_max":10,"eps_min":9,"f_min":4,"k1":2}"#)
                .unwrap();
        assert_eq!(p, tri());
    }
}
