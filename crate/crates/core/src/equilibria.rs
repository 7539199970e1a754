//! Equilibria at a prescribed total length, their stability, and the
//! equilibrium curves of two-element chains.
//!
//! At equilibrium every element carries the same force. A phase assignment
//! fixes which branch each element sits on; the remaining unknown is that
//! common force, set by the total length.

use itertools::Itertools;
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{build_damping_matrix, phase_string, ChainConfig};
use crate::error::{Error, Result};
use crate::profiles::Phase;
use crate::roots;

/// `|K_eq|` below this (N/mm) is reported as marginal.
pub const MARGINAL_K_EQ: f64 = 1e-6;
/// Relative cancellation in `sum 1/k_i` below this is reported as marginal.
pub const MARGINAL_COMPLIANCE_REL: f64 = 1e-9;
/// Restricted Jacobian eigenvalues with `|Re|` below this (1/s) are marginal.
pub const MARGINAL_EIGENVALUE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stability {
    Stable,
    Unstable,
    Marginal,
}

impl std::fmt::Display for Stability {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stability::Stable => "stable",
            Stability::Unstable => "unstable",
            Stability::Marginal => "marginal",
        })
    }
}

/// An equal-force state. The equivalent stiffness is kept as its inverse,
/// the total compliance `sum 1/k_i` (mm/N), which stays finite where
/// `K_eq` itself would diverge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumPoint {
    pub eps: Vec<f64>,
    pub force: f64,
    pub phases: Vec<Phase>,
    pub stability: Stability,
    pub compliance: f64,
}

impl EquilibriumPoint {
    pub fn length(&self) -> f64 {
        self.eps.iter().sum()
    }

    /// `(sum 1/k_i)^-1`; infinite with the sign of the compliance when that
    /// is exactly zero.
    pub fn k_eq(&self) -> f64 {
        1.0 / self.compliance
    }

    pub fn label(&self) -> String {
        phase_string(&self.phases)
    }
}

/// A run of consecutive branch points sharing one stability label, as a
/// closed interval of total length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilitySegment {
    pub l_start: f64,
    pub l_end: f64,
    pub stability: Stability,
}

/// Equilibria of one phase assignment, ordered by strictly increasing length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumBranch {
    pub phases: Vec<Phase>,
    pub points: Vec<EquilibriumPoint>,
    pub segments: Vec<StabilitySegment>,
}

impl EquilibriumBranch {
    pub fn label(&self) -> String {
        phase_string(&self.phases)
    }
}

/// Closed range of total lengths allowed by the elements' working intervals.
pub fn reachable_length_range(config: &ChainConfig) -> (f64, f64) {
    config
        .elements()
        .iter()
        .fold((0.0, 0.0), |(lo, hi), p| (lo + p.domain().0, hi + p.domain().1))
}

/// All `3^N` phase vectors in lexicographic order (`0 < s < 1`).
pub fn all_assignments(n: usize) -> Vec<Vec<Phase>> {
    (0..n)
        .map(|_| Phase::ALL.iter().copied())
        .multi_cartesian_product()
        .collect()
}

/// Straight line carrying `phase` as `(anchor_eps, anchor_force, stiffness)`.
fn branch_line(config: &ChainConfig, i: usize, phase: Phase) -> (f64, f64, f64) {
    let p = config.element(i);
    let cp = p.critical_points();
    let anchor = if phase == Phase::One { cp.eps_min } else { cp.eps_max };
    (anchor, p.branch_force(phase, anchor), p.branch_stiffness(phase, anchor))
}

fn point_from_force(config: &ChainConfig, phases: &[Phase], force: f64, eps: Vec<f64>) -> EquilibriumPoint {
    let mut pt = EquilibriumPoint {
        eps,
        force,
        phases: phases.to_vec(),
        stability: Stability::Marginal,
        compliance: 0.0,
    };
    pt.compliance = compliance(config, &pt);
    pt.stability = classify_stability(config, &pt);
    pt
}

fn solve_linear(config: &ChainConfig, phases: &[Phase], length: f64) -> Option<EquilibriumPoint> {
    let lines: Vec<_> = (0..config.len()).map(|i| branch_line(config, i, phases[i])).collect();
    let comp: f64 = lines.iter().map(|l| 1.0 / l.2).sum();
    if comp == 0.0 {
        return None;
    }
    let offset: f64 = lines.iter().map(|(e, f, k)| e - f / k).sum();
    let force = (length - offset) / comp;
    let eps: Vec<f64> = lines.iter().map(|(e, f, k)| e + (force - f) / k).collect();
    let ok = eps
        .iter()
        .enumerate()
        .all(|(i, &x)| config.element(i).phase_of(x) == phases[i] && config.element(i).contains(x));
    ok.then(|| point_from_force(config, phases, force, eps))
}

fn branch_range(config: &ChainConfig, phases: &[Phase]) -> Option<(f64, f64)> {
    let (lo, hi) = phases
        .iter()
        .enumerate()
        .map(|(i, &ph)| config.element(i).branch_force_range(ph))
        .fold((f64::NEG_INFINITY, f64::INFINITY), |(a, b), (c, d)| {
            (a.max(c), b.min(d))
        });
    (lo <= hi).then_some((lo, hi))
}

fn eps_at_force(config: &ChainConfig, phases: &[Phase], force: f64) -> Option<Vec<f64>> {
    phases
        .iter()
        .enumerate()
        .map(|(i, &ph)| config.element(i).eps_on_branch(ph, force))
        .collect()
}

fn solve_scan(config: &ChainConfig, phases: &[Phase], length: f64) -> Vec<EquilibriumPoint> {
    let Some((lo, hi)) = branch_range(config, phases) else {
        return Vec::new();
    };
    let residual = |f: f64| eps_at_force(config, phases, f).map_or(f64::NAN, |e| e.iter().sum::<f64>() - length);
    let scale = lo.abs().max(hi.abs()).max(1.0);
    roots::scan_roots(lo, hi, 600, residual, 1e-15 * scale)
        .into_iter()
        .filter_map(|f| {
            let eps = eps_at_force(config, phases, f)?;
            let ok = eps
                .iter()
                .enumerate()
                .all(|(i, &x)| config.element(i).phase_of(x) == phases[i]);
            ok.then(|| point_from_force(config, phases, f, eps))
        })
        .collect()
}

/// Every equal-force state with total length `length`, over all phase
/// assignments. Empty outside [`reachable_length_range`].
pub fn enumerate_equilibria(config: &ChainConfig, length: f64) -> Vec<EquilibriumPoint> {
    let (lo, hi) = reachable_length_range(config);
    if !(length >= lo && length <= hi) {
        return Vec::new();
    }
    let linear = config.elements().iter().all(|p| p.is_piecewise_linear());
    all_assignments(config.len())
        .par_iter()
        .map(|phases| {
            if linear {
                solve_linear(config, phases, length).into_iter().collect()
            } else {
                solve_scan(config, phases, length)
            }
        })
        .collect::<Vec<Vec<_>>>()
        .into_iter()
        .flatten()
        .collect()
}

/// The equilibrium with the given phases at `length`, if any. When several
/// exist the stable one with the smallest force is returned.
pub fn equilibrium_with_phases(config: &ChainConfig, phases: &[Phase], length: f64) -> Result<EquilibriumPoint> {
    let found = if config.elements().iter().all(|p| p.is_piecewise_linear()) {
        solve_linear(config, phases, length).into_iter().collect()
    } else {
        solve_scan(config, phases, length)
    };
    found
        .into_iter()
        .filter(|p| p.stability == Stability::Stable)
        .min_by(|a, b| a.force.total_cmp(&b.force))
        .ok_or_else(|| Error::NoEquilibrium {
            state: phase_string(phases),
            length,
        })
}

fn local_stiffness(config: &ChainConfig, point: &EquilibriumPoint) -> Vec<f64> {
    point
        .eps
        .iter()
        .enumerate()
        .map(|(i, &e)| config.element(i).branch_stiffness(point.phases[i], e))
        .collect()
}

fn compliance(config: &ChainConfig, point: &EquilibriumPoint) -> f64 {
    local_stiffness(config, point).iter().map(|k| 1.0 / k).sum()
}

/// Stability from the equivalent-stiffness rule: binary states are stable,
/// two or more spinodal elements are unstable, and a single spinodal
/// element is stable exactly when `(sum 1/k_i)^-1 < 0`.
pub fn classify_stability(config: &ChainConfig, point: &EquilibriumPoint) -> Stability {
    let spinodal = point.phases.iter().filter(|&&p| p == Phase::Spinodal).count();
    match spinodal {
        0 => Stability::Stable,
        1 => {
            let k = local_stiffness(config, point);
            if k.contains(&0.0) {
                return Stability::Marginal;
            }
            let comp: f64 = k.iter().map(|k| 1.0 / k).sum();
            let magnitude: f64 = k.iter().map(|k| 1.0 / k.abs()).sum();
            let k_eq = 1.0 / comp;
            if comp.abs() <= MARGINAL_COMPLIANCE_REL * magnitude || k_eq.abs() < MARGINAL_K_EQ {
                Stability::Marginal
            } else if k_eq < 0.0 {
                Stability::Stable
            } else {
                Stability::Unstable
            }
        }
        _ => Stability::Unstable,
    }
}

/// Orthonormal basis of the hyperplane `sum x_i = 0`, as columns.
fn hyperplane_basis(n: usize) -> DMatrix<f64> {
    // Helmert-style basis: column j is (1, ..., 1, -j, 0, ...) normalised.
    DMatrix::from_fn(n, n - 1, |i, j| {
        let j1 = j + 1;
        let norm = ((j1 * (j1 + 1)) as f64).sqrt();
        if i < j1 {
            1.0 / norm
        } else if i == j1 {
            -(j1 as f64) / norm
        } else {
            0.0
        }
    })
}

/// Eigenvalues (real parts) of the linearised dynamics `W K` restricted to
/// constant total length.
pub fn restricted_jacobian_spectrum(config: &ChainConfig, point: &EquilibriumPoint) -> Vec<f64> {
    let n = config.len();
    if n < 2 {
        return Vec::new();
    }
    let w = build_damping_matrix(n, config.c());
    let k = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(local_stiffness(config, point)));
    let q = hyperplane_basis(n);
    let j = q.transpose() * w * k * &q;
    let mut re: Vec<f64> = j.complex_eigenvalues().iter().map(|z| z.re).collect();
    re.sort_by(f64::total_cmp);
    re
}

/// Independent stability check from the restricted Jacobian spectrum. A
/// single element has no free node and is stable by convention.
pub fn verify_stability_by_jacobian(config: &ChainConfig, point: &EquilibriumPoint) -> Stability {
    let spectrum = restricted_jacobian_spectrum(config, point);
    if spectrum
        .iter()
        .any(|re| re.abs() <= MARGINAL_EIGENVALUE || !re.is_finite())
    {
        Stability::Marginal
    } else if spectrum.iter().all(|&re| re < 0.0) {
        Stability::Stable
    } else {
        Stability::Unstable
    }
}

fn segments_of(points: &[EquilibriumPoint]) -> Vec<StabilitySegment> {
    let mut out: Vec<StabilitySegment> = Vec::new();
    for p in points {
        let l = p.length();
        match out.last_mut() {
            Some(s) if s.stability == p.stability => s.l_end = l,
            _ => out.push(StabilitySegment {
                l_start: l,
                l_end: l,
                stability: p.stability,
            }),
        }
    }
    out
}

/// Equilibrium curves of a two-element chain in the `(eps_1, eps_2)` plane,
/// one or more branches per phase assignment, traced over the common force
/// with `resolution` samples each.
///
/// Force ranges are clipped to `[F_lo, 1.1 * max F_max]` with `F_lo` the
/// smaller of zero and the lowest force in the working intervals. Where the
/// total length folds back along the force parameter the branch is split so
/// that each piece is ordered by increasing length.
pub fn equilibrium_curves_2d(config: &ChainConfig, resolution: usize) -> Result<Vec<EquilibriumBranch>> {
    if config.len() != 2 {
        return Err(Error::NotTwoElements(config.len()));
    }
    let resolution = resolution.max(2);
    let f_hi = 1.1
        * config
            .elements()
            .iter()
            .map(|p| p.critical_points().f_max)
            .fold(f64::NEG_INFINITY, f64::max);
    let f_lo = config
        .elements()
        .iter()
        .map(|p| p.branch_force_range(Phase::Zero).0)
        .fold(0.0f64, |a, b| if b.is_finite() { a.min(b) } else { a });
    let mut out = Vec::new();
    for phases in all_assignments(2) {
        let Some((lo, hi)) = branch_range(config, &phases) else {
            continue;
        };
        let (lo, hi) = (lo.max(f_lo), hi.min(f_hi));
        if !(lo < hi) {
            continue;
        }
        let pts: Vec<EquilibriumPoint> = (0..resolution)
            .filter_map(|j| {
                let f = lo + (hi - lo) * j as f64 / (resolution - 1) as f64;
                eps_at_force(config, &phases, f).map(|eps| point_from_force(config, &phases, f, eps))
            })
            .collect();
        let mut pieces: Vec<Vec<EquilibriumPoint>> = Vec::new();
        let mut dir = 0.0f64;
        for p in pts {
            let split = match pieces.last().and_then(|v| v.last()) {
                Some(prev) => {
                    let d = (p.length() - prev.length()).signum();
                    let turn = dir != 0.0 && d != dir;
                    if !turn {
                        dir = d;
                    }
                    turn
                }
                None => true,
            };
            if split {
                dir = 0.0;
                pieces.push(vec![p]);
            } else {
                pieces.last_mut().expect("piece exists").push(p);
            }
        }
        for mut piece in pieces {
            piece.dedup_by(|a, b| a.length() == b.length());
            if piece.len() >= 2 && piece[0].length() > piece[piece.len() - 1].length() {
                piece.reverse();
            }
            let segments = segments_of(&piece);
            out.push(EquilibriumBranch {
                phases: phases.clone(),
                points: piece,
                segments,
            });
        }
    }
    Ok(out)
}

/// Whether the one-`s` state `phases` has a stable equilibrium anywhere
/// along its branch, checked at `samples` forces across the branch's range.
pub fn has_stable_equilibrium(config: &ChainConfig, phases: &[Phase], samples: usize) -> bool {
    let Some((lo, hi)) = branch_range(config, phases) else {
        return false;
    };
    let samples = samples.max(3);
    (1..samples - 1).any(|j| {
        let f = lo + (hi - lo) * j as f64 / (samples - 1) as f64;
        eps_at_force(config, phases, f)
            .is_some_and(|eps| point_from_force(config, phases, f, eps).stability == Stability::Stable)
    })
}

/// True when every intermediate state (exactly one `s`) has a stable
/// equilibrium for some total length.
pub fn intermediates_stable(config: &ChainConfig) -> bool {
    all_assignments(config.len())
        .into_iter()
        .filter(|ph| ph.iter().filter(|&&p| p == Phase::Spinodal).count() == 1)
        .all(|ph| has_stable_equilibrium(config, &ph, 64))
}

/// State and trajectory counts for an `N`-element chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateCounts {
    pub binary: u128,
    pub intermediate: u128,
    pub total_stable: u128,
    pub complete_cycles: u128,
}

/// Largest `N` for which every count fits in a `u128`.
pub const MAX_COUNT_N: usize = 20;

pub fn count_states(n: usize, intermediates_stable: bool) -> Result<StateCounts> {
    if n == 0 {
        return Err(Error::InvalidConfig(vec!["N must be at least 1".into()]));
    }
    if n > MAX_COUNT_N {
        return Err(Error::TooLarge(n));
    }
    let binary = 1u128 << n;
    let intermediate = n as u128 * (1u128 << (n - 1));
    let fact: u128 = (1..=n as u128).product();
    Ok(StateCounts {
        binary,
        intermediate,
        total_stable: if intermediates_stable {
            binary + intermediate
        } else {
            binary
        },
        complete_cycles: fact * fact,
    })
}

/// Phase vectors counted as stable states: all binary vectors, plus those
/// with exactly one `s` when intermediates are stable.
pub fn stable_state_labels(n: usize, intermediates_stable: bool) -> Vec<Vec<Phase>> {
    all_assignments(n)
        .into_iter()
        .filter(|ph| {
            let s = ph.iter().filter(|&&p| p == Phase::Spinodal).count();
            s == 0 || (intermediates_stable && s == 1)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::profiles::{CriticalPoints, ForceProfile};

    fn tri(k0: f64, ks: f64, k1: f64) -> ForceProfile {
        let f_max = 4.0 * k0;
        let f_min = f_max + ks * 2.0;
        let cp = CriticalPoints::new(4.0, f_max, 6.0, f_min).unwrap();
        ForceProfile::trilinear(k0, ks, k1, cp).unwrap()
    }

    fn chain(p: &[ForceProfile]) -> ChainConfig {
        ChainConfig::new(p.to_vec(), 0.015, "t").unwrap()
    }

    fn one_s_point(cfg: &ChainConfig, phases: &[Phase]) -> EquilibriumPoint {
        let f = 0.5 * (cfg.element(0).critical_points().f_max + cfg.element(0).critical_points().f_min);
        let eps = eps_at_force(cfg, phases, f).unwrap();
        point_from_force(cfg, phases, f, eps)
    }

    #[test]
    fn single_element_below_corner() {
        let cfg = chain(&[tri(2.0, -1.0, 2.0)]);
        let eq = enumerate_equilibria(&cfg, 3.0);
        assert_eq!(eq.len(), 1);
        assert_eq!(eq[0].phases, vec![Phase::Zero]);
        assert_eq!(eq[0].stability, Stability::Stable);
    }

    #[test]
    fn identical_pair_sweep() {
        let p = tri(2.0, -1.0, 2.0);
        let cfg = chain(&[p.clone(), p]);
        let mut seen = std::collections::BTreeSet::new();
        for j in 0..=160 {
            let l = 0.1 * j as f64;
            for e in enumerate_equilibria(&cfg, l) {
                let s = e.phases.iter().filter(|&&p| p == Phase::Spinodal).count();
                let expect = if s < 2 { Stability::Stable } else { Stability::Unstable };
                assert_eq!(e.stability, expect, "{} at {l}", e.label());
                for i in 0..2 {
                    assert!((cfg.element(i).force(e.eps[i]).unwrap() - e.force).abs() < 1e-9);
                }
                assert!((e.length() - l).abs() < 1e-9);
                seen.insert(e.label());
            }
        }
        assert_eq!(seen.len(), 9, "{seen:?}");
    }

    #[test]
    fn stiffness_rule_examples() {
        let cfg = chain(&[tri(2.0, -1.0, 2.0), tri(2.0, -1.0, 2.0)]);
        let pt = one_s_point(&cfg, &[Phase::Zero, Phase::Spinodal]);
        assert_eq!(classify_stability(&cfg, &pt), Stability::Stable);
        assert_eq!(verify_stability_by_jacobian(&cfg, &pt), Stability::Stable);

        let cfg = chain(&[tri(1.0, -2.0, 1.0), tri(1.0, -2.0, 1.0)]);
        let pt = one_s_point(&cfg, &[Phase::Spinodal, Phase::Zero]);
        assert_eq!(classify_stability(&cfg, &pt), Stability::Unstable);
        assert_eq!(verify_stability_by_jacobian(&cfg, &pt), Stability::Unstable);
    }

    #[test]
    fn single_element_jacobian_convention() {
        let cfg = chain(&[tri(2.0, -1.0, 2.0)]);
        let pt = one_s_point(&cfg, &[Phase::Spinodal]);
        assert_eq!(verify_stability_by_jacobian(&cfg, &pt), Stability::Stable);
    }

    #[test]
    fn basis_is_orthonormal_and_sums_to_zero() {
        for n in 2..7 {
            let q = hyperplane_basis(n);
            let g = q.transpose() * &q;
            for i in 0..n - 1 {
                assert!((q.column(i).sum()).abs() < 1e-14);
                for j in 0..n - 1 {
                    let e = if i == j { 1.0 } else { 0.0 };
                    assert!((g[(i, j)] - e).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn counts() {
        let c = count_states(3, true).unwrap();
        assert_eq!(
            (c.binary, c.intermediate, c.total_stable, c.complete_cycles),
            (8, 12, 20, 36)
        );
        let c = count_states(4, true).unwrap();
        assert_eq!(
            (c.binary, c.intermediate, c.total_stable, c.complete_cycles),
            (16, 32, 48, 576)
        );
        let c = count_states(1, true).unwrap();
        assert_eq!(
            (c.binary, c.intermediate, c.total_stable, c.complete_cycles),
            (2, 1, 3, 1)
        );
        assert_eq!(count_states(3, false).unwrap().total_stable, 8);
        assert!(count_states(0, true).is_err());
        assert!(count_states(21, true).is_err());
        assert!(count_states(20, true).is_ok());
    }

    #[test]
    fn stable_labels_match_counts() {
        for n in 1..=6 {
            for flag in [true, false] {
                let c = count_states(n, flag).unwrap();
                assert_eq!(stable_state_labels(n, flag).len() as u128, c.total_stable);
            }
        }
    }

    #[test]
    fn intermediate_detection() {
        let stable = chain(&[tri(2.0, -1.0, 2.0), tri(2.2, -1.0, 2.2)]);
        assert!(intermediates_stable(&stable));
        let unstable = chain(&[tri(1.0, -2.0, 1.0), tri(1.1, -2.0, 1.1)]);
        assert!(!intermediates_stable(&unstable));
    }

    #[test]
    fn curves_need_two_elements() {
        let cfg = chain(&[tri(2.0, -1.0, 2.0)]);
        assert!(matches!(equilibrium_curves_2d(&cfg, 10), Err(Error::NotTwoElements(1))));
    }

    #[test]
    fn curves_sorted_by_length() {
        let cfg = chain(&[tri(2.0, -1.0, 2.0), tri(2.2, -1.0, 2.0)]);
        let br = equilibrium_curves_2d(&cfg, 50).unwrap();
        assert!(br.len() >= 9);
        for b in &br {
            for w in b.points.windows(2) {
                assert!(w[1].length() > w[0].length());
            }
        }
    }
}
