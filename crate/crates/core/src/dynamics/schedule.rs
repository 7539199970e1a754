//! Piecewise-constant rate schedules and the event-driven integration loop.

use serde::{Deserialize, Serialize};

use super::integrator::{step_factor, Dense, Dopri5};
use super::{apply_w, ChainConfig, ChainState};
use crate::error::{Error, Result};
use crate::profiles::Phase;

/// When a schedule segment ends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StopCondition {
    /// Run for a fixed time (s).
    Duration { seconds: f64 },
    /// Run until the total length reaches `target` (mm).
    Length { target: f64 },
    /// Run until a phase change matching the filters, or until `timeout` s.
    /// `element` is 1-based; `None` matches any element or phase.
    Transition {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        element: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        to_phase: Option<Phase>,
        timeout: f64,
    },
    /// Run until `max |d(eps)/dt| < threshold` (mm/s), or until `timeout` s.
    Settled { threshold: f64, timeout: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    /// Input rate in mm/s.
    pub v: f64,
    pub stop: StopCondition,
}

impl Segment {
    pub fn new(v: f64, stop: StopCondition) -> Self {
        Segment { v, stop }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RateSchedule {
    pub segments: Vec<Segment>,
}

impl RateSchedule {
    pub fn new(segments: Vec<Segment>) -> Self {
        RateSchedule { segments }
    }

    /// One segment at rate `v` for `seconds`.
    pub fn constant(v: f64, seconds: f64) -> Self {
        RateSchedule::new(vec![Segment::new(v, StopCondition::Duration { seconds })])
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.segments.is_empty() {
            return Err(Error::InvalidSchedule("schedule has no segments".into()));
        }
        for (i, s) in self.segments.iter().enumerate() {
            let bad = |msg: String| Err(Error::InvalidSchedule(format!("segment {}: {msg}", i + 1)));
            if !s.v.is_finite() {
                return bad(format!("non-finite rate {}", s.v));
            }
            match s.stop {
                StopCondition::Duration { seconds } if !(seconds > 0.0 && seconds.is_finite()) => {
                    return bad(format!("duration must be positive, got {seconds}"));
                }
                StopCondition::Length { target } if !target.is_finite() => {
                    return bad(format!("non-finite length target {target}"));
                }
                StopCondition::Length { .. } if s.v == 0.0 => {
                    return bad("a length target needs a nonzero rate".into());
                }
                StopCondition::Transition { timeout, element, .. } => {
                    if !(timeout > 0.0 && timeout.is_finite()) {
                        return bad(format!("timeout must be positive, got {timeout}"));
                    }
                    if let Some(e) = element {
                        if e == 0 || e > n {
                            return bad(format!("element {e} outside 1..={n}"));
                        }
                    }
                }
                StopCondition::Settled { threshold, timeout } => {
                    if !(timeout > 0.0 && timeout.is_finite()) {
                        return bad(format!("timeout must be positive, got {timeout}"));
                    }
                    if !(threshold > 0.0) {
                        return bad(format!("threshold must be positive, got {threshold}"));
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// A detected phase change. `element` and the entries of `tie` are 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionEvent {
    pub t: f64,
    pub element: usize,
    pub from_phase: Phase,
    pub to_phase: Phase,
    pub eps_snapshot: Vec<f64>,
    /// Input rate at the event (mm/s).
    pub v: f64,
    /// Index of the schedule segment that produced the event (0-based).
    pub segment: usize,
    /// Other elements that crossed within the event tolerance of this one.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tie: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub t: f64,
    pub eps: Vec<f64>,
    pub phases: Vec<Phase>,
    pub v: f64,
    pub length: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    DurationElapsed,
    LengthReached,
    Transition,
    Settled,
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentOutcome {
    pub index: usize,
    pub v: f64,
    pub t_start: f64,
    pub t_end: f64,
    pub reason: StopReason,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub samples: Vec<Sample>,
    pub events: Vec<TransitionEvent>,
    pub segments: Vec<SegmentOutcome>,
    pub final_state: ChainState,
    pub steps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IntegrateOptions {
    pub rtol: f64,
    pub atol: f64,
    /// Distance (mm) within which simultaneous crossings count as a tie.
    pub event_tol: f64,
    /// Output spacing in s; `None` records every accepted step.
    pub sample_dt: Option<f64>,
    /// Set to false to keep only events and segment outcomes.
    pub record_samples: bool,
    pub max_steps: usize,
}

impl Default for IntegrateOptions {
    fn default() -> Self {
        IntegrateOptions {
            rtol: 1e-9,
            atol: 1e-11,
            event_tol: 1e-8,
            sample_dt: None,
            record_samples: true,
            max_steps: 20_000_000,
        }
    }
}

impl IntegrateOptions {
    pub fn without_samples() -> Self {
        IntegrateOptions {
            record_samples: false,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut p = Vec::new();
        if !(self.rtol > 0.0) {
            p.push(format!("rtol must be positive, got {}", self.rtol));
        }
        if !(self.atol > 0.0) {
            p.push(format!("atol must be positive, got {}", self.atol));
        }
        if !(self.event_tol > 0.0) {
            p.push(format!("event_tol must be positive, got {}", self.event_tol));
        }
        if let Some(dt) = self.sample_dt {
            if !(dt > 0.0) {
                p.push(format!("sample_dt must be positive, got {dt}"));
            }
        }
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(p))
        }
    }
}

/// Points per step at which phases are checked before refining a crossing.
const CHECKPOINTS: usize = 8;

struct Rhs<'a> {
    config: &'a ChainConfig,
    forces: Vec<f64>,
}

impl Rhs<'_> {
    fn eval(&mut self, labels: &[Phase], v: f64, y: &[f64], out: &mut [f64]) {
        for (i, p) in self.config.elements().iter().enumerate() {
            self.forces[i] = p.branch_force(labels[i], y[i]);
        }
        apply_w(&self.forces, self.config.c(), out);
        out[out.len() - 1] += v;
    }
}

/// Corner crossed when an element labelled `from` is found in phase `to`.
fn crossed_corner(config: &ChainConfig, i: usize, from: Phase, to: Phase) -> f64 {
    let cp = config.element(i).critical_points();
    match (from, to) {
        (Phase::Zero, _) | (_, Phase::Zero) => cp.eps_max,
        _ => cp.eps_min,
    }
}

/// First normalised time in `(0, 1]` at which each element leaves its label,
/// as `(theta, element)` pairs.
fn crossings(config: &ChainConfig, labels: &[Phase], dense: &Dense) -> Vec<(f64, usize)> {
    let mut out = Vec::new();
    for (i, p) in config.elements().iter().enumerate() {
        let differs = |th: f64| p.phase_of(dense.component(i, th)) != labels[i];
        let mut prev = 0.0;
        for k in 1..=CHECKPOINTS {
            let th = k as f64 / CHECKPOINTS as f64;
            if differs(th) {
                let (mut a, mut b) = (prev, th);
                loop {
                    let mid = 0.5 * (a + b);
                    if mid <= a || mid >= b {
                        break;
                    }
                    if differs(mid) {
                        b = mid;
                    } else {
                        a = mid;
                    }
                }
                out.push((b, i));
                break;
            }
            prev = th;
        }
    }
    out.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
    out
}

/// Picks the event time among the crossings: the earliest one plus any later
/// ones close enough that every member stays within `event_tol` of its corner.
/// Returns `theta` of the event and the members (0-based).
fn resolve_tie(
    config: &ChainConfig,
    labels: &[Phase],
    dense: &Dense,
    cands: &[(f64, usize)],
    event_tol: f64,
) -> (f64, Vec<usize>) {
    let corner = |theta: f64, i: usize| {
        let to = config.element(i).phase_of(dense.component(i, theta));
        crossed_corner(config, i, labels[i], to)
    };
    let mut members = vec![cands[0].1];
    let mut corners = vec![corner(cands[0].0, cands[0].1)];
    let mut theta = cands[0].0;
    for &(th, i) in &cands[1..] {
        let ci = corner(th, i);
        let ok = members
            .iter()
            .zip(&corners)
            .chain(std::iter::once((&i, &ci)))
            .all(|(&m, &cm)| (dense.component(m, th) - cm).abs() <= event_tol);
        if !ok {
            break;
        }
        members.push(i);
        corners.push(ci);
        theta = th;
    }
    members.sort_unstable();
    (theta, members)
}

fn push_sample(samples: &mut Vec<Sample>, config: &ChainConfig, t: f64, eps: &[f64], v: f64) {
    if let Some(last) = samples.last() {
        if last.t == t && last.v == v {
            return;
        }
    }
    samples.push(Sample {
        t,
        eps: eps.to_vec(),
        phases: config.phases_of(eps),
        v,
        length: eps.iter().sum(),
    });
}

fn max_abs(x: &[f64]) -> f64 {
    x.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// Integrates the chain from `initial` under `schedule`.
///
/// Forces are evaluated on each element's current phase branch, so the right
/// hand side is smooth within a step. After every accepted step the dense
/// output is checked for phase changes; the earliest crossing is refined by
/// bisection, the step is cut there, phases are relabelled and stepping
/// restarts.
pub fn integrate(
    config: &ChainConfig,
    initial: &ChainState,
    schedule: &RateSchedule,
    opts: &IntegrateOptions,
) -> Result<Trajectory> {
    opts.validate()?;
    initial.validate(config)?;
    schedule.validate(config.len())?;

    let n = config.len();
    let mut rhs = Rhs {
        config,
        forces: vec![0.0; n],
    };
    let mut st = Dopri5::new(n, opts.rtol, opts.atol);
    let mut t = initial.t;
    let mut y = initial.eps.clone();
    let mut labels = initial.phases.clone();
    let mut f0 = vec![0.0; n];
    let (mut y1, mut f1) = (vec![0.0; n], vec![0.0; n]);
    let mut buf = vec![0.0; n];

    let mut samples = Vec::new();
    let mut events = Vec::new();
    let mut outcomes = Vec::new();
    let mut steps = 0usize;
    let mut h_carry: Option<f64> = None;

    if opts.record_samples {
        push_sample(&mut samples, config, t, &y, schedule.segments[0].v);
    }
    let mut next_sample = opts.sample_dt.map(|dt| t + dt);

    for (si, seg) in schedule.segments.iter().enumerate() {
        let v = seg.v;
        let t_start = t;
        let length_now: f64 = y.iter().sum();
        let (t_end, end_reason) = match seg.stop {
            StopCondition::Duration { seconds } => (t + seconds, StopReason::DurationElapsed),
            StopCondition::Length { target } => {
                let dt = (target - length_now) / v;
                if dt < 0.0 {
                    return Err(Error::InvalidSchedule(format!(
                        "segment {}: length target {target} mm is behind the current length {length_now} mm at v = {v} mm/s",
                        si + 1
                    )));
                }
                (t + dt, StopReason::LengthReached)
            }
            StopCondition::Transition { timeout, .. } | StopCondition::Settled { timeout, .. } => {
                (t + timeout, StopReason::Timeout)
            }
        };

        let mut f = |_t: f64, yy: &[f64], out: &mut [f64], lab: &[Phase]| rhs.eval(lab, v, yy, out);
        f(t, &y, &mut f0, &labels);

        let settle_threshold = match seg.stop {
            StopCondition::Settled { threshold, .. } => Some(threshold),
            _ => None,
        };
        let mut reason = None;
        if settle_threshold.is_some_and(|thr| max_abs(&f0) < thr) {
            reason = Some(StopReason::Settled);
        }
        if t >= t_end {
            reason = reason.or(Some(end_reason));
        }

        let mut h = match h_carry {
            Some(h) => h,
            None => {
                let span = (t_end - t).max(1e-12);
                let lab = labels.clone();
                let mut g = |tt: f64, yy: &[f64], out: &mut [f64]| f(tt, yy, out, &lab);
                st.initial_step(&mut g, t, &y, &f0, span)
            }
        };

        while reason.is_none() {
            if steps >= opts.max_steps {
                return Err(Error::StepBudget(opts.max_steps));
            }
            let remaining = t_end - t;
            let last = h >= remaining;
            let h_try = if last { remaining } else { h };
            let attempt = {
                let lab = labels.clone();
                let mut g = |tt: f64, yy: &[f64], out: &mut [f64]| f(tt, yy, out, &lab);
                st.attempt(&mut g, t, &y, &f0, h_try, &mut y1, &mut f1)
            };
            let err = if y1.iter().all(|v| v.is_finite()) {
                attempt.err
            } else {
                f64::INFINITY
            };
            if !(err <= 1.0) {
                h = h_try * step_factor(err);
                if h < 1e-13 * t.abs().max(1.0) {
                    return Err(Error::StepSizeCollapse { t, h, eps: y.clone() });
                }
                continue;
            }
            steps += 1;
            let dense = st.dense(t, h_try, &y, &y1);
            let cands = crossings(config, &labels, &dense);
            let event = if cands.is_empty() {
                None
            } else {
                Some(resolve_tie(config, &labels, &dense, &cands, opts.event_tol))
            };
            let t_new = match &event {
                Some((theta, _)) if *theta < 1.0 => t + theta * h_try,
                _ if last => t_end,
                _ => t + h_try,
            };
            if let (Some(dt), true) = (opts.sample_dt, opts.record_samples) {
                while let Some(ts) = next_sample {
                    if ts > t_new {
                        break;
                    }
                    dense.eval(ts, &mut buf);
                    push_sample(&mut samples, config, ts, &buf, v);
                    next_sample = Some(ts + dt);
                }
            }
            match &event {
                Some((theta, _)) if *theta < 1.0 => dense.eval_theta(*theta, &mut buf),
                _ => buf.copy_from_slice(&y1),
            }
            for (i, p) in config.elements().iter().enumerate() {
                if !p.contains(buf[i]) {
                    return Err(Error::LeftDomain {
                        element: i + 1,
                        t: t_new,
                        eps: buf[i],
                    });
                }
            }
            t = t_new;
            y.copy_from_slice(&buf);

            if let Some((_, members)) = event {
                let fresh = config.phases_of(&y);
                let mut matched = false;
                for &i in &members {
                    if fresh[i] == labels[i] {
                        continue;
                    }
                    let ev = TransitionEvent {
                        t,
                        element: i + 1,
                        from_phase: labels[i],
                        to_phase: fresh[i],
                        eps_snapshot: y.clone(),
                        v,
                        segment: si,
                        tie: members.iter().filter(|&&m| m != i).map(|m| m + 1).collect(),
                    };
                    if let StopCondition::Transition { element, to_phase, .. } = seg.stop {
                        let el_ok = element.is_none_or(|e| e == ev.element);
                        let ph_ok = to_phase.is_none_or(|p| p == ev.to_phase);
                        matched |= el_ok && ph_ok;
                    }
                    events.push(ev);
                }
                labels = fresh;
                f(t, &y, &mut f0, &labels);
                if opts.record_samples {
                    push_sample(&mut samples, config, t, &y, v);
                }
                if matched {
                    reason = Some(StopReason::Transition);
                }
            } else {
                f0.copy_from_slice(&f1);
                if opts.record_samples && opts.sample_dt.is_none() {
                    push_sample(&mut samples, config, t, &y, v);
                }
                if settle_threshold.is_some_and(|thr| max_abs(&f0) < thr) {
                    reason = Some(StopReason::Settled);
                }
            }
            if reason.is_none() && t >= t_end {
                reason = Some(end_reason);
            }
            h = h_try * step_factor(err);
        }
        h_carry = Some(h);
        if opts.record_samples {
            push_sample(&mut samples, config, t, &y, v);
        }
        outcomes.push(SegmentOutcome {
            index: si,
            v,
            t_start,
            t_end: t,
            reason: reason.expect("loop exits with a reason"),
        });
    }

    Ok(Trajectory {
        samples,
        events,
        segments: outcomes,
        final_state: ChainState {
            t,
            eps: y,
            phases: labels,
        },
        steps,
    })
}
