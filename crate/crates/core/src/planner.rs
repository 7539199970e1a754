//! Rate planning: which element snaps next is chosen through the input rate
//! alone, so a sequence of states becomes a sequence of rates.
//!
//! The planner builds the graph of stable states, measures for each hop the
//! interval of rates whose first event is the wanted one, picks a rate inside
//! it, and checks the whole schedule in one continuous simulation.

use std::fmt;
use std::str::FromStr;

use itertools::Itertools;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::critical_rate::{contraction_start, extension_start, refine_boundary};
use crate::dynamics::{
    first_event, first_event_time_cap, integrate, phase_string, ChainConfig, ChainState, Direction, IntegrateOptions,
    RateSchedule, Segment, StopCondition, StopReason, TransitionEvent,
};
use crate::equilibria::{equilibrium_with_phases, intermediates_stable, stable_state_labels};
use crate::error::{Error, Result};
use crate::profiles::Phase;

/// Phase vector written with element 1 leftmost, e.g. `"0s1"`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct StateLabel(pub Vec<Phase>);

impl StateLabel {
    pub fn new(phases: Vec<Phase>) -> Self {
        StateLabel(phases)
    }

    pub fn uniform(n: usize, phase: Phase) -> Self {
        StateLabel(vec![phase; n])
    }

    pub fn phases(&self) -> &[Phase] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn spinodal_count(&self) -> usize {
        self.0.iter().filter(|&&p| p == Phase::Spinodal).count()
    }

    pub fn is_binary(&self) -> bool {
        self.spinodal_count() == 0
    }

    /// Stable-state class: binary, or one `s` when intermediates are stable.
    pub fn is_stable_class(&self, intermediates_stable: bool) -> bool {
        match self.spinodal_count() {
            0 => true,
            1 => intermediates_stable,
            _ => false,
        }
    }

    fn with(&self, i: usize, p: Phase) -> StateLabel {
        let mut v = self.0.clone();
        v[i] = p;
        StateLabel(v)
    }
}

impl fmt::Display for StateLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&phase_string(&self.0))
    }
}

impl FromStr for StateLabel {
    type Err = Error;

    /// Accepts `0`, `1`, `s`, optionally wrapped in parentheses.
    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().trim_start_matches('(').trim_end_matches(')').trim();
        if t.is_empty() {
            return Err(Error::BadStateLabel(s.to_string()));
        }
        t.chars()
            .map(Phase::from_char)
            .collect::<Option<Vec<_>>>()
            .map(StateLabel)
            .ok_or_else(|| Error::BadStateLabel(s.to_string()))
    }
}

impl TryFrom<String> for StateLabel {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<StateLabel> for String {
    fn from(l: StateLabel) -> String {
        l.to_string()
    }
}

/// Parses a comma-separated list of labels such as `"00,10,11"`.
pub fn parse_sequence(s: &str) -> Result<Vec<StateLabel>> {
    s.split(',').map(str::parse).collect()
}

/// Feasible rate magnitudes (mm/s) for one hop, with the raw scan behind it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateInterval {
    pub direction: Direction,
    /// Lower end; 0 when the interval reaches below the scan.
    pub lo: f64,
    /// Upper end; the top of the scan when the interval reaches past it.
    pub hi: f64,
    pub open_below: bool,
    pub open_above: bool,
    /// False when matching rates formed several runs; the widest was kept.
    pub contiguous: bool,
    pub selection_map: Vec<Selection>,
}

impl RateInterval {
    /// Signed rate for a magnitude inside the interval.
    pub fn signed(&self, speed: f64) -> f64 {
        self.direction.sign() * speed
    }
}

/// First event seen at one scanned rate magnitude.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub v: f64,
    pub first: Option<FirstHit>,
}

/// Element (1-based) and phase step of a first event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FirstHit {
    pub element: usize,
    pub from_phase: Phase,
    pub to_phase: Phase,
}

impl From<&TransitionEvent> for FirstHit {
    fn from(e: &TransitionEvent) -> Self {
        FirstHit {
            element: e.element,
            from_phase: e.from_phase,
            to_phase: e.to_phase,
        }
    }
}

impl fmt::Display for FirstHit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "e{} {}",
            self.element,
            Error::phase_step(self.from_phase, self.to_phase)
        )
    }
}

fn selection_map_text(map: &[Selection]) -> String {
    map.iter()
        .map(|s| match &s.first {
            Some(h) => format!("{:.4}: {h}", s.v),
            None => format!("{:.4}: none", s.v),
        })
        .join("; ")
}

/// One directed edge of the transition graph. `element` is 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphEdge {
    pub from: StateLabel,
    pub to: StateLabel,
    pub element: usize,
    pub direction: Direction,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate_interval: Option<(f64, f64)>,
}

impl GraphEdge {
    fn phase_before(&self) -> Phase {
        self.from.0[self.element - 1]
    }

    fn phase_after(&self) -> Phase {
        self.to.0[self.element - 1]
    }

    /// The phase step of the first event that starts this edge.
    fn first_step(&self) -> (Phase, Phase) {
        let (a, b) = (self.phase_before(), self.phase_after());
        if a.is_binary() && b.is_binary() {
            (a, Phase::Spinodal)
        } else {
            (a, b)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionGraph {
    pub n: usize,
    pub intermediates_stable: bool,
    pub nodes: Vec<StateLabel>,
    pub edges: Vec<GraphEdge>,
}

/// Direction and phase step that move element phase `a` to `b`, if they are
/// graph neighbours.
fn step_direction(a: Phase, b: Phase, intermediates_stable: bool) -> Option<Direction> {
    use Phase::*;
    match (a, b, intermediates_stable) {
        (Zero, Spinodal, true) | (Spinodal, One, true) | (Zero, One, false) => Some(Direction::Extend),
        (One, Spinodal, true) | (Spinodal, Zero, true) | (One, Zero, false) => Some(Direction::Contract),
        _ => None,
    }
}

impl TransitionGraph {
    /// The edge from `from` to `to`, if they are neighbours.
    pub fn edge(&self, from: &StateLabel, to: &StateLabel) -> Option<&GraphEdge> {
        self.edges.iter().find(|e| &e.from == from && &e.to == to)
    }

    pub fn contains(&self, label: &StateLabel) -> bool {
        self.nodes.contains(label)
    }

    /// DOT text; edge labels carry direction, element and any known interval.
    pub fn to_dot(&self) -> String {
        let mut out = String::from("digraph transitions {\n");
        for n in &self.nodes {
            out.push_str(&format!("  \"{n}\";\n"));
        }
        for e in &self.edges {
            let interval = match e.rate_interval {
                Some((lo, hi)) => format!(" [{lo:.4}, {hi:.4}]"),
                None => String::new(),
            };
            out.push_str(&format!(
                "  \"{}\" -> \"{}\" [label=\"{} e{}{}\"];\n",
                e.from, e.to, e.direction, e.element, interval
            ));
        }
        out.push_str("}\n");
        out
    }
}

/// Graph of stable states. With stable intermediates each edge moves one
/// element by one phase step; otherwise each edge flips one element.
pub fn build_graph(config: &ChainConfig, intermediates_stable: bool) -> TransitionGraph {
    let n = config.len();
    let nodes: Vec<StateLabel> = stable_state_labels(n, intermediates_stable)
        .into_iter()
        .map(StateLabel)
        .collect();
    let mut edges = Vec::new();
    for from in &nodes {
        for i in 0..n {
            for p in Phase::ALL {
                let Some(direction) = step_direction(from.0[i], p, intermediates_stable) else {
                    continue;
                };
                let to = from.with(i, p);
                if to.is_stable_class(intermediates_stable) {
                    edges.push(GraphEdge {
                        from: from.clone(),
                        to,
                        element: i + 1,
                        direction,
                        rate_interval: None,
                    });
                }
            }
        }
    }
    TransitionGraph {
        n,
        intermediates_stable,
        nodes,
        edges,
    }
}

/// Scan and refinement settings shared by the interval search and the
/// planner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerOptions {
    /// Smallest scanned rate magnitude (mm/s); default `1e-3 F_ref / c`.
    pub scan_min: Option<f64>,
    /// Largest scanned rate magnitude (mm/s); default `10 F_ref / c`.
    pub scan_max: Option<f64>,
    pub scan_points: usize,
    /// Relative width at which interval boundaries stop being refined.
    pub rel_tol: f64,
    /// Relative distance kept from finite interval ends.
    pub margin: f64,
    pub settle_threshold: f64,
    pub settle_timeout: f64,
    /// Overrides detection of intermediate-state stability.
    pub intermediates_stable: Option<bool>,
    /// Rates tried per hop before giving up.
    pub max_attempts: usize,
    pub integrate: IntegrateOptions,
}

impl Default for PlannerOptions {
    fn default() -> Self {
        PlannerOptions {
            scan_min: None,
            scan_max: None,
            scan_points: 48,
            rel_tol: 1e-3,
            margin: 0.15,
            settle_threshold: 1e-4,
            settle_timeout: 1000.0,
            intermediates_stable: None,
            max_attempts: 6,
            integrate: IntegrateOptions::without_samples(),
        }
    }
}

impl PlannerOptions {
    /// Scan range, using the mean peak force over `c` as the rate scale.
    pub fn scan_range(&self, config: &ChainConfig) -> (f64, f64) {
        let f_ref = config.elements().iter().map(|p| p.critical_points().f_max).sum::<f64>() / config.len() as f64;
        let v_ref = f_ref / config.c();
        (
            self.scan_min.unwrap_or(1e-3 * v_ref),
            self.scan_max.unwrap_or(10.0 * v_ref),
        )
    }

    fn grid(&self, config: &ChainConfig) -> Vec<f64> {
        let (lo, hi) = self.scan_range(config);
        let n = self.scan_points.max(2);
        (0..n).map(|j| lo * (hi / lo).powf(j as f64 / (n - 1) as f64)).collect()
    }

    fn stable_intermediates(&self, config: &ChainConfig) -> bool {
        self.intermediates_stable
            .unwrap_or_else(|| intermediates_stable(config))
    }
}

fn first_hit(config: &ChainConfig, state: &ChainState, v: f64, opts: &IntegrateOptions) -> Result<Option<FirstHit>> {
    let cap = first_event_time_cap(config, state, v);
    Ok(first_event(config, state, v, cap, opts)?.as_ref().map(FirstHit::from))
}

/// First event at each rate magnitude in `speeds`, moving in `direction`
/// from `state`. Runs in parallel; the output keeps the input order.
pub fn selection_map(
    config: &ChainConfig,
    state: &ChainState,
    direction: Direction,
    speeds: &[f64],
    opts: &IntegrateOptions,
) -> Result<Vec<Selection>> {
    state.validate(config)?;
    if let Some(bad) = speeds.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
        return Err(Error::InvalidSchedule(format!(
            "sweep rates must be positive, got {bad}"
        )));
    }
    speeds
        .par_iter()
        .map(|&v| {
            Ok(Selection {
                v,
                first: first_hit(config, state, direction.sign() * v, opts)?,
            })
        })
        .collect()
}

fn edge_for(
    config: &ChainConfig,
    from: &StateLabel,
    element: usize,
    direction: Direction,
    stable: bool,
) -> Result<GraphEdge> {
    if element == 0 || element > config.len() || from.len() != config.len() {
        return Err(Error::InvalidState(format!(
            "element {element} or state {from} does not fit a chain of {}",
            config.len()
        )));
    }
    let a = from.0[element - 1];
    Phase::ALL
        .into_iter()
        .filter(|&b| step_direction(a, b, stable) == Some(direction))
        .map(|b| from.with(element - 1, b))
        .find(|to| to.is_stable_class(stable))
        .map(|to| GraphEdge {
            from: from.clone(),
            to,
            element,
            direction,
            rate_interval: None,
        })
        .ok_or_else(|| Error::NotAdjacent {
            from: from.to_string(),
            to: format!("{direction} of element {element}"),
        })
}

/// Interval of rates for `edge`, starting from the actual state `state`.
fn interval_from_state(
    config: &ChainConfig,
    state: &ChainState,
    edge: &GraphEdge,
    opts: &PlannerOptions,
) -> Result<RateInterval> {
    let (from_phase, to_phase) = edge.first_step();
    let wanted = FirstHit {
        element: edge.element,
        from_phase,
        to_phase,
    };
    let sign = edge.direction.sign();
    let grid = opts.grid(config);
    let hits = grid
        .par_iter()
        .map(|&v| first_hit(config, state, sign * v, &opts.integrate))
        .collect::<Result<Vec<_>>>()?;
    let map: Vec<Selection> = grid
        .iter()
        .zip(&hits)
        .map(|(&v, h)| Selection { v, first: *h })
        .collect();
    let matches: Vec<bool> = hits.iter().map(|h| *h == Some(wanted)).collect();
    let runs: Vec<(usize, usize)> = {
        let mut r = Vec::new();
        let mut start = None;
        for (i, &m) in matches.iter().enumerate() {
            match (m, start) {
                (true, None) => start = Some(i),
                (false, Some(s)) => {
                    r.push((s, i - 1));
                    start = None;
                }
                _ => {}
            }
        }
        if let Some(s) = start {
            r.push((s, matches.len() - 1));
        }
        r
    };
    let Some(&(a, b)) = runs.iter().max_by(|x, y| {
        let wx = grid[x.1] / grid[x.0];
        let wy = grid[y.1] / grid[y.0];
        wx.total_cmp(&wy).then(y.0.cmp(&x.0))
    }) else {
        return Err(Error::NoFeasibleInterval {
            from: edge.from.to_string(),
            element: edge.element,
            step: Error::phase_step(from_phase, to_phase),
            map: selection_map_text(&map),
        });
    };
    let eval = |v: f64| first_hit(config, state, sign * v, &opts.integrate);
    let is_match = |h: &Option<FirstHit>| *h == Some(wanted);
    let open_below = a == 0;
    let open_above = b == grid.len() - 1;
    let lo = if open_below {
        0.0
    } else {
        let ((_, _), (v, _), _) = refine_boundary(
            (grid[a - 1], hits[a - 1]),
            (grid[a], hits[a]),
            is_match,
            eval,
            opts.rel_tol,
            7,
        )?;
        v
    };
    let hi = if open_above {
        grid[b]
    } else {
        let ((v, _), (_, _), _) = refine_boundary(
            (grid[b], hits[b]),
            (grid[b + 1], hits[b + 1]),
            is_match,
            eval,
            opts.rel_tol,
            7,
        )?;
        v
    };
    Ok(RateInterval {
        direction: edge.direction,
        lo,
        hi,
        open_below,
        open_above,
        contiguous: runs.len() == 1,
        selection_map: map,
    })
}

/// Interval of rate magnitudes for which `element` (1-based) is the first to
/// move in `direction`, starting from the stable equilibrium of `from` at
/// total length `l0`.
pub fn transition_rate_interval(
    config: &ChainConfig,
    from: &StateLabel,
    element: usize,
    direction: Direction,
    l0: f64,
    opts: &PlannerOptions,
) -> Result<RateInterval> {
    let stable = opts.stable_intermediates(config);
    let edge = edge_for(config, from, element, direction, stable)?;
    let eq = equilibrium_with_phases(config, &from.0, l0)?;
    let state = ChainState::new(config, eq.eps, 0.0)?;
    interval_from_state(config, &state, &edge, opts)
}

/// Chosen rate and its relative distance from the finite interval ends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HopMargin {
    pub v: f64,
    /// `v / lo - 1`, absent when the interval is open below.
    pub above_lo: Option<f64>,
    /// `1 - v / hi`, absent when the interval is open above.
    pub below_hi: Option<f64>,
}

/// Rate magnitude inside `interval` keeping a relative distance `margin`
/// from each finite end. Open-below intervals use `hi (1 - margin)`,
/// open-above ones `lo (1 + margin)`, closed ones their geometric centre,
/// and intervals open at both ends the geometric centre of the scan.
pub fn choose_rate(interval: &RateInterval, margin: f64, scan: (f64, f64)) -> Result<f64> {
    if !(0.0..1.0).contains(&margin) {
        return Err(Error::MarginTooLarge {
            lo: interval.lo,
            hi: interval.hi,
            margin,
        });
    }
    let v = match (interval.open_below, interval.open_above) {
        (true, true) => (scan.0 * scan.1).sqrt(),
        (true, false) => interval.hi * (1.0 - margin),
        (false, true) => interval.lo * (1.0 + margin),
        (false, false) => {
            let v = (interval.lo * interval.hi).sqrt();
            if v / interval.lo - 1.0 < margin || 1.0 - v / interval.hi < margin {
                return Err(Error::MarginTooLarge {
                    lo: interval.lo,
                    hi: interval.hi,
                    margin,
                });
            }
            v
        }
    };
    Ok(v)
}

fn hop_margin(interval: &RateInterval, v: f64) -> HopMargin {
    HopMargin {
        v,
        above_lo: (!interval.open_below).then(|| v / interval.lo - 1.0),
        below_hi: (!interval.open_above).then(|| 1.0 - v / interval.hi),
    }
}

/// Fallback rates tried when the preferred one does not land in the
/// expected state: geometric steps from the preferred rate deeper into the
/// interval.
fn candidate_rates(interval: &RateInterval, preferred: f64, scan: (f64, f64), attempts: usize) -> Vec<f64> {
    let lo = if interval.open_below { scan.0 } else { interval.lo };
    let hi = interval.hi;
    let mut out = vec![preferred];
    let toward = match (interval.open_below, interval.open_above) {
        (true, false) => lo.max(preferred * 1e-2),
        (false, true) => hi.min(preferred * 1e2),
        _ => (lo * hi).sqrt(),
    };
    for k in 1..attempts {
        let th = k as f64 / attempts as f64;
        out.push(preferred * (toward / preferred).powf(th));
    }
    out.dedup_by(|a, b| (*a / *b - 1.0).abs() < 1e-9);
    out
}

/// Planned hop with the interval and rate behind it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HopPlan {
    pub from: StateLabel,
    pub to: StateLabel,
    pub element: usize,
    pub direction: Direction,
    pub interval: RateInterval,
    /// Signed rate used (mm/s).
    pub v: f64,
    pub attempts: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanResult {
    pub schedule: RateSchedule,
    pub initial: ChainState,
    pub expected: Vec<StateLabel>,
    pub realized: Vec<StateLabel>,
    pub realized_events: Vec<TransitionEvent>,
    pub success: bool,
    /// Index into `expected` of the first state that was not reached.
    pub mismatch_at: Option<usize>,
    pub margins: Vec<HopMargin>,
    pub hops: Vec<HopPlan>,
}

/// Inserts the `s` step between binary neighbours when intermediates are
/// stable, and checks that every hop is a graph edge.
pub fn expand_sequence(sequence: &[StateLabel], graph: &TransitionGraph) -> Result<Vec<StateLabel>> {
    let mut out: Vec<StateLabel> = Vec::new();
    for label in sequence {
        if label.len() != graph.n {
            return Err(Error::BadStateLabel(format!(
                "{label} has {} elements, chain has {}",
                label.len(),
                graph.n
            )));
        }
        if !graph.contains(label) {
            return Err(Error::BadStateLabel(format!("{label} is not a stable state")));
        }
        let Some(prev) = out.last().cloned() else {
            out.push(label.clone());
            continue;
        };
        if graph.edge(&prev, label).is_some() {
            out.push(label.clone());
            continue;
        }
        let diff: Vec<usize> = (0..graph.n).filter(|&i| prev.0[i] != label.0[i]).collect();
        let mid = (graph.intermediates_stable && diff.len() == 1 && prev.is_binary() && label.is_binary())
            .then(|| prev.with(diff[0], Phase::Spinodal));
        match mid {
            Some(m) if graph.edge(&prev, &m).is_some() && graph.edge(&m, label).is_some() => {
                out.push(m);
                out.push(label.clone());
            }
            _ => {
                return Err(Error::NotAdjacent {
                    from: prev.to_string(),
                    to: label.to_string(),
                })
            }
        }
    }
    Ok(out)
}

/// Default starting state for a sequence: the unstretched chain for all-0,
/// the contraction start for all-1.
pub fn default_start(config: &ChainConfig, first: &StateLabel) -> Result<ChainState> {
    let n = config.len();
    if *first == StateLabel::uniform(n, Phase::Zero) {
        extension_start(config)
    } else if *first == StateLabel::uniform(n, Phase::One) {
        contraction_start(config)
    } else {
        Err(Error::InvalidState(format!(
            "no default starting length for {first}; give an explicit start"
        )))
    }
}

fn hop_segments(edge: &GraphEdge, v: f64, t_cap: f64, opts: &PlannerOptions) -> Vec<Segment> {
    vec![
        Segment::new(
            v,
            StopCondition::Transition {
                element: Some(edge.element),
                to_phase: Some(edge.phase_after()),
                timeout: t_cap,
            },
        ),
        Segment::new(
            0.0,
            StopCondition::Settled {
                threshold: opts.settle_threshold,
                timeout: opts.settle_timeout,
            },
        ),
    ]
}

/// Plans a rate schedule realising `sequence` from `start` (or the default
/// start of its first state) and verifies it end to end.
///
/// Each hop scans for the rates whose first event is the wanted element and
/// step, picks one with [`choose_rate`], runs at that rate until the element
/// reaches the hop's target phase, then holds the length until the chain
/// settles. If the hop lands elsewhere, a few rates deeper inside the
/// interval are tried.
pub fn plan_schedule(
    config: &ChainConfig,
    sequence: &[StateLabel],
    start: Option<&ChainState>,
    opts: &PlannerOptions,
) -> Result<PlanResult> {
    let stable = opts.stable_intermediates(config);
    let graph = build_graph(config, stable);
    let expected = expand_sequence(sequence, &graph)?;
    let Some(first) = expected.first() else {
        return Err(Error::InvalidSchedule("empty state sequence".into()));
    };
    let initial = match start {
        Some(s) => {
            s.validate(config)?;
            s.clone()
        }
        None => default_start(config, first)?,
    };
    if StateLabel(initial.phases.clone()) != *first {
        return Err(Error::InvalidState(format!(
            "start state {} does not match the first label {first}",
            initial.label()
        )));
    }
    let scan = opts.scan_range(config);
    let mut segments = Vec::new();
    let mut hops = Vec::new();
    let mut margins = Vec::new();
    let mut state = initial.clone();
    for pair in expected.windows(2) {
        let edge = graph
            .edge(&pair[0], &pair[1])
            .cloned()
            .ok_or_else(|| Error::NotAdjacent {
                from: pair[0].to_string(),
                to: pair[1].to_string(),
            })?;
        let interval = interval_from_state(config, &state, &edge, opts)?;
        let preferred = choose_rate(&interval, opts.margin, scan)?;
        let mut landed = None;
        let candidates = candidate_rates(&interval, preferred, scan, opts.max_attempts.max(1));
        for (k, &speed) in candidates.iter().enumerate() {
            let v = interval.signed(speed);
            let segs = hop_segments(&edge, v, first_event_time_cap(config, &state, v), opts);
            let tr = integrate(config, &state, &RateSchedule::new(segs.clone()), &opts.integrate)?;
            let ok = tr.segments[0].reason == StopReason::Transition
                && tr.segments[1].reason == StopReason::Settled
                && StateLabel(tr.final_state.phases.clone()) == pair[1];
            if ok {
                landed = Some((speed, k + 1, segs, tr.final_state));
                break;
            }
        }
        let Some((speed, attempts, segs, next)) = landed else {
            return Err(Error::NoFeasibleInterval {
                from: edge.from.to_string(),
                element: edge.element,
                step: Error::phase_step(edge.phase_before(), edge.phase_after()),
                map: format!(
                    "no tried rate in [{}, {}] landed in {}; scan: {}",
                    interval.lo,
                    interval.hi,
                    pair[1],
                    selection_map_text(&interval.selection_map)
                ),
            });
        };
        margins.push(hop_margin(&interval, speed));
        hops.push(HopPlan {
            from: pair[0].clone(),
            to: pair[1].clone(),
            element: edge.element,
            direction: edge.direction,
            v: interval.signed(speed),
            interval,
            attempts,
        });
        segments.extend(segs);
        state = ChainState { t: 0.0, ..next };
    }
    let schedule = RateSchedule::new(segments);
    let mut result = verify_schedule_with(config, &initial, &schedule, &expected, stable, &opts.integrate)?;
    result.margins = margins;
    result.hops = hops;
    Ok(result)
}

/// Stable states visited by a run, read from its events: the phase vector
/// after each event, kept when it is in the stable class, with repeats
/// collapsed.
pub fn realized_sequence(
    initial: &ChainState,
    events: &[TransitionEvent],
    intermediates_stable: bool,
) -> Vec<StateLabel> {
    let mut cur = initial.phases.clone();
    let mut out = vec![StateLabel(cur.clone())];
    for e in events {
        cur[e.element - 1] = e.to_phase;
        let l = StateLabel(cur.clone());
        if l.is_stable_class(intermediates_stable) && out.last() != Some(&l) {
            out.push(l);
        }
    }
    out
}

fn verify_schedule_with(
    config: &ChainConfig,
    initial: &ChainState,
    schedule: &RateSchedule,
    expected: &[StateLabel],
    stable: bool,
    opts: &IntegrateOptions,
) -> Result<PlanResult> {
    let (events, final_phases) = if schedule.is_empty() {
        (Vec::new(), initial.phases.clone())
    } else {
        let tr = integrate(config, initial, schedule, opts)?;
        (tr.events, tr.final_state.phases)
    };
    let realized = realized_sequence(initial, &events, stable);
    let mismatch_at = expected
        .iter()
        .zip(realized.iter().map(Some).chain(std::iter::repeat(None)))
        .position(|(e, r)| r != Some(e))
        .or_else(|| (realized.len() > expected.len()).then_some(expected.len()));
    let ends_right = expected.last().is_some_and(|l| l.0 == final_phases);
    let success = mismatch_at.is_none() && ends_right;
    Ok(PlanResult {
        schedule: schedule.clone(),
        initial: initial.clone(),
        expected: expected.to_vec(),
        realized,
        realized_events: events,
        success,
        mismatch_at: if success {
            None
        } else {
            mismatch_at.or(Some(expected.len().saturating_sub(1)))
        },
        margins: Vec::new(),
        hops: Vec::new(),
    })
}

/// Runs `schedule` from `initial` in one continuous simulation and compares
/// the visited stable states with `expected`. A mismatch is reported in the
/// result, not as an error.
pub fn verify_schedule(
    config: &ChainConfig,
    initial: &ChainState,
    schedule: &RateSchedule,
    expected: &[StateLabel],
    opts: &PlannerOptions,
) -> Result<PlanResult> {
    let stable = opts.stable_intermediates(config);
    let graph = build_graph(config, stable);
    let expected = expand_sequence(expected, &graph)?;
    verify_schedule_with(config, initial, schedule, &expected, stable, &opts.integrate)
}

/// Largest `N` for which complete cycles are enumerated one by one.
pub const MAX_CYCLE_ENUMERATION_N: usize = 8;

/// Complete-cycle count `(N!)^2` for an `N`-element chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompleteCycles {
    pub n: usize,
    pub count: u128,
}

impl CompleteCycles {
    /// Every `(extension order, contraction order)` pair, 1-based element
    /// indices. Fails for `N` above [`MAX_CYCLE_ENUMERATION_N`].
    pub fn iter(&self) -> Result<impl Iterator<Item = (Vec<usize>, Vec<usize>)>> {
        if self.n > MAX_CYCLE_ENUMERATION_N {
            return Err(Error::TooLarge(self.n));
        }
        let perms: Vec<Vec<usize>> = (1..=self.n).permutations(self.n).collect();
        let p2 = perms.clone();
        Ok(perms
            .into_iter()
            .flat_map(move |a| p2.clone().into_iter().map(move |b| (a.clone(), b))))
    }
}

pub fn enumerate_complete_cycles(n: usize) -> Result<CompleteCycles> {
    let counts = crate::equilibria::count_states(n, false)?;
    Ok(CompleteCycles {
        n,
        count: counts.complete_cycles,
    })
}

/// Binary states visited when elements flip in `order` (1-based), starting
/// from all-0 for extension or all-1 for contraction.
pub fn order_to_sequence(n: usize, order: &[usize], direction: Direction) -> Result<Vec<StateLabel>> {
    let sorted: Vec<usize> = order.iter().copied().sorted().collect();
    if sorted != (1..=n).collect::<Vec<_>>() {
        return Err(Error::InvalidSchedule(format!(
            "{order:?} is not an ordering of 1..={n}"
        )));
    }
    let (from, to) = match direction {
        Direction::Extend => (Phase::Zero, Phase::One),
        Direction::Contract => (Phase::One, Phase::Zero),
    };
    let mut cur = StateLabel::uniform(n, from);
    let mut out = vec![cur.clone()];
    for &e in order {
        cur = cur.with(e - 1, to);
        out.push(cur.clone());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::profiles::{trilinear_from_critical, CriticalPoints};

    fn chain(n: usize) -> ChainConfig {
        let els = (0..n)
            .map(|i| {
                let fmax = 2.0 + 0.2 * i as f64;
                let cp = CriticalPoints::new(4.0, fmax, 5.0, 0.9 - 0.1 * i as f64).unwrap();
                trilinear_from_critical(cp, fmax / 4.0).unwrap()
            })
            .collect();
        ChainConfig::new(els, 0.015, "t").unwrap()
    }

    #[test]
    fn label_round_trip() {
        let l: StateLabel = "(0s1)".parse().unwrap();
        assert_eq!(l.to_string(), "0s1");
        assert!("01x".parse::<StateLabel>().is_err());
        assert!("".parse::<StateLabel>().is_err());
        let json = serde_json::to_string(&l).unwrap();
        assert_eq!(json, "\"0s1\"");
        assert_eq!(serde_json::from_str::<StateLabel>(&json).unwrap(), l);
    }

    #[test]
    fn graph_sizes() {
        let g = build_graph(&chain(2), true);
        assert_eq!(g.nodes.len(), 8);
        assert_eq!(g.edges.len(), 16);
        let g = build_graph(&chain(3), false);
        assert_eq!(g.nodes.len(), 8);
        assert_eq!(g.edges.len(), 24);
        assert_eq!(g.edges.iter().filter(|e| e.direction == Direction::Extend).count(), 12);
        let g = build_graph(&chain(1), true);
        let names: Vec<String> = g.nodes.iter().map(|n| n.to_string()).collect();
        assert_eq!(names, vec!["0", "s", "1"]);
        assert_eq!(g.edges.len(), 4);
    }

    #[test]
    fn edges_change_one_element_by_one_step() {
        for stable in [true, false] {
            let g = build_graph(&chain(3), stable);
            for e in &g.edges {
                let diff: Vec<usize> = (0..3).filter(|&i| e.from.0[i] != e.to.0[i]).collect();
                assert_eq!(diff, vec![e.element - 1]);
            }
        }
    }

    #[test]
    fn dot_has_all_nodes() {
        let dot = build_graph(&chain(3), false).to_dot();
        assert!(dot.starts_with("digraph"));
        assert_eq!(dot.lines().filter(|l| l.trim_end().ends_with("\";")).count(), 8);
    }

    #[test]
    fn expansion_inserts_intermediate() {
        let g = build_graph(&chain(2), true);
        let seq = parse_sequence("00,01,11").unwrap();
        let ex = expand_sequence(&seq, &g).unwrap();
        let s: Vec<String> = ex.iter().map(|l| l.to_string()).collect();
        assert_eq!(s, vec!["00", "0s", "01", "s1", "11"]);
        assert!(expand_sequence(&parse_sequence("00,11").unwrap(), &g).is_err());
    }

    #[test]
    fn orders_to_sequences() {
        let s = order_to_sequence(4, &[3, 2, 4, 1], Direction::Extend).unwrap();
        let s: Vec<String> = s.iter().map(|l| l.to_string()).collect();
        assert_eq!(s, vec!["0000", "0010", "0110", "0111", "1111"]);
        assert!(order_to_sequence(3, &[1, 1, 2], Direction::Extend).is_err());
    }

    #[test]
    fn cycle_counts() {
        assert_eq!(enumerate_complete_cycles(3).unwrap().count, 36);
        assert_eq!(enumerate_complete_cycles(4).unwrap().count, 576);
        assert_eq!(enumerate_complete_cycles(1).unwrap().count, 1);
        assert_eq!(enumerate_complete_cycles(3).unwrap().iter().unwrap().count(), 36);
        assert!(enumerate_complete_cycles(9).unwrap().iter().is_err());
    }

    #[test]
    fn rate_choice() {
        let mk = |lo, hi, ob, oa| RateInterval {
            direction: Direction::Extend,
            lo,
            hi,
            open_below: ob,
            open_above: oa,
            contiguous: true,
            selection_map: vec![],
        };
        assert!((choose_rate(&mk(0.0, 20.0, true, false), 0.15, (1.0, 100.0)).unwrap() - 17.0).abs() < 1e-12);
        assert!((choose_rate(&mk(20.0, 100.0, false, true), 0.15, (1.0, 100.0)).unwrap() - 23.0).abs() < 1e-12);
        assert!((choose_rate(&mk(10.0, 40.0, false, false), 0.15, (1.0, 100.0)).unwrap() - 20.0).abs() < 1e-12);
        assert!(matches!(
            choose_rate(&mk(10.0, 11.0, false, false), 0.15, (1.0, 100.0)),
            Err(Error::MarginTooLarge { .. })
        ));
    }

    #[test]
    fn two_element_intervals_split_at_critical_rate() {
        let cfg = chain(2);
        let opts = PlannerOptions::default();
        let zero: StateLabel = "00".parse().unwrap();
        let a = transition_rate_interval(&cfg, &zero, 1, Direction::Extend, 0.0, &opts).unwrap();
        let b = transition_rate_interval(&cfg, &zero, 2, Direction::Extend, 0.0, &opts).unwrap();
        assert!(a.open_below && !a.open_above);
        assert!(!b.open_below && b.open_above);
        assert!((a.hi / b.lo - 1.0).abs() < 2e-3, "{} vs {}", a.hi, b.lo);
    }

    #[test]
    fn single_state_plan_is_trivial() {
        let cfg = chain(2);
        let r = plan_schedule(&cfg, &parse_sequence("00").unwrap(), None, &PlannerOptions::default()).unwrap();
        assert!(r.success);
        assert!(r.schedule.is_empty());
    }
}
