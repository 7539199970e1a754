use thiserror::Error;

use crate::profiles::Phase;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid critical points: {0}")]
    InvalidCriticalPoints(String),

    #[error("invalid force profile: {0}")]
    InvalidProfile(String),

    #[error("elongation {eps} mm outside working interval [{lo}, {hi}]")]
    OutOfDomain { eps: f64, lo: f64, hi: f64 },

    #[error("profile is not bi-stable: found {found} stationary points in [{lo}, {hi}], expected a maximum followed by a minimum")]
    NotBistable { found: usize, lo: f64, hi: f64 },

    #[error("invalid series spring: {0}")]
    SeriesSpring(String),

    #[error("need at least {need} samples for a degree-5 fit, got {got}")]
    InsufficientSamples { got: usize, need: usize },

    #[error("sample set is rank deficient (condition {condition:e})")]
    RankDeficient { condition: f64 },

    #[error("invalid chain configuration: {}", .0.join("; "))]
    InvalidConfig(Vec<String>),

    #[error("invalid chain state: {0}")]
    InvalidState(String),

    #[error("invalid rate schedule: {0}")]
    InvalidSchedule(String),

    #[error("step size collapsed to {h:e} s at t = {t} s (eps = {eps:?})")]
    StepSizeCollapse { t: f64, h: f64, eps: Vec<f64> },

    #[error("element {element} left its working interval at t = {t} s (eps = {eps} mm)")]
    LeftDomain { element: usize, t: f64, eps: f64 },

    #[error("step budget of {0} steps exhausted")]
    StepBudget(usize),

    #[error("operation requires a two-element chain, got N = {0}")]
    NotTwoElements(usize),

    #[error("invalid variability parameters: {0}")]
    InvalidVariability(String),

    #[error("no root of the critical-rate equation in [{lo}, {hi}]")]
    NoRootBracket { lo: f64, hi: f64 },

    #[error("bracket [{lo}, {hi}] mm/s does not change the first snapping element (both give {first:?})")]
    SameFirstSnapper { lo: f64, hi: f64, first: Option<usize> },

    #[error("no transition event within {t_cap} s at v = {v} mm/s")]
    NoEvent { v: f64, t_cap: f64 },

    #[error("unknown state label {0:?}")]
    BadStateLabel(String),

    #[error("states {from} and {to} are not adjacent in the transition graph")]
    NotAdjacent { from: String, to: String },

    #[error("no stable equilibrium with phases {state} at L = {length} mm")]
    NoEquilibrium { state: String, length: f64 },

    #[error("element {element} ({step}) is never selected first from {from}; observed selection map: {map}")]
    NoFeasibleInterval {
        from: String,
        element: usize,
        step: String,
        map: String,
    },

    #[error("feasible interval [{lo}, {hi}] mm/s is too narrow for margin {margin}")]
    MarginTooLarge { lo: f64, hi: f64, margin: f64 },

    #[error("N = {0} is too large for this operation")]
    TooLarge(usize),

    #[error("{0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn phase_step(from: Phase, to: Phase) -> String {
        format!("{}->{}", from.as_char(), to.as_char())
    }

    /// Short machine-readable tag, used in the CLI's JSON error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidCriticalPoints(_) => "invalid_critical_points",
            Error::InvalidProfile(_) => "invalid_profile",
            Error::OutOfDomain { .. } => "out_of_domain",
            Error::NotBistable { .. } => "not_bistable",
            Error::SeriesSpring(_) => "series_spring",
            Error::InsufficientSamples { .. } => "insufficient_samples",
            Error::RankDeficient { .. } => "rank_deficient",
            Error::InvalidConfig(_) => "invalid_config",
            Error::InvalidState(_) => "invalid_state",
            Error::InvalidSchedule(_) => "invalid_schedule",
            Error::StepSizeCollapse { .. } => "step_size_collapse",
            Error::LeftDomain { .. } => "left_domain",
            Error::StepBudget(_) => "step_budget",
            Error::NotTwoElements(_) => "not_two_elements",
            Error::InvalidVariability(_) => "invalid_variability",
            Error::NoRootBracket { .. } => "no_root_bracket",
            Error::SameFirstSnapper { .. } => "same_first_snapper",
            Error::NoEvent { .. } => "no_event",
            Error::BadStateLabel(_) => "bad_state_label",
            Error::NotAdjacent { .. } => "not_adjacent",
            Error::NoEquilibrium { .. } => "no_equilibrium",
            Error::NoFeasibleInterval { .. } => "no_feasible_interval",
            Error::MarginTooLarge { .. } => "margin_too_large",
            Error::TooLarge(_) => "too_large",
            Error::Parse(_) => "parse",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
