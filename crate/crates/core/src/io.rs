//! Run configuration loading and result serialization.
//!
//! Configs are JSON with an explicit `units` block. Everything is normalized
//! to N, mm and s on load, so the rest of the crate never sees other units.
//!
//! ```json
//! {
//!   "units": { "length": "mm", "force": "N", "damping": "N*s/m" },
//!   "chain": {
//!     "name": "pair",
//!     "c": 15,
//!     "elements": [
//!       { "kind": "trilinear", "eps_max": 4, "f_max": 1.9, "eps_min": 7, "f_min": 0.6, "k1": 0.5 },
//!       { "file": "stronger.json" }
//!     ]
//!   },
//!   "integrator": { "rtol": 1e-9, "atol": 1e-11 },
//!   "output": { "sample_dt": 0.001 },
//!   "seed": 7,
//!   "strict_ordering": true
//! }
//! ```

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::critical_rate::RateRow;
use crate::dynamics::{phase_string, ChainConfig, IntegrateOptions, Trajectory, TransitionEvent};
use crate::equilibria::{EquilibriumBranch, EquilibriumPoint};
use crate::error::{Error, Result};
use crate::planner::{RateInterval, Selection};
use crate::profiles::{ForceProfile, ProfileSpec};

/// Unit declaration of a config file. Missing fields mean N, mm, s and a
/// damping unit of force·s/length.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Units {
    #[serde(default = "default_length")]
    pub length: String,
    #[serde(default = "default_force")]
    pub force: String,
    #[serde(default = "default_time")]
    pub time: String,
    #[serde(default)]
    pub damping: Option<String>,
}

fn default_length() -> String {
    "mm".into()
}

fn default_force() -> String {
    "N".into()
}

fn default_time() -> String {
    "s".into()
}

impl Default for Units {
    fn default() -> Self {
        Units {
            length: default_length(),
            force: default_force(),
            time: default_time(),
            damping: None,
        }
    }
}

fn length_scale(u: &str) -> Option<f64> {
    match u {
        "mm" => Some(1.0),
        "cm" => Some(10.0),
        "m" => Some(1000.0),
        "um" | "µm" => Some(1e-3),
        _ => None,
    }
}

fn force_scale(u: &str) -> Option<f64> {
    match u {
        "N" => Some(1.0),
        "mN" => Some(1e-3),
        "kN" => Some(1e3),
        _ => None,
    }
}

fn time_scale(u: &str) -> Option<f64> {
    match u {
        "s" => Some(1.0),
        "ms" => Some(1e-3),
        _ => None,
    }
}

/// Factor converting a damping value in `u` to N·s/mm. Accepts forms like
/// `N*s/m`, `N·s/mm` or `Ns/m`.
fn damping_scale(u: &str) -> Option<f64> {
    let norm: String = u.chars().filter(|c| !matches!(c, '*' | '·' | ' ' | '.')).collect();
    let (num, den) = norm.split_once('/')?;
    let (force, t) = match num.strip_suffix("ms") {
        Some(f) if force_scale(f).is_some() => (f, 1e-3),
        _ => (num.strip_suffix('s')?, 1.0),
    };
    Some(force_scale(force)? * t / length_scale(den)?)
}

/// Output settings.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: Option<PathBuf>,
    /// Sampling interval of time series (s); `None` keeps every step.
    pub sample_dt: Option<f64>,
}

/// Integrator tolerances as written in a config file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    pub rtol: f64,
    pub atol: f64,
    pub event_tol: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        let d = IntegrateOptions::default();
        Tolerances {
            rtol: d.rtol,
            atol: d.atol,
            event_tol: d.event_tol,
        }
    }
}

/// A fully validated run configuration in N, mm, s.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub chain: ChainConfig,
    /// Units the file was written in.
    pub units: Units,
    pub tolerances: Tolerances,
    pub output: OutputConfig,
    pub seed: u64,
    pub strict_ordering: bool,
}

impl RunConfig {
    pub fn from_chain(chain: ChainConfig) -> Self {
        RunConfig {
            chain,
            units: Units::default(),
            tolerances: Tolerances::default(),
            output: OutputConfig::default(),
            seed: 0,
            strict_ordering: false,
        }
    }

    pub fn integrate_options(&self) -> IntegrateOptions {
        IntegrateOptions {
            rtol: self.tolerances.rtol,
            atol: self.tolerances.atol,
            event_tol: self.tolerances.event_tol,
            sample_dt: self.output.sample_dt,
            ..Default::default()
        }
    }

    /// Normalized JSON that [`parse_config`] reads back to an equal value.
    pub fn to_json(&self) -> Result<String> {
        let v = serde_json::json!({
            "units": Units::default(),
            "chain": self.chain,
            "integrator": self.tolerances,
            "output": self.output,
            "seed": self.seed,
            "strict_ordering": self.strict_ordering,
        });
        Ok(serde_json::to_string_pretty(&v)?)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRun {
    #[serde(default)]
    units: Units,
    chain: RawChain,
    #[serde(default)]
    integrator: Tolerances,
    #[serde(default)]
    output: OutputConfig,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    strict_ordering: bool,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawChain {
    #[serde(default)]
    name: String,
    c: f64,
    elements: Vec<Value>,
}

fn parse_error(origin: &str, e: &serde_json::Error) -> Error {
    Error::Parse(format!("{origin}:{}:{}: {e}", e.line(), e.column()))
}

/// Scales a profile written in other units to N and mm.
fn scale_spec(spec: ProfileSpec, ls: f64, fs: f64) -> ProfileSpec {
    let k = fs / ls;
    match spec {
        ProfileSpec::Trilinear {
            eps_max,
            f_max,
            eps_min,
            f_min,
            k1,
            k0,
            ks,
            series_spring,
        } => ProfileSpec::Trilinear {
            eps_max: eps_max * ls,
            f_max: f_max * fs,
            eps_min: eps_min * ls,
            f_min: f_min * fs,
            k1: k1 * k,
            k0: k0.map(|x| x * k),
            ks: ks.map(|x| x * k),
            series_spring: series_spring.map(|x| x * k),
        },
        ProfileSpec::Polynomial5 {
            coefficients,
            domain,
            series_spring,
        } => {
            let mut c = coefficients;
            for (j, a) in c.iter_mut().enumerate() {
                *a *= fs / ls.powi(j as i32);
            }
            ProfileSpec::Polynomial5 {
                coefficients: c,
                domain: domain.map(|[a, b]| [a * ls, b * ls]),
                series_spring: series_spring.map(|x| x * k),
            }
        }
    }
}

fn load_element(value: &Value, base_dir: &Path, problems: &mut Vec<String>, index: usize) -> Option<ProfileSpec> {
    let value = match value.get("file").and_then(Value::as_str) {
        Some(file) => {
            let path = base_dir.join(file);
            let text = match std::fs::read_to_string(&path) {
                Ok(t) => t,
                Err(e) => {
                    problems.push(format!("element {index}: cannot read {}: {e}", path.display()));
                    return None;
                }
            };
            match serde_json::from_str::<Value>(&text) {
                Ok(v) => v,
                Err(e) => {
                    problems.push(format!(
                        "element {index}: {}",
                        parse_error(&path.display().to_string(), &e)
                    ));
                    return None;
                }
            }
        }
        None => value.clone(),
    };
    match serde_json::from_value::<ProfileSpec>(value) {
        Ok(s) => Some(s),
        Err(e) => {
            problems.push(format!("element {index}: {e}"));
            None
        }
    }
}

/// Parses config text. `origin` names the source in messages and
/// `base_dir` resolves element `file` references.
pub fn parse_config(text: &str, origin: &str, base_dir: &Path) -> Result<RunConfig> {
    let raw: RawRun = serde_json::from_str(text).map_err(|e| parse_error(origin, &e))?;
    let mut problems = Vec::new();

    let ls = length_scale(&raw.units.length);
    let fs = force_scale(&raw.units.force);
    let ts = time_scale(&raw.units.time);
    if ls.is_none() {
        problems.push(format!("unknown length unit {:?}", raw.units.length));
    }
    if fs.is_none() {
        problems.push(format!("unknown force unit {:?}", raw.units.force));
    }
    if ts.is_none() {
        problems.push(format!("unknown time unit {:?}", raw.units.time));
    }
    let (ls, fs, ts) = (ls.unwrap_or(1.0), fs.unwrap_or(1.0), ts.unwrap_or(1.0));
    let cs = match &raw.units.damping {
        Some(u) => damping_scale(u).unwrap_or_else(|| {
            problems.push(format!("unknown damping unit {u:?}"));
            1.0
        }),
        None => fs * ts / ls,
    };

    let mut elements = Vec::new();
    for (i, v) in raw.chain.elements.iter().enumerate() {
        let Some(spec) = load_element(v, base_dir, &mut problems, i + 1) else {
            continue;
        };
        match ForceProfile::try_from(scale_spec(spec, ls, fs)) {
            Ok(p) => elements.push(p),
            Err(e) => problems.push(format!("element {}: {e}", i + 1)),
        }
    }
    if raw.chain.elements.is_empty() {
        problems.push("chain needs at least one element".into());
    }
    let c = raw.chain.c * cs;
    if !(c > 0.0) || !c.is_finite() {
        problems.push(format!("damping coefficient must be positive, got {}", raw.chain.c));
    }
    let tol = Tolerances {
        rtol: raw.integrator.rtol,
        atol: raw.integrator.atol * ls,
        event_tol: raw.integrator.event_tol * ls,
    };
    for (name, x) in [("rtol", tol.rtol), ("atol", tol.atol), ("event_tol", tol.event_tol)] {
        if !(x > 0.0) || !x.is_finite() {
            problems.push(format!("{name} must be positive, got {x}"));
        }
    }
    let output = OutputConfig {
        dir: raw.output.dir,
        sample_dt: raw.output.sample_dt.map(|d| d * ts),
    };
    if let Some(dt) = output.sample_dt {
        if !(dt > 0.0) {
            problems.push(format!("sample_dt must be positive, got {dt}"));
        }
    }
    if !problems.is_empty() {
        return Err(Error::InvalidConfig(problems));
    }
    let chain = ChainConfig::new(elements, c, raw.chain.name)?;
    if raw.strict_ordering {
        let v = chain.ordering_violations();
        if !v.is_empty() {
            return Err(Error::InvalidConfig(v));
        }
    }
    Ok(RunConfig {
        chain,
        units: raw.units,
        tolerances: tol,
        output,
        seed: raw.seed,
        strict_ordering: raw.strict_ordering,
    })
}

/// Reads and validates a config file; see the module docs for the format.
pub fn load_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_config(&text, &path.display().to_string(), base)
}

fn fmt(x: f64) -> String {
    // Shortest representation that reads back exactly.
    format!("{x:?}")
}

/// Time series with columns `t, eps_1..eps_N, phase_1..phase_N, v, L`.
pub fn write_time_series_csv<W: Write>(mut w: W, n: usize, traj: &Trajectory) -> Result<()> {
    let mut header = vec!["t".to_string()];
    header.extend((1..=n).map(|i| format!("eps_{i}")));
    header.extend((1..=n).map(|i| format!("phase_{i}")));
    header.extend(["v".into(), "L".into()]);
    writeln!(w, "{}", header.join(","))?;
    for s in &traj.samples {
        let mut row = vec![fmt(s.t)];
        row.extend(s.eps.iter().map(|&e| fmt(e)));
        row.extend(s.phases.iter().map(|p| p.as_char().to_string()));
        row.extend([fmt(s.v), fmt(s.length)]);
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

/// Equilibria with columns `state, eps_1..eps_N, force, L, stability, k_eq`.
pub fn write_equilibria_csv<W: Write>(mut w: W, n: usize, points: &[EquilibriumPoint]) -> Result<()> {
    let mut header = vec!["state".to_string()];
    header.extend((1..=n).map(|i| format!("eps_{i}")));
    header.extend(["force".into(), "L".into(), "stability".into(), "k_eq".into()]);
    writeln!(w, "{}", header.join(","))?;
    for p in points {
        let mut row = vec![p.label()];
        row.extend(p.eps.iter().map(|&e| fmt(e)));
        row.extend([fmt(p.force), fmt(p.length()), p.stability.to_string(), fmt(p.k_eq())]);
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

/// Branch points with columns `state, index, eps_1..eps_N, force, L, stability`.
pub fn write_branches_csv<W: Write>(mut w: W, n: usize, branches: &[EquilibriumBranch]) -> Result<()> {
    let mut header = vec!["state".to_string(), "index".into()];
    header.extend((1..=n).map(|i| format!("eps_{i}")));
    header.extend(["force".into(), "L".into(), "stability".into()]);
    writeln!(w, "{}", header.join(","))?;
    for b in branches {
        let label = phase_string(&b.phases);
        for (j, p) in b.points.iter().enumerate() {
            let mut row = vec![label.clone(), j.to_string()];
            row.extend(p.eps.iter().map(|&e| fmt(e)));
            row.extend([fmt(p.force), fmt(p.length()), p.stability.to_string()]);
            writeln!(w, "{}", row.join(","))?;
        }
    }
    Ok(())
}

/// Rate sweep with columns `v, element, from_phase, to_phase`; rows with no
/// event leave the last three empty.
pub fn write_selection_csv<W: Write>(mut w: W, direction_sign: f64, map: &[Selection]) -> Result<()> {
    writeln!(w, "v,element,from_phase,to_phase")?;
    for s in map {
        match &s.first {
            Some(h) => writeln!(
                w,
                "{},{},{},{}",
                fmt(direction_sign * s.v),
                h.element,
                h.from_phase.as_char(),
                h.to_phase.as_char()
            )?,
            None => writeln!(w, "{},,,", fmt(direction_sign * s.v))?,
        }
    }
    Ok(())
}

/// Critical-rate table as CSV with columns `method, extend, contract`.
pub fn write_rate_table_csv<W: Write>(mut w: W, rows: &[RateRow]) -> Result<()> {
    writeln!(w, "method,extend,contract")?;
    let cell = |x: Option<f64>| x.map(fmt).unwrap_or_default();
    for r in rows {
        writeln!(w, "{},{},{}", r.method, cell(r.extend), cell(r.contract))?;
    }
    Ok(())
}

/// Critical-rate table as aligned text, rates in mm/s.
pub fn rate_table_text(rows: &[RateRow]) -> String {
    let cell = |x: Option<f64>| x.map(|v| format!("{v:.3}")).unwrap_or_else(|| "n/a".into());
    let mut out = format!("{:<16}{:>14}{:>14}\n", "method", "extend v>0", "contract v<0");
    for r in rows {
        out.push_str(&format!(
            "{:<16}{:>14}{:>14}\n",
            r.method,
            cell(r.extend),
            cell(r.contract)
        ));
    }
    out
}

pub fn events_to_json(events: &[TransitionEvent]) -> Result<String> {
    Ok(serde_json::to_string_pretty(events)?)
}

pub fn events_from_json(text: &str) -> Result<Vec<TransitionEvent>> {
    Ok(serde_json::from_str(text)?)
}

/// Summary line for an interval, e.g. for logs.
pub fn interval_text(i: &RateInterval) -> String {
    let lo = if i.open_below {
        "0".to_string()
    } else {
        format!("{:.4}", i.lo)
    };
    let hi = if i.open_above {
        format!("{:.4}+", i.hi)
    } else {
        format!("{:.4}", i.hi)
    };
    format!("{} [{lo}, {hi}] mm/s", i.direction)
}
