//! Run configuration, read from TOML.
//!
//! ```toml
//! seed = 7
//!
//! [grid]
//! n = 128
//! length = 128.0
//!
//! [time]
//! dt = 0.01
//! t_end = 20.0
//! output = 40            # log-spaced count, or an explicit list of times
//!
//! [interaction]
//! sign = 1
//! coulomb.method = "freespace_doubling"
//!
//! [[initial_data.gaussians]]
//! occupation = 0.0107
//! center = [0.0, 0.0, 0.0]
//! width = 1.0
//! boost = [0.0, 0.0, 0.0]
//!
//! [scattering]
//! k_stride = 2
//! t1_cutoff = 1.0
//! fit_window = [2.0, 20.0]
//!
//! [output]
//! dir = "out"
//! snapshot_every = 10
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::coulomb::CoulombMethod;
use crate::ensemble::Interaction;
use crate::error::{Error, Result};
use crate::grid::GridSpec;
use crate::oracle::GaussianSpec;
use crate::propagator::steps_in;

/// Environment variable overriding `output.dir`.
pub const OUTPUT_DIR_ENV: &str = "HARTREE_OUTPUT_DIR";
/// Environment variable setting the worker thread count.
pub const THREADS_ENV: &str = "HARTREE_THREADS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub grid: GridSection,
    pub time: TimeSection,
    pub interaction: InteractionSection,
    pub initial_data: InitialData,
    #[serde(default)]
    pub scattering: ScatteringSection,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(default)]
    pub checks: ChecksSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub n: usize,
    pub length: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OutputTimes {
    LogSpaced(usize),
    Explicit(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeSection {
    pub dt: f64,
    pub t_end: f64,
    #[serde(default = "default_output")]
    pub output: OutputTimes,
    /// First time of a log-spaced schedule.
    #[serde(default = "default_t_min")]
    pub t_min: f64,
}

fn default_output() -> OutputTimes {
    OutputTimes::LogSpaced(40)
}

fn default_t_min() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InteractionSection {
    /// `+1` repulsive, `-1` attractive, `0` free flow.
    pub sign: i64,
    #[serde(default)]
    pub coulomb: CoulombSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoulombSection {
    #[serde(default = "default_method")]
    pub method: String,
}

impl Default for CoulombSection {
    fn default() -> Self {
        CoulombSection {
            method: default_method(),
        }
    }
}

fn default_method() -> String {
    CoulombMethod::FreespaceDoubling.as_str().to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianEntry {
    pub occupation: f64,
    pub center: [f64; 3],
    #[serde(default = "one")]
    pub width: f64,
    #[serde(default)]
    pub boost: [f64; 3],
}

fn one() -> f64 {
    1.0
}

impl From<&GaussianEntry> for GaussianSpec {
    fn from(g: &GaussianEntry) -> Self {
        GaussianSpec {
            occupation: g.occupation,
            center: g.center,
            width: g.width,
            boost: g.boost,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct InitialData {
    #[serde(default)]
    pub gaussians: Vec<GaussianEntry>,
    pub snapshot: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScatteringSection {
    #[serde(default = "default_stride")]
    pub k_stride: usize,
    #[serde(default = "one")]
    pub t1_cutoff: f64,
    #[serde(default = "default_fit_window")]
    pub fit_window: [f64; 2],
    #[serde(default = "default_phase_window")]
    pub phase_window: [f64; 2],
    /// Steps between recomputations of the asymptotic phase source.
    #[serde(default = "default_refresh")]
    pub refresh_every: usize,
    /// Reporting exponent of the weighted norms; never used for control flow.
    #[serde(default = "default_delta")]
    pub delta: f64,
}

fn default_stride() -> usize {
    2
}
fn default_fit_window() -> [f64; 2] {
    [2.0, 20.0]
}
fn default_phase_window() -> [f64; 2] {
    [5.0, 20.0]
}
fn default_refresh() -> usize {
    10
}
fn default_delta() -> f64 {
    0.05
}

impl Default for ScatteringSection {
    fn default() -> Self {
        ScatteringSection {
            k_stride: default_stride(),
            t1_cutoff: 1.0,
            fit_window: default_fit_window(),
            phase_window: default_phase_window(),
            refresh_every: default_refresh(),
            delta: default_delta(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "default_dir")]
    pub dir: PathBuf,
    /// Write a snapshot at every k-th record; 0 disables snapshots.
    #[serde(default)]
    pub snapshot_every: usize,
    /// Continue from the latest snapshot in `dir` when one exists.
    #[serde(default)]
    pub resume: bool,
}

fn default_dir() -> PathBuf {
    PathBuf::from("out")
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: default_dir(),
            snapshot_every: 0,
            resume: false,
        }
    }
}

/// Checks evaluated in the run summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ChecksSection {
    #[serde(default)]
    pub enabled: Vec<String>,
}

pub const KNOWN_CHECKS: [&str; 6] = [
    "conservation",
    "density_decay",
    "potential_decay",
    "density_formula",
    "phase_consistency",
    "modified_scattering",
];

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a config; relative paths resolve against the
    /// config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let Some(s) = cfg.initial_data.snapshot.as_mut() {
            if s.is_relative() {
                *s = base.join(&*s);
            }
        }
        if cfg.output.dir.is_relative() {
            cfg.output.dir = base.join(&cfg.output.dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Applies `HARTREE_OUTPUT_DIR` when set.
    pub fn apply_env(&mut self) {
        if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV) {
            self.output.dir = PathBuf::from(dir);
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.grid_spec()?;
        let t = &self.time;
        if !(t.dt.is_finite() && t.dt > 0.0) {
            return Err(Error::Config(format!("time.dt must be positive, got {}", t.dt)));
        }
        if !(t.t_end.is_finite() && t.t_end >= 0.0) {
            return Err(Error::Config(format!("time.t_end must be nonnegative, got {}", t.t_end)));
        }
        if steps_in(t.t_end, t.dt).is_none() {
            return Err(Error::Config(format!("time.t_end = {} is not a multiple of dt = {}", t.t_end, t.dt)));
        }
        if let OutputTimes::Explicit(list) = &t.output {
            for &s in list {
                if s < 0.0 || s > t.t_end + 1e-9 || steps_in(s, t.dt).is_none() {
                    return Err(Error::Config(format!(
                        "output time {s} must lie in [0, t_end] on multiples of dt"
                    )));
                }
            }
            if list.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::Config("output times must be strictly increasing".into()));
            }
        }
        self.interaction()?;
        self.method()?;
        let init = &self.initial_data;
        match (&init.snapshot, init.gaussians.is_empty()) {
            (Some(_), false) => {
                return Err(Error::Config(
                    "initial_data takes either gaussians or a snapshot, not both".into(),
                ))
            }
            (None, true) => return Err(Error::Config("initial_data is empty".into())),
            (Some(p), true) if !p.is_file() => {
                return Err(Error::Config(format!("snapshot {} does not exist", p.display())))
            }
            _ => {}
        }
        for g in &init.gaussians {
            if !(g.occupation > 0.0 && g.width > 0.0) {
                return Err(Error::Config("gaussian occupation and width must be positive".into()));
            }
        }
        let s = &self.scattering;
        if s.k_stride == 0 {
            return Err(Error::Config("scattering.k_stride must be at least 1".into()));
        }
        for w in [s.fit_window, s.phase_window] {
            if !(w[0] > 0.0 && w[1] > w[0]) {
                return Err(Error::Config(format!("invalid window {w:?}")));
            }
        }
        for c in &self.checks.enabled {
            if !KNOWN_CHECKS.contains(&c.as_str()) {
                return Err(Error::Config(format!("unknown check {c:?}")));
            }
        }
        Ok(())
    }

    pub fn grid_spec(&self) -> Result<GridSpec> {
        GridSpec::new(self.grid.n, self.grid.length).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn interaction(&self) -> Result<Interaction> {
        Interaction::from_sign(self.interaction.sign).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn method(&self) -> Result<CoulombMethod> {
        self.interaction.coulomb.method.parse()
    }

    pub fn gaussians(&self) -> Vec<GaussianSpec> {
        self.initial_data.gaussians.iter().map(GaussianSpec::from).collect()
    }

    /// Output times after `t0`, snapped to the step lattice.
    ///
    /// A log-spaced schedule covers `[t_min, t_end]` geometrically and also
    /// includes every power of two in that range.
    pub fn schedule(&self, t0: f64) -> Vec<f64> {
        let t = &self.time;
        let snap = |s: f64| (s / t.dt).round() * t.dt;
        let mut times: Vec<f64> = match &t.output {
            OutputTimes::Explicit(list) => list.clone(),
            OutputTimes::LogSpaced(count) => {
                if t.t_end <= 0.0 || *count == 0 {
                    Vec::new()
                } else {
                    let lo = t.t_min.max(t.dt).min(t.t_end);
                    let mut v: Vec<f64> = (0..*count)
                        .map(|i| {
                            let f = if *count == 1 { 1.0 } else { i as f64 / (*count - 1) as f64 };
                            snap(lo * (t.t_end / lo).powf(f))
                        })
                        .collect();
                    let mut p = 1.0;
                    while p <= t.t_end + 1e-12 {
                        if p >= lo {
                            v.push(snap(p));
                        }
                        p *= 2.0;
                    }
                    v
                }
            }
        };
        times.sort_by(f64::total_cmp);
        times.dedup_by(|a, b| (*a - *b).abs() < 0.5 * t.dt);
        times.retain(|&s| s > t0 + 0.5 * t.dt);
        times
    }

    /// Powers of two in the schedule, used as anchors for dyadic profile
    /// differences.
    pub fn dyadic_anchors(&self) -> Vec<f64> {
        let mut out = Vec::new();
        let mut p = 1.0;
        while p <= self.time.t_end + 1e-12 {
            out.push(p);
            p *= 2.0;
        }
        out
    }

    /// The acceptance experiment: rank 4, width-1 Gaussians with occupations
    /// `ε(1, 1/2, 1/4, 1/8)` and trace 0.02, repulsive, on `n = L = 128`.
    pub fn default_experiment() -> Self {
        let eps = 0.02 / 1.875;
        let centers = [[0.0, 0.0, 0.0], [1.5, 0.0, 0.0], [0.0, 1.5, 0.0], [0.0, 0.0, -1.5]];
        let boosts = [[0.0, 0.0, 0.0], [0.1, 0.0, 0.0], [0.0, -0.1, 0.0], [0.05, 0.05, 0.05]];
        let gaussians = (0..4)
            .map(|j| GaussianEntry {
                occupation: eps / (1 << j) as f64,
                center: centers[j],
                width: 1.0,
                boost: boosts[j],
            })
            .collect();
        RunConfig {
            seed: 0,
            grid: GridSection { n: 128, length: 128.0 },
            time: TimeSection {
                dt: 0.01,
                t_end: 20.0,
                output: default_output(),
                t_min: default_t_min(),
            },
            interaction: InteractionSection {
                sign: 1,
                coulomb: CoulombSection::default(),
            },
            initial_data: InitialData {
                gaussians,
                snapshot: None,
            },
            scattering: ScatteringSection::default(),
            output: OutputSection::default(),
            checks: ChecksSection {
                enabled: KNOWN_CHECKS.iter().map(|s| s.to_string()).collect(),
            },
        }
    }
}
