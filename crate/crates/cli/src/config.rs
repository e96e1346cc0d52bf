//! Experiment configuration files.
//!
//! One JSON object per run. The `command` key picks the experiment and every
//! other key belongs to that command; anything unrecognised is rejected.

use std::f64::consts::PI;
use std::path::Path;

use oscavg_core::seeker::FilterInit;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Built-in systems a config can name.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SystemName {
    SeekerLog,
    SeekerQuadratic,
    /// `ẋ = −x + sin τ + y cos τ`, `ẏ = −ω(y − x)`.
    LinearTest,
    /// A bare fast layer `ẏ = ω·diag(−1, −2)·y` over a frozen scalar `x`.
    BoundaryLayer,
}

impl SystemName {
    /// Name of the scalar field for the seeker systems.
    pub fn field_name(self) -> Option<&'static str> {
        match self {
            SystemName::SeekerLog => Some("log"),
            SystemName::SeekerQuadratic => Some("quadratic"),
            _ => None,
        }
    }

    pub fn is_seeker(self) -> bool {
        self.field_name().is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ExperimentConfig {
    Simulate(SimulateConfig),
    AverageCheck(AverageCheckConfig),
    Sweep(SweepConfig),
    StabilityProbe(ProbeConfig),
    BvpCheck(BvpCheckConfig),
    LyapunovCheck(LyapunovCheckConfig),
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CliError::Validation(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn command(&self) -> &'static str {
        match self {
            ExperimentConfig::Simulate(_) => "simulate",
            ExperimentConfig::AverageCheck(_) => "average-check",
            ExperimentConfig::Sweep(_) => "sweep",
            ExperimentConfig::StabilityProbe(_) => "stability-probe",
            ExperimentConfig::BvpCheck(_) => "bvp-check",
            ExperimentConfig::LyapunovCheck(_) => "lyapunov-check",
        }
    }

    /// Collects every problem at once rather than stopping at the first.
    pub fn validate(&self) -> Result<(), CliError> {
        let mut bad = Vec::new();
        match self {
            ExperimentConfig::Simulate(c) => c.check(&mut bad),
            ExperimentConfig::AverageCheck(c) => c.check(&mut bad),
            ExperimentConfig::Sweep(c) => c.check(&mut bad),
            ExperimentConfig::StabilityProbe(c) => c.check(&mut bad),
            ExperimentConfig::BvpCheck(c) => c.check(&mut bad),
            ExperimentConfig::LyapunovCheck(c) => c.check(&mut bad),
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(CliError::Validation(bad.join("; ")))
        }
    }
}

fn positive(bad: &mut Vec<String>, key: &str, v: f64) {
    if !(v.is_finite() && v > 0.0) {
        bad.push(format!("{key} must be positive and finite (got {v})"));
    }
}

fn non_negative(bad: &mut Vec<String>, key: &str, v: f64) {
    if !(v.is_finite() && v >= 0.0) {
        bad.push(format!("{key} must be non-negative and finite (got {v})"));
    }
}

fn file_name(bad: &mut Vec<String>, key: &str, name: &str) {
    // Outputs land in --out-dir; a config may not escape it.
    let p = Path::new(name);
    if name.is_empty() || p.components().count() != 1 || p.is_absolute() || name == ".." || name == "." {
        bad.push(format!("{key} must be a plain file name (got '{name}')"));
    }
}

fn default_omega() -> f64 {
    4.0 * PI
}

fn default_steps() -> usize {
    200
}

fn default_true() -> bool {
    true
}

fn default_seed() -> u64 {
    2024
}

/// Initial state. For the seeker systems `x0` is the position `p(0)`
/// (default `[6, 2, −2]`) and `attitude` is `R(0)` row by row (default `I`);
/// the test systems take a one-element `x0` (default `[1]`) and no attitude.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialState {
    #[serde(default)]
    pub x0: Option<Vec<f64>>,
    #[serde(default)]
    pub attitude: Option<[[f64; 3]; 3]>,
    #[serde(default)]
    pub filter_init: FilterInit,
}

impl Default for InitialState {
    fn default() -> Self {
        Self { x0: None, attitude: None, filter_init: FilterInit::QuasiSteady }
    }
}

impl InitialState {
    fn check(&self, system: SystemName, bad: &mut Vec<String>) {
        let want = if system.is_seeker() { 3 } else { 1 };
        if let Some(x0) = &self.x0 {
            if x0.len() != want {
                bad.push(format!("initial.x0 needs {want} entries for {system:?} (got {})", x0.len()));
            }
            if x0.iter().any(|v| !v.is_finite()) {
                bad.push("initial.x0 must be finite".into());
            }
        }
        if self.attitude.is_some() && !system.is_seeker() {
            bad.push("initial.attitude only applies to the seeker systems".into());
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    #[serde(default = "default_system")]
    pub system: SystemName,
    #[serde(default = "default_omega")]
    pub omega: f64,
    #[serde(default)]
    pub initial: InitialState,
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    #[serde(default = "default_steps")]
    pub steps_per_fast_period: usize,
    /// Keep every `stride`-th step in the CSV.
    #[serde(default = "default_stride")]
    pub stride: usize,
    #[serde(default = "default_true")]
    pub projection: bool,
    /// Also compare the raw kinematics against the transformed system over one fast period.
    #[serde(default = "default_true")]
    pub cross_check: bool,
    #[serde(default = "default_trajectory")]
    pub output: String,
    #[serde(default = "default_summary")]
    pub summary: String,
}

fn default_system() -> SystemName {
    SystemName::SeekerLog
}

fn default_horizon() -> f64 {
    100.0
}

fn default_stride() -> usize {
    20
}

fn default_trajectory() -> String {
    "trajectory.csv".into()
}

fn default_summary() -> String {
    "simulate_summary.json".into()
}

impl SimulateConfig {
    fn check(&self, bad: &mut Vec<String>) {
        positive(bad, "omega", self.omega);
        non_negative(bad, "horizon", self.horizon);
        if self.steps_per_fast_period < 50 {
            bad.push("steps_per_fast_period must be at least 50".into());
        }
        if self.stride == 0 {
            bad.push("stride must be at least 1".into());
        }
        self.initial.check(self.system, bad);
        file_name(bad, "output", &self.output);
        file_name(bad, "summary", &self.summary);
        if self.output == self.summary {
            bad.push("output and summary must differ".into());
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AverageCheckConfig {
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default = "default_fields")]
    pub fields: Vec<SystemName>,
    #[serde(default = "default_panels")]
    pub panels: usize,
    #[serde(default = "default_average_out")]
    pub output: String,
}

fn default_samples() -> usize {
    20
}

fn default_tolerance() -> f64 {
    1e-6
}

fn default_fields() -> Vec<SystemName> {
    vec![SystemName::SeekerLog, SystemName::SeekerQuadratic]
}

fn default_panels() -> usize {
    oscavg_core::numkit::DEFAULT_PANELS
}

fn default_average_out() -> String {
    "average_check.json".into()
}

fn check_panels(bad: &mut Vec<String>, panels: usize) {
    if panels < 8 || !panels.is_multiple_of(2) {
        bad.push(format!("panels must be even and at least 8 (got {panels})"));
    }
}

impl AverageCheckConfig {
    fn check(&self, bad: &mut Vec<String>) {
        if self.samples == 0 {
            bad.push("samples must be at least 1".into());
        }
        non_negative(bad, "tolerance", self.tolerance);
        if self.fields.is_empty() {
            bad.push("fields is empty".into());
        }
        if let Some(f) = self.fields.iter().find(|f| !f.is_seeker()) {
            bad.push(format!("fields may only name seeker systems (got {f:?})"));
        }
        check_panels(bad, self.panels);
        file_name(bad, "output", &self.output);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default = "default_sweep_system")]
    pub system: SystemName,
    #[serde(default = "default_ladder")]
    pub omegas: Vec<f64>,
    #[serde(default = "default_sweep_horizon")]
    pub horizon: f64,
    #[serde(default)]
    pub initial: InitialState,
    #[serde(default = "default_steps")]
    pub steps_per_fast_period: usize,
    #[serde(default = "default_averaged_dt")]
    pub averaged_dt: f64,
    #[serde(default = "default_sweep_stride")]
    pub stride: usize,
    #[serde(default = "default_true")]
    pub projection: bool,
    /// The slope criterion: pass when the fitted log-log slope is at most this.
    #[serde(default = "default_max_slope")]
    pub max_slope: f64,
    #[serde(default = "default_sweep_out")]
    pub output: String,
}

fn default_sweep_system() -> SystemName {
    SystemName::SeekerQuadratic
}

fn default_ladder() -> Vec<f64> {
    (0..5).map(|k| 4.0 * PI * 2f64.powi(k)).collect()
}

fn default_sweep_horizon() -> f64 {
    5.0
}

fn default_averaged_dt() -> f64 {
    1e-3
}

fn default_sweep_stride() -> usize {
    50
}

fn default_max_slope() -> f64 {
    -0.4
}

fn default_sweep_out() -> String {
    "sweep.json".into()
}

impl SweepConfig {
    fn check(&self, bad: &mut Vec<String>) {
        if self.system == SystemName::BoundaryLayer {
            bad.push("boundary-layer has no slow motion to sweep".into());
        }
        if self.omegas.len() < 4 {
            bad.push(format!("omegas needs at least 4 entries (got {})", self.omegas.len()));
        }
        for w in &self.omegas {
            positive(bad, "omegas[..]", *w);
        }
        positive(bad, "horizon", self.horizon);
        positive(bad, "averaged_dt", self.averaged_dt);
        if !self.max_slope.is_finite() {
            bad.push("max_slope must be finite".into());
        }
        if self.steps_per_fast_period < 50 {
            bad.push("steps_per_fast_period must be at least 50".into());
        }
        if self.stride == 0 {
            bad.push("stride must be at least 1".into());
        }
        self.initial.check(self.system, bad);
        file_name(bad, "output", &self.output);
    }
}

/// What the probe runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProbeModel {
    /// The full oscillatory system.
    Full,
    /// The ω-free averaged seeker.
    Averaged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    #[serde(default = "default_probe_system")]
    pub system: SystemName,
    #[serde(default = "default_model")]
    pub model: ProbeModel,
    pub epsilon_x: f64,
    pub epsilon_z: f64,
    /// `[δ_x, δ_z]` pairs.
    pub deltas: Vec<(f64, f64)>,
    #[serde(default)]
    pub omegas: Vec<f64>,
    pub horizon: f64,
    #[serde(default = "default_settle")]
    pub settle_fraction: f64,
    #[serde(default = "default_steps")]
    pub steps_per_fast_period: usize,
    /// Step of the averaged model.
    #[serde(default = "default_probe_dt")]
    pub dt: f64,
    #[serde(default = "default_true")]
    pub projection: bool,
    #[serde(default = "default_probe_out")]
    pub output: String,
}

fn default_probe_system() -> SystemName {
    SystemName::SeekerQuadratic
}

fn default_model() -> ProbeModel {
    ProbeModel::Full
}

fn default_settle() -> f64 {
    0.75
}

fn default_probe_dt() -> f64 {
    0.01
}

fn default_probe_out() -> String {
    "stability_probe.json".into()
}

impl ProbeConfig {
    fn check(&self, bad: &mut Vec<String>) {
        if self.model == ProbeModel::Averaged && !self.system.is_seeker() {
            bad.push("the averaged model exists only for the seeker systems".into());
        }
        if self.deltas.is_empty() {
            bad.push("deltas is empty".into());
        }
        if self.model == ProbeModel::Full && self.omegas.is_empty() {
            bad.push("omegas is empty".into());
        }
        positive(bad, "dt", self.dt);
        if self.steps_per_fast_period < 50 {
            bad.push("steps_per_fast_period must be at least 50".into());
        }
        // The remaining settings are checked by the probe itself.
        file_name(bad, "output", &self.output);
    }
}

/// Corrector problems with known answers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BvpCase {
    /// `m = 1`, `A = −1`, `b = cos τ`; exact solution `(cos τ + sin τ)/2`.
    Cosine,
    /// The filter's Jordan block with `b = (sin τ, cos τ)`, checked against forward integration.
    Jordan,
    SeekerPhi1,
    SeekerPhi2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BvpCheckConfig {
    #[serde(default = "default_cases")]
    pub cases: Vec<BvpCase>,
    #[serde(default = "default_bvp_panels")]
    pub panels: usize,
    /// Field used by the seeker cases.
    #[serde(default = "default_system")]
    pub field: SystemName,
    #[serde(default = "default_bvp_samples")]
    pub samples: usize,
    #[serde(default = "default_bvp_seed")]
    pub seed: u64,
    #[serde(default = "default_tolerance")]
    pub threshold: f64,
    #[serde(default = "default_bvp_out")]
    pub output: String,
}

fn default_cases() -> Vec<BvpCase> {
    vec![BvpCase::Cosine, BvpCase::Jordan, BvpCase::SeekerPhi1, BvpCase::SeekerPhi2]
}

fn default_bvp_panels() -> usize {
    512
}

fn default_bvp_samples() -> usize {
    5
}

fn default_bvp_seed() -> u64 {
    7
}

fn default_bvp_out() -> String {
    "bvp_check.json".into()
}

impl BvpCheckConfig {
    fn check(&self, bad: &mut Vec<String>) {
        if self.cases.is_empty() {
            bad.push("cases is empty".into());
        }
        check_panels(bad, self.panels);
        if !self.field.is_seeker() {
            bad.push(format!("field must name a seeker system (got {:?})", self.field));
        }
        if self.samples == 0 {
            bad.push("samples must be at least 1".into());
        }
        non_negative(bad, "threshold", self.threshold);
        file_name(bad, "output", &self.output);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LyapunovCheckConfig {
    #[serde(default = "default_fields")]
    pub fields: Vec<SystemName>,
    #[serde(default = "default_starts")]
    pub starts: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_probe_dt")]
    pub dt: f64,
    #[serde(default = "default_lyap_horizon")]
    pub horizon: f64,
    /// Largest per-step increase of `V_c` still counted as nonincreasing.
    #[serde(default = "default_increase_tol")]
    pub increase_tolerance: f64,
    /// Gradient norm every quadratic-field run has to reach by the horizon.
    #[serde(default = "default_grad_threshold")]
    pub gradient_threshold: f64,
    #[serde(default = "default_lyap_out")]
    pub output: String,
}

fn default_starts() -> usize {
    10
}

fn default_lyap_horizon() -> f64 {
    200.0
}

fn default_increase_tol() -> f64 {
    1e-9
}

fn default_grad_threshold() -> f64 {
    1e-3
}

fn default_lyap_out() -> String {
    "lyapunov_check.json".into()
}

impl LyapunovCheckConfig {
    fn check(&self, bad: &mut Vec<String>) {
        if self.fields.is_empty() {
            bad.push("fields is empty".into());
        }
        if let Some(f) = self.fields.iter().find(|f| !f.is_seeker()) {
            bad.push(format!("fields may only name seeker systems (got {f:?})"));
        }
        if self.starts == 0 {
            bad.push("starts must be at least 1".into());
        }
        positive(bad, "dt", self.dt);
        positive(bad, "horizon", self.horizon);
        non_negative(bad, "increase_tolerance", self.increase_tolerance);
        positive(bad, "gradient_threshold", self.gradient_threshold);
        file_name(bad, "output", &self.output);
    }
}
