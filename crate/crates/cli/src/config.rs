//! Experiment configuration: a TOML file, an optional preset and flag
//! overrides, applied in that order.

use std::path::{Path, PathBuf};

use cfl_core::encoder::GeneratorFamily;
use cfl_core::netsim::{HeterogeneityConfig, NoiseSpec, SnrReference, Training};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::CliError;

/// Parity rows the preset lets the server optimize over, as a fraction of
/// the total data.
pub const PRESET_PARITY_FRACTION: f64 = 0.28;
pub const PRESET_LEARNING_RATE: f64 = 0.0085;
pub const PRESET_SNR_DB: f64 = 0.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Uncoded,
    Coded,
    #[default]
    Both,
}

/// Heterogeneity values swept by the `sweep` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrid {
    pub nu_comp: Vec<f64>,
    pub nu_link: Vec<f64>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            nu_comp: vec![0.0, 0.1, 0.2],
            nu_link: vec![0.0, 0.1, 0.2],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub population: HeterogeneityConfig,
    pub learning_rate: f64,
    /// `inf` in TOML (`null` in JSON) for noiseless labels.
    #[serde(serialize_with = "ser_snr", deserialize_with = "de_snr")]
    pub snr_db: f64,
    pub snr_reference: SnrReference,
    pub generator: GeneratorFamily,
    pub delta_grid: Vec<f64>,
    pub nmse_targets: Vec<f64>,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub mode: Mode,
    pub max_epochs: usize,
    /// Allowed overshoot of the expected aggregate return, in points.
    pub tolerance: f64,
    /// Upper bound on parity rows for the joint plan; `None` means `m`.
    pub parity_cap: Option<usize>,
    pub histogram_epochs: usize,
    pub histogram_bins: usize,
    pub sweep: SweepGrid,
}

fn ser_snr<S: Serializer>(value: &f64, serializer: S) -> Result<S::Ok, S::Error> {
    if value.is_finite() {
        serializer.serialize_some(value)
    } else {
        serializer.serialize_none()
    }
}

fn de_snr<'de, D: Deserializer<'de>>(deserializer: D) -> Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(deserializer)?.unwrap_or(f64::INFINITY))
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            population: HeterogeneityConfig::paper(),
            learning_rate: PRESET_LEARNING_RATE,
            snr_db: PRESET_SNR_DB,
            snr_reference: SnrReference::default(),
            generator: GeneratorFamily::default(),
            delta_grid: vec![0.0, 0.13, 0.16, 0.28],
            nmse_targets: vec![0.1, 1e-3, 3e-4],
            seeds: (1..=5).collect(),
            output_dir: PathBuf::from("out"),
            mode: Mode::Both,
            max_epochs: 4000,
            tolerance: 1.0,
            parity_cap: None,
            histogram_epochs: 500,
            histogram_bins: 40,
            sweep: SweepGrid::default(),
        }
    }
}

/// Flag values that override the file and the preset.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub paper: bool,
    pub deltas: Vec<f64>,
    pub nu_comp: Vec<f64>,
    pub nu_link: Vec<f64>,
    pub seeds: Option<u64>,
    pub nmse_targets: Vec<f64>,
    pub out: Option<PathBuf>,
    pub max_epochs: Option<usize>,
    pub mode: Option<Mode>,
    pub parity_cap: Option<usize>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Pins the physical constants, learning rate and SNR of the reference
    /// setup. Heterogeneity, seeds and grids are left alone.
    pub fn apply_preset(&mut self) {
        let preset = HeterogeneityConfig::paper();
        self.population = HeterogeneityConfig {
            nu_comp: self.population.nu_comp,
            nu_link: self.population.nu_link,
            ..preset
        };
        self.learning_rate = PRESET_LEARNING_RATE;
        self.snr_db = PRESET_SNR_DB;
        self.snr_reference = SnrReference::default();
        let m = self.population.total_points() as f64;
        self.parity_cap = Some((PRESET_PARITY_FRACTION * m).round() as usize);
    }

    pub fn apply(&mut self, o: &Overrides) {
        if o.paper {
            self.apply_preset();
        }
        if !o.deltas.is_empty() {
            self.delta_grid = o.deltas.clone();
        }
        if let Some(&nu) = o.nu_comp.first() {
            self.population.nu_comp = nu;
            self.sweep.nu_comp = o.nu_comp.clone();
        }
        if let Some(&nu) = o.nu_link.first() {
            self.population.nu_link = nu;
            self.sweep.nu_link = o.nu_link.clone();
        }
        if let Some(n) = o.seeds {
            self.seeds = (1..=n).collect();
        }
        if !o.nmse_targets.is_empty() {
            self.nmse_targets = o.nmse_targets.clone();
        }
        if let Some(out) = &o.out {
            self.output_dir = out.clone();
        }
        if let Some(n) = o.max_epochs {
            self.max_epochs = n;
        }
        if let Some(mode) = o.mode {
            self.mode = mode;
        }
        if let Some(cap) = o.parity_cap {
            self.parity_cap = Some(cap);
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |msg: String| Err(CliError::Config(msg));
        self.population
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        if let Some(d) = self.delta_grid.iter().find(|d| !(0.0..1.0).contains(*d)) {
            return bad(format!("delta {d} outside [0, 1)"));
        }
        if self.seeds.is_empty() {
            return bad("seeds must be nonempty".into());
        }
        if self.nmse_targets.is_empty() {
            return bad("nmse_targets must be nonempty".into());
        }
        if let Some(t) = self.nmse_targets.iter().find(|t| !(t.is_finite() && **t > 0.0)) {
            return bad(format!("NMSE target {t} must be positive"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if self.snr_db.is_nan() || self.snr_db == f64::NEG_INFINITY {
            return bad(format!("snr_db {} is not usable", self.snr_db));
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be positive".into());
        }
        if !(self.tolerance.is_finite() && self.tolerance >= 0.0) {
            return bad(format!("tolerance {} must be nonnegative", self.tolerance));
        }
        if self.histogram_epochs == 0 || self.histogram_bins == 0 {
            return bad("histogram_epochs and histogram_bins must be positive".into());
        }
        let grid = self.sweep.nu_comp.iter().chain(&self.sweep.nu_link);
        if let Some(nu) = grid.clone().find(|nu| !(0.0..1.0).contains(*nu)) {
            return bad(format!("heterogeneity {nu} outside [0, 1)"));
        }
        if self.sweep.nu_comp.is_empty() || self.sweep.nu_link.is_empty() {
            return bad("sweep grid must be nonempty".into());
        }
        Ok(())
    }

    pub fn noise(&self) -> NoiseSpec {
        if self.snr_db.is_finite() {
            NoiseSpec::new(self.snr_db, self.snr_reference)
        } else {
            NoiseSpec::noiseless()
        }
    }

    /// Training stops once the smallest NMSE target is reached.
    pub fn training(&self) -> Training {
        let target = self.nmse_targets.iter().copied().fold(f64::INFINITY, f64::min);
        Training {
            generator: self.generator,
            ..Training::new(self.learning_rate, self.max_epochs, Some(target))
        }
    }

    pub fn parity_cap(&self) -> usize {
        self.parity_cap.unwrap_or_else(|| self.population.total_points())
    }

    pub fn coded_deltas(&self) -> Vec<f64> {
        self.delta_grid.iter().copied().filter(|&d| d > 0.0).collect()
    }
}
