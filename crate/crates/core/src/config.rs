//! Run configuration (JSON).
//!
//! Every field has a default, so `{"seed": 7}` is a complete config.
//! Unknown fields are rejected.

use serde::{Deserialize, Serialize};

use crate::compress::CompressorSpec;
use crate::error::{Error, Result};
use crate::model::{DatasetSpec, ObjectiveKind, Partition};
use crate::sched::TimingModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Framework {
    /// Full-precision uploads.
    #[default]
    Asynfl,
    /// Compressed uploads without error feedback.
    Asynflc,
    /// Compressed uploads with error feedback.
    AsynflcEf,
}

impl Framework {
    pub fn compresses(self) -> bool {
        !matches!(self, Framework::Asynfl)
    }

    pub fn error_feedback(self) -> bool {
        matches!(self, Framework::AsynflcEf)
    }
}

/// How `eta` / `eta_g` map to the step sizes actually used.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    /// Use `eta` and `eta_g` as given.
    #[default]
    Fixed,
    /// `η = eta / (K √T)`, `η_g = eta_g · √(K n)`.
    SqrtT,
    /// `η = eta / (K τ_max T^{1/3})`, `η_g = eta_g · K`, with `τ_max` from the realised trace.
    CubeRoot,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectiveRates {
    pub eta: f64,
    pub eta_g: f64,
}

impl LrSchedule {
    pub fn effective(
        self,
        eta: f64,
        eta_g: f64,
        k: usize,
        n: usize,
        rounds: usize,
        tau_max: u32,
    ) -> EffectiveRates {
        let (k, n, t) = (k as f64, n as f64, rounds as f64);
        match self {
            LrSchedule::Fixed => EffectiveRates { eta, eta_g },
            LrSchedule::SqrtT => EffectiveRates {
                eta: eta / (k * t.sqrt()),
                eta_g: eta_g * (k * n).sqrt(),
            },
            LrSchedule::CubeRoot => EffectiveRates {
                eta: eta / (k * tau_max.max(1) as f64 * t.cbrt()),
                eta_g: eta_g * k,
            },
        }
    }
}

/// Compressor as written in a config: Top-k sizes may be given as an
/// absolute `k` or as a fraction `k_frac` of the model dimension.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CompressorConfig {
    Identity,
    Topk {
        #[serde(default)]
        k: Option<usize>,
        #[serde(default)]
        k_frac: Option<f64>,
    },
    SignScaled,
    SignRaw,
    Qsgd {
        s: u32,
    },
    TopkThenQsgd {
        #[serde(default)]
        k: Option<usize>,
        #[serde(default)]
        k_frac: Option<f64>,
        s: u32,
    },
}

impl Default for CompressorConfig {
    fn default() -> Self {
        CompressorConfig::Topk {
            k: None,
            k_frac: Some(0.1),
        }
    }
}

fn resolve_k(k: Option<usize>, k_frac: Option<f64>, d: usize) -> Result<usize> {
    match (k, k_frac) {
        (Some(k), None) => Ok(k),
        (None, Some(f)) if f > 0.0 && f <= 1.0 => Ok(((f * d as f64).round() as usize).clamp(1, d)),
        (None, Some(_)) => Err(Error::config("compressor.k_frac", "must lie in (0, 1]")),
        _ => Err(Error::config(
            "compressor.k",
            "give exactly one of `k` and `k_frac`",
        )),
    }
}

impl CompressorConfig {
    pub fn resolve(&self, d: usize) -> Result<CompressorSpec> {
        let spec = match *self {
            CompressorConfig::Identity => CompressorSpec::Identity,
            CompressorConfig::Topk { k, k_frac } => CompressorSpec::Topk {
                k: resolve_k(k, k_frac, d)?,
            },
            CompressorConfig::SignScaled => CompressorSpec::SignScaled,
            CompressorConfig::SignRaw => CompressorSpec::SignRaw,
            CompressorConfig::Qsgd { s } => CompressorSpec::Qsgd { s },
            CompressorConfig::TopkThenQsgd { k, k_frac, s } => CompressorSpec::TopkThenQsgd {
                k: resolve_k(k, k_frac, d)?,
                s,
            },
        };
        spec.validate(d)
            .map_err(|e| Error::config("compressor", e.to_string()))?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub classes: usize,
    pub examples_per_client: usize,
    pub dirichlet_alpha: f64,
    pub feature_dim: usize,
    pub noise_scale: f64,
    pub client_offset: f64,
    pub partition: Partition,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            classes: 10,
            examples_per_client: 64,
            dirichlet_alpha: 0.4,
            feature_dim: 200,
            noise_scale: 1.0,
            client_offset: 0.0,
            partition: Partition::Dirichlet,
        }
    }
}

/// Client training times are normal with means log-spaced over
/// `[mean_min, mean_max]` (client 0 fastest) and std `std_frac · mean`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimingConfig {
    pub window: f64,
    pub mean_min: f64,
    pub mean_max: f64,
    pub std_frac: f64,
    pub tau_cap: Option<u32>,
}

impl Default for TimingConfig {
    fn default() -> Self {
        TimingConfig {
            window: 500.0,
            mean_min: 200.0,
            mean_max: 1500.0,
            std_frac: 0.2,
            tau_cap: None,
        }
    }
}

impl TimingConfig {
    pub fn model(&self, n: usize) -> Result<TimingModel> {
        if !(self.window > 0.0 && self.window.is_finite()) {
            return Err(Error::config("timing.window", "must be positive"));
        }
        if !(self.mean_min > 0.0 && self.mean_max >= self.mean_min && self.mean_max.is_finite()) {
            return Err(Error::config(
                "timing.mean_min",
                "need 0 < mean_min <= mean_max",
            ));
        }
        if !(self.std_frac >= 0.0 && self.std_frac.is_finite()) {
            return Err(Error::config("timing.std_frac", "must be nonnegative"));
        }
        let ratio = self.mean_max / self.mean_min;
        let mean: Vec<f64> = (0..n)
            .map(|i| {
                let u = if n == 1 {
                    0.0
                } else {
                    i as f64 / (n - 1) as f64
                };
                self.mean_min * ratio.powf(u)
            })
            .collect();
        let std = mean.iter().map(|m| m * self.std_frac).collect();
        TimingModel::new(mean, std, self.window, self.tau_cap)
            .map_err(|e| Error::config("timing", e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub framework: Framework,
    pub objective: ObjectiveKind,
    pub data: DataConfig,
    pub compressor: CompressorConfig,
    /// Number of clients.
    pub n: usize,
    /// Number of global rounds `T`.
    pub rounds: usize,
    /// Local SGD steps per round `K`.
    pub local_steps: usize,
    pub batch_size: usize,
    pub eta: f64,
    pub eta_g: f64,
    pub lr_schedule: LrSchedule,
    pub timing: TimingConfig,
    pub seed: u64,
    /// Emit a metrics row every this many rounds.
    pub metrics_every: usize,
    /// Abort when `‖x_t‖` exceeds this.
    pub divergence_norm: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            framework: Framework::Asynfl,
            objective: ObjectiveKind::Quadratic { condition: 10.0 },
            data: DataConfig::default(),
            compressor: CompressorConfig::default(),
            n: 32,
            rounds: 2000,
            local_steps: 5,
            batch_size: 16,
            eta: 0.05,
            eta_g: 1.0,
            lr_schedule: LrSchedule::Fixed,
            timing: TimingConfig::default(),
            seed: 0,
            metrics_every: 1,
            divergence_norm: 1e8,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::config("<json>", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            n_clients: self.n,
            classes: self.data.classes,
            examples_per_client: self.data.examples_per_client,
            dirichlet_alpha: self.data.dirichlet_alpha,
            feature_dim: self.data.feature_dim,
            noise_scale: self.data.noise_scale,
            seed: self.seed,
            client_offset: self.data.client_offset,
            partition: self.data.partition,
        }
    }

    /// Model dimension implied by the objective and data shape.
    pub fn dim(&self) -> usize {
        let (f, c) = (self.data.feature_dim, self.data.classes);
        match self.objective {
            ObjectiveKind::Quadratic { .. } => f,
            ObjectiveKind::Logistic { .. } => c * (f + 1),
            ObjectiveKind::Mlp1 { hidden, .. } => hidden * (f + 1) + c * (hidden + 1),
        }
    }

    /// The compressor actually applied: AsynFL always uploads in full precision.
    pub fn compressor_spec(&self) -> Result<CompressorSpec> {
        if self.framework.compresses() {
            self.compressor.resolve(self.dim())
        } else {
            Ok(CompressorSpec::Identity)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |field: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(field, format!("must be positive, got {v}")))
            }
        };
        let at_least_one = |field: &str, v: usize| {
            if v >= 1 {
                Ok(())
            } else {
                Err(Error::config(field, "must be at least 1"))
            }
        };
        at_least_one("n", self.n)?;
        at_least_one("rounds", self.rounds)?;
        at_least_one("local_steps", self.local_steps)?;
        at_least_one("batch_size", self.batch_size)?;
        at_least_one("metrics_every", self.metrics_every)?;
        positive("eta", self.eta)?;
        positive("eta_g", self.eta_g)?;
        positive("divergence_norm", self.divergence_norm)?;
        self.dataset_spec()
            .validate()
            .map_err(|e| Error::config("data", e.to_string()))?;
        match self.objective {
            ObjectiveKind::Quadratic { condition }
                if !(condition >= 1.0 && condition.is_finite()) =>
            {
                return Err(Error::config("objective.condition", "must be >= 1"));
            }
            ObjectiveKind::Logistic { l2 } | ObjectiveKind::Mlp1 { l2, .. }
                if !(l2 >= 0.0 && l2.is_finite()) =>
            {
                return Err(Error::config("objective.l2", "must be nonnegative"));
            }
            ObjectiveKind::Mlp1 { hidden: 0, .. } => {
                return Err(Error::config("objective.hidden", "must be at least 1"));
            }
            _ => {}
        }
        self.compressor.resolve(self.dim())?;
        self.timing.model(self.n)?;
        Ok(())
    }
}
