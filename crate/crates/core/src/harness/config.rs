//! Flat key/value experiment configuration (TOML syntax, no tables).

use std::path::Path;

use toml::Value;

use crate::error::{Error, Result};
use crate::harness::records::Method;
use crate::network::pipeline::LossMode;
use crate::network::train::TrainingConfig;
use crate::network::RangeMode;
use crate::quantization::Resolution;
use crate::signal::{snr_to_sigma2, SystemConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub m: usize,
    pub n: usize,
    pub agents: usize,
    pub k_max: usize,
    pub bits: u32,
    pub snr_db: f64,
    pub rho: f64,
    pub coherence: usize,
    pub seed: u64,
    pub training: TrainingConfig,
    /// Channel realizations per Monte Carlo point.
    pub eval_realizations: usize,
    /// Source/noise draws per channel realization.
    pub eval_draws: usize,
    /// Realizations (disjoint from evaluation) used to pick baseline range scales.
    pub calibration_realizations: usize,
    pub calibration_draws: usize,
    pub q_infinite: bool,
    pub mse_target: f64,
    /// Compare `mse / N` (instead of the summed MSE) with `mse_target`.
    pub mse_per_component: bool,
    pub bcd_max_iters: usize,
    pub bcd_rel_tol: f64,
    pub methods: Vec<Method>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            m: 64,
            n: 6,
            agents: 3,
            k_max: 6,
            bits: 6,
            snr_db: 0.0,
            rho: 0.0,
            coherence: 200,
            seed: 1,
            training: TrainingConfig::default(),
            eval_realizations: 10_000,
            eval_draws: 10,
            calibration_realizations: 100,
            calibration_draws: 1000,
            q_infinite: false,
            mse_target: 1e-2,
            mse_per_component: true,
            bcd_max_iters: 100,
            bcd_rel_tol: 1e-8,
            methods: Method::ALL.to_vec(),
        }
    }
}

fn expect_int(key: &str, v: &Value) -> Result<i64> {
    v.as_integer()
        .ok_or_else(|| Error::config(key, format!("expected an integer, got `{v}`")))
}

fn expect_count(key: &str, v: &Value) -> Result<usize> {
    let i = expect_int(key, v)?;
    usize::try_from(i).map_err(|_| Error::config(key, format!("must be non-negative, got {i}")))
}

fn expect_float(key: &str, v: &Value) -> Result<f64> {
    match v {
        Value::Float(f) => Ok(*f),
        Value::Integer(i) => Ok(*i as f64),
        other => Err(Error::config(key, format!("expected a number, got `{other}`"))),
    }
}

fn expect_bool(key: &str, v: &Value) -> Result<bool> {
    v.as_bool()
        .ok_or_else(|| Error::config(key, format!("expected true or false, got `{v}`")))
}

fn expect_str<'a>(key: &str, v: &'a Value) -> Result<&'a str> {
    v.as_str()
        .ok_or_else(|| Error::config(key, format!("expected a string, got `{v}`")))
}

fn expect_array<'a>(key: &str, v: &'a Value) -> Result<&'a Vec<Value>> {
    v.as_array()
        .ok_or_else(|| Error::config(key, format!("expected an array, got `{v}`")))
}

pub fn parse_loss(key: &str, s: &str) -> Result<LossMode> {
    if s == "progressive" {
        return Ok(LossMode::ProgressiveSum);
    }
    s.strip_prefix("single:")
        .and_then(|k| k.parse().ok())
        .map(LossMode::SingleStage)
        .ok_or_else(|| Error::config(key, format!("expected `progressive` or `single:<K>`, got `{s}`")))
}

pub fn format_loss(loss: LossMode) -> String {
    match loss {
        LossMode::ProgressiveSum => "progressive".into(),
        LossMode::SingleStage(k) => format!("single:{k}"),
    }
}

/// Float formatting that TOML reads back as a float.
fn float(v: f64) -> String {
    let s = format!("{v:?}");
    if s.contains(['.', 'e', 'E', 'n', 'i']) {
        s
    } else {
        format!("{s}.0")
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config("<file>", e.message().to_string()))?;
        let mut cfg = Self::default();
        for (key, value) in &table {
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    fn set(&mut self, key: &str, v: &Value) -> Result<()> {
        let t = &mut self.training;
        match key {
            "M" => self.m = expect_count(key, v)?,
            "N" => self.n = expect_count(key, v)?,
            "B" => self.agents = expect_count(key, v)?,
            "K_max" => self.k_max = expect_count(key, v)?,
            "Q" => self.bits = u32::try_from(expect_count(key, v)?).map_err(|_| Error::config(key, "too large"))?,
            "snr_db" => self.snr_db = expect_float(key, v)?,
            "rho" => self.rho = expect_float(key, v)?,
            "T" => self.coherence = expect_count(key, v)?,
            "seed" => {
                self.seed =
                    u64::try_from(expect_int(key, v)?).map_err(|_| Error::config(key, "must be non-negative"))?
            }
            "batch_size" => t.batch_size = expect_count(key, v)?,
            "lr_start" => t.lr_start = expect_float(key, v)?,
            "lr_end" => t.lr_end = expect_float(key, v)?,
            "beta1" => t.beta1 = expect_float(key, v)?,
            "beta2" => t.beta2 = expect_float(key, v)?,
            "adam_epsilon" => t.adam_epsilon = expect_float(key, v)?,
            "validation_size" => t.validation_size = expect_count(key, v)?,
            "patience" => t.patience = expect_count(key, v)?,
            "batches_per_epoch" => t.batches_per_epoch = expect_count(key, v)?,
            "max_epochs" => t.max_epochs = expect_count(key, v)?,
            "loss" => t.loss = parse_loss(key, expect_str(key, v)?)?,
            "range_mode" => t.range_mode = RangeMode::parse(expect_str(key, v)?)?,
            "hidden" => {
                t.hidden = expect_array(key, v)?
                    .iter()
                    .map(|w| expect_count(key, w))
                    .collect::<Result<_>>()?
            }
            "tied_heads" => t.tied_heads = expect_bool(key, v)?,
            "calibration_size" => t.calibration_size = expect_count(key, v)?,
            "eval_realizations" => self.eval_realizations = expect_count(key, v)?,
            "eval_draws" => self.eval_draws = expect_count(key, v)?,
            "calibration_realizations" => self.calibration_realizations = expect_count(key, v)?,
            "calibration_draws" => self.calibration_draws = expect_count(key, v)?,
            "q_infinite" => self.q_infinite = expect_bool(key, v)?,
            "mse_target" => self.mse_target = expect_float(key, v)?,
            "mse_per_component" => self.mse_per_component = expect_bool(key, v)?,
            "bcd_max_iters" => self.bcd_max_iters = expect_count(key, v)?,
            "bcd_rel_tol" => self.bcd_rel_tol = expect_float(key, v)?,
            "methods" => {
                self.methods = expect_array(key, v)?
                    .iter()
                    .map(|m| Method::parse(expect_str(key, m)?))
                    .collect::<Result<_>>()?
            }
            other => return Err(Error::config(other, "unknown key")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.system().validate()?;
        if !self.snr_db.is_finite() {
            return Err(Error::config("snr_db", "must be finite"));
        }
        if !(1..=52).contains(&self.bits) {
            return Err(Error::config("Q", "must lie in 1..=52"));
        }
        self.training.validate()?;
        if let LossMode::SingleStage(k) = self.training.loss {
            if k == 0 || k > self.k_max {
                return Err(Error::config(
                    "loss",
                    format!("single-stage target {k} outside 1..={}", self.k_max),
                ));
            }
        }
        for (key, v) in [
            ("eval_realizations", self.eval_realizations),
            ("eval_draws", self.eval_draws),
            ("calibration_realizations", self.calibration_realizations),
            ("bcd_max_iters", self.bcd_max_iters),
        ] {
            if v == 0 {
                return Err(Error::config(key, "must be at least 1"));
            }
        }
        if self.calibration_draws < 2 {
            return Err(Error::config("calibration_draws", "must be at least 2"));
        }
        if !(self.mse_target > 0.0 && self.mse_target.is_finite()) {
            return Err(Error::config("mse_target", "must be positive"));
        }
        if !(self.bcd_rel_tol >= 0.0) {
            return Err(Error::config("bcd_rel_tol", "must be non-negative"));
        }
        if self.methods.is_empty() {
            return Err(Error::config("methods", "list at least one method"));
        }
        Ok(())
    }

    pub fn system(&self) -> SystemConfig {
        SystemConfig {
            m: self.m,
            n: self.n,
            agents: self.agents,
            k_max: self.k_max,
            bits: self.bits,
            sigma2: snr_to_sigma2(self.snr_db),
            rho: self.rho,
            coherence: self.coherence,
            root_seed: self.seed,
        }
    }

    pub fn resolution(&self) -> Resolution {
        if self.q_infinite {
            Resolution::Infinite
        } else {
            Resolution::Bits(self.bits)
        }
    }

    /// Training settings with the resolution of this experiment.
    pub fn training_config(&self) -> TrainingConfig {
        TrainingConfig {
            resolution: self.resolution(),
            ..self.training.clone()
        }
    }

    /// Every key with its current value, one per line, parseable back.
    pub fn to_toml(&self) -> String {
        let t = &self.training;
        let list = |items: Vec<String>| format!("[{}]", items.join(", "));
        let lines = [
            format!("M = {}", self.m),
            format!("N = {}", self.n),
            format!("B = {}", self.agents),
            format!("K_max = {}", self.k_max),
            format!("Q = {}", self.bits),
            format!("snr_db = {}", float(self.snr_db)),
            format!("rho = {}", float(self.rho)),
            format!("T = {}", self.coherence),
            format!("seed = {}", self.seed),
            format!("batch_size = {}", t.batch_size),
            format!("lr_start = {}", float(t.lr_start)),
            format!("lr_end = {}", float(t.lr_end)),
            format!("beta1 = {}", float(t.beta1)),
            format!("beta2 = {}", float(t.beta2)),
            format!("adam_epsilon = {}", float(t.adam_epsilon)),
            format!("validation_size = {}", t.validation_size),
            format!("patience = {}", t.patience),
            format!("batches_per_epoch = {}", t.batches_per_epoch),
            format!("max_epochs = {}", t.max_epochs),
            format!("loss = \"{}\"", format_loss(t.loss)),
            format!("range_mode = \"{}\"", t.range_mode.as_str()),
            format!("hidden = {}", list(t.hidden.iter().map(|w| w.to_string()).collect())),
            format!("tied_heads = {}", t.tied_heads),
            format!("calibration_size = {}", t.calibration_size),
            format!("eval_realizations = {}", self.eval_realizations),
            format!("eval_draws = {}", self.eval_draws),
            format!("calibration_realizations = {}", self.calibration_realizations),
            format!("calibration_draws = {}", self.calibration_draws),
            format!("q_infinite = {}", self.q_infinite),
            format!("mse_target = {}", float(self.mse_target)),
            format!("mse_per_component = {}", self.mse_per_component),
            format!("bcd_max_iters = {}", self.bcd_max_iters),
            format!("bcd_rel_tol = {}", float(self.bcd_rel_tol)),
            format!(
                "methods = {}",
                list(self.methods.iter().map(|m| format!("\"{}\"", m.as_str())).collect())
            ),
        ];
        lines.join("\n") + "\n"
    }
}
