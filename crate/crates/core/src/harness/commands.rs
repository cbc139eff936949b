//! The experiment commands behind the CLI.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{
    argmin, bcd_policy, calibrate_dynamic_ranges, evd_policies, ranges_from_shared_scale, BcdSettings, CalibrationGrid,
    CalibrationMode,
};
use crate::cost::{cost_global, cost_local, crossover_t, normalized_cost, Crossover};
use crate::error::{Error, Result};
use crate::fusion::{full_observation_lower_bound, squared_errors, CompressionPolicy, EstimatorBank};
use crate::harness::config::{format_loss, ExperimentConfig};
use crate::harness::records::{
    guarded, read_csv, read_records, to_csv, to_csv_headed, write_atomic, ExperimentRecord, Method, RunManifest,
};
use crate::network::checkpoint;
use crate::network::pipeline::LossMode;
use crate::network::train::{calibrate, freeze_policy, train_observed, EpochLog, TrainingConfig, TrainingLog};
use crate::network::{PolicyNetwork, RangeMode};
use crate::numerics::{mean_and_stderr, Matrix, RngStream};
use crate::quantization::Resolution;
use crate::signal::{build_source_covariance, sample_channels, sample_source, ChannelSet, SourceModel};

/// Options shared by every command.
#[derive(Clone, Debug)]
pub struct RunContext {
    pub out: PathBuf,
    /// Fill `wall_time_s`; off by default so reruns are byte-identical.
    pub timing: bool,
    /// Print progress lines to stderr.
    pub verbose: bool,
}

impl RunContext {
    pub fn new(out: impl Into<PathBuf>) -> Self {
        Self {
            out: out.into(),
            timing: false,
            verbose: false,
        }
    }

    fn prepare(&self) -> Result<()> {
        fs::create_dir_all(&self.out).map_err(|e| Error::io(&self.out, e))
    }

    fn note(&self, msg: impl AsRef<str>) {
        if self.verbose {
            eprintln!("{}", msg.as_ref());
        }
    }
}

// ---------------------------------------------------------------------------
// trained networks

/// What to train: a label for humans plus the full training settings.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    pub label: String,
    pub training: TrainingConfig,
}

impl NetworkSpec {
    pub fn progressive(cfg: &ExperimentConfig) -> Self {
        Self::with(cfg, "progressive", LossMode::ProgressiveSum, RangeMode::BatchStatistic)
    }

    pub fn fixed(cfg: &ExperimentConfig, k: usize) -> Self {
        Self::with(
            cfg,
            &format!("fixed-K{k}"),
            LossMode::SingleStage(k),
            RangeMode::BatchStatistic,
        )
    }

    pub fn trainable_range(cfg: &ExperimentConfig) -> Self {
        Self::with(cfg, "trainable-range", LossMode::ProgressiveSum, RangeMode::Trainable)
    }

    /// Exactly the training section of the configuration.
    pub fn configured(cfg: &ExperimentConfig) -> Self {
        Self {
            label: "policy".into(),
            training: cfg.training_config(),
        }
    }

    fn with(cfg: &ExperimentConfig, label: &str, loss: LossMode, range_mode: RangeMode) -> Self {
        Self {
            label: label.into(),
            training: TrainingConfig {
                loss,
                range_mode,
                ..cfg.training_config()
            },
        }
    }

    /// Content hash of everything that influences the trained weights.
    fn digest(&self, cfg: &ExperimentConfig) -> String {
        let mut h = Sha256::new();
        h.update(format!("{:?}\n{:?}\n", cfg.system(), self.training).as_bytes());
        h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Clone, Debug)]
pub struct TrainedNetwork {
    pub network: PolicyNetwork,
    pub log: TrainingLog,
    pub checkpoint: PathBuf,
    pub log_path: PathBuf,
    /// Loaded from an earlier run instead of trained.
    pub reused: bool,
}

/// Stream every network is trained from; shared so that variants differ
/// only in their settings.
pub fn training_stream(cfg: &ExperimentConfig) -> RngStream {
    RngStream::new(cfg.seed, "train/dnn")
}

fn checkpoint_paths(ctx: &RunContext, spec: &NetworkSpec, cfg: &ExperimentConfig) -> (PathBuf, PathBuf) {
    // named by content only, so identical settings under different labels share one file
    let stem = format!("dnn-{}", spec.digest(cfg));
    let dir = ctx.out.join("checkpoints");
    (dir.join(format!("{stem}.ckpt")), dir.join(format!("{stem}_log.csv")))
}

/// Loads the network for `spec` from the checkpoint cache or trains,
/// calibrates and stores it.
pub fn obtain_network(cfg: &ExperimentConfig, spec: &NetworkSpec, ctx: &RunContext) -> Result<TrainedNetwork> {
    let (ckpt, log_path) = checkpoint_paths(ctx, spec, cfg);
    let digest = spec.digest(cfg);
    if ckpt.exists() && log_path.exists() {
        let loaded = checkpoint::load(&ckpt)?;
        if loaded.scenario.get("digest") == Some(&digest) {
            ctx.note(format!("reusing {}", ckpt.display()));
            return Ok(TrainedNetwork {
                network: loaded.network,
                log: read_training_log(&log_path)?,
                checkpoint: ckpt,
                log_path,
                reused: true,
            });
        }
    }
    let dir = ckpt.parent().unwrap();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let system = cfg.system();
    let rng = training_stream(cfg);
    let started = Instant::now();
    let (mut network, log) = guarded(&ckpt, || {
        train_observed(&system, &spec.training, &rng, |e| {
            ctx.note(format!(
                "[{}] epoch {} train {:.5} validation {:.5} ({:.0}s)",
                spec.label,
                e.epoch,
                e.train_loss,
                e.validation_loss,
                started.elapsed().as_secs_f64()
            ))
        })
    })?;
    calibrate(
        &mut network,
        &system,
        spec.training.calibration_size,
        spec.training.batch_size,
        &rng.child("calibration"),
    )?;
    let mut scenario = BTreeMap::new();
    scenario.insert("digest".to_string(), digest);
    scenario.insert("label".to_string(), spec.label.clone());
    scenario.insert("loss".to_string(), format_loss(spec.training.loss));
    for line in cfg.to_toml().lines() {
        if let Some((k, v)) = line.split_once(" = ") {
            scenario.insert(k.to_string(), v.to_string());
        }
    }
    write_atomic(&log_path, &training_log_csv(&log, cfg.k_max)?)?;
    checkpoint::save(&network, &scenario, &ckpt)?;
    Ok(TrainedNetwork {
        network,
        log,
        checkpoint: ckpt,
        log_path,
        reused: false,
    })
}

fn training_log_csv(log: &TrainingLog, k_max: usize) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = [
        "epoch",
        "learning_rate",
        "train_loss",
        "validation_loss",
        "ridge_events",
        "best",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend((1..=k_max).map(|k| format!("validation_mse_k{k}")));
    w.write_record(&header)?;
    for e in &log.epochs {
        let mut row = vec![
            e.epoch.to_string(),
            e.learning_rate.to_string(),
            e.train_loss.to_string(),
            e.validation_loss.to_string(),
            e.ridge_events.to_string(),
            (e.epoch == log.best_epoch).to_string(),
        ];
        row.extend(e.validation_mse.iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.into_inner()
        .map_err(|e| Error::Schema(format!("csv buffer: {}", e.error())))
}

pub fn read_training_log(path: &Path) -> Result<TrainingLog> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    let required = [
        "epoch",
        "learning_rate",
        "train_loss",
        "validation_loss",
        "ridge_events",
        "best",
    ];
    crate::harness::records::require_columns(&headers, &required, &path.display().to_string())?;
    let col = |name: &str| headers.iter().position(|h| h == name).unwrap();
    let stage_cols: Vec<usize> = (1..)
        .map_while(|k| headers.iter().position(|h| h == format!("validation_mse_k{k}")))
        .collect();
    let bad = |what: &str| Error::Schema(format!("{}: malformed `{what}`", path.display()));
    let mut log = TrainingLog {
        best_validation: f64::INFINITY,
        ..Default::default()
    };
    for row in r.records() {
        let row = row?;
        let num = |name: &str| -> Result<f64> { row[col(name)].parse().map_err(|_| bad(name)) };
        let entry = EpochLog {
            epoch: row[col("epoch")].parse().map_err(|_| bad("epoch"))?,
            learning_rate: num("learning_rate")?,
            train_loss: num("train_loss")?,
            validation_loss: num("validation_loss")?,
            validation_mse: stage_cols
                .iter()
                .map(|&c| row[c].parse().map_err(|_| bad("validation_mse")))
                .collect::<Result<_>>()?,
            ridge_events: row[col("ridge_events")].parse().map_err(|_| bad("ridge_events"))?,
        };
        if &row[col("best")] == "true" {
            log.best_epoch = entry.epoch;
            log.best_validation = entry.validation_loss;
        }
        log.epochs.push(entry);
    }
    log.stopped_early = false;
    Ok(log)
}

// ---------------------------------------------------------------------------
// train

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub trained: TrainedNetwork,
    pub manifest: PathBuf,
}

pub fn cmd_train(cfg: &ExperimentConfig, ctx: &RunContext) -> Result<TrainOutput> {
    cfg.validate()?;
    ctx.prepare()?;
    let spec = NetworkSpec::configured(cfg);
    let (ckpt, log_path) = checkpoint_paths(ctx, &spec, cfg);
    let manifest_path = ctx.out.join("train_manifest.txt");
    let mut manifest = RunManifest::new("train", cfg.to_toml());
    manifest.checkpoints.push(ckpt);
    manifest.outputs.push(log_path);
    manifest.write(&manifest_path)?;
    let trained = obtain_network(cfg, &spec, ctx)?;
    Ok(TrainOutput {
        trained,
        manifest: manifest_path,
    })
}

// ---------------------------------------------------------------------------
// sweep over K

/// Policies of one method for one channel realization.
enum Designed {
    /// One progressive policy serving every stage.
    Progressive(CompressionPolicy),
    /// One policy per stage count, index `K - 1`.
    PerStage(Vec<CompressionPolicy>),
    LowerBound(Matrix),
}

struct Evaluator<'a> {
    cfg: &'a ExperimentConfig,
    source: SourceModel,
    sigma2: f64,
    resolution: Resolution,
}

impl<'a> Evaluator<'a> {
    fn new(cfg: &'a ExperimentConfig) -> Result<Self> {
        Ok(Self {
            cfg,
            source: build_source_covariance(cfg.n, cfg.rho)?,
            sigma2: cfg.system().sigma2,
            resolution: cfg.resolution(),
        })
    }

    fn sx(&self) -> &Matrix {
        self.source.covariance()
    }

    fn bcd_settings(&self) -> BcdSettings {
        BcdSettings {
            max_iters: self.cfg.bcd_max_iters,
            rel_tol: self.cfg.bcd_rel_tol,
        }
    }

    fn channels(&self, purpose: &str, r: usize) -> ChannelSet {
        sample_channels(&self.cfg.system(), &RngStream::new(self.cfg.seed, purpose).child(r))
    }

    /// Shared range scale per stage count, chosen on calibration
    /// realizations by averaging the per-realization grid curves.
    fn baseline_scales(&self, method: Method) -> Result<Vec<f64>> {
        let grid = CalibrationGrid {
            samples: self.cfg.calibration_draws,
            mode: CalibrationMode::Shared,
            ..Default::default()
        };
        if self.resolution.is_infinite() {
            return Ok(vec![grid.scales[0]; self.cfg.k_max]);
        }
        let mut curves = vec![vec![0.0; grid.scales.len()]; self.cfg.k_max];
        for r in 0..self.cfg.calibration_realizations {
            let ch = self.channels("calibration", r);
            let evd = match method {
                Method::Evd => Some(evd_policies(&ch, self.sx(), self.sigma2, self.cfg.k_max)?),
                _ => None,
            };
            for k in 1..=self.cfg.k_max {
                let policy = match &evd {
                    Some(p) => p.clone(),
                    None => bcd_policy(&ch, self.sx(), self.sigma2, k, &self.bcd_settings())?.policy,
                };
                let mut rng = RngStream::new(self.cfg.seed, "calibration-draws").child(r);
                let stage = policy.k_max().min(k);
                let cal = calibrate_dynamic_ranges(
                    &policy,
                    &ch,
                    &self.source,
                    self.sigma2,
                    stage,
                    self.resolution,
                    &grid,
                    &mut rng,
                )?;
                for (acc, v) in curves[k - 1].iter_mut().zip(&cal.grid_mse) {
                    *acc += v / self.cfg.calibration_realizations as f64;
                }
            }
        }
        Ok(curves.iter().map(|c| grid.scales[argmin(c)]).collect())
    }

    fn design(
        &self,
        method: Method,
        ch: &ChannelSet,
        scales: &[f64],
        networks: &BTreeMap<String, TrainedNetwork>,
    ) -> Result<Designed> {
        let k_max = self.cfg.k_max;
        let with_scale = |p: CompressionPolicy, s: f64| ranges_from_shared_scale(p, ch, self.sx(), self.sigma2, s);
        Ok(match method {
            Method::LowerBound => {
                Designed::LowerBound(full_observation_lower_bound(ch, self.sx(), self.sigma2)?.estimator)
            }
            Method::Evd => {
                let base = evd_policies(ch, self.sx(), self.sigma2, k_max)?;
                // the range scale is chosen per K, so each K gets its own ranges
                Designed::PerStage(
                    (1..=k_max)
                        .map(|k| with_scale(base.clone(), scales[k - 1]))
                        .collect::<Result<_>>()?,
                )
            }
            Method::Bcd => Designed::PerStage(
                (1..=k_max)
                    .map(|k| {
                        let p = bcd_policy(ch, self.sx(), self.sigma2, k, &self.bcd_settings())?.policy;
                        with_scale(p, scales[k - 1])
                    })
                    .collect::<Result<_>>()?,
            ),
            Method::DnnProgressive => Designed::Progressive(freeze_policy(&networks["progressive"].network, ch)?),
            Method::DnnTrainableRange => {
                Designed::Progressive(freeze_policy(&networks["trainable-range"].network, ch)?)
            }
            Method::DnnFixed => Designed::PerStage(
                (1..=k_max)
                    .map(|k| freeze_policy(&networks[&format!("fixed-K{k}")].network, ch))
                    .collect::<Result<_>>()?,
            ),
        })
    }

    /// Squared errors at stage `k` on the shared draws of realization `r`.
    fn errors(&self, designed: &Designed, ch: &ChannelSet, k: usize, r: usize) -> Result<Vec<f64>> {
        let mut rng = RngStream::new(self.cfg.seed, "eval-draws").child(r);
        let draws = self.cfg.eval_draws;
        let policy = match designed {
            Designed::LowerBound(c) => {
                let xs = sample_source(&self.source, &mut rng, draws);
                let h = ch.stacked();
                let noise = crate::numerics::sample_standard_gaussian(&mut rng, h.nrows(), draws) * self.sigma2.sqrt();
                let err = c * (&h * &xs + noise) - &xs;
                return Ok(err.column_iter().map(|e| e.norm_squared()).collect());
            }
            Designed::Progressive(p) => p,
            Designed::PerStage(ps) => &ps[k - 1],
        };
        // every policy's estimator bank asserts non-increasing analytic distortion
        let bank = EstimatorBank::build(policy, ch, self.sx(), self.sigma2)?;
        let stage = k.min(policy.k_max());
        squared_errors(
            policy,
            &bank,
            ch,
            &self.source,
            self.sigma2,
            stage,
            self.resolution,
            draws,
            &mut rng,
        )
    }
}

/// Networks the requested methods need, keyed by spec label.
pub fn required_networks(cfg: &ExperimentConfig, methods: &[Method]) -> Vec<NetworkSpec> {
    let mut specs = Vec::new();
    for m in methods {
        match m {
            Method::DnnProgressive => specs.push(NetworkSpec::progressive(cfg)),
            Method::DnnTrainableRange => specs.push(NetworkSpec::trainable_range(cfg)),
            Method::DnnFixed => specs.extend((1..=cfg.k_max).map(|k| NetworkSpec::fixed(cfg, k))),
            _ => {}
        }
    }
    specs
}

fn ordered_methods(cfg: &ExperimentConfig) -> Vec<Method> {
    Method::ALL.into_iter().filter(|m| cfg.methods.contains(m)).collect()
}

pub fn cmd_sweep_k(cfg: &ExperimentConfig, ctx: &RunContext) -> Result<Vec<ExperimentRecord>> {
    cfg.validate()?;
    ctx.prepare()?;
    let out = ctx.out.join("sweep.csv");
    let methods = ordered_methods(cfg);
    let specs = required_networks(cfg, &methods);
    let mut manifest = RunManifest::new("sweep-k", cfg.to_toml());
    manifest.checkpoints = specs.iter().map(|s| checkpoint_paths(ctx, s, cfg).0).collect();
    manifest.outputs.push(out.clone());
    manifest.write(&ctx.out.join("sweep_manifest.txt"))?;

    guarded(&out, || {
        let mut networks = BTreeMap::new();
        for spec in &specs {
            networks.insert(spec.label.clone(), obtain_network(cfg, spec, ctx)?);
        }
        let eval = Evaluator::new(cfg)?;
        let mut records = Vec::new();
        for &method in &methods {
            let started = Instant::now();
            let scales = match method {
                Method::Evd | Method::Bcd => eval.baseline_scales(method)?,
                _ => vec![1.0; cfg.k_max],
            };
            let mut errors: Vec<Vec<f64>> = vec![Vec::new(); cfg.k_max];
            for r in 0..cfg.eval_realizations {
                let ch = eval.channels("eval", r);
                let designed = eval.design(method, &ch, &scales, &networks)?;
                for k in 1..=cfg.k_max {
                    errors[k - 1].extend(eval.errors(&designed, &ch, k, r)?);
                }
            }
            let elapsed = started.elapsed().as_secs_f64() / cfg.k_max as f64;
            ctx.note(format!("{method}: {:.1}s per K", elapsed));
            for (k, errs) in errors.iter().enumerate() {
                let (mean, stderr) = mean_and_stderr(errs);
                if !mean.is_finite() {
                    return Err(Error::Numerical(format!("{method} K={}: MSE is not finite", k + 1)));
                }
                records.push(make_record(
                    cfg,
                    method,
                    k + 1,
                    mean,
                    stderr,
                    errs.len(),
                    if ctx.timing { elapsed } else { 0.0 },
                ));
            }
        }
        write_atomic(&out, &to_csv(&records)?)?;
        Ok(records)
    })
}

pub fn make_record(
    cfg: &ExperimentConfig,
    method: Method,
    k: usize,
    mse_mean: f64,
    mse_stderr: f64,
    n_eval: usize,
    wall_time_s: f64,
) -> ExperimentRecord {
    let (m, n, t) = (cfg.m as u64, cfg.n as u64, cfg.coherence as u64);
    ExperimentRecord {
        method,
        k,
        q: (!cfg.q_infinite).then_some(cfg.bits),
        rho: cfg.rho,
        snr_db: cfg.snr_db,
        mse_mean,
        mse_stderr,
        n_eval,
        cost_global_total: cost_global(m, n, k as u64, t).total,
        cost_local_total: cost_local(n, k as u64, t).total,
        t: cfg.coherence,
        root_seed: cfg.seed,
        wall_time_s,
    }
}

fn check_costs(cfg: &ExperimentConfig, records: &[ExperimentRecord]) -> Result<()> {
    for r in records {
        let (m, n, t, k) = (cfg.m as u64, cfg.n as u64, r.t as u64, r.k as u64);
        if r.cost_global_total != cost_global(m, n, k, t).total || r.cost_local_total != cost_local(n, k, t).total {
            return Err(Error::Schema(format!(
                "{} K={}: recorded costs disagree with the cost model for M={}, N={}",
                r.method, r.k, cfg.m, cfg.n
            )));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// cost curves

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostPoint {
    pub method: Method,
    #[serde(rename = "K")]
    pub k: usize,
    pub csi: String,
    #[serde(rename = "T")]
    pub t: usize,
    pub cost_total: u64,
    pub cost_per_estimate: f64,
    pub mse_mean: f64,
    pub mse_stderr: f64,
}

pub fn cmd_cost_curves(cfg: &ExperimentConfig, sweep: &Path, ctx: &RunContext) -> Result<Vec<CostPoint>> {
    cfg.validate()?;
    ctx.prepare()?;
    let out = ctx.out.join("cost_curves.csv");
    let mut manifest = RunManifest::new("cost-curves", cfg.to_toml());
    manifest.outputs.push(out.clone());
    manifest.write(&ctx.out.join("cost_curves_manifest.txt"))?;
    guarded(&out, || {
        let records = read_records(sweep)?;
        check_costs(cfg, &records)?;
        let t = cfg.coherence;
        let mut points: Vec<CostPoint> = records
            .iter()
            .filter(|r| r.method != Method::LowerBound && (2..=6).contains(&r.k))
            .map(|r| {
                let global = r.method.uses_global_csi();
                let b = if global {
                    cost_global(cfg.m as u64, cfg.n as u64, r.k as u64, t as u64)
                } else {
                    cost_local(cfg.n as u64, r.k as u64, t as u64)
                };
                CostPoint {
                    method: r.method,
                    k: r.k,
                    csi: if global { "global" } else { "local" }.into(),
                    t,
                    cost_total: b.total,
                    cost_per_estimate: normalized_cost(&b, t as u64),
                    mse_mean: r.mse_mean,
                    mse_stderr: r.mse_stderr,
                }
            })
            .collect();
        points.sort_by_key(|p| (p.method, p.cost_total, p.k));
        write_atomic(&out, &to_csv(&points)?)?;
        Ok(points)
    })
}

// ---------------------------------------------------------------------------
// crossover

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Requirement {
    pub method: Method,
    pub status: String,
    #[serde(rename = "K")]
    pub k: Option<usize>,
    pub mse_mean: Option<f64>,
    pub mse_target: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizedCost {
    pub method: Method,
    pub csi: String,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "T")]
    pub t: usize,
    pub cost_per_estimate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossoverRow {
    pub local_method: Method,
    pub global_method: Method,
    pub status: String,
    pub k_local: Option<usize>,
    pub k_global: Option<usize>,
    pub crossover_t: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrossoverReport {
    pub requirements: Vec<Requirement>,
    pub costs: Vec<NormalizedCost>,
    pub crossovers: Vec<CrossoverRow>,
}

/// Coherence times covered by the normalized-cost table.
pub const T_GRID: std::ops::RangeInclusive<usize> = 1..=200;
pub const T_STEP: usize = 10;

/// The sweep MSE on the scale `mse_target` is stated in.
pub fn target_scale(cfg: &ExperimentConfig, mse: f64) -> f64 {
    if cfg.mse_per_component {
        mse / cfg.n as f64
    } else {
        mse
    }
}

pub fn cmd_crossover(cfg: &ExperimentConfig, sweep: &Path, ctx: &RunContext) -> Result<CrossoverReport> {
    cfg.validate()?;
    ctx.prepare()?;
    let outs = [
        ctx.out.join("crossover_requirements.csv"),
        ctx.out.join("crossover_costs.csv"),
        ctx.out.join("crossover.csv"),
    ];
    let mut manifest = RunManifest::new("crossover", cfg.to_toml());
    manifest.outputs.extend(outs.iter().cloned());
    manifest.write(&ctx.out.join("crossover_manifest.txt"))?;
    guarded(&outs[2], || {
        let records = read_records(sweep)?;
        check_costs(cfg, &records)?;
        let mut methods: Vec<Method> = records.iter().map(|r| r.method).collect();
        methods.sort();
        methods.dedup();
        methods.retain(|m| *m != Method::LowerBound);

        let mut requirements = Vec::new();
        for &m in &methods {
            let mut rows: Vec<&ExperimentRecord> = records.iter().filter(|r| r.method == m).collect();
            rows.sort_by_key(|r| r.k);
            let hit = rows.iter().find(|r| target_scale(cfg, r.mse_mean) <= cfg.mse_target);
            requirements.push(Requirement {
                method: m,
                status: if hit.is_some() { "reachable" } else { "unreachable" }.into(),
                k: hit.map(|r| r.k),
                mse_mean: hit.map(|r| r.mse_mean),
                mse_target: cfg.mse_target,
            });
        }

        let (m, n) = (cfg.m as u64, cfg.n as u64);
        let mut costs = Vec::new();
        for req in &requirements {
            let Some(k) = req.k else { continue };
            let global = req.method.uses_global_csi();
            for t in T_GRID.map(|i| i * T_STEP) {
                let b = if global {
                    cost_global(m, n, k as u64, t as u64)
                } else {
                    cost_local(n, k as u64, t as u64)
                };
                costs.push(NormalizedCost {
                    method: req.method,
                    csi: if global { "global" } else { "local" }.into(),
                    k,
                    t,
                    cost_per_estimate: normalized_cost(&b, t as u64),
                });
            }
        }

        let mut crossovers = Vec::new();
        for g in requirements.iter().filter(|r| r.method.uses_global_csi()) {
            for l in requirements.iter().filter(|r| !r.method.uses_global_csi()) {
                let (status, t) = match (l.k, g.k) {
                    (Some(kl), Some(kg)) => match crossover_t(kl as u64, kg as u64, m, n) {
                        Crossover::At(t) => {
                            let local = (n * kl as u64 + (kl * kl) as u64) as f64 / t + kl as f64;
                            let global = (m * n + m * kg as u64 + kg as u64) as f64 / t + kg as f64;
                            if (local - global).abs() > 1e-9 * global {
                                return Err(Error::Numerical(format!("crossover T={t} does not equalize the costs")));
                            }
                            ("crossover", Some(t))
                        }
                        Crossover::LocalAlwaysCheaper => ("local-always-cheaper", None),
                        Crossover::GlobalNeverPreferred(t) => ("global-always-cheaper", Some(t)),
                    },
                    _ => ("unreachable", None),
                };
                crossovers.push(CrossoverRow {
                    local_method: l.method,
                    global_method: g.method,
                    status: status.into(),
                    k_local: l.k,
                    k_global: g.k,
                    crossover_t: t,
                });
            }
        }
        write_atomic(&outs[0], &to_csv(&requirements)?)?;
        write_atomic(
            &outs[1],
            &to_csv_headed(&costs, &["method", "csi", "K", "T", "cost_per_estimate"])?,
        )?;
        write_atomic(&outs[2], &to_csv(&crossovers)?)?;
        Ok(CrossoverReport {
            requirements,
            costs,
            crossovers,
        })
    })
}

// ---------------------------------------------------------------------------
// dynamic-range comparison

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynRangeRow {
    pub epoch: usize,
    pub batch_statistic_validation: Option<f64>,
    pub batch_statistic_best: f64,
    pub trainable_validation: Option<f64>,
    pub trainable_best: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynRangeSummary {
    pub variant: String,
    pub final_validation: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    /// Epochs until the best-so-far loss first came within 5% of the final one.
    pub epochs_to_within_5pct: usize,
}

/// Best-so-far validation loss after every epoch.
pub fn best_so_far(log: &TrainingLog) -> Vec<f64> {
    let mut best = f64::INFINITY;
    log.epochs
        .iter()
        .map(|e| {
            best = best.min(e.validation_loss);
            best
        })
        .collect()
}

/// Number of epochs (1-based) until the running best is within `tol`
/// (relative) of the final best.
pub fn epochs_to_within(log: &TrainingLog, tol: f64) -> usize {
    let best = best_so_far(log);
    let Some(&last) = best.last() else { return 0 };
    best.iter().position(|b| *b <= last * (1.0 + tol)).map_or(0, |i| i + 1)
}

pub fn summarize(variant: &str, log: &TrainingLog) -> DynRangeSummary {
    DynRangeSummary {
        variant: variant.into(),
        final_validation: best_so_far(log).last().copied().unwrap_or(f64::NAN),
        best_epoch: log.best_epoch,
        epochs_run: log.epochs.len(),
        epochs_to_within_5pct: epochs_to_within(log, 0.05),
    }
}

#[derive(Clone, Debug)]
pub struct DynRangeReport {
    pub rows: Vec<DynRangeRow>,
    pub summary: Vec<DynRangeSummary>,
    pub batch_statistic: TrainedNetwork,
    pub trainable: TrainedNetwork,
}

pub fn cmd_dynrange_compare(cfg: &ExperimentConfig, ctx: &RunContext) -> Result<DynRangeReport> {
    cfg.validate()?;
    ctx.prepare()?;
    let out = ctx.out.join("dynrange.csv");
    let summary_out = ctx.out.join("dynrange_summary.csv");
    let loss = cfg.training.loss;
    let spec_b = NetworkSpec::with(cfg, "batch-statistic", loss, RangeMode::BatchStatistic);
    let spec_t = NetworkSpec::with(cfg, "trainable", loss, RangeMode::Trainable);
    let mut manifest = RunManifest::new("dynrange-compare", cfg.to_toml());
    manifest.checkpoints = vec![
        checkpoint_paths(ctx, &spec_b, cfg).0,
        checkpoint_paths(ctx, &spec_t, cfg).0,
    ];
    manifest.outputs = vec![out.clone(), summary_out.clone()];
    manifest.write(&ctx.out.join("dynrange_manifest.txt"))?;
    guarded(&out, || {
        let b = obtain_network(cfg, &spec_b, ctx)?;
        let t = obtain_network(cfg, &spec_t, ctx)?;
        let (best_b, best_t) = (best_so_far(&b.log), best_so_far(&t.log));
        let epochs = best_b.len().max(best_t.len());
        // the shorter run keeps its final best so both share one epoch grid
        let rows = (0..epochs)
            .map(|e| DynRangeRow {
                epoch: e,
                batch_statistic_validation: b.log.epochs.get(e).map(|x| x.validation_loss),
                batch_statistic_best: best_b[e.min(best_b.len() - 1)],
                trainable_validation: t.log.epochs.get(e).map(|x| x.validation_loss),
                trainable_best: best_t[e.min(best_t.len() - 1)],
            })
            .collect::<Vec<_>>();
        let summary = vec![summarize("batch-statistic", &b.log), summarize("trainable", &t.log)];
        write_atomic(&out, &to_csv(&rows)?)?;
        write_atomic(&summary_out, &to_csv(&summary)?)?;
        Ok(DynRangeReport {
            rows,
            summary,
            batch_statistic: b,
            trainable: t,
        })
    })
}

pub fn read_dynrange(path: &Path) -> Result<Vec<DynRangeRow>> {
    read_csv(
        path,
        &[
            "epoch",
            "batch_statistic_validation",
            "batch_statistic_best",
            "trainable_validation",
            "trainable_best",
        ],
    )
}
