//! The end-to-end training objective and its reverse-mode gradient.
//!
//! Per batch: every agent maps its channels to compression matrices,
//! compresses `y_i = H_i x + z_i`, sets each dynamic range from the batch
//! deviation, clips and adds uniform quantization noise, and the fusion
//! center forms the stage-`k` LMMSE estimate for every sample. The loss is
//! the batch mean of the summed (or single-stage) squared errors.
//!
//! Gradients are hand-derived. For one sample and stage, with
//! `G = U Sx U^T + Sz`, `alpha = G^{-1} v`, `x_hat = Sx U^T alpha` and
//! upstream `g = dL/dx_hat`:
//!
//! ```text
//! beta  = G^{-1} U Sx g
//! dv    = beta
//! dU    = alpha (Sx g)^T - (beta alpha^T + alpha beta^T) U Sx
//! dSz_i = -beta_i alpha_i^T        (diagonal blocks only)
//! ```

use nalgebra::Cholesky;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::network::{Gradients, Mode, ParamClass, PolicyNetwork, RangeMode};
use crate::numerics::{sample_standard_gaussian, Matrix, RngStream, Vector};
use crate::quantization::{clip, clip_grad, range_from_scale, QuantizerSpec, Resolution, RANGE_FLOOR};
use crate::signal::{sample_source, SourceModel};

pub const RIDGE: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossMode {
    /// Sum of the distortions of every stage.
    ProgressiveSum,
    /// Distortion of one stage only.
    SingleStage(usize),
}

impl LossMode {
    fn weight(self, k: usize) -> f64 {
        match self {
            LossMode::ProgressiveSum => 1.0,
            LossMode::SingleStage(target) if target == k => 1.0,
            LossMode::SingleStage(_) => 0.0,
        }
    }
}

/// One batch of training draws. Each sample has its own channels.
#[derive(Clone, Debug)]
pub struct TrainingBatch {
    /// Per agent, `M N x n` with column `j` equal to `vec(H_i)` of sample `j`.
    pub channels: Vec<Matrix>,
    /// `N x n`
    pub sources: Matrix,
    /// Per agent, `M x n` observation noise.
    pub noise: Vec<Matrix>,
    /// Per agent, `K_max x n` draws from `U(-1, 1)` for the quantization noise.
    pub dither: Vec<Matrix>,
    m: usize,
    n: usize,
}

impl TrainingBatch {
    #[allow(clippy::too_many_arguments)]
    pub fn sample(
        m: usize,
        n: usize,
        agents: usize,
        k_max: usize,
        source: &SourceModel,
        sigma2: f64,
        size: usize,
        rng: &RngStream,
    ) -> Self {
        let sources = sample_source(source, &mut rng.child("source"), size);
        let mut channels = Vec::with_capacity(agents);
        let mut noise = Vec::with_capacity(agents);
        let mut dither = Vec::with_capacity(agents);
        for i in 0..agents {
            // column j is a column-major M x N channel
            channels.push(sample_standard_gaussian(&mut rng.child(format!("channel{i}")), size, m * n).transpose());
            noise.push(sample_standard_gaussian(&mut rng.child(format!("noise{i}")), m, size) * sigma2.sqrt());
            let mut d = rng.child(format!("dither{i}"));
            dither.push(Matrix::from_fn(k_max, size, |_, _| d.uniform_symmetric()));
        }
        Self {
            channels,
            sources,
            noise,
            dither,
            m,
            n,
        }
    }

    pub fn len(&self) -> usize {
        self.sources.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn agents(&self) -> usize {
        self.channels.len()
    }

    /// `H_i` of sample `j`.
    pub fn channel(&self, agent: usize, j: usize) -> Matrix {
        Matrix::from_column_slice(self.m, self.n, self.channels[agent].column(j).as_slice())
    }

    /// `y_i = H_i x + z_i` for every sample, `M x n`.
    pub fn observations(&self, agent: usize) -> Matrix {
        let mut y = self.noise[agent].clone();
        for j in 0..self.len() {
            let h = self.channel(agent, j);
            let hx = h * self.sources.column(j);
            let mut col = y.column_mut(j);
            col += hx;
        }
        y
    }
}

/// How the compressed values reach the fusion center.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Channel {
    /// Clip to the range and add uniform noise (training surrogate).
    Surrogate(Resolution),
    /// Real uniform quantizer (evaluation).
    Quantizer(Resolution),
}

impl Channel {
    fn resolution(self) -> Resolution {
        match self {
            Channel::Surrogate(r) | Channel::Quantizer(r) => r,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PipelineConfig {
    pub sigma2: f64,
    pub source_cov: Matrix,
    pub loss: LossMode,
    pub channel: Channel,
}

/// Where the dynamic ranges come from in one evaluation.
#[derive(Clone, Debug)]
pub enum RangeSource {
    /// Batch deviations times `|s|` (differentiable w.r.t. `s` and the data).
    BatchScale(Matrix),
    /// Fixed ranges (trainable parameters, or frozen for evaluation).
    Fixed(Matrix),
}

#[derive(Clone, Debug)]
pub struct CompressionOutcome {
    pub loss: f64,
    /// Batch mean squared error of each stage.
    pub stage_mse: Vec<f64>,
    /// Per agent, gradient w.r.t. the flattened compression matrices.
    pub d_weights: Option<Vec<Matrix>>,
    /// Gradient w.r.t. the scales (batch mode) or the fixed ranges.
    pub d_ranges: Option<Matrix>,
    /// Batch deviations of the compressed values (agents x stages).
    pub batch_std: Matrix,
    pub ridge_events: usize,
}

/// Loss of given compression matrices on a batch. `weights[i]` is
/// `M K_max x n`, column `j` being the row-major flattening of `W_i` for
/// sample `j`.
pub fn compression_loss(
    weights: &[Matrix],
    batch: &TrainingBatch,
    ranges: &RangeSource,
    cfg: &PipelineConfig,
    want_grad: bool,
) -> Result<CompressionOutcome> {
    let b = batch.agents();
    let n = batch.len();
    let m = batch.m;
    let k_max = weights[0].nrows() / m;
    let resolution = cfg.channel.resolution();
    if n < 2 {
        return Err(Error::InvalidInput("batches need at least 2 samples".into()));
    }
    if let LossMode::SingleStage(k) = cfg.loss {
        if k == 0 || k > k_max {
            return Err(Error::InvalidInput(format!(
                "single-stage target {k} outside 1..={k_max}"
            )));
        }
    }

    // compressed values v[i] (K_max x n)
    let observations: Vec<Matrix> = (0..b).map(|i| batch.observations(i)).collect();
    let mut values = Vec::with_capacity(b);
    for i in 0..b {
        let mut v = Matrix::zeros(k_max, n);
        for j in 0..n {
            let w = weights[i].column(j);
            let y = observations[i].column(j);
            for k in 0..k_max {
                v[(k, j)] = w.rows(k * m, m).dot(&y);
            }
        }
        values.push(v);
    }

    let mut batch_mean = Matrix::zeros(b, k_max);
    let mut batch_std = Matrix::zeros(b, k_max);
    for i in 0..b {
        for k in 0..k_max {
            let row = values[i].row(k);
            let mean = row.sum() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            batch_mean[(i, k)] = mean;
            batch_std[(i, k)] = var.sqrt();
        }
    }
    let q = match ranges {
        RangeSource::BatchScale(s) => s.zip_map(&batch_std, range_from_scale),
        RangeSource::Fixed(p) => p.map(|p| range_from_scale(1.0, p)),
    };

    // received values
    let mut received = values.clone();
    if !(resolution.is_infinite()) {
        for i in 0..b {
            for k in 0..k_max {
                let qik = q[(i, k)];
                let spec = match (cfg.channel, resolution) {
                    (Channel::Quantizer(_), Resolution::Bits(bits)) => Some(QuantizerSpec::new(bits, qik)?),
                    _ => None,
                };
                for j in 0..n {
                    let v = values[i][(k, j)];
                    received[i][(k, j)] = match spec {
                        Some(spec) => spec.apply(v)?,
                        None => clip(v, qik) + resolution.noise_half_width(qik) * batch.dither[i][(k, j)],
                    };
                }
            }
        }
    }

    // fusion center, per sample
    let sx = &cfg.source_cov;
    let sigma2 = cfg.sigma2;
    let stages: Vec<usize> = (1..=k_max).collect();
    let per_sample: Vec<Result<SampleResult>> = (0..n)
        .into_par_iter()
        .map(|j| {
            let ws: Vec<Matrix> = (0..b)
                .map(|i| Matrix::from_row_slice(k_max, m, weights[i].column(j).as_slice()))
                .collect();
            let hs: Vec<Matrix> = (0..b).map(|i| batch.channel(i, j)).collect();
            let v: Vec<Vector> = (0..b).map(|i| received[i].column(j).into_owned()).collect();
            let x = batch.sources.column(j).into_owned();
            sample_fusion(&ws, &hs, &v, &x, sx, sigma2, &stages, cfg.loss, n, want_grad)
        })
        .collect();

    let mut stage_mse = vec![0.0; k_max];
    let mut loss = 0.0;
    let mut ridge_events = 0;
    let mut d_received: Vec<Matrix> = vec![Matrix::zeros(k_max, n); b];
    let mut d_w: Vec<Matrix> = vec![Matrix::zeros(m * k_max, n); b];
    for (j, res) in per_sample.into_iter().enumerate() {
        let res = res?;
        ridge_events += res.ridge_events;
        for (k, e) in res.errors.iter().enumerate() {
            stage_mse[k] += e / n as f64;
            loss += cfg.loss.weight(k + 1) * e / n as f64;
        }
        if let Some((dv, dw)) = res.grads {
            for i in 0..b {
                d_received[i].set_column(j, &dv[i]);
                // dW (K_max x M) flattened row-major into the output column
                let mut col = d_w[i].column_mut(j);
                for k in 0..k_max {
                    for c in 0..m {
                        col[k * m + c] = dw[i][(k, c)];
                    }
                }
            }
        }
    }

    if !want_grad {
        return Ok(CompressionOutcome {
            loss,
            stage_mse,
            d_weights: None,
            d_ranges: None,
            batch_std,
            ridge_events,
        });
    }

    // back through quantization and the range statistics
    let mut d_ranges = Matrix::zeros(b, k_max);
    let mut d_values: Vec<Matrix> = Vec::with_capacity(b);
    for i in 0..b {
        let mut dv = Matrix::zeros(k_max, n);
        for k in 0..k_max {
            let qik = q[(i, k)];
            let mut dq = 0.0;
            for j in 0..n {
                let g = d_received[i][(k, j)];
                if resolution.is_infinite() {
                    dv[(k, j)] = g;
                    continue;
                }
                let (dv_clip, dq_clip) = clip_grad(values[i][(k, j)], qik);
                dv[(k, j)] = g * dv_clip;
                dq += g * dq_clip + g * resolution.noise_half_width(1.0) * batch.dither[i][(k, j)];
            }
            match ranges {
                RangeSource::BatchScale(s) => {
                    let sd = batch_std[(i, k)];
                    let sik = s[(i, k)];
                    if sik.abs() * sd > RANGE_FLOOR {
                        d_ranges[(i, k)] = dq * sik.signum() * sd;
                        let d_sd = dq * sik.abs();
                        let mean = batch_mean[(i, k)];
                        for j in 0..n {
                            dv[(k, j)] += d_sd * (values[i][(k, j)] - mean) / (n as f64 * sd);
                        }
                    }
                }
                RangeSource::Fixed(p) => {
                    let pik = p[(i, k)];
                    if pik.abs() > RANGE_FLOOR {
                        d_ranges[(i, k)] = dq * pik.signum();
                    }
                }
            }
        }
        d_values.push(dv);
    }

    // v = W y
    for i in 0..b {
        for j in 0..n {
            let y = observations[i].column(j);
            let mut col = d_w[i].column_mut(j);
            for k in 0..k_max {
                let g = d_values[i][(k, j)];
                if g != 0.0 {
                    for c in 0..m {
                        col[k * m + c] += g * y[c];
                    }
                }
            }
        }
    }

    Ok(CompressionOutcome {
        loss,
        stage_mse,
        d_weights: Some(d_w),
        d_ranges: Some(d_ranges),
        batch_std,
        ridge_events,
    })
}

struct SampleResult {
    /// Squared error of every stage.
    errors: Vec<f64>,
    /// Per agent: gradient w.r.t. received values (K_max) and W (K_max x M).
    grads: Option<(Vec<Vector>, Vec<Matrix>)>,
    ridge_events: usize,
}

#[allow(clippy::too_many_arguments)]
fn sample_fusion(
    ws: &[Matrix],
    hs: &[Matrix],
    received: &[Vector],
    x: &Vector,
    sx: &Matrix,
    sigma2: f64,
    stages: &[usize],
    loss: LossMode,
    batch: usize,
    want_grad: bool,
) -> Result<SampleResult> {
    let b = ws.len();
    let k_max = ws[0].nrows();
    let n_src = sx.nrows();
    // P_i = W_i H_i and S_i = sigma2 W_i W_i^T; stage k uses leading blocks
    let p: Vec<Matrix> = ws.iter().zip(hs).map(|(w, h)| w * h).collect();
    let s: Vec<Matrix> = ws.iter().map(|w| w * w.transpose() * sigma2).collect();

    let mut errors = Vec::with_capacity(stages.len());
    let mut dp: Vec<Matrix> = vec![Matrix::zeros(k_max, n_src); b];
    let mut ds: Vec<Matrix> = vec![Matrix::zeros(k_max, k_max); b];
    let mut dv: Vec<Vector> = vec![Vector::zeros(k_max); b];
    let mut ridge_events = 0;

    for &k in stages {
        let rows = b * k;
        let mut u = Matrix::zeros(rows, n_src);
        let mut g = Matrix::zeros(rows, rows);
        let mut v = Vector::zeros(rows);
        for i in 0..b {
            u.rows_mut(i * k, k).copy_from(&p[i].rows(0, k));
            g.view_mut((i * k, i * k), (k, k)).copy_from(&s[i].view((0, 0), (k, k)));
            v.rows_mut(i * k, k).copy_from(&received[i].rows(0, k));
        }
        let us = &u * sx;
        g += &us * u.transpose();
        let chol = match Cholesky::new(g.clone()) {
            Some(c) => c,
            None => {
                ridge_events += 1;
                let ridged = &g + Matrix::identity(rows, rows) * RIDGE;
                Cholesky::new(ridged)
                    .ok_or_else(|| Error::SingularMatrix(format!("stage-{k} Gram matrix even with ridge")))?
            }
        };
        let alpha = chol.solve(&v);
        let x_hat = us.transpose() * &alpha;
        let e = x_hat - x;
        let err = e.norm_squared();
        errors.push(err);

        let weight = loss.weight(k);
        if !want_grad || weight == 0.0 {
            continue;
        }
        let upstream = e * (2.0 * weight / batch as f64);
        let sg = sx * &upstream;
        let beta = chol.solve(&(&us * &upstream));
        let du = &alpha * sg.transpose() - (&beta * alpha.transpose() + &alpha * beta.transpose()) * &us;
        for i in 0..b {
            dv[i].rows_mut(0, k).add_assign(&beta.rows(i * k, k));
            let mut dpi = dp[i].rows_mut(0, k);
            dpi += du.rows(i * k, k);
            let bi = beta.rows(i * k, k);
            let ai = alpha.rows(i * k, k);
            let mut dsi = ds[i].view_mut((0, 0), (k, k));
            dsi -= bi * ai.transpose();
        }
    }

    let grads = if want_grad {
        let dw = (0..b)
            .map(|i| &dp[i] * hs[i].transpose() + (&ds[i] + ds[i].transpose()) * &ws[i] * sigma2)
            .collect();
        Some((dv, dw))
    } else {
        None
    };
    Ok(SampleResult {
        errors,
        grads,
        ridge_events,
    })
}

use std::ops::AddAssign;

/// Output of one forward (and optionally backward) pass of the full network.
#[derive(Clone, Debug)]
pub struct StepOutput {
    pub loss: f64,
    pub stage_mse: Vec<f64>,
    pub gradients: Option<Gradients>,
    /// Per agent, per batch-norm position: batch mean and variance.
    pub norm_stats: Vec<Vec<(Vector, Vector)>>,
    pub batch_std: Matrix,
    pub ridge_events: usize,
}

/// Train-mode loss of the network on a batch and, if asked, its gradient.
/// The network is not modified; callers fold `norm_stats` into the running
/// statistics.
pub fn training_step(
    net: &PolicyNetwork,
    batch: &TrainingBatch,
    cfg: &PipelineConfig,
    want_grad: bool,
) -> Result<StepOutput> {
    let b = net.arch.agents;
    if batch.agents() != b {
        return Err(Error::InvalidInput(format!(
            "batch has {} agents, network {}",
            batch.agents(),
            b
        )));
    }
    let caches = (0..b)
        .map(|i| net.forward_cached(&batch.channels[i], i, Mode::Train))
        .collect::<Result<Vec<_>>>()?;
    let weights: Vec<Matrix> = caches.iter().map(|c| c.output.clone()).collect();
    let ranges = match net.range_mode {
        RangeMode::BatchStatistic => RangeSource::BatchScale(net.scales.clone()),
        RangeMode::Trainable => RangeSource::Fixed(net.ranges.clone()),
    };
    let outcome = compression_loss(&weights, batch, &ranges, cfg, want_grad)?;
    let gradients = if want_grad {
        let mut grads = Gradients::zeros_like(net);
        let d_weights = outcome.d_weights.as_ref().unwrap();
        for i in 0..b {
            net.backward(i, &caches[i], &d_weights[i], &mut grads);
        }
        let d_ranges = outcome.d_ranges.as_ref().unwrap();
        let slot = match net.range_mode {
            RangeMode::BatchStatistic => grads.scales_slot(),
            RangeMode::Trainable => grads.ranges_slot(),
        };
        grads.tensors[slot].copy_from_slice(d_ranges.as_slice());
        Some(grads)
    } else {
        None
    };
    Ok(StepOutput {
        loss: outcome.loss,
        stage_mse: outcome.stage_mse,
        gradients,
        norm_stats: caches.iter().map(|c| c.batch_stats()).collect(),
        batch_std: outcome.batch_std,
        ridge_events: outcome.ridge_events,
    })
}

/// Eval-mode loss with real quantizers and the network's evaluation ranges.
pub fn evaluate(net: &PolicyNetwork, batch: &TrainingBatch, cfg: &PipelineConfig) -> Result<CompressionOutcome> {
    let weights = (0..net.arch.agents)
        .map(|i| net.forward(&batch.channels[i], i, Mode::Eval))
        .collect::<Result<Vec<_>>>()?;
    compression_loss(&weights, batch, &RangeSource::Fixed(net.eval_ranges()), cfg, false)
}

/// One parameter compared against central finite differences.
#[derive(Clone, Debug)]
pub struct GradientProbe {
    pub class: ParamClass,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradientProbe {
    /// `|a - f| / max(|a|, |f|, floor)`.
    pub fn relative_error(&self, floor: f64) -> f64 {
        let scale = self.analytic.abs().max(self.numeric.abs()).max(floor);
        if scale == 0.0 {
            return 0.0;
        }
        (self.analytic - self.numeric).abs() / scale
    }
}

/// Compares the analytic gradient with central differences of step `step`
/// on `count` parameters drawn at random, at least one from every class.
pub fn gradient_check(
    net: &PolicyNetwork,
    batch: &TrainingBatch,
    cfg: &PipelineConfig,
    count: usize,
    step: f64,
    rng: &mut RngStream,
) -> Result<Vec<GradientProbe>> {
    let grads = training_step(net, batch, cfg, true)?.gradients.unwrap();
    let classes: Vec<ParamClass> = net.tensors().iter().map(|(c, _)| *c).collect();
    let active = |c: ParamClass| {
        !matches!(
            (c, net.range_mode),
            (ParamClass::RangeScale, RangeMode::Trainable) | (ParamClass::TrainableRange, RangeMode::BatchStatistic)
        )
    };
    let mut picks: Vec<(usize, usize)> = Vec::new();
    for (t, &c) in classes.iter().enumerate() {
        if active(c) && !picks.iter().any(|&(u, _)| classes[u] == c) {
            picks.push((t, rng.index(grads.tensors[t].len())));
        }
    }
    let eligible: Vec<usize> = (0..classes.len()).filter(|&t| active(classes[t])).collect();
    while picks.len() < count {
        let t = eligible[rng.index(eligible.len())];
        picks.push((t, rng.index(grads.tensors[t].len())));
    }
    let mut probes = Vec::with_capacity(picks.len());
    let mut work = net.clone();
    for (t, e) in picks {
        let original = net.tensors()[t].1[e];
        let mut at = |value: f64| -> Result<f64> {
            work.tensors_mut()[t].1[e] = value;
            let loss = training_step(&work, batch, cfg, false)?.loss;
            work.tensors_mut()[t].1[e] = original;
            Ok(loss)
        };
        let numeric = (at(original + step)? - at(original - step)?) / (2.0 * step);
        probes.push(GradientProbe {
            class: classes[t],
            analytic: grads.tensors[t][e],
            numeric,
        });
    }
    Ok(probes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::{estimate, CompressionPolicy, EstimatorBank};
    use crate::network::{unflatten_weights, Architecture};
    use crate::signal::{build_source_covariance, ChannelSet};

    fn setup(resolution: Resolution) -> (PolicyNetwork, TrainingBatch, PipelineConfig) {
        let arch = Architecture {
            m: 6,
            n: 3,
            agents: 2,
            k_max: 2,
            hidden: vec![16, 8],
            tied_heads: false,
        };
        let net = PolicyNetwork::new(arch, RangeMode::BatchStatistic, &RngStream::new(3, "net")).unwrap();
        let source = build_source_covariance(3, 0.5).unwrap();
        let batch = TrainingBatch::sample(6, 3, 2, 2, &source, 1.0, 32, &RngStream::new(4, "batch"));
        let cfg = PipelineConfig {
            sigma2: 1.0,
            source_cov: source.covariance().clone(),
            loss: LossMode::ProgressiveSum,
            channel: Channel::Surrogate(resolution),
        };
        (net, batch, cfg)
    }

    #[test]
    fn infinite_resolution_matches_fusion_module() {
        let (net, batch, cfg) = setup(Resolution::Infinite);
        let out = training_step(&net, &batch, &cfg, false).unwrap();
        let weights: Vec<Matrix> = (0..2)
            .map(|i| net.forward(&batch.channels[i], i, Mode::Train).unwrap())
            .collect();
        let mut total = 0.0;
        for j in 0..batch.len() {
            let ws = (0..2)
                .map(|i| unflatten_weights(weights[i].column(j).as_slice(), 2, 6))
                .collect();
            let policy = CompressionPolicy::new(ws).unwrap();
            let ch = ChannelSet {
                h: (0..2).map(|i| batch.channel(i, j)).collect(),
            };
            let bank = EstimatorBank::build(&policy, &ch, &cfg.source_cov, 1.0).unwrap();
            let x = batch.sources.column(j).into_owned();
            for k in 1..=2 {
                let mut stacked = Vector::zeros(2 * k);
                for i in 0..2 {
                    let y = &ch.h[i] * &x + batch.noise[i].column(j);
                    stacked.rows_mut(i * k, k).copy_from(&(policy.prefix(i, k) * y));
                }
                total += (estimate(bank.estimator(k), &stacked).unwrap() - &x).norm_squared();
            }
        }
        total /= batch.len() as f64;
        assert!((out.loss - total).abs() < 1e-10 * total);
    }

    #[test]
    fn loss_is_invariant_to_weight_scaling() {
        let (net, batch, cfg) = setup(Resolution::Bits(6));
        let weights: Vec<Matrix> = (0..2)
            .map(|i| net.forward(&batch.channels[i], i, Mode::Train).unwrap())
            .collect();
        let ranges = RangeSource::BatchScale(net.scales.clone());
        let base = compression_loss(&weights, &batch, &ranges, &cfg, false).unwrap();
        let scaled: Vec<Matrix> = weights.iter().map(|w| w * 2.0).collect();
        let twice = compression_loss(&scaled, &batch, &ranges, &cfg, false).unwrap();
        assert!((base.loss - twice.loss).abs() < 1e-10 * base.loss);
        for (a, b) in base.batch_std.iter().zip(twice.batch_std.iter()) {
            assert!((2.0 * a - b).abs() < 1e-12 * b);
        }
    }

    #[test]
    fn single_stage_bounded_by_sum() {
        let (net, batch, mut cfg) = setup(Resolution::Bits(6));
        let sum = training_step(&net, &batch, &cfg, false).unwrap();
        cfg.loss = LossMode::SingleStage(2);
        let single = training_step(&net, &batch, &cfg, false).unwrap();
        assert!(single.loss <= sum.loss);
        assert!((single.loss - sum.stage_mse[1]).abs() < 1e-12);
        cfg.loss = LossMode::SingleStage(3);
        assert!(training_step(&net, &batch, &cfg, false).is_err());
    }

    #[test]
    fn batch_sampling_is_deterministic() {
        let source = build_source_covariance(3, 0.0).unwrap();
        let a = TrainingBatch::sample(4, 3, 2, 2, &source, 1.0, 5, &RngStream::new(1, "b"));
        let b = TrainingBatch::sample(4, 3, 2, 2, &source, 1.0, 5, &RngStream::new(1, "b"));
        assert_eq!(a.channels, b.channels);
        assert_eq!(a.dither, b.dither);
        assert!(a.dither.iter().flatten().all(|u| (-1.0..1.0).contains(u)));
        let y = a.observations(1);
        let direct = a.channel(1, 3) * a.sources.column(3) + a.noise[1].column(3);
        assert!((y.column(3) - direct).norm() < 1e-14);
    }

    #[test]
    fn gradients_match_finite_differences() {
        for (resolution, mode) in [
            (Resolution::Bits(6), RangeMode::BatchStatistic),
            (Resolution::Bits(3), RangeMode::Trainable),
            (Resolution::Infinite, RangeMode::BatchStatistic),
        ] {
            let (mut net, batch, cfg) = setup(resolution);
            net.range_mode = mode;
            let probes = gradient_check(&net, &batch, &cfg, 60, 1e-6, &mut RngStream::new(5, "probe")).unwrap();
            for p in &probes {
                assert!(p.relative_error(0.0) < 1e-4, "{resolution} {mode:?} {p:?}");
            }
        }
    }
}
