//! Classical compression designs: local eigen-decomposition (EVD/PCA) and
//! block coordinate descent over all agents with global CSI, plus the
//! exhaustive-search dynamic-range calibration both of them use.

use crate::error::{Error, Result};
use crate::fusion::{analytic_mse, effective_noise_cov, effective_observation, CompressionPolicy, EstimatorBank};
use crate::numerics::{self, sample_standard_gaussian, sym_eig_desc, Matrix, RngStream};
use crate::quantization::{range_from_scale, QuantizerSpec, Resolution};
use crate::signal::{sample_source, ChannelSet, SourceModel};

/// Rows are the top `k_max` eigenvectors of `H Sx H^T + sigma2 I`.
pub fn evd_policy(h: &Matrix, sx: &Matrix, sigma2: f64, k_max: usize) -> Result<Matrix> {
    let m = h.nrows();
    if k_max == 0 || k_max > m {
        return Err(Error::Precondition(format!("K_max = {k_max} must lie in 1..={m}")));
    }
    let cov = h * sx * h.transpose() + Matrix::identity(m, m) * sigma2;
    let eig = sym_eig_desc(&cov)?;
    Ok(eig.vectors.columns(0, k_max).transpose())
}

pub fn evd_policies(channels: &ChannelSet, sx: &Matrix, sigma2: f64, k_max: usize) -> Result<CompressionPolicy> {
    let weights = channels
        .h
        .iter()
        .map(|h| evd_policy(h, sx, sigma2, k_max))
        .collect::<Result<Vec<_>>>()?;
    CompressionPolicy::new(weights)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BcdSettings {
    pub max_iters: usize,
    pub rel_tol: f64,
}

impl Default for BcdSettings {
    fn default() -> Self {
        Self {
            max_iters: 100,
            rel_tol: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BcdOutcome {
    pub policy: CompressionPolicy,
    /// Objective after initialization and after every single-agent update.
    pub trace: Vec<f64>,
    pub sweeps: usize,
}

impl BcdOutcome {
    pub fn mse(&self) -> f64 {
        *self.trace.last().unwrap()
    }
}

/// Unquantized stage-`k` MSE of a set of `k`-row compression matrices.
pub fn policy_mse(weights: &[Matrix], channels: &ChannelSet, sx: &Matrix, sigma2: f64) -> Result<f64> {
    let policy = CompressionPolicy::new(weights.to_vec())?;
    let k = policy.k_max();
    analytic_mse(
        &effective_observation(&policy, channels, k)?,
        sx,
        &effective_noise_cov(&policy, sigma2, k)?,
    )
}

/// Block coordinate descent on the unquantized MSE, starting from the EVD
/// design. Each step replaces one agent's matrix by the reduced-rank Wiener
/// solution given every other agent's compressed signal.
pub fn bcd_policy(
    channels: &ChannelSet,
    sx: &Matrix,
    sigma2: f64,
    k: usize,
    settings: &BcdSettings,
) -> Result<BcdOutcome> {
    if settings.max_iters == 0 || !(settings.rel_tol > 0.0) {
        return Err(Error::Precondition("BCD needs max_iters >= 1 and rel_tol > 0".into()));
    }
    let mut weights = evd_policies(channels, sx, sigma2, k)?.weights().to_vec();
    let mut current = policy_mse(&weights, channels, sx, sigma2)?;
    let mut trace = vec![current];
    let mut sweeps = 0;
    while sweeps < settings.max_iters {
        sweeps += 1;
        let before = current;
        for agent in 0..channels.agents() {
            let candidate = conditional_wiener_rows(channels, &weights, agent, sx, sigma2, k)?;
            let previous = std::mem::replace(&mut weights[agent], candidate);
            let next = policy_mse(&weights, channels, sx, sigma2)?;
            if next > current * (1.0 + 1e-10) + 1e-14 {
                weights[agent] = previous;
                return Err(Error::Numerical(format!(
                    "BCD update of agent {agent} raised the MSE from {current:.12e} to {next:.12e}"
                )));
            }
            current = next.min(current);
            trace.push(current);
        }
        if (before - current) <= settings.rel_tol * before {
            break;
        }
    }
    Ok(BcdOutcome {
        policy: CompressionPolicy::new(weights)?,
        trace,
        sweeps,
    })
}

/// Optimal `k` rows for `agent` with every other agent held fixed.
fn conditional_wiener_rows(
    channels: &ChannelSet,
    weights: &[Matrix],
    agent: usize,
    sx: &Matrix,
    sigma2: f64,
    k: usize,
) -> Result<Matrix> {
    let h = &channels.h[agent];
    let m = h.nrows();

    // source covariance conditioned on the other agents' compressed signals
    let others: Vec<usize> = (0..channels.agents()).filter(|&j| j != agent).collect();
    let cond = if others.is_empty() {
        sx.clone()
    } else {
        let rows = others.len() * k;
        let mut u = Matrix::zeros(rows, sx.nrows());
        let mut sz = Matrix::zeros(rows, rows);
        for (slot, &j) in others.iter().enumerate() {
            let w = &weights[j];
            u.rows_mut(slot * k, k).copy_from(&(w * &channels.h[j]));
            sz.view_mut((slot * k, slot * k), (k, k))
                .copy_from(&(w * w.transpose() * sigma2));
        }
        let us = &u * sx;
        let g = &us * u.transpose() + sz;
        let gain = numerics::solve_spd(&g, &us)
            .map_err(|_| Error::SingularMatrix("BCD side-information covariance".into()))?;
        let c = sx - us.transpose() * gain;
        (&c + c.transpose()) * 0.5
    };

    // conditional covariance of y_i, whitened by its Cholesky factor
    let hs = h * &cond;
    let r = &hs * h.transpose() + Matrix::identity(m, m) * sigma2;
    let chol = numerics::cholesky(&r, "BCD conditional observation covariance")?;
    let l = chol.l();
    // rows of a_t are L^{-1} H Cov(x|s): the whitened conditional cross-covariance
    let a_t = l
        .solve_lower_triangular(&hs)
        .ok_or_else(|| Error::SingularMatrix("BCD whitening".into()))?;

    let directions = top_left_singular(&a_t, k)?;
    let w_t = l
        .transpose()
        .solve_upper_triangular(&directions)
        .ok_or_else(|| Error::SingularMatrix("BCD back-substitution".into()))?;
    let mut w = w_t.transpose();
    for mut row in w.row_iter_mut() {
        let norm = row.norm();
        row /= norm;
    }
    Ok(w)
}

/// Top `k` eigenvectors of `a a^T` (as columns). Uses the small `a^T a`
/// problem when `a` is tall and the requested directions carry energy.
fn top_left_singular(a: &Matrix, k: usize) -> Result<Matrix> {
    let (m, n) = a.shape();
    if k <= n {
        let small = sym_eig_desc(&(a.transpose() * a))?;
        let top = small.values[0].max(0.0);
        if k == 0 || small.values[k - 1] > 1e-12 * top {
            let mut out = Matrix::zeros(m, k);
            for c in 0..k {
                let mut v = a * small.vectors.column(c);
                v /= v.norm();
                out.set_column(c, &v);
            }
            return Ok(out);
        }
    }
    let full = sym_eig_desc(&(a * a.transpose()))?;
    Ok(full.vectors.columns(0, k).into_owned())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CalibrationMode {
    /// One scale factor for every agent and dimension.
    Shared,
    /// Start from the shared optimum, then one cyclic pass choosing each
    /// (agent, dimension) scale with the others held fixed.
    PerDimension,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationGrid {
    pub scales: Vec<f64>,
    pub samples: usize,
    pub mode: CalibrationMode,
}

impl Default for CalibrationGrid {
    fn default() -> Self {
        Self {
            scales: (0..=20).map(|i| 1.0 + 0.25 * i as f64).collect(),
            samples: 100_000,
            mode: CalibrationMode::Shared,
        }
    }
}

impl CalibrationGrid {
    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() || self.scales.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Precondition("calibration scales must be positive".into()));
        }
        if self.samples < 2 {
            return Err(Error::Precondition("calibration needs at least 2 samples".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Calibration {
    /// Chosen scale per agent and stage.
    pub scales: Vec<Vec<f64>>,
    /// Population std of every compressed value over the calibration draws.
    pub stds: Vec<Vec<f64>>,
    pub ranges: Vec<Vec<f64>>,
    /// Empirical stage-`k` MSE of every shared grid scale.
    pub grid_mse: Vec<f64>,
}

impl Calibration {
    pub fn shared_scale(&self) -> f64 {
        self.scales[0][0]
    }
}

/// Chooses dynamic ranges `q = s * std` for one policy and channel
/// realization by exhaustive search over `grid`, minimizing the empirical
/// quantized stage-`k` MSE. All grid points see the same draws.
#[allow(clippy::too_many_arguments)]
pub fn calibrate_dynamic_ranges(
    policy: &CompressionPolicy,
    channels: &ChannelSet,
    source: &SourceModel,
    sigma2: f64,
    k: usize,
    resolution: Resolution,
    grid: &CalibrationGrid,
    rng: &mut RngStream,
) -> Result<Calibration> {
    grid.validate()?;
    let b = policy.agents();
    let k_max = policy.k_max();
    let bank = EstimatorBank::build(policy, channels, source.covariance(), sigma2)?;
    let c = bank.estimator(k);

    // compressed values v[i][r][sample]
    let n = grid.samples;
    let xs = sample_source(source, rng, n);
    let mut values = vec![vec![Vec::with_capacity(n); k_max]; b];
    for (i, h) in channels.h.iter().enumerate() {
        let noise = sample_standard_gaussian(rng, h.nrows(), n) * sigma2.sqrt();
        let v = &policy.weights()[i] * (h * &xs + noise);
        for r in 0..k_max {
            values[i][r].extend(v.row(r).iter().copied());
        }
    }
    let stds: Vec<Vec<f64>> = values
        .iter()
        .map(|rows| rows.iter().map(|v| numerics::mean_and_population_std(v).1).collect())
        .collect();

    let mse_with = |scales: &[Vec<f64>]| -> Result<f64> {
        let specs = match resolution {
            Resolution::Infinite => None,
            Resolution::Bits(bits) => Some(
                (0..b)
                    .map(|i| {
                        (0..k)
                            .map(|r| QuantizerSpec::new(bits, range_from_scale(scales[i][r], stds[i][r])))
                            .collect::<Result<Vec<_>>>()
                    })
                    .collect::<Result<Vec<_>>>()?,
            ),
        };
        let mut received = numerics::Vector::zeros(b * k);
        let mut total = 0.0;
        for s in 0..n {
            for i in 0..b {
                for r in 0..k {
                    let v = values[i][r][s];
                    received[i * k + r] = match &specs {
                        None => v,
                        Some(q) => q[i][r].apply(v)?,
                    };
                }
            }
            total += (c * &received - xs.column(s)).norm_squared();
        }
        Ok(total / n as f64)
    };

    let uniform = |s: f64| vec![vec![s; k_max]; b];
    let grid_mse = if resolution.is_infinite() {
        vec![mse_with(&uniform(grid.scales[0]))?; grid.scales.len()]
    } else {
        grid.scales
            .iter()
            .map(|&s| mse_with(&uniform(s)))
            .collect::<Result<Vec<_>>>()?
    };
    let best = argmin(&grid_mse);
    let mut scales = uniform(grid.scales[best]);

    if grid.mode == CalibrationMode::PerDimension && !resolution.is_infinite() {
        let mut current = grid_mse[best];
        for i in 0..b {
            for r in 0..k {
                for &s in &grid.scales {
                    let keep = scales[i][r];
                    scales[i][r] = s;
                    let mse = mse_with(&scales)?;
                    if mse < current {
                        current = mse;
                    } else {
                        scales[i][r] = keep;
                    }
                }
            }
        }
    }

    let ranges = scales
        .iter()
        .zip(&stds)
        .map(|(s, d)| s.iter().zip(d).map(|(&s, &d)| range_from_scale(s, d)).collect())
        .collect();
    Ok(Calibration {
        scales,
        stds,
        ranges,
        grid_mse,
    })
}

/// Index of the smallest value; the first one on ties.
pub fn argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v < values[best] {
            best = i;
        }
    }
    best
}

/// Exact population std of every compressed value for a known channel:
/// `sqrt(w^T (H Sx H^T + sigma2 I) w)`.
pub fn analytic_stds(policy: &CompressionPolicy, channels: &ChannelSet, sx: &Matrix, sigma2: f64) -> Vec<Vec<f64>> {
    policy
        .weights()
        .iter()
        .zip(&channels.h)
        .map(|(w, h)| {
            let wh = w * h;
            let cov = &wh * sx * wh.transpose() + w * w.transpose() * sigma2;
            (0..w.nrows()).map(|r| cov[(r, r)].max(0.0).sqrt()).collect()
        })
        .collect()
}

/// Applies one shared scale to a policy using the analytic deviations.
pub fn ranges_from_shared_scale(
    policy: CompressionPolicy,
    channels: &ChannelSet,
    sx: &Matrix,
    sigma2: f64,
    scale: f64,
) -> Result<CompressionPolicy> {
    let ranges = analytic_stds(&policy, channels, sx, sigma2)
        .into_iter()
        .map(|row| row.into_iter().map(|d| range_from_scale(scale, d)).collect())
        .collect();
    policy.with_ranges(ranges)
}
