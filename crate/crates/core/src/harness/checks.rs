//! Built-in correctness checks run by `selftest`.

use std::time::Instant;

use crate::baselines::{bcd_policy, policy_mse, BcdSettings};
use crate::cost::{cost_global, cost_local, crossover_t, Crossover};
use crate::error::Result;
use crate::fusion::full_observation_lower_bound;
use crate::fusion::{analytic_mse, effective_noise_cov, effective_observation, lmmse_matrix, CompressionPolicy};
use crate::network::pipeline::{gradient_check, Channel, LossMode, PipelineConfig, TrainingBatch};
use crate::network::{Architecture, PolicyNetwork, RangeMode};
use crate::numerics::{mean_and_stderr, sample_standard_gaussian, Matrix, RngStream};
use crate::quantization::{QuantizerSpec, Resolution};
use crate::signal::{build_source_covariance, sample_channels, sample_source, ChannelSet, SystemConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl std::fmt::Display for CheckResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{verdict} {:<22} {} ({:.1}s)", self.name, self.detail, self.seconds)
    }
}

fn run(name: &'static str, body: impl FnOnce() -> Result<(bool, String)>) -> CheckResult {
    let started = Instant::now();
    let (passed, detail) = body().unwrap_or_else(|e| (false, format!("error: {e}")));
    CheckResult {
        name,
        passed,
        detail,
        seconds: started.elapsed().as_secs_f64(),
    }
}

fn system(m: usize, n: usize, agents: usize, k_max: usize, sigma2: f64, rho: f64) -> SystemConfig {
    SystemConfig {
        m,
        n,
        agents,
        k_max,
        bits: 6,
        sigma2,
        rho,
        coherence: 200,
        root_seed: 0,
    }
}

/// Builds the effective noise covariance from `(policy, sigma2, k)`;
/// replaceable so the oracle can be shown to catch a broken one.
pub type NoiseCovBuilder = dyn Fn(&CompressionPolicy, f64, usize) -> Result<Matrix>;

pub fn run_all() -> Vec<CheckResult> {
    vec![
        quantizer_suite(100_000),
        lmmse_oracle(&|p, s, k| effective_noise_cov(p, s, k), 1_000_000, 0),
        gradients(200),
        bcd_checks(),
        cost_checks(),
    ]
}

/// Reconstruction error bound, monotonicity and saturation of the quantizer.
pub fn quantizer_suite(samples: usize) -> CheckResult {
    run("quantizer", || {
        let mut rng = RngStream::new(0, "selftest/quantizer");
        for _ in 0..samples {
            let bits = 1 + rng.index(12) as u32;
            let q = 10f64.powf(rng.uniform(-3.0, 3.0));
            let spec = QuantizerSpec::new(bits, q)?;
            let v = q * rng.uniform_symmetric();
            let err = (v - spec.apply(v)?).abs();
            if err > q / 2f64.powi(bits as i32) {
                return Ok((false, format!("|v - Q(v)| = {err:e} for v={v}, q={q}, Q={bits}")));
            }
            let w = v + q * rng.uniform(0.0, 0.5);
            if spec.apply(w)? < spec.apply(v)? {
                return Ok((false, format!("not monotone between {v} and {w} (q={q}, Q={bits})")));
            }
            let (bottom, top) = (spec.dequantize(0), spec.dequantize(spec.levels() - 1));
            if spec.apply(q * (1.0 + rng.uniform(0.0, 5.0)))? != top
                || spec.apply(-q * (1.0 + rng.uniform(0.0, 5.0)))? != bottom
            {
                return Ok((false, format!("no saturation at q={q}, Q={bits}")));
            }
        }
        Ok((true, format!("{samples} random cases")))
    })
}

/// Monte Carlo MSE of the LMMSE estimator against its analytic value, with
/// the estimator and the analytic value both derived from `noise_cov`.
pub fn lmmse_oracle(noise_cov: &NoiseCovBuilder, samples: usize, seed: u64) -> CheckResult {
    run("lmmse-oracle", || {
        // scalar cases: x ~ N(0,1), y = h x + z, sigma2 = 1
        for (h, expected) in [(1.0, 0.5), (2.0, 0.2)] {
            let u = Matrix::from_element(1, 1, h);
            let mse = analytic_mse(&u, &Matrix::identity(1, 1), &Matrix::identity(1, 1))?;
            if (mse - expected).abs() > 1e-12 {
                return Ok((false, format!("scalar h={h}: {mse} != {expected}")));
            }
        }
        let (m, n, b, k, sigma2) = (3, 2, 2, 2, 0.5);
        let root = RngStream::new(seed, "selftest/lmmse");
        let source = build_source_covariance(n, 0.3)?;
        let channels = sample_channels(&system(m, n, b, k, sigma2, 0.3), &root.child("channel"));
        let mut wrng = root.child("weights");
        let policy = CompressionPolicy::new((0..b).map(|_| sample_standard_gaussian(&mut wrng, k, m)).collect())?;
        let u = effective_observation(&policy, &channels, k)?;
        let sz = noise_cov(&policy, sigma2, k)?;
        let c = lmmse_matrix(&u, source.covariance(), &sz)?;
        let predicted = analytic_mse(&u, source.covariance(), &sz)?;

        let mut rng = root.child("draws");
        let xs = sample_source(&source, &mut rng, samples);
        let mut errors = Vec::with_capacity(samples);
        for j in 0..samples {
            let x = xs.column(j);
            let mut received = Vec::with_capacity(b * k);
            for (i, h) in channels.h.iter().enumerate() {
                let z = sample_standard_gaussian(&mut rng, m, 1) * sigma2.sqrt();
                let y = h * x + z;
                received.extend((policy.weights()[i].rows(0, k) * y).iter().copied());
            }
            let est = &c * Matrix::from_vec(b * k, 1, received);
            errors.push((est - x).norm_squared());
        }
        let (mean, stderr) = mean_and_stderr(&errors);
        let z = (mean - predicted).abs() / stderr;
        Ok((
            z <= 3.0,
            format!("analytic {predicted:.5}, Monte Carlo {mean:.5} +- {stderr:.5} ({z:.2} stderr)"),
        ))
    })
}

/// Backward pass against central differences on the downsized network.
pub fn gradients(params: usize) -> CheckResult {
    run("gradient-check", || {
        let arch = Architecture {
            m: 6,
            n: 3,
            agents: 2,
            k_max: 2,
            hidden: vec![16, 8],
            tied_heads: false,
        };
        let source = build_source_covariance(3, 0.5)?;
        let batch = TrainingBatch::sample(6, 3, 2, 2, &source, 1.0, 32, &RngStream::new(0, "selftest/batch"));
        let mut worst = 0.0f64;
        let mut probes = 0;
        for (mode, resolution) in [
            (RangeMode::BatchStatistic, Resolution::Bits(6)),
            (RangeMode::Trainable, Resolution::Bits(6)),
        ] {
            let net = PolicyNetwork::new(arch.clone(), mode, &RngStream::new(0, "selftest/net"))?;
            let cfg = PipelineConfig {
                sigma2: 1.0,
                source_cov: source.covariance().clone(),
                loss: LossMode::ProgressiveSum,
                channel: Channel::Surrogate(resolution),
            };
            let found = gradient_check(
                &net,
                &batch,
                &cfg,
                params / 2,
                1e-6,
                &mut RngStream::new(0, "selftest/probe"),
            )?;
            probes += found.len();
            worst = found.iter().map(|p| p.relative_error(0.0)).fold(worst, f64::max);
        }
        Ok((
            worst < 1e-4,
            format!("{probes} parameters, worst relative error {worst:.2e}"),
        ))
    })
}

/// BCD objective never increases, a one-agent 2-D instance matches a fine
/// direction grid, and with `K = N` BCD reaches the centralized bound.
pub fn bcd_checks() -> CheckResult {
    run("bcd", || {
        let settings = BcdSettings::default();
        for r in 0..50 {
            let cfg = system(8, 4, 3, 2, 1.0, 0.3);
            let ch = sample_channels(&cfg, &RngStream::new(r, "selftest/bcd"));
            let out = bcd_policy(&ch, build_source_covariance(4, 0.3)?.covariance(), 1.0, 2, &settings)?;
            for (t, w) in out.trace.windows(2).enumerate() {
                if w[1] > w[0] * (1.0 + 1e-12) {
                    return Ok((
                        false,
                        format!("instance {r}: objective rose at update {t}: {} -> {}", w[0], w[1]),
                    ));
                }
            }
        }

        let mut rng = RngStream::new(0, "selftest/bcd-grid");
        let h = sample_standard_gaussian(&mut rng, 2, 2);
        let ch = ChannelSet { h: vec![h] };
        let sx = Matrix::identity(2, 2);
        let bcd = bcd_policy(&ch, &sx, 1.0, 1, &settings)?.mse();
        let mut grid = f64::INFINITY;
        let steps = (std::f64::consts::PI / 1e-3).ceil() as usize;
        for s in 0..steps {
            let theta = s as f64 * 1e-3;
            let w = Matrix::from_row_slice(1, 2, &[theta.cos(), theta.sin()]);
            grid = grid.min(policy_mse(&[w], &ch, &sx, 1.0)?);
        }
        if (bcd - grid).abs() > 1e-6 {
            return Ok((false, format!("2-D instance: BCD {bcd} vs grid {grid}")));
        }

        let mut worst = 0.0f64;
        for r in 0..20 {
            let cfg = system(16, 4, 3, 4, 1.0, 0.0);
            let ch = sample_channels(&cfg, &RngStream::new(r, "selftest/bcd-bound"));
            let sx = Matrix::identity(4, 4);
            let bound = full_observation_lower_bound(&ch, &sx, 1.0)?.mse;
            let got = bcd_policy(&ch, &sx, 1.0, 4, &settings)?.mse();
            worst = worst.max((got - bound) / bound);
        }
        Ok((
            worst <= 5e-3,
            format!(
                "monotone on 50 instances, grid gap {:.1e}, worst K=N gap {:.2e}",
                (bcd - grid).abs(),
                worst
            ),
        ))
    })
}

pub fn cost_checks() -> CheckResult {
    run("cost", || {
        if cost_global(64, 6, 4, 200).total != 1444 || cost_local(6, 4, 200).total != 840 {
            return Ok((false, "reference case (64, 6, 4, 200) is off".into()));
        }
        for m in [1u64, 8, 64, 128] {
            for n in [1u64, 3, 6] {
                for k in 1..=6u64 {
                    for t in [1u64, 10, 200, 5000] {
                        let g = cost_global(m, n, k, t).total;
                        let l = cost_local(n, k, t).total;
                        if g != m * n + m * k + k + t * k || l != n * k + k * k + t * k {
                            return Ok((false, format!("mismatch at M={m}, N={n}, K={k}, T={t}")));
                        }
                    }
                    for kg in 1..k {
                        if let Crossover::At(t) = crossover_t(k, kg, m, n) {
                            let local = (n * k + k * k) as f64 / t + k as f64;
                            let global = (m * n + m * kg + kg) as f64 / t + kg as f64;
                            if (local - global).abs() > 1e-9 {
                                return Ok((false, format!("crossover residual at M={m}, N={n}, K={k}/{kg}")));
                            }
                        }
                    }
                }
            }
        }
        Ok((true, "grid matches, crossovers substitute back".into()))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_checks_pass() {
        for c in [
            quantizer_suite(20_000),
            cost_checks(),
            lmmse_oracle(&|p, s, k| effective_noise_cov(p, s, k), 100_000, 1),
        ] {
            assert!(c.passed, "{c}");
        }
    }

    #[test]
    fn oracle_catches_missing_noise_variance() {
        // the block covariance built without its sigma2 factor
        let broken = |p: &CompressionPolicy, _s: f64, k: usize| effective_noise_cov(p, 1.0, k);
        let c = lmmse_oracle(&broken, 100_000, 1);
        assert!(!c.passed, "{c}");
    }
}
