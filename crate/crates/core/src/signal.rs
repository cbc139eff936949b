//! Source, channel and observation generators.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{self, sample_standard_gaussian, Matrix, RngStream, Vector};

/// Scenario scalars shared by every module.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemConfig {
    /// Observation dimension per agent.
    pub m: usize,
    /// Source dimension.
    pub n: usize,
    /// Number of agents.
    pub agents: usize,
    /// Maximum number of progressive stages.
    pub k_max: usize,
    /// Quantizer bits per transmitted dimension.
    pub bits: u32,
    /// Observation noise variance.
    pub sigma2: f64,
    /// Source correlation coefficient.
    pub rho: f64,
    /// Estimations per coherence interval.
    pub coherence: usize,
    pub root_seed: u64,
}

impl SystemConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::config("M", "must be at least 1"));
        }
        if self.n == 0 {
            return Err(Error::config("N", "must be at least 1"));
        }
        if self.agents == 0 {
            return Err(Error::config("B", "must be at least 1"));
        }
        if self.k_max == 0 || self.k_max > self.m {
            return Err(Error::config("K_max", format!("must lie in 1..={}", self.m)));
        }
        if self.bits == 0 {
            return Err(Error::config("Q", "must be at least 1"));
        }
        if !(self.sigma2 > 0.0 && self.sigma2.is_finite()) {
            return Err(Error::config("snr_db", "noise variance must be positive and finite"));
        }
        if !(self.rho.abs() < 1.0) {
            return Err(Error::config("rho", "must satisfy |rho| < 1"));
        }
        if self.coherence == 0 {
            return Err(Error::config("T", "must be at least 1"));
        }
        Ok(())
    }
}

/// Zero-mean Gaussian source with covariance `rho^|i-j|`.
#[derive(Clone, Debug)]
pub struct SourceModel {
    covariance: Matrix,
    cholesky: Matrix,
}

impl SourceModel {
    pub fn new(covariance: Matrix) -> Result<Self> {
        numerics::check_symmetric(&covariance, "source covariance")?;
        let cholesky = numerics::cholesky_lower(&covariance)?;
        Ok(Self { covariance, cholesky })
    }

    pub fn covariance(&self) -> &Matrix {
        &self.covariance
    }

    pub fn cholesky(&self) -> &Matrix {
        &self.cholesky
    }

    pub fn dim(&self) -> usize {
        self.covariance.nrows()
    }
}

pub fn build_source_covariance(n: usize, rho: f64) -> Result<SourceModel> {
    if !(rho.abs() < 1.0) {
        return Err(Error::Precondition(format!("|rho| must be < 1, got {rho}")));
    }
    if n == 0 {
        return Err(Error::Precondition("source dimension must be positive".into()));
    }
    let cov = Matrix::from_fn(n, n, |i, j| rho.powi(i.abs_diff(j) as i32));
    SourceModel::new(cov)
}

/// `count` source draws as the columns of an `N x count` matrix.
pub fn sample_source(model: &SourceModel, rng: &mut RngStream, count: usize) -> Matrix {
    let g = sample_standard_gaussian(rng, model.dim(), count);
    model.cholesky() * g
}

/// One channel matrix per agent.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelSet {
    pub h: Vec<Matrix>,
}

impl ChannelSet {
    pub fn agents(&self) -> usize {
        self.h.len()
    }

    /// All channels stacked vertically (`B*M x N`).
    pub fn stacked(&self) -> Matrix {
        let rows: usize = self.h.iter().map(|h| h.nrows()).sum();
        let cols = self.h[0].ncols();
        let mut out = Matrix::zeros(rows, cols);
        let mut r = 0;
        for h in &self.h {
            out.rows_mut(r, h.nrows()).copy_from(h);
            r += h.nrows();
        }
        out
    }
}

/// Draws `B` independent `M x N` standard Gaussian channels. Agent `i` draws
/// from the child stream `agent{i}`.
pub fn sample_channels(config: &SystemConfig, rng: &RngStream) -> ChannelSet {
    let h = (0..config.agents)
        .map(|i| sample_standard_gaussian(&mut rng.child(format!("agent{i}")), config.m, config.n))
        .collect();
    ChannelSet { h }
}

/// `y = H x + z` with `z ~ N(0, sigma2 I)`.
pub fn observe(h: &Matrix, x: &Vector, sigma2: f64, rng: &mut RngStream) -> Vector {
    let sd = sigma2.sqrt();
    let z = Vector::from_fn(h.nrows(), |_, _| sd * rng.gaussian());
    observe_with_noise(h, x, &z)
}

pub fn observe_with_noise(h: &Matrix, x: &Vector, z: &Vector) -> Vector {
    h * x + z
}

/// `sigma2 = 10^(-snr_db / 10)`.
pub fn snr_to_sigma2(snr_db: f64) -> f64 {
    10f64.powf(-snr_db / 10.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn config() -> SystemConfig {
        SystemConfig {
            m: 5,
            n: 3,
            agents: 3,
            k_max: 2,
            bits: 6,
            sigma2: 1.0,
            rho: 0.0,
            coherence: 200,
            root_seed: 1,
        }
    }

    #[test]
    fn covariance_entries() {
        let model = build_source_covariance(3, 0.9).unwrap();
        let expected = Matrix::from_row_slice(3, 3, &[1.0, 0.9, 0.81, 0.9, 1.0, 0.9, 0.81, 0.9, 1.0]);
        assert_relative_eq!(model.covariance().clone(), expected, epsilon = 1e-15);
        assert_eq!(
            build_source_covariance(4, 0.0).unwrap().covariance().clone(),
            Matrix::identity(4, 4)
        );
        let six = build_source_covariance(6, 0.9).unwrap();
        let l = six.cholesky();
        assert!((l * l.transpose() - six.covariance()).norm() <= 1e-10);
        assert!(build_source_covariance(3, 1.0).is_err());
        assert!(build_source_covariance(3, -1.2).is_err());
    }

    #[test]
    fn source_empirical_covariance() {
        let model = build_source_covariance(3, 0.9).unwrap();
        let n = 1_000_000;
        let xs = sample_source(&model, &mut RngStream::new(3, "source"), n);
        let emp = &xs * xs.transpose() / n as f64;
        let cov = model.covariance();
        for i in 0..3 {
            for j in 0..3 {
                // var of x_i x_j is S_ii S_jj + S_ij^2 for Gaussians
                let se = ((cov[(i, i)] * cov[(j, j)] + cov[(i, j)].powi(2)) / n as f64).sqrt();
                assert!((emp[(i, j)] - cov[(i, j)]).abs() < 4.0 * se, "({i},{j})");
            }
        }
    }

    #[test]
    fn source_reproducible() {
        let model = build_source_covariance(4, 0.0).unwrap();
        let a = sample_source(&model, &mut RngStream::new(3, "s"), 10);
        let b = sample_source(&model, &mut RngStream::new(3, "s"), 10);
        assert_eq!(a, b);
        // rho = 0 reduces to plain standard normal draws
        let g = sample_standard_gaussian(&mut RngStream::new(3, "s"), 4, 10);
        assert_eq!(a, g);
    }

    #[test]
    fn channels_shape_and_independence() {
        let cfg = config();
        let ch = sample_channels(&cfg, &RngStream::new(1, "channels"));
        assert_eq!(ch.agents(), 3);
        assert!(ch.h.iter().all(|h| h.shape() == (5, 3)));
        assert_ne!(ch.h[0], ch.h[1]);
        assert_eq!(ch.stacked().shape(), (15, 3));
    }

    #[test]
    fn channel_moments() {
        let cfg = SystemConfig {
            m: 1000,
            n: 1000,
            agents: 1,
            ..config()
        };
        let ch = sample_channels(&cfg, &RngStream::new(8, "channels"));
        let vals = ch.h[0].as_slice();
        let (mean, sd) = numerics::mean_and_population_std(vals);
        assert!(mean.abs() < 4e-3);
        assert!((sd * sd - 1.0).abs() < 1e-2);
    }

    #[test]
    fn observe_injected_noise() {
        let h = Matrix::identity(2, 2);
        let x = Vector::from_vec(vec![1.0, 2.0]);
        let z = Vector::from_vec(vec![0.1, -0.1]);
        let y = observe_with_noise(&h, &x, &z);
        assert_relative_eq!(y, Vector::from_vec(vec![1.1, 1.9]), epsilon = 1e-15);
        let noiseless = observe_with_noise(&h, &x, &Vector::zeros(2));
        assert_eq!(noiseless, &h * &x);
    }

    #[test]
    fn observe_noise_variance() {
        let h = Matrix::from_row_slice(1, 2, &[0.5, -1.0]);
        let x = Vector::from_vec(vec![2.0, 3.0]);
        let hx = (&h * &x)[0];
        let mut rng = RngStream::new(6, "noise");
        let n = 1_000_000;
        let resid: Vec<f64> = (0..n).map(|_| observe(&h, &x, 0.3, &mut rng)[0] - hx).collect();
        let (_, sd) = numerics::mean_and_population_std(&resid);
        assert!((sd * sd / 0.3 - 1.0).abs() < 0.01);
    }

    #[test]
    fn snr_conversion() {
        assert_eq!(snr_to_sigma2(0.0), 1.0);
        assert_relative_eq!(snr_to_sigma2(10.0), 0.1, epsilon = 1e-15);
        assert_relative_eq!(snr_to_sigma2(-10.0), 10.0, epsilon = 1e-13);
    }

    #[test]
    fn config_validation() {
        assert!(config().validate().is_ok());
        let bad = SystemConfig { k_max: 6, ..config() };
        match bad.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "K_max"),
            other => panic!("{other:?}"),
        }
        assert!(SystemConfig { rho: 1.0, ..config() }.validate().is_err());
        assert!(SystemConfig { bits: 0, ..config() }.validate().is_err());
    }
}
