//! Fusion-center side: progressive effective models and LMMSE estimators.
//!
//! After `k` stages the fusion center holds, from every agent `i`, the first
//! `k` compressed values `W_i[k] y_i`. Stacked agent-major they follow
//! `U_k x + noise` with `U_k = [W_1[k] H_1; ...; W_B[k] H_B]` and a
//! block-diagonal noise covariance `sigma2 W_i[k] W_i[k]^T`. The estimator
//! ignores quantization error.

use nalgebra::SVD;

use crate::error::{Error, Result};
use crate::numerics::{self, mean_and_stderr, Matrix, RngStream, Vector};
use crate::quantization::{QuantizerSpec, Resolution};
use crate::signal::{sample_source, ChannelSet, SourceModel};

const RANK_TOL: f64 = 1e-8;

/// Per-agent compression rows plus the dynamic range of every row.
#[derive(Clone, Debug, PartialEq)]
pub struct CompressionPolicy {
    weights: Vec<Matrix>,
    ranges: Option<Vec<Vec<f64>>>,
}

impl CompressionPolicy {
    /// Policy without dynamic ranges; usable only unquantized until
    /// [`CompressionPolicy::with_ranges`] is applied.
    pub fn new(weights: Vec<Matrix>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidInput("policy needs at least one agent".into()));
        }
        let shape = weights[0].shape();
        if shape.0 == 0 || shape.0 > shape.1 {
            return Err(Error::InvalidInput(format!(
                "compression matrix must have 1..=M rows, got {}x{}",
                shape.0, shape.1
            )));
        }
        for (i, w) in weights.iter().enumerate() {
            if w.shape() != shape {
                return Err(Error::InvalidInput(format!(
                    "agent {i} has a {}x{} compression matrix, expected {}x{}",
                    w.nrows(),
                    w.ncols(),
                    shape.0,
                    shape.1
                )));
            }
            if !numerics::all_finite(w) {
                return Err(Error::InvalidInput(format!("agent {i}: non-finite weights")));
            }
        }
        Ok(Self { weights, ranges: None })
    }

    pub fn with_ranges(mut self, ranges: Vec<Vec<f64>>) -> Result<Self> {
        if ranges.len() != self.agents() || ranges.iter().any(|r| r.len() != self.k_max()) {
            return Err(Error::InvalidInput(
                "dynamic ranges do not match the policy shape".into(),
            ));
        }
        if ranges.iter().flatten().any(|q| !(*q > 0.0 && q.is_finite())) {
            return Err(Error::InvalidInput("dynamic ranges must be positive and finite".into()));
        }
        self.ranges = Some(ranges);
        Ok(self)
    }

    pub fn agents(&self) -> usize {
        self.weights.len()
    }

    pub fn k_max(&self) -> usize {
        self.weights[0].nrows()
    }

    pub fn observation_dim(&self) -> usize {
        self.weights[0].ncols()
    }

    pub fn weights(&self) -> &[Matrix] {
        &self.weights
    }

    pub fn ranges(&self) -> Option<&[Vec<f64>]> {
        self.ranges.as_deref()
    }

    /// First `k` rows of agent `i`'s compression matrix.
    pub fn prefix(&self, agent: usize, k: usize) -> Matrix {
        self.weights[agent].rows(0, k).into_owned()
    }

    fn check_stage(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.k_max() {
            return Err(Error::Precondition(format!("stage {k} outside 1..={}", self.k_max())));
        }
        Ok(())
    }

    /// Every used prefix must have full row rank.
    pub fn check_rank(&self) -> Result<()> {
        for (i, w) in self.weights.iter().enumerate() {
            for k in 1..=self.k_max() {
                let sv = SVD::new(w.rows(0, k).into_owned(), false, false).singular_values;
                let max = sv.max();
                let min = sv.min();
                if !(min > RANK_TOL * max) {
                    return Err(Error::InvalidInput(format!(
                        "agent {i}: stage-{k} prefix is rank deficient (sv ratio {:.2e})",
                        min / max
                    )));
                }
            }
        }
        Ok(())
    }
}

/// `U_k`: agent-major stack of `W_i[k] H_i`, shape `(B k) x N`.
pub fn effective_observation(policy: &CompressionPolicy, channels: &ChannelSet, k: usize) -> Result<Matrix> {
    policy.check_stage(k)?;
    if channels.agents() != policy.agents() {
        return Err(Error::InvalidInput(format!(
            "{} channels for a {}-agent policy",
            channels.agents(),
            policy.agents()
        )));
    }
    let n = channels.h[0].ncols();
    let mut u = Matrix::zeros(policy.agents() * k, n);
    for (i, h) in channels.h.iter().enumerate() {
        if h.nrows() != policy.observation_dim() {
            return Err(Error::InvalidInput(format!(
                "agent {i}: channel has {} rows, policy expects {}",
                h.nrows(),
                policy.observation_dim()
            )));
        }
        u.rows_mut(i * k, k).copy_from(&(policy.weights[i].rows(0, k) * h));
    }
    Ok(u)
}

/// Block-diagonal effective noise covariance with blocks `sigma2 W_i[k] W_i[k]^T`.
pub fn effective_noise_cov(policy: &CompressionPolicy, sigma2: f64, k: usize) -> Result<Matrix> {
    policy.check_stage(k)?;
    let b = policy.agents();
    let mut cov = Matrix::zeros(b * k, b * k);
    for (i, w) in policy.weights.iter().enumerate() {
        let wk = w.rows(0, k);
        cov.view_mut((i * k, i * k), (k, k))
            .copy_from(&(wk * wk.transpose() * sigma2));
    }
    Ok(cov)
}

fn gram(u: &Matrix, sx: &Matrix, sz: &Matrix) -> Result<Matrix> {
    if u.ncols() != sx.nrows() || sz.nrows() != u.nrows() || !sz.is_square() {
        return Err(Error::Precondition("LMMSE operand shapes disagree".into()));
    }
    Ok(u * sx * u.transpose() + sz)
}

/// `C = Sx U^T (U Sx U^T + Sz)^{-1}`, computed by a Cholesky solve.
pub fn lmmse_matrix(u: &Matrix, sx: &Matrix, sz: &Matrix) -> Result<Matrix> {
    let g = gram(u, sx, sz)?;
    let rhs = u * sx;
    let solved = numerics::solve_spd(&g, &rhs)
        .map_err(|_| Error::SingularMatrix("LMMSE Gram matrix (rank-deficient policy?)".into()))?;
    Ok(solved.transpose())
}

pub fn estimate(c: &Matrix, received: &Vector) -> Result<Vector> {
    if c.ncols() != received.len() {
        return Err(Error::InvalidInput(format!(
            "estimator expects {} values, got {}",
            c.ncols(),
            received.len()
        )));
    }
    Ok(c * received)
}

/// `tr(Sx - Sx U^T (U Sx U^T + Sz)^{-1} U Sx)`.
pub fn analytic_mse(u: &Matrix, sx: &Matrix, sz: &Matrix) -> Result<f64> {
    let g = gram(u, sx, sz)?;
    let us = u * sx;
    let solved = numerics::solve_spd(&g, &us)?;
    Ok(sx.trace() - us.dot(&solved))
}

/// LMMSE estimators for every progressive stage of one policy and channel
/// realization, with their unquantized MSE.
#[derive(Clone, Debug)]
pub struct EstimatorBank {
    estimators: Vec<Matrix>,
    analytic: Vec<f64>,
}

impl EstimatorBank {
    pub fn build(policy: &CompressionPolicy, channels: &ChannelSet, sx: &Matrix, sigma2: f64) -> Result<Self> {
        let mut estimators = Vec::with_capacity(policy.k_max());
        let mut analytic = Vec::with_capacity(policy.k_max());
        for k in 1..=policy.k_max() {
            let u = effective_observation(policy, channels, k)?;
            let sz = effective_noise_cov(policy, sigma2, k)?;
            let c = lmmse_matrix(&u, sx, &sz)?;
            if !numerics::all_finite(&c) {
                return Err(Error::Numerical(format!("stage-{k} estimator is not finite")));
            }
            analytic.push(analytic_mse(&u, sx, &sz)?);
            estimators.push(c);
        }
        check_progressive(&analytic)?;
        Ok(Self { estimators, analytic })
    }

    pub fn k_max(&self) -> usize {
        self.estimators.len()
    }

    /// Estimator for stage `k` (1-based).
    pub fn estimator(&self, k: usize) -> &Matrix {
        &self.estimators[k - 1]
    }

    pub fn analytic_mse(&self, k: usize) -> f64 {
        self.analytic[k - 1]
    }

    pub fn analytic(&self) -> &[f64] {
        &self.analytic
    }
}

/// Distortion must not grow as stages are added; `1e-9` relative slack
/// absorbs rounding.
pub fn check_progressive(mse: &[f64]) -> Result<()> {
    let scale = mse.first().copied().unwrap_or(0.0).abs().max(f64::MIN_POSITIVE);
    for (k, pair) in mse.windows(2).enumerate() {
        if pair[1] > pair[0] + 1e-9 * scale {
            return Err(Error::Numerical(format!(
                "distortion increased from stage {} ({:.6e}) to stage {} ({:.6e})",
                k + 1,
                pair[0],
                k + 2,
                pair[1]
            )));
        }
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct LowerBound {
    pub estimator: Matrix,
    pub mse: f64,
}

/// Centralized LMMSE from every raw observation.
pub fn full_observation_lower_bound(channels: &ChannelSet, sx: &Matrix, sigma2: f64) -> Result<LowerBound> {
    let h = channels.stacked();
    let sz = Matrix::identity(h.nrows(), h.nrows()) * sigma2;
    Ok(LowerBound {
        estimator: lmmse_matrix(&h, sx, &sz)?,
        mse: analytic_mse(&h, sx, &sz)?,
    })
}

/// Monte Carlo mean squared error with its standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MseEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub samples: usize,
}

/// Monte Carlo `E||x_hat_k - x||^2` for a fixed channel realization, with
/// every compressed value passed through its uniform quantizer (or left
/// untouched for [`Resolution::Infinite`]).
#[allow(clippy::too_many_arguments)]
pub fn empirical_mse(
    policy: &CompressionPolicy,
    channels: &ChannelSet,
    source: &SourceModel,
    sigma2: f64,
    k: usize,
    resolution: Resolution,
    samples: usize,
    rng: &mut RngStream,
) -> Result<MseEstimate> {
    let bank = EstimatorBank::build(policy, channels, source.covariance(), sigma2)?;
    let errors = squared_errors(policy, &bank, channels, source, sigma2, k, resolution, samples, rng)?;
    let (mean, stderr) = mean_and_stderr(&errors);
    Ok(MseEstimate { mean, stderr, samples })
}

/// Per-sample squared errors at stage `k` using a prebuilt estimator bank.
#[allow(clippy::too_many_arguments)]
pub fn squared_errors(
    policy: &CompressionPolicy,
    bank: &EstimatorBank,
    channels: &ChannelSet,
    source: &SourceModel,
    sigma2: f64,
    k: usize,
    resolution: Resolution,
    samples: usize,
    rng: &mut RngStream,
) -> Result<Vec<f64>> {
    policy.check_stage(k)?;
    let quantizers = match resolution {
        Resolution::Infinite => None,
        Resolution::Bits(bits) => {
            let ranges = policy
                .ranges()
                .ok_or_else(|| Error::Precondition("quantized evaluation needs calibrated dynamic ranges".into()))?;
            let specs = ranges
                .iter()
                .map(|r| {
                    r[..k]
                        .iter()
                        .map(|&q| QuantizerSpec::new(bits, q))
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()?;
            Some(specs)
        }
    };
    let prefixes: Vec<Matrix> = (0..policy.agents()).map(|i| policy.prefix(i, k)).collect();
    let c = bank.estimator(k);
    let xs = sample_source(source, rng, samples);
    let sd = sigma2.sqrt();
    let m = policy.observation_dim();
    let mut received = Vector::zeros(policy.agents() * k);
    let mut out = Vec::with_capacity(samples);
    for s in 0..samples {
        let x = xs.column(s);
        for (i, h) in channels.h.iter().enumerate() {
            let noise = Vector::from_fn(m, |_, _| sd * rng.gaussian());
            let y = h * x + noise;
            let v = &prefixes[i] * y;
            for r in 0..k {
                received[i * k + r] = match &quantizers {
                    None => v[r],
                    Some(specs) => specs[i][r].apply(v[r])?,
                };
            }
        }
        let err = c * &received - x;
        out.push(err.norm_squared());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::sample_standard_gaussian;
    use crate::signal::build_source_covariance;
    use approx::assert_relative_eq;

    fn scalar(h: f64) -> (CompressionPolicy, ChannelSet) {
        let policy = CompressionPolicy::new(vec![Matrix::from_element(1, 1, 1.0)]).unwrap();
        let ch = ChannelSet {
            h: vec![Matrix::from_element(1, 1, h)],
        };
        (policy, ch)
    }

    fn random_instance(seed: u64, m: usize, n: usize, b: usize, k: usize) -> (CompressionPolicy, ChannelSet) {
        let mut rng = RngStream::new(seed, "fusion-test");
        let w = (0..b).map(|_| sample_standard_gaussian(&mut rng, k, m)).collect();
        let h = (0..b).map(|_| sample_standard_gaussian(&mut rng, m, n)).collect();
        (CompressionPolicy::new(w).unwrap(), ChannelSet { h })
    }

    #[test]
    fn effective_observation_cases() {
        let policy = CompressionPolicy::new(vec![
            Matrix::from_row_slice(1, 2, &[1.0, 0.0]),
            Matrix::from_row_slice(1, 2, &[0.0, 1.0]),
        ])
        .unwrap();
        let ch = ChannelSet {
            h: vec![Matrix::identity(2, 2), Matrix::identity(2, 2)],
        };
        assert_eq!(effective_observation(&policy, &ch, 1).unwrap(), Matrix::identity(2, 2));
        assert!(effective_observation(&policy, &ch, 2).is_err());
        assert!(effective_observation(&policy, &ch, 0).is_err());

        let (policy, ch) = random_instance(1, 5, 3, 3, 4);
        let u = effective_observation(&policy, &ch, 4).unwrap();
        assert_eq!(u.shape(), (12, 3));
        let u2 = effective_observation(&policy, &ch, 2).unwrap();
        // agent 0 rows recomputed entry by entry
        for r in 0..2 {
            for c in 0..3 {
                let direct: f64 = (0..5).map(|j| policy.weights()[0][(r, j)] * ch.h[0][(j, c)]).sum();
                assert_relative_eq!(u2[(r, c)], direct, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn noise_cov_cases() {
        let policy = CompressionPolicy::new(vec![Matrix::from_row_slice(1, 2, &[1.0, 0.0])]).unwrap();
        assert_eq!(
            effective_noise_cov(&policy, 2.0, 1).unwrap(),
            Matrix::from_element(1, 1, 2.0)
        );

        let orth = CompressionPolicy::new(vec![Matrix::identity(2, 3), Matrix::identity(2, 3)]).unwrap();
        assert_eq!(effective_noise_cov(&orth, 1.0, 2).unwrap(), Matrix::identity(4, 4));

        let (policy, _) = random_instance(2, 6, 3, 2, 3);
        let cov = effective_noise_cov(&policy, 0.7, 3).unwrap();
        for i in 0..2 {
            let w = &policy.weights()[i];
            for r in 0..3 {
                for c in 0..3 {
                    let direct: f64 = 0.7 * (0..6).map(|j| w[(r, j)] * w[(c, j)]).sum::<f64>();
                    assert_relative_eq!(cov[(3 * i + r, 3 * i + c)], direct, epsilon = 1e-12);
                }
            }
        }
        assert_eq!(cov[(0, 3)], 0.0);
    }

    #[test]
    fn scalar_wiener() {
        for (h, c_expected, mse_expected) in [(1.0, 0.5, 0.5), (2.0, 0.4, 0.2)] {
            let (policy, ch) = scalar(h);
            let sx = Matrix::identity(1, 1);
            let u = effective_observation(&policy, &ch, 1).unwrap();
            let sz = effective_noise_cov(&policy, 1.0, 1).unwrap();
            let c = lmmse_matrix(&u, &sx, &sz).unwrap();
            assert!((c[(0, 0)] - c_expected).abs() < 1e-12);
            assert!((analytic_mse(&u, &sx, &sz).unwrap() - mse_expected).abs() < 1e-12);
        }
        let (policy, ch) = scalar(1.0);
        let u = effective_observation(&policy, &ch, 1).unwrap();
        let sz = effective_noise_cov(&policy, 1e6, 1).unwrap();
        assert!(lmmse_matrix(&u, &Matrix::identity(1, 1), &sz).unwrap().norm() <= 1e-3);
    }

    #[test]
    fn singular_gram_is_an_error() {
        let u = Matrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 0.0]);
        let sz = Matrix::zeros(2, 2);
        assert!(matches!(
            lmmse_matrix(&u, &Matrix::identity(2, 2), &sz),
            Err(Error::SingularMatrix(_))
        ));
    }

    #[test]
    fn estimate_linear() {
        let c = Matrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, -1.0, 0.5, 0.0]);
        assert_eq!(estimate(&c, &Vector::zeros(3)).unwrap(), Vector::zeros(2));
        let a = Vector::from_vec(vec![1.0, 2.0, -1.0]);
        let b = Vector::from_vec(vec![0.5, 0.0, 4.0]);
        let lhs = estimate(&c, &(&a * 2.0 + &b)).unwrap();
        let rhs = estimate(&c, &a).unwrap() * 2.0 + estimate(&c, &b).unwrap();
        assert_relative_eq!(lhs, rhs, epsilon = 1e-12);
        assert!(estimate(&c, &Vector::zeros(2)).is_err());
    }

    #[test]
    fn lmmse_is_optimal_against_perturbations() {
        let (policy, ch) = random_instance(3, 5, 3, 2, 2);
        let sx = build_source_covariance(3, 0.5).unwrap().covariance().clone();
        let u = effective_observation(&policy, &ch, 2).unwrap();
        let sz = effective_noise_cov(&policy, 1.0, 2).unwrap();
        let c = lmmse_matrix(&u, &sx, &sz).unwrap();
        // MSE of an arbitrary linear estimator G: tr((G U - I) Sx (G U - I)^T + G Sz G^T)
        let mse_of = |g: &Matrix| {
            let e = g * &u - Matrix::identity(3, 3);
            (&e * &sx * e.transpose() + g * &sz * g.transpose()).trace()
        };
        let best = mse_of(&c);
        assert_relative_eq!(best, analytic_mse(&u, &sx, &sz).unwrap(), epsilon = 1e-10);
        let mut rng = RngStream::new(4, "perturb");
        for _ in 0..100 {
            let p = sample_standard_gaussian(&mut rng, 3, 4) * 1e-3;
            assert!(mse_of(&(&c + p)) >= best);
        }
    }

    #[test]
    fn bank_is_progressive() {
        let (policy, ch) = random_instance(5, 8, 3, 3, 5);
        let sx = build_source_covariance(3, 0.9).unwrap().covariance().clone();
        let bank = EstimatorBank::build(&policy, &ch, &sx, 1.0).unwrap();
        assert_eq!(bank.k_max(), 5);
        for w in bank.analytic().windows(2) {
            assert!(w[1] <= w[0] + 1e-12);
        }
        assert!(check_progressive(&[1.0, 1.1]).is_err());
    }

    #[test]
    fn stacking_consistency() {
        let (policy, ch) = random_instance(6, 6, 3, 2, 3);
        let sx = Matrix::identity(3, 3);
        let bank = EstimatorBank::build(&policy, &ch, &sx, 1.0).unwrap();
        let x = Vector::from_vec(vec![0.3, -1.0, 2.0]);
        let u = effective_observation(&policy, &ch, 3).unwrap();
        let mut stacked = Vector::zeros(6);
        for i in 0..2 {
            let v = &policy.weights()[i] * (&ch.h[i] * &x);
            stacked.rows_mut(i * 3, 3).copy_from(&v);
        }
        let direct = bank.estimator(3) * (&u * &x);
        assert_relative_eq!(estimate(bank.estimator(3), &stacked).unwrap(), direct, epsilon = 1e-12);
    }

    #[test]
    fn lower_bound_cases() {
        let (_, ch) = scalar(1.0);
        let lb = full_observation_lower_bound(&ch, &Matrix::identity(1, 1), 1.0).unwrap();
        assert!((lb.mse - 0.5).abs() < 1e-12);

        let (_, ch) = random_instance(7, 4, 3, 2, 1);
        let sx = Matrix::identity(3, 3);
        assert!(full_observation_lower_bound(&ch, &sx, 1e-9).unwrap().mse <= 1e-6);

        // identity compression with k = M is lossless
        let lb = full_observation_lower_bound(&ch, &sx, 0.8).unwrap();
        let ident = CompressionPolicy::new(vec![Matrix::identity(4, 4); 2]).unwrap();
        let u = effective_observation(&ident, &ch, 4).unwrap();
        let sz = effective_noise_cov(&ident, 0.8, 4).unwrap();
        assert_relative_eq!(analytic_mse(&u, &sx, &sz).unwrap(), lb.mse, max_relative = 1e-10);
    }

    #[test]
    fn empirical_matches_analytic_unquantized() {
        let (policy, ch) = random_instance(8, 4, 2, 2, 2);
        let source = build_source_covariance(2, 0.3).unwrap();
        let bank = EstimatorBank::build(&policy, &ch, source.covariance(), 1.0).unwrap();
        let mut rng = RngStream::new(9, "mc");
        let est = empirical_mse(&policy, &ch, &source, 1.0, 2, Resolution::Infinite, 200_000, &mut rng).unwrap();
        assert!((est.mean - bank.analytic_mse(2)).abs() < 3.0 * est.stderr);

        let again = empirical_mse(
            &policy,
            &ch,
            &source,
            1.0,
            2,
            Resolution::Infinite,
            200_000,
            &mut RngStream::new(9, "mc"),
        )
        .unwrap();
        assert_eq!(est, again);
    }

    #[test]
    fn quantized_needs_ranges() {
        let (policy, ch) = random_instance(10, 4, 2, 2, 2);
        let source = build_source_covariance(2, 0.0).unwrap();
        let mut rng = RngStream::new(1, "q");
        assert!(empirical_mse(&policy, &ch, &source, 1.0, 1, Resolution::Bits(4), 10, &mut rng).is_err());
        let ranges = vec![vec![10.0, 10.0]; 2];
        let policy = policy.with_ranges(ranges).unwrap();
        let unq = EstimatorBank::build(&policy, &ch, source.covariance(), 1.0)
            .unwrap()
            .analytic_mse(2);
        let est = empirical_mse(&policy, &ch, &source, 1.0, 2, Resolution::Bits(2), 50_000, &mut rng).unwrap();
        assert!(est.mean >= unq - 3.0 * est.stderr);
    }

    #[test]
    fn rank_check() {
        let ok = CompressionPolicy::new(vec![Matrix::identity(2, 3)]).unwrap();
        assert!(ok.check_rank().is_ok());
        let bad = CompressionPolicy::new(vec![Matrix::from_row_slice(2, 3, &[1., 0., 0., 2., 0., 0.])]).unwrap();
        assert!(bad.check_rank().is_err());
        assert!(CompressionPolicy::new(vec![Matrix::identity(4, 3)]).is_err());
    }
}
