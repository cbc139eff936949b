//! Signaling cost per agent and coherence interval, counted in real-valued
//! transmissions.

/// Cost split into the one-off signaling before estimation and the
/// per-estimation streaming.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CostBreakdown {
    pub overhead: u64,
    pub streaming: u64,
    pub total: u64,
}

impl CostBreakdown {
    fn new(overhead: u64, streaming: u64) -> Self {
        Self {
            overhead,
            streaming,
            total: overhead + streaming,
        }
    }
}

/// Global CSI: upload `H_i` (MN), download `W_i` and its ranges (MK + K),
/// then stream `K` values per estimation.
pub fn cost_global(m: u64, n: u64, k: u64, t: u64) -> CostBreakdown {
    if k == 0 {
        // nothing designed, nothing sent back
        return CostBreakdown::new(m * n, 0);
    }
    CostBreakdown::new(m * n + m * k + k, t * k)
}

/// Local CSI: upload the effective channel `W_i H_i` (KN) and the noise
/// covariance `W_i W_i^T` (K^2), then stream.
pub fn cost_local(n: u64, k: u64, t: u64) -> CostBreakdown {
    CostBreakdown::new(k * n + k * k, t * k)
}

pub fn normalized_cost(breakdown: &CostBreakdown, t: u64) -> f64 {
    breakdown.total as f64 / t as f64
}

/// Where the normalized local and global costs meet.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Crossover {
    /// Local CSI is cheaper for every `T` below this value.
    At(f64),
    /// The local scheme streams no more than the global one, so it is
    /// cheaper at every `T`.
    LocalAlwaysCheaper,
    /// The crossover lies at `T <= 0`: global CSI is never the costlier one
    /// to avoid, i.e. global is preferred at every positive `T`.
    GlobalNeverPreferred(f64),
}

/// Solves `(K_l N + K_l^2)/T + K_l = (MN + M K_g + K_g)/T + K_g` for `T`.
pub fn crossover_t(k_local: u64, k_global: u64, m: u64, n: u64) -> Crossover {
    if k_local <= k_global {
        return Crossover::LocalAlwaysCheaper;
    }
    let global_overhead = cost_global(m, n, k_global, 0).overhead as f64;
    let local_overhead = cost_local(n, k_local, 0).overhead as f64;
    let numerator = global_overhead - local_overhead;
    let t = numerator / (k_local - k_global) as f64;
    if numerator <= 0.0 {
        Crossover::GlobalNeverPreferred(t)
    } else {
        Crossover::At(t)
    }
}
