//! Uniform scalar quantization over a symmetric dynamic range.
//!
//! The quantizer is midrise: `2^Q` cells of width `2q / 2^Q` tile `[-q, q]`
//! and each cell reconstructs to its midpoint, so the reconstruction error of
//! an in-range input is at most `q / 2^Q`. During training the quantizer is
//! replaced by additive uniform noise of that half-width.

use crate::error::{Error, Result};
use crate::numerics::{mean_and_population_std, Matrix, RngStream};

/// Smallest dynamic range ever produced from a scale and a deviation.
pub const RANGE_FLOOR: f64 = 1e-8;

/// Quantizer resolution: a finite bit count or the unquantized limit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Resolution {
    Bits(u32),
    Infinite,
}

impl Resolution {
    /// Half-width of the uniform noise for range `q`: `q / 2^Q`.
    pub fn noise_half_width(self, q: f64) -> f64 {
        match self {
            Resolution::Bits(b) => q / 2f64.powi(b as i32),
            Resolution::Infinite => 0.0,
        }
    }

    pub fn is_infinite(self) -> bool {
        matches!(self, Resolution::Infinite)
    }
}

impl std::fmt::Display for Resolution {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Resolution::Bits(b) => write!(f, "{b}"),
            Resolution::Infinite => f.write_str("inf"),
        }
    }
}

pub fn clip(v: f64, q: f64) -> f64 {
    if v < -q {
        -q
    } else if v > q {
        q
    } else {
        v
    }
}

/// Subgradient of [`clip`]: `(d/dv, d/dq)`.
pub fn clip_grad(v: f64, q: f64) -> (f64, f64) {
    if v < -q {
        (0.0, -1.0)
    } else if v > q {
        (0.0, 1.0)
    } else {
        (1.0, 0.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuantizerSpec {
    bits: u32,
    range: f64,
}

impl QuantizerSpec {
    pub fn new(bits: u32, range: f64) -> Result<Self> {
        if bits == 0 || bits > 52 {
            return Err(Error::InvalidInput(format!("bit count {bits} outside 1..=52")));
        }
        if !(range > 0.0 && range.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "dynamic range must be positive, got {range}"
            )));
        }
        Ok(Self { bits, range })
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn range(&self) -> f64 {
        self.range
    }

    pub fn levels(&self) -> u64 {
        1u64 << self.bits
    }

    pub fn step(&self) -> f64 {
        2.0 * self.range / self.levels() as f64
    }

    /// Cell index and reconstruction level of `v`.
    pub fn quantize(&self, v: f64) -> Result<(u64, f64)> {
        if !v.is_finite() {
            return Err(Error::InvalidInput(format!("cannot quantize {v}")));
        }
        let clipped = clip(v, self.range);
        let cell = ((clipped + self.range) / self.step()).floor();
        let index = (cell.max(0.0) as u64).min(self.levels() - 1);
        Ok((index, self.dequantize(index)))
    }

    pub fn dequantize(&self, index: u64) -> f64 {
        -self.range + (index as f64 + 0.5) * self.step()
    }

    /// Quantize-then-reconstruct.
    pub fn apply(&self, v: f64) -> Result<f64> {
        self.quantize(v).map(|(_, r)| r)
    }
}

/// Training surrogate: `clip(v, q) + (q / 2^Q) u` with `u` drawn from `U(-1, 1)`.
pub fn inject_quantization_noise(v: f64, q: f64, resolution: Resolution, rng: &mut RngStream) -> f64 {
    match resolution {
        Resolution::Infinite => clip(v, q),
        Resolution::Bits(_) => surrogate(v, q, resolution, rng.uniform_symmetric()),
    }
}

/// [`inject_quantization_noise`] with the uniform draw `u` supplied.
pub fn surrogate(v: f64, q: f64, resolution: Resolution, u: f64) -> f64 {
    clip(v, q) + resolution.noise_half_width(q) * u
}

/// Batch statistics behind a calibrated dynamic range.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchRange {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub range: f64,
}

/// `q = |s| * sigma` with `sigma` the population std of `values`, floored
/// at [`RANGE_FLOOR`].
pub fn batch_dynamic_range(values: &[f64], scale: f64) -> Result<BatchRange> {
    if values.len() < 2 {
        return Err(Error::Precondition(format!(
            "batch dynamic range needs at least 2 values, got {}",
            values.len()
        )));
    }
    let (mean, std) = mean_and_population_std(values);
    Ok(BatchRange {
        mean,
        std,
        range: range_from_scale(scale, std),
    })
}

pub fn range_from_scale(scale: f64, std: f64) -> f64 {
    (scale.abs() * std).max(RANGE_FLOOR)
}

/// Per agent and stage scale factors together with the statistics they
/// multiply. Rows index agents, columns stages.
#[derive(Clone, Debug, PartialEq)]
pub struct DynamicRangeParams {
    pub scales: Matrix,
    pub stds: Matrix,
    pub means: Matrix,
}

impl DynamicRangeParams {
    pub fn ranges(&self) -> Matrix {
        self.scales.zip_map(&self.stds, range_from_scale)
    }
}
