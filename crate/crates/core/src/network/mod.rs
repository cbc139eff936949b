//! Policy network mapping a local channel matrix to a compression matrix.
//!
//! Every dense layer is preceded by batch normalization. Hidden layers use
//! `tanh` and are shared by all agents; each agent owns its output head. The
//! head output is divided by its Euclidean norm and reshaped row-major into a
//! `K_max x M` matrix. The network also owns the quantizer scale factors
//! `s_{i,k}` (or the directly trainable ranges of the comparison variant).

pub mod checkpoint;
pub mod pipeline;
pub mod train;

use crate::error::{Error, Result};
use crate::numerics::{Matrix, RngStream, Vector};
use crate::quantization::range_from_scale;

pub const BN_MOMENTUM: f64 = 0.99;
pub const BN_EPSILON: f64 = 1e-5;
pub const NORM_FLOOR: f64 = 1e-12;
pub const INITIAL_SCALE: f64 = 4.0;
pub const INITIAL_TRAINABLE_RANGE: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Architecture {
    pub m: usize,
    pub n: usize,
    pub agents: usize,
    pub k_max: usize,
    pub hidden: Vec<usize>,
    /// One head for all agents instead of one per agent.
    pub tied_heads: bool,
}

impl Architecture {
    pub fn input_dim(&self) -> usize {
        self.m * self.n
    }

    pub fn output_dim(&self) -> usize {
        self.m * self.k_max
    }

    /// Input width of every batch-norm / dense position.
    fn widths(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.hidden.iter().copied())
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.n == 0 || self.agents == 0 {
            return Err(Error::InvalidInput("network dimensions must be positive".into()));
        }
        if self.k_max == 0 || self.k_max > self.m {
            return Err(Error::InvalidInput(format!(
                "K_max {} outside 1..={}",
                self.k_max, self.m
            )));
        }
        if self.hidden.contains(&0) {
            return Err(Error::InvalidInput("hidden widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RangeMode {
    /// `q = |s| * sigma` with `sigma` the batch standard deviation.
    BatchStatistic,
    /// `q` is a free parameter.
    Trainable,
}

impl RangeMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RangeMode::BatchStatistic => "batch-statistic",
            RangeMode::Trainable => "trainable",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "batch-statistic" => Ok(RangeMode::BatchStatistic),
            "trainable" => Ok(RangeMode::Trainable),
            other => Err(Error::config("range_mode", format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    /// `out x in`
    pub weight: Matrix,
    pub bias: Vector,
}

impl Dense {
    /// Glorot-uniform weights, zero bias.
    fn init(inputs: usize, outputs: usize, rng: &mut RngStream) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        let data: Vec<f64> = (0..inputs * outputs).map(|_| rng.uniform(-limit, limit)).collect();
        Self {
            weight: Matrix::from_row_slice(outputs, inputs, &data),
            bias: Vector::zeros(outputs),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vector,
    pub beta: Vector,
    pub running_mean: Vector,
    pub running_var: Vector,
}

impl BatchNorm {
    fn new(width: usize) -> Self {
        Self {
            gamma: Vector::from_element(width, 1.0),
            beta: Vector::zeros(width),
            running_mean: Vector::zeros(width),
            running_var: Vector::from_element(width, 1.0),
        }
    }

    fn absorb(&mut self, mean: &Vector, var: &Vector) {
        self.running_mean = &self.running_mean * BN_MOMENTUM + mean * (1.0 - BN_MOMENTUM);
        self.running_var = &self.running_var * BN_MOMENTUM + var * (1.0 - BN_MOMENTUM);
    }
}

/// Which group a trainable tensor belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamClass {
    NormScale,
    NormShift,
    HiddenWeight,
    HiddenBias,
    HeadWeight,
    HeadBias,
    RangeScale,
    TrainableRange,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyNetwork {
    pub arch: Architecture,
    pub range_mode: RangeMode,
    /// One per dense position; the last one feeds the heads.
    pub norms: Vec<BatchNorm>,
    pub hidden: Vec<Dense>,
    pub heads: Vec<Dense>,
    /// `s_{i,k}`, agents by stages.
    pub scales: Matrix,
    /// Directly trainable ranges, used in [`RangeMode::Trainable`].
    pub ranges: Matrix,
    /// Moving average of the batch deviations of every compressed value.
    pub running_std: Matrix,
    /// Deviations estimated on a calibration set after training.
    pub calibration_std: Option<Matrix>,
}

impl PolicyNetwork {
    pub fn new(arch: Architecture, range_mode: RangeMode, rng: &RngStream) -> Result<Self> {
        arch.validate()?;
        let widths = arch.widths();
        let norms = widths.iter().map(|&w| BatchNorm::new(w)).collect();
        let hidden = arch
            .hidden
            .iter()
            .enumerate()
            .map(|(l, &out)| Dense::init(widths[l], out, &mut rng.child(format!("init/hidden{l}"))))
            .collect();
        let head_count = if arch.tied_heads { 1 } else { arch.agents };
        let last = *widths.last().unwrap();
        let heads = (0..head_count)
            .map(|i| Dense::init(last, arch.output_dim(), &mut rng.child(format!("init/head{i}"))))
            .collect();
        let (b, k) = (arch.agents, arch.k_max);
        Ok(Self {
            range_mode,
            norms,
            hidden,
            heads,
            scales: Matrix::from_element(b, k, INITIAL_SCALE),
            ranges: Matrix::from_element(b, k, INITIAL_TRAINABLE_RANGE),
            running_std: Matrix::from_element(b, k, 1.0),
            calibration_std: None,
            arch,
        })
    }

    pub fn head(&self, agent: usize) -> &Dense {
        &self.heads[if self.arch.tied_heads { 0 } else { agent }]
    }

    fn head_index(&self, agent: usize) -> usize {
        if self.arch.tied_heads {
            0
        } else {
            agent
        }
    }

    /// Trainable tensors in a fixed order shared with [`Gradients`].
    pub fn tensors(&self) -> Vec<(ParamClass, &[f64])> {
        let mut out: Vec<(ParamClass, &[f64])> = Vec::new();
        for bn in &self.norms {
            out.push((ParamClass::NormScale, bn.gamma.as_slice()));
            out.push((ParamClass::NormShift, bn.beta.as_slice()));
        }
        for d in &self.hidden {
            out.push((ParamClass::HiddenWeight, d.weight.as_slice()));
            out.push((ParamClass::HiddenBias, d.bias.as_slice()));
        }
        for d in &self.heads {
            out.push((ParamClass::HeadWeight, d.weight.as_slice()));
            out.push((ParamClass::HeadBias, d.bias.as_slice()));
        }
        out.push((ParamClass::RangeScale, self.scales.as_slice()));
        out.push((ParamClass::TrainableRange, self.ranges.as_slice()));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(ParamClass, &mut [f64])> {
        let mut out: Vec<(ParamClass, &mut [f64])> = Vec::new();
        for bn in &mut self.norms {
            out.push((ParamClass::NormScale, bn.gamma.as_mut_slice()));
            out.push((ParamClass::NormShift, bn.beta.as_mut_slice()));
        }
        for d in &mut self.hidden {
            out.push((ParamClass::HiddenWeight, d.weight.as_mut_slice()));
            out.push((ParamClass::HiddenBias, d.bias.as_mut_slice()));
        }
        for d in &mut self.heads {
            out.push((ParamClass::HeadWeight, d.weight.as_mut_slice()));
            out.push((ParamClass::HeadBias, d.bias.as_mut_slice()));
        }
        out.push((ParamClass::RangeScale, self.scales.as_mut_slice()));
        out.push((ParamClass::TrainableRange, self.ranges.as_mut_slice()));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Compression matrices for a batch of vectorized channels
    /// (`M N x n`, column-major `vec(H)` per column). Returns `M K_max x n`;
    /// column `j` reshaped row-major is `W_i` for sample `j`.
    pub fn forward(&self, inputs: &Matrix, agent: usize, mode: Mode) -> Result<Matrix> {
        Ok(self.forward_cached(inputs, agent, mode)?.output)
    }

    /// Compression matrix for a single channel matrix, eval mode.
    pub fn compression_matrix(&self, h: &Matrix, agent: usize) -> Result<Matrix> {
        if h.shape() != (self.arch.m, self.arch.n) {
            return Err(Error::InvalidInput(format!(
                "channel is {}x{}, network expects {}x{}",
                h.nrows(),
                h.ncols(),
                self.arch.m,
                self.arch.n
            )));
        }
        let input = Matrix::from_column_slice(self.arch.input_dim(), 1, h.as_slice());
        let out = self.forward(&input, agent, Mode::Eval)?;
        Ok(unflatten_weights(
            out.column(0).as_slice(),
            self.arch.k_max,
            self.arch.m,
        ))
    }

    pub(crate) fn forward_cached(&self, inputs: &Matrix, agent: usize, mode: Mode) -> Result<ForwardCache> {
        if agent >= self.arch.agents {
            return Err(Error::InvalidInput(format!("agent {agent} out of range")));
        }
        if inputs.nrows() != self.arch.input_dim() {
            return Err(Error::InvalidInput(format!(
                "network input has {} rows, expected {}",
                inputs.nrows(),
                self.arch.input_dim()
            )));
        }
        if mode == Mode::Train && inputs.ncols() < 2 {
            return Err(Error::InvalidInput("train-mode batches need at least 2 samples".into()));
        }
        let depth = self.hidden.len();
        let mut layers = Vec::with_capacity(depth + 1);
        let mut activation = inputs.clone();
        for l in 0..=depth {
            let norm = &self.norms[l];
            let (xhat, mean, var, inv_std) = match mode {
                Mode::Train => batch_normalize(&activation),
                Mode::Eval => running_normalize(&activation, &norm.running_mean, &norm.running_var),
            };
            let mut normed = xhat.clone();
            for (mut row, (g, b)) in normed.row_iter_mut().zip(norm.gamma.iter().zip(norm.beta.iter())) {
                row.apply(|v| *v = *v * g + b);
            }
            let dense = if l < depth { &self.hidden[l] } else { self.head(agent) };
            let mut z = &dense.weight * &normed;
            for mut col in z.column_iter_mut() {
                col += &dense.bias;
            }
            let input = std::mem::replace(&mut activation, z);
            if l < depth {
                activation.apply(|v| *v = v.tanh());
            }
            layers.push(LayerCache {
                input,
                xhat,
                normed,
                mean,
                var,
                inv_std,
            });
        }
        let raw = activation;
        let mut output = raw.clone();
        let mut norms = Vec::with_capacity(raw.ncols());
        for mut col in output.column_iter_mut() {
            let norm = col.norm().max(NORM_FLOOR);
            col /= norm;
            norms.push(norm);
        }
        Ok(ForwardCache {
            layers,
            output,
            norms,
            raw,
        })
    }

    /// Accumulates parameter gradients for one agent given `d loss / d output`.
    pub(crate) fn backward(&self, agent: usize, cache: &ForwardCache, d_output: &Matrix, grads: &mut Gradients) {
        let depth = self.hidden.len();
        // through w = o / ||o||
        let mut dz = d_output.clone();
        for (j, mut col) in dz.column_iter_mut().enumerate() {
            let w = cache.output.column(j);
            let norm = cache.norms[j];
            if cache.raw.column(j).norm() > NORM_FLOOR {
                let proj = w.dot(&col);
                col -= w * proj;
            }
            col /= norm;
        }
        for l in (0..=depth).rev() {
            let layer = &cache.layers[l];
            let (dense, w_slot, b_slot) = if l < depth {
                (&self.hidden[l], grads.hidden_weight(l), grads.hidden_bias(l))
            } else {
                let h = self.head_index(agent);
                (&self.heads[h], grads.head_weight(self, h), grads.head_bias(self, h))
            };
            let dw = &dz * layer.normed.transpose();
            add_into(&mut grads.tensors[w_slot], dw.as_slice());
            let db = dz.column_sum();
            add_into(&mut grads.tensors[b_slot], db.as_slice());
            let dnormed = dense.weight.transpose() * &dz;

            let gamma = &self.norms[l].gamma;
            let dgamma = dnormed.component_mul(&layer.xhat).column_sum();
            let dbeta = dnormed.column_sum();
            let (gs, bs) = (grads.norm_scale(l), grads.norm_shift(l));
            add_into(&mut grads.tensors[gs], dgamma.as_slice());
            add_into(&mut grads.tensors[bs], dbeta.as_slice());
            if l == 0 {
                break;
            }
            // batch-norm backward with batch statistics
            let n = dnormed.ncols() as f64;
            let mut dx = dnormed;
            for (r, mut row) in dx.row_iter_mut().enumerate() {
                row *= gamma[r];
            }
            let sum_dx = dx.column_sum();
            let sum_dx_xhat = dx.component_mul(&layer.xhat).column_sum();
            let mut da = Matrix::zeros(dx.nrows(), dx.ncols());
            for j in 0..dx.ncols() {
                for r in 0..dx.nrows() {
                    da[(r, j)] =
                        layer.inv_std[r] / n * (n * dx[(r, j)] - sum_dx[r] - layer.xhat[(r, j)] * sum_dx_xhat[r]);
                }
            }
            // through tanh of the previous layer: its output is this layer's input
            let act = &layer.input;
            dz = da.zip_map(act, |g, a| g * (1.0 - a * a));
        }
    }

    /// Moves batch-norm running statistics toward the given batch statistics.
    pub(crate) fn absorb_batch_stats(&mut self, stats: &[(Vector, Vector)]) {
        for (bn, (mean, var)) in self.norms.iter_mut().zip(stats) {
            bn.absorb(mean, var);
        }
    }

    /// Dynamic ranges used at evaluation time: calibrated deviations when
    /// present, else the running ones.
    pub fn eval_ranges(&self) -> Matrix {
        match self.range_mode {
            RangeMode::Trainable => self.ranges.map(|p| range_from_scale(1.0, p)),
            RangeMode::BatchStatistic => {
                let stds = self.calibration_std.as_ref().unwrap_or(&self.running_std);
                self.scales.zip_map(stds, range_from_scale)
            }
        }
    }
}

/// Row-major reshape of a flattened network output into `K_max x M`.
pub fn unflatten_weights(flat: &[f64], k_max: usize, m: usize) -> Matrix {
    Matrix::from_row_slice(k_max, m, flat)
}

pub(crate) struct LayerCache {
    /// Input to the batch norm (the previous layer's activation).
    input: Matrix,
    xhat: Matrix,
    /// `gamma * xhat + beta`, the dense layer's input.
    normed: Matrix,
    pub(crate) mean: Vector,
    pub(crate) var: Vector,
    inv_std: Vector,
}

pub(crate) struct ForwardCache {
    pub(crate) layers: Vec<LayerCache>,
    /// Unit-norm outputs, one column per sample.
    pub(crate) output: Matrix,
    norms: Vec<f64>,
    raw: Matrix,
}

impl ForwardCache {
    pub(crate) fn batch_stats(&self) -> Vec<(Vector, Vector)> {
        self.layers.iter().map(|l| (l.mean.clone(), l.var.clone())).collect()
    }
}

fn batch_normalize(a: &Matrix) -> (Matrix, Vector, Vector, Vector) {
    let n = a.ncols() as f64;
    let mean = a.column_sum() / n;
    let mut var = Vector::zeros(a.nrows());
    for col in a.column_iter() {
        for r in 0..a.nrows() {
            var[r] += (col[r] - mean[r]).powi(2);
        }
    }
    var /= n;
    let inv_std = var.map(|v| 1.0 / (v + BN_EPSILON).sqrt());
    let mut xhat = a.clone();
    for mut col in xhat.column_iter_mut() {
        for r in 0..col.len() {
            col[r] = (col[r] - mean[r]) * inv_std[r];
        }
    }
    (xhat, mean, var, inv_std)
}

fn running_normalize(a: &Matrix, mean: &Vector, var: &Vector) -> (Matrix, Vector, Vector, Vector) {
    let inv_std = var.map(|v| 1.0 / (v + BN_EPSILON).sqrt());
    let mut xhat = a.clone();
    for mut col in xhat.column_iter_mut() {
        for r in 0..col.len() {
            col[r] = (col[r] - mean[r]) * inv_std[r];
        }
    }
    (xhat, mean.clone(), var.clone(), inv_std)
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Gradients laid out exactly like [`PolicyNetwork::tensors`].
#[derive(Clone, Debug)]
pub struct Gradients {
    pub tensors: Vec<Vec<f64>>,
    norms: usize,
    hidden: usize,
}

impl Gradients {
    pub fn zeros_like(net: &PolicyNetwork) -> Self {
        Self {
            tensors: net.tensors().iter().map(|(_, t)| vec![0.0; t.len()]).collect(),
            norms: net.norms.len(),
            hidden: net.hidden.len(),
        }
    }

    fn norm_scale(&self, l: usize) -> usize {
        2 * l
    }

    fn norm_shift(&self, l: usize) -> usize {
        2 * l + 1
    }

    fn hidden_weight(&self, l: usize) -> usize {
        2 * self.norms + 2 * l
    }

    fn hidden_bias(&self, l: usize) -> usize {
        2 * self.norms + 2 * l + 1
    }

    fn head_weight(&self, _net: &PolicyNetwork, h: usize) -> usize {
        2 * self.norms + 2 * self.hidden + 2 * h
    }

    fn head_bias(&self, net: &PolicyNetwork, h: usize) -> usize {
        self.head_weight(net, h) + 1
    }

    pub(crate) fn scales_slot(&self) -> usize {
        self.tensors.len() - 2
    }

    pub(crate) fn ranges_slot(&self) -> usize {
        self.tensors.len() - 1
    }

    pub fn flat(&self) -> Vec<f64> {
        self.tensors.iter().flatten().copied().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(tied: bool) -> PolicyNetwork {
        let arch = Architecture {
            m: 4,
            n: 2,
            agents: 2,
            k_max: 2,
            hidden: vec![6, 5],
            tied_heads: tied,
        };
        PolicyNetwork::new(arch, RangeMode::BatchStatistic, &RngStream::new(1, "net")).unwrap()
    }

    fn inputs(n: usize, seed: u64) -> Matrix {
        crate::numerics::sample_standard_gaussian(&mut RngStream::new(seed, "in"), 8, n)
    }

    #[test]
    fn outputs_have_unit_norm() {
        let net = small(false);
        let x = inputs(7, 2);
        for mode in [Mode::Train, Mode::Eval] {
            let out = net.forward(&x, 1, mode).unwrap();
            assert_eq!(out.shape(), (8, 7));
            for col in out.column_iter() {
                assert!((col.norm() - 1.0).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn zero_output_is_floored() {
        let mut net = small(false);
        net.heads[0].weight.fill(0.0);
        let out = net.forward(&inputs(3, 3), 0, Mode::Train).unwrap();
        assert!(out.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn untied_heads_differ() {
        let net = small(false);
        let x = inputs(4, 4);
        let a = net.forward(&x, 0, Mode::Eval).unwrap();
        let b = net.forward(&x, 1, Mode::Eval).unwrap();
        assert!((a - b).norm() > 1e-3);
        let tied = small(true);
        assert_eq!(
            tied.forward(&x, 0, Mode::Eval).unwrap(),
            tied.forward(&x, 1, Mode::Eval).unwrap()
        );
    }

    #[test]
    fn eval_mode_is_per_sample() {
        let mut net = small(false);
        // move running stats away from the identity
        let batch = net.forward_cached(&(inputs(16, 5) * 3.0), 0, Mode::Train).unwrap();
        net.absorb_batch_stats(&batch.batch_stats());
        let x = inputs(6, 6);
        let full = net.forward(&x, 0, Mode::Eval).unwrap();
        assert_eq!(full, net.forward(&x, 0, Mode::Eval).unwrap());
        let mut perm = x.clone();
        perm.swap_columns(0, 5);
        perm.swap_columns(1, 3);
        let out = net.forward(&perm, 0, Mode::Eval).unwrap();
        assert_eq!(out.column(0), full.column(5));
        assert_eq!(out.column(3), full.column(1));
        let single = net.forward(&x.columns(2, 1).into_owned(), 0, Mode::Eval).unwrap();
        assert!((single.column(0) - full.column(2)).norm() < 1e-14);
    }

    #[test]
    fn compression_matrix_reshapes_row_major() {
        let net = small(false);
        let h = Matrix::from_fn(4, 2, |r, c| (r as f64) - 0.5 * c as f64);
        let w = net.compression_matrix(&h, 0).unwrap();
        let flat = net
            .forward(&Matrix::from_column_slice(8, 1, h.as_slice()), 0, Mode::Eval)
            .unwrap();
        assert_eq!(w.shape(), (2, 4));
        assert_eq!(w[(1, 0)], flat[(4, 0)]);
        assert!(net.compression_matrix(&Matrix::zeros(2, 4), 0).is_err());
    }

    #[test]
    fn tensor_layout_matches_gradients() {
        let net = small(false);
        let g = Gradients::zeros_like(&net);
        let shapes: Vec<usize> = net.tensors().iter().map(|(_, t)| t.len()).collect();
        assert_eq!(g.tensors.iter().map(Vec::len).collect::<Vec<_>>(), shapes);
        assert_eq!(net.tensors()[g.head_weight(&net, 1)].0, ParamClass::HeadWeight);
        assert_eq!(net.tensors()[g.scales_slot()].0, ParamClass::RangeScale);
        assert_eq!(net.parameter_count(), shapes.iter().sum::<usize>());
    }
}
