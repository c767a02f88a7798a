//! Minimal differentiable-network engine.
//!
//! Small per-pixel MLPs and trainable matrices are registered in a
//! [`ParamLayout`]; all their weights live in one flat [`ModelParams`]
//! vector, and gradients come back in a [`GradBuffer`] of identical shape.
//! Forward evaluation is plain; training gradients are computed by the
//! tape-based reverse mode in [`tape`]. The optimizer is a standard
//! adaptive-moment update.
//!
//! Everything is double precision and deterministic: initialization draws
//! are addressed per weight through the counter-based RNG, and no operation
//! depends on thread scheduling.

mod checkpoint;
mod tape;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use tape::{NodeId, Tape};

use thiserror::Error;

use crate::rng::{tag, Stream};

/// Negative-side slope of the hidden activation.
pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("input width {found} does not match expected {expected}")]
    WidthMismatch { expected: usize, found: usize },
    #[error("parameter entry {0} is not of the requested kind")]
    KindMismatch(usize),
    #[error("invalid network spec: {0}")]
    BadSpec(String),
    #[error("non-finite value in {op}")]
    NonFinite { op: &'static str },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("bad magic bytes in checkpoint")]
    BadMagic,
    #[error("truncated checkpoint: {0}")]
    Truncated(String),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Output head of a network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Linear,
    Softmax,
}

/// Architecture of one MLP: `widths[0]` inputs through hidden layers with
/// leaky-relu activations to `widths.last()` outputs under `head`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetSpec {
    pub widths: Vec<usize>,
    pub head: Head,
}

impl NetSpec {
    pub fn new(widths: Vec<usize>, head: Head) -> Result<Self, DiffError> {
        if widths.len() < 2 {
            return Err(DiffError::BadSpec(format!(
                "need at least input and output widths, got {widths:?}"
            )));
        }
        if widths.iter().any(|&w| w == 0) {
            return Err(DiffError::BadSpec(format!("zero width in {widths:?}")));
        }
        Ok(NetSpec { widths, head })
    }

    /// Number of weight layers.
    pub fn layer_count(&self) -> usize {
        self.widths.len() - 1
    }

    /// Total parameter count: per layer a dense weight block plus biases.
    pub fn param_count(&self) -> usize {
        self.widths
            .windows(2)
            .map(|w| w[1] * w[0] + w[1])
            .sum()
    }

    /// Offset of layer `l`'s weight block relative to the network start.
    fn layer_offset(&self, layer: usize) -> usize {
        self.widths
            .windows(2)
            .take(layer)
            .map(|w| w[1] * w[0] + w[1])
            .sum()
    }
}

/// What one registered parameter entry is.
#[derive(Debug, Clone, PartialEq)]
pub enum EntryKind {
    Mlp(NetSpec),
    Matrix { rows: usize, cols: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub kind: EntryKind,
    pub offset: usize,
    pub len: usize,
}

/// Handle to one registered network or matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

/// Registry of every network and matrix plus their flat offsets.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamLayout {
    entries: Vec<Entry>,
    total: usize,
}

impl ParamLayout {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register_net(&mut self, spec: NetSpec) -> ParamId {
        let len = spec.param_count();
        let id = ParamId(self.entries.len());
        self.entries.push(Entry {
            kind: EntryKind::Mlp(spec),
            offset: self.total,
            len,
        });
        self.total += len;
        id
    }

    pub fn register_matrix(&mut self, rows: usize, cols: usize) -> ParamId {
        let len = rows * cols;
        let id = ParamId(self.entries.len());
        self.entries.push(Entry {
            kind: EntryKind::Matrix { rows, cols },
            offset: self.total,
            len,
        });
        self.total += len;
        id
    }

    pub fn total_len(&self) -> usize {
        self.total
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn entry(&self, id: ParamId) -> &Entry {
        &self.entries[id.0]
    }

    pub fn net_spec(&self, id: ParamId) -> Result<&NetSpec, DiffError> {
        match &self.entries[id.0].kind {
            EntryKind::Mlp(spec) => Ok(spec),
            _ => Err(DiffError::KindMismatch(id.0)),
        }
    }

    pub fn matrix_shape(&self, id: ParamId) -> Result<(usize, usize), DiffError> {
        match self.entries[id.0].kind {
            EntryKind::Matrix { rows, cols } => Ok((rows, cols)),
            _ => Err(DiffError::KindMismatch(id.0)),
        }
    }

    /// Flat range of one entry inside the parameter vector.
    pub fn entry_range(&self, id: ParamId) -> std::ops::Range<usize> {
        let e = &self.entries[id.0];
        e.offset..e.offset + e.len
    }

    /// Flat `(weights, biases)` ranges of one MLP layer.
    pub fn layer_ranges(
        &self,
        id: ParamId,
        layer: usize,
    ) -> Result<(std::ops::Range<usize>, std::ops::Range<usize>), DiffError> {
        let spec = self.net_spec(id)?;
        let (w_in, w_out) = (spec.widths[layer], spec.widths[layer + 1]);
        let base = self.entries[id.0].offset + spec.layer_offset(layer);
        Ok((
            base..base + w_out * w_in,
            base + w_out * w_in..base + w_out * w_in + w_out,
        ))
    }
}

/// Flat parameter vector for every registered entry.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    layout: ParamLayout,
    values: Vec<f64>,
}

impl ModelParams {
    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn from_parts(layout: ParamLayout, values: Vec<f64>) -> Result<Self, DiffError> {
        if values.len() != layout.total_len() {
            return Err(DiffError::ShapeMismatch(format!(
                "layout expects {} values, got {}",
                layout.total_len(),
                values.len()
            )));
        }
        Ok(ModelParams { layout, values })
    }

    /// Slice of one entry's parameters.
    pub fn entry_values(&self, id: ParamId) -> &[f64] {
        let e = self.layout.entry(id);
        &self.values[e.offset..e.offset + e.len]
    }

    pub fn entry_values_mut(&mut self, id: ParamId) -> &mut [f64] {
        let e = self.layout.entry(id).clone();
        &mut self.values[e.offset..e.offset + e.len]
    }

    /// `(weights, biases)` of one layer of an MLP entry. Weights are
    /// row-major `out x in`.
    pub fn layer(&self, id: ParamId, layer: usize) -> Result<(&[f64], &[f64]), DiffError> {
        let spec = self.layout.net_spec(id)?;
        let (w_in, w_out) = (spec.widths[layer], spec.widths[layer + 1]);
        let base = self.layout.entry(id).offset + spec.layer_offset(layer);
        let w = &self.values[base..base + w_out * w_in];
        let b = &self.values[base + w_out * w_in..base + w_out * w_in + w_out];
        Ok((w, b))
    }
}

/// Gradient with the same flat shape as [`ModelParams`].
#[derive(Debug, Clone)]
pub struct GradBuffer {
    values: Vec<f64>,
}

impl GradBuffer {
    pub fn zeros(layout: &ParamLayout) -> Self {
        GradBuffer {
            values: vec![0.0; layout.total_len()],
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Accumulate another gradient of identical shape.
    pub fn add_assign(&mut self, other: &GradBuffer) {
        debug_assert_eq!(self.values.len(), other.values.len());
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }

    pub fn fill_zero(&mut self) {
        self.values.iter_mut().for_each(|v| *v = 0.0);
    }
}

/// Initialize every registered entry: MLP weights uniform in
/// `+-sqrt(6 / (fan_in + fan_out))` with zero biases, matrices zero.
///
/// Deterministic given the seed; every weight is addressed individually so
/// the result does not depend on evaluation order.
pub fn init_params(layout: &ParamLayout, seed: u64) -> ModelParams {
    let stream = Stream::new(seed).derive(tag::PARAM_INIT);
    let mut values = vec![0.0; layout.total_len()];
    for (entry_idx, entry) in layout.entries().iter().enumerate() {
        if let EntryKind::Mlp(spec) = &entry.kind {
            let entry_stream = stream.derive(entry_idx as u64);
            let mut offset = entry.offset;
            for layer in 0..spec.layer_count() {
                let (fan_in, fan_out) = (spec.widths[layer], spec.widths[layer + 1]);
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let layer_stream = entry_stream.derive(layer as u64);
                for i in 0..fan_out * fan_in {
                    values[offset + i] = layer_stream.range_at(i as u64, -bound, bound);
                }
                // biases stay zero
                offset += fan_out * fan_in + fan_out;
            }
        }
    }
    ModelParams {
        layout: layout.clone(),
        values,
    }
}

#[inline]
pub(crate) fn leaky_relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

#[inline]
pub(crate) fn leaky_relu_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
    }
}

pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
    // Canonical unit sum makes softmax rows exact fixed points of the
    // simplex projection, so the zero-fusion reduction holds bitwise.
    crate::hsidata::canonicalize_unit_sum(v);
}

/// Evaluate network `net` on `x`.
pub fn forward(params: &ModelParams, net: ParamId, x: &[f64]) -> Result<Vec<f64>, DiffError> {
    let spec = params.layout().net_spec(net)?.clone();
    if x.len() != spec.widths[0] {
        return Err(DiffError::WidthMismatch {
            expected: spec.widths[0],
            found: x.len(),
        });
    }
    let mut current = x.to_vec();
    for layer in 0..spec.layer_count() {
        let (w, b) = params.layer(net, layer)?;
        let (w_in, w_out) = (spec.widths[layer], spec.widths[layer + 1]);
        let mut next = vec![0.0; w_out];
        for (i, out) in next.iter_mut().enumerate() {
            let row = &w[i * w_in..(i + 1) * w_in];
            *out = b[i] + row.iter().zip(&current).map(|(a, c)| a * c).sum::<f64>();
        }
        if layer + 1 < spec.layer_count() {
            next.iter_mut().for_each(|v| *v = leaky_relu(*v));
        }
        current = next;
    }
    if spec.head == Head::Softmax {
        softmax_in_place(&mut current);
    }
    Ok(current)
}

/// Exact Jacobian `d out / d in` of network `net` at `x`, row-major
/// `out_width x in_width`.
pub fn jacobian(params: &ModelParams, net: ParamId, x: &[f64]) -> Result<Vec<f64>, DiffError> {
    let spec = params.layout().net_spec(net)?.clone();
    if x.len() != spec.widths[0] {
        return Err(DiffError::WidthMismatch {
            expected: spec.widths[0],
            found: x.len(),
        });
    }
    let in_width = spec.widths[0];
    // jac holds d current / d x, row-major current_width x in_width
    let mut jac: Vec<f64> = (0..in_width * in_width)
        .map(|i| if i % (in_width + 1) == 0 { 1.0 } else { 0.0 })
        .collect();
    let mut current = x.to_vec();
    for layer in 0..spec.layer_count() {
        let (w, b) = params.layer(net, layer)?;
        let (w_in, w_out) = (spec.widths[layer], spec.widths[layer + 1]);
        let mut pre = vec![0.0; w_out];
        for (i, out) in pre.iter_mut().enumerate() {
            let row = &w[i * w_in..(i + 1) * w_in];
            *out = b[i] + row.iter().zip(&current).map(|(a, c)| a * c).sum::<f64>();
        }
        // next_jac = W * jac
        let mut next_jac = vec![0.0; w_out * in_width];
        for i in 0..w_out {
            let w_row = &w[i * w_in..(i + 1) * w_in];
            let out_row = &mut next_jac[i * in_width..(i + 1) * in_width];
            for (k, &wk) in w_row.iter().enumerate() {
                if wk == 0.0 {
                    continue;
                }
                let jac_row = &jac[k * in_width..(k + 1) * in_width];
                for (o, j) in out_row.iter_mut().zip(jac_row) {
                    *o += wk * j;
                }
            }
        }
        if layer + 1 < spec.layer_count() {
            for (i, p) in pre.iter().enumerate() {
                let g = leaky_relu_grad(*p);
                for v in &mut next_jac[i * in_width..(i + 1) * in_width] {
                    *v *= g;
                }
            }
            pre.iter_mut().for_each(|v| *v = leaky_relu(*v));
        }
        current = pre;
        jac = next_jac;
    }
    if spec.head == Head::Softmax {
        let mut y = current.clone();
        softmax_in_place(&mut y);
        let out_width = y.len();
        let mut sm_jac = vec![0.0; out_width * in_width];
        for i in 0..out_width {
            for j in 0..in_width {
                let mut acc = 0.0;
                for (k, &yk) in y.iter().enumerate() {
                    let d = if i == k { y[i] * (1.0 - y[i]) } else { -y[i] * yk };
                    acc += d * jac[k * in_width + j];
                }
                sm_jac[i * in_width + j] = acc;
            }
        }
        jac = sm_jac;
    }
    Ok(jac)
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// Adaptive-moment optimizer configuration.
#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment accumulators plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn zeros(layout: &ParamLayout) -> Self {
        AdamState {
            m: vec![0.0; layout.total_len()],
            v: vec![0.0; layout.total_len()],
            step: 0,
        }
    }
}

/// One bias-corrected adaptive-moment update.
pub fn opt_step(
    params: &mut ModelParams,
    grad: &GradBuffer,
    state: &mut AdamState,
    cfg: &AdamConfig,
) {
    debug_assert_eq!(params.values.len(), grad.values.len());
    state.step += 1;
    let t = state.step as i32;
    let bias1 = 1.0 - cfg.beta1.powi(t);
    let bias2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..params.values.len() {
        let g = grad.values[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / bias1;
        let v_hat = state.v[i] / bias2;
        params.values[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}
