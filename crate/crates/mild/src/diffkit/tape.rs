//! Tape-based reverse-mode differentiation over vector-valued nodes.
//!
//! A [`Tape`] records a static forward graph: each node holds a value vector
//! in one shared arena plus the operation that produced it. [`Tape::backward`]
//! walks the recording in reverse, seeding one or more scalar roots, and
//! accumulates exact parameter gradients into a [`GradBuffer`].
//!
//! Node values live in a single arena that survives [`Tape::reset`], so a
//! tape can be rebuilt per pixel inside a training loop without allocating.

use super::{
    leaky_relu, leaky_relu_grad, softmax_in_place, DiffError, GradBuffer, Head, ModelParams,
    ParamId,
};
use crate::hsidata::simplex_project;

/// Handle to one recorded node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Const,
    Affine {
        net: ParamId,
        layer: usize,
        input: NodeId,
    },
    LeakyRelu {
        input: NodeId,
    },
    Softmax {
        input: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Sub {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        input: NodeId,
        factor: f64,
    },
    /// `value = a + factor * b`
    AddScaled {
        a: NodeId,
        b: NodeId,
        factor: f64,
    },
    /// Euclidean simplex projection with straight-through gradient.
    SimplexProjectSt {
        input: NodeId,
    },
    /// `value[l] = sum_p a[p] * (E[p,l] + dE[p,l])`
    DecodeMix {
        a: NodeId,
        reference: ParamId,
        perturbation: Option<ParamId>,
    },
    SumSquares {
        input: NodeId,
    },
    Dot {
        a: NodeId,
        b: NodeId,
    },
    SqrtScalar {
        input: NodeId,
    },
}

#[derive(Debug, Clone, Copy)]
struct Span {
    offset: usize,
    len: usize,
}

/// Recorded forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    ops: Vec<Op>,
    spans: Vec<Span>,
    values: Vec<f64>,
    adjoint: Vec<f64>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Clear the recording but keep allocated capacity.
    pub fn reset(&mut self) {
        self.ops.clear();
        self.spans.clear();
        self.values.clear();
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        let span = self.spans[id.0];
        &self.values[span.offset..span.offset + span.len]
    }

    fn push(&mut self, op: Op, value: &[f64]) -> NodeId {
        let offset = self.values.len();
        self.values.extend_from_slice(value);
        self.spans.push(Span {
            offset,
            len: value.len(),
        });
        self.ops.push(op);
        NodeId(self.ops.len() - 1)
    }

    pub fn constant(&mut self, v: &[f64]) -> NodeId {
        self.push(Op::Const, v)
    }

    pub fn constant_scalar(&mut self, v: f64) -> NodeId {
        self.push(Op::Const, &[v])
    }

    pub fn affine(
        &mut self,
        params: &ModelParams,
        net: ParamId,
        layer: usize,
        input: NodeId,
    ) -> Result<NodeId, DiffError> {
        let spec = params.layout().net_spec(net)?;
        let (w_in, w_out) = (spec.widths[layer], spec.widths[layer + 1]);
        if self.spans[input.0].len != w_in {
            return Err(DiffError::WidthMismatch {
                expected: w_in,
                found: self.spans[input.0].len,
            });
        }
        let (w, b) = params.layer(net, layer)?;
        let in_span = self.spans[input.0];
        let offset = self.values.len();
        for i in 0..w_out {
            let row = &w[i * w_in..(i + 1) * w_in];
            let x = &self.values[in_span.offset..in_span.offset + in_span.len];
            let y = b[i] + row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>();
            self.values.push(y);
        }
        self.spans.push(Span {
            offset,
            len: w_out,
        });
        self.ops.push(Op::Affine { net, layer, input });
        Ok(NodeId(self.ops.len() - 1))
    }

    pub fn leaky_relu(&mut self, input: NodeId) -> NodeId {
        let span = self.spans[input.0];
        let offset = self.values.len();
        for i in 0..span.len {
            let v = leaky_relu(self.values[span.offset + i]);
            self.values.push(v);
        }
        self.spans.push(Span {
            offset,
            len: span.len,
        });
        self.ops.push(Op::LeakyRelu { input });
        NodeId(self.ops.len() - 1)
    }

    pub fn softmax(&mut self, input: NodeId) -> NodeId {
        let span = self.spans[input.0];
        let mut y = self.value(input).to_vec();
        softmax_in_place(&mut y);
        let offset = self.values.len();
        self.values.extend_from_slice(&y);
        self.spans.push(Span {
            offset,
            len: span.len,
        });
        self.ops.push(Op::Softmax { input });
        NodeId(self.ops.len() - 1)
    }

    /// Record the full forward pass of one network.
    pub fn apply_net(
        &mut self,
        params: &ModelParams,
        net: ParamId,
        input: NodeId,
    ) -> Result<NodeId, DiffError> {
        let spec = params.layout().net_spec(net)?.clone();
        let mut current = input;
        for layer in 0..spec.layer_count() {
            current = self.affine(params, net, layer, current)?;
            if layer + 1 < spec.layer_count() {
                current = self.leaky_relu(current);
            }
        }
        if spec.head == Head::Softmax {
            current = self.softmax(current);
        }
        Ok(current)
    }

    fn binary_lens(&self, a: NodeId, b: NodeId) -> Result<usize, DiffError> {
        let (la, lb) = (self.spans[a.0].len, self.spans[b.0].len);
        if la != lb {
            return Err(DiffError::ShapeMismatch(format!(
                "binary op on lengths {la} and {lb}"
            )));
        }
        Ok(la)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let len = self.binary_lens(a, b)?;
        let (sa, sb) = (self.spans[a.0], self.spans[b.0]);
        let offset = self.values.len();
        for i in 0..len {
            let v = self.values[sa.offset + i] + self.values[sb.offset + i];
            self.values.push(v);
        }
        self.spans.push(Span { offset, len });
        self.ops.push(Op::Add { a, b });
        Ok(NodeId(self.ops.len() - 1))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let len = self.binary_lens(a, b)?;
        let (sa, sb) = (self.spans[a.0], self.spans[b.0]);
        let offset = self.values.len();
        for i in 0..len {
            let v = self.values[sa.offset + i] - self.values[sb.offset + i];
            self.values.push(v);
        }
        self.spans.push(Span { offset, len });
        self.ops.push(Op::Sub { a, b });
        Ok(NodeId(self.ops.len() - 1))
    }

    pub fn scale(&mut self, input: NodeId, factor: f64) -> NodeId {
        let span = self.spans[input.0];
        let offset = self.values.len();
        for i in 0..span.len {
            let v = factor * self.values[span.offset + i];
            self.values.push(v);
        }
        self.spans.push(Span {
            offset,
            len: span.len,
        });
        self.ops.push(Op::Scale { input, factor });
        NodeId(self.ops.len() - 1)
    }

    /// `a + factor * b`
    pub fn add_scaled(&mut self, a: NodeId, b: NodeId, factor: f64) -> Result<NodeId, DiffError> {
        let len = self.binary_lens(a, b)?;
        let (sa, sb) = (self.spans[a.0], self.spans[b.0]);
        let offset = self.values.len();
        for i in 0..len {
            let v = self.values[sa.offset + i] + factor * self.values[sb.offset + i];
            self.values.push(v);
        }
        self.spans.push(Span { offset, len });
        self.ops.push(Op::AddScaled { a, b, factor });
        Ok(NodeId(self.ops.len() - 1))
    }

    /// Simplex projection whose gradient passes straight through along the
    /// active face (and is zero on clipped coordinates).
    pub fn simplex_project_st(&mut self, input: NodeId) -> Result<NodeId, DiffError> {
        let projected = simplex_project(self.value(input))
            .map_err(|_| DiffError::NonFinite { op: "simplex_project_st" })?;
        Ok(self.push(Op::SimplexProjectSt { input }, &projected))
    }

    /// Mix an abundance row with a (possibly perturbed) endmember matrix:
    /// `y[l] = sum_p a[p] * (E[p,l] + dE[p,l])`.
    pub fn decode_mix(
        &mut self,
        params: &ModelParams,
        a: NodeId,
        reference: ParamId,
        perturbation: Option<ParamId>,
    ) -> Result<NodeId, DiffError> {
        let (rows, cols) = params.layout().matrix_shape(reference)?;
        if self.spans[a.0].len != rows {
            return Err(DiffError::WidthMismatch {
                expected: rows,
                found: self.spans[a.0].len,
            });
        }
        if let Some(de) = perturbation {
            let shape = params.layout().matrix_shape(de)?;
            if shape != (rows, cols) {
                return Err(DiffError::ShapeMismatch(format!(
                    "perturbation shape {shape:?} vs reference ({rows}, {cols})"
                )));
            }
        }
        let e = params.entry_values(reference);
        let de = perturbation.map(|id| params.entry_values(id));
        let a_span = self.spans[a.0];
        let mut y = vec![0.0; cols];
        for p in 0..rows {
            let ap = self.values[a_span.offset + p];
            if ap == 0.0 {
                continue;
            }
            let e_row = &e[p * cols..(p + 1) * cols];
            match de {
                Some(d) => {
                    let d_row = &d[p * cols..(p + 1) * cols];
                    for ((yl, el), dl) in y.iter_mut().zip(e_row).zip(d_row) {
                        *yl += ap * (el + dl);
                    }
                }
                None => {
                    for (yl, el) in y.iter_mut().zip(e_row) {
                        *yl += ap * el;
                    }
                }
            }
        }
        Ok(self.push(
            Op::DecodeMix {
                a,
                reference,
                perturbation,
            },
            &y,
        ))
    }

    pub fn sum_squares(&mut self, input: NodeId) -> NodeId {
        let s: f64 = self.value(input).iter().map(|v| v * v).sum();
        self.push(Op::SumSquares { input }, &[s])
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.binary_lens(a, b)?;
        let s: f64 = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .sum();
        Ok(self.push(Op::Dot { a, b }, &[s]))
    }

    pub fn sqrt_scalar(&mut self, input: NodeId) -> Result<NodeId, DiffError> {
        if self.spans[input.0].len != 1 {
            return Err(DiffError::ShapeMismatch("sqrt expects a scalar node".into()));
        }
        let v = self.value(input)[0];
        if v < 0.0 {
            return Err(DiffError::NonFinite { op: "sqrt_scalar" });
        }
        Ok(self.push(Op::SqrtScalar { input }, &[v.sqrt()]))
    }

    /// Reverse pass. Each `(node, seed)` pair seeds the adjoint of a scalar
    /// node; gradients accumulate into `grad` (which is not cleared first).
    pub fn backward(
        &mut self,
        params: &ModelParams,
        seeds: &[(NodeId, f64)],
        grad: &mut GradBuffer,
    ) -> Result<(), DiffError> {
        self.adjoint.clear();
        self.adjoint.resize(self.values.len(), 0.0);
        for &(node, seed) in seeds {
            let span = self.spans[node.0];
            if span.len != 1 {
                return Err(DiffError::ShapeMismatch(
                    "backward seeds must target scalar nodes".into(),
                ));
            }
            self.adjoint[span.offset] += seed;
        }

        for idx in (0..self.ops.len()).rev() {
            let span = self.spans[idx];
            let (adj_start, adj_end) = (span.offset, span.offset + span.len);
            if self.adjoint[adj_start..adj_end].iter().all(|&d| d == 0.0) {
                continue;
            }
            if self.adjoint[adj_start..adj_end].iter().any(|d| !d.is_finite()) {
                return Err(DiffError::NonFinite {
                    op: op_name(&self.ops[idx]),
                });
            }
            match self.ops[idx].clone() {
                Op::Const => {}
                Op::Affine { net, layer, input } => {
                    let spec = params.layout().net_spec(net)?;
                    let (w_in, w_out) = (spec.widths[layer], spec.widths[layer + 1]);
                    let (w_range, b_range) = params.layout().layer_ranges(net, layer)?;
                    let in_span = self.spans[input.0];
                    let (w, _) = params.layer(net, layer)?;
                    let gvals = grad.values_mut();
                    for i in 0..w_out {
                        let dy = self.adjoint[adj_start + i];
                        if dy == 0.0 {
                            continue;
                        }
                        gvals[b_range.start + i] += dy;
                        let w_row = &w[i * w_in..(i + 1) * w_in];
                        let gw_base = w_range.start + i * w_in;
                        for j in 0..w_in {
                            let xj = self.values[in_span.offset + j];
                            gvals[gw_base + j] += dy * xj;
                            self.adjoint[in_span.offset + j] += dy * w_row[j];
                        }
                    }
                }
                Op::LeakyRelu { input } => {
                    let in_span = self.spans[input.0];
                    for i in 0..span.len {
                        let x = self.values[in_span.offset + i];
                        self.adjoint[in_span.offset + i] +=
                            self.adjoint[adj_start + i] * leaky_relu_grad(x);
                    }
                }
                Op::Softmax { input } => {
                    let in_span = self.spans[input.0];
                    let mut dot = 0.0;
                    for i in 0..span.len {
                        dot += self.adjoint[adj_start + i] * self.values[span.offset + i];
                    }
                    for i in 0..span.len {
                        let y = self.values[span.offset + i];
                        self.adjoint[in_span.offset + i] +=
                            y * (self.adjoint[adj_start + i] - dot);
                    }
                }
                Op::Add { a, b } => {
                    let (sa, sb) = (self.spans[a.0], self.spans[b.0]);
                    for i in 0..span.len {
                        let d = self.adjoint[adj_start + i];
                        self.adjoint[sa.offset + i] += d;
                        self.adjoint[sb.offset + i] += d;
                    }
                }
                Op::Sub { a, b } => {
                    let (sa, sb) = (self.spans[a.0], self.spans[b.0]);
                    for i in 0..span.len {
                        let d = self.adjoint[adj_start + i];
                        self.adjoint[sa.offset + i] += d;
                        self.adjoint[sb.offset + i] -= d;
                    }
                }
                Op::Scale { input, factor } => {
                    let in_span = self.spans[input.0];
                    for i in 0..span.len {
                        self.adjoint[in_span.offset + i] += factor * self.adjoint[adj_start + i];
                    }
                }
                Op::AddScaled { a, b, factor } => {
                    let (sa, sb) = (self.spans[a.0], self.spans[b.0]);
                    for i in 0..span.len {
                        let d = self.adjoint[adj_start + i];
                        self.adjoint[sa.offset + i] += d;
                        self.adjoint[sb.offset + i] += factor * d;
                    }
                }
                Op::SimplexProjectSt { input } => {
                    // Projection Jacobian on the active face: the adjoint
                    // passes through identically along the face (centered on
                    // the support) and is zero on clipped coordinates.
                    let in_span = self.spans[input.0];
                    let mut support = 0usize;
                    let mut sum = 0.0;
                    for i in 0..span.len {
                        if self.values[span.offset + i] > 0.0 {
                            support += 1;
                            sum += self.adjoint[adj_start + i];
                        }
                    }
                    if support > 0 {
                        let mean = sum / support as f64;
                        for i in 0..span.len {
                            if self.values[span.offset + i] > 0.0 {
                                self.adjoint[in_span.offset + i] +=
                                    self.adjoint[adj_start + i] - mean;
                            }
                        }
                    }
                }
                Op::DecodeMix {
                    a,
                    reference,
                    perturbation,
                } => {
                    let (rows, cols) = params.layout().matrix_shape(reference)?;
                    let e_range = params.layout().entry_range(reference);
                    let de_range = perturbation.map(|id| params.layout().entry_range(id));
                    let a_span = self.spans[a.0];
                    let e = params.entry_values(reference);
                    let de = perturbation.map(|id| params.entry_values(id));
                    let gvals = grad.values_mut();
                    for p in 0..rows {
                        let ap = self.values[a_span.offset + p];
                        let e_row = &e[p * cols..(p + 1) * cols];
                        let mut da = 0.0;
                        for l in 0..cols {
                            let dy = self.adjoint[adj_start + l];
                            let e_total = match de {
                                Some(d) => e_row[l] + d[p * cols + l],
                                None => e_row[l],
                            };
                            da += dy * e_total;
                            gvals[e_range.start + p * cols + l] += ap * dy;
                            if let Some(r) = &de_range {
                                gvals[r.start + p * cols + l] += ap * dy;
                            }
                        }
                        self.adjoint[a_span.offset + p] += da;
                    }
                }
                Op::SumSquares { input } => {
                    let in_span = self.spans[input.0];
                    let d = self.adjoint[adj_start];
                    for i in 0..in_span.len {
                        self.adjoint[in_span.offset + i] +=
                            2.0 * d * self.values[in_span.offset + i];
                    }
                }
                Op::Dot { a, b } => {
                    let (sa, sb) = (self.spans[a.0], self.spans[b.0]);
                    let d = self.adjoint[adj_start];
                    for i in 0..sa.len {
                        self.adjoint[sa.offset + i] += d * self.values[sb.offset + i];
                        self.adjoint[sb.offset + i] += d * self.values[sa.offset + i];
                    }
                }
                Op::SqrtScalar { input } => {
                    let in_span = self.spans[input.0];
                    let y = self.values[span.offset];
                    if y <= 0.0 {
                        return Err(DiffError::NonFinite { op: "sqrt_scalar" });
                    }
                    self.adjoint[in_span.offset] += self.adjoint[adj_start] / (2.0 * y);
                }
            }
        }
        Ok(())
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Const => "const",
        Op::Affine { .. } => "affine",
        Op::LeakyRelu { .. } => "leaky_relu",
        Op::Softmax { .. } => "softmax",
        Op::Add { .. } => "add",
        Op::Sub { .. } => "sub",
        Op::Scale { .. } => "scale",
        Op::AddScaled { .. } => "add_scaled",
        Op::SimplexProjectSt { .. } => "simplex_project_st",
        Op::DecodeMix { .. } => "decode_mix",
        Op::SumSquares { .. } => "sum_squares",
        Op::Dot { .. } => "dot",
        Op::SqrtScalar { .. } => "sqrt_scalar",
    }
}
