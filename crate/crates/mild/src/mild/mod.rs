//! The multitemporal latent-dynamics unmixing model.
//!
//! Per-time encoders map each pixel spectrum to a pseudo-abundance on the
//! simplex. A fusion layer couples the pseudo-abundances across time: the
//! abundance at time `t` is the pseudo-abundance plus the average of learned
//! per-time fusion terms evaluated at up to `K` neighbors on each side,
//!
//! ```text
//! A_t = ( sum_{i=1..K} F_{t-i}(z_{t-i}) + F_{t+i}(z_{t+i}) ) / 2K  +  z_t
//! ```
//!
//! with nearest-step completion at the sequence boundaries (a side missing
//! `m` steps borrows the `m` nearest steps from the other side; the divisor
//! stays `2K`). The decoder is a perturbed linear mixing model: a trainable
//! reference endmember matrix `E` shared across time plus one trainable
//! perturbation `dE_t` per frame.
//!
//! Fused rows are returned to the feasible set by Euclidean simplex
//! projection; during training the projection's gradient passes straight
//! through along the active face.

mod train;

pub use train::{objective_and_gradient, train, train_with_init, TrainLog};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffkit::{
    forward, init_params, DiffError, Head, ModelParams, NetSpec, ParamId, ParamLayout,
};
use crate::hsidata::{simplex_project, AbundanceStack, EndmemberSet, HsiError, SequenceCube};
use crate::initbase::InitError;

/// Hidden width of the per-time encoders.
pub const ENCODER_HIDDEN: usize = 64;
/// Hidden width of the per-time fusion networks.
pub const FUSION_HIDDEN: usize = 32;

#[derive(Debug, Error)]
pub enum MildError {
    #[error("invalid configuration: {0}")]
    BadConfig(String),
    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error(transparent)]
    Init(#[from] InitError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Hsi(#[from] HsiError),
}

/// Training hyperparameters. `delta` is the nominal frame spacing of the
/// underlying discretization; the experiments use unit spacing and handle
/// gaps through `k` instead.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub alpha: f64,
    pub beta: f64,
    pub k: usize,
    pub delta: f64,
    pub seed: u64,
    /// Pixels per optimizer step; `None` trains full-batch.
    pub batch_pixels: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            lr: 1e-3,
            alpha: 1.0,
            beta: 0.1,
            k: 2,
            delta: 1.0,
            seed: 0,
            batch_pixels: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), MildError> {
        if self.epochs < 1 {
            return Err(MildError::BadConfig("epochs must be >= 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(MildError::BadConfig(format!("bad learning rate {}", self.lr)));
        }
        if self.alpha < 0.0 || self.beta < 0.0 {
            return Err(MildError::BadConfig("loss weights must be >= 0".into()));
        }
        if !(self.delta.is_finite() && self.delta > 0.0) {
            return Err(MildError::BadConfig(format!("bad delta {}", self.delta)));
        }
        Ok(())
    }
}

/// The model: per-time encoders, per-time fusion networks, and the perturbed
/// linear-mixing decoder, all stored in one flat parameter vector.
#[derive(Debug, Clone)]
pub struct MildModel {
    params: ModelParams,
    encoder_ids: Vec<ParamId>,
    fusion_ids: Vec<ParamId>,
    reference_id: ParamId,
    perturbation_ids: Vec<ParamId>,
    k_steps: usize,
    t_count: usize,
    bands: usize,
    endmember_count: usize,
}

impl MildModel {
    /// Freshly initialized model. Requires `k >= 1` and `2k <= t_count - 1`
    /// so the boundary completion always has enough neighbors.
    pub fn new(
        t_count: usize,
        bands: usize,
        endmember_count: usize,
        k_steps: usize,
        seed: u64,
    ) -> Result<Self, MildError> {
        if k_steps < 1 {
            return Err(MildError::BadConfig("k must be >= 1".into()));
        }
        if t_count < 2 * k_steps + 1 {
            return Err(MildError::BadConfig(format!(
                "2k <= T - 1 violated: k = {k_steps}, T = {t_count}"
            )));
        }
        if endmember_count < 2 {
            return Err(MildError::BadConfig(format!(
                "need at least two endmembers, got {endmember_count}"
            )));
        }
        let layout = Self::build_layout(t_count, bands, endmember_count)?;
        let params = init_params(&layout, seed);
        Ok(Self::assemble(params, t_count, bands, endmember_count, k_steps))
    }

    /// Rebuild a model around parameters loaded from a checkpoint.
    pub fn from_params(
        params: ModelParams,
        t_count: usize,
        bands: usize,
        endmember_count: usize,
        k_steps: usize,
    ) -> Result<Self, MildError> {
        let expected = Self::build_layout(t_count, bands, endmember_count)?;
        if params.layout() != &expected {
            return Err(MildError::BadConfig(
                "checkpoint layout does not match the declared dimensions".into(),
            ));
        }
        if k_steps < 1 || t_count < 2 * k_steps + 1 {
            return Err(MildError::BadConfig(format!(
                "invalid k = {k_steps} for T = {t_count}"
            )));
        }
        Ok(Self::assemble(params, t_count, bands, endmember_count, k_steps))
    }

    fn build_layout(
        t_count: usize,
        bands: usize,
        endmember_count: usize,
    ) -> Result<ParamLayout, MildError> {
        let mut layout = ParamLayout::new();
        for _ in 0..t_count {
            layout.register_net(NetSpec::new(
                vec![bands, ENCODER_HIDDEN, endmember_count],
                Head::Softmax,
            )?);
        }
        for _ in 0..t_count {
            layout.register_net(NetSpec::new(
                vec![endmember_count, FUSION_HIDDEN, endmember_count],
                Head::Linear,
            )?);
        }
        layout.register_matrix(endmember_count, bands);
        for _ in 0..t_count {
            layout.register_matrix(endmember_count, bands);
        }
        Ok(layout)
    }

    fn assemble(
        params: ModelParams,
        t_count: usize,
        bands: usize,
        endmember_count: usize,
        k_steps: usize,
    ) -> Self {
        let encoder_ids: Vec<ParamId> = (0..t_count).map(ParamId).collect();
        let fusion_ids: Vec<ParamId> = (t_count..2 * t_count).map(ParamId).collect();
        let reference_id = ParamId(2 * t_count);
        let perturbation_ids: Vec<ParamId> =
            (2 * t_count + 1..3 * t_count + 1).map(ParamId).collect();
        MildModel {
            params,
            encoder_ids,
            fusion_ids,
            reference_id,
            perturbation_ids,
            k_steps,
            t_count,
            bands,
            endmember_count,
        }
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }
    pub fn params_mut(&mut self) -> &mut ModelParams {
        &mut self.params
    }
    pub fn k_steps(&self) -> usize {
        self.k_steps
    }
    pub fn t_count(&self) -> usize {
        self.t_count
    }
    pub fn bands(&self) -> usize {
        self.bands
    }
    pub fn endmember_count(&self) -> usize {
        self.endmember_count
    }
    pub fn encoder_id(&self, t: usize) -> ParamId {
        self.encoder_ids[t]
    }
    pub fn fusion_id(&self, t: usize) -> ParamId {
        self.fusion_ids[t]
    }
    pub fn reference_id(&self) -> ParamId {
        self.reference_id
    }
    pub fn perturbation_id(&self, t: usize) -> ParamId {
        self.perturbation_ids[t]
    }

    /// Overwrite the reference endmember matrix `E` (row-major `P x L`).
    pub fn set_reference_endmembers(&mut self, e: &[f64]) -> Result<(), MildError> {
        if e.len() != self.endmember_count * self.bands {
            return Err(MildError::BadConfig(format!(
                "reference endmembers need {} values, got {}",
                self.endmember_count * self.bands,
                e.len()
            )));
        }
        self.params
            .entry_values_mut(self.reference_id)
            .copy_from_slice(e);
        Ok(())
    }

    fn check_cube(&self, cube: &SequenceCube) -> Result<(), MildError> {
        if cube.t_count() != self.t_count || cube.bands() != self.bands {
            return Err(MildError::BadConfig(format!(
                "cube T={} L={} does not match model T={} L={}",
                cube.t_count(),
                cube.bands(),
                self.t_count,
                self.bands
            )));
        }
        Ok(())
    }

    /// Per-time encoder outputs (pseudo-abundances); softmax heads keep every
    /// row on the simplex.
    pub fn encode_all(&self, cube: &SequenceCube) -> Result<AbundanceStack, MildError> {
        self.check_cube(cube)?;
        let (t_count, n_count, p) = (self.t_count, cube.pixel_count(), self.endmember_count);
        let mut values = vec![0.0; t_count * n_count * p];
        for t in 0..t_count {
            let id = self.encoder_ids[t];
            for n in 0..n_count {
                let z = forward(&self.params, id, cube.pixel(t, n))?;
                values[(t * n_count + n) * p..(t * n_count + n + 1) * p].copy_from_slice(&z);
            }
        }
        Ok(AbundanceStack::new(t_count, n_count, p, values)?)
    }

    /// Learned fusion term `F_t(z_t)`; an unconstrained vector.
    pub fn fusion_term(&self, t: usize, z_t: &[f64]) -> Result<Vec<f64>, MildError> {
        Ok(forward(&self.params, self.fusion_ids[t], z_t)?)
    }

    /// Neighbor offsets fused at time `t` (0-indexed): `(left, right)` step
    /// counts, always summing to `2k`. A boundary side missing steps borrows
    /// the nearest steps from the other side.
    pub fn fusion_steps(&self, t: usize) -> (usize, usize) {
        let k = self.k_steps;
        let left_avail = t;
        let right_avail = self.t_count - 1 - t;
        let mut k_left = k.min(left_avail);
        let mut k_right = k.min(right_avail);
        let deficit = 2 * k - k_left - k_right;
        if deficit > 0 {
            if k_left < k {
                k_right += deficit;
            } else {
                k_left += deficit;
            }
        }
        debug_assert!(k_left + k_right == 2 * k);
        debug_assert!(k_left <= left_avail && k_right <= right_avail);
        (k_left, k_right)
    }

    /// Pre-projection abundance field for time `t`: the fusion-layer output
    /// for every pixel, `N x P` row-major.
    pub fn latent_fusion(&self, z: &AbundanceStack, t: usize) -> Result<Vec<f64>, MildError> {
        if z.t_count() != self.t_count || z.endmember_count() != self.endmember_count {
            return Err(MildError::BadConfig(
                "pseudo-abundance stack does not match the model".into(),
            ));
        }
        let (k_left, k_right) = self.fusion_steps(t);
        let n_count = z.pixel_count();
        let p = self.endmember_count;
        let scale = 1.0 / (2 * self.k_steps) as f64;
        let mut out = vec![0.0; n_count * p];
        for n in 0..n_count {
            let row = &mut out[n * p..(n + 1) * p];
            row.copy_from_slice(z.row(t, n));
            for i in 1..=k_left {
                let tj = t - i;
                let f = self.fusion_term(tj, z.row(tj, n))?;
                for (r, fv) in row.iter_mut().zip(&f) {
                    *r += scale * fv;
                }
            }
            for i in 1..=k_right {
                let tj = t + i;
                let f = self.fusion_term(tj, z.row(tj, n))?;
                for (r, fv) in row.iter_mut().zip(&f) {
                    *r += scale * fv;
                }
            }
        }
        Ok(out)
    }

    /// Full inference: encode, fuse, and project every row back onto the
    /// simplex.
    pub fn infer_abundance(&self, cube: &SequenceCube) -> Result<AbundanceStack, MildError> {
        let z = self.encode_all(cube)?;
        let (t_count, n_count, p) = (self.t_count, z.pixel_count(), self.endmember_count);
        let mut values = vec![0.0; t_count * n_count * p];
        for t in 0..t_count {
            let fused = self.latent_fusion(&z, t)?;
            for n in 0..n_count {
                let projected = simplex_project(&fused[n * p..(n + 1) * p])?;
                values[(t * n_count + n) * p..(t * n_count + n + 1) * p]
                    .copy_from_slice(&projected);
            }
        }
        Ok(AbundanceStack::new(t_count, n_count, p, values)?)
    }

    /// Decoder endmembers `E_t = E + dE_t`, clamped to nonnegative values for
    /// export. Training uses the unclamped values.
    pub fn endmembers(&self) -> EndmemberSet {
        let e = self.params.entry_values(self.reference_id).to_vec();
        let per_time: Vec<Vec<f64>> = (0..self.t_count)
            .map(|t| {
                let de = self.params.entry_values(self.perturbation_ids[t]);
                e.iter().zip(de).map(|(ev, dv)| (ev + dv).max(0.0)).collect()
            })
            .collect();
        EndmemberSet::new(
            self.endmember_count,
            self.bands,
            e.iter().map(|&v| v.max(0.0)).collect(),
            per_time,
        )
        .expect("model dimensions are consistent")
    }

    /// Unclamped decoder endmembers, exactly as the training loss sees them.
    pub(crate) fn endmembers_unclamped(&self) -> EndmemberSet {
        let e = self.params.entry_values(self.reference_id).to_vec();
        let per_time: Vec<Vec<f64>> = (0..self.t_count)
            .map(|t| {
                let de = self.params.entry_values(self.perturbation_ids[t]);
                e.iter().zip(de).map(|(ev, dv)| ev + dv).collect()
            })
            .collect();
        EndmemberSet::new(self.endmember_count, self.bands, e, per_time)
            .expect("model dimensions are consistent")
    }

    /// Endmember penalty: `0.5 * sum_t ||E_t - E||_F^2 = 0.5 * sum_t ||dE_t||_F^2`.
    pub fn loss_endmember(&self) -> f64 {
        self.perturbation_ids
            .iter()
            .map(|&id| {
                self.params
                    .entry_values(id)
                    .iter()
                    .map(|d| d * d)
                    .sum::<f64>()
            })
            .sum::<f64>()
            * 0.5
    }

    /// Total training objective on a cube: `alpha * L_RE + beta * L_E`,
    /// evaluated through the same pipeline training differentiates.
    pub fn loss_total(&self, cube: &SequenceCube, alpha: f64, beta: f64) -> Result<f64, MildError> {
        let a = self.infer_abundance(cube)?;
        let e = self.endmembers_unclamped();
        Ok(alpha * loss_reconstruction(cube, &a, &e)? + beta * self.loss_endmember())
    }
}

/// Reconstruction loss: `sqrt( (1/T) * sum_t ||Y_t - A_t E_t||_F^2 )`.
pub fn loss_reconstruction(
    cube: &SequenceCube,
    a: &AbundanceStack,
    e: &EndmemberSet,
) -> Result<f64, MildError> {
    if a.t_count() != cube.t_count()
        || e.t_count() != cube.t_count()
        || a.pixel_count() != cube.pixel_count()
        || e.bands() != cube.bands()
        || a.endmember_count() != e.endmember_count()
    {
        return Err(MildError::BadConfig(
            "reconstruction loss received inconsistent shapes".into(),
        ));
    }
    let (t_count, n_count, _p, l) = (
        cube.t_count(),
        cube.pixel_count(),
        a.endmember_count(),
        cube.bands(),
    );
    let mut total = 0.0;
    let mut recon = vec![0.0; l];
    for t in 0..t_count {
        let et = e.at_time(t);
        for n in 0..n_count {
            recon.iter_mut().for_each(|v| *v = 0.0);
            for (pi, &ap) in a.row(t, n).iter().enumerate() {
                if ap == 0.0 {
                    continue;
                }
                let row = &et[pi * l..(pi + 1) * l];
                for (r, &ev) in recon.iter_mut().zip(row) {
                    *r += ap * ev;
                }
            }
            for (y, r) in cube.pixel(t, n).iter().zip(&recon) {
                total += (y - r) * (y - r);
            }
        }
    }
    Ok((total / t_count as f64).sqrt())
}
