//! Full-batch adaptive-moment training.
//!
//! Each epoch evaluates the objective and its exact gradient in two passes.
//! The first pass accumulates the squared reconstruction residual `S` (the
//! square root couples every pixel, so the scalar scale `d L_RE / d s =
//! alpha / (2 * L_RE * T)` must be known before backpropagation). The second
//! pass rebuilds each pixel's subgraph on a reusable tape, seeds its per-time
//! residual nodes with that scale, and accumulates parameter gradients.
//!
//! Pixels are processed in fixed 256-pixel chunks: chunks run in parallel,
//! each chunk accumulates sequentially, and chunk results are merged in chunk
//! order. Gradients are therefore bitwise identical for any thread count.

use rayon::prelude::*;

use super::{MildError, MildModel, TrainConfig};
use crate::diffkit::{opt_step, AdamConfig, AdamState, GradBuffer, Tape};
use crate::hsidata::{simplex_project, SequenceCube};
use crate::initbase::vca;

const CHUNK: usize = 256;

/// Per-epoch objective values, recorded before each step.
#[derive(Debug, Clone)]
pub struct TrainLog {
    pub per_epoch_loss: Vec<f64>,
}

/// Initialize from pooled VCA and train for `config.epochs` steps.
pub fn train(
    cube: &SequenceCube,
    endmember_count: usize,
    config: &TrainConfig,
) -> Result<(MildModel, TrainLog), MildError> {
    config.validate()?;
    let init = vca(cube, endmember_count, config.seed)?;
    let mut model = MildModel::new(
        cube.t_count(),
        cube.bands(),
        endmember_count,
        config.k,
        config.seed,
    )?;
    model.set_reference_endmembers(&init.endmembers)?;
    let log = train_with_init(cube, config, &mut model)?;
    Ok((model, log))
}

/// Train a pre-built, pre-initialized model in place.
pub fn train_with_init(
    cube: &SequenceCube,
    config: &TrainConfig,
    model: &mut MildModel,
) -> Result<TrainLog, MildError> {
    config.validate()?;
    if cube.t_count() != model.t_count() || cube.bands() != model.bands() {
        return Err(MildError::BadConfig(
            "cube does not match the model dimensions".into(),
        ));
    }
    let n_count = cube.pixel_count();
    let batch = config.batch_pixels.unwrap_or(n_count).min(n_count).max(1);
    // an epoch is one pass over the image: full-batch configs take one
    // optimizer step per epoch, minibatch configs take ceil(N / batch)
    let steps_per_epoch = n_count.div_ceil(batch);
    let mut cursor = 0usize;
    let mut state = AdamState::zeros(model.params().layout());
    let adam = AdamConfig::with_lr(config.lr);
    let mut grad = GradBuffer::zeros(model.params().layout());
    let mut log = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let mut epoch_loss = 0.0;
        for _ in 0..steps_per_epoch {
            let pixels: Vec<usize> = (0..batch).map(|i| (cursor + i) % n_count).collect();
            cursor = (cursor + batch) % n_count;

            grad.fill_zero();
            let loss =
                objective_and_gradient(model, cube, &pixels, config.alpha, config.beta, &mut grad)
                    .map_err(|_| MildError::NonFiniteLoss { epoch })?;
            if !loss.is_finite() {
                return Err(MildError::NonFiniteLoss { epoch });
            }
            epoch_loss += loss;
            opt_step(model.params_mut(), &grad, &mut state, &adam);
        }
        log.push(epoch_loss / steps_per_epoch as f64);
    }
    Ok(TrainLog {
        per_epoch_loss: log,
    })
}

/// Squared reconstruction residual of one pixel across all frames, through
/// the full fusion + projection + decode pipeline.
fn pixel_squared_residual(
    model: &MildModel,
    cube: &SequenceCube,
    endmembers: &[Vec<f64>],
    n: usize,
) -> Result<f64, MildError> {
    let t_count = model.t_count();
    let p = model.endmember_count();
    let l = model.bands();
    let mut z = vec![0.0; t_count * p];
    let mut f = vec![0.0; t_count * p];
    for t in 0..t_count {
        let zt = crate::diffkit::forward(model.params(), model.encoder_id(t), cube.pixel(t, n))?;
        z[t * p..(t + 1) * p].copy_from_slice(&zt);
        let ft = crate::diffkit::forward(model.params(), model.fusion_id(t), &zt)?;
        f[t * p..(t + 1) * p].copy_from_slice(&ft);
    }
    let scale = 1.0 / (2 * model.k_steps()) as f64;
    let mut total = 0.0;
    let mut fused = vec![0.0; p];
    for t in 0..t_count {
        fused.copy_from_slice(&z[t * p..(t + 1) * p]);
        let (k_left, k_right) = model.fusion_steps(t);
        for i in 1..=k_left {
            let tj = t - i;
            for (fv, fj) in fused.iter_mut().zip(&f[tj * p..(tj + 1) * p]) {
                *fv += scale * fj;
            }
        }
        for i in 1..=k_right {
            let tj = t + i;
            for (fv, fj) in fused.iter_mut().zip(&f[tj * p..(tj + 1) * p]) {
                *fv += scale * fj;
            }
        }
        let a = simplex_project(&fused)?;
        let et = &endmembers[t];
        for (band, &y) in cube.pixel(t, n).iter().enumerate() {
            let mut recon = 0.0;
            for (pi, &ap) in a.iter().enumerate() {
                recon += ap * et[pi * l + band];
            }
            total += (y - recon) * (y - recon);
        }
    }
    Ok(total)
}

/// Record one pixel's subgraph and seed its per-time residual nodes.
fn pixel_backward(
    model: &MildModel,
    cube: &SequenceCube,
    n: usize,
    residual_seed: f64,
    tape: &mut Tape,
    grad: &mut GradBuffer,
) -> Result<(), MildError> {
    let t_count = model.t_count();
    let scale = 1.0 / (2 * model.k_steps()) as f64;
    tape.reset();
    let params = model.params();

    let mut z_nodes = Vec::with_capacity(t_count);
    let mut f_nodes = Vec::with_capacity(t_count);
    for t in 0..t_count {
        let input = tape.constant(cube.pixel(t, n));
        let z = tape.apply_net(params, model.encoder_id(t), input)?;
        let f = tape.apply_net(params, model.fusion_id(t), z)?;
        z_nodes.push(z);
        f_nodes.push(f);
    }

    let mut seeds = Vec::with_capacity(t_count);
    for t in 0..t_count {
        let (k_left, k_right) = model.fusion_steps(t);
        let mut acc = z_nodes[t];
        for i in 1..=k_left {
            acc = tape.add_scaled(acc, f_nodes[t - i], scale)?;
        }
        for i in 1..=k_right {
            acc = tape.add_scaled(acc, f_nodes[t + i], scale)?;
        }
        let a = tape.simplex_project_st(acc)?;
        let yhat = tape.decode_mix(
            params,
            a,
            model.reference_id(),
            Some(model.perturbation_id(t)),
        )?;
        let y = tape.constant(cube.pixel(t, n));
        let r = tape.sub(y, yhat)?;
        let s = tape.sum_squares(r);
        seeds.push((s, residual_seed));
    }
    tape.backward(params, &seeds, grad)?;
    Ok(())
}

/// Objective value and exact parameter gradient over a pixel subset — one
/// training step's worth of work, exposed for verification harnesses.
pub fn objective_and_gradient(
    model: &MildModel,
    cube: &SequenceCube,
    pixels: &[usize],
    alpha: f64,
    beta: f64,
    grad: &mut GradBuffer,
) -> Result<f64, MildError> {
    let t_count = model.t_count();
    let endmembers: Vec<Vec<f64>> = {
        let set = model.endmembers_unclamped();
        (0..t_count).map(|t| set.at_time(t).to_vec()).collect()
    };

    // Pass 1: squared residual sum, chunked and merged in order.
    let partials: Result<Vec<f64>, MildError> = pixels
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut acc = 0.0;
            for &n in chunk {
                acc += pixel_squared_residual(model, cube, &endmembers, n)?;
            }
            Ok(acc)
        })
        .collect();
    let squared_sum: f64 = partials?.iter().sum();
    let l_re = (squared_sum / t_count as f64).sqrt();
    let l_e = model.loss_endmember();
    let loss = alpha * l_re + beta * l_e;
    if !loss.is_finite() {
        return Ok(loss); // caller turns this into a training abort
    }

    // Pass 2: reverse-mode accumulation. The sqrt in L_RE contributes the
    // shared scalar scale on every squared-residual node.
    if alpha > 0.0 && l_re > 0.0 {
        let seed = alpha / (2.0 * l_re * t_count as f64);
        let chunk_grads: Result<Vec<GradBuffer>, MildError> = pixels
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut local = GradBuffer::zeros(model.params().layout());
                let mut tape = Tape::new();
                for &n in chunk {
                    pixel_backward(model, cube, n, seed, &mut tape, &mut local)?;
                }
                Ok(local)
            })
            .collect();
        for chunk_grad in chunk_grads? {
            grad.add_assign(&chunk_grad);
        }
    }

    // Endmember penalty gradient: beta * dE_t, directly.
    if beta > 0.0 {
        for t in 0..t_count {
            let id = model.perturbation_id(t);
            let range = model.params().layout().entry_range(id);
            let de = model.params().entry_values(id).to_vec();
            for (g, d) in grad.values_mut()[range].iter_mut().zip(de) {
                *g += beta * d;
            }
        }
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hsidata::validate_abundance;
    use crate::synthgen::{generate, Preset, SynthSpec};

    fn tiny_scene(seed: u64) -> SequenceCube {
        let spec = SynthSpec {
            preset: Preset::Custom,
            t_count: 4,
            height: 6,
            width: 6,
            bands: 16,
            endmember_count: 3,
            snr_db: Some(30.0),
            scale_range: (0.9, 1.1),
            mutation_times: vec![],
            seed,
        };
        generate(&spec).unwrap().0
    }

    fn quick_config(epochs: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs,
            lr: 1e-3,
            alpha: 1.0,
            beta: 0.1,
            k: 1,
            delta: 1.0,
            seed,
            batch_pixels: None,
        }
    }

    #[test]
    fn training_descends() {
        let cube = tiny_scene(3);
        let (model, log) = train(&cube, 3, &quick_config(40, 3)).unwrap();
        assert!(log.per_epoch_loss.len() == 40);
        assert!(
            log.per_epoch_loss.last().unwrap() < log.per_epoch_loss.first().unwrap(),
            "loss did not decrease: {:?}",
            &log.per_epoch_loss[..3]
        );
        let a = model.infer_abundance(&cube).unwrap();
        assert!(validate_abundance(&a).ok);
    }

    #[test]
    fn training_is_deterministic() {
        let cube = tiny_scene(9);
        let (m1, l1) = train(&cube, 3, &quick_config(10, 7)).unwrap();
        let (m2, l2) = train(&cube, 3, &quick_config(10, 7)).unwrap();
        assert_eq!(l1.per_epoch_loss, l2.per_epoch_loss);
        assert_eq!(m1.params().values(), m2.params().values());
    }

    #[test]
    fn training_is_thread_count_invariant() {
        let cube = tiny_scene(4);
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap();
            pool.install(|| train(&cube, 3, &quick_config(5, 2)).unwrap())
        };
        let (m1, _) = run(1);
        let (m4, _) = run(4);
        assert_eq!(m1.params().values(), m4.params().values());
    }

    #[test]
    fn divergent_training_aborts_with_epoch() {
        let cube = tiny_scene(5);
        let mut config = quick_config(10, 1);
        config.lr = 1e200;
        match train(&cube, 3, &config) {
            Err(MildError::NonFiniteLoss { epoch }) => assert!(epoch > 0),
            other => panic!("expected NonFiniteLoss, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn end_to_end_gradient_matches_finite_differences() {
        // 4 pixels, T=5, K=1 per the gradient acceptance setup
        let spec = SynthSpec {
            preset: Preset::Custom,
            t_count: 5,
            height: 2,
            width: 2,
            bands: 8,
            endmember_count: 2,
            snr_db: None,
            scale_range: (0.95, 1.05),
            mutation_times: vec![],
            seed: 12,
        };
        let (cube, _) = generate(&spec).unwrap();
        let mut model = MildModel::new(5, 8, 2, 1, 31).unwrap();
        model
            .set_reference_endmembers(&[
                0.3, 0.5, 0.2, 0.6, 0.4, 0.1, 0.5, 0.1, 0.9, 0.2, 0.3, 0.4, 0.7, 0.2, 0.6, 0.3,
            ])
            .unwrap();
        // non-zero perturbations so their gradients are exercised
        for t in 0..5 {
            let id = model.perturbation_id(t);
            for (i, v) in model.params_mut().entry_values_mut(id).iter_mut().enumerate() {
                *v = 0.01 * ((i + t) % 5) as f64 - 0.02;
            }
        }
        let pixels: Vec<usize> = (0..4).collect();
        let (alpha, beta) = (1.0, 0.1);
        let mut grad = GradBuffer::zeros(model.params().layout());
        let loss0 = objective_and_gradient(&model, &cube, &pixels, alpha, beta, &mut grad).unwrap();
        assert!(loss0.is_finite());

        let h = 1e-5;
        let total = model.params().values().len();
        let stride = (total / 120).max(1); // spot-check a spread of parameters
        let mut worst = 0.0_f64;
        for i in (0..total).step_by(stride) {
            let orig = model.params().values()[i];
            model.params_mut().values_mut()[i] = orig + h;
            let mut scratch = GradBuffer::zeros(model.params().layout());
            let up = objective_and_gradient(&model, &cube, &pixels, alpha, beta, &mut scratch).unwrap();
            model.params_mut().values_mut()[i] = orig - h;
            let down = objective_and_gradient(&model, &cube, &pixels, alpha, beta, &mut scratch).unwrap();
            model.params_mut().values_mut()[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let rel = (grad.values()[i] - fd).abs() / fd.abs().max(1e-3);
            worst = worst.max(rel);
        }
        assert!(worst < 1e-3, "worst relative gradient error {worst}");
    }

    /// Permute every endmember-indexed parameter block consistently.
    fn permute_material_axes(model: &mut MildModel, perm: &[usize]) {
        let p = model.endmember_count();
        let l = model.bands();
        let t_count = model.t_count();
        // encoder output layers: rows of W and entries of b
        for t in 0..t_count {
            let id = model.encoder_id(t);
            let (w_range, b_range) = model.params().layout().layer_ranges(id, 1).unwrap();
            let w_old = model.params().values()[w_range.clone()].to_vec();
            let b_old = model.params().values()[b_range.clone()].to_vec();
            let w_in = w_old.len() / p;
            for (new_row, &src) in perm.iter().enumerate() {
                model.params_mut().values_mut()
                    [w_range.start + new_row * w_in..w_range.start + (new_row + 1) * w_in]
                    .copy_from_slice(&w_old[src * w_in..(src + 1) * w_in]);
                model.params_mut().values_mut()[b_range.start + new_row] = b_old[src];
            }
        }
        // fusion nets: input columns of layer 0, output rows/bias of layer 1
        for t in 0..t_count {
            let id = model.fusion_id(t);
            let (w0_range, _) = model.params().layout().layer_ranges(id, 0).unwrap();
            let w0_old = model.params().values()[w0_range.clone()].to_vec();
            let rows0 = w0_old.len() / p;
            for r in 0..rows0 {
                for (new_col, &src) in perm.iter().enumerate() {
                    model.params_mut().values_mut()[w0_range.start + r * p + new_col] =
                        w0_old[r * p + src];
                }
            }
            let (w1_range, b1_range) = model.params().layout().layer_ranges(id, 1).unwrap();
            let w1_old = model.params().values()[w1_range.clone()].to_vec();
            let b1_old = model.params().values()[b1_range.clone()].to_vec();
            let w_in = w1_old.len() / p;
            for (new_row, &src) in perm.iter().enumerate() {
                model.params_mut().values_mut()
                    [w1_range.start + new_row * w_in..w1_range.start + (new_row + 1) * w_in]
                    .copy_from_slice(&w1_old[src * w_in..(src + 1) * w_in]);
                model.params_mut().values_mut()[b1_range.start + new_row] = b1_old[src];
            }
        }
        // decoder: rows of E and every dE_t
        let mut matrix_ids = vec![model.reference_id()];
        matrix_ids.extend((0..t_count).map(|t| model.perturbation_id(t)));
        for id in matrix_ids {
            let range = model.params().layout().entry_range(id);
            let old = model.params().values()[range.clone()].to_vec();
            for (new_row, &src) in perm.iter().enumerate() {
                model.params_mut().values_mut()
                    [range.start + new_row * l..range.start + (new_row + 1) * l]
                    .copy_from_slice(&old[src * l..(src + 1) * l]);
            }
        }
    }

    #[test]
    fn material_permutation_permutes_abundance_columns() {
        let cube = tiny_scene(13);
        let perm = [2usize, 0, 1];

        let build = || {
            let mut m = MildModel::new(4, 16, 3, 1, 99).unwrap();
            let init = crate::initbase::vca(&cube, 3, 99).unwrap();
            m.set_reference_endmembers(&init.endmembers).unwrap();
            m
        };
        let config = quick_config(1, 99);

        let mut base = build();
        train_with_init(&cube, &config, &mut base).unwrap();
        let a_base = base.infer_abundance(&cube).unwrap();

        let mut permuted = build();
        permute_material_axes(&mut permuted, &perm);
        train_with_init(&cube, &config, &mut permuted).unwrap();
        let a_perm = permuted.infer_abundance(&cube).unwrap();

        // the permuted model's column perm[j] is the base model's column j,
        // so argmaxes must correspond through the permutation
        let mut checked = 0;
        for t in 0..4 {
            for n in 0..cube.pixel_count() {
                let row_b = a_base.row(t, n);
                let row_p = a_perm.row(t, n);
                let argmax = |row: &[f64]| -> usize {
                    row.iter()
                        .enumerate()
                        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                        .unwrap()
                        .0
                };
                // skip pixels whose top-two entries tie within float noise
                let mut sorted = row_b.to_vec();
                sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
                if sorted[0] - sorted[1] < 1e-9 {
                    continue;
                }
                let base_max = argmax(row_b);
                let perm_max = argmax(row_p);
                assert_eq!(
                    perm_max,
                    perm.iter().position(|&s| s == base_max).unwrap(),
                    "t={t} n={n} base row {row_b:?} perm row {row_p:?}"
                );
                checked += 1;
            }
        }
        assert!(checked > 100, "only {checked} pixels had a clear argmax");
    }
}
