//! Acceptance suite: the release gate for the whole toolbox.
//!
//! Ten criteria are checked in order, each printing one pass/fail line. The
//! expensive ones regenerate the synthetic protocols and train with the
//! default configuration (K = 2, 200 epochs), exactly like the command-line
//! pipeline. Run with `--nocapture` to watch the lines stream by:
//!
//! ```text
//! cargo test --release -p mild --test acceptance -- --nocapture
//! ```

use std::time::Instant;

use mild::cli::{run_pipeline, PipelineOutcome, PresetArg, TrainOverrides};
use mild::diffkit::{forward, init_params, GradBuffer, Head, NetSpec, ParamLayout, Tape};
use mild::dyncheck::{
    convergence_gap, default_deltas, stability_ratio, test_suite, truncation_order, SlopeFit,
    STABILITY_TOLERANCE,
};
use mild::hsidata::{
    lmm_reconstruct, simplex_project, AbundanceStack, EndmemberSet, SequenceCube,
};
use mild::initbase::fcls_pixel;
use mild::metrics::{nrmse_a, nrmse_y};
use mild::mild::{objective_and_gradient, MildModel};
use mild::rng::Stream;
use mild::synthgen::{gen_library_spectra, generate, Preset, SynthSpec};

struct Outcome {
    label: &'static str,
    pass: bool,
    detail: String,
}

fn report(outcomes: &mut Vec<Outcome>, label: &'static str, pass: bool, detail: String) {
    println!(
        "criterion {:<2} {}: {}",
        outcomes.len() + 1,
        if pass { "PASS" } else { "FAIL" },
        format!("{label} — {detail}")
    );
    outcomes.push(Outcome {
        label,
        pass,
        detail,
    });
}

fn default_overrides() -> TrainOverrides {
    TrainOverrides {
        config: None,
        epochs: None,
        lr: None,
        alpha: None,
        beta: None,
        k: None,
        batch_pixels: None,
    }
}

fn pipeline(preset: PresetArg, seed: u64, dir: &std::path::Path) -> PipelineOutcome {
    run_pipeline(preset, seed, dir, &default_overrides()).expect("pipeline run")
}

#[test]
fn acceptance_criteria() {
    let mut outcomes = Vec::new();
    let scratch = tempfile::tempdir().expect("tempdir");

    // ----------------------------------------------------------------- 1
    // Table-I ordering on regenerated synth1 over three seeds, with the
    // soft NRMSE_A band and the runtime budget.
    let mut synth1_runs = Vec::new();
    {
        let start = Instant::now();
        let mut ordering = true;
        let mut soft_band = true;
        let mut detail = String::new();
        for seed in [1u64, 2, 3] {
            let out = pipeline(
                PresetArg::Synth1,
                seed,
                &scratch.path().join(format!("synth1-{seed}")),
            );
            ordering &= out.mild.nrmse_a < out.fcls.nrmse_a && out.mild.nrmse_y <= out.fcls.nrmse_y;
            soft_band &= out.mild.nrmse_a <= 0.40;
            detail.push_str(&format!(
                "seed {seed}: A {:.3} vs {:.3}, Y {:.3} vs {:.3}; ",
                out.mild.nrmse_a, out.fcls.nrmse_a, out.mild.nrmse_y, out.fcls.nrmse_y
            ));
            synth1_runs.push(out);
        }
        let elapsed = start.elapsed().as_secs_f64();
        let in_budget = elapsed <= 3.0 * 30.0 * 60.0;
        report(
            &mut outcomes,
            "synth1 ordering (mild < fcls)",
            ordering && soft_band && in_budget,
            format!("{detail}{elapsed:.0}s for 3 runs"),
        );
    }

    // ----------------------------------------------------------------- 2
    let mut synth2_runs = Vec::new();
    {
        let mut ordering = true;
        let mut detail = String::new();
        for seed in [1u64, 2, 3] {
            let out = pipeline(
                PresetArg::Synth2,
                seed,
                &scratch.path().join(format!("synth2-{seed}")),
            );
            ordering &= out.mild.nrmse_a < out.fcls.nrmse_a;
            detail.push_str(&format!(
                "seed {seed}: A {:.3} vs {:.3}; ",
                out.mild.nrmse_a, out.fcls.nrmse_a
            ));
            synth2_runs.push(out);
        }
        report(
            &mut outcomes,
            "synth2 ordering (mild < fcls)",
            ordering,
            detail,
        );
    }

    // ----------------------------------------------------------------- 3
    {
        let deltas = default_deltas();
        let mut pass = true;
        let mut detail = String::new();
        for name in ["linear-decay", "logistic"] {
            let dynamics = test_suite().into_iter().find(|d| d.name == name).unwrap();
            let order = truncation_order(&dynamics, &deltas).expect("order report");
            let ok = matches!(order.slope, SlopeFit::Slope(s) if (1.8..=2.2).contains(&s));
            detail.push_str(&format!("{name}: {:?}; ", order.slope));
            pass &= ok;
        }
        report(
            &mut outcomes,
            "truncation order slope in [1.8, 2.2]",
            pass,
            detail,
        );
    }

    // ----------------------------------------------------------------- 4
    {
        let deltas = default_deltas();
        let decay = test_suite()
            .into_iter()
            .find(|d| d.name == "linear-decay")
            .unwrap();
        let gaps: Vec<f64> = deltas.iter().map(|&d| convergence_gap(&decay, d)).collect();
        let monotone = gaps.windows(2).all(|w| w[1] < w[0]);
        let factors: Vec<f64> = gaps.windows(2).map(|w| w[0] / w[1]).collect();
        let factors_ok = factors.iter().all(|f| (1.7..=2.3).contains(f));
        let zero_ok = test_suite()
            .iter()
            .filter(|d| !d.has_g2)
            .all(|d| deltas.iter().all(|&delta| convergence_gap(d, delta) == 0.0));
        report(
            &mut outcomes,
            "convergence gap shrinks, zero without G2",
            monotone && factors_ok && zero_ok,
            format!("gaps {gaps:?}, factors {factors:?}, zero-G2 exact: {zero_ok}"),
        );
    }

    // ----------------------------------------------------------------- 5
    {
        let mut pass = true;
        let mut worst_margin = f64::NEG_INFINITY;
        for i in 0..10u64 {
            let spec = SynthSpec {
                preset: Preset::Custom,
                t_count: 5,
                height: 6,
                width: 6,
                bands: 12,
                endmember_count: 3,
                snr_db: Some(25.0),
                scale_range: (0.9, 1.1),
                mutation_times: vec![],
                seed: 2000 + i,
            };
            let (cube, _) = generate(&spec).unwrap();
            let model = MildModel::new(5, 12, 3, 2, 2000 + i).unwrap();
            let r = stability_ratio(&model, &cube, 1e-3, i).unwrap();
            pass &= r.ratio <= r.bound + STABILITY_TOLERANCE;
            worst_margin = worst_margin.max(r.ratio - r.bound);
        }
        // trained synth1 model from criterion 1
        let trained_path = scratch.path().join("synth1-1").join("model.mldp");
        let (trained, _) = mild::cli::load_model(&trained_path).expect("trained checkpoint");
        let probe = mild::hsidata::read_cube(scratch.path().join("synth1-1").join("cube.hsc"))
            .expect("probe cube");
        let r = stability_ratio(&trained, &probe, 1e-3, 17).unwrap();
        pass &= r.ratio <= r.bound + STABILITY_TOLERANCE;
        let trained_detail = format!("trained: ratio {:.4} <= bound {:.4}", r.ratio, r.bound);

        // exact unit ratio with zeroed fusion nets
        let mut zero_model = MildModel::new(5, 12, 3, 2, 3).unwrap();
        for t in 0..5 {
            let id = zero_model.fusion_id(t);
            let range = zero_model.params().layout().entry_range(id);
            zero_model.params_mut().values_mut()[range]
                .iter_mut()
                .for_each(|v| *v = 0.0);
        }
        let spec = SynthSpec {
            preset: Preset::Custom,
            t_count: 5,
            height: 6,
            width: 6,
            bands: 12,
            endmember_count: 3,
            snr_db: Some(25.0),
            scale_range: (0.9, 1.1),
            mutation_times: vec![],
            seed: 4,
        };
        let (cube, _) = generate(&spec).unwrap();
        let rz = stability_ratio(&zero_model, &cube, 1e-3, 9).unwrap();
        pass &= rz.ratio == 1.0;
        report(
            &mut outcomes,
            "stability ratio within sampled Lipschitz bound",
            pass,
            format!(
                "worst random-model margin {worst_margin:.2e}; {trained_detail}; zero-fusion ratio {}",
                rz.ratio
            ),
        );
    }

    // ----------------------------------------------------------------- 6
    {
        let l = 64;
        let p = 4;
        let endmembers = gen_library_spectra(p, l, 13).unwrap();
        let stream = Stream::new(55);
        let mut max_err = 0.0_f64;
        for n in 0..1000u64 {
            let raw: Vec<f64> = (0..p).map(|j| stream.f64_at(n * 17 + j as u64)).collect();
            let truth = simplex_project(&raw).unwrap();
            let mut y = vec![0.0; l];
            for (j, &aj) in truth.iter().enumerate() {
                for (band, v) in y.iter_mut().enumerate() {
                    *v += aj * endmembers[j * l + band];
                }
            }
            let est = fcls_pixel(&y, &endmembers, p).unwrap();
            for (a, b) in est.iter().zip(&truth) {
                max_err = max_err.max((a - b).abs());
            }
        }
        // grid-search oracle on a subsample, P = 3 for tractable enumeration
        let e3 = gen_library_spectra(3, 16, 9).unwrap();
        let objective = |y: &[f64], a: &[f64]| -> f64 {
            (0..16)
                .map(|band| {
                    let rec: f64 = a.iter().enumerate().map(|(j, &aj)| aj * e3[j * 16 + band]).sum();
                    (y[band] - rec) * (y[band] - rec)
                })
                .sum()
        };
        let mut grid_ok = true;
        let mut worst_gap = 0.0_f64;
        for case in 0..10u64 {
            let raw: Vec<f64> = (0..3).map(|j| stream.f64_at(90_000 + case * 11 + j as u64)).collect();
            let truth = simplex_project(&raw).unwrap();
            let mut y = vec![0.0; 16];
            for (j, &aj) in truth.iter().enumerate() {
                for (band, v) in y.iter_mut().enumerate() {
                    *v += aj * e3[j * 16 + band];
                }
            }
            // perturb so the optimum is interior-ish and nontrivial
            for (band, v) in y.iter_mut().enumerate() {
                *v += 0.005 * (stream.f64_at(95_000 + case * 16 + band as u64) - 0.5);
            }
            let est = fcls_pixel(&y, &e3, 3).unwrap();
            let res = 1000usize;
            let mut grid_best = f64::INFINITY;
            for i in 0..=res {
                for j in 0..=(res - i) {
                    let cand = [
                        i as f64 / res as f64,
                        j as f64 / res as f64,
                        (res - i - j) as f64 / res as f64,
                    ];
                    grid_best = grid_best.min(objective(&y, &cand));
                }
            }
            let fcls_obj = objective(&y, &est);
            let gap = grid_best - fcls_obj;
            grid_ok &= fcls_obj <= grid_best + 1e-9 && gap.abs() <= 1e-3;
            worst_gap = worst_gap.max(gap.abs());
        }
        report(
            &mut outcomes,
            "FCLS matches coefficients and grid oracle",
            max_err < 1e-5 && grid_ok,
            format!("max coefficient error {max_err:.2e}, worst grid objective gap {worst_gap:.2e}"),
        );
    }

    // ----------------------------------------------------------------- 7
    {
        // end-to-end gradient on a 4-pixel, T = 5, K = 1 instance
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
        let reference: Vec<f64> = (0..16).map(|i| 0.2 + 0.04 * (i % 7) as f64).collect();
        model.set_reference_endmembers(&reference).unwrap();
        for t in 0..5 {
            let id = model.perturbation_id(t);
            for (i, v) in model.params_mut().entry_values_mut(id).iter_mut().enumerate() {
                *v = 0.01 * ((i + t) % 5) as f64 - 0.02;
            }
        }
        let pixels: Vec<usize> = (0..4).collect();
        let mut grad = GradBuffer::zeros(model.params().layout());
        objective_and_gradient(&model, &cube, &pixels, 1.0, 0.1, &mut grad).unwrap();
        let h = 1e-5;
        let total = model.params().values().len();
        let stride = (total / 150).max(1);
        let mut worst_rel = 0.0_f64;
        for i in (0..total).step_by(stride) {
            let orig = model.params().values()[i];
            let mut scratch = GradBuffer::zeros(model.params().layout());
            model.params_mut().values_mut()[i] = orig + h;
            let up =
                objective_and_gradient(&model, &cube, &pixels, 1.0, 0.1, &mut scratch).unwrap();
            model.params_mut().values_mut()[i] = orig - h;
            let down =
                objective_and_gradient(&model, &cube, &pixels, 1.0, 0.1, &mut scratch).unwrap();
            model.params_mut().values_mut()[i] = orig;
            let fd = (up - down) / (2.0 * h);
            worst_rel = worst_rel.max((grad.values()[i] - fd).abs() / fd.abs().max(1e-3));
        }
        let end_to_end_ok = worst_rel < 1e-3;

        // unit gradients across >= 20 random nets
        let stream = Stream::new(2024);
        let mut nets_checked = 0;
        let mut unit_worst = 0.0_f64;
        for case in 0..24u64 {
            let hidden = 2 + stream.index_at(case * 5, 4);
            let input_w = 2 + stream.index_at(case * 5 + 1, 3);
            let output_w = 2 + stream.index_at(case * 5 + 2, 3);
            let head = if case % 2 == 0 { Head::Linear } else { Head::Softmax };
            let mut layout = ParamLayout::new();
            let net = layout.register_net(
                NetSpec::new(vec![input_w, hidden, output_w], head).unwrap(),
            );
            let mut params = init_params(&layout, 300 + case);
            for (i, v) in params.values_mut().iter_mut().enumerate() {
                if *v == 0.0 {
                    *v = 0.2 * (stream.f64_at(case * 1000 + i as u64) - 0.5);
                }
            }
            let x: Vec<f64> = (0..input_w)
                .map(|i| 2.0 * stream.f64_at(case * 77 + i as u64) - 1.0)
                .collect();
            let target: Vec<f64> = (0..output_w)
                .map(|i| stream.f64_at(case * 99 + i as u64))
                .collect();
            let mut tape = Tape::new();
            let input = tape.constant(&x);
            let out = tape.apply_net(&params, net, input).unwrap();
            let tgt = tape.constant(&target);
            let diff = tape.sub(out, tgt).unwrap();
            let loss = tape.sum_squares(diff);
            let mut g = GradBuffer::zeros(&layout);
            tape.backward(&params, &[(loss, 1.0)], &mut g).unwrap();
            let fd_loss = |params: &mild::diffkit::ModelParams| -> f64 {
                let y = forward(params, net, &x).unwrap();
                y.iter().zip(&target).map(|(a, b)| (a - b) * (a - b)).sum()
            };
            let hh = 1e-4;
            for i in 0..params.values().len() {
                let orig = params.values()[i];
                params.values_mut()[i] = orig + hh;
                let up = fd_loss(&params);
                params.values_mut()[i] = orig - hh;
                let down = fd_loss(&params);
                params.values_mut()[i] = orig;
                let fd = (up - down) / (2.0 * hh);
                unit_worst = unit_worst.max((g.values()[i] - fd).abs() / fd.abs().max(1.0));
            }
            nets_checked += 1;
        }
        let units_ok = nets_checked >= 20 && unit_worst < 1e-4;
        report(
            &mut outcomes,
            "reverse-mode gradients match finite differences",
            end_to_end_ok && units_ok,
            format!(
                "end-to-end worst rel {worst_rel:.2e}; {nets_checked} nets worst rel {unit_worst:.2e}"
            ),
        );
    }

    // ----------------------------------------------------------------- 8
    {
        let spec = SynthSpec {
            preset: Preset::Custom,
            t_count: 5,
            height: 5,
            width: 5,
            bands: 10,
            endmember_count: 3,
            snr_db: Some(30.0),
            scale_range: (0.9, 1.1),
            mutation_times: vec![2],
            seed: 21,
        };
        let (cube, _) = generate(&spec).unwrap();
        let mut model = MildModel::new(5, 10, 3, 2, 8).unwrap();
        for t in 0..5 {
            let id = model.fusion_id(t);
            let range = model.params().layout().entry_range(id);
            model.params_mut().values_mut()[range]
                .iter_mut()
                .for_each(|v| *v = 0.0);
        }
        let z = model.encode_all(&cube).unwrap();
        let a = model.infer_abundance(&cube).unwrap();
        let reduction_exact = z.values() == a.values();
        let r = stability_ratio(&model, &cube, 1e-3, 5).unwrap();
        report(
            &mut outcomes,
            "zero-fusion degenerate suite is bit-exact",
            reduction_exact && r.ratio == 1.0,
            format!("infer == encode: {reduction_exact}, stability ratio {}", r.ratio),
        );
    }

    // ----------------------------------------------------------------- 9
    {
        let stream = Stream::new(61);
        let mut worst = 0.0_f64;
        for case in 0..100u64 {
            let (t, n, p, l) = (2usize, 3usize, 2usize, 4usize);
            let truth_v: Vec<f64> = (0..t * n * p)
                .map(|i| 0.1 + stream.f64_at(case * 131 + i as u64))
                .collect();
            let est_v: Vec<f64> = (0..t * n * p)
                .map(|i| stream.f64_at(10_000 + case * 131 + i as u64))
                .collect();
            let truth = AbundanceStack::new(t, n, p, truth_v.clone()).unwrap();
            let est = AbundanceStack::new(t, n, p, est_v.clone()).unwrap();
            let mut acc = 0.0;
            for ti in 0..t {
                let mut num = 0.0;
                let mut den = 0.0;
                for ni in 0..n {
                    for pi in 0..p {
                        let idx = (ti * n + ni) * p + pi;
                        num += (truth_v[idx] - est_v[idx]) * (truth_v[idx] - est_v[idx]);
                        den += truth_v[idx] * truth_v[idx];
                    }
                }
                acc += num / den;
            }
            worst = worst.max((nrmse_a(&truth, &est).unwrap() - (acc / t as f64).sqrt()).abs());

            let e_ref: Vec<f64> = (0..p * l)
                .map(|i| 0.1 + stream.f64_at(20_000 + case * 131 + i as u64))
                .collect();
            let per_time: Vec<Vec<f64>> = (0..t)
                .map(|ti| {
                    (0..p * l)
                        .map(|i| 0.1 + stream.f64_at(30_000 + case * 131 + (ti * p * l + i) as u64))
                        .collect()
                })
                .collect();
            let y_v: Vec<f64> = (0..t * n * l)
                .map(|i| 0.2 + stream.f64_at(40_000 + case * 131 + i as u64))
                .collect();
            let e = EndmemberSet::new(p, l, e_ref, per_time.clone()).unwrap();
            let cube = SequenceCube::new(t, 1, n, l, y_v.clone()).unwrap();
            let mut acc = 0.0;
            for ti in 0..t {
                let mut frame = 0.0;
                for ni in 0..n {
                    let mut num = 0.0;
                    let mut den = 0.0;
                    for li in 0..l {
                        let mut rec = 0.0;
                        for pi in 0..p {
                            rec += est_v[(ti * n + ni) * p + pi] * per_time[ti][pi * l + li];
                        }
                        let y = y_v[(ti * n + ni) * l + li];
                        num += (y - rec) * (y - rec);
                        den += y * y;
                    }
                    frame += num / den;
                }
                acc += frame / n as f64;
            }
            worst = worst
                .max((nrmse_y(&cube, &est, &e).unwrap() - (acc / t as f64).sqrt()).abs());
        }
        report(
            &mut outcomes,
            "metrics match elementwise brute force",
            worst < 1e-12,
            format!("worst deviation {worst:.2e} over 100 instances"),
        );
    }

    // ----------------------------------------------------------------- 10
    {
        let overrides = TrainOverrides {
            epochs: Some(8),
            ..default_overrides()
        };
        let dir_a = scratch.path().join("det-a");
        let dir_b = scratch.path().join("det-b");
        run_pipeline(PresetArg::Synth1, 7, &dir_a, &overrides).expect("first run");
        run_pipeline(PresetArg::Synth1, 7, &dir_b, &overrides).expect("second run");
        let same = |name: &str| -> bool {
            std::fs::read(dir_a.join(name)).unwrap() == std::fs::read(dir_b.join(name)).unwrap()
        };
        let cube_same = same("cube.hsc");
        let ckpt_same = same("model.mldp");
        let csv_same = same("metrics.csv");
        report(
            &mut outcomes,
            "pipeline determinism (byte-identical outputs)",
            cube_same && ckpt_same && csv_same,
            format!("cube {cube_same}, checkpoint {ckpt_same}, metrics CSV {csv_same}"),
        );
    }

    // keep the synth runs' artifacts out of the final assertion path but
    // surface every line before failing
    let failures: Vec<&Outcome> = outcomes.iter().filter(|o| !o.pass).collect();
    for outcome in &outcomes {
        assert!(
            outcome.pass,
            "criterion failed: {} — {}",
            outcome.label, outcome.detail
        );
    }
    assert!(failures.is_empty());
    drop(synth1_runs);
    drop(synth2_runs);
}
