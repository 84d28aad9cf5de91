//! Acceptance criteria. Each test prints one `criterion N: PASS|FAIL` line to
//! stderr (uncaptured) and then asserts.
//!
//! Criteria run one at a time so the runtime limits are measured without
//! contention from the others.

use std::io::Write;
use std::process::Command;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use convprior::decoder::{decoder_fit, DecoderState};
use convprior::dynamics::{linear_gd_iterate_oracle, linear_residual, linearization_gap, theory_params, SpectralSystem, TheoryParams};
use convprior::experiment::{
    equal_norm_noise, gen_noise, gen_signal, halving_iterations, iterations_to_threshold, run, DenoiseConfig, Experiment,
    ExperimentConfig, ModelSpec, NoiseModel, SignalLaw, SignalModel,
};
use convprior::generator::fit;
use convprior::jacobian::{concentration_gap_with, dense_eigensystem, initial_output_bound, initial_output_check, sigma_closed_form, svd_track};
use convprior::rng::{gaussian_vec, seeded};
use convprior::spectral::dual_kernel;
use convprior::{
    CirculantOperator, DecoderConfig, GdConfig, GeneratorConfig, GeneratorState, Kernel, KernelPreset, StoppingRule, TrigBasis, Variant,
};
use nalgebra::{DMatrix, DVector};
use rand::Rng as _;

static SERIAL: Mutex<()> = Mutex::new(());

fn report(id: usize, pass: bool, elapsed: Duration, limit: Option<Duration>, detail: &str) {
    let time = match limit {
        Some(l) => format!("{:.1}s (limit {}s)", elapsed.as_secs_f64(), l.as_secs()),
        None => format!("{:.1}s", elapsed.as_secs_f64()),
    };
    let line = format!("criterion {id}: {} [{time}] {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().lock().write_all(line.as_bytes());
}

fn finish(id: usize, ok: bool, start: Instant, limit: Option<Duration>, detail: String) {
    let elapsed = start.elapsed();
    let in_time = limit.map_or(true, |l| elapsed <= l);
    report(id, ok && in_time, elapsed, limit, &detail);
    assert!(ok, "criterion {id} failed: {detail}");
    assert!(in_time, "criterion {id} exceeded its runtime limit: {elapsed:?}");
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len() % 2 == 0 {
        0.5 * (s[m - 1] + s[m])
    } else {
        s[m]
    }
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn diff_norm(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn triangular(width: usize, n: usize) -> Kernel {
    Kernel::from_preset(&KernelPreset::Triangular { width }, n).unwrap()
}

#[test]
fn criterion_01_closed_form_matches_literal_descent() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let mut rng = seeded(1);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let n = rng.random_range(2..=64usize);
        let m = rng.random_range(1..=64usize);
        let tau = rng.random_range(0..=200usize);
        let j = DMatrix::from_vec(n, m, gaussian_vec(&mut rng, n * m, 1.0));
        let y = gaussian_vec(&mut rng, n, 1.0);
        let top = j.singular_values().max();
        let eta = rng.random_range(0.05..1.0) / (top * top);
        let sys = SpectralSystem::from_matrix(&j, eta).unwrap();
        let closed = linear_residual(&sys, &y, tau).unwrap();
        let literal = linear_gd_iterate_oracle(&j, &y, eta, tau).unwrap();
        worst = worst.max(diff_norm(&closed, &literal) / norm(&y));
    }
    finish(
        1,
        worst <= 1e-8,
        start,
        Some(Duration::from_secs(10)),
        format!("max relative gap {worst:.2e} over 50 instances (tol 1e-8)"),
    );
}

#[test]
fn criterion_02_dual_kernel_matches_dense_eigensystem() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let presets = [
        KernelPreset::Triangular { width: 3 },
        KernelPreset::Triangular { width: 15 },
        KernelPreset::Gaussian { std: 2.0 },
    ];
    let (mut worst_value, mut worst_residual) = (0.0f64, 0.0f64);
    let mut cases = 0;
    let mut skipped = Vec::new();
    for preset in &presets {
        for n in [8usize, 32, 64] {
            let Ok(kernel) = Kernel::from_preset(preset, n) else {
                // a width-15 hat does not fit in n = 8
                skipped.push(format!("{preset:?}@{n}"));
                continue;
            };
            cases += 1;
            let sigma = dual_kernel(&kernel).unwrap();
            let s = sigma_closed_form(&CirculantOperator::new(kernel)).unwrap();
            let dense = dense_eigensystem(&s).unwrap();
            let basis = TrigBasis::new(n).unwrap();
            let sq: Vec<f64> = sigma.sigma().iter().map(|v| v * v).collect();
            let top = sq.iter().cloned().fold(0.0, f64::max);
            let mut sorted = sq.clone();
            sorted.sort_by(|a, b| b.total_cmp(a));
            for (a, b) in dense.values.iter().zip(&sorted) {
                worst_value = worst_value.max((a - b).abs() / top);
            }
            for (i, lambda) in sq.iter().enumerate() {
                let w = DVector::from_vec(basis.vector(i + 1).unwrap());
                let r = s.matrix() * &w - &w * *lambda;
                worst_residual = worst_residual.max(r.norm() / top);
            }
        }
    }
    finish(
        2,
        worst_value <= 1e-8 && worst_residual <= 1e-8,
        start,
        Some(Duration::from_secs(10)),
        format!(
            "{cases} cases, eigenvalue gap {worst_value:.2e}, trig residual {worst_residual:.2e} (both relative to sigma_1^2, tol 1e-8); skipped {skipped:?}"
        ),
    );
}

fn generator_fd_error(seed: u64) -> Option<f64> {
    let cfg = GeneratorConfig {
        k: 8,
        kernel: triangular(5, 16),
        omega: 1.0,
        seed,
    };
    let state = GeneratorState::init(&cfg).unwrap();
    if state.pre_activations().iter().map(|v| v.abs()).fold(f64::INFINITY, f64::min) < 1e-3 {
        return None;
    }
    let y: Vec<f64> = gaussian_vec(&mut seeded(seed ^ 0xabc), 16, 1.0);
    let grad = state.gradient(&y).unwrap();
    let h = 1e-6;
    let mut fd = DMatrix::zeros(grad.nrows(), grad.ncols());
    for idx in 0..grad.len() {
        let mut plus = state.clone();
        plus.weights_mut()[idx] += h;
        let mut minus = state.clone();
        minus.weights_mut()[idx] -= h;
        fd[idx] = (plus.loss(&y).unwrap() - minus.loss(&y).unwrap()) / (2.0 * h);
    }
    Some((&fd - &grad).norm() / grad.norm())
}

fn decoder_fd_error(seed: u64, variant: Variant) -> Option<f64> {
    let cfg = DecoderConfig::new(2, 4, 32, variant, seed);
    let state = DecoderState::init(&cfg).unwrap();
    if state.min_abs_preactivation() < 1e-3 {
        return None;
    }
    let y = gaussian_vec(&mut seeded(seed ^ 0xdef), 32, 1.0);
    let grad = state.gradient(&y).unwrap();
    let theta = state.params();
    let h = 1e-5;
    let mut probe = state.clone();
    let mut err = 0.0;
    for i in 0..theta.len() {
        let mut t = theta.clone();
        t[i] += h;
        probe.set_params(&t).unwrap();
        let up = probe.loss(&y).unwrap();
        t[i] -= 2.0 * h;
        probe.set_params(&t).unwrap();
        let down = probe.loss(&y).unwrap();
        err += ((up - down) / (2.0 * h) - grad[i]).powi(2);
    }
    Some(err.sqrt() / norm(&grad))
}

#[test]
fn criterion_03_gradients_match_finite_differences() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let variants = [
        Variant::BilinearUpsample,
        Variant::FixedKernelNoUpsample,
        Variant::LearnedConv,
        Variant::LearnedDeconv,
    ];
    let (mut gen_worst, mut dec_worst) = (0.0f64, 0.0f64);
    let (mut gen_done, mut dec_done) = (0, 0);
    let mut seed = 0u64;
    while (gen_done < 20 || dec_done < 20) && seed < 1000 {
        if gen_done < 20 {
            if let Some(e) = generator_fd_error(seed) {
                gen_worst = gen_worst.max(e);
                gen_done += 1;
            }
        }
        if dec_done < 20 {
            if let Some(e) = decoder_fd_error(seed, variants[dec_done % 4]) {
                dec_worst = dec_worst.max(e);
                dec_done += 1;
            }
        }
        seed += 1;
    }
    finish(
        3,
        gen_done == 20 && dec_done == 20 && gen_worst <= 1e-4 && dec_worst <= 1e-3,
        start,
        Some(Duration::from_secs(30)),
        format!(
            "generator max rel err {gen_worst:.2e} (tol 1e-4, {gen_done} instances), decoder {dec_worst:.2e} (tol 1e-3, {dec_done} instances)"
        ),
    );
}

#[test]
fn criterion_04_concentration_gap_shrinks_with_width() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let n = 32;
    let kernel = triangular(5, n);
    let sigma = sigma_closed_form(&CirculantOperator::new(kernel.clone())).unwrap();
    let mut medians = Vec::new();
    let (mut within, mut total) = (0, 0);
    for k in [64usize, 256, 1024, 4096] {
        let gaps: Vec<f64> = (0..20)
            .map(|seed| {
                let cfg = GeneratorConfig {
                    k,
                    kernel: kernel.clone(),
                    omega: 1.0,
                    seed,
                };
                let g = concentration_gap_with(&GeneratorState::init(&cfg).unwrap(), &sigma, 0.05).unwrap();
                total += 1;
                if g.gap <= g.bound {
                    within += 1;
                }
                g.gap
            })
            .collect();
        medians.push(median(&gaps));
    }
    let ratios: Vec<f64> = medians.windows(2).map(|w| w[1] / w[0]).collect();
    let frac = within as f64 / total as f64;
    let ok = ratios.iter().all(|r| (0.3..=0.8).contains(r)) && frac >= 0.95;
    finish(
        4,
        ok,
        start,
        Some(Duration::from_secs(300)),
        format!("median gaps {medians:.3?}, successive ratios {ratios:.3?} (need [0.3, 0.8]), within bound {frac:.3} (need >= 0.95)"),
    );
}

fn gap_params(n: usize, k: usize, beta: f64, eta: f64, y_norm: f64) -> TheoryParams {
    let delta = 0.05;
    theory_params(n, k, TheoryParams::max_xi(n, delta), delta, 1e-3 * beta, beta, eta, 200, y_norm, None).unwrap()
}

#[test]
fn criterion_05_linearization_gap_shrinks_with_width() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let (n, p, tau) = (32, 4, 200);
    let kernel = triangular(5, n);
    let beta = CirculantOperator::new(kernel.clone()).operator_norm();
    let eta = 1.0 / (beta * beta);
    let sys = SpectralSystem::trig(&dual_kernel(&kernel).unwrap(), eta).unwrap();
    let mut medians = Vec::new();
    for k in [128usize, 512, 2048] {
        let rel: Vec<f64> = (0..10u64)
            .map(|seed| {
                let mut rng = seeded(seed);
                let x = gen_signal(&SignalModel { n, p, law: SignalLaw::UnitNormInSpan }, &mut rng).unwrap();
                let z = gen_noise(&NoiseModel { varsigma: 0.5 }, n, &mut rng).unwrap();
                let y: Vec<f64> = x.iter().zip(&z).map(|(a, b)| a + b).collect();
                let cfg = GeneratorConfig {
                    k,
                    kernel: kernel.clone(),
                    omega: GeneratorConfig::default_omega(norm(&y), n, beta),
                    seed: seed.rotate_left(32) ^ 0x5eed,
                };
                let state = GeneratorState::init(&cfg).unwrap();
                let g0 = state.forward().unwrap();
                let r0: Vec<f64> = y.iter().zip(&g0).map(|(a, b)| a - b).collect();
                let gd = GdConfig {
                    eta,
                    max_iters: tau,
                    record_spectrum: true,
                };
                let out = fit(&state, &y, &gd, &StoppingRule::Fixed(tau), None).unwrap();
                let gap = linearization_gap(&out.trace, &sys, &gap_params(n, k, beta, eta, norm(&y)), &r0).unwrap();
                gap.max_gap() / norm(&r0)
            })
            .collect();
        medians.push(median(&rel));
    }
    let ok = medians.windows(2).all(|w| w[1] < w[0]);
    finish(
        5,
        ok,
        start,
        Some(Duration::from_secs(300)),
        format!("median max gap / ||r0|| at k = 128, 512, 2048: {medians:.4?} (need strictly decreasing)"),
    );
}

#[test]
fn criterion_06_early_stopping_denoises() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let (n, p) = (256, 8);
    let cfg = ExperimentConfig {
        schema_version: 1,
        seed: 0,
        repetitions: 10,
        experiment: Experiment::Denoise(DenoiseConfig {
            signal: SignalModel { n, p, law: SignalLaw::UnitNormInSpan },
            noise: NoiseModel { varsigma: 1.0 },
            kernel: KernelPreset::Triangular { width: 15 },
            k: 2048,
            eta: None,
            max_iters: 400,
            omega: None,
            init_scale: 1.0,
        }),
    };
    let result = run(&cfg).unwrap();
    let stop = result.median_mse_stop.unwrap();
    let conv = result.median_mse_converged.unwrap();
    let limit = 4.0 * (2.0 * p as f64 / n as f64);
    let oracle = match &result.per_seed {
        convprior::experiment::PerSeed::Denoise(rows) => median(&rows.iter().map(|r| r.mse_oracle).collect::<Vec<_>>()),
        _ => f64::NAN,
    };
    let taus = match &result.per_seed {
        convprior::experiment::PerSeed::Denoise(rows) => rows.iter().map(|r| r.stop_iter).collect::<Vec<_>>(),
        _ => Vec::new(),
    };
    finish(
        6,
        stop <= limit && stop <= 0.2 * conv,
        start,
        Some(Duration::from_secs(600)),
        format!(
            "median ||G - x||^2 at stop {stop:.4} (need <= {limit} and <= 0.2 x converged {conv:.4}); stop iterations {taus:?}; median oracle-best {oracle:.4}"
        ),
    );
}

#[test]
fn criterion_07_low_frequencies_fit_first() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let (n, k, omega, cap) = (256, 1024, 1e-3, 2000);
    let preset = KernelPreset::Triangular { width: 15 };
    let beta = CirculantOperator::new(Kernel::from_preset(&preset, n).unwrap()).operator_norm();
    let eta = 1.0 / (beta * beta);
    let indices = [1usize, 8, 20, 32];
    let runs: Vec<_> = (0..5u64)
        .map(|seed| halving_iterations(&preset, n, k, omega, eta, &indices, cap, seed).unwrap())
        .collect();
    // unfinished runs count as infinitely slow
    let mut rows: Vec<(f64, usize, f64)> = (0..indices.len())
        .map(|j| {
            let iters: Vec<f64> = runs.iter().map(|r| r[j].iters.map_or(f64::INFINITY, |t| t as f64)).collect();
            (runs[0][j].sigma, indices[j], median(&iters))
        })
        .collect();
    rows.sort_by(|a, b| b.0.total_cmp(&a.0));
    let ok = rows.windows(2).all(|w| w[1].2 >= w[0].2);
    let shown: Vec<String> = rows.iter().map(|(s, i, t)| format!("w{i} sigma {s:.3} -> {t}")).collect();
    finish(
        7,
        ok,
        start,
        Some(Duration::from_secs(300)),
        format!("median halving iterations by decreasing sigma: {} (need non-decreasing)", shown.join(", ")),
    );
}

fn structure_vs_noise_ratio(config: &DecoderConfig, eta: f64) -> (f64, Vec<(usize, usize)>) {
    let n = config.n_out;
    let model = ModelSpec::Decoder { config: config.clone() };
    let mut ratios = Vec::new();
    let mut iters = Vec::new();
    for seed in 0..5u64 {
        let mut rng = seeded(seed);
        let step = gen_signal(&SignalModel { n, p: 0, law: SignalLaw::StepFunction { low: -1.0, high: 1.0 } }, &mut rng).unwrap();
        let noise = equal_norm_noise(&step, &mut rng);
        let a = iterations_to_threshold(&model, &step, eta, 20_000, 0.01, seed).unwrap();
        let b = iterations_to_threshold(&model, &noise, eta, 20_000, 0.01, seed).unwrap();
        assert!(a.reached, "step target did not reach the threshold");
        ratios.push(b.iters as f64 / a.iters as f64);
        iters.push((a.iters, b.iters));
    }
    (median(&ratios), iters)
}

#[test]
fn criterion_08_structure_fits_faster_than_noise() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let eta = 1e-3;
    let fixed = DecoderConfig::new(2, 64, 256, Variant::FixedKernelNoUpsample, 0);
    let learned = DecoderConfig::new(2, 26, 256, Variant::LearnedConv, 0);
    let (fixed_ratio, fixed_iters) = structure_vs_noise_ratio(&fixed, eta);
    let (learned_ratio, learned_iters) = structure_vs_noise_ratio(&learned, eta);
    finish(
        8,
        fixed_ratio >= 5.0 && learned_ratio < fixed_ratio,
        start,
        Some(Duration::from_secs(600)),
        format!(
            "fixed-kernel noise/step ratio {fixed_ratio:.2} (need >= 5) iters {fixed_iters:?}; learned-conv ({:.2}x params) ratio {learned_ratio:.2} (need < fixed) iters {learned_iters:?}",
            learned.overparameterization()
        ),
    );
}

#[test]
fn criterion_09_decoder_jacobian_is_low_frequency_and_stable() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let n = 512;
    let cfg = DecoderConfig::new(4, 64, n, Variant::BilinearUpsample, 0);
    let s0 = DecoderState::init(&cfg).unwrap();
    let y: Vec<f64> = (0..n).map(|t| if t < n / 2 { -1.0 } else { 1.0 }).collect();
    let gd = GdConfig {
        eta: 1e-5,
        max_iters: 50,
        record_spectrum: false,
    };
    let s1 = decoder_fit(&s0, &y, &gd, &StoppingRule::Fixed(1), None).unwrap().state;
    let s50 = decoder_fit(&s0, &y, &gd, &StoppingRule::Fixed(50), None).unwrap().state;
    let track = svd_track(&[(0, &s0), (1, &s1), (50, &s50)], 5).unwrap();
    let basis = TrigBasis::new(n).unwrap();
    let init: Vec<(usize, f64)> = track[0].best_trig.iter().map(|&(i, c)| (basis.frequency(i), c)).collect();
    let low_ok = init.iter().all(|&(f, c)| f <= 20 && c >= 0.6);
    let stability = track[1].correlations_with(&track[2]);
    let stable_ok = stability.iter().all(|&c| c >= 0.6);
    finish(
        9,
        low_ok && stable_ok,
        start,
        Some(Duration::from_secs(600)),
        format!(
            "init top-5 (frequency, best trig correlation) {init:.3?} (need frequency <= 20 and >= 0.6); checkpoint 1 vs 50 correlations {stability:.3?} (need >= 0.6)"
        ),
    );
}

#[test]
fn criterion_10_initial_output_bound_holds() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let cfg = GeneratorConfig {
        k: 128,
        kernel: triangular(15, 64),
        omega: 1.0,
        seed: 0,
    };
    let frac = initial_output_check(&cfg, 200, 0.05).unwrap();
    finish(
        10,
        frac >= 0.95,
        start,
        Some(Duration::from_secs(30)),
        format!("{frac:.3} of 200 draws within {:.3} (need >= 0.95)", initial_output_bound(&cfg, 0.05)),
    );
}

fn cli(args: &[&str]) -> std::process::Output {
    let out = Command::new(env!("CARGO_BIN_EXE_convprior")).args(args).output().unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

/// All `.csv` files under `dir`, sorted by name.
fn csv_files(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn criterion_11_cli_is_deterministic() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("denoise.json");
    std::fs::write(
        &config,
        r#"{"schema_version":1,"seed":3,"repetitions":2,"experiment":{"kind":"denoise",
            "signal":{"n":32,"p":2,"law":{"law":"unit_norm_in_span"}},"noise":{"varsigma":0.5},
            "kernel":{"kind":"triangular","width":5},"k":64,"max_iters":40}}"#,
    )
    .unwrap();
    let config = config.to_string_lossy().into_owned();
    let runs: Vec<Vec<&str>> = vec![
        vec!["dual-kernel", "--kernel", "gaussian", "--std", "2", "--n", "64"],
        vec!["dynamics", "--n", "32", "--k", "64", "--indices", "1,4,8", "--max-iters", "200"],
        vec!["jacobian", "--n", "16", "--k", "32", "--trials", "20"],
        vec!["decoder", "--d", "2", "--k", "8", "--n", "32", "--iters", "5", "--top-s", "3"],
        vec!["denoise", "--config", &config],
        vec!["report", "--n", "32"],
    ];
    let mut mismatched = Vec::new();
    for args in &runs {
        let mut captured = Vec::new();
        for attempt in 0..2 {
            let dir = tmp.path().join(format!("{}-{attempt}", args[0]));
            let dir = dir.to_string_lossy().into_owned();
            let mut full: Vec<&str> = args.clone();
            full.extend(["--seed", "7", "--out", &dir]);
            let out = cli(&full);
            captured.push((out.stdout, csv_files(std::path::Path::new(&dir))));
        }
        if captured[0] != captured[1] || captured[0].1.is_empty() {
            mismatched.push(args[0]);
        }
    }
    finish(
        11,
        mismatched.is_empty(),
        start,
        None,
        format!("{} subcommands run twice with --seed 7; differing CSV output: {mismatched:?}", runs.len()),
    );
}
