//! Acceptance checks, one PASS/FAIL line per criterion.
//!
//! Run with `cargo test -p dplet --test acceptance`. The learning checks (7
//! and 8) train four default-size models and take roughly ten to fifteen
//! minutes on one core.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use dplet::data_io::{generate_synthetic, SyntheticSpec};
use dplet::enhancement::{LocalEnhancement, PatchEmbedding};
use dplet::eval::{baselines, prepare_experiment, run_variant, Experiment, MetricReport};
use dplet::kv::KvWriter;
use dplet::numerics::{Tape, Tensor};
use dplet::predictor::{
    count_params, param_breakdown, Checkpoint, Model, ModelConfig, ParamStore, Prepared, Variant,
};
use dplet::processing::{denormalize, normalize, pad_and_patch, padding_len, patch_count, TrafficMatrix};
use dplet::training::{
    chronological_split, make_windows, train, AdamConfig, StopReason, TrainSchedule, DEFAULT_RATIOS,
};
use dplet::tsvdr::{tsvdr_denoise_with_report, TruncationPolicy};
use dplet::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err(e: dplet::Error) -> String {
    e.to_string()
}

// Criterion 1

fn tiny_loss(model: &Model, prepared: &[Prepared], target: &Tensor, grad: bool) -> (f64, Vec<Vec<f64>>) {
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape, grad);
    let refs: Vec<&Prepared> = prepared.iter().collect();
    let y = model.forward(&mut tape, &bound, &refs, None).expect("forward");
    let t = tape.leaf(target.clone());
    let l = tape.mse_loss(y, t).expect("loss");
    let value = tape.value(l).item().expect("scalar loss");
    if !grad {
        return (value, Vec::new());
    }
    tape.backward(l).expect("backward");
    let grads = bound
        .vars()
        .iter()
        .map(|&v| tape.grad(v).map(|g| g.data().to_vec()).unwrap_or_default())
        .collect();
    (value, grads)
}

fn gradient_fidelity() -> Outcome {
    const H: f64 = 1e-5;
    let mut model = Model::new(ModelConfig::tiny(), 3).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = Matrix::from_fn(2, 16, |_, _| rng.random_range(0.0..10.0));
    let prepared = vec![model.prepare(&x).map_err(err)?];
    let target = Tensor::from_fn(&[2, 3], |_| rng.random_range(-1.0..1.0));
    let (_, grads) = tiny_loss(&model, &prepared, &target, true);
    let (mut worst, mut checked) = (0.0f64, 0usize);
    #[allow(clippy::needless_range_loop)]
    for p in 0..model.params.len() {
        let name = model.params.names()[p].clone();
        ensure(grads[p].len() == model.params.tensors()[p].numel(), || {
            format!("{name} has no gradient")
        })?;
        for k in 0..grads[p].len() {
            let orig = model.params.tensors()[p].data()[k];
            model.params.tensors_mut()[p].data_mut()[k] = orig + H;
            let up = tiny_loss(&model, &prepared, &target, false).0;
            model.params.tensors_mut()[p].data_mut()[k] = orig - H;
            let down = tiny_loss(&model, &prepared, &target, false).0;
            model.params.tensors_mut()[p].data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * H);
            let a = grads[p][k];
            // Entries below 1e-6 in magnitude are compared on an absolute scale.
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            ensure(rel <= 1e-4, || {
                format!("{name}[{k}]: analytic {a:e} vs numeric {numeric:e}")
            })?;
            worst = worst.max(rel);
            checked += 1;
        }
    }
    Ok(format!("{checked} parameters, max relative error {worst:.2e}"))
}

// Criterion 2

fn eckart_young() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    let mut truncated_total = 0usize;
    for case in 0..200 {
        let m = rng.random_range(1..=20);
        let l = rng.random_range(1..=50);
        let x = Matrix::from_fn(m, l, |_, _| rng.random_range(-5.0..5.0));
        let policy = if rng.random_bool(0.5) {
            TruncationPolicy::Relative(rng.random_range(0.0..1.0))
        } else {
            TruncationPolicy::Absolute(rng.random_range(0.0..15.0))
        };
        let (xr, report) = tsvdr_denoise_with_report(&x, policy).map_err(err)?;
        let residual = x.sub(&xr).map_err(err)?.frobenius().powi(2);
        let dropped: f64 = report
            .singular_values
            .iter()
            .filter(|&&s| s < report.threshold)
            .map(|s| s * s)
            .sum();
        truncated_total += report.full_rank - report.kept_rank;
        // When nothing is truncated the residual is pure rounding; the floor
        // keeps the comparison relative to the data's own energy.
        let floor = 1e-12 * x.frobenius().powi(2);
        let rel = (residual - dropped).abs() / dropped.max(floor);
        ensure(rel <= 1e-8, || {
            format!("case {case} ({m}x{l}, {policy:?}): residual {residual:e} vs dropped {dropped:e}")
        })?;
        worst = worst.max(rel);
    }
    Ok(format!(
        "200 matrices, {truncated_total} values truncated, max relative error {worst:.2e}"
    ))
}

// Criterion 3

/// Every window of `patch_len` at a multiple of `stride` that fits inside
/// the series extended by `stride` zeros.
fn brute_force_patches(series: &[f64], patch_len: usize, stride: usize) -> (Vec<Vec<f64>>, usize) {
    let len = series.len();
    let mut extended = series.to_vec();
    extended.extend(std::iter::repeat_n(0.0, stride));
    let patches: Vec<Vec<f64>> = (0..extended.len())
        .step_by(stride)
        .filter(|s| s + patch_len <= extended.len())
        .map(|s| extended[s..s + patch_len].to_vec())
        .collect();
    let last_end = (patches.len() - 1) * stride + patch_len;
    (patches, last_end - len)
}

fn patch_formula() -> Outcome {
    let mut checked = 0usize;
    for len in 1..=64usize {
        let series: Vec<f64> = (0..len).map(|t| (t + 1) as f64).collect();
        for patch_len in 1..=len {
            for stride in 1..=16usize {
                let (expected, pad) = brute_force_patches(&series, patch_len, stride);
                let n = patch_count(len, patch_len, stride).map_err(err)?;
                let p = padding_len(len, patch_len, stride).map_err(err)?;
                let got = pad_and_patch(&series, patch_len, stride).map_err(err)?;
                ensure(n == expected.len() && p == pad && got == expected, || {
                    format!(
                        "L={len} l={patch_len} S={stride}: count {n} vs {}, padding {p} vs {pad}",
                        expected.len()
                    )
                })?;
                checked += 1;
            }
        }
    }
    Ok(format!("{checked} geometries"))
}

// Criterion 4

fn reversibility() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut worst, mut constant) = (0.0f64, 0usize);
    for _ in 0..1000 {
        let len = rng.random_range(1..=600);
        let offset = rng.random_range(-500.0..500.0);
        let series: Vec<f64> = if rng.random_bool(0.1) {
            constant += 1;
            vec![offset; len]
        } else {
            let scale = 10f64.powf(rng.random_range(-3.0..2.5));
            (0..len)
                .map(|_| offset + scale * rng.random_range(-1.0..1.0))
                .collect()
        };
        let (z, mu, sigma) = normalize(&series).map_err(err)?;
        let back = denormalize(&z, mu, sigma);
        for (a, b) in back.iter().zip(&series) {
            worst = worst.max((a - b).abs());
        }
    }
    ensure(worst <= 1e-12, || format!("max abs error {worst:e}"))?;
    Ok(format!(
        "1000 channels ({constant} constant), max abs error {worst:.2e}"
    ))
}

// Criterion 5

fn causality_and_locality() -> Outcome {
    let c = ModelConfig::default();
    let emb = LocalEnhancement::from_config(&c);
    let store = ParamStore::init(&emb.param_specs(""), 5).map_err(err)?;
    let (n_tok, pl, d) = (c.num_patches(), c.patch_len, c.d_model);
    // two convolution stacks, each reaching back sum((k - 1) * dilation) tokens
    let reach = 2 * c
        .dilations
        .iter()
        .map(|&dl| (c.kernel_size - 1) * dl)
        .sum::<usize>();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Tensor::from_fn(&[1, n_tok, pl], |_| rng.random_range(-2.0..2.0));
    let run = |input: &Tensor| -> dplet::Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false);
        let v = tape.leaf(input.clone());
        let y = emb.embed(&mut tape, &bound, "", v)?;
        Ok(tape.value(y).data().to_vec())
    };
    let base = run(&x).map_err(err)?;
    for n in 0..n_tok {
        let mut y = x.clone();
        for k in 0..pl {
            y.data_mut()[n * pl + k] += 0.75;
        }
        let out = run(&y).map_err(err)?;
        for t in 0..n_tok {
            let same = base[t * d..(t + 1) * d] == out[t * d..(t + 1) * d];
            ensure(same == (t < n || t > n + reach), || {
                format!("token {t} after perturbing token {n}: unchanged = {same}")
            })?;
        }
    }

    let model = Model::new(c, 6).map_err(err)?;
    let m = 8;
    let x = Matrix::from_fn(m, model.config.lookback, |_, _| rng.random_range(0.0..20.0));
    let ids: Vec<String> = (0..m).map(|i| format!("c{i}")).collect();
    let base = model.forecast_denoised(&x, &ids).map_err(err)?;
    for j in 0..m {
        let mut y = x.clone();
        for t in (0..y.cols()).step_by(37) {
            y.set(j, t, y.get(j, t) + 5.0);
        }
        let out = model.forecast_denoised(&y, &ids).map_err(err)?;
        for i in 0..m {
            let same = out.values.row(i) == base.values.row(i);
            ensure(same == (i != j), || {
                format!("channel {i} after perturbing channel {j}: unchanged = {same}")
            })?;
        }
    }
    Ok(format!(
        "{n_tok} token perturbations (reach {reach}), {m} channel perturbations"
    ))
}

// Criterion 6

const REPORTED_BASE: usize = 1_847_128;

fn parameter_accounting() -> Outcome {
    for horizon in [72, 144] {
        for c in [ModelConfig::default(), ModelConfig::tiny()] {
            let c = ModelConfig { horizon, ..c };
            let base = count_params(&c);
            let seasonal = count_params(&c.clone().with_variant(Variant::Seasonal));
            ensure(seasonal == 2 * base, || {
                format!("T={horizon}: seasonal {seasonal} vs base {base}")
            })?;
            let parts: usize = param_breakdown(&c).iter().map(|(_, n)| n).sum();
            ensure(parts == base, || {
                format!("breakdown sums to {parts}, total {base}")
            })?;
        }
    }
    let total = count_params(&ModelConfig::default());
    let seasonal = count_params(&ModelConfig::default().with_variant(Variant::Seasonal));
    let dev = (total as f64 - REPORTED_BASE as f64) / REPORTED_BASE as f64;
    ensure(dev.abs() <= 0.30, || {
        format!(
            "default total {total} is {:+.1}% from {REPORTED_BASE}",
            dev * 100.0
        )
    })?;
    Ok(format!(
        "default {total} ({:+.1}% vs {REPORTED_BASE}), seasonal {seasonal}",
        dev * 100.0
    ))
}

// Criteria 7 and 8

/// The synthetic fixture: 8 channels, 20 days at 10-minute steps.
fn fixture() -> dplet::Result<TrafficMatrix> {
    generate_synthetic(&SyntheticSpec {
        channels: 8,
        steps: 20 * 144,
        period: 144,
        seed: 7,
        ..Default::default()
    })
}

/// Default model and optimizer. Every 8th training and validation window is
/// used and training is capped at 10 epochs so that the four trainings fit
/// the time budget on one core.
fn fixture_schedule() -> TrainSchedule {
    TrainSchedule {
        max_epochs: 10,
        train_stride: 8,
        val_stride: 8,
        ..Default::default()
    }
}

const FIXTURE_SEED: u64 = 7;

fn fit(exp: &Experiment, horizon: usize, variant: Variant) -> dplet::Result<MetricReport> {
    let config = ModelConfig {
        horizon,
        ..Default::default()
    }
    .with_variant(variant);
    let started = Instant::now();
    let (_, report, metrics) = run_variant(exp, &config, &fixture_schedule(), FIXTURE_SEED)?;
    println!(
        "    {variant} T={horizon}: {} epochs (best {}), train {:.4} -> {:.4}, test mse {:.4} mae {:.4} [{:.0?}]",
        report.epochs(),
        report.best_epoch,
        report.initial_train_loss,
        report.train_loss.last().copied().unwrap_or(f64::NAN),
        metrics.mse,
        metrics.mae,
        started.elapsed()
    );
    Ok(metrics)
}

struct Learning {
    outcome: Outcome,
    /// Experiment and full-variant test MSE at T = 144, reused by the
    /// ablation check.
    long: Option<(Experiment, f64)>,
}

fn learning_sanity(series: &TrafficMatrix) -> Learning {
    let mut lines = Vec::new();
    let mut failures = Vec::new();
    let mut long = None;
    for horizon in [72, 144] {
        let run = || -> dplet::Result<(Experiment, f64, f64, f64)> {
            let exp = prepare_experiment(series, 432, horizon, DEFAULT_RATIOS)?;
            let b = baselines(&exp.test)?;
            let m = fit(&exp, horizon, Variant::Full)?;
            Ok((exp, m.mse, b.persistence_mse, b.mean_mse))
        };
        match run() {
            Ok((exp, mse, pers, mean)) => {
                lines.push(format!(
                    "T={horizon}: {mse:.4} vs persistence {pers:.4}, mean {mean:.4}"
                ));
                if !(mse < pers && mse < mean) {
                    failures.push(format!(
                        "T={horizon}: {mse:.4} not below persistence {pers:.4} and mean {mean:.4}"
                    ));
                }
                if horizon == 144 {
                    long = Some((exp, mse));
                }
            }
            Err(e) => failures.push(format!("T={horizon}: {e}")),
        }
    }
    let outcome = if failures.is_empty() {
        Ok(lines.join("; "))
    } else {
        Err(failures.join("; "))
    };
    Learning { outcome, long }
}

fn ablation_ordering(long: Option<&(Experiment, f64)>) -> Outcome {
    let (exp, full) = long.ok_or("full variant at T=144 did not train")?;
    let dp = fit(exp, 144, Variant::DataProcessingOnly).map_err(err)?.mse;
    let le = fit(exp, 144, Variant::LocalEnhancementOnly).map_err(err)?.mse;
    let bound = dp.min(le) * 1.05;
    let detail = format!("full {full:.4}, data-processing-only {dp:.4}, local-enhancement-only {le:.4}");
    ensure(*full <= bound, || format!("{detail}; full exceeds {bound:.4}"))?;
    Ok(detail)
}

// Criterion 9

fn small_series() -> dplet::Result<TrafficMatrix> {
    generate_synthetic(&SyntheticSpec {
        channels: 3,
        steps: 400,
        period: 24,
        seed: 9,
        ..Default::default()
    })
}

fn protocol_fidelity() -> Outcome {
    let series = small_series().map_err(err)?;
    let all = make_windows(&series, 16, 3, 1).map_err(err)?;
    let [tr, va, _] = chronological_split(&all, DEFAULT_RATIOS).map_err(err)?;

    let frozen = TrainSchedule {
        adam: AdamConfig {
            lr: 0.0,
            ..Default::default()
        },
        ..Default::default()
    };
    let mut model = Model::new(ModelConfig::tiny(), 1).map_err(err)?;
    let r = train(&mut model, &tr, &va, &frozen).map_err(err)?;
    let constant = r.val_loss.windows(2).all(|w| w[0] == w[1]);
    ensure(constant, || "val loss changed with lr = 0".into())?;
    ensure(
        r.epochs() == 21 && r.stop_reason == StopReason::EarlyStop && r.best_epoch == 1,
        || {
            format!(
                "constant loss stopped at epoch {} ({}), best {}",
                r.epochs(),
                r.stop_reason.name(),
                r.best_epoch
            )
        },
    )?;

    let patient = TrainSchedule {
        patience: 1000,
        train_stride: 4,
        val_stride: 4,
        ..Default::default()
    };
    let mut model = Model::new(ModelConfig::tiny(), 1).map_err(err)?;
    let capped = train(&mut model, &tr, &va, &patient).map_err(err)?;
    ensure(
        capped.epochs() == 100 && capped.stop_reason == StopReason::MaxEpochs,
        || {
            format!(
                "cap: stopped at epoch {} ({})",
                capped.epochs(),
                capped.stop_reason.name()
            )
        },
    )?;
    Ok(format!(
        "constant loss stops at epoch {} (early_stop); patient run stops at {} (max_epochs)",
        r.epochs(),
        capped.epochs()
    ))
}

// Criterion 10

fn train_once() -> dplet::Result<(Vec<u8>, String)> {
    let series = small_series()?;
    let config = ModelConfig {
        dropout: 0.1,
        ..ModelConfig::tiny()
    };
    let exp = prepare_experiment(&series, config.lookback, config.horizon, DEFAULT_RATIOS)?;
    let schedule = TrainSchedule {
        max_epochs: 5,
        seed: 11,
        ..Default::default()
    };
    let mut model = Model::new(config, 11)?;
    let report = train(&mut model, &exp.train, &exp.val, &schedule)?;
    let mut w = KvWriter::new();
    report.write_kv(&mut w);
    let bytes = Checkpoint {
        model,
        scaler: Some(exp.scaler),
    }
    .to_bytes()?;
    Ok((bytes, w.finish()))
}

fn determinism() -> Outcome {
    let (a_ckpt, a_report) = train_once().map_err(err)?;
    let (b_ckpt, b_report) = train_once().map_err(err)?;
    ensure(a_ckpt == b_ckpt, || "checkpoints differ".into())?;
    ensure(a_report == b_report, || "reports differ".into())?;
    Ok(format!(
        "{} checkpoint bytes and {} report bytes identical",
        a_ckpt.len(),
        a_report.len()
    ))
}

fn report(id: usize, name: &str, outcome: &Outcome, elapsed: Duration) -> bool {
    match outcome {
        Ok(detail) => println!("criterion {id:>2} {name}: PASS ({detail}) [{elapsed:.1?}]"),
        Err(why) => println!("criterion {id:>2} {name}: FAIL ({why}) [{elapsed:.1?}]"),
    }
    outcome.is_ok()
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let started = Instant::now();
    let out = f();
    (out, started.elapsed())
}

type Check = (&'static str, fn() -> Outcome);

fn main() -> ExitCode {
    let quick: [Check; 6] = [
        ("gradient fidelity", gradient_fidelity),
        ("eckart-young identity", eckart_young),
        ("patch formula", patch_formula),
        ("reversibility", reversibility),
        ("causality and locality", causality_and_locality),
        ("parameter accounting", parameter_accounting),
    ];
    let mut passed = 0;
    for (i, (name, check)) in quick.iter().enumerate() {
        let (outcome, t) = timed(check);
        passed += usize::from(report(i + 1, name, &outcome, t));
    }

    let (learning, t) = timed(|| match fixture() {
        Ok(series) => learning_sanity(&series),
        Err(e) => Learning {
            outcome: Err(e.to_string()),
            long: None,
        },
    });
    passed += usize::from(report(7, "learning sanity", &learning.outcome, t));
    let (outcome, t) = timed(|| ablation_ordering(learning.long.as_ref()));
    passed += usize::from(report(8, "ablation ordering", &outcome, t));

    let (outcome, t) = timed(protocol_fidelity);
    passed += usize::from(report(9, "protocol fidelity", &outcome, t));
    let (outcome, t) = timed(determinism);
    passed += usize::from(report(10, "determinism", &outcome, t));

    println!("acceptance: {passed}/10 passed");
    if passed == 10 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
