use std::path::Path;

use dplet::data_io::{
    aggregate_long_cdr, generate_synthetic, load_wide_csv, read_long_cdr, sample_channels, save_long_cdr,
    save_wide_csv, RawCdrRecord, SyntheticSpec,
};
use dplet::eval::{
    baselines, evaluate, format_ablation, format_params, prepare_experiment, report_params, run_ablation,
};
use dplet::kv::KvWriter;
use dplet::predictor::{model_forward, Checkpoint, Model};
use dplet::processing::TrafficMatrix;
use dplet::training::{train, TrainSchedule};
use dplet::tsvdr::{tsvdr_denoise_with_report, TruncationPolicy};
use dplet::{Error, Result};

use crate::config::RunConfig;
use crate::{
    AblateArgs, Cli, Command, Common, ConvertArgs, DataArgs, DenoiseArgs, EvaluateArgs, ModelOverrides,
    PredictArgs, SynthArgs, SynthFormat, TsvdrMode,
};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const REPORT_FILE: &str = "train_report.txt";

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load(cli.common.config.as_deref())?;
    let seed = cli.common.seed.or(cfg.seed).unwrap_or(0);
    let common = &cli.common;
    match &cli.command {
        Command::Denoise(a) => denoise(a, &cfg, common),
        Command::Synth(a) => synth(a, seed, common),
        Command::Convert(a) => convert(a, seed, common),
        Command::Train(a) => {
            apply(&mut cfg, &a.model);
            train_cmd(&a.data, &cfg, seed, common)
        }
        Command::Predict(a) => predict(a, common),
        Command::Evaluate(a) => evaluate_cmd(a, &cfg, common),
        Command::Ablate(a) => {
            apply(&mut cfg, &a.model);
            ablate(a, &cfg, seed, common)
        }
        Command::Params(o) => {
            apply(&mut cfg, o);
            params(&cfg, common)
        }
    }
}

fn apply(cfg: &mut RunConfig, o: &ModelOverrides) {
    if let Some(v) = o.variant {
        cfg.model = cfg.model.clone().with_variant(v);
    }
    if let Some(t) = o.horizon {
        cfg.model.horizon = t;
    }
    if let Some(l) = o.lookback {
        cfg.model.lookback = l;
    }
}

fn require_out<'a>(common: &'a Common, what: &str) -> Result<&'a Path> {
    common
        .out
        .as_deref()
        .ok_or_else(|| Error::Config(format!("{what} needs --out")))
}

fn load(d: &DataArgs) -> Result<TrafficMatrix> {
    let x = load_wide_csv(&d.data, d.step_seconds)?;
    log::info!(
        "{}: {} channels x {} steps",
        d.data.display(),
        x.channels(),
        x.len()
    );
    Ok(x)
}

/// Writes `w` to `--out` when given, otherwise to stdout.
fn emit(w: &KvWriter, common: &Common) -> Result<()> {
    match &common.out {
        Some(p) => w.write(p),
        None => {
            print!("{}", w.finish());
            Ok(())
        }
    }
}

fn denoise(a: &DenoiseArgs, cfg: &RunConfig, common: &Common) -> Result<()> {
    let out = require_out(common, "denoise")?;
    let policy = match (a.mode, a.threshold) {
        (Some(TsvdrMode::Absolute), Some(c)) => TruncationPolicy::Absolute(c),
        (_, Some(c)) => TruncationPolicy::Relative(c),
        (_, None) => cfg.model.truncation,
    };
    let x = load(&a.data)?;
    let (values, r) = tsvdr_denoise_with_report(&x.values, policy)?;
    let y = TrafficMatrix::new(values, x.channel_ids.clone(), x.step_seconds)?;
    save_wide_csv(&y, out, None)?;
    println!(
        "threshold {:.6e}: kept rank {} of {}, retained energy {:.6}, frobenius error {:.6e}",
        r.threshold, r.kept_rank, r.full_rank, r.retained_energy, r.frobenius_error
    );
    Ok(())
}

fn synth(a: &SynthArgs, seed: u64, common: &Common) -> Result<()> {
    let out = require_out(common, "synth")?;
    let spec = SyntheticSpec {
        channels: a.channels,
        steps: a.steps,
        period: a.period,
        baseline: a.baseline,
        daily_amplitude: a.daily_amplitude,
        weekly_multiplier: a.weekly_multiplier,
        channel_spread: a.channel_spread,
        burst_rate: a.burst_rate,
        burst_magnitude: a.burst_magnitude,
        burst_decay: a.burst_decay,
        noise_std: a.noise_std,
        step_seconds: a.step_seconds,
        seed,
    };
    let x = generate_synthetic(&spec)?;
    match a.format {
        SynthFormat::Wide => save_wide_csv(&x, out, a.start)?,
        SynthFormat::Long => {
            let t0 = a.start.unwrap_or(0);
            let step = a.step_seconds as i64;
            let records: Vec<RawCdrRecord> = (0..x.len())
                .flat_map(|t| {
                    let x = &x;
                    (0..x.channels()).map(move |c| RawCdrRecord {
                        timestamp: t0 + t as i64 * step,
                        grid_id: c as i64,
                        traffic: x.values.get(c, t),
                    })
                })
                .collect();
            save_long_cdr(&records, out)?;
        }
    }
    log::info!(
        "wrote {} channels x {} steps to {}",
        x.channels(),
        x.len(),
        out.display()
    );
    Ok(())
}

fn convert(a: &ConvertArgs, seed: u64, common: &Common) -> Result<()> {
    let out = require_out(common, "convert")?;
    let records = read_long_cdr(&a.input, &a.traffic_column)?;
    let mut x = aggregate_long_cdr(&records, a.interval)?;
    if let Some(n) = a.sample {
        x = sample_channels(&x, n, seed)?;
    }
    let step = a.interval as i64;
    let t0 = records
        .iter()
        .map(|r| r.timestamp)
        .min()
        .unwrap_or(0)
        .div_euclid(step)
        * step;
    save_wide_csv(&x, out, Some(t0))?;
    log::info!(
        "{} records -> {} channels x {} steps in {}",
        records.len(),
        x.channels(),
        x.len(),
        out.display()
    );
    Ok(())
}

fn train_cmd(d: &DataArgs, cfg: &RunConfig, seed: u64, common: &Common) -> Result<()> {
    let dir = require_out(common, "train")?;
    cfg.model.validate()?;
    cfg.schedule.validate()?;
    let series = load(d)?;
    let exp = prepare_experiment(&series, cfg.model.lookback, cfg.model.horizon, cfg.ratios)?;
    let mut model = Model::new(cfg.model.clone(), seed)?;
    let schedule = TrainSchedule {
        seed,
        ..cfg.schedule.clone()
    };
    let report = train(&mut model, &exp.train, &exp.val, &schedule)?;
    let metrics = evaluate(&model, &exp.test, &exp.scaler)?;

    std::fs::create_dir_all(dir)?;
    let ckpt = Checkpoint {
        model,
        scaler: Some(exp.scaler.clone()),
    };
    ckpt.save(&dir.join(CHECKPOINT_FILE))?;
    let mut w = KvWriter::new();
    w.comment("dplet training report");
    cfg.write_kv(&mut w);
    w.put("seed", seed)
        .put("split_hash", format!("{:016x}", exp.split_hash))
        .put("train_windows", exp.train.len())
        .put("val_windows", exp.val.len())
        .put("test_windows", exp.test.len());
    report.write_kv(&mut w);
    metrics.write_kv(&mut w, "test.");
    w.write(&dir.join(REPORT_FILE))?;
    println!(
        "{}: {} epochs ({}), best epoch {} val {:.6}, test mse {:.6} mae {:.6} (standardized)",
        cfg.model.variant,
        report.epochs(),
        report.stop_reason.name(),
        report.best_epoch,
        report.best_val_loss,
        metrics.mse,
        metrics.mae
    );
    Ok(())
}

fn predict(a: &PredictArgs, common: &Common) -> Result<()> {
    let out = require_out(common, "predict")?;
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let x = load(&a.data)?;
    let l = ckpt.model.config.lookback;
    if x.len() < l {
        return Err(Error::Data(format!("need at least {l} steps, found {}", x.len())));
    }
    let mut window = x.slice(x.len() - l, x.len());
    if let Some(s) = &ckpt.scaler {
        window.values = s.transform(&window.values)?;
    }
    let mut forecast = model_forward(&window, &ckpt.model)?;
    if let Some(s) = &ckpt.scaler {
        forecast.values = s.inverse(&forecast.values)?;
    }
    let y = TrafficMatrix::new(forecast.values, forecast.channel_ids, x.step_seconds)?;
    save_wide_csv(&y, out, None)?;
    log::info!(
        "wrote {} steps for {} channels to {}",
        y.len(),
        y.channels(),
        out.display()
    );
    Ok(())
}

fn evaluate_cmd(a: &EvaluateArgs, cfg: &RunConfig, common: &Common) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let c = &ckpt.model.config;
    let series = load(&a.data)?;
    let exp = prepare_experiment(&series, c.lookback, c.horizon, cfg.ratios)?;
    if ckpt.scaler.as_ref().is_some_and(|s| *s != exp.scaler) {
        log::warn!("the checkpoint was trained with a different scaler; scoring with the data's own");
    }
    let m = evaluate(&ckpt.model, &exp.test, &exp.scaler)?;
    let b = baselines(&exp.test)?;
    let mut w = KvWriter::new();
    w.comment("dplet evaluation report");
    w.put("split_hash", format!("{:016x}", exp.split_hash));
    m.write_kv(&mut w, "");
    w.float("baseline.persistence_mse", b.persistence_mse)
        .float("baseline.persistence_mae", b.persistence_mae)
        .float("baseline.mean_mse", b.mean_mse)
        .float("baseline.mean_mae", b.mean_mae);
    log::info!(
        "test mse {:.6} mae {:.6}; persistence mse {:.6}, train mean mse {:.6}",
        m.mse,
        m.mae,
        b.persistence_mse,
        b.mean_mse
    );
    emit(&w, common)
}

fn ablate(a: &AblateArgs, cfg: &RunConfig, seed: u64, common: &Common) -> Result<()> {
    cfg.model.validate()?;
    let series = load(&a.data)?;
    let rows = run_ablation(&series, &cfg.model, &cfg.schedule, cfg.ratios, seed)?;
    print!("{}", format_ablation(&rows));
    let mut w = KvWriter::new();
    w.comment("dplet ablation report");
    w.put("seed", seed)
        .put("horizon", cfg.model.horizon)
        .put("split_hash", format!("{:016x}", rows[0].split_hash));
    let mut failed = Vec::new();
    for (k, r) in rows.iter().enumerate() {
        let p = format!("row{k}.");
        w.put(&format!("{p}label"), r.label)
            .put(&format!("{p}param_count"), r.param_count);
        match &r.outcome {
            Ok((m, t)) => {
                m.write_kv(&mut w, &p);
                w.put(&format!("{p}epochs"), t.epochs());
            }
            Err(e) => {
                w.put(&format!("{p}error"), e.replace('\n', " "));
                failed.push(r.label);
            }
        }
    }
    if common.out.is_some() {
        emit(&w, common)?;
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Training(format!("variants failed: {}", failed.join(", "))))
    }
}

fn params(cfg: &RunConfig, common: &Common) -> Result<()> {
    cfg.model.validate()?;
    print!("{}", format_params(&cfg.model));
    if common.out.is_some() {
        let mut w = KvWriter::new();
        w.put("variant", cfg.model.variant)
            .put("horizon", cfg.model.horizon)
            .put("lookback", cfg.model.lookback);
        for (name, n) in report_params(&cfg.model) {
            w.put(&format!("params.{name}"), n);
        }
        emit(&w, common)?;
    }
    Ok(())
}
