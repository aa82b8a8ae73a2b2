//! Metrics, dataset standardization, baselines, ablation and parameter
//! reports.
//!
//! ```
//! use dplet::eval::{mae, mse};
//! use dplet::Matrix;
//!
//! let y = Matrix::from_rows(&[[0.0, 4.0]])?;
//! let p = Matrix::from_rows(&[[0.0, 0.0]])?;
//! assert_eq!(mse(&y, &p)?, 8.0);
//! assert_eq!(mae(&y, &p)?, 2.0);
//! # Ok::<(), dplet::Error>(())
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kv::KvWriter;
use crate::matrix::Matrix;
use crate::predictor::{count_params, param_breakdown, Model, ModelConfig, Variant};
use crate::processing::{TrafficMatrix, NORM_EPS};
use crate::training::{chronological_split, make_windows, train, TrainReport, TrainSchedule, WindowDataset};

fn check_shapes(y: &Matrix, p: &Matrix) -> Result<()> {
    if y.shape() != p.shape() {
        let (a, b) = (y.shape(), p.shape());
        return Err(Error::shape("metric", &[a.0, a.1], &[b.0, b.1]));
    }
    if y.data().is_empty() {
        return Err(Error::Data("metric of an empty matrix".into()));
    }
    Ok(())
}

/// Mean squared error over all entries.
pub fn mse(y: &Matrix, pred: &Matrix) -> Result<f64> {
    check_shapes(y, pred)?;
    let s: f64 = y
        .data()
        .iter()
        .zip(pred.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(s / y.data().len() as f64)
}

/// Mean absolute error over all entries.
pub fn mae(y: &Matrix, pred: &Matrix) -> Result<f64> {
    check_shapes(y, pred)?;
    let s: f64 = y.data().iter().zip(pred.data()).map(|(a, b)| (a - b).abs()).sum();
    Ok(s / y.data().len() as f64)
}

/// `(mse, mae)` over every entry of a list of equally shaped windows.
pub fn pooled_errors(ys: &[Matrix], preds: &[Matrix]) -> Result<(f64, f64)> {
    if ys.len() != preds.len() || ys.is_empty() {
        return Err(Error::shape("pooled_errors", &[ys.len()], &[preds.len()]));
    }
    let (mut se, mut ae, mut n) = (0.0, 0.0, 0usize);
    for (y, p) in ys.iter().zip(preds) {
        check_shapes(y, p)?;
        for (a, b) in y.data().iter().zip(p.data()) {
            se += (a - b) * (a - b);
            ae += (a - b).abs();
        }
        n += y.data().len();
    }
    Ok((se / n as f64, ae / n as f64))
}

/// Per-channel z-scoring with statistics from a training span.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    /// Population standard deviation, floored at [`NORM_EPS`].
    pub std: Vec<f64>,
}

impl Scaler {
    /// Fits on `x` (channels in rows).
    pub fn fit(x: &Matrix) -> Result<Self> {
        if x.cols() == 0 {
            return Err(Error::Data("cannot fit a scaler on an empty span".into()));
        }
        let n = x.cols() as f64;
        let mut mean = Vec::with_capacity(x.rows());
        let mut std = Vec::with_capacity(x.rows());
        for i in 0..x.rows() {
            let r = x.row(i);
            let m = r.iter().sum::<f64>() / n;
            let s = (r.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
            if s < NORM_EPS {
                log::warn!("channel {i} has zero variance in the training span");
            }
            mean.push(m);
            std.push(s.max(NORM_EPS));
        }
        Ok(Scaler { mean, std })
    }

    fn check(&self, x: &Matrix) -> Result<()> {
        if x.rows() != self.mean.len() {
            return Err(Error::shape("scaler", &[x.rows()], &[self.mean.len()]));
        }
        Ok(())
    }

    pub fn transform(&self, x: &Matrix) -> Result<Matrix> {
        self.check(x)?;
        Ok(Matrix::from_fn(x.rows(), x.cols(), |i, j| {
            (x.get(i, j) - self.mean[i]) / self.std[i]
        }))
    }

    pub fn inverse(&self, x: &Matrix) -> Result<Matrix> {
        self.check(x)?;
        Ok(Matrix::from_fn(x.rows(), x.cols(), |i, j| {
            x.get(i, j) * self.std[i] + self.mean[i]
        }))
    }
}

/// Fits a scaler on `train` and applies it to every matrix in `all`.
pub fn standardize_for_eval(train: &Matrix, all: &[&Matrix]) -> Result<(Vec<Matrix>, Scaler)> {
    let s = Scaler::fit(train)?;
    let out = all.iter().map(|m| s.transform(m)).collect::<Result<_>>()?;
    Ok((out, s))
}

/// Repeats the last observed value of each channel across the horizon.
pub fn persistence_forecast(input: &Matrix, horizon: usize) -> Matrix {
    Matrix::from_fn(input.rows(), horizon, |i, _| input.get(i, input.cols() - 1))
}

/// Predicts each channel's training mean, which is zero once standardized.
pub fn train_mean_forecast(channels: usize, horizon: usize) -> Matrix {
    Matrix::zeros(channels, horizon)
}

/// Test metrics of one trained variant.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub variant: String,
    pub horizon: usize,
    pub num_samples: usize,
    pub mse: f64,
    pub mae: f64,
    pub raw_mse: f64,
    pub raw_mae: f64,
    pub param_count: usize,
    pub seed: u64,
}

impl MetricReport {
    pub fn write_kv(&self, w: &mut KvWriter, prefix: &str) {
        w.put(&format!("{prefix}variant"), &self.variant)
            .put(&format!("{prefix}horizon"), self.horizon)
            .put(&format!("{prefix}num_samples"), self.num_samples)
            .put(&format!("{prefix}scale"), "standardized")
            .float(&format!("{prefix}mse"), self.mse)
            .float(&format!("{prefix}mae"), self.mae)
            .float(&format!("{prefix}raw_mse"), self.raw_mse)
            .float(&format!("{prefix}raw_mae"), self.raw_mae)
            .put(&format!("{prefix}param_count"), self.param_count)
            .put(&format!("{prefix}seed"), self.seed);
    }
}

/// Per-module and total parameter counts as report lines.
pub fn report_params(c: &ModelConfig) -> Vec<(String, usize)> {
    let mut rows = param_breakdown(c);
    rows.push(("total".into(), count_params(c)));
    rows
}

/// Fixed-width table of parameter counts.
pub fn format_params(c: &ModelConfig) -> String {
    let mut s = format!("parameters ({} variant)\n", c.variant);
    for (name, n) in report_params(c) {
        s.push_str(&format!("  {name:<20} {n:>12}\n"));
    }
    s
}

/// Per-channel training-span statistics used when the scaler is stored.
pub fn fit_on_span(x: &TrafficMatrix, end: usize) -> Result<Scaler> {
    Scaler::fit(&x.values.columns(0, end.min(x.len())))
}

/// Standardized train/validation/test windows sharing one scaler.
///
/// Windows are cut every step, split chronologically, and the scaler is fit
/// on the time span covered by the training windows. Test windows are then
/// thinned to every `T`-th one so that their targets do not overlap.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub train: WindowDataset,
    pub val: WindowDataset,
    pub test: WindowDataset,
    pub scaler: Scaler,
    pub split_hash: u64,
}

pub fn prepare_experiment(
    series: &TrafficMatrix,
    lookback: usize,
    horizon: usize,
    ratios: [f64; 3],
) -> Result<Experiment> {
    let all = make_windows(series, lookback, horizon, 1)?;
    let [train_raw, val_raw, test_raw] = chronological_split(&all, ratios)?;
    let scaler = fit_on_span(series, train_raw.end())?;
    let tf = |m: &Matrix| scaler.transform(m);
    let train = train_raw.map_values(tf)?;
    let val = val_raw.map_values(tf)?;
    let test = test_raw.subsample(horizon).map_values(tf)?;
    let split_hash = hash_starts(&[&train, &val, &test]);
    Ok(Experiment {
        train,
        val,
        test,
        scaler,
        split_hash,
    })
}

/// FNV-1a over the window offsets of every split.
pub fn hash_starts(sets: &[&WindowDataset]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for (k, ds) in sets.iter().enumerate() {
        for v in std::iter::once(k).chain(ds.starts()) {
            for b in (v as u64).to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
    }
    h
}

/// Test metrics on the standardized scale and, through `scaler`, on the raw
/// scale.
pub fn evaluate(model: &Model, test: &WindowDataset, scaler: &Scaler) -> Result<MetricReport> {
    let preds = model.predict_windows(&test.inputs(), 8)?;
    let targets = test.targets();
    let (mse, mae) = pooled_errors(&targets, &preds)?;
    let raw_t = targets
        .iter()
        .map(|m| scaler.inverse(m))
        .collect::<Result<Vec<_>>>()?;
    let raw_p = preds
        .iter()
        .map(|m| scaler.inverse(m))
        .collect::<Result<Vec<_>>>()?;
    let (raw_mse, raw_mae) = pooled_errors(&raw_t, &raw_p)?;
    Ok(MetricReport {
        variant: model.config.variant.name().to_string(),
        horizon: model.config.horizon,
        num_samples: test.len(),
        mse,
        mae,
        raw_mse,
        raw_mae,
        param_count: model.count_params(),
        seed: model.seed,
    })
}

/// Standardized test errors of the persistence and train-mean forecasts.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Baselines {
    pub persistence_mse: f64,
    pub persistence_mae: f64,
    pub mean_mse: f64,
    pub mean_mae: f64,
}

pub fn baselines(test: &WindowDataset) -> Result<Baselines> {
    let targets = test.targets();
    let pers: Vec<Matrix> = test
        .windows
        .iter()
        .map(|w| persistence_forecast(&w.input, test.horizon))
        .collect();
    let mean: Vec<Matrix> = targets
        .iter()
        .map(|t| train_mean_forecast(t.rows(), t.cols()))
        .collect();
    let (persistence_mse, persistence_mae) = pooled_errors(&targets, &pers)?;
    let (mean_mse, mean_mae) = pooled_errors(&targets, &mean)?;
    Ok(Baselines {
        persistence_mse,
        persistence_mae,
        mean_mse,
        mean_mae,
    })
}

/// Trains one variant on a prepared experiment and evaluates it.
pub fn run_variant(
    exp: &Experiment,
    config: &ModelConfig,
    schedule: &TrainSchedule,
    seed: u64,
) -> Result<(Model, TrainReport, MetricReport)> {
    let mut model = Model::new(config.clone(), seed)?;
    let schedule = TrainSchedule {
        seed,
        ..schedule.clone()
    };
    let report = train(&mut model, &exp.train, &exp.val, &schedule)?;
    let metrics = evaluate(&model, &exp.test, &exp.scaler)?;
    Ok((model, report, metrics))
}

/// Ablation rows in display order, with their variants.
pub const ABLATION_ROWS: [(&str, Variant); 3] = [
    ("Prediction+Data Processing", Variant::DataProcessingOnly),
    (
        "Prediction+Local Feature Enhancement",
        Variant::LocalEnhancementOnly,
    ),
    ("Proposed Framework", Variant::Full),
];

#[derive(Debug)]
pub struct AblationRow {
    pub label: &'static str,
    pub variant: Variant,
    pub seed: u64,
    pub split_hash: u64,
    pub param_count: usize,
    pub outcome: std::result::Result<(MetricReport, TrainReport), String>,
}

/// Trains the three ablation variants with the same seed and splits. A
/// failing variant is recorded in its row and the others still run.
pub fn run_ablation(
    series: &TrafficMatrix,
    base: &ModelConfig,
    schedule: &TrainSchedule,
    ratios: [f64; 3],
    seed: u64,
) -> Result<Vec<AblationRow>> {
    let exp = prepare_experiment(series, base.lookback, base.horizon, ratios)?;
    Ok(ABLATION_ROWS
        .iter()
        .map(|&(label, variant)| {
            let config = base.clone().with_variant(variant);
            let outcome = run_variant(&exp, &config, schedule, seed)
                .map(|(_, r, m)| (m, r))
                .map_err(|e| {
                    log::error!("{label}: {e}");
                    e.to_string()
                });
            AblationRow {
                label,
                variant,
                seed,
                split_hash: exp.split_hash,
                param_count: count_params(&config),
                outcome,
            }
        })
        .collect())
}

/// Fixed-width ablation table, one row per variant.
pub fn format_ablation(rows: &[AblationRow]) -> String {
    let mut s = format!("{:<38} {:>12} {:>12} {:>12}\n", "Method", "MSE", "MAE", "Params");
    for r in rows {
        match &r.outcome {
            Ok((m, _)) => s.push_str(&format!(
                "{:<38} {:>12.6} {:>12.6} {:>12}\n",
                r.label, m.mse, m.mae, r.param_count
            )),
            Err(e) => s.push_str(&format!("{:<38} failed: {e}\n", r.label)),
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn row(v: &[f64]) -> Matrix {
        Matrix::from_rows(&[v]).unwrap()
    }

    #[test]
    fn metric_examples() {
        let y = row(&[1.0, 2.0]);
        assert_eq!((mse(&y, &y).unwrap(), mae(&y, &y).unwrap()), (0.0, 0.0));
        let (z, o) = (row(&[0.0, 0.0]), row(&[1.0, 1.0]));
        assert_eq!((mse(&z, &o).unwrap(), mae(&z, &o).unwrap()), (1.0, 1.0));
        let y = row(&[0.0, 2.0]);
        assert_eq!((mse(&y, &o).unwrap(), mae(&y, &o).unwrap()), (1.0, 1.0));
        let y = row(&[0.0, 4.0]);
        let (m, a) = (mse(&y, &z).unwrap(), mae(&y, &z).unwrap());
        assert_eq!((m, a), (8.0, 2.0));
        assert!(a * a <= m);
        assert!(matches!(mse(&y, &row(&[1.0])), Err(Error::Shape { .. })));
    }

    #[test]
    fn scaler_properties() {
        let train = Matrix::from_rows(&[[1.0, 2.0, 3.0, 6.0], [5.0, 5.0, 5.0, 5.0]]).unwrap();
        let (out, s) = standardize_for_eval(&train, &[&train]).unwrap();
        for i in 0..2 {
            assert!((out[0].row(i).iter().sum::<f64>() / 4.0).abs() < 1e-10);
        }
        assert_eq!(s.std[1], NORM_EPS);
        let twice = s.transform(&out[0]).unwrap();
        assert_ne!(twice, out[0]);
        let back = s.inverse(&out[0]).unwrap();
        for (a, b) in back.data().iter().zip(train.data()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn baselines() {
        let x = Matrix::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]).unwrap();
        let p = persistence_forecast(&x, 2);
        assert_eq!(p.data(), &[3.0, 3.0, 6.0, 6.0]);
        assert_eq!(train_mean_forecast(2, 3), Matrix::zeros(2, 3));
    }

    #[test]
    fn param_report_sums() {
        use crate::predictor::Variant;
        for v in Variant::ALL {
            let c = ModelConfig::default().with_variant(v);
            let rows = report_params(&c);
            let (total, parts) = rows.split_last().unwrap();
            assert_eq!(parts.iter().map(|r| r.1).sum::<usize>(), total.1);
        }
        let base = report_params(&ModelConfig::default()).last().unwrap().1;
        let seas = report_params(&ModelConfig::default().with_variant(Variant::Seasonal))
            .last()
            .unwrap()
            .1;
        assert_eq!(seas, 2 * base);
    }

    proptest! {
        #[test]
        fn jensen_and_symmetry(pairs in proptest::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 1..60)) {
            let y = row(&pairs.iter().map(|p| p.0).collect::<Vec<_>>());
            let p = row(&pairs.iter().map(|p| p.1).collect::<Vec<_>>());
            let (m, a) = (mse(&y, &p).unwrap(), mae(&y, &p).unwrap());
            prop_assert!(a * a <= m * (1.0 + 1e-12) + 1e-300);
            prop_assert_eq!(m, mse(&p, &y).unwrap());
            prop_assert_eq!(a, mae(&p, &y).unwrap());
        }
    }
}
