//! Pre- and postprocessing around the network.
//!
//! Preprocessing denoises an `M x L` window, splits it into `M` univariate
//! series, normalizes each series by its own mean and standard deviation, and
//! cuts it into `N = floor((L - l) / S) + 2` patches of length `l` taken from
//! the series right-padded with zeros. Postprocessing undoes the
//! normalization on the per-channel predictions and stacks them back into an
//! `M x T` forecast.
//!
//! Indexing is zero-based: patch `n` covers padded offsets
//! `[n * S, n * S + l)`.

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::tsvdr::{tsvdr_denoise, TruncationPolicy};

/// Added to each channel's standard deviation before dividing.
pub const NORM_EPS: f64 = 1e-5;

/// Traffic volume per channel (rows) and time step (columns).
#[derive(Clone, Debug, PartialEq)]
pub struct TrafficMatrix {
    pub values: Matrix,
    pub channel_ids: Vec<String>,
    /// Sampling interval in seconds.
    pub step_seconds: u64,
}

impl TrafficMatrix {
    pub fn new(values: Matrix, channel_ids: Vec<String>, step_seconds: u64) -> Result<Self> {
        if values.rows() == 0 || values.cols() == 0 {
            return Err(Error::Data("traffic matrix must be non-empty".into()));
        }
        if channel_ids.len() != values.rows() {
            return Err(Error::Data(format!(
                "{} channel ids for {} channels",
                channel_ids.len(),
                values.rows()
            )));
        }
        if !values.all_finite() {
            return Err(Error::Data("traffic matrix contains non-finite values".into()));
        }
        Ok(TrafficMatrix {
            values,
            channel_ids,
            step_seconds,
        })
    }

    /// Channels named `0..M` at 10-minute resolution.
    pub fn unnamed(values: Matrix) -> Result<Self> {
        let ids = (0..values.rows()).map(|i| i.to_string()).collect();
        Self::new(values, ids, 600)
    }

    pub fn channels(&self) -> usize {
        self.values.rows()
    }

    pub fn len(&self) -> usize {
        self.values.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.values.cols() == 0
    }

    /// Time steps `from..to` of every channel.
    pub fn slice(&self, from: usize, to: usize) -> TrafficMatrix {
        TrafficMatrix {
            values: self.values.columns(from, to),
            channel_ids: self.channel_ids.clone(),
            step_seconds: self.step_seconds,
        }
    }
}

/// Per-channel statistics recorded by [`normalize`].
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub mu: Vec<f64>,
    /// `sigma + NORM_EPS`, always positive.
    pub sigma_eff: Vec<f64>,
}

/// Segmented, normalized channels: `patches` is `M x N x l`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet {
    pub patches: Vec<f64>,
    pub channels: usize,
    pub num_patches: usize,
    pub patch_len: usize,
    pub stride: usize,
    pub source_len: usize,
}

impl PatchSet {
    pub fn patch(&self, channel: usize, n: usize) -> &[f64] {
        let start = (channel * self.num_patches + n) * self.patch_len;
        &self.patches[start..start + self.patch_len]
    }

    pub fn channel(&self, channel: usize) -> &[f64] {
        let width = self.num_patches * self.patch_len;
        &self.patches[channel * width..(channel + 1) * width]
    }
}

/// An `M x T` prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct Forecast {
    pub values: Matrix,
    pub horizon: usize,
    pub channel_ids: Vec<String>,
}

/// Splits the matrix into its per-channel rows.
pub fn decouple(x: &TrafficMatrix) -> Vec<Vec<f64>> {
    (0..x.channels()).map(|i| x.values.row(i).to_vec()).collect()
}

/// Population mean/std normalization of one series.
pub fn normalize(series: &[f64]) -> Result<(Vec<f64>, f64, f64)> {
    if series.is_empty() {
        return Err(Error::Data("cannot normalize an empty series".into()));
    }
    let n = series.len() as f64;
    let mu = series.iter().sum::<f64>() / n;
    let var = series.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / n;
    let sigma_eff = var.sqrt() + NORM_EPS;
    let out = series.iter().map(|x| (x - mu) / sigma_eff).collect();
    Ok((out, mu, sigma_eff))
}

pub fn denormalize(pred: &[f64], mu: f64, sigma_eff: f64) -> Vec<f64> {
    pred.iter().map(|p| p * sigma_eff + mu).collect()
}

/// `floor((len - patch_len) / stride) + 2`.
pub fn patch_count(len: usize, patch_len: usize, stride: usize) -> Result<usize> {
    check_patch_geometry(len, patch_len, stride)?;
    Ok((len - patch_len) / stride + 2)
}

/// Zeros appended so that the last patch ends exactly at the padded length.
pub fn padding_len(len: usize, patch_len: usize, stride: usize) -> Result<usize> {
    let n = patch_count(len, patch_len, stride)?;
    Ok((n - 1) * stride + patch_len - len)
}

fn check_patch_geometry(len: usize, patch_len: usize, stride: usize) -> Result<()> {
    if patch_len == 0 || stride == 0 {
        return Err(Error::Parameter("patch length and stride must be >= 1".into()));
    }
    if patch_len > len {
        return Err(Error::Parameter(format!(
            "patch length {patch_len} exceeds series length {len}"
        )));
    }
    Ok(())
}

/// Right-pads with zeros and cuts `N` overlapping patches.
pub fn pad_and_patch(series: &[f64], patch_len: usize, stride: usize) -> Result<Vec<Vec<f64>>> {
    let n = patch_count(series.len(), patch_len, stride)?;
    let pad = padding_len(series.len(), patch_len, stride)?;
    let mut padded = series.to_vec();
    padded.resize(series.len() + pad, 0.0);
    Ok((0..n)
        .map(|k| padded[k * stride..k * stride + patch_len].to_vec())
        .collect())
}

/// Stacks per-channel predictions into an `M x T` forecast.
pub fn concat_channels(preds: &[Vec<f64>], channel_ids: &[String]) -> Result<Forecast> {
    let horizon = preds.first().map_or(0, Vec::len);
    if preds.is_empty() || horizon == 0 {
        return Err(Error::Data("no predictions to concatenate".into()));
    }
    if channel_ids.len() != preds.len() {
        return Err(Error::shape(
            "concat_channels",
            &[preds.len(), horizon],
            &[channel_ids.len()],
        ));
    }
    if let Some(bad) = preds.iter().find(|p| p.len() != horizon) {
        return Err(Error::shape("concat_channels", &[horizon], &[bad.len()]));
    }
    Ok(Forecast {
        values: Matrix::from_rows(preds)?,
        horizon,
        channel_ids: channel_ids.to_vec(),
    })
}

/// Denoising front end: `Some(policy)` applies TSVDR, `None` passes through.
pub fn denoise(x: &Matrix, policy: Option<TruncationPolicy>) -> Result<Matrix> {
    match policy {
        Some(p) => tsvdr_denoise(x, p),
        None => Ok(x.clone()),
    }
}

/// Decouple, normalize and patch an already denoised `M x L` window.
pub fn patch_channels(x: &Matrix, patch_len: usize, stride: usize) -> Result<(PatchSet, NormStats)> {
    let (m, l) = x.shape();
    let n = patch_count(l, patch_len, stride)?;
    let mut patches = Vec::with_capacity(m * n * patch_len);
    let mut stats = NormStats {
        mu: Vec::with_capacity(m),
        sigma_eff: Vec::with_capacity(m),
    };
    for i in 0..m {
        let (norm, mu, sigma_eff) = normalize(x.row(i))?;
        for p in pad_and_patch(&norm, patch_len, stride)? {
            patches.extend_from_slice(&p);
        }
        stats.mu.push(mu);
        stats.sigma_eff.push(sigma_eff);
    }
    let set = PatchSet {
        patches,
        channels: m,
        num_patches: n,
        patch_len,
        stride,
        source_len: l,
    };
    Ok((set, stats))
}

/// The complete preprocessing pass over one input window.
pub fn preprocess(
    x: &Matrix,
    policy: Option<TruncationPolicy>,
    patch_len: usize,
    stride: usize,
) -> Result<(PatchSet, NormStats)> {
    patch_channels(&denoise(x, policy)?, patch_len, stride)
}

/// Denormalizes each channel's prediction and stacks the result.
pub fn postprocess(preds: &[Vec<f64>], stats: &NormStats, channel_ids: &[String]) -> Result<Forecast> {
    if preds.len() != stats.mu.len() {
        return Err(Error::shape("postprocess", &[preds.len()], &[stats.mu.len()]));
    }
    let restored: Vec<Vec<f64>> = preds
        .iter()
        .zip(stats.mu.iter().zip(&stats.sigma_eff))
        .map(|(p, (&mu, &s))| denormalize(p, mu, s))
        .collect();
    concat_channels(&restored, channel_ids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn decouple_rows_and_round_trip() {
        let x =
            TrafficMatrix::unnamed(Matrix::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]).unwrap()).unwrap();
        let series = decouple(&x);
        assert_eq!(series, vec![vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]);
        let back = concat_channels(&series, &x.channel_ids).unwrap();
        assert_eq!(back.values, x.values);

        let single = TrafficMatrix::unnamed(Matrix::from_rows(&[[7.0, 8.0]]).unwrap()).unwrap();
        assert_eq!(decouple(&single), vec![vec![7.0, 8.0]]);
    }

    #[test]
    fn normalize_hand_values() {
        let (z, mu, s) = normalize(&[1.0, 2.0, 3.0]).unwrap();
        assert!((mu - 2.0).abs() < 1e-15);
        let sigma = (2.0f64 / 3.0).sqrt();
        assert!((s - (sigma + NORM_EPS)).abs() < 1e-15);
        assert!((sigma - 0.81650).abs() < 1e-5);
        let expect = 1.0 / (sigma + NORM_EPS);
        assert!((z[0] + expect).abs() < 1e-12 && z[1].abs() < 1e-15 && (z[2] - expect).abs() < 1e-12);
        assert!((z[2] - 1.22474).abs() < 1e-4);

        let (z, mu, s) = normalize(&[5.0, 5.0, 5.0]).unwrap();
        assert_eq!((mu, s), (5.0, NORM_EPS));
        assert!(z.iter().all(|v| *v == 0.0));
        assert!(normalize(&[]).is_err());
    }

    #[test]
    fn denormalize_hand_values() {
        assert_eq!(denormalize(&[1.0, -1.0], 10.0, 2.0), vec![12.0, 8.0]);
        assert_eq!(denormalize(&[0.0, 0.0], 3.5, 9.0), vec![3.5, 3.5]);
    }

    #[test]
    fn patch_geometry_reference_cases() {
        assert_eq!(patch_count(432, 16, 8).unwrap(), 54);
        assert_eq!(padding_len(432, 16, 8).unwrap(), 8);

        let x: Vec<f64> = (0..10).map(f64::from).collect();
        assert_eq!(patch_count(10, 4, 2).unwrap(), 5);
        assert_eq!(padding_len(10, 4, 2).unwrap(), 2);
        let p = pad_and_patch(&x, 4, 2).unwrap();
        assert_eq!(p[4], vec![8.0, 9.0, 0.0, 0.0]);

        let p = pad_and_patch(&x, 10, 10).unwrap();
        assert_eq!(p.len(), 2);
        assert_eq!(p[0], x);
        assert!(p[1].iter().all(|v| *v == 0.0));

        assert!(matches!(pad_and_patch(&x, 11, 1), Err(Error::Parameter(_))));
    }

    #[test]
    fn concat_rejects_ragged_predictions() {
        let ids = vec!["a".to_string(), "b".to_string()];
        let f = concat_channels(&[vec![1.0, 2.0], vec![3.0, 4.0]], &ids).unwrap();
        assert_eq!(f.values.data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(f.horizon, 2);
        assert!(matches!(
            concat_channels(&[vec![1.0, 2.0], vec![3.0]], &ids),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn perturbing_one_channel_leaves_others_bitwise_unchanged() {
        let x = Matrix::from_fn(3, 20, |i, j| ((i * 7 + j * 3) % 11) as f64);
        let (a, sa) = patch_channels(&x, 4, 3).unwrap();
        let mut y = x.clone();
        y.set(1, 5, 100.0);
        let (b, sb) = patch_channels(&y, 4, 3).unwrap();
        for ch in [0, 2] {
            assert_eq!(a.channel(ch), b.channel(ch));
            assert_eq!(sa.mu[ch].to_bits(), sb.mu[ch].to_bits());
            assert_eq!(sa.sigma_eff[ch].to_bits(), sb.sigma_eff[ch].to_bits());
        }
        assert_ne!(a.channel(1), b.channel(1));
    }

    proptest! {
        #[test]
        fn normalization_round_trip(values in proptest::collection::vec(-1e4f64..1e4, 1..200)) {
            let (z, mu, s) = normalize(&values).unwrap();
            prop_assert!((z.iter().sum::<f64>() / z.len() as f64).abs() < 1e-10);
            let back = denormalize(&z, mu, s);
            for (a, b) in back.iter().zip(&values) {
                prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
            }
        }

        #[test]
        fn every_index_is_covered_and_padding_is_zero(len in 1usize..=64, pl in 1usize..=64, stride in 1usize..=16) {
            prop_assume!(pl <= len && stride <= pl);
            let x: Vec<f64> = (0..len).map(|i| i as f64 + 1.0).collect();
            let patches = pad_and_patch(&x, pl, stride).unwrap();
            let mut seen = vec![false; len];
            for (n, p) in patches.iter().enumerate() {
                for (k, &v) in p.iter().enumerate() {
                    let idx = n * stride + k;
                    if idx < len {
                        prop_assert_eq!(v, x[idx]);
                        seen[idx] = true;
                    } else {
                        prop_assert_eq!(v, 0.0);
                    }
                }
            }
            prop_assert!(seen.iter().all(|s| *s));
        }
    }
}
