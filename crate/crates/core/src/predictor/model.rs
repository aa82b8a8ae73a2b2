use rand_chacha::ChaCha8Rng;

use crate::enhancement::embedding_for;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::numerics::{Tape, Tensor, Var};
use crate::processing::{
    denoise, normalize, pad_and_patch, patch_channels, postprocess, Forecast, NormStats, TrafficMatrix,
};

use super::config::{ModelConfig, Variant};
use super::params::{Bound, Init, ParamSpec, ParamStore};

/// Standard deviation of the positional table at initialization.
pub const POS_INIT_STD: f64 = 0.02;

/// Parameter name prefixes, one per branch.
pub fn branch_prefixes(variant: Variant) -> &'static [&'static str] {
    match variant {
        Variant::Seasonal => &["trend.", "seasonal."],
        _ => &[""],
    }
}

fn encoder_specs(c: &ModelConfig, p: &str, out: &mut Vec<ParamSpec>) {
    let (d, f) = (c.d_model, c.d_ff);
    for l in 0..c.n_layers {
        let dense = |name: &str, i: usize, o: usize, out: &mut Vec<ParamSpec>| {
            out.push(ParamSpec::new(
                format!("{p}enc{l}.{name}.w"),
                &[i, o],
                Init::FanIn(i),
            ));
            out.push(ParamSpec::new(format!("{p}enc{l}.{name}.b"), &[o], Init::Zeros));
        };
        for name in ["q", "k", "v", "o"] {
            dense(name, d, d, out);
        }
        out.push(ParamSpec::new(format!("{p}enc{l}.ln1.g"), &[d], Init::Ones));
        out.push(ParamSpec::new(format!("{p}enc{l}.ln1.b"), &[d], Init::Zeros));
        dense("ff1", d, f, out);
        dense("ff2", f, d, out);
        out.push(ParamSpec::new(format!("{p}enc{l}.ln2.g"), &[d], Init::Ones));
        out.push(ParamSpec::new(format!("{p}enc{l}.ln2.b"), &[d], Init::Zeros));
    }
}

/// Every trainable tensor of the model in initialization order.
pub fn param_specs(c: &ModelConfig) -> Vec<ParamSpec> {
    let n = c.num_patches();
    let emb = embedding_for(c);
    let mut out = Vec::new();
    for p in branch_prefixes(c.variant) {
        out.extend(emb.param_specs(&format!("{p}embed.")));
        out.push(ParamSpec::new(
            format!("{p}pos"),
            &[n, c.d_model],
            Init::Normal(POS_INIT_STD),
        ));
        encoder_specs(c, p, &mut out);
        out.push(ParamSpec::new(
            format!("{p}head.w"),
            &[n * c.d_model, c.horizon],
            Init::FanIn(n * c.d_model),
        ));
        out.push(ParamSpec::new(format!("{p}head.b"), &[c.horizon], Init::Zeros));
    }
    out
}

/// Number of trainable scalars; depends only on the configuration.
pub fn count_params(c: &ModelConfig) -> usize {
    param_specs(c).iter().map(ParamSpec::numel).sum()
}

/// Weights and bias of the flatten-then-linear head.
pub fn head_param_count(num_patches: usize, d_model: usize, horizon: usize) -> usize {
    num_patches * d_model * horizon + horizon
}

/// Trainable scalars per module: embedding, positional table, encoder, head.
pub fn param_breakdown(c: &ModelConfig) -> Vec<(String, usize)> {
    let mut rows: Vec<(String, usize)> = Vec::new();
    for spec in param_specs(c) {
        let rest = branch_prefixes(c.variant)
            .iter()
            .filter(|p| !p.is_empty())
            .find_map(|p| spec.name.strip_prefix(p).map(|r| (p.trim_end_matches('.'), r)));
        let (branch, name) = rest.unwrap_or(("", spec.name.as_str()));
        let module = match name.split('.').next().unwrap_or("") {
            "embed" => "embedding",
            "pos" => "positional",
            "head" => "head",
            _ => "encoder",
        };
        let key = if branch.is_empty() {
            module.to_string()
        } else {
            format!("{branch}.{module}")
        };
        match rows.iter_mut().find(|(k, _)| *k == key) {
            Some(row) => row.1 += spec.numel(),
            None => rows.push((key, spec.numel())),
        }
    }
    rows
}

/// Centered moving average with the ends padded by repeating the first and
/// last values.
pub fn moving_average(series: &[f64], window: usize) -> Result<Vec<f64>> {
    if window == 0 || window >= series.len() {
        return Err(Error::Parameter(format!(
            "moving-average window {window} must be in 1..{}",
            series.len()
        )));
    }
    let (left, right) = ((window - 1) / 2, window / 2);
    let last = series.len() - 1;
    let at = |i: isize| series[i.clamp(0, last as isize) as usize];
    Ok((0..series.len() as isize)
        .map(|t| (t - left as isize..=t + right as isize).map(at).sum::<f64>() / window as f64)
        .collect())
}

/// `(trend, seasonal)` with `trend + seasonal == series`.
pub fn seasonal_decompose(series: &[f64], window: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let trend = moving_average(series, window)?;
    let seasonal = series.iter().zip(&trend).map(|(x, t)| x - t).collect();
    Ok((trend, seasonal))
}

/// Model input for one window: patches per branch (`M x N x l` each) and the
/// normalization statistics needed to undo the scaling.
#[derive(Clone, Debug, PartialEq)]
pub struct Prepared {
    pub branches: Vec<Vec<f64>>,
    pub stats: NormStats,
    pub channels: usize,
}

/// Multi-head self-attention followed by a feed-forward layer, each wrapped
/// in a residual connection and layer normalization (post-norm).
pub fn encoder_layer(
    tape: &mut Tape,
    params: &Bound,
    prefix: &str,
    x: Var,
    n_heads: usize,
    dropout: Option<(f64, &mut ChaCha8Rng)>,
) -> Result<Var> {
    let v = |name: &str| params.var(&format!("{prefix}{name}"));
    let dense = |tape: &mut Tape, x: Var, name: &str| -> Result<Var> {
        tape.affine(x, v(&format!("{name}.w"))?, Some(v(&format!("{name}.b"))?))
    };
    let d = *tape.shape(x).last().unwrap_or(&0);
    let head_dim = d / n_heads;
    let q = dense(tape, x, "q")?;
    let k = dense(tape, x, "k")?;
    let val = dense(tape, x, "v")?;
    let (q, k, val) = (
        tape.split_heads(q, n_heads)?,
        tape.split_heads(k, n_heads)?,
        tape.split_heads(val, n_heads)?,
    );
    let scores = tape.matmul_nt(q, k)?;
    let scores = tape.scale(scores, 1.0 / (head_dim as f64).sqrt())?;
    let att = tape.softmax(scores)?;
    let ctx = tape.matmul(att, val)?;
    let ctx = tape.merge_heads(ctx, n_heads)?;
    let mut o = dense(tape, ctx, "o")?;
    let mut drop = dropout;
    if let Some((rate, rng)) = drop.as_mut() {
        o = tape.dropout(o, *rate, *rng)?;
    }
    let h = tape.add(x, o)?;
    let h = tape.layer_norm(h, v("ln1.g")?, v("ln1.b")?)?;

    let f = dense(tape, h, "ff1")?;
    let f = tape.gelu(f)?;
    let mut f = dense(tape, f, "ff2")?;
    if let Some((rate, rng)) = drop.as_mut() {
        f = tape.dropout(f, *rate, *rng)?;
    }
    let out = tape.add(h, f)?;
    tape.layer_norm(out, v("ln2.g")?, v("ln2.b")?)
}

/// Adds the positional table to every sequence and runs the encoder stack.
pub fn encode(
    tape: &mut Tape,
    params: &Bound,
    prefix: &str,
    tokens: Var,
    c: &ModelConfig,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    let pos = params.var(&format!("{prefix}pos"))?;
    let (ts, ps) = (tape.shape(tokens).to_vec(), tape.shape(pos).to_vec());
    if ts.len() != 3 || ts[1..] != ps[..] {
        return Err(Error::Config(format!(
            "tokens {ts:?} do not match positional table {ps:?}"
        )));
    }
    let mut x = tape.add_broadcast(tokens, pos)?;
    for l in 0..c.n_layers {
        let drop = match rng.as_deref_mut() {
            Some(r) if c.dropout > 0.0 => Some((c.dropout, r)),
            _ => None,
        };
        x = encoder_layer(tape, params, &format!("{prefix}enc{l}."), x, c.n_heads, drop)?;
    }
    Ok(x)
}

/// Flattens each `N x d_model` sequence (token index slowest) and maps it to
/// the horizon.
pub fn head(tape: &mut Tape, params: &Bound, prefix: &str, encoded: Var) -> Result<Var> {
    let s = tape.shape(encoded).to_vec();
    if s.len() != 3 {
        return Err(Error::shape("head", &s, &[0, 0, 0]));
    }
    let flat = tape.reshape(encoded, &[s[0], s[1] * s[2]])?;
    let w = params.var(&format!("{prefix}head.w"))?;
    let b = params.var(&format!("{prefix}head.b"))?;
    tape.affine(flat, w, Some(b))
}

/// A configured model with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub seed: u64,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = ParamStore::init(&param_specs(&config), seed)?;
        Ok(Model { config, params, seed })
    }

    pub fn count_params(&self) -> usize {
        self.params.count()
    }

    /// Runs the preprocessing for one `M x L` window.
    pub fn prepare(&self, x: &Matrix) -> Result<Prepared> {
        let policy = self.config.variant.uses_tsvdr().then_some(self.config.truncation);
        self.prepare_denoised(&denoise(x, policy)?)
    }

    /// Preprocessing after the denoising step.
    pub fn prepare_denoised(&self, x: &Matrix) -> Result<Prepared> {
        let c = &self.config;
        if x.cols() != c.lookback {
            return Err(Error::shape(
                "prepare",
                &[x.rows(), x.cols()],
                &[x.rows(), c.lookback],
            ));
        }
        if c.variant != Variant::Seasonal {
            let (set, stats) = patch_channels(x, c.patch_len, c.stride)?;
            return Ok(Prepared {
                branches: vec![set.patches],
                stats,
                channels: x.rows(),
            });
        }
        let mut trend_p = Vec::new();
        let mut seas_p = Vec::new();
        let mut stats = NormStats {
            mu: Vec::new(),
            sigma_eff: Vec::new(),
        };
        for i in 0..x.rows() {
            let (z, mu, s) = normalize(x.row(i))?;
            let (trend, seasonal) = seasonal_decompose(&z, c.ma_window)?;
            for (part, dst) in [(trend, &mut trend_p), (seasonal, &mut seas_p)] {
                for p in pad_and_patch(&part, c.patch_len, c.stride)? {
                    dst.extend_from_slice(&p);
                }
            }
            stats.mu.push(mu);
            stats.sigma_eff.push(s);
        }
        Ok(Prepared {
            branches: vec![trend_p, seas_p],
            stats,
            channels: x.rows(),
        })
    }

    /// Normalized-scale predictions `[sum of channels, T]` for a batch of
    /// prepared windows. `rng` enables dropout.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &Bound,
        batch: &[&Prepared],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let c = &self.config;
        let n = c.num_patches();
        let seqs: usize = batch.iter().map(|p| p.channels).sum();
        let emb = embedding_for(c);
        let mut total: Option<Var> = None;
        for (b, prefix) in branch_prefixes(c.variant).iter().enumerate() {
            let mut data = Vec::with_capacity(seqs * n * c.patch_len);
            for p in batch {
                data.extend_from_slice(&p.branches[b]);
            }
            let patches = tape.leaf(Tensor::new(vec![seqs, n, c.patch_len], data)?);
            let tokens = emb.embed(tape, params, &format!("{prefix}embed."), patches)?;
            let enc = encode(tape, params, prefix, tokens, c, rng.as_deref_mut())?;
            let out = head(tape, params, prefix, enc)?;
            total = Some(match total {
                None => out,
                Some(t) => tape.add(t, out)?,
            });
        }
        total.ok_or_else(|| Error::Config("model has no branches".into()))
    }

    /// Normalized predictions for prepared windows, without gradients.
    pub fn predict_prepared(&self, batch: &[&Prepared]) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let out = self.forward(&mut tape, &bound, batch, None)?;
        Ok(tape
            .value(out)
            .data()
            .chunks_exact(self.config.horizon)
            .map(<[f64]>::to_vec)
            .collect())
    }

    /// Denormalized `M x T` forecasts for a list of `M x L` windows.
    pub fn predict_windows(&self, windows: &[Matrix], chunk: usize) -> Result<Vec<Matrix>> {
        let prepared: Vec<Prepared> = windows.iter().map(|w| self.prepare(w)).collect::<Result<_>>()?;
        self.predict_many(&prepared, chunk)
    }

    /// Denormalized forecasts for prepared windows, `chunk` windows per pass.
    pub fn predict_many(&self, prepared: &[Prepared], chunk: usize) -> Result<Vec<Matrix>> {
        let mut out = Vec::with_capacity(prepared.len());
        for group in prepared.chunks(chunk.max(1)) {
            let refs: Vec<&Prepared> = group.iter().collect();
            let rows = self.predict_prepared(&refs)?;
            let mut it = rows.into_iter();
            for p in group {
                let preds: Vec<Vec<f64>> = it.by_ref().take(p.channels).collect();
                let ids: Vec<String> = (0..p.channels).map(|i| i.to_string()).collect();
                out.push(postprocess(&preds, &p.stats, &ids)?.values);
            }
        }
        Ok(out)
    }

    /// Forecast for one window given an already denoised input.
    pub fn forecast_denoised(&self, x: &Matrix, channel_ids: &[String]) -> Result<Forecast> {
        let p = self.prepare_denoised(x)?;
        let preds = self.predict_prepared(&[&p])?;
        postprocess(&preds, &p.stats, channel_ids)
    }
}

/// The complete pipeline for one `M x L` input window.
pub fn model_forward(x: &TrafficMatrix, model: &Model) -> Result<Forecast> {
    let p = model.prepare(&x.values)?;
    let preds = model.predict_prepared(&[&p])?;
    postprocess(&preds, &p.stats, &x.channel_ids)
}
