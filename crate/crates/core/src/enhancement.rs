//! Patch embeddings.
//!
//! The enhanced embedding projects each patch to `d_model` features, runs two
//! TCN blocks with a dense layer between them and adds the projected tokens
//! back:
//!
//! `X_e = P + TCN2(Dense(TCN1(P)))` with `P = project(patches)`.
//!
//! A TCN block is a stack of dilated causal convolutions along the patch
//! axis, each followed by GELU, with `d_model` convolution channels. Token
//! `n` of the output therefore depends only on patches `0..=n` of the same
//! channel.

use crate::error::Result;
use crate::numerics::{Tape, Var};
use crate::predictor::config::{Embedding, ModelConfig};
use crate::predictor::params::{Bound, Init, ParamSpec};

/// Maps patches `[S, N, l]` to tokens `[S, N, d_model]`, one sequence per
/// channel and window. Any implementation can be plugged into the predictor.
pub trait PatchEmbedding {
    fn name(&self) -> &'static str;

    /// Parameters, in initialization order, with names under `prefix`.
    fn param_specs(&self, prefix: &str) -> Vec<ParamSpec>;

    fn embed(&self, tape: &mut Tape, params: &Bound, prefix: &str, patches: Var) -> Result<Var>;
}

/// Dense layer applied to every patch.
pub fn project(tape: &mut Tape, patches: Var, w: Var, b: Var) -> Result<Var> {
    tape.affine(patches, w, Some(b))
}

/// One TCN block: `(kernel, bias, dilation)` per layer, GELU after each.
pub fn tcn_block(tape: &mut Tape, tokens: Var, layers: &[(Var, Var, usize)]) -> Result<Var> {
    let mut h = tokens;
    for &(w, b, dilation) in layers {
        let c = tape.conv1d_causal_tokens(h, w, Some(b), dilation)?;
        h = tape.gelu(c)?;
    }
    Ok(h)
}

/// Projection followed by the residual TCN stack.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalEnhancement {
    pub patch_len: usize,
    pub d_model: usize,
    pub kernel_size: usize,
    pub dilations: Vec<usize>,
}

/// Projection only.
#[derive(Clone, Debug, PartialEq)]
pub struct PlainEmbedding {
    pub patch_len: usize,
    pub d_model: usize,
}

fn projection_specs(prefix: &str, patch_len: usize, d_model: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::new(
            format!("{prefix}proj.w"),
            &[patch_len, d_model],
            Init::FanIn(patch_len),
        ),
        ParamSpec::new(format!("{prefix}proj.b"), &[d_model], Init::Zeros),
    ]
}

fn projected(tape: &mut Tape, params: &Bound, prefix: &str, patches: Var) -> Result<Var> {
    let w = params.var(&format!("{prefix}proj.w"))?;
    let b = params.var(&format!("{prefix}proj.b"))?;
    project(tape, patches, w, b)
}

impl LocalEnhancement {
    pub fn from_config(c: &ModelConfig) -> Self {
        LocalEnhancement {
            patch_len: c.patch_len,
            d_model: c.d_model,
            kernel_size: c.kernel_size,
            dilations: c.dilations.clone(),
        }
    }

    fn tcn_specs(&self, prefix: &str, block: usize, out: &mut Vec<ParamSpec>) {
        let d = self.d_model;
        for i in 0..self.dilations.len() {
            out.push(ParamSpec::new(
                format!("{prefix}tcn{block}.conv{i}.w"),
                &[d, d, self.kernel_size],
                Init::FanIn(d * self.kernel_size),
            ));
            out.push(ParamSpec::new(
                format!("{prefix}tcn{block}.conv{i}.b"),
                &[d],
                Init::Zeros,
            ));
        }
    }

    fn tcn_layers(&self, params: &Bound, prefix: &str, block: usize) -> Result<Vec<(Var, Var, usize)>> {
        self.dilations
            .iter()
            .enumerate()
            .map(|(i, &dil)| {
                Ok((
                    params.var(&format!("{prefix}tcn{block}.conv{i}.w"))?,
                    params.var(&format!("{prefix}tcn{block}.conv{i}.b"))?,
                    dil,
                ))
            })
            .collect()
    }
}

impl PatchEmbedding for LocalEnhancement {
    fn name(&self) -> &'static str {
        "enhanced"
    }

    fn param_specs(&self, prefix: &str) -> Vec<ParamSpec> {
        let d = self.d_model;
        let mut s = projection_specs(prefix, self.patch_len, d);
        self.tcn_specs(prefix, 1, &mut s);
        s.push(ParamSpec::new(format!("{prefix}mid.w"), &[d, d], Init::FanIn(d)));
        s.push(ParamSpec::new(format!("{prefix}mid.b"), &[d], Init::Zeros));
        self.tcn_specs(prefix, 2, &mut s);
        s
    }

    fn embed(&self, tape: &mut Tape, params: &Bound, prefix: &str, patches: Var) -> Result<Var> {
        let p = projected(tape, params, prefix, patches)?;
        let h = tcn_block(tape, p, &self.tcn_layers(params, prefix, 1)?)?;
        let mid_w = params.var(&format!("{prefix}mid.w"))?;
        let mid_b = params.var(&format!("{prefix}mid.b"))?;
        let h = tape.affine(h, mid_w, Some(mid_b))?;
        let h = tcn_block(tape, h, &self.tcn_layers(params, prefix, 2)?)?;
        tape.add(p, h)
    }
}

impl PatchEmbedding for PlainEmbedding {
    fn name(&self) -> &'static str {
        "plain"
    }

    fn param_specs(&self, prefix: &str) -> Vec<ParamSpec> {
        projection_specs(prefix, self.patch_len, self.d_model)
    }

    fn embed(&self, tape: &mut Tape, params: &Bound, prefix: &str, patches: Var) -> Result<Var> {
        projected(tape, params, prefix, patches)
    }
}

/// The embedding selected by `c.embedding`.
pub fn embedding_for(c: &ModelConfig) -> Box<dyn PatchEmbedding> {
    match c.embedding {
        Embedding::Enhanced => Box::new(LocalEnhancement::from_config(c)),
        Embedding::Plain => Box::new(PlainEmbedding {
            patch_len: c.patch_len,
            d_model: c.d_model,
        }),
    }
}
