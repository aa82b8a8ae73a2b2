use rand::Rng;

use super::gemm::{gemm, View};
use super::tape::{ConvGeom, Op, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Variance floor used by [`Tape::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

const SQRT_2: f64 = std::f64::consts::SQRT_2;

pub(crate) fn gelu_value(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / SQRT_2))
}

pub(crate) fn gelu_slope(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

fn split_matrix_shape(shape: &[usize]) -> Option<(&[usize], usize, usize)> {
    let n = shape.len();
    (n >= 2).then(|| (&shape[..n - 2], shape[n - 2], shape[n - 1]))
}

impl Tape {
    /// Batched matrix product `[.., p, q] x [.., q, r] -> [.., p, r]`.
    ///
    /// Batch axes must either match exactly or be absent on one side, in
    /// which case that operand is shared across the batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a x b^T` where `b` is stored as `[.., r, q]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let err = || Error::shape("matmul", &sa, &sb);
        let (ba, p, q) = split_matrix_shape(&sa).ok_or_else(err)?;
        let (bb, r0, r1) = split_matrix_shape(&sb).ok_or_else(err)?;
        let (qb, r) = if trans_b { (r1, r0) } else { (r0, r1) };
        if q != qb {
            return Err(err());
        }
        let (a_batched, b_batched) = (!ba.is_empty(), !bb.is_empty());
        if a_batched && b_batched && ba != bb {
            return Err(err());
        }
        let batch_dims = if a_batched { ba } else { bb };
        let batch: usize = batch_dims.iter().product();
        let mut out_shape = batch_dims.to_vec();
        out_shape.extend([p, r]);

        let mut out = vec![0.0; batch * p * r];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let b_view = |off: usize| {
            if trans_b {
                View::row_major(off, r, q).t()
            } else {
                View::row_major(off, q, r)
            }
        };
        if !b_batched {
            let rows = batch * p;
            gemm(
                1.0,
                av,
                View::row_major(0, rows, q),
                bv,
                b_view(0),
                0.0,
                &mut out,
                View::row_major(0, rows, r),
            );
        } else {
            for i in 0..batch {
                let a_off = if a_batched { i * p * q } else { 0 };
                gemm(
                    1.0,
                    av,
                    View::row_major(a_off, p, q),
                    bv,
                    b_view(i * q * r),
                    0.0,
                    &mut out,
                    View::row_major(i * p * r, p, r),
                );
            }
        }
        let op = Op::MatMul {
            a,
            b,
            trans_b,
            batch,
            a_batched,
            b_batched,
            p,
            q,
            r,
        };
        self.push("matmul", Tensor::from_parts(out_shape, out), op)
    }

    /// Dense layer `x W + b` over the last axis of `x`; `W` is `[q, r]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let q = *sx.last().expect("tensor rank >= 1");
        if sw.len() != 2 || sw[0] != q {
            return Err(Error::shape("affine", &sx, &sw));
        }
        let r = sw[1];
        if let Some(b) = b {
            if self.shape(b) != [r] {
                return Err(Error::shape("affine", &sw, self.shape(b)));
            }
        }
        let rows = self.value(x).numel() / q;
        let mut out = vec![0.0; rows * r];
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_exact_mut(r) {
                row.copy_from_slice(bias);
            }
        }
        gemm(
            1.0,
            self.value(x).data(),
            View::row_major(0, rows, q),
            self.value(w).data(),
            View::row_major(0, q, r),
            if b.is_some() { 1.0 } else { 0.0 },
            &mut out,
            View::row_major(0, rows, r),
        );
        let mut shape = sx;
        *shape.last_mut().unwrap() = r;
        self.push(
            "affine",
            Tensor::from_parts(shape, out),
            Op::Affine { x, w, b, rows, q, r },
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", self.shape(a), self.shape(b)));
        }
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.push("add", Tensor::from_parts(shape, out), Op::Add { a, b })
    }

    /// `a + b` where the shape of `b` equals the trailing axes of `a`.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape("add_broadcast", sa, sb));
        }
        let bv = self.value(b).data();
        let mut out = self.value(a).data().to_vec();
        for chunk in out.chunks_exact_mut(bv.len()) {
            for (o, y) in chunk.iter_mut().zip(bv) {
                *o += y;
            }
        }
        let shape = sa.to_vec();
        self.push(
            "add_broadcast",
            Tensor::from_parts(shape, out),
            Op::AddSuffix { a, b },
        )
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        let out = self.value(a).data().iter().map(|x| x * k).collect();
        let shape = self.shape(a).to_vec();
        self.push("scale", Tensor::from_parts(shape, out), Op::Scale { a, k })
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let (bd, p, q) = split_matrix_shape(&sa).ok_or_else(|| Error::shape("transpose", &sa, &[]))?;
        let batch: usize = bd.iter().product();
        let src = self.value(a).data();
        let mut out = vec![0.0; src.len()];
        for bi in 0..batch {
            let base = bi * p * q;
            for i in 0..p {
                for j in 0..q {
                    out[base + j * p + i] = src[base + i * q + j];
                }
            }
        }
        let mut shape = bd.to_vec();
        shape.extend([q, p]);
        self.push(
            "transpose",
            Tensor::from_parts(shape, out),
            Op::Transpose { a, batch, p, q },
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape)?;
        self.push("reshape", value, Op::Reshape { a })
    }

    /// `[B, S, H*D] -> [B*H, S, D]`.
    pub fn split_heads(&mut self, a: Var, heads: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 3 || heads == 0 || !sa[2].is_multiple_of(heads) {
            return Err(Error::shape("split_heads", &sa, &[heads]));
        }
        let (batch, seq, width) = (sa[0], sa[1], sa[2]);
        let head_dim = width / heads;
        let src = self.value(a).data();
        let mut out = vec![0.0; src.len()];
        for b in 0..batch {
            for s in 0..seq {
                for h in 0..heads {
                    let from = (b * seq + s) * width + h * head_dim;
                    let to = ((b * heads + h) * seq + s) * head_dim;
                    out[to..to + head_dim].copy_from_slice(&src[from..from + head_dim]);
                }
            }
        }
        self.push(
            "split_heads",
            Tensor::from_parts(vec![batch * heads, seq, head_dim], out),
            Op::SplitHeads {
                a,
                batch,
                seq,
                heads,
                head_dim,
            },
        )
    }

    /// Inverse of [`Tape::split_heads`]: `[B*H, S, D] -> [B, S, H*D]`.
    pub fn merge_heads(&mut self, a: Var, heads: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 3 || heads == 0 || !sa[0].is_multiple_of(heads) {
            return Err(Error::shape("merge_heads", &sa, &[heads]));
        }
        let (batch, seq, head_dim) = (sa[0] / heads, sa[1], sa[2]);
        let width = heads * head_dim;
        let src = self.value(a).data();
        let mut out = vec![0.0; src.len()];
        for b in 0..batch {
            for s in 0..seq {
                for h in 0..heads {
                    let to = (b * seq + s) * width + h * head_dim;
                    let from = ((b * heads + h) * seq + s) * head_dim;
                    out[to..to + head_dim].copy_from_slice(&src[from..from + head_dim]);
                }
            }
        }
        self.push(
            "merge_heads",
            Tensor::from_parts(vec![batch, seq, width], out),
            Op::MergeHeads {
                a,
                batch,
                seq,
                heads,
                head_dim,
            },
        )
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let width = *self.shape(a).last().unwrap();
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_exact_mut(width) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let shape = self.shape(a).to_vec();
        self.push(
            "softmax",
            Tensor::from_parts(shape, out),
            Op::Softmax { a, width },
        )
    }

    /// Layer normalization over the last axis with learnable gain and bias.
    ///
    /// The variance is floored at [`LAYER_NORM_EPS`], so a constant slice maps
    /// to zeros before gain and bias are applied.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let width = *sx.last().unwrap();
        for p in [gain, bias] {
            if self.shape(p) != [width] {
                return Err(Error::shape("layer_norm", &sx, self.shape(p)));
            }
        }
        let src = self.value(x).data();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = src.len() / width;
        let mut xhat = vec![0.0; src.len()];
        let mut out = vec![0.0; src.len()];
        let mut inv_std = Vec::with_capacity(rows);
        let mut floored = Vec::with_capacity(rows);
        for (r, row) in src.chunks_exact(width).enumerate() {
            let mean = row.iter().sum::<f64>() / width as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / width as f64;
            let is_floored = var <= LAYER_NORM_EPS;
            let s = 1.0 / var.max(LAYER_NORM_EPS).sqrt();
            for j in 0..width {
                let h = (row[j] - mean) * s;
                xhat[r * width + j] = h;
                out[r * width + j] = h * g[j] + b[j];
            }
            inv_std.push(s);
            floored.push(is_floored);
        }
        self.push(
            "layer_norm",
            Tensor::from_parts(sx, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                width,
                xhat,
                inv_std,
                floored,
            },
        )
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).data().iter().map(|&x| gelu_value(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push("gelu", Tensor::from_parts(shape, out), Op::Gelu { a })
    }

    /// Inverted dropout; the identity (and no record entry) when `rate == 0`.
    pub fn dropout<R: Rng>(&mut self, a: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Parameter(format!("dropout rate {rate} not in [0, 1)")));
        }
        if rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(a).numel())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(&mask)
            .map(|(x, m)| x * m)
            .collect();
        let shape = self.shape(a).to_vec();
        self.push("dropout", Tensor::from_parts(shape, out), Op::Dropout { a, mask })
    }

    /// Dilated causal convolution, channel-first: `x [.., C_in, N]`,
    /// `w [C_out, C_in, k]`, optional `bias [C_out]` → `[.., C_out, N]`.
    ///
    /// The input is implicitly left-padded with `(k - 1) * dilation` zeros, so
    /// output position `t` only sees inputs at positions `<= t`. Tap `k - 1`
    /// of the kernel is aligned with the current position.
    pub fn conv1d_causal(&mut self, x: Var, w: Var, bias: Option<Var>, dilation: usize) -> Result<Var> {
        self.conv_impl(x, w, bias, dilation, false)
    }

    /// Same as [`Tape::conv1d_causal`] for token-major input `x [.., N, C_in]`,
    /// returning `[.., N, C_out]`.
    pub fn conv1d_causal_tokens(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        dilation: usize,
    ) -> Result<Var> {
        self.conv_impl(x, w, bias, dilation, true)
    }

    fn conv_impl(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        dilation: usize,
        channels_last: bool,
    ) -> Result<Var> {
        if dilation < 1 {
            return Err(Error::Parameter("convolution dilation must be >= 1".into()));
        }
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let err = || Error::shape("conv1d_causal", &sx, &sw);
        let (bd, d0, d1) = split_matrix_shape(&sx).ok_or_else(err)?;
        let (c_in, len) = if channels_last { (d1, d0) } else { (d0, d1) };
        if sw.len() != 3 || sw[1] != c_in {
            return Err(err());
        }
        let (c_out, kernel) = (sw[0], sw[2]);
        if let Some(b) = bias {
            if self.shape(b) != [c_out] {
                return Err(Error::shape("conv1d_causal", &sw, self.shape(b)));
            }
        }
        let geom = ConvGeom {
            batch: bd.iter().product(),
            c_in,
            c_out,
            len,
            kernel,
            dilation,
            channels_last,
        };
        let mut out = vec![0.0; geom.batch * c_out * len];
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for bi in 0..geom.batch {
                for (co, &bias) in bv.iter().enumerate() {
                    for t in 0..len {
                        out[geom.out_index(bi, co, t)] = bias;
                    }
                }
            }
        }
        let (xv, wv) = (self.value(x).data(), self.value(w).data());
        for bi in 0..geom.batch {
            for j in 0..kernel {
                let shift = (kernel - 1 - j) * dilation;
                if shift >= len {
                    continue;
                }
                let cols = len - shift;
                gemm(
                    1.0,
                    wv,
                    geom.tap_view(j),
                    xv,
                    geom.in_view(bi, 0, cols),
                    1.0,
                    &mut out,
                    geom.out_view(bi, shift, cols),
                );
            }
        }
        let mut shape = bd.to_vec();
        if channels_last {
            shape.extend([len, c_out]);
        } else {
            shape.extend([c_out, len]);
        }
        self.push(
            "conv1d_causal",
            Tensor::from_parts(shape, out),
            Op::Conv1d { x, w, bias, geom },
        )
    }

    /// Mean squared error between equally shaped tensors, as a scalar.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        if self.shape(pred) != self.shape(target) {
            return Err(Error::shape("mse_loss", self.shape(pred), self.shape(target)));
        }
        let (p, t) = (self.value(pred).data(), self.value(target).data());
        let total: f64 = p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum();
        self.push(
            "mse_loss",
            Tensor::scalar(total / p.len() as f64),
            Op::Mse { pred, target },
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = self.value(a).data().iter().sum();
        self.push("sum", Tensor::scalar(total), Op::Sum { a })
    }
}

impl ConvGeom {
    // Per-sample matrices are (channels x positions) views.
    fn mat(&self, sample: usize, channels: usize, from: usize, cols: usize) -> View {
        let base = sample * channels * self.len;
        if self.channels_last {
            View {
                off: base + from * channels,
                rows: channels,
                cols,
                rs: 1,
                cs: channels,
            }
        } else {
            View {
                off: base + from,
                rows: channels,
                cols,
                rs: self.len,
                cs: 1,
            }
        }
    }

    pub(crate) fn in_view(&self, sample: usize, from: usize, cols: usize) -> View {
        self.mat(sample, self.c_in, from, cols)
    }

    pub(crate) fn out_view(&self, sample: usize, from: usize, cols: usize) -> View {
        self.mat(sample, self.c_out, from, cols)
    }

    /// Kernel tap `j` as a `C_out x C_in` view into `w [C_out, C_in, k]`.
    pub(crate) fn tap_view(&self, j: usize) -> View {
        View {
            off: j,
            rows: self.c_out,
            cols: self.c_in,
            rs: self.c_in * self.kernel,
            cs: self.kernel,
        }
    }

    pub(crate) fn out_index(&self, sample: usize, co: usize, t: usize) -> usize {
        let base = sample * self.c_out * self.len;
        if self.channels_last {
            base + t * self.c_out + co
        } else {
            base + co * self.len + t
        }
    }
}
