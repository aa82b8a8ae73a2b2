use super::gemm::{gemm, View};
use super::ops::gelu_slope;
use super::tape::{Node, Op, Var};
use super::tensor::Tensor;

/// Adds into the gradient buffer of `v`, allocating it on first use. Inputs
/// that do not require a gradient are skipped.
fn acc<F: FnOnce(&mut [f64])>(nodes: &[Node], grads: &mut [Option<Tensor>], v: Var, f: F) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let slot = &mut grads[v.0];
    let g = slot.get_or_insert_with(|| Tensor::zeros(nodes[v.0].value.shape()));
    f(g.data_mut());
}

/// Pushes the output gradient `g` of node `i` to its inputs.
pub(crate) fn propagate(nodes: &[Node], i: usize, g: &[f64], grads: &mut [Option<Tensor>]) {
    let val = |v: Var| nodes[v.0].value.data();
    match nodes[i].op {
        Op::Leaf => {}
        Op::MatMul {
            a,
            b,
            trans_b,
            batch,
            a_batched,
            b_batched,
            p,
            q,
            r,
        } => {
            let b_view = |off: usize| {
                if trans_b {
                    View::row_major(off, r, q).t()
                } else {
                    View::row_major(off, q, r)
                }
            };
            if !b_batched {
                let rows = batch * p;
                acc(nodes, grads, a, |ga| {
                    gemm(
                        1.0,
                        g,
                        View::row_major(0, rows, r),
                        val(b),
                        b_view(0).t(),
                        1.0,
                        ga,
                        View::row_major(0, rows, q),
                    )
                });
                acc(nodes, grads, b, |gb| {
                    gemm(
                        1.0,
                        val(a),
                        View::row_major(0, rows, q).t(),
                        g,
                        View::row_major(0, rows, r),
                        1.0,
                        gb,
                        b_view(0),
                    )
                });
            } else {
                let a_off = |k: usize| if a_batched { k * p * q } else { 0 };
                acc(nodes, grads, a, |ga| {
                    for k in 0..batch {
                        gemm(
                            1.0,
                            g,
                            View::row_major(k * p * r, p, r),
                            val(b),
                            b_view(k * q * r).t(),
                            1.0,
                            ga,
                            View::row_major(a_off(k), p, q),
                        );
                    }
                });
                acc(nodes, grads, b, |gb| {
                    for k in 0..batch {
                        gemm(
                            1.0,
                            val(a),
                            View::row_major(a_off(k), p, q).t(),
                            g,
                            View::row_major(k * p * r, p, r),
                            1.0,
                            gb,
                            b_view(k * q * r),
                        );
                    }
                });
            }
        }
        Op::Affine { x, w, b, rows, q, r } => {
            acc(nodes, grads, x, |gx| {
                gemm(
                    1.0,
                    g,
                    View::row_major(0, rows, r),
                    val(w),
                    View::row_major(0, q, r).t(),
                    1.0,
                    gx,
                    View::row_major(0, rows, q),
                )
            });
            acc(nodes, grads, w, |gw| {
                gemm(
                    1.0,
                    val(x),
                    View::row_major(0, rows, q).t(),
                    g,
                    View::row_major(0, rows, r),
                    1.0,
                    gw,
                    View::row_major(0, q, r),
                )
            });
            if let Some(b) = b {
                acc(nodes, grads, b, |gb| {
                    for row in g.chunks_exact(r) {
                        for (o, v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                });
            }
        }
        Op::Add { a, b } => {
            for v in [a, b] {
                acc(nodes, grads, v, |gv| {
                    for (o, x) in gv.iter_mut().zip(g) {
                        *o += x;
                    }
                });
            }
        }
        Op::AddSuffix { a, b } => {
            acc(nodes, grads, a, |ga| {
                for (o, x) in ga.iter_mut().zip(g) {
                    *o += x;
                }
            });
            acc(nodes, grads, b, |gb| {
                let n = gb.len();
                for chunk in g.chunks_exact(n) {
                    for (o, x) in gb.iter_mut().zip(chunk) {
                        *o += x;
                    }
                }
            });
        }
        Op::Scale { a, k } => acc(nodes, grads, a, |ga| {
            for (o, x) in ga.iter_mut().zip(g) {
                *o += k * x;
            }
        }),
        Op::Transpose { a, batch, p, q } => acc(nodes, grads, a, |ga| {
            for bi in 0..batch {
                let base = bi * p * q;
                for i in 0..p {
                    for j in 0..q {
                        ga[base + i * q + j] += g[base + j * p + i];
                    }
                }
            }
        }),
        Op::Reshape { a } => acc(nodes, grads, a, |ga| {
            for (o, x) in ga.iter_mut().zip(g) {
                *o += x;
            }
        }),
        Op::SplitHeads {
            a,
            batch,
            seq,
            heads,
            head_dim,
        } => acc(nodes, grads, a, |ga| {
            let width = heads * head_dim;
            for b in 0..batch {
                for s in 0..seq {
                    for h in 0..heads {
                        let src = (b * seq + s) * width + h * head_dim;
                        let dst = ((b * heads + h) * seq + s) * head_dim;
                        for d in 0..head_dim {
                            ga[src + d] += g[dst + d];
                        }
                    }
                }
            }
        }),
        Op::MergeHeads {
            a,
            batch,
            seq,
            heads,
            head_dim,
        } => acc(nodes, grads, a, |ga| {
            let width = heads * head_dim;
            for b in 0..batch {
                for s in 0..seq {
                    for h in 0..heads {
                        let merged = (b * seq + s) * width + h * head_dim;
                        let split = ((b * heads + h) * seq + s) * head_dim;
                        for d in 0..head_dim {
                            ga[split + d] += g[merged + d];
                        }
                    }
                }
            }
        }),
        Op::Softmax { a, width } => {
            let y = nodes[i].value.data();
            acc(nodes, grads, a, |ga| {
                for ((gy, yy), gx) in g
                    .chunks_exact(width)
                    .zip(y.chunks_exact(width))
                    .zip(ga.chunks_exact_mut(width))
                {
                    let dot: f64 = gy.iter().zip(yy).map(|(u, v)| u * v).sum();
                    for j in 0..width {
                        gx[j] += yy[j] * (gy[j] - dot);
                    }
                }
            });
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            width,
            ref xhat,
            ref inv_std,
            ref floored,
        } => {
            let gv = val(gain);
            acc(nodes, grads, x, |gx| {
                let n = width as f64;
                let mut dxhat = vec![0.0; width];
                for (r, (&s, &fl)) in inv_std.iter().zip(floored).enumerate() {
                    let row = r * width..(r + 1) * width;
                    for (j, d) in dxhat.iter_mut().enumerate() {
                        *d = g[row.start + j] * gv[j];
                    }
                    let mean_d = dxhat.iter().sum::<f64>() / n;
                    let h = &xhat[row.clone()];
                    // With the variance floor active the scale is constant.
                    let mean_dh = if fl {
                        0.0
                    } else {
                        dxhat.iter().zip(h).map(|(a, b)| a * b).sum::<f64>() / n
                    };
                    for j in 0..width {
                        gx[row.start + j] += s * (dxhat[j] - mean_d - h[j] * mean_dh);
                    }
                }
            });
            acc(nodes, grads, gain, |gg| {
                for (gy, h) in g.chunks_exact(width).zip(xhat.chunks_exact(width)) {
                    for j in 0..width {
                        gg[j] += gy[j] * h[j];
                    }
                }
            });
            acc(nodes, grads, bias, |gb| {
                for gy in g.chunks_exact(width) {
                    for (o, v) in gb.iter_mut().zip(gy) {
                        *o += v;
                    }
                }
            });
        }
        Op::Gelu { a } => {
            let xs = val(a);
            acc(nodes, grads, a, |ga| {
                for ((o, &x), gy) in ga.iter_mut().zip(xs).zip(g) {
                    *o += gy * gelu_slope(x);
                }
            });
        }
        Op::Conv1d { x, w, bias, geom } => {
            let steps = |j: usize| {
                let shift = (geom.kernel - 1 - j) * geom.dilation;
                (shift < geom.len).then(|| (shift, geom.len - shift))
            };
            acc(nodes, grads, x, |gx| {
                for bi in 0..geom.batch {
                    for j in 0..geom.kernel {
                        let Some((shift, cols)) = steps(j) else { continue };
                        gemm(
                            1.0,
                            val(w),
                            geom.tap_view(j).t(),
                            g,
                            geom.out_view(bi, shift, cols),
                            1.0,
                            gx,
                            geom.in_view(bi, 0, cols),
                        );
                    }
                }
            });
            acc(nodes, grads, w, |gw| {
                for bi in 0..geom.batch {
                    for j in 0..geom.kernel {
                        let Some((shift, cols)) = steps(j) else { continue };
                        gemm(
                            1.0,
                            g,
                            geom.out_view(bi, shift, cols),
                            val(x),
                            geom.in_view(bi, 0, cols).t(),
                            1.0,
                            gw,
                            geom.tap_view(j),
                        );
                    }
                }
            });
            if let Some(b) = bias {
                acc(nodes, grads, b, |gb| {
                    for bi in 0..geom.batch {
                        for (co, o) in gb.iter_mut().enumerate() {
                            for t in 0..geom.len {
                                *o += g[geom.out_index(bi, co, t)];
                            }
                        }
                    }
                });
            }
        }
        Op::Mse { pred, target } => {
            let (p, t) = (val(pred), val(target));
            let k = 2.0 * g[0] / p.len() as f64;
            acc(nodes, grads, pred, |gp| {
                for ((o, a), b) in gp.iter_mut().zip(p).zip(t) {
                    *o += k * (a - b);
                }
            });
            acc(nodes, grads, target, |gt| {
                for ((o, a), b) in gt.iter_mut().zip(p).zip(t) {
                    *o -= k * (a - b);
                }
            });
        }
        Op::Sum { a } => acc(nodes, grads, a, |ga| {
            for o in ga.iter_mut() {
                *o += g[0];
            }
        }),
        Op::Dropout { a, ref mask } => acc(nodes, grads, a, |ga| {
            for ((o, m), gy) in ga.iter_mut().zip(mask).zip(g) {
                *o += m * gy;
            }
        }),
    }
}
