//! Dense numeric kernels backing the autodiff tape.
//!
//! All kernels are f64 and deterministic: parallel schedules write disjoint
//! output regions or reduce partial sums in fixed chunk order, so the
//! `parallel` feature never changes results.

use ndarray::{Array1, Array2, Array3, Array4, ArrayView2, ArrayView3, ArrayView4, Axis};

use crate::par;

/// 2-D convolution, stride 1, symmetric zero padding. `x` is C×H×W,
/// `w` is O×C×k×k, `b` is O.
pub fn conv2d(x: ArrayView3<f64>, w: ArrayView4<f64>, b: &Array1<f64>, pad: usize) -> Array3<f64> {
    let (ci, h, wd) = x.dim();
    let (co, ciw, kh, kw) = w.dim();
    assert_eq!(ci, ciw, "conv2d: input channels {} vs kernel {}", ci, ciw);
    assert_eq!(b.len(), co);
    let mut out = Array3::<f64>::zeros((co, h, wd));
    let plane = h * wd;
    let xs = x.as_standard_layout();
    let xs = xs.as_slice().unwrap();
    let ws = w.as_standard_layout();
    let ws = ws.as_slice().unwrap();
    let outs = out.as_slice_mut().unwrap();
    par::for_each_chunk_mut(outs, plane, |o, oplane| {
        conv2d_one_channel(xs, ws, b[o], o, ci, h, wd, kh, kw, pad, oplane);
    });
    out
}

/// Sequential reference for `conv2d`; used by the benchmark suite.
pub fn conv2d_seq(
    x: ArrayView3<f64>,
    w: ArrayView4<f64>,
    b: &Array1<f64>,
    pad: usize,
) -> Array3<f64> {
    let (ci, h, wd) = x.dim();
    let (co, _, kh, kw) = w.dim();
    let mut out = Array3::<f64>::zeros((co, h, wd));
    let plane = h * wd;
    let xs = x.as_standard_layout();
    let xs = xs.as_slice().unwrap();
    let ws = w.as_standard_layout();
    let ws = ws.as_slice().unwrap();
    let outs = out.as_slice_mut().unwrap();
    for (o, oplane) in outs.chunks_mut(plane).enumerate() {
        conv2d_one_channel(xs, ws, b[o], o, ci, h, wd, kh, kw, pad, oplane);
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv2d_one_channel(
    xs: &[f64],
    ws: &[f64],
    bias: f64,
    o: usize,
    ci: usize,
    h: usize,
    wd: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    oplane: &mut [f64],
) {
    oplane.fill(bias);
    for c in 0..ci {
        let xplane = &xs[c * h * wd..(c + 1) * h * wd];
        let wbase = ((o * ci) + c) * kh * kw;
        for ky in 0..kh {
            for kx in 0..kw {
                let wv = ws[wbase + ky * kw + kx];
                if wv == 0.0 {
                    continue;
                }
                // output (y, x) reads input (y + ky - pad, x + kx - pad)
                let dy = ky as isize - pad as isize;
                let dx = kx as isize - pad as isize;
                let y0 = (-dy).max(0) as usize;
                let y1 = ((h as isize - dy).min(h as isize)).max(0) as usize;
                let x0 = (-dx).max(0) as usize;
                let x1 = ((wd as isize - dx).min(wd as isize)).max(0) as usize;
                for y in y0..y1 {
                    let iy = (y as isize + dy) as usize;
                    let orow = &mut oplane[y * wd + x0..y * wd + x1];
                    let irow = &xplane[iy * wd + (x0 as isize + dx) as usize..];
                    for (ov, iv) in orow.iter_mut().zip(irow.iter()) {
                        *ov += wv * iv;
                    }
                }
            }
        }
    }
}

/// Gradient of `conv2d` w.r.t. the input: correlation of `gout` with the
/// kernel flipped in both spatial axes and transposed in channels.
pub fn conv2d_input_grad(
    w: ArrayView4<f64>,
    gout: ArrayView3<f64>,
    pad: usize,
) -> Array3<f64> {
    let (co, ci, kh, kw) = w.dim();
    let (cog, _, _) = gout.dim();
    assert_eq!(co, cog);
    // flipped/transposed kernel: [ci][co][kh][kw]
    let mut wt = Array4::<f64>::zeros((ci, co, kh, kw));
    for o in 0..co {
        for c in 0..ci {
            for ky in 0..kh {
                for kx in 0..kw {
                    wt[[c, o, kh - 1 - ky, kw - 1 - kx]] = w[[o, c, ky, kx]];
                }
            }
        }
    }
    let zeros = Array1::<f64>::zeros(ci);
    conv2d(gout, wt.view(), &zeros, kh - 1 - pad)
}

/// Gradient of `conv2d` w.r.t. the kernel.
pub fn conv2d_weight_grad(
    x: ArrayView3<f64>,
    gout: ArrayView3<f64>,
    kh: usize,
    kw: usize,
    pad: usize,
) -> Array4<f64> {
    let (ci, h, wd) = x.dim();
    let (co, _, _) = gout.dim();
    let mut dw = Array4::<f64>::zeros((co, ci, kh, kw));
    let xs = x.as_standard_layout();
    let xs = xs.as_slice().unwrap();
    let gs = gout.as_standard_layout();
    let gs = gs.to_owned();
    let gs = gs.as_slice().unwrap().to_vec();
    let dws = dw.as_slice_mut().unwrap();
    let per_out = ci * kh * kw;
    par::for_each_chunk_mut(dws, per_out, |o, dchunk| {
        let gplane = &gs[o * h * wd..(o + 1) * h * wd];
        for c in 0..ci {
            let xplane = &xs[c * h * wd..(c + 1) * h * wd];
            for ky in 0..kh {
                for kx in 0..kw {
                    let dy = ky as isize - pad as isize;
                    let dx = kx as isize - pad as isize;
                    let y0 = (-dy).max(0) as usize;
                    let y1 = ((h as isize - dy).min(h as isize)).max(0) as usize;
                    let x0 = (-dx).max(0) as usize;
                    let x1 = ((wd as isize - dx).min(wd as isize)).max(0) as usize;
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let iy = (y as isize + dy) as usize;
                        let grow = &gplane[y * wd + x0..y * wd + x1];
                        let irow = &xplane[iy * wd + (x0 as isize + dx) as usize..];
                        for (gv, iv) in grow.iter().zip(irow.iter()) {
                            acc += gv * iv;
                        }
                    }
                    dchunk[(c * kh + ky) * kw + kx] = acc;
                }
            }
        }
    });
    dw
}

/// Per-output-channel sum of `gout` (bias gradient).
pub fn conv2d_bias_grad(gout: ArrayView3<f64>) -> Array1<f64> {
    gout.sum_axis(Axis(2)).sum_axis(Axis(1))
}

/// 2×2 transposed convolution with stride 2 (spatial size doubles).
/// `w` is Cin×Cout×2×2.
pub fn conv_transpose2(x: ArrayView3<f64>, w: ArrayView4<f64>, b: &Array1<f64>) -> Array3<f64> {
    let (ci, h, wd) = x.dim();
    let (ciw, co, _, _) = w.dim();
    assert_eq!(ci, ciw);
    let mut out = Array3::<f64>::zeros((co, 2 * h, 2 * wd));
    let plane = 4 * h * wd;
    let outs = out.as_slice_mut().unwrap();
    par::for_each_chunk_mut(outs, plane, |o, oplane| {
        oplane.fill(b[o]);
        for c in 0..ci {
            for y in 0..h {
                for xw in 0..wd {
                    let v = x[[c, y, xw]];
                    for ky in 0..2 {
                        for kx in 0..2 {
                            oplane[(2 * y + ky) * 2 * wd + 2 * xw + kx] += v * w[[c, o, ky, kx]];
                        }
                    }
                }
            }
        }
    });
    out
}

/// Gradients of `conv_transpose2` w.r.t. input, kernel, and bias.
pub fn conv_transpose2_grads(
    x: ArrayView3<f64>,
    w: ArrayView4<f64>,
    gout: ArrayView3<f64>,
) -> (Array3<f64>, Array4<f64>, Array1<f64>) {
    let (ci, h, wd) = x.dim();
    let (_, co, _, _) = w.dim();
    let mut dx = Array3::<f64>::zeros((ci, h, wd));
    let mut dw = Array4::<f64>::zeros((ci, co, 2, 2));
    for c in 0..ci {
        for y in 0..h {
            for xw in 0..wd {
                let mut acc = 0.0;
                for o in 0..co {
                    for ky in 0..2 {
                        for kx in 0..2 {
                            let g = gout[[o, 2 * y + ky, 2 * xw + kx]];
                            acc += g * w[[c, o, ky, kx]];
                            dw[[c, o, ky, kx]] += g * x[[c, y, xw]];
                        }
                    }
                }
                dx[[c, y, xw]] = acc;
            }
        }
    }
    let db = conv2d_bias_grad(gout);
    (dx, dw, db)
}

/// 2×2 max pooling with stride 2. Returns the pooled map and the flat index
/// (into the input) of each selected element. Ties break toward the earliest
/// element in scan order.
pub fn maxpool2(x: ArrayView3<f64>) -> (Array3<f64>, Vec<usize>) {
    let (c, h, wd) = x.dim();
    assert!(h % 2 == 0 && wd % 2 == 0, "maxpool2 requires even spatial dims");
    let (oh, ow) = (h / 2, wd / 2);
    let mut out = Array3::<f64>::zeros((c, oh, ow));
    let mut arg = vec![0usize; c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            for xw in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut bi = 0;
                for ky in 0..2 {
                    for kx in 0..2 {
                        let (iy, ix) = (2 * y + ky, 2 * xw + kx);
                        let v = x[[ch, iy, ix]];
                        if v > best {
                            best = v;
                            bi = (ch * h + iy) * wd + ix;
                        }
                    }
                }
                out[[ch, y, xw]] = best;
                arg[(ch * oh + y) * ow + xw] = bi;
            }
        }
    }
    (out, arg)
}

pub fn maxpool2_grad(gout: ArrayView3<f64>, arg: &[usize], in_dim: (usize, usize, usize)) -> Array3<f64> {
    let mut dx = Array3::<f64>::zeros(in_dim);
    let dxs = dx.as_slice_mut().unwrap();
    for (g, &i) in gout.iter().zip(arg.iter()) {
        dxs[i] += g;
    }
    dx
}

/// Source coordinate mapping for bilinear resize with half-pixel centers:
/// returns (lower index, upper index, weight of upper).
fn bilinear_coords(dst: usize, src_len: usize, scale: f64) -> (usize, usize, f64) {
    let s = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
    let i0 = (s.floor() as usize).min(src_len - 1);
    let i1 = (i0 + 1).min(src_len - 1);
    (i0, i1, s - i0 as f64)
}

/// Bilinear resize of a C×H×W tensor to C×oh×ow (half-pixel convention).
pub fn resize_bilinear(x: ArrayView3<f64>, oh: usize, ow: usize) -> Array3<f64> {
    let (c, h, wd) = x.dim();
    let sy = h as f64 / oh as f64;
    let sx = wd as f64 / ow as f64;
    let mut out = Array3::<f64>::zeros((c, oh, ow));
    for ch in 0..c {
        for y in 0..oh {
            let (y0, y1, fy) = bilinear_coords(y, h, sy);
            for xw in 0..ow {
                let (x0, x1, fx) = bilinear_coords(xw, wd, sx);
                let v = x[[ch, y0, x0]] * (1.0 - fy) * (1.0 - fx)
                    + x[[ch, y0, x1]] * (1.0 - fy) * fx
                    + x[[ch, y1, x0]] * fy * (1.0 - fx)
                    + x[[ch, y1, x1]] * fy * fx;
                out[[ch, y, xw]] = v;
            }
        }
    }
    out
}

/// Adjoint of `resize_bilinear`: scatters output gradients back to the input grid.
pub fn resize_bilinear_adjoint(
    gout: ArrayView3<f64>,
    in_dim: (usize, usize, usize),
) -> Array3<f64> {
    let (c, oh, ow) = gout.dim();
    let (ci, h, wd) = in_dim;
    assert_eq!(c, ci);
    let sy = h as f64 / oh as f64;
    let sx = wd as f64 / ow as f64;
    let mut dx = Array3::<f64>::zeros(in_dim);
    for ch in 0..c {
        for y in 0..oh {
            let (y0, y1, fy) = bilinear_coords(y, h, sy);
            for xw in 0..ow {
                let (x0, x1, fx) = bilinear_coords(xw, wd, sx);
                let g = gout[[ch, y, xw]];
                dx[[ch, y0, x0]] += g * (1.0 - fy) * (1.0 - fx);
                dx[[ch, y0, x1]] += g * (1.0 - fy) * fx;
                dx[[ch, y1, x0]] += g * fy * (1.0 - fx);
                dx[[ch, y1, x1]] += g * fy * fx;
            }
        }
    }
    dx
}

/// In-place max-stabilized softmax over one slice.
pub fn softmax_slice(v: &mut [f64]) {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// Column-normalized softmax of a 2-D matrix (every column sums to 1).
pub fn softmax_cols(l: ArrayView2<f64>) -> Array2<f64> {
    let (m, n) = l.dim();
    let mut out = Array2::<f64>::zeros((m, n));
    let mut col = vec![0.0; m];
    for j in 0..n {
        for i in 0..m {
            col[i] = l[[i, j]];
        }
        softmax_slice(&mut col);
        for i in 0..m {
            out[[i, j]] = col[i];
        }
    }
    out
}

/// Fused position-attention aggregation without materializing the
/// (H·W)×(H·W) attention map. Inputs `a`, `b` are r×n query/key
/// projections, `c` is C×n; output F is C×n with
/// F[:, j] = Σ_i softmax_i(aᵀb)[i, j] · c[:, i].
pub fn attention_aggregate(
    a: ArrayView2<f64>,
    b: ArrayView2<f64>,
    c: ArrayView2<f64>,
) -> Array2<f64> {
    let (r, n) = a.dim();
    assert_eq!(b.dim(), (r, n), "attention_aggregate: a/b shape mismatch");
    let (cc, nc) = c.dim();
    assert_eq!(nc, n, "attention_aggregate: c width mismatch");
    let at = transpose_to_owned(a);
    let bt = transpose_to_owned(b);
    let ct = transpose_to_owned(c);
    let mut ft = Array2::<f64>::zeros((n, cc));
    let fts = ft.as_slice_mut().unwrap();
    par::for_each_chunk_mut(fts, cc, |j, frow| {
        let mut d = column_attention(&at, &bt, j, n, r);
        softmax_slice(&mut d);
        for i in 0..n {
            let di = d[i];
            let crow = ct.row(i);
            let crow = crow.as_slice().unwrap();
            for (fv, cv) in frow.iter_mut().zip(crow.iter()) {
                *fv += di * cv;
            }
        }
    });
    transpose_to_owned(ft.view())
}

/// Sequential reference for `attention_aggregate`; used by the benchmarks.
pub fn attention_aggregate_seq(
    a: ArrayView2<f64>,
    b: ArrayView2<f64>,
    c: ArrayView2<f64>,
) -> Array2<f64> {
    let (r, n) = a.dim();
    let (cc, _) = c.dim();
    let at = transpose_to_owned(a);
    let bt = transpose_to_owned(b);
    let ct = transpose_to_owned(c);
    let mut ft = Array2::<f64>::zeros((n, cc));
    for (j, frow) in ft.as_slice_mut().unwrap().chunks_mut(cc).enumerate() {
        let mut d = column_attention(&at, &bt, j, n, r);
        softmax_slice(&mut d);
        for i in 0..n {
            let di = d[i];
            for (fv, cv) in frow.iter_mut().zip(ct.row(i).as_slice().unwrap()) {
                *fv += di * cv;
            }
        }
    }
    transpose_to_owned(ft.view())
}

fn column_attention(at: &Array2<f64>, bt: &Array2<f64>, j: usize, n: usize, r: usize) -> Vec<f64> {
    let bj = bt.row(j);
    let bj = bj.as_slice().unwrap();
    let mut d = vec![0.0; n];
    for i in 0..n {
        let ai = at.row(i);
        let ai = ai.as_slice().unwrap();
        let mut dot = 0.0;
        for k in 0..r {
            dot += ai[k] * bj[k];
        }
        d[i] = dot;
    }
    d
}

/// Gradients of `attention_aggregate` w.r.t. a, b, c. The attention columns
/// are recomputed per output column, so no (H·W)² buffer is needed.
pub fn attention_aggregate_grads(
    a: ArrayView2<f64>,
    b: ArrayView2<f64>,
    c: ArrayView2<f64>,
    gout: ArrayView2<f64>,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let (r, n) = a.dim();
    let (cc, _) = c.dim();
    let at = transpose_to_owned(a);
    let bt = transpose_to_owned(b);
    let ct = transpose_to_owned(c);
    let gt = transpose_to_owned(gout);

    // partial per chunk: (dat, dct, rows of dbt in that chunk)
    type Partial = (Array2<f64>, Array2<f64>, Vec<(usize, Vec<f64>)>);
    let partial = par::chunked_reduce(
        n,
        |range| -> Partial {
            let mut dat = Array2::<f64>::zeros((n, r));
            let mut dct = Array2::<f64>::zeros((n, cc));
            let mut dbt_rows = Vec::with_capacity(range.len());
            for j in range {
                let mut d = column_attention(&at, &bt, j, n, r);
                softmax_slice(&mut d);
                let grow = gt.row(j);
                let grow = grow.as_slice().unwrap();
                // g[i] = c_col_i · gout_col_j ; softmax backward per column
                let mut g = vec![0.0; n];
                let mut s = 0.0;
                for i in 0..n {
                    let crow = ct.row(i);
                    let crow = crow.as_slice().unwrap();
                    let mut dot = 0.0;
                    for k in 0..cc {
                        dot += crow[k] * grow[k];
                    }
                    g[i] = dot;
                    s += d[i] * dot;
                }
                let bj = bt.row(j);
                let bj = bj.as_slice().unwrap();
                let mut dbrow = vec![0.0; r];
                for i in 0..n {
                    let dl = d[i] * (g[i] - s);
                    // dL/da_col_i += dl * b_col_j
                    let mut darow = dat.row_mut(i);
                    let darow = darow.as_slice_mut().unwrap();
                    for k in 0..r {
                        darow[k] += dl * bj[k];
                        dbrow[k] += dl * at[[i, k]];
                    }
                    // dL/dc_col_i += d[i] * gout_col_j
                    let mut dcrow = dct.row_mut(i);
                    let dcrow = dcrow.as_slice_mut().unwrap();
                    for k in 0..cc {
                        dcrow[k] += d[i] * grow[k];
                    }
                }
                dbt_rows.push((j, dbrow));
            }
            (dat, dct, dbt_rows)
        },
        |mut acc, mut p| {
            acc.0 += &p.0;
            acc.1 += &p.1;
            acc.2.append(&mut p.2);
            acc
        },
    )
    .expect("attention_aggregate_grads: empty input");

    let (dat, dct, dbt_rows) = partial;
    let mut dbt = Array2::<f64>::zeros((n, r));
    for (j, row) in dbt_rows {
        dbt.row_mut(j).as_slice_mut().unwrap().copy_from_slice(&row);
    }
    (
        transpose_to_owned(dat.view()),
        transpose_to_owned(dbt.view()),
        transpose_to_owned(dct.view()),
    )
}

fn transpose_to_owned(m: ArrayView2<f64>) -> Array2<f64> {
    m.t().as_standard_layout().to_owned()
}
