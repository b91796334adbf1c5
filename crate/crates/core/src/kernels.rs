//! Naive numeric kernels with fixed summation orders.
//!
//! Every reduction adds its terms in ascending index order into an
//! accumulator that starts at `+0.0`. Terms whose multiplicand is exactly
//! zero are skipped: for finite operands such a term is `±0.0`, and adding
//! `±0.0` to an accumulator that started at `+0.0` never changes its bits,
//! so the skip is invisible in the output.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn expect_rank(t: &Tensor, rank: usize, what: &str) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::shape(format!(
            "{what}: expected rank {rank}, got shape {:?}",
            t.shape()
        )));
    }
    Ok(())
}

/// `c += a_scale * b`, elementwise.
#[inline]
fn axpy(c: &mut [f64], a_scale: f64, b: &[f64]) {
    for (ci, bi) in c.iter_mut().zip(b) {
        *ci += a_scale * bi;
    }
}

/// Matrix product `a[m,k] · b[k,n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    expect_rank(a, 2, "matmul lhs")?;
    expect_rank(b, 2, "matmul rhs")?;
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul inner dims differ: {:?} · {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let c = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let s = ad[i * k + p];
            if s != 0.0 {
                axpy(c, s, &bd[p * n..(p + 1) * n]);
            }
        }
    }
    Tensor::new(&[m, n], out)
}

/// `aᵀ · b` for `a[k,m]`, `b[k,n]`, summing over the shared leading index.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    expect_rank(a, 2, "matmul_tn lhs")?;
    expect_rank(b, 2, "matmul_tn rhs")?;
    let (k, m) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul_tn leading dims differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let brow = &bd[p * n..(p + 1) * n];
        if brow.iter().all(|&v| v == 0.0) {
            continue;
        }
        for i in 0..m {
            let s = ad[p * m + i];
            if s != 0.0 {
                axpy(&mut out[i * n..(i + 1) * n], s, brow);
            }
        }
    }
    Tensor::new(&[m, n], out)
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    expect_rank(a, 2, "transpose")?;
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let ad = a.data();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = ad[i * n + j];
        }
    }
    Tensor::new(&[n, m], out)
}

/// Adds `bias[n]` to every row of `x[b,n]`.
pub fn add_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    expect_rank(x, 2, "add_bias input")?;
    expect_rank(bias, 1, "add_bias bias")?;
    let n = x.shape()[1];
    if bias.len() != n {
        return Err(Error::shape(format!(
            "bias {:?} does not match rows of {:?}",
            bias.shape(),
            x.shape()
        )));
    }
    let mut out = x.data().to_vec();
    for row in out.chunks_exact_mut(n) {
        for (v, b) in row.iter_mut().zip(bias.data()) {
            *v += b;
        }
    }
    Tensor::new(x.shape(), out)
}

/// Column sums of `g[b,n]`, rows added in ascending order.
pub fn sum_rows(g: &Tensor) -> Result<Tensor> {
    expect_rank(g, 2, "sum_rows")?;
    let n = g.shape()[1];
    let mut out = vec![0.0; n];
    for row in g.data().chunks_exact(n) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    Tensor::new(&[n], out)
}

pub fn relu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
    Tensor::new(x.shape(), data).expect("same shape")
}

/// Passes `grad` where `input > 0`; the subgradient at exactly 0 is 0.
pub fn relu_backward(input: &Tensor, grad: &Tensor) -> Tensor {
    let data = input
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(input.shape(), data).expect("same shape")
}

fn conv_dims(x: &Tensor, w: &Tensor) -> Result<(usize, usize, usize, usize, usize)> {
    expect_rank(x, 4, "conv2d input")?;
    expect_rank(w, 4, "conv2d weight")?;
    let [b, c, h, wd] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let [f, wc, kh, kw] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]];
    if kh != 3 || kw != 3 {
        return Err(Error::shape(format!("conv2d kernel must be 3x3, got {kh}x{kw}")));
    }
    if wc != c {
        return Err(Error::shape(format!(
            "conv2d channel mismatch: input has {c}, weight expects {wc}"
        )));
    }
    Ok((b, c, h, wd, f))
}

/// Ranges of output coordinates for which `out + k - 1` lands inside `[0, n)`.
#[inline]
fn tap_range(k: usize, n: usize) -> (usize, usize) {
    // out in [lo, hi) with 0 <= out + k - 1 < n
    let lo = 1usize.saturating_sub(k);
    let hi = (n + 1 - k).min(n);
    (lo, hi)
}

/// 3×3 cross-correlation, stride 1, zero padding 1, plus per-filter bias.
///
/// Output element sums its taps in `(c, kh, kw)` order, then adds the bias.
pub fn conv2d_forward(x: &Tensor, w: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (b, c, h, wd, f) = conv_dims(x, w)?;
    if bias.rank() != 1 || bias.len() != f {
        return Err(Error::shape(format!(
            "conv2d bias {:?} does not match {f} filters",
            bias.shape()
        )));
    }
    let plane = h * wd;
    let (xd, wdat, bd) = (x.data(), w.data(), bias.data());
    let mut out = vec![0.0; b * f * plane];
    for bi in 0..b {
        for fi in 0..f {
            let o = &mut out[(bi * f + fi) * plane..(bi * f + fi + 1) * plane];
            for ci in 0..c {
                let xp = &xd[(bi * c + ci) * plane..(bi * c + ci + 1) * plane];
                for kh in 0..3 {
                    let (y0, y1) = tap_range(kh, h);
                    for kw in 0..3 {
                        let wv = wdat[((fi * c + ci) * 3 + kh) * 3 + kw];
                        if wv == 0.0 {
                            continue;
                        }
                        let (x0, x1) = tap_range(kw, wd);
                        for y in y0..y1 {
                            let iy = y + kh - 1;
                            let orow = &mut o[y * wd + x0..y * wd + x1];
                            let irow = &xp[iy * wd + x0 + kw - 1..iy * wd + x1 + kw - 1];
                            axpy(orow, wv, irow);
                        }
                    }
                }
            }
            for v in o.iter_mut() {
                *v += bd[fi];
            }
        }
    }
    Tensor::new(&[b, f, h, wd], out)
}

/// Gradients of [`conv2d_forward`] with respect to input, weight and bias.
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    grad: &Tensor,
    need_input_grad: bool,
) -> Result<(Option<Tensor>, Tensor, Tensor)> {
    let (b, c, h, wd, f) = conv_dims(x, w)?;
    if grad.shape() != [b, f, h, wd] {
        return Err(Error::shape(format!(
            "conv2d upstream grad {:?} does not match output [{b}, {f}, {h}, {wd}]",
            grad.shape()
        )));
    }
    let plane = h * wd;
    let (xd, wdat, gd) = (x.data(), w.data(), grad.data());
    let mut dx = need_input_grad.then(|| vec![0.0; x.len()]);
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; f];

    for bi in 0..b {
        for fi in 0..f {
            let gp = &gd[(bi * f + fi) * plane..(bi * f + fi + 1) * plane];
            for v in gp {
                db[fi] += v;
            }
            if gp.iter().all(|&v| v == 0.0) {
                continue;
            }
            for ci in 0..c {
                let xp = &xd[(bi * c + ci) * plane..(bi * c + ci + 1) * plane];
                for kh in 0..3 {
                    let (y0, y1) = tap_range(kh, h);
                    for kw in 0..3 {
                        let (x0, x1) = tap_range(kw, wd);
                        let widx = ((fi * c + ci) * 3 + kh) * 3 + kw;
                        let mut acc = dw[widx];
                        for y in y0..y1 {
                            let iy = y + kh - 1;
                            let grow = &gp[y * wd + x0..y * wd + x1];
                            let irow = &xp[iy * wd + x0 + kw - 1..iy * wd + x1 + kw - 1];
                            for (g, v) in grow.iter().zip(irow) {
                                acc += g * v;
                            }
                        }
                        dw[widx] = acc;
                        if let Some(dx) = dx.as_mut() {
                            let wv = wdat[widx];
                            if wv == 0.0 {
                                continue;
                            }
                            let dxp = &mut dx[(bi * c + ci) * plane..(bi * c + ci + 1) * plane];
                            for y in y0..y1 {
                                let iy = y + kh - 1;
                                let grow = &gp[y * wd + x0..y * wd + x1];
                                let drow = &mut dxp[iy * wd + x0 + kw - 1..iy * wd + x1 + kw - 1];
                                axpy(drow, wv, grow);
                            }
                        }
                    }
                }
            }
        }
    }
    let dx = dx.map(|d| Tensor::new(x.shape(), d)).transpose()?;
    Ok((dx, Tensor::new(w.shape(), dw)?, Tensor::new(&[f], db)?))
}

/// 2×2 non-overlapping max pooling.
///
/// Returns the pooled tensor and, per output element, the flat input index of
/// the maximum. Ties keep the first element in window order (top-left first),
/// which is the smallest flat index.
pub fn maxpool2_forward(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    expect_rank(x, 4, "maxpool2 input")?;
    let [b, c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!(
            "maxpool2 needs even spatial dims, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let xd = x.data();
    let mut out = Vec::with_capacity(b * c * oh * ow);
    let mut arg = Vec::with_capacity(b * c * oh * ow);
    for bc in 0..b * c {
        let base = bc * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + (2 * oy) * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if xd[idx] > xd[best] {
                        best = idx;
                    }
                }
                out.push(xd[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::new(&[b, c, oh, ow], out)?, arg))
}

/// Routes each upstream gradient to its stored argmax position.
pub fn maxpool2_backward(input_shape: &[usize], argmax: &[usize], grad: &Tensor) -> Result<Tensor> {
    if argmax.len() != grad.len() {
        return Err(Error::shape("maxpool2 argmax/grad length mismatch"));
    }
    let mut dx = Tensor::zeros(input_shape)?;
    let d = dx.data_mut();
    for (&i, &g) in argmax.iter().zip(grad.data()) {
        d[i] += g;
    }
    Ok(dx)
}

/// Copies leading-dimension slices of `x` in the order given by `idx`.
pub fn gather_rows(x: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let rows = x.rows();
    if idx.is_empty() {
        return Err(Error::shape("gather_rows with empty index list"));
    }
    let n = x.row_len();
    let mut data = Vec::with_capacity(idx.len() * n);
    for &i in idx {
        if i >= rows {
            return Err(Error::Index {
                index: i,
                bound: rows,
            });
        }
        data.extend_from_slice(x.row(i));
    }
    let mut shape = x.shape().to_vec();
    shape[0] = idx.len();
    Tensor::new(&shape, data)
}

/// Adjoint of [`gather_rows`]: adds row `j` of `grad` into row `idx[j]`.
pub fn scatter_rows(grad: &Tensor, idx: &[usize], source_shape: &[usize]) -> Result<Tensor> {
    let mut out = Tensor::zeros(source_shape)?;
    let n = out.row_len();
    if grad.rows() != idx.len() || grad.row_len() != n {
        return Err(Error::shape("scatter_rows grad does not match index list"));
    }
    let rows = source_shape[0];
    let d = out.data_mut();
    for (j, &i) in idx.iter().enumerate() {
        if i >= rows {
            return Err(Error::Index {
                index: i,
                bound: rows,
            });
        }
        axpy(&mut d[i * n..(i + 1) * n], 1.0, grad.row(j));
    }
    Ok(out)
}

/// Sum in ascending index order.
pub fn sum_ascending(values: &[f64]) -> f64 {
    values.iter().fold(0.0, |acc, v| acc + v)
}

/// Cross-entropy per row of `logits[b,c]`, plus the softmax probabilities.
///
/// `loss = logsumexp(z) - z[label]` with the row maximum subtracted first.
pub fn softmax_ce_per_sample(logits: &Tensor, labels: &[usize]) -> Result<(Tensor, Tensor)> {
    expect_rank(logits, 2, "softmax_ce logits")?;
    let (b, c) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != b {
        return Err(Error::shape(format!(
            "{} labels for {b} logit rows",
            labels.len()
        )));
    }
    let mut losses = Vec::with_capacity(b);
    let mut probs = vec![0.0; b * c];
    for (i, row) in logits.data().chunks_exact(c).enumerate() {
        let label = labels[i];
        if label >= c {
            return Err(Error::Label { label, classes: c });
        }
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let p = &mut probs[i * c..(i + 1) * c];
        let mut z = 0.0;
        for (pj, &v) in p.iter_mut().zip(row) {
            *pj = (v - m).exp();
            z += *pj;
        }
        for pj in p.iter_mut() {
            *pj /= z;
        }
        // m + ln z >= m >= row[label], so the loss is never negative.
        losses.push((m + z.ln()) - row[label]);
    }
    Ok((Tensor::new(&[b], losses)?, Tensor::new(&[b, c], probs)?))
}
