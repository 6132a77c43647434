//! Differentiable operations. Each op computes its forward value eagerly and
//! registers a closure producing the input gradients from the upstream
//! gradient. Convolution uses the cross-correlation convention with zero
//! padding; ReLU takes subgradient 0 at the origin.

use super::{record_op, Tensor};
use crate::error::{Error, Result};

/// `a[m×k] · b[k×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ash, bsh) = (a.shape(), b.shape());
    if ash.len() != 2 || bsh.len() != 2 || ash[1] != bsh[0] {
        return Err(Error::Dim(format!(
            "matmul expects [m×k]·[k×n], got {ash:?} and {bsh:?}"
        )));
    }
    let (m, k, n) = (ash[0], ash[1], bsh[1]);
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for l in 0..k {
            let aval = ad[i * k + l];
            if aval == 0.0 {
                continue;
            }
            let brow = &bd[l * n..(l + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += aval * brow[j];
            }
        }
    }
    drop((ad, bd));

    let (ac, bc) = (a.clone(), b.clone());
    Ok(record_op(
        &[a, b],
        out,
        vec![m, n],
        Box::new(move |g, local| {
            let (ad, bd) = (ac.data(), bc.data());
            // da = g · bᵀ
            let mut da = vec![0.0; m * k];
            for i in 0..m {
                for l in 0..k {
                    let mut s = 0.0;
                    for j in 0..n {
                        s += g[i * n + j] * bd[l * n + j];
                    }
                    da[i * k + l] = s;
                }
            }
            // db = aᵀ · g
            let mut db = vec![0.0; k * n];
            for l in 0..k {
                for i in 0..m {
                    let aval = ad[i * k + l];
                    if aval == 0.0 {
                        continue;
                    }
                    for j in 0..n {
                        db[l * n + j] += aval * g[i * n + j];
                    }
                }
            }
            local[0] = Some(da);
            local[1] = Some(db);
        }),
    ))
}

/// 1-D cross-correlation: `x[b×cin×len] * w[cout×cin×ksz]` with zero padding.
/// Output length is `floor((len + 2·pad − ksz)/stride) + 1`.
pub fn conv1d(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (xs, ws) = (x.shape(), w.shape());
    if xs.len() != 3 || ws.len() != 3 {
        return Err(Error::Dim(format!(
            "conv1d expects x[b×cin×len] and w[cout×cin×ksz], got {xs:?} and {ws:?}"
        )));
    }
    let (batch, cin, len) = (xs[0], xs[1], xs[2]);
    let (cout, wcin, ksz) = (ws[0], ws[1], ws[2]);
    if cin != wcin {
        return Err(Error::Dim(format!(
            "conv1d channel mismatch: input has {cin}, kernel expects {wcin}"
        )));
    }
    if stride == 0 {
        return Err(Error::Parameter("conv1d stride must be positive".into()));
    }
    if len + 2 * pad < ksz {
        return Err(Error::Dim(format!(
            "conv1d kernel {ksz} longer than padded input {}",
            len + 2 * pad
        )));
    }
    let lout = (len + 2 * pad - ksz) / stride + 1;

    // Valid output range per kernel tap: positions whose padded read lands
    // inside the input, so the inner loops stay branch-free. Returns an
    // empty range (lo > hi) for taps that never touch the input.
    let tap_range = move |kk: usize| -> (usize, usize) {
        if kk > len - 1 + pad {
            return (1, 0);
        }
        let lo = if kk >= pad { 0 } else { (pad - kk).div_ceil(stride) };
        let hi = ((len - 1 + pad - kk) / stride).min(lout - 1);
        (lo, hi)
    };

    let (xd, wd) = (x.data(), w.data());
    let mut out = vec![0.0; batch * cout * lout];
    for b in 0..batch {
        for co in 0..cout {
            let orow = &mut out[(b * cout + co) * lout..(b * cout + co + 1) * lout];
            for ci in 0..cin {
                let xrow = &xd[(b * cin + ci) * len..(b * cin + ci + 1) * len];
                let wrow = &wd[(co * cin + ci) * ksz..(co * cin + ci + 1) * ksz];
                for (kk, &wv) in wrow.iter().enumerate() {
                    let (lo, hi) = tap_range(kk);
                    if lo > hi {
                        continue;
                    }
                    let mut pos = lo * stride + kk - pad;
                    for o in orow.iter_mut().take(hi + 1).skip(lo) {
                        *o += wv * xrow[pos];
                        pos += stride;
                    }
                }
            }
        }
    }
    drop((xd, wd));

    let (xc, wc) = (x.clone(), w.clone());
    Ok(record_op(
        &[x, w],
        out,
        vec![batch, cout, lout],
        Box::new(move |g, local| {
            let (xd, wd) = (xc.data(), wc.data());
            let mut dx = vec![0.0; batch * cin * len];
            let mut dw = vec![0.0; cout * cin * ksz];
            for b in 0..batch {
                for co in 0..cout {
                    let grow = &g[(b * cout + co) * lout..(b * cout + co + 1) * lout];
                    for ci in 0..cin {
                        let xoff = (b * cin + ci) * len;
                        let xrow = &xd[xoff..xoff + len];
                        let dxrow = &mut dx[xoff..xoff + len];
                        let woff = (co * cin + ci) * ksz;
                        for kk in 0..ksz {
                            let (lo, hi) = tap_range(kk);
                            if lo > hi {
                                continue;
                            }
                            let wv = wd[woff + kk];
                            let mut pos = lo * stride + kk - pad;
                            let mut dw_acc = 0.0;
                            for &gv in grow.iter().take(hi + 1).skip(lo) {
                                dxrow[pos] += gv * wv;
                                dw_acc += gv * xrow[pos];
                                pos += stride;
                            }
                            dw[woff + kk] += dw_acc;
                        }
                    }
                }
            }
            local[0] = Some(dx);
            local[1] = Some(dw);
        }),
    ))
}

/// Elementwise `max(0, x)`.
pub fn relu(x: &Tensor) -> Tensor {
    let out: Vec<f64> = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
    let xc = x.clone();
    record_op(
        &[x],
        out,
        x.shape().to_vec(),
        Box::new(move |g, local| {
            let xd = xc.data();
            local[0] = Some(
                g.iter()
                    .zip(xd.iter())
                    .map(|(&gi, &xi)| if xi > 0.0 { gi } else { 0.0 })
                    .collect(),
            );
        }),
    )
}

fn softmax_rows(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &data[r * cols..(r + 1) * cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for c in 0..cols {
            let e = (row[c] - max).exp();
            out[r * cols + c] = e;
            sum += e;
        }
        for c in 0..cols {
            out[r * cols + c] /= sum;
        }
    }
    out
}

/// Row-wise softmax of `x[n×C]` with per-row max subtraction.
pub fn softmax(x: &Tensor) -> Result<Tensor> {
    let sh = x.shape();
    if sh.len() != 2 {
        return Err(Error::Dim(format!("softmax expects [n×C], got {sh:?}")));
    }
    if x.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("softmax input contains non-finite values".into()));
    }
    let (rows, cols) = (sh[0], sh[1]);
    let out = softmax_rows(&x.data(), rows, cols);
    let saved = out.clone();
    Ok(record_op(
        &[x],
        out,
        sh.to_vec(),
        Box::new(move |g, local| {
            // d_in = s ⊙ (g − (g·s)) per row
            let mut dx = vec![0.0; rows * cols];
            for r in 0..rows {
                let base = r * cols;
                let mut dot = 0.0;
                for c in 0..cols {
                    dot += g[base + c] * saved[base + c];
                }
                for c in 0..cols {
                    dx[base + c] = saved[base + c] * (g[base + c] - dot);
                }
            }
            local[0] = Some(dx);
        }),
    ))
}

/// Mean negative log-likelihood of `targets` under `softmax(logits)`,
/// fused for stability. Backward is `(softmax − onehot)/n`.
pub fn cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<Tensor> {
    let sh = logits.shape();
    if sh.len() != 2 {
        return Err(Error::Dim(format!("cross_entropy expects [n×C], got {sh:?}")));
    }
    let (n, c) = (sh[0], sh[1]);
    if targets.len() != n {
        return Err(Error::Dim(format!(
            "cross_entropy got {} targets for {n} rows",
            targets.len()
        )));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
        return Err(Error::Label(format!("target class {bad} out of range for {c} classes")));
    }
    let ld = logits.data();
    let mut loss = 0.0;
    for r in 0..n {
        let row = &ld[r * c..(r + 1) * c];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        loss += lse - row[targets[r]];
    }
    loss /= n as f64;
    drop(ld);

    let lc = logits.clone();
    let tgts = targets.to_vec();
    Ok(record_op(
        &[logits],
        vec![loss],
        vec![1],
        Box::new(move |g, local| {
            let mut dl = softmax_rows(&lc.data(), n, c);
            for (r, &t) in tgts.iter().enumerate() {
                dl[r * c + t] -= 1.0;
            }
            let scale = g[0] / n as f64;
            for v in dl.iter_mut() {
                *v *= scale;
            }
            local[0] = Some(dl);
        }),
    ))
}

/// [`cross_entropy`] with one-hot target rows.
pub fn cross_entropy_one_hot(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let (ls, ts) = (logits.shape(), targets.shape());
    if ls != ts {
        return Err(Error::Dim(format!(
            "one-hot targets {ts:?} do not match logits {ls:?}"
        )));
    }
    let (n, c) = (ls[0], ls[1]);
    let td = targets.data();
    let mut indices = Vec::with_capacity(n);
    for r in 0..n {
        let row = &td[r * c..(r + 1) * c];
        let hot: Vec<usize> = (0..c).filter(|&j| row[j] == 1.0).collect();
        if hot.len() != 1 || row.iter().sum::<f64>() != 1.0 {
            return Err(Error::Label(format!("row {r} is not one-hot: {row:?}")));
        }
        indices.push(hot[0]);
    }
    drop(td);
    cross_entropy(logits, &indices)
}

/// Gradient reversal: identity on values, backward multiplies the upstream
/// gradient by `−lambda` exactly.
pub fn grad_reverse(x: &Tensor, lambda: f64) -> Result<Tensor> {
    if lambda < 0.0 || !lambda.is_finite() {
        return Err(Error::Parameter(format!(
            "grad_reverse lambda must be finite and nonnegative, got {lambda}"
        )));
    }
    Ok(record_op(
        &[x],
        x.to_vec(),
        x.shape().to_vec(),
        Box::new(move |g, local| {
            local[0] = Some(g.iter().map(|&gi| -lambda * gi).collect());
        }),
    ))
}

/// Elementwise sum of two same-shape tensors.
pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::Dim(format!(
            "add shape mismatch: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let out: Vec<f64> = a.data().iter().zip(b.data().iter()).map(|(x, y)| x + y).collect();
    Ok(record_op(
        &[a, b],
        out,
        a.shape().to_vec(),
        Box::new(|g, local| {
            local[0] = Some(g.to_vec());
            local[1] = Some(g.to_vec());
        }),
    ))
}

/// Multiply every element by a constant.
pub fn scale(x: &Tensor, c: f64) -> Tensor {
    let out: Vec<f64> = x.data().iter().map(|&v| c * v).collect();
    record_op(
        &[x],
        out,
        x.shape().to_vec(),
        Box::new(move |g, local| {
            local[0] = Some(g.iter().map(|&gi| c * gi).collect());
        }),
    )
}

/// Sum of all elements, as a scalar tensor.
pub fn sum(x: &Tensor) -> Tensor {
    let total: f64 = x.data().iter().sum();
    let n = x.numel();
    record_op(
        &[x],
        vec![total],
        vec![1],
        Box::new(move |g, local| {
            local[0] = Some(vec![g[0]; n]);
        }),
    )
}

/// Reinterpret the storage under a new shape (same element count).
pub fn reshape(x: &Tensor, shape: &[usize]) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    if n != x.numel() {
        return Err(Error::Dim(format!(
            "reshape {:?} -> {shape:?} changes element count",
            x.shape()
        )));
    }
    Ok(record_op(
        &[x],
        x.to_vec(),
        shape.to_vec(),
        Box::new(|g, local| {
            local[0] = Some(g.to_vec());
        }),
    ))
}

/// Broadcast-add a bias row: `x[m×n] + bias[n]`.
pub fn add_row_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (xs, bs) = (x.shape(), bias.shape());
    if xs.len() != 2 || bs != [xs[1]] {
        return Err(Error::Dim(format!("add_row_bias got x {xs:?}, bias {bs:?}")));
    }
    let (m, n) = (xs[0], xs[1]);
    let bd = bias.data();
    let out: Vec<f64> = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| v + bd[i % n])
        .collect();
    drop(bd);
    Ok(record_op(
        &[x, bias],
        out,
        xs.to_vec(),
        Box::new(move |g, local| {
            local[0] = Some(g.to_vec());
            let mut db = vec![0.0; n];
            for i in 0..m {
                for j in 0..n {
                    db[j] += g[i * n + j];
                }
            }
            local[1] = Some(db);
        }),
    ))
}

/// Broadcast-add a per-channel bias: `x[b×c×l] + bias[c]`.
pub fn add_channel_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (xs, bs) = (x.shape(), bias.shape());
    if xs.len() != 3 || bs != [xs[1]] {
        return Err(Error::Dim(format!("add_channel_bias got x {xs:?}, bias {bs:?}")));
    }
    let (b, c, l) = (xs[0], xs[1], xs[2]);
    let bd = bias.data();
    let xd = x.data();
    let mut out = vec![0.0; b * c * l];
    for bi in 0..b {
        for ci in 0..c {
            let off = (bi * c + ci) * l;
            for li in 0..l {
                out[off + li] = xd[off + li] + bd[ci];
            }
        }
    }
    drop((bd, xd));
    Ok(record_op(
        &[x, bias],
        out,
        xs.to_vec(),
        Box::new(move |g, local| {
            local[0] = Some(g.to_vec());
            let mut db = vec![0.0; c];
            for (ci, dbc) in db.iter_mut().enumerate() {
                for bi in 0..b {
                    let off = (bi * c + ci) * l;
                    for li in 0..l {
                        *dbc += g[off + li];
                    }
                }
            }
            local[1] = Some(db);
        }),
    ))
}

/// Stack matrices with identical column counts along the row axis.
pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::Dim("concat_rows needs at least one input".into()));
    }
    let cols = match parts[0].shape() {
        [_, c] => *c,
        sh => return Err(Error::Dim(format!("concat_rows expects [m×n] inputs, got {sh:?}"))),
    };
    let mut row_counts = Vec::with_capacity(parts.len());
    let mut out = Vec::new();
    for p in parts {
        let sh = p.shape();
        if sh.len() != 2 || sh[1] != cols {
            return Err(Error::Dim(format!(
                "concat_rows column mismatch: expected {cols}, got {sh:?}"
            )));
        }
        row_counts.push(sh[0]);
        out.extend_from_slice(&p.data());
    }
    let total_rows: usize = row_counts.iter().sum();
    Ok(record_op(
        parts,
        out,
        vec![total_rows, cols],
        Box::new(move |g, local| {
            let mut offset = 0;
            for (j, &rows) in row_counts.iter().enumerate() {
                let n = rows * cols;
                local[j] = Some(g[offset..offset + n].to_vec());
                offset += n;
            }
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::super::Tape;
    use super::*;

    const LN_3: f64 = 1.0986122886681098;

    fn assert_close(actual: &[f64], expected: &[f64], tol: f64) {
        assert_eq!(actual.len(), expected.len());
        for (i, (a, e)) in actual.iter().zip(expected).enumerate() {
            assert!(
                (a - e).abs() <= tol,
                "index {i}: got {a}, expected {e} (tol {tol})"
            );
        }
    }

    #[test]
    fn matmul_identity() {
        let i2 = Tensor::from_vec(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
        let m = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let out = matmul(&i2, &m).unwrap();
        assert_eq!(out.to_vec(), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_selector_row() {
        let sel = Tensor::from_vec(vec![1.0, 0.0, 0.0, 0.0], &[2, 2]).unwrap();
        let v = Tensor::from_vec(vec![5.0, 7.0], &[2, 1]).unwrap();
        let out = matmul(&sel, &v).unwrap();
        assert_eq!(out.to_vec(), vec![5.0, 0.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::from_vec(vec![0.0; 6], &[2, 3]).unwrap();
        let b = Tensor::from_vec(vec![0.0; 4], &[2, 2]).unwrap();
        let msg = matmul(&a, &b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn conv1d_output_length_formula() {
        let x = Tensor::zeros(&[1, 1, 512]);
        let w = Tensor::zeros(&[1, 1, 3]);
        let out = conv1d(&x, &w, 2, 1).unwrap();
        assert_eq!(out.shape(), &[1, 1, 256]);
    }

    #[test]
    fn conv1d_identity_kernel() {
        let x = Tensor::from_vec(vec![1.0, 2.0, 3.0], &[1, 1, 3]).unwrap();
        let w = Tensor::from_vec(vec![1.0], &[1, 1, 1]).unwrap();
        let out = conv1d(&x, &w, 1, 0).unwrap();
        assert_eq!(out.to_vec(), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn conv1d_rejects_kernel_longer_than_input() {
        let x = Tensor::zeros(&[1, 1, 2]);
        let w = Tensor::zeros(&[1, 1, 5]);
        assert!(matches!(conv1d(&x, &w, 1, 0), Err(Error::Dim(_))));
    }

    #[test]
    fn relu_clamps_negatives() {
        let x = Tensor::from_vec(vec![-1.0, 0.0, 2.0], &[3]).unwrap();
        assert_eq!(relu(&x).to_vec(), vec![0.0, 0.0, 2.0]);
    }

    #[test]
    fn relu_positive_passthrough() {
        let x = Tensor::from_vec(vec![0.5, 3.0], &[2]).unwrap();
        assert_eq!(relu(&x).to_vec(), vec![0.5, 3.0]);
    }

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let x = Tensor::from_vec(vec![0.0, 0.0, 0.0], &[1, 3]).unwrap();
        let s = softmax(&x).unwrap();
        assert_close(&s.to_vec(), &[1.0 / 3.0; 3], 1e-15);
    }

    #[test]
    fn softmax_shift_invariance() {
        let x = Tensor::from_vec(vec![0.3, -1.2, 2.5], &[1, 3]).unwrap();
        let y = Tensor::from_vec(vec![0.3 + 7.0, -1.2 + 7.0, 2.5 + 7.0], &[1, 3]).unwrap();
        assert_close(&softmax(&x).unwrap().to_vec(), &softmax(&y).unwrap().to_vec(), 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::from_vec(vec![1.0, 2.0, 3.0, -5.0, 0.0, 5.0], &[2, 3]).unwrap();
        let s = softmax(&x).unwrap();
        let d = s.to_vec();
        for r in 0..2 {
            let sum: f64 = d[r * 3..(r + 1) * 3].iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let x = Tensor::from_vec(vec![f64::NAN, 0.0], &[1, 2]).unwrap();
        assert!(matches!(softmax(&x), Err(Error::Numeric(_))));
    }

    #[test]
    fn cross_entropy_uniform_is_ln3() {
        let logits = Tensor::from_vec(vec![0.0, 0.0, 0.0], &[1, 3]).unwrap();
        for t in 0..3 {
            let loss = cross_entropy(&logits, &[t]).unwrap();
            assert!((loss.item() - LN_3).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_saturated_correct_is_zero() {
        let logits = Tensor::from_vec(vec![1000.0, 0.0, 0.0], &[1, 3]).unwrap();
        let loss = cross_entropy(&logits, &[0]).unwrap();
        assert!(loss.item().abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_target() {
        let logits = Tensor::from_vec(vec![0.0, 0.0], &[1, 2]).unwrap();
        assert!(matches!(cross_entropy(&logits, &[2]), Err(Error::Label(_))));
    }

    #[test]
    fn cross_entropy_nonnegative_and_zero_iff_onehot() {
        let logits = Tensor::from_vec(vec![30.0, -30.0, -30.0, -5.0, 9.0, 1.0], &[2, 3]).unwrap();
        let loss = cross_entropy(&logits, &[0, 1]).unwrap();
        assert!(loss.item() >= 0.0);
    }

    #[test]
    fn one_hot_targets_match_index_targets() {
        let logits = Tensor::from_vec(vec![0.5, 1.5, -0.5, 2.0, 0.0, 1.0], &[2, 3]).unwrap();
        let onehot =
            Tensor::from_vec(vec![0.0, 1.0, 0.0, 1.0, 0.0, 0.0], &[2, 3]).unwrap();
        let a = cross_entropy(&logits, &[1, 0]).unwrap();
        let b = cross_entropy_one_hot(&logits, &onehot).unwrap();
        assert_eq!(a.item(), b.item());
    }

    #[test]
    fn one_hot_rejects_non_one_hot_rows() {
        let logits = Tensor::from_vec(vec![0.0, 0.0], &[1, 2]).unwrap();
        let bad = Tensor::from_vec(vec![0.5, 0.5], &[1, 2]).unwrap();
        assert!(matches!(cross_entropy_one_hot(&logits, &bad), Err(Error::Label(_))));
    }

    #[test]
    fn grad_reverse_forward_identity_bitwise() {
        let x = Tensor::from_vec(vec![3.5, -2.0], &[2]).unwrap();
        let y = grad_reverse(&x, 0.7).unwrap();
        let (xd, yd) = (x.to_vec(), y.to_vec());
        assert_eq!(xd[0].to_bits(), yd[0].to_bits());
        assert_eq!(xd[1].to_bits(), yd[1].to_bits());
    }

    #[test]
    fn grad_reverse_negates_and_scales_upstream() {
        // upstream grad [2, -4] via loss = 2*y0 - 4*y1
        let x = Tensor::param(vec![1.0, 1.0], &[2]).unwrap();
        Tape::scope(|_| {
            let y = grad_reverse(&x, 0.5).unwrap();
            let picked = add(
                &scale(&reshape(&y, &[1, 2]).unwrap(), 1.0),
                &Tensor::zeros(&[1, 2]),
            )
            .unwrap();
            let w = Tensor::from_vec(vec![2.0, -4.0], &[2, 1]).unwrap();
            let loss = sum(&matmul(&picked, &w).unwrap());
            loss.backward().unwrap();
        });
        assert_eq!(x.grad().unwrap(), vec![-1.0, 2.0]);
    }

    #[test]
    fn grad_reverse_lambda_zero_blocks_gradient() {
        let x = Tensor::param(vec![1.0, -2.0], &[2]).unwrap();
        Tape::scope(|_| {
            let y = grad_reverse(&x, 0.0).unwrap();
            let loss = sum(&scale(&y, 3.0));
            loss.backward().unwrap();
        });
        assert_eq!(x.grad().unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn grad_reverse_rejects_negative_lambda() {
        let x = Tensor::zeros(&[1]);
        assert!(matches!(grad_reverse(&x, -0.1), Err(Error::Parameter(_))));
    }

    #[test]
    fn concat_rows_splits_gradient_back() {
        let a = Tensor::param(vec![1.0, 2.0], &[1, 2]).unwrap();
        let b = Tensor::param(vec![3.0, 4.0, 5.0, 6.0], &[2, 2]).unwrap();
        Tape::scope(|_| {
            let cat = concat_rows(&[&a, &b]).unwrap();
            assert_eq!(cat.shape(), &[3, 2]);
            let loss = sum(&scale(&cat, 2.0));
            loss.backward().unwrap();
        });
        assert_eq!(a.grad().unwrap(), vec![2.0, 2.0]);
        assert_eq!(b.grad().unwrap(), vec![2.0; 4]);
    }

    #[test]
    fn add_row_bias_accumulates_columns() {
        let x = Tensor::from_vec(vec![0.0; 6], &[3, 2]).unwrap();
        let b = Tensor::param(vec![1.0, -1.0], &[2]).unwrap();
        Tape::scope(|_| {
            let out = add_row_bias(&x, &b).unwrap();
            let loss = sum(&out);
            loss.backward().unwrap();
        });
        assert_eq!(b.grad().unwrap(), vec![3.0, 3.0]);
    }
}
