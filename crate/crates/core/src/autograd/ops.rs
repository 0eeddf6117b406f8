//! Forward and backward rules for every [`OpSpec`].

use super::{AutogradError, OpSpec, Real, Result, Saved, Tensor};

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

pub(super) fn arity(spec: &OpSpec) -> usize {
    match spec {
        OpSpec::MatMul | OpSpec::MatMulNT | OpSpec::Add | OpSpec::Sub | OpSpec::Mul => 2,
        OpSpec::LayerNorm { .. } | OpSpec::CausalAttention { .. } => 3,
        _ => 1,
    }
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> AutogradError {
    AutogradError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn invalid(op: &'static str, detail: impl Into<String>) -> AutogradError {
    AutogradError::InvalidArgument {
        op,
        detail: detail.into(),
    }
}

fn require_2d(op: &'static str, t: &[usize]) -> Result<(usize, usize)> {
    match t {
        [r, c] => Ok((*r, *c)),
        _ => Err(invalid(op, format!("expected a matrix, got shape {t:?}"))),
    }
}

fn tensor<T: Real>(shape: Vec<usize>, data: Vec<T>) -> Tensor<T> {
    debug_assert_eq!(shape.iter().product::<usize>(), data.len());
    Tensor { shape, data }
}

/// Splits `shape` around `axis` into (outer, axis length, inner).
fn axis_split(op: &'static str, shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(invalid(
            op,
            format!("axis {axis} out of range for shape {shape:?}"),
        ));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn broadcast_kind(op: &'static str, a: &[usize], b: &[usize]) -> Result<bool> {
    if a == b {
        Ok(false)
    } else if b.len() == 1 && a.last() == Some(&b[0]) {
        Ok(true)
    } else {
        Err(mismatch(op, a, b))
    }
}

fn gelu_parts(x: f64) -> (f64, f64) {
    let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t)
        + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
    (y, dy)
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(super) fn forward<T: Real>(
    spec: &OpSpec,
    inputs: &[&Tensor<T>],
) -> Result<(Tensor<T>, Saved<T>)> {
    let op = spec.name();
    let x = inputs[0];
    let out = match spec {
        OpSpec::MatMul | OpSpec::MatMulNT => {
            let b = inputs[1];
            let (m, k) = require_2d(op, &x.shape)?;
            let (br, bc) = require_2d(op, &b.shape)?;
            let trans_b = matches!(spec, OpSpec::MatMulNT);
            let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
            if k != kb {
                return Err(mismatch(op, &x.shape, &b.shape));
            }
            let mut c = vec![T::zero(); m * n];
            T::gemm(m, k, n, &x.data, false, &b.data, trans_b, &mut c, false);
            tensor(vec![m, n], c)
        }
        OpSpec::Add | OpSpec::Sub => {
            let b = inputs[1];
            let bcast = broadcast_kind(op, &x.shape, &b.shape)?;
            let sign = if matches!(spec, OpSpec::Sub) {
                -T::one()
            } else {
                T::one()
            };
            let cols = b.numel();
            let data = x
                .data
                .iter()
                .enumerate()
                .map(|(i, &v)| {
                    let w = if bcast { b.data[i % cols] } else { b.data[i] };
                    v + sign * w
                })
                .collect();
            tensor(x.shape.clone(), data)
        }
        OpSpec::Mul => {
            let b = inputs[1];
            if x.shape != b.shape {
                return Err(mismatch(op, &x.shape, &b.shape));
            }
            let data = x.data.iter().zip(&b.data).map(|(&p, &q)| p * q).collect();
            tensor(x.shape.clone(), data)
        }
        OpSpec::Scale(f) => {
            let f = T::c(*f);
            tensor(x.shape.clone(), x.data.iter().map(|&v| v * f).collect())
        }
        OpSpec::EmbeddingLookup(ids) => {
            let (vocab, d) = require_2d(op, &x.shape)?;
            if ids.is_empty() {
                return Err(invalid(op, "empty id list"));
            }
            if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
                return Err(invalid(
                    op,
                    format!("id {bad} out of range for table of {vocab} rows"),
                ));
            }
            let mut data = Vec::with_capacity(ids.len() * d);
            for &i in ids {
                data.extend_from_slice(&x.data[i * d..(i + 1) * d]);
            }
            tensor(vec![ids.len(), d], data)
        }
        OpSpec::LayerNorm { eps } => {
            let (gain, bias) = (inputs[1], inputs[2]);
            let d = x.cols();
            if gain.shape != [d] || bias.shape != [d] {
                return Err(mismatch(op, &x.shape, &gain.shape));
            }
            let rows = x.rows();
            let mut data = Vec::with_capacity(x.numel());
            let mut stats = Vec::with_capacity(rows * 2);
            let eps = T::c(*eps);
            let dn = T::c(d as f64);
            for r in 0..rows {
                let row = &x.data[r * d..(r + 1) * d];
                let mean = row.iter().copied().sum::<T>() / dn;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
                let rstd = T::one() / (var + eps).sqrt();
                for j in 0..d {
                    data.push((row[j] - mean) * rstd * gain.data[j] + bias.data[j]);
                }
                stats.push(mean);
                stats.push(rstd);
            }
            return Ok((tensor(x.shape.clone(), data), Saved::Values(stats)));
        }
        OpSpec::Gelu => tensor(
            x.shape.clone(),
            x.data
                .iter()
                .map(|&v| T::c(gelu_parts(v.f64()).0))
                .collect(),
        ),
        OpSpec::Softmax | OpSpec::LogSoftmax => {
            let d = x.cols();
            let log = matches!(spec, OpSpec::LogSoftmax);
            let mut data = Vec::with_capacity(x.numel());
            for row in x.data.chunks(d) {
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let z: T = row.iter().map(|&v| (v - max).exp()).sum();
                if log {
                    let lse = max + z.ln();
                    data.extend(row.iter().map(|&v| v - lse));
                } else {
                    data.extend(row.iter().map(|&v| (v - max).exp() / z));
                }
            }
            tensor(x.shape.clone(), data)
        }
        OpSpec::Log => tensor(x.shape.clone(), x.data.iter().map(|&v| v.ln()).collect()),
        OpSpec::Exp => tensor(x.shape.clone(), x.data.iter().map(|&v| v.exp()).collect()),
        OpSpec::Softplus => tensor(
            x.shape.clone(),
            x.data.iter().map(|&v| T::c(softplus(v.f64()))).collect(),
        ),
        OpSpec::Reshape(shape) => {
            if shape.iter().any(|&s| s == 0) || shape.iter().product::<usize>() != x.numel() {
                return Err(mismatch(op, &x.shape, shape));
            }
            tensor(shape.clone(), x.data.clone())
        }
        OpSpec::Slice { start, end } => {
            let rows = *x.shape.first().unwrap_or(&1);
            if x.shape.is_empty() || start >= end || *end > rows {
                return Err(invalid(
                    op,
                    format!("range {start}..{end} invalid for shape {:?}", x.shape),
                ));
            }
            let inner = x.numel() / rows;
            let mut shape = x.shape.clone();
            shape[0] = end - start;
            tensor(shape, x.data[start * inner..end * inner].to_vec())
        }
        OpSpec::GatherRows(rows) => {
            let n = *x.shape.first().unwrap_or(&1);
            if x.shape.is_empty() || rows.is_empty() || rows.iter().any(|&r| r >= n) {
                return Err(invalid(
                    op,
                    format!("rows {rows:?} invalid for shape {:?}", x.shape),
                ));
            }
            let inner = x.numel() / n;
            let mut data = Vec::with_capacity(rows.len() * inner);
            for &r in rows {
                data.extend_from_slice(&x.data[r * inner..(r + 1) * inner]);
            }
            let mut shape = x.shape.clone();
            shape[0] = rows.len();
            tensor(shape, data)
        }
        OpSpec::Pick(entries) => {
            let (r, c) = require_2d(op, &x.shape)?;
            if entries.is_empty() || entries.iter().any(|&(i, j)| i >= r || j >= c) {
                return Err(invalid(
                    op,
                    format!("entries out of range for shape {:?}", x.shape),
                ));
            }
            let data = entries.iter().map(|&(i, j)| x.data[i * c + j]).collect();
            tensor(vec![entries.len()], data)
        }
        OpSpec::MaxOverAxis(axis) | OpSpec::SumOverAxis(axis) => {
            let (outer, n, inner) = axis_split(op, &x.shape, *axis)?;
            let mut shape = x.shape.clone();
            shape.remove(*axis);
            let is_max = matches!(spec, OpSpec::MaxOverAxis(_));
            let mut data = Vec::with_capacity(outer * inner);
            let mut argmax = Vec::new();
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| x.data[(o * n + j) * inner + i];
                    if is_max {
                        let mut best = 0;
                        for j in 1..n {
                            if at(j) > at(best) {
                                best = j;
                            }
                        }
                        argmax.push(best);
                        data.push(at(best));
                    } else {
                        let mut acc = T::zero();
                        for j in 0..n {
                            acc = acc + at(j);
                        }
                        data.push(acc);
                    }
                }
            }
            let t = tensor(shape, data);
            if is_max {
                return Ok((t, Saved::Indices(argmax)));
            }
            t
        }
        OpSpec::Sum => {
            let mut acc = T::zero();
            for &v in &x.data {
                acc = acc + v;
            }
            Tensor::scalar(acc)
        }
        OpSpec::CausalAttention { segments, n_heads } => {
            let (k, v) = (inputs[1], inputs[2]);
            if k.shape != x.shape || v.shape != x.shape {
                return Err(mismatch(op, &x.shape, &k.shape));
            }
            let (n, d) = require_2d(op, &x.shape)?;
            if *n_heads == 0 || d % n_heads != 0 {
                return Err(invalid(
                    op,
                    format!("model width {d} not divisible by {n_heads} heads"),
                ));
            }
            if segments.iter().any(|&(s, l)| l == 0 || s + l > n) {
                return Err(invalid(op, "segment outside the input rows"));
            }
            let (out, probs) =
                attention_forward(&x.data, &k.data, &v.data, n, d, segments, *n_heads);
            return Ok((tensor(vec![n, d], out), Saved::Values(probs)));
        }
    };
    Ok((out, Saved::None))
}

fn attention_forward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    n: usize,
    d: usize,
    segments: &[(usize, usize)],
    heads: usize,
) -> (Vec<T>, Vec<T>) {
    let dh = d / heads;
    let scale = T::c(1.0 / (dh as f64).sqrt());
    let mut out = vec![T::zero(); n * d];
    let mut probs = Vec::new();
    for &(start, len) in segments {
        for h in 0..heads {
            let off = h * dh;
            let base = probs.len();
            probs.resize(base + len * len, T::zero());
            for t in 0..len {
                let qt = &q[(start + t) * d + off..(start + t) * d + off + dh];
                let row = &mut probs[base + t * len..base + (t + 1) * len];
                let mut max = T::neg_infinity();
                for s in 0..=t {
                    let ks = &k[(start + s) * d + off..(start + s) * d + off + dh];
                    let mut dot = T::zero();
                    for j in 0..dh {
                        dot = dot + qt[j] * ks[j];
                    }
                    row[s] = dot * scale;
                    max = max.max(row[s]);
                }
                let mut z = T::zero();
                for s in 0..=t {
                    row[s] = (row[s] - max).exp();
                    z = z + row[s];
                }
                for s in 0..=t {
                    row[s] = row[s] / z;
                }
                let o = &mut out[(start + t) * d + off..(start + t) * d + off + dh];
                for s in 0..=t {
                    let vs = &v[(start + s) * d + off..(start + s) * d + off + dh];
                    for j in 0..dh {
                        o[j] = o[j] + row[s] * vs[j];
                    }
                }
            }
        }
    }
    (out, probs)
}

pub(super) fn backward<T: Real>(
    spec: &OpSpec,
    saved: &Saved<T>,
    inputs: &[&Tensor<T>],
    out: &Tensor<T>,
    g: &[T],
    needs: &[bool],
) -> Vec<Option<Vec<T>>> {
    let x = inputs[0];
    match spec {
        OpSpec::MatMul | OpSpec::MatMulNT => {
            let b = inputs[1];
            let (m, k) = (x.shape[0], x.shape[1]);
            let trans_b = matches!(spec, OpSpec::MatMulNT);
            let n = out.shape[1];
            let ga = needs[0].then(|| {
                // dA = dC · op(B)ᵀ
                let mut ga = vec![T::zero(); m * k];
                T::gemm(m, n, k, g, false, &b.data, !trans_b, &mut ga, false);
                ga
            });
            let gb = needs[1].then(|| {
                if trans_b {
                    // dB (n x k) = dCᵀ · A
                    let mut gb = vec![T::zero(); n * k];
                    T::gemm(n, m, k, g, true, &x.data, false, &mut gb, false);
                    gb
                } else {
                    // dB (k x n) = Aᵀ · dC
                    let mut gb = vec![T::zero(); k * n];
                    T::gemm(k, m, n, &x.data, true, g, false, &mut gb, false);
                    gb
                }
            });
            vec![ga, gb]
        }
        OpSpec::Add | OpSpec::Sub => {
            let b = inputs[1];
            let bcast = b.shape != x.shape;
            let ga = needs[0].then(|| g.to_vec());
            let sign = if matches!(spec, OpSpec::Sub) {
                -T::one()
            } else {
                T::one()
            };
            let gb = needs[1].then(|| {
                if bcast {
                    let cols = b.numel();
                    let mut acc = vec![T::zero(); cols];
                    for row in g.chunks(cols) {
                        for (a, &v) in acc.iter_mut().zip(row) {
                            *a = *a + v;
                        }
                    }
                    acc.iter().map(|&v| sign * v).collect()
                } else {
                    g.iter().map(|&v| sign * v).collect()
                }
            });
            vec![ga, gb]
        }
        OpSpec::Mul => {
            let b = inputs[1];
            let ga = needs[0].then(|| g.iter().zip(&b.data).map(|(&p, &q)| p * q).collect());
            let gb = needs[1].then(|| g.iter().zip(&x.data).map(|(&p, &q)| p * q).collect());
            vec![ga, gb]
        }
        OpSpec::Scale(f) => {
            let f = T::c(*f);
            vec![Some(g.iter().map(|&v| v * f).collect())]
        }
        OpSpec::EmbeddingLookup(ids) => {
            let d = x.shape[1];
            let mut gt = vec![T::zero(); x.numel()];
            for (r, &i) in ids.iter().enumerate() {
                for j in 0..d {
                    gt[i * d + j] = gt[i * d + j] + g[r * d + j];
                }
            }
            vec![Some(gt)]
        }
        OpSpec::LayerNorm { .. } => {
            let (gain, _) = (inputs[1], inputs[2]);
            let Saved::Values(stats) = saved else {
                unreachable!("layer norm saves row statistics")
            };
            let d = x.cols();
            let rows = x.rows();
            let dn = T::c(d as f64);
            let mut gx = vec![T::zero(); x.numel()];
            let mut gg = vec![T::zero(); d];
            let mut gbias = vec![T::zero(); d];
            let mut xhat = vec![T::zero(); d];
            let mut dxhat = vec![T::zero(); d];
            for r in 0..rows {
                let (mean, rstd) = (stats[2 * r], stats[2 * r + 1]);
                let row = &x.data[r * d..(r + 1) * d];
                let gr = &g[r * d..(r + 1) * d];
                let mut sum_dxhat = T::zero();
                let mut sum_dxhat_xhat = T::zero();
                for j in 0..d {
                    xhat[j] = (row[j] - mean) * rstd;
                    dxhat[j] = gr[j] * gain.data[j];
                    gg[j] = gg[j] + gr[j] * xhat[j];
                    gbias[j] = gbias[j] + gr[j];
                    sum_dxhat = sum_dxhat + dxhat[j];
                    sum_dxhat_xhat = sum_dxhat_xhat + dxhat[j] * xhat[j];
                }
                let m1 = sum_dxhat / dn;
                let m2 = sum_dxhat_xhat / dn;
                for j in 0..d {
                    gx[r * d + j] = rstd * (dxhat[j] - m1 - xhat[j] * m2);
                }
            }
            vec![
                needs[0].then_some(gx),
                needs[1].then_some(gg),
                needs[2].then_some(gbias),
            ]
        }
        OpSpec::Gelu => vec![Some(
            x.data
                .iter()
                .zip(g)
                .map(|(&v, &gv)| gv * T::c(gelu_parts(v.f64()).1))
                .collect(),
        )],
        OpSpec::Softmax => {
            let d = x.cols();
            let mut gx = Vec::with_capacity(x.numel());
            for (y, gr) in out.data.chunks(d).zip(g.chunks(d)) {
                let dot: T = y.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                gx.extend(y.iter().zip(gr).map(|(&yi, &gi)| yi * (gi - dot)));
            }
            vec![Some(gx)]
        }
        OpSpec::LogSoftmax => {
            let d = x.cols();
            let mut gx = Vec::with_capacity(x.numel());
            for (y, gr) in out.data.chunks(d).zip(g.chunks(d)) {
                let total: T = gr.iter().copied().sum();
                gx.extend(y.iter().zip(gr).map(|(&yi, &gi)| gi - yi.exp() * total));
            }
            vec![Some(gx)]
        }
        OpSpec::Log => vec![Some(x.data.iter().zip(g).map(|(&v, &gv)| gv / v).collect())],
        OpSpec::Exp => vec![Some(
            out.data.iter().zip(g).map(|(&y, &gv)| gv * y).collect(),
        )],
        OpSpec::Softplus => vec![Some(
            x.data
                .iter()
                .zip(g)
                .map(|(&v, &gv)| gv * T::c(sigmoid(v.f64())))
                .collect(),
        )],
        OpSpec::Reshape(_) => vec![Some(g.to_vec())],
        OpSpec::Slice { start, .. } => {
            let inner = x.numel() / x.shape[0];
            let mut gx = vec![T::zero(); x.numel()];
            gx[start * inner..start * inner + g.len()].copy_from_slice(g);
            vec![Some(gx)]
        }
        OpSpec::GatherRows(rows) => {
            let inner = x.numel() / x.shape[0];
            let mut gx = vec![T::zero(); x.numel()];
            for (k, &r) in rows.iter().enumerate() {
                for j in 0..inner {
                    gx[r * inner + j] = gx[r * inner + j] + g[k * inner + j];
                }
            }
            vec![Some(gx)]
        }
        OpSpec::Pick(entries) => {
            let c = x.shape[1];
            let mut gx = vec![T::zero(); x.numel()];
            for (k, &(i, j)) in entries.iter().enumerate() {
                gx[i * c + j] = gx[i * c + j] + g[k];
            }
            vec![Some(gx)]
        }
        OpSpec::MaxOverAxis(axis) | OpSpec::SumOverAxis(axis) => {
            let outer: usize = x.shape[..*axis].iter().product();
            let n = x.shape[*axis];
            let inner: usize = x.shape[axis + 1..].iter().product();
            let mut gx = vec![T::zero(); x.numel()];
            for o in 0..outer {
                for i in 0..inner {
                    let gv = g[o * inner + i];
                    match saved {
                        Saved::Indices(argmax) => {
                            let j = argmax[o * inner + i];
                            gx[(o * n + j) * inner + i] = gv;
                        }
                        _ => {
                            for j in 0..n {
                                gx[(o * n + j) * inner + i] = gv;
                            }
                        }
                    }
                }
            }
            vec![Some(gx)]
        }
        OpSpec::Sum => vec![Some(vec![g[0]; x.numel()])],
        OpSpec::CausalAttention { segments, n_heads } => {
            let Saved::Values(probs) = saved else {
                unreachable!("attention saves probabilities")
            };
            let (gq, gk, gv) = attention_backward(
                &x.data,
                &inputs[1].data,
                &inputs[2].data,
                probs,
                g,
                x.shape[1],
                segments,
                *n_heads,
            );
            vec![
                needs[0].then_some(gq),
                needs[1].then_some(gk),
                needs[2].then_some(gv),
            ]
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_backward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    g: &[T],
    d: usize,
    segments: &[(usize, usize)],
    heads: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let dh = d / heads;
    let scale = T::c(1.0 / (dh as f64).sqrt());
    let mut gq = vec![T::zero(); q.len()];
    let mut gk = vec![T::zero(); k.len()];
    let mut gv = vec![T::zero(); v.len()];
    let mut base = 0;
    let mut dp = Vec::new();
    for &(start, len) in segments {
        for h in 0..heads {
            let off = h * dh;
            let p = &probs[base..base + len * len];
            base += len * len;
            for t in 0..len {
                let row_t = (start + t) * d + off;
                let gt = &g[row_t..row_t + dh];
                dp.clear();
                let mut weighted = T::zero();
                for s in 0..=t {
                    let row_s = (start + s) * d + off;
                    let mut dot = T::zero();
                    for j in 0..dh {
                        dot = dot + gt[j] * v[row_s + j];
                        gv[row_s + j] = gv[row_s + j] + p[t * len + s] * gt[j];
                    }
                    dp.push(dot);
                    weighted = weighted + dot * p[t * len + s];
                }
                for s in 0..=t {
                    let ds = p[t * len + s] * (dp[s] - weighted) * scale;
                    let row_s = (start + s) * d + off;
                    for j in 0..dh {
                        gq[row_t + j] = gq[row_t + j] + ds * k[row_s + j];
                        gk[row_s + j] = gk[row_s + j] + ds * q[row_t + j];
                    }
                }
            }
        }
    }
    (gq, gk, gv)
}
