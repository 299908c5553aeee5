//! Row-major dense helpers. A weight matrix of shape `[out, in]` is stored as
//! `out` consecutive rows of length `in`.

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y = W x + b`; `b` may be empty for a bias-free map.
pub fn affine(w: &[f64], b: &[f64], x: &[f64], out_dim: usize) -> Vec<f64> {
    let in_dim = x.len();
    debug_assert_eq!(w.len(), out_dim * in_dim);
    (0..out_dim)
        .map(|o| {
            let row = &w[o * in_dim..(o + 1) * in_dim];
            let bias = if b.is_empty() { 0.0 } else { b[o] };
            bias + dot(row, x)
        })
        .collect()
}

/// Accumulate the gradients of `y = W x + b` given `dy`.
///
/// `dw += dy xᵀ`, `db += dy`, and, when requested, `dx += Wᵀ dy`.
pub fn affine_backward(
    w: &[f64],
    x: &[f64],
    dy: &[f64],
    dw: &mut [f64],
    db: Option<&mut [f64]>,
    dx: Option<&mut [f64]>,
) {
    let in_dim = x.len();
    for (o, &g) in dy.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        let row = &mut dw[o * in_dim..(o + 1) * in_dim];
        for (r, xi) in row.iter_mut().zip(x) {
            *r += g * xi;
        }
    }
    if let Some(db) = db {
        for (b, g) in db.iter_mut().zip(dy) {
            *b += g;
        }
    }
    if let Some(dx) = dx {
        for (o, &g) in dy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let row = &w[o * in_dim..(o + 1) * in_dim];
            for (d, wi) in dx.iter_mut().zip(row) {
                *d += g * wi;
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Operator 2-norm of a `[rows, cols]` matrix by power iteration on `WᵀW`.
pub fn spectral_norm(w: &[f64], rows: usize, cols: usize) -> f64 {
    let mut v = vec![1.0 / (cols as f64).sqrt(); cols];
    let mut sigma = 0.0;
    for _ in 0..500 {
        let wv = affine(w, &[], &v, rows);
        let mut wtwv = vec![0.0; cols];
        for r in 0..rows {
            for c in 0..cols {
                wtwv[c] += w[r * cols + c] * wv[r];
            }
        }
        let n = norm(&wtwv);
        if n == 0.0 {
            return 0.0;
        }
        let next = n.sqrt();
        v = wtwv.into_iter().map(|x| x / n).collect();
        if (next - sigma).abs() <= 1e-14 * next {
            return next;
        }
        sigma = next;
    }
    sigma
}
