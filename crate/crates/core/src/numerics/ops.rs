//! Forward kernels on plain tensors. The autodiff graph calls into these and
//! adds the matching backward rules.

use crate::error::{Error, Result};

use super::Tensor;

fn require_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [m, n] => Ok((*m, *n)),
        other => Err(Error::Dimension {
            op,
            left: other.to_vec(),
            right: vec![0, 0],
        }),
    }
}

/// `a · b` for `a: [m×k]`, `b: [k×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = require_matrix("matmul", a)?;
    let (k2, n) = require_matrix("matmul", b)?;
    if k != k2 {
        return Err(Error::Dimension {
            op: "matmul",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::matrix(m, n, out)
}

/// `a · bᵀ` for `a: [m×k]`, `b: [n×k]`.
pub fn matmul_bt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = require_matrix("matmul_bt", a)?;
    let (n, k2) = require_matrix("matmul_bt", b)?;
    if k != k2 {
        return Err(Error::Dimension {
            op: "matmul_bt",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &bd[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    Tensor::matrix(m, n, out)
}

/// `aᵀ · b` for `a: [k×m]`, `b: [k×n]`.
pub fn matmul_at(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (k, m) = require_matrix("matmul_at", a)?;
    let (k2, n) = require_matrix("matmul_at", b)?;
    if k != k2 {
        return Err(Error::Dimension {
            op: "matmul_at",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let brow = &bd[p * n..(p + 1) * n];
        for i in 0..m {
            let av = ad[p * m + i];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::matrix(m, n, out)
}

pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    softmax_rows_masked(x, None)
}

/// Row softmax with per-row max subtraction. Columns where `key_mask` is
/// `false` get probability exactly zero and never influence the row.
pub fn softmax_rows_masked(x: &Tensor, key_mask: Option<&[bool]>) -> Result<Tensor> {
    let (m, n) = require_matrix("softmax_rows", x)?;
    if let Some(mask) = key_mask {
        if mask.len() != n {
            return Err(Error::Dimension {
                op: "softmax_rows",
                left: x.shape().to_vec(),
                right: vec![mask.len()],
            });
        }
        if !mask.iter().any(|&k| k) {
            return Err(Error::contract("softmax over a row with every key masked"));
        }
    }
    let live = |j: usize| key_mask.map_or(true, |mk| mk[j]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = x.row(i);
        let max = (0..n)
            .filter(|&j| live(j))
            .map(|j| row[j])
            .fold(f64::NEG_INFINITY, f64::max);
        let orow = &mut out[i * n..(i + 1) * n];
        let mut total = 0.0;
        for j in 0..n {
            if live(j) {
                let e = (row[j] - max).exp();
                orow[j] = e;
                total += e;
            }
        }
        orow.iter_mut().for_each(|v| *v /= total);
    }
    Tensor::matrix(m, n, out)
}

/// Per-row statistics kept from a layer-norm forward pass.
#[derive(Clone, Debug)]
pub struct NormCache {
    pub normalized: Vec<f64>,
    pub inv_std: Vec<f64>,
}

pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    layer_norm_cached(x, gamma, beta, eps).map(|(y, _)| y)
}

pub(crate) fn layer_norm_cached(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, NormCache)> {
    let d = x.cols();
    if gamma.numel() != d || beta.numel() != d {
        return Err(Error::Dimension {
            op: "layer_norm",
            left: x.shape().to_vec(),
            right: gamma.shape().to_vec(),
        });
    }
    if eps <= 0.0 {
        return Err(Error::contract("layer_norm eps must be positive"));
    }
    let rows = x.rows();
    let mut normalized = vec![0.0; x.numel()];
    let mut inv_std = vec![0.0; rows];
    let mut out = vec![0.0; x.numel()];
    for i in 0..rows {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std[i] = is;
        for j in 0..d {
            let xh = (row[j] - mean) * is;
            normalized[i * d + j] = xh;
            out[i * d + j] = gamma.data()[j] * xh + beta.data()[j];
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), out)?,
        NormCache {
            normalized,
            inv_std,
        },
    ))
}

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// Exact (erf-based) GELU.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * INV_SQRT_2))
}

pub fn gelu_derivative(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * INV_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

pub fn gelu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| gelu_scalar(v)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("shape preserved")
}

/// Mean negative log-likelihood over the masked rows of `logits`.
/// Returns the loss together with the row softmax used by the backward rule.
pub fn cross_entropy_logits(
    logits: &Tensor,
    targets: &[usize],
    mask: &[bool],
) -> Result<(f64, Tensor)> {
    let (b, v) = require_matrix("cross_entropy", logits)?;
    if targets.len() != b || mask.len() != b {
        return Err(Error::Dimension {
            op: "cross_entropy",
            left: logits.shape().to_vec(),
            right: vec![targets.len(), mask.len()],
        });
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::contract("cross entropy with an empty mask"));
    }
    for (&t, &m) in targets.iter().zip(mask) {
        if m && t >= v {
            return Err(Error::Index {
                what: "cross entropy target",
                index: t,
                size: v,
            });
        }
    }
    let probs = softmax_rows(logits)?;
    let mut total = 0.0;
    for i in 0..b {
        if !mask[i] {
            continue;
        }
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        total += lse - row[targets[i]];
    }
    Ok((total / count as f64, probs))
}
