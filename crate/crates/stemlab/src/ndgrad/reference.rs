//! Forward-only f64 reference kernels.
//!
//! These mirror the op semantics of [`super::tensor`] but share no code with
//! it: plain loops in 64-bit, used as the independent oracle for finite
//! difference gradient checks and for scripted-value tests.

pub const LOG_FLOOR: f64 = 1e-12;

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for l in 0..k {
            let av = a[i * k + l];
            for j in 0..n {
                out[i * n + j] += av * b[l * n + j];
            }
        }
    }
    out
}

pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter()
        .enumerate()
        .map(|(i, &x)| x + b[i % b.len()])
        .collect()
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter()
        .enumerate()
        .map(|(i, &x)| x - b[i % b.len()])
        .collect()
}

pub fn mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter()
        .enumerate()
        .map(|(i, &x)| x * b[i % b.len()])
        .collect()
}

pub fn relu(a: &[f64]) -> Vec<f64> {
    a.iter().map(|&x| x.max(0.0)).collect()
}

pub fn gelu(a: &[f64]) -> Vec<f64> {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    a.iter()
        .map(|&x| 0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh()))
        .collect()
}

pub fn exp(a: &[f64]) -> Vec<f64> {
    a.iter().map(|&x| x.exp()).collect()
}

pub fn log(a: &[f64]) -> Vec<f64> {
    a.iter().map(|&x| x.max(LOG_FLOOR).ln()).collect()
}

pub fn softmax_rows(a: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for r in 0..a.len() / cols {
        let x = &a[r * cols..(r + 1) * cols];
        let mx = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = x.iter().map(|&v| (v - mx).exp()).collect();
        let s: f64 = e.iter().sum();
        for (o, v) in out[r * cols..(r + 1) * cols].iter_mut().zip(e) {
            *o = v / s;
        }
    }
    out
}

pub fn layer_norm_rows(a: &[f64], cols: usize, eps: f64) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for r in 0..a.len() / cols {
        let x = &a[r * cols..(r + 1) * cols];
        let mean = x.iter().sum::<f64>() / cols as f64;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for (o, &v) in out[r * cols..(r + 1) * cols].iter_mut().zip(x) {
            *o = (v - mean) * inv;
        }
    }
    out
}

pub fn l2_normalize_rows(a: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for r in 0..a.len() / cols {
        let x = &a[r * cols..(r + 1) * cols];
        let n = x.iter().map(|v| v * v).sum::<f64>().sqrt().max(LOG_FLOOR);
        for (o, &v) in out[r * cols..(r + 1) * cols].iter_mut().zip(x) {
            *o = v / n;
        }
    }
    out
}

pub fn mean_axis0(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c] += a[r * cols + c];
        }
    }
    for o in out.iter_mut() {
        *o /= rows as f64;
    }
    out
}

pub fn sum_all(a: &[f64]) -> f64 {
    a.iter().sum()
}

pub fn transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// Central finite differences of `f` at `x`, step `h`, one derivative per coordinate.
pub fn finite_diff(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    let mut xs = x.to_vec();
    for i in 0..x.len() {
        let orig = xs[i];
        xs[i] = orig + h;
        let fp = f(&xs);
        xs[i] = orig - h;
        let fm = f(&xs);
        xs[i] = orig;
        g[i] = (fp - fm) / (2.0 * h);
    }
    g
}
