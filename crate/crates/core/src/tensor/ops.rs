//! Raw row-major kernels shared by the tape's forward and backward passes.

/// `out[i] += Σ_r coef[r]·row_r` over four output rows at once, so each
/// `row` load is shared.
#[inline(always)]
fn axpy4(out: &mut [f64], n: usize, coef: [f64; 4], row: &[f64]) {
    let (o0, rest) = out.split_at_mut(n);
    let (o1, rest) = rest.split_at_mut(n);
    let (o2, o3) = rest.split_at_mut(n);
    let (row, o0, o1, o2, o3) = (&row[..n], &mut o0[..n], &mut o1[..n], &mut o2[..n], &mut o3[..n]);
    for j in 0..n {
        let b = row[j];
        o0[j] += coef[0] * b;
        o1[j] += coef[1] * b;
        o2[j] += coef[2] * b;
        o3[j] += coef[3] * b;
    }
}

#[inline(always)]
fn axpy(out: &mut [f64], c: f64, row: &[f64]) {
    if c == 0.0 {
        return;
    }
    for (o, &b) in out.iter_mut().zip(row) {
        *o += c * b;
    }
}

/// `out += a[m×k] · b[k×n]`
pub(crate) fn gemm_acc(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    let blocks = m / 4;
    for ib in 0..blocks {
        let i = ib * 4;
        let orows = &mut out[i * n..(i + 4) * n];
        for p in 0..k {
            let coef = [a[i * k + p], a[(i + 1) * k + p], a[(i + 2) * k + p], a[(i + 3) * k + p]];
            axpy4(orows, n, coef, &b[p * n..(p + 1) * n]);
        }
    }
    for i in blocks * 4..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            axpy(orow, a[i * k + p], &b[p * n..(p + 1) * n]);
        }
    }
}

/// `out += a[m×k] · b[n×k]ᵀ`
pub(crate) fn gemm_nt_acc(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] += dot(arow, brow);
        }
    }
}

/// `out += a[m×k]ᵀ · b[m×n]`, giving `[k×n]`.
pub(crate) fn gemm_tn_acc(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    let blocks = k / 4;
    for pb in 0..blocks {
        let p = pb * 4;
        let orows = &mut out[p * n..(p + 4) * n];
        for i in 0..m {
            let ar = &a[i * k + p..i * k + p + 4];
            axpy4(orows, n, [ar[0], ar[1], ar[2], ar[3]], &b[i * n..(i + 1) * n]);
        }
    }
    for p in blocks * 4..k {
        let orow = &mut out[p * n..(p + 1) * n];
        for i in 0..m {
            axpy(orow, a[i * k + p], &b[i * n..(i + 1) * n]);
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four accumulators let the compiler vectorize without reassociating.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

pub(crate) fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Row softmax with max subtraction. With `query_offset = Some(o)`, row `i`
/// only sees columns `0..=i + o`; the rest are exactly zero.
pub(crate) fn softmax_rows(x: &[f64], rows: usize, cols: usize, query_offset: Option<usize>) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for i in 0..rows {
        let visible = match query_offset {
            Some(o) => (i + o + 1).min(cols),
            None => cols,
        };
        let row = &x[i * cols..i * cols + visible];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let orow = &mut out[i * cols..i * cols + visible];
        let mut sum = 0.0;
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - max).exp();
            sum += *o;
        }
        orow.iter_mut().for_each(|o| *o /= sum);
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub(crate) fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}
