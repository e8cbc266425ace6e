//! Planar (`[channel][row][col]`) tensor kernels and their backward passes.

/// Unfolds the 3×3 neighbourhoods of `input` into a `[cin·9][h·w]` matrix,
/// zero outside the image.
fn im2col(input: &[f64], cin: usize, h: usize, w: usize) -> Vec<f64> {
    let plane = h * w;
    let mut cols = vec![0.0; cin * 9 * plane];
    for ci in 0..cin {
        let src = &input[ci * plane..(ci + 1) * plane];
        for ky in 0..3 {
            let (y_lo, y_hi) = valid_range(h, ky);
            for kx in 0..3 {
                let (x_lo, x_hi) = valid_range(w, kx);
                let row = &mut cols[(ci * 9 + ky * 3 + kx) * plane..][..plane];
                for y in y_lo..y_hi {
                    let sy = y + ky - 1;
                    row[y * w + x_lo..y * w + x_hi]
                        .copy_from_slice(&src[sy * w + x_lo + kx - 1..sy * w + x_hi + kx - 1]);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: sums every column entry back onto its pixel.
fn col2im(cols: &[f64], cin: usize, h: usize, w: usize) -> Vec<f64> {
    let plane = h * w;
    let mut out = vec![0.0; cin * plane];
    for ci in 0..cin {
        let dst = &mut out[ci * plane..(ci + 1) * plane];
        for ky in 0..3 {
            let (y_lo, y_hi) = valid_range(h, ky);
            for kx in 0..3 {
                let (x_lo, x_hi) = valid_range(w, kx);
                let row = &cols[(ci * 9 + ky * 3 + kx) * plane..][..plane];
                for y in y_lo..y_hi {
                    let sy = y + ky - 1;
                    let d = &mut dst[sy * w + x_lo + kx - 1..sy * w + x_hi + kx - 1];
                    for (dv, cv) in d.iter_mut().zip(&row[y * w + x_lo..y * w + x_hi]) {
                        *dv += cv;
                    }
                }
            }
        }
    }
    out
}

/// `c = a·b + beta·c` for row-major `a: m×k`, `b: k×n`, `c: m×n`. Either
/// operand may be read transposed.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, beta: f64, c: &mut [f64]) {
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above describe exactly the row-major slices whose
    // lengths are asserted here.
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// 3×3 convolution, stride 1, zero padding 1. `weight` is `[cout][cin][3][3]`.
pub fn conv3x3(input: &[f64], cin: usize, h: usize, w: usize, weight: &[f64], bias: &[f64], cout: usize) -> Vec<f64> {
    debug_assert_eq!(input.len(), cin * h * w);
    debug_assert_eq!(weight.len(), cout * cin * 9);
    let plane = h * w;
    let mut out = vec![0.0; cout * plane];
    for (co, dst) in out.chunks_exact_mut(plane).enumerate() {
        dst.fill(bias[co]);
    }
    let cols = im2col(input, cin, h, w);
    gemm(cout, cin * 9, plane, weight, false, &cols, false, 1.0, &mut out);
    out
}

/// Output rows/cols whose source index `o + k - 1` is inside `[0, n)`.
#[inline]
fn valid_range(n: usize, k: usize) -> (usize, usize) {
    let lo = if k == 0 { 1 } else { 0 };
    let hi = if k == 2 { n.saturating_sub(1) } else { n };
    (lo, hi.max(lo))
}

/// Accumulates weight and bias gradients; returns the input gradient when
/// `want_input` is set.
#[allow(clippy::too_many_arguments)]
pub fn conv3x3_backward(
    input: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    cout: usize,
    grad_out: &[f64],
    grad_weight: &mut [f64],
    grad_bias: &mut [f64],
    want_input: bool,
) -> Option<Vec<f64>> {
    let plane = h * w;
    for (co, go) in grad_out.chunks_exact(plane).enumerate() {
        grad_bias[co] += go.iter().sum::<f64>();
    }
    let cols = im2col(input, cin, h, w);
    gemm(cout, plane, cin * 9, grad_out, false, &cols, true, 1.0, grad_weight);
    want_input.then(|| {
        let mut gcols = vec![0.0; cin * 9 * plane];
        gemm(cin * 9, cout, plane, weight, true, grad_out, false, 0.0, &mut gcols);
        col2im(&gcols, cin, h, w)
    })
}

pub fn relu_in_place(x: &mut [f64]) {
    for v in x {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Zeroes `grad` wherever the rectifier output was not positive.
pub fn relu_backward(output: &[f64], grad: &mut [f64]) {
    for (g, o) in grad.iter_mut().zip(output) {
        if *o <= 0.0 {
            *g = 0.0;
        }
    }
}

/// 2×2 max-pool, stride 2. Returns pooled values and the flat input index of
/// each maximum (first in scan order on ties).
pub fn max_pool2(input: &[f64], c: usize, h: usize, w: usize) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let base = ch * h * w;
        for y in 0..oh {
            for x in 0..ow {
                let mut best = base + 2 * y * w + 2 * x;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * y + dy) * w + 2 * x + dx;
                    if input[i] > input[best] {
                        best = i;
                    }
                }
                out.push(input[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

pub fn max_pool2_backward(grad_out: &[f64], argmax: &[usize], grad_in: &mut [f64]) {
    for (g, &i) in grad_out.iter().zip(argmax) {
        grad_in[i] += g;
    }
}

/// Nearest-neighbour 2× upsampling.
pub fn upsample2(input: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let ow = 2 * w;
    let mut out = vec![0.0; c * 4 * h * w];
    for ch in 0..c {
        for y in 0..2 * h {
            let src = &input[ch * h * w + (y / 2) * w..ch * h * w + (y / 2 + 1) * w];
            let dst = &mut out[ch * 4 * h * w + y * ow..ch * 4 * h * w + (y + 1) * ow];
            for (x, d) in dst.iter_mut().enumerate() {
                *d = src[x / 2];
            }
        }
    }
    out
}

/// Adjoint of [`upsample2`]: sums each 2×2 block. `h, w` are the small size.
pub fn upsample2_backward(grad_out: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let ow = 2 * w;
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..2 * h {
            let src = &grad_out[ch * 4 * h * w + y * ow..ch * 4 * h * w + (y + 1) * ow];
            let dst = &mut out[ch * h * w + (y / 2) * w..ch * h * w + (y / 2 + 1) * w];
            for (x, g) in src.iter().enumerate() {
                dst[x / 2] += g;
            }
        }
    }
    out
}

/// Per-channel spatial mean.
pub fn global_avg_pool(input: &[f64], c: usize, plane: usize) -> Vec<f64> {
    (0..c)
        .map(|ch| input[ch * plane..(ch + 1) * plane].iter().sum::<f64>() / plane as f64)
        .collect()
}

/// `y = W x + b` with `W` stored `[out][in]`.
pub fn dense(x: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    bias.iter()
        .enumerate()
        .map(|(o, b)| b + weight[o * x.len()..(o + 1) * x.len()].iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
        .collect()
}

/// Accumulates dense-layer parameter gradients and returns `∂L/∂x`.
pub fn dense_backward(x: &[f64], weight: &[f64], grad_out: &[f64], grad_weight: &mut [f64], grad_bias: &mut [f64]) -> Vec<f64> {
    let n = x.len();
    let mut gx = vec![0.0; n];
    for (o, &g) in grad_out.iter().enumerate() {
        grad_bias[o] += g;
        for i in 0..n {
            grad_weight[o * n + i] += g * x[i];
            gx[i] += g * weight[o * n + i];
        }
    }
    gx
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
