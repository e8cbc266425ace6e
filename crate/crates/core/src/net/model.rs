use super::layers::*;
use super::ModelParams;
use crate::error::{Error, Result};
use crate::geom::{GridDomain, LabeledSample, ProbMap, RgbImage};
use crate::par::{self, Exec};
use crate::whd::{whd_gradient, WhdParams};

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    pub prob_map: ProbMap,
    /// Count head output clamped at zero.
    pub count_estimate: f64,
    /// Unclamped count head output; the count loss is taken on this value.
    pub count_raw: f64,
}

struct EncBlock {
    /// Block input, `cin × s × s`.
    input: Vec<f64>,
    a1: Vec<f64>,
    /// Pre-pool output, also the skip connection.
    a2: Vec<f64>,
    argmax: Vec<usize>,
    cin: usize,
    c: usize,
    size: usize,
}

struct DecBlock {
    /// Upsampled + skip, `(c_below + c) × s × s`.
    cat: Vec<f64>,
    d1: Vec<f64>,
    d2: Vec<f64>,
    c_below: usize,
    c: usize,
    size: usize,
}

struct Trace {
    enc: Vec<EncBlock>,
    bottleneck: Vec<f64>,
    /// Decoder blocks in execution order (deepest first).
    dec: Vec<DecBlock>,
    prob: Vec<f64>,
    feat: Vec<f64>,
    hidden: Vec<f64>,
    count_raw: f64,
}

/// Channel-planar input rescaled from [0,1] to [-1,1].
fn input_tensor(params: &ModelParams, image: &RgbImage) -> Result<Vec<f64>> {
    let s = params.config().input_size;
    if image.width() != s || image.height() != s {
        return Err(Error::Shape(format!(
            "image is {}x{}, model expects {s}x{s}",
            image.width(),
            image.height()
        )));
    }
    Ok(image.channels().concat().into_iter().map(|v| (v - 0.5) * 2.0).collect())
}

fn run(params: &ModelParams, image: &RgbImage) -> Result<Trace> {
    let cfg = params.config();
    let channels = cfg.encoder_channels();
    let mut x = input_tensor(params, image)?;
    let mut cin = 3;
    let mut size = cfg.input_size;
    let mut enc = Vec::with_capacity(channels.len());
    for (b, &c) in channels.iter().enumerate() {
        let w1 = params.data(&format!("enc{b}.conv1.weight"));
        let b1 = params.data(&format!("enc{b}.conv1.bias"));
        let mut a1 = conv3x3(&x, cin, size, size, w1, b1, c);
        relu_in_place(&mut a1);
        let w2 = params.data(&format!("enc{b}.conv2.weight"));
        let b2 = params.data(&format!("enc{b}.conv2.bias"));
        let mut a2 = conv3x3(&a1, c, size, size, w2, b2, c);
        relu_in_place(&mut a2);
        let (pooled, argmax) = max_pool2(&a2, c, size, size);
        enc.push(EncBlock {
            input: std::mem::replace(&mut x, pooled),
            a1,
            a2,
            argmax,
            cin,
            c,
            size,
        });
        cin = c;
        size /= 2;
    }
    let bottleneck = x;
    let deep_c = cin;
    let deep_plane = size * size;

    let mut below = bottleneck.clone();
    let mut c_below = deep_c;
    let mut dec = Vec::with_capacity(channels.len());
    for b in (0..channels.len()).rev() {
        let skip = &enc[b];
        let up = upsample2(&below, c_below, size, size);
        size *= 2;
        let mut cat = up;
        cat.extend_from_slice(&skip.a2);
        let c = skip.c;
        let w1 = params.data(&format!("dec{b}.conv1.weight"));
        let b1 = params.data(&format!("dec{b}.conv1.bias"));
        let mut d1 = conv3x3(&cat, c_below + c, size, size, w1, b1, c);
        relu_in_place(&mut d1);
        let w2 = params.data(&format!("dec{b}.conv2.weight"));
        let b2 = params.data(&format!("dec{b}.conv2.bias"));
        let mut d2 = conv3x3(&d1, c, size, size, w2, b2, c);
        relu_in_place(&mut d2);
        below = d2.clone();
        dec.push(DecBlock {
            cat,
            d1,
            d2,
            c_below,
            c,
            size,
        });
        c_below = c;
    }

    let plane = size * size;
    let c0 = channels[0];
    let hw = params.data("head.weight");
    let hb = params.data("head.bias")[0];
    let top = &dec.last().expect("at least one block").d2;
    let mut prob = vec![hb; plane];
    for (ch, &wv) in hw.iter().enumerate().take(c0) {
        for (p, v) in prob.iter_mut().zip(&top[ch * plane..(ch + 1) * plane]) {
            *p += wv * v;
        }
    }
    for p in &mut prob {
        *p = sigmoid(*p);
    }

    let mut feat = global_avg_pool(&bottleneck, deep_c, deep_plane);
    feat.extend(global_avg_pool(top, c0, plane));
    let mut hidden = dense(&feat, params.data("count.fc1.weight"), params.data("count.fc1.bias"));
    relu_in_place(&mut hidden);
    let count_raw = dense(&hidden, params.data("count.fc2.weight"), params.data("count.fc2.bias"))[0];

    Ok(Trace {
        enc,
        bottleneck,
        dec,
        prob,
        feat,
        hidden,
        count_raw,
    })
}

pub fn forward(params: &ModelParams, image: &RgbImage) -> Result<ForwardOutput> {
    let t = run(params, image)?;
    let dom = GridDomain::square(params.config().input_size)?;
    Ok(ForwardOutput {
        prob_map: ProbMap::new(dom, t.prob)?,
        count_estimate: t.count_raw.max(0.0),
        count_raw: t.count_raw,
    })
}

/// Reverse pass given `∂L/∂p` for every pixel and `∂L/∂count_raw`.
fn backward(params: &ModelParams, t: &Trace, grad_prob: &[f64], grad_count: f64, grads: &mut ModelParams) {
    let c0 = t.enc[0].c;
    let top = &t.dec.last().expect("at least one block").d2;
    let plane = t.prob.len();

    // Count head.
    let mut g_hidden = {
        let w2 = params.data("count.fc2.weight");
        let mut gw = vec![0.0; w2.len()];
        let mut gb = vec![0.0; 1];
        let gh = dense_backward(&t.hidden, w2, &[grad_count], &mut gw, &mut gb);
        add_to(grads.data_mut("count.fc2.weight"), &gw);
        add_to(grads.data_mut("count.fc2.bias"), &gb);
        gh
    };
    relu_backward(&t.hidden, &mut g_hidden);
    let g_feat = {
        let w1 = params.data("count.fc1.weight");
        let mut gw = vec![0.0; w1.len()];
        let mut gb = vec![0.0; g_hidden.len()];
        let gf = dense_backward(&t.feat, w1, &g_hidden, &mut gw, &mut gb);
        add_to(grads.data_mut("count.fc1.weight"), &gw);
        add_to(grads.data_mut("count.fc1.bias"), &gb);
        gf
    };
    let deep_c = t.enc.last().expect("at least one block").c;
    let deep_plane = t.bottleneck.len() / deep_c;

    // Head: p = σ(w·top + b).
    let g_logit: Vec<f64> = grad_prob
        .iter()
        .zip(&t.prob)
        .map(|(g, p)| g * p * (1.0 - p))
        .collect();
    grads.data_mut("head.bias")[0] += g_logit.iter().sum::<f64>();
    let hw = params.data("head.weight").to_vec();
    let mut g_top = vec![0.0; c0 * plane];
    {
        let ghw = grads.data_mut("head.weight");
        for ch in 0..c0 {
            let src = &top[ch * plane..(ch + 1) * plane];
            ghw[ch] += g_logit.iter().zip(src).map(|(a, b)| a * b).sum::<f64>();
            let gt = &mut g_top[ch * plane..(ch + 1) * plane];
            let extra = g_feat[deep_c + ch] / plane as f64;
            for (d, g) in gt.iter_mut().zip(&g_logit) {
                *d = hw[ch] * g + extra;
            }
        }
    }

    // Decoder, shallowest first.
    let l = t.enc.len();
    let mut skip_grads: Vec<Vec<f64>> = t.enc.iter().map(|e| vec![0.0; e.a2.len()]).collect();
    let mut g = g_top;
    for (k, blk) in t.dec.iter().enumerate().rev() {
        let b = l - 1 - k;
        let s = blk.size;
        relu_backward(&blk.d2, &mut g);
        let name = format!("dec{b}.conv2");
        let mut gd1 = conv_bwd(params, grads, &name, &blk.d1, blk.c, s, blk.c, &g, true).expect("input grad");
        relu_backward(&blk.d1, &mut gd1);
        let name = format!("dec{b}.conv1");
        let gcat = conv_bwd(params, grads, &name, &blk.cat, blk.c_below + blk.c, s, blk.c, &gd1, true).expect("input grad");
        let split = blk.c_below * s * s;
        add_to(&mut skip_grads[b], &gcat[split..]);
        g = upsample2_backward(&gcat[..split], blk.c_below, s / 2, s / 2);
    }

    // g now holds ∂L/∂bottleneck; add the count head's pooled branch.
    for ch in 0..deep_c {
        let extra = g_feat[ch] / deep_plane as f64;
        for v in &mut g[ch * deep_plane..(ch + 1) * deep_plane] {
            *v += extra;
        }
    }

    // Encoder, deepest first.
    for b in (0..l).rev() {
        let blk = &t.enc[b];
        let s = blk.size;
        let mut ga2 = std::mem::take(&mut skip_grads[b]);
        max_pool2_backward(&g, &blk.argmax, &mut ga2);
        relu_backward(&blk.a2, &mut ga2);
        let name = format!("enc{b}.conv2");
        let mut ga1 = conv_bwd(params, grads, &name, &blk.a1, blk.c, s, blk.c, &ga2, true).expect("input grad");
        relu_backward(&blk.a1, &mut ga1);
        let name = format!("enc{b}.conv1");
        if let Some(gin) = conv_bwd(params, grads, &name, &blk.input, blk.cin, s, blk.c, &ga1, b > 0) {
            g = gin;
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_bwd(
    params: &ModelParams,
    grads: &mut ModelParams,
    name: &str,
    input: &[f64],
    cin: usize,
    size: usize,
    cout: usize,
    grad_out: &[f64],
    want_input: bool,
) -> Option<Vec<f64>> {
    let w = params.data(&format!("{name}.weight"));
    let mut gw = vec![0.0; w.len()];
    let mut gb = vec![0.0; cout];
    let gin = conv3x3_backward(input, cin, size, size, w, cout, grad_out, &mut gw, &mut gb, want_input);
    add_to(grads.data_mut(&format!("{name}.weight")), &gw);
    add_to(grads.data_mut(&format!("{name}.bias")), &gb);
    gin
}

fn add_to(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Huber-style loss with transition at 1: `e²/2` for `|e| < 1`, else `|e| - 1/2`.
/// Returns the value and its derivative.
pub fn smooth_l1(e: f64) -> (f64, f64) {
    if e.abs() < 1.0 {
        (0.5 * e * e, e)
    } else {
        (e.abs() - 0.5, e.signum())
    }
}

fn sample_loss_and_grad(
    params: &ModelParams,
    sample: &LabeledSample,
    whd_params: &WhdParams,
    lambda_count: f64,
) -> Result<(f64, ModelParams)> {
    let t = run(params, &sample.image)?;
    let dom = GridDomain::square(params.config().input_size)?;
    let map = ProbMap::new(dom, t.prob.clone())?;
    let (loc, gmap) = whd_gradient(&map, &sample.centers, whd_params)?;
    let (cl, cg) = smooth_l1(t.count_raw - sample.count as f64);
    let mut grads = params.zeros_like();
    backward(params, &t, &gmap.values, lambda_count * cg, &mut grads);
    Ok((loc + lambda_count * cl, grads))
}

/// Batch-mean of `whd + λ·smoothL1(count - true count)` and its gradient
/// with respect to every parameter.
pub fn loss_and_grad(
    params: &ModelParams,
    batch: &[LabeledSample],
    whd_params: &WhdParams,
    lambda_count: f64,
) -> Result<(f64, ModelParams)> {
    loss_and_grad_with(params, batch, whd_params, lambda_count, Exec::default())
}

/// [`loss_and_grad`] with an explicit execution mode over batch items. The
/// reduction runs in batch order, so both modes give identical bits.
pub fn loss_and_grad_with(
    params: &ModelParams,
    batch: &[LabeledSample],
    whd_params: &WhdParams,
    lambda_count: f64,
    exec: Exec,
) -> Result<(f64, ModelParams)> {
    if batch.is_empty() {
        return Err(Error::Domain("empty batch".into()));
    }
    let per_sample = par::map(exec, batch, |s| sample_loss_and_grad(params, s, whd_params, lambda_count));
    let mut loss = 0.0;
    let mut grads = params.zeros_like();
    for r in per_sample {
        let (l, g) = r?;
        loss += l;
        grads.add_assign(&g);
    }
    let inv = 1.0 / batch.len() as f64;
    grads.scale(inv);
    Ok((loss * inv, grads))
}
