//! Same-padded 2D convolution over `[channel][row][col]` planes.

use super::{ConvLayer, LayerGrad};

/// Row/column range of output positions whose tap at offset `d` is in bounds.
fn valid(n: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d).min(n as isize).max(lo as isize) as usize;
    (lo, hi)
}

pub(super) fn forward(layer: &ConvLayer, input: &[f64], h: usize, w: usize) -> Vec<f64> {
    let plane = h * w;
    let k = layer.kernel;
    let pad = (k / 2) as isize;
    let mut out = vec![0.0; layer.out_ch * plane];
    for o in 0..layer.out_ch {
        let dst = &mut out[o * plane..(o + 1) * plane];
        dst.fill(layer.bias[o]);
        for i in 0..layer.in_ch {
            let src = &input[i * plane..(i + 1) * plane];
            for ky in 0..k {
                let dy = ky as isize - pad;
                let (y0, y1) = valid(h, dy);
                for kx in 0..k {
                    let dx = kx as isize - pad;
                    let (x0, x1) = valid(w, dx);
                    let wv = layer.weight[((o * layer.in_ch + i) * k + ky) * k + kx];
                    if wv == 0.0 || x0 >= x1 {
                        continue;
                    }
                    let sx0 = (x0 as isize + dx) as usize;
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let s = &src[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
                        let d = &mut dst[y * w + x0..y * w + x1];
                        for (dv, sv) in d.iter_mut().zip(s) {
                            *dv += wv * sv;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates parameter gradients into `grad` and returns the input
/// gradient when requested.
pub(super) fn backward(
    layer: &ConvLayer,
    input: &[f64],
    h: usize,
    w: usize,
    grad_out: &[f64],
    grad: &mut LayerGrad,
    want_input_grad: bool,
) -> Option<Vec<f64>> {
    let plane = h * w;
    let k = layer.kernel;
    let pad = (k / 2) as isize;
    let mut gin = want_input_grad.then(|| vec![0.0; layer.in_ch * plane]);
    for o in 0..layer.out_ch {
        let go = &grad_out[o * plane..(o + 1) * plane];
        grad.bias[o] += go.iter().sum::<f64>();
        for i in 0..layer.in_ch {
            let src = &input[i * plane..(i + 1) * plane];
            for ky in 0..k {
                let dy = ky as isize - pad;
                let (y0, y1) = valid(h, dy);
                for kx in 0..k {
                    let dx = kx as isize - pad;
                    let (x0, x1) = valid(w, dx);
                    if x0 >= x1 {
                        continue;
                    }
                    let widx = ((o * layer.in_ch + i) * k + ky) * k + kx;
                    let wv = layer.weight[widx];
                    let sx0 = (x0 as isize + dx) as usize;
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let s = &src[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
                        let g = &go[y * w + x0..y * w + x1];
                        acc += s.iter().zip(g).map(|(a, b)| a * b).sum::<f64>();
                    }
                    grad.weight[widx] += acc;
                    if let Some(gin) = gin.as_mut() {
                        if wv == 0.0 {
                            continue;
                        }
                        let gi = &mut gin[i * plane..(i + 1) * plane];
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let d = &mut gi[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
                            let g = &go[y * w + x0..y * w + x1];
                            for (dv, gv) in d.iter_mut().zip(g) {
                                *dv += wv * gv;
                            }
                        }
                    }
                }
            }
        }
    }
    gin
}
