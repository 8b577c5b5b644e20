//! Forward/backward kernels on contiguous NCHW `f64` buffers.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array4, ArrayView2};

/// Lowers a batch to the `[ci*9, n*h*w]` patch matrix of a 3×3, pad-1 convolution.
pub fn im2col(x: &Array4<f64>) -> Array2<f64> {
    let (n, ci, h, w) = x.dim();
    let hw = h * w;
    let src = x.as_slice().expect("contiguous input");
    let mut cols = vec![0.0; ci * 9 * n * hw];
    for c in 0..ci {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (c * 9 + ky * 3 + kx) * n * hw;
                for b in 0..n {
                    let plane = &src[(b * ci + c) * hw..(b * ci + c + 1) * hw];
                    let dst = &mut cols[row + b * hw..row + (b + 1) * hw];
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let sy = sy as usize;
                        for xx in 0..w {
                            let sx = xx as isize + kx as isize - 1;
                            if sx >= 0 && sx < w as isize {
                                dst[y * w + xx] = plane[sy * w + sx as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((ci * 9, n * hw), cols).unwrap()
}

/// Adjoint of [`im2col`].
pub fn col2im(cols: &Array2<f64>, n: usize, ci: usize, h: usize, w: usize) -> Array4<f64> {
    let hw = h * w;
    let src = cols.as_slice().expect("contiguous cols");
    let mut out = vec![0.0; n * ci * hw];
    for c in 0..ci {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (c * 9 + ky * 3 + kx) * n * hw;
                for b in 0..n {
                    let col = &src[row + b * hw..row + (b + 1) * hw];
                    let plane = &mut out[(b * ci + c) * hw..(b * ci + c + 1) * hw];
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let sy = sy as usize;
                        for xx in 0..w {
                            let sx = xx as isize + kx as isize - 1;
                            if sx >= 0 && sx < w as isize {
                                plane[sy * w + sx as usize] += col[y * w + xx];
                            }
                        }
                    }
                }
            }
        }
    }
    Array4::from_shape_vec((n, ci, h, w), out).unwrap()
}

fn weight_matrix(weight: &Array4<f64>) -> ArrayView2<'_, f64> {
    let co = weight.len_of(ndarray::Axis(0));
    let k = weight.len() / co;
    ArrayView2::from_shape((co, k), weight.as_slice().expect("contiguous weight")).unwrap()
}

/// `[co, n*hw]` → NCHW.
fn unflatten(m: &Array2<f64>, n: usize, h: usize, w: usize) -> Array4<f64> {
    let co = m.nrows();
    let hw = h * w;
    let src = m.as_slice().unwrap();
    let mut out = vec![0.0; n * co * hw];
    for c in 0..co {
        for b in 0..n {
            out[(b * co + c) * hw..(b * co + c + 1) * hw]
                .copy_from_slice(&src[c * n * hw + b * hw..c * n * hw + (b + 1) * hw]);
        }
    }
    Array4::from_shape_vec((n, co, h, w), out).unwrap()
}

/// NCHW → `[co, n*hw]`.
fn flatten(x: &Array4<f64>) -> Array2<f64> {
    let (n, co, h, w) = x.dim();
    let hw = h * w;
    let src = x.as_slice().expect("contiguous");
    let mut out = vec![0.0; n * co * hw];
    for c in 0..co {
        for b in 0..n {
            out[c * n * hw + b * hw..c * n * hw + (b + 1) * hw]
                .copy_from_slice(&src[(b * co + c) * hw..(b * co + c + 1) * hw]);
        }
    }
    Array2::from_shape_vec((co, n * hw), out).unwrap()
}

/// 3×3 pad-1 stride-1 convolution without bias. Returns output and patch matrix.
pub fn conv_forward(x: &Array4<f64>, weight: &Array4<f64>) -> (Array4<f64>, Array2<f64>) {
    let (n, _, h, w) = x.dim();
    let cols = im2col(x);
    let wm = weight_matrix(weight);
    let mut out = Array2::zeros((wm.nrows(), cols.ncols()));
    general_mat_mul(1.0, &wm, &cols, 0.0, &mut out);
    (unflatten(&out, n, h, w), cols)
}

/// Returns `(d weight, d input)`; the input gradient is skipped unless requested.
pub fn conv_backward(
    dout: &Array4<f64>,
    cols: &Array2<f64>,
    weight: &Array4<f64>,
    want_weight: bool,
    want_input: bool,
) -> (Option<Array4<f64>>, Option<Array4<f64>>) {
    let (n, _, h, w) = dout.dim();
    let dm = flatten(dout);
    let wm = weight_matrix(weight);
    let dw = want_weight.then(|| {
        let mut g = Array2::zeros((wm.nrows(), wm.ncols()));
        general_mat_mul(1.0, &dm, &cols.t(), 0.0, &mut g);
        g.into_shape_with_order(weight.raw_dim()).unwrap()
    });
    let dx = want_input.then(|| {
        let mut dc = Array2::zeros((wm.ncols(), dm.ncols()));
        general_mat_mul(1.0, &wm.t(), &dm, 0.0, &mut dc);
        col2im(&dc, n, wm.ncols() / 9, h, w)
    });
    (dw, dx)
}

/// Per-channel mean and biased variance over `(n, h, w)`.
pub fn channel_moments(z: &Array4<f64>) -> (Vec<f64>, Vec<f64>) {
    let (n, c, h, w) = z.dim();
    let hw = h * w;
    let src = z.as_slice().expect("contiguous");
    let m = (n * hw) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for b in 0..n {
            s += src[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().sum::<f64>();
        }
        let mu = s / m;
        let mut v = 0.0;
        for b in 0..n {
            v += src[(b * c + ch) * hw..(b * c + ch + 1) * hw]
                .iter()
                .map(|x| (x - mu) * (x - mu))
                .sum::<f64>();
        }
        mean[ch] = mu;
        var[ch] = v / m;
    }
    (mean, var)
}

/// Normalizes with the given per-channel statistics; returns `(xhat, y)`.
pub fn bn_apply(
    z: &Array4<f64>,
    mean: &[f64],
    inv_std: &[f64],
    gamma: &[f64],
    beta: &[f64],
) -> (Array4<f64>, Array4<f64>) {
    let (n, c, h, w) = z.dim();
    let hw = h * w;
    let src = z.as_slice().expect("contiguous");
    let mut xhat = vec![0.0; src.len()];
    let mut y = vec![0.0; src.len()];
    for b in 0..n {
        for ch in 0..c {
            let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
            for i in r {
                let xh = (src[i] - mean[ch]) * inv_std[ch];
                xhat[i] = xh;
                y[i] = gamma[ch] * xh + beta[ch];
            }
        }
    }
    let shape = (n, c, h, w);
    (Array4::from_shape_vec(shape, xhat).unwrap(), Array4::from_shape_vec(shape, y).unwrap())
}

/// Backward through batch-statistics BN. Returns `(dz, dgamma, dbeta)`.
pub fn bn_backward_train(
    dy: &Array4<f64>,
    xhat: &Array4<f64>,
    inv_std: &[f64],
    gamma: &[f64],
) -> (Array4<f64>, Vec<f64>, Vec<f64>) {
    let (n, c, h, w) = dy.dim();
    let hw = h * w;
    let m = (n * hw) as f64;
    let g = dy.as_slice().unwrap();
    let xh = xhat.as_slice().unwrap();
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for b in 0..n {
        for ch in 0..c {
            for i in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                dgamma[ch] += g[i] * xh[i];
                dbeta[ch] += g[i];
            }
        }
    }
    let mut dz = vec![0.0; g.len()];
    for b in 0..n {
        for ch in 0..c {
            // dxhat = dy·γ; Σdxhat = γ·dβ; Σdxhat·xhat = γ·dγ
            let k = gamma[ch] * inv_std[ch] / m;
            for i in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                dz[i] = k * (m * g[i] - dbeta[ch] - xh[i] * dgamma[ch]);
            }
        }
    }
    (Array4::from_shape_vec((n, c, h, w), dz).unwrap(), dgamma, dbeta)
}

/// Backward through running-statistics BN (an affine map per channel).
pub fn bn_backward_eval(
    dy: &Array4<f64>,
    xhat: &Array4<f64>,
    inv_std: &[f64],
    gamma: &[f64],
    want_params: bool,
) -> (Array4<f64>, Option<(Vec<f64>, Vec<f64>)>) {
    let (n, c, h, w) = dy.dim();
    let hw = h * w;
    let g = dy.as_slice().unwrap();
    let mut dz = vec![0.0; g.len()];
    for b in 0..n {
        for ch in 0..c {
            let k = gamma[ch] * inv_std[ch];
            for i in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                dz[i] = k * g[i];
            }
        }
    }
    let params = want_params.then(|| {
        let xh = xhat.as_slice().unwrap();
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for b in 0..n {
            for ch in 0..c {
                for i in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                    dgamma[ch] += g[i] * xh[i];
                    dbeta[ch] += g[i];
                }
            }
        }
        (dgamma, dbeta)
    });
    (Array4::from_shape_vec((n, c, h, w), dz).unwrap(), params)
}

pub fn relu(x: &Array4<f64>) -> Array4<f64> {
    x.mapv(|v| v.max(0.0))
}

/// Gradient mask taken from the rectifier output (`out > 0`).
pub fn relu_backward(dout: &Array4<f64>, out: &Array4<f64>) -> Array4<f64> {
    let mut d = dout.clone();
    d.zip_mut_with(out, |g, &o| {
        if o <= 0.0 {
            *g = 0.0;
        }
    });
    d
}

/// 2×2 average pooling, stride 2.
pub fn avgpool2(x: &Array4<f64>) -> Array4<f64> {
    let (n, c, h, w) = x.dim();
    let (ho, wo) = (h / 2, w / 2);
    let src = x.as_slice().expect("contiguous");
    let mut out = vec![0.0; n * c * ho * wo];
    for p in 0..n * c {
        let plane = &src[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for y in 0..ho {
            for xx in 0..wo {
                let i = 2 * y * w + 2 * xx;
                dst[y * wo + xx] = 0.25 * (plane[i] + plane[i + 1] + plane[i + w] + plane[i + w + 1]);
            }
        }
    }
    Array4::from_shape_vec((n, c, ho, wo), out).unwrap()
}

pub fn avgpool2_backward(dout: &Array4<f64>) -> Array4<f64> {
    let (n, c, ho, wo) = dout.dim();
    let (h, w) = (ho * 2, wo * 2);
    let src = dout.as_slice().expect("contiguous");
    let mut out = vec![0.0; n * c * h * w];
    for p in 0..n * c {
        let plane = &src[p * ho * wo..(p + 1) * ho * wo];
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for y in 0..ho {
            for xx in 0..wo {
                let g = 0.25 * plane[y * wo + xx];
                let i = 2 * y * w + 2 * xx;
                dst[i] = g;
                dst[i + 1] = g;
                dst[i + w] = g;
                dst[i + w + 1] = g;
            }
        }
    }
    Array4::from_shape_vec((n, c, h, w), out).unwrap()
}

/// Global average pool to `[n, c]`.
pub fn global_avg(x: &Array4<f64>) -> Array2<f64> {
    let (n, c, h, w) = x.dim();
    let hw = h * w;
    let src = x.as_slice().expect("contiguous");
    Array2::from_shape_fn((n, c), |(b, ch)| {
        src[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().sum::<f64>() / hw as f64
    })
}

pub fn global_avg_backward(dfeat: &Array2<f64>, h: usize, w: usize) -> Array4<f64> {
    let (n, c) = dfeat.dim();
    let k = 1.0 / (h * w) as f64;
    Array4::from_shape_fn((n, c, h, w), |(b, ch, _, _)| dfeat[[b, ch]] * k)
}
