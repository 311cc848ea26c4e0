//! Forward kernels and their recorded backward closures.
//!
//! Layout is row-major `[N,C,H,W]` throughout. Convolution and the other
//! spatial kernels split work over disjoint output planes via
//! [`crate::exec`], so parallel and sequential execution are bit-identical.

use super::{Mode, Tensor};
use crate::error::{Error, Result};
use crate::exec;

fn dims2(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match *t.shape() {
        [a, b] => Ok((a, b)),
        ref s => Err(Error::ShapeMismatch { op, detail: format!("expected 2-d tensor, got {s:?}") }),
    }
}

fn dims4(t: &Tensor, op: &'static str) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        ref s => Err(Error::ShapeMismatch { op, detail: format!("expected 4-d tensor, got {s:?}") }),
    }
}

/// Output index range `[lo, hi)` along one spatial axis for which
/// `o*stride + k - padding` stays inside `[0, in_dim)`.
fn valid_range(in_dim: usize, out_dim: usize, stride: usize, padding: usize, k: usize) -> (usize, usize) {
    let lo = if padding > k { (padding - k + stride - 1) / stride } else { 0 };
    let hi = if in_dim + padding > k {
        ((in_dim - 1 + padding - k) / stride + 1).min(out_dim)
    } else {
        0
    };
    (lo.min(hi), hi)
}

struct ConvDims {
    n: usize,
    c_in: usize,
    h_in: usize,
    w_in: usize,
    f_out: usize,
    kh: usize,
    kw: usize,
    h_out: usize,
    w_out: usize,
    stride: usize,
    padding: usize,
}

/// out[f] += w * shifted input row, one (ki,kj) tap at a time. The stride-1
/// branch is a contiguous axpy that autovectorizes.
fn conv_forward_plane(plane: &mut [f32], x_img: &[f32], wgt: &[f32], f_i: usize, d: &ConvDims) {
    let (s, p) = (d.stride, d.padding);
    for c in 0..d.c_in {
        let x_ch = &x_img[c * d.h_in * d.w_in..][..d.h_in * d.w_in];
        let w_base = (f_i * d.c_in + c) * d.kh * d.kw;
        for ki in 0..d.kh {
            let (oh_lo, oh_hi) = valid_range(d.h_in, d.h_out, s, p, ki);
            for kj in 0..d.kw {
                let wv = wgt[w_base + ki * d.kw + kj];
                let (ow_lo, ow_hi) = valid_range(d.w_in, d.w_out, s, p, kj);
                if ow_lo >= ow_hi {
                    continue;
                }
                for oh in oh_lo..oh_hi {
                    let ih = oh * s + ki - p;
                    let x_row = &x_ch[ih * d.w_in..][..d.w_in];
                    let o_row = &mut plane[oh * d.w_out..][..d.w_out];
                    let iw0 = ow_lo * s + kj - p;
                    if s == 1 {
                        let xs = &x_row[iw0..iw0 + (ow_hi - ow_lo)];
                        for (o, xv) in o_row[ow_lo..ow_hi].iter_mut().zip(xs) {
                            *o += wv * xv;
                        }
                    } else {
                        let mut iw = iw0;
                        for o in o_row[ow_lo..ow_hi].iter_mut() {
                            *o += wv * x_row[iw];
                            iw += s;
                        }
                    }
                }
            }
        }
    }
}

fn conv_backward_input_plane(plane: &mut [f32], dy: &[f32], wgt: &[f32], n_i: usize, c: usize, d: &ConvDims) {
    let (s, p) = (d.stride, d.padding);
    for f_i in 0..d.f_out {
        let dy_plane = &dy[(n_i * d.f_out + f_i) * d.h_out * d.w_out..][..d.h_out * d.w_out];
        let w_base = (f_i * d.c_in + c) * d.kh * d.kw;
        for ki in 0..d.kh {
            let (oh_lo, oh_hi) = valid_range(d.h_in, d.h_out, s, p, ki);
            for kj in 0..d.kw {
                let wv = wgt[w_base + ki * d.kw + kj];
                let (ow_lo, ow_hi) = valid_range(d.w_in, d.w_out, s, p, kj);
                if ow_lo >= ow_hi {
                    continue;
                }
                for oh in oh_lo..oh_hi {
                    let ih = oh * s + ki - p;
                    let di_row = &mut plane[ih * d.w_in..][..d.w_in];
                    let dy_row = &dy_plane[oh * d.w_out..][..d.w_out];
                    let iw0 = ow_lo * s + kj - p;
                    if s == 1 {
                        let dst = &mut di_row[iw0..iw0 + (ow_hi - ow_lo)];
                        for (di, dyv) in dst.iter_mut().zip(&dy_row[ow_lo..ow_hi]) {
                            *di += wv * dyv;
                        }
                    } else {
                        let mut iw = iw0;
                        for dyv in &dy_row[ow_lo..ow_hi] {
                            di_row[iw] += wv * dyv;
                            iw += s;
                        }
                    }
                }
            }
        }
    }
}

fn conv_backward_weight_block(block: &mut [f32], x: &[f32], dy: &[f32], f_i: usize, d: &ConvDims) {
    let (s, p) = (d.stride, d.padding);
    for n_i in 0..d.n {
        let dy_plane = &dy[(n_i * d.f_out + f_i) * d.h_out * d.w_out..][..d.h_out * d.w_out];
        let x_img = &x[n_i * d.c_in * d.h_in * d.w_in..][..d.c_in * d.h_in * d.w_in];
        for c in 0..d.c_in {
            let x_ch = &x_img[c * d.h_in * d.w_in..][..d.h_in * d.w_in];
            for ki in 0..d.kh {
                let (oh_lo, oh_hi) = valid_range(d.h_in, d.h_out, s, p, ki);
                for kj in 0..d.kw {
                    let (ow_lo, ow_hi) = valid_range(d.w_in, d.w_out, s, p, kj);
                    if ow_lo >= ow_hi {
                        continue;
                    }
                    let mut acc = 0.0f64;
                    for oh in oh_lo..oh_hi {
                        let ih = oh * s + ki - p;
                        let x_row = &x_ch[ih * d.w_in..][..d.w_in];
                        let dy_row = &dy_plane[oh * d.w_out..][..d.w_out];
                        let iw0 = ow_lo * s + kj - p;
                        let mut dot = 0.0f32;
                        if s == 1 {
                            let xs = &x_row[iw0..iw0 + (ow_hi - ow_lo)];
                            for (xv, dyv) in xs.iter().zip(&dy_row[ow_lo..ow_hi]) {
                                dot += xv * dyv;
                            }
                        } else {
                            let mut iw = iw0;
                            for dyv in &dy_row[ow_lo..ow_hi] {
                                dot += x_row[iw] * dyv;
                                iw += s;
                            }
                        }
                        acc += dot as f64;
                    }
                    block[(c * d.kh + ki) * d.kw + kj] += acc as f32;
                }
            }
        }
    }
}

impl Tensor {
    /// 2-d cross-correlation with zero padding. `input` is `[N,C,H,W]`,
    /// `weight` is `[F,C,kh,kw]` with odd kernel sides, `bias` is `[F]`.
    pub fn conv2d(
        &self,
        weight: &Tensor,
        bias: Option<&Tensor>,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor> {
        let (n, c_in, h_in, w_in) = dims4(self, "conv2d")?;
        let (f_out, c_w, kh, kw) = dims4(weight, "conv2d")?;
        if c_w != c_in {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                detail: format!("input has {c_in} channels but weight expects {c_w}"),
            });
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::InvalidArgument {
                op: "conv2d",
                detail: format!("kernel sides must be odd, got {kh}x{kw}"),
            });
        }
        if stride == 0 {
            return Err(Error::InvalidArgument { op: "conv2d", detail: "stride must be >= 1".into() });
        }
        if let Some(b) = bias {
            if b.shape() != [f_out] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d",
                    detail: format!("bias shape {:?} does not match {f_out} filters", b.shape()),
                });
            }
        }
        if h_in + 2 * padding < kh || w_in + 2 * padding < kw {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                detail: format!("kernel {kh}x{kw} larger than padded input {h_in}x{w_in} (padding {padding})"),
            });
        }
        let h_out = (h_in + 2 * padding - kh) / stride + 1;
        let w_out = (w_in + 2 * padding - kw) / stride + 1;
        let d = ConvDims { n, c_in, h_in, w_in, f_out, kh, kw, h_out, w_out, stride, padding };

        let mut out = vec![0.0f32; n * f_out * h_out * w_out];
        {
            let x = self.data();
            let wgt = weight.data();
            let b = bias.map(|b| b.to_vec());
            let (x, wgt): (&[f32], &[f32]) = (&x, &wgt);
            exec::chunks_mut(&mut out, h_out * w_out, |plane_idx, plane| {
                let n_i = plane_idx / f_out;
                let f_i = plane_idx % f_out;
                let x_img = &x[n_i * c_in * h_in * w_in..][..c_in * h_in * w_in];
                conv_forward_plane(plane, x_img, wgt, f_i, &d);
                if let Some(b) = &b {
                    let bv = b[f_i];
                    for o in plane.iter_mut() {
                        *o += bv;
                    }
                }
            });
        }

        let input = self.clone();
        let weight_t = weight.clone();
        let bias_t = bias.cloned();
        let mut parents = vec![input.clone(), weight_t.clone()];
        if let Some(b) = &bias_t {
            parents.push(b.clone());
        }
        Tensor::from_op(
            "conv2d",
            vec![n, f_out, h_out, w_out],
            out,
            parents,
            Box::new(move |dy, _out| {
                let x = input.data();
                let wgt = weight_t.data();
                let (x, wgt): (&[f32], &[f32]) = (&x, &wgt);
                let dims = ConvDims { n, c_in, h_in, w_in, f_out, kh, kw, h_out, w_out, stride, padding };

                let d_input = input.requires_grad().then(|| {
                    let mut dx = vec![0.0f32; n * c_in * h_in * w_in];
                    exec::chunks_mut(&mut dx, h_in * w_in, |plane_idx, plane| {
                        conv_backward_input_plane(plane, dy, wgt, plane_idx / c_in, plane_idx % c_in, &dims);
                    });
                    dx
                });
                let d_weight = weight_t.requires_grad().then(|| {
                    let mut dw = vec![0.0f32; f_out * c_in * kh * kw];
                    exec::chunks_mut(&mut dw, c_in * kh * kw, |f_i, block| {
                        conv_backward_weight_block(block, x, dy, f_i, &dims);
                    });
                    dw
                });
                let mut grads = vec![d_input, d_weight];
                if let Some(b) = &bias_t {
                    grads.push(b.requires_grad().then(|| {
                        exec::map_indexed(f_out, |f_i| {
                            let mut acc = 0.0f64;
                            for n_i in 0..n {
                                let plane = &dy[(n_i * f_out + f_i) * h_out * w_out..][..h_out * w_out];
                                acc += plane.iter().map(|&v| v as f64).sum::<f64>();
                            }
                            acc as f32
                        })
                    }));
                }
                grads
            }),
        )
    }

    /// Per-channel batch normalization. Train mode normalizes with batch
    /// statistics and folds them into the running averages; eval mode uses
    /// the stored running statistics and never mutates `state`.
    pub fn batch_norm(&self, state: &super::BatchNormState, mode: Mode) -> Result<Tensor> {
        let (n, c_ch, h, w) = dims4(self, "batch_norm")?;
        if c_ch != state.channels() {
            return Err(Error::ShapeMismatch {
                op: "batch_norm",
                detail: format!("input has {c_ch} channels but state holds {}", state.channels()),
            });
        }
        let m = n * h * w;
        let eps = state.epsilon;
        let plane = h * w;
        let img = c_ch * plane;

        let (mean, inv_std) = match mode {
            Mode::Train => {
                if m < 2 {
                    return Err(Error::InvalidArgument {
                        op: "batch_norm",
                        detail: format!("train mode needs at least 2 elements per channel, got {m}"),
                    });
                }
                let x = self.data();
                let x: &[f32] = &x;
                let stats = exec::map_indexed(c_ch, |c| {
                    let mut sum = 0.0f64;
                    let mut sumsq = 0.0f64;
                    for n_i in 0..n {
                        let ch = &x[n_i * img + c * plane..][..plane];
                        for &v in ch {
                            let v = v as f64;
                            sum += v;
                            sumsq += v * v;
                        }
                    }
                    let mean = sum / m as f64;
                    let var = (sumsq / m as f64 - mean * mean).max(0.0);
                    (mean, var)
                });
                let mean: Vec<f32> = stats.iter().map(|s| s.0 as f32).collect();
                let var_biased: Vec<f64> = stats.iter().map(|s| s.1).collect();
                let inv_std: Vec<f32> =
                    var_biased.iter().map(|&v| (1.0 / (v + eps as f64).sqrt()) as f32).collect();
                let var_unbiased: Vec<f32> =
                    var_biased.iter().map(|&v| (v * m as f64 / (m as f64 - 1.0)) as f32).collect();
                state.update_running(&mean, &var_unbiased);
                (mean, inv_std)
            }
            Mode::Eval => {
                let mean = state.running_mean();
                let inv_std: Vec<f32> =
                    state.running_var().iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
                (mean, inv_std)
            }
        };

        // Normalized values are saved for the backward pass.
        let mut xhat = vec![0.0f32; self.len()];
        {
            let x = self.data();
            let x: &[f32] = &x;
            let (mean, inv_std): (&[f32], &[f32]) = (&mean, &inv_std);
            exec::chunks_mut(&mut xhat, plane, |plane_idx, dst| {
                let c = plane_idx % c_ch;
                let src = &x[plane_idx * plane..][..plane];
                let (mu, inv) = (mean[c], inv_std[c]);
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = (s - mu) * inv;
                }
            });
        }
        let mut out = vec![0.0f32; self.len()];
        {
            let g = state.gamma.data();
            let b = state.beta.data();
            let (g, b): (&[f32], &[f32]) = (&g, &b);
            let xh: &[f32] = &xhat;
            exec::chunks_mut(&mut out, plane, |plane_idx, dst| {
                let c = plane_idx % c_ch;
                let src = &xh[plane_idx * plane..][..plane];
                let (gv, bv) = (g[c], b[c]);
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = gv * s + bv;
                }
            });
        }

        let input = self.clone();
        let gamma = state.gamma.clone();
        let beta = state.beta.clone();
        let parents = vec![input.clone(), gamma.clone(), beta.clone()];
        Tensor::from_op(
            "batch_norm",
            self.shape().to_vec(),
            out,
            parents,
            Box::new(move |dy, _out| {
                let xh: &[f32] = &xhat;
                // Per-channel reductions of dy and dy*xhat.
                let sums = exec::map_indexed(c_ch, |c| {
                    let mut s_dy = 0.0f64;
                    let mut s_dyx = 0.0f64;
                    for n_i in 0..n {
                        let base = n_i * img + c * plane;
                        let dyc = &dy[base..][..plane];
                        let xhc = &xh[base..][..plane];
                        for (d, x) in dyc.iter().zip(xhc) {
                            s_dy += *d as f64;
                            s_dyx += (*d as f64) * (*x as f64);
                        }
                    }
                    (s_dy, s_dyx)
                });

                let d_input = input.requires_grad().then(|| {
                    let g = gamma.data();
                    let g: &[f32] = &g;
                    let mut dx = vec![0.0f32; n * img];
                    match mode {
                        Mode::Train => {
                            let inv_m = 1.0 / m as f32;
                            exec::chunks_mut(&mut dx, plane, |plane_idx, dst| {
                                let c = plane_idx % c_ch;
                                let base = plane_idx * plane;
                                let dyc = &dy[base..][..plane];
                                let xhc = &xh[base..][..plane];
                                let k = g[c] * inv_std[c];
                                let mean_dy = sums[c].0 as f32 * inv_m;
                                let mean_dyx = sums[c].1 as f32 * inv_m;
                                for ((d, dyv), xv) in dst.iter_mut().zip(dyc).zip(xhc) {
                                    *d = k * (dyv - mean_dy - xv * mean_dyx);
                                }
                            });
                        }
                        Mode::Eval => {
                            exec::chunks_mut(&mut dx, plane, |plane_idx, dst| {
                                let c = plane_idx % c_ch;
                                let k = g[c] * inv_std[c];
                                let dyc = &dy[plane_idx * plane..][..plane];
                                for (d, dyv) in dst.iter_mut().zip(dyc) {
                                    *d = k * dyv;
                                }
                            });
                        }
                    }
                    dx
                });
                let d_gamma = gamma
                    .requires_grad()
                    .then(|| sums.iter().map(|s| s.1 as f32).collect::<Vec<f32>>());
                let d_beta = beta
                    .requires_grad()
                    .then(|| sums.iter().map(|s| s.0 as f32).collect::<Vec<f32>>());
                vec![d_input, d_gamma, d_beta]
            }),
        )
    }

    /// Elementwise max(0, x). The subgradient at exactly 0 is taken as 0.
    pub fn relu(&self) -> Result<Tensor> {
        let out: Vec<f32> = self.data().iter().map(|&v| v.max(0.0)).collect();
        let parent = self.clone();
        Tensor::from_op(
            "relu",
            self.shape().to_vec(),
            out,
            vec![parent],
            Box::new(|dy, out| {
                vec![Some(
                    dy.iter()
                        .zip(out)
                        .map(|(d, o)| if *o > 0.0 { *d } else { 0.0 })
                        .collect(),
                )]
            }),
        )
    }

    /// Elementwise logistic function, stable for large |x|.
    pub fn sigmoid(&self) -> Result<Tensor> {
        let out: Vec<f32> = self
            .data()
            .iter()
            .map(|&v| {
                if v >= 0.0 {
                    1.0 / (1.0 + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (1.0 + e)
                }
            })
            .collect();
        let parent = self.clone();
        Tensor::from_op(
            "sigmoid",
            self.shape().to_vec(),
            out,
            vec![parent],
            Box::new(|dy, out| {
                vec![Some(dy.iter().zip(out).map(|(d, o)| d * o * (1.0 - o)).collect())]
            }),
        )
    }

    /// Row-wise softmax of an `[N,K]` tensor with max-subtraction
    /// stabilization; every output row sums to 1.
    pub fn softmax(&self) -> Result<Tensor> {
        let (n, k) = dims2(self, "softmax")?;
        if k < 2 {
            return Err(Error::InvalidArgument {
                op: "softmax",
                detail: format!("needs at least 2 classes, got {k}"),
            });
        }
        let x = self.to_vec();
        let mut out = vec![0.0f32; n * k];
        for r in 0..n {
            let row = &x[r * k..][..k];
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let dst = &mut out[r * k..][..k];
            let mut sum = 0.0f64;
            for (d, &v) in dst.iter_mut().zip(row) {
                let e = (v - max).exp();
                *d = e;
                sum += e as f64;
            }
            let inv = (1.0 / sum) as f32;
            for d in dst.iter_mut() {
                *d *= inv;
            }
        }
        let parent = self.clone();
        Tensor::from_op(
            "softmax",
            vec![n, k],
            out,
            vec![parent],
            Box::new(move |dy, out| {
                let mut dx = vec![0.0f32; n * k];
                for r in 0..n {
                    let y = &out[r * k..][..k];
                    let d = &dy[r * k..][..k];
                    let dot: f32 = y.iter().zip(d).map(|(a, b)| a * b).sum();
                    for i in 0..k {
                        dx[r * k + i] = y[i] * (d[i] - dot);
                    }
                }
                vec![Some(dx)]
            }),
        )
    }

    /// Mean over the spatial dimensions: `[N,C,H,W]` -> `[N,C]`.
    pub fn global_avg_pool(&self) -> Result<Tensor> {
        let (n, c, h, w) = dims4(self, "global_avg_pool")?;
        let plane = h * w;
        let x = self.data();
        let mut out = vec![0.0f32; n * c];
        for (i, o) in out.iter_mut().enumerate() {
            let src = &x[i * plane..][..plane];
            *o = (src.iter().map(|&v| v as f64).sum::<f64>() / plane as f64) as f32;
        }
        drop(x);
        let parent = self.clone();
        Tensor::from_op(
            "global_avg_pool",
            vec![n, c],
            out,
            vec![parent],
            Box::new(move |dy, _out| {
                let scale = 1.0 / plane as f32;
                let mut dx = vec![0.0f32; n * c * plane];
                for (i, chunk) in dx.chunks_mut(plane).enumerate() {
                    let v = dy[i] * scale;
                    for d in chunk.iter_mut() {
                        *d = v;
                    }
                }
                vec![Some(dx)]
            }),
        )
    }

    /// Fully connected layer: `[N,D] x [D,K] + [K] -> [N,K]`.
    pub fn linear(&self, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let (n, d_in) = dims2(self, "linear")?;
        let (d_w, k) = dims2(weight, "linear")?;
        if d_w != d_in {
            return Err(Error::ShapeMismatch {
                op: "linear",
                detail: format!("input features {d_in} do not match weight rows {d_w}"),
            });
        }
        if bias.shape() != [k] {
            return Err(Error::ShapeMismatch {
                op: "linear",
                detail: format!("bias shape {:?} does not match {k} outputs", bias.shape()),
            });
        }
        let mut out = vec![0.0f32; n * k];
        {
            let x = self.data();
            let w = weight.data();
            let b = bias.data();
            let (x, w, b): (&[f32], &[f32], &[f32]) = (&x, &w, &b);
            exec::chunks_mut(&mut out, k, |r, row| {
                row.copy_from_slice(b);
                let xr = &x[r * d_in..][..d_in];
                for (d, &xv) in xr.iter().enumerate() {
                    let wr = &w[d * k..][..k];
                    for (o, wv) in row.iter_mut().zip(wr) {
                        *o += xv * wv;
                    }
                }
            });
        }
        let input = self.clone();
        let weight_t = weight.clone();
        let bias_t = bias.clone();
        let parents = vec![input.clone(), weight_t.clone(), bias_t.clone()];
        Tensor::from_op(
            "linear",
            vec![n, k],
            out,
            parents,
            Box::new(move |dy, _out| {
                let d_input = input.requires_grad().then(|| {
                    let w = weight_t.data();
                    let w: &[f32] = &w;
                    let mut dx = vec![0.0f32; n * d_in];
                    exec::chunks_mut(&mut dx, d_in, |r, row| {
                        let dyr = &dy[r * k..][..k];
                        for (d, o) in row.iter_mut().enumerate() {
                            let wr = &w[d * k..][..k];
                            *o = wr.iter().zip(dyr).map(|(a, b)| a * b).sum();
                        }
                    });
                    dx
                });
                let d_weight = weight_t.requires_grad().then(|| {
                    let x = input.data();
                    let x: &[f32] = &x;
                    let mut dw = vec![0.0f32; d_in * k];
                    exec::chunks_mut(&mut dw, k, |d, row| {
                        for r in 0..n {
                            let xv = x[r * d_in + d];
                            let dyr = &dy[r * k..][..k];
                            for (o, dyv) in row.iter_mut().zip(dyr) {
                                *o += xv * dyv;
                            }
                        }
                    });
                    dw
                });
                let d_bias = bias_t.requires_grad().then(|| {
                    let mut db = vec![0.0f32; k];
                    for r in 0..n {
                        for (o, dyv) in db.iter_mut().zip(&dy[r * k..][..k]) {
                            *o += dyv;
                        }
                    }
                    db
                });
                vec![d_input, d_weight, d_bias]
            }),
        )
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                op: "add",
                detail: format!("{:?} vs {:?}", self.shape(), other.shape()),
            });
        }
        let out: Vec<f32> = self.data().iter().zip(other.data().iter()).map(|(a, b)| a + b).collect();
        Tensor::from_op(
            "add",
            self.shape().to_vec(),
            out,
            vec![self.clone(), other.clone()],
            Box::new(|dy, _out| vec![Some(dy.to_vec()), Some(dy.to_vec())]),
        )
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                op: "mul",
                detail: format!("{:?} vs {:?}", self.shape(), other.shape()),
            });
        }
        let out: Vec<f32> = self.data().iter().zip(other.data().iter()).map(|(a, b)| a * b).collect();
        let a = self.clone();
        let b = other.clone();
        Tensor::from_op(
            "mul",
            self.shape().to_vec(),
            out,
            vec![a.clone(), b.clone()],
            Box::new(move |dy, _out| {
                let da = a
                    .requires_grad()
                    .then(|| dy.iter().zip(b.data().iter()).map(|(d, v)| d * v).collect());
                let db = b
                    .requires_grad()
                    .then(|| dy.iter().zip(a.data().iter()).map(|(d, v)| d * v).collect());
                vec![da, db]
            }),
        )
    }

    /// Multiply every element by a constant.
    pub fn scale(&self, factor: f32) -> Result<Tensor> {
        let out: Vec<f32> = self.data().iter().map(|v| v * factor).collect();
        Tensor::from_op(
            "scale",
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |dy, _out| vec![Some(dy.iter().map(|d| d * factor).collect())]),
        )
    }

    /// Sum of all elements, accumulated in f64, returned as a scalar.
    pub fn sum(&self) -> Result<Tensor> {
        let total = self.data().iter().map(|&v| v as f64).sum::<f64>() as f32;
        let n = self.len();
        Tensor::from_op(
            "sum",
            vec![1],
            vec![total],
            vec![self.clone()],
            Box::new(move |dy, _out| vec![Some(vec![dy[0]; n])]),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: Vec<f32>) -> Tensor {
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn conv_all_ones_3x3_padded() {
        // 3x3 ones input, 3x3 ones filter, stride 1, padding 1:
        // center counts 9 taps, corners 4, edges 6.
        let x = t(&[1, 1, 3, 3], vec![1.0; 9]);
        let w = t(&[1, 1, 3, 3], vec![1.0; 9]);
        let b = t(&[1], vec![0.0]);
        let y = x.conv2d(&w, Some(&b), 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        let v = y.to_vec();
        assert_eq!(v, vec![4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn conv_identity_kernel_is_identity_bit_for_bit() {
        let data: Vec<f32> = (0..2 * 3 * 4 * 5).map(|i| (i as f32) * 0.37 - 11.1).collect();
        let x = t(&[2, 3, 4, 5], data.clone());
        // 1x1 kernel selecting each channel: weight[f=c][c]=1.
        let mut w = vec![0.0f32; 3 * 3];
        for c in 0..3 {
            w[c * 3 + c] = 1.0;
        }
        let w = t(&[3, 3, 1, 1], w);
        let b = t(&[3], vec![0.0; 3]);
        let y = x.conv2d(&w, Some(&b), 1, 0).unwrap();
        assert_eq!(y.to_vec(), data);
    }

    #[test]
    fn conv_stride2_output_shape_matches_halving() {
        let x = t(&[1, 3, 180, 320], vec![0.5; 3 * 180 * 320]);
        let w = t(&[64, 3, 7, 7], vec![0.01; 64 * 3 * 49]);
        let y = x.conv2d(&w, None, 2, 3).unwrap();
        assert_eq!(y.shape(), &[1, 64, 90, 160]);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = t(&[1, 3, 4, 4], vec![0.0; 48]);
        let w = t(&[2, 4, 3, 3], vec![0.0; 72]);
        assert!(x.conv2d(&w, None, 1, 1).is_err());
    }

    #[test]
    fn relu_examples() {
        let x = t(&[3], vec![-1.0, 0.0, 2.0]);
        assert_eq!(x.relu().unwrap().to_vec(), vec![0.0, 0.0, 2.0]);
        let y = t(&[3], vec![0.5, 0.0, 3.0]);
        assert_eq!(y.relu().unwrap().to_vec(), vec![0.5, 0.0, 3.0]);
    }

    #[test]
    fn relu_gradient_of_sum() {
        let x = Tensor::param(&[2], vec![-1.0, 2.0]).unwrap();
        x.relu().unwrap().sum().unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 1.0]);
    }

    #[test]
    fn sigmoid_examples() {
        let x = t(&[3], vec![0.0, -100.0, 3.0f32.ln()]);
        let y = x.sigmoid().unwrap().to_vec();
        assert_eq!(y[0], 0.5);
        assert!(y[1] > 0.0 && y[1] <= 1e-30);
        assert!((y[2] - 0.75).abs() < 1e-6);
    }

    #[test]
    fn softmax_examples() {
        let x = t(&[1, 5], vec![0.0; 5]);
        let y = x.softmax().unwrap().to_vec();
        for v in &y {
            assert!((v - 0.2).abs() < 1e-6);
        }

        let logits = vec![1f32.ln(), 2f32.ln(), 3f32.ln(), 4f32.ln(), 10f32.ln()];
        let y = t(&[1, 5], logits.clone()).softmax().unwrap().to_vec();
        let expect = [0.05, 0.10, 0.15, 0.20, 0.50];
        for (a, e) in y.iter().zip(expect) {
            assert!((a - e).abs() < 1e-6, "{a} vs {e}");
        }

        // Shift invariance.
        let shifted: Vec<f32> = logits.iter().map(|v| v + 7.3).collect();
        let y2 = t(&[1, 5], shifted).softmax().unwrap().to_vec();
        for (a, b) in y.iter().zip(&y2) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn global_avg_pool_examples() {
        let x = t(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(x.global_avg_pool().unwrap().to_vec(), vec![2.5]);

        let c = t(&[2, 3, 4, 4], vec![0.7; 2 * 3 * 16]);
        for v in c.global_avg_pool().unwrap().to_vec() {
            assert!((v - 0.7).abs() < 1e-6);
        }
    }

    #[test]
    fn gap_gradient_distributes_uniformly() {
        let x = Tensor::param(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        x.global_avg_pool().unwrap().sum().unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.25; 4]);
    }

    #[test]
    fn linear_examples() {
        let x = t(&[1, 2], vec![1.0, 2.0]);
        let w = t(&[2, 1], vec![1.0, 1.0]);
        let b = t(&[1], vec![0.5]);
        assert_eq!(x.linear(&w, &b).unwrap().to_vec(), vec![3.5]);

        // Identity weight, zero bias.
        let x = t(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 3 + i] = 1.0;
        }
        let w = t(&[3, 3], eye);
        let b = t(&[3], vec![0.0; 3]);
        assert_eq!(x.linear(&w, &b).unwrap().to_vec(), x.to_vec());

        // Zero weight: every row equals the bias.
        let w = t(&[3, 2], vec![0.0; 6]);
        let b = t(&[2], vec![7.0, -1.0]);
        assert_eq!(x.linear(&w, &b).unwrap().to_vec(), vec![7.0, -1.0, 7.0, -1.0]);
    }

    #[test]
    fn add_examples() {
        let a = t(&[2], vec![1.0, 2.0]);
        let b = t(&[2], vec![3.0, 4.0]);
        assert_eq!(a.add(&b).unwrap().to_vec(), vec![4.0, 6.0]);
        let z = t(&[2], vec![0.0, 0.0]);
        assert_eq!(a.add(&z).unwrap().to_vec(), a.to_vec());
        let bad = t(&[3], vec![0.0; 3]);
        assert!(a.add(&bad).is_err());
    }

    #[test]
    fn add_gradient_passes_through() {
        let a = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::param(&[2], vec![3.0, 4.0]).unwrap();
        a.add(&b).unwrap().sum().unwrap().backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![1.0, 1.0]);
        assert_eq!(b.grad().unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn batch_norm_normalizes_moments_in_train_mode() {
        // gamma=2, beta=3 => per-channel mean ~3, std ~2.
        let n = 4;
        let hw = 8;
        let mut data = Vec::with_capacity(n * 2 * hw);
        let mut v = 0.13f32;
        for _ in 0..n * 2 * hw {
            v = (v * 1.7 + 0.31) % 5.0;
            data.push(v);
        }
        let x = t(&[n, 2, 2, 4], data);
        let state = super::super::BatchNormState::new(2, 0.1, 1e-5).unwrap();
        {
            let mut g = state.gamma.data_mut();
            g.fill(2.0);
            let mut b = state.beta.data_mut();
            b.fill(3.0);
        }
        let y = x.batch_norm(&state, Mode::Train).unwrap();
        let out = y.to_vec();
        let m = (n * hw) as f64;
        for c in 0..2 {
            let mut sum = 0.0f64;
            let mut sumsq = 0.0f64;
            for n_i in 0..n {
                for i in 0..hw {
                    let v = out[n_i * 2 * hw + c * hw + i] as f64;
                    sum += v;
                    sumsq += v * v;
                }
            }
            let mean = sum / m;
            let std = (sumsq / m - mean * mean).sqrt();
            assert!((mean - 3.0).abs() < 1e-3, "mean {mean}");
            assert!((std - 2.0).abs() < 1e-2, "std {std}");
        }
    }

    #[test]
    fn batch_norm_eval_with_matching_stats_is_zero() {
        let x = t(&[1, 1, 2, 2], vec![5.0; 4]);
        let state = super::super::BatchNormState::new(1, 0.1, 1e-5).unwrap();
        state.set_running_stats(vec![5.0], vec![1.0]).unwrap();
        let y = x.batch_norm(&state, Mode::Eval).unwrap();
        for v in y.to_vec() {
            assert!(v.abs() < 1e-4);
        }
    }

    #[test]
    fn batch_norm_rejects_single_element_batch() {
        let x = t(&[1, 2, 1, 1], vec![1.0, 2.0]);
        let state = super::super::BatchNormState::new(2, 0.1, 1e-5).unwrap();
        assert!(x.batch_norm(&state, Mode::Train).is_err());
        // Eval mode is fine.
        assert!(x.batch_norm(&state, Mode::Eval).is_ok());
    }

    #[test]
    fn batch_norm_near_identity_on_standardized_input() {
        // Zero-mean unit-variance input, gamma=1, beta=0 -> output ~ input.
        let vals = vec![-1.0f32, 1.0, -1.0, 1.0, -1.0, 1.0, -1.0, 1.0];
        let x = t(&[2, 1, 2, 2], vals.clone());
        let state = super::super::BatchNormState::new(1, 0.1, 1e-5).unwrap();
        let y = x.batch_norm(&state, Mode::Train).unwrap();
        for (a, b) in y.to_vec().iter().zip(&vals) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn parallel_and_sequential_conv_agree_bitwise() {
        let data: Vec<f32> = (0..2 * 3 * 9 * 11).map(|i| ((i * 37 % 97) as f32) * 0.03 - 1.2).collect();
        let x = t(&[2, 3, 9, 11], data);
        let w_data: Vec<f32> = (0..4 * 3 * 9).map(|i| ((i * 13 % 41) as f32) * 0.05 - 0.9).collect();
        let w = t(&[4, 3, 3, 3], w_data);
        crate::exec::set_parallel(false);
        let seq = x.conv2d(&w, None, 2, 1).unwrap().to_vec();
        crate::exec::set_parallel(true);
        let par = x.conv2d(&w, None, 2, 1).unwrap().to_vec();
        assert_eq!(seq, par);
    }
}
