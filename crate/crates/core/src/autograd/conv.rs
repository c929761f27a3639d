//! 2-D convolution via im2col and GEMM.

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn conv2d_output_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    (padded >= kernel && stride > 0).then(|| (padded - kernel) / stride + 1)
}

#[derive(Clone, Copy)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col(x: &[f64], geo: &Geometry, cols: &mut [f64]) {
    let Geometry { c, h, w, k, stride, pad, ho, wo } = *geo;
    for ci in 0..c {
        for i in 0..k {
            for j in 0..k {
                let row = (ci * k + i) * k + j;
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let y = (oy * stride + i) as isize - pad as isize;
                    let dst_row = &mut dst[oy * wo..(oy + 1) * wo];
                    if y < 0 || y >= h as isize {
                        dst_row.fill(0.0);
                        continue;
                    }
                    let src = &x[ci * h * w + y as usize * w..ci * h * w + (y as usize + 1) * w];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let xx = (ox * stride + j) as isize - pad as isize;
                        *d = if xx < 0 || xx >= w as isize { 0.0 } else { src[xx as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], geo: &Geometry, dx: &mut [f64]) {
    let Geometry { c, h, w, k, stride, pad, ho, wo } = *geo;
    for ci in 0..c {
        for i in 0..k {
            for j in 0..k {
                let row = (ci * k + i) * k + j;
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let y = (oy * stride + i) as isize - pad as isize;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    let base = ci * h * w + y as usize * w;
                    for ox in 0..wo {
                        let xx = (ox * stride + j) as isize - pad as isize;
                        if xx >= 0 && xx < w as isize {
                            dx[base + xx as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `C = alpha * op(A) * op(B) + beta * C` for row-major buffers, where
/// `op(A)` is `m x k` and `op(B)` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Graph {
    /// Square-kernel convolution. `weight` is `[out, in, k, k]`, `bias` `[out]`.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let (o, k) = match self.shape(weight) {
            &[o, wc, kh, kw] if wc == c && kh == kw => (o, kh),
            s => {
                return Err(Error::shape("conv2d weight", format!("[_, {c}, k, k]"), format!("{s:?}")));
            }
        };
        if let Some(b) = bias {
            if self.shape(b) != [o] {
                return Err(Error::shape("conv2d bias", format!("[{o}]"), format!("{:?}", self.shape(b))));
            }
        }
        let (ho, wo) = match (
            conv2d_output_size(h, k, stride, pad),
            conv2d_output_size(w, k, stride, pad),
        ) {
            (Some(ho), Some(wo)) => (ho, wo),
            _ => return Err(Error::shape("conv2d", format!("input at least {k}x{k}"), format!("{h}x{w}"))),
        };
        let geo = Geometry { c, h, w, k, stride, pad, ho, wo };

        let xv = self.value(x).data();
        let wv = self.value(weight).data();
        let mut out = vec![0.0; n * o * geo.cols()];
        let mut cols = if geo.is_pointwise() { Vec::new() } else { vec![0.0; geo.rows() * geo.cols()] };
        for ni in 0..n {
            let xs = &xv[ni * c * h * w..(ni + 1) * c * h * w];
            let col_buf: &[f64] = if geo.is_pointwise() {
                xs
            } else {
                im2col(xs, &geo, &mut cols);
                &cols
            };
            let dst = &mut out[ni * o * geo.cols()..(ni + 1) * o * geo.cols()];
            if let Some(b) = bias {
                let bv = self.value(b).data();
                for (oi, chunk) in dst.chunks_mut(geo.cols()).enumerate() {
                    chunk.fill(bv[oi]);
                }
            }
            gemm(o, geo.rows(), geo.cols(), wv, false, col_buf, false, 1.0, dst);
        }
        let out = Tensor::new([n, o, ho, wo], out)?;

        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        Ok(self.push_op(out, inputs, move |g, inputs, _, needs| {
            let xv = inputs[0].data();
            let wv = inputs[1].data();
            let gv = g.data();
            let mut dx = needs[0].then(|| vec![0.0; xv.len()]);
            let mut dw = needs[1].then(|| vec![0.0; wv.len()]);
            let mut db = (inputs.len() > 2 && needs[2]).then(|| vec![0.0; o]);
            let mut cols = vec![0.0; geo.rows() * geo.cols()];
            for ni in 0..n {
                let gs = &gv[ni * o * geo.cols()..(ni + 1) * o * geo.cols()];
                if let Some(dw) = dw.as_mut() {
                    let xs = &xv[ni * c * h * w..(ni + 1) * c * h * w];
                    let col_buf: &[f64] = if geo.is_pointwise() {
                        xs
                    } else {
                        im2col(xs, &geo, &mut cols);
                        &cols
                    };
                    gemm(o, geo.cols(), geo.rows(), gs, false, col_buf, true, 1.0, dw);
                }
                if let Some(db) = db.as_mut() {
                    for (oi, chunk) in gs.chunks(geo.cols()).enumerate() {
                        db[oi] += chunk.iter().sum::<f64>();
                    }
                }
                if let Some(dx) = dx.as_mut() {
                    let dxs = &mut dx[ni * c * h * w..(ni + 1) * c * h * w];
                    if geo.is_pointwise() {
                        gemm(geo.rows(), o, geo.cols(), wv, true, gs, false, 1.0, dxs);
                    } else {
                        gemm(geo.rows(), o, geo.cols(), wv, true, gs, false, 0.0, &mut cols);
                        col2im(&cols, &geo, dxs);
                    }
                }
            }
            let mut grads = vec![
                dx.map(|d| Tensor::new(inputs[0].shape().to_vec(), d).expect("input shape")),
                dw.map(|d| Tensor::new(inputs[1].shape().to_vec(), d).expect("weight shape")),
            ];
            if inputs.len() > 2 {
                grads.push(db.map(|d| Tensor::new([o], d).expect("bias shape")));
            }
            grads
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct seven-loop convolution.
    fn naive_conv(x: &Tensor, w: &Tensor, b: &[f64], stride: usize, pad: usize) -> Tensor {
        let (n, c, h, wd) = x.dims4().unwrap();
        let (o, k) = (w.shape()[0], w.shape()[2]);
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let mut out = Tensor::zeros([n, o, ho, wo]);
        for ni in 0..n {
            for oi in 0..o {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = b[oi];
                        for ci in 0..c {
                            for i in 0..k {
                                for j in 0..k {
                                    let y = (oy * stride + i) as isize - pad as isize;
                                    let xx = (ox * stride + j) as isize - pad as isize;
                                    if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < wd {
                                        acc += x.data()[((ni * c + ci) * h + y as usize) * wd + xx as usize]
                                            * w.data()[((oi * c + ci) * k + i) * k + j];
                                    }
                                }
                            }
                        }
                        out.data_mut()[((ni * o + oi) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn pseudo(shape: &[usize], seed: u64) -> Tensor {
        let mut state = seed;
        Tensor::from_fn(shape.to_vec(), |_| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 33) as f64 / (1u64 << 31) as f64) - 0.5
        })
    }

    #[test]
    fn matches_naive_convolution() {
        for &(k, stride, pad) in &[(1, 1, 0), (3, 1, 1), (4, 2, 1), (3, 2, 0)] {
            let x = pseudo(&[2, 3, 8, 8], 1);
            let w = pseudo(&[4, 3, k, k], 2);
            let b = vec![0.1, -0.2, 0.3, 0.0];
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let wv = g.constant(w.clone());
            let bv = g.constant(Tensor::new([4], b.clone()).unwrap());
            let y = g.conv2d(xv, wv, Some(bv), stride, pad).unwrap();
            let expected = naive_conv(&x, &w, &b, stride, pad);
            assert_eq!(g.value(y).shape(), expected.shape());
            assert!(g.value(y).max_abs_diff(&expected) < 1e-12, "k={k} s={stride} p={pad}");
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for &(k, stride, pad) in &[(1, 1, 0), (4, 2, 1)] {
            let x = pseudo(&[1, 2, 4, 4], 3);
            let w = pseudo(&[3, 2, k, k], 4);
            let b = pseudo(&[3], 5);
            let probe = pseudo(&[1, 3, conv2d_output_size(4, k, stride, pad).unwrap(), conv2d_output_size(4, k, stride, pad).unwrap()], 6);
            let eval = |x: &Tensor, w: &Tensor, b: &Tensor| -> f64 {
                naive_conv(x, w, b.data(), stride, pad)
                    .data()
                    .iter()
                    .zip(probe.data())
                    .map(|(a, p)| a * p)
                    .sum()
            };
            let mut g = Graph::new();
            let xv = g.param(x.clone());
            let wv = g.param(w.clone());
            let bv = g.param(b.clone());
            let y = g.conv2d(xv, wv, Some(bv), stride, pad).unwrap();
            let pv = g.constant(probe.clone());
            let prod = g.mul(y, pv).unwrap();
            let s = g.sum(prod);
            let grads = g.backward(s).unwrap();
            let h = 1e-6;
            for (var, base, which) in [(xv, &x, 0), (wv, &w, 1), (bv, &b, 2)] {
                for i in 0..base.numel() {
                    let mut plus = [x.clone(), w.clone(), b.clone()];
                    let mut minus = [x.clone(), w.clone(), b.clone()];
                    plus[which].data_mut()[i] += h;
                    minus[which].data_mut()[i] -= h;
                    let fd = (eval(&plus[0], &plus[1], &plus[2]) - eval(&minus[0], &minus[1], &minus[2])) / (2.0 * h);
                    let an = grads.get(var).unwrap().data()[i];
                    assert!((fd - an).abs() < 1e-7, "input {which} idx {i}: fd {fd} vs {an}");
                }
            }
        }
    }
}
