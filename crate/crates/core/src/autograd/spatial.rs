//! NCHW operations: channel softmax, cross-entropy, batch normalization,
//! bilinear resizing, spatial pooling and the group/condition products.

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Batch statistics produced by a training-mode batch-norm forward.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased variance over the normalized axes.
    pub var: Vec<f64>,
    pub count: usize,
}

/// Source position and weights for one output coordinate of a bilinear resize.
#[derive(Clone, Copy, Debug)]
struct Tap {
    i0: usize,
    i1: usize,
    w0: f64,
    w1: f64,
}

/// Half-pixel-centered sampling positions (`align_corners = false`).
fn bilinear_taps(input: usize, output: usize) -> Vec<Tap> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let w1 = src - i0 as f64;
            Tap { i0, i1, w0: 1.0 - w1, w1 }
        })
        .collect()
}

impl Graph {
    /// Softmax over the channel axis of an NCHW value.
    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let hw = h * w;
        let xv = self.value(x).data();
        let mut out = vec![0.0; xv.len()];
        for ni in 0..n {
            let base = ni * c * hw;
            for p in 0..hw {
                let max = (0..c).map(|ci| xv[base + ci * hw + p]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for ci in 0..c {
                    let e = (xv[base + ci * hw + p] - max).exp();
                    out[base + ci * hw + p] = e;
                    z += e;
                }
                for ci in 0..c {
                    out[base + ci * hw + p] /= z;
                }
            }
        }
        let out = Tensor::new([n, c, h, w], out)?;
        Ok(self.push_op(out, vec![x], move |g, _, y, _| {
            let (gv, yv) = (g.data(), y.data());
            let mut dx = vec![0.0; yv.len()];
            for ni in 0..n {
                let base = ni * c * hw;
                for p in 0..hw {
                    let dot: f64 = (0..c).map(|ci| gv[base + ci * hw + p] * yv[base + ci * hw + p]).sum();
                    for ci in 0..c {
                        let i = base + ci * hw + p;
                        dx[i] = yv[i] * (gv[i] - dot);
                    }
                }
            }
            vec![Some(Tensor::new(y.shape().to_vec(), dx).expect("same shape"))]
        }))
    }

    /// Mean over labelled pixels of `-log softmax(scores)[label]`.
    ///
    /// `labels` holds one entry per pixel in NHW order; entries equal to
    /// `ignore` are skipped.
    pub fn cross_entropy(&mut self, scores: Var, labels: &[u8], ignore: u8) -> Result<Var> {
        let (n, c, h, w) = self.value(scores).dims4()?;
        let hw = h * w;
        if labels.len() != n * hw {
            return Err(Error::shape("cross_entropy labels", n * hw, labels.len()));
        }
        let valid = labels.iter().filter(|&&l| l != ignore).count();
        if valid == 0 {
            return Err(Error::EmptySupervision);
        }
        if let Some(&bad) = labels.iter().find(|&&l| l != ignore && l as usize >= c) {
            return Err(Error::shape("cross_entropy labels", format!("values < {c}"), bad));
        }
        let xv = self.value(scores).data();
        let mut total = 0.0;
        for ni in 0..n {
            let base = ni * c * hw;
            for p in 0..hw {
                let label = labels[ni * hw + p];
                if label == ignore {
                    continue;
                }
                let lse = log_sum_exp((0..c).map(|ci| xv[base + ci * hw + p]));
                total += lse - xv[base + label as usize * hw + p];
            }
        }
        let labels = labels.to_vec();
        let count = valid as f64;
        Ok(self.push_op(Tensor::scalar(total / count), vec![scores], move |g, inputs, _, _| {
            let xv = inputs[0].data();
            let scale = g.item() / count;
            let mut dx = vec![0.0; xv.len()];
            for ni in 0..n {
                let base = ni * c * hw;
                for p in 0..hw {
                    let label = labels[ni * hw + p];
                    if label == ignore {
                        continue;
                    }
                    let lse = log_sum_exp((0..c).map(|ci| xv[base + ci * hw + p]));
                    for ci in 0..c {
                        let i = base + ci * hw + p;
                        let onehot = if ci == label as usize { 1.0 } else { 0.0 };
                        dx[i] = ((xv[i] - lse).exp() - onehot) * scale;
                    }
                }
            }
            vec![Some(Tensor::new(inputs[0].shape().to_vec(), dx).expect("same shape"))]
        }))
    }

    /// Batch normalization using statistics of the current batch.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let (n, c, h, w) = self.value(x).dims4()?;
        self.check_channel_vec("batch_norm gamma", gamma, c)?;
        self.check_channel_vec("batch_norm beta", beta, c)?;
        let hw = h * w;
        let m = n * hw;
        let xv = self.value(x).data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ci in 0..c {
            let vals = (0..n).flat_map(|ni| xv[(ni * c + ci) * hw..(ni * c + ci + 1) * hw].iter());
            let mu = vals.clone().sum::<f64>() / m as f64;
            mean[ci] = mu;
            var[ci] = vals.map(|v| (v - mu) * (v - mu)).sum::<f64>() / m as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![0.0; xv.len()];
        for ni in 0..n {
            for ci in 0..c {
                let off = (ni * c + ci) * hw;
                for p in 0..hw {
                    out[off + p] = gv[ci] * (xv[off + p] - mean[ci]) * inv_std[ci] + bv[ci];
                }
            }
        }
        let out = Tensor::new([n, c, h, w], out)?;
        let stats = BatchStats {
            mean: mean.clone(),
            var,
            count: m,
        };
        let var_out = self.push_op(out, vec![x, gamma, beta], move |g, inputs, _, needs| {
            let (xv, gamma) = (inputs[0].data(), inputs[1].data());
            let gv = g.data();
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            for ni in 0..n {
                for ci in 0..c {
                    let off = (ni * c + ci) * hw;
                    for p in 0..hw {
                        let xhat = (xv[off + p] - mean[ci]) * inv_std[ci];
                        dgamma[ci] += gv[off + p] * xhat;
                        dbeta[ci] += gv[off + p];
                    }
                }
            }
            let dx = needs[0].then(|| {
                let mut dx = vec![0.0; xv.len()];
                let mf = m as f64;
                for ni in 0..n {
                    for ci in 0..c {
                        let off = (ni * c + ci) * hw;
                        // dgamma/dbeta are the sums of g*xhat and g; dxhat = g*gamma.
                        for p in 0..hw {
                            let xhat = (xv[off + p] - mean[ci]) * inv_std[ci];
                            dx[off + p] = gamma[ci] * inv_std[ci] / mf
                                * (mf * gv[off + p] - dbeta[ci] - xhat * dgamma[ci]);
                        }
                    }
                }
                Tensor::new(inputs[0].shape().to_vec(), dx).expect("same shape")
            });
            vec![
                dx,
                needs[1].then(|| Tensor::new([c], dgamma).expect("channel vec")),
                needs[2].then(|| Tensor::new([c], dbeta).expect("channel vec")),
            ]
        });
        Ok((var_out, stats))
    }

    /// Batch normalization with fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        self.check_channel_vec("batch_norm gamma", gamma, c)?;
        self.check_channel_vec("batch_norm beta", beta, c)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::shape("batch_norm running stats", c, running_mean.len()));
        }
        let hw = h * w;
        let mean = running_mean.to_vec();
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (xv, gv, bv) = (self.value(x).data(), self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![0.0; xv.len()];
        for ni in 0..n {
            for ci in 0..c {
                let off = (ni * c + ci) * hw;
                for p in 0..hw {
                    out[off + p] = gv[ci] * (xv[off + p] - mean[ci]) * inv_std[ci] + bv[ci];
                }
            }
        }
        let out = Tensor::new([n, c, h, w], out)?;
        Ok(self.push_op(out, vec![x, gamma, beta], move |g, inputs, _, _| {
            let (xv, gamma) = (inputs[0].data(), inputs[1].data());
            let gv = g.data();
            let mut dx = vec![0.0; xv.len()];
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            for ni in 0..n {
                for ci in 0..c {
                    let off = (ni * c + ci) * hw;
                    for p in 0..hw {
                        dx[off + p] = gv[off + p] * gamma[ci] * inv_std[ci];
                        dgamma[ci] += gv[off + p] * (xv[off + p] - mean[ci]) * inv_std[ci];
                        dbeta[ci] += gv[off + p];
                    }
                }
            }
            vec![
                Some(Tensor::new(inputs[0].shape().to_vec(), dx).expect("same shape")),
                Some(Tensor::new([c], dgamma).expect("channel vec")),
                Some(Tensor::new([c], dbeta).expect("channel vec")),
            ]
        }))
    }

    fn check_channel_vec(&self, op: &'static str, v: Var, c: usize) -> Result<()> {
        if self.shape(v) != [c] {
            return Err(Error::shape(op, format!("[{c}]"), format!("{:?}", self.shape(v))));
        }
        Ok(())
    }

    /// Bilinear resize of the spatial axes (half-pixel centers).
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::shape("resize_bilinear", "non-empty output", format!("{out_h}x{out_w}")));
        }
        if (h, w) == (out_h, out_w) {
            return self.reshape(x, &[n, c, h, w]);
        }
        let ty = bilinear_taps(h, out_h);
        let tx = bilinear_taps(w, out_w);
        let xv = self.value(x).data();
        let mut out = vec![0.0; n * c * out_h * out_w];
        for plane in 0..n * c {
            let src = &xv[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * out_h * out_w..(plane + 1) * out_h * out_w];
            for (oy, ry) in ty.iter().enumerate() {
                for (ox, rx) in tx.iter().enumerate() {
                    dst[oy * out_w + ox] = ry.w0 * (rx.w0 * src[ry.i0 * w + rx.i0] + rx.w1 * src[ry.i0 * w + rx.i1])
                        + ry.w1 * (rx.w0 * src[ry.i1 * w + rx.i0] + rx.w1 * src[ry.i1 * w + rx.i1]);
                }
            }
        }
        let out = Tensor::new([n, c, out_h, out_w], out)?;
        Ok(self.push_op(out, vec![x], move |g, inputs, _, _| {
            let gv = g.data();
            let mut dx = vec![0.0; inputs[0].numel()];
            for plane in 0..n * c {
                let src = &gv[plane * out_h * out_w..(plane + 1) * out_h * out_w];
                let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
                for (oy, ry) in ty.iter().enumerate() {
                    for (ox, rx) in tx.iter().enumerate() {
                        let gval = src[oy * out_w + ox];
                        dst[ry.i0 * w + rx.i0] += ry.w0 * rx.w0 * gval;
                        dst[ry.i0 * w + rx.i1] += ry.w0 * rx.w1 * gval;
                        dst[ry.i1 * w + rx.i0] += ry.w1 * rx.w0 * gval;
                        dst[ry.i1 * w + rx.i1] += ry.w1 * rx.w1 * gval;
                    }
                }
            }
            vec![Some(Tensor::new(inputs[0].shape().to_vec(), dx).expect("same shape"))]
        }))
    }

    /// Average over the spatial axes: `[N, C, H, W] -> [N, C]`.
    pub fn spatial_mean(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let hw = h * w;
        let out: Vec<f64> = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|plane| plane.iter().sum::<f64>() / hw as f64)
            .collect();
        let out = Tensor::new([n, c], out)?;
        Ok(self.push_op(out, vec![x], move |g, inputs, _, _| {
            let dx = g.data().iter().flat_map(|&gv| std::iter::repeat_n(gv / hw as f64, hw)).collect();
            vec![Some(Tensor::new(inputs[0].shape().to_vec(), dx).expect("same shape"))]
        }))
    }

    /// Maximum over the spatial axes: `[N, C, H, W] -> [N, C]`. The gradient
    /// flows to the first maximal position.
    pub fn spatial_max(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let hw = h * w;
        let mut argmax = Vec::with_capacity(n * c);
        let mut out = Vec::with_capacity(n * c);
        for plane in self.value(x).data().chunks(hw) {
            let (idx, val) = plane
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best });
            argmax.push(idx);
            out.push(val);
        }
        let out = Tensor::new([n, c], out)?;
        Ok(self.push_op(out, vec![x], move |g, inputs, _, _| {
            let mut dx = vec![0.0; inputs[0].numel()];
            for (plane, (&idx, &gv)) in argmax.iter().zip(g.data()).enumerate() {
                dx[plane * hw + idx] = gv;
            }
            vec![Some(Tensor::new(inputs[0].shape().to_vec(), dx).expect("same shape"))]
        }))
    }

    /// Per-group masked class maps.
    ///
    /// `prob` is `[N, C, H, W]`, `assign` is `[N, K, H, W]`; the result is
    /// `[N, K*C, H, W]` with channel `k*C + u` equal to `assign_k * prob_u`.
    pub fn group_features(&mut self, prob: Var, assign: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(prob).dims4()?;
        let (an, k, ah, aw) = self.value(assign).dims4()?;
        if (an, ah, aw) != (n, h, w) {
            return Err(Error::shape(
                "group_features",
                format!("assign [{n}, K, {h}, {w}]"),
                format!("{:?}", self.shape(assign)),
            ));
        }
        let hw = h * w;
        let (pv, av) = (self.value(prob).data(), self.value(assign).data());
        let mut out = vec![0.0; n * k * c * hw];
        for ni in 0..n {
            for ki in 0..k {
                let a = &av[(ni * k + ki) * hw..(ni * k + ki + 1) * hw];
                for u in 0..c {
                    let p = &pv[(ni * c + u) * hw..(ni * c + u + 1) * hw];
                    let dst = &mut out[((ni * k + ki) * c + u) * hw..((ni * k + ki) * c + u + 1) * hw];
                    for ((d, &av), &pv) in dst.iter_mut().zip(a).zip(p) {
                        *d = av * pv;
                    }
                }
            }
        }
        let out = Tensor::new([n, k * c, h, w], out)?;
        Ok(self.push_op(out, vec![prob, assign], move |g, inputs, _, needs| {
            let (pv, av, gv) = (inputs[0].data(), inputs[1].data(), g.data());
            let mut dp = needs[0].then(|| vec![0.0; pv.len()]);
            let mut da = needs[1].then(|| vec![0.0; av.len()]);
            for ni in 0..n {
                for ki in 0..k {
                    let a_off = (ni * k + ki) * hw;
                    for u in 0..c {
                        let p_off = (ni * c + u) * hw;
                        let g_off = ((ni * k + ki) * c + u) * hw;
                        for px in 0..hw {
                            let gval = gv[g_off + px];
                            if let Some(dp) = dp.as_mut() {
                                dp[p_off + px] += gval * av[a_off + px];
                            }
                            if let Some(da) = da.as_mut() {
                                da[a_off + px] += gval * pv[p_off + px];
                            }
                        }
                    }
                }
            }
            vec![
                dp.map(|d| Tensor::new(inputs[0].shape().to_vec(), d).expect("same shape")),
                da.map(|d| Tensor::new(inputs[1].shape().to_vec(), d).expect("same shape")),
            ]
        }))
    }

    /// Per-pixel outer product of each group's class map with its condition
    /// vector.
    ///
    /// `feat` is `[N, K*C, H, W]` and `cond` is `[N, K*C]`; the result is
    /// `[N*K, C*C, H, W]` with channel `u*C + v` equal to
    /// `feat[k*C + u] * cond[k*C + v]`.
    pub fn outer_condition(&mut self, feat: Var, cond: Var, groups: usize) -> Result<Var> {
        let (n, kc, h, w) = self.value(feat).dims4()?;
        if groups == 0 || kc % groups != 0 {
            return Err(Error::shape("outer_condition", format!("channels divisible by K={groups}"), kc));
        }
        if self.shape(cond) != [n, kc] {
            return Err(Error::shape("outer_condition cond", format!("[{n}, {kc}]"), format!("{:?}", self.shape(cond))));
        }
        let (k, c, hw) = (groups, kc / groups, h * w);
        let (fv, qv) = (self.value(feat).data(), self.value(cond).data());
        let mut out = vec![0.0; n * k * c * c * hw];
        for ni in 0..n {
            for ki in 0..k {
                let nk = ni * k + ki;
                for u in 0..c {
                    let f = &fv[(ni * kc + ki * c + u) * hw..(ni * kc + ki * c + u + 1) * hw];
                    for v in 0..c {
                        let q = qv[ni * kc + ki * c + v];
                        let dst = &mut out[(nk * c * c + u * c + v) * hw..(nk * c * c + u * c + v + 1) * hw];
                        for (d, &fval) in dst.iter_mut().zip(f) {
                            *d = fval * q;
                        }
                    }
                }
            }
        }
        let out = Tensor::new([n * k, c * c, h, w], out)?;
        Ok(self.push_op(out, vec![feat, cond], move |g, inputs, _, needs| {
            let (fv, qv, gv) = (inputs[0].data(), inputs[1].data(), g.data());
            let mut df = needs[0].then(|| vec![0.0; fv.len()]);
            let mut dq = needs[1].then(|| vec![0.0; qv.len()]);
            for ni in 0..n {
                for ki in 0..k {
                    let nk = ni * k + ki;
                    for u in 0..c {
                        let f_off = (ni * kc + ki * c + u) * hw;
                        for v in 0..c {
                            let q_idx = ni * kc + ki * c + v;
                            let g_off = (nk * c * c + u * c + v) * hw;
                            let gs = &gv[g_off..g_off + hw];
                            if let Some(df) = df.as_mut() {
                                let q = qv[q_idx];
                                for (d, &gval) in df[f_off..f_off + hw].iter_mut().zip(gs) {
                                    *d += gval * q;
                                }
                            }
                            if let Some(dq) = dq.as_mut() {
                                dq[q_idx] += gs.iter().zip(&fv[f_off..f_off + hw]).map(|(a, b)| a * b).sum::<f64>();
                            }
                        }
                    }
                }
            }
            vec![
                df.map(|d| Tensor::new(inputs[0].shape().to_vec(), d).expect("same shape")),
                dq.map(|d| Tensor::new(inputs[1].shape().to_vec(), d).expect("same shape")),
            ]
        }))
    }
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}
