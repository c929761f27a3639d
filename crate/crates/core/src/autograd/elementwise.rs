use super::{check_same_shape, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("shapes checked by caller")
}

impl Graph {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same_shape("add", self.value(a), self.value(b))?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push_op(out, vec![a, b], |g, _, _, needs| {
            vec![needs[0].then(|| g.clone()), needs[1].then(|| g.clone())]
        }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same_shape("sub", self.value(a), self.value(b))?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push_op(out, vec![a, b], |g, _, _, needs| {
            vec![needs[0].then(|| g.clone()), needs[1].then(|| g.map(|v| -v))]
        }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same_shape("mul", self.value(a), self.value(b))?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push_op(out, vec![a, b], |g, inputs, _, needs| {
            vec![
                needs[0].then(|| zip_map(g, inputs[1], |gv, y| gv * y)),
                needs[1].then(|| zip_map(g, inputs[0], |gv, x| gv * x)),
            ]
        }))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).map(|v| v * factor);
        self.push_op(out, vec![a], move |g, _, _, _| vec![Some(g.map(|v| v * factor))])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v * v);
        self.push_op(out, vec![a], |g, inputs, _, _| {
            vec![Some(zip_map(g, inputs[0], |gv, x| 2.0 * x * gv))]
        })
    }

    /// `ln(a + eps)`.
    pub fn ln_eps(&mut self, a: Var, eps: f64) -> Var {
        let out = self.value(a).map(|v| (v + eps).ln());
        self.push_op(out, vec![a], move |g, inputs, _, _| {
            vec![Some(zip_map(g, inputs[0], |gv, x| gv / (x + eps)))]
        })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0));
        self.push_op(out, vec![a], |g, inputs, _, _| {
            vec![Some(zip_map(g, inputs[0], |gv, x| if x > 0.0 { gv } else { 0.0 }))]
        })
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let out = self.value(a).map(|v| if v > 0.0 { v } else { slope * v });
        self.push_op(out, vec![a], move |g, inputs, _, _| {
            vec![Some(zip_map(g, inputs[0], |gv, x| if x > 0.0 { gv } else { slope * gv }))]
        })
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push_op(out, vec![a], |g, inputs, _, _| {
            vec![Some(Tensor::full(inputs[0].shape().to_vec(), g.item()))]
        })
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape.to_vec())?;
        Ok(self.push_op(out, vec![a], |g, inputs, _, _| {
            vec![Some(
                g.clone()
                    .reshape(inputs[0].shape().to_vec())
                    .expect("reshape preserves element count"),
            )]
        }))
    }

    /// `Σ weight_i · term_i` over scalar terms.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        for &(v, _) in terms {
            if self.value(v).numel() != 1 {
                return Err(Error::shape("weighted_sum", "scalar terms", format!("{:?}", self.shape(v))));
            }
        }
        let total: f64 = terms.iter().map(|&(v, w)| w * self.value(v).item()).sum();
        let weights: Vec<f64> = terms.iter().map(|&(_, w)| w).collect();
        let inputs = terms.iter().map(|&(v, _)| v).collect();
        Ok(self.push_op(Tensor::scalar(total), inputs, move |g, _, _, needs| {
            weights
                .iter()
                .zip(needs)
                .map(|(&w, &need)| need.then(|| Tensor::scalar(w * g.item())))
                .collect()
        }))
    }

    /// Mean binary cross-entropy of logits against a constant label.
    pub fn bce_with_logits(&mut self, logits: Var, target: f64) -> Var {
        let x = self.value(logits);
        let n = x.numel() as f64;
        let total: f64 = x
            .data()
            .iter()
            .map(|&v| v.max(0.0) - v * target + (-v.abs()).exp().ln_1p())
            .sum();
        self.push_op(Tensor::scalar(total / n), vec![logits], move |g, inputs, _, _| {
            let scale = g.item() / n;
            vec![Some(inputs[0].map(|v| (sigmoid(v) - target) * scale))]
        })
    }

    /// Sum of cosine similarities over unordered pairs of rows.
    ///
    /// Input shape `[batch, rows, dim]`; output `[batch]`. `eps` is added to
    /// the product of norms in each denominator.
    pub fn pairwise_cosine(&mut self, q: Var, eps: f64) -> Result<Var> {
        let (b, k, c) = match self.shape(q) {
            &[b, k, c] => (b, k, c),
            s => return Err(Error::shape("pairwise_cosine", "[batch, rows, dim]", format!("{s:?}"))),
        };
        let x = self.value(q);
        let out: Vec<f64> = (0..b)
            .map(|bi| {
                let rows = &x.data()[bi * k * c..(bi + 1) * k * c];
                let mut acc = 0.0;
                for j1 in 0..k {
                    for j2 in j1 + 1..k {
                        let (r1, r2) = (&rows[j1 * c..(j1 + 1) * c], &rows[j2 * c..(j2 + 1) * c]);
                        acc += dot(r1, r2) / (norm(r1) * norm(r2) + eps);
                    }
                }
                acc
            })
            .collect();
        let out = Tensor::new([b], out)?;
        Ok(self.push_op(out, vec![q], move |g, inputs, _, _| {
            let x = inputs[0].data();
            let mut dx = vec![0.0; x.len()];
            for bi in 0..b {
                let base = bi * k * c;
                let norms: Vec<f64> = (0..k).map(|j| norm(&x[base + j * c..base + (j + 1) * c])).collect();
                for j1 in 0..k {
                    for j2 in j1 + 1..k {
                        let (o1, o2) = (base + j1 * c, base + j2 * c);
                        let (n1, n2) = (norms[j1], norms[j2]);
                        let s = dot(&x[o1..o1 + c], &x[o2..o2 + c]);
                        let d = n1 * n2 + eps;
                        let gb = g.data()[bi];
                        // d/da [a.b / (|a||b| + eps)] = b/d - s |b| a / (|a| d^2)
                        for u in 0..c {
                            let (a1, a2) = (x[o1 + u], x[o2 + u]);
                            let mut d1 = a2 / d;
                            let mut d2 = a1 / d;
                            if n1 > 0.0 {
                                d1 -= s * n2 * a1 / (n1 * d * d);
                            }
                            if n2 > 0.0 {
                                d2 -= s * n1 * a2 / (n2 * d * d);
                            }
                            dx[o1 + u] += gb * d1;
                            dx[o2 + u] += gb * d2;
                        }
                    }
                }
            }
            vec![Some(Tensor::new(inputs[0].shape().to_vec(), dx).expect("same shape"))]
        }))
    }

    /// Batch items `start..end` along the leading axis.
    pub fn slice_batch(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let out = self.value(a).slice_batch(start, end)?;
        Ok(self.push_op(out, vec![a], move |g, inputs, _, _| {
            let plane = inputs[0].numel() / inputs[0].shape()[0].max(1);
            let mut dx = Tensor::zeros(inputs[0].shape().to_vec());
            dx.data_mut()[start * plane..end * plane].copy_from_slice(g.data());
            vec![Some(dx)]
        }))
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
