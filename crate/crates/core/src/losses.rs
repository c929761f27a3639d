//! Cross-domain grouping losses and the weighted training objective.
//!
//! Every loss has a tape form operating on batched pooled tensors
//! (`[N, K*C]`, image `n` of the source half paired with image `n` of the
//! target half) and a value form on per-group vectors of a single pair.
//! The value forms are thin wrappers over the tape forms.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::grouping::{ClassDistribution, MaxClassScores};
use crate::tensor::Tensor;

/// Added to the product of norms in the cosine denominator.
pub const COSINE_EPS: f64 = 1e-8;
/// Added inside the logarithm of the class-equivalence loss.
pub const LOG_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_co: f64,
    pub lambda_orth: f64,
    pub lambda_cadv: f64,
    pub lambda_cl: f64,
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_co: 0.001,
            lambda_orth: 0.001,
            lambda_cadv: 0.001,
            lambda_cl: 0.0001,
            tau: 0.05,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_co", self.lambda_co),
            ("lambda_orth", self.lambda_orth),
            ("lambda_cadv", self.lambda_cadv),
            ("lambda_cl", self.lambda_cl),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::Config(format!("tau must lie in (0, 1), got {}", self.tau)));
        }
        Ok(())
    }
}

/// Unweighted values of the five objective terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub seg: f64,
    pub co: f64,
    pub orth: f64,
    pub cadv_g: f64,
    pub cl: f64,
}

impl LossTerms {
    pub fn named(&self) -> [(&'static str, f64); 5] {
        [
            ("seg", self.seg),
            ("co", self.co),
            ("orth", self.orth),
            ("cadv_g", self.cadv_g),
            ("cl", self.cl),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub seg: f64,
    pub co: f64,
    pub orth: f64,
    pub cadv_g: f64,
    pub cl: f64,
    pub total: f64,
    /// L2 norm of each unweighted term's gradient w.r.t. the score maps.
    pub grad_norms: Option<LossTerms>,
}

impl LossReport {
    pub fn terms(&self) -> LossTerms {
        LossTerms {
            seg: self.seg,
            co: self.co,
            orth: self.orth,
            cadv_g: self.cadv_g,
            cl: self.cl,
        }
    }
}

/// Term coefficients in the order `seg, co, orth, cadv_g, cl`.
pub fn term_coefficients(weights: &LossWeights) -> [f64; 5] {
    [1.0, weights.lambda_co, weights.lambda_orth, weights.lambda_cadv, weights.lambda_cl]
}

/// Weighted sum of the five terms.
pub fn total_loss(terms: LossTerms, weights: &LossWeights) -> Result<LossReport> {
    weights.validate()?;
    let values = [terms.seg, terms.co, terms.orth, terms.cadv_g, terms.cl];
    let total = values
        .iter()
        .zip(term_coefficients(weights))
        .map(|(v, w)| w * v)
        .sum();
    Ok(LossReport {
        seg: terms.seg,
        co: terms.co,
        orth: terms.orth,
        cadv_g: terms.cadv_g,
        cl: terms.cl,
        total,
        grad_norms: None,
    })
}

fn batch_of(g: &Graph, v: Var) -> Result<(usize, usize)> {
    match g.shape(v) {
        &[n, kc] => Ok((n, kc)),
        s => Err(Error::shape("pooled group tensor", "[N, K*C]", format!("{s:?}"))),
    }
}

/// `Σ_k ||Q_S^k - Q_T^k||²`, averaged over image pairs.
pub fn consistency_on_tape(g: &mut Graph, q_source: Var, q_target: Var) -> Result<Var> {
    let (n, _) = batch_of(g, q_source)?;
    let diff = g.sub(q_source, q_target)?;
    let sq = g.square(diff);
    let s = g.sum(sq);
    Ok(g.scale(s, 1.0 / n as f64))
}

/// Sum over both domains of pairwise group cosines, averaged over image pairs.
pub fn orthogonality_on_tape(g: &mut Graph, q_source: Var, q_target: Var, groups: usize) -> Result<Var> {
    let (n, kc) = batch_of(g, q_source)?;
    if groups == 0 || kc % groups != 0 {
        return Err(Error::shape("orthogonality", format!("K*C divisible by K={groups}"), kc));
    }
    let mut terms = Vec::with_capacity(2);
    for q in [q_source, q_target] {
        let r = g.reshape(q, &[n, groups, kc / groups])?;
        let cos = g.pairwise_cosine(r, COSINE_EPS)?;
        terms.push((g.sum(cos), 1.0 / n as f64));
    }
    g.weighted_sum(&terms)
}

/// `-Σ_k Σ_u [m_S ≥ τ] ln(m_T + ε)`, averaged over image pairs. The source
/// maxima act as constant pseudo-labels.
pub fn class_equivalence_on_tape(g: &mut Graph, m_source: Var, m_target: Var, tau: f64) -> Result<Var> {
    let (n, _) = batch_of(g, m_source)?;
    if g.shape(m_source) != g.shape(m_target) {
        return Err(Error::shape(
            "class_equivalence",
            format!("{:?}", g.shape(m_source)),
            format!("{:?}", g.shape(m_target)),
        ));
    }
    let mask = g.value(m_source).map(|m| if m >= tau { 1.0 } else { 0.0 });
    let mask = g.constant(mask);
    let log_t = g.ln_eps(m_target, LOG_EPS);
    let picked = g.mul(mask, log_t)?;
    let s = g.sum(picked);
    Ok(g.scale(s, -1.0 / n as f64))
}

fn stack(op: &'static str, a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<(Tensor, Tensor, usize)> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape(op, format!("{} groups", a.len()), b.len()));
    }
    let c = a[0].len();
    if a.iter().chain(b).any(|v| v.len() != c) {
        return Err(Error::shape(op, format!("vectors of length {c}"), "mixed lengths"));
    }
    let flat = |vs: &[Vec<f64>]| Tensor::new([1, vs.len() * c], vs.concat());
    Ok((flat(a)?, flat(b)?, a.len()))
}

pub fn semantic_consistency_loss(q_source: &[ClassDistribution], q_target: &[ClassDistribution]) -> Result<f64> {
    let a: Vec<Vec<f64>> = q_source.iter().map(|q| q.0.clone()).collect();
    let b: Vec<Vec<f64>> = q_target.iter().map(|q| q.0.clone()).collect();
    let (a, b, _) = stack("semantic_consistency_loss", &a, &b)?;
    let mut g = Graph::new();
    let (av, bv) = (g.constant(a), g.constant(b));
    let l = consistency_on_tape(&mut g, av, bv)?;
    Ok(g.value(l).item())
}

/// `a·b / (||a|| ||b|| + ε)`.
pub fn cosine_similarity(a: &ClassDistribution, b: &ClassDistribution) -> f64 {
    let dot: f64 = a.0.iter().zip(&b.0).map(|(x, y)| x * y).sum();
    let na = a.0.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.0.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb + COSINE_EPS)
}

pub fn orthogonality_loss(q_source: &[ClassDistribution], q_target: &[ClassDistribution]) -> Result<f64> {
    let a: Vec<Vec<f64>> = q_source.iter().map(|q| q.0.clone()).collect();
    let b: Vec<Vec<f64>> = q_target.iter().map(|q| q.0.clone()).collect();
    let (a, b, k) = stack("orthogonality_loss", &a, &b)?;
    let mut g = Graph::new();
    let (av, bv) = (g.constant(a), g.constant(b));
    let l = orthogonality_on_tape(&mut g, av, bv, k)?;
    Ok(g.value(l).item())
}

pub fn class_equivalence_loss(m_source: &[MaxClassScores], m_target: &[MaxClassScores], tau: f64) -> Result<f64> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Config(format!("tau must lie in (0, 1), got {tau}")));
    }
    let a: Vec<Vec<f64>> = m_source.iter().map(|m| m.0.clone()).collect();
    let b: Vec<Vec<f64>> = m_target.iter().map(|m| m.0.clone()).collect();
    let (a, b, _) = stack("class_equivalence_loss", &a, &b)?;
    let mut g = Graph::new();
    let (av, bv) = (g.constant(a), g.constant(b));
    let l = class_equivalence_on_tape(&mut g, av, bv, tau)?;
    Ok(g.value(l).item())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn qd(v: &[f64]) -> ClassDistribution {
        ClassDistribution(v.to_vec())
    }

    fn mc(v: &[f64]) -> MaxClassScores {
        MaxClassScores(v.to_vec())
    }

    #[test]
    fn consistency_examples() {
        let q = [qd(&[0.2, 0.3]), qd(&[0.1, 0.4])];
        assert_eq!(semantic_consistency_loss(&q, &q).unwrap(), 0.0);
        assert!((semantic_consistency_loss(&[qd(&[1.0, 0.0])], &[qd(&[0.0, 1.0])]).unwrap() - 2.0).abs() < 1e-15);
        let s = [qd(&[0.5, 0.4]), qd(&[0.3, 0.3])];
        let t = [qd(&[0.4, 0.5]), qd(&[0.3, 0.3])];
        assert!((semantic_consistency_loss(&s, &t).unwrap() - 0.02).abs() < 1e-12);
        assert!(semantic_consistency_loss(&s, &t[..1]).is_err());
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&qd(&[1.0, 0.0]), &qd(&[0.0, 1.0])), 0.0);
        assert!((cosine_similarity(&qd(&[0.3, 0.3]), &qd(&[0.7, 0.7])) - 1.0).abs() < 1e-7);
        assert!((cosine_similarity(&qd(&[3.0, 4.0]), &qd(&[4.0, 3.0])) - 0.96).abs() < 1e-9);
        assert_eq!(cosine_similarity(&qd(&[0.0, 0.0]), &qd(&[1.0, 0.0])), 0.0);
    }

    #[test]
    fn orthogonality_examples() {
        let disjoint = [qd(&[1.0, 0.0]), qd(&[0.0, 1.0])];
        assert_eq!(orthogonality_loss(&disjoint, &disjoint).unwrap(), 0.0);
        let same = vec![qd(&[0.2, 0.5, 0.1]); 3];
        assert!((orthogonality_loss(&same, &same).unwrap() - 6.0).abs() < 1e-6);
        assert_eq!(orthogonality_loss(&[qd(&[0.3, 0.2])], &[qd(&[0.1, 0.9])]).unwrap(), 0.0);
    }

    #[test]
    fn class_equivalence_examples() {
        let low = [mc(&[0.01, 0.02])];
        assert_eq!(class_equivalence_loss(&low, &[mc(&[0.3, 0.3])], 0.05).unwrap(), 0.0);
        let l = class_equivalence_loss(&[mc(&[0.9, 0.01])], &[mc(&[0.5, 0.3])], 0.05).unwrap();
        assert!((l - 0.5f64.ln().abs()).abs() < 1e-7);
        let l = class_equivalence_loss(&[mc(&[0.9, 0.6])], &[mc(&[1.0, 1.0])], 0.05).unwrap();
        assert!(l.abs() < 1e-7);
        assert!(class_equivalence_loss(&low, &low, 1.0).is_err());
    }

    #[test]
    fn total_loss_examples() {
        let terms = LossTerms { seg: 0.7, co: 1.0, orth: 1.0, cadv_g: 1.0, cl: 1.0 };
        let zero = LossWeights { lambda_co: 0.0, lambda_orth: 0.0, lambda_cadv: 0.0, lambda_cl: 0.0, tau: 0.05 };
        assert_eq!(total_loss(terms, &zero).unwrap().total, 0.7);
        let r = total_loss(terms, &LossWeights::default()).unwrap();
        assert!((r.total - (0.7 + 0.0031)).abs() < 1e-12);
        let bad = LossWeights { lambda_co: -1.0, ..LossWeights::default() };
        assert!(matches!(total_loss(terms, &bad), Err(Error::Config(_))));
    }
}
