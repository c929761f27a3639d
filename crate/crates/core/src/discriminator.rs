//! Group-conditioned patch discriminator and both sides of the adversarial
//! objective.
//!
//! A single discriminator serves every group. It sees the per-pixel outer
//! product of a group's masked class map with that group's class
//! distribution, so groups are told apart only through the condition.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{sigmoid, Graph, Var};
use crate::error::{Error, Result};
use crate::grouping::{ClassDistribution, GroupFeature};
use crate::nn::{Bound, Conv2d, Init, ParamStore};
use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.2;
/// Five stride-2 layers.
pub const DOWNSAMPLE: usize = 32;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    /// Outer product with the group's class distribution.
    #[default]
    Outer,
    /// Outer product with the all-ones vector (unconditional alignment).
    Ones,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscConfig {
    pub classes: usize,
    /// Widths of the four hidden layers; the fifth layer has one channel.
    pub widths: [usize; 4],
    pub condition: Condition,
    /// Let the generator step backpropagate through the condition vector too.
    pub couple_condition: bool,
}

impl Default for DiscConfig {
    fn default() -> Self {
        Self {
            classes: 5,
            widths: [64, 128, 256, 512],
            condition: Condition::Outer,
            couple_condition: false,
        }
    }
}

impl DiscConfig {
    pub fn input_channels(&self) -> usize {
        self.classes * self.classes
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.widths.contains(&0) {
            return Err(Error::Config("discriminator widths and classes must be positive".into()));
        }
        Ok(())
    }
}

/// Per-pixel outer-product input `[C*C, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorInput {
    pub cond: Tensor,
}

/// Patch logits `[1, H/32, W/32]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainLogitMap {
    pub logits: Tensor,
}

impl DomainLogitMap {
    pub fn probabilities(&self) -> Tensor {
        self.logits.map(sigmoid)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Disc,
    Gen,
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    config: DiscConfig,
    params: ParamStore,
    layers: Vec<Conv2d>,
}

impl Discriminator {
    pub fn new(config: DiscConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut in_ch = config.input_channels();
        let mut layers = Vec::with_capacity(5);
        for (i, &out_ch) in config.widths.iter().chain(&[1]).enumerate() {
            layers.push(Conv2d::new(&mut params, &format!("disc.conv{i}"), in_ch, out_ch, 4, 2, 1, Init::He, rng));
            in_ch = out_ch;
        }
        Ok(Self { config, params, layers })
    }

    pub fn config(&self) -> &DiscConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn zero_last_layer(&mut self) {
        let last = self.layers.last().expect("five layers");
        for id in [last.weight, last.bias] {
            self.params.get_mut(id).data_mut().fill(0.0);
        }
    }

    pub fn first_layer(&self) -> &Conv2d {
        &self.layers[0]
    }

    pub fn layers(&self) -> &[Conv2d] {
        &self.layers
    }

    /// Patch logits for a `[B, C*C, H, W]` batch of conditional inputs.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let (_, c, h, w) = g.value(x).dims4()?;
        if c != self.layers[0].in_channels {
            return Err(Error::shape("discriminate", self.layers[0].in_channels, c));
        }
        if h % DOWNSAMPLE != 0 || w % DOWNSAMPLE != 0 || h == 0 || w == 0 {
            return Err(Error::shape("discriminate", "spatial size divisible by 32", format!("{h}x{w}")));
        }
        let mut z = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            z = layer.forward(g, p, z)?;
            if i < last {
                z = g.leaky_relu(z, LEAKY_SLOPE);
            }
        }
        Ok(z)
    }

    pub fn discriminate(&self, input: &DiscriminatorInput) -> Result<DomainLogitMap> {
        let (c, h, w) = match input.cond.shape() {
            &[c, h, w] => (c, h, w),
            s => return Err(Error::shape("discriminate", "[C*C, H, W]", format!("{s:?}"))),
        };
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(input.cond.clone().reshape([1, c, h, w])?);
        let y = self.forward(&mut g, &p, x)?;
        let (_, _, ho, wo) = g.value(y).dims4()?;
        Ok(DomainLogitMap {
            logits: g.value(y).clone().reshape([1, ho, wo])?,
        })
    }
}

/// Condition vectors `[N, K*C]` for a batch: the class distributions
/// themselves, or all ones.
pub fn condition_on_tape(g: &mut Graph, q: Var, mode: Condition, detach: bool) -> Var {
    match mode {
        Condition::Outer if detach => g.detach(q),
        Condition::Outer => q,
        Condition::Ones => g.constant(Tensor::full(g.shape(q).to_vec(), 1.0)),
    }
}

pub fn make_conditional_input(feat: &GroupFeature, q: &ClassDistribution) -> Result<DiscriminatorInput> {
    let (c, h, w) = match feat.feat.shape() {
        &[c, h, w] => (c, h, w),
        s => return Err(Error::shape("make_conditional_input", "[C, H, W]", format!("{s:?}"))),
    };
    if q.0.len() != c {
        return Err(Error::shape("make_conditional_input", format!("condition of length {c}"), q.0.len()));
    }
    let mut g = Graph::new();
    let f = g.constant(feat.feat.clone().reshape([1, c, h, w])?);
    let qv = g.constant(Tensor::new([1, c], q.0.clone())?);
    let out = g.outer_condition(f, qv, 1)?;
    Ok(DiscriminatorInput {
        cond: g.value(out).clone().reshape([c * c, h, w])?,
    })
}

/// Discriminator objective: source patches labelled 1, target patches 0.
/// Logits are `[N*K, 1, h, w]` with groups innermost.
pub fn disc_loss_on_tape(g: &mut Graph, source_logits: Var, target_logits: Var, groups: usize) -> Result<Var> {
    if g.shape(source_logits) != g.shape(target_logits) {
        return Err(Error::shape(
            "adversarial_losses",
            format!("{:?}", g.shape(source_logits)),
            format!("{:?}", g.shape(target_logits)),
        ));
    }
    let s = g.bce_with_logits(source_logits, 1.0);
    let t = g.bce_with_logits(target_logits, 0.0);
    let k = groups as f64;
    g.weighted_sum(&[(s, k), (t, k)])
}

/// Non-saturating generator objective: target patches labelled 1.
pub fn gen_loss_on_tape(g: &mut Graph, target_logits: Var, groups: usize) -> Var {
    let t = g.bce_with_logits(target_logits, 1.0);
    g.scale(t, groups as f64)
}

/// Value form over per-group logit maps of one image pair.
pub fn adversarial_losses(source: &[DomainLogitMap], target: &[DomainLogitMap], side: Side) -> Result<f64> {
    let k = target.len();
    if k == 0 || (side == Side::Disc && source.len() != k) {
        return Err(Error::shape("adversarial_losses", "one logit map per group for each domain", format!("{} source, {k} target", source.len())));
    }
    let shape = target[0].logits.shape().to_vec();
    if target.iter().chain(if side == Side::Disc { source } else { &[] }).any(|m| m.logits.shape() != shape.as_slice()) {
        return Err(Error::shape("adversarial_losses", format!("{shape:?}"), "mixed logit shapes"));
    }
    let stacked = |maps: &[DomainLogitMap]| -> Result<Tensor> {
        let data = maps.iter().flat_map(|m| m.logits.data().iter().copied()).collect();
        Tensor::new([maps.len(), 1, shape[1], shape[2]], data)
    };
    let mut g = Graph::new();
    let t = g.constant(stacked(target)?);
    let loss = match side {
        Side::Disc => {
            let s = g.constant(stacked(source)?);
            disc_loss_on_tape(&mut g, s, t, k)?
        }
        Side::Gen => gen_loss_on_tape(&mut g, t, k),
    };
    Ok(g.value(loss).item())
}

/// Mean sigmoid output per group for `[N*K, 1, h, w]` logits.
pub fn mean_probability_per_group(logits: &Tensor, groups: usize) -> Vec<f64> {
    let b = logits.shape()[0];
    let per = logits.numel() / b.max(1);
    let mut sums = vec![0.0; groups];
    for (i, chunk) in logits.data().chunks(per).enumerate() {
        sums[i % groups] += chunk.iter().map(|&v| sigmoid(v)).sum::<f64>();
    }
    let count = (b / groups * per) as f64;
    sums.into_iter().map(|s| s / count).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn logit_map(v: f64, h: usize, w: usize) -> DomainLogitMap {
        DomainLogitMap { logits: Tensor::full([1, h, w], v) }
    }

    #[test]
    fn shape_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = DiscConfig { classes: 3, widths: [4, 4, 4, 4], ..Default::default() };
        let d = Discriminator::new(cfg, &mut rng).unwrap();
        let input = DiscriminatorInput { cond: Tensor::full([9, 64, 64], 0.1) };
        assert_eq!(d.discriminate(&input).unwrap().logits.shape(), &[1, 2, 2]);
        let bad = DiscriminatorInput { cond: Tensor::full([9, 48, 64], 0.1) };
        assert!(d.discriminate(&bad).is_err());
    }

    #[test]
    fn zero_last_layer_gives_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut d = Discriminator::new(DiscConfig { classes: 2, widths: [4, 4, 4, 4], ..Default::default() }, &mut rng).unwrap();
        d.zero_last_layer();
        let out = d.discriminate(&DiscriminatorInput { cond: Tensor::full([4, 32, 32], 0.3) }).unwrap();
        assert!(out.probabilities().data().iter().all(|&p| p == 0.5));
    }

    #[test]
    fn conditional_input_by_hand() {
        let feat = GroupFeature { feat: Tensor::new([2, 1, 1], vec![0.5, 0.5]).unwrap() };
        let cond = make_conditional_input(&feat, &ClassDistribution(vec![1.0, 0.0])).unwrap();
        assert_eq!(cond.cond.data(), &[0.5, 0.0, 0.5, 0.0]);
        let zero = make_conditional_input(&feat, &ClassDistribution(vec![0.0, 0.0])).unwrap();
        assert!(zero.cond.data().iter().all(|&v| v == 0.0));
        let three = GroupFeature { feat: Tensor::full([3, 2, 2], 0.2) };
        assert_eq!(make_conditional_input(&three, &ClassDistribution(vec![0.1; 3])).unwrap().cond.shape()[0], 9);
        assert!(make_conditional_input(&three, &ClassDistribution(vec![0.1; 2])).is_err());
    }

    #[test]
    fn closed_form_losses_at_one_half() {
        let maps = vec![logit_map(0.0, 2, 2), logit_map(0.0, 2, 2)];
        let d = adversarial_losses(&maps, &maps, Side::Disc).unwrap();
        let gl = adversarial_losses(&[], &maps, Side::Gen).unwrap();
        assert!((d - 4.0 * 2f64.ln()).abs() < 1e-12);
        assert!((gl - 2.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn perfect_discriminator_has_no_loss() {
        let src = vec![logit_map(40.0, 2, 2)];
        let tgt = vec![logit_map(-40.0, 2, 2)];
        assert!(adversarial_losses(&src, &tgt, Side::Disc).unwrap() < 1e-15);
    }

    #[test]
    fn generator_loss_falls_as_target_looks_like_source() {
        let mut last = f64::INFINITY;
        for v in [-3.0, -1.0, 0.0, 1.0, 3.0] {
            let l = adversarial_losses(&[], &[logit_map(v, 1, 1)], Side::Gen).unwrap();
            assert!(l < last);
            last = l;
        }
    }

    #[test]
    fn missing_group_is_an_error() {
        let one = vec![logit_map(0.0, 1, 1)];
        let two = vec![logit_map(0.0, 1, 1), logit_map(0.0, 1, 1)];
        assert!(adversarial_losses(&one, &two, Side::Disc).is_err());
        assert!(adversarial_losses(&one, &[], Side::Gen).is_err());
    }
}
