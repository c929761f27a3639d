//! Fixtures shared by the integration tests and the acceptance gate.

#![allow(dead_code)]

pub mod oracle;

use cdga::autograd::{Graph, Var};
use cdga::discriminator::{self, DiscConfig, Discriminator};
use cdga::gradcheck::{central_differences, compare, Comparison, DEFAULT_STEP};
use cdga::grouping::{group_tensors, BnMode, GroupInput, GroupNet, GroupNetConfig};
use cdga::losses;
use cdga::seg_model::IGNORE;
use cdga::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const CLASSES: usize = 3;
pub const GROUPS: usize = 2;
const RELU_MARGIN: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Term {
    Seg,
    Consistency,
    Orthogonality,
    ClassEquivalence,
    GenAdversarial,
}

pub const TERMS: [Term; 5] = [
    Term::Seg,
    Term::Consistency,
    Term::Orthogonality,
    Term::ClassEquivalence,
    Term::GenAdversarial,
];

/// One source image and one target image of random scores, with the
/// networks between the scores and the loss held fixed.
pub struct Fixture {
    pub term: Term,
    pub scores: Tensor,
    pub labels: Vec<u8>,
    pub group: GroupNet,
    pub disc: Option<Discriminator>,
    /// Target class distributions at the base point; the generator side
    /// treats them as constants.
    pub q_target: Option<Tensor>,
    pub tau: f64,
}

impl Fixture {
    pub fn new(term: Term, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0000 + seed);
        // redraw until no hidden ReLU sits inside the difference window
        loop {
            let fx = Self::draw(term, &mut rng)?;
            if fx.relu_margin()? > RELU_MARGIN {
                return Ok(fx);
            }
        }
    }

    fn draw(term: Term, rng: &mut ChaCha8Rng) -> Result<Self> {
        // the discriminator needs five halvings, so its fixture upsamples a
        // 4x4 field by 8
        let rep = if term == Term::GenAdversarial { 8 } else { 1 };
        let side = 4 * rep;
        let field = Tensor::from_fn([2, CLASSES, 4, 4], |_| rng.random_range(-2.0..2.0));
        let scores = Tensor::from_fn([2, CLASSES, side, side], |i| {
            let (plane, y, x) = (i / (side * side), i / side % side, i % side);
            field.data()[plane * 16 + y / rep * 4 + x / rep]
        });
        let labels = (0..side * side)
            .map(|_| if rng.random_bool(0.1) { IGNORE } else { rng.random_range(0..CLASSES as u8) })
            .collect();
        let group = GroupNet::new(
            GroupNetConfig {
                classes: CLASSES,
                groups: GROUPS,
                hidden: 4,
                input: GroupInput::Prob,
                head_init_std: 0.7,
            },
            rng,
        )?;
        let disc = if term == Term::GenAdversarial {
            Some(Discriminator::new(
                DiscConfig {
                    classes: CLASSES,
                    widths: [2, 2, 2, 2],
                    ..Default::default()
                },
                rng,
            )?)
        } else {
            None
        };
        let mut fx = Self {
            term,
            scores,
            labels,
            group,
            disc,
            q_target: None,
            tau: 0.5,
        };
        let mut g = Graph::new();
        let s = g.constant(fx.scores.clone());
        let (q, m) = fx.pooled(&mut g, s)?;
        if term == Term::GenAdversarial {
            fx.q_target = Some(g.value(q).slice_batch(1, 2)?);
        }
        if term == Term::ClassEquivalence {
            // threshold halfway between two source maxima, away from both
            let mut ms: Vec<f64> = g.value(m).slice_batch(0, 1)?.into_data();
            ms.sort_by(f64::total_cmp);
            let mid = ms.len() / 2;
            fx.tau = 0.5 * (ms[mid - 1] + ms[mid]);
        }
        Ok(fx)
    }

    /// Smallest |pre-activation| of the grouping network's hidden ReLU.
    fn relu_margin(&self) -> Result<f64> {
        let p = self.group.params();
        let w = p.by_name("group.embed.weight").expect("embed weight");
        let b = p.by_name("group.embed.bias").expect("embed bias");
        let prob = cdga::seg_model::ScoreMap::from_scores(self.scores.clone())?.prob().clone();
        let (n, c, h, wd) = prob.dims4()?;
        let hidden = b.numel();
        let mut margin = f64::INFINITY;
        for ni in 0..n {
            for px in 0..h * wd {
                for o in 0..hidden {
                    let z: f64 = b.data()[o]
                        + (0..c).map(|ci| w.data()[o * c + ci] * prob.data()[(ni * c + ci) * h * wd + px]).sum::<f64>();
                    margin = margin.min(z.abs());
                }
            }
        }
        Ok(margin)
    }

    fn pooled(&self, g: &mut Graph, scores: Var) -> Result<(Var, Var)> {
        let prob = g.softmax_channels(scores)?;
        let pc = self.group.params().bind(g, false);
        let (assign, _) = self.group.forward(g, &pc, prob, BnMode::Train)?;
        let t = group_tensors(g, prob, assign)?;
        Ok((t.q, t.m))
    }

    /// The term as a function of the batch scores.
    pub fn loss(&self, g: &mut Graph, scores: Var) -> Result<Var> {
        match self.term {
            Term::Seg => {
                let src = g.slice_batch(scores, 0, 1)?;
                g.cross_entropy(src, &self.labels, IGNORE)
            }
            Term::Consistency | Term::Orthogonality | Term::ClassEquivalence => {
                let (q, m) = self.pooled(g, scores)?;
                let (a, b) = if self.term == Term::ClassEquivalence { (m, m) } else { (q, q) };
                let s = g.slice_batch(a, 0, 1)?;
                let t = g.slice_batch(b, 1, 2)?;
                match self.term {
                    Term::Consistency => losses::consistency_on_tape(g, s, t),
                    Term::Orthogonality => losses::orthogonality_on_tape(g, s, t, GROUPS),
                    _ => losses::class_equivalence_on_tape(g, s, t, self.tau),
                }
            }
            Term::GenAdversarial => {
                let disc = self.disc.as_ref().expect("adversarial fixture has a discriminator");
                let prob = g.softmax_channels(scores)?;
                let pc = self.group.params().bind(g, false);
                let (assign, _) = self.group.forward(g, &pc, prob, BnMode::Train)?;
                let t = group_tensors(g, prob, assign)?;
                let feat_t = g.slice_batch(t.feat, 1, 2)?;
                let q = g.constant(self.q_target.clone().expect("condition fixed at construction"));
                let x = g.outer_condition(feat_t, q, GROUPS)?;
                let pd = disc.params().bind(g, false);
                let logits = disc.forward(g, &pd, x)?;
                Ok(discriminator::gen_loss_on_tape(g, logits, GROUPS))
            }
        }
    }

    pub fn value(&self, scores: &Tensor) -> Result<f64> {
        let mut g = Graph::new();
        let s = g.constant(scores.clone());
        let l = self.loss(&mut g, s)?;
        Ok(g.value(l).item())
    }

    pub fn analytic(&self) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let s = g.param(self.scores.clone());
        let l = self.loss(&mut g, s)?;
        let grads = g.backward(l)?;
        Ok(grads.get_or_zeros(s, &self.scores).into_data())
    }

    /// Coordinates probed by finite differences: all of them at 4x4, a
    /// seeded sample of 256 at the discriminator's 32x32.
    pub fn coords(&self, seed: u64) -> Vec<usize> {
        let n = self.scores.numel();
        if n <= 256 {
            return (0..n).collect();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rand::seq::index::sample(&mut rng, n, 256).into_vec()
    }

    pub fn numeric(&self, coords: &[usize]) -> Result<Vec<f64>> {
        central_differences(|x| self.value(x), &self.scores, DEFAULT_STEP, coords)
    }
}

pub fn check_term(term: Term, seed: u64) -> Result<Comparison> {
    let fx = Fixture::new(term, seed)?;
    let coords = fx.coords(seed);
    let analytic = fx.analytic()?;
    let picked: Vec<f64> = coords.iter().map(|&i| analytic[i]).collect();
    Ok(compare(&picked, &fx.numeric(&coords)?))
}

/// A model, schedule and dataset small enough for many short runs.
pub fn tiny_run(seed: u64) -> (cdga::trainer::ModelConfig, cdga::trainer::TrainConfig, cdga::data::Dataset) {
    use cdga::data::{Dataset, SyntheticSpec};
    use cdga::seg_model::SegModelConfig;
    use cdga::trainer::{ModelConfig, TrainConfig};
    let model = ModelConfig {
        seg: SegModelConfig {
            channels: vec![4, 4],
            strides: vec![2, 1],
            ..Default::default()
        },
        group_hidden: 4,
        disc_widths: [2, 2, 2, 2],
        ..Default::default()
    };
    let train = TrainConfig {
        groups: 2,
        total_iters: 6,
        batch_size: 1,
        seed,
        ..Default::default()
    };
    let spec = SyntheticSpec {
        image_size: [32, 32],
        n_source: 3,
        n_target: 3,
        n_val: 2,
        ..Default::default()
    };
    (model, train, Dataset::synthetic(&spec).expect("valid tiny spec"))
}

/// Trains `iters` steps from scratch; returns the per-step records and the
/// encoded final state.
pub fn straight_run(
    model: &cdga::trainer::ModelConfig,
    train: &cdga::trainer::TrainConfig,
    data: &cdga::data::Dataset,
) -> Result<(Vec<cdga::metrics::MetricsRecord>, Vec<u8>)> {
    use cdga::checkpoint::{encode, RunConfigs};
    let mut state = cdga::trainer::TrainState::new(model, train)?;
    let mut records = Vec::new();
    cdga::trainer::train(&mut state, data, train, |_, r| {
        records.push(r.into());
        Ok(())
    })?;
    let configs = RunConfigs { model: model.clone(), train: train.clone() };
    Ok((records, encode(&state, &configs)?))
}

/// Same as [`straight_run`], but stops at `split`, saves a checkpoint to
/// disk, reloads it, and finishes from the reloaded state.
pub fn resumed_run(
    model: &cdga::trainer::ModelConfig,
    train: &cdga::trainer::TrainConfig,
    data: &cdga::data::Dataset,
    split: u64,
    dir: &std::path::Path,
) -> Result<(Vec<cdga::metrics::MetricsRecord>, Vec<u8>)> {
    use cdga::checkpoint::{encode, load, save, RunConfigs};
    let configs = RunConfigs { model: model.clone(), train: train.clone() };
    let mut records = Vec::new();
    let mut state = cdga::trainer::TrainState::new(model, train)?;
    cdga::trainer::train_until(&mut state, data, train, split, |_, r| {
        records.push(r.into());
        Ok(())
    })?;
    let path = dir.join("mid.ckpt");
    save(&path, &state, &configs)?;
    drop(state);
    let (mut state, restored) = load(&path)?.into_state()?;
    assert_eq!(restored, configs);
    cdga::trainer::train(&mut state, data, train, |_, r| {
        records.push(r.into());
        Ok(())
    })?;
    Ok((records, encode(&state, &configs)?))
}
