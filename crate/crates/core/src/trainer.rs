//! Joint optimization of the segmentation network G, the grouping network C
//! and the discriminator D.
//!
//! Each iteration first updates D on detached conditional inputs, then
//! updates G and C on the weighted objective with the freshly updated D
//! held fixed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{BatchStats, Graph, Gradients, Var};
use crate::data::{Dataset, Sample};
use crate::discriminator::{self, Condition, DiscConfig, Discriminator};
use crate::error::{Error, Result};
use crate::grouping::{group_tensors, BnMode, GroupInput, GroupNet, GroupNetConfig};
use crate::losses::{self, LossReport, LossTerms, LossWeights};
use crate::nn::{Bound, ParamStore};
use crate::optim::{poly_lr, Adam, Sgd};
use crate::seg_model::{Image, LabelMap, SegModel, SegModelConfig, IGNORE};
use crate::tensor::Tensor;

/// Architecture of the three networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub seg: SegModelConfig,
    pub group_hidden: usize,
    pub group_input: GroupInput,
    pub group_head_std: f64,
    pub disc_widths: [usize; 4],
    pub condition: Condition,
    pub couple_condition: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            seg: SegModelConfig::default(),
            group_hidden: 64,
            group_input: GroupInput::Prob,
            group_head_std: 0.1,
            disc_widths: [64, 128, 256, 512],
            condition: Condition::Outer,
            couple_condition: false,
        }
    }
}

impl ModelConfig {
    pub fn classes(&self) -> usize {
        self.seg.classes
    }
}

/// Which terms of the objective are active. Disabled terms are left off
/// the tape and reported as exactly zero.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossToggle {
    pub seg: bool,
    pub co: bool,
    pub orth: bool,
    pub cadv: bool,
    pub cl: bool,
}

impl Default for LossToggle {
    fn default() -> Self {
        Self::all()
    }
}

impl LossToggle {
    pub fn all() -> Self {
        Self {
            seg: true,
            co: true,
            orth: true,
            cadv: true,
            cl: true,
        }
    }

    pub fn source_only() -> Self {
        Self {
            seg: true,
            co: false,
            orth: false,
            cadv: false,
            cl: false,
        }
    }

    pub fn uses_groups(&self) -> bool {
        self.co || self.orth || self.cadv || self.cl
    }

    /// Parses a comma-separated list such as `seg,cadv`.
    pub fn parse(list: &str) -> Result<Self> {
        let mut t = Self {
            seg: false,
            co: false,
            orth: false,
            cadv: false,
            cl: false,
        };
        for name in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match name {
                "seg" => t.seg = true,
                "co" => t.co = true,
                "orth" => t.orth = true,
                "cadv" => t.cadv = true,
                "cl" => t.cl = true,
                other => return Err(Error::Config(format!("unknown loss term {other:?}"))),
            }
        }
        Ok(t)
    }

    pub fn names(&self) -> Vec<&'static str> {
        [("seg", self.seg), ("co", self.co), ("orth", self.orth), ("cadv", self.cadv), ("cl", self.cl)]
            .into_iter()
            .filter_map(|(n, on)| on.then_some(n))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Number of groups K.
    pub groups: usize,
    pub weights: LossWeights,
    pub lr_g: f64,
    pub lr_c: f64,
    pub lr_d: f64,
    pub poly_power: f64,
    pub momentum: f64,
    /// Apply the poly schedule to D's learning rate as well.
    pub decay_d: bool,
    pub total_iters: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub toggle: LossToggle,
    /// Record per-term gradient norms with respect to the scores.
    pub log_grad_norms: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            groups: 8,
            weights: LossWeights::default(),
            lr_g: 2.5e-4,
            lr_c: 1e-3,
            lr_d: 1e-4,
            poly_power: 0.9,
            momentum: 0.9,
            decay_d: false,
            total_iters: 20_000,
            batch_size: 2,
            seed: 0,
            toggle: LossToggle::all(),
            log_grad_norms: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, classes: usize) -> Result<()> {
        self.weights.validate()?;
        if self.groups < 1 {
            return Err(Error::Config(format!("K must be >= 1, got {}", self.groups)));
        }
        for (name, lr) in [("lr_g", self.lr_g), ("lr_c", self.lr_c), ("lr_d", self.lr_d)] {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {lr}")));
            }
        }
        if !(self.poly_power.is_finite() && self.poly_power >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("poly_power must be >= 0 and momentum in [0, 1)".into()));
        }
        if self.total_iters == 0 || self.batch_size == 0 {
            return Err(Error::Config("total_iters and batch_size must be positive".into()));
        }
        if !self.toggle.seg && !self.toggle.uses_groups() {
            return Err(Error::Config("at least one loss term must be enabled".into()));
        }
        if self.groups > classes {
            eprintln!("warning: K={} exceeds the number of classes ({classes})", self.groups);
        }
        Ok(())
    }
}

/// Everything that evolves during training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub seg: SegModel,
    pub group: GroupNet,
    pub disc: Discriminator,
    pub opt_g: Sgd,
    pub opt_c: Sgd,
    pub opt_d: Adam,
    pub iteration: u64,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    /// Fresh networks drawn from `train.seed`; the same generator then drives
    /// image pairing.
    pub fn new(model: &ModelConfig, train: &TrainConfig) -> Result<Self> {
        model.seg.validate()?;
        train.validate(model.classes())?;
        let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
        let seg = SegModel::new(model.seg.clone(), &mut rng)?;
        let group = GroupNet::new(
            GroupNetConfig {
                classes: model.classes(),
                groups: train.groups,
                hidden: model.group_hidden,
                input: model.group_input,
                head_init_std: model.group_head_std,
            },
            &mut rng,
        )?;
        let disc = Discriminator::new(
            DiscConfig {
                classes: model.classes(),
                widths: model.disc_widths,
                condition: model.condition,
                couple_condition: model.couple_condition,
            },
            &mut rng,
        )?;
        Ok(Self {
            opt_g: Sgd::new(seg.params(), train.momentum),
            opt_c: Sgd::new(group.params(), 0.0),
            opt_d: Adam::new(disc.params(), 0.9, 0.999),
            seg,
            group,
            disc,
            iteration: 0,
            rng,
        })
    }

    pub fn groups(&self) -> usize {
        self.group.groups()
    }
}

/// Outcome of one iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    /// Iteration index the step ran at (before incrementing).
    pub iteration: u64,
    pub lr_g: f64,
    pub lr_c: f64,
    pub lr_d: f64,
    pub loss: LossReport,
    /// D's own objective before its update, zero when the adversarial term is off.
    pub disc: f64,
    /// Mean D(target) per group before D's update.
    pub d_target: Vec<f64>,
}

fn collect_grads(grads: &Gradients, bound: &Bound, store: &ParamStore) -> Vec<Tensor> {
    bound
        .vars()
        .iter()
        .zip(store.iter())
        .map(|(&v, (_, t))| grads.get_or_zeros(v, t))
        .collect()
}

fn check_finite(term: &'static str, value: f64, iteration: u64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { term, iteration, value })
    }
}

/// Draws one random source/target pairing for a mini-batch.
pub fn sample_pairs(rng: &mut ChaCha8Rng, n_source: usize, n_target: usize, batch: usize) -> Vec<(usize, usize)> {
    (0..batch)
        .map(|_| (rng.random_range(0..n_source), rng.random_range(0..n_target)))
        .collect()
}

/// Group tensors for one batch, split into source and target halves.
struct Grouped {
    feat: [Var; 2],
    q: [Var; 2],
    m: [Var; 2],
    stats: BatchStats,
}

fn run_grouping(g: &mut Graph, state: &TrainState, pc: &Bound, scores: Var, prob: Var, n: usize) -> Result<Grouped> {
    let input = match state.group.config().input {
        GroupInput::Prob => prob,
        GroupInput::Scores => scores,
    };
    let (assign, stats) = state.group.forward(g, pc, input, BnMode::Train)?;
    let t = group_tensors(g, prob, assign)?;
    let halves = |g: &mut Graph, v: Var| -> Result<[Var; 2]> { Ok([g.slice_batch(v, 0, n)?, g.slice_batch(v, n, 2 * n)?]) };
    Ok(Grouped {
        feat: halves(g, t.feat)?,
        q: halves(g, t.q)?,
        m: halves(g, t.m)?,
        stats: stats.expect("train mode returns statistics"),
    })
}

/// One D update on detached conditional inputs. Returns (loss, per-group D(target)).
fn disc_step(state: &mut TrainState, feat: [&Tensor; 2], q: [&Tensor; 2], lr: f64) -> Result<(f64, Vec<f64>)> {
    let k = state.groups();
    let mode = state.disc.config().condition;
    let mut g = Graph::new();
    let pd = state.disc.params().bind(&mut g, true);
    let mut logits = [None, None];
    for side in 0..2 {
        let f = g.constant(feat[side].clone());
        let qv = g.constant(q[side].clone());
        let c = discriminator::condition_on_tape(&mut g, qv, mode, true);
        let x = g.outer_condition(f, c, k)?;
        logits[side] = Some(state.disc.forward(&mut g, &pd, x)?);
    }
    let (ls, lt) = (logits[0].unwrap(), logits[1].unwrap());
    let d_target = discriminator::mean_probability_per_group(g.value(lt), k);
    let loss = discriminator::disc_loss_on_tape(&mut g, ls, lt, k)?;
    let value = g.value(loss).item();
    check_finite("disc", value, state.iteration)?;
    let grads = g.backward(loss)?;
    let gd = collect_grads(&grads, &pd, state.disc.params());
    state.opt_d.step(state.disc.params_mut(), &gd, lr)?;
    Ok((value, d_target))
}

/// Runs one alternation on a paired mini-batch.
pub fn train_step(state: &mut TrainState, source: &[&Sample], target: &[&Sample], cfg: &TrainConfig) -> Result<StepReport> {
    let n = source.len();
    if n == 0 || target.len() != n {
        return Err(Error::shape("train_step", "equal non-empty source and target batches", format!("{n} vs {}", target.len())));
    }
    let it = state.iteration;
    if it >= cfg.total_iters {
        return Err(Error::Config(format!("iteration {it} is past total_iters {}", cfg.total_iters)));
    }
    let toggle = cfg.toggle;
    let k = state.groups();
    let lr_g = poly_lr(cfg.lr_g, it, cfg.total_iters, cfg.poly_power)?;
    let lr_c = poly_lr(cfg.lr_c, it, cfg.total_iters, cfg.poly_power)?;
    let lr_d = if cfg.decay_d { poly_lr(cfg.lr_d, it, cfg.total_iters, cfg.poly_power)? } else { cfg.lr_d };

    let images: Vec<&Image> = source.iter().chain(target).map(|s| &s.image).collect();
    let labels: Vec<&LabelMap> = source
        .iter()
        .map(|s| s.label.as_ref().ok_or_else(|| Error::Config("source sample without labels".into())))
        .collect::<Result<_>>()?;

    let mut g = Graph::new();
    let pg = state.seg.params().bind(&mut g, true);
    let pc = state.group.params().bind(&mut g, true);
    let x = g.constant(Image::batch(&images)?);
    let scores = state.seg.forward(&mut g, &pg, x)?;
    let prob = g.softmax_channels(scores)?;

    let mut terms: Vec<(&'static str, Var, f64)> = Vec::new();
    if toggle.seg {
        let s = g.slice_batch(scores, 0, n)?;
        let ce = g.cross_entropy(s, &LabelMap::concat(&labels), IGNORE)?;
        terms.push(("seg", ce, 1.0));
    }

    let mut disc_value = 0.0;
    let mut d_target = Vec::new();
    let mut stats = None;
    if toggle.uses_groups() {
        let gr = run_grouping(&mut g, state, &pc, scores, prob, n)?;
        if toggle.cadv {
            let feat = [g.value(gr.feat[0]).clone(), g.value(gr.feat[1]).clone()];
            let q = [g.value(gr.q[0]).clone(), g.value(gr.q[1]).clone()];
            (disc_value, d_target) = disc_step(state, [&feat[0], &feat[1]], [&q[0], &q[1]], lr_d)?;

            let pd = state.disc.params().bind(&mut g, false);
            let cfg_d = state.disc.config();
            let c = discriminator::condition_on_tape(&mut g, gr.q[1], cfg_d.condition, !cfg_d.couple_condition);
            let x_t = g.outer_condition(gr.feat[1], c, k)?;
            let logits = state.disc.forward(&mut g, &pd, x_t)?;
            let adv = discriminator::gen_loss_on_tape(&mut g, logits, k);
            terms.push(("cadv_g", adv, cfg.weights.lambda_cadv));
        }
        if toggle.co {
            let co = losses::consistency_on_tape(&mut g, gr.q[0], gr.q[1])?;
            terms.push(("co", co, cfg.weights.lambda_co));
        }
        if toggle.orth {
            let orth = losses::orthogonality_on_tape(&mut g, gr.q[0], gr.q[1], k)?;
            terms.push(("orth", orth, cfg.weights.lambda_orth));
        }
        if toggle.cl {
            let cl = losses::class_equivalence_on_tape(&mut g, gr.m[0], gr.m[1], cfg.weights.tau)?;
            terms.push(("cl", cl, cfg.weights.lambda_cl));
        }
        stats = Some(gr.stats);
    }

    let mut values = LossTerms::default();
    for &(name, v, _) in &terms {
        let value = g.value(v).item();
        check_finite(name, value, it)?;
        match name {
            "seg" => values.seg = value,
            "co" => values.co = value,
            "orth" => values.orth = value,
            "cadv_g" => values.cadv_g = value,
            _ => values.cl = value,
        }
    }
    let mut report = losses::total_loss(values, &cfg.weights)?;
    check_finite("total", report.total, it)?;

    if cfg.log_grad_norms {
        let mut norms = LossTerms::default();
        for &(name, v, _) in &terms {
            let gs = g.backward_from(v, scores)?;
            let norm = gs.get(scores).map_or(0.0, Tensor::norm);
            match name {
                "seg" => norms.seg = norm,
                "co" => norms.co = norm,
                "orth" => norms.orth = norm,
                "cadv_g" => norms.cadv_g = norm,
                _ => norms.cl = norm,
            }
        }
        report.grad_norms = Some(norms);
    }

    let weighted: Vec<(Var, f64)> = terms.iter().map(|&(_, v, w)| (v, w)).collect();
    let total = g.weighted_sum(&weighted)?;
    let grads = g.backward(total)?;
    let grad_g = collect_grads(&grads, &pg, state.seg.params());
    let grad_c = collect_grads(&grads, &pc, state.group.params());
    state.opt_g.step(state.seg.params_mut(), &grad_g, lr_g)?;
    state.opt_c.step(state.group.params_mut(), &grad_c, lr_c)?;
    if let Some(s) = stats {
        state.group.update_running_stats(&s);
    }
    state.iteration += 1;

    Ok(StepReport {
        iteration: it,
        lr_g,
        lr_c,
        lr_d,
        loss: report,
        disc: disc_value,
        d_target,
    })
}

/// Trains from `state.iteration` up to `cfg.total_iters`, calling `on_step`
/// after every iteration.
pub fn train(
    state: &mut TrainState,
    data: &Dataset,
    cfg: &TrainConfig,
    on_step: impl FnMut(&TrainState, &StepReport) -> Result<()>,
) -> Result<()> {
    train_until(state, data, cfg, cfg.total_iters, on_step)
}

/// Like [`train`], but stops once `state.iteration` reaches `end`. The
/// schedule still follows `cfg.total_iters`.
pub fn train_until(
    state: &mut TrainState,
    data: &Dataset,
    cfg: &TrainConfig,
    end: u64,
    mut on_step: impl FnMut(&TrainState, &StepReport) -> Result<()>,
) -> Result<()> {
    if data.source_train.is_empty() || data.target_train.is_empty() {
        return Err(Error::Config("training needs source and target images".into()));
    }
    while state.iteration < end.min(cfg.total_iters) {
        let pairs = sample_pairs(&mut state.rng, data.source_train.len(), data.target_train.len(), cfg.batch_size);
        let src: Vec<&Sample> = pairs.iter().map(|&(s, _)| &data.source_train[s]).collect();
        let tgt: Vec<&Sample> = pairs.iter().map(|&(_, t)| &data.target_train[t]).collect();
        let report = train_step(state, &src, &tgt, cfg)?;
        on_step(state, &report)?;
    }
    Ok(())
}
