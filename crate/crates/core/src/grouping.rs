//! Cross-domain grouping network and the per-group tensors derived from it.
//!
//! The grouping network maps each pixel's class vector to a soft assignment
//! over `K` groups (pointwise conv, ReLU, batch norm, pointwise conv,
//! softmax). Multiplying the assignment into the class probabilities gives
//! one masked class map per group, which is then summarized by average
//! pooling (class distribution) and max pooling (max class scores).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{BatchStats, Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Bound, Conv2d, Init, ParamStore};
use crate::seg_model::ScoreMap;
use crate::tensor::Tensor;

/// Which view of the segmentation output the grouping network reads.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupInput {
    #[default]
    Prob,
    Scores,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics and report them.
    Train,
    /// Normalize with the running averages.
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GroupNetConfig {
    pub classes: usize,
    pub groups: usize,
    pub hidden: usize,
    pub input: GroupInput,
    /// Standard deviation of the second conv's initial weights; 0 starts
    /// every pixel at exactly the uniform assignment.
    pub head_init_std: f64,
}

impl Default for GroupNetConfig {
    fn default() -> Self {
        Self {
            classes: 5,
            groups: 8,
            hidden: 64,
            input: GroupInput::Prob,
            head_init_std: 0.1,
        }
    }
}

impl GroupNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.groups < 1 {
            return Err(Error::Config(format!("number of groups must be >= 1, got {}", self.groups)));
        }
        if !(self.head_init_std.is_finite() && self.head_init_std >= 0.0) {
            return Err(Error::Config("head_init_std must be finite and >= 0".into()));
        }
        if self.classes == 0 || self.hidden == 0 {
            return Err(Error::Config("grouping network needs classes >= 1 and hidden >= 1".into()));
        }
        Ok(())
    }
}

/// Soft group membership `[N, K, H, W]`; sums to one over `K` per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupProbabilities {
    pub assign: Tensor,
}

impl GroupProbabilities {
    pub fn groups(&self) -> usize {
        self.assign.shape()[1]
    }
}

/// Class probabilities masked by one group's membership, `[C, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupFeature {
    pub feat: Tensor,
}

/// Spatial mean of a [`GroupFeature`], one entry per class.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassDistribution(pub Vec<f64>);

/// Spatial max of a [`GroupFeature`], one entry per class.
#[derive(Clone, Debug, PartialEq)]
pub struct MaxClassScores(pub Vec<f64>);

#[derive(Clone, Debug)]
pub struct GroupNet {
    config: GroupNetConfig,
    params: ParamStore,
    buffers: ParamStore,
    embed: Conv2d,
    norm: BatchNorm2d,
    head: Conv2d,
}

impl GroupNet {
    /// First conv He-initialized, second conv drawn with a small standard
    /// deviation so groups start close to uniform but not identical.
    pub fn new(config: GroupNetConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let head_init = if config.head_init_std == 0.0 { Init::Zeros } else { Init::Normal(config.head_init_std) };
        let mut params = ParamStore::new();
        let mut buffers = ParamStore::new();
        let embed = Conv2d::new(&mut params, "group.embed", config.classes, config.hidden, 1, 1, 0, Init::He, rng);
        let norm = BatchNorm2d::new(&mut params, &mut buffers, "group.norm", config.hidden);
        let head = Conv2d::new(&mut params, "group.head", config.hidden, config.groups, 1, 1, 0, head_init, rng);
        Ok(Self {
            config,
            params,
            buffers,
            embed,
            norm,
            head,
        })
    }

    pub fn config(&self) -> &GroupNetConfig {
        &self.config
    }

    pub fn groups(&self) -> usize {
        self.config.groups
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn buffers(&self) -> &ParamStore {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut ParamStore {
        &mut self.buffers
    }

    pub fn head_weight_id(&self) -> crate::nn::ParamId {
        self.head.weight
    }

    pub fn head_bias_id(&self) -> crate::nn::ParamId {
        self.head.bias
    }

    /// Group assignment on the tape. `input` is `[N, classes, H, W]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, input: Var, mode: BnMode) -> Result<(Var, Option<BatchStats>)> {
        let (_, c, _, _) = g.value(input).dims4()?;
        if c != self.config.classes {
            return Err(Error::shape("group_assign", format!("{} classes", self.config.classes), c));
        }
        let z = self.embed.forward(g, p, input)?;
        let z = g.relu(z);
        let (z, stats) = match mode {
            BnMode::Train => {
                let (z, stats) = self.norm.forward_train(g, p, z)?;
                (z, Some(stats))
            }
            BnMode::Eval => (self.norm.forward_eval(g, p, &self.buffers, z)?, None),
        };
        let logits = self.head.forward(g, p, z)?;
        Ok((g.softmax_channels(logits)?, stats))
    }

    pub fn update_running_stats(&mut self, stats: &BatchStats) {
        self.norm.update_running(&mut self.buffers, stats);
    }

    /// Picks the tensor the network reads from a score map.
    pub fn select_input(&self, score: &ScoreMap) -> Tensor {
        match self.config.input {
            GroupInput::Prob => score.prob().clone(),
            GroupInput::Scores => score.scores().clone(),
        }
    }

    pub fn group_assign(&self, score: &ScoreMap, mode: BnMode) -> Result<GroupProbabilities> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(self.select_input(score));
        let (assign, _) = self.forward(&mut g, &p, x, mode)?;
        Ok(GroupProbabilities {
            assign: g.value(assign).clone(),
        })
    }
}

/// Tape handles for the derived per-group tensors of a batch.
#[derive(Clone, Copy, Debug)]
pub struct GroupTensors {
    /// `[N, K*C, H, W]`
    pub feat: Var,
    /// Average-pooled features, `[N, K*C]`.
    pub q: Var,
    /// Max-pooled features, `[N, K*C]`.
    pub m: Var,
    pub groups: usize,
    pub classes: usize,
}

pub fn group_tensors(g: &mut Graph, prob: Var, assign: Var) -> Result<GroupTensors> {
    let (_, classes, _, _) = g.value(prob).dims4()?;
    let (_, groups, _, _) = g.value(assign).dims4()?;
    let feat = g.group_features(prob, assign)?;
    let q = g.spatial_mean(feat)?;
    let m = g.spatial_max(feat)?;
    Ok(GroupTensors {
        feat,
        q,
        m,
        groups,
        classes,
    })
}

/// Masked class maps of the first image in the batch, one per group.
pub fn group_features(score: &ScoreMap, assign: &GroupProbabilities) -> Result<Vec<GroupFeature>> {
    let (n, c, h, w) = score.prob().dims4()?;
    let (an, k, ah, aw) = assign.assign.dims4()?;
    if (an, ah, aw) != (n, h, w) || n != 1 {
        return Err(Error::shape(
            "group_features",
            format!("single image, assign [1, K, {h}, {w}]"),
            format!("{:?} vs {:?}", score.prob().shape(), assign.assign.shape()),
        ));
    }
    let mut g = Graph::new();
    let pv = g.constant(score.prob().clone());
    let av = g.constant(assign.assign.clone());
    let f = g.group_features(pv, av)?;
    let data = g.value(f).data();
    let plane = c * h * w;
    (0..k)
        .map(|ki| {
            Ok(GroupFeature {
                feat: Tensor::new([c, h, w], data[ki * plane..(ki + 1) * plane].to_vec())?,
            })
        })
        .collect()
}

fn pooled(feat: &GroupFeature, max: bool) -> Result<Vec<f64>> {
    let (c, h, w) = match feat.feat.shape() {
        &[c, h, w] => (c, h, w),
        s => return Err(Error::shape("group feature", "[classes, height, width]", format!("{s:?}"))),
    };
    let mut g = Graph::new();
    let x = g.constant(feat.feat.clone().reshape([1, c, h, w])?);
    let y = if max { g.spatial_max(x)? } else { g.spatial_mean(x)? };
    Ok(g.value(y).data().to_vec())
}

pub fn class_distribution(feat: &GroupFeature) -> Result<ClassDistribution> {
    pooled(feat, false).map(ClassDistribution)
}

pub fn max_class_scores(feat: &GroupFeature) -> Result<MaxClassScores> {
    pooled(feat, true).map(MaxClassScores)
}

/// Splits a `[N, K*C]` pooled tensor into per-image, per-group vectors.
pub fn split_groups(pooled: &Tensor, groups: usize) -> Vec<Vec<Vec<f64>>> {
    let (n, kc) = (pooled.shape()[0], pooled.shape()[1]);
    let c = kc / groups;
    (0..n)
        .map(|ni| {
            (0..groups)
                .map(|ki| pooled.data()[ni * kc + ki * c..ni * kc + (ki + 1) * c].to_vec())
                .collect()
        })
        .collect()
}
