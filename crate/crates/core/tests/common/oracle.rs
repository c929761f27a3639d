//! Loop-level reimplementations that library results are checked against.

use cdga::discriminator::make_conditional_input;
use cdga::evaluation::{compute_iou, ConfusionMatrix};
use cdga::grouping::{BnMode, ClassDistribution, GroupFeature, GroupInput, GroupNet, GroupNetConfig};
use cdga::nn::BN_EPS;
use cdga::seg_model::{ScoreMap, IGNORE};
use cdga::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Number of per-class IoU values (plus the mean) that differ from set
/// counting on one random 16x16 instance. `None` when no class is defined.
pub fn iou_mismatches(seed: u64) -> Option<usize> {
    let classes = 5;
    let mut r = rng(seed);
    let truth: Vec<u8> = (0..256)
        .map(|_| if r.random_bool(0.05) { IGNORE } else { r.random_range(0..classes as u8) })
        .collect();
    let pred: Vec<u8> = (0..256).map(|_| r.random_range(0..classes as u8)).collect();
    let mut cm = ConfusionMatrix::new(classes);
    cm.update(&truth, &pred).unwrap();
    let report = compute_iou(&cm).ok()?;

    let mut defined = Vec::new();
    let mut wrong = 0;
    for u in 0..classes as u8 {
        let valid = |i: &usize| truth[*i] != IGNORE;
        let inter = (0..256).filter(valid).filter(|&i| truth[i] == u && pred[i] == u).count();
        let union = (0..256).filter(valid).filter(|&i| truth[i] == u || pred[i] == u).count();
        let expected = (union > 0).then(|| inter as f64 / union as f64);
        wrong += usize::from(report.per_class[u as usize] != expected);
        defined.extend(expected);
    }
    let miou = defined.iter().sum::<f64>() / defined.len() as f64;
    Some(wrong + usize::from(report.miou != miou))
}

/// A grouping net with perturbed weights and non-trivial BN statistics.
pub fn random_group_net(classes: usize, groups: usize, r: &mut ChaCha8Rng) -> GroupNet {
    let mut net = GroupNet::new(
        GroupNetConfig {
            classes,
            groups,
            hidden: 6,
            input: GroupInput::Prob,
            head_init_std: 0.5,
        },
        r,
    )
    .unwrap();
    for t in net.params_mut().tensors_mut() {
        for v in t.data_mut() {
            *v += r.random_range(-0.3..0.3);
        }
    }
    for t in net.buffers_mut().tensors_mut() {
        for v in t.data_mut() {
            *v = r.random_range(0.2..1.5);
        }
    }
    net
}

/// Largest deviation of `group_assign` from per-pixel dense matrix products.
pub fn group_assign_max_error(seed: u64) -> f64 {
    let (c, k, h, w) = (3, 4, 8, 8);
    let mut r = rng(100 + seed);
    let net = random_group_net(c, k, &mut r);
    let score = ScoreMap::from_scores(Tensor::from_fn([1, c, h, w], |_| r.random_range(-3.0..3.0))).unwrap();
    let got = net.group_assign(&score, BnMode::Eval).unwrap();

    let p = net.params();
    let get = |name: &str| p.by_name(name).unwrap().data().to_vec();
    let (w1, b1) = (get("group.embed.weight"), get("group.embed.bias"));
    let (gamma, beta) = (get("group.norm.gamma"), get("group.norm.beta"));
    let (w2, b2) = (get("group.head.weight"), get("group.head.bias"));
    let buf = net.buffers();
    let mean = buf.by_name("group.norm.running_mean").unwrap().data();
    let var = buf.by_name("group.norm.running_var").unwrap().data();
    let hidden = b1.len();
    let prob = score.prob().data();
    let mut worst = 0.0f64;
    for px in 0..h * w {
        let x: Vec<f64> = (0..c).map(|u| prob[u * h * w + px]).collect();
        let z: Vec<f64> = (0..hidden)
            .map(|o| {
                let a = (b1[o] + (0..c).map(|u| w1[o * c + u] * x[u]).sum::<f64>()).max(0.0);
                gamma[o] * (a - mean[o]) / (var[o] + BN_EPS).sqrt() + beta[o]
            })
            .collect();
        let logits: Vec<f64> = (0..k).map(|g| b2[g] + (0..hidden).map(|o| w2[g * hidden + o] * z[o]).sum::<f64>()).collect();
        let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = logits.iter().map(|l| (l - top).exp()).sum();
        for g in 0..k {
            let expected = (logits[g] - top).exp() / denom;
            worst = worst.max((expected - got.assign.data()[g * h * w + px]).abs());
        }
    }
    worst
}

/// Largest deviation of the conditional input from `feat[u] * q[v]`.
pub fn outer_product_max_error(seed: u64) -> f64 {
    let (c, h, w) = (3, 4, 4);
    let mut r = rng(300 + seed);
    let feat = GroupFeature {
        feat: Tensor::from_fn([c, h, w], |_| r.random_range(0.0..1.0)),
    };
    let q = ClassDistribution((0..c).map(|_| r.random_range(0.0..1.0)).collect());
    let cond = make_conditional_input(&feat, &q).unwrap();
    assert_eq!(cond.cond.shape(), &[c * c, h, w]);
    let mut worst = 0.0f64;
    for u in 0..c {
        for v in 0..c {
            for px in 0..h * w {
                let expected = feat.feat.data()[u * h * w + px] * q.0[v];
                worst = worst.max((cond.cond.data()[(u * c + v) * h * w + px] - expected).abs());
            }
        }
    }
    worst
}
