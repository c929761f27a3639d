//! Soft grouping of two random score maps, with the group-level losses.
//!
//! ```text
//! cargo run --release --example grouping -- 4
//! ```

use cdga::grouping::{self, BnMode, GroupInput, GroupNet, GroupNetConfig};
use cdga::losses;
use cdga::seg_model::ScoreMap;
use cdga::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> cdga::Result<()> {
    let groups: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(4);
    let (classes, h, w) = (5, 16, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let net = GroupNet::new(
        GroupNetConfig {
            classes,
            groups,
            hidden: 16,
            input: GroupInput::Prob,
            head_init_std: 1.0,
        },
        &mut rng,
    )?;

    let mut pooled = Vec::new();
    for domain in ["source", "target"] {
        let score = ScoreMap::from_scores(Tensor::from_fn([1, classes, h, w], |_| rng.random_range(-3.0..3.0)))?;
        let assign = net.group_assign(&score, BnMode::Eval)?;
        let feats = grouping::group_features(&score, &assign)?;
        let q: Vec<_> = feats.iter().map(grouping::class_distribution).collect::<cdga::Result<_>>()?;
        let m: Vec<_> = feats.iter().map(grouping::max_class_scores).collect::<cdga::Result<_>>()?;

        println!("{domain}");
        for (k, qk) in q.iter().enumerate() {
            let share = assign.assign.data()[k * h * w..(k + 1) * h * w].iter().sum::<f64>() / (h * w) as f64;
            let row: Vec<String> = qk.0.iter().map(|v| format!("{v:.3}")).collect();
            println!("  group {k}: pixel share {share:.3}  Q = [{}]", row.join(", "));
        }
        // the groups split every pixel, so the Q rows add up to the class means
        let total: f64 = q.iter().flat_map(|qk| qk.0.iter()).sum();
        println!("  sum of Q over groups and classes: {total:.6}");
        pooled.push((q, m));
    }

    let (qs, ms) = &pooled[0];
    let (qt, mt) = &pooled[1];
    println!("consistency     {:.6}", losses::semantic_consistency_loss(qs, qt)?);
    println!("orthogonality   {:.6}", losses::orthogonality_loss(qs, qt)?);
    println!("class equiv.    {:.6}", losses::class_equivalence_loss(ms, mt, 0.5)?);
    Ok(())
}
