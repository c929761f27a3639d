//! Compares tape gradients of the group-level losses with central finite
//! differences, all the way back to the raw scores.
//!
//! ```text
//! cargo run --release --example gradcheck
//! ```

use cdga::autograd::{Graph, Var};
use cdga::gradcheck::{central_differences, compare, DEFAULT_STEP};
use cdga::grouping::{group_tensors, BnMode, GroupInput, GroupNet, GroupNetConfig};
use cdga::losses;
use cdga::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GROUPS: usize = 2;

fn main() -> cdga::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let net = GroupNet::new(
        GroupNetConfig {
            classes: 3,
            groups: GROUPS,
            hidden: 4,
            input: GroupInput::Prob,
            head_init_std: 0.7,
        },
        &mut rng,
    )?;
    // one source and one target image of 4x4 scores
    let scores = Tensor::from_fn([2, 3, 4, 4], |_| rng.random_range(-2.0..2.0));

    let loss = |g: &mut Graph, s: Var, which: &str| -> cdga::Result<Var> {
        let prob = g.softmax_channels(s)?;
        let p = net.params().bind(g, false);
        let (assign, _) = net.forward(g, &p, prob, BnMode::Eval)?;
        let t = group_tensors(g, prob, assign)?;
        let (qs, qt) = (g.slice_batch(t.q, 0, 1)?, g.slice_batch(t.q, 1, 2)?);
        let (ms, mt) = (g.slice_batch(t.m, 0, 1)?, g.slice_batch(t.m, 1, 2)?);
        match which {
            "consistency" => losses::consistency_on_tape(g, qs, qt),
            "orthogonality" => losses::orthogonality_on_tape(g, qs, qt, GROUPS),
            _ => losses::class_equivalence_on_tape(g, ms, mt, 0.3),
        }
    };

    for which in ["consistency", "orthogonality", "class equivalence"] {
        let mut g = Graph::new();
        let s = g.param(scores.clone());
        let l = loss(&mut g, s, which)?;
        let analytic = g.backward(l)?.get_or_zeros(s, &scores).into_data();
        let value = |x: &Tensor| -> cdga::Result<f64> {
            let mut g = Graph::new();
            let s = g.constant(x.clone());
            let l = loss(&mut g, s, which)?;
            Ok(g.value(l).item())
        };
        let coords: Vec<usize> = (0..scores.numel()).collect();
        let numeric = central_differences(value, &scores, DEFAULT_STEP, &coords)?;
        let c = compare(&analytic, &numeric);
        println!(
            "{which:>18}: relative error {:.2e}, max abs error {:.2e}, |grad| {:.3e}",
            c.relative_error, c.max_abs_error, c.analytic_norm
        );
    }
    Ok(())
}
