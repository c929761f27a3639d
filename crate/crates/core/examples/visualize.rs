//! Trains briefly, then writes group maps, a 2-D projection of the output
//! space, and per-group diagnostics.
//!
//! ```text
//! cargo run --release --example visualize -- /tmp/cdga-vis
//! ```

use std::path::PathBuf;

use cdga::config::RunConfig;
use cdga::data::{label_palette, Dataset};
use cdga::evaluation::{collect_group_diagnostics, project_outputs, render_group_map, ProjectionInput};
use cdga::grouping::BnMode;
use cdga::seg_model::Image;
use cdga::trainer::{train, TrainState};
use cdga::Error;

const DESK: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/desk.toml");

fn main() -> cdga::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("cdga-vis"));
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let cfg = RunConfig::resolve(Some(DESK.as_ref()), &["iters=100".into(), "K=4".into()])?;
    let data = Dataset::synthetic(&cfg.data.synthetic)?;
    let mut state = TrainState::new(&cfg.model, &cfg.train)?;
    train(&mut state, &data, &cfg.train, |_, _| Ok(()))?;

    let mut probs = Vec::new();
    for (name, sample) in [("source", &data.source_val[0]), ("target", &data.target_val[0])] {
        let score = state.seg.forward_segmentation(&Image::batch(&[&sample.image])?)?;
        let assign = state.group.group_assign(&score, BnMode::Eval)?;
        render_group_map(&assign)?.save(&out.join(format!("groups_{name}.png")))?;
        probs.push((score.prob().clone(), sample));
    }
    let inputs: Vec<ProjectionInput> = probs
        .iter()
        .map(|(prob, s)| ProjectionInput {
            prob,
            labels: s.label.as_ref().map_or(&[][..], |l| l.labels()),
            domain: s.image.domain,
        })
        .collect();
    let projection = project_outputs(&inputs, 200, 0)?;
    projection.write_csv(&out.join("projection.csv"))?;
    let svg = out.join("projection.svg");
    std::fs::write(&svg, projection.render_svg(&label_palette(data.classes))).map_err(|e| Error::io(&svg, e))?;

    let diag = collect_group_diagnostics(&state.seg, &state.group, &data.source_val, &data.target_val)?;
    for (k, d) in diag.distances.iter().enumerate() {
        println!("group {k}: share {:.3}, |Q_S - Q_T| {d:.4}", diag.pixel_share[k]);
    }
    println!("collapsed: {}", diag.collapsed);
    println!("wrote {}", out.display());
    Ok(())
}
