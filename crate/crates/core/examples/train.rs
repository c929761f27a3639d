//! Trains the full method on the in-memory synthetic dataset and reports
//! source and target validation mIoU.
//!
//! ```text
//! cargo run --release --example train -- configs/desk.toml 300
//! ```

use std::path::PathBuf;

use cdga::config::RunConfig;
use cdga::data::Dataset;
use cdga::evaluation::{compute_iou, evaluate_segmentation};
use cdga::trainer::{train, TrainState};

fn main() -> cdga::Result<()> {
    let mut args = std::env::args().skip(1);
    let path = args.next().map(PathBuf::from);
    let iters = args.next().map_or(Ok(300), |s| s.parse::<u64>()).map_err(|e| cdga::Error::Config(e.to_string()))?;
    let cfg = RunConfig::resolve(path.as_deref(), &[format!("iters={iters}")])?;
    let data = Dataset::synthetic(&cfg.data.synthetic)?;

    let mut state = TrainState::new(&cfg.model, &cfg.train)?;
    train(&mut state, &data, &cfg.train, |s, r| {
        if s.iteration % 50 == 0 {
            println!(
                "iter {:5}  seg {:.4}  co {:.4}  orth {:.4}  adv {:.4}  cl {:.4}  D {:.4}",
                s.iteration, r.loss.seg, r.loss.co, r.loss.orth, r.loss.cadv_g, r.loss.cl, r.disc
            );
        }
        Ok(())
    })?;

    for (name, set) in [("source", &data.source_val), ("target", &data.target_val)] {
        let report = compute_iou(&evaluate_segmentation(&state.seg, set)?)?;
        println!("{name} mIoU {:.2}", report.miou * 100.0);
    }
    Ok(())
}
