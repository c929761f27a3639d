//! Short K sweep: one row per group count, median target mIoU over seeds.
//!
//! ```text
//! cargo run --release --example ablation -- 200
//! ```

use cdga::ablation::{parse_grid, run_ablation};
use cdga::config::RunConfig;
use cdga::data::Dataset;
use cdga::evaluation::format_table;

const DESK: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/desk.toml");

fn main() -> cdga::Result<()> {
    let iters: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    let base = RunConfig::resolve(Some(DESK.as_ref()), &[format!("iters={iters}")])?;
    let data = Dataset::synthetic(&base.data.synthetic)?;
    let rows = parse_grid("K=1,2,4")?;
    let results = run_ablation(&base, &data, &rows, &[0, 1], |row, outcome| {
        let miou = outcome.result.as_ref().map(|r| format!("{:.2}", r.miou * 100.0));
        println!("{} seed {}: {}", row.name, outcome.seed, miou.unwrap_or_else(|e| e.clone()));
    })?;
    let table: Vec<_> = results.into_iter().map(|r| r.row).collect();
    print!("{}", format_table(&table, &data.class_names));
    Ok(())
}
