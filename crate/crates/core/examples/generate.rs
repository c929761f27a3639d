//! Writes the synthetic two-domain dataset and prints per-class pixel shares.
//!
//! ```text
//! cargo run --release --example generate -- /tmp/cdga-data
//! ```

use std::path::PathBuf;

use cdga::data::{class_shares, generate_synthetic, Dataset, SyntheticSpec};

fn main() -> cdga::Result<()> {
    let root = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("cdga-synthetic"));
    let spec = SyntheticSpec::default();
    let manifest = generate_synthetic(&spec, &root)?;
    println!("wrote {} items to {}", manifest.items.len(), root.display());

    let ds = Dataset::load(&root, &manifest)?;
    for (name, share) in ds.class_names.iter().zip(class_shares(&ds.source_train, ds.classes)) {
        println!("{name:>12}: {:5.2}%", share * 100.0);
    }
    Ok(())
}
