//! Load a quadruple TSV and print its counts and per-entity view sets.
//!
//!     cargo run --example ingest_stats [path.tsv]

use std::path::PathBuf;

use mvkg::kg::{EntityId, MultiViewKg};

fn main() -> mvkg::Result<()> {
    let path = std::env::args_os()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/fig1.tsv"));
    let kg = MultiViewKg::load(&path)?;
    println!("entities\trelations\tfacts\tviews");
    println!("{}", kg.stats());
    for e in 0..kg.num_entities() {
        let views: Vec<&str> = kg
            .view_set(EntityId(e))
            .iter()
            .map(|v| kg.views().label(v.0).unwrap_or("?"))
            .collect();
        println!("{:<28} {}", kg.entities().label(e).unwrap_or("?"), views.join(", "));
    }
    Ok(())
}
