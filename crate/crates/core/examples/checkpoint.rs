//! Save a briefly trained model, reload it and confirm identical rankings;
//! then show the error for a KG with a different vocabulary.
//!
//!     cargo run --example checkpoint

use mvkg::checkpoint::{load_model, save_model};
use mvkg::kg::generate_toy_kg;
use mvkg::query::{sample_queries, ConstraintPolicy, StructureTag};
use mvkg::train::{train, TrainingConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> mvkg::Result<()> {
    let kg = generate_toy_kg(30, 3, 2, 60, 0)?;
    let mut config = TrainingConfig {
        steps: 50,
        k: 8,
        batch_size: 32,
        eval_interval: 50,
        pool_per_structure: 50,
        monitor_per_structure: 5,
        ..TrainingConfig::default()
    };
    config.model.d = 16;
    let model = train(&kg, &config)?.model;
    let path = std::env::temp_dir().join("mvkg-example-checkpoint.json");
    save_model(&model, &path)?;
    let loaded = load_model(&path, &kg)?;

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let q = sample_queries(&kg, StructureTag::P2, ConstraintPolicy::Wildcard, 1, &mut rng)?.remove(0);
    let before = model.rank_answers(&model.context(&kg)?, &q, 5)?;
    let after = loaded.rank_answers(&loaded.context(&kg)?, &q, 5)?;
    println!("{} bytes, rankings identical: {}", std::fs::metadata(&path)?.len(), before == after);

    let other = generate_toy_kg(31, 3, 2, 60, 0)?;
    if let Err(e) = load_model(&path, &other) {
        println!("expected failure: {e}");
    }
    std::fs::remove_file(&path)?;
    Ok(())
}
