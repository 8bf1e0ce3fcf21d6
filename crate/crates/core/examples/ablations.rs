//! Train each ablation on the same toy KG and compare MRR on cross-view
//! queries whose answers were removed from training.
//!
//!     cargo run --release --example ablations [steps]

use mvkg::eval::{evaluate, EvalOptions};
use mvkg::kg::generate_toy_kg;
use mvkg::model::Ablation;
use mvkg::protocol::held_out_queries;
use mvkg::query::{holdout_split, ConstraintPolicy, StructureTag};
use mvkg::train::{train, TrainingConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> mvkg::Result<()> {
    let steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1000);
    let kg = generate_toy_kg(60, 4, 3, 300, 1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (train_kg, full) = holdout_split(&kg, 0.3, &mut rng)?;
    let tags = [StructureTag::P2, StructureTag::I2, StructureTag::I3];
    let queries = held_out_queries(&train_kg, &full, &tags, &[ConstraintPolicy::CrossView], 30, &mut rng)?;
    println!("{} held-out cross-view queries", queries.len());
    for ablation in Ablation::ALL {
        let mut config = TrainingConfig {
            steps,
            k: 16,
            eval_interval: steps,
            pool_per_structure: 400,
            monitor_per_structure: 5,
            ..TrainingConfig::default()
        };
        config.model.ablation = ablation;
        let outcome = train(&train_kg, &config)?;
        let report = evaluate(&outcome.model, &full, &queries, &EvalOptions::default(), None)?;
        println!("{ablation:<16} mrr {:.3} hit@5 {:.3}", report.mrr, report.hit(5));
    }
    Ok(())
}
