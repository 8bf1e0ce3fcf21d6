//! Train on a toy KG, print the monitored metrics, then rank answers for a
//! few training queries.
//!
//!     cargo run --release --example train_toy [steps]

use mvkg::kg::generate_toy_kg;
use mvkg::query::{sample_queries, ConstraintPolicy, StructureTag};
use mvkg::train::{train_reporting, TrainingConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> mvkg::Result<()> {
    let steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1500);
    let kg = generate_toy_kg(40, 3, 3, 120, 0)?;
    let config = TrainingConfig {
        steps,
        k: 16,
        eval_interval: 250,
        pool_per_structure: 300,
        monitor_per_structure: 25,
        learning_rate: 5e-3,
        ..TrainingConfig::default()
    };
    let outcome = train_reporting(&kg, &config, &mut |r| {
        println!(
            "step {:>5} loss {:.4} mrr {:.3} hit@5 {:.3}",
            r.step,
            r.loss.unwrap_or(f64::NAN),
            r.mrr,
            r.hit(5)
        );
    })?;

    let ctx = outcome.model.context(&kg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for q in sample_queries(&kg, StructureTag::P2, ConstraintPolicy::Equal, 3, &mut rng)? {
        let answers = q.answers.clone().unwrap_or_default();
        println!("query from {:?}, {} answers", kg.entities().label(q.anchors[0].0), answers.len());
        for a in outcome.model.rank_answers(&ctx, &q, 5)? {
            let mark = if answers.contains(&a.entity) { "*" } else { " " };
            println!(
                "  {mark} {:<6} sim {:>8.3} (relation {:>8.3}, view {:>6.3})",
                kg.entities().label(a.entity.0).unwrap_or("?"),
                a.sim,
                a.sim_r,
                a.sim_theta
            );
        }
    }
    Ok(())
}
