//! Train on the views before a pivot and score exact-view queries in each
//! later view, which the model never saw facts for.
//!
//!     cargo run --release --example unobserved_views [steps]

use mvkg::kg::{generate_toy_kg, ViewId};
use mvkg::protocol::unobserved_view_protocol;
use mvkg::train::TrainingConfig;

fn main() -> mvkg::Result<()> {
    let steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1000);
    let kg = generate_toy_kg(60, 4, 6, 150, 4)?;
    let config = TrainingConfig {
        steps,
        k: 16,
        eval_interval: steps,
        pool_per_structure: 300,
        monitor_per_structure: 5,
        learning_rate: 5e-3,
        ..TrainingConfig::default()
    };
    let mut trace = Vec::new();
    let (_, reports) = unobserved_view_protocol(&kg, ViewId(3), &config, 60, Some(&mut trace))?;
    for r in &reports {
        println!(
            "view {} (distance {}): {} queries, mrr {:.3}, hit@5 {:.3}",
            r.label,
            r.distance,
            r.report.queries,
            r.report.mrr,
            r.report.hit(5)
        );
    }
    let unseen = trace
        .iter()
        .flat_map(|e| &e.pos_enc_views)
        .filter(|v| v.0 >= 3)
        .count();
    println!("{unseen} decoder steps encoded a view absent from training");
    Ok(())
}
