//! Point-to-box distances by hand, then the same short training run under
//! vector and box geometry.
//!
//!     cargo run --release --example geometry [steps]

use mvkg::decoder::score::relation_distance;
use mvkg::decoder::Geometry;
use mvkg::kg::generate_toy_kg;
use mvkg::train::{train, TrainingConfig};
use ndarray::array;

fn main() -> mvkg::Result<()> {
    let center = array![0.0, 0.0];
    let offset = array![1.0, 1.0];
    for point in [array![0.5, 0.0], array![1.0, 1.0], array![2.0, 0.0], array![3.0, -3.0]] {
        let boxed = relation_distance(center.view(), Some(offset.view()), point.view(), 0.5);
        let l1 = relation_distance(center.view(), None, point.view(), 0.5);
        println!("point {point}: box {boxed:.2}, vector {l1:.2}");
    }

    let steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(800);
    let kg = generate_toy_kg(40, 3, 3, 120, 2)?;
    for geometry in [Geometry::Vector, Geometry::Box] {
        let mut config = TrainingConfig {
            steps,
            k: 16,
            eval_interval: steps,
            pool_per_structure: 300,
            monitor_per_structure: 25,
            learning_rate: 5e-3,
            ..TrainingConfig::default()
        };
        config.model.geometry = geometry;
        let started = std::time::Instant::now();
        let outcome = train(&kg, &config)?;
        let last = outcome.reports.last().expect("one report at the final step");
        println!(
            "{geometry:<6} loss {:.4} -> {:.4}, training hit@5 {:.3}, {:.1}s",
            outcome.losses[0],
            last.loss.unwrap_or(f64::NAN),
            last.hit(5),
            started.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
