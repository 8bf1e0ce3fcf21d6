//! Log answer HIT@5 and view HIT@1 during training and report the first
//! step at which each reaches 80% of its final value.
//!
//!     cargo run --release --example training_dynamics [steps]

use mvkg::eval::EvalOptions;
use mvkg::kg::generate_toy_kg;
use mvkg::train::{monitor_slice, train_on, training_pool, Monitor, TrainingConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn first_reaching(curve: &[(usize, f64)]) -> Option<usize> {
    let last = curve.last()?.1;
    curve.iter().find(|(_, v)| *v >= 0.8 * last).map(|(s, _)| *s)
}

fn main() -> mvkg::Result<()> {
    let steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let kg = generate_toy_kg(60, 4, 3, 300, 5)?;
    let config = TrainingConfig {
        steps,
        k: 16,
        eval_interval: (steps / 20).max(1),
        pool_per_structure: 400,
        ..TrainingConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let pool = training_pool(&kg, config.pool_per_structure, config.k, &mut rng)?;
    let monitor = Monitor {
        kg: &kg,
        queries: monitor_slice(&pool, 40),
        options: EvalOptions { view_k: 1, ..EvalOptions::default() },
    };
    let (mut answer, mut view) = (Vec::new(), Vec::new());
    train_on(&kg, &config, &pool, Some(&monitor), &mut |r| {
        let v = r.view_hit_at_k.unwrap_or(0.0);
        println!("{:>6} hit@5 {:.3} view_hit@1 {:.3} {}", r.step, r.hit(5), v, "#".repeat((v * 40.0) as usize));
        answer.push((r.step, r.hit(5)));
        view.push((r.step, v));
    })?;
    println!("80% of final: answers at step {:?}, views at step {:?}", first_reaching(&answer), first_reaching(&view));
    Ok(())
}
