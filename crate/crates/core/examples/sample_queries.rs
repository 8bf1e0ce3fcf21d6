//! Sample one query per structure and constraint policy from a toy KG and
//! draw a training sample with negatives for each.
//!
//!     cargo run --example sample_queries

use mvkg::kg::generate_toy_kg;
use mvkg::query::{draw_sample, sample_queries, write_queries, ConstraintPolicy, StructureTag};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> mvkg::Result<()> {
    let kg = generate_toy_kg(50, 4, 3, 200, 7)?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut queries = Vec::new();
    for tag in StructureTag::ALL {
        for policy in [ConstraintPolicy::Exact, ConstraintPolicy::Wildcard, ConstraintPolicy::Equal] {
            let q = sample_queries(&kg, tag, policy, 1, &mut rng)?.remove(0);
            let sample = draw_sample(&q, kg.num_entities(), 4, &mut rng)?;
            println!(
                "{tag:>3} {policy:<8} answers {:>2} positive {:>2} negatives {:?}",
                q.answers.as_ref().map_or(0, |a| a.len()),
                sample.positive.0,
                sample.negatives.iter().map(|e| e.0).collect::<Vec<_>>()
            );
            queries.push(q);
        }
    }
    println!();
    write_queries(&mut std::io::stdout().lock(), &queries[..3])
}
