//! Checks shared by the focused test targets and the acceptance run. Each
//! returns whether it passed and a one-line summary.

use std::collections::BTreeSet;
use std::time::Instant;

use mvkg::decoder::score::{relation_distance, score_view};
use mvkg::decoder::Geometry;
use mvkg::embedding::{view_set_encoding, SetEncoder};
use mvkg::encoder::{attention_update, masked_attention};
use mvkg::kg::{generate_toy_kg, ViewId};
use mvkg::model::{loss, loss_vars, Model};
use mvkg::nn::{ParamStore, Tape};
use mvkg::oracle::answer_query;
use mvkg::query::{GroupId, ViewConstraint};
use ndarray::{array, Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

pub struct Outcome {
    pub pass: bool,
    pub detail: String,
}

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
}

/// Set-encoding order invariance, attention against scalar loops, the box
/// distance hand case, the view score against a scalar loop and the loss
/// at zero scores.
pub fn equation_fidelity() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut notes = Vec::new();

    let mut store = ParamStore::new();
    let agg = SetEncoder::new(&mut store, 16, &mut rng);
    let mut set_ok = true;
    for _ in 0..50 {
        let mut views: Vec<ViewId> = (0..rng.gen_range(1..6))
            .map(|_| ViewId(rng.gen_range(0..8)))
            .collect();
        let a = view_set_encoding(&views, &agg, &store).unwrap();
        views.shuffle(&mut rng);
        let b = view_set_encoding(&views, &agg, &store).unwrap();
        set_ok &= a == b;
    }
    notes.push(format!("set-encoding order invariance exact={set_ok}"));

    let (n, d, dh) = (7, 6, 4);
    let z = random(n, d, &mut rng);
    let (wq, wk, wv) = (random(d, dh, &mut rng), random(d, dh, &mut rng), random(d, dh, &mut rng));
    let mask = Array2::from_shape_fn((n, n), |(i, j)| i == j || rng.gen_bool(0.4));
    let c = masked_attention(&z, &mask, &wq, &wk).unwrap();
    let h = attention_update(&c, &z, &wv).unwrap();
    let mut attn_err: f64 = 0.0;
    for i in 0..n {
        let logits: Vec<Option<f64>> = (0..n)
            .map(|j| {
                mask[[i, j]].then(|| {
                    let mut s = 0.0;
                    for t in 0..dh {
                        let (mut q, mut k) = (0.0, 0.0);
                        for u in 0..d {
                            q += z[[i, u]] * wq[[u, t]];
                            k += z[[j, u]] * wk[[u, t]];
                        }
                        s += q * k;
                    }
                    s / (dh as f64).sqrt()
                })
            })
            .collect();
        let max = logits.iter().flatten().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        let total: f64 = logits.iter().flatten().map(|x| (x - max).exp()).sum();
        for j in 0..n {
            let expected = logits[j].map_or(0.0, |x| (x - max).exp() / total);
            attn_err = attn_err.max((c[[i, j]] - expected).abs());
        }
        for t in 0..dh {
            let mut expected = 0.0;
            for j in 0..n {
                let mut v = 0.0;
                for u in 0..d {
                    v += z[[j, u]] * wv[[u, t]];
                }
                expected += c[[i, j]] * v;
            }
            attn_err = attn_err.max((h[[i, t]] - expected).abs());
        }
    }
    notes.push(format!("attention max abs err {attn_err:.2e}"));

    let dist = relation_distance(
        array![0.0, 0.0].view(),
        Some(array![1.0, 1.0].view()),
        array![2.0, 0.0].view(),
        0.5,
    );
    notes.push(format!("box hand case {dist}"));

    let mut view_err: f64 = 0.0;
    for _ in 0..100 {
        let a = Array1::from_shape_fn(8, |_| rng.gen_range(-2.0..2.0));
        let b = Array1::from_shape_fn(8, |_| rng.gen_range(-2.0..2.0));
        let mut s = 0.0;
        for i in 0..8 {
            s += a[i] * b[i];
        }
        view_err = view_err.max((score_view(a.view(), b.view()).unwrap() - s / 8.0).abs());
    }
    notes.push(format!("view score max abs err {view_err:.2e}"));

    let zero = loss(0.0, &[0.0; 5]).unwrap();
    let mut tape = Tape::new();
    let sims = tape.constant(Array2::zeros((6, 1)));
    let lv = loss_vars(&mut tape, sims, &[vec![0; 6]]).unwrap();
    let zero_tape = tape.scalar(lv);
    let two_log_two = 2.0 * 2f64.ln();
    let loss_err = (zero - two_log_two).abs().max((zero_tape - two_log_two).abs());
    notes.push(format!("loss at zero {zero:.12}"));

    let secs = start.elapsed().as_secs_f64();
    notes.push(format!("{secs:.2}s"));
    Outcome {
        pass: set_ok
            && attn_err <= 1e-6
            && dist == 1.5
            && view_err <= 1e-6
            && loss_err <= 1e-9
            && secs < 10.0,
        detail: notes.join(", "),
    }
}

/// 500 queries on a 30-entity, 3-view KG against brute-force enumeration.
pub fn oracle_agreement() -> Outcome {
    let start = Instant::now();
    let kg = generate_toy_kg(30, 3, 3, 40, 5).unwrap();
    let queries = mixed_queries(&kg, 500, 9);
    let kinds: BTreeSet<_> = queries
        .iter()
        .flat_map(|q| q.edges.iter().map(|e| e.constraint.kind()))
        .collect();
    let tags: BTreeSet<_> = queries.iter().map(|q| q.structure).collect();
    let mut agree = 0;
    let mut non_empty = 0;
    for q in &queries {
        let fast = answer_query(&kg, q).unwrap();
        let slow = brute_force_answers(&kg, q);
        non_empty += usize::from(!slow.is_empty());
        agree += usize::from(fast == slow);
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome {
        pass: agree == queries.len() && tags.len() == 7 && kinds.len() == 3 && secs < 120.0,
        detail: format!(
            "{agree}/{} agree ({non_empty} non-empty, {} shapes, {} constraint kinds), {secs:.1}s",
            queries.len(),
            tags.len(),
            kinds.len()
        ),
    }
}

/// The captain/win query on the bundled fixture.
pub fn fig1_semantics() -> Outcome {
    let kg = fig1();
    let equal = captain_win(&kg, ViewConstraint::Equal { group: GroupId(0) });
    let wildcard = captain_win(&kg, ViewConstraint::Wildcard);
    let eq = labels(&kg, &answer_query(&kg, &equal).unwrap());
    let wc = labels(&kg, &answer_query(&kg, &wildcard).unwrap());
    let set = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<BTreeSet<_>>();
    let pass = eq == set(&["LaLiga", "Copa del Rey"])
        && wc == set(&["LaLiga", "Copa del Rey", "Copa America"]);
    Outcome {
        pass,
        detail: format!("equal {eq:?}, wildcard {wc:?}"),
    }
}

/// Finite differences of the batch loss for each parameter group at d = 8,
/// plus the loss alone at k = 2.
pub fn gradient_checks() -> Outcome {
    let start = Instant::now();
    let groups: [(&str, &[&str]); 6] = [
        ("encoder", &["encoder."]),
        ("relation decoder", &["decoder.relation."]),
        ("view decoder", &["decoder.view."]),
        ("merger", &["decoder.merger."]),
        ("set encoder", &["setenc."]),
        ("semantic", &["semantic_table"]),
    ];
    let kg = generate_toy_kg(16, 3, 3, 20, 2).unwrap();
    let mut worst: f64 = 0.0;
    let mut notes = Vec::new();
    for geometry in [Geometry::Vector, Geometry::Box] {
        let mut model = Model::for_kg(small_config(geometry), &kg, 17).unwrap();
        // Push the merger away from its small initialization.
        for id in model.store.ids().collect::<Vec<_>>() {
            if model.store.name(id).starts_with("decoder.merger") {
                model.store.get_mut(id).mapv_inplace(|x| x * 10.0 + 0.01);
            }
        }
        let batch = samples(&kg, 4, 3);
        let analytic = analytic_gradients(&model, &kg, &batch);
        let skeleton = model.clone();
        let f = |store: &ParamStore| {
            let mut m = skeleton.clone();
            m.store = store.clone();
            batch_loss(&m, &kg, &batch)
        };
        for (name, prefixes) in groups {
            let (err, n) = gradient_error(&mut model.store, prefixes, 6, 5, &f, &analytic);
            worst = worst.max(err);
            notes.push(format!("{geometry}/{name} {err:.1e} ({n})"));
        }
    }

    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let sim_id = store.add("sims", random(6, 1, &mut rng) * 3.0);
    let candidates = vec![vec![0; 3], vec![0; 3]];
    let loss_of = |s: &ParamStore| {
        let mut tape = Tape::new();
        let sims = tape.param(s, sim_id);
        let l = loss_vars(&mut tape, sims, &candidates).unwrap();
        tape.scalar(l)
    };
    let mut tape = Tape::new();
    let sims = tape.param(&store, sim_id);
    let l = loss_vars(&mut tape, sims, &candidates).unwrap();
    let grads = tape.backward(l);
    let analytic = [("sims".to_owned(), grads.get(sim_id).unwrap().clone())].into();
    let (loss_err, _) = gradient_error(&mut store, &["sims"], 6, 1, &loss_of, &analytic);
    notes.push(format!("loss k=2 {loss_err:.1e}"));

    let secs = start.elapsed().as_secs_f64();
    Outcome {
        pass: worst < 1e-3 && loss_err < 1e-4 && secs < 60.0,
        detail: format!("{}, {secs:.1}s", notes.join(", ")),
    }
}
