mod common;

use common::*;
use mvkg::kg::generate_toy_kg;
use mvkg::oracle::{answer_query, answer_views};
use mvkg::query::{GroupId, ViewConstraint};

#[test]
fn oracle_matches_brute_force_enumeration() {
    let out = checks::oracle_agreement();
    assert!(out.pass, "{}", out.detail);
}

#[test]
fn answer_views_keys_are_the_answers() {
    let kg = generate_toy_kg(30, 3, 3, 40, 6).unwrap();
    for q in mixed_queries(&kg, 500, 21) {
        let answers = answer_query(&kg, &q).unwrap();
        let views = answer_views(&kg, &q).unwrap();
        assert_eq!(views.keys().copied().collect::<std::collections::BTreeSet<_>>(), answers);
        assert!(views.values().all(|v| !v.is_empty()));
    }
}

#[test]
fn captain_win_equal_excludes_national_title() {
    let out = checks::fig1_semantics();
    assert!(out.pass, "{}", out.detail);
}

#[test]
fn captain_win_equal_answers_map_to_their_season() {
    let kg = fig1();
    let q = captain_win(&kg, ViewConstraint::Equal { group: GroupId(0) });
    let views = answer_views(&kg, &q).unwrap();
    let season = |v: &str| kg.view(v).unwrap();
    assert_eq!(views[&kg.entity("LaLiga").unwrap()], [season("2018-19")].into());
    assert_eq!(views[&kg.entity("Copa del Rey").unwrap()], [season("2017-18")].into());
}

#[test]
fn fixture_ingests_with_both_views_for_messi() {
    let kg = fig1();
    let messi = kg.entity("Lionel Messi").unwrap();
    assert_eq!(kg.view_set(messi).len(), 3);
    assert_eq!(kg.stats().to_string(), "9\t4\t11\t3");
}
