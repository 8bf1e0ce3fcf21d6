//! Symbolic answers of `F.C. Barcelona -captain-> v -win-> ?` on the bundled
//! fixture under each kind of view constraint.
//!
//!     cargo run --example view_constraints

use mvkg::kg::{MultiViewKg, ViewId};
use mvkg::oracle::answer_views;
use mvkg::query::{GroupId, Query, QueryEdge, StructureTag, ViewConstraint};

fn query(kg: &MultiViewKg, constraint: ViewConstraint) -> Query {
    let edge = |source, target, name| QueryEdge {
        source,
        target,
        relation: kg.relation(name).expect("relation in fixture"),
        constraint,
    };
    Query {
        structure: StructureTag::P2,
        anchors: vec![kg.entity("F.C. Barcelona").expect("anchor in fixture")],
        edges: vec![edge(0, 1, "captain"), edge(1, 2, "win")],
        answers: None,
    }
}

fn main() -> mvkg::Result<()> {
    let kg = MultiViewKg::load(concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/fig1.tsv"))?;
    let cases = [
        ("exact 2018-19", ViewConstraint::Exact { view: ViewId(1) }),
        ("wildcard", ViewConstraint::Wildcard),
        ("equal", ViewConstraint::Equal { group: GroupId(0) }),
    ];
    for (name, constraint) in cases {
        println!("{name}:");
        for (entity, views) in answer_views(&kg, &query(&kg, constraint))? {
            let views: Vec<&str> = views.iter().map(|v| kg.views().label(v.0).unwrap_or("?")).collect();
            println!("  {} via {}", kg.entities().label(entity.0).unwrap_or("?"), views.join(", "));
        }
    }
    Ok(())
}
