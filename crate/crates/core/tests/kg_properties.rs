mod support;

use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;
use routerkgqa::kg::{EntityId, KnowledgeGraph, NodeRef, RelationId, Triple};
use support::*;

fn random_path(r: &mut Rng8, len: usize) -> Vec<RelationId> {
    (0..len).map(|_| rel(LINK_RELATIONS.choose(r).unwrap())).collect()
}

fn some_entity(r: &mut Rng8, g: &KnowledgeGraph) -> EntityId {
    g.entities().iter().cloned().collect::<Vec<_>>().choose(r).unwrap().clone()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn indexes_match_a_rebuild(seed in any::<u64>()) {
        let g = random_graph(&mut rng(seed));
        prop_assert!(g.indexes_consistent());
        let reparsed = KnowledgeGraph::from_triples(g.triples().iter().cloned());
        prop_assert_eq!(reparsed.triples(), g.triples());
    }

    #[test]
    fn reach_composes(seed in any::<u64>(), a in 0usize..3, b in 0usize..3) {
        let mut r = rng(seed);
        let g = random_graph(&mut r);
        let s = some_entity(&mut r, &g);
        let (p1, p2) = (random_path(&mut r, a), random_path(&mut r, b));
        let whole: Vec<RelationId> = p1.iter().chain(&p2).cloned().collect();
        let mut composed = BTreeSet::new();
        for n in g.reach(&s, &p1) {
            if let NodeRef::Entity(e) = n {
                composed.extend(g.reach(&e, &p2));
            } else if p2.is_empty() {
                composed.insert(n);
            }
        }
        prop_assert_eq!(g.reach(&s, &whole), composed);
    }

    #[test]
    fn reach_lands_on_objects_and_grows_with_triples(seed in any::<u64>(), len in 1usize..4) {
        let mut r = rng(seed);
        let g = random_graph(&mut r);
        let s = some_entity(&mut r, &g);
        let p = random_path(&mut r, len);
        let objects: BTreeSet<&NodeRef> = g.triples().iter().map(|t| &t.object).collect();
        let before = g.reach(&s, &p);
        prop_assert!(before.iter().all(|n| objects.contains(n)));
        let mut triples: Vec<Triple> = g.triples().iter().cloned().collect();
        for _ in 0..r.gen_range(1..10) {
            let a = some_entity(&mut r, &g);
            let b = some_entity(&mut r, &g);
            triples.push(Triple::new(a, p[r.gen_range(0..p.len())].clone(), NodeRef::Entity(b)));
        }
        let bigger = KnowledgeGraph::from_triples(triples);
        prop_assert!(before.is_subset(&bigger.reach(&s, &p)));
    }

    #[test]
    fn outgoing_relations_distribute_over_union(seed in any::<u64>()) {
        let mut r = rng(seed);
        let g = random_graph(&mut r);
        let all: Vec<EntityId> = g.entities().iter().cloned().collect();
        let a: Vec<EntityId> = all.choose_multiple(&mut r, 3).cloned().collect();
        let b: Vec<EntityId> = all.choose_multiple(&mut r, 3).cloned().collect();
        let union: BTreeSet<EntityId> = a.iter().chain(&b).cloned().collect();
        let mut split = g.outgoing_relations(a.iter());
        split.extend(g.outgoing_relations(b.iter()));
        prop_assert_eq!(g.outgoing_relations(union.iter()), split);
    }
}
