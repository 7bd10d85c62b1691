mod common;

use std::collections::BTreeMap;

use common::{random_graph, rng};
use hlmg::dataset::{
    build_dataset, load, make_ood_variant, save, split_sizes, GenConfig, OodKind, Split, TaskSpec,
};
use hlmg::graph::{oracle, Graph, Task, TaskQuery};
use hlmg::text::{
    detokenize, normalize, random_names, serialize, tokenize, Dialect, NamePolicy, Owner,
    SerializeOptions, SpanKind, Vocabulary,
};
use proptest::prelude::*;

fn small(task: Task, size: usize, seed: u64) -> hlmg::dataset::Dataset {
    let spec = TaskSpec {
        size,
        ..TaskSpec::desk(task)
    };
    build_dataset(&spec, &GenConfig::default(), seed).unwrap()
}

#[test]
fn cgdl_text_of_a_small_graph() {
    let mut g = Graph::from_edges(3, [(0, 1), (0, 2)]).unwrap();
    g.set_node_features(1, vec![("color".into(), "red".into())]).unwrap();
    let s = serialize(&g, &TaskQuery::Cycle, &SerializeOptions::new(Dialect::Cgdl)).unwrap();
    let text = s.text();
    assert!(text.contains("Node 0 is connected to nodes 1 and 2."), "{text}");
    assert!(text.contains("Node 1 features: color: red."), "{text}");
    let spans = s.spans();
    let kinds: Vec<SpanKind> = spans.iter().map(|s| s.1).collect();
    assert!(kinds.contains(&SpanKind::Feature));
    assert_eq!(spans.last().unwrap().0, Owner::Query);
}

#[test]
fn every_dialect_gives_each_node_a_segment() {
    let g = Graph::from_edges(4, [(0, 1), (1, 2)]).unwrap();
    for d in [Dialect::Cgdl, Dialect::AdjList, Dialect::Edges] {
        let s = serialize(&g, &TaskQuery::Components, &SerializeOptions::new(d)).unwrap();
        let vocab = Vocabulary::build([&s]).unwrap();
        let t = tokenize(&s, &vocab, 4096).unwrap();
        assert_eq!(t.nodes(), vec![0, 1, 2, 3], "{d:?}");
    }
}

#[test]
fn distance_desk_dataset_has_six_balanced_classes() {
    let d = small(Task::ShortestDistance, 600, 4);
    assert_eq!(d.spec.num_classes, 6);
    for (split, size) in split_sizes(600) {
        let mut counts = BTreeMap::new();
        for s in d.split(split) {
            *counts.entry(s.label()).or_insert(0usize) += 1;
        }
        assert_eq!(counts.len(), 6, "{split}");
        let (lo, hi) = (counts.values().min().unwrap(), counts.values().max().unwrap());
        assert!(hi - lo <= 1, "{split}: {counts:?}");
        assert_eq!(counts.values().sum::<usize>(), size);
    }
}

#[test]
fn labels_and_ground_truth_match_the_oracle() {
    for task in [Task::Reachable, Task::NodeDegree, Task::EdgeCount] {
        let d = small(task, 240, 8);
        for s in &d.samples {
            let o = oracle(&s.graph, &s.query).unwrap();
            assert_eq!(Some(s.label()), d.spec.class_of(o.answer));
            assert_eq!(s.gt_nodes(), o.gt_nodes.as_ref());
        }
    }
}

#[test]
fn test_graphs_use_the_largest_size() {
    let d = small(Task::Cycle, 100, 2);
    assert!(d.split(Split::Test).iter().all(|s| s.graph.num_nodes() == d.spec.max_nodes));
}

#[test]
fn generation_is_deterministic_and_round_trips_through_jsonl() {
    let a = small(Task::EdgeExistence, 60, 11);
    let b = small(Task::EdgeExistence, 60, 11);
    assert_eq!(a, b);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    save(&a, &path).unwrap();
    let back = load(&path).unwrap();
    assert_eq!(back.samples.len(), a.samples.len());
    for (x, y) in a.samples.iter().zip(&back.samples) {
        assert_eq!(x.tokens, y.tokens);
        assert_eq!(x.graph.edges().collect::<Vec<_>>(), y.graph.edges().collect::<Vec<_>>());
    }
    let first = std::fs::read(&path).unwrap();
    save(&back, &path).unwrap();
    assert_eq!(first, std::fs::read(&path).unwrap());
}

#[test]
fn tampered_label_is_rejected_with_its_line() {
    let a = small(Task::Cycle, 40, 1);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    save(&a, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let line = &mut lines[3];
    let flipped = if line.contains("\"label\":0") {
        line.replace("\"label\":0", "\"label\":1")
    } else {
        line.replace("\"label\":1", "\"label\":0")
    };
    *line = flipped;
    std::fs::write(&path, lines.join("\n") + "\n").unwrap();
    let err = load(&path).unwrap_err().to_string();
    assert!(err.contains("line 4"), "{err}");
}

#[test]
fn ood_variants_keep_labels_and_ground_truth() {
    let d = small(Task::ShortestDistance, 120, 3);
    for kind in [OodKind::RenamedNodes, OodKind::DialectShift(Dialect::Edges)] {
        let o = make_ood_variant(&d, &kind, 9).unwrap();
        for (a, b) in d.split(Split::Test).iter().zip(o.split(Split::Test)) {
            assert_eq!(a.label(), b.label());
            assert_eq!(a.gt_nodes(), b.gt_nodes());
            assert_ne!(a.serialized.text(), b.serialized.text());
        }
    }
}

#[test]
fn random_names_are_short_unique_and_not_numbers() {
    let names = random_names(40, 5);
    let unique: std::collections::BTreeSet<&String> = names.iter().collect();
    assert_eq!(unique.len(), 40);
    for n in &names {
        assert!((1..=4).contains(&n.len()));
        assert!(n.parse::<u64>().is_err());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn spans_tile_the_sequence_and_detokenize_round_trips(seed in any::<u64>(), dialect in 0usize..3) {
        let dialect = [Dialect::Cgdl, Dialect::AdjList, Dialect::Edges][dialect];
        let g = random_graph(&mut rng(seed), 10);
        let opts = SerializeOptions {
            names: NamePolicy::RandomString { seed },
            ..SerializeOptions::new(dialect)
        };
        let s = serialize(&g, &TaskQuery::EdgeCount, &opts).unwrap();
        let vocab = Vocabulary::build([&s]).unwrap();
        let t = tokenize(&s, &vocab, 4096).unwrap();
        let mut at = 0;
        for span in &t.spans {
            prop_assert_eq!(span.start, at);
            prop_assert!(span.end > span.start);
            at = span.end;
        }
        prop_assert_eq!(at, t.ids.len());
        prop_assert_eq!(detokenize(&t.ids, &vocab), normalize(&s.text()));
    }

    #[test]
    fn node_order_only_reorders_segments(seed in any::<u64>()) {
        let g = random_graph(&mut rng(seed), 10);
        let n = g.num_nodes();
        let mut order: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng(seed ^ 7));
        let base = serialize(&g, &TaskQuery::Components, &SerializeOptions::new(Dialect::Cgdl)).unwrap();
        let moved = serialize(&g, &TaskQuery::Components, &SerializeOptions {
            order: Some(order),
            ..SerializeOptions::new(Dialect::Cgdl)
        }).unwrap();
        let mut a: Vec<String> = base.spans().iter().map(|s| format!("{:?}{}", s.0, s.2)).collect();
        let mut b: Vec<String> = moved.spans().iter().map(|s| format!("{:?}{}", s.0, s.2)).collect();
        a.sort();
        b.sort();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn too_long_sequences_are_rejected(seed in any::<u64>()) {
        let g = random_graph(&mut rng(seed), 10);
        let s = serialize(&g, &TaskQuery::Cycle, &SerializeOptions::new(Dialect::Cgdl)).unwrap();
        let vocab = Vocabulary::build([&s]).unwrap();
        let full = tokenize(&s, &vocab, 4096).unwrap().ids.len();
        prop_assert!(tokenize(&s, &vocab, full).is_ok());
        prop_assert!(tokenize(&s, &vocab, full - 1).is_err());
    }
}
