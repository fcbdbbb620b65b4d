use std::collections::BTreeSet;

use kgrag_core::backend::{Embedder, StubEmbedder};
use kgrag_core::corpus::{split_recursive, SplitterConfig};
use kgrag_core::eval::{bucket_index, bucketize, recall_at_k};
use kgrag_core::kg::{ExtractionRecord, KnowledgeGraph};
use kgrag_core::retrieval::{cosine, rrf_fuse, RankedList, Scored};
use kgrag_core::text::tokenize;
use proptest::prelude::*;

fn text_strategy() -> impl Strategy<Value = String> {
    let atom = prop_oneof![
        4 => "[a-z]{1,12}",
        1 => Just(" ".to_string()),
        1 => Just("\n".to_string()),
        1 => Just("\n\n".to_string()),
        1 => Just(". ".to_string()),
        1 => Just("。".to_string()),
        1 => "[電費停水錶]{1,6}",
    ];
    prop::collection::vec(atom, 0..400).prop_map(|v| v.join(" "))
}

fn splitter_strategy() -> impl Strategy<Value = SplitterConfig> {
    (20usize..300).prop_flat_map(|max| {
        (Just(max), 0usize..max / 2).prop_map(|(max_chars, overlap_chars)| SplitterConfig {
            max_chars,
            overlap_chars,
            ..SplitterConfig::default()
        })
    })
}

fn ranked(ids: &[String]) -> RankedList {
    RankedList {
        items: ids.iter().enumerate().map(|(i, id)| Scored { id: id.clone(), score: -(i as f64) }).collect(),
        k: ids.len(),
    }
}

fn id_list() -> impl Strategy<Value = Vec<String>> {
    prop::collection::btree_set("[a-h][0-9]", 0..12).prop_shuffle_vec()
}

trait ShuffleVec {
    fn prop_shuffle_vec(self) -> BoxedStrategy<Vec<String>>;
}

impl<S: Strategy<Value = BTreeSet<String>> + 'static> ShuffleVec for S {
    fn prop_shuffle_vec(self) -> BoxedStrategy<Vec<String>> {
        self.prop_map(|s| s.into_iter().collect::<Vec<_>>()).prop_shuffle().boxed()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn chunks_respect_max_chars(text in text_strategy(), cfg in splitter_strategy()) {
        let chunks = split_recursive(&text, &cfg).unwrap();
        for c in &chunks {
            prop_assert!(c.text.chars().count() <= cfg.max_chars, "{} > {}", c.text.chars().count(), cfg.max_chars);
            prop_assert!(!c.text.is_empty());
        }
    }

    #[test]
    fn chunks_reconstruct_source(text in text_strategy(), cfg in splitter_strategy()) {
        let chunks = split_recursive(&text, &cfg).unwrap();
        let chars: Vec<char> = text.chars().collect();
        let mut rebuilt = String::new();
        let mut covered = 0usize;
        for c in &chunks {
            let (start, end) = c.char_span;
            prop_assert!(start <= covered, "gap before chunk at {start}");
            let slice: String = chars[start..end].iter().collect();
            prop_assert_eq!(&slice, &c.text);
            rebuilt.extend(&chars[covered.max(start)..end]);
            covered = covered.max(end);
        }
        prop_assert_eq!(rebuilt, text);
    }

    #[test]
    fn splitting_is_deterministic(text in text_strategy(), cfg in splitter_strategy()) {
        prop_assert_eq!(split_recursive(&text, &cfg).unwrap(), split_recursive(&text, &cfg).unwrap());
    }

    #[test]
    fn rrf_is_invariant_under_list_permutation(lists in prop::collection::vec(id_list(), 1..5), k in 1usize..30) {
        let ranked: Vec<RankedList> = lists.iter().map(|l| ranked(l)).collect();
        let mut reversed = ranked.clone();
        reversed.reverse();
        let a = rrf_fuse(&ranked, 60, k);
        let b = rrf_fuse(&reversed, 60, k);
        prop_assert_eq!(&a, &b);
        prop_assert!(a.is_well_formed());
        let union: BTreeSet<&String> = lists.iter().flatten().collect();
        prop_assert_eq!(a.len(), union.len().min(k));
    }

    #[test]
    fn recall_is_monotone_in_k(ids in id_list(), gold in prop::collection::btree_set("[a-h][0-9]", 1..5), k in 1usize..12) {
        let list = ranked(&ids);
        let r1 = recall_at_k(&list, &gold, k);
        let r2 = recall_at_k(&list, &gold, k + 1);
        prop_assert!(r1.fractional <= r2.fractional);
        prop_assert!(r1.full <= r2.full);
        prop_assert!((0.0..=1.0).contains(&r1.fractional));
    }

    #[test]
    fn buckets_sum_to_hundred(scores in prop::collection::vec(0.0f64..=1.0, 1..200)) {
        let b = bucketize(&scores);
        let total: f64 = b.iter().sum();
        prop_assert!((total - 100.0).abs() <= 0.3, "{b:?}");
        for s in &scores {
            prop_assert!(bucket_index(*s) < 5);
        }
    }

    #[test]
    fn stub_embeddings_are_unit_and_deterministic(text in "\\PC{0,200}") {
        let e = StubEmbedder::default();
        let v = e.vector(&text);
        prop_assert_eq!(v.len(), 256);
        let norm: f64 = v.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
        prop_assert!((norm - 1.0).abs() < 1e-5);
        prop_assert_eq!(v, e.embed_one(&text).unwrap());
    }
}

/// Token multisets with disjoint hash buckets have cosine exactly 0; adding
/// shared tokens never lowers the similarity.
#[test]
fn stub_overlap_monotonicity() {
    let e = StubEmbedder::default();
    let vocab: Vec<String> = (0..400).map(|i| format!("w{i}")).collect();
    let mut used = BTreeSet::new();
    let mut disjoint = Vec::new();
    for w in &vocab {
        if used.insert(e.bucket(w)) {
            disjoint.push(w.clone());
        }
        if disjoint.len() == 24 {
            break;
        }
    }
    assert_eq!(disjoint.len(), 24);
    let (left, right) = disjoint.split_at(12);
    let a = left.join(" ");
    let b = right.join(" ");
    assert_eq!(cosine(&e.vector(&a), &e.vector(&b)), 0.0);

    let mut prev = 0.0;
    for shared in 1..=12 {
        let b = [&left[..shared], &right[shared..]].concat().join(" ");
        let c = cosine(&e.vector(&a), &e.vector(&b));
        assert!(c > prev - 1e-12, "shared={shared} {c} < {prev}");
        prev = c;
    }
    assert!((prev - 1.0).abs() < 1e-6);
    assert_eq!(tokenize(&a).len(), 12);
}

const NAMES: [&str; 9] = ["Meter", "meter", "METER ", "tariff", "Tariff", "bill", "outage", "deposit", "ｍｅｔｅｒ"];

fn name(g: &KnowledgeGraph, id: &str) -> String {
    g.entity(id).unwrap().norm_name.clone()
}

fn random_batch(seed: u64) -> Vec<ExtractionRecord> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for _ in 0..rng.gen_range(1..12) {
        let origin = format!("c{}", rng.gen_range(0..5));
        if rng.gen_bool(0.5) {
            out.push(ExtractionRecord::Entity {
                name: NAMES[rng.gen_range(0..NAMES.len())].into(),
                etype: "t".into(),
                description: format!("desc {}", rng.gen_range(0..3)),
                origin_chunk: origin,
            });
        } else {
            out.push(ExtractionRecord::Relation {
                src: NAMES[rng.gen_range(0..NAMES.len())].into(),
                dst: NAMES[rng.gen_range(0..NAMES.len())].into(),
                description: ["affects", "Affects ", "billed by"][rng.gen_range(0..3)].into(),
                keywords: vec!["k".into()],
                origin_chunk: origin,
            });
        }
    }
    out
}

#[test]
fn graph_invariants_hold_over_random_batches() {
    let e = StubEmbedder::default();
    let mut g = KnowledgeGraph::new();
    for seed in 0..200 {
        g.upsert_records(&random_batch(seed), &e).unwrap();
        g.check_invariants().unwrap();
        let norms: BTreeSet<&str> = g.entities().values().map(|x| x.norm_name.as_str()).collect();
        assert_eq!(norms.len(), g.entities().len());
        for r in g.relations().values() {
            assert!(g.entity(&r.src).is_some() && g.entity(&r.dst).is_some());
            assert_ne!(r.src, r.dst);
        }
    }
    assert!(g.entities().len() <= 6);
}

#[test]
fn graph_merge_is_order_independent_for_membership() {
    // Relations to unknown entities are skipped, so both orders start from a
    // graph that already knows every name.
    let e = StubEmbedder::default();
    let seed_batch: Vec<ExtractionRecord> = NAMES
        .iter()
        .map(|n| ExtractionRecord::Entity {
            name: n.to_string(),
            etype: "t".into(),
            description: String::new(),
            origin_chunk: "c9".into(),
        })
        .collect();
    let mut base = KnowledgeGraph::new();
    base.upsert_records(&seed_batch, &e).unwrap();
    for seed in 0..50 {
        let a = random_batch(seed);
        let b = random_batch(seed + 1000);
        let mut g1 = base.clone();
        g1.upsert_records(&a, &e).unwrap();
        g1.upsert_records(&b, &e).unwrap();
        let mut g2 = base.clone();
        g2.upsert_records(&b, &e).unwrap();
        g2.upsert_records(&a, &e).unwrap();
        let key = |g: &KnowledgeGraph| {
            let ents: BTreeSet<(String, BTreeSet<String>)> =
                g.entities().values().map(|x| (x.norm_name.clone(), x.source_chunks.clone())).collect();
            let rels: BTreeSet<(String, String, BTreeSet<String>)> =
                g.relations().values().map(|r| (name(g, &r.src), name(g, &r.dst), r.source_chunks.clone())).collect();
            (ents, rels)
        };
        assert_eq!(key(&g1), key(&g2), "seed {seed}");
    }
}
