use std::collections::BTreeMap;
use std::path::Path;

use chrono::NaiveDate;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use hallu_probe::harvest::{self, ArticleSnapshot, Section, SentenceCandidate};

fn fixture() -> Vec<ArticleSnapshot> {
    hallu_probe::jsonl::read(&Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/recency_corpus.jsonl")).unwrap()
}

fn cutoff() -> NaiveDate {
    "2023-09-01".parse().unwrap()
}

/// Rebuilds one snapshot per article from its candidates: each sentence
/// becomes a paragraph carrying its own citation markers.
fn as_snapshots(candidates: &[SentenceCandidate], originals: &[ArticleSnapshot]) -> Vec<ArticleSnapshot> {
    let mut by_article: BTreeMap<&str, Vec<&SentenceCandidate>> = BTreeMap::new();
    for c in candidates {
        by_article.entry(&c.article_id).or_default().push(c);
    }
    by_article
        .into_iter()
        .map(|(id, cs)| {
            let original = originals.iter().find(|a| a.article_id == id).unwrap();
            let paragraphs = cs
                .iter()
                .map(|c| {
                    let marks: String = c.reference_ids.iter().map(|r| format!("<ref name=\"{r}\"/>")).collect();
                    format!("{}{marks}", c.sentence)
                })
                .collect();
            ArticleSnapshot {
                sections: vec![Section { heading: "Candidates".into(), paragraphs }],
                references: original.references.iter().filter(|r| cs.iter().any(|c| c.reference_ids.contains(&r.ref_id))).cloned().collect(),
                ..original.clone()
            }
        })
        .collect()
}

fn key(c: &SentenceCandidate) -> (String, String, Vec<String>) {
    (c.article_id.clone(), c.sentence.clone(), c.reference_ids.clone())
}

#[test]
fn harvesting_its_own_output_changes_nothing() {
    let articles = fixture();
    let first = harvest::harvest(articles.iter().cloned().map(Ok), cutoff());
    assert!(!first.candidates.is_empty());
    let again = harvest::harvest(as_snapshots(&first.candidates, &articles).into_iter().map(Ok), cutoff());
    assert!(again.diagnostics.is_empty());
    let a: Vec<_> = first.candidates.iter().map(key).collect();
    let b: Vec<_> = again.candidates.iter().map(key).collect();
    assert_eq!(a, b);
}

#[test]
fn candidate_set_ignores_input_order() {
    let mut articles = fixture();
    let reference = harvest::harvest(articles.iter().cloned().map(Ok), cutoff());
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..5 {
        articles.shuffle(&mut rng);
        let out = harvest::harvest(articles.iter().cloned().map(Ok), cutoff());
        assert_eq!(out.candidates, reference.candidates);
    }
}

#[test]
fn later_cutoff_only_removes_candidates() {
    let articles = fixture();
    let early = harvest::harvest(articles.iter().cloned().map(Ok), cutoff());
    let late = harvest::harvest(articles.iter().cloned().map(Ok), "2024-01-15".parse().unwrap());
    assert!(late.candidates.len() < early.candidates.len());
    assert!(late.candidates.iter().all(|c| early.candidates.contains(c)));
}
