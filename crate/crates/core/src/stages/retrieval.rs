//! Lexical-overlap retrieval over an indexed document store: indexing,
//! top-k selection, deterministic tie-breaking, and optional plan-based
//! reranking.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::canonical::tokenize;
use crate::error::{Error, Result};
use crate::workflow::{MemoryArtifact, PlanArtifact, Provenance, Query, Snippet};

use super::MemoryOutput;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Doc {
    pub doc_id: String,
    pub content: String,
    pub key_terms: BTreeSet<String>,
}

/// Indexed retrieval store. Immutable after setup; poisoning happens at
/// setup time and marks the inserted documents.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryStore {
    pub docs: Vec<Doc>,
    pub poisoned_ids: BTreeSet<String>,
}

impl MemoryStore {
    pub fn empty() -> Self {
        MemoryStore::default()
    }

    pub fn is_poisoned(&self, doc_id: &str) -> bool {
        self.poisoned_ids.contains(doc_id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scoring {
    LexicalOverlap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TieBreak {
    DocIdAscending,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetrievalConfig {
    pub k: u32,
    pub scoring: Scoring,
    pub rerank: bool,
    pub tie_break: TieBreak,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            k: 3,
            scoring: Scoring::LexicalOverlap,
            rerank: false,
            tie_break: TieBreak::DocIdAscending,
        }
    }
}

/// Index a corpus of `(doc_id, content)` pairs. Key terms are the lowercased
/// alphanumeric tokens of each document.
pub fn index_corpus(docs: &[(String, String)]) -> Result<MemoryStore> {
    let mut seen = BTreeSet::new();
    let mut indexed = Vec::with_capacity(docs.len());
    for (doc_id, content) in docs {
        if !seen.insert(doc_id.clone()) {
            return Err(Error::Load(format!("duplicate doc_id: {doc_id}")));
        }
        indexed.push(Doc {
            doc_id: doc_id.clone(),
            content: content.clone(),
            key_terms: tokenize(content).into_iter().collect(),
        });
    }
    Ok(MemoryStore { docs: indexed, poisoned_ids: BTreeSet::new() })
}

fn overlap(query_terms: &BTreeSet<String>, key_terms: &BTreeSet<String>) -> f64 {
    if query_terms.is_empty() {
        return 0.0;
    }
    let hits = query_terms.iter().filter(|t| key_terms.contains(*t)).count();
    hits as f64 / query_terms.len() as f64
}

/// Score every document against the query-plus-plan term set. Exposed for
/// poisoning analysis and fixture validation.
pub fn score_docs(store: &MemoryStore, query_text: &str, plan_text: &str) -> Vec<(String, f64)> {
    let query_terms: BTreeSet<String> = tokenize(query_text)
        .into_iter()
        .chain(tokenize(plan_text))
        .collect();
    store
        .docs
        .iter()
        .map(|d| (d.doc_id.clone(), overlap(&query_terms, &d.key_terms)))
        .collect()
}

/// Top-k retrieval: overlap scoring over query plus plan terms, ties broken
/// by ascending doc id, zero-score documents never returned. When reranking
/// is enabled the selected top-k is re-sorted by overlap with the plan text
/// alone and the reported scores are the rerank scores.
pub fn retrieve(
    store: &MemoryStore,
    q: &Query,
    p: &PlanArtifact,
    cfg: &RetrievalConfig,
    step: u32,
) -> MemoryOutput {
    let mut scored: Vec<(&Doc, f64)> = {
        let query_terms: BTreeSet<String> = tokenize(&q.text)
            .into_iter()
            .chain(tokenize(&p.text))
            .collect();
        store
            .docs
            .iter()
            .map(|d| (d, overlap(&query_terms, &d.key_terms)))
            .filter(|(_, s)| *s > 0.0)
            .collect()
    };
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .expect("scores are finite")
            .then_with(|| a.0.doc_id.cmp(&b.0.doc_id))
    });
    scored.truncate(cfg.k as usize);

    if cfg.rerank {
        let plan_terms: BTreeSet<String> = tokenize(&p.text).into_iter().collect();
        for (doc, score) in scored.iter_mut() {
            *score = overlap(&plan_terms, &doc.key_terms);
        }
        scored.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .expect("scores are finite")
                .then_with(|| a.0.doc_id.cmp(&b.0.doc_id))
        });
    }

    let snippets: Vec<Snippet> = scored
        .iter()
        .map(|(doc, score)| Snippet {
            doc_id: doc.doc_id.clone(),
            content: doc.content.clone(),
            score: *score,
        })
        .collect();
    let snippet_provenance = scored
        .iter()
        .map(|(doc, _)| {
            if store.is_poisoned(&doc.doc_id) {
                Provenance::AttackedMemory
            } else {
                Provenance::Clean
            }
        })
        .collect();
    MemoryOutput {
        artifact: MemoryArtifact { step, snippets, k_requested: cfg.k },
        snippet_provenance,
    }
}

/// Memory stage: a retrieval configuration bound to a store.
pub struct Retriever {
    pub store: std::sync::Arc<MemoryStore>,
    pub cfg: RetrievalConfig,
}

impl Retriever {
    pub fn retrieve(&self, q: &Query, p: &PlanArtifact, step: u32) -> MemoryOutput {
        retrieve(&self.store, q, p, &self.cfg, step)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workflow::{Gold, TaskKind};

    fn query(text: &str) -> Query {
        Query {
            id: "q".into(),
            text: text.into(),
            task_kind: TaskKind::QA,
            gold: Gold::Answer { value: String::new() },
        }
    }

    fn corpus() -> Vec<(String, String)> {
        vec![
            ("a".to_string(), "eiffel tower height".to_string()),
            ("b".to_string(), "paris".to_string()),
        ]
    }

    #[test]
    fn index_tokenizes_and_preserves_ids() {
        let store = index_corpus(&corpus()).unwrap();
        assert_eq!(store.docs.len(), 2);
        assert_eq!(
            store.docs[0].key_terms,
            ["eiffel", "tower", "height"].iter().map(|s| s.to_string()).collect()
        );
        assert!(index_corpus(&[]).unwrap().docs.is_empty());
    }

    #[test]
    fn duplicate_ids_rejected() {
        let dup = vec![
            ("a".to_string(), "x".to_string()),
            ("a".to_string(), "y".to_string()),
        ];
        assert!(index_corpus(&dup).is_err());
    }

    #[test]
    fn overlap_scoring_and_top_k() {
        let store = index_corpus(&corpus()).unwrap();
        let scores = score_docs(&store, "eiffel tower height", "");
        assert_eq!(scores[0], ("a".to_string(), 1.0));
        assert_eq!(scores[1], ("b".to_string(), 0.0));
        let cfg = RetrievalConfig { k: 1, ..Default::default() };
        let out = retrieve(&store, &query("eiffel tower height"), &PlanArtifact::empty(0), &cfg, 0);
        assert_eq!(out.artifact.snippets.len(), 1);
        assert_eq!(out.artifact.snippets[0].doc_id, "a");
        assert_eq!(out.artifact.snippets[0].score, 1.0);
    }

    #[test]
    fn equal_scores_break_ties_by_doc_id() {
        let docs = vec![
            ("zz".to_string(), "alpha beta".to_string()),
            ("aa".to_string(), "alpha gamma".to_string()),
        ];
        let store = index_corpus(&docs).unwrap();
        let out = retrieve(
            &store,
            &query("alpha"),
            &PlanArtifact::empty(0),
            &RetrievalConfig::default(),
            0,
        );
        let ids: Vec<&str> = out.artifact.snippets.iter().map(|s| s.doc_id.as_str()).collect();
        assert_eq!(ids, vec!["aa", "zz"]);
    }

    #[test]
    fn empty_store_gives_empty_artifact() {
        let out = retrieve(
            &MemoryStore::empty(),
            &query("anything"),
            &PlanArtifact::empty(0),
            &RetrievalConfig::default(),
            0,
        );
        assert!(out.artifact.snippets.is_empty());
        assert_eq!(out.artifact.k_requested, 3);
    }

    #[test]
    fn rerank_orders_by_plan_overlap() {
        let docs = vec![
            ("a".to_string(), "shared plus planword".to_string()),
            ("b".to_string(), "shared other filler".to_string()),
        ];
        let store = index_corpus(&docs).unwrap();
        let cfg = RetrievalConfig { rerank: true, ..Default::default() };
        let plan = PlanArtifact {
            step: 0,
            text: "planword".into(),
            proposed_action: None,
            token_probs: None,
        };
        let out = retrieve(&store, &query("shared"), &plan, &cfg, 0);
        assert_eq!(out.artifact.snippets[0].doc_id, "a");
        assert!(out.artifact.snippets[0].score >= out.artifact.snippets[1].score);
    }

    #[test]
    fn load_order_does_not_change_results() {
        let mut docs = vec![
            ("d1".to_string(), "alpha beta gamma".to_string()),
            ("d2".to_string(), "alpha beta".to_string()),
            ("d3".to_string(), "alpha".to_string()),
        ];
        let store1 = index_corpus(&docs).unwrap();
        docs.reverse();
        let store2 = index_corpus(&docs).unwrap();
        let q = query("alpha beta gamma");
        let p = PlanArtifact::empty(0);
        let cfg = RetrievalConfig::default();
        let a = retrieve(&store1, &q, &p, &cfg, 0).artifact;
        let b = retrieve(&store2, &q, &p, &cfg, 0).artifact;
        assert_eq!(a, b);
    }
}
