use serde::{Deserialize, Serialize};

use super::MemoryError;
use crate::backend::EmbeddingBackend;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub id: u64,
    pub text: String,
    pub vector: Vec<f32>,
}

/// Flat in-process vector store with cosine similarity.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct VectorIndex {
    dim: usize,
    entries: Vec<IndexEntry>,
    next_id: u64,
}

pub fn cosine(a: &[f32], b: &[f32]) -> f32 {
    let dot: f32 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f32>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f32>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

impl VectorIndex {
    pub fn new(dim: usize) -> Self {
        VectorIndex {
            dim,
            entries: Vec::new(),
            next_id: 0,
        }
    }

    pub fn dimension(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn contains_text(&self, text: &str) -> bool {
        self.entries.iter().any(|e| e.text == text)
    }

    pub fn insert(&mut self, text: impl Into<String>, vector: Vec<f32>) -> Result<u64, MemoryError> {
        if vector.len() != self.dim {
            return Err(MemoryError::Dimension {
                expected: self.dim,
                got: vector.len(),
            });
        }
        let id = self.next_id;
        self.next_id += 1;
        self.entries.push(IndexEntry {
            id,
            text: text.into(),
            vector,
        });
        Ok(id)
    }

    /// The `k` most similar entries, best first; equal scores keep insertion order.
    pub fn search(&self, query: &[f32], k: usize) -> Vec<(&IndexEntry, f32)> {
        let mut scored: Vec<(&IndexEntry, f32)> = self.entries.iter().map(|e| (e, cosine(query, &e.vector))).collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.id.cmp(&b.0.id)));
        scored.truncate(k);
        scored
    }
}

/// Embeds `query` and returns the top `k` texts with their scores.
pub fn retrieve_topk(
    index: &VectorIndex,
    query: &str,
    k: usize,
    embed: &dyn EmbeddingBackend,
) -> Result<Vec<(String, f32)>, MemoryError> {
    if k == 0 || index.is_empty() {
        return Ok(Vec::new());
    }
    let q = embed
        .embed(&[query.to_string()])?
        .pop()
        .ok_or_else(|| MemoryError::Embedding("empty embedding response".into()))?;
    Ok(index
        .search(&q, k)
        .into_iter()
        .map(|(e, s)| (e.text.clone(), s))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::scripted::ScriptedEmbedder;
    use proptest::prelude::*;

    fn filled(texts: &[&str]) -> (VectorIndex, ScriptedEmbedder) {
        let e = ScriptedEmbedder::new(0);
        let mut idx = VectorIndex::new(e.dimension());
        for t in texts {
            idx.insert(*t, e.embed_one(t)).unwrap();
        }
        (idx, e)
    }

    #[test]
    fn identical_text_ranks_first_at_one() {
        let (idx, e) = filled(&["my diet is vegan diet.", "my commute is by bike.", "I like tea."]);
        let hits = retrieve_topk(&idx, "my commute is by bike.", 3, &e).unwrap();
        assert_eq!(hits[0].0, "my commute is by bike.");
        assert!((hits[0].1 - 1.0).abs() < 1e-6);
    }

    #[test]
    fn k_larger_than_store() {
        let texts: Vec<String> = (0..7).map(|i| format!("fact {i}")).collect();
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        let (idx, e) = filled(&refs);
        assert_eq!(retrieve_topk(&idx, "fact", 50, &e).unwrap().len(), 7);
        assert!(retrieve_topk(&VectorIndex::new(4), "x", 5, &e).unwrap().is_empty());
    }

    #[test]
    fn ties_keep_insertion_order() {
        let mut idx = VectorIndex::new(2);
        idx.insert("b", vec![1.0, 0.0]).unwrap();
        idx.insert("a", vec![1.0, 0.0]).unwrap();
        let hits: Vec<&str> = idx
            .search(&[1.0, 0.0], 2)
            .iter()
            .map(|(e, _)| e.text.as_str())
            .collect();
        assert_eq!(hits, ["b", "a"]);
    }

    #[test]
    fn wrong_dimension_rejected() {
        let mut idx = VectorIndex::new(3);
        assert!(idx.insert("x", vec![1.0]).is_err());
    }

    proptest! {
        #[test]
        fn results_for_k_plus_one_extend_k(
            vecs in proptest::collection::vec(proptest::collection::vec(-1.0f32..1.0, 3), 0..20),
            q in proptest::collection::vec(-1.0f32..1.0, 3),
            k in 0usize..20,
        ) {
            let mut idx = VectorIndex::new(3);
            for (i, v) in vecs.iter().enumerate() {
                idx.insert(format!("e{i}"), v.clone()).unwrap();
            }
            let a: Vec<u64> = idx.search(&q, k).iter().map(|(e, _)| e.id).collect();
            let b: Vec<u64> = idx.search(&q, k + 1).iter().map(|(e, _)| e.id).collect();
            prop_assert!(b.len() <= a.len() + 1);
            prop_assert_eq!(&b[..a.len()], &a[..]);
            prop_assert_eq!(a.len(), k.min(vecs.len()));
        }
    }
}
