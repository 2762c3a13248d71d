//! Retrieval metrics over ranked candidate lists.

use std::collections::HashMap;

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TopK {
    pub k: usize,
    /// Fraction of queries with a same-class hit within the first `k`.
    pub accuracy: f64,
    /// Reciprocal rank truncated at `k` (0 when the first hit is deeper).
    pub mrr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RetrievalMetrics {
    pub queries: usize,
    pub top_k: Vec<TopK>,
    /// Mean reciprocal rank of the first same-class hit over the full ranking.
    pub mrr: f64,
}

impl RetrievalMetrics {
    pub fn accuracy_at(&self, k: usize) -> Option<f64> {
        self.top_k.iter().find(|t| t.k == k).map(|t| t.accuracy)
    }
}

/// Scores rankings. Each entry is a query id and its candidate ids, best
/// first; the query's own id is skipped wherever it appears. `labels` must
/// cover every query and candidate.
pub fn eval_retrieval(
    rankings: &[(String, Vec<String>)],
    labels: &HashMap<String, usize>,
    ks: &[usize],
) -> Result<RetrievalMetrics> {
    if ks.contains(&0) {
        return Err(Error::InvalidParam("k must be >= 1".into()));
    }
    if rankings.is_empty() {
        return Err(Error::Data("no queries to evaluate".into()));
    }
    let lookup = |id: &str| {
        labels
            .get(id)
            .copied()
            .ok_or_else(|| Error::Data(format!("id `{id}` has no label")))
    };
    let mut hits = vec![0usize; ks.len()];
    let mut rr_at = vec![0.0; ks.len()];
    let mut rr_total = 0.0;
    for (qid, ranked) in rankings {
        let qlabel = lookup(qid)?;
        let mut first = None;
        for (rank, cid) in ranked.iter().filter(|c| *c != qid).enumerate() {
            if lookup(cid)? == qlabel {
                first = Some(rank + 1);
                break;
            }
        }
        if let Some(r) = first {
            rr_total += 1.0 / r as f64;
            for (i, &k) in ks.iter().enumerate() {
                if r <= k {
                    hits[i] += 1;
                    rr_at[i] += 1.0 / r as f64;
                }
            }
        }
    }
    let n = rankings.len() as f64;
    Ok(RetrievalMetrics {
        queries: rankings.len(),
        top_k: ks
            .iter()
            .zip(hits.iter().zip(&rr_at))
            .map(|(&k, (&h, &rr))| TopK {
                k,
                accuracy: h as f64 / n,
                mrr: rr / n,
            })
            .collect(),
        mrr: rr_total / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(pairs: &[(&str, usize)]) -> HashMap<String, usize> {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    fn ranking(q: &str, c: &[&str]) -> (String, Vec<String>) {
        (q.into(), c.iter().map(|s| s.to_string()).collect())
    }

    #[test]
    fn perfect_index() {
        let l = labels(&[("a", 0), ("a2", 0), ("b", 1), ("b2", 1)]);
        let r = vec![
            ranking("a", &["a", "a2", "b"]),
            ranking("b", &["b", "b2", "a"]),
        ];
        let m = eval_retrieval(&r, &l, &[1, 5]).unwrap();
        assert_eq!(m.mrr, 1.0);
        assert_eq!(m.accuracy_at(1), Some(1.0));
    }

    #[test]
    fn own_id_is_excluded() {
        let l = labels(&[("a", 0), ("a2", 0), ("b", 1)]);
        let m = eval_retrieval(&[ranking("a", &["a", "b", "a2"])], &l, &[1, 2]).unwrap();
        assert_eq!(m.accuracy_at(1), Some(0.0));
        assert_eq!(m.accuracy_at(2), Some(1.0));
        assert_eq!(m.mrr, 0.5);
        assert_eq!(m.top_k[0].mrr, 0.0);
    }

    #[test]
    fn unknown_query_id() {
        let l = labels(&[("a", 0)]);
        assert!(eval_retrieval(&[ranking("zz", &["a"])], &l, &[1]).is_err());
    }
}
