//! Retrieval evaluation: mean average precision and CMC rank-k over
//! embedding space, ReID-style. No re-ranking.

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub map: f64,
    /// cmc[k] = fraction of queries with a relevant item in the top k+1.
    pub cmc: Vec<f64>,
    pub num_queries: usize,
}

impl EvalReport {
    /// CMC at a 1-based rank, saturating at the gallery size.
    pub fn cmc_at(&self, rank: usize) -> f64 {
        let idx = rank.min(self.cmc.len()).saturating_sub(1);
        self.cmc[idx]
    }
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Ranks the gallery per query by ascending distance (ties break toward
/// the lower gallery index) and accumulates AP and CMC. Every query label
/// must occur in the gallery.
pub fn evaluate(
    query_z: &[Vec<f64>],
    query_labels: &[usize],
    gallery_z: &[Vec<f64>],
    gallery_labels: &[usize],
) -> Result<EvalReport> {
    if query_z.len() != query_labels.len() || query_z.is_empty() {
        return Err(Error::precondition(format!(
            "evaluate: {} query embeddings vs {} labels",
            query_z.len(),
            query_labels.len()
        )));
    }
    if gallery_z.len() != gallery_labels.len() || gallery_z.is_empty() {
        return Err(Error::precondition(format!(
            "evaluate: {} gallery embeddings vs {} labels",
            gallery_z.len(),
            gallery_labels.len()
        )));
    }
    let g = gallery_z.len();
    let mut ap_sum = 0.0;
    let mut cmc_counts = vec![0usize; g];

    for (q, &q_label) in query_z.iter().zip(query_labels.iter()) {
        let relevant_total = gallery_labels.iter().filter(|&&l| l == q_label).count();
        if relevant_total == 0 {
            return Err(Error::precondition(format!(
                "evaluate: query label {q_label} absent from the gallery"
            )));
        }
        let mut order: Vec<usize> = (0..g).collect();
        let dists: Vec<f64> = gallery_z.iter().map(|z| euclidean(q, z)).collect();
        order.sort_by(|&a, &b| {
            dists[a].partial_cmp(&dists[b]).expect("distances are finite").then(a.cmp(&b))
        });

        let mut hits = 0usize;
        let mut ap = 0.0;
        let mut first_hit: Option<usize> = None;
        for (rank0, &idx) in order.iter().enumerate() {
            if gallery_labels[idx] == q_label {
                hits += 1;
                ap += hits as f64 / (rank0 + 1) as f64;
                if first_hit.is_none() {
                    first_hit = Some(rank0);
                }
            }
        }
        ap_sum += ap / relevant_total as f64;
        // A hit at rank r contributes to cmc[r..].
        cmc_counts[first_hit.expect("relevant_total > 0 guarantees a hit")] += 1;
    }

    let nq = query_z.len() as f64;
    let mut cmc = Vec::with_capacity(g);
    let mut acc = 0usize;
    for c in cmc_counts {
        acc += c;
        cmc.push(acc as f64 / nq);
    }
    Ok(EvalReport { map: ap_sum / nq, cmc, num_queries: query_z.len() })
}
