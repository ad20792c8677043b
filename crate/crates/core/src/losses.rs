//! Hierarchical structured losses: pairwise distances, batch-hard triplet
//! mining (hinge and softplus), sub-batch and full-batch terms, the
//! distance-adapted focal loss, classification loss, and their total.
//!
//! Forward math lives in plain functions over a [`DistanceMatrix`]; the
//! tape ops reuse those functions and add exact backward rules, so eval
//! code and training share one definition of every loss.

use crate::autodiff::{Tape, TapeOp, Tensor, Value};
use crate::error::{Error, Result};

/// Epsilon inside the distance square root; keeps the gradient defined at
/// coincident embeddings.
pub const DISTANCE_EPSILON: f64 = 1e-12;

/// Floor applied to probabilities inside the focal log.
pub const FOCAL_PROB_FLOOR: f64 = 1e-12;

/// Largest double below 1; focal probabilities are capped here so the
/// declared [0, 1) range survives saturation of the underlying sigmoid.
const P_MAX: f64 = 1.0 - f64::EPSILON / 2.0;

#[derive(Clone, Debug)]
pub struct LossConfig {
    /// Margin for the hinge triplet variant.
    pub margin: f64,
    /// Distance-to-probability scale in the focal map.
    pub alpha: f64,
    /// Focal scaling factor.
    pub gamma: f64,
    pub distance_epsilon: f64,
    /// Per-term weights; 1.0 everywhere reproduces the unweighted total.
    pub w_sub: f64,
    pub w_full: f64,
    pub w_focal: f64,
    pub w_cls: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            margin: 0.3,
            alpha: 1.0,
            gamma: 2.0,
            distance_epsilon: DISTANCE_EPSILON,
            w_sub: 1.0,
            w_full: 1.0,
            w_focal: 1.0,
            w_cls: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        // NaN fails each comparison and is rejected.
        if self.alpha.is_nan() || self.alpha <= 0.0 {
            return Err(Error::config(format!("loss.alpha: must be > 0, got {}", self.alpha)));
        }
        if self.gamma.is_nan() || self.gamma < 0.0 {
            return Err(Error::config(format!("loss.gamma: must be >= 0, got {}", self.gamma)));
        }
        if self.distance_epsilon.is_nan() || self.distance_epsilon <= 0.0 {
            return Err(Error::config(format!(
                "loss.distance_epsilon: must be > 0, got {}",
                self.distance_epsilon
            )));
        }
        for (key, w) in [
            ("loss.w_sub", self.w_sub),
            ("loss.w_full", self.w_full),
            ("loss.w_focal", self.w_focal),
            ("loss.w_cls", self.w_cls),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::config(format!("{key}: must be >= 0, got {w}")));
            }
        }
        Ok(())
    }
}

/// The four loss terms of one step plus their total.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossReport {
    pub l_sht_sub: f64,
    pub l_sht_full: f64,
    pub l_f: f64,
    pub l_c: f64,
    pub total: f64,
}

/// Symmetric pairwise Euclidean distances with a zero diagonal.
#[derive(Clone, Debug)]
pub struct DistanceMatrix {
    pub n: usize,
    d: Vec<f64>,
}

impl DistanceMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.d[i * self.n + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.d
    }

    /// d_ij = sqrt(max(|z_i - z_j|^2, eps)), diagonal forced to 0.
    pub fn from_rows(rows: &[Vec<f64>], eps: f64) -> Self {
        let n = rows.len();
        let mut d = vec![0.0; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                let sq: f64 =
                    rows[i].iter().zip(rows[j].iter()).map(|(a, b)| (a - b) * (a - b)).sum();
                let dist = sq.max(eps).sqrt();
                d[i * n + j] = dist;
                d[j * n + i] = dist;
            }
        }
        Self { n, d }
    }

    fn from_tensor(z: &Tensor, eps: f64) -> Result<Self> {
        if z.shape.len() != 2 {
            return Err(Error::precondition(format!(
                "pairwise_distances: need N x D embeddings, got {:?}",
                z.shape
            )));
        }
        let d = z.shape[1];
        let rows: Vec<Vec<f64>> = z.values.chunks_exact(d).map(|r| r.to_vec()).collect();
        Ok(Self::from_rows(&rows, eps))
    }
}

/// Plain pairwise distances over embedding rows with the default epsilon.
pub fn pairwise_distances(rows: &[Vec<f64>]) -> DistanceMatrix {
    DistanceMatrix::from_rows(rows, DISTANCE_EPSILON)
}

/// Vanilla triplet loss: max(d_ap - d_an + m, 0).
pub fn triplet_vanilla(d_ap: f64, d_an: f64, margin: f64) -> f64 {
    (d_ap - d_an + margin).max(0.0)
}

/// Numerically stable log(1 + exp(x)).
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Per-anchor hardest positive / hardest negative indices. Ties break
/// toward the lowest index in both selections.
fn mine_batch_hard(d: &DistanceMatrix, labels: &[usize]) -> Result<Vec<(usize, usize)>> {
    let n = d.n;
    if labels.len() != n {
        return Err(Error::precondition(format!(
            "batch_hard: {} labels for {} embeddings",
            labels.len(),
            n
        )));
    }
    let mut out = Vec::with_capacity(n);
    for a in 0..n {
        let mut hardest_pos: Option<(usize, f64)> = None;
        let mut hardest_neg: Option<(usize, f64)> = None;
        for j in 0..n {
            let dist = d.get(a, j);
            if labels[j] == labels[a] {
                if j != a && hardest_pos.is_none_or(|(_, best)| dist > best) {
                    hardest_pos = Some((j, dist));
                }
            } else if hardest_neg.is_none_or(|(_, best)| dist < best) {
                hardest_neg = Some((j, dist));
            }
        }
        let (p, _) = hardest_pos.ok_or_else(|| {
            Error::precondition(format!("batch_hard: label {} has no positive pair", labels[a]))
        })?;
        let (ng, _) = hardest_neg.ok_or_else(|| {
            Error::precondition(format!("batch_hard: label {} has no negative", labels[a]))
        })?;
        out.push((p, ng));
    }
    Ok(out)
}

/// Batch-hard hinge triplet: mean over anchors of
/// max(hardestPos - hardestNeg + m, 0).
pub fn batch_hard_hinge(d: &DistanceMatrix, labels: &[usize], margin: f64) -> Result<f64> {
    let picks = mine_batch_hard(d, labels)?;
    let total: f64 = picks
        .iter()
        .enumerate()
        .map(|(a, &(p, ng))| triplet_vanilla(d.get(a, p), d.get(a, ng), margin))
        .sum();
    Ok(total / d.n as f64)
}

/// Batch-hard softplus triplet: mean over anchors of
/// log(1 + exp(hardestPos - hardestNeg)).
pub fn batch_hard_softplus(d: &DistanceMatrix, labels: &[usize]) -> Result<f64> {
    let picks = mine_batch_hard(d, labels)?;
    let total: f64 = picks
        .iter()
        .enumerate()
        .map(|(a, &(p, ng))| softplus(d.get(a, p) - d.get(a, ng)))
        .sum();
    Ok(total / d.n as f64)
}

/// Distance-to-probability map: 2 / (1 + e^(-alpha d)) - 1, kept in [0, 1).
pub fn focal_prob(dist: f64, alpha: f64) -> f64 {
    (0.5 * alpha * dist).tanh().min(P_MAX)
}

/// Unordered negative pairs (i < j, different labels).
fn negative_pairs(labels: &[usize]) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for i in 0..labels.len() {
        for j in (i + 1)..labels.len() {
            if labels[i] != labels[j] {
                pairs.push((i, j));
            }
        }
    }
    pairs
}

/// Adapted focal loss: mean over negative pairs of -(1-p)^gamma log(p),
/// with p floored inside the log.
pub fn focal_loss(d: &DistanceMatrix, labels: &[usize], alpha: f64, gamma: f64) -> Result<f64> {
    if labels.len() != d.n {
        return Err(Error::precondition(format!(
            "focal_loss: {} labels for {} embeddings",
            labels.len(),
            d.n
        )));
    }
    let pairs = negative_pairs(labels);
    if pairs.is_empty() {
        return Err(Error::precondition("focal_loss: no negative pairs in batch".to_string()));
    }
    let total: f64 = pairs
        .iter()
        .map(|&(i, j)| {
            let p = focal_prob(d.get(i, j), alpha);
            -(1.0 - p).powf(gamma) * p.max(FOCAL_PROB_FLOOR).ln()
        })
        .sum();
    Ok(total / pairs.len() as f64)
}

/// Mean softmax cross-entropy over logit rows.
pub fn classification_loss(logits: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if logits.len() != labels.len() || logits.is_empty() {
        return Err(Error::precondition(format!(
            "classification_loss: {} rows vs {} labels",
            logits.len(),
            labels.len()
        )));
    }
    let c = logits[0].len();
    let mut total = 0.0;
    for (row, &y) in logits.iter().zip(labels.iter()) {
        if y >= c {
            return Err(Error::precondition(format!(
                "classification_loss: label {y} out of range for {c} classes"
            )));
        }
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
        total += lse - row[y];
    }
    Ok(total / logits.len() as f64)
}

// ---------------------------------------------------------------------------
// Tape ops
// ---------------------------------------------------------------------------

struct PairwiseDistancesOp {
    eps: f64,
}

impl TapeOp for PairwiseDistancesOp {
    fn name(&self) -> &'static str {
        "pairwise_distances"
    }
    fn backward(&self, out: &Tensor, g: &[f64], inputs: &[&Tensor]) -> Vec<Vec<f64>> {
        let z = inputs[0];
        let n = out.shape[0];
        let dim = z.shape[1];
        let mut dz = vec![0.0; z.len()];
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let go = g[i * n + j];
                if go == 0.0 {
                    continue;
                }
                let dist = out.values[i * n + j];
                // Flat region of max(|.|^2, eps): no gradient when clamped.
                let sq: f64 = (0..dim)
                    .map(|k| {
                        let diff = z.values[i * dim + k] - z.values[j * dim + k];
                        diff * diff
                    })
                    .sum();
                if sq <= self.eps {
                    continue;
                }
                let scale = go / dist;
                for k in 0..dim {
                    let diff = z.values[i * dim + k] - z.values[j * dim + k];
                    dz[i * dim + k] += scale * diff;
                    dz[j * dim + k] -= scale * diff;
                }
            }
        }
        vec![dz]
    }
}

enum MiningVariant {
    Hinge { margin: f64 },
    Softplus,
}

struct BatchHardOp {
    variant: MiningVariant,
    picks: Vec<(usize, usize)>,
}

impl TapeOp for BatchHardOp {
    fn name(&self) -> &'static str {
        match self.variant {
            MiningVariant::Hinge { .. } => "batch_hard_hinge",
            MiningVariant::Softplus => "batch_hard_softplus",
        }
    }
    fn backward(&self, _out: &Tensor, g: &[f64], inputs: &[&Tensor]) -> Vec<Vec<f64>> {
        let d = inputs[0];
        let n = d.shape[0];
        let mut dd = vec![0.0; d.len()];
        let scale = g[0] / n as f64;
        for (a, &(p, ng)) in self.picks.iter().enumerate() {
            let x = d.values[a * n + p] - d.values[a * n + ng];
            let slope = match self.variant {
                MiningVariant::Hinge { margin } => {
                    if x + margin > 0.0 {
                        1.0
                    } else {
                        0.0
                    }
                }
                MiningVariant::Softplus => sigmoid(x),
            };
            dd[a * n + p] += scale * slope;
            dd[a * n + ng] -= scale * slope;
        }
        vec![dd]
    }
}

struct FocalLossOp {
    alpha: f64,
    gamma: f64,
    pairs: Vec<(usize, usize)>,
}

impl TapeOp for FocalLossOp {
    fn name(&self) -> &'static str {
        "focal_loss"
    }
    fn backward(&self, _out: &Tensor, g: &[f64], inputs: &[&Tensor]) -> Vec<Vec<f64>> {
        let d = inputs[0];
        let n = d.shape[0];
        let mut dd = vec![0.0; d.len()];
        let scale = g[0] / self.pairs.len() as f64;
        for &(i, j) in &self.pairs {
            let dist = d.values[i * n + j];
            let p = focal_prob(dist, self.alpha);
            let p_floored = p.max(FOCAL_PROB_FLOOR);
            // term = -(1-p)^gamma * ln(p_floored)
            let mut dterm_dp = if self.gamma == 0.0 {
                0.0
            } else {
                self.gamma * (1.0 - p).powf(self.gamma - 1.0) * p_floored.ln()
            };
            if p > FOCAL_PROB_FLOOR && p < P_MAX {
                dterm_dp -= (1.0 - p).powf(self.gamma) / p;
            }
            // dp/dd = alpha (1-p)(1+p) / 2, zero in the capped region.
            let dp_dd =
                if p < P_MAX { 0.5 * self.alpha * (1.0 - p) * (1.0 + p) } else { 0.0 };
            // Forward reads only the upper-triangle entry of each pair.
            dd[i * n + j] += scale * dterm_dp * dp_dd;
        }
        vec![dd]
    }
}

/// Records the pairwise distance matrix of `z` (N x D) on the tape.
pub fn tape_pairwise_distances(tape: &mut Tape, z: Value, eps: f64) -> Result<Value> {
    let d = DistanceMatrix::from_tensor(tape.value(z), eps)?;
    let t = Tensor::new(vec![d.n, d.n], d.as_slice().to_vec())?;
    tape.push_op(&[z], t, Box::new(PairwiseDistancesOp { eps }))
}

fn tape_batch_hard(
    tape: &mut Tape,
    dmat: Value,
    labels: &[usize],
    variant: MiningVariant,
) -> Result<Value> {
    let t = tape.value(dmat);
    if t.shape.len() != 2 || t.shape[0] != t.shape[1] {
        return Err(Error::precondition(format!(
            "batch_hard: need a square distance matrix, got {:?}",
            t.shape
        )));
    }
    let d = DistanceMatrix { n: t.shape[0], d: t.values.clone() };
    let picks = mine_batch_hard(&d, labels)?;
    let loss = match variant {
        MiningVariant::Hinge { margin } => batch_hard_hinge(&d, labels, margin)?,
        MiningVariant::Softplus => batch_hard_softplus(&d, labels)?,
    };
    tape.push_op(&[dmat], Tensor::scalar(loss), Box::new(BatchHardOp { variant, picks }))
}

/// Batch-hard hinge triplet over a recorded distance matrix.
pub fn tape_batch_hard_hinge(
    tape: &mut Tape,
    dmat: Value,
    labels: &[usize],
    margin: f64,
) -> Result<Value> {
    tape_batch_hard(tape, dmat, labels, MiningVariant::Hinge { margin })
}

/// Batch-hard softplus triplet over a recorded distance matrix.
pub fn tape_batch_hard_softplus(tape: &mut Tape, dmat: Value, labels: &[usize]) -> Result<Value> {
    tape_batch_hard(tape, dmat, labels, MiningVariant::Softplus)
}

/// Adapted focal loss over a recorded distance matrix.
pub fn tape_focal_loss(
    tape: &mut Tape,
    dmat: Value,
    labels: &[usize],
    alpha: f64,
    gamma: f64,
) -> Result<Value> {
    let t = tape.value(dmat);
    let d = DistanceMatrix { n: t.shape[0], d: t.values.clone() };
    let loss = focal_loss(&d, labels, alpha, gamma)?;
    let pairs = negative_pairs(labels);
    tape.push_op(&[dmat], Tensor::scalar(loss), Box::new(FocalLossOp { alpha, gamma, pairs }))
}

/// Sub-batch term: softplus hard-triplet applied separately to the RE and
/// BcE embeddings; mining never crosses sub-batches.
pub fn tape_l_sht_sub(
    tape: &mut Tape,
    z_re: Value,
    z_bce: Value,
    labels: &[usize],
    eps: f64,
) -> Result<Value> {
    let d_re = tape_pairwise_distances(tape, z_re, eps)?;
    let d_bce = tape_pairwise_distances(tape, z_bce, eps)?;
    let l_re = tape_batch_hard_softplus(tape, d_re, labels)?;
    let l_bce = tape_batch_hard_softplus(tape, d_bce, labels)?;
    tape.add(l_re, l_bce)
}

/// Full-batch term: softplus hard-triplet over the concatenated batch;
/// mining crosses sub-batches (an item's erased twin is a positive).
pub fn tape_l_sht_full(
    tape: &mut Tape,
    z_full: Value,
    labels_full: &[usize],
    eps: f64,
) -> Result<(Value, Value)> {
    let d_full = tape_pairwise_distances(tape, z_full, eps)?;
    let loss = tape_batch_hard_softplus(tape, d_full, labels_full)?;
    Ok((loss, d_full))
}

/// Eq-by-eq total over a hierarchical batch: embeddings of the full batch
/// (RE rows then BcE rows), classifier logits, and sub-batch size `b`.
/// Returns the scalar total node and the per-term report.
pub fn tape_total_loss(
    tape: &mut Tape,
    z_full: Value,
    logits: Value,
    labels: &[usize],
    b: usize,
    cfg: &LossConfig,
) -> Result<(Value, LossReport)> {
    cfg.validate()?;
    let zt = tape.value(z_full);
    if zt.shape.len() != 2 || zt.shape[0] != 2 * b {
        return Err(Error::precondition(format!(
            "total_loss: embeddings {:?} do not match sub-batch size {b}",
            zt.shape
        )));
    }
    if labels.len() != b {
        return Err(Error::precondition(format!(
            "total_loss: {} labels for sub-batch size {b}",
            labels.len()
        )));
    }
    let mut labels_full = labels.to_vec();
    labels_full.extend_from_slice(labels);

    let z_re = tape.slice_rows(z_full, 0, b)?;
    let z_bce = tape.slice_rows(z_full, b, b)?;
    let l_sub = tape_l_sht_sub(tape, z_re, z_bce, labels, cfg.distance_epsilon)?;
    let (l_full, d_full) = tape_l_sht_full(tape, z_full, &labels_full, cfg.distance_epsilon)?;
    // The focal term reuses the full-batch distances; no extra distance op.
    let l_f = tape_focal_loss(tape, d_full, &labels_full, cfg.alpha, cfg.gamma)?;
    let l_c = tape.softmax_cross_entropy(logits, &labels_full)?;

    let report = LossReport {
        l_sht_sub: tape.value(l_sub).item(),
        l_sht_full: tape.value(l_full).item(),
        l_f: tape.value(l_f).item(),
        l_c: tape.value(l_c).item(),
        total: 0.0,
    };

    let w_sub = tape.mul_scalar(l_sub, cfg.w_sub)?;
    let w_full = tape.mul_scalar(l_full, cfg.w_full)?;
    let w_f = tape.mul_scalar(l_f, cfg.w_focal)?;
    let w_c = tape.mul_scalar(l_c, cfg.w_cls)?;
    let s1 = tape.add(w_sub, w_full)?;
    let s2 = tape.add(w_f, w_c)?;
    let total = tape.add(s1, s2)?;

    let report = LossReport { total: tape.value(total).item(), ..report };
    Ok((total, report))
}
