//! PK identity sampling and the two-level hierarchical batch: an RE-erased
//! sub-batch and a BcE-erased sub-batch over the same raw images,
//! concatenated into a full batch of twice the size.

use crate::dataset::Dataset;
use crate::erasing::{apply_bce_subbatch, apply_re, BceConfig, EraseRegion, ReConfig};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::RandomSource;

#[derive(Clone, Copy, Debug)]
pub struct PkConfig {
    /// Identities per batch.
    pub p: usize,
    /// Samples per identity.
    pub k: usize,
}

impl Default for PkConfig {
    fn default() -> Self {
        Self { p: 16, k: 4 }
    }
}

impl PkConfig {
    pub fn validate(&self) -> Result<()> {
        // P >= 2 and K >= 2 so every anchor has a positive and a negative.
        if self.p < 2 {
            return Err(Error::config(format!("pk.p: must be >= 2, got {}", self.p)));
        }
        if self.k < 2 {
            return Err(Error::config(format!("pk.k: must be >= 2, got {}", self.k)));
        }
        Ok(())
    }
}

/// Raw PK draw before any erasing.
#[derive(Clone, Debug)]
pub struct RawBatch {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    pub source_ids: Vec<usize>,
}

/// The structured batch: aligned RE and BcE views of the same raw images.
#[derive(Clone, Debug)]
pub struct HierBatch {
    pub images_re: Vec<Image>,
    pub images_bce: Vec<Image>,
    pub labels: Vec<usize>,
    pub source_ids: Vec<usize>,
    /// (s, stripe_index) drawn once for the whole BcE sub-batch.
    pub bce_stripe: (usize, usize),
    /// Region erased in each RE image, when one was applied.
    pub re_regions: Vec<Option<EraseRegion>>,
}

impl HierBatch {
    pub fn sub_batch_size(&self) -> usize {
        self.images_re.len()
    }

    /// Labels of the concatenated full batch `[X_re; X_bce]`.
    pub fn labels_full(&self) -> Vec<usize> {
        let mut out = self.labels.clone();
        out.extend_from_slice(&self.labels);
        out
    }

    /// Images of the concatenated full batch, RE view first.
    pub fn images_full(&self) -> Vec<&Image> {
        self.images_re.iter().chain(self.images_bce.iter()).collect()
    }
}

/// Partial Fisher-Yates: `take` indices drawn without replacement from
/// `0..n`, in draw order.
fn draw_without_replacement<R: RandomSource>(
    rng: &mut R,
    n: usize,
    take: usize,
) -> Result<Vec<usize>> {
    let mut pool: Vec<usize> = (0..n).collect();
    let mut out = Vec::with_capacity(take);
    for i in 0..take {
        let j = rng.uniform_int(i as i64, n as i64 - 1)? as usize;
        pool.swap(i, j);
        out.push(pool[i]);
    }
    Ok(out)
}

/// Draws P distinct identities, then K samples per identity (without
/// replacement when the identity has at least K samples, with replacement
/// otherwise). Identity blocks and samples appear in draw order.
pub fn sample_pk<R: RandomSource>(
    dataset: &Dataset,
    rng: &mut R,
    cfg: &PkConfig,
) -> Result<RawBatch> {
    cfg.validate()?;
    if dataset.num_identities < cfg.p {
        return Err(Error::precondition(format!(
            "sample_pk: dataset has {} identities, need P = {}",
            dataset.num_identities, cfg.p
        )));
    }
    let groups = dataset.samples_by_identity();
    let identities = draw_without_replacement(rng, dataset.num_identities, cfg.p)?;

    let mut images = Vec::with_capacity(cfg.p * cfg.k);
    let mut labels = Vec::with_capacity(cfg.p * cfg.k);
    let mut source_ids = Vec::with_capacity(cfg.p * cfg.k);
    for &identity in &identities {
        let group = &groups[identity];
        let picks: Vec<usize> = if group.len() >= cfg.k {
            draw_without_replacement(rng, group.len(), cfg.k)?
        } else {
            (0..cfg.k)
                .map(|_| rng.uniform_int(0, group.len() as i64 - 1).map(|v| v as usize))
                .collect::<Result<_>>()?
        };
        for pick in picks {
            let sample = &dataset.samples[group[pick]];
            images.push(sample.image.clone());
            labels.push(sample.identity);
            source_ids.push(sample.sample_id);
        }
    }
    Ok(RawBatch { images, labels, source_ids })
}

/// Duplicates the raw batch and erases the copies: RE per image (image
/// order 0..B-1), then BcE once across the whole second copy.
pub fn build_hier_batch<R: RandomSource>(
    raw: &RawBatch,
    rng: &mut R,
    re_cfg: &ReConfig,
    bce_cfg: &BceConfig,
    fill_value: &[f64],
) -> Result<HierBatch> {
    let mut images_re = Vec::with_capacity(raw.images.len());
    let mut re_regions = Vec::with_capacity(raw.images.len());
    for img in &raw.images {
        let (erased, region) = apply_re(img, rng, re_cfg, fill_value)?;
        images_re.push(erased);
        re_regions.push(region);
    }
    let (images_bce, s, stripe_index) = apply_bce_subbatch(&raw.images, rng, bce_cfg, fill_value)?;
    Ok(HierBatch {
        images_re,
        images_bce,
        labels: raw.labels.clone(),
        source_ids: raw.source_ids.clone(),
        bce_stripe: (s, stripe_index),
        re_regions,
    })
}
