//! Compound batch erasing: per-image random erasing (RE) and per-sub-batch
//! batch-constant stripe erasing (BcE).

use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::RandomSource;

/// What erased pixels become.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FillPolicy {
    Zero,
    /// Per-channel dataset mean, supplied by the caller.
    Mean,
    /// Fresh U(0,1) per pixel-channel.
    RandomUniform,
}

impl FillPolicy {
    pub fn parse(text: &str) -> Result<Self> {
        match text {
            "zero" => Ok(FillPolicy::Zero),
            "mean" => Ok(FillPolicy::Mean),
            "random_uniform" => Ok(FillPolicy::RandomUniform),
            other => Err(Error::config(format!(
                "fill: expected zero|mean|random_uniform, got `{other}`"
            ))),
        }
    }
}

/// Random-erasing parameters.
#[derive(Clone, Debug)]
pub struct ReConfig {
    pub probability: f64,
    /// Area-ratio bounds.
    pub s_l: f64,
    pub s_h: f64,
    /// Aspect-ratio bounds.
    pub r_1: f64,
    pub r_2: f64,
    pub fill: FillPolicy,
    pub max_attempts: usize,
}

impl Default for ReConfig {
    fn default() -> Self {
        Self {
            probability: 0.5,
            s_l: 0.05,
            s_h: 0.4,
            r_1: 0.3,
            r_2: 0.33,
            fill: FillPolicy::Mean,
            max_attempts: 100,
        }
    }
}

impl ReConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.s_l > 0.0 && self.s_l <= self.s_h && self.s_h < 1.0) {
            return Err(Error::config(format!(
                "re.s_l/re.s_h: need 0 < s_l <= s_h < 1, got {} and {}",
                self.s_l, self.s_h
            )));
        }
        if !(self.r_1 > 0.0 && self.r_1 <= self.r_2) {
            return Err(Error::config(format!(
                "re.r_1/re.r_2: need 0 < r_1 <= r_2, got {} and {}",
                self.r_1, self.r_2
            )));
        }
        if !(0.0..=1.0).contains(&self.probability) {
            return Err(Error::config(format!(
                "re.probability: must be in [0, 1], got {}",
                self.probability
            )));
        }
        if self.max_attempts == 0 {
            return Err(Error::config("re.max_attempts: must be >= 1".to_string()));
        }
        Ok(())
    }
}

/// Batch-constant erasing parameters: stripe-count bounds for `s`.
#[derive(Clone, Debug)]
pub struct BceConfig {
    pub s_min: usize,
    pub s_max: usize,
    pub fill: FillPolicy,
}

impl Default for BceConfig {
    fn default() -> Self {
        Self { s_min: 6, s_max: 8, fill: FillPolicy::Mean }
    }
}

impl BceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2 <= self.s_min && self.s_min <= self.s_max) {
            return Err(Error::config(format!(
                "bce.s_min/bce.s_max: need 2 <= s_min <= s_max, got {} and {}",
                self.s_min, self.s_max
            )));
        }
        Ok(())
    }
}

/// Rectangle fully inside its host image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EraseRegion {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// One candidate draw from the RE sampler, for instrumentation.
#[derive(Clone, Copy, Debug)]
pub struct ReAttempt {
    pub area_ratio: f64,
    pub aspect: f64,
    /// Pre-rounding target area `ratio * H * W`.
    pub target_area: f64,
    pub height: usize,
    pub width: usize,
    pub accepted: bool,
}

/// Row range of stripe `idx` when `height` rows are divided into `s`
/// contiguous bands of `floor(height / s)` rows, the last band absorbing
/// the remainder.
pub fn stripe_rows(height: usize, s: usize, idx: usize) -> std::ops::Range<usize> {
    debug_assert!(s >= 1 && idx < s);
    let base = height / s;
    let start = idx * base;
    let end = if idx + 1 == s { height } else { start + base };
    start..end
}

/// Draws at most one value from `[lo, hi)`; degenerate bounds short-circuit
/// to `lo` without consuming a draw.
fn uniform_or_point<R: RandomSource>(rng: &mut R, lo: f64, hi: f64) -> Result<f64> {
    if lo == hi {
        Ok(lo)
    } else {
        rng.uniform_f64(lo, hi)
    }
}

/// Samples a random-erasing rectangle, like [`sample_re_region`], but also
/// returns every attempted draw.
pub fn sample_re_region_traced<R: RandomSource>(
    rng: &mut R,
    cfg: &ReConfig,
    img_h: usize,
    img_w: usize,
) -> Result<(Option<EraseRegion>, Vec<ReAttempt>)> {
    cfg.validate()?;
    if img_h == 0 || img_w == 0 {
        return Err(Error::precondition("re: image must be at least 1x1".to_string()));
    }
    let mut attempts = Vec::new();
    for _ in 0..cfg.max_attempts {
        let ratio = uniform_or_point(rng, cfg.s_l, cfg.s_h)?;
        let aspect = uniform_or_point(rng, cfg.r_1, cfg.r_2)?;
        let target = ratio * img_h as f64 * img_w as f64;
        // a = sqrt(S * r), b = sqrt(S / r); round half-up, clamp to >= 1.
        let a = ((target * aspect).sqrt().round() as usize).max(1);
        let b = ((target / aspect).sqrt().round() as usize).max(1);
        let fits = a <= img_h && b <= img_w;
        attempts.push(ReAttempt {
            area_ratio: ratio,
            aspect,
            target_area: target,
            height: a,
            width: b,
            accepted: fits,
        });
        if fits {
            let top = rng.uniform_int(0, (img_h - a) as i64)? as usize;
            let left = rng.uniform_int(0, (img_w - b) as i64)? as usize;
            return Ok((Some(EraseRegion { top, left, height: a, width: b }), attempts));
        }
    }
    Ok((None, attempts))
}

/// Samples an erase rectangle: repeats up to `max_attempts` draws of area
/// ratio and aspect; returns `None` if no candidate fits the image.
pub fn sample_re_region<R: RandomSource>(
    rng: &mut R,
    cfg: &ReConfig,
    img_h: usize,
    img_w: usize,
) -> Result<Option<EraseRegion>> {
    sample_re_region_traced(rng, cfg, img_h, img_w).map(|(r, _)| r)
}

fn fill_region<R: RandomSource>(
    img: &mut Image,
    region: &EraseRegion,
    rng: &mut R,
    policy: FillPolicy,
    fill_value: &[f64],
) -> Result<()> {
    for y in region.top..region.top + region.height {
        for x in region.left..region.left + region.width {
            for c in 0..img.channels {
                let v = match policy {
                    FillPolicy::Zero => 0.0,
                    FillPolicy::Mean => fill_value[c],
                    FillPolicy::RandomUniform => rng.uniform_f64(0.0, 1.0)?,
                };
                img.set(y, x, c, v);
            }
        }
    }
    Ok(())
}

/// Random erasing on one image. One bernoulli draw decides whether to erase
/// at all; pixels outside the returned region are bit-identical to the
/// input.
pub fn apply_re<R: RandomSource>(
    image: &Image,
    rng: &mut R,
    cfg: &ReConfig,
    fill_value: &[f64],
) -> Result<(Image, Option<EraseRegion>)> {
    cfg.validate()?;
    if cfg.fill == FillPolicy::Mean && fill_value.len() < image.channels {
        return Err(Error::precondition(format!(
            "re: mean fill needs {} channel values, got {}",
            image.channels,
            fill_value.len()
        )));
    }
    if !rng.bernoulli(cfg.probability)? {
        return Ok((image.clone(), None));
    }
    let region = sample_re_region(rng, cfg, image.height, image.width)?;
    let mut out = image.clone();
    if let Some(region) = &region {
        fill_region(&mut out, region, rng, cfg.fill, fill_value)?;
    }
    Ok((out, region))
}

/// Batch-constant erasing: draws `s` then a stripe index once, and erases
/// that full-width row band in every image of the sub-batch.
pub fn apply_bce_subbatch<R: RandomSource>(
    images: &[Image],
    rng: &mut R,
    cfg: &BceConfig,
    fill_value: &[f64],
) -> Result<(Vec<Image>, usize, usize)> {
    cfg.validate()?;
    let first = images
        .first()
        .ok_or_else(|| Error::precondition("bce: sub-batch must be non-empty".to_string()))?;
    for (i, img) in images.iter().enumerate() {
        if img.height != first.height || img.width != first.width || img.channels != first.channels
        {
            return Err(Error::precondition(format!(
                "bce: image {i} shape {}x{}x{} != {}x{}x{}",
                img.height, img.width, img.channels, first.height, first.width, first.channels
            )));
        }
    }
    if cfg.fill == FillPolicy::Mean && fill_value.len() < first.channels {
        return Err(Error::precondition(format!(
            "bce: mean fill needs {} channel values, got {}",
            first.channels,
            fill_value.len()
        )));
    }
    if first.height < cfg.s_max {
        return Err(Error::precondition(format!(
            "bce: image height {} cannot hold {} stripes",
            first.height, cfg.s_max
        )));
    }
    let s = rng.uniform_int(cfg.s_min as i64, cfg.s_max as i64)? as usize;
    let stripe_index = rng.uniform_int(0, s as i64 - 1)? as usize;
    let rows = stripe_rows(first.height, s, stripe_index);

    let mut out = Vec::with_capacity(images.len());
    for img in images {
        let region = EraseRegion {
            top: rows.start,
            left: 0,
            height: rows.end - rows.start,
            width: img.width,
        };
        let mut copy = img.clone();
        fill_region(&mut copy, &region, rng, cfg.fill, fill_value)?;
        out.push(copy);
    }
    Ok((out, s, stripe_index))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{ScriptedRng, SplitMix64};

    fn ones(h: usize, w: usize) -> Image {
        Image::filled(h, w, 3, 1.0).unwrap()
    }

    #[test]
    fn stripe_rows_partition() {
        assert_eq!(stripe_rows(32, 8, 3), 12..16);
        assert_eq!(stripe_rows(50, 6, 5), 40..50); // last band absorbs remainder
        assert_eq!(stripe_rows(50, 6, 0), 0..8);
        let total: usize = (0..6).map(|i| stripe_rows(50, 6, i).len()).sum();
        assert_eq!(total, 50);
    }

    #[test]
    fn re_rejects_oversized_candidate_then_resamples() {
        // img 32x16: rho=0.2, r=0.33 gives 6x18 which exceeds the width, so
        // the sampler must fall through to rho=0.1, r=0.33 -> 4x12 at (0,0).
        let cfg = ReConfig { probability: 1.0, ..ReConfig::default() };
        let words = vec![
            ScriptedRng::word_for_uniform(0.2, cfg.s_l, cfg.s_h),
            ScriptedRng::word_for_uniform(0.33, cfg.r_1, cfg.r_2),
            ScriptedRng::word_for_uniform(0.1, cfg.s_l, cfg.s_h),
            ScriptedRng::word_for_uniform(0.33, cfg.r_1, cfg.r_2),
            0, // top
            0, // left
        ];
        let mut rng = ScriptedRng::new(words);
        let (region, attempts) = sample_re_region_traced(&mut rng, &cfg, 32, 16).unwrap();
        assert_eq!(attempts.len(), 2);
        assert!(!attempts[0].accepted);
        assert_eq!((attempts[0].height, attempts[0].width), (6, 18));
        assert!(attempts[1].accepted);
        let region = region.unwrap();
        assert_eq!((region.height, region.width), (4, 12));
        assert_eq!((region.top, region.left), (0, 0));
    }

    #[test]
    fn re_degenerate_bounds_give_constant_region_size() {
        let cfg = ReConfig {
            probability: 1.0,
            s_l: 0.1,
            s_h: 0.1,
            r_1: 1.0,
            r_2: 1.0,
            ..ReConfig::default()
        };
        let mut rng = SplitMix64::new(5);
        let mut dims = std::collections::HashSet::new();
        for _ in 0..50 {
            let r = sample_re_region(&mut rng, &cfg, 64, 64).unwrap().unwrap();
            dims.insert((r.height, r.width));
        }
        assert_eq!(dims.len(), 1);
    }

    #[test]
    fn apply_re_probability_zero_is_identity() {
        let img = ones(8, 8);
        let cfg = ReConfig { probability: 0.0, ..ReConfig::default() };
        let mut rng = SplitMix64::new(1);
        let (out, region) = apply_re(&img, &mut rng, &cfg, &[0.5; 3]).unwrap();
        assert_eq!(out, img);
        assert!(region.is_none());
    }

    #[test]
    fn apply_re_zero_fill_touches_exactly_the_region() {
        let img = ones(8, 8);
        let cfg = ReConfig { probability: 1.0, fill: FillPolicy::Zero, ..ReConfig::default() };
        let mut rng = SplitMix64::new(2);
        let (out, region) = apply_re(&img, &mut rng, &cfg, &[]).unwrap();
        let region = region.expect("region should fit on an 8x8 image");
        let mut zeroed = 0;
        for y in 0..8 {
            for x in 0..8 {
                for c in 0..3 {
                    let inside = y >= region.top
                        && y < region.top + region.height
                        && x >= region.left
                        && x < region.left + region.width;
                    let v = out.get(y, x, c);
                    if inside {
                        assert_eq!(v, 0.0);
                        zeroed += 1;
                    } else {
                        assert_eq!(v, 1.0);
                    }
                }
            }
        }
        assert_eq!(zeroed, region.height * region.width * 3);
    }

    #[test]
    fn apply_re_mean_fill_survives_ppm_round_trip() {
        let img = ones(8, 8);
        let cfg = ReConfig { probability: 1.0, ..ReConfig::default() };
        let mut rng = SplitMix64::new(3);
        let (out, region) = apply_re(&img, &mut rng, &cfg, &[0.5; 3]).unwrap();
        let region = region.unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("erased.ppm");
        crate::image::save_ppm(&out, &path).unwrap();
        let back = crate::image::load_ppm(&path).unwrap();
        let y = region.top;
        let x = region.left;
        for c in 0..3 {
            assert!((back.get(y, x, c) - 0.5).abs() <= 1.0 / 510.0);
        }
    }

    #[test]
    fn re_idempotent_with_zero_fill() {
        let img = ones(10, 10);
        let region = EraseRegion { top: 2, left: 3, height: 4, width: 5 };
        let mut once = img.clone();
        let mut rng = SplitMix64::new(0);
        fill_region(&mut once, &region, &mut rng, FillPolicy::Zero, &[]).unwrap();
        let mut twice = once.clone();
        fill_region(&mut twice, &region, &mut rng, FillPolicy::Zero, &[]).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn bce_erases_identical_band_across_subbatch() {
        // H=32: force s=8, stripe=3 -> rows 12..=15 erased everywhere.
        let imgs = vec![ones(32, 6), ones(32, 6)];
        let cfg = BceConfig { s_min: 6, s_max: 8, fill: FillPolicy::Zero };
        // uniform_int(6,8): range 3, word 2 -> s=8; uniform_int(0,7): word 3 -> stripe 3.
        let mut rng = ScriptedRng::new(vec![2, 3]);
        let (out, s, stripe) = apply_bce_subbatch(&imgs, &mut rng, &cfg, &[]).unwrap();
        assert_eq!((s, stripe), (8, 3));
        for img in &out {
            for y in 0..32 {
                let expect = if (12..16).contains(&y) { 0.0 } else { 1.0 };
                for x in 0..6 {
                    for c in 0..3 {
                        assert_eq!(img.get(y, x, c), expect, "row {y}");
                    }
                }
            }
        }
        assert_eq!(out[0], out[1]);
    }

    #[test]
    fn bce_last_band_absorbs_remainder() {
        let imgs = vec![ones(50, 4)];
        let cfg = BceConfig { s_min: 6, s_max: 6, fill: FillPolicy::Zero };
        // s=6 degenerate (no draw); stripe: uniform_int(0,5) word 5 -> 5.
        let mut rng = ScriptedRng::new(vec![5]);
        let (out, s, stripe) = apply_bce_subbatch(&imgs, &mut rng, &cfg, &[]).unwrap();
        assert_eq!((s, stripe), (6, 5));
        for y in 0..50 {
            let expect = if y >= 40 { 0.0 } else { 1.0 };
            assert_eq!(out[0].get(y, 0, 0), expect, "row {y}");
        }
    }

    #[test]
    fn bce_rejects_empty_and_mismatched_input() {
        let cfg = BceConfig::default();
        let mut rng = SplitMix64::new(0);
        assert!(apply_bce_subbatch(&[], &mut rng, &cfg, &[0.5; 3]).is_err());
        let imgs = vec![ones(8, 8), ones(8, 9)];
        assert!(apply_bce_subbatch(&imgs, &mut rng, &cfg, &[0.5; 3]).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(ReConfig { s_l: 0.0, ..ReConfig::default() }.validate().is_err());
        assert!(ReConfig { s_l: 0.5, s_h: 0.4, ..ReConfig::default() }.validate().is_err());
        assert!(ReConfig { probability: 1.5, ..ReConfig::default() }.validate().is_err());
        assert!(BceConfig { s_min: 1, s_max: 8, ..BceConfig::default() }.validate().is_err());
        assert!(BceConfig { s_min: 8, s_max: 6, ..BceConfig::default() }.validate().is_err());
        assert!(FillPolicy::parse("mean").is_ok());
        assert!(FillPolicy::parse("nope").is_err());
    }
}
