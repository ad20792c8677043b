//! Synthetic "part-person" dataset generator.
//!
//! Each identity is a stack of horizontal color stripes (one color per
//! part). A configurable fraction of identities comes in confusable pairs
//! that share every part color except exactly one, so the discriminative
//! part of a pair is known by construction. Samples add a horizontal
//! shift, pixel noise, and a global brightness offset.

use crate::dataset::{Dataset, ImageSample};
use crate::erasing::stripe_rows;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::RandomSource;

#[derive(Clone, Debug)]
pub struct SynthConfig {
    pub num_identities: usize,
    pub samples_per_identity: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub num_parts: usize,
    pub confusable_fraction: f64,
    pub noise_sigma: f64,
    pub max_shift: usize,
    pub palette_size: usize,
    pub brightness_range: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_identities: 60,
            samples_per_identity: 8,
            height: 48,
            width: 24,
            channels: 3,
            num_parts: 6,
            confusable_fraction: 0.5,
            noise_sigma: 0.03,
            max_shift: 2,
            palette_size: 8,
            brightness_range: 0.05,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_identities == 0 {
            return Err(Error::config("synth.num_identities: must be >= 1".to_string()));
        }
        if self.samples_per_identity == 0 {
            return Err(Error::config("synth.samples_per_identity: must be >= 1".to_string()));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::config("synth.height/synth.width: must be >= 1".to_string()));
        }
        if self.channels != 3 {
            return Err(Error::config(format!(
                "synth.channels: only 3-channel generation is supported, got {}",
                self.channels
            )));
        }
        if self.num_parts < 2 {
            return Err(Error::config(format!(
                "synth.num_parts: must be >= 2, got {}",
                self.num_parts
            )));
        }
        if self.num_parts > self.height {
            return Err(Error::config(format!(
                "synth.num_parts: {} exceeds image height {}",
                self.num_parts, self.height
            )));
        }
        if self.palette_size < 2 {
            return Err(Error::config(format!(
                "synth.palette_size: must be >= 2, got {}",
                self.palette_size
            )));
        }
        if !(0.0..=1.0).contains(&self.confusable_fraction) {
            return Err(Error::config(format!(
                "synth.confusable_fraction: must be in [0, 1], got {}",
                self.confusable_fraction
            )));
        }
        if self.noise_sigma < 0.0 || !self.noise_sigma.is_finite() {
            return Err(Error::config(format!(
                "synth.noise_sigma: must be a finite value >= 0, got {}",
                self.noise_sigma
            )));
        }
        if self.brightness_range < 0.0 || !self.brightness_range.is_finite() {
            return Err(Error::config(format!(
                "synth.brightness_range: must be a finite value >= 0, got {}",
                self.brightness_range
            )));
        }
        Ok(())
    }
}

/// Evenly spaced hues at fixed saturation/value; pure function of the size.
pub fn make_palette(size: usize) -> Vec<[f64; 3]> {
    (0..size).map(|i| hsv_to_rgb(i as f64 / size as f64, 0.75, 0.9)).collect()
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h * 6.0) % 6.0;
    let sector = h6 as usize % 6;
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Standard normal draw from two uniforms (Box-Muller). Consumes exactly
/// two words.
fn normal<R: RandomSource>(rng: &mut R) -> Result<f64> {
    let u1 = rng.uniform_f64(0.0, 1.0)?;
    let u2 = rng.uniform_f64(0.0, 1.0)?;
    Ok((-2.0 * (1.0 - u1).ln()).sqrt() * (std::f64::consts::TAU * u2).cos())
}

/// Confusable pairs as (identity, identity+1) blocks spread evenly over
/// the identity range, so any contiguous train/test split keeps pairs on
/// both sides. Pair count rounds down from `num_identities * fraction / 2`.
pub fn confusable_pairs(num_identities: usize, fraction: f64) -> Vec<(usize, usize)> {
    let confusable = {
        let n = (num_identities as f64 * fraction).floor() as usize;
        n - n % 2
    };
    let pair_count = confusable / 2;
    let blocks = num_identities / 2;
    let mut pairs = Vec::with_capacity(pair_count);
    for k in 0..blocks {
        // Bresenham spread of pair_count pair-blocks over all blocks.
        if (k * pair_count) / blocks != ((k + 1) * pair_count) / blocks {
            pairs.push((2 * k, 2 * k + 1));
        }
    }
    pairs
}

/// Part-color vector per identity; all vectors are distinct, and the
/// identities listed by [`confusable_pairs`] differ in exactly one part.
fn draw_attributes<R: RandomSource>(cfg: &SynthConfig, rng: &mut R) -> Result<Vec<Vec<usize>>> {
    let pairs = confusable_pairs(cfg.num_identities, cfg.confusable_fraction);
    let mut partner_of = vec![None; cfg.num_identities];
    for &(a, b) in &pairs {
        partner_of[b] = Some(a);
    }
    let mut used: std::collections::HashSet<Vec<usize>> = std::collections::HashSet::new();
    let mut attrs: Vec<Vec<usize>> = Vec::with_capacity(cfg.num_identities);

    let fresh_vector = |rng: &mut R, used: &std::collections::HashSet<Vec<usize>>| {
        for _ in 0..10_000 {
            let v: Vec<usize> = (0..cfg.num_parts)
                .map(|_| rng.uniform_int(0, cfg.palette_size as i64 - 1).map(|c| c as usize))
                .collect::<Result<_>>()?;
            if !used.contains(&v) {
                return Ok(v);
            }
        }
        Err(Error::config(format!(
            "synth.palette_size: {} colors cannot yield {} distinct identities",
            cfg.palette_size, cfg.num_identities
        )))
    };

    for identity in 0..cfg.num_identities {
        let v = if let Some(base_id) = partner_of[identity] {
            // Copy the pair base, redrawing one part to a different color.
            let base = attrs[base_id].clone();
            let diff_part = rng.uniform_int(0, cfg.num_parts as i64 - 1)? as usize;
            loop {
                let mut c = rng.uniform_int(0, cfg.palette_size as i64 - 2)? as usize;
                if c >= base[diff_part] {
                    c += 1;
                }
                let mut v = base.clone();
                v[diff_part] = c;
                if !used.contains(&v) {
                    break v;
                }
            }
        } else {
            fresh_vector(rng, &used)?
        };
        used.insert(v.clone());
        attrs.push(v);
    }
    Ok(attrs)
}

/// Noiseless stripe render of one identity (no shift, no noise).
fn render_base(cfg: &SynthConfig, palette: &[[f64; 3]], attrs: &[usize]) -> Image {
    let mut data = vec![0.0; cfg.height * cfg.width * cfg.channels];
    for part in 0..cfg.num_parts {
        let color = palette[attrs[part]];
        for y in stripe_rows(cfg.height, cfg.num_parts, part) {
            for x in 0..cfg.width {
                let base = (y * cfg.width + x) * cfg.channels;
                data[base..base + 3].copy_from_slice(&color);
            }
        }
    }
    Image { height: cfg.height, width: cfg.width, channels: cfg.channels, data }
}

/// One augmented sample: shift, then per-pixel noise, then brightness.
fn render_sample<R: RandomSource>(
    cfg: &SynthConfig,
    base: &Image,
    rng: &mut R,
) -> Result<Image> {
    let shift = rng.uniform_int(-(cfg.max_shift as i64), cfg.max_shift as i64)?;
    let mut img = base.clone();
    if shift != 0 {
        for y in 0..cfg.height {
            for x in 0..cfg.width {
                let src = x as i64 - shift;
                for c in 0..cfg.channels {
                    let v = if (0..cfg.width as i64).contains(&src) {
                        base.get(y, src as usize, c)
                    } else {
                        0.5
                    };
                    img.set(y, x, c, v);
                }
            }
        }
    }
    if cfg.noise_sigma > 0.0 {
        for v in img.data.iter_mut() {
            *v = (*v + cfg.noise_sigma * normal(rng)?).clamp(0.0, 1.0);
        }
    }
    if cfg.brightness_range > 0.0 {
        let offset = rng.uniform_f64(-cfg.brightness_range, cfg.brightness_range)?;
        for v in img.data.iter_mut() {
            *v = (*v + offset).clamp(0.0, 1.0);
        }
    }
    Ok(img)
}

/// Generates the full synthetic dataset; bit-identical for the same seed
/// and config.
pub fn gen_synthetic_dataset<R: RandomSource>(cfg: &SynthConfig, rng: &mut R) -> Result<Dataset> {
    cfg.validate()?;
    let palette = make_palette(cfg.palette_size);
    let attrs = draw_attributes(cfg, rng)?;
    let mut samples = Vec::with_capacity(cfg.num_identities * cfg.samples_per_identity);
    let mut sample_id = 0usize;
    for identity in 0..cfg.num_identities {
        let base = render_base(cfg, &palette, &attrs[identity]);
        for _ in 0..cfg.samples_per_identity {
            let image = render_sample(cfg, &base, rng)?;
            samples.push(ImageSample { image, identity, sample_id });
            sample_id += 1;
        }
    }
    let ds = Dataset { samples, num_identities: cfg.num_identities };
    ds.validate()?;
    Ok(ds)
}

/// Attribute vectors plus their noiseless renders, drawn exactly as
/// [`gen_synthetic_dataset`] would with the same rng state.
pub fn gen_synthetic_prototypes<R: RandomSource>(
    cfg: &SynthConfig,
    rng: &mut R,
) -> Result<(Vec<Vec<usize>>, Vec<Image>)> {
    cfg.validate()?;
    let palette = make_palette(cfg.palette_size);
    let attrs = draw_attributes(cfg, rng)?;
    let renders = attrs.iter().map(|a| render_base(cfg, &palette, a)).collect();
    Ok((attrs, renders))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn quiet_cfg() -> SynthConfig {
        SynthConfig {
            num_identities: 8,
            samples_per_identity: 4,
            height: 24,
            width: 12,
            noise_sigma: 0.0,
            max_shift: 0,
            brightness_range: 0.0,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn degenerate_noise_makes_identity_samples_identical() {
        let cfg = quiet_cfg();
        let mut rng = SplitMix64::new(1);
        let ds = gen_synthetic_dataset(&cfg, &mut rng).unwrap();
        let groups = ds.samples_by_identity();
        for group in groups {
            let first = &ds.samples[group[0]].image;
            for &i in &group[1..] {
                assert_eq!(&ds.samples[i].image, first);
            }
        }
    }

    #[test]
    fn pair_spread_is_even_and_respects_the_fraction() {
        // 0.5 of 60 identities: 15 pairs, alternating blocks of two.
        let pairs = confusable_pairs(60, 0.5);
        assert_eq!(pairs.len(), 15);
        assert_eq!(pairs[0], (2, 3));
        assert_eq!(*pairs.last().unwrap(), (58, 59));
        // Pairs land on both sides of a 40/20 split.
        assert!(pairs.iter().any(|&(a, _)| a < 40));
        assert!(pairs.iter().any(|&(a, _)| a >= 40));
        assert!(pairs.iter().all(|&(a, b)| b == a + 1));
        assert!(confusable_pairs(10, 0.0).is_empty());
        assert_eq!(confusable_pairs(10, 1.0).len(), 5);
    }

    #[test]
    fn confusable_pair_differs_in_exactly_one_band() {
        let cfg = quiet_cfg();
        let mut rng = SplitMix64::new(2);
        let (attrs, renders) = gen_synthetic_prototypes(&cfg, &mut rng).unwrap();
        // confusable_fraction 0.5 of 8 identities -> 2 pairs.
        for pair in confusable_pairs(cfg.num_identities, cfg.confusable_fraction) {
            let diff_parts: Vec<usize> = (0..cfg.num_parts)
                .filter(|&p| attrs[pair.0][p] != attrs[pair.1][p])
                .collect();
            assert_eq!(diff_parts.len(), 1, "pair {pair:?}");
            let band = stripe_rows(cfg.height, cfg.num_parts, diff_parts[0]);
            let (a, b) = (&renders[pair.0], &renders[pair.1]);
            for y in 0..cfg.height {
                let same = (0..cfg.width)
                    .all(|x| (0..3).all(|c| a.get(y, x, c) == b.get(y, x, c)));
                assert_eq!(same, !band.contains(&y), "row {y}");
            }
        }
    }

    #[test]
    fn sample_count_arithmetic() {
        let cfg = SynthConfig {
            num_identities: 40,
            samples_per_identity: 8,
            noise_sigma: 0.0,
            ..SynthConfig::default()
        };
        let mut rng = SplitMix64::new(3);
        let ds = gen_synthetic_dataset(&cfg, &mut rng).unwrap();
        assert_eq!(ds.samples.len(), 320);
        assert_eq!(ds.num_identities, 40);
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SynthConfig { num_identities: 6, samples_per_identity: 3, ..SynthConfig::default() };
        let a = gen_synthetic_dataset(&cfg, &mut SplitMix64::new(77)).unwrap();
        let b = gen_synthetic_dataset(&cfg, &mut SplitMix64::new(77)).unwrap();
        for (x, y) in a.samples.iter().zip(b.samples.iter()) {
            assert_eq!(x.image, y.image);
            assert_eq!(x.identity, y.identity);
        }
    }

    #[test]
    fn all_attribute_vectors_distinct() {
        let cfg = SynthConfig { num_identities: 20, ..SynthConfig::default() };
        let mut rng = SplitMix64::new(4);
        let (attrs, _) = gen_synthetic_prototypes(&cfg, &mut rng).unwrap();
        let set: std::collections::HashSet<_> = attrs.iter().collect();
        assert_eq!(set.len(), attrs.len());
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(SynthConfig { num_parts: 1, ..SynthConfig::default() }.validate().is_err());
        assert!(SynthConfig { palette_size: 1, ..SynthConfig::default() }.validate().is_err());
        let err = SynthConfig { num_parts: 1, ..SynthConfig::default() }
            .validate()
            .unwrap_err()
            .to_string();
        assert!(err.contains("num_parts"), "{err}");
    }

    #[test]
    fn samples_stay_in_range_with_noise() {
        let cfg = SynthConfig {
            num_identities: 4,
            samples_per_identity: 4,
            noise_sigma: 0.25,
            ..SynthConfig::default()
        };
        let mut rng = SplitMix64::new(5);
        let ds = gen_synthetic_dataset(&cfg, &mut rng).unwrap();
        for s in &ds.samples {
            s.image.validate().unwrap();
        }
    }
}
