//! Occlusion-based attribution: how much each horizontal stripe of an
//! image moves its embedding when blanked. The normalized sensitivities
//! form a distribution whose entropy measures how spread the model's
//! attention is across parts.

use crate::erasing::stripe_rows;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::Model;

/// Sensitivities below this total are reported as all-zero.
const ZERO_TOTAL: f64 = 1e-9;

#[derive(Clone, Debug)]
pub struct AttributionMap {
    /// Raw embedding shift per occluded stripe.
    pub stripe_sensitivity: Vec<f64>,
    /// Entropy (nats) of the normalized sensitivities; 0 when all-zero.
    pub entropy: f64,
    pub all_zero: bool,
}

impl AttributionMap {
    /// Sensitivities normalized to sum to 1, or all zeros when flagged.
    pub fn normalized(&self) -> Vec<f64> {
        let total: f64 = self.stripe_sensitivity.iter().sum();
        if self.all_zero {
            vec![0.0; self.stripe_sensitivity.len()]
        } else {
            self.stripe_sensitivity.iter().map(|&s| s / total).collect()
        }
    }
}

/// Embeds the image, then re-embeds it with each of `s` stripes filled with
/// `fill_value` (same partition rule as batch-constant erasing), measuring
/// the embedding shift per stripe.
pub fn occlusion_attribution(
    model: &Model,
    image: &Image,
    s: usize,
    fill_value: &[f64],
) -> Result<AttributionMap> {
    if s < 2 {
        return Err(Error::precondition(format!("attribution: need s >= 2 stripes, got {s}")));
    }
    if fill_value.len() < image.channels {
        return Err(Error::precondition(format!(
            "attribution: fill needs {} channel values, got {}",
            image.channels,
            fill_value.len()
        )));
    }
    let base = &model.embed_images(&[image])?[0];
    let mut sensitivity = Vec::with_capacity(s);
    for stripe in 0..s {
        let mut occluded = image.clone();
        for y in stripe_rows(image.height, s, stripe) {
            for x in 0..image.width {
                for c in 0..image.channels {
                    occluded.set(y, x, c, fill_value[c]);
                }
            }
        }
        let z = &model.embed_images(&[&occluded])?[0];
        let shift: f64 =
            base.iter().zip(z.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        sensitivity.push(shift);
    }

    let total: f64 = sensitivity.iter().sum();
    if total < ZERO_TOTAL {
        return Ok(AttributionMap { stripe_sensitivity: sensitivity, entropy: 0.0, all_zero: true });
    }
    let entropy = -sensitivity
        .iter()
        .map(|&v| v / total)
        .filter(|&q| q > 0.0)
        .map(|q| q * q.ln())
        .sum::<f64>();
    Ok(AttributionMap { stripe_sensitivity: sensitivity, entropy, all_zero: false })
}

/// Median per-image attribution entropy; an even count averages the two
/// middle values.
pub fn attribution_entropy_summary(
    model: &Model,
    images: &[&Image],
    s: usize,
    fill_value: &[f64],
) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::precondition("attribution: empty image set".to_string()));
    }
    let entropies: Vec<f64> = images
        .iter()
        .map(|img| occlusion_attribution(model, img, s, fill_value).map(|m| m.entropy))
        .collect::<Result<_>>()?;
    Ok(median(entropies))
}

pub(crate) fn median(mut vals: Vec<f64>) -> f64 {
    vals.sort_by(|a, b| a.partial_cmp(b).expect("entropies are finite"));
    let n = vals.len();
    if n % 2 == 1 {
        vals[n / 2]
    } else {
        0.5 * (vals[n / 2 - 1] + vals[n / 2])
    }
}
