//! Labeled image datasets and the on-disk manifest layout.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{load_ppm, save_ppm, Image};

/// One image with its identity label.
#[derive(Clone, Debug)]
pub struct ImageSample {
    pub image: Image,
    pub identity: usize,
    pub sample_id: usize,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub samples: Vec<ImageSample>,
    pub num_identities: usize,
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        let mut seen_ids = std::collections::HashSet::new();
        let mut per_identity = vec![0usize; self.num_identities];
        for s in &self.samples {
            if s.identity >= self.num_identities {
                return Err(Error::precondition(format!(
                    "dataset: identity {} >= num_identities {}",
                    s.identity, self.num_identities
                )));
            }
            if !seen_ids.insert(s.sample_id) {
                return Err(Error::precondition(format!(
                    "dataset: duplicate sample_id {}",
                    s.sample_id
                )));
            }
            per_identity[s.identity] += 1;
        }
        if let Some(id) = per_identity.iter().position(|&c| c == 0) {
            return Err(Error::precondition(format!("dataset: identity {id} has no samples")));
        }
        Ok(())
    }

    /// Sample indices grouped by identity, identity-ascending.
    pub fn samples_by_identity(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.num_identities];
        for (i, s) in self.samples.iter().enumerate() {
            groups[s.identity].push(i);
        }
        groups
    }

    /// New dataset keeping only the given identities, relabeled to
    /// 0..identities.len() in the given order. Sample ids are preserved.
    pub fn subset(&self, identities: &[usize]) -> Result<Dataset> {
        let remap: BTreeMap<usize, usize> =
            identities.iter().enumerate().map(|(new, &old)| (old, new)).collect();
        let samples: Vec<ImageSample> = self
            .samples
            .iter()
            .filter(|s| remap.contains_key(&s.identity))
            .map(|s| ImageSample {
                image: s.image.clone(),
                identity: remap[&s.identity],
                sample_id: s.sample_id,
            })
            .collect();
        let out = Dataset { samples, num_identities: identities.len() };
        out.validate()?;
        Ok(out)
    }
}

/// Per-channel arithmetic mean over all pixels of all samples.
pub fn mean_pixel(dataset: &Dataset) -> Result<Vec<f64>> {
    let first = dataset
        .samples
        .first()
        .ok_or_else(|| Error::precondition("mean_pixel: dataset is empty".to_string()))?;
    let channels = first.image.channels;
    let mut sums = vec![0.0; channels];
    let mut count = 0usize;
    for s in &dataset.samples {
        if s.image.channels != channels {
            return Err(Error::precondition(
                "mean_pixel: samples disagree on channel count".to_string(),
            ));
        }
        for px in s.image.data.chunks_exact(channels) {
            for (c, &v) in px.iter().enumerate() {
                sums[c] += v;
            }
        }
        count += s.image.height * s.image.width;
    }
    Ok(sums.into_iter().map(|s| s / count as f64).collect())
}

/// Writes `manifest.csv` (sample_id, identity, relative_path) and one PPM
/// per sample under `images/`.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    dataset.validate()?;
    fs::create_dir_all(dir.join("images"))?;
    let mut manifest = String::from("sample_id,identity,relative_path\n");
    for s in &dataset.samples {
        let rel = format!("images/{:05}.ppm", s.sample_id);
        save_ppm(&s.image, &dir.join(&rel))?;
        manifest.push_str(&format!("{},{},{}\n", s.sample_id, s.identity, rel));
    }
    fs::write(dir.join("manifest.csv"), manifest)?;
    Ok(())
}

/// Loads a dataset from a `manifest.csv` produced by [`save_dataset`].
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut samples = Vec::new();
    let mut max_identity = 0usize;
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 || line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 3 {
            return Err(Error::format(format!(
                "manifest: line {} has {} columns, expected 3",
                lineno + 1,
                cols.len()
            )));
        }
        let sample_id: usize = cols[0]
            .trim()
            .parse()
            .map_err(|_| Error::format(format!("manifest: bad sample_id `{}`", cols[0])))?;
        let identity: usize = cols[1]
            .trim()
            .parse()
            .map_err(|_| Error::format(format!("manifest: bad identity `{}`", cols[1])))?;
        let image = load_ppm(&dir.join(cols[2].trim()))?;
        max_identity = max_identity.max(identity);
        samples.push(ImageSample { image, identity, sample_id });
    }
    if samples.is_empty() {
        return Err(Error::format("manifest: no samples listed".to_string()));
    }
    let out = Dataset { samples, num_identities: max_identity + 1 };
    out.validate()?;
    Ok(out)
}
