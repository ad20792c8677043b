//! Run configuration: a flat UTF-8 `key = value` file with dotted section
//! keys (e.g. `re.s_l = 0.05`). CLI flags override file values. The
//! resolved snapshot can be written back out in canonical order, so a run
//! is fully determined by its recorded config plus the code version.

use std::path::{Path, PathBuf};

use crate::erasing::{BceConfig, FillPolicy, ReConfig};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::model::Arch;
use crate::optim::OptimConfig;
use crate::batching::PkConfig;
use crate::rng::parse_seed;
use crate::synth::SynthConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    Umfl,
    Baseline,
}

impl TrainMode {
    pub fn parse(text: &str) -> Result<Self> {
        match text {
            "umfl" => Ok(TrainMode::Umfl),
            "baseline" => Ok(TrainMode::Baseline),
            other => Err(Error::config(format!("mode: expected umfl|baseline, got `{other}`"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            TrainMode::Umfl => "umfl",
            TrainMode::Baseline => "baseline",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DataSource {
    Synthetic,
    Manifest(PathBuf),
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub seed: u64,
    pub mode: TrainMode,
    pub data_source: DataSource,
    pub synth: SynthConfig,
    pub pk: PkConfig,
    pub re: ReConfig,
    pub bce: BceConfig,
    pub loss: LossConfig,
    pub arch: Arch,
    pub embedding_dim: usize,
    pub optim: OptimConfig,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    /// Fraction of identities assigned to the training split.
    pub train_fraction: f64,
    /// Leading samples of each test identity used as queries.
    pub query_per_identity: usize,
    /// Occlude one uniformly chosen stripe of every query image.
    pub occlude_queries: bool,
    pub occlusion_stripes: usize,
    pub ablate_seeds: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            mode: TrainMode::Umfl,
            data_source: DataSource::Synthetic,
            synth: SynthConfig::default(),
            // Desk-scale PK; the benchmark-scale 16x4 setting needs a
            // larger identity pool than the synthetic training split.
            pk: PkConfig { p: 8, k: 4 },
            re: ReConfig::default(),
            bce: BceConfig::default(),
            loss: LossConfig::default(),
            arch: Arch::ConvSmall,
            embedding_dim: 32,
            optim: OptimConfig::default(),
            epochs: 6,
            steps_per_epoch: 25,
            train_fraction: 2.0 / 3.0,
            query_per_identity: 2,
            occlude_queries: true,
            occlusion_stripes: 6,
            ablate_seeds: vec![1, 2, 3, 4, 5],
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse::<T>().map_err(|_| Error::config(format!("{key}: cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(Error::config(format!("{key}: expected true|false, got `{other}`"))),
    }
}

fn fill_to_str(fill: FillPolicy) -> &'static str {
    match fill {
        FillPolicy::Zero => "zero",
        FillPolicy::Mean => "mean",
        FillPolicy::RandomUniform => "random_uniform",
    }
}

impl RunConfig {
    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse_seed(v)?,
            "mode" => self.mode = TrainMode::parse(v)?,
            "data.source" => {
                self.data_source = match v {
                    "synthetic" => DataSource::Synthetic,
                    "manifest" => match &self.data_source {
                        DataSource::Manifest(p) => DataSource::Manifest(p.clone()),
                        _ => DataSource::Manifest(PathBuf::new()),
                    },
                    other => {
                        return Err(Error::config(format!(
                            "data.source: expected synthetic|manifest, got `{other}`"
                        )))
                    }
                }
            }
            "data.manifest" => self.data_source = DataSource::Manifest(PathBuf::from(v)),
            "synth.num_identities" => self.synth.num_identities = parse_num(key, v)?,
            "synth.samples_per_identity" => self.synth.samples_per_identity = parse_num(key, v)?,
            "synth.height" => self.synth.height = parse_num(key, v)?,
            "synth.width" => self.synth.width = parse_num(key, v)?,
            "synth.channels" => self.synth.channels = parse_num(key, v)?,
            "synth.num_parts" => self.synth.num_parts = parse_num(key, v)?,
            "synth.confusable_fraction" => self.synth.confusable_fraction = parse_num(key, v)?,
            "synth.noise_sigma" => self.synth.noise_sigma = parse_num(key, v)?,
            "synth.max_shift" => self.synth.max_shift = parse_num(key, v)?,
            "synth.palette_size" => self.synth.palette_size = parse_num(key, v)?,
            "synth.brightness_range" => self.synth.brightness_range = parse_num(key, v)?,
            "pk.p" => self.pk.p = parse_num(key, v)?,
            "pk.k" => self.pk.k = parse_num(key, v)?,
            "re.probability" => self.re.probability = parse_num(key, v)?,
            "re.s_l" => self.re.s_l = parse_num(key, v)?,
            "re.s_h" => self.re.s_h = parse_num(key, v)?,
            "re.r_1" => self.re.r_1 = parse_num(key, v)?,
            "re.r_2" => self.re.r_2 = parse_num(key, v)?,
            "re.fill" => self.re.fill = FillPolicy::parse(v)?,
            "re.max_attempts" => self.re.max_attempts = parse_num(key, v)?,
            "bce.s_min" => self.bce.s_min = parse_num(key, v)?,
            "bce.s_max" => self.bce.s_max = parse_num(key, v)?,
            "bce.fill" => self.bce.fill = FillPolicy::parse(v)?,
            "loss.margin" => self.loss.margin = parse_num(key, v)?,
            "loss.alpha" => self.loss.alpha = parse_num(key, v)?,
            "loss.gamma" => self.loss.gamma = parse_num(key, v)?,
            "loss.distance_epsilon" => self.loss.distance_epsilon = parse_num(key, v)?,
            "loss.w_sub" => self.loss.w_sub = parse_num(key, v)?,
            "loss.w_full" => self.loss.w_full = parse_num(key, v)?,
            "loss.w_focal" => self.loss.w_focal = parse_num(key, v)?,
            "loss.w_cls" => self.loss.w_cls = parse_num(key, v)?,
            "model.arch" => self.arch = Arch::parse(v)?,
            "model.embedding_dim" => self.embedding_dim = parse_num(key, v)?,
            "optim.learning_rate" => self.optim.learning_rate = parse_num(key, v)?,
            "optim.beta1" => self.optim.beta1 = parse_num(key, v)?,
            "optim.beta2" => self.optim.beta2 = parse_num(key, v)?,
            "optim.epsilon" => self.optim.epsilon = parse_num(key, v)?,
            "train.epochs" => self.epochs = parse_num(key, v)?,
            "train.steps_per_epoch" => self.steps_per_epoch = parse_num(key, v)?,
            "split.train_fraction" => self.train_fraction = parse_num(key, v)?,
            "split.query_per_identity" => self.query_per_identity = parse_num(key, v)?,
            "eval.occlude_queries" => self.occlude_queries = parse_bool(key, v)?,
            "eval.occlusion_stripes" => self.occlusion_stripes = parse_num(key, v)?,
            "ablate.seeds" => {
                self.ablate_seeds = v
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| parse_seed(s.trim()))
                    .collect::<Result<_>>()?;
                if self.ablate_seeds.is_empty() {
                    return Err(Error::config("ablate.seeds: empty seed list".to_string()));
                }
            }
            other => return Err(Error::config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Parses a config file over the defaults.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("config `{}`: {e}", path.display())))?;
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::config(format!(
                    "config line {}: expected `key = value`, got `{line}`",
                    lineno + 1
                )));
            };
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.pk.validate()?;
        self.re.validate()?;
        self.bce.validate()?;
        self.loss.validate()?;
        self.optim.validate()?;
        if self.embedding_dim < 2 {
            return Err(Error::config(format!(
                "model.embedding_dim: must be >= 2, got {}",
                self.embedding_dim
            )));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::config(format!(
                "split.train_fraction: must be in (0, 1), got {}",
                self.train_fraction
            )));
        }
        if self.query_per_identity == 0 {
            return Err(Error::config("split.query_per_identity: must be >= 1".to_string()));
        }
        if self.occlusion_stripes < 2 {
            return Err(Error::config(format!(
                "eval.occlusion_stripes: must be >= 2, got {}",
                self.occlusion_stripes
            )));
        }
        if self.ablate_seeds.is_empty() {
            return Err(Error::config("ablate.seeds: empty seed list".to_string()));
        }
        if let DataSource::Manifest(p) = &self.data_source {
            if p.as_os_str().is_empty() {
                return Err(Error::config(
                    "data.manifest: required when data.source = manifest".to_string(),
                ));
            }
        }
        Ok(())
    }

    /// Canonical snapshot of every key, suitable for re-parsing.
    pub fn resolved_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        kv("seed", self.seed.to_string());
        kv("mode", self.mode.as_str().to_string());
        match &self.data_source {
            DataSource::Synthetic => kv("data.source", "synthetic".to_string()),
            DataSource::Manifest(p) => {
                kv("data.source", "manifest".to_string());
                kv("data.manifest", p.display().to_string());
            }
        }
        kv("synth.num_identities", self.synth.num_identities.to_string());
        kv("synth.samples_per_identity", self.synth.samples_per_identity.to_string());
        kv("synth.height", self.synth.height.to_string());
        kv("synth.width", self.synth.width.to_string());
        kv("synth.channels", self.synth.channels.to_string());
        kv("synth.num_parts", self.synth.num_parts.to_string());
        kv("synth.confusable_fraction", format!("{}", self.synth.confusable_fraction));
        kv("synth.noise_sigma", format!("{}", self.synth.noise_sigma));
        kv("synth.max_shift", self.synth.max_shift.to_string());
        kv("synth.palette_size", self.synth.palette_size.to_string());
        kv("synth.brightness_range", format!("{}", self.synth.brightness_range));
        kv("pk.p", self.pk.p.to_string());
        kv("pk.k", self.pk.k.to_string());
        kv("re.probability", format!("{}", self.re.probability));
        kv("re.s_l", format!("{}", self.re.s_l));
        kv("re.s_h", format!("{}", self.re.s_h));
        kv("re.r_1", format!("{}", self.re.r_1));
        kv("re.r_2", format!("{}", self.re.r_2));
        kv("re.fill", fill_to_str(self.re.fill).to_string());
        kv("re.max_attempts", self.re.max_attempts.to_string());
        kv("bce.s_min", self.bce.s_min.to_string());
        kv("bce.s_max", self.bce.s_max.to_string());
        kv("bce.fill", fill_to_str(self.bce.fill).to_string());
        kv("loss.margin", format!("{}", self.loss.margin));
        kv("loss.alpha", format!("{}", self.loss.alpha));
        kv("loss.gamma", format!("{}", self.loss.gamma));
        kv("loss.distance_epsilon", format!("{:e}", self.loss.distance_epsilon));
        kv("loss.w_sub", format!("{}", self.loss.w_sub));
        kv("loss.w_full", format!("{}", self.loss.w_full));
        kv("loss.w_focal", format!("{}", self.loss.w_focal));
        kv("loss.w_cls", format!("{}", self.loss.w_cls));
        kv(
            "model.arch",
            match self.arch {
                Arch::ConvSmall => "conv_small".to_string(),
                Arch::Mlp => "mlp".to_string(),
            },
        );
        kv("model.embedding_dim", self.embedding_dim.to_string());
        kv("optim.learning_rate", format!("{}", self.optim.learning_rate));
        kv("optim.beta1", format!("{}", self.optim.beta1));
        kv("optim.beta2", format!("{}", self.optim.beta2));
        kv("optim.epsilon", format!("{:e}", self.optim.epsilon));
        kv("train.epochs", self.epochs.to_string());
        kv("train.steps_per_epoch", self.steps_per_epoch.to_string());
        kv("split.train_fraction", format!("{}", self.train_fraction));
        kv("split.query_per_identity", self.query_per_identity.to_string());
        kv("eval.occlude_queries", self.occlude_queries.to_string());
        kv("eval.occlusion_stripes", self.occlusion_stripes.to_string());
        kv(
            "ablate.seeds",
            self.ablate_seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(","),
        );
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn file_round_trip_through_resolved_text() {
        let mut cfg = RunConfig::default();
        cfg.set("seed", "0xFF").unwrap();
        cfg.set("re.s_l", "0.1").unwrap();
        cfg.set("mode", "baseline").unwrap();
        cfg.set("eval.occlude_queries", "false").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        std::fs::write(&path, cfg.resolved_text()).unwrap();
        let back = RunConfig::from_file(&path).unwrap();
        assert_eq!(back.seed, 255);
        assert_eq!(back.re.s_l, 0.1);
        assert_eq!(back.mode, TrainMode::Baseline);
        assert!(!back.occlude_queries);
        assert_eq!(back.resolved_text(), cfg.resolved_text());
    }

    #[test]
    fn unknown_key_and_bad_values_name_the_key() {
        let mut cfg = RunConfig::default();
        let err = cfg.set("nope.key", "1").unwrap_err().to_string();
        assert!(err.contains("nope.key"), "{err}");
        let err = cfg.set("pk.p", "abc").unwrap_err().to_string();
        assert!(err.contains("pk.p"), "{err}");
        cfg.set("synth.num_parts", "1").unwrap();
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("num_parts"), "{err}");
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.conf");
        std::fs::write(&path, "# comment\n\nseed = 7\n  pk.k = 3\n").unwrap();
        let cfg = RunConfig::from_file(&path).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.pk.k, 3);
    }

    #[test]
    fn ablate_seed_list_parses() {
        let mut cfg = RunConfig::default();
        cfg.set("ablate.seeds", "1, 2, 0x10").unwrap();
        assert_eq!(cfg.ablate_seeds, vec![1, 2, 16]);
        assert!(cfg.set("ablate.seeds", "").is_err());
    }
}
