//! Experiment orchestration: identity-disjoint splits, the training loops
//! for the hierarchical (umfl) and single-batch (baseline) modes, per-epoch
//! retrieval evaluation, and the ablation ladder.
//!
//! RNG streams fork from the run seed in a fixed order (data, init, train,
//! eval), so every artifact of a run is a pure function of (config, seed).

use std::collections::BTreeSet;

use crate::batching::{build_hier_batch, sample_pk, PkConfig};
use crate::config::{DataSource, RunConfig, TrainMode};
use crate::dataset::{load_dataset, mean_pixel, Dataset};
use crate::erasing::{apply_re, stripe_rows};
use crate::error::{Error, Result};
use crate::evalkit::{evaluate, EvalReport};
use crate::image::Image;
use crate::losses::{
    tape_batch_hard_softplus, tape_pairwise_distances, tape_total_loss, LossReport,
};
use crate::model::{Model, ModelConfig};
use crate::optim::OptimState;
use crate::rng::{RandomSource, SplitMix64};
use crate::synth::gen_synthetic_dataset;
use crate::autodiff::Tape;

/// Images embedded per inference tape; bounds activation memory.
const EMBED_CHUNK: usize = 32;

#[derive(Clone, Debug)]
pub struct PreparedData {
    /// Training split with identities relabeled to 0..num_train_identities.
    pub train: Dataset,
    pub num_train_identities: usize,
    /// Per-channel mean pixel of the training split (erasing fill).
    pub fill_value: Vec<f64>,
    /// Query set; one stripe occluded per image when configured.
    pub query_images: Vec<Image>,
    pub query_labels: Vec<usize>,
    pub query_sample_ids: Vec<usize>,
    pub gallery_images: Vec<Image>,
    pub gallery_labels: Vec<usize>,
    pub gallery_sample_ids: Vec<usize>,
    /// All raw (un-occluded) test-split images, dataset order.
    pub test_images: Vec<Image>,
    pub test_sample_ids: Vec<usize>,
}

#[derive(Clone, Debug, Default)]
pub struct ExperimentRecord {
    pub steps: Vec<LossReport>,
    pub epoch_evals: Vec<EvalReport>,
}

pub struct TrainOutput {
    pub model: Model,
    pub record: ExperimentRecord,
    pub final_eval: Option<EvalReport>,
    pub data: PreparedData,
}

/// Loads or generates the dataset for a run. Consumes the data fork even
/// for manifest sources so downstream streams stay aligned.
pub fn load_run_dataset(cfg: &RunConfig, data_rng: &mut SplitMix64) -> Result<Dataset> {
    match &cfg.data_source {
        DataSource::Synthetic => gen_synthetic_dataset(&cfg.synth, data_rng),
        DataSource::Manifest(path) => load_dataset(path),
    }
}

/// Identity-disjoint split: the first `round(fraction * n)` identities
/// train, the rest test. Within each test identity the leading
/// `query_per_identity` samples are queries, the remainder gallery.
pub fn prepare_data(
    cfg: &RunConfig,
    dataset: &Dataset,
    eval_rng: &mut SplitMix64,
) -> Result<PreparedData> {
    dataset.validate()?;
    let n = dataset.num_identities;
    let train_count =
        ((cfg.train_fraction * n as f64).round() as usize).clamp(1, n.saturating_sub(1));
    if n < 2 {
        return Err(Error::precondition(
            "split: need at least 2 identities for a train/test split".to_string(),
        ));
    }
    if train_count < cfg.pk.p {
        return Err(Error::precondition(format!(
            "split: {train_count} train identities < pk.p = {}",
            cfg.pk.p
        )));
    }
    let train_ids: Vec<usize> = (0..train_count).collect();
    let test_ids: BTreeSet<usize> = (train_count..n).collect();

    let train = dataset.subset(&train_ids)?;
    let fill_value = mean_pixel(&train)?;

    let mut query_images = Vec::new();
    let mut query_labels = Vec::new();
    let mut query_sample_ids = Vec::new();
    let mut gallery_images = Vec::new();
    let mut gallery_labels = Vec::new();
    let mut gallery_sample_ids = Vec::new();
    let mut test_images = Vec::new();
    let mut test_sample_ids = Vec::new();

    let mut seen_per_identity = vec![0usize; n];
    for s in &dataset.samples {
        if !test_ids.contains(&s.identity) {
            continue;
        }
        test_images.push(s.image.clone());
        test_sample_ids.push(s.sample_id);
        let seen = seen_per_identity[s.identity];
        seen_per_identity[s.identity] += 1;
        if seen < cfg.query_per_identity {
            query_images.push(s.image.clone());
            query_labels.push(s.identity);
            query_sample_ids.push(s.sample_id);
        } else {
            gallery_images.push(s.image.clone());
            gallery_labels.push(s.identity);
            gallery_sample_ids.push(s.sample_id);
        }
    }
    for &id in &test_ids {
        if seen_per_identity[id] <= cfg.query_per_identity {
            return Err(Error::precondition(format!(
                "split: identity {id} has {} samples, needs more than query_per_identity = {}",
                seen_per_identity[id], cfg.query_per_identity
            )));
        }
    }

    if cfg.occlude_queries {
        // One uniformly chosen stripe per query, fixed for the whole run.
        for img in query_images.iter_mut() {
            let stripe =
                eval_rng.uniform_int(0, cfg.occlusion_stripes as i64 - 1)? as usize;
            for y in stripe_rows(img.height, cfg.occlusion_stripes, stripe) {
                for x in 0..img.width {
                    for c in 0..img.channels {
                        img.set(y, x, c, fill_value[c]);
                    }
                }
            }
        }
    }

    Ok(PreparedData {
        train,
        num_train_identities: train_count,
        fill_value,
        query_images,
        query_labels,
        query_sample_ids,
        gallery_images,
        gallery_labels,
        gallery_sample_ids,
        test_images,
        test_sample_ids,
    })
}

/// Model configuration implied by the run config and the dataset images.
pub fn derive_model_config(cfg: &RunConfig, data: &PreparedData) -> Result<ModelConfig> {
    let first = &data
        .train
        .samples
        .first()
        .ok_or_else(|| Error::precondition("train split is empty".to_string()))?
        .image;
    let model_cfg = ModelConfig {
        arch: cfg.arch,
        embedding_dim: cfg.embedding_dim,
        num_classes: data.num_train_identities,
        input_h: first.height,
        input_w: first.width,
        input_c: first.channels,
    };
    model_cfg.validate()?;
    Ok(model_cfg)
}

fn embed_chunked(model: &Model, images: &[Image]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(EMBED_CHUNK) {
        let refs: Vec<&Image> = chunk.iter().collect();
        out.extend(model.embed_images(&refs)?);
    }
    Ok(out)
}

/// Embeds the held-out split and scores retrieval.
pub fn evaluate_model(model: &Model, data: &PreparedData) -> Result<EvalReport> {
    let qz = embed_chunked(model, &data.query_images)?;
    let gz = embed_chunked(model, &data.gallery_images)?;
    evaluate(&qz, &data.query_labels, &gz, &data.gallery_labels)
}

fn umfl_step<R: RandomSource>(
    cfg: &RunConfig,
    model: &mut Model,
    optim: &mut OptimState,
    data: &PreparedData,
    rng: &mut R,
) -> Result<LossReport> {
    let raw = sample_pk(&data.train, rng, &cfg.pk)?;
    let hier = build_hier_batch(&raw, rng, &cfg.re, &cfg.bce, &data.fill_value)?;
    let b = hier.sub_batch_size();

    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let input = tape.leaf(model.images_to_input(&hier.images_full())?);
    let z = bound.embed(&mut tape, input)?;
    let logits = bound.classify(&mut tape, z)?;
    let (total, report) = tape_total_loss(&mut tape, z, logits, &hier.labels, b, &cfg.loss)?;
    tape.backward(total)?;
    model.capture_grads(&tape, &bound)?;
    optim.step(&mut model.params)?;
    Ok(report)
}

/// One baseline step: a single RE sub-batch of size 2B (P identities,
/// 2K samples each), batch-hard softplus triplet plus classification.
fn baseline_step<R: RandomSource>(
    cfg: &RunConfig,
    model: &mut Model,
    optim: &mut OptimState,
    data: &PreparedData,
    rng: &mut R,
) -> Result<LossReport> {
    let pk2 = PkConfig { p: cfg.pk.p, k: 2 * cfg.pk.k };
    let raw = sample_pk(&data.train, rng, &pk2)?;
    let mut images = Vec::with_capacity(raw.images.len());
    for img in &raw.images {
        let (erased, _) = apply_re(img, rng, &cfg.re, &data.fill_value)?;
        images.push(erased);
    }

    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let refs: Vec<&Image> = images.iter().collect();
    let input = tape.leaf(model.images_to_input(&refs)?);
    let z = bound.embed(&mut tape, input)?;
    let logits = bound.classify(&mut tape, z)?;
    let d = tape_pairwise_distances(&mut tape, z, cfg.loss.distance_epsilon)?;
    let l_t = tape_batch_hard_softplus(&mut tape, d, &raw.labels)?;
    let l_c = tape.softmax_cross_entropy(logits, &raw.labels)?;
    let wt = tape.mul_scalar(l_t, cfg.loss.w_full)?;
    let wc = tape.mul_scalar(l_c, cfg.loss.w_cls)?;
    let total = tape.add(wt, wc)?;

    let report = LossReport {
        l_sht_sub: 0.0,
        l_sht_full: tape.value(l_t).item(),
        l_f: 0.0,
        l_c: tape.value(l_c).item(),
        total: tape.value(total).item(),
    };
    tape.backward(total)?;
    model.capture_grads(&tape, &bound)?;
    optim.step(&mut model.params)?;
    Ok(report)
}

/// Full training run: data -> init -> steps -> per-epoch eval, all from
/// deterministic forks of the run seed.
pub fn run_training(cfg: &RunConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    let mut root = SplitMix64::new(cfg.seed);
    let mut data_rng = root.fork();
    let mut init_rng = root.fork();
    let mut train_rng = root.fork();
    let mut eval_rng = root.fork();

    let dataset = load_run_dataset(cfg, &mut data_rng)?;
    let data = prepare_data(cfg, &dataset, &mut eval_rng)?;
    let model_cfg = derive_model_config(cfg, &data)?;
    let mut model = Model::init(model_cfg, &mut init_rng)?;
    let mut optim = OptimState::new(cfg.optim, &model.params)?;

    let mut record = ExperimentRecord::default();
    let mut step_no = 0usize;
    for _epoch in 0..cfg.epochs {
        for _ in 0..cfg.steps_per_epoch {
            step_no += 1;
            let report = match cfg.mode {
                TrainMode::Umfl => umfl_step(cfg, &mut model, &mut optim, &data, &mut train_rng),
                TrainMode::Baseline => {
                    baseline_step(cfg, &mut model, &mut optim, &data, &mut train_rng)
                }
            }
            .map_err(|e| match e {
                Error::Numeric(msg) => Error::numeric(format!("step {step_no}: {msg}")),
                other => other,
            })?;
            record.steps.push(report);
        }
        record.epoch_evals.push(evaluate_model(&model, &data)?);
    }
    let final_eval = record.epoch_evals.last().cloned();
    Ok(TrainOutput { model, record, final_eval, data })
}

/// One rung of the ablation ladder: a named tweak of the run config.
#[derive(Clone, Copy, Debug)]
pub struct AblationVariant {
    pub key: &'static str,
    pub mode: TrainMode,
    /// RE skip probability override (base rung disables erasing).
    pub re_probability: Option<f64>,
    pub w_full: Option<f64>,
    pub w_focal: Option<f64>,
}

impl AblationVariant {
    pub fn apply(&self, cfg: &RunConfig) -> RunConfig {
        let mut out = cfg.clone();
        out.mode = self.mode;
        if let Some(p) = self.re_probability {
            out.re.probability = p;
        }
        if let Some(w) = self.w_full {
            out.loss.w_full = w;
        }
        if let Some(w) = self.w_focal {
            out.loss.w_focal = w;
        }
        out
    }
}

/// The five rungs: base triplet, +RE, RE(.)BcE with the sub-batch loss,
/// +full-batch loss, +focal.
pub fn ablation_ladder() -> Vec<AblationVariant> {
    vec![
        AblationVariant {
            key: "base_hard_triplet",
            mode: TrainMode::Baseline,
            re_probability: Some(0.0),
            w_full: None,
            w_focal: None,
        },
        AblationVariant {
            key: "base_re_hard_triplet",
            mode: TrainMode::Baseline,
            re_probability: None,
            w_full: None,
            w_focal: None,
        },
        AblationVariant {
            key: "re_bce_lsub",
            mode: TrainMode::Umfl,
            re_probability: None,
            w_full: Some(0.0),
            w_focal: Some(0.0),
        },
        AblationVariant {
            key: "re_bce_lsub_lfull",
            mode: TrainMode::Umfl,
            re_probability: None,
            w_full: None,
            w_focal: Some(0.0),
        },
        AblationVariant {
            key: "umfl_full",
            mode: TrainMode::Umfl,
            re_probability: None,
            w_full: None,
            w_focal: None,
        },
    ]
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub variant: &'static str,
    pub median_map: f64,
    pub median_rank1: f64,
    pub per_seed: Vec<(u64, f64, f64)>,
}

/// Trains every (variant, seed) pair — in parallel, one thread each — and
/// reduces to per-variant medians in ladder order.
pub fn run_ablation(cfg: &RunConfig, variants: &[AblationVariant]) -> Result<Vec<AblationRow>> {
    let seeds = cfg.ablate_seeds.clone();
    let mut results: Vec<Vec<Option<(f64, f64)>>> =
        vec![vec![None; seeds.len()]; variants.len()];

    std::thread::scope(|scope| -> Result<()> {
        let mut handles = Vec::new();
        for (vi, variant) in variants.iter().enumerate() {
            for (si, &seed) in seeds.iter().enumerate() {
                let mut run_cfg = variant.apply(cfg);
                run_cfg.seed = seed;
                handles.push((
                    vi,
                    si,
                    scope.spawn(move || -> Result<(f64, f64)> {
                        let out = run_training(&run_cfg)?;
                        let eval = out.final_eval.ok_or_else(|| {
                            Error::precondition("ablation: run produced no evaluation".to_string())
                        })?;
                        Ok((eval.map, eval.cmc_at(1)))
                    }),
                ));
            }
        }
        for (vi, si, handle) in handles {
            let res = handle.join().map_err(|_| {
                Error::numeric("ablation: worker thread panicked".to_string())
            })??;
            results[vi][si] = Some(res);
        }
        Ok(())
    })?;

    let median = |mut vals: Vec<f64>| -> f64 {
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = vals.len();
        if n % 2 == 1 {
            vals[n / 2]
        } else {
            0.5 * (vals[n / 2 - 1] + vals[n / 2])
        }
    };

    Ok(variants
        .iter()
        .enumerate()
        .map(|(vi, v)| {
            let per_seed: Vec<(u64, f64, f64)> = seeds
                .iter()
                .enumerate()
                .map(|(si, &s)| {
                    let (m, r1) = results[vi][si].expect("all jobs joined");
                    (s, m, r1)
                })
                .collect();
            AblationRow {
                variant: v.key,
                median_map: median(per_seed.iter().map(|&(_, m, _)| m).collect()),
                median_rank1: median(per_seed.iter().map(|&(_, _, r)| r).collect()),
                per_seed,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.synth.num_identities = 12;
        cfg.synth.samples_per_identity = 4;
        cfg.synth.height = 16;
        cfg.synth.width = 8;
        cfg.pk = PkConfig { p: 2, k: 2 };
        cfg.embedding_dim = 8;
        cfg.epochs = 1;
        cfg.steps_per_epoch = 2;
        cfg.query_per_identity = 1;
        cfg.occlusion_stripes = 4;
        cfg.seed = 123;
        cfg
    }

    #[test]
    fn split_is_identity_disjoint() {
        let cfg = tiny_cfg();
        let mut root = SplitMix64::new(cfg.seed);
        let mut data_rng = root.fork();
        let _ = root.fork();
        let _ = root.fork();
        let mut eval_rng = root.fork();
        let dataset = load_run_dataset(&cfg, &mut data_rng).unwrap();
        let data = prepare_data(&cfg, &dataset, &mut eval_rng).unwrap();
        // 2/3 of 12 = 8 train identities, labels 8..12 in the test split.
        assert_eq!(data.num_train_identities, 8);
        for &l in data.query_labels.iter().chain(data.gallery_labels.iter()) {
            assert!(l >= 8, "test label {l} leaked from the train range");
        }
        assert_eq!(data.query_images.len(), 4);
        assert_eq!(data.gallery_images.len(), 12);
    }

    #[test]
    fn epochs_zero_gives_empty_record() {
        let mut cfg = tiny_cfg();
        cfg.epochs = 0;
        let out = run_training(&cfg).unwrap();
        assert!(out.record.steps.is_empty());
        assert!(out.record.epoch_evals.is_empty());
        assert!(out.final_eval.is_none());
        // Parameters exist (initialization-only model).
        assert!(!out.model.params.is_empty());
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = tiny_cfg();
        let a = run_training(&cfg).unwrap();
        let b = run_training(&cfg).unwrap();
        assert_eq!(a.record.steps.len(), b.record.steps.len());
        for (x, y) in a.record.steps.iter().zip(b.record.steps.iter()) {
            assert_eq!(x.total.to_bits(), y.total.to_bits());
        }
        for (pa, pb) in a.model.params.iter().zip(b.model.params.iter()) {
            assert_eq!(pa.tensor.values, pb.tensor.values);
        }
    }

    #[test]
    fn baseline_mode_trains_and_reports_zero_extra_terms() {
        let mut cfg = tiny_cfg();
        cfg.mode = TrainMode::Baseline;
        let out = run_training(&cfg).unwrap();
        for step in &out.record.steps {
            assert_eq!(step.l_sht_sub, 0.0);
            assert_eq!(step.l_f, 0.0);
            assert!(step.l_sht_full > 0.0);
        }
    }

    #[test]
    fn umfl_loss_decreases_from_step_one() {
        let mut cfg = tiny_cfg();
        cfg.epochs = 3;
        cfg.steps_per_epoch = 10;
        let out = run_training(&cfg).unwrap();
        let first = out.record.steps.first().unwrap().total;
        let last = out.record.steps.last().unwrap().total;
        assert!(last < first, "loss did not improve: {first} -> {last}");
    }

    #[test]
    fn ablation_ladder_has_five_rungs_and_runs() {
        let ladder = ablation_ladder();
        assert_eq!(ladder.len(), 5);
        let mut cfg = tiny_cfg();
        cfg.ablate_seeds = vec![9];
        // Two rungs keep the test fast.
        let rows = run_ablation(&cfg, &[ladder[0], ladder[4]]).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].variant, "base_hard_triplet");
        assert_eq!(rows[1].variant, "umfl_full");
        for row in rows {
            assert!((0.0..=1.0).contains(&row.median_map));
        }
    }

    #[test]
    fn untrained_model_beats_label_shuffle_baseline() {
        // A random-init model on the synthetic split must retrieve better
        // than the chance level obtained by shuffling gallery labels.
        let mut cfg = tiny_cfg();
        cfg.epochs = 0;
        let out = run_training(&cfg).unwrap();
        let real = evaluate_model(&out.model, &out.data).unwrap().map;

        let qz: Vec<Vec<f64>> = {
            let refs: Vec<&crate::image::Image> = out.data.query_images.iter().collect();
            out.model.embed_images(&refs).unwrap()
        };
        let gz: Vec<Vec<f64>> = {
            let refs: Vec<&crate::image::Image> = out.data.gallery_images.iter().collect();
            out.model.embed_images(&refs).unwrap()
        };
        let mut rng = SplitMix64::new(0xBA5E);
        let mut chance_total = 0.0;
        let trials = 20;
        for _ in 0..trials {
            let mut shuffled = out.data.gallery_labels.clone();
            for i in (1..shuffled.len()).rev() {
                let j = rng.uniform_int(0, i as i64).unwrap() as usize;
                shuffled.swap(i, j);
            }
            chance_total += crate::evalkit::evaluate(&qz, &out.data.query_labels, &gz, &shuffled)
                .unwrap()
                .map;
        }
        let chance = chance_total / trials as f64;
        assert!(real > chance, "untrained mAP {real} not above chance {chance}");
    }

    #[test]
    fn occluded_queries_differ_from_raw() {
        let cfg = tiny_cfg();
        let mut root = SplitMix64::new(cfg.seed);
        let mut data_rng = root.fork();
        let _ = root.fork();
        let _ = root.fork();
        let mut eval_rng = root.fork();
        let dataset = load_run_dataset(&cfg, &mut data_rng).unwrap();
        let data = prepare_data(&cfg, &dataset, &mut eval_rng).unwrap();
        // Raw copies of the query samples live in test_images.
        for (qi, sid) in data.query_sample_ids.iter().enumerate() {
            let raw_idx =
                data.test_sample_ids.iter().position(|s| s == sid).unwrap();
            assert_ne!(
                data.query_images[qi].data, data.test_images[raw_idx].data,
                "query {sid} was not occluded"
            );
        }
    }
}
