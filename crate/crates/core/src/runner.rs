//! Command implementations behind the CLI: dataset generation, training,
//! evaluation, the ablation ladder, erase demos, attribution dumps, and
//! gradient checks. All file outputs are byte-deterministic for a fixed
//! (config, seed).

use std::fmt::Write as FmtWrite;
use std::fs;
use std::path::{Path, PathBuf};

use crate::attribution::occlusion_attribution;
use crate::config::RunConfig;
use crate::dataset::save_dataset;
use crate::erasing::{apply_bce_subbatch, apply_re, stripe_rows};
use crate::error::{Error, Result};
use crate::evalkit::EvalReport;
use crate::gradcheck::{self, CheckReport};
use crate::image::{save_ppm, Image};
use crate::model::Model;
use crate::rng::SplitMix64;
use crate::trainer::{
    ablation_ladder, derive_model_config, evaluate_model, load_run_dataset, prepare_data,
    run_ablation, run_training, AblationRow, ExperimentRecord,
};

pub const CHECKPOINT_FILE: &str = "checkpoint.umfl";

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, text)?;
    Ok(())
}

fn fmt_f(v: f64) -> String {
    format!("{v:.9}")
}

/// Generates the synthetic dataset and writes `manifest.csv` plus one PPM
/// per sample.
pub fn cmd_gen_data(cfg: &RunConfig, out_dir: &Path) -> Result<usize> {
    cfg.validate()?;
    let mut root = SplitMix64::new(cfg.seed);
    let mut data_rng = root.fork();
    let dataset = load_run_dataset(cfg, &mut data_rng)?;
    fs::create_dir_all(out_dir)?;
    save_dataset(&dataset, out_dir)?;
    Ok(dataset.samples.len())
}

fn metrics_csv(record: &ExperimentRecord) -> String {
    let mut s = String::from("step,l_sht_sub,l_sht_full,l_f,l_c,total\n");
    for (i, r) in record.steps.iter().enumerate() {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            i + 1,
            fmt_f(r.l_sht_sub),
            fmt_f(r.l_sht_full),
            fmt_f(r.l_f),
            fmt_f(r.l_c),
            fmt_f(r.total)
        );
    }
    s
}

fn epoch_eval_csv(record: &ExperimentRecord) -> String {
    let mut s = String::from("epoch,map,cmc_1,cmc_5,cmc_10,num_queries\n");
    for (e, r) in record.epoch_evals.iter().enumerate() {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            e + 1,
            fmt_f(r.map),
            fmt_f(r.cmc_at(1)),
            fmt_f(r.cmc_at(5)),
            fmt_f(r.cmc_at(10)),
            r.num_queries
        );
    }
    s
}

fn eval_report_csv(report: &EvalReport) -> String {
    format!(
        "map,cmc_1,cmc_5,cmc_10,num_queries\n{},{},{},{},{}\n",
        fmt_f(report.map),
        fmt_f(report.cmc_at(1)),
        fmt_f(report.cmc_at(5)),
        fmt_f(report.cmc_at(10)),
        report.num_queries
    )
}

pub struct TrainSummary {
    pub record: ExperimentRecord,
    pub final_eval: Option<EvalReport>,
    pub checkpoint_path: PathBuf,
}

/// Trains per the config, writing `config_resolved.txt`, `metrics.csv`,
/// `epoch_eval.csv`, the final checkpoint, and (when at least one epoch
/// ran) `eval_report.csv`.
pub fn cmd_train(cfg: &RunConfig, out_dir: &Path) -> Result<TrainSummary> {
    fs::create_dir_all(out_dir)?;
    write_text(&out_dir.join("config_resolved.txt"), &cfg.resolved_text())?;
    let out = run_training(cfg)?;
    write_text(&out_dir.join("metrics.csv"), &metrics_csv(&out.record))?;
    write_text(&out_dir.join("epoch_eval.csv"), &epoch_eval_csv(&out.record))?;
    let checkpoint_path = out_dir.join(CHECKPOINT_FILE);
    out.model.save(&checkpoint_path)?;
    if let Some(final_eval) = &out.final_eval {
        write_text(&out_dir.join("eval_report.csv"), &eval_report_csv(final_eval))?;
    }
    Ok(TrainSummary { record: out.record, final_eval: out.final_eval, checkpoint_path })
}

/// Loads a checkpoint, rebuilds the deterministic dataset/split, embeds
/// query and gallery, and writes `eval_report.csv`.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, out_dir: &Path) -> Result<EvalReport> {
    cfg.validate()?;
    let mut root = SplitMix64::new(cfg.seed);
    let mut data_rng = root.fork();
    let _init_rng = root.fork();
    let _train_rng = root.fork();
    let mut eval_rng = root.fork();
    let dataset = load_run_dataset(cfg, &mut data_rng)?;
    let data = prepare_data(cfg, &dataset, &mut eval_rng)?;
    let model_cfg = derive_model_config(cfg, &data)?;
    let model = Model::load(checkpoint, model_cfg)?;
    let report = evaluate_model(&model, &data)?;
    fs::create_dir_all(out_dir)?;
    write_text(&out_dir.join("eval_report.csv"), &eval_report_csv(&report))?;
    Ok(report)
}

/// Runs the full ablation ladder over the configured seed list and writes
/// `ablation.csv` with per-variant medians.
pub fn cmd_ablate(cfg: &RunConfig, out_dir: &Path) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    let rows = run_ablation(cfg, &ablation_ladder())?;
    let mut s = String::from("variant,median_map,median_rank1,seeds\n");
    for row in &rows {
        let _ = writeln!(
            s,
            "{},{},{},{}",
            row.variant,
            fmt_f(row.median_map),
            fmt_f(row.median_rank1),
            row.per_seed.iter().map(|(s, _, _)| s.to_string()).collect::<Vec<_>>().join(";")
        );
    }
    fs::create_dir_all(out_dir)?;
    write_text(&out_dir.join("ablation.csv"), &s)?;
    Ok(rows)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EraseDemoMode {
    Re,
    Bce,
}

impl EraseDemoMode {
    pub fn parse(text: &str) -> Result<Self> {
        match text {
            "re" => Ok(EraseDemoMode::Re),
            "bce" => Ok(EraseDemoMode::Bce),
            other => Err(Error::config(format!("--mode: expected re|bce, got `{other}`"))),
        }
    }
}

/// Applies one erasing mode to a handful of samples, writing before/after
/// PPM pairs and a region CSV. With `dump_hier` it also samples one full
/// hierarchical batch and writes its RE and BcE views as numbered PPMs.
pub fn cmd_erase_demo(
    cfg: &RunConfig,
    mode: EraseDemoMode,
    out_dir: &Path,
    dump_hier: bool,
) -> Result<()> {
    cfg.validate()?;
    let mut root = SplitMix64::new(cfg.seed);
    let mut data_rng = root.fork();
    let mut demo_rng = root.fork();
    let dataset = load_run_dataset(cfg, &mut data_rng)?;
    let count = dataset.samples.len().min(8);
    let samples = &dataset.samples[..count];
    let fill = crate::dataset::mean_pixel(&dataset)?;

    if dump_hier {
        let raw = crate::batching::sample_pk(&dataset, &mut demo_rng, &cfg.pk)?;
        let hier =
            crate::batching::build_hier_batch(&raw, &mut demo_rng, &cfg.re, &cfg.bce, &fill)?;
        fs::create_dir_all(out_dir)?;
        for (i, img) in hier.images_re.iter().enumerate() {
            save_ppm(img, &out_dir.join(format!("hier_re_{i:03}.ppm")))?;
        }
        for (i, img) in hier.images_bce.iter().enumerate() {
            save_ppm(img, &out_dir.join(format!("hier_bce_{i:03}.ppm")))?;
        }
    }

    fs::create_dir_all(out_dir)?;
    let mut csv = String::from("sample_id,mode,top,left,height,width,s,stripe_index\n");
    match mode {
        EraseDemoMode::Re => {
            for sample in samples {
                save_ppm(&sample.image, &out_dir.join(format!("before_{:05}.ppm", sample.sample_id)))?;
                let (after, region) = apply_re(&sample.image, &mut demo_rng, &cfg.re, &fill)?;
                save_ppm(&after, &out_dir.join(format!("after_{:05}.ppm", sample.sample_id)))?;
                match region {
                    Some(r) => {
                        let _ = writeln!(
                            csv,
                            "{},re,{},{},{},{},,",
                            sample.sample_id, r.top, r.left, r.height, r.width
                        );
                    }
                    None => {
                        let _ = writeln!(csv, "{},re,,,,,,", sample.sample_id);
                    }
                }
            }
        }
        EraseDemoMode::Bce => {
            let images: Vec<Image> = samples.iter().map(|s| s.image.clone()).collect();
            for sample in samples {
                save_ppm(&sample.image, &out_dir.join(format!("before_{:05}.ppm", sample.sample_id)))?;
            }
            let (erased, s, stripe_index) =
                apply_bce_subbatch(&images, &mut demo_rng, &cfg.bce, &fill)?;
            let band = stripe_rows(images[0].height, s, stripe_index);
            for (sample, after) in samples.iter().zip(erased.iter()) {
                save_ppm(after, &out_dir.join(format!("after_{:05}.ppm", sample.sample_id)))?;
                let _ = writeln!(
                    csv,
                    "{},bce,{},0,{},{},{},{}",
                    sample.sample_id,
                    band.start,
                    band.end - band.start,
                    images[0].width,
                    s,
                    stripe_index
                );
            }
        }
    }
    write_text(&out_dir.join("regions.csv"), &csv)?;
    Ok(())
}

/// Occlusion attribution of every test-split image under a checkpoint;
/// writes `attribution.csv` and optional per-image sensitivity overlays.
pub fn cmd_attribution(
    cfg: &RunConfig,
    checkpoint: &Path,
    out_dir: &Path,
    overlays: bool,
) -> Result<()> {
    cfg.validate()?;
    let mut root = SplitMix64::new(cfg.seed);
    let mut data_rng = root.fork();
    let _init_rng = root.fork();
    let _train_rng = root.fork();
    let mut eval_rng = root.fork();
    let dataset = load_run_dataset(cfg, &mut data_rng)?;
    let data = prepare_data(cfg, &dataset, &mut eval_rng)?;
    let model_cfg = derive_model_config(cfg, &data)?;
    let model = Model::load(checkpoint, model_cfg)?;

    let s = cfg.occlusion_stripes;
    fs::create_dir_all(out_dir)?;
    let mut csv = String::from("sample_id");
    for i in 0..s {
        let _ = write!(csv, ",sigma_{i}");
    }
    csv.push_str(",entropy\n");

    for (img, sample_id) in data.test_images.iter().zip(data.test_sample_ids.iter()) {
        let map = occlusion_attribution(&model, img, s, &data.fill_value)?;
        let _ = write!(csv, "{sample_id}");
        for v in &map.stripe_sensitivity {
            let _ = write!(csv, ",{}", fmt_f(*v));
        }
        let _ = writeln!(csv, ",{}", fmt_f(map.entropy));

        if overlays {
            let q = map.normalized();
            let peak = q.iter().cloned().fold(0.0f64, f64::max).max(1e-12);
            let mut overlay = Image::filled(img.height, img.width, 1, 0.0)?;
            for stripe in 0..s {
                let level = q[stripe] / peak;
                for y in stripe_rows(img.height, s, stripe) {
                    for x in 0..img.width {
                        overlay.set(y, x, 0, level);
                    }
                }
            }
            save_ppm(&overlay, &out_dir.join(format!("overlay_{sample_id:05}.ppm")))?;
        }
    }
    write_text(&out_dir.join("attribution.csv"), &csv)?;
    Ok(())
}

/// Finite-difference gradient verification of every op and loss, plus the
/// end-to-end model check.
pub fn cmd_gradcheck(seed: u64, points: usize) -> Result<Vec<CheckReport>> {
    let mut reports = gradcheck::run_primitive_checks(seed, points)?;
    reports.extend(gradcheck::run_loss_checks(seed, points)?);
    reports.push(gradcheck::run_full_model_check(seed)?);
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::batching::PkConfig;

    fn tiny_cfg() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.synth.num_identities = 9;
        cfg.synth.samples_per_identity = 4;
        cfg.synth.height = 16;
        cfg.synth.width = 8;
        cfg.pk = PkConfig { p: 2, k: 2 };
        cfg.embedding_dim = 8;
        cfg.epochs = 1;
        cfg.steps_per_epoch = 2;
        cfg.query_per_identity = 1;
        cfg.occlusion_stripes = 4;
        cfg.seed = 5;
        cfg
    }

    #[test]
    fn gen_data_writes_manifest_and_ppms() {
        let cfg = tiny_cfg();
        let dir = tempfile::tempdir().unwrap();
        let n = cmd_gen_data(&cfg, dir.path()).unwrap();
        assert_eq!(n, 36);
        let manifest = fs::read_to_string(dir.path().join("manifest.csv")).unwrap();
        assert_eq!(manifest.lines().count(), 37); // header + rows
        assert!(dir.path().join("images/00000.ppm").exists());
        assert!(dir.path().join("images/00035.ppm").exists());
    }

    #[test]
    fn gen_data_is_byte_deterministic() {
        let cfg = tiny_cfg();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        cmd_gen_data(&cfg, d1.path()).unwrap();
        cmd_gen_data(&cfg, d2.path()).unwrap();
        let m1 = fs::read(d1.path().join("manifest.csv")).unwrap();
        let m2 = fs::read(d2.path().join("manifest.csv")).unwrap();
        assert_eq!(m1, m2);
        let p1 = fs::read(d1.path().join("images/00007.ppm")).unwrap();
        let p2 = fs::read(d2.path().join("images/00007.ppm")).unwrap();
        assert_eq!(p1, p2);
    }

    #[test]
    fn train_then_eval_round_trips_the_checkpoint() {
        let cfg = tiny_cfg();
        let dir = tempfile::tempdir().unwrap();
        let summary = cmd_train(&cfg, dir.path()).unwrap();
        assert!(summary.checkpoint_path.exists());
        assert!(dir.path().join("metrics.csv").exists());
        let train_eval = summary.final_eval.unwrap();

        let eval_dir = tempfile::tempdir().unwrap();
        let report = cmd_eval(&cfg, &summary.checkpoint_path, eval_dir.path()).unwrap();
        assert_eq!(report.map.to_bits(), train_eval.map.to_bits());
        assert_eq!(report.cmc_at(1).to_bits(), train_eval.cmc_at(1).to_bits());
    }

    #[test]
    fn eval_is_deterministic_across_invocations() {
        let cfg = tiny_cfg();
        let dir = tempfile::tempdir().unwrap();
        let summary = cmd_train(&cfg, dir.path()).unwrap();
        let e1 = tempfile::tempdir().unwrap();
        let e2 = tempfile::tempdir().unwrap();
        cmd_eval(&cfg, &summary.checkpoint_path, e1.path()).unwrap();
        cmd_eval(&cfg, &summary.checkpoint_path, e2.path()).unwrap();
        let r1 = fs::read(e1.path().join("eval_report.csv")).unwrap();
        let r2 = fs::read(e2.path().join("eval_report.csv")).unwrap();
        assert_eq!(r1, r2);
    }

    #[test]
    fn erase_demo_outputs_pairs_and_regions() {
        let cfg = tiny_cfg();
        for (mode, tag) in [(EraseDemoMode::Re, "re"), (EraseDemoMode::Bce, "bce")] {
            let dir = tempfile::tempdir().unwrap();
            cmd_erase_demo(&cfg, mode, dir.path(), false).unwrap();
            let csv = fs::read_to_string(dir.path().join("regions.csv")).unwrap();
            assert!(csv.lines().count() > 1);
            assert!(csv.contains(tag));
            assert!(dir.path().join("before_00000.ppm").exists());
            assert!(dir.path().join("after_00000.ppm").exists());
        }
    }

    #[test]
    fn erase_demo_can_dump_a_hier_batch() {
        let cfg = tiny_cfg();
        let dir = tempfile::tempdir().unwrap();
        cmd_erase_demo(&cfg, EraseDemoMode::Re, dir.path(), true).unwrap();
        // P=2, K=2 -> 4 images per view.
        assert!(dir.path().join("hier_re_003.ppm").exists());
        assert!(dir.path().join("hier_bce_003.ppm").exists());
        assert!(!dir.path().join("hier_re_004.ppm").exists());
    }

    #[test]
    fn attribution_writes_rows_for_every_test_image() {
        let cfg = tiny_cfg();
        let dir = tempfile::tempdir().unwrap();
        let summary = cmd_train(&cfg, dir.path()).unwrap();
        let out = tempfile::tempdir().unwrap();
        cmd_attribution(&cfg, &summary.checkpoint_path, out.path(), true).unwrap();
        let csv = fs::read_to_string(out.path().join("attribution.csv")).unwrap();
        // 3 test identities x 4 samples = 12 rows + header.
        assert_eq!(csv.lines().count(), 13);
        assert!(csv.starts_with("sample_id,sigma_0,sigma_1,sigma_2,sigma_3,entropy"));
        let overlays = fs::read_dir(out.path())
            .unwrap()
            .filter(|e| {
                e.as_ref().unwrap().file_name().to_string_lossy().starts_with("overlay_")
            })
            .count();
        assert_eq!(overlays, 12);
    }

    #[test]
    fn invalid_config_is_a_config_error() {
        let mut cfg = tiny_cfg();
        cfg.synth.num_parts = 1;
        let dir = tempfile::tempdir().unwrap();
        match cmd_gen_data(&cfg, dir.path()) {
            Err(Error::Config(msg)) => assert!(msg.contains("num_parts"), "{msg}"),
            other => panic!("expected config error, got {other:?}"),
        }
    }
}
