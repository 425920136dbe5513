//! Subcommand implementations.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::{info, warn};
use mtau_core::inference::segment_volume;
use mtau_core::metrics::{cases_csv, evaluate_case, summarize_cohort, HausdorffMode};
use mtau_core::model::{load_checkpoint, ModelParams};
use mtau_core::pipeline::container::{
    list_segs, read_cohort, read_manifest, read_scan, read_seg, scan_path, seg_path, write_cohort, write_seg,
};
use mtau_core::pipeline::{
    apply_split, filter_zero_slices, normalize_volume, select_threshold, slice_volumes, split_volume_ids, RegionId,
    RocPoint, SegVolume, SliceSample, ThresholdCriterion, Thresholds, VolumeScan, VolumeSplit, DEFAULT_THRESHOLD,
};
use mtau_core::synth::generate_cohort;
use mtau_core::training::{checkpoint_file, predict_samples, train_region_model};
use serde::Serialize;

use crate::config::RunConfig;
use crate::overlay::write_overlays;
use crate::{EvaluateArgs, InferArgs, Subset, SweepArgs, TrainArgs};

pub const SPLIT_FILE: &str = "split.json";
pub const THRESHOLDS_FILE: &str = "thresholds.json";
pub const THRESHOLD_REPORT_FILE: &str = "threshold_report.json";
pub const CASES_FILE: &str = "cases.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const EXCLUSIONS_FILE: &str = "exclusions.csv";

pub fn roc_file(region: RegionId) -> String {
    format!("roc_{}.csv", region.label())
}

/// Maps `f` over `items` on up to `threads` scoped workers, keeping input order.
pub fn parallel_map<T, R, F>(items: &[T], threads: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    if threads <= 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|s| {
        let f = &f;
        let handles: Vec<_> =
            items.chunks(chunk).map(|c| s.spawn(move || c.iter().map(f).collect::<Vec<_>>())).collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker thread panicked")).collect()
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn read_split(path: &Path) -> Result<VolumeSplit> {
    let text = fs::read_to_string(path).with_context(|| format!("reading split {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing split {}", path.display()))
}

fn load_models(dir: &Path) -> Result<[ModelParams<f32>; 3]> {
    let load = |r: RegionId| {
        let path = dir.join(checkpoint_file(r));
        load_checkpoint(&path).map(|(p, _)| p).with_context(|| format!("loading the region {r} model"))
    };
    Ok([load(RegionId::NcrNet)?, load(RegionId::Edema)?, load(RegionId::Enhancing)?])
}

/// Normalize, slice and drop all-zero slices.
fn prepare_samples(cohort: &[(VolumeScan, SegVolume)]) -> Result<Vec<SliceSample>> {
    let normalized = cohort
        .iter()
        .map(|(scan, seg)| Ok((normalize_volume(scan)?, seg.clone())))
        .collect::<mtau_core::Result<Vec<_>>>()?;
    Ok(filter_zero_slices(slice_volumes(&normalized)?))
}

pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    create_dir(out)?;
    let mut template = cfg.data.phantom.clone();
    template.seed = cfg.seed;
    let cohort = generate_cohort(cfg.data.n, &template, cfg.seed)?;
    write_cohort(out, &cohort, Some(cfg.seed)).with_context(|| format!("writing cohort to {}", out.display()))?;
    cfg.write(out)?;
    info!("wrote {} phantoms to {}", cohort.len(), out.display());
    Ok(())
}

pub fn train(cfg: &RunConfig, args: &TrainArgs, out: &Path) -> Result<()> {
    let cohort = read_cohort(&args.data, None).with_context(|| format!("loading cohort {}", args.data.display()))?;
    let ids: Vec<String> = cohort.iter().map(|(s, _)| s.id.clone()).collect();
    let split = split_volume_ids(&ids, cfg.seed, cfg.train.split)?;
    let data = apply_split(prepare_samples(&cohort)?, &split);
    info!(
        "{} volumes split {}/{}/{}; {} training and {} validation slices",
        ids.len(),
        split.train.len(),
        split.val.len(),
        split.test.len(),
        data.train.len(),
        data.val.len()
    );
    create_dir(out)?;
    write_json(&out.join(SPLIT_FILE), &split)?;
    cfg.write(out)?;

    let train_cfg = cfg.train_config(Some(out));
    let regions = args.region.regions();
    let results = parallel_map(&regions, cfg.threads, |&region| {
        train_region_model(&data.train, &data.val, region, &cfg.model, &train_cfg)
            .with_context(|| format!("training the region {region} model"))
    });
    for (region, result) in regions.iter().zip(results) {
        let outcome = result?;
        let best = outcome.history.best().expect("history has a best epoch");
        info!("region {region}: best epoch {} val loss {:.6} val dice {:.4}", best.epoch, best.val_loss, best.val_dice);
    }
    Ok(())
}

/// Outcome of one region's threshold sweep, as logged in the report file.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegionSweep {
    pub threshold: f64,
    pub criterion: ThresholdCriterion,
    /// Validation targets held a single class; the default threshold was kept.
    pub degenerate: bool,
    pub chosen: Option<RocPoint>,
    pub at_default: Option<RocPoint>,
    pub candidates: usize,
}

pub fn sweep_threshold(cfg: &RunConfig, args: &SweepArgs, out: &Path) -> Result<()> {
    let split_path = args.split.clone().unwrap_or_else(|| args.models.join(SPLIT_FILE));
    let split = read_split(&split_path)?;
    let cohort = read_cohort(&args.data, Some(&split.val)).context("loading validation volumes")?;
    let samples = prepare_samples(&cohort)?;
    let refs: Vec<&SliceSample> = samples.iter().collect();
    if refs.is_empty() {
        bail!("no validation slices in {}", split_path.display());
    }
    let models = load_models(&args.models)?;
    create_dir(out)?;

    let sweeps = parallel_map(&RegionId::ALL, cfg.threads, |&region| -> Result<(RegionSweep, String)> {
        let probs = predict_samples(&models[region.index()], &refs, cfg.train.batch_size)?.concat();
        let targets: Vec<u8> = refs.iter().flat_map(|s| s.target(region).iter().copied()).collect();
        match select_threshold(&probs, &targets, cfg.train.criterion) {
            Ok(choice) => {
                let mut roc = String::from("threshold,tpr,fpr,youden,dice\n");
                for p in &choice.roc {
                    let _ = writeln!(roc, "{},{},{},{},{}", p.threshold, p.tpr, p.fpr, p.youden(), p.dice);
                }
                info!(
                    "region {region}: threshold {} with J {:.4} (J at {DEFAULT_THRESHOLD}: {:.4})",
                    choice.threshold,
                    choice.chosen.youden(),
                    choice.at_default.youden()
                );
                let sweep = RegionSweep {
                    threshold: choice.threshold,
                    criterion: choice.criterion,
                    degenerate: false,
                    chosen: Some(choice.chosen),
                    at_default: Some(choice.at_default),
                    candidates: choice.roc.len(),
                };
                Ok((sweep, roc))
            }
            Err(mtau_core::Error::SingleClass) => {
                warn!("region {region}: validation targets hold a single class; keeping {DEFAULT_THRESHOLD}");
                let sweep = RegionSweep {
                    threshold: DEFAULT_THRESHOLD,
                    criterion: cfg.train.criterion,
                    degenerate: true,
                    chosen: None,
                    at_default: None,
                    candidates: 0,
                };
                Ok((sweep, String::from("threshold,tpr,fpr,youden,dice\n")))
            }
            Err(e) => Err(e.into()),
        }
    });

    let mut thresholds = Thresholds::default();
    let mut report = BTreeMap::new();
    for (region, result) in RegionId::ALL.iter().zip(sweeps) {
        let (sweep, roc) = result?;
        thresholds.set(*region, sweep.threshold);
        write_text(&out.join(roc_file(*region)), &roc)?;
        report.insert(region.label().to_string(), sweep);
    }
    write_json(&out.join(THRESHOLDS_FILE), &thresholds)?;
    write_json(&out.join(THRESHOLD_REPORT_FILE), &report)?;
    cfg.write(out)
}

fn infer_ids(args: &InferArgs) -> Result<Vec<String>> {
    if !args.cases.is_empty() {
        return Ok(args.cases.clone());
    }
    if let Some(path) = &args.split {
        let split = read_split(path)?;
        return Ok(match args.subset {
            Subset::Train => split.train,
            Subset::Val => split.val,
            Subset::Test => split.test,
        });
    }
    Ok(read_manifest(&args.data)?.cases)
}

pub fn infer(cfg: &RunConfig, args: &InferArgs, out: &Path) -> Result<()> {
    let text = fs::read_to_string(&args.thresholds)
        .with_context(|| format!("reading thresholds {}", args.thresholds.display()))?;
    let thresholds =
        Thresholds::from_json_str(&text).with_context(|| format!("parsing thresholds {}", args.thresholds.display()))?;
    let models = load_models(&args.models)?;
    let ids = infer_ids(args)?;
    if ids.is_empty() {
        bail!("no cases selected for inference");
    }
    create_dir(out)?;
    let results = parallel_map(&ids, cfg.threads, |id| -> Result<usize> {
        let scan = read_scan(&scan_path(&args.data, id)).with_context(|| format!("loading scan {id}"))?;
        let seg = segment_volume([&models[0], &models[1], &models[2]], &thresholds, &scan, cfg.train.batch_size)?;
        write_seg(out, &seg)?;
        if args.overlay {
            write_overlays(&out.join("overlay").join(id), &scan, &seg)?;
        }
        Ok(seg.labels().iter().filter(|&&l| l != 0).count())
    });
    for (id, result) in ids.iter().zip(results) {
        let tumor = result?;
        info!("{id}: {tumor} tumor voxels");
    }
    cfg.write(out)
}

pub fn evaluate(cfg: &RunConfig, args: &EvaluateArgs, out: &Path) -> Result<()> {
    let preds = list_segs(&args.pred).with_context(|| format!("listing {}", args.pred.display()))?;
    if preds.is_empty() {
        bail!("no label volumes in {}", args.pred.display());
    }
    let unmatched: Vec<&str> =
        preds.iter().filter(|(id, _)| !seg_path(&args.truth, id).exists()).map(|(id, _)| id.as_str()).collect();
    if !unmatched.is_empty() {
        bail!("no ground truth in {} for: {}", args.truth.display(), unmatched.join(", "));
    }
    let mode = if args.hd95 { HausdorffMode::Percentile95 } else { HausdorffMode::Exact };
    let pairs: Vec<(String, PathBuf)> = preds;
    let per_case = parallel_map(&pairs, cfg.threads, |(id, path)| {
        let pred = read_seg(path)?;
        let truth = read_seg(&seg_path(&args.truth, id))?;
        evaluate_case(&pred, &truth, mode).with_context(|| format!("evaluating {id}"))
    });
    let mut rows = Vec::new();
    for result in per_case {
        rows.extend(result?);
    }
    let summary = summarize_cohort(&rows)?;
    create_dir(out)?;
    write_text(&out.join(CASES_FILE), &cases_csv(&rows))?;
    write_text(&out.join(SUMMARY_FILE), &summary.to_csv())?;
    write_text(&out.join(EXCLUSIONS_FILE), &summary.exclusions_csv())?;
    info!("evaluated {} cases", pairs.len());
    cfg.write(out)
}
