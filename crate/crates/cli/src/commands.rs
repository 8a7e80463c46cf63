use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use dceseg_core::data::dataset::{list_case_ids, list_mask_ids, mask_path, series_path};
use dceseg_core::data::{
    average_breath_holds, extract_slices, load_cases, normalize, read_mask, read_series, write_mask,
    write_probability, write_series, BreathHoldGrouping, NormalizationParams, VolumeSeries,
};
use dceseg_core::eval::{box_stats, paired_t_test, pair_by_case, postprocess, wilcoxon_signed_rank, MetricsReport, DEFAULT_THRESHOLD};
use dceseg_core::experiment::{generate_cases, score};
use dceseg_core::models::spec::NUM_PHASES;
use dceseg_core::models::train::{prepare_examples, run_until};
use dceseg_core::models::{Checkpoint, CheckpointMeta, Network, Trainer};
use dceseg_core::nn::AdamConfig;
use dceseg_core::phantom::{default_ambiguity_spec, default_separable_spec, PhantomSpec};
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::manifest::RunManifest;
use crate::svg::{render, Panel};
use crate::{MetricName, Preset, TestName};

pub const CHECKPOINT_FILE: &str = "model.dcsg";
pub const LOSS_TRACE_FILE: &str = "loss_trace.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
const PROBABILITY_SUFFIX: &str = ".prob.mvf";

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

#[derive(Serialize)]
struct PhantomGenArgs<'a> {
    spec: &'a PhantomSpec,
    seed: u64,
    cases: usize,
}

pub fn phantom_gen(spec_file: Option<&Path>, preset: Preset, size: usize, out: &Path, seed: u64, cases: usize) -> Result<()> {
    ensure!(cases > 0, "--cases must be at least 1");
    let spec = match spec_file {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let spec: PhantomSpec = toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
            spec.validate()?;
            spec
        }
        None => match preset {
            Preset::Separable => default_separable_spec(size)?,
            Preset::Ambiguity => default_ambiguity_spec(size)?,
        },
    };
    create_dir(out)?;
    let mut manifest = RunManifest::start(
        "phantom-gen",
        PhantomGenArgs {
            spec: &spec,
            seed,
            cases,
        },
        Some(seed),
    );
    for case in generate_cases(&spec, seed, cases)? {
        let s = series_path(out, &case.id);
        let m = mask_path(out, &case.id);
        write_series(&case.series, &s)?;
        write_mask(&case.mask, &m)?;
        manifest.add_volume(out, &s)?;
        manifest.add_volume(out, &m)?;
    }
    let spec_out = out.join("spec.toml");
    std::fs::write(&spec_out, toml::to_string(&spec)?)?;
    manifest.add(out, &spec_out)?;
    manifest.write(&out.join(MANIFEST_FILE))?;
    Ok(())
}

/// Breath-hold averaging (when configured) followed by intensity normalization.
fn prepare_series(series: &VolumeSeries, breath_hold_sizes: Option<&[usize]>) -> Result<VolumeSeries> {
    let averaged = match breath_hold_sizes {
        Some(sizes) => {
            let grouping = BreathHoldGrouping::from_sizes(sizes)?;
            ensure!(
                series.num_phases() == grouping.num_acquisitions(),
                "breath_hold_sizes cover {} acquisitions but the series has {}",
                grouping.num_acquisitions(),
                series.num_phases()
            );
            average_breath_holds(series, &grouping)?
        }
        None => series.clone(),
    };
    ensure!(
        averaged.num_phases() == NUM_PHASES,
        "series has {} phases after breath-hold grouping; the network expects {NUM_PHASES}",
        averaged.num_phases()
    );
    Ok(normalize(&averaged, &NormalizationParams::default())?.0)
}

fn save_checkpoint(trainer: &Trainer, cfg: &ExperimentConfig, path: &Path) -> dceseg_core::Result<()> {
    Checkpoint::from_network(trainer.network(), Some(trainer.adam())).write(path)?;
    CheckpointMeta {
        network: *trainer.network().spec(),
        iteration: trainer.iteration(),
        seed: cfg.seed,
        breath_hold_sizes: cfg.breath_hold_sizes.clone(),
    }
    .write(path)
}

/// Loss rows of an earlier run up to `until`, so a resumed run keeps one
/// continuous trace.
fn earlier_loss_rows(path: &Path, until: u64) -> Result<Vec<String>> {
    let Ok(text) = std::fs::read_to_string(path) else {
        return Ok(Vec::new());
    };
    Ok(text
        .lines()
        .skip(1)
        .filter(|l| {
            l.split(',')
                .next()
                .and_then(|i| i.parse::<u64>().ok())
                .is_some_and(|i| i <= until)
        })
        .map(str::to_string)
        .collect())
}

pub fn train(config: &Path, resume: Option<&Path>) -> Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let spec = cfg.network_spec()?;
    let adam = AdamConfig {
        lr: cfg.learning_rate,
        ..AdamConfig::default()
    };

    let cases = load_cases(&cfg.data.train_dir)?;
    let mut slices = Vec::new();
    for case in &cases {
        let [_, h, w] = case.mask.dims();
        if let Some(g) = cfg.desk.grid_size {
            ensure!(h == g && w == g, "case {} is {h}x{w}, config expects grid_size {g}", case.id);
        }
        let prepared = prepare_series(&case.series, cfg.breath_hold_sizes.as_deref())
            .with_context(|| format!("preparing case {}", case.id))?;
        slices.extend(extract_slices(&case.id, &prepared, &case.mask)?);
    }

    let mut trainer = match resume {
        Some(ckpt) => {
            let meta = CheckpointMeta::read(ckpt)?;
            ensure!(
                meta.network == spec,
                "checkpoint network {:?} does not match the config {:?}",
                meta.network,
                spec
            );
            ensure!(meta.seed == cfg.seed, "checkpoint seed {} differs from config seed {}", meta.seed, cfg.seed);
            let stored = Checkpoint::read(ckpt)?;
            let network = stored.to_network(spec)?;
            let Some(state) = stored.adam_state(&network, adam)? else {
                bail!("{} holds no optimizer state and cannot be resumed", ckpt.display());
            };
            Trainer::resume(network, state, cfg.seed, slices.len())?
        }
        None => Trainer::new(Network::build(spec, cfg.seed)?, adam, cfg.seed),
    };
    let start = trainer.iteration();
    let examples = prepare_examples(trainer.network(), &slices)?;

    let out = &cfg.data.out_dir;
    let ckpt_dir = out.join("checkpoints");
    create_dir(out)?;
    if cfg.checkpoint_every.is_some() {
        create_dir(&ckpt_dir)?;
    }
    let mut written: Vec<PathBuf> = Vec::new();
    run_until(&mut trainer, &examples, cfg.iterations, cfg.checkpoint_every, &mut |t: &Trainer| {
        let p = ckpt_dir.join(format!("iter_{:08}.dcsg", t.iteration()));
        save_checkpoint(t, &cfg, &p)?;
        written.push(p);
        Ok(())
    })?;

    let model = out.join(CHECKPOINT_FILE);
    save_checkpoint(&trainer, &cfg, &model)?;
    let trace_path = out.join(LOSS_TRACE_FILE);
    let mut trace = String::from("iteration,loss\n");
    for row in earlier_loss_rows(&trace_path, start)? {
        trace.push_str(&row);
        trace.push('\n');
    }
    for (i, l) in trainer.loss_trace() {
        trace.push_str(&format!("{i},{l}\n"));
    }
    std::fs::write(&trace_path, trace)?;

    let mut manifest = RunManifest::start("train", &cfg, Some(cfg.seed));
    manifest.add_volume(out, &model)?;
    manifest.add(out, &trace_path)?;
    for p in &written {
        manifest.add_volume(out, p)?;
    }
    manifest.write(&out.join(MANIFEST_FILE))?;
    Ok(())
}

#[derive(Serialize)]
struct PredictArgs<'a> {
    checkpoint: &'a Path,
    input: &'a Path,
    meta: &'a CheckpointMeta,
}

pub fn predict(checkpoint: &Path, input: &Path, out: &Path, probabilities: bool) -> Result<()> {
    let meta = CheckpointMeta::read(checkpoint)?;
    let mut network = Checkpoint::read(checkpoint)?.to_network(meta.network)?;
    let ids = list_case_ids(input)?;
    ensure!(!ids.is_empty(), "no series found in {}", input.display());
    create_dir(out)?;

    let mut manifest = RunManifest::start(
        "predict",
        PredictArgs {
            checkpoint,
            input,
            meta: &meta,
        },
        Some(meta.seed),
    );
    for id in &ids {
        let mut one = || -> Result<Vec<PathBuf>> {
            let series = read_series(series_path(input, id))?;
            let prepared = prepare_series(&series, meta.breath_hold_sizes.as_deref())?;
            let prob = network.predict_volume(&prepared)?;
            let mask = postprocess(&prob, DEFAULT_THRESHOLD)?;
            let mut files = vec![mask_path(out, id)];
            write_mask(&mask, &files[0])?;
            if probabilities {
                let p = out.join(format!("{id}{PROBABILITY_SUFFIX}"));
                write_probability(&prob, &p)?;
                files.push(p);
            }
            Ok(files)
        };
        match one() {
            Ok(files) => {
                for f in files {
                    manifest.add_volume(out, &f)?;
                }
            }
            Err(e) => {
                eprintln!("{}", serde_json::json!({"case": id, "error": format!("{e:#}")}));
                manifest.failures.push((id.clone(), format!("{e:#}")));
            }
        }
    }
    let failed: Vec<String> = manifest.failures.iter().map(|(id, _)| id.clone()).collect();
    manifest.write(&out.join(MANIFEST_FILE))?;
    if !failed.is_empty() {
        bail!("{} of {} cases failed: {}", failed.len(), ids.len(), failed.join(", "));
    }
    Ok(())
}

pub fn evaluate(pred: &Path, gt: &Path, out: &Path) -> Result<()> {
    let pred_ids: BTreeSet<String> = list_mask_ids(pred)?.into_iter().collect();
    let gt_ids: BTreeSet<String> = list_mask_ids(gt)?.into_iter().collect();
    let unpaired: Vec<&String> = pred_ids.symmetric_difference(&gt_ids).collect();
    ensure!(
        unpaired.is_empty(),
        "cases present on only one side: {}",
        unpaired.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
    );
    ensure!(!gt_ids.is_empty(), "no masks found in {}", gt.display());

    let mut rows = Vec::new();
    for id in &gt_ids {
        let p = read_mask(mask_path(pred, id))?;
        let t = read_mask(mask_path(gt, id))?;
        rows.push(score(id, &p, &t).with_context(|| format!("scoring case {id}"))?);
    }
    let report = MetricsReport::new(rows)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    report.write(out)?;
    Ok(())
}

#[derive(Serialize)]
struct CompareOutput {
    metric: &'static str,
    test: &'static str,
    n_pairs: usize,
    mean_a: f64,
    mean_b: f64,
    #[serde(flatten)]
    result: dceseg_core::eval::PairedTestResult,
}

pub fn compare(a: &Path, b: &Path, metric: MetricName, test: TestName) -> Result<()> {
    let ra = MetricsReport::read(a)?;
    let rb = MetricsReport::read(b)?;
    let (xa, xb) = match metric {
        MetricName::Dsc => pair_by_case(&ra, &rb, |r| r.dsc)?,
        MetricName::Hd95 => pair_by_case(&ra, &rb, |r| r.hd95_mm)?,
    };
    let result = match test {
        TestName::T => paired_t_test(&xa, &xb)?,
        TestName::Wilcoxon => wilcoxon_signed_rank(&xa, &xb)?,
    };
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let output = CompareOutput {
        metric: match metric {
            MetricName::Dsc => "dsc",
            MetricName::Hd95 => "hd95",
        },
        test: match test {
            TestName::T => "t",
            TestName::Wilcoxon => "wilcoxon",
        },
        n_pairs: xa.len(),
        mean_a: mean(&xa),
        mean_b: mean(&xb),
        result,
    };
    println!("{}", serde_json::to_string(&output)?);
    Ok(())
}

#[derive(Serialize)]
struct SummaryRow<'a> {
    file: &'a str,
    metric: &'a str,
    n: usize,
    median: f64,
    q1: f64,
    q3: f64,
    whisker_low: f64,
    whisker_high: f64,
    outliers: usize,
}

pub fn report(metrics: &[PathBuf], out: &Path) -> Result<()> {
    let mut labelled = Vec::new();
    for p in metrics {
        let label = p
            .file_stem()
            .map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned());
        labelled.push((label, MetricsReport::read(p)?));
    }
    let mut panels = Vec::new();
    let mut summary = csv::Writer::from_writer(Vec::new());
    for (metric, title) in [("dsc", "DSC"), ("hd95_mm", "HD95 (mm)")] {
        let mut boxes = Vec::new();
        for (label, r) in &labelled {
            let values = if metric == "dsc" { r.dsc_values() } else { r.hd95_values() };
            let b = box_stats(&values).with_context(|| format!("summarizing {metric} of {label}"))?;
            summary.serialize(SummaryRow {
                file: label,
                metric,
                n: values.len(),
                median: b.summary.median,
                q1: b.summary.q1,
                q3: b.summary.q3,
                whisker_low: b.whisker_low,
                whisker_high: b.whisker_high,
                outliers: b.outliers.len(),
            })?;
            boxes.push((label.clone(), b));
        }
        panels.push(Panel {
            metric: metric.to_string(),
            title: title.to_string(),
            boxes,
        });
    }
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    std::fs::write(out, render(&panels)).with_context(|| format!("writing {}", out.display()))?;
    let csv_path = out.with_extension("csv");
    std::fs::write(&csv_path, summary.into_inner()?)?;
    Ok(())
}
