use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use voxslice::config::ExperimentConfig;
use voxslice::gradcheck::CheckOptions;
use voxslice::io;
use voxslice::metrics::MetricsReport;
use voxslice::pipeline::{self, ablation_csv, ablation_row, suite_variants, variant_means, Model, Suite, TrainOutcome};
use voxslice::synth::{self, SceneSample};
use voxslice::{verify, Error};

use crate::manifest::{sha256_hex, OutputDir};

pub const EXIT_VERIFY: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_DIVERGED: u8 = 3;

const SAMPLE_INDEX: &str = "samples.json";

#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

pub fn usage(msg: &str) -> anyhow::Error {
    anyhow::Error::new(Usage(msg.to_string()))
}

/// Divergence maps to its own code; every other failure is a usage or validation error.
pub fn exit_code(e: &anyhow::Error) -> u8 {
    match e.chain().find_map(|c| c.downcast_ref::<Error>()) {
        Some(Error::Divergence { .. }) => EXIT_DIVERGED,
        _ => EXIT_USAGE,
    }
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    Ok(match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    })
}

fn out_dir(flag: Option<PathBuf>, cfg: &ExperimentConfig) -> Result<PathBuf> {
    flag.or_else(|| cfg.paths.out.clone()).ok_or_else(|| usage("no output directory: pass --out or set paths.out"))
}

pub fn print_defaults() -> Result<ExitCode> {
    print!("{}", ExperimentConfig::default().to_toml()?);
    Ok(ExitCode::SUCCESS)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SampleFiles {
    seed: u64,
    cam: String,
    lidar: String,
    gt: String,
}

pub fn gen_data(config: Option<&Path>, out: Option<PathBuf>, count: usize, seed: u64) -> Result<ExitCode> {
    let cfg = load_config(config)?;
    let root = out_dir(out, &cfg)?;
    let (stream, _) = synth::dataset(&cfg.scene, count, 0, seed)?;
    let mut dir = OutputDir::create(&root, "gen-data")?;
    dir.input("config", config)?;
    dir.input("count", count)?;
    dir.input("scene", &cfg.scene)?;
    dir.seeds(&stream.seeds());
    let mut index = Vec::with_capacity(count);
    for i in 0..count {
        let s = stream.get(i)?;
        let files = SampleFiles {
            seed: s.seed,
            cam: format!("{i:04}.cam.tensor"),
            lidar: format!("{i:04}.lidar.tensor"),
            gt: format!("{i:04}.gt.labels"),
        };
        dir.write(&files.cam, &io::encode_tensor(&s.feat_cam)?)?;
        dir.write(&files.lidar, &io::encode_tensor(&s.feat_lidar)?)?;
        dir.write(&files.gt, &io::encode_labels(&s.gt)?)?;
        index.push(files);
    }
    dir.write(SAMPLE_INDEX, &json_bytes(&index)?)?;
    dir.write("config.toml", cfg.to_toml()?.as_bytes())?;
    let manifest = dir.finish()?;
    println!("wrote {count} samples to {} ({})", root.display(), manifest.display());
    Ok(ExitCode::SUCCESS)
}

fn load_samples(data: &Path) -> Result<Vec<SceneSample>> {
    let index_path = data.join(SAMPLE_INDEX);
    let index: Vec<SampleFiles> = serde_json::from_slice(&io::read_file(&index_path)?)
        .with_context(|| format!("parsing {}", index_path.display()))?;
    index
        .iter()
        .map(|f| {
            Ok(SceneSample {
                feat_cam: io::load_tensor(&data.join(&f.cam))?,
                feat_lidar: io::load_tensor(&data.join(&f.lidar))?,
                gt: io::load_labels(&data.join(&f.gt))?,
                objects: Vec::new(),
                seed: f.seed,
            })
        })
        .collect()
}

/// Training and validation scenes: from `paths.data` when set, otherwise synthesized from `seed`.
fn datasets(cfg: &ExperimentConfig, seed: u64) -> Result<(Vec<SceneSample>, Vec<SceneSample>)> {
    let Some(data) = &cfg.paths.data else {
        return Ok(pipeline::load_data(&cfg.scene, &cfg.train, seed)?);
    };
    let mut all = load_samples(data)?;
    let need = cfg.train.n_train + cfg.train.n_val;
    if all.len() < need {
        bail!(Error::Config(format!("{} holds {} samples but n_train + n_val = {need}", data.display(), all.len())));
    }
    let val = all.split_off(cfg.train.n_train);
    Ok((all, val.into_iter().take(cfg.train.n_val).collect()))
}

fn json_bytes(v: &impl Serialize) -> Result<Vec<u8>> {
    let mut b = serde_json::to_vec_pretty(v)?;
    b.push(b'\n');
    Ok(b)
}

fn metrics_json(report: &MetricsReport, extra: serde_json::Value) -> serde_json::Value {
    let mut v = report.summary_json();
    v["per_class_iou"] = serde_json::json!(report.per_class_iou);
    v["support"] = serde_json::json!(report.support);
    if let (Some(obj), serde_json::Value::Object(more)) = (v.as_object_mut(), extra) {
        obj.extend(more);
    }
    v
}

fn loss_csv(outcome: &TrainOutcome) -> String {
    let mut out = String::from("step,focal,lovasz,scal_geo,scal_sem,total\n");
    for t in &outcome.losses {
        let l = &t.loss;
        let _ = writeln!(
            out,
            "{},{:.9},{:.9},{:.9},{:.9},{:.9}",
            t.step, l.focal, l.lovasz, l.scal_geo, l.scal_sem, l.total
        );
    }
    out
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "n/a".into())
}

fn print_report(report: &MetricsReport, names: &[&str]) {
    println!("mIoU {}  geo IoU {:.4}", fmt_opt(report.miou), report.geo_iou);
    for (k, iou) in report.per_class_iou.iter().enumerate() {
        let name = names.get(k + 1).copied().unwrap_or("?");
        println!("  {name:<12} {}", fmt_opt(*iou));
    }
}

pub fn train(config: Option<&Path>, out: Option<PathBuf>, seed: Option<u64>) -> Result<ExitCode> {
    let cfg = load_config(config)?;
    let root = out_dir(out, &cfg)?;
    let seed = seed.unwrap_or(cfg.train.seeds[0]);
    let (tr, va) = datasets(&cfg, seed)?;
    eprintln!("training {} for {} steps (seed {seed})", cfg.model.vsf_mode, cfg.train.steps);
    let outcome = pipeline::train_on(&cfg.model, &cfg.scene, &cfg.train, &cfg.loss, seed, &tr, &va)?;
    let mut dir = OutputDir::create(&root, "train")?;
    dir.input("config", config)?;
    dir.input("data", &cfg.paths.data)?;
    dir.seeds(&[seed]);
    let meta = outcome.model.metadata(&cfg.scene);
    dir.write("checkpoint.ssoc", &io::encode_checkpoint(&outcome.model.params, &meta)?)?;
    dir.write("config.toml", cfg.to_toml()?.as_bytes())?;
    dir.write("losses.csv", loss_csv(&outcome).as_bytes())?;
    let names = cfg.scene.class_names();
    dir.write("metrics.csv", outcome.report.to_csv(&names).as_bytes())?;
    let extra = serde_json::json!({
        "seed": seed,
        "loss_initial": outcome.loss_initial(),
        "loss_final": outcome.loss_final(),
        "evals": outcome.evals,
    });
    dir.write("metrics.json", &json_bytes(&metrics_json(&outcome.report, extra))?)?;
    dir.finish()?;
    println!("loss {} -> {}", fmt_opt(outcome.loss_initial()), fmt_opt(outcome.loss_final()));
    print_report(&outcome.report, &names);
    Ok(ExitCode::SUCCESS)
}

pub fn eval(checkpoint: &Path, data: &Path, out: Option<PathBuf>) -> Result<ExitCode> {
    let ckpt_bytes = io::read_file(checkpoint)?;
    let (params, meta) = io::decode_checkpoint(&ckpt_bytes)?;
    let (model, scene) = Model::from_checkpoint(params, &meta)?;
    let samples = load_samples(data)?;
    if samples.is_empty() {
        bail!(Error::Validation(format!("{} contains no samples", data.display())));
    }
    let report = pipeline::evaluate(&model, &samples)?;
    let root = out.unwrap_or_else(|| checkpoint.parent().unwrap_or(Path::new(".")).join("eval"));
    let mut dir = OutputDir::create(&root, "eval")?;
    // digests rather than paths keep the manifest independent of where files live
    dir.input("checkpoint_sha256", sha256_hex(&ckpt_bytes))?;
    dir.input("samples_sha256", sha256_hex(&io::read_file(&data.join(SAMPLE_INDEX))?))?;
    dir.seeds(&samples.iter().map(|s| s.seed).collect::<Vec<_>>());
    let names = scene.class_names();
    dir.write("metrics.csv", report.to_csv(&names).as_bytes())?;
    dir.write("metrics.json", &json_bytes(&metrics_json(&report, serde_json::json!({ "samples": samples.len() })))?)?;
    dir.finish()?;
    print_report(&report, &names);
    Ok(ExitCode::SUCCESS)
}

pub fn ablate(suite: &str, config: Option<&Path>, out: Option<PathBuf>, jobs: usize) -> Result<ExitCode> {
    let suite_name = suite;
    let suite: Suite = suite.parse()?;
    if jobs == 0 {
        return Err(usage("--jobs must be at least 1"));
    }
    let cfg = load_config(config)?;
    let root = out_dir(out, &cfg)?;
    let variants = suite_variants(suite, &cfg.model);
    for v in &variants {
        v.model.validate(cfg.scene.grid[2]).with_context(|| format!("variant {}", v.name))?;
    }
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs).build()?;
    let seeds = cfg.train.seeds.clone();
    let data: Vec<_> = pool.install(|| seeds.par_iter().map(|&s| datasets(&cfg, s)).collect::<Result<Vec<_>>>())?;
    let tasks: Vec<(usize, usize)> = (0..seeds.len()).flat_map(|s| (0..variants.len()).map(move |v| (s, v))).collect();
    eprintln!("ablation '{suite_name}': {} runs of {} steps on {jobs} worker(s)", tasks.len(), cfg.train.steps);
    let rows = pool.install(|| {
        tasks
            .par_iter()
            .map(|&(si, vi)| {
                let (tr, va) = &data[si];
                let v = &variants[vi];
                let o = pipeline::train_on(&v.model, &cfg.scene, &cfg.train, &cfg.loss, seeds[si], tr, va)
                    .with_context(|| format!("variant {} seed {}", v.name, seeds[si]))?;
                eprintln!("  {} seed {}: mIoU {}", v.name, seeds[si], fmt_opt(o.report.miou));
                Ok(ablation_row(&v.name, &o))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let mut dir = OutputDir::create(&root, "ablate")?;
    dir.input("config", config)?;
    dir.input("suite", suite_name)?;
    dir.seeds(&seeds);
    dir.write("config.toml", cfg.to_toml()?.as_bytes())?;
    dir.write("ablation.csv", ablation_csv(&rows).as_bytes())?;
    let means = variant_means(&rows);
    let mut summary = String::from("variant,mean_miou\n");
    for (name, m) in &means {
        let _ = writeln!(summary, "{name},{m:.6}");
    }
    dir.write("summary.csv", summary.as_bytes())?;
    dir.finish()?;
    for (name, m) in means {
        println!("{name:<14} mean mIoU {m:.4}");
    }
    Ok(ExitCode::SUCCESS)
}

pub fn gradcheck(module: Option<&str>, corrupt: bool) -> Result<ExitCode> {
    let opts = CheckOptions { corrupt, ..CheckOptions::default() };
    let reports = verify::run(module, &opts)?;
    if reports.is_empty() {
        return Err(anyhow!(Error::Config("no gradient checks selected".into())));
    }
    let mut failed = 0;
    for r in &reports {
        let status = if r.passed() { "ok" } else { "FAIL" };
        println!(
            "{status:<4} {:<40} max rel err {:.3e}  ({} checked, {} skipped)",
            r.name, r.max_rel_err, r.checked, r.skipped
        );
        if !r.passed() {
            failed += 1;
            if let Some(w) = &r.worst {
                println!("     worst: {}[{}] analytic {:.9e} numeric {:.9e}", w.tensor, w.index, w.analytic, w.numeric);
            }
        }
    }
    if failed > 0 {
        println!("{failed} of {} gradient checks failed", reports.len());
        return Ok(ExitCode::from(EXIT_VERIFY));
    }
    println!("all {} gradient checks passed (tolerance {:e})", reports.len(), opts.tolerance);
    Ok(ExitCode::SUCCESS)
}
