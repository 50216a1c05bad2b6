//! Command-line interface: every pipeline stage as a subcommand with
//! reproducible on-disk artifacts and a run-manifest per invocation.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use crate::config::{Objective, TrainConfig};
use crate::dataset::{parse_annotations, DatasetIndex};
use crate::erf::{area_fractions, compute_erf, erf_mass, region_masks};
use crate::error::MontageError;
use crate::imageio::{denormalize, write_heatmap_ppm, write_ppm};
use crate::montage::AssemblyStream;
use crate::net::{load_checkpoint, FeatureGeometry, NetworkParams};
use crate::rng::derive_seed;
use crate::sampling::{build_sample_set, write_manifest, NegativeConfig, SampleSet};
use crate::synth::{write_synthetic, SynthSpec};
use crate::trainer::{evaluate, patch_to_tensor, train, EvalReport, ImageStore, MetricRow};

const PROBE_STREAM: u64 = 0x70726f62;

#[derive(Parser)]
#[command(
    name = "montage",
    about = "Montage pre-training pipeline: extraction, assembly, ERF-adaptive training"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    overrides: Overrides,
}

/// Flags shared by every subcommand; they override config-file values.
#[derive(Args, Debug, Default)]
struct Overrides {
    /// Flat key=value config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (created if absent).
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads (0 = rayon default).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Single-worker, fixed-order execution for bitwise reproducibility.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Training objective: erf | block | global.
    #[arg(long, global = true)]
    objective: Option<String>,
    #[arg(long, global = true)]
    tau: Option<f64>,
    /// Montage template as WxH:SX,SY (e.g. 96x96:24,24).
    #[arg(long, global = true)]
    template: Option<String>,
    #[arg(long, global = true)]
    total_iters: Option<u64>,
    /// ERF / soft-label refresh interval in iterations.
    #[arg(long, global = true)]
    refresh: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the deterministic synthetic shape dataset.
    GenSynth {
        /// Number of images.
        #[arg(long, default_value_t = 400)]
        count: usize,
    },
    /// Extract positive/negative samples into a manifest.
    Extract {
        /// Dataset directory containing annotations.json.
        #[arg(long)]
        data: PathBuf,
    },
    /// Assemble montage canvases and dump them as PPM files.
    Assemble {
        #[arg(long)]
        data: PathBuf,
        /// Number of canvases to assemble.
        #[arg(long, default_value_t = 4)]
        count: usize,
    },
    /// Run the pre-training loop.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
    },
    /// Evaluate a checkpoint's region-level accuracy.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Dump ERF heatmaps at the four region centers (trained vs init).
    ErfMap {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train under all three objectives and summarize.
    CompareStrategies {
        #[arg(long)]
        data: PathBuf,
        /// Held-out dataset directory for accuracy; defaults to `data`.
        #[arg(long)]
        eval_data: Option<PathBuf>,
    },
}

fn log_enabled(level: &str) -> bool {
    let setting = std::env::var("MONTAGE_LOG").unwrap_or_else(|_| "info".into());
    match setting.as_str() {
        "quiet" => false,
        "debug" => true,
        _ => level != "debug",
    }
}

macro_rules! info {
    ($($arg:tt)*) => {
        if log_enabled("info") { eprintln!($($arg)*); }
    };
}

fn resolve_config(ov: &Overrides) -> anyhow::Result<TrainConfig> {
    let mut cfg = match &ov.config {
        Some(path) => TrainConfig::load(path)?,
        None => TrainConfig::desk(),
    };
    if let Some(seed) = ov.seed {
        cfg.seed = seed;
    }
    if let Some(jobs) = ov.jobs {
        cfg.jobs = jobs;
    }
    if ov.deterministic {
        cfg.deterministic = true;
        cfg.jobs = 1;
    }
    if let Some(obj) = &ov.objective {
        cfg.objective = obj.parse::<Objective>()?;
    }
    if let Some(tau) = ov.tau {
        cfg.tau = tau;
    }
    if let Some(t) = &ov.template {
        let (canvas, split) = t
            .split_once(':')
            .ok_or_else(|| MontageError::Config(format!("template must be WxH:SX,SY, got {t:?}")))?;
        cfg.set("canvas", canvas)?;
        let (sx, sy) = split
            .split_once(',')
            .ok_or_else(|| MontageError::Config(format!("template must be WxH:SX,SY, got {t:?}")))?;
        cfg.set("split_x", sx)?;
        cfg.set("split_y", sy)?;
    }
    if let Some(total) = ov.total_iters {
        cfg.total_iters = total;
    }
    if let Some(refresh) = ov.refresh {
        cfg.refresh_interval = refresh;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn sha256_file(path: &Path) -> anyhow::Result<String> {
    let bytes =
        std::fs::read(path).with_context(|| format!("reading {} for hashing", path.display()))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

/// Hash of every dataset image, folded in file-name order.
fn dataset_images_digest(data: &Path, index: &DatasetIndex) -> anyhow::Result<String> {
    let mut names: Vec<&str> = index.images.iter().map(|i| i.file_name.as_str()).collect();
    names.sort_unstable();
    let mut hasher = Sha256::new();
    for name in names {
        let bytes = std::fs::read(data.join("images").join(name))
            .with_context(|| format!("reading image {name} for hashing"))?;
        hasher.update(name.as_bytes());
        hasher.update(bytes);
    }
    Ok(format!("{:x}", hasher.finalize()))
}

fn write_run_manifest(
    out: &Path,
    subcommand: &str,
    cfg: &TrainConfig,
    input_hashes: &[(String, String)],
) -> anyhow::Result<()> {
    let mut text = String::new();
    let _ = writeln!(text, "# run-manifest");
    let _ = writeln!(text, "subcommand = {subcommand}");
    for (name, hash) in input_hashes {
        let _ = writeln!(text, "input_sha256 {name} = {hash}");
    }
    text.push_str(&cfg.to_key_values());
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("run-manifest.txt"), text)?;
    Ok(())
}

fn load_dataset(data: &Path) -> anyhow::Result<DatasetIndex> {
    let path = data.join("annotations.json");
    let bytes =
        std::fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
    Ok(parse_annotations(&bytes)?)
}

fn dataset_hashes(data: &Path, index: &DatasetIndex) -> anyhow::Result<Vec<(String, String)>> {
    Ok(vec![
        (
            "annotations.json".into(),
            sha256_file(&data.join("annotations.json"))?,
        ),
        ("images/*".into(), dataset_images_digest(data, index)?),
    ])
}

fn build_set(index: &DatasetIndex, cfg: &TrainConfig) -> anyhow::Result<SampleSet> {
    Ok(build_sample_set(
        index,
        cfg.neg_ratio,
        cfg.seed,
        &NegativeConfig::default(),
    )?)
}

fn eval_report_text(report: &EvalReport) -> String {
    let mut text = String::new();
    let _ = writeln!(text, "overall = {:.4}", report.overall);
    for (i, acc) in report.per_region.iter().enumerate() {
        let _ = writeln!(text, "region R{} = {:.4}", i + 1, acc);
    }
    for (c, acc) in report.per_class.iter().enumerate() {
        let _ = writeln!(text, "class {c} = {acc:.4}");
    }
    let _ = writeln!(text, "macro_avg = {:.4}", report.macro_avg);
    let _ = writeln!(text, "predictions = {}", report.total);
    text
}

fn quarter_means(metrics: &[MetricRow]) -> (f64, f64) {
    let q = (metrics.len() / 4).max(1);
    let first = metrics[..q].iter().map(|m| m.loss).sum::<f64>() / q as f64;
    let last = metrics[metrics.len() - q..].iter().map(|m| m.loss).sum::<f64>() / q as f64;
    (first, last)
}

fn run_training(
    cfg: &TrainConfig,
    set: &SampleSet,
    store: &ImageStore,
    num_classes: usize,
    out: &Path,
) -> anyhow::Result<crate::trainer::TrainOutcome> {
    let run = || train(cfg, set, store, num_classes, Some(out));
    let outcome = if cfg.jobs > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.jobs)
            .build()
            .context("building worker pool")?
            .install(run)?
    } else {
        run()?
    };
    Ok(outcome)
}

fn execute(cli: Cli) -> anyhow::Result<()> {
    let cfg = resolve_config(&cli.overrides)?;
    let out = cli.overrides.out.clone();
    std::fs::create_dir_all(&out)
        .with_context(|| format!("creating output directory {}", out.display()))?;

    match &cli.command {
        Command::GenSynth { count } => {
            let spec = SynthSpec::new(*count, cfg.seed);
            let index = write_synthetic(&out, &spec)?;
            write_run_manifest(&out, "gen-synth", &cfg, &dataset_hashes(&out, &index)?)?;
            info!(
                "gen-synth: {} images, {} annotations -> {}",
                index.images.len(),
                index.annotations.len(),
                out.display()
            );
        }
        Command::Extract { data } => {
            let index = load_dataset(data)?;
            let set = build_set(&index, &cfg)?;
            std::fs::write(out.join("samples.tsv"), write_manifest(&set, &index))?;
            write_run_manifest(&out, "extract", &cfg, &dataset_hashes(data, &index)?)?;
            info!(
                "extract: {} positives, {} negatives (shortfall {})",
                set.pos_count, set.neg_count, set.shortfall
            );
        }
        Command::Assemble { data, count } => {
            let index = load_dataset(data)?;
            let set = build_set(&index, &cfg)?;
            let store = ImageStore::load(data, &index)?;
            let mut stream = AssemblyStream::new(
                &set,
                &store,
                cfg.template()?,
                index.num_categories() + 1,
                cfg.adjust_mode,
                cfg.relax_groups,
                cfg.seed,
            )?;
            let mut sidecar = String::from("# canvas\tlabels(R1..R4)\tprovenance(R1..R4)\n");
            for i in 0..*count {
                let img = stream.next_image()?;
                write_ppm(&out.join(format!("canvas_{i:04}.ppm")), &denormalize(&img.pixels))?;
                let labels = img
                    .label_indices
                    .iter()
                    .map(|l| l.to_string())
                    .collect::<Vec<_>>()
                    .join(",");
                let prov = img
                    .provenance
                    .iter()
                    .map(|p| p.to_string())
                    .collect::<Vec<_>>()
                    .join(",");
                let _ = writeln!(sidecar, "canvas_{i:04}.ppm\t{labels}\t{prov}");
            }
            std::fs::write(out.join("assembled.tsv"), sidecar)?;
            write_run_manifest(&out, "assemble", &cfg, &dataset_hashes(data, &index)?)?;
            info!("assemble: {count} canvases -> {}", out.display());
        }
        Command::Pretrain { data } => {
            let index = load_dataset(data)?;
            let set = build_set(&index, &cfg)?;
            let store = ImageStore::load(data, &index)?;
            write_run_manifest(&out, "pretrain", &cfg, &dataset_hashes(data, &index)?)?;
            let outcome = run_training(&cfg, &set, &store, index.num_categories(), &out)?;
            if let Some(last) = outcome.metrics.last() {
                let (first, final_) = quarter_means(&outcome.metrics);
                info!(
                    "pretrain[{}]: final loss {:.4} (first-quarter mean {first:.4}, final-quarter mean {final_:.4})",
                    cfg.objective.tag(),
                    last.loss
                );
            } else {
                info!("pretrain: 0 iterations; wrote initialization checkpoint");
            }
        }
        Command::Evaluate { data, checkpoint } => {
            let index = load_dataset(data)?;
            let set = build_set(&index, &cfg)?;
            let store = ImageStore::load(data, &index)?;
            let params = load_checkpoint(checkpoint)?;
            let report = evaluate(&params, &set, &store, &cfg, index.num_categories())?;
            let text = eval_report_text(&report);
            std::fs::write(out.join("eval-report.txt"), &text)?;
            write_run_manifest(&out, "evaluate", &cfg, &dataset_hashes(data, &index)?)?;
            print!("{text}");
        }
        Command::ErfMap { data, checkpoint } => {
            let index = load_dataset(data)?;
            let set = build_set(&index, &cfg)?;
            let store = ImageStore::load(data, &index)?;
            let trained = load_checkpoint(checkpoint)?;
            let init = NetworkParams::init(trained.arch.clone(), cfg.seed);
            let text = erf_map_command(&cfg, &set, &store, &trained, &init, &out)?;
            write_run_manifest(&out, "erf-map", &cfg, &dataset_hashes(data, &index)?)?;
            print!("{text}");
        }
        Command::CompareStrategies { data, eval_data } => {
            let index = load_dataset(data)?;
            let set = build_set(&index, &cfg)?;
            let store = ImageStore::load(data, &index)?;
            let eval_dir = eval_data.as_deref().unwrap_or(data);
            let eval_index = load_dataset(eval_dir)?;
            let eval_set = build_set(&eval_index, &cfg)?;
            let eval_store = ImageStore::load(eval_dir, &eval_index)?;

            let mut summary = String::from(
                "objective\tfirst_quarter_loss\tfinal_quarter_loss\taccuracy\n",
            );
            for objective in [Objective::ErfAdaptive, Objective::Blockwise, Objective::Global] {
                let mut run_cfg = cfg.clone();
                run_cfg.objective = objective;
                let run_out = out.join(objective.tag());
                let outcome =
                    run_training(&run_cfg, &set, &store, index.num_categories(), &run_out)?;
                let report = evaluate(
                    &outcome.params,
                    &eval_set,
                    &eval_store,
                    &run_cfg,
                    eval_index.num_categories(),
                )?;
                let (first, final_) = quarter_means(&outcome.metrics);
                let _ = writeln!(
                    summary,
                    "{}\t{first:.6}\t{final_:.6}\t{:.4}",
                    objective.tag(),
                    report.overall
                );
                info!(
                    "compare[{}]: loss {first:.4} -> {final_:.4}, accuracy {:.4}",
                    objective.tag(),
                    report.overall
                );
            }
            std::fs::write(out.join("summary.tsv"), &summary)?;
            write_run_manifest(&out, "compare-strategies", &cfg, &dataset_hashes(data, &index)?)?;
            print!("{summary}");
        }
    }
    Ok(())
}

/// ERF heatmaps at the four region-center feature positions for the trained
/// and the freshly initialized network; returns the textual report.
fn erf_map_command(
    cfg: &TrainConfig,
    set: &SampleSet,
    store: &ImageStore,
    trained: &NetworkParams,
    init: &NetworkParams,
    out: &Path,
) -> anyhow::Result<String> {
    let template = cfg.template()?;
    let geometry = FeatureGeometry::for_input(&trained.arch, cfg.canvas_h, cfg.canvas_w)?;
    let mut probe_stream = AssemblyStream::new(
        set,
        store,
        template,
        trained.arch.num_classes,
        cfg.adjust_mode,
        cfg.relax_groups,
        derive_seed(cfg.seed, PROBE_STREAM),
    )?;
    let probe = patch_to_tensor(&probe_stream.next_image()?.pixels);
    let masks = region_masks(&template, cfg.canvas_h, cfg.canvas_w)?;
    let fallback = area_fractions(&template);
    let pool = 1.0 / geometry.alpha;

    let mut text = String::new();
    let mut rho_home_sum = 0.0;
    for (r, region) in template.regions().iter().enumerate() {
        // region center in input space, projected to the feature grid
        let cx = region.x0 as f64 + region.width() as f64 / 2.0;
        let cy = region.y0 as f64 + region.height() as f64 / 2.0;
        let j = ((cy / pool) as usize).min(geometry.feature_h - 1);
        let k = ((cx / pool) as usize).min(geometry.feature_w - 1);
        for (tag, params) in [("trained", trained), ("init", init)] {
            let (rho, values) = match compute_erf(params, &probe, (j, k), cfg.erf_aggregation) {
                Ok(map) => {
                    let rho = erf_mass(&map, &masks).unwrap_or(fallback);
                    (rho, map.values)
                }
                Err(MontageError::DegenerateErf) => {
                    (fallback, vec![0.0; cfg.canvas_h * cfg.canvas_w])
                }
                Err(e) => return Err(e.into()),
            };
            write_heatmap_ppm(
                &out.join(format!("erf_R{}_{tag}.ppm", r + 1)),
                cfg.canvas_w,
                cfg.canvas_h,
                &values,
            )?;
            let _ = writeln!(
                text,
                "R{} {tag}: position ({j},{k}) rho = [{:.4}, {:.4}, {:.4}, {:.4}] rho_home = {:.4}",
                r + 1,
                rho[0],
                rho[1],
                rho[2],
                rho[3],
                rho[r]
            );
            if tag == "trained" {
                rho_home_sum += rho[r];
            }
        }
    }
    let _ = writeln!(text, "mean rho_home (trained) = {:.4}", rho_home_sum / 4.0);
    Ok(text)
}

/// Parse and run; returns the process exit code.
/// Exit 0 on success, 1 on module errors, 2 on config/usage errors.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return 2;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            let config_error = e
                .chain()
                .any(|cause| matches!(cause.downcast_ref(), Some(MontageError::Config(_))));
            if config_error {
                2
            } else {
                1
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Result<Cli, clap::Error> {
        Cli::try_parse_from(args)
    }

    #[test]
    fn template_flag_resolves_into_config() {
        let cli = parse(&[
            "montage",
            "extract",
            "--data",
            "d",
            "--template",
            "64x64:16,16",
            "--seed",
            "3",
        ])
        .unwrap();
        let cfg = resolve_config(&cli.overrides).unwrap();
        assert_eq!((cfg.canvas_w, cfg.canvas_h), (64, 64));
        assert_eq!((cfg.split_x, cfg.split_y), (16, 16));
        assert_eq!(cfg.seed, 3);
    }

    #[test]
    fn deterministic_forces_single_worker() {
        let cli = parse(&[
            "montage",
            "pretrain",
            "--data",
            "d",
            "--deterministic",
            "--jobs",
            "8",
        ])
        .unwrap();
        let cfg = resolve_config(&cli.overrides).unwrap();
        assert!(cfg.deterministic);
        assert_eq!(cfg.jobs, 1);
    }

    #[test]
    fn unknown_subcommand_is_usage_error() {
        assert_eq!(run(["montage", "frobnicate"]), 2);
        assert_eq!(run(["montage"]), 2);
    }

    #[test]
    fn invalid_config_value_is_exit_two() {
        // tau out of range fails validation, not IO
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(
            run([
                "montage",
                "extract",
                "--data",
                dir.path().to_str().unwrap(),
                "--tau",
                "3.0",
            ]),
            2
        );
    }

    #[test]
    fn missing_dataset_is_module_error() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope");
        assert_eq!(
            run([
                "montage",
                "extract",
                "--data",
                missing.to_str().unwrap(),
                "--out",
                dir.path().join("out").to_str().unwrap(),
            ]),
            1
        );
    }
}
