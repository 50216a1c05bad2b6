//! Training loop: batching, objective dispatch, periodic ERF/soft-label
//! refresh, checkpointing, metrics, and region-level evaluation.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::config::{Objective, TrainConfig};
use crate::erf::{area_fractions, erf_grid, MassGrid};
use crate::error::{MontageError, Result};
use crate::imageio::{ImageBuffer, Patch};
use crate::montage::{crop_record, AssembledImage, AssemblyStream, PatchSource};
use crate::net::{
    backward_sample, forward_sample, load_checkpoint, save_checkpoint, sgd_step, FeatureGeometry,
    Gradients, MomentumState, NetworkParams,
};
use crate::objective::{
    blockwise_loss, erf_adaptive_loss, global_loss, home_regions, region_pool, soft_label_field,
    LossReport, SoftLabelField,
};
use crate::rng::derive_seed;
use crate::sampling::SampleSet;
use crate::tensor::Tensor;

const PROBE_STREAM: u64 = 0x70726f62;

/// In-memory source of sample crops, keyed by image id.
pub struct ImageStore {
    images: HashMap<i64, ImageBuffer>,
}

impl ImageStore {
    pub fn from_images(images: HashMap<i64, ImageBuffer>) -> Self {
        ImageStore { images }
    }

    /// Decode every image of the dataset from `<dir>/images/<file_name>`.
    pub fn load(dir: &Path, index: &crate::dataset::DatasetIndex) -> Result<Self> {
        let mut images = HashMap::with_capacity(index.images.len());
        for info in &index.images {
            let path = dir.join("images").join(&info.file_name);
            images.insert(info.id, crate::imageio::load_image(&path)?);
        }
        Ok(ImageStore { images })
    }
}

impl PatchSource for ImageStore {
    fn patch(&self, record: &crate::sampling::SampleRecord) -> Result<ImageBuffer> {
        let img = self.images.get(&record.image_id).ok_or_else(|| {
            MontageError::DanglingReference {
                kind: "image",
                id: record.image_id,
            }
        })?;
        Ok(crop_record(img, &record.region))
    }
}

/// Interleaved HWC patch to planar (3, H, W) tensor.
pub fn patch_to_tensor(patch: &Patch) -> Tensor {
    let (w, h) = (patch.width, patch.height);
    let mut t = Tensor::zeros(vec![3, h, w]);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                t.set3(c, y, x, patch.sample(x, y, c));
            }
        }
    }
    t
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub iter: u64,
    pub lr: f64,
    pub loss: f64,
    pub per_region: [f64; 4],
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from("iter,lr,loss,L1,L2,L3,L4\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.iter, r.lr, r.loss, r.per_region[0], r.per_region[1], r.per_region[2], r.per_region[3]
        );
    }
    out
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub params: NetworkParams,
    pub metrics: Vec<MetricRow>,
    /// Iterations at which the ERF grid / soft-label field was refreshed.
    pub refresh_iters: Vec<u64>,
    /// Last soft-label field (ERF-adaptive objective only).
    pub field: Option<SoftLabelField>,
    pub mass_grid: Option<MassGrid>,
}

fn batch_loss_and_grads(
    params: &NetworkParams,
    batch: &[AssembledImage],
    objective: Objective,
    field: Option<&SoftLabelField>,
    home: &[usize],
    fracs: &[f64; 4],
    parallel: bool,
) -> Result<Vec<(LossReport, Gradients)>> {
    let per_sample = |img: &AssembledImage| -> Result<(LossReport, Gradients)> {
        let input = patch_to_tensor(&img.pixels);
        let fwd = forward_sample(params, &input)?;
        let (report, grad_logits) = match objective {
            Objective::ErfAdaptive => {
                let field = field.expect("ERF-adaptive objective requires a soft-label field");
                erf_adaptive_loss(&fwd.logits, field, &img.labels)
            }
            Objective::Blockwise => blockwise_loss(&fwd.logits, home, &img.labels),
            Objective::Global => global_loss(&fwd.logits, &img.labels, fracs),
        };
        let grads = backward_sample(params, &fwd, Some(&grad_logits), None, false)?;
        Ok((report, grads))
    };
    // Parallel and sequential paths produce identical results: per-sample
    // work is independent and the caller reduces in batch order.
    if parallel {
        batch.par_iter().map(per_sample).collect()
    } else {
        batch.iter().map(per_sample).collect()
    }
}

/// Run the pre-training loop over an extracted sample set.
///
/// Checkpoints and the metrics CSV are written under `out` when given;
/// checkpoints land at every refresh boundary (the parameters *entering*
/// that iteration, so iteration 0 saves the initialization) and at the end.
pub fn train<S: PatchSource + Sync>(
    cfg: &TrainConfig,
    set: &SampleSet,
    store: &S,
    num_classes: usize,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let template = cfg.template()?;
    let num_labels = num_classes + 1;
    let arch = cfg.architecture(num_labels);
    let geometry = FeatureGeometry::for_input(&arch, cfg.canvas_h, cfg.canvas_w)?;
    let home = home_regions(&template, &geometry);
    let fracs = area_fractions(&template);
    let schedule = cfg.schedule();
    let parallel = !cfg.deterministic && cfg.jobs != 1;

    let mut params = NetworkParams::init(arch, cfg.seed);
    let mut momentum = MomentumState::new(&params);
    let mut stream = AssemblyStream::new(
        set,
        store,
        template,
        num_labels,
        cfg.adjust_mode,
        cfg.relax_groups,
        cfg.seed,
    )?;

    // Fixed probe canvas for ERF refreshes: one assembled image from a
    // dedicated stream, so refreshed ERFs differ only through the params.
    let probe = {
        let mut probe_stream = AssemblyStream::new(
            set,
            store,
            template,
            num_labels,
            cfg.adjust_mode,
            cfg.relax_groups,
            derive_seed(cfg.seed, PROBE_STREAM),
        )?;
        patch_to_tensor(&probe_stream.next_image()?.pixels)
    };

    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|source| MontageError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }

    let mut metrics = Vec::with_capacity(cfg.total_iters as usize);
    let mut refresh_iters = Vec::new();
    let mut field: Option<SoftLabelField> = None;
    let mut mass: Option<MassGrid> = None;

    for t in 0..cfg.total_iters {
        if t % cfg.refresh_interval == 0 {
            refresh_iters.push(t);
            if cfg.objective == Objective::ErfAdaptive {
                let grid = erf_grid(
                    &params,
                    &probe,
                    &template,
                    cfg.erf_stride,
                    cfg.erf_aggregation,
                )?;
                field = Some(soft_label_field(&grid, &template, cfg.tau, &geometry, t));
                mass = Some(grid);
            }
            if let Some(dir) = out {
                save_checkpoint(&dir.join(format!("checkpoint_{t:06}.ckpt")), &params)?;
            }
        }

        let batch = stream.next_batch(cfg.batch_assembled)?;
        let results = batch_loss_and_grads(
            &params,
            &batch,
            cfg.objective,
            field.as_ref(),
            &home,
            &fracs,
            parallel,
        )?;

        let n = results.len() as f64;
        let mut total = params.zeros_like();
        let mut loss = 0.0;
        let mut per_region = [0.0; 4];
        for (report, grads) in &results {
            loss += report.loss / n;
            for i in 0..4 {
                per_region[i] += report.per_region[i] / n;
            }
            total.accumulate(grads);
        }
        total.scale(1.0 / n);

        let lr = schedule.lr_at(t);
        if !loss.is_finite() {
            let finite = results.iter().filter(|(r, _)| r.loss.is_finite()).count();
            return Err(MontageError::NonFiniteLoss {
                iter: t,
                lr,
                detail: format!(
                    "{finite}/{} batch losses finite; per-region {per_region:?}",
                    results.len()
                ),
            });
        }
        sgd_step(&mut params, &total, lr, cfg.weight_decay, cfg.momentum, &mut momentum);
        if !params.tensor_list().iter().all(|p| p.is_finite()) {
            return Err(MontageError::NonFiniteLoss {
                iter: t,
                lr,
                detail: "parameters became non-finite after the update".into(),
            });
        }

        metrics.push(MetricRow {
            iter: t,
            lr,
            loss,
            per_region,
        });
    }

    if let Some(dir) = out {
        save_checkpoint(&dir.join("checkpoint_final.ckpt"), &params)?;
        let csv_path = dir.join("metrics.csv");
        std::fs::write(&csv_path, metrics_csv(&metrics)).map_err(|source| MontageError::Io {
            path: csv_path,
            source,
        })?;
    }

    Ok(TrainOutcome {
        params,
        metrics,
        refresh_iters,
        field,
        mass_grid: mass,
    })
}

/// Region-level accuracy of a checkpoint over one epoch of assembled
/// evaluation images.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub overall: f64,
    pub per_region: [f64; 4],
    /// Top-1 accuracy per class; NaN for classes absent from the eval set.
    pub per_class: Vec<f64>,
    /// Macro average over classes present in the eval set.
    pub macro_avg: f64,
    /// Number of (image, region) predictions scored.
    pub total: usize,
}

pub fn evaluate<S: PatchSource>(
    params: &NetworkParams,
    set: &SampleSet,
    store: &S,
    cfg: &TrainConfig,
    num_classes: usize,
) -> Result<EvalReport> {
    let template = cfg.template()?;
    let num_labels = num_classes + 1;
    if params.arch.num_classes != num_labels {
        return Err(MontageError::Eval(format!(
            "checkpoint has {} outputs but the eval set needs {num_labels}",
            params.arch.num_classes
        )));
    }
    let geometry = FeatureGeometry::for_input(&params.arch, cfg.canvas_h, cfg.canvas_w)?;
    let home = home_regions(&template, &geometry);
    let mut stream = AssemblyStream::new(
        set,
        store,
        template,
        num_labels,
        cfg.adjust_mode,
        cfg.relax_groups,
        cfg.seed,
    )?;
    let capacity = stream.epoch_capacity();
    if capacity == 0 {
        return Err(MontageError::Eval("evaluation set assembles zero images".into()));
    }

    let mut region_hits = [0usize; 4];
    let mut region_total = [0usize; 4];
    let mut class_hits = vec![0usize; num_labels];
    let mut class_total = vec![0usize; num_labels];
    for _ in 0..capacity {
        let img = stream.next_image()?;
        let fwd = forward_sample(params, &patch_to_tensor(&img.pixels))?;
        let pooled = region_pool(&fwd.logits, &home);
        for r in 0..4 {
            let predicted = pooled[r]
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap();
            let truth = img.label_indices[r];
            region_total[r] += 1;
            class_total[truth] += 1;
            if predicted == truth {
                region_hits[r] += 1;
                class_hits[truth] += 1;
            }
        }
    }

    let total: usize = region_total.iter().sum();
    let overall = region_hits.iter().sum::<usize>() as f64 / total as f64;
    let per_region = std::array::from_fn(|r| region_hits[r] as f64 / region_total[r] as f64);
    let per_class: Vec<f64> = (0..num_labels)
        .map(|c| {
            if class_total[c] == 0 {
                f64::NAN
            } else {
                class_hits[c] as f64 / class_total[c] as f64
            }
        })
        .collect();
    let present: Vec<f64> = per_class.iter().copied().filter(|v| !v.is_nan()).collect();
    let macro_avg = present.iter().sum::<f64>() / present.len() as f64;
    Ok(EvalReport {
        overall,
        per_region,
        per_class,
        macro_avg,
        total,
    })
}

/// Load a checkpoint and evaluate it (CLI plumbing).
pub fn evaluate_checkpoint<S: PatchSource>(
    path: &Path,
    set: &SampleSet,
    store: &S,
    cfg: &TrainConfig,
    num_classes: usize,
) -> Result<EvalReport> {
    let params = load_checkpoint(path)?;
    evaluate(&params, set, store, cfg, num_classes)
}
