use std::path::Path;

use log::{info, warn};
use rand::seq::{index, SliceRandom};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{PipelineConfig, Stage, TrainMode};
use crate::autodiff::DiffArray;
use crate::cloud::{BoundingBox, Point3};
use crate::dataset::{Manifest, ShapeKind, Split};
use crate::error::{Error, Result};
use crate::knn::build_knn_graph;
use crate::losses::{emd_loss, rn_loss, total_loss_diff, LossWeights};
use crate::nn::NetworkParams;
use crate::optim::{lr_schedule_between, sgd_step_filtered};
use crate::patch::PatchExtractor;
use crate::pca::estimate_normals;
use crate::vn::{sample_vn_set, vn_loss, VnSampleSet};

/// Which loss terms are evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossTerms {
    pub emd: bool,
    pub vn: bool,
    pub rn: bool,
}

impl LossTerms {
    pub fn all() -> Self {
        Self {
            emd: true,
            vn: true,
            rn: true,
        }
    }
}

/// A training patch in normalized coordinates.
#[derive(Debug, Clone)]
pub struct PatchSample {
    pub noisy: Vec<Point3>,
    /// Index-aligned clean positions under the same normalization.
    pub clean: Vec<Point3>,
    pub clean_normals: Vec<Point3>,
    /// Seed of the triangle sampler.
    pub vn_seed: u64,
}

/// Loss graph of one patch. Terms that were not requested, or that could not
/// be formed (no valid triangles, degenerate PCA neighborhoods), are `None`.
pub struct PatchLoss {
    pub emd: Option<DiffArray>,
    pub vn: Option<DiffArray>,
    pub rn: Option<DiffArray>,
    pub total: DiffArray,
    /// S-GCN output.
    pub displaced: DiffArray,
    /// Triangles behind the `vn` term.
    pub vn_set: Option<VnSampleSet>,
}

/// Builds the loss graph of one patch.
///
/// The spatial network displaces the noisy patch; the assignment and
/// triangle-normal losses compare the result to the clean patch. PCA normals
/// of the detached result, concatenated with its positions, feed the normal
/// network, whose output is compared to the clean normals without regard to
/// sign.
pub fn patch_loss(
    params: &NetworkParams,
    sample: &PatchSample,
    terms: LossTerms,
    weights: LossWeights,
    cfg: &PipelineConfig,
) -> Result<PatchLoss> {
    let edge_k = params.architecture.edge_k;
    let graph = build_knn_graph(&sample.noisy, edge_k)?;
    let x = DiffArray::from_points(&sample.noisy, false);
    let displaced = params.forward_sgcn(&x, &graph)?;

    let emd = if terms.emd {
        Some(emd_loss(&displaced, &sample.clean)?.0)
    } else {
        None
    };

    let mut vn_set = None;
    let vn = if terms.vn {
        let threshold =
            cfg.vn_edge_fraction * BoundingBox::of(&sample.clean).map_or(0.0, |b| b.diagonal());
        match sample_vn_set(
            &sample.clean,
            cfg.vn_count,
            threshold,
            sample.vn_seed,
            1000 * cfg.vn_count,
        ) {
            Ok(set) => {
                let loss = vn_loss(&displaced, &sample.clean, &set)?;
                vn_set = Some(set);
                Some(loss)
            }
            Err(Error::SamplingExhausted {
                accepted, attempts, ..
            }) => {
                warn!("triangle sampling accepted {accepted} of {attempts} draws; patch trained without it");
                None
            }
            Err(e) => return Err(e),
        }
    } else {
        None
    };

    let rn = if terms.rn {
        let positions = displaced.to_points();
        let pca_graph = build_knn_graph(&positions, cfg.pca_k)?;
        match estimate_normals(&positions, &pca_graph) {
            Ok(initial) => {
                let ngraph = build_knn_graph(&positions, edge_k)?;
                let features = DiffArray::from_points(&positions, false)
                    .concat_cols(&DiffArray::from_points(&initial, false));
                let fine = params.forward_ngcn(&features, &ngraph)?;
                Some(rn_loss(&fine, &sample.clean_normals)?)
            }
            Err(Error::DegenerateNormals { indices }) => {
                warn!(
                    "{} degenerate PCA neighborhoods; patch trained without the normal term",
                    indices.len()
                );
                None
            }
            Err(e) => return Err(e),
        }
    } else {
        None
    };

    let total = total_loss_diff(emd.as_ref(), vn.as_ref(), rn.as_ref(), weights);
    Ok(PatchLoss {
        emd,
        vn,
        rn,
        total,
        displaced,
        vn_set,
    })
}

/// One noisy/clean training pair.
#[derive(Debug, Clone)]
pub struct TrainModel {
    pub name: String,
    pub kind: ShapeKind,
    pub noisy: Vec<Point3>,
    pub clean: Vec<Point3>,
    pub clean_normals: Vec<Point3>,
}

impl TrainModel {
    pub fn load_split(manifest: &Manifest, split: Split) -> Result<Vec<Self>> {
        let entries = manifest.split(split);
        if entries.is_empty() {
            return Err(Error::InvalidManifest(format!(
                "no {split:?} entries in manifest"
            )));
        }
        entries
            .into_iter()
            .map(|e| {
                let (clean, noisy) = manifest.load_pair(e)?;
                Ok(Self {
                    name: if e.name.is_empty() {
                        e.noisy.clone()
                    } else {
                        format!("{}@{}", e.name, e.scale)
                    },
                    kind: e.kind,
                    noisy: noisy.positions().to_vec(),
                    clean: clean.positions().to_vec(),
                    clean_normals: clean.normals().expect("checked by load_pair").to_vec(),
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub phase: usize,
    pub epoch: usize,
    pub batch: usize,
    pub lr: f64,
    pub patches: usize,
    pub emd: Option<f64>,
    pub vn: Option<f64>,
    pub rn: Option<f64>,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub phase: usize,
    pub epoch: usize,
    pub lr: f64,
    pub total: f64,
    pub emd: Option<f64>,
    pub vn: Option<f64>,
    pub rn: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub stage: Stage,
    pub train_mode: TrainMode,
    pub models: usize,
    pub epochs: Vec<EpochSummary>,
    pub batches: Vec<BatchRecord>,
    pub vn_skipped: usize,
    pub rn_skipped: usize,
}

impl TrainReport {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

struct Phase {
    terms: LossTerms,
    weights: LossWeights,
    /// Parameter name prefix selected for updates; empty selects all.
    prefix: &'static str,
}

fn phases(cfg: &PipelineConfig) -> Vec<Phase> {
    let (terms, weights) = cfg.stage.loss_terms(cfg.loss);
    let ngcn_used = terms.rn;
    match cfg.train_mode {
        TrainMode::Joint => vec![Phase {
            terms,
            weights,
            prefix: if ngcn_used { "" } else { "sgcn." },
        }],
        TrainMode::Sequential => {
            let mut v = vec![Phase {
                terms: LossTerms { rn: false, ..terms },
                weights,
                prefix: "sgcn.",
            }];
            if ngcn_used {
                v.push(Phase {
                    terms: LossTerms {
                        emd: false,
                        vn: false,
                        rn: true,
                    },
                    weights,
                    prefix: "ngcn.",
                });
            }
            v
        }
    }
}

fn mean_of(v: &[Option<f64>]) -> Option<f64> {
    let vals: Vec<f64> = v.iter().flatten().copied().collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

fn finite_or_diverge(value: f64, what: &str, epoch: usize, batch: usize) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::Divergence(format!(
            "{what} loss is {value} at epoch {epoch}, batch {batch}"
        )))
    }
}

/// Per-patch notification from [`train_models_observed`].
pub struct PatchEvent<'a> {
    pub phase: usize,
    pub epoch: usize,
    pub batch: usize,
    pub model: &'a str,
    pub seed_index: usize,
    pub loss: &'a PatchLoss,
}

/// Trains from freshly initialized parameters on in-memory models.
pub fn train_models(
    models: &[TrainModel],
    cfg: &PipelineConfig,
) -> Result<(NetworkParams, TrainReport)> {
    train_models_observed(models, cfg, &mut |_| {})
}

/// [`train_models`] calling `observe` after every patch's forward pass.
pub fn train_models_observed(
    models: &[TrainModel],
    cfg: &PipelineConfig,
    observe: &mut dyn FnMut(&PatchEvent<'_>),
) -> Result<(NetworkParams, TrainReport)> {
    cfg.validate()?;
    if models.is_empty() {
        return Err(Error::invalid("no training models"));
    }
    for m in models {
        if m.noisy.len() < cfg.patch_size || m.noisy.len() != m.clean.len() {
            return Err(Error::InvalidManifest(format!(
                "{}: {} noisy and {} clean points for patch size {}",
                m.name,
                m.noisy.len(),
                m.clean.len(),
                cfg.patch_size
            )));
        }
    }
    let mut params = NetworkParams::init(cfg.architecture.clone(), cfg.rng_seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let extractors: Vec<PatchExtractor<'_>> = models
        .iter()
        .map(|m| PatchExtractor::new(&m.noisy))
        .collect();
    let mut report = TrainReport {
        stage: cfg.stage,
        train_mode: cfg.train_mode,
        models: models.len(),
        epochs: Vec::new(),
        batches: Vec::new(),
        vn_skipped: 0,
        rn_skipped: 0,
    };

    for (phase_index, phase) in phases(cfg).iter().enumerate() {
        for epoch in 0..cfg.epochs {
            let lr = lr_schedule_between(epoch, cfg.epochs, cfg.lr_initial, cfg.lr_final);
            let mut items: Vec<(usize, usize)> = Vec::new();
            for (m, model) in models.iter().enumerate() {
                let count = cfg.patches_per_model.min(model.noisy.len());
                let seeds = index::sample(&mut rng, model.noisy.len(), count);
                items.extend(seeds.into_iter().map(|s| (m, s)));
            }
            items.shuffle(&mut rng);
            let first_batch = report.batches.len();
            for (b, batch) in items.chunks(cfg.batch_size).enumerate() {
                let scale = 1.0 / batch.len() as f64;
                let (mut emd, mut vn, mut rn, mut total) =
                    (Vec::new(), Vec::new(), Vec::new(), 0.0);
                for &(m, seed) in batch {
                    let model = &models[m];
                    let patch = extractors[m].extract(seed, cfg.patch_size)?;
                    let sample = PatchSample {
                        noisy: patch.gather_normalized(&model.noisy),
                        clean: patch.gather_normalized(&model.clean),
                        clean_normals: patch.gather(&model.clean_normals),
                        vn_seed: rng.next_u64(),
                    };
                    let loss = patch_loss(&params, &sample, phase.terms, phase.weights, cfg)?;
                    observe(&PatchEvent {
                        phase: phase_index,
                        epoch,
                        batch: b,
                        model: &model.name,
                        seed_index: seed,
                        loss: &loss,
                    });
                    if phase.terms.vn && loss.vn.is_none() {
                        report.vn_skipped += 1;
                    }
                    if phase.terms.rn && loss.rn.is_none() {
                        report.rn_skipped += 1;
                    }
                    let value = finite_or_diverge(loss.total.item(), "total", epoch, b)?;
                    total += value * scale;
                    emd.push(loss.emd.as_ref().map(DiffArray::item));
                    vn.push(loss.vn.as_ref().map(DiffArray::item));
                    rn.push(loss.rn.as_ref().map(DiffArray::item));
                    if loss.total.requires_grad() {
                        loss.total.scale(scale).backward()?;
                    }
                }
                for (net, net_lr) in [("sgcn.", lr), ("ngcn.", lr * cfg.ngcn_lr_scale)] {
                    if net.starts_with(phase.prefix) {
                        sgd_step_filtered(&mut params, net_lr, cfg.momentum, |name| {
                            name.starts_with(net)
                        })?;
                    }
                }
                params.zero_grad();
                report.batches.push(BatchRecord {
                    phase: phase_index,
                    epoch,
                    batch: b,
                    lr,
                    patches: batch.len(),
                    emd: mean_of(&emd),
                    vn: mean_of(&vn),
                    rn: mean_of(&rn),
                    total,
                });
            }
            let records = &report.batches[first_batch..];
            let avg = |f: fn(&BatchRecord) -> Option<f64>| {
                mean_of(&records.iter().map(f).collect::<Vec<_>>())
            };
            let summary = EpochSummary {
                phase: phase_index,
                epoch,
                lr,
                total: avg(|r| Some(r.total)).unwrap_or(0.0),
                emd: avg(|r| r.emd),
                vn: avg(|r| r.vn),
                rn: avg(|r| r.rn),
            };
            info!(
                "phase {phase_index} epoch {epoch}: lr {lr:.3e} total {:.6} emd {:?} vn {:?} rn {:?}",
                summary.total, summary.emd, summary.vn, summary.rn
            );
            report.epochs.push(summary);
            params.epoch += 1;
        }
    }
    if !params.all_finite() {
        return Err(Error::Divergence("parameters became non-finite".into()));
    }
    Ok((params, report))
}

/// Trains on the training split of a manifest and writes the checkpoint.
pub fn train(
    manifest: impl AsRef<Path>,
    cfg: &PipelineConfig,
    out_checkpoint: impl AsRef<Path>,
) -> Result<TrainReport> {
    train_observed(manifest, cfg, out_checkpoint, &mut |_| {})
}

pub fn train_observed(
    manifest: impl AsRef<Path>,
    cfg: &PipelineConfig,
    out_checkpoint: impl AsRef<Path>,
    observe: &mut dyn FnMut(&PatchEvent<'_>),
) -> Result<TrainReport> {
    let manifest = Manifest::load(manifest)?;
    let models = TrainModel::load_split(&manifest, Split::Train)?;
    let (params, report) = train_models_observed(&models, cfg, observe)?;
    params.save(out_checkpoint)?;
    Ok(report)
}
