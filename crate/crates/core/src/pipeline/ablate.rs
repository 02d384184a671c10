use std::path::Path;

use log::info;
use serde::{Deserialize, Serialize};

use super::infer::{denoise_cloud, evaluate_clouds};
use super::train::{train_models, TrainModel, TrainReport};
use super::{PipelineConfig, Stage};
use crate::cloud::PointCloud;
use crate::dataset::{Manifest, Split};
use crate::error::{Error, Result};
use crate::metrics::Metrics;

/// Mean of a metric over the sharp-edged and the smooth shapes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupMse {
    pub cad: f64,
    pub non_cad: f64,
}

/// Rows Input, S1, S2, S3; columns CAD and non-CAD.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub input: GroupMse,
    pub s1: GroupMse,
    pub s2: GroupMse,
    pub s3: GroupMse,
}

impl AblationTable {
    pub fn rows(&self) -> [(&'static str, GroupMse); 4] {
        [
            ("Input", self.input),
            ("S1", self.s1),
            ("S2", self.s2),
            ("S3", self.s3),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryResult {
    pub name: String,
    pub cad: bool,
    pub scale: f64,
    pub input: Metrics,
    pub s1: Metrics,
    pub s2: Metrics,
    pub s3: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub entries: Vec<EntryResult>,
    pub mse: AblationTable,
    pub cd: AblationTable,
    pub s1_training: TrainReport,
    pub s3_training: TrainReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub evaluated_split: Split,
    pub per_seed: Vec<SeedResult>,
    /// Cell-wise median over seeds.
    pub median_mse: AblationTable,
    pub median_cd: AblationTable,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn table_median(tables: &[AblationTable]) -> AblationTable {
    let cell = |f: &dyn Fn(&AblationTable) -> GroupMse| GroupMse {
        cad: median(tables.iter().map(|t| f(t).cad).collect()),
        non_cad: median(tables.iter().map(|t| f(t).non_cad).collect()),
    };
    AblationTable {
        input: cell(&|t| t.input),
        s1: cell(&|t| t.s1),
        s2: cell(&|t| t.s2),
        s3: cell(&|t| t.s3),
    }
}

fn group_mean(entries: &[EntryResult], pick: impl Fn(&EntryResult) -> f64) -> GroupMse {
    let mean = |cad: bool| {
        let v: Vec<f64> = entries.iter().filter(|e| e.cad == cad).map(&pick).collect();
        if v.is_empty() {
            f64::NAN
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    GroupMse {
        cad: mean(true),
        non_cad: mean(false),
    }
}

fn tables(entries: &[EntryResult], metric: fn(&Metrics) -> f64) -> AblationTable {
    AblationTable {
        input: group_mean(entries, |e| metric(&e.input)),
        s1: group_mean(entries, |e| metric(&e.s1)),
        s2: group_mean(entries, |e| metric(&e.s2)),
        s3: group_mean(entries, |e| metric(&e.s3)),
    }
}

impl AblationReport {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// Median MSE table in markdown (values ×10⁴ of the unit-diagonal frame).
    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| Stage | CAD | non-CAD |\n|---|---|---|\n");
        for (name, g) in self.median_mse.rows() {
            s.push_str(&format!(
                "| {name} | {:.4} | {:.4} |\n",
                g.cad * 1e4,
                g.non_cad * 1e4
            ));
        }
        s
    }
}

/// Trains an S1 model and a full model for every seed and compares the
/// stages on the held-out split (or the training split when the manifest
/// has no held-out entries). S2 is the full model's spatial network alone:
/// the normal loss never reaches the spatial parameters, so an S2-only
/// training run would yield the same spatial network.
///
/// When `work_dir` is given, checkpoints and training reports are written there.
pub fn ablate(
    manifest: impl AsRef<Path>,
    cfg: &PipelineConfig,
    seeds: &[u64],
    work_dir: Option<&Path>,
) -> Result<AblationReport> {
    if seeds.is_empty() {
        return Err(Error::invalid("at least one seed is required"));
    }
    let manifest = Manifest::load(manifest)?;
    let train_set = TrainModel::load_split(&manifest, Split::Train)?;
    let evaluated_split = if manifest.split(Split::Test).is_empty() {
        Split::Train
    } else {
        Split::Test
    };
    let mut eval_set: Vec<(String, bool, f64, PointCloud, PointCloud)> = Vec::new();
    for e in manifest.split(evaluated_split) {
        let (clean, noisy) = manifest.load_pair(e)?;
        let name = if e.name.is_empty() {
            e.noisy.clone()
        } else {
            format!("{}@{}", e.name, e.scale)
        };
        eval_set.push((name, e.kind.is_cad(), e.scale, clean, noisy));
    }
    if let Some(dir) = work_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let mut per_seed = Vec::new();
    for &seed in seeds {
        let s1_cfg = PipelineConfig {
            rng_seed: seed,
            stage: Stage::S1,
            ..cfg.clone()
        };
        let s3_cfg = PipelineConfig {
            rng_seed: seed,
            stage: Stage::S3,
            ..cfg.clone()
        };
        info!("seed {seed}: training S1");
        let (s1_params, s1_training) = train_models(&train_set, &s1_cfg)?;
        info!("seed {seed}: training S3");
        let (s3_params, s3_training) = train_models(&train_set, &s3_cfg)?;
        if let Some(dir) = work_dir {
            s1_params.save(dir.join(format!("seed{seed}_s1.json")))?;
            s3_params.save(dir.join(format!("seed{seed}_s3.json")))?;
        }
        let mut entries = Vec::new();
        for (name, cad, scale, clean, noisy) in &eval_set {
            let run = |params, stage| -> Result<Metrics> {
                let out = denoise_cloud(params, noisy, cfg, stage)?;
                evaluate_clouds(&out.cloud, clean)
            };
            let entry = EntryResult {
                name: name.clone(),
                cad: *cad,
                scale: *scale,
                input: evaluate_clouds(noisy, clean)?,
                s1: run(&s1_params, Stage::S1)?,
                s2: run(&s3_params, Stage::S2)?,
                s3: run(&s3_params, Stage::S3)?,
            };
            info!(
                "seed {seed} {name}: mse input {:.3e} s1 {:.3e} s2 {:.3e} s3 {:.3e}",
                entry.input.mse, entry.s1.mse, entry.s2.mse, entry.s3.mse
            );
            entries.push(entry);
        }
        per_seed.push(SeedResult {
            seed,
            mse: tables(&entries, |m| m.mse),
            cd: tables(&entries, |m| m.cd),
            entries,
            s1_training,
            s3_training,
        });
    }
    let median_mse = table_median(&per_seed.iter().map(|s| s.mse).collect::<Vec<_>>());
    let median_cd = table_median(&per_seed.iter().map(|s| s.cd).collect::<Vec<_>>());
    Ok(AblationReport {
        evaluated_split,
        per_seed,
        median_mse,
        median_cd,
    })
}
