use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{PipelineConfig, Stage};
use crate::autodiff::DiffArray;
use crate::cloud::{Point3, PointCloud};
use crate::error::{Error, Result};
use crate::filter::final_denoise;
use crate::io::{read_cloud, write_cloud};
use crate::knn::build_knn_graph;
use crate::metrics::{normalized_metrics, Metrics};
use crate::nn::NetworkParams;
use crate::patch::PatchExtractor;
use crate::pca::estimate_normals;

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiseOutput {
    pub cloud: PointCloud,
    pub patches: usize,
    /// Smallest number of patches containing any single point.
    pub min_coverage: usize,
    pub max_coverage: usize,
}

/// Runs the pipeline up to `stage` on a whole cloud.
///
/// The cloud is covered by patches seeded with farthest-point sampling. Each
/// point's output position is its input position plus the mean of the
/// displacements predicted for it by every patch containing it. At stage S3
/// the fine normals from all patches are sign-aligned to the first one,
/// averaged and renormalized, and the merged cloud is passed through the
/// bilateral update. Earlier stages attach PCA normals of the output.
pub fn denoise_cloud(
    params: &NetworkParams,
    cloud: &PointCloud,
    cfg: &PipelineConfig,
    stage: Stage,
) -> Result<DenoiseOutput> {
    cfg.validate()?;
    if params.architecture != cfg.architecture {
        return Err(Error::InvalidCheckpoint(format!(
            "checkpoint architecture {:?} does not match the configured {:?}",
            params.architecture, cfg.architecture
        )));
    }
    let positions = cloud.positions();
    let n = positions.len();
    if n < cfg.patch_size {
        return Err(Error::invalid(format!(
            "cloud has {n} points, fewer than the patch size {}",
            cfg.patch_size
        )));
    }
    let patches = PatchExtractor::new(positions).cover(cfg.patch_size, n)?;
    let edge_k = params.architecture.edge_k;
    let mut displacement = vec![Point3::zeros(); n];
    let mut count = vec![0usize; n];
    let mut normal_sum: Vec<Option<Point3>> = vec![None; n];

    for patch in &patches {
        let local = patch.gather_normalized(positions);
        let graph = build_knn_graph(&local, edge_k)?;
        let x = DiffArray::from_points(&local, false);
        let y = params.forward_sgcn(&x, &graph)?.to_points();
        for ((&i, a), b) in patch.member_indices.iter().zip(&local).zip(&y) {
            displacement[i] += (b - a) * patch.scale;
            count[i] += 1;
        }
        if stage == Stage::S3 {
            let pca_graph = build_knn_graph(&y, cfg.pca_k)?;
            let initial = estimate_normals(&y, &pca_graph)?;
            let ngraph = build_knn_graph(&y, edge_k)?;
            let features = DiffArray::from_points(&y, false)
                .concat_cols(&DiffArray::from_points(&initial, false));
            let fine = params.forward_ngcn(&features, &ngraph)?.to_points();
            for (&i, nrm) in patch.member_indices.iter().zip(&fine) {
                normal_sum[i] = Some(match normal_sum[i] {
                    None => *nrm,
                    Some(acc) if acc.dot(nrm) < 0.0 => acc - nrm,
                    Some(acc) => acc + nrm,
                });
            }
        }
    }

    let merged: Vec<Point3> = positions
        .iter()
        .zip(&displacement)
        .zip(&count)
        .map(|((p, d), &c)| p + d / c as f64)
        .collect();
    let min_coverage = count.iter().copied().min().unwrap_or(0);
    let max_coverage = count.iter().copied().max().unwrap_or(0);
    debug_assert!(min_coverage >= 1);

    let out = if stage == Stage::S3 {
        let fallback_graph = build_knn_graph(&merged, cfg.pca_k)?;
        let fallback = estimate_normals(&merged, &fallback_graph).ok();
        let normals = normal_sum
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let s = s.expect("every point is covered");
                let len = s.norm();
                if len > 1e-12 {
                    Ok(s / len)
                } else {
                    fallback
                        .as_ref()
                        .map(|f| f[i])
                        .ok_or_else(|| Error::DegenerateNormals { indices: vec![i] })
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let with_normals = PointCloud::with_normals(cloud.name(), merged, normals)?;
        final_denoise(&with_normals, &cfg.filter)?
    } else {
        let graph = build_knn_graph(&merged, cfg.pca_k)?;
        let normals = estimate_normals(&merged, &graph)?;
        PointCloud::with_normals(cloud.name(), merged, normals)?
    };
    Ok(DenoiseOutput {
        cloud: out,
        patches: patches.len(),
        min_coverage,
        max_coverage,
    })
}

/// File-level [`denoise_cloud`]: reads the cloud and checkpoint, writes the result.
pub fn denoise(
    cloud_path: impl AsRef<Path>,
    checkpoint: impl AsRef<Path>,
    cfg: &PipelineConfig,
    stage: Stage,
    out_path: impl AsRef<Path>,
) -> Result<DenoiseOutput> {
    let cloud = read_cloud(cloud_path)?;
    let params = NetworkParams::load(checkpoint)?;
    let out = denoise_cloud(&params, &cloud, cfg, stage)?;
    write_cloud(&out.cloud, out_path)?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub model: String,
    pub cd: f64,
    pub mse: f64,
}

pub fn evaluate_clouds(denoised: &PointCloud, clean: &PointCloud) -> Result<Metrics> {
    normalized_metrics(denoised, clean)
}

/// Metrics of a denoised file against its clean reference, both mapped so that
/// their joint bounding box has unit diagonal.
pub fn evaluate(denoised: impl AsRef<Path>, clean: impl AsRef<Path>) -> Result<EvalRecord> {
    let denoised = denoised.as_ref();
    let d = read_cloud(denoised)?;
    let c = read_cloud(clean)?;
    let m = evaluate_clouds(&d, &c)?;
    let model = denoised
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(EvalRecord {
        model,
        cd: m.cd,
        mse: m.mse,
    })
}
