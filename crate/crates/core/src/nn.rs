//! EdgeConv graph networks for point displacement (S-GCN) and normal
//! refinement (N-GCN), with JSON checkpoints.

use std::path::Path;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::DiffArray;
use crate::error::{Error, Result};
use crate::knn::KnnGraph;

pub const LEAKY_SLOPE: f64 = 0.1;
/// Epsilon of the N-GCN output normalization.
pub const NORMAL_EPS: f64 = 1e-12;
const CHECKPOINT_FORMAT: &str = "geogcn-checkpoint-v1";

/// Channel layout of both networks. `*_channels[0]` is the input width
/// (3 for positions, 6 for positions with normals); each further entry is the
/// output width of one EdgeConv layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Architecture {
    pub sgcn_channels: Vec<usize>,
    pub ngcn_channels: Vec<usize>,
    /// Neighbors per point in the EdgeConv graph.
    pub edge_k: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            sgcn_channels: vec![3, 64, 64, 128],
            ngcn_channels: vec![6, 64, 64, 128],
            edge_k: 16,
        }
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        for (name, ch, input) in [
            ("sgcn", &self.sgcn_channels, 3),
            ("ngcn", &self.ngcn_channels, 6),
        ] {
            if ch.len() < 2 || ch[0] != input || ch.contains(&0) {
                return Err(Error::invalid(format!(
                    "{name} channels {ch:?} must start at {input} and list at least one positive layer width"
                )));
            }
        }
        if self.edge_k == 0 {
            return Err(Error::invalid("edge_k must be positive"));
        }
        Ok(())
    }
}

/// One EdgeConv layer: a two-layer MLP on `[x_i, x_j - x_i]` followed by a
/// channel-wise max over the neighbors `j` of `i`.
///
/// The first MLP layer is stored as two blocks, `w_center` acting on `x_i`
/// and `w_edge` acting on `x_j - x_i`, so that it can be evaluated per point
/// instead of per edge.
#[derive(Debug, Clone)]
pub struct EdgeConvLayer {
    pub c_in: usize,
    pub c_out: usize,
    pub w_center: DiffArray,
    pub w_edge: DiffArray,
    pub b1: DiffArray,
    pub w2: DiffArray,
    pub b2: DiffArray,
}

fn xavier(
    rng: &mut ChaCha8Rng,
    fan_in: usize,
    fan_out: usize,
    rows: usize,
    cols: usize,
) -> DiffArray {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let v = (0..rows * cols)
        .map(|_| rng.random_range(-bound..=bound))
        .collect();
    DiffArray::leaf(v, &[rows, cols]).expect("consistent shape")
}

impl EdgeConvLayer {
    fn init(c_in: usize, c_out: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            c_in,
            c_out,
            w_center: xavier(rng, 2 * c_in, c_out, c_in, c_out),
            w_edge: xavier(rng, 2 * c_in, c_out, c_in, c_out),
            b1: DiffArray::zeros(&[1, c_out], true),
            w2: xavier(rng, c_out, c_out, c_out, c_out),
            b2: DiffArray::zeros(&[1, c_out], true),
        }
    }

    /// `x` is `[n, c_in]`; `edges` lists the center and neighbor row of each
    /// edge, grouped by center.
    pub fn forward(&self, x: &DiffArray, edges: &EdgeIndex) -> DiffArray {
        let center = x.matmul(&self.w_center);
        let edge = x.matmul(&self.w_edge);
        // [x_i, x_j - x_i]·W = x_i·(Wc - We) + x_j·We
        let own = center.sub(&edge).add_row(&self.b1);
        let pre = own
            .gather_rows(edges.centers.clone())
            .add(&edge.gather_rows(edges.neighbors.clone()));
        pre.leaky_relu(LEAKY_SLOPE)
            .matmul(&self.w2)
            .add_row(&self.b2)
            .leaky_relu(LEAKY_SLOPE)
            .max_group(edges.k)
    }

    fn params(&self) -> [&DiffArray; 5] {
        [&self.w_center, &self.w_edge, &self.b1, &self.w2, &self.b2]
    }
}

/// Edge lists of a kNN graph in the layout used by [`EdgeConvLayer`].
#[derive(Debug, Clone)]
pub struct EdgeIndex {
    pub k: usize,
    pub n: usize,
    centers: Rc<[usize]>,
    neighbors: Rc<[usize]>,
}

impl EdgeIndex {
    pub fn new(graph: &KnnGraph) -> Self {
        let k = graph.k();
        let n = graph.len();
        Self {
            k,
            n,
            centers: (0..n).flat_map(|i| std::iter::repeat_n(i, k)).collect(),
            neighbors: graph.flat().into(),
        }
    }
}

/// A stack of EdgeConv layers followed by a per-point linear head with three
/// outputs. The head starts at zero.
#[derive(Debug, Clone)]
pub struct GraphNet {
    pub layers: Vec<EdgeConvLayer>,
    pub head_w: DiffArray,
    pub head_b: DiffArray,
}

impl GraphNet {
    fn init(channels: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let layers = channels
            .windows(2)
            .map(|w| EdgeConvLayer::init(w[0], w[1], rng))
            .collect();
        let last = *channels.last().expect("validated channels");
        Self {
            layers,
            head_w: DiffArray::zeros(&[last, 3], true),
            head_b: DiffArray::zeros(&[1, 3], true),
        }
    }

    fn input_channels(&self) -> usize {
        self.layers[0].c_in
    }

    /// Per-point head output `[n, 3]`.
    pub fn features_to_output(&self, x: &DiffArray, edges: &EdgeIndex) -> DiffArray {
        let h = self
            .layers
            .iter()
            .fold(x.clone(), |h, layer| layer.forward(&h, edges));
        h.matmul(&self.head_w).add_row(&self.head_b)
    }

    fn named_params(&self, prefix: &str) -> Vec<(String, &DiffArray)> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            let names = ["w_center", "w_edge", "b1", "w2", "b2"];
            for (name, p) in names.iter().zip(layer.params()) {
                out.push((format!("{prefix}.layer{l}.{name}"), p));
            }
        }
        out.push((format!("{prefix}.head.w"), &self.head_w));
        out.push((format!("{prefix}.head.b"), &self.head_b));
        out
    }
}

/// Parameters of both networks together with the optimizer state.
#[derive(Debug, Clone)]
pub struct NetworkParams {
    pub architecture: Architecture,
    pub sgcn: GraphNet,
    pub ngcn: GraphNet,
    /// Momentum buffers aligned with [`NetworkParams::named_params`].
    pub momentum: Vec<Vec<f64>>,
    pub rng_seed: u64,
    pub epoch: usize,
}

fn check_input(x: &DiffArray, channels: usize, graph: &KnnGraph, what: &str) -> Result<()> {
    if x.shape().len() != 2 || x.cols() != channels {
        return Err(Error::invalid(format!(
            "{what} expects [n, {channels}] input, got {:?}",
            x.shape()
        )));
    }
    if x.rows() != graph.len() {
        return Err(Error::invalid(format!(
            "{what}: {} input rows but the graph has {} nodes",
            x.rows(),
            graph.len()
        )));
    }
    Ok(())
}

impl NetworkParams {
    /// Random hidden layers, zero heads.
    pub fn init(architecture: Architecture, rng_seed: u64) -> Result<Self> {
        architecture.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let sgcn = GraphNet::init(&architecture.sgcn_channels, &mut rng);
        let ngcn = GraphNet::init(&architecture.ngcn_channels, &mut rng);
        let mut params = Self {
            architecture,
            sgcn,
            ngcn,
            momentum: Vec::new(),
            rng_seed,
            epoch: 0,
        };
        params.momentum = params
            .named_params()
            .iter()
            .map(|(_, p)| vec![0.0; p.len()])
            .collect();
        Ok(params)
    }

    /// All trainable arrays in a fixed order, S-GCN first.
    pub fn named_params(&self) -> Vec<(String, &DiffArray)> {
        let mut v = self.sgcn.named_params("sgcn");
        v.extend(self.ngcn.named_params("ngcn"));
        v
    }

    pub fn zero_grad(&self) {
        for (_, p) in self.named_params() {
            p.zero_grad();
        }
    }

    /// Displaced positions `x + head(h)` for a `[n, 3]` patch.
    pub fn forward_sgcn(&self, positions: &DiffArray, graph: &KnnGraph) -> Result<DiffArray> {
        check_input(positions, self.sgcn.input_channels(), graph, "S-GCN")?;
        let edges = EdgeIndex::new(graph);
        Ok(positions.add(&self.sgcn.features_to_output(positions, &edges)))
    }

    /// Unit normals `normalize(n0 + head(h))` for `[n, 6]` features whose last
    /// three columns are the initial normals `n0`.
    pub fn forward_ngcn(&self, features: &DiffArray, graph: &KnnGraph) -> Result<DiffArray> {
        check_input(features, self.ngcn.input_channels(), graph, "N-GCN")?;
        let edges = EdgeIndex::new(graph);
        let n0 = features.matmul(&select_normal_columns());
        Ok(n0
            .add(&self.ngcn.features_to_output(features, &edges))
            .normalize_rows(NORMAL_EPS))
    }

    /// Whether every parameter value is finite.
    pub fn all_finite(&self) -> bool {
        self.named_params()
            .iter()
            .all(|(_, p)| p.values().iter().all(|v| v.is_finite()))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let named = self.named_params();
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            architecture: self.architecture.clone(),
            parameters: named
                .iter()
                .zip(&self.momentum)
                .map(|((name, p), m)| NamedArray {
                    name: name.clone(),
                    shape: p.shape().to_vec(),
                    values: p.to_vec(),
                    momentum: m.clone(),
                })
                .collect(),
            rng_seed: self.rng_seed,
            epoch: self.epoch,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::InvalidCheckpoint(format!(
                "unknown format tag {:?}",
                ckpt.format
            )));
        }
        ckpt.architecture
            .validate()
            .map_err(|e| Error::InvalidCheckpoint(e.to_string()))?;
        let mut params = Self::init(ckpt.architecture.clone(), ckpt.rng_seed)?;
        let named = params.named_params();
        if named.len() != ckpt.parameters.len() {
            return Err(Error::InvalidCheckpoint(format!(
                "architecture has {} parameter arrays, checkpoint has {}",
                named.len(),
                ckpt.parameters.len()
            )));
        }
        let mut momentum = Vec::with_capacity(named.len());
        for ((name, p), stored) in named.iter().zip(&ckpt.parameters) {
            if *name != stored.name || p.shape() != stored.shape.as_slice() {
                return Err(Error::InvalidCheckpoint(format!(
                    "expected {name} with shape {:?}, found {} with shape {:?}",
                    p.shape(),
                    stored.name,
                    stored.shape
                )));
            }
            if stored.values.len() != p.len() || stored.momentum.len() != p.len() {
                return Err(Error::InvalidCheckpoint(format!(
                    "{name}: {} values and {} momentum entries for {} elements",
                    stored.values.len(),
                    stored.momentum.len(),
                    p.len()
                )));
            }
            if !stored
                .values
                .iter()
                .chain(&stored.momentum)
                .all(|v| v.is_finite())
            {
                return Err(Error::InvalidCheckpoint(format!(
                    "{name} has non-finite entries"
                )));
            }
            p.set_values(&stored.values)?;
            momentum.push(stored.momentum.clone());
        }
        params.momentum = momentum;
        params.epoch = ckpt.epoch;
        Ok(params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text =
            serde_json::to_string(&self.to_checkpoint()).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        Self::from_checkpoint(&ckpt)
    }
}

/// `[6, 3]` selector of the last three columns.
fn select_normal_columns() -> DiffArray {
    let mut v = vec![0.0; 18];
    for c in 0..3 {
        v[(3 + c) * 3 + c] = 1.0;
    }
    DiffArray::constant(v, &[6, 3]).expect("consistent shape")
}

/// Serialized form of [`NetworkParams`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub architecture: Architecture,
    pub parameters: Vec<NamedArray>,
    pub rng_seed: u64,
    pub epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub momentum: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::Point3;
    use crate::knn::build_knn_graph;

    fn small_arch() -> Architecture {
        Architecture {
            sgcn_channels: vec![3, 8, 6],
            ngcn_channels: vec![6, 8, 5],
            edge_k: 4,
        }
    }

    fn patch(n: usize, seed: u64) -> Vec<Point3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                Point3::new(rng.random(), rng.random(), rng.random()) * 2.0 - Point3::repeat(1.0)
            })
            .collect()
    }

    fn randomize_heads(p: &NetworkParams, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for a in [
            &p.sgcn.head_w,
            &p.sgcn.head_b,
            &p.ngcn.head_w,
            &p.ngcn.head_b,
        ] {
            let v: Vec<f64> = (0..a.len()).map(|_| rng.random_range(-0.5..0.5)).collect();
            a.set_values(&v).unwrap();
        }
    }

    #[test]
    fn zero_head_sgcn_is_identity() {
        let p = NetworkParams::init(small_arch(), 3).unwrap();
        let pts = patch(20, 1);
        let g = build_knn_graph(&pts, 4).unwrap();
        let x = DiffArray::from_points(&pts, false);
        let y = p.forward_sgcn(&x, &g).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn zero_head_ngcn_returns_initial_normals() {
        let p = NetworkParams::init(small_arch(), 3).unwrap();
        let pts = patch(20, 2);
        let g = build_knn_graph(&pts, 4).unwrap();
        let normals: Vec<Point3> = patch(20, 5).iter().map(|v| v.normalize()).collect();
        let feats = DiffArray::from_points(&pts, false)
            .concat_cols(&DiffArray::from_points(&normals, false));
        let out = p.forward_ngcn(&feats, &g).unwrap().to_points();
        for (a, b) in out.iter().zip(&normals) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn ngcn_outputs_unit_rows() {
        let p = NetworkParams::init(small_arch(), 9).unwrap();
        randomize_heads(&p, 4);
        let pts = patch(16, 7);
        let g = build_knn_graph(&pts, 4).unwrap();
        let normals: Vec<Point3> = patch(16, 8).iter().map(|v| v.normalize()).collect();
        let feats = DiffArray::from_points(&pts, false)
            .concat_cols(&DiffArray::from_points(&normals, false));
        for n in p.forward_ngcn(&feats, &g).unwrap().to_points() {
            assert!((n.norm() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn grads_are_finite_for_every_parameter() {
        let p = NetworkParams::init(small_arch(), 11).unwrap();
        randomize_heads(&p, 12);
        let pts = patch(24, 13);
        let g = build_knn_graph(&pts, 4).unwrap();
        let x = DiffArray::from_points(&pts, true);
        let y = p.forward_sgcn(&x, &g).unwrap();
        let normals = DiffArray::from_points(&patch(24, 14), false).normalize_rows(1e-12);
        let n = p.forward_ngcn(&y.concat_cols(&normals), &g).unwrap();
        y.mul(&y).sum().add(&n.sum()).backward().unwrap();
        for (name, a) in p.named_params() {
            let grad = a.grad().unwrap_or_else(|| panic!("{name} has no gradient"));
            assert!(grad.iter().all(|v| v.is_finite()), "{name}");
        }
        assert!(x.grad().unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let p = NetworkParams::init(small_arch(), 1).unwrap();
        let pts = patch(10, 1);
        let g = build_knn_graph(&pts, 4).unwrap();
        let x = DiffArray::from_points(&pts[..9], false);
        assert!(matches!(
            p.forward_sgcn(&x, &g),
            Err(Error::InvalidArgument(_))
        ));
        let x = DiffArray::from_points(&pts, false);
        assert!(p.forward_ngcn(&x, &g).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = NetworkParams::init(small_arch(), 21).unwrap();
        randomize_heads(&p, 2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        p.save(&path).unwrap();
        let q = NetworkParams::load(&path).unwrap();
        assert_eq!(p.to_checkpoint(), q.to_checkpoint());
        let mut ckpt = p.to_checkpoint();
        ckpt.parameters[0].shape = vec![1, 1];
        assert!(matches!(
            NetworkParams::from_checkpoint(&ckpt),
            Err(Error::InvalidCheckpoint(_))
        ));
    }

    #[test]
    fn architecture_validation() {
        let mut a = small_arch();
        a.sgcn_channels = vec![6, 8];
        assert!(NetworkParams::init(a, 0).is_err());
        let mut a = small_arch();
        a.edge_k = 0;
        assert!(a.validate().is_err());
    }
}
