//! Property tests checked against independent reference computations.

use std::f64::consts::PI;

use nalgebra::Rotation3;
use proptest::prelude::*;

use geogcn::autodiff::DiffArray;
use geogcn::cloud::{Point3, PointCloud};
use geogcn::emd::emd_assignment;
use geogcn::filter::{bilateral_weight, filter_step, FilterConfig, FilterMode};
use geogcn::io::{read_cloud, write_cloud};
use geogcn::knn::{build_knn_graph, KnnGraph};
use geogcn::losses::{rn_loss, total_loss_diff, LossWeights};
use geogcn::metrics::chamfer_distance;
use geogcn::nn::{Architecture, NetworkParams};
use geogcn::optim::sgd_step;
use geogcn::patch::PatchExtractor;
use geogcn::pca::pca_normal;
use geogcn::vn::{sample_vn_set, triangle_is_valid, vn_loss};

fn point() -> impl Strategy<Value = Point3> {
    (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64).prop_map(|(x, y, z)| Point3::new(x, y, z))
}

fn cloud(min: usize, max: usize) -> impl Strategy<Value = Vec<Point3>> {
    prop::collection::vec(point(), min..max)
}

fn unit() -> impl Strategy<Value = Point3> {
    point()
        .prop_filter("non-zero", |p| p.norm() > 1e-3)
        .prop_map(|p| p.normalize())
}

fn rotation() -> impl Strategy<Value = Rotation3<f64>> {
    (unit(), 0.0..2.0 * PI).prop_map(|(axis, angle)| {
        Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle)
    })
}

/// Sorts every other point by (squared distance, index).
fn brute_knn(points: &[Point3], k: usize) -> Vec<usize> {
    let mut out = Vec::new();
    for (i, p) in points.iter().enumerate() {
        let mut d: Vec<(f64, usize)> = points
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(j, q)| ((p - q).norm_squared(), j))
            .collect();
        d.sort_by(|a, b| a.partial_cmp(b).unwrap());
        out.extend(d.iter().take(k).map(|x| x.1));
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn knn_matches_brute_force(points in cloud(5, 400), k in 1usize..5) {
        let graph = build_knn_graph(&points, k).unwrap();
        let expected = brute_knn(&points, k);
        prop_assert_eq!(graph.flat(), expected.as_slice());
    }

    #[test]
    fn knn_on_lattice_ties_prefers_low_indices(n in 3usize..9, k in 1usize..6) {
        let points: Vec<Point3> = (0..n * n * 5)
            .map(|i| Point3::new((i % n) as f64, ((i / n) % n) as f64, (i / (n * n)) as f64))
            .collect();
        let graph = build_knn_graph(&points, k).unwrap();
        let expected = brute_knn(&points, k);
        prop_assert_eq!(graph.flat(), expected.as_slice());
    }

    #[test]
    fn pca_normal_rotates_with_the_points(rot in rotation(), noise in cloud(30, 31)) {
        let plane: Vec<Point3> = noise.iter().map(|p| Point3::new(p.x, p.y, 0.05 * p.z)).collect();
        let n0 = pca_normal(&plane).unwrap().direction;
        let rotated: Vec<Point3> = plane.iter().map(|p| rot * p).collect();
        let n1 = pca_normal(&rotated).unwrap().direction;
        prop_assert!((rot * n0).dot(&n1).abs() > 1.0 - 1e-9);
    }

    #[test]
    fn patch_normalization_is_invertible(points in cloud(20, 60), seed in 0usize..20, k in 2usize..20) {
        let ex = PatchExtractor::new(&points);
        let patch = ex.extract(seed, k).unwrap();
        prop_assert_eq!(patch.member_indices[0], seed);
        let local = patch.gather_normalized(&points);
        let max = local.iter().map(|p| p.norm()).fold(0.0, f64::max);
        prop_assert!((max - 1.0).abs() < 1e-12);
        for (q, &i) in local.iter().zip(&patch.member_indices) {
            prop_assert!((patch.denormalize_point(q) - points[i]).norm() < 1e-12);
        }
    }

    #[test]
    fn io_round_trip(points in cloud(1, 50), normals in prop::collection::vec(unit(), 50), ply in any::<bool>()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(if ply { "c.ply" } else { "c.xyz" });
        let c = PointCloud::with_normals("c", points.clone(), normals[..points.len()].to_vec()).unwrap();
        write_cloud(&c, &path).unwrap();
        let back = read_cloud(&path).unwrap();
        prop_assert_eq!(back.len(), c.len());
        for (a, b) in back.positions().iter().zip(c.positions()) {
            prop_assert!((a - b).norm() <= 1e-8 * b.norm().max(1e-300) * 2.0);
        }
        for (a, b) in back.normals().unwrap().iter().zip(c.normals().unwrap()) {
            prop_assert!((a - b).norm() < 1e-8);
        }
    }

    #[test]
    fn sampled_triangles_are_valid_and_reproducible(points in cloud(20, 80), seed in any::<u64>()) {
        let thr = 0.2;
        if let Ok(set) = sample_vn_set(&points, 20, thr, seed, 20_000) {
            for s in &set.samples {
                let [i, j, k] = s.indices;
                prop_assert!(i != j && j != k && i != k);
                prop_assert!(triangle_is_valid(&points[i], &points[j], &points[k], thr));
            }
            prop_assert_eq!(set, sample_vn_set(&points, 20, thr, seed, 20_000).unwrap());
        }
    }

    #[test]
    fn vn_loss_is_scale_invariant(points in cloud(20, 40), offsets in cloud(40, 41), s in 0.1..10.0f64) {
        let Ok(set) = sample_vn_set(&points, 10, 0.1, 1, 100_000) else { return Ok(()) };
        let pred: Vec<Point3> = points.iter().zip(&offsets).map(|(p, o)| p + o * 0.05).collect();
        let scaled = |v: &[Point3]| v.iter().map(|p| p * s).collect::<Vec<_>>();
        let a = vn_loss(&DiffArray::from_points(&pred, false), &points, &set).unwrap().item();
        let b = vn_loss(&DiffArray::from_points(&scaled(&pred), false), &scaled(&points), &set).unwrap().item();
        prop_assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn emd_is_symmetric(pair in (2usize..30).prop_flat_map(|n| (cloud(n, n + 1), cloud(n, n + 1)))) {
        let (p, q) = pair;
        let a = emd_assignment(&p, &q).unwrap().total_cost;
        let b = emd_assignment(&q, &p).unwrap().total_cost;
        prop_assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn rn_loss_ignores_per_row_signs(pred in prop::collection::vec(unit(), 1..20), gt in prop::collection::vec(unit(), 20), flips in prop::collection::vec(any::<bool>(), 20)) {
        let gt = &gt[..pred.len()];
        let flipped: Vec<Point3> = pred.iter().zip(&flips).map(|(p, f)| if *f { -p } else { *p }).collect();
        let a = rn_loss(&DiffArray::from_points(&pred, false), gt).unwrap().item();
        let b = rn_loss(&DiffArray::from_points(&flipped, false), gt).unwrap().item();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn chamfer_is_symmetric(p in cloud(1, 60), q in cloud(1, 60)) {
        prop_assert_eq!(chamfer_distance(&p, &q).unwrap(), chamfer_distance(&q, &p).unwrap());
    }

    #[test]
    fn filter_commutes_with_rigid_motion(points in cloud(20, 40), normals in prop::collection::vec(unit(), 40), rot in rotation(), t in point(), literal in any::<bool>()) {
        let normals = &normals[..points.len()];
        let cfg = FilterConfig { mode: if literal { FilterMode::Scalar } else { FilterMode::Projector }, ..FilterConfig::default() };
        let g = build_knn_graph(&points, 6).unwrap();
        let out = filter_step(&points, normals, &g, &cfg).unwrap();
        let moved: Vec<Point3> = points.iter().map(|p| rot * p + t * 10.0).collect();
        let turned: Vec<Point3> = normals.iter().map(|n| rot * n).collect();
        let out2 = filter_step(&moved, &turned, &g, &cfg).unwrap();
        for (a, b) in out.iter().zip(&out2) {
            prop_assert!(((rot * a + t * 10.0) - b).norm() < 1e-9);
        }
    }

    #[test]
    fn filter_update_is_bounded(points in cloud(10, 40), normals in prop::collection::vec(unit(), 40), lambda in 0.0..2.0f64, literal in any::<bool>()) {
        let normals = &normals[..points.len()];
        let cfg = FilterConfig { lambda, mode: if literal { FilterMode::Scalar } else { FilterMode::Projector }, ..FilterConfig::default() };
        let g = build_knn_graph(&points, 5).unwrap();
        let out = filter_step(&points, normals, &g, &cfg).unwrap();
        for (i, (a, p)) in out.iter().zip(&points).enumerate() {
            let reach = g.neighbors(i).iter().map(|&j| (points[j] - p).norm()).fold(0.0, f64::max);
            prop_assert!((a - p).norm() <= (1.0 + lambda) / 3.0 * reach + 1e-12);
        }
    }

    #[test]
    fn bilateral_weight_symmetric_and_decreasing(a in unit(), b in unit(), c in unit(), sigma in 0.05..2.0f64) {
        prop_assert_eq!(bilateral_weight(&a, &b, sigma), bilateral_weight(&b, &a, sigma));
        let (dab, dac) = ((a - b).norm(), (a - c).norm());
        if dab < dac - 1e-9 {
            prop_assert!(bilateral_weight(&a, &b, sigma) >= bilateral_weight(&a, &c, sigma));
        }
    }
}

fn small_arch() -> Architecture {
    Architecture {
        sgcn_channels: vec![3, 8, 8],
        ngcn_channels: vec![6, 8, 8],
        edge_k: 4,
    }
}

fn randomize(params: &NetworkParams, seed: u64) {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    for (_, p) in params.named_params() {
        let v: Vec<f64> = (0..p.len()).map(|_| rng.random_range(-0.4..0.4)).collect();
        p.set_values(&v).unwrap();
    }
}

fn permuted_graph(graph: &KnnGraph, perm: &[usize]) -> KnnGraph {
    // new index of old point i is inv[i]; new row r holds old point perm[r]
    let mut inv = vec![0; perm.len()];
    for (r, &old) in perm.iter().enumerate() {
        inv[old] = r;
    }
    let flat = perm
        .iter()
        .flat_map(|&old| {
            graph
                .neighbors(old)
                .iter()
                .map(|&j| inv[j])
                .collect::<Vec<_>>()
        })
        .collect();
    KnnGraph::from_flat(graph.k(), flat).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn networks_are_permutation_equivariant(points in cloud(12, 30), normals in prop::collection::vec(unit(), 30), seed in any::<u64>(), shuffle_seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let n = points.len();
        let normals = &normals[..n];
        let params = NetworkParams::init(small_arch(), seed).unwrap();
        randomize(&params, seed);
        let graph = build_knn_graph(&points, 4).unwrap();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(shuffle_seed));
        let pg = permuted_graph(&graph, &perm);
        let pp: Vec<Point3> = perm.iter().map(|&i| points[i]).collect();
        let pn: Vec<Point3> = perm.iter().map(|&i| normals[i]).collect();

        let y = params.forward_sgcn(&DiffArray::from_points(&points, false), &graph).unwrap().to_points();
        let py = params.forward_sgcn(&DiffArray::from_points(&pp, false), &pg).unwrap().to_points();
        for (r, &old) in perm.iter().enumerate() {
            prop_assert_eq!(py[r], y[old]);
        }
        let feats = |p: &[Point3], q: &[Point3]| DiffArray::from_points(p, false).concat_cols(&DiffArray::from_points(q, false));
        let f = params.forward_ngcn(&feats(&points, normals), &graph).unwrap().to_points();
        let pf = params.forward_ngcn(&feats(&pp, &pn), &pg).unwrap().to_points();
        for (r, &old) in perm.iter().enumerate() {
            prop_assert_eq!(pf[r], f[old]);
        }
    }

    #[test]
    fn small_sgd_step_decreases_loss(seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let noisy: Vec<Point3> = (0..24).map(|_| Point3::new(rng.random(), rng.random(), 0.1 * rng.random::<f64>())).collect();
        let clean: Vec<Point3> = noisy.iter().map(|p| Point3::new(p.x, p.y, 0.0)).collect();
        let graph = build_knn_graph(&noisy, 4).unwrap();
        let set = sample_vn_set(&clean, 10, 0.05, seed, 100_000).unwrap();
        let mut params = NetworkParams::init(small_arch(), seed).unwrap();
        randomize(&params, seed ^ 1);
        let loss = |params: &NetworkParams| {
            let y = params.forward_sgcn(&DiffArray::from_points(&noisy, false), &graph).unwrap();
            let emd = geogcn::losses::emd_loss(&y, &clean).unwrap().0;
            let vn = vn_loss(&y, &clean, &set).unwrap();
            total_loss_diff(Some(&emd), Some(&vn), None, LossWeights::default())
        };
        let before_ckpt = params.to_checkpoint();
        let l0 = loss(&params);
        let before = l0.item();
        let mut lr = 1e-2;
        let mut decreased = false;
        for _ in 0..20 {
            params.zero_grad();
            loss(&params).backward().unwrap();
            sgd_step(&mut params, lr, 0.0).unwrap();
            if loss(&params).item() < before {
                decreased = true;
                break;
            }
            params = NetworkParams::from_checkpoint(&before_ckpt).unwrap();
            lr *= 0.5;
        }
        prop_assert!(decreased);
    }
}
