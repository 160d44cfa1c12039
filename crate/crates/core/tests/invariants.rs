use cyltpv::geometry::{cart_to_cyl, cyl_to_cart, cyl_to_voxel_index, CartPoint, GridSpec, PartitionConfig};
use cyltpv::heads::{argmax, refine, upsample_argmax, upsample_logits_dense};
use cyltpv::io::PointCloud;
use cyltpv::metrics::ConfusionMatrix;
use cyltpv::model::{Model, ModelConfig};
use cyltpv::projector::{group_range, point_voxels, voxelize_max};
use cyltpv::query::{axis_stencil, sample_plane};
use cyltpv::scene::{gen_synthetic_scene, inconsistent_points, SceneSpec};
use cyltpv::tensor::{Graph, Tensor};
use proptest::prelude::*;

fn cloud(points: &[(f32, f32, f32)]) -> PointCloud {
    let pos = points.iter().map(|&(x, y, z)| [x, y, z]).collect();
    PointCloud::new(pos, vec![0.0; points.len()], None).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cylindrical_round_trip(x in -80.0..80.0f64, y in -80.0..80.0f64, z in -10.0..10.0f64) {
        let p = CartPoint::new(x, y, z);
        let q = cyl_to_cart(cart_to_cyl(p));
        let scale = 1.0 + x.abs() + y.abs() + z.abs();
        prop_assert!((q.x - x).abs() < 1e-12 * scale);
        prop_assert!((q.y - y).abs() < 1e-12 * scale);
        prop_assert_eq!(q.z, z);
    }

    #[test]
    fn voxel_indices_stay_in_range(
        x in -60.0..60.0f64, y in -60.0..60.0f64, z in -8.0..8.0f64,
        h in 1usize..40, w in 1usize..40, d in 1usize..16,
    ) {
        let cfg = PartitionConfig::new((0.0, 50.0), (-5.0, 3.0), [h, w, d]).unwrap();
        let c = cart_to_cyl(CartPoint::new(x, y, z));
        match cyl_to_voxel_index(c, &cfg) {
            Some([i, j, k]) => {
                prop_assert!(i < h && j < w && k < d);
                prop_assert!(c.r < 50.0 && (-5.0..3.0).contains(&z));
            }
            None => prop_assert!(c.r >= 50.0 || !(-5.0..3.0).contains(&z)),
        }
    }

    #[test]
    fn group_ranges_tile_the_axis(len in 1usize..64, k in 1usize..8) {
        prop_assume!(k <= len);
        let mut next = 0;
        for g in 0..k {
            let r = group_range(g, len, k);
            prop_assert_eq!(r.start, next);
            prop_assert!(!r.is_empty());
            next = r.end;
        }
        prop_assert_eq!(next, len);
    }

    #[test]
    fn stencil_weights_are_a_partition_of_unity(u in -5.0..20.0f64, n in 1usize..16, circular: bool) {
        let (i0, i1, t) = axis_stencil(u, n, circular);
        prop_assert!(i0 < n && i1 < n);
        prop_assert!((0.0..=1.0).contains(&t));
        if circular {
            prop_assert_eq!(i1, (i0 + 1) % n);
        }
    }

    #[test]
    fn sampling_is_linear_in_the_plane(
        seed in any::<u64>(), alpha in -3.0..3.0f64,
        coords in prop::collection::vec((-2.0..8.0f64, -2.0..8.0f64), 1..20),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor::from_fn(&[2, 5, 6], |_| rng.random_range(-1.0..1.0));
        let b = Tensor::from_fn(&[2, 5, 6], |_| rng.random_range(-1.0..1.0));
        let mix = Tensor::from_fn(&[2, 5, 6], |i| a.data()[i] + alpha * b.data()[i]);
        let coords: Vec<[f64; 2]> = coords.iter().map(|&(u, v)| [u, v]).collect();
        let g = Graph::inference();
        let s = |t: &Tensor| g.value(sample_plane(&g, g.constant(t.clone()), &coords, Some(1)).unwrap());
        let (sa, sb, sm) = (s(&a), s(&b), s(&mix));
        for i in 0..sm.data().len() {
            prop_assert!((sm.data()[i] - sa.data()[i] - alpha * sb.data()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn voxel_mask_counts_distinct_voxels(points in prop::collection::vec((-12.0..12.0f32, -12.0..12.0f32, -3.0..2.0f32), 0..200)) {
        let cfg = PartitionConfig::new((0.0, 10.0), (-2.0, 1.0), [5, 8, 3]).unwrap();
        let pc = cloud(&points);
        let mut seen: Vec<usize> = point_voxels(&pc, &cfg).into_iter().flatten().collect();
        seen.sort_unstable();
        seen.dedup();
        let g = Graph::inference();
        let vg = voxelize_max(&g, g.constant(Tensor::zeros(&[pc.len(), 2])), &pc, &cfg).unwrap();
        prop_assert_eq!(vg.mask.iter().filter(|&&m| m).count(), seen.len());
    }

    #[test]
    fn upsampled_argmax_matches_dense(seed in any::<u64>(), f in 1usize..4, x in 1usize..4, y in 1usize..4, z in 1usize..4) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let k = 3;
        let logits = Tensor::from_fn(&[x * y * z, k], |_| rng.random_range(-1.0..1.0));
        let dense = upsample_logits_dense(&logits, [x, y, z], f).unwrap();
        let labels = upsample_argmax(&logits, [x, y, z], f, usize::MAX).unwrap();
        for (i, l) in labels.iter().enumerate() {
            prop_assert_eq!(*l as usize, argmax(&dense.data()[i * k..(i + 1) * k]));
        }
    }

    #[test]
    fn miou_ignores_class_names(counts in prop::collection::vec(0u64..50, 9), perm in Just([2usize, 0, 1])) {
        let a = ConfusionMatrix::from_counts(3, counts.clone()).unwrap().miou().miou;
        let mut relabeled = vec![0; 9];
        for gt in 0..3 {
            for pr in 0..3 {
                relabeled[perm[gt] * 3 + perm[pr]] = counts[gt * 3 + pr];
            }
        }
        let b = ConfusionMatrix::from_counts(3, relabeled).unwrap().miou().miou;
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn refine_then_coarsen_is_identity(d in prop::array::uniform3(1usize..20), f in 1usize..5, vs in 0.1..2.0f64) {
        let spec = GridSpec { dims: d, origin: [-1.0, 2.0, -3.0], voxel_size: vs };
        let back = refine(&spec, f).unwrap().coarsen(f).unwrap();
        prop_assert_eq!(back.dims, spec.dims);
        prop_assert!((back.voxel_size - vs).abs() < 1e-12);
    }
}

fn small_scene(seed: u64) -> SceneSpec {
    let grid = GridSpec {
        dims: [32, 32, 6],
        origin: [-12.8, -12.8, -2.4],
        voxel_size: 0.8,
    };
    let mut spec = SceneSpec::urban(seed, grid);
    spec.sensor.rays_per_ring = 180;
    spec
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn scenes_are_self_consistent(seed in any::<u64>()) {
        let (pc, occ) = gen_synthetic_scene(&small_scene(seed)).unwrap();
        prop_assert!(!pc.is_empty());
        prop_assert!(inconsistent_points(&pc, &occ).is_empty());
    }
}

#[test]
fn predictions_follow_point_order() {
    let (pc, _) = gen_synthetic_scene(&small_scene(4)).unwrap();
    let model = Model::new(&ModelConfig::toy(6), 9).unwrap();
    let base = model.predict_points(&pc).unwrap();
    let n = pc.len();
    let perm: Vec<usize> = (0..n).map(|i| (i * 7919 + 13) % n).collect();
    let mut check = perm.clone();
    check.sort_unstable();
    assert_eq!(check, (0..n).collect::<Vec<_>>(), "not a permutation");
    let permuted = model.predict_points(&pc.permuted(&perm)).unwrap();
    for (i, &p) in perm.iter().enumerate() {
        assert_eq!(permuted[i], base[p]);
    }
}

#[test]
fn scene_density_falls_with_range() {
    let (pc, _) = gen_synthetic_scene(&small_scene(2)).unwrap();
    let r: Vec<f64> = (0..pc.len()).map(|i| cart_to_cyl(pc.point(i)).r).collect();
    // points per unit area in the inner and outer annulus
    let density = |lo: f64, hi: f64| {
        r.iter().filter(|&&x| x >= lo && x < hi).count() as f64 / (std::f64::consts::PI * (hi * hi - lo * lo))
    };
    assert!(density(2.0, 5.0) > density(6.0, 9.0));
}
