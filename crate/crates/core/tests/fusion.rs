mod common;

use common::fusion_oracle::{cfg, monolithic, scene, DIM};
use common::*;
use proptest::prelude::*;
use voxfuse::camera::Camera;
use voxfuse::fuse3d::{fuse, ViewBundle};
use voxfuse::geom::Vec3;
use voxfuse::grid::{morton_encode, SparseVoxelGrid};
use voxfuse::image::ImagePlane;

fn assert_matches(grid: &SparseVoxelGrid, want: &[(Vec<f64>, f64)]) {
    for ((_, rec), (f, w)) in grid.iter().zip(want) {
        assert!(rel_close(rec.weight_sum as f64, *w, 1e-5), "{} vs {w}", rec.weight_sum);
        for (a, b) in rec.feature.iter().zip(f) {
            assert!((*a as f64 - b).abs() <= 1e-5 * b.abs().max(1e-3), "{a} vs {b}");
        }
    }
}

#[test]
fn every_batch_size_matches_the_monolithic_oracle() {
    let (grid, views) = scene(21, 200, 6);
    let want = monolithic(&grid, &views, &cfg(1));
    assert!(
        want.iter().filter(|w| w.1 > 0.0).count() > 20,
        "fixture fuses too few voxels"
    );
    for batch in [1, 7, 200, 10_000] {
        let mut g = grid.clone();
        let stats = fuse(&mut g, &views, &cfg(batch)).unwrap();
        assert_eq!(stats.batches, 200usize.div_ceil(batch));
        assert_eq!(stats.peak_accumulator_bytes, (batch.min(200) * (DIM + 1)) * 8);
        assert_eq!(stats.fused + stats.unfused, 200);
        assert_matches(&g, &want);
    }
}

#[test]
fn batch_results_are_bit_identical() {
    let (grid, views) = scene(22, 150, 4);
    let mut a = grid.clone();
    let mut b = grid.clone();
    fuse(&mut a, &views, &cfg(1)).unwrap();
    fuse(&mut b, &views, &cfg(150)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn zero_confidence_view_equals_removing_it() {
    let (grid, mut views) = scene(23, 120, 4);
    // mesh depth far from rendered depth everywhere drives confidence to 0
    let far = ImagePlane::filled(views[2].camera.width, views[2].camera.height, &[1e6]);
    views[2].depth_mesh = far;
    let mut with = grid.clone();
    fuse(&mut with, &views, &cfg(64)).unwrap();
    views.remove(2);
    let mut without = grid.clone();
    fuse(&mut without, &views, &cfg(64)).unwrap();
    assert_eq!(with, without);
}

#[test]
fn fused_feature_norm_is_bounded_by_the_largest_sample() {
    let (mut grid, views) = scene(24, 200, 5);
    fuse(&mut grid, &views, &cfg(32)).unwrap();
    let bound = views
        .iter()
        .flat_map(|v| v.feature.values.chunks(DIM))
        .map(|f| f.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    for (_, r) in grid.iter() {
        let n = r.feature.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        assert!(n <= bound + 1e-6);
    }
}

#[test]
fn raising_one_views_confidence_moves_feature_toward_its_sample() {
    // one voxel on the optical axis of two views with constant features
    let mut g = SparseVoxelGrid::new(unit_bounds(), 0).unwrap();
    let key = morton_encode(8, 8, 8, 4).unwrap();
    g.insert(key, [1.0; 8], [0.5; 3]).unwrap();
    let c = g.voxel_center(&key);
    let mk = |eye: Vec3, f: [f32; 2], gap: f32| {
        let cam = camera_at(eye, 9, 9, 40.0);
        let pose = voxfuse::camera::Pose::look_at(eye, c, Vec3::z()).unwrap();
        let cam = Camera::new(cam.fx, cam.fy, 4.5, 4.5, 9, 9, pose).unwrap();
        let range = (c - eye).norm() as f32;
        ViewBundle::new(
            cam,
            ImagePlane::filled(9, 9, &f),
            ImagePlane::filled(9, 9, &[range]),
            ImagePlane::filled(9, 9, &[range + gap]),
        )
        .unwrap()
    };
    let fa = [1.0f32, 0.0];
    let fb = [0.0f32, 1.0];
    let mut last = -1.0;
    for gap in [10.0f32, 0.5, 0.2, 0.1, 0.05, 0.0] {
        let views = vec![
            mk(c + Vec3::new(2.0, 0.1, 0.3), fa, gap),
            mk(c - Vec3::new(2.0, 0.2, -0.4), fb, 0.0),
        ];
        let mut grid = g.clone();
        fuse(&mut grid, &views, &cfg(1)).unwrap();
        let f = &grid.record(&key).unwrap().feature;
        assert!((f[0] + f[1] - 1.0).abs() < 1e-6, "on the chord");
        assert!(f[0] as f64 >= last);
        last = f[0] as f64;
    }
    assert!((last - 0.5).abs() < 1e-6);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn batch_partition_never_changes_the_result(seed in any::<u64>(), batch in 1usize..90) {
        let (grid, views) = scene(seed, 80, 3);
        let mut a = grid.clone();
        let mut b = grid.clone();
        fuse(&mut a, &views, &cfg(batch)).unwrap();
        fuse(&mut b, &views, &cfg(80)).unwrap();
        prop_assert_eq!(a, b);
    }
}
