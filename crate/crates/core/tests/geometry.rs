mod common;

use common::{bone, dilate_oracle, random_pose, raster_oracle};
use finecontrol::pose_geometry::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn rasterization_matches_distance_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for lw in [1.0, 3.0, 4.5] {
        for _ in 0..20 {
            let pose = random_pose(&mut rng, 24, 40);
            let occ = rasterize_skeleton(&pose, 24, 40, lw).unwrap();
            let got: Vec<bool> = occ.data().iter().map(|&v| v != 0).collect();
            assert_eq!(got, raster_oracle(&pose, 24, 40, lw));
        }
    }
}

#[test]
fn dilation_matches_window_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for image_height in [16, 48, 64] {
        let pose = random_pose(&mut rng, image_height, 32);
        let occ = rasterize_skeleton(&pose, image_height, 32, 1.0).unwrap();
        let got: Vec<bool> = dilate(&occ, image_height)
            .data()
            .iter()
            .map(|&v| v != 0)
            .collect();
        assert_eq!(got, dilate_oracle(&occ, image_height));
    }
}

#[test]
fn kernel_side_follows_image_height() {
    assert_eq!(dilation_kernel_side(64), 9);
    assert_eq!(dilation_kernel_side(512), 65);
    assert_eq!(dilation_kernel_side(15), 1);
}

#[test]
fn pyramid_levels_match_pooling_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let poses: Vec<Pose2D> = (0..3).map(|_| random_pose(&mut rng, 32, 32)).collect();
    let refs: Vec<&Pose2D> = poses.iter().collect();
    let set = build_mask_set(&refs, 32, 32, 3.0, 0.1, MaskMode::Soft, &[(16, 16), (8, 8)]).unwrap();
    for level in set.pyramid() {
        let f = 32 / level.height();
        let mut pooled: Vec<Vec<f64>> = set
            .base()
            .masks()
            .iter()
            .map(|m| {
                (0..level.height() * level.width())
                    .map(|p| {
                        let (y, x) = (p / level.width(), p % level.width());
                        let mut s = 0.0;
                        for yy in y * f..(y + 1) * f {
                            for xx in x * f..(x + 1) * f {
                                s += m[yy * 32 + xx];
                            }
                        }
                        s / (f * f) as f64
                    })
                    .collect()
            })
            .collect();
        for p in 0..level.height() * level.width() {
            let total: f64 = pooled.iter().map(|m| m[p]).sum();
            for m in pooled.iter_mut() {
                m[p] /= total;
            }
        }
        for (got, want) in level.masks().iter().zip(&pooled) {
            for (g, w) in got.iter().zip(want) {
                assert!((g - w).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn low_temperature_soft_equals_hard_on_binary_occupancy() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let poses: Vec<Pose2D> = (0..4).map(|_| random_pose(&mut rng, 32, 32)).collect();
    let occs = dilated_occupancies(&poses.iter().collect::<Vec<_>>(), 32, 32, 3.0).unwrap();
    let soft = normalize_masks(&occs, 1e-3, MaskMode::Soft).unwrap();
    let hard = normalize_masks(&occs, 1e-3, MaskMode::Hard).unwrap();
    for (s, h) in soft.base().masks().iter().zip(hard.base().masks()) {
        for (a, b) in s.iter().zip(h) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn two_overlapping_bones_split_the_overlap() {
    let a = bone((4.0, 8.0), (20.0, 8.0));
    let b = bone((12.0, 2.0), (12.0, 14.0));
    let set = build_mask_set(&[&a, &b], 16, 24, 1.0, 1e-3, MaskMode::Hard, &[]).unwrap();
    let m = set.base();
    assert_eq!(m.mask(0)[8 * 24 + 12], 0.5);
    assert_eq!(m.mask(1)[8 * 24 + 12], 0.5);
    // Only the first bone reaches the far left of its row.
    assert_eq!(m.mask(0)[8 * 24 + 3], 1.0);
    assert_eq!(m.mask(1)[8 * 24 + 3], 0.0);
    // Far corner is uncovered.
    assert_eq!(m.mask(0)[15 * 24 + 23], 0.5);
}

fn pose_strategy(h: usize, w: usize) -> impl Strategy<Value = Pose2D> {
    prop::collection::vec(
        (
            0.0..w as f64 - 1.0,
            0.0..h as f64 - 1.0,
            prop::bool::weighted(0.8),
        ),
        17,
    )
    .prop_map(|pts| {
        let mut kps: Vec<Keypoint> = pts
            .iter()
            .map(|&(x, y, v)| {
                if v {
                    Keypoint::visible(x, y)
                } else {
                    Keypoint::hidden()
                }
            })
            .collect();
        // Guarantee one bone so the pose rasterizes.
        kps[5] = Keypoint::visible(pts[5].0, pts[5].1);
        kps[7] = Keypoint::visible(pts[7].0, pts[7].1);
        Pose2D::new(PoseFormat::Coco17, kps).unwrap()
    })
}

fn tau_strategy() -> impl Strategy<Value = f64> {
    prop_oneof![Just(1e-3), Just(0.1), Just(1.0)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn masks_partition_unity_at_every_level(
        poses in prop::collection::vec(pose_strategy(32, 32), 1..=8),
        tau in tau_strategy(),
        hard in any::<bool>(),
    ) {
        let refs: Vec<&Pose2D> = poses.iter().collect();
        let mode = if hard { MaskMode::Hard } else { MaskMode::Soft };
        let set = build_mask_set(&refs, 32, 32, 3.0, tau, mode, &[(16, 16), (8, 8)]).unwrap();
        for level in set.levels() {
            prop_assert!(level.partition_error() < 1e-9);
            prop_assert!(level.masks().iter().flatten().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn hard_masks_split_evenly_among_the_maximal(
        poses in prop::collection::vec(pose_strategy(24, 24), 1..=5),
    ) {
        let occs = dilated_occupancies(&poses.iter().collect::<Vec<_>>(), 24, 24, 3.0).unwrap();
        let set = normalize_masks(&occs, 1.0, MaskMode::Hard).unwrap();
        for p in 0..24 * 24 {
            let covering = occs.iter().filter(|o| o.data()[p] != 0).count();
            let share = if covering == 0 { 1.0 / occs.len() as f64 } else { 1.0 / covering as f64 };
            for (i, o) in occs.iter().enumerate() {
                let expected = if covering == 0 || o.data()[p] != 0 { share } else { 0.0 };
                prop_assert_eq!(set.base().mask(i)[p], expected);
            }
        }
    }

    #[test]
    fn masks_permute_with_instances(
        poses in prop::collection::vec(pose_strategy(32, 32), 2..=5),
        tau in tau_strategy(),
        rot in 1usize..5,
    ) {
        let n = poses.len();
        let perm: Vec<usize> = (0..n).map(|i| (i + rot) % n).collect();
        let permuted: Vec<&Pose2D> = perm.iter().map(|&i| &poses[i]).collect();
        let refs: Vec<&Pose2D> = poses.iter().collect();
        let a = build_mask_set(&refs, 32, 32, 3.0, tau, MaskMode::Soft, &[(16, 16)]).unwrap();
        let b = build_mask_set(&permuted, 32, 32, 3.0, tau, MaskMode::Soft, &[(16, 16)]).unwrap();
        for (la, lb) in a.levels().zip(b.levels()) {
            for (k, &i) in perm.iter().enumerate() {
                let diff = lb.mask(k).iter().zip(la.mask(i)).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
                // Summation order changes with the permutation.
                prop_assert!(diff < 1e-12, "instance {} differs by {}", i, diff);
            }
        }
    }

    #[test]
    fn dilation_is_extensive_and_monotone(
        a in pose_strategy(32, 32),
        b in pose_strategy(32, 32),
        image_height in prop_oneof![Just(16usize), Just(32), Just(64)],
    ) {
        let oa = rasterize_skeleton(&a, 32, 32, 1.0).unwrap();
        let ob = rasterize_skeleton(&b, 32, 32, 1.0).unwrap();
        let union = oa.union(&ob);
        let da = dilate(&oa, image_height);
        prop_assert!(da.contains(&oa));
        prop_assert!(dilate(&union, image_height).contains(&da));
        prop_assert_eq!(dilate(&union, image_height), da.union(&dilate(&ob, image_height)));
    }
}
