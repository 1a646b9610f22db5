mod common;

use common::{ap_oracle, row_scene};
use finecontrol::denoisers::{render_figures, Figure, Palette};
use finecontrol::metrics::*;
use finecontrol::pose_geometry::{Keypoint, Pose2D, PoseFormat, StandingFigure};

fn single_keypoint(x: f64, y: f64) -> Pose2D {
    let mut kps = vec![Keypoint::hidden(); 17];
    kps[0] = Keypoint::visible(x, y);
    Pose2D::new(PoseFormat::Coco17, kps)
        .unwrap()
        .with_out_of_frame(true)
}

#[test]
fn sigma_fixture() {
    let s = cio_sigma_from_scores(&[24.2, 23.0], 0).unwrap();
    assert!((s - 0.7685).abs() < 1e-4);
    // Direct logistic form of the two-way softmax.
    assert!((s - 1.0 / (1.0 + (-1.2f64).exp())).abs() < 1e-15);
}

#[test]
fn diff_fixture() {
    let d = cio_diff_from_scores(&[24.2, 23.0, 22.0], 0).unwrap();
    // 24.2 - 22.5 is one ulp-scale step away from the literal 1.7 in binary.
    assert!((d - 1.7).abs() < 1e-12);
    assert_eq!(cio_diff_from_scores(&[5.0], 0).unwrap(), 0.0);
}

#[test]
fn oks_single_keypoint_fixture() {
    let k = PoseFormat::Coco17.oks_constants();
    let area = 100.0;
    let d = (2.0 * area * k[0] * k[0]).sqrt();
    let gt = single_keypoint(10.0, 10.0);
    let det = single_keypoint(10.0 + d * 0.6, 10.0 + d * 0.8);
    assert!((oks(&gt, &det, area, &k).unwrap() - (-1.0f64).exp()).abs() < 1e-6);
    assert_eq!(oks(&gt, &gt, area, &k).unwrap(), 1.0);
    assert!(matches!(
        oks(&gt, &det, 0.0, &k),
        Err(MetricsError::NonpositiveArea(_))
    ));
}

#[test]
fn oks_ignores_keypoints_hidden_in_the_ground_truth() {
    let k = PoseFormat::Coco17.oks_constants();
    let gt = single_keypoint(5.0, 5.0);
    let mut kps = gt.keypoints().to_vec();
    kps[3] = Keypoint::visible(100.0, 100.0);
    let det = Pose2D::new(PoseFormat::Coco17, kps)
        .unwrap()
        .with_out_of_frame(true);
    assert_eq!(oks(&gt, &det, 50.0, &k).unwrap(), 1.0);
}

#[test]
fn hnd_fixtures() {
    for (gt, det, want) in [(2, 2, 0), (2, 0, 2), (0, 3, 3), (7, 4, 3), (1, 9, 8)] {
        assert_eq!(hnd(gt, det), want);
    }
}

fn figure(cx: f64) -> Pose2D {
    StandingFigure::new(cx, 10.0, 120.0).pose()
}

#[test]
fn keypoint_ap_matches_enumeration_oracle_on_small_fixtures() {
    let gts = [figure(40.0), figure(110.0), figure(180.0)];
    // Offsets chosen to land on both sides of several OKS thresholds.
    let offsets = [0.0, 2.5, 5.0, 9.0];
    let scores = [0.9, 0.6, 0.3];
    let mut checked = 0;
    for n_gt in 1..=3 {
        for n_det in 0..=3usize {
            let choices = (n_gt * offsets.len()).pow(n_det as u32);
            for code in 0..choices {
                let mut c = code;
                let dets: Vec<Detection> = (0..n_det)
                    .map(|j| {
                        let pick = c % (n_gt * offsets.len());
                        c /= n_gt * offsets.len();
                        let (src, off) = (pick / offsets.len(), offsets[pick % offsets.len()]);
                        Detection {
                            pose: gts[src].transformed(|x, y| (x + off, y - 0.5 * off)),
                            score: scores[j],
                        }
                    })
                    .collect();
                let gt = vec![gts[..n_gt].to_vec()];
                let got = keypoint_ap(&gt, &[dets.clone()]).unwrap().ap;
                let want = ap_oracle(&gt, &[dets]);
                assert!(
                    (got - want).abs() < 1e-9,
                    "gt={n_gt} det code={code}: {got} vs {want}"
                );
                checked += 1;
            }
        }
    }
    assert_eq!(
        checked,
        1 + 4 + 16 + 64 + 1 + 8 + 64 + 512 + 1 + 12 + 144 + 1728
    );
}

#[test]
fn ap_size_splits_follow_keypoint_area() {
    let small = StandingFigure::new(30.0, 5.0, 80.0).pose();
    let large = StandingFigure::new(200.0, 5.0, 250.0).pose();
    let a = (pose_area(&small), pose_area(&large));
    assert!(a.0 > MEDIUM_AREA.0 && a.0 <= MEDIUM_AREA.1, "{a:?}");
    assert!(a.1 > MEDIUM_AREA.1, "{a:?}");
    let gt = vec![vec![small.clone(), large.clone()]];
    let det = vec![vec![
        Detection {
            pose: small,
            score: 0.8,
        },
        Detection {
            pose: large,
            score: 0.7,
        },
    ]];
    let r = keypoint_ap(&gt, &det).unwrap();
    assert_eq!(r.ap, 100.0);
    assert_eq!(r.ap_m, Some(100.0));
    assert_eq!(r.ap_l, Some(100.0));
    let none = keypoint_ap(&gt, &[vec![]]).unwrap();
    assert_eq!((none.ap, none.ap_m), (0.0, Some(0.0)));
    let tiny_only = keypoint_ap(&[vec![single_keypoint(1.0, 1.0)]], &[vec![]]).unwrap();
    assert_eq!((tiny_only.ap_m, tiny_only.ap_l), (None, None));
    assert!(matches!(keypoint_ap(&[], &[]), Err(MetricsError::EmptyGt)));
    assert!(matches!(
        keypoint_ap(&gt, &[]),
        Err(MetricsError::SceneCountMismatch { .. })
    ));
}

#[test]
fn detector_recovers_clean_renders() {
    let scene = row_scene(&["red", "green", "blue"], 64, 96, 0.8, 1.0, 0);
    let figures: Vec<Figure> = scene
        .instances
        .iter()
        .map(|i| Figure {
            identity: i.identity.clone(),
            pose: i.pose.clone(),
        })
        .collect();
    let image = render_figures(&figures, &Palette::default(), 64, 96).unwrap();
    let dets = ToyPoseDetector::default().detect(&image);
    assert_eq!(hnd(3, dets.len()), 0);
    let gt: Vec<Pose2D> = scene.instances.iter().map(|i| i.pose.clone()).collect();
    let ap = keypoint_ap(&[gt], &[dets.clone()]).unwrap();
    assert!(ap.ap > 90.0, "{ap:?}");
    assert!(dets.iter().all(|d| d.score > 0.9));
    let blank = finecontrol::tensor::Tensor::zeros(3, 64, 96);
    assert!(ToyPoseDetector::default().detect(&blank).is_empty());
}

#[test]
fn clean_renders_score_their_own_prompt() {
    let scene = row_scene(&["red", "green"], 64, 64, 0.75, 1.0, 0);
    let figures: Vec<Figure> = scene
        .instances
        .iter()
        .map(|i| Figure {
            identity: i.identity.clone(),
            pose: i.pose.clone(),
        })
        .collect();
    let image = render_figures(&figures, &Palette::default(), 64, 64).unwrap();
    let poses: Vec<&Pose2D> = scene.instances.iter().map(|i| &i.pose).collect();
    let prompts: Vec<String> = (0..2).map(|i| scene.instance_prompt(i).unwrap()).collect();
    let scores =
        score_instances(&image, &poses, &prompts, &ToySimilarityOracle::default()).unwrap();
    for s in &scores {
        assert!((s.cio_sim - 100.0).abs() < 1e-9);
        assert!(s.cio_sigma > 1.0 - 1e-12);
        assert!((s.cio_diff - 100.0).abs() < 1e-9);
    }
    // A patch that mixes both colors evenly scores both prompts alike.
    let mixed = image.map(|_| 0.0);
    let patch = instance_patch(&mixed, poses[0], 0).unwrap();
    assert_eq!(ToySimilarityOracle::default().score(&patch, "red"), 0.0);
}

#[test]
fn patch_box_is_padded_and_clipped() {
    let image = finecontrol::tensor::Tensor::zeros(3, 64, 64);
    let pose = StandingFigure::new(32.0, 10.0, 40.0).pose();
    let (x0, y0, x1, y1) = pose.bbox().unwrap();
    let p = instance_patch(&image, &pose, 0).unwrap();
    let pad = (0.1 * (x1 - x0), 0.1 * (y1 - y0));
    assert_eq!(p.bbox.0, (x0 - pad.0).floor() as usize);
    assert_eq!(p.bbox.3, ((y1 + pad.1).floor() + 1.0) as usize);
    let edge = StandingFigure::new(2.0, 0.0, 60.0)
        .pose()
        .with_out_of_frame(true);
    let q = instance_patch(&image, &edge, 1).unwrap();
    assert_eq!((q.bbox.0, q.bbox.1), (0, 0));
    assert_eq!(q.crop.spatial(), (q.bbox.3 - q.bbox.1, q.bbox.2 - q.bbox.0));
}
