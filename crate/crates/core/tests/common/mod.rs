#![allow(dead_code)]

use finecontrol::denoisers::RENDER_LINE_WIDTH;
use finecontrol::metrics::{oks, pose_area, Detection, OKS_THRESHOLDS};
use finecontrol::pose_geometry::{
    dilation_kernel_side, Keypoint, MaskLevel, OccupancyMap, Pose2D, PoseFormat, RowLayout,
};
use finecontrol::prompting::{Canvas, InstanceSpec, SceneSpec};
use finecontrol::tensor::Tensor;
use rand::Rng;

/// COCO17 pose with every keypoint visible and uniform inside the canvas.
pub fn random_pose<R: Rng>(rng: &mut R, h: usize, w: usize) -> Pose2D {
    let kps = (0..17)
        .map(|_| {
            Keypoint::visible(
                rng.gen_range(0.0..w as f64 - 1.0),
                rng.gen_range(0.0..h as f64 - 1.0),
            )
        })
        .collect();
    Pose2D::new(PoseFormat::Coco17, kps).unwrap()
}

/// Pose with a single bone from `a` to `b`.
pub fn bone(a: (f64, f64), b: (f64, f64)) -> Pose2D {
    let mut kps = vec![Keypoint::hidden(); 17];
    kps[5] = Keypoint::visible(a.0, a.1);
    kps[7] = Keypoint::visible(b.0, b.1);
    Pose2D::new(PoseFormat::Coco17, kps).unwrap()
}

/// Figures in a row, with the given identities from left to right.
pub fn row_scene(
    ids: &[&str],
    h: usize,
    w: usize,
    scale: f64,
    distance: f64,
    seed: u64,
) -> SceneSpec {
    let layout = RowLayout::new(ids.len(), h, Some(w), scale, distance, RENDER_LINE_WIDTH);
    let instances = layout
        .poses()
        .into_iter()
        .zip(ids)
        .map(|(pose, id)| InstanceSpec {
            identity: id.to_string(),
            pose,
        })
        .collect();
    let mut scene = SceneSpec::new(Canvas { h, w }, "on a beach", instances);
    scene.seed = seed;
    scene
}

use finecontrol::denoisers::{TinyConfig, TinyParams};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Initial parameters with the zero-initialized head and biases filled in,
/// so every parameter carries gradient.
pub fn dense_params(seed: u64, scale: f64) -> TinyParams {
    let mut p = TinyParams::init(TinyConfig::default(), seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for (_, param) in p.named_mut() {
        if param.data.iter().all(|v| *v == 0.0) {
            for v in param.data.iter_mut() {
                *v = scale
                    * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
            }
        }
    }
    p
}

pub fn seg_dist(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    // Closest point by dense sampling is too coarse; use the projection directly.
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let len = vx * vx + vy * vy;
    let t = if len == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * vx + (p.1 - a.1) * vy) / len).clamp(0.0, 1.0)
    };
    ((p.0 - a.0 - t * vx).powi(2) + (p.1 - a.1 - t * vy).powi(2)).sqrt()
}

pub fn raster_oracle(pose: &Pose2D, h: usize, w: usize, lw: f64) -> Vec<bool> {
    let kps = pose.keypoints();
    let bones: Vec<_> = pose
        .format()
        .edges()
        .iter()
        .filter(|(i, j)| kps[*i].is_visible() && kps[*j].is_visible())
        .map(|(i, j)| ((kps[*i].x, kps[*i].y), (kps[*j].x, kps[*j].y)))
        .collect();
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = bones
                .iter()
                .any(|(a, b)| seg_dist((x as f64, y as f64), *a, *b) <= lw / 2.0 + 1e-9);
        }
    }
    out
}

pub fn dilate_oracle(occ: &OccupancyMap, image_height: usize) -> Vec<bool> {
    let (h, w) = occ.shape();
    let r = (dilation_kernel_side(image_height) / 2) as isize;
    let mut out = vec![false; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            'search: for dy in -r..=r {
                for dx in -r..=r {
                    let (yy, xx) = (y + dy, x + dx);
                    if yy >= 0
                        && xx >= 0
                        && yy < h as isize
                        && xx < w as isize
                        && occ.get(yy as usize, xx as usize)
                    {
                        out[(y * w as isize + x) as usize] = true;
                        break 'search;
                    }
                }
            }
        }
    }
    out
}

/// Greedy matching and 101-point AP written out over every ranking prefix.
pub fn ap_oracle(gt: &[Vec<Pose2D>], det: &[Vec<Detection>]) -> f64 {
    let n_gt: usize = gt.iter().map(Vec::len).sum();
    let mut per_threshold = Vec::new();
    for &thr in &OKS_THRESHOLDS {
        let mut hits: Vec<(f64, bool)> = Vec::new();
        for (g, d) in gt.iter().zip(det) {
            let mut ds: Vec<&Detection> = d.iter().collect();
            ds.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
            let mut used = vec![false; g.len()];
            for det in ds {
                let mut best: Option<(usize, f64)> = None;
                for (gi, gp) in g.iter().enumerate() {
                    let o = oks(
                        gp,
                        &det.pose,
                        pose_area(gp),
                        &PoseFormat::Coco17.oks_constants(),
                    )
                    .unwrap();
                    if !used[gi] && o >= thr && best.map_or(true, |(_, bo)| o > bo) {
                        best = Some((gi, o));
                    }
                }
                if let Some((gi, _)) = best {
                    used[gi] = true;
                }
                hits.push((det.score, best.is_some()));
            }
        }
        hits.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        let prefixes: Vec<(f64, f64)> = (1..=hits.len())
            .map(|k| {
                let tp = hits[..k].iter().filter(|h| h.1).count() as f64;
                (tp / n_gt as f64, tp / k as f64)
            })
            .collect();
        let mut sum = 0.0;
        for r in 0..=100 {
            let r = r as f64 / 100.0;
            sum += prefixes
                .iter()
                .filter(|(rec, _)| *rec >= r - 1e-12)
                .map(|(_, p)| *p)
                .fold(0.0, f64::max);
        }
        per_threshold.push(sum / 101.0);
    }
    100.0 * per_threshold.iter().sum::<f64>() / per_threshold.len() as f64
}

pub fn blend_oracle(masks: &MaskLevel, targets: &[Tensor]) -> Tensor {
    let (c, h, w) = targets[0].shape();
    let mut out = Tensor::zeros(c, h, w);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let v: f64 = (0..targets.len())
                    .map(|i| masks.mask(i)[y * w + x] * targets[i].get(ch, y, x))
                    .sum();
                out.set(ch, y, x, v);
            }
        }
    }
    out
}

/// Per-instance SOFT weights computed pixel by pixel from the distance and
/// window oracles, using the closed form for binary occupancy.
pub fn soft_mask_oracle(poses: &[&Pose2D], h: usize, w: usize, lw: f64, tau: f64) -> Vec<Vec<f64>> {
    let occ: Vec<Vec<bool>> = poses
        .iter()
        .map(|p| {
            let mut o = OccupancyMap::empty(h, w);
            for (i, v) in raster_oracle(p, h, w, lw).into_iter().enumerate() {
                if v {
                    o.set(i / w, i % w);
                }
            }
            dilate_oracle(&o, h)
        })
        .collect();
    let off = (-1.0 / tau).exp();
    let mut out = vec![vec![0.0; h * w]; poses.len()];
    for p in 0..h * w {
        let k = occ.iter().filter(|o| o[p]).count();
        let n = poses.len();
        let z = if k == 0 {
            n as f64
        } else {
            k as f64 + (n - k) as f64 * off
        };
        for (m, o) in out.iter_mut().zip(&occ) {
            m[p] = if k == 0 || o[p] { 1.0 } else { off } / z;
        }
    }
    out
}
