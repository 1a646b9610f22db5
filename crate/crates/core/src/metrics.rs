//! Identity observance, human-number difference and keypoint AP.
//!
//! Similarities are on a logit scale (cosine × 100). Instance patches are
//! the keypoint box of the *input* pose padded by 10% per side and clipped
//! to the canvas.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::denoisers::render::stroke;
use crate::denoisers::{Palette, RENDER_LINE_WIDTH};
use crate::pose_geometry::{OccupancyMap, Pose2D, PoseFormat, StandingFigure};
use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("{patches} patches for {prompts} prompts")]
    LengthMismatch { patches: usize, prompts: usize },
    #[error("true prompt index {index} is outside the {len} candidates")]
    MissingTruePrompt { index: usize, len: usize },
    #[error("ground truth has no visible keypoints")]
    NoVisibleKeypoints,
    #[error("pose formats differ: {0:?} vs {1:?}")]
    FormatMismatch(PoseFormat, PoseFormat),
    #[error("object area must be positive, got {0}")]
    NonpositiveArea(f64),
    #[error("no ground-truth instances")]
    EmptyGt,
    #[error("{gt} ground-truth scenes but {det} detection scenes")]
    SceneCountMismatch { gt: usize, det: usize },
    #[error("pose has no visible keypoints")]
    EmptyPose,
}

/// A crop of the generated image around one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct InstancePatch {
    pub crop: Tensor,
    /// `(x0, y0, x1, y1)`, half-open pixel bounds in the full image.
    pub bbox: (usize, usize, usize, usize),
    pub instance: usize,
    /// Stroke pixels of the instance's input pose inside the crop.
    pub skeleton: OccupancyMap,
}

/// Padded keypoint box of `pose`, clipped to the image, and the matching crop.
pub fn instance_patch(
    image: &Tensor,
    pose: &Pose2D,
    instance: usize,
) -> Result<InstancePatch, MetricsError> {
    let (h, w) = image.spatial();
    let (x0, y0, x1, y1) = pose.bbox().ok_or(MetricsError::EmptyPose)?;
    let (px, py) = (0.1 * (x1 - x0), 0.1 * (y1 - y0));
    let clip = |v: f64, hi: usize| v.clamp(0.0, hi as f64);
    let bx0 = clip((x0 - px).floor(), w) as usize;
    let by0 = clip((y0 - py).floor(), h) as usize;
    let bx1 = clip((x1 + px).floor() + 1.0, w) as usize;
    let by1 = clip((y1 + py).floor() + 1.0, h) as usize;
    let (cw, ch) = (bx1 - bx0, by1 - by0);
    let mut crop = Tensor::zeros(image.channels(), ch, cw);
    for c in 0..image.channels() {
        for y in 0..ch {
            for x in 0..cw {
                crop.set(c, y, x, image.get(c, by0 + y, bx0 + x));
            }
        }
    }
    let full = stroke(pose, h, w).map_err(|_| MetricsError::EmptyPose)?;
    let mut skeleton = OccupancyMap::empty(ch, cw);
    for y in 0..ch {
        for x in 0..cw {
            if full.get(by0 + y, bx0 + x) {
                skeleton.set(y, x);
            }
        }
    }
    Ok(InstancePatch {
        crop,
        bbox: (bx0, by0, bx1, by1),
        instance,
        skeleton,
    })
}

/// Joint image-text similarity on a logit scale.
pub trait SimilarityOracle: Send + Sync {
    fn score(&self, patch: &InstancePatch, text: &str) -> f64;
}

/// Mean color over the patch's skeleton pixels against the prompt's palette color.
#[derive(Debug, Clone, Default)]
pub struct ToySimilarityOracle {
    pub palette: Palette,
}

impl ToySimilarityOracle {
    pub fn patch_color(patch: &InstancePatch) -> [f64; 3] {
        let mut sum = [0.0; 3];
        let mut count = 0usize;
        let n = patch.crop.plane_len();
        for p in 0..n {
            if patch.skeleton.data()[p] != 0 {
                count += 1;
                for (c, s) in sum.iter_mut().enumerate() {
                    *s += patch.crop.plane(c)[p];
                }
            }
        }
        if count > 0 {
            for s in &mut sum {
                *s /= count as f64;
            }
        }
        sum
    }
}

impl SimilarityOracle for ToySimilarityOracle {
    fn score(&self, patch: &InstancePatch, text: &str) -> f64 {
        let Ok(color) = self.palette.color_of(text) else {
            return 0.0;
        };
        let mean = Self::patch_color(patch);
        let dot: f64 = mean.iter().zip(&color).map(|(a, b)| a * b).sum();
        let na = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb = color.iter().map(|v| v * v).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            0.0
        } else {
            100.0 * dot / (na * nb)
        }
    }
}

/// Mean oracle score of each patch against its own prompt.
pub fn cio_sim(
    patches: &[InstancePatch],
    prompts: &[String],
    oracle: &dyn SimilarityOracle,
) -> Result<f64, MetricsError> {
    if patches.len() != prompts.len() || patches.is_empty() {
        return Err(MetricsError::LengthMismatch {
            patches: patches.len(),
            prompts: prompts.len(),
        });
    }
    Ok(patches
        .iter()
        .zip(prompts)
        .map(|(p, t)| oracle.score(p, t))
        .sum::<f64>()
        / patches.len() as f64)
}

fn check_true(scores: &[f64], truth: usize) -> Result<(), MetricsError> {
    if truth >= scores.len() {
        return Err(MetricsError::MissingTruePrompt {
            index: truth,
            len: scores.len(),
        });
    }
    Ok(())
}

/// Softmax weight of the true prompt among all candidate scores.
pub fn cio_sigma_from_scores(scores: &[f64], truth: usize) -> Result<f64, MetricsError> {
    check_true(scores, truth)?;
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = scores.iter().map(|s| (s - max).exp()).sum();
    Ok((scores[truth] - max).exp() / total)
}

/// True-prompt score minus the mean of the other scores.
pub fn cio_diff_from_scores(scores: &[f64], truth: usize) -> Result<f64, MetricsError> {
    check_true(scores, truth)?;
    if scores.len() < 2 {
        return Ok(0.0);
    }
    let others: f64 = scores
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != truth)
        .map(|(_, s)| s)
        .sum();
    Ok(scores[truth] - others / (scores.len() - 1) as f64)
}

pub fn cio_sigma(
    patch: &InstancePatch,
    prompts: &[String],
    truth: usize,
    oracle: &dyn SimilarityOracle,
) -> Result<f64, MetricsError> {
    let scores: Vec<f64> = prompts.iter().map(|p| oracle.score(patch, p)).collect();
    cio_sigma_from_scores(&scores, truth)
}

pub fn cio_diff(
    patch: &InstancePatch,
    prompts: &[String],
    truth: usize,
    oracle: &dyn SimilarityOracle,
) -> Result<f64, MetricsError> {
    let scores: Vec<f64> = prompts.iter().map(|p| oracle.score(patch, p)).collect();
    cio_diff_from_scores(&scores, truth)
}

/// Human-number difference `|gt − detected|`.
pub fn hnd(gt_count: usize, detected_count: usize) -> usize {
    gt_count.abs_diff(detected_count)
}

/// COCO object keypoint similarity over the ground truth's visible keypoints.
///
/// `k` holds per-keypoint constants (twice the COCO sigmas).
pub fn oks(gt: &Pose2D, det: &Pose2D, area: f64, k: &[f64]) -> Result<f64, MetricsError> {
    if gt.format() != det.format() {
        return Err(MetricsError::FormatMismatch(gt.format(), det.format()));
    }
    if !(area > 0.0) {
        return Err(MetricsError::NonpositiveArea(area));
    }
    let mut total = 0.0;
    let mut visible = 0usize;
    for ((g, d), ki) in gt.keypoints().iter().zip(det.keypoints()).zip(k) {
        if !g.is_visible() {
            continue;
        }
        visible += 1;
        let d2 = (g.x - d.x).powi(2) + (g.y - d.y).powi(2);
        total += (-d2 / (2.0 * area * ki * ki)).exp();
    }
    if visible == 0 {
        return Err(MetricsError::NoVisibleKeypoints);
    }
    Ok(total / visible as f64)
}

/// Area used for OKS and the size splits: the keypoint box area.
pub fn pose_area(pose: &Pose2D) -> f64 {
    pose.bbox()
        .map_or(0.0, |(x0, y0, x1, y1)| ((x1 - x0) * (y1 - y0)).max(1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub pose: Pose2D,
    pub score: f64,
}

/// `(ap, ap_m, ap_l)` in percent; size splits are `None` without ground truth in range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApResult {
    pub ap: f64,
    pub ap_m: Option<f64>,
    pub ap_l: Option<f64>,
}

pub const OKS_THRESHOLDS: [f64; 10] = [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95];
pub const MEDIUM_AREA: (f64, f64) = (32.0 * 32.0, 96.0 * 96.0);

/// Average precision over [`OKS_THRESHOLDS`] with 101-point interpolation.
///
/// Detections are greedily matched per scene in descending score order; each
/// takes the unmatched ground truth with the highest OKS above threshold.
/// Ground truth outside the area range is ignored, as are detections matched
/// to it and unmatched detections whose own area falls outside the range.
pub fn keypoint_ap(gt: &[Vec<Pose2D>], det: &[Vec<Detection>]) -> Result<ApResult, MetricsError> {
    if gt.len() != det.len() {
        return Err(MetricsError::SceneCountMismatch {
            gt: gt.len(),
            det: det.len(),
        });
    }
    if gt.iter().all(Vec::is_empty) {
        return Err(MetricsError::EmptyGt);
    }
    let all = ap_in_range(gt, det, (0.0, f64::INFINITY))?.unwrap_or(0.0);
    Ok(ApResult {
        ap: all,
        ap_m: ap_in_range(gt, det, MEDIUM_AREA)?,
        ap_l: ap_in_range(gt, det, (MEDIUM_AREA.1, f64::INFINITY))?,
    })
}

fn ap_in_range(
    gt: &[Vec<Pose2D>],
    det: &[Vec<Detection>],
    range: (f64, f64),
) -> Result<Option<f64>, MetricsError> {
    let in_range = |a: f64| a > range.0 && a <= range.1;
    let n_gt: usize = gt
        .iter()
        .flatten()
        .filter(|g| in_range(pose_area(g)))
        .count();
    if n_gt == 0 {
        return Ok(None);
    }
    // OKS tables per scene, detections in descending score order.
    let mut scenes = Vec::with_capacity(gt.len());
    for (g, d) in gt.iter().zip(det) {
        let mut order: Vec<usize> = (0..d.len()).collect();
        order.sort_by(|&a, &b| d[b].score.total_cmp(&d[a].score));
        let mut table = vec![vec![0.0; g.len()]; d.len()];
        for (row, &di) in table.iter_mut().zip(&order) {
            for (gi, gp) in g.iter().enumerate() {
                let k = gp.format().oks_constants();
                row[gi] = oks(gp, &d[di].pose, pose_area(gp), &k)?;
            }
        }
        let gt_ignored: Vec<bool> = g.iter().map(|p| !in_range(pose_area(p))).collect();
        let det_out: Vec<bool> = order
            .iter()
            .map(|&di| !in_range(pose_area(&d[di].pose)))
            .collect();
        let scores: Vec<f64> = order.iter().map(|&di| d[di].score).collect();
        scenes.push((table, gt_ignored, det_out, scores));
    }
    let mut total = 0.0;
    for &thr in &OKS_THRESHOLDS {
        // (score, is_tp) for every non-ignored detection.
        let mut flat: Vec<(f64, bool)> = Vec::new();
        for (table, gt_ignored, det_out, scores) in &scenes {
            let mut taken = vec![false; gt_ignored.len()];
            for (di, row) in table.iter().enumerate() {
                let mut best: Option<usize> = None;
                let mut best_oks = thr;
                // Non-ignored ground truth first, then ignored.
                for pass_ignored in [false, true] {
                    if best.is_some() && pass_ignored {
                        break;
                    }
                    for (gi, &o) in row.iter().enumerate() {
                        if gt_ignored[gi] != pass_ignored || taken[gi] {
                            continue;
                        }
                        if o >= best_oks && best.map_or(true, |b| o > row[b]) {
                            best = Some(gi);
                            best_oks = o;
                        }
                    }
                }
                match best {
                    Some(gi) => {
                        taken[gi] = true;
                        if !gt_ignored[gi] {
                            flat.push((scores[di], true));
                        }
                    }
                    None if !det_out[di] => flat.push((scores[di], false)),
                    None => {}
                }
            }
        }
        flat.sort_by(|a, b| b.0.total_cmp(&a.0));
        total += interpolated_ap(&flat, n_gt);
    }
    Ok(Some(100.0 * total / OKS_THRESHOLDS.len() as f64))
}

/// 101-point interpolated AP of a ranked list of hits.
fn interpolated_ap(ranked: &[(f64, bool)], n_gt: usize) -> f64 {
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(ranked.len());
    let mut precision = Vec::with_capacity(ranked.len());
    for (i, &(_, hit)) in ranked.iter().enumerate() {
        if hit {
            tp += 1;
        }
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut sum = 0.0;
    for r in 0..=100 {
        let target = r as f64 / 100.0;
        let idx = recall.partition_point(|&x| x < target);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    sum / 101.0
}

/// Finds colored stick figures by palette-labelled connected components.
#[derive(Debug, Clone)]
pub struct ToyPoseDetector {
    pub palette: Palette,
    /// Minimum color magnitude for a pixel to count as foreground.
    pub min_intensity: f64,
    /// Minimum cosine to the nearest palette color.
    pub min_cosine: f64,
    pub min_pixels: usize,
    /// Radius of the box filter applied before labelling; 0 disables it.
    pub blur_radius: usize,
}

impl Default for ToyPoseDetector {
    fn default() -> Self {
        Self {
            palette: Palette::default(),
            min_intensity: 0.4,
            min_cosine: 0.8,
            min_pixels: 20,
            blur_radius: 1,
        }
    }
}

impl ToyPoseDetector {
    fn unit_colors(&self) -> Vec<[f64; 3]> {
        self.palette
            .entries()
            .iter()
            .map(|(_, c)| {
                let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
                [c[0] / norm, c[1] / norm, c[2] / norm]
            })
            .collect()
    }

    /// Nearest palette index of a color, if its cosine clears `min_cosine`.
    pub fn classify(&self, color: [f64; 3]) -> Option<usize> {
        let norm = color.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return None;
        }
        let (best, cos) = self
            .unit_colors()
            .iter()
            .enumerate()
            .map(|(i, c)| {
                (
                    i,
                    (color[0] * c[0] + color[1] * c[1] + color[2] * c[2]) / norm,
                )
            })
            .max_by(|a, b| a.1.total_cmp(&b.1))?;
        (cos >= self.min_cosine).then_some(best)
    }

    /// Foreground mask of the smoothed image.
    pub fn foreground(&self, image: &Tensor) -> Vec<bool> {
        let smoothed = box_blur(image, self.blur_radius);
        (0..image.plane_len())
            .map(|p| {
                let sq: f64 = (0..3).map(|c| smoothed.plane(c)[p].powi(2)).sum();
                sq.sqrt() >= self.min_intensity
            })
            .collect()
    }

    /// Components of 8-connected foreground whose mean color matches a
    /// palette entry, each fitted with the standing template.
    pub fn detect(&self, image: &Tensor) -> Vec<Detection> {
        let (h, w) = image.spatial();
        let fg = self.foreground(image);
        let mut seen = vec![false; h * w];
        let mut out = Vec::new();
        for start in 0..h * w {
            if !fg[start] || seen[start] {
                continue;
            }
            let mut comp = Vec::new();
            let mut stack = vec![start];
            seen[start] = true;
            while let Some(p) = stack.pop() {
                comp.push(p);
                let (y, x) = ((p / w) as isize, (p % w) as isize);
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let (ny, nx) = (y + dy, x + dx);
                        if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                            continue;
                        }
                        let q = ny as usize * w + nx as usize;
                        if !seen[q] && fg[q] {
                            seen[q] = true;
                            stack.push(q);
                        }
                    }
                }
            }
            if comp.len() < self.min_pixels {
                continue;
            }
            let mut mean = [0.0; 3];
            for &p in &comp {
                for (c, m) in mean.iter_mut().enumerate() {
                    *m += image.plane(c)[p];
                }
            }
            if self.classify(mean).is_none() {
                continue;
            }
            if let Some(d) = fit_component(&comp, h, w) {
                out.push(d);
            }
        }
        out
    }
}

fn box_blur(image: &Tensor, radius: usize) -> Tensor {
    if radius == 0 {
        return image.clone();
    }
    let (c, h, w) = image.shape();
    let r = radius as isize;
    let mut out = Tensor::zeros(c, h, w);
    for ch in 0..c {
        let src = image.plane(ch);
        let dst = out.plane_mut(ch);
        for y in 0..h as isize {
            for x in 0..w as isize {
                let (mut acc, mut n) = (0.0, 0.0);
                for yy in (y - r).max(0)..=(y + r).min(h as isize - 1) {
                    for xx in (x - r).max(0)..=(x + r).min(w as isize - 1) {
                        acc += src[yy as usize * w + xx as usize];
                        n += 1.0;
                    }
                }
                dst[y as usize * w + x as usize] = acc / n;
            }
        }
    }
    out
}

/// Fits the standing template to a component's box and snaps keypoints onto it.
fn fit_component(comp: &[usize], h: usize, w: usize) -> Option<Detection> {
    let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0, 0);
    for &p in comp {
        let (y, x) = (p / w, p % w);
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    // Stroke extent spans from the eyes (0.05·fh) to the ankles (fh), plus the line width.
    let lw = RENDER_LINE_WIDTH;
    let fh = ((y1 - y0) as f64 + 1.0 - lw) / 0.95;
    if fh < 4.0 {
        return None;
    }
    let top = y0 as f64 + lw / 2.0 - 0.05 * fh;
    let cx = (x0 + x1) as f64 / 2.0;
    let template = StandingFigure::new(cx, top, fh).pose();
    let pts: Vec<(f64, f64)> = comp
        .iter()
        .map(|&p| ((p % w) as f64, (p / w) as f64))
        .collect();
    let snapped = template.transformed(|x, y| {
        pts.iter()
            .copied()
            .min_by(|a, b| {
                let da = (a.0 - x).powi(2) + (a.1 - y).powi(2);
                let db = (b.0 - x).powi(2) + (b.1 - y).powi(2);
                da.total_cmp(&db)
            })
            .unwrap_or((x, y))
    });
    // Confidence: share of template stroke pixels present in the component.
    let expected = stroke(&template.clone().with_out_of_frame(true), h, w).ok()?;
    let mut member = vec![false; h * w];
    for &p in comp {
        member[p] = true;
    }
    let covered = expected
        .data()
        .iter()
        .zip(&member)
        .filter(|(e, m)| **e != 0 && **m)
        .count();
    let score = covered as f64 / expected.count().max(1) as f64;
    Some(Detection {
        pose: snapped,
        score,
    })
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
            n: values.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub cio_sim: Stat,
    pub cio_sigma: Stat,
    pub cio_diff: Stat,
    pub hnd: Stat,
    pub ap: f64,
    pub ap_m: Option<f64>,
    pub ap_l: Option<f64>,
    /// Not computed by the toy pipeline.
    pub fid: Option<f64>,
}

/// Per-instance identity scores of one generated image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceScores {
    pub instance: usize,
    pub cio_sim: f64,
    pub cio_sigma: f64,
    pub cio_diff: f64,
}

/// Scores every instance patch against the scene's instance prompts.
pub fn score_instances(
    image: &Tensor,
    poses: &[&Pose2D],
    prompts: &[String],
    oracle: &dyn SimilarityOracle,
) -> Result<Vec<InstanceScores>, MetricsError> {
    if poses.len() != prompts.len() {
        return Err(MetricsError::LengthMismatch {
            patches: poses.len(),
            prompts: prompts.len(),
        });
    }
    poses
        .iter()
        .enumerate()
        .map(|(i, pose)| {
            let patch = instance_patch(image, pose, i)?;
            let scores: Vec<f64> = prompts.iter().map(|p| oracle.score(&patch, p)).collect();
            Ok(InstanceScores {
                instance: i,
                cio_sim: scores[i],
                cio_sigma: cio_sigma_from_scores(&scores, i)?,
                cio_diff: cio_diff_from_scores(&scores, i)?,
            })
        })
        .collect()
}
