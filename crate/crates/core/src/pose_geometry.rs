//! 2D pose skeletons, occupancy rasterization, dilation and attention masks.
//!
//! The pipeline per instance is `rasterize_skeleton → dilate`, then all
//! instances are normalized jointly into per-pixel weights that sum to one
//! ([`normalize_masks`]) and pooled to the interior resolutions of a
//! denoiser ([`resize_mask_pyramid`]).

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("format mismatch: {format:?} expects {expected} keypoints, got {got}")]
    FormatMismatch {
        format: PoseFormat,
        expected: usize,
        got: usize,
    },
    #[error("degenerate pose: {visible} visible keypoints, need at least 2")]
    DegeneratePose { visible: usize },
    #[error("line width must be >= 1, got {0}")]
    InvalidLineWidth(f64),
    #[error("visible keypoint {index} at ({x}, {y}) lies outside the {height}x{width} canvas")]
    OutOfCanvas {
        index: usize,
        x: f64,
        y: f64,
        height: usize,
        width: usize,
    },
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("softmax temperature must be positive, got {0}")]
    NonpositiveTemperature(f64),
    #[error("level {level:?} does not evenly divide base {base:?}")]
    NonDivisibleShape {
        base: (usize, usize),
        level: (usize, usize),
    },
    #[error("at least one occupancy map is required")]
    Empty,
}

/// Keypoint layout of a [`Pose2D`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PoseFormat {
    #[serde(rename = "COCO17")]
    Coco17,
    #[serde(rename = "OPENPOSE18")]
    OpenPose18,
}

const COCO17_EDGES: [(usize, usize); 19] = [
    (15, 13),
    (13, 11),
    (16, 14),
    (14, 12),
    (11, 12),
    (5, 11),
    (6, 12),
    (5, 6),
    (5, 7),
    (6, 8),
    (7, 9),
    (8, 10),
    (1, 2),
    (0, 1),
    (0, 2),
    (1, 3),
    (2, 4),
    (3, 5),
    (4, 6),
];

const OPENPOSE18_EDGES: [(usize, usize); 17] = [
    (1, 2),
    (1, 5),
    (2, 3),
    (3, 4),
    (5, 6),
    (6, 7),
    (1, 8),
    (8, 9),
    (9, 10),
    (1, 11),
    (11, 12),
    (12, 13),
    (1, 0),
    (0, 14),
    (14, 16),
    (0, 15),
    (15, 17),
];

const COCO17_SIGMAS: [f64; 17] = [
    0.026, 0.025, 0.025, 0.035, 0.035, 0.079, 0.079, 0.072, 0.072, 0.062, 0.062, 0.107, 0.107,
    0.087, 0.087, 0.089, 0.089,
];

// Neck has no COCO counterpart; it borrows the shoulder constant.
const OPENPOSE18_SIGMAS: [f64; 18] = [
    0.026, 0.079, 0.079, 0.072, 0.062, 0.079, 0.072, 0.062, 0.107, 0.087, 0.089, 0.107, 0.087,
    0.089, 0.025, 0.025, 0.035, 0.035,
];

impl PoseFormat {
    pub fn keypoint_count(self) -> usize {
        match self {
            PoseFormat::Coco17 => 17,
            PoseFormat::OpenPose18 => 18,
        }
    }

    /// Bones as pairs of keypoint indices.
    pub fn edges(self) -> &'static [(usize, usize)] {
        match self {
            PoseFormat::Coco17 => &COCO17_EDGES,
            PoseFormat::OpenPose18 => &OPENPOSE18_EDGES,
        }
    }

    /// Per-keypoint OKS constants `k_i = 2σ_i`.
    pub fn oks_constants(self) -> Vec<f64> {
        let sigmas: &[f64] = match self {
            PoseFormat::Coco17 => &COCO17_SIGMAS,
            PoseFormat::OpenPose18 => &OPENPOSE18_SIGMAS,
        };
        sigmas.iter().map(|s| 2.0 * s).collect()
    }
}

/// A keypoint in pixel coordinates; `v > 0` marks it visible.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub v: u8,
}

impl Keypoint {
    pub fn visible(x: f64, y: f64) -> Self {
        Self { x, y, v: 1 }
    }

    pub fn hidden() -> Self {
        Self {
            x: 0.0,
            y: 0.0,
            v: 0,
        }
    }

    pub fn is_visible(&self) -> bool {
        self.v > 0
    }
}

impl From<[f64; 3]> for Keypoint {
    fn from([x, y, v]: [f64; 3]) -> Self {
        Self {
            x,
            y,
            v: if v > 0.0 { v.round().min(2.0) as u8 } else { 0 },
        }
    }
}

impl From<Keypoint> for [f64; 3] {
    fn from(k: Keypoint) -> Self {
        [k.x, k.y, k.v as f64]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPose", into = "RawPose")]
pub struct Pose2D {
    format: PoseFormat,
    keypoints: Vec<Keypoint>,
    out_of_frame: bool,
}

#[derive(Serialize, Deserialize)]
struct RawPose {
    format: PoseFormat,
    keypoints: Vec<Keypoint>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    out_of_frame: bool,
}

impl TryFrom<RawPose> for Pose2D {
    type Error = GeometryError;

    fn try_from(raw: RawPose) -> Result<Self, Self::Error> {
        let mut pose = Pose2D::new(raw.format, raw.keypoints)?;
        pose.out_of_frame = raw.out_of_frame;
        Ok(pose)
    }
}

impl From<Pose2D> for RawPose {
    fn from(p: Pose2D) -> Self {
        RawPose {
            format: p.format,
            keypoints: p.keypoints,
            out_of_frame: p.out_of_frame,
        }
    }
}

impl Pose2D {
    pub fn new(format: PoseFormat, keypoints: Vec<Keypoint>) -> Result<Self, GeometryError> {
        if keypoints.len() != format.keypoint_count() {
            return Err(GeometryError::FormatMismatch {
                format,
                expected: format.keypoint_count(),
                got: keypoints.len(),
            });
        }
        Ok(Self {
            format,
            keypoints,
            out_of_frame: false,
        })
    }

    /// Marks the pose as allowed to extend past the canvas.
    pub fn with_out_of_frame(mut self, allowed: bool) -> Self {
        self.out_of_frame = allowed;
        self
    }

    pub fn format(&self) -> PoseFormat {
        self.format
    }

    pub fn keypoints(&self) -> &[Keypoint] {
        &self.keypoints
    }

    pub fn out_of_frame(&self) -> bool {
        self.out_of_frame
    }

    pub fn visible_count(&self) -> usize {
        self.keypoints.iter().filter(|k| k.is_visible()).count()
    }

    /// Mean of the visible keypoints, if any.
    pub fn centroid(&self) -> Option<(f64, f64)> {
        let n = self.visible_count();
        if n == 0 {
            return None;
        }
        let (sx, sy) = self
            .keypoints
            .iter()
            .filter(|k| k.is_visible())
            .fold((0.0, 0.0), |(sx, sy), k| (sx + k.x, sy + k.y));
        Some((sx / n as f64, sy / n as f64))
    }

    /// Tight box `(x0, y0, x1, y1)` around the visible keypoints.
    pub fn bbox(&self) -> Option<(f64, f64, f64, f64)> {
        let mut it = self.keypoints.iter().filter(|k| k.is_visible());
        let first = it.next()?;
        Some(it.fold(
            (first.x, first.y, first.x, first.y),
            |(x0, y0, x1, y1), k| (x0.min(k.x), y0.min(k.y), x1.max(k.x), y1.max(k.y)),
        ))
    }

    /// Applies `f` to every keypoint position.
    pub fn transformed(&self, f: impl Fn(f64, f64) -> (f64, f64)) -> Pose2D {
        let keypoints = self
            .keypoints
            .iter()
            .map(|k| {
                let (x, y) = f(k.x, k.y);
                Keypoint { x, y, v: k.v }
            })
            .collect();
        Pose2D {
            format: self.format,
            keypoints,
            out_of_frame: self.out_of_frame,
        }
    }

    /// Checks that visible keypoints lie on the canvas unless the pose is flagged out-of-frame.
    pub fn check_canvas(&self, height: usize, width: usize) -> Result<(), GeometryError> {
        if self.out_of_frame {
            return Ok(());
        }
        for (index, k) in self.keypoints.iter().enumerate() {
            if !k.is_visible() {
                continue;
            }
            let inside =
                k.x >= 0.0 && k.y >= 0.0 && k.x <= (width - 1) as f64 && k.y <= (height - 1) as f64;
            if !inside {
                return Err(GeometryError::OutOfCanvas {
                    index,
                    x: k.x,
                    y: k.y,
                    height,
                    width,
                });
            }
        }
        Ok(())
    }

    /// Visible bone segments as coordinate pairs.
    pub fn bones(&self) -> impl Iterator<Item = ((f64, f64), (f64, f64))> + '_ {
        self.format.edges().iter().filter_map(move |&(a, b)| {
            let (p, q) = (self.keypoints[a], self.keypoints[b]);
            (p.is_visible() && q.is_visible()).then_some(((p.x, p.y), (q.x, q.y)))
        })
    }
}

/// A binary H×W field.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OccupancyMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl OccupancyMap {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    /// Builds a map from any values; nonzero entries become 1.
    pub fn from_values(height: usize, width: usize, values: &[u8]) -> Self {
        assert_eq!(values.len(), height * width);
        Self {
            height,
            width,
            data: values.iter().map(|&v| u8::from(v != 0)).collect(),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    pub fn set(&mut self, y: usize, x: usize) {
        self.data[y * self.width + x] = 1;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    /// True when every set pixel of `other` is also set here.
    pub fn contains(&self, other: &OccupancyMap) -> bool {
        self.shape() == other.shape() && self.data.iter().zip(&other.data).all(|(&a, &b)| a >= b)
    }

    pub fn union(&self, other: &OccupancyMap) -> OccupancyMap {
        assert_eq!(self.shape(), other.shape());
        OccupancyMap {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a | b)
                .collect(),
        }
    }

    pub fn intersects(&self, other: &OccupancyMap) -> bool {
        self.data.iter().zip(&other.data).any(|(&a, &b)| a & b != 0)
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }
}

fn point_segment_dist_sq(px: f64, py: f64, (ax, ay): (f64, f64), (bx, by): (f64, f64)) -> f64 {
    let (dx, dy) = (bx - ax, by - ay);
    let len_sq = dx * dx + dy * dy;
    let t = if len_sq > 0.0 {
        (((px - ax) * dx + (py - ay) * dy) / len_sq).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (cx, cy) = (ax + t * dx, ay + t * dy);
    (px - cx) * (px - cx) + (py - cy) * (py - cy)
}

/// Marks every pixel whose center lies within `line_width / 2` of a visible bone.
///
/// Pixel `(x, y)` has its center at integer coordinates `(x, y)`.
pub fn rasterize_skeleton(
    pose: &Pose2D,
    height: usize,
    width: usize,
    line_width: f64,
) -> Result<OccupancyMap, GeometryError> {
    if pose.keypoints.len() != pose.format.keypoint_count() {
        return Err(GeometryError::FormatMismatch {
            format: pose.format,
            expected: pose.format.keypoint_count(),
            got: pose.keypoints.len(),
        });
    }
    let visible = pose.visible_count();
    if visible < 2 {
        return Err(GeometryError::DegeneratePose { visible });
    }
    if !(line_width >= 1.0) {
        return Err(GeometryError::InvalidLineWidth(line_width));
    }
    let radius = line_width / 2.0;
    // Absorbs rounding in the distance for pixels exactly on the boundary.
    let limit = radius * radius + 1e-9;
    let mut occ = OccupancyMap::empty(height, width);
    for (a, b) in pose.bones() {
        let x_lo = (a.0.min(b.0) - radius).floor().max(0.0);
        let x_hi = (a.0.max(b.0) + radius).ceil().min(width as f64 - 1.0);
        let y_lo = (a.1.min(b.1) - radius).floor().max(0.0);
        let y_hi = (a.1.max(b.1) + radius).ceil().min(height as f64 - 1.0);
        if x_lo > x_hi || y_lo > y_hi {
            continue;
        }
        for y in y_lo as usize..=y_hi as usize {
            for x in x_lo as usize..=x_hi as usize {
                if point_segment_dist_sq(x as f64, y as f64, a, b) <= limit {
                    occ.set(y, x);
                }
            }
        }
    }
    Ok(occ)
}

/// Side of the square structuring element used for an image of height `image_height`.
pub fn dilation_kernel_side(image_height: usize) -> usize {
    2 * (image_height / 16) + 1
}

/// Square morphological dilation with side [`dilation_kernel_side`]`(image_height)`.
pub fn dilate(occ: &OccupancyMap, image_height: usize) -> OccupancyMap {
    let r = image_height / 16;
    let (h, w) = occ.shape();
    // Separable max filter using running counts along rows, then columns.
    let mut rows = vec![0u8; h * w];
    for y in 0..h {
        let src = &occ.data[y * w..(y + 1) * w];
        let mut prefix = vec![0usize; w + 1];
        for x in 0..w {
            prefix[x + 1] = prefix[x] + src[x] as usize;
        }
        for x in 0..w {
            let lo = x.saturating_sub(r);
            let hi = (x + r).min(w - 1);
            rows[y * w + x] = u8::from(prefix[hi + 1] > prefix[lo]);
        }
    }
    let mut out = vec![0u8; h * w];
    let mut prefix = vec![0usize; h + 1];
    for x in 0..w {
        for y in 0..h {
            prefix[y + 1] = prefix[y] + rows[y * w + x] as usize;
        }
        for y in 0..h {
            let lo = y.saturating_sub(r);
            let hi = (y + r).min(h - 1);
            out[y * w + x] = u8::from(prefix[hi + 1] > prefix[lo]);
        }
    }
    OccupancyMap {
        height: h,
        width: w,
        data: out,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MaskMode {
    Soft,
    Hard,
}

/// N per-instance weight maps at one resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskLevel {
    height: usize,
    width: usize,
    masks: Vec<Vec<f64>>,
}

impl MaskLevel {
    pub fn new(height: usize, width: usize, masks: Vec<Vec<f64>>) -> Self {
        assert!(masks.iter().all(|m| m.len() == height * width));
        Self {
            height,
            width,
            masks,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn mask(&self, i: usize) -> &[f64] {
        &self.masks[i]
    }

    pub fn masks(&self) -> &[Vec<f64>] {
        &self.masks
    }

    /// Largest deviation of the per-pixel instance sum from 1.
    pub fn partition_error(&self) -> f64 {
        (0..self.height * self.width)
            .map(|p| (self.masks.iter().map(|m| m[p]).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Normalized attention masks `m_i` plus their resized pyramid `m̄_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMaskSet {
    pub mode: MaskMode,
    pub tau: f64,
    base: MaskLevel,
    pyramid: Vec<MaskLevel>,
}

impl AttentionMaskSet {
    pub fn base(&self) -> &MaskLevel {
        &self.base
    }

    pub fn pyramid(&self) -> &[MaskLevel] {
        &self.pyramid
    }

    pub fn instance_count(&self) -> usize {
        self.base.len()
    }

    /// Masks at the requested resolution, searching the base and then the pyramid.
    pub fn level(&self, height: usize, width: usize) -> Option<&MaskLevel> {
        std::iter::once(&self.base)
            .chain(&self.pyramid)
            .find(|l| l.shape() == (height, width))
    }

    /// Every level including the base.
    pub fn levels(&self) -> impl Iterator<Item = &MaskLevel> {
        std::iter::once(&self.base).chain(&self.pyramid)
    }
}

/// Normalizes occupancy maps into per-pixel weights that sum to one.
///
/// SOFT applies a temperature softmax over instances; HARD splits each
/// pixel uniformly among the instances with maximal occupancy. Pixels no
/// instance covers get `1/N` in both modes.
pub fn normalize_masks(
    occs: &[OccupancyMap],
    tau: f64,
    mode: MaskMode,
) -> Result<AttentionMaskSet, GeometryError> {
    let first = occs.first().ok_or(GeometryError::Empty)?;
    let (h, w) = first.shape();
    if let Some(bad) = occs.iter().find(|o| o.shape() != (h, w)) {
        return Err(GeometryError::ShapeMismatch {
            expected: (h, w),
            got: bad.shape(),
        });
    }
    if mode == MaskMode::Soft && !(tau > 0.0) {
        return Err(GeometryError::NonpositiveTemperature(tau));
    }
    let n = occs.len();
    let mut masks = vec![vec![0.0; h * w]; n];
    let mut logits = vec![0.0; n];
    for p in 0..h * w {
        match mode {
            MaskMode::Soft => {
                for (l, o) in logits.iter_mut().zip(occs) {
                    *l = o.data[p] as f64 / tau;
                }
                let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for l in logits.iter_mut() {
                    *l = (*l - max).exp();
                    total += *l;
                }
                for (m, l) in masks.iter_mut().zip(&logits) {
                    m[p] = l / total;
                }
            }
            MaskMode::Hard => {
                let max = occs.iter().map(|o| o.data[p]).max().unwrap_or(0);
                let ties = occs.iter().filter(|o| o.data[p] == max).count();
                let share = 1.0 / ties as f64;
                for (m, o) in masks.iter_mut().zip(occs) {
                    m[p] = if o.data[p] == max { share } else { 0.0 };
                }
            }
        }
    }
    Ok(AttentionMaskSet {
        mode,
        tau,
        base: MaskLevel::new(h, w, masks),
        pyramid: Vec::new(),
    })
}

/// Area-average pooling of the base masks to each level shape, renormalized to sum one.
pub fn resize_mask_pyramid(
    masks: &AttentionMaskSet,
    level_shapes: &[(usize, usize)],
) -> Result<AttentionMaskSet, GeometryError> {
    let base = &masks.base;
    let (bh, bw) = base.shape();
    let mut pyramid = Vec::with_capacity(level_shapes.len());
    for &(lh, lw) in level_shapes {
        if lh == 0 || lw == 0 || bh % lh != 0 || bw % lw != 0 {
            return Err(GeometryError::NonDivisibleShape {
                base: (bh, bw),
                level: (lh, lw),
            });
        }
        let (fy, fx) = (bh / lh, bw / lw);
        let area = (fy * fx) as f64;
        let mut pooled: Vec<Vec<f64>> = base
            .masks
            .iter()
            .map(|m| {
                let mut out = vec![0.0; lh * lw];
                for y in 0..lh {
                    for x in 0..lw {
                        let mut acc = 0.0;
                        for dy in 0..fy {
                            let row =
                                &m[(y * fy + dy) * bw + x * fx..(y * fy + dy) * bw + (x + 1) * fx];
                            acc += row.iter().sum::<f64>();
                        }
                        out[y * lw + x] = acc / area;
                    }
                }
                out
            })
            .collect();
        for p in 0..lh * lw {
            let total: f64 = pooled.iter().map(|m| m[p]).sum();
            for m in pooled.iter_mut() {
                m[p] /= total;
            }
        }
        pyramid.push(MaskLevel::new(lh, lw, pooled));
    }
    Ok(AttentionMaskSet {
        mode: masks.mode,
        tau: masks.tau,
        base: masks.base.clone(),
        pyramid,
    })
}

/// Rasterizes and dilates every pose, then normalizes and builds the pyramid in one go.
pub fn build_mask_set(
    poses: &[&Pose2D],
    height: usize,
    width: usize,
    line_width: f64,
    tau: f64,
    mode: MaskMode,
    level_shapes: &[(usize, usize)],
) -> Result<AttentionMaskSet, GeometryError> {
    let occs = dilated_occupancies(poses, height, width, line_width)?;
    let masks = normalize_masks(&occs, tau, mode)?;
    resize_mask_pyramid(&masks, level_shapes)
}

pub fn dilated_occupancies(
    poses: &[&Pose2D],
    height: usize,
    width: usize,
    line_width: f64,
) -> Result<Vec<OccupancyMap>, GeometryError> {
    poses
        .iter()
        .map(|p| rasterize_skeleton(p, height, width, line_width).map(|o| dilate(&o, height)))
        .collect()
}

/// Parametric COCO17 stick figure standing upright.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StandingFigure {
    /// Horizontal center in pixels.
    pub center_x: f64,
    /// Top of the head in pixels.
    pub top: f64,
    /// Head-to-ankle extent in pixels.
    pub height: f64,
    /// Raises (+) or lowers (-) both wrists, in units of `height`.
    pub arm_raise: f64,
    /// Extra horizontal ankle offset, in units of `height`.
    pub leg_spread: f64,
}

impl StandingFigure {
    /// Horizontal extent as a fraction of `height`.
    pub const WIDTH_RATIO: f64 = 0.4;

    pub fn new(center_x: f64, top: f64, height: f64) -> Self {
        Self {
            center_x,
            top,
            height,
            arm_raise: 0.0,
            leg_spread: 0.0,
        }
    }

    pub fn pose(&self) -> Pose2D {
        let (a, l) = (self.arm_raise, self.leg_spread);
        // (x, y) in units of height; +x is the figure's left, drawn on the image right.
        let unit: [(f64, f64); 17] = [
            (0.0, 0.08),
            (0.03, 0.05),
            (-0.03, 0.05),
            (0.06, 0.07),
            (-0.06, 0.07),
            (0.12, 0.2),
            (-0.12, 0.2),
            (0.17, 0.37 - 0.5 * a),
            (-0.17, 0.37 - 0.5 * a),
            (0.2, 0.54 - a),
            (-0.2, 0.54 - a),
            (0.08, 0.55),
            (-0.08, 0.55),
            (0.09 + 0.5 * l, 0.77),
            (-0.09 - 0.5 * l, 0.77),
            (0.1 + l, 1.0),
            (-0.1 - l, 1.0),
        ];
        let kps = unit
            .iter()
            .map(|&(x, y)| {
                Keypoint::visible(self.center_x + x * self.height, self.top + y * self.height)
            })
            .collect();
        Pose2D::new(PoseFormat::Coco17, kps).expect("template has 17 keypoints")
    }
}

/// Figures of equal size standing side by side, centered on a canvas.
#[derive(Debug, Clone, PartialEq)]
pub struct RowLayout {
    pub figures: Vec<StandingFigure>,
    pub height: usize,
    pub width: usize,
}

impl RowLayout {
    /// Vertical canvas margin in pixels.
    pub const MARGIN: f64 = 4.0;

    /// Horizontal extent of a figure after stroking and dilation.
    pub fn footprint(height: usize, figure_height: f64, line_width: f64) -> f64 {
        StandingFigure::WIDTH_RATIO * figure_height + line_width + 2.0 * (height / 16) as f64 + 1.0
    }

    /// `count` figures of height `scale · (H − 2·MARGIN)` whose centers are
    /// `distance` footprints apart, so `distance = 1` keeps dilated regions
    /// disjoint and smaller values make them overlap.
    ///
    /// With `width = None` the canvas is made just wide enough, rounded up
    /// to a multiple of 4.
    pub fn new(
        count: usize,
        height: usize,
        width: Option<usize>,
        scale: f64,
        distance: f64,
        line_width: f64,
    ) -> Self {
        let fh = scale * (height as f64 - 2.0 * Self::MARGIN);
        let foot = Self::footprint(height, fh, line_width);
        let spacing = distance * foot;
        let span = spacing * count.saturating_sub(1) as f64 + foot;
        let width = width.unwrap_or_else(|| {
            let w = (span + 2.0 * Self::MARGIN).ceil() as usize;
            w.div_ceil(4) * 4
        });
        let left = (width as f64 - span) / 2.0 + foot / 2.0;
        let top = ((height as f64 - fh) / 2.0).floor();
        let figures = (0..count)
            .map(|i| StandingFigure::new(left + spacing * i as f64, top, fh))
            .collect();
        Self {
            figures,
            height,
            width,
        }
    }

    pub fn poses(&self) -> Vec<Pose2D> {
        self.figures.iter().map(StandingFigure::pose).collect()
    }
}
