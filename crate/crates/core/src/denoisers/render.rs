//! Stick-figure renderer and control maps for synthetic scenes.

use serde::{Deserialize, Serialize};

use super::{DenoiseError, Figure};
use crate::pose_geometry::{rasterize_skeleton, OccupancyMap, Pose2D};
use crate::tensor::Tensor;

/// Stroke width shared by rendering and control maps.
pub const RENDER_LINE_WIDTH: f64 = 3.0;

/// Identity words and their colors in `[-1, 1]` RGB, on a neutral 0 background.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Palette {
    entries: Vec<(String, [f64; 3])>,
}

impl Default for Palette {
    fn default() -> Self {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        Self::new(vec![
            ("red".into(), [1.0, 0.0, 0.0]),
            ("green".into(), [0.0, 1.0, 0.0]),
            ("blue".into(), [0.0, 0.0, 1.0]),
            ("cyan".into(), [-1.0, 0.0, 0.0]),
            ("magenta".into(), [0.0, -1.0, 0.0]),
            ("yellow".into(), [0.0, 0.0, -1.0]),
            ("orange".into(), [s, 0.0, -s]),
            ("pink".into(), [s, -s, 0.0]),
        ])
    }
}

impl Palette {
    pub fn new(entries: Vec<(String, [f64; 3])>) -> Self {
        Self { entries }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn entries(&self) -> &[(String, [f64; 3])] {
        &self.entries
    }

    /// Color of the first palette word appearing as a whole word in `identity`.
    pub fn color_of(&self, identity: &str) -> Result<[f64; 3], DenoiseError> {
        let lower = identity.to_lowercase();
        let words: Vec<&str> = lower.split(|c: char| !c.is_alphanumeric()).collect();
        self.entries
            .iter()
            .find(|(name, _)| words.contains(&name.as_str()))
            .map(|(_, c)| *c)
            .ok_or_else(|| DenoiseError::UnknownToken(identity.to_string()))
    }
}

/// Stroke occupancy of one pose at [`RENDER_LINE_WIDTH`].
pub fn stroke(pose: &Pose2D, height: usize, width: usize) -> Result<OccupancyMap, DenoiseError> {
    Ok(rasterize_skeleton(pose, height, width, RENDER_LINE_WIDTH)?)
}

/// `3×H×W` image with the pose drawn in the identity's color on a zero background.
pub fn render_instance(
    identity: &str,
    pose: &Pose2D,
    palette: &Palette,
    height: usize,
    width: usize,
) -> Result<Tensor, DenoiseError> {
    let mut img = Tensor::zeros(3, height, width);
    paint(
        &mut img,
        palette.color_of(identity)?,
        &stroke(pose, height, width)?,
    );
    Ok(img)
}

/// Draws all figures in order; later figures cover earlier ones.
pub fn render_figures(
    figures: &[Figure],
    palette: &Palette,
    height: usize,
    width: usize,
) -> Result<Tensor, DenoiseError> {
    let mut img = Tensor::zeros(3, height, width);
    for f in figures {
        paint(
            &mut img,
            palette.color_of(&f.identity)?,
            &stroke(&f.pose, height, width)?,
        );
    }
    Ok(img)
}

fn paint(img: &mut Tensor, color: [f64; 3], occ: &OccupancyMap) {
    let n = img.plane_len();
    for (c, &value) in color.iter().enumerate() {
        let plane = img.plane_mut(c);
        for p in 0..n {
            if occ.data()[p] != 0 {
                plane[p] = value;
            }
        }
    }
}

/// `1×H×W` union of the stroke occupancies of `poses`.
pub fn control_map(poses: &[&Pose2D], height: usize, width: usize) -> Result<Tensor, DenoiseError> {
    let mut occ = OccupancyMap::empty(height, width);
    for p in poses {
        occ = occ.union(&stroke(p, height, width)?);
    }
    Ok(Tensor::from_vec(1, height, width, occ.to_f64()))
}
