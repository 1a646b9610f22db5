//! Benchmark scenes, paired multi-mode runs, robustness sweeps and their
//! report, plot and image files.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::composer::{generate, ComposeError, CompositionMode, HarmonyParams};
use crate::denoisers::{DenoiserFactory, Palette, RENDER_LINE_WIDTH};
use crate::diffusion::NoiseSchedule;
use crate::metrics::{
    hnd, keypoint_ap, score_instances, Detection, InstanceScores, MetricsError, MetricsReport,
    SimilarityOracle, Stat, ToyPoseDetector,
};
use crate::pose_geometry::{Keypoint, MaskLevel, Pose2D, PoseFormat, RowLayout};
use crate::prompting::{
    validate_scene_json, Canvas, InstanceSpec, SamplerSettings, SceneSpec, SchemaViolation,
};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("a scene needs {needed} identities but the pool has {available}")]
    PoolExhausted { needed: usize, available: usize },
    #[error("invalid {axis:?} value {value}")]
    InvalidAxisValue { axis: SweepAxis, value: f64 },
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
    #[error("invalid scene {path}: {violations:?}")]
    InvalidScene {
        path: String,
        violations: Vec<SchemaViolation>,
    },
    #[error(transparent)]
    Compose(#[from] ComposeError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error("plot: {0}")]
    Plot(String),
}

// ---------------------------------------------------------------------------
// Manifests and synthetic scenes

/// A scene listed by a manifest, either by file path or inline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SceneSource {
    Path(PathBuf),
    Inline(Box<SceneSpec>),
}

/// `scenes` synthetic scenes with `count` people each.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountBin {
    pub count: usize,
    pub scenes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkManifest {
    #[serde(default)]
    pub scenes: Vec<SceneSource>,
    #[serde(default)]
    pub synthetic: Vec<CountBin>,
    pub identities: Vec<String>,
    pub settings: Vec<String>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_height")]
    pub height: usize,
    /// Fixed canvas width; by default each scene is made just wide enough.
    #[serde(default)]
    pub width: Option<usize>,
    #[serde(default = "default_scale")]
    pub scale: f64,
    /// Figure spacing in dilated footprints; 1 keeps instance regions disjoint.
    #[serde(default = "default_distance")]
    pub distance: f64,
}

fn default_height() -> usize {
    64
}

fn default_scale() -> f64 {
    0.75
}

fn default_distance() -> f64 {
    1.0
}

impl BenchmarkManifest {
    /// Synthetic-only manifest over the default palette and settings.
    pub fn synthetic(bins: Vec<CountBin>, seed: u64) -> Self {
        Self {
            scenes: Vec::new(),
            synthetic: bins,
            identities: Palette::default().names().map(String::from).collect(),
            settings: ["on a beach", "in a park", "in a city"]
                .map(String::from)
                .to_vec(),
            seed,
            height: default_height(),
            width: None,
            scale: default_scale(),
            distance: default_distance(),
        }
    }

    pub fn scene_count(&self) -> usize {
        self.scenes.len() + self.synthetic.iter().map(|b| b.scenes).sum::<usize>()
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |m: &str| Err(BenchError::InvalidManifest(m.into()));
        if self.identities.is_empty() {
            return bad("identity pool is empty");
        }
        if self.settings.is_empty() {
            return bad("setting pool is empty");
        }
        if self.scene_count() == 0 {
            return bad("no scenes");
        }
        if self.synthetic.iter().any(|b| b.count == 0) {
            return bad("synthetic scenes need at least one person");
        }
        if self.height < 16
            || self.height % 4 != 0
            || self.width.is_some_and(|w| w < 4 || w % 4 != 0)
        {
            return bad("canvas sides must be multiples of 4 and the height at least 16");
        }
        if !(self.scale > 0.0 && self.scale <= 1.0) || !(self.distance >= 0.0) {
            return bad("scale must be in (0, 1] and distance non-negative");
        }
        Ok(())
    }
}

/// Deterministic synthetic scenes for every count bin, in bin order.
///
/// Figures stand in a centered row; identities are drawn without replacement
/// within a scene and each scene gets its own sampling seed.
pub fn synth_scenes(manifest: &BenchmarkManifest) -> Result<Vec<SceneSpec>, BenchError> {
    manifest.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(manifest.seed);
    let mut out = Vec::new();
    for bin in &manifest.synthetic {
        if bin.count > manifest.identities.len() {
            return Err(BenchError::PoolExhausted {
                needed: bin.count,
                available: manifest.identities.len(),
            });
        }
        for _ in 0..bin.scenes {
            let mut layout = RowLayout::new(
                bin.count,
                manifest.height,
                manifest.width,
                manifest.scale,
                manifest.distance,
                RENDER_LINE_WIDTH,
            );
            for f in layout.figures.iter_mut() {
                f.arm_raise = rng.gen_range(-0.15..=0.15);
                f.leg_spread = rng.gen_range(0.0..=0.08);
            }
            let ids: Vec<&String> = manifest
                .identities
                .choose_multiple(&mut rng, bin.count)
                .collect();
            let setting = manifest
                .settings
                .choose(&mut rng)
                .expect("validated non-empty");
            let instances = layout
                .poses()
                .into_iter()
                .zip(ids)
                .map(|(pose, id)| InstanceSpec {
                    identity: id.clone(),
                    pose,
                })
                .collect::<Vec<_>>();
            for inst in &instances {
                inst.pose
                    .check_canvas(layout.height, layout.width)
                    .map_err(|_| {
                        BenchError::InvalidManifest(format!(
                            "{} people do not fit a {} px wide canvas",
                            bin.count, layout.width
                        ))
                    })?;
            }
            let mut scene = SceneSpec::new(
                Canvas {
                    h: layout.height,
                    w: layout.width,
                },
                setting.clone(),
                instances,
            );
            scene.seed = rng.gen();
            out.push(scene);
        }
    }
    Ok(out)
}

/// Listed scenes (paths relative to `base_dir`) followed by the synthetic ones.
pub fn load_scenes(
    manifest: &BenchmarkManifest,
    base_dir: &Path,
) -> Result<Vec<SceneSpec>, BenchError> {
    manifest.validate()?;
    let mut out = Vec::new();
    for src in &manifest.scenes {
        match src {
            SceneSource::Inline(scene) => out.push((**scene).clone()),
            SceneSource::Path(p) => {
                let path = base_dir.join(p);
                let doc: Value = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
                let scene =
                    validate_scene_json(&doc).map_err(|violations| BenchError::InvalidScene {
                        path: path.display().to_string(),
                        violations,
                    })?;
                out.push(scene);
            }
        }
    }
    if !manifest.synthetic.is_empty() {
        out.extend(synth_scenes(manifest)?);
    }
    Ok(out)
}

/// Scenes from a COCO-style keypoint annotation file.
///
/// Canvases are cropped to multiples of 4, keypoints outside them are hidden,
/// and people without a visible keypoint are dropped. Identities come from the
/// pool, without replacement within an image.
pub fn import_coco_keypoints(
    doc: &Value,
    identities: &[String],
    setting: &str,
    seed: u64,
) -> Result<Vec<SceneSpec>, BenchError> {
    #[derive(Deserialize)]
    struct Image {
        id: u64,
        height: usize,
        width: usize,
    }
    #[derive(Deserialize)]
    struct Annotation {
        image_id: u64,
        keypoints: Vec<f64>,
    }
    #[derive(Deserialize)]
    struct File {
        images: Vec<Image>,
        annotations: Vec<Annotation>,
    }
    let file: File = serde_json::from_value(doc.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for img in &file.images {
        let (h, w) = (img.height / 4 * 4, img.width / 4 * 4);
        let poses: Vec<Pose2D> = file
            .annotations
            .iter()
            .filter(|a| a.image_id == img.id && a.keypoints.len() == 51)
            .filter_map(|a| {
                let kps = a
                    .keypoints
                    .chunks(3)
                    .map(|k| {
                        let inside = k[0] >= 0.0
                            && k[1] >= 0.0
                            && k[0] <= (w - 1) as f64
                            && k[1] <= (h - 1) as f64;
                        if k[2] > 0.0 && inside {
                            Keypoint::visible(k[0], k[1])
                        } else {
                            Keypoint::hidden()
                        }
                    })
                    .collect();
                Pose2D::new(PoseFormat::Coco17, kps)
                    .ok()
                    .filter(|p| p.visible_count() > 0)
            })
            .collect();
        if poses.is_empty() || h == 0 || w == 0 {
            continue;
        }
        if poses.len() > identities.len() {
            return Err(BenchError::PoolExhausted {
                needed: poses.len(),
                available: identities.len(),
            });
        }
        let ids: Vec<&String> = identities.choose_multiple(&mut rng, poses.len()).collect();
        let instances = poses
            .into_iter()
            .zip(ids)
            .map(|(pose, id)| InstanceSpec {
                identity: id.clone(),
                pose,
            })
            .collect();
        let mut scene = SceneSpec::new(Canvas { h, w }, setting, instances);
        scene.seed = img.id;
        out.push(scene);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Benchmark runs

/// Identity oracle and pose detector used to score generated images.
#[derive(Clone, Copy)]
pub struct Evaluators<'a> {
    pub oracle: &'a dyn SimilarityOracle,
    pub detector: &'a ToyPoseDetector,
}

/// Scores of one generated image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    /// Index into the benchmarked scene list.
    pub scene: usize,
    pub seed: u64,
    pub mode: CompositionMode,
    pub instances: Vec<InstanceScores>,
    pub detections: Vec<Detection>,
    pub hnd: usize,
}

impl SceneRecord {
    pub fn mean_sigma(&self) -> f64 {
        Stat::of(
            &self
                .instances
                .iter()
                .map(|i| i.cio_sigma)
                .collect::<Vec<_>>(),
        )
        .mean
    }

    pub fn mean_diff(&self) -> f64 {
        Stat::of(
            &self
                .instances
                .iter()
                .map(|i| i.cio_diff)
                .collect::<Vec<_>>(),
        )
        .mean
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub mode: CompositionMode,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkResult {
    /// Ordered by scene, then seed, then mode.
    pub records: Vec<SceneRecord>,
    pub summary: Vec<ModeSummary>,
}

impl BenchmarkResult {
    pub fn report(&self, mode: CompositionMode) -> Option<&MetricsReport> {
        self.summary
            .iter()
            .find(|s| s.mode == mode)
            .map(|s| &s.report)
    }

    pub fn records_of(&self, mode: CompositionMode) -> impl Iterator<Item = &SceneRecord> {
        self.records.iter().filter(move |r| r.mode == mode)
    }

    /// One JSON object per record and line.
    pub fn write_jsonl(&self, mut out: impl Write) -> Result<(), BenchError> {
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn table(&self) -> Vec<ReportRow> {
        self.summary
            .iter()
            .map(|s| ReportRow {
                label: s.mode.to_string(),
                report: s.report.clone(),
            })
            .collect()
    }
}

/// Identity scores and detections of one image of `scene`.
pub fn evaluate_image(
    scene: &SceneSpec,
    image: &Tensor,
    eval: Evaluators<'_>,
) -> Result<(Vec<InstanceScores>, Vec<Detection>), BenchError> {
    let poses: Vec<&Pose2D> = scene.instances.iter().map(|i| &i.pose).collect();
    let prompts = (0..scene.instances.len())
        .map(|i| scene.instance_prompt(i))
        .collect::<Result<Vec<_>, _>>()
        .map_err(ComposeError::from)?;
    let scores = score_instances(image, &poses, &prompts, eval.oracle)?;
    Ok((scores, eval.detector.detect(image)))
}

/// Pools records into one report; AP treats every record as its own image.
pub fn aggregate(
    scenes: &[SceneSpec],
    records: &[&SceneRecord],
) -> Result<MetricsReport, BenchError> {
    let inst = |f: fn(&InstanceScores) -> f64| -> Vec<f64> {
        records
            .iter()
            .flat_map(|r| r.instances.iter().map(f))
            .collect()
    };
    let gts: Vec<Vec<Pose2D>> = records
        .iter()
        .map(|r| {
            scenes[r.scene]
                .instances
                .iter()
                .map(|i| i.pose.clone())
                .collect()
        })
        .collect();
    let dets: Vec<Vec<Detection>> = records.iter().map(|r| r.detections.clone()).collect();
    let ap = keypoint_ap(&gts, &dets)?;
    Ok(MetricsReport {
        cio_sim: Stat::of(&inst(|i| i.cio_sim)),
        cio_sigma: Stat::of(&inst(|i| i.cio_sigma)),
        cio_diff: Stat::of(&inst(|i| i.cio_diff)),
        hnd: Stat::of(&records.iter().map(|r| r.hnd as f64).collect::<Vec<_>>()),
        ap: ap.ap,
        ap_m: ap.ap_m,
        ap_l: ap.ap_l,
        fid: None,
    })
}

/// Generates every scene under every mode and scores the images.
///
/// Each scene is sampled once per entry of `seeds` (or with its own seed when
/// `seeds` is empty), and all modes of a (scene, seed) pair share the same
/// initial noise. Pairs run on the rayon pool; results are reduced in input
/// order, so the output does not depend on scheduling.
pub fn run_benchmark(
    scenes: &[SceneSpec],
    modes: &[CompositionMode],
    seeds: &[u64],
    factory: &dyn DenoiserFactory,
    schedule: &NoiseSchedule,
    eval: Evaluators<'_>,
) -> Result<BenchmarkResult, BenchError> {
    run_benchmark_with_sink(
        scenes,
        modes,
        seeds,
        factory,
        schedule,
        eval,
        &|_, _| Ok(()),
    )
}

/// Receives every generated image with the record scoring it.
pub type ImageSink<'a> = dyn Fn(&SceneRecord, &Tensor) -> Result<(), BenchError> + Sync + 'a;

/// [`run_benchmark`] that also hands each image to `sink`.
pub fn run_benchmark_with_sink(
    scenes: &[SceneSpec],
    modes: &[CompositionMode],
    seeds: &[u64],
    factory: &dyn DenoiserFactory,
    schedule: &NoiseSchedule,
    eval: Evaluators<'_>,
    sink: &ImageSink<'_>,
) -> Result<BenchmarkResult, BenchError> {
    if scenes.is_empty() || modes.is_empty() {
        return Err(BenchError::InvalidManifest("nothing to run".into()));
    }
    let jobs: Vec<(usize, u64)> = scenes
        .iter()
        .enumerate()
        .flat_map(|(i, s)| {
            let seeds = if seeds.is_empty() {
                vec![s.seed]
            } else {
                seeds.to_vec()
            };
            seeds.into_iter().map(move |seed| (i, seed))
        })
        .collect();
    let per_job: Vec<Vec<SceneRecord>> = jobs
        .par_iter()
        .map(|&(i, seed)| {
            let mut scene = scenes[i].clone();
            scene.seed = seed;
            modes
                .iter()
                .map(|&mode| {
                    let g = generate(
                        &scene,
                        factory,
                        &scene.sampler_config(),
                        &scene.harmony,
                        mode,
                        schedule,
                    )?;
                    let (instances, detections) = evaluate_image(&scene, &g.image, eval)?;
                    let rec = SceneRecord {
                        scene: i,
                        seed,
                        mode,
                        hnd: hnd(scene.instances.len(), detections.len()),
                        instances,
                        detections,
                    };
                    sink(&rec, &g.image)?;
                    Ok(rec)
                })
                .collect::<Result<Vec<_>, BenchError>>()
        })
        .collect::<Result<_, _>>()?;
    let records: Vec<SceneRecord> = per_job.into_iter().flatten().collect();
    let summary = modes
        .iter()
        .map(|&mode| {
            let rs: Vec<&SceneRecord> = records.iter().filter(|r| r.mode == mode).collect();
            Ok(ModeSummary {
                mode,
                report: aggregate(scenes, &rs)?,
            })
        })
        .collect::<Result<_, BenchError>>()?;
    Ok(BenchmarkResult { records, summary })
}

/// One-sided paired sign test of `a > b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignTest {
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    /// `P(X ≥ wins)` for `X ~ Binomial(wins + losses, 1/2)`.
    pub p_value: f64,
}

pub fn sign_test(a: &[f64], b: &[f64]) -> SignTest {
    let (mut wins, mut losses, mut ties) = (0, 0, 0);
    for (x, y) in a.iter().zip(b) {
        match x.partial_cmp(y) {
            Some(std::cmp::Ordering::Greater) => wins += 1,
            Some(std::cmp::Ordering::Less) => losses += 1,
            _ => ties += 1,
        }
    }
    let n = wins + losses;
    // ln C(n, k) accumulated from k = 0 upward.
    let mut ln_c = 0.0;
    let mut p = 0.0;
    let ln_half_n = n as f64 * 0.5f64.ln();
    for k in 0..=n {
        if k > 0 {
            ln_c += ((n - k + 1) as f64).ln() - (k as f64).ln();
        }
        if k >= wins {
            p += (ln_c + ln_half_n).exp();
        }
    }
    SignTest {
        wins,
        losses,
        ties,
        p_value: p.min(1.0),
    }
}

// ---------------------------------------------------------------------------
// Robustness sweeps

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SweepAxis {
    PeopleCount,
    PersonScale,
    InterDistance,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::PeopleCount => "people_count",
            Self::PersonScale => "person_scale",
            Self::InterDistance => "inter_distance",
        }
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "people_count" | "count" => Ok(Self::PeopleCount),
            "person_scale" | "scale" => Ok(Self::PersonScale),
            "inter_distance" | "distance" => Ok(Self::InterDistance),
            _ => Err(format!("unknown sweep axis {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
}

impl SweepConfig {
    /// The axis with its default values.
    pub fn defaults(axis: SweepAxis) -> Self {
        let values = match axis {
            SweepAxis::PeopleCount => vec![3.0, 5.0, 7.0],
            SweepAxis::PersonScale => vec![1.0, 0.75, 0.5, 0.25, 0.1],
            SweepAxis::InterDistance => vec![1.0, 0.75, 0.5, 0.25],
        };
        Self { axis, values }
    }

    /// Values must be non-empty, sorted (either direction) and valid for the axis.
    pub fn validate(&self) -> Result<(), BenchError> {
        let invalid = |value: f64| BenchError::InvalidAxisValue {
            axis: self.axis,
            value,
        };
        let Some(&first) = self.values.first() else {
            return Err(invalid(f64::NAN));
        };
        for &v in &self.values {
            let ok = match self.axis {
                SweepAxis::PeopleCount => v >= 1.0 && v.fract() == 0.0,
                SweepAxis::PersonScale => v > 0.0 && v <= 1.0,
                SweepAxis::InterDistance => v >= 0.0 && v.is_finite(),
            };
            if !ok {
                return Err(invalid(v));
            }
        }
        let up = self.values.windows(2).all(|w| w[0] < w[1]);
        let down = self.values.windows(2).all(|w| w[0] > w[1]);
        if !(up || down) {
            return Err(invalid(first));
        }
        Ok(())
    }
}

/// Factors held fixed while one axis varies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepBase {
    pub count: usize,
    pub scale: f64,
    pub distance: f64,
    pub height: usize,
    pub identities: Vec<String>,
    pub setting: String,
    pub mode: CompositionMode,
    pub sampler: SamplerSettings,
    pub harmony: HarmonyParams,
}

impl Default for SweepBase {
    fn default() -> Self {
        Self {
            count: 3,
            scale: 0.75,
            distance: 0.75,
            height: 64,
            identities: Palette::default().names().map(String::from).collect(),
            setting: "on a beach".into(),
            mode: CompositionMode::FineControl,
            sampler: SamplerSettings::default(),
            harmony: HarmonyParams::default(),
        }
    }
}

/// The scene of every sweep value for one seed.
///
/// Identities depend on the seed only, so values differ in geometry alone.
/// Scale and distance sweeps share one canvas sized for the widest value; the
/// count sweep sizes each canvas to its row.
pub fn sweep_scenes(
    config: &SweepConfig,
    base: &SweepBase,
    seed: u64,
) -> Result<Vec<SceneSpec>, BenchError> {
    config.validate()?;
    let factors = |v: f64| match config.axis {
        SweepAxis::PeopleCount => (v as usize, base.scale, base.distance),
        SweepAxis::PersonScale => (base.count, v, base.distance),
        SweepAxis::InterDistance => (base.count, base.scale, v),
    };
    let max_count = config
        .values
        .iter()
        .map(|&v| factors(v).0)
        .max()
        .unwrap_or(0);
    if max_count > base.identities.len() {
        return Err(BenchError::PoolExhausted {
            needed: max_count,
            available: base.identities.len(),
        });
    }
    let fixed_width = match config.axis {
        SweepAxis::PeopleCount => None,
        _ => config
            .values
            .iter()
            .map(|&v| {
                let (c, s, d) = factors(v);
                RowLayout::new(c, base.height, None, s, d, RENDER_LINE_WIDTH).width
            })
            .max(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<String> = base
        .identities
        .choose_multiple(&mut rng, max_count)
        .cloned()
        .collect();
    config
        .values
        .iter()
        .map(|&v| {
            let (count, scale, distance) = factors(v);
            let layout = RowLayout::new(
                count,
                base.height,
                fixed_width,
                scale,
                distance,
                RENDER_LINE_WIDTH,
            );
            let instances = layout
                .poses()
                .into_iter()
                .zip(&ids)
                .map(|(pose, id)| InstanceSpec {
                    identity: id.clone(),
                    pose,
                })
                .collect();
            let mut scene = SceneSpec::new(
                Canvas {
                    h: layout.height,
                    w: layout.width,
                },
                base.setting.clone(),
                instances,
            );
            scene.seed = seed;
            scene.mode = base.mode;
            scene.sampler = base.sampler.clone();
            scene.harmony = base.harmony;
            Ok(scene)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub axis: SweepAxis,
    pub mode: CompositionMode,
    pub points: Vec<SweepPoint>,
}

impl SweepResult {
    pub fn table(&self) -> Vec<ReportRow> {
        self.points
            .iter()
            .map(|p| ReportRow {
                label: format!("{}={}", self.axis.as_str(), p.value),
                report: p.report.clone(),
            })
            .collect()
    }
}

/// Runs `base.mode` on every sweep value for every seed and reports per value.
pub fn robustness_sweep(
    config: &SweepConfig,
    base: &SweepBase,
    seeds: &[u64],
    factory: &dyn DenoiserFactory,
    schedule: &NoiseSchedule,
    eval: Evaluators<'_>,
) -> Result<SweepResult, BenchError> {
    if seeds.is_empty() {
        return Err(BenchError::InvalidManifest(
            "sweep needs at least one seed".into(),
        ));
    }
    let per_seed: Vec<Vec<SceneSpec>> = seeds
        .iter()
        .map(|&s| sweep_scenes(config, base, s))
        .collect::<Result<_, _>>()?;
    let points = (0..config.values.len())
        .map(|vi| {
            let scenes: Vec<SceneSpec> = per_seed.iter().map(|v| v[vi].clone()).collect();
            let run = run_benchmark(&scenes, &[base.mode], &[], factory, schedule, eval)?;
            Ok(SweepPoint {
                value: config.values[vi],
                report: run.summary[0].report.clone(),
            })
        })
        .collect::<Result<_, BenchError>>()?;
    Ok(SweepResult {
        axis: config.axis,
        mode: base.mode,
        points,
    })
}

// ---------------------------------------------------------------------------
// Reports and plots

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ReportFormat {
    Csv,
    Markdown,
}

const CSV_HEADER: [&str; 11] = [
    "label",
    "cio_sim",
    "cio_sigma",
    "cio_sigma_std",
    "cio_diff",
    "hnd",
    "ap",
    "ap_m",
    "ap_l",
    "instances",
    "images",
];

fn opt(v: Option<f64>, prec: usize) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.prec$}"))
}

/// The table as CSV or a Markdown table; an empty table yields just the header.
pub fn render_report(rows: &[ReportRow], format: ReportFormat) -> Result<String, BenchError> {
    match format {
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(CSV_HEADER)?;
            for r in rows {
                let m = &r.report;
                w.write_record([
                    r.label.clone(),
                    format!("{:.6}", m.cio_sim.mean),
                    format!("{:.6}", m.cio_sigma.mean),
                    format!("{:.6}", m.cio_sigma.std),
                    format!("{:.6}", m.cio_diff.mean),
                    format!("{:.6}", m.hnd.mean),
                    format!("{:.6}", m.ap),
                    opt(m.ap_m, 6),
                    opt(m.ap_l, 6),
                    m.cio_sigma.n.to_string(),
                    m.hnd.n.to_string(),
                ])?;
            }
            let bytes = w.into_inner().map_err(|e| BenchError::Io(e.into_error()))?;
            Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
        }
        ReportFormat::Markdown => {
            let mut s = String::from("| | CIO sim | CIO σ | CIO diff | HND | AP | AP M | AP L |\n");
            s.push_str("|---|---:|---:|---:|---:|---:|---:|---:|\n");
            for r in rows {
                let m = &r.report;
                s.push_str(&format!(
                    "| {} | {:.2} | {:.3} | {:.2} | {:.2} | {:.1} | {} | {} |\n",
                    r.label.replace('|', "\\|"),
                    m.cio_sim.mean,
                    m.cio_sigma.mean,
                    m.cio_diff.mean,
                    m.hnd.mean,
                    m.ap,
                    opt(m.ap_m, 1),
                    opt(m.ap_l, 1),
                ));
            }
            Ok(s)
        }
    }
}

pub fn write_report(
    rows: &[ReportRow],
    format: ReportFormat,
    path: &Path,
) -> Result<(), BenchError> {
    std::fs::write(path, render_report(rows, format)?)?;
    Ok(())
}

/// Metrics drawn by [`emit_plots`], with their file stems.
pub const PLOT_METRICS: [(&str, fn(&MetricsReport) -> f64); 5] = [
    ("cio_sim", |m| m.cio_sim.mean),
    ("cio_sigma", |m| m.cio_sigma.mean),
    ("cio_diff", |m| m.cio_diff.mean),
    ("hnd", |m| m.hnd.mean),
    ("ap", |m| m.ap),
];

/// One SVG line plot per metric over the sweep values, `{axis}_{metric}.svg`.
pub fn emit_plots(sweep: &SweepResult, dir: &Path) -> Result<Vec<PathBuf>, BenchError> {
    std::fs::create_dir_all(dir)?;
    PLOT_METRICS
        .iter()
        .map(|(name, get)| {
            let path = dir.join(format!("{}_{name}.svg", sweep.axis.as_str()));
            let pts: Vec<(f64, f64)> = sweep
                .points
                .iter()
                .map(|p| (p.value, get(&p.report)))
                .collect();
            std::fs::write(&path, line_plot_svg(sweep.axis.as_str(), name, &pts)?)?;
            Ok(path)
        })
        .collect()
}

/// Padded range covering `vals`, never empty.
fn span(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    });
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = if hi > lo {
        0.05 * (hi - lo)
    } else {
        0.5 * lo.abs().max(1.0)
    };
    (lo - pad, hi + pad)
}

fn line_plot_svg(x_label: &str, y_label: &str, pts: &[(f64, f64)]) -> Result<String, BenchError> {
    use plotters::prelude::*;
    let plot_err = |e: &dyn std::fmt::Display| BenchError::Plot(e.to_string());
    let mut buf = String::new();
    {
        let root = SVGBackend::with_string(&mut buf, (480, 320)).into_drawing_area();
        root.fill(&WHITE).map_err(|e| plot_err(&e))?;
        let (x0, x1) = span(pts.iter().map(|p| p.0));
        let (y0, y1) = span(pts.iter().map(|p| p.1));
        let mut chart = ChartBuilder::on(&root)
            .margin(12)
            .x_label_area_size(36)
            .y_label_area_size(48)
            .build_cartesian_2d(x0..x1, y0..y1)
            .map_err(|e| plot_err(&e))?;
        chart
            .configure_mesh()
            .x_desc(x_label)
            .y_desc(y_label)
            .draw()
            .map_err(|e| plot_err(&e))?;
        chart
            .draw_series(LineSeries::new(pts.iter().copied(), &BLUE))
            .map_err(|e| plot_err(&e))?;
        chart
            .draw_series(pts.iter().map(|&p| Circle::new(p, 3, BLUE.filled())))
            .map_err(|e| plot_err(&e))?;
        root.present().map_err(|e| plot_err(&e))?;
    }
    Ok(buf)
}

// ---------------------------------------------------------------------------
// Images

/// 8-bit RGB from a 3-channel tensor in `[-1, 1]`; values outside are clipped.
pub fn to_rgb8(image: &Tensor) -> image::RgbImage {
    let (h, w) = image.spatial();
    image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| {
            ((image.get(c, y as usize, x as usize).clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
        };
        image::Rgb([px(0), px(1), px(2)])
    })
}

pub fn from_rgb8(img: &image::RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = Tensor::zeros(3, h, w);
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            t.set(c, y as usize, x as usize, p[c] as f64 / 127.5 - 1.0);
        }
    }
    t
}

pub fn encode_png(image: &Tensor) -> Result<Vec<u8>, BenchError> {
    let mut out = std::io::Cursor::new(Vec::new());
    to_rgb8(image).write_to(&mut out, image::ImageOutputFormat::Png)?;
    Ok(out.into_inner())
}

pub fn decode_png(bytes: &[u8]) -> Result<Tensor, BenchError> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?;
    Ok(from_rgb8(&img.to_rgb8()))
}

pub fn save_png(image: &Tensor, path: &Path) -> Result<(), BenchError> {
    std::fs::write(path, encode_png(image)?)?;
    Ok(())
}

pub fn load_png(path: &Path) -> Result<Tensor, BenchError> {
    decode_png(&std::fs::read(path)?)
}

/// One mask as an 8-bit grayscale PNG, `round(255 · m)`.
pub fn encode_mask_png(mask: &[f64], height: usize, width: usize) -> Result<Vec<u8>, BenchError> {
    let img = image::GrayImage::from_fn(width as u32, height as u32, |x, y| {
        image::Luma([(mask[y as usize * width + x as usize].clamp(0.0, 1.0) * 255.0).round() as u8])
    });
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageOutputFormat::Png)?;
    Ok(out.into_inner())
}

/// Masks drawn as `Σ m_i · color_i`, so uncovered and evenly shared pixels
/// show the average of the instance colors.
pub fn mask_preview(level: &MaskLevel, colors: &[[f64; 3]]) -> Tensor {
    let (h, w) = level.shape();
    let mut t = Tensor::zeros(3, h, w);
    for (m, col) in level.masks().iter().zip(colors) {
        for c in 0..3 {
            for (dst, &wgt) in t.plane_mut(c).iter_mut().zip(m) {
                *dst += wgt * col[c];
            }
        }
    }
    t
}

/// Palette colors of the identities; unknown identities are drawn white.
pub fn preview_colors(identities: &[&str], palette: &Palette) -> Vec<[f64; 3]> {
    identities
        .iter()
        .map(|id| palette.color_of(id).unwrap_or([1.0, 1.0, 1.0]))
        .collect()
}
