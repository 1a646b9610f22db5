//! Scene descriptions, per-instance prompts and global prompt parsing.
//!
//! Global prompts follow a small grammar: clauses separated by commas or
//! `" and "`, each identity clause optionally ending in a position phrase
//! (`on the left`, `in the middle`, `on the right`, `second from left`,
//! `third from the right`, ...). A trailing clause without a position
//! phrase, beyond the number of poses, is the setting.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::composer::{CompositionMode, HarmonyParams};
use crate::diffusion::SamplerConfig;
use crate::pose_geometry::{Pose2D, PoseFormat};

pub const SCENE_SPEC_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PromptError {
    #[error("identity text is empty")]
    EmptyIdentity,
    #[error("{clauses} identity clauses for {poses} poses")]
    CountMismatch { clauses: usize, poses: usize },
    #[error("clauses {first:?} and {second:?} both claim position {slot}")]
    AmbiguousPosition {
        first: String,
        second: String,
        slot: usize,
    },
    #[error("position in {clause:?} does not exist among {poses} poses")]
    PositionOutOfRange { clause: String, poses: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Canvas {
    pub h: usize,
    pub w: usize,
}

impl Default for Canvas {
    fn default() -> Self {
        Self { h: 64, w: 64 }
    }
}

/// Sampler block of the scene JSON; the seed lives at the scene level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerSettings {
    pub steps: usize,
    pub eta: f64,
    pub guidance: f64,
}

impl Default for SamplerSettings {
    fn default() -> Self {
        let d = SamplerConfig::default();
        Self {
            steps: d.num_steps,
            eta: d.eta,
            guidance: d.guidance_scale,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceSpec {
    pub identity: String,
    pub pose: Pose2D,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub version: u32,
    pub canvas: Canvas,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub mode: CompositionMode,
    #[serde(default)]
    pub sampler: SamplerSettings,
    #[serde(default)]
    pub harmony: HarmonyParams,
    #[serde(default)]
    pub setting: String,
    pub instances: Vec<InstanceSpec>,
}

impl SceneSpec {
    pub fn new(canvas: Canvas, setting: impl Into<String>, instances: Vec<InstanceSpec>) -> Self {
        Self {
            version: SCENE_SPEC_VERSION,
            canvas,
            seed: 0,
            mode: CompositionMode::default(),
            sampler: SamplerSettings::default(),
            harmony: HarmonyParams::default(),
            setting: setting.into(),
            instances,
        }
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            num_steps: self.sampler.steps,
            eta: self.sampler.eta,
            seed: self.seed,
            guidance_scale: self.sampler.guidance,
        }
    }

    /// Branch prompt of instance `i`.
    pub fn instance_prompt(&self, i: usize) -> Result<String, PromptError> {
        build_instance_prompt(&self.instances[i].identity, &self.setting)
    }

    /// Instance indices sorted by centroid x, ties by index.
    pub fn left_to_right(&self) -> Vec<usize> {
        let poses: Vec<&Pose2D> = self.instances.iter().map(|i| &i.pose).collect();
        left_to_right(&poses)
    }

    /// Comma-joined identities in left-to-right order, then the setting.
    pub fn global_prompt(&self) -> String {
        let mut clauses: Vec<&str> = self
            .left_to_right()
            .into_iter()
            .map(|i| self.instances[i].identity.trim())
            .collect();
        if !self.setting.trim().is_empty() {
            clauses.push(self.setting.trim());
        }
        clauses.join(", ")
    }
}

/// `"{identity}, {setting}"`, or just the identity when the setting is blank.
pub fn build_instance_prompt(identity: &str, setting: &str) -> Result<String, PromptError> {
    let identity = identity.trim();
    if identity.is_empty() {
        return Err(PromptError::EmptyIdentity);
    }
    let setting = setting.trim();
    Ok(if setting.is_empty() {
        identity.to_string()
    } else {
        format!("{identity}, {setting}")
    })
}

pub fn left_to_right(poses: &[&Pose2D]) -> Vec<usize> {
    let xs: Vec<f64> = poses
        .iter()
        .map(|p| p.centroid().map(|c| c.0).unwrap_or(f64::INFINITY))
        .collect();
    let mut order: Vec<usize> = (0..poses.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]).then(a.cmp(&b)));
    order
}

/// A position phrase: `FromLeft(1)` is leftmost, `FromRight(1)` rightmost.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Position {
    FromLeft(usize),
    FromRight(usize),
    Middle,
}

impl Position {
    pub fn slot(self, n: usize) -> Option<usize> {
        match self {
            Position::FromLeft(k) if (1..=n).contains(&k) => Some(k - 1),
            Position::FromRight(k) if (1..=n).contains(&k) => Some(n - k),
            Position::Middle if n > 0 => Some((n - 1) / 2),
            _ => None,
        }
    }
}

const ORDINALS: [(&str, usize); 5] = [
    ("second", 2),
    ("third", 3),
    ("fourth", 4),
    ("fifth", 5),
    ("sixth", 6),
];

/// Splits a trailing position phrase off a clause.
pub fn split_position(clause: &str) -> (String, Option<Position>) {
    let lower = clause.to_lowercase();
    let mut phrases: Vec<(String, Position)> = vec![
        ("on the left".into(), Position::FromLeft(1)),
        ("on the right".into(), Position::FromRight(1)),
        ("in the middle".into(), Position::Middle),
        ("in the center".into(), Position::Middle),
        ("in the centre".into(), Position::Middle),
    ];
    for (word, k) in ORDINALS {
        for side in ["left", "right"] {
            let pos = if side == "left" {
                Position::FromLeft(k)
            } else {
                Position::FromRight(k)
            };
            phrases.push((format!("{word} from the {side}"), pos));
            phrases.push((format!("{word} from {side}"), pos));
        }
    }
    phrases.sort_by_key(|(p, _)| std::cmp::Reverse(p.len()));
    for (phrase, pos) in phrases {
        if let Some(head) = lower.strip_suffix(&phrase) {
            if head.is_empty() || head.ends_with(' ') {
                let head = if lower.len() == clause.len() {
                    &clause[..head.len()]
                } else {
                    head
                };
                return (head.trim().to_string(), Some(pos));
            }
        }
    }
    (clause.trim().to_string(), None)
}

/// Clauses separated by commas or the word `and`.
pub fn split_clauses(global: &str) -> Vec<String> {
    global
        .split(',')
        .flat_map(|part| part.split(" and "))
        .map(str::trim)
        .filter(|c| !c.is_empty())
        .map(String::from)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedPrompt {
    /// `(pose index, identity text)` in pose-list order.
    pub bindings: Vec<(usize, String)>,
    pub setting: String,
}

/// Binds identity clauses to poses by stated position, then left to right.
pub fn parse_global_prompt(global: &str, poses: &[&Pose2D]) -> Result<ParsedPrompt, PromptError> {
    let n = poses.len();
    let mut clauses: Vec<(String, Option<Position>)> = split_clauses(global)
        .iter()
        .map(|c| split_position(c))
        .collect();
    let mut setting = String::new();
    if clauses.len() == n + 1 && clauses.last().is_some_and(|(_, p)| p.is_none()) {
        setting = clauses.pop().expect("non-empty").0;
    }
    if clauses.len() != n {
        return Err(PromptError::CountMismatch {
            clauses: clauses.len(),
            poses: n,
        });
    }
    let order = left_to_right(poses);
    let mut slot_owner: Vec<Option<usize>> = vec![None; n];
    for (ci, (text, pos)) in clauses.iter().enumerate() {
        let Some(pos) = pos else { continue };
        let slot = pos.slot(n).ok_or_else(|| PromptError::PositionOutOfRange {
            clause: text.clone(),
            poses: n,
        })?;
        if let Some(prev) = slot_owner[slot] {
            return Err(PromptError::AmbiguousPosition {
                first: clauses[prev].0.clone(),
                second: text.clone(),
                slot,
            });
        }
        slot_owner[slot] = Some(ci);
    }
    let free_slots: Vec<usize> = (0..n).filter(|s| slot_owner[*s].is_none()).collect();
    let mut free = free_slots.into_iter();
    for (ci, (_, pos)) in clauses.iter().enumerate() {
        if pos.is_none() {
            let slot = free.next().expect("free slots match unpositioned clauses");
            slot_owner[slot] = Some(ci);
        }
    }
    let mut bindings: Vec<(usize, String)> = slot_owner
        .iter()
        .enumerate()
        .map(|(slot, ci)| {
            (
                order[slot],
                clauses[ci.expect("every slot bound")].0.clone(),
            )
        })
        .collect();
    bindings.sort_by_key(|(i, _)| *i);
    Ok(ParsedPrompt { bindings, setting })
}

/// One schema violation, located by JSON pointer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemaViolation {
    pub pointer: String,
    pub message: String,
}

fn violation(pointer: impl Into<String>, message: impl Into<String>) -> SchemaViolation {
    SchemaViolation {
        pointer: pointer.into(),
        message: message.into(),
    }
}

/// The published JSON Schema of [`SceneSpec`].
pub fn scene_spec_schema() -> Value {
    let keypoint = serde_json::json!({
        "type": "array", "minItems": 3, "maxItems": 3,
        "items": {"type": "number"}
    });
    serde_json::json!({
        "$schema": "https://json-schema.org/draft/2020-12/schema",
        "$id": "urn:finecontrol:scene-spec:v1",
        "type": "object",
        "required": ["version", "canvas", "instances"],
        "additionalProperties": false,
        "properties": {
            "version": {"const": SCENE_SPEC_VERSION},
            "canvas": {
                "type": "object", "required": ["h", "w"], "additionalProperties": false,
                "properties": {
                    "h": {"type": "integer", "minimum": 4, "maximum": 4096, "multipleOf": 4},
                    "w": {"type": "integer", "minimum": 4, "maximum": 4096, "multipleOf": 4}
                }
            },
            "seed": {"type": "integer", "minimum": 0},
            "mode": {"enum": ["FINECONTROL", "X_COMPOSE", "H_V2", "GLOBAL"]},
            "sampler": {
                "type": "object", "additionalProperties": false,
                "properties": {
                    "steps": {"type": "integer", "minimum": 1, "maximum": 1000},
                    "eta": {"type": "number", "minimum": 0},
                    "guidance": {"type": "number"}
                }
            },
            "harmony": {
                "type": "object", "additionalProperties": false,
                "properties": {
                    "tau": {"type": "number", "exclusiveMinimum": 0},
                    "hard_fraction": {"type": "number", "minimum": 0, "maximum": 1}
                }
            },
            "setting": {"type": "string"},
            "instances": {
                "type": "array", "minItems": 1,
                "items": {
                    "type": "object", "required": ["identity", "pose"], "additionalProperties": false,
                    "properties": {
                        "identity": {"type": "string", "minLength": 1},
                        "pose": {
                            "type": "object", "required": ["format", "keypoints"],
                            "properties": {
                                "format": {"enum": ["COCO17", "OPENPOSE18"]},
                                "keypoints": {"type": "array", "items": keypoint},
                                "out_of_frame": {"type": "boolean"}
                            }
                        }
                    }
                }
            }
        }
    })
}

fn escape(token: &str) -> String {
    token.replace('~', "~0").replace('/', "~1")
}

struct Checker {
    errors: Vec<SchemaViolation>,
}

impl Checker {
    fn object<'v>(
        &mut self,
        v: &'v Value,
        ptr: &str,
        required: &[&str],
        allowed: &[&str],
    ) -> Option<&'v serde_json::Map<String, Value>> {
        let Some(obj) = v.as_object() else {
            self.errors.push(violation(ptr, "expected an object"));
            return None;
        };
        for key in required {
            if !obj.contains_key(*key) {
                self.errors.push(violation(
                    format!("{ptr}/{}", escape(key)),
                    "required property is missing",
                ));
            }
        }
        for key in obj.keys() {
            if !allowed.contains(&key.as_str()) {
                self.errors.push(violation(
                    format!("{ptr}/{}", escape(key)),
                    "unknown property",
                ));
            }
        }
        Some(obj)
    }

    fn integer(&mut self, v: &Value, ptr: &str, min: u64, max: Option<u64>) -> Option<u64> {
        match v.as_u64() {
            Some(x) if x >= min && max.map_or(true, |m| x <= m) => Some(x),
            Some(_) => {
                let range = match max {
                    Some(m) => format!("must lie in {min}..={m}"),
                    None => format!("must be >= {min}"),
                };
                self.errors.push(violation(ptr, range));
                None
            }
            None => {
                self.errors
                    .push(violation(ptr, "expected a non-negative integer"));
                None
            }
        }
    }

    fn number(&mut self, v: &Value, ptr: &str, ok: impl Fn(f64) -> bool, rule: &str) {
        match v.as_f64() {
            Some(x) if x.is_finite() && ok(x) => {}
            Some(_) => self.errors.push(violation(ptr, rule)),
            None => self.errors.push(violation(ptr, "expected a number")),
        }
    }
}

/// Validates a scene document, reporting every violation with its JSON pointer.
pub fn validate_scene_json(doc: &Value) -> Result<SceneSpec, Vec<SchemaViolation>> {
    let mut c = Checker { errors: Vec::new() };
    let top = [
        "version",
        "canvas",
        "seed",
        "mode",
        "sampler",
        "harmony",
        "setting",
        "instances",
    ];
    let Some(obj) = c.object(doc, "", &["version", "canvas", "instances"], &top) else {
        return Err(c.errors);
    };
    if let Some(v) = obj.get("version") {
        if v.as_u64() != Some(SCENE_SPEC_VERSION as u64) {
            c.errors.push(violation(
                "/version",
                format!("must equal {SCENE_SPEC_VERSION}"),
            ));
        }
    }
    let mut canvas = None;
    if let Some(v) = obj.get("canvas") {
        if let Some(cv) = c.object(v, "/canvas", &["h", "w"], &["h", "w"]) {
            let mut dims = [None; 2];
            for (i, key) in ["h", "w"].iter().enumerate() {
                if let Some(x) = cv.get(*key) {
                    let ptr = format!("/canvas/{key}");
                    if let Some(n) = c.integer(x, &ptr, 4, Some(4096)) {
                        if n % 4 != 0 {
                            c.errors.push(violation(ptr, "must be a multiple of 4"));
                        } else {
                            dims[i] = Some(n as usize);
                        }
                    }
                }
            }
            // Keypoint bounds are only checked against a valid canvas.
            canvas = dims[0].zip(dims[1]);
        }
    }
    if let Some(v) = obj.get("seed") {
        c.integer(v, "/seed", 0, None);
    }
    if let Some(v) = obj.get("mode") {
        if serde_json::from_value::<CompositionMode>(v.clone()).is_err() {
            c.errors.push(violation(
                "/mode",
                "must be one of FINECONTROL, X_COMPOSE, H_V2, GLOBAL",
            ));
        }
    }
    if let Some(v) = obj.get("sampler") {
        if let Some(s) = c.object(v, "/sampler", &[], &["steps", "eta", "guidance"]) {
            if let Some(x) = s.get("steps") {
                c.integer(x, "/sampler/steps", 1, Some(1000));
            }
            if let Some(x) = s.get("eta") {
                c.number(x, "/sampler/eta", |e| e >= 0.0, "must be >= 0");
            }
            if let Some(x) = s.get("guidance") {
                c.number(x, "/sampler/guidance", |_| true, "must be finite");
            }
        }
    }
    if let Some(v) = obj.get("harmony") {
        if let Some(h) = c.object(v, "/harmony", &[], &["tau", "hard_fraction"]) {
            if let Some(x) = h.get("tau") {
                c.number(x, "/harmony/tau", |t| t > 0.0, "must be > 0");
            }
            if let Some(x) = h.get("hard_fraction") {
                c.number(
                    x,
                    "/harmony/hard_fraction",
                    |f| (0.0..=1.0).contains(&f),
                    "must lie in [0, 1]",
                );
            }
        }
    }
    if let Some(v) = obj.get("setting") {
        if !v.is_string() {
            c.errors.push(violation("/setting", "expected a string"));
        }
    }
    if let Some(v) = obj.get("instances") {
        match v.as_array() {
            None => c.errors.push(violation("/instances", "expected an array")),
            Some(items) if items.is_empty() => c
                .errors
                .push(violation("/instances", "at least one instance is required")),
            Some(items) => {
                for (i, item) in items.iter().enumerate() {
                    check_instance(&mut c, item, &format!("/instances/{i}"), canvas);
                }
            }
        }
    }
    if !c.errors.is_empty() {
        return Err(c.errors);
    }
    serde_json::from_value(doc.clone()).map_err(|e| vec![violation("", e.to_string())])
}

fn check_instance(c: &mut Checker, item: &Value, ptr: &str, canvas: Option<(usize, usize)>) {
    let Some(obj) = c.object(item, ptr, &["identity", "pose"], &["identity", "pose"]) else {
        return;
    };
    if let Some(id) = obj.get("identity") {
        match id.as_str() {
            Some(s) if !s.trim().is_empty() => {}
            Some(_) => c
                .errors
                .push(violation(format!("{ptr}/identity"), "must not be empty")),
            None => c
                .errors
                .push(violation(format!("{ptr}/identity"), "expected a string")),
        }
    }
    let Some(pose) = obj.get("pose") else { return };
    let pptr = format!("{ptr}/pose");
    let Some(pobj) = c.object(
        pose,
        &pptr,
        &["format", "keypoints"],
        &["format", "keypoints", "out_of_frame"],
    ) else {
        return;
    };
    let format = pobj
        .get("format")
        .map(|f| serde_json::from_value::<PoseFormat>(f.clone()));
    let format = match format {
        Some(Ok(f)) => Some(f),
        Some(Err(_)) => {
            c.errors.push(violation(
                format!("{pptr}/format"),
                "must be COCO17 or OPENPOSE18",
            ));
            None
        }
        None => None,
    };
    let Some(kps) = pobj.get("keypoints") else {
        return;
    };
    let Some(kps) = kps.as_array() else {
        c.errors
            .push(violation(format!("{pptr}/keypoints"), "expected an array"));
        return;
    };
    if let Some(f) = format {
        if kps.len() != f.keypoint_count() {
            c.errors.push(violation(
                format!("{pptr}/keypoints"),
                format!(
                    "{f:?} needs {} keypoints, got {}",
                    f.keypoint_count(),
                    kps.len()
                ),
            ));
        }
    }
    let out_of_frame = pobj
        .get("out_of_frame")
        .and_then(Value::as_bool)
        .unwrap_or(false);
    let mut visible = 0;
    for (k, kp) in kps.iter().enumerate() {
        let kptr = format!("{pptr}/keypoints/{k}");
        let triple = kp.as_array().filter(|a| a.len() == 3);
        let Some(vals) =
            triple.and_then(|a| a.iter().map(Value::as_f64).collect::<Option<Vec<f64>>>())
        else {
            c.errors.push(violation(kptr, "expected [x, y, v] numbers"));
            continue;
        };
        if !vals.iter().all(|v| v.is_finite()) {
            c.errors.push(violation(kptr, "coordinates must be finite"));
            continue;
        }
        if vals[2] > 0.0 {
            visible += 1;
            if let (Some((h, w)), false) = (canvas, out_of_frame) {
                if vals[0] < 0.0
                    || vals[1] < 0.0
                    || vals[0] > (w as f64 - 1.0)
                    || vals[1] > (h as f64 - 1.0)
                {
                    c.errors.push(violation(
                        kptr,
                        format!("visible keypoint outside the {h}x{w} canvas"),
                    ));
                }
            }
        }
    }
    if visible < 2 {
        c.errors.push(violation(
            format!("{pptr}/keypoints"),
            "at least 2 visible keypoints are required",
        ));
    }
}
