//! Jobs persisted one JSON file per job under `DATA_DIR/jobs`, with artifacts
//! under `DATA_DIR/artifacts/{id}`.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use finecontrol::prompting::SceneSpec;
use serde::{Deserialize, Serialize};

pub const JOB_RECORD_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobState {
    /// Transitions a job may take; everything else is rejected.
    pub fn can_become(self, next: JobState) -> bool {
        matches!(
            (self, next),
            (Self::Queued, Self::Running)
                | (Self::Running, Self::Done)
                | (Self::Running, Self::Failed)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArtifactKind {
    Image,
    Masks,
    Trace,
    Metrics,
}

impl ArtifactKind {
    pub const ALL: [ArtifactKind; 4] = [Self::Image, Self::Masks, Self::Trace, Self::Metrics];

    pub fn file_name(self) -> &'static str {
        match self {
            Self::Image => "image.png",
            Self::Masks => "masks.png",
            Self::Trace => "trace.json",
            Self::Metrics => "metrics.json",
        }
    }

    pub fn content_type(self) -> &'static str {
        match self {
            Self::Image | Self::Masks => "image/png",
            Self::Trace | Self::Metrics => "application/json",
        }
    }
}

impl std::str::FromStr for ArtifactKind {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        Self::ALL
            .into_iter()
            .find(|k| k.file_name().split('.').next() == Some(s))
            .ok_or(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub version: u32,
    pub id: String,
    pub state: JobState,
    pub scene: SceneSpec,
    /// Paths relative to the data directory.
    #[serde(default)]
    pub artifacts: BTreeMap<ArtifactKind, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub idempotency_key: Option<String>,
    /// Milliseconds since the Unix epoch.
    pub created_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub started_ms: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finished_ms: Option<u64>,
}

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("unknown job {0}")]
    UnknownJob(String),
    #[error("job {id} cannot go from {from:?} to {to:?}")]
    BadTransition {
        id: String,
        from: JobState,
        to: JobState,
    },
    #[error("{state:?} requires {what}")]
    Incomplete { state: JobState, what: &'static str },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("corrupt job file {path}: {source}")]
    Corrupt {
        path: PathBuf,
        source: serde_json::Error,
    },
}

pub fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

/// In-memory view of all jobs backed by their files.
///
/// Readers get `Arc` snapshots; every change goes through [`JobStore::transition`]
/// or [`JobStore::create`], which write the file before publishing.
pub struct JobStore {
    root: PathBuf,
    jobs: RwLock<HashMap<String, Arc<JobRecord>>>,
    keys: Mutex<HashMap<String, String>>,
}

/// What [`JobStore::open`] found on disk.
pub struct Recovered {
    pub store: JobStore,
    /// QUEUED jobs in submission order.
    pub queued: Vec<String>,
    /// RUNNING jobs that were marked FAILED.
    pub interrupted: Vec<String>,
}

impl JobStore {
    pub fn open(root: &Path) -> Result<Recovered, StoreError> {
        std::fs::create_dir_all(root.join("jobs"))?;
        std::fs::create_dir_all(root.join("artifacts"))?;
        let mut records = Vec::new();
        for entry in std::fs::read_dir(root.join("jobs"))? {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("json") {
                continue;
            }
            let rec: JobRecord =
                serde_json::from_slice(&std::fs::read(&path)?).map_err(|source| {
                    StoreError::Corrupt {
                        path: path.clone(),
                        source,
                    }
                })?;
            records.push(rec);
        }
        records.sort_by(|a, b| (a.created_ms, &a.id).cmp(&(b.created_ms, &b.id)));
        let store = JobStore {
            root: root.to_path_buf(),
            jobs: RwLock::new(HashMap::new()),
            keys: Mutex::new(HashMap::new()),
        };
        let (mut queued, mut interrupted) = (Vec::new(), Vec::new());
        for mut rec in records {
            match rec.state {
                JobState::Queued => queued.push(rec.id.clone()),
                JobState::Running => {
                    rec.state = JobState::Failed;
                    rec.error = Some("interrupted by a service restart".into());
                    rec.finished_ms = Some(now_ms());
                    store.write(&rec)?;
                    interrupted.push(rec.id.clone());
                }
                JobState::Done | JobState::Failed => {}
            }
            if let Some(k) = &rec.idempotency_key {
                store.keys.lock().unwrap().insert(k.clone(), rec.id.clone());
            }
            store
                .jobs
                .write()
                .unwrap()
                .insert(rec.id.clone(), Arc::new(rec));
        }
        Ok(Recovered {
            store,
            queued,
            interrupted,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn get(&self, id: &str) -> Option<Arc<JobRecord>> {
        self.jobs.read().unwrap().get(id).cloned()
    }

    /// Creates a QUEUED job, or returns the job already holding `key`.
    /// The flag is true when a new job was created.
    pub fn create(
        &self,
        scene: SceneSpec,
        key: Option<String>,
    ) -> Result<(Arc<JobRecord>, bool), StoreError> {
        let mut keys = self.keys.lock().unwrap();
        if let Some(id) = key.as_ref().and_then(|k| keys.get(k)) {
            let rec = self
                .get(id)
                .ok_or_else(|| StoreError::UnknownJob(id.clone()))?;
            return Ok((rec, false));
        }
        let rec = JobRecord {
            version: JOB_RECORD_VERSION,
            id: uuid::Uuid::new_v4().simple().to_string(),
            state: JobState::Queued,
            scene,
            artifacts: BTreeMap::new(),
            error: None,
            idempotency_key: key.clone(),
            created_ms: now_ms(),
            started_ms: None,
            finished_ms: None,
        };
        self.write(&rec)?;
        if let Some(k) = key {
            keys.insert(k, rec.id.clone());
        }
        let rec = Arc::new(rec);
        self.jobs
            .write()
            .unwrap()
            .insert(rec.id.clone(), rec.clone());
        Ok((rec, true))
    }

    /// Moves a job to `next`, letting `edit` fill in artifacts or the error.
    pub fn transition(
        &self,
        id: &str,
        next: JobState,
        edit: impl FnOnce(&mut JobRecord),
    ) -> Result<Arc<JobRecord>, StoreError> {
        let mut rec = (*self
            .get(id)
            .ok_or_else(|| StoreError::UnknownJob(id.into()))?)
        .clone();
        if !rec.state.can_become(next) {
            return Err(StoreError::BadTransition {
                id: id.into(),
                from: rec.state,
                to: next,
            });
        }
        rec.state = next;
        match next {
            JobState::Running => rec.started_ms = Some(now_ms()),
            _ => rec.finished_ms = Some(now_ms()),
        }
        edit(&mut rec);
        if next == JobState::Done && !rec.artifacts.contains_key(&ArtifactKind::Image) {
            return Err(StoreError::Incomplete {
                state: next,
                what: "an image artifact",
            });
        }
        if next == JobState::Failed && rec.error.is_none() {
            return Err(StoreError::Incomplete {
                state: next,
                what: "an error message",
            });
        }
        self.write(&rec)?;
        let rec = Arc::new(rec);
        self.jobs.write().unwrap().insert(id.into(), rec.clone());
        Ok(rec)
    }

    /// Directory for a job's artifacts, relative to the data directory.
    pub fn artifact_dir(&self, id: &str) -> PathBuf {
        Path::new("artifacts").join(id)
    }

    pub fn read_artifact(
        &self,
        rec: &JobRecord,
        kind: ArtifactKind,
    ) -> Option<std::io::Result<Vec<u8>>> {
        rec.artifacts
            .get(&kind)
            .map(|rel| std::fs::read(self.root.join(rel)))
    }

    fn write(&self, rec: &JobRecord) -> Result<(), StoreError> {
        let path = self.root.join("jobs").join(format!("{}.json", rec.id));
        let tmp = path.with_extension("json.tmp");
        std::fs::write(
            &tmp,
            serde_json::to_vec_pretty(rec).expect("job records serialize"),
        )?;
        std::fs::rename(&tmp, &path)?;
        Ok(())
    }
}
