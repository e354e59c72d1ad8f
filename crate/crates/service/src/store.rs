//! Filesystem job store.
//!
//! ```text
//! <root>/blobs/<sha256>   content-addressed images, masks, results
//! <root>/jobs.jsonl       one full job snapshot per line; the last line
//!                         for an id wins
//! ```
//!
//! Blobs are written to a temporary file and renamed into place, so a blob
//! path either holds complete bytes or does not exist.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::jobs::JobSpec;

const INDEX: &str = "jobs.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobState {
    /// Allowed edges: QUEUED→RUNNING→{DONE, FAILED}, plus RUNNING→QUEUED on
    /// restart recovery.
    pub fn can_become(self, next: JobState) -> bool {
        use JobState::*;
        matches!(
            (self, next),
            (Queued, Running) | (Running, Done) | (Running, Failed) | (Running, Queued)
        )
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub completed: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobResult {
    /// Blob hash of the PNG, which is also its SHA-256.
    pub png: String,
    pub sidecar: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobError {
    pub code: String,
    pub message: String,
    /// Denoising step at which a backend failed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredRequest {
    pub image: String,
    pub masks: Vec<String>,
    pub spec: JobSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditJob {
    pub id: String,
    /// Submission order, used for FIFO recovery.
    pub seq: u64,
    pub state: JobState,
    pub fingerprint: String,
    /// Milliseconds since the Unix epoch.
    pub created_at: u64,
    pub started_at: Option<u64>,
    pub finished_at: Option<u64>,
    pub progress: Progress,
    pub result: Option<JobResult>,
    pub error: Option<JobError>,
    pub request: StoredRequest,
}

pub fn now_ms() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug)]
pub struct Store {
    root: PathBuf,
    index: File,
    jobs: HashMap<String, EditJob>,
    next_seq: u64,
}

impl Store {
    /// Open or create a store. Jobs left RUNNING by a previous process are
    /// reset to QUEUED.
    pub fn open(root: impl AsRef<Path>) -> std::io::Result<Self> {
        let root = root.as_ref().to_owned();
        std::fs::create_dir_all(root.join("blobs"))?;
        let path = root.join(INDEX);
        let mut jobs = HashMap::new();
        if path.exists() {
            let lines: Vec<String> = BufReader::new(File::open(&path)?).lines().collect::<Result<_, _>>()?;
            let last = lines.len().saturating_sub(1);
            for (i, line) in lines.iter().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<EditJob>(line) {
                    Ok(job) => {
                        jobs.insert(job.id.clone(), job);
                    }
                    // A torn final line is what a crash mid-append leaves.
                    Err(e) if i == last => tracing::warn!("ignoring torn index line: {e}"),
                    Err(e) => {
                        return Err(std::io::Error::new(
                            std::io::ErrorKind::InvalidData,
                            format!("{}:{}: {e}", path.display(), i + 1),
                        ))
                    }
                }
            }
        }
        let index = OpenOptions::new().create(true).append(true).open(&path)?;
        let next_seq = jobs.values().map(|j| j.seq + 1).max().unwrap_or(0);
        let mut store = Self {
            root,
            index,
            jobs,
            next_seq,
        };
        let interrupted: Vec<String> = store
            .jobs
            .values()
            .filter(|j| j.state == JobState::Running)
            .map(|j| j.id.clone())
            .collect();
        for id in interrupted {
            tracing::info!(%id, "requeueing interrupted job");
            store.update(&id, |j| {
                j.state = JobState::Queued;
                j.started_at = None;
                j.progress.completed = 0;
            })?;
        }
        Ok(store)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn append(&mut self, job: &EditJob) -> std::io::Result<()> {
        let mut line = serde_json::to_vec(job).map_err(std::io::Error::other)?;
        line.push(b'\n');
        self.index.write_all(&line)?;
        self.index.sync_data()
    }

    pub fn blob_path(&self, hash: &str) -> PathBuf {
        self.root.join("blobs").join(hash)
    }

    /// Store `bytes` under their SHA-256.
    pub fn put_blob(&self, bytes: &[u8]) -> std::io::Result<String> {
        let hash = sha256_hex(bytes);
        let path = self.blob_path(&hash);
        if !path.exists() {
            let tmp = self.root.join("blobs").join(format!(".{hash}.{}", uuid::Uuid::new_v4()));
            {
                let mut f = File::create(&tmp)?;
                f.write_all(bytes)?;
                f.sync_all()?;
            }
            std::fs::rename(&tmp, &path)?;
        }
        Ok(hash)
    }

    pub fn blob(&self, hash: &str) -> std::io::Result<Vec<u8>> {
        std::fs::read(self.blob_path(hash))
    }

    pub fn get(&self, id: &str) -> Option<&EditJob> {
        self.jobs.get(id)
    }

    /// Queued jobs in submission order.
    pub fn queued(&self) -> Vec<String> {
        let mut q: Vec<&EditJob> = self.jobs.values().filter(|j| j.state == JobState::Queued).collect();
        q.sort_by_key(|j| j.seq);
        q.into_iter().map(|j| j.id.clone()).collect()
    }

    /// Most recent job with `fingerprint` created at or after `since`
    /// that has not failed.
    pub fn find_fingerprint(&self, fingerprint: &str, since: u64) -> Option<&EditJob> {
        self.jobs
            .values()
            .filter(|j| j.fingerprint == fingerprint && j.created_at >= since && j.state != JobState::Failed)
            .max_by_key(|j| j.seq)
    }

    /// Persist a new QUEUED job.
    pub fn create(&mut self, fingerprint: String, request: StoredRequest, total: usize) -> std::io::Result<EditJob> {
        let job = EditJob {
            id: uuid::Uuid::new_v4().simple().to_string(),
            seq: self.next_seq,
            state: JobState::Queued,
            fingerprint,
            created_at: now_ms(),
            started_at: None,
            finished_at: None,
            progress: Progress { completed: 0, total },
            result: None,
            error: None,
            request,
        };
        self.next_seq += 1;
        self.append(&job)?;
        self.jobs.insert(job.id.clone(), job.clone());
        Ok(job)
    }

    /// Apply `f` to a job and persist it. State changes must follow
    /// [`JobState::can_become`]; DONE requires a result blob and FAILED an
    /// error.
    pub fn update(&mut self, id: &str, f: impl FnOnce(&mut EditJob)) -> std::io::Result<EditJob> {
        let old = self
            .jobs
            .get(id)
            .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::NotFound, format!("no job `{id}`")))?;
        let mut job = old.clone();
        f(&mut job);
        let bad = |msg: String| std::io::Error::new(std::io::ErrorKind::InvalidInput, msg);
        if job.state != old.state && !old.state.can_become(job.state) {
            return Err(bad(format!("job `{id}`: {:?} -> {:?} is not allowed", old.state, job.state)));
        }
        match job.state {
            JobState::Done => {
                let ok = job.result.as_ref().is_some_and(|r| self.blob_path(&r.png).is_file());
                if !ok {
                    return Err(bad(format!("job `{id}` is DONE without a stored result")));
                }
            }
            JobState::Failed => {
                if job.error.as_ref().is_none_or(|e| e.message.is_empty()) {
                    return Err(bad(format!("job `{id}` is FAILED without error detail")));
                }
            }
            _ => {}
        }
        self.append(&job)?;
        self.jobs.insert(id.to_owned(), job.clone());
        Ok(job)
    }
}
