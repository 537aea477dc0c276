//! Generation jobs on a bounded pool of worker threads.
//!
//! State and progress live in atomics so status reads never wait on a
//! running job. Transitions only move forward:
//! queued → running → done | failed, or queued → failed.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicU8, AtomicUsize, Ordering};
use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::{Arc, Mutex, RwLock};

use serde::Serialize;

use mf_core::conditioning::ControlSpec;
use mf_core::io::write_frames;
use mf_dit::generate::{load_model, prepare_spec};
use mf_dit::train::{CONFIG_FILE, WEIGHTS_FILE};
use mf_dit::{generate_with_progress, Branches, DitError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobState {
    fn from_u8(v: u8) -> Self {
        match v {
            0 => Self::Queued,
            1 => Self::Running,
            2 => Self::Done,
            _ => Self::Failed,
        }
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, Self::Done | Self::Failed)
    }
}

#[derive(Clone, Debug)]
pub struct JobRequest {
    pub spec: ControlSpec,
    /// Directory the spec's image paths resolve against.
    pub base_dir: PathBuf,
    /// Training run directory.
    pub checkpoint: PathBuf,
    pub steps: usize,
    pub branches: Branches,
}

pub struct Job {
    pub id: String,
    pub dir: PathBuf,
    state: AtomicU8,
    progress_bits: AtomicU64,
    cancel: AtomicBool,
    frames: AtomicUsize,
    error: Mutex<Option<String>>,
    request: JobRequest,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct JobSnapshot {
    pub id: String,
    pub state: JobState,
    pub progress: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub frames: usize,
    pub output_dir: PathBuf,
}

impl Job {
    pub fn state(&self) -> JobState {
        JobState::from_u8(self.state.load(Ordering::Acquire))
    }

    pub fn progress(&self) -> f64 {
        f64::from_bits(self.progress_bits.load(Ordering::Acquire))
    }

    fn set_progress(&self, p: f64) {
        // never move backwards
        let bits = p.to_bits();
        self.progress_bits.fetch_max(bits, Ordering::AcqRel);
    }

    /// Moves from `from` to `to`; false when the job was elsewhere.
    fn transition(&self, from: JobState, to: JobState) -> bool {
        self.state
            .compare_exchange(from as u8, to as u8, Ordering::AcqRel, Ordering::Acquire)
            .is_ok()
    }

    fn fail(&self, reason: String) {
        for from in [JobState::Queued, JobState::Running] {
            if self.transition(from, JobState::Failed) {
                *self.error.lock().expect("job error lock") = Some(reason);
                return;
            }
        }
    }

    pub fn snapshot(&self) -> JobSnapshot {
        JobSnapshot {
            id: self.id.clone(),
            state: self.state(),
            progress: self.progress(),
            error: self.error.lock().expect("job error lock").clone(),
            frames: self.frames.load(Ordering::Acquire),
            output_dir: self.dir.clone(),
        }
    }

    /// Path of output frame `k`, once the job is done.
    pub fn frame_path(&self, k: usize) -> Option<PathBuf> {
        (self.state() == JobState::Done && k < self.frames.load(Ordering::Acquire))
            .then(|| self.dir.join("frames").join(format!("{k:03}.png")))
    }

    fn run(&self) {
        if self.cancel.load(Ordering::Acquire) || !self.transition(JobState::Queued, JobState::Running) {
            return;
        }
        match self.execute() {
            Ok(n) => {
                self.frames.store(n, Ordering::Release);
                self.set_progress(1.0);
                self.transition(JobState::Running, JobState::Done);
            }
            Err(DitError::Cancelled) => self.fail("cancelled".into()),
            Err(e) => self.fail(e.to_string()),
        }
    }

    fn execute(&self) -> Result<usize, DitError> {
        let r = &self.request;
        let (model, store) = load_model(&r.checkpoint, None)?;
        let (_, cond) = prepare_spec(&model, &r.spec, &r.base_dir)?;
        let steps = r.steps;
        let frames = generate_with_progress(&model, &store, &cond, steps, r.spec.seed, r.branches, &mut |k| {
            self.set_progress(k as f64 / (steps + 1) as f64);
            !self.cancel.load(Ordering::Acquire)
        })?;
        let dir = self.dir.join("frames");
        write_frames(&dir, &frames).map_err(|e| DitError::Format {
            path: dir,
            message: e.to_string(),
        })?;
        Ok(frames.len())
    }
}

/// Why a run directory cannot serve generation, if it cannot.
pub fn checkpoint_problem(dir: &Path) -> Option<String> {
    for f in [CONFIG_FILE, WEIGHTS_FILE] {
        if !dir.join(f).is_file() {
            return Some(format!("checkpoint {} has no {f}", dir.display()));
        }
    }
    None
}

pub struct JobManager {
    root: PathBuf,
    jobs: RwLock<HashMap<String, Arc<Job>>>,
    next: AtomicU64,
    queue: Mutex<Sender<Arc<Job>>>,
}

impl JobManager {
    /// Starts `workers` threads; job outputs go under `root/<id>`.
    pub fn new(root: PathBuf, workers: usize) -> Arc<Self> {
        let (tx, rx) = channel::<Arc<Job>>();
        let rx = Arc::new(Mutex::new(rx));
        for _ in 0..workers.max(1) {
            let rx: Arc<Mutex<Receiver<Arc<Job>>>> = Arc::clone(&rx);
            std::thread::spawn(move || loop {
                let job = match rx.lock().expect("job queue lock").recv() {
                    Ok(j) => j,
                    Err(_) => return,
                };
                job.run();
            });
        }
        Arc::new(Self {
            root,
            jobs: RwLock::new(HashMap::new()),
            next: AtomicU64::new(1),
            queue: Mutex::new(tx),
        })
    }

    /// Queues a job. A missing checkpoint yields a job that has already
    /// failed, with the reason.
    pub fn submit(&self, request: JobRequest) -> Arc<Job> {
        let id = format!("job-{:06}", self.next.fetch_add(1, Ordering::Relaxed));
        let problem = checkpoint_problem(&request.checkpoint)
            .or_else(|| (request.steps == 0).then(|| "steps must be at least 1".to_string()));
        let job = Arc::new(Job {
            dir: self.root.join(&id),
            id: id.clone(),
            state: AtomicU8::new(JobState::Queued as u8),
            progress_bits: AtomicU64::new(0f64.to_bits()),
            cancel: AtomicBool::new(false),
            frames: AtomicUsize::new(0),
            error: Mutex::new(None),
            request,
        });
        self.jobs.write().expect("job table lock").insert(id, Arc::clone(&job));
        match problem {
            Some(p) => job.fail(p),
            None => {
                let sent = self.queue.lock().expect("job queue lock").send(Arc::clone(&job));
                if sent.is_err() {
                    job.fail("no worker available".into());
                }
            }
        }
        job
    }

    pub fn get(&self, id: &str) -> Option<Arc<Job>> {
        self.jobs.read().expect("job table lock").get(id).cloned()
    }

    /// Cancels a queued or running job. A finished job is removed together
    /// with its outputs. Returns the job's last snapshot.
    pub fn delete(&self, id: &str) -> Option<JobSnapshot> {
        let job = self.get(id)?;
        if job.state().is_terminal() {
            self.jobs.write().expect("job table lock").remove(id);
            let _ = std::fs::remove_dir_all(&job.dir);
            return Some(job.snapshot());
        }
        job.cancel.store(true, Ordering::Release);
        // a queued job never reaches a worker's run loop body
        job.fail("cancelled".into());
        Some(job.snapshot())
    }
}
