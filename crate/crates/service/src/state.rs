use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};
use sms_core::{run_with_observer, GrayImage, Supervision, TraceRow};
use sms_io::{emit_artifacts, encode_gray_png, EmitOptions, RunRequest, Summary};
use tokio::sync::watch;
use uuid::Uuid;

/// One streamed trace row; mirrors a line of `trace.csv` without timing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EventRow {
    pub iter: usize,
    pub data: f64,
    pub sobolev: f64,
    pub mm: f64,
    pub total: f64,
    pub max_dp: f64,
}

impl From<&TraceRow> for EventRow {
    fn from(r: &TraceRow) -> Self {
        Self {
            iter: r.iter,
            data: r.energy.data_term,
            sobolev: r.energy.sobolev_term,
            mm: r.energy.mm_term,
            total: r.energy.total,
            max_dp: r.max_dp,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Queued,
    Running,
    Done,
    Failed,
}

impl Phase {
    pub fn is_terminal(self) -> bool {
        matches!(self, Phase::Done | Phase::Failed)
    }
}

/// Everything a finished run serves.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub summary: Summary,
    pub summary_json: Vec<u8>,
    pub labels_png: Vec<u8>,
    pub palette_json: Vec<u8>,
    pub ownership_pngs: Vec<Vec<u8>>,
}

#[derive(Debug, Clone)]
pub struct RunState {
    pub phase: Phase,
    pub rows: Vec<EventRow>,
    pub result: Option<Arc<RunResult>>,
    pub error: Option<String>,
}

pub struct Run {
    pub id: Uuid,
    pub request: RunRequest,
    state: Mutex<RunState>,
    /// Bumped on every state change so stream readers can wait.
    version: watch::Sender<u64>,
}

impl Run {
    fn new(id: Uuid, request: RunRequest, state: RunState) -> Self {
        Self {
            id,
            request,
            state: Mutex::new(state),
            version: watch::Sender::new(0),
        }
    }

    pub fn snapshot(&self) -> RunState {
        self.state.lock().expect("run state lock").clone()
    }

    /// Rows from index `from` on, plus the phase at the time of reading.
    pub fn rows_since(&self, from: usize) -> (Vec<EventRow>, RunState) {
        let st = self.state.lock().expect("run state lock");
        let rows = st.rows.get(from..).map(<[_]>::to_vec).unwrap_or_default();
        let meta = RunState {
            phase: st.phase,
            rows: Vec::new(),
            result: st.result.clone(),
            error: st.error.clone(),
        };
        (rows, meta)
    }

    pub fn subscribe(&self) -> watch::Receiver<u64> {
        self.version.subscribe()
    }

    fn update(&self, f: impl FnOnce(&mut RunState)) {
        f(&mut self.state.lock().expect("run state lock"));
        self.version.send_modify(|v| *v += 1);
    }
}

pub struct Session {
    pub id: Uuid,
    pub image: GrayImage,
    supervision: Mutex<Supervision>,
    runs: Mutex<HashMap<Uuid, Arc<Run>>>,
    active: Mutex<Option<Uuid>>,
}

impl Session {
    pub fn dims(&self) -> (usize, usize) {
        self.image.dims()
    }

    pub fn supervision(&self) -> Supervision {
        self.supervision.lock().expect("supervision lock").clone()
    }

    pub fn run(&self, id: Uuid) -> Option<Arc<Run>> {
        self.runs.lock().expect("runs lock").get(&id).cloned()
    }

    pub fn run_ids(&self) -> Vec<Uuid> {
        let mut ids: Vec<Uuid> = self.runs.lock().expect("runs lock").keys().copied().collect();
        ids.sort();
        ids
    }
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub max_pixels: usize,
    pub data_dir: Option<PathBuf>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            max_pixels: 4096 * 4096,
            data_dir: None,
        }
    }
}

pub enum StartError {
    Busy(Uuid),
}

#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

struct Inner {
    config: ServiceConfig,
    sessions: RwLock<HashMap<Uuid, Arc<Session>>>,
}

impl AppState {
    pub fn new(config: ServiceConfig) -> Self {
        Self {
            inner: Arc::new(Inner {
                config,
                sessions: RwLock::new(HashMap::new()),
            }),
        }
    }

    /// A state pre-filled with whatever `config.data_dir` holds.
    pub fn load(config: ServiceConfig) -> std::io::Result<Self> {
        let state = Self::new(config);
        if let Some(dir) = state.inner.config.data_dir.clone() {
            let root = dir.join("sessions");
            std::fs::create_dir_all(&root)?;
            for entry in std::fs::read_dir(&root)? {
                let path = entry?.path();
                match persist::load_session(&path) {
                    Ok(session) => {
                        state.insert(session);
                    }
                    Err(e) => eprintln!("skipping {}: {e}", path.display()),
                }
            }
        }
        Ok(state)
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.inner.config
    }

    pub fn session(&self, id: Uuid) -> Option<Arc<Session>> {
        self.inner.sessions.read().expect("sessions lock").get(&id).cloned()
    }

    fn insert(&self, session: Session) -> Arc<Session> {
        let session = Arc::new(session);
        self.inner
            .sessions
            .write()
            .expect("sessions lock")
            .insert(session.id, session.clone());
        session
    }

    pub fn create_session(&self, image: GrayImage, original: &[u8]) -> std::io::Result<Arc<Session>> {
        let session = Session {
            id: Uuid::new_v4(),
            image,
            supervision: Mutex::new(Supervision::default()),
            runs: Mutex::new(HashMap::new()),
            active: Mutex::new(None),
        };
        if let Some(dir) = self.session_dir(session.id) {
            persist::save_image(&dir, original)?;
        }
        Ok(self.insert(session))
    }

    fn session_dir(&self, id: Uuid) -> Option<PathBuf> {
        self.inner
            .config
            .data_dir
            .as_ref()
            .map(|d| d.join("sessions").join(id.to_string()))
    }

    pub fn set_supervision(&self, session: &Session, sup: Supervision) -> std::io::Result<()> {
        if let Some(dir) = self.session_dir(session.id) {
            persist::save_supervision(&dir, &sup)?;
        }
        *session.supervision.lock().expect("supervision lock") = sup;
        Ok(())
    }

    /// Queues a run on a blocking worker. The request must already be valid
    /// for the session's supervision.
    pub fn start_run(
        &self,
        session: &Arc<Session>,
        request: RunRequest,
        supervision: Supervision,
    ) -> Result<Arc<Run>, StartError> {
        let config = request
            .to_config()
            .expect("caller validated the request");
        let run = {
            let mut active = session.active.lock().expect("active lock");
            if let Some(id) = *active {
                return Err(StartError::Busy(id));
            }
            let run = Arc::new(Run::new(
                Uuid::new_v4(),
                request,
                RunState {
                    phase: Phase::Queued,
                    rows: Vec::new(),
                    result: None,
                    error: None,
                },
            ));
            *active = Some(run.id);
            session
                .runs
                .lock()
                .expect("runs lock")
                .insert(run.id, run.clone());
            run
        };

        let worker_run = run.clone();
        let worker_session = session.clone();
        let run_dir = self
            .session_dir(session.id)
            .map(|d| d.join("runs").join(run.id.to_string()));
        tokio::task::spawn_blocking(move || {
            let run = worker_run;
            let session = worker_session;
            run.update(|s| s.phase = Phase::Running);
            let sup = (!supervision.is_empty()).then_some(&supervision);
            let outcome = run_with_observer(&session.image, &config, sup, None, &mut |row| {
                run.update(|s| s.rows.push(EventRow::from(row)));
            })
            .map_err(|f| f.to_string())
            .and_then(|out| finish(&out, &session.image, &run.request).map_err(|e| e.to_string()));

            let (phase, result, error) = match outcome {
                Ok(result) => (Phase::Done, Some(Arc::new(result)), None),
                Err(e) => (Phase::Failed, None, Some(e)),
            };
            if let Some(dir) = &run_dir {
                let rows = run.snapshot().rows;
                if let Err(e) =
                    persist::save_run(dir, &run.request, phase, &rows, result.as_deref(), error.as_deref())
                {
                    eprintln!("failed to persist run {}: {e}", run.id);
                }
            }
            *session.active.lock().expect("active lock") = None;
            run.update(|s| {
                s.phase = phase;
                s.result = result;
                s.error = error;
            });
        });
        Ok(run)
    }
}

/// Artifacts as the CLI would emit them, plus 8-bit ownership PNGs.
fn finish(
    out: &sms_core::RunOutput<f64>,
    image: &GrayImage,
    request: &RunRequest,
) -> sms_io::Result<RunResult> {
    let opts = EmitOptions {
        ownerships: false,
        labels: true,
        trace: false,
        residuals: false,
        raw: false,
    };
    let mut artifacts = emit_artifacts(out, image, request, opts)?;
    let take = |files: &mut std::collections::BTreeMap<String, Vec<u8>>, name: &str| {
        files.remove(name).expect("emitted artifact")
    };
    let ownership_pngs = out
        .ownerships
        .channels()
        .iter()
        .map(encode_gray_png)
        .collect::<sms_io::Result<_>>()?;
    Ok(RunResult {
        summary_json: take(&mut artifacts.files, "summary.json"),
        labels_png: take(&mut artifacts.files, "labels.png"),
        palette_json: take(&mut artifacts.files, "labels_palette.json"),
        ownership_pngs,
        summary: artifacts.summary,
    })
}

/// Directory-backed persistence. Layout per session:
/// `image`, `supervision.json`, and `runs/<id>/` holding `request.json`,
/// `status.json`, `events.json` and, for finished runs, the artifacts.
mod persist {
    use super::*;

    fn io_err(e: impl std::fmt::Display) -> std::io::Error {
        std::io::Error::other(e.to_string())
    }

    pub fn save_image(dir: &Path, bytes: &[u8]) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("image"), bytes)
    }

    pub fn save_supervision(dir: &Path, sup: &Supervision) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(
            dir.join("supervision.json"),
            serde_json::to_vec_pretty(sup).map_err(io_err)?,
        )
    }

    #[derive(Serialize, Deserialize)]
    struct Status {
        status: Phase,
        #[serde(skip_serializing_if = "Option::is_none")]
        error: Option<String>,
    }

    pub fn save_run(
        dir: &Path,
        request: &RunRequest,
        phase: Phase,
        rows: &[EventRow],
        result: Option<&RunResult>,
        error: Option<&str>,
    ) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("request.json"), serde_json::to_vec(request).map_err(io_err)?)?;
        std::fs::write(dir.join("events.json"), serde_json::to_vec(rows).map_err(io_err)?)?;
        if let Some(r) = result {
            std::fs::write(dir.join("summary.json"), &r.summary_json)?;
            std::fs::write(dir.join("labels.png"), &r.labels_png)?;
            std::fs::write(dir.join("labels_palette.json"), &r.palette_json)?;
            for (i, png) in r.ownership_pngs.iter().enumerate() {
                std::fs::write(dir.join(format!("own_{}.png", i + 1)), png)?;
            }
        }
        let status = Status {
            status: phase,
            error: error.map(str::to_owned),
        };
        std::fs::write(dir.join("status.json"), serde_json::to_vec(&status).map_err(io_err)?)
    }

    fn load_run(dir: &Path) -> std::io::Result<Run> {
        let read_json = |name: &str| -> std::io::Result<serde_json::Value> {
            serde_json::from_slice(&std::fs::read(dir.join(name))?).map_err(io_err)
        };
        let id: Uuid = dir
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.parse().ok())
            .ok_or_else(|| io_err("run directory name is not a run id"))?;
        let request: RunRequest = serde_json::from_value(read_json("request.json")?).map_err(io_err)?;
        let status: Status = serde_json::from_value(read_json("status.json")?).map_err(io_err)?;
        let rows: Vec<EventRow> = serde_json::from_value(read_json("events.json")?).map_err(io_err)?;
        let result = if status.status == Phase::Done {
            let summary_json = std::fs::read(dir.join("summary.json"))?;
            let summary: Summary = serde_json::from_slice(&summary_json).map_err(io_err)?;
            let ownership_pngs = (1..=request.k)
                .map(|i| std::fs::read(dir.join(format!("own_{i}.png"))))
                .collect::<std::io::Result<_>>()?;
            Some(Arc::new(RunResult {
                summary,
                summary_json,
                labels_png: std::fs::read(dir.join("labels.png"))?,
                palette_json: std::fs::read(dir.join("labels_palette.json"))?,
                ownership_pngs,
            }))
        } else {
            None
        };
        Ok(Run::new(
            id,
            request,
            RunState {
                phase: status.status,
                rows,
                result,
                error: status.error,
            },
        ))
    }

    pub fn load_session(dir: &Path) -> std::io::Result<Session> {
        let id: Uuid = dir
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.parse().ok())
            .ok_or_else(|| io_err("session directory name is not a session id"))?;
        let image = sms_io::decode_image(&std::fs::read(dir.join("image"))?).map_err(io_err)?;
        let supervision = match std::fs::read(dir.join("supervision.json")) {
            Ok(bytes) => serde_json::from_slice(&bytes).map_err(io_err)?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Supervision::default(),
            Err(e) => return Err(e),
        };
        let mut runs = HashMap::new();
        let runs_dir = dir.join("runs");
        if runs_dir.is_dir() {
            for entry in std::fs::read_dir(runs_dir)? {
                let run = load_run(&entry?.path())?;
                runs.insert(run.id, Arc::new(run));
            }
        }
        Ok(Session {
            id,
            image,
            supervision: Mutex::new(supervision),
            runs: Mutex::new(runs),
            active: Mutex::new(None),
        })
    }
}
