//! Object store with write notifications and the append-only execution log.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard};

use percent_encoding::{percent_decode_str, utf8_percent_encode, NON_ALPHANUMERIC};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("object {0} already exists")]
    KeyExists(String),
    #[error("object {0} not found")]
    NotFound(String),
    #[error("duplicate {event:?} entry for job {job} stage {stage:?} task {task:?}")]
    DuplicateEvent {
        job: String,
        stage: Option<u32>,
        task: Option<u32>,
        event: LogEvent,
    },
    #[error("log entry at {at} precedes the last entry at {last}")]
    NonMonotonic { at: u64, last: u64 },
    #[error("corrupt store: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, StoreError>;

/// Emitted by every successful `put`; the trigger for downstream stages.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Notification {
    pub key: String,
    pub at: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObjectRecord {
    pub key: String,
    pub bytes: Arc<Vec<u8>>,
    pub created_at: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogEvent {
    Submitted,
    Invoked,
    Completed,
    Respawned,
    Paused,
    Resumed,
    JobDone,
    JobFailed,
}

impl LogEvent {
    /// Events that may appear at most once per (job, stage, task).
    pub fn is_unique(self) -> bool {
        matches!(
            self,
            LogEvent::Invoked | LogEvent::Completed | LogEvent::Submitted | LogEvent::JobDone | LogEvent::JobFailed
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub job: String,
    pub stage: Option<u32>,
    pub task: Option<u32>,
    pub event: LogEvent,
    pub at: u64,
    #[serde(default)]
    pub payload: Value,
}

impl LogEntry {
    pub fn job_event(job: &str, event: LogEvent, at: u64, payload: Value) -> Self {
        LogEntry {
            job: job.to_string(),
            stage: None,
            task: None,
            event,
            at,
            payload,
        }
    }

    pub fn task_event(job: &str, stage: u32, task: u32, event: LogEvent, at: u64, payload: Value) -> Self {
        LogEntry {
            job: job.to_string(),
            stage: Some(stage),
            task: Some(task),
            event,
            at,
            payload,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestLine {
    key: String,
    at: u64,
}

#[derive(Debug)]
enum Backend {
    Memory,
    Disk { root: PathBuf, log: File, manifest: File },
}

type EventKey = (String, Option<u32>, Option<u32>, LogEvent);

#[derive(Debug)]
struct Inner {
    backend: Backend,
    objects: BTreeMap<String, ObjectRecord>,
    log: Vec<LogEntry>,
    seen: BTreeSet<EventKey>,
}

/// Thread-safe object store. All operations take `&self`.
#[derive(Debug)]
pub struct ObjectStore {
    inner: Mutex<Inner>,
}

fn encode_key(key: &str) -> String {
    utf8_percent_encode(key, NON_ALPHANUMERIC).to_string()
}

/// Reads a JSON-lines file. A partial final line, as left by a crash, is
/// cut off the file.
fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut out = Vec::new();
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(out),
        Err(e) => return Err(e.into()),
    };
    let lines: Vec<String> = BufReader::new(file).lines().collect::<std::io::Result<_>>()?;
    let last = lines.len().saturating_sub(1);
    let mut valid_len = 0u64;
    for (i, line) in lines.iter().enumerate() {
        if !line.trim().is_empty() {
            match serde_json::from_str(line) {
                Ok(v) => out.push(v),
                Err(_) if i == last => {
                    OpenOptions::new().write(true).open(path)?.set_len(valid_len)?;
                    break;
                }
                Err(e) => return Err(StoreError::Corrupt(format!("{}:{}: {e}", path.display(), i + 1))),
            }
        }
        valid_len += line.len() as u64 + 1;
    }
    Ok(out)
}

fn append_line(file: &mut File, value: &impl Serialize) -> Result<()> {
    let mut line = serde_json::to_vec(value).map_err(|e| StoreError::Corrupt(e.to_string()))?;
    line.push(b'\n');
    file.write_all(&line)?;
    file.flush()?;
    Ok(())
}

impl ObjectStore {
    pub fn memory() -> Self {
        ObjectStore::from_inner(Backend::Memory, BTreeMap::new(), Vec::new())
    }

    /// Opens (or creates) a directory-backed store, reloading any objects and
    /// log entries already persisted there.
    pub fn open_disk(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let objects_dir = root.join("objects");
        fs::create_dir_all(&objects_dir)?;
        let mut objects = BTreeMap::new();
        for line in read_jsonl::<ManifestLine>(&root.join("manifest.jsonl"))? {
            let path = objects_dir.join(encode_key(&line.key));
            let bytes = match fs::read(&path) {
                Ok(b) => b,
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                    return Err(StoreError::Corrupt(format!(
                        "manifest names missing object {}",
                        line.key
                    )))
                }
                Err(e) => return Err(e.into()),
            };
            objects.insert(
                line.key.clone(),
                ObjectRecord {
                    key: line.key,
                    bytes: Arc::new(bytes),
                    created_at: line.at,
                },
            );
        }
        // objects written but not yet in the manifest when a crash hit
        for entry in fs::read_dir(&objects_dir)? {
            let entry = entry?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if name.starts_with('.') {
                continue;
            }
            let key = percent_decode_str(&name).decode_utf8_lossy().into_owned();
            if !objects.contains_key(&key) {
                let bytes = fs::read(entry.path())?;
                objects.insert(
                    key.clone(),
                    ObjectRecord {
                        key,
                        bytes: Arc::new(bytes),
                        created_at: 0,
                    },
                );
            }
        }
        let log: Vec<LogEntry> = read_jsonl(&root.join("log.jsonl"))?;
        let open = |name: &str| OpenOptions::new().create(true).append(true).open(root.join(name));
        let backend = Backend::Disk {
            log: open("log.jsonl")?,
            manifest: open("manifest.jsonl")?,
            root,
        };
        Ok(ObjectStore::from_inner(backend, objects, log))
    }

    fn from_inner(backend: Backend, objects: BTreeMap<String, ObjectRecord>, log: Vec<LogEntry>) -> Self {
        let seen = log
            .iter()
            .filter(|e| e.event.is_unique())
            .map(|e| (e.job.clone(), e.stage, e.task, e.event))
            .collect();
        ObjectStore {
            inner: Mutex::new(Inner {
                backend,
                objects,
                log,
                seen,
            }),
        }
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        // a panic while holding the lock leaves the maps consistent
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn is_persistent(&self) -> bool {
        matches!(self.lock().backend, Backend::Disk { .. })
    }

    pub fn put(&self, key: &str, bytes: Vec<u8>, at: u64) -> Result<Notification> {
        let mut inner = self.lock();
        if inner.objects.contains_key(key) {
            return Err(StoreError::KeyExists(key.to_string()));
        }
        if let Backend::Disk { root, manifest, .. } = &mut inner.backend {
            let name = encode_key(key);
            let tmp = root.join("objects").join(format!(".{name}.tmp"));
            fs::write(&tmp, &bytes)?;
            fs::rename(&tmp, root.join("objects").join(&name))?;
            append_line(
                manifest,
                &ManifestLine {
                    key: key.to_string(),
                    at,
                },
            )?;
        }
        inner.objects.insert(
            key.to_string(),
            ObjectRecord {
                key: key.to_string(),
                bytes: Arc::new(bytes),
                created_at: at,
            },
        );
        Ok(Notification {
            key: key.to_string(),
            at,
        })
    }

    pub fn get(&self, key: &str) -> Result<Arc<Vec<u8>>> {
        self.lock()
            .objects
            .get(key)
            .map(|r| r.bytes.clone())
            .ok_or_else(|| StoreError::NotFound(key.to_string()))
    }

    pub fn record(&self, key: &str) -> Result<ObjectRecord> {
        self.lock()
            .objects
            .get(key)
            .cloned()
            .ok_or_else(|| StoreError::NotFound(key.to_string()))
    }

    pub fn exists(&self, key: &str) -> bool {
        self.lock().objects.contains_key(key)
    }

    pub fn size(&self, key: &str) -> Result<usize> {
        self.get(key).map(|b| b.len())
    }

    /// Keys under `prefix`, sorted. An empty prefix lists nothing.
    pub fn list(&self, prefix: &str) -> Vec<String> {
        if prefix.is_empty() {
            return Vec::new();
        }
        self.lock()
            .objects
            .range(prefix.to_string()..)
            .take_while(|(k, _)| k.starts_with(prefix))
            .map(|(k, _)| k.clone())
            .collect()
    }

    /// Every key in the store, sorted.
    pub fn keys(&self) -> Vec<String> {
        self.lock().objects.keys().cloned().collect()
    }

    /// Appends a log entry; on disk the line is written before this returns.
    pub fn append_log(&self, entry: LogEntry) -> Result<()> {
        let mut inner = self.lock();
        if let Some(last) = inner.log.last() {
            if entry.at < last.at {
                return Err(StoreError::NonMonotonic {
                    at: entry.at,
                    last: last.at,
                });
            }
        }
        let key = (entry.job.clone(), entry.stage, entry.task, entry.event);
        if entry.event.is_unique() && inner.seen.contains(&key) {
            return Err(StoreError::DuplicateEvent {
                job: entry.job,
                stage: entry.stage,
                task: entry.task,
                event: entry.event,
            });
        }
        if entry.event == LogEvent::Completed
            && !inner
                .seen
                .contains(&(entry.job.clone(), entry.stage, entry.task, LogEvent::Invoked))
        {
            return Err(StoreError::Corrupt(format!(
                "completion without invocation for job {} stage {:?} task {:?}",
                entry.job, entry.stage, entry.task
            )));
        }
        if let Backend::Disk { log, .. } = &mut inner.backend {
            append_line(log, &entry)?;
        }
        if entry.event.is_unique() {
            inner.seen.insert(key);
        }
        inner.log.push(entry);
        Ok(())
    }

    /// Whether a unique event was already logged.
    pub fn has_event(&self, job: &str, stage: Option<u32>, task: Option<u32>, event: LogEvent) -> bool {
        self.lock().seen.contains(&(job.to_string(), stage, task, event))
    }

    /// Entries for `job` (optionally one stage), in append order.
    pub fn query_log(&self, job: &str, stage: Option<u32>) -> Vec<LogEntry> {
        self.lock()
            .log
            .iter()
            .filter(|e| e.job == job && (stage.is_none() || e.stage == stage))
            .cloned()
            .collect()
    }

    pub fn log(&self) -> Vec<LogEntry> {
        self.lock().log.clone()
    }

    pub fn last_log_time(&self) -> u64 {
        self.lock().log.last().map_or(0, |e| e.at)
    }
}
