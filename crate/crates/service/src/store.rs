//! Immutable session store with optional append-only JSONL persistence.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use atnf_core::{parallel, Error, Result};

use crate::api::{png_base64, InversionInfo, SessionResource};
use crate::engine::{Engine, Generated, SessionSpec};

pub struct StoredSession {
    pub resource: SessionResource,
    pub generated: Generated,
}

/// One line of the persistence log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersistedSession {
    pub id: String,
    pub created_unix_ms: u64,
    pub checkpoint: String,
    pub spec: SessionSpec,
}

struct Log {
    path: PathBuf,
    file: File,
}

#[derive(Default)]
pub struct SessionStore {
    sessions: RwLock<HashMap<String, Arc<StoredSession>>>,
    log: Option<Mutex<Log>>,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

fn resource(
    engine: &Engine,
    id: String,
    created_unix_ms: u64,
    spec: &SessionSpec,
    g: &Generated,
) -> Result<SessionResource> {
    let inversion = match (&spec.origin, &g.inversion) {
        (crate::engine::Origin::Inversion { dataset_seed }, Some((x0, p))) => Some(InversionInfo {
            dataset_seed: *dataset_seed,
            original: png_base64(x0)?,
            psnr: p.is_finite().then_some(*p),
        }),
        _ => None,
    };
    Ok(SessionResource {
        id,
        prompt: spec.prompt.clone(),
        seed: spec.seed,
        steps: spec.steps,
        guidance: spec.guidance,
        checkpoint: engine.fingerprint().to_string(),
        created_unix_ms,
        tokens: engine.vocabulary().token_words(&g.tokens),
        image: png_base64(&g.image)?,
        inversion,
    })
}

impl SessionStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens `path` for appending after regenerating every session it
    /// records. Sessions made with another checkpoint are skipped.
    pub fn persistent(path: &Path, engine: &Engine) -> Result<Self> {
        let store = SessionStore::default();
        if path.exists() {
            let f = File::open(path).map_err(|e| Error::io(path, e))?;
            let mut entries = Vec::new();
            for (n, line) in BufReader::new(f).lines().enumerate() {
                let line = line.map_err(|e| Error::io(path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<PersistedSession>(&line) {
                    Ok(p) if p.checkpoint == engine.fingerprint() => entries.push(p),
                    Ok(p) => log::warn!(
                        "{}:{}: session {} belongs to checkpoint {}, skipped",
                        path.display(),
                        n + 1,
                        p.id,
                        p.checkpoint
                    ),
                    Err(e) => log::warn!("{}:{}: unreadable session, skipped: {e}", path.display(), n + 1),
                }
            }
            let regenerated = parallel::map(&entries, |p| engine.generate(&p.spec));
            let mut map = store.sessions.write().expect("store lock");
            for (p, g) in entries.into_iter().zip(regenerated) {
                match g {
                    Ok(g) => {
                        let r = resource(engine, p.id.clone(), p.created_unix_ms, &p.spec, &g)?;
                        map.insert(p.id, Arc::new(StoredSession { resource: r, generated: g }));
                    }
                    Err(e) => log::warn!("session {} could not be replayed: {e}", p.id),
                }
            }
            log::info!("replayed {} sessions from {}", map.len(), path.display());
        }
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(SessionStore {
            sessions: store.sessions,
            log: Some(Mutex::new(Log {
                path: path.to_path_buf(),
                file,
            })),
        })
    }

    pub fn get(&self, id: &str) -> Option<Arc<StoredSession>> {
        self.sessions.read().expect("store lock").get(id).cloned()
    }

    pub fn len(&self) -> usize {
        self.sessions.read().expect("store lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Stores a freshly generated session under a new id.
    pub fn insert(&self, engine: &Engine, spec: SessionSpec, g: Generated) -> Result<Arc<StoredSession>> {
        let id = uuid::Uuid::new_v4().simple().to_string();
        let created = now_ms();
        let r = resource(engine, id.clone(), created, &spec, &g)?;
        if let Some(log) = &self.log {
            let line = serde_json::to_string(&PersistedSession {
                id: id.clone(),
                created_unix_ms: created,
                checkpoint: engine.fingerprint().to_string(),
                spec,
            })
            .expect("session serializes");
            let mut log = log.lock().expect("log lock");
            let Log { path, file } = &mut *log;
            writeln!(file, "{line}")
                .and_then(|_| file.flush())
                .map_err(|e| Error::io(path.as_path(), e))?;
        }
        let stored = Arc::new(StoredSession {
            resource: r,
            generated: g,
        });
        self.sessions
            .write()
            .expect("store lock")
            .insert(id, stored.clone());
        Ok(stored)
    }
}
