//! File-per-scene persistence.
//!
//! Each scene keeps its base checkpoint in `<id>.lsck` and its metadata and
//! edit history in `<id>.json`; `index.json` lists the scenes. The current
//! state is always the base checkpoint with the history replayed over it.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use layerscene::{apply_edit, decode_checkpoint, encode_checkpoint, EditOp, GridPayload, Layout, Result, SceneCheckpoint};

/// Reference image, layout and weight for anchored optimization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorUpload {
    pub image: GridPayload,
    pub layout: Layout,
    #[serde(default = "default_weight")]
    pub weight: f64,
}

fn default_weight() -> f64 {
    layerscene::sampler::DEFAULT_ANCHOR_WEIGHT
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RecordMeta {
    id: String,
    created_ms: u64,
    updated_ms: u64,
    history: Vec<EditOp>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    anchor: Option<AnchorUpload>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub id: String,
    pub created_ms: u64,
    pub updated_ms: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneRecord {
    pub id: String,
    pub created_ms: u64,
    pub updated_ms: u64,
    /// Checkpoint the history applies to, as stored on disk.
    pub base: SceneCheckpoint,
    pub history: Vec<EditOp>,
    pub anchor: Option<AnchorUpload>,
    /// `base` with `history` applied.
    pub current: SceneCheckpoint,
    /// Bumped by every change; lets long jobs detect concurrent edits.
    pub revision: u64,
}

pub fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

/// Rounds a checkpoint through its file encoding.
pub fn canonical(cp: &SceneCheckpoint) -> SceneCheckpoint {
    decode_checkpoint(&encode_checkpoint(cp)).expect("freshly encoded checkpoint decodes")
}

impl SceneRecord {
    pub fn new(id: String, base: SceneCheckpoint) -> Self {
        let now = now_ms();
        let base = canonical(&base);
        Self {
            id,
            created_ms: now,
            updated_ms: now,
            current: base.clone(),
            base,
            history: Vec::new(),
            anchor: None,
            revision: 0,
        }
    }

    pub fn replay(base: &SceneCheckpoint, history: &[EditOp]) -> Result<SceneCheckpoint> {
        let mut cp = base.clone();
        for op in history {
            cp.scene = apply_edit(&cp.scene, op)?;
        }
        Ok(cp)
    }

    /// Applies an edit; on error the record is unchanged.
    pub fn apply(&mut self, op: EditOp) -> Result<()> {
        let scene = apply_edit(&self.current.scene, &op)?;
        self.current.scene = scene;
        self.history.push(op);
        self.touch();
        Ok(())
    }

    /// Replaces the base (after a re-optimization) and clears the history.
    pub fn rebase(&mut self, base: SceneCheckpoint) {
        self.base = canonical(&base);
        self.current = self.base.clone();
        self.history.clear();
        self.touch();
    }

    pub fn touch(&mut self) {
        self.updated_ms = now_ms().max(self.updated_ms);
        self.revision += 1;
    }

    fn meta(&self) -> RecordMeta {
        RecordMeta {
            id: self.id.clone(),
            created_ms: self.created_ms,
            updated_ms: self.updated_ms,
            history: self.history.clone(),
            anchor: self.anchor.clone(),
        }
    }
}

pub struct Store {
    root: PathBuf,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(tmp, path)
}

impl Store {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root)?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn index_path(&self) -> PathBuf {
        self.root.join("index.json")
    }

    pub fn index(&self) -> Result<Vec<IndexEntry>> {
        match std::fs::read(self.index_path()) {
            Ok(bytes) => serde_json::from_slice(&bytes)
                .map_err(|e| layerscene::Error::Format(format!("store index: {e}"))),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Vec::new()),
            Err(e) => Err(e.into()),
        }
    }

    pub fn write_index(&self, entries: &[IndexEntry]) -> Result<()> {
        let json = serde_json::to_vec_pretty(entries).expect("index serializes");
        write_atomic(&self.index_path(), &json)?;
        Ok(())
    }

    pub fn save(&self, rec: &SceneRecord) -> Result<()> {
        write_atomic(&self.root.join(format!("{}.lsck", rec.id)), &encode_checkpoint(&rec.base))?;
        let json = serde_json::to_vec_pretty(&rec.meta()).expect("record serializes");
        write_atomic(&self.root.join(format!("{}.json", rec.id)), &json)?;
        Ok(())
    }

    pub fn load(&self, id: &str) -> Result<SceneRecord> {
        let base = decode_checkpoint(&std::fs::read(self.root.join(format!("{id}.lsck")))?)?;
        let meta: RecordMeta = serde_json::from_slice(&std::fs::read(self.root.join(format!("{id}.json")))?)
            .map_err(|e| layerscene::Error::Format(format!("scene record {id}: {e}")))?;
        let current = SceneRecord::replay(&base, &meta.history)?;
        Ok(SceneRecord {
            id: meta.id,
            created_ms: meta.created_ms,
            updated_ms: meta.updated_ms,
            base,
            history: meta.history,
            anchor: meta.anchor,
            current,
            revision: 0,
        })
    }

    pub fn remove(&self, id: &str) -> Result<()> {
        for ext in ["lsck", "json"] {
            match std::fs::remove_file(self.root.join(format!("{id}.{ext}"))) {
                Err(e) if e.kind() != std::io::ErrorKind::NotFound => return Err(e.into()),
                _ => {}
            }
        }
        Ok(())
    }

    pub fn load_all(&self) -> Result<BTreeMap<String, SceneRecord>> {
        self.index()?
            .into_iter()
            .map(|e| self.load(&e.id).map(|r| (e.id, r)))
            .collect()
    }
}
