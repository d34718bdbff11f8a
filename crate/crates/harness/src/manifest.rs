//! Run manifest: which stages are complete, for which config, with which
//! files.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};
use crate::store::{read_json, sha256_file, write_json};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Gen,
    Label,
    TrainTail,
    TrainNnIlc,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Gen, Stage::Label, Stage::TrainTail, Stage::TrainNnIlc, Stage::Eval];

    pub fn name(&self) -> &'static str {
        match self {
            Stage::Gen => "gen",
            Stage::Label => "label",
            Stage::TrainTail => "train_tail",
            Stage::TrainNnIlc => "train_nn_ilc",
            Stage::Eval => "eval",
        }
    }

    /// Stages whose outputs this one reads.
    pub fn upstream(&self) -> &'static [Stage] {
        match self {
            Stage::Gen => &[],
            Stage::Label => &[Stage::Gen],
            Stage::TrainTail | Stage::TrainNnIlc => &[Stage::Label],
            Stage::Eval => &[Stage::Label],
        }
    }

    /// Stages that read this one's outputs, directly or not.
    pub fn downstream(&self) -> Vec<Stage> {
        Stage::ALL.into_iter().filter(|s| s != self && s.depends_on(*self)).collect()
    }

    fn depends_on(&self, other: Stage) -> bool {
        let direct = match self {
            Stage::Eval => matches!(other, Stage::Label | Stage::TrainTail | Stage::TrainNnIlc),
            s => s.upstream().contains(&other),
        };
        direct || self.upstream().iter().any(|u| u.depends_on(other))
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRecord {
    /// Relative to the output directory, `/`-separated.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub fingerprint: String,
    pub files: Vec<FileRecord>,
    /// Wall-clock measurements in seconds; not part of any artifact.
    #[serde(default)]
    pub timings: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_fingerprint: String,
    pub stages: BTreeMap<Stage, StageRecord>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum StageStatus {
    Missing,
    /// Completed for a different config.
    Stale,
    /// A listed file is missing or its checksum differs.
    Corrupt(String),
    Current,
}

impl RunManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let p = dir.join(MANIFEST_FILE);
        if !p.exists() {
            return Ok(Self::default());
        }
        read_json(&p).map_err(|e| HarnessError::Stale(format!("{}: unreadable manifest ({e})", p.display())))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join(MANIFEST_FILE), self)
    }

    pub fn status(&self, stage: Stage, fingerprint: &str, dir: &Path) -> Result<StageStatus> {
        let Some(rec) = self.stages.get(&stage) else {
            return Ok(StageStatus::Missing);
        };
        if rec.fingerprint != fingerprint {
            return Ok(StageStatus::Stale);
        }
        for f in &rec.files {
            let p = dir.join(&f.path);
            if !p.exists() || sha256_file(&p)? != f.sha256 {
                return Ok(StageStatus::Corrupt(f.path.clone()));
            }
        }
        Ok(StageStatus::Current)
    }

    /// Drops `stage` and everything downstream of it.
    pub fn invalidate(&mut self, stage: Stage) {
        self.stages.remove(&stage);
        for s in stage.downstream() {
            self.stages.remove(&s);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn downstream_closure() {
        assert_eq!(Stage::Gen.downstream(), vec![Stage::Label, Stage::TrainTail, Stage::TrainNnIlc, Stage::Eval]);
        assert_eq!(Stage::TrainTail.downstream(), vec![Stage::Eval]);
        assert!(Stage::Eval.downstream().is_empty());
        assert!(Stage::TrainNnIlc.downstream() == vec![Stage::Eval]);
    }

    #[test]
    fn status_detects_edits() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.txt"), b"hello").unwrap();
        let mut m = RunManifest::default();
        m.stages.insert(
            Stage::Gen,
            StageRecord {
                fingerprint: "f1".into(),
                files: vec![FileRecord { path: "a.txt".into(), sha256: crate::store::sha256_hex(b"hello"), bytes: 5 }],
                timings: BTreeMap::new(),
            },
        );
        assert_eq!(m.status(Stage::Gen, "f1", dir.path()).unwrap(), StageStatus::Current);
        assert_eq!(m.status(Stage::Gen, "f2", dir.path()).unwrap(), StageStatus::Stale);
        assert_eq!(m.status(Stage::Label, "f1", dir.path()).unwrap(), StageStatus::Missing);
        std::fs::write(dir.path().join("a.txt"), b"hellO").unwrap();
        assert_eq!(m.status(Stage::Gen, "f1", dir.path()).unwrap(), StageStatus::Corrupt("a.txt".into()));
        m.save(dir.path()).unwrap();
        assert_eq!(RunManifest::load(dir.path()).unwrap(), m);
        m.invalidate(Stage::Gen);
        assert!(m.stages.is_empty());
    }
}
