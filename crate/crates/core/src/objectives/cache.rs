//! JSONL persistence of generated targets, keyed by `(example id, stage)`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::StageTargets;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub example_id: u64,
    pub stage: u8,
    pub targets: StageTargets,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TargetCache {
    entries: BTreeMap<(u64, u8), StageTargets>,
}

impl TargetCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, example_id: u64, stage: u8) -> Option<&StageTargets> {
        self.entries.get(&(example_id, stage))
    }

    pub fn insert(&mut self, example_id: u64, targets: StageTargets) {
        self.entries.insert((example_id, targets.stage()), targets);
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for (&(example_id, stage), targets) in &self.entries {
            let entry = CacheEntry {
                example_id,
                stage,
                targets: targets.clone(),
            };
            serde_json::to_writer(&mut w, &entry)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut cache = Self::new();
        for (n, line) in BufReader::new(File::open(path)?).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: CacheEntry = serde_json::from_str(&line)?;
            if entry.targets.stage() != entry.stage {
                return Err(Error::validation(format!(
                    "line {}: stage {} does not match target kind",
                    n + 1,
                    entry.stage
                )));
            }
            cache.entries.insert((entry.example_id, entry.stage), entry.targets);
        }
        Ok(cache)
    }
}
