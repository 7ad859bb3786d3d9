use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use super::GenerationRecord;

/// Fingerprint-keyed response cache backed by an append-only JSONL journal.
///
/// Opening a journal compacts it: the last row per fingerprint wins and a
/// torn trailing line (from a crash mid-write) is discarded. Writes go
/// through a single mutex-guarded appender and are flushed per row.
pub struct ResponseCache {
    path: Option<PathBuf>,
    entries: Mutex<HashMap<String, GenerationRecord>>,
    writer: Mutex<Option<File>>,
}

impl ResponseCache {
    /// A cache that lives only as long as the process.
    pub fn in_memory() -> Self {
        ResponseCache {
            path: None,
            entries: Mutex::new(HashMap::new()),
            writer: Mutex::new(None),
        }
    }

    pub fn open(path: &Path) -> std::io::Result<Self> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut order: Vec<String> = Vec::new();
        let mut entries: HashMap<String, GenerationRecord> = HashMap::new();
        let mut rows = 0usize;
        let mut dirty = false;
        if path.exists() {
            for (idx, line) in BufReader::new(File::open(path)?).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<GenerationRecord>(&line) {
                    Ok(rec) => {
                        rows += 1;
                        if !entries.contains_key(&rec.fingerprint) {
                            order.push(rec.fingerprint.clone());
                        }
                        entries.insert(rec.fingerprint.clone(), rec);
                    }
                    Err(e) => {
                        log::warn!("{}:{}: dropping unreadable cache row: {e}", path.display(), idx + 1);
                        dirty = true;
                    }
                }
            }
        }
        if dirty || rows != entries.len() {
            let tmp = path.with_extension("jsonl.compact");
            {
                let mut f = File::create(&tmp)?;
                for fp in &order {
                    serde_json::to_writer(&mut f, &entries[fp])?;
                    f.write_all(b"\n")?;
                }
                f.sync_all()?;
            }
            std::fs::rename(&tmp, path)?;
        }
        let writer = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(ResponseCache {
            path: Some(path.to_path_buf()),
            entries: Mutex::new(entries),
            writer: Mutex::new(Some(writer)),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn get(&self, fingerprint: &str) -> Option<GenerationRecord> {
        self.entries.lock().expect("cache poisoned").get(fingerprint).cloned()
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn put(&self, record: GenerationRecord) -> std::io::Result<()> {
        let mut writer = self.writer.lock().expect("cache writer poisoned");
        if let Some(f) = writer.as_mut() {
            let mut line = serde_json::to_vec(&record)?;
            line.push(b'\n');
            f.write_all(&line)?;
            f.flush()?;
        }
        self.entries
            .lock()
            .expect("cache poisoned")
            .insert(record.fingerprint.clone(), record);
        Ok(())
    }
}
