use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use ring::digest;

use crate::attestation::RegistrationEntry;
use crate::id::SpiffeId;

/// Registration entries indexed by id, optionally backed by an append-only
/// JSON-lines file.
#[derive(Debug, Default)]
pub struct EntryStore {
    entries: BTreeMap<String, RegistrationEntry>,
    log: Option<PathBuf>,
}

/// Content-derived entry id: stable across runs for the same entry.
pub fn derive_entry_id(entry: &RegistrationEntry) -> String {
    let mut ctx = digest::Context::new(&digest::SHA256);
    ctx.update(entry.spiffe_id.to_string().as_bytes());
    ctx.update(b"\n");
    ctx.update(entry.parent_id.to_string().as_bytes());
    for s in &entry.selectors {
        ctx.update(b"\n");
        ctx.update(s.to_string().as_bytes());
    }
    let hex: String = ctx
        .finish()
        .as_ref()
        .iter()
        .take(8)
        .map(|b| format!("{b:02x}"))
        .collect();
    format!("e-{hex}")
}

impl EntryStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Replays `path` if it exists; later appends go to the same file.
    pub fn open(path: &Path) -> io::Result<Self> {
        let mut store = EntryStore {
            entries: BTreeMap::new(),
            log: Some(path.to_owned()),
        };
        if path.exists() {
            for (n, line) in BufReader::new(File::open(path)?).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let entry: RegistrationEntry = serde_json::from_str(&line).map_err(|e| {
                    io::Error::new(io::ErrorKind::InvalidData, format!("line {}: {e}", n + 1))
                })?;
                store.entries.insert(entry.entry_id.clone(), entry);
            }
        }
        Ok(store)
    }

    /// True when an entry with the same id, or the same
    /// (spiffe_id, parent_id, selectors), is already stored.
    pub fn conflicts(&self, entry: &RegistrationEntry) -> bool {
        self.entries.contains_key(&entry.entry_id)
            || self.entries.values().any(|e| {
                e.spiffe_id == entry.spiffe_id
                    && e.parent_id == entry.parent_id
                    && e.selectors == entry.selectors
            })
    }

    /// Persists then indexes. The caller has checked `conflicts`.
    pub fn insert(&mut self, entry: RegistrationEntry) -> io::Result<()> {
        if let Some(path) = &self.log {
            let mut f = OpenOptions::new().create(true).append(true).open(path)?;
            let mut line = serde_json::to_vec(&entry).expect("entry serializes");
            line.push(b'\n');
            f.write_all(&line)?;
            f.sync_data()?;
        }
        self.entries.insert(entry.entry_id.clone(), entry);
        Ok(())
    }

    pub fn get(&self, entry_id: &str) -> Option<&RegistrationEntry> {
        self.entries.get(entry_id)
    }

    /// All entries ordered by id.
    pub fn all(&self) -> Vec<RegistrationEntry> {
        self.entries.values().cloned().collect()
    }

    pub fn children_of(&self, parent: &SpiffeId) -> Vec<RegistrationEntry> {
        self.entries
            .values()
            .filter(|e| &e.parent_id == parent)
            .cloned()
            .collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
