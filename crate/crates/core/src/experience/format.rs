//! On-disk library format: a `flex-library` header line followed by one
//! entry or tombstone record per line, in ascending id order.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{hash_normalized, normalize_content, EntryId, ExperienceEntry, ExperienceLibrary, Tombstone};
pub use crate::records::FormatError;
use crate::records;

pub const LIBRARY_FORMAT: &str = "flex-library";
pub const LIBRARY_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct LibraryHeader {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    next_id: Option<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum Record {
    Entry(ExperienceEntry),
    Tombstone(Tombstone),
}

#[derive(Serialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum RecordRef<'a> {
    Entry(&'a ExperienceEntry),
    Tombstone(&'a Tombstone),
}

impl ExperienceLibrary {
    pub fn to_text(&self) -> String {
        let mut recs: Vec<(EntryId, RecordRef<'_>)> = self
            .entries
            .values()
            .map(|e| (e.id, RecordRef::Entry(e)))
            .chain(self.tombstones.values().map(|t| (t.id, RecordRef::Tombstone(t))))
            .collect();
        recs.sort_by_key(|(id, _)| *id);
        let recs: Vec<_> = recs.into_iter().map(|(_, r)| r).collect();
        records::render(
            LIBRARY_FORMAT,
            LIBRARY_VERSION,
            LibraryHeader {
                next_id: Some(self.next_id),
            },
            &recs,
        )
    }

    /// Parses and fully validates a library file body.
    pub fn from_text(text: &str) -> Result<Self, FormatError> {
        let parsed = records::parse::<LibraryHeader, Record>(text, LIBRARY_FORMAT, LIBRARY_VERSION)?;
        let mut ids: HashMap<EntryId, usize> = HashMap::new();
        let mut hashes: HashMap<String, usize> = HashMap::new();
        let mut entries = Vec::new();
        let mut tombstones = Vec::new();

        for (line, rec) in parsed.records {
            let id = match &rec {
                Record::Entry(e) => e.id,
                Record::Tombstone(t) => t.id,
            };
            if id.0 == 0 {
                return Err(FormatError::corrupt(line, "id 0 is reserved"));
            }
            if let Some(prev) = ids.insert(id, line) {
                return Err(FormatError::corrupt(line, format!("id {id} already used on line {prev}")));
            }
            match rec {
                Record::Entry(e) => {
                    let normalized = normalize_content(&e.content)
                        .map_err(|_| FormatError::corrupt(line, "content is empty"))?;
                    if normalized != e.content {
                        return Err(FormatError::corrupt(line, "content is not normalized"));
                    }
                    if hash_normalized(&normalized) != e.content_hash {
                        return Err(FormatError::corrupt(line, "content_hash does not match content"));
                    }
                    if !(0.0..=1.0).contains(&e.quality) {
                        return Err(FormatError::corrupt(line, "quality outside [0, 1]"));
                    }
                    if hashes.insert(e.content_hash.clone(), line).is_some() {
                        return Err(FormatError::DuplicateHash {
                            line,
                            hash: e.content_hash,
                        });
                    }
                    entries.push(e);
                }
                Record::Tombstone(t) => tombstones.push((line, t)),
            }
        }

        let all_ids: BTreeSet<EntryId> = ids.keys().copied().collect();
        for (line, t) in &tombstones {
            if !all_ids.contains(&t.survivor_id) || t.survivor_id == t.id {
                return Err(FormatError::corrupt(
                    *line,
                    format!("tombstone points at unknown id {}", t.survivor_id),
                ));
            }
        }
        let max_id = all_ids.iter().next_back().map(|id| id.0).unwrap_or(0);
        let next_id = match parsed.header.next_id {
            Some(n) if n <= max_id => {
                return Err(FormatError::BadHeader(format!("next_id {n} does not exceed max id {max_id}")))
            }
            Some(n) => n,
            None => max_id + 1,
        };
        let lib = ExperienceLibrary::restore(entries, tombstones.into_iter().map(|(_, t)| t).collect(), next_id);
        lib.check_invariants().map_err(|e| FormatError::corrupt(1, e))?;
        Ok(lib)
    }

    pub fn save(&self, path: &Path) -> Result<(), FormatError> {
        records::write_atomic(path, &self.to_text()).map_err(|e| FormatError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, FormatError> {
        Self::from_text(&records::read_file(path)?)
    }
}
