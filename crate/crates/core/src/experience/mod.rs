//! The experience library: a hierarchical, dual-zone store of distilled
//! textual experiences.
//!
//! Entries live in one of two zones (golden for lessons from correct
//! trajectories, warning for failure diagnostics) and one of three
//! abstraction levels. Content is deduplicated on a digest of its
//! normalized form. Merged-away entries are tombstoned so ids are never
//! reused and provenance chains survive export and import.

mod format;

pub use format::{FormatError, LIBRARY_FORMAT, LIBRARY_VERSION};

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use chrono::{DateTime, Duration, TimeZone, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

pub const DEFAULT_QUALITY: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Zone {
    Golden,
    Warning,
}

impl Zone {
    pub const ALL: [Zone; 2] = [Zone::Golden, Zone::Warning];
}

impl fmt::Display for Zone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Zone::Golden => "Golden",
            Zone::Warning => "Warning",
        })
    }
}

/// Abstraction level, from high-level strategy down to concrete instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Level {
    Strategy,
    Pattern,
    Instance,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::Strategy, Level::Pattern, Level::Instance];

    /// Case-insensitive parse of a level label.
    pub fn parse(label: &str) -> Option<Level> {
        match label.trim().to_ascii_lowercase().as_str() {
            "strategy" => Some(Level::Strategy),
            "pattern" => Some(Level::Pattern),
            "instance" => Some(Level::Instance),
            _ => None,
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Level::Strategy => "Strategy",
            Level::Pattern => "Pattern",
            Level::Instance => "Instance",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EntryId(pub u64);

impl fmt::Display for EntryId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Where an experience came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub task_id: String,
    pub trajectory_index: u64,
    /// Identifier of the model that produced the text.
    pub producer: String,
    pub epoch: u64,
}

impl Provenance {
    pub fn new(task_id: impl Into<String>, trajectory_index: u64, producer: impl Into<String>, epoch: u64) -> Self {
        Self {
            task_id: task_id.into(),
            trajectory_index,
            producer: producer.into(),
            epoch,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperienceEntry {
    pub id: EntryId,
    pub zone: Zone,
    pub level: Level,
    pub content: String,
    pub content_hash: String,
    pub source: Provenance,
    pub quality: f64,
    pub usage_count: u64,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
}

// Timestamps are informational and excluded from equality.
impl PartialEq for ExperienceEntry {
    fn eq(&self, other: &Self) -> bool {
        self.id == other.id
            && self.zone == other.zone
            && self.level == other.level
            && self.content == other.content
            && self.content_hash == other.content_hash
            && self.source == other.source
            && self.quality == other.quality
            && self.usage_count == other.usage_count
    }
}

/// Record of an id that was merged away.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tombstone {
    pub id: EntryId,
    pub survivor_id: EntryId,
    pub content_hash: String,
    pub source: Provenance,
}

#[derive(Debug, Error, PartialEq)]
pub enum LibraryError {
    #[error("content is empty after normalization")]
    NormalizesToEmpty,
    #[error("content duplicates live entry {0}")]
    DuplicateContent(EntryId),
    #[error("unknown or dead entry id {0}")]
    UnknownId(EntryId),
    #[error("cannot merge entry {0} into itself")]
    SelfMerge(EntryId),
    #[error("quality {0} outside [0, 1]")]
    InvalidQuality(f64),
}

/// Trim, collapse whitespace runs to one space, and NFC-normalize.
pub fn normalize_content(raw: &str) -> Result<String, LibraryError> {
    let composed: String = raw.nfc().collect();
    let collapsed = composed.split_whitespace().collect::<Vec<_>>().join(" ");
    if collapsed.is_empty() {
        Err(LibraryError::NormalizesToEmpty)
    } else {
        Ok(collapsed)
    }
}

/// Hex SHA-256 of already-normalized content.
pub fn hash_normalized(normalized: &str) -> String {
    hex::encode(Sha256::digest(normalized.as_bytes()))
}

/// Normalize then hash.
pub fn content_hash(raw: &str) -> Result<String, LibraryError> {
    normalize_content(raw).map(|n| hash_normalized(&n))
}

/// Timestamp source for entry bookkeeping. The logical clock makes library
/// files reproducible byte-for-byte across runs.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum Clock {
    #[default]
    System,
    Logical {
        tick: u64,
    },
}

impl Clock {
    pub fn logical() -> Self {
        Clock::Logical { tick: 0 }
    }

    pub fn now(&mut self) -> DateTime<Utc> {
        match self {
            Clock::System => Utc::now(),
            Clock::Logical { tick } => {
                let base = Utc.with_ymd_and_hms(2025, 1, 1, 0, 0, 0).unwrap();
                let t = base + Duration::seconds(*tick as i64);
                *tick += 1;
                t
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct LibraryStats {
    pub live_count: usize,
    pub per_zone_level_counts: BTreeMap<(Zone, Level), usize>,
    pub tombstone_count: usize,
}

impl LibraryStats {
    pub fn count(&self, zone: Zone, level: Level) -> usize {
        self.per_zone_level_counts.get(&(zone, level)).copied().unwrap_or(0)
    }
}

#[derive(Debug, Clone)]
pub struct ExperienceLibrary {
    entries: BTreeMap<EntryId, ExperienceEntry>,
    index: BTreeMap<(Zone, Level), Vec<EntryId>>,
    by_hash: HashMap<String, EntryId>,
    tombstones: BTreeMap<EntryId, Tombstone>,
    next_id: u64,
    clock: Clock,
}

impl Default for ExperienceLibrary {
    fn default() -> Self {
        Self::new()
    }
}

impl ExperienceLibrary {
    pub fn new() -> Self {
        let mut index = BTreeMap::new();
        for zone in Zone::ALL {
            for level in Level::ALL {
                index.insert((zone, level), Vec::new());
            }
        }
        Self {
            entries: BTreeMap::new(),
            index,
            by_hash: HashMap::new(),
            tombstones: BTreeMap::new(),
            next_id: 1,
            clock: Clock::System,
        }
    }

    pub fn with_clock(mut self, clock: Clock) -> Self {
        self.clock = clock;
        self
    }

    pub fn set_clock(&mut self, clock: Clock) {
        self.clock = clock;
    }

    pub fn version(&self) -> u32 {
        LIBRARY_VERSION
    }

    pub fn next_id(&self) -> EntryId {
        EntryId(self.next_id)
    }

    /// Number of live entries.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: EntryId) -> Option<&ExperienceEntry> {
        self.entries.get(&id)
    }

    /// Live entries in id order.
    pub fn entries(&self) -> impl Iterator<Item = &ExperienceEntry> {
        self.entries.values()
    }

    pub fn tombstones(&self) -> impl Iterator<Item = &Tombstone> {
        self.tombstones.values()
    }

    pub fn tombstone(&self, id: EntryId) -> Option<&Tombstone> {
        self.tombstones.get(&id)
    }

    /// Ids in one (zone, level) partition, in insertion order.
    pub fn partition(&self, zone: Zone, level: Level) -> &[EntryId] {
        self.index.get(&(zone, level)).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Follows tombstone pointers to the live entry that absorbed `id`.
    pub fn resolve(&self, id: EntryId) -> Option<EntryId> {
        let mut cur = id;
        // Chains are acyclic since survivors are always live at merge time,
        // but bound the walk anyway.
        for _ in 0..=self.tombstones.len() {
            if self.entries.contains_key(&cur) {
                return Some(cur);
            }
            cur = self.tombstones.get(&cur)?.survivor_id;
        }
        None
    }

    pub fn find_exact(&self, content: &str) -> Option<EntryId> {
        let hash = content_hash(content).ok()?;
        self.by_hash.get(&hash).copied()
    }

    pub fn find_hash(&self, hash: &str) -> Option<EntryId> {
        self.by_hash.get(hash).copied()
    }

    pub fn insert(
        &mut self,
        zone: Zone,
        level: Level,
        content: &str,
        source: Provenance,
        quality: f64,
    ) -> Result<EntryId, LibraryError> {
        if !(0.0..=1.0).contains(&quality) {
            return Err(LibraryError::InvalidQuality(quality));
        }
        let normalized = normalize_content(content)?;
        let hash = hash_normalized(&normalized);
        if let Some(&existing) = self.by_hash.get(&hash) {
            return Err(LibraryError::DuplicateContent(existing));
        }
        let id = EntryId(self.next_id);
        self.next_id += 1;
        let now = self.clock.now();
        self.by_hash.insert(hash.clone(), id);
        self.index.entry((zone, level)).or_default().push(id);
        self.entries.insert(
            id,
            ExperienceEntry {
                id,
                zone,
                level,
                content: normalized,
                content_hash: hash,
                source,
                quality,
                usage_count: 0,
                created_at: now,
                updated_at: now,
            },
        );
        Ok(id)
    }

    /// Folds `victim` into `survivor`. The survivor takes `merged_content`,
    /// the higher of the two qualities and the summed usage count; the
    /// victim is tombstoned.
    pub fn merge_into(
        &mut self,
        survivor: EntryId,
        victim: EntryId,
        merged_content: &str,
    ) -> Result<EntryId, LibraryError> {
        if survivor == victim {
            return Err(LibraryError::SelfMerge(survivor));
        }
        if !self.entries.contains_key(&survivor) {
            return Err(LibraryError::UnknownId(survivor));
        }
        if !self.entries.contains_key(&victim) {
            return Err(LibraryError::UnknownId(victim));
        }
        let normalized = normalize_content(merged_content)?;
        let hash = hash_normalized(&normalized);
        if let Some(&holder) = self.by_hash.get(&hash) {
            if holder != survivor && holder != victim {
                return Err(LibraryError::DuplicateContent(holder));
            }
        }

        let dead = self.entries.remove(&victim).expect("checked live");
        self.by_hash.remove(&dead.content_hash);
        if let Some(list) = self.index.get_mut(&(dead.zone, dead.level)) {
            list.retain(|&id| id != victim);
        }
        self.tombstones.insert(
            victim,
            Tombstone {
                id: victim,
                survivor_id: survivor,
                content_hash: dead.content_hash,
                source: dead.source,
            },
        );

        let now = self.clock.now();
        let entry = self.entries.get_mut(&survivor).expect("checked live");
        self.by_hash.remove(&entry.content_hash);
        entry.content = normalized;
        entry.content_hash = hash.clone();
        entry.quality = entry.quality.max(dead.quality);
        entry.usage_count += dead.usage_count;
        entry.updated_at = now;
        self.by_hash.insert(hash, survivor);
        Ok(survivor)
    }

    /// Adds retrieval hits to usage counters. Ids merged away since the
    /// retrieval are credited to their survivor; unknown ids are skipped.
    pub fn record_usage(&mut self, ids: &[EntryId]) {
        for &id in ids {
            if let Some(live) = self.resolve(id) {
                if let Some(e) = self.entries.get_mut(&live) {
                    e.usage_count += 1;
                }
            }
        }
    }

    pub fn snapshot_stats(&self) -> LibraryStats {
        let per_zone_level_counts = self.index.iter().map(|(k, v)| (*k, v.len())).collect();
        LibraryStats {
            live_count: self.entries.len(),
            per_zone_level_counts,
            tombstone_count: self.tombstones.len(),
        }
    }

    /// Set of live content hashes.
    pub fn hash_set(&self) -> std::collections::BTreeSet<String> {
        self.by_hash.keys().cloned().collect()
    }

    /// Verifies every structural invariant. Returns the first violation.
    pub fn check_invariants(&self) -> Result<(), String> {
        let mut seen_hashes = HashMap::new();
        for (id, e) in &self.entries {
            if *id != e.id {
                return Err(format!("entry keyed {id} carries id {}", e.id));
            }
            match normalize_content(&e.content) {
                Ok(n) if n == e.content => {}
                _ => return Err(format!("entry {id} content is not normalized")),
            }
            if hash_normalized(&e.content) != e.content_hash {
                return Err(format!("entry {id} hash mismatch"));
            }
            if let Some(other) = seen_hashes.insert(e.content_hash.clone(), *id) {
                return Err(format!("entries {other} and {id} share a content hash"));
            }
            if self.by_hash.get(&e.content_hash) != Some(id) {
                return Err(format!("hash index out of sync for {id}"));
            }
            if !(0.0..=1.0).contains(&e.quality) {
                return Err(format!("entry {id} quality out of range"));
            }
            if e.id.0 >= self.next_id {
                return Err(format!("entry {id} not below next_id {}", self.next_id));
            }
        }
        if self.by_hash.len() != self.entries.len() {
            return Err("hash index has stale keys".into());
        }
        let mut indexed = 0;
        for ((zone, level), ids) in &self.index {
            for id in ids {
                match self.entries.get(id) {
                    Some(e) if e.zone == *zone && e.level == *level => indexed += 1,
                    Some(_) => return Err(format!("entry {id} indexed under wrong partition")),
                    None => return Err(format!("index references dead id {id}")),
                }
            }
            if ids.windows(2).any(|w| w[0] >= w[1]) {
                return Err(format!("partition {zone}/{level} not in insertion order"));
            }
        }
        if indexed != self.entries.len() {
            return Err("some live entry is missing from the index".into());
        }
        for (id, t) in &self.tombstones {
            if self.entries.contains_key(id) {
                return Err(format!("tombstone {id} is also live"));
            }
            if id.0 >= self.next_id {
                return Err(format!("tombstone {id} not below next_id"));
            }
            if !self.entries.contains_key(&t.survivor_id) && !self.tombstones.contains_key(&t.survivor_id) {
                return Err(format!("tombstone {id} points at unknown id {}", t.survivor_id));
            }
        }
        Ok(())
    }

    // Used by the file reader, which has already validated each record.
    fn restore(
        entries: Vec<ExperienceEntry>,
        tombstones: Vec<Tombstone>,
        next_id: u64,
    ) -> Self {
        let mut lib = Self::new();
        for e in entries {
            lib.by_hash.insert(e.content_hash.clone(), e.id);
            lib.index.entry((e.zone, e.level)).or_default().push(e.id);
            lib.entries.insert(e.id, e);
        }
        for list in lib.index.values_mut() {
            list.sort();
        }
        for t in tombstones {
            lib.tombstones.insert(t.id, t);
        }
        lib.next_id = next_id;
        lib
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn src() -> Provenance {
        Provenance::new("t0", 0, "test", 0)
    }

    fn lib() -> ExperienceLibrary {
        ExperienceLibrary::new().with_clock(Clock::logical())
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_content("  Use  modular arithmetic \n").unwrap(), "Use modular arithmetic");
        assert_eq!(normalize_content("abc").unwrap(), "abc");
        assert_eq!(normalize_content(""), Err(LibraryError::NormalizesToEmpty));
        assert_eq!(normalize_content(" \t\n "), Err(LibraryError::NormalizesToEmpty));
    }

    #[test]
    fn normalize_composes_unicode() {
        // "e" + combining acute vs precomposed U+00E9
        assert_eq!(normalize_content("caf\u{0065}\u{0301}").unwrap(), "caf\u{00e9}");
        assert_eq!(content_hash("caf\u{0065}\u{0301}").unwrap(), content_hash("café").unwrap());
    }

    #[test]
    fn first_insert_gets_id_one() {
        let mut l = lib();
        let id = l.insert(Zone::Golden, Level::Strategy, "Verify global constraints before branching", src(), DEFAULT_QUALITY).unwrap();
        assert_eq!(id, EntryId(1));
        assert_eq!(l.len(), 1);
        let again = l.insert(Zone::Golden, Level::Strategy, "Verify global constraints before branching", src(), DEFAULT_QUALITY);
        assert_eq!(again, Err(LibraryError::DuplicateContent(EntryId(1))));
        assert_eq!(l.len(), 1);
    }

    #[test]
    fn whitespace_variants_collide() {
        let mut l = lib();
        l.insert(Zone::Golden, Level::Pattern, "check  the\tunits", src(), 0.5).unwrap();
        // Both normalize to "check the units".
        let r = l.insert(Zone::Warning, Level::Instance, " check the units\n", src(), 0.5);
        assert!(matches!(r, Err(LibraryError::DuplicateContent(_))));
    }

    #[test]
    fn duplicates_are_zone_independent() {
        let mut l = lib();
        l.insert(Zone::Golden, Level::Pattern, "same text", src(), 0.5).unwrap();
        assert!(l.insert(Zone::Warning, Level::Pattern, "same text", src(), 0.5).is_err());
    }

    #[test]
    fn find_exact_cases() {
        let mut l = lib();
        let id = l.insert(Zone::Golden, Level::Pattern, "alpha beta", src(), 0.5).unwrap();
        assert_eq!(l.find_exact("alpha beta"), Some(id));
        assert_eq!(l.find_exact("gamma"), None);
        assert_eq!(l.find_exact("  alpha \n beta "), Some(id));
        assert_eq!(l.find_exact(""), None);
    }

    #[test]
    fn merge_post_state() {
        let mut l = lib();
        let a = l.insert(Zone::Golden, Level::Pattern, "rule one", src(), 0.4).unwrap();
        let b = l.insert(Zone::Golden, Level::Pattern, "rule two", src(), 0.9).unwrap();
        l.record_usage(&[a, b, b]);
        let s = l.merge_into(a, b, "combined rule").unwrap();
        assert_eq!(s, a);
        assert_eq!(l.len(), 1);
        let e = l.get(a).unwrap();
        assert_eq!(e.content, "combined rule");
        assert_eq!(e.content_hash, content_hash("combined rule").unwrap());
        assert_eq!(e.quality, 0.9);
        assert_eq!(e.usage_count, 3);
        assert_eq!(l.tombstone(b).unwrap().survivor_id, a);
        assert_eq!(l.resolve(b), Some(a));
        assert_eq!(l.find_exact("rule two"), None);
        assert_eq!(l.find_exact("combined rule"), Some(a));
        l.check_invariants().unwrap();
    }

    #[test]
    fn merge_errors() {
        let mut l = lib();
        let a = l.insert(Zone::Golden, Level::Pattern, "one", src(), 0.5).unwrap();
        let b = l.insert(Zone::Golden, Level::Pattern, "two", src(), 0.5).unwrap();
        let c = l.insert(Zone::Golden, Level::Pattern, "three", src(), 0.5).unwrap();
        assert_eq!(l.merge_into(a, a, "x"), Err(LibraryError::SelfMerge(a)));
        assert_eq!(l.merge_into(a, EntryId(99), "x"), Err(LibraryError::UnknownId(EntryId(99))));
        assert_eq!(l.merge_into(a, b, "three"), Err(LibraryError::DuplicateContent(c)));
        assert_eq!(l.merge_into(a, b, "  "), Err(LibraryError::NormalizesToEmpty));
        // Keeping the victim's own text is not a collision.
        l.merge_into(a, b, "two").unwrap();
        assert_eq!(l.merge_into(a, b, "x"), Err(LibraryError::UnknownId(b)));
        l.check_invariants().unwrap();
    }

    #[test]
    fn ids_not_reused_after_merge() {
        let mut l = lib();
        let a = l.insert(Zone::Golden, Level::Pattern, "one", src(), 0.5).unwrap();
        let b = l.insert(Zone::Golden, Level::Pattern, "two", src(), 0.5).unwrap();
        l.merge_into(a, b, "one two").unwrap();
        let c = l.insert(Zone::Golden, Level::Pattern, "three", src(), 0.5).unwrap();
        assert_eq!(c, EntryId(3));
    }

    #[test]
    fn stats_examples() {
        let l = lib();
        let s = l.snapshot_stats();
        assert_eq!(s.live_count, 0);
        assert_eq!(s.tombstone_count, 0);
        assert!(s.per_zone_level_counts.values().all(|&c| c == 0));

        let mut l = lib();
        let a = l.insert(Zone::Golden, Level::Strategy, "a", src(), 0.5).unwrap();
        let b = l.insert(Zone::Golden, Level::Pattern, "b", src(), 0.5).unwrap();
        l.insert(Zone::Warning, Level::Instance, "c", src(), 0.5).unwrap();
        l.merge_into(a, b, "a b").unwrap();
        let s = l.snapshot_stats();
        assert_eq!(s.live_count, 2);
        assert_eq!(s.tombstone_count, 1);
        assert_eq!(s.count(Zone::Golden, Level::Strategy), 1);
        assert_eq!(s.count(Zone::Golden, Level::Pattern), 0);
        assert_eq!(s.count(Zone::Warning, Level::Instance), 1);
        assert_eq!(s.per_zone_level_counts.values().sum::<usize>(), s.live_count);
    }

    #[test]
    fn quality_is_range_checked() {
        let mut l = lib();
        assert_eq!(
            l.insert(Zone::Golden, Level::Pattern, "x", src(), 1.5),
            Err(LibraryError::InvalidQuality(1.5))
        );
    }

    #[test]
    fn logical_clock_is_reproducible() {
        let mut a = Clock::logical();
        let mut b = Clock::logical();
        assert_eq!(a.now(), b.now());
        let t1 = a.now();
        let t2 = a.now();
        assert_eq!(t2 - t1, Duration::seconds(1));
    }

    proptest! {
        #[test]
        fn insert_then_find(content in "[a-z ]{0,24}[a-z][a-z \\t\\n]{0,24}") {
            let mut l = lib();
            let id = l.insert(Zone::Golden, Level::Pattern, &content, src(), 0.5).unwrap();
            prop_assert_eq!(l.find_exact(&content), Some(id));
        }

        #[test]
        fn hash_is_normalization_invariant(words in proptest::collection::vec("[a-z]{1,6}", 1..6), pad in "[ \\t\\n]{1,3}") {
            let tight = words.join(" ");
            let loose = format!("{pad}{}{pad}", words.join(&pad));
            prop_assert_eq!(content_hash(&tight).unwrap(), content_hash(&loose).unwrap());
        }
    }
}
