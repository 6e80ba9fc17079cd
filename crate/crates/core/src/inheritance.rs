//! Moving libraries between agents: export, validated import, and merging
//! one library into another through the updater.

use std::path::Path;

use crate::experience::ExperienceLibrary;
use crate::explorer::CandidateExperience;
use crate::records::FormatError;
use crate::updater::{ApplyError, MetaStep, StepContext, StepSink, Updater};

pub fn export(library: &ExperienceLibrary, path: &Path) -> Result<(), FormatError> {
    library.save(path)
}

/// Loads and fully validates a library file.
pub fn import(path: &Path) -> Result<ExperienceLibrary, FormatError> {
    ExperienceLibrary::load(path)
}

#[derive(Debug)]
pub struct MergeOutcome {
    pub library: ExperienceLibrary,
    pub step: MetaStep,
}

/// Feeds every live entry of `incoming` (in id order) through the updater
/// against an evolving copy of `base`. The base keeps its ids; incoming
/// entries that survive get fresh ids and keep their provenance. Incoming
/// tombstones and usage counts are not carried over.
pub fn merge_libraries(
    base: &ExperienceLibrary,
    incoming: &ExperienceLibrary,
    updater: &Updater<'_>,
    sample_id: &str,
    sink: &mut dyn StepSink,
) -> Result<MergeOutcome, ApplyError> {
    let candidates: Vec<CandidateExperience> = incoming
        .entries()
        .map(|e| CandidateExperience {
            zone: e.zone,
            level: e.level,
            content: e.content.clone(),
            quality: e.quality,
            source: e.source.clone(),
        })
        .collect();
    let mut library = base.clone();
    let ctx = StepContext {
        sample_id: sample_id.to_string(),
        epoch: 0,
        usage: Vec::new(),
    };
    let step = updater.apply(&mut library, &candidates, &ctx, sink)?;
    Ok(MergeOutcome { library, step })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experience::{Clock, Level, Provenance, Zone};
    use crate::templates::Templates;
    use crate::updater::NullSink;

    fn lib(texts: &[(&str, Zone)], producer: &str) -> ExperienceLibrary {
        let mut l = ExperienceLibrary::new().with_clock(Clock::logical());
        for (i, (t, z)) in texts.iter().enumerate() {
            l.insert(*z, Level::Pattern, t, Provenance::new("task", i as u64, producer, 1), 0.5).unwrap();
        }
        l
    }

    #[test]
    fn export_import_round_trip() {
        let l = lib(&[("one thing", Zone::Golden), ("another thing", Zone::Warning), ("third", Zone::Golden)], "p");
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.jsonl");
        export(&l, &path).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), 4);
        let back = import(&path).unwrap();
        assert_eq!(back.hash_set(), l.hash_set());
        for (a, b) in l.entries().zip(back.entries()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn merge_cases() {
        let t = Templates::default();
        let u = Updater::new(None, &t);
        let a = lib(
            &[
                ("carry the remainder before dividing", Zone::Golden),
                ("sketch the reaction center first", Zone::Golden),
                ("guessing units fails", Zone::Warning),
            ],
            "producer-a",
        );
        let b = lib(&[("balance charges on both sides", Zone::Golden), ("check chirality labels", Zone::Warning)], "producer-b");
        let m = merge_libraries(&a, &b, &u, "merge", &mut NullSink::default()).unwrap();
        assert_eq!(m.library.len(), 5);
        assert_eq!(m.library.get(crate::experience::EntryId(4)).unwrap().source.producer, "producer-b");

        let self_merge = merge_libraries(&a, &a, &u, "merge", &mut NullSink::default()).unwrap();
        assert_eq!(self_merge.library.hash_set(), a.hash_set());
        assert_eq!(self_merge.step.discards(), 3);

        let empty = ExperienceLibrary::new();
        let id = merge_libraries(&a, &empty, &u, "merge", &mut NullSink::default()).unwrap();
        assert_eq!(id.library.to_text(), a.to_text());
    }
}
