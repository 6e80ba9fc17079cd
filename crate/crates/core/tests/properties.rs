use std::collections::BTreeSet;

use proptest::prelude::*;

use flex_core::experience::{content_hash, Clock, ExperienceLibrary, Level, Provenance, Zone};
use flex_core::explorer::{CandidateExperience, ExploreConfig, Explorer};
use flex_core::gateway::{Gateway, Matcher, ModelResponse, Role, ScriptedScenario};
use flex_core::inheritance::merge_libraries;
use flex_core::retrieval::LibraryMode;
use flex_core::synthetic::{generate_keyed_suite, Sharing};
use flex_core::templates::Templates;
use flex_core::trainer::{checkpoint_name, RunConfig, Trainer};
use flex_core::updater::{NullSink, StepContext, UpdateDecision, Updater};

const WORDS: &[&str] = &["check", "units", "sum", "parity", "ring", "bond", "charge", "rank", "rule", "item", "final", "step"];

fn text() -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(WORDS), 1..5).prop_map(|w| w.join(" "))
}

fn place() -> impl Strategy<Value = (Zone, Level)> {
    (prop::sample::select(Zone::ALL.to_vec()), prop::sample::select(Level::ALL.to_vec()))
}

fn candidates() -> impl Strategy<Value = Vec<CandidateExperience>> {
    prop::collection::vec(
        (place(), text(), 0.0..=1.0f64).prop_map(|((zone, level), content, quality)| CandidateExperience {
            zone,
            level,
            content,
            quality,
            source: Provenance::new("p", 0, "gen", 1),
        }),
        0..12,
    )
}

fn library_from(cands: &[CandidateExperience]) -> ExperienceLibrary {
    let mut lib = ExperienceLibrary::new().with_clock(Clock::logical());
    for c in cands {
        let _ = lib.insert(c.zone, c.level, &c.content, c.source.clone(), c.quality);
    }
    lib
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn step_size_accounting(existing in candidates(), incoming in candidates()) {
        let t = Templates::default();
        let mut lib = library_from(&existing);
        let step = Updater::new(None, &t)
            .apply(&mut lib, &incoming, &StepContext::default(), &mut NullSink::default())
            .unwrap();
        prop_assert_eq!(step.library_size_after, step.library_size_before + step.inserts());
        prop_assert_eq!(step.decisions.len(), incoming.len());
        prop_assert_eq!(lib.len(), step.library_size_after);
        prop_assert!(lib.check_invariants().is_ok());
    }

    #[test]
    fn deterministic_updater_apply_is_idempotent(existing in candidates(), incoming in candidates(), merge_word in prop::sample::select(WORDS)) {
        let mut s = ScriptedScenario::new("idem");
        let mut lib = library_from(&existing);
        if let Some(first) = lib.entries().next() {
            // candidates mentioning `merge_word` fold into the first entry, keeping its text
            s.push_rule(Role::Updater, Matcher::contains(format!("):\n{merge_word}")), ModelResponse::text(format!("MERGE:{}|{}", first.id, first.content)));
        }
        s.set_default(Role::Updater, ModelResponse::text("DISTINCT"));
        let g = Gateway::new();
        g.bind_scenario(Role::Updater, s);
        let t = Templates::default();
        let u = Updater::new(Some(&g), &t);
        u.apply(&mut lib, &incoming, &StepContext::default(), &mut NullSink::default()).unwrap();
        let once = lib.hash_set();
        u.apply(&mut lib, &incoming, &StepContext::default(), &mut NullSink::default()).unwrap();
        prop_assert_eq!(lib.hash_set(), once);
    }

    #[test]
    fn merged_libraries_contain_no_fabricated_text(a in candidates(), b in candidates()) {
        let t = Templates::default();
        let (la, lb) = (library_from(&a), library_from(&b));
        let out = merge_libraries(&la, &lb, &Updater::new(None, &t), "m", &mut NullSink::default()).unwrap();
        let mut allowed: BTreeSet<String> = la.hash_set().union(&lb.hash_set()).cloned().collect();
        for rec in &out.step.audit {
            if let Some(m) = &rec.merged_content {
                allowed.insert(content_hash(m).unwrap());
            }
        }
        prop_assert!(out.library.hash_set().is_subset(&allowed));
        prop_assert!(out.library.next_id().0 >= la.next_id().0);
        let self_merge = merge_libraries(&la, &la, &Updater::new(None, &t), "m", &mut NullSink::default()).unwrap();
        prop_assert_eq!(self_merge.library.hash_set(), la.hash_set());
    }

    #[test]
    fn exact_duplicates_never_reach_the_updater(existing in candidates(), pick in any::<prop::sample::Index>()) {
        let lib = library_from(&existing);
        prop_assume!(!lib.is_empty());
        let entries: Vec<_> = lib.entries().collect();
        let e = entries[pick.index(entries.len())];
        let g = Gateway::new();
        let mut s = ScriptedScenario::new("never");
        s.set_default(Role::Updater, ModelResponse::text("MERGE:1|x"));
        g.bind_scenario(Role::Updater, s);
        let t = Templates::default();
        let cand = CandidateExperience {
            zone: e.zone,
            level: e.level,
            content: format!("  {}  ", e.content),
            quality: 0.9,
            source: Provenance::new("x", 0, "y", 0),
        };
        let d = Updater::new(Some(&g), &t).decide(&cand, &lib).unwrap();
        prop_assert_eq!(d, UpdateDecision::Discard { duplicate_of: e.id });
        prop_assert_eq!(g.call_count(Role::Updater), 0);
    }
}

fn producer(bundle: &flex_core::synthetic::KeyedBundle) -> Gateway {
    let g = Gateway::new();
    for r in [Role::Actor, Role::Critic, Role::Updater] {
        g.bind_scenario(r, bundle.producer.clone());
    }
    g
}

#[test]
fn checkpoints_reproduce_reported_test_accuracy() {
    let bundle = generate_keyed_suite(6, Sharing::Chained, 5);
    let g = producer(&bundle);
    let t = Templates::default();
    let cfg = RunConfig {
        epochs: 3,
        test_each_epoch: true,
        ..bundle.run_config()
    };
    let dir = tempfile::tempdir().unwrap();
    let trainer = Trainer::new(&g, &t, cfg);
    let out = trainer.train(&bundle.suite, ExperienceLibrary::new(), Some(dir.path())).unwrap();
    for rec in &out.report.epochs {
        let ckpt = ExperienceLibrary::load(&dir.path().join(checkpoint_name(rec.epoch))).unwrap();
        assert_eq!(ckpt.len(), rec.library_size);
        let again = trainer.evaluate(&bundle.suite.test, &ckpt, LibraryMode::Hierarchical).aggregate;
        assert_eq!(Some(again), rec.test_accuracy, "epoch {}", rec.epoch);
    }
}

#[test]
fn distilled_zones_follow_acceptance_and_carry_provenance() {
    let bundle = generate_keyed_suite(3, Sharing::Unique, 2);
    let g = producer(&bundle);
    let t = Templates::default();
    let ex = Explorer::new(&g, &t, ExploreConfig::default());
    for task in &bundle.suite.train {
        let r = ex.explore(task, &ExperienceLibrary::new()).unwrap();
        assert!(r.solved);
        assert_eq!(r.candidates.len(), r.trajectories.len());
        for c in &r.candidates {
            let t = &r.trajectories[c.source.trajectory_index as usize];
            assert_eq!(c.zone == Zone::Golden, t.accepted);
            assert_eq!(c.source.task_id, task.task_id);
            assert!(c.source.producer.starts_with("scripted:keyed-producer"));
        }
    }
}

#[test]
fn flat_mode_trains_to_the_same_accuracy() {
    let mut bundle = generate_keyed_suite(5, Sharing::Chained, 8);
    bundle.suite.library_mode = LibraryMode::Flat;
    let g = producer(&bundle);
    let t = Templates::default();
    let out = Trainer::new(&g, &t, RunConfig { epochs: 2, ..bundle.run_config() })
        .train(&bundle.suite, ExperienceLibrary::new(), None)
        .unwrap();
    assert_eq!(out.report.epochs[1].train_accuracy, 1.0);
    assert!(out.library.entries().all(|e| e.level == Level::Pattern));
}

#[test]
fn warm_start_keeps_inherited_entries() {
    let bundle = generate_keyed_suite(4, Sharing::Chained, 12);
    let g = producer(&bundle);
    let t = Templates::default();
    let trainer = Trainer::new(&g, &t, RunConfig { epochs: 2, ..bundle.run_config() });
    let first = trainer.train(&bundle.suite, ExperienceLibrary::new(), None).unwrap();
    let second = trainer.train(&bundle.suite, first.library.clone(), None).unwrap();
    assert_eq!(second.report.epochs[0].train_accuracy, 1.0);
    assert_eq!(second.report.epochs[0].new_entries, 0);
    assert!(first.library.hash_set().is_subset(&second.library.hash_set()));
}
