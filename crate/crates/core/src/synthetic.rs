//! Seeded task suites paired with scripted scenarios, so the whole learning
//! loop can run without a real model.
//!
//! Keyed suites: each task has a secret rule ("key"). The scripted actor
//! answers correctly only when the task's key text is in its prompt, and
//! the scripted critic reveals keys in its feedback and distillations.
//! Regression suites: ranking tasks scored by Spearman correlation.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::evaluators::{Evaluator, Gold};
use crate::gateway::{Matcher, ModelResponse, Role, ScriptedScenario};
use crate::records::FormatError;
use crate::retrieval::LibraryMode;
use crate::task::{TaskInstance, TaskSuite};
use crate::trainer::RunConfig;

pub const SUITE_FILE: &str = "suite.jsonl";
pub const SCENARIO_FILE: &str = "scenario.jsonl";
pub const CONSUMER_SCENARIO_FILE: &str = "consumer.jsonl";
pub const RUN_CONFIG_FILE: &str = "run.toml";
pub const CONSUMER_CONFIG_FILE: &str = "consumer.toml";

const CRITIQUE_FAILURE: &str = "[flex:critique:failure]";
const DISTILL_SUCCESS: &str = "[flex:distill:success]";
const DISTILL_FAILURE: &str = "[flex:distill:failure]";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sharing {
    /// Every task's key is revealed by critiquing that task.
    Unique,
    /// Only the first task in the chain can be unlocked directly; each
    /// later key is distilled from failures of its predecessor.
    Chained,
}

impl Sharing {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "unique" => Some(Sharing::Unique),
            "chained" => Some(Sharing::Chained),
            _ => None,
        }
    }
}

impl fmt::Display for Sharing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Sharing::Unique => "unique",
            Sharing::Chained => "chained",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeyedTask {
    pub marker: String,
    pub word: String,
    pub nonce: String,
    pub key: String,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeyedBundle {
    pub suite: TaskSuite,
    /// Drives actor, critic and updater during training.
    pub producer: ScriptedScenario,
    /// A second actor with different phrasing and no critic, for checking
    /// that a library trained under the producer transfers.
    pub consumer: ScriptedScenario,
    /// In training-file order.
    pub tasks: Vec<KeyedTask>,
    pub sharing: Sharing,
    pub seed: u64,
}

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";
const NONCE_CHARS: &[u8] = b"abcdefghjkmnpqrstuvwxyz23456789";

fn word(rng: &mut ChaCha8Rng) -> String {
    (0..6)
        .map(|i| {
            let set = if i % 2 == 0 { CONSONANTS } else { VOWELS };
            set[rng.gen_range(0..set.len())] as char
        })
        .collect()
}

fn nonce(rng: &mut ChaCha8Rng) -> String {
    (0..8).map(|_| NONCE_CHARS[rng.gen_range(0..NONCE_CHARS.len())] as char).collect()
}

fn test_marker(marker: &str) -> String {
    format!("{}-test]", marker.trim_end_matches(']'))
}

/// Builds a keyed suite of `n_tasks` training tasks plus one held-out
/// rephrasing of each.
pub fn generate_keyed_suite(n_tasks: usize, sharing: Sharing, seed: u64) -> KeyedBundle {
    let n = n_tasks.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut used = BTreeSet::new();
    let mut tasks = Vec::with_capacity(n);
    for i in 1..=n {
        let mut w = word(&mut rng);
        while !used.insert(w.clone()) {
            w = word(&mut rng);
        }
        let nonce = nonce(&mut rng);
        tasks.push(KeyedTask {
            marker: format!("[task:keyed-{i:02}]"),
            key: format!("Rule for item {w} is transform {nonce}"),
            answer: rng.gen_range(100..1000).to_string(),
            word: w,
            nonce,
        });
    }

    let mut suite = TaskSuite {
        name: format!("keyed-{sharing}-{n}-{seed}"),
        library_mode: LibraryMode::Hierarchical,
        ..Default::default()
    };
    for t in &tasks {
        let id = t.marker.trim_start_matches("[task:").trim_end_matches(']');
        suite.train.push(TaskInstance::exact(
            id,
            format!("{} Determine the value of item {} using its rule", t.marker, t.word),
            t.answer.clone(),
        ));
        suite.test.push(TaskInstance::exact(
            format!("{id}-test"),
            format!("{} Report the value of item {} using its rule", test_marker(&t.marker), t.word),
            t.answer.clone(),
        ));
    }

    let mut producer = ScriptedScenario::new(format!("keyed-producer-{sharing}-{seed}"));
    let mut consumer = ScriptedScenario::new(format!("keyed-consumer-{sharing}-{seed}"));
    for t in &tasks {
        for marker in [t.marker.clone(), test_marker(&t.marker)] {
            producer.push_rule(
                Role::Actor,
                Matcher::all_of([marker.as_str(), t.nonce.as_str()]),
                ModelResponse::text(format!("Applied transform {} to item {}.\nANSWER: {}", t.nonce, t.word, t.answer)),
            );
            consumer.push_rule(
                Role::Actor,
                Matcher::all_of([marker.as_str(), t.nonce.as_str()]),
                ModelResponse::text(format!("Inherited guidance covers item {}.\nANSWER: {}", t.word, t.answer)),
            );
        }
    }
    producer.set_default(Role::Actor, ModelResponse::text("No rule is known for this item.\nANSWER: unknown"));
    consumer.set_default(Role::Actor, ModelResponse::text("I cannot tell.\nANSWER: none"));

    // Chained: the file lists the chain back to front, so position j holds
    // chain index n-1-j and the root comes last.
    let chain_index = |pos: usize| match sharing {
        Sharing::Unique => pos,
        Sharing::Chained => n - 1 - pos,
    };
    let by_chain = |c: usize| match sharing {
        Sharing::Unique => &tasks[c],
        Sharing::Chained => &tasks[n - 1 - c],
    };
    for (pos, t) in tasks.iter().enumerate() {
        let c = chain_index(pos);
        let unlock = match sharing {
            Sharing::Unique => true,
            Sharing::Chained => c == 0,
        };
        if unlock {
            producer.push_rule(
                Role::Critic,
                Matcher::all_of([CRITIQUE_FAILURE, t.marker.as_str()]),
                ModelResponse::text(t.key.clone()),
            );
        }
        producer.push_rule(
            Role::Critic,
            Matcher::all_of([DISTILL_SUCCESS, t.marker.as_str()]),
            ModelResponse::text(format!("LEVEL:Strategy|{}", t.key)),
        );
        let warning = match sharing {
            Sharing::Unique => format!("LEVEL:Instance|Item {} cannot be valued by guessing without its rule", t.word),
            Sharing::Chained if c + 1 < n => format!("LEVEL:Instance|{}", by_chain(c + 1).key),
            Sharing::Chained => "LEVEL:Pattern|Items without a recorded rule cannot be valued by guessing".to_string(),
        };
        producer.push_rule(
            Role::Critic,
            Matcher::all_of([DISTILL_FAILURE, t.marker.as_str()]),
            ModelResponse::text(warning),
        );
    }
    producer.set_default(Role::Critic, ModelResponse::text("Look for a recorded rule that names this item."));
    producer.set_default(Role::Updater, ModelResponse::text("DISTINCT"));

    KeyedBundle {
        suite,
        producer,
        consumer,
        tasks,
        sharing,
        seed,
    }
}

fn scripted_config(seed: u64, scenario_file: &str, roles: &[Role]) -> RunConfig {
    let mut cfg = RunConfig {
        seed: Some(seed),
        ..Default::default()
    };
    for r in roles {
        cfg.backends
            .insert(r.to_string().to_ascii_lowercase(), format!("scripted:{scenario_file}"));
    }
    cfg
}

impl KeyedBundle {
    /// Config binding actor, critic and updater to the producer scenario.
    pub fn run_config(&self) -> RunConfig {
        scripted_config(self.seed, SCENARIO_FILE, &[Role::Actor, Role::Critic, Role::Updater])
    }

    /// Config binding only the actor, to the consumer scenario.
    pub fn consumer_config(&self) -> RunConfig {
        scripted_config(self.seed, CONSUMER_SCENARIO_FILE, &[Role::Actor])
    }

    /// Writes the suite, both scenarios and both configs into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), FormatError> {
        std::fs::create_dir_all(dir).map_err(|e| FormatError::io(dir, e))?;
        self.suite.save(&dir.join(SUITE_FILE))?;
        self.producer.save(&dir.join(SCENARIO_FILE))?;
        self.consumer.save(&dir.join(CONSUMER_SCENARIO_FILE))?;
        write_config(&self.run_config(), &dir.join(RUN_CONFIG_FILE))?;
        write_config(&self.consumer_config(), &dir.join(CONSUMER_CONFIG_FILE))
    }
}

fn write_config(cfg: &RunConfig, path: &Path) -> Result<(), FormatError> {
    crate::records::write_atomic(path, &cfg.to_toml()).map_err(|e| FormatError::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressionConfig {
    pub n_tasks: usize,
    pub n_points: usize,
    pub noise: f64,
    pub seed: u64,
    /// Gold decreases with the feature instead of increasing.
    pub reversed: bool,
}

impl RegressionConfig {
    pub fn new(n_points: usize, noise: f64, seed: u64) -> Self {
        Self {
            n_tasks: 3,
            n_points,
            noise,
            seed,
            reversed: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressionBundle {
    pub suite: TaskSuite,
    pub scenario: ScriptedScenario,
    pub seed: u64,
}

impl RegressionBundle {
    pub fn run_config(&self) -> RunConfig {
        scripted_config(self.seed, SCENARIO_FILE, &[Role::Actor, Role::Critic, Role::Updater])
    }

    pub fn write(&self, dir: &Path) -> Result<(), FormatError> {
        std::fs::create_dir_all(dir).map_err(|e| FormatError::io(dir, e))?;
        self.suite.save(&dir.join(SUITE_FILE))?;
        self.scenario.save(&dir.join(SCENARIO_FILE))?;
        write_config(&self.run_config(), &dir.join(RUN_CONFIG_FILE))
    }
}

pub fn generate_regression_suite(n_points: usize, noise: f64, seed: u64) -> RegressionBundle {
    generate_regression(&RegressionConfig::new(n_points, noise, seed))
}

/// Ranking tasks: each publishes one feature per variant; the scripted actor
/// predicts the feature itself, and gold is a monotone transform of the
/// feature plus uniform noise in `[-noise, noise]`. `n_tasks` training
/// tasks and one test task.
pub fn generate_regression(cfg: &RegressionConfig) -> RegressionBundle {
    let n_points = cfg.n_points.max(2);
    let noise = if cfg.noise.is_finite() { cfg.noise.abs() } else { 0.0 };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut suite = TaskSuite {
        name: format!("regression-{n_points}-{}", cfg.seed),
        library_mode: LibraryMode::Hierarchical,
        ..Default::default()
    };
    let mut scenario = ScriptedScenario::new(format!("regression-{}", cfg.seed));
    for i in 1..=cfg.n_tasks.max(1) + 1 {
        let marker = format!("[task:regress-{i:02}]");
        let features: Vec<f64> = (0..n_points)
            .map(|_| {
                let x: f64 = rng.gen_range(0.0..1.0);
                format!("{x:.4}").parse().expect("formatted float parses")
            })
            .collect();
        let gold: Vec<f64> = features
            .iter()
            .map(|&x| {
                let base = (2.0 * x).exp();
                let y = if cfg.reversed { -base } else { base };
                y + noise * rng.gen_range(-1.0..=1.0)
            })
            .collect();
        let listing = features.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(", ");
        let task = TaskInstance::new(
            marker.trim_start_matches("[task:").trim_end_matches(']'),
            format!("{marker} Rank the variants by fitness. Published feature per variant: {listing}"),
            Gold::Values(gold),
            Evaluator::SpearmanRho,
        );
        if i <= cfg.n_tasks.max(1) {
            suite.train.push(task);
        } else {
            suite.test.push(task);
        }
        scenario.push_rule(
            Role::Actor,
            Matcher::contains(marker.as_str()),
            ModelResponse::text(format!("Scoring each variant by its published feature.\nANSWER: {listing}")),
        );
    }
    scenario.set_default(Role::Actor, ModelResponse::text("ANSWER: "));
    scenario.set_default(
        Role::Critic,
        ModelResponse::text("LEVEL:Pattern|Rank variants by the published feature before applying corrections"),
    );
    scenario.set_default(Role::Updater, ModelResponse::text("DISTINCT"));
    RegressionBundle {
        suite,
        scenario,
        seed: cfg.seed,
    }
}
