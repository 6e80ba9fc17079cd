//! Task instances, suites and the `flex-suite` file format.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::evaluators::{Evaluator, Gold};
use crate::records::{self, FormatError};
use crate::retrieval::LibraryMode;

pub const SUITE_FORMAT: &str = "flex-suite";
pub const SUITE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub task_id: String,
    pub input_x: String,
    pub gold_y: Gold,
    pub evaluator: Evaluator,
}

impl TaskInstance {
    pub fn new(task_id: impl Into<String>, input_x: impl Into<String>, gold_y: Gold, evaluator: Evaluator) -> Self {
        Self {
            task_id: task_id.into(),
            input_x: input_x.into(),
            gold_y,
            evaluator,
        }
    }

    pub fn exact(task_id: impl Into<String>, input_x: impl Into<String>, gold: impl Into<String>) -> Self {
        Self::new(task_id, input_x, Gold::Text(gold.into()), Evaluator::ExactMatch)
    }

    pub fn score(&self, answer: &str) -> f64 {
        self.evaluator.score(answer, &self.gold_y)
    }

    /// Reference answer as shown to the critic.
    pub fn reference_text(&self) -> String {
        match &self.gold_y {
            Gold::Text(t) => t.clone(),
            Gold::Values(v) => v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", "),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.task_id.trim().is_empty() {
            return Err("task_id is empty".into());
        }
        if !self.evaluator.accepts(&self.gold_y) {
            return Err(format!("gold_y does not fit evaluator {:?}", self.evaluator));
        }
        Ok(())
    }
}

/// Pulls the final answer out of a model reply: the text after the last
/// `ANSWER:` marker, or the whole trimmed reply if there is none.
pub fn extract_answer(content: &str) -> String {
    match content.rfind("ANSWER:") {
        Some(pos) => {
            let tail = &content[pos + "ANSWER:".len()..];
            tail.lines().next().unwrap_or("").trim().to_string()
        }
        None => content.trim().to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TaskSuite {
    pub name: String,
    pub train: Vec<TaskInstance>,
    pub test: Vec<TaskInstance>,
    pub library_mode: LibraryMode,
}

#[derive(Serialize, Deserialize)]
struct SuiteHeader {
    #[serde(default)]
    name: String,
    #[serde(default)]
    library_mode: LibraryMode,
}

#[derive(Serialize, Deserialize)]
struct SuiteRecord {
    split: Split,
    #[serde(flatten)]
    task: TaskInstance,
}

impl TaskSuite {
    pub fn validate(&self) -> Result<(), String> {
        let mut seen = HashSet::new();
        for t in self.train.iter().chain(&self.test) {
            t.validate().map_err(|e| format!("task {}: {e}", t.task_id))?;
            if !seen.insert(t.task_id.as_str()) {
                return Err(format!("duplicate task_id {}", t.task_id));
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let recs: Vec<SuiteRecord> = self
            .train
            .iter()
            .map(|t| (Split::Train, t))
            .chain(self.test.iter().map(|t| (Split::Test, t)))
            .map(|(split, t)| SuiteRecord { split, task: t.clone() })
            .collect();
        records::render(
            SUITE_FORMAT,
            SUITE_VERSION,
            SuiteHeader {
                name: self.name.clone(),
                library_mode: self.library_mode,
            },
            &recs,
        )
    }

    pub fn from_text(text: &str) -> Result<Self, FormatError> {
        let parsed = records::parse::<SuiteHeader, SuiteRecord>(text, SUITE_FORMAT, SUITE_VERSION)?;
        let mut suite = TaskSuite {
            name: parsed.header.name,
            library_mode: parsed.header.library_mode,
            ..Default::default()
        };
        let mut seen = HashSet::new();
        for (line, rec) in parsed.records {
            rec.task.validate().map_err(|e| FormatError::corrupt(line, e))?;
            if !seen.insert(rec.task.task_id.clone()) {
                return Err(FormatError::corrupt(line, format!("duplicate task_id {}", rec.task.task_id)));
            }
            match rec.split {
                Split::Train => suite.train.push(rec.task),
                Split::Test => suite.test.push(rec.task),
            }
        }
        Ok(suite)
    }

    pub fn save(&self, path: &Path) -> Result<(), FormatError> {
        records::write_atomic(path, &self.to_text()).map_err(|e| FormatError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, FormatError> {
        Self::from_text(&records::read_file(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn answer_extraction() {
        assert_eq!(extract_answer("thinking...\nANSWER: 42"), "42");
        assert_eq!(extract_answer("ANSWER: 1\nmore\nANSWER:  7 \ntrailing"), "7");
        assert_eq!(extract_answer("  just text \n"), "just text");
    }

    #[test]
    fn suite_round_trip_and_validation() {
        let suite = TaskSuite {
            name: "s".into(),
            train: vec![
                TaskInstance::exact("a", "2+2?", "4"),
                TaskInstance::new("r", "rank", Gold::Values(vec![1.0, 2.0, 3.5]), Evaluator::SpearmanRho),
            ],
            test: vec![TaskInstance::new(
                "n",
                "pi?",
                Gold::Text("3.1416".into()),
                Evaluator::NumericTolerance { atol: 1e-3 },
            )],
            library_mode: LibraryMode::Flat,
        };
        suite.validate().unwrap();
        let text = suite.to_text();
        assert!(text.starts_with("{\"format\":\"flex-suite\",\"version\":1"));
        assert_eq!(TaskSuite::from_text(&text).unwrap(), suite);
    }

    #[test]
    fn gold_type_must_match_evaluator() {
        let bad = "{\"format\":\"flex-suite\",\"version\":1,\"name\":\"x\"}\n\
                   {\"split\":\"train\",\"task_id\":\"a\",\"input_x\":\"q\",\"gold_y\":\"text\",\"evaluator\":{\"kind\":\"SpearmanRho\"}}\n";
        assert_eq!(TaskSuite::from_text(bad).unwrap_err().line(), Some(2));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let t = TaskInstance::exact("a", "q", "1");
        let s = TaskSuite {
            train: vec![t.clone()],
            test: vec![t],
            ..Default::default()
        };
        assert!(s.validate().is_err());
        assert_eq!(TaskSuite::from_text(&s.to_text()).unwrap_err().line(), Some(3));
    }
}
