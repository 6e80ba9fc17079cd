//! Prompt templates for every model role.
//!
//! The shipped set is compiled in from `templates/`; a directory with the
//! same file names can override any subset. Placeholders are `{name}`;
//! unknown placeholders are left untouched and substituted values are never
//! re-scanned.

use std::fs;
use std::io;
use std::path::Path;

pub const TEMPLATE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Templates {
    pub actor_system: String,
    pub actor_user: String,
    pub refine_user: String,
    pub critique_failure_system: String,
    pub critique_success_system: String,
    pub critique_user: String,
    pub distill_success_system: String,
    pub distill_failure_system: String,
    pub distill_user: String,
    pub updater_system: String,
    pub updater_user: String,
    pub retriever_system: String,
    pub retriever_user: String,
}

macro_rules! shipped {
    ($name:literal) => {
        include_str!(concat!(env!("CARGO_MANIFEST_DIR"), "/templates/", $name, ".txt")).to_string()
    };
}

impl Default for Templates {
    fn default() -> Self {
        Self {
            actor_system: shipped!("actor_system"),
            actor_user: shipped!("actor_user"),
            refine_user: shipped!("refine_user"),
            critique_failure_system: shipped!("critique_failure_system"),
            critique_success_system: shipped!("critique_success_system"),
            critique_user: shipped!("critique_user"),
            distill_success_system: shipped!("distill_success_system"),
            distill_failure_system: shipped!("distill_failure_system"),
            distill_user: shipped!("distill_user"),
            updater_system: shipped!("updater_system"),
            updater_user: shipped!("updater_user"),
            retriever_system: shipped!("retriever_system"),
            retriever_user: shipped!("retriever_user"),
        }
    }
}

impl Templates {
    /// Shipped templates with any `<name>.txt` in `dir` taking precedence.
    /// A `VERSION` file, if present, must match [`TEMPLATE_VERSION`].
    pub fn load_dir(dir: &Path) -> io::Result<Self> {
        if let Ok(v) = fs::read_to_string(dir.join("VERSION")) {
            if v.trim() != TEMPLATE_VERSION.to_string() {
                return Err(io::Error::new(
                    io::ErrorKind::InvalidData,
                    format!("template version {} unsupported (expected {TEMPLATE_VERSION})", v.trim()),
                ));
            }
        }
        let mut t = Self::default();
        let slots: [(&str, &mut String); 13] = [
            ("actor_system", &mut t.actor_system),
            ("actor_user", &mut t.actor_user),
            ("refine_user", &mut t.refine_user),
            ("critique_failure_system", &mut t.critique_failure_system),
            ("critique_success_system", &mut t.critique_success_system),
            ("critique_user", &mut t.critique_user),
            ("distill_success_system", &mut t.distill_success_system),
            ("distill_failure_system", &mut t.distill_failure_system),
            ("distill_user", &mut t.distill_user),
            ("updater_system", &mut t.updater_system),
            ("updater_user", &mut t.updater_user),
            ("retriever_system", &mut t.retriever_system),
            ("retriever_user", &mut t.retriever_user),
        ];
        for (name, slot) in slots {
            let path = dir.join(format!("{name}.txt"));
            match fs::read_to_string(&path) {
                Ok(s) => *slot = s,
                Err(e) if e.kind() == io::ErrorKind::NotFound => {}
                Err(e) => return Err(e),
            }
        }
        Ok(t)
    }

    pub fn render(&self, template: &str, values: &[(&str, &str)]) -> String {
        render(template, values)
    }
}

pub fn render(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let close = after.find('}');
        let name = close.map(|c| &after[..c]);
        match name.and_then(|n| values.iter().find(|(k, _)| *k == n)) {
            Some((_, v)) => {
                out.push_str(v);
                rest = &after[close.unwrap() + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out.trim_end_matches('\n').to_string()
}
