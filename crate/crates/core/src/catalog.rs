//! Human-editable task catalog: palette, split vocabularies, templates.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const BUILTIN: &str = include_str!("../data/tasks.toml");

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Splits {
    pub seen: Vec<String>,
    pub unseen: Vec<String>,
    pub shared: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskDoc {
    pub name: String,
    pub instruction_mode: String,
    pub metric: String,
    pub template: String,
    pub schedule_max: usize,
    pub objects: BTreeMap<String, [usize; 2]>,
    #[serde(default)]
    pub places: Vec<String>,
}

impl TaskDoc {
    /// Inclusive count range for an object group.
    pub fn count(&self, key: &str) -> Result<(usize, usize)> {
        self.objects
            .get(key)
            .map(|r| (r[0], r[1]))
            .ok_or_else(|| Error::Config(format!("task {} has no object group {key}", self.name)))
    }

    /// Fill `{slot}` placeholders in the template.
    pub fn render(&self, slots: &[(&str, &str)]) -> String {
        let mut s = self.template.clone();
        for (k, v) in slots {
            s = s.replace(&format!("{{{k}}}"), v);
        }
        s
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Catalog {
    pub palette: BTreeMap<String, [f32; 3]>,
    pub fixtures: BTreeMap<String, [f32; 3]>,
    pub splits: Splits,
    #[serde(rename = "task")]
    pub tasks: Vec<TaskDoc>,
}

impl Catalog {
    pub fn parse(text: &str) -> Result<Self> {
        let cat: Catalog = toml::from_str(text)?;
        cat.validate()?;
        Ok(cat)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// The catalog compiled into the crate.
    pub fn builtin() -> &'static Catalog {
        static CAT: OnceLock<Catalog> = OnceLock::new();
        CAT.get_or_init(|| Catalog::parse(BUILTIN).expect("builtin catalog is valid"))
    }

    fn validate(&self) -> Result<()> {
        let all = self.splits.seen.iter().chain(&self.splits.unseen).chain(&self.splits.shared);
        for c in all {
            if !self.palette.contains_key(c) {
                return Err(Error::Config(format!("split color {c} missing from palette")));
            }
        }
        for t in &self.tasks {
            if t.instruction_mode != "goal" && t.instruction_mode != "step" {
                return Err(Error::Config(format!(
                    "task {}: instruction_mode must be goal or step",
                    t.name
                )));
            }
        }
        Ok(())
    }

    pub fn task(&self, name: &str) -> Result<&TaskDoc> {
        self.tasks
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Config(format!("unknown task {name}")))
    }

    pub fn rgb(&self, color: &str) -> Result<[f32; 3]> {
        self.palette
            .get(color)
            .or_else(|| self.fixtures.get(color))
            .copied()
            .ok_or_else(|| Error::Config(format!("unknown color {color}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_parses() {
        let c = Catalog::builtin();
        assert_eq!(c.tasks.len(), 4);
        assert_eq!(c.splits.seen, ["yellow", "brown", "gray", "cyan"]);
        assert_eq!(c.splits.unseen, ["orange", "purple", "pink", "white"]);
        assert_eq!(c.splits.shared, ["red", "green", "blue"]);
    }

    #[test]
    fn template_rendering() {
        let t = Catalog::builtin().task("put-blocks-in-bowls").unwrap();
        assert_eq!(
            t.render(&[("pick", "red"), ("place", "cyan")]),
            "put the red blocks in a cyan bowl"
        );
    }

    #[test]
    fn unknown_task_is_config_error() {
        assert!(matches!(Catalog::builtin().task("align-rope"), Err(Error::Config(_))));
    }

    #[test]
    fn missing_palette_color_rejected() {
        let text = BUILTIN.replace("cyan = [0.0, 1.0, 1.0]", "");
        assert!(Catalog::parse(&text).is_err());
    }
}
