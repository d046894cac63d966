//! Prompt templates used to assemble every model-facing message.
//!
//! The wording of these prompts is part of the pipeline's behavior, so the
//! defaults live in `assets/templates/` as plain text (reviewable, diffable)
//! and each template's required placeholders are validated at load time —
//! a template that silently lost its `{task}` hole would otherwise produce
//! garbage conversations.

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("template {template} is missing placeholder {{{placeholder}}}")]
    MissingPlaceholder { template: String, placeholder: String },

    #[error("unknown template name {0}")]
    UnknownTemplate(String),

    #[error("failed to read template override {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Replaces each `{key}` with its value. Errors if a provided key has no hole
/// in the template: a fill that silently drops content is always a bug.
pub fn fill(template_name: &str, template: &str, pairs: &[(&str, &str)]) -> Result<String, TemplateError> {
    let mut out = template.to_string();
    for (key, value) in pairs {
        let hole = format!("{{{key}}}");
        if !out.contains(&hole) {
            return Err(TemplateError::MissingPlaceholder {
                template: template_name.to_string(),
                placeholder: (*key).to_string(),
            });
        }
        out = out.replace(&hole, value);
    }
    Ok(out)
}

/// Every template the pipeline renders, with its required placeholders.
const TEMPLATE_SPECS: &[(&str, &[&str])] = &[
    ("questioner_system", &["name", "task"]),
    ("roleplayer_system", &["persona"]),
    ("roleplayer_user", &["task", "conversation"]),
    ("persona_system", &[]),
    ("persona_user", &["exemplar_1", "exemplar_2"]),
    ("gold_system", &["persona"]),
    ("gold_user", &["task"]),
    ("judge_system", &[]),
    ("judge_user", &["background", "query", "response_a", "response_b"]),
];

/// The full set of prompt templates for one run. Construct via [`TemplateSet::builtin`]
/// and optionally override individual templates from files.
#[derive(Debug, Clone)]
pub struct TemplateSet {
    pub questioner_system: String,
    pub roleplayer_system: String,
    pub roleplayer_user: String,
    pub persona_system: String,
    pub persona_user: String,
    pub gold_system: String,
    pub gold_user: String,
    pub judge_system: String,
    pub judge_user: String,
}

impl TemplateSet {
    /// The built-in templates shipped with the crate.
    pub fn builtin() -> Self {
        TemplateSet {
            questioner_system: include_str!("../assets/templates/questioner_system.txt").trim_end().to_string(),
            roleplayer_system: include_str!("../assets/templates/roleplayer_system.txt").trim_end().to_string(),
            roleplayer_user: include_str!("../assets/templates/roleplayer_user.txt").trim_end().to_string(),
            persona_system: include_str!("../assets/templates/persona_system.txt").trim_end().to_string(),
            persona_user: include_str!("../assets/templates/persona_user.txt").trim_end().to_string(),
            gold_system: include_str!("../assets/templates/gold_system.txt").trim_end().to_string(),
            gold_user: include_str!("../assets/templates/gold_user.txt").trim_end().to_string(),
            judge_system: include_str!("../assets/templates/judge_system.txt").trim_end().to_string(),
            judge_user: include_str!("../assets/templates/judge_user.txt").trim_end().to_string(),
        }
    }

    fn get_mut(&mut self, name: &str) -> Option<&mut String> {
        match name {
            "questioner_system" => Some(&mut self.questioner_system),
            "roleplayer_system" => Some(&mut self.roleplayer_system),
            "roleplayer_user" => Some(&mut self.roleplayer_user),
            "persona_system" => Some(&mut self.persona_system),
            "persona_user" => Some(&mut self.persona_user),
            "gold_system" => Some(&mut self.gold_system),
            "gold_user" => Some(&mut self.gold_user),
            "judge_system" => Some(&mut self.judge_system),
            "judge_user" => Some(&mut self.judge_user),
            _ => None,
        }
    }

    fn get(&self, name: &str) -> Option<&str> {
        match name {
            "questioner_system" => Some(&self.questioner_system),
            "roleplayer_system" => Some(&self.roleplayer_system),
            "roleplayer_user" => Some(&self.roleplayer_user),
            "persona_system" => Some(&self.persona_system),
            "persona_user" => Some(&self.persona_user),
            "gold_system" => Some(&self.gold_system),
            "gold_user" => Some(&self.gold_user),
            "judge_system" => Some(&self.judge_system),
            "judge_user" => Some(&self.judge_user),
            _ => None,
        }
    }

    /// Replaces templates from `name -> file path` overrides, then re-validates.
    pub fn with_overrides(mut self, overrides: &BTreeMap<String, String>) -> Result<Self, TemplateError> {
        for (name, path) in overrides {
            let content = std::fs::read_to_string(Path::new(path))
                .map_err(|source| TemplateError::Io { path: path.clone(), source })?;
            let slot = self
                .get_mut(name)
                .ok_or_else(|| TemplateError::UnknownTemplate(name.clone()))?;
            *slot = content.trim_end().to_string();
        }
        self.validate()?;
        Ok(self)
    }

    /// Checks that every template still contains its required placeholders.
    pub fn validate(&self) -> Result<(), TemplateError> {
        for (name, required) in TEMPLATE_SPECS {
            let template = self.get(name).expect("spec covers every field");
            for placeholder in *required {
                if !template.contains(&format!("{{{placeholder}}}")) {
                    return Err(TemplateError::MissingPlaceholder {
                        template: (*name).to_string(),
                        placeholder: (*placeholder).to_string(),
                    });
                }
            }
        }
        Ok(())
    }
}

impl Default for TemplateSet {
    fn default() -> Self {
        TemplateSet::builtin()
    }
}
