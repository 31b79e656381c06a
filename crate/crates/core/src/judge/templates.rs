//! The four judge prompt templates (surfacing and violation detection, each
//! per interactional context), shipped as versioned assets.

use crate::error::TemplateError;
use crate::taxonomy::{InteractionalContext, Norm};
use crate::util::{render_template, split_version_header, string_enum};

string_enum! {
    /// Which judge job and context a template serves.
    JudgeTemplateKind {
        SurfaceHh => "surface_hh",
        SurfaceHai => "surface_hai",
        ViolationHh => "violation_hh",
        ViolationHai => "violation_hai",
    }
}

/// One judge prompt template with placeholders {norm_list}, {prompt}, and
/// (for violation templates) {response}.
#[derive(Debug, Clone)]
pub struct JudgePromptTemplate {
    pub kind: JudgeTemplateKind,
    pub version: String,
    pub text: String,
}

impl JudgePromptTemplate {
    fn from_asset(kind: JudgeTemplateKind, raw: &str) -> Result<Self, TemplateError> {
        let (version, text) = split_version_header(raw)?;
        Ok(JudgePromptTemplate {
            kind,
            version,
            text,
        })
    }

    /// Render a surfacing prompt.
    pub fn render_surfacing(&self, norm_list: &str, prompt: &str) -> Result<String, TemplateError> {
        render_template(&self.text, &[("norm_list", norm_list), ("prompt", prompt)])
    }

    /// Render a violation-detection prompt.
    pub fn render_violation(
        &self,
        norm_list: &str,
        prompt: &str,
        response: &str,
    ) -> Result<String, TemplateError> {
        render_template(
            &self.text,
            &[
                ("norm_list", norm_list),
                ("prompt", prompt),
                ("response", response),
            ],
        )
    }
}

/// The full set of four templates.
#[derive(Debug, Clone)]
pub struct JudgeTemplates {
    pub surface_hh: JudgePromptTemplate,
    pub surface_hai: JudgePromptTemplate,
    pub violation_hh: JudgePromptTemplate,
    pub violation_hai: JudgePromptTemplate,
}

impl JudgeTemplates {
    /// The templates shipped with the crate.
    pub fn builtin() -> Self {
        JudgeTemplates {
            surface_hh: JudgePromptTemplate::from_asset(
                JudgeTemplateKind::SurfaceHh,
                include_str!("../../assets/judge_surface_hh.txt"),
            )
            .expect("builtin surface_hh template is well-formed"),
            surface_hai: JudgePromptTemplate::from_asset(
                JudgeTemplateKind::SurfaceHai,
                include_str!("../../assets/judge_surface_hai.txt"),
            )
            .expect("builtin surface_hai template is well-formed"),
            violation_hh: JudgePromptTemplate::from_asset(
                JudgeTemplateKind::ViolationHh,
                include_str!("../../assets/judge_violation_hh.txt"),
            )
            .expect("builtin violation_hh template is well-formed"),
            violation_hai: JudgePromptTemplate::from_asset(
                JudgeTemplateKind::ViolationHai,
                include_str!("../../assets/judge_violation_hai.txt"),
            )
            .expect("builtin violation_hai template is well-formed"),
        }
    }

    /// Version shared by the four shipped templates.
    pub fn version(&self) -> &str {
        &self.surface_hh.version
    }

    pub fn surfacing(&self, context: InteractionalContext) -> &JudgePromptTemplate {
        match context {
            InteractionalContext::HumanHuman => &self.surface_hh,
            InteractionalContext::HumanAi => &self.surface_hai,
        }
    }

    pub fn violation(&self, context: InteractionalContext) -> &JudgePromptTemplate {
        match context {
            InteractionalContext::HumanHuman => &self.violation_hh,
            InteractionalContext::HumanAi => &self.violation_hai,
        }
    }
}

/// Candidates rendered as an enumerated "[id] text" list, so judges can
/// answer with ids instead of echoing norm text.
pub fn render_norm_list(norms: &[&Norm]) -> String {
    norms
        .iter()
        .enumerate()
        .map(|(i, n)| format!("{}. [{}] {}", i + 1, n.id, n.text))
        .collect::<Vec<_>>()
        .join("\n")
}
