//! Six-dimension label taxonomy for sociocultural norms, the `Norm` record,
//! and label-level operations: validation, filtering, and judge-assisted
//! annotation.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::backends::{Backend, CompletionParams, CompletionRequest, Purpose};
use crate::error::{AnnotateError, JudgeError, TemplateError};
use crate::judge::parse::extract_first_json;
use crate::util::{context_key, render_template, split_version_header, string_enum};

/// Error for an unrecognized label token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseLabelError {
    pub slot: &'static str,
    pub value: String,
}

impl fmt::Display for ParseLabelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "unknown {} label `{}`", self.slot, self.value)
    }
}

impl std::error::Error for ParseLabelError {}

string_enum! {
    /// Whether a norm operates broadly or only inside a specific situation.
    SituationalContext {
        General => "general",
        SituationSpecific => "situation_specific",
    }
}

string_enum! {
    /// Which kind of interaction the norm governs.
    InteractionalContext {
        HumanHuman => "human_human",
        HumanAi => "human_ai",
    }
}

string_enum! {
    /// What the norm regulates.
    DomainOfConduct {
        Behavior => "behavior",
        Belief => "belief",
        Language => "language",
    }
}

string_enum! {
    /// Whether the norm is stated as a command or as common practice.
    ModeOfArticulation {
        Prescriptive => "prescriptive",
        Descriptive => "descriptive",
    }
}

string_enum! {
    /// What enforces the norm.
    BasisOfAdherence {
        Formal => "formal",
        Informal => "informal",
    }
}

/// Full label set for one norm. Set-valued slots are sorted and deduplicated
/// in every serialized form, so equal label sets serialize identically.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaxonomyLabels {
    pub situational: SituationalContext,
    pub interactional: BTreeSet<InteractionalContext>,
    pub conduct: BTreeSet<DomainOfConduct>,
    /// Accepts the header alias `expression` seen in some source tables.
    #[serde(alias = "expression")]
    pub articulation: BTreeSet<ModeOfArticulation>,
    pub adherence: BTreeSet<BasisOfAdherence>,
}

impl TaxonomyLabels {
    /// Convenience constructor from slices; dedupes and sorts set slots.
    pub fn new(
        situational: SituationalContext,
        interactional: &[InteractionalContext],
        conduct: &[DomainOfConduct],
        articulation: &[ModeOfArticulation],
        adherence: &[BasisOfAdherence],
    ) -> Self {
        TaxonomyLabels {
            situational,
            interactional: interactional.iter().copied().collect(),
            conduct: conduct.iter().copied().collect(),
            articulation: articulation.iter().copied().collect(),
            adherence: adherence.iter().copied().collect(),
        }
    }
}

/// One constraint broken by a label set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelViolation {
    pub slot: String,
    pub message: String,
}

/// Result of validating a label set; violations are data, not errors.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LabelValidation {
    pub violations: Vec<LabelViolation>,
}

impl LabelValidation {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn failing_slots(&self) -> Vec<String> {
        self.violations.iter().map(|v| v.slot.clone()).collect()
    }
}

/// Checks every structural invariant on a label set.
pub fn validate_labels(labels: &TaxonomyLabels) -> LabelValidation {
    let mut violations = Vec::new();
    let mut require_non_empty = |slot: &str, empty: bool| {
        if empty {
            violations.push(LabelViolation {
                slot: slot.to_string(),
                message: format!("{slot} must be non-empty"),
            });
        }
    };
    require_non_empty("interactional", labels.interactional.is_empty());
    require_non_empty("conduct", labels.conduct.is_empty());
    require_non_empty("articulation", labels.articulation.is_empty());
    require_non_empty("adherence", labels.adherence.is_empty());
    LabelValidation { violations }
}

/// One sociocultural norm record, the unit the whole pipeline operates on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Norm {
    /// Opaque id, unique within a dataset.
    pub id: String,
    /// Natural-language statement of the norm.
    pub text: String,
    /// Country or cultural-sphere name; free string, compared
    /// case-insensitively.
    pub cultural_context: String,
    /// Taxonomy labels when known; absent for unannotated source rows.
    pub labels: Option<TaxonomyLabels>,
    /// Provenance: dataset name plus record key.
    pub source: String,
}

impl Norm {
    /// True when this norm's labels include the given interactional context,
    /// or when the norm is unlabeled (unlabeled norms are not excluded from
    /// any context).
    pub fn applies_to_context(&self, ctx: InteractionalContext) -> bool {
        match &self.labels {
            Some(labels) => labels.interactional.contains(&ctx),
            None => true,
        }
    }
}

/// Optional per-slot criteria for selecting norms; absent criteria match all.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FilterCriteria {
    pub cultural_context: Option<String>,
    pub interactional: Option<InteractionalContext>,
    pub situational: Option<SituationalContext>,
    pub conduct: Option<DomainOfConduct>,
}

impl FilterCriteria {
    /// True when the norm satisfies every present criterion. Label criteria
    /// never match unlabeled norms.
    pub fn matches(&self, norm: &Norm) -> bool {
        if let Some(ctx) = &self.cultural_context {
            if context_key(ctx) != context_key(&norm.cultural_context) {
                return false;
            }
        }
        let needs_labels =
            self.interactional.is_some() || self.situational.is_some() || self.conduct.is_some();
        if needs_labels {
            let Some(labels) = &norm.labels else {
                return false;
            };
            if let Some(want) = self.interactional {
                if !labels.interactional.contains(&want) {
                    return false;
                }
            }
            if let Some(want) = self.situational {
                if labels.situational != want {
                    return false;
                }
            }
            if let Some(want) = self.conduct {
                if !labels.conduct.contains(&want) {
                    return false;
                }
            }
        }
        true
    }
}

/// Returns the norms matching every present criterion, in input order.
pub fn filter_norms(norms: &[Norm], criteria: &FilterCriteria) -> Vec<Norm> {
    norms
        .iter()
        .filter(|n| criteria.matches(n))
        .cloned()
        .collect()
}

/// Versioned prompt template instructing a judge model to label one norm.
#[derive(Debug, Clone)]
pub struct AnnotationRubric {
    pub version: String,
    pub template: String,
}

impl AnnotationRubric {
    /// The rubric shipped with the crate.
    pub fn builtin() -> Self {
        parse_rubric(include_str!("../assets/annotation_rubric.txt"))
            .expect("builtin rubric is well-formed")
    }

    /// Renders the rubric against one norm.
    pub fn render(&self, norm: &Norm) -> Result<String, TemplateError> {
        render_template(
            &self.template,
            &[
                ("norm_text", norm.text.as_str()),
                ("cultural_context", norm.cultural_context.as_str()),
            ],
        )
    }
}

/// Parses a rubric asset: `version: <v>` on the first line, template after.
pub fn parse_rubric(raw: &str) -> Result<AnnotationRubric, TemplateError> {
    let (version, body) = split_version_header(raw)?;
    Ok(AnnotationRubric {
        version,
        template: body.trim_start_matches('\n').to_string(),
    })
}

/// Result of one annotation call, carrying the raw judge output for audit.
#[derive(Debug, Clone)]
pub struct AnnotationOutcome {
    pub norm: Norm,
    /// Raw judge output, absent when no judge call was made.
    pub raw_output: Option<String>,
    /// Fingerprint of the judge request, absent when no judge call was made.
    pub judge_fingerprint: Option<String>,
}

/// Asks a judge model to label a norm using the rubric. Already-labeled norms
/// are returned unchanged unless `overwrite` is set; an unparseable judge
/// reply is re-asked once with an explicit format reminder.
pub fn annotate_norm(
    norm: &Norm,
    judge: &dyn Backend,
    judge_model: &str,
    rubric: &AnnotationRubric,
    overwrite: bool,
) -> Result<AnnotationOutcome, AnnotateError> {
    if norm.labels.is_some() && !overwrite {
        return Ok(AnnotationOutcome {
            norm: norm.clone(),
            raw_output: None,
            judge_fingerprint: None,
        });
    }
    let prompt = rubric.render(norm).map_err(JudgeError::Template)?;
    let mut request = CompletionRequest {
        model_id: judge_model.to_string(),
        prompt,
        params: CompletionParams::judge_defaults(),
        purpose: Purpose::Judge,
    };
    let mut response = judge.complete(&request).map_err(JudgeError::Backend)?;
    let mut labels = parse_label_output(&response.text);
    if labels.is_none() {
        request.prompt.push_str(
            "\n\nRespond with only a JSON object containing the keys situational, \
             interactional, conduct, articulation, and adherence.",
        );
        response = judge.complete(&request).map_err(JudgeError::Backend)?;
        labels = parse_label_output(&response.text);
    }
    let labels = labels.ok_or_else(|| JudgeError::Unparseable {
        raw: response.text.clone(),
    })?;
    let validation = validate_labels(&labels);
    if !validation.is_ok() {
        return Err(AnnotateError::InvalidLabels {
            slots: validation.failing_slots(),
        });
    }
    let mut labeled = norm.clone();
    labeled.labels = Some(labels);
    Ok(AnnotationOutcome {
        norm: labeled,
        raw_output: Some(response.text),
        judge_fingerprint: Some(response.request_fingerprint),
    })
}

fn parse_label_output(raw: &str) -> Option<TaxonomyLabels> {
    let value = extract_first_json(raw)?;
    serde_json::from_value(value).ok()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table1_row_i() -> Norm {
        Norm {
            id: "t1-i".to_string(),
            text: "One must always address the eldest in the household in a polite manner."
                .to_string(),
            cultural_context: "Singapore".to_string(),
            labels: Some(TaxonomyLabels::new(
                SituationalContext::General,
                &[InteractionalContext::HumanHuman],
                &[DomainOfConduct::Language],
                &[ModeOfArticulation::Descriptive],
                &[BasisOfAdherence::Informal],
            )),
            source: "curated#t1-i".to_string(),
        }
    }

    fn table1_row_iv() -> Norm {
        Norm {
            id: "t1-iv".to_string(),
            text: "Maintaining privacy by not engaging in conversations about personal wealth, \
                   relationships, or political affiliations without invitation."
                .to_string(),
            cultural_context: "Canada".to_string(),
            labels: Some(TaxonomyLabels::new(
                SituationalContext::SituationSpecific,
                &[
                    InteractionalContext::HumanHuman,
                    InteractionalContext::HumanAi,
                ],
                &[DomainOfConduct::Language],
                &[
                    ModeOfArticulation::Prescriptive,
                    ModeOfArticulation::Descriptive,
                ],
                &[BasisOfAdherence::Informal],
            )),
            source: "curated#t1-iv".to_string(),
        }
    }

    #[test]
    fn labels_parse_from_varied_spellings() {
        assert_eq!(
            "Situation Specific".parse::<SituationalContext>().unwrap(),
            SituationalContext::SituationSpecific
        );
        assert_eq!(
            "Human-AI".parse::<InteractionalContext>().unwrap(),
            InteractionalContext::HumanAi
        );
        assert_eq!(
            "human_human".parse::<InteractionalContext>().unwrap(),
            InteractionalContext::HumanHuman
        );
        assert!("chaotic".parse::<DomainOfConduct>().is_err());
    }

    #[test]
    fn single_member_valid_labels_pass() {
        let labels = table1_row_i().labels.unwrap();
        assert!(validate_labels(&labels).is_ok());
    }

    #[test]
    fn multi_member_valid_labels_pass() {
        let labels = table1_row_iv().labels.unwrap();
        assert!(validate_labels(&labels).is_ok());
    }

    #[test]
    fn empty_interactional_set_is_flagged() {
        let mut labels = table1_row_i().labels.unwrap();
        labels.interactional.clear();
        let validation = validate_labels(&labels);
        assert!(!validation.is_ok());
        assert_eq!(validation.failing_slots(), vec!["interactional"]);
        assert!(validation.violations[0].message.contains("non-empty"));
    }

    #[test]
    fn labels_round_trip_canonically() {
        let labels = table1_row_iv().labels.unwrap();
        let json = serde_json::to_string(&labels).unwrap();
        let back: TaxonomyLabels = serde_json::from_str(&json).unwrap();
        assert_eq!(back, labels);

        let mut reversed = table1_row_iv();
        let slot = reversed.labels.as_mut().unwrap();
        slot.interactional = [
            InteractionalContext::HumanAi,
            InteractionalContext::HumanHuman,
        ]
        .into_iter()
        .collect();
        let json_reversed = serde_json::to_string(reversed.labels.as_ref().unwrap()).unwrap();
        assert_eq!(json, json_reversed, "insertion order never leaks");
        let dup: TaxonomyLabels = serde_json::from_str(
            &json.replace("\"human_human\"", "\"human_human\",\"human_human\""),
        )
        .unwrap();
        assert_eq!(dup, labels, "duplicates collapse on input");
    }

    #[test]
    fn expression_alias_accepted_on_input() {
        let json = r#"{
            "situational": "general",
            "interactional": ["human_human"],
            "conduct": ["language"],
            "expression": ["descriptive"],
            "adherence": ["informal"]
        }"#;
        let labels: TaxonomyLabels = serde_json::from_str(json).unwrap();
        assert_eq!(labels, table1_row_i().labels.unwrap());
        let out = serde_json::to_string(&labels).unwrap();
        assert!(out.contains("\"articulation\""));
        assert!(!out.contains("\"expression\""));
    }

    #[test]
    fn filter_by_human_ai_keeps_only_row_iv() {
        let norms = vec![table1_row_i(), table1_row_iv()];
        let criteria = FilterCriteria {
            interactional: Some(InteractionalContext::HumanAi),
            ..Default::default()
        };
        let got = filter_norms(&norms, &criteria);
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].id, "t1-iv");
    }

    #[test]
    fn absent_criteria_keep_everything() {
        let norms = vec![table1_row_i(), table1_row_iv()];
        let got = filter_norms(&norms, &FilterCriteria::default());
        assert_eq!(got, norms);
    }

    #[test]
    fn context_filter_is_case_insensitive_and_order_preserving() {
        let mut a = table1_row_i();
        a.cultural_context = "Egypt".to_string();
        let mut b = table1_row_iv();
        b.cultural_context = " egypt ".to_string();
        let c = table1_row_i();
        let norms = vec![a.clone(), b.clone(), c];
        let criteria = FilterCriteria {
            cultural_context: Some("EGYPT".to_string()),
            ..Default::default()
        };
        let got = filter_norms(&norms, &criteria);
        assert_eq!(got, vec![a, b]);
    }

    #[test]
    fn filtering_is_idempotent() {
        let norms = vec![table1_row_i(), table1_row_iv()];
        let criteria = FilterCriteria {
            situational: Some(SituationalContext::General),
            ..Default::default()
        };
        let once = filter_norms(&norms, &criteria);
        let twice = filter_norms(&once, &criteria);
        assert_eq!(once, twice);
    }

    #[test]
    fn rubric_parses_version_header() {
        let rubric = parse_rubric("version: v9\nLabel this: {norm_text}").unwrap();
        assert_eq!(rubric.version, "v9");
        assert!(rubric.template.contains("{norm_text}"));
        assert!(parse_rubric("no header here").is_err());
    }

    #[test]
    fn builtin_rubric_renders_without_leftover_placeholders() {
        let rubric = AnnotationRubric::builtin();
        let rendered = rubric.render(&table1_row_i()).unwrap();
        assert!(rendered.contains("eldest in the household"));
        assert!(rendered.contains("Singapore"));
        assert!(!rendered.contains('{'));
    }
}
