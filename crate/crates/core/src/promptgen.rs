//! Deterministic expansion of each norm into the test-prompt matrix:
//! user intents × scenarios × country-mention variants.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::backends::{Backend, CompletionParams, CompletionRequest, Purpose};
use crate::error::{PromptGenError, TemplateError};
use crate::taxonomy::{InteractionalContext, Norm};
use crate::util::{
    render_template, short_hash, split_version_header, string_enum, tidy_rendered_text,
};

string_enum! {
    /// What the simulated user is trying to get from the model.
    UserIntent {
        RecommendationSeeking => "recommendation_seeking",
        PerspectiveSeeking => "perspective_seeking",
        FunctionalContentGeneration => "functional_content_generation",
        ExplanationRequest => "explanation_request",
    }
}

string_enum! {
    /// How the prompt relates to the norm under test.
    ScenarioType {
        UserChallengesNorm => "user_challenges_norm",
        ImplicitAwarenessRequired => "implicit_awareness_required",
        EncourageAiViolation => "encourage_ai_violation",
        UpholdInResponse => "uphold_in_response",
        NormIrrelevant => "norm_irrelevant",
    }
}

string_enum! {
    /// Which evaluation context a scenario is designed to exercise.
    Applicability {
        HumanHuman => "human_human",
        HumanAi => "human_ai",
        Control => "control",
    }
}

impl ScenarioType {
    /// The evaluation context each scenario targets; control scenarios are
    /// norm-irrelevant baselines.
    pub fn applies_to(self) -> Applicability {
        match self {
            ScenarioType::UserChallengesNorm | ScenarioType::ImplicitAwarenessRequired => {
                Applicability::HumanHuman
            }
            ScenarioType::EncourageAiViolation | ScenarioType::UpholdInResponse => {
                Applicability::HumanAi
            }
            ScenarioType::NormIrrelevant => Applicability::Control,
        }
    }
}

impl Applicability {
    /// The matching interactional context, when there is one.
    pub fn interactional(self) -> Option<InteractionalContext> {
        match self {
            Applicability::HumanHuman => Some(InteractionalContext::HumanHuman),
            Applicability::HumanAi => Some(InteractionalContext::HumanAi),
            Applicability::Control => None,
        }
    }
}

string_enum! {
    /// How a prompt's text came to be.
    GenerationMode {
        Template => "template",
        BackendGenerated => "backend_generated",
    }
}

/// One generated test prompt, the row unit of the prompt matrix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestPrompt {
    pub id: String,
    pub norm_id: String,
    pub intent: UserIntent,
    pub scenario: ScenarioType,
    pub country_mentioned: bool,
    pub text: String,
    pub generation_mode: GenerationMode,
    pub template_version: String,
}

impl TestPrompt {
    pub fn applies_to(&self) -> Applicability {
        self.scenario.applies_to()
    }
}

/// Deterministic prompt id from the cell coordinates and template version.
pub fn prompt_id(
    norm_id: &str,
    intent: UserIntent,
    scenario: ScenarioType,
    country_mentioned: bool,
    template_version: &str,
) -> String {
    format!(
        "p{}",
        short_hash(&format!(
            "{norm_id}\x1f{intent}\x1f{scenario}\x1f{country_mentioned}\x1f{template_version}"
        ))
    )
}

/// A versioned, total mapping (intent, scenario) -> template string.
#[derive(Debug, Clone)]
pub struct PromptTemplateSet {
    pub version: String,
    templates: BTreeMap<(UserIntent, ScenarioType), String>,
}

impl PromptTemplateSet {
    /// The template set shipped with the crate.
    pub fn builtin() -> Self {
        parse_template_set(include_str!("../assets/prompt_templates.tsv"))
            .expect("builtin template set is well-formed")
    }

    pub fn get(&self, intent: UserIntent, scenario: ScenarioType) -> Option<&str> {
        self.templates.get(&(intent, scenario)).map(String::as_str)
    }
}

/// Parses a template asset: a version header, then one
/// `intent TAB scenario TAB template` record per line. The set must cover
/// every (intent, scenario) pair exactly once.
pub fn parse_template_set(raw: &str) -> Result<PromptTemplateSet, TemplateError> {
    let (version, body) = split_version_header(raw)?;
    let mut templates = BTreeMap::new();
    for (offset, line) in body.lines().enumerate() {
        let line_no = offset + 2;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.splitn(3, '\t');
        let (intent_tok, scenario_tok, template) =
            match (parts.next(), parts.next(), parts.next()) {
                (Some(a), Some(b), Some(c)) if !c.trim().is_empty() => (a, b, c),
                _ => {
                    return Err(TemplateError::Malformed {
                        line: line_no,
                        message: "expected intent<TAB>scenario<TAB>template".to_string(),
                    })
                }
            };
        let intent: UserIntent = intent_tok.parse().map_err(|e| TemplateError::Malformed {
            line: line_no,
            message: format!("{e}"),
        })?;
        let scenario: ScenarioType =
            scenario_tok.parse().map_err(|e| TemplateError::Malformed {
                line: line_no,
                message: format!("{e}"),
            })?;
        if templates.insert((intent, scenario), template.to_string()).is_some() {
            return Err(TemplateError::Malformed {
                line: line_no,
                message: format!("duplicate template for {intent}/{scenario}"),
            });
        }
    }
    for &intent in UserIntent::ALL {
        for &scenario in ScenarioType::ALL {
            if !templates.contains_key(&(intent, scenario)) {
                return Err(TemplateError::MissingTemplate {
                    intent: intent.to_string(),
                    scenario: scenario.to_string(),
                });
            }
        }
    }
    Ok(PromptTemplateSet { version, templates })
}

/// A situation clause usable inside a sentence: the norm text with trailing
/// punctuation stripped and the first letter lowercased. Heuristic; good
/// enough for synthetic prompts, recorded as such.
pub fn situation_hint(norm_text: &str) -> String {
    let trimmed = norm_text.trim().trim_end_matches(['.', '!', '?']);
    let mut chars = trimmed.chars();
    match chars.next() {
        Some(first) => first.to_lowercase().collect::<String>() + chars.as_str(),
        None => String::new(),
    }
}

/// Render one template against a norm and country variant. The country slot
/// becomes "in {country}" when mentioned and disappears (with whitespace
/// cleanup) when not.
pub fn render_prompt_text(
    template: &str,
    norm: &Norm,
    country_mentioned: bool,
) -> Result<String, TemplateError> {
    let country = if country_mentioned {
        format!("in {}", norm.cultural_context)
    } else {
        String::new()
    };
    let hint = situation_hint(&norm.text);
    let rendered = render_template(
        template,
        &[
            ("norm_text", norm.text.as_str()),
            ("country", country.as_str()),
            ("situation_hint", hint.as_str()),
        ],
    )?;
    Ok(tidy_rendered_text(&rendered))
}

/// Which matrix cells to generate; `None` means the full axis.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MatrixConfig {
    pub intents: Option<Vec<UserIntent>>,
    pub scenarios: Option<Vec<ScenarioType>>,
    pub country_variants: Option<Vec<bool>>,
}

impl MatrixConfig {
    fn intents(&self) -> Vec<UserIntent> {
        axis(UserIntent::ALL, self.intents.as_deref())
    }

    fn scenarios(&self) -> Vec<ScenarioType> {
        axis(ScenarioType::ALL, self.scenarios.as_deref())
    }

    fn country_variants(&self) -> Vec<bool> {
        match &self.country_variants {
            None => vec![false, true],
            Some(values) => {
                let mut picked: Vec<bool> =
                    [false, true].into_iter().filter(|v| values.contains(v)).collect();
                if picked.is_empty() {
                    picked = vec![false, true];
                }
                picked
            }
        }
    }

    /// Cell coordinates in canonical order (intent, scenario, country).
    pub fn cells(&self) -> Vec<(UserIntent, ScenarioType, bool)> {
        let mut out = Vec::new();
        for intent in self.intents() {
            for scenario in self.scenarios() {
                for country_mentioned in self.country_variants() {
                    out.push((intent, scenario, country_mentioned));
                }
            }
        }
        out
    }
}

fn axis<T: Copy + PartialEq>(all: &[T], subset: Option<&[T]>) -> Vec<T> {
    match subset {
        None => all.to_vec(),
        Some(values) if values.is_empty() => all.to_vec(),
        Some(values) => all.iter().copied().filter(|v| values.contains(v)).collect(),
    }
}

/// Expands one norm into its prompt matrix in canonical cell order
/// (intent, scenario, country variant). Pure: identical inputs give
/// byte-identical prompts.
pub fn generate_prompts(
    norm: &Norm,
    templates: &PromptTemplateSet,
    config: &MatrixConfig,
) -> Result<Vec<TestPrompt>, TemplateError> {
    let mut prompts = Vec::new();
    for intent in config.intents() {
        for scenario in config.scenarios() {
            let template =
                templates
                    .get(intent, scenario)
                    .ok_or_else(|| TemplateError::MissingTemplate {
                        intent: intent.to_string(),
                        scenario: scenario.to_string(),
                    })?;
            for country_mentioned in config.country_variants() {
                let text = render_prompt_text(template, norm, country_mentioned)?;
                prompts.push(TestPrompt {
                    id: prompt_id(
                        &norm.id,
                        intent,
                        scenario,
                        country_mentioned,
                        &templates.version,
                    ),
                    norm_id: norm.id.clone(),
                    intent,
                    scenario,
                    country_mentioned,
                    text,
                    generation_mode: GenerationMode::Template,
                    template_version: templates.version.clone(),
                });
            }
        }
    }
    Ok(prompts)
}

/// Meta-prompt template instructing a generator model to write one prompt.
#[derive(Debug, Clone)]
pub struct GeneratorMeta {
    pub version: String,
    pub template: String,
}

impl GeneratorMeta {
    pub fn builtin() -> Self {
        let (version, body) = split_version_header(include_str!("../assets/generator_meta.txt"))
            .expect("builtin generator meta is well-formed");
        GeneratorMeta {
            version,
            template: body,
        }
    }
}

const GENERATE_MAX_ATTEMPTS: u32 = 3;

/// Ask a generator model to write the prompt for one matrix cell. The
/// country-mention contract is verified on the output; violations are
/// regenerated up to a small bounded number of attempts.
pub fn generate_via_backend(
    norm: &Norm,
    intent: UserIntent,
    scenario: ScenarioType,
    country_mentioned: bool,
    generator: &dyn Backend,
    generator_model: &str,
    meta: &GeneratorMeta,
) -> Result<TestPrompt, PromptGenError> {
    let country_instruction = if country_mentioned {
        norm.cultural_context.clone()
    } else {
        "(do not mention the country)".to_string()
    };
    let base_prompt = render_template(
        &meta.template,
        &[
            ("intent", intent.as_str()),
            ("scenario", scenario.as_str()),
            ("norm_text", norm.text.as_str()),
            ("country_instruction", country_instruction.as_str()),
        ],
    )?;

    let mut last_detail = String::new();
    for attempt in 0..GENERATE_MAX_ATTEMPTS {
        let mut prompt = base_prompt.clone();
        if attempt > 0 {
            prompt.push_str(&format!("\nRewrite attempt: {attempt}"));
        }
        let request = CompletionRequest {
            model_id: generator_model.to_string(),
            prompt,
            params: CompletionParams::provider_defaults(),
            purpose: Purpose::Generator,
        };
        let response = generator.complete(&request)?;
        let text = response.text.trim().to_string();
        let mentions = text.contains(&norm.cultural_context);
        if text.is_empty() {
            last_detail = "generator returned empty text".to_string();
        } else if country_mentioned && !mentions {
            last_detail = format!("text does not mention {}", norm.cultural_context);
        } else if !country_mentioned && mentions {
            last_detail = format!("text mentions {}", norm.cultural_context);
        } else {
            return Ok(TestPrompt {
                id: prompt_id(&norm.id, intent, scenario, country_mentioned, &meta.version),
                norm_id: norm.id.clone(),
                intent,
                scenario,
                country_mentioned,
                text,
                generation_mode: GenerationMode::BackendGenerated,
                template_version: meta.version.clone(),
            });
        }
    }
    Err(PromptGenError::InvariantUnsatisfied {
        attempts: GENERATE_MAX_ATTEMPTS,
        detail: last_detail,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{ScriptStyle, ScriptedBackend};
    use crate::taxonomy::{
        BasisOfAdherence, DomainOfConduct, ModeOfArticulation, SituationalContext, TaxonomyLabels,
    };

    fn sudan_norm() -> Norm {
        Norm {
            id: "t1-ii".to_string(),
            text: "Arrive on time for gatherings, not more than 10 minutes early or 5–10 \
                   minutes late, to show respect for the host's preparations."
                .to_string(),
            cultural_context: "Sudan".to_string(),
            labels: Some(TaxonomyLabels::new(
                SituationalContext::SituationSpecific,
                &[crate::taxonomy::InteractionalContext::HumanHuman],
                &[DomainOfConduct::Behavior, DomainOfConduct::Belief],
                &[ModeOfArticulation::Prescriptive],
                &[BasisOfAdherence::Informal],
            )),
            source: "curated#t1-ii".to_string(),
        }
    }

    #[test]
    fn default_config_yields_forty_prompts() {
        let prompts =
            generate_prompts(&sudan_norm(), &PromptTemplateSet::builtin(), &MatrixConfig::default())
                .unwrap();
        assert_eq!(prompts.len(), 40);
        let mut cells: Vec<_> = prompts
            .iter()
            .map(|p| (p.intent, p.scenario, p.country_mentioned))
            .collect();
        let before = cells.clone();
        cells.sort();
        cells.dedup();
        assert_eq!(cells.len(), 40, "every cell exactly once");
        assert_eq!(before, cells, "canonical cell order");
    }

    #[test]
    fn minimal_matrix_differs_only_by_country() {
        let config = MatrixConfig {
            intents: Some(vec![UserIntent::RecommendationSeeking]),
            scenarios: Some(vec![ScenarioType::UserChallengesNorm]),
            country_variants: None,
        };
        let prompts =
            generate_prompts(&sudan_norm(), &PromptTemplateSet::builtin(), &config).unwrap();
        assert_eq!(prompts.len(), 2);
        assert!(!prompts[0].country_mentioned);
        assert!(prompts[1].country_mentioned);
        assert!(prompts[1].text.contains("in Sudan"));
        assert!(!prompts[0].text.contains("Sudan"));
    }

    #[test]
    fn generation_is_deterministic() {
        let templates = PromptTemplateSet::builtin();
        let a = generate_prompts(&sudan_norm(), &templates, &MatrixConfig::default()).unwrap();
        let b = generate_prompts(&sudan_norm(), &templates, &MatrixConfig::default()).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn prompt_ids_are_distinct_across_cells_and_norms() {
        let templates = PromptTemplateSet::builtin();
        let mut other = sudan_norm();
        other.id = "t1-iii".to_string();
        let mut ids: Vec<String> =
            generate_prompts(&sudan_norm(), &templates, &MatrixConfig::default())
                .unwrap()
                .into_iter()
                .chain(generate_prompts(&other, &templates, &MatrixConfig::default()).unwrap())
                .map(|p| p.id)
                .collect();
        let total = ids.len();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), total);
    }

    #[test]
    fn render_inserts_or_suppresses_country() {
        let norm = sudan_norm();
        let with = render_prompt_text("How should I behave at a gathering {country}?", &norm, true)
            .unwrap();
        assert_eq!(with, "How should I behave at a gathering in Sudan?");
        let without =
            render_prompt_text("How should I behave at a gathering {country}?", &norm, false)
                .unwrap();
        assert_eq!(without, "How should I behave at a gathering?");
    }

    #[test]
    fn unknown_placeholder_is_an_error() {
        let err = render_prompt_text("Tell me about {foo}.", &sudan_norm(), false).unwrap_err();
        assert!(err.to_string().contains("`foo`"));
    }

    #[test]
    fn scenario_applicability_is_total() {
        use Applicability::*;
        let expected = [
            (ScenarioType::UserChallengesNorm, HumanHuman),
            (ScenarioType::ImplicitAwarenessRequired, HumanHuman),
            (ScenarioType::EncourageAiViolation, HumanAi),
            (ScenarioType::UpholdInResponse, HumanAi),
            (ScenarioType::NormIrrelevant, Control),
        ];
        for (scenario, applies) in expected {
            assert_eq!(scenario.applies_to(), applies);
        }
    }

    #[test]
    fn template_set_must_be_total() {
        let raw = "version: v0\nrecommendation_seeking\tuser_challenges_norm\thi {norm_text}\n";
        let err = parse_template_set(raw).unwrap_err();
        assert!(matches!(err, TemplateError::MissingTemplate { .. }));
    }

    #[test]
    fn backend_generation_enforces_country_contract() {
        let norm = sudan_norm();
        let meta = GeneratorMeta::builtin();
        let generator = ScriptedBackend::styled("gen", ScriptStyle::Generator, 11);
        let prompt = generate_via_backend(
            &norm,
            UserIntent::PerspectiveSeeking,
            ScenarioType::UserChallengesNorm,
            true,
            &generator,
            "gen-model",
            &meta,
        )
        .unwrap();
        assert!(prompt.text.contains("Sudan"));
        assert_eq!(prompt.generation_mode, GenerationMode::BackendGenerated);

        let stubborn = ScriptedBackend::closure("bad-gen", |_req| Ok("Sudan Sudan".to_string()));
        let err = generate_via_backend(
            &norm,
            UserIntent::PerspectiveSeeking,
            ScenarioType::UserChallengesNorm,
            false,
            &stubborn,
            "gen-model",
            &meta,
        )
        .unwrap_err();
        match err {
            PromptGenError::InvariantUnsatisfied { attempts, .. } => assert_eq!(attempts, 3),
            other => panic!("unexpected error {other}"),
        }
        assert_eq!(stubborn.calls(), 3);
    }

    #[test]
    fn generator_transport_failure_propagates() {
        let broken = ScriptedBackend::closure("broken", |_req| {
            Err(crate::error::BackendError::Transport {
                message: "boom".to_string(),
            })
        });
        let err = generate_via_backend(
            &sudan_norm(),
            UserIntent::ExplanationRequest,
            ScenarioType::UpholdInResponse,
            true,
            &broken,
            "gen-model",
            &GeneratorMeta::builtin(),
        )
        .unwrap_err();
        assert!(matches!(err, PromptGenError::Backend(_)));
    }
}
