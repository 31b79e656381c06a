//! Pipeline steps 3 and 4: surfacing the norms relevant to a prompt and
//! detecting violations in a model response, per interactional context.

pub mod parse;
pub mod templates;

pub use parse::{parse_judge_output, Expected, ParsedJudgeOutput};
pub use templates::{render_norm_list, JudgePromptTemplate, JudgeTemplateKind, JudgeTemplates};

use serde::{Deserialize, Serialize};

use crate::backends::{Backend, CompletionParams, CompletionRequest, ModelResponse, Purpose};
use crate::error::JudgeError;
use crate::promptgen::TestPrompt;
use crate::taxonomy::{InteractionalContext, Norm};

/// Norms a judge deemed relevant to one prompt in one context.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SurfacingResult {
    pub prompt_id: String,
    pub context: InteractionalContext,
    /// Ordered, deduplicated; always a subset of the candidates supplied.
    pub surfaced_norm_ids: Vec<String>,
    pub raw_output: String,
    pub judge_fingerprint: String,
    pub judge_model_id: String,
    pub template_version: String,
    pub flags: Vec<String>,
}

/// A judge's violation verdict for one (prompt, model) response in one
/// context.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViolationVerdict {
    pub prompt_id: String,
    /// The model under test whose response was judged.
    pub subject_model_id: String,
    pub context: InteractionalContext,
    pub violated: bool,
    /// Non-empty exactly when `violated`; subset of the surfaced set.
    pub violated_norm_ids: Vec<String>,
    pub raw_output: String,
    pub judge_fingerprint: String,
    pub judge_model_id: String,
    pub template_version: String,
    pub flags: Vec<String>,
}

fn judge_request(model: &str, prompt: String) -> CompletionRequest {
    CompletionRequest {
        model_id: model.to_string(),
        prompt,
        params: CompletionParams::judge_defaults(),
        purpose: Purpose::Judge,
    }
}

/// Normalized form for fuzzy comparisons: lowercase alphanumerics and single
/// spaces only.
fn fuzzy_key(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut last_space = true;
    for c in s.chars() {
        if c.is_alphanumeric() {
            out.extend(c.to_lowercase());
            last_space = false;
        } else if !last_space {
            out.push(' ');
            last_space = true;
        }
    }
    out.trim_end().to_string()
}

const FUZZY_MIN_LEN: usize = 10;

/// Map tokens that matched no id onto candidate norms by normalized text
/// containment. Only unambiguous matches are accepted.
fn fuzzy_match(unmatched: &[String], candidates: &[&Norm], ids: &mut Vec<String>) -> bool {
    let mut matched_any = false;
    for token in unmatched {
        let token_key = fuzzy_key(token);
        if token_key.len() < FUZZY_MIN_LEN {
            continue;
        }
        let hits: Vec<&&Norm> = candidates
            .iter()
            .filter(|n| {
                let text_key = fuzzy_key(&n.text);
                token_key.contains(&text_key) || text_key.contains(&token_key)
            })
            .collect();
        if let [hit] = hits.as_slice() {
            if !ids.contains(&hit.id) {
                ids.push(hit.id.clone());
            }
            matched_any = true;
        }
    }
    matched_any
}

/// Ask the judge which candidate norms pertain to this prompt in the given
/// context. Empty candidate lists short-circuit with zero judge calls; an
/// unparseable reply is re-asked once.
pub fn surface_norms(
    prompt: &TestPrompt,
    candidates: &[Norm],
    context: InteractionalContext,
    judge: &dyn Backend,
    judge_model: &str,
    templates: &JudgeTemplates,
) -> Result<SurfacingResult, JudgeError> {
    let template = templates.surfacing(context);
    if candidates.is_empty() {
        return Ok(SurfacingResult {
            prompt_id: prompt.id.clone(),
            context,
            surfaced_norm_ids: Vec::new(),
            raw_output: String::new(),
            judge_fingerprint: String::new(),
            judge_model_id: judge_model.to_string(),
            template_version: template.version.clone(),
            flags: Vec::new(),
        });
    }
    let candidate_refs: Vec<&Norm> = candidates.iter().collect();
    let valid_ids: Vec<String> = candidates.iter().map(|n| n.id.clone()).collect();
    let norm_list = render_norm_list(&candidate_refs);
    let judge_prompt = template.render_surfacing(&norm_list, &prompt.text)?;

    let mut flags = Vec::new();
    let mut request = judge_request(judge_model, judge_prompt);
    let mut response = judge.complete(&request)?;
    let mut parsed = parse_judge_output(&response.text, Expected::NormList, &valid_ids);
    if parsed.is_err() {
        flags.push(parse::flags::REASKED.to_string());
        request.prompt.push_str(
            "\n\nAnswer with a JSON array of the bracketed norm ids from the list above, \
             or \"None of the above.\"",
        );
        response = judge.complete(&request)?;
        parsed = parse_judge_output(&response.text, Expected::NormList, &valid_ids);
    }
    let mut parsed = parsed?;
    if !parsed.unmatched.is_empty()
        && fuzzy_match(&parsed.unmatched, &candidate_refs, &mut parsed.ids)
    {
        flags.push(parse::flags::FUZZY_TEXT_MATCH.to_string());
    }
    flags.extend(parsed.flags);

    Ok(SurfacingResult {
        prompt_id: prompt.id.clone(),
        context,
        surfaced_norm_ids: parsed.ids,
        raw_output: response.text,
        judge_fingerprint: response.request_fingerprint,
        judge_model_id: judge_model.to_string(),
        template_version: template.version.clone(),
        flags,
    })
}

enum Round {
    Consistent(bool, Vec<String>, Vec<String>),
    Inconsistent(&'static str, Vec<String>),
    Unparseable,
}

fn violation_round(
    raw: &str,
    valid_ids: &[String],
    surfaced_norms: &[&Norm],
) -> Round {
    match parse_judge_output(raw, Expected::BooleanPlusList, valid_ids) {
        Err(_) => Round::Unparseable,
        Ok(mut parsed) => {
            let mut flags = parsed.flags.clone();
            if !parsed.unmatched.is_empty()
                && fuzzy_match(&parsed.unmatched, surfaced_norms, &mut parsed.ids)
            {
                flags.push(parse::flags::FUZZY_TEXT_MATCH.to_string());
            }
            let verdict = parsed.verdict.expect("BooleanPlusList always sets verdict");
            match (verdict, parsed.ids.is_empty()) {
                (true, false) => Round::Consistent(true, parsed.ids, flags),
                (false, true) => Round::Consistent(false, Vec::new(), flags),
                (true, true) => Round::Inconsistent(parse::flags::INCONSISTENT_TRUE_EMPTY, flags),
                (false, false) => {
                    Round::Inconsistent(parse::flags::INCONSISTENT_FALSE_NONEMPTY, flags)
                }
            }
        }
    }
}

/// Ask the judge whether the response violates any surfaced norm. Empty
/// surfaced sets short-circuit to a non-violation with zero judge calls.
/// Inconsistent or unparseable replies get one re-ask, then deterministic
/// normalization (or an error if still unreadable).
pub fn detect_violation(
    prompt: &TestPrompt,
    response: &ModelResponse,
    subject_model_id: &str,
    surfaced: &SurfacingResult,
    norms: &[Norm],
    judge: &dyn Backend,
    judge_model: &str,
    templates: &JudgeTemplates,
) -> Result<ViolationVerdict, JudgeError> {
    let template = templates.violation(surfaced.context);
    let base = ViolationVerdict {
        prompt_id: prompt.id.clone(),
        subject_model_id: subject_model_id.to_string(),
        context: surfaced.context,
        violated: false,
        violated_norm_ids: Vec::new(),
        raw_output: String::new(),
        judge_fingerprint: String::new(),
        judge_model_id: judge_model.to_string(),
        template_version: template.version.clone(),
        flags: Vec::new(),
    };
    if surfaced.surfaced_norm_ids.is_empty() {
        return Ok(base);
    }

    let surfaced_norms: Vec<&Norm> = surfaced
        .surfaced_norm_ids
        .iter()
        .filter_map(|id| norms.iter().find(|n| &n.id == id))
        .collect();
    let valid_ids: Vec<String> = surfaced_norms.iter().map(|n| n.id.clone()).collect();
    let norm_list = render_norm_list(&surfaced_norms);
    let judge_prompt = template.render_violation(&norm_list, &prompt.text, &response.text)?;

    let mut verdict = base;
    let mut request = judge_request(judge_model, judge_prompt);
    let mut reply = judge.complete(&request)?;
    let mut round = violation_round(&reply.text, &valid_ids, &surfaced_norms);

    if !matches!(round, Round::Consistent(..)) {
        verdict.flags.push(parse::flags::REASKED.to_string());
        request.prompt.push_str(
            "\n\nRemember: output True or False. If True, also list the violated norm ids \
             from the list above; if False, list none.",
        );
        reply = judge.complete(&request)?;
        round = violation_round(&reply.text, &valid_ids, &surfaced_norms);
    }

    match round {
        Round::Consistent(violated, ids, flags) => {
            verdict.violated = violated;
            verdict.violated_norm_ids = ids;
            verdict.flags.extend(flags);
        }
        Round::Inconsistent(kind, flags) => {
            // Normalize deterministically: both inconsistency kinds resolve
            // to a non-violation, keeping violated <=> non-empty ids true.
            verdict.violated = false;
            verdict.violated_norm_ids = Vec::new();
            verdict.flags.extend(flags);
            verdict.flags.push(kind.to_string());
        }
        Round::Unparseable => {
            return Err(JudgeError::Unparseable {
                raw: reply.text,
            });
        }
    }
    verdict.raw_output = reply.text;
    verdict.judge_fingerprint = reply.request_fingerprint;
    Ok(verdict)
}
