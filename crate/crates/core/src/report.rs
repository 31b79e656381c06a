//! Aggregates verdicts into grouped violation-rate cells and renders them as
//! delimited tables, Markdown, or long-form plot data.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::ReportError;
use crate::judge::{SurfacingResult, ViolationVerdict};
use crate::promptgen::{ScenarioType, TestPrompt, UserIntent};
use crate::store::{RunStore, StoreFile, StoredResponse};
use crate::taxonomy::{InteractionalContext, Norm, SituationalContext};
use crate::util::string_enum;

string_enum! {
    /// Situational grouping bucket; norms without labels fall into a
    /// dedicated bucket so grouping still partitions the verdict set.
    SituationalKey {
        General => "general",
        SituationSpecific => "situation_specific",
        Unlabeled => "unlabeled",
    }
}

impl From<Option<SituationalContext>> for SituationalKey {
    fn from(value: Option<SituationalContext>) -> Self {
        match value {
            Some(SituationalContext::General) => SituationalKey::General,
            Some(SituationalContext::SituationSpecific) => SituationalKey::SituationSpecific,
            None => SituationalKey::Unlabeled,
        }
    }
}

string_enum! {
    /// Dimensions a report can group by.
    GroupField {
        Model => "model_id",
        Context => "context",
        CountryMentioned => "country_mentioned",
        CulturalContext => "cultural_context",
        Intent => "intent",
        Scenario => "scenario",
        Situational => "situational",
    }
}

/// Identifies one aggregation cell; absent fields mean "aggregated over".
#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GroupKey {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub context: Option<InteractionalContext>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub country_mentioned: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cultural_context: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub intent: Option<UserIntent>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scenario: Option<ScenarioType>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub situational: Option<SituationalKey>,
}

impl GroupKey {
    pub fn is_empty(&self) -> bool {
        self.model_id.is_none()
            && self.context.is_none()
            && self.country_mentioned.is_none()
            && self.cultural_context.is_none()
            && self.intent.is_none()
            && self.scenario.is_none()
            && self.situational.is_none()
    }
}

/// One aggregation cell: violation count over total, with the rate left
/// undefined (null) when the cell is empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportCell {
    #[serde(flatten)]
    pub key: GroupKey,
    pub violations: u64,
    pub total: u64,
    pub rate: Option<f64>,
}

impl ReportCell {
    fn new(key: GroupKey, violations: u64, total: u64) -> Self {
        let rate = if total == 0 {
            None
        } else {
            Some(violations as f64 / total as f64)
        };
        ReportCell {
            key,
            violations,
            total,
            rate,
        }
    }
}

/// One verdict joined to the prompt and norm it refers to.
#[derive(Debug, Clone, PartialEq)]
pub struct JoinedRow {
    pub verdict: ViolationVerdict,
    pub prompt: TestPrompt,
    pub norm: Norm,
}

impl JoinedRow {
    fn key_for(&self, fields: &[GroupField]) -> GroupKey {
        let mut key = GroupKey::default();
        for field in fields {
            match field {
                GroupField::Model => {
                    key.model_id = Some(self.verdict.subject_model_id.clone());
                }
                GroupField::Context => key.context = Some(self.verdict.context),
                GroupField::CountryMentioned => {
                    key.country_mentioned = Some(self.prompt.country_mentioned);
                }
                GroupField::CulturalContext => {
                    key.cultural_context = Some(self.norm.cultural_context.clone());
                }
                GroupField::Intent => key.intent = Some(self.prompt.intent),
                GroupField::Scenario => key.scenario = Some(self.prompt.scenario),
                GroupField::Situational => {
                    key.situational = Some(SituationalKey::from(
                        self.norm.labels.as_ref().map(|l| l.situational),
                    ));
                }
            }
        }
        key
    }
}

/// Joins the verdict file against prompts and norms, failing on any verdict
/// whose prompt or norm cannot be resolved.
pub fn join_rows(
    norms: &[Norm],
    prompts: &[TestPrompt],
    verdicts: &[ViolationVerdict],
) -> Result<Vec<JoinedRow>, ReportError> {
    let norm_index: BTreeMap<&str, &Norm> = norms.iter().map(|n| (n.id.as_str(), n)).collect();
    let prompt_index: BTreeMap<&str, &TestPrompt> =
        prompts.iter().map(|p| (p.id.as_str(), p)).collect();
    verdicts
        .iter()
        .map(|verdict| {
            let prompt = prompt_index.get(verdict.prompt_id.as_str()).ok_or_else(|| {
                ReportError::DanglingReference {
                    kind: "prompt".to_string(),
                    id: verdict.prompt_id.clone(),
                }
            })?;
            let norm = norm_index.get(prompt.norm_id.as_str()).ok_or_else(|| {
                ReportError::DanglingReference {
                    kind: "norm".to_string(),
                    id: prompt.norm_id.clone(),
                }
            })?;
            Ok(JoinedRow {
                verdict: verdict.clone(),
                prompt: (*prompt).clone(),
                norm: (*norm).clone(),
            })
        })
        .collect()
}

/// Loads and joins a complete run store.
pub fn joined_rows(store: &RunStore) -> Result<Vec<JoinedRow>, ReportError> {
    let norms: Vec<Norm> = store.read_all(StoreFile::Norms)?;
    let prompts: Vec<TestPrompt> = store.read_all(StoreFile::Prompts)?;
    let verdicts: Vec<ViolationVerdict> = store.read_all(StoreFile::Verdicts)?;
    join_rows(&norms, &prompts, &verdicts)
}

/// Drops control (norm-irrelevant) rows, which measure judge noise rather
/// than model behavior.
pub fn without_controls(rows: &[JoinedRow]) -> Vec<JoinedRow> {
    rows.iter()
        .filter(|r| r.prompt.scenario != ScenarioType::NormIrrelevant)
        .cloned()
        .collect()
}

/// Groups rows into cells. Cell order is first-seen order over the input;
/// with no fields, a single all-encompassing cell is produced.
pub fn aggregate(rows: &[JoinedRow], group_by: &[GroupField]) -> Vec<ReportCell> {
    let mut order: Vec<GroupKey> = Vec::new();
    let mut counts: BTreeMap<GroupKey, (u64, u64)> = BTreeMap::new();
    for row in rows {
        let key = row.key_for(group_by);
        let entry = counts.entry(key.clone()).or_insert_with(|| {
            order.push(key);
            (0, 0)
        });
        entry.1 += 1;
        if row.verdict.violated {
            entry.0 += 1;
        }
    }
    order
        .into_iter()
        .map(|key| {
            let (violations, total) = counts[&key];
            ReportCell::new(key, violations, total)
        })
        .collect()
}

/// Per-norm macro-averaged rates: each cell's rate is the unweighted mean of
/// its per-norm violation rates. Counts remain raw so the provenance stays
/// visible; outputs must label these rates as macro.
pub fn aggregate_macro(rows: &[JoinedRow], group_by: &[GroupField]) -> Vec<ReportCell> {
    let mut order: Vec<GroupKey> = Vec::new();
    let mut per_norm: BTreeMap<GroupKey, BTreeMap<String, (u64, u64)>> = BTreeMap::new();
    for row in rows {
        let key = row.key_for(group_by);
        let entry = per_norm.entry(key.clone()).or_insert_with(|| {
            order.push(key);
            BTreeMap::new()
        });
        let norm_entry = entry.entry(row.norm.id.clone()).or_insert((0, 0));
        norm_entry.1 += 1;
        if row.verdict.violated {
            norm_entry.0 += 1;
        }
    }
    order
        .into_iter()
        .map(|key| {
            let norms = &per_norm[&key];
            let violations: u64 = norms.values().map(|(v, _)| *v).sum();
            let total: u64 = norms.values().map(|(_, t)| *t).sum();
            let mut cell = ReportCell::new(key, violations, total);
            if total > 0 {
                let mean = norms
                    .values()
                    .map(|(v, t)| *v as f64 / *t as f64)
                    .sum::<f64>()
                    / norms.len() as f64;
                cell.rate = Some(mean);
            }
            cell
        })
        .collect()
}

string_enum! {
    /// Published table arrangements.
    TableLayout {
        Table2Layout => "table2",
        CountryBreakdown => "country_breakdown",
        IntentBreakdown => "intent_breakdown",
        SituationalBreakdown => "situational_breakdown",
    }
}

string_enum! {
    /// Output encodings for a rendered table.
    OutputFormat {
        DelimitedTable => "csv",
        MarkdownTable => "md",
        PlotData => "plot_data",
    }
}

impl TableLayout {
    /// Grouping that produces cells consistent with this layout.
    pub fn group_by(self) -> &'static [GroupField] {
        match self {
            TableLayout::Table2Layout => &[
                GroupField::Model,
                GroupField::Context,
                GroupField::CountryMentioned,
            ],
            TableLayout::CountryBreakdown => &[GroupField::Model, GroupField::CulturalContext],
            TableLayout::IntentBreakdown => &[GroupField::Model, GroupField::Intent],
            TableLayout::SituationalBreakdown => &[GroupField::Model, GroupField::Situational],
        }
    }

    /// Suggested artifact file name.
    pub fn artifact_name(self, format: OutputFormat) -> String {
        let ext = match format {
            OutputFormat::DelimitedTable => "csv",
            OutputFormat::MarkdownTable => "md",
            OutputFormat::PlotData => "plot.jsonl",
        };
        format!("{self}.{ext}")
    }

    fn required_fields(self) -> &'static [GroupField] {
        self.group_by()
    }
}

fn field_present(cell: &ReportCell, field: GroupField) -> bool {
    match field {
        GroupField::Model => cell.key.model_id.is_some(),
        GroupField::Context => cell.key.context.is_some(),
        GroupField::CountryMentioned => cell.key.country_mentioned.is_some(),
        GroupField::CulturalContext => cell.key.cultural_context.is_some(),
        GroupField::Intent => cell.key.intent.is_some(),
        GroupField::Scenario => cell.key.scenario.is_some(),
        GroupField::Situational => cell.key.situational.is_some(),
    }
}

fn format_rate(rate: Option<f64>) -> String {
    match rate {
        Some(r) => format!("{r:.2}"),
        None => "n/a".to_string(),
    }
}

/// Renders cells under a layout. Table formats show rates at two decimals;
/// plot data keeps full precision, one cell per line.
pub fn emit_table(
    cells: &[ReportCell],
    layout: TableLayout,
    format: OutputFormat,
) -> Result<String, ReportError> {
    if cells.is_empty() {
        return Err(ReportError::NoCells);
    }
    for field in layout.required_fields() {
        if !cells.iter().all(|c| field_present(c, *field)) {
            return Err(ReportError::MissingKeyField {
                layout: layout.to_string(),
                field: field.to_string(),
            });
        }
    }
    if format == OutputFormat::PlotData {
        let mut out = String::new();
        for cell in cells {
            let line =
                serde_json::to_string(cell).map_err(|e| ReportError::Store(
                    crate::error::StoreError::Corrupt(e.to_string()),
                ))?;
            out.push_str(&line);
            out.push('\n');
        }
        return Ok(out);
    }
    match layout {
        TableLayout::Table2Layout => render_table2(cells, format),
        _ => render_long_form(cells, layout, format),
    }
}

/// Columns of the model-by-context arrangement: country-unmentioned pair
/// first, each pair ordered human-human then human-AI.
const TABLE2_COLUMNS: [(bool, InteractionalContext); 4] = [
    (false, InteractionalContext::HumanHuman),
    (false, InteractionalContext::HumanAi),
    (true, InteractionalContext::HumanHuman),
    (true, InteractionalContext::HumanAi),
];

fn render_table2(cells: &[ReportCell], format: OutputFormat) -> Result<String, ReportError> {
    let mut models: Vec<String> = Vec::new();
    let mut lookup: BTreeMap<(String, bool, InteractionalContext), Option<f64>> = BTreeMap::new();
    for cell in cells {
        let model = cell.key.model_id.clone().unwrap();
        if !models.contains(&model) {
            models.push(model.clone());
        }
        lookup.insert(
            (
                model,
                cell.key.country_mentioned.unwrap(),
                cell.key.context.unwrap(),
            ),
            cell.rate,
        );
    }

    let headers = [
        "model",
        "hh_no_country",
        "hai_no_country",
        "hh_with_country",
        "hai_with_country",
    ];
    let mut out = String::new();
    match format {
        OutputFormat::DelimitedTable => {
            writeln!(out, "{}", headers.join(",")).unwrap();
            for model in &models {
                let mut row = vec![model.clone()];
                for (country, context) in TABLE2_COLUMNS {
                    let rate = lookup.get(&(model.clone(), country, context)).copied();
                    row.push(format_rate(rate.flatten()));
                }
                writeln!(out, "{}", row.join(",")).unwrap();
            }
        }
        OutputFormat::MarkdownTable => {
            writeln!(out, "| {} |", headers.join(" | ")).unwrap();
            writeln!(out, "|{}", "---|".repeat(headers.len())).unwrap();
            for model in &models {
                let mut row = vec![model.clone()];
                for (country, context) in TABLE2_COLUMNS {
                    let rate = lookup.get(&(model.clone(), country, context)).copied();
                    row.push(format_rate(rate.flatten()));
                }
                writeln!(out, "| {} |", row.join(" | ")).unwrap();
            }
        }
        OutputFormat::PlotData => unreachable!("handled by caller"),
    }
    Ok(out)
}

fn long_form_key_columns(layout: TableLayout) -> &'static [&'static str] {
    match layout {
        TableLayout::CountryBreakdown => &["model", "cultural_context"],
        TableLayout::IntentBreakdown => &["model", "intent"],
        TableLayout::SituationalBreakdown => &["model", "situational"],
        TableLayout::Table2Layout => unreachable!("table2 has a dedicated renderer"),
    }
}

fn long_form_key_values(cell: &ReportCell, layout: TableLayout) -> Vec<String> {
    let model = cell.key.model_id.clone().unwrap();
    match layout {
        TableLayout::CountryBreakdown => {
            vec![model, cell.key.cultural_context.clone().unwrap()]
        }
        TableLayout::IntentBreakdown => vec![model, cell.key.intent.unwrap().to_string()],
        TableLayout::SituationalBreakdown => {
            vec![model, cell.key.situational.unwrap().to_string()]
        }
        TableLayout::Table2Layout => unreachable!("table2 has a dedicated renderer"),
    }
}

fn render_long_form(
    cells: &[ReportCell],
    layout: TableLayout,
    format: OutputFormat,
) -> Result<String, ReportError> {
    let mut headers: Vec<&str> = long_form_key_columns(layout).to_vec();
    headers.extend(["violations", "total", "rate"]);
    let mut out = String::new();
    match format {
        OutputFormat::DelimitedTable => {
            writeln!(out, "{}", headers.join(",")).unwrap();
            for cell in cells {
                let mut row = long_form_key_values(cell, layout);
                row.push(cell.violations.to_string());
                row.push(cell.total.to_string());
                row.push(format_rate(cell.rate));
                writeln!(out, "{}", row.join(",")).unwrap();
            }
        }
        OutputFormat::MarkdownTable => {
            writeln!(out, "| {} |", headers.join(" | ")).unwrap();
            writeln!(out, "|{}", "---|".repeat(headers.len())).unwrap();
            for cell in cells {
                let mut row = long_form_key_values(cell, layout);
                row.push(cell.violations.to_string());
                row.push(cell.total.to_string());
                row.push(format_rate(cell.rate));
                writeln!(out, "| {} |", row.join(" | ")).unwrap();
            }
        }
        OutputFormat::PlotData => unreachable!("handled by caller"),
    }
    Ok(out)
}

/// Stage counts, join gaps, and judge-flag tallies for one run store.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub prompts: u64,
    pub responses: u64,
    pub surfacing: u64,
    pub verdicts: u64,
    /// "prompt_id model_id" pairs with no stored response.
    pub prompts_without_responses: Vec<String>,
    /// "prompt_id model_id context" responses with no stored verdict.
    pub responses_without_verdicts: Vec<String>,
    pub flag_counts: BTreeMap<String, u64>,
}

impl CoverageReport {
    pub fn has_gaps(&self) -> bool {
        !self.prompts_without_responses.is_empty() || !self.responses_without_verdicts.is_empty()
    }
}

/// Walks a run store and reports coverage gaps between adjacent stages.
pub fn coverage_report(store: &RunStore) -> Result<CoverageReport, ReportError> {
    let prompts: Vec<TestPrompt> = store.read_all(StoreFile::Prompts)?;
    let responses: Vec<StoredResponse> = store.read_all(StoreFile::Responses)?;
    let surfacing: Vec<SurfacingResult> = store.read_all(StoreFile::Surfacing)?;
    let verdicts: Vec<ViolationVerdict> = store.read_all(StoreFile::Verdicts)?;

    let mut report = CoverageReport {
        prompts: prompts.len() as u64,
        responses: responses.len() as u64,
        surfacing: surfacing.len() as u64,
        verdicts: verdicts.len() as u64,
        ..CoverageReport::default()
    };

    let mut models: Vec<&str> = Vec::new();
    for response in &responses {
        if !models.contains(&response.model_id.as_str()) {
            models.push(&response.model_id);
        }
    }
    let response_keys: std::collections::BTreeSet<(&str, &str)> = responses
        .iter()
        .map(|r| (r.prompt_id.as_str(), r.model_id.as_str()))
        .collect();
    for prompt in &prompts {
        for model in &models {
            if !response_keys.contains(&(prompt.id.as_str(), model)) {
                report
                    .prompts_without_responses
                    .push(format!("{} {model}", prompt.id));
            }
        }
    }

    let verdict_keys: std::collections::BTreeSet<(&str, &str, InteractionalContext)> = verdicts
        .iter()
        .map(|v| {
            (
                v.prompt_id.as_str(),
                v.subject_model_id.as_str(),
                v.context,
            )
        })
        .collect();
    for response in &responses {
        for surfaced in surfacing.iter().filter(|s| s.prompt_id == response.prompt_id) {
            let key = (
                response.prompt_id.as_str(),
                response.model_id.as_str(),
                surfaced.context,
            );
            if !verdict_keys.contains(&key) {
                report.responses_without_verdicts.push(format!(
                    "{} {} {}",
                    response.prompt_id, response.model_id, surfaced.context
                ));
            }
        }
    }

    for flags in surfacing
        .iter()
        .map(|s| &s.flags)
        .chain(verdicts.iter().map(|v| &v.flags))
    {
        for flag in flags {
            *report.flag_counts.entry(flag.clone()).or_insert(0) += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::promptgen::GenerationMode;
    use proptest::prelude::*;

    fn norm(id: &str, country: &str) -> Norm {
        Norm {
            id: id.to_string(),
            text: format!("norm {id}"),
            cultural_context: country.to_string(),
            labels: None,
            source: format!("test#{id}"),
        }
    }

    fn prompt(id: &str, norm_id: &str, country_mentioned: bool, scenario: ScenarioType) -> TestPrompt {
        TestPrompt {
            id: id.to_string(),
            norm_id: norm_id.to_string(),
            intent: UserIntent::RecommendationSeeking,
            scenario,
            country_mentioned,
            text: format!("prompt {id}"),
            generation_mode: GenerationMode::Template,
            template_version: "v1".to_string(),
        }
    }

    fn verdict(
        prompt_id: &str,
        model: &str,
        context: InteractionalContext,
        violated: bool,
    ) -> ViolationVerdict {
        ViolationVerdict {
            prompt_id: prompt_id.to_string(),
            subject_model_id: model.to_string(),
            context,
            violated,
            violated_norm_ids: if violated {
                vec!["n1".to_string()]
            } else {
                Vec::new()
            },
            raw_output: String::new(),
            judge_fingerprint: "f".to_string(),
            judge_model_id: "judge".to_string(),
            template_version: "v1".to_string(),
            flags: Vec::new(),
        }
    }

    fn small_rows() -> Vec<JoinedRow> {
        let n = norm("n1", "Chile");
        let p = prompt("p1", "n1", false, ScenarioType::UserChallengesNorm);
        let verdicts = vec![
            verdict("p1", "m", InteractionalContext::HumanHuman, true),
            verdict("p1", "m", InteractionalContext::HumanAi, false),
            verdict("p1", "m2", InteractionalContext::HumanHuman, false),
            verdict("p1", "m2", InteractionalContext::HumanAi, false),
        ];
        join_rows(&[n], &[p], &verdicts).unwrap()
    }

    #[test]
    fn single_group_rate_is_quarter() {
        let rows = small_rows();
        let cells = aggregate(&rows, &[]);
        assert_eq!(cells.len(), 1);
        assert_eq!(cells[0].violations, 1);
        assert_eq!(cells[0].total, 4);
        assert_eq!(cells[0].rate, Some(0.25));
    }

    #[test]
    fn grouping_partitions_totals() {
        let rows = small_rows();
        let cells = aggregate(&rows, &[GroupField::Model]);
        assert_eq!(cells.len(), 2);
        let total: u64 = cells.iter().map(|c| c.total).sum();
        assert_eq!(total, rows.len() as u64);
        let violations: u64 = cells.iter().map(|c| c.violations).sum();
        assert_eq!(violations, 1);
    }

    #[test]
    fn dangling_prompt_reference_is_an_error() {
        let v = vec![verdict("ghost", "m", InteractionalContext::HumanHuman, false)];
        let err = join_rows(&[], &[], &v).unwrap_err();
        match err {
            ReportError::DanglingReference { kind, id } => {
                assert_eq!(kind, "prompt");
                assert_eq!(id, "ghost");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn empty_cells_error_on_render() {
        let err = emit_table(&[], TableLayout::Table2Layout, OutputFormat::DelimitedTable)
            .unwrap_err();
        assert!(matches!(err, ReportError::NoCells));
    }

    #[test]
    fn missing_key_field_is_rejected() {
        let cells = aggregate(&small_rows(), &[GroupField::Model]);
        let err =
            emit_table(&cells, TableLayout::Table2Layout, OutputFormat::DelimitedTable)
                .unwrap_err();
        match err {
            ReportError::MissingKeyField { field, .. } => assert_eq!(field, "context"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn plot_data_materializes_key_fields() {
        let cells = aggregate(
            &small_rows(),
            &[GroupField::Model, GroupField::Context, GroupField::CountryMentioned],
        );
        let text = emit_table(&cells[..1], TableLayout::Table2Layout, OutputFormat::PlotData)
            .unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 1);
        let value: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
        assert_eq!(value["model_id"], "m");
        assert_eq!(value["context"], "human_human");
        assert_eq!(value["country_mentioned"], false);
        assert_eq!(value["rate"], 1.0);
    }

    #[test]
    fn zero_total_cell_renders_null_rate() {
        let cell = ReportCell::new(
            GroupKey {
                model_id: Some("m".into()),
                ..GroupKey::default()
            },
            0,
            0,
        );
        assert_eq!(cell.rate, None);
        let json = serde_json::to_value(&cell).unwrap();
        assert!(json["rate"].is_null());
    }

    #[test]
    fn controls_are_excluded_by_filter() {
        let n = norm("n1", "Chile");
        let prompts = vec![
            prompt("p1", "n1", false, ScenarioType::UserChallengesNorm),
            prompt("p2", "n1", false, ScenarioType::NormIrrelevant),
        ];
        let verdicts = vec![
            verdict("p1", "m", InteractionalContext::HumanHuman, true),
            verdict("p2", "m", InteractionalContext::HumanHuman, false),
        ];
        let rows = join_rows(&[n], &prompts, &verdicts).unwrap();
        assert_eq!(without_controls(&rows).len(), 1);
    }

    #[test]
    fn macro_average_weights_norms_equally() {
        let norms = vec![norm("n1", "Chile"), norm("n2", "Sudan")];
        let prompts = vec![
            prompt("p1", "n1", false, ScenarioType::UserChallengesNorm),
            prompt("p2", "n2", false, ScenarioType::UserChallengesNorm),
        ];
        // n1: 1 of 1 violated; n2: 0 of 3 violated. Micro = 0.25, macro = 0.5.
        let verdicts = vec![
            verdict("p1", "m", InteractionalContext::HumanHuman, true),
            verdict("p2", "m", InteractionalContext::HumanHuman, false),
            verdict("p2", "m", InteractionalContext::HumanAi, false),
            verdict("p2", "m2", InteractionalContext::HumanHuman, false),
        ];
        let rows = join_rows(&norms, &prompts, &verdicts).unwrap();
        let micro = aggregate(&rows, &[]);
        assert_eq!(micro[0].rate, Some(0.25));
        let macro_cells = aggregate_macro(&rows, &[]);
        assert_eq!(macro_cells[0].rate, Some(0.5));
        assert_eq!(macro_cells[0].total, micro[0].total);
    }

    #[test]
    fn table2_csv_orders_columns_no_country_first() {
        let n = norm("n1", "Egypt");
        let prompts = vec![
            prompt("pa", "n1", false, ScenarioType::UserChallengesNorm),
            prompt("pb", "n1", true, ScenarioType::UserChallengesNorm),
        ];
        let verdicts = vec![
            verdict("pa", "m", InteractionalContext::HumanHuman, true),
            verdict("pa", "m", InteractionalContext::HumanAi, false),
            verdict("pb", "m", InteractionalContext::HumanHuman, false),
            verdict("pb", "m", InteractionalContext::HumanAi, true),
        ];
        let rows = join_rows(&[n], &prompts, &verdicts).unwrap();
        let cells = aggregate(&rows, TableLayout::Table2Layout.group_by());
        let csv = emit_table(&cells, TableLayout::Table2Layout, OutputFormat::DelimitedTable)
            .unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(
            lines[0],
            "model,hh_no_country,hai_no_country,hh_with_country,hai_with_country"
        );
        assert_eq!(lines[1], "m,1.00,0.00,0.00,1.00");
    }

    #[test]
    fn rendering_is_pure() {
        let cells = aggregate(&small_rows(), TableLayout::Table2Layout.group_by());
        let a = emit_table(&cells, TableLayout::Table2Layout, OutputFormat::MarkdownTable)
            .unwrap();
        let b = emit_table(&cells, TableLayout::Table2Layout, OutputFormat::MarkdownTable)
            .unwrap();
        assert_eq!(a, b);
    }

    fn arbitrary_rows() -> impl Strategy<Value = Vec<JoinedRow>> {
        let contexts = prop_oneof![
            Just(InteractionalContext::HumanHuman),
            Just(InteractionalContext::HumanAi)
        ];
        let row = (
            0..4usize,
            0..3usize,
            contexts,
            any::<bool>(),
            any::<bool>(),
            0..5usize,
        )
            .prop_map(|(norm_i, model_i, context, violated, country, intent_i)| {
                let mut n = norm(&format!("n{norm_i}"), ["Chile", "Sudan"][norm_i % 2]);
                n.cultural_context = ["Chile", "Sudan", "Egypt", "Canada"][norm_i].to_string();
                let scenario = ScenarioType::ALL[intent_i];
                let mut p = prompt(
                    &format!("p{norm_i}-{country}-{intent_i}"),
                    &n.id,
                    country,
                    scenario,
                );
                p.intent = UserIntent::ALL[intent_i % 4];
                let v = verdict(&p.id, &format!("m{model_i}"), context, violated);
                JoinedRow {
                    verdict: v,
                    prompt: p,
                    norm: n,
                }
            });
        proptest::collection::vec(row, 0..60)
    }

    proptest! {
        #[test]
        fn partition_and_refinement_hold(rows in arbitrary_rows()) {
            let total = rows.len() as u64;
            let violated = rows.iter().filter(|r| r.verdict.violated).count() as u64;
            for field in GroupField::ALL {
                let cells = aggregate(&rows, &[*field]);
                prop_assert_eq!(cells.iter().map(|c| c.total).sum::<u64>(), total);
                prop_assert_eq!(cells.iter().map(|c| c.violations).sum::<u64>(), violated);
            }
            // Refinement: summing (model, context) cells per model reproduces
            // the model-only cells.
            let fine = aggregate(&rows, &[GroupField::Model, GroupField::Context]);
            let coarse = aggregate(&rows, &[GroupField::Model]);
            for cell in &coarse {
                let sum_total: u64 = fine
                    .iter()
                    .filter(|f| f.key.model_id == cell.key.model_id)
                    .map(|f| f.total)
                    .sum();
                let sum_violations: u64 = fine
                    .iter()
                    .filter(|f| f.key.model_id == cell.key.model_id)
                    .map(|f| f.violations)
                    .sum();
                prop_assert_eq!(sum_total, cell.total);
                prop_assert_eq!(sum_violations, cell.violations);
            }
        }
    }

    fn fixture_lines(name: &str) -> Vec<serde_json::Value> {
        let path = format!(
            "{}/testdata/table2_fixture/{name}",
            env!("CARGO_MANIFEST_DIR")
        );
        std::fs::read_to_string(path)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect()
    }

    /// The twelve published violation rates, rows gemini / gpt-4o / claude,
    /// columns (no country, H-H), (no country, H-AI), (country, H-H),
    /// (country, H-AI).
    const PUBLISHED: [(&str, [f64; 4]); 3] = [
        ("gemini", [0.22, 0.23, 0.16, 0.22]),
        ("gpt-4o", [0.15, 0.11, 0.15, 0.12]),
        ("claude", [0.04, 0.05, 0.07, 0.06]),
    ];

    #[test]
    fn published_fixture_hand_count_matches_expected_rates() {
        // Oracle: recount the raw fixture JSON without any report code.
        let prompts = fixture_lines("prompts.jsonl");
        let country_of: BTreeMap<&str, bool> = prompts
            .iter()
            .map(|p| (p["id"].as_str().unwrap(), p["country_mentioned"].as_bool().unwrap()))
            .collect();
        let verdicts = fixture_lines("verdicts.jsonl");
        let mut counts: BTreeMap<(String, String, bool), (u64, u64)> = BTreeMap::new();
        for v in &verdicts {
            let key = (
                v["subject_model_id"].as_str().unwrap().to_string(),
                v["context"].as_str().unwrap().to_string(),
                country_of[v["prompt_id"].as_str().unwrap()],
            );
            let slot = counts.entry(key).or_default();
            slot.1 += 1;
            if v["violated"].as_bool().unwrap() {
                slot.0 += 1;
            }
        }
        assert_eq!(verdicts.len(), 1200);
        assert_eq!(counts.len(), 12);
        for (model, rates) in PUBLISHED {
            for (i, (country, context)) in
                [(false, "human_human"), (false, "human_ai"), (true, "human_human"), (true, "human_ai")]
                    .into_iter()
                    .enumerate()
            {
                let (violations, total) =
                    counts[&(model.to_string(), context.to_string(), country)];
                assert_eq!(total, 100, "{model}/{context}/{country}");
                let rate = violations as f64 / total as f64;
                assert!(
                    (rate - rates[i]).abs() < 1e-9,
                    "{model}/{context}/{country}: {rate} vs {}",
                    rates[i]
                );
            }
        }
    }

    #[test]
    fn published_fixture_renders_published_table() {
        let norms: Vec<Norm> = fixture_lines("norms.jsonl")
            .into_iter()
            .map(|v| serde_json::from_value(v).unwrap())
            .collect();
        let prompts: Vec<TestPrompt> = fixture_lines("prompts.jsonl")
            .into_iter()
            .map(|v| serde_json::from_value(v).unwrap())
            .collect();
        let verdicts: Vec<ViolationVerdict> = fixture_lines("verdicts.jsonl")
            .into_iter()
            .map(|v| serde_json::from_value(v).unwrap())
            .collect();

        let rows = join_rows(&norms, &prompts, &verdicts).unwrap();
        let cells = aggregate(&rows, TableLayout::Table2Layout.group_by());
        assert_eq!(cells.len(), 12);

        let csv = emit_table(&cells, TableLayout::Table2Layout, OutputFormat::DelimitedTable)
            .unwrap();
        let mut want = String::from(
            "model,hh_no_country,hai_no_country,hh_with_country,hai_with_country\n",
        );
        for (model, rates) in PUBLISHED {
            want.push_str(&format!(
                "{model},{:.2},{:.2},{:.2},{:.2}\n",
                rates[0], rates[1], rates[2], rates[3]
            ));
        }
        assert_eq!(csv, want);
    }
}
