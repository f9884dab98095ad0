//! Domain types shared across the pipeline, plus the pure functions over them.
//!
//! A [`Blueprint`] stores the initial state and per-period deltas; full state
//! vectors are always derived through [`state_at`].

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;

use chrono::{Months, NaiveDate};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

/// Value of the top-level `amemgym_version` field in every JSON document.
pub const FORMAT_VERSION: &str = "1";

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("position {t} out of range 0..={max}")]
    OutOfRange { t: usize, max: usize },
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("invalid date {0:?}")]
    Date(String),
    #[error("unsupported document version {found:?} (expected {FORMAT_VERSION:?})")]
    Version { found: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed document {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PersonaRecord {
    pub name: String,
    pub profile: String,
    pub source_id: String,
}

impl PersonaRecord {
    /// Profile block used by every prompt that conditions on the user.
    pub fn formatted(&self) -> String {
        format!("Name: {}\nProfile: {}", self.name, self.profile)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateVariable {
    pub name: String,
    pub choices: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateSchema {
    pub variables: Vec<StateVariable>,
    /// Original info-type name -> canonical variable name.
    pub alias_map: BTreeMap<String, String>,
}

impl StateSchema {
    pub fn get(&self, name: &str) -> Option<&StateVariable> {
        self.variables.iter().find(|v| v.name == name)
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.variables.iter().position(|v| v.name == name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.variables.iter().map(|v| v.name.as_str())
    }

    pub fn len(&self) -> usize {
        self.variables.len()
    }

    pub fn is_empty(&self) -> bool {
        self.variables.is_empty()
    }

    pub fn is_legal(&self, name: &str, value: &str) -> bool {
        self.get(name).is_some_and(|v| v.choices.iter().any(|c| c == value))
    }

    /// `{name: [choices]}` as a JSON object, in schema order.
    pub fn choices_json(&self) -> serde_json::Value {
        self.subset_json(self.names())
    }

    pub fn subset_json<'a>(&self, names: impl IntoIterator<Item = &'a str>) -> serde_json::Value {
        let mut map = serde_json::Map::new();
        for name in names {
            if let Some(var) = self.get(name) {
                map.insert(name.to_string(), serde_json::json!(var.choices));
            }
        }
        serde_json::Value::Object(map)
    }

    /// Sorts `names` into schema order, dropping unknown names and duplicates.
    pub fn in_schema_order<'a>(&self, names: impl IntoIterator<Item = &'a str>) -> Vec<String> {
        let wanted: BTreeSet<&str> = names.into_iter().collect();
        self.names()
            .filter(|n| wanted.contains(n))
            .map(str::to_string)
            .collect()
    }
}

/// Mapping from variable name to chosen value. Full when it covers the whole
/// schema, partial (a variant or an exposed subset) otherwise.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StateAssignment(pub BTreeMap<String, String>);

impl StateAssignment {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, name: &str) -> Option<&str> {
        self.0.get(name).map(String::as_str)
    }

    pub fn insert(&mut self, name: impl Into<String>, value: impl Into<String>) {
        self.0.insert(name.into(), value.into());
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.0.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// Key-overwrite union: entries of `delta` replace existing ones.
    pub fn overlay(&self, delta: &StateAssignment) -> StateAssignment {
        let mut out = self.clone();
        for (k, v) in &delta.0 {
            out.0.insert(k.clone(), v.clone());
        }
        out
    }

    pub fn restrict<'a>(&self, names: impl IntoIterator<Item = &'a str>) -> StateAssignment {
        StateAssignment(
            names
                .into_iter()
                .filter_map(|n| self.0.get(n).map(|v| (n.to_string(), v.clone())))
                .collect(),
        )
    }

    pub fn is_full_over(&self, schema: &StateSchema) -> bool {
        self.len() == schema.len() && schema.variables.iter().all(|v| self.is_legal_entry(schema, &v.name))
    }

    fn is_legal_entry(&self, schema: &StateSchema, name: &str) -> bool {
        self.get(name).is_some_and(|val| schema.is_legal(name, val))
    }
}

impl FromIterator<(String, String)> for StateAssignment {
    fn from_iter<I: IntoIterator<Item = (String, String)>>(iter: I) -> Self {
        StateAssignment(iter.into_iter().collect())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LifeEvent {
    pub states: Vec<String>,
    pub narrative: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExposureUtterance {
    pub query: String,
    pub exposed: StateAssignment,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeriodPlan {
    pub index: usize,
    pub summary: String,
    pub updates: StateAssignment,
    pub events: Vec<LifeEvent>,
    pub update_queries: Vec<ExposureUtterance>,
}

/// Canonical key of a state variant: `name=value` pairs in schema order joined by `|`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VariantKey(pub String);

impl VariantKey {
    /// Builds the key for `required` (already in schema order) from `state`.
    pub fn from_state(required: &[String], state: &StateAssignment) -> Result<Self, ModelError> {
        let mut parts = Vec::with_capacity(required.len());
        for name in required {
            let value = state
                .get(name)
                .ok_or_else(|| ModelError::Integrity(format!("required variable {name:?} missing from state")))?;
            parts.push(format!("{name}={value}"));
        }
        Ok(VariantKey(parts.join("|")))
    }

    /// Splits the key back into ordered `(name, value)` pairs.
    pub fn pairs(&self) -> Vec<(&str, &str)> {
        if self.0.is_empty() {
            return Vec::new();
        }
        self.0.split('|').filter_map(|p| p.split_once('=')).collect()
    }

    pub fn to_assignment(&self) -> StateAssignment {
        self.pairs()
            .into_iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect()
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for VariantKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// All variant keys over `required`, odometer order with the last variable fastest.
pub fn variant_space(schema: &StateSchema, required: &[String]) -> Result<Vec<VariantKey>, ModelError> {
    let mut keys: Vec<Vec<String>> = vec![Vec::new()];
    for name in required {
        let var = schema
            .get(name)
            .ok_or_else(|| ModelError::Integrity(format!("unknown variable {name:?}")))?;
        keys = keys
            .into_iter()
            .flat_map(|prefix| {
                var.choices.iter().map(move |c| {
                    let mut next = prefix.clone();
                    next.push(format!("{name}={c}"));
                    next
                })
            })
            .collect();
    }
    Ok(keys.into_iter().map(|parts| VariantKey(parts.join("|"))).collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvaluationQuestion {
    pub id: u32,
    pub text: String,
    /// Required variables, in schema order.
    pub required: Vec<String>,
    pub variants: BTreeMap<VariantKey, String>,
    /// Multiple-choice option lists, one per evaluation position `0..=N_p`.
    pub options: Vec<Vec<VariantKey>>,
}

impl EvaluationQuestion {
    pub fn options_at(&self, t: usize) -> &[VariantKey] {
        self.options.get(t).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Answer texts of the options at position `t`, in presentation order.
    pub fn option_texts(&self, t: usize) -> Vec<String> {
        self.options_at(t)
            .iter()
            .map(|k| self.variants.get(k).cloned().unwrap_or_default())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenConfig {
    pub n_periods: usize,
    pub states_per_question: usize,
    pub turns_per_exposure: usize,
    pub num_questions: usize,
    pub num_choices_per_state: usize,
    pub max_changes_per_state: usize,
    /// `None` means `ceil(M / N_p) + 1`, resolved once the schema size is known.
    pub num_changes_per_period: Option<usize>,
    pub max_options_per_question: usize,
    pub max_refinements: usize,
    pub language: String,
    pub start_date: String,
    pub period_months: u32,
}

impl GenConfig {
    fn preset(n_periods: usize, states_per_question: usize, turns_per_exposure: usize) -> Self {
        GenConfig {
            n_periods,
            states_per_question,
            turns_per_exposure,
            num_questions: 10,
            num_choices_per_state: 3,
            max_changes_per_state: 3,
            num_changes_per_period: None,
            max_options_per_question: 7,
            max_refinements: 3,
            language: "English".to_string(),
            start_date: "2025-01-01".to_string(),
            period_months: 1,
        }
    }

    /// (N_p, N_s, N_i) = (10, 2, 4)
    pub fn base() -> Self {
        Self::preset(10, 2, 4)
    }

    /// (N_p, N_s, N_i) = (20, 3, 10)
    pub fn extra() -> Self {
        Self::preset(20, 3, 10)
    }

    pub fn named(name: &str) -> Option<Self> {
        match name {
            "base" => Some(Self::base()),
            "extra" => Some(Self::extra()),
            _ => None,
        }
    }

    pub fn changes_per_period(&self, schema_size: usize) -> usize {
        self.num_changes_per_period
            .unwrap_or_else(|| schema_size.div_ceil(self.n_periods.max(1)) + 1)
    }

    pub fn check(&self) -> Result<(), ModelError> {
        let counts = [
            ("n_periods", self.n_periods),
            ("states_per_question", self.states_per_question),
            ("turns_per_exposure", self.turns_per_exposure),
            ("num_questions", self.num_questions),
            ("num_choices_per_state", self.num_choices_per_state),
            ("max_changes_per_state", self.max_changes_per_state),
            ("max_options_per_question", self.max_options_per_question),
            ("period_months", self.period_months as usize),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::Integrity(format!("{name} must be >= 1")));
        }
        if self.num_choices_per_state < 2 {
            return Err(ModelError::Integrity("num_choices_per_state must be >= 2".into()));
        }
        parse_date(&self.start_date)?;
        Ok(())
    }
}

fn parse_date(s: &str) -> Result<NaiveDate, ModelError> {
    NaiveDate::parse_from_str(s, "%Y-%m-%d").map_err(|_| ModelError::Date(s.to_string()))
}

/// `start` advanced by `months`, as `YYYY-MM-DD`.
pub fn advance_date(start: &str, months: u32) -> Result<String, ModelError> {
    let d = parse_date(start)?;
    d.checked_add_months(Months::new(months))
        .map(|d| d.format("%Y-%m-%d").to_string())
        .ok_or_else(|| ModelError::Date(start.to_string()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Blueprint {
    pub id: String,
    pub persona: PersonaRecord,
    pub schema: StateSchema,
    pub initial_state: StateAssignment,
    pub periods: Vec<PeriodPlan>,
    pub initial_queries: Vec<ExposureUtterance>,
    pub questions: Vec<EvaluationQuestion>,
    pub config: GenConfig,
    pub start_date: String,
    pub seed: u64,
}

impl Blueprint {
    pub fn n_periods(&self) -> usize {
        self.periods.len()
    }

    pub fn positions(&self) -> std::ops::RangeInclusive<usize> {
        0..=self.n_periods()
    }

    /// Calendar date at the end of period `t`.
    pub fn date_at(&self, t: usize) -> String {
        let months = self.config.period_months * t as u32;
        advance_date(&self.start_date, months).unwrap_or_else(|_| self.start_date.clone())
    }

    pub fn question(&self, id: u32) -> Option<&EvaluationQuestion> {
        self.questions.iter().find(|q| q.id == id)
    }

    /// Opening utterances of the sessions at position `t`.
    pub fn openers_at(&self, t: usize) -> &[ExposureUtterance] {
        if t == 0 {
            &self.initial_queries
        } else {
            self.periods
                .get(t - 1)
                .map(|p| p.update_queries.as_slice())
                .unwrap_or(&[])
        }
    }
}

/// The full state vector at the end of period `t`.
pub fn state_at(blueprint: &Blueprint, t: usize) -> Result<StateAssignment, ModelError> {
    let max = blueprint.n_periods();
    if t > max {
        return Err(ModelError::OutOfRange { t, max });
    }
    let mut state = blueprint.initial_state.clone();
    for period in &blueprint.periods[..t] {
        for (k, v) in period.updates.iter() {
            state.insert(k, v);
        }
    }
    Ok(state)
}

/// The variant of `question` that is correct under `state`.
pub fn ground_truth_variant(question: &EvaluationQuestion, state: &StateAssignment) -> Result<VariantKey, ModelError> {
    VariantKey::from_state(&question.required, state)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    Persona,
    Schema,
    InitialState,
    PeriodCount,
    IllegalUpdate,
    NoOpUpdate,
    Event,
    EventCoverage,
    UpdateQuery,
    UpdateExposureCoverage,
    InitialQuery,
    InitialExposureCoverage,
    QuestionCount,
    Question,
    MissingVariant,
    ExtraVariant,
    Answer,
    Options,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}: {}", self.kind, self.detail)
    }
}

struct Violations(Vec<Violation>);

impl Violations {
    fn push(&mut self, kind: ViolationKind, detail: impl Into<String>) {
        self.0.push(Violation {
            kind,
            detail: detail.into(),
        });
    }
}

fn is_clean_token(s: &str) -> bool {
    !s.is_empty() && !s.contains('|') && !s.contains('=')
}

/// Checks every structural invariant of a blueprint; an empty list means valid.
pub fn validate_blueprint(bp: &Blueprint) -> Vec<Violation> {
    use ViolationKind::*;
    let mut out = Violations(Vec::new());
    let schema = &bp.schema;

    if bp.persona.name.trim().is_empty() {
        out.push(Persona, "empty persona name");
    }
    if bp.persona.profile.trim().is_empty() {
        out.push(Persona, "empty persona profile");
    }

    let mut seen = BTreeSet::new();
    if schema.is_empty() {
        out.push(Schema, "schema has no variables");
    }
    for var in &schema.variables {
        if !seen.insert(var.name.as_str()) {
            out.push(Schema, format!("duplicate variable {:?}", var.name));
        }
        if !is_clean_token(&var.name) {
            out.push(
                Schema,
                format!("variable name {:?} is empty or contains '|'/'='", var.name),
            );
        }
        let distinct: BTreeSet<&str> = var.choices.iter().map(String::as_str).collect();
        if var.choices.len() < 2 || distinct.len() != var.choices.len() {
            out.push(Schema, format!("variable {:?} needs >= 2 distinct choices", var.name));
        }
        if let Some(bad) = var.choices.iter().find(|c| !is_clean_token(c)) {
            out.push(
                Schema,
                format!("choice {bad:?} of {:?} is empty or contains '|'/'='", var.name),
            );
        }
    }
    for (alias, target) in &schema.alias_map {
        if schema.get(target).is_none() {
            out.push(Schema, format!("alias {alias:?} maps to unknown variable {target:?}"));
        }
    }

    if !bp.initial_state.is_full_over(schema) {
        out.push(InitialState, "initial state is not a full legal assignment");
    }

    if bp.periods.len() != bp.config.n_periods {
        out.push(
            PeriodCount,
            format!("{} periods, config requires {}", bp.periods.len(), bp.config.n_periods),
        );
    }

    let mut prev = bp.initial_state.clone();
    for (i, period) in bp.periods.iter().enumerate() {
        let p = i + 1;
        if period.index != p {
            out.push(PeriodCount, format!("period at slot {p} has index {}", period.index));
        }
        for (k, v) in period.updates.iter() {
            if !schema.is_legal(k, v) {
                out.push(IllegalUpdate, format!("period {p}: {k}={v} is not in the schema"));
            } else if prev.get(k) == Some(v) {
                out.push(NoOpUpdate, format!("period {p}: {k} already has value {v:?}"));
            }
        }
        let mut covered = BTreeSet::new();
        for ev in &period.events {
            if ev.states.is_empty() {
                out.push(Event, format!("period {p}: event with no states"));
            }
            for s in &ev.states {
                if schema.get(s).is_none() {
                    out.push(Event, format!("period {p}: event names unknown variable {s:?}"));
                }
                covered.insert(s.as_str());
            }
        }
        for k in period.updates.keys() {
            if !covered.contains(k) {
                out.push(
                    EventCoverage,
                    format!("period {p}: update of {k} not explained by any event"),
                );
            }
        }
        let mut exposed = BTreeSet::new();
        for uq in &period.update_queries {
            if uq.query.trim().is_empty() || uq.exposed.is_empty() {
                out.push(UpdateQuery, format!("period {p}: empty update query"));
            }
            for (k, v) in uq.exposed.iter() {
                if period.updates.get(k) != Some(v) {
                    out.push(
                        UpdateQuery,
                        format!("period {p}: query exposes {k}={v} which is not an update"),
                    );
                }
                exposed.insert(k);
            }
        }
        for k in period.updates.keys() {
            if !exposed.contains(k) {
                out.push(
                    UpdateExposureCoverage,
                    format!("period {p}: update of {k} is never exposed"),
                );
            }
        }
        prev = prev.overlay(&period.updates);
    }

    let mut initially_exposed = BTreeSet::new();
    for (i, q) in bp.initial_queries.iter().enumerate() {
        if q.query.trim().is_empty() || q.exposed.is_empty() || q.exposed.len() > 3 {
            out.push(InitialQuery, format!("initial query {i} must expose 1-3 variables"));
        }
        for (k, v) in q.exposed.iter() {
            if bp.initial_state.get(k) != Some(v) {
                out.push(
                    InitialQuery,
                    format!("initial query {i} exposes {k}={v} which differs from the initial state"),
                );
            }
            initially_exposed.insert(k);
        }
    }
    for name in schema.names() {
        if !initially_exposed.contains(name) {
            out.push(
                InitialExposureCoverage,
                format!("variable {name} is never exposed initially"),
            );
        }
    }

    if bp.questions.len() != bp.config.num_questions {
        out.push(
            QuestionCount,
            format!(
                "{} questions, config requires {}",
                bp.questions.len(),
                bp.config.num_questions
            ),
        );
    }
    let states: Vec<StateAssignment> = (0..=bp.periods.len())
        .map(|t| state_at(bp, t).unwrap_or_default())
        .collect();
    let mut ids = BTreeSet::new();
    for q in &bp.questions {
        let qid = q.id;
        if !ids.insert(qid) {
            out.push(Question, format!("duplicate question id {qid}"));
        }
        if q.text.trim().is_empty() {
            out.push(Question, format!("question {qid} has empty text"));
        }
        if q.required.len() != bp.config.states_per_question {
            out.push(
                Question,
                format!(
                    "question {qid} requires {} variables, config requires {}",
                    q.required.len(),
                    bp.config.states_per_question
                ),
            );
        }
        let ordered = schema.in_schema_order(q.required.iter().map(String::as_str));
        if ordered != q.required {
            out.push(
                Question,
                format!("question {qid}: required variables unknown, duplicated or out of schema order"),
            );
            continue;
        }
        let space = match variant_space(schema, &q.required) {
            Ok(s) => s,
            Err(e) => {
                out.push(Question, format!("question {qid}: {e}"));
                continue;
            }
        };
        let space_set: BTreeSet<&VariantKey> = space.iter().collect();
        for key in &space {
            if !q.variants.contains_key(key) {
                out.push(MissingVariant, format!("question {qid}: missing variant {key}"));
            }
        }
        for key in q.variants.keys() {
            if !space_set.contains(key) {
                out.push(ExtraVariant, format!("question {qid}: unexpected variant {key}"));
            }
        }
        let mut answers = BTreeSet::new();
        for (key, answer) in &q.variants {
            if answer.trim().is_empty() {
                out.push(Answer, format!("question {qid}: empty answer for {key}"));
            } else if !answers.insert(answer.as_str()) {
                out.push(
                    Answer,
                    format!("question {qid}: answer for {key} duplicates another variant"),
                );
            }
        }
        if q.options.len() != states.len() {
            out.push(
                Options,
                format!(
                    "question {qid}: {} option lists for {} positions",
                    q.options.len(),
                    states.len()
                ),
            );
            continue;
        }
        let expected = space.len().min(bp.config.max_options_per_question);
        for (t, opts) in q.options.iter().enumerate() {
            let distinct: BTreeSet<&VariantKey> = opts.iter().collect();
            if opts.len() != expected || distinct.len() != opts.len() {
                out.push(
                    Options,
                    format!("question {qid} position {t}: expected {expected} distinct options"),
                );
            }
            if let Ok(truth) = ground_truth_variant(q, &states[t]) {
                if !opts.contains(&truth) {
                    out.push(
                        Options,
                        format!("question {qid} position {t}: ground truth {truth} not offered"),
                    );
                }
            }
        }
    }
    out.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Assistant,
    System,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn user(content: impl Into<String>) -> Self {
        Message {
            role: Role::User,
            content: content.into(),
        }
    }
    pub fn assistant(content: impl Into<String>) -> Self {
        Message {
            role: Role::Assistant,
            content: content.into(),
        }
    }
    pub fn system(content: impl Into<String>) -> Self {
        Message {
            role: Role::System,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EpisodeMode {
    OnPolicy,
    OffPolicy,
}

impl fmt::Display for EpisodeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EpisodeMode::OnPolicy => "onpolicy",
            EpisodeMode::OffPolicy => "offpolicy",
        })
    }
}

/// One multiple-choice evaluation at one position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvaluationRecord {
    pub question_id: u32,
    /// Variant keys in presentation order.
    pub options: Vec<VariantKey>,
    /// Zero-based index of the ground-truth option.
    pub truth: usize,
    /// Zero-based choice; `None` records an abstention.
    pub chosen: Option<usize>,
    /// Choice made with the ground-truth states injected.
    pub ub_chosen: Option<usize>,
    /// Memories surfaced to the assistant while answering.
    #[serde(default)]
    pub retrieved: Vec<String>,
}

impl EvaluationRecord {
    pub fn correct(&self) -> bool {
        self.chosen == Some(self.truth)
    }
    pub fn ub_correct(&self) -> bool {
        self.ub_chosen == Some(self.truth)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeriodTraceEntry {
    pub position: usize,
    pub date: String,
    pub sessions: Vec<Vec<Message>>,
    pub evaluations: Vec<EvaluationRecord>,
    /// Probe answer per schema variable; `None` marks an unknown value.
    pub probe: BTreeMap<String, Option<String>>,
    #[serde(default)]
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub blueprint_ref: String,
    pub agent_descriptor: String,
    pub mode: EpisodeMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replay_source: Option<String>,
    pub seed: u64,
    pub periods: Vec<PeriodTraceEntry>,
}

impl EpisodeTrace {
    pub fn session_count(&self) -> usize {
        self.periods.iter().map(|p| p.sessions.len()).sum()
    }

    /// User/assistant exchanges across all sessions.
    pub fn round_count(&self) -> usize {
        self.periods
            .iter()
            .flat_map(|p| &p.sessions)
            .map(|s| s.iter().filter(|m| m.role == Role::User).count())
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionScore {
    pub position: usize,
    pub overall: f64,
    pub random: f64,
    pub ub: f64,
    /// `None` when the upper bound equals the random baseline.
    pub memory: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionDiagnostics {
    pub position: usize,
    pub write_rate: f64,
    pub read_rate: f64,
    pub util_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateScores {
    pub overall: f64,
    pub random: f64,
    pub ub: f64,
    pub memory: Option<f64>,
    pub write_rate: f64,
    pub read_rate: f64,
    pub util_rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FailureLabel {
    None,
    Write,
    Read,
    Utilization,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub position: usize,
    pub question_id: u32,
    pub label: FailureLabel,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub blueprint_ref: String,
    pub agent_descriptor: String,
    pub mode: EpisodeMode,
    pub episode_seed: u64,
    pub blueprint_seed: u64,
    pub question_evaluations: usize,
    pub sessions: usize,
    pub rounds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportBundle {
    pub per_position: Vec<PositionScore>,
    pub diagnostics: Vec<PositionDiagnostics>,
    pub aggregate: AggregateScores,
    pub labels: Vec<LabelRecord>,
    pub metadata: ReportMetadata,
}

#[derive(Serialize)]
struct VersionedOut<'a, T> {
    amemgym_version: &'a str,
    #[serde(flatten)]
    body: &'a T,
}

#[derive(Deserialize)]
struct VersionedIn<T> {
    amemgym_version: String,
    #[serde(flatten)]
    body: T,
}

/// Pretty JSON with the version field first and a trailing newline.
pub fn to_versioned_json<T: Serialize>(value: &T) -> String {
    let doc = VersionedOut {
        amemgym_version: FORMAT_VERSION,
        body: value,
    };
    let mut s = serde_json::to_string_pretty(&doc).expect("domain types always serialize");
    s.push('\n');
    s
}

pub fn from_versioned_json<T: DeserializeOwned>(text: &str, origin: &str) -> Result<T, ModelError> {
    let doc: VersionedIn<T> = serde_json::from_str(text).map_err(|source| ModelError::Json {
        path: origin.to_string(),
        source,
    })?;
    if doc.amemgym_version != FORMAT_VERSION {
        return Err(ModelError::Version {
            found: doc.amemgym_version,
        });
    }
    Ok(doc.body)
}

pub fn read_versioned<T: DeserializeOwned>(path: &Path) -> Result<T, ModelError> {
    let text = fs::read_to_string(path).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })?;
    from_versioned_json(&text, &path.display().to_string())
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    pub fn assignment(pairs: &[(&str, &str)]) -> StateAssignment {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    /// Small hand-built blueprint: 3 variables, 2 periods, 2 questions.
    pub fn tiny_blueprint() -> Blueprint {
        let schema = StateSchema {
            variables: vec![
                StateVariable {
                    name: "work_location".into(),
                    choices: vec!["home".into(), "office".into()],
                },
                StateVariable {
                    name: "work_schedule".into(),
                    choices: vec!["flexible".into(), "fixed".into()],
                },
                StateVariable {
                    name: "diet".into(),
                    choices: vec!["vegan".into(), "omnivore".into()],
                },
            ],
            alias_map: [
                ("work_location", "work_location"),
                ("work_schedule", "work_schedule"),
                ("diet", "diet"),
            ]
            .iter()
            .map(|(a, b)| (a.to_string(), b.to_string()))
            .collect(),
        };
        let initial_state = assignment(&[
            ("work_location", "home"),
            ("work_schedule", "flexible"),
            ("diet", "vegan"),
        ]);
        let periods = vec![
            PeriodPlan {
                index: 1,
                summary: "moved to the office".into(),
                updates: assignment(&[("work_location", "office")]),
                events: vec![LifeEvent {
                    states: vec!["work_location".into()],
                    narrative: "new badge".into(),
                }],
                update_queries: vec![ExposureUtterance {
                    query: "Any tips for my first week commuting?".into(),
                    exposed: assignment(&[("work_location", "office")]),
                }],
            },
            PeriodPlan {
                index: 2,
                summary: "schedule fixed, diet changed".into(),
                updates: assignment(&[("work_schedule", "fixed"), ("diet", "omnivore")]),
                events: vec![LifeEvent {
                    states: vec!["work_schedule".into(), "diet".into()],
                    narrative: "new manager".into(),
                }],
                update_queries: vec![ExposureUtterance {
                    query: "Now that I clock in at nine sharp and eat meat again, how do I plan lunches?".into(),
                    exposed: assignment(&[("work_schedule", "fixed"), ("diet", "omnivore")]),
                }],
            },
        ];
        let initial_queries = vec![
            ExposureUtterance {
                query: "How do I stay focused at my kitchen table whenever I choose to work?".into(),
                exposed: assignment(&[("work_location", "home"), ("work_schedule", "flexible")]),
            },
            ExposureUtterance {
                query: "Plant-based protein ideas?".into(),
                exposed: assignment(&[("diet", "vegan")]),
            },
        ];
        let mut config = GenConfig::base();
        config.n_periods = 2;
        config.num_questions = 2;
        config.num_choices_per_state = 2;
        let mut questions = Vec::new();
        for (id, required) in [
            (1u32, vec!["work_location", "work_schedule"]),
            (2, vec!["work_schedule", "diet"]),
        ] {
            let required: Vec<String> = required.into_iter().map(String::from).collect();
            let space = variant_space(&schema, &required).unwrap();
            let variants = space.iter().map(|k| (k.clone(), format!("answer for {k}"))).collect();
            let options = vec![space.clone(); 3];
            questions.push(EvaluationQuestion {
                id,
                text: format!("question {id}?"),
                required,
                variants,
                options,
            });
        }
        Blueprint {
            id: "user_000".into(),
            persona: PersonaRecord {
                name: "Ada".into(),
                profile: "Engineer.".into(),
                source_id: "p0".into(),
            },
            schema,
            initial_state,
            periods,
            initial_queries,
            questions,
            config,
            start_date: "2025-01-01".into(),
            seed: 7,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn state_at_zero_is_initial() {
        let bp = tiny_blueprint();
        assert_eq!(state_at(&bp, 0).unwrap(), bp.initial_state);
    }

    #[test]
    fn state_at_single_overlay() {
        let bp = tiny_blueprint();
        let s1 = state_at(&bp, 1).unwrap();
        assert_eq!(
            s1,
            assignment(&[
                ("work_location", "office"),
                ("work_schedule", "flexible"),
                ("diet", "vegan")
            ])
        );
    }

    #[test]
    fn state_at_out_of_range() {
        let bp = tiny_blueprint();
        assert!(matches!(state_at(&bp, 3), Err(ModelError::OutOfRange { t: 3, max: 2 })));
    }

    #[test]
    fn ground_truth_restricts_state() {
        let q = EvaluationQuestion {
            id: 1,
            text: "q".into(),
            required: vec!["work_location".into(), "work_schedule".into()],
            variants: BTreeMap::new(),
            options: vec![],
        };
        let state = assignment(&[("work_location", "home"), ("work_schedule", "flexible"), ("x", "y")]);
        assert_eq!(
            ground_truth_variant(&q, &state).unwrap().as_str(),
            "work_location=home|work_schedule=flexible"
        );
        let missing = assignment(&[("work_location", "home")]);
        assert!(matches!(
            ground_truth_variant(&q, &missing),
            Err(ModelError::Integrity(_))
        ));
    }

    #[test]
    fn variant_space_of_two_four_choice_variables() {
        let schema = StateSchema {
            variables: vec![
                StateVariable {
                    name: "professional_experience_years".into(),
                    choices: [
                        "junior_0_2_years",
                        "mid_level_3_5_years",
                        "senior_6_10_years",
                        "expert_10_plus_years",
                    ]
                    .map(String::from)
                    .to_vec(),
                },
                StateVariable {
                    name: "team_management_size".into(),
                    choices: [
                        "no_management",
                        "small_team_2_5",
                        "medium_team_6_15",
                        "large_team_15_plus",
                    ]
                    .map(String::from)
                    .to_vec(),
                },
            ],
            alias_map: BTreeMap::new(),
        };
        let required = vec![
            "professional_experience_years".to_string(),
            "team_management_size".to_string(),
        ];
        let space = variant_space(&schema, &required).unwrap();
        assert_eq!(space.len(), 16);
        let set: BTreeSet<_> = space.iter().collect();
        for a in &schema.variables[0].choices {
            for b in &schema.variables[1].choices {
                let state = assignment(&[("professional_experience_years", a), ("team_management_size", b)]);
                let key = VariantKey::from_state(&required, &state).unwrap();
                assert!(set.contains(&key));
            }
        }
    }

    #[test]
    fn tiny_blueprint_is_valid() {
        assert_eq!(validate_blueprint(&tiny_blueprint()), vec![]);
    }

    #[test]
    fn missing_variant_is_one_violation() {
        let mut bp = tiny_blueprint();
        let key = VariantKey("work_location=office|work_schedule=fixed".into());
        bp.questions[0].variants.remove(&key);
        let v = validate_blueprint(&bp);
        assert_eq!(v.len(), 1, "{v:?}");
        assert_eq!(v[0].kind, ViolationKind::MissingVariant);
        assert!(v[0].detail.contains("question 1"));
        assert!(v[0].detail.contains(key.as_str()));
    }

    #[test]
    fn noop_update_is_one_violation() {
        let mut bp = tiny_blueprint();
        // period 2 re-sets diet to its period-1 value
        bp.periods[1].updates.insert("diet", "vegan");
        bp.periods[1].update_queries[0].exposed.insert("diet", "vegan");
        let v = validate_blueprint(&bp);
        assert_eq!(v.len(), 1, "{v:?}");
        assert_eq!(v[0].kind, ViolationKind::NoOpUpdate);
    }

    #[test]
    fn uncovered_initial_exposure_is_flagged() {
        let mut bp = tiny_blueprint();
        bp.initial_queries.pop();
        let v = validate_blueprint(&bp);
        assert!(v.iter().any(|x| x.kind == ViolationKind::InitialExposureCoverage));
    }

    #[test]
    fn versioned_roundtrip_and_version_check() {
        let bp = tiny_blueprint();
        let text = to_versioned_json(&bp);
        assert!(text.starts_with("{\n  \"amemgym_version\": \"1\""));
        let back: Blueprint = from_versioned_json(&text, "mem").unwrap();
        assert_eq!(back, bp);
        let bad = text.replacen("\"1\"", "\"2\"", 1);
        assert!(matches!(
            from_versioned_json::<Blueprint>(&bad, "mem"),
            Err(ModelError::Version { .. })
        ));
    }

    #[test]
    fn dates_advance_by_months() {
        assert_eq!(advance_date("2025-01-31", 1).unwrap(), "2025-02-28");
        let bp = tiny_blueprint();
        assert_eq!(bp.date_at(2), "2025-03-01");
    }

    /// Left fold over the update list, written independently of `state_at`.
    fn fold_oracle(bp: &Blueprint, t: usize) -> BTreeMap<String, String> {
        bp.periods[..t].iter().fold(bp.initial_state.0.clone(), |mut acc, p| {
            acc.extend(p.updates.0.clone());
            acc
        })
    }

    fn random_blueprint(seed: u64) -> Blueprint {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut bp = tiny_blueprint();
        bp.periods.clear();
        let mut cur = bp.initial_state.clone();
        for i in 1..=8 {
            let var = &bp.schema.variables[rng.random_range(0..3)];
            let now = cur.get(&var.name).unwrap().to_string();
            let next = var.choices.iter().find(|c| **c != now).unwrap().clone();
            let updates = assignment(&[(var.name.as_str(), next.as_str())]);
            cur = cur.overlay(&updates);
            bp.periods.push(PeriodPlan {
                index: i,
                summary: String::new(),
                updates,
                events: vec![],
                update_queries: vec![],
            });
        }
        bp
    }

    #[test]
    fn state_at_matches_fold_oracle() {
        for seed in 0..5 {
            let bp = random_blueprint(seed);
            for t in 0..=bp.n_periods() {
                assert_eq!(state_at(&bp, t).unwrap().0, fold_oracle(&bp, t), "seed {seed} t {t}");
            }
        }
    }

    #[test]
    fn overlay_associativity() {
        let bp = random_blueprint(11);
        for t in 1..=bp.n_periods() {
            let prev = state_at(&bp, t - 1).unwrap();
            assert_eq!(state_at(&bp, t).unwrap(), prev.overlay(&bp.periods[t - 1].updates));
        }
    }

    proptest! {
        #[test]
        fn canonical_key_ignores_insertion_order(
            vals in proptest::collection::vec("[a-z]{1,6}", 4),
            perm in Just(vec![3usize, 1, 0, 2]).prop_shuffle(),
        ) {
            let names: Vec<String> = (0..4).map(|i| format!("v{i}")).collect();
            let mut a = StateAssignment::new();
            for i in 0..4 { a.insert(names[i].clone(), vals[i].clone()); }
            let mut b = StateAssignment::new();
            for &i in &perm { b.insert(names[i].clone(), vals[i].clone()); }
            let ka = VariantKey::from_state(&names, &a).unwrap();
            let kb = VariantKey::from_state(&names, &b).unwrap();
            prop_assert_eq!(ka.as_str().as_bytes(), kb.as_str().as_bytes());
            prop_assert_eq!(ka.to_assignment(), a);
        }
    }
}
