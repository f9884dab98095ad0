use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use super::{pretty, GenError, Genesis};
use crate::backend::prompts::SAMPLE_USER_PROFILE;
use crate::model::{ModelError, PersonaRecord};
use crate::rng::rng_for;

pub const MAX_PROFILE_WORDS: usize = 500;

/// One entry of a persona pool: structured basic fields plus free text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolRecord {
    pub id: String,
    pub basic: Map<String, Value>,
    #[serde(default)]
    pub complementary: String,
}

impl PoolRecord {
    /// The value of the first basic field whose key mentions "name".
    pub fn name(&self) -> Option<&str> {
        self.basic
            .get("name")
            .or_else(|| self.basic.iter().find(|(k, _)| k.contains("name")).map(|(_, v)| v))
            .and_then(Value::as_str)
            .filter(|s| !s.trim().is_empty())
    }
}

/// Reads newline-delimited JSON pool records, skipping blank lines.
pub fn read_pool(path: &Path) -> Result<Vec<PoolRecord>, GenError> {
    let text = std::fs::read_to_string(path).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: PoolRecord = serde_json::from_str(line).map_err(|source| ModelError::Json {
            path: format!("{}:{}", path.display(), i + 1),
            source,
        })?;
        if record.name().is_none() {
            return Err(GenError::invalid(
                "persona pool",
                format!("record {} on line {} has no name field", record.id, i + 1),
            ));
        }
        out.push(record);
    }
    Ok(out)
}

const FIRST: &[&str] = &[
    "Amara", "Bruno", "Chen", "Dalia", "Emeka", "Freya", "Gustavo", "Hana", "Ivan", "Jolene", "Kofi", "Leila", "Mateo",
    "Nadia", "Oskar", "Priya", "Quentin", "Rosa", "Sami", "Tove",
];
const LAST: &[&str] = &[
    "Okafor",
    "Lindqvist",
    "Moreau",
    "Tanaka",
    "Reyes",
    "Novak",
    "Haddad",
    "Kowalski",
    "Mensah",
    "Ferreira",
    "Brennan",
    "Castillo",
];
const OCCUPATIONS: &[&str] = &[
    "software engineer",
    "nurse",
    "high school teacher",
    "graphic designer",
    "accountant",
    "electrician",
    "marketing coordinator",
    "pharmacist",
    "logistics planner",
    "chef",
];
const CITIES: &[&str] = &[
    "Austin",
    "Leeds",
    "Lyon",
    "Osaka",
    "Porto",
    "Denver",
    "Gdansk",
    "Accra",
    "Melbourne",
    "Toronto",
];
const TRAITS: &[&str] = &[
    "is methodical and likes to plan ahead",
    "is curious and enjoys trying new things",
    "values routine and steady progress",
    "is outgoing and energized by people",
    "is pragmatic and budget-conscious",
];
const INTERESTS: &[&str] = &[
    "spends weekends exploring local markets",
    "follows a few podcasts about personal finance",
    "keeps a small balcony garden",
    "plays in an amateur football league",
    "reads historical fiction before bed",
];

/// A deterministic pool of synthetic personas for desk-scale runs.
pub fn synthetic_pool(n: usize, seed: u64) -> Vec<PoolRecord> {
    let mut rng = rng_for(seed, "persona_pool");
    (0..n)
        .map(|i| {
            let first = *FIRST.choose(&mut rng).unwrap();
            let last = *LAST.choose(&mut rng).unwrap();
            let occupation = *OCCUPATIONS.choose(&mut rng).unwrap();
            let city = *CITIES.choose(&mut rng).unwrap();
            let age: u32 = rng.random_range(23..=61);
            let basic = json!({
                "name": format!("{first} {last}"),
                "age": age,
                "occupation": occupation,
                "city": city,
            });
            let complementary = format!(
                "{first} {last} lives in {city} and works as a {occupation}. {first} {}. Outside work, {first} {}.",
                TRAITS.choose(&mut rng).unwrap(),
                INTERESTS.choose(&mut rng).unwrap(),
            );
            PoolRecord {
                id: format!("synthetic-{seed}-{i:04}"),
                basic: basic.as_object().cloned().unwrap_or_default(),
                complementary,
            }
        })
        .collect()
}

fn truncate_words(text: &str, max: usize) -> String {
    text.split_whitespace().take(max).collect::<Vec<_>>().join(" ")
}

fn basic_summary(record: &PoolRecord) -> String {
    record
        .basic
        .iter()
        .map(|(k, v)| match v {
            Value::String(s) => format!("{}: {s}", k.replace('_', " ")),
            other => format!("{}: {other}", k.replace('_', " ")),
        })
        .collect::<Vec<_>>()
        .join("; ")
}

/// Extracts the user's name and a short profile through the model.
pub fn summarize_persona(genesis: &Genesis<'_>, record: &PoolRecord) -> Result<PersonaRecord, GenError> {
    let reply = genesis.ask_json(
        SAMPLE_USER_PROFILE,
        vec![
            ("basic_profile", pretty(&record.basic)),
            ("complementary_info", record.complementary.clone()),
        ],
        &[],
    )?;
    let name = reply["name"]
        .as_str()
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .or_else(|| record.name())
        .ok_or_else(|| GenError::invalid("persona", format!("no name for record {}", record.id)))?
        .to_string();
    let mut profile = truncate_words(reply["profile"].as_str().unwrap_or(""), MAX_PROFILE_WORDS);
    if profile.is_empty() {
        profile = truncate_words(&basic_summary(record), MAX_PROFILE_WORDS);
    }
    if profile.is_empty() {
        return Err(GenError::invalid(
            "persona",
            format!("empty profile for record {}", record.id),
        ));
    }
    Ok(PersonaRecord {
        name,
        profile,
        source_id: record.id.clone(),
    })
}
