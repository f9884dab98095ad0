//! Default response programs for the scripted backend.
//!
//! Each program reads the rendered prompt the way a model would and answers in
//! the format that prompt asks for. Facts about the user travel through text as
//! sentences of the form `my <variable> is <value>.` with underscores shown as
//! spaces, so any stage that has to "understand" a message can parse them back.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::LazyLock;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde_json::{json, Map, Value};

use super::json::extract_json;
use super::prompts::{self as p, TYPES_SENTINEL_END, TYPES_SENTINEL_START};
use super::scripted::ScriptedBackend;
use super::{BackendError, ChatRequest};
use crate::model::Role;

/// A family of interchangeable info-type names with a shared choice set.
#[derive(Debug, Clone, Copy)]
pub struct Family {
    pub name: &'static str,
    pub aliases: &'static [&'static str],
    pub choices: &'static [&'static str],
}

macro_rules! family {
    ($name:literal, [$($alias:literal),*], [$($choice:literal),*]) => {
        Family { name: $name, aliases: &[$($alias),*], choices: &[$($choice),*] }
    };
}

/// Built-in topics the scripted generator draws questions from. Every choice
/// contains an underscore, so no ordinary sentence contains one verbatim.
pub const VOCABULARY: &[Family] = &[
    family!(
        "professional_experience_years",
        ["current_experience_level", "experience_level_years"],
        [
            "junior_0_2_years",
            "mid_level_3_5_years",
            "senior_6_10_years",
            "expert_10_plus_years"
        ]
    ),
    family!(
        "team_management_size",
        ["team_size", "subordinate_count"],
        [
            "no_management",
            "small_team_2_5",
            "medium_team_6_15",
            "large_team_15_plus"
        ]
    ),
    family!(
        "work_location",
        ["work_setting"],
        ["home_office", "hybrid_office", "full_time_office", "coworking_space"]
    ),
    family!(
        "work_schedule",
        ["working_hours"],
        [
            "flexible_hours",
            "standard_nine_to_five",
            "night_shift_work",
            "compressed_four_day"
        ]
    ),
    family!(
        "family_status",
        ["household_situation"],
        [
            "single_living_alone",
            "partnered_no_children",
            "married_with_toddler",
            "married_with_teens"
        ]
    ),
    family!(
        "monthly_budget_level",
        ["spending_budget"],
        [
            "tight_budget_mode",
            "moderate_budget_mode",
            "comfortable_budget_mode",
            "generous_budget_mode"
        ]
    ),
    family!(
        "fitness_routine_intensity",
        ["exercise_level"],
        [
            "sedentary_lifestyle",
            "light_weekly_walks",
            "moderate_gym_routine",
            "intense_daily_training"
        ]
    ),
    family!(
        "dietary_preference",
        ["eating_style"],
        ["omnivore_diet", "vegetarian_diet", "vegan_diet", "low_carb_diet"]
    ),
    family!(
        "commute_mode",
        ["daily_transport"],
        [
            "car_commute",
            "public_transit_commute",
            "bike_commute",
            "walking_commute"
        ]
    ),
    family!(
        "housing_type",
        ["living_arrangement"],
        ["rented_apartment", "shared_flat", "owned_house", "living_with_parents"]
    ),
    family!(
        "learning_goal_focus",
        ["current_study_goal"],
        [
            "technical_certification",
            "language_course",
            "leadership_training",
            "no_active_learning"
        ]
    ),
    family!(
        "health_condition_status",
        ["health_status"],
        [
            "fully_healthy",
            "recovering_from_injury",
            "managing_chronic_condition",
            "post_surgery_rest"
        ]
    ),
    family!(
        "sleep_schedule_pattern",
        ["sleep_routine"],
        [
            "early_bird_schedule",
            "regular_night_schedule",
            "late_night_owl",
            "irregular_sleep_pattern"
        ]
    ),
    family!(
        "travel_frequency",
        ["trip_frequency"],
        [
            "rarely_travels",
            "quarterly_trips",
            "monthly_trips",
            "weekly_business_travel"
        ]
    ),
    family!(
        "pet_ownership",
        ["pet_situation"],
        ["no_pets_at_home", "owns_a_dog", "owns_a_cat", "fosters_rescue_animals"]
    ),
    family!(
        "social_activity_level",
        ["social_life"],
        [
            "mostly_solitary",
            "small_friend_circle",
            "active_social_calendar",
            "community_organizer_role"
        ]
    ),
    family!(
        "childcare_arrangement",
        ["childcare_setup"],
        [
            "no_childcare_needed",
            "daycare_weekdays",
            "family_helps_out",
            "nanny_at_home"
        ]
    ),
    family!(
        "savings_goal_stage",
        ["savings_progress"],
        [
            "building_emergency_fund",
            "saving_for_home",
            "investing_for_retirement",
            "paying_off_debt"
        ]
    ),
    family!(
        "cooking_skill_level",
        ["kitchen_skills"],
        [
            "rarely_cooks_meals",
            "basic_home_cooking",
            "confident_home_cook",
            "advanced_meal_prep"
        ]
    ),
    family!(
        "stress_level",
        ["current_stress"],
        [
            "low_stress_period",
            "manageable_stress",
            "high_stress_period",
            "burnout_recovery"
        ]
    ),
    family!(
        "primary_hobby",
        ["main_hobby"],
        [
            "hiking_outdoors",
            "painting_and_drawing",
            "playing_music",
            "gaming_online"
        ]
    ),
    family!(
        "volunteer_commitment",
        ["volunteering_time"],
        [
            "no_volunteering",
            "occasional_volunteering",
            "weekly_volunteering",
            "board_member_role"
        ]
    ),
    family!(
        "car_ownership_status",
        ["vehicle_situation"],
        ["no_car_owned", "leases_a_car", "owns_used_car", "owns_new_car"]
    ),
    family!(
        "language_proficiency_level",
        ["second_language_level"],
        [
            "beginner_second_language",
            "conversational_second_language",
            "fluent_second_language",
            "native_bilingual_level"
        ]
    ),
    family!(
        "side_project_status",
        ["side_business"],
        [
            "no_side_project",
            "planning_side_project",
            "running_side_project",
            "scaling_side_business"
        ]
    ),
];

pub fn family_of(info_type: &str) -> Option<&'static Family> {
    VOCABULARY
        .iter()
        .find(|f| f.name == info_type || f.aliases.contains(&info_type))
}

/// The first `n` choices of a family, padded with numbered stages if needed.
pub fn family_choices(family: &Family, n: usize) -> Vec<String> {
    (0..n)
        .map(|i| match family.choices.get(i) {
            Some(c) => c.to_string(),
            None => format!("{}_stage_{}", family.name, i + 1),
        })
        .collect()
}

pub fn humanize(s: &str) -> String {
    s.replace('_', " ")
}

fn dehumanize(s: &str) -> String {
    s.trim().replace(' ', "_")
}

/// The sentence that states `var = value` in scripted text.
pub fn fact_phrase(var: &str, value: &str) -> String {
    format!("my {} is {}.", humanize(var), humanize(value))
}

static FACT_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\bmy ([a-z0-9][a-z0-9 ]*?) is ([a-z0-9][a-z0-9 ]*?)\.").unwrap());
static OPTION_LINE_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?m)^(\d+)\. (.*)$").unwrap());
static VARIANT_LINE_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?m)^variant_(\d+): (.*)$").unwrap());

/// Every `(variable, value)` fact stated in `text`, in order of appearance.
pub fn parse_facts(text: &str) -> Vec<(String, String)> {
    FACT_RE
        .captures_iter(text)
        .map(|c| (dehumanize(&c[1]), dehumanize(&c[2])))
        .collect()
}

/// Latest stated value per variable across `texts`.
fn latest_facts<'a>(texts: impl IntoIterator<Item = &'a str>) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    for text in texts {
        for (k, v) in parse_facts(text) {
            out.insert(k, v);
        }
    }
    out
}

fn malformed(tag: &str, what: &str) -> BackendError {
    BackendError::Malformed(format!("scripted {tag}: could not find {what} in prompt"))
}

/// Text between `start` and the next `end` after it.
fn between<'a>(text: &'a str, start: &str, end: &str) -> Option<&'a str> {
    let from = text.find(start)? + start.len();
    let rest = &text[from..];
    Some(match rest.find(end) {
        Some(i) => &rest[..i],
        None => rest,
    })
}

fn section<'a>(req: &'a ChatRequest, start: &str, end: &str) -> Result<&'a str, BackendError> {
    between(prompt(req), start, end).ok_or_else(|| malformed(&req.tag, start.trim()))
}

fn section_json(req: &ChatRequest, start: &str, end: &str) -> Result<Value, BackendError> {
    let text = section(req, start, end)?;
    extract_json(text).map_err(|_| malformed(&req.tag, &format!("JSON after {:?}", start.trim())))
}

/// The rendered template: the first user message.
fn prompt(req: &ChatRequest) -> &str {
    req.messages
        .iter()
        .find(|m| m.role == Role::User)
        .map(|m| m.content.as_str())
        .unwrap_or("")
}

fn capture_number(req: &ChatRequest, pattern: &str) -> Result<usize, BackendError> {
    Regex::new(pattern)
        .ok()
        .and_then(|re| re.captures(prompt(req)).and_then(|c| c[1].parse().ok()))
        .ok_or_else(|| malformed(&req.tag, pattern))
}

fn object(v: &Value) -> Map<String, Value> {
    v.as_object().cloned().unwrap_or_default()
}

fn strings(v: &Value) -> Vec<String> {
    v.as_array()
        .map(|a| a.iter().filter_map(|x| x.as_str().map(str::to_string)).collect())
        .unwrap_or_default()
}

fn phrases<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> String {
    pairs
        .into_iter()
        .map(|(k, v)| fact_phrase(k, v))
        .collect::<Vec<_>>()
        .join(" ")
}

fn join_names(names: &[String]) -> String {
    match names {
        [] => String::new(),
        [one] => one.clone(),
        [init @ .., last] => format!("{} and {}", init.join(", "), last),
    }
}

const QUESTION_FORMS: &[&str] = &[
    "Given my {}, how should I plan the next few weeks?",
    "What changes would you suggest for my routine, considering my {}?",
    "How can I make better weekly decisions around my {}?",
    "What should I prioritize this month given my {}?",
    "Can you suggest a practical plan that fits my {}?",
    "How do I balance my goals with my {}?",
];

const CLOSERS: &[&str] = &[
    "What should I focus on this week?",
    "Any tips for organizing my days better?",
    "How would you adjust my plans around that?",
    "What would you recommend I do next?",
    "Could you help me rethink my routine?",
];

const FOLLOWUPS: &[&str] = &[
    "Thanks, that helps. How would I keep this going over the next few weeks?",
    "Makes sense. What mistakes do people usually make with this?",
    "Could you break the first step down a bit more?",
    "Good point. Is there a simple way to track whether it is working?",
    "Interesting. What would you do differently if time were short?",
];

const REPLIES: &[&str] = &[
    "Here is a practical way to approach it: start small, review after a week, and adjust.",
    "A good first step is to write down the constraints you mentioned and plan around them.",
    "I would handle the most time-sensitive item first and keep the rest flexible.",
    "Try splitting this into two or three concrete actions and put them on your calendar.",
];

const ADVICE: &[&str] = &[
    "Start with one small change and review it after two weeks.",
    "Block out fixed time for it and keep the plan simple.",
    "Pick the option that keeps your weekly load sustainable.",
    "Lean on tools and routines that match this situation.",
];

fn pick<'a>(rng: &mut ChaCha8Rng, items: &'a [&'a str]) -> &'a str {
    items.choose(rng).copied().unwrap_or_default()
}

fn sample_user_profile(req: &ChatRequest, _: &mut ChaCha8Rng) -> Result<String, BackendError> {
    let basic = section(req, "Basic Profile:\n", "\n\nComplementary Information:")?;
    let extra = section(req, "Complementary Information:\n", "\n\nKeep the summary professional")?;
    let fields = extract_json(basic).map(|v| object(&v)).unwrap_or_default();
    let name = fields
        .get("name")
        .and_then(Value::as_str)
        .map(str::to_string)
        .unwrap_or_else(|| basic.lines().next().unwrap_or("Unnamed").trim().to_string());
    let words: Vec<&str> = extra.split_whitespace().take(120).collect();
    let profile = if words.is_empty() {
        let facts: Vec<String> = fields
            .iter()
            .filter(|(k, _)| k.as_str() != "name")
            .map(|(k, v)| {
                format!(
                    "{}: {}",
                    humanize(k),
                    v.as_str().map(str::to_string).unwrap_or_else(|| v.to_string())
                )
            })
            .collect();
        if facts.is_empty() {
            format!("{name} has no further recorded background.")
        } else {
            format!("{name}. {}.", facts.join("; "))
        }
    } else {
        words.join(" ")
    };
    Ok(json!({"name": name, "profile": profile}).to_string())
}

fn sample_user_questions(req: &ChatRequest, rng: &mut ChaCha8Rng) -> Result<String, BackendError> {
    let n = capture_number(req, r"Generate (\d+) distinct questions")?;
    let per = capture_number(req, r"Have (\d+) required_info items")?.min(VOCABULARY.len());
    let choices = capture_number(req, r"\*\*info_choices\*\*: (\d+) mutually")?;
    let mut usage = vec![0usize; VOCABULARY.len()];
    let mut seen_sets = BTreeSet::new();
    let mut questions = Vec::new();
    while questions.len() < n {
        let mut order: Vec<usize> = (0..VOCABULARY.len()).collect();
        order.shuffle(rng);
        order.sort_by_key(|&i| usage[i]);
        let mut picked: Vec<usize> = order[..per].to_vec();
        // occasionally revisit a topic so schema refinement has merges to do
        if rng.random_bool(0.3) {
            if let Some(&reuse) = order.iter().find(|&&i| usage[i] > 0 && !picked.contains(&i)) {
                picked[per - 1] = reuse;
            }
        }
        let mut set = picked.clone();
        set.sort();
        if !seen_sets.insert(set) {
            continue;
        }
        let mut names = Vec::new();
        let mut required = Vec::new();
        for &i in &picked {
            usage[i] += 1;
            let fam = &VOCABULARY[i];
            let use_alias = rng.random_bool(0.5);
            let (info_type, mut opts) = if use_alias {
                let alias = fam.aliases.choose(rng).copied().unwrap_or(fam.name);
                let mut opts = family_choices(fam, choices.max(fam.choices.len()));
                opts.rotate_left(1);
                (alias, opts)
            } else {
                (fam.name, family_choices(fam, choices))
            };
            opts.truncate(choices);
            names.push(humanize(info_type));
            required.push(json!({"info_type": info_type, "info_choices": opts}));
        }
        let text = pick(rng, QUESTION_FORMS).replace("{}", &join_names(&names));
        questions.push(json!({"question": text, "required_info": required}));
    }
    Ok(json!({ "questions": questions }).to_string())
}

fn refine_state_schema(req: &ChatRequest, _: &mut ChaCha8Rng) -> Result<String, BackendError> {
    let questions = section_json(req, "Required Information Types:\n", "\n\nYour task is to:")?;
    let mut groups: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    let items = questions.as_array().cloned().unwrap_or_default();
    for q in &items {
        for info in q["required_info"].as_array().into_iter().flatten() {
            let Some(t) = info["info_type"].as_str() else { continue };
            let canonical = family_of(t)
                .map(|f| f.name.to_string())
                .unwrap_or_else(|| t.to_string());
            groups.entry(canonical).or_default().insert(t.to_string());
        }
    }
    let out: Map<String, Value> = groups
        .into_iter()
        .map(|(k, v)| (k, json!(v.into_iter().collect::<Vec<_>>())))
        .collect();
    Ok(Value::Object(out).to_string())
}

fn fix_schema(req: &ChatRequest, _: &mut ChaCha8Rng) -> Result<String, BackendError> {
    let groups = section_json(
        req,
        "Conflicting Information Types and their contexts:\n",
        "\n\nYour task is to create",
    )?;
    let n = capture_number(req, r"Create (\d+) choices for each")?;
    let mut out = Map::new();
    for (name, group) in object(&groups) {
        let choices = match family_of(&name) {
            Some(f) => family_choices(f, n),
            None => {
                let mut pool: Vec<String> = Vec::new();
                for (_, opts) in object(&group["original_info_types"]) {
                    for c in strings(&opts) {
                        if !pool.contains(&c) {
                            pool.push(c);
                        }
                    }
                }
                let mut k = 1;
                while pool.len() < n {
                    pool.push(format!("{name}_stage_{k}"));
                    k += 1;
                }
                pool.truncate(n);
                pool
            }
        };
        out.insert(name, json!(choices));
    }
    Ok(Value::Object(out).to_string())
}

fn schema_map(v: &Value) -> Vec<(String, Vec<String>)> {
    object(v).into_iter().map(|(k, c)| (k, strings(&c))).collect()
}

fn sample_initial_state(req: &ChatRequest, rng: &mut ChaCha8Rng) -> Result<String, BackendError> {
    let schema = section_json(
        req,
        "State Schema (each key represents a state variable with possible values):\n",
        "\n\nFor each state variable",
    )?;
    let mut out = Map::new();
    for (name, choices) in schema_map(&schema) {
        if choices.is_empty() {
            continue;
        }
        let idx = if choices.len() >= 3 {
            rng.random_range(1..choices.len() - 1)
        } else {
            rng.random_range(0..choices.len())
        };
        out.insert(name, json!(choices[idx]));
    }
    Ok(Value::Object(out).to_string())
}

fn sample_state_updates(req: &ChatRequest, rng: &mut ChaCha8Rng) -> Result<String, BackendError> {
    let schema = section_json(req, "**State Schema:**\n", "\n\n**Current State:**")?;
    let current = object(&section_json(req, "**Current State:**\n", "\n\n**Prior Updates:**")?);
    let counts = object(&section_json(req, "updates):**\n", "\n\n**REQUIREMENTS:**")?);
    let max = capture_number(req, r"prioritize variables with <(\d+) updates")?;
    let k = capture_number(req, r"Update ~(\d+) state variables only")?;

    let mut candidates: Vec<(String, Vec<String>, u64)> = schema_map(&schema)
        .into_iter()
        .map(|(name, choices)| {
            let n = counts.get(&name).and_then(Value::as_u64).unwrap_or(0);
            (name, choices, n)
        })
        .filter(|(_, choices, n)| (*n as usize) < max && choices.len() >= 2)
        .collect();
    candidates.shuffle(rng);
    candidates.sort_by_key(|(_, _, n)| *n);

    let mut updated = Map::new();
    for (name, choices, _) in candidates.into_iter().take(k) {
        let now = current.get(&name).and_then(Value::as_str).unwrap_or("");
        let fresh: Vec<&String> = choices.iter().filter(|c| c.as_str() != now).collect();
        if let Some(v) = fresh.choose(rng) {
            updated.insert(name, json!(v));
        }
    }
    let names: Vec<String> = updated.keys().map(|k| humanize(k)).collect();
    let summary = if names.is_empty() {
        "A quiet period without notable changes.".to_string()
    } else {
        format!("This period brought changes to the user's {}.", join_names(&names))
    };
    Ok(json!({"period_summary": summary, "updated": updated}).to_string())
}

fn elaborate_state_updates(req: &ChatRequest, rng: &mut ChaCha8Rng) -> Result<String, BackendError> {
    let changes = object(&section_json(req, "**State Changes:**\n", "\n\n**States NOT Updated")?);
    let names: Vec<String> = changes.keys().cloned().collect();
    let mut events = Vec::new();
    let mut i = 0;
    while i < names.len() {
        let size = if i + 1 < names.len() && rng.random_bool(0.5) {
            2
        } else {
            1
        };
        let group = &names[i..i + size];
        let shown: Vec<String> = group.iter().map(|n| humanize(n)).collect();
        events.push(json!({
            "states": group,
            "event": format!("Something shifted in the user's life around their {}.", join_names(&shown)),
        }));
        i += size;
    }
    Ok(json!({ "events": events }).to_string())
}

/// Builds an exposure utterance, sometimes leaving one fact implicit so the
/// verifier has something to catch.
fn exposure_text(opening: &str, exposed: &[(String, String)], rng: &mut ChaCha8Rng) -> String {
    let skip = if !exposed.is_empty() && rng.random_bool(0.15) {
        Some(rng.random_range(0..exposed.len()))
    } else {
        None
    };
    let mut parts = vec![opening.to_string()];
    for (i, (k, v)) in exposed.iter().enumerate() {
        if Some(i) == skip {
            parts.push(format!("Things have been changing with my {} lately.", humanize(k)));
        } else {
            parts.push(fact_phrase(k, v));
        }
    }
    parts.push(pick(rng, CLOSERS).to_string());
    parts.join(" ")
}

fn sample_update_queries(req: &ChatRequest, rng: &mut ChaCha8Rng) -> Result<String, BackendError> {
    let after = section(req, "State Updates Context (", "\n\nAvailable State Schema:")?;
    let body = after.split_once("):\n").map(|(_, b)| b).unwrap_or(after);
    let context = extract_json(body).map_err(|_| malformed(&req.tag, "update context JSON"))?;
    let mut queries = Vec::new();
    for item in context.as_array().into_iter().flatten() {
        let exposed: Vec<(String, String)> = object(&item["state_transition"])
            .into_iter()
            .filter_map(|(k, t)| t["to"].as_str().map(|v| (k, v.to_string())))
            .collect();
        queries.push(exposure_text("Quick update on my side:", &exposed, rng));
    }
    Ok(json!({ "queries": queries }).to_string())
}

fn sample_initial_queries(req: &ChatRequest, rng: &mut ChaCha8Rng) -> Result<String, BackendError> {
    let state = object(&section_json(
        req,
        "User's Current State (to be exposed through queries):\n",
        "\n\nAvailable State Schema:",
    )?);
    let entries: Vec<(String, String)> = state
        .into_iter()
        .filter_map(|(k, v)| v.as_str().map(|v| (k, v.to_string())))
        .collect();
    let mut queries = Vec::new();
    let mut i = 0;
    while i < entries.len() {
        let size = rng.random_range(1..=3).min(entries.len() - i);
        let group = &entries[i..i + size];
        let exposed: Map<String, Value> = group.iter().map(|(k, v)| (k.clone(), json!(v))).collect();
        queries.push(json!({
            "exposed_states": exposed,
            "query": exposure_text("A bit of context about me:", group, rng),
        }));
        i += size;
    }
    Ok(json!({ "queries": queries }).to_string())
}

fn check_query_exposure(req: &ChatRequest, _: &mut ChaCha8Rng) -> Result<String, BackendError> {
    let query = section(req, "User Query:\n\"", "\"\n\nState Variables to Predict:")?;
    let choices = section_json(req, "State Variables to Predict:\n", "\n\nFor each state variable")?;
    let facts = latest_facts([query]);
    let mut out = Map::new();
    for (name, opts) in schema_map(&choices) {
        let guess = facts
            .get(&name)
            .filter(|v| opts.contains(v))
            .cloned()
            .or_else(|| opts.first().cloned())
            .unwrap_or_default();
        out.insert(name, json!(guess));
    }
    Ok(Value::Object(out).to_string())
}

fn refine_query(req: &ChatRequest, _: &mut ChaCha8Rng) -> Result<String, BackendError> {
    let query = section(req, "Original Query:\n\"", "\"\n\nIntended State Variables to Expose:")?;
    let exposed = object(&section_json(
        req,
        "Intended State Variables to Expose:\n",
        "\n\nAvailable State Schema:",
    )?);
    let present = latest_facts([query]);
    let missing: Vec<String> = exposed
        .iter()
        .filter_map(|(k, v)| v.as_str().map(|v| (k, v)))
        .filter(|(k, v)| present.get(*k).map(String::as_str) != Some(*v))
        .map(|(k, v)| fact_phrase(k, v))
        .collect();
    let refined = if missing.is_empty() {
        query.to_string()
    } else {
        format!("{query} To be precise, {}", missing.join(" "))
    };
    Ok(json!({ "query": refined }).to_string())
}

fn sample_personalized_answers(req: &ChatRequest, rng: &mut ChaCha8Rng) -> Result<String, BackendError> {
    let text = section(req, "**State Variants to Answer For:**\n", "\n\n**Instructions:**")?;
    let mut out = Map::new();
    for cap in VARIANT_LINE_RE.captures_iter(text) {
        let variant = extract_json(&cap[2]).map(|v| object(&v)).unwrap_or_default();
        let mut pairs: Vec<(String, String)> = variant
            .iter()
            .filter_map(|(k, v)| v.as_str().map(|v| (k.clone(), v.to_string())))
            .collect();
        if pairs.len() > 1 && rng.random_bool(0.1) {
            pairs.remove(0);
        }
        let facts = phrases(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())));
        out.insert(
            format!("variant_{}", &cap[1]),
            json!(format!("Considering that {facts} {}", pick(rng, ADVICE))),
        );
    }
    Ok(Value::Object(out).to_string())
}

fn check_personalized_answer(req: &ChatRequest, _: &mut ChaCha8Rng) -> Result<String, BackendError> {
    let answer = section(
        req,
        "**Answer to Evaluate:**\n",
        "\n\n**Available State Variants (Choices):**",
    )?;
    let choices = section(
        req,
        "**Available State Variants (Choices):**\n",
        "\n\n**Instructions:**",
    )?;
    let facts = latest_facts([answer]);
    let mut best = (0usize, 0usize);
    for cap in OPTION_LINE_RE.captures_iter(choices) {
        let idx: usize = cap[1].parse().unwrap_or(0);
        let variant = extract_json(&cap[2]).map(|v| object(&v)).unwrap_or_default();
        let score = variant
            .iter()
            .filter(|(k, v)| v.as_str().is_some_and(|v| facts.get(*k).map(String::as_str) == Some(v)))
            .count();
        if best.0 == 0 || score > best.1 {
            best = (idx, score);
        }
    }
    Ok(best.0.max(1).to_string())
}

fn refine_personalized_answer(req: &ChatRequest, rng: &mut ChaCha8Rng) -> Result<String, BackendError> {
    let target = object(&section_json(
        req,
        "**Target State Variant (the answer should correspond to this):**\n",
        "\n\n**Other State Variants",
    )?);
    let facts = phrases(target.iter().filter_map(|(k, v)| v.as_str().map(|v| (k.as_str(), v))));
    Ok(json!({"answer": format!("Specifically, since {facts} {}", pick(rng, ADVICE))}).to_string())
}

fn user_followup(_: &ChatRequest, rng: &mut ChaCha8Rng) -> Result<String, BackendError> {
    Ok(pick(rng, FOLLOWUPS).to_string())
}

fn assistant_respond(_: &ChatRequest, rng: &mut ChaCha8Rng) -> Result<String, BackendError> {
    Ok(pick(rng, REPLIES).to_string())
}

fn user_lines(conversation: &str) -> impl Iterator<Item = &str> {
    conversation.lines().filter_map(|l| l.strip_prefix("User: "))
}

fn conversation(req: &ChatRequest) -> &str {
    let text = prompt(req);
    text.rfind("Conversation:\n")
        .map(|i| &text[i + "Conversation:\n".len()..])
        .unwrap_or("")
}

fn memory_extract_awe(req: &ChatRequest, _: &mut ChaCha8Rng) -> Result<String, BackendError> {
    let mut facts: Vec<String> = Vec::new();
    for line in user_lines(conversation(req)) {
        for (k, v) in parse_facts(line) {
            let f = fact_phrase(&k, &v);
            if !facts.contains(&f) {
                facts.push(f);
            }
        }
    }
    Ok(json!({ "facts": facts }).to_string())
}

/// Whether the memory-type instructions mention any salient token of `var`.
pub fn mentions_topic(types: &str, var: &str) -> bool {
    let lower = types.to_lowercase();
    var.split('_').filter(|t| t.len() >= 4).any(|t| lower.contains(t))
}

fn memory_update_awi(req: &ChatRequest, _: &mut ChaCha8Rng) -> Result<String, BackendError> {
    let types = section(req, &format!("{TYPES_SENTINEL_START}\n"), TYPES_SENTINEL_END)?;
    let mut out = Map::new();
    for line in user_lines(conversation(req)) {
        for (k, v) in parse_facts(line) {
            if mentions_topic(types, &k) {
                let phrase = fact_phrase(&k, &v);
                out.insert(k, json!(phrase));
            }
        }
    }
    Ok(Value::Object(out).to_string())
}

fn answer_block(n: usize) -> String {
    format!("```json\n{{\n    \"answer\": {n}\n}}\n```")
}

fn context_facts(req: &ChatRequest) -> BTreeMap<String, String> {
    let n = req.messages.len().saturating_sub(1);
    latest_facts(req.messages[..n].iter().map(|m| m.content.as_str()))
}

/// 1-based option whose stated facts agree most with `known`; lowest index on ties.
fn best_option(options_text: &str, known: &BTreeMap<String, String>) -> usize {
    let mut best = (1usize, None::<usize>);
    for cap in OPTION_LINE_RE.captures_iter(options_text) {
        let idx: usize = cap[1].parse().unwrap_or(1);
        let score = parse_facts(&cap[2])
            .iter()
            .filter(|(k, v)| known.get(k) == Some(v))
            .count();
        if best.1.is_none_or(|b| score > b) {
            best = (idx, Some(score));
        }
    }
    best.0
}

fn eval_overall(req: &ChatRequest, _: &mut ChaCha8Rng) -> Result<String, BackendError> {
    let last = req.last_content();
    let options =
        between(last, "following options:", "\n\nExpress your choice").ok_or_else(|| malformed(&req.tag, "options"))?;
    Ok(answer_block(best_option(options, &context_facts(req))))
}

fn eval_utilization(req: &ChatRequest, _: &mut ChaCha8Rng) -> Result<String, BackendError> {
    let last = req.last_content();
    let state =
        between(last, "are as follows:\n", "\n\nPlease select").ok_or_else(|| malformed(&req.tag, "state block"))?;
    let known: BTreeMap<String, String> = extract_json(state)
        .map(|v| object(&v))
        .unwrap_or_default()
        .into_iter()
        .filter_map(|(k, v)| v.as_str().map(|v| (k, v.to_string())))
        .collect();
    let options =
        between(last, "following options:", "\n\nExpress your choice").ok_or_else(|| malformed(&req.tag, "options"))?;
    Ok(answer_block(best_option(options, &known)))
}

fn eval_probe(req: &ChatRequest, _: &mut ChaCha8Rng) -> Result<String, BackendError> {
    let schema = extract_json(req.last_content()).map_err(|_| malformed(&req.tag, "state schema"))?;
    let known = context_facts(req);
    let mut out = Map::new();
    for (name, opts) in schema_map(&schema) {
        let guess = known
            .get(&name)
            .filter(|v| opts.contains(v))
            .cloned()
            .or_else(|| opts.first().cloned())
            .unwrap_or_default();
        out.insert(name, json!(guess));
    }
    Ok(format!(
        "```json\n{}\n```",
        serde_json::to_string_pretty(&Value::Object(out)).unwrap_or_default()
    ))
}

const STOPWORDS: &[&str] = &[
    "about",
    "around",
    "better",
    "change",
    "changes",
    "considering",
    "could",
    "decisions",
    "given",
    "goals",
    "month",
    "next",
    "plan",
    "practical",
    "prioritize",
    "question",
    "routine",
    "should",
    "suggest",
    "that",
    "this",
    "weekly",
    "weeks",
    "what",
    "with",
    "would",
    "balance",
    "make",
    "fits",
];

fn self_evolution(req: &ChatRequest, _: &mut ChaCha8Rng) -> Result<String, BackendError> {
    let current = section(
        req,
        "Current 'Types of Information to Remember' section:\n",
        "\n\nFeedback summary",
    )?;
    let feedback = between(
        prompt(req),
        "Feedback summary (from recent usage and evaluation):\n",
        "\n\nTask:",
    )
    .and_then(|t| extract_json(t).ok())
    .unwrap_or(Value::Null);

    let mut topics: Vec<String> = Vec::new();
    for key in object(&feedback["user_information_updates"]).keys() {
        topics.push(humanize(key));
    }
    if topics.is_empty() {
        for item in feedback["question_answer_history"].as_array().into_iter().flatten() {
            let q = item["question"].as_str().unwrap_or("");
            let q = q.strip_prefix("Question: ").unwrap_or(q);
            let q = q.split(";\n").next().unwrap_or(q);
            for word in q.split(|c: char| !c.is_ascii_alphabetic()) {
                let w = word.to_lowercase();
                if w.len() >= 5 && !STOPWORDS.contains(&w.as_str()) {
                    topics.push(w);
                }
            }
        }
    }
    let lower = current.to_lowercase();
    let mut fresh: Vec<String> = Vec::new();
    for t in topics {
        if !lower.contains(&t) && !fresh.contains(&t) {
            fresh.push(t);
        }
    }
    fresh.truncate(12);

    let mut numbered = current
        .lines()
        .filter(|l| {
            l.split_once(". ")
                .is_some_and(|(n, _)| n.trim().parse::<usize>().is_ok())
        })
        .count();
    let mut new_types = current.trim_end().to_string();
    let mut changes = Vec::new();
    for t in &fresh {
        numbered += 1;
        new_types.push_str(&format!(
            "\n{numbered}. Track {t}: Record the user's current {t} and overwrite it whenever it changes."
        ));
        changes.push(format!("added {t}"));
    }
    Ok(format!(
        "```json {}\n```",
        serde_json::to_string_pretty(&json!({"new_types": new_types, "changes": changes})).unwrap_or_default()
    ))
}

fn factual_consistency(req: &ChatRequest, _: &mut ChaCha8Rng) -> Result<String, BackendError> {
    let document = section(
        req,
        "User's Conversational History Summary:\n",
        "\n\nClaims about user:",
    )?;
    let claims = section(req, "Claims about user:\n", "\n\nFor each numbered claim")?;
    let mut out = Map::new();
    for cap in OPTION_LINE_RE.captures_iter(claims) {
        let claim = cap[2].trim();
        let supported = document.contains(claim)
            || claim
                .split_once(": ")
                .is_some_and(|(var, value)| document.contains(&format!("{} is {}", humanize(var), humanize(value))));
        out.insert(cap[1].to_string(), json!(if supported { "yes" } else { "no" }));
    }
    Ok(Value::Object(out).to_string())
}

/// A scripted backend with a program for every pipeline prompt.
pub fn scripted_world(seed: u64) -> ScriptedBackend {
    ScriptedBackend::new(seed)
        .rule(p::SAMPLE_USER_PROFILE, sample_user_profile)
        .rule(p::SAMPLE_USER_QUESTIONS, sample_user_questions)
        .rule(p::REFINE_STATE_SCHEMA, refine_state_schema)
        .rule(p::FIX_SCHEMA, fix_schema)
        .rule(p::SAMPLE_INITIAL_STATE, sample_initial_state)
        .rule(p::SAMPLE_STATE_UPDATES, sample_state_updates)
        .rule(p::ELABORATE_STATE_UPDATES, elaborate_state_updates)
        .rule(p::SAMPLE_UPDATE_QUERIES, sample_update_queries)
        .rule(p::SAMPLE_INITIAL_QUERIES, sample_initial_queries)
        .rule(p::CHECK_QUERY_EXPOSURE, check_query_exposure)
        .rule(p::REFINE_QUERY, refine_query)
        .rule(p::SAMPLE_PERSONALIZED_ANSWERS, sample_personalized_answers)
        .rule(p::CHECK_PERSONALIZED_ANSWER, check_personalized_answer)
        .rule(p::REFINE_PERSONALIZED_ANSWER, refine_personalized_answer)
        .rule(p::USER_FOLLOWUP, user_followup)
        .rule(p::ASSISTANT_RESPOND, assistant_respond)
        .rule(p::MEMORY_EXTRACT_AWE, memory_extract_awe)
        .rule(p::MEMORY_UPDATE_AWI, memory_update_awi)
        .rule(p::EVAL_OVERALL, eval_overall)
        .rule(p::EVAL_UTILIZATION, eval_utilization)
        .rule(p::EVAL_PROBE, eval_probe)
        .rule(p::SELF_EVOLUTION, self_evolution)
        .rule(p::FACTUAL_CONSISTENCY, factual_consistency)
}
