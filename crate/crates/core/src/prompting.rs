//! Prompt rendering: task instruction, demonstration blocks and the current
//! (test) block.
//!
//! A check-in renders as `(HH:MM AM|PM, DayName, <poi id>, <category>)`. The
//! hour is the local wall-clock hour modulo 12, so noon renders as `00:xx PM`;
//! that quirk is part of the studied prompt and is kept on purpose.

use std::collections::HashMap;
use std::sync::Arc;

use chrono::{DateTime, FixedOffset, Timelike, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{CheckIn, DemonstrationPool, PoiId, PredictionTask, Trajectory, TrajectoryId};
use crate::selection::RankedDemos;

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("demonstration trajectory {0} not found")]
    MissingTrajectory(TrajectoryId),
    #[error("unknown prompt template {0:?}")]
    UnknownTemplate(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// One `<context>`/`<target>` pair per demonstration trajectory.
    Segmented,
    /// All demonstration check-ins as one chronological `<history>` list.
    FlatHistory,
}

/// A versioned instruction template with `{{examples}}` and `{{current}}`
/// placeholders. The text of a given version never changes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PromptTemplate {
    pub id: &'static str,
    pub version: u32,
    pub layout: Layout,
    pub text: &'static str,
}

pub const FEWSHOT_V1: PromptTemplate = PromptTemplate {
    id: "fewshot",
    version: 1,
    layout: Layout::Segmented,
    text: include_str!("../templates/fewshot_v1.txt"),
};

pub const LLM_MOB_V1: PromptTemplate = PromptTemplate {
    id: "llm-mob",
    version: 1,
    layout: Layout::FlatHistory,
    text: include_str!("../templates/llm_mob_v1.txt"),
};

pub const TEMPLATES: &[PromptTemplate] = &[FEWSHOT_V1, LLM_MOB_V1];

impl PromptTemplate {
    /// Looks up `id` (latest version) or `id@version`.
    pub fn by_id(name: &str) -> Result<Self, PromptError> {
        let (id, version) = match name.split_once('@') {
            Some((id, v)) => (id, v.trim_start_matches('v').parse::<u32>().ok()),
            None => (name, None),
        };
        TEMPLATES
            .iter()
            .filter(|t| t.id == id && version.is_none_or(|v| v == t.version))
            .max_by_key(|t| t.version)
            .copied()
            .ok_or_else(|| PromptError::UnknownTemplate(name.to_owned()))
    }

    pub fn version_id(&self) -> String {
        format!("{}@{}", self.id, self.version)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DemoOrder {
    /// Most similar first.
    #[default]
    Ranked,
    ReverseRanked,
    /// By first check-in time, oldest first.
    Chronological,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RenderOptions {
    pub offset_minutes: i32,
    pub order: DemoOrder,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub full_text: String,
    pub demo_count: usize,
    /// Characters / 4, rounded up.
    pub token_estimate: usize,
    /// Demonstrations whose target check-in is the task's ground-truth POI.
    pub target_poi_in_demos: usize,
    /// Demonstrations of a single check-in, rendered with an empty context.
    pub single_checkin_demos: usize,
    pub template_version: String,
}

/// Resolves demonstration ids to trajectories.
pub trait TrajectoryLookup {
    fn trajectory(&self, id: TrajectoryId) -> Option<&Trajectory>;
}

impl TrajectoryLookup for DemonstrationPool {
    fn trajectory(&self, id: TrajectoryId) -> Option<&Trajectory> {
        self.get(id).map(|t| t.as_ref())
    }
}

impl TrajectoryLookup for HashMap<TrajectoryId, Arc<Trajectory>> {
    fn trajectory(&self, id: TrajectoryId) -> Option<&Trajectory> {
        self.get(&id).map(|t| t.as_ref())
    }
}

const DAY_NAMES: [&str; 7] = [
    "Monday",
    "Tuesday",
    "Wednesday",
    "Thursday",
    "Friday",
    "Saturday",
    "Sunday",
];

fn local(ts: DateTime<Utc>, offset_minutes: i32) -> DateTime<FixedOffset> {
    let offset = FixedOffset::east_opt(offset_minutes * 60).unwrap_or(FixedOffset::east_opt(0).unwrap());
    ts.with_timezone(&offset)
}

/// `(HH:MM AM|PM, DayName` without the closing part, shared by all tuples.
fn render_time(ts: DateTime<Utc>, offset_minutes: i32) -> String {
    use chrono::Datelike;
    let t = local(ts, offset_minutes);
    let hour = t.hour();
    let meridiem = if hour < 12 { "AM" } else { "PM" };
    format!(
        "{:02}:{:02} {}, {}",
        hour % 12,
        t.minute(),
        meridiem,
        DAY_NAMES[t.weekday().num_days_from_monday() as usize]
    )
}

pub fn render_checkin(c: &CheckIn, offset_minutes: i32) -> String {
    format!(
        "({}, {}, {})",
        render_time(c.timestamp, offset_minutes),
        c.poi,
        c.category
    )
}

fn join_checkins(cs: &[CheckIn], offset_minutes: i32) -> String {
    cs.iter()
        .map(|c| render_checkin(c, offset_minutes))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Two lines: `<context>: ...` (all but the last check-in) and `<target>: ...`.
pub fn render_demonstration(t: &Trajectory, offset_minutes: i32) -> String {
    render_pair(t.checkins(), offset_minutes)
}

fn render_pair(checkins: &[CheckIn], offset_minutes: i32) -> String {
    let (target, context) = checkins.split_last().expect("non-empty check-in list");
    format!(
        "<context>: {}\n<target>: {}",
        join_checkins(context, offset_minutes),
        render_checkin(target, offset_minutes)
    )
}

/// Text handed to embedding providers. Uses the demonstration line format so
/// that a candidate with the same check-ins as a task context renders to the
/// same text. Empty input renders to an empty string.
pub fn embedding_text(checkins: &[CheckIn], offset_minutes: i32) -> String {
    if checkins.is_empty() {
        String::new()
    } else {
        render_pair(checkins, offset_minutes)
    }
}

fn render_current(task: &PredictionTask, offset_minutes: i32) -> String {
    format!(
        "<context_current>: {}\n<target_current>: ({}, <next_place_id>, <next_place_category>)",
        join_checkins(&task.context, offset_minutes),
        render_time(task.target_time, offset_minutes)
    )
}

pub fn build_prompt<L: TrajectoryLookup + ?Sized>(
    task: &PredictionTask,
    demos: &RankedDemos,
    lookup: &L,
    template: &PromptTemplate,
    options: &RenderOptions,
) -> Result<PromptBundle, PromptError> {
    let mut resolved = demos
        .demos
        .iter()
        .map(|d| {
            lookup
                .trajectory(d.trajectory_id)
                .ok_or(PromptError::MissingTrajectory(d.trajectory_id))
        })
        .collect::<Result<Vec<_>, _>>()?;

    let target_poi_in_demos = resolved
        .iter()
        .filter(|t| t.last().poi == task.target_poi)
        .count();
    let single_checkin_demos = resolved.iter().filter(|t| t.len() == 1).count();

    match options.order {
        DemoOrder::Ranked => {}
        DemoOrder::ReverseRanked => resolved.reverse(),
        DemoOrder::Chronological => resolved.sort_by_key(|t| (t.first_timestamp(), t.id)),
    }

    let offset = options.offset_minutes;
    let examples = if resolved.is_empty() {
        String::new()
    } else {
        match template.layout {
            Layout::Segmented => {
                let blocks: Vec<String> = resolved
                    .iter()
                    .map(|t| render_demonstration(t, offset))
                    .collect();
                format!("The examples are as follows:\n{}\n", blocks.join("\n"))
            }
            Layout::FlatHistory => {
                let mut stays: Vec<&CheckIn> = resolved.iter().flat_map(|t| t.checkins()).collect();
                stays.sort_by_key(|c| c.timestamp);
                let list: Vec<String> = stays.iter().map(|c| render_checkin(c, offset)).collect();
                format!("The historical stays are as follows:\n<history>: {}\n", list.join(", "))
            }
        }
    };

    let with_examples = if examples.is_empty() {
        template.text.replace("{{examples}}\n", "")
    } else {
        template.text.replace("{{examples}}", &examples)
    };
    let full_text = with_examples.replace("{{current}}", &render_current(task, offset));

    Ok(PromptBundle {
        token_estimate: full_text.chars().count().div_ceil(4),
        full_text,
        demo_count: resolved.len(),
        target_poi_in_demos,
        single_checkin_demos,
        template_version: template.version_id(),
    })
}

/// A check-in tuple read back from prompt text.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RenderedStay {
    pub minute_of_day: u16,
    pub day: String,
    /// `None` for the `<next_place_id>` placeholder.
    pub poi: Option<PoiId>,
    pub category: String,
}

/// Structure recovered from a rendered prompt.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PromptAudit {
    /// Each demonstration's context stays, in prompt order.
    pub demo_contexts: Vec<Vec<RenderedStay>>,
    /// Each demonstration's target stay, in prompt order.
    pub demo_targets: Vec<RenderedStay>,
    /// Stays of a flat `<history>` list, if the prompt uses one.
    pub history: Vec<RenderedStay>,
    pub current_context: Vec<RenderedStay>,
    pub current_target: Option<RenderedStay>,
    pub context_current_blocks: usize,
    pub target_current_blocks: usize,
}

impl PromptAudit {
    pub fn demo_count(&self) -> usize {
        self.demo_targets.len()
    }

    /// Every POI id shown anywhere in the prompt, in order of appearance.
    pub fn poi_ids(&self) -> Vec<PoiId> {
        let mut out = Vec::new();
        for (ctx, target) in self.demo_contexts.iter().zip(&self.demo_targets) {
            out.extend(ctx.iter().filter_map(|s| s.poi));
            out.extend(target.poi);
        }
        out.extend(self.history.iter().filter_map(|s| s.poi));
        out.extend(self.current_context.iter().filter_map(|s| s.poi));
        out
    }
}

/// Parses `HH:MM AM|PM` back to minutes since midnight (`00:39 PM` is 12:39).
pub fn parse_clock(s: &str) -> Option<u16> {
    let (hm, meridiem) = s.trim().split_once(' ')?;
    let (h, m) = hm.split_once(':')?;
    let (h, m): (u16, u16) = (h.parse().ok()?, m.parse().ok()?);
    if h > 11 || m > 59 {
        return None;
    }
    let h = match meridiem {
        "AM" => h,
        "PM" => h + 12,
        _ => return None,
    };
    Some(h * 60 + m)
}

fn parse_stay(inner: &str) -> Option<RenderedStay> {
    let mut parts = inner.splitn(4, ", ");
    let minute_of_day = parse_clock(parts.next()?)?;
    let day = parts.next()?.to_owned();
    let poi = parts.next()?;
    let category = parts.next()?.to_owned();
    Some(RenderedStay {
        minute_of_day,
        day,
        poi: poi.parse().ok().map(PoiId),
        category,
    })
}

/// Parses a comma-separated tuple list such as `(..), (..)`.
pub fn parse_stays(list: &str) -> Vec<RenderedStay> {
    let list = list.trim();
    if list.len() < 2 || !list.starts_with('(') || !list.ends_with(')') {
        return Vec::new();
    }
    list[1..list.len() - 1]
        .split("), (")
        .filter_map(parse_stay)
        .collect()
}

pub fn audit_prompt(text: &str) -> PromptAudit {
    let mut audit = PromptAudit::default();
    let mut pending_context: Option<Vec<RenderedStay>> = None;
    for line in text.lines() {
        if let Some(rest) = line.strip_prefix("<context>: ").or(line.strip_prefix("<context>:")) {
            pending_context = Some(parse_stays(rest));
        } else if let Some(rest) = line.strip_prefix("<target>: ") {
            if let Some(stay) = parse_stays(rest).into_iter().next() {
                audit.demo_contexts.push(pending_context.take().unwrap_or_default());
                audit.demo_targets.push(stay);
            }
        } else if let Some(rest) = line.strip_prefix("<history>: ") {
            audit.history.extend(parse_stays(rest));
        } else if let Some(rest) = line
            .strip_prefix("<context_current>: ")
            .or(line.strip_prefix("<context_current>:"))
        {
            audit.context_current_blocks += 1;
            audit.current_context = parse_stays(rest);
        } else if let Some(rest) = line.strip_prefix("<target_current>: ") {
            audit.target_current_blocks += 1;
            audit.current_target = parse_stays(rest).into_iter().next();
        }
    }
    audit
}
