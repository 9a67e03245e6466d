use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use super::parser::{parse_all, EventKind, ParseEvent};
use super::normalize_title;
use crate::corpus::{Catalog, InteractionSequence, ItemId};

/// One preference-retrieval round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub thought: String,
    pub preference: String,
    pub retrieved: Vec<ItemId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub history: InteractionSequence,
    pub turns: Vec<Turn>,
    /// Think-block text after the last item list.
    #[serde(default)]
    pub closing_thought: String,
    pub final_titles: Vec<String>,
    /// Final-list lines that resolved to a retrieved item, in list order.
    pub final_items: Vec<ItemId>,
    pub raw_text: String,
    pub m: usize,
}

impl Trajectory {
    /// Distinct items retrieved across all turns.
    pub fn candidate_pool(&self) -> HashSet<ItemId> {
        self.turns.iter().flat_map(|t| t.retrieved.iter().copied()).collect()
    }
}

/// Per-checkpoint format verdicts. Every defect lowers a flag; nothing fails.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormatReport {
    pub structure_ok: bool,
    pub list_shape_ok: bool,
    pub preference_tags_ok: bool,
    pub grounding_ok: bool,
    pub invoked_at_least_once: bool,
    pub overall_ok: bool,
}

impl FormatReport {
    fn all_ok() -> Self {
        FormatReport {
            structure_ok: true,
            list_shape_ok: true,
            preference_tags_ok: true,
            grounding_ok: true,
            invoked_at_least_once: true,
            overall_ok: true,
        }
    }

    fn seal(mut self) -> Self {
        self.overall_ok = self.structure_ok
            && self.list_shape_ok
            && self.preference_tags_ok
            && self.grounding_ok
            && self.invoked_at_least_once;
        self
    }
}

/// Serialized trajectory: the trajectory plus its format flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    #[serde(flatten)]
    pub trajectory: Trajectory,
    pub format: FormatReport,
}

/// Strips a leading `N. ` list number.
pub fn strip_numbering(line: &str) -> &str {
    let t = line.trim();
    let digits = t.bytes().take_while(u8::is_ascii_digit).count();
    if digits > 0 {
        if let Some(rest) = t[digits..].strip_prefix('.') {
            if rest.starts_with(char::is_whitespace) {
                return rest.trim_start();
            }
        }
    }
    t
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Start,
    Think,
    AfterThink,
    Rec,
    Done,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Group {
    Idle,
    Pref,
    AwaitItems,
    Items,
    /// Item list with no preference before it; its lines are not retrieved items.
    OrphanItems,
}

fn blank(e: &ParseEvent) -> bool {
    e.payload.trim().is_empty()
}

/// Validates a complete episode response and extracts its turns and final
/// list. `raw_text` starts at the opening think tag.
///
/// Injected item lines resolve against the catalog; final-list lines must
/// match (by normalized title, optionally after stripping a list number) an
/// item retrieved in some turn.
pub fn parse_trajectory(raw_text: &str, catalog: &Catalog, k: usize) -> (Trajectory, FormatReport) {
    let events = parse_all(raw_text);
    let mut report = FormatReport::all_ok();
    let mut phase = Phase::Start;
    let mut group = Group::Idle;
    let mut rec_blocks = 0;

    let mut turns: Vec<Turn> = Vec::new();
    let mut thought = String::new();
    let mut preference = String::new();
    let mut retrieved: Vec<ItemId> = Vec::new();
    let mut rec_lines: Vec<String> = Vec::new();

    for e in &events {
        use EventKind::*;
        let in_think = phase == Phase::Think;
        match e.kind {
            ThinkOpen => {
                if phase == Phase::Start {
                    phase = Phase::Think;
                } else {
                    report.structure_ok = false;
                }
            }
            ThinkClose => {
                if phase == Phase::Think {
                    phase = Phase::AfterThink;
                } else {
                    report.structure_ok = false;
                }
                if group != Group::Idle {
                    report.preference_tags_ok = false;
                    group = Group::Idle;
                }
            }
            RecOpen => {
                rec_blocks += 1;
                if phase == Phase::AfterThink && rec_blocks == 1 {
                    phase = Phase::Rec;
                } else {
                    report.structure_ok = false;
                }
            }
            RecLine => {
                if phase != Phase::Rec {
                    report.structure_ok = false;
                }
                if !blank(e) {
                    rec_lines.push(e.line().trim().to_string());
                }
            }
            RecClose => {
                if phase == Phase::Rec {
                    phase = Phase::Done;
                } else {
                    report.structure_ok = false;
                }
            }
            PlainText => match phase {
                Phase::Think => match group {
                    Group::Idle => thought.push_str(&e.payload),
                    Group::AwaitItems if blank(e) => {}
                    _ => report.preference_tags_ok = false,
                },
                _ if blank(e) => {}
                _ => report.structure_ok = false,
            },
            PrefOpen => {
                if !in_think {
                    report.structure_ok = false;
                }
                if group != Group::Idle {
                    report.preference_tags_ok = false;
                }
                group = Group::Pref;
                preference.clear();
            }
            PrefText => {
                if group == Group::Pref {
                    preference.push_str(&e.payload);
                } else {
                    report.preference_tags_ok = false;
                }
            }
            PrefClose => {
                if !in_think {
                    report.structure_ok = false;
                }
                if group == Group::Pref {
                    if preference.trim().is_empty() {
                        report.preference_tags_ok = false;
                    }
                    turns.push(Turn {
                        thought: std::mem::take(&mut thought).trim().to_string(),
                        preference: preference.trim().to_string(),
                        retrieved: Vec::new(),
                    });
                    group = Group::AwaitItems;
                } else {
                    report.preference_tags_ok = false;
                    group = Group::Idle;
                }
            }
            ItemsOpen => {
                if !in_think {
                    report.structure_ok = false;
                }
                if group == Group::AwaitItems {
                    group = Group::Items;
                    retrieved.clear();
                } else {
                    report.preference_tags_ok = false;
                    group = Group::OrphanItems;
                }
            }
            ItemLine => match group {
                Group::Items => {
                    let line = strip_numbering(e.line());
                    if line.is_empty() {
                        continue;
                    }
                    match catalog.resolve_title(line) {
                        Some(id) => retrieved.push(id),
                        None => report.grounding_ok = false,
                    }
                }
                Group::OrphanItems => {}
                _ => report.preference_tags_ok = false,
            },
            ItemsClose => {
                if !in_think {
                    report.structure_ok = false;
                }
                match group {
                    Group::Items => {
                        if let Some(turn) = turns.last_mut() {
                            turn.retrieved = std::mem::take(&mut retrieved);
                        }
                    }
                    Group::OrphanItems => {}
                    _ => report.preference_tags_ok = false,
                }
                group = Group::Idle;
            }
        }
    }
    if phase != Phase::Done {
        report.structure_ok = false;
    }
    if group != Group::Idle {
        report.preference_tags_ok = false;
    }

    let m = turns.len();
    report.invoked_at_least_once = m >= 1;

    let mut pool: HashMap<String, ItemId> = HashMap::new();
    for t in &turns {
        for &id in &t.retrieved {
            pool.insert(normalize_title(catalog.title(id)), id);
        }
    }
    let mut final_items = Vec::new();
    let mut seen_titles = HashSet::new();
    let mut seen_ids = HashSet::new();
    let mut unresolved = false;
    let mut duplicate = false;
    for line in &rec_lines {
        let key = normalize_title(line);
        let id = pool
            .get(&key)
            .or_else(|| pool.get(&normalize_title(strip_numbering(line))))
            .copied();
        match id {
            Some(id) => {
                duplicate |= !seen_ids.insert(id);
                final_items.push(id);
            }
            None => {
                duplicate |= !seen_titles.insert(key);
                unresolved = true;
            }
        }
    }
    if unresolved || rec_lines.is_empty() {
        report.grounding_ok = false;
    }
    if rec_lines.len() != k || duplicate {
        report.list_shape_ok = false;
    }

    let trajectory = Trajectory {
        history: InteractionSequence::new(String::new(), Vec::new()),
        turns,
        closing_thought: thought.trim().to_string(),
        final_titles: rec_lines,
        final_items,
        raw_text: raw_text.to_string(),
        m,
    };
    (trajectory, report.seal())
}
