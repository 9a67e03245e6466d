//! Tagged interaction format between the policy and the retriever.
//!
//! A response opens with `<think>`. Inside the think block the policy may
//! emit any number of preference blocks; the environment answers each one
//! with an item-list block. The response ends with `</think>` followed by a
//! recommendation list holding one item title per line.

mod parser;
mod trajectory;

use unicode_normalization::UnicodeNormalization;

use crate::corpus::ItemRecord;

pub use parser::{coalesce, parse_all, EventKind, Feed, ParseEvent, Span, Stop, StreamParser};
pub use trajectory::{parse_trajectory, strip_numbering, FormatReport, Trajectory, TrajectoryRecord, Turn};

pub const THINK_OPEN: &str = "<think>";
pub const THINK_CLOSE: &str = "</think>";
pub const PREF_OPEN: &str = "<|begin_of_preference|>";
pub const PREF_CLOSE: &str = "<|end_of_preference|>";
pub const ITEMS_OPEN: &str = "<|begin_of_item_list|>";
pub const ITEMS_CLOSE: &str = "<|end_of_item_list|>";
pub const REC_OPEN: &str = "<recommendation_list>";
pub const REC_CLOSE: &str = "</recommendation_list>";

/// Markers at which a policy must stop generating.
pub const STOP_MARKERS: [&str; 2] = [PREF_CLOSE, REC_CLOSE];

/// The eight tag literals with the event each one produces.
pub const TAGS: [(&str, EventKind); 8] = [
    (THINK_OPEN, EventKind::ThinkOpen),
    (THINK_CLOSE, EventKind::ThinkClose),
    (PREF_OPEN, EventKind::PrefOpen),
    (PREF_CLOSE, EventKind::PrefClose),
    (ITEMS_OPEN, EventKind::ItemsOpen),
    (ITEMS_CLOSE, EventKind::ItemsClose),
    (REC_OPEN, EventKind::RecOpen),
    (REC_CLOSE, EventKind::RecClose),
];

const SYSTEM_PROMPT: &str = "\
You are an assistant that recommends items to users.
You cannot see the candidate items directly. To obtain candidates you must call a recommendation model.
The recommendation model takes a description of the user's preferences and returns a ranked list of relevant items.
The user gives you the items they interacted with before, ordered by interaction time.
Reason about this history, then describe the user's preferences as <|begin_of_preference|> ... <|end_of_preference|> to call the recommendation model.
Retrieved items are returned as <|begin_of_item_list|> ... <|end_of_item_list|>.
You may call the recommendation model several times. When you are done, output the final ranked list of item titles, one per line, containing the top-{K} results.
Put all reasoning and model calls inside <think> ... </think>, and put the final list inside <recommendation_list> ... </recommendation_list>.";

/// Renders the system prompt for a final list of `k` items.
pub fn render_system_prompt(k: usize) -> String {
    SYSTEM_PROMPT.replace("{K}", &k.to_string())
}

/// Renders the user turn: the interaction history, oldest first.
pub fn render_user_prompt<'a>(history_titles: impl IntoIterator<Item = &'a str>) -> String {
    let mut out = String::from("Interaction history (oldest first):\n");
    let mut any = false;
    for (i, t) in history_titles.into_iter().enumerate() {
        out.push_str(&format!("{}. {}\n", i + 1, t));
        any = true;
    }
    if !any {
        out.push_str("(none)\n");
    }
    out
}

/// Text that precedes the policy's first token. It ends with the opening
/// think tag, which is also the first byte of the episode's response text.
pub fn render_initial_context<'a>(history_titles: impl IntoIterator<Item = &'a str>) -> String {
    let mut out = render_user_prompt(history_titles);
    out.push('\n');
    out.push_str(THINK_OPEN);
    out
}

/// Wraps retrieved items as a numbered item-list block:
/// `<|begin_of_item_list|>\n1. A\n2. B\n<|end_of_item_list|>`.
pub fn inject_item_list<'a>(items: impl IntoIterator<Item = &'a ItemRecord>) -> String {
    let mut out = String::from(ITEMS_OPEN);
    out.push('\n');
    for (i, item) in items.into_iter().enumerate() {
        out.push_str(&format!("{}. {}\n", i + 1, item.title));
    }
    out.push_str(ITEMS_CLOSE);
    out
}

/// Canonical composition, trimmed, internal whitespace collapsed, lowercased.
pub fn normalize_title(s: &str) -> String {
    let composed: String = s.nfc().collect();
    let mut out = String::with_capacity(composed.len());
    for word in composed.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.extend(word.chars().flat_map(char::to_lowercase));
    }
    // lowercasing can emit decomposed sequences; recompose so the result is a fixpoint
    if out.is_ascii() {
        out
    } else {
        out.nfc().collect()
    }
}
