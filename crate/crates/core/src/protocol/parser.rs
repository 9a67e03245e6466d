use serde::{Deserialize, Serialize};

use super::TAGS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EventKind {
    ThinkOpen,
    ThinkClose,
    PrefOpen,
    PrefText,
    PrefClose,
    ItemsOpen,
    ItemLine,
    ItemsClose,
    RecOpen,
    RecLine,
    RecClose,
    PlainText,
}

impl EventKind {
    pub fn is_tag(self) -> bool {
        !matches!(
            self,
            EventKind::PrefText | EventKind::ItemLine | EventKind::RecLine | EventKind::PlainText
        )
    }

    /// Free-text kinds may be split differently depending on chunking.
    fn is_free_text(self) -> bool {
        matches!(self, EventKind::PlainText | EventKind::PrefText)
    }
}

/// Half-open byte range into the full stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

/// One piece of the stream. `payload` is the exact raw text covered by
/// `span`: the literal for tags, the text (with its line terminator for line
/// events) otherwise.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseEvent {
    pub kind: EventKind,
    pub payload: String,
    pub span: Span,
}

impl ParseEvent {
    /// Payload without a trailing line terminator.
    pub fn line(&self) -> &str {
        self.payload.trim_end_matches(['\n', '\r'])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stop {
    AtPrefClose,
    AtRecClose,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Feed {
    pub events: Vec<ParseEvent>,
    pub stop: Option<Stop>,
    /// Bytes of the chunk taken by the parser. Anything past a stop marker is
    /// left unconsumed and never enters parser state.
    pub consumed: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
enum Block {
    #[default]
    Free,
    Pref,
    Items,
    Rec,
}

impl Block {
    fn text_kind(self) -> EventKind {
        match self {
            Block::Free => EventKind::PlainText,
            Block::Pref => EventKind::PrefText,
            Block::Items => EventKind::ItemLine,
            Block::Rec => EventKind::RecLine,
        }
    }

    fn line_mode(self) -> bool {
        matches!(self, Block::Items | Block::Rec)
    }
}

/// Incremental, total tokenizer for the tag protocol.
///
/// Bytes that may still turn into a tag (or, inside item and recommendation
/// blocks, a line without its terminator yet) are held until a later chunk
/// or [`StreamParser::finish`] decides them. Free text is emitted as soon as
/// it is unambiguous, so free-text events are only chunking-invariant after
/// [`coalesce`].
#[derive(Debug, Clone, Default)]
pub struct StreamParser {
    pending: String,
    /// Absolute stream offset of `pending[0]`.
    base: usize,
    block: Block,
}

impl StreamParser {
    pub fn new() -> Self {
        Self::default()
    }

    /// Absolute offset of the first byte not yet emitted.
    pub fn position(&self) -> usize {
        self.base
    }

    pub fn feed(&mut self, chunk: &str) -> Feed {
        let held = self.pending.len();
        self.pending.push_str(chunk);
        let mut events = Vec::new();
        let mut stop = None;
        // text_start: first byte not yet emitted; scan: where to look for '<'
        let mut text_start = 0;
        let mut scan = 0;
        let mut end = self.pending.len();
        loop {
            let Some(rel) = self.pending[scan..].find('<') else {
                text_start = self.emit_text(text_start, self.pending.len(), false, &mut events);
                break;
            };
            let lt = scan + rel;
            let rest = &self.pending[lt..];
            if let Some(&(literal, kind)) = TAGS.iter().find(|(lit, _)| rest.starts_with(lit)) {
                self.emit_text(text_start, lt, true, &mut events);
                let tag_end = lt + literal.len();
                events.push(ParseEvent {
                    kind,
                    payload: literal.to_string(),
                    span: Span {
                        start: self.base + lt,
                        end: self.base + tag_end,
                    },
                });
                self.block = match kind {
                    EventKind::PrefOpen => Block::Pref,
                    EventKind::ItemsOpen => Block::Items,
                    EventKind::RecOpen => Block::Rec,
                    _ => Block::Free,
                };
                text_start = tag_end;
                scan = tag_end;
                stop = match kind {
                    EventKind::PrefClose => Some(Stop::AtPrefClose),
                    EventKind::RecClose => Some(Stop::AtRecClose),
                    _ => None,
                };
                if stop.is_some() {
                    end = tag_end;
                    break;
                }
            } else if TAGS.iter().any(|(lit, _)| lit.starts_with(rest)) {
                // possible tag prefix at the end of input: hold it
                text_start = self.emit_text(text_start, lt, false, &mut events);
                break;
            } else {
                scan = lt + 1;
            }
        }
        let consumed = end - held;
        self.pending.truncate(end);
        self.pending.drain(..text_start);
        self.base += text_start;
        Feed {
            events,
            stop,
            consumed,
        }
    }

    /// Flushes held bytes as text. The parser stays usable afterwards.
    pub fn finish(&mut self) -> Vec<ParseEvent> {
        let mut events = Vec::new();
        let end = self.pending.len();
        self.emit_text(0, end, true, &mut events);
        self.pending.clear();
        self.base += end;
        events
    }

    /// Emits `pending[from..to]` as text events and returns the first index
    /// not emitted. In line mode an unterminated tail is held unless
    /// `boundary` says nothing more can join it.
    fn emit_text(&self, from: usize, to: usize, boundary: bool, out: &mut Vec<ParseEvent>) -> usize {
        if from >= to {
            return from;
        }
        let kind = self.block.text_kind();
        let mut push = |s: usize, e: usize| {
            out.push(ParseEvent {
                kind,
                payload: self.pending[s..e].to_string(),
                span: Span {
                    start: self.base + s,
                    end: self.base + e,
                },
            })
        };
        if !self.block.line_mode() {
            push(from, to);
            return to;
        }
        let mut start = from;
        while let Some(nl) = self.pending[start..to].find('\n') {
            let line_end = start + nl + 1;
            push(start, line_end);
            start = line_end;
        }
        if start < to && boundary {
            push(start, to);
            return to;
        }
        start
    }
}

/// Merges adjacent free-text events of the same kind with touching spans.
pub fn coalesce(events: impl IntoIterator<Item = ParseEvent>) -> Vec<ParseEvent> {
    let mut out: Vec<ParseEvent> = Vec::new();
    for e in events {
        if let Some(last) = out.last_mut() {
            if last.kind == e.kind && e.kind.is_free_text() && last.span.end == e.span.start {
                last.payload.push_str(&e.payload);
                last.span.end = e.span.end;
                continue;
            }
        }
        out.push(e);
    }
    out
}

/// Tokenizes a complete text, continuing past stop markers.
pub fn parse_all(text: &str) -> Vec<ParseEvent> {
    let mut parser = StreamParser::new();
    let mut events = Vec::new();
    let mut rest = text;
    loop {
        let feed = parser.feed(rest);
        events.extend(feed.events);
        rest = &rest[feed.consumed..];
        if feed.stop.is_none() || rest.is_empty() {
            break;
        }
    }
    events.extend(parser.finish());
    coalesce(events)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::*;

    fn kinds(events: &[ParseEvent]) -> Vec<EventKind> {
        events.iter().map(|e| e.kind).collect()
    }

    #[test]
    fn split_tag_reassembly() {
        let mut p = StreamParser::new();
        let a = p.feed("<|begin_of_pre");
        assert!(a.events.is_empty());
        assert_eq!(a.stop, None);
        let b = p.feed("ference|>gritty sci-fi<|end_of_preference|>");
        assert_eq!(
            kinds(&b.events),
            vec![EventKind::PrefOpen, EventKind::PrefText, EventKind::PrefClose]
        );
        assert_eq!(b.events[1].payload, "gritty sci-fi");
        assert_eq!(b.stop, Some(Stop::AtPrefClose));
        assert_eq!(b.events[0].span, Span { start: 0, end: PREF_OPEN.len() });
    }

    #[test]
    fn untagged_text_passes_through() {
        let mut p = StreamParser::new();
        let f = p.feed("just some words");
        assert_eq!(kinds(&f.events), vec![EventKind::PlainText]);
        assert_eq!(f.events[0].payload, "just some words");
        assert_eq!(f.stop, None);
        assert_eq!(f.consumed, 15);
    }

    #[test]
    fn stops_and_leaves_excess_unconsumed() {
        let mut p = StreamParser::new();
        let chunk = "<think>x<|begin_of_preference|>p<|end_of_preference|>tail";
        let f = p.feed(chunk);
        assert_eq!(f.stop, Some(Stop::AtPrefClose));
        assert_eq!(&chunk[f.consumed..], "tail");
        assert_eq!(p.position(), f.consumed);
        assert!(p.finish().is_empty());
    }

    #[test]
    fn lone_angle_bracket_is_text() {
        let events = parse_all("a < b <thinking> c <");
        assert_eq!(kinds(&events), vec![EventKind::PlainText]);
        assert_eq!(events[0].payload, "a < b <thinking> c <");
    }

    #[test]
    fn rec_lines_carry_terminators() {
        let events = parse_all("<recommendation_list>\nA\nB</recommendation_list>");
        let lines: Vec<_> = events
            .iter()
            .filter(|e| e.kind == EventKind::RecLine)
            .map(|e| e.payload.as_str())
            .collect();
        assert_eq!(lines, vec!["\n", "A\n", "B"]);
    }

    #[test]
    fn byte_chunks_match_single_feed() {
        let text = "<think>hm\n<|begin_of_preference|>dark sci-fi<|end_of_preference|>\
<|begin_of_item_list|>\n1. Alien\n2. Solaris\n<|end_of_item_list|>\nok</think>\n\
<recommendation_list>\nAlien\nSolaris\n</recommendation_list>";
        let whole = parse_all(text);
        let mut p = StreamParser::new();
        let mut events = Vec::new();
        let mut i = 0;
        while i < text.len() {
            let f = p.feed(&text[i..i + 1]);
            assert_eq!(f.consumed, 1);
            events.extend(f.events);
            i += 1;
        }
        events.extend(p.finish());
        assert_eq!(coalesce(events), whole);
        let rebuilt: String = whole.iter().map(|e| e.payload.as_str()).collect();
        assert_eq!(rebuilt, text);
    }
}
