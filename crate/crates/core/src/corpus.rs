//! Item catalog, interaction ingestion, leave-one-out splitting and
//! difficulty-based sample selection.

use std::collections::hash_map::Entry;
use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::protocol::normalize_title;
use crate::retrieval::{RetrievalError, Retriever};

/// Dense 0-based item index; row `i` of every embedding matrix belongs to `ItemId(i)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ItemId(pub u32);

impl ItemId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for ItemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("duplicate title {title:?}: items {first} and {second}")]
    DuplicateTitle {
        title: String,
        first: ItemId,
        second: ItemId,
    },
    #[error("duplicate external id {external_id:?}: items {first} and {second}")]
    DuplicateExternalId {
        external_id: String,
        first: ItemId,
        second: ItemId,
    },
    #[error("catalog is empty")]
    EmptyCatalog,
    #[error("item {0} is not in the catalog")]
    UnknownItem(ItemId),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub item_id: ItemId,
    pub external_id: String,
    pub title: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aux_text: Option<String>,
}

/// On-disk shape of an items-file line. `item_id`, when present, must equal
/// the line's position among records.
#[derive(Debug, Deserialize)]
struct ItemLine {
    #[serde(default)]
    item_id: Option<u32>,
    external_id: String,
    title: String,
    #[serde(default)]
    aux_text: Option<String>,
}

#[derive(Debug, Clone)]
pub struct Catalog {
    items: Vec<ItemRecord>,
    by_title: HashMap<String, ItemId>,
    by_external: HashMap<String, ItemId>,
}

impl Catalog {
    /// Builds a catalog from `(external_id, title, aux_text)` triples; ids follow input order.
    pub fn from_entries<I>(entries: I) -> Result<Self, CorpusError>
    where
        I: IntoIterator<Item = (String, String, Option<String>)>,
    {
        let mut catalog = Catalog {
            items: Vec::new(),
            by_title: HashMap::new(),
            by_external: HashMap::new(),
        };
        for (i, (external_id, title, aux_text)) in entries.into_iter().enumerate() {
            catalog.push(i + 1, external_id, title, aux_text)?;
        }
        if catalog.items.is_empty() {
            return Err(CorpusError::EmptyCatalog);
        }
        Ok(catalog)
    }

    fn push(
        &mut self,
        line: usize,
        external_id: String,
        title: String,
        aux_text: Option<String>,
    ) -> Result<(), CorpusError> {
        let id = ItemId(self.items.len() as u32);
        let key = normalize_title(&title);
        if key.is_empty() {
            return Err(CorpusError::Malformed {
                line,
                message: "empty title".into(),
            });
        }
        match self.by_title.entry(key) {
            Entry::Occupied(e) => {
                return Err(CorpusError::DuplicateTitle {
                    title,
                    first: *e.get(),
                    second: id,
                })
            }
            Entry::Vacant(e) => {
                e.insert(id);
            }
        }
        match self.by_external.entry(external_id.clone()) {
            Entry::Occupied(e) => {
                return Err(CorpusError::DuplicateExternalId {
                    external_id,
                    first: *e.get(),
                    second: id,
                })
            }
            Entry::Vacant(e) => {
                e.insert(id);
            }
        }
        self.items.push(ItemRecord {
            item_id: id,
            external_id,
            title,
            aux_text,
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, id: ItemId) -> Option<&ItemRecord> {
        self.items.get(id.index())
    }

    pub fn contains(&self, id: ItemId) -> bool {
        id.index() < self.items.len()
    }

    pub fn title(&self, id: ItemId) -> &str {
        &self.items[id.index()].title
    }

    pub fn items(&self) -> &[ItemRecord] {
        &self.items
    }

    /// Looks up an item by normalized title.
    pub fn resolve_title(&self, title: &str) -> Option<ItemId> {
        self.by_title.get(&normalize_title(title)).copied()
    }

    pub fn resolve_external(&self, external_id: &str) -> Option<ItemId> {
        self.by_external.get(external_id).copied()
    }
}

/// Loads a line-delimited items file (`{"external_id", "title", "aux_text"?}` per line).
pub fn load_catalog(path: &Path) -> Result<Catalog, CorpusError> {
    let text = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_catalog(&text)
}

pub fn parse_catalog(text: &str) -> Result<Catalog, CorpusError> {
    let mut catalog = Catalog {
        items: Vec::new(),
        by_title: HashMap::new(),
        by_external: HashMap::new(),
    };
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: ItemLine = serde_json::from_str(line).map_err(|e| CorpusError::Malformed {
            line: i + 1,
            message: e.to_string(),
        })?;
        if let Some(declared) = rec.item_id {
            if declared as usize != catalog.items.len() {
                return Err(CorpusError::Malformed {
                    line: i + 1,
                    message: format!(
                        "item_id {declared} out of sequence (expected {})",
                        catalog.items.len()
                    ),
                });
            }
        }
        catalog.push(i + 1, rec.external_id, rec.title, rec.aux_text)?;
    }
    if catalog.items.is_empty() {
        return Err(CorpusError::EmptyCatalog);
    }
    Ok(catalog)
}

/// One raw (user, item, rating, timestamp) row of an interactions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawInteraction {
    pub user: String,
    pub item: String,
    pub rating: f64,
    pub timestamp: i64,
}

/// Reads a delimited interactions file with a header row; columns are taken
/// positionally as user, external item id, rating, timestamp.
pub fn read_interactions(path: &Path) -> Result<Vec<RawInteraction>, CorpusError> {
    let file = std::fs::File::open(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let mut out = Vec::new();
    for (i, row) in reader.records().enumerate() {
        // +2: one for the header, one for 1-based numbering
        let line = i + 2;
        let row = row.map_err(|e| CorpusError::Malformed {
            line,
            message: e.to_string(),
        })?;
        if row.len() < 4 {
            return Err(CorpusError::Malformed {
                line,
                message: format!("expected 4 columns, found {}", row.len()),
            });
        }
        let bad = |what: &str| CorpusError::Malformed {
            line,
            message: format!("invalid {what}"),
        };
        out.push(RawInteraction {
            user: row[0].to_string(),
            item: row[1].to_string(),
            rating: row[2].parse().map_err(|_| bad("rating"))?,
            timestamp: row[3].parse().map_err(|_| bad("timestamp"))?,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionSequence {
    pub user_id: String,
    pub items: Vec<ItemId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamps: Option<Vec<i64>>,
}

impl InteractionSequence {
    pub fn new(user_id: impl Into<String>, items: Vec<ItemId>) -> Self {
        InteractionSequence {
            user_id: user_id.into(),
            items,
            timestamps: None,
        }
    }

    fn prefix(&self, len: usize) -> Self {
        InteractionSequence {
            user_id: self.user_id.clone(),
            items: self.items[..len].to_vec(),
            timestamps: self.timestamps.as_ref().map(|t| t[..len].to_vec()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestConfig {
    pub min_count: usize,
    pub min_rating: f64,
    pub max_len: usize,
}

impl Default for IngestConfig {
    fn default() -> Self {
        IngestConfig {
            min_count: 5,
            min_rating: 3.0,
            max_len: 20,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub raw_records: usize,
    pub unknown_item: usize,
    pub below_rating: usize,
    pub kcore_removed: usize,
    pub kcore_rounds: usize,
    pub truncated: usize,
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
}

/// Filters positive interactions, applies iterated k-core filtering and
/// emits one chronologically ordered, length-capped sequence per user.
///
/// Users appear in order of first occurrence in `raw`. Equal timestamps keep
/// input order.
pub fn ingest_interactions(
    raw: &[RawInteraction],
    catalog: &Catalog,
    config: &IngestConfig,
) -> (Vec<InteractionSequence>, IngestReport) {
    let mut report = IngestReport {
        raw_records: raw.len(),
        ..Default::default()
    };

    struct Row<'a> {
        user: &'a str,
        item: ItemId,
        timestamp: i64,
    }

    let mut rows: Vec<Row> = Vec::with_capacity(raw.len());
    for r in raw {
        let Some(item) = catalog.resolve_external(&r.item) else {
            report.unknown_item += 1;
            continue;
        };
        if r.rating.is_nan() || r.rating <= config.min_rating {
            report.below_rating += 1;
            continue;
        }
        rows.push(Row {
            user: &r.user,
            item,
            timestamp: r.timestamp,
        });
    }

    loop {
        let mut user_count: HashMap<&str, usize> = HashMap::new();
        let mut item_count: HashMap<ItemId, usize> = HashMap::new();
        for r in &rows {
            *user_count.entry(r.user).or_default() += 1;
            *item_count.entry(r.item).or_default() += 1;
        }
        let before = rows.len();
        rows.retain(|r| user_count[r.user] >= config.min_count && item_count[&r.item] >= config.min_count);
        report.kcore_rounds += 1;
        if rows.len() == before {
            break;
        }
        report.kcore_removed += before - rows.len();
    }

    let mut order: Vec<&str> = Vec::new();
    let mut grouped: HashMap<&str, Vec<(i64, ItemId)>> = HashMap::new();
    for r in &rows {
        grouped
            .entry(r.user)
            .or_insert_with(|| {
                order.push(r.user);
                Vec::new()
            })
            .push((r.timestamp, r.item));
    }

    let mut items_seen = std::collections::HashSet::new();
    let mut sequences = Vec::with_capacity(order.len());
    for user in order {
        let mut events = grouped.remove(user).unwrap_or_default();
        // stable sort keeps raw input order for equal timestamps
        events.sort_by_key(|&(t, _)| t);
        if events.len() > config.max_len {
            report.truncated += events.len() - config.max_len;
            events.drain(..events.len() - config.max_len);
        }
        items_seen.extend(events.iter().map(|&(_, i)| i));
        report.interactions += events.len();
        sequences.push(InteractionSequence {
            user_id: user.to_string(),
            items: events.iter().map(|&(_, i)| i).collect(),
            timestamps: Some(events.iter().map(|&(t, _)| t).collect()),
        });
    }
    report.users = sequences.len();
    report.items = items_seen.len();
    (sequences, report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSample {
    pub history: InteractionSequence,
    pub label: ItemId,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub difficulty_rank: Option<usize>,
}

/// Leave-one-out split. For a sequence `s` of length `n`:
/// test is `(s[..n-1], s[n-1])`, valid is `(s[..n-2], s[n-2])`, and train
/// holds every prefix pair `(s[..j], s[j])` for `1 <= j < n-1`.
///
/// Length 2 yields only the valid sample; length 1 yields nothing.
/// Per user, samples are emitted as train prefixes, then valid, then test.
pub fn split_leave_one_out(sequences: &[InteractionSequence]) -> Vec<SplitSample> {
    let mut out = Vec::new();
    for seq in sequences {
        let n = seq.items.len();
        if n < 2 {
            continue;
        }
        for j in 1..n - 1 {
            out.push(SplitSample {
                history: seq.prefix(j),
                label: seq.items[j],
                split: Split::Train,
                difficulty_rank: None,
            });
        }
        if n == 2 {
            out.push(SplitSample {
                history: seq.prefix(1),
                label: seq.items[1],
                split: Split::Valid,
                difficulty_rank: None,
            });
            continue;
        }
        out.push(SplitSample {
            history: seq.prefix(n - 2),
            label: seq.items[n - 2],
            split: Split::Valid,
            difficulty_rank: None,
        });
        out.push(SplitSample {
            history: seq.prefix(n - 1),
            label: seq.items[n - 1],
            split: Split::Test,
            difficulty_rank: None,
        });
    }
    out
}

fn difficulty_ranks<'a>(
    samples: impl IndexedParallelIterator<Item = &'a SplitSample>,
    retriever: &Retriever,
) -> Result<Vec<usize>, CorpusError> {
    samples
        .map(|s| {
            if !retriever.index().catalog().contains(s.label) {
                return Err(CorpusError::UnknownItem(s.label));
            }
            Ok(retriever.history_rank(&s.history, s.label)?)
        })
        .collect()
}

/// Keeps samples whose label the history-only retriever ranks within
/// `max_rank` over the full item space, recording that rank.
pub fn select_by_difficulty(
    samples: &[SplitSample],
    retriever: &Retriever,
    max_rank: usize,
) -> Result<Vec<SplitSample>, CorpusError> {
    let ranks = difficulty_ranks(samples.par_iter(), retriever)?;
    Ok(samples
        .iter()
        .zip(ranks)
        .filter(|&(_, r)| r <= max_rank)
        .map(|(s, r)| SplitSample {
            difficulty_rank: Some(r),
            ..s.clone()
        })
        .collect())
}

/// Applies [`select_by_difficulty`] to train samples only; valid and test
/// samples pass through untouched so evaluation stays unbiased.
pub fn select_train_by_difficulty(
    samples: &[SplitSample],
    retriever: &Retriever,
    max_rank: usize,
) -> Result<Vec<SplitSample>, CorpusError> {
    let train: Vec<&SplitSample> = samples.iter().filter(|s| s.split == Split::Train).collect();
    let mut ranks = difficulty_ranks(train.into_par_iter(), retriever)?.into_iter();
    let mut out = Vec::new();
    for s in samples {
        if s.split != Split::Train {
            out.push(s.clone());
            continue;
        }
        let r = ranks.next().expect("one rank per train sample");
        if r <= max_rank {
            out.push(SplitSample {
                difficulty_rank: Some(r),
                ..s.clone()
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(v: &[u32]) -> Vec<ItemId> {
        v.iter().copied().map(ItemId).collect()
    }

    fn catalog_of(n: usize) -> Catalog {
        Catalog::from_entries((0..n).map(|i| (format!("x{i}"), format!("Item {i}"), None))).unwrap()
    }

    #[test]
    fn loads_three_records() {
        let text = r#"{"external_id":"a","title":"Halo"}
{"external_id":"b","title":"Doom","aux_text":"shooter"}

{"external_id":"c","title":"Myst"}
"#;
        let cat = parse_catalog(text).unwrap();
        assert_eq!(cat.len(), 3);
        let got: Vec<u32> = cat.items().iter().map(|r| r.item_id.0).collect();
        assert_eq!(got, vec![0, 1, 2]);
        assert_eq!(cat.resolve_title("  DOOM "), Some(ItemId(1)));
        assert_eq!(cat.get(ItemId(1)).unwrap().aux_text.as_deref(), Some("shooter"));
    }

    #[test]
    fn duplicate_normalized_title_rejected() {
        let text = "{\"external_id\":\"a\",\"title\":\"Halo\"}\n{\"external_id\":\"b\",\"title\":\"halo \"}\n";
        match parse_catalog(text).unwrap_err() {
            CorpusError::DuplicateTitle { first, second, .. } => {
                assert_eq!((first, second), (ItemId(0), ItemId(1)));
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn empty_and_malformed_files() {
        assert!(matches!(parse_catalog("\n\n"), Err(CorpusError::EmptyCatalog)));
        let err = parse_catalog("{\"external_id\":\"a\",\"title\":\"A\"}\nnot json\n").unwrap_err();
        assert!(matches!(err, CorpusError::Malformed { line: 2, .. }));
    }

    fn raw(user: &str, item: usize, rating: f64, t: i64) -> RawInteraction {
        RawInteraction {
            user: user.into(),
            item: format!("x{item}"),
            rating,
            timestamp: t,
        }
    }

    #[test]
    fn keeps_only_ratings_above_threshold() {
        let cat = catalog_of(3);
        let recs = vec![raw("u", 0, 5.0, 1), raw("u", 1, 4.0, 2), raw("u", 2, 2.0, 3)];
        let cfg = IngestConfig {
            min_count: 1,
            ..Default::default()
        };
        let (seqs, report) = ingest_interactions(&recs, &cat, &cfg);
        assert_eq!(seqs[0].items, ids(&[0, 1]));
        assert_eq!(report.below_rating, 1);
    }

    #[test]
    fn rating_exactly_three_dropped() {
        let cat = catalog_of(1);
        let cfg = IngestConfig {
            min_count: 1,
            ..Default::default()
        };
        let (seqs, _) = ingest_interactions(&[raw("u", 0, 3.0, 1)], &cat, &cfg);
        assert!(seqs.is_empty());
    }

    #[test]
    fn low_activity_user_removed() {
        let cat = catalog_of(5);
        let mut recs = Vec::new();
        // user a: 5 positives on items 0..5; user b: 4 positives
        for i in 0..5 {
            recs.push(raw("a", i, 5.0, i as i64));
        }
        for i in 0..4 {
            recs.push(raw("b", i, 5.0, i as i64));
        }
        // give items enough support through extra users
        for u in ["c", "d", "e", "f"] {
            for i in 0..5 {
                recs.push(raw(u, i, 4.5, i as i64));
            }
        }
        let (seqs, _) = ingest_interactions(&recs, &cat, &IngestConfig::default());
        assert!(seqs.iter().all(|s| s.user_id != "b"));
        assert_eq!(seqs.len(), 5);
    }

    #[test]
    fn kcore_iterates_to_fixpoint() {
        // item 5 is supported only by z; dropping it leaves z with 4 interactions,
        // which only a second round removes.
        let cat = catalog_of(6);
        let mut recs = Vec::new();
        for u in ["a", "b", "c", "d", "e"] {
            for i in 0..5 {
                recs.push(raw(u, i, 5.0, i as i64));
            }
        }
        for i in [0, 1, 2, 3, 5] {
            recs.push(raw("z", i, 5.0, i as i64));
        }
        let (seqs, report) = ingest_interactions(&recs, &cat, &IngestConfig::default());
        let users: Vec<_> = seqs.iter().map(|s| s.user_id.as_str()).collect();
        assert_eq!(users, vec!["a", "b", "c", "d", "e"]);
        assert_eq!(report.kcore_rounds, 3);
        assert_eq!(report.kcore_removed, 5);
        // recount on the surviving interactions
        let mut item_count = HashMap::new();
        for s in &seqs {
            assert!(s.items.len() >= 5);
            for i in &s.items {
                *item_count.entry(*i).or_insert(0) += 1;
            }
        }
        assert!(item_count.values().all(|&c| c >= 5));
    }

    #[test]
    fn truncates_to_most_recent() {
        let cat = catalog_of(25);
        let recs: Vec<_> = (0..25).rev().map(|i| raw("u", i, 5.0, i as i64)).collect();
        let cfg = IngestConfig {
            min_count: 1,
            ..Default::default()
        };
        let (seqs, report) = ingest_interactions(&recs, &cat, &cfg);
        assert_eq!(seqs[0].items, (5..25).map(ItemId).collect::<Vec<_>>());
        assert_eq!(report.truncated, 5);
        let ts = seqs[0].timestamps.as_ref().unwrap();
        assert!(ts.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn timestamp_ties_keep_input_order() {
        let cat = catalog_of(3);
        let recs = vec![raw("u", 2, 5.0, 7), raw("u", 0, 5.0, 7), raw("u", 1, 5.0, 1)];
        let cfg = IngestConfig {
            min_count: 1,
            ..Default::default()
        };
        let (seqs, _) = ingest_interactions(&recs, &cat, &cfg);
        assert_eq!(seqs[0].items, ids(&[1, 2, 0]));
    }

    #[test]
    fn unknown_items_counted_not_fatal() {
        let cat = catalog_of(1);
        let mut recs = vec![raw("u", 0, 5.0, 1)];
        recs.push(RawInteraction {
            user: "u".into(),
            item: "nope".into(),
            rating: 5.0,
            timestamp: 2,
        });
        let cfg = IngestConfig {
            min_count: 1,
            ..Default::default()
        };
        let (seqs, report) = ingest_interactions(&recs, &cat, &cfg);
        assert_eq!(report.unknown_item, 1);
        assert_eq!(seqs[0].items, ids(&[0]));
    }

    #[test]
    fn leave_one_out_four_items() {
        let seq = InteractionSequence::new("u", ids(&[0, 1, 2, 3]));
        let out = split_leave_one_out(&[seq]);
        let test: Vec<_> = out.iter().filter(|s| s.split == Split::Test).collect();
        let valid: Vec<_> = out.iter().filter(|s| s.split == Split::Valid).collect();
        let train: Vec<_> = out.iter().filter(|s| s.split == Split::Train).collect();
        assert_eq!(test.len(), 1);
        assert_eq!(test[0].history.items, ids(&[0, 1, 2]));
        assert_eq!(test[0].label, ItemId(3));
        assert_eq!(valid[0].history.items, ids(&[0, 1]));
        assert_eq!(valid[0].label, ItemId(2));
        let pairs: Vec<_> = train.iter().map(|s| (s.history.items.clone(), s.label)).collect();
        assert_eq!(
            pairs,
            vec![(ids(&[0]), ItemId(1)), (ids(&[0, 1]), ItemId(2))]
        );
    }

    #[test]
    fn leave_one_out_short_sequences() {
        let out = split_leave_one_out(&[InteractionSequence::new("u", ids(&[4, 5]))]);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].split, Split::Valid);
        assert_eq!((out[0].history.items.clone(), out[0].label), (ids(&[4]), ItemId(5)));
        assert!(split_leave_one_out(&[InteractionSequence::new("u", ids(&[4]))]).is_empty());
    }

    #[test]
    fn split_sample_record_shape() {
        let s = SplitSample {
            history: InteractionSequence::new("u1", ids(&[0, 1])),
            label: ItemId(2),
            split: Split::Test,
            difficulty_rank: Some(4),
        };
        let json = serde_json::to_string(&s).unwrap();
        assert_eq!(
            json,
            r#"{"history":{"user_id":"u1","items":[0,1]},"label":2,"split":"test","difficulty_rank":4}"#
        );
    }
}
