//! Generators and straight-line reference implementations shared by the
//! integration tests and the acceptance suite.
#![allow(dead_code)]

use std::cmp::Ordering;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;

use recloop_core::corpus::{Catalog, ItemId, SplitSample};
use recloop_core::protocol::{
    coalesce, inject_item_list, ParseEvent, StreamParser, ITEMS_CLOSE, ITEMS_OPEN, PREF_CLOSE, PREF_OPEN, REC_CLOSE, REC_OPEN, THINK_CLOSE, THINK_OPEN,
};
use recloop_core::retrieval::{
    EmbeddingKind, EmbeddingMatrix, HashedEmbedder, HistoryEncoder, IndexConfig, RetrievalIndex, Retriever,
};
use recloop_core::rewards::RewardConfig;
use recloop_core::rollout::RolloutConfig;
use recloop_core::Environment;

pub const TAG_LIST: [&str; 8] = [
    THINK_OPEN,
    THINK_CLOSE,
    PREF_OPEN,
    PREF_CLOSE,
    ITEMS_OPEN,
    ITEMS_CLOSE,
    REC_OPEN,
    REC_CLOSE,
];

const WORDS: &[&str] = &[
    "quiet", "bold", "retro", "noir", "sunny", "slow", "sharp", "odd", "warm", "cold", "loud", "tiny", "grand",
    "dusty", "neon", "rural", "urban", "brisk", "gentle", "wild",
];

pub fn words<R: Rng>(rng: &mut R, lo: usize, hi: usize) -> String {
    let n = rng.gen_range(lo..=hi);
    (0..n).map(|_| *WORDS.choose(rng).unwrap()).collect::<Vec<_>>().join(" ")
}

pub fn gaussian_rows<R: Rng>(rng: &mut R, n: usize, dim: usize) -> Vec<Vec<f32>> {
    (0..n)
        .map(|_| {
            (0..dim)
                .map(|_| {
                    // Box-Muller
                    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
                    let u2: f64 = rng.gen();
                    ((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()) as f32
                })
                .collect()
        })
        .collect()
}

pub fn titled_catalog(n: usize) -> Catalog {
    Catalog::from_entries((0..n).map(|i| (format!("ext-{i}"), format!("Title {i:05}"), None))).unwrap()
}

/// Random index with a hashed text embedder; `dup_every` > 0 copies every
/// such row from its predecessor to create exact score ties.
pub struct Fixture {
    pub collab: Vec<Vec<f32>>,
    pub text: Vec<Vec<f32>>,
    pub env: Environment,
}

pub fn random_fixture<R: Rng>(rng: &mut R, n: usize, dim: usize, dup_every: usize, k_final: usize) -> Fixture {
    let mut collab = gaussian_rows(rng, n, dim);
    let mut text = gaussian_rows(rng, n, dim);
    if dup_every > 0 {
        for i in (dup_every..n).step_by(dup_every) {
            collab[i] = collab[i - 1].clone();
            text[i] = text[i - 1].clone();
        }
    }
    let index = RetrievalIndex::new(
        Arc::new(titled_catalog(n)),
        EmbeddingMatrix::from_rows(EmbeddingKind::Collaborative, &collab).unwrap(),
        EmbeddingMatrix::from_rows(EmbeddingKind::Textual, &text).unwrap(),
        IndexConfig::default(),
    )
    .unwrap();
    let retriever = Retriever::new(
        Arc::new(index),
        Arc::new(HashedEmbedder::new(dim)),
        HistoryEncoder::DecayedMean,
        true,
    )
    .unwrap();
    let rollout = RolloutConfig {
        k_final,
        ..RolloutConfig::default()
    };
    Fixture {
        collab,
        text,
        env: Environment::new(retriever, RewardConfig::default(), rollout).unwrap(),
    }
}

/// Ground truth for a generated episode, known without parsing it.
#[derive(Debug, Clone)]
pub struct GenEpisode {
    pub text: String,
    pub preferences: Vec<String>,
    pub retrieved: Vec<Vec<ItemId>>,
    /// Final lines that resolve against the retrieved pool, in order.
    pub final_items: Vec<ItemId>,
    pub format_ok: bool,
}

/// A random episode in the environment's own rendering. With probability
/// `p_valid` it is well-formed; otherwise one content fault is injected: no
/// invocation, wrong list length, a duplicate line, or an ungrounded line.
/// Needs `k >= 2` and a catalog larger than `4 * (k + 10)`.
pub fn gen_episode<R: Rng>(rng: &mut R, catalog: &Catalog, k: usize, label: ItemId, p_valid: f64) -> GenEpisode {
    let n = catalog.len();
    let valid = rng.gen_bool(p_valid);
    let fault = if valid { 0 } else { rng.gen_range(1..=4) };
    let m = if fault == 1 { 0 } else { rng.gen_range(1..=4) };
    let mut text = String::from(THINK_OPEN);
    let mut preferences = Vec::new();
    let mut retrieved = Vec::new();
    let mut pool: Vec<ItemId> = Vec::new();
    for _ in 0..m {
        text.push_str(&format!("\n{}\n", words(rng, 0, 6)));
        let pref = words(rng, 1, 5);
        text.push_str(&format!("{PREF_OPEN}{pref}{PREF_CLOSE}"));
        let len = rng.gen_range(k + 2..=(k + 10));
        let mut ids: Vec<ItemId> = Vec::new();
        // bias towards the label so hits occur
        if rng.gen_bool(0.5) {
            ids.push(label);
        }
        while ids.len() < len {
            let id = ItemId(rng.gen_range(0..n as u32));
            if !ids.contains(&id) {
                ids.push(id);
            }
        }
        ids.shuffle(rng);
        text.push_str(&inject_item_list(ids.iter().map(|&i| catalog.get(i).unwrap())));
        for &id in &ids {
            if !pool.contains(&id) {
                pool.push(id);
            }
        }
        preferences.push(pref);
        retrieved.push(ids);
    }
    text.push_str(&format!("\n{}\n{THINK_CLOSE}\n{REC_OPEN}\n", words(rng, 1, 6)));
    let mut lines: Vec<String> = Vec::new();
    if m > 0 {
        let mut shuffled = pool.clone();
        shuffled.shuffle(rng);
        let want = match fault {
            2 => *[k - 1, k + 1, k + 2].choose(rng).unwrap(),
            _ => k,
        };
        let chosen: Vec<ItemId> = shuffled.into_iter().take(want).collect();
        lines = chosen.iter().map(|&i| catalog.title(i).to_string()).collect();
        match fault {
            3 => {
                let dup = lines[rng.gen_range(0..k - 1)].clone();
                lines[k - 1] = dup;
            }
            4 => {
                let stray = (0..n as u32).map(ItemId).find(|i| !pool.contains(i)).expect("catalog larger than pool");
                let at = rng.gen_range(0..k);
                lines[at] = catalog.title(stray).to_string();
            }
            _ => {}
        }
    } else {
        // no invocation: list of arbitrary catalog titles
        for _ in 0..k {
            lines.push(catalog.title(ItemId(rng.gen_range(0..n as u32))).to_string());
        }
    }
    for l in &lines {
        text.push_str(l);
        text.push('\n');
    }
    text.push_str(REC_CLOSE);
    let format_ok = fault == 0;
    GenEpisode {
        text,
        preferences,
        retrieved,
        final_items: if m == 0 { Vec::new() } else { resolved_lines(&lines, &pool, catalog) },
        format_ok,
    }
}

fn resolved_lines(lines: &[String], pool: &[ItemId], catalog: &Catalog) -> Vec<ItemId> {
    lines
        .iter()
        .filter_map(|l| pool.iter().copied().find(|&i| catalog.title(i) == l))
        .collect()
}

/// Tag occurrences in `text` as (byte offset, tag).
pub fn tag_positions(text: &str) -> Vec<(usize, &'static str)> {
    let mut out = Vec::new();
    for tag in TAG_LIST {
        let mut from = 0;
        while let Some(p) = text[from..].find(tag) {
            out.push((from + p, tag));
            from += p + tag.len();
        }
    }
    // `</think>` also contains no other tag; `<think>` is not a substring of `</think>`
    out.sort();
    out
}

/// Deletes, duplicates, or replaces one tag occurrence.
pub fn mutate_one_tag<R: Rng>(rng: &mut R, text: &str) -> String {
    let tags = tag_positions(text);
    let (pos, tag) = tags[rng.gen_range(0..tags.len())];
    let (head, tail) = (&text[..pos], &text[pos + tag.len()..]);
    match rng.gen_range(0..3) {
        0 => format!("{head}{tail}"),
        1 => format!("{head}{tag}{tag}{tail}"),
        _ => {
            let other = loop {
                let t = *TAG_LIST.choose(rng).unwrap();
                if t != tag {
                    break t;
                }
            };
            format!("{head}{other}{tail}")
        }
    }
}

/// Cosine of two f32 rows computed in f64.
pub fn cos(a: &[f32], b: &[f32]) -> f64 {
    let mut ab = 0.0;
    let mut aa = 0.0;
    let mut bb = 0.0;
    for i in 0..a.len() {
        ab += a[i] as f64 * b[i] as f64;
        aa += a[i] as f64 * a[i] as f64;
        bb += b[i] as f64 * b[i] as f64;
    }
    if aa == 0.0 || bb == 0.0 {
        0.0
    } else {
        ab / (aa.sqrt() * bb.sqrt())
    }
}

/// Reference rewards, in the order format, invocation, diversity, point,
/// hit, rank, cold total, rec total.
#[allow(clippy::too_many_arguments)]
pub fn reference_rewards(
    g: &GenEpisode,
    label: ItemId,
    collab: &[Vec<f32>],
    text: &[Vec<f32>],
    pref_vectors: &[Vec<f32>],
    max_invocations: usize,
    k: usize,
    step: f64,
) -> [f64; 8] {
    let format = if g.format_ok { 0.0 } else { -1.0 };
    let m = g.preferences.len();
    let invocation = if m > max_invocations {
        1.0
    } else if m > 1 && m <= max_invocations {
        (m as f64 - 1.0) * 0.5
    } else {
        0.0
    };
    let diversity = if m <= 1 {
        0.0
    } else {
        let mut s = 0.0;
        let mut z = 0.0;
        for i in 0..m {
            for j in (i + 1)..m {
                s += cos(&pref_vectors[i], &pref_vectors[j]);
                z += 1.0;
            }
        }
        1.0 - s / z
    };
    let list: Vec<ItemId> = g.final_items.iter().copied().take(k).collect();
    let kp = list.len();
    let point = if kp == 0 {
        0.0
    } else {
        let mut num = 0.0;
        let mut den = 0.0;
        for (idx, &item) in list.iter().enumerate() {
            let pos = idx + 1;
            let w = ((kp - pos + 1) * (kp - pos + 1)) as f64;
            let st = cos(&text[item.index()], &text[label.index()]);
            let sc = cos(&collab[item.index()], &collab[label.index()]);
            num += w * (st + sc);
            den += w;
        }
        num / (2.0 * den)
    };
    let ky = list.iter().position(|&i| i == label).map(|p| p + 1);
    let hit = if ky.is_some() { 1.0 } else { 0.0 };
    let rank = match ky {
        Some(ky) => (k - ky + 1) as f64 * step,
        None => 0.0,
    };
    [
        format,
        invocation,
        diversity,
        point,
        hit,
        rank,
        format + invocation + diversity,
        format + point + hit + rank,
    ]
}

/// Brute-force ordering: score descending, id ascending.
pub fn exhaustive_order(scores: &[(ItemId, f64)]) -> Vec<ItemId> {
    let mut v = scores.to_vec();
    v.sort_by(|a, b| match b.1.partial_cmp(&a.1).unwrap() {
        Ordering::Equal => a.0.cmp(&b.0),
        o => o,
    });
    v.into_iter().map(|(i, _)| i).collect()
}

/// f64 unit vector of `v`.
pub fn unit64(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

/// Decayed mean of collaborative rows in f64, unit length; zero for an empty history.
pub fn decayed_mean(collab: &[Vec<f32>], history: &[ItemId], gamma: f64) -> Vec<f64> {
    let dim = collab[0].len();
    if history.is_empty() {
        return vec![0.0; dim];
    }
    let n = history.len();
    let mut acc = vec![0.0; dim];
    let mut total = 0.0;
    for (i, id) in history.iter().enumerate() {
        let w = gamma.powi((n - 1 - i) as i32);
        total += w;
        for d in 0..dim {
            acc[d] += w * collab[id.index()][d] as f64;
        }
    }
    unit64(&acc.iter().map(|a| a / total).collect::<Vec<_>>())
}

/// Fused item vector in f64: unit(½(ĉ + t̂)).
pub fn fused_item(collab: &[f32], text: &[f32]) -> Vec<f64> {
    let c = unit64(&collab.iter().map(|&x| x as f64).collect::<Vec<_>>());
    let t = unit64(&text.iter().map(|&x| x as f64).collect::<Vec<_>>());
    unit64(&c.iter().zip(&t).map(|(a, b)| 0.5 * (a + b)).collect::<Vec<_>>())
}

/// Single-relevant-item recall and NDCG at `k` from 1-based ranks.
pub fn brute_metrics(ranks: &[Option<usize>], k: usize) -> (f64, f64) {
    let mut recall = 0.0;
    let mut ndcg = 0.0;
    for r in ranks {
        if let Some(r) = *r {
            if r <= k {
                recall += 1.0;
                ndcg += 1.0 / ((r as f64) + 1.0).log2();
            }
        }
    }
    let n = ranks.len() as f64;
    (recall / n, ndcg / n)
}

/// Feeds `text` split at `cuts` (taken modulo its length, char boundaries
/// only), re-feeding after each stop, and coalesces the events.
pub fn chunked(text: &str, cuts: &[usize]) -> Vec<ParseEvent> {
    let mut bounds: Vec<usize> = cuts
        .iter()
        .map(|&c| c % (text.len() + 1))
        .filter(|&c| text.is_char_boundary(c))
        .collect();
    bounds.push(0);
    bounds.push(text.len());
    bounds.sort();
    bounds.dedup();
    let mut parser = StreamParser::new();
    let mut events = Vec::new();
    for w in bounds.windows(2) {
        let mut chunk = &text[w[0]..w[1]];
        loop {
            let feed = parser.feed(chunk);
            events.extend(feed.events);
            if feed.consumed == chunk.len() {
                break;
            }
            chunk = &chunk[feed.consumed..];
        }
    }
    events.extend(parser.finish());
    coalesce(events)
}

/// Label rank under the history-only query, recomputed in f64: history
/// items other than the label are skipped, ties go to the lower id.
pub fn oracle_rank(fx: &Fixture, sample: &SplitSample) -> usize {
    let q = decayed_mean(&fx.collab, &sample.history.items, 0.8);
    let score = |i: usize| -> f64 {
        fused_item(&fx.collab[i], &fx.text[i])
            .iter()
            .zip(&q)
            .map(|(a, b)| a * b)
            .sum()
    };
    let label = sample.label.index();
    let s_label = score(label);
    let ahead = (0..fx.collab.len())
        .filter(|&j| j != label && !sample.history.items.contains(&ItemId(j as u32)))
        .filter(|&j| {
            let s = score(j);
            s > s_label || (s == s_label && j < label)
        })
        .count();
    ahead + 1
}
