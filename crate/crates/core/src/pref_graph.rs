//! Pairwise preference data as per-prompt tournament graphs.
//!
//! Curation works prompt by prompt:
//!
//! * an *absolute winner* has no losses, no draws and at least two wins;
//! * a *contradictory item* both wins and loses at least once;
//! * schemes build mini datasets from absolute winners `x`, the loser `y` of
//!   each winner's latest win, and the loser `z` of `y`'s latest win.
//!
//! "Latest" means largest timestamp, ties going to the later input record.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Win,
    Draw,
}

/// One annotated comparison. For draws the slot order carries no meaning.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreferenceRecord {
    pub prompt_id: String,
    pub winner_id: String,
    pub loser_id: String,
    pub outcome: Outcome,
    pub timestamp: i64,
}

impl PreferenceRecord {
    pub fn win(prompt: &str, winner: &str, loser: &str, timestamp: i64) -> Self {
        Self {
            prompt_id: prompt.to_string(),
            winner_id: winner.to_string(),
            loser_id: loser.to_string(),
            outcome: Outcome::Win,
            timestamp,
        }
    }

    pub fn draw(prompt: &str, a: &str, b: &str, timestamp: i64) -> Self {
        Self {
            outcome: Outcome::Draw,
            ..Self::win(prompt, a, b, timestamp)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.prompt_id.is_empty() || self.winner_id.is_empty() || self.loser_id.is_empty() {
            return Err(Error::MalformedRecord("empty id".into()));
        }
        if self.winner_id == self.loser_id {
            return Err(Error::MalformedRecord(format!(
                "self-pair `{}` under prompt `{}`",
                self.winner_id, self.prompt_id
            )));
        }
        Ok(())
    }
}

/// Directed win edge or undirected draw edge between two items of a prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Edge {
    pub a: usize,
    pub b: usize,
    pub timestamp: i64,
    /// Position of the source record in the input stream.
    pub seq: usize,
}

#[derive(Debug, Clone, Default)]
pub struct PromptGraph {
    pub prompt_id: String,
    /// Item ids in order of first appearance.
    pub items: Vec<String>,
    index: HashMap<String, usize>,
    /// `a` beat `b`, sorted by `(timestamp, seq)`.
    pub wins: Vec<Edge>,
    pub draws: Vec<Edge>,
    wins_out: Vec<usize>,
    wins_in: Vec<usize>,
    draw_count: Vec<usize>,
}

impl PromptGraph {
    fn item(&mut self, id: &str) -> usize {
        if let Some(&i) = self.index.get(id) {
            return i;
        }
        let i = self.items.len();
        self.items.push(id.to_string());
        self.index.insert(id.to_string(), i);
        self.wins_out.push(0);
        self.wins_in.push(0);
        self.draw_count.push(0);
        i
    }

    pub fn item_index(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn wins_of(&self, i: usize) -> usize {
        self.wins_out[i]
    }

    pub fn losses_of(&self, i: usize) -> usize {
        self.wins_in[i]
    }

    pub fn draws_of(&self, i: usize) -> usize {
        self.draw_count[i]
    }

    fn is_absolute_winner(&self, i: usize) -> bool {
        self.wins_in[i] == 0 && self.draw_count[i] == 0 && self.wins_out[i] >= 2
    }

    fn is_contradictory(&self, i: usize) -> bool {
        self.wins_in[i] >= 1 && self.wins_out[i] >= 1
    }

    /// Absolute winners in order of first appearance.
    pub fn absolute_winner_indices(&self) -> Vec<usize> {
        (0..self.items.len())
            .filter(|&i| self.is_absolute_winner(i))
            .collect()
    }

    pub fn absolute_winners(&self) -> BTreeSet<String> {
        self.absolute_winner_indices()
            .into_iter()
            .map(|i| self.items[i].clone())
            .collect()
    }

    pub fn contradictory_items(&self) -> BTreeSet<String> {
        (0..self.items.len())
            .filter(|&i| self.is_contradictory(i))
            .map(|i| self.items[i].clone())
            .collect()
    }

    /// The most recent win of item `i`, if any.
    pub fn latest_win(&self, i: usize) -> Option<&Edge> {
        // edges are sorted by (timestamp, seq), so the last match is the latest
        self.wins.iter().rev().find(|e| e.a == i)
    }
}

#[derive(Debug, Clone, Default)]
pub struct PreferenceGraph {
    prompts: Vec<PromptGraph>,
    index: HashMap<String, usize>,
    records: usize,
}

impl PreferenceGraph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds one record. Edges are kept sorted on insertion.
    pub fn insert(&mut self, rec: &PreferenceRecord) -> Result<()> {
        rec.validate()?;
        let seq = self.records;
        self.records += 1;
        let p = match self.index.get(&rec.prompt_id) {
            Some(&p) => p,
            None => {
                self.prompts.push(PromptGraph {
                    prompt_id: rec.prompt_id.clone(),
                    ..PromptGraph::default()
                });
                self.index
                    .insert(rec.prompt_id.clone(), self.prompts.len() - 1);
                self.prompts.len() - 1
            }
        };
        let g = &mut self.prompts[p];
        let a = g.item(&rec.winner_id);
        let b = g.item(&rec.loser_id);
        let edge = Edge {
            a,
            b,
            timestamp: rec.timestamp,
            seq,
        };
        let key = |e: &Edge| (e.timestamp, e.seq);
        match rec.outcome {
            Outcome::Win => {
                g.wins_out[a] += 1;
                g.wins_in[b] += 1;
                let pos = g.wins.partition_point(|e| key(e) <= key(&edge));
                g.wins.insert(pos, edge);
            }
            Outcome::Draw => {
                g.draw_count[a] += 1;
                g.draw_count[b] += 1;
                let pos = g.draws.partition_point(|e| key(e) <= key(&edge));
                g.draws.insert(pos, edge);
            }
        }
        Ok(())
    }

    pub fn prompts(&self) -> &[PromptGraph] {
        &self.prompts
    }

    pub fn prompt(&self, id: &str) -> Result<&PromptGraph> {
        self.index
            .get(id)
            .map(|&i| &self.prompts[i])
            .ok_or_else(|| Error::UnknownPrompt(id.to_string()))
    }

    pub fn record_count(&self) -> usize {
        self.records
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }
}

pub fn build_graph<'a, I>(records: I) -> Result<PreferenceGraph>
where
    I: IntoIterator<Item = &'a PreferenceRecord>,
{
    let mut g = PreferenceGraph::new();
    for r in records {
        g.insert(r)?;
    }
    Ok(g)
}

pub fn absolute_winners(g: &PreferenceGraph, prompt_id: &str) -> Result<BTreeSet<String>> {
    Ok(g.prompt(prompt_id)?.absolute_winners())
}

pub fn contradictory_items(g: &PreferenceGraph, prompt_id: &str) -> Result<BTreeSet<String>> {
    Ok(g.prompt(prompt_id)?.contradictory_items())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Scheme {
    /// `x > y`
    #[serde(rename = "xy")]
    Xy,
    /// `x > y ∪ x > z`
    #[serde(rename = "xy-xz")]
    XyXz,
    /// `x > y ∪ y > z`
    #[serde(rename = "xy-yz")]
    XyYz,
}

impl Scheme {
    pub const ALL: [Scheme; 3] = [Scheme::Xy, Scheme::XyXz, Scheme::XyYz];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Xy => "xy",
            Scheme::XyXz => "xy-xz",
            Scheme::XyYz => "xy-yz",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s
            .trim()
            .to_ascii_lowercase()
            .replace(['_', ' '], "-")
            .as_str()
        {
            "xy" | "x>y" => Ok(Scheme::Xy),
            "xy-xz" | "x>y-x>z" => Ok(Scheme::XyXz),
            "xy-yz" | "x>y-y>z" => Ok(Scheme::XyYz),
            _ => Err(Error::UnknownScheme(s.to_string())),
        }
    }
}

fn scheme_for_prompt(g: &PromptGraph, scheme: Scheme, out: &mut Vec<PreferenceRecord>) {
    let rec = |w: usize, l: usize, ts: i64| {
        PreferenceRecord::win(&g.prompt_id, &g.items[w], &g.items[l], ts)
    };
    for x in g.absolute_winner_indices() {
        let Some(xy) = g.latest_win(x) else { continue };
        let y = xy.b;
        out.push(rec(x, y, xy.timestamp));
        if scheme == Scheme::Xy {
            continue;
        }
        if let Some(yz) = g.latest_win(y) {
            let z = yz.b;
            if z != x {
                match scheme {
                    Scheme::XyXz => out.push(rec(x, z, yz.timestamp)),
                    Scheme::XyYz => out.push(rec(y, z, yz.timestamp)),
                    Scheme::Xy => unreachable!(),
                }
            }
        }
    }
}

/// Pairs of the requested mini dataset, prompt by prompt in first-appearance order.
pub fn build_scheme(g: &PreferenceGraph, scheme: Scheme) -> Vec<PreferenceRecord> {
    let mut out = Vec::new();
    for p in g.prompts() {
        scheme_for_prompt(p, scheme, &mut out);
    }
    out
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemeCounts {
    pub xy: usize,
    pub xy_xz: usize,
    pub xy_yz: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptCuration {
    pub prompt_id: String,
    pub item_count: usize,
    pub win_records: usize,
    pub draw_records: usize,
    pub kept_records: usize,
    pub absolute_winners: Vec<String>,
    pub contradictory_items: Vec<String>,
    pub scheme_pairs: SchemeCounts,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurationTotals {
    pub prompt_count: usize,
    pub item_count: usize,
    pub pair_count: usize,
    pub draw_count: usize,
    pub contradiction_count: usize,
    pub absolute_winner_count: usize,
    pub kept_prompt_count: usize,
    pub kept_pair_count: usize,
    /// Contradictory items remaining in the graph of kept pairs.
    pub kept_contradiction_count: usize,
    pub scheme_pairs: SchemeCounts,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrossPromptItem {
    pub item_id: String,
    pub prompts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurationReport {
    pub totals: CurationTotals,
    pub prompts: Vec<PromptCuration>,
    /// Items seen under more than one prompt. Reported, not acted on.
    pub cross_prompt_items: Vec<CrossPromptItem>,
}

impl CurationReport {
    pub const CSV_HEADER: [&'static str; 8] = [
        "prompt_count",
        "pair_count",
        "contradiction_count",
        "kept_prompt_count",
        "kept_pair_count",
        "xy_pairs",
        "xy_xz_pairs",
        "xy_yz_pairs",
    ];

    pub fn csv_row(&self) -> [String; 8] {
        let t = &self.totals;
        [
            t.prompt_count,
            t.pair_count,
            t.contradiction_count,
            t.kept_prompt_count,
            t.kept_pair_count,
            t.scheme_pairs.xy,
            t.scheme_pairs.xy_xz,
            t.scheme_pairs.xy_yz,
        ]
        .map(|v| v.to_string())
    }
}

/// Keeps every win record whose winner is an absolute winner of its prompt.
pub fn filter_dataset(
    records: &[PreferenceRecord],
) -> Result<(Vec<PreferenceRecord>, CurationReport)> {
    let g = build_graph(records)?;
    let mut kept = Vec::new();
    let mut prompts = Vec::with_capacity(g.prompts().len());
    let mut totals = CurationTotals::default();
    let mut owners: BTreeMap<&str, Vec<String>> = BTreeMap::new();

    for p in g.prompts() {
        let winners = p.absolute_winner_indices();
        let mut keep_seq: Vec<usize> = p
            .wins
            .iter()
            .filter(|e| winners.contains(&e.a))
            .map(|e| e.seq)
            .collect();
        keep_seq.sort_unstable();
        let counts = SchemeCounts {
            xy: scheme_len(p, Scheme::Xy),
            xy_xz: scheme_len(p, Scheme::XyXz),
            xy_yz: scheme_len(p, Scheme::XyYz),
        };
        let contradictory = p.contradictory_items();
        totals.prompt_count += 1;
        totals.item_count += p.items.len();
        totals.pair_count += p.wins.len();
        totals.draw_count += p.draws.len();
        totals.contradiction_count += contradictory.len();
        totals.absolute_winner_count += winners.len();
        if !keep_seq.is_empty() {
            totals.kept_prompt_count += 1;
        }
        totals.kept_pair_count += keep_seq.len();
        totals.scheme_pairs.xy += counts.xy;
        totals.scheme_pairs.xy_xz += counts.xy_xz;
        totals.scheme_pairs.xy_yz += counts.xy_yz;
        for item in &p.items {
            owners.entry(item).or_default().push(p.prompt_id.clone());
        }
        prompts.push(PromptCuration {
            prompt_id: p.prompt_id.clone(),
            item_count: p.items.len(),
            win_records: p.wins.len(),
            draw_records: p.draws.len(),
            kept_records: keep_seq.len(),
            absolute_winners: p.absolute_winners().into_iter().collect(),
            contradictory_items: contradictory.into_iter().collect(),
            scheme_pairs: counts,
        });
        kept.extend(keep_seq);
    }
    kept.sort_unstable();
    let kept: Vec<PreferenceRecord> = kept.into_iter().map(|s| records[s].clone()).collect();
    let kept_graph = build_graph(&kept)?;
    totals.kept_contradiction_count = kept_graph
        .prompts()
        .iter()
        .map(|p| p.contradictory_items().len())
        .sum();
    let cross_prompt_items = owners
        .into_iter()
        .filter(|(_, ps)| ps.len() > 1)
        .map(|(item, prompts)| CrossPromptItem {
            item_id: item.to_string(),
            prompts,
        })
        .collect();
    Ok((
        kept,
        CurationReport {
            totals,
            prompts,
            cross_prompt_items,
        },
    ))
}

fn scheme_len(p: &PromptGraph, scheme: Scheme) -> usize {
    let mut v = Vec::new();
    scheme_for_prompt(p, scheme, &mut v);
    v.len()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn reward(r: &BTreeMap<String, f64>, item: &str) -> Result<f64> {
    let v = *r
        .get(item)
        .ok_or_else(|| Error::Degenerate(format!("no reward for `{item}`")))?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite {
            term: format!("reward[{item}]"),
        })
    }
}

/// Coefficients on `grad log p(item)` in the Bradley-Terry loss gradient of
/// one pair: `-beta s` on the winner and `+beta s` on the loser, with
/// `s = sigmoid(r_loser - r_winner)`. Every other rewarded item gets 0.
pub fn bt_pair_gradient(
    rewards: &BTreeMap<String, f64>,
    winner: &str,
    loser: &str,
    beta: f64,
) -> Result<BTreeMap<String, f64>> {
    if winner == loser {
        return Err(Error::Degenerate(format!(
            "winner and loser are both `{winner}`"
        )));
    }
    let s = sigmoid(reward(rewards, loser)? - reward(rewards, winner)?);
    let mut out: BTreeMap<String, f64> = rewards.keys().map(|k| (k.clone(), 0.0)).collect();
    out.insert(winner.to_string(), -beta * s);
    out.insert(loser.to_string(), beta * s);
    Ok(out)
}

/// Net descent-direction coefficient on `grad log p(x2)` from the two pairs
/// `x2 > x1` and `x3 > x2`: `beta (sigmoid(r1 - r2) - sigmoid(r2 - r3))`.
/// Zero means the two pairs cancel completely on the middle item.
pub fn cancellation_diagnostic(
    rewards: &BTreeMap<String, f64>,
    chain: (&str, &str, &str),
    beta: f64,
) -> Result<f64> {
    let (x1, x2, x3) = chain;
    if x1 == x2 || x2 == x3 || x1 == x3 {
        return Err(Error::Degenerate(format!(
            "chain ({x1}, {x2}, {x3}) repeats an item"
        )));
    }
    let lower = bt_pair_gradient(rewards, x2, x1, beta)?;
    let upper = bt_pair_gradient(rewards, x3, x2, beta)?;
    Ok(-lower[x2] - upper[x2])
}
