//! Brute-force recount of the curation rules straight from a record list.
//! Every query rescans all records; nothing is cached or indexed.

use std::collections::BTreeSet;

use ncp_core::pref_graph::{Outcome, PreferenceRecord};

pub type Pair = (String, String, String, i64);

pub fn prompts(records: &[PreferenceRecord]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for r in records {
        if !out.contains(&r.prompt_id) {
            out.push(r.prompt_id.clone());
        }
    }
    out
}

fn items(records: &[PreferenceRecord], p: &str) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for r in records.iter().filter(|r| r.prompt_id == p) {
        for id in [&r.winner_id, &r.loser_id] {
            if !out.contains(id) {
                out.push(id.clone());
            }
        }
    }
    out
}

fn count(records: &[PreferenceRecord], p: &str, f: impl Fn(&PreferenceRecord) -> bool) -> usize {
    records.iter().filter(|r| r.prompt_id == p && f(r)).count()
}

fn wins(records: &[PreferenceRecord], p: &str, x: &str) -> usize {
    count(records, p, |r| {
        r.outcome == Outcome::Win && r.winner_id == x
    })
}

fn losses(records: &[PreferenceRecord], p: &str, x: &str) -> usize {
    count(records, p, |r| r.outcome == Outcome::Win && r.loser_id == x)
}

fn draws(records: &[PreferenceRecord], p: &str, x: &str) -> usize {
    count(records, p, |r| {
        r.outcome == Outcome::Draw && (r.winner_id == x || r.loser_id == x)
    })
}

/// Absolute winners of `p`, in first-appearance order.
pub fn absolute_winners(records: &[PreferenceRecord], p: &str) -> Vec<String> {
    items(records, p)
        .into_iter()
        .filter(|x| {
            wins(records, p, x) >= 2 && losses(records, p, x) == 0 && draws(records, p, x) == 0
        })
        .collect()
}

pub fn contradictory(records: &[PreferenceRecord], p: &str) -> BTreeSet<String> {
    items(records, p)
        .into_iter()
        .filter(|x| wins(records, p, x) >= 1 && losses(records, p, x) >= 1)
        .collect()
}

pub fn filtered(records: &[PreferenceRecord]) -> Vec<PreferenceRecord> {
    records
        .iter()
        .filter(|r| {
            r.outcome == Outcome::Win
                && absolute_winners(records, &r.prompt_id).contains(&r.winner_id)
        })
        .cloned()
        .collect()
}

/// Most recent win of `x` in `p`; on equal timestamps the later record wins.
fn latest_win<'a>(
    records: &'a [PreferenceRecord],
    p: &str,
    x: &str,
) -> Option<&'a PreferenceRecord> {
    let mut best: Option<&PreferenceRecord> = None;
    for r in records {
        let is_win_of_x = r.prompt_id == p && r.outcome == Outcome::Win && r.winner_id == x;
        if is_win_of_x && best.is_none_or(|b| r.timestamp >= b.timestamp) {
            best = Some(r);
        }
    }
    best
}

/// `which` is "xy", "xy-xz" or "xy-yz".
pub fn scheme(records: &[PreferenceRecord], which: &str) -> Vec<Pair> {
    let mut out = Vec::new();
    for p in prompts(records) {
        for x in absolute_winners(records, &p) {
            let Some(xy) = latest_win(records, &p, &x) else {
                continue;
            };
            let y = xy.loser_id.clone();
            out.push((p.clone(), x.clone(), y.clone(), xy.timestamp));
            if which == "xy" {
                continue;
            }
            if let Some(yz) = latest_win(records, &p, &y) {
                let z = yz.loser_id.clone();
                if z != x {
                    if which == "xy-xz" {
                        out.push((p.clone(), x.clone(), z, yz.timestamp));
                    } else {
                        out.push((p.clone(), y.clone(), z, yz.timestamp));
                    }
                }
            }
        }
    }
    out
}

pub fn as_pairs(records: &[PreferenceRecord]) -> Vec<Pair> {
    records
        .iter()
        .map(|r| {
            (
                r.prompt_id.clone(),
                r.winner_id.clone(),
                r.loser_id.clone(),
                r.timestamp,
            )
        })
        .collect()
}

/// Random multi-prompt corpus: up to `max_items` items per prompt, item ids
/// reused across prompts, repeated pairs, draws and timestamp ties.
pub fn random_corpus(seed: u64, max_items: usize) -> Vec<PreferenceRecord> {
    use rand::Rng;
    let mut rng = ncp_core::rng::rng_from(seed);
    let n_prompts = rng.random_range(1..=4);
    let n_records = rng.random_range(0..=40);
    let sizes: Vec<usize> = (0..n_prompts)
        .map(|_| rng.random_range(2..=max_items))
        .collect();
    (0..n_records)
        .map(|_| {
            let p = rng.random_range(0..n_prompts);
            let a = rng.random_range(0..sizes[p]);
            let mut b = rng.random_range(0..sizes[p] - 1);
            if b >= a {
                b += 1;
            }
            let ts = rng.random_range(0..8);
            let (pid, wa, wb) = (format!("p{p}"), format!("i{a}"), format!("i{b}"));
            if rng.random::<f64>() < 0.1 {
                PreferenceRecord::draw(&pid, &wa, &wb, ts)
            } else {
                PreferenceRecord::win(&pid, &wa, &wb, ts)
            }
        })
        .collect()
}

/// Compares every curation output against the recount; returns the first
/// mismatch found.
pub fn compare(records: &[PreferenceRecord]) -> Result<(), String> {
    use ncp_core::pref_graph::{self as pg, Scheme};
    let g = pg::build_graph(records).map_err(|e| e.to_string())?;
    for p in prompts(records) {
        let got: BTreeSet<String> = pg::absolute_winners(&g, &p).map_err(|e| e.to_string())?;
        let want: BTreeSet<String> = absolute_winners(records, &p).into_iter().collect();
        if got != want {
            return Err(format!(
                "absolute winners of {p}: got {got:?}, want {want:?}"
            ));
        }
        let got = pg::contradictory_items(&g, &p).map_err(|e| e.to_string())?;
        let want = contradictory(records, &p);
        if got != want {
            return Err(format!(
                "contradictory items of {p}: got {got:?}, want {want:?}"
            ));
        }
    }
    let (kept, report) = pg::filter_dataset(records).map_err(|e| e.to_string())?;
    if kept != filtered(records) {
        return Err("filter_dataset output differs".into());
    }
    let kept_contradictions: usize = prompts(&kept)
        .iter()
        .map(|p| contradictory(&kept, p).len())
        .sum();
    if kept_contradictions != 0 || report.totals.kept_contradiction_count != 0 {
        return Err("kept pairs still contain contradictions".into());
    }
    let total_contradictions: usize = prompts(records)
        .iter()
        .map(|p| contradictory(records, p).len())
        .sum();
    if report.totals.contradiction_count != total_contradictions
        || report.totals.kept_pair_count != kept.len()
    {
        return Err(format!("report totals differ: {:?}", report.totals));
    }
    for (s, name) in [
        (Scheme::Xy, "xy"),
        (Scheme::XyXz, "xy-xz"),
        (Scheme::XyYz, "xy-yz"),
    ] {
        let mut got = as_pairs(&pg::build_scheme(&g, s));
        let mut want = scheme(records, name);
        got.sort();
        want.sort();
        if got != want {
            return Err(format!("scheme {name}: got {got:?}, want {want:?}"));
        }
    }
    Ok(())
}
