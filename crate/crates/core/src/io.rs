//! On-disk formats: model checkpoints (JSON), preference records and toy items
//! (JSON lines) and training metrics (CSV).
//!
//! Writers take any `io::Write`; callers decide how files are created.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::denoiser::{Arch, DenoiserModel};
use crate::error::{Error, Result};
use crate::pref_graph::PreferenceRecord;
use crate::schedule::{ScheduleSpec, VarianceSchedule};
use crate::train_eval::{MetricRecord, ToyItem};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub arch: Arch,
    pub schedule: ScheduleSpec,
    pub params: Vec<f64>,
}

impl Checkpoint {
    pub fn new(model: &DenoiserModel, sched: &VarianceSchedule) -> Result<Self> {
        model.check_schedule(sched)?;
        Ok(Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            arch: *model.arch(),
            schedule: sched.spec().clone(),
            params: model.flatten_params(),
        })
    }

    /// Rebuilds the model and its schedule, validating every field.
    pub fn into_parts(self) -> Result<(DenoiserModel, VarianceSchedule)> {
        if self.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format_version {} (expected {CHECKPOINT_FORMAT_VERSION})",
                self.format_version
            )));
        }
        let sched = VarianceSchedule::from_spec(&self.schedule)?;
        let model = DenoiserModel::from_params(self.arch, self.params)?;
        model.check_schedule(&sched)?;
        Ok((model, sched))
    }
}

/// Floats are written in shortest round-trip form, so loading restores
/// parameters bit for bit.
pub fn write_checkpoint<W: Write>(
    mut w: W,
    model: &DenoiserModel,
    sched: &VarianceSchedule,
) -> Result<()> {
    if let Some(i) = model.params().iter().position(|p| !p.is_finite()) {
        return Err(Error::NonFinite {
            term: format!("parameter {i}"),
        });
    }
    serde_json::to_writer_pretty(&mut w, &Checkpoint::new(model, sched)?)?;
    w.write_all(b"\n")?;
    Ok(())
}

pub fn read_checkpoint<R: std::io::Read>(r: R) -> Result<(DenoiserModel, VarianceSchedule)> {
    let ck: Checkpoint = serde_json::from_reader(r)
        .map_err(|e| Error::Checkpoint(format!("malformed checkpoint: {e}")))?;
    ck.into_parts()
}

/// What to do with a line that fails to parse or validate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ParseMode {
    #[default]
    Strict,
    Skip,
}

/// A skipped line, 1-based.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkippedLine {
    pub line: usize,
    pub reason: String,
}

fn read_jsonl<T, R, F>(r: R, mode: ParseMode, check: F) -> Result<(Vec<T>, Vec<SkippedLine>)>
where
    T: DeserializeOwned,
    R: BufRead,
    F: Fn(&T) -> Result<()>,
{
    let mut out = Vec::new();
    let mut skipped = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<T>(&line)
            .map_err(|e| e.to_string())
            .and_then(|v| check(&v).map(|_| v).map_err(|e| e.to_string()));
        match (parsed, mode) {
            (Ok(v), _) => out.push(v),
            (Err(reason), ParseMode::Skip) => skipped.push(SkippedLine {
                line: i + 1,
                reason,
            }),
            (Err(reason), ParseMode::Strict) => {
                return Err(Error::MalformedRecord(format!("line {}: {reason}", i + 1)));
            }
        }
    }
    Ok((out, skipped))
}

fn write_jsonl<T: Serialize, W: Write>(mut w: W, rows: &[T]) -> Result<()> {
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records<R: BufRead>(
    r: R,
    mode: ParseMode,
) -> Result<(Vec<PreferenceRecord>, Vec<SkippedLine>)> {
    read_jsonl(r, mode, PreferenceRecord::validate)
}

pub fn write_records<W: Write>(w: W, records: &[PreferenceRecord]) -> Result<()> {
    write_jsonl(w, records)
}

pub fn read_items<R: BufRead>(r: R) -> Result<Vec<ToyItem>> {
    Ok(read_jsonl(r, ParseMode::Strict, |_: &ToyItem| Ok(()))?.0)
}

pub fn write_items<W: Write>(w: W, items: &[ToyItem]) -> Result<()> {
    write_jsonl(w, items)
}

pub const METRIC_COLUMNS: [&str; 5] = [
    "step",
    "wall_clock_seconds",
    "loss",
    "mean_reward",
    "win_rate",
];

/// Writes the metric log with one extra column per loss term.
pub fn write_metrics<W: Write>(w: W, metrics: &[MetricRecord]) -> Result<()> {
    let terms: BTreeSet<&str> = metrics
        .iter()
        .flat_map(|m| m.per_term.keys().map(String::as_str))
        .filter(|k| *k != "loss")
        .collect();
    let mut out = csv::Writer::from_writer(w);
    let header: Vec<&str> = METRIC_COLUMNS
        .iter()
        .copied()
        .chain(terms.iter().copied())
        .collect();
    out.write_record(&header)?;
    for m in metrics {
        let mut row = vec![
            m.step.to_string(),
            m.wall_clock_seconds.to_string(),
            m.loss.to_string(),
            m.mean_reward.to_string(),
            m.win_rate.to_string(),
        ];
        row.extend(
            terms
                .iter()
                .map(|k| m.per_term.get(*k).map_or(String::new(), f64::to_string)),
        );
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_metrics<R: std::io::Read>(r: R) -> Result<Vec<MetricRecord>> {
    let mut rdr = csv::Reader::from_reader(r);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    if header.len() < METRIC_COLUMNS.len() || header[..METRIC_COLUMNS.len()] != METRIC_COLUMNS {
        return Err(Error::MalformedRecord("unexpected metrics header".into()));
    }
    let num = |s: &str| {
        s.parse::<f64>()
            .map_err(|e| Error::MalformedRecord(format!("bad metric value `{s}`: {e}")))
    };
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let step = row[0]
            .parse::<usize>()
            .map_err(|e| Error::MalformedRecord(format!("bad step `{}`: {e}", &row[0])))?;
        let mut per_term = crate::objectives::TermMap::new();
        for (k, v) in header.iter().zip(row.iter()).skip(METRIC_COLUMNS.len()) {
            if !v.is_empty() {
                per_term.insert(k.clone(), num(v)?);
            }
        }
        let loss = num(&row[2])?;
        per_term.insert("loss".into(), loss);
        out.push(MetricRecord {
            step,
            wall_clock_seconds: num(&row[1])?,
            loss,
            mean_reward: num(&row[3])?,
            win_rate: num(&row[4])?,
            per_term,
        });
    }
    Ok(out)
}

/// A small line chart of one or more `(x, y)` series as standalone SVG.
pub fn line_chart_svg(title: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const PAD: f64 = 50.0;
    const COLORS: [&str; 6] = [
        "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b",
    ];
    let pts = series
        .iter()
        .flat_map(|(_, s)| s.iter())
        .filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
    );
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-12 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let sy = |y: f64| H - PAD - (y - y0) / (y1 - y0) * (H - 2.0 * PAD);
    let esc = |s: &str| {
        s.replace('&', "&amp;")
            .replace('<', "&lt;")
            .replace('>', "&gt;")
    };
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\">{}</text>\n\
         <line x1=\"{PAD}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{PAD}\" y1=\"{PAD}\" x2=\"{PAD}\" y2=\"{}\" stroke=\"black\"/>\n\
         <text x=\"{PAD}\" y=\"{}\">{x0:.3}</text><text x=\"{}\" y=\"{}\" text-anchor=\"end\">{x1:.3}</text>\n\
         <text x=\"4\" y=\"{}\">{y0:.3}</text><text x=\"4\" y=\"{}\">{y1:.3}</text>\n",
        W / 2.0,
        esc(title),
        H - PAD,
        W - PAD,
        H - PAD,
        H - PAD,
        H - PAD + 16.0,
        W - PAD,
        H - PAD + 16.0,
        H - PAD,
        PAD + 4.0,
    );
    for (i, (label, s)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let path: Vec<String> = s
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n\
             <text x=\"{}\" y=\"{}\" fill=\"{color}\">{}</text>\n",
            path.join(" "),
            W - PAD - 120.0,
            PAD + 16.0 * i as f64,
            esc(label)
        ));
    }
    svg.push_str("</svg>\n");
    svg
}
