//! Reading and writing event files.
//!
//! Two formats are supported:
//!
//! * CSV triplets with header `sample_id,variable,timestamp,value,split`,
//!   where `split` is `obs` (history) or `target` (forecast query with its
//!   true value). The `split` column may be omitted, meaning `obs`.
//! * JSONL, one object per sample:
//!   `{"id": "s1", "events": [[var, t, x], ...], "queries": [[var, q, v], ...]}`
//!   with optional `"window": [start, end]` (lookback window) and
//!   `"n_variables"` keys.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::EventSeries;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Format {
    Jsonl,
    CsvTriplet,
}

impl Format {
    /// Guesses the format from a file extension.
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()? {
            "jsonl" | "json" => Some(Format::Jsonl),
            "csv" => Some(Format::CsvTriplet),
            _ => None,
        }
    }
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct JsonSample {
    id: String,
    events: Vec<(usize, f64, f64)>,
    #[serde(default)]
    queries: Vec<(usize, f64, f64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    window: Option<(f64, f64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    n_variables: Option<usize>,
}

/// Raw rows of one sample before sorting and validation.
#[derive(Default)]
struct Pending {
    id: String,
    obs: Vec<(usize, f64, f64, usize)>,
    targets: Vec<(usize, f64, f64, usize)>,
    window: Option<(f64, f64)>,
    n_variables: usize,
    line: usize,
}

pub fn parse_events(path: &Path, format: Format) -> Result<Vec<EventSeries>> {
    let pending = match format {
        Format::Jsonl => read_jsonl(path)?,
        Format::CsvTriplet => read_csv(path)?,
    };
    let n_vars = pending
        .iter()
        .flat_map(|p| p.obs.iter().chain(&p.targets).map(|r| r.0 + 1).chain([p.n_variables]))
        .max()
        .unwrap_or(0);
    pending.into_iter().map(|p| finish(path, p, n_vars)).collect()
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn read_jsonl(path: &Path) -> Result<Vec<Pending>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: JsonSample = serde_json::from_str(&line).map_err(|e| parse_err(path, i + 1, e.to_string()))?;
        out.push(Pending {
            id: s.id,
            obs: s.events.into_iter().map(|(n, t, x)| (n, t, x, i + 1)).collect(),
            targets: s.queries.into_iter().map(|(n, t, x)| (n, t, x, i + 1)).collect(),
            window: s.window,
            n_variables: s.n_variables.unwrap_or(0),
            line: i + 1,
        });
    }
    Ok(out)
}

fn read_csv(path: &Path) -> Result<Vec<Pending>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| parse_err(path, 0, e.to_string()))?;
    let mut out: Vec<Pending> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(path, line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.get(0) == Some("sample_id") {
            continue;
        }
        if record.len() < 4 || record.len() > 5 {
            return Err(parse_err(path, line, format!("expected 4 or 5 fields, found {}", record.len())));
        }
        let field = |i: usize, what: &str| -> Result<f64> {
            record[i]
                .parse::<f64>()
                .map_err(|_| parse_err(path, line, format!("invalid {what} `{}`", &record[i])))
        };
        let var: usize = record[1]
            .parse()
            .map_err(|_| parse_err(path, line, format!("invalid variable `{}`", &record[1])))?;
        let (t, x) = (field(2, "timestamp")?, field(3, "value")?);
        if !t.is_finite() {
            return Err(parse_err(path, line, "timestamp must be finite"));
        }
        let id = &record[0];
        let slot = *index.entry(id.to_string()).or_insert_with(|| {
            out.push(Pending {
                id: id.to_string(),
                line,
                ..Default::default()
            });
            out.len() - 1
        });
        match record.get(4).unwrap_or("obs") {
            "obs" => out[slot].obs.push((var, t, x, line)),
            "target" => out[slot].targets.push((var, t, x, line)),
            other => return Err(parse_err(path, line, format!("unknown split `{other}`"))),
        }
    }
    Ok(out)
}

fn finish(path: &Path, p: Pending, n_vars: usize) -> Result<EventSeries> {
    let mut s = EventSeries::empty(p.id, n_vars);
    s.window = p.window;
    let id = s.id.clone();
    let sort_and_check = |mut rows: Vec<(usize, f64, f64, usize)>| -> Result<Vec<Vec<(f64, f64)>>> {
        rows.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
        let mut per_var = vec![Vec::new(); n_vars];
        for (i, r) in rows.iter().enumerate() {
            if !r.1.is_finite() {
                return Err(parse_err(path, r.3, "timestamp must be finite"));
            }
            if i > 0 && rows[i - 1].0 == r.0 && rows[i - 1].1 == r.1 {
                return Err(Error::DuplicateObservation {
                    sample: id.clone(),
                    variable: r.0,
                    timestamp: r.1,
                });
            }
            per_var[r.0].push((r.1, r.2));
        }
        Ok(per_var)
    };
    s.events = sort_and_check(p.obs)?;
    let targets = sort_and_check(p.targets)?;
    for (n, rows) in targets.into_iter().enumerate() {
        (s.queries[n], s.targets[n]) = rows.into_iter().unzip();
    }
    s.validate().map_err(|e| match e {
        Error::NonMonotonicQuery { .. } => e,
        other => parse_err(path, p.line, other.to_string()),
    })?;
    Ok(s)
}

pub fn write_jsonl(path: &Path, samples: &[EventSeries]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for s in samples {
        let rec = JsonSample {
            id: s.id.clone(),
            events: triplets(&s.events),
            queries: s
                .queries
                .iter()
                .zip(&s.targets)
                .enumerate()
                .flat_map(|(n, (q, v))| q.iter().zip(v).map(move |(&q, &v)| (n, q, v)))
                .collect(),
            window: s.window,
            n_variables: Some(s.n_variables),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Writes samples as CSV triplets. The lookback window is not representable
/// in this format and is dropped.
pub fn write_csv(path: &Path, samples: &[EventSeries]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "sample_id,variable,timestamp,value,split")?;
    for s in samples {
        for (n, t, x) in triplets(&s.events) {
            writeln!(w, "{},{n},{t},{x},obs", s.id)?;
        }
        for (n, (q, v)) in s.queries.iter().zip(&s.targets).enumerate() {
            for (t, x) in q.iter().zip(v) {
                writeln!(w, "{},{n},{t},{x},target", s.id)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn triplets(events: &[Vec<(f64, f64)>]) -> Vec<(usize, f64, f64)> {
    events
        .iter()
        .enumerate()
        .flat_map(|(n, e)| e.iter().map(move |&(t, x)| (n, t, x)))
        .collect()
}
