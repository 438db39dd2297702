//! Irregular event data and its canonical pre-aligned form.
//!
//! An [`EventSeries`] keeps each variable's observations as its own list of
//! `(timestamp, value)` pairs. [`pre_align`] folds them onto the union of all
//! timestamps as a value matrix plus observation mask, and [`make_batch`]
//! pads several aligned samples to a common shape for the model.

mod io;
mod synth;

pub use io::{parse_events, write_csv, write_jsonl, Format};
pub use synth::{gen_synthetic, Component, SampleTruth, SynthConfig, SynthDataset};

use crate::error::{Error, Result};

/// One raw irregular multivariate sample.
#[derive(Clone, Debug, PartialEq)]
pub struct EventSeries {
    pub id: String,
    pub n_variables: usize,
    /// Per variable, `(timestamp, value)` with strictly increasing timestamps.
    pub events: Vec<Vec<(f64, f64)>>,
    /// Per variable, future timestamps to forecast.
    pub queries: Vec<Vec<f64>>,
    /// Per variable, true values aligned with `queries`.
    pub targets: Vec<Vec<f64>>,
    /// Lookback window `[start, end)` in original units, when known.
    pub window: Option<(f64, f64)>,
}

impl EventSeries {
    pub fn empty(id: impl Into<String>, n_variables: usize) -> Self {
        Self {
            id: id.into(),
            n_variables,
            events: vec![Vec::new(); n_variables],
            queries: vec![Vec::new(); n_variables],
            targets: vec![Vec::new(); n_variables],
            window: None,
        }
    }

    pub fn n_events(&self) -> usize {
        self.events.iter().map(Vec::len).sum()
    }

    pub fn n_queries(&self) -> usize {
        self.queries.iter().map(Vec::len).sum()
    }

    pub fn last_event_time(&self) -> Option<f64> {
        self.events.iter().filter_map(|e| e.last().map(|p| p.0)).reduce(f64::max)
    }

    fn first_event_time(&self) -> Option<f64> {
        self.events.iter().filter_map(|e| e.first().map(|p| p.0)).reduce(f64::min)
    }

    fn first_query_time(&self) -> Option<f64> {
        self.queries.iter().filter_map(|q| q.first().copied()).reduce(f64::min)
    }

    /// Checks the sample invariants: strictly increasing event times per
    /// variable, queries after every event, and one target per query.
    pub fn validate(&self) -> Result<()> {
        let dims_ok = self.events.len() == self.n_variables
            && self.queries.len() == self.n_variables
            && self.targets.len() == self.n_variables;
        if !dims_ok {
            return Err(Error::Config(format!(
                "sample `{}`: per-variable lists must have {} entries",
                self.id, self.n_variables
            )));
        }
        for (n, events) in self.events.iter().enumerate() {
            for pair in events.windows(2) {
                if pair[1].0 <= pair[0].0 {
                    return Err(Error::DuplicateObservation {
                        sample: self.id.clone(),
                        variable: n,
                        timestamp: pair[1].0,
                    });
                }
            }
        }
        let last = self.last_event_time().unwrap_or(f64::NEG_INFINITY);
        for (q, v) in self.queries.iter().zip(&self.targets) {
            if q.len() != v.len() {
                return Err(Error::Config(format!(
                    "sample `{}`: {} queries but {} targets",
                    self.id,
                    q.len(),
                    v.len()
                )));
            }
            if let Some(&bad) = q.iter().find(|&&t| t <= last) {
                return Err(Error::NonMonotonicQuery {
                    sample: self.id.clone(),
                    query: bad,
                    last_event: last,
                });
            }
        }
        Ok(())
    }

    /// The affine map sending the lookback window to `[0, 1]`.
    ///
    /// Without an explicit window the lookback runs from the first event to
    /// the first query (or the last event when there are no queries).
    pub fn time_scale(&self) -> TimeScale {
        let (start, end) = match self.window {
            Some(w) => w,
            None => {
                let start = self.first_event_time().or(self.first_query_time()).unwrap_or(0.0);
                let end = self.first_query_time().or(self.last_event_time()).unwrap_or(start);
                (start, end)
            }
        };
        let span = end - start;
        TimeScale {
            origin: start,
            span: if span > 0.0 && span.is_finite() { span } else { 1.0 },
        }
    }
}

/// Affine time normalization `t ↦ (t − origin) / span`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeScale {
    pub origin: f64,
    pub span: f64,
}

impl TimeScale {
    pub const IDENTITY: TimeScale = TimeScale { origin: 0.0, span: 1.0 };

    pub fn normalize(&self, t: f64) -> f64 {
        (t - self.origin) / self.span
    }

    pub fn denormalize(&self, t: f64) -> f64 {
        t * self.span + self.origin
    }
}

/// The `(T, X, M)` triple: union timestamps, zero-filled values and the
/// observation mask, plus the sample's forecast queries.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignedSample {
    pub id: String,
    pub n_variables: usize,
    /// Strictly increasing union of all event timestamps (length `L`).
    pub times: Vec<f64>,
    /// `L × N`, row-major; zero where unobserved.
    pub values: Vec<f64>,
    /// `L × N`, row-major; 1 where observed.
    pub mask: Vec<f64>,
    pub queries: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
    pub scale: TimeScale,
}

impl AlignedSample {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn value(&self, l: usize, n: usize) -> f64 {
        self.values[l * self.n_variables + n]
    }

    pub fn observed(&self, l: usize, n: usize) -> bool {
        self.mask[l * self.n_variables + n] != 0.0
    }

    /// Observation count per variable (column sums of the mask).
    pub fn counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_variables];
        for l in 0..self.len() {
            for (n, c) in counts.iter_mut().enumerate() {
                if self.observed(l, n) {
                    *c += 1;
                }
            }
        }
        counts
    }

    /// Extracts the `(variable, timestamp, value)` triplets back out.
    pub fn triplets(&self) -> Vec<(usize, f64, f64)> {
        let mut out = Vec::new();
        for (l, &t) in self.times.iter().enumerate() {
            for n in 0..self.n_variables {
                if self.observed(l, n) {
                    out.push((n, t, self.value(l, n)));
                }
            }
        }
        out
    }
}

/// Folds a sample onto the sorted union of its event timestamps.
/// Timestamps are merged on exact floating-point equality.
pub fn pre_align(sample: &EventSeries) -> AlignedSample {
    let n_vars = sample.n_variables;
    let mut times: Vec<f64> = sample.events.iter().flatten().map(|&(t, _)| t).collect();
    times.sort_by(f64::total_cmp);
    times.dedup();
    let mut values = vec![0.0; times.len() * n_vars];
    let mut mask = vec![0.0; times.len() * n_vars];
    for (n, events) in sample.events.iter().enumerate() {
        // Both lists are sorted, so a single merge pass places every event.
        let mut l = 0;
        for &(t, x) in events {
            while times[l] < t {
                l += 1;
            }
            values[l * n_vars + n] = x;
            mask[l * n_vars + n] = 1.0;
        }
    }
    AlignedSample {
        id: sample.id.clone(),
        n_variables: n_vars,
        times,
        values,
        mask,
        queries: sample.queries.clone(),
        targets: sample.targets.clone(),
        scale: sample.time_scale(),
    }
}

/// Splits a sample at `t_cut`: earlier events become history, later ones
/// become forecast targets. `max_targets` keeps only the earliest targets
/// per variable (the "next k timestamps" protocol).
pub fn window_split(sample: &EventSeries, t_cut: f64, max_targets: Option<usize>) -> Result<EventSeries> {
    let n_vars = sample.n_variables;
    let mut out = EventSeries::empty(sample.id.clone(), n_vars);
    for n in 0..n_vars {
        let (hist, fut): (Vec<_>, Vec<_>) = sample.events[n].iter().partition(|&&(t, _)| t < t_cut);
        out.events[n] = hist;
        let mut future: Vec<(f64, f64)> = fut;
        future.extend(sample.queries[n].iter().copied().zip(sample.targets[n].iter().copied()));
        future.sort_by(|a, b| a.0.total_cmp(&b.0));
        if let Some(k) = max_targets {
            future.truncate(k);
        }
        let (q, v) = future.into_iter().unzip();
        out.queries[n] = q;
        out.targets[n] = v;
    }
    if out.n_events() == 0 {
        return Err(Error::EmptyHistory(sample.id.clone()));
    }
    if out.n_queries() == 0 {
        return Err(Error::EmptyTarget(sample.id.clone()));
    }
    let start = match sample.window {
        Some((s, _)) => s,
        None => out.first_event_time().unwrap_or(t_cut),
    };
    out.window = Some((start, t_cut));
    Ok(out)
}

/// Several aligned samples padded to common history length `L` and common
/// per-variable query count `Q`.
///
/// Padded history rows repeat the sample's last real timestamp with mask 0;
/// padded queries repeat the variable's last real query with query mask 0.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignedBatch {
    pub ids: Vec<String>,
    pub n_variables: usize,
    /// Padded history length.
    pub len: usize,
    /// Padded per-variable query count.
    pub n_queries: usize,
    /// `B × L`
    pub times: Vec<f64>,
    /// `B × L × N`
    pub values: Vec<f64>,
    /// `B × L × N`
    pub mask: Vec<f64>,
    /// `B × L`; 1 for real rows.
    pub row_mask: Vec<f64>,
    /// `B × N × Q`
    pub queries: Vec<f64>,
    /// `B × N × Q`
    pub targets: Vec<f64>,
    /// `B × N × Q`; 1 for real queries.
    pub query_mask: Vec<f64>,
    pub scales: Vec<TimeScale>,
}

impl AlignedBatch {
    pub fn batch_size(&self) -> usize {
        self.ids.len()
    }

    /// Number of real (unpadded) queries across the batch.
    pub fn n_real_queries(&self) -> usize {
        self.query_mask.iter().filter(|&&m| m != 0.0).count()
    }

    /// Recovers the original aligned samples.
    pub fn unbatch(&self) -> Vec<AlignedSample> {
        let (nv, l_max, q_max) = (self.n_variables, self.len, self.n_queries);
        (0..self.batch_size())
            .map(|b| {
                let rows = (0..l_max).filter(|&l| self.row_mask[b * l_max + l] != 0.0).count();
                let base = b * l_max * nv;
                let mut queries = vec![Vec::new(); nv];
                let mut targets = vec![Vec::new(); nv];
                for n in 0..nv {
                    for q in 0..q_max {
                        let at = (b * nv + n) * q_max + q;
                        if self.query_mask[at] != 0.0 {
                            queries[n].push(self.queries[at]);
                            targets[n].push(self.targets[at]);
                        }
                    }
                }
                AlignedSample {
                    id: self.ids[b].clone(),
                    n_variables: nv,
                    times: self.times[b * l_max..b * l_max + rows].to_vec(),
                    values: self.values[base..base + rows * nv].to_vec(),
                    mask: self.mask[base..base + rows * nv].to_vec(),
                    queries,
                    targets,
                    scale: self.scales[b],
                }
            })
            .collect()
    }
}

/// Pads `samples` into one batch.
///
/// # Panics
///
/// If `samples` is empty or the samples disagree on the variable count.
pub fn make_batch(samples: &[AlignedSample]) -> AlignedBatch {
    assert!(!samples.is_empty(), "cannot batch zero samples");
    let nv = samples[0].n_variables;
    assert!(samples.iter().all(|s| s.n_variables == nv), "variable count differs within batch");
    let l_max = samples.iter().map(AlignedSample::len).max().unwrap_or(0);
    let q_max = samples
        .iter()
        .flat_map(|s| s.queries.iter().map(Vec::len))
        .max()
        .unwrap_or(0);
    let bsz = samples.len();
    let mut batch = AlignedBatch {
        ids: samples.iter().map(|s| s.id.clone()).collect(),
        n_variables: nv,
        len: l_max,
        n_queries: q_max,
        times: vec![0.0; bsz * l_max],
        values: vec![0.0; bsz * l_max * nv],
        mask: vec![0.0; bsz * l_max * nv],
        row_mask: vec![0.0; bsz * l_max],
        queries: vec![0.0; bsz * nv * q_max],
        targets: vec![0.0; bsz * nv * q_max],
        query_mask: vec![0.0; bsz * nv * q_max],
        scales: samples.iter().map(|s| s.scale).collect(),
    };
    for (b, s) in samples.iter().enumerate() {
        let last_t = s.times.last().copied().unwrap_or(s.scale.origin);
        for l in 0..l_max {
            let real = l < s.len();
            batch.times[b * l_max + l] = if real { s.times[l] } else { last_t };
            batch.row_mask[b * l_max + l] = if real { 1.0 } else { 0.0 };
        }
        let base = b * l_max * nv;
        batch.values[base..base + s.values.len()].copy_from_slice(&s.values);
        batch.mask[base..base + s.mask.len()].copy_from_slice(&s.mask);
        let window_end = s.scale.denormalize(1.0);
        for n in 0..nv {
            let qs = &s.queries[n];
            let pad_q = qs.last().copied().unwrap_or(window_end);
            for q in 0..q_max {
                let at = (b * nv + n) * q_max + q;
                if q < qs.len() {
                    batch.queries[at] = qs[q];
                    batch.targets[at] = s.targets[n][q];
                    batch.query_mask[at] = 1.0;
                } else {
                    batch.queries[at] = pad_q;
                }
            }
        }
    }
    batch
}
