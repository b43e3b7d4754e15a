//! RTTM I/O and diarization error rate.
//!
//! Scoring runs on an integer millisecond grid. Rather than materialising
//! every millisecond, the timeline is cut at every segment and collar
//! boundary; speaker activity is constant between consecutive cuts.

use std::collections::BTreeSet;
use std::fmt::{self, Write as _};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numeric::{Matrix, Real};
use crate::pipeline::{posterior_to_segments, Segment};

/// Speaker turns of one recording.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentList {
    pub recording_id: String,
    pub segments: Vec<Turn>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Turn {
    pub speaker: String,
    pub onset: f64,
    pub duration: f64,
}

impl SegmentList {
    pub fn new(recording_id: impl Into<String>) -> Self {
        Self {
            recording_id: recording_id.into(),
            segments: Vec::new(),
        }
    }

    pub fn push(&mut self, speaker: impl Into<String>, onset: f64, duration: f64) -> Result<()> {
        check_turn(onset, duration)?;
        self.segments.push(Turn {
            speaker: speaker.into(),
            onset,
            duration,
        });
        Ok(())
    }

    /// Pipeline segments with labels `spk<id>`.
    pub fn from_segments(recording_id: impl Into<String>, segs: &[Segment]) -> Self {
        Self {
            recording_id: recording_id.into(),
            segments: segs
                .iter()
                .map(|s| Turn {
                    speaker: format!("spk{}", s.speaker),
                    onset: s.onset,
                    duration: s.duration,
                })
                .collect(),
        }
    }

    /// Runs of active frames (`> 0.5`) in a `T×S` label matrix.
    pub fn from_labels<T: Real>(recording_id: impl Into<String>, labels: &Matrix<T>, frame_period: f64) -> Self {
        let ids: Vec<usize> = (0..labels.cols()).collect();
        let active = labels.map(|v| if v > T::lit(0.5) { T::one() } else { T::zero() });
        Self::from_segments(recording_id, &posterior_to_segments(&active, &ids, 0.5, frame_period))
    }

    pub fn speakers(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for s in &self.segments {
            if !out.contains(&s.speaker.as_str()) {
                out.push(&s.speaker);
            }
        }
        out
    }

    pub fn total_duration(&self) -> f64 {
        self.segments.iter().map(|s| s.duration).sum()
    }
}

fn check_turn(onset: f64, duration: f64) -> Result<()> {
    if !(onset >= 0.0 && onset.is_finite()) {
        return Err(Error::invalid(format!("onset {onset} must be non-negative")));
    }
    if !(duration > 0.0 && duration.is_finite()) {
        return Err(Error::invalid(format!("duration {duration} must be positive")));
    }
    Ok(())
}

/// Parses SPEAKER lines; blank lines, `#` comments and other record types
/// are skipped. Recordings are returned in order of first appearance.
pub fn parse_rttm(text: &str) -> Result<Vec<SegmentList>> {
    let mut out: Vec<SegmentList> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() || fields[0].starts_with('#') || fields[0] != "SPEAKER" {
            continue;
        }
        let err = |msg: String| Error::Rttm { line: line_no, msg };
        if fields.len() < 8 {
            return Err(err(format!("expected at least 8 fields, found {}", fields.len())));
        }
        let num = |s: &str, what: &str| {
            s.parse::<f64>()
                .map_err(|_| err(format!("{what} `{s}` is not a number")))
        };
        let onset = num(fields[3], "onset")?;
        let duration = num(fields[4], "duration")?;
        check_turn(onset, duration).map_err(|e| err(e.to_string()))?;
        let rec = fields[1];
        let idx = match out.iter().position(|s| s.recording_id == rec) {
            Some(i) => i,
            None => {
                out.push(SegmentList::new(rec));
                out.len() - 1
            }
        };
        out[idx].segments.push(Turn {
            speaker: fields[7].to_string(),
            onset,
            duration,
        });
    }
    Ok(out)
}

/// Parses text holding exactly one recording (or none, giving an empty list
/// named `default_id`).
pub fn parse_rttm_single(text: &str, default_id: &str) -> Result<SegmentList> {
    let mut lists = parse_rttm(text)?;
    match lists.len() {
        0 => Ok(SegmentList::new(default_id)),
        1 => Ok(lists.remove(0)),
        n => Err(Error::invalid(format!("expected one recording, found {n}"))),
    }
}

pub fn write_rttm(lists: &[SegmentList]) -> String {
    let mut out = String::new();
    for list in lists {
        for s in &list.segments {
            let _ = writeln!(
                out,
                "SPEAKER {} 1 {:.3} {:.3} <NA> <NA> {} <NA> <NA>",
                list.recording_id, s.onset, s.duration, s.speaker
            );
        }
    }
    out
}

pub fn read_rttm(path: impl AsRef<Path>) -> Result<Vec<SegmentList>> {
    parse_rttm(&std::fs::read_to_string(path)?)
}

pub fn save_rttm(path: impl AsRef<Path>, lists: &[SegmentList]) -> Result<()> {
    std::fs::write(path, write_rttm(lists))?;
    Ok(())
}

/// Error components in milliseconds (or frames for [`label_der`]).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Tally {
    pub missed: u64,
    pub false_alarm: u64,
    pub confusion: u64,
    pub scored: u64,
}

impl Tally {
    pub fn add(&mut self, other: &Tally) {
        self.missed += other.missed;
        self.false_alarm += other.false_alarm;
        self.confusion += other.confusion;
        self.scored += other.scored;
    }

    /// Seconds per unit is `unit`.
    pub fn breakdown(&self, unit: f64) -> Result<DerBreakdown> {
        if self.scored == 0 {
            return Err(Error::Unscoreable);
        }
        Ok(DerBreakdown {
            missed: self.missed as f64 * unit,
            false_alarm: self.false_alarm as f64 * unit,
            confusion: self.confusion as f64 * unit,
            scored_speech: self.scored as f64 * unit,
            der: (self.missed + self.false_alarm + self.confusion) as f64 / self.scored as f64,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DerBreakdown {
    pub missed: f64,
    pub false_alarm: f64,
    pub confusion: f64,
    pub scored_speech: f64,
    pub der: f64,
}

impl fmt::Display for DerBreakdown {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "DER {:.2}% (missed {:.3} s, false alarm {:.3} s, confusion {:.3} s, scored {:.3} s)",
            self.der * 100.0,
            self.missed,
            self.false_alarm,
            self.confusion,
            self.scored_speech
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoringOptions {
    pub collar: f64,
    /// When false, regions with two or more reference speakers are skipped.
    pub score_overlap: bool,
}

impl Default for ScoringOptions {
    fn default() -> Self {
        Self {
            collar: 0.25,
            score_overlap: true,
        }
    }
}

/// A stretch of `len` units with constant activity.
struct Region {
    len: u64,
    refs: Vec<usize>,
    hyps: Vec<usize>,
}

/// Maximum of `Σ weight[r][m(r)]` over injective mappings between the two
/// speaker sets.
pub fn best_mapping_weight(weight: &[Vec<u64>]) -> u64 {
    let n_ref = weight.len();
    let n_hyp = weight.first().map_or(0, |r| r.len());
    if n_ref == 0 || n_hyp == 0 {
        return 0;
    }
    // Rows must be the smaller side.
    let w: Vec<Vec<u64>> = if n_ref <= n_hyp {
        weight.to_vec()
    } else {
        (0..n_hyp).map(|h| (0..n_ref).map(|r| weight[r][h]).collect()).collect()
    };
    let (rows, cols) = (w.len(), w[0].len());
    if cols <= 8 {
        let mut used = vec![false; cols];
        exhaustive(&w, 0, &mut used)
    } else {
        let m = pathfinding::matrix::Matrix::from_fn(rows, cols, |(r, c)| w[r][c] as i64);
        pathfinding::kuhn_munkres::kuhn_munkres(&m).0 as u64
    }
}

fn exhaustive(w: &[Vec<u64>], row: usize, used: &mut [bool]) -> u64 {
    if row == w.len() {
        return 0;
    }
    let mut best = 0;
    for c in 0..used.len() {
        if !used[c] {
            used[c] = true;
            best = best.max(w[row][c] + exhaustive(w, row + 1, used));
            used[c] = false;
        }
    }
    best
}

fn score_regions(regions: &[Region], n_ref: usize, n_hyp: usize) -> Tally {
    let mut tally = Tally::default();
    let mut both = 0u64;
    let mut overlap = vec![vec![0u64; n_hyp]; n_ref];
    for r in regions {
        let (nr, nh) = (r.refs.len() as u64, r.hyps.len() as u64);
        tally.scored += nr * r.len;
        tally.missed += nr.saturating_sub(nh) * r.len;
        tally.false_alarm += nh.saturating_sub(nr) * r.len;
        both += nr.min(nh) * r.len;
        for &a in &r.refs {
            for &b in &r.hyps {
                overlap[a][b] += r.len;
            }
        }
    }
    tally.confusion = both - best_mapping_weight(&overlap);
    tally
}

fn to_ms(t: f64) -> u64 {
    (t * 1000.0).round().max(0.0) as u64
}

fn speaker_index<'a>(names: &mut Vec<&'a str>, name: &'a str) -> usize {
    match names.iter().position(|n| *n == name) {
        Some(i) => i,
        None => {
            names.push(name);
            names.len() - 1
        }
    }
}

/// Millisecond tally for one recording.
pub fn der_tally(reference: &SegmentList, hypothesis: &SegmentList, opts: &ScoringOptions) -> Tally {
    let collar = to_ms(opts.collar);
    let mut ref_names = Vec::new();
    let mut hyp_names = Vec::new();
    let refs: Vec<(usize, u64, u64)> = reference
        .segments
        .iter()
        .map(|s| (speaker_index(&mut ref_names, &s.speaker), to_ms(s.onset), to_ms(s.onset + s.duration)))
        .filter(|&(_, a, b)| b > a)
        .collect();
    let hyps: Vec<(usize, u64, u64)> = hypothesis
        .segments
        .iter()
        .map(|s| (speaker_index(&mut hyp_names, &s.speaker), to_ms(s.onset), to_ms(s.onset + s.duration)))
        .filter(|&(_, a, b)| b > a)
        .collect();

    let mut excluded: Vec<(u64, u64)> = Vec::new();
    if collar > 0 {
        for &(_, a, b) in &refs {
            for edge in [a, b] {
                excluded.push((edge.saturating_sub(collar), edge + collar));
            }
        }
    }
    let mut cuts = BTreeSet::new();
    for &(_, a, b) in refs.iter().chain(&hyps) {
        cuts.insert(a);
        cuts.insert(b);
    }
    for &(a, b) in &excluded {
        cuts.insert(a);
        cuts.insert(b);
    }
    let cuts: Vec<u64> = cuts.into_iter().collect();
    let mut regions = Vec::new();
    for w in cuts.windows(2) {
        let (a, b) = (w[0], w[1]);
        if excluded.iter().any(|&(x, y)| x <= a && b <= y) {
            continue;
        }
        let mut active_ref: Vec<usize> = refs.iter().filter(|s| s.1 <= a && b <= s.2).map(|s| s.0).collect();
        let mut active_hyp: Vec<usize> = hyps.iter().filter(|s| s.1 <= a && b <= s.2).map(|s| s.0).collect();
        active_ref.sort_unstable();
        active_ref.dedup();
        active_hyp.sort_unstable();
        active_hyp.dedup();
        if !opts.score_overlap && active_ref.len() > 1 {
            continue;
        }
        regions.push(Region {
            len: b - a,
            refs: active_ref,
            hyps: active_hyp,
        });
    }
    score_regions(&regions, ref_names.len(), hyp_names.len())
}

/// DER of one recording with the given collar (seconds).
pub fn der(reference: &SegmentList, hypothesis: &SegmentList, collar: f64) -> Result<DerBreakdown> {
    der_with(reference, hypothesis, &ScoringOptions { collar, ..Default::default() })
}

pub fn der_with(reference: &SegmentList, hypothesis: &SegmentList, opts: &ScoringOptions) -> Result<DerBreakdown> {
    if reference.recording_id != hypothesis.recording_id {
        return Err(Error::invalid(format!(
            "recording ids differ: `{}` vs `{}`",
            reference.recording_id, hypothesis.recording_id
        )));
    }
    der_tally(reference, hypothesis, opts).breakdown(1e-3)
}

/// Pools components over recordings; recordings absent from the hypothesis
/// count as fully missed.
pub fn der_corpus(references: &[SegmentList], hypotheses: &[SegmentList], opts: &ScoringOptions) -> Result<DerBreakdown> {
    let mut total = Tally::default();
    for r in references {
        let empty;
        let h = match hypotheses.iter().find(|h| h.recording_id == r.recording_id) {
            Some(h) => h,
            None => {
                empty = SegmentList::new(r.recording_id.clone());
                &empty
            }
        };
        total.add(&der_tally(r, h, opts));
    }
    total.breakdown(1e-3)
}

/// Frame-level tally: reference labels `> 0.5` and posteriors `≥ 0.5` are active.
pub fn label_tally<T: Real, U: Real>(reference: &Matrix<T>, posterior: &Matrix<U>) -> Result<Tally> {
    if reference.rows() != posterior.rows() {
        return Err(Error::invalid(format!(
            "reference has {} frames, hypothesis {}",
            reference.rows(),
            posterior.rows()
        )));
    }
    let regions: Vec<Region> = (0..reference.rows())
        .map(|t| Region {
            len: 1,
            refs: (0..reference.cols()).filter(|&s| reference.get(t, s) > T::lit(0.5)).collect(),
            hyps: (0..posterior.cols()).filter(|&s| posterior.get(t, s) >= U::lit(0.5)).collect(),
        })
        .collect();
    Ok(score_regions(&regions, reference.cols(), posterior.cols()))
}

/// Frame-level DER with collar 0.
pub fn label_der<T: Real, U: Real>(reference: &Matrix<T>, posterior: &Matrix<U>, frame_period: f64) -> Result<DerBreakdown> {
    label_tally(reference, posterior)?.breakdown(frame_period)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub model: String,
    pub bucket: String,
    pub der: f64,
}

/// Plain-text table: one row per model, one column per speaker-count bucket,
/// DER in percent.
pub fn format_report(rows: &[ReportRow]) -> String {
    let mut models: Vec<&str> = Vec::new();
    let mut buckets: Vec<&str> = Vec::new();
    for r in rows {
        if !models.contains(&r.model.as_str()) {
            models.push(&r.model);
        }
        if !buckets.contains(&r.bucket.as_str()) {
            buckets.push(&r.bucket);
        }
    }
    let cell = |m: &str, b: &str| {
        rows.iter()
            .rev()
            .find(|r| r.model == m && r.bucket == b)
            .map_or_else(|| "-".to_string(), |r| format!("{:.2}", r.der * 100.0))
    };
    let first = models.iter().map(|m| m.len()).max().unwrap_or(0).max("model".len());
    let widths: Vec<usize> = buckets
        .iter()
        .map(|b| models.iter().map(|m| cell(m, b).len()).max().unwrap_or(1).max(b.len()))
        .collect();
    let mut out = format!("{:<first$}", "model");
    for (b, w) in buckets.iter().zip(&widths) {
        let _ = write!(out, "  {b:>w$}");
    }
    out.push('\n');
    for m in &models {
        let _ = write!(out, "{m:<first$}");
        for (b, w) in buckets.iter().zip(&widths) {
            let _ = write!(out, "  {:>w$}", cell(m, b));
        }
        out.push('\n');
    }
    out
}
