use std::collections::BTreeMap;
use std::path::PathBuf;

use anyhow::{anyhow, Context as _};
use bweda::evalkit::{der_tally, read_rttm, ScoringOptions, SegmentList, Tally};

use super::fan_out;
use crate::error::{usage, CliResult};
use crate::settings::Settings;

#[derive(clap::Args)]
pub struct Args {
    /// Reference RTTM; repeat or comma-separate for several files.
    #[arg(long = "ref", value_delimiter = ',')]
    reference: Vec<String>,
    /// Hypothesis RTTM; repeat or comma-separate for several files.
    #[arg(long, value_delimiter = ',')]
    hyp: Vec<String>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// No-score collar in seconds around every reference boundary.
    #[arg(long)]
    collar: Option<f64>,
    /// Skip regions where two or more reference speakers overlap.
    #[arg(long)]
    no_overlap: bool,
}

fn read_all(paths: &[PathBuf]) -> CliResult<BTreeMap<String, SegmentList>> {
    let lists = fan_out(paths, |p| Ok(read_rttm(p).with_context(|| format!("reading {}", p.display()))?))?;
    let mut by_id: BTreeMap<String, SegmentList> = BTreeMap::new();
    for list in lists.into_iter().flatten() {
        by_id
            .entry(list.recording_id.clone())
            .or_insert_with(|| SegmentList::new(list.recording_id.clone()))
            .segments
            .extend(list.segments);
    }
    Ok(by_id)
}

pub fn run(a: Args) -> CliResult {
    let mut s = Settings::load(a.config.as_deref())?;
    let refs: Vec<PathBuf> = s.list("ref", a.reference, Vec::new())?.into_iter().map(PathBuf::from).collect();
    let hyps: Vec<PathBuf> = s.list("hyp", a.hyp, Vec::new())?.into_iter().map(PathBuf::from).collect();
    let d = ScoringOptions::default();
    let opts = ScoringOptions {
        collar: s.get("collar", a.collar, d.collar)?,
        score_overlap: !s.switch("no-overlap", a.no_overlap)?,
    };
    s.finish()?;
    if refs.is_empty() || hyps.is_empty() {
        return Err(usage("both --ref and --hyp are required"));
    }
    if !(opts.collar >= 0.0) {
        return Err(usage("--collar must be non-negative"));
    }

    let reference = read_all(&refs)?;
    let hypothesis = read_all(&hyps)?;
    for id in hypothesis.keys().filter(|id| !reference.contains_key(*id)) {
        eprintln!("warning: hypothesis recording {id} has no reference; ignored");
    }
    let pairs: Vec<(&SegmentList, Option<&SegmentList>)> =
        reference.values().map(|r| (r, hypothesis.get(&r.recording_id))).collect();
    let tallies = fan_out(&pairs, |&(r, h)| {
        let empty = SegmentList::new(r.recording_id.clone());
        Ok(der_tally(r, h.unwrap_or(&empty), &opts))
    })?;

    println!("{:<24} {:>10} {:>10} {:>10} {:>10} {:>8}", "recording", "scored_s", "missed_s", "fa_s", "conf_s", "DER%");
    let row = |name: &str, t: &Tally| {
        let der = match t.scored {
            0 => "-".to_string(),
            n => format!("{:.2}", 100.0 * (t.missed + t.false_alarm + t.confusion) as f64 / n as f64),
        };
        println!(
            "{:<24} {:>10.3} {:>10.3} {:>10.3} {:>10.3} {:>8}",
            name,
            t.scored as f64 * 1e-3,
            t.missed as f64 * 1e-3,
            t.false_alarm as f64 * 1e-3,
            t.confusion as f64 * 1e-3,
            der
        );
    };
    let mut total = Tally::default();
    for (&(r, _), t) in pairs.iter().zip(&tallies) {
        row(&r.recording_id, t);
        total.add(t);
    }
    row("TOTAL", &total);
    let b = total
        .breakdown(1e-3)
        .map_err(|_| anyhow!("no scoreable reference speech"))?;
    println!("{b}");
    Ok(())
}
