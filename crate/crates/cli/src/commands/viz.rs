use std::path::PathBuf;

use anyhow::{anyhow, Context as _};
use bweda::evalkit::{read_rttm, SegmentList};

use crate::error::{usage, CliResult};

#[derive(clap::Args)]
pub struct Args {
    #[arg(long)]
    rttm: PathBuf,
    /// Recording to draw; defaults to the first one in the file.
    #[arg(long)]
    recording: Option<String>,
}

/// One row per speaker and one column per second: `#` when the speaker talks
/// for at least half of the second, `+` for less, `.` for silence.
pub fn render(list: &SegmentList) -> String {
    let end = list
        .segments
        .iter()
        .map(|t| t.onset + t.duration)
        .fold(0.0f64, f64::max);
    let cols = end.ceil() as usize;
    let speakers = list.speakers();
    let width = speakers.iter().map(|s| s.len()).max().unwrap_or(0).max(2);

    let mut out = format!("{:width$} ", "");
    for c in 0..cols {
        out.push(if c % 10 == 0 { '|' } else { ' ' });
    }
    out.push('\n');
    for spk in speakers {
        let mut active = vec![0.0f64; cols];
        for t in list.segments.iter().filter(|t| t.speaker == spk) {
            let (a, b) = (t.onset, t.onset + t.duration);
            for (c, acc) in active.iter_mut().enumerate().skip(a.floor() as usize) {
                let (lo, hi) = (c as f64, c as f64 + 1.0);
                if lo >= b {
                    break;
                }
                *acc += (hi.min(b) - lo.max(a)).max(0.0);
            }
        }
        out.push_str(&format!("{spk:width$} "));
        for v in active {
            out.push(match v {
                v if v >= 0.5 => '#',
                v if v > 1e-9 => '+',
                _ => '.',
            });
        }
        out.push('\n');
    }
    out
}

pub fn run(a: Args) -> CliResult {
    let lists = read_rttm(&a.rttm).with_context(|| format!("reading {}", a.rttm.display()))?;
    let list = match &a.recording {
        Some(id) if id.is_empty() => return Err(usage("--recording must not be empty")),
        Some(id) => lists.iter().find(|l| &l.recording_id == id),
        None => lists.first(),
    };
    let Some(list) = list else {
        return Err(anyhow!("no matching recording in {}", a.rttm.display()).into());
    };
    println!("{}", list.recording_id);
    print!("{}", render(list));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_column_per_second() {
        let mut l = SegmentList::new("r");
        l.push("A", 0.0, 2.4).unwrap();
        l.push("B", 2.2, 0.2).unwrap();
        let s = render(&l);
        let rows: Vec<&str> = s.lines().collect();
        assert_eq!(rows, ["   |  ", "A  ##+", "B  ..+"]);
    }
}
