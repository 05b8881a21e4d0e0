//! Score CSV: `sample_id,is_member,method,t,p,score,queries`.
//!
//! Discrete times are written as integers and continuous ones always carry
//! a decimal point, so the two never collide on re-read. Scores use 17
//! significant digits, which round-trips every f64.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::attacks::{AttackScore, MethodKind};
use crate::error::{Error, Result};
use crate::schedule::Time;

pub const SCORE_HEADER: &str = "sample_id,is_member,method,t,p,score,queries";

pub fn format_time(t: Time) -> String {
    match t {
        Time::Step(t) => t.to_string(),
        Time::Continuous(t) => format!("{t:?}"),
    }
}

pub fn parse_time(s: &str) -> Result<Time> {
    if s.contains(['.', 'e', 'E']) {
        s.parse::<f64>()
            .map(Time::Continuous)
            .map_err(|e| Error::invalid(format!("bad time `{s}`: {e}")))
    } else {
        s.parse::<usize>()
            .map(Time::Step)
            .map_err(|e| Error::invalid(format!("bad time `{s}`: {e}")))
    }
}

/// Canonical row order: by sample id, then method.
pub fn sort_scores(scores: &mut [AttackScore]) {
    scores.sort_by(|a, b| {
        (a.sample_id, a.method)
            .cmp(&(b.sample_id, b.method))
            .then(a.p.total_cmp(&b.p))
    });
}

pub fn scores_csv(scores: &[AttackScore]) -> String {
    let mut out = String::from(SCORE_HEADER);
    out.push('\n');
    for s in scores {
        let _ = writeln!(
            out,
            "{},{},{},{},{:?},{:.16e},{}",
            s.sample_id,
            u8::from(s.is_member),
            s.method.tag(),
            format_time(s.t),
            s.p,
            s.score,
            s.queries
        );
    }
    out
}

/// Writes rows in canonical order.
pub fn write_scores(scores: &[AttackScore], path: &Path) -> Result<()> {
    let mut sorted = scores.to_vec();
    sort_scores(&mut sorted);
    fs::write(path, scores_csv(&sorted)).map_err(|e| Error::io(path, e))
}

pub fn read_scores(path: &Path) -> Result<Vec<AttackScore>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(SCORE_HEADER) {
        return Err(Error::format(path, "header", format!("expected `{SCORE_HEADER}`")));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let row = i + 1;
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 7 {
                return Err(Error::format(path, format!("row {row}"), "expected 7 columns"));
            }
            let bad = |name: &str, e: String| Error::format(path, format!("row {row} {name}"), e);
            let is_member = match cols[1] {
                "1" => true,
                "0" => false,
                other => return Err(bad("is_member", format!("expected 0 or 1, got `{other}`"))),
            };
            Ok(AttackScore {
                sample_id: cols[0].parse().map_err(|e| bad("sample_id", format!("{e}")))?,
                is_member,
                method: cols[2]
                    .parse::<MethodKind>()
                    .map_err(|e| bad("method", e.to_string()))?,
                t: parse_time(cols[3]).map_err(|e| bad("t", e.to_string()))?,
                p: cols[4].parse().map_err(|e| bad("p", format!("{e}")))?,
                score: cols[5].parse().map_err(|e| bad("score", format!("{e}")))?,
                queries: cols[6].parse().map_err(|e| bad("queries", format!("{e}")))?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(id: usize, method: MethodKind, t: Time, score: f64) -> AttackScore {
        AttackScore {
            sample_id: id,
            is_member: id.is_multiple_of(2),
            method,
            t,
            p: 4.0,
            score,
            queries: 2,
        }
    }

    #[test]
    fn round_trip_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        let rows = vec![
            row(3, MethodKind::Pia, Time::Step(20), 0.1 + 0.2),
            row(1, MethodKind::PiaSde, Time::Continuous(1.0), 1e-300),
            row(1, MethodKind::NaiveAttack, Time::Step(20), 123456.789),
        ];
        write_scores(&rows, &p).unwrap();
        let back = read_scores(&p).unwrap();
        let mut sorted = rows.clone();
        sort_scores(&mut sorted);
        assert_eq!(back, sorted);
        assert_eq!(back[0].method, MethodKind::NaiveAttack);
        assert_eq!(back[1].t, Time::Continuous(1.0));
    }

    #[test]
    fn bad_rows_name_the_field() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        fs::write(&p, format!("{SCORE_HEADER}\n0,1,PIA,20,4.0,abc,2\n")).unwrap();
        let err = read_scores(&p).unwrap_err().to_string();
        assert!(err.contains("score"), "{err}");
        fs::write(&p, "nope\n").unwrap();
        assert!(read_scores(&p).is_err());
    }
}
