use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EvalError, EvalReport, Result, SuperficialVerdict};

pub const RECORDS_FILE: &str = "report.jsonl";
pub const SCORES_FILE: &str = "scores.csv";
pub const CSV_HEADER: [&str; 9] = [
    "method", "UA", "UA‡", "TA", "SA", "MA_f", "MA_t", "MA", "Score",
];

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum Record {
    Report { method: String, report: EvalReport },
    Verdict(SuperficialVerdict),
}

/// One labelled row of a score table.
#[derive(Clone, Copy, Debug)]
pub struct ScoreRow<'a> {
    pub method: &'a str,
    pub report: &'a EvalReport,
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.2}")).unwrap_or_default()
}

/// CSV score table with a fixed column order; values rounded to two
/// decimals, absent metrics left blank.
pub fn write_score_table(rows: &[ScoreRow<'_>], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(CSV_HEADER)?;
    for row in rows {
        let r = row.report;
        let mut rec = vec![row.method.to_string()];
        rec.extend([r.ua, r.ua_ext, r.ta, r.sa, r.ma_f, r.ma_t, r.ma, r.score].map(cell));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes the full-precision record file and a one-row score table into
/// `dir`.
pub fn emit_report(
    method: &str,
    report: &EvalReport,
    verdicts: &[SuperficialVerdict],
    dir: &Path,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = BufWriter::new(fs::File::create(dir.join(RECORDS_FILE))?);
    let mut line = |r: &Record| -> Result<()> {
        serde_json::to_writer(&mut w, r).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
        Ok(())
    };
    line(&Record::Report {
        method: method.to_string(),
        report: report.clone(),
    })?;
    for v in verdicts {
        line(&Record::Verdict(v.clone()))?;
    }
    w.flush()?;
    write_score_table(&[ScoreRow { method, report }], &dir.join(SCORES_FILE))
}

/// Reads back what [`emit_report`] wrote.
pub fn read_report(dir: &Path) -> Result<(String, EvalReport, Vec<SuperficialVerdict>)> {
    let path = dir.join(RECORDS_FILE);
    let shown = path.display().to_string();
    let mut head = None;
    let mut verdicts = Vec::new();
    for (i, line) in BufReader::new(fs::File::open(&path)?).lines().enumerate() {
        let record: Record = serde_json::from_str(&line?).map_err(|e| EvalError::Parse {
            path: shown.clone(),
            line: i + 1,
            detail: e.to_string(),
        })?;
        match record {
            Record::Report { method, report } if head.is_none() => head = Some((method, report)),
            Record::Report { .. } => {
                return Err(EvalError::Parse {
                    path: shown,
                    line: i + 1,
                    detail: "second report record".into(),
                })
            }
            Record::Verdict(v) => verdicts.push(v),
        }
    }
    let (method, report) = head.ok_or(EvalError::Parse {
        path: shown,
        line: 1,
        detail: "missing report record".into(),
    })?;
    Ok((method, report, verdicts))
}
