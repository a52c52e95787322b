use std::io::{BufRead, Write};

use super::{Click, QuerySession, SERP_SIZE};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ParseMode {
    /// Skip malformed records and count them.
    #[default]
    Skip,
    /// Stop at the first malformed record.
    FailFast,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SkippedRecord {
    pub line: usize,
    pub message: String,
}

#[derive(Clone, Debug, Default)]
pub struct ParseOutcome {
    pub sessions: Vec<QuerySession>,
    /// Clicks on documents that are not on the result list of their query.
    pub dropped_clicks: u64,
    pub skipped: Vec<SkippedRecord>,
}

enum Record {
    Query {
        session_id: u64,
        time: u64,
        query_id: u64,
        region_id: u64,
        results: Vec<u64>,
    },
    Click {
        session_id: u64,
        time: u64,
        url: u64,
    },
}

fn int(field: &str, what: &str) -> std::result::Result<u64, String> {
    field
        .parse::<u64>()
        .map_err(|_| format!("{what} is not a non-negative integer: {field:?}"))
}

fn parse_record(line: &str) -> std::result::Result<Record, String> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() < 3 {
        return Err(format!("expected at least 3 fields, found {}", fields.len()));
    }
    let session_id = int(fields[0], "SessionID")?;
    let time = int(fields[1], "TimePassed")?;
    match fields[2] {
        "Q" => {
            if fields.len() != 6 {
                return Err(format!("query record needs 6 fields, found {}", fields.len()));
            }
            let query_id = int(fields[3], "QueryID")?;
            let region_id = int(fields[4], "RegionID")?;
            let results = fields[5]
                .split(' ')
                .map(|u| int(u, "URL"))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            if results.len() != SERP_SIZE {
                return Err(format!("expected {SERP_SIZE} results, found {}", results.len()));
            }
            for (i, r) in results.iter().enumerate() {
                if results[..i].contains(r) {
                    return Err(format!("duplicate result URL {r}"));
                }
            }
            Ok(Record::Query {
                session_id,
                time,
                query_id,
                region_id,
                results,
            })
        }
        "C" => {
            if fields.len() != 4 {
                return Err(format!("click record needs 4 fields, found {}", fields.len()));
            }
            Ok(Record::Click {
                session_id,
                time,
                url: int(fields[3], "URLID")?,
            })
        }
        other => Err(format!("unknown record type {other:?}")),
    }
}

/// Parses a session log. Clicks attach to the most recent query record of their session.
pub fn parse_log<R: BufRead>(reader: R, mode: ParseMode) -> Result<ParseOutcome> {
    let mut out = ParseOutcome::default();
    // Index into `out.sessions` of the query that clicks currently attach to.
    let mut current: Option<(u64, Option<usize>)> = None;

    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let failure = match parse_record(&line) {
            Ok(Record::Query {
                session_id,
                time,
                query_id,
                region_id,
                results,
            }) => {
                out.sessions.push(QuerySession {
                    session_id,
                    query_time: time,
                    query_id,
                    region_id,
                    results,
                    clicks: Vec::new(),
                });
                current = Some((session_id, Some(out.sessions.len() - 1)));
                None
            }
            Ok(Record::Click { session_id, time, url }) => match current {
                Some((sid, Some(i))) if sid == session_id => {
                    let session = &mut out.sessions[i];
                    let last = session.clicks.last().map_or(session.query_time, |c| c.time_passed);
                    if time < last {
                        Some(format!("click at time {time} precedes previous record at {last}"))
                    } else {
                        match session.results.iter().position(|&r| r == url) {
                            Some(p) => {
                                session.clicks.push(Click {
                                    time_passed: time,
                                    position: (p + 1) as u8,
                                });
                                None
                            }
                            None => {
                                out.dropped_clicks += 1;
                                None
                            }
                        }
                    }
                }
                _ => Some(format!("click in session {session_id} has no preceding valid query")),
            },
            Err(message) => {
                // A broken query record must not let its clicks leak onto an earlier query.
                if let Some(sid) = line.split('\t').next().and_then(|f| f.parse::<u64>().ok()) {
                    if line.split('\t').nth(2) == Some("Q") {
                        current = Some((sid, None));
                    }
                }
                Some(message)
            }
        };
        if let Some(message) = failure {
            match mode {
                ParseMode::FailFast => return Err(Error::parse(line_no, message)),
                ParseMode::Skip => out.skipped.push(SkippedRecord { line: line_no, message }),
            }
        }
    }
    Ok(out)
}

pub fn parse_log_str(text: &str, mode: ParseMode) -> Result<ParseOutcome> {
    parse_log(text.as_bytes(), mode)
}

/// Canonical serializer: one query record per session followed by its click records.
pub fn write_log<W: Write>(mut w: W, sessions: &[QuerySession]) -> Result<()> {
    for s in sessions {
        write!(
            w,
            "{}\t{}\tQ\t{}\t{}\t",
            s.session_id, s.query_time, s.query_id, s.region_id
        )?;
        for (i, r) in s.results.iter().enumerate() {
            if i > 0 {
                w.write_all(b" ")?;
            }
            write!(w, "{r}")?;
        }
        w.write_all(b"\n")?;
        for c in &s.clicks {
            let url = s.results[c.position as usize - 1];
            writeln!(w, "{}\t{}\tC\t{url}", s.session_id, c.time_passed)?;
        }
    }
    Ok(())
}

pub fn write_log_string(sessions: &[QuerySession]) -> String {
    let mut buf = Vec::new();
    write_log(&mut buf, sessions).expect("writing to a Vec cannot fail");
    String::from_utf8(buf).expect("log is ASCII")
}
