//! Tab-separated text files: labels, training logs, rankings and reports,
//! plus the `key = value` configuration format.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ames_core::retrieval::RankedList;
use ames_core::synth::Split;
use ames_core::training::LogRecord;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const LABELS_HEADER: &str = "id\tclass\tsplit";
pub const LOG_HEADER: &str = "step\tepoch\tlr\tloss_bce\tloss_dis\tlen_x\tlen_q";
pub const RANKING_HEADER: &str = "query\trank\tdb\tscore";
pub const REPORT_HEADER: &str = "dataset\tmetric\tvalue\tconfig_hash";

/// One image of a labels file. `class` is `None` for distractors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Label {
    pub id: u64,
    pub class: Option<u32>,
    pub split: Split,
}

fn field<T: std::str::FromStr>(s: Option<&str>, what: &str, line: usize) -> Result<T> {
    s.and_then(|v| v.trim().parse().ok()).ok_or_else(|| Error::Format(format!("line {line}: bad {what}")))
}

fn data_lines<'a>(text: &'a str, header: &str) -> Result<impl Iterator<Item = (usize, &'a str)>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, h)) if h == header => Ok(lines.map(|(i, l)| (i + 1, l))),
        _ => Err(Error::Format(format!("expected header {header:?}"))),
    }
}

pub fn format_labels(labels: &[Label]) -> String {
    let mut out = format!("{LABELS_HEADER}\n");
    for l in labels {
        let class = l.class.map_or_else(|| "-".to_string(), |c| c.to_string());
        writeln!(out, "{}\t{class}\t{}", l.id, l.split.name()).expect("string write");
    }
    out
}

pub fn parse_labels(text: &str) -> Result<Vec<Label>> {
    data_lines(text, LABELS_HEADER)?
        .map(|(n, line)| {
            let mut f = line.split('\t');
            let id = field(f.next(), "id", n)?;
            let class = match f.next() {
                Some("-") => None,
                c => Some(field(c, "class", n)?),
            };
            let split = Split::parse(f.next().unwrap_or("").trim()).map_err(|_| Error::Format(format!("line {n}: bad split")))?;
            Ok(Label { id, class, split })
        })
        .collect()
}

pub fn format_log(log: &[LogRecord]) -> String {
    let mut out = format!("{LOG_HEADER}\n");
    for r in log {
        writeln!(out, "{}\t{}\t{}\t{}\t{}\t{}\t{}", r.step, r.epoch, r.lr, r.loss_bce, r.loss_dis, r.len_x, r.len_q).expect("string write");
    }
    out
}

pub fn parse_log(text: &str) -> Result<Vec<LogRecord>> {
    data_lines(text, LOG_HEADER)?
        .map(|(n, line)| {
            let mut f = line.split('\t');
            Ok(LogRecord {
                step: field(f.next(), "step", n)?,
                epoch: field(f.next(), "epoch", n)?,
                lr: field(f.next(), "lr", n)?,
                loss_bce: field(f.next(), "loss_bce", n)?,
                loss_dis: field(f.next(), "loss_dis", n)?,
                len_x: field(f.next(), "len_x", n)?,
                len_q: field(f.next(), "len_q", n)?,
            })
        })
        .collect()
}

/// One line per (query, rank) with 1-based ranks.
pub fn format_rankings(lists: &[RankedList]) -> String {
    let mut out = format!("{RANKING_HEADER}\n");
    for l in lists {
        for (k, (id, s)) in l.entries.iter().enumerate() {
            writeln!(out, "{}\t{}\t{id}\t{s}", l.query, k + 1).expect("string write");
        }
    }
    out
}

/// Compact form: the query id, a tab, then the ranked ids separated by spaces.
pub fn format_compact(lists: &[RankedList]) -> String {
    let mut out = String::new();
    for l in lists {
        let ids: Vec<String> = l.entries.iter().map(|e| e.0.to_string()).collect();
        writeln!(out, "{}\t{}", l.query, ids.join(" ")).expect("string write");
    }
    out
}

/// Ranked ids per query, in file order, from either ranking form.
pub fn parse_rankings(text: &str) -> Result<Vec<(u64, Vec<u64>)>> {
    let mut out: Vec<(u64, Vec<u64>)> = Vec::new();
    if text.lines().next() == Some(RANKING_HEADER) {
        for (n, line) in data_lines(text, RANKING_HEADER)? {
            let mut f = line.split('\t');
            let q: u64 = field(f.next(), "query", n)?;
            let rank: usize = field(f.next(), "rank", n)?;
            let id: u64 = field(f.next(), "db id", n)?;
            match out.last_mut() {
                Some((lq, ids)) if *lq == q => {
                    if rank != ids.len() + 1 {
                        return Err(Error::Format(format!("line {n}: rank {rank} out of sequence")));
                    }
                    ids.push(id)
                }
                _ if rank == 1 => out.push((q, vec![id])),
                _ => return Err(Error::Format(format!("line {n}: ranking must start at rank 1"))),
            }
        }
        return Ok(out);
    }
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let (q, ids) = line.split_once('\t').unwrap_or((line, ""));
        let q = field(Some(q), "query", n + 1)?;
        let ids = ids.split_whitespace().map(|v| field(Some(v), "db id", n + 1)).collect::<Result<_>>()?;
        out.push((q, ids));
    }
    Ok(out)
}

/// One evaluation result.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub dataset: String,
    pub metric: String,
    pub value: f64,
    pub config_hash: String,
}

pub fn format_report(rows: &[ReportRow]) -> String {
    let mut out = format!("{REPORT_HEADER}\n");
    for r in rows {
        writeln!(out, "{}\t{}\t{}\t{}", r.dataset, r.metric, r.value, r.config_hash).expect("string write");
    }
    out
}

/// Ordered `key = value` settings.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KeyValues(pub BTreeMap<String, String>);

impl KeyValues {
    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Format(format!("config line {}: expected key = value", n + 1)))?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::Format(format!("config line {}: empty key", n + 1)));
            }
            if map.insert(k.to_string(), v.trim().to_string()).is_some() {
                return Err(Error::Format(format!("config line {}: duplicate key {k}", n + 1)));
            }
        }
        Ok(Self(map))
    }

    pub fn render(&self) -> String {
        self.0.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// First 16 hex digits of the SHA-256 of the rendered settings.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.render().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}
