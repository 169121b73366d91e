//! File formats: completion and score records (one JSON object per line),
//! gold labels (CSV, one column per class) and training logs (CSV).
//!
//! Class names in every file are canonical names, never numeric ids.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::metrics::UncertainPolicy;
use crate::ontology::{ClassId, LabelSet};
use crate::reward::RewardBreakdown;
use crate::toy::{TrainLog, TrainRecord};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("{path}")]
    Io { path: String, source: std::io::Error },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("duplicate id {id:?} on lines {first} and {second}")]
    DuplicateId { id: String, first: usize, second: usize },
    #[error("gold CSV has no case-id column (expected `id` or `case_id`)")]
    MissingIdColumn,
    #[error("gold CSV has no known class column")]
    NoClassColumns,
    #[error("gold CSV row {row}, column {column:?}: cannot parse {value:?}")]
    Cell { row: usize, column: String, value: String },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io { path: path.display().to_string(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReadMode {
    /// The first malformed or duplicate record aborts the read.
    #[default]
    Strict,
    /// Bad records are skipped and reported as warnings.
    Lenient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompletionRecord {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<LabelSet>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<serde_json::Map<String, serde_json::Value>>,
}

/// Records plus the line each came from.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    pub records: Vec<CompletionRecord>,
    pub lines: Vec<usize>,
    pub warnings: Vec<String>,
}

pub fn read_completions(path: impl AsRef<Path>, mode: ReadMode) -> Result<Corpus, CorpusError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(io_err(path))?;
    read_completions_from(BufReader::new(file), mode).map_err(|e| match e {
        CorpusError::Io { source, .. } => CorpusError::Io { path: path.display().to_string(), source },
        other => other,
    })
}

/// Single-pass reader over newline-delimited records. Blank lines are ignored.
pub fn read_completions_from(reader: impl BufRead, mode: ReadMode) -> Result<Corpus, CorpusError> {
    let mut corpus = Corpus::default();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (i, line) in reader.lines().enumerate() {
        let n = i + 1;
        let line = line.map_err(|source| CorpusError::Io { path: "<input>".into(), source })?;
        if line.trim().is_empty() {
            continue;
        }
        let problem = match serde_json::from_str::<CompletionRecord>(&line) {
            Err(e) => Err(CorpusError::Malformed { line: n, message: e.to_string() }),
            Ok(r) if r.id.is_empty() => Err(CorpusError::Malformed { line: n, message: "empty id".into() }),
            Ok(r) => match seen.get(&r.id) {
                Some(&first) => Err(CorpusError::DuplicateId { id: r.id, first, second: n }),
                None => Ok(r),
            },
        };
        match (problem, mode) {
            (Ok(r), _) => {
                seen.insert(r.id.clone(), n);
                corpus.records.push(r);
                corpus.lines.push(n);
            }
            (Err(e), ReadMode::Strict) => return Err(e),
            (Err(e), ReadMode::Lenient) => corpus.warnings.push(format!("skipped: {e}")),
        }
    }
    if corpus.records.is_empty() && corpus.warnings.is_empty() {
        corpus.warnings.push("no records in input".to_string());
    }
    Ok(corpus)
}

pub fn write_completions(records: &[CompletionRecord], path: impl AsRef<Path>) -> Result<(), CorpusError> {
    write_json_lines(records, path.as_ref())
}

fn write_json_lines<T: Serialize>(records: &[T], path: &Path) -> Result<(), CorpusError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r).expect("records serialize");
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Gold label sets keyed by case id, plus file order and warnings.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GoldTable {
    pub labels: HashMap<String, LabelSet>,
    pub order: Vec<String>,
    pub warnings: Vec<String>,
}

pub fn read_gold_csv(path: impl AsRef<Path>, policy: UncertainPolicy) -> Result<GoldTable, CorpusError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(io_err(path))?;
    read_gold_csv_from(file, policy)
}

pub fn read_gold_csv_from(reader: impl Read, policy: UncertainPolicy) -> Result<GoldTable, CorpusError> {
    let mut rdr = csv::ReaderBuilder::new().flexible(false).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let id_col = headers
        .iter()
        .position(|h| matches!(h.trim().to_ascii_lowercase().as_str(), "id" | "case_id"))
        .ok_or(CorpusError::MissingIdColumn)?;
    let mut table = GoldTable::default();
    let mut columns: Vec<(usize, ClassId)> = Vec::new();
    for (i, h) in headers.iter().enumerate() {
        if i == id_col {
            continue;
        }
        match ClassId::from_name(h) {
            Some(c) => columns.push((i, c)),
            None => table.warnings.push(format!("ignoring unknown column {h:?}")),
        }
    }
    if columns.is_empty() {
        return Err(CorpusError::NoClassColumns);
    }

    for (r, row) in rdr.records().enumerate() {
        let row = row?;
        let row_no = r + 2;
        let id = row[id_col].trim().to_string();
        let mut set = LabelSet::empty();
        for &(col, class) in &columns {
            let raw = row[col].trim();
            let value = if raw.is_empty() {
                0
            } else {
                match raw.parse::<f64>() {
                    Ok(v) if v == 1.0 => 1,
                    Ok(v) if v == 0.0 => 0,
                    Ok(v) if v == -1.0 => -1,
                    _ => {
                        return Err(CorpusError::Cell {
                            row: row_no,
                            column: headers[col].to_string(),
                            value: raw.to_string(),
                        })
                    }
                }
            };
            let present = match value {
                1 => true,
                -1 => policy == UncertainPolicy::ToPositive,
                _ => false,
            };
            if present {
                set.insert(class);
            }
        }
        if table.labels.insert(id.clone(), set).is_some() {
            return Err(CorpusError::Malformed { line: row_no, message: format!("duplicate case id {id:?}") });
        }
        table.order.push(id);
    }
    Ok(table)
}

/// Writes a gold CSV with an `id` column and one column per class.
pub fn write_gold_csv(rows: &[(String, LabelSet)], writer: impl Write) -> Result<(), CorpusError> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["id"];
    header.extend(ClassId::all().map(ClassId::name));
    w.write_record(&header)?;
    for (id, set) in rows {
        let mut rec = vec![id.clone()];
        rec.extend(ClassId::all().map(|c| if set.contains(c) { "1" } else { "0" }.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|source| CorpusError::Io { path: "<output>".into(), source })
}

/// One scored completion as written to score files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoredRecord {
    pub id: String,
    pub reward: f64,
    pub r_cor: f64,
    pub r_fmt: u8,
    pub r_len: f64,
    pub format_ok: bool,
    pub predicted: LabelSet,
    pub token_count: usize,
    pub token_scheme: String,
    pub config_hash: String,
    pub diagnostics: Vec<String>,
}

impl ScoredRecord {
    pub fn new(id: impl Into<String>, b: RewardBreakdown, config_hash: impl Into<String>) -> Self {
        ScoredRecord {
            id: id.into(),
            reward: b.reward,
            r_cor: b.r_cor,
            r_fmt: b.r_fmt,
            r_len: b.r_len,
            format_ok: b.format_ok,
            predicted: b.predicted,
            token_count: b.token_count,
            token_scheme: b.token_scheme,
            config_hash: config_hash.into(),
            diagnostics: b.diagnostics,
        }
    }
}

pub fn write_scored(records: &[ScoredRecord], path: impl AsRef<Path>) -> Result<(), CorpusError> {
    write_json_lines(records, path.as_ref())
}

pub fn read_scored(path: impl AsRef<Path>) -> Result<Vec<ScoredRecord>, CorpusError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| CorpusError::Malformed { line: i + 1, message: e.to_string() })?,
        );
    }
    Ok(out)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// CSV with a `# seed: N` comment line, a header
/// `step,loss,sampled_reward,mean_reward,p_correct:<prompt>...`, and one row
/// per record. Empty cells mean "not applicable" (step 0).
pub fn write_trainlog_to(log: &TrainLog, writer: impl Write) -> Result<(), CorpusError> {
    let mut writer = writer;
    writeln!(writer, "# seed: {}", log.seed).map_err(|source| CorpusError::Io { path: "<output>".into(), source })?;
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = ["step", "loss", "sampled_reward", "mean_reward"].map(String::from).to_vec();
    header.extend(log.prompt_ids.iter().map(|p| format!("p_correct:{p}")));
    w.write_record(&header)?;
    for r in &log.records {
        let mut row = vec![r.step.to_string(), fmt_opt(r.loss), fmt_opt(r.sampled_reward), r.mean_reward.to_string()];
        row.extend(r.p_correct.iter().map(f64::to_string));
        w.write_record(&row)?;
    }
    w.flush().map_err(|source| CorpusError::Io { path: "<output>".into(), source })
}

pub fn write_trainlog(log: &TrainLog, path: impl AsRef<Path>) -> Result<(), CorpusError> {
    let path = path.as_ref();
    let file = File::create(path).map_err(io_err(path))?;
    write_trainlog_to(log, BufWriter::new(file))
}

pub fn read_trainlog(path: impl AsRef<Path>) -> Result<TrainLog, CorpusError> {
    let path = path.as_ref();
    let mut text = String::new();
    File::open(path).map_err(io_err(path))?.read_to_string(&mut text).map_err(io_err(path))?;
    let (first, rest) = text.split_once('\n').unwrap_or((&text, ""));
    let seed = first
        .strip_prefix("# seed: ")
        .and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| CorpusError::Malformed { line: 1, message: "expected `# seed: N`".into() })?;
    let mut rdr = csv::Reader::from_reader(rest.as_bytes());
    let headers = rdr.headers()?.clone();
    let prompt_ids: Vec<String> = headers
        .iter()
        .skip(4)
        .map(|h| h.strip_prefix("p_correct:").unwrap_or(h).to_string())
        .collect();
    let bad = |line: usize, what: &str| CorpusError::Malformed { line, message: format!("bad {what}") };
    let mut records = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row?;
        let line = i + 3;
        let num = |k: usize| row[k].parse::<f64>().map_err(|_| bad(line, &headers[k]));
        let opt = |k: usize| if row[k].is_empty() { Ok(None) } else { num(k).map(Some) };
        records.push(TrainRecord {
            step: row[0].parse().map_err(|_| bad(line, "step"))?,
            loss: opt(1)?,
            sampled_reward: opt(2)?,
            mean_reward: num(3)?,
            p_correct: (4..row.len()).map(num).collect::<Result<_, _>>()?,
        });
    }
    Ok(TrainLog { seed, prompt_ids, records })
}
