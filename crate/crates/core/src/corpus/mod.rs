//! Examination-report records: ingest, cleaning, deduplication, stratified
//! splitting and prompt rendering.

mod synth;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::error::{io_at, Error, Result};

pub use synth::{diagnosis_vocabulary, synthesize, synthesize_counts};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "OSA")]
    Osa,
    #[serde(rename = "CFP")]
    Cfp,
    #[serde(rename = "OCT")]
    Oct,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Osa, Modality::Cfp, Modality::Oct];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Osa => "OSA",
            Modality::Cfp => "CFP",
            Modality::Oct => "OCT",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "OSA" => Ok(Modality::Osa),
            "CFP" => Ok(Modality::Cfp),
            "OCT" => Ok(Modality::Oct),
            other => Err(Error::UnknownModality(other.to_string())),
        }
    }
}

/// Exclusion flags carried by raw reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flag {
    PossibleMisdiagnosis,
    NeedsFurtherExam,
}

impl FromStr for Flag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "possible_misdiagnosis" => Ok(Flag::PossibleMisdiagnosis),
            "needs_further_exam" => Ok(Flag::NeedsFurtherExam),
            other => Err(Error::Data(format!("unknown flag {other:?}"))),
        }
    }
}

/// One examination report. There are deliberately no patient-identifier
/// fields; any present in the input are discarded at ingest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportRecord {
    pub id: String,
    pub modality: Modality,
    pub findings: String,
    pub diagnosis: String,
    #[serde(default)]
    pub flags: BTreeSet<Flag>,
}

#[derive(Deserialize)]
struct RawRecord {
    id: String,
    modality: String,
    findings: String,
    diagnosis: String,
    #[serde(default)]
    flags: Vec<String>,
}

/// NFC plus whitespace collapse.
pub fn clean_text(text: &str) -> String {
    let nfc: String = text.nfc().collect();
    nfc.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Read a JSON-lines corpus. Flagged records are dropped.
pub fn ingest(path: &Path) -> Result<Vec<ReportRecord>> {
    let reader = BufReader::new(File::open(path).map_err(io_at(path))?);
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse { line: line_no, msg };
        let raw: RawRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let modality: Modality = raw
            .modality
            .parse()
            .map_err(|_| parse_err(format!("unknown modality {:?}", raw.modality)))?;
        let flags = raw
            .flags
            .iter()
            .map(|f| f.parse::<Flag>())
            .collect::<Result<BTreeSet<_>>>()
            .map_err(|e| parse_err(e.to_string()))?;
        let findings = clean_text(&raw.findings);
        let diagnosis = clean_text(&raw.diagnosis);
        if raw.id.trim().is_empty() || findings.is_empty() || diagnosis.is_empty() {
            return Err(parse_err("id, findings and diagnosis must be non-empty".into()));
        }
        if !ids.insert(raw.id.clone()) {
            return Err(parse_err(format!("duplicate id {:?}", raw.id)));
        }
        if !flags.is_empty() {
            continue;
        }
        out.push(ReportRecord {
            id: raw.id,
            modality,
            findings,
            diagnosis,
            flags,
        });
    }
    Ok(out)
}

pub fn write_jsonl(path: &Path, records: &[ReportRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(io_at(path))?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Keep the first occurrence of every (modality, findings, diagnosis) triple
/// after normalization.
pub fn dedup(records: &[ReportRecord]) -> Vec<ReportRecord> {
    let mut seen = HashSet::new();
    records
        .iter()
        .filter(|r| seen.insert((r.modality, clean_text(&r.findings), clean_text(&r.diagnosis))))
        .cloned()
        .collect()
}

/// Train fraction as an exact rational.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitRatio {
    pub train: u64,
    pub total: u64,
}

impl SplitRatio {
    pub fn new(train: u64, total: u64) -> Result<Self> {
        if total == 0 || train == 0 || train >= total {
            return Err(Error::Config(format!("split ratio {train}/{total} must lie in (0, 1)")));
        }
        Ok(Self { train, total })
    }

    pub fn as_f64(self) -> f64 {
        self.train as f64 / self.total as f64
    }

    /// `round(ratio * n)`, halves rounded up.
    pub fn apply(self, n: usize) -> usize {
        ((2 * self.train * n as u64 + self.total) / (2 * self.total)) as usize
    }
}

impl Default for SplitRatio {
    fn default() -> Self {
        Self { train: 6, total: 10 }
    }
}

impl FromStr for SplitRatio {
    type Err = Error;

    /// Accepts `0.6`, `3/5` or `6:4`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("cannot parse split ratio {s:?}"));
        let num = |t: &str| t.trim().parse::<u64>().map_err(|_| bad());
        if let Some((a, b)) = s.split_once(':') {
            let (a, b) = (num(a)?, num(b)?);
            return Self::new(a, a + b);
        }
        if let Some((a, b)) = s.split_once('/') {
            return Self::new(num(a)?, num(b)?);
        }
        let (int, frac) = s.trim().split_once('.').unwrap_or((s.trim(), ""));
        if frac.len() > 12 || !frac.chars().all(|c| c.is_ascii_digit()) {
            return Err(bad());
        }
        let den = 10u64.pow(frac.len() as u32);
        let whole = if int.is_empty() { 0 } else { num(int)? };
        let part = if frac.is_empty() { 0 } else { num(frac)? };
        Self::new(whole * den + part, den)
    }
}

impl fmt::Display for SplitRatio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.train, self.total)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSplit {
    pub train: Vec<ReportRecord>,
    pub test: Vec<ReportRecord>,
    pub seed: u64,
    pub ratio: SplitRatio,
}

/// Seeded stratified split. Each modality is shuffled independently, then
/// train slots are apportioned by largest remainder so that the train side
/// holds exactly `round(ratio * total)` records.
pub fn split(records: &[ReportRecord], ratio: SplitRatio, seed: u64) -> Result<CorpusSplit> {
    if records.is_empty() {
        return Err(Error::Data("cannot split an empty corpus".into()));
    }
    let mut strata: BTreeMap<Modality, Vec<&ReportRecord>> = BTreeMap::new();
    for r in records {
        strata.entry(r.modality).or_default().push(r);
    }
    if let Some((m, s)) = strata.iter().find(|(_, s)| s.len() < 2) {
        return Err(Error::Data(format!("modality {m} has {} record(s); need at least 2 to stratify", s.len())));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for s in strata.values_mut() {
        s.shuffle(&mut rng);
    }

    let target = ratio.apply(records.len());
    let mut quotas: Vec<(usize, u64, usize)> = strata
        .values()
        .enumerate()
        .map(|(i, s)| {
            let exact = ratio.train * s.len() as u64;
            ((exact / ratio.total) as usize, exact % ratio.total, i)
        })
        .collect();
    let assigned: usize = quotas.iter().map(|q| q.0).sum();
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    order.sort_by(|&a, &b| quotas[b].1.cmp(&quotas[a].1).then(quotas[a].2.cmp(&quotas[b].2)));
    for &i in order.iter().cycle().take(target.saturating_sub(assigned)) {
        quotas[i].0 += 1;
    }

    let mut train = Vec::with_capacity(target);
    let mut test = Vec::with_capacity(records.len() - target);
    for (s, q) in strata.values().zip(&quotas) {
        train.extend(s[..q.0].iter().map(|r| (*r).clone()));
        test.extend(s[q.0..].iter().map(|r| (*r).clone()));
    }
    Ok(CorpusSplit { train, test, seed, ratio })
}

/// Per-modality record counts.
pub fn modality_counts(records: &[ReportRecord]) -> BTreeMap<Modality, usize> {
    let mut out = BTreeMap::new();
    for r in records {
        *out.entry(r.modality).or_insert(0) += 1;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Piece {
    Text(String),
    Modality,
    Findings,
}

/// Instruction template with `{modality}` and `{findings}` slots followed by
/// a response prefix that marks where the diagnosis starts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pieces: Vec<Piece>,
    response_prefix: String,
}

pub const DEFAULT_TEMPLATE: &str = "Ophthalmic examination report ({modality}):\n{findings}\nDiagnosis:";

impl PromptTemplate {
    pub fn new(instruction: &str, response_prefix: &str) -> Result<Self> {
        let mut pieces = Vec::new();
        let mut rest = instruction;
        while let Some(open) = rest.find('{') {
            let close = rest[open..]
                .find('}')
                .map(|c| open + c)
                .ok_or_else(|| Error::Template(format!("unterminated placeholder in {instruction:?}")))?;
            if open > 0 {
                pieces.push(Piece::Text(rest[..open].to_string()));
            }
            match &rest[open + 1..close] {
                "modality" => pieces.push(Piece::Modality),
                "findings" => pieces.push(Piece::Findings),
                other => return Err(Error::Template(format!("unresolved placeholder {{{other}}}"))),
            }
            rest = &rest[close + 1..];
        }
        if !rest.is_empty() {
            pieces.push(Piece::Text(rest.to_string()));
        }
        if !pieces.contains(&Piece::Findings) {
            return Err(Error::Template("template has no {findings} placeholder".into()));
        }
        if response_prefix.contains('{') {
            return Err(Error::Template("response prefix may not contain placeholders".into()));
        }
        Ok(Self {
            pieces,
            response_prefix: response_prefix.to_string(),
        })
    }

    /// Parse template-file text: the last line is the response prefix,
    /// everything before it the instruction.
    pub fn parse(text: &str) -> Result<Self> {
        let text = text.trim_end_matches(['\n', '\r']);
        match text.rfind('\n') {
            Some(i) => Self::new(&text[..=i], &text[i + 1..]),
            None => Self::new(text, ""),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path).map_err(io_at(path))?)
    }

    pub fn response_prefix(&self) -> &str {
        &self.response_prefix
    }

    /// Returns `(prompt, target)`; training consumes `prompt + target`.
    pub fn render(&self, record: &ReportRecord) -> Result<(String, String)> {
        if record.findings.trim().is_empty() || record.diagnosis.trim().is_empty() {
            return Err(Error::Data(format!("record {} has empty findings or diagnosis", record.id)));
        }
        Ok((self.render_findings(record.modality, &record.findings), record.diagnosis.clone()))
    }

    /// Prompt text for an unlabelled report.
    pub fn render_findings(&self, modality: Modality, findings: &str) -> String {
        let mut out = String::new();
        for p in &self.pieces {
            match p {
                Piece::Text(t) => out.push_str(t),
                Piece::Modality => out.push_str(modality.as_str()),
                Piece::Findings => out.push_str(findings),
            }
        }
        out.push_str(&self.response_prefix);
        out
    }
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self::parse(DEFAULT_TEMPLATE).expect("default template is valid")
    }
}

pub fn render_prompt(record: &ReportRecord, template: &PromptTemplate) -> Result<(String, String)> {
    template.render(record)
}
