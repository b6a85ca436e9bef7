//! ROUGE-N and ROUGE-L over token sequences, plus corpus evaluation.

use std::collections::{BTreeMap, HashMap};
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::corpus::{Modality, PromptTemplate, ReportRecord};
use crate::error::{Error, Result};
use crate::parallel;
use crate::tokenizer;

/// Longest input accepted by [`lcs_oracle`].
pub const ORACLE_MAX_LEN: usize = 12;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RougeScore {
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
}

impl RougeScore {
    /// Builds a score from recall and precision using the balanced F.
    pub fn from_rp(recall: f64, precision: f64) -> Self {
        Self { recall, precision, f1: f_beta(recall, precision, 1.0) }
    }
}

/// `(1 + β²) R P / (R + β² P)`, zero when the denominator is zero.
pub fn f_beta(recall: f64, precision: f64, beta: f64) -> f64 {
    let b2 = beta * beta;
    let den = recall + b2 * precision;
    if den == 0.0 {
        0.0
    } else {
        (1.0 + b2) * recall * precision / den
    }
}

/// ROUGE-N result. `reference_too_short` is set when the reference has no
/// n-grams, in which case recall is undefined and the score is zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NGramScore {
    pub score: RougeScore,
    pub reference_too_short: bool,
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for g in tokens.windows(n) {
            *m.entry(g).or_insert(0) += 1;
        }
    }
    m
}

/// Clipped n-gram overlap: each n-gram matches at most as often as it
/// occurs in the other sequence.
pub fn rouge_n<T: Eq + Hash>(candidate: &[T], reference: &[T], n: usize) -> Result<NGramScore> {
    if n == 0 {
        return Err(Error::Config("ROUGE-N needs n >= 1".into()));
    }
    if reference.len() < n {
        return Ok(NGramScore { score: RougeScore::default(), reference_too_short: true });
    }
    let cand = ngram_counts(candidate, n);
    let refs = ngram_counts(reference, n);
    let matched: usize = refs.iter().map(|(g, &c)| c.min(cand.get(g).copied().unwrap_or(0))).sum();
    let ref_total = reference.len() + 1 - n;
    let cand_total = candidate.len().saturating_sub(n - 1);
    let recall = matched as f64 / ref_total as f64;
    let precision = if cand_total == 0 { 0.0 } else { matched as f64 / cand_total as f64 };
    Ok(NGramScore { score: RougeScore::from_rp(recall, precision), reference_too_short: false })
}

/// LCS length by dynamic programming, `O(|a|·|b|)` time, `O(|b|)` space.
pub fn lcs<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS length by enumerating every subsequence of `a` and testing it
/// against `b`. Exponential; both inputs must be at most
/// [`ORACLE_MAX_LEN`] long.
pub fn lcs_oracle<T: Eq>(a: &[T], b: &[T]) -> Result<usize> {
    if a.len() > ORACLE_MAX_LEN || b.len() > ORACLE_MAX_LEN {
        return Err(Error::Config(format!(
            "lcs_oracle accepts at most {ORACLE_MAX_LEN} tokens, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let is_subseq = |mask: u32| {
        let mut it = b.iter();
        (0..a.len()).filter(|i| mask >> i & 1 == 1).all(|i| it.any(|y| *y == a[i]))
    };
    Ok((0..1u32 << a.len())
        .filter(|&m| is_subseq(m))
        .map(|m| m.count_ones() as usize)
        .max()
        .unwrap_or(0))
}

/// `R = LCS/|reference|`, `P = LCS/|candidate|`, `F = (1+β²)RP/(R+β²P)`.
pub fn rouge_l<T: Eq>(candidate: &[T], reference: &[T], beta: f64) -> RougeScore {
    let l = lcs(candidate, reference) as f64;
    let recall = if reference.is_empty() { 0.0 } else { l / reference.len() as f64 };
    let precision = if candidate.is_empty() { 0.0 } else { l / candidate.len() as f64 };
    RougeScore { recall, precision, f1: f_beta(recall, precision, beta) }
}

/// The three scores reported per record.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Triple {
    pub rouge_1: RougeScore,
    pub rouge_2: RougeScore,
    pub rouge_l: RougeScore,
}

/// Score two texts on their word tokens.
pub fn score_text(candidate: &str, reference: &str) -> Triple {
    let c = tokenizer::words(candidate);
    let r = tokenizer::words(reference);
    Triple {
        rouge_1: rouge_n(&c, &r, 1).expect("n >= 1").score,
        rouge_2: rouge_n(&c, &r, 2).expect("n >= 1").score,
        rouge_l: rouge_l(&c, &r, 1.0),
    }
}

fn mean_triple<'a>(items: impl Iterator<Item = &'a Triple>) -> Triple {
    let mut sum = [[0.0f64; 3]; 3];
    let mut n = 0usize;
    for t in items {
        for (acc, s) in sum.iter_mut().zip([t.rouge_1, t.rouge_2, t.rouge_l]) {
            acc[0] += s.recall;
            acc[1] += s.precision;
            acc[2] += s.f1;
        }
        n += 1;
    }
    let d = n.max(1) as f64;
    let s = |a: [f64; 3]| RougeScore { recall: a[0] / d, precision: a[1] / d, f1: a[2] / d };
    Triple { rouge_1: s(sum[0]), rouge_2: s(sum[1]), rouge_l: s(sum[2]) }
}

/// Produces a diagnosis for one rendered prompt.
pub trait Generate: Sync {
    fn generate(&self, record: &ReportRecord, prompt: &str, seed: u64) -> Result<String>;
}

/// Returns the reference diagnosis.
pub struct EchoReference;

impl Generate for EchoReference {
    fn generate(&self, record: &ReportRecord, _: &str, _: u64) -> Result<String> {
        Ok(record.diagnosis.clone())
    }
}

/// Always returns an empty string.
pub struct Silent;

impl Generate for Silent {
    fn generate(&self, _: &ReportRecord, _: &str, _: u64) -> Result<String> {
        Ok(String::new())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordScore {
    pub id: String,
    pub modality: Modality,
    pub candidate: String,
    pub reference: String,
    pub scores: Triple,
    /// Set when generation failed; the record then scores zero.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub records: Vec<RecordScore>,
    pub mean: Triple,
    pub by_modality: BTreeMap<Modality, Triple>,
}

impl EvalReport {
    pub fn from_records(records: Vec<RecordScore>) -> Self {
        let mean = mean_triple(records.iter().map(|r| &r.scores));
        let mut by_modality = BTreeMap::new();
        for m in Modality::ALL {
            if records.iter().any(|r| r.modality == m) {
                let t = mean_triple(records.iter().filter(|r| r.modality == m).map(|r| &r.scores));
                by_modality.insert(m, t);
            }
        }
        Self { records, mean, by_modality }
    }

    pub fn failures(&self) -> usize {
        self.records.iter().filter(|r| r.error.is_some()).count()
    }
}

/// Generate a diagnosis for every test record and score it against the
/// reference. Record `i` is generated with seed `seed + i`; a failed
/// generation scores zero and is flagged. Record order is preserved.
pub fn evaluate<G: Generate + ?Sized>(
    generator: &G,
    test: &[ReportRecord],
    template: &PromptTemplate,
    seed: u64,
) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::Data("evaluation split is empty".into()));
    }
    let records = parallel::map(test, |i, rec| {
        let (prompt, reference) = template.render(rec)?;
        let out = generator.generate(rec, &prompt, seed.wrapping_add(i as u64));
        let (candidate, scores, error) = match out {
            Ok(c) => {
                let s = score_text(&c, &reference);
                (c, s, None)
            }
            Err(e) => (String::new(), Triple::default(), Some(e.to_string())),
        };
        Ok(RecordScore { id: rec.id.clone(), modality: rec.modality, candidate, reference, scores, error })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_records(records))
}

/// Markdown comparison table of mean F1, one row per named report.
pub fn markdown_table(rows: &[(String, &EvalReport)]) -> String {
    let mut s = String::from("| Model | ROUGE-1 | ROUGE-2 | ROUGE-L |\n|---|---:|---:|---:|\n");
    for (name, r) in rows {
        let m = &r.mean;
        s.push_str(&format!(
            "| {name} | {:.4} | {:.4} | {:.4} |\n",
            m.rouge_1.f1, m.rouge_2.f1, m.rouge_l.f1
        ));
    }
    s
}
