//! Wall-clock harness: fine-tune time over a fixed workload and mean
//! per-report inference latency, each with a spread over repeats.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::corpus::{PromptTemplate, ReportRecord};
use crate::error::{Error, Result};
use crate::rouge::Generate;
use crate::tokenizer;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub mean: f64,
    /// Sample standard deviation; zero with fewer than two samples.
    pub std: f64,
    pub samples: Vec<f64>,
}

impl Timing {
    pub fn from_samples(samples: Vec<f64>) -> Self {
        let n = samples.len();
        let mean = if n == 0 { 0.0 } else { samples.iter().sum::<f64>() / n as f64 };
        let std = if n < 2 {
            0.0
        } else {
            (samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Self { mean, std, samples }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub finetune_seconds: Timing,
    pub latency_seconds: Timing,
    /// Tokens processed by one fine-tune run.
    pub train_tokens: usize,
    /// Words generated over one pass of the inference workload.
    pub generated_words: usize,
    pub repeats: usize,
}

impl BenchReport {
    /// Two-column table: stage and seconds (mean ± std).
    pub fn table(&self) -> String {
        format!(
            "| Stage | Seconds |\n|---|---:|\n| Fine-tune (wall) | {:.3} ± {:.3} |\n| Inference (mean per report) | {:.4} ± {:.4} |\n",
            self.finetune_seconds.mean,
            self.finetune_seconds.std,
            self.latency_seconds.mean,
            self.latency_seconds.std
        )
    }
}

/// Run `finetune` and the inference workload `repeats` times. `finetune`
/// returns how many tokens it processed; that count and the number of
/// generated words must not vary between repeats.
pub fn run<G: Generate + ?Sized>(
    repeats: usize,
    mut finetune: impl FnMut() -> Result<usize>,
    generator: &G,
    records: &[ReportRecord],
    template: &PromptTemplate,
    seed: u64,
) -> Result<BenchReport> {
    if repeats == 0 {
        return Err(Error::Config("bench needs at least one repeat".into()));
    }
    if records.is_empty() {
        return Err(Error::Data("bench workload is empty".into()));
    }
    let prompts = records.iter().map(|r| template.render(r).map(|(p, _)| p)).collect::<Result<Vec<_>>>()?;
    let mut ft = Vec::with_capacity(repeats);
    let mut lat = Vec::with_capacity(repeats * records.len());
    let mut train_tokens = None;
    let mut generated_words = None;
    for _ in 0..repeats {
        let t0 = Instant::now();
        let tokens = finetune()?;
        ft.push(t0.elapsed().as_secs_f64());
        check_stable(&mut train_tokens, tokens, "fine-tune token count")?;

        let mut words = 0;
        for (i, (r, p)) in records.iter().zip(&prompts).enumerate() {
            let t0 = Instant::now();
            let out = generator.generate(r, p, seed.wrapping_add(i as u64))?;
            lat.push(t0.elapsed().as_secs_f64());
            words += tokenizer::words(&out).len();
        }
        check_stable(&mut generated_words, words, "generated word count")?;
    }
    Ok(BenchReport {
        finetune_seconds: Timing::from_samples(ft),
        latency_seconds: Timing::from_samples(lat),
        train_tokens: train_tokens.unwrap_or(0),
        generated_words: generated_words.unwrap_or(0),
        repeats,
    })
}

fn check_stable(slot: &mut Option<usize>, v: usize, what: &str) -> Result<()> {
    match *slot {
        Some(prev) if prev != v => Err(Error::Data(format!("{what} changed between repeats: {prev} then {v}"))),
        _ => {
            *slot = Some(v);
            Ok(())
        }
    }
}
