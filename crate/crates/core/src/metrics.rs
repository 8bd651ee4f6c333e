//! Soft-voting accuracy, ANLS and answer-length statistics.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::dataset::SampleRecord;
use crate::error::{Error, Result};

pub const ANLS_THRESHOLD: f64 = 0.5;

/// Lowercase, trim, collapse inner whitespace.
pub fn normalize_answer(s: &str) -> String {
    s.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// `min(m / 3, 1)` with `m` the number of answers equal to `pred` after
/// normalization.
pub fn soft_accuracy(pred: &str, answers: &[String]) -> f64 {
    let p = normalize_answer(pred);
    let m = answers.iter().filter(|a| normalize_answer(a) == p).count();
    (m as f64 / 3.0).min(1.0)
}

/// Character-level edit distance.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn similarity(pred: &str, gt: &str) -> f64 {
    let longest = pred.chars().count().max(gt.chars().count());
    if longest == 0 {
        return 1.0;
    }
    1.0 - levenshtein(pred, gt) as f64 / longest as f64
}

/// Best normalized Levenshtein similarity over the answers. Scores below
/// `threshold` become 0; pass 0.0 for the raw score.
pub fn anls_with(pred: &str, answers: &[String], threshold: f64) -> f64 {
    let p = normalize_answer(pred);
    answers
        .iter()
        .map(|a| {
            let s = similarity(&p, &normalize_answer(a));
            if s < threshold {
                0.0
            } else {
                s
            }
        })
        .fold(0.0, f64::max)
}

pub fn anls(pred: &str, answers: &[String]) -> f64 {
    anls_with(pred, answers, ANLS_THRESHOLD)
}

/// Most frequent normalized answer; ties go to the earliest.
pub fn majority_answer(answers: &[String]) -> String {
    let norm: Vec<String> = answers.iter().map(|a| normalize_answer(a)).collect();
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for a in &norm {
        *counts.entry(a).or_default() += 1;
    }
    let mut best: Option<(&str, usize)> = None;
    for a in &norm {
        let c = counts[a.as_str()];
        if best.map_or(true, |(_, bc)| c > bc) {
            best = Some((a, c));
        }
    }
    best.map(|(a, _)| a.to_string()).unwrap_or_default()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub id: String,
    pub prediction: String,
    pub soft_accuracy: f64,
    pub anls: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub soft_accuracy: f64,
    pub anls: f64,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    /// Aggregates are plain means, summed in id order.
    pub fn from_rows(rows: Vec<EvalRow>) -> Self {
        let mut order: Vec<&EvalRow> = rows.iter().collect();
        order.sort_by(|a, b| a.id.cmp(&b.id));
        let n = rows.len().max(1) as f64;
        let soft_accuracy = order.iter().map(|r| r.soft_accuracy).sum::<f64>() / n;
        let anls = order.iter().map(|r| r.anls).sum::<f64>() / n;
        Self { soft_accuracy, anls, rows }
    }
}

/// Scores predictions against records; `threshold` as in [`anls_with`].
pub fn evaluate(records: &[SampleRecord], predictions: &[String], threshold: f64) -> Result<EvalReport> {
    check_aligned(records, predictions)?;
    let rows = records
        .iter()
        .zip(predictions)
        .map(|(r, p)| EvalRow {
            id: r.id.clone(),
            prediction: p.clone(),
            soft_accuracy: soft_accuracy(p, &r.answers),
            anls: anls_with(p, &r.answers, threshold),
        })
        .collect();
    Ok(EvalReport::from_rows(rows))
}

fn check_aligned(records: &[SampleRecord], predictions: &[String]) -> Result<()> {
    if records.len() != predictions.len() {
        return Err(Error::InvalidInput(format!(
            "{} predictions for {} records",
            predictions.len(),
            records.len()
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LengthBin {
    /// Answer strings in this bin.
    pub count: usize,
    pub ratio: f64,
    /// Samples whose majority answer falls in this bin.
    pub samples: usize,
    /// Mean soft accuracy over those samples, absent when there are none.
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LengthStats {
    pub total_answers: usize,
    pub short: LengthBin,
    pub long: LengthBin,
}

pub const SHORT_ANSWER_WORDS: usize = 3;

fn is_short(answer: &str) -> bool {
    answer.split_whitespace().count() <= SHORT_ANSWER_WORDS
}

pub fn answer_length_stats(records: &[SampleRecord], predictions: &[String]) -> Result<LengthStats> {
    check_aligned(records, predictions)?;
    Ok(length_stats(records, Some(predictions)))
}

/// Bin counts and ratios only; per-bin accuracy is left absent.
pub fn answer_length_ratios(records: &[SampleRecord]) -> LengthStats {
    length_stats(records, None)
}

fn length_stats(records: &[SampleRecord], predictions: Option<&[String]>) -> LengthStats {
    let mut counts = [0usize; 2];
    let mut acc = [0.0f64; 2];
    let mut samples = [0usize; 2];
    for (i, r) in records.iter().enumerate() {
        for a in &r.answers {
            counts[usize::from(!is_short(a))] += 1;
        }
        let bin = usize::from(!is_short(&majority_answer(&r.answers)));
        samples[bin] += 1;
        if let Some(p) = predictions {
            acc[bin] += soft_accuracy(&p[i], &r.answers);
        }
    }
    let total = counts[0] + counts[1];
    let bin = |i: usize| LengthBin {
        count: counts[i],
        ratio: if total == 0 { 0.0 } else { counts[i] as f64 / total as f64 },
        samples: samples[i],
        accuracy: (predictions.is_some() && samples[i] > 0).then(|| acc[i] / samples[i] as f64),
    };
    LengthStats {
        total_answers: total,
        short: bin(0),
        long: bin(1),
    }
}
