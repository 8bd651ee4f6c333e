//! Greedy answering over a dataset.

use crate::dataset::SampleRecord;
use crate::error::Result;
use crate::metrics::{evaluate, EvalReport};
use crate::model::{EncoderInput, Model};
use crate::training::prepare_input;
use crate::vocab::Vocab;

pub fn predict(model: &Model, vocab: &Vocab, record: &SampleRecord) -> Result<String> {
    let (stream, ocr, obj) = prepare_input(record, vocab, &model.config)?;
    let ids = model.greedy_decode(&EncoderInput {
        stream: &stream,
        ocr: &ocr,
        obj: &obj,
    })?;
    vocab.detokenize(&ids)
}

pub fn predict_all(model: &Model, vocab: &Vocab, records: &[SampleRecord]) -> Result<Vec<String>> {
    records.iter().map(|r| predict(model, vocab, r)).collect()
}

pub fn evaluate_model(model: &Model, vocab: &Vocab, records: &[SampleRecord], threshold: f64) -> Result<EvalReport> {
    evaluate(records, &predict_all(model, vocab, records)?, threshold)
}
