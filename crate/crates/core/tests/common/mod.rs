#![allow(dead_code)]

use std::io::Write;
use std::sync::{Mutex, MutexGuard};

use textvqa::dataset::{OcrRecord, ObjRecord, SampleRecord};

static HEAVY: Mutex<()> = Mutex::new(());

/// Serializes the long-running tests so their wall-clock budgets are not
/// shared with each other.
pub fn heavy() -> MutexGuard<'static, ()> {
    HEAVY.lock().unwrap_or_else(|e| e.into_inner())
}

/// Writes straight to the stderr handle, which the test harness does not
/// capture, so the line shows up in plain `cargo test` output too.
pub fn report(criterion: u32, name: &str, pass: bool, detail: &str) {
    let line = format!(
        "criterion {criterion} [{}] {name}: {detail}\n",
        if pass { "PASS" } else { "FAIL" }
    );
    let _ = std::io::stderr().lock().write_all(line.as_bytes());
}

/// Small hand-built record: three OCR entries (one out of vocabulary) and
/// one object.
pub fn sample_record(id: &str, answer: &str) -> SampleRecord {
    let f = |seed: f64, n: usize| (0..n).map(|i| ((i as f64 + 1.0) * seed).sin()).collect::<Vec<f64>>();
    SampleRecord {
        id: id.into(),
        image_w: 200,
        image_h: 100,
        question: "what word is below stop".into(),
        ocr: vec![
            OcrRecord {
                text: "stop".into(),
                bbox: [20.0, 10.0, 60.0, 20.0],
                visual: f(0.7, 4),
            },
            OcrRecord {
                text: "zqx".into(),
                bbox: [30.0, 60.0, 70.0, 72.0],
                visual: f(1.3, 4),
            },
            OcrRecord {
                text: "open".into(),
                bbox: [150.0, 40.0, 190.0, 55.0],
                visual: vec![],
            },
        ],
        objects: vec![ObjRecord {
            label: "car".into(),
            bbox: [100.0, 50.0, 160.0, 90.0],
            visual: f(2.1, 4),
        }],
        answers: vec![answer.to_string(); 10],
    }
}
