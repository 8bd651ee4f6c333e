//! Line-delimited JSON dataset records with pixel-space boxes.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::NormalizedBBox;
use crate::tokenstream::{ObjEntry, OcrEntry};

pub const NUM_ANSWERS: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OcrRecord {
    pub text: String,
    /// `[xmin, ymin, xmax, ymax]` in pixels.
    pub bbox: [f64; 4],
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub visual: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjRecord {
    pub label: String,
    pub bbox: [f64; 4],
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub visual: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub id: String,
    pub image_w: u32,
    pub image_h: u32,
    pub question: String,
    #[serde(default)]
    pub ocr: Vec<OcrRecord>,
    #[serde(default)]
    pub objects: Vec<ObjRecord>,
    pub answers: Vec<String>,
}

impl SampleRecord {
    fn reject(&self, field: &'static str, message: impl Into<String>) -> Error {
        Error::Record {
            id: self.id.clone(),
            field,
            message: message.into(),
        }
    }

    fn check_box(&self, field: &'static str, b: &[f64; 4], visual: &[f64]) -> Result<()> {
        let (w, h) = (self.image_w as f64, self.image_h as f64);
        let [x0, y0, x1, y1] = *b;
        let ok = b.iter().all(|v| v.is_finite()) && 0.0 <= x0 && x0 < x1 && x1 <= w && 0.0 <= y0 && y0 < y1 && y1 <= h;
        if !ok {
            return Err(self.reject(field, format!("bbox {b:?} outside a {}x{} image", self.image_w, self.image_h)));
        }
        if visual.iter().any(|v| !v.is_finite()) {
            return Err(self.reject(field, "visual feature has non-finite entries"));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(self.reject("id", "empty id"));
        }
        if self.image_w == 0 || self.image_h == 0 {
            return Err(self.reject("image_w", "image size must be positive"));
        }
        if self.question.trim().is_empty() {
            return Err(self.reject("question", "empty question"));
        }
        if self.answers.len() != NUM_ANSWERS {
            return Err(self.reject(
                "answers",
                format!("expected {NUM_ANSWERS} answers, found {}", self.answers.len()),
            ));
        }
        for o in &self.ocr {
            if o.text.trim().is_empty() {
                return Err(self.reject("ocr", "empty OCR text"));
            }
            self.check_box("ocr", &o.bbox, &o.visual)?;
        }
        for o in &self.objects {
            if o.label.trim().is_empty() {
                return Err(self.reject("objects", "empty object label"));
            }
            self.check_box("objects", &o.bbox, &o.visual)?;
        }
        Ok(())
    }

    pub fn normalize(&self, b: &[f64; 4]) -> Result<NormalizedBBox> {
        let (w, h) = (self.image_w as f64, self.image_h as f64);
        NormalizedBBox::new(b[0] / w, b[1] / h, b[2] / w, b[3] / h)
    }

    pub fn ocr_entries(&self) -> Result<Vec<OcrEntry>> {
        self.ocr
            .iter()
            .map(|o| OcrEntry::new(o.text.clone(), self.normalize(&o.bbox)?, o.visual.clone()))
            .collect()
    }

    pub fn obj_entries(&self) -> Result<Vec<ObjEntry>> {
        self.objects
            .iter()
            .map(|o| ObjEntry::new(o.label.clone(), self.normalize(&o.bbox)?, o.visual.clone()))
            .collect()
    }
}

pub fn parse_dataset(text: &str) -> Result<Vec<SampleRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: SampleRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        rec.validate()?;
        out.push(rec);
    }
    Ok(out)
}

pub fn load_dataset(path: &Path) -> Result<Vec<SampleRecord>> {
    parse_dataset(&std::fs::read_to_string(path)?)
}

pub fn write_dataset(path: &Path, records: &[SampleRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
