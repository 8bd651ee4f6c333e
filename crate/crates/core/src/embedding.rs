//! Per-token input vectors: text embeddings fused with region features.
//!
//! An OCR subtoken's row is `LN(visual·W_fr) + LN(bbox·W_bx) + E[id]`; objects
//! use a separate set of projections and norms. The free functions here are
//! plain-vector reference versions; [`assemble_input`] builds the same rows
//! on a [`Tape`] for training.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{rms_inverse, Tape, Var};
use crate::tensor::Mat;
use crate::tokenstream::{ObjEntry, OcrEntry, TokenSource, TokenStream};
use crate::vocab::CONTEXT_ID;

/// RMS normalization parameters (no mean subtraction).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerNormParams {
    pub gain: Mat,
    pub bias: Mat,
    pub epsilon: f64,
}

impl LayerNormParams {
    pub fn new(d: usize, epsilon: f64) -> Self {
        Self {
            gain: Mat::filled(1, d, 1.0),
            bias: Mat::zeros(1, d),
            epsilon,
        }
    }

    pub fn on_tape(&self, tape: &mut Tape, x: Var) -> Var {
        let g = tape.param(&self.gain);
        let b = tape.param(&self.bias);
        tape.rms_norm(x, g, b, self.epsilon)
    }
}

pub fn layer_norm(x: &[f64], p: &LayerNormParams) -> Vec<f64> {
    let inv = rms_inverse(x, p.epsilon);
    x.iter()
        .zip(&p.gain.data)
        .zip(&p.bias.data)
        .map(|((x, g), b)| x * inv * g + b)
        .collect()
}

/// Projections are stored input-major (`F × d`, `4 × d`) and applied to row
/// vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionParams {
    pub w_fr: Mat,
    pub w_bx: Mat,
    pub w_fr_obj: Mat,
    pub w_bx_obj: Mat,
    pub token_embedding: Mat,
    pub ln_ocr_fr: LayerNormParams,
    pub ln_ocr_bx: LayerNormParams,
    pub ln_obj_fr: LayerNormParams,
    pub ln_obj_bx: LayerNormParams,
}

impl FusionParams {
    pub fn zeros(vocab_size: usize, feature_dim: usize, d: usize, eps: f64) -> Self {
        Self {
            w_fr: Mat::zeros(feature_dim, d),
            w_bx: Mat::zeros(4, d),
            w_fr_obj: Mat::zeros(feature_dim, d),
            w_bx_obj: Mat::zeros(4, d),
            token_embedding: Mat::zeros(vocab_size, d),
            ln_ocr_fr: LayerNormParams::new(d, eps),
            ln_ocr_bx: LayerNormParams::new(d, eps),
            ln_obj_fr: LayerNormParams::new(d, eps),
            ln_obj_bx: LayerNormParams::new(d, eps),
        }
    }

    pub fn d_model(&self) -> usize {
        self.token_embedding.cols
    }

    pub fn feature_dim(&self) -> usize {
        self.w_fr.rows
    }
}

/// The visual vector, with "absent" expanded to zeros.
fn visual_row(visual: &[f64], feature_dim: usize) -> Result<Vec<f64>> {
    match visual.len() {
        0 => Ok(vec![0.0; feature_dim]),
        n if n == feature_dim => Ok(visual.to_vec()),
        n => Err(Error::Config(format!(
            "visual feature has length {n}, model expects {feature_dim}"
        ))),
    }
}

fn project(x: &[f64], w: &Mat) -> Vec<f64> {
    Mat::row_vector(x).matmul(w).data
}

/// `LN(visual·W_fr) + LN(bbox·W_bx)` for one region.
fn region_term(
    visual: &[f64],
    bbox: [f64; 4],
    w_fr: &Mat,
    w_bx: &Mat,
    ln_fr: &LayerNormParams,
    ln_bx: &LayerNormParams,
) -> Result<Vec<f64>> {
    let v = visual_row(visual, w_fr.rows)?;
    let a = layer_norm(&project(&v, w_fr), ln_fr);
    let b = layer_norm(&project(&bbox, w_bx), ln_bx);
    Ok(a.iter().zip(&b).map(|(x, y)| x + y).collect())
}

fn embedding_row(params: &FusionParams, id: usize) -> Result<&[f64]> {
    if id >= params.token_embedding.rows {
        return Err(Error::Config(format!(
            "token id {id} outside embedding table of {} rows",
            params.token_embedding.rows
        )));
    }
    Ok(params.token_embedding.row(id))
}

pub fn fuse_ocr(entry: &OcrEntry, subtoken_id: usize, params: &FusionParams) -> Result<Vec<f64>> {
    let region = region_term(
        &entry.visual,
        entry.bbox.as_array(),
        &params.w_fr,
        &params.w_bx,
        &params.ln_ocr_fr,
        &params.ln_ocr_bx,
    )?;
    let e = embedding_row(params, subtoken_id)?;
    Ok(region.iter().zip(e).map(|(r, e)| r + e).collect())
}

pub fn fuse_obj(entry: &ObjEntry, label_id: usize, params: &FusionParams) -> Result<Vec<f64>> {
    let region = region_term(
        &entry.visual,
        entry.bbox.as_array(),
        &params.w_fr_obj,
        &params.w_bx_obj,
        &params.ln_obj_fr,
        &params.ln_obj_bx,
    )?;
    let e = embedding_row(params, label_id)?;
    Ok(region.iter().zip(e).map(|(r, e)| r + e).collect())
}

/// Region terms for `count` entries as an `count × d` tape variable.
fn region_terms_on_tape(
    tape: &mut Tape,
    rows: Vec<(Vec<f64>, [f64; 4])>,
    w_fr: &Mat,
    w_bx: &Mat,
    ln_fr: &LayerNormParams,
    ln_bx: &LayerNormParams,
) -> Result<Var> {
    let f = w_fr.rows;
    let mut visual = Vec::with_capacity(rows.len() * f);
    let mut boxes = Vec::with_capacity(rows.len() * 4);
    for (v, b) in &rows {
        visual.extend(visual_row(v, f)?);
        boxes.extend_from_slice(b);
    }
    let n = rows.len();
    let vis = tape.constant(Mat::from_vec(n, f, visual));
    let bx = tape.constant(Mat::from_vec(n, 4, boxes));
    let wf = tape.param(w_fr);
    let wb = tape.param(w_bx);
    let pv = tape.matmul(vis, wf);
    let pb = tape.matmul(bx, wb);
    let a = ln_fr.on_tape(tape, pv);
    let b = ln_bx.on_tape(tape, pb);
    Ok(tape.add(a, b))
}

/// Input matrix (`stream.len() × d`) with rows in token order.
pub fn assemble_input(
    tape: &mut Tape,
    stream: &TokenStream,
    ocr: &[OcrEntry],
    obj: &[ObjEntry],
    params: &FusionParams,
) -> Result<Var> {
    let n = stream.len();
    let vocab_rows = params.token_embedding.rows;
    for t in &stream.tokens {
        if t.vocab_id >= vocab_rows {
            return Err(Error::Config(format!(
                "token id {} outside embedding table of {vocab_rows} rows",
                t.vocab_id
            )));
        }
    }
    let emb = tape.param(&params.token_embedding);
    let mut parts = vec![tape.gather_rows(emb, stream.tokens.iter().map(|t| Some(t.vocab_id)).collect())];

    let entry_of = |t: &crate::tokenstream::Token, len: usize| -> Result<usize> {
        match t.entry_index {
            Some(i) if i < len => Ok(i),
            other => Err(Error::Internal(format!(
                "{:?} token refers to entry {other:?} of {len}",
                t.source
            ))),
        }
    };

    let mut ocr_idx = vec![None; n];
    let mut tag_idx = vec![None; n];
    let mut obj_idx = vec![None; n];
    for (r, t) in stream.tokens.iter().enumerate() {
        match t.source {
            TokenSource::Question => {}
            TokenSource::OcrSub | TokenSource::Separator => {
                let e = entry_of(t, ocr.len())?;
                ocr_idx[r] = Some(e);
                if t.context_tag {
                    tag_idx[r] = Some(e);
                }
            }
            TokenSource::Obj => obj_idx[r] = Some(entry_of(t, obj.len())?),
        }
    }

    let used_ocr = ocr_idx.iter().flatten().max().map_or(0, |m| m + 1);
    if used_ocr > 0 {
        let rows = ocr[..used_ocr]
            .iter()
            .map(|e| (e.visual.clone(), e.bbox.as_array()))
            .collect();
        let region = region_terms_on_tape(
            tape,
            rows,
            &params.w_fr,
            &params.w_bx,
            &params.ln_ocr_fr,
            &params.ln_ocr_bx,
        )?;
        parts.push(tape.gather_rows(region, ocr_idx));
        if tag_idx.iter().any(Option::is_some) {
            let ctx = tag_idx.iter().map(|e| e.map(|_| CONTEXT_ID)).collect();
            parts.push(tape.gather_rows(emb, ctx));
            parts.push(tape.gather_rows(region, tag_idx));
        }
    }

    let used_obj = obj_idx.iter().flatten().max().map_or(0, |m| m + 1);
    if used_obj > 0 {
        let rows = obj[..used_obj]
            .iter()
            .map(|e| (e.visual.clone(), e.bbox.as_array()))
            .collect();
        let region = region_terms_on_tape(
            tape,
            rows,
            &params.w_fr_obj,
            &params.w_bx_obj,
            &params.ln_obj_fr,
            &params.ln_obj_bx,
        )?;
        parts.push(tape.gather_rows(region, obj_idx));
    }

    Ok(if parts.len() == 1 { parts[0] } else { tape.sum(parts) })
}
