//! JSON checkpoints: configuration, vocabulary and named tensors.
//!
//! Floats are written with shortest round-trip formatting, so a save/load
//! cycle reproduces every parameter bit for bit.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ModelParameters};
use crate::tensor::Mat;
use crate::vocab::Vocab;

const FORMAT: &str = "textvqa-checkpoint";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    config: ModelConfig,
    vocab: Vec<String>,
    tensors: Vec<NamedTensor>,
}

pub fn to_json(model: &Model, vocab: &Vocab) -> Result<String> {
    let file = CheckpointFile {
        format: FORMAT.into(),
        version: VERSION,
        config: model.config.clone(),
        vocab: vocab.to_file_string().lines().map(str::to_string).collect(),
        tensors: model
            .params
            .tensors()
            .into_iter()
            .map(|(name, m)| NamedTensor {
                name,
                rows: m.rows,
                cols: m.cols,
                data: m.data.clone(),
            })
            .collect(),
    };
    Ok(serde_json::to_string(&file)?)
}

pub fn from_json(text: &str) -> Result<(Model, Vocab)> {
    let file: CheckpointFile = serde_json::from_str(text)?;
    if file.format != FORMAT || file.version != VERSION {
        return Err(Error::Config(format!(
            "unsupported checkpoint `{}` version {}",
            file.format, file.version
        )));
    }
    let vocab = Vocab::parse(&file.vocab.join("\n"))?;
    if vocab.len() != file.config.vocab_size {
        return Err(Error::Config(format!(
            "checkpoint vocabulary has {} tokens but the model expects {}",
            vocab.len(),
            file.config.vocab_size
        )));
    }
    let mut params = ModelParameters::init(&file.config, 0)?;
    let slots = params.tensors_mut();
    if slots.len() != file.tensors.len() {
        return Err(Error::Config(format!(
            "checkpoint has {} tensors, configuration needs {}",
            file.tensors.len(),
            slots.len()
        )));
    }
    for ((name, slot), t) in slots.into_iter().zip(file.tensors) {
        if name != t.name || slot.shape() != (t.rows, t.cols) || t.data.len() != t.rows * t.cols {
            return Err(Error::Config(format!(
                "checkpoint tensor `{}` ({}x{}) does not fit `{name}` {:?}",
                t.name,
                t.rows,
                t.cols,
                slot.shape()
            )));
        }
        *slot = Mat::from_vec(t.rows, t.cols, t.data);
    }
    params.check_finite()?;
    Ok((Model::from_parts(file.config, params)?, vocab))
}

pub fn save(path: &Path, model: &Model, vocab: &Vocab) -> Result<()> {
    std::fs::write(path, to_json(model, vocab)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(Model, Vocab)> {
    from_json(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PositionMode;

    #[test]
    fn round_trip_is_bit_exact() {
        let v = Vocab::default_vocab();
        let mut cfg = ModelConfig::toy(v.len());
        cfg.d_model = 8;
        cfg.num_heads = 2;
        cfg.position_mode = PositionMode::Layout;
        cfg.pair_bias = true;
        let mut m = Model::new(cfg, 5).unwrap();
        m.params.b_out.data[0] = 0.1 + 0.2;
        m.params.b_out.data[1] = -1e-310;
        let (back, v2) = from_json(&to_json(&m, &v).unwrap()).unwrap();
        assert_eq!(v2, v);
        for ((_, a), (_, b)) in m.params.tensors().into_iter().zip(back.params.tensors()) {
            let bits = |x: &Mat| x.data.iter().map(|f| f.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        assert_eq!(back, m);
    }

    #[test]
    fn mismatched_tensor_rejected() {
        let v = Vocab::default_vocab();
        let m = Model::new(ModelConfig::toy(v.len()), 1).unwrap();
        let mut doc: serde_json::Value = serde_json::from_str(&to_json(&m, &v).unwrap()).unwrap();
        doc["tensors"][0]["rows"] = 3.into();
        assert!(matches!(from_json(&doc.to_string()), Err(Error::Config(_))));
    }
}
