//! Flat key-value run configuration (TOML syntax).
//!
//! Keys mirror the `ModelConfig` and `OptimConfig` field names; anything left
//! out comes from the selected preset.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::PatchGrid;
use crate::model::{ModelConfig, PositionMode};
use crate::tokenstream::SeparationStrategy;
use crate::training::OptimConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    #[default]
    Toy,
    Reference,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Option<Preset>,
    pub seed: Option<u64>,

    pub d_model: Option<usize>,
    pub num_heads: Option<usize>,
    pub d_ff: Option<usize>,
    pub enc_layers: Option<usize>,
    pub dec_layers: Option<usize>,
    pub feature_dim: Option<usize>,
    pub max_decode_steps: Option<usize>,
    pub position_mode: Option<PositionMode>,
    pub separation_strategy: Option<SeparationStrategy>,
    pub grid_rows: Option<usize>,
    pub grid_cols: Option<usize>,
    pub num_buckets: Option<usize>,
    pub pair_bias: Option<bool>,
    pub max_question_tokens: Option<usize>,
    pub max_ocr_tokens: Option<usize>,
    pub max_obj_tokens: Option<usize>,

    pub base_lr: Option<f64>,
    pub warmup_iters: Option<usize>,
    pub warmup_factor: Option<f64>,
    pub decay_steps: Option<Vec<usize>>,
    pub decay_factor: Option<f64>,
    pub batch_size: Option<usize>,
    pub max_iters: Option<usize>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub eps: Option<f64>,
    pub grad_clip: Option<f64>,
    pub eval_every: Option<usize>,
}

macro_rules! apply {
    ($src:expr, $dst:expr, $($field:ident),*) => {
        $(if let Some(v) = $src.$field.clone() { $dst.$field = v; })*
    };
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn model_config(&self, vocab_size: usize) -> Result<ModelConfig> {
        let mut c = match self.preset.unwrap_or_default() {
            Preset::Toy => ModelConfig::toy(vocab_size),
            Preset::Reference => ModelConfig::reference(vocab_size),
        };
        apply!(
            self,
            c,
            d_model,
            num_heads,
            d_ff,
            enc_layers,
            dec_layers,
            feature_dim,
            max_decode_steps,
            position_mode,
            separation_strategy,
            num_buckets,
            pair_bias
        );
        c.grid = PatchGrid::new(self.grid_rows.unwrap_or(c.grid.rows), self.grid_cols.unwrap_or(c.grid.cols))?;
        apply!(self, c.limits, max_question_tokens, max_ocr_tokens, max_obj_tokens);
        c.validate()?;
        Ok(c)
    }

    pub fn optim_config(&self) -> Result<OptimConfig> {
        let mut c = match self.preset.unwrap_or_default() {
            Preset::Toy => OptimConfig::toy(),
            Preset::Reference => OptimConfig::default(),
        };
        apply!(
            self,
            c,
            base_lr,
            warmup_iters,
            warmup_factor,
            decay_steps,
            decay_factor,
            batch_size,
            max_iters,
            beta1,
            beta2,
            eps,
            eval_every
        );
        if let Some(g) = self.grad_clip {
            c.grad_clip = (g > 0.0).then_some(g);
        }
        c.validate()?;
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_toy_preset() {
        let r = RunConfig::parse("").unwrap();
        assert_eq!(r.model_config(300).unwrap(), ModelConfig::toy(300));
        assert_eq!(r.optim_config().unwrap(), OptimConfig::toy());
    }

    #[test]
    fn overrides_apply() {
        let r = RunConfig::parse(
            "preset = \"reference\"\nposition_mode = \"one_d\"\nseparation_strategy = \"tag\"\n\
             max_iters = 7\ndecay_steps = [3, 5]\ngrid_rows = 9\ngrad_clip = 0\nmax_ocr_tokens = 10\n",
        )
        .unwrap();
        let m = r.model_config(300).unwrap();
        assert_eq!(m.d_model, 768);
        assert_eq!(m.position_mode, PositionMode::OneD);
        assert_eq!(m.separation_strategy, SeparationStrategy::Tag);
        assert_eq!(m.grid.rows, 9);
        assert_eq!(m.limits.max_ocr_tokens, 10);
        let o = r.optim_config().unwrap();
        assert_eq!((o.max_iters, o.decay_steps.clone(), o.grad_clip), (7, vec![3, 5], None));
    }

    #[test]
    fn unknown_key_and_bad_values_rejected() {
        assert!(matches!(RunConfig::parse("learning_rate = 1.0"), Err(Error::Config(_))));
        let r = RunConfig::parse("num_heads = 5").unwrap();
        assert!(r.model_config(300).is_err());
        let r = RunConfig::parse("decay_steps = [9, 3]").unwrap();
        assert!(r.optim_config().is_err());
    }

    #[test]
    fn serializes_back() {
        let r = RunConfig {
            seed: Some(4),
            position_mode: Some(PositionMode::Scp),
            ..Default::default()
        };
        assert_eq!(RunConfig::parse(&r.to_toml().unwrap()).unwrap(), r);
    }
}
