//! Encoder-decoder transformer with circle-distance attention bias on the
//! OCR segment.
//!
//! Pre-norm blocks (RMS norm, attention, residual, RMS norm, ReLU FFN,
//! residual). Attention logits per head are
//! `(q·kᵀ [+ b_h]) / sqrt(d_head) + rel1d[h] + scp[h]`, where the 1-D term comes
//! from log-bucketed relative positions and the SCP term is looked up in the
//! shared distance-bucket table for OCR↔OCR pairs only.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{assemble_input, FusionParams, LayerNormParams};
use crate::error::{Error, Result};
use crate::geometry::{bucketize, circle_distance, BucketTable, PatchGrid};
use crate::tape::{Grads, Tape, Var};
use crate::tensor::Mat;
use crate::tokenstream::{ObjEntry, OcrEntry, SeparationStrategy, StreamLimits, TokenSource, TokenStream};
use crate::vocab::{EOS_ID, PAD_ID};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum PositionMode {
    /// No position signal at all.
    None,
    /// Relative 1-D position buckets only.
    #[serde(alias = "one-d")]
    #[value(alias = "one_d")]
    OneD,
    /// 1-D buckets plus learnable per-coordinate layout embeddings on the
    /// OCR inputs.
    Layout,
    /// 1-D buckets plus the circle-distance bias on OCR↔OCR attention.
    Scp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub num_heads: usize,
    pub d_ff: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub vocab_size: usize,
    pub feature_dim: usize,
    pub max_decode_steps: usize,
    pub position_mode: PositionMode,
    pub separation_strategy: SeparationStrategy,
    pub grid: PatchGrid,
    pub num_buckets: usize,
    pub rel_pos_buckets: usize,
    pub rel_pos_max_distance: usize,
    /// Learned per-head scalar inside the scaled attention numerator.
    pub pair_bias: bool,
    pub limits: StreamLimits,
    pub ln_eps: f64,
}

impl ModelConfig {
    /// Full-size architecture (12 + 12 layers, 12 heads, width 768).
    pub fn reference(vocab_size: usize) -> Self {
        Self {
            d_model: 768,
            num_heads: 12,
            d_ff: 3072,
            enc_layers: 12,
            dec_layers: 12,
            vocab_size,
            feature_dim: 2048,
            max_decode_steps: 25,
            position_mode: PositionMode::Scp,
            separation_strategy: SeparationStrategy::Tss,
            grid: PatchGrid::default(),
            num_buckets: 32,
            rel_pos_buckets: 32,
            rel_pos_max_distance: 128,
            pair_bias: false,
            limits: StreamLimits::default(),
            ln_eps: 1e-6,
        }
    }

    /// Desk-scale preset used by the synthetic experiments.
    pub fn toy(vocab_size: usize) -> Self {
        Self {
            d_model: 32,
            num_heads: 4,
            d_ff: 64,
            enc_layers: 2,
            dec_layers: 2,
            feature_dim: 16,
            limits: StreamLimits {
                max_question_tokens: 16,
                max_ocr_tokens: 64,
                max_obj_tokens: 8,
            },
            ..Self::reference(vocab_size)
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_heads == 0 || self.d_model == 0 || self.d_model % self.num_heads != 0 {
            return fail(format!(
                "d_model {} must be a positive multiple of num_heads {}",
                self.d_model, self.num_heads
            ));
        }
        if self.max_decode_steps == 0 {
            return fail("max_decode_steps must be at least 1".into());
        }
        if self.vocab_size <= EOS_ID {
            return fail(format!("vocab_size {} too small", self.vocab_size));
        }
        if self.d_ff == 0 || self.feature_dim == 0 {
            return fail("d_ff and feature_dim must be positive".into());
        }
        if self.rel_pos_buckets < 4 || self.rel_pos_max_distance < self.rel_pos_buckets {
            return fail("rel_pos_buckets must be >= 4 and <= rel_pos_max_distance".into());
        }
        if !(self.ln_eps >= 0.0) {
            return fail("ln_eps must be >= 0".into());
        }
        PatchGrid::new(self.grid.rows, self.grid.cols)?;
        BucketTable::zeros(self.num_buckets, self.num_heads).check_covers(self.grid)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub w_q: Mat,
    pub w_k: Mat,
    pub w_v: Mat,
    pub w_o: Mat,
    pub pair_bias: Option<Mat>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeedForwardParams {
    pub w_in: Mat,
    pub w_out: Mat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderLayerParams {
    pub ln_attn: LayerNormParams,
    pub attn: AttentionParams,
    pub ln_ff: LayerNormParams,
    pub ff: FeedForwardParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderLayerParams {
    pub ln_self: LayerNormParams,
    pub self_attn: AttentionParams,
    pub ln_cross: LayerNormParams,
    pub cross_attn: AttentionParams,
    pub ln_ff: LayerNormParams,
    pub ff: FeedForwardParams,
}

/// Per-coordinate embeddings indexed by grid cell (layout mode only).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayoutTables {
    pub xmin: Mat,
    pub ymin: Mat,
    pub xmax: Mat,
    pub ymax: Mat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParameters {
    pub fusion: FusionParams,
    pub bucket_table: BucketTable,
    pub layout: Option<LayoutTables>,
    pub enc_rel_bias: Mat,
    pub dec_rel_bias: Mat,
    pub encoder: Vec<EncoderLayerParams>,
    pub enc_final_ln: LayerNormParams,
    pub decoder: Vec<DecoderLayerParams>,
    pub dec_final_ln: LayerNormParams,
    pub w_out: Mat,
    pub b_out: Mat,
}

fn attention_tensors<'a>(prefix: &str, a: &'a AttentionParams, out: &mut Vec<(String, &'a Mat)>) {
    out.push((format!("{prefix}.w_q"), &a.w_q));
    out.push((format!("{prefix}.w_k"), &a.w_k));
    out.push((format!("{prefix}.w_v"), &a.w_v));
    out.push((format!("{prefix}.w_o"), &a.w_o));
    if let Some(b) = &a.pair_bias {
        out.push((format!("{prefix}.pair_bias"), b));
    }
}

fn attention_tensors_mut<'a>(prefix: &str, a: &'a mut AttentionParams, out: &mut Vec<(String, &'a mut Mat)>) {
    out.push((format!("{prefix}.w_q"), &mut a.w_q));
    out.push((format!("{prefix}.w_k"), &mut a.w_k));
    out.push((format!("{prefix}.w_v"), &mut a.w_v));
    out.push((format!("{prefix}.w_o"), &mut a.w_o));
    if let Some(b) = &mut a.pair_bias {
        out.push((format!("{prefix}.pair_bias"), b));
    }
}

macro_rules! ln_tensors {
    ($out:ident, $prefix:expr, $ln:expr) => {
        $out.push((format!("{}.gain", $prefix), &$ln.gain));
        $out.push((format!("{}.bias", $prefix), &$ln.bias));
    };
    (mut $out:ident, $prefix:expr, $ln:expr) => {
        $out.push((format!("{}.gain", $prefix), &mut $ln.gain));
        $out.push((format!("{}.bias", $prefix), &mut $ln.bias));
    };
}

impl ModelParameters {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, f, v, h, ff) = (cfg.d_model, cfg.feature_dim, cfg.vocab_size, cfg.num_heads, cfg.d_ff);
        let eps = cfg.ln_eps;
        let sd = 1.0 / (d as f64).sqrt();
        let mut fusion = FusionParams::zeros(v, f, d, eps);
        fusion.token_embedding = Mat::randn(v, d, 1.0, &mut rng);
        fusion.w_fr = Mat::randn(f, d, 1.0 / (f as f64).sqrt(), &mut rng);
        fusion.w_bx = Mat::randn(4, d, 0.5, &mut rng);
        fusion.w_fr_obj = Mat::randn(f, d, 1.0 / (f as f64).sqrt(), &mut rng);
        fusion.w_bx_obj = Mat::randn(4, d, 0.5, &mut rng);

        let attn = |rng: &mut ChaCha8Rng| AttentionParams {
            w_q: Mat::randn(d, d, sd, rng),
            w_k: Mat::randn(d, d, sd, rng),
            w_v: Mat::randn(d, d, sd, rng),
            w_o: Mat::randn(d, d, sd, rng),
            pair_bias: cfg.pair_bias.then(|| Mat::zeros(1, h)),
        };
        let ffn = |rng: &mut ChaCha8Rng| FeedForwardParams {
            w_in: Mat::randn(d, ff, sd, rng),
            w_out: Mat::randn(ff, d, 1.0 / (ff as f64).sqrt(), rng),
        };
        let ln = || LayerNormParams::new(d, eps);
        let encoder = (0..cfg.enc_layers)
            .map(|_| EncoderLayerParams {
                ln_attn: ln(),
                attn: attn(&mut rng),
                ln_ff: ln(),
                ff: ffn(&mut rng),
            })
            .collect();
        let decoder = (0..cfg.dec_layers)
            .map(|_| DecoderLayerParams {
                ln_self: ln(),
                self_attn: attn(&mut rng),
                ln_cross: ln(),
                cross_attn: attn(&mut rng),
                ln_ff: ln(),
                ff: ffn(&mut rng),
            })
            .collect();
        let layout = (cfg.position_mode == PositionMode::Layout).then(|| LayoutTables {
            xmin: Mat::randn(cfg.grid.cols, d, 0.1, &mut rng),
            ymin: Mat::randn(cfg.grid.rows, d, 0.1, &mut rng),
            xmax: Mat::randn(cfg.grid.cols, d, 0.1, &mut rng),
            ymax: Mat::randn(cfg.grid.rows, d, 0.1, &mut rng),
        });
        Ok(Self {
            fusion,
            bucket_table: BucketTable::from_mat(Mat::randn(cfg.num_buckets, h, 0.1, &mut rng)),
            layout,
            enc_rel_bias: Mat::randn(cfg.rel_pos_buckets, h, 0.1, &mut rng),
            dec_rel_bias: Mat::randn(cfg.rel_pos_buckets, h, 0.1, &mut rng),
            encoder,
            enc_final_ln: ln(),
            decoder,
            dec_final_ln: ln(),
            w_out: Mat::randn(d, v, sd, &mut rng),
            b_out: Mat::zeros(1, v),
        })
    }

    /// Every trainable tensor with a stable dotted name, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &Mat)> {
        let mut out: Vec<(String, &Mat)> = Vec::new();
        let fu = &self.fusion;
        out.push(("fusion.w_fr".into(), &fu.w_fr));
        out.push(("fusion.w_bx".into(), &fu.w_bx));
        out.push(("fusion.w_fr_obj".into(), &fu.w_fr_obj));
        out.push(("fusion.w_bx_obj".into(), &fu.w_bx_obj));
        out.push(("fusion.token_embedding".into(), &fu.token_embedding));
        ln_tensors!(out, "fusion.ln_ocr_fr", fu.ln_ocr_fr);
        ln_tensors!(out, "fusion.ln_ocr_bx", fu.ln_ocr_bx);
        ln_tensors!(out, "fusion.ln_obj_fr", fu.ln_obj_fr);
        ln_tensors!(out, "fusion.ln_obj_bx", fu.ln_obj_bx);
        out.push(("bucket_table".into(), &self.bucket_table.entries));
        if let Some(l) = &self.layout {
            out.push(("layout.xmin".into(), &l.xmin));
            out.push(("layout.ymin".into(), &l.ymin));
            out.push(("layout.xmax".into(), &l.xmax));
            out.push(("layout.ymax".into(), &l.ymax));
        }
        out.push(("enc_rel_bias".into(), &self.enc_rel_bias));
        out.push(("dec_rel_bias".into(), &self.dec_rel_bias));
        for (i, l) in self.encoder.iter().enumerate() {
            ln_tensors!(out, format!("encoder.{i}.ln_attn"), l.ln_attn);
            attention_tensors(&format!("encoder.{i}.attn"), &l.attn, &mut out);
            ln_tensors!(out, format!("encoder.{i}.ln_ff"), l.ln_ff);
            out.push((format!("encoder.{i}.ff.w_in"), &l.ff.w_in));
            out.push((format!("encoder.{i}.ff.w_out"), &l.ff.w_out));
        }
        ln_tensors!(out, "enc_final_ln", self.enc_final_ln);
        for (i, l) in self.decoder.iter().enumerate() {
            ln_tensors!(out, format!("decoder.{i}.ln_self"), l.ln_self);
            attention_tensors(&format!("decoder.{i}.self_attn"), &l.self_attn, &mut out);
            ln_tensors!(out, format!("decoder.{i}.ln_cross"), l.ln_cross);
            attention_tensors(&format!("decoder.{i}.cross_attn"), &l.cross_attn, &mut out);
            ln_tensors!(out, format!("decoder.{i}.ln_ff"), l.ln_ff);
            out.push((format!("decoder.{i}.ff.w_in"), &l.ff.w_in));
            out.push((format!("decoder.{i}.ff.w_out"), &l.ff.w_out));
        }
        ln_tensors!(out, "dec_final_ln", self.dec_final_ln);
        out.push(("w_out".into(), &self.w_out));
        out.push(("b_out".into(), &self.b_out));
        out
    }

    /// Mutable twin of [`ModelParameters::tensors`], same order and names.
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Mat)> {
        let mut out: Vec<(String, &mut Mat)> = Vec::new();
        let fu = &mut self.fusion;
        out.push(("fusion.w_fr".into(), &mut fu.w_fr));
        out.push(("fusion.w_bx".into(), &mut fu.w_bx));
        out.push(("fusion.w_fr_obj".into(), &mut fu.w_fr_obj));
        out.push(("fusion.w_bx_obj".into(), &mut fu.w_bx_obj));
        out.push(("fusion.token_embedding".into(), &mut fu.token_embedding));
        ln_tensors!(mut out, "fusion.ln_ocr_fr", fu.ln_ocr_fr);
        ln_tensors!(mut out, "fusion.ln_ocr_bx", fu.ln_ocr_bx);
        ln_tensors!(mut out, "fusion.ln_obj_fr", fu.ln_obj_fr);
        ln_tensors!(mut out, "fusion.ln_obj_bx", fu.ln_obj_bx);
        out.push(("bucket_table".into(), &mut self.bucket_table.entries));
        if let Some(l) = &mut self.layout {
            out.push(("layout.xmin".into(), &mut l.xmin));
            out.push(("layout.ymin".into(), &mut l.ymin));
            out.push(("layout.xmax".into(), &mut l.xmax));
            out.push(("layout.ymax".into(), &mut l.ymax));
        }
        out.push(("enc_rel_bias".into(), &mut self.enc_rel_bias));
        out.push(("dec_rel_bias".into(), &mut self.dec_rel_bias));
        for (i, l) in self.encoder.iter_mut().enumerate() {
            ln_tensors!(mut out, format!("encoder.{i}.ln_attn"), l.ln_attn);
            attention_tensors_mut(&format!("encoder.{i}.attn"), &mut l.attn, &mut out);
            ln_tensors!(mut out, format!("encoder.{i}.ln_ff"), l.ln_ff);
            out.push((format!("encoder.{i}.ff.w_in"), &mut l.ff.w_in));
            out.push((format!("encoder.{i}.ff.w_out"), &mut l.ff.w_out));
        }
        ln_tensors!(mut out, "enc_final_ln", self.enc_final_ln);
        for (i, l) in self.decoder.iter_mut().enumerate() {
            ln_tensors!(mut out, format!("decoder.{i}.ln_self"), l.ln_self);
            attention_tensors_mut(&format!("decoder.{i}.self_attn"), &mut l.self_attn, &mut out);
            ln_tensors!(mut out, format!("decoder.{i}.ln_cross"), l.ln_cross);
            attention_tensors_mut(&format!("decoder.{i}.cross_attn"), &mut l.cross_attn, &mut out);
            ln_tensors!(mut out, format!("decoder.{i}.ln_ff"), l.ln_ff);
            out.push((format!("decoder.{i}.ff.w_in"), &mut l.ff.w_in));
            out.push((format!("decoder.{i}.ff.w_out"), &mut l.ff.w_out));
        }
        ln_tensors!(mut out, "dec_final_ln", self.dec_final_ln);
        out.push(("w_out".into(), &mut self.w_out));
        out.push(("b_out".into(), &mut self.b_out));
        out
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, m) in self.tensors() {
            if !m.is_finite() {
                return Err(Error::Numerical(format!("parameter `{name}` has non-finite entries")));
            }
        }
        Ok(())
    }

    /// Sets every decoder-side tensor (decoder layers, final norm, output
    /// projection) to zero. The output bias is left as is.
    pub fn zero_decoder(&mut self) {
        for l in &mut self.decoder {
            for m in [
                &mut l.self_attn.w_q,
                &mut l.self_attn.w_k,
                &mut l.self_attn.w_v,
                &mut l.self_attn.w_o,
                &mut l.cross_attn.w_q,
                &mut l.cross_attn.w_k,
                &mut l.cross_attn.w_v,
                &mut l.cross_attn.w_o,
                &mut l.ff.w_in,
                &mut l.ff.w_out,
                &mut l.ln_self.gain,
                &mut l.ln_cross.gain,
                &mut l.ln_ff.gain,
            ] {
                m.scale_assign(0.0);
            }
        }
        self.dec_final_ln.gain.scale_assign(0.0);
        self.w_out.scale_assign(0.0);
        self.dec_rel_bias.scale_assign(0.0);
    }
}

/// Gradients aligned with [`ModelParameters::tensors`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub names: Vec<String>,
    pub tensors: Vec<Mat>,
}

impl Gradients {
    pub fn zeros_like(params: &ModelParameters) -> Self {
        let (names, tensors) = params
            .tensors()
            .into_iter()
            .map(|(n, m)| (n, Mat::zeros(m.rows, m.cols)))
            .unzip();
        Self { names, tensors }
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in &mut self.tensors {
            t.scale_assign(s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors.iter().map(Mat::sum_squares).sum::<f64>().sqrt()
    }
}

/// Log-bucketed relative position (memory minus query), as in the T5 family.
pub fn relative_position_bucket(relative: i64, bidirectional: bool, num_buckets: usize, max_distance: usize) -> usize {
    let mut buckets = num_buckets as i64;
    let mut ret = 0i64;
    let mut n = -relative;
    if bidirectional {
        buckets /= 2;
        if n < 0 {
            ret += buckets;
        }
        n = n.abs();
    } else {
        n = n.max(0);
    }
    let max_exact = buckets / 2;
    let val = if n < max_exact {
        n
    } else {
        let large = max_exact as f64
            + ((n as f64 / max_exact as f64).ln() / (max_distance as f64 / max_exact as f64).ln()
                * (buckets - max_exact) as f64)
                .trunc();
        (large as i64).min(buckets - 1)
    };
    (ret + val) as usize
}

/// Encoder input: a built stream together with the entries it refers to.
#[derive(Clone, Copy, Debug)]
pub struct EncoderInput<'a> {
    pub stream: &'a TokenStream,
    pub ocr: &'a [OcrEntry],
    pub obj: &'a [ObjEntry],
}

/// Attention variables of one encoder layer, one per head.
#[derive(Clone, Debug, Default)]
pub struct AttentionTrace {
    /// Pre-softmax logits including every additive bias.
    pub logits: Vec<Var>,
    pub probs: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Encoded {
    pub out: Var,
    pub trace: Vec<AttentionTrace>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParameters,
}

struct HeadBiases {
    /// Per head, additive `n × n` terms.
    per_head: Vec<Vec<Var>>,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = ModelParameters::init(&config, seed)?;
        Ok(Self { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: ModelParameters) -> Result<Self> {
        config.validate()?;
        let m = Self { config, params };
        m.check_shapes()?;
        Ok(m)
    }

    /// Compares every tensor shape against a fresh initialization.
    pub fn check_shapes(&self) -> Result<()> {
        let fresh = ModelParameters::init(&self.config, 0)?;
        let expect = fresh.tensors();
        let got = self.params.tensors();
        if expect.len() != got.len() {
            return Err(Error::Config(format!(
                "parameter count {} does not match configuration ({})",
                got.len(),
                expect.len()
            )));
        }
        for ((en, em), (gn, gm)) in expect.iter().zip(&got) {
            if en != gn || em.shape() != gm.shape() {
                return Err(Error::Config(format!(
                    "parameter `{gn}` {:?} does not match `{en}` {:?}",
                    gm.shape(),
                    em.shape()
                )));
            }
        }
        Ok(())
    }

    fn attention(
        &self,
        tape: &mut Tape,
        query: Var,
        memory: Var,
        p: &AttentionParams,
        biases: Option<&HeadBiases>,
        causal: bool,
        mut trace: Option<&mut AttentionTrace>,
    ) -> Var {
        let h = self.config.num_heads;
        let dh = self.config.d_head();
        let scale = 1.0 / (dh as f64).sqrt();
        let (wq, wk, wv, wo) = (
            tape.param(&p.w_q),
            tape.param(&p.w_k),
            tape.param(&p.w_v),
            tape.param(&p.w_o),
        );
        let pb = p.pair_bias.as_ref().map(|b| tape.param(b));
        let q = tape.matmul(query, wq);
        let k = tape.matmul(memory, wk);
        let v = tape.matmul(memory, wv);
        let (nq, nk) = (tape.value(q).rows, tape.value(k).rows);
        let mask = causal.then(|| {
            let mut m = Mat::zeros(nq, nk);
            for i in 0..nq {
                for j in (i + 1)..nk {
                    m.set(i, j, f64::NEG_INFINITY);
                }
            }
            tape.constant(m)
        });
        let mut heads = Vec::with_capacity(h);
        for head in 0..h {
            let qh = tape.slice_cols(q, head * dh, dh);
            let kh = tape.slice_cols(k, head * dh, dh);
            let vh = tape.slice_cols(v, head * dh, dh);
            let mut s = tape.matmul_t(qh, kh);
            if let Some(pb) = pb {
                s = tape.add_scalar_at(s, pb, head);
            }
            s = tape.scale(s, scale);
            if let Some(b) = biases {
                for &term in &b.per_head[head] {
                    s = tape.add(s, term);
                }
            }
            if let Some(m) = mask {
                s = tape.add(s, m);
            }
            let a = tape.softmax(s);
            if let Some(t) = trace.as_deref_mut() {
                t.logits.push(s);
                t.probs.push(a);
            }
            heads.push(tape.matmul(a, vh));
        }
        let cat = if heads.len() == 1 { heads[0] } else { tape.concat_cols(heads) };
        tape.matmul(cat, wo)
    }

    fn feed_forward(&self, tape: &mut Tape, x: Var, p: &FeedForwardParams) -> Var {
        let w_in = tape.param(&p.w_in);
        let w_out = tape.param(&p.w_out);
        let hdn = tape.matmul(x, w_in);
        let act = tape.relu(hdn);
        tape.matmul(act, w_out)
    }

    /// Additive encoder biases per head: 1-D relative positions (unless the
    /// mode is `None`) and, in SCP mode, the distance-bucket term on the OCR
    /// block.
    fn encoder_biases(&self, tape: &mut Tape, stream: &TokenStream) -> Result<HeadBiases> {
        let cfg = &self.config;
        let n = stream.len();
        let mut per_head = vec![Vec::new(); cfg.num_heads];
        if cfg.position_mode == PositionMode::None {
            return Ok(HeadBiases { per_head });
        }
        let pos = stream.position_ids();
        let rel: Vec<Option<usize>> = (0..n * n)
            .map(|ij| {
                let (i, j) = (ij / n, ij % n);
                Some(relative_position_bucket(
                    pos[j] as i64 - pos[i] as i64,
                    true,
                    cfg.rel_pos_buckets,
                    cfg.rel_pos_max_distance,
                ))
            })
            .collect();
        let rel_table = tape.param(&self.params.enc_rel_bias);
        for (head, terms) in per_head.iter_mut().enumerate() {
            terms.push(tape.table_bias(rel_table, rel.clone(), n, head));
        }
        if cfg.position_mode == PositionMode::Scp && !stream.ocr_span.is_empty() {
            let buckets = scp_buckets(stream, self.params.bucket_table.num_buckets())?;
            let table = tape.param(&self.params.bucket_table.entries);
            for (head, terms) in per_head.iter_mut().enumerate() {
                terms.push(tape.table_bias(table, buckets.clone(), n, head));
            }
        }
        Ok(HeadBiases { per_head })
    }

    fn layout_term(&self, tape: &mut Tape, input: &EncoderInput) -> Result<Option<Var>> {
        let Some(tables) = &self.params.layout else {
            return Ok(None);
        };
        let grid = self.config.grid;
        let n = input.stream.len();
        let mut idx: [Vec<Option<usize>>; 4] = std::array::from_fn(|_| vec![None; n]);
        for (r, t) in input.stream.tokens.iter().enumerate() {
            if !matches!(t.source, TokenSource::OcrSub | TokenSource::Separator) {
                continue;
            }
            let e = t
                .entry_index
                .and_then(|e| input.ocr.get(e))
                .ok_or_else(|| Error::Internal(format!("OCR token {r} without a valid entry")))?;
            let b = e.bbox;
            idx[0][r] = Some(PatchGrid::cell_along(b.xmin, grid.cols));
            idx[1][r] = Some(PatchGrid::cell_along(b.ymin, grid.rows));
            idx[2][r] = Some(PatchGrid::cell_along(b.xmax, grid.cols));
            idx[3][r] = Some(PatchGrid::cell_along(b.ymax, grid.rows));
        }
        let mut parts = Vec::with_capacity(4);
        for (table, idx) in [&tables.xmin, &tables.ymin, &tables.xmax, &tables.ymax]
            .into_iter()
            .zip(idx)
        {
            let t = tape.param(table);
            parts.push(tape.gather_rows(t, idx));
        }
        Ok(Some(tape.sum(parts)))
    }

    pub fn encode(&self, tape: &mut Tape, input: &EncoderInput) -> Result<Encoded> {
        let mut x = assemble_input(tape, input.stream, input.ocr, input.obj, &self.params.fusion)?;
        if let Some(l) = self.layout_term(tape, input)? {
            x = tape.add(x, l);
        }
        if !tape.value(x).is_finite() {
            return Err(Error::Numerical("non-finite encoder input rows".into()));
        }
        let biases = self.encoder_biases(tape, input.stream)?;
        let mut trace = Vec::with_capacity(self.params.encoder.len());
        for layer in &self.params.encoder {
            let mut t = AttentionTrace::default();
            let h = layer.ln_attn.on_tape(tape, x);
            let a = self.attention(tape, h, h, &layer.attn, Some(&biases), false, Some(&mut t));
            x = tape.add(x, a);
            let h = layer.ln_ff.on_tape(tape, x);
            let f = self.feed_forward(tape, h, &layer.ff);
            x = tape.add(x, f);
            trace.push(t);
        }
        if !self.params.encoder.is_empty() {
            x = self.params.enc_final_ln.on_tape(tape, x);
        }
        if !tape.value(x).is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite encoder output for a {}-token stream",
                input.stream.len()
            )));
        }
        Ok(Encoded { out: x, trace })
    }

    /// Teacher-forced decoder logits. `decoder_ids` starts with the start
    /// token; row `t` holds the logits predicting the token after
    /// `decoder_ids[..=t]`.
    pub fn decoder_logits(&self, tape: &mut Tape, enc_out: Var, decoder_ids: &[usize]) -> Result<Var> {
        let cfg = &self.config;
        if decoder_ids.is_empty() || decoder_ids.len() > cfg.max_decode_steps {
            return Err(Error::InvalidInput(format!(
                "decoder input of {} tokens outside 1..={}",
                decoder_ids.len(),
                cfg.max_decode_steps
            )));
        }
        if let Some(&bad) = decoder_ids.iter().find(|&&id| id >= cfg.vocab_size) {
            return Err(Error::InvalidInput(format!("decoder token {bad} outside vocabulary")));
        }
        let n = decoder_ids.len();
        let emb = tape.param(&self.params.fusion.token_embedding);
        let mut y = tape.gather_rows(emb, decoder_ids.iter().map(|&i| Some(i)).collect());
        let rel: Vec<Option<usize>> = (0..n * n)
            .map(|ij| {
                let (i, j) = (ij / n, ij % n);
                Some(relative_position_bucket(
                    j as i64 - i as i64,
                    false,
                    cfg.rel_pos_buckets,
                    cfg.rel_pos_max_distance,
                ))
            })
            .collect();
        let rel_table = tape.param(&self.params.dec_rel_bias);
        let per_head = (0..cfg.num_heads)
            .map(|h| vec![tape.table_bias(rel_table, rel.clone(), n, h)])
            .collect();
        let biases = HeadBiases { per_head };
        for layer in &self.params.decoder {
            let h = layer.ln_self.on_tape(tape, y);
            let a = self.attention(tape, h, h, &layer.self_attn, Some(&biases), true, None);
            y = tape.add(y, a);
            let h = layer.ln_cross.on_tape(tape, y);
            let c = self.attention(tape, h, enc_out, &layer.cross_attn, None, false, None);
            y = tape.add(y, c);
            let h = layer.ln_ff.on_tape(tape, y);
            let f = self.feed_forward(tape, h, &layer.ff);
            y = tape.add(y, f);
        }
        let y = self.params.dec_final_ln.on_tape(tape, y);
        let w = tape.param(&self.params.w_out);
        let b = tape.param(&self.params.b_out);
        let logits = tape.matmul(y, w);
        Ok(tape.add_row(logits, b))
    }

    /// Logits for the token following `prefix` (answer tokens generated so
    /// far, start token excluded).
    pub fn decode_step(&self, tape: &mut Tape, enc_out: Var, prefix: &[usize]) -> Result<Vec<f64>> {
        if prefix.len() >= self.config.max_decode_steps {
            return Err(Error::InvalidInput(format!(
                "prefix of {} tokens leaves no room under max_decode_steps {}",
                prefix.len(),
                self.config.max_decode_steps
            )));
        }
        let mut ids = Vec::with_capacity(prefix.len() + 1);
        ids.push(PAD_ID);
        ids.extend_from_slice(prefix);
        let logits = self.decoder_logits(tape, enc_out, &ids)?;
        let m = tape.value(logits);
        Ok(m.row(m.rows - 1).to_vec())
    }

    /// Greedy answer ids, EOS excluded.
    pub fn greedy_decode(&self, input: &EncoderInput) -> Result<Vec<usize>> {
        let mut tape = Tape::new();
        let enc = self.encode(&mut tape, input)?;
        self.greedy_from(&mut tape, enc.out)
    }

    pub fn greedy_from(&self, tape: &mut Tape, enc_out: Var) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        while out.len() < self.config.max_decode_steps {
            let logits = self.decode_step(tape, enc_out, &out)?;
            let next = argmax(&logits);
            if next == EOS_ID {
                break;
            }
            out.push(next);
        }
        Ok(out)
    }

    /// Mean BCE over steps and vocabulary of the teacher-forced decoder.
    pub fn sample_loss(
        &self,
        tape: &mut Tape,
        input: &EncoderInput,
        decoder_ids: &[usize],
        targets: &Mat,
    ) -> Result<Var> {
        let enc = self.encode(tape, input)?;
        let logits = self.decoder_logits(tape, enc.out, decoder_ids)?;
        if tape.value(logits).shape() != targets.shape() {
            return Err(Error::Internal(format!(
                "targets {:?} vs logits {:?}",
                targets.shape(),
                tape.value(logits).shape()
            )));
        }
        Ok(tape.bce_mean(logits, targets.clone()))
    }

    /// Collects tape gradients in [`ModelParameters::tensors`] order; unused
    /// tensors get zeros.
    pub fn gradients(&self, grads: &Grads) -> Gradients {
        let (names, tensors) = self
            .params
            .tensors()
            .into_iter()
            .map(|(name, m)| {
                let g = grads.param(m).cloned().unwrap_or_else(|| Mat::zeros(m.rows, m.cols));
                (name, g)
            })
            .unzip();
        Gradients { names, tensors }
    }
}

/// Bucket index per OCR↔OCR pair, `None` elsewhere; row-major `n × n`.
pub fn scp_buckets(stream: &TokenStream, num_buckets: usize) -> Result<Vec<Option<usize>>> {
    let n = stream.len();
    let span = stream.ocr_span.clone();
    let mut out = vec![None; n * n];
    for i in span.clone() {
        let pi = stream.tokens[i]
            .patch
            .ok_or_else(|| Error::Internal(format!("OCR token {i} has no patch")))?;
        for j in span.clone() {
            let pj = stream.tokens[j]
                .patch
                .ok_or_else(|| Error::Internal(format!("OCR token {j} has no patch")))?;
            out[i * n + j] = Some(bucketize(circle_distance(pi, pj), num_buckets)?);
        }
    }
    Ok(out)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
