//! The self-accumulative transformer.
//!
//! The encoder sees a sequence of `2R` tokens: `R` learnable CLS tokens, one
//! per region, followed by the `R` regional tokens produced by the embedder.
//! Two switches distinguish the full model from a plain multi-view
//! multi-task ViT:
//!
//! * **Token replay** adds the original regional tokens `z0` onto the CLS half
//!   of the sequence after every encoder layer.
//! * **Regional attention bias** adds `tanh(b_r + 1) / 2` to the pre-softmax
//!   logit where CLS query `r` meets regional key `r`. The scalars `b` are
//!   learned per layer and per region and shared across heads.
//!
//! Head `r` is a single dense layer over the final CLS token `r`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedder::{EmbedderConfig, RegionEmbedder};
use crate::error::{dim_err, Result, SatError};
use crate::params::{trunc_normal, Bound, ParamStore};
use crate::tensor::{Real, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SatConfig {
    pub num_regions: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub class_counts: Vec<usize>,
    pub token_replay: bool,
    pub rab: bool,
    pub mlp_ratio: usize,
    pub dropout: f64,
    pub layernorm_eps: f64,
    pub in_channels: usize,
    pub image_size: usize,
    pub channel_widths: Vec<usize>,
    pub shared_embedder: bool,
}

impl Default for SatConfig {
    /// Desk-scale preset.
    fn default() -> Self {
        SatConfig {
            num_regions: 5,
            embed_dim: 32,
            depth: 2,
            num_heads: 2,
            class_counts: vec![9, 5, 6, 7, 6],
            token_replay: true,
            rab: true,
            mlp_ratio: 4,
            dropout: 0.0,
            layernorm_eps: 1e-5,
            in_channels: 1,
            image_size: 32,
            channel_widths: vec![8, 16, 32],
            shared_embedder: true,
        }
    }
}

impl SatConfig {
    /// Encoder dimensions used for the clinical-scale model (d=384, 12 layers, 6 heads).
    pub fn clinical_scale() -> Self {
        SatConfig { embed_dim: 384, depth: 12, num_heads: 6, image_size: 384, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(SatError::Config(msg));
        if self.num_regions == 0 || self.depth == 0 {
            return fail(format!("need R >= 1 and L >= 1, got R={} L={}", self.num_regions, self.depth));
        }
        if self.num_heads == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return fail(format!("embed_dim {} not divisible by {} heads", self.embed_dim, self.num_heads));
        }
        if self.class_counts.len() != self.num_regions {
            return fail(format!("{} class counts for {} regions", self.class_counts.len(), self.num_regions));
        }
        if let Some(k) = self.class_counts.iter().find(|&&k| k < 2) {
            return fail(format!("every region needs at least 2 classes, got {k}"));
        }
        if self.mlp_ratio == 0 {
            return fail("mlp_ratio must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.layernorm_eps <= 0.0 {
            return fail("layernorm_eps must be positive".into());
        }
        self.embedder_config().validate()
    }

    pub fn embedder_config(&self) -> EmbedderConfig {
        EmbedderConfig {
            in_channels: self.in_channels,
            image_size: self.image_size,
            channel_widths: self.channel_widths.clone(),
            embed_dim: self.embed_dim,
        }
    }

    pub fn seq_len(&self) -> usize {
        2 * self.num_regions
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }
}

/// `tanh(b + 1) / 2`, the bias added at a CLS-to-own-region attention logit.
pub fn rab_value(b: f64) -> f64 {
    (b + 1.0).tanh() * 0.5
}

/// Per-layer attention for one sample and head, `2R × 2R`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    pub layer: usize,
    pub head: usize,
    pub pre_softmax: Tensor<f64>,
    pub post_softmax: Tensor<f64>,
}

/// Attention tensors of one layer, `[B·heads, 2R, 2R]`.
#[derive(Clone, Copy, Debug)]
pub struct LayerAttention {
    pub pre_softmax: Var,
    pub post_softmax: Var,
}

#[derive(Clone, Debug)]
pub struct SatOutput {
    /// One `[B, K_r]` tensor per region.
    pub logits: Vec<Var>,
    pub attention: Vec<LayerAttention>,
    /// Regional tokens before layer 1, `[B, R, d]`.
    pub regional_tokens: Var,
    /// Final CLS half of the sequence, `[B, R, d]`.
    pub cls_features: Var,
    pub num_heads: usize,
}

impl SatOutput {
    pub fn records<T: Real>(&self, tape: &Tape<T>, sample: usize) -> Vec<AttentionRecord> {
        let mut out = Vec::new();
        for (layer, att) in self.attention.iter().enumerate() {
            let pre = tape.value(att.pre_softmax);
            let post = tape.value(att.post_softmax);
            let n = pre.shape()[1];
            for head in 0..self.num_heads {
                let offset = (sample * self.num_heads + head) * n * n;
                let slice = |t: &Tensor<T>| {
                    Tensor::new(vec![n, n], t.data()[offset..offset + n * n].iter().map(|v| v.as_f64()).collect())
                        .expect("square slice")
                };
                out.push(AttentionRecord { layer, head, pre_softmax: slice(pre), post_softmax: slice(post) });
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ForwardMode {
    Eval,
    /// Dropout masks are drawn from a generator seeded with `dropout_seed`.
    Train {
        dropout_seed: u64,
    },
}

pub struct SatModel<T> {
    config: SatConfig,
    embedder: RegionEmbedder,
    pub params: ParamStore<T>,
}

impl<T: Real> Clone for SatModel<T> {
    fn clone(&self) -> Self {
        SatModel { config: self.config.clone(), embedder: self.embedder.clone(), params: self.params.clone() }
    }
}

fn layer_name(l: usize, suffix: &str) -> String {
    format!("layers.{l}.{suffix}")
}

impl<T: Real> SatModel<T> {
    /// Fresh parameters: truncated normal (std 0.02) for projections and CLS
    /// tokens, zero biases, unit layernorm gains, RAB scalars at -1.
    pub fn new(config: SatConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let embedder = RegionEmbedder::new(config.embedder_config(), config.num_regions, config.shared_embedder)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        embedder.init_params(&mut params, &mut rng)?;
        let (r, d) = (config.num_regions, config.embed_dim);
        let hidden = d * config.mlp_ratio;
        params.insert("cls_tokens", trunc_normal(&[r, d], 0.02, &mut rng))?;
        for l in 0..config.depth {
            let mut dense = |name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng| -> Result<()> {
                params.insert(layer_name(l, &format!("{name}.weight")), trunc_normal(&[fan_in, fan_out], 0.02, rng))?;
                params.insert(layer_name(l, &format!("{name}.bias")), Tensor::zeros(&[fan_out]))
            };
            for name in ["attn.q", "attn.k", "attn.v", "attn.o"] {
                dense(name, d, d, &mut rng)?;
            }
            dense("mlp.fc1", d, hidden, &mut rng)?;
            dense("mlp.fc2", hidden, d, &mut rng)?;
            for ln in ["ln1", "ln2"] {
                params.insert(layer_name(l, &format!("{ln}.gain")), Tensor::full(&[d], T::one()))?;
                params.insert(layer_name(l, &format!("{ln}.bias")), Tensor::zeros(&[d]))?;
            }
        }
        if config.rab {
            params.insert("rab_scalars", Tensor::full(&[config.depth, r], T::of(-1.0)))?;
        }
        for (i, &k) in config.class_counts.iter().enumerate() {
            params.insert(format!("heads.{i}.weight"), trunc_normal(&[d, k], 0.02, &mut rng))?;
            params.insert(format!("heads.{i}.bias"), Tensor::zeros(&[k]))?;
        }
        Ok(SatModel { config, embedder, params })
    }

    /// Wraps existing parameters, checking names and shapes against a fresh layout.
    pub fn from_params(config: SatConfig, params: ParamStore<T>) -> Result<Self> {
        let reference = SatModel::<T>::new(config.clone(), 0)?;
        if reference.params.len() != params.len() {
            return Err(SatError::Config(format!(
                "parameter count {} does not match the configured model ({})",
                params.len(),
                reference.params.len()
            )));
        }
        for (want, have) in reference.params.iter().zip(params.iter()) {
            if want.name != have.name || want.value.shape() != have.value.shape() {
                return Err(SatError::Config(format!(
                    "parameter {} {:?} does not match expected {} {:?}",
                    have.name,
                    have.value.shape(),
                    want.name,
                    want.value.shape()
                )));
            }
        }
        Ok(SatModel { config, embedder: reference.embedder, params })
    }

    pub fn config(&self) -> &SatConfig {
        &self.config
    }

    pub fn cast<U: Real>(&self) -> SatModel<U> {
        SatModel { config: self.config.clone(), embedder: self.embedder.clone(), params: self.params.cast() }
    }

    /// images[B,R,C,H,W] → per-region logits.
    pub fn forward(&self, tape: &mut Tape<T>, params: &Bound, images: Var, mode: ForwardMode) -> Result<SatOutput> {
        let tokens = self.embedder.embed_batch(tape, params, images)?;
        self.encode(tape, params, tokens, mode)
    }

    /// Convenience: binds parameters on a fresh tape and runs a forward pass.
    pub fn run(&self, images: &Tensor<T>, mode: ForwardMode) -> Result<(Tape<T>, Bound, SatOutput)> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let input = tape.constant(images.clone());
        let out = self.forward(&mut tape, &bound, input, mode)?;
        Ok((tape, bound, out))
    }

    /// Regional tokens z0[B,R,d] → per-region logits.
    pub fn encode(&self, tape: &mut Tape<T>, params: &Bound, z0: Var, mode: ForwardMode) -> Result<SatOutput> {
        let cfg = &self.config;
        let (r, d) = (cfg.num_regions, cfg.embed_dim);
        let shape = tape.shape(z0).to_vec();
        if shape.len() != 3 || shape[1] != r || shape[2] != d {
            return Err(SatError::Contract(format!("regional tokens must be [B,{r},{d}], got {shape:?}")));
        }
        let batch = shape[0];
        let mut dropout_rng = match mode {
            ForwardMode::Train { dropout_seed } if cfg.dropout > 0.0 => Some(ChaCha8Rng::seed_from_u64(dropout_seed)),
            _ => None,
        };

        let cls = tape.tile_leading(params.var("cls_tokens")?, batch)?;
        let mut x = tape.concat(&[cls, z0], 1)?;
        let replay = if cfg.token_replay {
            let zeros = tape.constant(Tensor::zeros(&[batch, r, d]));
            Some(tape.concat(&[z0, zeros], 1)?)
        } else {
            None
        };

        let mut attention = Vec::with_capacity(cfg.depth);
        for l in 0..cfg.depth {
            let bias = if cfg.rab { Some(self.layer_bias(tape, params, l)?) } else { None };
            let (next, att) = self.encoder_layer(tape, params, l, x, bias, dropout_rng.as_mut())?;
            x = next;
            if let Some(rp) = replay {
                x = tape.add(x, rp)?;
            }
            attention.push(att);
        }

        let cls_features = tape.narrow(x, 1, 0, r)?;
        let mut logits = Vec::with_capacity(r);
        for region in 0..r {
            let tok = tape.narrow(cls_features, 1, region, 1)?;
            let tok = tape.reshape(tok, &[batch, d])?;
            let h = tape.matmul(tok, params.var(&format!("heads.{region}.weight"))?)?;
            logits.push(tape.add(h, params.var(&format!("heads.{region}.bias"))?)?);
        }
        Ok(SatOutput { logits, attention, regional_tokens: z0, cls_features, num_heads: cfg.num_heads })
    }

    /// The `[2R,2R]` regional attention bias of layer `l`.
    pub fn layer_bias(&self, tape: &mut Tape<T>, params: &Bound, l: usize) -> Result<Var> {
        let r = self.config.num_regions;
        let row = tape.narrow(params.var("rab_scalars")?, 0, l, 1)?;
        let b = tape.reshape(row, &[r])?;
        let shifted = tape.add_scalar(b, T::one())?;
        let t = tape.tanh(shifted)?;
        let dvals = tape.scale(t, T::of(0.5))?;
        tape.bias_matrix(dvals, r)
    }

    /// Pre-norm block: x + MHSA(LN(x)) with optional additive bias on the
    /// scaled logits, then x + MLP(LN(x)).
    pub fn encoder_layer(
        &self,
        tape: &mut Tape<T>,
        params: &Bound,
        l: usize,
        x: Var,
        bias: Option<Var>,
        mut dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<(Var, LayerAttention)> {
        let cfg = &self.config;
        let (d, heads, dh) = (cfg.embed_dim, cfg.num_heads, cfg.head_dim());
        let seq = cfg.seq_len();
        let shape = tape.shape(x).to_vec();
        if shape.len() != 3 || shape[1] != seq || shape[2] != d {
            return Err(SatError::Contract(format!("encoder layer expects [B,{seq},{d}], got {shape:?}")));
        }
        let batch = shape[0];
        let p = |name: &str| params.var(&layer_name(l, name));

        let h = tape.layernorm(x, p("ln1.gain")?, p("ln1.bias")?, cfg.layernorm_eps)?;
        let flat = tape.reshape(h, &[batch * seq, d])?;
        let project = |tape: &mut Tape<T>, name: &str| -> Result<Var> {
            let y = tape.matmul(flat, p(&format!("attn.{name}.weight"))?)?;
            let y = tape.add(y, p(&format!("attn.{name}.bias"))?)?;
            let y = tape.reshape(y, &[batch, seq, heads, dh])?;
            let y = tape.permute(y, &[0, 2, 1, 3])?;
            tape.reshape(y, &[batch * heads, seq, dh])
        };
        let q = project(tape, "q")?;
        let k = project(tape, "k")?;
        let v = project(tape, "v")?;
        let scores = tape.bmm(q, k, true)?;
        let mut pre = tape.scale(scores, T::one() / T::of(dh as f64).sqrt())?;
        if let Some(b) = bias {
            if tape.shape(b) != [seq, seq] {
                return Err(dim_err!("attention bias must be [{seq},{seq}], got {:?}", tape.shape(b)));
            }
            pre = tape.add(pre, b)?;
        }
        let post = tape.softmax_rows(pre)?;
        let ctx = tape.bmm(post, v, false)?;
        let ctx = tape.reshape(ctx, &[batch, heads, seq, dh])?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[batch * seq, d])?;
        let o = tape.matmul(ctx, p("attn.o.weight")?)?;
        let o = tape.add(o, p("attn.o.bias")?)?;
        let o = self.dropout(tape, o, dropout.as_deref_mut())?;
        let o = tape.reshape(o, &[batch, seq, d])?;
        let x = tape.add(x, o)?;

        let h = tape.layernorm(x, p("ln2.gain")?, p("ln2.bias")?, cfg.layernorm_eps)?;
        let flat = tape.reshape(h, &[batch * seq, d])?;
        let m = tape.matmul(flat, p("mlp.fc1.weight")?)?;
        let m = tape.add(m, p("mlp.fc1.bias")?)?;
        let m = tape.gelu(m)?;
        let m = tape.matmul(m, p("mlp.fc2.weight")?)?;
        let m = tape.add(m, p("mlp.fc2.bias")?)?;
        let m = self.dropout(tape, m, dropout)?;
        let m = tape.reshape(m, &[batch, seq, d])?;
        let x = tape.add(x, m)?;
        Ok((x, LayerAttention { pre_softmax: pre, post_softmax: post }))
    }

    fn dropout(&self, tape: &mut Tape<T>, x: Var, rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
        let Some(rng) = rng else { return Ok(x) };
        let keep = 1.0 - self.config.dropout;
        let scale = T::of(1.0 / keep);
        let shape = tape.shape(x).to_vec();
        let mask: Vec<T> =
            (0..tape.value(x).numel()).map(|_| if rng.random::<f64>() < keep { scale } else { T::zero() }).collect();
        let mask = tape.constant(Tensor::new(shape, mask)?);
        tape.mul(x, mask)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    /// Round the expected score half away from zero, then clamp to `[1, K]`.
    #[default]
    Expected,
    /// Most probable class; ties resolve to the lowest score.
    Argmax,
}

/// Σ k·p_k over 1-indexed scores.
pub fn expected_score(probs: &[f64]) -> f64 {
    probs.iter().enumerate().map(|(k, &p)| (k + 1) as f64 * p).sum()
}

fn softmax_f64(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Discrete score from one row of logits.
pub fn score_from_logits(logits: &[f64], mode: ScoreMode) -> u32 {
    let k = logits.len();
    match mode {
        ScoreMode::Expected => {
            let mu = expected_score(&softmax_f64(logits));
            mu.round().clamp(1.0, k as f64) as u32
        }
        ScoreMode::Argmax => {
            let mut best = 0;
            for (i, &v) in logits.iter().enumerate() {
                if v > logits[best] {
                    best = i;
                }
            }
            best as u32 + 1
        }
    }
}

/// Scores `[B][R]` from per-region logits `[B, K_r]`.
pub fn predict_scores<T: Real>(logits: &[&Tensor<T>], mode: ScoreMode) -> Vec<Vec<u32>> {
    let batch = logits.first().map_or(0, |t| t.shape()[0]);
    (0..batch)
        .map(|b| {
            logits
                .iter()
                .map(|t| {
                    let k = t.shape()[1];
                    let row: Vec<f64> = t.data()[b * k..(b + 1) * k].iter().map(|v| v.as_f64()).collect();
                    score_from_logits(&row, mode)
                })
                .collect()
        })
        .collect()
}

/// Draws a standard-normal tensor; handy for tests and probes.
pub fn random_tensor<T: Real, R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<T> {
    use rand_distr::{Distribution, StandardNormal};
    let data = (0..shape.iter().product::<usize>())
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::of(z * std)
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}
