//! Pre-norm Transformer encoder and decoder blocks.
//!
//! Hidden states of a batch are laid out as `[batch*len, d_model]` matrices
//! so every projection is a single matrix product.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{AttnGeometry, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Float, ParamId, ParamStore, Precision, Tensor};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    /// Blocks per stack in the bottom module (N).
    pub n_bottom_blocks: usize,
    /// Blocks per stack added by growing (M).
    pub n_top_blocks: usize,
    /// Includes the four reserved ids.
    pub vocab_size: usize,
    pub dropout: f64,
    pub max_len: usize,
    pub precision: Precision,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            d_ff: 256,
            n_heads: 4,
            n_bottom_blocks: 2,
            n_top_blocks: 1,
            vocab_size: 64,
            dropout: 0.1,
            max_len: 64,
            precision: Precision::F32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.d_ff == 0 || self.max_len == 0 {
            return fail("d_ff and max_len must be positive".into());
        }
        if self.n_bottom_blocks == 0 || self.n_top_blocks == 0 {
            return fail("n_bottom_blocks and n_top_blocks must be at least 1".into());
        }
        if self.vocab_size <= crate::data::NUM_RESERVED {
            return fail(format!(
                "vocab_size {} leaves no room for tokens",
                self.vocab_size
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} not in [0,1)", self.dropout));
        }
        Ok(())
    }
}

/// Draws initial values for freshly registered parameters.
pub struct Initializer {
    rng: ChaCha8Rng,
    /// Zero the output projection of every attention and feed-forward sublayer.
    pub zero_output_projections: bool,
}

impl Initializer {
    pub fn new(seed: u64, zero_output_projections: bool) -> Self {
        use rand::SeedableRng;
        Initializer {
            rng: ChaCha8Rng::seed_from_u64(seed),
            zero_output_projections,
        }
    }

    pub fn xavier<F: Float>(&mut self, fan_in: usize, fan_out: usize) -> Tensor<F> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| F::from_f64_lossy(self.rng.random_range(-bound..bound)))
            .collect();
        Tensor::new(vec![fan_in, fan_out], data).expect("shape")
    }

    pub fn normal<F: Float>(&mut self, shape: &[usize], std: f64) -> Tensor<F> {
        let dist = Normal::new(0.0, std).expect("std");
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| F::from_f64_lossy(dist.sample(&mut self.rng)))
            .collect();
        Tensor::new(shape.to_vec(), data).expect("shape")
    }

    fn output<F: Float>(&mut self, fan_in: usize, fan_out: usize) -> Tensor<F> {
        if self.zero_output_projections {
            Tensor::zeros(&[fan_in, fan_out])
        } else {
            self.xavier(fan_in, fan_out)
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormParams {
    pub fn register<F: Float>(store: &mut ParamStore<F>, prefix: &str, d: usize) -> Result<Self> {
        Ok(LayerNormParams {
            gain: store.add(
                &format!("{prefix}.gain"),
                Tensor::full(&[d], F::one()),
                true,
            )?,
            bias: store.add(&format!("{prefix}.bias"), Tensor::zeros(&[d]), true)?,
        })
    }

    pub fn forward<F: Float>(&self, tape: &mut Tape<'_, F>, x: Var) -> Result<Var> {
        let (g, b) = (tape.param(self.gain), tape.param(self.bias));
        tape.layer_norm(x, g, b, LN_EPS)
    }
}

/// Bias-free query/key/value/output projections of one attention sublayer.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

impl AttentionParams {
    pub fn register<F: Float>(
        store: &mut ParamStore<F>,
        prefix: &str,
        d: usize,
        init: &mut Initializer,
    ) -> Result<Self> {
        Ok(AttentionParams {
            wq: store.add(&format!("{prefix}.wq"), init.xavier(d, d), true)?,
            wk: store.add(&format!("{prefix}.wk"), init.xavier(d, d), true)?,
            wv: store.add(&format!("{prefix}.wv"), init.xavier(d, d), true)?,
            wo: store.add(&format!("{prefix}.wo"), init.output(d, d), true)?,
        })
    }

    /// Projects `queries` and `memory`, attends, and projects back.
    pub fn forward<F: Float>(
        &self,
        tape: &mut Tape<'_, F>,
        queries: Var,
        memory: Var,
        geom: AttnGeometry,
    ) -> Result<Var> {
        let (wq, wk, wv, wo) = (
            tape.param(self.wq),
            tape.param(self.wk),
            tape.param(self.wv),
            tape.param(self.wo),
        );
        let q = tape.matmul(queries, wq)?;
        let k = tape.matmul(memory, wk)?;
        let v = tape.matmul(memory, wv)?;
        let ctx = tape.attention(q, k, v, geom)?;
        tape.matmul(ctx, wo)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FeedForwardParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl FeedForwardParams {
    pub fn register<F: Float>(
        store: &mut ParamStore<F>,
        prefix: &str,
        d: usize,
        d_ff: usize,
        init: &mut Initializer,
    ) -> Result<Self> {
        Ok(FeedForwardParams {
            w1: store.add(&format!("{prefix}.w1"), init.xavier(d, d_ff), true)?,
            b1: store.add(&format!("{prefix}.b1"), Tensor::zeros(&[d_ff]), true)?,
            w2: store.add(&format!("{prefix}.w2"), init.output(d_ff, d), true)?,
            b2: store.add(&format!("{prefix}.b2"), Tensor::zeros(&[d]), true)?,
        })
    }

    pub fn forward<F: Float>(&self, tape: &mut Tape<'_, F>, x: Var) -> Result<Var> {
        let (w1, b1, w2, b2) = (
            tape.param(self.w1),
            tape.param(self.b1),
            tape.param(self.w2),
            tape.param(self.b2),
        );
        let h = tape.linear(x, w1, Some(b1))?;
        let h = tape.relu(h)?;
        tape.linear(h, w2, Some(b2))
    }
}

/// Shape and padding of one side of a batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeqLayout {
    pub batch: usize,
    pub len: usize,
    /// `[batch*len]`, `true` at padded positions.
    pub pad: Vec<bool>,
}

impl SeqLayout {
    pub fn unpadded(batch: usize, len: usize) -> Self {
        SeqLayout {
            batch,
            len,
            pad: vec![false; batch * len],
        }
    }

    fn has_pad(&self) -> bool {
        self.pad.iter().any(|&p| p)
    }

    pub fn self_geometry(&self, heads: usize, causal: bool) -> AttnGeometry {
        AttnGeometry {
            batch: self.batch,
            heads,
            q_len: self.len,
            k_len: self.len,
            causal,
            key_pad: self.has_pad().then(|| self.pad.clone()),
        }
    }

    pub fn cross_geometry(&self, memory: &SeqLayout, heads: usize) -> AttnGeometry {
        AttnGeometry {
            batch: self.batch,
            heads,
            q_len: self.len,
            k_len: memory.len,
            causal: false,
            key_pad: memory.has_pad().then(|| memory.pad.clone()),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderBlock {
    pub ln_self: LayerNormParams,
    pub self_attn: AttentionParams,
    pub ln_ff: LayerNormParams,
    pub ffn: FeedForwardParams,
}

impl EncoderBlock {
    pub fn register<F: Float>(
        store: &mut ParamStore<F>,
        prefix: &str,
        cfg: &ModelConfig,
        init: &mut Initializer,
    ) -> Result<Self> {
        let d = cfg.d_model;
        Ok(EncoderBlock {
            ln_self: LayerNormParams::register(store, &format!("{prefix}.ln_self"), d)?,
            self_attn: AttentionParams::register(store, &format!("{prefix}.self_attn"), d, init)?,
            ln_ff: LayerNormParams::register(store, &format!("{prefix}.ln_ff"), d)?,
            ffn: FeedForwardParams::register(store, &format!("{prefix}.ffn"), d, cfg.d_ff, init)?,
        })
    }

    /// `x + SelfAttn(LN(x))`, then `+ FFN(LN(.))`.
    pub fn forward<F: Float>(
        &self,
        tape: &mut Tape<'_, F>,
        x: Var,
        layout: &SeqLayout,
        heads: usize,
        dropout: f64,
    ) -> Result<Var> {
        let h = self.ln_self.forward(tape, x)?;
        let a = self
            .self_attn
            .forward(tape, h, h, layout.self_geometry(heads, false))?;
        let a = tape.dropout(a, dropout)?;
        let x = tape.add(x, a)?;
        let h = self.ln_ff.forward(tape, x)?;
        let f = self.ffn.forward(tape, h)?;
        let f = tape.dropout(f, dropout)?;
        tape.add(x, f)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderBlock {
    pub ln_self: LayerNormParams,
    pub self_attn: AttentionParams,
    pub ln_cross: LayerNormParams,
    pub cross_attn: AttentionParams,
    pub ln_ff: LayerNormParams,
    pub ffn: FeedForwardParams,
}

impl DecoderBlock {
    pub fn register<F: Float>(
        store: &mut ParamStore<F>,
        prefix: &str,
        cfg: &ModelConfig,
        init: &mut Initializer,
    ) -> Result<Self> {
        let d = cfg.d_model;
        Ok(DecoderBlock {
            ln_self: LayerNormParams::register(store, &format!("{prefix}.ln_self"), d)?,
            self_attn: AttentionParams::register(store, &format!("{prefix}.self_attn"), d, init)?,
            ln_cross: LayerNormParams::register(store, &format!("{prefix}.ln_cross"), d)?,
            cross_attn: AttentionParams::register(store, &format!("{prefix}.cross_attn"), d, init)?,
            ln_ff: LayerNormParams::register(store, &format!("{prefix}.ln_ff"), d)?,
            ffn: FeedForwardParams::register(store, &format!("{prefix}.ffn"), d, cfg.d_ff, init)?,
        })
    }

    /// Causal self-attention, cross-attention over `memory`, feed-forward.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<F: Float>(
        &self,
        tape: &mut Tape<'_, F>,
        y: Var,
        layout: &SeqLayout,
        memory: Var,
        memory_layout: &SeqLayout,
        heads: usize,
        dropout: f64,
    ) -> Result<Var> {
        let h = self.ln_self.forward(tape, y)?;
        let a = self
            .self_attn
            .forward(tape, h, h, layout.self_geometry(heads, true))?;
        let a = tape.dropout(a, dropout)?;
        let y = tape.add(y, a)?;
        let h = self.ln_cross.forward(tape, y)?;
        let c = self.cross_attn.forward(
            tape,
            h,
            memory,
            layout.cross_geometry(memory_layout, heads),
        )?;
        let c = tape.dropout(c, dropout)?;
        let y = tape.add(y, c)?;
        let h = self.ln_ff.forward(tape, y)?;
        let f = self.ffn.forward(tape, h)?;
        let f = tape.dropout(f, dropout)?;
        tape.add(y, f)
    }
}

/// Blocks followed by a final layer norm.
#[derive(Clone, Debug)]
pub struct EncoderStack {
    pub blocks: Vec<EncoderBlock>,
    pub final_ln: LayerNormParams,
}

impl EncoderStack {
    pub fn register<F: Float>(
        store: &mut ParamStore<F>,
        prefix: &str,
        n_blocks: usize,
        cfg: &ModelConfig,
        init: &mut Initializer,
    ) -> Result<Self> {
        let blocks = (0..n_blocks)
            .map(|i| EncoderBlock::register(store, &format!("{prefix}.{i}"), cfg, init))
            .collect::<Result<_>>()?;
        let final_ln =
            LayerNormParams::register(store, &format!("{prefix}.final_ln"), cfg.d_model)?;
        Ok(EncoderStack { blocks, final_ln })
    }

    pub fn forward<F: Float>(
        &self,
        tape: &mut Tape<'_, F>,
        x: Var,
        layout: &SeqLayout,
        heads: usize,
        dropout: f64,
    ) -> Result<Var> {
        let mut h = x;
        for block in &self.blocks {
            h = block.forward(tape, h, layout, heads, dropout)?;
        }
        self.final_ln.forward(tape, h)
    }
}

#[derive(Clone, Debug)]
pub struct DecoderStack {
    pub blocks: Vec<DecoderBlock>,
    pub final_ln: LayerNormParams,
}

impl DecoderStack {
    pub fn register<F: Float>(
        store: &mut ParamStore<F>,
        prefix: &str,
        n_blocks: usize,
        cfg: &ModelConfig,
        init: &mut Initializer,
    ) -> Result<Self> {
        let blocks = (0..n_blocks)
            .map(|i| DecoderBlock::register(store, &format!("{prefix}.{i}"), cfg, init))
            .collect::<Result<_>>()?;
        let final_ln =
            LayerNormParams::register(store, &format!("{prefix}.final_ln"), cfg.d_model)?;
        Ok(DecoderStack { blocks, final_ln })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward<F: Float>(
        &self,
        tape: &mut Tape<'_, F>,
        y: Var,
        layout: &SeqLayout,
        memory: Var,
        memory_layout: &SeqLayout,
        heads: usize,
        dropout: f64,
    ) -> Result<Var> {
        let mut h = y;
        for block in &self.blocks {
            h = block.forward(tape, h, layout, memory, memory_layout, heads, dropout)?;
        }
        self.final_ln.forward(tape, h)
    }
}

/// Sinusoidal position table of shape `max_len × d_model`.
#[derive(Clone, Debug)]
pub struct PositionalEncoding {
    d_model: usize,
    table: Vec<f64>,
}

impl PositionalEncoding {
    pub fn new(max_len: usize, d_model: usize) -> Self {
        let mut table = vec![0.0; max_len * d_model];
        for pos in 0..max_len {
            for i in 0..d_model {
                table[pos * d_model + i] = Self::value(pos, i, d_model);
            }
        }
        PositionalEncoding { d_model, table }
    }

    /// `sin(pos / 10000^(2k/d))` at even dims `2k`, `cos` of the same angle at `2k+1`.
    pub fn value(pos: usize, dim: usize, d_model: usize) -> f64 {
        let pair = (dim / 2 * 2) as f64;
        let angle = pos as f64 / 10000f64.powf(pair / d_model as f64);
        if dim.is_multiple_of(2) {
            angle.sin()
        } else {
            angle.cos()
        }
    }

    pub fn row(&self, pos: usize) -> &[f64] {
        &self.table[pos * self.d_model..(pos + 1) * self.d_model]
    }

    /// Position rows for a `[batch*len]` layout.
    pub fn for_layout<F: Float>(&self, batch: usize, len: usize) -> Tensor<F> {
        let mut data = Vec::with_capacity(batch * len * self.d_model);
        for _ in 0..batch {
            for pos in 0..len {
                data.extend(self.row(pos).iter().map(|&v| F::from_f64_lossy(v)));
            }
        }
        Tensor::new(vec![batch * len, self.d_model], data).expect("shape")
    }
}

/// Single-head `softmax(Q·Kᵀ/√d_k + mask)·V` built from primitive tape ops.
///
/// `mask` holds `0` for visible and `-inf` for hidden entries, shape `tq×tk`.
pub fn scaled_dot_attention<F: Float>(
    tape: &mut Tape<'_, F>,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<Var>,
) -> Result<Var> {
    let (sq, sk, sv) = (tape.shape(q), tape.shape(k), tape.shape(v));
    if sq.len() != 2 || sk.len() != 2 || sv.len() != 2 || sq[1] != sk[1] || sk[0] != sv[0] {
        return Err(Error::shape("scaled_dot_attention", sq, sk));
    }
    let dk = sq[1];
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, F::one() / F::from_usize(dk).unwrap().sqrt())?;
    let scores = match mask {
        Some(m) => tape.add(scores, m)?,
        None => scores,
    };
    let probs = tape.softmax(scores, 1)?;
    tape.matmul(probs, v)
}

/// `0 / -inf` additive mask hiding keys after each query position.
pub fn causal_mask<F: Float>(len: usize) -> Tensor<F> {
    let mut data = vec![F::zero(); len * len];
    for i in 0..len {
        for j in i + 1..len {
            data[i * len + j] = F::neg_infinity();
        }
    }
    Tensor::new(vec![len, len], data).expect("shape")
}
