//! Growing a trained shallow encoder-decoder into a deeper one.
//!
//! The bottom module (`enc1`, `dec1`) and the shared embedding and output
//! projection are frozen; a top module (`enc2`, `dec2`) is stacked on them:
//!
//! ```text
//! h1 = enc1(x)              h2 = enc2(x + h1)
//! s1 = dec1(y, attn1(h1))   s2 = dec2(y + s1, attn2(h2))
//! ```
//!
//! where `x`/`y` are the embedded (scaled, position-encoded) source and
//! target prefix. Both `s1` and `s2` are projected with the same output
//! matrix. The shallow path (`net_S`) touches frozen parameters only.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Mode, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Float, ParamId, ParamStore, Tensor};
use crate::transformer::{
    DecoderStack, EncoderStack, Initializer, ModelConfig, PositionalEncoding, SeqLayout,
};

pub const EMBED_NAME: &str = "embed.tokens";
pub const OUTPUT_PROJ_NAME: &str = "output_proj";

/// Which network a forward pass or search runs through.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    /// `enc1 + dec1` only.
    Shallow,
    /// The full grown model.
    Deep,
}

/// Dropout rates applied to each module during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Regime {
    pub bottom_dropout: f64,
    pub top_dropout: f64,
}

impl Regime {
    pub fn eval() -> Self {
        Regime {
            bottom_dropout: 0.0,
            top_dropout: 0.0,
        }
    }

    /// Stage 1: the whole (shallow) model is trained.
    pub fn stage1(p: f64) -> Self {
        Regime {
            bottom_dropout: p,
            top_dropout: 0.0,
        }
    }

    /// Stage 2: the frozen bottom runs in eval mode.
    pub fn stage2(p: f64) -> Self {
        Regime {
            bottom_dropout: 0.0,
            top_dropout: p,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BottomModule {
    pub enc: EncoderStack,
    pub dec: DecoderStack,
}

#[derive(Clone, Debug)]
pub struct TopModule {
    pub enc: EncoderStack,
    pub dec: DecoderStack,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrowOptions {
    /// Zero-initialize the output projection of every top-module sublayer,
    /// making each new block the identity map at step 0.
    pub zero_init_output_projections: bool,
    /// Keep the shared pre-softmax projection trainable in stage 2.
    pub train_output_projection: bool,
}

impl Default for GrowOptions {
    fn default() -> Self {
        GrowOptions {
            zero_init_output_projections: true,
            train_output_projection: false,
        }
    }
}

/// Encoder outputs of one batch, as tape nodes.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub layout: SeqLayout,
    pub h1: Var,
    pub h2: Option<Var>,
}

/// Bottom decoder outputs of one batch.
#[derive(Clone, Debug)]
pub struct ShallowDecoded {
    /// Embedded target prefix, reused by the decoder-side residual.
    pub y: Var,
    pub s1: Var,
    pub logits: Var,
}

/// All four hidden sequences of one sentence pair.
#[derive(Clone, Debug)]
pub struct HiddenStates<F> {
    pub h1: Tensor<F>,
    pub h2: Tensor<F>,
    pub s1: Tensor<F>,
    pub s2: Tensor<F>,
}

/// Outcome of comparing frozen parameters against their grow-time digests.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FreezeReport {
    pub frozen: Vec<String>,
    pub trainable: Vec<String>,
    /// Frozen parameters whose values differ from grow time.
    pub violations: Vec<String>,
}

impl FreezeReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct DepthGrowModel<F: Float> {
    config: ModelConfig,
    store: ParamStore<F>,
    embed: ParamId,
    output_proj: ParamId,
    bottom: BottomModule,
    top: Option<TopModule>,
    positions: PositionalEncoding,
    /// Optimizer steps taken in the current stage.
    pub step: u64,
    frozen_reference: BTreeMap<String, String>,
}

impl<F: Float> DepthGrowModel<F> {
    /// A freshly initialized shallow (stage 1) model with `n_bottom_blocks` per stack.
    pub fn new_shallow(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let cfg = config.clone();
        let (d, v) = (cfg.d_model, cfg.vocab_size);
        let mut store = ParamStore::new();
        let mut init = Initializer::new(seed, false);
        let embed = store.add(
            EMBED_NAME,
            init.normal(&[v, d], (d as f64).powf(-0.5)),
            true,
        )?;
        let enc = EncoderStack::register(
            &mut store,
            "bottom.enc",
            cfg.n_bottom_blocks,
            &cfg,
            &mut init,
        )?;
        let dec = DecoderStack::register(
            &mut store,
            "bottom.dec",
            cfg.n_bottom_blocks,
            &cfg,
            &mut init,
        )?;
        let output_proj = store.add(OUTPUT_PROJ_NAME, init.xavier(d, v), true)?;
        Ok(DepthGrowModel {
            positions: PositionalEncoding::new(cfg.max_len, d),
            config: cfg,
            store,
            embed,
            output_proj,
            bottom: BottomModule { enc, dec },
            top: None,
            step: 0,
            frozen_reference: BTreeMap::new(),
        })
    }

    /// Freezes everything present and stacks `m` new encoder and decoder blocks.
    pub fn grow(mut self, m: usize, seed: u64, opts: GrowOptions) -> Result<Self> {
        if self.top.is_some() {
            return Err(Error::Contract("model is already grown".into()));
        }
        if m == 0 {
            return Err(Error::Config("top module needs at least one block".into()));
        }
        self.config.n_top_blocks = m;
        for (id, p) in self.store.iter_mut() {
            p.trainable = opts.train_output_projection && id == self.output_proj;
            p.tensor.clear_grad();
        }
        self.frozen_reference = self
            .store
            .iter()
            .filter(|(_, p)| !p.trainable)
            .map(|(_, p)| (p.name.clone(), p.tensor.content_hash()))
            .collect();
        let cfg = self.config.clone();
        let mut init = Initializer::new(seed, opts.zero_init_output_projections);
        let enc = EncoderStack::register(&mut self.store, "top.enc", m, &cfg, &mut init)?;
        let dec = DecoderStack::register(&mut self.store, "top.dec", m, &cfg, &mut init)?;
        self.top = Some(TopModule { enc, dec });
        self.step = 0;
        Ok(self)
    }

    /// Direct stacking: a shallow model with `m` extra blocks per stack, all trainable.
    ///
    /// Existing blocks and the final norms keep their values; this is the
    /// plain-deepening baseline, with no cross-module residual.
    pub fn direct_stack(&self, m: usize, seed: u64) -> Result<Self> {
        if self.top.is_some() {
            return Err(Error::Contract(
                "direct stacking applies to shallow models".into(),
            ));
        }
        let cfg = ModelConfig {
            n_bottom_blocks: self.config.n_bottom_blocks + m,
            ..self.config.clone()
        };
        let mut deeper = Self::new_shallow(&cfg, seed)?;
        for (_, p) in self.store.iter() {
            let id = deeper.store.id(&p.name).expect("names carry over");
            deeper.store.get_mut(id).tensor = p.tensor.clone();
        }
        deeper.store.clear_grads();
        Ok(deeper)
    }

    /// Rebuilds the parameter layout for `config` without meaningful values;
    /// used by checkpoint loading before values are copied in.
    pub(crate) fn skeleton(config: &ModelConfig, grown: bool) -> Result<Self> {
        let shallow = Self::new_shallow(config, 0)?;
        if grown {
            let mut g = shallow.grow(config.n_top_blocks, 0, GrowOptions::default())?;
            g.frozen_reference.clear();
            Ok(g)
        } else {
            Ok(shallow)
        }
    }

    pub(crate) fn set_frozen_reference(&mut self, reference: BTreeMap<String, String>) {
        self.frozen_reference = reference;
    }

    pub fn frozen_reference(&self) -> &BTreeMap<String, String> {
        &self.frozen_reference
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<F> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.store
    }

    pub fn is_grown(&self) -> bool {
        self.top.is_some()
    }

    /// 1 for a shallow model, 2 once grown.
    pub fn stage(&self) -> u8 {
        if self.is_grown() {
            2
        } else {
            1
        }
    }

    pub fn bottom(&self) -> &BottomModule {
        &self.bottom
    }

    pub fn top(&self) -> Option<&TopModule> {
        self.top.as_ref()
    }

    pub fn embedding_id(&self) -> ParamId {
        self.embed
    }

    pub fn output_projection_id(&self) -> ParamId {
        self.output_proj
    }

    /// The view trained in the current stage.
    pub fn default_view(&self) -> View {
        if self.is_grown() {
            View::Deep
        } else {
            View::Shallow
        }
    }

    fn require_top(&self) -> Result<&TopModule> {
        self.top
            .as_ref()
            .ok_or_else(|| Error::Contract("deep network requested on a shallow model".into()))
    }

    /// `E[ids]·√d + PE`, followed by dropout `p`.
    pub fn embed(
        &self,
        tape: &mut Tape<'_, F>,
        ids: &[u32],
        layout: &SeqLayout,
        p: f64,
    ) -> Result<Var> {
        if layout.len > self.config.max_len {
            return Err(Error::Length {
                len: layout.len,
                max: self.config.max_len,
            });
        }
        if ids.len() != layout.batch * layout.len {
            return Err(Error::shape(
                "embed",
                &[ids.len()],
                &[layout.batch, layout.len],
            ));
        }
        let table = tape.param(self.embed);
        let e = tape.embedding(table, ids)?;
        let e = tape.scale(e, F::from_usize(self.config.d_model).unwrap().sqrt())?;
        let pe = tape.constant(self.positions.for_layout(layout.batch, layout.len));
        let x = tape.add(e, pe)?;
        tape.dropout(x, p)
    }

    /// `h1 = enc1(x)` and, for a grown model when `deep`, `h2 = enc2(x + h1)`.
    pub fn encode(
        &self,
        tape: &mut Tape<'_, F>,
        src: &[u32],
        layout: &SeqLayout,
        regime: Regime,
        deep: bool,
    ) -> Result<Encoded> {
        let heads = self.config.n_heads;
        let x = self.embed(tape, src, layout, regime.bottom_dropout)?;
        let h1 = self
            .bottom
            .enc
            .forward(tape, x, layout, heads, regime.bottom_dropout)?;
        let h2 = if deep {
            let top = self.require_top()?;
            let residual = tape.add(x, h1)?;
            let residual = tape.dropout(residual, regime.top_dropout)?;
            Some(
                top.enc
                    .forward(tape, residual, layout, heads, regime.top_dropout)?,
            )
        } else {
            None
        };
        Ok(Encoded {
            layout: layout.clone(),
            h1,
            h2,
        })
    }

    /// `s1 = dec1(y, attn1(h1))` and the shallow logits `s1·W_out`.
    pub fn decode_shallow(
        &self,
        tape: &mut Tape<'_, F>,
        tgt_in: &[u32],
        layout: &SeqLayout,
        enc: &Encoded,
        regime: Regime,
    ) -> Result<ShallowDecoded> {
        let y = self.embed(tape, tgt_in, layout, regime.bottom_dropout)?;
        let s1 = self.bottom.dec.forward(
            tape,
            y,
            layout,
            enc.h1,
            &enc.layout,
            self.config.n_heads,
            regime.bottom_dropout,
        )?;
        let w = tape.param(self.output_proj);
        let logits = tape.matmul(s1, w)?;
        Ok(ShallowDecoded { y, s1, logits })
    }

    /// `s2 = dec2(y + s1, attn2(h2))` and the deep logits `s2·W_out`.
    pub fn decode_deep(
        &self,
        tape: &mut Tape<'_, F>,
        shallow: &ShallowDecoded,
        layout: &SeqLayout,
        enc: &Encoded,
        regime: Regime,
    ) -> Result<(Var, Var)> {
        let top = self.require_top()?;
        let h2 = enc
            .h2
            .ok_or_else(|| Error::Contract("deep decoding needs h2 from a deep encode".into()))?;
        let rows = layout.batch * layout.len;
        if tape.shape(shallow.s1)[0] != rows || tape.shape(shallow.y)[0] != rows {
            return Err(Error::Contract(format!(
                "s1 has {} rows, target layout has {rows}",
                tape.shape(shallow.s1)[0]
            )));
        }
        if tape.shape(h2)[0] != enc.layout.batch * enc.layout.len {
            return Err(Error::Contract(
                "h2 does not match the source layout".into(),
            ));
        }
        let residual = tape.add(shallow.y, shallow.s1)?;
        let residual = tape.dropout(residual, regime.top_dropout)?;
        let s2 = top.dec.forward(
            tape,
            residual,
            layout,
            h2,
            &enc.layout,
            self.config.n_heads,
            regime.top_dropout,
        )?;
        let w = tape.param(self.output_proj);
        let logits = tape.matmul(s2, w)?;
        Ok((s2, logits))
    }

    /// Teacher-forced logits `[batch*tgt_len, V]` of one view.
    #[allow(clippy::too_many_arguments)]
    pub fn logits(
        &self,
        tape: &mut Tape<'_, F>,
        src: &[u32],
        src_layout: &SeqLayout,
        tgt_in: &[u32],
        tgt_layout: &SeqLayout,
        view: View,
        regime: Regime,
    ) -> Result<Var> {
        let deep = view == View::Deep;
        let enc = self.encode(tape, src, src_layout, regime, deep)?;
        let shallow = self.decode_shallow(tape, tgt_in, tgt_layout, &enc, regime)?;
        if deep {
            Ok(self
                .decode_deep(tape, &shallow, tgt_layout, &enc, regime)?
                .1)
        } else {
            Ok(shallow.logits)
        }
    }

    /// Eval-mode logits for one unpadded sentence pair; `tgt_in` starts with BOS.
    pub fn forward_tokens(&self, src: &[u32], tgt_in: &[u32], view: View) -> Result<Tensor<F>> {
        let mut tape = Tape::new(&self.store, Mode::Eval);
        let (sl, tl) = (
            SeqLayout::unpadded(1, src.len()),
            SeqLayout::unpadded(1, tgt_in.len()),
        );
        let out = self.logits(&mut tape, src, &sl, tgt_in, &tl, view, Regime::eval())?;
        Ok(tape.value(out).clone())
    }

    /// `net_S` logits.
    pub fn forward_net_s(&self, src: &[u32], tgt_in: &[u32]) -> Result<Tensor<F>> {
        self.forward_tokens(src, tgt_in, View::Shallow)
    }

    /// `net_D` logits.
    pub fn forward_net_d(&self, src: &[u32], tgt_in: &[u32]) -> Result<Tensor<F>> {
        self.forward_tokens(src, tgt_in, View::Deep)
    }

    /// Eval-mode `(h1, h2)` of one source sentence.
    pub fn encode_tokens(&self, src: &[u32]) -> Result<(Tensor<F>, Tensor<F>)> {
        let mut tape = Tape::new(&self.store, Mode::Eval);
        let layout = SeqLayout::unpadded(1, src.len());
        let enc = self.encode(&mut tape, src, &layout, Regime::eval(), true)?;
        Ok((
            tape.value(enc.h1).clone(),
            tape.value(enc.h2.unwrap()).clone(),
        ))
    }

    /// Eval-mode `h1, h2, s1, s2` of one sentence pair.
    pub fn hidden_states(&self, src: &[u32], tgt_in: &[u32]) -> Result<HiddenStates<F>> {
        let mut tape = Tape::new(&self.store, Mode::Eval);
        let (sl, tl) = (
            SeqLayout::unpadded(1, src.len()),
            SeqLayout::unpadded(1, tgt_in.len()),
        );
        let enc = self.encode(&mut tape, src, &sl, Regime::eval(), true)?;
        let shallow = self.decode_shallow(&mut tape, tgt_in, &tl, &enc, Regime::eval())?;
        let (s2, _) = self.decode_deep(&mut tape, &shallow, &tl, &enc, Regime::eval())?;
        Ok(HiddenStates {
            h1: tape.value(enc.h1).clone(),
            h2: tape.value(enc.h2.unwrap()).clone(),
            s1: tape.value(shallow.s1).clone(),
            s2: tape.value(s2).clone(),
        })
    }

    /// Names of frozen and trainable parameters, plus frozen ones that changed since grow.
    pub fn freeze_audit(&self) -> FreezeReport {
        let mut frozen = Vec::new();
        let mut trainable = Vec::new();
        let mut violations = Vec::new();
        for (_, p) in self.store.iter() {
            if p.trainable {
                trainable.push(p.name.clone());
            } else {
                frozen.push(p.name.clone());
            }
        }
        for (name, digest) in &self.frozen_reference {
            let changed = match self.store.by_name(name) {
                Some(p) => p.trainable || p.tensor.content_hash() != *digest,
                None => true,
            };
            if changed {
                violations.push(name.clone());
            }
        }
        FreezeReport {
            frozen,
            trainable,
            violations,
        }
    }

    /// Parameter names of the bottom module, embeddings and output projection.
    pub fn shallow_parameter_names(&self) -> Vec<String> {
        self.store
            .iter()
            .filter(|(_, p)| !p.name.starts_with("top."))
            .map(|(_, p)| p.name.clone())
            .collect()
    }

    pub fn top_parameter_names(&self) -> Vec<String> {
        self.store
            .iter()
            .filter(|(_, p)| p.name.starts_with("top."))
            .map(|(_, p)| p.name.clone())
            .collect()
    }
}
