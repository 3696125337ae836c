//! Central finite-difference check of the full grown-model loss.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Grads, Mode, Tape};
use crate::data::{Batch, Pair, NUM_RESERVED, PAD};
use crate::error::{Error, Result};
use crate::growth::{DepthGrowModel, GrowOptions, Regime, View};
use crate::tensor::{ParamId, Precision};
use crate::transformer::{ModelConfig, SeqLayout};

/// Parameter families sampled round-robin.
pub const FAMILIES: [&str; 7] = [
    "embed",
    "attn1",
    "attn2",
    "self_attn",
    "ffn",
    "layer_norm",
    "output_proj",
];

pub fn family_of(name: &str) -> &'static str {
    if name == crate::growth::EMBED_NAME {
        "embed"
    } else if name == crate::growth::OUTPUT_PROJ_NAME {
        "output_proj"
    } else if name.contains(".cross_attn.") {
        if name.starts_with("top.") {
            "attn2"
        } else {
            "attn1"
        }
    } else if name.contains(".self_attn.") {
        "self_attn"
    } else if name.contains(".ffn.") {
        "ffn"
    } else {
        "layer_norm"
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub model: ModelConfig,
    /// Scalar coordinates to check.
    pub n_params: usize,
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
    pub label_smoothing: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            model: ModelConfig {
                d_model: 8,
                d_ff: 16,
                n_heads: 2,
                n_bottom_blocks: 1,
                n_top_blocks: 1,
                vocab_size: 12,
                dropout: 0.0,
                max_len: 16,
                precision: Precision::F64,
            },
            n_params: 56,
            seed: 1,
            step: 1e-5,
            tolerance: 1e-3,
            label_smoothing: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradSample {
    pub family: &'static str,
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub samples: Vec<GradSample>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn worst(&self) -> Option<&GradSample> {
        self.samples
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }

    pub fn max_rel_error(&self) -> f64 {
        self.worst().map_or(0.0, |s| s.rel_error)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tolerance
    }

    pub fn families(&self) -> Vec<&'static str> {
        FAMILIES
            .iter()
            .copied()
            .filter(|f| self.samples.iter().any(|s| s.family == *f))
            .collect()
    }
}

/// `|a - n| / max(|a|, |n|, 1e-6)`; the floor keeps vanishing gradients from
/// turning rounding noise into large ratios.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

fn deep_loss(
    model: &DepthGrowModel<f64>,
    batch: &Batch,
    smoothing: f64,
    backward: bool,
) -> Result<(f64, Option<Grads<f64>>)> {
    let sl = SeqLayout {
        batch: batch.size,
        len: batch.src_len,
        pad: batch.src_pad.clone(),
    };
    let tl = SeqLayout {
        batch: batch.size,
        len: batch.tgt_len,
        pad: batch.tgt_pad.clone(),
    };
    let mut tape = Tape::new(model.store(), Mode::Eval);
    let logits = model.logits(
        &mut tape,
        &batch.src,
        &sl,
        &batch.tgt_in,
        &tl,
        View::Deep,
        Regime::eval(),
    )?;
    let l = tape.cross_entropy(logits, &batch.tgt_out, smoothing, PAD)?;
    let value = tape.value(l).data()[0];
    let grads = if backward {
        Some(tape.backward(l)?)
    } else {
        None
    };
    Ok((value, grads))
}

/// Builds a grown 64-bit model with every parameter trainable and random
/// (non-zero) top projections, then compares analytic and central-difference
/// gradients of the deep-view loss on `n_params` sampled coordinates.
pub fn gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    if cfg.n_params == 0 {
        return Err(Error::Config(
            "gradcheck needs at least one sampled parameter".into(),
        ));
    }
    let mut mc = cfg.model.clone();
    mc.dropout = 0.0;
    mc.precision = Precision::F64;
    let m = mc.n_top_blocks.max(1);
    let opts = GrowOptions {
        zero_init_output_projections: false,
        train_output_projection: true,
    };
    let mut model = DepthGrowModel::<f64>::new_shallow(&mc, cfg.seed)?.grow(
        m,
        cfg.seed.wrapping_add(1),
        opts,
    )?;
    for (_, p) in model.store_mut().iter_mut() {
        p.trainable = true;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let v = mc.vocab_size as u32;
    let lens = [(3usize, 4usize), (5, 2)];
    let pairs: Vec<Pair> = lens
        .iter()
        .map(|&(s, t)| Pair {
            src: (0..s)
                .map(|_| rng.random_range(NUM_RESERVED as u32..v))
                .collect(),
            tgt: (0..t)
                .map(|_| rng.random_range(NUM_RESERVED as u32..v))
                .collect(),
        })
        .collect();
    let batch = Batch::from_pairs(&pairs.iter().collect::<Vec<_>>())?;

    let grads = deep_loss(&model, &batch, cfg.label_smoothing, true)?
        .1
        .expect("backward ran");

    let mut by_family: Vec<Vec<ParamId>> = vec![Vec::new(); FAMILIES.len()];
    for (id, p) in model.store().iter() {
        let f = family_of(&p.name);
        let k = FAMILIES.iter().position(|x| *x == f).expect("known family");
        by_family[k].push(id);
    }
    let mut samples = Vec::with_capacity(cfg.n_params);
    let h = cfg.step;
    for i in 0..cfg.n_params {
        let fam = &by_family[i % FAMILIES.len()];
        let Some(&id) = fam.choose(&mut rng) else {
            continue;
        };
        let (name, numel) = {
            let p = model.store().get(id);
            (p.name.clone(), p.tensor.numel())
        };
        let index = rng.random_range(0..numel);
        let analytic = grads.param(id).map_or(0.0, |g| g[index]);
        let orig = model.store().get(id).tensor.data()[index];
        model.store_mut().get_mut(id).tensor.data_mut()[index] = orig + h;
        let plus = deep_loss(&model, &batch, cfg.label_smoothing, false)?.0;
        model.store_mut().get_mut(id).tensor.data_mut()[index] = orig - h;
        let minus = deep_loss(&model, &batch, cfg.label_smoothing, false)?.0;
        model.store_mut().get_mut(id).tensor.data_mut()[index] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        samples.push(GradSample {
            family: family_of(&name),
            name,
            index,
            analytic,
            numeric,
            rel_error: relative_error(analytic, numeric),
        });
    }
    Ok(GradcheckReport {
        samples,
        tolerance: cfg.tolerance,
    })
}
