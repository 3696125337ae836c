//! Two-stage training: stage 1 fits the shallow model end to end, stage 2
//! optimizes only the top module of a grown model against the `net_D` loss.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Mode, Tape};
use crate::data::{make_batches, Batch, Pair, PAD};
use crate::error::{Error, Result};
use crate::growth::{DepthGrowModel, Regime, View};
use crate::metrics::{argmax_rows, token_accuracy};
use crate::tensor::{Float, ParamId, ParamStore};
use crate::transformer::SeqLayout;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub max_steps: u64,
    /// Upper bound on `batch size × longest padded sequence`.
    pub batch_tokens: usize,
    pub warmup_steps: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub label_smoothing: f64,
    pub seed: u64,
    /// 0 writes a checkpoint only at the end.
    pub checkpoint_every: u64,
    pub log_every: u64,
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_steps: 3000,
            batch_tokens: 1024,
            warmup_steps: 400,
            adam_beta1: 0.9,
            adam_beta2: 0.98,
            adam_eps: 1e-9,
            label_smoothing: 0.1,
            seed: 1,
            checkpoint_every: 0,
            log_every: 100,
            deterministic: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps == 0 {
            return Err(Error::Config("warmup_steps must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!(
                "label_smoothing {} not in [0,1)",
                self.label_smoothing
            )));
        }
        if self.batch_tokens == 0 || self.log_every == 0 {
            return Err(Error::Config(
                "batch_tokens and log_every must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

/// Inverse-square-root schedule with linear warmup:
/// `d_model^-0.5 · min(step^-0.5, step · warmup^-1.5)`.
pub fn lr_schedule(step: u64, d_model: usize, warmup: u64) -> Result<f64> {
    if step == 0 {
        return Err(Error::Contract("learning-rate steps are 1-based".into()));
    }
    if warmup == 0 {
        return Err(Error::Config("warmup must be at least 1".into()));
    }
    let s = step as f64;
    let w = warmup as f64;
    Ok((d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5)))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Moments<F> {
    pub m: Vec<F>,
    pub v: Vec<F>,
}

/// Adam with bias correction; holds moments for trainable parameters only.
#[derive(Clone, Debug)]
pub struct Adam<F> {
    cfg: AdamConfig,
    step: u64,
    state: BTreeMap<ParamId, Moments<F>>,
}

impl<F: Float> Adam<F> {
    pub fn new(store: &ParamStore<F>, cfg: AdamConfig) -> Self {
        let state = store
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(id, p)| {
                let n = p.tensor.numel();
                (
                    id,
                    Moments {
                        m: vec![F::zero(); n],
                        v: vec![F::zero(); n],
                    },
                )
            })
            .collect();
        Adam {
            cfg,
            step: 0,
            state,
        }
    }

    pub fn restore(cfg: AdamConfig, step: u64, state: BTreeMap<ParamId, Moments<F>>) -> Self {
        Adam { cfg, step, state }
    }

    pub fn config(&self) -> AdamConfig {
        self.cfg
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn state(&self) -> &BTreeMap<ParamId, Moments<F>> {
        &self.state
    }

    pub fn state_names(&self, store: &ParamStore<F>) -> BTreeSet<String> {
        self.state
            .keys()
            .map(|&id| store.get(id).name.clone())
            .collect()
    }

    /// One update from the gradients held in `store`; frozen parameters are skipped.
    ///
    /// A trainable parameter without a gradient slot is updated as if its
    /// gradient were zero.
    pub fn step(&mut self, store: &mut ParamStore<F>, lr: f64) -> Result<()> {
        let t = self.step + 1;
        for &id in self.state.keys() {
            let p = store.get(id);
            if let Some(i) = p
                .tensor
                .grad()
                .and_then(|g| g.iter().position(|v| !v.is_finite()))
            {
                return Err(Error::Numeric(format!(
                    "non-finite gradient in `{}`[{i}] at step {t}",
                    p.name
                )));
            }
        }
        self.step = t;
        let one = F::one();
        let b1 = F::from_f64_lossy(self.cfg.beta1);
        let b2 = F::from_f64_lossy(self.cfg.beta2);
        let eps = F::from_f64_lossy(self.cfg.eps);
        let lr = F::from_f64_lossy(lr);
        let bc1 = one - b1.powi(t as i32);
        let bc2 = one - b2.powi(t as i32);
        for (&id, mom) in self.state.iter_mut() {
            let p = store.get_mut(id);
            if !p.trainable {
                continue;
            }
            let n = p.tensor.numel();
            let grad = p
                .tensor
                .grad()
                .map(<[F]>::to_vec)
                .unwrap_or_else(|| vec![F::zero(); n]);
            let data = p.tensor.data_mut();
            for i in 0..n {
                let g = grad[i];
                mom.m[i] = b1 * mom.m[i] + (one - b1) * g;
                mom.v[i] = b2 * mom.v[i] + (one - b2) * g * g;
                let mhat = mom.m[i] / bc1;
                let vhat = mom.v[i] / bc2;
                data[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

pub const LOG_HEADER: &str = "step,stage,lr,train_loss,valid_loss,valid_acc";

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub stage: u8,
    pub lr: f64,
    /// Mean training loss since the previous row.
    pub train_loss: f64,
    pub valid_loss: Option<f64>,
    pub valid_acc: Option<f64>,
}

impl LogRow {
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
        format!(
            "{},{},{:.8},{:.6},{},{}",
            self.step,
            self.stage,
            self.lr,
            self.train_loss,
            opt(self.valid_loss),
            opt(self.valid_acc)
        )
    }
}

/// Teacher-forced held-out metrics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalMetrics {
    /// Unsmoothed token-mean negative log-likelihood (nats).
    pub loss: f64,
    pub accuracy: f64,
    pub tokens: usize,
}

/// Hooks called by the training loop.
pub trait TrainObserver<F: Float> {
    fn on_log(&mut self, _row: &LogRow) -> Result<()> {
        Ok(())
    }

    fn on_checkpoint(&mut self, _model: &DepthGrowModel<F>, _adam: &Adam<F>) -> Result<()> {
        Ok(())
    }
}

impl<F: Float> TrainObserver<F> for () {}

#[derive(Clone, Debug)]
pub struct TrainOutcome<F> {
    pub log: Vec<LogRow>,
    pub adam: Adam<F>,
}

fn layouts(b: &Batch) -> (SeqLayout, SeqLayout) {
    (
        SeqLayout {
            batch: b.size,
            len: b.src_len,
            pad: b.src_pad.clone(),
        },
        SeqLayout {
            batch: b.size,
            len: b.tgt_len,
            pad: b.tgt_pad.clone(),
        },
    )
}

/// Eval-mode loss and token accuracy of `view` on `pairs`.
pub fn evaluate<F: Float>(
    model: &DepthGrowModel<F>,
    pairs: &[Pair],
    view: View,
    batch_tokens: usize,
) -> Result<EvalMetrics> {
    if pairs.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    let mut loss_sum = 0.0;
    let mut tokens = 0usize;
    let mut correct = 0.0;
    for b in make_batches(pairs, batch_tokens, 0, true)? {
        let (sl, tl) = layouts(&b);
        let mut tape = Tape::new(model.store(), Mode::Eval);
        let logits = model.logits(&mut tape, &b.src, &sl, &b.tgt_in, &tl, view, Regime::eval())?;
        let loss = tape.cross_entropy(logits, &b.tgt_out, 0.0, PAD)?;
        let n = b.target_tokens();
        loss_sum += tape.value(loss).data()[0].as_f64() * n as f64;
        let preds = argmax_rows(tape.value(logits));
        correct += token_accuracy(&preds, &b.tgt_out, PAD)? * n as f64;
        tokens += n;
    }
    Ok(EvalMetrics {
        loss: loss_sum / tokens as f64,
        accuracy: correct / tokens as f64,
        tokens,
    })
}

fn stage_seed(seed: u64, stage: u8) -> u64 {
    seed ^ (stage as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Endless epoch-cycling batch stream; batch `k` depends only on `(seed, stage, k)`.
struct BatchStream<'a> {
    pairs: &'a [Pair],
    batch_tokens: usize,
    seed: u64,
    deterministic: bool,
    epoch: u64,
    queue: std::vec::IntoIter<Batch>,
}

impl<'a> BatchStream<'a> {
    fn new(pairs: &'a [Pair], batch_tokens: usize, seed: u64, deterministic: bool) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        Ok(BatchStream {
            pairs,
            batch_tokens,
            seed,
            deterministic,
            epoch: 0,
            queue: Vec::new().into_iter(),
        })
    }

    fn next_batch(&mut self) -> Result<Batch> {
        loop {
            if let Some(b) = self.queue.next() {
                return Ok(b);
            }
            let seed = self
                .seed
                .wrapping_add(self.epoch.wrapping_mul(0xD1B5_4A32_D192_ED03));
            self.queue =
                make_batches(self.pairs, self.batch_tokens, seed, self.deterministic)?.into_iter();
            self.epoch += 1;
        }
    }
}

fn train_loop<F: Float>(
    model: &mut DepthGrowModel<F>,
    adam: Option<Adam<F>>,
    train: &[Pair],
    valid: &[Pair],
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver<F>,
) -> Result<TrainOutcome<F>> {
    cfg.validate()?;
    let stage = model.stage();
    let view = model.default_view();
    let dropout = model.config().dropout;
    let regime = if stage == 1 {
        Regime::stage1(dropout)
    } else {
        Regime::stage2(dropout)
    };
    let mut adam = adam.unwrap_or_else(|| Adam::new(model.store(), cfg.adam()));
    let trainable: BTreeSet<String> = model
        .store()
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(_, p)| p.name.clone())
        .collect();
    if adam.state_names(model.store()) != trainable {
        return Err(Error::Contract(
            "optimizer state does not match the trainable parameter set".into(),
        ));
    }
    let seed = stage_seed(cfg.seed, stage);
    let mut stream = BatchStream::new(train, cfg.batch_tokens, seed, cfg.deterministic)?;
    for _ in 0..model.step {
        stream.next_batch()?;
    }
    let d_model = model.config().d_model;
    let mut log = Vec::new();
    let mut window_loss = 0.0;
    let mut window_steps = 0u64;
    let checkpoint =
        |model: &DepthGrowModel<F>, adam: &Adam<F>, observer: &mut dyn TrainObserver<F>| {
            if stage == 2 {
                let report = model.freeze_audit();
                if !report.is_clean() {
                    return Err(Error::FreezeViolation(report.violations));
                }
            }
            observer.on_checkpoint(model, adam)
        };
    while model.step < cfg.max_steps {
        let batch = stream.next_batch()?;
        let step = model.step + 1;
        let lr = lr_schedule(step, d_model, cfg.warmup_steps)?;
        let (sl, tl) = layouts(&batch);
        let (loss_value, grads) = {
            let mut tape = Tape::new(model.store(), Mode::Train { seed, step });
            let logits =
                model.logits(&mut tape, &batch.src, &sl, &batch.tgt_in, &tl, view, regime)?;
            let loss = tape.cross_entropy(logits, &batch.tgt_out, cfg.label_smoothing, PAD)?;
            let value = tape.value(loss).data()[0].as_f64();
            (value, tape.backward(loss)?)
        };
        if !loss_value.is_finite() {
            return Err(Error::Numeric(format!("loss diverged at step {step}")));
        }
        let store = model.store_mut();
        store.zero_grad();
        store.accumulate(&grads);
        drop(grads);
        adam.step(store, lr)?;
        model.step = step;
        window_loss += loss_value;
        window_steps += 1;

        let last = step == cfg.max_steps;
        if step.is_multiple_of(cfg.log_every) || last {
            let (valid_loss, valid_acc) = if valid.is_empty() {
                (None, None)
            } else {
                let m = evaluate(model, valid, view, cfg.batch_tokens)?;
                (Some(m.loss), Some(m.accuracy))
            };
            let row = LogRow {
                step,
                stage,
                lr,
                train_loss: window_loss / window_steps as f64,
                valid_loss,
                valid_acc,
            };
            observer.on_log(&row)?;
            log.push(row);
            window_loss = 0.0;
            window_steps = 0;
        }
        if !last && cfg.checkpoint_every > 0 && step.is_multiple_of(cfg.checkpoint_every) {
            checkpoint(model, &adam, observer)?;
        }
    }
    model.store_mut().clear_grads();
    checkpoint(model, &adam, observer)?;
    Ok(TrainOutcome { log, adam })
}

/// Trains a shallow model end to end on the `net_S` loss.
pub fn train_stage1<F: Float>(
    model: &mut DepthGrowModel<F>,
    adam: Option<Adam<F>>,
    train: &[Pair],
    valid: &[Pair],
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver<F>,
) -> Result<TrainOutcome<F>> {
    if model.is_grown() {
        return Err(Error::Contract("stage 1 trains a shallow model".into()));
    }
    train_loop(model, adam, train, valid, cfg, observer)
}

/// Trains only the top module of a grown model on the `net_D` loss.
///
/// The freeze audit runs at every checkpoint and fails the run on any violation.
pub fn train_stage2<F: Float>(
    model: &mut DepthGrowModel<F>,
    adam: Option<Adam<F>>,
    train: &[Pair],
    valid: &[Pair],
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver<F>,
) -> Result<TrainOutcome<F>> {
    if !model.is_grown() {
        return Err(Error::Contract("stage 2 needs a grown model".into()));
    }
    train_loop(model, adam, train, valid, cfg, observer)
}
