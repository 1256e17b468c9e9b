//! Plain SGD with truncated BPTT, per-component gradient clipping and a
//! perplexity-triggered learning-rate halving schedule.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{encode_batch, BatchStream, CaptionRecord, ContextStore, Vocabulary};
use crate::error::{Error, Result};
use crate::eval::{batches_nll, Condition};
use crate::grad::clip_gradients;
use crate::lm::{Model, NllSum};
use crate::tensor::{Real, Tensor};

/// How increases in validation perplexity are counted toward a halving.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleMode {
    /// Every increase counts; the counter resets only after a halving.
    Cumulative,
    /// Any non-increase resets the counter.
    Consecutive,
}

/// Divisor applied to the summed batch loss before differentiation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossScale {
    Sum,
    PerSequence,
    PerToken,
}

fn d_lr() -> f64 {
    1.0
}
fn d_clip() -> f64 {
    2.0
}
fn d_batch() -> usize {
    32
}
fn d_unroll() -> usize {
    49
}
fn d_epochs() -> usize {
    15
}
fn d_patience() -> u32 {
    3
}
fn d_schedule() -> ScheduleMode {
    ScheduleMode::Cumulative
}
fn d_scale() -> LossScale {
    LossScale::PerSequence
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "d_lr")]
    pub learning_rate: f64,
    #[serde(default = "d_clip")]
    pub clip: f64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_unroll")]
    pub unroll: usize,
    #[serde(default = "d_epochs")]
    pub max_epochs: usize,
    #[serde(default = "d_patience")]
    pub patience: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_schedule")]
    pub schedule: ScheduleMode,
    #[serde(default = "d_scale")]
    pub loss_scale: LossScale,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: d_lr(),
            clip: d_clip(),
            batch_size: d_batch(),
            unroll: d_unroll(),
            max_epochs: d_epochs(),
            patience: d_patience(),
            seed: 0,
            schedule: d_schedule(),
            loss_scale: d_scale(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.clip > 0.0) {
            return Err(Error::Config(format!("clip bound must be positive, got {}", self.clip)));
        }
        if self.batch_size == 0 || self.unroll == 0 || self.patience == 0 {
            return Err(Error::Config("batch size, unroll and patience must be at least 1".into()));
        }
        Ok(())
    }

    /// Shuffle seed for one epoch, derived from the run seed.
    pub fn epoch_seed(&self, epoch: usize) -> u64 {
        crate::rng::stream(self.seed, &format!("epoch/{epoch}")).gen()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurveRow {
    pub epoch: usize,
    pub train_nll: f64,
    pub valid_nll: f64,
    pub valid_ppl: f64,
    pub lr: f64,
}

pub const CURVE_HEADER: &str = "epoch,train_nll,valid_nll,valid_ppl,lr";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    pub lr: f64,
    pub best_valid_ppl: f64,
    pub prev_valid_ppl: Option<f64>,
    pub increases: u32,
    pub halvings: u32,
    pub curve: Vec<CurveRow>,
}

impl TrainState {
    pub fn new(config: &TrainConfig) -> Self {
        TrainState {
            epoch: 0,
            lr: config.learning_rate,
            best_valid_ppl: f64::INFINITY,
            prev_valid_ppl: None,
            increases: 0,
            halvings: 0,
            curve: Vec::new(),
        }
    }

    /// Records an end-of-epoch validation perplexity and halves the rate
    /// once `patience` increases have been counted.
    pub fn update_schedule(&mut self, valid_ppl: f64, config: &TrainConfig) {
        if let Some(prev) = self.prev_valid_ppl {
            if valid_ppl > prev {
                self.increases += 1;
            } else if config.schedule == ScheduleMode::Consecutive {
                self.increases = 0;
            }
        }
        if self.increases >= config.patience {
            self.lr /= 2.0;
            self.halvings += 1;
            self.increases = 0;
        }
        self.prev_valid_ppl = Some(valid_ppl);
        if valid_ppl < self.best_valid_ppl {
            self.best_valid_ppl = valid_ppl;
        }
    }

    pub fn curve_csv(&self) -> String {
        let mut out = String::from(CURVE_HEADER);
        out.push('\n');
        for r in &self.curve {
            out.push_str(&format!("{},{},{},{},{}\n", r.epoch, r.train_nll, r.valid_nll, r.valid_ppl, r.lr));
        }
        out
    }
}

/// `θ ← θ - lr · clip(g)` for every tensor pair.
pub fn sgd_step<T: Real>(params: &mut [Tensor<T>], grads: &mut [Tensor<T>], lr: T, clip: Option<T>) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::dim("sgd_step", (params.len(), 1), (grads.len(), 1)));
    }
    if let Some(bound) = clip {
        clip_gradients(grads, bound)?;
    }
    for (p, g) in params.iter_mut().zip(grads.iter()) {
        if p.shape() != g.shape() {
            return Err(Error::dim("sgd_step", p.shape(), g.shape()));
        }
        for (w, &d) in p.data_mut().iter_mut().zip(g.data()) {
            *w -= lr * d;
        }
    }
    Ok(())
}

/// Clips and applies gradients (in canonical parameter order) to a model.
pub fn apply_sgd<T: Real>(model: &mut Model<T>, grads: &mut [Tensor<T>], lr: T, clip: T) -> Result<()> {
    clip_gradients(grads, clip)?;
    let mut idx = 0;
    let mut err = None;
    model.for_each_param_mut(|name, p| {
        match grads.get(idx) {
            Some(g) if g.shape() == p.shape() => {
                for (w, &d) in p.data_mut().iter_mut().zip(g.data()) {
                    *w -= lr * d;
                }
            }
            Some(g) => err = err.take().or(Some(Error::dim(name, p.shape(), g.shape()))),
            None => err = err.take().or(Some(Error::dim(name, p.shape(), (0, 0)))),
        }
        idx += 1;
    });
    match err {
        Some(e) => Err(e),
        None if idx != grads.len() => Err(Error::dim("apply_sgd", (idx, 1), (grads.len(), 1))),
        None => Ok(()),
    }
}

/// Records plus what is needed to batch them.
#[derive(Debug, Clone, Copy)]
pub struct Dataset<'a> {
    pub records: &'a [CaptionRecord],
    pub vocab: &'a Vocabulary,
    /// Context vectors; required for multi-modal models.
    pub contexts: Option<&'a ContextStore>,
}

impl<'a> Dataset<'a> {
    pub fn batches(&self, unroll: usize, batch_size: usize, shuffle_seed: Option<u64>) -> Result<BatchStream> {
        encode_batch(self.records, self.vocab, self.contexts, unroll, batch_size, shuffle_seed)
    }
}

/// One pass of forward, backward, clip and update over `batches`.
///
/// Returns the summed pre-update loss and token count of the epoch.
pub fn train_epoch<T: Real>(
    model: &mut Model<T>,
    batches: impl IntoIterator<Item = crate::lm::SequenceBatch>,
    config: &TrainConfig,
    lr: f64,
    epoch: usize,
) -> Result<NllSum> {
    let mut total = NllSum { loss: 0.0, tokens: 0 };
    let lr_t = T::from_f64_lossy(lr);
    let clip = T::from_f64_lossy(config.clip);
    for (i, batch) in batches.into_iter().enumerate() {
        let (nll, mut grads) = model.nll_and_gradients(&batch)?;
        if !nll.loss.is_finite() {
            return Err(Error::TrainAbort {
                epoch,
                batch: i,
                lr,
                reason: format!("non-finite loss {}", nll.loss),
            });
        }
        if nll.is_empty() {
            continue;
        }
        let divisor = match config.loss_scale {
            LossScale::Sum => 1.0,
            LossScale::PerSequence => batch.batch_size() as f64,
            LossScale::PerToken => nll.tokens as f64,
        };
        if divisor != 1.0 {
            let s = T::from_f64_lossy(1.0 / divisor);
            grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= s));
        }
        if let Some(bad) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::TrainAbort {
                epoch,
                batch: i,
                lr,
                reason: format!("non-finite gradient for {}", model.param_names()[bad]),
            });
        }
        apply_sgd(model, &mut grads, lr_t, clip)?;
        total += nll;
    }
    Ok(total)
}

/// Result of [`fit`].
#[derive(Debug, Clone)]
pub struct FitOutcome<T> {
    pub state: TrainState,
    /// Parameters with the lowest validation perplexity seen so far.
    pub best: Model<T>,
}

/// Called after every epoch with the new state, the current model, and
/// whether this epoch produced a new best validation perplexity.
pub type EpochHook<'h, T> = dyn FnMut(&TrainState, &Model<T>, bool) -> Result<()> + 'h;

/// Runs epochs up to `config.max_epochs`, resuming from `resume` when given.
pub fn fit<T: Real>(
    model: &mut Model<T>,
    train: Dataset<'_>,
    valid: Dataset<'_>,
    config: &TrainConfig,
    resume: Option<(TrainState, Model<T>)>,
    hook: Option<&mut EpochHook<'_, T>>,
) -> Result<FitOutcome<T>> {
    config.validate()?;
    if config.unroll > model.config().unroll {
        return Err(Error::Config(format!(
            "training unroll {} exceeds the model's unroll {}",
            config.unroll,
            model.config().unroll
        )));
    }
    if valid.records.is_empty() {
        return Err(Error::Config("validation split is empty".into()));
    }
    let valid_condition = if model.is_fused() { Condition::LvLv } else { Condition::LL };
    let (mut state, mut best) = match resume {
        Some(r) => r,
        None => (TrainState::new(config), model.clone()),
    };
    let mut hook = hook;
    while state.epoch < config.max_epochs {
        let epoch = state.epoch + 1;
        let batches = train.batches(config.unroll, config.batch_size, Some(config.epoch_seed(epoch)))?;
        let train_nll = train_epoch(model, batches, config, state.lr, epoch)?;
        let valid_batches = valid.batches(config.unroll, config.batch_size, None)?;
        let valid_nll = batches_nll(model, valid_batches, valid_condition)?;
        let valid_ppl = valid_nll.per_token().exp();
        if !valid_ppl.is_finite() {
            return Err(Error::TrainAbort {
                epoch,
                batch: 0,
                lr: state.lr,
                reason: format!("non-finite validation perplexity {valid_ppl}"),
            });
        }
        let lr_used = state.lr;
        let improved = valid_ppl < state.best_valid_ppl;
        state.update_schedule(valid_ppl, config);
        state.epoch = epoch;
        state.curve.push(CurveRow {
            epoch,
            train_nll: train_nll.per_token(),
            valid_nll: valid_nll.per_token(),
            valid_ppl,
            lr: lr_used,
        });
        if improved {
            best = model.clone();
        }
        if let Some(h) = hook.as_deref_mut() {
            h(&state, model, improved)?;
        }
    }
    Ok(FitOutcome { state, best })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(ppls: &[f64], mode: ScheduleMode) -> Vec<f64> {
        let cfg = TrainConfig {
            schedule: mode,
            ..TrainConfig::default()
        };
        let mut s = TrainState::new(&cfg);
        ppls.iter()
            .map(|&p| {
                s.update_schedule(p, &cfg);
                s.lr
            })
            .collect()
    }

    #[test]
    fn halves_after_three_increases() {
        assert_eq!(run(&[10.0, 11.0, 12.0, 13.0], ScheduleMode::Cumulative), [1.0, 1.0, 1.0, 0.5]);
        assert_eq!(run(&[10.0, 9.0, 8.0, 7.0, 6.0], ScheduleMode::Cumulative), [1.0; 5]);
        assert_eq!(
            run(&[10.0, 11.0, 9.0, 12.0, 13.0], ScheduleMode::Cumulative),
            [1.0, 1.0, 1.0, 1.0, 0.5]
        );
        assert_eq!(run(&[10.0, 11.0, 9.0, 12.0, 13.0], ScheduleMode::Consecutive), [1.0; 5]);
    }

    #[test]
    fn counter_resets_after_halving() {
        let lrs = run(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0], ScheduleMode::Cumulative);
        assert_eq!(lrs, [1.0, 1.0, 1.0, 0.5, 0.5, 0.5, 0.25]);
    }

    #[test]
    fn sgd_examples() {
        let mut p = vec![Tensor::<f64>::row_vector(vec![1.0, 1.0, 0.0])];
        let mut g = vec![Tensor::row_vector(vec![0.25, 0.0, 10.0])];
        sgd_step(&mut p, &mut g, 1.0, Some(2.0)).unwrap();
        assert_eq!(p[0].data(), &[0.75, 1.0, -2.0]);
        let mut g = vec![Tensor::zeros(2, 2)];
        assert!(sgd_step(&mut p, &mut g, 1.0, None).is_err());
    }

    #[test]
    fn config_validation() {
        let bad = TrainConfig { learning_rate: 0.0, ..TrainConfig::default() };
        assert!(bad.validate().is_err());
        let bad = TrainConfig { clip: -1.0, ..TrainConfig::default() };
        assert!(bad.validate().is_err());
        let bad = TrainConfig { batch_size: 0, ..TrainConfig::default() };
        assert!(bad.validate().is_err());
    }
}
