//! Recurrent language model: cell unrolled over a batch of framed sentences,
//! followed by a softmax decoder over the vocabulary.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::cells::{init_cell_params, Cell, CellDims, CellKind, CellParams, FusionMode, FusionSpec, StepState};
use crate::data::vocab::BOS;
use crate::error::{Error, Result};
use crate::tensor::{log_sum_exp, ActivationKind, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionKind {
    None,
    Inner,
    Outer,
}

impl FusionKind {
    pub fn mode(self) -> Option<FusionMode> {
        match self {
            FusionKind::None => None,
            FusionKind::Inner => Some(FusionMode::Inner),
            FusionKind::Outer => Some(FusionMode::Outer),
        }
    }
}

impl std::str::FromStr for FusionKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(FusionKind::None),
            "inner" => Ok(FusionKind::Inner),
            "outer" => Ok(FusionKind::Outer),
            other => Err(Error::Config(format!("unknown fusion `{other}`"))),
        }
    }
}

fn default_context_dim() -> usize {
    2048
}
fn default_unroll() -> usize {
    49
}
fn yes() -> bool {
    true
}
fn default_lstm_activation() -> ActivationKind {
    ActivationKind::Tanh
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: CellKind,
    pub hidden: usize,
    pub vocab: usize,
    #[serde(default = "default_context_dim")]
    pub context_dim: usize,
    pub fusion: FusionKind,
    /// Learnable `b_M` in the context projection.
    #[serde(default = "yes")]
    pub fusion_bias: bool,
    #[serde(default = "default_unroll")]
    pub unroll: usize,
    #[serde(default = "yes")]
    pub decoder_bias: bool,
    #[serde(default = "default_lstm_activation")]
    pub lstm_activation: ActivationKind,
}

impl ModelConfig {
    pub fn new(arch: CellKind, hidden: usize, vocab: usize, fusion: FusionKind) -> Self {
        ModelConfig {
            arch,
            hidden,
            vocab,
            context_dim: default_context_dim(),
            fusion,
            fusion_bias: true,
            unroll: default_unroll(),
            decoder_bias: true,
            lstm_activation: default_lstm_activation(),
        }
    }

    pub fn with_context_dim(mut self, d: usize) -> Self {
        self.context_dim = d;
        self
    }

    pub fn is_fused(&self) -> bool {
        self.fusion != FusionKind::None
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.vocab == 0 {
            return Err(Error::Config("hidden and vocab sizes must be at least 1".into()));
        }
        if self.unroll == 0 {
            return Err(Error::Config("unroll length must be at least 1".into()));
        }
        if self.is_fused() && self.context_dim == 0 {
            return Err(Error::Config("context dimension must be at least 1".into()));
        }
        if self.fusion == FusionKind::Inner && self.arch != CellKind::DeltaRnn {
            return Err(Error::Config(format!(
                "inner fusion is only defined for the delta-rnn, not {}",
                self.arch.name()
            )));
        }
        Ok(())
    }

    fn cell_dims(&self) -> CellDims {
        CellDims {
            hidden: self.hidden,
            vocab: self.vocab,
            fusion: self.fusion.mode().map(|mode| FusionSpec {
                context_dim: self.context_dim,
                mode,
                bias: self.fusion_bias,
            }),
        }
    }
}

/// Max-entropy output layer. Rows of `u` double as output word embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoder<X> {
    /// `|V| x H`
    pub u: X,
    /// `1 x |V|`
    pub b_u: Option<X>,
}

pub type DecoderParams<T> = Decoder<Tensor<T>>;

impl<X> Decoder<X> {
    pub fn map<Y>(&self, mut f: impl FnMut(&'static str, &X) -> Y) -> Decoder<Y> {
        Decoder {
            u: f("decoder.u", &self.u),
            b_u: self.b_u.as_ref().map(|b| f("decoder.b_u", b)),
        }
    }

    pub fn visit_mut(&mut self, mut f: impl FnMut(&'static str, &mut X)) {
        f("decoder.u", &mut self.u);
        if let Some(b) = self.b_u.as_mut() {
            f("decoder.b_u", b);
        }
    }
}

/// Padded batch of framed sentences, time-major.
///
/// At step `t`, row `b` consumes `inputs[t][b]` and is scored on
/// `targets[t][b]` when `mask[t][b]` is set.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceBatch {
    pub inputs: Vec<Vec<usize>>,
    pub targets: Vec<Vec<usize>>,
    pub mask: Vec<Vec<bool>>,
    /// Per-sequence context; `None` entries are null (zero) contexts.
    pub contexts: Option<Vec<Option<Vec<f32>>>>,
    pub image_ids: Vec<String>,
}

impl SequenceBatch {
    pub fn steps(&self) -> usize {
        self.inputs.len()
    }

    pub fn batch_size(&self) -> usize {
        self.image_ids.len()
    }

    pub fn token_count(&self) -> usize {
        self.mask.iter().flatten().filter(|m| **m).count()
    }

    /// Same batch with every context replaced by the null vector.
    pub fn with_null_contexts(&self) -> Self {
        let mut b = self.clone();
        b.contexts = Some(vec![None; self.batch_size()]);
        b
    }

    pub fn without_contexts(&self) -> Self {
        let mut b = self.clone();
        b.contexts = None;
        b
    }

    /// Appends masked-out padding steps up to `steps`.
    pub fn padded_to(&self, steps: usize) -> Self {
        let mut b = self.clone();
        let n = self.batch_size();
        while b.inputs.len() < steps {
            b.inputs.push(vec![crate::data::vocab::PAD; n]);
            b.targets.push(vec![crate::data::vocab::PAD; n]);
            b.mask.push(vec![false; n]);
        }
        b
    }

    fn check(&self, vocab: usize) -> Result<()> {
        let n = self.batch_size();
        for (name, rows) in [("input", &self.inputs), ("target", &self.targets)] {
            for (t, row) in rows.iter().enumerate() {
                if row.len() != n {
                    return Err(Error::dim("sequence batch", (t, row.len()), (t, n)));
                }
                if let Some((b, id)) = row.iter().enumerate().find(|(_, &id)| id >= vocab) {
                    return Err(Error::Data(format!(
                        "{name} token id {id} at step {t}, sequence {b} is outside the vocabulary of {vocab}"
                    )));
                }
            }
        }
        if self.mask.len() != self.inputs.len() || self.targets.len() != self.inputs.len() {
            return Err(Error::dim(
                "sequence batch",
                (self.inputs.len(), self.targets.len()),
                (self.mask.len(), n),
            ));
        }
        Ok(())
    }
}

/// Summed negative log likelihood over the counted target tokens.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NllSum {
    pub loss: f64,
    pub tokens: usize,
}

impl NllSum {
    /// True when no target position was counted.
    pub fn is_empty(&self) -> bool {
        self.tokens == 0
    }

    pub fn per_token(&self) -> f64 {
        if self.tokens == 0 {
            0.0
        } else {
            self.loss / self.tokens as f64
        }
    }
}

impl std::ops::AddAssign for NllSum {
    fn add_assign(&mut self, rhs: Self) {
        self.loss += rhs.loss;
        self.tokens += rhs.tokens;
    }
}

/// Recurrent state of one sequence during incremental decoding.
#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentState<T> {
    pub h: Vec<T>,
    pub cell: Option<Vec<T>>,
}

struct Bound {
    cell: Cell<Var>,
    decoder: Decoder<Var>,
    leaves: Vec<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    config: ModelConfig,
    pub cell: CellParams<T>,
    pub decoder: DecoderParams<T>,
}

impl<T: Real> Model<T> {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let cell = init_cell_params(config.arch, config.cell_dims(), config.lstm_activation, seed)?;
        let mut rng = crate::rng::stream(seed, "init/decoder");
        let decoder = Decoder {
            u: Tensor::uniform(config.vocab, config.hidden, 0.1, &mut rng),
            b_u: config.decoder_bias.then(|| Tensor::zeros(1, config.vocab)),
        };
        Ok(Model {
            config,
            cell,
            decoder,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab
    }

    pub fn is_fused(&self) -> bool {
        self.cell.fusion().is_some()
    }

    /// Visits every parameter tensor in canonical order.
    pub fn for_each_param(&self, mut f: impl FnMut(&'static str, &Tensor<T>)) {
        self.cell.map(|n, t| f(n, t));
        self.decoder.map(|n, t| f(n, t));
    }

    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(&'static str, &mut Tensor<T>)) {
        self.cell.visit_mut(&mut f);
        self.decoder.visit_mut(&mut f);
    }

    pub fn param_names(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        self.for_each_param(|n, _| out.push(n));
        out
    }

    /// Parameter tensors in canonical order.
    pub fn params(&self) -> Vec<Tensor<T>> {
        let mut out = Vec::new();
        self.for_each_param(|_, t| out.push(t.clone()));
        out
    }

    /// Replaces all parameters; shapes must match.
    pub fn set_params(&mut self, params: &[Tensor<T>]) -> Result<()> {
        let mut it = params.iter();
        let mut err = None;
        let mut count = 0;
        self.for_each_param_mut(|name, t| {
            count += 1;
            match it.next() {
                Some(p) if p.shape() == t.shape() => *t = p.clone(),
                Some(p) if err.is_none() => err = Some(Error::dim(name, t.shape(), p.shape())),
                _ => {}
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if count != params.len() {
            return Err(Error::dim("set_params", (count, 1), (params.len(), 1)));
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            cell: self.cell.map(|_, t| t.cast()),
            decoder: self.decoder.map(|_, t| t.cast()),
        }
    }

    fn bind(&self, tape: &mut Tape<T>) -> Bound {
        let cell = self.cell.bind(tape);
        let decoder = self.decoder.map(|_, t| tape.leaf(t.clone()));
        let mut leaves = Vec::new();
        cell.map(|_, v| leaves.push(*v));
        decoder.map(|_, v| leaves.push(*v));
        Bound {
            cell,
            decoder,
            leaves,
        }
    }

    fn context_matrix(&self, batch: &SequenceBatch) -> Result<Option<Tensor<T>>> {
        let d = self.config.context_dim;
        match (&batch.contexts, self.is_fused()) {
            (None, false) => Ok(None),
            (Some(_), false) => Err(Error::Usage("contexts supplied to a text-only model".into())),
            (None, true) => Err(Error::Usage(
                "multi-modal model requires per-sequence contexts (use null contexts for none)".into(),
            )),
            (Some(ctxs), true) => {
                if ctxs.len() != batch.batch_size() {
                    return Err(Error::dim("contexts", (ctxs.len(), d), (batch.batch_size(), d)));
                }
                let mut m = Tensor::zeros(ctxs.len(), d);
                for (b, c) in ctxs.iter().enumerate() {
                    if let Some(c) = c {
                        if c.len() != d {
                            return Err(Error::dim("context vector", (1, c.len()), (1, d)));
                        }
                        for (o, &v) in m.row_mut(b).iter_mut().zip(c) {
                            *o = T::from_f32_value(v);
                        }
                    }
                }
                Ok(Some(m))
            }
        }
    }

    fn project(&self, tape: &mut Tape<T>, bound: &Bound, contexts: Option<Tensor<T>>) -> Result<Option<Var>> {
        match (bound.cell.fusion(), contexts) {
            (Some(f), Some(c)) => {
                let c = tape.leaf(c);
                Ok(Some(f.project(tape, c)?))
            }
            _ => Ok(None),
        }
    }

    fn logits(&self, tape: &mut Tape<T>, bound: &Bound, h: Var) -> Result<Var> {
        let l = tape.matmul_nt(h, bound.decoder.u)?;
        match bound.decoder.b_u {
            Some(b) => tape.add_row(l, b),
            None => Ok(l),
        }
    }

    /// Unrolls the batch and returns per-step logits (`B x |V|`).
    fn unroll(&self, tape: &mut Tape<T>, bound: &Bound, batch: &SequenceBatch) -> Result<Vec<Var>> {
        batch.check(self.config.vocab)?;
        if batch.steps() > self.config.unroll {
            return Err(Error::Data(format!(
                "batch has {} steps, more than the unroll length {}",
                batch.steps(),
                self.config.unroll
            )));
        }
        let contexts = self.context_matrix(batch)?;
        let ctx = self.project(tape, bound, contexts)?;
        let mut state = bound.cell.zero_state(tape, batch.batch_size(), self.config.hidden);
        let mut out = Vec::with_capacity(batch.steps());
        for ids in &batch.inputs {
            state = bound.cell.step(tape, ids, &state, ctx)?;
            out.push(self.logits(tape, bound, state.h)?);
        }
        Ok(out)
    }

    fn nll_on_tape(&self, tape: &mut Tape<T>, bound: &Bound, batch: &SequenceBatch) -> Result<(Var, usize)> {
        let logits = self.unroll(tape, bound, batch)?;
        let mut total: Option<Var> = None;
        for (t, l) in logits.into_iter().enumerate() {
            let mask: Vec<T> = batch.mask[t].iter().map(|&m| if m { T::one() } else { T::zero() }).collect();
            let step = tape.masked_nll(l, &batch.targets[t], &mask)?;
            total = Some(match total {
                Some(acc) => tape.add(acc, step)?,
                None => step,
            });
        }
        let total = match total {
            Some(v) => v,
            None => tape.leaf(Tensor::zeros(1, 1)),
        };
        Ok((total, batch.token_count()))
    }

    /// Per-step next-token distributions (`B x |V|`, rows sum to one).
    pub fn forward_sequence(&self, batch: &SequenceBatch) -> Result<Vec<Tensor<T>>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let logits = self.unroll(&mut tape, &bound, batch)?;
        Ok(logits.into_iter().map(|l| tape.value(l).softmax_rows()).collect())
    }

    /// Summed NLL over masked-in targets and their count.
    pub fn sequence_nll(&self, batch: &SequenceBatch) -> Result<NllSum> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let (loss, tokens) = self.nll_on_tape(&mut tape, &bound, batch)?;
        Ok(NllSum {
            loss: tape.scalar(loss).to_f64_lossless(),
            tokens,
        })
    }

    /// Summed NLL with its gradient for every parameter, in canonical order.
    pub fn nll_and_gradients(&self, batch: &SequenceBatch) -> Result<(NllSum, Vec<Tensor<T>>)> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let (loss, tokens) = self.nll_on_tape(&mut tape, &bound, batch)?;
        let value = tape.scalar(loss).to_f64_lossless();
        let mut grads = tape.backward(loss)?;
        let g = bound.leaves.iter().map(|&v| grads.take(v)).collect();
        Ok((NllSum { loss: value, tokens }, g))
    }

    /// Distribution over the next token after consuming `prefix`.
    pub fn predict_next(&self, prefix: &[usize], context: Option<&[f32]>) -> Result<Vec<T>> {
        if prefix.first() != Some(&BOS) {
            return Err(Error::Usage("prefix must be non-empty and start with BOS".into()));
        }
        let n = prefix.len();
        let batch = SequenceBatch {
            inputs: prefix.iter().map(|&t| vec![t]).collect(),
            targets: vec![vec![0]; n],
            mask: vec![vec![false]; n],
            contexts: self.is_fused().then(|| vec![context.map(<[f32]>::to_vec)]),
            image_ids: vec![String::new()],
        };
        let mut probs = self.forward_sequence(&batch)?;
        Ok(probs.pop().expect("non-empty prefix").into_data())
    }

    /// Projected context for incremental decoding (`1 x H`); `None` for text-only models.
    pub fn project_context(&self, context: Option<&[f32]>) -> Result<Option<Tensor<T>>> {
        match self.cell.fusion() {
            None => Ok(None),
            Some(f) => {
                let c: Option<Vec<T>> = context.map(|c| c.iter().map(|&v| T::from_f32_value(v)).collect());
                Ok(Some(f.project_context(c.as_deref())?))
            }
        }
    }

    pub fn initial_state(&self) -> RecurrentState<T> {
        RecurrentState {
            h: vec![T::zero(); self.config.hidden],
            cell: (self.config.arch == CellKind::Lstm).then(|| vec![T::zero(); self.config.hidden]),
        }
    }

    /// Advances each state by one token and returns next-token log
    /// probabilities (`B x |V|`). `ctx_proj` is a `1 x H` projection shared by
    /// all rows.
    pub fn decode_step(
        &self,
        states: &[RecurrentState<T>],
        tokens: &[usize],
        ctx_proj: Option<&Tensor<T>>,
    ) -> Result<(Vec<RecurrentState<T>>, Tensor<T>)> {
        let n = states.len();
        let hdim = self.config.hidden;
        if tokens.len() != n {
            return Err(Error::dim("decode_step", (n, hdim), (tokens.len(), hdim)));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab) {
            return Err(Error::Data(format!("token id {bad} outside the vocabulary")));
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let stack = |f: &dyn Fn(&RecurrentState<T>) -> &[T]| -> Tensor<T> {
            let rows: Vec<Vec<T>> = states.iter().map(|s| f(s).to_vec()).collect();
            Tensor::from_rows(&rows).unwrap_or_else(|_| Tensor::zeros(n, hdim))
        };
        let h = tape.leaf(stack(&|s| &s.h));
        let cell = (self.config.arch == CellKind::Lstm)
            .then(|| tape.leaf(stack(&|s| s.cell.as_deref().unwrap_or(&[]))));
        let ctx = match ctx_proj {
            Some(p) => {
                let rows: Vec<Vec<T>> = (0..n).map(|_| p.data().to_vec()).collect();
                Some(tape.leaf(Tensor::from_rows(&rows)?))
            }
            None => None,
        };
        let next = bound.cell.step(&mut tape, tokens, &StepState { h, cell }, ctx)?;
        let logits = self.logits(&mut tape, &bound, next.h)?;
        let mut logp = tape.value(logits).clone();
        for r in 0..n {
            let row = logp.row_mut(r);
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let hv = tape.value(next.h);
        let cv = next.cell.map(|c| tape.value(c).clone());
        let out = (0..n)
            .map(|r| RecurrentState {
                h: hv.row(r).to_vec(),
                cell: cv.as_ref().map(|c| c.row(r).to_vec()),
            })
            .collect();
        Ok((out, logp))
    }
}
