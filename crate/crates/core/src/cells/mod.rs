//! Recurrent cells: Delta-RNN, GRU and peephole LSTM, each optionally fused
//! with a projected context vector.
//!
//! Every parameter container is generic over its leaf type so the same
//! struct holds concrete tensors (`X = Tensor<T>`) or their handles on a
//! tape (`X = Var`).

mod delta;
mod fusion;
mod gru;
mod lstm;

pub use delta::{DeltaRnn, DeltaRnnParams};
pub use fusion::{Fusion, FusionMode, FusionParams};
pub use gru::{Gru, GruParams};
pub use lstm::{Lstm, LstmParams};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{ActivationKind, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CellKind {
    DeltaRnn,
    Gru,
    Lstm,
}

impl CellKind {
    pub fn name(self) -> &'static str {
        match self {
            CellKind::DeltaRnn => "delta-rnn",
            CellKind::Gru => "gru",
            CellKind::Lstm => "lstm",
        }
    }
}

impl std::str::FromStr for CellKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "delta-rnn" | "delta" => Ok(CellKind::DeltaRnn),
            "gru" => Ok(CellKind::Gru),
            "lstm" => Ok(CellKind::Lstm),
            other => Err(Error::Config(format!("unknown cell kind `{other}`"))),
        }
    }
}

/// Context fusion settings for a cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FusionSpec {
    pub context_dim: usize,
    pub mode: FusionMode,
    pub bias: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellDims {
    pub hidden: usize,
    pub vocab: usize,
    pub fusion: Option<FusionSpec>,
}

/// Parameters of one recurrent cell of any kind.
#[derive(Debug, Clone, PartialEq)]
pub enum Cell<X> {
    DeltaRnn(DeltaRnn<X>),
    Gru(Gru<X>),
    Lstm(Lstm<X>),
}

pub type CellParams<T> = Cell<Tensor<T>>;

/// Recurrent state carried between steps.
#[derive(Debug, Clone, PartialEq)]
pub struct StepState<X> {
    pub h: X,
    /// LSTM cell memory.
    pub cell: Option<X>,
}

impl<X> Cell<X> {
    pub fn kind(&self) -> CellKind {
        match self {
            Cell::DeltaRnn(_) => CellKind::DeltaRnn,
            Cell::Gru(_) => CellKind::Gru,
            Cell::Lstm(_) => CellKind::Lstm,
        }
    }

    pub fn fusion(&self) -> Option<&Fusion<X>> {
        match self {
            Cell::DeltaRnn(p) => p.fusion.as_ref(),
            Cell::Gru(p) => p.fusion.as_ref(),
            Cell::Lstm(p) => p.fusion.as_ref(),
        }
    }

    pub fn fusion_mut(&mut self) -> Option<&mut Fusion<X>> {
        match self {
            Cell::DeltaRnn(p) => p.fusion.as_mut(),
            Cell::Gru(p) => p.fusion.as_mut(),
            Cell::Lstm(p) => p.fusion.as_mut(),
        }
    }

    /// The input matrix that pretrained word vectors initialize.
    pub fn embedding_matrix_mut(&mut self) -> &mut X {
        match self {
            Cell::DeltaRnn(p) => &mut p.w,
            Cell::Gru(p) => &mut p.w_h,
            Cell::Lstm(p) => &mut p.w_i,
        }
    }

    pub fn map<Y>(&self, f: impl FnMut(&'static str, &X) -> Y) -> Cell<Y> {
        match self {
            Cell::DeltaRnn(p) => Cell::DeltaRnn(p.map(f)),
            Cell::Gru(p) => Cell::Gru(p.map(f)),
            Cell::Lstm(p) => Cell::Lstm(p.map(f)),
        }
    }

    pub fn visit_mut(&mut self, f: impl FnMut(&'static str, &mut X)) {
        match self {
            Cell::DeltaRnn(p) => p.visit_mut(f),
            Cell::Gru(p) => p.visit_mut(f),
            Cell::Lstm(p) => p.visit_mut(f),
        }
    }
}

/// Draws fresh cell parameters: matrices `U(-0.1, 0.1)`, biases zero,
/// Delta-RNN gating coefficients one.
pub fn init_cell_params<T: Real>(
    kind: CellKind,
    dims: CellDims,
    lstm_activation: ActivationKind,
    seed: u64,
) -> Result<CellParams<T>> {
    if dims.hidden == 0 || dims.vocab == 0 {
        return Err(Error::Config(format!(
            "hidden ({}) and vocabulary ({}) sizes must be positive",
            dims.hidden, dims.vocab
        )));
    }
    if let Some(f) = dims.fusion {
        if f.context_dim == 0 {
            return Err(Error::Config("context dimension must be positive".into()));
        }
        if f.mode == FusionMode::Inner && kind != CellKind::DeltaRnn {
            return Err(Error::Config(format!(
                "inner fusion is only defined for the delta-rnn, not {}",
                kind.name()
            )));
        }
    }
    let mut rng = crate::rng::stream(seed, "init/cell");
    let mut fusion_rng = crate::rng::stream(seed, "init/fusion");
    let fusion = dims
        .fusion
        .map(|f| FusionParams::init(dims.hidden, f.context_dim, f.mode, f.bias, &mut fusion_rng));
    Ok(match kind {
        CellKind::DeltaRnn => Cell::DeltaRnn(DeltaRnnParams::init(dims.hidden, dims.vocab, fusion, &mut rng)),
        CellKind::Gru => Cell::Gru(GruParams::init(dims.hidden, dims.vocab, fusion, &mut rng)),
        CellKind::Lstm => Cell::Lstm(LstmParams::init(
            dims.hidden,
            dims.vocab,
            lstm_activation,
            fusion,
            &mut rng,
        )),
    })
}

impl<T: Real> CellParams<T> {
    pub fn hidden(&self) -> usize {
        match self {
            Cell::DeltaRnn(p) => p.v.rows(),
            Cell::Gru(p) => p.v_z.rows(),
            Cell::Lstm(p) => p.v_z.rows(),
        }
    }

    /// Registers every tensor as a leaf on `tape`, in visiting order.
    pub fn bind(&self, tape: &mut Tape<T>) -> Cell<Var> {
        self.map(|_, t| tape.leaf(t.clone()))
    }

    /// Eager single-sequence step; builds and discards a private tape.
    pub fn step(
        &self,
        token: usize,
        state: &StepState<Tensor<T>>,
        ctx_proj: Option<&Tensor<T>>,
    ) -> Result<StepState<Tensor<T>>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let h = tape.leaf(state.h.clone());
        let cell = state.cell.as_ref().map(|c| tape.leaf(c.clone()));
        let ctx = ctx_proj.map(|c| tape.leaf(c.clone()));
        let next = bound.step(&mut tape, &[token], &StepState { h, cell }, ctx)?;
        Ok(StepState {
            h: tape.value(next.h).clone(),
            cell: next.cell.map(|c| tape.value(c).clone()),
        })
    }

    pub fn zero_state(&self, batch: usize) -> StepState<Tensor<T>> {
        let h = self.hidden();
        StepState {
            h: Tensor::zeros(batch, h),
            cell: matches!(self, Cell::Lstm(_)).then(|| Tensor::zeros(batch, h)),
        }
    }
}

impl Cell<Var> {
    pub fn zero_state<T: Real>(&self, tape: &mut Tape<T>, batch: usize, hidden: usize) -> StepState<Var> {
        let h = tape.leaf(Tensor::zeros(batch, hidden));
        let cell = matches!(self, Cell::Lstm(_)).then(|| tape.leaf(Tensor::zeros(batch, hidden)));
        StepState { h, cell }
    }

    /// Advances every row of the batch by one token.
    ///
    /// `ctx` must be present exactly when the cell has fusion parameters.
    pub fn step<T: Real>(
        &self,
        tape: &mut Tape<T>,
        ids: &[usize],
        state: &StepState<Var>,
        ctx: Option<Var>,
    ) -> Result<StepState<Var>> {
        match (self.fusion().is_some(), ctx.is_some()) {
            (true, false) => {
                return Err(Error::Usage(
                    "cell has fusion parameters but no projected context was given".into(),
                ))
            }
            (false, true) => {
                return Err(Error::Usage(
                    "projected context given to a text-only cell".into(),
                ))
            }
            _ => {}
        }
        let (b, hidden) = tape.shape(state.h);
        if b != ids.len() {
            return Err(Error::dim("cell step", (b, hidden), (ids.len(), hidden)));
        }
        if let Some(c) = ctx {
            if tape.shape(c) != (b, hidden) {
                return Err(Error::dim("cell step context", tape.shape(c), (b, hidden)));
            }
        }
        match self {
            Cell::DeltaRnn(p) => Ok(StepState {
                h: p.step(tape, ids, state.h, ctx)?,
                cell: None,
            }),
            Cell::Gru(p) => Ok(StepState {
                h: p.step(tape, ids, state.h, ctx)?,
                cell: None,
            }),
            Cell::Lstm(p) => {
                let c_prev = state
                    .cell
                    .ok_or_else(|| Error::Usage("lstm step requires cell memory".into()))?;
                let (h, c) = p.step(tape, ids, state.h, c_prev, ctx)?;
                Ok(StepState { h, cell: Some(c) })
            }
        }
    }
}
