use rand::Rng;

use super::fusion::{Fusion, FusionMode};
use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::tensor::{Real, Tensor};

/// Delta-RNN parameters: a rate gate mixes a proposed fast state with the
/// previous (slow) state.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaRnn<X> {
    /// Input-to-hidden, `H x |V|`; column `w` is the embedding of token `w`.
    pub w: X,
    /// Recurrent, `H x H`.
    pub v: X,
    /// Rate-gate bias, `1 x H`.
    pub b_r: X,
    pub alpha: X,
    pub beta1: X,
    pub beta2: X,
    pub fusion: Option<Fusion<X>>,
}

pub type DeltaRnnParams<T> = DeltaRnn<Tensor<T>>;

impl<X> DeltaRnn<X> {
    pub fn map<Y>(&self, mut f: impl FnMut(&'static str, &X) -> Y) -> DeltaRnn<Y> {
        DeltaRnn {
            w: f("cell.w", &self.w),
            v: f("cell.v", &self.v),
            b_r: f("cell.b_r", &self.b_r),
            alpha: f("cell.alpha", &self.alpha),
            beta1: f("cell.beta1", &self.beta1),
            beta2: f("cell.beta2", &self.beta2),
            fusion: self.fusion.as_ref().map(|fu| fu.map(&mut f)),
        }
    }

    pub fn visit_mut(&mut self, mut f: impl FnMut(&'static str, &mut X)) {
        f("cell.w", &mut self.w);
        f("cell.v", &mut self.v);
        f("cell.b_r", &mut self.b_r);
        f("cell.alpha", &mut self.alpha);
        f("cell.beta1", &mut self.beta1);
        f("cell.beta2", &mut self.beta2);
        if let Some(fu) = self.fusion.as_mut() {
            fu.visit_mut(&mut f);
        }
    }
}

impl<T: Real> DeltaRnnParams<T> {
    pub fn init<R: Rng>(hidden: usize, vocab: usize, fusion: Option<Fusion<Tensor<T>>>, rng: &mut R) -> Self {
        DeltaRnn {
            w: Tensor::uniform(hidden, vocab, 0.1, rng),
            v: Tensor::uniform(hidden, hidden, 0.1, rng),
            b_r: Tensor::zeros(1, hidden),
            alpha: Tensor::ones(1, hidden),
            beta1: Tensor::ones(1, hidden),
            beta2: Tensor::ones(1, hidden),
            fusion,
        }
    }
}

impl DeltaRnn<Var> {
    /// One step for a batch: `ids` selects the data-driven input per row,
    /// `h_prev` is `B x H`, `ctx` the projected context (`B x H`).
    pub fn step<T: Real>(&self, tape: &mut Tape<T>, ids: &[usize], h_prev: Var, ctx: Option<Var>) -> Result<Var> {
        let d_rec = tape.matmul_nt(h_prev, self.v)?;
        let d_dat = tape.gather_columns(self.w, ids)?;

        let prod = tape.hadamard(d_rec, d_dat)?;
        let d1 = tape.mul_row(prod, self.alpha)?;
        let rec = tape.mul_row(d_rec, self.beta1)?;
        let dat = tape.mul_row(d_dat, self.beta2)?;
        let d2 = tape.add(rec, dat)?;
        let mut pre = tape.add(d1, d2)?;

        let mode = self.fusion.as_ref().map(|f| f.mode);
        if let (Some(FusionMode::Inner), Some(c)) = (mode, ctx) {
            pre = tape.add(pre, c)?;
        }
        let z = tape.tanh(pre);

        let gate_pre = tape.add_row(d_dat, self.b_r)?;
        let r = tape.sigmoid(gate_pre);
        let keep = tape.affine(r, -T::one(), T::one());
        let fast = tape.hadamard(keep, z)?;
        let slow = tape.hadamard(r, h_prev)?;
        let mut mixed = tape.add(fast, slow)?;

        if let (Some(FusionMode::Outer), Some(c)) = (mode, ctx) {
            mixed = tape.hadamard(mixed, c)?;
        }
        Ok(tape.relu(mixed))
    }
}
