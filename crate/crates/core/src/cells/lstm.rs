use rand::Rng;

use super::fusion::Fusion;
use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::tensor::{ActivationKind, Real, Tensor};

/// Peephole LSTM parameters. `u_*` are diagonal peepholes stored as `1 x H`.
#[derive(Debug, Clone, PartialEq)]
pub struct Lstm<X> {
    pub w_z: X,
    pub v_z: X,
    pub w_i: X,
    pub v_i: X,
    pub u_i: X,
    pub w_f: X,
    pub v_f: X,
    pub u_f: X,
    pub w_r: X,
    pub v_r: X,
    pub u_r: X,
    /// Activation on the block input and on the cell memory before output gating.
    pub activation: ActivationKind,
    pub fusion: Option<Fusion<X>>,
}

pub type LstmParams<T> = Lstm<Tensor<T>>;

impl<X> Lstm<X> {
    pub fn map<Y>(&self, mut f: impl FnMut(&'static str, &X) -> Y) -> Lstm<Y> {
        Lstm {
            w_z: f("cell.w_z", &self.w_z),
            v_z: f("cell.v_z", &self.v_z),
            w_i: f("cell.w_i", &self.w_i),
            v_i: f("cell.v_i", &self.v_i),
            u_i: f("cell.u_i", &self.u_i),
            w_f: f("cell.w_f", &self.w_f),
            v_f: f("cell.v_f", &self.v_f),
            u_f: f("cell.u_f", &self.u_f),
            w_r: f("cell.w_r", &self.w_r),
            v_r: f("cell.v_r", &self.v_r),
            u_r: f("cell.u_r", &self.u_r),
            activation: self.activation,
            fusion: self.fusion.as_ref().map(|fu| fu.map(&mut f)),
        }
    }

    pub fn visit_mut(&mut self, mut f: impl FnMut(&'static str, &mut X)) {
        f("cell.w_z", &mut self.w_z);
        f("cell.v_z", &mut self.v_z);
        f("cell.w_i", &mut self.w_i);
        f("cell.v_i", &mut self.v_i);
        f("cell.u_i", &mut self.u_i);
        f("cell.w_f", &mut self.w_f);
        f("cell.v_f", &mut self.v_f);
        f("cell.u_f", &mut self.u_f);
        f("cell.w_r", &mut self.w_r);
        f("cell.v_r", &mut self.v_r);
        f("cell.u_r", &mut self.u_r);
        if let Some(fu) = self.fusion.as_mut() {
            fu.visit_mut(&mut f);
        }
    }
}

impl<T: Real> LstmParams<T> {
    pub fn init<R: Rng>(
        hidden: usize,
        vocab: usize,
        activation: ActivationKind,
        fusion: Option<Fusion<Tensor<T>>>,
        rng: &mut R,
    ) -> Self {
        let mut input = || Tensor::uniform(hidden, vocab, 0.1, rng);
        let (w_z, w_i, w_f, w_r) = (input(), input(), input(), input());
        let mut square = || Tensor::uniform(hidden, hidden, 0.1, rng);
        let (v_z, v_i, v_f, v_r) = (square(), square(), square(), square());
        let mut peep = || Tensor::uniform(1, hidden, 0.1, rng);
        let (u_i, u_f, u_r) = (peep(), peep(), peep());
        Lstm {
            w_z,
            v_z,
            w_i,
            v_i,
            u_i,
            w_f,
            v_f,
            u_f,
            w_r,
            v_r,
            u_r,
            activation,
            fusion,
        }
    }
}

impl Lstm<Var> {
    fn gate<T: Real>(&self, tape: &mut Tape<T>, w: Var, v: Var, ids: &[usize], h_prev: Var) -> Result<Var> {
        let x = tape.gather_columns(w, ids)?;
        let h = tape.matmul_nt(h_prev, v)?;
        tape.add(x, h)
    }

    /// Returns `(h, c)`.
    pub fn step<T: Real>(
        &self,
        tape: &mut Tape<T>,
        ids: &[usize],
        h_prev: Var,
        c_prev: Var,
        ctx: Option<Var>,
    ) -> Result<(Var, Var)> {
        let z_pre = self.gate(tape, self.w_z, self.v_z, ids, h_prev)?;
        let z = tape.activation(self.activation, z_pre);

        let i_lin = self.gate(tape, self.w_i, self.v_i, ids, h_prev)?;
        let i_peep = tape.mul_row(c_prev, self.u_i)?;
        let i_pre = tape.add(i_lin, i_peep)?;
        let i = tape.sigmoid(i_pre);

        let f_lin = self.gate(tape, self.w_f, self.v_f, ids, h_prev)?;
        let f_peep = tape.mul_row(c_prev, self.u_f)?;
        let f_pre = tape.add(f_lin, f_peep)?;
        let f = tape.sigmoid(f_pre);

        let kept = tape.hadamard(f, c_prev)?;
        let written = tape.hadamard(i, z)?;
        let c = tape.add(kept, written)?;

        let r_lin = self.gate(tape, self.w_r, self.v_r, ids, h_prev)?;
        let r_peep = tape.mul_row(c, self.u_r)?;
        let r_pre = tape.add(r_lin, r_peep)?;
        let r = tape.sigmoid(r_pre);

        let squashed = tape.activation(self.activation, c);
        let mut h = tape.hadamard(r, squashed)?;
        if let Some(g) = ctx {
            h = tape.hadamard(h, g)?;
        }
        Ok((h, c))
    }
}
