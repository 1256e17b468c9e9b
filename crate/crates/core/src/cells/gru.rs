use rand::Rng;

use super::fusion::Fusion;
use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::tensor::{Real, Tensor};

/// GRU parameters. Input matrices are `H x |V|`, recurrent ones `H x H`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gru<X> {
    pub w_z: X,
    pub v_z: X,
    pub w_r: X,
    pub v_r: X,
    pub w_h: X,
    pub v_h: X,
    pub fusion: Option<Fusion<X>>,
}

pub type GruParams<T> = Gru<Tensor<T>>;

impl<X> Gru<X> {
    pub fn map<Y>(&self, mut f: impl FnMut(&'static str, &X) -> Y) -> Gru<Y> {
        Gru {
            w_z: f("cell.w_z", &self.w_z),
            v_z: f("cell.v_z", &self.v_z),
            w_r: f("cell.w_r", &self.w_r),
            v_r: f("cell.v_r", &self.v_r),
            w_h: f("cell.w_h", &self.w_h),
            v_h: f("cell.v_h", &self.v_h),
            fusion: self.fusion.as_ref().map(|fu| fu.map(&mut f)),
        }
    }

    pub fn visit_mut(&mut self, mut f: impl FnMut(&'static str, &mut X)) {
        f("cell.w_z", &mut self.w_z);
        f("cell.v_z", &mut self.v_z);
        f("cell.w_r", &mut self.w_r);
        f("cell.v_r", &mut self.v_r);
        f("cell.w_h", &mut self.w_h);
        f("cell.v_h", &mut self.v_h);
        if let Some(fu) = self.fusion.as_mut() {
            fu.visit_mut(&mut f);
        }
    }
}

impl<T: Real> GruParams<T> {
    pub fn init<R: Rng>(hidden: usize, vocab: usize, fusion: Option<Fusion<Tensor<T>>>, rng: &mut R) -> Self {
        Gru {
            w_z: Tensor::uniform(hidden, vocab, 0.1, rng),
            v_z: Tensor::uniform(hidden, hidden, 0.1, rng),
            w_r: Tensor::uniform(hidden, vocab, 0.1, rng),
            v_r: Tensor::uniform(hidden, hidden, 0.1, rng),
            w_h: Tensor::uniform(hidden, vocab, 0.1, rng),
            v_h: Tensor::uniform(hidden, hidden, 0.1, rng),
            fusion,
        }
    }
}

impl Gru<Var> {
    pub fn step<T: Real>(&self, tape: &mut Tape<T>, ids: &[usize], h_prev: Var, ctx: Option<Var>) -> Result<Var> {
        let xz = tape.gather_columns(self.w_z, ids)?;
        let hz = tape.matmul_nt(h_prev, self.v_z)?;
        let z_pre = tape.add(xz, hz)?;
        let z = tape.sigmoid(z_pre);

        let xr = tape.gather_columns(self.w_r, ids)?;
        let hr = tape.matmul_nt(h_prev, self.v_r)?;
        let r_pre = tape.add(xr, hr)?;
        let r = tape.sigmoid(r_pre);

        let xh = tape.gather_columns(self.w_h, ids)?;
        let reset = tape.hadamard(r, h_prev)?;
        let hh = tape.matmul_nt(reset, self.v_h)?;
        let cand_pre = tape.add(xh, hh)?;
        let cand = tape.tanh(cand_pre);

        let slow = tape.hadamard(z, h_prev)?;
        let keep = tape.affine(z, -T::one(), T::one());
        let fast = tape.hadamard(keep, cand)?;
        let mixed = tape.add(slow, fast)?;
        match ctx {
            Some(c) => tape.hadamard(mixed, c),
            None => Ok(mixed),
        }
    }
}
