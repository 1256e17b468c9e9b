use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Where the projected context enters the recurrence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMode {
    /// Added inside the candidate-state activation (Delta-RNN only).
    Inner,
    /// Multiplies the mixed hidden state.
    Outer,
}

/// Projection of a context vector into hidden space: `M c + b_M`.
#[derive(Debug, Clone, PartialEq)]
pub struct Fusion<X> {
    /// `H x D`
    pub m: X,
    /// `1 x H`; absent when the fusion bias is disabled.
    pub b_m: Option<X>,
    pub mode: FusionMode,
}

pub type FusionParams<T> = Fusion<Tensor<T>>;

impl<X> Fusion<X> {
    pub fn map<Y>(&self, mut f: impl FnMut(&'static str, &X) -> Y) -> Fusion<Y> {
        Fusion {
            m: f("fusion.m", &self.m),
            b_m: self.b_m.as_ref().map(|b| f("fusion.b_m", b)),
            mode: self.mode,
        }
    }

    pub fn visit_mut(&mut self, mut f: impl FnMut(&'static str, &mut X)) {
        f("fusion.m", &mut self.m);
        if let Some(b) = self.b_m.as_mut() {
            f("fusion.b_m", b);
        }
    }
}

impl<T: Real> FusionParams<T> {
    /// `M ~ U(-0.1, 0.1)`. Outer bias starts at ones so a zero context
    /// leaves the gate at identity; inner bias starts at zero.
    pub fn init<R: Rng>(hidden: usize, context_dim: usize, mode: FusionMode, bias: bool, rng: &mut R) -> Self {
        let m = Tensor::uniform(hidden, context_dim, 0.1, rng);
        let b_m = bias.then(|| match mode {
            FusionMode::Outer => Tensor::ones(1, hidden),
            FusionMode::Inner => Tensor::zeros(1, hidden),
        });
        Fusion { m, b_m, mode }
    }

    pub fn hidden(&self) -> usize {
        self.m.rows()
    }

    pub fn context_dim(&self) -> usize {
        self.m.cols()
    }

    /// `M c + b_M` for a single context; `None` is the zero vector.
    pub fn project_context(&self, c: Option<&[T]>) -> Result<Tensor<T>> {
        let d = self.context_dim();
        let c = match c {
            Some(c) if c.len() != d => return Err(Error::dim("project_context", (1, c.len()), (1, d))),
            Some(c) => Tensor::row_vector(c.to_vec()),
            None => Tensor::zeros(1, d),
        };
        let mut out = c.matmul_nt(&self.m)?;
        if let Some(b) = &self.b_m {
            out.add_assign(b)?;
        }
        Ok(out)
    }
}

impl Fusion<Var> {
    /// Projects a `B x D` batch of contexts to `B x H`.
    pub fn project<T: Real>(&self, tape: &mut Tape<T>, contexts: Var) -> Result<Var> {
        let proj = tape.matmul_nt(contexts, self.m)?;
        match self.b_m {
            Some(b) => tape.add_row(proj, b),
            None => Ok(proj),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn null_context_yields_bias() {
        let mut rng = crate::rng::stream(1, "t");
        let f = FusionParams::<f64>::init(4, 3, FusionMode::Outer, true, &mut rng);
        assert_eq!(f.project_context(None).unwrap(), Tensor::ones(1, 4));
        let zero = [0.0; 3];
        assert_eq!(f.project_context(Some(&zero)).unwrap(), Tensor::ones(1, 4));
    }

    #[test]
    fn identity_projection() {
        let f = Fusion {
            m: Tensor::<f64>::identity(2),
            b_m: Some(Tensor::zeros(1, 2)),
            mode: FusionMode::Outer,
        };
        assert_eq!(f.project_context(Some(&[1.0, 2.0])).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn random_projection_matches_naive_loops() {
        let mut rng = crate::rng::stream(9, "t");
        let f = FusionParams::<f64>::init(5, 7, FusionMode::Outer, true, &mut rng);
        let mut f = f;
        f.b_m = Some(Tensor::uniform(1, 5, 1.0, &mut rng));
        let c: Vec<f64> = (0..7).map(|i| (i as f64 * 0.37).sin()).collect();
        let got = f.project_context(Some(&c)).unwrap();
        for h in 0..5 {
            let mut acc = f.b_m.as_ref().unwrap().data()[h];
            for d in 0..7 {
                acc += f.m.get(h, d) * c[d];
            }
            assert!((got.data()[h] - acc).abs() < 1e-12);
        }
    }

    #[test]
    fn wrong_context_dimension() {
        let mut rng = crate::rng::stream(1, "t");
        let f = FusionParams::<f64>::init(4, 3, FusionMode::Outer, true, &mut rng);
        assert!(matches!(
            f.project_context(Some(&[1.0, 2.0])),
            Err(Error::Dimension { .. })
        ));
    }
}
