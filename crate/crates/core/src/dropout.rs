use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Graph, Result, Tensor, TensorError, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Inverted-dropout keep mask: each entry is `0` with probability `p`,
/// otherwise `1 / (1 - p)`.
pub fn dropout_mask(shape: &[usize], p: f64, rng: &mut impl Rng) -> Result<Tensor> {
    if !(0.0..1.0).contains(&p) {
        return Err(TensorError::Invalid {
            op: "dropout",
            msg: format!("probability {p} outside [0, 1)"),
        });
    }
    let n: usize = shape.iter().product();
    let keep = 1.0 / (1.0 - p);
    let data = (0..n)
        .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
        .collect();
    Tensor::new(shape, data)
}

/// Untaped dropout of a single tensor under a fixed seed.
pub fn dropout(x: &Tensor, p: f64, mode: Mode, seed: u64) -> Result<Tensor> {
    if !(0.0..1.0).contains(&p) {
        return Err(TensorError::Invalid {
            op: "dropout",
            msg: format!("probability {p} outside [0, 1)"),
        });
    }
    if mode == Mode::Infer || p == 0.0 {
        return Ok(x.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mask = dropout_mask(x.shape(), p, &mut rng)?;
    let data = x.data().iter().zip(mask.data()).map(|(a, m)| a * m).collect();
    Tensor::new(x.shape(), data)
}

/// Dropout state threaded through one forward pass.
pub struct Dropout {
    pub p: f64,
    pub mode: Mode,
    rng: ChaCha8Rng,
}

impl Dropout {
    pub fn new(p: f64, mode: Mode, seed: u64) -> Self {
        Self {
            p,
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn inference() -> Self {
        Self::new(0.0, Mode::Infer, 0)
    }

    /// Identity in inference mode or at `p = 0`; no node is recorded then.
    pub fn apply(&mut self, g: &mut Graph, x: Var) -> Result<Var> {
        if self.mode == Mode::Infer || self.p == 0.0 {
            if !(0.0..1.0).contains(&self.p) {
                return Err(TensorError::Invalid {
                    op: "dropout",
                    msg: format!("probability {} outside [0, 1)", self.p),
                });
            }
            return Ok(x);
        }
        let mask = dropout_mask(g.value(x).shape(), self.p, &mut self.rng)?;
        let m = g.constant(mask);
        g.mul(x, m)
    }
}
