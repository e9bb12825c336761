//! Small shared building blocks for the learnable modules.

use crate::diff::{Array, DiffError, ParamStore, Tape, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Deterministic weight initializer: uniform in ±1/sqrt(fan_in).
pub struct Init {
    pub rng: ChaCha8Rng,
}

impl Init {
    pub fn new(rng: ChaCha8Rng) -> Self {
        Init { rng }
    }

    pub fn weight(&mut self, rows: usize, cols: usize) -> Array {
        let scale = 1.0 / (rows as f64).sqrt();
        let data: Vec<f64> = (0..rows * cols)
            .map(|_| self.rng.random_range(-scale..scale))
            .collect();
        Array::matrix(rows, cols, data).expect("weight shape")
    }

    pub fn noise(&mut self, shape: &[usize], scale: f64) -> Array {
        let numel: usize = shape.iter().product();
        let data: Vec<f64> = (0..numel)
            .map(|_| self.rng.random_range(-scale..scale))
            .collect();
        Array::new(shape.to_vec(), data).expect("noise shape")
    }
}

/// Register `<prefix>.w` and `<prefix>.b` for a dense layer.
pub fn register_linear(
    store: &mut ParamStore,
    prefix: &str,
    d_in: usize,
    d_out: usize,
    init: &mut Init,
    zero: bool,
) -> Result<(), DiffError> {
    let w = if zero {
        Array::zeros(&[d_in, d_out])
    } else {
        init.weight(d_in, d_out)
    };
    store.register(&format!("{prefix}.w"), w)?;
    store.register(&format!("{prefix}.b"), Array::zeros(&[d_out]))?;
    Ok(())
}

/// `x @ w + b`.
pub fn linear(tape: &mut Tape, store: &ParamStore, prefix: &str, x: Var) -> Result<Var, DiffError> {
    let w = tape.param(store, &format!("{prefix}.w"))?;
    let b = tape.param(store, &format!("{prefix}.b"))?;
    let y = tape.matmul(x, w)?;
    tape.add(y, b)
}

/// `relu(x @ w + b)`.
pub fn linear_relu(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    x: Var,
) -> Result<Var, DiffError> {
    let y = linear(tape, store, prefix, x)?;
    Ok(tape.relu(y))
}
