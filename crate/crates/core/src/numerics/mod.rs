//! Dense tensors, reverse-mode differentiation, optimizers and seeded randomness.

mod graph;
mod optim;
mod rng;
mod tensor;

pub mod gradcheck;

pub use graph::{Gradients, Graph, Var};
pub use optim::{OptimizerKind, OptimizerState};
pub use rng::SeededRng;
pub use tensor::Tensor;

/// Glorot-style uniform initialization in `±sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut SeededRng) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let values = (0..n).map(|_| rng.uniform_range(-limit, limit)).collect();
    Tensor::new(shape.to_vec(), values).expect("length matches shape")
}

#[cfg(test)]
mod tests;
