//! Dense `f64` tensors with a reverse-mode gradient tape.
//!
//! The op set is closed: matmul, add, mul, softmax, rms_norm, embedding,
//! rotary rotation, cross_entropy and the shape ops. Everything else in the
//! crate is composed from those. The free functions below are tape-free
//! conveniences that run a single op on a throwaway [`Graph`].

mod graph;
pub(crate) mod kernels;
mod optim;
mod tensor;

pub use graph::{Graph, Var};
pub use optim::{adamw_step, AdamState, AdamW};
pub use tensor::Tensor;

use crate::error::Result;

/// Token identifier.
pub type TokenId = usize;

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
    let out = g.matmul(va, vb)?;
    Ok(g.value(out).clone())
}

pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let out = g.softmax(v, axis)?;
    Ok(g.value(out).clone())
}

pub fn rms_norm(x: &Tensor, weight: &Tensor, eps: f64) -> Result<Tensor> {
    let mut g = Graph::new();
    let (vx, vw) = (g.constant(x.clone()), g.constant(weight.clone()));
    let out = g.rms_norm(vx, vw, eps)?;
    Ok(g.value(out).clone())
}

pub fn cross_entropy(logits: &Tensor, targets: &[TokenId]) -> Result<Tensor> {
    let mut g = Graph::new();
    let v = g.constant(logits.clone());
    let out = g.cross_entropy(v, targets)?;
    Ok(g.value(out).clone())
}

/// `log softmax(row)[token]`.
pub fn log_prob(row: &[f64], token: TokenId) -> f64 {
    row[token] - kernels::logsumexp(row)
}
