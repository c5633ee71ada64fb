//! Dense tensors and a small reverse-mode autodiff tape.

mod dense;
mod gradcheck;
mod graph;
mod scalar;

use std::sync::Arc;

pub use dense::{BoolMatrix, Tensor};
pub use gradcheck::{finite_diff_check, finite_diff_check_multi};
pub use graph::{gelu_scalar, AttentionSegment, Graph, Var};

pub use scalar::{NumericMode, Scalar};

use crate::error::Result;

fn eval1<T: Scalar>(
    inputs: Vec<Tensor<T>>,
    f: impl FnOnce(&mut Graph<T>, &[Var]) -> Result<Var>,
) -> Result<Tensor<T>> {
    let mut g = Graph::inference();
    let vars: Vec<Var> = inputs.into_iter().map(|t| g.constant(t)).collect();
    let out = f(&mut g, &vars)?;
    Ok(g.value(out).clone())
}

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    eval1(vec![a.clone(), b.clone()], |g, v| g.matmul(v[0], v[1]))
}

pub fn masked_softmax<T: Scalar>(scores: &Tensor<T>, allowed: &BoolMatrix) -> Result<Tensor<T>> {
    let allowed = Arc::new(allowed.clone());
    eval1(vec![scores.clone()], |g, v| g.masked_softmax(v[0], allowed))
}

pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(gelu_scalar)
}

pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    eval1(vec![x.clone(), gain.clone(), bias.clone()], |g, v| {
        g.layer_norm(v[0], v[1], v[2])
    })
}

pub fn cross_entropy_logits<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<Tensor<T>> {
    eval1(vec![logits.clone()], |g, v| g.cross_entropy(v[0], labels))
}
