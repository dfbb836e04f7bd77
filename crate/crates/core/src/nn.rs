//! Trainable building blocks: linear layers, layer normalization, and the
//! two-layer GELU MLP used throughout the transformer stack, plus parameter
//! naming and checkpoint glue.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::checkpoint::Checkpoint;
use crate::error::{CroprError, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor};

/// Layer-norm epsilon used across the stack.
pub const LN_EPS: f64 = 1e-6;

/// Weight initialization: normal(0, std) truncated to two standard
/// deviations, the usual ViT recipe.
pub fn trunc_normal<T: Scalar>(rng: &mut impl Rng, n: usize, std: f64) -> Vec<T> {
    let dist = Normal::new(0.0, std).expect("std must be finite and positive");
    (0..n)
        .map(|_| {
            loop {
                let v: f64 = dist.sample(rng);
                if v.abs() <= 2.0 * std {
                    return T::from_f64(v);
                }
            }
        })
        .collect()
}

/// Named handles to every trainable tensor of a model, in creation order.
pub type NamedParams<T> = Vec<(String, Tensor<T>)>;

/// Snapshot parameter values into a checkpoint.
pub fn params_to_checkpoint<T: Scalar>(params: &NamedParams<T>) -> Result<Checkpoint<T>> {
    let mut ckpt = Checkpoint::new();
    for (name, t) in params {
        ckpt.push(name, t.rows(), t.cols(), t.value())?;
    }
    Ok(ckpt)
}

/// Restore parameter values from a checkpoint. Strict in both directions:
/// every parameter must be present with its exact shape, and the checkpoint
/// may not carry extra tensors.
pub fn load_params<T: Scalar>(ckpt: &Checkpoint<T>, params: &NamedParams<T>) -> Result<()> {
    if ckpt.len() != params.len() {
        return Err(CroprError::checkpoint(format!(
            "checkpoint has {} tensors but the model has {} parameters",
            ckpt.len(),
            params.len()
        )));
    }
    for (name, t) in params {
        let entry = ckpt
            .get(name)
            .ok_or_else(|| CroprError::checkpoint(format!("missing tensor {name:?}")))?;
        if (entry.rows, entry.cols) != t.shape() {
            return Err(CroprError::checkpoint(format!(
                "tensor {name:?} has shape {}x{} in the checkpoint but {}x{} in the model",
                entry.rows,
                entry.cols,
                t.rows(),
                t.cols()
            )));
        }
        t.set_value(&entry.data)?;
    }
    Ok(())
}

/// Total element count across a parameter list.
pub fn param_elems<T: Scalar>(params: &NamedParams<T>) -> usize {
    params.iter().map(|(_, t)| t.len()).sum()
}

/// Fully connected layer computing `x W + b` over row-vector tokens.
pub struct Linear<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(
        tape: &Tape<T>,
        rng: &mut impl Rng,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Result<Self> {
        let weight = tape.param(in_dim, out_dim, trunc_normal(rng, in_dim * out_dim, 0.02))?;
        let bias = if bias {
            Some(tape.param(1, out_dim, vec![T::zero(); out_dim])?)
        } else {
            None
        };
        Ok(Linear { weight, bias })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = x.matmul(&self.weight)?;
        match &self.bias {
            Some(b) => y.add_bias(b),
            None => Ok(y),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn collect(&self, prefix: &str, out: &mut NamedParams<T>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        if let Some(b) = &self.bias {
            out.push((format!("{prefix}.bias"), b.clone()));
        }
    }
}

/// Per-token layer normalization with learnable scale and shift.
pub struct LayerNorm<T: Scalar> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    eps: T,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(tape: &Tape<T>, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: tape.param(1, dim, vec![T::one(); dim])?,
            beta: tape.param(1, dim, vec![T::zero(); dim])?,
            eps: T::from_f64(LN_EPS),
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.layer_norm(&self.gamma, &self.beta, self.eps)
    }

    pub fn collect(&self, prefix: &str, out: &mut NamedParams<T>) {
        out.push((format!("{prefix}.gamma"), self.gamma.clone()));
        out.push((format!("{prefix}.beta"), self.beta.clone()));
    }
}

/// Two-layer MLP with GELU, hidden width = dim * ratio.
pub struct Mlp<T: Scalar> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

impl<T: Scalar> Mlp<T> {
    pub fn new(tape: &Tape<T>, rng: &mut impl Rng, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Mlp {
            fc1: Linear::new(tape, rng, dim, hidden, true)?,
            fc2: Linear::new(tape, rng, hidden, dim, true)?,
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu()?)
    }

    pub fn collect(&self, prefix: &str, out: &mut NamedParams<T>) {
        self.fc1.collect(&format!("{prefix}.fc1"), out);
        self.fc2.collect(&format!("{prefix}.fc2"), out);
    }
}
