//! The shared point decoder.
//!
//! One small MLP serves every modality and both output geometries: it maps a
//! pooled feature vector at a 3D point to a rendered feature vector plus a
//! nonnegative density. Keeping a single instance (rather than one per
//! modality) is what forces the per-modality encoders to land in one common
//! feature space, since they must all be legible to the same decoder.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::init::he_normal;
use crate::nn::params::{ParamLease, ParamSet};
use crate::nn::tape::{Tape, Value};
use crate::nn::Tensor;

/// Parameters of the shared point decoder: two SiLU hidden layers and a
/// linear head producing `C` feature channels plus one density logit.
#[derive(Debug, Clone, PartialEq)]
pub struct PointMlp {
    pub(crate) in_channels: usize,
    pub(crate) hidden: usize,
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
    w3: Tensor,
    b3: Tensor,
}

/// Tape handles to one leased copy of the decoder parameters.
pub(crate) struct MlpVals {
    w1: Value,
    b1: Value,
    w2: Value,
    b2: Value,
    w3: Value,
    b3: Value,
    in_channels: usize,
}

impl PointMlp {
    /// Random initialization: He-normal weights, zero biases.
    pub fn init(in_channels: usize, hidden: usize, rng: &mut ChaCha8Rng) -> PointMlp {
        PointMlp {
            in_channels,
            hidden,
            w1: he_normal(&[in_channels, hidden], in_channels, rng),
            b1: Tensor::zeros(&[hidden]),
            w2: he_normal(&[hidden, hidden], hidden, rng),
            b2: Tensor::zeros(&[hidden]),
            w3: he_normal(&[hidden, in_channels + 1], hidden, rng),
            b3: Tensor::zeros(&[in_channels + 1]),
        }
    }

    /// Copy the parameters onto a tape, recording names in the lease.
    /// `prefix` follows the [`ParamSet`] convention (empty or dot-terminated).
    pub(crate) fn lease(&self, tape: &mut Tape, prefix: &str, lease: &mut ParamLease) -> MlpVals {
        MlpVals {
            w1: lease.leaf(tape, format!("{prefix}w1"), &self.w1),
            b1: lease.leaf(tape, format!("{prefix}b1"), &self.b1),
            w2: lease.leaf(tape, format!("{prefix}w2"), &self.w2),
            b2: lease.leaf(tape, format!("{prefix}b2"), &self.b2),
            w3: lease.leaf(tape, format!("{prefix}w3"), &self.w3),
            b3: lease.leaf(tape, format!("{prefix}b3"), &self.b3),
            in_channels: self.in_channels,
        }
    }
}

impl MlpVals {
    /// Decode `(P, C)` pooled features into `(P, C)` rendered features and
    /// `(P, 1)` nonnegative densities.
    pub(crate) fn forward(&self, tape: &mut Tape, x: Value) -> Result<(Value, Value)> {
        let shape = tape.value(x).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.in_channels {
            return Err(Error::InvalidArgument(format!(
                "point decoder expects (P, {}), got {shape:?}",
                self.in_channels
            )));
        }
        let h = tape.matmul(x, self.w1)?;
        let h = tape.add_last_dim_bias(h, self.b1)?;
        let h = tape.silu(h)?;
        let h = tape.matmul(h, self.w2)?;
        let h = tape.add_last_dim_bias(h, self.b2)?;
        let h = tape.silu(h)?;
        let out = tape.matmul(h, self.w3)?;
        let out = tape.add_last_dim_bias(out, self.b3)?;
        let feat = tape.narrow_last_dim(out, 0, self.in_channels)?;
        let sigma_logit = tape.narrow_last_dim(out, self.in_channels, 1)?;
        let sigma = tape.softplus(sigma_logit)?;
        Ok((feat, sigma))
    }
}

impl ParamSet for PointMlp {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{prefix}w1"), &self.w1);
        f(&format!("{prefix}b1"), &self.b1);
        f(&format!("{prefix}w2"), &self.w2);
        f(&format!("{prefix}b2"), &self.b2);
        f(&format!("{prefix}w3"), &self.w3);
        f(&format!("{prefix}b3"), &self.b3);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{prefix}w1"), &mut self.w1);
        f(&format!("{prefix}b1"), &mut self.b1);
        f(&format!("{prefix}w2"), &mut self.w2);
        f(&format!("{prefix}b2"), &mut self.b2);
        f(&format!("{prefix}w3"), &mut self.w3);
        f(&format!("{prefix}b3"), &mut self.b3);
    }
}
