//! Parameter containers and the dense layer shared by every network.

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{MistError, Result};
use crate::rng::{self, Rng};

/// Anything holding named trainable tensors in a fixed order.
pub trait Module {
    /// `(name, tensor)` pairs; names are stable and used in checkpoints.
    fn named_params(&self) -> Vec<(String, &Tensor)>;

    /// Same order as [`Module::named_params`].
    fn params_mut(&mut self) -> Vec<&mut Tensor>;

    fn num_params(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Copies values by name from `(name, tensor)` pairs, checking shapes.
    fn load_params(&mut self, source: &[(String, Tensor)]) -> Result<()> {
        let names: Vec<String> = self.named_params().into_iter().map(|(n, _)| n).collect();
        for (name, dst) in names.iter().zip(self.params_mut()) {
            let src = source
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| MistError::Checkpoint(format!("missing parameter {name}")))?;
            if src.shape() != dst.shape() {
                return Err(MistError::Checkpoint(format!(
                    "parameter {name}: expected shape {:?}, found {:?}",
                    dst.shape(),
                    src.shape()
                )));
            }
            dst.values_mut().copy_from_slice(src.values());
        }
        Ok(())
    }
}

/// Binds a leaf for `t`: differentiable when `trainable`, constant otherwise.
pub fn bind(g: &mut Graph, t: &Tensor, trainable: bool) -> NodeId {
    if trainable {
        g.param(t)
    } else {
        g.constant(t)
    }
}

pub fn normal_tensor(rng: &mut Rng, shape: Vec<usize>, std: f64) -> Tensor {
    let n = shape.iter().product();
    let values = (0..n).map(|_| std * rng::normal(rng)).collect();
    Tensor::new(shape, values).expect("shape matches length")
}

/// Fully connected layer `x · W + b` with `W: in x out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct DenseIds {
    pub weight: NodeId,
    pub bias: NodeId,
}

impl Dense {
    /// Glorot-uniform weights, zero bias.
    pub fn glorot(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Self {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let values = (0..fan_in * fan_out)
            .map(|_| rng::uniform(rng, -a, a))
            .collect();
        Dense {
            weight: Tensor::new(vec![fan_in, fan_out], values).expect("shape matches length"),
            bias: Tensor::zeros(vec![fan_out]),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> DenseIds {
        DenseIds {
            weight: bind(g, &self.weight, trainable),
            bias: bind(g, &self.bias, trainable),
        }
    }

    pub(crate) fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{prefix}.weight"), &self.weight));
        out.push((format!("{prefix}.bias"), &self.bias));
    }

    pub(crate) fn push_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        out.push(&mut self.weight);
        out.push(&mut self.bias);
    }
}

impl DenseIds {
    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let h = g.matmul(x, self.weight)?;
        g.add_bias(h, self.bias)
    }

    pub(crate) fn push_ids(&self, out: &mut Vec<NodeId>) {
        out.push(self.weight);
        out.push(self.bias);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn glorot_bounds() {
        let mut rng = rng::seeded(3);
        let d = Dense::glorot(&mut rng, 16, 32);
        let a = (6.0f64 / 48.0).sqrt();
        assert!(d.weight.values().iter().all(|w| w.abs() <= a));
        assert!(d.bias.values().iter().all(|&b| b == 0.0));
        assert_eq!(d.weight.shape(), &[16, 32]);
    }

    #[test]
    fn dense_forward_shape() {
        let mut rng = rng::seeded(3);
        let d = Dense::glorot(&mut rng, 3, 5);
        let mut g = Graph::new();
        let ids = d.bind(&mut g, true);
        let x = g.constant(&Tensor::zeros(vec![4, 3]));
        let y = ids.forward(&mut g, x).unwrap();
        assert_eq!(g.shape(y), &[4, 5]);
    }
}
