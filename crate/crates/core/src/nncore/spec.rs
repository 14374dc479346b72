use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative with respect to the pre-activation; ReLU uses 0 at 0.
    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Output layer interpretation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// `output_dim` point predictions.
    Point,
    /// `output_dim` means followed by `output_dim` raw scales mapped through
    /// softplus to standard deviations.
    Gaussian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub output_dim: usize,
    pub hidden: Vec<usize>,
    /// One activation per hidden layer.
    pub activations: Vec<Activation>,
    pub head: HeadKind,
}

impl NetworkSpec {
    /// All hidden layers share `activation`.
    pub fn mlp(input_dim: usize, hidden: &[usize], activation: Activation, output_dim: usize, head: HeadKind) -> Self {
        NetworkSpec {
            input_dim,
            output_dim,
            hidden: hidden.to_vec(),
            activations: vec![activation; hidden.len()],
            head,
        }
    }

    /// Width of the final affine layer.
    pub fn raw_output_dim(&self) -> usize {
        match self.head {
            HeadKind::Point => self.output_dim,
            HeadKind::Gaussian => 2 * self.output_dim,
        }
    }

    /// Number of affine layers, hidden plus output.
    pub fn depth(&self) -> usize {
        self.hidden.len() + 1
    }

    /// `(fan_in, fan_out)` of every affine layer.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.input_dim];
        dims.extend(&self.hidden);
        dims.push(self.raw_output_dim());
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::Config("input and output dimensions must be positive".into()));
        }
        if self.hidden.is_empty() {
            return Err(Error::Config("network needs at least one hidden layer".into()));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be at least 1".into()));
        }
        if self.activations.len() != self.hidden.len() {
            return Err(Error::Config(format!(
                "{} activations for {} hidden layers",
                self.activations.len(),
                self.hidden.len()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_follow_widths() {
        let s = NetworkSpec::mlp(2, &[157, 137, 86, 32], Activation::Relu, 1, HeadKind::Point);
        assert_eq!(
            s.layer_shapes(),
            vec![(2, 157), (157, 137), (137, 86), (86, 32), (32, 1)]
        );
        let g = NetworkSpec {
            head: HeadKind::Gaussian,
            ..s
        };
        assert_eq!(g.layer_shapes().last(), Some(&(32, 2)));
        assert_eq!(g.depth(), 5);
    }

    #[test]
    fn invalid_specs() {
        let mut s = NetworkSpec::mlp(2, &[4], Activation::Tanh, 1, HeadKind::Point);
        s.validate().unwrap();
        s.hidden.clear();
        s.activations.clear();
        assert!(s.validate().is_err());
        let z = NetworkSpec::mlp(2, &[4, 0], Activation::Tanh, 1, HeadKind::Point);
        assert!(z.validate().is_err());
    }
}
