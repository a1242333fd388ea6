use rand::Rng;

use super::Tensor;
use crate::error::{Error, Result};

/// Affine map `x·W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct LinearLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearLayer {
    /// Uniform init in `±sqrt(1/fan_in)` for both weight and bias.
    pub fn init(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let bound = (1.0 / fan_in as f64).sqrt();
        let w: Vec<f64> = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let b: Vec<f64> = (0..fan_out).map(|_| rng.random_range(-bound..bound)).collect();
        Self::from_values(fan_in, fan_out, w, b, true).expect("sizes consistent by construction")
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self::from_values(fan_in, fan_out, vec![0.0; fan_in * fan_out], vec![0.0; fan_out], true)
            .expect("sizes consistent by construction")
    }

    pub fn from_values(
        fan_in: usize,
        fan_out: usize,
        weight: Vec<f64>,
        bias: Vec<f64>,
        trainable: bool,
    ) -> Result<Self> {
        Ok(Self {
            weight: Tensor::leaf(&[fan_in, fan_out], weight, trainable)?,
            bias: Tensor::leaf(&[fan_out], bias, trainable)?,
        })
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul(&self.weight)?.add_row(&self.bias)
    }

    /// Copy whose tensors are constants.
    pub fn frozen(&self) -> Self {
        Self {
            weight: self.weight.detach(),
            bias: self.bias.detach(),
        }
    }

    /// Deep copy with fresh leaves of the same trainability.
    pub fn deep_clone(&self) -> Self {
        let trainable = self.weight.requires_grad();
        Self::from_values(
            self.fan_in(),
            self.fan_out(),
            self.weight.to_vec(),
            self.bias.to_vec(),
            trainable,
        )
        .expect("same sizes")
    }
}

/// Runs `layers` in sequence with ReLU between consecutive layers (none after
/// the last).
pub fn mlp_forward(layers: &[LinearLayer], x: &Tensor) -> Result<Tensor> {
    let (last, init) = layers
        .split_last()
        .ok_or_else(|| Error::InvalidArgument("mlp with no layers".into()))?;
    let mut h = x.clone();
    for layer in init {
        h = layer.forward(&h)?.relu();
    }
    last.forward(&h)
}

/// A stack of linear layers joined by ReLU.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<LinearLayer>,
}

impl Mlp {
    /// `dims = [in, h1, ..., out]`.
    pub fn init(dims: &[usize], rng: &mut impl Rng) -> Self {
        let layers = dims
            .windows(2)
            .map(|w| LinearLayer::init(w[0], w[1], rng))
            .collect();
        Self { layers }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        mlp_forward(&self.layers, x)
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, LinearLayer::fan_out)
    }

    pub fn frozen(&self) -> Self {
        Self {
            layers: self.layers.iter().map(LinearLayer::frozen).collect(),
        }
    }

    pub fn deep_clone(&self) -> Self {
        Self {
            layers: self.layers.iter().map(LinearLayer::deep_clone).collect(),
        }
    }

    /// `(prefix.{i}.weight, tensor)` and `(prefix.{i}.bias, tensor)` pairs.
    pub fn named_parameters(&self, prefix: &str) -> Vec<(String, Tensor)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                [
                    (format!("{prefix}.{i}.weight"), l.weight.clone()),
                    (format!("{prefix}.{i}.bias"), l.bias.clone()),
                ]
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_layer_passes_input_through() {
        let layer =
            LinearLayer::from_values(2, 2, vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0], true).unwrap();
        let x = Tensor::constant(&[3, 2], vec![1.0, -2.0, 0.5, 4.0, 0.0, 3.0]).unwrap();
        assert_eq!(mlp_forward(&[layer], &x).unwrap().to_vec(), x.to_vec());
    }

    #[test]
    fn zero_net_gives_zeros() {
        let layers = vec![LinearLayer::zeros(3, 4), LinearLayer::zeros(4, 2)];
        let x = Tensor::constant(&[2, 3], vec![1.0, 2.0, 3.0, -1.0, -2.0, -3.0]).unwrap();
        assert_eq!(mlp_forward(&layers, &x).unwrap().to_vec(), vec![0.0; 4]);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let layers = vec![LinearLayer::zeros(3, 4), LinearLayer::zeros(5, 2)];
        let x = Tensor::zeros(&[1, 3]);
        assert!(mlp_forward(&layers, &x).is_err());
    }

    /// Plain nested-loop forward pass, written without the tensor engine.
    fn straight_line_forward(layers: &[(Vec<f64>, Vec<f64>, usize, usize)], x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        for (li, (w, b, fin, fout)) in layers.iter().enumerate() {
            let mut next = vec![0.0; *fout];
            for j in 0..*fout {
                let mut acc = b[j];
                for i in 0..*fin {
                    acc += h[i] * w[i * fout + j];
                }
                next[j] = if li + 1 < layers.len() { acc.max(0.0) } else { acc };
            }
            h = next;
        }
        h
    }

    #[test]
    fn seeded_three_layer_net_matches_straight_line_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mlp = Mlp::init(&[5, 7, 6, 3], &mut rng);
        let raw: Vec<_> = mlp
            .layers
            .iter()
            .map(|l| (l.weight.to_vec(), l.bias.to_vec(), l.fan_in(), l.fan_out()))
            .collect();
        let x: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
        let out = mlp
            .forward(&Tensor::constant(&[2, 5], x.clone()).unwrap())
            .unwrap();
        for r in 0..2 {
            let expected = straight_line_forward(&raw, &x[r * 5..(r + 1) * 5]);
            for (a, b) in out.row(r).iter().zip(&expected) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn init_respects_fan_in_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let l = LinearLayer::init(16, 8, &mut rng);
        assert!(l.weight.values().iter().all(|w| w.abs() <= 0.25));
        assert!(l.weight.requires_grad() && l.bias.requires_grad());
        assert!(!l.frozen().weight.requires_grad());
    }
}
