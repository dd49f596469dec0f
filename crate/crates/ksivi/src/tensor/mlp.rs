//! Multi-layer perceptron with rectified-linear hidden layers.

use rand::Rng;

use super::{matmul, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Fully connected network. Weight `l` has shape `(widths[l], widths[l+1])`
/// so a batched forward pass is `X * W + b`; hidden layers are rectified,
/// the output layer is linear.
#[derive(Clone, Debug)]
pub struct Mlp {
    widths: Vec<usize>,
    weights: Vec<Tensor>,
    biases: Vec<Tensor>,
}

/// Tape leaves for one forward/backward pass.
pub struct MlpVars {
    pub weights: Vec<Var>,
    pub biases: Vec<Var>,
}

impl Mlp {
    /// Weights drawn uniformly from (-1/sqrt(fan_in), +1/sqrt(fan_in)),
    /// biases zero.
    pub fn new(widths: &[usize], rng: &mut impl Rng) -> Result<Self> {
        if widths.len() < 2 || widths.iter().any(|&w| w == 0) {
            return Err(Error::InvalidWidths(widths.to_vec()));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..widths.len() - 1 {
            let (fan_in, fan_out) = (widths[l], widths[l + 1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let data: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| rng.gen_range(-bound..bound))
                .collect();
            weights.push(Tensor::new(fan_in, fan_out, data));
            biases.push(Tensor::zeros(1, fan_out));
        }
        Ok(Mlp {
            widths: widths.to_vec(),
            weights,
            biases,
        })
    }

    /// All-zero parameters.
    pub fn zeroed(widths: &[usize]) -> Result<Self> {
        if widths.len() < 2 || widths.iter().any(|&w| w == 0) {
            return Err(Error::InvalidWidths(widths.to_vec()));
        }
        let weights = (0..widths.len() - 1)
            .map(|l| Tensor::zeros(widths[l], widths[l + 1]))
            .collect();
        let biases = (0..widths.len() - 1)
            .map(|l| Tensor::zeros(1, widths[l + 1]))
            .collect();
        Ok(Mlp {
            widths: widths.to_vec(),
            weights,
            biases,
        })
    }

    /// Zero the last layer so the network output is exactly 0 at
    /// initialization (used by the hierarchical residual maps).
    pub fn zero_output_layer(&mut self) {
        let last = self.weights.len() - 1;
        self.weights[last].data_mut().fill(0.0);
        self.biases[last].data_mut().fill(0.0);
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn layer_count(&self) -> usize {
        self.weights.len()
    }

    pub fn weight(&self, l: usize) -> &Tensor {
        &self.weights[l]
    }

    pub fn bias(&self, l: usize) -> &Tensor {
        &self.biases[l]
    }

    pub fn weight_mut(&mut self, l: usize) -> &mut Tensor {
        &mut self.weights[l]
    }

    pub fn bias_mut(&mut self, l: usize) -> &mut Tensor {
        &mut self.biases[l]
    }

    /// Forward pass with frozen parameters, no tape.
    pub fn forward_plain(&self, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.input_width() {
            return Err(Error::ShapeMismatch {
                context: "mlp forward input",
                expected: format!("{} columns", self.input_width()),
                got: format!("{} columns", x.cols()),
            });
        }
        let mut h = x.clone();
        for l in 0..self.weights.len() {
            let mut z = matmul(&h, &self.weights[l], false, false);
            for i in 0..z.rows() {
                for (o, &b) in z.row_slice_mut(i).iter_mut().zip(self.biases[l].data()) {
                    *o += b;
                }
            }
            if l + 1 < self.weights.len() {
                z = z.map(|v| if v > 0.0 { v } else { 0.0 });
            }
            h = z;
        }
        Ok(h)
    }

    /// Register parameters as tracked leaves on a tape.
    pub fn insert_leaves(&self, tape: &mut Tape) -> MlpVars {
        let weights = self.weights.iter().map(|w| tape.leaf(w.clone())).collect();
        let biases = self.biases.iter().map(|b| tape.leaf(b.clone())).collect();
        MlpVars { weights, biases }
    }

    /// Differentiable forward pass through tape leaves.
    pub fn forward(&self, tape: &mut Tape, vars: &MlpVars, x: Var) -> Result<Var> {
        let rows = tape.value(x).rows();
        if tape.value(x).cols() != self.input_width() {
            return Err(Error::ShapeMismatch {
                context: "mlp forward input",
                expected: format!("{} columns", self.input_width()),
                got: format!("{} columns", tape.value(x).cols()),
            });
        }
        let mut h = x;
        for l in 0..self.weights.len() {
            let z = tape.matmul(h, vars.weights[l]);
            let b = tape.broadcast_row(vars.biases[l], rows);
            let zb = tape.add(z, b);
            h = if l + 1 < self.weights.len() {
                tape.relu(zb)
            } else {
                zb
            };
        }
        Ok(h)
    }

    pub fn param_count(&self) -> usize {
        self.weights
            .iter()
            .zip(&self.biases)
            .map(|(w, b)| w.numel() + b.numel())
            .sum()
    }

    /// Append parameters (per layer: weight then bias) to a flat vector.
    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.data());
            out.extend_from_slice(b.data());
        }
    }

    /// Read parameters back from a flat slice; returns the number consumed.
    pub fn unflatten_from(&mut self, flat: &[f64]) -> usize {
        let mut at = 0;
        for (w, b) in self.weights.iter_mut().zip(&mut self.biases) {
            let n = w.numel();
            w.data_mut().copy_from_slice(&flat[at..at + n]);
            at += n;
            let n = b.numel();
            b.data_mut().copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        at
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_network_maps_everything_to_zero() {
        let mlp = Mlp::zeroed(&[3, 5, 2]).unwrap();
        let x = Tensor::row(&[1.0, -0.5, 2.0]);
        let y = mlp.forward_plain(&x).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0]);
    }

    #[test]
    fn output_shape_matches_last_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mlp = Mlp::new(&[3, 50, 50, 2], &mut rng).unwrap();
        let x = Tensor::row(&[0.1, 0.2, 0.3]);
        let y = mlp.forward_plain(&x).unwrap();
        assert_eq!(y.shape(), (1, 2));
    }

    #[test]
    fn single_identity_layer_is_identity() {
        let mut mlp = Mlp::zeroed(&[2, 2]).unwrap();
        *mlp.weight_mut(0) = Tensor::identity(2);
        let y = mlp.forward_plain(&Tensor::row(&[-1.0, 3.0])).unwrap();
        assert_eq!(y.data(), &[-1.0, 3.0]);
    }

    #[test]
    fn plain_and_tape_forward_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mlp = Mlp::new(&[3, 8, 2], &mut rng).unwrap();
        let x = Tensor::new(4, 3, (0..12).map(|i| 0.3 * i as f64 - 1.0).collect());
        let plain = mlp.forward_plain(&x).unwrap();

        let mut tape = Tape::new();
        let vars = mlp.insert_leaves(&mut tape);
        let xv = tape.constant(x);
        let out = mlp.forward(&mut tape, &vars, xv).unwrap();
        assert_eq!(tape.value(out).data(), plain.data());
    }

    #[test]
    fn input_width_mismatch_rejected() {
        let mlp = Mlp::zeroed(&[3, 2]).unwrap();
        assert!(mlp.forward_plain(&Tensor::row(&[1.0, 2.0])).is_err());
    }

    #[test]
    fn flatten_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mlp = Mlp::new(&[2, 4, 3], &mut rng).unwrap();
        let mut flat = Vec::new();
        mlp.flatten_into(&mut flat);
        assert_eq!(flat.len(), mlp.param_count());
        let mut other = Mlp::zeroed(&[2, 4, 3]).unwrap();
        let used = other.unflatten_from(&flat);
        assert_eq!(used, flat.len());
        let x = Tensor::row(&[0.5, -0.25]);
        assert_eq!(
            mlp.forward_plain(&x).unwrap().data(),
            other.forward_plain(&x).unwrap().data()
        );
    }
}
