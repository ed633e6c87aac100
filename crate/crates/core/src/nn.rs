//! MLPs with ReLU hidden activations and an identity output layer.

use crate::error::{Error, Result};
use crate::rng::fnv1a64;
use crate::tape::{Tape, Var};
use crate::tensor::{kernels, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// One affine transform; weights are stored input-major (in×out).
#[derive(Debug, Clone)]
pub struct Affine {
    pub w: Tensor,
    pub b: Tensor,
}

/// Stack of affine layers with ReLU between them and identity at the output.
/// A single-layer `Mlp` is a plain affine head.
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<Affine>,
}

impl Mlp {
    /// Weights uniform in (−√(1/fan_in), +√(1/fan_in)), biases zero.
    pub fn new(dims: &[usize], rng: &mut ChaCha8Rng) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::invalid(format!(
                "an MLP needs at least input and output dims, got {dims:?}"
            )));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!("zero-width layer in {dims:?}")));
        }
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for win in dims.windows(2) {
            let (fan_in, fan_out) = (win[0], win[1]);
            let bound = (1.0 / fan_in as f64).sqrt();
            let w = Tensor::matrix(
                fan_in,
                fan_out,
                (0..fan_in * fan_out)
                    .map(|_| rng.gen_range(-bound..bound))
                    .collect(),
            );
            let b = Tensor::zeros(&[fan_out]);
            layers.push(Affine { w, b });
        }
        Ok(Mlp { layers })
    }

    pub fn from_layers(layers: Vec<Affine>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Empty("mlp layers"));
        }
        for pair in layers.windows(2) {
            if pair[0].w.cols() != pair[1].w.rows() {
                return Err(Error::ShapeMismatch {
                    op: "mlp layer composition",
                    lhs: pair[0].w.shape().to_vec(),
                    rhs: pair[1].w.shape().to_vec(),
                });
            }
        }
        Ok(Mlp { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().w.cols()
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[Affine] {
        &self.layers
    }

    /// Forward pass without a tape: x is (N×in) or a single (in) vector.
    pub fn forward(&self, x: &Tensor) -> Tensor {
        let rows = if x.shape().len() == 2 { x.rows() } else { 1 };
        let mut h = x.data().to_vec();
        let mut width = x.cols();
        for (i, layer) in self.layers.iter().enumerate() {
            assert_eq!(
                width,
                layer.w.rows(),
                "input width {} does not match layer {} fan-in {}",
                width,
                i,
                layer.w.rows()
            );
            let out_dim = layer.w.cols();
            let mut z = kernels::matmul(&h, layer.w.data(), rows, width, out_dim);
            z = kernels::add_row(&z, layer.b.data(), rows, out_dim);
            if i + 1 < self.layers.len() {
                z = kernels::relu(&z);
            }
            h = z;
            width = out_dim;
        }
        if x.shape().len() == 2 {
            Tensor::matrix(rows, width, h)
        } else {
            Tensor::vector(h)
        }
    }

    /// Register this model's parameters on a tape for a differentiable pass.
    pub fn attach(&self, tape: &Tape) -> MlpVars {
        let layers = self
            .layers
            .iter()
            .map(|l| (tape.param(&l.w), tape.param(&l.b)))
            .collect();
        MlpVars { layers }
    }

    /// Register the parameters as constants: values flow, gradients do not.
    pub fn attach_frozen(&self, tape: &Tape) -> MlpVars {
        let layers = self
            .layers
            .iter()
            .map(|l| (tape.constant(l.w.clone()), tape.constant(l.b.clone())))
            .collect();
        MlpVars { layers }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.w, &l.b]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.w, &mut l.b])
            .collect()
    }

    pub fn param_names(&self, prefix: &str) -> Vec<String> {
        (0..self.layers.len())
            .flat_map(|i| [format!("{prefix}.layer{i}.w"), format!("{prefix}.layer{i}.b")])
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Content hash over the exact parameter bits; used to assert that
    /// frozen models stay frozen.
    pub fn fingerprint(&self) -> u64 {
        let mut bytes = Vec::new();
        for p in self.params() {
            for v in p.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        fnv1a64(&bytes)
    }
}

/// Tape-attached view of an [`Mlp`].
pub struct MlpVars {
    layers: Vec<(Var, Var)>,
}

impl MlpVars {
    /// x is (N×in); returns (N×out).
    pub fn forward(&self, x: &Var) -> Result<Var> {
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, (w, b)) in self.layers.iter().enumerate() {
            h = h.matmul(w)?.add_row(b)?;
            if i < last {
                h = h.relu();
            }
        }
        Ok(h)
    }

    /// Parameter vars in the same order as [`Mlp::params`].
    pub fn params(&self) -> Vec<&Var> {
        self.layers.iter().flat_map(|(w, b)| [w, b]).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;

    #[test]
    fn init_is_bounded_and_biases_zero() {
        let mut rng = rng_from(3);
        let mlp = Mlp::new(&[16, 8, 4], &mut rng).unwrap();
        let bound = (1.0f64 / 16.0).sqrt();
        for v in mlp.layers()[0].w.data() {
            assert!(v.abs() < bound);
        }
        assert!(mlp.layers()[0].b.data().iter().all(|&v| v == 0.0));
        assert_eq!(mlp.num_params(), 16 * 8 + 8 + 8 * 4 + 4);
    }

    #[test]
    fn incompatible_layers_rejected() {
        let mut rng = rng_from(0);
        let a = Mlp::new(&[4, 3], &mut rng).unwrap().layers()[0].clone();
        let b = Mlp::new(&[5, 2], &mut rng).unwrap().layers()[0].clone();
        assert!(Mlp::from_layers(vec![a, b]).is_err());
    }

    #[test]
    fn tape_forward_matches_plain_forward() {
        let mut rng = rng_from(11);
        let mlp = Mlp::new(&[6, 5, 3], &mut rng).unwrap();
        let x = Tensor::matrix(4, 6, (0..24).map(|i| (i as f64) * 0.1 - 1.0).collect());
        let plain = mlp.forward(&x);

        let tape = Tape::new();
        let xv = tape.constant(x);
        let out = mlp.attach(&tape).forward(&xv).unwrap();
        assert_eq!(out.value().data(), plain.data());
    }

    #[test]
    fn fingerprint_tracks_parameter_bits() {
        let mut rng = rng_from(5);
        let mut mlp = Mlp::new(&[3, 2], &mut rng).unwrap();
        let fp = mlp.fingerprint();
        assert_eq!(fp, mlp.fingerprint());
        mlp.params_mut()[0].data_mut()[0] += 1e-12;
        assert_ne!(fp, mlp.fingerprint());
    }
}
