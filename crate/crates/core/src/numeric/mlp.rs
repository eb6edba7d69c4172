use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tape::{Activation, ParamId, ParamStore, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Affine layer `y = x · W + b` with `W: [in, out]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Registers a layer initialized uniformly in `±1/sqrt(in_dim)`.
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (in_dim as f32).sqrt();
        let w: Vec<f32> = (0..in_dim * out_dim).map(|_| rng.random_range(-bound..bound)).collect();
        let b: Vec<f32> = (0..out_dim).map(|_| rng.random_range(-bound..bound)).collect();
        Self::from_tensors(
            store,
            name,
            Tensor::matrix(in_dim, out_dim, w).expect("shape"),
            Tensor::new(vec![out_dim], b).expect("shape"),
        )
    }

    pub fn from_tensors(store: &mut ParamStore, name: &str, weight: Tensor, bias: Tensor) -> Self {
        let (in_dim, out_dim) = (weight.rows(), weight.cols());
        let weight = store.add(format!("{name}.weight"), weight);
        let bias = store.add(format!("{name}.bias"), bias);
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<'p>(&self, tape: &mut Tape<'p>, store: &'p ParamStore, x: Var) -> Result<Var> {
        let cols = tape.value(x).cols();
        if cols != self.in_dim {
            return Err(Error::dim("linear", self.in_dim, cols));
        }
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let h = tape.matmul(x, w)?;
        tape.add_bias(h, b)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

/// Multilayer perceptron. `activation` follows every hidden layer and
/// `output_activation` follows the last one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
    pub output_activation: Activation,
}

impl Mlp {
    /// `dims = [in, hidden.., out]`.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dims: &[usize],
        activation: Activation,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::contract("an MLP needs at least input and output widths"));
        }
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Ok(Self {
            layers,
            activation,
            output_activation: Activation::Identity,
        })
    }

    /// Builds from explicit layer tensors; consecutive widths must compose.
    pub fn from_layers(
        store: &mut ParamStore,
        name: &str,
        layers: Vec<(Tensor, Tensor)>,
        activation: Activation,
        output_activation: Activation,
    ) -> Result<Self> {
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].0.cols() != pair[1].0.rows() {
                return Err(Error::dim(
                    "Mlp::from_layers",
                    format!("layer {} input {}", i + 1, pair[0].0.cols()),
                    pair[1].0.rows(),
                ));
            }
        }
        let layers = layers
            .into_iter()
            .enumerate()
            .map(|(i, (w, b))| Linear::from_tensors(store, &format!("{name}.{i}"), w, b))
            .collect();
        Ok(Self {
            layers,
            activation,
            output_activation,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn forward<'p>(&self, tape: &mut Tape<'p>, store: &'p ParamStore, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, store, h)?;
            let act = if i == last { self.output_activation } else { self.activation };
            h = tape.activate(h, act);
        }
        Ok(h)
    }

    /// Forward pass on a plain tensor, discarding the graph.
    pub fn eval(&self, store: &ParamStore, input: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let y = self.forward(&mut tape, store, x)?;
        Ok(tape.value(y).clone())
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(Linear::params).collect()
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn identity_layer_passes_input() {
        let mut store = ParamStore::new();
        let mlp = Mlp::from_layers(
            &mut store,
            "m",
            vec![(Tensor::identity(3), Tensor::zeros(&[3]))],
            Activation::Identity,
            Activation::Identity,
        )
        .unwrap();
        let out = mlp.eval(&store, &Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        assert_eq!(out.data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut store = ParamStore::new();
        let mlp = Mlp::from_layers(
            &mut store,
            "m",
            vec![(Tensor::identity(2), Tensor::zeros(&[2]))],
            Activation::Relu,
            Activation::Relu,
        )
        .unwrap();
        let out = mlp.eval(&store, &Tensor::matrix(1, 2, vec![-1.0, 2.0]).unwrap()).unwrap();
        assert_eq!(out.data(), &[0.0, 2.0]);
    }

    #[test]
    fn zero_input_yields_final_bias_with_identity_activation() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mlp = Mlp::new(&mut store, "m", &[4, 8, 3], Activation::Identity, &mut rng).unwrap();
        // Identity composition of zero input gives b1·W2 + b2, so zero the
        // first bias to isolate the final one.
        store.get_mut(mlp.layers[0].bias).data_mut().fill(0.0);
        let out = mlp.eval(&store, &Tensor::zeros(&[1, 4])).unwrap();
        assert_eq!(out.data(), store.get(mlp.layers[1].bias).data());
    }

    #[test]
    fn input_width_mismatch_is_dimension_error() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mlp = Mlp::new(&mut store, "m", &[4, 3], Activation::Relu, &mut rng).unwrap();
        assert!(matches!(
            mlp.eval(&store, &Tensor::zeros(&[1, 5])),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn layers_must_compose() {
        let mut store = ParamStore::new();
        let r = Mlp::from_layers(
            &mut store,
            "m",
            vec![
                (Tensor::zeros(&[2, 3]), Tensor::zeros(&[3])),
                (Tensor::zeros(&[4, 1]), Tensor::zeros(&[1])),
            ],
            Activation::Relu,
            Activation::Identity,
        );
        assert!(r.is_err());
    }
}
