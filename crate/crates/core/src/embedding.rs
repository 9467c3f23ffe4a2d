//! The embedding network `f(x)`: an MLP whose output is projected onto the
//! unit hypersphere.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::math::{
    affine, affine_backward, l2_normalize, l2_normalize_backward, relu, relu_backward, Matrix,
};
use crate::params::{Parameters, TensorKind, TensorView};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub w: Matrix,
    pub b: Vec<f64>,
}

/// Weights of the embedding MLP. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingNet {
    dims: Vec<usize>,
    layers: Vec<Layer>,
}

/// Intermediate values of one forward pass, consumed by [`EmbeddingNet::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each layer (`inputs[0]` is the raw sample).
    inputs: Vec<Vec<f64>>,
    /// Affine output of each layer; the last one is the pre-normalization output.
    pre_activations: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn pre_normalization(&self) -> &[f64] {
        self.pre_activations.last().expect("non-empty cache")
    }
}

fn validate_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 || dims.contains(&0) {
        return Err(Error::InvalidDims(dims.to_vec()));
    }
    Ok(())
}

impl EmbeddingNet {
    /// Random init: hidden layers draw from `N(0, 2/fan_in)`, the output layer
    /// from `N(0, 1/fan_in)`; biases start at zero.
    pub fn init(dims: &[usize], seed: u64) -> Result<Self> {
        validate_dims(dims)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_layers = dims.len() - 1;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(idx, pair)| {
                let (fan_in, fan_out) = (pair[0], pair[1]);
                let gain = if idx + 1 == n_layers { 1.0 } else { 2.0 };
                let normal = Normal::new(0.0, (gain / fan_in as f64).sqrt()).expect("valid std");
                let data = (0..fan_in * fan_out)
                    .map(|_| normal.sample(&mut rng))
                    .collect();
                Layer {
                    w: Matrix::from_vec(fan_out, fan_in, data).expect("shape"),
                    b: vec![0.0; fan_out],
                }
            })
            .collect();
        Ok(Self {
            dims: dims.to_vec(),
            layers,
        })
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        validate_dims(dims)?;
        let layers = dims
            .windows(2)
            .map(|p| Layer {
                w: Matrix::zeros(p[1], p[0]),
                b: vec![0.0; p[1]],
            })
            .collect();
        Ok(Self {
            dims: dims.to_vec(),
            layers,
        })
    }

    /// Builds a net from explicit layers, checking that their shapes chain.
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        let first = layers.first().ok_or(Error::Empty("embedding layers"))?;
        let mut dims = vec![first.w.cols()];
        for layer in &layers {
            check_len(
                "EmbeddingNet::from_layers",
                "W.cols",
                layer.w.cols(),
                "previous dim",
                *dims.last().unwrap(),
            )?;
            check_len(
                "EmbeddingNet::from_layers",
                "b",
                layer.b.len(),
                "W.rows",
                layer.w.rows(),
            )?;
            dims.push(layer.w.rows());
        }
        validate_dims(&dims)?;
        Ok(Self { dims, layers })
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.dims).expect("dims already validated")
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        check_len("embed_forward", "x", x.len(), "input dim", self.input_dim())?;
        let n = self.layers.len();
        let mut inputs = Vec::with_capacity(n);
        let mut pre_activations = Vec::with_capacity(n);
        let mut h = x.to_vec();
        for (idx, layer) in self.layers.iter().enumerate() {
            let z = affine(&h, &layer.w, &layer.b)?;
            inputs.push(std::mem::take(&mut h));
            h = if idx + 1 == n { z.clone() } else { relu(&z) };
            pre_activations.push(z);
        }
        let f = l2_normalize(&h)?;
        Ok((
            f,
            ForwardCache {
                inputs,
                pre_activations,
            },
        ))
    }

    pub fn embed(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.forward(x).map(|(f, _)| f)
    }

    /// Returns parameter gradients and the gradient w.r.t. the input.
    pub fn backward(&self, cache: &ForwardCache, d_f: &[f64]) -> Result<(EmbeddingNet, Vec<f64>)> {
        let mut grads = self.zeros_like();
        let dx = self.backward_into(cache, d_f, &mut grads)?;
        Ok((grads, dx))
    }

    /// Like [`backward`](Self::backward) but accumulates into `grads`.
    pub fn backward_into(
        &self,
        cache: &ForwardCache,
        d_f: &[f64],
        grads: &mut EmbeddingNet,
    ) -> Result<Vec<f64>> {
        let n = self.layers.len();
        if cache.inputs.len() != n || cache.pre_activations.len() != n {
            return Err(Error::DimensionMismatch {
                op: "embed_backward",
                lhs: "cache layers",
                lhs_len: cache.inputs.len(),
                rhs: "net layers",
                rhs_len: n,
            });
        }
        check_len(
            "embed_backward",
            "dF",
            d_f.len(),
            "output dim",
            self.output_dim(),
        )?;
        if grads.dims != self.dims {
            return Err(Error::Config(
                "gradient buffer has different layer dims".into(),
            ));
        }
        let mut delta = l2_normalize_backward(cache.pre_normalization(), d_f)?;
        for idx in (0..n).rev() {
            if idx + 1 != n {
                delta = relu_backward(&cache.pre_activations[idx], &delta)?;
            }
            let layer = &self.layers[idx];
            let g = affine_backward(&cache.inputs[idx], &layer.w, &delta)?;
            let gl = &mut grads.layers[idx];
            for (a, b) in gl.w.as_mut_slice().iter_mut().zip(g.dw.as_slice()) {
                *a += b;
            }
            for (a, b) in gl.b.iter_mut().zip(&g.db) {
                *a += b;
            }
            delta = g.dx;
        }
        Ok(delta)
    }
}

impl Parameters for EmbeddingNet {
    fn tensors(&self) -> Vec<TensorView<'_>> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            out.push(TensorView {
                name: format!("embed.{i}.w"),
                kind: TensorKind::Weight,
                shape: (l.w.rows(), l.w.cols()),
                data: l.w.as_slice(),
            });
            out.push(TensorView {
                name: format!("embed.{i}.b"),
                kind: TensorKind::Bias,
                shape: (l.b.len(), 1),
                data: &l.b,
            });
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for l in &mut self.layers {
            out.push(l.w.as_mut_slice());
            out.push(l.b.as_mut_slice());
        }
        out
    }
}
