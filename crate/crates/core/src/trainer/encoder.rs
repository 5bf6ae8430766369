use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// `in × out`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Perceptron `input → hidden… → feature` with tanh between layers and a linear head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderState {
    pub layers: Vec<Dense>,
    pub step_count: usize,
}

/// Activations kept from a forward pass: `inputs[l]` feeds layer `l`.
pub struct ForwardCache {
    inputs: Vec<Array2<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGrads {
    pub layers: Vec<Dense>,
}

impl EncoderState {
    /// Glorot-normal weights, zero biases.
    pub fn init<R: Rng>(input_dim: usize, hidden: &[usize], feature_dim: usize, rng: &mut R) -> Self {
        let dims: Vec<usize> = std::iter::once(input_dim)
            .chain(hidden.iter().copied())
            .chain(std::iter::once(feature_dim))
            .collect();
        let layers = dims
            .windows(2)
            .map(|w| {
                let std = (2.0 / (w[0] + w[1]) as f64).sqrt();
                Dense {
                    weight: Array2::from_shape_simple_fn((w[0], w[1]), || {
                        std * rng.sample::<f64, _>(StandardNormal)
                    }),
                    bias: Array1::zeros(w[1]),
                }
            })
            .collect();
        Self {
            layers,
            step_count: 0,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.ncols())
    }

    pub fn encode(&self, inputs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        Ok(self.forward(inputs)?.0)
    }

    pub fn forward(&self, inputs: ArrayView2<'_, f64>) -> Result<(Array2<f64>, ForwardCache)> {
        if inputs.ncols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: inputs.ncols(),
            });
        }
        let last = self.layers.len() - 1;
        let mut cache = Vec::with_capacity(self.layers.len());
        let mut h = inputs.to_owned();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut a = h.dot(&layer.weight);
            a += &layer.bias;
            if l < last {
                a.mapv_inplace(f64::tanh);
            }
            cache.push(h);
            h = a;
        }
        Ok((h, ForwardCache { inputs: cache }))
    }

    /// Reverse pass for `dL/d(features)`.
    pub fn backward(&self, cache: &ForwardCache, grad_out: &Array2<f64>) -> EncoderGrads {
        let n = self.layers.len();
        let mut layers = Vec::with_capacity(n);
        let mut g = grad_out.clone();
        for l in (0..n).rev() {
            let h = &cache.inputs[l];
            let dw = h.t().dot(&g);
            let db = g.sum_axis(Axis(0));
            layers.push(Dense {
                weight: dw,
                bias: db,
            });
            if l > 0 {
                let mut gp = g.dot(&self.layers[l].weight.t());
                // `h` is the tanh output of layer l-1.
                gp.zip_mut_with(h, |gv, &hv| *gv *= 1.0 - hv * hv);
                g = gp;
            }
        }
        layers.reverse();
        EncoderGrads { layers }
    }

    pub fn apply_sgd(&mut self, grads: &EncoderGrads, lr: f64) {
        for (p, g) in self.layers.iter_mut().zip(&grads.layers) {
            p.weight.scaled_add(-lr, &g.weight);
            p.bias.scaled_add(-lr, &g.bias);
        }
        self.step_count += 1;
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn params_flat(&self) -> Vec<f64> {
        flatten(&self.layers)
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_params(), "parameter count");
        let mut it = flat.iter().copied();
        for l in &mut self.layers {
            l.weight.iter_mut().for_each(|v| *v = it.next().unwrap());
            l.bias.iter_mut().for_each(|v| *v = it.next().unwrap());
        }
    }
}

impl EncoderGrads {
    pub fn flat(&self) -> Vec<f64> {
        flatten(&self.layers)
    }

    pub fn is_finite(&self) -> bool {
        self.flat().iter().all(|v| v.is_finite())
    }
}

fn flatten(layers: &[Dense]) -> Vec<f64> {
    layers
        .iter()
        .flat_map(|l| l.weight.iter().chain(l.bias.iter()).copied())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use ndarray::array;

    #[test]
    fn zero_head_gives_zero_features() {
        let mut e = EncoderState::init(3, &[5, 4], 2, &mut rng::substream(1, rng::INIT, 0));
        let head = e.layers.last_mut().unwrap();
        head.weight.fill(0.0);
        let x = array![[1.0, -2.0, 0.5], [0.3, 0.3, 0.3]];
        let z = e.encode(x.view()).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_inputs_identical_rows() {
        let e = EncoderState::init(3, &[5], 2, &mut rng::substream(1, rng::INIT, 0));
        let x = array![[1.0, -2.0, 0.5], [1.0, -2.0, 0.5]];
        let z = e.encode(x.view()).unwrap();
        assert_eq!(z.row(0), z.row(1));
    }

    #[test]
    fn init_is_seeded() {
        let a = EncoderState::init(4, &[8, 8], 3, &mut rng::substream(9, rng::INIT, 0));
        let b = EncoderState::init(4, &[8, 8], 3, &mut rng::substream(9, rng::INIT, 0));
        assert_eq!(a, b);
        let x = array![[0.1, 0.2, 0.3, 0.4]];
        assert_eq!(a.encode(x.view()).unwrap(), b.encode(x.view()).unwrap());
        let c = EncoderState::init(4, &[8, 8], 3, &mut rng::substream(10, rng::INIT, 0));
        assert_ne!(a, c);
    }

    #[test]
    fn wrong_input_width() {
        let e = EncoderState::init(3, &[5], 2, &mut rng::substream(1, rng::INIT, 0));
        let x = array![[1.0, 2.0]];
        assert!(e.encode(x.view()).is_err());
    }

    #[test]
    fn flat_params_roundtrip() {
        let mut e = EncoderState::init(3, &[4], 2, &mut rng::substream(1, rng::INIT, 0));
        let p = e.params_flat();
        assert_eq!(p.len(), 3 * 4 + 4 + 4 * 2 + 2);
        let q: Vec<f64> = p.iter().map(|v| v * 2.0).collect();
        e.set_params_flat(&q);
        assert_eq!(e.params_flat(), q);
    }
}
