use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::optim::{emut, eref, ParamMut, ParamRef, Parameterized};

/// Fully connected layer `y = W x + b`; `w` is `out x in`, `b` is `out x 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub w: Matrix,
    pub b: Matrix,
}

impl Dense {
    /// Uniform init in `+-1/sqrt(in)` for weights and biases.
    pub fn init<R: Rng + ?Sized>(inp: usize, out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (inp as f64).sqrt();
        let w = Matrix::from_fn(out, inp, |_, _| rng.random_range(-bound..bound));
        let b = Matrix::from_fn(out, 1, |_, _| rng.random_range(-bound..bound));
        Self { w, b }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            w: Matrix::zeros(self.w.rows(), self.w.cols()),
            b: Matrix::zeros(self.b.rows(), 1),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.w.rows()
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.w.matvec(x);
        for (yi, bi) in y.iter_mut().zip(self.b.data()) {
            *yi += bi;
        }
        y
    }
}

/// ReLU MLP with a linear output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Dense>,
}

#[derive(Debug, Clone)]
pub struct MlpCache {
    /// Input to each layer.
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of each hidden layer.
    preacts: Vec<Vec<f64>>,
}

impl Mlp {
    /// `widths` lists every layer size from input to output.
    pub fn new<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::InvalidShape(format!("bad MLP widths {widths:?}")));
        }
        let layers = widths.windows(2).map(|w| Dense::init(w[0], w[1], rng)).collect();
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidShape("MLP needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::DimMismatch {
                    context: "MLP layer chain",
                    expected: pair[0].out_dim(),
                    got: pair[1].in_dim(),
                });
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self.layers.iter().map(Dense::zeros_like).collect(),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map(Dense::out_dim).unwrap_or(0)
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, MlpCache)> {
        if x.len() != self.in_dim() {
            return Err(Error::DimMismatch {
                context: "MLP input",
                expected: self.in_dim(),
                got: x.len(),
            });
        }
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut preacts = Vec::with_capacity(last);
        let mut h = x.to_vec();
        for (k, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(&h);
            inputs.push(h);
            if k == last {
                h = z;
            } else {
                h = z.iter().map(|&v| v.max(0.0)).collect();
                preacts.push(z);
            }
        }
        Ok((h, MlpCache { inputs, preacts }))
    }

    /// Accumulates parameter gradients into `grads` and returns the input gradient.
    pub fn backward(&self, cache: &MlpCache, d_out: &[f64], grads: &mut Mlp) -> Vec<f64> {
        let mut g = d_out.to_vec();
        for k in (0..self.layers.len()).rev() {
            let layer = &self.layers[k];
            let x = &cache.inputs[k];
            let gl = &mut grads.layers[k];
            for (i, &gi) in g.iter().enumerate() {
                if gi == 0.0 {
                    continue;
                }
                gl.b.data_mut()[i] += gi;
                for (wd, &xj) in gl.w.row_mut(i).iter_mut().zip(x) {
                    *wd += gi * xj;
                }
            }
            let mut gx = layer.w.matvec_t(&g);
            if k > 0 {
                for (v, &z) in gx.iter_mut().zip(&cache.preacts[k - 1]) {
                    if z <= 0.0 {
                        *v = 0.0;
                    }
                }
            }
            g = gx;
        }
        g
    }
}

impl Parameterized for Mlp {
    fn params(&self) -> Vec<ParamRef<'_>> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(k, l)| [eref(format!("layer{k}.w"), &l.w), eref(format!("layer{k}.b"), &l.b)])
            .collect()
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        self.layers
            .iter_mut()
            .enumerate()
            .flat_map(|(k, l)| [emut(format!("layer{k}.w"), &mut l.w), emut(format!("layer{k}.b"), &mut l.b)])
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn shapes_and_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mlp = Mlp::new(&[300, 128, 1], &mut rng).unwrap();
        assert_eq!((mlp.in_dim(), mlp.out_dim()), (300, 1));
        assert_eq!(mlp.param_count(), 300 * 128 + 128 + 128 + 1);
        assert!(Mlp::new(&[3], &mut rng).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mlp = Mlp::new(&[5, 7, 3], &mut rng).unwrap();
        let x: Vec<f64> = (0..5).map(|i| (i as f64 * 0.7).sin()).collect();
        let upstream = [0.3, -1.1, 0.5];
        let loss = |m: &Mlp, x: &[f64]| -> f64 {
            let (y, _) = m.forward(x).unwrap();
            y.iter().zip(&upstream).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = mlp.forward(&x).unwrap();
        let mut grads = mlp.zeros_like();
        let gx = mlp.backward(&cache, &upstream, &mut grads);
        let h = 1e-6;
        for i in 0..5 {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let fd = (loss(&mlp, &xp) - loss(&mlp, &xm)) / (2.0 * h);
            assert!((fd - gx[i]).abs() < 1e-7);
        }
        let mut pert = mlp.clone();
        let base = pert.layers[0].w[(2, 3)];
        pert.layers[0].w[(2, 3)] = base + h;
        let lp = loss(&pert, &x);
        pert.layers[0].w[(2, 3)] = base - h;
        let lm = loss(&pert, &x);
        assert!(((lp - lm) / (2.0 * h) - grads.layers[0].w[(2, 3)]).abs() < 1e-7);
    }
}
