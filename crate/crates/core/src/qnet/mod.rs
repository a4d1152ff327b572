//! Small fully connected Q-network with manual backpropagation.

mod adam;
mod io;
mod kernel;

pub use adam::{Adam, AdamConfig};
pub use io::{FORMAT_VERSION, MAGIC};
pub use kernel::Scalar;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const HIDDEN: [usize; 3] = [128, 256, 128];

/// One affine layer; `w` is stored input-major, `w[i * n_out + o]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T> {
    pub n_in: usize,
    pub n_out: usize,
    pub w: Vec<T>,
    pub b: Vec<T>,
}

/// Rectified hidden layers, identity output.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T> {
    layers: Vec<Layer<T>>,
    seed: u64,
}

/// Activations of every layer for one batch, input first.
#[derive(Clone, Debug)]
pub struct Cache<T> {
    n: usize,
    acts: Vec<Vec<T>>,
}

impl<T: Scalar> Cache<T> {
    pub fn output(&self) -> &[T] {
        self.acts.last().expect("at least one layer")
    }

    pub fn rows(&self) -> usize {
        self.n
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape {
    pub input_dim: usize,
}

impl<T: Scalar> Mlp<T> {
    /// Network with the given layer sizes, He-uniform weights
    /// (`U(-sqrt(6/fan_in), sqrt(6/fan_in))`) and zero biases.
    pub fn new(sizes: &[usize], seed: u64) -> Result<Self> {
        let mut net = Self::zeros(sizes)?;
        net.seed = seed;
        let mut rng = rng::seeded(seed, &[0x1417]);
        for layer in &mut net.layers {
            let bound = (6.0 / layer.n_in as f64).sqrt();
            for w in &mut layer.w {
                *w = T::from(rng.random_range(-bound..bound)).unwrap();
            }
        }
        Ok(net)
    }

    /// `[input_dim, 128, 256, 128, 1]`.
    pub fn q_network(input_dim: usize, seed: u64) -> Result<Self> {
        let mut sizes = vec![input_dim];
        sizes.extend(HIDDEN);
        sizes.push(1);
        Self::new(&sizes, seed)
    }

    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Config(format!("invalid layer sizes {sizes:?}")));
        }
        let layers = sizes
            .windows(2)
            .map(|p| Layer {
                n_in: p[0],
                n_out: p[1],
                w: vec![T::zero(); p[0] * p[1]],
                b: vec![T::zero(); p[1]],
            })
            .collect();
        Ok(Self { layers, seed: 0 })
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = Self::zeros(&self.sizes()).expect("valid sizes");
        z.seed = self.seed;
        z
    }

    pub fn sizes(&self) -> Vec<usize> {
        std::iter::once(self.layers[0].n_in)
            .chain(self.layers.iter().map(|l| l.n_out))
            .collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].n_in
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().n_out
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Parameter slices in storage order: `w0, b0, w1, b1, ...`.
    pub fn params(&self) -> impl Iterator<Item = &[T]> {
        self.layers
            .iter()
            .flat_map(|l| [l.w.as_slice(), l.b.as_slice()])
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut [T]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.w.as_mut_slice(), l.b.as_mut_slice()])
    }

    pub fn is_finite(&self) -> bool {
        self.params().flatten().all(|v| v.is_finite())
    }

    pub fn check_input_dim(&self, expected: usize) -> Result<()> {
        if self.input_dim() != expected {
            return Err(Error::Shape {
                expected,
                got: self.input_dim(),
            });
        }
        Ok(())
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.sizes() == other.sizes()
    }

    pub fn cast<U: Scalar>(&self) -> Mlp<U> {
        Mlp {
            seed: self.seed,
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    n_in: l.n_in,
                    n_out: l.n_out,
                    w: l.w.iter().map(|&v| U::from(v).unwrap()).collect(),
                    b: l.b.iter().map(|&v| U::from(v).unwrap()).collect(),
                })
                .collect(),
        }
    }

    fn check_batch(&self, x: &[T], n: usize) -> Result<()> {
        if x.len() != n * self.input_dim() {
            return Err(Error::Shape {
                expected: n * self.input_dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Outputs for `n` row-major input rows (one value per row for a
    /// Q-network).
    pub fn forward(&self, x: &[T], n: usize) -> Result<Vec<T>> {
        self.check_batch(x, n)?;
        let mut cur = x.to_vec();
        let last = self.layers.len() - 1;
        for (li, layer) in self.layers.iter().enumerate() {
            let mut next = vec![T::zero(); n * layer.n_out];
            T::dense(&cur, n, &layer.w, &layer.b, li != last, &mut next);
            cur = next;
        }
        Ok(cur)
    }

    /// Forward pass that keeps the activations needed by [`Mlp::backward`].
    pub fn forward_cached(&self, x: &[T], n: usize) -> Result<Cache<T>> {
        self.check_batch(x, n)?;
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_vec());
        let last = self.layers.len() - 1;
        for (li, layer) in self.layers.iter().enumerate() {
            let mut next = vec![T::zero(); n * layer.n_out];
            T::dense(&acts[li], n, &layer.w, &layer.b, li != last, &mut next);
            acts.push(next);
        }
        Ok(Cache { n, acts })
    }

    /// Gradients of a loss with respect to all parameters, given the loss
    /// gradient with respect to each output (`dout`, one per output value).
    /// The result has the network's shape; it is written into `grads`.
    pub fn backward_into(&self, cache: &Cache<T>, dout: &[T], grads: &mut Self) -> Result<()> {
        let n = cache.n;
        if dout.len() != n * self.output_dim() {
            return Err(Error::Shape {
                expected: n * self.output_dim(),
                got: dout.len(),
            });
        }
        if !self.same_shape(grads) {
            return Err(Error::Config("gradient buffer shape mismatch".into()));
        }
        let mut delta = dout.to_vec();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let (ni, no) = (layer.n_in, layer.n_out);
            let a = &cache.acts[l];
            let g = &mut grads.layers[l];
            g.b.iter_mut().for_each(|v| *v = T::zero());
            for dr in delta.chunks_exact(no) {
                for (gb, &d) in g.b.iter_mut().zip(dr) {
                    *gb = *gb + d;
                }
            }
            // dW = A^T delta and dA = delta W^T, both through the dense kernel.
            let mut at = vec![T::zero(); ni * n];
            for r in 0..n {
                for i in 0..ni {
                    at[i * n + r] = a[r * ni + i];
                }
            }
            T::dense(&at, ni, &delta, &vec![T::zero(); no], false, &mut g.w);
            if l == 0 {
                break;
            }
            let mut wt = vec![T::zero(); no * ni];
            for i in 0..ni {
                for o in 0..no {
                    wt[o * ni + i] = layer.w[i * no + o];
                }
            }
            let mut prev = vec![T::zero(); n * ni];
            T::dense(&delta, n, &wt, &vec![T::zero(); ni], false, &mut prev);
            // Hidden activations are rectified: zero output, zero slope.
            for (p, &ai) in prev.iter_mut().zip(a) {
                if ai <= T::zero() {
                    *p = T::zero();
                }
            }
            delta = prev;
        }
        Ok(())
    }

    pub fn backward(&self, cache: &Cache<T>, dout: &[T]) -> Result<Self> {
        let mut g = self.zeros_like();
        self.backward_into(cache, dout, &mut g)?;
        Ok(g)
    }

    /// Mean squared error `mean((q - y)^2)` on a batch, its per-row output
    /// gradient, and the cache for backpropagation.
    pub fn mse_loss(&self, x: &[T], n: usize, targets: &[T]) -> Result<(T, Vec<T>, Cache<T>)> {
        let cache = self.forward_cached(x, n)?;
        let q = cache.output();
        if targets.len() != q.len() {
            return Err(Error::Shape {
                expected: q.len(),
                got: targets.len(),
            });
        }
        let scale = T::from(2.0 / q.len() as f64).unwrap();
        let mut loss = T::zero();
        let mut dout = Vec::with_capacity(q.len());
        for (&qv, &y) in q.iter().zip(targets) {
            let e = qv - y;
            loss = loss + e * e;
            dout.push(scale * e);
        }
        Ok((loss / T::from(q.len()).unwrap(), dout, cache))
    }

    pub fn copy_from(&mut self, other: &Self) {
        debug_assert!(self.same_shape(other));
        for (dst, src) in self.params_mut().zip(other.params()) {
            dst.copy_from_slice(src);
        }
        self.seed = other.seed;
    }
}
