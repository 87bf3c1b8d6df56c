//! Dense feed-forward networks over a flat parameter vector: tanh hidden
//! layers, linear output, and a reverse-mode backward pass.

use std::ops::Range;

use rand::Rng;
use rand_distr::StandardNormal;

use super::params::ParameterVector;
use crate::error::{EspError, Result};

#[derive(Clone, Debug, PartialEq)]
struct Layer {
    fan_in: usize,
    fan_out: usize,
    /// Row-major `fan_out × fan_in` weights.
    weights: Range<usize>,
    bias: Range<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    layers: Vec<Layer>,
}

/// Activations recorded by a forward pass, consumed by [`Mlp::backward`].
#[derive(Clone, Debug, Default)]
pub struct MlpCache {
    /// `acts[0]` is the input; `acts[l + 1]` is the output of layer `l`.
    acts: Vec<Vec<f64>>,
}

impl MlpCache {
    pub fn output(&self) -> &[f64] {
        self.acts.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

impl Mlp {
    /// Registers one weight and one bias slice per layer in `params`.
    /// `sizes` lists the input width, every hidden width, and the output width.
    pub fn register(params: &mut ParameterVector, prefix: &str, sizes: &[usize]) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(EspError::invalid(format!("invalid layer sizes {sizes:?}")));
        }
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(l, w)| Layer {
                fan_in: w[0],
                fan_out: w[1],
                weights: params.register(format!("{prefix}/l{l}/w"), w[0] * w[1]),
                bias: params.register(format!("{prefix}/l{l}/b"), w[1]),
            })
            .collect();
        Ok(Mlp { sizes: sizes.to_vec(), layers })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    /// Orthogonal initialization: hidden layers with gain √2, the output
    /// layer with `output_gain`; biases zero.
    pub fn init_orthogonal(&self, params: &mut [f64], output_gain: f64, rng: &mut impl Rng) {
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let gain = if l == last { output_gain } else { std::f64::consts::SQRT_2 };
            let w = orthogonal(layer.fan_out, layer.fan_in, gain, rng);
            params[layer.weights.clone()].copy_from_slice(&w);
            params[layer.bias.clone()].fill(0.0);
        }
    }

    fn check_input(&self, params: &[f64], input: &[f64]) -> Result<()> {
        if input.len() != self.input_dim() {
            return Err(EspError::invalid(format!(
                "network expects input of length {}, got {}",
                self.input_dim(),
                input.len()
            )));
        }
        let needed = self.layers.last().map(|l| l.bias.end).unwrap_or(0);
        if params.len() < needed {
            return Err(EspError::invalid("parameter vector too short for network"));
        }
        Ok(())
    }

    fn layer_forward(layer: &Layer, params: &[f64], x: &[f64], out: &mut Vec<f64>, hidden: bool) {
        let w = &params[layer.weights.clone()];
        let b = &params[layer.bias.clone()];
        out.clear();
        out.extend((0..layer.fan_out).map(|j| {
            let z = b[j] + dot(&w[j * layer.fan_in..(j + 1) * layer.fan_in], x);
            if hidden {
                z.tanh()
            } else {
                z
            }
        }));
    }

    pub fn forward(&self, params: &[f64], input: &[f64]) -> Result<Vec<f64>> {
        self.check_input(params, input)?;
        let mut x = input.to_vec();
        let mut y = Vec::new();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            Self::layer_forward(layer, params, &x, &mut y, l != last);
            std::mem::swap(&mut x, &mut y);
        }
        Ok(x)
    }

    /// Forward pass that records activations into `cache` (reusing its buffers).
    pub fn forward_cached<'c>(&self, params: &[f64], input: &[f64], cache: &'c mut MlpCache) -> Result<&'c [f64]> {
        self.check_input(params, input)?;
        cache.acts.resize_with(self.layers.len() + 1, Vec::new);
        cache.acts[0].clear();
        cache.acts[0].extend_from_slice(input);
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let (head, tail) = cache.acts.split_at_mut(l + 1);
            Self::layer_forward(layer, params, &head[l], &mut tail[0], l != last);
        }
        Ok(cache.output())
    }

    /// Accumulates `∂L/∂params` into `grad` given `∂L/∂output`.
    pub fn backward(&self, params: &[f64], cache: &MlpCache, d_output: &[f64], grad: &mut [f64]) -> Result<()> {
        if d_output.len() != self.output_dim() {
            return Err(EspError::invalid(format!(
                "output gradient has length {}, network output is {}",
                d_output.len(),
                self.output_dim()
            )));
        }
        if cache.acts.len() != self.layers.len() + 1 {
            return Err(EspError::invalid("backward called without a recorded forward pass"));
        }
        let mut delta = d_output.to_vec();
        let mut d_prev = Vec::new();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let a_prev = &cache.acts[l];
            let w = &params[layer.weights.clone()];
            for (j, &dj) in delta.iter().enumerate() {
                grad[layer.bias.start + j] += dj;
            }
            if l > 0 {
                d_prev.clear();
                d_prev.resize(layer.fan_in, 0.0);
            }
            for (j, &dj) in delta.iter().enumerate() {
                if dj == 0.0 {
                    continue;
                }
                let row = j * layer.fan_in;
                let gw = &mut grad[layer.weights.start + row..layer.weights.start + row + layer.fan_in];
                for (g, a) in gw.iter_mut().zip(a_prev) {
                    *g += dj * a;
                }
                if l > 0 {
                    for (d, wv) in d_prev.iter_mut().zip(&w[row..row + layer.fan_in]) {
                        *d += dj * wv;
                    }
                }
            }
            if l > 0 {
                // Previous layer is a tanh hidden layer: d tanh = 1 − a².
                delta.clear();
                delta.extend(d_prev.iter().zip(a_prev).map(|(d, a)| d * (1.0 - a * a)));
            }
        }
        Ok(())
    }
}

/// Dot product with four independent accumulators so the loop vectorizes.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// A `rows × cols` matrix with orthonormal rows (or columns, whichever is
/// fewer) scaled by `gain`, flattened row-major.
pub fn orthogonal(rows: usize, cols: usize, gain: f64, rng: &mut impl Rng) -> Vec<f64> {
    let transpose = rows > cols;
    let (r, c) = if transpose { (cols, rows) } else { (rows, cols) };
    // Gram-Schmidt over r vectors of length c (r ≤ c).
    let mut m: Vec<Vec<f64>> = (0..r).map(|_| (0..c).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()).collect();
    for i in 0..r {
        for k in 0..i {
            let dot: f64 = m[i].iter().zip(&m[k]).map(|(a, b)| a * b).sum();
            let (done, cur) = m.split_at_mut(i);
            for (x, y) in cur[0].iter_mut().zip(&done[k]) {
                *x -= dot * y;
            }
        }
        let norm = m[i].iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        m[i].iter_mut().for_each(|x| *x /= norm);
    }
    let mut out = vec![0.0; rows * cols];
    for i in 0..r {
        for j in 0..c {
            let (row, col) = if transpose { (j, i) } else { (i, j) };
            out[row * cols + col] = gain * m[i][j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net(sizes: &[usize], seed: u64) -> (Mlp, ParameterVector) {
        let mut p = ParameterVector::new();
        let mlp = Mlp::register(&mut p, "net", sizes).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        p.values_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.8..0.8));
        (mlp, p)
    }

    /// Independent reference: explicit nested loops over a 2-hidden-layer net.
    fn reference_forward(p: &[f64], input: &[f64], sizes: &[usize]) -> Vec<f64> {
        let mut x = input.to_vec();
        let mut off = 0;
        for l in 0..sizes.len() - 1 {
            let (n_in, n_out) = (sizes[l], sizes[l + 1]);
            let w = &p[off..off + n_in * n_out];
            let b = &p[off + n_in * n_out..off + n_in * n_out + n_out];
            off += n_in * n_out + n_out;
            let mut y = vec![0.0; n_out];
            for j in 0..n_out {
                let mut s = 0.0;
                for i in 0..n_in {
                    s += w[j * n_in + i] * x[i];
                }
                y[j] = s + b[j];
                if l + 2 < sizes.len() {
                    y[j] = y[j].tanh();
                }
            }
            x = y;
        }
        x
    }

    #[test]
    fn zero_params_give_zero_output() {
        let mut p = ParameterVector::new();
        let mlp = Mlp::register(&mut p, "net", &[4, 8, 3]).unwrap();
        assert_eq!(mlp.forward(p.values(), &[1.0, -2.0, 3.0, 0.5]).unwrap(), vec![0.0; 3]);
        assert_eq!(p.len(), 4 * 8 + 8 + 8 * 3 + 3);
        assert_eq!(p.registry().len(), 4);
    }

    #[test]
    fn identity_linear_layer() {
        let mut p = ParameterVector::new();
        let mlp = Mlp::register(&mut p, "lin", &[3, 3]).unwrap();
        for i in 0..3 {
            p.values_mut()[i * 3 + i] = 1.0;
        }
        assert_eq!(mlp.forward(p.values(), &[0.5, -1.5, 2.0]).unwrap(), vec![0.5, -1.5, 2.0]);
    }

    #[test]
    fn matches_reference_implementation() {
        let sizes = [5, 7, 6, 3];
        let (mlp, p) = net(&sizes, 1);
        let input = [0.3, -0.2, 0.9, 1.4, -1.1];
        let a = mlp.forward(p.values(), &input).unwrap();
        let b = reference_forward(p.values(), &input, &sizes);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        let mut cache = MlpCache::default();
        assert_eq!(mlp.forward_cached(p.values(), &input, &mut cache).unwrap(), a.as_slice());
    }

    #[test]
    fn shape_errors() {
        let (mlp, p) = net(&[3, 4, 2], 2);
        assert!(mlp.forward(p.values(), &[1.0, 2.0]).is_err());
        let mut cache = MlpCache::default();
        mlp.forward_cached(p.values(), &[1.0, 2.0, 3.0], &mut cache).unwrap();
        let mut g = vec![0.0; p.len()];
        assert!(mlp.backward(p.values(), &cache, &[1.0], &mut g).is_err());
        assert!(Mlp::register(&mut ParameterVector::new(), "x", &[3]).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let sizes = [4, 6, 5, 3];
        let (mlp, p) = net(&sizes, 3);
        let input = [0.7, -0.3, 0.2, 1.0];
        let weights = [0.5, -1.3, 0.8];
        let loss = |vals: &[f64]| -> f64 {
            let out = mlp.forward(vals, &input).unwrap();
            out.iter().zip(&weights).map(|(o, w)| w * o * o).sum()
        };
        let mut cache = MlpCache::default();
        let out = mlp.forward_cached(p.values(), &input, &mut cache).unwrap().to_vec();
        let d_out: Vec<f64> = out.iter().zip(&weights).map(|(o, w)| 2.0 * w * o).collect();
        let mut grad = vec![0.0; p.len()];
        mlp.backward(p.values(), &cache, &d_out, &mut grad).unwrap();
        let mut vals = p.values().to_vec();
        let h = 1e-5;
        for k in 0..vals.len() {
            let orig = vals[k];
            vals[k] = orig + h;
            let up = loss(&vals);
            vals[k] = orig - h;
            let down = loss(&vals);
            vals[k] = orig;
            let fd = (up - down) / (2.0 * h);
            let rel = (fd - grad[k]).abs() / fd.abs().max(grad[k].abs()).max(1e-6);
            assert!(rel < 1e-4, "param {k}: fd {fd} vs {}", grad[k]);
        }
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let (mlp, p) = net(&[3, 4, 2], 4);
        let mut cache = MlpCache::default();
        mlp.forward_cached(p.values(), &[0.1, 0.2, 0.3], &mut cache).unwrap();
        let mut grad = vec![0.0; p.len()];
        mlp.backward(p.values(), &cache, &[0.0, 0.0], &mut grad).unwrap();
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn orthogonal_rows_are_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for (rows, cols) in [(4, 6), (6, 4), (5, 5)] {
            let w = orthogonal(rows, cols, 1.0, &mut rng);
            let (n, len, stride_vec, stride_el) =
                if rows <= cols { (rows, cols, cols, 1) } else { (cols, rows, 1, cols) };
            for a in 0..n {
                for b in 0..n {
                    let dot: f64 =
                        (0..len).map(|k| w[a * stride_vec + k * stride_el] * w[b * stride_vec + k * stride_el]).sum();
                    let expected = if a == b { 1.0 } else { 0.0 };
                    assert!((dot - expected).abs() < 1e-10);
                }
            }
        }
    }
}
