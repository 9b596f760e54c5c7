//! Fully-connected ReLU networks with hand-written reverse mode.
//!
//! Parameters live in one flat slice so optimizers, checkpoints and gradient
//! checks can treat every network uniformly. Layer `k` stores its weight
//! matrix row-major (`out x in`) followed by its bias.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpShape {
    /// Layer widths including input and output.
    pub sizes: Vec<usize>,
}

/// Activations retained for the backward pass: `acts[0]` is the input,
/// `acts[k]` the output of layer `k` (post-ReLU for hidden layers).
#[derive(Debug, Clone, PartialEq)]
pub struct MlpTrace {
    pub acts: Vec<Vec<f64>>,
}

impl MlpTrace {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("trace has at least the input")
    }
}

impl MlpShape {
    pub fn new(sizes: Vec<usize>) -> Self {
        assert!(sizes.len() >= 2, "need at least input and output widths");
        MlpShape { sizes }
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn num_params(&self) -> usize {
        self.sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Offset of layer `k`'s weights in the flat parameter slice.
    pub fn layer_offset(&self, k: usize) -> usize {
        self.sizes[..=k].windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn forward(&self, params: &[f64], input: &[f64]) -> MlpTrace {
        assert_eq!(input.len(), self.input_dim());
        let mut acts = Vec::with_capacity(self.sizes.len());
        acts.push(input.to_vec());
        let mut off = 0;
        let last = self.num_layers() - 1;
        for k in 0..self.num_layers() {
            let (n_in, n_out) = (self.sizes[k], self.sizes[k + 1]);
            let w = &params[off..off + n_in * n_out];
            let b = &params[off + n_in * n_out..off + n_in * n_out + n_out];
            let x = &acts[k];
            let mut y = vec![0.0; n_out];
            for (j, yj) in y.iter_mut().enumerate() {
                let row = &w[j * n_in..(j + 1) * n_in];
                let mut s = b[j];
                for (wi, xi) in row.iter().zip(x) {
                    s += wi * xi;
                }
                *yj = if k < last { s.max(0.0) } else { s };
            }
            acts.push(y);
            off += n_in * n_out + n_out;
        }
        MlpTrace { acts }
    }

    /// Accumulates parameter gradients into `grads` and returns the gradient
    /// with respect to the input.
    pub fn backward(&self, params: &[f64], trace: &MlpTrace, d_out: &[f64], grads: &mut [f64]) -> Vec<f64> {
        assert_eq!(d_out.len(), self.output_dim());
        let mut delta = d_out.to_vec();
        for k in (0..self.num_layers()).rev() {
            let (n_in, n_out) = (self.sizes[k], self.sizes[k + 1]);
            let off = self.layer_offset(k);
            let w = &params[off..off + n_in * n_out];
            let x = &trace.acts[k];
            {
                let (gw, gb) = grads[off..off + n_in * n_out + n_out].split_at_mut(n_in * n_out);
                for j in 0..n_out {
                    let dj = delta[j];
                    if dj == 0.0 {
                        continue;
                    }
                    gb[j] += dj;
                    for (g, xi) in gw[j * n_in..(j + 1) * n_in].iter_mut().zip(x) {
                        *g += dj * xi;
                    }
                }
            }
            let mut d_in = vec![0.0; n_in];
            for j in 0..n_out {
                let dj = delta[j];
                if dj == 0.0 {
                    continue;
                }
                for (d, wi) in d_in.iter_mut().zip(&w[j * n_in..(j + 1) * n_in]) {
                    *d += dj * wi;
                }
            }
            if k > 0 {
                for (d, a) in d_in.iter_mut().zip(x) {
                    if *a <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            delta = d_in;
        }
        delta
    }

    /// Orthogonal initialization: hidden layers use `hidden_gain`, the output
    /// layer `output_gain`; biases start at zero.
    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R, hidden_gain: f64, output_gain: f64) -> Vec<f64> {
        let mut params = Vec::with_capacity(self.num_params());
        for k in 0..self.num_layers() {
            let (n_in, n_out) = (self.sizes[k], self.sizes[k + 1]);
            let gain = if k + 1 == self.num_layers() { output_gain } else { hidden_gain };
            let w = orthogonal(rng, n_out, n_in);
            for j in 0..n_out {
                for i in 0..n_in {
                    params.push(gain * w[(j, i)]);
                }
            }
            params.extend(std::iter::repeat_n(0.0, n_out));
        }
        params
    }
}

/// A `rows x cols` matrix with orthonormal rows or columns, whichever is shorter.
fn orthogonal<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> DMatrix<f64> {
    let (tall_r, tall_c) = if rows >= cols { (rows, cols) } else { (cols, rows) };
    let g = DMatrix::from_fn(tall_r, tall_c, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for c in 0..tall_c {
        if r[(c, c)] < 0.0 {
            q.column_mut(c).neg_mut();
        }
    }
    if rows >= cols {
        q
    } else {
        q.transpose()
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn parameter_count_and_offsets() {
        let s = MlpShape::new(vec![4, 3, 2]);
        assert_eq!(s.num_params(), 4 * 3 + 3 + 3 * 2 + 2);
        assert_eq!(s.layer_offset(0), 0);
        assert_eq!(s.layer_offset(1), 15);
    }

    #[test]
    fn orthogonal_rows_are_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = orthogonal(&mut rng, 5, 9);
        let gram = &w * w.transpose();
        for i in 0..5 {
            for j in 0..5 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((gram[(i, j)] - expect).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = MlpShape::new(vec![6, 8, 8, 3]);
        let params = s.init(&mut rng, 1.4, 1.0);
        let x: Vec<f64> = (0..6).map(|i| (i as f64 * 0.7).sin()).collect();
        let dy = [0.3, -1.1, 0.5];
        let loss = |p: &[f64], x: &[f64]| -> f64 {
            s.forward(p, x).output().iter().zip(dy).map(|(a, b)| a * b).sum()
        };
        let trace = s.forward(&params, &x);
        let mut grads = vec![0.0; s.num_params()];
        let dx = s.backward(&params, &trace, &dy, &mut grads);
        let eps = 1e-6;
        for k in 0..params.len() {
            let mut p = params.clone();
            p[k] += eps;
            let up = loss(&p, &x);
            p[k] -= 2.0 * eps;
            let down = loss(&p, &x);
            assert!(((up - down) / (2.0 * eps) - grads[k]).abs() < 1e-6, "param {k}");
        }
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp[i] += eps;
            let up = loss(&params, &xp);
            xp[i] -= 2.0 * eps;
            let down = loss(&params, &xp);
            assert!(((up - down) / (2.0 * eps) - dx[i]).abs() < 1e-6);
        }
    }
}
