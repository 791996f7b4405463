//! Minimal batched feed-forward network: dense layers with ReLU between them,
//! a linear head, optional inverted dropout on hidden activations, and
//! manual backpropagation. Parameters live in one flat vector so they can be
//! optimized by [`Adam`](crate::optim::Adam) and serialized as-is.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::math::sqrt;
use crate::rng::{self, DetRng};

/// Row-major `c = a·b + beta·c` where `a` is `m×k` and `b` is `k×n`, each
/// optionally transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the bounds above cover every index touched for these strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    /// Layer widths including input and output, e.g. `[4D, 512, 256, 1]`.
    pub sizes: Vec<usize>,
    /// Per layer: weights (`in×out`, row-major) followed by bias (`out`).
    pub params: Vec<f64>,
}

/// Activations retained from a training forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    batch: usize,
    /// Input to each layer (`batch × sizes[l]`).
    inputs: Vec<Vec<f64>>,
    /// Derivative factor of each hidden activation: 0 where ReLU is off or
    /// the unit was dropped, `1/(1-p)` otherwise.
    masks: Vec<Vec<f64>>,
}

impl Mlp {
    pub fn param_count(sizes: &[usize]) -> usize {
        sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// He-initialized network; biases start at zero.
    pub fn new(sizes: &[usize], seed: u64) -> Self {
        assert!(sizes.len() >= 2, "network needs input and output widths");
        let mut rng = rng::seeded(seed);
        let mut params = Vec::with_capacity(Self::param_count(sizes));
        for (l, w) in sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let last = l + 2 == sizes.len();
            let scale = if last {
                sqrt(1.0 / fan_in as f64)
            } else {
                sqrt(2.0 / fan_in as f64)
            };
            for _ in 0..fan_in * fan_out {
                params.push(scale * rng::normal(&mut rng));
            }
            params.extend(core::iter::repeat_n(0.0, fan_out));
        }
        Self { sizes: sizes.to_vec(), params }
    }

    pub fn zeros(sizes: &[usize]) -> Self {
        Self {
            sizes: sizes.to_vec(),
            params: vec![0.0; Self::param_count(sizes)],
        }
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

    fn offsets(&self, layer: usize) -> (usize, usize) {
        let mut off = 0;
        for w in self.sizes.windows(2).take(layer) {
            off += w[0] * w[1] + w[1];
        }
        let (i, o) = (self.sizes[layer], self.sizes[layer + 1]);
        (off, off + i * o)
    }

    fn layer(&self, layer: usize) -> (&[f64], &[f64]) {
        let (w, b) = self.offsets(layer);
        let o = self.sizes[layer + 1];
        (&self.params[w..b], &self.params[b..b + o])
    }

    /// Deterministic inference (no dropout). `x` is `batch × input_dim`.
    pub fn forward(&self, x: &[f64], batch: usize) -> Vec<f64> {
        let mut act = x.to_vec();
        for l in 0..self.num_layers() {
            act = self.affine(l, &act, batch);
            if l + 1 < self.num_layers() {
                for v in &mut act {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
        }
        act
    }

    fn affine(&self, l: usize, input: &[f64], batch: usize) -> Vec<f64> {
        let (i, o) = (self.sizes[l], self.sizes[l + 1]);
        let (w, b) = self.layer(l);
        let mut out = Vec::with_capacity(batch * o);
        for _ in 0..batch {
            out.extend_from_slice(b);
        }
        gemm(batch, i, o, input, false, w, false, 1.0, &mut out);
        out
    }

    /// Training forward pass with inverted dropout on hidden layers.
    pub fn forward_train(
        &self,
        x: &[f64],
        batch: usize,
        dropout: f64,
        rng: &mut DetRng,
    ) -> (Vec<f64>, ForwardCache) {
        let keep_scale = if dropout > 0.0 { 1.0 / (1.0 - dropout) } else { 1.0 };
        let mut inputs = Vec::with_capacity(self.num_layers());
        let mut masks = Vec::with_capacity(self.num_layers().saturating_sub(1));
        let mut act = x.to_vec();
        for l in 0..self.num_layers() {
            let mut z = self.affine(l, &act, batch);
            inputs.push(act);
            if l + 1 < self.num_layers() {
                let mut mask = vec![0.0; z.len()];
                for (v, m) in z.iter_mut().zip(mask.iter_mut()) {
                    let kept = dropout <= 0.0 || rng::uniform(rng) >= dropout;
                    if *v > 0.0 && kept {
                        *m = keep_scale;
                        *v *= keep_scale;
                    } else {
                        *v = 0.0;
                    }
                }
                masks.push(mask);
            }
            act = z;
        }
        (act, ForwardCache { batch, inputs, masks })
    }

    /// Accumulates parameter gradients into `grads` (same layout as
    /// `params`) and returns the gradient with respect to the input.
    pub fn backward(&self, cache: &ForwardCache, grad_out: &[f64], grads: &mut [f64]) -> Vec<f64> {
        let batch = cache.batch;
        let mut delta = grad_out.to_vec();
        for l in (0..self.num_layers()).rev() {
            let (i, o) = (self.sizes[l], self.sizes[l + 1]);
            let (w_off, b_off) = self.offsets(l);
            let input = &cache.inputs[l];
            // dW += inputᵀ · delta
            gemm(i, batch, o, input, true, &delta, false, 1.0, &mut grads[w_off..b_off]);
            let gb = &mut grads[b_off..b_off + o];
            for row in delta.chunks_exact(o) {
                for (g, d) in gb.iter_mut().zip(row) {
                    *g += d;
                }
            }
            // dInput = delta · Wᵀ
            let (w, _) = self.layer(l);
            let mut d_in = vec![0.0; batch * i];
            gemm(batch, o, i, &delta, false, w, true, 0.0, &mut d_in);
            if l > 0 {
                for (d, m) in d_in.iter_mut().zip(&cache.masks[l - 1]) {
                    *d *= m;
                }
            }
            delta = d_in;
        }
        delta
    }
}
