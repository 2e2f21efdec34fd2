//! Dense tanh networks with hand-written reverse mode and RMSProp.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::grid::Bounds;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum OutputMap {
    Identity,
    /// `y = center + half_width * tanh(z)`, always inside the box.
    Squash { center: Vec<f64>, half_width: Vec<f64> },
}

impl OutputMap {
    pub fn squash(b: &Bounds) -> Self {
        OutputMap::Squash { center: b.center(), half_width: b.half_width() }
    }
}

/// Architecture and fixed input normalization `(x - offset) * scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    /// `[input, hidden.., output]`.
    pub widths: Vec<usize>,
    pub input_offset: Vec<f64>,
    pub input_scale: Vec<f64>,
    pub output: OutputMap,
}

impl MlpSpec {
    /// Normalizes each input to `[-1, 1]` over the concatenation of `boxes`.
    pub fn new(boxes: &[&Bounds], hidden: &[usize], output: OutputMap, out_dim: usize) -> Self {
        let mut input_offset = Vec::new();
        let mut input_scale = Vec::new();
        for b in boxes {
            for (c, h) in b.center().into_iter().zip(b.half_width()) {
                input_offset.push(c);
                input_scale.push(if h > 0.0 { 1.0 / h } else { 1.0 });
            }
        }
        let mut widths = vec![input_offset.len()];
        widths.extend_from_slice(hidden);
        widths.push(out_dim);
        Self { widths, input_offset, input_scale, output }
    }

    pub fn validate(&self) -> Result<()> {
        let w = &self.widths;
        if w.len() < 2 || w.contains(&0) {
            return Err(contract!("network widths {w:?} need an input, an output and no empty layer"));
        }
        if self.input_offset.len() != w[0] || self.input_scale.len() != w[0] {
            return Err(contract!("input normalization does not match input width {}", w[0]));
        }
        if let OutputMap::Squash { center, half_width } = &self.output {
            let n = w[w.len() - 1];
            if center.len() != n || half_width.len() != n {
                return Err(contract!("output box does not match output width {n}"));
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.widths.windows(2).map(|p| p[0] * p[1] + p[1]).sum()
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        self.widths[self.widths.len() - 1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    spec: MlpSpec,
    params: Vec<f64>,
}

/// Activations kept by [`Mlp::forward`] for the backward pass.
pub struct Tape {
    batch: usize,
    /// `acts[0]`: normalized input; `acts[l]`: hidden `tanh` outputs;
    /// last: output pre-map (`z`) or `tanh(z)` for a squashed output.
    acts: Vec<Vec<f64>>,
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for k in 0..4 {
            acc[k] += a[4 * c + k] * b[4 * c + k];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// `1 - 2 / (exp(2x) + 1)`, saturating cleanly at both ends.
#[inline]
fn tanh(x: f64) -> f64 {
    1.0 - 2.0 / (libm::exp(2.0 * x) + 1.0)
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

impl Mlp {
    /// Uniform Glorot initialization with zero biases.
    pub fn new(spec: MlpSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let mut params = Vec::with_capacity(spec.param_count());
        for p in spec.widths.windows(2) {
            let lim = libm::sqrt(6.0 / (p[0] + p[1]) as f64);
            for _ in 0..p[0] * p[1] {
                params.push(rng.random_range(-lim..lim));
            }
            params.extend(core::iter::repeat_n(0.0, p[1]));
        }
        Ok(Self { spec, params })
    }

    pub fn from_parts(spec: MlpSpec, params: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        if params.len() != spec.param_count() {
            return Err(contract!("{} parameters for an architecture with {}", params.len(), spec.param_count()));
        }
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    fn layers(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        let mut off = 0;
        self.spec.widths.windows(2).map(move |p| {
            let o = off;
            off += p[0] * p[1] + p[1];
            (o, p[0], p[1])
        })
    }

    fn normalize(&self, input: &[f64]) -> Vec<f64> {
        let n = self.spec.input_dim();
        input
            .iter()
            .enumerate()
            .map(|(i, v)| (v - self.spec.input_offset[i % n]) * self.spec.input_scale[i % n])
            .collect()
    }

    fn run(&self, input: &[f64], batch: usize, mut keep: Option<&mut Vec<Vec<f64>>>) -> Vec<f64> {
        assert_eq!(input.len(), batch * self.spec.input_dim(), "network input has the wrong length");
        let mut cur = self.normalize(input);
        let n_layers = self.spec.widths.len() - 1;
        for (l, (off, n_in, n_out)) in self.layers().enumerate() {
            let wt = &self.params[off..off + n_in * n_out];
            let b = &self.params[off + n_in * n_out..off + n_in * n_out + n_out];
            let mut next = vec![0.0; batch * n_out];
            for o in next.chunks_exact_mut(n_out) {
                o.copy_from_slice(b);
            }
            // Four samples share each weight row load; per-element operation
            // order is the same as one sample at a time.
            let full = batch / 4 * 4;
            for s in (0..full).step_by(4) {
                let (o0, rest) = next[s * n_out..(s + 4) * n_out].split_at_mut(n_out);
                let (o1, rest) = rest.split_at_mut(n_out);
                let (o2, o3) = rest.split_at_mut(n_out);
                for i in 0..n_in {
                    let w = &wt[i * n_out..(i + 1) * n_out];
                    let x = [cur[s * n_in + i], cur[(s + 1) * n_in + i], cur[(s + 2) * n_in + i], cur[(s + 3) * n_in + i]];
                    for j in 0..n_out {
                        o0[j] += x[0] * w[j];
                        o1[j] += x[1] * w[j];
                        o2[j] += x[2] * w[j];
                        o3[j] += x[3] * w[j];
                    }
                }
            }
            for s in full..batch {
                let o = &mut next[s * n_out..(s + 1) * n_out];
                let x = &cur[s * n_in..(s + 1) * n_in];
                for (i, xi) in x.iter().enumerate() {
                    axpy(o, *xi, &wt[i * n_out..(i + 1) * n_out]);
                }
            }
            let last = l + 1 == n_layers;
            if !last || matches!(self.spec.output, OutputMap::Squash { .. }) {
                for v in next.iter_mut() {
                    *v = tanh(*v);
                }
            }
            let prev = core::mem::replace(&mut cur, next);
            if let Some(k) = keep.as_deref_mut() {
                k.push(prev);
            }
        }
        let z = cur;
        let out = match &self.spec.output {
            OutputMap::Identity => z.clone(),
            OutputMap::Squash { center, half_width } => {
                let n = center.len();
                z.iter().enumerate().map(|(i, t)| center[i % n] + half_width[i % n] * t).collect()
            }
        };
        if let Some(k) = keep {
            k.push(z);
        }
        out
    }

    /// Batched forward pass (`input` is `batch` rows of the input width).
    pub fn predict(&self, input: &[f64], batch: usize) -> Vec<f64> {
        self.run(input, batch, None)
    }

    pub fn forward_one(&self, x: &[f64]) -> Vec<f64> {
        self.run(x, 1, None)
    }

    pub fn forward(&self, input: &[f64], batch: usize) -> (Vec<f64>, Tape) {
        let mut acts = Vec::with_capacity(self.spec.widths.len());
        let out = self.run(input, batch, Some(&mut acts));
        (out, Tape { batch, acts })
    }

    /// Reverse pass for `d loss / d output = grad_out`. Parameter gradients are
    /// added into `grad_params` when given; returns the gradient with respect to
    /// the raw (unnormalized) input.
    pub fn backward(&self, tape: &Tape, grad_out: &[f64], mut grad_params: Option<&mut [f64]>) -> Vec<f64> {
        let batch = tape.batch;
        let n_layers = self.spec.widths.len() - 1;
        let n_out_final = self.spec.output_dim();
        assert_eq!(grad_out.len(), batch * n_out_final, "output gradient has the wrong length");
        let mut gz: Vec<f64> = match &self.spec.output {
            OutputMap::Identity => grad_out.to_vec(),
            OutputMap::Squash { half_width, .. } => {
                let t = &tape.acts[n_layers];
                grad_out
                    .iter()
                    .enumerate()
                    .map(|(i, g)| g * half_width[i % n_out_final] * (1.0 - t[i] * t[i]))
                    .collect()
            }
        };
        let layers: Vec<_> = self.layers().collect();
        for l in (0..n_layers).rev() {
            let (off, n_in, n_out) = layers[l];
            let wt = &self.params[off..off + n_in * n_out];
            let a = &tape.acts[l];
            if let Some(gp) = grad_params.as_deref_mut() {
                let (gw, gb) = gp[off..off + n_in * n_out + n_out].split_at_mut(n_in * n_out);
                for s in 0..batch {
                    for (gbj, gj) in gb.iter_mut().zip(&gz[s * n_out..(s + 1) * n_out]) {
                        *gbj += gj;
                    }
                }
                let full = batch / 4 * 4;
                for s in (0..full).step_by(4) {
                    let g = &gz[s * n_out..(s + 4) * n_out];
                    let (g0, g1, g2, g3) = (&g[..n_out], &g[n_out..2 * n_out], &g[2 * n_out..3 * n_out], &g[3 * n_out..]);
                    for i in 0..n_in {
                        let x = [a[s * n_in + i], a[(s + 1) * n_in + i], a[(s + 2) * n_in + i], a[(s + 3) * n_in + i]];
                        let w = &mut gw[i * n_out..(i + 1) * n_out];
                        for j in 0..n_out {
                            w[j] = (((w[j] + x[0] * g0[j]) + x[1] * g1[j]) + x[2] * g2[j]) + x[3] * g3[j];
                        }
                    }
                }
                for s in full..batch {
                    let g = &gz[s * n_out..(s + 1) * n_out];
                    for i in 0..n_in {
                        axpy(&mut gw[i * n_out..(i + 1) * n_out], a[s * n_in + i], g);
                    }
                }
            }
            let mut ga = vec![0.0; batch * n_in];
            for s in 0..batch {
                let g = &gz[s * n_out..(s + 1) * n_out];
                for i in 0..n_in {
                    let v = dot(&wt[i * n_out..(i + 1) * n_out], g);
                    ga[s * n_in + i] = if l > 0 {
                        let ai = a[s * n_in + i];
                        v * (1.0 - ai * ai)
                    } else {
                        v * self.spec.input_scale[i]
                    };
                }
            }
            gz = ga;
        }
        gz
    }

    /// `self <- tau * source + (1 - tau) * self`.
    pub fn soft_update(&mut self, source: &Mlp, tau: f64) {
        for (t, s) in self.params.iter_mut().zip(&source.params) {
            *t = tau * s + (1.0 - tau) * *t;
        }
    }
}

/// RMSProp without momentum.
#[derive(Debug, Clone, PartialEq)]
pub struct RmsProp {
    pub lr: f64,
    pub decay: f64,
    pub eps: f64,
    sq: Vec<f64>,
}

impl RmsProp {
    pub fn new(n: usize, lr: f64) -> Self {
        Self { lr, decay: 0.99, eps: 1e-8, sq: vec![0.0; n] }
    }

    /// Descent step `p -= lr * g / (sqrt(v) + eps)`; a zero learning rate
    /// leaves the parameters untouched.
    pub fn descend(&mut self, params: &mut [f64], grad: &[f64]) {
        for (v, g) in self.sq.iter_mut().zip(grad) {
            *v = self.decay * *v + (1.0 - self.decay) * g * g;
        }
        if self.lr == 0.0 {
            return;
        }
        for ((p, g), v) in params.iter_mut().zip(grad).zip(&self.sq) {
            *p -= self.lr * g / (libm::sqrt(*v) + self.eps);
        }
    }
}
