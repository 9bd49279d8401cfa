//! Fully connected networks with batched reverse-mode gradients.
//!
//! Batches are stored column-wise: an input batch is `in_width x batch`.
//! Mapping layers are not part of the network; their Jacobians are folded
//! into the output adjoint by [`Mlp::backward`].

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{Matrix, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, z: &mut Matrix) {
        match self {
            Activation::Relu => z.apply(|x| *x = x.max(0.0)),
            Activation::Tanh => z.apply(|x| *x = x.tanh()),
            Activation::Identity => {}
        }
    }

    /// Multiplies `delta` by the derivative, given the activation output.
    fn backprop(self, delta: &mut Matrix, out: &Matrix) {
        match self {
            Activation::Relu => delta.zip_apply(out, |d, y| {
                if y <= 0.0 {
                    *d = 0.0
                }
            }),
            Activation::Tanh => delta.zip_apply(out, |d, y| *d *= 1.0 - y * y),
            Activation::Identity => {}
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `out x in`
    pub w: Matrix,
    pub b: Vector,
    pub act: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
}

/// Activations recorded by a forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    /// `acts[0]` is the input, `acts[l + 1]` the output of layer `l`.
    acts: Vec<Matrix>,
}

impl Tape {
    pub fn output(&self) -> &Matrix {
        self.acts.last().expect("tape is never empty")
    }

    pub fn batch(&self) -> usize {
        self.acts[0].ncols()
    }
}

/// Parameter gradients (same layout as the layers) plus the input adjoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub w: Vec<Matrix>,
    pub b: Vec<Vector>,
    pub input: Matrix,
}

impl Gradients {
    pub fn norm(&self) -> f64 {
        let s: f64 = self.w.iter().map(|m| m.norm_squared()).sum::<f64>()
            + self.b.iter().map(|v| v.norm_squared()).sum::<f64>();
        s.sqrt()
    }

    /// Rescales to at most `max_norm`. Returns the norm before clipping.
    pub fn clip_norm(&mut self, max_norm: f64) -> f64 {
        let n = self.norm();
        if n > max_norm && n > 0.0 {
            let k = max_norm / n;
            self.w.iter_mut().for_each(|m| *m *= k);
            self.b.iter_mut().for_each(|v| *v *= k);
        }
        n
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.w.iter_mut().zip(&other.w) {
            *a += b;
        }
        for (a, b) in self.b.iter_mut().zip(&other.b) {
            *a += b;
        }
        self.input += &other.input;
    }
}

#[derive(Serialize, Deserialize)]
struct Snapshot {
    widths: Vec<usize>,
    activations: Vec<Activation>,
    /// Row-major weights followed by biases, per layer.
    params: Vec<Vec<f64>>,
}

impl Mlp {
    /// `widths = [input, hidden..., output]`; hidden layers use `hidden`,
    /// the last layer uses `output`. Weights are uniform in
    /// `+-1/sqrt(fan_in)`, biases likewise.
    pub fn new<R: Rng + ?Sized>(widths: &[usize], hidden: Activation, output: Activation, rng: &mut R) -> Self {
        assert!(widths.len() >= 2, "need at least input and output widths");
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|l| {
                let (fan_in, fan_out) = (widths[l], widths[l + 1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let w = Matrix::from_fn(fan_out, fan_in, |_, _| rng.random_range(-bound..bound));
                let b = Vector::from_fn(fan_out, |_, _| rng.random_range(-bound..bound));
                Layer { w, b, act: if l + 1 == n { output } else { hidden } }
            })
            .collect();
        Self { layers }
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("network needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].w.nrows() != pair[1].w.ncols() {
                return Err(Error::DimensionMismatch { expected: pair[0].w.nrows(), got: pair[1].w.ncols() });
            }
        }
        for l in &layers {
            if l.b.len() != l.w.nrows() {
                return Err(Error::DimensionMismatch { expected: l.w.nrows(), got: l.b.len() });
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.layers[0].w.ncols()];
        w.extend(self.layers.iter().map(|l| l.w.nrows()));
        w
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].w.ncols()
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map(|l| l.w.nrows()).unwrap_or(0)
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Forward pass over a batch of column inputs.
    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, Tape)> {
        if x.nrows() != self.input_width() {
            return Err(Error::DimensionMismatch { expected: self.input_width(), got: x.nrows() });
        }
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.clone());
        for layer in &self.layers {
            let prev = acts.last().expect("nonempty");
            let mut z = &layer.w * prev;
            for mut col in z.column_iter_mut() {
                col += &layer.b;
            }
            layer.act.apply(&mut z);
            acts.push(z);
        }
        let tape = Tape { acts };
        Ok((tape.output().clone(), tape))
    }

    /// Forward pass for a single input without recording.
    pub fn predict(&self, x: &Vector) -> Result<Vector> {
        if x.len() != self.input_width() {
            return Err(Error::DimensionMismatch { expected: self.input_width(), got: x.len() });
        }
        let mut h = x.clone();
        for layer in &self.layers {
            let mut z = &layer.w * &h + &layer.b;
            match layer.act {
                Activation::Relu => z.apply(|v| *v = v.max(0.0)),
                Activation::Tanh => z.apply(|v| *v = v.tanh()),
                Activation::Identity => {}
            }
            h = z;
        }
        Ok(h)
    }

    /// Reverse pass. `upstream` is `dL/d(output)` per column. When
    /// `injected[k]` is given, column `k` of the adjoint becomes
    /// `injected[k]^T * upstream[k]`, i.e. the output feeds a mapping with
    /// that Jacobian.
    pub fn backward(&self, tape: &Tape, upstream: &Matrix, injected: Option<&[Matrix]>) -> Result<Gradients> {
        let out_w = self.output_width();
        if upstream.nrows() != out_w || upstream.ncols() != tape.batch() {
            return Err(Error::DimensionMismatch { expected: out_w, got: upstream.nrows() });
        }
        let mut delta = match injected {
            None => upstream.clone(),
            Some(js) => {
                if js.len() != upstream.ncols() {
                    return Err(Error::DimensionMismatch { expected: upstream.ncols(), got: js.len() });
                }
                let mut d = Matrix::zeros(out_w, upstream.ncols());
                for (k, j) in js.iter().enumerate() {
                    if j.nrows() != j.ncols() || j.nrows() != out_w {
                        return Err(Error::DimensionMismatch { expected: out_w, got: j.nrows() });
                    }
                    d.set_column(k, &(j.transpose() * upstream.column(k)));
                }
                d
            }
        };
        let n = self.layers.len();
        let mut gw = vec![Matrix::zeros(0, 0); n];
        let mut gb = vec![Vector::zeros(0); n];
        for l in (0..n).rev() {
            let layer = &self.layers[l];
            layer.act.backprop(&mut delta, &tape.acts[l + 1]);
            gw[l] = &delta * tape.acts[l].transpose();
            gb[l] = Vector::from_iterator(delta.nrows(), delta.row_iter().map(|r| r.sum()));
            delta = layer.w.transpose() * &delta;
        }
        Ok(Gradients { w: gw, b: gb, input: delta })
    }

    /// `self = tau * source + (1 - tau) * self`.
    pub fn polyak_update(&mut self, source: &Mlp, tau: f64) {
        for (t, s) in self.layers.iter_mut().zip(&source.layers) {
            t.w.zip_apply(&s.w, |a, b| *a = tau * b + (1.0 - tau) * *a);
            t.b.zip_apply(&s.b, |a, b| *a = tau * b + (1.0 - tau) * *a);
        }
    }

    /// All parameters, layer by layer, weights (column-major) then biases.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(l.w.as_slice());
            out.extend_from_slice(l.b.as_slice());
        }
        out
    }

    pub fn set_flat_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.num_params() {
            return Err(Error::DimensionMismatch { expected: self.num_params(), got: p.len() });
        }
        let mut off = 0;
        for l in &mut self.layers {
            let nw = l.w.len();
            l.w.as_mut_slice().copy_from_slice(&p[off..off + nw]);
            off += nw;
            let nb = l.b.len();
            l.b.as_mut_slice().copy_from_slice(&p[off..off + nb]);
            off += nb;
        }
        Ok(())
    }

    /// One Adam step on every parameter.
    pub fn adam_step(&mut self, grads: &Gradients, state: &mut AdamState) -> Result<()> {
        if state.len() != self.num_params() {
            return Err(Error::DimensionMismatch { expected: self.num_params(), got: state.len() });
        }
        state.begin_step();
        let mut off = 0;
        for (l, layer) in self.layers.iter_mut().enumerate() {
            off = state.update_segment(off, layer.w.as_mut_slice(), grads.w[l].as_slice());
            off = state.update_segment(off, layer.b.as_mut_slice(), grads.b[l].as_slice());
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let snap = Snapshot {
            widths: self.widths(),
            activations: self.layers.iter().map(|l| l.act).collect(),
            params: self
                .layers
                .iter()
                .map(|l| {
                    let mut v: Vec<f64> = l.w.transpose().as_slice().to_vec();
                    v.extend_from_slice(l.b.as_slice());
                    v
                })
                .collect(),
        };
        Ok(serde_json::to_string(&snap)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let snap: Snapshot = serde_json::from_str(s)?;
        let n = snap.widths.len().saturating_sub(1);
        if n == 0 || snap.activations.len() != n || snap.params.len() != n {
            return Err(Error::Config("inconsistent network snapshot".into()));
        }
        let layers = (0..n)
            .map(|l| {
                let (fi, fo) = (snap.widths[l], snap.widths[l + 1]);
                let p = &snap.params[l];
                if p.len() != fi * fo + fo {
                    return Err(Error::DimensionMismatch { expected: fi * fo + fo, got: p.len() });
                }
                Ok(Layer {
                    w: Matrix::from_row_slice(fo, fi, &p[..fi * fo]),
                    b: Vector::from_column_slice(&p[fi * fo..]),
                    act: snap.activations[l],
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_layers(layers)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    /// Loads a snapshot and checks it has the expected widths.
    pub fn load(path: &Path, expected_widths: &[usize]) -> Result<Self> {
        let net = Self::from_json(&std::fs::read_to_string(path)?)?;
        if net.widths() != expected_widths {
            return Err(Error::Config(format!(
                "checkpoint widths {:?} do not match {:?}",
                net.widths(),
                expected_widths
            )));
        }
        Ok(net)
    }
}

/// Adam moments for a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(n: usize, lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: vec![0.0; n], v: vec![0.0; n] }
    }

    pub fn for_net(net: &Mlp, lr: f64) -> Self {
        Self::new(net.num_params(), lr)
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    fn begin_step(&mut self) {
        self.t += 1;
    }

    fn update_segment(&mut self, off: usize, params: &mut [f64], grads: &[f64]) -> usize {
        let t = self.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (k, (p, &g)) in params.iter_mut().zip(grads).enumerate() {
            let i = off + k;
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            *p -= self.lr * mh / (vh.sqrt() + self.eps);
        }
        off + params.len()
    }

    /// Plain-slice Adam step.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.len() || grads.len() != self.len() {
            return Err(Error::DimensionMismatch { expected: self.len(), got: params.len() });
        }
        self.begin_step();
        self.update_segment(0, params, grads);
        Ok(())
    }
}
