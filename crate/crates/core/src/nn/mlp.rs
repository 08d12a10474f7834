//! Dense ReLU networks with a linear output layer and exact reverse-mode
//! gradients, plus the Adam optimizer that trains them.
//!
//! Batches are row-major `(batch, features)` matrices. Weights are stored as
//! `(in, out)` so a layer is `x.dot(w) + b`.

use ndarray::{Array1, Array2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Dense {
    pub fn in_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.w.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Dense>,
}

/// Layer inputs captured by [`Mlp::forward_recorded`]; entry `k` is the
/// input of layer `k` and the last entry is the network output.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    activations: Vec<Array2<f64>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.activations.is_empty()
    }

    pub fn output(&self) -> Option<&Array2<f64>> {
        self.activations.last()
    }
}

/// Parameter gradients with the same layout as the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub w: Vec<Array2<f64>>,
    pub b: Vec<Array1<f64>>,
}

impl Gradients {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            w: net.layers.iter().map(|l| Array2::zeros(l.w.raw_dim())).collect(),
            b: net.layers.iter().map(|l| Array1::zeros(l.b.raw_dim())).collect(),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.w.iter().zip(&self.b) {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out
    }

    pub fn is_zero(&self) -> bool {
        self.flatten().iter().all(|g| *g == 0.0)
    }
}

impl Mlp {
    /// `sizes` lists every layer width including input and output. Weights and
    /// biases are drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`; the output
    /// layer is further multiplied by `output_scale`.
    pub fn new<R: Rng>(sizes: &[usize], output_scale: f64, rng: &mut R) -> Result<Self> {
        Self::check_sizes(sizes)?;
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|k| {
                let (fan_in, fan_out) = (sizes[k], sizes[k + 1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let scale = if k + 1 == n { output_scale } else { 1.0 };
                let w = Array2::from_shape_fn((fan_in, fan_out), |_| scale * rng.random_range(-bound..bound));
                let b = Array1::from_shape_fn(fan_out, |_| scale * rng.random_range(-bound..bound));
                Dense { w, b }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        Self::check_sizes(sizes)?;
        let layers = sizes
            .windows(2)
            .map(|w| Dense {
                w: Array2::zeros((w[0], w[1])),
                b: Array1::zeros(w[1]),
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidInput("network needs at least one layer".into()));
        }
        for (k, l) in layers.iter().enumerate() {
            if l.b.len() != l.out_dim() {
                return Err(Error::InvalidInput(format!("layer {k}: bias length {} != {}", l.b.len(), l.out_dim())));
            }
            if k > 0 && layers[k - 1].out_dim() != l.in_dim() {
                return Err(Error::InvalidInput(format!("layer {k}: input {} does not chain", l.in_dim())));
            }
        }
        Ok(Self { layers })
    }

    fn check_sizes(sizes: &[usize]) -> Result<()> {
        if sizes.len() < 2 || sizes.contains(&0) {
            Err(Error::InvalidInput(format!("invalid layer sizes {sizes:?}")))
        } else {
            Ok(())
        }
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn sizes(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(Dense::out_dim))
            .collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").out_dim()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.w.iter().chain(l.b.iter()).all(|v| v.is_finite()))
    }

    /// Parameters in layer order, weights (row-major) before biases.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend(l.w.iter());
            out.extend(l.b.iter());
        }
        out
    }

    pub fn set_params_flat(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.num_params() {
            return Err(Error::InvalidInput(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                p.len()
            )));
        }
        let mut it = p.iter();
        for l in &mut self.layers {
            l.w.iter_mut().chain(l.b.iter_mut()).for_each(|v| *v = *it.next().unwrap());
        }
        Ok(())
    }

    /// Single-sample forward pass.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.input_dim() {
            return Err(Error::InvalidInput(format!(
                "input length {} != network input {}",
                input.len(),
                self.input_dim()
            )));
        }
        let mut h = input.to_vec();
        let last = self.layers.len() - 1;
        for (k, l) in self.layers.iter().enumerate() {
            let mut next = l.b.to_vec();
            for (i, hi) in h.iter().enumerate() {
                if *hi != 0.0 {
                    for (o, w) in next.iter_mut().zip(l.w.row(i)) {
                        *o += hi * w;
                    }
                }
            }
            if k < last {
                next.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            h = next;
        }
        Ok(h)
    }

    pub fn forward_batch(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_batch(x)?;
        let mut h = x.to_owned();
        let last = self.layers.len() - 1;
        for (k, l) in self.layers.iter().enumerate() {
            h = Self::affine(l, &h, k < last);
        }
        Ok(h)
    }

    /// Forward pass that overwrites `tape` with what [`Mlp::backward`] needs.
    pub fn forward_recorded(&self, x: &Array2<f64>, tape: &mut Tape) -> Result<Array2<f64>> {
        self.check_batch(x)?;
        tape.activations.clear();
        tape.activations.push(x.to_owned());
        let last = self.layers.len() - 1;
        for (k, l) in self.layers.iter().enumerate() {
            let h = Self::affine(l, tape.activations.last().unwrap(), k < last);
            tape.activations.push(h);
        }
        Ok(tape.activations.last().unwrap().clone())
    }

    fn affine(l: &Dense, x: &Array2<f64>, relu: bool) -> Array2<f64> {
        let mut h = x.dot(&l.w);
        if relu {
            Zip::from(h.rows_mut()).for_each(|mut row| {
                Zip::from(&mut row).and(&l.b).for_each(|v, b| *v = (*v + b).max(0.0));
            });
        } else {
            h += &l.b;
        }
        h
    }

    fn check_batch(&self, x: &Array2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::InvalidInput(format!(
                "batch has {} features, network expects {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Reverse-mode pass through the computation recorded in `tape`.
    ///
    /// `d_out` is the gradient of a scalar objective with respect to the
    /// network output. Returns the parameter gradients and the gradient with
    /// respect to the network input.
    pub fn backward(&self, tape: &Tape, d_out: &Array2<f64>) -> Result<(Gradients, Array2<f64>)> {
        let (g, dx) = self.backward_impl(tape, d_out, true)?;
        Ok((g.expect("parameter gradients requested"), dx))
    }

    /// Gradient with respect to the input only; skips the weight products.
    pub fn input_gradient(&self, tape: &Tape, d_out: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(self.backward_impl(tape, d_out, false)?.1)
    }

    fn backward_impl(&self, tape: &Tape, d_out: &Array2<f64>, params: bool) -> Result<(Option<Gradients>, Array2<f64>)> {
        let acts = &tape.activations;
        if acts.len() != self.layers.len() + 1 {
            return Err(Error::NoForwardRecorded(format!(
                "tape holds {} activations, network needs {}",
                acts.len(),
                self.layers.len() + 1
            )));
        }
        for (k, l) in self.layers.iter().enumerate() {
            if acts[k].ncols() != l.in_dim() {
                return Err(Error::NoForwardRecorded(format!("tape layer {k} does not match this network")));
            }
        }
        let out = acts.last().unwrap();
        if d_out.dim() != out.dim() {
            return Err(Error::InvalidInput(format!(
                "upstream gradient shape {:?} != output shape {:?}",
                d_out.dim(),
                out.dim()
            )));
        }
        let mut grads = Gradients {
            w: Vec::with_capacity(self.layers.len()),
            b: Vec::with_capacity(self.layers.len()),
        };
        let mut delta = d_out.to_owned();
        for k in (0..self.layers.len()).rev() {
            let input = &acts[k];
            if params {
                grads.w.push(input.t().dot(&delta));
                grads.b.push(delta.sum_axis(Axis(0)));
            }
            if k == 0 && !params {
                return Ok((None, delta.dot(&self.layers[0].w.t())));
            }
            let mut d_in = delta.dot(&self.layers[k].w.t());
            if k > 0 {
                // The input of layer k is a ReLU output: positive exactly where active.
                Zip::from(&mut d_in).and(input).for_each(|d, a| {
                    if *a <= 0.0 {
                        *d = 0.0;
                    }
                });
            }
            delta = d_in;
        }
        grads.w.reverse();
        grads.b.reverse();
        Ok((params.then_some(grads), delta))
    }

    /// `self <- (1 - tau) * self + tau * source`.
    pub fn polyak_update(&mut self, source: &Mlp, tau: f64) {
        for (t, s) in self.layers.iter_mut().zip(&source.layers) {
            Zip::from(&mut t.w).and(&s.w).for_each(|t, s| *t = (1.0 - tau) * *t + tau * s);
            Zip::from(&mut t.b).and(&s.b).for_each(|t, s| *t = (1.0 - tau) * *t + tau * s);
        }
    }

    pub fn to_file(&self) -> MlpFile {
        MlpFile {
            sizes: self.sizes(),
            weights: self.layers.iter().map(|l| l.w.iter().copied().collect()).collect(),
            biases: self.layers.iter().map(|l| l.b.to_vec()).collect(),
        }
    }

    pub fn from_file(f: &MlpFile) -> Result<Self> {
        Self::check_sizes(&f.sizes)?;
        let n = f.sizes.len() - 1;
        if f.weights.len() != n || f.biases.len() != n {
            return Err(Error::InvalidInput(format!("expected {n} weight and bias arrays")));
        }
        let mut layers = Vec::with_capacity(n);
        for k in 0..n {
            let (i, o) = (f.sizes[k], f.sizes[k + 1]);
            let w = Array2::from_shape_vec((i, o), f.weights[k].clone())
                .map_err(|e| Error::InvalidInput(format!("layer {k} weights: {e}")))?;
            if f.biases[k].len() != o {
                return Err(Error::InvalidInput(format!("layer {k} bias length mismatch")));
            }
            layers.push(Dense {
                w,
                b: Array1::from(f.biases[k].clone()),
            });
        }
        let net = Self { layers };
        if !net.is_finite() {
            return Err(Error::InvalidInput("non-finite network parameter".into()));
        }
        Ok(net)
    }
}

/// Serialized network: layer widths, row-major `(in, out)` weights, biases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpFile {
    pub sizes: Vec<usize>,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam state for one network.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    cfg: AdamConfig,
    t: u64,
    m: Gradients,
    v: Gradients,
}

impl Adam {
    pub fn new(net: &Mlp, cfg: AdamConfig) -> Self {
        Self {
            cfg,
            t: 0,
            m: Gradients::zeros_like(net),
            v: Gradients::zeros_like(net),
        }
    }

    /// Descends along `g`.
    pub fn step(&mut self, net: &mut Mlp, g: &Gradients) {
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powf(self.t as f64);
        let bc2 = 1.0 - beta2.powf(self.t as f64);
        let step_size = lr * bc2.sqrt() / bc1;
        let eps_hat = eps * bc2.sqrt();
        for (k, layer) in net.layers.iter_mut().enumerate() {
            Zip::from(&mut layer.w)
                .and(&mut self.m.w[k])
                .and(&mut self.v.w[k])
                .and(&g.w[k])
                .for_each(|p, m, v, g| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *p -= step_size * *m / (v.sqrt() + eps_hat);
                });
            Zip::from(&mut layer.b)
                .and(&mut self.m.b[k])
                .and(&mut self.v.b[k])
                .and(&g.b[k])
                .for_each(|p, m, v, g| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *p -= step_size * *m / (v.sqrt() + eps_hat);
                });
        }
    }
}

/// Adam for a single scalar parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarAdam {
    cfg: AdamConfig,
    t: u64,
    m: f64,
    v: f64,
}

impl ScalarAdam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self { cfg, t: 0, m: 0.0, v: 0.0 }
    }

    pub fn step(&mut self, p: &mut f64, g: f64) {
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        self.m = beta1 * self.m + (1.0 - beta1) * g;
        self.v = beta2 * self.v + (1.0 - beta2) * g * g;
        let bc1 = 1.0 - beta1.powf(self.t as f64);
        let bc2 = 1.0 - beta2.powf(self.t as f64);
        *p -= lr * bc2.sqrt() / bc1 * self.m / (self.v.sqrt() + eps * bc2.sqrt());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_net(sizes: &[usize], seed: u64) -> Mlp {
        Mlp::new(sizes, 1.0, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn random_batch(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
    }

    // Straightforward loop evaluation used as an independent reference.
    fn reference_forward(net: &Mlp, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        let n = net.layers().len();
        for (k, l) in net.layers().iter().enumerate() {
            let mut out = vec![0.0; l.out_dim()];
            for o in 0..l.out_dim() {
                let mut s = l.b[o];
                for i in 0..l.in_dim() {
                    s += h[i] * l.w[[i, o]];
                }
                out[o] = if k + 1 < n { s.max(0.0) } else { s };
            }
            h = out;
        }
        h
    }

    #[test]
    fn zero_network_outputs_zero() {
        let net = Mlp::zeros(&[4, 5, 3]).unwrap();
        assert_eq!(net.forward(&[1.0, -2.0, 3.0, 0.5]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn identity_layer_passes_input() {
        let net = Mlp::from_layers(vec![Dense {
            w: Array2::eye(3),
            b: Array1::zeros(3),
        }])
        .unwrap();
        assert_eq!(net.forward(&[0.5, 0.0, 2.0]).unwrap(), vec![0.5, 0.0, 2.0]);
    }

    #[test]
    fn forward_matches_reference() {
        let net = random_net(&[5, 7, 6, 2], 1);
        let x = random_batch(10, 5, 2);
        let batch = net.forward_batch(&x).unwrap();
        for r in 0..10 {
            let xr: Vec<f64> = x.row(r).to_vec();
            let want = reference_forward(&net, &xr);
            let single = net.forward(&xr).unwrap();
            for o in 0..2 {
                assert!((batch[[r, o]] - want[o]).abs() <= 1e-12);
                assert!((single[o] - want[o]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let net = random_net(&[3, 4, 1], 0);
        assert!(net.forward(&[1.0, 2.0]).is_err());
        assert!(net.forward_batch(&random_batch(2, 4, 0)).is_err());
    }

    #[test]
    fn backward_without_forward_errors() {
        let net = random_net(&[3, 4, 1], 0);
        let err = net.backward(&Tape::new(), &Array2::zeros((1, 1))).unwrap_err();
        assert!(matches!(err, Error::NoForwardRecorded(_)));
        // A tape recorded on a different network is rejected too.
        let other = random_net(&[5, 4, 1], 0);
        let mut tape = Tape::new();
        other.forward_recorded(&random_batch(2, 5, 0), &mut tape).unwrap();
        assert!(net.backward(&tape, &Array2::zeros((2, 1))).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let net = random_net(&[3, 8, 2], 4);
        let mut tape = Tape::new();
        net.forward_recorded(&random_batch(6, 3, 5), &mut tape).unwrap();
        let (g, dx) = net.backward(&tape, &Array2::zeros((6, 2))).unwrap();
        assert!(g.is_zero());
        assert!(dx.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn linear_layer_weight_gradient_is_input() {
        let net = random_net(&[3, 2], 7);
        let x = array![[0.3, -1.2, 2.0]];
        let mut tape = Tape::new();
        net.forward_recorded(&x, &mut tape).unwrap();
        // d(out_o)/d(w_io) = x_i for the upstream unit vector on output o.
        let (g, _) = net.backward(&tape, &array![[1.0, 0.0]]).unwrap();
        for i in 0..3 {
            assert_eq!(g.w[0][[i, 0]], x[[0, i]]);
            assert_eq!(g.w[0][[i, 1]], 0.0);
        }
        assert_eq!(g.b[0][0], 1.0);
    }

    #[test]
    fn gradients_match_central_differences() {
        for seed in 0..10 {
            let net = random_net(&[4, 9, 7, 3], seed);
            let x = random_batch(5, 4, seed + 100);
            let upstream = random_batch(5, 3, seed + 200);
            // Scalar objective sum(upstream * out) has d/d(out) = upstream.
            let objective = |n: &Mlp, x: &Array2<f64>| (n.forward_batch(x).unwrap() * &upstream).sum();
            let mut tape = Tape::new();
            net.forward_recorded(&x, &mut tape).unwrap();
            let (g, dx) = net.backward(&tape, &upstream).unwrap();
            let analytic = g.flatten();
            let p0 = net.params_flat();
            let h = 1e-5;
            let mut probe = net.clone();
            for (k, a) in analytic.iter().enumerate() {
                let mut p = p0.clone();
                p[k] += h;
                probe.set_params_flat(&p).unwrap();
                let fp = objective(&probe, &x);
                p[k] -= 2.0 * h;
                probe.set_params_flat(&p).unwrap();
                let fm = objective(&probe, &x);
                let fd = (fp - fm) / (2.0 * h);
                assert!((a - fd).abs() <= 1e-3 * a.abs().max(fd.abs()).max(1e-3), "param {k}: {a} vs {fd}");
            }
            for ((r, c), a) in dx.indexed_iter() {
                let mut xp = x.clone();
                xp[[r, c]] += h;
                let mut xm = x.clone();
                xm[[r, c]] -= h;
                let fd = (objective(&net, &xp) - objective(&net, &xm)) / (2.0 * h);
                assert!((a - fd).abs() <= 1e-3 * a.abs().max(fd.abs()).max(1e-3));
            }
        }
    }

    #[test]
    fn polyak_extremes() {
        let src = random_net(&[3, 4, 2], 1);
        let mut t = random_net(&[3, 4, 2], 2);
        let orig = t.clone();
        t.polyak_update(&src, 0.0);
        assert_eq!(t, orig);
        t.polyak_update(&src, 1.0);
        assert_eq!(t, src);
    }

    #[test]
    fn file_roundtrip() {
        let net = random_net(&[8, 16, 16, 6], 3);
        let f = net.to_file();
        assert_eq!(Mlp::from_file(&f).unwrap(), net);
        let mut bad = f.clone();
        bad.weights[1].pop();
        assert!(Mlp::from_file(&bad).is_err());
    }

    #[test]
    fn adam_descends_a_quadratic() {
        let mut net = Mlp::from_layers(vec![Dense {
            w: array![[3.0]],
            b: array![-2.0],
        }])
        .unwrap();
        let mut opt = Adam::new(&net, AdamConfig::with_lr(0.05));
        for _ in 0..500 {
            let mut g = Gradients::zeros_like(&net);
            g.w[0][[0, 0]] = 2.0 * net.layers()[0].w[[0, 0]];
            g.b[0][0] = 2.0 * net.layers()[0].b[0];
            opt.step(&mut net, &g);
        }
        assert!(net.layers()[0].w[[0, 0]].abs() < 0.05);
        assert!(net.layers()[0].b[0].abs() < 0.05);
        let mut p = 1.0;
        let mut sa = ScalarAdam::new(AdamConfig::with_lr(0.05));
        for _ in 0..500 {
            let g = 2.0 * p;
            sa.step(&mut p, g);
        }
        assert!(p.abs() < 0.05);
    }
}
