//! Parameters, layers, the Adam optimizer and spectral normalization.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Graph, Var};
use crate::tensor::Tensor;

/// Index of a parameter in its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|t| t.is_finite())
    }

    /// Put every parameter on `graph` as a differentiable leaf.
    pub fn bind<'g>(&self, graph: &'g Graph) -> Bound<'g> {
        Bound {
            vars: self.values.iter().map(|v| graph.leaf(v.clone())).collect(),
        }
    }

    /// Put every parameter on `graph` as a constant (no gradients).
    pub fn bind_frozen<'g>(&self, graph: &'g Graph) -> Bound<'g> {
        Bound {
            vars: self.values.iter().map(|v| graph.constant(v.clone())).collect(),
        }
    }
}

/// Parameters of a [`ParamStore`] recorded on one graph.
pub struct Bound<'g> {
    vars: Vec<Var<'g>>,
}

impl<'g> Bound<'g> {
    pub fn var(&self, id: ParamId) -> Var<'g> {
        self.vars[id.0]
    }

    /// Per-parameter gradients, `None` where nothing flowed.
    pub fn grads(&self, g: &Gradients) -> Vec<Option<Tensor>> {
        self.vars.iter().map(|&v| g.get(v).cloned()).collect()
    }
}

/// He-normal initialization for a layer with `fan_in` inputs, scaled by `gain`.
pub fn he_normal<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, gain: f64, rng: &mut R) -> Tensor {
    Tensor::randn(shape, gain * (2.0 / fan_in as f64).sqrt(), rng)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(format!("{name}.w"), he_normal(&[cout, cin, k, k], cin * k * k, gain, rng));
        let bias = Some(store.add(format!("{name}.b"), Tensor::zeros(&[cout])));
        Conv2d {
            weight,
            bias,
            stride,
            pad: k / 2,
        }
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Var<'g> {
        x.conv2d(p.var(self.weight), self.bias.map(|b| p.var(b)), self.stride, self.pad)
    }

    /// Forward with an externally supplied (for example normalized) weight.
    pub fn forward_with<'g>(&self, p: &Bound<'g>, w: Var<'g>, x: Var<'g>) -> Var<'g> {
        x.conv2d(w, self.bias.map(|b| p.var(b)), self.stride, self.pad)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fin: usize,
        fout: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(format!("{name}.w"), he_normal(&[fout, fin], fin, gain, rng));
        let bias = Some(store.add(format!("{name}.b"), Tensor::zeros(&[fout])));
        Linear { weight, bias }
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Var<'g> {
        x.linear(p.var(self.weight), self.bias.map(|b| p.var(b)))
    }

    pub fn forward_with<'g>(&self, p: &Bound<'g>, w: Var<'g>, x: Var<'g>) -> Var<'g> {
        x.linear(w, self.bias.map(|b| p.var(b)))
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64, betas: (f64, f64)) -> Self {
        Adam {
            lr,
            beta1: betas.0,
            beta2: betas.1,
            eps: 1e-8,
            step: 0,
            m: store.values().iter().map(|t| Tensor::zeros(t.shape())).collect(),
            v: store.values().iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    /// One update. Parameters without a gradient keep their value and moments.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) {
        assert_eq!(grads.len(), store.len(), "one gradient slot per parameter");
        self.step += 1;
        let b1c = 1.0 - self.beta1.powi(self.step as i32);
        let b2c = 1.0 - self.beta2.powi(self.step as i32);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let p = store.values[i].data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for k in 0..p.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g.data()[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g.data()[k] * g.data()[k];
                p[k] -= self.lr * (m[k] / b1c) / ((v[k] / b2c).sqrt() + self.eps);
            }
        }
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.m, &self.v)
    }

    /// Replace the moment estimates, e.g. when resuming from a checkpoint.
    pub fn set_moments(&mut self, step: u64, m: Vec<Tensor>, v: Vec<Tensor>) -> crate::error::Result<()> {
        let same = |a: &[Tensor], b: &[Tensor]| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.shape() == y.shape());
        if !same(&m, &self.m) || !same(&v, &self.v) {
            return Err(crate::error::Error::Checkpoint("optimizer moment shapes differ".into()));
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(())
    }
}

/// Power-iteration state for one weight, viewed as a `rows × cols` matrix
/// (`rows` = output channels).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralState {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

fn normalize(x: &mut [f64]) {
    let n = x.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
    x.iter_mut().for_each(|a| *a /= n);
}

impl SpectralState {
    pub fn new<R: Rng + ?Sized>(w: &Tensor, rng: &mut R) -> Self {
        let rows = w.shape()[0];
        let cols = w.len() / rows;
        let mut u: Vec<f64> = Tensor::randn(&[rows], 1.0, rng).into_data();
        normalize(&mut u);
        let mut s = SpectralState { u, v: vec![0.0; cols] };
        s.power_iteration(w);
        s
    }

    /// One power-iteration step: `v ← Wᵀu/‖·‖`, `u ← Wv/‖·‖`.
    pub fn power_iteration(&mut self, w: &Tensor) {
        let rows = self.u.len();
        let cols = self.v.len();
        let d = w.data();
        self.v.iter_mut().for_each(|x| *x = 0.0);
        for r in 0..rows {
            for c in 0..cols {
                self.v[c] += d[r * cols + c] * self.u[r];
            }
        }
        normalize(&mut self.v);
        for r in 0..rows {
            self.u[r] = (0..cols).map(|c| d[r * cols + c] * self.v[c]).sum();
        }
        normalize(&mut self.u);
    }

    /// `σ = uᵀ W v`.
    pub fn sigma(&self, w: &Tensor) -> f64 {
        let cols = self.v.len();
        self.u
            .iter()
            .enumerate()
            .map(|(r, ur)| ur * (0..cols).map(|c| w.data()[r * cols + c] * self.v[c]).sum::<f64>())
            .sum()
    }

    /// `W / σ(W)` with `u`, `v` held fixed; the gradient includes the
    /// dependence of `σ` on `W`.
    pub fn normalize_var<'g>(&self, w: Var<'g>) -> Var<'g> {
        let wv = w.value();
        let sigma = self.sigma(&wv).max(1e-12);
        let (u, v) = (self.u.clone(), self.v.clone());
        let w_copy = wv.clone();
        w.graph().op(wv.scale(1.0 / sigma), &[w], move |g, _| {
            let cols = v.len();
            let inner: f64 = g.data().iter().zip(w_copy.data()).map(|(a, b)| a * b).sum();
            let k = inner / (sigma * sigma);
            let mut d = g.scale(1.0 / sigma);
            for (r, ur) in u.iter().enumerate() {
                for (c, vc) in v.iter().enumerate() {
                    d.data_mut()[r * cols + c] -= k * ur * vc;
                }
            }
            vec![Some(d)]
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::from_vec(&[2], vec![1.0, -1.0]));
        let mut opt = Adam::new(&store, 0.1, (0.5, 0.999));
        opt.update(&mut store, &[Some(Tensor::from_vec(&[2], vec![3.0, -0.01]))]);
        let x = store.get(id).data();
        assert!((x[0] - 0.9).abs() < 1e-6 && (x[1] + 0.9).abs() < 1e-4);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::from_vec(&[3], vec![2.0, -3.0, 0.5]));
        let mut opt = Adam::new(&store, 0.05, (0.9, 0.999));
        for _ in 0..500 {
            let g = store.get(id).scale(2.0);
            opt.update(&mut store, &[Some(g)]);
        }
        assert!(store.get(id).abs_max() < 0.05);
    }

    #[test]
    fn spectral_sigma_matches_largest_singular_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = Tensor::randn(&[4, 6], 1.0, &mut rng);
        let mut s = SpectralState::new(&w, &mut rng);
        for _ in 0..200 {
            s.power_iteration(&w);
        }
        let m = nalgebra::DMatrix::from_row_slice(4, 6, w.data());
        let top = m.singular_values().max();
        assert!((s.sigma(&w) - top).abs() < 1e-9);
    }

    #[test]
    fn spectral_normalize_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = Tensor::randn(&[3, 5], 1.0, &mut rng);
        let probe = Tensor::randn(&[3, 5], 1.0, &mut rng);
        let s = SpectralState::new(&w, &mut rng);
        let f = |wt: &Tensor| -> f64 {
            let sig = s.sigma(wt);
            wt.data().iter().zip(probe.data()).map(|(a, b)| a / sig * b).sum()
        };
        let g = Graph::new();
        let wv = g.leaf(w.clone());
        let out = s.normalize_var(wv).mul(g.constant(probe.clone())).sum();
        let grads = g.backward(out);
        let ana = grads.get(wv).unwrap();
        for i in 0..w.len() {
            let mut a = w.clone();
            a.data_mut()[i] += 1e-6;
            let mut b = w.clone();
            b.data_mut()[i] -= 1e-6;
            let num = (f(&a) - f(&b)) / 2e-6;
            assert!((num - ana.data()[i]).abs() < 1e-6);
        }
    }
}
