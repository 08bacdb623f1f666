//! Dense layers and small MLPs with hand-written backward passes.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;

/// Uniform traversal over every parameter tensor, in a fixed order.
pub trait Parameters {
    fn visit(&self, f: &mut dyn FnMut(&[f64]));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64]));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |s| n += s.len());
        n
    }

    fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_params());
        self.visit(&mut |s| v.extend_from_slice(s));
        v
    }

    /// Overwrites all parameters from a flat vector in visit order.
    fn assign_flat(&mut self, flat: &[f64]) {
        let mut off = 0;
        self.visit_mut(&mut |s| {
            s.copy_from_slice(&flat[off..off + s.len()]);
            off += s.len();
        });
        debug_assert_eq!(off, flat.len());
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `in x out`.
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Dense {
    /// Uniform `(-1/sqrt(in), 1/sqrt(in))` initialisation.
    pub fn init<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let k = 1.0 / (input as f64).sqrt();
        Self {
            w: Array2::from_shape_fn((input, output), |_| rng.random_range(-k..k)),
            b: Array1::from_shape_fn(output, |_| rng.random_range(-k..k)),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            w: Array2::zeros((input, output)),
            b: Array1::zeros(output),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.input_dim(), self.output_dim())
    }

    pub fn input_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.w) + &self.b
    }

    /// Accumulates parameter gradients into `grad`; returns `dL/dx` when
    /// `need_input` is set.
    pub fn backward(
        &self,
        x: &Array2<f64>,
        g: &Array2<f64>,
        grad: &mut Dense,
        need_input: bool,
    ) -> Option<Array2<f64>> {
        grad.w += &x.t().dot(g);
        grad.b += &g.sum_axis(Axis(0));
        need_input.then(|| g.dot(&self.w.t()))
    }
}

impl Parameters for Dense {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        f(self.w.as_slice().expect("standard layout"));
        f(self.b.as_slice().expect("standard layout"));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        f(self.w.as_slice_mut().expect("standard layout"));
        f(self.b.as_slice_mut().expect("standard layout"));
    }
}

pub fn relu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v.max(0.0))
}

/// Masks `g` by the ReLU derivative at pre-activation `pre`.
pub fn relu_backward(pre: &Array2<f64>, g: &Array2<f64>) -> Array2<f64> {
    let mut out = g.clone();
    out.zip_mut_with(pre, |o, &p| {
        if p <= 0.0 {
            *o = 0.0;
        }
    });
    out
}

/// Fully connected network with ReLU between layers and a linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

/// Inputs and pre-activations saved by [`Mlp::forward_cached`].
#[derive(Debug, Clone)]
pub struct MlpCache {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
}

impl Mlp {
    /// `sizes = [in, hidden.., out]`.
    pub fn init<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Self {
        Self {
            layers: sizes.windows(2).map(|w| Dense::init(w[0], w[1], rng)).collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self.layers.iter().map(Dense::zeros_like).collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("nonempty").output_dim()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut h = self.layers[0].forward(x);
        for l in &self.layers[1..] {
            h = l.forward(&relu(&h));
        }
        h
    }

    pub fn forward_cached(&self, x: &Array2<f64>) -> (Array2<f64>, MlpCache) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            if i > 0 {
                let z = relu(&h);
                pre.push(h);
                h = z;
            }
            let out = l.forward(&h);
            inputs.push(h);
            h = out;
        }
        (h, MlpCache { inputs, pre })
    }

    /// Backpropagates `g = dL/d(output)`, accumulating into `grad`.
    pub fn backward(&self, cache: &MlpCache, g: Array2<f64>, grad: &mut Mlp) {
        let mut g = g;
        for i in (0..self.layers.len()).rev() {
            let need = i > 0;
            let gi = self.layers[i].backward(&cache.inputs[i], &g, &mut grad.layers[i], need);
            if let Some(gi) = gi {
                g = relu_backward(&cache.pre[i - 1], &gi);
            }
        }
    }
}

impl Parameters for Mlp {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        for l in &self.layers {
            l.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        for l in &mut self.layers {
            l.visit_mut(f);
        }
    }
}
