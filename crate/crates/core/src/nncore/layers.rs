use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Dense affine map `y = W x + b` with `W` stored row-major (`outputs x inputs`).
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Linear {
            inputs,
            outputs,
            weight: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut l = Linear::zeros(n, n);
        for i in 0..n {
            l.weight[i * n + i] = 1.0;
        }
        l
    }

    /// Gaussian weights with variance `gain / inputs`, zero bias.
    pub fn random(inputs: usize, outputs: usize, gain: f64, rng: &mut impl Rng) -> Self {
        let std = (gain / inputs as f64).sqrt();
        let weight = (0..inputs * outputs)
            .map(|_| {
                let n: f64 = StandardNormal.sample(rng);
                std * n
            })
            .collect();
        Linear {
            inputs,
            outputs,
            weight,
            bias: vec![0.0; outputs],
        }
    }

    pub fn forward(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.inputs);
        for (o, yo) in y.iter_mut().enumerate() {
            let row = &self.weight[o * self.inputs..(o + 1) * self.inputs];
            *yo = self.bias[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        }
    }

    /// Accumulates parameter gradients for upstream `dy` at input `x` and,
    /// when asked, adds `W^T dy` into `dx`.
    pub fn backward(&self, x: &[f64], dy: &[f64], gw: &mut [f64], gb: &mut [f64], dx: Option<&mut [f64]>) {
        for (o, &d) in dy.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            gb[o] += d;
            let g = &mut gw[o * self.inputs..(o + 1) * self.inputs];
            g.iter_mut().zip(x).for_each(|(g, v)| *g += d * v);
        }
        if let Some(dx) = dx {
            for (o, &d) in dy.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &self.weight[o * self.inputs..(o + 1) * self.inputs];
                dx.iter_mut().zip(row).for_each(|(a, w)| *a += d * w);
            }
        }
    }
}

/// ReLU on hidden layers, linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// He-initialized network over `widths = [input, hidden.., output]`.
    pub fn random(widths: &[usize], rng: &mut impl Rng) -> Self {
        assert!(widths.len() >= 2, "an MLP needs an input and an output width");
        let last = widths.len() - 2;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::random(w[0], w[1], if i < last { 2.0 } else { 1.0 }, rng))
            .collect();
        Mlp { layers }
    }

    pub fn zeros(widths: &[usize]) -> Self {
        Mlp {
            layers: widths.windows(2).map(|w| Linear::zeros(w[0], w[1])).collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut acts = self.forward_cached(x);
        acts.pop().expect("at least one layer")
    }

    pub fn forward_rows(&self, rows: &[f64]) -> Vec<f64> {
        rows.chunks_exact(self.input_dim())
            .flat_map(|x| self.forward(x))
            .collect()
    }

    /// Input followed by the (post-activation) output of every layer.
    pub fn forward_cached(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_vec());
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut y = vec![0.0; layer.outputs];
            layer.forward(&acts[i], &mut y);
            if i < last {
                y.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            acts.push(y);
        }
        acts
    }

    /// Backpropagates `d_out` through cached activations; layer `i` writes
    /// into `grads[2i]` (weight) and `grads[2i + 1]` (bias).
    pub fn backward(&self, acts: &[Vec<f64>], d_out: &[f64], grads: &mut [Vec<f64>]) {
        let mut delta = d_out.to_vec();
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let (gw, rest) = grads[2 * i..].split_at_mut(1);
            if i == 0 {
                layer.backward(&acts[0], &delta, &mut gw[0], &mut rest[0], None);
                break;
            }
            let mut dx = vec![0.0; layer.inputs];
            layer.backward(&acts[i], &delta, &mut gw[0], &mut rest[0], Some(&mut dx));
            // ReLU gate of the previous layer's output
            for (d, &a) in dx.iter_mut().zip(&acts[i]) {
                if a <= 0.0 {
                    *d = 0.0;
                }
            }
            delta = dx;
        }
    }
}
