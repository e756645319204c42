use std::rc::Rc;

use crate::graph::{Graph, Var};
use crate::layers::{LayerNorm, Linear};
use crate::params::{Bound, Init, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Unidirectional LSTM with gates ordered input, forget, cell, output.
#[derive(Clone, Debug)]
pub struct Lstm {
    pub input: Linear,
    /// `[H, 4H]` recurrent weights.
    pub recurrent: ParamId,
    pub hidden: usize,
}

impl Lstm {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        in_dim: usize,
        hidden: usize,
    ) -> Self {
        let input = Linear::new(store, init, &format!("{name}.input"), in_dim, 4 * hidden, true);
        let recurrent = store.add(format!("{name}.recurrent"), init.glorot(hidden, 4 * hidden));
        Lstm {
            input,
            recurrent,
            hidden,
        }
    }

    pub fn param_count(&self) -> usize {
        self.input.param_count() + 4 * self.hidden * self.hidden
    }

    /// `[B, n, D]` to `[B, n, H]`, scanning axis 1 forwards.
    pub fn forward<T: Scalar>(&self, g: &Graph<T>, p: &Bound, x: Var) -> Var {
        let shape = g.shape(x);
        let (batch, steps, h) = (shape[0], shape[1], self.hidden);
        let projected = self.input.forward(g, p, x);
        let by_time = g.permute(projected, &[1, 0, 2]);
        let u = p.var(self.recurrent);
        let mut state = g.constant(Tensor::zeros(&[batch, h]));
        let mut cell = g.constant(Tensor::zeros(&[batch, h]));
        let mut outputs = Vec::with_capacity(steps);
        for t in 0..steps {
            let xt = g.reshape(g.narrow(by_time, 0, t, 1), &[batch, 4 * h]);
            let gates = g.add(xt, g.matmul(state, u, false, false));
            let i = g.sigmoid(g.narrow(gates, 1, 0, h));
            let f = g.sigmoid(g.narrow(gates, 1, h, h));
            let c = g.tanh(g.narrow(gates, 1, 2 * h, h));
            let o = g.sigmoid(g.narrow(gates, 1, 3 * h, h));
            cell = g.add(g.mul(f, cell), g.mul(i, c));
            state = g.mul(o, g.tanh(cell));
            outputs.push(g.reshape(state, &[1, batch, h]));
        }
        let stacked = g.concat(&outputs, 0);
        g.permute(stacked, &[1, 0, 2])
    }
}

/// Reverses axis 1 of a `[B, n, D]` node.
pub(crate) fn reverse_steps<T: Scalar>(g: &Graph<T>, x: Var) -> Var {
    let shape = g.shape(x);
    let (b, n, d) = (shape[0], shape[1], shape[2]);
    let map: Vec<u32> = (0..b * n * d)
        .map(|i| {
            let (bi, t, c) = (i / (n * d), (i / d) % n, i % d);
            ((bi * n + (n - 1 - t)) * d + c) as u32
        })
        .collect();
    g.gather(x, Rc::new(map), &shape)
}

/// `LN(x + W [fwd(x) ; bwd(x)])` along axis 1.
#[derive(Clone, Debug)]
pub struct RecurrentLayer {
    pub forward_lstm: Lstm,
    pub backward_lstm: Lstm,
    pub projection: Linear,
    pub norm: LayerNorm,
}

impl RecurrentLayer {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, init: &mut Init, name: &str, dim: usize) -> Self {
        RecurrentLayer {
            forward_lstm: Lstm::new(store, init, &format!("{name}.fwd"), dim, dim),
            backward_lstm: Lstm::new(store, init, &format!("{name}.bwd"), dim, dim),
            projection: Linear::new(store, init, &format!("{name}.proj"), 2 * dim, dim, true),
            norm: LayerNorm::new(store, &format!("{name}.norm"), dim),
        }
    }

    pub fn param_count(&self) -> usize {
        self.forward_lstm.param_count()
            + self.backward_lstm.param_count()
            + self.projection.param_count()
            + 2 * self.norm.dim
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, p: &Bound, x: Var) -> Var {
        let fwd = self.forward_lstm.forward(g, p, x);
        let bwd = reverse_steps(g, self.backward_lstm.forward(g, p, reverse_steps(g, x)));
        let both = g.concat(&[fwd, bwd], 2);
        let proj = self.projection.forward(g, p, both);
        self.norm.forward(g, p, g.add(x, proj))
    }
}

/// Bidirectional-recurrent dual-path block.
#[derive(Clone, Debug)]
pub struct RecurrentBlock {
    pub intra: Vec<RecurrentLayer>,
    pub inter: Vec<RecurrentLayer>,
}

impl RecurrentBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        dim: usize,
        n_intra: usize,
        n_inter: usize,
    ) -> Self {
        RecurrentBlock {
            intra: (0..n_intra)
                .map(|i| RecurrentLayer::new(store, init, &format!("{name}.intra{i}"), dim))
                .collect(),
            inter: (0..n_inter)
                .map(|i| RecurrentLayer::new(store, init, &format!("{name}.inter{i}"), dim))
                .collect(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.intra.iter().chain(&self.inter).map(|l| l.param_count()).sum()
    }

    pub fn forward_intra<T: Scalar>(&self, g: &Graph<T>, p: &Bound, z: Var) -> Var {
        self.intra.iter().fold(z, |h, layer| layer.forward(g, p, h))
    }

    pub fn forward_inter<T: Scalar>(&self, g: &Graph<T>, p: &Bound, z: Var) -> Var {
        let across = g.permute(z, &[1, 0, 2]);
        let out = self.inter.iter().fold(across, |h, layer| layer.forward(g, p, h));
        g.permute(out, &[1, 0, 2])
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, p: &Bound, z: Var) -> Var {
        let local = self.forward_intra(g, p, z);
        self.forward_inter(g, p, local)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testing::grad_rel_error;

    fn run(store: &ParamStore<f64>, f: impl Fn(&Graph<f64>, &Bound, Var) -> Var, x: &Tensor<f64>) -> Tensor<f64> {
        let g = Graph::new();
        let p = store.bind_frozen(&g);
        let v = g.constant(x.clone());
        let out = f(&g, &p, v);
        (*g.value(out)).clone()
    }

    /// Scalar LSTM recurrence written out directly.
    fn reference_lstm(store: &ParamStore<f64>, lstm: &Lstm, seq: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let h = lstm.hidden;
        let w = store.get(lstm.input.weight);
        let b = store.get(lstm.input.bias.unwrap());
        let u = store.get(lstm.recurrent);
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let (mut state, mut cell) = (vec![0.0; h], vec![0.0; h]);
        let mut out = Vec::new();
        for x in seq {
            let gate = |j: usize| {
                b.data()[j]
                    + (0..x.len()).map(|i| x[i] * w.at(&[i, j])).sum::<f64>()
                    + (0..h).map(|i| state[i] * u.at(&[i, j])).sum::<f64>()
            };
            let pre: Vec<f64> = (0..4 * h).map(gate).collect();
            for j in 0..h {
                cell[j] = sig(pre[h + j]) * cell[j] + sig(pre[j]) * pre[2 * h + j].tanh();
            }
            state = (0..h).map(|j| sig(pre[3 * h + j]) * cell[j].tanh()).collect();
            out.push(state.clone());
        }
        out
    }

    #[test]
    fn lstm_matches_scalar_recurrence() {
        let mut store = ParamStore::new();
        let lstm = Lstm::new(&mut store, &mut Init::new(1), "l", 3, 2);
        let x: Tensor<f64> = Init::new(2).uniform(&[2, 5, 3], 1.0);
        let y = run(&store, |g, p, v| lstm.forward(g, p, v), &x);
        for b in 0..2 {
            let seq: Vec<Vec<f64>> = (0..5).map(|t| (0..3).map(|c| x.at(&[b, t, c])).collect()).collect();
            let expect = reference_lstm(&store, &lstm, &seq);
            for t in 0..5 {
                for j in 0..2 {
                    assert!((y.at(&[b, t, j]) - expect[t][j]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn zero_recurrent_weights_leave_residual_path() {
        let mut store = ParamStore::new();
        let layer = RecurrentLayer::new(&mut store, &mut Init::new(0), "r", 4);
        for lstm in [&layer.forward_lstm, &layer.backward_lstm] {
            let w = store.get_mut(lstm.input.weight);
            *w = Tensor::zeros(w.shape());
            let u = store.get_mut(lstm.recurrent);
            *u = Tensor::zeros(u.shape());
        }
        let x: Tensor<f64> = Init::new(3).uniform(&[2, 3, 4], 1.0);
        let y = run(&store, |g, p, v| layer.forward(g, p, v), &x);
        // With zero weights and zero biases every hidden state is 0.5 * tanh(c),
        // identical at each step, so the projection adds the same row to every
        // position; check against that directly.
        let g = Graph::new();
        let p = store.bind_frozen(&g);
        let zeros = g.constant(Tensor::<f64>::zeros(&[2, 3, 4]));
        let hf = layer.forward_lstm.forward(&g, &p, zeros);
        let hb = reverse_steps(&g, layer.backward_lstm.forward(&g, &p, zeros));
        let proj = layer.projection.forward(&g, &p, g.concat(&[hf, hb], 2));
        let expect = layer.norm.forward(&g, &p, g.add(g.constant(x.clone()), proj));
        assert!(y.max_abs_diff(&g.value(expect)) < 1e-12);
    }

    #[test]
    fn block_preserves_shape() {
        let mut store = ParamStore::new();
        let block = RecurrentBlock::new(&mut store, &mut Init::new(0), "b", 3, 1, 2);
        for (s, k) in [(1, 1), (2, 5), (4, 3)] {
            let x: Tensor<f64> = Init::new(7).uniform(&[s, k, 3], 1.0);
            assert_eq!(run(&store, |g, p, v| block.forward(g, p, v), &x).shape(), &[s, k, 3]);
        }
    }

    #[test]
    fn swapping_directions_mirrors_time() {
        let mut store = ParamStore::new();
        let a = RecurrentLayer::new(&mut store, &mut Init::new(4), "a", 2);
        let b = RecurrentLayer::new(&mut store, &mut Init::new(5), "b", 2);
        // b takes a's forward weights as its backward ones and vice versa; the
        // projection rows swap halves to match the concatenation order.
        let copy = |store: &mut ParamStore<f64>, from: &Lstm, to: &Lstm| {
            for (src, dst) in [
                (from.input.weight, to.input.weight),
                (from.input.bias.unwrap(), to.input.bias.unwrap()),
                (from.recurrent, to.recurrent),
            ] {
                let v = store.get(src).clone();
                *store.get_mut(dst) = v;
            }
        };
        copy(&mut store, &a.forward_lstm, &b.backward_lstm);
        copy(&mut store, &a.backward_lstm, &b.forward_lstm);
        let pw = store.get(a.projection.weight).clone();
        let swapped = Tensor::from_fn(&[4, 2], |i| {
            let (r, c) = (i / 2, i % 2);
            pw.at(&[(r + 2) % 4, c])
        });
        *store.get_mut(b.projection.weight) = swapped;
        let pb = store.get(a.projection.bias.unwrap()).clone();
        *store.get_mut(b.projection.bias.unwrap()) = pb;

        let x: Tensor<f64> = Init::new(6).uniform(&[2, 4, 2], 1.0);
        let flip = |t: &Tensor<f64>| {
            Tensor::from_fn(t.shape(), |i| {
                let (s, k, d) = (i / 8, (i / 2) % 4, i % 2);
                t.at(&[s, 3 - k, d])
            })
        };
        let ya = run(&store, |g, p, v| a.forward(g, p, v), &x);
        let yb = run(&store, |g, p, v| b.forward(g, p, v), &flip(&x));
        assert!(flip(&ya).max_abs_diff(&yb) < 1e-12);
    }

    #[test]
    fn lstm_gradients_match_finite_differences() {
        let mut store = ParamStore::new();
        let lstm = Lstm::new(&mut store, &mut Init::new(9), "l", 2, 3);
        let x: Tensor<f64> = Init::new(10).uniform(&[2, 3, 2], 1.0);
        let mut inputs = vec![x];
        inputs.extend(store.tensors().iter().cloned());
        let err = grad_rel_error(
            |g, vars| {
                let p = Bound::from_vars(vars[1..].to_vec());
                let y = lstm.forward(g, &p, vars[0]);
                let w = g.constant(Tensor::from_fn(&[2, 3, 3], |i| (i as f64).sin()));
                g.sum(g.mul(y, w))
            },
            &inputs,
            1e-5,
        );
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn recurrent_gradients_match_finite_differences() {
        let mut store = ParamStore::new();
        let block = RecurrentBlock::new(&mut store, &mut Init::new(9), "b", 3, 1, 1);
        let x: Tensor<f64> = Init::new(10).uniform(&[2, 3, 3], 1.0);
        let mut inputs = vec![x];
        inputs.extend(store.tensors().iter().cloned());
        let err = grad_rel_error(
            |g, vars| {
                let p = Bound::from_vars(vars[1..].to_vec());
                let y = block.forward(g, &p, vars[0]);
                let w = g.constant(Tensor::from_fn(&[2, 3, 3], |i| (i as f64).sin()));
                g.sum(g.mul(y, w))
            },
            &inputs,
            1e-5,
        );
        assert!(err < 1e-6, "{err}");
    }
}
