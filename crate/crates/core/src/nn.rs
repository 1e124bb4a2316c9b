//! Layers built on the autodiff graph, and the AdamW optimiser.

use crate::autograd::{Graph, Var};
use crate::params::{Init, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            init.xavier(&[in_dim, out_dim], in_dim, out_dim),
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim])));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    /// `x` is `[.., in_dim]`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.weight);
        let y = g.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => y,
        }
    }
}

/// Two linear layers with a ReLU in between.
#[derive(Clone, Debug)]
pub struct Mlp2 {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp2 {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
    ) -> Self {
        Self {
            fc1: Linear::new(store, init, &format!("{name}.fc1"), in_dim, hidden, true),
            fc2: Linear::new(store, init, &format!("{name}.fc2"), hidden, out_dim, true),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.fc1.forward(g, x);
        let h = g.relu(h);
        self.fc2.forward(g, h)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[dim], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let n = g.layer_norm(x, 1e-5);
        let gm = g.param(self.gamma);
        let bt = g.param(self.beta);
        let y = g.mul_row(n, gm);
        g.add_row(y, bt)
    }
}

/// Multi-head scaled dot-product attention with separate query/key/value inputs.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

/// Attention output plus the normalised weights `[heads, queries, keys]`.
pub struct AttentionOutput {
    pub output: Var,
    pub weights: Var,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, dim: usize, heads: usize) -> Self {
        assert!(heads > 0 && dim % heads == 0, "dim {dim} not divisible by {heads} heads");
        Self {
            q: Linear::new(store, init, &format!("{name}.q"), dim, dim, true),
            k: Linear::new(store, init, &format!("{name}.k"), dim, dim, true),
            v: Linear::new(store, init, &format!("{name}.v"), dim, dim, true),
            out: Linear::new(store, init, &format!("{name}.out"), dim, dim, true),
            heads,
            dim,
        }
    }

    /// `query` is `[N, D]`; `key` and `value` are `[M, D]`.
    pub fn forward(&self, g: &mut Graph, query: Var, key: Var, value: Var) -> AttentionOutput {
        let n = g.shape(query)[0];
        let m = g.shape(key)[0];
        let (h, dh) = (self.heads, self.dim / self.heads);
        let q = self.q.forward(g, query);
        let k = self.k.forward(g, key);
        let v = self.v.forward(g, value);
        let q = split_heads(g, q, n, h, dh);
        let k = split_heads(g, k, m, h, dh);
        let v = split_heads(g, v, m, h, dh);
        let logits = g.bmm(q, k, true);
        let logits = g.scale(logits, 1.0 / (dh as f64).sqrt());
        let weights = g.softmax(logits);
        let ctx = g.bmm(weights, v, false);
        let ctx = g.permute(ctx, &[1, 0, 2]);
        let ctx = g.reshape(ctx, &[n, self.dim]);
        let output = self.out.forward(g, ctx);
        AttentionOutput { output, weights }
    }
}

/// `[N, H*dh] -> [H, N, dh]`.
pub fn split_heads(g: &mut Graph, x: Var, n: usize, heads: usize, dh: usize) -> Var {
    let r = g.reshape(x, &[n, heads, dh]);
    g.permute(r, &[1, 0, 2])
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub max_grad_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            max_grad_norm: None,
        }
    }
}

/// AdamW with decoupled weight decay. Parameters without a gradient are left untouched.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        let zeros = |s: &ParamStore| s.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self {
            config,
            step: 0,
            m: zeros(store),
            v: zeros(store),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)]) {
        self.step += 1;
        let c = &self.config;
        let clip = match c.max_grad_norm {
            Some(max) => {
                let norm = grads
                    .iter()
                    .flat_map(|(_, g)| g.data().iter())
                    .map(|x| x * x)
                    .sum::<f64>()
                    .sqrt();
                if norm > max {
                    max / (norm + 1e-12)
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (id, grad) in grads {
            let p = store.get_mut(*id);
            let m = self.m[id.0].data_mut();
            let v = self.v[id.0].data_mut();
            for (((pv, mv), vv), gv) in p
                .data_mut()
                .iter_mut()
                .zip(m.iter_mut())
                .zip(v.iter_mut())
                .zip(grad.data())
            {
                let gr = gv * clip;
                *pv -= c.lr * c.weight_decay * *pv;
                *mv = c.beta1 * *mv + (1.0 - c.beta1) * gr;
                *vv = c.beta2 * *vv + (1.0 - c.beta2) * gr * gr;
                let mh = *mv / bc1;
                let vh = *vv / bc2;
                *pv -= c.lr * mh / (vh.sqrt() + c.eps);
            }
        }
    }
}

/// Sums per-example gradient lists (same parameter order) with a scale factor.
pub fn accumulate_grads(total: &mut Vec<(ParamId, Tensor)>, add: Vec<(ParamId, Tensor)>, scale: f64) {
    for (id, g) in add {
        match total.binary_search_by_key(&id, |(i, _)| *i) {
            Ok(pos) => {
                for (a, b) in total[pos].1.data_mut().iter_mut().zip(g.data()) {
                    *a += scale * b;
                }
            }
            Err(pos) => {
                let mut g = g;
                if scale != 1.0 {
                    g.data_mut().iter_mut().for_each(|x| *x *= scale);
                }
                total.insert(pos, (id, g));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn attention_rows_sum_to_one() {
        let mut store = ParamStore::new();
        let mut init = Init::new(3);
        let mha = MultiHeadAttention::new(&mut store, &mut init, "a", 8, 2);
        let q = init.normal(&[3, 8], 1.0);
        let kv = init.normal(&[5, 8], 1.0);
        let mut g = Graph::with_params(&store);
        let q = g.constant(q);
        let kv = g.constant(kv);
        let out = mha.forward(&mut g, q, kv, kv);
        assert_eq!(g.shape(out.output), &[3, 8]);
        let w = g.value(out.weights);
        assert_eq!(w.shape(), &[2, 3, 5]);
        for r in w.data().chunks(5) {
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn adamw_moves_params_against_gradient() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::vector(vec![1.0, -1.0]));
        let mut opt = AdamW::new(
            AdamWConfig {
                lr: 0.1,
                weight_decay: 0.0,
                ..Default::default()
            },
            &store,
        );
        opt.step(&mut store, &[(id, Tensor::vector(vec![2.0, -3.0]))]);
        let p = store.get(id).data();
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn grad_accumulation_is_sorted_sum() {
        let mut total = Vec::new();
        accumulate_grads(&mut total, vec![(ParamId(2), Tensor::vector(vec![1.0]))], 0.5);
        accumulate_grads(
            &mut total,
            vec![(ParamId(0), Tensor::vector(vec![4.0])), (ParamId(2), Tensor::vector(vec![3.0]))],
            0.5,
        );
        assert_eq!(total[0].0, ParamId(0));
        assert_eq!(total[0].1.data(), &[2.0]);
        assert_eq!(total[1].1.data(), &[2.0]);
    }
}
