//! Reusable neural building blocks over the tensor graph.

use fpdsc_tensor::{AttentionSpec, Graph, ParamId, ParamStore, Tensor, Var, LAYER_NORM_EPS};
use rand::Rng;

pub type Result<T> = std::result::Result<T, fpdsc_tensor::TensorError>;

/// Xavier/Glorot uniform initialization for a `[fan_in × fan_out]` weight.
pub fn xavier<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.random_range(-limit..limit)).collect();
    Tensor::matrix(fan_in, fan_out, data).expect("positive dimensions")
}

/// Sinusoidal position table, one row per position.
pub fn positional_encoding(positions: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; positions * d];
    for pos in 0..positions {
        for i in 0..d {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 * rate;
            out[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(format!("{name}.w"), xavier(rng, fan_in, fan_out), false);
        let bias = bias.then(|| {
            store.add(
                format!("{name}.b"),
                Tensor::zeros(&[fan_out]).expect("positive width"),
                false,
            )
        });
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(store, b);
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::filled(&[d], 1.0).expect("d > 0"), false),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[d]).expect("d > 0"), false),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm(x, gain, bias, LAYER_NORM_EPS)
    }
}

/// Multi-head attention with its own query, key, value and output projections.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionUnit {
    pub heads: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

impl AttentionUnit {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut R) -> Self {
        Self {
            heads,
            query: Linear::new(store, &format!("{name}.query"), d, d, true, rng),
            key: Linear::new(store, &format!("{name}.key"), d, d, true, rng),
            value: Linear::new(store, &format!("{name}.value"), d, d, true, rng),
            output: Linear::new(store, &format!("{name}.output"), d, d, true, rng),
        }
    }

    /// Query rows in groups of `query_group` attend to the matching group of `key_group` memory rows.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        queries: Var,
        memory: Var,
        query_group: usize,
        key_group: usize,
    ) -> Result<Var> {
        let q = self.query.forward(g, store, queries)?;
        let k = self.key.forward(g, store, memory)?;
        let v = self.value.forward(g, store, memory)?;
        let spec = AttentionSpec {
            heads: self.heads,
            query_group,
            key_group,
        };
        let a = g.attention(q, k, v, spec)?;
        self.output.forward(g, store, a)
    }

    /// Every query row attends to every memory row.
    pub fn dense(&self, g: &mut Graph, store: &ParamStore, queries: Var, memory: Var) -> Result<Var> {
        let n = g.rows_cols(queries).0;
        let m = g.rows_cols(memory).0;
        self.forward(g, store, queries, memory, n, m)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        [self.query, self.key, self.value, self.output]
            .iter()
            .flat_map(|l| std::iter::once(l.weight).chain(l.bias))
            .collect()
    }
}

/// Post-norm transformer encoder layer with a ReLU feed-forward block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransformerLayer {
    pub attention: AttentionUnit,
    pub norm1: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub norm2: LayerNorm,
}

impl TransformerLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        ff: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            attention: AttentionUnit::new(store, &format!("{name}.attn"), d, heads, rng),
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d),
            ff1: Linear::new(store, &format!("{name}.ff1"), d, ff, true, rng),
            ff2: Linear::new(store, &format!("{name}.ff2"), ff, d, true, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d),
        }
    }

    /// Self-attention within consecutive blocks of `group` rows.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, group: usize) -> Result<Var> {
        let a = self.attention.forward(g, store, x, x, group, group)?;
        let r = g.add(x, a)?;
        let h = self.norm1.forward(g, store, r)?;
        let f = self.ff1.forward(g, store, h)?;
        let f = g.relu(f)?;
        let f = self.ff2.forward(g, store, f)?;
        let r = g.add(h, f)?;
        self.norm2.forward(g, store, r)
    }
}

/// Stack of transformer layers applied to block-structured sequences.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransformerStack {
    pub layers: Vec<TransformerLayer>,
}

impl TransformerStack {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        layers: usize,
        d: usize,
        heads: usize,
        ff: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            layers: (0..layers)
                .map(|i| TransformerLayer::new(store, &format!("{name}.layer{i}"), d, heads, ff, rng))
                .collect(),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, mut x: Var, group: usize) -> Result<Var> {
        for layer in &self.layers {
            x = layer.forward(g, store, x, group)?;
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn positional_rows_differ() {
        let pe = positional_encoding(3, 8);
        assert_eq!(&pe[..8], &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert_ne!(&pe[8..16], &pe[16..24]);
    }

    #[test]
    fn xavier_within_limit() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = xavier(&mut rng, 10, 20);
        let limit = (6.0f64 / 30.0).sqrt();
        assert!(w.data().iter().all(|x| x.abs() <= limit));
    }

    #[test]
    fn transformer_keeps_shape_and_respects_groups() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let stack = TransformerStack::new(&mut store, "t", 2, 8, 2, 16, &mut rng);
        let data: Vec<f64> = (0..32).map(|i| (i as f64 * 0.37).sin()).collect();
        let run = |data: Vec<f64>| {
            let mut g = Graph::new();
            let x = g.constant(Tensor::matrix(4, 8, data).unwrap());
            let y = stack.forward(&mut g, &store, x, 2).unwrap();
            assert_eq!(g.shape(y), &[4, 8]);
            g.value(y).to_vec()
        };
        let base = run(data.clone());
        let mut changed = data;
        changed[31] += 1.0;
        let other = run(changed);
        assert_eq!(&base[..16], &other[..16]);
        assert_ne!(&base[16..], &other[16..]);
    }
}
