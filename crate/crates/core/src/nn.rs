//! Layers shared by the encoder, the generator and the flows. Every layer holds
//! only [`ParamId`]s; values live in the model's [`ParamStore`].

use mixtts_tensor::{ConvSpec, Graph, Matrix, ParamId, ParamStore, Scalar, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Registers parameters under a name prefix with seeded initial values.
pub struct Init<'a, F: Scalar> {
    pub store: &'a mut ParamStore<F>,
    pub rng: &'a mut ChaCha8Rng,
}

impl<'a, F: Scalar> Init<'a, F> {
    pub fn new(store: &'a mut ParamStore<F>, rng: &'a mut ChaCha8Rng) -> Self {
        Self { store, rng }
    }

    /// Uniform in `±1/√fan_in`.
    pub fn uniform(&mut self, name: &str, rows: usize, cols: usize, fan_in: usize) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let m = Matrix::rand_uniform(rows, cols, bound, self.rng);
        self.store.add(name, m)
    }

    pub fn normal(&mut self, name: &str, rows: usize, cols: usize, std: f64) -> ParamId {
        let m = Matrix::randn(rows, cols, std, self.rng);
        self.store.add(name, m)
    }

    pub fn zeros(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        self.store.add(name, Matrix::zeros(rows, cols))
    }

    pub fn ones(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        self.store.add(name, Matrix::filled(rows, cols, F::one()))
    }

    pub fn value(&mut self, name: &str, m: Matrix<F>) -> ParamId {
        self.store.add(name, m)
    }
}

/// Source of dropout masks. `off()` disables dropout entirely (inference and oracles).
#[derive(Clone, Debug)]
pub struct Dropout(Option<ChaCha8Rng>);

impl Dropout {
    pub fn off() -> Self {
        Self(None)
    }

    pub fn seeded(seed: u64) -> Self {
        Self(Some(ChaCha8Rng::seed_from_u64(seed)))
    }

    pub fn is_active(&self) -> bool {
        self.0.is_some()
    }

    pub fn apply<F: Scalar>(&mut self, g: &mut Graph<'_, F>, x: Var, p: f64) -> Var {
        match &mut self.0 {
            Some(rng) if p > 0.0 => g.dropout(x, p, rng),
            _ => x,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<F: Scalar>(init: &mut Init<'_, F>, name: &str, d_in: usize, d_out: usize) -> Self {
        let w = init.uniform(&format!("{name}.w"), d_in, d_out, d_in);
        let b = init.uniform(&format!("{name}.b"), 1, d_out, d_in);
        Self { w, b }
    }

    pub fn zero<F: Scalar>(init: &mut Init<'_, F>, name: &str, d_in: usize, d_out: usize) -> Self {
        let w = init.zeros(&format!("{name}.w"), d_in, d_out);
        let b = init.zeros(&format!("{name}.b"), 1, d_out);
        Self { w, b }
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, x: Var) -> Var {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }
}

/// Convolution over time with bias. Weight layout `(kernel·C_in)×C_out`.
#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub spec: ConvSpec,
}

impl Conv {
    pub fn new<F: Scalar>(init: &mut Init<'_, F>, name: &str, c_in: usize, c_out: usize, spec: ConvSpec) -> Self {
        let fan_in = spec.kernel * c_in;
        let w = init.uniform(&format!("{name}.w"), fan_in, c_out, fan_in);
        let b = init.uniform(&format!("{name}.b"), 1, c_out, fan_in);
        Self { w, b, spec }
    }

    pub fn same<F: Scalar>(init: &mut Init<'_, F>, name: &str, c_in: usize, c_out: usize, kernel: usize, dilation: usize) -> Self {
        Self::new(init, name, c_in, c_out, ConvSpec::same(kernel, dilation))
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, x: Var) -> Var {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let y = g.conv1d(x, w, self.spec);
        g.add_row(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new<F: Scalar>(init: &mut Init<'_, F>, name: &str, dim: usize) -> Self {
        Self { gain: init.ones(&format!("{name}.gain"), 1, dim), bias: init.zeros(&format!("{name}.bias"), 1, dim) }
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, x: Var) -> Var {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        g.layer_norm(x, gain, bias, Self::EPS)
    }
}

/// Non-causal WaveNet stack with gated activations. The conditioning input is
/// supplied already projected to `2·C·L` channels, so the projection can live
/// outside a body that several flow steps share.
#[derive(Clone, Debug)]
pub struct WaveNet {
    pub in_layers: Vec<Conv>,
    pub res_skip: Vec<Conv>,
    pub channels: usize,
}

impl WaveNet {
    pub fn new<F: Scalar>(init: &mut Init<'_, F>, name: &str, channels: usize, kernel: usize, layers: usize) -> Self {
        let mut in_layers = Vec::with_capacity(layers);
        let mut res_skip = Vec::with_capacity(layers);
        for i in 0..layers {
            in_layers.push(Conv::same(init, &format!("{name}.in{i}"), channels, 2 * channels, kernel, 1));
            let out = if i + 1 < layers { 2 * channels } else { channels };
            res_skip.push(Conv::same(init, &format!("{name}.res_skip{i}"), channels, out, 1, 1));
        }
        Self { in_layers, res_skip, channels }
    }

    pub fn layers(&self) -> usize {
        self.in_layers.len()
    }

    /// Width of the conditioning projection this body expects.
    pub fn cond_width(&self) -> usize {
        2 * self.channels * self.layers()
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, mut x: Var, cond: Option<Var>) -> Var {
        let c = self.channels;
        let mut out: Option<Var> = None;
        for (i, (inl, rs)) in self.in_layers.iter().zip(&self.res_skip).enumerate() {
            let mut h = inl.forward(g, x);
            if let Some(cond) = cond {
                let ci = g.slice_cols(cond, 2 * c * i, 2 * c);
                h = g.add(h, ci);
            }
            let a = g.slice_cols(h, 0, c);
            let b = g.slice_cols(h, c, c);
            let a = g.tanh(a);
            let b = g.sigmoid(b);
            let acts = g.mul(a, b);
            let r = rs.forward(g, acts);
            let skip = if i + 1 < self.layers() {
                let res = g.slice_cols(r, 0, c);
                x = g.add(x, res);
                g.slice_cols(r, c, c)
            } else {
                r
            };
            out = Some(match out {
                Some(o) => g.add(o, skip),
                None => skip,
            });
        }
        out.expect("WaveNet has at least one layer")
    }
}

/// Multi-head self-attention with clipped relative-position embeddings on
/// keys and values; the embeddings are shared across heads.
#[derive(Clone, Debug)]
pub struct RelAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub rel_k: ParamId,
    pub rel_v: ParamId,
    pub heads: usize,
    pub window: usize,
}

impl RelAttention {
    pub fn new<F: Scalar>(init: &mut Init<'_, F>, name: &str, d: usize, heads: usize, window: usize) -> Self {
        let dk = d / heads;
        let std = (dk as f64).powf(-0.5);
        Self {
            q: Linear::new(init, &format!("{name}.q"), d, d),
            k: Linear::new(init, &format!("{name}.k"), d, d),
            v: Linear::new(init, &format!("{name}.v"), d, d),
            o: Linear::new(init, &format!("{name}.o"), d, d),
            rel_k: init.normal(&format!("{name}.rel_k"), 2 * window + 1, dk, std),
            rel_v: init.normal(&format!("{name}.rel_v"), 2 * window + 1, dk, std),
            heads,
            window,
        }
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, x: Var) -> Var {
        let d = g.shape(x).1;
        let dk = d / self.heads;
        let q = self.q.forward(g, x);
        let q = g.scale(q, F::c((dk as f64).powf(-0.5)));
        let k = self.k.forward(g, x);
        let v = self.v.forward(g, x);
        let rel_k = g.param(self.rel_k);
        let rel_v = g.param(self.rel_v);
        let rel_kt = g.transpose(rel_k);
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * dk, dk);
            let kh = g.slice_cols(k, h * dk, dk);
            let vh = g.slice_cols(v, h * dk, dk);
            let kt = g.transpose(kh);
            let scores = g.matmul(qh, kt);
            let rel = g.matmul(qh, rel_kt);
            let rel = g.rel_to_abs(rel, self.window);
            let scores = g.add(scores, rel);
            let attn = g.softmax_rows(scores, None);
            let out = g.matmul(attn, vh);
            let bins = g.abs_to_rel(attn, self.window);
            let rel_out = g.matmul(bins, rel_v);
            outs.push(g.add(out, rel_out));
        }
        let cat = g.concat_cols(&outs);
        self.o.forward(g, cat)
    }
}

/// Feed-forward Transformer block, post-norm: attention and a conv FFN, each
/// wrapped in dropout, residual and layer norm.
#[derive(Clone, Debug)]
pub struct FftBlock {
    pub attn: RelAttention,
    pub norm1: LayerNorm,
    pub conv: Conv,
    pub proj: Linear,
    pub norm2: LayerNorm,
    pub dropout: f64,
}

impl FftBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Scalar>(
        init: &mut Init<'_, F>,
        name: &str,
        d: usize,
        heads: usize,
        window: usize,
        kernel: usize,
        filter: usize,
        dropout: f64,
    ) -> Self {
        Self {
            attn: RelAttention::new(init, &format!("{name}.attn"), d, heads, window),
            norm1: LayerNorm::new(init, &format!("{name}.norm1"), d),
            conv: Conv::same(init, &format!("{name}.ffn_conv"), d, filter, kernel, 1),
            proj: Linear::new(init, &format!("{name}.ffn_proj"), filter, d),
            norm2: LayerNorm::new(init, &format!("{name}.norm2"), d),
            dropout,
        }
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, x: Var, drop: &mut Dropout) -> Var {
        let y = self.attn.forward(g, x);
        let y = drop.apply(g, y, self.dropout);
        let x = g.add(x, y);
        let x = self.norm1.forward(g, x);
        let y = self.conv.forward(g, x);
        let y = g.relu(y);
        let y = drop.apply(g, y, self.dropout);
        let y = self.proj.forward(g, y);
        let y = drop.apply(g, y, self.dropout);
        let x = g.add(x, y);
        self.norm2.forward(g, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (ParamStore<f64>, ChaCha8Rng) {
        (ParamStore::new(), ChaCha8Rng::seed_from_u64(0))
    }

    #[test]
    fn fft_block_counts_match_hand_arithmetic() {
        let (mut store, mut rng) = setup();
        let mut init = Init::new(&mut store, &mut rng);
        FftBlock::new(&mut init, "b", 192, 2, 16, 5, 768, 0.1);
        assert_eq!(store.num_elements(), 1_041_024);
    }

    #[test]
    fn wavenet_body_count() {
        let (mut store, mut rng) = setup();
        let mut init = Init::new(&mut store, &mut rng);
        let wn = WaveNet::new(&mut init, "wn", 192, 3, 3);
        assert_eq!(store.num_elements(), 849_984);
        assert_eq!(wn.cond_width(), 1152);
    }

    #[test]
    fn attention_preserves_shape_and_is_deterministic() {
        let (mut store, mut rng) = setup();
        let mut init = Init::new(&mut store, &mut rng);
        let blk = FftBlock::new(&mut init, "b", 8, 2, 2, 3, 16, 0.1);
        let x = Matrix::<f64>::randn(5, 8, 1.0, &mut rng);
        let run = || {
            let mut g = Graph::inference(&store);
            let xv = g.constant(x.clone());
            let y = blk.forward(&mut g, xv, &mut Dropout::off());
            g.value(y).clone()
        };
        let a = run();
        assert_eq!(a.shape(), (5, 8));
        assert_eq!(a, run());
    }
}
