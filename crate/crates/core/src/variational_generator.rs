//! VAE over mel frames at 1/4 temporal resolution, with a conditional
//! volume-preserving flow as the prior and a Monte-Carlo KL term.

use mixtts_tensor::{ConvSpec, Graph, Matrix, ParamId, Scalar, Var};

use crate::config::VGConfig;
use crate::error::{Error, Result};
use crate::nn::{Conv, Init, LayerNorm, WaveNet};
use crate::N_MELS;

pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;
pub const LOG_SIGMA_MIN: f64 = -8.0;
pub const LOG_SIGMA_MAX: f64 = 8.0;

#[derive(Clone, Copy, Debug)]
pub struct PosteriorParams {
    pub mu: Var,
    pub log_sigma: Var,
}

/// Stride-4 conv → ReLU → LayerNorm → WaveNet → projection to `(mu, log_sigma)`.
#[derive(Clone, Debug)]
pub struct PosteriorEncoder {
    pub pre: Conv,
    pub norm: LayerNorm,
    pub cond: Conv,
    pub wn: WaveNet,
    pub proj: Conv,
}

/// Transposed conv (kernel = stride = 4) → ReLU → LayerNorm → WaveNet
/// conditioned on frame-level `H_L` → projection to 80 channels.
#[derive(Clone, Debug)]
pub struct VgDecoder {
    /// `16 × (4·C)`: one `C`-wide block per output frame.
    pub up_weight: ParamId,
    pub up_bias: ParamId,
    pub norm: LayerNorm,
    pub cond: Conv,
    pub wn: WaveNet,
    pub out: Conv,
}

/// Shift-only coupling on the second half of the latent channels.
#[derive(Clone, Debug)]
pub struct VpCoupling {
    pub pre: Conv,
    pub cond: Conv,
    pub wn: WaveNet,
    pub post: Conv,
}

#[derive(Clone, Debug)]
pub struct VariationalGenerator {
    pub config: VGConfig,
    pub encoder: PosteriorEncoder,
    pub decoder: VgDecoder,
    pub flow: Vec<VpCoupling>,
}

fn pointwise<F: Scalar>(init: &mut Init<'_, F>, name: &str, c_in: usize, c_out: usize) -> Conv {
    Conv::same(init, name, c_in, c_out, 1, 1)
}

fn zero_pointwise<F: Scalar>(init: &mut Init<'_, F>, name: &str, c_in: usize, c_out: usize) -> Conv {
    let w = init.zeros(&format!("{name}.w"), c_in, c_out);
    let b = init.zeros(&format!("{name}.b"), 1, c_out);
    Conv { w, b, spec: ConvSpec::same(1, 1) }
}

impl VariationalGenerator {
    pub fn new<F: Scalar>(init: &mut Init<'_, F>, config: &VGConfig, cond_dim: usize) -> Self {
        let c = config.channel_size;
        let l = config.latent_size;
        let s = config.temporal_stride;
        let enc_wn = WaveNet::new(init, "vg.enc.wn", c, config.encoder_kernel, config.encoder_layers);
        let encoder = PosteriorEncoder {
            pre: Conv::new(init, "vg.enc.pre", N_MELS, c, ConvSpec { kernel: 2 * s, dilation: 1, stride: s, padding: s / 2 }),
            norm: LayerNorm::new(init, "vg.enc.norm", c),
            cond: pointwise(init, "vg.enc.cond", cond_dim, enc_wn.cond_width()),
            proj: pointwise(init, "vg.enc.proj", c, 2 * l),
            wn: enc_wn,
        };
        let dec_wn = WaveNet::new(init, "vg.dec.wn", c, config.decoder_kernel, config.decoder_layers);
        let decoder = VgDecoder {
            up_weight: init.uniform("vg.dec.up.w", l, s * c, l),
            up_bias: init.uniform("vg.dec.up.b", 1, c, l),
            norm: LayerNorm::new(init, "vg.dec.norm", c),
            cond: pointwise(init, "vg.dec.cond", cond_dim, dec_wn.cond_width()),
            out: pointwise(init, "vg.dec.out", c, N_MELS),
            wn: dec_wn,
        };
        let vc = config.vp_flow_channel_size;
        let flow = (0..config.vp_flow_steps)
            .map(|i| {
                let name = format!("vp.step{i}");
                let wn = WaveNet::new(init, &format!("{name}.wn"), vc, config.vp_flow_conv1d_kernel, config.vp_flow_layers);
                VpCoupling {
                    pre: pointwise(init, &format!("{name}.pre"), l / 2, vc),
                    cond: pointwise(init, &format!("{name}.cond"), cond_dim, wn.cond_width()),
                    post: zero_pointwise(init, &format!("{name}.post"), vc, l / 2),
                    wn,
                }
            })
            .collect();
        Self { config: config.clone(), encoder, decoder, flow }
    }

    pub fn stride(&self) -> usize {
        self.config.temporal_stride
    }

    pub fn latent_size(&self) -> usize {
        self.config.latent_size
    }

    /// `(T/4)×16` posterior mean and clamped log standard deviation.
    pub fn encode_posterior<F: Scalar>(&self, g: &mut Graph<'_, F>, mel: Var, h_l: Var) -> Result<PosteriorParams> {
        let (t, ch) = g.shape(mel);
        if ch != N_MELS {
            return Err(Error::Shape(format!("mel has {ch} channels, expected {N_MELS}")));
        }
        if t % self.stride() != 0 || t == 0 {
            return Err(Error::Shape(format!("{t} frames is not a positive multiple of {}", self.stride())));
        }
        if g.shape(h_l).0 != t {
            return Err(Error::Shape(format!("H_L has {} rows for {t} mel frames", g.shape(h_l).0)));
        }
        let e = &self.encoder;
        let x = e.pre.forward(g, mel);
        let x = g.relu(x);
        let x = e.norm.forward(g, x);
        let cond = self.pool_condition(g, h_l);
        let cond = e.cond.forward(g, cond);
        let x = e.wn.forward(g, x, Some(cond));
        let stats = e.proj.forward(g, x);
        let l = self.latent_size();
        let mu = g.slice_cols(stats, 0, l);
        let ls = g.slice_cols(stats, l, l);
        let log_sigma = g.clamp(ls, F::c(LOG_SIGMA_MIN), F::c(LOG_SIGMA_MAX));
        Ok(PosteriorParams { mu, log_sigma })
    }

    /// `z = mu + exp(log_sigma) ⊙ noise`.
    pub fn reparameterize<F: Scalar>(&self, g: &mut Graph<'_, F>, params: PosteriorParams, noise: &Matrix<F>) -> Result<Var> {
        if g.shape(params.mu) != noise.shape() {
            return Err(Error::Shape(format!("noise {:?} vs posterior {:?}", noise.shape(), g.shape(params.mu))));
        }
        let sigma = g.exp(params.log_sigma);
        let eps = g.constant(noise.clone());
        let s = g.mul(sigma, eps);
        Ok(g.add(params.mu, s))
    }

    /// Coarse mel `T×80` from a `(T/4)×16` latent and `T×d` features.
    pub fn decode<F: Scalar>(&self, g: &mut Graph<'_, F>, z: Var, h_l: Var) -> Result<Var> {
        let (tz, l) = g.shape(z);
        let t = g.shape(h_l).0;
        let s = self.stride();
        if l != self.latent_size() || tz * s != t {
            return Err(Error::Shape(format!("latent {tz}x{l} does not match {t} frames at stride {s}")));
        }
        let d = &self.decoder;
        let c = self.config.channel_size;
        let w = g.param(d.up_weight);
        let up = g.matmul(z, w);
        let up = g.reshape(up, t, c);
        let b = g.param(d.up_bias);
        let x = g.add_row(up, b);
        let x = g.relu(x);
        let x = d.norm.forward(g, x);
        let cond = d.cond.forward(g, h_l);
        let x = d.wn.forward(g, x, Some(cond));
        Ok(d.out.forward(g, x))
    }

    /// `H_L` averaged over blocks of 4 frames, matching the latent length.
    pub fn pool_condition<F: Scalar>(&self, g: &mut Graph<'_, F>, h_l: Var) -> Var {
        g.pool_rows(h_l, self.stride())
    }

    fn coupling_shift<F: Scalar>(&self, g: &mut Graph<'_, F>, step: &VpCoupling, x0: Var, cond: Var) -> Var {
        let h = step.pre.forward(g, x0);
        let cp = step.cond.forward(g, cond);
        let h = step.wn.forward(g, h, Some(cp));
        step.post.forward(g, h)
    }

    fn flip_perm(&self) -> Vec<usize> {
        (0..self.latent_size()).rev().collect()
    }

    /// Posterior latent to the standard-normal side. `cond` is pooled `H_L`.
    pub fn vp_forward<F: Scalar>(&self, g: &mut Graph<'_, F>, z: Var, cond: Var) -> Var {
        let half = self.latent_size() / 2;
        let mut x = z;
        for step in &self.flow {
            let x0 = g.slice_cols(x, 0, half);
            let x1 = g.slice_cols(x, half, half);
            let m = self.coupling_shift(g, step, x0, cond);
            let x1 = g.add(x1, m);
            let y = g.concat_cols(&[x0, x1]);
            x = g.permute_cols(y, self.flip_perm());
        }
        x
    }

    pub fn vp_inverse<F: Scalar>(&self, g: &mut Graph<'_, F>, z0: Var, cond: Var) -> Var {
        let half = self.latent_size() / 2;
        let mut x = z0;
        for step in self.flow.iter().rev() {
            let y = g.permute_cols(x, self.flip_perm());
            let x0 = g.slice_cols(y, 0, half);
            let x1 = g.slice_cols(y, half, half);
            let m = self.coupling_shift(g, step, x0, cond);
            let x1 = g.sub(x1, m);
            x = g.concat_cols(&[x0, x1]);
        }
        x
    }

    /// `Σ log N(vp_forward(z); 0, I)`; the flow is volume preserving.
    pub fn prior_log_prob<F: Scalar>(&self, g: &mut Graph<'_, F>, z: Var, cond: Var) -> Var {
        let z0 = self.vp_forward(g, z, cond);
        standard_normal_log_prob(g, z0)
    }

    /// Posterior log-density of the reparameterized sample, summed.
    pub fn posterior_log_prob<F: Scalar>(&self, g: &mut Graph<'_, F>, params: PosteriorParams, noise: &Matrix<F>) -> Var {
        let n = noise.len() as f64;
        let e = g.constant(noise.map(|x| x * x * F::c(-0.5)));
        let se = g.sum(e);
        let sl = g.sum(params.log_sigma);
        let s = g.sub(se, sl);
        g.add_scalar(s, F::c(-HALF_LN_2PI * n))
    }

    /// Single-sample `log q(z|x,c) − log p(z|c)` summed over the latent, plus `z`.
    pub fn kl_estimate<F: Scalar>(&self, g: &mut Graph<'_, F>, params: PosteriorParams, cond: Var, noise: &Matrix<F>) -> Result<(Var, Var)> {
        let z = self.reparameterize(g, params, noise)?;
        let lq = self.posterior_log_prob(g, params, noise);
        let lp = self.prior_log_prob(g, z, cond);
        Ok((g.sub(lq, lp), z))
    }
}

/// `Σ (−½x² − ½ log 2π)` as a 1×1 value.
pub fn standard_normal_log_prob<F: Scalar>(g: &mut Graph<'_, F>, x: Var) -> Var {
    let n = g.value(x).len() as f64;
    let sq = g.square(x);
    let s = g.sum(sq);
    let s = g.scale(s, F::c(-0.5));
    g.add_scalar(s, F::c(-HALF_LN_2PI * n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use mixtts_tensor::ParamStore;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vg(cfg: &VGConfig, d: usize) -> (ParamStore<f64>, VariationalGenerator) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = VariationalGenerator::new(&mut Init::new(&mut store, &mut rng), cfg, d);
        (store, v)
    }

    fn randomize_flow(store: &mut ParamStore<f64>, v: &VariationalGenerator, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for s in &v.flow {
            let (r, c) = store.get(s.post.w).shape();
            *store.get_mut(s.post.w) = Matrix::randn(r, c, 0.3, &mut rng);
            *store.get_mut(s.post.b) = Matrix::randn(1, c, 0.3, &mut rng);
        }
    }

    #[test]
    fn shapes_and_positive_sigma() {
        let cfg = crate::ModelConfig::micro().variational_generator;
        let (store, v) = vg(&cfg, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::inference(&store);
        let mel = g.constant(Matrix::randn(16, 80, 1.0, &mut rng));
        let h = g.constant(Matrix::randn(16, 8, 1.0, &mut rng));
        let p = v.encode_posterior(&mut g, mel, h).unwrap();
        assert_eq!(g.shape(p.mu), (4, 4));
        assert!(g.value(p.log_sigma).as_slice().iter().all(|x| x.exp() > 0.0));
        let z = v.reparameterize(&mut g, p, &Matrix::zeros(4, 4)).unwrap();
        assert_eq!(g.value(z), g.value(p.mu));
        let out = v.decode(&mut g, z, h).unwrap();
        assert_eq!(g.shape(out), (16, 80));
        let bad = g.constant(Matrix::zeros(14, 80));
        let h14 = g.constant(Matrix::zeros(14, 8));
        assert!(matches!(v.encode_posterior(&mut g, bad, h14), Err(Error::Shape(_))));
        let z3 = g.constant(Matrix::zeros(3, 4));
        assert!(v.decode(&mut g, z3, h).is_err());
    }

    #[test]
    fn zero_init_flow_is_a_flip() {
        let cfg = crate::ModelConfig::micro().variational_generator;
        let (store, v) = vg(&cfg, 8);
        let mut g = Graph::inference(&store);
        let z = Matrix::<f64>::from_fn(3, 4, |r, c| (r * 4 + c) as f64);
        let zv = g.constant(z.clone());
        let cond = g.constant(Matrix::zeros(3, 8));
        let y = v.vp_forward(&mut g, zv, cond);
        // two steps: flip twice
        assert_eq!(g.value(y), &z);
    }

    #[test]
    fn inverse_undoes_forward() {
        let cfg = crate::ModelConfig::normal().variational_generator;
        let (mut store, v) = vg(&cfg, 16);
        randomize_flow(&mut store, &v, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut g = Graph::inference(&store);
        let z = g.constant(Matrix::randn(6, 16, 1.0, &mut rng));
        let cond = g.constant(Matrix::randn(6, 16, 1.0, &mut rng));
        let y = v.vp_forward(&mut g, z, cond);
        let back = v.vp_inverse(&mut g, y, cond);
        assert!(g.value(back).max_abs_diff(g.value(z)) < 1e-10);
        let lp = v.prior_log_prob(&mut g, back, cond);
        let direct = standard_normal_log_prob(&mut g, y);
        assert!((g.value(lp).item() - g.value(direct).item()).abs() < 1e-9);
    }

    #[test]
    fn standard_normal_density_at_zero() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::inference(&store);
        let z = g.constant(Matrix::zeros(1, 4));
        let lp = standard_normal_log_prob(&mut g, z);
        assert!((g.value(lp).item() + 3.675_754_132_818_691).abs() < 1e-12);
    }
}
