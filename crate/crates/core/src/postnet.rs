//! Glow-style conditional flow over mel frames with grouped sharing of the
//! coupling networks. Each step is actnorm → invertible channel mixing →
//! affine coupling. Frames may first be folded into channels (`squeeze`).

use mixtts_tensor::linalg::{random_rotation, Lu};
use mixtts_tensor::{Graph, Matrix, ParamId, ParamStore, Scalar, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::PostNetConfig;
use crate::error::{Error, Result};
use crate::nn::{Conv, Init, WaveNet};
use crate::variational_generator::standard_normal_log_prob;

/// Offset inside the coupling scale `sigmoid(raw + 2) / sigmoid(2)`.
pub const SCALE_SHIFT: f64 = 2.0;

/// Contiguous block assignment of 1-based step `k` out of `K` to one of `N_g` groups.
pub fn group_index(k: usize, flow_steps: usize, shared_groups: usize) -> Result<usize> {
    if shared_groups == 0 || shared_groups > flow_steps {
        return Err(Error::Config(format!("shared_groups {shared_groups} must lie in 1..={flow_steps}")));
    }
    if k == 0 || k > flow_steps {
        return Err(Error::Config(format!("step {k} outside 1..={flow_steps}")));
    }
    Ok((k - 1) * shared_groups / flow_steps)
}

#[derive(Clone, Debug)]
pub struct FlowStep {
    pub actnorm_logs: ParamId,
    pub actnorm_bias: ParamId,
    pub mix: ParamId,
    pub start: Conv,
    /// Unshared conditional projection into the shared body.
    pub cond_proj: Conv,
    pub end: Conv,
    pub group: usize,
}

#[derive(Clone, Debug)]
pub struct PostNet {
    pub config: PostNetConfig,
    pub channels: usize,
    pub cond_dim: usize,
    pub steps: Vec<FlowStep>,
    /// One coupling body per group.
    pub bodies: Vec<WaveNet>,
    pub initialized: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct PnOutput {
    /// Latent in the original `T×channels` layout.
    pub z: Var,
    pub log_det: Var,
    /// `log N(z) + log_det`, summed over all elements.
    pub log_likelihood: Var,
}

impl PostNet {
    /// `channels` is normally 80; small values are for oracle toys.
    pub fn new<F: Scalar>(init: &mut Init<'_, F>, config: &PostNetConfig, channels: usize, cond_dim: usize) -> Result<Self> {
        let c = config;
        let sq = c.squeeze;
        let width = channels * sq;
        if width % 2 != 0 {
            return Err(Error::Config(format!("flow width {width} must be even")));
        }
        let bodies = (0..c.shared_groups)
            .map(|gi| WaveNet::new(init, &format!("pn.group{gi}.wn"), c.wavenet_channel_size, c.wavenet_kernel, c.wavenet_layers))
            .collect::<Vec<_>>();
        let cond_width = bodies[0].cond_width();
        let mut steps = Vec::with_capacity(c.flow_steps);
        for k in 1..=c.flow_steps {
            let group = group_index(k, c.flow_steps, c.shared_groups)?;
            let name = format!("pn.step{}", k - 1);
            let mix = random_rotation::<F, _>(width, &mut *init.rng);
            steps.push(FlowStep {
                actnorm_logs: init.zeros(&format!("{name}.actnorm.logs"), 1, width),
                actnorm_bias: init.zeros(&format!("{name}.actnorm.bias"), 1, width),
                mix: init.value(&format!("{name}.mix"), mix),
                start: Conv::same(init, &format!("{name}.start"), width / 2, c.wavenet_channel_size, 1, 1),
                cond_proj: Conv::same(init, &format!("{name}.cond_proj"), cond_dim * sq, cond_width, 1, 1),
                end: Conv {
                    w: init.zeros(&format!("{name}.end.w"), c.wavenet_channel_size, width),
                    b: init.zeros(&format!("{name}.end.b"), 1, width),
                    spec: mixtts_tensor::ConvSpec::same(1, 1),
                },
                group,
            });
        }
        Ok(Self { config: config.clone(), channels, cond_dim, steps, bodies, initialized: false })
    }

    pub fn width(&self) -> usize {
        self.channels * self.config.squeeze
    }

    /// Parameters of the coupling network used by a step (its group's body).
    pub fn coupling_params(&self, step: usize) -> Vec<ParamId> {
        let body = &self.bodies[self.steps[step].group];
        body.in_layers.iter().chain(&body.res_skip).flat_map(|c| [c.w, c.b]).collect()
    }

    fn squeeze<F: Scalar>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let (t, c) = g.shape(x);
        let s = self.config.squeeze;
        if t % s != 0 {
            return Err(Error::Shape(format!("{t} frames not divisible by squeeze {s}")));
        }
        Ok(if s == 1 { x } else { g.reshape(x, t / s, c * s) })
    }

    fn check_inputs<F: Scalar>(&self, g: &Graph<'_, F>, x: Var, cond: Var) -> Result<()> {
        let (t, c) = g.shape(x);
        let (tc, cc) = g.shape(cond);
        if c != self.channels || tc != t || cc != self.cond_dim {
            return Err(Error::Shape(format!(
                "post-net expects {}x{} input with {}x{} condition, got {t}x{c} and {tc}x{cc}",
                t, self.channels, t, self.cond_dim
            )));
        }
        Ok(())
    }

    /// Shift and log-scale for the second half, computed from the first half.
    fn coupling<F: Scalar>(&self, g: &mut Graph<'_, F>, step: &FlowStep, xa: Var, cond: Var) -> (Var, Var) {
        let half = self.width() / 2;
        let h = step.start.forward(g, xa);
        let cp = step.cond_proj.forward(g, cond);
        let h = self.bodies[step.group].forward(g, h, Some(cp));
        let out = step.end.forward(g, h);
        let shift = g.slice_cols(out, 0, half);
        let raw = g.slice_cols(out, half, half);
        let raw = g.add_scalar(raw, F::c(SCALE_SHIFT));
        let ls = g.log_sigmoid(raw);
        let ls = g.add_scalar(ls, F::c(-mixtts_tensor::log_sigmoid_scalar(SCALE_SHIFT)));
        (shift, ls)
    }

    /// One step on squeezed input; returns the output and its log-determinant.
    pub fn step_forward<F: Scalar>(&self, g: &mut Graph<'_, F>, k: usize, x: Var, cond: Var) -> Result<(Var, Var)> {
        let step = &self.steps[k];
        let t = g.shape(x).0;
        let half = self.width() / 2;
        let logs = g.param(step.actnorm_logs);
        let bias = g.param(step.actnorm_bias);
        let scale = g.exp(logs);
        let x = g.mul_row(x, scale);
        let x = g.add_row(x, bias);
        let an_ld = g.sum(logs);
        let an_ld = g.scale(an_ld, F::c(t as f64));

        let w = g.param(step.mix);
        let x = g.matmul(x, w);
        let mix_ld = g.log_abs_det(w).map_err(|_| Error::NonFinite { step: k, stage: "channel mixing is singular" })?;
        let mix_ld = g.scale(mix_ld, F::c(t as f64));

        let xa = g.slice_cols(x, 0, half);
        let xb = g.slice_cols(x, half, half);
        let (shift, ls) = self.coupling(g, step, xa, cond);
        let s = g.exp(ls);
        let xb = g.mul(xb, s);
        let xb = g.add(xb, shift);
        let y = g.concat_cols(&[xa, xb]);
        let cp_ld = g.sum(ls);

        let ld = g.add(an_ld, mix_ld);
        let ld = g.add(ld, cp_ld);
        if !g.value(y).all_finite() || !g.value(ld).all_finite() {
            return Err(Error::NonFinite { step: k, stage: "forward" });
        }
        Ok((y, ld))
    }

    /// Mel to latent with the exact log-likelihood.
    pub fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, mel: Var, cond: Var) -> Result<PnOutput> {
        self.check_inputs(g, mel, cond)?;
        let (t, c) = g.shape(mel);
        let mut x = self.squeeze(g, mel)?;
        let cond = self.squeeze(g, cond)?;
        let mut log_det = g.constant(Matrix::scalar(F::zero()));
        for k in 0..self.steps.len() {
            let (y, ld) = self.step_forward(g, k, x, cond)?;
            x = y;
            log_det = g.add(log_det, ld);
        }
        let z = g.reshape(x, t, c);
        let lp = standard_normal_log_prob(g, z);
        let log_likelihood = g.add(lp, log_det);
        Ok(PnOutput { z, log_det, log_likelihood })
    }

    /// Latent to mel; exact inverse of [`Self::forward`].
    pub fn inverse<F: Scalar>(&self, g: &mut Graph<'_, F>, z: Var, cond: Var) -> Result<Var> {
        self.check_inputs(g, z, cond)?;
        let (t, c) = g.shape(z);
        let half = self.width() / 2;
        let mut y = self.squeeze(g, z)?;
        let cond = self.squeeze(g, cond)?;
        for (k, step) in self.steps.iter().enumerate().rev() {
            let ya = g.slice_cols(y, 0, half);
            let yb = g.slice_cols(y, half, half);
            let (shift, ls) = self.coupling(g, step, ya, cond);
            let xb = g.sub(yb, shift);
            let inv_s = g.neg(ls);
            let inv_s = g.exp(inv_s);
            let xb = g.mul(xb, inv_s);
            let x = g.concat_cols(&[ya, xb]);

            let w_inv = Lu::new(g.store().get(step.mix))?.inverse();
            let w_inv = g.constant(w_inv);
            let x = g.matmul(x, w_inv);

            let bias = g.param(step.actnorm_bias);
            let nb = g.neg(bias);
            let x = g.add_row(x, nb);
            let logs = g.param(step.actnorm_logs);
            let nl = g.neg(logs);
            let inv = g.exp(nl);
            y = g.mul_row(x, inv);
            if !g.value(y).all_finite() {
                return Err(Error::NonFinite { step: k, stage: "inverse" });
            }
        }
        Ok(g.reshape(y, t, c))
    }

    /// Draws `z ~ N(0, temperature²)` from `seed` and inverts it.
    pub fn sample<F: Scalar>(&self, g: &mut Graph<'_, F>, cond: Var, temperature: f64, seed: u64) -> Result<Var> {
        let z = sample_latent::<F>(g.shape(cond).0, self.channels, temperature, seed);
        let z = g.constant(z);
        self.inverse(g, z, cond)
    }

    /// Sets each actnorm so its output has zero mean and unit variance per
    /// channel over `batch` (pairs of mel and condition). Allowed once.
    pub fn data_dependent_init<F: Scalar>(&mut self, store: &mut ParamStore<F>, batch: &[(Matrix<F>, Matrix<F>)]) -> Result<()> {
        if self.initialized {
            return Err(Error::AlreadyInitialized);
        }
        if batch.is_empty() {
            return Err(Error::Shape("data-dependent init needs at least one item".into()));
        }
        let mut acts: Vec<(Matrix<F>, Matrix<F>)> = Vec::with_capacity(batch.len());
        {
            let mut g = Graph::inference(store);
            for (mel, cond) in batch {
                let m = g.constant(mel.clone());
                let c = g.constant(cond.clone());
                self.check_inputs(&g, m, c)?;
                let m = self.squeeze(&mut g, m)?;
                let c = self.squeeze(&mut g, c)?;
                acts.push((g.value(m).clone(), g.value(c).clone()));
            }
        }
        let width = self.width();
        for k in 0..self.steps.len() {
            let mut sum = vec![0.0f64; width];
            let mut sq = vec![0.0f64; width];
            let mut n = 0usize;
            for (x, _) in &acts {
                for r in 0..x.rows() {
                    for (c, &v) in x.row(r).iter().enumerate() {
                        sum[c] += v.f64();
                        sq[c] += v.f64() * v.f64();
                    }
                    n += 1;
                }
            }
            let mut logs = Matrix::<F>::zeros(1, width);
            let mut bias = Matrix::<F>::zeros(1, width);
            for c in 0..width {
                let mean = sum[c] / n as f64;
                let std = (sq[c] / n as f64 - mean * mean).max(0.0).sqrt();
                let l = -(std + 1e-6).ln();
                logs[(0, c)] = F::c(l);
                bias[(0, c)] = F::c(-mean * l.exp());
            }
            *store.get_mut(self.steps[k].actnorm_logs) = logs;
            *store.get_mut(self.steps[k].actnorm_bias) = bias;
            let mut g = Graph::inference(store);
            for (x, c) in acts.iter_mut() {
                let xv = g.constant(x.clone());
                let cv = g.constant(c.clone());
                let (y, _) = self.step_forward(&mut g, k, xv, cv)?;
                *x = g.value(y).clone();
            }
        }
        self.initialized = true;
        Ok(())
    }
}

/// `rows×cols` i.i.d. `N(0, temperature²)` from a seeded ChaCha stream.
pub fn sample_latent<F: Scalar>(rows: usize, cols: usize, temperature: f64, seed: u64) -> Matrix<F> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_fn(rows, cols, |_, _| {
        let v: f64 = StandardNormal.sample(&mut rng);
        F::c(v * temperature)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn cfg(k: usize, ng: usize, sq: usize) -> PostNetConfig {
        PostNetConfig {
            wavenet_layers: 2,
            wavenet_kernel: 3,
            wavenet_channel_size: 6,
            flow_steps: k,
            shared_groups: ng,
            channels: 4,
            squeeze: sq,
            temperature: 0.8,
        }
    }

    fn build(c: &PostNetConfig, channels: usize, cond: usize, seed: u64) -> (ParamStore<f64>, PostNet) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pn = PostNet::new(&mut Init::new(&mut store, &mut rng), c, channels, cond).unwrap();
        (store, pn)
    }

    fn randomize(store: &mut ParamStore<f64>, pn: &PostNet, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for s in &pn.steps {
            for id in [s.end.w, s.end.b, s.actnorm_logs, s.actnorm_bias] {
                let (r, c) = store.get(id).shape();
                *store.get_mut(id) = Matrix::randn(r, c, 0.3, &mut rng);
            }
        }
    }

    #[test]
    fn group_assignment() {
        let g: Vec<usize> = (1..=12).map(|k| group_index(k, 12, 3).unwrap()).collect();
        assert_eq!(g, vec![0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2]);
        assert!((1..=12).all(|k| group_index(k, 12, 1).unwrap() == 0));
        assert!((1..=12).all(|k| group_index(k, 12, 12).unwrap() == k - 1));
        let odd: Vec<usize> = (1..=5).map(|k| group_index(k, 5, 2).unwrap()).collect();
        assert_eq!(odd, vec![0, 0, 0, 1, 1]);
        assert!(matches!(group_index(1, 4, 5), Err(Error::Config(_))));
    }

    #[test]
    fn identity_initialization() {
        let c = cfg(2, 1, 1);
        let (mut store, pn) = build(&c, 4, 3, 0);
        for s in &pn.steps {
            *store.get_mut(s.mix) = Matrix::identity(4);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mel = Matrix::<f64>::randn(6, 4, 1.0, &mut rng);
        let mut g = Graph::inference(&store);
        let m = g.constant(mel.clone());
        let cond = g.constant(Matrix::randn(6, 3, 1.0, &mut rng));
        let out = pn.forward(&mut g, m, cond).unwrap();
        assert!(g.value(out.z).max_abs_diff(&mel) < 1e-15);
        assert!(g.value(out.log_det).item().abs() < 1e-15);
        let zero = g.constant(Matrix::zeros(6, 4));
        let back = pn.inverse(&mut g, zero, cond).unwrap();
        assert!(g.value(back).as_slice().iter().all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn round_trip_and_live_condition() {
        for sq in [1, 2] {
            let c = cfg(4, 2, sq);
            let (mut store, pn) = build(&c, 4, 3, 2);
            randomize(&mut store, &pn, 5);
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let mut g = Graph::inference(&store);
            let m = g.constant(Matrix::randn(8, 4, 1.0, &mut rng));
            let cond = g.constant(Matrix::randn(8, 3, 1.0, &mut rng));
            let out = pn.forward(&mut g, m, cond).unwrap();
            let back = pn.inverse(&mut g, out.z, cond).unwrap();
            assert!(g.value(back).max_abs_diff(g.value(m)) < 1e-10);
            let cond2 = g.constant(Matrix::randn(8, 3, 1.0, &mut rng));
            let other = pn.inverse(&mut g, out.z, cond2).unwrap();
            assert!(g.value(other).max_abs_diff(g.value(m)) > 1e-6);
        }
    }

    #[test]
    fn groups_share_bodies_but_not_projections() {
        let c = cfg(6, 2, 1);
        let (_, pn) = build(&c, 4, 3, 0);
        assert_eq!(pn.bodies.len(), 2);
        assert_eq!(pn.coupling_params(0), pn.coupling_params(2));
        assert_ne!(pn.coupling_params(2), pn.coupling_params(3));
        assert_ne!(pn.steps[0].cond_proj.w, pn.steps[1].cond_proj.w);
    }

    #[test]
    fn sampling_statistics_and_zero_temperature() {
        let z: Matrix<f64> = sample_latent(1250, 80, 0.8, 11);
        let n = z.len() as f64;
        let mean = z.sum() / n;
        let std = (z.sq_norm() / n - mean * mean).sqrt();
        assert!((std - 0.8).abs() / 0.8 < 0.01, "std {std}");
        assert_eq!(sample_latent::<f64>(3, 4, 0.0, 1), Matrix::zeros(3, 4));

        let c = cfg(2, 1, 1);
        let (store, pn) = build(&c, 4, 3, 0);
        let mut g = Graph::inference(&store);
        let cond = g.constant(Matrix::filled(4, 3, 0.5));
        let a = pn.sample(&mut g, cond, 0.0, 1).unwrap();
        let zero = g.constant(Matrix::zeros(4, 4));
        let b = pn.inverse(&mut g, zero, cond).unwrap();
        assert_eq!(g.value(a), g.value(b));
    }

    #[test]
    fn data_dependent_init_normalizes_once() {
        let c = cfg(3, 1, 2);
        let (mut store, mut pn) = build(&c, 4, 3, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let batch: Vec<(Matrix<f64>, Matrix<f64>)> = (0..3)
            .map(|i| {
                let t = 4 + 2 * i;
                let m = Matrix::from_fn(t, 4, |_, c| 2.0 + c as f64 + 3.0 * rng.gen_range(-1.0..1.0));
                (m, Matrix::randn(t, 3, 1.0, &mut rng))
            })
            .collect();
        // before init actnorm is the identity
        assert!(store.get(pn.steps[0].actnorm_logs).as_slice().iter().all(|&v| v == 0.0));
        pn.data_dependent_init(&mut store, &batch).unwrap();
        let mut g = Graph::inference(&store);
        let mut rows = Vec::new();
        for (m, _) in &batch {
            let mv = g.constant(m.clone());
            let sq = pn.squeeze(&mut g, mv).unwrap();
            let logs = g.param(pn.steps[0].actnorm_logs);
            let bias = g.param(pn.steps[0].actnorm_bias);
            let e = g.exp(logs);
            let y = g.mul_row(sq, e);
            let y = g.add_row(y, bias);
            rows.push(g.value(y).clone());
        }
        let all = Matrix::concat_rows(&rows.iter().collect::<Vec<_>>());
        let n = all.rows() as f64;
        for (c, s) in all.col_sums().as_slice().iter().enumerate() {
            assert!((s / n).abs() < 1e-4, "channel {c} mean {}", s / n);
            let var: f64 = (0..all.rows()).map(|r| all[(r, c)].powi(2)).sum::<f64>() / n;
            assert!((var - 1.0).abs() < 1e-4);
        }
        assert!(matches!(pn.data_dependent_init(&mut store, &batch), Err(Error::AlreadyInitialized)));
    }
}
