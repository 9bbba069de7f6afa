//! Numerical oracles, parameter accounting, duration metrics and plots.

use std::fmt;
use std::path::Path;

use image::{Rgb, RgbImage};
use mixtts_tensor::linalg::Lu;
use mixtts_tensor::{Graph, Matrix, ParamStore, Scalar};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::corpus::{PhonemeVocab, HOP, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::linguistic_encoder::build_w2p_mask;
use crate::model::{prefix, Model};
use crate::postnet::{sample_latent, PostNet};
use crate::synth::{synthesize, SynthesisRequest};
use crate::trainer::{loss_and_gradients, Batch, LossOptions, LossWeights};
use crate::variational_generator::{PosteriorParams, VariationalGenerator};

/// Trainable parameter counts per module.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamReport {
    pub linguistic_encoder: usize,
    pub duration_predictor: usize,
    pub vg_decoder: usize,
    pub vp_flow: usize,
    pub postnet: usize,
    /// Posterior encoder; used only in training, so left out of `total`.
    pub vg_encoder_excluded: usize,
    pub total: usize,
}

impl ParamReport {
    pub fn from_store<F: Scalar>(store: &ParamStore<F>) -> Self {
        let n = |p: &str| store.num_elements_with_prefix(p);
        let mut r = Self {
            linguistic_encoder: n(prefix::LINGUISTIC_ENCODER),
            duration_predictor: n(prefix::DURATION_PREDICTOR),
            vg_decoder: n(prefix::VG_DECODER),
            vp_flow: n(prefix::VP_FLOW),
            postnet: n(prefix::POSTNET),
            vg_encoder_excluded: n(prefix::VG_ENCODER),
            total: 0,
        };
        r.total = r.linguistic_encoder + r.duration_predictor + r.vg_decoder + r.vp_flow + r.postnet;
        debug_assert_eq!(r.total + r.vg_encoder_excluded, store.num_elements(), "a parameter escaped the module prefixes");
        r
    }

    pub fn all_parameters(&self) -> usize {
        self.total + self.vg_encoder_excluded
    }
}

impl fmt::Display for ParamReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let m = |n: usize| n as f64 / 1e6;
        writeln!(f, "linguistic_encoder  {:>11} ({:.2}M)", self.linguistic_encoder, m(self.linguistic_encoder))?;
        writeln!(f, "duration_predictor  {:>11} ({:.2}M)", self.duration_predictor, m(self.duration_predictor))?;
        writeln!(f, "vg_decoder          {:>11} ({:.2}M)", self.vg_decoder, m(self.vg_decoder))?;
        writeln!(f, "vp_flow             {:>11} ({:.2}M)", self.vp_flow, m(self.vp_flow))?;
        writeln!(f, "postnet             {:>11} ({:.2}M)", self.postnet, m(self.postnet))?;
        writeln!(f, "total               {:>11} ({:.2}M)", self.total, m(self.total))?;
        write!(f, "vg_encoder (excluded) {:>9} ({:.2}M)", self.vg_encoder_excluded, m(self.vg_encoder_excluded))
    }
}

/// Counts a freshly built model with the full phoneme inventory.
pub fn count_parameters(config: &ModelConfig) -> Result<ParamReport> {
    let model = Model::<f32>::new(config, PhonemeVocab::arpabet(), 0)?;
    Ok(ParamReport::from_store(&model.store))
}

/// `|a − n| / max(|a|, |n|, 1)`: relative once the values exceed one.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1.0)
}

/// Central-difference Jacobian of `f` at `x`, assembled column by column.
pub fn numerical_jacobian(f: impl Fn(&[f64]) -> Result<Vec<f64>>, x: &[f64], eps: f64) -> Result<Matrix<f64>> {
    let n = x.len();
    let y0 = f(x)?;
    let mut jac = Matrix::zeros(y0.len(), n);
    let mut xp = x.to_vec();
    for j in 0..n {
        xp[j] = x[j] + eps;
        let yp = f(&xp)?;
        xp[j] = x[j] - eps;
        let ym = f(&xp)?;
        xp[j] = x[j];
        for i in 0..y0.len() {
            jac[(i, j)] = (yp[i] - ym[i]) / (2.0 * eps);
        }
    }
    Ok(jac)
}

/// `log|det J|` of `f` at `x` from the numerical Jacobian.
pub fn numerical_logdet(f: impl Fn(&[f64]) -> Result<Vec<f64>>, x: &[f64], eps: f64) -> Result<f64> {
    let jac = numerical_jacobian(f, x, eps)?;
    if jac.rows() != jac.cols() {
        return Err(Error::Oracle(format!("map is {}→{} dimensional; log-det needs a square Jacobian", jac.cols(), jac.rows())));
    }
    let lu = Lu::new(&jac).map_err(|e| Error::Oracle(format!("Jacobian is singular: {e}")))?;
    let cond = lu.pivot_ratio();
    if !(cond < 1e12) {
        return Err(Error::Oracle(format!("Jacobian is numerically singular (pivot ratio {cond:.3e})")));
    }
    Ok(lu.sign_log_det().1)
}

/// Closed-form `KL(N(mu1, sigma1²) ‖ N(mu2, sigma2²))` for diagonal Gaussians.
pub fn gaussian_kl_oracle(mu1: &[f64], sigma1: &[f64], mu2: &[f64], sigma2: &[f64]) -> Result<f64> {
    let n = mu1.len();
    if sigma1.len() != n || mu2.len() != n || sigma2.len() != n {
        return Err(Error::Oracle("KL oracle arguments differ in length".into()));
    }
    if let Some(s) = sigma1.iter().chain(sigma2).find(|&&s| !(s > 0.0 && s.is_finite())) {
        return Err(Error::Oracle(format!("standard deviations must be positive, got {s}")));
    }
    Ok((0..n)
        .map(|i| {
            let (s1, s2) = (sigma1[i], sigma2[i]);
            (s2 / s1).ln() + (s1 * s1 + (mu1[i] - mu2[i]).powi(2)) / (2.0 * s2 * s2) - 0.5
        })
        .sum())
}

/// Mean of the single-sample estimator used in training, over `samples`
/// draws of `z ~ N(mu, sigma²)` against the VG prior with a zero condition.
pub fn monte_carlo_kl<F: Scalar>(
    vg: &VariationalGenerator,
    store: &ParamStore<F>,
    cond_dim: usize,
    mu: &[f64],
    sigma: &[f64],
    samples: usize,
    seed: u64,
) -> Result<f64> {
    let l = vg.latent_size();
    if mu.len() != l || sigma.len() != l {
        return Err(Error::Oracle(format!("expected {l} latent dimensions")));
    }
    let mut g = Graph::inference(store);
    let mu_m = g.constant(Matrix::from_fn(samples, l, |_, c| F::c(mu[c])));
    let ls = g.constant(Matrix::from_fn(samples, l, |_, c| F::c(sigma[c].ln())));
    let cond = g.constant(Matrix::zeros(samples, cond_dim));
    let noise = sample_latent::<F>(samples, l, 1.0, seed);
    let (kl, _) = vg.kl_estimate(&mut g, PosteriorParams { mu: mu_m, log_sigma: ls }, cond, &noise)?;
    Ok(g.value(kl).item().f64() / samples as f64)
}

/// Frames to milliseconds at the model's hop size.
pub fn frames_to_ms(frames: f64) -> f64 {
    frames * HOP as f64 / SAMPLE_RATE as f64 * 1000.0
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DurationErrorReport {
    /// Mean absolute word-duration error in milliseconds.
    pub word_level_mae_ms: f64,
    /// Mean absolute utterance-duration error in seconds.
    pub sentence_level_mae_s: f64,
}

/// Word and sentence duration errors over utterances of word durations in frames.
pub fn duration_error(predicted: &[Vec<usize>], ground_truth: &[Vec<usize>]) -> Result<DurationErrorReport> {
    if predicted.len() != ground_truth.len() || predicted.is_empty() {
        return Err(Error::Duration(format!("{} predicted vs {} reference utterances", predicted.len(), ground_truth.len())));
    }
    let (mut word_err, mut words, mut sent_err) = (0.0, 0usize, 0.0);
    for (i, (p, t)) in predicted.iter().zip(ground_truth).enumerate() {
        if p.len() != t.len() {
            return Err(Error::Duration(format!("utterance {i}: {} predicted vs {} reference words", p.len(), t.len())));
        }
        word_err += p.iter().zip(t).map(|(&a, &b)| (a as f64 - b as f64).abs()).sum::<f64>();
        words += p.len();
        let (sp, st): (usize, usize) = (p.iter().sum(), t.iter().sum());
        sent_err += (sp as f64 - st as f64).abs();
    }
    Ok(DurationErrorReport {
        word_level_mae_ms: if words == 0 { 0.0 } else { frames_to_ms(word_err / words as f64) },
        sentence_level_mae_s: frames_to_ms(sent_err / predicted.len() as f64) / 1000.0,
    })
}

const COLORMAP: [[u8; 3]; 5] = [[68, 1, 84], [59, 82, 139], [33, 145, 140], [94, 201, 98], [253, 231, 37]];

/// Fixed perceptual colormap on `[0, 1]`; out-of-range values are clamped.
pub fn colormap(v: f64) -> [u8; 3] {
    let v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
    let x = v * (COLORMAP.len() - 1) as f64;
    let i = (x.floor() as usize).min(COLORMAP.len() - 2);
    let t = x - i as f64;
    let (a, b) = (COLORMAP[i], COLORMAP[i + 1]);
    std::array::from_fn(|k| (a[k] as f64 + t * (b[k] as f64 - a[k] as f64)).round() as u8)
}

/// Colour of cells outside a frame's own word.
pub const MASKED: [u8; 3] = [0, 0, 0];
pub const PIXELS_PER_CELL: u32 = 4;

fn check_finite(m: &Matrix<f32>) -> Result<()> {
    if m.all_finite() {
        Ok(())
    } else {
        Err(Error::Image("cannot plot a matrix with non-finite values".into()))
    }
}

/// Frames run left to right, phonemes bottom to top. Weights are drawn on
/// their absolute `[0, 1]` scale; cells outside the frame's word are black.
pub fn attention_image(attention: &Matrix<f32>, word_ids: &[usize], frame_word_ids: &[usize]) -> Result<RgbImage> {
    check_finite(attention)?;
    let (t, p) = (attention.rows(), attention.cols());
    if word_ids.len() != p || frame_word_ids.len() != t {
        return Err(Error::Shape(format!("attention is {t}x{p} but word structure is {}x{}", frame_word_ids.len(), word_ids.len())));
    }
    let mask = build_w2p_mask(word_ids, frame_word_ids);
    let s = PIXELS_PER_CELL;
    Ok(RgbImage::from_fn(t as u32 * s, p as u32 * s, |x, y| {
        let (f, ph) = ((x / s) as usize, p - 1 - (y / s) as usize);
        Rgb(if mask[f * p + ph] { colormap(attention[(f, ph)] as f64) } else { MASKED })
    }))
}

pub fn plot_attention(attention: &Matrix<f32>, word_ids: &[usize], frame_word_ids: &[usize], path: impl AsRef<Path>) -> Result<()> {
    save_png(&attention_image(attention, word_ids, frame_word_ids)?, path.as_ref())
}

/// Frames left to right, low mel bins at the bottom, scaled to the data range.
pub fn mel_image(mel: &Matrix<f32>) -> Result<RgbImage> {
    check_finite(mel)?;
    let (t, c) = (mel.rows(), mel.cols());
    let (lo, hi) = mel.as_slice().iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if hi > lo { (hi - lo) as f64 } else { 1.0 };
    let s = PIXELS_PER_CELL;
    Ok(RgbImage::from_fn(t as u32 * s, c as u32 * s, |x, y| {
        let (f, ch) = ((x / s) as usize, c - 1 - (y / s) as usize);
        Rgb(colormap((mel[(f, ch)] - lo) as f64 / span))
    }))
}

pub fn plot_mel(mel: &Matrix<f32>, path: impl AsRef<Path>) -> Result<()> {
    save_png(&mel_image(mel)?, path.as_ref())
}

fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png).map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

/// Adds `N(0, std²)` noise to every parameter whose name starts with `prefix`.
pub fn jitter_parameters<F: Scalar>(store: &mut ParamStore<F>, prefix: &str, std: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = store.iter().filter(|(_, p)| p.name.starts_with(prefix)).map(|(id, _)| id).collect();
    for id in ids {
        let m = store.get_mut(id);
        let noise = Matrix::<F>::randn(m.rows(), m.cols(), std, &mut rng);
        m.add_assign(&noise);
    }
}

/// Analytic post-net log-determinant and its numerical counterpart at `(mel, cond)`.
pub fn postnet_logdet_pair(postnet: &PostNet, store: &ParamStore<f64>, mel: &Matrix<f64>, cond: &Matrix<f64>, eps: f64) -> Result<(f64, f64)> {
    let analytic = {
        let mut g = Graph::inference(store);
        let x = g.constant(mel.clone());
        let c = g.constant(cond.clone());
        let out = postnet.forward(&mut g, x, c)?;
        g.value(out.log_det).item()
    };
    let (t, ch) = (mel.rows(), mel.cols());
    let numeric = numerical_logdet(
        |v| {
            let mut g = Graph::inference(store);
            let x = g.constant(Matrix::from_vec(t, ch, v.to_vec()));
            let c = g.constant(cond.clone());
            let out = postnet.forward(&mut g, x, c)?;
            Ok(g.value(out.z).as_slice().to_vec())
        },
        mel.as_slice(),
        eps,
    )?;
    Ok((analytic, numeric))
}

/// Numerical `log|det|` of the VP flow at `z`; zero for a volume-preserving map.
pub fn vp_flow_logdet(vg: &VariationalGenerator, store: &ParamStore<f64>, z: &Matrix<f64>, cond: &Matrix<f64>, eps: f64) -> Result<f64> {
    let (r, c) = (z.rows(), z.cols());
    numerical_logdet(
        |v| {
            let mut g = Graph::inference(store);
            let x = g.constant(Matrix::from_vec(r, c, v.to_vec()));
            let cv = g.constant(cond.clone());
            let y = vg.vp_forward(&mut g, x, cv);
            Ok(g.value(y).as_slice().to_vec())
        },
        z.as_slice(),
        eps,
    )
}

/// Max-abs error of post-net `inverse(forward(x))` and VP `inverse(forward(z))`.
pub fn round_trip_errors<F: Scalar>(model: &Model<F>, frames: usize, seed: u64) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = model.hidden_size();
    let mut g = Graph::inference(&model.store);
    let mel_m = Matrix::<F>::randn(frames, model.postnet.channels, 1.0, &mut rng);
    let mel = g.constant(mel_m.clone());
    let cond = g.constant(Matrix::randn(frames, model.postnet.cond_dim, 1.0, &mut rng));
    let out = model.postnet.forward(&mut g, mel, cond)?;
    let back = model.postnet.inverse(&mut g, out.z, cond)?;
    let pn = g.value(back).max_abs_diff(&mel_m).f64();

    let rows = frames / model.vg.stride();
    let z_m = Matrix::<F>::randn(rows, model.vg.latent_size(), 1.0, &mut rng);
    let z = g.constant(z_m.clone());
    let vc = g.constant(Matrix::randn(rows, d, 1.0, &mut rng));
    let z0 = model.vg.vp_forward(&mut g, z, vc);
    let zb = model.vg.vp_inverse(&mut g, z0, vc);
    let vp = g.value(zb).max_abs_diff(&z_m).f64();
    Ok((pn, vp))
}

/// Which loss term a gradient check differentiates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossTerm {
    Duration,
    Generator,
    Kl,
    PostNet,
}

impl LossTerm {
    pub const ALL: [LossTerm; 4] = [LossTerm::Duration, LossTerm::Generator, LossTerm::Kl, LossTerm::PostNet];

    fn weights(self) -> LossWeights {
        let mut w = LossWeights { dur: 0.0, vg: 0.0, kl: 0.0, pn: 0.0 };
        match self {
            LossTerm::Duration => w.dur = 1.0,
            LossTerm::Generator => w.vg = 1.0,
            LossTerm::Kl => w.kl = 1.0,
            LossTerm::PostNet => w.pn = 1.0,
        }
        w
    }
}

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub term: LossTerm,
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheck {
    /// `|a − n| / max(|a|, |n|, floor)`.
    pub fn rel_err(&self, floor: f64) -> f64 {
        (self.analytic - self.numeric).abs() / self.analytic.abs().max(self.numeric.abs()).max(floor)
    }
}

/// Compares backpropagated and central-difference gradients of each loss
/// term at `per_term` randomly chosen parameter entries. The post-net
/// condition is cut from the graph, so post-net checks only sample post-net
/// parameters.
pub fn gradient_check(model: &Model<f64>, batch: &Batch, per_term: usize, eps: f64, seed: u64) -> Result<Vec<GradCheck>> {
    let opts = LossOptions { noise_seed: seed, kl_weight: 1.0, dropout_seed: None };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for term in LossTerm::ALL {
        let w = term.weights();
        let (_, grads) = loss_and_gradients(model, batch, &opts, Some(w))?;
        let grads = grads.expect("gradients requested");
        let candidates: Vec<_> = model
            .store
            .iter()
            .filter(|(id, p)| {
                (term != LossTerm::PostNet || p.name.starts_with(prefix::POSTNET))
                    && grads.param(*id).is_some_and(|g| g.as_slice().iter().any(|v| *v != 0.0))
            })
            .map(|(id, _)| id)
            .collect();
        if candidates.is_empty() {
            return Err(Error::Oracle(format!("{term:?} has no parameter with a gradient")));
        }
        let objective = |store: ParamStore<f64>| -> Result<f64> {
            let m = Model { store, ..model.clone() };
            let (lb, _) = loss_and_gradients(&m, batch, &opts, None)?;
            Ok(w.dur * lb.l_dur + w.vg * lb.l_vg + w.kl * lb.l_kl + w.pn * lb.l_pn)
        };
        for _ in 0..per_term {
            let id = candidates[rng.gen_range(0..candidates.len())];
            let g = grads.param(id).unwrap();
            let nz: Vec<usize> = (0..g.len()).filter(|&k| g.as_slice()[k] != 0.0).collect();
            let k = nz[rng.gen_range(0..nz.len())];
            let mut plus = model.store.clone();
            plus.get_mut(id).as_mut_slice()[k] += eps;
            let mut minus = model.store.clone();
            minus.get_mut(id).as_mut_slice()[k] -= eps;
            let numeric = (objective(plus)? - objective(minus)?) / (2.0 * eps);
            out.push(GradCheck { term, param: model.store.name(id).to_string(), index: k, analytic: g.as_slice()[k], numeric });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    fn push(&mut self, name: &str, value: f64, tolerance: f64) {
        self.checks.push(CheckResult { name: name.into(), value, tolerance, passed: value.is_finite() && value <= tolerance });
    }

    fn fail(&mut self, name: &str, err: Error) {
        eprintln!("{name}: {err}");
        self.checks.push(CheckResult { name: name.into(), value: f64::NAN, tolerance: 0.0, passed: false });
    }

    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(f, "{} {} value={:.3e} tolerance={:.1e}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.value, c.tolerance)?;
        }
        write!(f, "{}/{} checks passed", self.checks.iter().filter(|c| c.passed).count(), self.checks.len())
    }
}

/// Oracle suite for a loaded model: analytic vs numerical flow log-dets,
/// VP-flow volume, round trips, the KL oracle, attention masking and
/// synthesis determinism.
pub fn verify_model<F: Scalar>(model: &Model<F>, seed: u64) -> VerifyReport {
    let mut report = VerifyReport::default();
    let m64 = model.cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames = 4;
    let eps = 1e-5;

    let mel = Matrix::<f64>::randn(frames, m64.postnet.channels, 1.0, &mut rng);
    let cond = Matrix::<f64>::randn(frames, m64.postnet.cond_dim, 1.0, &mut rng);
    match postnet_logdet_pair(&m64.postnet, &m64.store, &mel, &cond, eps) {
        Ok((a, n)) => report.push("postnet_logdet_vs_numerical", rel_err(a, n), 1e-3),
        Err(e) => report.fail("postnet_logdet_vs_numerical", e),
    }

    let z = Matrix::<f64>::randn(frames / m64.vg.stride(), m64.vg.latent_size(), 1.0, &mut rng);
    let vc = Matrix::<f64>::randn(z.rows(), m64.hidden_size(), 1.0, &mut rng);
    match vp_flow_logdet(&m64.vg, &m64.store, &z, &vc, eps) {
        Ok(ld) => report.push("vp_flow_unit_determinant", (ld.exp() - 1.0).abs(), 1e-3),
        Err(e) => report.fail("vp_flow_unit_determinant", e),
    }

    match round_trip_errors(model, 16, seed) {
        Ok((pn, vp)) => {
            report.push("postnet_round_trip", pn, 1e-3);
            report.push("vp_flow_round_trip", vp, 1e-3);
        }
        Err(e) => report.fail("round_trips", e),
    }

    // the estimator path with an identity-flow prior against the closed form
    let l = m64.vg.latent_size();
    let mut cfg = m64.config.variational_generator.clone();
    cfg.vp_flow_steps = 0;
    let mut store = ParamStore::<f64>::new();
    let mut r2 = ChaCha8Rng::seed_from_u64(seed);
    let vg0 = VariationalGenerator::new(&mut crate::nn::Init::new(&mut store, &mut r2), &cfg, m64.hidden_size());
    let mu: Vec<f64> = (0..l).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let sigma: Vec<f64> = (0..l).map(|_| rng.gen_range(-0.5f64..0.5).exp()).collect();
    let closed = gaussian_kl_oracle(&mu, &sigma, &vec![0.0; l], &vec![1.0; l]);
    match (closed, monte_carlo_kl(&vg0, &store, m64.hidden_size(), &mu, &sigma, 10_000, seed)) {
        (Ok(c), Ok(mc)) => report.push("kl_monte_carlo_vs_closed_form", (mc - c).abs() / c.abs().max(1e-12), 0.02),
        (Err(e), _) | (_, Err(e)) => report.fail("kl_monte_carlo_vs_closed_form", e),
    }

    let text = probe_text(&model.vocab);
    let req = SynthesisRequest::new(text, seed);
    match (synthesize(model, &req), synthesize(model, &req)) {
        (Ok(a), Ok(b)) => {
            let outside = a
                .frame_word_ids
                .iter()
                .enumerate()
                .flat_map(|(f, &w)| a.word_ids.iter().enumerate().filter(move |(_, &pw)| pw != w).map(move |(p, _)| (f, p)))
                .map(|(f, p)| a.attention[(f, p)].abs() as f64)
                .fold(0.0, f64::max);
            report.push("attention_outside_word_mask", outside, 0.0);
            report.push("synthesis_determinism", a.mel.frames.max_abs_diff(&b.mel.frames) as f64, 0.0);
            let t: usize = a.used_word_durations.iter().sum();
            report.push("frame_count_law", (t as f64 - a.mel.n_frames() as f64).abs() + (t % model.vg.stride()) as f64, 0.0);
        }
        (Err(e), _) | (_, Err(e)) => report.fail("synthesis", e),
    }
    report
}

/// Three short words drawn from the vocabulary, with a silence in the middle.
fn probe_text(vocab: &PhonemeVocab) -> String {
    let sym: Vec<&str> = vocab.symbols().iter().skip(2).map(String::as_str).collect();
    let pick = |i: usize| sym[i % sym.len()];
    format!("{} {} | SIL | {} {} {}", pick(0), pick(3), pick(1), pick(5), pick(2))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logdet_closed_forms() {
        let id = numerical_logdet(|v| Ok(v.to_vec()), &[0.3, -1.0, 2.0], 1e-3).unwrap();
        assert!(id.abs() < 1e-12);
        let sc = numerical_logdet(|v| Ok(v.iter().map(|x| 2.0 * x).collect()), &[0.3, -1.0, 2.0], 1e-3).unwrap();
        assert!((sc - 3.0 * 2f64.ln()).abs() < 1e-9);
        assert!(matches!(numerical_logdet(|v| Ok(vec![v[0], v[0]]), &[1.0, 2.0], 1e-3), Err(Error::Oracle(_))));
    }

    #[test]
    fn kl_closed_forms() {
        assert_eq!(gaussian_kl_oracle(&[0.4], &[1.3], &[0.4], &[1.3]).unwrap(), 0.0);
        assert!((gaussian_kl_oracle(&[1.0], &[1.0], &[0.0], &[1.0]).unwrap() - 0.5).abs() < 1e-15);
        assert!(gaussian_kl_oracle(&[0.0], &[0.0], &[0.0], &[1.0]).is_err());
    }

    #[test]
    fn duration_metric() {
        let r = duration_error(&[vec![3, 4]], &[vec![3, 4]]).unwrap();
        assert_eq!((r.word_level_mae_ms, r.sentence_level_mae_s), (0.0, 0.0));
        let r = duration_error(&[vec![20]], &[vec![10]]).unwrap();
        assert!((r.word_level_mae_ms - 10.0 * 256.0 / 22050.0 * 1000.0).abs() < 1e-9);
        assert!((r.word_level_mae_ms - 116.1).abs() < 0.05);
        assert!(duration_error(&[vec![1, 2]], &[vec![1]]).is_err());
    }

    #[test]
    fn colormap_endpoints() {
        assert_eq!(colormap(0.0), COLORMAP[0]);
        assert_eq!(colormap(1.0), COLORMAP[4]);
        assert_eq!(colormap(f64::NAN), COLORMAP[0]);
        assert_ne!(colormap(0.0), MASKED);
    }

    #[test]
    fn one_hot_attention_has_one_bright_cell_per_row() {
        let att = Matrix::from_fn(3, 3, |f, p| if f == p { 1.0f32 } else { 0.0 });
        let img = attention_image(&att, &[0, 1, 2], &[0, 1, 2]).unwrap();
        let s = PIXELS_PER_CELL;
        for f in 0..3u32 {
            let bright = (0..3u32).filter(|&py| img.get_pixel(f * s, py * s).0 == COLORMAP[4]).count();
            assert_eq!(bright, 1);
        }
    }
}
