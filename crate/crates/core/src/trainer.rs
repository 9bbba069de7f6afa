//! Losses, learning-rate schedule, padded batches and the training loop.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use mixtts_tensor::{Adam, Gradients, Graph, Matrix, Scalar, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::checkpoint::save_checkpoint;
use crate::config::{ModelConfig, TrainConfig};
use crate::corpus::{load_utterances, DatasetManifest, MelStats, PhonemeSequence, Utterance};
use crate::error::{io_err, Error, Result};
use crate::model::Model;
use crate::nn::Dropout;
use crate::N_MELS;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub l_dur: f64,
    pub l_vg: f64,
    pub l_kl: f64,
    pub l_pn: f64,
    pub total: f64,
    pub kl_weight: f64,
}

impl LossBreakdown {
    pub fn from_parts(l_dur: f64, l_vg: f64, l_kl: f64, l_pn: f64, kl_weight: f64) -> Self {
        Self { l_dur, l_vg, l_kl, l_pn, total: l_dur + l_vg + kl_weight * l_kl + l_pn, kl_weight }
    }

    fn check_finite(&self) -> Result<()> {
        for (term, v) in [("l_dur", self.l_dur), ("l_vg", self.l_vg), ("l_kl", self.l_kl), ("l_pn", self.l_pn)] {
            if !v.is_finite() {
                return Err(Error::NanLoss { term });
            }
        }
        Ok(())
    }
}

impl fmt::Display for LossBreakdown {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "total={:.6} l_dur={:.6} l_vg={:.6} l_kl={:.6} l_pn={:.6} kl_weight={:.4}",
            self.total, self.l_dur, self.l_vg, self.l_kl, self.l_pn, self.kl_weight
        )
    }
}

/// Inverse-square-root schedule with linear warmup, peaking at `step == warmup`.
pub fn lr_at_step(step: u64, warmup: u64, d_model: usize) -> f64 {
    let s = step.max(1) as f64;
    let w = warmup.max(1) as f64;
    (d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5))
}

/// Linear ramp from 0 to 1 over `anneal` steps.
pub fn kl_weight_at_step(step: u64, anneal: u64) -> f64 {
    if anneal == 0 {
        1.0
    } else {
        (step as f64 / anneal as f64).min(1.0)
    }
}

/// Utterances padded to common lengths, with the true lengths as masks.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub ids: Vec<String>,
    /// `B × P_max`, padded with token 0.
    pub tokens: Vec<Vec<usize>>,
    pub word_ids: Vec<Vec<usize>>,
    pub phoneme_lengths: Vec<usize>,
    /// `B × W_max`, padded with 0 frames.
    pub word_durations: Vec<Vec<usize>>,
    pub word_counts: Vec<usize>,
    /// Each `T_max × 80`, padded with zeros.
    pub mels: Vec<Matrix<f32>>,
    pub frame_lengths: Vec<usize>,
}

/// Unpadded view of one batch entry.
pub struct BatchItem<'a> {
    pub seq: PhonemeSequence,
    pub mel: &'a Matrix<f32>,
    pub frames: usize,
    pub word_durations: &'a [usize],
}

impl Batch {
    pub fn from_utterances(utts: &[&Utterance]) -> Self {
        let p_max = utts.iter().map(|u| u.seq.len()).max().unwrap_or(0);
        let w_max = utts.iter().map(|u| u.seq.word_count).max().unwrap_or(0);
        let t_max = utts.iter().map(|u| u.mel.n_frames()).max().unwrap_or(0);
        let mut b = Batch {
            ids: Vec::new(),
            tokens: Vec::new(),
            word_ids: Vec::new(),
            phoneme_lengths: Vec::new(),
            word_durations: Vec::new(),
            word_counts: Vec::new(),
            mels: Vec::new(),
            frame_lengths: Vec::new(),
        };
        for u in utts {
            b.ids.push(u.id.clone());
            b.tokens.push(u.seq.tokens.clone());
            b.word_ids.push(u.seq.word_ids.clone());
            b.phoneme_lengths.push(u.seq.len());
            b.word_durations.push(u.word_durations.clone());
            b.word_counts.push(u.seq.word_count);
            b.mels.push(u.mel.frames.clone());
            b.frame_lengths.push(u.mel.n_frames());
        }
        b.pad_to(p_max, w_max, t_max)
    }

    /// Extends the padding; true lengths are unchanged.
    pub fn pad_to(mut self, p_max: usize, w_max: usize, t_max: usize) -> Self {
        for i in 0..self.len() {
            let p = p_max.max(self.tokens[i].len());
            self.tokens[i].resize(p, 0);
            self.word_ids[i].resize(p, 0);
            let w = w_max.max(self.word_durations[i].len());
            self.word_durations[i].resize(w, 0);
            let m = &self.mels[i];
            let t = t_max.max(m.rows());
            self.mels[i] = Matrix::from_fn(t, m.cols(), |r, c| if r < m.rows() { m[(r, c)] } else { 0.0 });
        }
        self
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn item(&self, i: usize) -> Result<BatchItem<'_>> {
        let p = self.phoneme_lengths[i];
        let seq = PhonemeSequence::new(self.tokens[i][..p].to_vec(), self.word_ids[i][..p].to_vec())?;
        Ok(BatchItem { seq, mel: &self.mels[i], frames: self.frame_lengths[i], word_durations: &self.word_durations[i][..self.word_counts[i]] })
    }

    /// Unpadded normalized mel of item `i`.
    pub fn normalized_mel<F: Scalar>(&self, i: usize, stats: &MelStats) -> Matrix<F> {
        stats.normalize(&self.mels[i].rows_range(0, self.frame_lengths[i]))
    }
}

/// `(T/4)×L` standard-normal posterior noise for batch entry `item`.
pub fn posterior_noise<F: Scalar>(seed: u64, item: usize, rows: usize, cols: usize) -> Matrix<F> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(item as u64);
    Matrix::from_fn(rows, cols, |_, _| {
        let v: f64 = StandardNormal.sample(&mut rng);
        F::c(v)
    })
}

/// Multipliers applied to each loss term when forming the objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub dur: f64,
    pub vg: f64,
    pub kl: f64,
    pub pn: f64,
}

impl LossWeights {
    pub const ALL: Self = Self { dur: 1.0, vg: 1.0, kl: 1.0, pn: 1.0 };
}

#[derive(Clone, Copy, Debug)]
pub struct LossOptions {
    pub noise_seed: u64,
    pub kl_weight: f64,
    pub dropout_seed: Option<u64>,
}

struct ItemTerms {
    dur: Var,
    vg: Var,
    kl: Var,
    nll: Var,
}

fn item_terms<F: Scalar>(model: &Model<F>, g: &mut Graph<'_, F>, batch: &Batch, i: usize, opts: &LossOptions, drop: &mut Dropout) -> Result<ItemTerms> {
    let item = batch.item(i)?;
    let mel = g.constant(batch.normalized_mel::<F>(i, &model.mel_stats));
    let enc = model.encoder.encode(g, &item.seq, Some(item.word_durations), drop)?;

    let lin = g.exp(enc.log_durations);
    let pred = g.segment_sum(lin, item.seq.word_ids.clone(), item.seq.word_count);
    let pred = g.add_scalar(pred, F::one());
    let pred = g.log(pred);
    let target = Matrix::from_fn(item.seq.word_count, 1, |w, _| F::c((1.0 + item.word_durations[w] as f64).ln()));
    let target = g.constant(target);
    let diff = g.sub(pred, target);
    let sq = g.square(diff);
    let dur = g.sum(sq);

    let post = model.vg.encode_posterior(g, mel, enc.h_l)?;
    let cond = model.vg.pool_condition(g, enc.h_l);
    let noise = posterior_noise::<F>(opts.noise_seed, i, item.frames / model.vg.stride(), model.vg.latent_size());
    let (kl, z) = model.vg.kl_estimate(g, post, cond, &noise)?;
    let coarse = model.vg.decode(g, z, enc.h_l)?;
    let d = g.sub(coarse, mel);
    let d = g.abs(d);
    let vg = g.sum(d);

    let pn_cond = model.postnet_condition(g, enc.h_l, coarse);
    let out = model.postnet.forward(g, mel, pn_cond)?;
    let nll = g.neg(out.log_likelihood);
    Ok(ItemTerms { dur, vg, kl, nll })
}

/// Element counts that the per-term sums are averaged over.
fn normalizers(batch: &Batch, latent: usize, stride: usize) -> (f64, f64, f64) {
    let words: usize = batch.word_counts.iter().sum();
    let frames: usize = batch.frame_lengths.iter().sum();
    let latents = (frames / stride * latent) as f64;
    (words as f64, (frames * N_MELS) as f64, latents)
}

/// Loss terms averaged over unpadded elements, and optionally the gradient of
/// `Σ weight·term` (with the KL term also scaled by `kl_weight`).
pub fn loss_and_gradients<F: Scalar>(
    model: &Model<F>,
    batch: &Batch,
    opts: &LossOptions,
    weights: Option<LossWeights>,
) -> Result<(LossBreakdown, Option<Gradients<F>>)> {
    if batch.is_empty() {
        return Err(Error::Shape("empty batch".into()));
    }
    let (n_words, n_mel, n_lat) = normalizers(batch, model.vg.latent_size(), model.vg.stride());
    let mut sums = [0.0f64; 4];
    let mut grads: Option<Gradients<F>> = None;
    let mut drop = opts.dropout_seed.map_or_else(Dropout::off, Dropout::seeded);
    for i in 0..batch.len() {
        let mut g = if weights.is_some() { Graph::new(&model.store) } else { Graph::inference(&model.store) };
        let t = item_terms(model, &mut g, batch, i, opts, &mut drop)?;
        for (s, v) in sums.iter_mut().zip([t.dur, t.vg, t.kl, t.nll]) {
            *s += g.value(v).item().f64();
        }
        if let Some(w) = weights {
            let a = g.scale(t.dur, F::c(w.dur / n_words));
            let b = g.scale(t.vg, F::c(w.vg / n_mel));
            let c = g.scale(t.kl, F::c(w.kl * opts.kl_weight / n_lat));
            let d = g.scale(t.nll, F::c(w.pn / n_mel));
            let ab = g.add(a, b);
            let cd = g.add(c, d);
            let obj = g.add(ab, cd);
            let gi = g.backward(obj);
            match &mut grads {
                Some(acc) => acc.add(&gi),
                None => grads = Some(gi),
            }
        }
    }
    let lb = LossBreakdown::from_parts(sums[0] / n_words, sums[1] / n_mel, sums[2] / n_lat, sums[3] / n_mel, opts.kl_weight);
    lb.check_finite()?;
    Ok((lb, grads))
}

/// Loss terms without gradients.
pub fn compute_losses<F: Scalar>(model: &Model<F>, batch: &Batch, noise_seed: u64, kl_weight: f64) -> Result<LossBreakdown> {
    let opts = LossOptions { noise_seed, kl_weight, dropout_seed: None };
    Ok(loss_and_gradients(model, batch, &opts, None)?.0)
}

/// Mel and post-net condition pairs used for actnorm initialization.
pub fn postnet_init_pairs<F: Scalar>(model: &Model<F>, batch: &Batch, noise_seed: u64) -> Result<Vec<(Matrix<F>, Matrix<F>)>> {
    let mut out = Vec::with_capacity(batch.len());
    for i in 0..batch.len() {
        let item = batch.item(i)?;
        let mut g = Graph::inference(&model.store);
        let mel_m = batch.normalized_mel::<F>(i, &model.mel_stats);
        let mel = g.constant(mel_m.clone());
        let enc = model.encoder.encode(&mut g, &item.seq, Some(item.word_durations), &mut Dropout::off())?;
        let post = model.vg.encode_posterior(&mut g, mel, enc.h_l)?;
        let noise = posterior_noise::<F>(noise_seed, i, item.frames / model.vg.stride(), model.vg.latent_size());
        let z = model.vg.reparameterize(&mut g, post, &noise)?;
        let coarse = model.vg.decode(&mut g, z, enc.h_l)?;
        let cond = model.postnet_condition(&mut g, enc.h_l, coarse);
        out.push((mel_m, g.value(cond).clone()));
    }
    Ok(out)
}

pub struct Trainer<F: Scalar> {
    pub model: Model<F>,
    pub opt: Adam<F>,
    pub config: TrainConfig,
    pub step: u64,
    pub history: Vec<LossBreakdown>,
    pub dump_dir: Option<PathBuf>,
}

impl<F: Scalar> Trainer<F> {
    pub fn new(model: Model<F>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let opt = Adam::new(&model.store, config.adam_beta1, config.adam_beta2, config.adam_epsilon);
        Ok(Self { model, opt, config, step: 0, history: Vec::new(), dump_dir: None })
    }

    /// Runs post-net data-dependent initialization on `batch` if not done yet.
    pub fn ensure_postnet_init(&mut self, batch: &Batch) -> Result<()> {
        if self.model.postnet.initialized {
            return Ok(());
        }
        let pairs = postnet_init_pairs(&self.model, batch, self.config.seed)?;
        self.model.postnet.data_dependent_init(&mut self.model.store, &pairs)
    }

    pub fn lr(&self, step: u64) -> f64 {
        self.config.learning_rate_scale * lr_at_step(step, self.config.warmup_steps, self.model.hidden_size())
    }

    pub fn train_step(&mut self, batch: &Batch) -> Result<LossBreakdown> {
        self.ensure_postnet_init(batch)?;
        let step = self.step + 1;
        let seed = self.config.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(step);
        let opts = LossOptions {
            noise_seed: seed,
            kl_weight: kl_weight_at_step(step, self.config.kl_anneal()),
            dropout_seed: Some(seed ^ 0xD1B5_4A32_D192_ED03),
        };
        let (lb, grads) = match loss_and_gradients(&self.model, batch, &opts, Some(LossWeights::ALL)) {
            Ok(r) => r,
            Err(e @ (Error::NanLoss { .. } | Error::NonFinite { .. })) => {
                let dump = self.dump_diagnostics(step, &format!("{e}"))?;
                return Err(Error::Diverged { step, total: f64::NAN, dump });
            }
            Err(e) => return Err(e),
        };
        if lb.total > self.config.divergence_threshold {
            let dump = self.dump_diagnostics(step, &lb.to_string())?;
            return Err(Error::Diverged { step, total: lb.total, dump });
        }
        let mut grads = grads.expect("gradients requested");
        if !grads.all_finite() {
            let dump = self.dump_diagnostics(step, "non-finite gradient")?;
            return Err(Error::Diverged { step, total: lb.total, dump });
        }
        grads.clip_global_norm(F::c(self.config.grad_clip_norm));
        let lr = F::c(self.lr(step));
        self.opt.update(&mut self.model.store, &grads, lr);
        self.step = step;
        self.history.push(lb);
        Ok(lb)
    }

    fn dump_diagnostics(&self, step: u64, what: &str) -> Result<Option<PathBuf>> {
        let Some(dir) = &self.dump_dir else { return Ok(None) };
        let path = dir.join(format!("divergence_step{step}.txt"));
        let mut text = format!("step {step}: {what}\n");
        for (s, lb) in self.history.iter().enumerate().rev().take(20) {
            text.push_str(&format!("step {} {lb}\n", s + 1));
        }
        for (_, p) in self.model.store.iter() {
            let m = &p.value;
            let max = m.as_slice().iter().fold(0.0f64, |a, v| a.max(v.f64().abs()));
            text.push_str(&format!("{} {}x{} max_abs={max:.4e} finite={}\n", p.name, m.rows(), m.cols(), m.all_finite()));
        }
        std::fs::write(&path, text).map_err(io_err(&path))?;
        Ok(Some(path))
    }
}

/// Deterministic epoch-shuffled batches over `utts`.
pub struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Self {
        let mut s = Self { order: (0..n).collect(), pos: n, batch_size: batch_size.min(n).max(1), rng: ChaCha8Rng::seed_from_u64(seed) };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.pos = 0;
    }

    pub fn next_indices(&mut self) -> Vec<usize> {
        if self.pos + self.batch_size > self.order.len() {
            self.reshuffle();
        }
        let out = self.order[self.pos..self.pos + self.batch_size].to_vec();
        self.pos += self.batch_size;
        out
    }
}

/// Trains from scratch on the utterances of a manifest. With `out_dir`, a
/// per-step log (`train.log`) and periodic checkpoints are written there.
pub fn fit<F: Scalar>(
    manifest: &DatasetManifest,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    out_dir: Option<&Path>,
    mut on_step: impl FnMut(u64, &LossBreakdown),
) -> Result<Trainer<F>> {
    let utts = load_utterances(manifest)?;
    fit_utterances(&utts, manifest.phoneme_vocab.clone(), model_config, train_config, out_dir, &mut on_step)
}

pub fn fit_utterances<F: Scalar>(
    utts: &[Utterance],
    vocab: crate::corpus::PhonemeVocab,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    out_dir: Option<&Path>,
    on_step: &mut dyn FnMut(u64, &LossBreakdown),
) -> Result<Trainer<F>> {
    if utts.is_empty() {
        return Err(Error::Shape("no training utterances".into()));
    }
    let mut model = Model::<F>::new(model_config, vocab, train_config.seed)?;
    model.mel_stats = MelStats::from_mels(utts.iter().map(|u| &u.mel.frames));
    let mut trainer = Trainer::new(model, train_config.clone())?;
    let mut log = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(io_err(dir))?;
            trainer.dump_dir = Some(dir.to_path_buf());
            let p = dir.join("train.log");
            Some((std::fs::File::create(&p).map_err(io_err(&p))?, p))
        }
        None => None,
    };
    let mut sampler = BatchSampler::new(utts.len(), train_config.batch_size, train_config.seed);
    while trainer.step < train_config.max_steps {
        let idx = sampler.next_indices();
        let refs: Vec<&Utterance> = idx.iter().map(|&i| &utts[i]).collect();
        let batch = Batch::from_utterances(&refs);
        let lb = trainer.train_step(&batch)?;
        if let Some((f, p)) = &mut log {
            writeln!(f, "step={} lr={:.6e} {lb}", trainer.step, trainer.lr(trainer.step)).map_err(io_err(p.as_path()))?;
        }
        on_step(trainer.step, &lb);
        if let Some(dir) = out_dir {
            if trainer.step % train_config.checkpoint_interval == 0 || trainer.step == train_config.max_steps {
                save_checkpoint(dir.join(format!("step{:07}.ckpt", trainer.step)), &trainer.model, Some(&trainer.opt), trainer.step)?;
            }
        }
    }
    Ok(trainer)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        let w = 4000;
        let peak = lr_at_step(w, w, 192);
        for s in [1, 10, 1000, 3999, 4001, 8000, 100_000] {
            assert!(lr_at_step(s, w, 192) <= peak);
        }
        assert!(lr_at_step(100, w, 192) < lr_at_step(200, w, 192));
        assert!((lr_at_step(4 * w, w, 192) - peak / 2.0).abs() < 1e-15);
        let r = lr_at_step(500, w, 384) / lr_at_step(500, w, 192);
        assert!((r - 2f64.powf(-0.5)).abs() < 1e-12);
    }

    #[test]
    fn kl_ramp() {
        assert_eq!(kl_weight_at_step(0, 200), 0.0);
        assert_eq!(kl_weight_at_step(100, 200), 0.5);
        assert_eq!(kl_weight_at_step(200, 200), 1.0);
        assert_eq!(kl_weight_at_step(5000, 200), 1.0);
    }

    #[test]
    fn decomposition_identity() {
        let lb = LossBreakdown::from_parts(0.1, 0.2, 3.0, -0.5, 0.25);
        assert!((lb.total - (0.1 + 0.2 + 0.75 - 0.5)).abs() < 1e-15);
        assert!(matches!(LossBreakdown::from_parts(f64::NAN, 0.0, 0.0, 0.0, 1.0).check_finite(), Err(Error::NanLoss { term: "l_dur" })));
    }

    #[test]
    fn sampler_covers_each_epoch() {
        let mut s = BatchSampler::new(10, 5, 1);
        let mut a = s.next_indices();
        a.extend(s.next_indices());
        a.sort();
        assert_eq!(a, (0..10).collect::<Vec<_>>());
    }
}
