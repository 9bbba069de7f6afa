//! Phoneme and word encoders, word-level durations and length regulation,
//! and word-to-phoneme attention producing frame-level features `H_L`.

use mixtts_tensor::{Graph, Matrix, ParamId, Scalar, Var};

use crate::config::LinguisticEncoderConfig;
use crate::corpus::PhonemeSequence;
use crate::error::{Error, Result};
use crate::nn::{Conv, Dropout, FftBlock, Init, LayerNorm, Linear};

/// Conv → ReLU → LayerNorm, twice, then a linear layer to one log-duration per phoneme.
#[derive(Clone, Debug)]
pub struct DurationPredictor {
    pub conv1: Conv,
    pub norm1: LayerNorm,
    pub conv2: Conv,
    pub norm2: LayerNorm,
    pub out: Linear,
    pub dropout: f64,
}

impl DurationPredictor {
    pub fn new<F: Scalar>(init: &mut Init<'_, F>, name: &str, d: usize, kernel: usize, dropout: f64) -> Self {
        Self {
            conv1: Conv::same(init, &format!("{name}.conv1"), d, d, kernel, 1),
            norm1: LayerNorm::new(init, &format!("{name}.norm1"), d),
            conv2: Conv::same(init, &format!("{name}.conv2"), d, d, kernel, 1),
            norm2: LayerNorm::new(init, &format!("{name}.norm2"), d),
            out: Linear::new(init, &format!("{name}.out"), d, 1),
            dropout,
        }
    }

    /// `P×1` log-scale phoneme durations.
    pub fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, h_p: Var, drop: &mut Dropout) -> Var {
        let mut x = h_p;
        for (conv, norm) in [(&self.conv1, &self.norm1), (&self.conv2, &self.norm2)] {
            x = conv.forward(g, x);
            x = g.relu(x);
            x = norm.forward(g, x);
            x = drop.apply(g, x, self.dropout);
        }
        self.out.forward(g, x)
    }
}

/// Masked multi-head attention from expanded word states (queries) to
/// phoneme states (keys and values), with fractional in-word positions.
#[derive(Clone, Debug)]
pub struct W2pAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub e_kv: ParamId,
    pub e_q: ParamId,
    pub heads: usize,
}

impl W2pAttention {
    pub fn new<F: Scalar>(init: &mut Init<'_, F>, name: &str, d: usize, heads: usize) -> Self {
        let std = (d as f64).powf(-0.5);
        Self {
            q: Linear::new(init, &format!("{name}.q"), d, d),
            k: Linear::new(init, &format!("{name}.k"), d, d),
            v: Linear::new(init, &format!("{name}.v"), d, d),
            o: Linear::new(init, &format!("{name}.o"), d, d),
            e_kv: init.normal(&format!("{name}.e_kv"), 1, d, std),
            e_q: init.normal(&format!("{name}.e_q"), 1, d, std),
            heads,
        }
    }

    /// Adds `(i/L_w)·E_kv` to phoneme rows and `(j/T_w)·E_q` to frame rows.
    pub fn add_positional_encodings<F: Scalar>(
        &self,
        g: &mut Graph<'_, F>,
        h_p: Var,
        h_w: Var,
        word_ids: &[usize],
        frame_word_ids: &[usize],
    ) -> (Var, Var) {
        let kv = coefficient_column::<F>(&position_coefficients(word_ids));
        let q = coefficient_column::<F>(&position_coefficients(frame_word_ids));
        let kv = g.constant(kv);
        let q = g.constant(q);
        let e_kv = g.param(self.e_kv);
        let e_q = g.param(self.e_q);
        let pk = g.matmul(kv, e_kv);
        let pq = g.matmul(q, e_q);
        (g.add(h_p, pk), g.add(h_w, pq))
    }

    /// `H_L = H_w' + MHA(H_w', H_p', mask)`; also returns head-averaged weights.
    pub fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, h_w: Var, h_p: Var, mask: &[bool]) -> Result<(Var, Matrix<F>)> {
        let (t, d) = g.shape(h_w);
        let p = g.shape(h_p).0;
        if mask.len() != t * p {
            return Err(Error::Shape(format!("w2p mask has {} entries for {t}x{p}", mask.len())));
        }
        if let Some(row) = (0..t).find(|&r| !mask[r * p..(r + 1) * p].iter().any(|&m| m)) {
            return Err(Error::Shape(format!("frame {row} has no permitted phoneme")));
        }
        let dk = d / self.heads;
        let q = self.q.forward(g, h_w);
        let q = g.scale(q, F::c((dk as f64).powf(-0.5)));
        let k = self.k.forward(g, h_p);
        let v = self.v.forward(g, h_p);
        let mut outs = Vec::with_capacity(self.heads);
        let mut avg = Matrix::<F>::zeros(t, p);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * dk, dk);
            let kh = g.slice_cols(k, h * dk, dk);
            let vh = g.slice_cols(v, h * dk, dk);
            let kt = g.transpose(kh);
            let scores = g.matmul(qh, kt);
            let attn = g.softmax_rows(scores, Some(mask));
            avg.add_assign(g.value(attn));
            outs.push(g.matmul(attn, vh));
        }
        avg.scale_assign(F::c(1.0 / self.heads as f64));
        let cat = g.concat_cols(&outs);
        let o = self.o.forward(g, cat);
        Ok((g.add(h_w, o), avg))
    }
}

#[derive(Clone, Debug)]
pub struct EncoderOutput<F> {
    /// `T×d` frame-level linguistic features.
    pub h_l: Var,
    /// `P×1` predicted log-scale phoneme durations.
    pub log_durations: Var,
    pub word_durations: Vec<usize>,
    pub frame_word_ids: Vec<usize>,
    /// `T×P`, averaged over heads.
    pub attention: Matrix<F>,
}

#[derive(Clone, Debug)]
pub struct LinguisticEncoder {
    pub config: LinguisticEncoderConfig,
    pub vocab_size: usize,
    pub embedding: ParamId,
    pub phoneme_blocks: Vec<FftBlock>,
    pub word_blocks: Vec<FftBlock>,
    pub duration: DurationPredictor,
    pub w2p: W2pAttention,
}

impl LinguisticEncoder {
    pub fn new<F: Scalar>(init: &mut Init<'_, F>, config: &LinguisticEncoderConfig, vocab_size: usize) -> Self {
        let c = config;
        let d = c.hidden_size;
        let embedding = init.normal("le.embedding", vocab_size, d, (d as f64).powf(-0.5));
        let block = |init: &mut Init<'_, F>, name: String| {
            FftBlock::new(init, &name, d, c.attention_heads, c.relative_window, c.conv1d_kernel, c.conv1d_filter_size, c.dropout)
        };
        let phoneme_blocks = (0..c.word_phoneme_encoder_layers).map(|i| block(init, format!("le.phoneme{i}"))).collect();
        let word_blocks = (0..c.word_phoneme_encoder_layers).map(|i| block(init, format!("le.word{i}"))).collect();
        let duration = DurationPredictor::new(init, "dp", d, c.duration_predictor_kernel, c.dropout);
        let w2p = W2pAttention::new(init, "le.w2p", d, c.attention_heads);
        Self { config: config.clone(), vocab_size, embedding, phoneme_blocks, word_blocks, duration, w2p }
    }

    /// `P×d` phoneme hidden states.
    pub fn encode_phonemes<F: Scalar>(&self, g: &mut Graph<'_, F>, seq: &PhonemeSequence, drop: &mut Dropout) -> Result<Var> {
        if let Some(&t) = seq.tokens.iter().find(|&&t| t >= self.vocab_size) {
            return Err(Error::TokenOutOfRange { index: t, size: self.vocab_size });
        }
        let emb = g.param(self.embedding);
        let x = g.gather_rows(emb, seq.tokens.clone());
        let mut x = g.scale(x, F::c((self.config.hidden_size as f64).sqrt()));
        for b in &self.phoneme_blocks {
            x = b.forward(g, x, drop);
        }
        Ok(x)
    }

    pub fn predict_phoneme_durations<F: Scalar>(&self, g: &mut Graph<'_, F>, h_p: Var, drop: &mut Dropout) -> Var {
        self.duration.forward(g, h_p, drop)
    }

    /// Inference-time word durations: exponentiate, sum per word, round.
    pub fn infer_word_durations<F: Scalar>(&self, g: &mut Graph<'_, F>, seq: &PhonemeSequence) -> Result<Vec<usize>> {
        let mut drop = Dropout::off();
        let h_p = self.encode_phonemes(g, seq, &mut drop)?;
        let logd = self.predict_phoneme_durations(g, h_p, &mut drop);
        let lin: Vec<f64> = g.value(logd).as_slice().iter().map(|v| v.f64().exp()).collect();
        Ok(round_word_durations(&aggregate_word_durations(&lin, &seq.word_ids, seq.word_count)))
    }

    /// Full encoder. With `word_durations` the expansion is teacher-forced;
    /// otherwise predicted durations are rounded and used.
    pub fn encode<F: Scalar>(
        &self,
        g: &mut Graph<'_, F>,
        seq: &PhonemeSequence,
        word_durations: Option<&[usize]>,
        drop: &mut Dropout,
    ) -> Result<EncoderOutput<F>> {
        let h_p = self.encode_phonemes(g, seq, drop)?;
        let log_durations = self.predict_phoneme_durations(g, h_p, drop);
        let durations = match word_durations {
            Some(d) => {
                if d.len() != seq.word_count {
                    return Err(Error::Duration(format!("{} durations for {} words", d.len(), seq.word_count)));
                }
                d.to_vec()
            }
            None => {
                let lin: Vec<f64> = g.value(log_durations).as_slice().iter().map(|v| v.f64().exp()).collect();
                round_word_durations(&aggregate_word_durations(&lin, &seq.word_ids, seq.word_count))
            }
        };
        let pooled = word_pool(g, h_p, &seq.word_ids, seq.word_count);
        let mut h_word = pooled;
        for b in &self.word_blocks {
            h_word = b.forward(g, h_word, drop);
        }
        let frame_word_ids = frame_word_ids(&durations)?;
        let h_w = g.gather_rows(h_word, frame_word_ids.clone());
        let (h_p2, h_w2) = self.w2p.add_positional_encodings(g, h_p, h_w, &seq.word_ids, &frame_word_ids);
        let mask = build_w2p_mask(&seq.word_ids, &frame_word_ids);
        let (h_l, attention) = self.w2p.forward(g, h_w2, h_p2, &mask)?;
        Ok(EncoderOutput { h_l, log_durations, word_durations: durations, frame_word_ids, attention })
    }
}

/// Row `w` is the mean of `h_p` rows labelled `w`.
pub fn word_pool<F: Scalar>(g: &mut Graph<'_, F>, h_p: Var, word_ids: &[usize], word_count: usize) -> Var {
    g.segment_mean(h_p, word_ids.to_vec(), word_count)
}

pub fn aggregate_word_durations(phoneme_durations: &[f64], word_ids: &[usize], word_count: usize) -> Vec<f64> {
    let mut out = vec![0.0; word_count];
    for (&d, &w) in phoneme_durations.iter().zip(word_ids) {
        out[w] += d;
    }
    out
}

/// Round half up, at least one frame per word.
pub fn round_word_durations(word_durations: &[f64]) -> Vec<usize> {
    word_durations.iter().map(|&d| ((d + 0.5).floor().max(1.0)) as usize).collect()
}

/// Word label of each frame after expanding word `w` to `durations[w]` frames.
pub fn frame_word_ids(durations: &[usize]) -> Result<Vec<usize>> {
    let total: usize = durations.iter().sum();
    if total == 0 {
        return Err(Error::Duration("total duration is zero".into()));
    }
    Ok(durations.iter().enumerate().flat_map(|(w, &d)| std::iter::repeat(w).take(d)).collect())
}

/// Repeats row `w` of `word_hidden` `durations[w]` times.
pub fn length_regulate<F: Scalar>(g: &mut Graph<'_, F>, word_hidden: Var, durations: &[usize]) -> Result<(Var, Vec<usize>)> {
    let ids = frame_word_ids(durations)?;
    Ok((g.gather_rows(word_hidden, ids.clone()), ids))
}

/// `T×P` row-major: frame `t` may attend phoneme `p` iff they share a word.
pub fn build_w2p_mask(word_ids: &[usize], frame_word_ids: &[usize]) -> Vec<bool> {
    let mut mask = Vec::with_capacity(word_ids.len() * frame_word_ids.len());
    for &fw in frame_word_ids {
        mask.extend(word_ids.iter().map(|&w| w == fw));
    }
    mask
}

/// Position of each element within its run of equal labels, divided by the run length.
pub fn position_coefficients(labels: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(labels.len());
    let mut start = 0;
    while start < labels.len() {
        let end = start + labels[start..].iter().take_while(|&&l| l == labels[start]).count();
        let n = (end - start) as f64;
        out.extend((0..end - start).map(|i| i as f64 / n));
        start = end;
    }
    out
}

fn coefficient_column<F: Scalar>(c: &[f64]) -> Matrix<F> {
    Matrix::from_fn(c.len(), 1, |r, _| F::c(c[r]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{parse_phoneme_text, PhonemeVocab};
    use mixtts_tensor::ParamStore;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_encoder() -> (ParamStore<f64>, LinguisticEncoder) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cfg = crate::ModelConfig::micro().linguistic_encoder;
        let enc = LinguisticEncoder::new(&mut Init::new(&mut store, &mut rng), &cfg, PhonemeVocab::arpabet().len());
        (store, enc)
    }

    #[test]
    fn word_pool_examples() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::inference(&store);
        let h = g.constant(Matrix::from_rows(&[vec![1.0, 1.0], vec![3.0, 3.0]]));
        let p = word_pool(&mut g, h, &[0, 0], 1);
        assert_eq!(g.value(p).as_slice(), &[2.0, 2.0]);
        let h2 = g.constant(Matrix::from_fn(3, 2, |r, c| (r * 2 + c) as f64));
        let p2 = word_pool(&mut g, h2, &[0, 1, 2], 3);
        assert_eq!(g.value(p2), g.value(h2));
    }

    #[test]
    fn duration_aggregation_and_rounding() {
        assert_eq!(aggregate_word_durations(&[2.0, 3.0, 1.0], &[0, 0, 1], 2), vec![5.0, 1.0]);
        assert_eq!(aggregate_word_durations(&[0.0; 3], &[0, 1, 1], 2), vec![0.0, 0.0]);
        assert_eq!(round_word_durations(&[2.5, 2.49, 0.1, 0.0]), vec![3, 2, 1, 1]);
    }

    #[test]
    fn length_regulation() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::inference(&store);
        let h = g.constant(Matrix::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]));
        let (x, ids) = length_regulate(&mut g, h, &[2, 0, 3]).unwrap();
        assert_eq!(g.value(x).as_slice(), &[1.0, 1.0, 3.0, 3.0, 3.0]);
        assert_eq!(ids, vec![0, 0, 2, 2, 2]);
        assert!(matches!(length_regulate(&mut g, h, &[0, 0, 0]), Err(Error::Duration(_))));
    }

    #[test]
    fn positional_coefficients() {
        let c = position_coefficients(&[0, 0, 0, 1, 1]);
        assert_eq!(c, vec![0.0, 1.0 / 3.0, 2.0 / 3.0, 0.0, 0.5]);
    }

    #[test]
    fn zero_weight_predictor_outputs_bias() {
        let (mut store, enc) = tiny_encoder();
        let w = enc.duration.out.w;
        let b = enc.duration.out.b;
        let (r, c) = store.get(w).shape();
        *store.get_mut(w) = Matrix::zeros(r, c);
        store.get_mut(b)[(0, 0)] = 0.7;
        let mut g = Graph::inference(&store);
        let seq = parse_phoneme_text("HH AE1 Z | N EH1 V ER0", &PhonemeVocab::arpabet()).unwrap();
        let h = enc.encode_phonemes(&mut g, &seq, &mut Dropout::off()).unwrap();
        let d = enc.predict_phoneme_durations(&mut g, h, &mut Dropout::off());
        assert_eq!(g.value(d).shape(), (7, 1));
        assert!(g.value(d).as_slice().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn encode_shapes_and_silence_override() {
        let (store, enc) = tiny_encoder();
        let v = PhonemeVocab::arpabet();
        let seq = parse_phoneme_text("AH0 | SIL | B", &v).unwrap();
        let mut g = Graph::inference(&store);
        let out = enc.encode(&mut g, &seq, Some(&[3, 40, 5]), &mut Dropout::off()).unwrap();
        assert_eq!(g.shape(out.h_l), (48, 8));
        assert_eq!(out.frame_word_ids.iter().filter(|&&w| w == 1).count(), 40);
        assert_eq!(out.attention.shape(), (48, 3));
        let pred = enc.encode(&mut g, &seq, None, &mut Dropout::off()).unwrap();
        let lin: Vec<f64> = g.value(pred.log_durations).as_slice().iter().map(|x| x.exp()).collect();
        let want = round_word_durations(&aggregate_word_durations(&lin, &seq.word_ids, 3));
        assert_eq!(pred.word_durations, want);
        assert_eq!(pred.frame_word_ids.len(), want.iter().sum::<usize>());
        assert!(matches!(
            enc.encode_phonemes(&mut g, &crate::corpus::PhonemeSequence::new(vec![999], vec![0]).unwrap(), &mut Dropout::off()),
            Err(Error::TokenOutOfRange { .. })
        ));
    }

    #[test]
    fn encode_is_deterministic() {
        let (store, enc) = tiny_encoder();
        let seq = parse_phoneme_text("HH AE1 Z | N EH1 V ER0", &PhonemeVocab::arpabet()).unwrap();
        let run = || {
            let mut g = Graph::inference(&store);
            let h = enc.encode_phonemes(&mut g, &seq, &mut Dropout::off()).unwrap();
            g.value(h).clone()
        };
        let a = run();
        assert_eq!(a.shape(), (7, 8));
        assert_eq!(a, run());
    }

    #[test]
    fn one_phoneme_words_give_one_hot_attention() {
        let (store, enc) = tiny_encoder();
        let seq = parse_phoneme_text("AH0 | B IY1 | K", &PhonemeVocab::arpabet()).unwrap();
        let mut g = Graph::inference(&store);
        let out = enc.encode(&mut g, &seq, Some(&[2, 3, 2]), &mut Dropout::off()).unwrap();
        for t in [0, 1, 5, 6] {
            let row = out.attention.row(t);
            assert_eq!(row.iter().filter(|&&x| x == 1.0).count(), 1);
            assert_eq!(row.iter().filter(|&&x| x == 0.0).count(), 3);
        }
    }

    proptest! {
        #[test]
        fn length_law(durs in prop::collection::vec(0usize..12, 1..10)) {
            prop_assume!(durs.iter().sum::<usize>() > 0);
            let ids = frame_word_ids(&durs).unwrap();
            prop_assert_eq!(ids.len(), durs.iter().sum::<usize>());
            for (w, &d) in durs.iter().enumerate() {
                prop_assert_eq!(ids.iter().filter(|&&x| x == w).count(), d);
            }
        }

        #[test]
        fn mask_rows_count_word_lengths(lens in prop::collection::vec(1usize..5, 1..6), durs in prop::collection::vec(1usize..6, 6)) {
            let word_ids: Vec<usize> = lens.iter().enumerate().flat_map(|(w, &l)| std::iter::repeat(w).take(l)).collect();
            let fids = frame_word_ids(&durs[..lens.len()]).unwrap();
            let mask = build_w2p_mask(&word_ids, &fids);
            let p = word_ids.len();
            for (t, &w) in fids.iter().enumerate() {
                prop_assert_eq!(mask[t * p..(t + 1) * p].iter().filter(|&&m| m).count(), lens[w]);
            }
        }
    }
}
