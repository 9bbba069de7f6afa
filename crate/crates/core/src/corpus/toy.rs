//! Procedural corpus: each phoneme has a fixed duration and a spectral
//! template; each utterance draws a pitch (harmonic spacing) and a gain.
//! Word durations are therefore learnable from text while the fine harmonic
//! structure has to come from the acoustic latent.

use std::path::Path;

use mixtts_tensor::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::manifest::{DatasetManifest, Split, UtteranceRecord};
use super::mel::{save_mel, MelSpectrogram, N_MELS};
use super::phonemes::{phoneme_text, PhonemeSequence, PhonemeVocab, SIL};
use crate::error::{io_err, Result};

#[derive(Clone, Copy, Debug)]
enum Kind {
    Vowel { f1: f64, f2: f64 },
    Nasal { f: f64 },
    Fricative { lo: f64 },
    Stop,
}

const PHONES: [(&str, usize, Kind); 10] = [
    ("AA1", 6, Kind::Vowel { f1: 22.0, f2: 36.0 }),
    ("IY1", 5, Kind::Vowel { f1: 10.0, f2: 55.0 }),
    ("UW1", 6, Kind::Vowel { f1: 12.0, f2: 28.0 }),
    ("EH1", 4, Kind::Vowel { f1: 18.0, f2: 46.0 }),
    ("M", 3, Kind::Nasal { f: 6.0 }),
    ("N", 3, Kind::Nasal { f: 9.0 }),
    ("S", 4, Kind::Fricative { lo: 60.0 }),
    ("SH", 4, Kind::Fricative { lo: 48.0 }),
    ("T", 2, Kind::Stop),
    ("K", 2, Kind::Stop),
];
const SIL_FRAMES: usize = 4;
const FLOOR: f64 = -4.5;

pub struct ToyCorpus {
    pub manifest: DatasetManifest,
    pub mels: Vec<MelSpectrogram>,
}

impl ToyCorpus {
    /// Writes `manifest.tsv` and one `.mel1` file per record into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let mut manifest = self.manifest.clone();
        for (r, mel) in manifest.records.iter_mut().zip(&self.mels) {
            let p = dir.join(format!("{}.mel1", r.id));
            save_mel(mel, &p)?;
            r.mel_path = Some(p);
        }
        manifest.write(dir.join("manifest.tsv"))
    }
}

pub fn toy_vocab() -> PhonemeVocab {
    PhonemeVocab::new(PHONES.iter().map(|p| p.0)).expect("toy symbols are valid")
}

fn frame(kind: Option<Kind>, pos: f64, pitch: f64, gain: f64, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let comb = |c: f64| (1..40).map(|k| (-(c - k as f64 * pitch).powi(2) / (2.0 * 0.8 * 0.8)).exp()).sum::<f64>();
    let bump = |c: f64, mu: f64, s: f64| (-(c - mu).powi(2) / (2.0 * s * s)).exp();
    let shape = (std::f64::consts::PI * pos).sin().sqrt();
    (0..N_MELS)
        .map(|c| {
            let c = c as f64;
            let v = match kind {
                None => FLOOR - 0.3,
                Some(Kind::Vowel { f1, f2 }) => {
                    let env = bump(c, f1, 6.0) + 0.7 * bump(c, f2, 8.0);
                    FLOOR + shape * (0.8 + 3.0 * env * (0.35 + 0.65 * comb(c))) + gain
                }
                Some(Kind::Nasal { f }) => FLOOR + shape * (0.4 + 2.0 * bump(c, f, 4.0) * (0.4 + 0.6 * comb(c))) + gain,
                Some(Kind::Fricative { lo }) => FLOOR + shape * 2.2 / (1.0 + (-(c - lo) / 3.0).exp()) + 0.5 * gain,
                Some(Kind::Stop) => {
                    if pos < 0.5 {
                        FLOOR + 2.0 + gain
                    } else {
                        FLOOR
                    }
                }
            };
            (v + rng.gen_range(-0.03..0.03)) as f32
        })
        .collect()
}

/// Deterministic toy corpus of `n_utterances` records with `1..=max_words` words.
pub fn make_toy_corpus(seed: u64, n_utterances: usize, max_words: usize) -> ToyCorpus {
    assert!(n_utterances >= 1 && max_words >= 1, "toy corpus needs at least one utterance and one word");
    let vocab = toy_vocab();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(n_utterances);
    let mut mels = Vec::with_capacity(n_utterances);
    for u in 0..n_utterances {
        let n_words = rng.gen_range(1..=max_words);
        let pitch = rng.gen_range(2.5..4.5);
        let gain = rng.gen_range(-0.3..0.3);
        let mut tokens = Vec::new();
        let mut word_ids = Vec::new();
        let mut durations = Vec::new();
        let mut rows: Vec<Vec<f32>> = Vec::new();
        let mut w = 0;
        for i in 0..n_words {
            if i > 0 && rng.gen_bool(0.3) {
                tokens.push(vocab.sil());
                word_ids.push(w);
                durations.push(SIL_FRAMES);
                for _ in 0..SIL_FRAMES {
                    rows.push(frame(None, 0.5, pitch, gain, &mut rng));
                }
                w += 1;
            }
            let n_ph = rng.gen_range(1..=3);
            let mut d = 0;
            for _ in 0..n_ph {
                let (sym, dur, kind) = PHONES[rng.gen_range(0..PHONES.len())];
                tokens.push(vocab.get(sym).unwrap());
                word_ids.push(w);
                for f in 0..dur {
                    rows.push(frame(Some(kind), (f as f64 + 0.5) / dur as f64, pitch, gain, &mut rng));
                }
                d += dur;
            }
            durations.push(d);
            w += 1;
        }
        let seq = PhonemeSequence::new(tokens, word_ids).expect("toy labelling is valid");
        let mel = MelSpectrogram::new(Matrix::from_rows(&rows)).expect("toy frames are finite");
        records.push(UtteranceRecord {
            id: format!("toy{u:04}"),
            phoneme_text: phoneme_text(&seq, &vocab).expect("toy tokens are in vocab"),
            wav_path: None,
            mel_path: Some(format!("toy{u:04}.mel1").into()),
            word_durations: Some(durations),
        });
        mels.push(mel);
    }
    let manifest = DatasetManifest { records, phoneme_vocab: vocab, split: Split::Train };
    ToyCorpus { manifest, mels }
}

/// Toy phoneme inventory including the silence word, for reference.
pub fn toy_symbols() -> Vec<&'static str> {
    std::iter::once(SIL).chain(PHONES.iter().map(|p| p.0)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{load_utterances, parse_phoneme_text};

    #[test]
    fn deterministic_given_seed() {
        let a = make_toy_corpus(0, 8, 4);
        let b = make_toy_corpus(0, 8, 4);
        let base = Path::new(".");
        assert_eq!(a.manifest.to_text(base), b.manifest.to_text(base));
        for (x, y) in a.mels.iter().zip(&b.mels) {
            assert_eq!(x.to_bytes(), y.to_bytes());
        }
        assert_ne!(make_toy_corpus(1, 8, 4).manifest.to_text(base), a.manifest.to_text(base));
    }

    #[test]
    fn durations_sum_to_frames() {
        let c = make_toy_corpus(3, 16, 4);
        assert_eq!(c.manifest.records.len(), 16);
        for (r, m) in c.manifest.records.iter().zip(&c.mels) {
            let d = r.word_durations.as_ref().unwrap();
            assert_eq!(d.iter().sum::<usize>(), m.n_frames());
            let seq = parse_phoneme_text(&r.phoneme_text, &c.manifest.phoneme_vocab).unwrap();
            assert_eq!(d.len(), seq.word_count);
        }
    }

    #[test]
    fn single_word_mode() {
        let c = make_toy_corpus(9, 10, 1);
        assert!(c.manifest.records.iter().all(|r| !r.phoneme_text.contains('|')));
    }

    #[test]
    fn written_corpus_loads_back() {
        let dir = tempfile::tempdir().unwrap();
        let c = make_toy_corpus(4, 5, 3);
        c.write(dir.path()).unwrap();
        let m = DatasetManifest::read(dir.path().join("manifest.tsv")).unwrap();
        let utts = load_utterances(&m).unwrap();
        assert_eq!(utts.len(), 5);
        for u in utts {
            assert_eq!(u.mel.n_frames() % 4, 0);
            assert_eq!(u.word_durations.iter().sum::<usize>(), u.mel.n_frames());
        }
        assert_eq!(toy_symbols().len(), 11);
    }
}
