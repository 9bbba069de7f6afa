//! Inference: encoder, prior sample, VG decoder, reversed post-net.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;

use mixtts_tensor::{Graph, Matrix, Scalar};

use crate::corpus::{parse_phoneme_text, MelSpectrogram};
use crate::error::{Error, Result};
use crate::linguistic_encoder::frame_word_ids;
use crate::model::Model;
use crate::nn::Dropout;
use crate::postnet::sample_latent;

pub const DEFAULT_TEMPERATURE: f64 = 0.8;
pub const DEFAULT_PRIOR_TEMPERATURE: f64 = 1.0;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthesisRequest {
    /// Phonemes separated by spaces, words by `|`.
    pub phoneme_text: String,
    pub seed: u64,
    /// Post-net sampling temperature.
    pub temperature: f64,
    /// Standard deviation of the VG prior draw.
    pub prior_temperature: f64,
    /// Word index to frame count. Zero is allowed, e.g. to drop a silence.
    pub duration_overrides: BTreeMap<usize, usize>,
}

impl SynthesisRequest {
    pub fn new(phoneme_text: impl Into<String>, seed: u64) -> Self {
        Self {
            phoneme_text: phoneme_text.into(),
            seed,
            temperature: DEFAULT_TEMPERATURE,
            prior_temperature: DEFAULT_PRIOR_TEMPERATURE,
            duration_overrides: BTreeMap::new(),
        }
    }

    pub fn with_temperature(mut self, t: f64) -> Self {
        self.temperature = t;
        self
    }

    pub fn with_override(mut self, word: usize, frames: usize) -> Self {
        self.duration_overrides.insert(word, frames);
        self
    }
}

#[derive(Clone, Debug)]
pub struct SynthesisResult {
    pub mel: MelSpectrogram,
    pub coarse_mel: MelSpectrogram,
    /// `T×P` word-to-phoneme attention averaged over heads.
    pub attention: Matrix<f32>,
    pub used_word_durations: Vec<usize>,
    pub frame_word_ids: Vec<usize>,
    pub word_ids: Vec<usize>,
}

/// Gives the frames needed to reach a multiple of `m` to the last word.
pub fn pad_durations(durations: &mut [usize], m: usize) {
    let total: usize = durations.iter().sum();
    if let Some(last) = durations.last_mut() {
        *last += total.div_ceil(m) * m - total;
    }
}

/// Seed of the post-net draw, decorrelated from the prior draw's seed.
fn postnet_seed(seed: u64) -> u64 {
    let mut z = seed.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn synthesize<F: Scalar>(model: &Model<F>, req: &SynthesisRequest) -> Result<SynthesisResult> {
    for (name, t) in [("temperature", req.temperature), ("prior temperature", req.prior_temperature)] {
        if !(t.is_finite() && t >= 0.0) {
            return Err(Error::Config(format!("{name} must be finite and non-negative, got {t}")));
        }
    }
    let seq = parse_phoneme_text(&req.phoneme_text, &model.vocab)?;
    if let Some((&index, _)) = req.duration_overrides.iter().find(|(&w, _)| w >= seq.word_count) {
        return Err(Error::WordIndex { index, words: seq.word_count });
    }
    let mut g = Graph::inference(&model.store);
    let mut durations = model.encoder.infer_word_durations(&mut g, &seq)?;
    for (&w, &f) in &req.duration_overrides {
        durations[w] = f;
    }
    pad_durations(&mut durations, model.vg.stride());

    let mut drop = Dropout::off();
    let enc = model.encoder.encode(&mut g, &seq, Some(&durations), &mut drop)?;
    let t = durations.iter().sum::<usize>();
    let cond = model.vg.pool_condition(&mut g, enc.h_l);
    let z0 = g.constant(sample_latent::<F>(t / model.vg.stride(), model.vg.latent_size(), req.prior_temperature, req.seed));
    let z = model.vg.vp_inverse(&mut g, z0, cond);
    let coarse = model.vg.decode(&mut g, z, enc.h_l)?;
    let pn_cond = model.postnet_condition(&mut g, enc.h_l, coarse);
    let fine = model.postnet.sample(&mut g, pn_cond, req.temperature, postnet_seed(req.seed))?;

    let mel = model.mel_stats.denormalize(g.value(fine));
    let coarse_mel = model.mel_stats.denormalize(g.value(coarse));
    if !mel.all_finite() || !coarse_mel.all_finite() {
        return Err(Error::NonFinite { step: 0, stage: "synthesis" });
    }
    Ok(SynthesisResult {
        mel: MelSpectrogram::new(mel)?,
        coarse_mel: MelSpectrogram::new(coarse_mel)?,
        attention: enc.attention.cast(),
        frame_word_ids: frame_word_ids(&durations)?,
        used_word_durations: durations,
        word_ids: seq.word_ids,
    })
}

/// One result per `(temperature, seed)` pair, temperatures outermost.
pub fn sample_grid<F: Scalar>(
    model: &Model<F>,
    req: &SynthesisRequest,
    temperatures: &[f64],
    seeds: &[u64],
) -> Result<Vec<((f64, u64), SynthesisResult)>> {
    if temperatures.is_empty() || seeds.is_empty() {
        return Err(Error::Config("sample grid needs at least one temperature and one seed".into()));
    }
    let mut out = Vec::with_capacity(temperatures.len() * seeds.len());
    for &t in temperatures {
        for &s in seeds {
            let r = SynthesisRequest { temperature: t, seed: s, ..req.clone() };
            out.push(((t, s), synthesize(model, &r)?));
        }
    }
    Ok(out)
}

/// Runs `cmd` through the shell with the mel path appended and returns the
/// vocoder's exit code.
pub fn vocode(mel_path: &Path, cmd: Option<&str>) -> Result<i32> {
    let Some(cmd) = cmd.filter(|c| !c.trim().is_empty()) else {
        return Err(Error::Vocoder(
            "no vocoder configured; pass --vocoder \"<command>\" (the mel path is appended as the last argument), \
             e.g. a HiFi-GAN inference script"
                .into(),
        ));
    };
    if !mel_path.exists() {
        return Err(Error::Vocoder(format!("mel file {} does not exist", mel_path.display())));
    }
    let status = Command::new("sh")
        .arg("-c")
        .arg(format!("{cmd} \"$0\""))
        .arg(mel_path)
        .status()
        .map_err(|e| Error::Vocoder(format!("could not start shell: {e}")))?;
    match status.code() {
        Some(127) => Err(Error::Vocoder(format!("vocoder command not found: `{cmd}`; check that it is installed and on PATH"))),
        Some(c) => Ok(c),
        None => Err(Error::Vocoder("vocoder terminated by a signal".into())),
    }
}

/// Output path with `.wav` swapped in for the mel extension.
pub fn wav_path_for(mel_path: &Path) -> PathBuf {
    mel_path.with_extension("wav")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::corpus::toy_vocab;

    fn model() -> Model<f32> {
        Model::new(&ModelConfig::micro(), toy_vocab(), 5).unwrap()
    }

    #[test]
    fn padding_goes_to_last_word() {
        let mut d = vec![3, 5, 2];
        pad_durations(&mut d, 4);
        assert_eq!(d, vec![3, 5, 4]);
        let mut d = vec![4, 4];
        pad_durations(&mut d, 4);
        assert_eq!(d, vec![4, 4]);
    }

    #[test]
    fn override_sets_frame_count() {
        let m = model();
        let req = SynthesisRequest::new("AA1 M | SIL | IY1 N", 1).with_override(1, 40);
        let r = synthesize(&m, &req).unwrap();
        assert_eq!(r.frame_word_ids.iter().filter(|&&w| w == 1).count(), 40);
        let t: usize = r.used_word_durations.iter().sum();
        assert_eq!(r.mel.n_frames(), t);
        assert_eq!(t % 4, 0);
        assert_eq!(r.mel.frames.rows(), r.coarse_mel.frames.rows());
    }

    #[test]
    fn bad_requests_rejected() {
        let m = model();
        assert!(matches!(synthesize(&m, &SynthesisRequest::new("AA1 | M", 1).with_override(2, 5)), Err(Error::WordIndex { index: 2, words: 2 })));
        assert!(matches!(synthesize(&m, &SynthesisRequest::new("AA1 | ZZ", 1)), Err(Error::UnknownPhoneme { .. })));
        assert!(synthesize(&m, &SynthesisRequest::new("AA1", 1).with_temperature(f64::NAN)).is_err());
        assert!(synthesize(&m, &SynthesisRequest::new("AA1", 1).with_override(0, 0)).is_err());
        let r = synthesize(&m, &SynthesisRequest::new("AA1 | SIL | M", 1).with_override(1, 0)).unwrap();
        assert!(!r.frame_word_ids.contains(&1));
    }

    #[test]
    fn seeds_and_determinism() {
        let m = model();
        let req = SynthesisRequest::new("AA1 M | IY1", 1237);
        let a = synthesize(&m, &req).unwrap();
        let b = synthesize(&m, &req).unwrap();
        assert_eq!(a.mel.to_bytes(), b.mel.to_bytes());
        let grid = sample_grid(&m, &req, &[0.8], &[1237, 1239, 3237]).unwrap();
        for i in 0..3 {
            for j in i + 1..3 {
                assert!(grid[i].1.mel.frames.max_abs_diff(&grid[j].1.mel.frames) > 0.0);
            }
        }
    }

    #[test]
    fn vocoder_errors() {
        let dir = tempfile::tempdir().unwrap();
        let mel = dir.path().join("a.mel1");
        std::fs::write(&mel, b"x").unwrap();
        assert!(matches!(vocode(&mel, None), Err(Error::Vocoder(m)) if m.contains("--vocoder")));
        assert_eq!(vocode(&mel, Some("exit 3 #")).unwrap(), 3);
        assert_eq!(vocode(&mel, Some("test -f")).unwrap(), 0);
        assert!(vocode(&mel, Some("definitely-not-a-vocoder-xyz")).is_err());
    }
}
