use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::mel::{extract_mel, load_mel, load_wav, MelSpectrogram};
use super::phonemes::{parse_phoneme_text, PhonemeSequence, PhonemeVocab};
use crate::error::{io_err, Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UtteranceRecord {
    pub id: String,
    pub phoneme_text: String,
    pub wav_path: Option<PathBuf>,
    pub mel_path: Option<PathBuf>,
    pub word_durations: Option<Vec<usize>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            _ => Err(Error::Manifest { line: 0, msg: format!("unknown split {s:?}") }),
        }
    }
}

/// Tab-separated manifest:
///
/// ```text
/// # vocab: <pad> SIL AA0 ...
/// # split: train
/// id<TAB>phoneme text<TAB>audio path (.wav or mel file)<TAB>word durations (comma-separated, or -)
/// ```
///
/// Relative paths resolve against the manifest's directory.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<UtteranceRecord>,
    pub phoneme_vocab: PhonemeVocab,
    pub split: Split,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        for (i, r) in self.records.iter().enumerate() {
            let err = |msg: String| Error::Manifest { line: i + 1, msg };
            if !ids.insert(r.id.as_str()) {
                return Err(err(format!("duplicate id {:?}", r.id)));
            }
            let seq = parse_phoneme_text(&r.phoneme_text, &self.phoneme_vocab).map_err(|e| err(format!("{}: {e}", r.id)))?;
            if let Some(d) = &r.word_durations {
                if d.len() != seq.word_count {
                    return Err(err(format!("{}: {} durations for {} words", r.id, d.len(), seq.word_count)));
                }
            }
        }
        Ok(())
    }

    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut vocab = None;
        let mut split = Split::Train;
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let err = |msg: String| Error::Manifest { line: i + 1, msg };
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                let rest = rest.trim();
                if let Some(v) = rest.strip_prefix("vocab:") {
                    vocab = Some(PhonemeVocab::from_line(v).map_err(|e| err(e.to_string()))?);
                } else if let Some(s) = rest.strip_prefix("split:") {
                    split = s.trim().parse().map_err(|_| err(format!("unknown split {:?}", s.trim())))?;
                }
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(err(format!("expected 4 tab-separated fields, got {}", fields.len())));
            }
            let path = base_dir.join(fields[2].trim());
            let is_wav = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav"));
            let durs = fields[3].trim();
            let word_durations = if durs.is_empty() || durs == "-" {
                None
            } else {
                let d: std::result::Result<Vec<usize>, _> = durs.split(',').map(|x| x.trim().parse::<usize>()).collect();
                Some(d.map_err(|e| err(format!("bad duration list {durs:?}: {e}")))?)
            };
            records.push(UtteranceRecord {
                id: fields[0].trim().to_string(),
                phoneme_text: fields[1].trim().to_string(),
                wav_path: is_wav.then(|| path.clone()),
                mel_path: (!is_wav).then_some(path),
                word_durations,
            });
        }
        let m = Self { records, phoneme_vocab: vocab.unwrap_or_else(PhonemeVocab::arpabet), split };
        m.validate()?;
        Ok(m)
    }

    /// Text form with paths written relative to `base_dir` where possible.
    pub fn to_text(&self, base_dir: &Path) -> String {
        let mut out = format!("# vocab: {}\n# split: {}\n", self.phoneme_vocab.to_line(), self.split);
        for r in &self.records {
            let p = r.mel_path.as_ref().or(r.wav_path.as_ref()).map(|p| p.strip_prefix(base_dir).unwrap_or(p).display().to_string());
            let d = r.word_durations.as_ref().map_or("-".to_string(), |d| d.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(","));
            out.push_str(&format!("{}\t{}\t{}\t{}\n", r.id, r.phoneme_text, p.unwrap_or_default(), d));
        }
        out
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = self.to_text(path.parent().unwrap_or(Path::new(".")));
        std::fs::write(path, text).map_err(io_err(path))
    }
}

/// A training-ready utterance: frames padded to a multiple of 4 and the
/// padding absorbed by the last word.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub seq: PhonemeSequence,
    pub mel: MelSpectrogram,
    pub word_durations: Vec<usize>,
}

impl Utterance {
    pub fn new(id: String, seq: PhonemeSequence, mel: MelSpectrogram, word_durations: Vec<usize>) -> Result<Self> {
        if word_durations.len() != seq.word_count {
            return Err(Error::Duration(format!("{id}: {} durations for {} words", word_durations.len(), seq.word_count)));
        }
        let total: usize = word_durations.iter().sum();
        if total != mel.n_frames() {
            return Err(Error::Duration(format!("{id}: durations sum to {total} but mel has {} frames", mel.n_frames())));
        }
        let mel = mel.pad_to_multiple(4);
        let mut word_durations = word_durations;
        *word_durations.last_mut().unwrap() += mel.n_frames() - total;
        Ok(Self { id, seq, mel, word_durations })
    }
}

pub fn load_mel_for(record: &UtteranceRecord) -> Result<MelSpectrogram> {
    match (&record.mel_path, &record.wav_path) {
        (Some(p), _) => load_mel(p),
        (None, Some(p)) => {
            let (samples, sr) = load_wav(p)?;
            extract_mel(&samples, sr)
        }
        (None, None) => Err(Error::Manifest { line: 0, msg: format!("{}: record has no audio", record.id) }),
    }
}

pub fn load_utterances(manifest: &DatasetManifest) -> Result<Vec<Utterance>> {
    manifest
        .records
        .iter()
        .map(|r| {
            let seq = parse_phoneme_text(&r.phoneme_text, &manifest.phoneme_vocab)?;
            let durs = r.word_durations.clone().ok_or_else(|| Error::Duration(format!("{}: training record needs word durations", r.id)))?;
            Utterance::new(r.id.clone(), seq, load_mel_for(r)?, durs)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use mixtts_tensor::Matrix;

    #[test]
    fn text_round_trip() {
        let v = PhonemeVocab::new(["A", "B"]).unwrap();
        let base = Path::new("/data");
        let m = DatasetManifest {
            records: vec![
                UtteranceRecord {
                    id: "u1".into(),
                    phoneme_text: "A | SIL | B".into(),
                    wav_path: None,
                    mel_path: Some(base.join("u1.mel1")),
                    word_durations: Some(vec![3, 2, 4]),
                },
                UtteranceRecord { id: "u2".into(), phoneme_text: "B A".into(), wav_path: Some(base.join("x/u2.wav")), mel_path: None, word_durations: None },
            ],
            phoneme_vocab: v,
            split: Split::Valid,
        };
        let text = m.to_text(base);
        assert!(text.contains("u1\tA | SIL | B\tu1.mel1\t3,2,4"));
        assert_eq!(DatasetManifest::parse(&text, base).unwrap(), m);
    }

    #[test]
    fn rejects_bad_records() {
        let base = Path::new(".");
        let hdr = "# vocab: <pad> SIL A B\n";
        assert!(DatasetManifest::parse(&format!("{hdr}u\tA | B\tu.mel1\t3\n"), base).is_err());
        assert!(DatasetManifest::parse(&format!("{hdr}u\tA | C\tu.mel1\t3,1\n"), base).is_err());
        assert!(DatasetManifest::parse(&format!("{hdr}u\tA\tu.mel1\t3\nu\tB\tu.mel1\t3\n"), base).is_err());
        assert!(DatasetManifest::parse(&format!("{hdr}u\tA\tu.mel1\n"), base).is_err());
    }

    #[test]
    fn utterance_padding_goes_to_last_word() {
        let seq = PhonemeSequence::new(vec![2, 3], vec![0, 1]).unwrap();
        let mel = MelSpectrogram::new(Matrix::zeros(7, 80)).unwrap();
        let u = Utterance::new("x".into(), seq.clone(), mel.clone(), vec![3, 4]).unwrap();
        assert_eq!(u.mel.n_frames(), 8);
        assert_eq!(u.word_durations, vec![3, 5]);
        assert!(Utterance::new("x".into(), seq, mel, vec![3, 3]).is_err());
    }
}
