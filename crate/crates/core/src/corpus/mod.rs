//! Dataset ingestion: phoneme text, mel extraction and files, manifests, and
//! the procedural toy corpus.

mod manifest;
mod mel;
mod phonemes;
mod toy;

pub use manifest::{load_mel_for, load_utterances, DatasetManifest, Split, Utterance, UtteranceRecord};
pub use mel::{
    extract_mel, hann_window, hz_to_mel, load_mel, load_wav, mel_filterbank, mel_to_hz, save_mel, MelSpectrogram, MelStats, F_MAX,
    F_MIN, HOP, MAG_FLOOR, MEL_MAGIC, N_FFT, N_MELS, SAMPLE_RATE, WIN,
};
pub use phonemes::{parse_phoneme_text, phoneme_text, PhonemeSequence, PhonemeVocab, PAD, SIL, WORD_SEP};
pub use toy::{make_toy_corpus, toy_symbols, toy_vocab, ToyCorpus};
