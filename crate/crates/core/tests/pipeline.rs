use mixtts_core::checkpoint::load_checkpoint;
use mixtts_core::corpus::{load_mel, make_toy_corpus, parse_phoneme_text, phoneme_text, toy_vocab, DatasetManifest, MelSpectrogram};
use mixtts_core::synth::{synthesize, SynthesisRequest};
use mixtts_core::tensor::Matrix;
use mixtts_core::trainer::fit;
use mixtts_core::{ModelConfig, TrainConfig};
use proptest::prelude::*;

#[test]
fn corpus_to_checkpoint_to_synthesis() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = make_toy_corpus(5, 4, 2);
    corpus.write(dir.path()).unwrap();
    let manifest = DatasetManifest::read(dir.path().join("manifest.tsv")).unwrap();
    assert_eq!(manifest.records.len(), 4);
    for (r, mel) in manifest.records.iter().zip(&corpus.mels) {
        let back = load_mel(r.mel_path.as_ref().unwrap()).unwrap();
        assert_eq!(back.to_bytes(), mel.to_bytes());
    }

    let tc = TrainConfig { batch_size: 2, max_steps: 4, checkpoint_interval: 2, ..TrainConfig::toy() };
    let mut seen = Vec::new();
    let out = dir.path().join("run");
    let trainer = fit::<f32>(&manifest, &ModelConfig::micro(), &tc, Some(&out), |s, lb| seen.push((s, lb.total))).unwrap();
    assert_eq!(seen.iter().map(|s| s.0).collect::<Vec<_>>(), vec![1, 2, 3, 4]);
    assert!(seen.iter().all(|s| s.1.is_finite()));
    assert!(out.join("train.log").exists());

    let ckpt = load_checkpoint::<f32>(out.join("step0000004.ckpt"), Some(&ModelConfig::micro())).unwrap();
    assert_eq!(ckpt.step, 4);
    assert!(ckpt.adam.is_some());
    let req = SynthesisRequest::new(manifest.records[0].phoneme_text.clone(), 9);
    let a = synthesize(&trainer.model, &req).unwrap();
    let b = synthesize(&ckpt.model, &req).unwrap();
    assert_eq!(a.mel.to_bytes(), b.mel.to_bytes());
    assert!(load_checkpoint::<f32>(out.join("step0000004.ckpt"), Some(&ModelConfig::toy())).is_err());
}

proptest! {
    #[test]
    fn mel_bytes_round_trip(rows in 1usize..6, seed in any::<u64>()) {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        let m = MelSpectrogram::new(Matrix::randn(rows, 80, 2.0, &mut rng)).unwrap();
        let back = MelSpectrogram::from_bytes(&m.to_bytes()).unwrap();
        prop_assert_eq!(back.to_bytes(), m.to_bytes());
    }

    #[test]
    fn phoneme_text_round_trip(words in prop::collection::vec(prop::collection::vec(0usize..10, 1..4), 1..5)) {
        let vocab = toy_vocab();
        let syms = vocab.symbols();
        let text = words
            .iter()
            .map(|w| w.iter().map(|&i| syms[1 + i % (syms.len() - 1)].as_str()).collect::<Vec<_>>().join(" "))
            .collect::<Vec<_>>()
            .join(" | ");
        let seq = parse_phoneme_text(&text, &vocab).unwrap();
        prop_assert_eq!(seq.word_count, words.len());
        prop_assert_eq!(phoneme_text(&seq, &vocab).unwrap(), text);
    }
}
