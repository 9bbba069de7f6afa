use mixtts_tensor::{Graph, ParamStore, Scalar, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::corpus::{MelStats, PhonemeVocab};
use crate::error::Result;
use crate::linguistic_encoder::LinguisticEncoder;
use crate::nn::Init;
use crate::postnet::PostNet;
use crate::variational_generator::VariationalGenerator;
use crate::N_MELS;

/// Parameter-name prefixes of the headline modules.
pub mod prefix {
    pub const LINGUISTIC_ENCODER: &str = "le.";
    pub const DURATION_PREDICTOR: &str = "dp.";
    pub const VG_ENCODER: &str = "vg.enc.";
    pub const VG_DECODER: &str = "vg.dec.";
    pub const VP_FLOW: &str = "vp.";
    pub const POSTNET: &str = "pn.";
}

/// All modules plus their parameters, vocabulary and mel normalization.
#[derive(Clone, Debug)]
pub struct Model<F: Scalar> {
    pub config: ModelConfig,
    pub vocab: PhonemeVocab,
    pub mel_stats: MelStats,
    pub store: ParamStore<F>,
    pub encoder: LinguisticEncoder,
    pub vg: VariationalGenerator,
    pub postnet: PostNet,
}

impl<F: Scalar> Model<F> {
    pub fn new(config: &ModelConfig, vocab: PhonemeVocab, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.linguistic_encoder.hidden_size;
        let (encoder, vg, postnet) = {
            let mut init = Init::new(&mut store, &mut rng);
            let encoder = LinguisticEncoder::new(&mut init, &config.linguistic_encoder, vocab.len());
            let vg = VariationalGenerator::new(&mut init, &config.variational_generator, d);
            let postnet = PostNet::new(&mut init, &config.post_net, N_MELS, d + N_MELS)?;
            (encoder, vg, postnet)
        };
        Ok(Self { config: config.clone(), vocab, mel_stats: MelStats::identity(), store, encoder, vg, postnet })
    }

    pub fn hidden_size(&self) -> usize {
        self.config.linguistic_encoder.hidden_size
    }

    /// Post-net condition `[H_L, M̄_c]`, cut from the upstream gradient path.
    pub fn postnet_condition(&self, g: &mut Graph<'_, F>, h_l: Var, coarse: Var) -> Var {
        let h = g.detach(h_l);
        let c = g.detach(coarse);
        g.concat_cols(&[h, c])
    }

    /// Same architecture and values at another scalar width.
    pub fn cast<G: Scalar>(&self) -> Model<G> {
        Model {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            mel_stats: self.mel_stats.clone(),
            store: self.store.cast(),
            encoder: self.encoder.clone(),
            vg: self.vg.clone(),
            postnet: self.postnet.clone(),
        }
    }
}
