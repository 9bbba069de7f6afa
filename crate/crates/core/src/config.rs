//! Model and training configuration. The on-disk form is TOML with one table
//! per module; key names follow the rows of the published hyperparameter table.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io_err, Error, Result};
use crate::N_MELS;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinguisticEncoderConfig {
    pub phoneme_embedding: usize,
    pub word_phoneme_encoder_layers: usize,
    pub hidden_size: usize,
    pub conv1d_kernel: usize,
    pub conv1d_filter_size: usize,
    pub attention_heads: usize,
    pub relative_window: usize,
    pub duration_predictor_kernel: usize,
    pub dropout: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VGConfig {
    pub encoder_layers: usize,
    pub encoder_kernel: usize,
    pub decoder_layers: usize,
    pub decoder_kernel: usize,
    pub channel_size: usize,
    pub latent_size: usize,
    pub vp_flow_steps: usize,
    pub vp_flow_layers: usize,
    pub vp_flow_channel_size: usize,
    pub vp_flow_conv1d_kernel: usize,
    pub temporal_stride: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PostNetConfig {
    pub wavenet_layers: usize,
    pub wavenet_kernel: usize,
    pub wavenet_channel_size: usize,
    pub flow_steps: usize,
    pub shared_groups: usize,
    pub channels: usize,
    /// Frames folded into channels before the flow (1 = per-frame flow).
    pub squeeze: usize,
    pub temperature: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub linguistic_encoder: LinguisticEncoderConfig,
    pub variational_generator: VGConfig,
    pub post_net: PostNetConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub warmup_steps: u64,
    pub max_steps: u64,
    /// Linear KL ramp length; `None` means 10% of `max_steps`.
    pub kl_anneal_steps: Option<u64>,
    pub grad_clip_norm: f64,
    /// Multiplier on the inverse-square-root schedule.
    pub learning_rate_scale: f64,
    pub seed: u64,
    pub checkpoint_interval: u64,
    pub divergence_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            adam_beta1: 0.9,
            adam_beta2: 0.98,
            adam_epsilon: 1e-9,
            warmup_steps: 4000,
            max_steps: 320_000,
            kl_anneal_steps: None,
            grad_clip_norm: 1.0,
            learning_rate_scale: 1.0,
            seed: 1234,
            checkpoint_interval: 10_000,
            divergence_threshold: 1e4,
        }
    }
}

impl TrainConfig {
    /// Desk-scale settings used with the toy corpus.
    pub fn toy() -> Self {
        Self {
            batch_size: 16,
            warmup_steps: 200,
            max_steps: 2000,
            checkpoint_interval: 1000,
            // d=32 makes the Noam peak large; full scale oscillates once l_pn plateaus
            learning_rate_scale: 0.3,
            ..Self::default()
        }
    }

    pub fn kl_anneal(&self) -> u64 {
        self.kl_anneal_steps.unwrap_or(self.max_steps / 10)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 || self.warmup_steps == 0 || self.max_steps == 0 || self.checkpoint_interval == 0 {
            return bad("batch_size, warmup_steps, max_steps and checkpoint_interval must be positive");
        }
        for b in [self.adam_beta1, self.adam_beta2] {
            if !(b > 0.0 && b < 1.0) {
                return bad("adam betas must lie in (0, 1)");
            }
        }
        if !(self.adam_epsilon > 0.0 && self.grad_clip_norm > 0.0 && self.learning_rate_scale > 0.0) {
            return bad("adam_epsilon, grad_clip_norm and learning_rate_scale must be positive");
        }
        Ok(())
    }
}

/// A config file: the three model tables plus an optional `[train]` table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub linguistic_encoder: LinguisticEncoderConfig,
    pub variational_generator: VGConfig,
    pub post_net: PostNetConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

impl ConfigFile {
    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            linguistic_encoder: self.linguistic_encoder.clone(),
            variational_generator: self.variational_generator.clone(),
            post_net: self.post_net.clone(),
        }
    }

    pub fn from_parts(model: &ModelConfig, train: &TrainConfig) -> Self {
        Self {
            linguistic_encoder: model.linguistic_encoder.clone(),
            variational_generator: model.variational_generator.clone(),
            post_net: model.post_net.clone(),
            train: train.clone(),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.model().validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Loads a preset by name or a TOML file by path.
    pub fn load(spec: &str) -> Result<Self> {
        if let Some(model) = ModelConfig::preset(spec) {
            let train = if spec == "normal" || spec == "small" { TrainConfig::default() } else { TrainConfig::toy() };
            return Ok(Self::from_parts(&model, &train));
        }
        let text = std::fs::read_to_string(Path::new(spec)).map_err(io_err(spec))?;
        Self::parse(&text)
    }
}

impl ModelConfig {
    pub const PRESETS: [&'static str; 4] = ["normal", "small", "toy", "micro"];

    pub fn normal() -> Self {
        Self {
            linguistic_encoder: LinguisticEncoderConfig {
                phoneme_embedding: 192,
                word_phoneme_encoder_layers: 4,
                hidden_size: 192,
                conv1d_kernel: 5,
                conv1d_filter_size: 768,
                attention_heads: 2,
                relative_window: 16,
                duration_predictor_kernel: 3,
                dropout: 0.1,
            },
            variational_generator: VGConfig {
                encoder_layers: 8,
                encoder_kernel: 5,
                decoder_layers: 4,
                decoder_kernel: 5,
                channel_size: 192,
                latent_size: 16,
                vp_flow_steps: 4,
                vp_flow_layers: 4,
                vp_flow_channel_size: 64,
                vp_flow_conv1d_kernel: 3,
                temporal_stride: 4,
            },
            post_net: PostNetConfig {
                wavenet_layers: 3,
                wavenet_kernel: 3,
                wavenet_channel_size: 192,
                flow_steps: 12,
                shared_groups: 3,
                channels: N_MELS,
                squeeze: 2,
                temperature: 0.8,
            },
        }
    }

    pub fn small() -> Self {
        let mut c = Self::normal();
        let le = &mut c.linguistic_encoder;
        le.phoneme_embedding = 128;
        le.word_phoneme_encoder_layers = 3;
        le.hidden_size = 128;
        le.conv1d_kernel = 3;
        le.conv1d_filter_size = 512;
        let vg = &mut c.variational_generator;
        vg.encoder_kernel = 3;
        vg.decoder_layers = 3;
        vg.decoder_kernel = 3;
        vg.channel_size = 128;
        vg.vp_flow_steps = 3;
        vg.vp_flow_channel_size = 32;
        let pn = &mut c.post_net;
        pn.wavenet_channel_size = 128;
        pn.flow_steps = 8;
        pn.shared_groups = 2;
        c
    }

    /// Desk-scale model for overfitting the toy corpus on a CPU.
    pub fn toy() -> Self {
        Self {
            linguistic_encoder: LinguisticEncoderConfig {
                phoneme_embedding: 32,
                word_phoneme_encoder_layers: 1,
                hidden_size: 32,
                conv1d_kernel: 3,
                conv1d_filter_size: 64,
                attention_heads: 2,
                relative_window: 16,
                duration_predictor_kernel: 3,
                dropout: 0.0,
            },
            variational_generator: VGConfig {
                encoder_layers: 2,
                encoder_kernel: 3,
                decoder_layers: 2,
                decoder_kernel: 3,
                channel_size: 48,
                latent_size: 16,
                vp_flow_steps: 2,
                vp_flow_layers: 2,
                vp_flow_channel_size: 16,
                vp_flow_conv1d_kernel: 3,
                temporal_stride: 4,
            },
            post_net: PostNetConfig {
                wavenet_layers: 2,
                wavenet_kernel: 3,
                wavenet_channel_size: 32,
                flow_steps: 4,
                shared_groups: 2,
                channels: N_MELS,
                squeeze: 1,
                temperature: 0.8,
            },
        }
    }

    /// Smallest configuration exercising every code path; used by gradient checks.
    pub fn micro() -> Self {
        Self {
            linguistic_encoder: LinguisticEncoderConfig {
                phoneme_embedding: 8,
                word_phoneme_encoder_layers: 1,
                hidden_size: 8,
                conv1d_kernel: 3,
                conv1d_filter_size: 12,
                attention_heads: 2,
                relative_window: 4,
                duration_predictor_kernel: 3,
                dropout: 0.1,
            },
            variational_generator: VGConfig {
                encoder_layers: 2,
                encoder_kernel: 3,
                decoder_layers: 2,
                decoder_kernel: 3,
                channel_size: 8,
                latent_size: 4,
                vp_flow_steps: 2,
                vp_flow_layers: 2,
                vp_flow_channel_size: 6,
                vp_flow_conv1d_kernel: 3,
                temporal_stride: 4,
            },
            post_net: PostNetConfig {
                wavenet_layers: 2,
                wavenet_kernel: 3,
                wavenet_channel_size: 8,
                flow_steps: 2,
                shared_groups: 1,
                channels: N_MELS,
                squeeze: 2,
                temperature: 0.8,
            },
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "normal" => Some(Self::normal()),
            "small" => Some(Self::small()),
            "toy" => Some(Self::toy()),
            "micro" => Some(Self::micro()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let le = &self.linguistic_encoder;
        let vg = &self.variational_generator;
        let pn = &self.post_net;
        let fail = |m: String| Err(Error::Config(m));
        let positive = [
            ("hidden_size", le.hidden_size),
            ("word_phoneme_encoder_layers", le.word_phoneme_encoder_layers),
            ("conv1d_kernel", le.conv1d_kernel),
            ("conv1d_filter_size", le.conv1d_filter_size),
            ("attention_heads", le.attention_heads),
            ("duration_predictor_kernel", le.duration_predictor_kernel),
            ("encoder_layers", vg.encoder_layers),
            ("decoder_layers", vg.decoder_layers),
            ("channel_size", vg.channel_size),
            ("latent_size", vg.latent_size),
            ("vp_flow_steps", vg.vp_flow_steps),
            ("vp_flow_layers", vg.vp_flow_layers),
            ("vp_flow_channel_size", vg.vp_flow_channel_size),
            ("wavenet_layers", pn.wavenet_layers),
            ("wavenet_channel_size", pn.wavenet_channel_size),
            ("flow_steps", pn.flow_steps),
            ("shared_groups", pn.shared_groups),
            ("squeeze", pn.squeeze),
        ];
        for (name, v) in positive {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        if le.phoneme_embedding != le.hidden_size {
            return fail(format!("phoneme_embedding ({}) must equal hidden_size ({})", le.phoneme_embedding, le.hidden_size));
        }
        if le.hidden_size % le.attention_heads != 0 {
            return fail(format!("hidden_size {} not divisible by {} heads", le.hidden_size, le.attention_heads));
        }
        for (name, k) in [
            ("conv1d_kernel", le.conv1d_kernel),
            ("duration_predictor_kernel", le.duration_predictor_kernel),
            ("encoder_kernel", vg.encoder_kernel),
            ("decoder_kernel", vg.decoder_kernel),
            ("vp_flow_conv1d_kernel", vg.vp_flow_conv1d_kernel),
            ("wavenet_kernel", pn.wavenet_kernel),
        ] {
            if k % 2 == 0 {
                return fail(format!("{name} must be odd, got {k}"));
            }
        }
        if !(0.0..1.0).contains(&le.dropout) {
            return fail("dropout must lie in [0, 1)".into());
        }
        if vg.temporal_stride != 4 {
            return fail(format!("temporal_stride must be 4, got {}", vg.temporal_stride));
        }
        if vg.latent_size % 2 != 0 {
            return fail(format!("latent_size must be even, got {}", vg.latent_size));
        }
        if pn.channels != N_MELS {
            return fail(format!("post_net channels must be {N_MELS}"));
        }
        if pn.shared_groups > pn.flow_steps {
            return fail(format!("shared_groups {} exceeds flow_steps {}", pn.shared_groups, pn.flow_steps));
        }
        if vg.temporal_stride % pn.squeeze != 0 {
            return fail(format!("squeeze {} must divide the temporal stride", pn.squeeze));
        }
        if !(pn.temperature >= 0.0 && pn.temperature.is_finite()) {
            return fail("temperature must be finite and non-negative".into());
        }
        Ok(())
    }

    /// Canonical TOML text; the fingerprint is computed over exactly this.
    pub fn canonical_text(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn fingerprint(&self) -> [u8; 32] {
        Sha256::digest(self.canonical_text().as_bytes()).into()
    }

    pub fn fingerprint_hex(&self) -> String {
        hex(&self.fingerprint())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for name in ModelConfig::PRESETS {
            let cfg = ConfigFile::load(name).unwrap();
            cfg.model().validate().unwrap();
            let again = ConfigFile::parse(&cfg.to_toml()).unwrap();
            assert_eq!(again, cfg);
        }
    }

    #[test]
    fn fingerprints_differ_between_presets() {
        assert_ne!(ModelConfig::normal().fingerprint(), ModelConfig::small().fingerprint());
        assert_eq!(ModelConfig::normal().fingerprint(), ModelConfig::normal().fingerprint());
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = ModelConfig::normal();
        c.post_net.shared_groups = 13;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = ModelConfig::normal();
        c.variational_generator.latent_size = 15;
        assert!(c.validate().is_err());
        let text = ConfigFile::load("small").unwrap().to_toml().replace("hidden_size", "hiden_size");
        assert!(ConfigFile::parse(&text).is_err());
    }

    #[test]
    fn train_section_is_optional() {
        let text = ConfigFile::load("small").unwrap().to_toml();
        let model_only: String = text.split("[train]").next().unwrap().to_string();
        let cfg = ConfigFile::parse(&model_only).unwrap();
        assert_eq!(cfg.train, TrainConfig::default());
        assert_eq!(TrainConfig::toy().kl_anneal(), 200);
    }
}
