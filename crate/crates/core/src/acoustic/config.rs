use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Hyperparameters of the spectrogram prediction network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcousticConfig {
    pub embed_dim: usize,
    pub enc_conv_layers: usize,
    pub enc_filters: usize,
    pub enc_kernel: usize,
    /// Total over both directions.
    pub enc_blstm_units: usize,
    pub prenet_units: usize,
    pub prenet_layers: usize,
    pub dec_lstm_units: usize,
    pub attn_dim: usize,
    pub attn_location_filters: usize,
    pub attn_location_kernel: usize,
    pub postnet_layers: usize,
    pub postnet_filters: usize,
    pub postnet_kernel: usize,
    pub mel_channels: usize,
    pub max_decoder_steps: usize,
    pub stop_threshold: f64,
    pub reduction_factor: usize,
    pub encoder_dropout: f64,
    pub prenet_dropout: f64,
    pub postnet_dropout: f64,
    /// Keep prenet dropout on at inference.
    pub prenet_dropout_at_inference: bool,
    /// Apply tanh after the final post-net layer too.
    pub postnet_final_tanh: bool,
    /// Feed post-net frames back at inference instead of pre-net-projection frames.
    pub feed_postnet_frames: bool,
    pub stop_pos_weight: f64,
}

impl Default for AcousticConfig {
    fn default() -> Self {
        Self {
            embed_dim: 512,
            enc_conv_layers: 3,
            enc_filters: 512,
            enc_kernel: 5,
            enc_blstm_units: 512,
            prenet_units: 256,
            prenet_layers: 2,
            dec_lstm_units: 1024,
            attn_dim: 128,
            attn_location_filters: 32,
            attn_location_kernel: 31,
            postnet_layers: 5,
            postnet_filters: 512,
            postnet_kernel: 5,
            mel_channels: 80,
            max_decoder_steps: 1000,
            stop_threshold: 0.5,
            reduction_factor: 1,
            encoder_dropout: 0.5,
            prenet_dropout: 0.5,
            postnet_dropout: 0.5,
            prenet_dropout_at_inference: true,
            postnet_final_tanh: false,
            feed_postnet_frames: false,
            stop_pos_weight: 5.0,
        }
    }
}

impl AcousticConfig {
    /// Small configuration for tests and toy corpora: embed 16, filters 16,
    /// LSTM 32, attention 8, two encoder convolutions.
    pub fn shrunken() -> Self {
        Self {
            embed_dim: 16,
            enc_conv_layers: 2,
            enc_filters: 16,
            enc_kernel: 5,
            enc_blstm_units: 32,
            prenet_units: 16,
            dec_lstm_units: 32,
            attn_dim: 8,
            attn_location_filters: 4,
            attn_location_kernel: 7,
            postnet_filters: 16,
            max_decoder_steps: 400,
            ..Self::default()
        }
    }

    pub fn enc_dim(&self) -> usize {
        self.enc_blstm_units
    }

    pub fn validate(&self) -> Result<()> {
        let extents = [
            self.embed_dim,
            self.enc_conv_layers,
            self.enc_filters,
            self.enc_kernel,
            self.prenet_units,
            self.prenet_layers,
            self.dec_lstm_units,
            self.attn_dim,
            self.attn_location_filters,
            self.attn_location_kernel,
            self.postnet_layers,
            self.postnet_filters,
            self.postnet_kernel,
            self.mel_channels,
            self.max_decoder_steps,
        ];
        let bad = |msg: String| Err(Error::invalid(format!("acoustic config: {msg}")));
        if extents.contains(&0) {
            return bad("all extents must be positive".into());
        }
        for (name, k) in [
            ("enc_kernel", self.enc_kernel),
            ("attn_location_kernel", self.attn_location_kernel),
            ("postnet_kernel", self.postnet_kernel),
        ] {
            if k % 2 == 0 {
                return bad(format!("{name} = {k} must be odd"));
            }
        }
        if self.enc_blstm_units % 2 != 0 || self.enc_blstm_units == 0 {
            return bad("enc_blstm_units must be even (split over two directions)".into());
        }
        if self.reduction_factor != 1 {
            return bad(format!("reduction_factor {} unsupported; only 1", self.reduction_factor));
        }
        if self.postnet_layers < 2 {
            return bad("post-net needs at least two layers".into());
        }
        for p in [self.encoder_dropout, self.prenet_dropout, self.postnet_dropout] {
            if !(0.0..1.0).contains(&p) {
                return bad(format!("dropout {p} outside [0, 1)"));
            }
        }
        if !(0.0..1.0).contains(&self.stop_threshold) || self.stop_pos_weight <= 0.0 {
            return bad("stop threshold must be in (0, 1) and positive weight > 0".into());
        }
        Ok(())
    }

    /// Stable hash of the serialized configuration.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}
