//! Hyperparameter schema and the flat `key = value` config file format.
//!
//! Defaults are the published table values; a config file only overrides.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::VoxError;

#[derive(Clone, Debug, PartialEq)]
pub struct Hyperparameters {
    pub sample_rate_hz: usize,
    pub fft_size: usize,
    pub win_length_samples: usize,
    pub hop_length_samples: usize,
    pub n_mel_bands: usize,
    pub reduction_factor: usize,
    pub speaker_embedding_dim: usize,
    pub char_embedding_dim: usize,
    pub encoder_layers: usize,
    pub encoder_conv_width: usize,
    pub encoder_channels: usize,
    pub decoder_prenet_channels: Vec<usize>,
    pub decoder_layers: usize,
    pub decoder_conv_width: usize,
    pub decoder_channels: usize,
    pub attention_channels: usize,
    pub positional_weight: f64,
    pub positional_initial_rate: f64,
    pub bridge_layers: usize,
    pub bridge_conv_width: usize,
    pub bridge_channels: usize,
    pub conditioner_channels: usize,
    pub upsample_strides: Vec<usize>,
    pub dropout_keep_prob: f64,
    pub max_grad_norm: f64,
    pub grad_clip_value: f64,
    pub vocoder_layers: usize,
    pub vocoder_cycle_length: usize,
    pub vocoder_residual_channels: usize,
    pub vocoder_skip_channels: usize,
    pub log_sigma_floor: f64,
    pub batch_size: usize,
    pub lr_initial: f64,
    pub lr_anneal_start_step: u64,
    pub lr_anneal_period: u64,
    pub silence_threshold_db: f64,
    pub silence_frame_ms: f64,
    pub stop_patience_steps: usize,
    pub attention_window: usize,
    pub max_decode_factor: usize,
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Hyperparameters {
            sample_rate_hz: 24000,
            fft_size: 2048,
            win_length_samples: 1200,
            hop_length_samples: 300,
            n_mel_bands: 80,
            reduction_factor: 4,
            speaker_embedding_dim: 32,
            char_embedding_dim: 256,
            encoder_layers: 7,
            encoder_conv_width: 5,
            encoder_channels: 128,
            decoder_prenet_channels: vec![128, 256],
            decoder_layers: 6,
            decoder_conv_width: 5,
            decoder_channels: 256,
            attention_channels: 256,
            positional_weight: 0.1,
            positional_initial_rate: 7.6,
            bridge_layers: 6,
            bridge_conv_width: 5,
            bridge_channels: 256,
            conditioner_channels: 80,
            upsample_strides: vec![15, 20],
            dropout_keep_prob: 0.95,
            max_grad_norm: 100.0,
            grad_clip_value: 5.0,
            vocoder_layers: 20,
            vocoder_cycle_length: 10,
            vocoder_residual_channels: 64,
            vocoder_skip_channels: 128,
            log_sigma_floor: -7.0,
            batch_size: 16,
            lr_initial: 0.001,
            lr_anneal_start_step: 500_000,
            lr_anneal_period: 200_000,
            silence_threshold_db: -40.0,
            silence_frame_ms: 20.0,
            stop_patience_steps: 2,
            attention_window: 3,
            max_decode_factor: 20,
        }
    }
}

impl Hyperparameters {
    pub fn validate(&self) -> Result<(), VoxError> {
        let invariant = |ok: bool, field: &str, constraint: &str| {
            if ok {
                Ok(())
            } else {
                Err(VoxError::Config(format!(
                    "invariant violation on `{field}`: {constraint}"
                )))
            }
        };
        invariant(
            self.win_length_samples <= self.fft_size,
            "win_length_samples",
            "must be <= fft_size",
        )?;
        let upsample: usize = self.upsample_strides.iter().product();
        invariant(
            upsample == self.hop_length_samples,
            "upsample_strides",
            "product must equal hop_length_samples",
        )?;
        invariant(
            self.vocoder_cycle_length > 0
                && self.vocoder_layers > 0
                && self.vocoder_layers % self.vocoder_cycle_length == 0,
            "vocoder_layers",
            "must be a positive multiple of vocoder_cycle_length",
        )?;
        invariant(
            self.dropout_keep_prob > 0.0 && self.dropout_keep_prob <= 1.0,
            "dropout_keep_prob",
            "must be in (0, 1]",
        )?;
        invariant(
            self.speaker_embedding_dim > 0,
            "speaker_embedding_dim",
            "must be positive",
        )?;
        invariant(
            self.decoder_prenet_channels.len() == 2,
            "decoder_prenet_channels",
            "expects exactly two affine widths",
        )?;
        invariant(self.reduction_factor > 0, "reduction_factor", "must be positive")?;
        invariant(self.hop_length_samples > 0, "hop_length_samples", "must be positive")?;
        Ok(())
    }

    /// Serialize as the same flat key/value format `load_config` parses.
    pub fn serialize(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.as_pairs() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    fn as_pairs(&self) -> Vec<(&'static str, String)> {
        let list = |v: &[usize]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        vec![
            ("sample_rate_hz", self.sample_rate_hz.to_string()),
            ("fft_size", self.fft_size.to_string()),
            ("win_length_samples", self.win_length_samples.to_string()),
            ("hop_length_samples", self.hop_length_samples.to_string()),
            ("n_mel_bands", self.n_mel_bands.to_string()),
            ("reduction_factor", self.reduction_factor.to_string()),
            ("speaker_embedding_dim", self.speaker_embedding_dim.to_string()),
            ("char_embedding_dim", self.char_embedding_dim.to_string()),
            ("encoder_layers", self.encoder_layers.to_string()),
            ("encoder_conv_width", self.encoder_conv_width.to_string()),
            ("encoder_channels", self.encoder_channels.to_string()),
            ("decoder_prenet_channels", list(&self.decoder_prenet_channels)),
            ("decoder_layers", self.decoder_layers.to_string()),
            ("decoder_conv_width", self.decoder_conv_width.to_string()),
            ("decoder_channels", self.decoder_channels.to_string()),
            ("attention_channels", self.attention_channels.to_string()),
            ("positional_weight", format_f64(self.positional_weight)),
            ("positional_initial_rate", format_f64(self.positional_initial_rate)),
            ("bridge_layers", self.bridge_layers.to_string()),
            ("bridge_conv_width", self.bridge_conv_width.to_string()),
            ("bridge_channels", self.bridge_channels.to_string()),
            ("conditioner_channels", self.conditioner_channels.to_string()),
            ("upsample_strides", list(&self.upsample_strides)),
            ("dropout_keep_prob", format_f64(self.dropout_keep_prob)),
            ("max_grad_norm", format_f64(self.max_grad_norm)),
            ("grad_clip_value", format_f64(self.grad_clip_value)),
            ("vocoder_layers", self.vocoder_layers.to_string()),
            ("vocoder_cycle_length", self.vocoder_cycle_length.to_string()),
            ("vocoder_residual_channels", self.vocoder_residual_channels.to_string()),
            ("vocoder_skip_channels", self.vocoder_skip_channels.to_string()),
            ("log_sigma_floor", format_f64(self.log_sigma_floor)),
            ("batch_size", self.batch_size.to_string()),
            ("lr_initial", format_f64(self.lr_initial)),
            ("lr_anneal_start_step", self.lr_anneal_start_step.to_string()),
            ("lr_anneal_period", self.lr_anneal_period.to_string()),
            ("silence_threshold_db", format_f64(self.silence_threshold_db)),
            ("silence_frame_ms", format_f64(self.silence_frame_ms)),
            ("stop_patience_steps", self.stop_patience_steps.to_string()),
            ("attention_window", self.attention_window.to_string()),
            ("max_decode_factor", self.max_decode_factor.to_string()),
        ]
    }

    fn apply(&mut self, key: &str, value: &str, line: usize) -> Result<(), VoxError> {
        let perr = |what: &str| {
            VoxError::Config(format!("line {line}: cannot parse `{value}` as {what} for `{key}`"))
        };
        macro_rules! set {
            ($field:ident, usize) => {
                self.$field = value.trim().parse().map_err(|_| perr("integer"))?
            };
            ($field:ident, u64) => {
                self.$field = value.trim().parse().map_err(|_| perr("integer"))?
            };
            ($field:ident, f64) => {
                self.$field = value.trim().parse().map_err(|_| perr("real"))?
            };
            ($field:ident, list) => {
                self.$field = value
                    .split(',')
                    .map(|v| v.trim().parse().map_err(|_| perr("integer list")))
                    .collect::<Result<Vec<usize>, _>>()?
            };
        }
        match key {
            "sample_rate_hz" => set!(sample_rate_hz, usize),
            "fft_size" => set!(fft_size, usize),
            "win_length_samples" => set!(win_length_samples, usize),
            "hop_length_samples" => set!(hop_length_samples, usize),
            "n_mel_bands" => set!(n_mel_bands, usize),
            "reduction_factor" => set!(reduction_factor, usize),
            "speaker_embedding_dim" => set!(speaker_embedding_dim, usize),
            "char_embedding_dim" => set!(char_embedding_dim, usize),
            "encoder_layers" => set!(encoder_layers, usize),
            "encoder_conv_width" => set!(encoder_conv_width, usize),
            "encoder_channels" => set!(encoder_channels, usize),
            "decoder_prenet_channels" => set!(decoder_prenet_channels, list),
            "decoder_layers" => set!(decoder_layers, usize),
            "decoder_conv_width" => set!(decoder_conv_width, usize),
            "decoder_channels" => set!(decoder_channels, usize),
            "attention_channels" => set!(attention_channels, usize),
            "positional_weight" => set!(positional_weight, f64),
            "positional_initial_rate" => set!(positional_initial_rate, f64),
            "bridge_layers" => set!(bridge_layers, usize),
            "bridge_conv_width" => set!(bridge_conv_width, usize),
            "bridge_channels" => set!(bridge_channels, usize),
            "conditioner_channels" => set!(conditioner_channels, usize),
            "upsample_strides" => set!(upsample_strides, list),
            "dropout_keep_prob" => set!(dropout_keep_prob, f64),
            "max_grad_norm" => set!(max_grad_norm, f64),
            "grad_clip_value" => set!(grad_clip_value, f64),
            "vocoder_layers" => set!(vocoder_layers, usize),
            "vocoder_cycle_length" => set!(vocoder_cycle_length, usize),
            "vocoder_residual_channels" => set!(vocoder_residual_channels, usize),
            "vocoder_skip_channels" => set!(vocoder_skip_channels, usize),
            "log_sigma_floor" => set!(log_sigma_floor, f64),
            "batch_size" => set!(batch_size, usize),
            "lr_initial" => set!(lr_initial, f64),
            "lr_anneal_start_step" => set!(lr_anneal_start_step, u64),
            "lr_anneal_period" => set!(lr_anneal_period, u64),
            "silence_threshold_db" => set!(silence_threshold_db, f64),
            "silence_frame_ms" => set!(silence_frame_ms, f64),
            "stop_patience_steps" => set!(stop_patience_steps, usize),
            "attention_window" => set!(attention_window, usize),
            "max_decode_factor" => set!(max_decode_factor, usize),
            other => {
                return Err(VoxError::Config(format!(
                    "line {line}: unknown key `{other}`"
                )))
            }
        }
        Ok(())
    }
}

fn format_f64(v: f64) -> String {
    // keep round-trippable precision
    let s = format!("{v}");
    if s.contains('.') || s.contains('e') || s.contains("inf") || s.contains("nan") {
        s
    } else {
        format!("{s}.0")
    }
}

pub fn parse_config(text: &str) -> Result<Hyperparameters, VoxError> {
    let mut hp = Hyperparameters::default();
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            VoxError::Config(format!("line {line_no}: expected `key = value`, got `{raw}`"))
        })?;
        let key = key.trim();
        if let Some(prev) = seen.insert(key.to_string(), line_no) {
            return Err(VoxError::Config(format!(
                "line {line_no}: duplicate key `{key}` (first set on line {prev})"
            )));
        }
        hp.apply(key, value.trim(), line_no)?;
    }
    hp.validate()?;
    Ok(hp)
}

pub fn load_config(path: &Path) -> Result<Hyperparameters, VoxError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| VoxError::Io(format!("reading config {}: {e}", path.display())))?;
    parse_config(&text)
}
