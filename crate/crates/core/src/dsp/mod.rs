//! Data ingestion: audio decode, resampling, silence trimming, log-mel
//! extraction, feature caching and batch packing.

pub mod mel;
pub mod resample;
pub mod wav;

use std::io::{Read, Write};
use std::path::Path;

use crate::config::Hyperparameters;
use crate::error::VoxError;
use crate::manifest::{SpeakerRegistry, UtteranceRecord};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

pub use mel::{log_mel, MelSpectrogram, LOG_MEL_EPS};
pub use resample::resample;
pub use wav::{read_wav, write_wav};

#[derive(Clone, Debug)]
pub struct Waveform<F> {
    pub samples: Vec<F>,
    pub sample_rate_hz: usize,
}

impl<F: Scalar> Waveform<F> {
    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }
}

/// Load a 16-bit PCM WAV and resample to `target_rate`.
pub fn load_resample<F: Scalar>(path: &Path, target_rate: usize) -> Result<Waveform<F>, VoxError> {
    let w = read_wav(path)?;
    resample(&w, target_rate)
}

/// Cut everything before the first analysis frame whose RMS exceeds
/// `threshold_db` (dBFS). Trailing samples are never touched; an all-silent
/// input comes back unchanged.
pub fn trim_leading_silence<F: Scalar>(
    w: &Waveform<F>,
    threshold_db: f64,
    frame_ms: f64,
) -> Waveform<F> {
    assert!(threshold_db < 0.0, "threshold must be below 0 dBFS");
    let frame_len = ((frame_ms / 1000.0) * w.sample_rate_hz as f64).round() as usize;
    let frame_len = frame_len.max(1);
    let threshold_rms = 10f64.powf(threshold_db / 20.0);
    let mut onset = None;
    let mut start = 0;
    while start < w.samples.len() {
        let end = (start + frame_len).min(w.samples.len());
        let energy: f64 = w.samples[start..end]
            .iter()
            .map(|s| {
                let v = s.into_f64();
                v * v
            })
            .sum();
        let rms = (energy / (end - start) as f64).sqrt();
        if rms > threshold_rms {
            onset = Some(start);
            break;
        }
        start = end;
    }
    match onset {
        Some(at) => Waveform {
            samples: w.samples[at..].to_vec(),
            sample_rate_hz: w.sample_rate_hz,
        },
        None => {
            eprintln!("warning: all-silent waveform, leading-silence trim skipped");
            w.clone()
        }
    }
}

/// One utterance after the full preprocessing pipeline.
#[derive(Clone, Debug)]
pub struct ProcessedUtterance<F> {
    pub utterance_id: String,
    pub speaker_id: String,
    pub transcript: String,
    pub mel: MelSpectrogram<F>,
    /// Aligned waveform: `len == mel.n_frames() * hop`.
    pub waveform: Vec<F>,
}

pub fn preprocess_utterance<F: Scalar>(
    record: &UtteranceRecord,
    hp: &Hyperparameters,
) -> Result<ProcessedUtterance<F>, VoxError> {
    let raw = load_resample::<F>(&record.audio_path, hp.sample_rate_hz)?;
    let trimmed = trim_leading_silence(&raw, hp.silence_threshold_db, hp.silence_frame_ms);
    let (mel, aligned) = log_mel(&trimmed, hp)?;
    Ok(ProcessedUtterance {
        utterance_id: record.utterance_id.clone(),
        speaker_id: record.speaker_id.clone(),
        transcript: record.transcript.clone(),
        mel,
        waveform: aligned.samples,
    })
}

/// Padded batch of utterances ready for the joint forward pass.
#[derive(Clone, Debug)]
pub struct BatchItem<F> {
    pub utterance_id: String,
    pub transcript: String,
    pub speaker_index: usize,
    /// `[padded_frames x n_mels]`, padding rows filled with the log floor.
    pub mel: Matrix<F>,
    pub real_frames: usize,
    /// `[padded_frames * hop]`, padding samples zero.
    pub waveform: Vec<F>,
    pub real_samples: usize,
}

#[derive(Clone, Debug)]
pub struct TrainingBatch<F> {
    pub items: Vec<BatchItem<F>>,
    pub padded_frames: usize,
}

/// Pad mel frame counts up to a common multiple of the reduction factor and
/// resolve speaker indices through the registry.
pub fn make_batch<F: Scalar>(
    utterances: &[ProcessedUtterance<F>],
    registry: &SpeakerRegistry,
    hp: &Hyperparameters,
) -> Result<TrainingBatch<F>, VoxError> {
    assert!(!utterances.is_empty(), "empty batch");
    let r = hp.reduction_factor;
    let max_frames = utterances.iter().map(|u| u.mel.n_frames()).max().unwrap();
    let padded_frames = max_frames.div_ceil(r) * r;
    let floor = F::from_f64(LOG_MEL_EPS.ln());
    let hop = hp.hop_length_samples;
    let mut items = Vec::with_capacity(utterances.len());
    for u in utterances {
        let speaker_index = registry.index_of(&u.speaker_id).ok_or_else(|| {
            VoxError::Manifest(format!("unknown speaker_id `{}`", u.speaker_id))
        })?;
        let real_frames = u.mel.n_frames();
        debug_assert_eq!(u.waveform.len(), real_frames * hop);
        let mut mel = Matrix::from_fn(padded_frames, hp.n_mel_bands, |_, _| floor);
        for t in 0..real_frames {
            mel.row_mut(t).copy_from_slice(u.mel.values.row(t));
        }
        let mut waveform = u.waveform.clone();
        waveform.resize(padded_frames * hop, F::zero());
        items.push(BatchItem {
            utterance_id: u.utterance_id.clone(),
            transcript: u.transcript.clone(),
            speaker_index,
            mel,
            real_frames,
            waveform,
            real_samples: real_frames * hop,
        });
    }
    Ok(TrainingBatch {
        items,
        padded_frames,
    })
}

const CACHE_MAGIC: &[u8; 4] = b"VSFC";

/// Feature cache: magic, n_frames, n_bands, n_samples (u32 LE), then the mel
/// matrix and aligned waveform as little-endian f32.
pub fn write_feature_cache<F: Scalar>(
    path: &Path,
    u: &ProcessedUtterance<F>,
) -> Result<(), VoxError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CACHE_MAGIC);
    buf.extend_from_slice(&(u.mel.n_frames() as u32).to_le_bytes());
    buf.extend_from_slice(&(u.mel.values.cols as u32).to_le_bytes());
    buf.extend_from_slice(&(u.waveform.len() as u32).to_le_bytes());
    for v in &u.mel.values.data {
        buf.extend_from_slice(&(v.into_f64() as f32).to_le_bytes());
    }
    for v in &u.waveform {
        buf.extend_from_slice(&(v.into_f64() as f32).to_le_bytes());
    }
    let tmp = path.with_extension("tmp");
    std::fs::File::create(&tmp)?.write_all(&buf)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_feature_cache<F: Scalar>(
    path: &Path,
    record: &UtteranceRecord,
    hop: usize,
) -> Result<ProcessedUtterance<F>, VoxError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| VoxError::Io(format!("opening cache {}: {e}", path.display())))?
        .read_to_end(&mut bytes)?;
    if bytes.len() < 16 || &bytes[0..4] != CACHE_MAGIC {
        return Err(VoxError::Io(format!("bad cache file {}", path.display())));
    }
    let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
    let (n_frames, n_bands, n_samples) = (u32_at(4), u32_at(8), u32_at(12));
    let need = 16 + 4 * (n_frames * n_bands + n_samples);
    if bytes.len() != need {
        return Err(VoxError::Io(format!(
            "cache {} truncated: {} bytes, expected {need}",
            path.display(),
            bytes.len()
        )));
    }
    let f32_at = |off: usize| f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    let mut mel = Matrix::zeros(n_frames, n_bands);
    for i in 0..n_frames * n_bands {
        mel.data[i] = F::from_f64(f32_at(16 + 4 * i) as f64);
    }
    let base = 16 + 4 * n_frames * n_bands;
    let waveform = (0..n_samples)
        .map(|i| F::from_f64(f32_at(base + 4 * i) as f64))
        .collect();
    Ok(ProcessedUtterance {
        utterance_id: record.utterance_id.clone(),
        speaker_id: record.speaker_id.clone(),
        transcript: record.transcript.clone(),
        mel: MelSpectrogram {
            values: mel,
            hop_length_samples: hop,
        },
        waveform,
    })
}
