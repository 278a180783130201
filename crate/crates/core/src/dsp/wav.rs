//! 16-bit PCM WAV in, 16-bit PCM WAV out.

use std::path::Path;

use crate::dsp::Waveform;
use crate::error::VoxError;
use crate::scalar::Scalar;

pub fn read_wav<F: Scalar>(path: &Path) -> Result<Waveform<F>, VoxError> {
    let mut reader = hound::WavReader::open(path)
        .map_err(|e| VoxError::Audio(format!("opening {}: {e}", path.display())))?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(VoxError::Audio(format!(
            "{}: unsupported encoding {:?}/{} bits, expected 16-bit PCM",
            path.display(),
            spec.sample_format,
            spec.bits_per_sample
        )));
    }
    let channels = spec.channels as usize;
    let scale = F::from_f64(1.0 / 32768.0);
    let mut samples = Vec::new();
    if channels == 1 {
        for s in reader.samples::<i16>() {
            let s = s.map_err(|e| VoxError::Audio(e.to_string()))?;
            samples.push(F::from_f64(s as f64) * scale);
        }
    } else {
        // downmix by averaging channels
        let mut frame = Vec::with_capacity(channels);
        for s in reader.samples::<i16>() {
            let s = s.map_err(|e| VoxError::Audio(e.to_string()))?;
            frame.push(s as f64);
            if frame.len() == channels {
                let mean = frame.iter().sum::<f64>() / channels as f64;
                samples.push(F::from_f64(mean) * scale);
                frame.clear();
            }
        }
    }
    Ok(Waveform {
        samples,
        sample_rate_hz: spec.sample_rate as usize,
    })
}

/// Round-half-away-from-zero float-to-i16 quantization.
pub fn quantize_i16<F: Scalar>(v: F) -> i16 {
    let x = v.into_f64().clamp(-1.0, 1.0) * 32767.0;
    let q = if x >= 0.0 { (x + 0.5).floor() } else { (x - 0.5).ceil() };
    q as i16
}

pub fn write_wav<F: Scalar>(path: &Path, w: &Waveform<F>) -> Result<(), VoxError> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate_hz as u32,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)
        .map_err(|e| VoxError::Audio(format!("creating {}: {e}", path.display())))?;
    for &s in &w.samples {
        writer
            .write_sample(quantize_i16(s))
            .map_err(|e| VoxError::Audio(e.to_string()))?;
    }
    writer.finalize().map_err(|e| VoxError::Audio(e.to_string()))?;
    Ok(())
}
