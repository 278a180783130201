//! Windowed-sinc rational resampler.

use crate::dsp::Waveform;
use crate::error::VoxError;
use crate::scalar::Scalar;

const HALF_TAPS: isize = 32;

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Resample to `target_rate`. Pass-through (samples untouched) when the rate
/// already matches.
pub fn resample<F: Scalar>(w: &Waveform<F>, target_rate: usize) -> Result<Waveform<F>, VoxError> {
    if target_rate == 0 {
        return Err(VoxError::Audio("target rate must be positive".into()));
    }
    if w.sample_rate_hz == target_rate {
        return Ok(w.clone());
    }
    let g = gcd(w.sample_rate_hz, target_rate);
    let up = target_rate / g;
    let down = w.sample_rate_hz / g;
    let n_in = w.samples.len();
    let n_out = n_in * up / down;

    // anti-aliasing cutoff in input-sample units; sinc window = Hann
    let cutoff = 0.45 * (up as f64 / down as f64).min(1.0);
    let mut out = Vec::with_capacity(n_out);
    for i in 0..n_out {
        // exact rational input position of output sample i
        let num = i * down;
        let base = (num / up) as isize;
        let frac = (num % up) as f64 / up as f64;
        let mut acc = 0.0f64;
        for k in -HALF_TAPS..=HALF_TAPS {
            let idx = base + k;
            if idx < 0 || idx >= n_in as isize {
                continue;
            }
            let t = k as f64 - frac;
            let sinc = if t.abs() < 1e-12 {
                2.0 * cutoff
            } else {
                (2.0 * std::f64::consts::PI * cutoff * t).sin() / (std::f64::consts::PI * t)
            };
            let win = 0.5
                * (1.0
                    + (std::f64::consts::PI * t / (HALF_TAPS as f64 + 1.0)).cos());
            acc += w.samples[idx as usize].into_f64() * sinc * win;
        }
        out.push(F::from_f64(acc));
    }
    Ok(Waveform {
        samples: out,
        sample_rate_hz: target_rate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn downsample_halves_length() {
        let w = Waveform {
            samples: vec![0.0f64; 48000],
            sample_rate_hz: 48000,
        };
        let r = resample(&w, 24000).unwrap();
        assert_eq!(r.samples.len(), 24000);
        assert_eq!(r.sample_rate_hz, 24000);
    }

    #[test]
    fn matching_rate_is_passthrough() {
        let w = Waveform {
            samples: (0..64).map(|i| (i as f64 * 0.2).sin()).collect::<Vec<f64>>(),
            sample_rate_hz: 24000,
        };
        let r = resample(&w, 24000).unwrap();
        assert_eq!(r.samples, w.samples);
    }

    /// DFT oracle: resampled 1 kHz sine keeps its tone; off-peak energy < 1%.
    #[test]
    fn sine_survives_resampling() {
        let sr_in = 48000usize;
        let n = 48000;
        let freq = 1000.0;
        let w = Waveform {
            samples: (0..n)
                .map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / sr_in as f64).sin())
                .collect::<Vec<f64>>(),
            sample_rate_hz: sr_in,
        };
        let r = resample(&w, 24000).unwrap();
        // plain DFT magnitudes over an interior slice (skip filter edges)
        let slice = &r.samples[1000..r.samples.len() - 1000];
        let m = slice.len();
        let dft_mag2 = |bin: usize| -> f64 {
            let (mut re, mut im) = (0.0, 0.0);
            for (i, &s) in slice.iter().enumerate() {
                let ph = -2.0 * std::f64::consts::PI * bin as f64 * i as f64 / m as f64;
                re += s * ph.cos();
                im += s * ph.sin();
            }
            re * re + im * im
        };
        let expected_bin = (freq * m as f64 / 24000.0).round() as usize;
        let peak: f64 = (expected_bin - 1..=expected_bin + 1).map(dft_mag2).sum();
        let mut others = 0.0;
        for bin in (0..m / 2).step_by(97) {
            if bin + 1 >= expected_bin.saturating_sub(2) && bin <= expected_bin + 2 {
                continue;
            }
            others = f64::max(others, dft_mag2(bin));
        }
        assert!(others < 0.01 * peak, "sidelobe {others} vs peak {peak}");
    }
}
