//! STFT + mel filterbank + natural-log compression.
//!
//! Framing contract used by everything downstream: center-padded frames,
//! `n_frames = floor(len / hop) + 1`, and the source waveform is then
//! trimmed/padded so `len == n_frames * hop` (sample-level conditioner
//! alignment).

use rustfft::{num_complex::Complex, FftPlanner};

use crate::config::Hyperparameters;
use crate::dsp::Waveform;
use crate::error::VoxError;
use crate::matrix::Matrix;
use crate::scalar::Scalar;

pub const LOG_MEL_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct MelSpectrogram<F> {
    /// `[n_frames x n_mel_bands]` natural-log mel magnitudes.
    pub values: Matrix<F>,
    pub hop_length_samples: usize,
}

impl<F: Scalar> MelSpectrogram<F> {
    pub fn n_frames(&self) -> usize {
        self.values.rows
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters on the mel scale, 0 Hz to Nyquist, unit peak.
pub fn mel_filterbank(n_mels: usize, fft_size: usize, sample_rate: usize) -> Matrix<f64> {
    let n_bins = fft_size / 2 + 1;
    let f_max = sample_rate as f64 / 2.0;
    let mel_points: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(hz_to_mel(f_max) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let mut fb = Matrix::zeros(n_mels, n_bins);
    for m in 0..n_mels {
        let (lo, mid, hi) = (mel_points[m], mel_points[m + 1], mel_points[m + 2]);
        for bin in 0..n_bins {
            let f = bin as f64 * sample_rate as f64 / fft_size as f64;
            let v = if f >= lo && f <= mid {
                if mid > lo { (f - lo) / (mid - lo) } else { 0.0 }
            } else if f > mid && f <= hi {
                if hi > mid { (hi - f) / (hi - mid) } else { 0.0 }
            } else {
                0.0
            };
            *fb.at_mut(m, bin) = v;
        }
    }
    fb
}

fn hann(win: usize) -> Vec<f64> {
    (0..win)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / win as f64).cos())
        .collect()
}

/// Reflection-padded sample lookup.
fn reflect_at<F: Scalar>(samples: &[F], idx: isize) -> f64 {
    let n = samples.len() as isize;
    let mut i = idx;
    // reflect around edges until in range (signals are far longer than a window)
    while i < 0 || i >= n {
        if i < 0 {
            i = -i;
        }
        if i >= n {
            i = 2 * (n - 1) - i;
        }
    }
    samples[i as usize].into_f64()
}

/// Linear-magnitude STFT, `[n_frames x (fft/2+1)]`, frame t centered at t*hop.
pub fn stft_magnitude<F: Scalar>(
    w: &Waveform<F>,
    fft_size: usize,
    win_length: usize,
    hop: usize,
) -> Result<Matrix<f64>, VoxError> {
    if w.samples.len() < win_length {
        return Err(VoxError::Audio(format!(
            "waveform of {} samples is shorter than one window ({win_length})",
            w.samples.len()
        )));
    }
    let n_frames = w.samples.len() / hop + 1;
    let n_bins = fft_size / 2 + 1;
    let window = hann(win_length);
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(fft_size);
    let mut out = Matrix::zeros(n_frames, n_bins);
    let mut buf = vec![Complex::new(0.0, 0.0); fft_size];
    let half_win = win_length as isize / 2;
    for t in 0..n_frames {
        buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        let center = (t * hop) as isize;
        for (i, &wv) in window.iter().enumerate() {
            let s = reflect_at(&w.samples, center - half_win + i as isize);
            buf[i] = Complex::new(s * wv, 0.0);
        }
        fft.process(&mut buf);
        for (bin, o) in out.row_mut(t).iter_mut().enumerate() {
            *o = buf[bin].norm();
        }
    }
    Ok(out)
}

/// Log-mel extraction plus the aligned waveform (`len == n_frames * hop`).
pub fn log_mel<F: Scalar>(
    w: &Waveform<F>,
    hp: &Hyperparameters,
) -> Result<(MelSpectrogram<F>, Waveform<F>), VoxError> {
    if w.sample_rate_hz != hp.sample_rate_hz {
        return Err(VoxError::Audio(format!(
            "waveform rate {} != configured {}",
            w.sample_rate_hz, hp.sample_rate_hz
        )));
    }
    let mag = stft_magnitude(w, hp.fft_size, hp.win_length_samples, hp.hop_length_samples)?;
    let fb = mel_filterbank(hp.n_mel_bands, hp.fft_size, hp.sample_rate_hz);
    let mut values = Matrix::zeros(mag.rows, hp.n_mel_bands);
    for t in 0..mag.rows {
        let srow = mag.row(t);
        for m in 0..hp.n_mel_bands {
            let frow = fb.row(m);
            let mut acc = 0.0;
            for (&a, &b) in srow.iter().zip(frow.iter()) {
                acc += a * b;
            }
            *values.at_mut(t, m) = F::from_f64((acc + LOG_MEL_EPS).ln());
        }
    }
    let n_frames = values.rows;
    let target_len = n_frames * hp.hop_length_samples;
    let mut samples = w.samples.clone();
    samples.resize(target_len, F::zero());
    Ok((
        MelSpectrogram {
            values,
            hop_length_samples: hp.hop_length_samples,
        },
        Waveform {
            samples,
            sample_rate_hz: w.sample_rate_hz,
        },
    ))
}
