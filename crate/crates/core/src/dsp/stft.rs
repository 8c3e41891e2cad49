use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use std::f64::consts::PI;
use std::sync::Arc;

use super::{AudioClip, Matrix};
use crate::error::{Error, Result};

/// Frame geometry derived from a frame duration and overlap fraction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Framing {
    pub frame_len: usize,
    pub hop: usize,
    pub n_fft: usize,
}

impl Framing {
    /// `frame_len = floor(sample_rate * frame_ms / 1000)`,
    /// `hop = round(frame_len * (1 - overlap))`, `n_fft` the next power of two.
    pub fn new(sample_rate: u32, frame_ms: f64, overlap_fraction: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&overlap_fraction) {
            return Err(Error::InvalidArgument(format!(
                "overlap fraction {overlap_fraction} not in [0, 1)"
            )));
        }
        let frame_len = (sample_rate as f64 * frame_ms / 1000.0).floor() as usize;
        if frame_len < 2 {
            return Err(Error::InvalidArgument(format!(
                "{frame_ms} ms at {sample_rate} Hz is shorter than two samples"
            )));
        }
        let hop = ((frame_len as f64) * (1.0 - overlap_fraction)).round().max(1.0) as usize;
        Ok(Self {
            frame_len,
            hop,
            n_fft: frame_len.next_power_of_two(),
        })
    }

    pub fn bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// Zero samples appended after the clip so its tail is covered by a
    /// full frame.
    pub fn tail_padding(&self) -> usize {
        self.frame_len.saturating_sub(self.hop)
    }

    /// Frames over a padded signal of `len + tail_padding()` samples:
    /// `floor((padded - frame_len) / hop) + 1`.
    pub fn frame_count(&self, len: usize) -> usize {
        let padded = len + self.tail_padding();
        (padded - self.frame_len) / self.hop + 1
    }

    pub fn hop_seconds(&self, sample_rate: u32) -> f64 {
        self.hop as f64 / sample_rate as f64
    }
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// Reusable STFT with a cached window and FFT plan.
pub struct Stft {
    framing: Framing,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Stft {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Stft").field("framing", &self.framing).finish()
    }
}

impl Stft {
    pub fn new(framing: Framing) -> Self {
        let fft = FftPlanner::new().plan_fft_forward(framing.n_fft);
        Self {
            window: hann(framing.frame_len),
            framing,
            fft,
        }
    }

    pub fn framing(&self) -> Framing {
        self.framing
    }

    /// Complex spectrum, `bins x frames`.
    pub fn complex(&self, clip: &AudioClip) -> Result<(Vec<Complex<f64>>, usize)> {
        let f = self.framing;
        if clip.samples.len() < f.frame_len {
            return Err(Error::ClipTooShort {
                len: clip.samples.len(),
                needed: f.frame_len,
            });
        }
        let frames = f.frame_count(clip.samples.len());
        let bins = f.bins();
        let mut out = vec![Complex::new(0.0, 0.0); bins * frames];
        let mut buf = vec![Complex::new(0.0, 0.0); f.n_fft];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        for t in 0..frames {
            let start = t * f.hop;
            buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
            for (i, w) in self.window.iter().enumerate() {
                let s = clip.samples.get(start + i).copied().unwrap_or(0.0) as f64;
                buf[i] = Complex::new(s * w, 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (b, c) in buf.iter().take(bins).enumerate() {
                out[b * frames + t] = *c;
            }
        }
        Ok((out, frames))
    }

    /// Power spectrogram `|X|^2`, `bins x frames`.
    pub fn power(&self, clip: &AudioClip) -> Result<Matrix> {
        let (spec, frames) = self.complex(clip)?;
        let data = spec.iter().map(|c| c.norm_sqr()).collect();
        Ok(Matrix::new(self.framing.bins(), frames, data))
    }
}

/// Hann-windowed STFT, `bins x frames` complex values (row-major).
pub fn stft(clip: &AudioClip, frame_ms: f64, overlap_fraction: f64) -> Result<(Vec<Complex<f64>>, usize, usize)> {
    let framing = Framing::new(clip.sample_rate, frame_ms, overlap_fraction)?;
    let (data, frames) = Stft::new(framing).complex(clip)?;
    Ok((data, framing.bins(), frames))
}
