//! Audio front end: framing, filter banks, log band energies and the
//! noise-subtracted auxiliary channel.

mod filterbank;
mod image;
mod noise;
mod stft;
pub mod wav;

pub use filterbank::{
    build_filterbank, erb, erb_rate_to_hz, hz_to_erb_rate, hz_to_mel, mel_to_hz, FilterBank, FilterKind,
};
pub use image::{read_images, write_images, SpectroImage};
pub use noise::{estimate_noise_floor, subtract_noise, NoiseTracker, BIAS, SMOOTHING, SPECTRAL_FLOOR, WINDOW_SECONDS};
pub use stft::{hann, stft, Framing, Stft};

use crate::error::{Error, Result};

/// Floor added before taking logs of band energies.
pub const LOG_EPS: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidArgument("sample rate must be positive".into()));
        }
        if samples.is_empty() {
            return Err(Error::InvalidArgument("audio clip is empty".into()));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn scaled(&self, gain: f32) -> Self {
        Self {
            samples: self.samples.iter().map(|s| s * gain).collect(),
            sample_rate: self.sample_rate,
        }
    }
}

/// Row-major real matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len());
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    fn log_floor(mut self) -> Self {
        self.data.iter_mut().for_each(|v| *v = (*v + LOG_EPS).ln());
        self
    }
}

/// Splits a recording into consecutive non-overlapping segments; a
/// trailing partial segment is dropped.
pub fn segment(recording: &AudioClip, seg_seconds: f64) -> Result<Vec<AudioClip>> {
    let seg_len = (seg_seconds * recording.sample_rate as f64).round() as usize;
    if seg_len == 0 {
        return Err(Error::InvalidArgument(format!("segment length {seg_seconds} s is zero samples")));
    }
    if recording.samples.len() < seg_len {
        return Err(Error::ClipTooShort {
            len: recording.samples.len(),
            needed: seg_len,
        });
    }
    Ok(recording
        .samples
        .chunks_exact(seg_len)
        .map(|c| AudioClip {
            samples: c.to_vec(),
            sample_rate: recording.sample_rate,
        })
        .collect())
}

/// Feature extraction parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureConfig {
    pub kind: FilterKind,
    pub sample_rate: u32,
    pub frame_ms: f64,
    pub overlap: f64,
    pub bands: usize,
    pub fmin: f64,
    /// `None` means Nyquist.
    pub fmax: Option<f64>,
    pub segment_seconds: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            kind: FilterKind::Mel,
            sample_rate: 22050,
            frame_ms: 50.0,
            overlap: 0.5,
            bands: 64,
            fmin: 50.0,
            fmax: None,
            segment_seconds: 2.0,
        }
    }
}

impl FeatureConfig {
    pub fn with_kind(kind: FilterKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    /// Stable textual key of every parameter that affects feature values.
    pub fn cache_key(&self) -> String {
        format!(
            "{}-{}hz-{}ms-{}ov-{}b-{}-{}-{}s",
            self.kind,
            self.sample_rate,
            self.frame_ms,
            self.overlap,
            self.bands,
            self.fmin,
            self.fmax.unwrap_or(self.sample_rate as f64 / 2.0),
            self.segment_seconds
        )
    }
}

/// Bundles a filter bank with its STFT plan.
#[derive(Debug)]
pub struct FeatureExtractor {
    config: FeatureConfig,
    stft: Stft,
    bank: FilterBank,
    tracker: NoiseTracker,
}

impl FeatureExtractor {
    pub fn new(config: FeatureConfig) -> Result<Self> {
        let framing = Framing::new(config.sample_rate, config.frame_ms, config.overlap)?;
        let fmax = config.fmax.unwrap_or(config.sample_rate as f64 / 2.0);
        let bank = build_filterbank(config.kind, config.bands, config.sample_rate, config.fmin, fmax, framing.n_fft)?;
        Ok(Self {
            tracker: NoiseTracker::for_hop(framing.hop_seconds(config.sample_rate)),
            stft: Stft::new(framing),
            bank,
            config,
        })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.config
    }

    pub fn bank(&self) -> &FilterBank {
        &self.bank
    }

    pub fn framing(&self) -> Framing {
        self.stft.framing()
    }

    /// Frames per segment.
    pub fn frames_per_segment(&self) -> usize {
        let len = (self.config.segment_seconds * self.config.sample_rate as f64).round() as usize;
        self.framing().frame_count(len)
    }

    fn check_rate(&self, clip: &AudioClip) -> Result<()> {
        if clip.sample_rate != self.config.sample_rate {
            return Err(Error::InvalidArgument(format!(
                "clip sampled at {} Hz, extractor configured for {} Hz",
                clip.sample_rate, self.config.sample_rate
            )));
        }
        Ok(())
    }

    pub fn power(&self, clip: &AudioClip) -> Result<Matrix> {
        self.check_rate(clip)?;
        self.stft.power(clip)
    }

    /// `log(bank . |X|^2 + eps)`, `M x T`.
    pub fn log_spectrogram(&self, clip: &AudioClip) -> Result<Matrix> {
        Ok(self.bank.apply(&self.power(clip)?).log_floor())
    }

    pub fn noise_floor(&self, clip: &AudioClip) -> Result<Vec<f64>> {
        Ok(self.tracker.estimate(&self.power(clip)?))
    }

    /// Two-channel image with the background estimated on the clip itself.
    pub fn make_input(&self, clip: &AudioClip) -> Result<SpectroImage> {
        let power = self.power(clip)?;
        let noise = self.tracker.estimate(&power);
        Ok(self.image_from_power(&power, &noise))
    }

    /// Two-channel image using an externally estimated background.
    pub fn make_input_with_noise(&self, clip: &AudioClip, noise: &[f64]) -> Result<SpectroImage> {
        let power = self.power(clip)?;
        if noise.len() != power.rows {
            return Err(Error::InvalidArgument(format!(
                "noise estimate has {} bins, spectrum has {}",
                noise.len(),
                power.rows
            )));
        }
        Ok(self.image_from_power(&power, noise))
    }

    fn image_from_power(&self, power: &Matrix, noise: &[f64]) -> SpectroImage {
        let direct = self.bank.apply(power).log_floor();
        let cleaned = self.bank.apply(&subtract_noise(power, noise)).log_floor();
        SpectroImage::from_channels(&[direct, cleaned])
    }

    /// Segments a recording and builds one image per segment, estimating
    /// the background once over the whole recording.
    pub fn recording_inputs(&self, recording: &AudioClip) -> Result<Vec<SpectroImage>> {
        let noise = self.noise_floor(recording)?;
        segment(recording, self.config.segment_seconds)?
            .iter()
            .map(|seg| self.make_input_with_noise(seg, &noise))
            .collect()
    }
}

/// One-shot log spectrogram for a clip and a matching bank.
pub fn log_spectrogram(clip: &AudioClip, bank: &FilterBank, frame_ms: f64, overlap: f64) -> Result<Matrix> {
    if clip.sample_rate != bank.sample_rate {
        return Err(Error::InvalidArgument("filter bank built for a different sample rate".into()));
    }
    let framing = Framing::new(clip.sample_rate, frame_ms, overlap)?;
    if framing.n_fft != bank.n_fft {
        return Err(Error::InvalidArgument(format!(
            "filter bank built for n_fft {}, framing needs {}",
            bank.n_fft, framing.n_fft
        )));
    }
    Ok(bank.apply(&Stft::new(framing).power(clip)?).log_floor())
}
