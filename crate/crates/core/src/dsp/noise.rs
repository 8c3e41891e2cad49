//! Simplified minimum-statistics background estimate and spectral
//! subtraction.
//!
//! Per bin, the power track is smoothed with a first-order recursion, the
//! smoothed track's minimum over a trailing window is taken at every
//! frame, and the median over frames of that minimum track, scaled by a
//! fixed bias factor, is the noise estimate.

use std::collections::VecDeque;

use super::Matrix;

pub const SMOOTHING: f64 = 0.85;
pub const WINDOW_SECONDS: f64 = 1.5;
pub const BIAS: f64 = 1.5;
pub const SPECTRAL_FLOOR: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseTracker {
    pub alpha: f64,
    pub window_frames: usize,
    pub bias: f64,
}

impl NoiseTracker {
    /// Default constants, with the 1.5 s window converted to frames.
    pub fn for_hop(hop_seconds: f64) -> Self {
        Self {
            alpha: SMOOTHING,
            window_frames: ((WINDOW_SECONDS / hop_seconds).round() as usize).max(1),
            bias: BIAS,
        }
    }

    /// Per-bin noise power for a `bins x frames` power spectrogram.
    pub fn estimate(&self, power: &Matrix) -> Vec<f64> {
        let frames = power.cols;
        let mut out = vec![0.0; power.rows];
        if frames == 0 {
            return out;
        }
        let mut window: VecDeque<(usize, f64)> = VecDeque::with_capacity(self.window_frames + 1);
        let mut minima = Vec::with_capacity(frames);
        for (bin, est) in out.iter_mut().enumerate() {
            let row = power.row(bin);
            window.clear();
            minima.clear();
            let mut smoothed = row[0];
            for (t, &p) in row.iter().enumerate() {
                if t > 0 {
                    smoothed = self.alpha * smoothed + (1.0 - self.alpha) * p;
                }
                // monotone deque: front holds the window minimum
                while window.back().is_some_and(|&(_, v)| v >= smoothed) {
                    window.pop_back();
                }
                window.push_back((t, smoothed));
                while window.front().is_some_and(|&(i, _)| i + self.window_frames <= t) {
                    window.pop_front();
                }
                minima.push(window.front().map_or(smoothed, |&(_, v)| v));
            }
            *est = self.bias * median(&mut minima);
        }
        out
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Per-bin noise estimate with the default constants.
pub fn estimate_noise_floor(power: &Matrix, hop_seconds: f64) -> Vec<f64> {
    NoiseTracker::for_hop(hop_seconds).estimate(power)
}

/// `max(P - N, floor * P)` per entry.
pub fn subtract_noise(power: &Matrix, noise: &[f64]) -> Matrix {
    assert_eq!(power.rows, noise.len(), "noise vector length must match bins");
    let mut out = power.clone();
    for (bin, &n) in noise.iter().enumerate() {
        for p in out.row_mut(bin) {
            *p = (*p - n).max(SPECTRAL_FLOOR * *p);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Exp};

    const HOP: f64 = 551.0 / 22050.0;

    fn exp_noise(rng: &mut ChaCha8Rng, bins: usize, frames: usize, p: f64) -> Matrix {
        let d = Exp::new(1.0 / p).unwrap();
        Matrix::new(bins, frames, (0..bins * frames).map(|_| d.sample(rng)).collect())
    }

    fn db(x: f64) -> f64 {
        10.0 * x.log10()
    }

    #[test]
    fn window_is_sixty_frames_at_default_hop() {
        assert_eq!(NoiseTracker::for_hop(HOP).window_frames, 60);
    }

    #[test]
    fn zero_input_gives_zero_noise() {
        let m = Matrix::zeros(5, 100);
        assert_eq!(estimate_noise_floor(&m, HOP), vec![0.0; 5]);
    }

    #[test]
    fn sliding_minimum_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let power = exp_noise(&mut rng, 3, 200, 2.0);
        let tracker = NoiseTracker::for_hop(HOP);
        let got = tracker.estimate(&power);
        for b in 0..3 {
            let row = power.row(b);
            let mut s = vec![row[0]];
            for &p in &row[1..] {
                let prev = *s.last().unwrap();
                s.push(0.85 * prev + 0.15 * p);
            }
            let mut mins: Vec<f64> = (0..200)
                .map(|t: usize| s[t.saturating_sub(59)..=t].iter().cloned().fold(f64::INFINITY, f64::min))
                .collect();
            mins.sort_by(f64::total_cmp);
            let med = 0.5 * (mins[99] + mins[100]);
            assert!((got[b] - 1.5 * med).abs() < 1e-12);
            let max_s = s.iter().cloned().fold(0.0, f64::max);
            assert!(got[b] <= 1.5 * max_s);
        }
    }

    #[test]
    fn stationary_noise_within_three_db() {
        // 30 s recording at the default hop, 50 realizations
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (bins, frames, p) = (16, 1200, 0.37);
        let mut mean = vec![0.0; bins];
        for _ in 0..50 {
            let est = estimate_noise_floor(&exp_noise(&mut rng, bins, frames, p), HOP);
            mean.iter_mut().zip(&est).for_each(|(m, e)| *m += e / 50.0);
        }
        for m in mean {
            let err = db(m / (1.5 * p));
            assert!(err.abs() <= 3.0, "{err} dB");
        }
    }

    #[test]
    fn transients_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (bins, frames, p) = (8, 1200, 1.0);
        // 10% duty cycle, 20 dB above the floor: 250 ms events every 2.5 s,
        // and a single 3 s event
        let patterns: [fn(usize) -> bool; 2] = [|t| t % 100 < 10, |t| (100..220).contains(&t)];
        for active in patterns {
            let noise = exp_noise(&mut rng, bins, frames, p);
            let mut bursty = noise.clone();
            for b in 0..bins {
                for t in (0..frames).filter(|&t| active(t)) {
                    bursty.row_mut(b)[t] += 100.0 * p * rng.random_range(0.5..1.5);
                }
            }
            let clean = estimate_noise_floor(&noise, HOP);
            let dirty = estimate_noise_floor(&bursty, HOP);
            for (c, d) in clean.iter().zip(&dirty) {
                assert!(db(d / c).abs() <= 3.0, "{} dB", db(d / c));
            }
        }
    }

    #[test]
    fn subtraction_cases() {
        let p = Matrix::new(2, 2, vec![2.0, 0.1, 0.4, 3.0]);
        assert_eq!(subtract_noise(&p, &[0.0, 0.0]).data, p.data);
        let out = subtract_noise(&p, &[0.5, 0.5]);
        assert_eq!(out.data[0], 1.5);
        assert!((out.data[1] - 0.001).abs() < 1e-15);
        let all_floor = subtract_noise(&p, &[5.0, 5.0]);
        for (o, i) in all_floor.data.iter().zip(&p.data) {
            assert!((o - 0.01 * i).abs() < 1e-15);
        }
    }
}
