use super::Matrix;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FilterKind {
    Mel,
    Gammatone,
}

impl std::str::FromStr for FilterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logmel" | "mel" => Ok(Self::Mel),
            "loggam" | "gammatone" => Ok(Self::Gammatone),
            other => Err(Error::InvalidArgument(format!("unknown feature kind '{other}'"))),
        }
    }
}

impl std::fmt::Display for FilterKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Mel => "logmel",
            Self::Gammatone => "loggam",
        })
    }
}

/// `M x (n_fft/2 + 1)` non-negative weights over the power spectrum.
#[derive(Clone, Debug)]
pub struct FilterBank {
    pub kind: FilterKind,
    pub weights: Matrix,
    pub centers: Vec<f64>,
    pub fmin: f64,
    pub fmax: f64,
    pub sample_rate: u32,
    pub n_fft: usize,
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Equivalent rectangular bandwidth (Glasberg & Moore), Hz.
pub fn erb(f: f64) -> f64 {
    24.7 * (4.37 * f / 1000.0 + 1.0)
}

pub fn hz_to_erb_rate(f: f64) -> f64 {
    21.4 * (1.0 + 0.00437 * f).log10()
}

pub fn erb_rate_to_hz(e: f64) -> f64 {
    (10f64.powf(e / 21.4) - 1.0) / 0.00437
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![0.5 * (lo + hi)],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}

pub fn build_filterbank(
    kind: FilterKind,
    m: usize,
    sample_rate: u32,
    fmin: f64,
    fmax: f64,
    n_fft: usize,
) -> Result<FilterBank> {
    let nyquist = sample_rate as f64 / 2.0;
    if m == 0 {
        return Err(Error::InvalidArgument("filter bank needs at least one filter".into()));
    }
    if !(fmin > 0.0 && fmin < fmax) {
        return Err(Error::InvalidArgument(format!("need 0 < fmin < fmax, got {fmin}..{fmax}")));
    }
    if fmax > nyquist {
        return Err(Error::InvalidArgument(format!("fmax {fmax} Hz exceeds Nyquist {nyquist} Hz")));
    }
    if n_fft < 2 {
        return Err(Error::InvalidArgument(format!("n_fft {n_fft} too small")));
    }
    let bins = n_fft / 2 + 1;
    let bin_hz = |b: usize| b as f64 * sample_rate as f64 / n_fft as f64;
    let mut weights = Matrix::zeros(m, bins);
    let centers;
    match kind {
        FilterKind::Mel => {
            let edges: Vec<f64> = linspace(hz_to_mel(fmin), hz_to_mel(fmax), m + 2)
                .into_iter()
                .map(mel_to_hz)
                .collect();
            let edges = if m == 1 {
                vec![fmin, mel_to_hz(0.5 * (hz_to_mel(fmin) + hz_to_mel(fmax))), fmax]
            } else {
                edges
            };
            centers = edges[1..=m].to_vec();
            for i in 0..m {
                let (lo, c, hi) = (edges[i], edges[i + 1], edges[i + 2]);
                let row = weights.row_mut(i);
                for (b, w) in row.iter_mut().enumerate() {
                    let f = bin_hz(b);
                    *w = if f > lo && f <= c {
                        (f - lo) / (c - lo)
                    } else if f > c && f < hi {
                        (hi - f) / (hi - c)
                    } else {
                        0.0
                    };
                }
                if row.iter().all(|&w| w <= 0.0) {
                    // triangle narrower than the bin spacing
                    let nearest = ((c * n_fft as f64 / sample_rate as f64).round() as usize).min(bins - 1);
                    row[nearest] = 1.0;
                }
            }
        }
        FilterKind::Gammatone => {
            centers = linspace(hz_to_erb_rate(fmin), hz_to_erb_rate(fmax), m)
                .into_iter()
                .map(erb_rate_to_hz)
                .collect::<Vec<_>>();
            const ORDER: i32 = 4;
            for (i, &fc) in centers.iter().enumerate() {
                let bw = 1.019 * erb(fc);
                let row = weights.row_mut(i);
                for (b, w) in row.iter_mut().enumerate() {
                    let d = (bin_hz(b) - fc) / bw;
                    *w = (1.0 + d * d).powf(-(ORDER as f64) / 2.0);
                }
                let peak = row.iter().cloned().fold(0.0, f64::max);
                row.iter_mut().for_each(|w| *w /= peak);
            }
        }
    }
    Ok(FilterBank {
        kind,
        weights,
        centers,
        fmin,
        fmax,
        sample_rate,
        n_fft,
    })
}

impl FilterBank {
    pub fn len(&self) -> usize {
        self.weights.rows
    }

    pub fn is_empty(&self) -> bool {
        self.weights.rows == 0
    }

    /// `weights . power`, i.e. `M x frames` band energies.
    pub fn apply(&self, power: &Matrix) -> Matrix {
        assert_eq!(power.rows, self.weights.cols, "filter bank / spectrum bin mismatch");
        let mut out = Matrix::zeros(self.weights.rows, power.cols);
        f64::gemm(
            self.weights.rows,
            self.weights.cols,
            power.cols,
            1.0,
            &self.weights.data,
            false,
            &power.data,
            false,
            0.0,
            &mut out.data,
        );
        out
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.weights.rows).map(|r| self.weights.row(r).iter().sum()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_mel_bank() {
        let bank = build_filterbank(FilterKind::Mel, 64, 22050, 50.0, 11025.0, 2048).unwrap();
        assert_eq!(bank.len(), 64);
        assert!(bank.centers.windows(2).all(|w| w[0] < w[1]));
        for r in 0..64 {
            let row = bank.weights.row(r);
            assert!(row.iter().all(|&w| w >= 0.0));
            assert!(row.iter().any(|&w| w > 0.0), "row {r} empty");
        }
    }

    #[test]
    fn single_filter_spans_range() {
        let bank = build_filterbank(FilterKind::Mel, 1, 22050, 100.0, 5000.0, 2048).unwrap();
        let row = bank.weights.row(0);
        let hz = |b: usize| b as f64 * 22050.0 / 2048.0;
        let nz: Vec<usize> = (0..row.len()).filter(|&b| row[b] > 0.0).collect();
        assert!(hz(nz[0]) > 100.0 && hz(nz[0]) < 100.0 + 22050.0 / 2048.0 + 1e-9);
        assert!(hz(*nz.last().unwrap()) < 5000.0);
        assert!(hz(*nz.last().unwrap()) > 5000.0 - 22050.0 / 2048.0 - 1e-9);
    }

    #[test]
    fn three_mel_filters_cover_interior_bins() {
        let bank = build_filterbank(FilterKind::Mel, 3, 22050, 300.0, 8000.0, 2048).unwrap();
        let hz = |b: usize| b as f64 * 22050.0 / 2048.0;
        let (c0, c2) = (bank.centers[0], bank.centers[2]);
        for b in 0..1025 {
            let f = hz(b);
            if f >= c0 && f <= c2 {
                let sum: f64 = (0..3).map(|r| bank.weights.row(r)[b]).sum();
                assert!(sum > 0.0, "bin {b} at {f} Hz");
                // direct triangle evaluation
                let edges: Vec<f64> = (0..5)
                    .map(|i| mel_to_hz(hz_to_mel(300.0) + (hz_to_mel(8000.0) - hz_to_mel(300.0)) * i as f64 / 4.0))
                    .collect();
                let tri = |i: usize| {
                    let (lo, c, hi) = (edges[i], edges[i + 1], edges[i + 2]);
                    if f > lo && f <= c {
                        (f - lo) / (c - lo)
                    } else if f > c && f < hi {
                        (hi - f) / (hi - c)
                    } else {
                        0.0
                    }
                };
                let want: f64 = (0..3).map(tri).sum();
                assert!((sum - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gammatone_rows_are_peak_normalized_on_erb_centers() {
        let bank = build_filterbank(FilterKind::Gammatone, 64, 22050, 50.0, 11025.0, 2048).unwrap();
        assert_eq!(bank.len(), 64);
        let rates: Vec<f64> = bank.centers.iter().map(|&c| hz_to_erb_rate(c)).collect();
        let step = rates[1] - rates[0];
        assert!(rates.windows(2).all(|w| ((w[1] - w[0]) - step).abs() < 1e-9));
        for r in 0..64 {
            let row = bank.weights.row(r);
            let peak = row.iter().cloned().fold(0.0, f64::max);
            assert!((peak - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&w| w >= 0.0));
        }
    }

    #[test]
    fn rejects_fmax_above_nyquist() {
        assert!(build_filterbank(FilterKind::Mel, 64, 22050, 50.0, 12000.0, 2048).is_err());
        assert!(build_filterbank(FilterKind::Mel, 0, 22050, 50.0, 8000.0, 2048).is_err());
        assert!(build_filterbank(FilterKind::Gammatone, 8, 22050, 0.0, 8000.0, 2048).is_err());
    }

    #[test]
    fn mel_scale_round_trips() {
        for f in [50.0, 440.0, 1000.0, 11025.0] {
            assert!((mel_to_hz(hz_to_mel(f)) - f).abs() < 1e-9);
            assert!((erb_rate_to_hz(hz_to_erb_rate(f)) - f).abs() < 1e-9);
        }
    }
}
