//! Datasets: CSV manifests over WAV files, and a synthetic scene generator
//! whose recordings are rendered on demand from per-class recipes.

use std::collections::{BTreeSet, HashSet};
use std::f64::consts::PI;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::dsp::wav::{read_wav, write_wav};
use crate::dsp::AudioClip;
use crate::error::{Error, Result};

pub const MANIFEST_HEADER: [&str; 4] = ["id", "path", "class", "split"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split '{other}'"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum AudioSource {
    Wav(PathBuf),
    /// Rendered from recipe `recipe` of the dataset's synthetic spec.
    Synth { recipe: usize, seed: u64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Item {
    pub id: String,
    pub source: AudioSource,
    pub label: usize,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub class_names: Vec<String>,
    pub items: Vec<Item>,
    pub synth: Option<SynthSceneSpec>,
}

impl Dataset {
    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Item> {
        self.items.iter().filter(move |it| it.split == split)
    }

    /// Audio of one item, read from disk or rendered.
    pub fn audio(&self, item: &Item) -> Result<AudioClip> {
        match &item.source {
            AudioSource::Wav(path) => read_wav(path),
            AudioSource::Synth { recipe, seed } => {
                let spec = self
                    .synth
                    .as_ref()
                    .ok_or_else(|| Error::InvalidArgument(format!("{} is synthetic but the dataset has no recipes", item.id)))?;
                spec.render(*recipe, *seed)
            }
        }
    }

    /// Labels in range, unique ids, and every class in both splits.
    pub fn validate(&self) -> Result<()> {
        let c = self.classes();
        let mut ids = HashSet::new();
        for it in &self.items {
            if it.label >= c {
                return Err(Error::InvalidArgument(format!("{}: label {} outside {c} classes", it.id, it.label)));
            }
            if !ids.insert(it.id.as_str()) {
                return Err(Error::InvalidArgument(format!("duplicate recording id '{}'", it.id)));
            }
        }
        for split in [Split::Train, Split::Test] {
            let present: HashSet<usize> = self.split(split).map(|it| it.label).collect();
            if let Some(missing) = (0..c).find(|l| !present.contains(l)) {
                return Err(Error::InvalidArgument(format!(
                    "class '{}' has no {split} recordings",
                    self.class_names[missing]
                )));
            }
        }
        Ok(())
    }

    /// Reassigns splits per class; see [`stratified_split`].
    pub fn resplit(&mut self, test_fraction: f64, seed: u64) -> Result<()> {
        let labels: Vec<usize> = self.items.iter().map(|it| it.label).collect();
        for (it, s) in self.items.iter_mut().zip(stratified_split(&labels, test_fraction, seed)?) {
            it.split = s;
        }
        Ok(())
    }
}

/// Per class, a shuffled `round(n_c * test_fraction)` items (at least one,
/// and at least one left for training) go to the test split.
pub fn stratified_split(labels: &[usize], test_fraction: f64, seed: u64) -> Result<Vec<Split>> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!("test fraction {test_fraction} outside (0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![Split::Train; labels.len()];
    let classes: BTreeSet<usize> = labels.iter().copied().collect();
    for c in classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if idx.len() < 2 {
            return Err(Error::InvalidArgument(format!("class {c} has fewer than two items to split")));
        }
        idx.shuffle(&mut rng);
        let n_test = ((idx.len() as f64 * test_fraction).round() as usize).clamp(1, idx.len() - 1);
        for &i in &idx[..n_test] {
            out[i] = Split::Test;
        }
    }
    Ok(out)
}

/// Reads a `id,path,class,split` manifest. Relative paths resolve against
/// the manifest's directory. Classes are the sorted distinct names unless
/// `classes` fixes them, in which case other names are rejected.
pub fn load_manifest(path: impl AsRef<Path>, classes: Option<&[String]>) -> Result<Dataset> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new("."));
    let mut reader = csv::Reader::from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if header != MANIFEST_HEADER {
        return Err(Error::Manifest {
            row: 0,
            detail: format!("header must be {}, got {}", MANIFEST_HEADER.join(","), header.join(",")),
        });
    }
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| Error::Manifest { row, detail: e.to_string() })?;
        let field = |k: usize| rec.get(k).unwrap_or("").trim().to_string();
        rows.push((row, field(0), field(1), field(2), field(3)));
    }
    let class_names: Vec<String> = match classes {
        Some(c) => c.to_vec(),
        None => rows
            .iter()
            .map(|r| r.3.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect(),
    };
    let mut ids = HashSet::new();
    let mut items = Vec::with_capacity(rows.len());
    for (row, id, file, class, split) in rows {
        let err = |detail: String| Error::Manifest { row, detail };
        if id.is_empty() {
            return Err(err("empty recording id".into()));
        }
        if !ids.insert(id.clone()) {
            return Err(err(format!("duplicate recording id '{id}'")));
        }
        let label = class_names
            .iter()
            .position(|c| *c == class)
            .ok_or_else(|| err(format!("unknown class '{class}'")))?;
        let split: Split = split.parse().map_err(|e: Error| err(e.to_string()))?;
        let wav = base.join(&file);
        if !wav.is_file() {
            return Err(err(format!("missing file {}", wav.display())));
        }
        let spec = hound::WavReader::open(&wav)
            .map_err(|e| err(format!("unreadable WAV {}: {e}", wav.display())))?
            .spec();
        let supported = matches!(
            (spec.sample_format, spec.bits_per_sample),
            (hound::SampleFormat::Int, 16) | (hound::SampleFormat::Float, 32)
        );
        if !supported {
            return Err(err(format!("unsupported WAV format in {}", wav.display())));
        }
        items.push(Item {
            id,
            source: AudioSource::Wav(wav),
            label,
            split,
        });
    }
    Ok(Dataset {
        class_names,
        items,
        synth: None,
    })
}

/// Writes every item to `<dir>/audio/<id>.wav` plus `<dir>/manifest.csv`;
/// returns the manifest path.
pub fn write_dataset(ds: &Dataset, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir.join("audio"))?;
    let manifest = dir.join("manifest.csv");
    let mut w = csv::Writer::from_path(&manifest)?;
    w.write_record(MANIFEST_HEADER)?;
    for it in &ds.items {
        let rel = format!("audio/{}.wav", it.id);
        write_wav(dir.join(&rel), &ds.audio(it)?)?;
        w.write_record([it.id.as_str(), &rel, &ds.class_names[it.label], &it.split.to_string()])?;
    }
    w.flush()?;
    Ok(manifest)
}

/// Sound of one synthetic scene class.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthRecipe {
    pub name: String,
    /// Narrowband tone centers in Hz.
    pub tones: Vec<f64>,
    /// Amplitude-modulation rate of each tone in Hz.
    pub modulation: Vec<f64>,
    /// Noise bed power spectrum falls as `f^-color`.
    pub noise_color: f64,
    /// Mean transient events per second.
    pub transient_rate: f64,
    /// Carrier of the transient bursts in Hz.
    pub transient_freq: f64,
}

pub const NOISE_RMS: f64 = 0.05;
pub const TONE_AMPLITUDE: f64 = 0.04;
pub const TRANSIENT_AMPLITUDE: f64 = 0.15;
pub const TRANSIENT_SECONDS: f64 = 0.06;
/// Per-recording level spread, +/- dB.
pub const GAIN_SPREAD_DB: f64 = 6.0;
/// Per-recording tone detuning, +/- fraction.
pub const DETUNE: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSceneSpec {
    pub recipes: Vec<SynthRecipe>,
    pub duration: f64,
    pub sample_rate: u32,
}

const BUILTIN: [(&str, [f64; 2], [f64; 2], f64, f64, f64); 8] = [
    ("scene_a", [330.0, 990.0], [0.5, 1.0], 1.0, 0.5, 2500.0),
    ("scene_b", [520.0, 1560.0], [2.0, 3.0], 0.0, 1.0, 4000.0),
    ("scene_c", [800.0, 2400.0], [4.0, 0.5], 2.0, 1.5, 1200.0),
    ("scene_d", [1250.0, 3750.0], [1.0, 6.0], 0.5, 2.0, 6000.0),
    ("scene_e", [420.0, 2000.0], [6.0, 2.0], 1.5, 3.0, 3000.0),
    ("scene_f", [650.0, 3100.0], [3.0, 0.25], 1.0, 0.25, 800.0),
    ("scene_g", [1000.0, 4500.0], [0.25, 4.0], 0.0, 1.0, 1800.0),
    ("scene_h", [270.0, 5500.0], [8.0, 1.0], 2.0, 4.0, 5000.0),
];

impl SynthSceneSpec {
    pub fn new(recipes: Vec<SynthRecipe>, duration: f64, sample_rate: u32) -> Result<Self> {
        if recipes.len() < 2 {
            return Err(Error::InvalidArgument("a synthetic dataset needs at least two classes".into()));
        }
        if !(duration > 0.0) || sample_rate == 0 {
            return Err(Error::InvalidArgument(format!("invalid duration {duration} s at {sample_rate} Hz")));
        }
        let nyquist = sample_rate as f64 / 2.0;
        for (i, r) in recipes.iter().enumerate() {
            if r.tones.len() != r.modulation.len() {
                return Err(Error::InvalidArgument(format!("{}: one modulation rate per tone", r.name)));
            }
            let freqs = r.tones.iter().chain([&r.transient_freq]);
            if freqs.clone().any(|&f| !(f > 0.0 && f < nyquist)) || r.transient_rate < 0.0 {
                return Err(Error::InvalidArgument(format!("{}: frequencies must lie in (0, {nyquist})", r.name)));
            }
            if recipes[..i].iter().any(|o| o.name == r.name) {
                return Err(Error::InvalidArgument(format!("duplicate recipe name '{}'", r.name)));
            }
            let same = |o: &SynthRecipe| {
                o.tones == r.tones
                    && o.modulation == r.modulation
                    && o.noise_color == r.noise_color
                    && o.transient_rate == r.transient_rate
                    && o.transient_freq == r.transient_freq
            };
            if recipes[..i].iter().any(same) {
                return Err(Error::InvalidArgument(format!("recipe '{}' duplicates an earlier one", r.name)));
            }
        }
        Ok(Self {
            recipes,
            duration,
            sample_rate,
        })
    }

    /// The first `classes` built-in recipes (at most 8).
    pub fn builtin(classes: usize, duration: f64, sample_rate: u32) -> Result<Self> {
        if classes > BUILTIN.len() {
            return Err(Error::InvalidArgument(format!(
                "at most {} built-in classes, asked for {classes}",
                BUILTIN.len()
            )));
        }
        let recipes = BUILTIN[..classes]
            .iter()
            .map(|&(name, tones, modulation, noise_color, transient_rate, transient_freq)| SynthRecipe {
                name: name.to_string(),
                tones: tones.to_vec(),
                modulation: modulation.to_vec(),
                noise_color,
                transient_rate,
                transient_freq,
            })
            .collect();
        Self::new(recipes, duration, sample_rate)
    }

    /// Noise bed, amplitude-modulated tones and Poisson-timed decaying
    /// bursts, with per-recording detuning, phases and gain drawn from `seed`.
    pub fn render(&self, recipe: usize, seed: u64) -> Result<AudioClip> {
        let r = self
            .recipes
            .get(recipe)
            .ok_or_else(|| Error::InvalidArgument(format!("no recipe {recipe}")))?;
        let fs = self.sample_rate as f64;
        let n = (self.duration * fs).round() as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x: Vec<f64> = colored_noise(n, fs, r.noise_color, &mut rng)
            .into_iter()
            .map(|v| v * NOISE_RMS)
            .collect();
        for (&f, &m) in r.tones.iter().zip(&r.modulation) {
            let f = f * (1.0 + rng.random_range(-DETUNE..=DETUNE));
            let (ph, mph) = (rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI));
            for (i, v) in x.iter_mut().enumerate() {
                let t = i as f64 / fs;
                let env = 0.5 + 0.5 * (2.0 * PI * m * t + mph).sin();
                *v += TONE_AMPLITUDE * env * (2.0 * PI * f * t + ph).sin();
            }
        }
        if r.transient_rate > 0.0 {
            let gaps = Exp::new(r.transient_rate).map_err(|e| Error::InvalidArgument(e.to_string()))?;
            let len = (TRANSIENT_SECONDS * fs) as usize;
            let mut at = gaps.sample(&mut rng);
            while at < self.duration {
                let start = (at * fs) as usize;
                let ph = rng.random_range(0.0..2.0 * PI);
                for (k, v) in x.iter_mut().skip(start).take(len).enumerate() {
                    let t = k as f64 / fs;
                    let env = (-5.0 * k as f64 / len as f64).exp();
                    *v += TRANSIENT_AMPLITUDE * env * (2.0 * PI * r.transient_freq * t + ph).sin();
                }
                at += gaps.sample(&mut rng);
            }
        }
        let gain = 10f64.powf(rng.random_range(-GAIN_SPREAD_DB..=GAIN_SPREAD_DB) / 20.0);
        let samples = x.iter().map(|v| (v * gain).clamp(-1.0, 1.0) as f32).collect();
        AudioClip::new(samples, self.sample_rate)
    }
}

/// Unit-RMS Gaussian noise with power spectrum `~ f^-color` (flat below
/// 50 Hz).
fn colored_noise(n: usize, fs: f64, color: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut buf: Vec<Complex<f64>> = (0..n).map(|_| Complex::new(StandardNormal.sample(rng), 0.0)).collect();
    if color != 0.0 {
        let mut planner = FftPlanner::new();
        planner.plan_fft_forward(n).process(&mut buf);
        for (k, v) in buf.iter_mut().enumerate() {
            let bin = k.min(n - k) as f64 * fs / n as f64;
            *v *= bin.max(50.0).powf(-color / 2.0);
        }
        planner.plan_fft_inverse(n).process(&mut buf);
    }
    let rms = (buf.iter().map(|c| c.re * c.re).sum::<f64>() / n as f64).sqrt();
    buf.iter().map(|c| c.re / rms).collect()
}

/// Seed of item `index`, independent of generation order.
fn item_seed(seed: u64, index: usize) -> u64 {
    let mut z = seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `per_class` lazily rendered recordings per recipe, all in the training
/// split; use [`Dataset::resplit`] to hold some out.
pub fn generate_synth_dataset(spec: &SynthSceneSpec, per_class: usize, seed: u64) -> Result<Dataset> {
    if per_class == 0 {
        return Err(Error::InvalidArgument("per-class count must be at least 1".into()));
    }
    let mut items = Vec::with_capacity(spec.recipes.len() * per_class);
    for (c, r) in spec.recipes.iter().enumerate() {
        for i in 0..per_class {
            items.push(Item {
                id: format!("{}_{i:03}", r.name),
                source: AudioSource::Synth {
                    recipe: c,
                    seed: item_seed(seed, items.len()),
                },
                label: c,
                split: Split::Train,
            });
        }
    }
    Ok(Dataset {
        class_names: spec.recipes.iter().map(|r| r.name.clone()).collect(),
        items,
        synth: Some(spec.clone()),
    })
}

#[cfg(test)]
mod tests;
