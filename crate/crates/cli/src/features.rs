//! Per-recording feature images with an on-disk cache keyed by the audio
//! file's SHA-256 and the extractor parameters.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rayon::prelude::*;
use scenecrnn::data::{AudioSource, Dataset, Item, Split};
use scenecrnn::dsp::{read_images, write_images, FeatureConfig, FeatureExtractor, SpectroImage};
use scenecrnn::train::SegmentSet;
use sha2::{Digest, Sha256};

pub const CACHE_ENV: &str = "SCENECRNN_CACHE";

/// `--cache`, else `$SCENECRNN_CACHE`, else `.cache` beside the manifest.
pub fn cache_dir(flag: Option<&Path>, manifest: &Path) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    if let Some(p) = std::env::var_os(CACHE_ENV).filter(|v| !v.is_empty()) {
        return PathBuf::from(p);
    }
    manifest.parent().unwrap_or(Path::new(".")).join(".cache")
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

pub struct FeatureCache {
    dir: PathBuf,
    extractor: FeatureExtractor,
}

impl FeatureCache {
    pub fn new(dir: PathBuf, config: FeatureConfig) -> Result<Self> {
        std::fs::create_dir_all(&dir).with_context(|| format!("cannot create cache directory {}", dir.display()))?;
        Ok(Self {
            dir,
            extractor: FeatureExtractor::new(config)?,
        })
    }

    fn entry(&self, hash: &str) -> PathBuf {
        self.dir
            .join(format!("{hash}-{}.stfi", self.extractor.config().cache_key()))
    }

    /// Segment images of one recording, computed on a cache miss.
    pub fn images(&self, ds: &Dataset, item: &Item) -> Result<Vec<SpectroImage>> {
        let entry = match &item.source {
            AudioSource::Wav(path) => Some(self.entry(&file_sha256(path)?)),
            AudioSource::Synth { .. } => None,
        };
        if let Some(p) = entry.as_ref().filter(|p| p.exists()) {
            if let Ok(images) = read_images(BufReader::new(File::open(p)?)) {
                return Ok(images);
            }
        }
        let clip = ds.audio(item).with_context(|| format!("reading {}", item.id))?;
        let images = self
            .extractor
            .recording_inputs(&clip)
            .with_context(|| format!("extracting features for {}", item.id))?;
        if let Some(p) = entry {
            let tmp = p.with_extension(format!("tmp{}", std::process::id()));
            let mut w = BufWriter::new(File::create(&tmp)?);
            write_images(&mut w, &images)?;
            w.flush()?;
            std::fs::rename(&tmp, &p)?;
        }
        Ok(images)
    }

    /// Images of every recording in `split`, in manifest order, with the
    /// item indices they came from.
    pub fn split_images(&self, ds: &Dataset, split: Split) -> Result<Vec<(usize, Vec<SpectroImage>)>> {
        let items: Vec<(usize, &Item)> = ds.items.iter().enumerate().filter(|(_, it)| it.split == split).collect();
        items
            .par_iter()
            .map(|&(i, it)| Ok((i, self.images(ds, it)?)))
            .collect()
    }

    pub fn segment_set(&self, ds: &Dataset, split: Split) -> Result<SegmentSet> {
        let mut set = SegmentSet::new(ds.classes());
        for (i, images) in self.split_images(ds, split)? {
            set.push_recording(i, ds.items[i].label, images);
        }
        Ok(set)
    }
}
