//! A configured network with its parameters: batched inference and
//! checkpoint files.

use std::path::{Path, PathBuf};

use rand::RngCore;

use crate::attention::{att_crnn_forward, AttentionMask};
use crate::dsp::SpectroImage;
use crate::error::{Error, Result};
use crate::label::LabelDistribution;
use crate::layers::{cnn_baseline_forward, init_params, Bound, Forward, ModelConfig, ModelKind, NetOutput, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::io::{load_tensors, save_tensors};
use crate::tensor::{BatchStats, Graph, Tensor, Var};

/// Segments per inference graph.
pub const INFER_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

/// Per-segment inference result.
#[derive(Clone, Debug)]
pub struct SegmentOutput<T> {
    pub probs: LabelDistribution<T>,
    /// Pooled feature vector (attention-pooled or global-max-pooled).
    pub features: Vec<T>,
    pub attention: Option<AttentionMask<T>>,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = init_params(&config, seed)?;
        Ok(Self { config, params })
    }

    /// Runs the network on `s` (`N x K x M x T`); an rng selects training
    /// mode. Returns the outputs and any batch-norm batch statistics.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        s: Var,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<(NetOutput, Vec<(String, BatchStats<T>)>)> {
        let mut fw = Forward::new(g, bound, &self.params, &self.config, rng);
        let out = match self.config.kind {
            ModelKind::AttCrnn => att_crnn_forward(&mut fw, s)?,
            ModelKind::CnnBaseline => cnn_baseline_forward(&mut fw, s)?,
        };
        Ok((out, fw.bn_stats))
    }

    /// Per-sample shapes of every recorded intermediate (conv and pool
    /// outputs, `O`, `Z`) and of the pooled feature `x`, for one zero input.
    pub fn shape_trace(&self) -> Result<Vec<(String, Vec<usize>)>> {
        let c = &self.config;
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, false);
        let s = g.constant(Tensor::zeros([1, c.channels, c.bands, c.frames]));
        let mut fw = Forward::new(&mut g, &bound, &self.params, c, None);
        let out = match c.kind {
            ModelKind::AttCrnn => att_crnn_forward(&mut fw, s)?,
            ModelKind::CnnBaseline => cnn_baseline_forward(&mut fw, s)?,
        };
        let mut trace = std::mem::take(&mut fw.trace);
        trace.push(("x".into(), g.shape(out.features).to_vec()));
        trace.push(("probs".into(), g.shape(out.probs).to_vec()));
        Ok(trace.into_iter().map(|(name, shape)| (name, shape[1..].to_vec())).collect())
    }

    /// Stacks images into an `N x K x M x T` tensor.
    pub fn batch_tensor<'a, I>(&self, images: I) -> Result<Tensor<T>>
    where
        I: IntoIterator<Item = &'a SpectroImage>,
    {
        let c = &self.config;
        let mut data = Vec::new();
        let mut n = 0;
        for img in images {
            if (img.m, img.t, img.k) != (c.bands, c.frames, c.channels) {
                return Err(Error::Shape {
                    op: "batch_tensor",
                    detail: format!(
                        "image {}x{}x{}, model expects {}x{}x{}",
                        img.m, img.t, img.k, c.bands, c.frames, c.channels
                    ),
                });
            }
            data.extend(img.data.iter().map(|&v| T::lit(v as f64)));
            n += 1;
        }
        Tensor::new([n, c.channels, c.bands, c.frames], data)
    }

    /// Inference-mode outputs for every image, in order.
    pub fn infer(&self, images: &[SpectroImage], with_attention: bool) -> Result<Vec<SegmentOutput<T>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(INFER_CHUNK) {
            let mut g = Graph::new();
            let bound = self.params.bind(&mut g, false);
            let s = g.constant(self.batch_tensor(chunk)?);
            let (net, _) = self.forward(&mut g, &bound, s, None)?;
            let c = self.config.classes;
            let d = g.shape(net.features)[1];
            let probs = g.value(net.probs).data();
            let feats = g.value(net.features).data();
            for i in 0..chunk.len() {
                let attention = match (with_attention, &net.attention) {
                    (true, Some(att)) => Some(AttentionMask::from_graph(&g, att, i)),
                    _ => None,
                };
                out.push(SegmentOutput {
                    probs: LabelDistribution::new(probs[i * c..(i + 1) * c].to_vec())?,
                    features: feats[i * d..(i + 1) * d].to_vec(),
                    attention,
                });
            }
        }
        Ok(out)
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    /// Writes the tensor container to `path` and the config block to
    /// [`config_path`]`(path)`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        save_tensors(path, &self.params.to_named())?;
        std::fs::write(config_path(path), self.config.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let cfg_path = config_path(path);
        let text = std::fs::read_to_string(&cfg_path)
            .map_err(|e| Error::Config(format!("cannot read model config {}: {e}", cfg_path.display())))?;
        let config = ModelConfig::from_text(&text)?;
        let mut model = Self::new(config, 0)?;
        model.params.load_named(load_tensors(path)?)?;
        Ok(model)
    }
}

/// Sidecar holding a checkpoint's architecture: `<path>.cfg`.
pub fn config_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".cfg");
    PathBuf::from(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny(kind: ModelKind) -> ModelConfig {
        ModelConfig {
            frames: 6,
            conv_filters: [2, 2, 3],
            hidden: 3,
            att_size: 4,
            ..ModelConfig::standard(kind, 3)
        }
    }

    fn images(n: usize, t: usize, seed: u64) -> Vec<SpectroImage> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| SpectroImage::new(64, t, 2, (0..128 * t).map(|_| rng.random_range(-5.0..0.0)).collect()).unwrap())
            .collect()
    }

    #[test]
    fn infer_batches_agree_with_single_items() {
        for kind in [ModelKind::AttCrnn, ModelKind::CnnBaseline] {
            let m = Model::<f64>::new(tiny(kind), 4).unwrap();
            let imgs = images(INFER_CHUNK + 3, 6, 1);
            let all = m.infer(&imgs, true).unwrap();
            assert_eq!(all.len(), imgs.len());
            for i in [0, INFER_CHUNK + 2] {
                let one = m.infer(&imgs[i..i + 1], true).unwrap();
                for (a, b) in one[0].probs.probs().iter().zip(all[i].probs.probs()) {
                    assert!((a - b).abs() < 1e-12);
                }
                assert_eq!(one[0].features.len(), m.config.feature_dim());
            }
            assert_eq!(all[0].attention.is_some(), kind == ModelKind::AttCrnn);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.bin");
        let m = Model::<f32>::new(tiny(ModelKind::AttCrnn), 9).unwrap();
        m.save(&p).unwrap();
        assert!(config_path(&p).exists());
        assert_eq!(Model::<f32>::load(&p).unwrap(), m);
        std::fs::remove_file(config_path(&p)).unwrap();
        assert!(Model::<f32>::load(&p).is_err());
    }

    #[test]
    fn mismatched_image_shape_is_rejected() {
        let m = Model::<f32>::new(tiny(ModelKind::CnnBaseline), 0).unwrap();
        assert!(m.infer(&images(1, 7, 0), false).is_err());
    }
}
