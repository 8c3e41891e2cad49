use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Kernel sizes (frequency x time) of the three conv layers.
pub const CONV_KERNELS: [(usize, usize); 3] = [(5, 5), (3, 3), (2, 2)];
/// Max-pool kernel and stride (frequency x time).
pub const POOL: (usize, usize) = (4, 1);
/// Total frequency reduction through the conv block.
pub const FREQ_REDUCTION: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    AttCrnn,
    CnnBaseline,
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "att_crnn" => Ok(Self::AttCrnn),
            "cnn_baseline" => Ok(Self::CnnBaseline),
            other => Err(Error::Config(format!("unknown model kind '{other}'"))),
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::AttCrnn => "att_crnn",
            Self::CnnBaseline => "cnn_baseline",
        })
    }
}

/// Architecture hyper-parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Input frequency bands `M`.
    pub bands: usize,
    /// Input frames `T`.
    pub frames: usize,
    /// Input channels `K`.
    pub channels: usize,
    pub conv_filters: [usize; 3],
    /// GRU hidden size `H`.
    pub hidden: usize,
    /// Attention layer size.
    pub att_size: usize,
    pub classes: usize,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    pub conv_dropout: f64,
    pub rnn_dropout: f64,
}

impl ModelConfig {
    /// Full-size network: 64x80x2 input, 64/128/256 filters, H = 128,
    /// attention size 64.
    pub fn standard(kind: ModelKind, classes: usize) -> Self {
        Self {
            kind,
            bands: 64,
            frames: 80,
            channels: 2,
            conv_filters: [64, 128, 256],
            hidden: 128,
            att_size: 64,
            classes,
            bn_eps: 1e-5,
            bn_momentum: 0.99,
            conv_dropout: 0.25,
            rnn_dropout: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.bands == 0 || self.bands % FREQ_REDUCTION != 0 {
            return bad(format!("bands must be a positive multiple of {FREQ_REDUCTION}, got {}", self.bands));
        }
        if self.frames == 0 || self.channels == 0 {
            return bad("frames and channels must be positive".into());
        }
        if self.conv_filters.contains(&0) || self.hidden == 0 || self.att_size == 0 {
            return bad("layer sizes must be positive".into());
        }
        if self.classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.classes));
        }
        for (name, r) in [("conv_dropout", self.conv_dropout), ("rnn_dropout", self.rnn_dropout)] {
            if !(0.0..1.0).contains(&r) {
                return bad(format!("{name} must be in [0, 1), got {r}"));
            }
        }
        if !(0.0..1.0).contains(&self.bn_momentum) || !(self.bn_eps > 0.0) {
            return bad("invalid batch-norm momentum or epsilon".into());
        }
        Ok(())
    }

    /// Rows `F` of the conv block output.
    pub fn conv_features(&self) -> usize {
        self.bands / FREQ_REDUCTION * self.conv_filters[2]
    }

    /// Length of the pooled feature fed to the output layer.
    pub fn feature_dim(&self) -> usize {
        match self.kind {
            ModelKind::AttCrnn => 2 * self.hidden,
            ModelKind::CnnBaseline => self.conv_features(),
        }
    }

    /// `key = value` lines.
    pub fn to_text(&self) -> String {
        let f = self.conv_filters;
        format!(
            "kind = {}\nbands = {}\nframes = {}\nchannels = {}\nconv_filters = {},{},{}\nhidden = {}\natt_size = {}\nclasses = {}\nbn_eps = {:e}\nbn_momentum = {}\nconv_dropout = {}\nrnn_dropout = {}\n",
            self.kind,
            self.bands,
            self.frames,
            self.channels,
            f[0],
            f[1],
            f[2],
            self.hidden,
            self.att_size,
            self.classes,
            self.bn_eps,
            self.bn_momentum,
            self.conv_dropout,
            self.rnn_dropout
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::standard(ModelKind::AttCrnn, 2);
        let mut seen = 0;
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("malformed config line '{line}'")))?;
            let v = v.trim();
            let num = |v: &str| v.parse::<f64>().map_err(|_| Error::Config(format!("bad value '{v}' for {}", k.trim())));
            let int = |v: &str| v.parse::<usize>().map_err(|_| Error::Config(format!("bad value '{v}' for {}", k.trim())));
            match k.trim() {
                "kind" => cfg.kind = v.parse()?,
                "bands" => cfg.bands = int(v)?,
                "frames" => cfg.frames = int(v)?,
                "channels" => cfg.channels = int(v)?,
                "conv_filters" => {
                    let parts: Vec<usize> = v.split(',').map(|p| int(p.trim())).collect::<Result<_>>()?;
                    cfg.conv_filters = parts
                        .try_into()
                        .map_err(|_| Error::Config("conv_filters needs three values".into()))?;
                }
                "hidden" => cfg.hidden = int(v)?,
                "att_size" => cfg.att_size = int(v)?,
                "classes" => cfg.classes = int(v)?,
                "bn_eps" => cfg.bn_eps = num(v)?,
                "bn_momentum" => cfg.bn_momentum = num(v)?,
                "conv_dropout" => cfg.conv_dropout = num(v)?,
                "rnn_dropout" => cfg.rnn_dropout = num(v)?,
                other => return Err(Error::Config(format!("unknown config key '{other}'"))),
            }
            seen += 1;
        }
        if seen != 12 {
            return Err(Error::Config(format!("config has {seen} of 12 keys")));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
