//! Network building blocks: the convolutional block, bidirectional GRU
//! stack, batch normalization and the dense softmax output.

mod config;
mod params;

pub use config::{ModelConfig, ModelKind, CONV_KERNELS, FREQ_REDUCTION, POOL};
pub use params::{fan_in_uniform, Bound, ParamStore};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{BatchStats, Graph, Tensor, Var};

const CONV_GAIN: f64 = 6.0;
const DENSE_GAIN: f64 = 3.0;

/// Fresh parameters for `cfg`, deterministic in `seed`.
pub fn init_params<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let mut in_ch = cfg.channels;
    for (i, (&(kh, kw), &out)) in CONV_KERNELS.iter().zip(&cfg.conv_filters).enumerate() {
        let fan_in = in_ch * kh * kw;
        store.insert(format!("conv{i}.w"), fan_in_uniform(&mut rng, &[out, in_ch, kh, kw], fan_in, CONV_GAIN));
        store.insert(format!("conv{i}.b"), Tensor::zeros([out]));
        store.insert(format!("conv{i}.bn.gamma"), Tensor::full([out], T::one()));
        store.insert(format!("conv{i}.bn.beta"), Tensor::zeros([out]));
        store.insert_buffer(format!("conv{i}.bn.mean"), Tensor::zeros([out]));
        store.insert_buffer(format!("conv{i}.bn.var"), Tensor::full([out], T::one()));
        in_ch = out;
    }
    let h = cfg.hidden;
    match cfg.kind {
        ModelKind::AttCrnn => {
            let mut input = cfg.conv_features();
            for layer in 0..2 {
                for dir in ["fwd", "bwd"] {
                    let p = format!("gru{layer}.{dir}");
                    store.insert(format!("{p}.w_x"), fan_in_uniform(&mut rng, &[input, 3 * h], input, DENSE_GAIN));
                    store.insert(format!("{p}.u_zr"), fan_in_uniform(&mut rng, &[h, 2 * h], h, DENSE_GAIN));
                    store.insert(format!("{p}.u_h"), fan_in_uniform(&mut rng, &[h, h], h, DENSE_GAIN));
                    store.insert(format!("{p}.b"), Tensor::zeros([3 * h]));
                }
                input = 2 * h;
            }
            store.insert("proj.w", fan_in_uniform(&mut rng, &[2 * h, 2 * h], 2 * h, DENSE_GAIN));
            store.insert("proj.b", Tensor::zeros([2 * h]));
            let da = cfg.att_size;
            for (name, rows) in [("tem", 2 * h), ("spa", cfg.frames)] {
                store.insert(format!("att.{name}.w"), fan_in_uniform(&mut rng, &[rows, da], rows, DENSE_GAIN));
                store.insert(format!("att.{name}.b"), Tensor::zeros([da]));
                store.insert(format!("att.{name}.v"), fan_in_uniform(&mut rng, &[da, 1], da, DENSE_GAIN));
            }
        }
        ModelKind::CnnBaseline => {}
    }
    let d = cfg.feature_dim();
    store.insert("out.w", fan_in_uniform(&mut rng, &[d, cfg.classes], d, DENSE_GAIN));
    store.insert("out.b", Tensor::zeros([cfg.classes]));
    Ok(store)
}

/// Blends batch statistics into the running buffers:
/// `running = momentum * running + (1 - momentum) * batch`.
pub fn update_running_stats<T: Scalar>(
    store: &mut ParamStore<T>,
    stats: &[(String, BatchStats<T>)],
    momentum: f64,
) -> Result<()> {
    let m = T::lit(momentum);
    let k = T::one() - m;
    for (prefix, s) in stats {
        for (suffix, batch) in [("mean", &s.mean), ("var", &s.var)] {
            let buf = store.buffer_mut(&format!("{prefix}.{suffix}"))?;
            for (r, &b) in buf.data_mut().iter_mut().zip(batch) {
                *r = m * *r + k * b;
            }
        }
    }
    Ok(())
}

/// State threaded through one forward pass.
///
/// With an rng the pass is in training mode: dropout is active and batch
/// norm uses (and records) batch statistics. Without one, dropout is off
/// and the running statistics are used.
pub struct Forward<'a, 'r, T: Scalar> {
    pub g: &'a mut Graph<T>,
    pub params: &'a Bound,
    pub store: &'a ParamStore<T>,
    pub cfg: &'a ModelConfig,
    rng: Option<&'r mut dyn RngCore>,
    /// Batch statistics keyed by batch-norm prefix (training mode only).
    pub bn_stats: Vec<(String, BatchStats<T>)>,
    /// `(label, shape)` of every stage, for inspection.
    pub trace: Vec<(String, Vec<usize>)>,
}

impl<'a, 'r, T: Scalar> Forward<'a, 'r, T> {
    pub fn new(
        g: &'a mut Graph<T>,
        params: &'a Bound,
        store: &'a ParamStore<T>,
        cfg: &'a ModelConfig,
        rng: Option<&'r mut dyn RngCore>,
    ) -> Self {
        Self {
            g,
            params,
            store,
            cfg,
            rng,
            bn_stats: Vec::new(),
            trace: Vec::new(),
        }
    }

    pub fn training(&self) -> bool {
        self.rng.is_some()
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.params.var(name)
    }

    fn record(&mut self, label: impl Into<String>, v: Var) {
        let shape = self.g.shape(v).to_vec();
        self.trace.push((label.into(), shape));
    }

    /// Inverted dropout; identity outside training or at rate 0.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        let Some(rng) = self.rng.as_deref_mut() else {
            return Ok(x);
        };
        if rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let scale = T::lit(1.0 / keep);
        let shape = self.g.shape(x).to_vec();
        let n: usize = shape.iter().product();
        // one uniform u32 per element, kept when below keep * 2^32
        let threshold = (keep * 4_294_967_296.0) as u64;
        let mut bytes = vec![0u8; 4 * n];
        rng.fill_bytes(&mut bytes);
        let mask = bytes
            .chunks_exact(4)
            .map(|b| {
                let u = u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as u64;
                if u < threshold {
                    scale
                } else {
                    T::zero()
                }
            })
            .collect();
        self.g.dropout_mask_apply(x, Tensor::new(shape, mask)?)
    }

    /// Batch norm over every axis but axis 1, using parameters and running
    /// buffers under `prefix`.
    pub fn batch_norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let gamma = self.var(&format!("{prefix}.gamma"))?;
        let beta = self.var(&format!("{prefix}.beta"))?;
        let eps = T::lit(self.cfg.bn_eps);
        if self.training() {
            let (y, stats) = self.g.batch_norm(x, gamma, beta, eps, None)?;
            if let Some(s) = stats {
                self.bn_stats.push((prefix.to_string(), s));
            }
            Ok(y)
        } else {
            let mean = self.store.buffer(&format!("{prefix}.mean"))?.data();
            let var = self.store.buffer(&format!("{prefix}.var"))?.data();
            Ok(self.g.batch_norm(x, gamma, beta, eps, Some((mean, var)))?.0)
        }
    }

    /// `N x K x M x T` images to the `N x F x T` map `O`, `F = (M/64) * C3`.
    ///
    /// Each layer: SAME conv, ReLU, batch norm, dropout, 4x1 max pool.
    pub fn conv_block(&mut self, s: Var) -> Result<Var> {
        let shape = self.g.shape(s).to_vec();
        let c = self.cfg;
        if shape.len() != 4 || shape[1] != c.channels || shape[2] != c.bands || shape[3] != c.frames {
            return Err(Error::Shape {
                op: "conv_block",
                detail: format!("input {shape:?}, expected N x {} x {} x {}", c.channels, c.bands, c.frames),
            });
        }
        let mut x = s;
        for i in 0..CONV_KERNELS.len() {
            let w = self.var(&format!("conv{i}.w"))?;
            let b = self.var(&format!("conv{i}.b"))?;
            x = self.g.conv_2d_same(x, w, b)?;
            self.record(format!("conv{i}"), x);
            x = self.g.relu(x);
            x = self.batch_norm(x, &format!("conv{i}.bn"))?;
            x = self.dropout(x, c.conv_dropout)?;
            x = self.g.max_pool_2d(x, POOL, POOL)?;
            self.record(format!("pool{i}"), x);
        }
        let n = shape[0];
        let o = self.g.reshape(x, &[n, c.conv_features(), c.frames])?;
        self.record("O", o);
        Ok(o)
    }

    /// Two stacked bidirectional GRU layers followed by the shared output
    /// projection: `N x F x T` to `N x 2H x T`.
    pub fn bigru(&mut self, o: Var) -> Result<Var> {
        let shape = self.g.shape(o).to_vec();
        if shape.len() != 3 {
            return Err(Error::Shape {
                op: "bigru",
                detail: format!("expected N x F x T, got {shape:?}"),
            });
        }
        let (n, f, t) = (shape[0], shape[1], shape[2]);
        let h = self.cfg.hidden;
        let seq = self.g.permute(o, &[2, 0, 1])?;
        let mut seq = self.g.reshape(seq, &[t * n, f])?;
        for layer in 0..2 {
            seq = self.dropout(seq, self.cfg.rnn_dropout)?;
            let fwd = GruCell::bind(self.params, &format!("gru{layer}.fwd"))?;
            let bwd = GruCell::bind(self.params, &format!("gru{layer}.bwd"))?;
            seq = bidirectional_layer(self.g, seq, n, &fwd, &bwd)?;
        }
        seq = self.dropout(seq, self.cfg.rnn_dropout)?;
        let w = self.var("proj.w")?;
        let b = self.var("proj.b")?;
        let z = self.g.matmul(seq, w)?;
        let z = self.g.add_bias(z, b, 1)?;
        let z = self.g.reshape(z, &[t, n, 2 * h])?;
        let z = self.g.permute(z, &[1, 2, 0])?;
        self.record("Z", z);
        Ok(z)
    }

    /// `N x D` features to `(logits, probabilities)`, both `N x C`.
    pub fn dense_softmax(&mut self, x: Var) -> Result<(Var, Var)> {
        let w = self.var("out.w")?;
        let b = self.var("out.b")?;
        dense_softmax(self.g, x, w, b)
    }
}

/// Output of a full network pass.
#[derive(Clone, Copy, Debug)]
pub struct NetOutput {
    /// Pooled feature, `N x D`.
    pub features: Var,
    pub logits: Var,
    /// Class posteriors, `N x C`.
    pub probs: Var,
    pub attention: Option<crate::attention::AttentionVars>,
}

/// Conv block, global max pooling over time and softmax output.
pub fn cnn_baseline_forward<T: Scalar>(fw: &mut Forward<'_, '_, T>, s: Var) -> Result<NetOutput> {
    let o = fw.conv_block(s)?;
    let x = global_max_pool(fw.g, o)?;
    let (logits, probs) = fw.dense_softmax(x)?;
    Ok(NetOutput {
        features: x,
        logits,
        probs,
        attention: None,
    })
}

/// `softmax(x W + b)` over classes for `N x D` input.
pub fn dense_softmax<T: Scalar>(g: &mut Graph<T>, x: Var, w: Var, b: Var) -> Result<(Var, Var)> {
    let logits = g.matmul(x, w)?;
    let logits = g.add_bias(logits, b, 1)?;
    let probs = g.softmax_over_axis(logits, 1)?;
    Ok((logits, probs))
}

/// Maximum over time of an `N x F x T` map, giving `N x F`.
pub fn global_max_pool<T: Scalar>(g: &mut Graph<T>, o: Var) -> Result<Var> {
    let shape = g.shape(o).to_vec();
    if shape.len() != 3 {
        return Err(Error::Shape {
            op: "global_max_pool",
            detail: format!("expected N x F x T, got {shape:?}"),
        });
    }
    let (n, f, t) = (shape[0], shape[1], shape[2]);
    let x = g.reshape(o, &[n, f, 1, t])?;
    let x = g.max_pool_2d(x, (1, t), (1, t))?;
    g.reshape(x, &[n, f])
}

/// One GRU direction. Gate columns of `w_x` and `b` are ordered
/// `[update | reset | candidate]`; `u_zr` holds the update and reset
/// recurrent weights.
#[derive(Clone, Copy, Debug)]
pub struct GruCell {
    pub w_x: Var,
    pub u_zr: Var,
    pub u_h: Var,
    pub b: Var,
}

impl GruCell {
    pub fn bind(p: &Bound, prefix: &str) -> Result<Self> {
        Ok(Self {
            w_x: p.var(&format!("{prefix}.w_x"))?,
            u_zr: p.var(&format!("{prefix}.u_zr"))?,
            u_h: p.var(&format!("{prefix}.u_h"))?,
            b: p.var(&format!("{prefix}.b"))?,
        })
    }

    pub fn hidden<T: Scalar>(&self, g: &Graph<T>) -> usize {
        g.shape(self.u_h)[0]
    }

    /// Input projection `x W_x + b` for `rows x F` input.
    pub fn project<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let xp = g.matmul(x, self.w_x)?;
        g.add_bias(xp, self.b, 1)
    }

    /// One step from an already projected input (`N x 3H`).
    pub fn step_projected<T: Scalar>(&self, g: &mut Graph<T>, xp: Var, h_prev: Var) -> Result<Var> {
        let hs = self.hidden(g);
        let hzr = g.matmul(h_prev, self.u_zr)?;
        let xz = g.slice(xp, 1, 0, hs)?;
        let xr = g.slice(xp, 1, hs, hs)?;
        let xh = g.slice(xp, 1, 2 * hs, hs)?;
        let hz = g.slice(hzr, 1, 0, hs)?;
        let hr = g.slice(hzr, 1, hs, hs)?;
        let z = g.add(xz, hz)?;
        let z = g.sigmoid(z);
        let r = g.add(xr, hr)?;
        let r = g.sigmoid(r);
        let rh = g.mul(r, h_prev)?;
        let rh = g.matmul(rh, self.u_h)?;
        let cand = g.add(xh, rh)?;
        let cand = g.tanh(cand);
        // (1 - z) h + z c  ==  h + z (c - h)
        let diff = g.sub(cand, h_prev)?;
        let upd = g.mul(z, diff)?;
        g.add(h_prev, upd)
    }

    /// `h_t` from `o_t` (`N x F`) and `h_prev` (`N x H`).
    pub fn step<T: Scalar>(&self, g: &mut Graph<T>, o_t: Var, h_prev: Var) -> Result<Var> {
        let xp = self.project(g, o_t)?;
        self.step_projected(g, xp, h_prev)
    }

    /// Runs over a time-major `(T*N) x F` sequence from a zero state,
    /// returning the `N x H` state at every step in input order.
    pub fn run<T: Scalar>(&self, g: &mut Graph<T>, seq: Var, n: usize, reverse: bool) -> Result<Vec<Var>> {
        let rows = g.shape(seq)[0];
        if n == 0 || rows % n != 0 {
            return Err(Error::Shape {
                op: "gru",
                detail: format!("{rows} rows not divisible by batch {n}"),
            });
        }
        let t = rows / n;
        let hs = self.hidden(g);
        let xp = self.project(g, seq)?;
        let mut h = g.constant(Tensor::zeros([n, hs]));
        let mut out = vec![h; t];
        let order: Vec<usize> = if reverse { (0..t).rev().collect() } else { (0..t).collect() };
        for step in order {
            let x = g.slice(xp, 0, step * n, n)?;
            h = self.step_projected(g, x, h)?;
            out[step] = h;
        }
        Ok(out)
    }
}

/// One bidirectional layer on a time-major `(T*N) x F` sequence; row block
/// `t` of the output is `[h_b(t), h_f(t)]`, giving `(T*N) x 2H`.
pub fn bidirectional_layer<T: Scalar>(
    g: &mut Graph<T>,
    seq: Var,
    n: usize,
    fwd: &GruCell,
    bwd: &GruCell,
) -> Result<Var> {
    let hf = fwd.run(g, seq, n, false)?;
    let hb = bwd.run(g, seq, n, true)?;
    let steps = hf
        .iter()
        .zip(&hb)
        .map(|(&f, &b)| g.concat(&[b, f], 1))
        .collect::<Result<Vec<_>>>()?;
    g.concat(&steps, 0)
}
