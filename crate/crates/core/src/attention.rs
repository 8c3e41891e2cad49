//! Spatio-temporal attention pooling over the recurrent output `Z`.
//!
//! Temporal weights score each column `z_t`, spatial weights score each
//! row `z~_s`; both scorers are `v^T tanh(W^T u + b)` followed by a softmax.
//! The mask is their outer product and the pooled feature is
//! `x_s = sum_t tanh(A_st * Z_st)`.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::layers::{Bound, Forward, NetOutput};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Var};

/// Scorer weights for one attention direction.
#[derive(Clone, Copy, Debug)]
pub struct Scorer {
    pub w: Var,
    pub b: Var,
    pub v: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub temporal: Scorer,
    pub spatial: Scorer,
}

impl AttentionParams {
    pub fn bind(p: &Bound) -> Result<Self> {
        let scorer = |name: &str| -> Result<Scorer> {
            Ok(Scorer {
                w: p.var(&format!("att.{name}.w"))?,
                b: p.var(&format!("att.{name}.b"))?,
                v: p.var(&format!("att.{name}.v"))?,
            })
        };
        Ok(Self {
            temporal: scorer("tem")?,
            spatial: scorer("spa")?,
        })
    }
}

/// Scores every row of an `R x D` matrix, giving `R x 1`.
fn score_rows<T: Scalar>(g: &mut Graph<T>, rows: Var, s: &Scorer) -> Result<Var> {
    let hid = g.matmul(rows, s.w)?;
    let hid = g.add_bias(hid, s.b, 1)?;
    let hid = g.tanh(hid);
    g.matmul(hid, s.v)
}

fn check_z<T: Scalar>(g: &Graph<T>, z: Var, op: &'static str) -> Result<(usize, usize, usize)> {
    match *g.shape(z) {
        [n, s, t] => Ok((n, s, t)),
        ref other => Err(Error::Shape {
            op,
            detail: format!("expected N x 2H x T, got {other:?}"),
        }),
    }
}

/// Softmax over time of the column scores of `Z` (`N x 2H x T`), `N x T`.
pub fn temporal_attention<T: Scalar>(g: &mut Graph<T>, z: Var, s: &Scorer) -> Result<Var> {
    let (n, rows, t) = check_z(g, z, "temporal_attention")?;
    let cols = g.permute(z, &[0, 2, 1])?;
    let cols = g.reshape(cols, &[n * t, rows])?;
    let scores = score_rows(g, cols, s)?;
    let scores = g.reshape(scores, &[n, t])?;
    g.softmax_over_axis(scores, 1)
}

/// Softmax over feature rows of the row scores of `Z`, `N x 2H`.
pub fn spatial_attention<T: Scalar>(g: &mut Graph<T>, z: Var, s: &Scorer) -> Result<Var> {
    let (n, rows, t) = check_z(g, z, "spatial_attention")?;
    let flat = g.reshape(z, &[n * rows, t])?;
    let scores = score_rows(g, flat, s)?;
    let scores = g.reshape(scores, &[n, rows])?;
    g.softmax_over_axis(scores, 1)
}

/// `A = a_spa (x) a_tem`, `N x 2H x T`.
pub fn attention_mask<T: Scalar>(g: &mut Graph<T>, a_spa: Var, a_tem: Var) -> Result<Var> {
    g.outer_product(a_spa, a_tem)
}

/// `x_s = sum_t tanh(A_st Z_st)`, `N x 2H`.
pub fn attention_pool<T: Scalar>(g: &mut Graph<T>, z: Var, mask: Var) -> Result<Var> {
    let m = g.mul(mask, z)?;
    let m = g.tanh(m);
    g.sum_over_axis(m, 2)
}

/// Handles produced by the attention head.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub a_tem: Var,
    pub a_spa: Var,
    pub mask: Var,
    pub x: Var,
}

pub fn attention_head<T: Scalar>(g: &mut Graph<T>, z: Var, p: &AttentionParams) -> Result<AttentionVars> {
    let a_tem = temporal_attention(g, z, &p.temporal)?;
    let a_spa = spatial_attention(g, z, &p.spatial)?;
    let mask = attention_mask(g, a_spa, a_tem)?;
    let x = attention_pool(g, z, mask)?;
    Ok(AttentionVars { a_tem, a_spa, mask, x })
}

/// Conv block, bidirectional GRU stack, attention pooling and softmax
/// output for an `N x K x M x T` batch.
pub fn att_crnn_forward<T: Scalar>(fw: &mut Forward<'_, '_, T>, s: Var) -> Result<NetOutput> {
    let o = fw.conv_block(s)?;
    let z = fw.bigru(o)?;
    let att = attention_head(fw.g, z, &AttentionParams::bind(fw.params)?)?;
    let (logits, probs) = fw.dense_softmax(att.x)?;
    Ok(NetOutput {
        features: att.x,
        logits,
        probs,
        attention: Some(att),
    })
}

/// Attention vectors and mask of one segment.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask<T> {
    pub a_spa: Vec<T>,
    pub a_tem: Vec<T>,
    /// Row-major `2H x T`.
    pub mask: Vec<T>,
}

impl<T: Scalar> AttentionMask<T> {
    /// Outer product of two weight vectors.
    pub fn new(a_spa: Vec<T>, a_tem: Vec<T>) -> Self {
        let mask = a_spa.iter().flat_map(|&s| a_tem.iter().map(move |&t| s * t)).collect();
        Self { a_spa, a_tem, mask }
    }

    /// Item `i` of a batched attention result.
    pub fn from_graph(g: &Graph<T>, att: &AttentionVars, i: usize) -> Self {
        let rows = g.shape(att.a_spa)[1];
        let t = g.shape(att.a_tem)[1];
        Self {
            a_spa: g.value(att.a_spa).data()[i * rows..(i + 1) * rows].to_vec(),
            a_tem: g.value(att.a_tem).data()[i * t..(i + 1) * t].to_vec(),
            mask: g.value(att.mask).data()[i * rows * t..(i + 1) * rows * t].to_vec(),
        }
    }

    pub fn at(&self, s: usize, t: usize) -> T {
        self.mask[s * self.a_tem.len() + t]
    }

    /// One row per spatial index: `s, a_spa, A[s, 0..T]`, then a final
    /// `a_tem` row holding the temporal weights.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let t = self.a_tem.len();
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["row".to_string(), "a_spa".to_string()];
        header.extend((0..t).map(|i| format!("t{i}")));
        out.write_record(&header)?;
        for (s, a) in self.a_spa.iter().enumerate() {
            let mut rec = vec![s.to_string(), a.to_string()];
            rec.extend(self.mask[s * t..(s + 1) * t].iter().map(T::to_string));
            out.write_record(&rec)?;
        }
        let mut rec = vec!["a_tem".to_string(), String::new()];
        rec.extend(self.a_tem.iter().map(T::to_string));
        out.write_record(&rec)?;
        out.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}
