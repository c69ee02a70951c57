//! Backbone-independent attention math.
//!
//! Standard scaled dot-product attention, the cross-image variant where the
//! queries come from one denoising branch while keys and values come from
//! another, and the mean-preserving contrast applied to attention maps before
//! they are multiplied with the values.
//!
//! All maps are row-stochastic `num_queries × num_keys` matrices. Contrasted
//! maps keep their row sums but may hold negative weights.

use ndarray::{s, Array2, ArrayView2, Axis};
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_CONTRAST_BETA: f32 = 1.67;

/// Which branch supplies the keys and values of an attention layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AttentionMode {
    /// Keys and values from the branch's own features.
    SelfAttention,
    /// Keys and values taken from the appearance branch.
    CrossImageAppearance,
    /// Keys and values taken from the structure branch.
    CrossImageStructure,
}

impl AttentionMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            AttentionMode::SelfAttention => "self",
            AttentionMode::CrossImageAppearance => "appearance",
            AttentionMode::CrossImageStructure => "structure",
        }
    }
}

/// Projected features of one attention layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionContext {
    pub queries: Array2<f32>,
    pub keys: Array2<f32>,
    pub values: Array2<f32>,
    pub head_count: usize,
    pub scale: f32,
}

impl AttentionContext {
    /// Builds a context with the default `1/sqrt(head_dim)` scale.
    pub fn new(
        queries: Array2<f32>,
        keys: Array2<f32>,
        values: Array2<f32>,
        head_count: usize,
    ) -> Result<Self> {
        if head_count == 0 {
            return Err(Error::shape("head_count must be positive"));
        }
        let d = queries.ncols();
        if keys.ncols() != d {
            return Err(Error::shape(format!(
                "queries have inner dim {d}, keys have {}",
                keys.ncols()
            )));
        }
        if keys.nrows() != values.nrows() {
            return Err(Error::shape(format!(
                "{} keys but {} values",
                keys.nrows(),
                values.nrows()
            )));
        }
        if !d.is_multiple_of(head_count) || !values.ncols().is_multiple_of(head_count) {
            return Err(Error::shape(format!(
                "feature dims ({d}, {}) not divisible by {head_count} heads",
                values.ncols()
            )));
        }
        let head_dim = d / head_count;
        Ok(Self {
            queries,
            keys,
            values,
            head_count,
            scale: 1.0 / (head_dim as f32).sqrt(),
        })
    }

    pub fn head_dim(&self) -> usize {
        self.queries.ncols() / self.head_count
    }
}

/// Row-stochastic attention weights.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub weights: Array2<f32>,
}

impl AttentionMap {
    pub fn num_queries(&self) -> usize {
        self.weights.nrows()
    }

    pub fn num_keys(&self) -> usize {
        self.weights.ncols()
    }
}

/// Row-wise softmax of `queries · keysᵀ · scale`.
pub fn compute_attention_map(
    queries: ArrayView2<f32>,
    keys: ArrayView2<f32>,
    scale: f32,
) -> Result<AttentionMap> {
    if queries.ncols() != keys.ncols() {
        return Err(Error::shape(format!(
            "queries have inner dim {}, keys have {}",
            queries.ncols(),
            keys.ncols()
        )));
    }
    if keys.nrows() == 0 {
        return Err(Error::shape("attention over zero keys"));
    }
    let mut weights = queries.dot(&keys.t());
    for mut row in weights.rows_mut() {
        let max = row.iter().fold(f32::NEG_INFINITY, |m, &x| m.max(x * scale));
        let mut sum = 0.0f64;
        row.mapv_inplace(|x| {
            let e = (x * scale - max).exp();
            sum += e as f64;
            e
        });
        let inv = (1.0 / sum) as f32;
        row.mapv_inplace(|e| e * inv);
    }
    Ok(AttentionMap { weights })
}

/// `map · values`.
pub fn apply_attention(map: &AttentionMap, values: ArrayView2<f32>) -> Result<Array2<f32>> {
    if map.num_keys() != values.nrows() {
        return Err(Error::shape(format!(
            "map has {} keys but {} value rows",
            map.num_keys(),
            values.nrows()
        )));
    }
    Ok(map.weights.dot(&values))
}

/// In-place `(row - mean) * beta + mean`.
pub fn contrast_row<T: Float>(row: &mut [T], beta: T) {
    if row.is_empty() || beta == T::one() {
        return;
    }
    let n = T::from(row.len()).unwrap();
    let mean = row.iter().fold(T::zero(), |acc, &x| acc + x) / n;
    for x in row.iter_mut() {
        *x = (*x - mean) * beta + mean;
    }
}

/// Scales each row's spread around its mean by `beta`, without renormalizing.
///
/// Rows are processed independently in double precision.
pub fn contrast_map(map: &AttentionMap, beta: f32) -> AttentionMap {
    let mut out = map.clone();
    contrast_in_place(&mut out, beta);
    out
}

pub(crate) fn contrast_in_place(map: &mut AttentionMap, beta: f32) {
    if beta == 1.0 {
        return;
    }
    let mut buf = vec![0.0f64; map.num_keys()];
    for mut row in map.weights.rows_mut() {
        for (b, &x) in buf.iter_mut().zip(row.iter()) {
            *b = x as f64;
        }
        contrast_row(&mut buf, beta as f64);
        for (x, &b) in row.iter_mut().zip(buf.iter()) {
            *x = b as f32;
        }
    }
}

/// Single-head cross-image attention: queries from the output branch, keys
/// and values from a source branch, with the contrast applied before the
/// value product.
pub fn cross_image_attention(
    q_out: ArrayView2<f32>,
    k_src: ArrayView2<f32>,
    v_src: ArrayView2<f32>,
    scale: f32,
    contrast_factor: f32,
) -> Result<Array2<f32>> {
    if contrast_factor < 0.0 || !contrast_factor.is_finite() {
        return Err(Error::config(format!(
            "contrast factor must be a finite value >= 0, got {contrast_factor}"
        )));
    }
    let mut map = compute_attention_map(q_out, k_src, scale)?;
    contrast_in_place(&mut map, contrast_factor);
    apply_attention(&map, v_src)
}

/// Output of a multi-head attention evaluation.
#[derive(Debug, Clone)]
pub struct MultiHeadOutput {
    /// Concatenated per-head outputs, `num_queries × d_v`.
    pub output: Array2<f32>,
    /// Per-head maps before contrast, when requested.
    pub maps: Option<Vec<AttentionMap>>,
}

/// Multi-head attention over a context; contrast is applied per head and per
/// query row.
pub fn multi_head_attention(
    ctx: &AttentionContext,
    contrast_factor: f32,
    keep_maps: bool,
) -> Result<MultiHeadOutput> {
    let heads = ctx.head_count;
    let dq = ctx.head_dim();
    let dv = ctx.values.ncols() / heads;
    let mut output = Array2::<f32>::zeros((ctx.queries.nrows(), ctx.values.ncols()));
    let mut maps = keep_maps.then(|| Vec::with_capacity(heads));
    for h in 0..heads {
        let q = ctx.queries.slice(s![.., h * dq..(h + 1) * dq]);
        let k = ctx.keys.slice(s![.., h * dq..(h + 1) * dq]);
        let v = ctx.values.slice(s![.., h * dv..(h + 1) * dv]);
        let mut map = compute_attention_map(q, k, ctx.scale)?;
        if let Some(maps) = maps.as_mut() {
            maps.push(map.clone());
        }
        contrast_in_place(&mut map, contrast_factor);
        let head_out = apply_attention(&map, v)?;
        output
            .slice_mut(s![.., h * dv..(h + 1) * dv])
            .assign(&head_out);
    }
    Ok(MultiHeadOutput { output, maps })
}

/// Mean of per-head maps.
pub fn mean_over_heads(maps: &[AttentionMap]) -> Option<AttentionMap> {
    let first = maps.first()?;
    let mut acc = Array2::<f32>::zeros(first.weights.raw_dim());
    for m in maps {
        acc += &m.weights;
    }
    acc /= maps.len() as f32;
    Some(AttentionMap { weights: acc })
}

/// Normalized geometric mean of per-head maps: the softmax of the head-averaged
/// logits, which keeps a key only if every head agrees on it.
pub fn log_mean_over_heads(maps: &[AttentionMap]) -> Option<AttentionMap> {
    let first = maps.first()?;
    let mut acc = Array2::<f64>::zeros(first.weights.raw_dim());
    for m in maps {
        acc.zip_mut_with(&m.weights, |a, &w| *a += (w.max(f32::MIN_POSITIVE) as f64).ln());
    }
    let n = maps.len() as f64;
    let mut weights = Array2::<f32>::zeros(acc.raw_dim());
    for (mut out, row) in weights.rows_mut().into_iter().zip(acc.rows()) {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x / n));
        let sum: f64 = row.iter().map(|&x| (x / n - max).exp()).sum();
        for (o, &x) in out.iter_mut().zip(row.iter()) {
            *o = ((x / n - max).exp() / sum) as f32;
        }
    }
    Some(AttentionMap { weights })
}

/// Total attention each key receives, summed over query rows.
pub fn key_mass(map: &AttentionMap) -> Vec<f32> {
    map.weights.sum_axis(Axis(0)).to_vec()
}
