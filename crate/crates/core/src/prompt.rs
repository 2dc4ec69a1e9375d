//! Intrinsic vectors, frozen projections and per-layer prompt blocks.
//!
//! Each layer's prompt is `p = reshape(A z, n_p x D) + p0`, where `z` is the
//! low-dimensional vector being optimized, `A` is a random projection fixed at
//! construction and `p0` is the prompt derived from the initial tokens.
//! Matrices are row-major in flat buffers.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{check_finite, check_len, Error, Result};
use crate::rng::RngStream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntrinsicVector {
    layer: usize,
    values: Vec<f64>,
}

impl IntrinsicVector {
    pub fn new(layer: usize, values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::config("intrinsic vector must have d >= 1"));
        }
        check_finite("intrinsic vector", &values)?;
        Ok(Self { layer, values })
    }

    pub fn zeros(layer: usize, dim: usize) -> Result<Self> {
        Self::new(layer, vec![0.0; dim])
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Frozen `(n_p * D) x d` projection for one layer. There is no mutating
/// API; clones share the same buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionMatrix {
    layer: usize,
    rows: usize,
    cols: usize,
    entries: Arc<[f64]>,
}

impl ProjectionMatrix {
    pub fn from_entries(layer: usize, rows: usize, cols: usize, entries: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::config("projection dimensions must be positive"));
        }
        check_len("projection entries", rows * cols, entries.len())?;
        check_finite("projection matrix", &entries)?;
        Ok(Self {
            layer,
            rows,
            cols,
            entries: entries.into(),
        })
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.entries[row * self.cols + col]
    }

    /// Hex SHA-256 over the dimensions and the little-endian entry bytes.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.layer as u64).to_le_bytes());
        h.update((self.rows as u64).to_le_bytes());
        h.update((self.cols as u64).to_le_bytes());
        for v in self.entries.iter() {
            h.update(v.to_le_bytes());
        }
        h.finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    fn apply(&self, z: &[f64]) -> Vec<f64> {
        self.entries
            .chunks_exact(self.cols)
            .map(|row| row.iter().zip(z).map(|(a, b)| a * b).sum())
            .collect()
    }
}

/// Draws a projection with i.i.d. `N(0, (scale / sqrt(d))^2)` entries.
pub fn make_projection(
    layer: usize,
    dim: usize,
    prompt_len: usize,
    width: usize,
    scale: f64,
    rng: &mut RngStream,
) -> Result<ProjectionMatrix> {
    if dim == 0 || prompt_len == 0 || width == 0 {
        return Err(Error::config(format!(
            "projection needs positive dimensions, got d={dim}, n_p={prompt_len}, D={width}"
        )));
    }
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::config("projection scale must be positive and finite"));
    }
    let std = scale / (dim as f64).sqrt();
    let rows = prompt_len * width;
    let entries = (0..rows * dim).map(|_| std * rng.normal()).collect();
    ProjectionMatrix::from_entries(layer, rows, dim, entries)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBlock {
    layer: usize,
    prompt_len: usize,
    width: usize,
    rows: Vec<f64>,
}

impl PromptBlock {
    pub fn new(layer: usize, prompt_len: usize, width: usize, rows: Vec<f64>) -> Result<Self> {
        check_len("prompt block", prompt_len * width, rows.len())?;
        check_finite("prompt block", &rows)?;
        Ok(Self {
            layer,
            prompt_len,
            width,
            rows,
        })
    }

    pub fn zeros(layer: usize, prompt_len: usize, width: usize) -> Self {
        Self {
            layer,
            prompt_len,
            width,
            rows: vec![0.0; prompt_len * width],
        }
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Flat row-major `n_p x D` buffer.
    pub fn values(&self) -> &[f64] {
        &self.rows
    }

    pub fn row(&self, index: usize) -> &[f64] {
        &self.rows[index * self.width..(index + 1) * self.width]
    }

    /// Mean over the prompt rows, length `D`.
    pub fn mean_row(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.width];
        for row in self.rows.chunks_exact(self.width) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let n = self.prompt_len as f64;
        out.iter_mut().for_each(|o| *o /= n);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSet {
    blocks: Vec<PromptBlock>,
}

impl PromptSet {
    pub fn new(blocks: Vec<PromptBlock>) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::contract("prompt set needs at least one layer"));
        }
        let (n_p, width) = (blocks[0].prompt_len, blocks[0].width);
        for (i, b) in blocks.iter().enumerate() {
            if b.layer != i {
                return Err(Error::contract(format!(
                    "prompt block at position {i} has layer index {}",
                    b.layer
                )));
            }
            if b.prompt_len != n_p || b.width != width {
                return Err(Error::contract("prompt blocks disagree on shape"));
            }
        }
        Ok(Self { blocks })
    }

    pub fn blocks(&self) -> &[PromptBlock] {
        &self.blocks
    }

    pub fn layers(&self) -> usize {
        self.blocks.len()
    }

    pub fn prompt_len(&self) -> usize {
        self.blocks[0].prompt_len
    }

    pub fn width(&self) -> usize {
        self.blocks[0].width
    }
}

/// The residual base prompts together with the tokens they came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitialPromptSet {
    prompts: PromptSet,
    source_tokens: Vec<u32>,
}

impl InitialPromptSet {
    pub fn new(blocks: Vec<PromptBlock>, source_tokens: Vec<u32>) -> Result<Self> {
        let prompts = PromptSet::new(blocks)?;
        check_len("initial prompt tokens", prompts.prompt_len(), source_tokens.len())?;
        Ok(Self {
            prompts,
            source_tokens,
        })
    }

    pub fn blocks(&self) -> &[PromptBlock] {
        self.prompts.blocks()
    }

    pub fn source_tokens(&self) -> &[u32] {
        &self.source_tokens
    }

    pub fn as_prompt_set(&self) -> &PromptSet {
        &self.prompts
    }

    pub fn layers(&self) -> usize {
        self.prompts.layers()
    }
}

pub fn compose_prompt(
    z: &IntrinsicVector,
    projection: &ProjectionMatrix,
    base: &PromptBlock,
) -> Result<PromptBlock> {
    if z.layer != projection.layer || z.layer != base.layer {
        return Err(Error::contract(format!(
            "layer mismatch: z={}, A={}, p0={}",
            z.layer, projection.layer, base.layer
        )));
    }
    check_len("projection columns", projection.cols, z.dim())?;
    check_len("projection rows", base.rows.len(), projection.rows)?;
    let mut rows = projection.apply(&z.values);
    for (r, b) in rows.iter_mut().zip(&base.rows) {
        *r += b;
    }
    PromptBlock::new(base.layer, base.prompt_len, base.width, rows)
}

/// Applies [`compose_prompt`] per layer. Vectors must arrive in layer order.
pub fn compose_prompt_set(
    group: &[IntrinsicVector],
    projections: &[ProjectionMatrix],
    initial: &InitialPromptSet,
) -> Result<PromptSet> {
    let layers = initial.layers();
    check_len("intrinsic vectors", layers, group.len())?;
    check_len("projections", layers, projections.len())?;
    for (i, z) in group.iter().enumerate() {
        if z.layer != i {
            return Err(Error::contract(format!(
                "intrinsic vector at position {i} belongs to layer {}",
                z.layer
            )));
        }
    }
    let blocks = group
        .iter()
        .zip(projections)
        .zip(initial.blocks())
        .map(|((z, a), p0)| compose_prompt(z, a, p0))
        .collect::<Result<Vec<_>>>()?;
    PromptSet::new(blocks)
}

/// Raw-slice variant used on the hot path of the schedulers: one slice per
/// layer, already in layer order.
pub fn compose_from_slices(
    group: &[Vec<f64>],
    projections: &[ProjectionMatrix],
    initial: &InitialPromptSet,
) -> Result<PromptSet> {
    let vectors = group
        .iter()
        .enumerate()
        .map(|(i, v)| IntrinsicVector::new(i, v.clone()))
        .collect::<Result<Vec<_>>>()?;
    compose_prompt_set(&vectors, projections, initial)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng() -> RngStream {
        RngStream::new(7, "test")
    }

    #[test]
    fn projection_shape_and_finiteness() {
        let a = make_projection(1, 8, 5, 32, 1.0, &mut rng()).unwrap();
        assert_eq!((a.rows(), a.cols()), (160, 8));
        assert!(a.entries().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn projection_is_deterministic() {
        let a = make_projection(1, 8, 5, 32, 1.0, &mut rng()).unwrap();
        let b = make_projection(1, 8, 5, 32, 1.0, &mut rng()).unwrap();
        let bits = |m: &ProjectionMatrix| m.entries().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(a.content_hash(), b.content_hash());
    }

    #[test]
    fn projection_entry_spread() {
        // 160*8 = 1280 entries per matrix; stack enough layers for >= 1e4.
        let mut r = rng();
        let mut all = Vec::new();
        for layer in 0..8 {
            all.extend_from_slice(make_projection(layer, 8, 5, 32, 1.0, &mut r).unwrap().entries());
        }
        assert!(all.len() >= 10_000);
        let n = all.len() as f64;
        let mean = all.iter().sum::<f64>() / n;
        let std = (all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((0.30..=0.41).contains(&std), "std = {std}");
    }

    #[test]
    fn zero_dimension_rejected() {
        for (d, np, w) in [(0, 5, 32), (8, 0, 32), (8, 5, 0)] {
            assert!(matches!(
                make_projection(0, d, np, w, 1.0, &mut rng()),
                Err(Error::Config(_))
            ));
        }
    }

    fn toy_base(layer: usize) -> PromptBlock {
        PromptBlock::new(layer, 1, 2, vec![0.25, -1.5]).unwrap()
    }

    #[test]
    fn zero_vector_returns_base() {
        let a = make_projection(0, 2, 1, 2, 1.0, &mut rng()).unwrap();
        let out = compose_prompt(&IntrinsicVector::zeros(0, 2).unwrap(), &a, &toy_base(0)).unwrap();
        assert_eq!(out, toy_base(0));
    }

    #[test]
    fn zero_projection_returns_base() {
        let a = ProjectionMatrix::from_entries(0, 2, 2, vec![0.0; 4]).unwrap();
        let z = IntrinsicVector::new(0, vec![3.0, -7.0]).unwrap();
        assert_eq!(compose_prompt(&z, &a, &toy_base(0)).unwrap(), toy_base(0));
    }

    #[test]
    fn matches_scalar_loop() {
        let mut r = rng();
        for _ in 0..20 {
            let a = make_projection(0, 2, 1, 2, 1.0, &mut r).unwrap();
            let z = IntrinsicVector::new(0, r.normal_vec(2)).unwrap();
            let base = PromptBlock::new(0, 1, 2, r.normal_vec(2)).unwrap();
            let out = compose_prompt(&z, &a, &base).unwrap();
            let e = a.entries();
            let zv = z.values();
            let p = base.values();
            let row0 = e[0] * zv[0] + e[1] * zv[1] + p[0];
            let row1 = e[2] * zv[0] + e[3] * zv[1] + p[1];
            assert!((out.values()[0] - row0).abs() < 1e-15);
            assert!((out.values()[1] - row1).abs() < 1e-15);
        }
    }

    #[test]
    fn layer_mismatch_is_contract_error() {
        let a = make_projection(1, 2, 1, 2, 1.0, &mut rng()).unwrap();
        let z = IntrinsicVector::zeros(0, 2).unwrap();
        assert!(matches!(
            compose_prompt(&z, &a, &toy_base(0)),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn shape_mismatch_is_error() {
        let a = make_projection(0, 3, 1, 2, 1.0, &mut rng()).unwrap();
        let z = IntrinsicVector::zeros(0, 2).unwrap();
        assert!(compose_prompt(&z, &a, &toy_base(0)).is_err());
    }

    #[test]
    fn non_finite_vector_rejected() {
        assert!(IntrinsicVector::new(0, vec![f64::NAN]).is_err());
    }

    fn two_layer() -> (Vec<ProjectionMatrix>, InitialPromptSet) {
        let mut r = rng();
        let a = vec![
            make_projection(0, 3, 2, 4, 1.0, &mut r).unwrap(),
            make_projection(1, 3, 2, 4, 1.0, &mut r).unwrap(),
        ];
        let p0 = InitialPromptSet::new(
            vec![
                PromptBlock::new(0, 2, 4, r.normal_vec(8)).unwrap(),
                PromptBlock::new(1, 2, 4, r.normal_vec(8)).unwrap(),
            ],
            vec![0, 0],
        )
        .unwrap();
        (a, p0)
    }

    #[test]
    fn set_of_zero_vectors_is_initial_set() {
        let (a, p0) = two_layer();
        let zs = vec![IntrinsicVector::zeros(0, 3).unwrap(), IntrinsicVector::zeros(1, 3).unwrap()];
        let set = compose_prompt_set(&zs, &a, &p0).unwrap();
        assert_eq!(&set, p0.as_prompt_set());
    }

    #[test]
    fn set_is_per_layer_composition() {
        let (a, p0) = two_layer();
        let mut r = RngStream::new(9, "z");
        let zs = vec![
            IntrinsicVector::new(0, r.normal_vec(3)).unwrap(),
            IntrinsicVector::new(1, r.normal_vec(3)).unwrap(),
        ];
        let set = compose_prompt_set(&zs, &a, &p0).unwrap();
        for i in 0..2 {
            assert_eq!(set.blocks()[i], compose_prompt(&zs[i], &a[i], &p0.blocks()[i]).unwrap());
        }
    }

    #[test]
    fn permuted_order_rejected() {
        let (a, p0) = two_layer();
        let zs = vec![IntrinsicVector::zeros(1, 3).unwrap(), IntrinsicVector::zeros(0, 3).unwrap()];
        assert!(matches!(compose_prompt_set(&zs, &a, &p0), Err(Error::Contract(_))));
    }

    #[test]
    fn missing_layer_rejected() {
        let (a, p0) = two_layer();
        let zs = vec![IntrinsicVector::zeros(0, 3).unwrap()];
        assert!(compose_prompt_set(&zs, &a, &p0).is_err());
    }
}
