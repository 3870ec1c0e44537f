//! Seeded orthonormal measurement operator, row-sliced sampling and adjoint
//! reconstruction.
//!
//! # Matrix construction
//!
//! Entries are drawn row-major from SplitMix64 (Steele, Lea and Flood's
//! 64-bit generator: `state += 0x9E3779B97F4A7C15`, then the standard
//! xor-shift/multiply finalizer). Uniforms are `(x >> 11) * 2^-53`. Normals
//! come in pairs from the Box-Muller transform with `u1 = 1 - U` (so the
//! logarithm never sees zero) and `u2 = U`: `sqrt(-2 ln u1) * cos(2 pi u2)`
//! first, then the matching `sin` variate.
//!
//! Rows are orthonormalized in order by classical Gram-Schmidt applied twice
//! per row. Each row is then flipped so its first nonzero entry is positive.
//! A row whose residual norm falls below `1e-10` of its drawn norm makes the
//! draw rank deficient; the build then restarts from `seed + 1`, at most
//! eight times.
//!
//! # Dump format
//!
//! 16-byte header: magic `MBRM`, format version (u16), dimension (u16), seed
//! actually used for the draw (u64), followed by `dim * dim` row-major f64
//! values. All integers and floats are little-endian.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::{self, Block, Image, ImagingError};

pub const DUMP_MAGIC: [u8; 4] = *b"MBRM";
pub const DUMP_VERSION: u16 = 1;
pub const MAX_RETRIES: u64 = 8;
const RANK_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum SensingError {
    #[error("block size {0} too small (need at least 2)")]
    InvalidBlockSize(usize),
    #[error("rank-deficient draw for seeds {first}..={last}")]
    RankDeficient { first: u64, last: u64 },
    #[error("row range {start}..={end} outside 1..={dim}")]
    RangeOutOfBounds { start: usize, end: usize, dim: usize },
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("no measurement record for block {0}")]
    MissingBlock(usize),
    #[error("block {block}: records hold {found} rows, plan expects {expected}")]
    CountMismatch { block: usize, expected: u64, found: usize },
    #[error("segments of block {0} are not contiguous from row 1")]
    NonContiguous(usize),
    #[error("image dimensions differ: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("malformed matrix dump: {0}")]
    BadDump(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Imaging(#[from] ImagingError),
}

/// SplitMix64 with a Box-Muller normal sampler.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
    spare: Option<f64>,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed, spare: None }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform on [0, 1) with 53 random bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn next_normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(radius * angle.sin());
        radius * angle.cos()
    }
}

/// `dim x dim` matrix with orthonormal rows, stored row-major.
#[derive(Clone, PartialEq)]
pub struct MeasurementMatrix {
    dim: usize,
    seed: u64,
    rows: Vec<f64>,
}

impl std::fmt::Debug for MeasurementMatrix {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MeasurementMatrix")
            .field("dim", &self.dim)
            .field("seed", &self.seed)
            .finish_non_exhaustive()
    }
}

// Subtracts the projection of `v` onto the first `count` rows of `basis`.
fn project_out(v: &mut [f64], basis: &[f64], count: usize, dim: usize) {
    if count == 0 {
        return;
    }
    let dots: Vec<f64> = (0..count)
        .into_par_iter()
        .map(|j| {
            let q = &basis[j * dim..(j + 1) * dim];
            q.iter().zip(v.iter()).map(|(a, b)| a * b).sum()
        })
        .collect();
    const CHUNK: usize = 64;
    v.par_chunks_mut(CHUNK).enumerate().for_each(|(c, chunk)| {
        let off = c * CHUNK;
        for (j, d) in dots.iter().enumerate() {
            let q = &basis[j * dim + off..j * dim + off + chunk.len()];
            for (x, qk) in chunk.iter_mut().zip(q) {
                *x -= d * qk;
            }
        }
    });
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn try_draw(dim: usize, seed: u64) -> Option<Vec<f64>> {
    let mut rng = SplitMix64::new(seed);
    let mut rows: Vec<f64> = (0..dim * dim).map(|_| rng.next_normal()).collect();
    for i in 0..dim {
        let (done, rest) = rows.split_at_mut(i * dim);
        let v = &mut rest[..dim];
        let drawn = norm(v);
        project_out(v, done, i, dim);
        project_out(v, done, i, dim);
        let left = norm(v);
        if !(left > RANK_TOLERANCE * drawn) {
            return None;
        }
        let sign = match v.iter().find(|x| **x != 0.0) {
            Some(x) if *x < 0.0 => -1.0,
            _ => 1.0,
        };
        let scale = sign / left;
        v.iter_mut().for_each(|x| *x *= scale);
    }
    Some(rows)
}

/// Seeded orthonormal operator for `block_size x block_size` blocks.
pub fn build_matrix(block_size: usize, seed: u64) -> Result<MeasurementMatrix, SensingError> {
    if block_size < 2 {
        return Err(SensingError::InvalidBlockSize(block_size));
    }
    let dim = block_size * block_size;
    for attempt in 0..=MAX_RETRIES {
        let s = seed.wrapping_add(attempt);
        if let Some(rows) = try_draw(dim, s) {
            return Ok(MeasurementMatrix { dim, seed: s, rows });
        }
    }
    Err(SensingError::RankDeficient {
        first: seed,
        last: seed.wrapping_add(MAX_RETRIES),
    })
}

fn check_range(dim: usize, start: usize, end: usize) -> Result<(), SensingError> {
    // an empty range is written end = start - 1
    if start >= 1 && end + 1 >= start && end <= dim {
        Ok(())
    } else {
        Err(SensingError::RangeOutOfBounds { start, end, dim })
    }
}

impl MeasurementMatrix {
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Seed of the draw that produced this matrix (after any retries).
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn rows(&self) -> &[f64] {
        &self.rows
    }

    /// 1-based row.
    pub fn row(&self, index: usize) -> &[f64] {
        &self.rows[(index - 1) * self.dim..index * self.dim]
    }

    /// Largest entry of `|A A^T - I|`.
    pub fn orthonormality_error(&self) -> f64 {
        let dim = self.dim;
        (0..dim)
            .into_par_iter()
            .map(|i| {
                let a = &self.rows[i * dim..(i + 1) * dim];
                (0..dim)
                    .map(|j| {
                        let b = &self.rows[j * dim..(j + 1) * dim];
                        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                        (dot - if i == j { 1.0 } else { 0.0 }).abs()
                    })
                    .fold(0.0, f64::max)
            })
            .reduce(|| 0.0, f64::max)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, SensingError> {
        let dim = u16::try_from(self.dim)
            .map_err(|_| SensingError::BadDump(format!("dimension {} does not fit u16", self.dim)))?;
        let mut out = Vec::with_capacity(16 + 8 * self.rows.len());
        out.extend_from_slice(&DUMP_MAGIC);
        out.extend_from_slice(&DUMP_VERSION.to_le_bytes());
        out.extend_from_slice(&dim.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        for v in &self.rows {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, SensingError> {
        if bytes.len() < 16 {
            return Err(SensingError::BadDump(format!("{} bytes is shorter than the header", bytes.len())));
        }
        if bytes[..4] != DUMP_MAGIC {
            return Err(SensingError::BadDump("bad magic".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != DUMP_VERSION {
            return Err(SensingError::BadDump(format!("unsupported version {version}")));
        }
        let dim = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
        let seed = u64::from_le_bytes(bytes[8..16].try_into().expect("8-byte slice"));
        let body = &bytes[16..];
        if body.len() != 8 * dim * dim {
            return Err(SensingError::BadDump(format!(
                "payload has {} bytes, expected {}",
                body.len(),
                8 * dim * dim
            )));
        }
        let rows = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Ok(MeasurementMatrix { dim, seed, rows })
    }

    pub fn write_dump(&self, path: impl AsRef<Path>) -> Result<(), SensingError> {
        let path = path.as_ref();
        let io = |source| SensingError::Io { path: path.display().to_string(), source };
        let mut f = std::fs::File::create(path).map_err(io)?;
        f.write_all(&self.to_bytes()?).map_err(io)
    }

    pub fn read_dump(path: impl AsRef<Path>) -> Result<Self, SensingError> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|source| SensingError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

/// Inner products of `x` with rows `row_start..=row_end` (1-based).
pub fn sample_rows(
    matrix: &MeasurementMatrix,
    row_start: usize,
    row_end: usize,
    x: &[f64],
) -> Result<Vec<f64>, SensingError> {
    check_range(matrix.dim, row_start, row_end)?;
    if x.len() != matrix.dim {
        return Err(SensingError::LengthMismatch(format!(
            "block vector has {} entries, operator expects {}",
            x.len(),
            matrix.dim
        )));
    }
    Ok((row_start..=row_end)
        .map(|i| matrix.row(i).iter().zip(x).map(|(a, b)| a * b).sum())
        .collect())
}

/// `A_rows^T y`: the orthogonal projection of the sampled block onto the
/// span of the rows used.
pub fn adjoint_reconstruct(
    matrix: &MeasurementMatrix,
    row_start: usize,
    row_end: usize,
    values: &[f64],
) -> Result<Vec<f64>, SensingError> {
    check_range(matrix.dim, row_start, row_end)?;
    let count = row_end + 1 - row_start;
    if values.len() != count {
        return Err(SensingError::LengthMismatch(format!(
            "{} values for {count} rows",
            values.len()
        )));
    }
    let mut out = vec![0.0; matrix.dim];
    for (i, y) in (row_start..=row_end).zip(values) {
        for (o, a) in out.iter_mut().zip(matrix.row(i)) {
            *o += y * a;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementSegment {
    pub stage: usize,
    pub row_start: usize,
    pub row_end: usize,
    pub values: Vec<f64>,
}

/// Concatenated measurements of one block across stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementRecord {
    pub block_index: usize,
    pub segments: Vec<MeasurementSegment>,
}

impl MeasurementRecord {
    pub fn new(block_index: usize) -> Self {
        MeasurementRecord { block_index, segments: Vec::new() }
    }

    /// Rows measured so far, which is also the last row index used.
    pub fn measured_rows(&self) -> usize {
        self.segments.last().map_or(0, |s| s.row_end)
    }

    /// Samples the next `count` rows of the operator for this block.
    pub fn sample_next(
        &mut self,
        matrix: &MeasurementMatrix,
        stage: usize,
        count: usize,
        x: &[f64],
    ) -> Result<&MeasurementSegment, SensingError> {
        let row_start = self.measured_rows() + 1;
        let row_end = row_start + count - 1;
        let values = sample_rows(matrix, row_start, row_end, x)?;
        self.segments.push(MeasurementSegment { stage, row_start, row_end, values });
        Ok(self.segments.last().expect("just pushed"))
    }

    pub fn concatenated(&self) -> Vec<f64> {
        self.segments.iter().flat_map(|s| s.values.iter().copied()).collect()
    }

    /// Measurements zero-padded to the operator length.
    pub fn padded(&self, dim: usize) -> Vec<f64> {
        let mut y = self.concatenated();
        y.resize(dim, 0.0);
        y
    }

    pub fn is_contiguous(&self) -> bool {
        let mut next = 1;
        for s in &self.segments {
            if s.row_start != next || s.row_end + 1 < s.row_start || s.values.len() != s.row_end + 1 - s.row_start {
                return false;
            }
            next = s.row_end + 1;
        }
        true
    }
}

/// Block geometry shared by plans and reconstructions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridShape {
    pub block_size: usize,
    pub rows: usize,
    pub cols: usize,
}

impl GridShape {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Single-stage sampling: block `i` takes rows `1..=counts[i]`.
pub fn sample_counts(
    image: &Image,
    block_size: usize,
    counts: &[u64],
    matrix: &MeasurementMatrix,
) -> Result<Vec<MeasurementRecord>, SensingError> {
    let grid = imaging::partition(image, block_size)?;
    if counts.len() != grid.len() {
        return Err(SensingError::LengthMismatch(format!(
            "{} counts for {} blocks",
            counts.len(),
            grid.len()
        )));
    }
    grid.blocks
        .par_iter()
        .zip(counts)
        .enumerate()
        .map(|(i, (b, &m))| {
            let mut rec = MeasurementRecord::new(i);
            rec.sample_next(matrix, 1, m as usize, b.values())?;
            Ok(rec)
        })
        .collect()
}

pub fn sample_plan(
    image: &Image,
    plan: &crate::allocation::AllocationPlan,
    matrix: &MeasurementMatrix,
) -> Result<Vec<MeasurementRecord>, SensingError> {
    sample_counts(image, plan.block_size, &plan.per_block_m, matrix)
}

/// Unclamped adjoint reconstruction `A_{1:M_i}^T y_i` of every block.
pub fn reconstruct_blocks(
    records: &[MeasurementRecord],
    counts: &[u64],
    shape: GridShape,
    matrix: &MeasurementMatrix,
) -> Result<Vec<Block>, SensingError> {
    if counts.len() != shape.len() {
        return Err(SensingError::LengthMismatch(format!(
            "{} counts for {} blocks",
            counts.len(),
            shape.len()
        )));
    }
    let mut by_block: Vec<Option<&MeasurementRecord>> = vec![None; shape.len()];
    for r in records {
        if r.block_index < by_block.len() {
            by_block[r.block_index] = Some(r);
        }
    }
    by_block
        .par_iter()
        .zip(counts)
        .enumerate()
        .map(|(i, (rec, &m))| {
            let rec = rec.ok_or(SensingError::MissingBlock(i))?;
            if !rec.is_contiguous() {
                return Err(SensingError::NonContiguous(i));
            }
            if rec.measured_rows() as u64 != m {
                return Err(SensingError::CountMismatch { block: i, expected: m, found: rec.measured_rows() });
            }
            let y = rec.concatenated();
            let x = adjoint_reconstruct(matrix, 1, y.len(), &y)?;
            Ok(Block::devectorize(shape.block_size, x)?)
        })
        .collect()
}

/// Adjoint reconstruction of every block, assembled, cropped to
/// `height x width` and clamped to [0, 1].
pub fn reconstruct(
    records: &[MeasurementRecord],
    counts: &[u64],
    shape: GridShape,
    matrix: &MeasurementMatrix,
    height: usize,
    width: usize,
) -> Result<Image, SensingError> {
    let blocks = reconstruct_blocks(records, counts, shape, matrix)?;
    let padded_h = shape.rows * shape.block_size;
    let padded_w = shape.cols * shape.block_size;
    let grid = imaging::BlockGrid {
        block_size: shape.block_size,
        rows: shape.rows,
        cols: shape.cols,
        pad_bottom: padded_h.saturating_sub(height),
        pad_right: padded_w.saturating_sub(width),
        blocks,
    };
    Ok(imaging::assemble(&grid, height, width)?)
}

/// PSNR (peak 1) of unclamped reconstructed blocks against the original
/// image, over the original pixels only. This scores the linear adjoint
/// estimate itself, before the [0, 1] clamp applied when forming an image.
pub fn linear_psnr(reference: &Image, blocks: &[Block], shape: GridShape) -> Result<f64, SensingError> {
    if blocks.len() != shape.len() {
        return Err(SensingError::LengthMismatch(format!(
            "{} blocks for a {}x{} grid",
            blocks.len(),
            shape.rows,
            shape.cols
        )));
    }
    let (h, w, b) = (reference.height(), reference.width(), shape.block_size);
    if shape.rows * b < h || shape.cols * b < w {
        return Err(SensingError::DimensionMismatch(h, w, shape.rows * b, shape.cols * b));
    }
    let mut sse = 0.0;
    for r in 0..h {
        for c in 0..w {
            let est = blocks[(r / b) * shape.cols + c / b].get(r % b, c % b);
            let d = est - reference.get(r, c);
            sse += d * d;
        }
    }
    let mse = sse / (h * w) as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { 10.0 * (1.0 / mse).log10() })
}

pub fn reconstruct_plan(
    plan: &crate::allocation::AllocationPlan,
    records: &[MeasurementRecord],
    matrix: &MeasurementMatrix,
    height: usize,
    width: usize,
) -> Result<Image, SensingError> {
    let shape = GridShape { block_size: plan.block_size, rows: plan.rows, cols: plan.cols };
    reconstruct(records, &plan.per_block_m, shape, matrix, height, width)
}

/// PSNR in dB with peak 1; `f64::INFINITY` marks identical images.
pub fn psnr(reference: &Image, estimate: &Image) -> Result<f64, SensingError> {
    if reference.height() != estimate.height() || reference.width() != estimate.width() {
        return Err(SensingError::DimensionMismatch(
            reference.height(),
            reference.width(),
            estimate.height(),
            estimate.width(),
        ));
    }
    let n = reference.pixels().len() as f64;
    let mse = reference
        .pixels()
        .iter()
        .zip(estimate.pixels())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        Ok(f64::INFINITY)
    } else {
        Ok(10.0 * (1.0 / mse).log10())
    }
}
