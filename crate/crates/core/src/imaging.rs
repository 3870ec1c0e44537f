//! Grayscale images, PGM I/O, block partitioning and the orthonormal 2-D DCT.

use std::f64::consts::PI;
use std::fmt;
use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ImagingError {
    #[error("block size must be at least 2, got {0}")]
    InvalidBlockSize(usize),
    #[error("pixel buffer has {actual} entries, expected {expected}")]
    BufferLength { expected: usize, actual: usize },
    #[error("pixel {index} has intensity {value}, outside [0, 1]")]
    IntensityOutOfRange { index: usize, value: f64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

#[derive(Debug, Error)]
pub enum PgmError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("unsupported magic number {found:?} at byte {offset} (only P2 and P5 graymaps are accepted)")]
    UnsupportedMagic { offset: usize, found: String },
    #[error("malformed header at byte {offset}: {reason}")]
    MalformedHeader { offset: usize, reason: String },
    #[error("truncated payload at byte {offset}: expected {expected} samples, found {found}")]
    TruncatedPayload {
        offset: usize,
        expected: usize,
        found: usize,
    },
    #[error("invalid sample at byte {offset}: {reason}")]
    InvalidSample { offset: usize, reason: String },
}

/// Row-major grayscale image with intensities in `[0, 1]`.
#[derive(Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl fmt::Debug for Image {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Image")
            .field("height", &self.height)
            .field("width", &self.width)
            .finish_non_exhaustive()
    }
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self, ImagingError> {
        if pixels.len() != height * width {
            return Err(ImagingError::BufferLength {
                expected: height * width,
                actual: pixels.len(),
            });
        }
        if let Some((index, &value)) = pixels
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(ImagingError::IntensityOutOfRange { index, value });
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            pixels: vec![0.0; height * width],
        }
    }

    /// Builds an image from arbitrary reals, clamping into `[0, 1]`.
    /// NaN maps to 0.
    pub fn from_clamped(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self, ImagingError> {
        let pixels = pixels
            .into_iter()
            .map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) })
            .collect();
        Self::new(height, width, pixels)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }
}

/// A square block of reals stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    size: usize,
    values: Vec<f64>,
}

impl Block {
    pub fn zeros(size: usize) -> Self {
        Self {
            size,
            values: vec![0.0; size * size],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, ImagingError> {
        let size = rows.len();
        if rows.iter().any(|r| r.len() != size) {
            return Err(ImagingError::DimensionMismatch(
                "block rows must form a square".into(),
            ));
        }
        Ok(Self {
            size,
            values: rows.concat(),
        })
    }

    /// Inverse of [`Block::vectorize`].
    pub fn devectorize(size: usize, values: Vec<f64>) -> Result<Self, ImagingError> {
        if values.len() != size * size {
            return Err(ImagingError::BufferLength {
                expected: size * size,
                actual: values.len(),
            });
        }
        Ok(Self { size, values })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.size + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.values[row * self.size + col] = value;
    }

    /// Row-major flattening. Every module uses this order.
    pub fn vectorize(&self) -> Vec<f64> {
        self.values.clone()
    }

    pub fn energy(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }
}

/// An image split into non-overlapping `B x B` blocks, zero padded on the
/// bottom and right edges.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockGrid {
    pub block_size: usize,
    pub rows: usize,
    pub cols: usize,
    pub pad_bottom: usize,
    pub pad_right: usize,
    /// Row-major over the grid.
    pub blocks: Vec<Block>,
}

impl BlockGrid {
    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn padded_height(&self) -> usize {
        self.rows * self.block_size
    }

    pub fn padded_width(&self) -> usize {
        self.cols * self.block_size
    }

    pub fn padded_pixels(&self) -> usize {
        self.padded_height() * self.padded_width()
    }
}

pub fn partition(image: &Image, block_size: usize) -> Result<BlockGrid, ImagingError> {
    if block_size < 2 {
        return Err(ImagingError::InvalidBlockSize(block_size));
    }
    let rows = image.height.div_ceil(block_size);
    let cols = image.width.div_ceil(block_size);
    let mut blocks = Vec::with_capacity(rows * cols);
    for br in 0..rows {
        for bc in 0..cols {
            let mut block = Block::zeros(block_size);
            for r in 0..block_size {
                let y = br * block_size + r;
                if y >= image.height {
                    break;
                }
                for c in 0..block_size {
                    let x = bc * block_size + c;
                    if x >= image.width {
                        break;
                    }
                    block.set(r, c, image.get(y, x));
                }
            }
            blocks.push(block);
        }
    }
    Ok(BlockGrid {
        block_size,
        rows,
        cols,
        pad_bottom: rows * block_size - image.height,
        pad_right: cols * block_size - image.width,
        blocks,
    })
}

/// Crops the padding and clamps to `[0, 1]`.
pub fn assemble(grid: &BlockGrid, height: usize, width: usize) -> Result<Image, ImagingError> {
    let b = grid.block_size;
    if grid.blocks.len() != grid.rows * grid.cols {
        return Err(ImagingError::DimensionMismatch(format!(
            "grid declares {}x{} blocks but holds {}",
            grid.rows,
            grid.cols,
            grid.blocks.len()
        )));
    }
    if grid.blocks.iter().any(|blk| blk.size != b) {
        return Err(ImagingError::DimensionMismatch(
            "block size differs from grid block size".into(),
        ));
    }
    if height.div_ceil(b) != grid.rows || width.div_ceil(b) != grid.cols {
        return Err(ImagingError::DimensionMismatch(format!(
            "{height}x{width} image does not tile into {}x{} blocks of size {b}",
            grid.rows, grid.cols
        )));
    }
    let mut pixels = vec![0.0; height * width];
    for (idx, block) in grid.blocks.iter().enumerate() {
        let (br, bc) = (idx / grid.cols, idx % grid.cols);
        for r in 0..b {
            let y = br * b + r;
            if y >= height {
                break;
            }
            for c in 0..b {
                let x = bc * b + c;
                if x >= width {
                    break;
                }
                pixels[y * width + x] = block.get(r, c);
            }
        }
    }
    Image::from_clamped(height, width, pixels)
}

/// DCT-II coefficients of one block.
#[derive(Debug, Clone, PartialEq)]
pub struct CoeffBlock {
    size: usize,
    coefficients: Vec<f64>,
}

impl CoeffBlock {
    pub fn new(size: usize, coefficients: Vec<f64>) -> Result<Self, ImagingError> {
        if coefficients.len() != size * size {
            return Err(ImagingError::BufferLength {
                expected: size * size,
                actual: coefficients.len(),
            });
        }
        Ok(Self { size, coefficients })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    pub fn energy(&self) -> f64 {
        self.coefficients.iter().map(|v| v * v).sum()
    }
}

/// Orthonormal DCT-II basis for one block size.
///
/// `basis[k * n + j] = s_k * cos(pi * (2j + 1) * k / (2n))` with
/// `s_0 = sqrt(1/n)` and `s_k = sqrt(2/n)` otherwise, so the matrix is
/// orthogonal and the separable 2-D transform preserves energy.
#[derive(Debug, Clone)]
pub struct Dct2 {
    size: usize,
    basis: Vec<f64>,
}

impl Dct2 {
    pub fn new(size: usize) -> Self {
        let n = size as f64;
        let mut basis = vec![0.0; size * size];
        for k in 0..size {
            let scale = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
            for j in 0..size {
                basis[k * size + j] =
                    scale * (PI * (2 * j + 1) as f64 * k as f64 / (2.0 * n)).cos();
            }
        }
        Self { size, basis }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// The 1-D transform matrix, row-major.
    pub fn matrix(&self) -> &[f64] {
        &self.basis
    }

    pub fn forward(&self, block: &Block) -> CoeffBlock {
        assert_eq!(block.size, self.size, "block size does not match transform");
        let coefficients = self.apply(&block.values, false);
        CoeffBlock {
            size: self.size,
            coefficients,
        }
    }

    pub fn inverse(&self, coeffs: &CoeffBlock) -> Block {
        assert_eq!(coeffs.size, self.size, "block size does not match transform");
        let values = self.apply(&coeffs.coefficients, true);
        Block {
            size: self.size,
            values,
        }
    }

    // forward: C X C^T, inverse: C^T F C
    fn apply(&self, input: &[f64], inverse: bool) -> Vec<f64> {
        let n = self.size;
        let c = |i: usize, j: usize| {
            if inverse {
                self.basis[j * n + i]
            } else {
                self.basis[i * n + j]
            }
        };
        let mut tmp = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let mut acc = 0.0;
                for k in 0..n {
                    acc += c(i, k) * input[k * n + j];
                }
                tmp[i * n + j] = acc;
            }
        }
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let mut acc = 0.0;
                for k in 0..n {
                    acc += tmp[i * n + k] * c(j, k);
                }
                out[i * n + j] = acc;
            }
        }
        out
    }
}

pub fn dct2(block: &Block) -> CoeffBlock {
    Dct2::new(block.size).forward(block)
}

pub fn idct2(coeffs: &CoeffBlock) -> Block {
    Dct2::new(coeffs.size).inverse(coeffs)
}

/// Transforms every block of a grid with a shared basis.
pub fn grid_coefficients(grid: &BlockGrid) -> Vec<CoeffBlock> {
    use rayon::prelude::*;
    let dct = Dct2::new(grid.block_size);
    grid.blocks.par_iter().map(|b| dct.forward(b)).collect()
}

pub fn load_pgm(path: impl AsRef<Path>) -> Result<Image, PgmError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| PgmError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_pgm(&bytes)
}

pub fn save_pgm(image: &Image, path: impl AsRef<Path>) -> Result<(), PgmError> {
    let path = path.as_ref();
    std::fs::write(path, encode_pgm(image)).map_err(|source| PgmError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Binary P5 with maxval 255; samples are rounded half-up.
pub fn encode_pgm(image: &Image) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend(image.pixels.iter().map(|&v| quantize(v)));
    out
}

fn quantize(v: f64) -> u8 {
    (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderCursor<'_> {
    fn skip_whitespace_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b if b.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<u64, PgmError> {
        self.skip_whitespace_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(PgmError::MalformedHeader {
                offset: start,
                reason: format!("expected {what}"),
            });
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| PgmError::MalformedHeader {
                offset: start,
                reason: format!("{what} does not fit in 64 bits"),
            })
    }
}

pub fn parse_pgm(bytes: &[u8]) -> Result<Image, PgmError> {
    if bytes.len() < 2 {
        return Err(PgmError::MalformedHeader {
            offset: bytes.len(),
            reason: "file too short for a magic number".into(),
        });
    }
    let binary = match &bytes[..2] {
        b"P2" => false,
        b"P5" => true,
        other => {
            return Err(PgmError::UnsupportedMagic {
                offset: 0,
                found: String::from_utf8_lossy(other).into_owned(),
            })
        }
    };
    let mut cur = HeaderCursor { bytes, pos: 2 };
    if cur.pos < bytes.len() && !bytes[cur.pos].is_ascii_whitespace() && bytes[cur.pos] != b'#' {
        return Err(PgmError::MalformedHeader {
            offset: cur.pos,
            reason: "magic number must be followed by whitespace".into(),
        });
    }
    let width = cur.number("width")? as usize;
    let height = cur.number("height")? as usize;
    cur.skip_whitespace_and_comments();
    let maxval_offset = cur.pos;
    let maxval = cur.number("maxval")?;
    if maxval == 0 || maxval > 65535 {
        return Err(PgmError::MalformedHeader {
            offset: maxval_offset,
            reason: format!("maxval {maxval} outside 1..=65535"),
        });
    }
    let count = width
        .checked_mul(height)
        .ok_or_else(|| PgmError::MalformedHeader {
            offset: maxval_offset,
            reason: "image dimensions overflow".into(),
        })?;
    let scale = maxval as f64;
    let mut pixels = Vec::with_capacity(count);

    if binary {
        // exactly one whitespace byte separates the header from the raster
        if cur.pos >= bytes.len() || !bytes[cur.pos].is_ascii_whitespace() {
            return Err(PgmError::MalformedHeader {
                offset: cur.pos,
                reason: "expected a single whitespace byte after maxval".into(),
            });
        }
        let start = cur.pos + 1;
        let width_bytes = if maxval < 256 { 1 } else { 2 };
        let payload = &bytes[start..];
        let available = payload.len() / width_bytes;
        if available < count {
            return Err(PgmError::TruncatedPayload {
                offset: bytes.len(),
                expected: count,
                found: available,
            });
        }
        for i in 0..count {
            let raw = if width_bytes == 1 {
                payload[i] as u64
            } else {
                u16::from_be_bytes([payload[2 * i], payload[2 * i + 1]]) as u64
            };
            if raw > maxval {
                return Err(PgmError::InvalidSample {
                    offset: start + i * width_bytes,
                    reason: format!("sample {raw} exceeds maxval {maxval}"),
                });
            }
            pixels.push(raw as f64 / scale);
        }
    } else {
        for found in 0..count {
            cur.skip_whitespace_and_comments();
            if cur.pos >= bytes.len() {
                return Err(PgmError::TruncatedPayload {
                    offset: cur.pos,
                    expected: count,
                    found,
                });
            }
            let offset = cur.pos;
            let raw = cur.number("sample").map_err(|_| PgmError::InvalidSample {
                offset,
                reason: "expected a decimal sample".into(),
            })?;
            if raw > maxval {
                return Err(PgmError::InvalidSample {
                    offset,
                    reason: format!("sample {raw} exceeds maxval {maxval}"),
                });
            }
            pixels.push(raw as f64 / scale);
        }
    }
    Ok(Image {
        height,
        width,
        pixels,
    })
}
