//! Built-in test images on a 3×3 grid of `B`-sized blocks.

use crate::imaging::Image;

/// Row-major index of the textured block in [`checker_block`].
pub const CHECKER_BLOCK_INDEX: usize = 4;

/// Flat level used outside the textured block.
pub const FLAT_LEVEL: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticKind {
    Flat,
    CheckerBlock,
    Gradient,
}

impl SyntheticKind {
    pub fn render(self, block_size: usize) -> Image {
        match self {
            SyntheticKind::Flat => flat(block_size, FLAT_LEVEL),
            SyntheticKind::CheckerBlock => checker_block(block_size),
            SyntheticKind::Gradient => gradient(block_size),
        }
    }
}

impl std::str::FromStr for SyntheticKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "flat" => Ok(SyntheticKind::Flat),
            "checker-block" => Ok(SyntheticKind::CheckerBlock),
            "gradient" => Ok(SyntheticKind::Gradient),
            other => Err(format!(
                "unknown synthetic image '{other}' (expected flat, checker-block or gradient)"
            )),
        }
    }
}

fn side(block_size: usize) -> usize {
    3 * block_size
}

fn square(n: usize, pixels: Vec<f64>) -> Image {
    Image::from_clamped(n, n, pixels).expect("buffer sized to n*n")
}

pub fn flat(block_size: usize, level: f64) -> Image {
    let n = side(block_size);
    square(n, vec![level; n * n])
}

/// Flat blocks at [`FLAT_LEVEL`] with a one-pixel 0/1 checkerboard filling
/// the centre block.
pub fn checker_block(block_size: usize) -> Image {
    let n = side(block_size);
    let mut px = vec![FLAT_LEVEL; n * n];
    for r in block_size..2 * block_size {
        for c in block_size..2 * block_size {
            px[r * n + c] = ((r + c) % 2) as f64;
        }
    }
    square(n, px)
}

/// Diagonal ramp from 0 at the top-left to 1 at the bottom-right.
pub fn gradient(block_size: usize) -> Image {
    let n = side(block_size);
    let span = (2 * (n - 1)).max(1) as f64;
    let px = (0..n * n).map(|i| (i / n + i % n) as f64 / span).collect();
    square(n, px)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::partition;

    #[test]
    fn textured_block_sits_in_the_centre() {
        let grid = partition(&checker_block(8), 8).unwrap();
        assert_eq!(grid.len(), 9);
        for (i, b) in grid.blocks.iter().enumerate() {
            let e = b.energy();
            if i == CHECKER_BLOCK_INDEX {
                assert_eq!(e, 32.0);
            } else {
                assert_eq!(e, 16.0);
            }
        }
    }

    #[test]
    fn gradient_spans_unit_range() {
        let img = gradient(4);
        assert_eq!(img.get(0, 0), 0.0);
        assert_eq!(img.get(11, 11), 1.0);
    }

    #[test]
    fn kinds_parse() {
        assert_eq!("checker-block".parse::<SyntheticKind>().unwrap(), SyntheticKind::CheckerBlock);
        assert!("noise".parse::<SyntheticKind>().is_err());
    }
}
