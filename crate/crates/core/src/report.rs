//! Plain-text heatmaps over the block grid.

use std::fmt::Write;

/// `value` rounded to `digits` significant digits, in positional notation.
pub fn format_significant(value: f64, digits: usize) -> String {
    if value == 0.0 || !value.is_finite() {
        return format!("{value}");
    }
    let magnitude = value.abs().log10().floor() as i64;
    let decimals = (digits as i64 - 1 - magnitude).max(0) as usize;
    format!("{value:.decimals$}")
}

fn heatmap<T>(values: &[T], rows: usize, cols: usize, cell: impl Fn(&T) -> String) -> String {
    assert_eq!(values.len(), rows * cols, "heatmap size mismatch");
    let mut out = String::new();
    for r in 0..rows {
        let line: Vec<String> = values[r * cols..(r + 1) * cols].iter().map(&cell).collect();
        let _ = writeln!(out, "{}", line.join(","));
    }
    out
}

/// One CSV line per block row.
pub fn int_heatmap_csv<T: std::fmt::Display>(values: &[T], rows: usize, cols: usize) -> String {
    heatmap(values, rows, cols, |v| v.to_string())
}

/// One CSV line per block row, six significant digits.
pub fn real_heatmap_csv(values: &[f64], rows: usize, cols: usize) -> String {
    heatmap(values, rows, cols, |v| format_significant(*v, 6))
}
