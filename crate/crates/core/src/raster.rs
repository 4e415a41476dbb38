//! ESRI ASCII elevation grids.
//!
//! A grid is stored exactly as it appears on disk: `heights[0..n_cols]` is the
//! top (northernmost) row. Values are cell centers, and `(x_origin, y_origin)`
//! is the lower-left corner of the lower-left cell, so the center of the cell
//! in column `c` and row `r` counted from the *bottom* is
//!
//! ```text
//! (x_origin + (c + 0.5) * cell_size, y_origin + (r + 0.5) * cell_size)
//! ```

use std::fmt::Write as _;
use std::io::{BufRead, Read};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum RasterError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid grid: {0}")]
    Invalid(String),
    #[error("point ({x}, {y}) is outside the sampling extent of the grid")]
    OutOfBounds { x: f64, y: f64 },
    #[error("point ({x}, {y}) touches a nodata cell")]
    NoData { x: f64, y: f64 },
    #[error("i/o error: {0}")]
    Io(String),
}

impl RasterError {
    fn parse(line: usize, message: impl Into<String>) -> Self {
        RasterError::Parse {
            line,
            message: message.into(),
        }
    }
}

/// A regular elevation grid (DSM or DTM) with square cells.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterGrid {
    n_cols: usize,
    n_rows: usize,
    x_origin: f64,
    y_origin: f64,
    cell_size: f64,
    nodata_value: Option<f64>,
    heights: Vec<f64>,
}

impl RasterGrid {
    /// Builds a grid from row-major heights, top row first.
    pub fn new(
        n_cols: usize,
        n_rows: usize,
        x_origin: f64,
        y_origin: f64,
        cell_size: f64,
        nodata_value: Option<f64>,
        heights: Vec<f64>,
    ) -> Result<Self, RasterError> {
        if n_cols < 2 || n_rows < 2 {
            return Err(RasterError::Invalid(format!(
                "grid must be at least 2x2, got {n_cols}x{n_rows}"
            )));
        }
        if !(cell_size.is_finite() && cell_size > 0.0) {
            return Err(RasterError::Invalid(format!(
                "cell size must be positive, got {cell_size}"
            )));
        }
        if !x_origin.is_finite() || !y_origin.is_finite() {
            return Err(RasterError::Invalid("origin must be finite".into()));
        }
        if n_cols.checked_mul(n_rows) != Some(heights.len()) {
            return Err(RasterError::Invalid(format!(
                "expected {} heights, got {}",
                n_cols.saturating_mul(n_rows),
                heights.len()
            )));
        }
        if let Some(nd) = nodata_value {
            if nd.is_nan() {
                return Err(RasterError::Invalid("nodata value must not be NaN".into()));
            }
        }
        if let Some(bad) = heights.iter().position(|&h| !h.is_finite() && Some(h) != nodata_value) {
            return Err(RasterError::Invalid(format!("non-finite height at index {bad}")));
        }
        Ok(Self {
            n_cols,
            n_rows,
            x_origin,
            y_origin,
            cell_size,
            nodata_value,
            heights,
        })
    }

    /// A grid where every cell holds `value`.
    pub fn constant(
        n_cols: usize,
        n_rows: usize,
        x_origin: f64,
        y_origin: f64,
        cell_size: f64,
        value: f64,
    ) -> Result<Self, RasterError> {
        Self::new(
            n_cols,
            n_rows,
            x_origin,
            y_origin,
            cell_size,
            None,
            vec![value; n_cols.saturating_mul(n_rows)],
        )
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn x_origin(&self) -> f64 {
        self.x_origin
    }

    pub fn y_origin(&self) -> f64 {
        self.y_origin
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn nodata_value(&self) -> Option<f64> {
        self.nodata_value
    }

    /// Row-major heights, top row first.
    pub fn heights(&self) -> &[f64] {
        &self.heights
    }

    /// Height of the cell at `col`, `row_from_top`.
    pub fn get(&self, col: usize, row_from_top: usize) -> f64 {
        self.heights[row_from_top * self.n_cols + col]
    }

    pub fn set(&mut self, col: usize, row_from_top: usize, value: f64) {
        self.heights[row_from_top * self.n_cols + col] = value;
    }

    pub fn is_nodata(&self, col: usize, row_from_top: usize) -> bool {
        self.nodata_value == Some(self.get(col, row_from_top))
    }

    /// Ground coordinates of a cell center.
    pub fn cell_center(&self, col: usize, row_from_top: usize) -> (f64, f64) {
        let row_from_bottom = self.n_rows - 1 - row_from_top;
        (
            self.x_origin + (col as f64 + 0.5) * self.cell_size,
            self.y_origin + (row_from_bottom as f64 + 0.5) * self.cell_size,
        )
    }

    /// Bounding box `(x_min, y_min, x_max, y_max)` of the cell centers, which
    /// is the region where [`sample_bilinear`] is defined.
    pub fn sampling_extent(&self) -> (f64, f64, f64, f64) {
        let half = 0.5 * self.cell_size;
        (
            self.x_origin + half,
            self.y_origin + half,
            self.x_origin + (self.n_cols as f64 - 0.5) * self.cell_size,
            self.y_origin + (self.n_rows as f64 - 0.5) * self.cell_size,
        )
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (x0, y0, x1, y1) = self.sampling_extent();
        x >= x0 && x <= x1 && y >= y0 && y <= y1
    }

    /// Applies `f` to every cell value, nodata cells included.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self, RasterError> {
        Self::new(
            self.n_cols,
            self.n_rows,
            self.x_origin,
            self.y_origin,
            self.cell_size,
            self.nodata_value,
            self.heights.iter().map(|&h| f(h)).collect(),
        )
    }
}

/// Bilinear interpolation of the four cell centers surrounding `(x, y)`.
pub fn sample_bilinear(grid: &RasterGrid, x: f64, y: f64) -> Result<f64, RasterError> {
    if !grid.contains(x, y) {
        return Err(RasterError::OutOfBounds { x, y });
    }
    let fx = (x - grid.x_origin) / grid.cell_size - 0.5;
    let fy = (y - grid.y_origin) / grid.cell_size - 0.5;
    let c0 = (fx.floor().max(0.0) as usize).min(grid.n_cols - 2);
    let b0 = (fy.floor().max(0.0) as usize).min(grid.n_rows - 2);
    let tx = fx - c0 as f64;
    let ty = fy - b0 as f64;
    // rows counted from the bottom -> stored rows counted from the top
    let r_lo = grid.n_rows - 1 - b0;
    let r_hi = r_lo - 1;
    let corners = [(c0, r_lo), (c0 + 1, r_lo), (c0, r_hi), (c0 + 1, r_hi)];
    if corners.iter().any(|&(c, r)| grid.is_nodata(c, r)) {
        return Err(RasterError::NoData { x, y });
    }
    let h00 = grid.get(c0, r_lo);
    let h10 = grid.get(c0 + 1, r_lo);
    let h01 = grid.get(c0, r_hi);
    let h11 = grid.get(c0 + 1, r_hi);
    let bottom = h00 + (h10 - h00) * tx;
    let top = h01 + (h11 - h01) * tx;
    Ok(bottom + (top - bottom) * ty)
}

const HEADER_KEYS: [&str; 6] = ["ncols", "nrows", "xllcorner", "yllcorner", "cellsize", "nodata_value"];

/// Parses an ESRI ASCII grid. Header keys are case-insensitive and both `\n`
/// and `\r\n` line endings are accepted. Each data line must hold exactly one
/// row of `ncols` values.
pub fn parse_ascii_grid<R: Read>(reader: R) -> Result<RasterGrid, RasterError> {
    let mut reader = std::io::BufReader::new(reader);
    let mut header: [Option<f64>; 6] = [None; 6];
    let mut buf = Vec::new();
    let mut line_no = 0usize;
    let mut heights: Vec<f64> = Vec::new();
    let mut dims: Option<(usize, usize, Option<f64>)> = None;
    let mut rows_read = 0usize;

    loop {
        buf.clear();
        let n = reader
            .read_until(b'\n', &mut buf)
            .map_err(|e| RasterError::Io(e.to_string()))?;
        if n == 0 {
            break;
        }
        line_no += 1;
        let line = std::str::from_utf8(&buf).map_err(|_| RasterError::parse(line_no, "line is not valid UTF-8"))?;
        let line = line.trim_end_matches(['\n', '\r']);
        if line.trim().is_empty() {
            continue;
        }
        let mut tokens = line.split_whitespace();
        let first = tokens.next().unwrap_or_default();

        if dims.is_none() && first.parse::<f64>().is_err() {
            let key = first.to_ascii_lowercase();
            let slot = HEADER_KEYS
                .iter()
                .position(|k| *k == key)
                .ok_or_else(|| RasterError::parse(line_no, format!("unknown header key `{first}`")))?;
            if header[slot].is_some() {
                return Err(RasterError::parse(line_no, format!("duplicate header key `{first}`")));
            }
            let value_token = tokens
                .next()
                .ok_or_else(|| RasterError::parse(line_no, format!("header `{first}` has no value")))?;
            if tokens.next().is_some() {
                return Err(RasterError::parse(
                    line_no,
                    format!("header `{first}` has trailing tokens"),
                ));
            }
            let value: f64 = value_token
                .parse()
                .map_err(|_| RasterError::parse(line_no, format!("non-numeric header value `{value_token}`")))?;
            header[slot] = Some(value);
            continue;
        }

        let (n_cols, n_rows, nodata) = match dims {
            Some(d) => d,
            None => {
                let d = finish_header(&header, line_no)?;
                dims = Some(d);
                d
            }
        };
        if rows_read == n_rows {
            return Err(RasterError::parse(
                line_no,
                format!("more than the declared {n_rows} rows"),
            ));
        }
        let before = heights.len();
        for token in line.split_whitespace() {
            let v: f64 = token
                .parse()
                .map_err(|_| RasterError::parse(line_no, format!("non-numeric token `{token}`")))?;
            if !v.is_finite() && Some(v) != nodata {
                return Err(RasterError::parse(line_no, format!("non-finite value `{token}`")));
            }
            if heights.len() - before == n_cols {
                return Err(RasterError::parse(
                    line_no,
                    format!("row has more than {n_cols} values"),
                ));
            }
            heights.push(v);
        }
        let got = heights.len() - before;
        if got != n_cols {
            return Err(RasterError::parse(
                line_no,
                format!("row has {got} values, expected {n_cols}"),
            ));
        }
        rows_read += 1;
    }

    let (n_cols, n_rows, _) = match dims {
        Some(d) => d,
        None => finish_header(&header, line_no + 1)?,
    };
    if rows_read != n_rows {
        return Err(RasterError::parse(
            line_no + 1,
            format!("expected {n_rows} rows, found {rows_read}"),
        ));
    }
    RasterGrid::new(
        n_cols,
        n_rows,
        header[2].unwrap_or_default(),
        header[3].unwrap_or_default(),
        header[4].unwrap_or_default(),
        header[5],
        heights,
    )
    .map_err(|e| RasterError::parse(line_no, e.to_string()))
}

fn finish_header(header: &[Option<f64>; 6], line_no: usize) -> Result<(usize, usize, Option<f64>), RasterError> {
    for (key, value) in HEADER_KEYS.iter().zip(header).take(5) {
        if value.is_none() {
            return Err(RasterError::parse(line_no, format!("missing header key `{key}`")));
        }
    }
    let count = |v: f64, key: &str| -> Result<usize, RasterError> {
        if v.fract() != 0.0 || !(2.0..=1e9).contains(&v) {
            return Err(RasterError::parse(
                line_no,
                format!("`{key}` must be an integer >= 2, got {v}"),
            ));
        }
        Ok(v as usize)
    };
    let n_cols = count(header[0].unwrap(), "ncols")?;
    let n_rows = count(header[1].unwrap(), "nrows")?;
    Ok((n_cols, n_rows, header[5]))
}

pub fn parse_ascii_grid_str(text: &str) -> Result<RasterGrid, RasterError> {
    parse_ascii_grid(text.as_bytes())
}

/// Serializes a grid. Values use the shortest representation that parses
/// back to the same `f64`, so a round trip is exact.
pub fn write_ascii_grid(grid: &RasterGrid) -> String {
    let mut out = String::with_capacity(grid.heights.len() * 8 + 128);
    let _ = writeln!(out, "ncols {}", grid.n_cols);
    let _ = writeln!(out, "nrows {}", grid.n_rows);
    let _ = writeln!(out, "xllcorner {}", grid.x_origin);
    let _ = writeln!(out, "yllcorner {}", grid.y_origin);
    let _ = writeln!(out, "cellsize {}", grid.cell_size);
    if let Some(nd) = grid.nodata_value {
        let _ = writeln!(out, "NODATA_value {nd}");
    }
    for row in grid.heights.chunks(grid.n_cols) {
        let mut first = true;
        for v in row {
            if !first {
                out.push(' ');
            }
            first = false;
            let _ = write!(out, "{v}");
        }
        out.push('\n');
    }
    out
}
