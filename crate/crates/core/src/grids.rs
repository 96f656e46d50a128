//! Raster containers, summed-area tables and inclusive pixel boxes.
//!
//! Pixel `(x, y)` covers the continuous square `[x, x+1) × [y, y+1)`, so its
//! center sits at `(x + 0.5, y + 0.5)`. Point annotations and projections use
//! continuous coordinates; everything indexed by integers uses pixel indices.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Dense row-major raster of `f32` values with interleaved channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid2D {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Grid2D {
    /// Builds a grid from raw data, rejecting wrong lengths and non-finite values.
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(Error::invalid(format!(
                "grid dimensions must be positive, got {width}x{height}x{channels}"
            )));
        }
        let expected = width * height * channels;
        if data.len() != expected {
            return Err(Error::mismatch(
                format!("{expected} values"),
                format!("{} values", data.len()),
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite value at flat index {i}")));
        }
        Ok(Grid2D {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        assert!(width > 0 && height > 0 && channels > 0, "empty grid");
        Grid2D {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    /// Single-channel grid filled from `f(x, y)`. Non-finite results are replaced by 0.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut g = Grid2D::zeros(width, height, 1);
        for y in 0..height {
            for x in 0..width {
                let v = f(x, y);
                g.data[y * width + x] = if v.is_finite() { v } else { 0.0 };
            }
        }
        g
    }

    /// Single-channel grid from rows of equal length (convenient in tests).
    pub fn from_rows(rows: &[&[f32]]) -> Result<Self> {
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::invalid("ragged rows"));
        }
        Grid2D::new(width, height, 1, rows.concat())
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Mutable access to the raw buffer. Callers must keep values finite.
    #[inline]
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f32) {
        debug_assert!(v.is_finite());
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn same_shape(&self, other: &Grid2D) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn shape_string(&self) -> String {
        format!("{}x{}x{}", self.width, self.height, self.channels)
    }

    /// Extracts channel `c` as a single-channel grid.
    pub fn channel(&self, c: usize) -> Grid2D {
        assert!(c < self.channels);
        let data = self.data.iter().skip(c).step_by(self.channels).copied().collect();
        Grid2D {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }

    /// Sum of all values, accumulated in `f64`.
    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn whole_box(&self) -> BoxRegion {
        BoxRegion {
            x0: 0,
            y0: 0,
            x1: self.width - 1,
            y1: self.height - 1,
        }
    }

    /// Writes the grid in CGRID v1 format.
    pub fn write_cgrid<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "CGRID 1 {} {} {}", self.width, self.height, self.channels)?;
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    /// Reads a CGRID v1 stream.
    pub fn read_cgrid<R: Read>(mut r: R) -> Result<Self> {
        let header = read_header_line(&mut r)?;
        let fields: Vec<&str> = header.split_ascii_whitespace().collect();
        if fields.len() != 5 || fields[0] != "CGRID" {
            return Err(Error::Parse(format!("not a CGRID header: {header:?}")));
        }
        if fields[1] != "1" {
            return Err(Error::Parse(format!("unsupported CGRID version {}", fields[1])));
        }
        let dims: Vec<usize> = fields[2..]
            .iter()
            .map(|s| {
                s.parse::<usize>()
                    .map_err(|_| Error::Parse(format!("bad dimension {s:?}")))
            })
            .collect::<Result<_>>()?;
        let n = dims[0]
            .checked_mul(dims[1])
            .and_then(|v| v.checked_mul(dims[2]))
            .ok_or_else(|| Error::Parse("grid dimensions overflow".into()))?;
        let mut bytes = vec![0u8; n * 4];
        r.read_exact(&mut bytes)
            .map_err(|_| Error::Parse(format!("truncated CGRID payload, expected {n} floats")))?;
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Grid2D::new(dims[0], dims[1], dims[2], data)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_cgrid(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Grid2D::read_cgrid(BufReader::new(File::open(path)?))
    }
}

/// Reads bytes up to and including `\n`; the newline is not returned.
pub(crate) fn read_header_line<R: Read>(r: &mut R) -> Result<String> {
    let mut line = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte)? == 0 {
            return Err(Error::Parse("unexpected end of file in header".into()));
        }
        if byte[0] == b'\n' {
            break;
        }
        line.push(byte[0]);
        if line.len() > 4096 {
            return Err(Error::Parse("header line too long".into()));
        }
    }
    String::from_utf8(line).map_err(|_| Error::Parse("header is not UTF-8".into()))
}

/// Writes 8-bit values as a binary (P5) PGM image.
pub fn write_pgm<W: Write>(mut w: W, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::mismatch(width * height, pixels.len()));
    }
    write!(w, "P5\n{width} {height}\n255\n")?;
    w.write_all(pixels)?;
    Ok(())
}

/// Inclusive axis-aligned pixel rectangle. Empty boxes cannot be constructed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BoxRegion {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BoxRegion {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Result<Self> {
        if x0 > x1 || y0 > y1 {
            return Err(Error::invalid(format!(
                "box corners out of order: ({x0},{y0})-({x1},{y1})"
            )));
        }
        Ok(BoxRegion { x0, y0, x1, y1 })
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0 + 1
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0 + 1
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn fits(&self, width: usize, height: usize) -> bool {
        self.x1 < width && self.y1 < height
    }

    pub(crate) fn check_fits(&self, width: usize, height: usize) -> Result<()> {
        if self.fits(width, height) {
            Ok(())
        } else {
            Err(Error::OutOfBounds(format!(
                "box ({},{})-({},{}) outside {}x{} raster",
                self.x0, self.y0, self.x1, self.y1, width, height
            )))
        }
    }

    /// Lexicographic key `(y0, x0, y1, x1)` used for deterministic tie-breaking.
    pub fn tie_key(&self) -> (usize, usize, usize, usize) {
        (self.y0, self.x0, self.y1, self.x1)
    }
}

/// Summed-area table with a zero first row and column.
#[derive(Clone, Debug)]
pub struct IntegralImage {
    width: usize,
    height: usize,
    table: Vec<f64>,
}

impl IntegralImage {
    /// Builds the table from a single-channel grid.
    pub fn new(grid: &Grid2D) -> Result<Self> {
        if grid.channels() != 1 {
            return Err(Error::mismatch("1 channel", format!("{} channels", grid.channels())));
        }
        let (w, h) = (grid.width(), grid.height());
        let stride = w + 1;
        let mut table = vec![0.0f64; stride * (h + 1)];
        for y in 0..h {
            let mut row = 0.0f64;
            for x in 0..w {
                row += grid.data()[y * w + x] as f64;
                table[(y + 1) * stride + x + 1] = table[y * stride + x + 1] + row;
            }
        }
        Ok(IntegralImage {
            width: w,
            height: h,
            table,
        })
    }

    /// Source raster width (the table is one wider).
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Table entry `(i, j)`: sum over source columns `< i` and rows `< j`.
    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.table[j * (self.width + 1) + i]
    }

    pub fn box_sum(&self, b: &BoxRegion) -> Result<f64> {
        b.check_fits(self.width, self.height)?;
        Ok(self.box_sum_unchecked(b))
    }

    #[inline]
    pub(crate) fn box_sum_unchecked(&self, b: &BoxRegion) -> f64 {
        self.at(b.x1 + 1, b.y1 + 1) - self.at(b.x0, b.y1 + 1) - self.at(b.x1 + 1, b.y0) + self.at(b.x0, b.y0)
    }
}

/// Convenience wrapper for [`IntegralImage::new`].
pub fn integral_image(grid: &Grid2D) -> Result<IntegralImage> {
    IntegralImage::new(grid)
}

/// Convenience wrapper for [`IntegralImage::box_sum`].
pub fn box_sum(sat: &IntegralImage, b: &BoxRegion) -> Result<f64> {
    sat.box_sum(b)
}
