//! Binary image masks and their run-length text encoding.
//!
//! The run-length text has exactly one line per image row (lines joined with `\n`). Each line
//! lists the row's foreground runs as whitespace-separated `start,len` pairs in ascending,
//! non-overlapping order; an empty line is an all-background row.

use crate::error::{Error, Result};
use crate::roi::RoiBox;
use crate::tensor::Tensor4;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    h: usize,
    w: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            data: vec![false; h * w],
        }
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                data.push(f(y, x));
            }
        }
        Self { h, w, data }
    }

    pub fn from_vec(h: usize, w: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::Shape(format!(
                "mask {}x{} with {} values",
                h,
                w,
                data.len()
            )));
        }
        Ok(Self { h, w, data })
    }

    pub fn height(&self) -> usize {
        self.h
    }
    pub fn width(&self) -> usize {
        self.w
    }
    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.w + x]
    }

    /// Out-of-range coordinates read as background.
    #[inline]
    pub fn get_signed(&self, y: isize, x: isize) -> bool {
        y >= 0 && x >= 0 && (y as usize) < self.h && (x as usize) < self.w && self.get(y as usize, x as usize)
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.w + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&v| v)
    }

    pub fn same_dims(&self, other: &Mask) -> bool {
        self.h == other.h && self.w == other.w
    }

    pub fn intersects(&self, other: &Mask) -> bool {
        self.data.iter().zip(&other.data).any(|(&a, &b)| a && b)
    }

    pub fn union_with(&mut self, other: &Mask) {
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a |= b;
        }
    }

    /// Foreground pixel coordinates `(y, x)` in row-major order.
    pub fn foreground(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &v)| v)
            .map(move |(i, _)| (i / self.w, i % self.w))
    }

    /// Inclusive pixel extent `(y_min, x_min, y_max, x_max)` of the foreground.
    pub fn extent(&self) -> Option<(usize, usize, usize, usize)> {
        let mut ext: Option<(usize, usize, usize, usize)> = None;
        for (y, x) in self.foreground() {
            ext = Some(match ext {
                None => (y, x, y, x),
                Some((y0, x0, y1, x1)) => (y0.min(y), x0.min(x), y1.max(y), x1.max(x)),
            });
        }
        ext
    }

    /// Minimal box covering all foreground pixels, in continuous coordinates where pixel
    /// `(y, x)` spans `[x, x+1) x [y, y+1)`.
    pub fn tight_box(&self, label: usize, score: f64) -> Option<RoiBox> {
        self.extent().map(|(y0, x0, y1, x1)| RoiBox {
            x0: x0 as f64,
            y0: y0 as f64,
            x1: (x1 + 1) as f64,
            y1: (y1 + 1) as f64,
            label,
            score,
        })
    }

    pub fn to_tensor(&self) -> Tensor4 {
        Tensor4::from_fn([1, 1, self.h, self.w], |_, _, y, x| self.get(y, x) as u8 as f64)
    }

    /// Rotates by 90 degrees counter-clockwise as displayed (image y axis pointing down).
    pub fn rotate90_ccw(&self) -> Mask {
        Mask::from_fn(self.w, self.h, |y, x| self.get(x, self.w - 1 - y))
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&self) -> Mask {
        Mask::from_fn(self.h * 2, self.w * 2, |y, x| self.get(y / 2, x / 2))
    }

    /// Shifts the mask by `(dy, dx)` pixels, filling with background.
    pub fn shifted(&self, dy: isize, dx: isize) -> Mask {
        Mask::from_fn(self.h, self.w, |y, x| {
            self.get_signed(y as isize - dy, x as isize - dx)
        })
    }

    /// Square (Chebyshev) dilation by `r` pixels.
    pub fn dilate(&self, r: usize) -> Mask {
        let r = r as isize;
        Mask::from_fn(self.h, self.w, |y, x| {
            for dy in -r..=r {
                for dx in -r..=r {
                    if self.get_signed(y as isize + dy, x as isize + dx) {
                        return true;
                    }
                }
            }
            false
        })
    }

    /// Foreground pixels with at least one 4-neighbour that is background or off-image.
    pub fn boundary(&self) -> Mask {
        Mask::from_fn(self.h, self.w, |y, x| {
            if !self.get(y, x) {
                return false;
            }
            let (y, x) = (y as isize, x as isize);
            !(self.get_signed(y - 1, x)
                && self.get_signed(y + 1, x)
                && self.get_signed(y, x - 1)
                && self.get_signed(y, x + 1))
        })
    }

    /// One line per row, rows joined by `\n`; each line lists the row's foreground runs as
    /// space-separated `start,len` pairs in increasing `start` order. Empty rows are empty lines.
    pub fn to_rle_text(&self) -> String {
        let mut lines = Vec::with_capacity(self.h);
        for y in 0..self.h {
            let row = &self.data[y * self.w..(y + 1) * self.w];
            let mut runs = Vec::new();
            let mut x = 0;
            while x < self.w {
                if row[x] {
                    let start = x;
                    while x < self.w && row[x] {
                        x += 1;
                    }
                    runs.push(format!("{},{}", start, x - start));
                } else {
                    x += 1;
                }
            }
            lines.push(runs.join(" "));
        }
        lines.join("\n")
    }

    pub fn from_rle_text(text: &str, h: usize, w: usize) -> Result<Mask> {
        let fmt = |msg: String| Error::Format(format!("mask rle: {}", msg));
        if h.checked_mul(w).map_or(true, |n| n > (1 << 28)) {
            return Err(fmt(format!("mask {}x{} too large", h, w)));
        }
        let mut mask = Mask::new(h, w);
        if h == 0 {
            return if text.is_empty() {
                Ok(mask)
            } else {
                Err(fmt("rows present for a zero-height mask".into()))
            };
        }
        let lines: Vec<&str> = text.split('\n').collect();
        if lines.len() != h {
            return Err(fmt(format!("{} rows for height {}", lines.len(), h)));
        }
        for (y, line) in lines.iter().enumerate() {
            let mut next_free = 0usize;
            for pair in line.split_whitespace() {
                let (s, l) = pair
                    .split_once(',')
                    .ok_or_else(|| fmt(format!("row {}: bad pair {:?}", y, pair)))?;
                let start: usize = s
                    .parse()
                    .map_err(|_| fmt(format!("row {}: bad start {:?}", y, s)))?;
                let len: usize = l
                    .parse()
                    .map_err(|_| fmt(format!("row {}: bad length {:?}", y, l)))?;
                if len == 0 {
                    return Err(fmt(format!("row {}: zero-length run", y)));
                }
                if start < next_free {
                    return Err(fmt(format!("row {}: runs overlap or are unordered", y)));
                }
                let end = start
                    .checked_add(len)
                    .filter(|&e| e <= w)
                    .ok_or_else(|| fmt(format!("row {}: run {}+{} exceeds width {}", y, start, len, w)))?;
                for x in start..end {
                    mask.set(y, x, true);
                }
                next_free = end;
            }
        }
        Ok(mask)
    }
}
