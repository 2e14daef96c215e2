//! Binary masks, their column-major run-length encoding, and pixel boxes.
//!
//! Runs alternate background/foreground starting with background, so a mask
//! whose pixel (0,0) is foreground starts with a zero-length run. A canonical
//! [`MaskRle`] has no other zero runs.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodecError {
    #[error("run lengths sum to {actual} but mask is {height}x{width} ({expected} px)")]
    SumMismatch {
        height: u32,
        width: u32,
        expected: u64,
        actual: u64,
    },
    #[error("zero-length run at index {index} (only the first run may be empty)")]
    InteriorZeroRun { index: usize },
    #[error("empty run list")]
    EmptyCounts,
    #[error("malformed compressed RLE string at byte {offset}")]
    CompressedString { offset: usize },
}

/// Axis-aligned pixel box, half-open: covers columns `x0..x1` and rows `y0..y1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoxPx {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl BoxPx {
    pub const fn new(x0: u32, y0: u32, x1: u32, y1: u32) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> u32 {
        self.x1.saturating_sub(self.x0)
    }

    pub fn height(&self) -> u32 {
        self.y1.saturating_sub(self.y0)
    }

    pub fn area(&self) -> u64 {
        self.width() as u64 * self.height() as u64
    }

    pub fn is_empty(&self) -> bool {
        self.x1 <= self.x0 || self.y1 <= self.y0
    }

    pub fn intersection(&self, other: &BoxPx) -> Option<BoxPx> {
        let b = BoxPx {
            x0: self.x0.max(other.x0),
            y0: self.y0.max(other.y0),
            x1: self.x1.min(other.x1),
            y1: self.y1.min(other.y1),
        };
        (!b.is_empty()).then_some(b)
    }

    pub fn iou(&self, other: &BoxPx) -> f64 {
        let inter = self.intersection(other).map_or(0, |b| b.area());
        let union = self.area() + other.area() - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// True when `other` lies entirely inside `self`.
    pub fn contains(&self, other: &BoxPx) -> bool {
        other.x0 >= self.x0 && other.y0 >= self.y0 && other.x1 <= self.x1 && other.y1 <= self.y1
    }
}

/// Dense binary mask, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitGrid {
    height: u32,
    width: u32,
    bits: Vec<bool>,
}

impl BitGrid {
    pub fn new(height: u32, width: u32) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height as usize * width as usize],
        }
    }

    pub fn from_fn(height: u32, width: u32, mut f: impl FnMut(u32, u32) -> bool) -> Self {
        let mut bits = Vec::with_capacity(height as usize * width as usize);
        for row in 0..height {
            for col in 0..width {
                bits.push(f(row, col));
            }
        }
        Self {
            height,
            width,
            bits,
        }
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    #[inline]
    pub fn get(&self, row: u32, col: u32) -> bool {
        self.bits[row as usize * self.width as usize + col as usize]
    }

    #[inline]
    pub fn set(&mut self, row: u32, col: u32, value: bool) {
        self.bits[row as usize * self.width as usize + col as usize] = value;
    }

    pub fn fill_box(&mut self, b: &BoxPx, value: bool) {
        for row in b.y0..b.y1.min(self.height) {
            for col in b.x0..b.x1.min(self.width) {
                self.set(row, col, value);
            }
        }
    }

    pub fn count_ones(&self) -> u64 {
        self.bits.iter().filter(|&&b| b).count() as u64
    }

    /// Tight bounding box of the foreground, `None` when the grid is empty.
    pub fn tight_bbox(&self) -> Option<BoxPx> {
        let mut b: Option<BoxPx> = None;
        for row in 0..self.height {
            for col in 0..self.width {
                if self.get(row, col) {
                    b = Some(match b {
                        None => BoxPx::new(col, row, col + 1, row + 1),
                        Some(b) => BoxPx::new(
                            b.x0.min(col),
                            b.y0.min(row),
                            b.x1.max(col + 1),
                            b.y1.max(row + 1),
                        ),
                    });
                }
            }
        }
        b
    }

    pub fn union_with(&mut self, other: &BitGrid) {
        assert_eq!((self.height, self.width), (other.height, other.width));
        for (a, b) in self.bits.iter_mut().zip(&other.bits) {
            *a |= *b;
        }
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.bits
    }
}

/// Uncompressed column-major run-length mask in canonical form.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RleRepr", into = "RleRepr")]
pub struct MaskRle {
    height: u32,
    width: u32,
    counts: Vec<u32>,
}

#[derive(Serialize, Deserialize)]
struct RleRepr {
    size: [u32; 2],
    counts: Vec<u32>,
}

impl TryFrom<RleRepr> for MaskRle {
    type Error = CodecError;

    fn try_from(r: RleRepr) -> Result<Self, Self::Error> {
        MaskRle::new(r.size[0], r.size[1], r.counts)
    }
}

impl From<MaskRle> for RleRepr {
    fn from(m: MaskRle) -> Self {
        RleRepr {
            size: [m.height, m.width],
            counts: m.counts,
        }
    }
}

impl MaskRle {
    /// Validates that the runs cover the mask exactly and are canonical.
    pub fn new(height: u32, width: u32, counts: Vec<u32>) -> Result<Self, CodecError> {
        if counts.is_empty() {
            return Err(CodecError::EmptyCounts);
        }
        let expected = height as u64 * width as u64;
        let actual: u64 = counts.iter().map(|&c| c as u64).sum();
        if actual != expected {
            return Err(CodecError::SumMismatch {
                height,
                width,
                expected,
                actual,
            });
        }
        if let Some(index) = counts.iter().skip(1).position(|&c| c == 0) {
            return Err(CodecError::InteriorZeroRun { index: index + 1 });
        }
        Ok(Self {
            height,
            width,
            counts,
        })
    }

    /// Accepts any run list with the right total (interior zero runs included)
    /// and folds it into canonical form.
    pub fn from_raw_counts(height: u32, width: u32, counts: &[u32]) -> Result<Self, CodecError> {
        let expected = height as u64 * width as u64;
        let actual: u64 = counts.iter().map(|&c| c as u64).sum();
        if actual != expected {
            return Err(CodecError::SumMismatch {
                height,
                width,
                expected,
                actual,
            });
        }
        let mut out: Vec<u32> = vec![0];
        let mut current_fg = false;
        for (i, &c) in counts.iter().enumerate() {
            if c == 0 {
                continue;
            }
            let fg = i % 2 == 1;
            if fg == current_fg {
                *out.last_mut().expect("non-empty") += c;
            } else {
                out.push(c);
                current_fg = fg;
            }
        }
        Ok(Self {
            height,
            width,
            counts: out,
        })
    }

    pub fn empty(height: u32, width: u32) -> Self {
        Self {
            height,
            width,
            counts: vec![height * width],
        }
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    /// `(height, width)`
    pub fn size(&self) -> (u32, u32) {
        (self.height, self.width)
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn area(&self) -> u64 {
        self.counts.iter().skip(1).step_by(2).map(|&c| c as u64).sum()
    }

    pub fn decode(&self) -> BitGrid {
        decode_rle(self)
    }

    /// Tight bounding box computed directly from the runs.
    pub fn bbox(&self) -> Option<BoxPx> {
        let h = self.height as u64;
        let mut pos = 0u64;
        let mut b: Option<BoxPx> = None;
        for (i, &c) in self.counts.iter().enumerate() {
            let c = c as u64;
            if i % 2 == 1 && c > 0 {
                let first = pos;
                let last = pos + c - 1;
                let (x_first, y_first) = ((first / h) as u32, (first % h) as u32);
                let (x_last, y_last) = ((last / h) as u32, (last % h) as u32);
                let (y0, y1) = if x_first == x_last {
                    (y_first, y_last + 1)
                } else {
                    (0, self.height)
                };
                let run = BoxPx::new(x_first, y0, x_last + 1, y1);
                b = Some(match b {
                    None => run,
                    Some(b) => BoxPx::new(
                        b.x0.min(run.x0),
                        b.y0.min(run.y0),
                        b.x1.max(run.x1),
                        b.y1.max(run.y1),
                    ),
                });
            }
            pos += c;
        }
        b
    }

    /// Iterates `(start, len)` of foreground runs in column-major index space.
    pub fn foreground_runs(&self) -> impl Iterator<Item = (u64, u64)> + '_ {
        let mut pos = 0u64;
        self.counts.iter().enumerate().filter_map(move |(i, &c)| {
            let start = pos;
            pos += c as u64;
            (i % 2 == 1).then_some((start, c as u64))
        })
    }
}

/// Expands runs column-major; even-index runs are background.
pub fn decode_rle(mask: &MaskRle) -> BitGrid {
    let mut grid = BitGrid::new(mask.height, mask.width);
    let h = mask.height as u64;
    for (start, len) in mask.foreground_runs() {
        for idx in start..start + len {
            let col = (idx / h) as u32;
            let row = (idx % h) as u32;
            grid.set(row, col, true);
        }
    }
    grid
}

pub fn encode_rle(grid: &BitGrid) -> MaskRle {
    let mut counts = Vec::new();
    let mut current = false;
    let mut run = 0u32;
    for col in 0..grid.width {
        for row in 0..grid.height {
            let v = grid.get(row, col);
            if v != current {
                counts.push(run);
                run = 0;
                current = v;
            }
            run += 1;
        }
    }
    counts.push(run);
    MaskRle {
        height: grid.height,
        width: grid.width,
        counts,
    }
}

/// Decodes the LEB128-like compressed count string used by COCO tooling.
pub fn decode_compressed_counts(s: &str) -> Result<Vec<u32>, CodecError> {
    let bytes = s.as_bytes();
    let mut counts: Vec<i64> = Vec::new();
    let mut p = 0usize;
    while p < bytes.len() {
        let start = p;
        let mut x: i64 = 0;
        let mut k = 0u32;
        loop {
            let Some(&raw) = bytes.get(p) else {
                return Err(CodecError::CompressedString { offset: start });
            };
            if !(48..48 + 64).contains(&raw) || k > 12 {
                return Err(CodecError::CompressedString { offset: p });
            }
            let c = (raw - 48) as i64;
            x |= (c & 0x1f) << (5 * k);
            let more = c & 0x20 != 0;
            p += 1;
            k += 1;
            if !more {
                if c & 0x10 != 0 {
                    x |= -1i64 << (5 * k);
                }
                break;
            }
        }
        if counts.len() > 2 {
            x += counts[counts.len() - 2];
        }
        if x < 0 || x > u32::MAX as i64 {
            return Err(CodecError::CompressedString { offset: start });
        }
        counts.push(x);
    }
    Ok(counts.into_iter().map(|c| c as u32).collect())
}
