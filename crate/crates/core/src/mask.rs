//! Dense binary masks and COCO-compatible run-length encoding.
//!
//! Masks are stored bit-packed in column-major (Fortran) order, the same pixel
//! order COCO uses for its run-length encoding, so encoding is a single linear
//! scan. Pixel `(row, col)` lives at linear index `col * height + row`.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MaskError {
    #[error("mask dimensions must be at least 1x1, got {height}x{width}")]
    ZeroDimension { height: u32, width: u32 },
    #[error("mask dimension mismatch: {left_h}x{left_w} vs {right_h}x{right_w}")]
    DimensionMismatch {
        left_h: u32,
        left_w: u32,
        right_h: u32,
        right_w: u32,
    },
    #[error("malformed RLE: {0}")]
    MalformedRle(String),
    #[error("malformed RLE string at byte {position}: {reason}")]
    MalformedString { position: usize, reason: String },
    #[error("polygon needs at least 3 vertices, got {0}")]
    TooFewVertices(usize),
    #[error("pixel buffer has {got} entries, expected {expected}")]
    BufferLength { got: usize, expected: usize },
}

pub type Result<T> = std::result::Result<T, MaskError>;

const WORD: usize = 64;

/// Pixel occupancy of one instance.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: u32,
    width: u32,
    words: Vec<u64>,
    area: u64,
}

impl std::fmt::Debug for BinaryMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BinaryMask")
            .field("height", &self.height)
            .field("width", &self.width)
            .field("area", &self.area)
            .finish()
    }
}

fn check_dims(height: u32, width: u32) -> Result<()> {
    if height == 0 || width == 0 {
        return Err(MaskError::ZeroDimension { height, width });
    }
    Ok(())
}

impl BinaryMask {
    pub fn empty(height: u32, width: u32) -> Result<Self> {
        check_dims(height, width)?;
        let n = height as usize * width as usize;
        Ok(Self {
            height,
            width,
            words: vec![0; n.div_ceil(WORD)],
            area: 0,
        })
    }

    pub fn from_fn(height: u32, width: u32, mut f: impl FnMut(u32, u32) -> bool) -> Result<Self> {
        let mut m = Self::empty(height, width)?;
        for col in 0..width {
            for row in 0..height {
                if f(row, col) {
                    m.set(row, col, true);
                }
            }
        }
        Ok(m)
    }

    /// Builds a mask from a row-major buffer where any nonzero byte is foreground.
    pub fn from_row_major(height: u32, width: u32, pixels: &[u8]) -> Result<Self> {
        let expected = height as usize * width as usize;
        if pixels.len() != expected {
            return Err(MaskError::BufferLength {
                got: pixels.len(),
                expected,
            });
        }
        Self::from_fn(height, width, |r, c| {
            pixels[r as usize * width as usize + c as usize] != 0
        })
    }

    /// Parses rows of `'0'`/`'1'` characters. Handy for fixtures.
    pub fn from_rows(rows: &[&str]) -> Result<Self> {
        let height = rows.len() as u32;
        let width = rows.first().map_or(0, |r| r.len()) as u32;
        let mut buf = Vec::with_capacity(height as usize * width as usize);
        for r in rows {
            if r.len() as u32 != width {
                return Err(MaskError::BufferLength {
                    got: r.len(),
                    expected: width as usize,
                });
            }
            buf.extend(r.bytes().map(|b| u8::from(b == b'1')));
        }
        Self::from_row_major(height, width, &buf)
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.height, self.width)
    }

    pub fn num_pixels(&self) -> usize {
        self.height as usize * self.width as usize
    }

    pub fn area(&self) -> u64 {
        self.area
    }

    pub fn is_empty(&self) -> bool {
        self.area == 0
    }

    #[inline]
    fn index(&self, row: u32, col: u32) -> usize {
        debug_assert!(row < self.height && col < self.width);
        col as usize * self.height as usize + row as usize
    }

    #[inline]
    fn bit(&self, idx: usize) -> bool {
        self.words[idx / WORD] >> (idx % WORD) & 1 == 1
    }

    pub fn get(&self, row: u32, col: u32) -> bool {
        self.bit(self.index(row, col))
    }

    pub fn set(&mut self, row: u32, col: u32, value: bool) {
        let idx = self.index(row, col);
        let (w, b) = (idx / WORD, idx % WORD);
        let was = self.words[w] >> b & 1 == 1;
        if was != value {
            self.words[w] ^= 1 << b;
            if value {
                self.area += 1;
            } else {
                self.area -= 1;
            }
        }
    }

    /// Sets the column-major linear range `[start, end)`.
    fn fill_range(&mut self, start: usize, end: usize) {
        let mut i = start;
        while i < end {
            let (w, b) = (i / WORD, i % WORD);
            let span = (WORD - b).min(end - i);
            let bits = if span == WORD {
                !0u64
            } else {
                ((1u64 << span) - 1) << b
            };
            self.words[w] |= bits;
            i += span;
        }
    }

    fn recount(&mut self) {
        self.area = self.words.iter().map(|w| w.count_ones() as u64).sum();
    }

    fn same_dims(&self, other: &Self) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(MaskError::DimensionMismatch {
                left_h: self.height,
                left_w: self.width,
                right_h: other.height,
                right_w: other.width,
            });
        }
        Ok(())
    }

    pub(crate) fn intersection_unchecked(&self, other: &Self) -> u64 {
        debug_assert_eq!(self.dims(), other.dims());
        self.words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a & b).count_ones() as u64)
            .sum()
    }

    pub fn intersection_area(&self, other: &Self) -> Result<u64> {
        self.same_dims(other)?;
        Ok(self.intersection_unchecked(other))
    }

    pub(crate) fn iou_unchecked(&self, other: &Self) -> f64 {
        let inter = self.intersection_unchecked(other);
        let union = self.area + other.area - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// Intersection over union. Two empty masks have IoU 0.
    pub fn iou(&self, other: &Self) -> Result<f64> {
        self.same_dims(other)?;
        Ok(self.iou_unchecked(other))
    }

    pub(crate) fn precision_unchecked(&self, other: &Self) -> f64 {
        if self.area == 0 {
            return 0.0;
        }
        self.intersection_unchecked(other) as f64 / self.area as f64
    }

    /// Fraction of this mask's pixels that are also set in `other`; 0 for an empty mask.
    pub fn precision_against(&self, other: &Self) -> Result<f64> {
        self.same_dims(other)?;
        Ok(self.precision_unchecked(other))
    }

    pub(crate) fn subtract_in_place_unchecked(&mut self, other: &Self) {
        debug_assert_eq!(self.dims(), other.dims());
        for (a, b) in self.words.iter_mut().zip(&other.words) {
            *a &= !b;
        }
        self.recount();
    }

    /// Pixels set in `self` and not in `other`.
    pub fn subtract(&self, other: &Self) -> Result<Self> {
        self.same_dims(other)?;
        let mut out = self.clone();
        out.subtract_in_place_unchecked(other);
        Ok(out)
    }

    pub fn union_in_place(&mut self, other: &Self) -> Result<()> {
        self.same_dims(other)?;
        for (a, b) in self.words.iter_mut().zip(&other.words) {
            *a |= b;
        }
        self.recount();
        Ok(())
    }

    pub fn union(&self, other: &Self) -> Result<Self> {
        let mut out = self.clone();
        out.union_in_place(other)?;
        Ok(out)
    }

    /// Translates the mask by `(dx, dy)` pixels; pixels pushed outside are dropped.
    pub fn shifted(&self, dx: i32, dy: i32) -> Self {
        let (h, w) = (self.height as i64, self.width as i64);
        let mut out = Self::empty(self.height, self.width).expect("dims already valid");
        for col in 0..w {
            let nc = col + dx as i64;
            if nc < 0 || nc >= w {
                continue;
            }
            for row in 0..h {
                let nr = row + dy as i64;
                if nr < 0 || nr >= h {
                    continue;
                }
                if self.get(row as u32, col as u32) {
                    out.set(nr as u32, nc as u32, true);
                }
            }
        }
        out
    }

    /// Tight bounding box `[x, y, w, h]` in pixels, or zeros for an empty mask.
    pub fn bbox(&self) -> [f64; 4] {
        if self.is_empty() {
            return [0.0; 4];
        }
        let (mut r0, mut r1, mut c0, mut c1) = (u32::MAX, 0, u32::MAX, 0);
        for col in 0..self.width {
            for row in 0..self.height {
                if self.get(row, col) {
                    r0 = r0.min(row);
                    r1 = r1.max(row);
                    c0 = c0.min(col);
                    c1 = c1.max(col);
                }
            }
        }
        [
            c0 as f64,
            r0 as f64,
            (c1 - c0 + 1) as f64,
            (r1 - r0 + 1) as f64,
        ]
    }

    /// Position of the first pixel at or after `from` whose value differs from `value`.
    fn next_change(&self, from: usize, value: bool) -> usize {
        let n = self.num_pixels();
        let flip = if value { !0u64 } else { 0 };
        let mut i = from;
        while i < n {
            let (w, b) = (i / WORD, i % WORD);
            let diff = (self.words[w] ^ flip) >> b;
            if diff != 0 {
                return (i + diff.trailing_zeros() as usize).min(n);
            }
            i += WORD - b;
        }
        n
    }
}

/// Uncompressed COCO run-length encoding.
///
/// Runs alternate background/foreground in column-major order and always
/// start with a (possibly empty) background run.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RleMask {
    height: u32,
    width: u32,
    counts: Vec<u32>,
}

impl RleMask {
    pub fn new(height: u32, width: u32, counts: Vec<u32>) -> Result<Self> {
        check_dims(height, width)?;
        let total: u64 = counts.iter().map(|&c| c as u64).sum();
        let expected = height as u64 * width as u64;
        if total != expected {
            return Err(MaskError::MalformedRle(format!(
                "run lengths sum to {total}, expected {expected} for {height}x{width}"
            )));
        }
        Ok(Self {
            height,
            width,
            counts,
        })
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn area(&self) -> u64 {
        self.counts
            .iter()
            .skip(1)
            .step_by(2)
            .map(|&c| c as u64)
            .sum()
    }
}

pub fn encode(mask: &BinaryMask) -> RleMask {
    let n = mask.num_pixels();
    let mut counts = Vec::new();
    let mut pos = 0;
    let mut value = false;
    loop {
        let next = mask.next_change(pos, value);
        counts.push((next - pos) as u32);
        if next >= n {
            break;
        }
        pos = next;
        value = !value;
    }
    RleMask {
        height: mask.height,
        width: mask.width,
        counts,
    }
}

pub fn decode(rle: &RleMask) -> BinaryMask {
    let mut mask = BinaryMask::empty(rle.height, rle.width).expect("RleMask dims are validated");
    let mut pos = 0usize;
    for (i, &c) in rle.counts.iter().enumerate() {
        let end = pos + c as usize;
        if i % 2 == 1 {
            mask.fill_range(pos, end);
        }
        pos = end;
    }
    mask.recount();
    mask
}

impl From<&BinaryMask> for RleMask {
    fn from(mask: &BinaryMask) -> Self {
        encode(mask)
    }
}

impl From<&RleMask> for BinaryMask {
    fn from(rle: &RleMask) -> Self {
        decode(rle)
    }
}

/// Compresses run lengths into the COCO `"counts"` string.
///
/// Each value is written in 5-bit groups, low bits first, with bit 5 as the
/// continuation flag and an offset of 48. From the third run on, the stored
/// value is the difference from the run two positions earlier.
pub fn compress(rle: &RleMask) -> String {
    let mut s = String::with_capacity(rle.counts.len() * 2);
    for (i, &c) in rle.counts.iter().enumerate() {
        let mut x = c as i64;
        if i > 2 {
            x -= rle.counts[i - 2] as i64;
        }
        loop {
            let mut ch = (x & 0x1f) as u8;
            x >>= 5;
            let more = if ch & 0x10 != 0 { x != -1 } else { x != 0 };
            if more {
                ch |= 0x20;
            }
            s.push((ch + 48) as char);
            if !more {
                break;
            }
        }
    }
    s
}

pub fn decompress(s: &str, height: u32, width: u32) -> Result<RleMask> {
    let bytes = s.as_bytes();
    let mut counts: Vec<u32> = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let start = i;
        let mut x: i64 = 0;
        let mut shift = 0u32;
        loop {
            let Some(&b) = bytes.get(i) else {
                return Err(MaskError::MalformedString {
                    position: start,
                    reason: "truncated value (continuation bit set on last character)".into(),
                });
            };
            if !(48..=111).contains(&b) {
                return Err(MaskError::MalformedString {
                    position: i,
                    reason: format!("character {:?} outside the range '0'..='o'", b as char),
                });
            }
            if shift > 58 {
                return Err(MaskError::MalformedString {
                    position: i,
                    reason: "value overflows 64 bits".into(),
                });
            }
            let c = (b - 48) as i64;
            i += 1;
            x |= (c & 0x1f) << shift;
            shift += 5;
            if c & 0x20 == 0 {
                if c & 0x10 != 0 {
                    x |= -1i64 << shift;
                }
                break;
            }
        }
        if counts.len() > 2 {
            x += counts[counts.len() - 2] as i64;
        }
        let value = u32::try_from(x).map_err(|_| MaskError::MalformedString {
            position: start,
            reason: format!("run length {x} out of range"),
        })?;
        counts.push(value);
    }
    RleMask::new(height, width, counts)
}

/// Rasterizes a closed polygon with the even-odd rule, sampling pixel centers
/// at `(col + 0.5, row + 0.5)`. Vertices are `(x, y)` in pixel coordinates.
pub fn rasterize_polygon(vertices: &[(f64, f64)], height: u32, width: u32) -> Result<BinaryMask> {
    if vertices.len() < 3 {
        return Err(MaskError::TooFewVertices(vertices.len()));
    }
    let mut mask = BinaryMask::empty(height, width)?;
    let mut xs = Vec::new();
    for row in 0..height {
        let y = row as f64 + 0.5;
        xs.clear();
        for k in 0..vertices.len() {
            let (x0, y0) = vertices[k];
            let (x1, y1) = vertices[(k + 1) % vertices.len()];
            // half-open in y so shared vertices are counted once
            if (y0 <= y && y < y1) || (y1 <= y && y < y0) {
                xs.push(x0 + (y - y0) * (x1 - x0) / (y1 - y0));
            }
        }
        xs.sort_by(f64::total_cmp);
        for pair in xs.chunks_exact(2) {
            let first = (pair[0] - 0.5).ceil().max(0.0);
            let last = ((pair[1] - 0.5).ceil() - 1.0).min(width as f64 - 1.0);
            if last < first {
                continue;
            }
            for col in first as u32..=last as u32 {
                mask.set(row, col, true);
            }
        }
    }
    Ok(mask)
}
