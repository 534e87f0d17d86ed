//! Binary masks, square-window erosion/dilation, the open-close denoising
//! filter and 8-connected component labelling.
//!
//! Pixels outside the canvas are background for both erosion and dilation.
//! [`close`] is evaluated on a padded canvas so that it behaves as closing on
//! the unbounded plane restricted to the canvas; this keeps it extensive and
//! idempotent right up to the border.

use std::io::{self, BufReader, Read, Write};

use serde::{Deserialize, Serialize};

use crate::raster::{parse_pnm_number, read_pnm_token, RasterError};

/// Row-major boolean grid; `true` is foreground.
#[derive(Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl std::fmt::Debug for BinaryMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BinaryMask")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("foreground", &self.count())
            .finish()
    }
}

impl BinaryMask {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn filled(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![true; width * height],
        }
    }

    pub fn from_bits(width: usize, height: usize, bits: Vec<bool>) -> Self {
        assert_eq!(bits.len(), width * height, "mask size mismatch");
        Self {
            width,
            height,
            bits,
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Self::from_bits(width, height, bits)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    /// Out-of-canvas coordinates read as background.
    #[inline]
    pub fn get_signed(&self, x: isize, y: isize) -> bool {
        x >= 0
            && y >= 0
            && (x as usize) < self.width
            && (y as usize) < self.height
            && self.bits[y as usize * self.width + x as usize]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.bits[y * self.width + x] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn complement(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }

    /// `self ⊆ other`
    pub fn is_subset_of(&self, other: &Self) -> bool {
        self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    /// Intersection-over-union; two empty masks score 1.
    pub fn iou(&self, other: &Self) -> f64 {
        assert_eq!((self.width, self.height), (other.width, other.height));
        let (mut inter, mut union) = (0usize, 0usize);
        for (&a, &b) in self.bits.iter().zip(&other.bits) {
            inter += usize::from(a && b);
            union += usize::from(a || b);
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }

    pub fn crop(&self, bbox: BBox) -> Self {
        Self::from_fn(bbox.width(), bbox.height(), |x, y| {
            self.get(bbox.x0 + x, bbox.y0 + y)
        })
    }

    /// Embeds the mask at `(offset, offset)` in a larger background canvas.
    fn padded(&self, pad: usize) -> Self {
        let mut out = Self::new(self.width + 2 * pad, self.height + 2 * pad);
        for y in 0..self.height {
            let src = &self.bits[y * self.width..(y + 1) * self.width];
            let start = (y + pad) * out.width + pad;
            out.bits[start..start + self.width].copy_from_slice(src);
        }
        out
    }

    /// Binary PBM (`P4`), rows padded to whole bytes, MSB first.
    pub fn write_pbm<W: Write>(&self, mut out: W) -> io::Result<()> {
        write!(out, "P4\n{} {}\n", self.width, self.height)?;
        let row_bytes = self.width.div_ceil(8);
        let mut buf = vec![0u8; row_bytes * self.height];
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    buf[y * row_bytes + x / 8] |= 0x80 >> (x % 8);
                }
            }
        }
        out.write_all(&buf)
    }

    pub fn read_pbm<R: Read>(input: R) -> Result<Self, RasterError> {
        let mut reader = BufReader::new(input);
        let magic = read_pnm_token(&mut reader)?;
        if magic != "P4" {
            return Err(RasterError::Format(format!("expected P4, found {magic:?}")));
        }
        let width = parse_pnm_number(&mut reader)?;
        let height = parse_pnm_number(&mut reader)?;
        let row_bytes = width.div_ceil(8);
        let mut raw = vec![0u8; row_bytes * height];
        reader
            .read_exact(&mut raw)
            .map_err(|e| RasterError::Format(format!("truncated PBM data: {e}")))?;
        Ok(Self::from_fn(width, height, |x, y| {
            raw[y * row_bytes + x / 8] & (0x80 >> (x % 8)) != 0
        }))
    }
}

/// Inclusive pixel rectangle `[x0, x1] x [y0, y1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    pub fn width(&self) -> usize {
        self.x1 - self.x0 + 1
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0 + 1
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn union(&self, other: &BBox) -> BBox {
        BBox {
            x0: self.x0.min(other.x0),
            y0: self.y0.min(other.y0),
            x1: self.x1.max(other.x1),
            y1: self.y1.max(other.y1),
        }
    }
}

/// Odd-sided boolean window with its origin at the center cell.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructuringElement {
    side: usize,
    window: Vec<bool>,
}

impl StructuringElement {
    pub fn square(side: usize) -> Self {
        assert!(side % 2 == 1, "structuring element side must be odd");
        Self {
            side,
            window: vec![true; side * side],
        }
    }

    pub fn from_window(side: usize, window: Vec<bool>) -> Self {
        assert!(side % 2 == 1, "structuring element side must be odd");
        assert_eq!(window.len(), side * side);
        assert!(window[side * side / 2], "origin must be part of the element");
        Self { side, window }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn radius(&self) -> usize {
        self.side / 2
    }

    fn is_full(&self) -> bool {
        self.window.iter().all(|&b| b)
    }

    fn offsets(&self) -> impl Iterator<Item = (isize, isize)> + '_ {
        let r = self.radius() as isize;
        self.window.iter().enumerate().filter(|(_, &b)| b).map(move |(i, _)| {
            (
                (i % self.side) as isize - r,
                (i / self.side) as isize - r,
            )
        })
    }
}

impl Default for StructuringElement {
    fn default() -> Self {
        Self::square(5)
    }
}

/// One separable pass of a full square window. `want_all` selects erosion
/// (every in-window pixel set) versus dilation (any pixel set).
fn square_pass(mask: &BinaryMask, radius: usize, horizontal: bool, want_all: bool) -> BinaryMask {
    let (w, h) = (mask.width, mask.height);
    let mut out = BinaryMask::new(w, h);
    let (lines, len) = if horizontal { (h, w) } else { (w, h) };
    let idx = |line: usize, i: usize| {
        if horizontal {
            line * w + i
        } else {
            i * w + line
        }
    };
    let window = 2 * radius + 1;
    for line in 0..lines {
        // Running count of foreground pixels inside [i - r, i + r].
        let mut count = 0usize;
        for i in 0..radius.min(len) {
            count += usize::from(mask.bits[idx(line, i)]);
        }
        for i in 0..len {
            let enter = i + radius;
            if enter < len {
                count += usize::from(mask.bits[idx(line, enter)]);
            }
            if i > radius {
                count -= usize::from(mask.bits[idx(line, i - radius - 1)]);
            }
            out.bits[idx(line, i)] = if want_all {
                // Any window cell outside the canvas is background.
                i >= radius && i + radius < len && count == window
            } else {
                count > 0
            };
        }
    }
    out
}

pub fn erode(mask: &BinaryMask, se: &StructuringElement) -> BinaryMask {
    if se.is_full() {
        let r = se.radius();
        let tmp = square_pass(mask, r, true, true);
        return square_pass(&tmp, r, false, true);
    }
    let offsets: Vec<_> = se.offsets().collect();
    BinaryMask::from_fn(mask.width, mask.height, |x, y| {
        offsets
            .iter()
            .all(|&(dx, dy)| mask.get_signed(x as isize + dx, y as isize + dy))
    })
}

pub fn dilate(mask: &BinaryMask, se: &StructuringElement) -> BinaryMask {
    if se.is_full() {
        let r = se.radius();
        let tmp = square_pass(mask, r, true, false);
        return square_pass(&tmp, r, false, false);
    }
    // Dilation uses the reflected element.
    let offsets: Vec<_> = se.offsets().collect();
    BinaryMask::from_fn(mask.width, mask.height, |x, y| {
        offsets
            .iter()
            .any(|&(dx, dy)| mask.get_signed(x as isize - dx, y as isize - dy))
    })
}

/// Erosion followed by dilation.
pub fn open(mask: &BinaryMask, se: &StructuringElement) -> BinaryMask {
    dilate(&erode(mask, se), se)
}

/// Dilation followed by erosion, evaluated with an `se.radius()` margin of
/// background around the canvas.
pub fn close(mask: &BinaryMask, se: &StructuringElement) -> BinaryMask {
    let pad = se.radius();
    let closed = erode(&dilate(&mask.padded(pad), se), se);
    closed.crop(BBox {
        x0: pad,
        y0: pad,
        x1: pad + mask.width - 1,
        y1: pad + mask.height - 1,
    })
}

/// The denoising filter: `close(open(mask))`.
pub fn open_close(mask: &BinaryMask, se: &StructuringElement) -> BinaryMask {
    close(&open(mask, se), se)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Connectivity {
    Four,
    Eight,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentStats {
    /// Label in the component map, starting at 1.
    pub id: u32,
    pub area: usize,
    pub bbox: BBox,
    pub centroid: (f64, f64),
    /// `area / bbox.area()`
    pub fill_ratio: f64,
}

/// Component labels (0 = background) plus per-component statistics. Labels
/// are numbered in raster order of each component's first pixel.
#[derive(Debug, Clone)]
pub struct ComponentMap {
    width: usize,
    height: usize,
    labels: Vec<u32>,
    components: Vec<ComponentStats>,
}

impl ComponentMap {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn label(&self, x: usize, y: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn components(&self) -> &[ComponentStats] {
        &self.components
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn get(&self, id: u32) -> Option<&ComponentStats> {
        id.checked_sub(1)
            .and_then(|i| self.components.get(i as usize))
    }

    /// Mask holding only the components accepted by `keep`.
    pub fn mask_where(&self, keep: impl Fn(&ComponentStats) -> bool) -> BinaryMask {
        let kept: Vec<bool> = std::iter::once(false)
            .chain(self.components.iter().map(&keep))
            .collect();
        BinaryMask::from_bits(
            self.width,
            self.height,
            self.labels.iter().map(|&l| kept[l as usize]).collect(),
        )
    }
}

fn find(parent: &mut [u32], mut x: u32) -> u32 {
    while parent[x as usize] != x {
        let p = parent[x as usize];
        parent[x as usize] = parent[p as usize];
        x = p;
    }
    x
}

fn union(parent: &mut [u32], a: u32, b: u32) {
    let (ra, rb) = (find(parent, a), find(parent, b));
    if ra != rb {
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        parent[hi as usize] = lo;
    }
}

/// Two-pass union-find labelling.
pub fn connected_components(mask: &BinaryMask, connectivity: Connectivity) -> ComponentMap {
    let (w, h) = (mask.width, mask.height);
    let mut labels = vec![0u32; w * h];
    let mut parent: Vec<u32> = vec![0];

    let neighbours: &[(isize, isize)] = match connectivity {
        Connectivity::Four => &[(-1, 0), (0, -1)],
        Connectivity::Eight => &[(-1, 0), (-1, -1), (0, -1), (1, -1)],
    };

    for y in 0..h {
        for x in 0..w {
            if !mask.get(x, y) {
                continue;
            }
            let mut current = 0u32;
            for &(dx, dy) in neighbours {
                let (nx, ny) = (x as isize + dx, y as isize + dy);
                if nx < 0 || ny < 0 || nx as usize >= w {
                    continue;
                }
                let l = labels[ny as usize * w + nx as usize];
                if l == 0 {
                    continue;
                }
                if current == 0 {
                    current = l;
                } else if l != current {
                    union(&mut parent, current, l);
                }
            }
            if current == 0 {
                current = parent.len() as u32;
                parent.push(current);
            }
            labels[y * w + x] = current;
        }
    }

    // Compact roots to 1..=n in order of first appearance.
    let mut compact = vec![0u32; parent.len()];
    let mut next = 0u32;
    for l in labels.iter_mut() {
        if *l == 0 {
            continue;
        }
        let root = find(&mut parent, *l) as usize;
        if compact[root] == 0 {
            next += 1;
            compact[root] = next;
        }
        *l = compact[root];
    }

    let n = next as usize;
    let mut area = vec![0usize; n];
    let mut sum_x = vec![0f64; n];
    let mut sum_y = vec![0f64; n];
    let mut boxes = vec![
        BBox {
            x0: usize::MAX,
            y0: usize::MAX,
            x1: 0,
            y1: 0
        };
        n
    ];
    for y in 0..h {
        for x in 0..w {
            let l = labels[y * w + x];
            if l == 0 {
                continue;
            }
            let i = (l - 1) as usize;
            area[i] += 1;
            sum_x[i] += x as f64;
            sum_y[i] += y as f64;
            let b = &mut boxes[i];
            b.x0 = b.x0.min(x);
            b.y0 = b.y0.min(y);
            b.x1 = b.x1.max(x);
            b.y1 = b.y1.max(y);
        }
    }
    let components = (0..n)
        .map(|i| ComponentStats {
            id: i as u32 + 1,
            area: area[i],
            bbox: boxes[i],
            centroid: (sum_x[i] / area[i] as f64, sum_y[i] / area[i] as f64),
            fill_ratio: area[i] as f64 / boxes[i].area() as f64,
        })
        .collect();

    ComponentMap {
        width: w,
        height: h,
        labels,
        components,
    }
}
