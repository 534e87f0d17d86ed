//! Center-disc detection, moment-based orientation and ROI cropping.
//!
//! Coordinates are pixel centers with `y` pointing down. An orientation angle
//! θ means the pattern's long axis points along `(cos θ, sin θ)` in image
//! coordinates, so a positive angle is visually clockwise.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::morphology::{connected_components, BBox, BinaryMask, ComponentMap, Connectivity};
use crate::raster::RasterImage;

/// Components below this fill ratio are treated as ring arcs.
pub const DISC_FILL_RATIO: f64 = 0.7;
/// Components smaller than this fraction of the largest are dropped before cropping.
pub const SPECK_FRACTION: f64 = 0.001;
pub const CROP_MARGIN: usize = 2;
const DEGENERATE_TOL: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("mask has no foreground")]
    EmptyMask,
    #[error("no solid component passes the center-disc fill gate")]
    NoCenterDisc,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CenterDisc {
    pub id: u32,
    pub centroid: (f64, f64),
}

/// The solid component nearest the bottom-center of the global foreground box.
pub fn find_center_disc(components: &ComponentMap) -> Result<CenterDisc, GeometryError> {
    let all = components.components();
    let Some(first) = all.first() else {
        return Err(GeometryError::NoCenterDisc);
    };
    let global = all.iter().fold(first.bbox, |b, c| b.union(&c.bbox));
    let anchor = ((global.x0 + global.x1) as f64 / 2.0, global.y1 as f64);
    all.iter()
        .filter(|c| c.fill_ratio >= DISC_FILL_RATIO)
        .map(|c| {
            let d = (c.centroid.0 - anchor.0).hypot(c.centroid.1 - anchor.1);
            (d, c)
        })
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, c)| CenterDisc {
            id: c.id,
            centroid: c.centroid,
        })
        .ok_or(GeometryError::NoCenterDisc)
}

/// Drop components smaller than [`SPECK_FRACTION`] of the largest one.
pub fn remove_specks(mask: &BinaryMask) -> BinaryMask {
    let cc = connected_components(mask, Connectivity::Eight);
    let largest = cc.components().iter().map(|c| c.area).max().unwrap_or(0);
    let min_area = SPECK_FRACTION * largest as f64;
    cc.mask_where(|c| c.area as f64 >= min_area)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrientationEstimate {
    /// Degrees in (−90, 90].
    pub angle: f64,
    /// Second central moments `(μ20 − μ02, μ11)`.
    pub moments: (f64, f64),
    pub centroid: (f64, f64),
    pub degenerate: bool,
}

pub fn estimate_orientation(mask: &BinaryMask) -> Result<OrientationEstimate, GeometryError> {
    let (mut n, mut sx, mut sy) = (0usize, 0.0, 0.0);
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.get(x, y) {
                n += 1;
                sx += x as f64;
                sy += y as f64;
            }
        }
    }
    if n == 0 {
        return Err(GeometryError::EmptyMask);
    }
    let (cx, cy) = (sx / n as f64, sy / n as f64);
    let (mut m20, mut m02, mut m11) = (0.0, 0.0, 0.0);
    for y in 0..mask.height() {
        let dy = y as f64 - cy;
        for x in 0..mask.width() {
            if mask.get(x, y) {
                let dx = x as f64 - cx;
                m20 += dx * dx;
                m02 += dy * dy;
                m11 += dx * dy;
            }
        }
    }
    let diff = m20 - m02;
    let tol = DEGENERATE_TOL * (n as f64).powi(2);
    let degenerate = diff.abs() < tol && m11.abs() < tol;
    let angle = if degenerate {
        0.0
    } else {
        let a = 0.5 * (2.0 * m11).atan2(diff).to_degrees();
        // atan2 returns (−180, 180]; keep the half-open range at −90.
        if a <= -90.0 {
            a + 180.0
        } else {
            a
        }
    };
    Ok(OrientationEstimate {
        angle,
        moments: (diff, m11),
        centroid: (cx, cy),
        degenerate,
    })
}

/// Rigid rotation by `−angle` about `pivot`, followed by a translation into
/// the expanded output canvas.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rotation {
    pub angle: f64,
    pub pivot: (f64, f64),
    /// Position of the pivot in the output canvas.
    pub pivot_out: (f64, f64),
}

impl Rotation {
    pub fn identity() -> Self {
        Self {
            angle: 0.0,
            pivot: (0.0, 0.0),
            pivot_out: (0.0, 0.0),
        }
    }

    /// Source coordinates to output coordinates.
    pub fn apply(&self, p: (f64, f64)) -> (f64, f64) {
        let (s, c) = self.angle.to_radians().sin_cos();
        let (dx, dy) = (p.0 - self.pivot.0, p.1 - self.pivot.1);
        (
            self.pivot_out.0 + c * dx + s * dy,
            self.pivot_out.1 - s * dx + c * dy,
        )
    }

    /// Output coordinates back to source coordinates.
    pub fn invert(&self, q: (f64, f64)) -> (f64, f64) {
        let (s, c) = self.angle.to_radians().sin_cos();
        let (dx, dy) = (q.0 - self.pivot_out.0, q.1 - self.pivot_out.1);
        (
            self.pivot.0 + c * dx - s * dy,
            self.pivot.1 + s * dx + c * dy,
        )
    }
}

#[derive(Debug, Clone)]
pub struct Leveled {
    pub image: RasterImage,
    pub mask: BinaryMask,
    pub rotation: Rotation,
}

fn bilinear(image: &RasterImage, x: f64, y: f64) -> [u8; 3] {
    let (w, h) = (image.width() as isize, image.height() as isize);
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let (x0, y0) = (x0 as isize, y0 as isize);
    let px = |xi: isize, yi: isize| -> [f64; 3] {
        if xi < 0 || yi < 0 || xi >= w || yi >= h {
            [0.0; 3]
        } else {
            image.get(xi as usize, yi as usize).map(f64::from)
        }
    };
    let (a, b, c, d) = (px(x0, y0), px(x0 + 1, y0), px(x0, y0 + 1), px(x0 + 1, y0 + 1));
    let mut out = [0u8; 3];
    for i in 0..3 {
        let top = a[i] + (b[i] - a[i]) * fx;
        let bottom = c[i] + (d[i] - c[i]) * fx;
        out[i] = (top + (bottom - top) * fy).round().clamp(0.0, 255.0) as u8;
    }
    out
}

/// Rotate image and mask by `−estimate.angle` about the mask centroid so the
/// long axis becomes horizontal. The canvas grows to hold the whole rotated
/// input; uncovered pixels are black background. Degenerate or zero-angle
/// estimates return the inputs unchanged.
pub fn correct_orientation(
    image: &RasterImage,
    mask: &BinaryMask,
    estimate: &OrientationEstimate,
) -> Leveled {
    assert_eq!((image.width(), image.height()), (mask.width(), mask.height()));
    if estimate.degenerate || estimate.angle == 0.0 {
        return Leveled {
            image: image.clone(),
            mask: mask.clone(),
            rotation: Rotation::identity(),
        };
    }
    let mut rot = Rotation {
        angle: estimate.angle,
        pivot: estimate.centroid,
        pivot_out: (0.0, 0.0),
    };
    let (w, h) = (image.width() as f64, image.height() as f64);
    let corners = [(-0.5, -0.5), (w - 0.5, -0.5), (-0.5, h - 0.5), (w - 0.5, h - 0.5)];
    let (mut min_x, mut min_y, mut max_x, mut max_y) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    for p in corners {
        let q = rot.apply(p);
        min_x = min_x.min(q.0);
        min_y = min_y.min(q.1);
        max_x = max_x.max(q.0);
        max_y = max_y.max(q.1);
    }
    let out_w = (max_x - min_x).ceil() as usize;
    let out_h = (max_y - min_y).ceil() as usize;
    rot.pivot_out = (-0.5 - min_x, -0.5 - min_y);

    let mut out_img = RasterImage::new(out_w, out_h).expect("non-empty canvas");
    let mut out_mask = BinaryMask::new(out_w, out_h);
    for v in 0..out_h {
        for u in 0..out_w {
            let (x, y) = rot.invert((u as f64, v as f64));
            out_img.set(u, v, bilinear(image, x, y));
            let (xn, yn) = (x.round() as isize, y.round() as isize);
            if mask.get_signed(xn, yn) {
                out_mask.set(u, v, true);
            }
        }
    }
    Leveled {
        image: out_img,
        mask: out_mask,
        rotation: rot,
    }
}

#[derive(Debug, Clone)]
pub struct RoiCrop {
    pub image: RasterImage,
    /// Retained components only, in crop coordinates.
    pub mask: BinaryMask,
    /// Crop rectangle in source coordinates.
    pub bbox: BBox,
    /// Center-disc centroid in crop coordinates, when one is found.
    pub center_disc_centroid: Option<(f64, f64)>,
}

/// Speck-filter the mask and crop to the tight box around what remains, plus
/// a [`CROP_MARGIN`] clipped to the canvas.
pub fn crop_roi(image: &RasterImage, mask: &BinaryMask) -> Result<RoiCrop, GeometryError> {
    assert_eq!((image.width(), image.height()), (mask.width(), mask.height()));
    let kept = remove_specks(mask);
    let cc = connected_components(&kept, Connectivity::Eight);
    let Some(first) = cc.components().first() else {
        return Err(GeometryError::EmptyMask);
    };
    let tight = cc.components().iter().fold(first.bbox, |b, c| b.union(&c.bbox));
    let bbox = BBox {
        x0: tight.x0.saturating_sub(CROP_MARGIN),
        y0: tight.y0.saturating_sub(CROP_MARGIN),
        x1: (tight.x1 + CROP_MARGIN).min(mask.width() - 1),
        y1: (tight.y1 + CROP_MARGIN).min(mask.height() - 1),
    };
    let center_disc_centroid = find_center_disc(&cc)
        .ok()
        .map(|d| (d.centroid.0 - bbox.x0 as f64, d.centroid.1 - bbox.y0 as f64));
    Ok(RoiCrop {
        image: image.crop(bbox.x0, bbox.y0, bbox.x1, bbox.y1),
        mask: kept.crop(bbox),
        bbox,
        center_disc_centroid,
    })
}


#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;
    use proptest::prelude::*;

    fn disc_and_arcs(size: usize, cx: f64, cy: f64) -> BinaryMask {
        let mut m = disc(size, cx, cy, 12.0);
        for k in 1..=3 {
            m = union(&m, &arc(size, cx, cy, 12.0 + 20.0 * k as f64, 4.0));
        }
        m
    }

    #[test]
    fn disc_is_found_among_arcs() {
        let m = disc_and_arcs(160, 80.0, 100.0);
        let cc = connected_components(&m, Connectivity::Eight);
        assert_eq!(cc.len(), 4);
        let arcs_below = cc
            .components()
            .iter()
            .filter(|c| c.fill_ratio < 0.3)
            .count();
        assert_eq!(arcs_below, 3);
        let d = find_center_disc(&cc).unwrap();
        assert!((d.centroid.0 - 80.0).abs() < 0.5 && (d.centroid.1 - 100.0).abs() < 0.5);
    }

    #[test]
    fn lone_disc_and_arcs_only() {
        let cc = connected_components(&disc(50, 25.0, 25.0, 10.0), Connectivity::Eight);
        assert_eq!(find_center_disc(&cc).unwrap().id, 1);
        let arcs = union(&arc(120, 60.0, 80.0, 30.0, 4.0), &arc(120, 60.0, 80.0, 50.0, 4.0));
        let cc = connected_components(&arcs, Connectivity::Eight);
        assert_eq!(find_center_disc(&cc), Err(GeometryError::NoCenterDisc));
    }

    #[test]
    fn axis_aligned_and_rotated_rectangles() {
        let est = estimate_orientation(&rotated_rect(201, 100.0, 40.0, 0.0)).unwrap();
        assert!(est.angle.abs() < 0.1, "{}", est.angle);
        assert!(!est.degenerate);
        let est = estimate_orientation(&rotated_rect(201, 100.0, 40.0, 30.0)).unwrap();
        assert!((est.angle - 30.0).abs() < 0.5, "{}", est.angle);
    }

    #[test]
    fn circle_is_degenerate() {
        let est = estimate_orientation(&disc(101, 50.0, 50.0, 30.0)).unwrap();
        assert!(est.degenerate);
        assert_eq!(est.angle, 0.0);
        assert_eq!(
            estimate_orientation(&BinaryMask::new(4, 4)),
            Err(GeometryError::EmptyMask)
        );
    }

    #[test]
    fn vertical_long_axis_is_ninety_degrees() {
        let est = estimate_orientation(&rotated_rect(201, 40.0, 100.0, 0.0)).unwrap();
        assert!((est.angle - 90.0).abs() < 0.1, "{}", est.angle);
    }

    #[test]
    fn zero_angle_is_identity() {
        let mask = rotated_rect(64, 40.0, 20.0, 0.0);
        let img = RasterImage::from_pixels(
            64,
            64,
            (0..64 * 64).map(|i| [(i % 251) as u8, 7, 9]).collect(),
        )
        .unwrap();
        let est = estimate_orientation(&mask).unwrap();
        assert_eq!(est.angle, 0.0);
        let out = correct_orientation(&img, &mask, &est);
        assert_eq!(out.image, img);
        assert_eq!(out.mask, mask);
    }

    #[test]
    fn correction_levels_the_rectangle_and_keeps_area() {
        let mask = rotated_rect(201, 100.0, 40.0, 30.0);
        let img = RasterImage::filled(201, 201, [10, 20, 30]).unwrap();
        let est = estimate_orientation(&mask).unwrap();
        let out = correct_orientation(&img, &mask, &est);
        let again = estimate_orientation(&out.mask).unwrap();
        assert!(again.angle.abs() < 1.0, "{}", again.angle);
        let ratio = out.mask.count() as f64 / mask.count() as f64;
        assert!((ratio - 1.0).abs() < 0.02, "{ratio}");
        // The pivot lands where the rotation says it does.
        let c = out.rotation.apply(est.centroid);
        assert!((c.0 - again.centroid.0).abs() < 0.5 && (c.1 - again.centroid.1).abs() < 0.5);
    }

    #[test]
    fn rotation_roundtrip() {
        let r = Rotation {
            angle: 17.0,
            pivot: (3.0, 4.0),
            pivot_out: (10.0, -2.0),
        };
        let p = (12.5, -7.25);
        let q = r.invert(r.apply(p));
        assert!((q.0 - p.0).abs() < 1e-9 && (q.1 - p.1).abs() < 1e-9);
        // Positive angle brings a clockwise-tilted axis back to +x.
        let t = 17f64.to_radians();
        let a = r.apply((3.0 + t.cos(), 4.0 + t.sin()));
        assert!((a.0 - 11.0).abs() < 1e-9 && (a.1 + 2.0).abs() < 1e-9);
    }

    #[test]
    fn crop_margin_arithmetic() {
        let img = RasterImage::new(40, 40).unwrap();
        let mut m = BinaryMask::new(40, 40);
        m.set(10, 20, true);
        let crop = crop_roi(&img, &m).unwrap();
        assert_eq!(crop.bbox, BBox { x0: 8, y0: 18, x1: 12, y1: 22 });
        let full = crop_roi(&img, &BinaryMask::filled(40, 40)).unwrap();
        assert_eq!(full.bbox, BBox { x0: 0, y0: 0, x1: 39, y1: 39 });
        assert_eq!(crop_roi(&img, &BinaryMask::new(40, 40)).unwrap_err(), GeometryError::EmptyMask);
    }

    #[test]
    fn crop_drops_specks_and_finds_the_disc() {
        let mut m = union(
            &disc_and_arcs(200, 100.0, 120.0),
            &arc(200, 100.0, 120.0, 80.0, 8.0),
        );
        m.set(5, 5, true);
        let img = RasterImage::new(200, 200).unwrap();
        let crop = crop_roi(&img, &m).unwrap();
        assert!(crop.bbox.x0 > 5 && crop.bbox.y0 > 5);
        assert_eq!(crop.mask.count() + 1, m.count());
        let (cx, cy) = crop.center_disc_centroid.unwrap();
        assert!((cx + crop.bbox.x0 as f64 - 100.0).abs() < 0.5);
        assert!((cy + crop.bbox.y0 as f64 - 120.0).abs() < 0.5);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn orientation_is_equivariant(base in -40.0f64..40.0, delta in -44.0f64..44.0) {
            let a = estimate_orientation(&rotated_rect(161, 110.0, 36.0, base)).unwrap();
            let b = estimate_orientation(&rotated_rect(161, 110.0, 36.0, base + delta)).unwrap();
            let mut shift = b.angle - a.angle;
            if shift > 90.0 { shift -= 180.0; }
            if shift <= -90.0 { shift += 180.0; }
            prop_assert!((shift - delta).abs() < 1.0, "shift {} delta {}", shift, delta);
        }

        #[test]
        fn center_disc_is_translation_invariant(dx in 0usize..40, dy in 0usize..40) {
            let a = disc_and_arcs(200, 80.0, 110.0);
            let b = disc_and_arcs(200, 80.0 + dx as f64, 110.0 + dy as f64);
            let da = find_center_disc(&connected_components(&a, Connectivity::Eight)).unwrap();
            let db = find_center_disc(&connected_components(&b, Connectivity::Eight)).unwrap();
            prop_assert!((db.centroid.0 - da.centroid.0 - dx as f64).abs() < 1e-9);
            prop_assert!((db.centroid.1 - da.centroid.1 - dy as f64).abs() < 1e-9);
        }

        #[test]
        fn crop_is_idempotent(x0 in 0usize..30, y0 in 0usize..30, w in 1usize..30, h in 1usize..30) {
            let m = BinaryMask::from_fn(64, 64, |x, y| {
                (x0..x0 + w).contains(&x) && (y0..y0 + h).contains(&y)
            });
            let img = RasterImage::new(64, 64).unwrap();
            let once = crop_roi(&img, &m).unwrap();
            let twice = crop_roi(&once.image, &once.mask).unwrap();
            prop_assert_eq!(twice.bbox, BBox { x0: 0, y0: 0, x1: once.mask.width() - 1, y1: once.mask.height() - 1 });
            prop_assert_eq!(twice.mask, once.mask);
        }
    }
}
