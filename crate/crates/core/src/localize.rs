//! Stage-2 diagnosis: ray-cast inter-disc distances, per-cell logistic
//! classification, hotspot extraction and color-map rendering.
//!
//! Ray angles are in degrees with `y` up (90° points to the top of the
//! image), measured from the center-disc centroid.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::RasterImage;
use crate::morphology::BinaryMask;
use crate::stats::quantile;
use crate::CorneaLabel;

pub const RAY_STEP: f64 = 0.5;
/// Half-width (in rays) of the window used to smooth per-ray evidence when
/// picking the hotspot peak.
pub const PEAK_SMOOTHING: usize = 3;

#[derive(Debug, Error)]
pub enum LocalizeError {
    #[error("ray origin ({0:.1}, {1:.1}) lies outside the canvas")]
    OriginOutsideCanvas(f64, f64),
    #[error("no ray crossed two measurable bands")]
    NoMeasurableGaps,
    #[error("training cells must contain both labels")]
    SingleClassData,
    #[error("logistic fit did not converge in {iterations} iterations (gradient norm {grad_norm:e})")]
    NonConvergence { iterations: usize, grad_norm: f64 },
    #[error("invalid distance matrix CSV: {0}")]
    Csv(String),
}

/// Foreground runs along one ray, as `(enter, exit)` radii in pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RayTransitions {
    pub angle: f64,
    pub crossings: Vec<(f64, f64)>,
    /// The first run starts at the origin (the solid center disc).
    pub from_origin: bool,
    /// The last run was cut off by the canvas edge.
    pub clipped: bool,
}

impl RayTransitions {
    /// Runs bounded by two detected transitions.
    pub fn bands(&self) -> &[(f64, f64)] {
        let start = usize::from(self.from_origin);
        let end = self.crossings.len() - usize::from(self.clipped);
        if start >= end {
            &[]
        } else {
            &self.crossings[start..end]
        }
    }
}

fn mask_value(mask: &BinaryMask, x: f64, y: f64) -> f64 {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let (xi, yi) = (x0 as isize, y0 as isize);
    let v = |dx: isize, dy: isize| f64::from(u8::from(mask.get_signed(xi + dx, yi + dy)));
    let top = v(0, 0) + (v(1, 0) - v(0, 0)) * fx;
    let bottom = v(0, 1) + (v(1, 1) - v(0, 1)) * fx;
    top + (bottom - top) * fy
}

/// Sample the mask along each ray at [`RAY_STEP`] spacing (bilinear) and
/// record sub-pixel 0.5 crossings.
pub fn cast_rays(
    mask: &BinaryMask,
    origin: (f64, f64),
    angles: &[f64],
) -> Result<Vec<RayTransitions>, LocalizeError> {
    let (w, h) = (mask.width() as f64, mask.height() as f64);
    let (ox, oy) = origin;
    if !(ox >= 0.0 && oy >= 0.0 && ox <= w - 1.0 && oy <= h - 1.0) {
        return Err(LocalizeError::OriginOutsideCanvas(ox, oy));
    }
    Ok(angles
        .iter()
        .map(|&angle| cast_one(mask, origin, angle))
        .collect())
}

fn cast_one(mask: &BinaryMask, (ox, oy): (f64, f64), angle: f64) -> RayTransitions {
    let (w, h) = (mask.width() as f64, mask.height() as f64);
    let (s, c) = angle.to_radians().sin_cos();
    let (dx, dy) = (c, -s);
    let inside = |t: f64| {
        let (x, y) = (ox + t * dx, oy + t * dy);
        x >= 0.0 && y >= 0.0 && x <= w - 1.0 && y <= h - 1.0
    };
    let sample = |t: f64| mask_value(mask, ox + t * dx, oy + t * dy);

    let mut crossings = Vec::new();
    let mut prev_t = 0.0;
    let mut prev_v = sample(0.0);
    let from_origin = prev_v >= 0.5;
    let mut enter = from_origin.then_some(0.0);
    let mut i = 1;
    loop {
        let t = i as f64 * RAY_STEP;
        if !inside(t) {
            break;
        }
        let v = sample(t);
        let was_fg = prev_v >= 0.5;
        let is_fg = v >= 0.5;
        if was_fg != is_fg {
            let at = prev_t + (0.5 - prev_v) / (v - prev_v) * RAY_STEP;
            match enter.take() {
                Some(e) => crossings.push((e, at)),
                None => enter = Some(at),
            }
        }
        prev_t = t;
        prev_v = v;
        i += 1;
    }
    let clipped = if let Some(e) = enter {
        crossings.push((e, prev_t.max(e)));
        true
    } else {
        false
    };
    // A single-sample run can produce enter == exit; keep the pairs strict.
    crossings.retain(|&(a, b)| b > a);
    let clipped = clipped && crossings.last().is_some_and(|&(_, b)| b == prev_t);
    RayTransitions {
        angle,
        crossings,
        from_origin,
        clipped,
    }
}

/// Inter-disc distances indexed by `[ray][gap]`; `None` marks a missing cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceMatrix {
    pub angles: Vec<f64>,
    pub values: Vec<Vec<Option<f64>>>,
}

impl DistanceMatrix {
    pub fn gap_count(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    pub fn get(&self, ray: usize, gap: usize) -> Option<f64> {
        self.values[ray][gap]
    }

    /// Present cells as `(ray, gap, distance)`.
    pub fn cells(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.values.iter().enumerate().flat_map(|(r, row)| {
            row.iter()
                .enumerate()
                .filter_map(move |(g, v)| v.map(|d| (r, g, d)))
        })
    }

    pub fn present_count(&self) -> usize {
        self.cells().count()
    }

    /// Matrix CSV: header `angle,gap_0,...`, one row per ray, empty cell = missing.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), LocalizeError> {
        let err = |e: csv::Error| LocalizeError::Csv(e.to_string());
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["angle".to_string()];
        header.extend((0..self.gap_count()).map(|g| format!("gap_{g}")));
        w.write_record(&header).map_err(err)?;
        for (angle, row) in self.angles.iter().zip(&self.values) {
            let mut rec = vec![angle.to_string()];
            rec.extend(row.iter().map(|v| v.map_or(String::new(), |d| d.to_string())));
            w.write_record(&rec).map_err(err)?;
        }
        w.flush().map_err(|e| LocalizeError::Csv(e.to_string()))
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self, LocalizeError> {
        let bad = |m: String| LocalizeError::Csv(m);
        let mut r = csv::Reader::from_reader(input);
        let header = r.headers().map_err(|e| bad(e.to_string()))?.clone();
        if header.get(0) != Some("angle") {
            return Err(bad("first column must be `angle`".into()));
        }
        let gaps = header.len() - 1;
        let parse = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("{s:?}: {e}")));
        let (mut angles, mut values) = (Vec::new(), Vec::new());
        for rec in r.records() {
            let rec = rec.map_err(|e| bad(e.to_string()))?;
            angles.push(parse(&rec[0])?);
            let mut row = Vec::with_capacity(gaps);
            for field in rec.iter().skip(1) {
                row.push(if field.is_empty() { None } else { Some(parse(field)?) });
            }
            values.push(row);
        }
        Ok(Self { angles, values })
    }
}

/// Gaps between consecutive band midpoints. The center disc and runs clipped
/// by the canvas are not bands. Rows are padded with missing cells to the
/// longest row, or to `gap_count` when given.
pub fn build_distance_matrix(
    transitions: &[RayTransitions],
    gap_count: Option<usize>,
) -> Result<DistanceMatrix, LocalizeError> {
    let rows: Vec<Vec<f64>> = transitions
        .iter()
        .map(|t| {
            let mids: Vec<f64> = t.bands().iter().map(|&(a, b)| (a + b) / 2.0).collect();
            mids.windows(2).map(|m| m[1] - m[0]).collect()
        })
        .collect();
    let longest = rows.iter().map(Vec::len).max().unwrap_or(0);
    if longest == 0 {
        return Err(LocalizeError::NoMeasurableGaps);
    }
    let width = gap_count.unwrap_or(longest);
    let values = rows
        .into_iter()
        .map(|row| {
            let mut out: Vec<Option<f64>> = row.into_iter().take(width).map(Some).collect();
            out.resize(width, None);
            out
        })
        .collect();
    Ok(DistanceMatrix {
        angles: transitions.iter().map(|t| t.angle).collect(),
        values,
    })
}

/// `P(kc | x) = 1 / (1 + exp(−(β0 + β1·x)))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub beta0: f64,
    pub beta1: f64,
}

impl LogisticModel {
    pub const THRESHOLD: f64 = 0.5;

    pub fn probability(&self, x: f64) -> f64 {
        sigmoid(self.beta0 + self.beta1 * x)
    }

    /// Distance at which the probability crosses the threshold.
    pub fn boundary(&self) -> Option<f64> {
        (self.beta1 != 0.0).then(|| -self.beta0 / self.beta1)
    }

    /// kc iff the distance is on the kc side of the boundary, boundary
    /// included. Equivalent to `P ≥ 0.5` without rounding at the boundary.
    pub fn label(&self, x: f64) -> CorneaLabel {
        let kc = match self.boundary() {
            Some(b) if self.beta1 > 0.0 => x >= b,
            Some(b) => x <= b,
            None => self.beta0 >= 0.0,
        };
        if kc {
            CorneaLabel::Kc
        } else {
            CorneaLabel::Control
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

pub fn predict_cell(model: &LogisticModel, distance: f64) -> (f64, CorneaLabel) {
    (model.probability(distance), model.label(distance))
}

/// Summed log-likelihood `Σ y·z − ln(1 + e^z)` of labelled cells.
pub fn log_likelihood(model: &LogisticModel, cells: &[(f64, CorneaLabel)]) -> f64 {
    cells
        .iter()
        .map(|&(x, l)| {
            let z = model.beta0 + model.beta1 * x;
            f64::from(u8::from(l.is_kc())) * z - softplus(z)
        })
        .sum()
}

/// Gradient of [`log_likelihood`] with respect to `(β0, β1)`.
pub fn log_likelihood_gradient(model: &LogisticModel, cells: &[(f64, CorneaLabel)]) -> [f64; 2] {
    cells.iter().fold([0.0, 0.0], |g, &(x, l)| {
        let r = f64::from(u8::from(l.is_kc())) - model.probability(x);
        [g[0] + r, g[1] + r * x]
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogisticParams {
    /// L2 weight on the slope, in standardized-distance units.
    pub l2: f64,
    pub max_iter: usize,
    /// Convergence threshold on the gradient norm of the mean objective.
    pub tol: f64,
}

impl Default for LogisticParams {
    fn default() -> Self {
        Self {
            l2: 1e-3,
            max_iter: 100,
            tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogisticFit {
    pub model: LogisticModel,
    pub iterations: usize,
    pub grad_norm: f64,
}

/// Maximize `mean log-likelihood − (l2/2)·γ1²` by damped Newton steps, where
/// `γ1` is the slope on z-scored distances. Coefficients are returned on the
/// raw distance scale.
pub fn fit_logistic(
    cells: &[(f64, CorneaLabel)],
    params: &LogisticParams,
) -> Result<LogisticFit, LocalizeError> {
    let kc = cells.iter().filter(|c| c.1.is_kc()).count();
    if kc == 0 || kc == cells.len() {
        return Err(LocalizeError::SingleClassData);
    }
    let n = cells.len() as f64;
    let mean = cells.iter().map(|c| c.0).sum::<f64>() / n;
    let var = cells.iter().map(|c| (c.0 - mean).powi(2)).sum::<f64>() / n;
    let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
    let data: Vec<(f64, f64)> = cells
        .iter()
        .map(|&(x, l)| ((x - mean) / sd, f64::from(u8::from(l.is_kc()))))
        .collect();
    let lambda = params.l2;

    let objective = |g: [f64; 2]| {
        data.iter()
            .map(|&(u, y)| {
                let z = g[0] + g[1] * u;
                y * z - softplus(z)
            })
            .sum::<f64>()
            / n
            - 0.5 * lambda * g[1] * g[1]
    };
    let derivatives = |g: [f64; 2]| {
        let (mut g0, mut g1, mut h00, mut h01, mut h11) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for &(u, y) in &data {
            let p = sigmoid(g[0] + g[1] * u);
            let w = p * (1.0 - p);
            g0 += y - p;
            g1 += (y - p) * u;
            h00 += w;
            h01 += w * u;
            h11 += w * u * u;
        }
        (
            [g0 / n, g1 / n - lambda * g[1]],
            [h00 / n, h01 / n, h11 / n + lambda],
        )
    };

    let prior = kc as f64 / n;
    let mut gamma = [(prior / (1.0 - prior)).ln(), 0.0];
    let mut value = objective(gamma);
    let mut iterations = 0;
    let (mut grad, mut hess) = derivatives(gamma);
    let mut grad_norm = grad[0].hypot(grad[1]);
    while grad_norm >= params.tol {
        if iterations == params.max_iter {
            return Err(LocalizeError::NonConvergence {
                iterations,
                grad_norm,
            });
        }
        iterations += 1;
        // Newton direction: solve (−H)·d = g, with a tiny ridge for safety.
        let (a, b, c) = (hess[0] + 1e-12, hess[1], hess[2] + 1e-12);
        let det = a * c - b * b;
        let dir = [(c * grad[0] - b * grad[1]) / det, (a * grad[1] - b * grad[0]) / det];
        let slope = grad[0] * dir[0] + grad[1] * dir[1];
        let mut step = 1.0;
        loop {
            let cand = [gamma[0] + step * dir[0], gamma[1] + step * dir[1]];
            let v = objective(cand);
            if v >= value + 1e-4 * step * slope || step < 1e-10 {
                gamma = cand;
                value = v;
                break;
            }
            step *= 0.5;
        }
        (grad, hess) = derivatives(gamma);
        grad_norm = grad[0].hypot(grad[1]);
    }
    let beta1 = gamma[1] / sd;
    Ok(LogisticFit {
        model: LogisticModel {
            beta0: gamma[0] - beta1 * mean,
            beta1,
        },
        iterations,
        grad_norm,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellCall {
    pub probability: f64,
    pub label: CorneaLabel,
}

pub fn classify_cells(matrix: &DistanceMatrix, model: &LogisticModel) -> Vec<Vec<Option<CellCall>>> {
    matrix
        .values
        .iter()
        .map(|row| {
            row.iter()
                .map(|v| {
                    v.map(|d| {
                        let (probability, label) = predict_cell(model, d);
                        CellCall { probability, label }
                    })
                })
                .collect()
        })
        .collect()
}

/// The largest 8-connected region of kc cells in `(ray, gap)` space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hotspot {
    /// `(first, last)` ray angle covered by the region.
    pub angle_range: Option<(f64, f64)>,
    pub gap_indices: Vec<usize>,
    /// Mean kc probability over the region's cells.
    pub severity: f64,
    /// Ray angle with the strongest smoothed kc evidence inside the region.
    pub peak_angle: Option<f64>,
    pub cells: Vec<(usize, usize)>,
    /// kc cells anywhere in the matrix.
    pub kc_cells: usize,
}

impl Hotspot {
    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn empty(kc_cells: usize) -> Self {
        Self {
            angle_range: None,
            gap_indices: Vec::new(),
            severity: 0.0,
            peak_angle: None,
            cells: Vec::new(),
            kc_cells,
        }
    }
}

pub fn locate_hotspot(matrix: &DistanceMatrix, model: &LogisticModel) -> Hotspot {
    let calls = classify_cells(matrix, model);
    let rays = calls.len();
    let gaps = matrix.gap_count();
    let is_kc = |r: usize, g: usize| calls[r][g].is_some_and(|c| c.label.is_kc());
    let kc_cells = (0..rays)
        .flat_map(|r| (0..gaps).map(move |g| (r, g)))
        .filter(|&(r, g)| is_kc(r, g))
        .count();

    let mut seen = vec![vec![false; gaps]; rays];
    let mut best: Vec<(usize, usize)> = Vec::new();
    for r0 in 0..rays {
        for g0 in 0..gaps {
            if seen[r0][g0] || !is_kc(r0, g0) {
                continue;
            }
            seen[r0][g0] = true;
            let mut region = vec![(r0, g0)];
            let mut head = 0;
            while head < region.len() {
                let (r, g) = region[head];
                head += 1;
                for dr in -1isize..=1 {
                    for dg in -1isize..=1 {
                        let (nr, ng) = (r as isize + dr, g as isize + dg);
                        if nr < 0 || ng < 0 || nr as usize >= rays || ng as usize >= gaps {
                            continue;
                        }
                        let (nr, ng) = (nr as usize, ng as usize);
                        if !seen[nr][ng] && is_kc(nr, ng) {
                            seen[nr][ng] = true;
                            region.push((nr, ng));
                        }
                    }
                }
            }
            if region.len() > best.len() {
                best = region;
            }
        }
    }
    if best.is_empty() {
        return Hotspot::empty(kc_cells);
    }
    best.sort_unstable();
    let prob = |&(r, g): &(usize, usize)| calls[r][g].expect("present").probability;
    let severity = best.iter().map(prob).sum::<f64>() / best.len() as f64;
    let (r_lo, r_hi) = (best[0].0, best[best.len() - 1].0);
    let mut gap_indices: Vec<usize> = best.iter().map(|c| c.1).collect();
    gap_indices.sort_unstable();
    gap_indices.dedup();

    // Mean logit per ray over the region's cells, then a moving average.
    let mut per_ray = vec![None; rays];
    for (r, slot) in per_ray.iter_mut().enumerate().take(r_hi + 1).skip(r_lo) {
        let logits: Vec<f64> = best
            .iter()
            .filter(|c| c.0 == r)
            .map(|&(r, g)| {
                let d = matrix.get(r, g).expect("present");
                model.beta0 + model.beta1 * d
            })
            .collect();
        if !logits.is_empty() {
            *slot = Some(logits.iter().sum::<f64>() / logits.len() as f64);
        }
    }
    let mut peak = (r_lo, f64::MIN);
    for r in r_lo..=r_hi {
        if per_ray[r].is_none() {
            continue;
        }
        let lo = r.saturating_sub(PEAK_SMOOTHING).max(r_lo);
        let hi = (r + PEAK_SMOOTHING).min(r_hi);
        let window: Vec<f64> = (lo..=hi).filter_map(|i| per_ray[i]).collect();
        let score = window.iter().sum::<f64>() / window.len() as f64;
        if score > peak.1 {
            peak = (r, score);
        }
    }
    Hotspot {
        angle_range: Some((matrix.angles[r_lo], matrix.angles[r_hi])),
        gap_indices,
        severity,
        peak_angle: Some(matrix.angles[peak.0]),
        cells: best,
        kc_cells,
    }
}

/// Distance window mapped onto the colormap.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColorWindow {
    pub d_min: f64,
    pub d_max: f64,
}

impl ColorWindow {
    /// 1st to 99th percentile of the given distances.
    pub fn from_distances(distances: &[f64]) -> Option<Self> {
        let mut sorted = distances.to_vec();
        sorted.sort_by(f64::total_cmp);
        Some(Self {
            d_min: quantile(&sorted, 0.01)?,
            d_max: quantile(&sorted, 0.99)?,
        })
    }
}

/// Position of a distance in the window, clamped to `[0, 1]`.
pub fn colormap_coordinate(distance: f64, window: &ColorWindow) -> f64 {
    let span = window.d_max - window.d_min;
    if span <= 0.0 {
        return 0.5;
    }
    ((distance - window.d_min) / span).clamp(0.0, 1.0)
}

const STOPS: [[f64; 3]; 5] = [
    [30.0, 60.0, 200.0],
    [0.0, 170.0, 200.0],
    [60.0, 190.0, 60.0],
    [250.0, 160.0, 30.0],
    [210.0, 30.0, 30.0],
];
pub const MISSING_COLOR: [u8; 3] = [128, 128, 128];
pub const BACKDROP_COLOR: [u8; 3] = [255, 255, 255];

/// Cool-to-warm ramp: blue, teal, green, orange, red.
pub fn colormap(t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0) * (STOPS.len() - 1) as f64;
    let i = (t.floor() as usize).min(STOPS.len() - 2);
    let f = t - i as f64;
    let (a, b) = (STOPS[i], STOPS[i + 1]);
    [0, 1, 2].map(|k| (a[k] + (b[k] - a[k]) * f).round() as u8)
}

/// Polar wedge over the matrix's angular range with the origin at the bottom
/// center. Gap `g` occupies the `g`-th radial band outside a blank core.
pub fn render_colormap(matrix: &DistanceMatrix, window: &ColorWindow, out_size: usize) -> RasterImage {
    let w = out_size.max(16);
    let h = w / 2 + w / 8;
    let mut img = RasterImage::filled(w, h, BACKDROP_COLOR).expect("non-empty canvas");
    let rays = matrix.angles.len();
    let gaps = matrix.gap_count();
    if rays == 0 || gaps == 0 {
        return img;
    }
    let (a_first, a_last) = (matrix.angles[0], matrix.angles[rays - 1]);
    let (a_lo, a_hi) = (a_first.min(a_last), a_first.max(a_last));
    let step = if rays > 1 {
        (a_last - a_first) / (rays - 1) as f64
    } else {
        1.0
    };
    let origin = (w as f64 / 2.0, h as f64 - 4.0);
    let r_max = (h as f64 - 8.0).min(w as f64 / 2.0 - 4.0);
    let r_core = 0.2 * r_max;
    let band = (r_max - r_core) / gaps as f64;
    let colors: Vec<Vec<[u8; 3]>> = matrix
        .values
        .iter()
        .map(|row| {
            row.iter()
                .map(|v| v.map_or(MISSING_COLOR, |d| colormap(colormap_coordinate(d, window))))
                .collect()
        })
        .collect();
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (x as f64 - origin.0, origin.1 - y as f64);
            let r = dx.hypot(dy);
            if r < r_core || r >= r_max {
                continue;
            }
            let a = dy.atan2(dx).to_degrees();
            let half = step.abs() / 2.0;
            if a < a_lo - half || a > a_hi + half {
                continue;
            }
            let ray = (((a - a_first) / step).round().max(0.0) as usize).min(rays - 1);
            let gap = (((r - r_core) / band) as usize).min(gaps - 1);
            img.set(x, y, colors[ray][gap]);
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rings(size: usize, c: (f64, f64), radii: &[f64], t: f64, disc: f64) -> BinaryMask {
        BinaryMask::from_fn(size, size, |x, y| {
            let r = (x as f64 - c.0).hypot(y as f64 - c.1);
            r <= disc || radii.iter().any(|&k| (r - k).abs() <= t / 2.0)
        })
    }

    #[test]
    fn concentric_rings_give_analytic_midpoints() {
        let m = rings(301, (150.0, 150.0), &[40.0, 80.0, 120.0], 8.0, 15.0);
        let t = cast_rays(&m, (150.0, 150.0), &[90.0, 45.0]).unwrap();
        for ray in &t {
            assert!(ray.from_origin && !ray.clipped);
            assert_eq!(ray.bands().len(), 3);
            for (&(a, b), want) in ray.bands().iter().zip([40.0, 80.0, 120.0]) {
                assert!(((a + b) / 2.0 - want).abs() <= 0.5, "{a} {b} {want}");
            }
        }
        let mat = build_distance_matrix(&t, None).unwrap();
        for row in &mat.values {
            for v in row {
                assert!((v.unwrap() - 40.0).abs() <= 1.0);
            }
        }
    }

    #[test]
    fn all_foreground_is_one_run_to_the_edge() {
        let m = BinaryMask::filled(50, 50);
        let t = cast_rays(&m, (25.0, 25.0), &[90.0]).unwrap();
        assert_eq!(t[0].crossings, vec![(0.0, 25.0)]);
        assert!(t[0].from_origin && t[0].clipped);
        assert!(t[0].bands().is_empty());
        assert!(matches!(
            build_distance_matrix(&t, None),
            Err(LocalizeError::NoMeasurableGaps)
        ));
    }

    #[test]
    fn origin_outside_canvas_is_an_error() {
        let m = BinaryMask::new(10, 10);
        assert!(matches!(
            cast_rays(&m, (10.5, 3.0), &[90.0]),
            Err(LocalizeError::OriginOutsideCanvas(..))
        ));
    }

    #[test]
    fn truncated_ray_has_missing_cells() {
        // The ring at 120 is outside the 200-px canvas on the upward ray.
        let m = rings(200, (100.0, 100.0), &[40.0, 80.0, 120.0], 8.0, 15.0);
        let t = cast_rays(&m, (100.0, 100.0), &[90.0, 135.0]).unwrap();
        let mat = build_distance_matrix(&t, Some(2)).unwrap();
        assert!(mat.get(0, 0).is_some());
        assert!(mat.get(0, 1).is_none());
        assert!(mat.get(1, 1).is_some());
    }

    #[test]
    fn midpoint_arithmetic() {
        let t = RayTransitions {
            angle: 90.0,
            crossings: vec![(0.0, 10.0), (36.0, 44.0), (76.0, 84.0), (116.0, 124.0)],
            from_origin: true,
            clipped: false,
        };
        let m = build_distance_matrix(&[t], None).unwrap();
        assert_eq!(m.values, vec![vec![Some(40.0), Some(40.0)]]);
    }

    #[test]
    fn csv_roundtrip_with_missing_cells() {
        let m = DistanceMatrix {
            angles: vec![45.0, 46.0],
            values: vec![vec![Some(40.5), None], vec![Some(41.0), Some(39.25)]],
        };
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("angle,gap_0,gap_1\n45,40.5,\n"));
        assert_eq!(DistanceMatrix::read_csv(buf.as_slice()).unwrap(), m);
    }

    #[test]
    fn logistic_hand_values() {
        let m = LogisticModel { beta0: 0.0, beta1: 1.0 };
        assert_eq!(m.probability(0.0), 0.5);
        let m = LogisticModel { beta0: -5.0, beta1: 0.05 };
        let p = m.probability(148.93);
        assert!((p - 1.0 / (1.0 + (-2.4465f64).exp())).abs() < 1e-12);
        assert!((p - 0.920).abs() < 5e-4);
        let b = m.boundary().unwrap();
        assert_eq!(predict_cell(&m, b).1, CorneaLabel::Kc);
        assert!(m.probability(1e6) > 1.0 - 1e-12);
    }

    #[test]
    fn single_class_is_rejected() {
        let cells = [(1.0, CorneaLabel::Kc), (2.0, CorneaLabel::Kc)];
        assert!(matches!(
            fit_logistic(&cells, &LogisticParams::default()),
            Err(LocalizeError::SingleClassData)
        ));
    }

    #[test]
    fn separable_data_boundary_lies_between_classes() {
        let mut cells = Vec::new();
        for i in 0..20 {
            cells.push((60.0 + i as f64, CorneaLabel::Control));
            cells.push((100.0 + i as f64, CorneaLabel::Kc));
        }
        let fit = fit_logistic(&cells, &LogisticParams::default()).unwrap();
        let b = fit.model.boundary().unwrap();
        assert!(b > 79.0 && b < 100.0, "{b}");
        // Brute-force threshold search agrees that this data is separable.
        let best = cells
            .iter()
            .map(|&(t, _)| {
                cells
                    .iter()
                    .filter(|&&(x, l)| (x >= t) == l.is_kc())
                    .count()
            })
            .max()
            .unwrap();
        assert_eq!(best, cells.len());
        let acc = cells
            .iter()
            .filter(|&&(x, l)| fit.model.label(x) == l)
            .count();
        assert_eq!(acc, cells.len());
    }

    #[test]
    fn non_convergence_is_reported() {
        let cells = [(1.0, CorneaLabel::Control), (3.0, CorneaLabel::Kc), (2.0, CorneaLabel::Kc)];
        let params = LogisticParams {
            l2: 0.0,
            max_iter: 1,
            tol: 1e-14,
        };
        assert!(matches!(
            fit_logistic(&cells, &params),
            Err(LocalizeError::NonConvergence { iterations: 1, .. })
        ));
    }

    fn matrix_from(rows: Vec<Vec<Option<f64>>>) -> DistanceMatrix {
        DistanceMatrix {
            angles: (0..rows.len()).map(|i| 45.0 + i as f64).collect(),
            values: rows,
        }
    }

    #[test]
    fn hotspot_cases() {
        let model = LogisticModel { beta0: -50.0, beta1: 1.0 };
        let mut rows = vec![vec![Some(40.0); 6]; 91];
        assert!(locate_hotspot(&matrix_from(rows.clone()), &model).is_empty());
        rows[45][3] = Some(60.0);
        let h = locate_hotspot(&matrix_from(rows.clone()), &model);
        assert_eq!(h.angle_range, Some((90.0, 90.0)));
        assert_eq!(h.gap_indices, vec![3]);
        assert_eq!(h.peak_angle, Some(90.0));
        assert!(h.severity > 0.99);
        // A larger diagonal region wins over the single cell.
        rows[10][0] = Some(55.0);
        rows[11][1] = Some(55.0);
        let h = locate_hotspot(&matrix_from(rows), &model);
        assert_eq!(h.cells, vec![(10, 0), (11, 1)]);
        assert_eq!(h.kc_cells, 3);
    }

    #[test]
    fn peak_follows_the_largest_distances() {
        let model = LogisticModel { beta0: -40.0, beta1: 1.0 };
        let rows = (0..91)
            .map(|r| {
                let bump = 20.0 * (-((r as f64 - 30.0) / 10.0).powi(2)).exp();
                vec![Some(45.0 + bump); 6]
            })
            .collect();
        let h = locate_hotspot(&matrix_from(rows), &model);
        assert_eq!(h.angle_range, Some((45.0, 135.0)));
        assert_eq!(h.peak_angle, Some(75.0));
    }

    #[test]
    fn colormap_properties() {
        let w = ColorWindow { d_min: 40.0, d_max: 80.0 };
        assert_eq!(colormap_coordinate(60.0, &w), 0.5);
        assert_eq!(colormap_coordinate(0.0, &w), 0.0);
        assert_eq!(colormap(0.0), [30, 60, 200]);
        assert_eq!(colormap(1.0), [210, 30, 30]);
        let m = matrix_from(vec![vec![Some(50.0); 6]; 91]);
        let img = render_colormap(&m, &w, 256);
        let colors: std::collections::BTreeSet<_> = img.pixels().iter().copied().collect();
        assert_eq!(colors.len(), 2, "{colors:?}");
        assert!(colors.contains(&colormap(0.25)));
        let again = render_colormap(&m, &w, 256);
        let (mut a, mut b) = (Vec::new(), Vec::new());
        img.write_png(&mut a).unwrap();
        again.write_png(&mut b).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn window_from_percentiles() {
        let d: Vec<f64> = (0..=100).map(f64::from).collect();
        let w = ColorWindow::from_distances(&d).unwrap();
        assert!((w.d_min - 1.0).abs() < 1e-12 && (w.d_max - 99.0).abs() < 1e-12);
    }

    fn random_cells(rng: &mut ChaCha8Rng, n: usize) -> Vec<(f64, CorneaLabel)> {
        let shift = rng.random_range(-30.0..30.0);
        (0..n)
            .map(|i| {
                let kc = i % 2 == 0;
                let x = rng.random_range(0.0..10.0) + if kc { 4.0 } else { 0.0 } + shift;
                (x, if kc { CorneaLabel::Kc } else { CorneaLabel::Control })
            })
            .collect()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn gradient_matches_central_differences(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cells = random_cells(&mut rng, 30);
            let m = LogisticModel {
                beta0: rng.random_range(-3.0..3.0),
                beta1: rng.random_range(-0.5..0.5),
            };
            let g = log_likelihood_gradient(&m, &cells);
            for (k, &gk) in g.iter().enumerate() {
                let h = 1e-5;
                let mut hi = m;
                let mut lo = m;
                if k == 0 { hi.beta0 += h; lo.beta0 -= h; } else { hi.beta1 += h; lo.beta1 -= h; }
                let fd = (log_likelihood(&hi, &cells) - log_likelihood(&lo, &cells)) / (2.0 * h);
                let rel = (fd - gk).abs() / gk.abs().max(1e-3);
                prop_assert!(rel < 1e-4, "k={} fd={} analytic={}", k, fd, gk);
            }
        }

        #[test]
        fn probability_is_monotone_and_boundary_is_exact(
            b0 in -20.0f64..20.0, b1 in 0.001f64..2.0, x in -100.0f64..100.0, dx in 1e-6f64..10.0,
        ) {
            let m = LogisticModel { beta0: b0, beta1: b1 };
            prop_assert!(m.probability(x + dx) >= m.probability(x));
            let b = m.boundary().unwrap();
            prop_assert_eq!(m.label(b), CorneaLabel::Kc);
            prop_assert_eq!(m.label(b - b.abs().max(1.0) * 1e-9), CorneaLabel::Control);
        }

        #[test]
        fn refit_is_scale_covariant(seed in any::<u64>(), s in 0.1f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cells = random_cells(&mut rng, 60);
            let scaled: Vec<_> = cells.iter().map(|&(x, l)| (x * s, l)).collect();
            let p = LogisticParams::default();
            let a = fit_logistic(&cells, &p).unwrap().model;
            let b = fit_logistic(&scaled, &p).unwrap().model;
            prop_assert!((b.beta1 - a.beta1 / s).abs() <= 1e-6 * a.beta1.abs().max(1e-3));
            for (&(x, _), &(xs, _)) in cells.iter().zip(&scaled) {
                let margin = (a.beta0 + a.beta1 * x).abs();
                if margin > 1e-6 {
                    prop_assert_eq!(a.label(x), b.label(xs));
                }
            }
        }
    }
}
