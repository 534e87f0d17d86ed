//! Synthetic Placido reflections with known ground truth.
//!
//! A scene is a solid center disc plus `ring_count - 1` ring arcs over the
//! upper half-plane, drawn in a bright bluish white over a dark brown
//! texture. Geometry is described in the pattern frame (x right, y up,
//! angles counter-clockwise from +x). Along direction `θ` the disc has radius
//! `r₁(θ) = e(θ)·gap` and ring `k` sits at
//!
//! ```text
//! r_k(θ) = r₁(θ) + Σ_{j=1}^{k-1} e(θ)·gap·(1 + a·g(θ)·h_j)
//! ```
//!
//! where `e(θ)` is the polar radius of an ellipse with vertical semi-axis
//! `squash_y`, `g` is a Gaussian bump in angle around the protrusion and
//! `h_j` a Gaussian weight on the radial position of step `j`. Every step is
//! therefore at least `e(θ)·gap` and grows strictly with the amplitude `a`.
//!
//! The pattern is then tilted about its center (positive tilt turns +x
//! toward +y in image coordinates), lit with a linear gradient and corrupted
//! by Gaussian channel noise and isolated specular glints.

use std::f64::consts::PI;
use std::fs;
use std::io;
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::morphology::BinaryMask;
use crate::raster::RasterImage;
use crate::CorneaLabel;

/// Radial spread of the protrusion, as a fraction of the outer radius.
pub const RADIAL_SIGMA: f64 = 0.3;
/// Vertical scale of keratoconic scenes in generated corpora.
pub const KC_SQUASH_Y: f64 = 1.0;

/// First and last ray angle covered by the ground-truth gap field.
pub const GAP_ANGLE_RANGE: (f64, f64) = (45.0, 135.0);

const FOREGROUND: [f64; 3] = [236.0, 240.0, 252.0];
const BACKGROUND: [f64; 3] = [104.0, 68.0, 44.0];
const GLINT: [f64; 3] = [248.0, 248.0, 250.0];

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scene: {0}")]
    InvalidSpec(String),
    #[error("pattern extends outside the {size}px canvas")]
    OutOfBounds { size: usize },
    #[error("corpus needs at least one scene of each class")]
    EmptyCorpus,
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub image_size: usize,
    pub ring_count: usize,
    /// Pattern center in image coordinates.
    pub center: (f64, f64),
    /// Spacing of consecutive ring mid-radii before distortion (pixels).
    pub base_gap: f64,
    pub ring_thickness: f64,
    /// Protrusion amplitude `a`; zero means a control cornea.
    pub protrusion_amplitude: f64,
    /// Degrees, counter-clockwise from +x in the pattern frame.
    pub protrusion_angle: f64,
    /// Angular standard deviation of the bump (degrees).
    pub protrusion_width: f64,
    /// Radial position of the bump as a fraction of the outer radius.
    pub protrusion_radial_center: f64,
    pub squash_y: f64,
    pub tilt: f64,
    pub noise_sigma: f64,
    pub illumination_gradient: f64,
    /// Probability that a background pixel is replaced by a glint.
    pub glint_density: f64,
    pub rng_seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            image_size: 1024,
            ring_count: 8,
            center: (512.0, 600.0),
            base_gap: 40.0,
            ring_thickness: 12.0,
            protrusion_amplitude: 0.0,
            protrusion_angle: 90.0,
            protrusion_width: 35.0,
            protrusion_radial_center: 0.6,
            squash_y: 0.85,
            tilt: 0.0,
            noise_sigma: 0.0,
            illumination_gradient: 0.0,
            glint_density: 0.0,
            rng_seed: 0,
        }
    }
}

fn angle_diff(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(360.0);
    if d > 180.0 {
        360.0 - d
    } else {
        d
    }
}

impl SceneSpec {
    pub fn label(&self) -> CorneaLabel {
        if self.protrusion_amplitude > 0.0 {
            CorneaLabel::Kc
        } else {
            CorneaLabel::Control
        }
    }

    /// Number of measurable gaps between consecutive ring bands.
    pub fn gap_count(&self) -> usize {
        self.ring_count.saturating_sub(2)
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |msg: &str| Err(SynthError::InvalidSpec(msg.to_string()));
        if self.ring_count < 3 {
            return bad("ring_count must be at least 3 (disc plus two bands)");
        }
        if !(self.base_gap > 0.0) || !(self.ring_thickness > 0.0) {
            return bad("base_gap and ring_thickness must be positive");
        }
        if self.ring_thickness >= self.base_gap * self.squash_y {
            return bad("ring_thickness must be smaller than the squashed gap");
        }
        if !(self.protrusion_amplitude >= 0.0) {
            return bad("protrusion_amplitude must be non-negative");
        }
        if !(GAP_ANGLE_RANGE.0..=GAP_ANGLE_RANGE.1).contains(&self.protrusion_angle) {
            return bad("protrusion_angle must lie in [45, 135]");
        }
        if !(self.protrusion_width > 0.0) {
            return bad("protrusion_width must be positive");
        }
        if !(self.protrusion_radial_center > 0.0 && self.protrusion_radial_center <= 1.0) {
            return bad("protrusion_radial_center must lie in (0, 1]");
        }
        if !(self.squash_y > 0.0 && self.squash_y <= 1.0) {
            return bad("squash_y must lie in (0, 1]");
        }
        if !(-20.0..=20.0).contains(&self.tilt) {
            return bad("tilt must lie in [-20, 20]");
        }
        if !(self.noise_sigma >= 0.0) {
            return bad("noise_sigma must be non-negative");
        }
        if !(0.0..=0.5).contains(&self.illumination_gradient) {
            return bad("illumination_gradient must lie in [0, 0.5]");
        }
        if !(0.0..=1.0).contains(&self.glint_density) {
            return bad("glint_density must lie in [0, 1]");
        }
        Ok(())
    }

    /// Polar radius of the unit ellipse with vertical semi-axis `squash_y`.
    pub fn envelope(&self, theta_deg: f64) -> f64 {
        let s = self.squash_y;
        let t = theta_deg.to_radians();
        s / (s * s * t.cos().powi(2) + t.sin().powi(2)).sqrt()
    }

    /// Angular protrusion profile, 1 at the protrusion angle.
    pub fn bump(&self, theta_deg: f64) -> f64 {
        let d = angle_diff(theta_deg, self.protrusion_angle) / self.protrusion_width;
        (-0.5 * d * d).exp()
    }

    /// Radial weight of step `j` (between ring `j` and ring `j + 1`).
    pub fn radial_weight(&self, step: usize) -> f64 {
        let rho = (step as f64 + 0.5) / self.ring_count as f64;
        let d = (rho - self.protrusion_radial_center) / RADIAL_SIGMA;
        (-0.5 * d * d).exp()
    }

    /// Distance between the mid-radii of ring `step` and ring `step + 1`
    /// along direction `theta_deg`.
    pub fn step(&self, theta_deg: f64, step: usize) -> f64 {
        let distortion = self.protrusion_amplitude * self.bump(theta_deg) * self.radial_weight(step);
        self.envelope(theta_deg) * self.base_gap * (1.0 + distortion)
    }

    /// Mid-radius of ring `k` (1-based; ring 1 is the solid disc).
    pub fn ring_radius(&self, theta_deg: f64, k: usize) -> f64 {
        let e = self.envelope(theta_deg);
        let g = self.protrusion_amplitude * self.bump(theta_deg);
        let mut r = e * self.base_gap;
        for j in 1..k {
            r += e * self.base_gap * (1.0 + g * self.radial_weight(j));
        }
        r
    }

    /// Noiseless distance between the midpoints of band `gap_index + 2` and
    /// band `gap_index + 3` along a ray at `theta_deg`. Gap 0 is the first
    /// gap outside the solid disc.
    pub fn gap_field(&self, theta_deg: f64, gap_index: usize) -> f64 {
        self.step(theta_deg, gap_index + 2)
    }

    /// Width and height of the noiseless pattern in the untilted frame.
    pub fn pattern_extent(&self) -> (f64, f64) {
        let half_t = self.ring_thickness / 2.0;
        let (mut min_x, mut max_x, mut max_y) = (f64::MAX, f64::MIN, f64::MIN);
        let steps = 3600;
        for i in 0..=steps {
            let theta = 180.0 * i as f64 / steps as f64;
            let r = self.ring_radius(theta, self.ring_count) + half_t;
            let t = theta.to_radians();
            min_x = min_x.min(r * t.cos());
            max_x = max_x.max(r * t.cos());
            max_y = max_y.max(r * t.sin());
        }
        let disc_bottom = self.envelope(270.0) * self.base_gap + half_t;
        (max_x - min_x, max_y + disc_bottom)
    }

    fn check_bounds(&self) -> Result<(), SynthError> {
        let half_t = self.ring_thickness / 2.0;
        let size = self.image_size as f64;
        let tilt = self.tilt.to_radians();
        let (cx, cy) = self.center;
        let check = |u: f64, v: f64| -> Result<(), SynthError> {
            // Pattern frame (y up) to image frame (y down), then tilt.
            let (qx, qy) = (u, -v);
            let x = cx + qx * tilt.cos() - qy * tilt.sin();
            let y = cy + qx * tilt.sin() + qy * tilt.cos();
            if x < 1.0 || y < 1.0 || x > size - 2.0 || y > size - 2.0 {
                return Err(SynthError::OutOfBounds {
                    size: self.image_size,
                });
            }
            Ok(())
        };
        for i in 0..=720 {
            let theta = 360.0 * i as f64 / 720.0;
            let t = theta.to_radians();
            let r = if theta <= 180.0 {
                self.ring_radius(theta, self.ring_count) + half_t
            } else {
                self.envelope(theta) * self.base_gap + half_t
            };
            check(r * t.cos(), r * t.sin())?;
        }
        // Square end caps of the outermost arc dip below the diameter.
        let r0 = self.ring_radius(0.0, self.ring_count) + half_t;
        let r180 = self.ring_radius(180.0, self.ring_count) + half_t;
        check(r0, 0.0)?;
        check(-r180, 0.0)
    }
}

/// Noiseless per-scene ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub label: CorneaLabel,
    /// `None` for control scenes.
    pub protrusion_angle: Option<f64>,
    pub protrusion_amplitude: f64,
    pub protrusion_radial_center: f64,
    pub true_center: (f64, f64),
    pub true_tilt: f64,
    /// Ray angles (degrees) at which `gap_field` is sampled.
    pub gap_angles: Vec<f64>,
    /// `gap_field[ray][gap]` in pixels.
    pub gap_field: Vec<Vec<f64>>,
    /// Untilted pattern width and height in pixels.
    pub extent: (f64, f64),
}

impl GroundTruth {
    pub fn mean_gap(&self) -> f64 {
        let (sum, n) = self
            .gap_field
            .iter()
            .flatten()
            .fold((0.0, 0usize), |(s, n), &g| (s + g, n + 1));
        sum / n as f64
    }
}

/// A rendered scene with its noiseless foreground mask.
#[derive(Debug, Clone)]
pub struct Scene {
    pub id: String,
    pub spec: SceneSpec,
    pub image: RasterImage,
    pub truth: GroundTruth,
    pub mask: BinaryMask,
}

/// Ray angles `45, 46, ..., 135`.
pub fn default_ray_angles() -> Vec<f64> {
    let (lo, hi) = GAP_ANGLE_RANGE;
    (0..=(hi - lo) as usize).map(|i| lo + i as f64).collect()
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn lattice(seed: u64, ix: i64, iy: i64) -> f64 {
    let h = splitmix64(seed ^ splitmix64((ix as u64) ^ ((iy as u64) << 32)));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Bilinear value noise in `[0, 1)`.
fn value_noise(seed: u64, x: f64, y: f64, cell: f64) -> f64 {
    let (fx, fy) = (x / cell, y / cell);
    let (ix, iy) = (fx.floor() as i64, fy.floor() as i64);
    let (tx, ty) = (fx - ix as f64, fy - iy as f64);
    let (sx, sy) = (tx * tx * (3.0 - 2.0 * tx), ty * ty * (3.0 - 2.0 * ty));
    let a = lattice(seed, ix, iy);
    let b = lattice(seed, ix + 1, iy);
    let c = lattice(seed, ix, iy + 1);
    let d = lattice(seed, ix + 1, iy + 1);
    let top = a + (b - a) * sx;
    let bottom = c + (d - c) * sx;
    top + (bottom - top) * sy
}

/// Noiseless foreground test in image coordinates.
struct Geometry<'a> {
    spec: &'a SceneSpec,
    cos_t: f64,
    sin_t: f64,
    half_t: f64,
    steps: Vec<f64>,
}

impl<'a> Geometry<'a> {
    fn new(spec: &'a SceneSpec) -> Self {
        let tilt = spec.tilt.to_radians();
        Self {
            spec,
            cos_t: tilt.cos(),
            sin_t: tilt.sin(),
            half_t: spec.ring_thickness / 2.0,
            steps: (0..spec.ring_count)
                .map(|j| spec.radial_weight(j))
                .collect(),
        }
    }

    fn is_foreground(&self, x: f64, y: f64) -> bool {
        let spec = self.spec;
        let (dx, dy) = (x - spec.center.0, y - spec.center.1);
        // Undo the tilt, then flip to y-up.
        let qx = dx * self.cos_t + dy * self.sin_t;
        let qy = -dx * self.sin_t + dy * self.cos_t;
        let (u, v) = (qx, -qy);
        let rho = u.hypot(v);
        let theta = v.atan2(u).to_degrees();
        let e = spec.envelope(theta);
        let unit = e * spec.base_gap;
        let r1 = unit;
        if rho <= r1 + self.half_t {
            return true;
        }
        if v < 0.0 {
            return false;
        }
        let g = spec.protrusion_amplitude * spec.bump(theta);
        let mut r = r1;
        for j in 1..spec.ring_count {
            r += unit * (1.0 + g * self.steps[j]);
            if (rho - r).abs() <= self.half_t {
                return true;
            }
            if rho < r - self.half_t {
                return false;
            }
        }
        false
    }
}

/// Render the noiseless mask only.
pub fn render_mask(spec: &SceneSpec) -> Result<BinaryMask, SynthError> {
    spec.validate()?;
    spec.check_bounds()?;
    let geo = Geometry::new(spec);
    let n = spec.image_size;
    Ok(BinaryMask::from_fn(n, n, |x, y| {
        geo.is_foreground(x as f64, y as f64)
    }))
}

pub fn ground_truth(spec: &SceneSpec) -> GroundTruth {
    let angles = default_ray_angles();
    let gap_field = angles
        .iter()
        .map(|&a| (0..spec.gap_count()).map(|i| spec.gap_field(a, i)).collect())
        .collect();
    let label = spec.label();
    GroundTruth {
        label,
        protrusion_angle: label.is_kc().then_some(spec.protrusion_angle),
        protrusion_amplitude: spec.protrusion_amplitude,
        protrusion_radial_center: spec.protrusion_radial_center,
        true_center: spec.center,
        true_tilt: spec.tilt,
        gap_angles: angles,
        gap_field,
        extent: spec.pattern_extent(),
    }
}

/// Render a photograph-like image, its ground truth and noiseless mask.
/// Deterministic given the spec (including `rng_seed`).
pub fn render_scene(spec: &SceneSpec) -> Result<(RasterImage, GroundTruth, BinaryMask), SynthError> {
    let mask = render_mask(spec)?;
    let n = spec.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let texture_seed = rng.next_u64();
    let light_dir = rng.random_range(0.0..2.0 * PI);
    let (lx, ly) = (light_dir.cos(), light_dir.sin());
    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let half = n as f64 / 2.0;
    // Projection of a corner onto the light direction, for normalization.
    let reach = half * (lx.abs() + ly.abs());

    let mut pixels = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            let (xf, yf) = (x as f64, y as f64);
            let proj = ((xf - half) * lx + (yf - half) * ly) / reach;
            let light = 1.0 - spec.illumination_gradient * 0.5 * (1.0 + proj);
            let base = if mask.get(x, y) {
                FOREGROUND
            } else if spec.glint_density > 0.0 && rng.random_bool(spec.glint_density) {
                GLINT
            } else {
                let tex = 0.55
                    + 0.45 * value_noise(texture_seed, xf, yf, 23.0)
                    + 0.25 * value_noise(texture_seed ^ 0xA5A5, xf, yf, 6.0);
                BACKGROUND.map(|c| c * tex)
            };
            let px = base.map(|c| {
                let jitter = if spec.noise_sigma > 0.0 {
                    noise.sample(&mut rng)
                } else {
                    0.0
                };
                (c * light + jitter).round().clamp(0.0, 255.0) as u8
            });
            pixels.push(px);
        }
    }
    let image = RasterImage::from_pixels(n, n, pixels).expect("square canvas");
    Ok((image, ground_truth(spec), mask))
}

/// Scene parameters drawn for one corpus member. Nuisance parameters are
/// jittered for both classes; keratoconic scenes additionally draw the
/// protrusion amplitude, angle and radial position.
pub fn draw_scene_spec<R: Rng>(base: &SceneSpec, label: CorneaLabel, rng: &mut R) -> SceneSpec {
    let mut spec = base.clone();
    spec.tilt = rng.random_range(-20.0..=20.0);
    spec.center = (
        base.center.0 + rng.random_range(-20.0..=20.0),
        base.center.1 + rng.random_range(-20.0..=20.0),
    );
    spec.noise_sigma = rng.random_range(2.0..=10.0);
    spec.illumination_gradient = rng.random_range(0.0..=0.3);
    spec.glint_density = rng.random_range(0.0..=0.001);
    match label {
        CorneaLabel::Control => {
            spec.protrusion_amplitude = 0.0;
        }
        CorneaLabel::Kc => {
            spec.protrusion_amplitude = rng.random_range(0.25..=0.6);
            spec.protrusion_angle = rng.random_range(45.0..=135.0);
            spec.protrusion_radial_center = rng.random_range(0.4..=0.8);
            spec.squash_y = KC_SQUASH_Y;
        }
    }
    spec.rng_seed = rng.next_u64();
    spec
}

pub fn scene_id(index: usize) -> String {
    format!("scene_{index:03}")
}

/// Specs for `n_control` control scenes followed by `n_kc` keratoconic ones.
pub fn corpus_specs(
    n_control: usize,
    n_kc: usize,
    base: &SceneSpec,
    seed: u64,
) -> Result<Vec<SceneSpec>, SynthError> {
    if n_control == 0 || n_kc == 0 {
        return Err(SynthError::EmptyCorpus);
    }
    base.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = std::iter::repeat_n(CorneaLabel::Control, n_control)
        .chain(std::iter::repeat_n(CorneaLabel::Kc, n_kc));
    Ok(labels
        .map(|label| draw_scene_spec(base, label, &mut rng))
        .collect())
}

pub fn make_corpus(
    n_control: usize,
    n_kc: usize,
    base: &SceneSpec,
    seed: u64,
) -> Result<Vec<Scene>, SynthError> {
    corpus_specs(n_control, n_kc, base, seed)?
        .into_iter()
        .enumerate()
        .map(|(i, spec)| {
            let (image, truth, mask) = render_scene(&spec)?;
            Ok(Scene {
                id: scene_id(i),
                spec,
                image,
                truth,
                mask,
            })
        })
        .collect()
}

/// Writes `image.ppm`, `mask.pbm`, `truth.json` and `spec.json`.
pub fn write_scene_dir(scene: &Scene, dir: &Path) -> Result<(), SynthError> {
    fs::create_dir_all(dir)?;
    scene
        .image
        .write_ppm(io::BufWriter::new(fs::File::create(dir.join("image.ppm"))?))?;
    scene
        .mask
        .write_pbm(io::BufWriter::new(fs::File::create(dir.join("mask.pbm"))?))?;
    fs::write(
        dir.join("truth.json"),
        serde_json::to_string_pretty(&scene.truth)?,
    )?;
    fs::write(
        dir.join("spec.json"),
        serde_json::to_string_pretty(&scene.spec)?,
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(spec: SceneSpec) -> SceneSpec {
        SceneSpec {
            image_size: 400,
            center: (200.0, 260.0),
            base_gap: 16.0,
            ring_thickness: 5.0,
            ..spec
        }
    }

    #[test]
    fn baseline_gaps_equal_envelope_times_gap() {
        let spec = SceneSpec {
            squash_y: 1.0,
            ..SceneSpec::default()
        };
        let truth = ground_truth(&spec);
        for row in &truth.gap_field {
            for &g in row {
                assert!((g - spec.base_gap).abs() < 0.5);
            }
        }
    }

    /// Independent evaluation of the bump for a=0.4, width 15°.
    #[test]
    fn protrusion_ratio_at_peak() {
        let spec = SceneSpec {
            protrusion_amplitude: 0.4,
            protrusion_angle: 90.0,
            protrusion_width: 15.0,
            ..SceneSpec::default()
        };
        let best = (0..spec.gap_count())
            .map(|i| spec.gap_field(90.0, i) / spec.gap_field(45.0, i))
            .fold(f64::MIN, f64::max);
        // Oracle: ring radii read off the ellipse, bump = exp(-(45/15)^2/2).
        let s: f64 = 0.85;
        let e90 = s;
        let e45 = s / ((s * s + 1.0) / 2.0f64).sqrt();
        let g45 = (-4.5f64).exp();
        let h_peak = (0..8)
            .map(|j| {
                let rho = (j as f64 + 0.5) / 8.0;
                (-0.5 * ((rho - 0.6) / 0.3).powi(2)).exp()
            })
            .skip(2)
            .fold(f64::MIN, f64::max);
        let oracle = e90 * (1.0 + 0.4 * h_peak) / (e45 * (1.0 + 0.4 * g45 * h_peak));
        assert!((best - oracle).abs() < 1e-9, "{best} vs {oracle}");
        assert!(best > 1.2);
    }

    #[test]
    fn rendering_is_deterministic() {
        let spec = small(SceneSpec {
            protrusion_amplitude: 0.3,
            noise_sigma: 6.0,
            illumination_gradient: 0.2,
            glint_density: 0.001,
            tilt: 7.0,
            rng_seed: 99,
            ..SceneSpec::default()
        });
        let (a, ta, ma) = render_scene(&spec).unwrap();
        let (b, tb, mb) = render_scene(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        assert_eq!(ma, mb);
    }

    #[test]
    fn out_of_bounds_pattern_is_rejected() {
        let spec = SceneSpec {
            base_gap: 80.0,
            ..SceneSpec::default()
        };
        assert!(matches!(
            render_scene(&spec),
            Err(SynthError::OutOfBounds { .. })
        ));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        for spec in [
            SceneSpec {
                ring_count: 2,
                ..SceneSpec::default()
            },
            SceneSpec {
                protrusion_angle: 30.0,
                ..SceneSpec::default()
            },
            SceneSpec {
                tilt: 25.0,
                ..SceneSpec::default()
            },
            SceneSpec {
                squash_y: 0.0,
                ..SceneSpec::default()
            },
        ] {
            assert!(matches!(spec.validate(), Err(SynthError::InvalidSpec(_))));
        }
    }

    #[test]
    fn kc_gap_exceeds_far_angles() {
        let spec = SceneSpec {
            protrusion_amplitude: 0.3,
            protrusion_angle: 70.0,
            protrusion_width: 20.0,
            squash_y: 1.0,
            ..SceneSpec::default()
        };
        for i in 0..spec.gap_count() {
            let peak = spec.gap_field(70.0, i);
            for far in [110.0, 115.0, 135.0] {
                assert!(peak > spec.gap_field(far, i));
            }
        }
    }

    #[test]
    fn amplitude_increases_every_gap_at_the_protrusion() {
        let mut spec = SceneSpec::default();
        let mut previous: Vec<f64> = (0..spec.gap_count())
            .map(|i| spec.gap_field(spec.protrusion_angle, i))
            .collect();
        for a in [0.05, 0.1, 0.3, 0.6, 1.0] {
            spec.protrusion_amplitude = a;
            let now: Vec<f64> = (0..spec.gap_count())
                .map(|i| spec.gap_field(spec.protrusion_angle, i))
                .collect();
            assert!(now.iter().zip(&previous).all(|(n, p)| n > p));
            previous = now;
        }
    }

    #[test]
    fn corpus_bookkeeping() {
        let specs = corpus_specs(25, 25, &SceneSpec::default(), 1).unwrap();
        assert_eq!(specs.len(), 50);
        assert_eq!(
            specs
                .iter()
                .filter(|s| s.label() == CorneaLabel::Control)
                .count(),
            25
        );
        assert_eq!(specs, corpus_specs(25, 25, &SceneSpec::default(), 1).unwrap());
        for s in &specs {
            s.validate().unwrap();
            s.check_bounds().unwrap();
            if s.label().is_kc() {
                assert!((0.25..=0.6).contains(&s.protrusion_amplitude));
                assert!((45.0..=135.0).contains(&s.protrusion_angle));
            }
        }
        assert!(matches!(
            corpus_specs(0, 5, &SceneSpec::default(), 1),
            Err(SynthError::EmptyCorpus)
        ));
    }

    #[test]
    fn kc_mean_gap_exceeds_control() {
        let specs = corpus_specs(1, 1, &SceneSpec::default(), 7).unwrap();
        let control = ground_truth(&specs[0]);
        let kc = ground_truth(&specs[1]);
        assert_eq!(kc.label, CorneaLabel::Kc);
        // Each KC step is e(θ)·gap·(1 + a·g·h) with a·g·h > 0 and e ≡ 1, while
        // control steps are e(θ)·gap with e(θ) ≤ 1.
        let oracle_control: f64 = default_ray_angles()
            .iter()
            .map(|&t| {
                let s: f64 = 0.85;
                let r = t.to_radians();
                s / (s * s * r.cos().powi(2) + r.sin().powi(2)).sqrt() * 40.0
            })
            .sum::<f64>()
            / 91.0;
        assert!((control.mean_gap() - oracle_control).abs() < 1e-9);
        assert!(kc.mean_gap() > control.mean_gap());
        assert!(kc.mean_gap() > 40.0);
    }

    #[test]
    fn mask_matches_analytic_radii_on_axis() {
        let spec = SceneSpec::default();
        let mask = render_mask(&spec).unwrap();
        let (cx, cy) = (512usize, 600usize);
        // Straight up from the center: rings at 34, 68, ... (gap 40 · 0.85).
        for k in 2..=spec.ring_count {
            let r = spec.ring_radius(90.0, k);
            assert!((r - 0.85 * 40.0 * k as f64).abs() < 1e-9);
            assert!(mask.get(cx, cy - r.round() as usize));
            assert!(!mask.get(cx, cy - (r + 10.0).round() as usize));
        }
        // Lower half holds the disc only.
        assert!(mask.get(cx, cy + 30));
        assert!(!mask.get(cx, cy + 60));
    }
}
