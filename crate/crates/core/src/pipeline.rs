//! End-to-end wiring of the stages, driven by one configuration document.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classify::{
    classify_cornea, extract_dims, fit_kmeans, ClassifyError, CorneaCall, DimFeatures, KMeansFit,
    KMeansModel, KMeansParams,
};
use crate::geometry::{
    correct_orientation, crop_roi, estimate_orientation, find_center_disc, remove_specks,
    GeometryError, OrientationEstimate, RoiCrop, Rotation,
};
use crate::localize::{
    build_distance_matrix, cast_rays, fit_logistic, locate_hotspot, ColorWindow, DistanceMatrix,
    Hotspot, LocalizeError, LogisticFit, LogisticModel, LogisticParams,
};
use crate::morphology::{connected_components, open_close, BinaryMask, Connectivity, StructuringElement};
use crate::raster::RasterImage;
use crate::segmenter::{segment, train_tree, ClassificationTree, LabeledPixelSet, TreeError, TreeParams};
use crate::synth::SceneSpec;
use crate::CorneaLabel;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Localize(#[from] LocalizeError),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Classify(#[from] ClassifyError),
}

impl PipelineError {
    pub fn is_no_center_disc(&self) -> bool {
        matches!(self, PipelineError::Geometry(GeometryError::NoCenterDisc))
    }

    pub fn is_no_gaps(&self) -> bool {
        matches!(self, PipelineError::Localize(LocalizeError::NoMeasurableGaps))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub n_control: usize,
    pub n_kc: usize,
    /// Base scene; per-scene parameters are drawn around it.
    pub scene: SceneSpec,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_control: 25,
            n_kc: 25,
            scene: SceneSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegmenterConfig {
    pub max_depth: usize,
    pub min_leaf: usize,
    /// Stratified training pixels drawn from each training scene.
    pub pixels_per_scene: usize,
    /// Scenes per class kept out of segmenter training for evaluation.
    pub heldout_per_class: usize,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        Self {
            max_depth: 8,
            min_leaf: 16,
            pixels_per_scene: 3000,
            heldout_per_class: 7,
        }
    }
}

impl SegmenterConfig {
    pub fn tree_params(&self) -> TreeParams {
        TreeParams {
            max_depth: self.max_depth,
            min_leaf: self.min_leaf,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MorphologyConfig {
    /// Side of the square structuring element.
    pub se_size: usize,
}

impl Default for MorphologyConfig {
    fn default() -> Self {
        Self { se_size: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RayConfig {
    pub angle_min: f64,
    pub angle_max: f64,
    pub angle_step: f64,
    /// Fixed matrix width; `None` uses the longest ray.
    pub max_gaps: Option<usize>,
}

impl Default for RayConfig {
    fn default() -> Self {
        Self {
            angle_min: 45.0,
            angle_max: 135.0,
            angle_step: 1.0,
            max_gaps: None,
        }
    }
}

impl RayConfig {
    pub fn angles(&self) -> Vec<f64> {
        let n = ((self.angle_max - self.angle_min) / self.angle_step + 1e-9).floor() as usize;
        (0..=n)
            .map(|i| self.angle_min + i as f64 * self.angle_step)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LogisticConfig {
    pub l2: f64,
    pub max_iter: usize,
    pub tol: f64,
    /// Fraction of distance cells held out when reporting cell accuracy.
    pub holdout_fraction: f64,
}

impl Default for LogisticConfig {
    fn default() -> Self {
        let p = LogisticParams::default();
        Self {
            l2: p.l2,
            max_iter: p.max_iter,
            tol: p.tol,
            holdout_fraction: 0.3,
        }
    }
}

impl LogisticConfig {
    pub fn params(&self) -> LogisticParams {
        LogisticParams {
            l2: self.l2,
            max_iter: self.max_iter,
            tol: self.tol,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ColormapConfig {
    /// Width of the rendered wedge in pixels.
    pub size: usize,
    /// Fixed window; `None` takes the 1st–99th percentile of training cells.
    pub window: Option<ColorWindow>,
}

impl Default for ColormapConfig {
    fn default() -> Self {
        Self {
            size: 512,
            window: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub segmenter: SegmenterConfig,
    pub morphology: MorphologyConfig,
    pub kmeans: KMeansParams,
    pub rays: RayConfig,
    pub logistic: LogisticConfig,
    pub colormap: ColormapConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            corpus: CorpusConfig::default(),
            segmenter: SegmenterConfig::default(),
            morphology: MorphologyConfig::default(),
            kmeans: KMeansParams::default(),
            rays: RayConfig::default(),
            logistic: LogisticConfig::default(),
            colormap: ColormapConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let fail = |m: &str| Err(PipelineError::Config(m.to_string()));
        self.corpus
            .scene
            .validate()
            .map_err(|e| PipelineError::Config(format!("corpus.scene: {e}")))?;
        if self.segmenter.min_leaf < 1 {
            return fail("segmenter.min_leaf must be at least 1");
        }
        if self.segmenter.pixels_per_scene < 2 {
            return fail("segmenter.pixels_per_scene must be at least 2");
        }
        if self.morphology.se_size.is_multiple_of(2) {
            return fail("morphology.se_size must be odd");
        }
        if self.kmeans.k != 2 {
            return fail("kmeans.k must be 2");
        }
        if self.kmeans.max_iter == 0 || !(self.kmeans.tol >= 0.0) {
            return fail("kmeans.max_iter must be positive and kmeans.tol non-negative");
        }
        let r = &self.rays;
        if !(r.angle_step > 0.0
            && r.angle_min >= 0.0
            && r.angle_max <= 180.0
            && r.angle_min <= r.angle_max)
        {
            return fail("rays need 0 <= angle_min <= angle_max <= 180 and angle_step > 0");
        }
        if r.max_gaps == Some(0) {
            return fail("rays.max_gaps must be positive");
        }
        let l = &self.logistic;
        if !(l.l2 >= 0.0 && l.tol > 0.0 && l.max_iter > 0) {
            return fail("logistic needs l2 >= 0, tol > 0 and max_iter > 0");
        }
        if !(l.holdout_fraction > 0.0 && l.holdout_fraction < 1.0) {
            return fail("logistic.holdout_fraction must lie in (0, 1)");
        }
        if self.colormap.size < 16 {
            return fail("colormap.size must be at least 16");
        }
        if let Some(w) = self.colormap.window {
            if !(w.d_min < w.d_max) {
                return fail("colormap.window needs d_min < d_max");
            }
        }
        Ok(())
    }

    pub fn structuring_element(&self) -> StructuringElement {
        StructuringElement::square(self.morphology.se_size)
    }
}

/// Intermediate products of the preprocessing chain.
#[derive(Debug, Clone)]
pub struct Preprocessed {
    /// Cleaned, speck-filtered mask in source coordinates.
    pub mask: BinaryMask,
    pub orientation: OrientationEstimate,
    pub rotation: Rotation,
    pub crop: RoiCrop,
    /// Ray origin in crop coordinates.
    pub origin: (f64, f64),
}

/// Segment with the tree, then run [`preprocess_mask`].
pub fn preprocess(
    image: &RasterImage,
    tree: &ClassificationTree,
    config: &PipelineConfig,
) -> Result<Preprocessed, PipelineError> {
    preprocess_mask(image, &segment(tree, image), config)
}

/// Open-close, center disc, orientation correction and crop.
pub fn preprocess_mask(
    image: &RasterImage,
    raw: &BinaryMask,
    config: &PipelineConfig,
) -> Result<Preprocessed, PipelineError> {
    let cleaned = open_close(raw, &config.structuring_element());
    let mask = remove_specks(&cleaned);
    if mask.is_empty() {
        return Err(GeometryError::EmptyMask.into());
    }
    find_center_disc(&connected_components(&mask, Connectivity::Eight))?;
    let orientation = estimate_orientation(&mask)?;
    let leveled = correct_orientation(image, &mask, &orientation);
    let crop = crop_roi(&leveled.image, &leveled.mask)?;
    let origin = crop.center_disc_centroid.ok_or(GeometryError::NoCenterDisc)?;
    Ok(Preprocessed {
        mask,
        orientation,
        rotation: leveled.rotation,
        crop,
        origin,
    })
}

pub fn measure_matrix(prep: &Preprocessed, config: &PipelineConfig) -> Result<DistanceMatrix, PipelineError> {
    let rays = cast_rays(&prep.crop.mask, prep.origin, &config.rays.angles())?;
    Ok(build_distance_matrix(&rays, config.rays.max_gaps)?)
}

/// Everything measured on one scene.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneMeasurement {
    pub scene: String,
    pub dims: DimFeatures,
    pub orientation: OrientationEstimate,
    pub matrix: DistanceMatrix,
}

pub fn measure_scene(
    scene: &str,
    image: &RasterImage,
    tree: &ClassificationTree,
    config: &PipelineConfig,
) -> Result<SceneMeasurement, PipelineError> {
    let prep = preprocess(image, tree, config)?;
    measure_preprocessed(scene, &prep, config)
}

pub fn measure_preprocessed(
    scene: &str,
    prep: &Preprocessed,
    config: &PipelineConfig,
) -> Result<SceneMeasurement, PipelineError> {
    Ok(SceneMeasurement {
        scene: scene.to_string(),
        dims: extract_dims(&prep.crop, scene),
        orientation: prep.orientation,
        matrix: measure_matrix(prep, config)?,
    })
}

/// Train the pixel tree on stratified samples from `(id, image, truth mask)`.
pub fn train_segmenter<'a, R: Rng>(
    scenes: impl IntoIterator<Item = (&'a str, &'a RasterImage, &'a BinaryMask)>,
    config: &PipelineConfig,
    rng: &mut R,
) -> Result<ClassificationTree, PipelineError> {
    let mut data = LabeledPixelSet::new();
    for (id, image, mask) in scenes {
        data.extend(LabeledPixelSet::sample_scene(
            id,
            image,
            mask,
            config.segmenter.pixels_per_scene,
            rng,
        ));
    }
    Ok(train_tree(&data, &config.segmenter.tree_params())?)
}

/// Every present matrix cell labelled with its scene's class.
pub fn labeled_cells<'a>(
    scenes: impl IntoIterator<Item = (&'a SceneMeasurement, CorneaLabel)>,
) -> Vec<(f64, CorneaLabel)> {
    scenes
        .into_iter()
        .flat_map(|(m, l)| m.matrix.cells().map(move |(_, _, d)| (d, l)))
        .collect()
}

/// Distance cells labeled by their source scene.
pub type LabeledCells = Vec<(f64, CorneaLabel)>;

/// Random train/test split; `holdout` is the test fraction.
pub fn split_cells<R: Rng>(
    cells: &[(f64, CorneaLabel)],
    holdout: f64,
    rng: &mut R,
) -> (LabeledCells, LabeledCells) {
    let mut shuffled = cells.to_vec();
    shuffled.shuffle(rng);
    let n_test = (cells.len() as f64 * holdout).round() as usize;
    let train = shuffled.split_off(n_test);
    (train, shuffled)
}

pub fn cell_accuracy(model: &LogisticModel, cells: &[(f64, CorneaLabel)]) -> f64 {
    if cells.is_empty() {
        return f64::NAN;
    }
    cells.iter().filter(|&&(d, l)| model.label(d) == l).count() as f64 / cells.len() as f64
}

/// Fitted stage-1 and stage-2 models.
#[derive(Debug, Clone)]
pub struct StageModels {
    pub kmeans: KMeansFit,
    pub logistic: LogisticFit,
    pub window: ColorWindow,
}

pub fn fit_stage_models<R: Rng>(
    measurements: &[(SceneMeasurement, CorneaLabel)],
    config: &PipelineConfig,
    rng: &mut R,
) -> Result<StageModels, PipelineError> {
    let points: Vec<[f64; 2]> = measurements.iter().map(|(m, _)| m.dims.point()).collect();
    let kmeans = fit_kmeans(&points, &config.kmeans, rng)?;
    let cells = labeled_cells(measurements.iter().map(|(m, l)| (m, *l)));
    let logistic = fit_logistic(&cells, &config.logistic.params())?;
    let distances: Vec<f64> = cells.iter().map(|c| c.0).collect();
    let window = match config.colormap.window {
        Some(w) => w,
        None => ColorWindow::from_distances(&distances).ok_or(LocalizeError::SingleClassData)?,
    };
    Ok(StageModels {
        kmeans,
        logistic,
        window,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stage1 {
    pub dims: DimFeatures,
    pub call: CorneaCall,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stage2 {
    pub matrix: DistanceMatrix,
    pub hotspot: Hotspot,
    pub kc_cells: usize,
    pub present_cells: usize,
}

#[derive(Debug)]
pub struct Diagnosis {
    pub preprocessed: Preprocessed,
    pub stage1: Stage1,
    /// Stage-2 result, or the error that stopped it.
    pub stage2: Result<Stage2, PipelineError>,
}

/// Run both stages on one image. Preprocessing failures abort; a stage-2
/// failure is carried inside the result so stage 1 can still be reported.
pub fn diagnose(
    scene: &str,
    image: &RasterImage,
    tree: &ClassificationTree,
    kmeans: &KMeansModel,
    logistic: &LogisticModel,
    config: &PipelineConfig,
) -> Result<Diagnosis, PipelineError> {
    let prep = preprocess(image, tree, config)?;
    let dims = extract_dims(&prep.crop, scene);
    let call = classify_cornea(kmeans, &dims);
    let stage2 = measure_matrix(&prep, config).map(|matrix| {
        let hotspot = locate_hotspot(&matrix, logistic);
        Stage2 {
            kc_cells: hotspot.kc_cells,
            present_cells: matrix.present_count(),
            matrix,
            hotspot,
        }
    });
    Ok(Diagnosis {
        preprocessed: prep,
        stage1: Stage1 { dims, call },
        stage2,
    })
}
