//! Commands behind the `kcdiag` binary.
//!
//! Every command is deterministic given the seed and configuration, and
//! writes pretty-printed JSON without timestamps.

use std::collections::BTreeMap;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use placido::classify::{classify_cornea, KMeansModel};
use placido::geometry::GeometryError;
use placido::localize::{
    render_colormap, ColorWindow, DistanceMatrix, Hotspot, LocalizeError, LogisticModel,
};
use placido::morphology::{BBox, BinaryMask};
use placido::pipeline::{
    cell_accuracy, diagnose, fit_stage_models, labeled_cells, measure_scene, split_cells,
    train_segmenter, PipelineConfig, PipelineError, SceneMeasurement,
};
use placido::raster::RasterImage;
use placido::segmenter::{evaluate_tree, segment, ClassificationTree, LabeledPixelSet, TreeError};
use placido::stats::{box_stats, compare, format_p, BoxStats, GroupSample, TestReport};
use placido::synth::{corpus_specs, render_scene, scene_id, write_scene_dir, GroundTruth, Scene};
use placido::classify::ClassifyError;
use placido::CorneaLabel;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub mod exit {
    pub const OK: u8 = 0;
    pub const USAGE: u8 = 2;
    pub const PREPROCESSING: u8 = 3;
    pub const DEGENERATE: u8 = 4;
    pub const NO_CENTER_DISC: u8 = 5;
    pub const NO_GAPS: u8 = 6;
}

pub const MANIFEST: &str = "manifest.json";
pub const TREE_FILE: &str = "tree.json";
pub const KMEANS_FILE: &str = "kmeans.json";
pub const LOGISTIC_FILE: &str = "logistic.json";
pub const DIAGNOSIS_DIR: &str = "diagnosis";
/// Angular tolerance for counting a hotspot as correctly placed.
pub const LOCALIZATION_TOLERANCE: f64 = 10.0;

/// An error together with the process exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn new(code: u8, error: impl Into<anyhow::Error>) -> Self {
        Self {
            code,
            error: error.into(),
        }
    }

    fn from_pipeline(e: PipelineError) -> Self {
        let code = match &e {
            PipelineError::Geometry(GeometryError::NoCenterDisc) => exit::NO_CENTER_DISC,
            PipelineError::Localize(LocalizeError::NoMeasurableGaps) => exit::NO_GAPS,
            PipelineError::Tree(TreeError::SingleClass)
            | PipelineError::Localize(LocalizeError::SingleClassData)
            | PipelineError::Classify(ClassifyError::FewerDistinctPointsThanK { .. }) => {
                exit::DEGENERATE
            }
            PipelineError::Config(_) => exit::USAGE,
            _ => exit::PREPROCESSING,
        };
        Self::new(code, e)
    }
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        Self {
            code: exit::USAGE,
            error,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

pub type CmdResult<T> = Result<T, Failure>;

/// Load a TOML configuration, or the built-in defaults when `path` is `None`.
pub fn load_config(path: Option<&Path>) -> CmdResult<PipelineConfig> {
    let config = match path {
        None => PipelineConfig::default(),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
    };
    config.validate().map_err(Failure::from_pipeline)?;
    Ok(config)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn sha256_file(path: &Path) -> anyhow::Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Run `f` over `items` on a pool of `jobs` workers (0 = one per core),
/// keeping input order.
fn par_map<T: Sync, R: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .expect("thread pool");
    pool.install(|| items.par_iter().map(&f).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub label: CorneaLabel,
    /// Scene directory relative to the corpus root.
    pub dir: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub scenes: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(corpus: &Path) -> CmdResult<Self> {
        Ok(read_json(&corpus.join(MANIFEST))?)
    }

    pub fn count(&self, label: CorneaLabel) -> usize {
        self.scenes.iter().filter(|s| s.label == label).count()
    }
}

/// Render a corpus: one directory per scene plus `manifest.json`.
pub fn cmd_synth(
    n_control: usize,
    n_kc: usize,
    seed: u64,
    out_dir: &Path,
    config: &PipelineConfig,
    jobs: usize,
) -> CmdResult<Manifest> {
    if n_control == 0 {
        return Err(Failure::new(exit::USAGE, anyhow!("need ≥1 control scene")));
    }
    if n_kc == 0 {
        return Err(Failure::new(exit::USAGE, anyhow!("need ≥1 kc scene")));
    }
    let specs = corpus_specs(n_control, n_kc, &config.corpus.scene, seed)
        .map_err(|e| Failure::new(exit::USAGE, e))?;
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let indexed: Vec<_> = specs.into_iter().enumerate().collect();
    let written = par_map(&indexed, jobs, |(i, spec)| -> anyhow::Result<ManifestEntry> {
        let id = scene_id(*i);
        let (image, truth, mask) = render_scene(spec).with_context(|| format!("rendering {id}"))?;
        let scene = Scene {
            id: id.clone(),
            spec: spec.clone(),
            image,
            truth,
            mask,
        };
        write_scene_dir(&scene, &out_dir.join(&id)).with_context(|| format!("writing {id}"))?;
        Ok(ManifestEntry {
            label: spec.label(),
            dir: id.clone(),
            id,
        })
    });
    let scenes = written.into_iter().collect::<anyhow::Result<Vec<_>>>()?;
    let manifest = Manifest { seed, scenes };
    write_json(&out_dir.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

struct LoadedScene {
    entry: ManifestEntry,
    image: RasterImage,
    mask: Option<BinaryMask>,
}

fn load_scene(corpus: &Path, entry: &ManifestEntry, with_mask: bool) -> anyhow::Result<LoadedScene> {
    let dir = corpus.join(&entry.dir);
    let image = RasterImage::load(&dir.join("image.ppm"))
        .with_context(|| format!("{}: loading image", entry.id))?;
    let mask = if with_mask {
        let file = fs::File::open(dir.join("mask.pbm"))
            .with_context(|| format!("{}: opening mask", entry.id))?;
        Some(
            BinaryMask::read_pbm(std::io::BufReader::new(file))
                .with_context(|| format!("{}: reading mask", entry.id))?,
        )
    } else {
        None
    };
    Ok(LoadedScene {
        entry: entry.clone(),
        image,
        mask,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmenterMetrics {
    pub train_scenes: Vec<String>,
    pub heldout_scenes: Vec<String>,
    /// Held-out pixel accuracy per class of source scene.
    pub pixel_accuracy: BTreeMap<CorneaLabel, f64>,
    pub depth: usize,
    pub leaves: usize,
}

/// The last `heldout_per_class` scenes of each class (at least one scene of
/// each class stays in training).
fn heldout_ids(manifest: &Manifest, per_class: usize) -> Vec<String> {
    let mut out = Vec::new();
    for label in [CorneaLabel::Control, CorneaLabel::Kc] {
        let ids: Vec<_> = manifest.scenes.iter().filter(|s| s.label == label).collect();
        let n = per_class.min(ids.len().saturating_sub(1));
        out.extend(ids[ids.len() - n..].iter().map(|s| s.id.clone()));
    }
    out
}

fn check_classes(manifest: &Manifest, min: usize) -> CmdResult<()> {
    for label in [CorneaLabel::Control, CorneaLabel::Kc] {
        if manifest.count(label) < min {
            return Err(Failure::new(
                exit::DEGENERATE,
                anyhow!("corpus needs at least {min} {label} scenes, found {}", manifest.count(label)),
            ));
        }
    }
    Ok(())
}

fn train_tree_on(
    scenes: &[LoadedScene],
    manifest: &Manifest,
    config: &PipelineConfig,
    seed: u64,
    jobs: usize,
) -> CmdResult<(ClassificationTree, SegmenterMetrics)> {
    let held = heldout_ids(manifest, config.segmenter.heldout_per_class);
    let is_held = |s: &LoadedScene| held.contains(&s.entry.id);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tree = train_segmenter(
        scenes.iter().filter(|s| !is_held(s)).map(|s| {
            (
                s.entry.id.as_str(),
                &s.image,
                s.mask.as_ref().expect("mask loaded"),
            )
        }),
        config,
        &mut rng,
    )
    .map_err(Failure::from_pipeline)?;
    let heldout: Vec<&LoadedScene> = scenes.iter().filter(|s| is_held(s)).collect();
    let accs = par_map(&heldout, jobs, |s| {
        let set = LabeledPixelSet::from_image(&s.image, s.mask.as_ref().expect("mask loaded"));
        (s.entry.label, evaluate_tree(&tree, &set).unwrap_or(f64::NAN))
    });
    let mut pixel_accuracy = BTreeMap::new();
    for label in [CorneaLabel::Control, CorneaLabel::Kc] {
        let v: Vec<f64> = accs.iter().filter(|a| a.0 == label).map(|a| a.1).collect();
        if !v.is_empty() {
            pixel_accuracy.insert(label, v.iter().sum::<f64>() / v.len() as f64);
        }
    }
    let metrics = SegmenterMetrics {
        train_scenes: scenes
            .iter()
            .filter(|s| !is_held(s))
            .map(|s| s.entry.id.clone())
            .collect(),
        heldout_scenes: held,
        pixel_accuracy,
        depth: tree.depth(),
        leaves: tree.leaf_count(),
    };
    Ok((tree, metrics))
}

fn load_corpus(corpus: &Path, with_masks: bool, jobs: usize) -> CmdResult<(Manifest, Vec<LoadedScene>)> {
    let manifest = Manifest::load(corpus)?;
    let scenes = par_map(&manifest.scenes, jobs, |e| load_scene(corpus, e, with_masks))
        .into_iter()
        .collect::<anyhow::Result<Vec<_>>>()?;
    Ok((manifest, scenes))
}

/// Train only the pixel classifier; writes `tree.json` and `segmenter_metrics.json`.
pub fn cmd_train_segmenter(
    corpus: &Path,
    out_dir: &Path,
    config: &PipelineConfig,
    seed: u64,
    jobs: usize,
) -> CmdResult<SegmenterMetrics> {
    let (manifest, scenes) = load_corpus(corpus, true, jobs)?;
    check_classes(&manifest, 1)?;
    let (tree, metrics) = train_tree_on(&scenes, &manifest, config, seed, jobs)?;
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    write_json(&out_dir.join(TREE_FILE), &tree)?;
    write_json(&out_dir.join("segmenter_metrics.json"), &metrics)?;
    Ok(metrics)
}

/// Stage-2 model file: logistic coefficients plus the shared color window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogisticFile {
    pub beta0: f64,
    pub beta1: f64,
    pub d_min: f64,
    pub d_max: f64,
}

impl LogisticFile {
    pub fn model(&self) -> LogisticModel {
        LogisticModel {
            beta0: self.beta0,
            beta1: self.beta1,
        }
    }

    pub fn window(&self) -> ColorWindow {
        ColorWindow {
            d_min: self.d_min,
            d_max: self.d_max,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub test: TestReport,
    pub p_display: String,
    pub control: BoxStats,
    pub kc: BoxStats,
}

fn group_stats(cells: &[(f64, CorneaLabel)]) -> CmdResult<GroupStats> {
    let pick = |kc: bool| -> Vec<f64> {
        cells.iter().filter(|c| c.1.is_kc() == kc).map(|c| c.0).collect()
    };
    let (kc, control) = (pick(true), pick(false));
    let degenerate = |e| Failure::new(exit::DEGENERATE, anyhow!("group statistics: {e}"));
    let test = compare(
        &GroupSample::new(kc.clone()).map_err(degenerate)?,
        &GroupSample::new(control.clone()).map_err(degenerate)?,
    )
    .map_err(degenerate)?;
    Ok(GroupStats {
        p_display: format_p(test.p_value),
        test,
        control: box_stats(&control).map_err(degenerate)?,
        kc: box_stats(&kc).map_err(degenerate)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub seed: u64,
    pub segmenter: SegmenterMetrics,
    pub clustering_accuracy: f64,
    /// De-standardized centroids as (width, height) with their labels.
    pub centroids: Vec<([f64; 2], CorneaLabel)>,
    pub kmeans_iterations: usize,
    pub cells: usize,
    pub holdout_fraction: f64,
    /// Accuracy on held-out cells of a model fit to the remaining cells.
    pub heldout_cell_accuracy: f64,
    pub logistic: LogisticFile,
    pub stats: GroupStats,
}

/// Train every model. Writes `tree.json`, `kmeans.json`, `logistic.json`
/// and `metrics.json` into `out_dir`.
pub fn cmd_train(
    corpus: &Path,
    out_dir: &Path,
    config: &PipelineConfig,
    seed: u64,
    jobs: usize,
) -> CmdResult<TrainMetrics> {
    let (manifest, scenes) = load_corpus(corpus, true, jobs)?;
    check_classes(&manifest, 2)?;
    let (tree, seg_metrics) = train_tree_on(&scenes, &manifest, config, seed, jobs)?;

    let measured = par_map(&scenes, jobs, |s| {
        measure_scene(&s.entry.id, &s.image, &tree, config).map(|m| (m, s.entry.label))
    });
    let mut failures = Vec::new();
    let mut ms: Vec<(SceneMeasurement, CorneaLabel)> = Vec::new();
    for (s, r) in scenes.iter().zip(measured) {
        match r {
            Ok(m) => ms.push(m),
            Err(e) => failures.push(format!("{}: {e}", s.entry.id)),
        }
    }
    if !failures.is_empty() {
        return Err(Failure::new(
            exit::PREPROCESSING,
            anyhow!("preprocessing failed for {} scene(s):\n  {}", failures.len(), failures.join("\n  ")),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let models = fit_stage_models(&ms, config, &mut rng).map_err(Failure::from_pipeline)?;
    let kmodel = &models.kmeans.model;
    let correct = ms
        .iter()
        .filter(|(m, l)| classify_cornea(kmodel, &m.dims).label == *l)
        .count();
    let cells = labeled_cells(ms.iter().map(|(m, l)| (m, *l)));
    let (train_cells, test_cells) = split_cells(&cells, config.logistic.holdout_fraction, &mut rng);
    let heldout_fit = placido::localize::fit_logistic(&train_cells, &config.logistic.params())
        .map_err(|e| Failure::from_pipeline(e.into()))?;
    let logistic = LogisticFile {
        beta0: models.logistic.model.beta0,
        beta1: models.logistic.model.beta1,
        d_min: models.window.d_min,
        d_max: models.window.d_max,
    };
    let metrics = TrainMetrics {
        seed,
        segmenter: seg_metrics,
        clustering_accuracy: correct as f64 / ms.len() as f64,
        centroids: kmodel
            .centroids
            .iter()
            .zip(&kmodel.label_map)
            .map(|(&c, &l)| (kmodel.standardization.invert(c), l))
            .collect(),
        kmeans_iterations: models.kmeans.iterations,
        cells: cells.len(),
        holdout_fraction: config.logistic.holdout_fraction,
        heldout_cell_accuracy: cell_accuracy(&heldout_fit.model, &test_cells),
        logistic,
        stats: group_stats(&cells)?,
    };
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    write_json(&out_dir.join(TREE_FILE), &tree)?;
    write_json(&out_dir.join(KMEANS_FILE), kmodel)?;
    write_json(&out_dir.join(LOGISTIC_FILE), &logistic)?;
    write_json(&out_dir.join("metrics.json"), &metrics)?;
    Ok(metrics)
}

/// Models loaded from a training output directory.
pub struct Models {
    pub tree: ClassificationTree,
    pub kmeans: KMeansModel,
    pub logistic: LogisticFile,
    /// SHA-256 of each model file.
    pub hashes: BTreeMap<String, String>,
}

impl Models {
    pub fn load(dir: &Path) -> CmdResult<Self> {
        let mut hashes = BTreeMap::new();
        for f in [TREE_FILE, KMEANS_FILE, LOGISTIC_FILE] {
            hashes.insert(f.to_string(), sha256_file(&dir.join(f))?);
        }
        Ok(Self {
            tree: read_json(&dir.join(TREE_FILE))?,
            kmeans: read_json(&dir.join(KMEANS_FILE))?,
            logistic: read_json(&dir.join(LOGISTIC_FILE))?,
            hashes,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Report {
    pub label: CorneaLabel,
    pub width: usize,
    pub height: usize,
    pub margin: f64,
    pub centroid: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2Report {
    pub logistic: LogisticModel,
    pub gap_count: usize,
    pub present_cells: usize,
    pub kc_cells: usize,
    pub hotspot: Hotspot,
    /// Artifact file names, relative to the report.
    pub matrix_csv: String,
    pub heatmap_png: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool_version: String,
    pub seed: u64,
    pub models: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosisReport {
    pub scene: String,
    /// Orientation correction applied, in degrees.
    pub orientation: f64,
    /// Crop rectangle in the orientation-corrected frame.
    pub crop: BBox,
    pub stage1: Stage1Report,
    pub stage2: Option<Stage2Report>,
    pub stage2_error: Option<String>,
    pub provenance: Provenance,
}

pub const REPORT_FILE: &str = "report.json";
pub const MATRIX_FILE: &str = "matrix.csv";
pub const HEATMAP_FILE: &str = "heatmap.png";

/// Diagnose one image, writing `report.json`, `matrix.csv` and `heatmap.png`
/// into `out_dir`. When stage 2 fails the stage-1 report is still written
/// and the stage-2 error is returned.
pub fn diagnose_to_dir(
    scene: &str,
    image: &RasterImage,
    models: &Models,
    config: &PipelineConfig,
    out_dir: &Path,
    debug: bool,
) -> CmdResult<DiagnosisReport> {
    let model = models.logistic.model();
    let d = diagnose(scene, image, &models.tree, &models.kmeans, &model, config)
        .map_err(Failure::from_pipeline)?;
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    if debug {
        let dump = |name: &str, m: &BinaryMask| -> anyhow::Result<()> {
            let f = fs::File::create(out_dir.join(name))?;
            m.write_pbm(BufWriter::new(f))?;
            Ok(())
        };
        dump("segmented.pbm", &segment(&models.tree, image))?;
        dump("cleaned.pbm", &d.preprocessed.mask)?;
        dump("crop.pbm", &d.preprocessed.crop.mask)?;
    }
    let call = d.stage1.call;
    let stage1 = Stage1Report {
        label: call.label,
        width: d.stage1.dims.width,
        height: d.stage1.dims.height,
        margin: call.margin,
        centroid: call.centroid,
    };
    let (stage2, stage2_error, failure) = match d.stage2 {
        Ok(s2) => {
            let file = fs::File::create(out_dir.join(MATRIX_FILE))
                .with_context(|| format!("writing {MATRIX_FILE}"))?;
            s2.matrix
                .write_csv(BufWriter::new(file))
                .map_err(|e| anyhow!("{e}"))?;
            render_colormap(&s2.matrix, &models.logistic.window(), config.colormap.size)
                .save(&out_dir.join(HEATMAP_FILE))
                .map_err(|e| anyhow!("writing {HEATMAP_FILE}: {e}"))?;
            let report = Stage2Report {
                logistic: model,
                gap_count: s2.matrix.gap_count(),
                present_cells: s2.present_cells,
                kc_cells: s2.kc_cells,
                hotspot: s2.hotspot,
                matrix_csv: MATRIX_FILE.to_string(),
                heatmap_png: HEATMAP_FILE.to_string(),
            };
            (Some(report), None, None)
        }
        Err(e) => (None, Some(e.to_string()), Some(Failure::from_pipeline(e))),
    };
    let report = DiagnosisReport {
        scene: scene.to_string(),
        orientation: d.preprocessed.orientation.angle,
        crop: d.preprocessed.crop.bbox,
        stage1,
        stage2,
        stage2_error,
        provenance: Provenance {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed: config.seed,
            models: models.hashes.clone(),
        },
    };
    write_json(&out_dir.join(REPORT_FILE), &report)?;
    match failure {
        Some(f) => Err(f),
        None => Ok(report),
    }
}

pub fn cmd_diagnose(
    image_path: &Path,
    models_dir: &Path,
    out_dir: &Path,
    config: &PipelineConfig,
    debug: bool,
) -> CmdResult<DiagnosisReport> {
    let models = Models::load(models_dir)?;
    let image = RasterImage::load(image_path)
        .with_context(|| format!("loading {}", image_path.display()))?;
    let scene = image_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    diagnose_to_dir(&scene, &image, &models, config, out_dir, debug)
}

/// Diagnose every scene of a corpus into `<scene>/diagnosis/`. All scenes
/// are attempted; the first failure in manifest order decides the result.
pub fn cmd_diagnose_corpus(
    corpus: &Path,
    models_dir: &Path,
    config: &PipelineConfig,
    jobs: usize,
) -> CmdResult<Vec<DiagnosisReport>> {
    let models = Models::load(models_dir)?;
    let manifest = Manifest::load(corpus)?;
    let results = par_map(&manifest.scenes, jobs, |e| -> CmdResult<DiagnosisReport> {
        let scene = load_scene(corpus, e, false)?;
        let out = corpus.join(&e.dir).join(DIAGNOSIS_DIR);
        diagnose_to_dir(&e.id, &scene.image, &models, config, &out, false).map_err(|f| Failure {
            code: f.code,
            error: f.error.context(e.id.clone()),
        })
    });
    results.into_iter().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationSummary {
    pub kc_scenes: usize,
    pub within_tolerance: usize,
    pub tolerance_deg: f64,
    /// Control scenes whose hotspot is empty or has severity below 0.5.
    pub quiet_controls: usize,
    pub control_scenes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusReport {
    pub scenes: usize,
    pub stage1_accuracy: f64,
    pub cell_accuracy: f64,
    pub cells: usize,
    pub stats: GroupStats,
    pub localization: LocalizationSummary,
    pub provenance: Provenance,
}

impl CorpusReport {
    /// Plain-text summary table.
    pub fn table(&self) -> String {
        let s = &self.stats;
        let mut out = String::new();
        out.push_str("Inter-disc distance statistics (kc vs control)\n");
        out.push_str(&format!(
            "{:<12}{:<12}{:<14}{:<12}{:<12}\n",
            "t-score", "p value", "effect size", "Cohen's d", "logistic acc"
        ));
        out.push_str(&format!(
            "{:<12.4}{:<12}{:<14.4}{:<12.4}{:<12.4}\n\n",
            s.test.t_score, s.p_display, s.test.effect_size, s.test.cohens_d, self.cell_accuracy
        ));
        out.push_str(&format!("{:<10}{:>8}{:>10}{:>10}{:>10}\n", "group", "n", "q1", "median", "q3"));
        for (name, b) in [("control", &s.control), ("kc", &s.kc)] {
            out.push_str(&format!(
                "{:<10}{:>8}{:>10.2}{:>10.2}{:>10.2}\n",
                name, b.n, b.q1, b.median, b.q3
            ));
        }
        out.push_str(&format!(
            "\nstage-1 accuracy {:.4} over {} scenes\n",
            self.stage1_accuracy, self.scenes
        ));
        let l = &self.localization;
        out.push_str(&format!(
            "hotspot within {}° on {}/{} kc scenes; quiet controls {}/{}\n",
            l.tolerance_deg, l.within_tolerance, l.kc_scenes, l.quiet_controls, l.control_scenes
        ));
        out
    }
}

/// Aggregate the per-scene diagnoses of a corpus. Writes JSON to `out_path`
/// and the text table next to it with a `.txt` extension.
pub fn cmd_report(corpus: &Path, models_dir: &Path, out_path: &Path) -> CmdResult<CorpusReport> {
    let models = Models::load(models_dir)?;
    let manifest = Manifest::load(corpus)?;
    let model = models.logistic.model();
    let (mut correct, mut cells) = (0usize, Vec::new());
    let mut loc = LocalizationSummary {
        kc_scenes: 0,
        within_tolerance: 0,
        tolerance_deg: LOCALIZATION_TOLERANCE,
        quiet_controls: 0,
        control_scenes: 0,
    };
    for e in &manifest.scenes {
        let dir = corpus.join(&e.dir);
        let diag = dir.join(DIAGNOSIS_DIR);
        let report: DiagnosisReport = read_json(&diag.join(REPORT_FILE))
            .with_context(|| format!("{}: missing diagnosis", e.id))?;
        let truth: GroundTruth = read_json(&dir.join("truth.json"))?;
        if report.stage1.label == truth.label {
            correct += 1;
        }
        let Some(s2) = &report.stage2 else { continue };
        let file = fs::File::open(diag.join(&s2.matrix_csv))
            .with_context(|| format!("{}: missing matrix", e.id))?;
        let matrix = DistanceMatrix::read_csv(file).map_err(|err| anyhow!("{}: {err}", e.id))?;
        cells.extend(matrix.cells().map(|(_, _, d)| (d, truth.label)));
        match truth.protrusion_angle {
            Some(angle) => {
                loc.kc_scenes += 1;
                if s2
                    .hotspot
                    .peak_angle
                    .is_some_and(|p| (p - angle).abs() <= LOCALIZATION_TOLERANCE)
                {
                    loc.within_tolerance += 1;
                }
            }
            None => {
                loc.control_scenes += 1;
                if s2.hotspot.is_empty() || s2.hotspot.severity < 0.5 {
                    loc.quiet_controls += 1;
                }
            }
        }
    }
    let report = CorpusReport {
        scenes: manifest.scenes.len(),
        stage1_accuracy: correct as f64 / manifest.scenes.len().max(1) as f64,
        cell_accuracy: cell_accuracy(&model, &cells),
        cells: cells.len(),
        stats: group_stats(&cells)?,
        localization: loc,
        provenance: Provenance {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed: manifest.seed,
            models: models.hashes.clone(),
        },
    };
    if let Some(parent) = out_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    write_json(out_path, &report)?;
    let table_path: PathBuf = out_path.with_extension("txt");
    fs::write(&table_path, report.table())
        .with_context(|| format!("writing {}", table_path.display()))?;
    Ok(report)
}

/// Reject a corpus directory that has no manifest before doing any work.
pub fn require_manifest(corpus: &Path) -> CmdResult<()> {
    if !corpus.join(MANIFEST).is_file() {
        return Err(anyhow!("{} has no {MANIFEST}", corpus.display()).into());
    }
    Ok(())
}
