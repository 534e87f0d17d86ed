//! Pixel segmentation with a single CART classification tree.
//!
//! Splits minimise the weighted Gini impurity over the six pixel features.
//! Candidate thresholds are midpoints between consecutive distinct values;
//! samples with `feature < threshold` go left. Impurities are compared in
//! exact integer arithmetic, so ties resolve deterministically to the lowest
//! feature index and then the smallest threshold.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::morphology::BinaryMask;
use crate::raster::{pixel_features, PixelFeatures, RasterImage};

#[derive(Debug, Error, PartialEq)]
pub enum TreeError {
    #[error("training data must contain both classes")]
    SingleClass,
    #[error("training data needs at least two samples")]
    TooFewSamples,
    #[error("min_leaf must be at least 1")]
    InvalidMinLeaf,
    #[error("held-out set is empty")]
    EmptyHeldout,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PixelClass {
    Background,
    Foreground,
}

impl PixelClass {
    pub fn from_mask(value: bool) -> Self {
        if value {
            PixelClass::Foreground
        } else {
            PixelClass::Background
        }
    }
}

/// Where a labelled pixel came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub scene: String,
    pub x: u32,
    pub y: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledPixel {
    pub features: PixelFeatures,
    pub class: PixelClass,
    pub provenance: Option<Provenance>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LabeledPixelSet {
    pub samples: Vec<LabeledPixel>,
}

impl LabeledPixelSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, features: PixelFeatures, class: PixelClass) {
        self.samples.push(LabeledPixel {
            features,
            class,
            provenance: None,
        });
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn extend(&mut self, other: LabeledPixelSet) {
        self.samples.extend(other.samples);
    }

    /// Every pixel of an image, labelled by a ground-truth mask.
    pub fn from_image(image: &RasterImage, truth: &BinaryMask) -> Self {
        let samples = image
            .pixels()
            .iter()
            .zip(truth.bits())
            .map(|(&px, &fg)| LabeledPixel {
                features: pixel_features(px),
                class: PixelClass::from_mask(fg),
                provenance: None,
            })
            .collect();
        Self { samples }
    }

    /// Class-stratified random sample: up to `per_scene / 2` pixels of each
    /// class, or all of a class when it has fewer pixels.
    pub fn sample_scene<R: Rng>(
        scene: &str,
        image: &RasterImage,
        truth: &BinaryMask,
        per_scene: usize,
        rng: &mut R,
    ) -> Self {
        let mut fg = Vec::new();
        let mut bg = Vec::new();
        for (i, &bit) in truth.bits().iter().enumerate() {
            if bit {
                fg.push(i);
            } else {
                bg.push(i);
            }
        }
        let half = per_scene / 2;
        let mut samples = Vec::with_capacity(per_scene);
        for (pool, class) in [(fg, PixelClass::Foreground), (bg, PixelClass::Background)] {
            let mut pool = pool;
            let take = half.min(pool.len());
            let (chosen, _) = pool.partial_shuffle(rng, take);
            chosen.sort_unstable();
            for &i in chosen.iter() {
                let (x, y) = (i % image.width(), i / image.width());
                samples.push(LabeledPixel {
                    features: pixel_features(image.pixels()[i]),
                    class,
                    provenance: Some(Provenance {
                        scene: scene.to_string(),
                        x: x as u32,
                        y: y as u32,
                    }),
                });
            }
        }
        Self { samples }
    }
}

/// Tree node. Serialized untagged: splits as
/// `{"feature", "threshold", "left", "right"}`, leaves as `{"label", "purity"}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: Box<Node>,
        right: Box<Node>,
    },
    Leaf {
        label: PixelClass,
        /// Fraction of training samples at this leaf that carry `label`.
        purity: f64,
    },
}

impl Node {
    fn depth(&self) -> usize {
        match self {
            Node::Leaf { .. } => 0,
            Node::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }

    fn leaves(&self) -> usize {
        match self {
            Node::Leaf { .. } => 1,
            Node::Split { left, right, .. } => left.leaves() + right.leaves(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationTree {
    pub root: Node,
}

impl ClassificationTree {
    pub fn leaf(label: PixelClass) -> Self {
        Self {
            root: Node::Leaf { label, purity: 1.0 },
        }
    }

    pub fn depth(&self) -> usize {
        self.root.depth()
    }

    pub fn leaf_count(&self) -> usize {
        self.root.leaves()
    }

    #[inline]
    pub fn predict(&self, features: &PixelFeatures) -> PixelClass {
        let mut node = &self.root;
        loop {
            match node {
                Node::Leaf { label, .. } => return *label,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    node = if features.get(*feature) < *threshold {
                        left
                    } else {
                        right
                    };
                }
            }
        }
    }
}

/// Training hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TreeParams {
    pub max_depth: usize,
    pub min_leaf: usize,
}

impl Default for TreeParams {
    fn default() -> Self {
        Self {
            max_depth: 8,
            min_leaf: 16,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    feature: usize,
    threshold: f64,
    /// Samples (and foreground count) on the left.
    n_left: u64,
    fg_left: u64,
}

/// `Σ_children (fg² + bg²) / n` expressed as the exact fraction
/// `(a·d + c·b) / (b·d)`; larger means lower weighted Gini.
#[derive(Debug, Clone, Copy)]
struct Purity {
    num: u128,
    den: u128,
}

impl Purity {
    fn of(n_left: u64, fg_left: u64, n: u64, fg: u64) -> Self {
        let (nl, fl) = (n_left as u128, fg_left as u128);
        let (nr, fr) = ((n - n_left) as u128, (fg - fg_left) as u128);
        let sl = fl * fl + (nl - fl) * (nl - fl);
        let sr = fr * fr + (nr - fr) * (nr - fr);
        Purity {
            num: sl * nr + sr * nl,
            den: nl * nr,
        }
    }

    fn better_than(&self, other: &Purity) -> bool {
        self.num * other.den > other.num * self.den
    }
}

/// Weighted Gini impurity of a split, `Σ n_c/n · (1 − Σ p²)`.
pub fn split_gini(n_left: usize, fg_left: usize, n: usize, fg: usize) -> f64 {
    let gini = |n: usize, f: usize| {
        if n == 0 {
            return 0.0;
        }
        let p = f as f64 / n as f64;
        1.0 - p * p - (1.0 - p) * (1.0 - p)
    };
    let n_right = n - n_left;
    (n_left as f64 * gini(n_left, fg_left) + n_right as f64 * gini(n_right, fg - fg_left))
        / n as f64
}

fn midpoint(lo: f64, hi: f64) -> f64 {
    let mid = lo + (hi - lo) / 2.0;
    if mid > lo {
        mid
    } else {
        hi
    }
}

struct Trainer<'a> {
    features: Vec<[f64; 6]>,
    is_fg: Vec<bool>,
    params: &'a TreeParams,
}

impl Trainer<'_> {
    fn best_split(&self, idx: &mut [usize]) -> Option<Candidate> {
        let n = idx.len() as u64;
        let fg = idx.iter().filter(|&&i| self.is_fg[i]).count() as u64;
        let min_leaf = self.params.min_leaf as u64;
        let parent = Purity {
            num: (fg as u128).pow(2) + ((n - fg) as u128).pow(2),
            den: n as u128,
        };
        let mut best: Option<(Candidate, Purity)> = None;
        for f in 0..PixelFeatures::LEN {
            idx.sort_unstable_by(|&a, &b| self.features[a][f].total_cmp(&self.features[b][f]));
            let mut fg_left = 0u64;
            for k in 0..idx.len() - 1 {
                fg_left += u64::from(self.is_fg[idx[k]]);
                let (lo, hi) = (self.features[idx[k]][f], self.features[idx[k + 1]][f]);
                if lo == hi {
                    continue;
                }
                let n_left = k as u64 + 1;
                if n_left < min_leaf || n - n_left < min_leaf {
                    continue;
                }
                let purity = Purity::of(n_left, fg_left, n, fg);
                if best.as_ref().is_none_or(|(_, b)| purity.better_than(b)) {
                    best = Some((
                        Candidate {
                            feature: f,
                            threshold: midpoint(lo, hi),
                            n_left,
                            fg_left,
                        },
                        purity,
                    ));
                }
            }
        }
        // Only split when the impurity strictly drops.
        best.filter(|(_, p)| p.better_than(&parent)).map(|(c, _)| c)
    }

    fn grow(&self, idx: &mut [usize], depth: usize) -> Node {
        let n = idx.len();
        let fg = idx.iter().filter(|&&i| self.is_fg[i]).count();
        let leaf = || {
            let (label, count) = if fg > n - fg {
                (PixelClass::Foreground, fg)
            } else {
                (PixelClass::Background, n - fg)
            };
            Node::Leaf {
                label,
                purity: count as f64 / n as f64,
            }
        };
        if depth >= self.params.max_depth
            || fg == 0
            || fg == n
            || n < 2 * self.params.min_leaf
        {
            return leaf();
        }
        let Some(split) = self.best_split(idx) else {
            return leaf();
        };
        let f = split.feature;
        idx.sort_unstable_by(|&a, &b| self.features[a][f].total_cmp(&self.features[b][f]));
        let (left, right) = idx.split_at_mut(split.n_left as usize);
        debug_assert!(left.iter().all(|&i| self.features[i][f] < split.threshold));
        debug_assert_eq!(
            left.iter().filter(|&&i| self.is_fg[i]).count() as u64,
            split.fg_left
        );
        Node::Split {
            feature: f,
            threshold: split.threshold,
            left: Box::new(self.grow(left, depth + 1)),
            right: Box::new(self.grow(right, depth + 1)),
        }
    }
}

/// Greedy CART training.
pub fn train_tree(
    data: &LabeledPixelSet,
    params: &TreeParams,
) -> Result<ClassificationTree, TreeError> {
    if params.min_leaf < 1 {
        return Err(TreeError::InvalidMinLeaf);
    }
    if data.len() < 2 {
        return Err(TreeError::TooFewSamples);
    }
    let fg = data
        .samples
        .iter()
        .filter(|s| s.class == PixelClass::Foreground)
        .count();
    if fg == 0 || fg == data.len() {
        return Err(TreeError::SingleClass);
    }
    let trainer = Trainer {
        features: data.samples.iter().map(|s| s.features.0).collect(),
        is_fg: data
            .samples
            .iter()
            .map(|s| s.class == PixelClass::Foreground)
            .collect(),
        params,
    };
    let mut idx: Vec<usize> = (0..data.len()).collect();
    Ok(ClassificationTree {
        root: trainer.grow(&mut idx, 0),
    })
}

/// Foreground mask of the pixels the tree assigns to the Placido pattern.
pub fn segment(tree: &ClassificationTree, image: &RasterImage) -> BinaryMask {
    let bits = image
        .pixels()
        .iter()
        .map(|&px| tree.predict(&pixel_features(px)) == PixelClass::Foreground)
        .collect();
    BinaryMask::from_bits(image.width(), image.height(), bits)
}

/// Fraction of held-out samples classified correctly.
pub fn evaluate_tree(tree: &ClassificationTree, heldout: &LabeledPixelSet) -> Result<f64, TreeError> {
    if heldout.is_empty() {
        return Err(TreeError::EmptyHeldout);
    }
    let correct = heldout
        .samples
        .iter()
        .filter(|s| tree.predict(&s.features) == s.class)
        .count();
    Ok(correct as f64 / heldout.len() as f64)
}
