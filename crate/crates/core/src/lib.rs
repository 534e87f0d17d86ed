//! Keratoconus screening from Placido-disc corneal reflections.
//!
//! The pipeline turns a photograph of a reflected Placido pattern into a
//! two-stage diagnosis:
//!
//! 1. [`segmenter`] classifies pixels with a single CART tree, [`morphology`]
//!    denoises the mask and labels components, and [`geometry`] finds the solid
//!    center disc, levels the pattern with image moments and crops it.
//! 2. [`classify`] separates control from keratoconic corneas with k-means on
//!    the crop's width and height.
//! 3. [`localize`] casts rays from the center disc, builds the inter-disc
//!    distance matrix, labels each cell with a logistic model and reports the
//!    protrusion hotspot; [`stats`] quantifies group separation.
//!
//! [`synth`] renders reflections with known ground truth, and [`pipeline`]
//! wires the stages together behind a single configuration document.

// Negated comparisons deliberately reject NaN in parameter validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod classify;
pub mod geometry;
pub mod localize;
pub mod morphology;
pub mod pipeline;
pub mod raster;
pub mod segmenter;
pub mod stats;
pub mod synth;

use serde::{Deserialize, Serialize};

/// Diagnosis label for a cornea, or for one distance-matrix cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorneaLabel {
    Control,
    Kc,
}

impl CorneaLabel {
    pub fn is_kc(self) -> bool {
        self == CorneaLabel::Kc
    }
}

impl std::fmt::Display for CorneaLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CorneaLabel::Control => "control",
            CorneaLabel::Kc => "kc",
        })
    }
}
