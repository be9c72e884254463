//! Detection of small GAN-forged regions in CT volumes.
//!
//! The pipeline is a two-stage cascade. A lightweight attention CNN
//! ([`detector`]) classifies 32x32 windows laid out over the inscribed circle
//! of each slice ([`grid`]); the window probabilities form a [`heatmap`] per
//! slice. Each heatmap is turned into co-occurrence texture features
//! ([`glcm`]), reduced by PCA and classified by an SVM ([`classifier`]).
//! [`evaluation`] implements the slice, area and scan level decision rules,
//! and [`forge`] builds synthetic tampered volumes for end-to-end testing.

// NaN must fail range checks, which `!(x > 0.0)` does and `x <= 0.0` does not
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod classifier;
pub mod config;
pub mod detector;
pub mod error;
pub mod evaluation;
pub mod forge;
pub mod glcm;
pub mod grid;
pub mod heatmap;
pub mod pipeline;
pub mod volume;

mod binio;

use serde::{Deserialize, Serialize};

pub use error::{Error, ErrorKind, Result};
pub use grid::{GridSpec, Patch, SamplerSpec};
pub use heatmap::Heatmap;
pub use volume::{NormalizationSpec, Plane, ScanVolume, SliceImage};

/// Ground-truth or predicted class of a slice or patch. `Fake` is the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Real,
    Fake,
}

impl Label {
    pub fn is_fake(self) -> bool {
        self == Label::Fake
    }

    pub fn from_fake(fake: bool) -> Self {
        if fake {
            Label::Fake
        } else {
            Label::Real
        }
    }
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Label::Real => "real",
            Label::Fake => "fake",
        })
    }
}
