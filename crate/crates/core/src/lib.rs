//! Bias-mitigation strategies for group-imbalanced image segmentation,
//! evaluated on synthetic cardiac phantoms.
//!
//! The crate is organised bottom-up:
//!
//! - [`phantom`] and [`dataset`] generate labelled subjects whose image
//!   statistics differ by group only outside the heart.
//! - [`mitigation`] holds group weights, balanced sampling and the wrapped
//!   losses (reweighing, Group DRO).
//! - [`cropping`] does bounding boxes, crop/paste and the cascaded pipeline.
//! - [`metrics`] scores segmentations and measures fairness.
//! - [`trainer`] is a small encoder-decoder network and its training loop.
//! - [`harness`] runs experiments and renders reports.
//!
//! ```
//! use cardiofair::mitigation::compute_group_weights;
//! use cardiofair::Group;
//!
//! let w = compute_group_weights(&[(Group::from("A"), 1), (Group::from("B"), 3)], 1e-6).unwrap();
//! assert!((w.weight_of(&Group::from("A")).unwrap() - 0.75).abs() < 1e-6);
//! ```

pub mod cropping;
pub mod dataset;
pub mod harness;
pub mod metrics;
pub mod mitigation;
pub mod phantom;
pub mod trainer;

use serde::{Deserialize, Serialize};
use std::fmt;

/// Background, LV blood pool, LV myocardium, RV blood pool.
pub const NUM_CLASSES: usize = 4;

/// A segmentation label, `0..NUM_CLASSES`.
pub type Label = u8;

/// Protected-group tag of a subject.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Group(String);

impl Group {
    pub fn new(name: impl Into<String>) -> Self {
        Group(name.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl From<&str> for Group {
    fn from(s: &str) -> Self {
        Group(s.to_string())
    }
}

impl From<String> for Group {
    fn from(s: String) -> Self {
        Group(s)
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    struct Introduction;
    #[doc = include_str!("../../../book/src/phantoms.md")]
    struct Phantoms;
    #[doc = include_str!("../../../book/src/mitigation.md")]
    struct Mitigation;
    #[doc = include_str!("../../../book/src/cropping.md")]
    struct Cropping;
    #[doc = include_str!("../../../book/src/metrics.md")]
    struct Metrics;
    #[doc = include_str!("../../../book/src/experiments.md")]
    struct Experiments;
}
