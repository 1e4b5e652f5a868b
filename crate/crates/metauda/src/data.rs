//! Shared dataset types: axis-aligned boxes, labeled samples, domain tags,
//! the four training streams, and sealed target-label storage.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::TensorData;
use crate::{Error, Result};

/// Axis-aligned box in pixel units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> BBox {
        BBox { x_min, y_min, x_max, y_max }
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))
    }

    pub fn is_valid(&self) -> bool {
        self.x_min < self.x_max && self.y_min < self.y_max
    }

    pub fn clip(&self, w: f64, h: f64) -> BBox {
        BBox {
            x_min: self.x_min.clamp(0.0, w),
            y_min: self.y_min.clamp(0.0, h),
            x_max: self.x_max.clamp(0.0, w),
            y_max: self.y_max.clamp(0.0, h),
        }
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let ix = (self.x_max.min(other.x_max) - self.x_min.max(other.x_min)).max(0.0);
        let iy = (self.y_max.min(other.y_max) - self.y_min.max(other.y_min)).max(0.0);
        let inter = ix * iy;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

/// Ground-truth object: class id plus box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub class_id: usize,
    pub bbox: BBox,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

/// One image with optional labels. Target-domain training samples carry
/// `labels: None`; their ground truth lives in sealed storage only.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionSample {
    pub id: String,
    /// Grayscale image as a [1, H, W] tensor with values in [0, 1].
    pub image: TensorData,
    pub labels: Option<Vec<GtBox>>,
    pub domain: Domain,
}

impl DetectionSample {
    pub fn height(&self) -> usize {
        self.image.shape[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape[2]
    }
}

/// The four training-time streams. Validation is disjoint from training and
/// the target streams never carry labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitQuartet {
    pub source_train: Vec<DetectionSample>,
    pub target_train: Vec<DetectionSample>,
    pub source_val: Vec<DetectionSample>,
    pub target_val: Vec<DetectionSample>,
}

impl SplitQuartet {
    /// Enforced at construction/import: labeled source, unlabeled target,
    /// globally unique ids.
    pub fn validate(&self) -> Result<()> {
        let mut ids = std::collections::BTreeSet::new();
        for s in self.source_train.iter().chain(&self.source_val) {
            if s.domain != Domain::Source || s.labels.is_none() {
                return Err(Error::schema(format!("source sample {} malformed", s.id)));
            }
            if !ids.insert(s.id.clone()) {
                return Err(Error::schema(format!("duplicate sample id {}", s.id)));
            }
        }
        for s in self.target_train.iter().chain(&self.target_val) {
            if s.domain != Domain::Target {
                return Err(Error::schema(format!("target sample {} mis-tagged", s.id)));
            }
            if s.labels.is_some() {
                return Err(Error::leakage(format!("target stream sample {} carries labels", s.id)));
            }
            if !ids.insert(s.id.clone()) {
                return Err(Error::schema(format!("duplicate sample id {}", s.id)));
            }
        }
        Ok(())
    }
}

/// Withheld target-domain ground truth. Every read is counted so that UDA
/// runs can prove they never looked (the counter must stay at zero); only the
/// labeled-target baseline unseals.
#[derive(Debug)]
pub struct SealedLabels {
    labels: BTreeMap<String, Vec<GtBox>>,
    reads: Arc<AtomicU64>,
}

impl Clone for SealedLabels {
    fn clone(&self) -> Self {
        SealedLabels { labels: self.labels.clone(), reads: Arc::clone(&self.reads) }
    }
}

impl PartialEq for SealedLabels {
    fn eq(&self, other: &Self) -> bool {
        self.labels == other.labels
    }
}

impl SealedLabels {
    pub fn new(labels: BTreeMap<String, Vec<GtBox>>) -> SealedLabels {
        SealedLabels { labels, reads: Arc::new(AtomicU64::new(0)) }
    }

    pub fn unseal(&self, id: &str) -> Result<&[GtBox]> {
        self.reads.fetch_add(1, Ordering::SeqCst);
        self.labels
            .get(id)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::contract(format!("no sealed labels for sample {id}")))
    }

    pub fn read_count(&self) -> u64 {
        self.reads.load(Ordering::SeqCst)
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Non-counting view for serialization only.
    pub fn contents(&self) -> &BTreeMap<String, Vec<GtBox>> {
        &self.labels
    }
}
