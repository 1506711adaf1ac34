//! Skeleton sequences and everything needed to turn them into model inputs.

mod augment;
mod modality;
pub mod ntu;
mod pairs;
pub mod skd;
mod synth;
mod topology;

pub use augment::{augment, resample_uniform, AugmentationConfig};
pub use modality::{
    center_on_root, derive_bone, derive_motion, make_views, unflatten_spatial,
    unflatten_temporal, Modality, ModalityBundle, ModalitySet, ModalityViews,
};
pub use pairs::{pair_space, sample_positive_pair, PairSampler};
pub use synth::{synth_generate, SynthConfig};
pub use topology::Topology;

use ndarray::Array3;

use crate::error::{Error, Result};

/// Number of coordinate channels (x, y, z).
pub const CHANNELS: usize = 3;

/// One recorded action clip, coordinates laid out as (C, V, T).
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonSequence {
    pub coords: Array3<f32>,
    pub label: Option<u32>,
    pub subject_id: u32,
    pub performance_id: u32,
    pub camera_id: u32,
}

impl SkeletonSequence {
    pub fn new(coords: Array3<f32>) -> Self {
        Self {
            coords,
            label: None,
            subject_id: 0,
            performance_id: 0,
            camera_id: 0,
        }
    }

    pub fn n_joints(&self) -> usize {
        self.coords.dim().1
    }

    pub fn n_frames(&self) -> usize {
        self.coords.dim().2
    }

    /// Checks the shape and finiteness invariants.
    pub fn validate(&self) -> Result<()> {
        let (c, v, t) = self.coords.dim();
        if c != CHANNELS {
            return Err(Error::shape(format!("expected {CHANNELS} channels, got {c}")));
        }
        if v < 2 {
            return Err(Error::shape(format!("need at least 2 joints, got {v}")));
        }
        if t < 1 {
            return Err(Error::shape("sequence has no frames"));
        }
        if self.coords.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numerical("non-finite coordinate".into()));
        }
        Ok(())
    }
}

/// A labelled collection of sequences sharing one skeleton topology.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub topology: Topology,
    pub class_names: Vec<String>,
    pub sequences: Vec<SkeletonSequence>,
}

impl Dataset {
    pub fn new(topology: Topology, class_names: Vec<String>) -> Self {
        Self {
            topology,
            class_names,
            sequences: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        let max_label = self
            .sequences
            .iter()
            .filter_map(|s| s.label)
            .max()
            .map(|l| l as usize + 1)
            .unwrap_or(0);
        max_label.max(self.class_names.len())
    }

    pub fn max_frames(&self) -> usize {
        self.sequences.iter().map(|s| s.n_frames()).max().unwrap_or(0)
    }

    /// Validates every sequence against the topology and the
    /// performance-consistency invariant.
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashMap::new();
        for (i, s) in self.sequences.iter().enumerate() {
            s.validate()
                .map_err(|e| Error::Schema(format!("sequence {i}: {e}")))?;
            if s.n_joints() != self.topology.n_joints() {
                return Err(Error::Schema(format!(
                    "sequence {i} has {} joints, topology has {}",
                    s.n_joints(),
                    self.topology.n_joints()
                )));
            }
            let key = (s.label, s.subject_id);
            if let Some(prev) = seen.insert(s.performance_id, key) {
                if prev != key {
                    return Err(Error::Schema(format!(
                        "performance {} has inconsistent label/subject",
                        s.performance_id
                    )));
                }
            }
        }
        Ok(())
    }

    /// Splits by performance: sequences whose performance satisfies `is_first`
    /// go to the first dataset. Order is preserved.
    pub fn split_by_performance(&self, is_first: impl Fn(u32) -> bool) -> (Dataset, Dataset) {
        let mut a = Dataset::new(self.topology.clone(), self.class_names.clone());
        let mut b = a.clone();
        for s in &self.sequences {
            if is_first(s.performance_id) {
                a.sequences.push(s.clone());
            } else {
                b.sequences.push(s.clone());
            }
        }
        (a, b)
    }
}
