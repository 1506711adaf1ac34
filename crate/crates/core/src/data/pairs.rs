use std::collections::BTreeMap;

use rand::Rng;

use super::{augment, AugmentationConfig, Dataset, SkeletonSequence};
use crate::error::{Error, Result};

/// All unordered view pairs `(i, j)` with `i <= j` for `n_views` cameras.
pub fn pair_space(n_views: usize) -> Vec<(usize, usize)> {
    let mut pairs = Vec::with_capacity(n_views * (n_views + 1) / 2);
    for i in 0..n_views {
        for j in i..n_views {
            pairs.push((i, j));
        }
    }
    pairs
}

/// Positive pair source grouped by performance.
///
/// With `multiview` the two members of a pair are drawn uniformly from the
/// unordered camera pairs of one performance (a camera may pair with
/// itself). Without it a single view is drawn and used for both members.
/// Either way one item corresponds to one performance.
#[derive(Debug, Clone)]
pub struct PairSampler {
    groups: Vec<Vec<usize>>,
    multiview: bool,
}

impl PairSampler {
    pub fn new(dataset: &Dataset, multiview: bool) -> Self {
        let mut by_perf: BTreeMap<u32, Vec<(u32, usize)>> = BTreeMap::new();
        for (i, s) in dataset.sequences.iter().enumerate() {
            by_perf.entry(s.performance_id).or_default().push((s.camera_id, i));
        }
        let groups = by_perf
            .into_values()
            .map(|mut g| {
                g.sort();
                g.into_iter().map(|(_, i)| i).collect()
            })
            .collect();
        Self { groups, multiview }
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn multiview(&self) -> bool {
        self.multiview
    }

    /// Sequence indices of the views available for performance `index`.
    pub fn views(&self, index: usize) -> Result<&[usize]> {
        self.groups
            .get(index)
            .map(|g| g.as_slice())
            .ok_or_else(|| Error::Index(format!("performance index {index} out of range ({})", self.groups.len())))
    }

    /// Draws the sequence indices forming one positive pair.
    pub fn draw<R: Rng + ?Sized>(&self, index: usize, rng: &mut R) -> Result<(usize, usize)> {
        let views = self.views(index)?;
        if views.is_empty() {
            return Err(Error::Index(format!("performance index {index} has no views")));
        }
        if self.multiview {
            let n = views.len();
            let k = rng.random_range(0..n * (n + 1) / 2);
            let (i, j) = pair_space(n)[k];
            Ok((views[i], views[j]))
        } else {
            let v = views[rng.random_range(0..views.len())];
            Ok((v, v))
        }
    }
}

/// Draws a positive pair for performance `index` and augments each member
/// independently.
pub fn sample_positive_pair<R: Rng + ?Sized>(
    dataset: &Dataset,
    sampler: &PairSampler,
    index: usize,
    cfg: &AugmentationConfig,
    rng: &mut R,
) -> Result<(SkeletonSequence, SkeletonSequence)> {
    let (a, b) = sampler.draw(index, rng)?;
    let first = augment(&dataset.sequences[a], cfg, rng);
    let second = augment(&dataset.sequences[b], cfg, rng);
    Ok((first, second))
}
