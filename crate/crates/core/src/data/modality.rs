use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Array3, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use super::Topology;
use crate::error::{Error, Result};

/// Input modality derived from joint coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Modality {
    Joint,
    Bone,
    Motion,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Joint, Modality::Bone, Modality::Motion];

    pub fn code(self) -> char {
        match self {
            Modality::Joint => 'J',
            Modality::Bone => 'B',
            Modality::Motion => 'M',
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Joint => "joint",
            Modality::Bone => "bone",
            Modality::Motion => "motion",
        }
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "j" | "joint" => Ok(Modality::Joint),
            "b" | "bone" => Ok(Modality::Bone),
            "m" | "motion" => Ok(Modality::Motion),
            other => Err(Error::config(format!("unknown modality '{other}'"))),
        }
    }
}

/// Nonempty, duplicate-free set of modalities kept in canonical order.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ModalitySet(Vec<Modality>);

impl ModalitySet {
    pub fn new(mut mods: Vec<Modality>) -> Result<Self> {
        mods.sort();
        mods.dedup();
        if mods.is_empty() {
            return Err(Error::config("modality set must not be empty"));
        }
        Ok(Self(mods))
    }

    pub fn all() -> Self {
        Self(Modality::ALL.to_vec())
    }

    pub fn single(m: Modality) -> Self {
        Self(vec![m])
    }

    pub fn as_slice(&self) -> &[Modality] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, m: Modality) -> bool {
        self.0.contains(&m)
    }

    pub fn iter(&self) -> impl Iterator<Item = Modality> + '_ {
        self.0.iter().copied()
    }

    pub fn is_subset_of(&self, other: &ModalitySet) -> bool {
        self.0.iter().all(|m| other.contains(*m))
    }
}

impl fmt::Display for ModalitySet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s: Vec<String> = self.0.iter().map(|m| m.code().to_string()).collect();
        write!(f, "{}", s.join("+"))
    }
}

impl FromStr for ModalitySet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mods = s
            .split([',', '+'])
            .filter(|p| !p.trim().is_empty())
            .map(Modality::from_str)
            .collect::<Result<Vec<_>>>()?;
        ModalitySet::new(mods)
    }
}

impl Serialize for ModalitySet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for ModalitySet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Child-minus-parent offsets; the root bone is zero.
pub fn derive_bone(joint: ArrayView3<f32>, topology: &Topology) -> Result<Array3<f32>> {
    let (_, v, _) = joint.dim();
    if v != topology.n_joints() {
        return Err(Error::shape(format!(
            "array has {v} joints, topology has {}",
            topology.n_joints()
        )));
    }
    let mut bone = Array3::zeros(joint.raw_dim());
    for j in 0..v {
        let p = topology.parent(j);
        if p == j {
            continue;
        }
        let diff = &joint.index_axis(Axis(1), j) - &joint.index_axis(Axis(1), p);
        bone.index_axis_mut(Axis(1), j).assign(&diff);
    }
    Ok(bone)
}

/// Forward frame difference with a zero final frame.
pub fn derive_motion(joint: ArrayView3<f32>) -> Result<Array3<f32>> {
    let (_, _, t) = joint.dim();
    if t == 0 {
        return Err(Error::shape("motion needs at least one frame"));
    }
    let mut motion = Array3::zeros(joint.raw_dim());
    for f in 0..t - 1 {
        let diff = &joint.index_axis(Axis(2), f + 1) - &joint.index_axis(Axis(2), f);
        motion.index_axis_mut(Axis(2), f).assign(&diff);
    }
    Ok(motion)
}

/// Temporal view `(T, V*C)` and spatial view `(V, T*C)` of a `(C, V, T)` array.
///
/// `x_t[t, v*C + c] = x[c, v, t]` and `x_s[v, t*C + c] = x[c, v, t]`.
pub fn make_views(x: ArrayView3<f32>) -> (Array2<f32>, Array2<f32>) {
    let (c, v, t) = x.dim();
    let mut xt = Array2::zeros((t, v * c));
    let mut xs = Array2::zeros((v, t * c));
    for ci in 0..c {
        for vi in 0..v {
            for ti in 0..t {
                let val = x[[ci, vi, ti]];
                xt[[ti, vi * c + ci]] = val;
                xs[[vi, ti * c + ci]] = val;
            }
        }
    }
    (xt, xs)
}

/// Inverse of the temporal view.
pub fn unflatten_temporal(xt: &Array2<f32>, channels: usize) -> Result<Array3<f32>> {
    let (t, vc) = xt.dim();
    if channels == 0 || vc % channels != 0 {
        return Err(Error::shape(format!("width {vc} not divisible by {channels}")));
    }
    let v = vc / channels;
    Ok(Array3::from_shape_fn((channels, v, t), |(c, j, f)| xt[[f, j * channels + c]]))
}

/// Inverse of the spatial view.
pub fn unflatten_spatial(xs: &Array2<f32>, channels: usize) -> Result<Array3<f32>> {
    let (v, tc) = xs.dim();
    if channels == 0 || tc % channels != 0 {
        return Err(Error::shape(format!("width {tc} not divisible by {channels}")));
    }
    let t = tc / channels;
    Ok(Array3::from_shape_fn((channels, v, t), |(c, j, f)| xs[[j, f * channels + c]]))
}

/// Translates a sequence so the root joint of frame 0 sits at the origin.
pub fn center_on_root(coords: &mut Array3<f32>, root: usize) {
    let (c, _, _) = coords.dim();
    for ci in 0..c {
        let origin = coords[[ci, root, 0]];
        coords.index_axis_mut(Axis(0), ci).mapv_inplace(|x| x - origin);
    }
}

/// Temporal and spatial views of one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityViews {
    pub temporal: Array2<f32>,
    pub spatial: Array2<f32>,
}

/// Model input for one clip: views for each requested modality.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityBundle {
    pub modalities: ModalitySet,
    pub views: Vec<ModalityViews>,
}

impl ModalityBundle {
    pub fn from_joints(joint: ArrayView3<f32>, topology: &Topology, modalities: &ModalitySet) -> Result<Self> {
        let mut views = Vec::with_capacity(modalities.len());
        for m in modalities.iter() {
            let arr = match m {
                Modality::Joint => joint.to_owned(),
                Modality::Bone => derive_bone(joint, topology)?,
                Modality::Motion => derive_motion(joint)?,
            };
            let (temporal, spatial) = make_views(arr.view());
            views.push(ModalityViews { temporal, spatial });
        }
        Ok(Self {
            modalities: modalities.clone(),
            views,
        })
    }

    pub fn get(&self, m: Modality) -> Option<&ModalityViews> {
        self.modalities
            .as_slice()
            .iter()
            .position(|&x| x == m)
            .map(|i| &self.views[i])
    }
}
