use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Skeleton tree given as a parent array; the root is its own parent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topology {
    parent: Vec<usize>,
}

/// Kinect v2 / NTU RGB+D joint tree rooted at the spine base (joint 0).
const NTU25_PARENTS: [usize; 25] = [
    0, 0, 20, 2, 20, 4, 5, 6, 20, 8, 9, 10, 0, 12, 13, 14, 0, 16, 17, 18, 1, 7, 7, 11, 11,
];

/// Minimal humanoid: pelvis, spine, head, two arms, two legs.
const HUMANOID11_PARENTS: [usize; 11] = [0, 0, 1, 1, 3, 1, 5, 0, 7, 0, 9];

impl Topology {
    pub fn new(parent: Vec<usize>) -> Result<Self> {
        let t = Self { parent };
        t.validate()?;
        Ok(t)
    }

    pub fn ntu25() -> Self {
        Self {
            parent: NTU25_PARENTS.to_vec(),
        }
    }

    pub fn humanoid11() -> Self {
        Self {
            parent: HUMANOID11_PARENTS.to_vec(),
        }
    }

    /// The built-in tree for `n` joints: NTU for 25, the humanoid for 11,
    /// otherwise a binary heap-shaped tree.
    pub fn for_joints(n: usize) -> Self {
        match n {
            25 => Self::ntu25(),
            11 => Self::humanoid11(),
            _ => Self {
                parent: (0..n).map(|v| if v == 0 { 0 } else { (v - 1) / 2 }).collect(),
            },
        }
    }

    pub fn n_joints(&self) -> usize {
        self.parent.len()
    }

    pub fn parent(&self, v: usize) -> usize {
        self.parent[v]
    }

    pub fn parents(&self) -> &[usize] {
        &self.parent
    }

    pub fn root(&self) -> usize {
        self.parent
            .iter()
            .enumerate()
            .find(|(v, p)| *v == **p)
            .map(|(v, _)| v)
            .unwrap_or(0)
    }

    /// Joints ordered so that every parent precedes its children.
    pub fn topological_order(&self) -> Vec<usize> {
        let n = self.parent.len();
        let mut children = vec![Vec::new(); n];
        for (v, &p) in self.parent.iter().enumerate() {
            if p != v {
                children[p].push(v);
            }
        }
        let mut order = Vec::with_capacity(n);
        let mut stack = vec![self.root()];
        while let Some(v) = stack.pop() {
            order.push(v);
            stack.extend(children[v].iter().rev());
        }
        order
    }

    fn validate(&self) -> Result<()> {
        let n = self.parent.len();
        if n < 2 {
            return Err(Error::Schema(format!("topology needs at least 2 joints, got {n}")));
        }
        if let Some(v) = self.parent.iter().position(|&p| p >= n) {
            return Err(Error::Schema(format!("joint {v} has out-of-range parent")));
        }
        let roots = (0..n).filter(|&v| self.parent[v] == v).count();
        if roots != 1 {
            return Err(Error::Schema(format!("topology must have exactly one root, found {roots}")));
        }
        if self.topological_order().len() != n {
            return Err(Error::Schema("topology contains a cycle".into()));
        }
        Ok(())
    }
}
