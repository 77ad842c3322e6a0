use serde::{Deserialize, Serialize};

use super::{ModelError, Result};
use crate::geometry::ShapeKind;
use crate::synthdata::LandmarkCounts;

/// What a single output neuron stands for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    Coordinate(usize),
    Inaccuracy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Slot {
    pub shape: usize,
    pub landmark: usize,
    pub role: Role,
}

/// Output vector layout: every landmark owns `group_size` coordinate neurons
/// followed by one inaccuracy neuron, landmarks in order, shapes in order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupLayout {
    pub group_size: usize,
    pub shapes: Vec<(ShapeKind, usize)>,
}

/// One landmark's estimate and its self-estimated inaccuracy.
#[derive(Clone, Debug, PartialEq)]
pub struct Group {
    pub coords: Vec<f64>,
    pub inaccuracy: f64,
}

impl GroupLayout {
    pub fn new(group_size: usize, shapes: Vec<(ShapeKind, usize)>) -> Result<Self> {
        if group_size == 0 {
            return Err(ModelError::InvalidArgument("group size must be positive".into()));
        }
        if shapes.is_empty() || shapes.iter().any(|&(_, n)| n == 0) {
            return Err(ModelError::InvalidArgument("every shape needs at least one landmark".into()));
        }
        Ok(GroupLayout { group_size, shapes })
    }

    /// Two-dimensional landmarks for the three eye shapes.
    pub fn for_counts(counts: &LandmarkCounts) -> Self {
        GroupLayout { group_size: 2, shapes: ShapeKind::ALL.iter().map(|&k| (k, counts.get(k))).collect() }
    }

    pub fn stride(&self) -> usize {
        self.group_size + 1
    }

    pub fn group_count(&self) -> usize {
        self.shapes.iter().map(|&(_, n)| n).sum()
    }

    pub fn total_outputs(&self) -> usize {
        self.group_count() * self.stride()
    }

    /// Index of the first group of shape `shape`.
    pub fn first_group(&self, shape: usize) -> usize {
        self.shapes[..shape].iter().map(|&(_, n)| n).sum()
    }

    pub fn index(&self, slot: Slot) -> usize {
        let base = (self.first_group(slot.shape) + slot.landmark) * self.stride();
        match slot.role {
            Role::Coordinate(d) => base + d,
            Role::Inaccuracy => base + self.group_size,
        }
    }

    pub fn slot(&self, index: usize) -> Option<Slot> {
        if index >= self.total_outputs() {
            return None;
        }
        let group = index / self.stride();
        let within = index % self.stride();
        let mut first = 0;
        for (shape, &(_, n)) in self.shapes.iter().enumerate() {
            if group < first + n {
                let role = if within == self.group_size { Role::Inaccuracy } else { Role::Coordinate(within) };
                return Some(Slot { shape, landmark: group - first, role });
            }
            first += n;
        }
        None
    }

    pub fn is_inaccuracy(&self, index: usize) -> bool {
        index % self.stride() == self.group_size
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len != self.total_outputs() {
            return Err(ModelError::InvalidArgument(format!(
                "output length {len} does not match layout ({})",
                self.total_outputs()
            )));
        }
        Ok(())
    }

    /// Splits one output row into per-shape lists of groups.
    pub fn extract_groups(&self, outputs: &[f64]) -> Result<Vec<Vec<Group>>> {
        self.check_len(outputs.len())?;
        let mut chunks = outputs.chunks_exact(self.stride());
        Ok(self
            .shapes
            .iter()
            .map(|&(_, n)| {
                chunks
                    .by_ref()
                    .take(n)
                    .map(|c| Group { coords: c[..self.group_size].to_vec(), inaccuracy: c[self.group_size] })
                    .collect()
            })
            .collect())
    }

    /// Inverse of [`extract_groups`](Self::extract_groups).
    pub fn scatter_groups(&self, groups: &[Vec<Group>]) -> Result<Vec<f64>> {
        let shape_ok = groups.len() == self.shapes.len()
            && groups.iter().zip(&self.shapes).all(|(g, &(_, n))| g.len() == n)
            && groups.iter().flatten().all(|g| g.coords.len() == self.group_size);
        if !shape_ok {
            return Err(ModelError::InvalidArgument("groups do not match layout".into()));
        }
        let mut out = Vec::with_capacity(self.total_outputs());
        for g in groups.iter().flatten() {
            out.extend_from_slice(&g.coords);
            out.push(g.inaccuracy);
        }
        Ok(out)
    }
}
