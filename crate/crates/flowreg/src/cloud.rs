//! Point cloud and flow field containers.
//!
//! A [`PointCloud`] is an ordered set of 3D positions in meters; points are
//! addressed by their dense index `0..n`, stable for the lifetime of the
//! cloud. A [`FlowField`] holds one displacement vector per source point.

use nalgebra::Vector3;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Vector3<f64>>,
}

impl PointCloud {
    /// Builds a cloud from positions. Rejects empty sets and non-finite
    /// coordinates.
    pub fn new(points: Vec<Vector3<f64>>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyPointSet);
        }
        if points.iter().any(|p| !is_finite3(p)) {
            return Err(Error::NonFinite("point cloud"));
        }
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        false // enforced non-empty at construction
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    pub fn get(&self, index: usize) -> Vector3<f64> {
        self.points[index]
    }

    /// Copies positions into plain arrays, the layout the neighbor index
    /// builds from.
    pub fn to_arrays(&self) -> Vec<[f64; 3]> {
        self.points.iter().map(|p| [p.x, p.y, p.z]).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    vectors: Vec<Vector3<f64>>,
}

impl FlowField {
    /// Builds a flow field. Rejects empty or non-finite input; the length
    /// association with a source cloud is checked by the consuming
    /// operations.
    pub fn new(vectors: Vec<Vector3<f64>>) -> Result<Self> {
        if vectors.is_empty() {
            return Err(Error::EmptyPointSet);
        }
        if vectors.iter().any(|v| !is_finite3(v)) {
            return Err(Error::NonFinite("flow field"));
        }
        Ok(Self { vectors })
    }

    /// Zero flow for a source cloud of `n` points.
    pub fn zeros(n: usize) -> Self {
        Self {
            vectors: vec![Vector3::zeros(); n],
        }
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn vectors(&self) -> &[Vector3<f64>] {
        &self.vectors
    }

    pub fn get(&self, index: usize) -> Vector3<f64> {
        self.vectors[index]
    }
}

pub(crate) fn is_finite3(v: &Vector3<f64>) -> bool {
    v.x.is_finite() && v.y.is_finite() && v.z.is_finite()
}
