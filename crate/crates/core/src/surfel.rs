//! Surfel primitives and the trainable set that owns them.

use nalgebra::{Matrix3, Vector3};

use crate::math::rotation_from_raw;
use crate::CoreError;

/// Number of spherical-harmonics coefficients per channel at `degree`.
pub fn sh_coeff_count(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

/// One planar Gaussian surfel.
///
/// The tangent frame is the rotation of `quat`: column 0 is `t_u`, column 1
/// is `t_v` and column 2 the normal `t_w`. `log_scale` holds `ln(s_u)` and
/// `ln(s_v)`; opacity is `sigmoid(raw_opacity)`. `sh` stores RGB triples in
/// standard (l, m) order and its length must be `(degree + 1)^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Surfel {
    pub mu: Vector3<f64>,
    pub quat: [f64; 4],
    pub log_scale: [f64; 2],
    pub raw_opacity: f64,
    pub sh: Vec<[f64; 3]>,
    pub id: u64,
    /// Selected as a high-error Gaussian by the error-scoring pass.
    pub heg: bool,
    /// Created by the in-place clone step of the final training stage.
    pub is_clone: bool,
}

impl Surfel {
    /// Tangent frame from the (renormalized) quaternion.
    pub fn rotation(&self) -> Matrix3<f64> {
        rotation_from_raw(&self.quat)
    }

    pub fn scales(&self) -> (f64, f64) {
        (self.log_scale[0].exp(), self.log_scale[1].exp())
    }

    pub fn opacity(&self) -> f64 {
        1.0 / (1.0 + (-self.raw_opacity).exp())
    }

    /// Degree implied by the stored coefficient count.
    pub fn sh_degree(&self) -> usize {
        (self.sh.len() as f64).sqrt() as usize - 1
    }

    pub fn validate(&self) -> Result<(), CoreError> {
        let err = |reason: String| CoreError::InvalidSurfel { id: self.id, reason };
        if !self.mu.iter().all(|v| v.is_finite()) {
            return Err(err("non-finite center".into()));
        }
        let qn: f64 = self.quat.iter().map(|v| v * v).sum();
        if !(qn.is_finite() && qn > 1e-24) {
            return Err(err("degenerate quaternion".into()));
        }
        if !self.log_scale.iter().all(|v| v.is_finite()) {
            return Err(err("non-finite log scale".into()));
        }
        if !self.raw_opacity.is_finite() {
            return Err(err("non-finite opacity".into()));
        }
        let n = self.sh.len();
        let deg = (n as f64).sqrt() as usize;
        if deg == 0 || deg * deg != n {
            return Err(err(format!("sh length {n} is not a square")));
        }
        Ok(())
    }
}

/// An ordered collection of surfels with unique ids.
///
/// Ids are assigned monotonically and never reused, so per-pixel contribution
/// records stay unambiguous across densification, pruning and cloning.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfelSet {
    pub surfels: Vec<Surfel>,
    /// Largest degree the stored coefficients support.
    pub max_sh_degree: usize,
    /// Degree actually evaluated when rendering (raised during training).
    pub active_sh_degree: usize,
    next_id: u64,
}

impl SurfelSet {
    pub fn new(max_sh_degree: usize) -> Self {
        Self { surfels: Vec::new(), max_sh_degree, active_sh_degree: 0, next_id: 0 }
    }

    /// Rebuilds a set from deserialized surfels, continuing id assignment
    /// after the largest id present.
    pub fn from_surfels(surfels: Vec<Surfel>, max_sh_degree: usize, active_sh_degree: usize) -> Self {
        let next_id = surfels.iter().map(|s| s.id + 1).max().unwrap_or(0);
        Self { surfels, max_sh_degree, active_sh_degree, next_id }
    }

    pub fn len(&self) -> usize {
        self.surfels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.surfels.is_empty()
    }

    /// Adds a surfel, overwriting its id with a fresh one. Returns the id.
    pub fn push(&mut self, mut surfel: Surfel) -> u64 {
        surfel.id = self.next_id;
        self.next_id += 1;
        self.surfels.push(surfel);
        self.next_id - 1
    }

    /// Map from surfel id to current index.
    pub fn id_to_index(&self) -> std::collections::HashMap<u64, usize> {
        self.surfels.iter().enumerate().map(|(i, s)| (s.id, i)).collect()
    }

    /// Keeps only surfels for which `keep` returns true.
    pub fn retain(&mut self, keep: impl FnMut(&Surfel) -> bool) {
        self.surfels.retain(keep);
    }

    pub fn validate(&self) -> Result<(), CoreError> {
        let want = sh_coeff_count(self.max_sh_degree);
        let mut seen = std::collections::HashSet::with_capacity(self.surfels.len());
        for s in &self.surfels {
            s.validate()?;
            if s.sh.len() != want {
                return Err(CoreError::InvalidSurfel {
                    id: s.id,
                    reason: format!("sh length {} does not match set degree {}", s.sh.len(), self.max_sh_degree),
                });
            }
            if !seen.insert(s.id) {
                return Err(CoreError::InvalidSurfel { id: s.id, reason: "duplicate id".into() });
            }
        }
        Ok(())
    }
}
