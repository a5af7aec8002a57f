//! Invertible affine maps between voxel coordinate spaces.
//!
//! A transform maps source-space voxel coordinates to target-space voxel
//! coordinates: `p' = A p + t`, with `p = [z, y, x]`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SpadeError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineTransform {
    pub matrix: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl AffineTransform {
    pub fn identity() -> Self {
        AffineTransform {
            matrix: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    pub fn translation(t: [f64; 3]) -> Self {
        AffineTransform { matrix: Self::identity().matrix, translation: t }
    }

    pub fn scaling(diag: [f64; 3]) -> Self {
        AffineTransform {
            matrix: [[diag[0], 0.0, 0.0], [0.0, diag[1], 0.0], [0.0, 0.0, diag[2]]],
            translation: [0.0; 3],
        }
    }

    /// Scale about a fixed point: `p' = diag * (p - c) + c`.
    pub fn scaling_about(diag: [f64; 3], c: [f64; 3]) -> Self {
        let mut t = [0.0; 3];
        for a in 0..3 {
            t[a] = c[a] - diag[a] * c[a];
        }
        AffineTransform { matrix: Self::scaling(diag).matrix, translation: t }
    }

    /// Rotation by `angle` radians in the (y, x) plane about the depth axis.
    pub fn rotation_z(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        AffineTransform {
            matrix: [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]],
            translation: [0.0; 3],
        }
    }

    /// Rotation about the depth axis around a fixed point.
    pub fn rotation_z_about(angle: f64, center: [f64; 3]) -> Self {
        let r = Self::rotation_z(angle);
        let rc = r.apply(center);
        let mut t = [0.0; 3];
        for a in 0..3 {
            t[a] = center[a] - rc[a];
        }
        AffineTransform { matrix: r.matrix, translation: t }
    }

    #[inline]
    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let m = &self.matrix;
        [
            m[0][0] * p[0] + m[0][1] * p[1] + m[0][2] * p[2] + self.translation[0],
            m[1][0] * p[0] + m[1][1] * p[1] + m[1][2] * p[2] + self.translation[1],
            m[2][0] * p[0] + m[2][1] * p[1] + m[2][2] * p[2] + self.translation[2],
        ]
    }

    pub fn det(&self) -> f64 {
        let m = &self.matrix;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    /// Composition `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &AffineTransform) -> AffineTransform {
        let a = &self.matrix;
        let b = &other.matrix;
        let mut m = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
            }
        }
        let t = self.apply(other.translation);
        AffineTransform { matrix: m, translation: t }
    }

    /// Inverse map, via the adjugate. Errors when the matrix is singular.
    pub fn invert(&self) -> Result<AffineTransform> {
        let m = &self.matrix;
        let det = self.det();
        if det.abs() < 1e-12 {
            return Err(SpadeError::Geometry(format!("singular transform, det = {det:e}")));
        }
        let inv_det = 1.0 / det;
        let mut inv = [[0.0; 3]; 3];
        inv[0][0] = (m[1][1] * m[2][2] - m[1][2] * m[2][1]) * inv_det;
        inv[0][1] = (m[0][2] * m[2][1] - m[0][1] * m[2][2]) * inv_det;
        inv[0][2] = (m[0][1] * m[1][2] - m[0][2] * m[1][1]) * inv_det;
        inv[1][0] = (m[1][2] * m[2][0] - m[1][0] * m[2][2]) * inv_det;
        inv[1][1] = (m[0][0] * m[2][2] - m[0][2] * m[2][0]) * inv_det;
        inv[1][2] = (m[0][2] * m[1][0] - m[0][0] * m[1][2]) * inv_det;
        inv[2][0] = (m[1][0] * m[2][1] - m[1][1] * m[2][0]) * inv_det;
        inv[2][1] = (m[0][1] * m[2][0] - m[0][0] * m[2][1]) * inv_det;
        inv[2][2] = (m[0][0] * m[1][1] - m[0][1] * m[1][0]) * inv_det;
        let it = [
            -(inv[0][0] * self.translation[0] + inv[0][1] * self.translation[1] + inv[0][2] * self.translation[2]),
            -(inv[1][0] * self.translation[0] + inv[1][1] * self.translation[1] + inv[1][2] * self.translation[2]),
            -(inv[2][0] * self.translation[0] + inv[2][1] * self.translation[1] + inv[2][2] * self.translation[2]),
        ];
        Ok(AffineTransform { matrix: inv, translation: it })
    }

    pub fn is_identity(&self, tol: f64) -> bool {
        let id = Self::identity();
        self.max_abs_diff(&id) <= tol
    }

    /// Largest absolute per-parameter difference to another transform.
    pub fn max_abs_diff(&self, other: &AffineTransform) -> f64 {
        let mut m = 0.0f64;
        for i in 0..3 {
            for j in 0..3 {
                m = m.max((self.matrix[i][j] - other.matrix[i][j]).abs());
            }
            m = m.max((self.translation[i] - other.translation[i]).abs());
        }
        m
    }
}

/// On-disk record for a registered transform.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransformRecord {
    pub matrix: [[f64; 3]; 3],
    pub translation: [f64; 3],
    pub moving_id: String,
    pub template_id: String,
    pub final_ncc: f64,
}

impl TransformRecord {
    pub fn transform(&self) -> AffineTransform {
        AffineTransform { matrix: self.matrix, translation: self.translation }
    }

    pub fn from_transform(t: &AffineTransform, moving_id: &str, template_id: &str, final_ncc: f64) -> Self {
        TransformRecord {
            matrix: t.matrix,
            translation: t.translation,
            moving_id: moving_id.to_string(),
            template_id: template_id.to_string(),
            final_ncc,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self)?;
        std::fs::write(path, s)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&s)?)
    }
}

/// The registered transform set: one entry per volume id, in a stable order.
#[derive(Debug, Clone, Default)]
pub struct TransformSet {
    entries: Vec<(String, AffineTransform)>,
}

impl TransformSet {
    pub fn new() -> Self {
        TransformSet { entries: Vec::new() }
    }

    pub fn insert(&mut self, id: impl Into<String>, t: AffineTransform) {
        let id = id.into();
        if let Some(e) = self.entries.iter_mut().find(|(k, _)| *k == id) {
            e.1 = t;
        } else {
            self.entries.push((id, t));
        }
    }

    pub fn get(&self, id: &str) -> Option<&AffineTransform> {
        self.entries.iter().find(|(k, _)| k == id).map(|(_, t)| t)
    }

    pub fn require(&self, id: &str) -> Result<&AffineTransform> {
        self.get(id)
            .ok_or_else(|| SpadeError::Availability(format!("no registered transform for volume {id:?}")))
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(k, _)| k.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &AffineTransform)> {
        self.entries.iter().map(|(k, t)| (k.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Load every `*.affine.json` record in a directory, sorted by file name.
    pub fn read_dir(dir: &Path) -> Result<Self> {
        let mut paths: Vec<_> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.file_name().map(|n| n.to_string_lossy().ends_with(".affine.json")).unwrap_or(false))
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(SpadeError::Availability(format!(
                "no .affine.json transforms in {}",
                dir.display()
            )));
        }
        let mut set = TransformSet::new();
        for p in paths {
            let rec = TransformRecord::read(&p)?;
            set.insert(rec.moving_id.clone(), rec.transform());
        }
        Ok(set)
    }
}
