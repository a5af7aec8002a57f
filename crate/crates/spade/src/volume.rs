//! 3D scalar volumes: storage, trilinear sampling, preprocessing, and the
//! `.svol` on-disk format.
//!
//! Voxel data is stored depth-major as a flat `Vec<f32>`: index
//! `(z * h + y) * w + x`. All coordinate vectors in this crate follow the
//! same `[z, y, x]` axis order as the `[d, h, w]` dimension triple.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SpadeError};

/// A 3D scalar field with voxel spacing metadata.
#[derive(Debug, Clone)]
pub struct Volume {
    pub id: String,
    /// `[d, h, w]`
    pub dims: [usize; 3],
    /// Physical voxel size per axis, millimetres, `[z, y, x]` order.
    pub spacing: [f64; 3],
    pub data: Vec<f32>,
}

impl Volume {
    pub fn new(id: impl Into<String>, dims: [usize; 3], spacing: [f64; 3], data: Vec<f32>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(SpadeError::Parameter(format!("volume dims must be >= 1, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(SpadeError::Parameter(format!("spacing must be > 0, got {spacing:?}")));
        }
        let n = dims[0] * dims[1] * dims[2];
        if data.len() != n {
            return Err(SpadeError::Shape(format!(
                "data length {} does not match dims {:?} ({} voxels)",
                data.len(),
                dims,
                n
            )));
        }
        Ok(Volume { id: id.into(), dims, spacing, data })
    }

    pub fn filled(id: impl Into<String>, dims: [usize; 3], spacing: [f64; 3], value: f32) -> Self {
        let n = dims[0] * dims[1] * dims[2];
        Volume { id: id.into(), dims, spacing, data: vec![value; n] }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    #[inline]
    pub fn at(&self, z: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(z, y, x)]
    }

    #[inline]
    pub fn set(&mut self, z: usize, y: usize, x: usize, v: f32) {
        let i = self.index(z, y, x);
        self.data[i] = v;
    }

    /// Trilinear sample at a real-valued coordinate, edge-clamped so
    /// out-of-bounds points take the nearest border value.
    pub fn sample(&self, z: f64, y: f64, x: f64) -> f64 {
        sample_trilinear(&self.data, self.dims, z, y, x)
    }

    pub fn min_max(&self) -> (f32, f32) {
        let mut lo = f32::INFINITY;
        let mut hi = f32::NEG_INFINITY;
        for &v in &self.data {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        (lo, hi)
    }

    pub fn assert_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(SpadeError::Numerical(format!("non-finite voxel after {context}")));
        }
        Ok(())
    }
}

/// Trilinear interpolation over a flat depth-major buffer, edge-clamped.
pub fn sample_trilinear(data: &[f32], dims: [usize; 3], z: f64, y: f64, x: f64) -> f64 {
    let [d, h, w] = dims;
    // Clamp into [0, dim-1] so every sample point has a valid cell.
    let zc = z.clamp(0.0, (d - 1) as f64);
    let yc = y.clamp(0.0, (h - 1) as f64);
    let xc = x.clamp(0.0, (w - 1) as f64);

    let z0 = (zc.floor() as usize).min(d - 1);
    let y0 = (yc.floor() as usize).min(h - 1);
    let x0 = (xc.floor() as usize).min(w - 1);
    let z1 = (z0 + 1).min(d - 1);
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);

    let fz = zc - z0 as f64;
    let fy = yc - y0 as f64;
    let fx = xc - x0 as f64;

    let sz = h * w;
    let sy = w;
    let idx = |zz: usize, yy: usize, xx: usize| zz * sz + yy * sy + xx;

    let v000 = data[idx(z0, y0, x0)] as f64;
    let v001 = data[idx(z0, y0, x1)] as f64;
    let v010 = data[idx(z0, y1, x0)] as f64;
    let v011 = data[idx(z0, y1, x1)] as f64;
    let v100 = data[idx(z1, y0, x0)] as f64;
    let v101 = data[idx(z1, y0, x1)] as f64;
    let v110 = data[idx(z1, y1, x0)] as f64;
    let v111 = data[idx(z1, y1, x1)] as f64;

    let c00 = v000 * (1.0 - fx) + v001 * fx;
    let c01 = v010 * (1.0 - fx) + v011 * fx;
    let c10 = v100 * (1.0 - fx) + v101 * fx;
    let c11 = v110 * (1.0 - fx) + v111 * fx;

    let c0 = c00 * (1.0 - fy) + c01 * fy;
    let c1 = c10 * (1.0 - fy) + c11 * fy;

    c0 * (1.0 - fz) + c1 * fz
}

/// Spatial gradient `[d/dz, d/dy, d/dx]` of the trilinear interpolant at a
/// point. Zero along axes where the point is clamped outside the grid.
pub fn sample_trilinear_grad(data: &[f32], dims: [usize; 3], z: f64, y: f64, x: f64) -> (f64, [f64; 3]) {
    let [d, h, w] = dims;
    let zc = z.clamp(0.0, (d - 1) as f64);
    let yc = y.clamp(0.0, (h - 1) as f64);
    let xc = x.clamp(0.0, (w - 1) as f64);
    let clamped = [zc != z, yc != y, xc != x];

    let z0 = (zc.floor() as usize).min(d - 1);
    let y0 = (yc.floor() as usize).min(h - 1);
    let x0 = (xc.floor() as usize).min(w - 1);
    let z1 = (z0 + 1).min(d - 1);
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);

    let fz = zc - z0 as f64;
    let fy = yc - y0 as f64;
    let fx = xc - x0 as f64;

    let sz = h * w;
    let idx = |zz: usize, yy: usize, xx: usize| zz * sz + yy * w + xx;

    let v000 = data[idx(z0, y0, x0)] as f64;
    let v001 = data[idx(z0, y0, x1)] as f64;
    let v010 = data[idx(z0, y1, x0)] as f64;
    let v011 = data[idx(z0, y1, x1)] as f64;
    let v100 = data[idx(z1, y0, x0)] as f64;
    let v101 = data[idx(z1, y0, x1)] as f64;
    let v110 = data[idx(z1, y1, x0)] as f64;
    let v111 = data[idx(z1, y1, x1)] as f64;

    let c00 = v000 * (1.0 - fx) + v001 * fx;
    let c01 = v010 * (1.0 - fx) + v011 * fx;
    let c10 = v100 * (1.0 - fx) + v101 * fx;
    let c11 = v110 * (1.0 - fx) + v111 * fx;
    let c0 = c00 * (1.0 - fy) + c01 * fy;
    let c1 = c10 * (1.0 - fy) + c11 * fy;
    let value = c0 * (1.0 - fz) + c1 * fz;

    let dvdz = c1 - c0;
    let dc00 = v001 - v000;
    let dc01 = v011 - v010;
    let dc10 = v101 - v100;
    let dc11 = v111 - v110;
    let dvdx = (dc00 * (1.0 - fy) + dc01 * fy) * (1.0 - fz) + (dc10 * (1.0 - fy) + dc11 * fy) * fz;
    let dvdy = (c01 - c00) * (1.0 - fz) + (c11 - c10) * fz;

    let g = [
        if clamped[0] { 0.0 } else { dvdz },
        if clamped[1] { 0.0 } else { dvdy },
        if clamped[2] { 0.0 } else { dvdx },
    ];
    (value, g)
}

/// Clamp intensities to `[lo, hi]` and rescale linearly onto `[0, 1]`.
pub fn clip_normalize(v: &Volume, lo: f64, hi: f64) -> Result<Volume> {
    if !(lo < hi) {
        return Err(SpadeError::Parameter(format!("clip range requires lo < hi, got [{lo}, {hi}]")));
    }
    let span = hi - lo;
    let data = v
        .data
        .iter()
        .map(|&x| (((x as f64).clamp(lo, hi) - lo) / span) as f32)
        .collect();
    let out = Volume { id: v.id.clone(), dims: v.dims, spacing: v.spacing, data };
    out.assert_finite("clip_normalize")?;
    Ok(out)
}

/// Trilinear resample by a per-axis scale factor. Output voxel `i` samples
/// the input at `i / factor`; spacing is divided by the factor.
pub fn resample(v: &Volume, factor: [f64; 3]) -> Result<Volume> {
    if factor.iter().any(|&f| !(f > 0.0)) {
        return Err(SpadeError::Parameter(format!("resample factors must be > 0, got {factor:?}")));
    }
    let mut dims = [0usize; 3];
    for a in 0..3 {
        let n = (v.dims[a] as f64 * factor[a]).round() as isize;
        if n < 1 {
            return Err(SpadeError::Parameter(format!(
                "resample factor {} collapses axis {} (dim {}) below 1",
                factor[a], a, v.dims[a]
            )));
        }
        dims[a] = n as usize;
    }
    let mut data = vec![0.0f32; dims[0] * dims[1] * dims[2]];
    let mut i = 0;
    for z in 0..dims[0] {
        let sz = z as f64 / factor[0];
        for y in 0..dims[1] {
            let sy = y as f64 / factor[1];
            for x in 0..dims[2] {
                let sx = x as f64 / factor[2];
                data[i] = sample_trilinear(&v.data, v.dims, sz, sy, sx) as f32;
                i += 1;
            }
        }
    }
    let spacing = [v.spacing[0] / factor[0], v.spacing[1] / factor[1], v.spacing[2] / factor[2]];
    let out = Volume { id: v.id.clone(), dims, spacing, data };
    out.assert_finite("resample")?;
    Ok(out)
}

/// Tight bounding box of voxels strictly above `threshold`, plus the box
/// corner in the original volume. When nothing exceeds the threshold, the
/// whole volume is returned with zero offset so all-air inputs stay usable.
pub fn crop_background(v: &Volume, threshold: f64) -> (Volume, [usize; 3]) {
    let [d, h, w] = v.dims;
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut any = false;
    let mut i = 0;
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if v.data[i] as f64 > threshold {
                    any = true;
                    let p = [z, y, x];
                    for a in 0..3 {
                        lo[a] = lo[a].min(p[a]);
                        hi[a] = hi[a].max(p[a]);
                    }
                }
                i += 1;
            }
        }
    }
    if !any {
        return (v.clone(), [0, 0, 0]);
    }
    let dims = [hi[0] - lo[0] + 1, hi[1] - lo[1] + 1, hi[2] - lo[2] + 1];
    let mut data = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
    for z in lo[0]..=hi[0] {
        for y in lo[1]..=hi[1] {
            let start = v.index(z, y, lo[2]);
            data.extend_from_slice(&v.data[start..start + dims[2]]);
        }
    }
    (
        Volume { id: v.id.clone(), dims, spacing: v.spacing, data },
        lo,
    )
}

#[derive(Debug, Serialize, Deserialize)]
struct SvolHeader {
    dims: [usize; 3],
    spacing: [f64; 3],
    dtype: String,
    id: String,
}

/// Write a volume in the `.svol` format: one JSON header line, then
/// `d*h*w` little-endian f32 values in depth-major order.
pub fn write_svol(v: &Volume, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut wtr = BufWriter::new(file);
    let header = SvolHeader {
        dims: v.dims,
        spacing: v.spacing,
        dtype: "f32".to_string(),
        id: v.id.clone(),
    };
    serde_json::to_writer(&mut wtr, &header)?;
    wtr.write_all(b"\n")?;
    let mut buf = Vec::with_capacity(v.data.len() * 4);
    for &x in &v.data {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    wtr.write_all(&buf)?;
    wtr.flush()?;
    Ok(())
}

/// Read a `.svol` volume.
pub fn read_svol(path: &Path) -> Result<Volume> {
    let file = std::fs::File::open(path)?;
    let mut rdr = BufReader::new(file);
    let mut line = String::new();
    rdr.read_line(&mut line)?;
    let header: SvolHeader = serde_json::from_str(line.trim_end())?;
    if header.dtype != "f32" {
        return Err(SpadeError::Format(format!("unsupported svol dtype {:?}", header.dtype)));
    }
    let n = header.dims[0] * header.dims[1] * header.dims[2];
    let mut bytes = vec![0u8; n * 4];
    rdr.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Volume::new(header.id, header.dims, header.spacing, data)
}

/// Load every `.svol` file in a directory, sorted by file name.
pub fn read_svol_dir(dir: &Path) -> Result<Vec<Volume>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|e| e == "svol").unwrap_or(false))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(SpadeError::Availability(format!("no .svol files in {}", dir.display())));
    }
    paths.iter().map(|p| read_svol(p)).collect()
}
