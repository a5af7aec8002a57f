//! Patch geometry: boxes in volume space, their template-space footprints,
//! and the box IoU that drives every debiasing predicate.
//!
//! Footprints of affinely mapped boxes are the axis-aligned bounding box of
//! the eight mapped corners, and IoU is computed on continuous extents.

use serde::{Deserialize, Serialize};

use crate::affine::AffineTransform;
use crate::error::{Result, SpadeError};
use crate::volume::Volume;

/// An axis-aligned box in some volume's voxel space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Patch {
    pub volume_id: String,
    /// `[z, y, x]` of the low corner.
    pub corner: [f64; 3],
    /// Extent per axis, voxels; components must be > 0.
    pub size: [f64; 3],
}

impl Patch {
    pub fn new(volume_id: impl Into<String>, corner: [f64; 3], size: [f64; 3]) -> Result<Self> {
        if size.iter().any(|&s| !(s > 0.0)) {
            return Err(SpadeError::Parameter(format!("patch size must be > 0 per axis, got {size:?}")));
        }
        Ok(Patch { volume_id: volume_id.into(), corner, size })
    }

    pub fn high(&self) -> [f64; 3] {
        [
            self.corner[0] + self.size[0],
            self.corner[1] + self.size[1],
            self.corner[2] + self.size[2],
        ]
    }

    pub fn volume(&self) -> f64 {
        self.size[0] * self.size[1] * self.size[2]
    }

    /// Continuous intersection box, if nonempty.
    pub fn intersect(&self, other: &Patch) -> Option<([f64; 3], [f64; 3])> {
        let mut lo = [0.0; 3];
        let mut hi = [0.0; 3];
        for a in 0..3 {
            lo[a] = self.corner[a].max(other.corner[a]);
            hi[a] = self.high()[a].min(other.high()[a]);
            if !(hi[a] > lo[a]) {
                return None;
            }
        }
        Some((lo, hi))
    }

    /// IoU of two boxes in the same volume's coordinates.
    pub fn iou(&self, other: &Patch) -> f64 {
        box_iou(self.corner, self.high(), other.corner, other.high())
    }
}

/// A patch's axis-aligned bounding box in template coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateFootprint {
    pub corner: [f64; 3],
    pub size: [f64; 3],
}

impl TemplateFootprint {
    pub fn new(corner: [f64; 3], size: [f64; 3]) -> Result<Self> {
        if size.iter().any(|&s| !(s > 0.0)) {
            return Err(SpadeError::Parameter(format!(
                "footprint size must be > 0 per axis, got {size:?}"
            )));
        }
        Ok(TemplateFootprint { corner, size })
    }

    pub fn high(&self) -> [f64; 3] {
        [
            self.corner[0] + self.size[0],
            self.corner[1] + self.size[1],
            self.corner[2] + self.size[2],
        ]
    }

    pub fn volume(&self) -> f64 {
        self.size[0] * self.size[1] * self.size[2]
    }
}

fn box_iou(a_lo: [f64; 3], a_hi: [f64; 3], b_lo: [f64; 3], b_hi: [f64; 3]) -> f64 {
    let mut inter = 1.0f64;
    for a in 0..3 {
        let lo = a_lo[a].max(b_lo[a]);
        let hi = a_hi[a].min(b_hi[a]);
        if hi <= lo {
            return 0.0;
        }
        inter *= hi - lo;
    }
    let va: f64 = (0..3).map(|a| a_hi[a] - a_lo[a]).product();
    let vb: f64 = (0..3).map(|a| b_hi[a] - b_lo[a]).product();
    inter / (va + vb - inter)
}

/// IoU of two template footprints, in `[0, 1]`; 0 when disjoint.
pub fn patch_iou(a: &TemplateFootprint, b: &TemplateFootprint) -> f64 {
    box_iou(a.corner, a.high(), b.corner, b.high())
}

fn map_corners(corner: [f64; 3], size: [f64; 3], t: &AffineTransform) -> ([f64; 3], [f64; 3]) {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for mask in 0..8u32 {
        let p = [
            corner[0] + if mask & 1 != 0 { size[0] } else { 0.0 },
            corner[1] + if mask & 2 != 0 { size[1] } else { 0.0 },
            corner[2] + if mask & 4 != 0 { size[2] } else { 0.0 },
        ];
        let q = t.apply(p);
        for a in 0..3 {
            lo[a] = lo[a].min(q[a]);
            hi[a] = hi[a].max(q[a]);
        }
    }
    (lo, hi)
}

/// Map a patch into template space through its volume's registered
/// transform: the AABB of the eight mapped box corners.
pub fn to_template(p: &Patch, t: &AffineTransform) -> Result<TemplateFootprint> {
    if t.det().abs() < 1e-12 {
        return Err(SpadeError::Geometry("to_template requires an invertible transform".into()));
    }
    let (lo, hi) = map_corners(p.corner, p.size, t);
    TemplateFootprint::new(lo, [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]])
}

/// Relocate a patch from its source volume into a destination volume via
/// the template: `P -> T_dst^{-1} ∘ T_src (P)`, clipped to the destination
/// bounds. Errors when the mapped box lands fully outside the destination.
pub fn map_patch(
    p: &Patch,
    t_src: &AffineTransform,
    t_dst: &AffineTransform,
    dst_id: &str,
    dst_dims: [usize; 3],
) -> Result<Patch> {
    let chain = t_dst.invert()?.compose(t_src);
    let (mut lo, mut hi) = map_corners(p.corner, p.size, &chain);
    for a in 0..3 {
        let bound = dst_dims[a] as f64;
        if hi[a] <= 0.0 || lo[a] >= bound {
            return Err(SpadeError::OutOfField(format!(
                "patch from {:?} maps outside {:?} on axis {a} ([{}, {}] vs [0, {bound}])",
                p.volume_id, dst_id, lo[a], hi[a]
            )));
        }
        lo[a] = lo[a].max(0.0);
        hi[a] = hi[a].min(bound);
        // Keep at least one voxel per axis after clipping.
        if hi[a] - lo[a] < 1.0 {
            let mid_hi = (lo[a] + 1.0).min(bound);
            let mid_lo = mid_hi - 1.0;
            if mid_lo < 0.0 {
                return Err(SpadeError::OutOfField(format!(
                    "destination {:?} too small on axis {a} for a 1-voxel patch",
                    dst_id
                )));
            }
            lo[a] = mid_lo;
            hi[a] = mid_hi;
        }
    }
    Patch::new(dst_id, lo, [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]])
}

/// Extract a patch from a volume, trilinearly resized to `out_dims`
/// (align-corners sampling; an integer box at its native size copies
/// voxels exactly).
pub fn extract_patch(v: &Volume, p: &Patch, out_dims: [usize; 3]) -> Result<Volume> {
    if out_dims.iter().any(|&d| d == 0) {
        return Err(SpadeError::Parameter("extract_patch output dims must be >= 1".into()));
    }
    let mut data = vec![0.0f32; out_dims[0] * out_dims[1] * out_dims[2]];
    let step = |axis: usize| -> f64 {
        if out_dims[axis] > 1 {
            (p.size[axis] - 1.0).max(0.0) / (out_dims[axis] - 1) as f64
        } else {
            0.0
        }
    };
    let (sz, sy, sx) = (step(0), step(1), step(2));
    let mut i = 0;
    for z in 0..out_dims[0] {
        let pz = p.corner[0] + z as f64 * sz;
        for y in 0..out_dims[1] {
            let py = p.corner[1] + y as f64 * sy;
            for x in 0..out_dims[2] {
                let px = p.corner[2] + x as f64 * sx;
                data[i] = v.sample(pz, py, px) as f32;
                i += 1;
            }
        }
    }
    Volume::new(format!("{}@{:?}", v.id, p.corner), out_dims, v.spacing, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn patch(corner: [f64; 3], size: [f64; 3]) -> Patch {
        Patch::new("v", corner, size).unwrap()
    }

    #[test]
    fn iou_self_is_exactly_one() {
        let a = TemplateFootprint::new([1.0, 2.0, 3.0], [4.0, 5.0, 6.0]).unwrap();
        assert_eq!(patch_iou(&a, &a), 1.0);
    }

    #[test]
    fn iou_disjoint_is_zero() {
        let a = TemplateFootprint::new([0.0; 3], [5.0; 3]).unwrap();
        let b = TemplateFootprint::new([10.0, 0.0, 0.0], [5.0; 3]).unwrap();
        assert_eq!(patch_iou(&a, &b), 0.0);
    }

    #[test]
    fn iou_half_shifted_boxes() {
        // Voxel-counting oracle: inter = 5*10*10 = 500, union = 1500.
        let a = TemplateFootprint::new([0.0; 3], [10.0; 3]).unwrap();
        let b = TemplateFootprint::new([5.0, 0.0, 0.0], [10.0; 3]).unwrap();
        let iou = patch_iou(&a, &b);
        assert!((iou - 500.0 / 1500.0).abs() < 1e-15);
    }

    #[test]
    fn iou_symmetric_and_bounded() {
        let mut s = 7u64;
        let mut next = move || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 33) as f64) / (u32::MAX as f64) * 20.0
        };
        for _ in 0..500 {
            let a = TemplateFootprint::new(
                [next(), next(), next()],
                [next() + 0.5, next() + 0.5, next() + 0.5],
            )
            .unwrap();
            let b = TemplateFootprint::new(
                [next(), next(), next()],
                [next() + 0.5, next() + 0.5, next() + 0.5],
            )
            .unwrap();
            let ab = patch_iou(&a, &b);
            let ba = patch_iou(&b, &a);
            assert_eq!(ab, ba);
            assert!((0.0..=1.0).contains(&ab));
        }
    }

    #[test]
    fn to_template_identity_keeps_box() {
        let p = patch([1.0, 2.0, 3.0], [4.0, 4.0, 4.0]);
        let f = to_template(&p, &AffineTransform::identity()).unwrap();
        assert_eq!(f.corner, p.corner);
        assert_eq!(f.size, p.size);
    }

    #[test]
    fn to_template_translation_shifts_corner() {
        let p = patch([1.0, 2.0, 3.0], [4.0, 4.0, 4.0]);
        let t = AffineTransform::translation([3.0, 0.0, 0.0]);
        let f = to_template(&p, &t).unwrap();
        assert_eq!(f.corner, [4.0, 2.0, 3.0]);
        assert_eq!(f.size, p.size);
    }

    #[test]
    fn to_template_rotation_matches_corner_oracle() {
        // Quarter turn about the depth axis of a 2x4x6 box at the origin.
        let p = patch([0.0, 0.0, 0.0], [2.0, 4.0, 6.0]);
        let t = AffineTransform::rotation_z(std::f64::consts::FRAC_PI_2);
        let f = to_template(&p, &t).unwrap();
        // Corner-mapping oracle: map all 8 corners by hand, take min/max.
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for z in [0.0, 2.0] {
            for y in [0.0, 4.0] {
                for x in [0.0, 6.0] {
                    let q = t.apply([z, y, x]);
                    for a in 0..3 {
                        lo[a] = lo[a].min(q[a]);
                        hi[a] = hi[a].max(q[a]);
                    }
                }
            }
        }
        for a in 0..3 {
            assert!((f.corner[a] - lo[a]).abs() < 1e-12);
            assert!((f.corner[a] + f.size[a] - hi[a]).abs() < 1e-12);
        }
        // In-plane extents swap under the quarter turn.
        assert!((f.size[0] - 2.0).abs() < 1e-12);
        assert!((f.size[1] - 6.0).abs() < 1e-12);
        assert!((f.size[2] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn to_template_volume_scales_by_det_for_axis_aligned_maps() {
        let p = patch([2.0, 3.0, 4.0], [3.0, 5.0, 7.0]);
        for t in [
            AffineTransform::translation([4.5, -2.0, 1.0]),
            AffineTransform::scaling([2.0, 0.5, 1.25]),
            AffineTransform::scaling_about([1.5, 1.5, 1.5], [8.0, 8.0, 8.0]),
        ] {
            let f = to_template(&p, &t).unwrap();
            let expected = t.det().abs() * p.volume();
            assert!(
                (f.volume() - expected).abs() / expected <= 1e-9,
                "volume {} vs {}",
                f.volume(),
                expected
            );
        }
    }

    #[test]
    fn map_patch_same_transform_keeps_coordinates() {
        let p = patch([2.0, 2.0, 2.0], [4.0, 4.0, 4.0]);
        let t = AffineTransform::scaling_about([1.1, 0.9, 1.0], [5.0, 5.0, 5.0]);
        let q = map_patch(&p, &t, &t, "w", [16, 16, 16]).unwrap();
        assert_eq!(q.volume_id, "w");
        for a in 0..3 {
            assert!((q.corner[a] - p.corner[a]).abs() < 1e-9);
            assert!((q.size[a] - p.size[a]).abs() < 1e-9);
        }
    }

    #[test]
    fn map_patch_composes_translations() {
        // src: +10 in x to template; dst: +4 in x to template.
        // dst^{-1} ∘ src adds +6 in x.
        let p = patch([0.0, 0.0, 0.0], [2.0, 2.0, 2.0]);
        let t_src = AffineTransform::translation([0.0, 0.0, 10.0]);
        let t_dst = AffineTransform::translation([0.0, 0.0, 4.0]);
        let q = map_patch(&p, &t_src, &t_dst, "w", [32, 32, 32]).unwrap();
        assert_eq!(q.corner, [0.0, 0.0, 6.0]);
    }

    #[test]
    fn map_patch_both_identity_keeps_coordinates() {
        let p = patch([1.0, 2.0, 3.0], [2.0, 2.0, 2.0]);
        let id = AffineTransform::identity();
        let q = map_patch(&p, &id, &id, "other", [8, 8, 8]).unwrap();
        assert_eq!(q.corner, p.corner);
        assert_eq!(q.size, p.size);
        assert_eq!(q.volume_id, "other");
    }

    #[test]
    fn map_patch_out_of_field_errors() {
        let p = patch([0.0, 0.0, 0.0], [2.0, 2.0, 2.0]);
        let t_src = AffineTransform::translation([100.0, 0.0, 0.0]);
        let id = AffineTransform::identity();
        assert!(matches!(
            map_patch(&p, &t_src, &id, "w", [16, 16, 16]),
            Err(SpadeError::OutOfField(_))
        ));
    }

    #[test]
    fn map_patch_round_trip_keeps_high_iou() {
        let t_i = AffineTransform::translation([1.0, -2.0, 3.0])
            .compose(&AffineTransform::scaling_about([1.05, 0.95, 1.0], [16.0; 3]));
        let t_j = AffineTransform::translation([-2.0, 1.0, 0.5])
            .compose(&AffineTransform::scaling_about([0.98, 1.02, 1.03], [16.0; 3]));
        let p = patch([8.0, 8.0, 8.0], [8.0, 8.0, 8.0]);
        let q = map_patch(&p, &t_i, &t_j, "j", [32, 32, 32]).unwrap();
        let back = map_patch(&q, &t_j, &t_i, "v", [32, 32, 32]).unwrap();
        assert!(p.iou(&back) >= 0.99, "round-trip iou {}", p.iou(&back));
    }

    #[test]
    fn extract_patch_native_size_copies_voxels() {
        let mut v = Volume::filled("e", [4, 4, 4], [1.0; 3], 0.0);
        for i in 0..v.data.len() {
            v.data[i] = i as f32;
        }
        let p = patch([1.0, 1.0, 1.0], [2.0, 2.0, 2.0]);
        let e = extract_patch(&v, &p, [2, 2, 2]).unwrap();
        for z in 0..2 {
            for y in 0..2 {
                for x in 0..2 {
                    assert_eq!(e.at(z, y, x), v.at(z + 1, y + 1, x + 1));
                }
            }
        }
    }
}
