//! Differentiable networks, augmentations, and overlap-logit machinery.

pub mod aug;
pub mod net;
pub mod tensor;

pub use aug::{apply_intensity, apply_spatial, apply_spatial_volume, invert_spatial, IntensityAug, SpatialAug};
pub use net::{
    momentum_update, read_checkpoint, write_checkpoint, ModelParams, NetConfig, SpadeNet,
};
pub use tensor::Tensor4;

use crate::error::{Result, SpadeError};
use crate::patch::Patch;

/// The index window of `own_patch ∩ other_patch` inside `own_patch`'s
/// logit grid. `z_dims` are the spatial dims of the logits, which map onto
/// the patch box by align-corners scaling (identity when the patch is at
/// its native size).
pub fn overlap_window(
    own_patch: &Patch,
    other_patch: &Patch,
    z_dims: [usize; 3],
) -> Result<([usize; 3], [usize; 3])> {
    let (lo, hi) = own_patch.intersect(other_patch).ok_or_else(|| {
        SpadeError::Geometry(format!(
            "patches {:?} and {:?} do not overlap",
            own_patch.corner, other_patch.corner
        ))
    })?;
    let mut ilo = [0usize; 3];
    let mut ihi = [0usize; 3];
    for a in 0..3 {
        let scale = if own_patch.size[a] > 1.0 {
            (z_dims[a] as f64 - 1.0) / (own_patch.size[a] - 1.0)
        } else {
            0.0
        };
        let a_lo = (lo[a] - own_patch.corner[a]) * scale;
        let a_hi = (hi[a] - own_patch.corner[a]) * scale;
        let mut i_lo = a_lo.round().max(0.0) as usize;
        let mut i_hi = a_hi.round().min(z_dims[a] as f64) as usize;
        if i_hi <= i_lo {
            // Overlap thinner than one logit cell: keep a single cell.
            i_lo = i_lo.min(z_dims[a] - 1);
            i_hi = i_lo + 1;
        }
        ilo[a] = i_lo;
        ihi[a] = i_hi;
    }
    Ok((ilo, ihi))
}

/// Restrict logits to the overlap of `own_patch` with `other_patch`,
/// expressed in `own_patch`'s voxel frame.
pub fn extract_overlap_logits(z: &Tensor4, own_patch: &Patch, other_patch: &Patch) -> Result<Tensor4> {
    let (lo, hi) = overlap_window(own_patch, other_patch, [z.d, z.h, z.w])?;
    z.slice_spatial(lo, hi)
}
