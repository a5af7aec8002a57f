//! Spatial and intensity augmentations for crop views.
//!
//! Spatial augmentations are restricted to axis flips and in-plane quarter
//! turns so that every transform is an exact index permutation with an
//! exact inverse — required for reversing logits before local embedding.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor4;
use crate::error::{Result, SpadeError};
use crate::volume::Volume;

/// Flips are applied first, then `rot90` quarter turns about the depth
/// axis (counter-clockwise in the (y, x) plane).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpatialAug {
    pub axis_flips: [bool; 3],
    pub rot90_count: u8,
}

impl SpatialAug {
    pub fn identity() -> Self {
        SpatialAug { axis_flips: [false; 3], rot90_count: 0 }
    }

    pub fn is_identity(&self) -> bool {
        !self.axis_flips.iter().any(|&f| f) && self.rot90_count % 4 == 0
    }

    pub fn random(rng: &mut impl Rng) -> Self {
        SpatialAug {
            axis_flips: [rng.gen(), rng.gen(), rng.gen()],
            rot90_count: rng.gen_range(0..4),
        }
    }

    /// All 32 members of the augmentation family.
    pub fn all() -> Vec<SpatialAug> {
        let mut out = Vec::with_capacity(32);
        for bits in 0..8u8 {
            for rot in 0..4u8 {
                out.push(SpatialAug {
                    axis_flips: [bits & 1 != 0, bits & 2 != 0, bits & 4 != 0],
                    rot90_count: rot,
                });
            }
        }
        out
    }
}

fn flip_tensor(t: &Tensor4, axis: usize) -> Tensor4 {
    let mut out = Tensor4::zeros(t.c, t.d, t.h, t.w);
    for c in 0..t.c {
        for z in 0..t.d {
            for y in 0..t.h {
                for x in 0..t.w {
                    let (sz, sy, sx) = match axis {
                        0 => (t.d - 1 - z, y, x),
                        1 => (z, t.h - 1 - y, x),
                        _ => (z, y, t.w - 1 - x),
                    };
                    let dst = out.idx(c, z, y, x);
                    out.data[dst] = t.at(c, sz, sy, sx);
                }
            }
        }
    }
    out
}

/// One counter-clockwise quarter turn in the (y, x) plane:
/// `out[z, y, x] = in[z, x, W_in - 1 - y]`.
fn rot90_tensor(t: &Tensor4) -> Tensor4 {
    let (oh, ow) = (t.w, t.h);
    let mut out = Tensor4::zeros(t.c, t.d, oh, ow);
    for c in 0..t.c {
        for z in 0..t.d {
            for y in 0..oh {
                for x in 0..ow {
                    let dst = out.idx(c, z, y, x);
                    out.data[dst] = t.at(c, z, x, t.w - 1 - y);
                }
            }
        }
    }
    out
}

/// Apply flips then quarter turns to a tensor. Odd quarter-turn counts
/// require a square (h == w) in-plane shape.
pub fn apply_spatial(t: &Tensor4, aug: &SpatialAug) -> Result<Tensor4> {
    let rot = aug.rot90_count % 4;
    if rot % 2 == 1 && t.h != t.w {
        return Err(SpadeError::Shape(format!(
            "odd quarter-turn needs square in-plane dims, got {}x{}",
            t.h, t.w
        )));
    }
    let mut cur = t.clone();
    for (axis, &f) in aug.axis_flips.iter().enumerate() {
        if f {
            cur = flip_tensor(&cur, axis);
        }
    }
    for _ in 0..rot {
        cur = rot90_tensor(&cur);
    }
    Ok(cur)
}

/// Exact inverse of [`apply_spatial`]: undo the quarter turns, then the
/// flips.
pub fn invert_spatial(t: &Tensor4, aug: &SpatialAug) -> Result<Tensor4> {
    let rot = aug.rot90_count % 4;
    if rot % 2 == 1 && t.h != t.w {
        return Err(SpadeError::Shape(format!(
            "odd quarter-turn needs square in-plane dims, got {}x{}",
            t.h, t.w
        )));
    }
    let mut cur = t.clone();
    for _ in 0..(4 - rot) % 4 {
        cur = rot90_tensor(&cur);
    }
    for (axis, &f) in aug.axis_flips.iter().enumerate() {
        if f {
            cur = flip_tensor(&cur, axis);
        }
    }
    Ok(cur)
}

/// Spatial augmentation of a volume patch (single-channel view).
pub fn apply_spatial_volume(v: &Volume, aug: &SpatialAug) -> Result<Volume> {
    let t = Tensor4::from_volume(v);
    let out = apply_spatial(&t, aug)?;
    Volume::new(
        v.id.clone(),
        [out.d, out.h, out.w],
        v.spacing,
        out.data.iter().map(|&x| x as f32).collect(),
    )
}

/// MG-style intensity noising. Every kind maps `[0, 1]` into `[0, 1]` and
/// is deterministic in its seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum IntensityAug {
    GaussianNoise { sigma: f64, seed: u64 },
    IntensityShiftScale { shift: f64, scale: f64 },
    Gamma { gamma: f64 },
    LocalShuffle { window: usize, seed: u64 },
}

impl IntensityAug {
    pub fn identity() -> Self {
        IntensityAug::IntensityShiftScale { shift: 0.0, scale: 1.0 }
    }

    pub fn random(rng: &mut impl Rng) -> Self {
        match rng.gen_range(0..4) {
            0 => IntensityAug::GaussianNoise { sigma: rng.gen_range(0.0..0.05), seed: rng.gen() },
            1 => IntensityAug::IntensityShiftScale {
                shift: rng.gen_range(-0.1..0.1),
                scale: rng.gen_range(0.9..1.1),
            },
            2 => IntensityAug::Gamma { gamma: rng.gen_range(0.7..1.4) },
            _ => IntensityAug::LocalShuffle { window: 4, seed: rng.gen() },
        }
    }
}

/// Apply an intensity augmentation to a patch with values in `[0, 1]`.
pub fn apply_intensity(v: &Volume, aug: &IntensityAug) -> Volume {
    let mut out = v.clone();
    match aug {
        IntensityAug::GaussianNoise { sigma, seed } => {
            if *sigma > 0.0 {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                for x in out.data.iter_mut() {
                    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
                    let u2: f64 = rng.gen_range(0.0..1.0);
                    let n = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
                    *x = ((*x as f64 + n * sigma).clamp(0.0, 1.0)) as f32;
                }
            }
        }
        IntensityAug::IntensityShiftScale { shift, scale } => {
            if *shift != 0.0 || *scale != 1.0 {
                for x in out.data.iter_mut() {
                    *x = ((*x as f64 * scale + shift).clamp(0.0, 1.0)) as f32;
                }
            }
        }
        IntensityAug::Gamma { gamma } => {
            for x in out.data.iter_mut() {
                *x = ((*x as f64).max(0.0).powf(*gamma).clamp(0.0, 1.0)) as f32;
            }
        }
        IntensityAug::LocalShuffle { window, seed } => {
            let win = (*window).max(1);
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let [d, h, w] = v.dims;
            let mut bz = 0;
            while bz < d {
                let ez = (bz + win).min(d);
                let mut by = 0;
                while by < h {
                    let ey = (by + win).min(h);
                    let mut bx = 0;
                    while bx < w {
                        let ex = (bx + win).min(w);
                        let mut idxs = Vec::with_capacity((ez - bz) * (ey - by) * (ex - bx));
                        for z in bz..ez {
                            for y in by..ey {
                                for x in bx..ex {
                                    idxs.push(out.index(z, y, x));
                                }
                            }
                        }
                        // Fisher-Yates within the window.
                        for i in (1..idxs.len()).rev() {
                            let j = rng.gen_range(0..=i);
                            out.data.swap(idxs[i], idxs[j]);
                        }
                        bx = ex;
                    }
                    by = ey;
                }
                bz = ez;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn seq_tensor(c: usize, d: usize, h: usize, w: usize) -> Tensor4 {
        let mut t = Tensor4::zeros(c, d, h, w);
        for (i, v) in t.data.iter_mut().enumerate() {
            *v = i as f64;
        }
        t
    }

    #[test]
    fn identity_aug_is_noop() {
        let t = seq_tensor(2, 2, 4, 4);
        let a = SpatialAug::identity();
        assert_eq!(apply_spatial(&t, &a).unwrap(), t);
        assert_eq!(invert_spatial(&t, &a).unwrap(), t);
    }

    #[test]
    fn double_flip_is_identity() {
        let t = seq_tensor(1, 2, 4, 4);
        let a = SpatialAug { axis_flips: [false, false, true], rot90_count: 0 };
        let once = apply_spatial(&t, &a).unwrap();
        let twice = apply_spatial(&once, &a).unwrap();
        assert_eq!(twice, t);
        assert_ne!(once, t);
    }

    #[test]
    fn rot90_four_times_is_identity() {
        let t = seq_tensor(1, 2, 4, 4);
        let a = SpatialAug { axis_flips: [false; 3], rot90_count: 1 };
        let mut cur = t.clone();
        for _ in 0..4 {
            cur = apply_spatial(&cur, &a).unwrap();
        }
        assert_eq!(cur, t);
    }

    #[test]
    fn every_aug_round_trips_bit_exact() {
        let t = seq_tensor(3, 2, 4, 4);
        for a in SpatialAug::all() {
            let f = apply_spatial(&t, &a).unwrap();
            let back = invert_spatial(&f, &a).unwrap();
            assert_eq!(back, t, "aug {a:?}");
        }
    }

    #[test]
    fn odd_rotation_on_non_square_errors() {
        let t = seq_tensor(1, 2, 4, 6);
        let a = SpatialAug { axis_flips: [false; 3], rot90_count: 1 };
        assert!(matches!(apply_spatial(&t, &a), Err(SpadeError::Shape(_))));
        // Even counts are fine.
        let a2 = SpatialAug { axis_flips: [false; 3], rot90_count: 2 };
        assert!(apply_spatial(&t, &a2).is_ok());
    }

    fn unit_patch() -> Volume {
        let mut v = Volume::filled("p", [4, 4, 4], [1.0; 3], 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for x in v.data.iter_mut() {
            *x = rng.gen_range(0.0f32..1.0);
        }
        v
    }

    #[test]
    fn zero_sigma_noise_is_identity() {
        let v = unit_patch();
        let out = apply_intensity(&v, &IntensityAug::GaussianNoise { sigma: 0.0, seed: 3 });
        assert_eq!(out.data, v.data);
    }

    #[test]
    fn neutral_shift_scale_is_identity() {
        let v = unit_patch();
        let out = apply_intensity(&v, &IntensityAug::IntensityShiftScale { shift: 0.0, scale: 1.0 });
        assert_eq!(out.data, v.data);
    }

    #[test]
    fn gamma_two_squares_values() {
        let mut v = Volume::filled("p", [1, 1, 1], [1.0; 3], 0.5);
        v.data[0] = 0.5;
        let out = apply_intensity(&v, &IntensityAug::Gamma { gamma: 2.0 });
        assert!((out.data[0] - 0.25).abs() < 1e-7);
    }

    #[test]
    fn intensity_outputs_stay_in_unit_range() {
        let v = unit_patch();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let aug = IntensityAug::random(&mut rng);
            let out = apply_intensity(&v, &aug);
            assert_eq!(out.dims, v.dims);
            assert!(out.data.iter().all(|&x| (0.0..=1.0).contains(&x)), "{aug:?}");
        }
    }

    #[test]
    fn intensity_deterministic_in_seed() {
        let v = unit_patch();
        let a = IntensityAug::GaussianNoise { sigma: 0.03, seed: 99 };
        assert_eq!(apply_intensity(&v, &a).data, apply_intensity(&v, &a).data);
        let b = IntensityAug::LocalShuffle { window: 2, seed: 7 };
        assert_eq!(apply_intensity(&v, &b).data, apply_intensity(&v, &b).data);
    }

    #[test]
    fn local_shuffle_permutes_within_windows_only() {
        let mut v = Volume::filled("p", [4, 4, 4], [1.0; 3], 0.0);
        for (i, x) in v.data.iter_mut().enumerate() {
            *x = i as f32 / 64.0;
        }
        let out = apply_intensity(&v, &IntensityAug::LocalShuffle { window: 2, seed: 1 });
        // Multiset of each 2x2x2 window is preserved.
        for bz in [0, 2] {
            for by in [0, 2] {
                for bx in [0, 2] {
                    let mut a: Vec<f32> = Vec::new();
                    let mut b: Vec<f32> = Vec::new();
                    for z in bz..bz + 2 {
                        for y in by..by + 2 {
                            for x in bx..bx + 2 {
                                a.push(v.at(z, y, x));
                                b.push(out.at(z, y, x));
                            }
                        }
                    }
                    a.sort_by(f32::total_cmp);
                    b.sort_by(f32::total_cmp);
                    assert_eq!(a, b);
                }
            }
        }
    }

    #[test]
    fn monotone_intensity_augs_preserve_argmax() {
        let mut v = Volume::filled("p", [5, 5, 5], [1.0; 3], 0.1);
        v.set(2, 3, 1, 0.9);
        let argmax = |vol: &Volume| -> usize {
            vol.data
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0
        };
        let base = argmax(&v);
        for aug in [
            IntensityAug::GaussianNoise { sigma: 0.0, seed: 1 },
            IntensityAug::IntensityShiftScale { shift: 0.05, scale: 0.9 },
            IntensityAug::IntensityShiftScale { shift: -0.02, scale: 1.1 },
            IntensityAug::Gamma { gamma: 0.5 },
            IntensityAug::Gamma { gamma: 2.0 },
        ] {
            assert_eq!(argmax(&apply_intensity(&v, &aug)), base, "{aug:?}");
        }
    }
}
