//! Synthetic phantom generation.
//!
//! Phantoms are smooth Gaussian blobs on a flat air-like background
//! (-1000), giving registration a registrable intensity landscape. A
//! corpus is built by warping one base phantom through random affines so
//! that volumes share content and spatial correspondences are real.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::affine::AffineTransform;
use crate::error::{Result, SpadeError};
use crate::registration::warp;
use crate::volume::Volume;

pub const AIR_HU: f64 = -1000.0;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub seed: u64,
    pub size: [usize; 3],
    pub num_blobs: usize,
    /// Blob amplitude range in Hounsfield-like units above the background.
    pub intensity_range: (f64, f64),
    #[serde(default = "default_id")]
    pub id: String,
}

fn default_id() -> String {
    "phantom".to_string()
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            seed: 0,
            size: [64, 64, 64],
            num_blobs: 12,
            intensity_range: (600.0, 1400.0),
            id: default_id(),
        }
    }
}

/// Deterministic blob phantom. Identical specs produce bit-identical data.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<Volume> {
    if spec.size.iter().any(|&s| s < 8) {
        return Err(SpadeError::Parameter(format!(
            "phantom size components must be >= 8, got {:?}",
            spec.size
        )));
    }
    let (lo, hi) = spec.intensity_range;
    if !(lo <= hi) {
        return Err(SpadeError::Parameter(format!("intensity_range ({lo}, {hi}) is inverted")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let [d, h, w] = spec.size;
    let min_dim = d.min(h).min(w) as f64;

    struct Blob {
        center: [f64; 3],
        inv_two_sigma2: [f64; 3],
        amp: f64,
    }
    let mut blobs = Vec::with_capacity(spec.num_blobs);
    for _ in 0..spec.num_blobs {
        // Keep centers away from the border so warped corpora stay in-field.
        let c = [
            rng.gen_range(0.15..0.85) * d as f64,
            rng.gen_range(0.15..0.85) * h as f64,
            rng.gen_range(0.15..0.85) * w as f64,
        ];
        let mut s2 = [0.0; 3];
        for v in s2.iter_mut() {
            let sigma = rng.gen_range(min_dim / 16.0..min_dim / 6.0).max(3.0);
            *v = 1.0 / (2.0 * sigma * sigma);
        }
        let amp = if hi > lo { rng.gen_range(lo..hi) } else { lo };
        blobs.push(Blob { center: c, inv_two_sigma2: s2, amp });
    }

    let mut data = vec![0.0f32; d * h * w];
    let mut i = 0;
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let mut v = AIR_HU;
                for b in &blobs {
                    let dz = z as f64 - b.center[0];
                    let dy = y as f64 - b.center[1];
                    let dx = x as f64 - b.center[2];
                    let e = dz * dz * b.inv_two_sigma2[0]
                        + dy * dy * b.inv_two_sigma2[1]
                        + dx * dx * b.inv_two_sigma2[2];
                    v += b.amp * (-e).exp();
                }
                data[i] = v.min(3000.0) as f32;
                i += 1;
            }
        }
    }
    Volume::new(spec.id.clone(), spec.size, [1.0, 1.0, 1.0], data)
}

/// Specification for a corpus of phantoms derived from one base phantom by
/// random affine perturbations plus optional voxel noise.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub base: PhantomSpec,
    pub count: usize,
    /// Maximum absolute translation per axis, voxels.
    #[serde(default = "default_max_translation")]
    pub max_translation: f64,
    /// Per-axis scale range around 1.
    #[serde(default = "default_scale_range")]
    pub scale_range: (f64, f64),
    /// Std-dev of additive Gaussian intensity noise, HU.
    #[serde(default = "default_noise_hu")]
    pub noise_hu: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_max_translation() -> f64 {
    6.0
}
fn default_scale_range() -> (f64, f64) {
    (0.92, 1.08)
}
fn default_noise_hu() -> f64 {
    20.0
}

/// Generate `count` volumes. Volume 0 is the unperturbed base (the natural
/// template choice); the rest are affine-warped, noised copies. Returns the
/// volumes along with the ground-truth warp applied to each (identity for
/// the base).
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Vec<(Volume, AffineTransform)>> {
    if spec.count == 0 {
        return Err(SpadeError::Parameter("corpus count must be >= 1".into()));
    }
    let base = generate_phantom(&spec.base)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5ade_c0de);
    let mut out = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let id = format!("{}-{:03}", spec.base.id, i);
        if i == 0 {
            let mut v = base.clone();
            v.id = id;
            out.push((v, AffineTransform::identity()));
            continue;
        }
        let (slo, shi) = spec.scale_range;
        let mut diag = [0.0; 3];
        for v in diag.iter_mut() {
            *v = rng.gen_range(slo..shi);
        }
        let mut t = [0.0; 3];
        for v in t.iter_mut() {
            *v = rng.gen_range(-spec.max_translation..spec.max_translation);
        }
        // Scale about the volume centre so content does not drift out.
        let c = [
            (base.dims[0] as f64 - 1.0) / 2.0,
            (base.dims[1] as f64 - 1.0) / 2.0,
            (base.dims[2] as f64 - 1.0) / 2.0,
        ];
        let transform = AffineTransform::translation(t)
            .compose(&AffineTransform::scaling_about(diag, c));
        let mut v = warp(&base, &transform, base.dims)?;
        v.id = id;
        if spec.noise_hu > 0.0 {
            for x in v.data.iter_mut() {
                let n: f64 = rng.sample(rand_distr_standard_normal());
                *x += (n * spec.noise_hu) as f32;
            }
        }
        v.assert_finite("corpus generation")?;
        out.push((v, transform));
    }
    Ok(out)
}

/// Standard normal via Box-Muller on the uniform generator, avoiding an
/// extra dependency for one distribution.
struct BoxMuller;

fn rand_distr_standard_normal() -> BoxMuller {
    BoxMuller
}

impl rand::distributions::Distribution<f64> for BoxMuller {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_spec_is_bit_identical() {
        let spec = PhantomSpec { seed: 42, ..Default::default() };
        let a = generate_phantom(&spec).unwrap();
        let b = generate_phantom(&spec).unwrap();
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn zero_blobs_gives_constant_background() {
        let spec = PhantomSpec { num_blobs: 0, size: [8, 8, 8], ..Default::default() };
        let v = generate_phantom(&spec).unwrap();
        assert!(v.data.iter().all(|&x| x == AIR_HU as f32));
    }

    #[test]
    fn different_seeds_differ() {
        let a = generate_phantom(&PhantomSpec { seed: 1, ..Default::default() }).unwrap();
        let b = generate_phantom(&PhantomSpec { seed: 2, ..Default::default() }).unwrap();
        assert!(a.data.iter().zip(&b.data).any(|(x, y)| x != y));
    }

    #[test]
    fn undersized_spec_rejected() {
        let spec = PhantomSpec { size: [4, 64, 64], ..Default::default() };
        assert!(matches!(generate_phantom(&spec), Err(SpadeError::Parameter(_))));
    }

    #[test]
    fn corpus_base_is_identity() {
        let spec = CorpusSpec {
            base: PhantomSpec { size: [16, 16, 16], num_blobs: 3, ..Default::default() },
            count: 3,
            seed: 9,
            noise_hu: 0.0,
            ..CorpusSpec {
                base: PhantomSpec::default(),
                count: 0,
                max_translation: 2.0,
                scale_range: (0.95, 1.05),
                noise_hu: 0.0,
                seed: 0,
            }
        };
        let corpus = generate_corpus(&spec).unwrap();
        assert_eq!(corpus.len(), 3);
        let (_, t0) = &corpus[0];
        assert!(t0.is_identity(1e-12));
        assert_ne!(corpus[1].0.id, corpus[2].0.id);
    }
}
