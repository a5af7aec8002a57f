//! Embedding alignment probe: how much closer are corresponding patches
//! across volumes than non-corresponding ones, measured by global
//! embedding cosine. A desk-scale stand-in for downstream evaluation.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, SpadeError};
use crate::model::SpadeNet;
use crate::patch::{extract_patch, map_patch, patch_iou, to_template, Patch};
use crate::sampling::foreground_fraction;
use crate::trainer::Corpus;

#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct ProbeResult {
    pub mean_corr_cos: f64,
    pub mean_noncorr_cos: f64,
}

impl ProbeResult {
    pub fn margin(&self) -> f64 {
        self.mean_corr_cos - self.mean_noncorr_cos
    }
}

/// Sample `n_pairs` corresponding patch pairs (same template location,
/// different volumes) and `n_pairs` non-corresponding pairs (template
/// IoU = 0), and return the mean embedding cosine of each group.
pub fn alignment_probe(
    net: &SpadeNet,
    params: &[f64],
    corpus: &Corpus,
    crop_size: [usize; 3],
    n_pairs: usize,
    seed: u64,
) -> Result<ProbeResult> {
    if corpus.volumes.len() < 2 {
        return Err(SpadeError::Availability(format!(
            "alignment probe needs at least 2 volumes, got {}",
            corpus.volumes.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let air_threshold = 0.325;
    let min_foreground = 0.05;
    let max_attempts = n_pairs * 500;

    let embed = |vol_idx: usize, p: &Patch| -> Result<Vec<f64>> {
        let native = extract_patch(&corpus.volumes[vol_idx], p, crop_size)?;
        let (v, _) = net.forward_global(params, &native)?;
        Ok(v)
    };

    let random_patch = |rng: &mut ChaCha8Rng, vol_idx: usize| -> Option<Patch> {
        let v = &corpus.volumes[vol_idx];
        let mut size = [0f64; 3];
        let mut corner = [0f64; 3];
        for a in 0..3 {
            size[a] = (crop_size[a] as f64).min(v.dims[a] as f64);
            let slack = v.dims[a] as f64 - size[a];
            corner[a] = if slack > 0.0 { rng.gen_range(0.0..=slack).floor() } else { 0.0 };
        }
        let p = Patch::new(&v.id, corner, size).ok()?;
        if foreground_fraction(v, &p, air_threshold) < min_foreground {
            return None;
        }
        Some(p)
    };

    // Corresponding pairs.
    let mut corr = Vec::with_capacity(n_pairs);
    let mut attempts = 0;
    while corr.len() < n_pairs {
        attempts += 1;
        if attempts > max_attempts {
            return Err(SpadeError::Availability(
                "could not sample enough corresponding pairs; volumes too sparse".into(),
            ));
        }
        let u = rng.gen_range(0..corpus.volumes.len());
        let mut w = rng.gen_range(0..corpus.volumes.len());
        if corpus.volumes.len() > 1 {
            while w == u {
                w = rng.gen_range(0..corpus.volumes.len());
            }
        }
        let Some(p) = random_patch(&mut rng, u) else { continue };
        let t_u = corpus.transform_of(u);
        let t_w = corpus.transform_of(w);
        let mapped = match map_patch(&p, t_u, t_w, &corpus.volumes[w].id, corpus.volumes[w].dims) {
            Ok(m) => m,
            Err(SpadeError::OutOfField(_)) => continue,
            Err(e) => return Err(e),
        };
        let ea = embed(u, &p)?;
        let eb = embed(w, &mapped)?;
        corr.push(dot(&ea, &eb));
    }

    // Non-corresponding pairs: disjoint template footprints.
    let mut noncorr = Vec::with_capacity(n_pairs);
    attempts = 0;
    while noncorr.len() < n_pairs {
        attempts += 1;
        if attempts > max_attempts {
            return Err(SpadeError::Availability(
                "could not sample enough non-corresponding pairs; volumes too small".into(),
            ));
        }
        let u = rng.gen_range(0..corpus.volumes.len());
        let w = rng.gen_range(0..corpus.volumes.len());
        let Some(pa) = random_patch(&mut rng, u) else { continue };
        let Some(pb) = random_patch(&mut rng, w) else { continue };
        let fa = to_template(&pa, corpus.transform_of(u))?;
        let fb = to_template(&pb, corpus.transform_of(w))?;
        if patch_iou(&fa, &fb) != 0.0 {
            continue;
        }
        let ea = embed(u, &pa)?;
        let eb = embed(w, &pb)?;
        noncorr.push(dot(&ea, &eb));
    }

    Ok(ProbeResult {
        mean_corr_cos: mean(&corr),
        mean_noncorr_cos: mean(&noncorr),
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}
