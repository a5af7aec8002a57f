//! Anchor crop sampling and positive/negative cohort construction for the
//! global strategies (MoCo-baseline, G1, G2, G3) and local strategies
//! (L1, L2, L3, L4).
//!
//! Debiasing removes bank entries whose template-space IoU with the anchor
//! exceeds the threshold `o`; the strategies G3 and L4 additionally
//! repurpose the removed entries as positives.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::affine::AffineTransform;
use crate::bank::{BankEntry, BankSnapshot};
use crate::error::{Result, SpadeError};
use crate::patch::{map_patch, Patch, TemplateFootprint};
use crate::volume::Volume;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StrategyId {
    #[serde(rename = "MoCo-baseline", alias = "moco", alias = "MoCo")]
    MocoBaseline,
    G1,
    G2,
    G3,
    L1,
    L2,
    L3,
    L4,
}

impl StrategyId {
    pub fn is_global(&self) -> bool {
        matches!(self, StrategyId::MocoBaseline | StrategyId::G1 | StrategyId::G2 | StrategyId::G3)
    }

    pub fn is_local(&self) -> bool {
        !self.is_global()
    }
}

impl std::str::FromStr for StrategyId {
    type Err = SpadeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "MoCo-baseline" | "moco" | "MoCo" | "moco-baseline" => Ok(StrategyId::MocoBaseline),
            "G1" | "g1" => Ok(StrategyId::G1),
            "G2" | "g2" => Ok(StrategyId::G2),
            "G3" | "g3" => Ok(StrategyId::G3),
            "L1" | "l1" => Ok(StrategyId::L1),
            "L2" | "l2" => Ok(StrategyId::L2),
            "L3" | "l3" => Ok(StrategyId::L3),
            "L4" | "l4" => Ok(StrategyId::L4),
            other => Err(SpadeError::Parameter(format!("unknown strategy {other:?}"))),
        }
    }
}

impl std::fmt::Display for StrategyId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            StrategyId::MocoBaseline => "MoCo-baseline",
            StrategyId::G1 => "G1",
            StrategyId::G2 => "G2",
            StrategyId::G3 => "G3",
            StrategyId::L1 => "L1",
            StrategyId::L2 => "L2",
            StrategyId::L3 => "L3",
            StrategyId::L4 => "L4",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SamplingConfig {
    /// Overlap threshold for pairing and debiasing.
    #[serde(default = "default_o")]
    pub o: f64,
    /// Anchor pairs per batch.
    #[serde(default = "default_p")]
    pub p: usize,
    /// Inter-image positives per anchor.
    #[serde(default = "default_n_plus")]
    pub n_plus: usize,
    /// Network input size every crop is resized to.
    #[serde(default = "default_crop_size")]
    pub crop_size: [usize; 3],
    /// Random crop scaling range before the resize.
    #[serde(default = "default_scale_range")]
    pub scale_range: (f64, f64),
    /// Normalized intensity above which a voxel counts as foreground
    /// (0.325 is -350 HU after clipping to [-1000, 1000] and rescaling).
    #[serde(default = "default_air_threshold")]
    pub air_threshold: f64,
    /// Minimum foreground fraction for a crop to escape the
    /// mainly-air rejection.
    #[serde(default = "default_min_foreground")]
    pub min_foreground: f64,
    #[serde(default = "default_max_rejections")]
    pub max_rejections: usize,
}

fn default_o() -> f64 {
    0.2
}
fn default_p() -> usize {
    2
}
fn default_n_plus() -> usize {
    4
}
fn default_crop_size() -> [usize; 3] {
    [32, 64, 64]
}
fn default_scale_range() -> (f64, f64) {
    (0.5, 2.0)
}
fn default_air_threshold() -> f64 {
    0.325
}
fn default_min_foreground() -> f64 {
    0.1
}
fn default_max_rejections() -> usize {
    1000
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            o: default_o(),
            p: default_p(),
            n_plus: default_n_plus(),
            crop_size: default_crop_size(),
            scale_range: default_scale_range(),
            air_threshold: default_air_threshold(),
            min_foreground: default_min_foreground(),
            max_rejections: default_max_rejections(),
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.o) {
            return Err(SpadeError::Parameter(format!("o must be in [0, 1], got {}", self.o)));
        }
        if self.p < 1 {
            return Err(SpadeError::Parameter("p must be >= 1".into()));
        }
        if !(self.scale_range.0 > 0.0 && self.scale_range.1 >= self.scale_range.0) {
            return Err(SpadeError::Parameter(format!(
                "scale_range {:?} must be positive and ordered",
                self.scale_range
            )));
        }
        Ok(())
    }
}

/// Foreground fraction of the integer sub-box of `v` under `p`.
pub fn foreground_fraction(v: &Volume, p: &Patch, threshold: f64) -> f64 {
    let lo = [
        p.corner[0].floor().max(0.0) as usize,
        p.corner[1].floor().max(0.0) as usize,
        p.corner[2].floor().max(0.0) as usize,
    ];
    let hi = [
        (p.corner[0] + p.size[0]).ceil().min(v.dims[0] as f64) as usize,
        (p.corner[1] + p.size[1]).ceil().min(v.dims[1] as f64) as usize,
        (p.corner[2] + p.size[2]).ceil().min(v.dims[2] as f64) as usize,
    ];
    let mut above = 0usize;
    let mut total = 0usize;
    for z in lo[0]..hi[0] {
        for y in lo[1]..hi[1] {
            for x in lo[2]..hi[2] {
                total += 1;
                if v.at(z, y, x) as f64 > threshold {
                    above += 1;
                }
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        above as f64 / total as f64
    }
}

fn sample_crop(
    v: &Volume,
    cfg: &SamplingConfig,
    rng: &mut ChaCha8Rng,
    near: Option<&Patch>,
) -> Result<Patch> {
    let scale = if cfg.scale_range.1 > cfg.scale_range.0 {
        rng.gen_range(cfg.scale_range.0..cfg.scale_range.1)
    } else {
        cfg.scale_range.0
    };
    let mut size = [0f64; 3];
    let mut corner = [0f64; 3];
    for a in 0..3 {
        let want = (cfg.crop_size[a] as f64 * scale).round().max(2.0);
        size[a] = want.min(v.dims[a] as f64);
        let slack = v.dims[a] as f64 - size[a];
        corner[a] = match near {
            // Place the partner inside the slab where the required overlap
            // is still reachable; the exact IoU is verified by the caller.
            Some(base) if cfg.o > 0.0 => {
                let reach = (1.0 - cfg.o) * base.size[a].max(size[a]);
                let lo = (base.corner[a] - reach).max(0.0);
                let hi = (base.corner[a] + reach).min(slack.max(0.0));
                if hi > lo {
                    rng.gen_range(lo..=hi).floor()
                } else {
                    lo.min(slack.max(0.0)).floor()
                }
            }
            _ => {
                if slack > 0.0 {
                    rng.gen_range(0.0..=slack).floor()
                } else {
                    0.0
                }
            }
        };
    }
    Patch::new(&v.id, corner, size)
}

/// Sample exactly `p` anchor patch pairs from one volume. Each pair
/// overlaps with IoU at least `o` in image space, and crops that are
/// mainly air are rejected and resampled. Deterministic in the seed.
pub fn sample_anchor_pairs(v: &Volume, cfg: &SamplingConfig, seed: u64) -> Result<Vec<(Patch, Patch)>> {
    cfg.validate()?;
    for a in 0..3 {
        let min_size = (cfg.crop_size[a] as f64 * cfg.scale_range.0).round().max(2.0);
        if (v.dims[a] as f64) < min_size {
            return Err(SpadeError::Parameter(format!(
                "volume {:?} axis {a} (dim {}) smaller than minimum crop extent {min_size}",
                v.id, v.dims[a]
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(cfg.p);
    let mut rejections = 0usize;
    while pairs.len() < cfg.p {
        let a = sample_crop(v, cfg, &mut rng)?;
        if foreground_fraction(v, &a, cfg.air_threshold) < cfg.min_foreground {
            rejections += 1;
            if rejections >= cfg.max_rejections {
                return Err(SpadeError::SamplingExhausted(format!(
                    "{} consecutive rejections sampling anchors in {:?}",
                    rejections, v.id
                )));
            }
            continue;
        }
        let b = sample_crop(v, cfg, &mut rng)?;
        if foreground_fraction(v, &b, cfg.air_threshold) < cfg.min_foreground
            || a.iou(&b) < cfg.o
        {
            rejections += 1;
            if rejections >= cfg.max_rejections {
                return Err(SpadeError::SamplingExhausted(format!(
                    "{} consecutive rejections sampling anchor pairs in {:?}",
                    rejections, v.id
                )));
            }
            continue;
        }
        rejections = 0;
        pairs.push((a, b));
    }
    Ok(pairs)
}

/// Candidate volume metadata for cross-volume positive selection.
#[derive(Debug, Clone)]
pub struct VolumeRef<'a> {
    pub id: &'a str,
    pub dims: [usize; 3],
    pub transform: &'a AffineTransform,
}

/// Map the anchor into `n_plus` distinct other volumes, skipping volumes
/// where the mapped patch falls out of field. Candidates are visited in
/// the given order.
pub fn select_positive_volumes(
    anchor: &Patch,
    t_anchor: &AffineTransform,
    candidates: &[VolumeRef<'_>],
    n_plus: usize,
) -> Result<Vec<Patch>> {
    if n_plus == 0 {
        return Ok(Vec::new());
    }
    let mut out = Vec::with_capacity(n_plus);
    let mut usable = 0usize;
    for c in candidates {
        if c.id == anchor.volume_id {
            continue;
        }
        match map_patch(anchor, t_anchor, c.transform, c.id, c.dims) {
            Ok(p) => {
                usable += 1;
                if out.len() < n_plus {
                    out.push(p);
                }
                if out.len() == n_plus {
                    return Ok(out);
                }
            }
            Err(SpadeError::OutOfField(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(SpadeError::Availability(format!(
        "needed {n_plus} positive volumes for anchor in {:?} but only {usable} usable",
        anchor.volume_id
    )))
}

/// One member of a positive cohort. Live members carry an index the
/// trainer uses to route gradients; bank-sourced members are constants.
#[derive(Debug, Clone)]
pub struct CohortMember {
    pub values: Vec<f64>,
    pub live_id: Option<usize>,
    pub label: String,
}

impl CohortMember {
    pub fn live(values: Vec<f64>, live_id: usize, label: impl Into<String>) -> Self {
        CohortMember { values, live_id: Some(live_id), label: label.into() }
    }

    pub fn constant(values: Vec<f64>, label: impl Into<String>) -> Self {
        CohortMember { values, live_id: None, label: label.into() }
    }

    pub fn from_bank(entry: &BankEntry) -> Self {
        CohortMember {
            values: entry.embedding.iter().map(|&x| x as f64).collect(),
            live_id: None,
            label: format!("bank:{}", entry.age),
        }
    }
}

/// The (positives, negatives) pair consumed by the contrastive loss for
/// one anchor.
#[derive(Debug, Clone, Default)]
pub struct CohortPair {
    pub positives: Vec<CohortMember>,
    pub negatives: Vec<BankEntry>,
    /// Bank size at construction time, for telemetry.
    pub bank_size: usize,
    /// Entries removed from the negatives by debiasing.
    pub debiased: usize,
}

impl CohortPair {
    pub fn positive_slices(&self) -> Vec<&[f64]> {
        self.positives.iter().map(|m| m.values.as_slice()).collect()
    }

    pub fn negative_slices(&self) -> Vec<&[f32]> {
        self.negatives.iter().map(|e| e.embedding.as_slice()).collect()
    }
}

/// Build the positive and negative cohorts for a global strategy.
///
/// The anchor embedding always joins the positives, so the pairwise loss
/// is well defined; `positive_embeddings` carries the anchor's second view
/// (and, for G-strategies, the cross-volume correspondents).
pub fn build_global_cohorts(
    strategy: StrategyId,
    anchor_embedding: CohortMember,
    positive_embeddings: Vec<CohortMember>,
    anchor_footprint: &TemplateFootprint,
    bank: &BankSnapshot,
    o: f64,
) -> Result<CohortPair> {
    if !strategy.is_global() {
        return Err(SpadeError::Parameter(format!(
            "{strategy} is not a global strategy"
        )));
    }
    let mut positives = vec![anchor_embedding];
    positives.extend(positive_embeddings);
    let bank_size = bank.len();
    let (negatives, debiased) = match strategy {
        StrategyId::MocoBaseline | StrategyId::G1 => (bank.entries.clone(), Vec::new()),
        StrategyId::G2 | StrategyId::G3 => bank.partition_by_overlap(anchor_footprint, o)?,
        _ => unreachable!(),
    };
    if strategy == StrategyId::G3 {
        positives.extend(debiased.iter().map(CohortMember::from_bank));
    }
    Ok(CohortPair { positives, negatives, bank_size, debiased: debiased.len() })
}

/// Build the positive and negative cohorts for a local strategy from the
/// anchor pair's own overlap embeddings and (for L3/L4) the corresponding
/// overlap embeddings from other volumes.
pub fn build_local_cohorts(
    strategy: StrategyId,
    own_overlap_embeddings: (CohortMember, CohortMember),
    cross_overlap_embeddings: Vec<CohortMember>,
    anchor_footprint: &TemplateFootprint,
    bank: &BankSnapshot,
    o: f64,
) -> Result<CohortPair> {
    if !strategy.is_local() {
        return Err(SpadeError::Parameter(format!(
            "{strategy} is not a local strategy"
        )));
    }
    let mut positives = vec![own_overlap_embeddings.0, own_overlap_embeddings.1];
    if matches!(strategy, StrategyId::L3 | StrategyId::L4) {
        positives.extend(cross_overlap_embeddings);
    }
    let bank_size = bank.len();
    let (negatives, debiased) = match strategy {
        StrategyId::L1 => (bank.entries.clone(), Vec::new()),
        _ => bank.partition_by_overlap(anchor_footprint, o)?,
    };
    if strategy == StrategyId::L4 {
        positives.extend(debiased.iter().map(CohortMember::from_bank));
    }
    Ok(CohortPair { positives, negatives, bank_size, debiased: debiased.len() })
}
