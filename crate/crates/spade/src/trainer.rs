//! The end-to-end pretraining loop: sample anchor pairs, map
//! correspondences, run two augmented views of every crop through the
//! regular and momentum networks, build the configured cohorts, descend
//! the weighted loss, update the momentum twin, and enqueue its
//! embeddings.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::affine::{AffineTransform, TransformSet};
use crate::bank::{BankSnapshot, MemoryBank};
use crate::error::{Result, SpadeError};
use crate::losses::{con_loss, recon_loss, total_loss, LossConfig};
use crate::model::aug::{apply_intensity, apply_spatial, apply_spatial_volume, invert_spatial};
use crate::model::net::{momentum_update, DecCache, EncCache, HgCache, HlCache, ModelParams, NetConfig, SpadeNet};
use crate::model::{overlap_window, SpatialAug, Tensor4};
use crate::model::IntensityAug;
use crate::patch::{extract_patch, map_patch, to_template, Patch, TemplateFootprint};
use crate::registration::{register, RegistrationConfig};
use crate::sampling::{
    build_global_cohorts, build_local_cohorts, sample_anchor_pairs, select_positive_volumes,
    CohortMember, CohortPair, SamplingConfig, StrategyId, VolumeRef,
};
use crate::volume::{clip_normalize, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LocalStrategy {
    #[serde(rename = "none")]
    None,
    L1,
    L2,
    L3,
    L4,
}

impl LocalStrategy {
    pub fn id(&self) -> Option<StrategyId> {
        match self {
            LocalStrategy::None => None,
            LocalStrategy::L1 => Some(StrategyId::L1),
            LocalStrategy::L2 => Some(StrategyId::L2),
            LocalStrategy::L3 => Some(StrategyId::L3),
            LocalStrategy::L4 => Some(StrategyId::L4),
        }
    }

    pub fn needs_cross(&self) -> bool {
        matches!(self, LocalStrategy::L3 | LocalStrategy::L4)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_strategy_global")]
    pub strategy_global: StrategyId,
    #[serde(default = "default_strategy_local")]
    pub strategy_local: LocalStrategy,
    #[serde(default = "default_use_reconstruction")]
    pub use_reconstruction: bool,
    #[serde(default = "default_beta")]
    pub beta: f64,
    /// Anchor-pair groups per step; each group draws `sampling.p` pairs
    /// from one randomly chosen anchor volume.
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_sgd_momentum")]
    pub sgd_momentum: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_bank_capacity_global")]
    pub bank_capacity_global: usize,
    #[serde(default = "default_bank_capacity_local")]
    pub bank_capacity_local: usize,
    /// Contrastive terms stay zero until each bank holds this many
    /// entries.
    #[serde(default = "default_bank_warmup")]
    pub bank_warmup: usize,
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
    #[serde(default)]
    pub sampling: SamplingConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub net: NetConfig,
}

fn default_strategy_global() -> StrategyId {
    StrategyId::G3
}
fn default_strategy_local() -> LocalStrategy {
    LocalStrategy::L2
}
fn default_use_reconstruction() -> bool {
    true
}
fn default_beta() -> f64 {
    0.99
}
fn default_batch_size() -> usize {
    1
}
fn default_steps() -> usize {
    2000
}
fn default_learning_rate() -> f64 {
    0.01
}
fn default_sgd_momentum() -> f64 {
    0.9
}
fn default_bank_capacity_global() -> usize {
    16000
}
fn default_bank_capacity_local() -> usize {
    1000
}
fn default_bank_warmup() -> usize {
    64
}
fn default_checkpoint_every() -> usize {
    500
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            strategy_global: default_strategy_global(),
            strategy_local: default_strategy_local(),
            use_reconstruction: default_use_reconstruction(),
            beta: default_beta(),
            batch_size: default_batch_size(),
            steps: default_steps(),
            learning_rate: default_learning_rate(),
            sgd_momentum: default_sgd_momentum(),
            seed: 0,
            bank_capacity_global: default_bank_capacity_global(),
            bank_capacity_local: default_bank_capacity_local(),
            bank_warmup: default_bank_warmup(),
            checkpoint_every: default_checkpoint_every(),
            sampling: SamplingConfig::default(),
            loss: LossConfig::default(),
            net: NetConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.strategy_global.is_global() {
            return Err(SpadeError::Parameter(format!(
                "strategy_global {} is not a global strategy",
                self.strategy_global
            )));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(SpadeError::Parameter(format!("beta must be in [0, 1], got {}", self.beta)));
        }
        if self.steps == 0 || self.batch_size == 0 {
            return Err(SpadeError::Parameter("steps and batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(SpadeError::Parameter("learning_rate must be > 0".into()));
        }
        self.sampling.validate()?;
        self.loss.validate()?;
        self.net.validate()?;
        for (a, &c) in self.sampling.crop_size.iter().enumerate() {
            let m = self.net.dim_multiple();
            if c == 0 || c % m != 0 {
                return Err(SpadeError::Parameter(format!(
                    "crop_size[{a}] = {c} must be a positive multiple of {m} for {} network stages",
                    self.net.stages()
                )));
            }
        }
        if self.sampling.crop_size[1] != self.sampling.crop_size[2] {
            return Err(SpadeError::Parameter(
                "crop_size must be square in-plane so quarter-turn augmentations stay exact".into(),
            ));
        }
        Ok(())
    }
}

/// Normalized volumes plus their registered transforms, id-aligned.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub volumes: Vec<Volume>,
    pub transforms: TransformSet,
}

impl Corpus {
    /// Clip raw volumes to `[-1000, 1000]`, rescale to `[0, 1]`, and check
    /// every volume has a registered transform.
    pub fn prepare(raw: Vec<Volume>, transforms: TransformSet) -> Result<Self> {
        if raw.is_empty() {
            return Err(SpadeError::Availability("corpus has no volumes".into()));
        }
        let mut volumes = Vec::with_capacity(raw.len());
        for v in raw {
            transforms.require(&v.id)?;
            volumes.push(clip_normalize(&v, -1000.0, 1000.0)?);
        }
        Ok(Corpus { volumes, transforms })
    }

    pub fn transform_of(&self, idx: usize) -> &AffineTransform {
        self.transforms.get(&self.volumes[idx].id).expect("prepared corpus is id-aligned")
    }
}

/// Register every volume to the template; identity for the template
/// itself. Fails with the offending volume id on any registration error.
pub fn prepare_corpus(
    volumes: &[Volume],
    template_id: &str,
    cfg: &RegistrationConfig,
) -> Result<Vec<(String, AffineTransform, f64)>> {
    let template = volumes
        .iter()
        .find(|v| v.id == template_id)
        .ok_or_else(|| SpadeError::Availability(format!("template {template_id:?} not in corpus")))?;
    let results: Vec<Result<(String, AffineTransform, f64)>> = volumes
        .par_iter()
        .map(|v| {
            if v.id == template_id {
                return Ok((v.id.clone(), AffineTransform::identity(), 1.0));
            }
            let (t, ncc) = register(v, template, cfg)
                .map_err(|e| SpadeError::Data(format!("registration of {:?} failed: {e}", v.id)))?;
            Ok((v.id.clone(), t, ncc))
        })
        .collect();
    results.into_iter().collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss_global: f64,
    pub loss_local: f64,
    pub loss_recon: f64,
    pub loss_total: f64,
    pub lr: f64,
    pub mean_positives: f64,
    pub mean_negatives: f64,
    pub mean_debiased: f64,
    pub bank_global: usize,
    pub bank_local: usize,
    pub corr_cos: f64,
    pub noncorr_cos: f64,
}

pub const METRICS_HEADER: &str = "step,loss_global,loss_local,loss_recon,loss_total,lr,mean_positives,mean_negatives,mean_debiased,bank_global,bank_local,corr_cos,noncorr_cos";

impl StepRecord {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.loss_global,
            self.loss_local,
            self.loss_recon,
            self.loss_total,
            self.lr,
            self.mean_positives,
            self.mean_negatives,
            self.mean_debiased,
            self.bank_global,
            self.bank_local,
            self.corr_cos,
            self.noncorr_cos
        )
    }
}

pub struct TrainState {
    pub net: SpadeNet,
    pub params: ModelParams,
    pub velocity: Vec<f64>,
    pub bank_global: MemoryBank,
    pub bank_local: MemoryBank,
    pub step: usize,
}

impl TrainState {
    pub fn init(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let net = SpadeNet::new(cfg.net.clone())?;
        let params = ModelParams::init(&net, cfg.seed);
        let velocity = vec![0.0; net.param_count()];
        Ok(TrainState {
            net,
            params,
            velocity,
            bank_global: MemoryBank::new(cfg.bank_capacity_global)?,
            bank_local: MemoryBank::new(cfg.bank_capacity_local)?,
            step: 0,
        })
    }
}

fn step_seed(seed: u64, step: u64, lane: u64) -> u64 {
    // splitmix64 over (seed, step, lane)
    let mut x = seed
        .wrapping_add(step.wrapping_mul(0x9E3779B97F4A7C15))
        .wrapping_add(lane.wrapping_mul(0xBF58476D1CE4E5B9));
    x ^= x >> 30;
    x = x.wrapping_mul(0xBF58476D1CE4E5B9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94D049BB133111EB);
    x ^= x >> 31;
    x
}

#[derive(Debug, Clone)]
pub struct ViewSpec {
    pub spatial: SpatialAug,
    pub intensity: IntensityAug,
}

#[derive(Debug, Clone)]
pub struct CropPlan {
    pub patch: Patch,
    pub volume: usize,
    pub footprint: TemplateFootprint,
    pub views: [ViewSpec; 2],
    /// Cross-volume corresponding patches for positive enrichment.
    pub cross: Vec<Patch>,
}

#[derive(Debug, Clone)]
pub struct PairPlan {
    pub a: usize,
    pub b: usize,
    pub overlap: Patch,
    pub overlap_footprint: TemplateFootprint,
    /// For L3/L4: per cross volume, the two mapped crops.
    pub cross_pairs: Vec<(Patch, Patch)>,
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub crops: Vec<CropPlan>,
    pub pairs: Vec<PairPlan>,
}

/// Draw the whole batch (anchors, correspondences, augmentations) for one
/// step. Pure in `(cfg.seed, step)`, so preparation can be pipelined
/// ahead of the optimizer without changing results.
pub fn prepare_batch(corpus: &Corpus, cfg: &TrainConfig, step: usize) -> Result<Batch> {
    let mut crops = Vec::new();
    let mut pairs = Vec::new();
    let want_cross_global =
        cfg.strategy_global != StrategyId::MocoBaseline && cfg.sampling.n_plus > 0;
    let want_cross_local = cfg.strategy_local.needs_cross();

    for group in 0..cfg.batch_size {
        let mut rng = ChaCha8Rng::seed_from_u64(step_seed(cfg.seed, step as u64, group as u64));
        let anchor_idx = rng.gen_range(0..corpus.volumes.len());
        let anchor_vol = &corpus.volumes[anchor_idx];
        let t_anchor = corpus.transform_of(anchor_idx);
        let sampled = sample_anchor_pairs(anchor_vol, &cfg.sampling, rng.gen())?;

        // A shuffled candidate order shared by every crop in the group.
        let mut order: Vec<usize> = (0..corpus.volumes.len()).collect();
        order.shuffle(&mut rng);
        let candidates: Vec<VolumeRef<'_>> = order
            .iter()
            .map(|&i| VolumeRef {
                id: &corpus.volumes[i].id,
                dims: corpus.volumes[i].dims,
                transform: corpus.transform_of(i),
            })
            .collect();

        for (pa, pb) in sampled {
            let base = crops.len();
            for patch in [pa.clone(), pb.clone()] {
                let footprint = to_template(&patch, t_anchor)?;
                let cross = if want_cross_global {
                    select_positive_volumes(&patch, t_anchor, &candidates, cfg.sampling.n_plus)?
                } else {
                    Vec::new()
                };
                let views = [
                    ViewSpec { spatial: SpatialAug::random(&mut rng), intensity: IntensityAug::random(&mut rng) },
                    ViewSpec { spatial: SpatialAug::random(&mut rng), intensity: IntensityAug::random(&mut rng) },
                ];
                crops.push(CropPlan { patch, volume: anchor_idx, footprint, views, cross });
            }
            if let Some((lo, hi)) = pa.intersect(&pb) {
                let overlap = Patch::new(
                    &pa.volume_id,
                    lo,
                    [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]],
                )?;
                let overlap_footprint = to_template(&overlap, t_anchor)?;
                let mut cross_pairs = Vec::new();
                if want_cross_local {
                    for c in &candidates {
                        if cross_pairs.len() >= cfg.sampling.n_plus {
                            break;
                        }
                        if c.id == pa.volume_id {
                            continue;
                        }
                        let ma = map_patch(&pa, t_anchor, c.transform, c.id, c.dims);
                        let mb = map_patch(&pb, t_anchor, c.transform, c.id, c.dims);
                        if let (Ok(ma), Ok(mb)) = (ma, mb) {
                            if ma.intersect(&mb).is_some() {
                                cross_pairs.push((ma, mb));
                            }
                        }
                    }
                }
                pairs.push(PairPlan { a: base, b: base + 1, overlap, overlap_footprint, cross_pairs });
            }
        }
    }
    Ok(Batch { crops, pairs })
}

struct ViewPass {
    input_target: Tensor4,
    enc_cache: EncCache,
    z_enc: Tensor4,
    dec_cache: DecCache,
    z_dec: Tensor4,
    hg_cache: HgCache,
    v_g: Vec<f64>,
    recon_out: Option<Tensor4>,
    d_vg: Vec<f64>,
    d_zdec: Tensor4,
    d_zprime: Option<Tensor4>,
}

struct CrossGlobalPass {
    enc_cache: EncCache,
    hg_cache: HgCache,
    v_g: Vec<f64>,
    d_vg: Vec<f64>,
}

struct CrossLocalPass {
    enc_cache: EncCache,
    dec_cache: DecCache,
    d_zdec: Tensor4,
}

struct LocalEmbed {
    owner_view: Option<usize>,
    owner_cross: Option<usize>,
    window_lo: [usize; 3],
    hl_cache: HlCache,
    values: Vec<f64>,
    d_emb: Vec<f64>,
}

enum LiveRoute {
    ViewGlobal(usize),
    CrossGlobal(usize),
    Local(usize),
}

/// Ratio of each crop's own-volume index pair to the flattened view pass
/// index.
fn view_index(crop: usize, view: usize) -> usize {
    crop * 2 + view
}

/// One optimization step. Deterministic given `(cfg.seed, state.step)`.
pub fn train_step(state: &mut TrainState, corpus: &Corpus, cfg: &TrainConfig) -> Result<StepRecord> {
    let step = state.step;
    let batch = prepare_batch(corpus, cfg, step)?;
    let net = &state.net;
    let theta = &state.params.theta;
    let epsilon = &state.params.epsilon;
    let crop_dims = cfg.sampling.crop_size;
    let local_strategy = cfg.strategy_local.id();

    // ---- forward: regular and momentum passes over every crop view ----
    let mut view_passes: Vec<ViewPass> = Vec::with_capacity(batch.crops.len() * 2);
    let mut momentum_global: Vec<Vec<f64>> = Vec::with_capacity(batch.crops.len() * 2);
    let mut momentum_local: Vec<Vec<f64>> = Vec::with_capacity(batch.crops.len() * 2);

    for crop in &batch.crops {
        let vol = &corpus.volumes[crop.volume];
        let native = extract_patch(vol, &crop.patch, crop_dims)?;
        for view in &crop.views {
            let spatial = apply_spatial_volume(&native, &view.spatial)?;
            let noised = apply_intensity(&spatial, &view.intensity);
            let input = Tensor4::from_volume(&noised);
            let target = Tensor4::from_volume(&spatial);

            let (z_enc, enc_cache) = net.encoder_forward(theta, &input)?;
            let (z_dec, dec_cache) = net.decoder_forward(theta, &z_enc)?;
            let (v_g, hg_cache) = net.hg_forward(theta, &z_enc)?;
            let recon_out = if cfg.use_reconstruction {
                let (out, _) = net.recon_forward(theta, &z_dec)?;
                Some(out)
            } else {
                None
            };
            let d_zdec = Tensor4::zeros(z_dec.c, z_dec.d, z_dec.h, z_dec.w);
            let d_vg = vec![0.0; v_g.len()];
            view_passes.push(ViewPass {
                input_target: target,
                enc_cache,
                z_enc,
                dec_cache,
                z_dec,
                hg_cache,
                v_g,
                recon_out,
                d_vg,
                d_zdec,
                d_zprime: None,
            });

            // Momentum path: forward only. The local embedding is taken in
            // the view's original orientation so bank entries compare
            // consistently.
            let (z_enc_m, _) = net.encoder_forward(epsilon, &input)?;
            let (v_g_m, _) = net.hg_forward(epsilon, &z_enc_m)?;
            let (z_dec_m, _) = net.decoder_forward(epsilon, &z_enc_m)?;
            let z_dec_m_orig = invert_spatial(&z_dec_m, &view.spatial)?;
            let (v_l_m, _) = net.hl_forward(epsilon, &z_dec_m_orig)?;
            momentum_global.push(v_g_m);
            momentum_local.push(v_l_m);
        }
    }

    // Cross-volume global positives, one pass per mapped patch per crop.
    let mut cross_global: Vec<CrossGlobalPass> = Vec::new();
    let mut cross_global_of_crop: Vec<Vec<usize>> = vec![Vec::new(); batch.crops.len()];
    for (ci, crop) in batch.crops.iter().enumerate() {
        for mapped in &crop.cross {
            let vol_idx = corpus
                .volumes
                .iter()
                .position(|v| v.id == mapped.volume_id)
                .ok_or_else(|| SpadeError::Availability(format!("unknown volume {:?}", mapped.volume_id)))?;
            let native = extract_patch(&corpus.volumes[vol_idx], mapped, crop_dims)?;
            let input = Tensor4::from_volume(&native);
            let (z_enc, enc_cache) = net.encoder_forward(theta, &input)?;
            let (v_g, hg_cache) = net.hg_forward(theta, &z_enc)?;
            cross_global_of_crop[ci].push(cross_global.len());
            let d = vec![0.0; v_g.len()];
            cross_global.push(CrossGlobalPass { enc_cache, hg_cache, v_g, d_vg: d });
        }
    }

    // Local overlap embeddings from the anchor pair's own views.
    let mut local_embeds: Vec<LocalEmbed> = Vec::new();
    let mut cross_local: Vec<CrossLocalPass> = Vec::new();
    // (pair index, view index) -> (own embed ids, cross embed ids)
    let mut pair_view_embeds: Vec<Vec<([usize; 2], Vec<usize>)>> = vec![Vec::new(); batch.pairs.len()];

    if local_strategy.is_some() {
        // Cross overlap passes are shared across the two views of a pair.
        let mut cross_embeds_of_pair: Vec<Vec<usize>> = vec![Vec::new(); batch.pairs.len()];
        for (pi, pair) in batch.pairs.iter().enumerate() {
            for (ma, mb) in &pair.cross_pairs {
                let mut ids = [0usize; 2];
                for (slot, (own, other)) in [(ma, mb), (mb, ma)].iter().enumerate() {
                    let vol_idx = corpus
                        .volumes
                        .iter()
                        .position(|v| v.id == own.volume_id)
                        .ok_or_else(|| {
                            SpadeError::Availability(format!("unknown volume {:?}", own.volume_id))
                        })?;
                    let native = extract_patch(&corpus.volumes[vol_idx], own, crop_dims)?;
                    let input = Tensor4::from_volume(&native);
                    let (z_enc, enc_cache) = net.encoder_forward(theta, &input)?;
                    let (z_dec, dec_cache) = net.decoder_forward(theta, &z_enc)?;
                    let (lo, hi) = overlap_window(own, other, crop_dims)?;
                    let slice = z_dec.slice_spatial(lo, hi)?;
                    let (emb, hl_cache) = net.hl_forward(theta, &slice)?;
                    let cross_id = cross_local.len();
                    let d_zdec = Tensor4::zeros(z_dec.c, z_dec.d, z_dec.h, z_dec.w);
                    cross_local.push(CrossLocalPass { enc_cache, dec_cache, d_zdec });
                    let d = vec![0.0; emb.len()];
                    ids[slot] = local_embeds.len();
                    local_embeds.push(LocalEmbed {
                        owner_view: None,
                        owner_cross: Some(cross_id),
                        window_lo: lo,
                        hl_cache,
                        values: emb,
                        d_emb: d,
                    });
                }
                cross_embeds_of_pair[pi].extend_from_slice(&ids);
            }
        }

        for (pi, pair) in batch.pairs.iter().enumerate() {
            for view in 0..2 {
                let mut own_ids = [0usize; 2];
                for (slot, (crop_idx, other_idx)) in
                    [(pair.a, pair.b), (pair.b, pair.a)].iter().enumerate()
                {
                    let own_patch = &batch.crops[*crop_idx].patch;
                    let other_patch = &batch.crops[*other_idx].patch;
                    let vp_idx = view_index(*crop_idx, view);
                    let aug = batch.crops[*crop_idx].views[view].spatial;
                    // Reverse the spatial transform on the logits, then
                    // restrict to the overlap in the original frame.
                    let z_prime = invert_spatial(&view_passes[vp_idx].z_dec, &aug)?;
                    let (lo, hi) = overlap_window(own_patch, other_patch, crop_dims)?;
                    let slice = z_prime.slice_spatial(lo, hi)?;
                    let (emb, hl_cache) = net.hl_forward(theta, &slice)?;
                    let d = vec![0.0; emb.len()];
                    own_ids[slot] = local_embeds.len();
                    local_embeds.push(LocalEmbed {
                        owner_view: Some(vp_idx),
                        owner_cross: None,
                        window_lo: lo,
                        hl_cache,
                        values: emb,
                        d_emb: d,
                    });
                }
                pair_view_embeds[pi].push((own_ids, cross_embeds_of_pair[pi].clone()));
            }
        }
    }

    // ---- cohorts and losses ----
    let snap_g: BankSnapshot = state.bank_global.snapshot();
    let snap_l: BankSnapshot = state.bank_local.snapshot();
    let global_active = snap_g.len() >= cfg.bank_warmup;
    let local_active = local_strategy.is_some() && snap_l.len() >= cfg.bank_warmup;

    let mut live_routes: Vec<LiveRoute> = Vec::new();
    let mut global_cohorts: Vec<CohortPair> = Vec::new();
    let mut local_cohorts: Vec<CohortPair> = Vec::new();

    if global_active {
        for (ci, crop) in batch.crops.iter().enumerate() {
            for view in 0..2 {
                let vp_idx = view_index(ci, view);
                let anchor_live = live_routes.len();
                live_routes.push(LiveRoute::ViewGlobal(vp_idx));
                let anchor = CohortMember::live(
                    view_passes[vp_idx].v_g.clone(),
                    anchor_live,
                    format!("crop{ci}v{view}"),
                );
                let mut positives = vec![CohortMember::constant(
                    momentum_global[view_index(ci, 1 - view)].clone(),
                    format!("crop{ci}v{}m", 1 - view),
                )];
                for &cg in &cross_global_of_crop[ci] {
                    let live = live_routes.len();
                    live_routes.push(LiveRoute::CrossGlobal(cg));
                    positives.push(CohortMember::live(
                        cross_global[cg].v_g.clone(),
                        live,
                        format!("cross{cg}"),
                    ));
                }
                global_cohorts.push(build_global_cohorts(
                    cfg.strategy_global,
                    anchor,
                    positives,
                    &crop.footprint,
                    &snap_g,
                    cfg.sampling.o,
                )?);
            }
        }
    }

    if local_active {
        let strategy = local_strategy.expect("local_active implies a strategy");
        for (pi, pair) in batch.pairs.iter().enumerate() {
            for (own_ids, cross_ids) in &pair_view_embeds[pi] {
                let own = (
                    {
                        let id = own_ids[0];
                        let live = live_routes.len();
                        live_routes.push(LiveRoute::Local(id));
                        CohortMember::live(local_embeds[id].values.clone(), live, format!("own{id}"))
                    },
                    {
                        let id = own_ids[1];
                        let live = live_routes.len();
                        live_routes.push(LiveRoute::Local(id));
                        CohortMember::live(local_embeds[id].values.clone(), live, format!("own{id}"))
                    },
                );
                let cross = cross_ids
                    .iter()
                    .map(|&id| {
                        let live = live_routes.len();
                        live_routes.push(LiveRoute::Local(id));
                        CohortMember::live(local_embeds[id].values.clone(), live, format!("cross{id}"))
                    })
                    .collect();
                local_cohorts.push(build_local_cohorts(
                    strategy,
                    own,
                    cross,
                    &pair.overlap_footprint,
                    &snap_l,
                    cfg.sampling.o,
                )?);
            }
        }
    }

    // Gradient accumulators per live embedding.
    let mut live_grads: Vec<Vec<f64>> = Vec::with_capacity(live_routes.len());
    for route in &live_routes {
        let len = match route {
            LiveRoute::ViewGlobal(_) | LiveRoute::CrossGlobal(_) => cfg.net.global_embed,
            LiveRoute::Local(id) => local_embeds[*id].values.len(),
        };
        live_grads.push(vec![0.0; len]);
    }

    let mut loss_global = 0.0;
    let mut loss_local = 0.0;
    let mut stats_pos = 0.0;
    let mut stats_neg = 0.0;
    let mut stats_deb = 0.0;
    let n_cohorts = (global_cohorts.len() + local_cohorts.len()) as f64;

    let apply_cohorts = |cohorts: &[CohortPair],
                             weight: f64,
                             live_grads: &mut Vec<Vec<f64>>|
     -> Result<f64> {
        if cohorts.is_empty() {
            return Ok(0.0);
        }
        let scale = weight / cohorts.len() as f64;
        let mut total = 0.0;
        for cohort in cohorts {
            let pos = cohort.positive_slices();
            let neg = cohort.negative_slices();
            let r = con_loss(&pos, &neg, cfg.loss.tau, cfg.loss.con_normalization)?;
            total += r.loss;
            for (member, grad) in cohort.positives.iter().zip(&r.grads) {
                if let Some(live) = member.live_id {
                    for (acc, g) in live_grads[live].iter_mut().zip(grad) {
                        *acc += scale * g;
                    }
                }
            }
        }
        Ok(total / cohorts.len() as f64)
    };

    if !global_cohorts.is_empty() {
        loss_global = apply_cohorts(&global_cohorts, cfg.loss.lambda, &mut live_grads)?;
    }
    if !local_cohorts.is_empty() {
        loss_local = apply_cohorts(&local_cohorts, 1.0 - cfg.loss.lambda, &mut live_grads)?;
    }
    for cohort in global_cohorts.iter().chain(local_cohorts.iter()) {
        stats_pos += cohort.positives.len() as f64;
        stats_neg += cohort.negatives.len() as f64;
        stats_deb += cohort.debiased as f64;
    }
    if n_cohorts > 0.0 {
        stats_pos /= n_cohorts;
        stats_neg /= n_cohorts;
        stats_deb /= n_cohorts;
    }

    // ---- backward ----
    let mut grad = vec![0.0f64; net.param_count()];

    // Reconstruction loss and gradients (head params + into z_dec).
    let mut loss_recon = 0.0;
    if cfg.use_reconstruction {
        let n_views = view_passes.len() as f64;
        let rscale = cfg.loss.lambda_r / n_views;
        for vp in view_passes.iter_mut() {
            let out = vp.recon_out.clone().expect("reconstruction enabled");
            let r = recon_loss(&vp.input_target, &out)?;
            loss_recon += r.loss / n_views;
            let mut d = r.grad_output;
            for v in d.data.iter_mut() {
                *v *= rscale;
            }
            let gin = net.recon_backward(theta, &vp.z_dec, &out, &d, &mut grad);
            for (acc, g) in vp.d_zdec.data.iter_mut().zip(&gin.data) {
                *acc += g;
            }
        }
    }

    // Route cohort gradients into their passes.
    for (route, g) in live_routes.iter().zip(&live_grads) {
        match route {
            LiveRoute::ViewGlobal(vp) => {
                for (acc, gv) in view_passes[*vp].d_vg.iter_mut().zip(g) {
                    *acc += gv;
                }
            }
            LiveRoute::CrossGlobal(cg) => {
                for (acc, gv) in cross_global[*cg].d_vg.iter_mut().zip(g) {
                    *acc += gv;
                }
            }
            LiveRoute::Local(id) => {
                for (acc, gv) in local_embeds[*id].d_emb.iter_mut().zip(g) {
                    *acc += gv;
                }
            }
        }
    }

    // Local embeddings: back through the head into the owner's logits.
    for le in local_embeds.iter() {
        if le.d_emb.iter().all(|&g| g == 0.0) {
            continue;
        }
        let d_slice = net.hl_backward(theta, &le.hl_cache, &le.d_emb, &mut grad);
        if let Some(vp_idx) = le.owner_view {
            let vp = &mut view_passes[vp_idx];
            if vp.d_zprime.is_none() {
                let z = &vp.z_dec;
                vp.d_zprime = Some(Tensor4::zeros(z.c, z.d, z.h, z.w));
            }
            vp.d_zprime.as_mut().unwrap().scatter_add_spatial(&d_slice, le.window_lo);
        } else if let Some(cl_idx) = le.owner_cross {
            cross_local[cl_idx].d_zdec.scatter_add_spatial(&d_slice, le.window_lo);
        }
    }

    // View passes: map reversed-logit gradients back, then decode/encode.
    for (vp_idx, vp) in view_passes.iter_mut().enumerate() {
        let crop_idx = vp_idx / 2;
        let view = vp_idx % 2;
        if let Some(dzp) = vp.d_zprime.take() {
            let aug = batch.crops[crop_idx].views[view].spatial;
            let mapped = apply_spatial(&dzp, &aug)?;
            for (acc, g) in vp.d_zdec.data.iter_mut().zip(&mapped.data) {
                *acc += g;
            }
        }
        let mut d_zenc = if vp.d_zdec.data.iter().any(|&g| g != 0.0) {
            net.decoder_backward(theta, &vp.dec_cache, &vp.d_zdec, &mut grad)
        } else {
            Tensor4::zeros(vp.z_enc.c, vp.z_enc.d, vp.z_enc.h, vp.z_enc.w)
        };
        if vp.d_vg.iter().any(|&g| g != 0.0) {
            let extra = net.hg_backward(theta, &vp.hg_cache, &vp.d_vg, &mut grad);
            for (acc, g) in d_zenc.data.iter_mut().zip(&extra.data) {
                *acc += g;
            }
        }
        if d_zenc.data.iter().any(|&g| g != 0.0) {
            net.encoder_backward(theta, &vp.enc_cache, &d_zenc, &mut grad);
        }
    }

    for cg in cross_global.iter() {
        if cg.d_vg.iter().all(|&g| g == 0.0) {
            continue;
        }
        let d_zenc = net.hg_backward(theta, &cg.hg_cache, &cg.d_vg, &mut grad);
        net.encoder_backward(theta, &cg.enc_cache, &d_zenc, &mut grad);
    }

    for cl in cross_local.iter() {
        if cl.d_zdec.data.iter().all(|&g| g == 0.0) {
            continue;
        }
        let d_zenc = net.decoder_backward(theta, &cl.dec_cache, &cl.d_zdec, &mut grad);
        net.encoder_backward(theta, &cl.enc_cache, &d_zenc, &mut grad);
    }

    let total = total_loss(loss_global, loss_local, loss_recon, &cfg.loss).map_err(|e| {
        SpadeError::Numerical(format!("step {step}: {e}"))
    })?;
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(SpadeError::Numerical(format!("non-finite gradient at step {step}")));
    }

    // ---- optimizer: SGD with momentum and cosine-annealed rate ----
    let lr = cfg.learning_rate
        * 0.5
        * (1.0 + (std::f64::consts::PI * step as f64 / cfg.steps as f64).cos());
    for ((v, g), p) in state
        .velocity
        .iter_mut()
        .zip(&grad)
        .zip(state.params.theta.iter_mut())
    {
        *v = cfg.sgd_momentum * *v + g;
        *p -= lr * *v;
    }
    momentum_update(&state.params.theta, &mut state.params.epsilon, cfg.beta)?;

    // ---- enqueue momentum embeddings with footprints ----
    let mut enq_g = Vec::new();
    let mut enq_l = Vec::new();
    for (ci, crop) in batch.crops.iter().enumerate() {
        for view in 0..2 {
            let idx = view_index(ci, view);
            enq_g.push((
                momentum_global[idx].iter().map(|&x| x as f32).collect::<Vec<f32>>(),
                crop.footprint.clone(),
            ));
            enq_l.push((
                momentum_local[idx].iter().map(|&x| x as f32).collect::<Vec<f32>>(),
                crop.footprint.clone(),
            ));
        }
    }
    state.bank_global.enqueue(enq_g)?;
    state.bank_local.enqueue(enq_l)?;

    // Cheap alignment telemetry from this step's own embeddings: anchors
    // vs their cross-volume correspondents, and anchors vs distant (below
    // threshold) bank entries.
    let mut corr = 0.0;
    let mut corr_n = 0usize;
    for (ci, _) in batch.crops.iter().enumerate() {
        let anchor = &view_passes[view_index(ci, 0)].v_g;
        for &cg in &cross_global_of_crop[ci] {
            corr += dot(anchor, &cross_global[cg].v_g);
            corr_n += 1;
        }
    }
    let corr_cos = if corr_n > 0 { corr / corr_n as f64 } else { 0.0 };
    let mut noncorr = 0.0;
    let mut noncorr_n = 0usize;
    for (ci, crop) in batch.crops.iter().enumerate() {
        let anchor = &view_passes[view_index(ci, 0)].v_g;
        for entry in snap_g.entries.iter().take(32) {
            if entry.iou_with(&crop.footprint) == 0.0 {
                noncorr += entry
                    .embedding
                    .iter()
                    .zip(anchor)
                    .map(|(&e, &a)| e as f64 * a)
                    .sum::<f64>();
                noncorr_n += 1;
            }
        }
    }
    let noncorr_cos = if noncorr_n > 0 { noncorr / noncorr_n as f64 } else { 0.0 };

    state.step += 1;
    let record = StepRecord {
        step,
        loss_global,
        loss_local,
        loss_recon,
        loss_total: total,
        lr,
        mean_positives: stats_pos,
        mean_negatives: stats_neg,
        mean_debiased: stats_deb,
        bank_global: state.bank_global.len(),
        bank_local: state.bank_local.len(),
        corr_cos,
        noncorr_cos,
    };
    if !record.loss_total.is_finite() {
        return Err(SpadeError::Numerical(format!("non-finite total loss at step {step}")));
    }
    Ok(record)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub struct RunSummary {
    pub records: Vec<StepRecord>,
}

/// Full training run: writes `metrics.csv`, a config echo, and periodic
/// plus final checkpoints into `out_dir`.
pub fn run_train(cfg: &TrainConfig, corpus: &Corpus, out_dir: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("config.json"), serde_json::to_string_pretty(cfg)?)?;

    let mut state = TrainState::init(cfg)?;
    let metrics_path = out_dir.join("metrics.csv");
    let mut metrics = std::io::BufWriter::new(std::fs::File::create(&metrics_path)?);
    writeln!(metrics, "{METRICS_HEADER}")?;

    let mut records = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let record = train_step(&mut state, corpus, cfg)?;
        writeln!(metrics, "{}", record.csv_line())?;
        if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 && state.step < cfg.steps {
            crate::model::write_checkpoint(
                &out_dir.join(format!("ckpt_{:06}.bin", state.step)),
                &state.net,
                &state.params,
            )?;
        }
        records.push(record);
    }
    metrics.flush()?;
    crate::model::write_checkpoint(&out_dir.join("ckpt_final.bin"), &state.net, &state.params)?;
    state.bank_global.write(&out_dir.join("bank_global.bin"))?;
    state.bank_local.write(&out_dir.join("bank_local.bin"))?;
    Ok(RunSummary { records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_corpus, CorpusSpec, PhantomSpec};

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            steps: 4,
            bank_warmup: 4,
            bank_capacity_global: 64,
            bank_capacity_local: 64,
            sampling: SamplingConfig {
                crop_size: [8, 16, 16],
                scale_range: (0.8, 1.2),
                n_plus: 2,
                ..Default::default()
            },
            net: NetConfig {
                enc_channels: vec![4, 8],
                dec_channels: vec![4, 2],
                global_hidden: 32,
                global_embed: 16,
                local_hidden: 16,
                local_embed_channels: 8,
                local_embed_hw: 2,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    fn tiny_corpus(n: usize) -> Corpus {
        let spec = CorpusSpec {
            base: PhantomSpec {
                seed: 5,
                size: [32, 32, 32],
                num_blobs: 10,
                intensity_range: (800.0, 1600.0),
                id: "c".into(),
            },
            count: n,
            max_translation: 3.0,
            scale_range: (0.95, 1.05),
            noise_hu: 10.0,
            seed: 1,
        };
        let gen = generate_corpus(&spec).unwrap();
        let mut transforms = TransformSet::new();
        // Ground-truth warp: content of volume i at position p came from
        // base at T_gt^{-1} p, so volume -> template is T_gt^{-1}.
        for (v, t) in &gen {
            transforms.insert(v.id.clone(), t.invert().unwrap());
        }
        Corpus::prepare(gen.into_iter().map(|(v, _)| v).collect(), transforms).unwrap()
    }

    #[test]
    fn batches_are_deterministic_and_step_dependent() {
        let cfg = tiny_cfg();
        let corpus = tiny_corpus(4);
        let b1 = prepare_batch(&corpus, &cfg, 3).unwrap();
        let b2 = prepare_batch(&corpus, &cfg, 3).unwrap();
        assert_eq!(b1.crops.len(), b2.crops.len());
        for (a, b) in b1.crops.iter().zip(&b2.crops) {
            assert_eq!(a.patch, b.patch);
            assert_eq!(a.views[0].spatial, b.views[0].spatial);
        }
        let b3 = prepare_batch(&corpus, &cfg, 4).unwrap();
        let same = b1
            .crops
            .iter()
            .zip(&b3.crops)
            .all(|(a, b)| a.patch == b.patch);
        assert!(!same || b1.crops.is_empty());
    }

    #[test]
    fn train_steps_run_and_fill_banks() {
        let cfg = tiny_cfg();
        let corpus = tiny_corpus(4);
        let mut state = TrainState::init(&cfg).unwrap();
        let mut enqueued = 0;
        for _ in 0..3 {
            let rec = train_step(&mut state, &corpus, &cfg).unwrap();
            enqueued += 2 * cfg.sampling.p * 2;
            assert!(rec.loss_total.is_finite());
            assert_eq!(state.bank_global.len(), enqueued.min(cfg.bank_capacity_global));
            assert_eq!(state.bank_local.len(), enqueued.min(cfg.bank_capacity_local));
        }
    }

    #[test]
    fn momentum_follows_update_rule_exactly() {
        let cfg = tiny_cfg();
        let corpus = tiny_corpus(4);
        let mut state = TrainState::init(&cfg).unwrap();
        let eps0 = state.params.epsilon.clone();
        train_step(&mut state, &corpus, &cfg).unwrap();
        let theta1 = state.params.theta.clone();
        for i in 0..eps0.len() {
            let expected = cfg.beta * eps0[i] + (1.0 - cfg.beta) * theta1[i];
            assert!(
                (state.params.epsilon[i] - expected).abs() <= 1e-12,
                "momentum mismatch at {i}"
            );
        }
    }

    #[test]
    fn epsilon_untouched_outside_momentum_update() {
        // Checksum of epsilon before the step equals the value reconstructed
        // from the update rule, i.e. nothing else wrote to it.
        let cfg = tiny_cfg();
        let corpus = tiny_corpus(4);
        let mut state = TrainState::init(&cfg).unwrap();
        for _ in 0..2 {
            let eps_before = state.params.epsilon.clone();
            train_step(&mut state, &corpus, &cfg).unwrap();
            let theta_after = state.params.theta.clone();
            for i in 0..eps_before.len() {
                let expected = cfg.beta * eps_before[i] + (1.0 - cfg.beta) * theta_after[i];
                assert!((state.params.epsilon[i] - expected).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn identical_seeds_give_identical_metric_streams() {
        let cfg = tiny_cfg();
        let corpus = tiny_corpus(4);
        let mut s1 = TrainState::init(&cfg).unwrap();
        let mut s2 = TrainState::init(&cfg).unwrap();
        for _ in 0..3 {
            let r1 = train_step(&mut s1, &corpus, &cfg).unwrap();
            let r2 = train_step(&mut s2, &corpus, &cfg).unwrap();
            assert_eq!(r1.csv_line(), r2.csv_line());
        }
    }

    #[test]
    fn reconstruction_toggle_leaves_first_step_contrastive_unchanged() {
        let corpus = tiny_corpus(4);
        let mut cfg_on = tiny_cfg();
        cfg_on.bank_warmup = 0;
        let mut cfg_off = cfg_on.clone();
        cfg_off.use_reconstruction = false;
        let mut son = TrainState::init(&cfg_on).unwrap();
        let mut soff = TrainState::init(&cfg_off).unwrap();
        let r_on = train_step(&mut son, &corpus, &cfg_on).unwrap();
        let r_off = train_step(&mut soff, &corpus, &cfg_off).unwrap();
        assert_eq!(r_on.loss_global, r_off.loss_global);
        assert_eq!(r_on.loss_local, r_off.loss_local);
        assert_eq!(r_off.loss_recon, 0.0);
    }

    #[test]
    fn debias_telemetry_bounded_by_bank() {
        let cfg = tiny_cfg();
        let corpus = tiny_corpus(4);
        let mut state = TrainState::init(&cfg).unwrap();
        for _ in 0..4 {
            let rec = train_step(&mut state, &corpus, &cfg).unwrap();
            assert!(rec.mean_negatives <= rec.bank_global as f64 + 1e-9);
        }
    }

    #[test]
    fn prepare_corpus_on_shifted_copies_recovers_translations() {
        let base = crate::phantom::generate_phantom(&PhantomSpec {
            seed: 8,
            size: [40, 40, 40],
            num_blobs: 8,
            intensity_range: (700.0, 1500.0),
            id: "tpl".into(),
        })
        .unwrap();
        let shift = AffineTransform::translation([0.0, 3.0, -2.0]);
        let mut moved = crate::registration::warp(&base, &shift, base.dims).unwrap();
        moved.id = "moved".into();
        let volumes = vec![base.clone(), moved];
        let out = prepare_corpus(&volumes, "tpl", &RegistrationConfig::default()).unwrap();
        assert_eq!(out.len(), 2);
        let tpl = out.iter().find(|(id, _, _)| id == "tpl").unwrap();
        assert!(tpl.1.is_identity(0.0));
        assert_eq!(tpl.2, 1.0);
        let mv = out.iter().find(|(id, _, _)| id == "moved").unwrap();
        let expected = shift.invert().unwrap();
        for a in 0..3 {
            assert!((mv.1.translation[a] - expected.translation[a]).abs() <= 1.0);
        }
    }
}
