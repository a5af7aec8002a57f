//! The desk-scale networks: encoder `f`, decoder `g`, global and local
//! projection heads, reconstruction head, and the momentum parameter twin.
//!
//! Parameters live in one flat f64 vector per network. Every forward pass
//! returns the caches its hand-derived adjoint needs, and gradients
//! accumulate into a caller-owned flat buffer of the same layout.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::ops::Range;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{
    adaptive_avg_pool_backward, adaptive_avg_pool_forward, avg_pool2_backward, avg_pool2_forward,
    conv1x1_backward, conv1x1_forward, conv3_backward, conv3_forward, l2_normalize_backward,
    l2_normalize_forward, linear_backward, linear_forward, relu_backward, relu_forward,
    relu_vec_backward, relu_vec_forward, sigmoid_backward, sigmoid_forward, Tensor4,
};
use crate::error::{Result, SpadeError};
use crate::volume::Volume;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    #[serde(default = "default_enc_channels")]
    pub enc_channels: Vec<usize>,
    #[serde(default = "default_dec_channels")]
    pub dec_channels: Vec<usize>,
    #[serde(default = "default_global_hidden")]
    pub global_hidden: usize,
    #[serde(default = "default_global_embed")]
    pub global_embed: usize,
    #[serde(default = "default_local_hidden")]
    pub local_hidden: usize,
    #[serde(default = "default_local_embed_channels")]
    pub local_embed_channels: usize,
    #[serde(default = "default_local_embed_hw")]
    pub local_embed_hw: usize,
}

fn default_in_channels() -> usize {
    1
}
fn default_enc_channels() -> Vec<usize> {
    vec![8, 16]
}
fn default_dec_channels() -> Vec<usize> {
    vec![8, 4]
}
fn default_global_hidden() -> usize {
    256
}
fn default_global_embed() -> usize {
    128
}
fn default_local_hidden() -> usize {
    128
}
fn default_local_embed_channels() -> usize {
    64
}
fn default_local_embed_hw() -> usize {
    3
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            in_channels: default_in_channels(),
            enc_channels: default_enc_channels(),
            dec_channels: default_dec_channels(),
            global_hidden: default_global_hidden(),
            global_embed: default_global_embed(),
            local_hidden: default_local_hidden(),
            local_embed_channels: default_local_embed_channels(),
            local_embed_hw: default_local_embed_hw(),
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.enc_channels.is_empty() || self.dec_channels.len() != self.enc_channels.len() {
            return Err(SpadeError::Parameter(format!(
                "encoder ({}) and decoder ({}) must have the same nonzero stage count",
                self.enc_channels.len(),
                self.dec_channels.len()
            )));
        }
        for &c in self.enc_channels.iter().chain(self.dec_channels.iter()) {
            if c == 0 {
                return Err(SpadeError::Parameter("channel counts must be >= 1".into()));
            }
        }
        if self.global_embed == 0 || self.local_embed_channels == 0 || self.local_embed_hw == 0 {
            return Err(SpadeError::Parameter("embedding sizes must be >= 1".into()));
        }
        Ok(())
    }

    pub fn stages(&self) -> usize {
        self.enc_channels.len()
    }

    pub fn local_embed_len(&self) -> usize {
        self.local_embed_channels * self.local_embed_hw * self.local_embed_hw
    }

    /// Smallest multiple-of-`2^stages` constraint the input dims must obey.
    pub fn dim_multiple(&self) -> usize {
        1 << self.stages()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegmentInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone)]
pub struct Layout {
    pub enc: Vec<(Range<usize>, Range<usize>)>,
    pub dec: Vec<(Range<usize>, Range<usize>)>,
    pub hg1: (Range<usize>, Range<usize>),
    pub hg2: (Range<usize>, Range<usize>),
    pub hl1: (Range<usize>, Range<usize>),
    pub hl2: (Range<usize>, Range<usize>),
    pub recon: (Range<usize>, Range<usize>),
    pub total: usize,
    pub segments: Vec<SegmentInfo>,
}

fn build_layout(cfg: &NetConfig) -> Layout {
    let mut segments = Vec::new();
    let mut cursor = 0usize;
    let mut seg = |name: String, shape: Vec<usize>, cursor: &mut usize| -> Range<usize> {
        let len: usize = shape.iter().product();
        let r = *cursor..*cursor + len;
        segments.push(SegmentInfo { name, shape, offset: r.start, len });
        *cursor += len;
        r
    };

    let mut enc = Vec::new();
    let mut prev = cfg.in_channels;
    for (i, &c) in cfg.enc_channels.iter().enumerate() {
        let w = seg(format!("enc{i}.w"), vec![c, prev, 3, 3, 3], &mut cursor);
        let b = seg(format!("enc{i}.b"), vec![c], &mut cursor);
        enc.push((w, b));
        prev = c;
    }
    let enc_out = prev;

    let mut dec = Vec::new();
    for (i, &c) in cfg.dec_channels.iter().enumerate() {
        let w = seg(format!("dec{i}.w"), vec![c, prev, 3, 3, 3], &mut cursor);
        let b = seg(format!("dec{i}.b"), vec![c], &mut cursor);
        dec.push((w, b));
        prev = c;
    }
    let dec_out = prev;

    let hg1 = (
        seg("hg.lin1.w".into(), vec![cfg.global_hidden, enc_out], &mut cursor),
        seg("hg.lin1.b".into(), vec![cfg.global_hidden], &mut cursor),
    );
    let hg2 = (
        seg("hg.lin2.w".into(), vec![cfg.global_embed, cfg.global_hidden], &mut cursor),
        seg("hg.lin2.b".into(), vec![cfg.global_embed], &mut cursor),
    );
    let hl1 = (
        seg("hl.conv1.w".into(), vec![cfg.local_hidden, dec_out], &mut cursor),
        seg("hl.conv1.b".into(), vec![cfg.local_hidden], &mut cursor),
    );
    let hl2 = (
        seg("hl.conv2.w".into(), vec![cfg.local_embed_channels, cfg.local_hidden], &mut cursor),
        seg("hl.conv2.b".into(), vec![cfg.local_embed_channels], &mut cursor),
    );
    let recon = (
        seg("recon.w".into(), vec![1, dec_out], &mut cursor),
        seg("recon.b".into(), vec![1], &mut cursor),
    );

    Layout { enc, dec, hg1, hg2, hl1, hl2, recon, total: cursor, segments }
}

/// The network definition: configuration plus parameter layout.
#[derive(Debug, Clone)]
pub struct SpadeNet {
    pub cfg: NetConfig,
    pub layout: Layout,
}

impl SpadeNet {
    pub fn new(cfg: NetConfig) -> Result<Self> {
        cfg.validate()?;
        let layout = build_layout(&cfg);
        Ok(SpadeNet { cfg, layout })
    }

    pub fn param_count(&self) -> usize {
        self.layout.total
    }

    /// Fan-in scaled uniform init; biases start at zero.
    pub fn init_params(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0f64; self.layout.total];
        for seg in &self.layout.segments {
            if seg.name.ends_with(".b") {
                continue;
            }
            let fan_in: usize = seg.shape[1..].iter().product();
            let bound = (1.0 / fan_in.max(1) as f64).sqrt();
            for v in params[seg.offset..seg.offset + seg.len].iter_mut() {
                *v = rng.gen_range(-bound..bound);
            }
        }
        params
    }

    fn check_input(&self, input: &Tensor4) -> Result<()> {
        if input.c != self.cfg.in_channels {
            return Err(SpadeError::Shape(format!(
                "expected {} input channels, got {}",
                self.cfg.in_channels, input.c
            )));
        }
        let m = self.cfg.dim_multiple();
        for (name, dim) in [("d", input.d), ("h", input.h), ("w", input.w)] {
            if dim == 0 || dim % m != 0 {
                return Err(SpadeError::Shape(format!(
                    "input {name} = {dim} must be a positive multiple of {m}"
                )));
            }
        }
        Ok(())
    }

    fn check_params(&self, params: &[f64]) -> Result<()> {
        if params.len() != self.layout.total {
            return Err(SpadeError::Shape(format!(
                "parameter vector length {} does not match layout {}",
                params.len(),
                self.layout.total
            )));
        }
        Ok(())
    }

    // -- encoder ---------------------------------------------------------

    pub fn encoder_forward(&self, params: &[f64], input: &Tensor4) -> Result<(Tensor4, EncCache)> {
        self.check_params(params)?;
        self.check_input(input)?;
        let mut cache = EncCache { stage_inputs: Vec::new(), post_relu: Vec::new() };
        let mut x = input.clone();
        for (i, (wr, br)) in self.layout.enc.iter().enumerate() {
            let c = conv3_forward(&x, &params[wr.clone()], &params[br.clone()], self.cfg.enc_channels[i]);
            let r = relu_forward(&c);
            let p = avg_pool2_forward(&r)?;
            cache.stage_inputs.push(x);
            cache.post_relu.push(r);
            x = p;
        }
        Ok((x, cache))
    }

    pub fn encoder_backward(
        &self,
        params: &[f64],
        cache: &EncCache,
        grad_out: &Tensor4,
        grad_params: &mut [f64],
    ) {
        let mut g = grad_out.clone();
        for i in (0..self.layout.enc.len()).rev() {
            let post = &cache.post_relu[i];
            let g_unpooled = avg_pool2_backward(&g, (post.d, post.h, post.w));
            let g_relu = relu_backward(post, &g_unpooled);
            let (wr, br) = &self.layout.enc[i];
            let (gin, gw, gb) = conv3_backward(
                &cache.stage_inputs[i],
                &params[wr.clone()],
                self.cfg.enc_channels[i],
                &g_relu,
            );
            accumulate(&mut grad_params[wr.clone()], &gw);
            accumulate(&mut grad_params[br.clone()], &gb);
            g = gin;
        }
    }

    // -- decoder ---------------------------------------------------------

    pub fn decoder_forward(&self, params: &[f64], z_enc: &Tensor4) -> Result<(Tensor4, DecCache)> {
        self.check_params(params)?;
        let n = self.layout.dec.len();
        let mut cache = DecCache { upsampled: Vec::new(), post_act: Vec::new() };
        let mut x = z_enc.clone();
        for (i, (wr, br)) in self.layout.dec.iter().enumerate() {
            let u = super::tensor::upsample2_forward(&x);
            let c = conv3_forward(&u, &params[wr.clone()], &params[br.clone()], self.cfg.dec_channels[i]);
            // Hidden stages activate; the final stage emits raw logits.
            let out = if i + 1 < n { relu_forward(&c) } else { c };
            cache.upsampled.push(u);
            cache.post_act.push(if i + 1 < n { Some(out.clone()) } else { None });
            x = out;
        }
        Ok((x, cache))
    }

    pub fn decoder_backward(
        &self,
        params: &[f64],
        cache: &DecCache,
        grad_out: &Tensor4,
        grad_params: &mut [f64],
    ) -> Tensor4 {
        let mut g = grad_out.clone();
        for i in (0..self.layout.dec.len()).rev() {
            if let Some(post) = &cache.post_act[i] {
                g = relu_backward(post, &g);
            }
            let (wr, br) = &self.layout.dec[i];
            let (gin, gw, gb) = conv3_backward(
                &cache.upsampled[i],
                &params[wr.clone()],
                self.cfg.dec_channels[i],
                &g,
            );
            accumulate(&mut grad_params[wr.clone()], &gw);
            accumulate(&mut grad_params[br.clone()], &gb);
            g = super::tensor::upsample2_backward(&gin);
        }
        g
    }

    // -- global head -----------------------------------------------------

    pub fn hg_forward(&self, params: &[f64], z_enc: &Tensor4) -> Result<(Vec<f64>, HgCache)> {
        let pooled_t = adaptive_avg_pool_forward(z_enc, [1, 1, 1]);
        let pooled = pooled_t.data;
        let (w1, b1) = &self.layout.hg1;
        let (w2, b2) = &self.layout.hg2;
        let h = linear_forward(&pooled, &params[w1.clone()], &params[b1.clone()], self.cfg.global_hidden);
        let hr = relu_vec_forward(&h);
        let e = linear_forward(&hr, &params[w2.clone()], &params[b2.clone()], self.cfg.global_embed);
        let (v, norm) = l2_normalize_forward(&e)?;
        Ok((
            v.clone(),
            HgCache { pooled, post_relu: hr, normalized: v, norm, z_dims: (z_enc.c, z_enc.d, z_enc.h, z_enc.w) },
        ))
    }

    pub fn hg_backward(
        &self,
        params: &[f64],
        cache: &HgCache,
        grad_emb: &[f64],
        grad_params: &mut [f64],
    ) -> Tensor4 {
        let g_pre = l2_normalize_backward(&cache.normalized, cache.norm, grad_emb);
        let (w2r, b2r) = &self.layout.hg2;
        let (gx2, gw2, gb2) =
            linear_backward(&cache.post_relu, &params[w2r.clone()], self.cfg.global_embed, &g_pre);
        accumulate(&mut grad_params[w2r.clone()], &gw2);
        accumulate(&mut grad_params[b2r.clone()], &gb2);
        let g_h = relu_vec_backward(&cache.post_relu, &gx2);
        let (w1r, b1r) = &self.layout.hg1;
        let (gx1, gw1, gb1) =
            linear_backward(&cache.pooled, &params[w1r.clone()], self.cfg.global_hidden, &g_h);
        accumulate(&mut grad_params[w1r.clone()], &gw1);
        accumulate(&mut grad_params[b1r.clone()], &gb1);
        let (c, d, h, w) = cache.z_dims;
        let gt = Tensor4 { c, d: 1, h: 1, w: 1, data: gx1 };
        adaptive_avg_pool_backward(&gt, (d, h, w))
    }

    // -- local head ------------------------------------------------------

    /// Project decoder logits (or any spatial slice of them) to the local
    /// embedding: pool to `1 x hw x hw`, two pointwise convolutions, then
    /// flatten-normalize. All channel mixing is per-location.
    pub fn hl_forward(&self, params: &[f64], z: &Tensor4) -> Result<(Vec<f64>, HlCache)> {
        let hw = self.cfg.local_embed_hw;
        let pooled = adaptive_avg_pool_forward(z, [1, hw, hw]);
        let (w1, b1) = &self.layout.hl1;
        let (w2, b2) = &self.layout.hl2;
        let c1 = conv1x1_forward(&pooled, &params[w1.clone()], &params[b1.clone()], self.cfg.local_hidden);
        let r1 = relu_forward(&c1);
        let c2 = conv1x1_forward(&r1, &params[w2.clone()], &params[b2.clone()], self.cfg.local_embed_channels);
        let (v, norm) = l2_normalize_forward(&c2.data)?;
        Ok((
            v.clone(),
            HlCache {
                pooled,
                post_relu: r1,
                normalized: v,
                norm,
                z_dims: (z.c, z.d, z.h, z.w),
            },
        ))
    }

    pub fn hl_backward(
        &self,
        params: &[f64],
        cache: &HlCache,
        grad_emb: &[f64],
        grad_params: &mut [f64],
    ) -> Tensor4 {
        let hw = self.cfg.local_embed_hw;
        let g_pre = l2_normalize_backward(&cache.normalized, cache.norm, grad_emb);
        let g_c2 = Tensor4 { c: self.cfg.local_embed_channels, d: 1, h: hw, w: hw, data: g_pre };
        let (w2r, b2r) = &self.layout.hl2;
        let (g_r1, gw2, gb2) = conv1x1_backward(
            &cache.post_relu,
            &params[w2r.clone()],
            self.cfg.local_embed_channels,
            &g_c2,
        );
        accumulate(&mut grad_params[w2r.clone()], &gw2);
        accumulate(&mut grad_params[b2r.clone()], &gb2);
        let g_c1 = relu_backward(&cache.post_relu, &g_r1);
        let (w1r, b1r) = &self.layout.hl1;
        let (g_pooled, gw1, gb1) =
            conv1x1_backward(&cache.pooled, &params[w1r.clone()], self.cfg.local_hidden, &g_c1);
        accumulate(&mut grad_params[w1r.clone()], &gw1);
        accumulate(&mut grad_params[b1r.clone()], &gb1);
        let (_, d, h, w) = cache.z_dims;
        adaptive_avg_pool_backward(&g_pooled, (d, h, w))
    }

    // -- reconstruction head ----------------------------------------------

    pub fn recon_forward(&self, params: &[f64], z_dec: &Tensor4) -> Result<(Tensor4, Tensor4)> {
        let (wr, br) = &self.layout.recon;
        let c = conv1x1_forward(z_dec, &params[wr.clone()], &params[br.clone()], 1);
        let s = sigmoid_forward(&c);
        s.assert_finite("reconstruction head")?;
        Ok((s.clone(), s))
    }

    pub fn recon_backward(
        &self,
        params: &[f64],
        z_dec: &Tensor4,
        post_sigmoid: &Tensor4,
        grad_out: &Tensor4,
        grad_params: &mut [f64],
    ) -> Tensor4 {
        let g_pre = sigmoid_backward(post_sigmoid, grad_out);
        let (wr, br) = &self.layout.recon;
        let (gin, gw, gb) = conv1x1_backward(z_dec, &params[wr.clone()], 1, &g_pre);
        accumulate(&mut grad_params[wr.clone()], &gw);
        accumulate(&mut grad_params[br.clone()], &gb);
        gin
    }

    // -- whole-path wrappers ----------------------------------------------

    /// Encoder plus global head: the unit global embedding of a patch.
    pub fn forward_global(&self, params: &[f64], patch: &Volume) -> Result<(Vec<f64>, GlobalPass)> {
        let input = Tensor4::from_volume(patch);
        let (z_enc, enc_cache) = self.encoder_forward(params, &input)?;
        let (v, hg_cache) = self.hg_forward(params, &z_enc)?;
        Ok((v, GlobalPass { enc_cache, hg_cache }))
    }

    pub fn backward_global(
        &self,
        params: &[f64],
        pass: &GlobalPass,
        grad_emb: &[f64],
        grad_params: &mut [f64],
    ) {
        let g_enc = self.hg_backward(params, &pass.hg_cache, grad_emb, grad_params);
        self.encoder_backward(params, &pass.enc_cache, &g_enc, grad_params);
    }

    /// Full encoder-decoder path plus the local head on the complete
    /// logits: returns `(Z, local embedding)`.
    pub fn forward_local(&self, params: &[f64], patch: &Volume) -> Result<(Tensor4, Vec<f64>)> {
        let input = Tensor4::from_volume(patch);
        let (z_enc, _) = self.encoder_forward(params, &input)?;
        let (z_dec, _) = self.decoder_forward(params, &z_enc)?;
        let (v, _) = self.hl_forward(params, &z_dec)?;
        Ok((z_dec, v))
    }
}

fn accumulate(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[derive(Debug, Clone)]
pub struct EncCache {
    pub stage_inputs: Vec<Tensor4>,
    pub post_relu: Vec<Tensor4>,
}

#[derive(Debug, Clone)]
pub struct DecCache {
    pub upsampled: Vec<Tensor4>,
    pub post_act: Vec<Option<Tensor4>>,
}

#[derive(Debug, Clone)]
pub struct HgCache {
    pub pooled: Vec<f64>,
    pub post_relu: Vec<f64>,
    pub normalized: Vec<f64>,
    pub norm: f64,
    pub z_dims: (usize, usize, usize, usize),
}

#[derive(Debug, Clone)]
pub struct HlCache {
    pub pooled: Tensor4,
    pub post_relu: Tensor4,
    pub normalized: Vec<f64>,
    pub norm: f64,
    pub z_dims: (usize, usize, usize, usize),
}

#[derive(Debug, Clone)]
pub struct GlobalPass {
    pub enc_cache: EncCache,
    pub hg_cache: HgCache,
}

/// Regular and momentum parameter vectors. The momentum vector changes
/// only through [`momentum_update`].
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub theta: Vec<f64>,
    pub epsilon: Vec<f64>,
}

impl ModelParams {
    pub fn init(net: &SpadeNet, seed: u64) -> Self {
        let theta = net.init_params(seed);
        let epsilon = theta.clone();
        ModelParams { theta, epsilon }
    }
}

/// `epsilon <- beta * epsilon + (1 - beta) * theta`, elementwise.
pub fn momentum_update(theta: &[f64], epsilon: &mut [f64], beta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(SpadeError::Parameter(format!("beta must be in [0, 1], got {beta}")));
    }
    if theta.len() != epsilon.len() {
        return Err(SpadeError::Shape(format!(
            "theta ({}) and epsilon ({}) differ in length",
            theta.len(),
            epsilon.len()
        )));
    }
    for (e, t) in epsilon.iter_mut().zip(theta) {
        *e = beta * *e + (1.0 - beta) * t;
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    net: NetConfig,
    param_count: usize,
    segments: Vec<SegmentInfo>,
}

/// Checkpoint layout: one JSON header line (layer shapes and counts), then
/// theta and epsilon as little-endian f32 flat vectors.
pub fn write_checkpoint(path: &Path, net: &SpadeNet, params: &ModelParams) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    let header = CheckpointHeader {
        net: net.cfg.clone(),
        param_count: net.param_count(),
        segments: net.layout.segments.clone(),
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for vec in [&params.theta, &params.epsilon] {
        for &v in vec.iter() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<(SpadeNet, ModelParams)> {
    let file = std::fs::File::open(path)?;
    let mut r = BufReader::new(file);
    let mut line = String::new();
    r.read_line(&mut line)?;
    let header: CheckpointHeader = serde_json::from_str(line.trim_end())?;
    let net = SpadeNet::new(header.net)?;
    if net.param_count() != header.param_count {
        return Err(SpadeError::Format(format!(
            "checkpoint parameter count {} does not match layout {}",
            header.param_count,
            net.param_count()
        )));
    }
    let mut read_vec = |n: usize| -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(n);
        let mut buf = [0u8; 4];
        for _ in 0..n {
            r.read_exact(&mut buf)?;
            out.push(f32::from_le_bytes(buf) as f64);
        }
        Ok(out)
    };
    let theta = read_vec(header.param_count)?;
    let epsilon = read_vec(header.param_count)?;
    Ok((net, ModelParams { theta, epsilon }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_net() -> SpadeNet {
        SpadeNet::new(NetConfig {
            in_channels: 1,
            enc_channels: vec![2, 3],
            dec_channels: vec![2, 2],
            global_hidden: 8,
            global_embed: 8,
            local_hidden: 6,
            local_embed_channels: 4,
            local_embed_hw: 2,
        })
        .unwrap()
    }

    fn rand_patch(seed: u64, dims: [usize; 3]) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = Volume::filled("p", dims, [1.0; 3], 0.0);
        for x in v.data.iter_mut() {
            *x = rng.gen_range(0.0f32..1.0);
        }
        v
    }

    #[test]
    fn global_embedding_is_unit_norm_with_configured_length() {
        let net = SpadeNet::new(NetConfig::default()).unwrap();
        let params = net.init_params(1);
        let patch = rand_patch(2, [8, 16, 16]);
        let (v, _) = net.forward_global(&params, &patch).unwrap();
        assert_eq!(v.len(), 128);
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
    }

    #[test]
    fn local_embedding_has_configured_shape_and_norm() {
        let net = SpadeNet::new(NetConfig::default()).unwrap();
        let params = net.init_params(3);
        let patch = rand_patch(4, [8, 16, 16]);
        let (z, v) = net.forward_local(&params, &patch).unwrap();
        assert_eq!((z.d, z.h, z.w), (8, 16, 16));
        assert_eq!(v.len(), 64 * 3 * 3);
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
    }

    #[test]
    fn zero_projection_raises_degenerate_embedding() {
        let net = tiny_net();
        let mut params = net.init_params(5);
        // Zero the final global projection and its bias.
        let (w2, b2) = net.layout.hg2.clone();
        for v in params[w2].iter_mut() {
            *v = 0.0;
        }
        for v in params[b2].iter_mut() {
            *v = 0.0;
        }
        let patch = rand_patch(6, [4, 8, 8]);
        assert!(matches!(
            net.forward_global(&params, &patch),
            Err(SpadeError::DegenerateInput(_))
        ));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let net = tiny_net();
        let params = net.init_params(7);
        let patch = rand_patch(8, [5, 8, 8]); // 5 not divisible by 4
        assert!(matches!(net.forward_global(&params, &patch), Err(SpadeError::Shape(_))));
    }

    #[test]
    fn momentum_update_endpoints_and_blend() {
        let theta = vec![0.0, 2.0];
        let mut eps = vec![1.0, 4.0];
        momentum_update(&theta, &mut eps, 1.0).unwrap();
        assert_eq!(eps, vec![1.0, 4.0]);
        momentum_update(&theta, &mut eps, 0.0).unwrap();
        assert_eq!(eps, vec![0.0, 2.0]);
        let mut eps = vec![1.0];
        momentum_update(&[0.0], &mut eps, 0.99).unwrap();
        // Independently computed: 0.99 * 1.0 + 0.01 * 0.0 = 0.99.
        assert!((eps[0] - 0.99).abs() < 1e-15);
        assert!(matches!(momentum_update(&[0.0], &mut vec![0.0, 0.0], 0.5), Err(SpadeError::Shape(_))));
        assert!(matches!(momentum_update(&[0.0], &mut vec![0.0], 1.5), Err(SpadeError::Parameter(_))));
    }

    #[test]
    fn constant_patch_stays_constant_through_pointwise_network() {
        use super::super::tensor::{avg_pool2_forward, conv1x1_forward, relu_forward};
        let input = Tensor4 { c: 1, d: 4, h: 4, w: 4, data: vec![0.4; 64] };
        let c1 = conv1x1_forward(&input, &[0.7, -1.3], &[0.1, 0.2], 2);
        let r = relu_forward(&c1);
        let p = avg_pool2_forward(&r).unwrap();
        let z = conv1x1_forward(&p, &[0.5, 0.5, -0.25, 1.0], &[0.0, -0.1], 2);
        for c in 0..z.c {
            let n = z.spatial_len();
            let first = z.data[c * n];
            assert!(z.data[c * n..(c + 1) * n].iter().all(|&v| v == first));
        }
    }

    #[test]
    fn checkpoint_round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        let net = tiny_net();
        let mut params = ModelParams::init(&net, 17);
        // Make epsilon differ from theta.
        momentum_update(&vec![0.25; net.param_count()], &mut params.epsilon, 0.5).unwrap();
        write_checkpoint(&path, &net, &params).unwrap();
        let (net2, params2) = read_checkpoint(&path).unwrap();
        assert_eq!(net2.cfg, net.cfg);
        assert_eq!(params2.theta.len(), params.theta.len());
        // f32 storage: values agree after the same rounding.
        for (a, b) in params.theta.iter().zip(&params2.theta) {
            assert_eq!(*a as f32, *b as f32);
        }
        let path2 = dir.path().join("ckpt2.bin");
        write_checkpoint(&path2, &net2, &params2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    /// Gradient of a random linear probe of the global embedding against
    /// central finite differences, for every parameter.
    #[test]
    fn global_path_gradients_match_fd() {
        let net = tiny_net();
        let params = net.init_params(21);
        let patch = rand_patch(22, [4, 8, 8]);
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let probe: Vec<f64> = (0..net.cfg.global_embed).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let loss = |p: &[f64]| -> f64 {
            let (v, _) = net.forward_global(p, &patch).unwrap();
            v.iter().zip(&probe).map(|(a, b)| a * b).sum()
        };
        let (_, pass) = net.forward_global(&params, &patch).unwrap();
        let mut grad = vec![0.0; net.param_count()];
        net.backward_global(&params, &pass, &probe, &mut grad);

        let mut p = params.clone();
        let h = 1e-5;
        let mut checked = 0;
        for j in 0..p.len() {
            let orig = p[j];
            p[j] = orig + h;
            let fp = loss(&p);
            p[j] = orig - h;
            let fm = loss(&p);
            p[j] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let denom = grad[j].abs().max(fd.abs()).max(1e-6);
            let rel = (grad[j] - fd).abs() / denom;
            assert!(rel <= 1e-4, "param {j}: analytic {} vs fd {fd} (rel {rel:e})", grad[j]);
            checked += 1;
        }
        assert_eq!(checked, net.param_count());
    }
}
