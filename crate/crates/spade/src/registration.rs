//! Affine registration of a moving volume to a template by gradient
//! descent on negative normalized cross-correlation.
//!
//! The recipe: crop the background by thresholding, downsample both
//! volumes, optimize the 12 affine parameters from identity, then fold the
//! crop offsets and downsampling back so the returned transform maps
//! full-resolution moving-space coordinates to full-resolution
//! template-space coordinates.

use serde::{Deserialize, Serialize};

use crate::affine::AffineTransform;
use crate::error::{Result, SpadeError};
use crate::volume::{crop_background, resample, sample_trilinear, sample_trilinear_grad, Volume};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegistrationConfig {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_min_iterations")]
    pub min_iterations: usize,
    #[serde(default = "default_max_iterations")]
    pub max_iterations: usize,
    #[serde(default = "default_downsample")]
    pub downsample_factor: f64,
    #[serde(default = "default_background_threshold")]
    pub background_threshold: f64,
    #[serde(default = "default_convergence_tol")]
    pub convergence_tol: f64,
}

fn default_lr() -> f64 {
    0.5
}
fn default_min_iterations() -> usize {
    50
}
fn default_max_iterations() -> usize {
    500
}
fn default_downsample() -> f64 {
    2.0
}
fn default_background_threshold() -> f64 {
    -350.0
}
fn default_convergence_tol() -> f64 {
    1e-5
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        RegistrationConfig {
            learning_rate: default_lr(),
            min_iterations: default_min_iterations(),
            max_iterations: default_max_iterations(),
            downsample_factor: default_downsample(),
            background_threshold: default_background_threshold(),
            convergence_tol: default_convergence_tol(),
        }
    }
}

impl RegistrationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_iterations > self.max_iterations {
            return Err(SpadeError::Parameter(format!(
                "min_iterations {} exceeds max_iterations {}",
                self.min_iterations, self.max_iterations
            )));
        }
        if !(self.learning_rate > 0.0) {
            return Err(SpadeError::Parameter(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if !(self.downsample_factor >= 1.0) {
            return Err(SpadeError::Parameter(format!(
                "downsample_factor must be >= 1, got {}",
                self.downsample_factor
            )));
        }
        Ok(())
    }
}

/// Resample `v` through an affine map: `out[p] = v(t⁻¹(p))`, edge-clamped.
pub fn warp(v: &Volume, t: &AffineTransform, out_dims: [usize; 3]) -> Result<Volume> {
    let inv = t.invert()?;
    let mut data = vec![0.0f32; out_dims[0] * out_dims[1] * out_dims[2]];
    let mut i = 0;
    for z in 0..out_dims[0] {
        for y in 0..out_dims[1] {
            for x in 0..out_dims[2] {
                let s = inv.apply([z as f64, y as f64, x as f64]);
                data[i] = sample_trilinear(&v.data, v.dims, s[0], s[1], s[2]) as f32;
                i += 1;
            }
        }
    }
    let out = Volume { id: v.id.clone(), dims: out_dims, spacing: v.spacing, data };
    out.assert_finite("warp")?;
    Ok(out)
}

fn mean_and_centered(data: &[f32]) -> (f64, Vec<f64>) {
    let n = data.len() as f64;
    let mean = data.iter().map(|&x| x as f64).sum::<f64>() / n;
    let centered = data.iter().map(|&x| x as f64 - mean).collect();
    (mean, centered)
}

/// Normalized cross-correlation of two identically shaped volumes, in
/// `[-1, 1]`. Invariant to affine intensity changes of either input.
pub fn ncc(a: &Volume, b: &Volume) -> Result<f64> {
    if a.dims != b.dims {
        return Err(SpadeError::Shape(format!("ncc dims differ: {:?} vs {:?}", a.dims, b.dims)));
    }
    let (_, ac) = mean_and_centered(&a.data);
    let (_, bc) = mean_and_centered(&b.data);
    let q: f64 = ac.iter().map(|x| x * x).sum();
    let r: f64 = bc.iter().map(|x| x * x).sum();
    if q <= 0.0 || r <= 0.0 {
        return Err(SpadeError::DegenerateInput("ncc requires nonzero variance in both volumes".into()));
    }
    let u: f64 = ac.iter().zip(&bc).map(|(x, y)| x * y).sum();
    Ok(u / (q * r).sqrt())
}

/// The 12 optimization parameters: row-major 3x3 matrix `B` then vector
/// `c`, describing the template-to-moving sampling map
/// `s(p) = c_m + B (p - c_t) + c` in downsampled voxel coordinates.
#[derive(Debug, Clone, Copy)]
pub struct SampleMapParams {
    pub values: [f64; 12],
}

impl SampleMapParams {
    pub fn identity() -> Self {
        SampleMapParams { values: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0] }
    }

    fn matrix(&self) -> [[f64; 3]; 3] {
        let v = &self.values;
        [[v[0], v[1], v[2]], [v[3], v[4], v[5]], [v[6], v[7], v[8]]]
    }

    fn offset(&self) -> [f64; 3] {
        [self.values[9], self.values[10], self.values[11]]
    }

    /// The map as an AffineTransform (template coords -> moving coords).
    pub fn to_transform(&self, c_t: [f64; 3], c_m: [f64; 3]) -> AffineTransform {
        let m = self.matrix();
        let c = self.offset();
        let mut t = [0.0; 3];
        for i in 0..3 {
            t[i] = c_m[i] + c[i] - (m[i][0] * c_t[0] + m[i][1] * c_t[1] + m[i][2] * c_t[2]);
        }
        AffineTransform { matrix: m, translation: t }
    }
}

fn grid_center(dims: [usize; 3]) -> [f64; 3] {
    [
        (dims[0] as f64 - 1.0) / 2.0,
        (dims[1] as f64 - 1.0) / 2.0,
        (dims[2] as f64 - 1.0) / 2.0,
    ]
}

/// Evaluate `-ncc(resample(moving, params), template)` and its analytic
/// gradient with respect to the 12 parameters.
pub fn neg_ncc_objective(
    moving: &Volume,
    template: &Volume,
    params: &SampleMapParams,
) -> Result<(f64, [f64; 12])> {
    let c_t = grid_center(template.dims);
    let c_m = grid_center(moving.dims);
    let m = params.matrix();
    let c = params.offset();

    let n = template.len();
    let mut warped = vec![0.0f64; n];
    let mut grads: Vec<[f64; 3]> = vec![[0.0; 3]; n];
    let mut rel: Vec<[f64; 3]> = vec![[0.0; 3]; n];

    let mut i = 0;
    for z in 0..template.dims[0] {
        for y in 0..template.dims[1] {
            for x in 0..template.dims[2] {
                let p = [z as f64 - c_t[0], y as f64 - c_t[1], x as f64 - c_t[2]];
                let s = [
                    c_m[0] + m[0][0] * p[0] + m[0][1] * p[1] + m[0][2] * p[2] + c[0],
                    c_m[1] + m[1][0] * p[0] + m[1][1] * p[1] + m[1][2] * p[2] + c[1],
                    c_m[2] + m[2][0] * p[0] + m[2][1] * p[1] + m[2][2] * p[2] + c[2],
                ];
                let (v, g) = sample_trilinear_grad(&moving.data, moving.dims, s[0], s[1], s[2]);
                warped[i] = v;
                grads[i] = g;
                rel[i] = p;
                i += 1;
            }
        }
    }

    // ncc = u / sqrt(q r) with a = warped - mean(warped), b fixed.
    let mean_w = warped.iter().sum::<f64>() / n as f64;
    let (_, bc) = mean_and_centered(&template.data);
    let mut u = 0.0;
    let mut q = 0.0;
    let mut r = 0.0;
    for i in 0..n {
        let a = warped[i] - mean_w;
        u += a * bc[i];
        q += a * a;
        r += bc[i] * bc[i];
    }
    if !(q > 0.0) || !(r > 0.0) {
        return Err(SpadeError::DegenerateInput(
            "warped volume or template has zero variance".into(),
        ));
    }
    let denom = (q * r).sqrt();
    let ncc_val = u / denom;
    if !ncc_val.is_finite() {
        return Err(SpadeError::Numerical("non-finite ncc in objective".into()));
    }

    // d ncc / d w_i = (b_i - (u/q) a_i) / sqrt(q r); mean-centering of a
    // contributes nothing because b is centered and sum(a) = 0.
    let mut grad = [0.0f64; 12];
    let uq = u / q;
    for i in 0..n {
        let a = warped[i] - mean_w;
        let dncc_dw = (bc[i] - uq * a) / denom;
        let g = grads[i];
        let p = rel[i];
        // d w_i / d B_{rs} = g_r * p_s ; d w_i / d c_r = g_r
        for rr in 0..3 {
            let coeff = dncc_dw * g[rr];
            grad[rr * 3] += coeff * p[0];
            grad[rr * 3 + 1] += coeff * p[1];
            grad[rr * 3 + 2] += coeff * p[2];
            grad[9 + rr] += coeff;
        }
    }
    // Objective is -ncc.
    for g in grad.iter_mut() {
        *g = -*g;
    }
    Ok((-ncc_val, grad))
}

fn variance(v: &Volume) -> f64 {
    let (_, c) = mean_and_centered(&v.data);
    c.iter().map(|x| x * x).sum()
}

/// Register `moving` onto `template`. Returns the transform in
/// full-resolution voxel coordinates of the original (uncropped) spaces and
/// the final NCC at the optimization resolution.
pub fn register(
    moving: &Volume,
    template: &Volume,
    cfg: &RegistrationConfig,
) -> Result<(AffineTransform, f64)> {
    cfg.validate()?;
    if variance(moving) <= 0.0 || variance(template) <= 0.0 {
        return Err(SpadeError::DegenerateInput(
            "registration requires nonconstant moving and template volumes".into(),
        ));
    }

    let (m_crop, m_off) = crop_background(moving, cfg.background_threshold);
    let (t_crop, t_off) = crop_background(template, cfg.background_threshold);
    let ds = cfg.downsample_factor;
    let f = 1.0 / ds;
    let m_ds = resample(&m_crop, [f, f, f])?;
    let t_ds = resample(&t_crop, [f, f, f])?;
    if variance(&m_ds) <= 0.0 || variance(&t_ds) <= 0.0 {
        return Err(SpadeError::DegenerateInput(
            "downsampled volume became constant; inputs too small or empty".into(),
        ));
    }

    let mut params = SampleMapParams::identity();
    let (f0, g0) = neg_ncc_objective(&m_ds, &t_ds, &params)
        .map_err(|e| annotate_iteration(e, 0))?;

    // Per-parameter step normalization from the first iteration's gradient,
    // floored so near-zero components cannot blow the step up.
    let gmax = g0.iter().fold(0.0f64, |acc, g| acc.max(g.abs())).max(1e-12);
    let mut norms = [0.0f64; 12];
    for (n, g) in norms.iter_mut().zip(g0.iter()) {
        *n = g.abs().max(1e-3 * gmax);
    }

    let mut best = params;
    let mut best_f = f0;
    let mut cur_f = f0;
    let mut cur_g = g0;
    let mut eta = cfg.learning_rate;
    let mut best_history: Vec<f64> = vec![-best_f];

    for it in 1..=cfg.max_iterations {
        let mut cand = params;
        for j in 0..12 {
            cand.values[j] -= eta * cur_g[j] / norms[j];
        }
        match neg_ncc_objective(&m_ds, &t_ds, &cand) {
            Ok((fc, gc)) => {
                if !fc.is_finite() {
                    return Err(SpadeError::Numerical(format!(
                        "non-finite registration loss at iteration {it}"
                    )));
                }
                if fc < cur_f {
                    params = cand;
                    cur_f = fc;
                    cur_g = gc;
                    eta = (eta * 1.1).min(cfg.learning_rate);
                    if fc < best_f {
                        best_f = fc;
                        best = params;
                    }
                } else {
                    // Reject the step and retry smaller from the best point.
                    params = best;
                    cur_f = best_f;
                    let (_, gb) = neg_ncc_objective(&m_ds, &t_ds, &params)
                        .map_err(|e| annotate_iteration(e, it))?;
                    cur_g = gb;
                    eta *= 0.5;
                }
            }
            Err(SpadeError::DegenerateInput(_)) => {
                // Candidate sampled a constant region; back off.
                params = best;
                cur_f = best_f;
                eta *= 0.5;
            }
            Err(e) => return Err(annotate_iteration(e, it)),
        }

        best_history.push(-best_f);
        if it >= cfg.min_iterations {
            let lookback = 10.min(best_history.len() - 1);
            let improvement = best_history[best_history.len() - 1]
                - best_history[best_history.len() - 1 - lookback];
            if improvement < cfg.convergence_tol {
                break;
            }
        }
        if eta < 1e-12 {
            break;
        }
    }

    // Fold crop offsets and downsampling back into full-resolution original
    // coordinates: x_orig --(-m_off)--> crop --(/ds)--> ds --(T_ds)-->
    // template_ds --(*ds)--> template_crop --(+t_off)--> template_orig.
    let t_ds_map = best
        .to_transform(grid_center(t_ds.dims), grid_center(m_ds.dims))
        .invert()?;
    let full = AffineTransform::translation([t_off[0] as f64, t_off[1] as f64, t_off[2] as f64])
        .compose(&AffineTransform::scaling([ds, ds, ds]))
        .compose(&t_ds_map)
        .compose(&AffineTransform::scaling([f, f, f]))
        .compose(&AffineTransform::translation([
            -(m_off[0] as f64),
            -(m_off[1] as f64),
            -(m_off[2] as f64),
        ]));
    Ok((full, -best_f))
}

fn annotate_iteration(e: SpadeError, it: usize) -> SpadeError {
    match e {
        SpadeError::Numerical(msg) => SpadeError::Numerical(format!("{msg} (iteration {it})")),
        other => other,
    }
}
