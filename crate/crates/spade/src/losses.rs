//! The four training losses with analytic gradients: the softmax-style
//! contrastive loss over an anchor/positive pair, the symmetric version
//! over a whole positive cohort, voxelwise reconstruction, and the
//! weighted total.
//!
//! Bank negatives are gradient constants; positives receive gradients.
//! All exponentials are evaluated with max-subtraction.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SpadeError};
use crate::model::Tensor4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConNormalization {
    /// Divide the pair sum by the number of positives (the printed form).
    PositiveCount,
    /// Divide by the number of unordered pairs instead.
    PairCount,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossConfig {
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_lambda_r")]
    pub lambda_r: f64,
    #[serde(default = "default_con_normalization")]
    pub con_normalization: ConNormalization,
}

fn default_tau() -> f64 {
    0.2
}
fn default_lambda() -> f64 {
    0.5
}
fn default_lambda_r() -> f64 {
    10.0
}
fn default_con_normalization() -> ConNormalization {
    ConNormalization::PositiveCount
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau: default_tau(),
            lambda: default_lambda(),
            lambda_r: default_lambda_r(),
            con_normalization: default_con_normalization(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(SpadeError::Parameter(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(SpadeError::Parameter(format!("lambda must be in [0, 1], got {}", self.lambda)));
        }
        if !(self.lambda_r >= 0.0) {
            return Err(SpadeError::Parameter(format!("lambda_r must be >= 0, got {}", self.lambda_r)));
        }
        Ok(())
    }
}

fn dot_ff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn dot_fc(a: &[f64], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, &y)| x * y as f64).sum()
}

fn check_same_kind(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(SpadeError::Shape(format!(
            "{what}: embedding lengths differ ({a} vs {b}); global vectors and local tensors cannot mix"
        )));
    }
    Ok(())
}

/// Loss and gradient over raw similarity logits: `-log(exp(sp/tau) /
/// (exp(sp/tau) + sum_i exp(sn_i/tau)))`, computed with max-subtraction so
/// a common offset added to every similarity cancels exactly.
///
/// Returns `(loss, d/d sim_pos, d/d sim_negs)`.
pub fn nce_from_similarities(sim_pos: f64, sim_negs: &[f64], tau: f64) -> (f64, f64, Vec<f64>) {
    if sim_negs.is_empty() {
        return (0.0, 0.0, Vec::new());
    }
    let lp = sim_pos / tau;
    let m = sim_negs.iter().fold(lp, |acc, &s| acc.max(s / tau));
    let ep = (lp - m).exp();
    let mut total = ep;
    let mut ens = Vec::with_capacity(sim_negs.len());
    for &s in sim_negs {
        let e = (s / tau - m).exp();
        ens.push(e);
        total += e;
    }
    let loss = -(ep / total).ln();
    let softmax_p = ep / total;
    let d_pos = (softmax_p - 1.0) / tau;
    let d_negs = ens.iter().map(|e| (e / total) / tau).collect();
    (loss, d_pos, d_negs)
}

#[derive(Debug, Clone)]
pub struct NceResult {
    pub loss: f64,
    pub grad_v: Vec<f64>,
    pub grad_v_plus: Vec<f64>,
}

/// Contrastive loss of one anchor/positive pair against a negative cohort.
/// Negatives are constants; gradients flow to `v` and `v_plus` only.
pub fn nce_loss(v: &[f64], v_plus: &[f64], negatives: &[&[f32]], tau: f64) -> Result<NceResult> {
    if !(tau > 0.0) {
        return Err(SpadeError::Parameter(format!("tau must be > 0, got {tau}")));
    }
    check_same_kind(v.len(), v_plus.len(), "nce_loss")?;
    for n in negatives {
        check_same_kind(v.len(), n.len(), "nce_loss negatives")?;
    }
    let sim_pos = dot_ff(v, v_plus);
    let sims: Vec<f64> = negatives.iter().map(|n| dot_fc(v, n)).collect();
    let (loss, d_pos, d_negs) = nce_from_similarities(sim_pos, &sims, tau);
    let mut grad_v = vec![0.0; v.len()];
    for (gv, pv) in grad_v.iter_mut().zip(v_plus) {
        *gv = d_pos * pv;
    }
    for (dn, n) in d_negs.iter().zip(negatives) {
        for (gv, &nv) in grad_v.iter_mut().zip(*n) {
            *gv += dn * nv as f64;
        }
    }
    let grad_v_plus = v.iter().map(|&x| d_pos * x).collect();
    if !loss.is_finite() {
        return Err(SpadeError::Numerical("non-finite nce loss".into()));
    }
    Ok(NceResult { loss, grad_v, grad_v_plus })
}

#[derive(Debug, Clone)]
pub struct ConResult {
    pub loss: f64,
    /// One gradient per positive, aligned with the input order.
    pub grads: Vec<Vec<f64>>,
}

/// Symmetric contrastive loss over every unordered pair of distinct
/// positives, each pair contributing both directions, against a shared
/// negative cohort.
pub fn con_loss(
    positives: &[&[f64]],
    negatives: &[&[f32]],
    tau: f64,
    normalization: ConNormalization,
) -> Result<ConResult> {
    if !(tau > 0.0) {
        return Err(SpadeError::Parameter(format!("tau must be > 0, got {tau}")));
    }
    let np = positives.len();
    if np < 2 {
        return Err(SpadeError::Cohort(format!(
            "con_loss needs at least 2 positives, got {np}"
        )));
    }
    let dim = positives[0].len();
    for p in positives {
        check_same_kind(dim, p.len(), "con_loss positives")?;
    }
    for n in negatives {
        check_same_kind(dim, n.len(), "con_loss negatives")?;
    }

    let nn = negatives.len();
    let mut grads = vec![vec![0.0f64; dim]; np];
    let mut loss_sum = 0.0;

    if nn == 0 {
        // No contrast: every ratio is 1 and the loss is exactly zero.
        return Ok(ConResult { loss: 0.0, grads });
    }

    // Per anchor i: negative logits relative to their own maximum.
    // exp_sums[i] = sum_k exp((s_ik - m_i)/tau),
    // weighted[i] = sum_k exp((s_ik - m_i)/tau) * n_k.
    let mut neg_max = vec![f64::NEG_INFINITY; np];
    let mut neg_sims = vec![vec![0.0f64; nn]; np];
    for (i, p) in positives.iter().enumerate() {
        for (k, n) in negatives.iter().enumerate() {
            let s = dot_fc(p, n);
            neg_sims[i][k] = s;
            neg_max[i] = neg_max[i].max(s);
        }
    }
    let mut exp_sums = vec![0.0f64; np];
    let mut weighted = vec![vec![0.0f64; dim]; np];
    for i in 0..np {
        for (k, n) in negatives.iter().enumerate() {
            let e = ((neg_sims[i][k] - neg_max[i]) / tau).exp();
            exp_sums[i] += e;
            for (wv, &nv) in weighted[i].iter_mut().zip(*n) {
                *wv += e * nv as f64;
            }
        }
    }

    // One directed term: anchor i against positive j.
    let directed = |i: usize, j: usize, grads: &mut Vec<Vec<f64>>| {
        let sp = dot_ff(positives[i], positives[j]);
        // t = exp((m_i - sp)/tau) * exp_sums[i]; loss = ln(1 + t).
        let t = ((neg_max[i] - sp) / tau).exp() * exp_sums[i];
        let loss = t.ln_1p();
        let softmax_p = 1.0 / (1.0 + t);
        let d_sp = (softmax_p - 1.0) / tau;
        // Negatives' softmax-weighted sum: weighted[i] / (exp((sp-m_i)/tau) + exp_sums[i]).
        let denom = ((sp - neg_max[i]) / tau).exp() + exp_sums[i];
        let wneg = 1.0 / (tau * denom);
        for d in 0..dim {
            grads[i][d] += d_sp * positives[j][d] + wneg * weighted[i][d];
            grads[j][d] += d_sp * positives[i][d];
        }
        loss
    };

    for i in 0..np {
        for j in (i + 1)..np {
            loss_sum += directed(i, j, &mut grads);
            loss_sum += directed(j, i, &mut grads);
        }
    }

    let norm = match normalization {
        ConNormalization::PositiveCount => np as f64,
        ConNormalization::PairCount => (np * (np - 1) / 2) as f64,
    };
    let loss = loss_sum / norm;
    for g in grads.iter_mut() {
        for v in g.iter_mut() {
            *v /= norm;
        }
    }
    if !loss.is_finite() {
        return Err(SpadeError::Numerical("non-finite con loss".into()));
    }
    Ok(ConResult { loss, grads })
}

#[derive(Debug, Clone)]
pub struct ReconResult {
    pub loss: f64,
    pub grad_output: Tensor4,
}

/// Mean squared error over all voxels; `output` is already
/// sigmoid-activated. Gradient at a voxel is `2 (output - target) / N`.
pub fn recon_loss(target: &Tensor4, output: &Tensor4) -> Result<ReconResult> {
    if !target.same_shape(output) {
        return Err(SpadeError::Shape(format!(
            "recon_loss shapes differ: ({}, {}, {}, {}) vs ({}, {}, {}, {})",
            target.c, target.d, target.h, target.w, output.c, output.d, output.h, output.w
        )));
    }
    let n = target.data.len() as f64;
    let mut loss = 0.0;
    let mut grad = Tensor4::zeros(output.c, output.d, output.h, output.w);
    for (i, (&o, &t)) in output.data.iter().zip(&target.data).enumerate() {
        let d = o - t;
        loss += d * d;
        grad.data[i] = 2.0 * d / n;
    }
    loss /= n;
    if !loss.is_finite() {
        return Err(SpadeError::Numerical("non-finite reconstruction loss".into()));
    }
    Ok(ReconResult { loss, grad_output: grad })
}

/// `lambda * L_g + (1 - lambda) * L_l + lambda_r * L_r`.
pub fn total_loss(l_g: f64, l_l: f64, l_r: f64, cfg: &LossConfig) -> Result<f64> {
    cfg.validate()?;
    for (name, v) in [("global", l_g), ("local", l_l), ("reconstruction", l_r)] {
        if !v.is_finite() {
            return Err(SpadeError::Numerical(format!("non-finite {name} loss component: {v}")));
        }
    }
    Ok(cfg.lambda * l_g + (1.0 - cfg.lambda) * l_l + cfg.lambda_r * l_r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(v: Vec<f64>) -> Vec<f64> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect()
    }

    fn as_f32(v: &[f64]) -> Vec<f32> {
        v.iter().map(|&x| x as f32).collect()
    }

    #[test]
    fn nce_empty_negatives_is_exactly_zero() {
        let v = unit(vec![1.0, 0.0]);
        let p = unit(vec![0.6, 0.8]);
        let r = nce_loss(&v, &p, &[], 0.2).unwrap();
        assert_eq!(r.loss, 0.0);
        assert!(r.grad_v.iter().all(|&g| g == 0.0));
        assert!(r.grad_v_plus.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn nce_symmetric_single_negative_is_ln2_for_any_tau() {
        // One negative with v.v+ = v.v-: numerator equals the single
        // denominator term, so the loss is ln 2 independent of tau.
        let v = unit(vec![1.0, 0.0, 0.0]);
        let p = unit(vec![0.0, 1.0, 0.0]);
        let n = as_f32(&unit(vec![0.0, 0.5, (0.75f64).sqrt()]));
        // v.p = 0 and v.n = 0.
        for tau in [0.1, 0.2, 1.0, 5.0] {
            let r = nce_loss(&v, &p, &[&n], tau).unwrap();
            assert!((r.loss - std::f64::consts::LN_2).abs() < 1e-12, "tau {tau}: {}", r.loss);
        }
    }

    #[test]
    fn nce_orthogonal_case_matches_scalar_oracle() {
        // v.v+ = 1, one negative with v.v- = 0, tau = 1:
        // loss = ln(1 + e^{-1}) = 0.31326168751822286 (independent scalar
        // evaluation).
        let v = unit(vec![1.0, 0.0]);
        let p = v.clone();
        let n = as_f32(&unit(vec![0.0, 1.0]));
        let r = nce_loss(&v, &p, &[&n], 1.0).unwrap();
        assert!((r.loss - 0.31326168751822286).abs() <= 1e-9);
    }

    #[test]
    fn nce_rejects_kind_mismatch() {
        let v = unit(vec![1.0, 0.0]);
        let p = unit(vec![1.0, 0.0, 0.0]);
        assert!(matches!(nce_loss(&v, &p, &[], 1.0), Err(SpadeError::Shape(_))));
    }

    #[test]
    fn nce_monotone_in_similarities() {
        // Decreasing in v.v+, increasing in each v.v-: perturbation sign
        // tests on the similarity form.
        let (l0, _, _) = nce_from_similarities(0.5, &[0.1, -0.2], 0.2);
        let (l_higher_pos, _, _) = nce_from_similarities(0.6, &[0.1, -0.2], 0.2);
        let (l_higher_neg, _, _) = nce_from_similarities(0.5, &[0.2, -0.2], 0.2);
        assert!(l_higher_pos < l0);
        assert!(l_higher_neg > l0);
    }

    #[test]
    fn nce_shift_stability() {
        // Adding a large common offset to every similarity leaves the loss
        // unchanged within 1e-9 thanks to max-subtraction.
        let negs: Vec<f64> = vec![0.3, -0.4, 0.9, 0.0];
        let (l0, _, _) = nce_from_similarities(0.7, &negs, 0.2);
        for offset in [1e3, 1e5, -1e5] {
            let shifted: Vec<f64> = negs.iter().map(|s| s + offset).collect();
            let (l1, _, _) = nce_from_similarities(0.7 + offset, &shifted, 0.2);
            assert!((l0 - l1).abs() <= 1e-9, "offset {offset}: {l0} vs {l1}");
        }
    }

    #[test]
    fn nce_gradients_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let dim = 6;
            let v = unit((0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let p = unit((0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let negs: Vec<Vec<f32>> = (0..5)
                .map(|_| as_f32(&unit((0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())))
                .collect();
            let negs_ref: Vec<&[f32]> = negs.iter().map(|n| n.as_slice()).collect();
            let r = nce_loss(&v, &p, &negs_ref, 0.2).unwrap();
            let h = 1e-5;
            for j in 0..dim {
                let mut vp = v.clone();
                vp[j] += h;
                let lp = nce_loss(&vp, &p, &negs_ref, 0.2).unwrap().loss;
                vp[j] = v[j] - h;
                let lm = nce_loss(&vp, &p, &negs_ref, 0.2).unwrap().loss;
                let fd = (lp - lm) / (2.0 * h);
                let denom = r.grad_v[j].abs().max(fd.abs()).max(1e-8);
                assert!(((r.grad_v[j] - fd) / denom).abs() <= 1e-4);
            }
        }
    }

    #[test]
    fn con_identical_pair_no_negatives_is_zero() {
        let u = unit(vec![0.6, 0.8]);
        let r = con_loss(&[&u, &u], &[], 0.2, ConNormalization::PositiveCount).unwrap();
        assert_eq!(r.loss, 0.0);
    }

    #[test]
    fn con_identical_pair_orthogonal_negative_matches_oracle() {
        // Both directions give ln(1 + e^{-1}); divided by two positives:
        // (0.31326... + 0.31326...) / 2 = 0.31326168751822286.
        let u = unit(vec![1.0, 0.0]);
        let n = as_f32(&unit(vec![0.0, 1.0]));
        let r = con_loss(&[&u, &u], &[&n], 1.0, ConNormalization::PositiveCount).unwrap();
        assert!((r.loss - 0.31326168751822286).abs() <= 1e-9);
    }

    #[test]
    fn con_three_positives_evaluates_six_directed_terms() {
        // With |positives| = 3 there are exactly 3 unordered pairs and 6
        // directed terms; against an orthogonal negative every term is
        // identical, so loss = 6 * term / 3 = 2 * term.
        let u = unit(vec![1.0, 0.0, 0.0]);
        let n = as_f32(&unit(vec![0.0, 0.0, 1.0]));
        let r = con_loss(&[&u, &u, &u], &[&n], 1.0, ConNormalization::PositiveCount).unwrap();
        let term = 0.31326168751822286;
        assert!((r.loss - 2.0 * term).abs() <= 1e-9);
        // Pair-count normalization divides by 3 instead.
        let r2 = con_loss(&[&u, &u, &u], &[&n], 1.0, ConNormalization::PairCount).unwrap();
        assert!((r2.loss - 2.0 * term).abs() <= 1e-9);
    }

    #[test]
    fn con_requires_two_positives() {
        let u = unit(vec![1.0, 0.0]);
        assert!(matches!(
            con_loss(&[&u], &[], 0.2, ConNormalization::PositiveCount),
            Err(SpadeError::Cohort(_))
        ));
    }

    #[test]
    fn con_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dim = 8;
        let pos: Vec<Vec<f64>> = (0..4)
            .map(|_| unit((0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()))
            .collect();
        let negs: Vec<Vec<f32>> = (0..6)
            .map(|_| as_f32(&unit((0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())))
            .collect();
        let nref: Vec<&[f32]> = negs.iter().map(|n| n.as_slice()).collect();
        let order1: Vec<&[f64]> = pos.iter().map(|p| p.as_slice()).collect();
        let order2: Vec<&[f64]> = [3usize, 1, 0, 2].iter().map(|&i| pos[i].as_slice()).collect();
        let l1 = con_loss(&order1, &nref, 0.2, ConNormalization::PositiveCount).unwrap().loss;
        let l2 = con_loss(&order2, &nref, 0.2, ConNormalization::PositiveCount).unwrap().loss;
        assert!((l1 - l2).abs() < 1e-12);
    }

    #[test]
    fn con_gradients_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let dim = 5;
        let pos: Vec<Vec<f64>> = (0..3)
            .map(|_| unit((0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()))
            .collect();
        let negs: Vec<Vec<f32>> = (0..4)
            .map(|_| as_f32(&unit((0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())))
            .collect();
        let nref: Vec<&[f32]> = negs.iter().map(|n| n.as_slice()).collect();
        let pref: Vec<&[f64]> = pos.iter().map(|p| p.as_slice()).collect();
        let r = con_loss(&pref, &nref, 0.2, ConNormalization::PositiveCount).unwrap();
        let h = 1e-5;
        for i in 0..pos.len() {
            for j in 0..dim {
                let mut pp = pos.clone();
                pp[i][j] += h;
                let pr: Vec<&[f64]> = pp.iter().map(|p| p.as_slice()).collect();
                let lp = con_loss(&pr, &nref, 0.2, ConNormalization::PositiveCount).unwrap().loss;
                pp[i][j] = pos[i][j] - h;
                let pr: Vec<&[f64]> = pp.iter().map(|p| p.as_slice()).collect();
                let lm = con_loss(&pr, &nref, 0.2, ConNormalization::PositiveCount).unwrap().loss;
                let fd = (lp - lm) / (2.0 * h);
                let denom = r.grads[i][j].abs().max(fd.abs()).max(1e-8);
                assert!(
                    ((r.grads[i][j] - fd) / denom).abs() <= 1e-4,
                    "grad[{i}][{j}]: {} vs {fd}",
                    r.grads[i][j]
                );
            }
        }
    }

    #[test]
    fn recon_zero_when_equal_and_quarter_for_half_offset() {
        let t = Tensor4 { c: 1, d: 2, h: 2, w: 2, data: vec![0.25; 8] };
        let r = recon_loss(&t, &t).unwrap();
        assert_eq!(r.loss, 0.0);
        let mut o = t.clone();
        for v in o.data.iter_mut() {
            *v += 0.5;
        }
        let r = recon_loss(&t, &o).unwrap();
        assert!((r.loss - 0.25).abs() < 1e-15);
    }

    #[test]
    fn recon_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut t = Tensor4::zeros(1, 2, 2, 2);
        let mut o = Tensor4::zeros(1, 2, 2, 2);
        for v in t.data.iter_mut() {
            *v = rng.gen_range(0.0..1.0);
        }
        for v in o.data.iter_mut() {
            *v = rng.gen_range(0.0..1.0);
        }
        let r = recon_loss(&t, &o).unwrap();
        let n = o.data.len() as f64;
        let h = 1e-6;
        for j in 0..o.data.len() {
            // Analytic form check: 2 (o - t) / N.
            let expected = 2.0 * (o.data[j] - t.data[j]) / n;
            assert!((r.grad_output.data[j] - expected).abs() < 1e-12);
            let mut op = o.clone();
            op.data[j] += h;
            let lp = recon_loss(&t, &op).unwrap().loss;
            op.data[j] = o.data[j] - h;
            let lm = recon_loss(&t, &op).unwrap().loss;
            let fd = (lp - lm) / (2.0 * h);
            assert!((r.grad_output.data[j] - fd).abs() < 1e-6);
        }
    }

    #[test]
    fn recon_shape_mismatch_rejected() {
        let a = Tensor4::zeros(1, 2, 2, 2);
        let b = Tensor4::zeros(1, 2, 2, 4);
        assert!(matches!(recon_loss(&a, &b), Err(SpadeError::Shape(_))));
    }

    #[test]
    fn total_loss_weighted_sum_and_endpoints() {
        let cfg = LossConfig { tau: 0.2, lambda: 0.5, lambda_r: 10.0, ..Default::default() };
        // 0.5*2 + 0.5*4 + 10*0.1 = 4.0, scalar arithmetic.
        let t = total_loss(2.0, 4.0, 0.1, &cfg).unwrap();
        assert!((t - 4.0).abs() < 1e-15);
        let cfg1 = LossConfig { lambda: 1.0, lambda_r: 0.0, ..Default::default() };
        assert!((total_loss(2.0, 100.0, 55.0, &cfg1).unwrap() - 2.0).abs() < 1e-15);
        let cfg0 = LossConfig { lambda: 0.0, lambda_r: 0.0, ..Default::default() };
        assert!((total_loss(99.0, 4.0, 55.0, &cfg0).unwrap() - 4.0).abs() < 1e-15);
    }

    #[test]
    fn total_loss_names_non_finite_component() {
        let cfg = LossConfig::default();
        match total_loss(2.0, f64::NAN, 0.0, &cfg) {
            Err(SpadeError::Numerical(msg)) => assert!(msg.contains("local")),
            other => panic!("expected numerical error, got {other:?}"),
        }
    }
}
