//! Adversarial, weak feature matching and reconstruction losses, and their
//! weighted total with the same/different pair gating.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::discriminators::{AppearanceDiscriminator, LandmarkDiscriminator};
use crate::error::{Error, Result};
use crate::nn::{Weights, DEVICE, DTYPE};

/// Clamp applied to discriminator scores before taking logs.
pub const SCORE_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GanLoss {
    /// `-[log D(real) + log(1 - D(fake))]` for D, `-log D(fake)` for G.
    #[default]
    Standard,
    /// `-[log D(real) + 1 - log D(fake)]` for D, `1 - log D(fake)` for G.
    AsPrinted,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub app: f64,
    pub lm: f64,
    pub wfm: f64,
    pub recon: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            app: 1.0,
            lm: 1.0,
            wfm: 1.0,
            recon: 5.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("app", self.app), ("lm", self.lm), ("wfm", self.wfm), ("recon", self.recon)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("loss weight `{name}` = {v} must be a finite value >= 0")));
            }
        }
        Ok(())
    }
}

fn clamp_scores(scores: &Tensor) -> Result<Tensor> {
    Ok(scores.clamp(SCORE_EPS, 1.0 - SCORE_EPS)?)
}

/// Discriminator objective from per-sample real and fake scores, averaged
/// over the batch.
pub fn discriminator_loss(real: &Tensor, fake: &Tensor, kind: GanLoss) -> Result<Tensor> {
    let log_real = clamp_scores(real)?.log()?;
    let fake = clamp_scores(fake)?;
    let per_sample = match kind {
        GanLoss::Standard => (log_real + fake.affine(-1.0, 1.0)?.log()?)?,
        GanLoss::AsPrinted => ((log_real + 1.0)? - fake.log()?)?,
    };
    Ok(per_sample.neg()?.mean_all()?)
}

pub fn generator_adversarial_loss(fake: &Tensor, kind: GanLoss) -> Result<Tensor> {
    let log_fake = clamp_scores(fake)?.log()?;
    let per_sample = match kind {
        GanLoss::Standard => log_fake.neg()?,
        GanLoss::AsPrinted => log_fake.affine(-1.0, 1.0)?,
    };
    Ok(per_sample.mean_all()?)
}

/// `(generator term, discriminator term)`.
#[derive(Debug, Clone)]
pub struct AdversarialTerms {
    pub generator: Tensor,
    pub discriminator: Tensor,
}

/// Appearance adversarial terms. `trainable` feeds the discriminator term
/// (with `I_g` detached); `frozen` feeds the generator term so that it never
/// reaches discriminator parameters.
pub fn adv_losses_app(
    d_app: &AppearanceDiscriminator,
    trainable: &Weights,
    frozen: &Weights,
    source: &Tensor,
    condition: &Tensor,
    generated: &Tensor,
    kind: GanLoss,
) -> Result<AdversarialTerms> {
    let real = d_app.forward(trainable, source, condition)?;
    let fake_d = d_app.forward(trainable, &generated.detach(), condition)?;
    let fake_g = d_app.forward(frozen, generated, condition)?;
    Ok(AdversarialTerms {
        discriminator: discriminator_loss(&real.score, &fake_d.score, kind)?,
        generator: generator_adversarial_loss(&fake_g.score, kind)?,
    })
}

/// Landmark adversarial terms with `(I_s, Lm_s)` real and `(I_g, Lm_s)` fake.
pub fn adv_losses_lm(
    d_lm: &LandmarkDiscriminator,
    trainable: &Weights,
    frozen: &Weights,
    source: &Tensor,
    generated: &Tensor,
    lm_source: &Tensor,
    kind: GanLoss,
) -> Result<AdversarialTerms> {
    let real = d_lm.forward(trainable, source, lm_source)?;
    let fake_d = d_lm.forward(trainable, &generated.detach(), lm_source)?;
    let fake_g = d_lm.forward(frozen, generated, lm_source)?;
    Ok(AdversarialTerms {
        discriminator: discriminator_loss(&real.score, &fake_d.score, kind)?,
        generator: generator_adversarial_loss(&fake_g.score, kind)?,
    })
}

/// Per-sample weak feature matching, `(B,)`:
/// `sum_{i=m..M} (1/N_i) * |f_g^(i) - f_s^(i)|_1`, source features detached.
pub fn wfm_per_sample(feats_g: &[Tensor], feats_s: &[Tensor], m: usize) -> Result<Tensor> {
    if feats_g.len() != feats_s.len() {
        return Err(Error::shape(format!(
            "feature lists of length {} and {}",
            feats_g.len(),
            feats_s.len()
        )));
    }
    if m == 0 || m > feats_g.len() {
        return Err(Error::InvalidArgument(format!("start layer {m} outside 1..={}", feats_g.len())));
    }
    let mut total: Option<Tensor> = None;
    for (i, (g, s)) in feats_g.iter().zip(feats_s).enumerate().skip(m - 1) {
        if g.dims() != s.dims() {
            return Err(Error::shape(format!("layer {}: {:?} vs {:?}", i + 1, g.dims(), s.dims())));
        }
        let b = g.dim(0)?;
        let term = (g - s.detach())?.abs()?.reshape((b, ()))?.mean(D::Minus1)?;
        total = Some(match total {
            None => term,
            Some(t) => (t + term)?,
        });
    }
    total.ok_or_else(|| Error::InvalidArgument("no feature layers".into()))
}

/// Batch mean of [`wfm_per_sample`].
pub fn wfm_loss(feats_g: &[Tensor], feats_s: &[Tensor], m: usize) -> Result<Tensor> {
    Ok(wfm_per_sample(feats_g, feats_s, m)?.mean_all()?)
}

/// Per-sample mean absolute difference, `(B,)`.
pub fn recon_per_sample(generated: &Tensor, source: &Tensor) -> Result<Tensor> {
    if generated.dims() != source.dims() {
        return Err(Error::shape(format!("{:?} vs {:?}", generated.dims(), source.dims())));
    }
    let b = generated.dim(0)?;
    Ok((generated - source)?.abs()?.reshape((b, ()))?.mean(D::Minus1)?)
}

pub fn recon_loss(generated: &Tensor, source: &Tensor) -> Result<Tensor> {
    Ok(recon_per_sample(generated, source)?.mean_all()?)
}

/// Which of the two supervision terms a pair receives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairTerms {
    pub recon: bool,
    pub wfm: bool,
}

impl PairTerms {
    pub fn for_pair(same_identity: bool, context_matching: bool) -> Self {
        PairTerms {
            recon: same_identity,
            wfm: !same_identity && context_matching,
        }
    }
}

/// `sum(gate * per_sample) / B` with a 0/1 gate.
pub fn gated_mean(per_sample: &Tensor, gate: &[bool]) -> Result<Tensor> {
    let b = per_sample.dim(0)?;
    if gate.len() != b {
        return Err(Error::shape(format!("{} gates for batch of {b}", gate.len())));
    }
    let g: Vec<f64> = gate.iter().map(|&on| if on { 1.0 } else { 0.0 }).collect();
    let g = Tensor::from_vec(g, b, &DEVICE)?.to_dtype(DTYPE)?;
    Ok((per_sample.mul(&g)?.sum_all()? / b as f64)?)
}

/// Scalar loss components for one pair or one batch.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossComponents {
    pub app_g: f64,
    pub app_d: f64,
    pub lm_g: f64,
    pub lm_d: f64,
    pub wfm: f64,
    pub recon: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBundle {
    pub app_g: f64,
    pub app_d: f64,
    pub lm_g: f64,
    pub lm_d: f64,
    pub wfm: f64,
    pub recon: f64,
    pub total_g: f64,
    pub total_d: f64,
    pub wfm_active: bool,
    pub recon_active: bool,
}

pub const LOG_HEADER: &str = "step,app_g,app_d,lm_g,lm_d,wfm,recon,total_g,total_d,wfm_active,recon_active";

impl LossBundle {
    /// Builds the bundle, zeroing inactive terms.
    pub fn new(c: &LossComponents, weights: &LossWeights, active: PairTerms) -> Result<Self> {
        weights.validate()?;
        let wfm = if active.wfm { c.wfm } else { 0.0 };
        let recon = if active.recon { c.recon } else { 0.0 };
        Ok(LossBundle {
            app_g: c.app_g,
            app_d: c.app_d,
            lm_g: c.lm_g,
            lm_d: c.lm_d,
            wfm,
            recon,
            total_g: weights.app * c.app_g + weights.lm * c.lm_g + weights.wfm * wfm + weights.recon * recon,
            total_d: weights.app * c.app_d + weights.lm * c.lm_d,
            wfm_active: active.wfm,
            recon_active: active.recon,
        })
    }

    pub fn terms(&self) -> [(&'static str, f64); 8] {
        [
            ("app_g", self.app_g),
            ("app_d", self.app_d),
            ("lm_g", self.lm_g),
            ("lm_d", self.lm_d),
            ("wfm", self.wfm),
            ("recon", self.recon),
            ("total_g", self.total_g),
            ("total_d", self.total_d),
        ]
    }

    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.terms().into_iter().find(|(_, v)| !v.is_finite()).map(|(n, _)| n)
    }

    pub fn log_row(&self, step: u64) -> String {
        let mut row = step.to_string();
        for (_, v) in self.terms() {
            row.push(',');
            row.push_str(&v.to_string());
        }
        row.push_str(&format!(",{},{}", self.wfm_active as u8, self.recon_active as u8));
        row
    }
}

/// Weighted total for a single pair, gated by `same_identity`.
pub fn total_loss(
    components: &LossComponents,
    weights: &LossWeights,
    same_identity: bool,
    context_matching: bool,
) -> Result<LossBundle> {
    LossBundle::new(components, weights, PairTerms::for_pair(same_identity, context_matching))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Var;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar(t: &Tensor) -> f64 {
        t.to_scalar::<f64>().unwrap()
    }

    fn vec_t(v: Vec<f64>) -> Tensor {
        let n = v.len();
        Tensor::from_vec(v, n, &DEVICE).unwrap()
    }

    #[test]
    fn uninformative_discriminator() {
        let half = vec_t(vec![0.5; 4]);
        let d = scalar(&discriminator_loss(&half, &half, GanLoss::Standard).unwrap());
        assert!((d - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn generator_term_vanishes_when_fooling() {
        let fooled = vec_t(vec![1.0; 3]);
        let g = scalar(&generator_adversarial_loss(&fooled, GanLoss::Standard).unwrap());
        assert!(g.abs() < 1e-6);
        let perfect = scalar(
            &discriminator_loss(&vec_t(vec![1.0 - SCORE_EPS; 2]), &vec_t(vec![SCORE_EPS; 2]), GanLoss::Standard).unwrap(),
        );
        assert!(perfect < 1e-6);
    }

    #[test]
    fn clamps_extreme_scores() {
        let zeros = vec_t(vec![0.0; 2]);
        let ones = vec_t(vec![1.0; 2]);
        let d = scalar(&discriminator_loss(&zeros, &ones, GanLoss::Standard).unwrap());
        assert!(d.is_finite());
        let expected = -2.0 * SCORE_EPS.ln();
        assert!((d - expected).abs() < 1e-6);
    }

    #[test]
    fn as_printed_variant() {
        let r = vec_t(vec![0.8]);
        let f = vec_t(vec![0.3]);
        let d = scalar(&discriminator_loss(&r, &f, GanLoss::AsPrinted).unwrap());
        assert!((d - -(0.8f64.ln() + 1.0 - 0.3f64.ln())).abs() < 1e-12);
        let g = scalar(&generator_adversarial_loss(&f, GanLoss::AsPrinted).unwrap());
        assert!((g - (1.0 - 0.3f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn wfm_unit_difference() {
        let g = Tensor::ones((1, 2, 2, 2), DTYPE, &DEVICE).unwrap();
        let s = Tensor::zeros((1, 2, 2, 2), DTYPE, &DEVICE).unwrap();
        assert_eq!(scalar(&wfm_loss(&[g.clone()], &[s], 1).unwrap()), 1.0);
        assert_eq!(scalar(&wfm_loss(&[g.clone()], &[g], 1).unwrap()), 0.0);
    }

    #[test]
    fn wfm_start_layer_and_shape_errors() {
        let a = Tensor::ones((1, 2, 2, 2), DTYPE, &DEVICE).unwrap();
        let b = Tensor::zeros((1, 2, 2, 2), DTYPE, &DEVICE).unwrap();
        let c = Tensor::zeros((1, 1, 2, 2), DTYPE, &DEVICE).unwrap();
        // only layer 2 counted
        let v = scalar(&wfm_loss(&[a.clone(), b.clone()], &[b.clone(), b.clone()], 2).unwrap());
        assert_eq!(v, 0.0);
        assert!(wfm_loss(&[a.clone()], &[c], 1).is_err());
        assert!(wfm_loss(&[a.clone()], &[b.clone(), b.clone()], 1).is_err());
        assert!(wfm_loss(&[a], &[b], 0).is_err());
    }

    #[test]
    fn wfm_source_branch_is_detached() {
        let g = Var::from_tensor(&Tensor::ones((1, 1, 2, 2), DTYPE, &DEVICE).unwrap()).unwrap();
        let s = Var::from_tensor(&Tensor::zeros((1, 1, 2, 2), DTYPE, &DEVICE).unwrap()).unwrap();
        let loss = wfm_loss(&[g.as_tensor().clone()], &[s.as_tensor().clone()], 1).unwrap();
        let grads = loss.backward().unwrap();
        assert!(grads.get(&g).is_some());
        assert!(grads.get(&s).is_none());
    }

    #[test]
    fn recon_cases() {
        let a = Tensor::full(0.3f64, (2, 3, 4, 4), &DEVICE).unwrap();
        let b = Tensor::full(0.1f64, (2, 3, 4, 4), &DEVICE).unwrap();
        assert_eq!(scalar(&recon_loss(&a, &a).unwrap()), 0.0);
        assert!((scalar(&recon_loss(&a, &b).unwrap()) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn gated_mean_divides_by_batch() {
        let v = vec_t(vec![1.0, 2.0, 3.0, 4.0]);
        let got = scalar(&gated_mean(&v, &[true, false, true, false]).unwrap());
        assert_eq!(got, 1.0);
    }

    #[test]
    fn total_with_paper_weights() {
        let c = LossComponents {
            app_g: 0.7,
            app_d: 1.1,
            lm_g: 0.4,
            lm_d: 0.9,
            wfm: 0.25,
            recon: 0.3,
        };
        let w = LossWeights::default();
        let same = total_loss(&c, &w, true, true).unwrap();
        assert_eq!(same.total_g, 0.7 + 0.4 + 5.0 * 0.3);
        assert!(same.recon_active && !same.wfm_active);
        assert_eq!(same.wfm, 0.0);
        let diff = total_loss(&c, &w, false, true).unwrap();
        assert_eq!(diff.recon, 0.0);
        assert_eq!(diff.total_g, 0.7 + 0.4 + 0.25);
        let zero = LossWeights {
            app: 0.0,
            lm: 0.0,
            wfm: 0.0,
            recon: 0.0,
        };
        let z = total_loss(&c, &zero, true, true).unwrap();
        assert_eq!((z.total_g, z.total_d), (0.0, 0.0));
        let neg = LossWeights { recon: -1.0, ..w };
        assert!(total_loss(&c, &neg, true, true).is_err());
    }

    #[test]
    fn recon_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 2 * 3 * 3 * 3;
        let g0: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let s: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let st = Tensor::from_vec(s.clone(), (2, 3, 3, 3), &DEVICE).unwrap();
        let var = Var::from_vec(g0.clone(), (2, 3, 3, 3), &DEVICE).unwrap();
        let grads = recon_loss(var.as_tensor(), &st).unwrap().backward().unwrap();
        let analytic = grads.get(&var).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let f = |g: &[f64]| g.iter().zip(&s).map(|(a, b)| (a - b).abs()).sum::<f64>() / n as f64;
        let h = 1e-7;
        for i in 0..n {
            let mut p = g0.clone();
            p[i] += h;
            let mut m = g0.clone();
            m[i] -= h;
            let numeric = (f(&p) - f(&m)) / (2.0 * h);
            assert!((analytic[i] - numeric).abs() <= 1e-3 * numeric.abs());
        }
    }

    #[test]
    fn log_row_layout() {
        let b = total_loss(&LossComponents::default(), &LossWeights::default(), true, true).unwrap();
        let row = b.log_row(3);
        assert_eq!(row.split(',').count(), LOG_HEADER.split(',').count());
        assert!(row.starts_with("3,"));
        assert!(row.ends_with(",0,1"));
    }
}
