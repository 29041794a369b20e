//! DDPM noise schedules, forward noising and ancestral sampling, shared by
//! the layout and painting models.
//!
//! Timesteps run t in 1..=T. Schedule arrays carry an index-0 sentinel
//! (beta_0 = 0, abar_0 = 1) so the posterior variance
//! bvar_t = (1 - abar_{t-1}) / (1 - abar_t) * beta_t is zero at t = 1 by
//! construction: the final reverse step adds no noise. With a single step
//! (T = 1) and an oracle noise prediction, one reverse step reproduces the
//! clean signal exactly; a test pins that identity.

use crate::error::{Error, Result};
use crate::rng::randn;
use crate::tensor::Scalar;
use ndarray::ArrayD;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

/// Precomputed schedule in f64; element type conversion happens at use sites.
#[derive(Clone, Debug)]
pub struct Schedule {
    pub kind: ScheduleKind,
    pub t_max: usize,
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl Schedule {
    pub fn new(kind: ScheduleKind, t_max: usize) -> Result<Self> {
        if t_max == 0 {
            return Err(Error::InvalidArgument("schedule: t_max must be >= 1".into()));
        }
        let mut beta = vec![0.0; t_max + 1];
        match kind {
            ScheduleKind::Linear => {
                let (lo, hi) = (1e-4, 0.02);
                for (t, b) in beta.iter_mut().enumerate().skip(1) {
                    *b = if t_max == 1 {
                        lo
                    } else {
                        lo + (t - 1) as f64 / (t_max - 1) as f64 * (hi - lo)
                    };
                }
            }
            ScheduleKind::Cosine => {
                let s = 0.008;
                let f = |t: f64| {
                    let x = (t / t_max as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2;
                    x.cos().powi(2)
                };
                let f0 = f(0.0);
                let mut prev = 1.0;
                for (t, b) in beta.iter_mut().enumerate().skip(1) {
                    let abar = f(t as f64) / f0;
                    *b = (1.0 - abar / prev).min(0.999);
                    prev = abar;
                }
            }
        }
        // Rebuild abar as the cumulative product of the (possibly clipped)
        // betas so the identities between the arrays hold exactly.
        let mut alpha_bar = vec![1.0; t_max + 1];
        for t in 1..=t_max {
            alpha_bar[t] = alpha_bar[t - 1] * (1.0 - beta[t]);
        }
        Ok(Schedule { kind, t_max, beta, alpha_bar })
    }

    pub fn linear(t_max: usize) -> Result<Self> {
        Self::new(ScheduleKind::Linear, t_max)
    }

    pub fn cosine(t_max: usize) -> Result<Self> {
        Self::new(ScheduleKind::Cosine, t_max)
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.t_max {
            return Err(Error::InvalidArgument(format!(
                "timestep {t} outside 1..={}",
                self.t_max
            )));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.beta[t]
    }

    /// Cumulative product of alphas; index 0 is the clean-signal sentinel 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// Reverse-process posterior variance; zero at t = 1.
    pub fn posterior_var(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bar[t - 1]) / (1.0 - self.alpha_bar[t]) * self.beta[t]
    }
}

fn check_finite<F: Scalar>(a: &ArrayD<F>, what: &str) -> Result<()> {
    if a.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite(what.to_string()));
    }
    Ok(())
}

/// z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps.
pub fn forward_noise<F: Scalar>(
    sched: &Schedule,
    z0: &ArrayD<F>,
    t: usize,
    eps: &ArrayD<F>,
) -> Result<ArrayD<F>> {
    sched.check_t(t)?;
    if z0.shape() != eps.shape() {
        return Err(Error::ShapeMismatch(format!(
            "forward_noise: signal {:?} vs noise {:?}",
            z0.shape(),
            eps.shape()
        )));
    }
    check_finite(z0, "forward_noise signal")?;
    check_finite(eps, "forward_noise noise")?;
    let ab = sched.alpha_bar(t);
    let (c0, c1) = (F::from_f64(ab.sqrt()), F::from_f64((1.0 - ab).sqrt()));
    Ok(z0.mapv(|x| x * c0) + &eps.mapv(|x| x * c1))
}

/// One ancestral reverse step from z_t to z_{t-1}:
/// mean = (z_t - beta_t / sqrt(1 - abar_t) * eps_hat) / sqrt(alpha_t),
/// plus sqrt(posterior_var) * noise for t > 1. `noise` is required exactly
/// when t > 1.
pub fn reverse_step<F: Scalar>(
    sched: &Schedule,
    z_t: &ArrayD<F>,
    t: usize,
    eps_hat: &ArrayD<F>,
    noise: Option<&ArrayD<F>>,
) -> Result<ArrayD<F>> {
    sched.check_t(t)?;
    if z_t.shape() != eps_hat.shape() {
        return Err(Error::ShapeMismatch(format!(
            "reverse_step: state {:?} vs prediction {:?}",
            z_t.shape(),
            eps_hat.shape()
        )));
    }
    check_finite(eps_hat, "reverse_step prediction")?;
    let (beta, alpha, ab) = (sched.beta(t), sched.alpha(t), sched.alpha_bar(t));
    let k_eps = F::from_f64(beta / (1.0 - ab).sqrt());
    let inv_sqrt_alpha = F::from_f64(1.0 / alpha.sqrt());
    let mut z = (z_t - &eps_hat.mapv(|e| e * k_eps)).mapv(|e| e * inv_sqrt_alpha);
    if t > 1 {
        let xi = noise.ok_or_else(|| {
            Error::InvalidArgument(format!("reverse_step: noise required for t = {t} > 1"))
        })?;
        if xi.shape() != z_t.shape() {
            return Err(Error::ShapeMismatch("reverse_step: noise shape".into()));
        }
        let sigma = F::from_f64(sched.posterior_var(t).sqrt());
        z = z + &xi.mapv(|e| e * sigma);
    }
    Ok(z)
}

/// Full ancestral chain from pure noise. `eps_model` maps (z_t, t) to the
/// predicted noise. The result is the raw clean-signal estimate; callers
/// clamp to their domain if needed.
pub fn sample<F: Scalar>(
    sched: &Schedule,
    shape: &[usize],
    rng: &mut ChaCha8Rng,
    mut eps_model: impl FnMut(&ArrayD<F>, usize) -> Result<ArrayD<F>>,
) -> Result<ArrayD<F>> {
    let mut z = randn::<F>(shape, rng);
    for t in (1..=sched.t_max).rev() {
        let eps_hat = eps_model(&z, t)?;
        let noise = if t > 1 { Some(randn::<F>(shape, rng)) } else { None };
        z = reverse_step(sched, &z, t, &eps_hat, noise.as_ref())?;
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{derive_rng, Stream};
    use ndarray::{arr1, IxDyn};

    #[test]
    fn schedules_are_monotone_and_end_noisy() {
        for kind in [ScheduleKind::Linear, ScheduleKind::Cosine] {
            let s = Schedule::new(kind, 1000).unwrap();
            assert_eq!(s.alpha_bar(0), 1.0);
            for t in 1..=1000 {
                assert!(s.beta(t) > 0.0 && s.beta(t) < 1.0, "{kind:?} beta_{t}");
                assert!(s.alpha_bar(t) < s.alpha_bar(t - 1), "{kind:?} abar not decreasing at {t}");
                let pv = s.posterior_var(t);
                assert!(pv >= 0.0 && pv <= s.beta(t) + 1e-15, "{kind:?} posterior var at {t}");
            }
            assert!(s.alpha_bar(1000) < 1e-3, "{kind:?} abar_T = {}", s.alpha_bar(1000));
        }
        // Linear endpoint values and near-total noising at T = 1000.
        let lin = Schedule::linear(1000).unwrap();
        assert!((lin.beta(1) - 1e-4).abs() < 1e-12);
        assert!((lin.beta(1000) - 0.02).abs() < 1e-12);
        assert!(lin.alpha_bar(1000) < 1e-4);
    }

    #[test]
    fn posterior_variance_vanishes_at_final_step() {
        let s = Schedule::linear(100).unwrap();
        assert_eq!(s.posterior_var(1), 0.0);
        assert!(s.posterior_var(2) > 0.0);
    }

    #[test]
    fn single_step_with_oracle_noise_recovers_signal() {
        let s = Schedule::linear(1).unwrap();
        let z0 = arr1(&[0.3_f64, -0.7, 1.1, 0.0]).into_dyn();
        let eps = arr1(&[0.5, 0.2, -1.0, 2.0]).into_dyn();
        let z1 = forward_noise(&s, &z0, 1, &eps).unwrap();
        let rec = reverse_step(&s, &z1, 1, &eps, None).unwrap();
        for (a, b) in rec.iter().zip(z0.iter()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn forward_noise_matches_marginal_variance() {
        let s = Schedule::linear(100).unwrap();
        let z0 = ArrayD::<f64>::zeros(IxDyn(&[4]));
        let mut rng = derive_rng(11, Stream::TrainNoise, &[0]);
        for &t in &[1, 25, 50, 100] {
            let want = 1.0 - s.alpha_bar(t);
            let n = 2000;
            let mut acc = 0.0;
            for _ in 0..n {
                let eps = randn::<f64>(&[4], &mut rng);
                let zt = forward_noise(&s, &z0, t, &eps).unwrap();
                acc += zt.mapv(|x| x * x).sum() / 4.0;
            }
            let got = acc / n as f64;
            assert!(
                (got - want).abs() / want.max(1e-6) < 0.1,
                "t = {t}: var {got} vs {want}"
            );
        }
    }

    #[test]
    fn zero_prediction_loss_is_unit_on_standard_noise() {
        // With eps_hat = 0 the per-element squared error against fresh noise
        // has expectation 1.
        let mut rng = derive_rng(12, Stream::TrainNoise, &[1]);
        let n = 20000;
        let eps = randn::<f64>(&[n], &mut rng);
        let loss = eps.mapv(|x| x * x).sum() / n as f64;
        assert!((loss - 1.0).abs() < 0.05, "mean sq {loss}");
    }

    #[test]
    fn sampler_with_oracle_score_recovers_bimodal_mixture() {
        // Data: equal mixture of N(-2, 0.3^2) and N(+2, 0.3^2) in one
        // dimension. The marginal at time t is a mixture of
        // N(sqrt(abar) mu_i, abar sig^2 + 1 - abar); the optimal noise
        // prediction is -sqrt(1 - abar) times the mixture score.
        let s = Schedule::linear(100).unwrap();
        let (mu, sig) = (2.0_f64, 0.3_f64);
        let model = |z: &ArrayD<f64>, t: usize| -> Result<ArrayD<f64>> {
            let ab = s.alpha_bar(t);
            let var = ab * sig * sig + 1.0 - ab;
            let out = z.mapv(|x| {
                let d_pos = x - ab.sqrt() * mu;
                let d_neg = x + ab.sqrt() * mu;
                let w_pos = (-d_pos * d_pos / (2.0 * var)).exp();
                let w_neg = (-d_neg * d_neg / (2.0 * var)).exp();
                let score = -(w_pos * d_pos + w_neg * d_neg) / ((w_pos + w_neg) * var);
                -(1.0 - ab).sqrt() * score
            });
            Ok(out)
        };
        let mut rng = derive_rng(13, Stream::Sample, &[0]);
        let n = 400;
        let xs = sample::<f64>(&s, &[n], &mut rng, model).unwrap();
        let (mut pos, mut neg) = (Vec::new(), Vec::new());
        for &x in xs.iter() {
            if x > 0.0 {
                pos.push(x)
            } else {
                neg.push(x)
            }
        }
        let frac = pos.len() as f64 / n as f64;
        assert!((frac - 0.5).abs() < 0.15, "mode balance {frac}");
        let mean_pos = pos.iter().sum::<f64>() / pos.len() as f64;
        let mean_neg = neg.iter().sum::<f64>() / neg.len() as f64;
        assert!((mean_pos - mu).abs() < 0.15, "positive mode at {mean_pos}");
        assert!((mean_neg + mu).abs() < 0.15, "negative mode at {mean_neg}");
    }

    #[test]
    fn input_validation() {
        let s = Schedule::linear(10).unwrap();
        let z = arr1(&[0.0]).into_dyn();
        let e = arr1(&[0.0, 0.0]).into_dyn();
        assert!(matches!(forward_noise(&s, &z, 0, &z), Err(Error::InvalidArgument(_))));
        assert!(matches!(forward_noise(&s, &z, 11, &z), Err(Error::InvalidArgument(_))));
        assert!(matches!(forward_noise(&s, &z, 5, &e), Err(Error::ShapeMismatch(_))));
        let bad = arr1(&[f64::NAN]).into_dyn();
        assert!(matches!(forward_noise(&s, &bad, 5, &z), Err(Error::NonFinite(_))));
        assert!(matches!(reverse_step(&s, &z, 5, &z, None), Err(Error::InvalidArgument(_))));
    }
}
