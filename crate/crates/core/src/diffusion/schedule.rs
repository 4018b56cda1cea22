use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            steps: 200,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        build_schedule(self.steps, self.beta_start, self.beta_end)
    }
}

/// Timesteps are 1-based: `t` in `1..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

/// Linear betas from `beta_start` to `beta_end`.
pub fn build_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::Invalid("schedule needs at least one step".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Invalid(format!(
            "beta range ({beta_start}, {beta_end}) must satisfy 0 < start <= end < 1"
        )));
    }
    let beta: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for a in &alpha {
        acc *= a;
        alpha_bar.push(acc);
    }
    Ok(NoiseSchedule { beta, alpha, alpha_bar })
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn idx(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            return Err(Error::Invalid(format!("timestep {t} outside 1..={}", self.steps())));
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.beta[self.idx(t)?])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(self.alpha[self.idx(t)?])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        Ok(self.alpha_bar[self.idx(t)?])
    }

    /// `alpha_bar[t-1]`, with `alpha_bar[0] = 1`.
    pub fn alpha_bar_prev(&self, t: usize) -> Result<f64> {
        let i = self.idx(t)?;
        Ok(if i == 0 { 1.0 } else { self.alpha_bar[i - 1] })
    }

    /// Posterior standard deviation of the ancestral step; zero at `t = 1`.
    pub fn sigma(&self, t: usize) -> Result<f64> {
        let ab = self.alpha_bar(t)?;
        let prev = self.alpha_bar_prev(t)?;
        Ok((self.beta(t)? * (1.0 - prev) / (1.0 - ab)).max(0.0).sqrt())
    }

    pub fn hash(&self) -> String {
        let mut bytes = (self.steps() as u64).to_le_bytes().to_vec();
        self.beta.iter().for_each(|b| bytes.extend(b.to_le_bytes()));
        crate::digest::sha256_hex(&[&bytes])
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.shape, b.shape)));
    }
    Ok(())
}

/// `z_t = sqrt(ab) z0 + sqrt(1 - ab) eps`.
pub fn forward_noise(z0: &Tensor, t: usize, eps: &Tensor, s: &NoiseSchedule) -> Result<Tensor> {
    same_shape(z0, eps, "noise draw")?;
    let ab = s.alpha_bar(t)?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = z0.data.iter().zip(&eps.data).map(|(z, e)| a * z + b * e).collect();
    Ok(Tensor::new(z0.shape.clone(), data))
}

/// `z0_hat = (z_t - sqrt(1 - ab) eps_hat) / sqrt(ab)`.
pub fn estimate_z0(z_t: &Tensor, eps_hat: &Tensor, t: usize, s: &NoiseSchedule) -> Result<Tensor> {
    same_shape(z_t, eps_hat, "noise estimate")?;
    let ab = s.alpha_bar(t)?;
    if ab <= 0.0 {
        return Err(Error::Numeric(format!("alpha_bar({t}) = {ab}")));
    }
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = z_t.data.iter().zip(&eps_hat.data).map(|(z, e)| (z - b * e) / a).collect();
    Ok(Tensor::new(z_t.shape.clone(), data))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerMode {
    #[default]
    Ancestral,
    Deterministic,
}

/// One reverse step given the noise estimate:
/// `(z_t - beta/sqrt(1-ab) eps_hat)/sqrt(alpha) + sigma xi`.
pub fn reverse_step<R: Rng + ?Sized>(
    z_t: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    s: &NoiseSchedule,
    mode: SamplerMode,
    rng: &mut R,
) -> Result<Tensor> {
    same_shape(z_t, eps_hat, "noise estimate")?;
    let beta = s.beta(t)?;
    let ab = s.alpha_bar(t)?;
    let coef = beta / (1.0 - ab).sqrt();
    let inv_sqrt_a = 1.0 / s.alpha(t)?.sqrt();
    let sigma = match mode {
        SamplerMode::Ancestral => s.sigma(t)?,
        SamplerMode::Deterministic => 0.0,
    };
    let data = z_t
        .data
        .iter()
        .zip(&eps_hat.data)
        .map(|(z, e)| {
            let mean = (z - coef * e) * inv_sqrt_a;
            if sigma > 0.0 {
                let xi: f64 = rng.sample(StandardNormal);
                mean + sigma * xi
            } else {
                mean
            }
        })
        .collect();
    Ok(Tensor::new(z_t.shape.clone(), data))
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect())
}

/// Mean squared difference between a noise draw and its estimate.
pub fn noise_mse(eps: &Tensor, eps_hat: &Tensor) -> Result<f64> {
    same_shape(eps, eps_hat, "noise estimate")?;
    Ok(eps.data.iter().zip(&eps_hat.data).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / eps.numel() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rel(a: &Tensor, b: &Tensor) -> f64 {
        let num: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let den: f64 = b.data.iter().map(|y| y * y).sum::<f64>().sqrt();
        num / den.max(1e-300)
    }

    #[test]
    fn schedule_examples() {
        assert_eq!(build_schedule(1, 0.02, 0.02).unwrap().alpha_bars(), &[0.98]);
        let s = build_schedule(2, 0.1, 0.2).unwrap();
        assert!((s.alpha_bars()[0] - 0.9).abs() < 1e-15);
        assert!((s.alpha_bars()[1] - 0.72).abs() < 1e-15);
        let d = ScheduleConfig::default().build().unwrap();
        assert_eq!(d.steps(), 200);
        // independent product in log space
        let log_sum: f64 = (0..200).map(|i| (1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 199.0)).ln()).sum();
        assert!((d.alpha_bars()[199] - log_sum.exp()).abs() < 1e-12);
        // independent float64 product: 0.13218275425061793
        assert!((d.alpha_bars()[199] - 0.132_182_754_250_617_93).abs() < 1e-12);
    }

    #[test]
    fn schedule_rejects_bad_ranges() {
        assert!(build_schedule(0, 0.1, 0.2).is_err());
        assert!(build_schedule(10, 0.0, 0.2).is_err());
        assert!(build_schedule(10, 0.3, 0.2).is_err());
        assert!(build_schedule(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn schedule_invariants() {
        let s = ScheduleConfig::default().build().unwrap();
        let mut prod = 1.0;
        for (i, ab) in s.alpha_bars().iter().enumerate() {
            prod *= s.alphas()[i];
            assert!((prod - ab).abs() < 1e-12);
            if i > 0 {
                assert!(*ab < s.alpha_bars()[i - 1]);
            }
        }
        assert_eq!(s.sigma(1).unwrap(), 0.0);
    }

    #[test]
    fn hand_inversion_case() {
        let s = build_schedule(2, 0.1, 0.2).unwrap();
        let z0 = estimate_z0(&Tensor::scalar(1.0), &Tensor::scalar(0.5), 2, &s).unwrap();
        let want = (1.0 - 0.28f64.sqrt() * 0.5) / 0.72f64.sqrt();
        assert!((z0.item() - want).abs() < 1e-12);
        assert!((z0.item() - 0.8666).abs() < 1e-3);
    }

    #[test]
    fn noiseless_and_limits() {
        let s = ScheduleConfig::default().build().unwrap();
        let z0 = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]);
        let zt = forward_noise(&z0, 50, &Tensor::zeros(&[3]), &s).unwrap();
        let a = s.alpha_bar(50).unwrap().sqrt();
        assert!(zt.data.iter().zip(&z0.data).all(|(x, y)| (x - a * y).abs() < 1e-15));
        let eps = Tensor::new(vec![3], vec![0.3, 0.1, -0.7]);
        let early = forward_noise(&z0, 1, &eps, &s).unwrap();
        assert!(rel(&early, &z0) < 1e-2);
        let z = estimate_z0(&zt, &Tensor::zeros(&[3]), 50, &s).unwrap();
        assert!(rel(&z, &z0) < 1e-12);
    }

    #[test]
    fn terminal_step_adds_no_noise_and_small_beta_is_continuous() {
        let s = build_schedule(5, 1e-9, 1e-9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = Tensor::new(vec![4], vec![0.1, 0.2, -0.3, 1.0]);
        let eps = Tensor::new(vec![4], vec![0.5; 4]);
        let a = reverse_step(&z, &eps, 1, &s, SamplerMode::Ancestral, &mut rng).unwrap();
        let b = reverse_step(&z, &eps, 1, &s, SamplerMode::Ancestral, &mut rng).unwrap();
        assert_eq!(a, b);
        let c = reverse_step(&z, &eps, 3, &s, SamplerMode::Ancestral, &mut rng).unwrap();
        assert!(rel(&c, &z) < 1e-3);
        assert!(reverse_step(&z, &eps, 0, &s, SamplerMode::Ancestral, &mut rng).is_err());
    }

    #[test]
    fn oracle_denoiser_recovers_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for steps in [1, 10, 200] {
            let s = build_schedule(steps, 1e-4, 0.02).unwrap();
            let target = standard_normal(&mut rng, &[4, 4, 4, 4]);
            let mut z = standard_normal(&mut rng, &[4, 4, 4, 4]);
            for t in (1..=steps).rev() {
                let ab = s.alpha_bar(t).unwrap();
                let eps = Tensor::new(
                    z.shape.clone(),
                    z.data
                        .iter()
                        .zip(&target.data)
                        .map(|(zt, z0)| (zt - ab.sqrt() * z0) / (1.0 - ab).sqrt())
                        .collect(),
                );
                z = reverse_step(&z, &eps, t, &s, SamplerMode::Deterministic, &mut rng).unwrap();
            }
            assert!(rel(&z, &target) < 1e-3, "T={steps}: {}", rel(&z, &target));
        }
    }

    #[test]
    fn zero_estimate_loss_is_unit_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let eps = standard_normal(&mut rng, &[10_000]);
        let l = noise_mse(&eps, &Tensor::zeros(&[10_000])).unwrap();
        assert!((l - 1.0).abs() < 0.05, "{l}");
        assert_eq!(noise_mse(&eps, &eps).unwrap(), 0.0);
    }

    proptest! {
        #[test]
        fn inversion_round_trip(seed in 0u64..1000, steps in prop::sample::select(vec![1usize, 10, 200]), tf in 0.0f64..1.0) {
            let s = build_schedule(steps, 1e-4, 0.02).unwrap();
            let t = 1 + ((steps - 1) as f64 * tf) as usize;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z0 = standard_normal(&mut rng, &[2, 2, 2, 2]);
            let eps = standard_normal(&mut rng, &[2, 2, 2, 2]);
            let zt = forward_noise(&z0, t, &eps, &s).unwrap();
            let back = estimate_z0(&zt, &eps, t, &s).unwrap();
            prop_assert!(rel(&back, &z0) < 1e-6);
        }
    }
}
