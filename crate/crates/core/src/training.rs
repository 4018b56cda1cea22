//! Denoiser training loop: noise-prediction loss plus the optional
//! contrastive term.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::contrastive::{sample_triplet, total_loss_graph, TripletDraw, DEFAULT_LAMBDA, DEFAULT_MARGIN};
use crate::diffusion::{Denoiser, LatentSample, LdmDraw};
use crate::error::{Error, Result};
use crate::nn::{Adam, Graph};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Weight of the contrastive term; 0 disables it.
    pub lambda_c: f64,
    pub margin: f64,
    /// When false only the first report variant of every sample is used.
    pub text_aug: bool,
    /// Clip on the global gradient norm; 0 disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for DiffusionTrainConfig {
    fn default() -> Self {
        DiffusionTrainConfig {
            steps: 1000,
            batch_size: 4,
            lr: 1e-4,
            lambda_c: DEFAULT_LAMBDA,
            margin: DEFAULT_MARGIN,
            text_aug: true,
            grad_clip: 1.0,
            seed: 0,
        }
    }
}

impl DiffusionTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Invalid("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.lambda_c >= 0.0) || !(self.margin > 0.0) || !(self.grad_clip >= 0.0) {
            return Err(Error::Invalid("lr and margin must be positive, lambda_c and grad_clip non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiffusionStepMetrics {
    pub step: usize,
    pub total: f64,
    pub ldm: f64,
    pub same: f64,
    pub different: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DiffusionTrainReport {
    pub metrics: Vec<DiffusionStepMetrics>,
}

impl DiffusionTrainReport {
    /// Mean noise-prediction loss over the last `window` steps.
    pub fn final_ldm(&self, window: usize) -> Option<f64> {
        let n = self.metrics.len().min(window);
        (n > 0).then(|| self.metrics[self.metrics.len() - n..].iter().map(|m| m.ldm).sum::<f64>() / n as f64)
    }
}

/// Trains in place. Samples must already be standardized with the model's latent stats.
pub fn train_diffusion(
    model: &mut Denoiser,
    samples: &[LatentSample],
    cfg: &DiffusionTrainConfig,
) -> Result<DiffusionTrainReport> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Invalid("diffusion training set is empty".into()));
    }
    let schedule = model.config().schedule.build()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xd1ff_5eed);
    let mut opt = Adam::new(model.params(), cfg.lr);
    let mut report = DiffusionTrainReport::default();
    let use_triplets = cfg.lambda_c > 0.0;
    if use_triplets {
        // fail early when no triplet can be formed
        sample_triplet(samples, &[], &mut rng)?;
    }

    for step in 0..cfg.steps {
        let batch: Vec<(usize, LdmDraw)> = (0..cfg.batch_size)
            .map(|_| {
                let i = rng.random_range(0..samples.len());
                let mut d = LdmDraw::sample(&samples[i], &schedule, &mut rng);
                if !cfg.text_aug {
                    d.variant = 0;
                }
                (i, d)
            })
            .collect();
        let triplet = if use_triplets {
            let mut t = sample_triplet(samples, &[], &mut rng)?;
            if !cfg.text_aug {
                t.anchor.variant = 0;
                t.positive.variant = 0;
                t.negative.variant = 0;
            }
            Some((t, TripletDraw::sample(samples, &schedule, &mut rng)))
        } else {
            None
        };

        let mut g = Graph::new();
        let p = model.params().bind(&mut g, true);
        let (loss, parts) = total_loss_graph(
            &mut g,
            &p,
            model,
            samples,
            &batch,
            triplet.as_ref().map(|(t, d)| (t, d)),
            &schedule,
            cfg.lambda_c,
            cfg.margin,
        )?;
        if !parts.total.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("loss {} (ldm {})", parts.total, parts.ldm),
            });
        }
        let mut grads = p.grads(model.params(), &g.backward(loss));
        if cfg.grad_clip > 0.0 {
            let norm = grads.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
            if norm > cfg.grad_clip {
                let s = cfg.grad_clip / norm;
                grads.iter_mut().flatten().for_each(|v| *v *= s);
            }
        }
        opt.update(model.params_mut(), &grads);
        if !model.params().all_finite() {
            return Err(Error::Diverged {
                step,
                detail: "non-finite parameters after update".into(),
            });
        }
        report.metrics.push(DiffusionStepMetrics {
            step,
            total: parts.total,
            ldm: parts.ldm,
            same: parts.same,
            different: parts.different,
        });
    }
    Ok(report)
}
