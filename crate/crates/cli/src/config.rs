//! Single-file run configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tumorsynth::autoencoder::AeConfig;
use tumorsynth::dataset::PhantomSetConfig;
use tumorsynth::diffusion::{DenoiserConfig, SamplerMode};
use tumorsynth::radiomics::DiversityMode;
use tumorsynth::targeted_aug::{AugmentConfig, MiningConfig};
use tumorsynth::text::{DescriptorSet, HashingEncoder};
use tumorsynth::training::DiffusionTrainConfig;
use tumorsynth::turing::SizeBucket;

use crate::CliError;

/// Overrides the configured output directory.
pub const OUTPUT_DIR_ENV: &str = "TUMORSYNTH_OUTPUT_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub phantom: PhantomSetConfig,
    pub autoencoder: AutoencoderSection,
    pub diffusion: DiffusionSection,
    pub contrastive: ContrastiveSection,
    pub synthesis: SynthesisSection,
    pub augmentation: AugmentationSection,
    pub radiomics: RadiomicsSection,
    pub turing: TuringSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AutoencoderSection {
    pub steps: usize,
    pub model: AeConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionSection {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub text_aug: bool,
    pub grad_clip: f64,
    pub model: DenoiserConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContrastiveSection {
    pub lambda_c: f64,
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthesisSection {
    /// Syntheses per organ; masks and reports are taken from the phantom items in order.
    pub per_organ: usize,
    pub sampler: SamplerMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationSection {
    /// Evaluation phantoms rendered per (organ, profile) for mining.
    pub cases_per_profile: usize,
    pub detector_delta: f64,
    pub per_case: usize,
    pub magnify: f64,
    pub mining: MiningConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RadiomicsSection {
    pub mode: DiversityMode,
    pub samples_per_set: usize,
    /// Descriptor profile of the fixed-descriptor set.
    pub fixed_profile: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuringSection {
    pub per_cell: usize,
    pub buckets: Vec<SizeBucket>,
    pub method_name: String,
}

fn invalid(section: &str, e: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("[{section}] {e}"))
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV) {
            cfg.output_dir = dir.into();
        }
        Ok(cfg)
    }

    /// Checks every section against the owning module's contracts.
    pub fn validate(&self) -> Result<(), CliError> {
        if self.output_dir.as_os_str().is_empty() {
            return Err(CliError::Config("output_dir is empty".into()));
        }
        self.phantom.validate().map_err(|e| invalid("phantom", e))?;
        let ae = &self.autoencoder.model;
        ae.validate().map_err(|e| invalid("autoencoder", e))?;
        if !self.phantom.patch.is_multiple_of(ae.downsample) {
            return Err(invalid(
                "autoencoder",
                format!("downsample {} does not divide the patch {}", ae.downsample, self.phantom.patch),
            ));
        }
        if self.autoencoder.steps == 0 {
            return Err(invalid("autoencoder", "steps must be positive"));
        }
        let d = &self.diffusion;
        d.model.validate().map_err(|e| invalid("diffusion", e))?;
        if d.model.latent_channels != ae.latent_channels {
            return Err(invalid("diffusion", "model.latent_channels must match the autoencoder"));
        }
        let latent = self.phantom.patch / ae.downsample;
        if !latent.is_multiple_of(2) {
            return Err(invalid("diffusion", format!("latent side {latent} must be even for the bottleneck")));
        }
        HashingEncoder::new(d.model.text_dim).map_err(|e| invalid("diffusion", e))?;
        if d.steps == 0 {
            return Err(invalid("diffusion", "steps must be positive"));
        }
        self.train_config().validate().map_err(|e| invalid("contrastive", e))?;
        if self.synthesis.per_organ == 0 {
            return Err(invalid("synthesis", "per_organ must be positive"));
        }
        let a = &self.augmentation;
        if a.cases_per_profile == 0 || !(a.detector_delta > 0.0) || !(a.magnify >= 1.0) {
            return Err(invalid(
                "augmentation",
                "cases_per_profile must be positive, detector_delta > 0 and magnify >= 1",
            ));
        }
        if !a.mining.patch.as_array().iter().all(|n| n % ae.downsample == 0 && (n / ae.downsample).is_multiple_of(2)) {
            return Err(invalid("augmentation", "mining.patch must map to an even latent grid"));
        }
        let r = &self.radiomics;
        if r.samples_per_set < 2 {
            return Err(invalid("radiomics", "samples_per_set must be at least 2"));
        }
        let terms: Vec<&str> = r.fixed_profile.iter().map(String::as_str).collect();
        for o in &self.phantom.organs {
            DescriptorSet::from_terms("fixed", *o, &terms).map_err(|e| invalid("radiomics", e))?;
        }
        let t = &self.turing;
        if t.per_cell == 0 || t.buckets.is_empty() || t.method_name.trim().is_empty() || t.method_name == "real" {
            return Err(invalid(
                "turing",
                "per_cell must be positive, buckets non-empty and method_name non-empty and not `real`",
            ));
        }
        Ok(())
    }

    pub fn train_config(&self) -> DiffusionTrainConfig {
        let d = &self.diffusion;
        DiffusionTrainConfig {
            steps: d.steps,
            batch_size: d.batch_size,
            lr: d.lr,
            lambda_c: self.contrastive.lambda_c,
            margin: self.contrastive.margin,
            text_aug: d.text_aug,
            grad_clip: d.grad_clip,
            seed: self.seed.wrapping_add(3),
        }
    }

    pub fn augment_config(&self) -> AugmentConfig {
        AugmentConfig {
            per_case: self.augmentation.per_case,
            magnify: self.augmentation.magnify,
            seed: self.seed.wrapping_add(5),
        }
    }

    /// Canonical JSON used for hashing and echoed into manifests.
    pub fn effective(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        tumorsynth::digest::sha256_hex(&[self.effective().to_string().as_bytes()])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const REFERENCE: &str = include_str!("../../../configs/reference.toml");

    #[test]
    fn reference_config_is_valid() {
        let cfg = RunConfig::from_toml(REFERENCE).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.train_config().lambda_c, 0.1);
        assert_eq!(cfg.hash(), RunConfig::from_toml(REFERENCE).unwrap().hash());
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        let extra = format!("{REFERENCE}\nbogus = 1\n");
        assert!(matches!(RunConfig::from_toml(&extra), Err(CliError::Config(_))));
        let nested = REFERENCE.replace("[contrastive]", "[contrastive]\nweight = 2.0");
        assert!(matches!(RunConfig::from_toml(&nested), Err(CliError::Config(_))));

        let mut cfg = RunConfig::from_toml(REFERENCE).unwrap();
        cfg.contrastive.margin = 0.0;
        assert!(matches!(cfg.validate(), Err(CliError::Config(m)) if m.contains("[contrastive]")));
        let mut cfg = RunConfig::from_toml(REFERENCE).unwrap();
        cfg.diffusion.model.latent_channels += 1;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::from_toml(REFERENCE).unwrap();
        cfg.radiomics.fixed_profile = vec!["glowing".into()];
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::from_toml(REFERENCE).unwrap();
        cfg.turing.method_name = "real".into();
        assert!(cfg.validate().is_err());
    }
}
