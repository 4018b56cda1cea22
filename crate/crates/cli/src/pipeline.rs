//! Subcommand bodies. Every stage owns one directory under the output
//! directory and reads its inputs from earlier stages.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};
use tumorsynth::autoencoder::{reconstruction_mse, train_autoencoder, Autoencoder};
use tumorsynth::dataset::{evaluation_phantoms, healthy_patches, phantom_training_items, PhantomSetConfig};
use tumorsynth::diffusion::{prepare_samples, Denoiser, Provenance, Synthesizer, TrainingItem};
use tumorsynth::nn::Checkpoint;
use tumorsynth::radiomics::{compare_methods, render_table, MethodSample};
use tumorsynth::targeted_aug::{
    augment, intensity_detector, mine_failures, write_augmented, FailureKind, ManifestRecord,
};
use tumorsynth::text::{
    extract_descriptors, generate_variants, DescriptorSet, HashingEncoder, LmClient, RadiologyReport,
    ReportVariantSet, Vocabulary,
};
use tumorsynth::training::train_diffusion;
use tumorsynth::turing::{assemble_case_set_in, CandidateCase, Source, TuringCase};
use tumorsynth::volume::phantom::background_mask;
use tumorsynth::volume::{
    load_mask, load_volume, save_mask, save_volume, TumorMask, Volume, VolumeFormat, HU_MAX, HU_MIN,
};
use tumorsynth::Organ;

use crate::manifest::{load_manifest, Manifest, Stage};
use crate::{CliError, RunConfig};

pub const PHANTOMS: &str = "phantoms";
pub const AE: &str = "ae";
pub const DIFFUSION: &str = "diffusion";
pub const SYNTH: &str = "synth";
pub const AUGMENT: &str = "augment";
pub const RADIOMICS: &str = "radiomics";
pub const TURING: &str = "turing";
/// Judgment logs live outside the stage directory so re-preparing keeps them.
pub const TURING_LOG_DIR: &str = "turing-log";

const AE_CKPT: &str = "autoencoder.ckpt";
const DENOISER_CKPT: &str = "denoiser.ckpt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub id: String,
    pub volume: PathBuf,
    pub mask: PathBuf,
    pub descriptor: DescriptorSet,
    pub variants: ReportVariantSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealthyRecord {
    pub id: String,
    pub organ: Organ,
    pub volume: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthRecord {
    pub id: String,
    pub organ: Organ,
    pub volume: PathBuf,
    pub mask: PathBuf,
    /// Phantom item whose mask was reused.
    pub mask_source: String,
    pub healthy_source: String,
    pub provenance: Provenance,
}

fn stage_dir(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.output_dir.join(name)
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| CliError::Runtime(format!("{} line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}

/// Loads a stored patch that was written after preprocessing.
fn load_normalized(path: &Path) -> Result<Volume, CliError> {
    let v = load_volume(path, VolumeFormat::Native)?;
    let (dims, spacing) = (v.dims(), v.spacing());
    Ok(Volume::new(v.into_data(), dims, spacing, true)?)
}

fn to_hu(v: &Volume) -> Result<Volume, CliError> {
    let data = v
        .data()
        .iter()
        .map(|&x| (HU_MIN + x as f64 * (HU_MAX - HU_MIN)) as f32)
        .collect();
    Ok(Volume::new(data, v.dims(), v.spacing(), false)?)
}

fn mkdir(p: &Path) -> Result<(), CliError> {
    fs::create_dir_all(p).map_err(|e| CliError::io(p, e))
}

pub fn phantom_gen(cfg: &RunConfig) -> Result<Manifest, CliError> {
    let client = LmClient::mock();
    let mut st = Stage::begin(stage_dir(cfg, PHANTOMS), "phantom-gen")?;
    mkdir(&st.path("items"))?;
    mkdir(&st.path("healthy"))?;
    let items = phantom_training_items(&cfg.phantom, true, &client, cfg.seed)?;
    let mut records = Vec::with_capacity(items.len());
    for it in &items {
        let volume = PathBuf::from(format!("items/{}.hdr", it.id));
        let mask = PathBuf::from(format!("items/{}_mask.hdr", it.id));
        save_volume(&it.volume, &st.path(&volume))?;
        save_mask(&it.mask, it.volume.spacing(), &st.path(&mask))?;
        records.push(ItemRecord {
            id: it.id.clone(),
            volume,
            mask,
            descriptor: it.descriptor.clone(),
            variants: it.variants.clone(),
        });
    }
    st.write_jsonl("items.jsonl", &records)?;
    let mut healthy = Vec::new();
    for (oi, &organ) in cfg.phantom.organs.iter().enumerate() {
        let seed = cfg.seed.wrapping_add(100 + oi as u64);
        for (k, v) in healthy_patches(&cfg.phantom, organ, cfg.phantom.healthy_per_organ, seed)?
            .iter()
            .enumerate()
        {
            let id = format!("{organ}-h{k}");
            let volume = PathBuf::from(format!("healthy/{id}.hdr"));
            save_volume(v, &st.path(&volume))?;
            healthy.push(HealthyRecord { id, organ, volume });
        }
    }
    st.write_jsonl("healthy.jsonl", &healthy)?;
    st.metric("items", items.len());
    st.metric("healthy", healthy.len());
    info!("rendered {} tumor items and {} healthy patches", items.len(), healthy.len());
    st.finish(cfg)
}

pub fn load_items(cfg: &RunConfig) -> Result<Vec<TrainingItem>, CliError> {
    let dir = stage_dir(cfg, PHANTOMS);
    load_manifest(&dir)?;
    read_jsonl::<ItemRecord>(&dir.join("items.jsonl"))?
        .into_iter()
        .map(|r| {
            let (mask, _) = load_mask(&dir.join(&r.mask))?;
            Ok(TrainingItem {
                id: r.id,
                volume: load_normalized(&dir.join(&r.volume))?,
                mask,
                descriptor: r.descriptor,
                variants: r.variants,
            })
        })
        .collect()
}

pub fn load_healthy(cfg: &RunConfig) -> Result<Vec<(HealthyRecord, Volume)>, CliError> {
    let dir = stage_dir(cfg, PHANTOMS);
    load_manifest(&dir)?;
    read_jsonl::<HealthyRecord>(&dir.join("healthy.jsonl"))?
        .into_iter()
        .map(|r| {
            let v = load_normalized(&dir.join(&r.volume))?;
            Ok((r, v))
        })
        .collect()
}

pub fn load_autoencoder(cfg: &RunConfig) -> Result<Autoencoder, CliError> {
    let dir = stage_dir(cfg, AE);
    load_manifest(&dir)?;
    Ok(Autoencoder::from_checkpoint(&Checkpoint::load(&dir.join(AE_CKPT))?)?)
}

pub fn load_denoiser(cfg: &RunConfig) -> Result<Denoiser, CliError> {
    let dir = stage_dir(cfg, DIFFUSION);
    load_manifest(&dir)?;
    Ok(Denoiser::from_checkpoint(&Checkpoint::load(&dir.join(DENOISER_CKPT))?)?)
}

pub fn train_ae(cfg: &RunConfig) -> Result<Manifest, CliError> {
    let items = load_items(cfg)?;
    let healthy = load_healthy(cfg)?;
    let mut st = Stage::begin(stage_dir(cfg, AE), "train-ae")?;
    let mut data: Vec<Volume> = items.into_iter().map(|it| it.volume).collect();
    let held: Vec<Volume> = healthy.into_iter().map(|(_, v)| v).collect();
    data.extend(held.iter().cloned());
    let mut ae = Autoencoder::new(cfg.autoencoder.model.clone())?;
    let report = train_autoencoder(&mut ae, &data, cfg.autoencoder.steps)?;
    ae.checkpoint().save(&st.path(AE_CKPT))?;
    st.write_jsonl("metrics.jsonl", &report.metrics)?;
    st.metric("final_reconstruction", report.final_reconstruction(20));
    st.metric("healthy_reconstruction_mse", reconstruction_mse(&ae, &held)?);
    st.metric("training_volumes", data.len());
    st.finish(cfg)
}

/// Augmented samples from an `augment` stage, as training items.
pub fn augmented_items(
    dir: &Path,
    phantom: &PhantomSetConfig,
    client: &LmClient,
) -> Result<Vec<TrainingItem>, CliError> {
    load_manifest(dir)?;
    let mut out = Vec::new();
    for r in read_jsonl::<ManifestRecord>(&dir.join("manifest.jsonl"))? {
        let report = RadiologyReport::new(r.id.clone(), r.organ, r.report.clone())?;
        let descriptor = extract_descriptors(&report, client)?;
        if descriptor.terms.is_empty() {
            warn!("augmented sample {} has no vocabulary terms; skipped", r.id);
            continue;
        }
        let variants = generate_variants(&descriptor, phantom.variants, client, phantom.similarity_threshold)?;
        let (mask, _) = load_mask(&dir.join(&r.mask))?;
        out.push(TrainingItem {
            id: r.id,
            volume: load_normalized(&dir.join(&r.volume))?,
            mask,
            descriptor,
            variants,
        });
    }
    Ok(out)
}

/// Trains with the effective settings in `cfg`; callers apply flag overrides first.
pub fn train_diffusion_stage(cfg: &RunConfig, targeted_aug: Option<&Path>) -> Result<Manifest, CliError> {
    let ae = load_autoencoder(cfg)?;
    let mut items = load_items(cfg)?;
    let client = LmClient::mock();
    let extra = match targeted_aug {
        Some(dir) => augmented_items(dir, &cfg.phantom, &client)?,
        None => Vec::new(),
    };
    let n_extra = extra.len();
    items.extend(extra);
    let tc = cfg.train_config();
    if !tc.text_aug {
        for it in &mut items {
            it.variants = ReportVariantSet::single(it.descriptor.report_id.clone(), it.descriptor.cleaned_text.clone());
        }
    }
    let mut st = Stage::begin(stage_dir(cfg, DIFFUSION), "train-diffusion")?;
    st.flag("contrastive", if tc.lambda_c > 0.0 { "on" } else { "off" });
    st.flag("text_aug", if tc.text_aug { "on" } else { "off" });
    st.flag(
        "targeted_aug",
        targeted_aug.map(|p| p.display().to_string()).unwrap_or_else(|| "off".into()),
    );
    let encoder = HashingEncoder::new(cfg.diffusion.model.text_dim)?;
    let (samples, stats) = prepare_samples(&ae, &items, &encoder, None)?;
    let mut model = Denoiser::new(cfg.diffusion.model.clone())?;
    model.set_latent_stats(stats)?;
    let report = train_diffusion(&mut model, &samples, &tc)?;
    model.checkpoint().save(&st.path(DENOISER_CKPT))?;
    st.write_jsonl("metrics.jsonl", &report.metrics)?;
    st.metric("lambda_c", tc.lambda_c);
    st.metric("final_ldm", report.final_ldm(50));
    st.metric("samples", samples.len());
    st.metric("targeted_samples", n_extra);
    st.finish(cfg)
}

/// Item index for the k-th synthesis of an organ, cycling through profiles first.
fn item_for(k: usize, n_profiles: usize, per_profile: usize) -> usize {
    (k % n_profiles) * per_profile + (k / n_profiles) % per_profile
}

pub fn synthesize(cfg: &RunConfig, text: Option<&str>) -> Result<Manifest, CliError> {
    let ae = load_autoencoder(cfg)?;
    let denoiser = load_denoiser(cfg)?;
    let items = load_items(cfg)?;
    let healthy = load_healthy(cfg)?;
    let synth = Synthesizer::new(&ae, &denoiser)?.with_mode(cfg.synthesis.sampler);
    let mut st = Stage::begin(stage_dir(cfg, SYNTH), "synthesize")?;
    st.flag("text", text.unwrap_or("from items"));
    mkdir(&st.path("volumes"))?;
    let mut records = Vec::new();
    for &organ in &cfg.phantom.organs {
        let its: Vec<&TrainingItem> = items.iter().filter(|it| it.descriptor.organ == organ).collect();
        let hs: Vec<&(HealthyRecord, Volume)> = healthy.iter().filter(|(r, _)| r.organ == organ).collect();
        if its.is_empty() || hs.is_empty() {
            return Err(tumorsynth::Error::InsufficientPool(format!("no phantom items or healthy patches for {organ}")).into());
        }
        let per_profile = its.len() / cfg.phantom.profiles.len();
        for k in 0..cfg.synthesis.per_organ {
            let it = its[item_for(k, cfg.phantom.profiles.len(), per_profile.max(1)).min(its.len() - 1)];
            let (hr, hv) = hs[k % hs.len()];
            let prompt = text.unwrap_or(&it.descriptor.cleaned_text);
            let seed = cfg.seed.wrapping_mul(1_000_003).wrapping_add(records.len() as u64);
            let out = synth.synthesize(hv, &it.mask, prompt, seed)?;
            let id = format!("{organ}-s{k}");
            let volume = PathBuf::from(format!("volumes/{id}.hdr"));
            let mask = PathBuf::from(format!("volumes/{id}_mask.hdr"));
            save_volume(&out.volume, &st.path(&volume))?;
            save_mask(&it.mask, out.volume.spacing(), &st.path(&mask))?;
            info!("synthesized {id}: {prompt}");
            records.push(SynthRecord {
                id,
                organ,
                volume,
                mask,
                mask_source: it.id.clone(),
                healthy_source: hr.id.clone(),
                provenance: out.provenance,
            });
        }
    }
    st.write_jsonl("synth.jsonl", &records)?;
    st.metric("syntheses", records.len());
    st.finish(cfg)
}

pub fn load_synth(cfg: &RunConfig) -> Result<Vec<(SynthRecord, Volume, TumorMask)>, CliError> {
    let dir = stage_dir(cfg, SYNTH);
    load_manifest(&dir)?;
    read_jsonl::<SynthRecord>(&dir.join("synth.jsonl"))?
        .into_iter()
        .map(|r| {
            let v = load_normalized(&dir.join(&r.volume))?;
            let (m, _) = load_mask(&dir.join(&r.mask))?;
            Ok((r, v, m))
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
struct FailureRecord {
    id: String,
    kind: FailureKind,
    organ: Organ,
    source_id: String,
    voxels: usize,
}

pub fn augment_stage(cfg: &RunConfig) -> Result<Manifest, CliError> {
    let ae = load_autoencoder(cfg)?;
    let denoiser = load_denoiser(cfg)?;
    let healthy = load_healthy(cfg)?;
    let synth = Synthesizer::new(&ae, &denoiser)?.with_mode(cfg.synthesis.sampler);
    let a = &cfg.augmentation;
    let mut st = Stage::begin(stage_dir(cfg, AUGMENT), "augment")?;
    let cases = evaluation_phantoms(&cfg.phantom, a.cases_per_profile, cfg.seed.wrapping_add(7))?;
    let mut failures = Vec::new();
    for c in &cases {
        let dims = c.volume.dims();
        let region = background_mask(dims, &TumorMask::empty(dims)).union(&c.mask)?;
        let pred = intensity_detector(&c.volume, &region, a.detector_delta)?;
        failures.extend(mine_failures(&pred, &c.mask, &c.volume, c.organ, &c.id, &a.mining)?);
    }
    let client = LmClient::mock();
    let vocab = Vocabulary::builtin();
    let mut samples = Vec::new();
    for &organ in &cfg.phantom.organs {
        let fc: Vec<_> = failures.iter().filter(|f| f.organ == organ).cloned().collect();
        let pool: Vec<Volume> = healthy.iter().filter(|(r, _)| r.organ == organ).map(|(_, v)| v.clone()).collect();
        samples.extend(augment(&fc, &pool, &synth, &client, vocab, &cfg.augment_config())?);
    }
    write_augmented(&st.dir, &samples)?;
    let records: Vec<FailureRecord> = failures
        .iter()
        .map(|f| FailureRecord {
            id: f.id.clone(),
            kind: f.kind,
            organ: f.organ,
            source_id: f.source_id.clone(),
            voxels: f.voxels,
        })
        .collect();
    st.write_jsonl("failures.jsonl", &records)?;
    let count = |k: FailureKind| failures.iter().filter(|f| f.kind == k).count();
    st.flag("kinds", serde_json::to_value(a.mining.kinds).expect("serializes").as_str().unwrap_or_default());
    st.metric("evaluation_phantoms", cases.len());
    st.metric("false_positives", count(FailureKind::FalsePositive));
    st.metric("false_negatives", count(FailureKind::FalseNegative));
    st.metric("augmented", samples.len());
    st.finish(cfg)
}

/// Phantom tumor patches for one organ over the given profiles.
fn phantom_set(
    cfg: &RunConfig,
    organ: Organ,
    profiles: Vec<Vec<String>>,
    n: usize,
    seed: u64,
) -> Result<Vec<MethodSample>, CliError> {
    let pc = PhantomSetConfig {
        organs: vec![organ],
        per_profile: n.div_ceil(profiles.len()),
        profiles,
        ..cfg.phantom.clone()
    };
    let items = phantom_training_items(&pc, false, &LmClient::mock(), seed)?;
    // round-robin over profiles so truncation stays balanced
    let per = pc.per_profile;
    let np = pc.profiles.len();
    Ok((0..n)
        .map(|k| &items[item_for(k, np, per)])
        .map(|it| MethodSample {
            id: it.id.clone(),
            organ,
            volume: it.volume.clone(),
            mask: it.mask.clone(),
        })
        .collect())
}

pub fn radiomics_compare(cfg: &RunConfig) -> Result<Manifest, CliError> {
    let r = &cfg.radiomics;
    let mut sets: BTreeMap<String, Vec<MethodSample>> = BTreeMap::new();
    for (oi, &organ) in cfg.phantom.organs.iter().enumerate() {
        let seed = cfg.seed.wrapping_add(200 + 2 * oi as u64);
        sets.entry("varied".into())
            .or_default()
            .extend(phantom_set(cfg, organ, cfg.phantom.profiles.clone(), r.samples_per_set, seed)?);
        sets.entry("fixed".into())
            .or_default()
            .extend(phantom_set(cfg, organ, vec![r.fixed_profile.clone()], r.samples_per_set, seed + 1)?);
    }
    let synth_dir = stage_dir(cfg, SYNTH);
    let with_synth = synth_dir.join(crate::manifest::MANIFEST_FILE).exists() && cfg.synthesis.per_organ >= 2;
    if with_synth {
        let samples = load_synth(cfg)?
            .into_iter()
            .map(|(rec, volume, mask)| MethodSample {
                id: rec.id,
                organ: rec.organ,
                volume,
                mask,
            })
            .collect();
        sets.insert(cfg.turing.method_name.clone(), samples);
    }
    let reports = compare_methods(&sets, r.mode)?;
    let mut st = Stage::begin(stage_dir(cfg, RADIOMICS), "radiomics-compare")?;
    st.flag("synthesized_set", with_synth);
    st.write("table.tsv", render_table(&reports))?;
    st.write_json("reports.json", &reports)?;
    for rep in &reports {
        let organ = rep.organ.map(|o| o.to_string()).unwrap_or_default();
        st.metric(&format!("mv/{}/{organ}", rep.method_name), rep.mv);
        st.metric(&format!("sd/{}/{organ}", rep.method_name), rep.sd);
    }
    st.finish(cfg)
}

/// Assembles the blinded case set and writes HU copies of the chosen cases.
/// Case paths in the result are relative to the output directory.
pub fn turing_prepare(cfg: &RunConfig) -> Result<(Manifest, Vec<TuringCase>), CliError> {
    let items = load_items(cfg)?;
    let synth = load_synth(cfg)?;
    let phantoms = stage_dir(cfg, PHANTOMS);
    let mut pool = Vec::new();
    for it in &items {
        pool.push(CandidateCase {
            id: it.id.clone(),
            organ: it.descriptor.organ,
            source: Source::Real,
            volume_path: phantoms.join(format!("items/{}.hdr", it.id)),
            mask_path: phantoms.join(format!("items/{}_mask.hdr", it.id)),
            report_text: it.descriptor.cleaned_text.clone(),
            diameter_mm: it.mask.equivalent_diameter_mm(it.volume.spacing()),
        });
    }
    let synth_root = stage_dir(cfg, SYNTH);
    for (rec, v, m) in &synth {
        pool.push(CandidateCase {
            id: rec.id.clone(),
            organ: rec.organ,
            source: Source::Method(cfg.turing.method_name.clone()),
            volume_path: synth_root.join(&rec.volume),
            mask_path: synth_root.join(&rec.mask),
            report_text: rec.provenance.text.clone(),
            diameter_mm: m.equivalent_diameter_mm(v.spacing()),
        });
    }
    let t = &cfg.turing;
    let sources = [Source::Real, Source::Method(t.method_name.clone())];
    let mut cases = assemble_case_set_in(&pool, &sources, &t.buckets, t.per_cell, cfg.seed)?;
    let mut st = Stage::begin(stage_dir(cfg, TURING), "turing-serve")?;
    mkdir(&st.path("cases"))?;
    for c in &mut cases {
        let v = load_normalized(&c.volume_path)?;
        let (m, spacing) = load_mask(&c.mask_path)?;
        let volume = PathBuf::from(format!("cases/{}.hdr", c.case_id));
        let mask = PathBuf::from(format!("cases/{}_mask.hdr", c.case_id));
        save_volume(&to_hu(&v)?, &st.path(&volume))?;
        save_mask(&m, spacing, &st.path(&mask))?;
        c.volume_path = Path::new(TURING).join(volume);
        c.mask_path = Path::new(TURING).join(mask);
    }
    st.write_json("cases.json", &cases)?;
    st.metric("cases", cases.len());
    Ok((st.finish(cfg)?, cases))
}

/// Append-only judgment log for this configuration's case set.
pub fn turing_log_path(cfg: &RunConfig) -> PathBuf {
    cfg.output_dir
        .join(TURING_LOG_DIR)
        .join(format!("{}.jsonl", &cfg.hash()[..16]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn item_order_cycles_profiles() {
        let idx: Vec<usize> = (0..6).map(|k| item_for(k, 3, 2)).collect();
        assert_eq!(idx, vec![0, 2, 4, 1, 3, 5]);
        assert_eq!(item_for(6, 3, 2), 0);
    }
}
