//! Failure-driven augmentation: mine detection errors from prediction/truth
//! mask pairs, describe each miss in report language and synthesize new
//! training examples for it.

use std::collections::HashSet;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{Provenance, Synthesizer};
use crate::error::{Error, Result};
use crate::organ::Organ;
use crate::text::{Appearance, GeneratePayload, LmClient, LmRequest, Role, Vocabulary, GENERATE_PROMPT};
use crate::volume::{
    boundary_profile, check_aligned, crop_patch, crop_patch_at, magnify_mask, preprocess, save_mask, save_volume,
    Dims, TumorMask, Volume,
};

pub const DEFAULT_MIN_VOXELS: usize = 8;
pub const DEFAULT_MAGNIFY: f64 = 1.5;
/// Frame "a {d} lesion is seen in the {o}".
const DESCRIPTION_FRAME: usize = 3;

/// Appearance thresholds in normalized intensity units.
pub const ATTENUATION_DELTA: f64 = 0.15;
pub const CYSTIC_MAX_SD: f64 = 0.02;
pub const HETEROGENEOUS_MIN_SD: f64 = 0.08;
pub const HOMOGENEOUS_MAX_SD: f64 = 0.04;
pub const ILL_DEFINED_MIN_WIDTH: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    FalsePositive,
    FalseNegative,
}

impl FailureKind {
    fn tag(self) -> &'static str {
        match self {
            FailureKind::FalsePositive => "fp",
            FailureKind::FalseNegative => "fn",
        }
    }
}

/// Which failure kinds to keep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KindFilter {
    #[default]
    Both,
    FalsePositive,
    FalseNegative,
}

impl KindFilter {
    pub fn keeps(self, k: FailureKind) -> bool {
        match self {
            KindFilter::Both => true,
            KindFilter::FalsePositive => k == FailureKind::FalsePositive,
            KindFilter::FalseNegative => k == FailureKind::FalseNegative,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FailureCase {
    pub id: String,
    pub kind: FailureKind,
    pub organ: Organ,
    /// Patch cropped around the component.
    pub sub_volume: Volume,
    pub mask: TumorMask,
    pub source_id: String,
    /// Component size before cropping.
    pub voxels: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MiningConfig {
    pub min_voxels: usize,
    pub patch: Dims,
    pub kinds: KindFilter,
}

impl Default for MiningConfig {
    fn default() -> Self {
        MiningConfig {
            min_voxels: DEFAULT_MIN_VOXELS,
            patch: Dims::cube(32),
            kinds: KindFilter::Both,
        }
    }
}

/// 26-connected components, each as sorted flat indices, ordered by first voxel.
pub fn connected_components(m: &TumorMask) -> Vec<Vec<usize>> {
    let dims = m.dims();
    let mut seen = vec![false; dims.len()];
    let mut out = Vec::new();
    for start in m.indices() {
        if seen[start] {
            continue;
        }
        seen[start] = true;
        let mut comp = vec![start];
        let mut stack = vec![start];
        while let Some(i) = stack.pop() {
            for j in dims.neighbors26(i) {
                if m.data()[j] != 0 && !seen[j] {
                    seen[j] = true;
                    comp.push(j);
                    stack.push(j);
                }
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

/// False positives are components of `pred \ truth`, false negatives
/// components of `truth \ pred`; components below `min_voxels` are dropped.
pub fn mine_failures(
    pred: &TumorMask,
    truth: &TumorMask,
    volume: &Volume,
    organ: Organ,
    source_id: &str,
    cfg: &MiningConfig,
) -> Result<Vec<FailureCase>> {
    check_aligned(volume, pred)?;
    check_aligned(volume, truth)?;
    let patch = Dims::from_array(std::array::from_fn(|a| {
        cfg.patch.as_array()[a].min(volume.dims().as_array()[a])
    }));
    let mut out = Vec::new();
    for (kind, diff) in [
        (FailureKind::FalsePositive, pred.difference(truth)?),
        (FailureKind::FalseNegative, truth.difference(pred)?),
    ] {
        if !cfg.kinds.keeps(kind) {
            continue;
        }
        for comp in connected_components(&diff) {
            if comp.len() < cfg.min_voxels.max(1) {
                continue;
            }
            let m = TumorMask::from_indices(volume.dims(), comp.iter().copied());
            let (sub_volume, mask) = crop_patch(volume, &m, patch)?;
            out.push(FailureCase {
                id: format!("{source_id}-{}-{}", kind.tag(), out.len()),
                kind,
                organ,
                sub_volume,
                mask,
                source_id: source_id.to_owned(),
                voxels: comp.len(),
            });
        }
    }
    Ok(out)
}

/// Baseline detector for mining on phantoms: voxels of `region` whose value
/// differs from the region median by more than `delta`. Components that do
/// not survive one opening step are dropped as noise; the others are kept whole.
pub fn intensity_detector(v: &Volume, region: &TumorMask, delta: f64) -> Result<TumorMask> {
    check_aligned(v, region)?;
    if region.is_empty() {
        return Err(Error::EmptyMask("detector region is empty".into()));
    }
    let mut vals: Vec<f32> = region.indices().map(|i| v.data()[i]).collect();
    vals.sort_unstable_by(f32::total_cmp);
    let median = vals[vals.len() / 2] as f64;
    let raw = TumorMask::from_indices(
        v.dims(),
        region.indices().filter(|&i| (v.data()[i] as f64 - median).abs() > delta),
    );
    let core = raw.eroded();
    let keep = connected_components(&raw)
        .into_iter()
        .filter(|c| c.iter().any(|&i| core.data()[i] != 0))
        .flatten();
    Ok(TumorMask::from_indices(v.dims(), keep))
}

/// Region statistics behind a description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionMeasurement {
    pub contrast: f64,
    pub sd: f64,
    pub edge_width: Option<usize>,
    pub appearances: Vec<Appearance>,
}

/// Maps intensity statistics of a region onto appearance classes.
pub fn measure_region(v: &Volume, m: &TumorMask) -> Result<RegionMeasurement> {
    let v = if v.is_normalized() { v.clone() } else { preprocess(v)? };
    let p = boundary_profile(&v, m)?;
    let contrast = p.contrast();
    let sharp = p.transition_width.is_some_and(|w| w <= 1);
    let mut looks = Vec::new();
    if contrast <= -ATTENUATION_DELTA {
        looks.push(Appearance::Hypodense);
    } else if contrast >= ATTENUATION_DELTA {
        looks.push(Appearance::Hyperdense);
    }
    if p.tumor_sd > HETEROGENEOUS_MIN_SD {
        looks.push(Appearance::Heterogeneous);
    } else if p.tumor_sd < CYSTIC_MAX_SD && sharp && contrast <= -ATTENUATION_DELTA {
        looks.push(Appearance::Cystic);
    } else if p.tumor_sd < HOMOGENEOUS_MAX_SD {
        looks.push(Appearance::Homogeneous);
    }
    match p.transition_width {
        Some(w) if w >= ILL_DEFINED_MIN_WIDTH && !looks.contains(&Appearance::Cystic) => {
            looks.push(Appearance::IllDefined)
        }
        Some(w) if w <= 1 => looks.push(Appearance::WellDefined),
        _ => {}
    }
    Ok(RegionMeasurement {
        contrast,
        sd: p.tumor_sd,
        edge_width: p.transition_width,
        appearances: looks,
    })
}

/// Report phrase for an appearance: the plain-language form when the organ
/// vocabulary has it, otherwise the first listed phrase.
pub fn phrase_for(vocab: &Vocabulary, organ: Organ, a: Appearance) -> Option<String> {
    let plain: &[&str] = match a {
        Appearance::Hypodense => &["hypoattenuating", "hypodense"],
        Appearance::Hyperdense => &["hyperenhancing", "hyperdense", "enhancing"],
        Appearance::Cystic => &["cystic"],
        Appearance::Heterogeneous => &["heterogeneous"],
        Appearance::Homogeneous => &["homogeneous"],
        Appearance::IllDefined => &["ill-defined"],
        Appearance::WellDefined => &["well-defined"],
    };
    plain
        .iter()
        .find_map(|p| vocab.lookup(organ, p))
        .or_else(|| vocab.preferred(organ, a))
        .map(|t| t.phrase.clone())
}

/// Measures the failure region, picks vocabulary terms and has the client
/// render the sentence.
pub fn describe_failure(fc: &FailureCase, client: &LmClient, vocab: &Vocabulary) -> Result<String> {
    if fc.mask.is_empty() {
        return Err(Error::EmptyMask(format!("failure case {} has an empty mask", fc.id)));
    }
    let meas = measure_region(&fc.sub_volume, &fc.mask)?;
    let terms: Vec<String> = meas
        .appearances
        .iter()
        .filter_map(|a| phrase_for(vocab, fc.organ, *a))
        .collect();
    let terms = if terms.is_empty() { vec!["focal".to_string()] } else { terms };
    let payload = GeneratePayload {
        organ: fc.organ,
        terms,
        index: DESCRIPTION_FRAME,
    };
    let resp = client.call(&LmRequest {
        role: Role::Generate,
        prompt: GENERATE_PROMPT.into(),
        payload: serde_json::to_string(&payload).expect("payload serializes"),
    })?;
    let text = resp.text.trim().to_owned();
    if text.is_empty() {
        return Err(Error::Transport("empty description".into()));
    }
    Ok(text)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedSample {
    pub id: String,
    pub volume: Volume,
    pub mask: TumorMask,
    pub report: String,
    pub case_id: String,
    pub kind: FailureKind,
    pub organ: Organ,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub per_case: usize,
    pub magnify: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            per_case: 1,
            magnify: DEFAULT_MAGNIFY,
            seed: 0,
        }
    }
}

fn fit_healthy(h: &Volume, dims: Dims) -> Result<Volume> {
    if h.dims() == dims {
        return Ok(h.clone());
    }
    let hd = h.dims().as_array();
    let center = hd.map(|n| n / 2);
    let (v, _) = crop_patch_at(h, &TumorMask::empty(h.dims()), center, dims)?;
    Ok(v)
}

/// Synthesizes `per_case` examples per failure case on healthy patches.
pub fn augment(
    cases: &[FailureCase],
    healthy_pool: &[Volume],
    synth: &Synthesizer<'_>,
    client: &LmClient,
    vocab: &Vocabulary,
    cfg: &AugmentConfig,
) -> Result<Vec<AugmentedSample>> {
    if cfg.per_case == 0 || cases.is_empty() {
        return Ok(Vec::new());
    }
    if healthy_pool.is_empty() {
        return Err(Error::InsufficientPool("healthy pool is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut used: HashSet<(String, u64)> = HashSet::new();
    let mut out = Vec::with_capacity(cases.len() * cfg.per_case);
    for fc in cases {
        let report = describe_failure(fc, client, vocab)?;
        let mask = magnify_mask(&fc.mask, cfg.magnify)?;
        for k in 0..cfg.per_case {
            let mut seed: u64 = rng.random();
            while !used.insert((fc.id.clone(), seed)) {
                seed = rng.random();
            }
            let h = &healthy_pool[rng.random_range(0..healthy_pool.len())];
            let h = fit_healthy(h, mask.dims())?;
            let s = synth.synthesize(&h, &mask, &report, seed)?;
            out.push(AugmentedSample {
                id: format!("{}-aug{k}", fc.id),
                volume: s.volume,
                mask: mask.clone(),
                report: report.clone(),
                case_id: fc.id.clone(),
                kind: fc.kind,
                organ: fc.organ,
                provenance: s.provenance,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub volume: PathBuf,
    pub mask: PathBuf,
    pub report: String,
    pub case_id: String,
    pub kind: FailureKind,
    pub organ: Organ,
    pub seed: u64,
    pub mask_hash: String,
    pub schedule_hash: String,
    /// Intended synthetic-to-real mixing ratio; informational only.
    pub mix_ratio: String,
}

/// Writes volumes, masks and `manifest.jsonl` under `dir`.
pub fn write_augmented(dir: &Path, samples: &[AugmentedSample]) -> Result<Vec<ManifestRecord>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut records = Vec::with_capacity(samples.len());
    for s in samples {
        let vol = PathBuf::from(format!("{}.hdr", s.id));
        let mask = PathBuf::from(format!("{}_mask.hdr", s.id));
        save_volume(&s.volume, &dir.join(&vol))?;
        save_mask(&s.mask, s.volume.spacing(), &dir.join(&mask))?;
        records.push(ManifestRecord {
            id: s.id.clone(),
            volume: vol,
            mask,
            report: s.report.clone(),
            case_id: s.case_id.clone(),
            kind: s.kind,
            organ: s.organ,
            seed: s.provenance.seed,
            mask_hash: s.provenance.mask_hash.clone(),
            schedule_hash: s.provenance.schedule_hash.clone(),
            mix_ratio: "1:1".into(),
        });
    }
    let path = dir.join("manifest.jsonl");
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    for r in &records {
        writeln!(f, "{}", serde_json::to_string(r).expect("record serializes")).map_err(|e| Error::io(&path, e))?;
    }
    Ok(records)
}
