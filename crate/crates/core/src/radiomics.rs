//! Intensity and co-occurrence texture features over tumor regions, and
//! diversity statistics over sets of feature vectors.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::organ::Organ;
use crate::volume::{check_aligned, Dims, TumorMask, Volume};

const BUILTIN: &str = include_str!("../data/radiomics_features.csv");

pub const GLCM_LEVELS: usize = 32;
pub const HISTOGRAM_BINS: usize = 32;

/// The 13 unique unit offsets (d, h, w) of the 26-neighbourhood.
pub const GLCM_OFFSETS: [[i64; 3]; 13] = [
    [0, 0, 1],
    [0, 1, 0],
    [1, 0, 0],
    [0, 1, 1],
    [0, 1, -1],
    [1, 0, 1],
    [1, 0, -1],
    [1, 1, 0],
    [1, -1, 0],
    [1, 1, 1],
    [1, 1, -1],
    [1, -1, 1],
    [1, -1, -1],
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureCategory {
    FirstOrder,
    Texture,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Formula {
    Mean,
    Median,
    Min,
    Max,
    Range,
    Variance,
    Sd,
    Skewness,
    Kurtosis,
    Energy,
    Rms,
    Entropy,
    Uniformity,
    Mad,
    Iqr,
    P10,
    P25,
    P90,
    GlcmContrast,
    GlcmCorrelation,
    GlcmDissimilarity,
    GlcmHomogeneity,
    GlcmAsm,
    GlcmEntropy,
    GlcmClusterShade,
    GlcmClusterProminence,
}

impl FromStr for Formula {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_owned()))
            .map_err(|_| Error::Format(format!("unknown feature formula `{s}`")))
    }
}

impl FromStr for FeatureCategory {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_owned()))
            .map_err(|_| Error::Format(format!("unknown feature category `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    pub category: FeatureCategory,
    pub formula: Formula,
}

/// Ordered feature list; vectors follow this order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Registry {
    pub features: Vec<FeatureSpec>,
}

impl Registry {
    pub fn builtin() -> &'static Registry {
        static REG: std::sync::OnceLock<Registry> = std::sync::OnceLock::new();
        REG.get_or_init(|| Registry::parse(BUILTIN).expect("builtin registry is valid"))
    }

    /// Parses `name,category,formula` rows; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Registry> {
        let mut features: Vec<FeatureSpec> = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            let [name, category, formula] = cols[..] else {
                return Err(Error::Format(format!("registry line {}: expected 3 columns", n + 1)));
            };
            if features.iter().any(|f| f.name == name) {
                return Err(Error::Format(format!("duplicate feature `{name}`")));
            }
            features.push(FeatureSpec {
                name: name.to_owned(),
                category: category.parse()?,
                formula: formula.parse()?,
            });
        }
        if features.is_empty() {
            return Err(Error::Format("registry lists no features".into()));
        }
        Ok(Registry { features })
    }

    pub fn names(&self) -> Vec<String> {
        self.features.iter().map(|f| f.name.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadiomicsVector {
    pub source_id: String,
    pub feature_names: Vec<String>,
    pub features: Vec<f64>,
    /// No co-occurring voxel pair inside the mask; texture features are 0.
    pub degenerate: bool,
}

fn level(x: f64, levels: usize) -> usize {
    ((x.clamp(0.0, 1.0) * levels as f64) as usize).min(levels - 1)
}

/// Linear interpolation between closest ranks on sorted data.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FirstOrder {
    pub mean: f64,
    pub median: f64,
    pub min: f64,
    pub max: f64,
    pub variance: f64,
    pub skewness: f64,
    pub kurtosis: f64,
    pub energy: f64,
    pub rms: f64,
    pub entropy: f64,
    pub uniformity: f64,
    pub mad: f64,
    pub p10: f64,
    pub p25: f64,
    pub p75: f64,
    pub p90: f64,
}

pub fn first_order(values: &[f64]) -> Result<FirstOrder> {
    if values.is_empty() {
        return Err(Error::EmptyMask("no voxels for first-order features".into()));
    }
    let n = values.len() as f64;
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mean = values.iter().sum::<f64>() / n;
    let central = |k: i32| values.iter().map(|x| (x - mean).powi(k)).sum::<f64>() / n;
    let variance = central(2);
    let (skewness, kurtosis) = if variance > 0.0 {
        (central(3) / variance.powf(1.5), central(4) / (variance * variance))
    } else {
        (0.0, 0.0)
    };
    let energy = values.iter().map(|x| x * x).sum::<f64>();
    let mut hist = [0usize; HISTOGRAM_BINS];
    values.iter().for_each(|x| hist[level(*x, HISTOGRAM_BINS)] += 1);
    let probs = hist.iter().filter(|c| **c > 0).map(|c| *c as f64 / n);
    let (entropy, uniformity) = probs.fold((0.0, 0.0), |(e, u), p| (e - p * p.log2(), u + p * p));
    Ok(FirstOrder {
        mean,
        median: percentile(&sorted, 0.5),
        min: sorted[0],
        max: sorted[sorted.len() - 1],
        variance,
        skewness,
        kurtosis,
        energy,
        rms: (energy / n).sqrt(),
        entropy,
        uniformity,
        mad: values.iter().map(|x| (x - mean).abs()).sum::<f64>() / n,
        p10: percentile(&sorted, 0.10),
        p25: percentile(&sorted, 0.25),
        p75: percentile(&sorted, 0.75),
        p90: percentile(&sorted, 0.90),
    })
}

/// Symmetric normalized co-occurrence matrix for one offset, row-major `levels x levels`.
#[derive(Debug, Clone, PartialEq)]
pub struct Glcm {
    pub levels: usize,
    pub p: Vec<f64>,
    /// Unordered voxel pairs counted.
    pub pairs: usize,
}

/// `None` when no in-mask voxel pair exists at this offset.
pub fn glcm(v: &Volume, m: &TumorMask, offset: [i64; 3]) -> Result<Option<Glcm>> {
    check_aligned(v, m)?;
    let dims: Dims = v.dims();
    let ext = dims.as_array().map(|n| n as i64);
    let mut counts = vec![0usize; GLCM_LEVELS * GLCM_LEVELS];
    let mut pairs = 0;
    for i in m.indices() {
        let c = dims.coords(i).map(|x| x as i64);
        let q: [i64; 3] = std::array::from_fn(|a| c[a] + offset[a]);
        if (0..3).any(|a| q[a] < 0 || q[a] >= ext[a]) {
            continue;
        }
        let j = dims.index(q[0] as usize, q[1] as usize, q[2] as usize);
        if m.data()[j] == 0 {
            continue;
        }
        let (a, b) = (level(v.data()[i] as f64, GLCM_LEVELS), level(v.data()[j] as f64, GLCM_LEVELS));
        counts[a * GLCM_LEVELS + b] += 1;
        counts[b * GLCM_LEVELS + a] += 1;
        pairs += 1;
    }
    if pairs == 0 {
        return Ok(None);
    }
    let total = (2 * pairs) as f64;
    Ok(Some(Glcm {
        levels: GLCM_LEVELS,
        p: counts.iter().map(|c| *c as f64 / total).collect(),
        pairs,
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GlcmFeatures {
    pub contrast: f64,
    pub correlation: f64,
    pub dissimilarity: f64,
    pub homogeneity: f64,
    pub asm: f64,
    pub entropy: f64,
    pub cluster_shade: f64,
    pub cluster_prominence: f64,
}

impl GlcmFeatures {
    fn fields_mut(&mut self) -> [&mut f64; 8] {
        [
            &mut self.contrast,
            &mut self.correlation,
            &mut self.dissimilarity,
            &mut self.homogeneity,
            &mut self.asm,
            &mut self.entropy,
            &mut self.cluster_shade,
            &mut self.cluster_prominence,
        ]
    }
}

/// Correlation is 1 for a flat matrix (zero marginal variance).
pub fn glcm_features(g: &Glcm) -> GlcmFeatures {
    let n = g.levels;
    let cells = || (0..n).flat_map(move |i| (0..n).map(move |j| (i, j)));
    // symmetric: both marginals agree
    let mu = cells().map(|(i, j)| i as f64 * g.p[i * n + j]).sum::<f64>();
    let var = cells().map(|(i, j)| (i as f64 - mu).powi(2) * g.p[i * n + j]).sum::<f64>();
    let mut f = GlcmFeatures::default();
    let mut cov = 0.0;
    for (i, j) in cells() {
        let p = g.p[i * n + j];
        if p == 0.0 {
            continue;
        }
        let (x, y) = (i as f64, j as f64);
        let d = x - y;
        f.contrast += d * d * p;
        f.dissimilarity += d.abs() * p;
        f.homogeneity += p / (1.0 + d * d);
        f.asm += p * p;
        f.entropy -= p * p.log2();
        let s = x + y - 2.0 * mu;
        f.cluster_shade += s.powi(3) * p;
        f.cluster_prominence += s.powi(4) * p;
        cov += (x - mu) * (y - mu) * p;
    }
    f.correlation = if var > 0.0 { cov / var } else { 1.0 };
    f
}

/// Texture features averaged over the offsets that have pairs; `None` if none do.
pub fn glcm_averaged(v: &Volume, m: &TumorMask) -> Result<Option<GlcmFeatures>> {
    let mut per = Vec::new();
    for o in GLCM_OFFSETS {
        if let Some(g) = glcm(v, m, o)? {
            per.push(glcm_features(&g));
        }
    }
    if per.is_empty() {
        return Ok(None);
    }
    let mut avg = GlcmFeatures::default();
    for mut f in per.iter().copied() {
        avg.fields_mut().into_iter().zip(f.fields_mut()).for_each(|(a, b)| *a += *b);
    }
    let n = per.len() as f64;
    avg.fields_mut().into_iter().for_each(|a| *a /= n);
    Ok(Some(avg))
}

pub fn extract_features(v: &Volume, m: &TumorMask, source_id: &str) -> Result<RadiomicsVector> {
    extract_with(Registry::builtin(), v, m, source_id)
}

pub fn extract_with(reg: &Registry, v: &Volume, m: &TumorMask, source_id: &str) -> Result<RadiomicsVector> {
    check_aligned(v, m)?;
    if m.is_empty() {
        return Err(Error::EmptyMask(format!("{source_id}: no tumor voxels")));
    }
    if !v.is_normalized() {
        return Err(Error::Contract("radiomics expects a normalized volume".into()));
    }
    let values: Vec<f64> = m.indices().map(|i| v.data()[i] as f64).collect();
    let fo = first_order(&values)?;
    let tex = glcm_averaged(v, m)?;
    let t = tex.unwrap_or_default();
    let features: Vec<f64> = reg
        .features
        .iter()
        .map(|f| match f.formula {
            Formula::Mean => fo.mean,
            Formula::Median => fo.median,
            Formula::Min => fo.min,
            Formula::Max => fo.max,
            Formula::Range => fo.max - fo.min,
            Formula::Variance => fo.variance,
            Formula::Sd => fo.variance.sqrt(),
            Formula::Skewness => fo.skewness,
            Formula::Kurtosis => fo.kurtosis,
            Formula::Energy => fo.energy,
            Formula::Rms => fo.rms,
            Formula::Entropy => fo.entropy,
            Formula::Uniformity => fo.uniformity,
            Formula::Mad => fo.mad,
            Formula::Iqr => fo.p75 - fo.p25,
            Formula::P10 => fo.p10,
            Formula::P25 => fo.p25,
            Formula::P90 => fo.p90,
            Formula::GlcmContrast => t.contrast,
            Formula::GlcmCorrelation if tex.is_some() => t.correlation,
            Formula::GlcmCorrelation => 0.0,
            Formula::GlcmDissimilarity => t.dissimilarity,
            Formula::GlcmHomogeneity => t.homogeneity,
            Formula::GlcmAsm => t.asm,
            Formula::GlcmEntropy => t.entropy,
            Formula::GlcmClusterShade => t.cluster_shade,
            Formula::GlcmClusterProminence => t.cluster_prominence,
        })
        .collect();
    if let Some(i) = features.iter().position(|x| !x.is_finite()) {
        return Err(Error::Numeric(format!("{source_id}: feature {} is not finite", reg.features[i].name)));
    }
    Ok(RadiomicsVector {
        source_id: source_id.to_owned(),
        feature_names: reg.names(),
        features,
        degenerate: tex.is_none(),
    })
}

fn check_set(vectors: &[RadiomicsVector]) -> Result<usize> {
    if vectors.len() < 2 {
        return Err(Error::Invalid(format!("need at least 2 vectors, got {}", vectors.len())));
    }
    let n = vectors[0].features.len();
    if let Some(v) = vectors.iter().find(|v| v.features.len() != n || v.feature_names != vectors[0].feature_names) {
        return Err(Error::Shape(format!("vector {} does not match the feature list", v.source_id)));
    }
    Ok(n)
}

/// Per-feature population mean and standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

impl Standardizer {
    pub fn fit(vectors: &[RadiomicsVector]) -> Result<Self> {
        let d = check_set(vectors)?;
        let n = vectors.len() as f64;
        let mean: Vec<f64> = (0..d).map(|f| vectors.iter().map(|v| v.features[f]).sum::<f64>() / n).collect();
        let sd = (0..d)
            .map(|f| (vectors.iter().map(|v| (v.features[f] - mean[f]).powi(2)).sum::<f64>() / n).sqrt())
            .collect();
        Ok(Standardizer { mean, sd })
    }

    /// Z-scores; zero-variance features map to 0.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.sd))
            .map(|(v, (m, s))| if *s > 0.0 { (v - m) / s } else { 0.0 })
            .collect()
    }

    pub fn constant_features(&self) -> Vec<usize> {
        (0..self.sd.len()).filter(|&f| self.sd[f] == 0.0).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseSimilarity {
    /// Index pairs in lexicographic order.
    pub pairs: Vec<(usize, usize)>,
    pub scores: Vec<f64>,
    /// Features dropped for zero variance (standardized runs only).
    pub dropped: Vec<String>,
}

fn cosines(rows: &[Vec<f64>], ids: &[&str]) -> Result<(Vec<(usize, usize)>, Vec<f64>)> {
    let norms: Vec<f64> = rows.iter().map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    let zero: Vec<&str> = (0..rows.len()).filter(|&i| norms[i] == 0.0).map(|i| ids[i]).collect();
    if !zero.is_empty() {
        return Err(Error::Numeric(format!("zero-norm feature vectors: {}", zero.join(", "))));
    }
    let mut pairs = Vec::new();
    let mut scores = Vec::new();
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            let dot = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum::<f64>();
            pairs.push((i, j));
            scores.push((dot / (norms[i] * norms[j])).clamp(-1.0, 1.0));
        }
    }
    Ok((pairs, scores))
}

pub fn pairwise_cosine(vectors: &[RadiomicsVector], standardize: bool) -> Result<PairwiseSimilarity> {
    check_set(vectors)?;
    let ids: Vec<&str> = vectors.iter().map(|v| v.source_id.as_str()).collect();
    let (rows, dropped) = if standardize {
        let s = Standardizer::fit(vectors)?;
        let keep: Vec<usize> = (0..s.sd.len()).filter(|&f| s.sd[f] > 0.0).collect();
        let rows = vectors
            .iter()
            .map(|v| {
                let z = s.apply(&v.features);
                keep.iter().map(|&f| z[f]).collect()
            })
            .collect();
        let dropped = s.constant_features().into_iter().map(|f| vectors[0].feature_names[f].clone()).collect();
        (rows, dropped)
    } else {
        (vectors.iter().map(|v| v.features.clone()).collect::<Vec<_>>(), Vec::new())
    };
    let (pairs, scores) = cosines(&rows, &ids)?;
    Ok(PairwiseSimilarity { pairs, scores, dropped })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiversityMode {
    /// Mean and SD of pairwise cosine dissimilarities `1 - s`.
    #[default]
    SimilarityStats,
    /// Mean and SD over features of the per-feature variance of z-scored features.
    FeatureVariance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    pub method_name: String,
    pub organ: Option<Organ>,
    pub n_samples: usize,
    pub mv: f64,
    pub sd: f64,
    pub mode: DiversityMode,
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (m, (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt())
}

/// Diversity of one set. `scaler` z-scores against a reference population
/// (similarity mode uses raw features without it; feature-variance mode
/// falls back to the set's own statistics).
pub fn diversity_stats(
    vectors: &[RadiomicsVector],
    mode: DiversityMode,
    scaler: Option<&Standardizer>,
) -> Result<DiversityReport> {
    let d = check_set(vectors)?;
    if let Some(s) = scaler {
        if s.mean.len() != d {
            return Err(Error::Shape("standardizer does not match the feature list".into()));
        }
    }
    let ids: Vec<&str> = vectors.iter().map(|v| v.source_id.as_str()).collect();
    let (mv, sd) = match mode {
        DiversityMode::SimilarityStats => {
            let rows: Vec<Vec<f64>> = match scaler {
                Some(s) => vectors.iter().map(|v| s.apply(&v.features)).collect(),
                None => vectors.iter().map(|v| v.features.clone()).collect(),
            };
            if rows.iter().all(|r| *r == rows[0]) {
                (0.0, 0.0)
            } else {
                let (_, scores) = cosines(&rows, &ids)?;
                let dis: Vec<f64> = scores.iter().map(|s| 1.0 - s).collect();
                mean_sd(&dis)
            }
        }
        DiversityMode::FeatureVariance => {
            let own;
            let s = match scaler {
                Some(s) => s,
                None => {
                    own = Standardizer::fit(vectors)?;
                    &own
                }
            };
            let z: Vec<Vec<f64>> = vectors.iter().map(|v| s.apply(&v.features)).collect();
            let vars: Vec<f64> = (0..d)
                .map(|f| {
                    let col: Vec<f64> = z.iter().map(|r| r[f]).collect();
                    mean_sd(&col).1.powi(2)
                })
                .collect();
            mean_sd(&vars)
        }
    };
    Ok(DiversityReport {
        method_name: String::new(),
        organ: None,
        n_samples: vectors.len(),
        mv,
        sd,
        mode,
    })
}

/// A tumor to be scored for one method.
#[derive(Debug, Clone)]
pub struct MethodSample {
    pub id: String,
    pub organ: Organ,
    pub volume: Volume,
    pub mask: TumorMask,
}

/// One report per (method, organ). Features are z-scored with statistics
/// pooled over all methods of the organ, so the sets share a scale.
pub fn compare_methods(
    sets: &BTreeMap<String, Vec<MethodSample>>,
    mode: DiversityMode,
) -> Result<Vec<DiversityReport>> {
    let mut cells: BTreeMap<(Organ, String), Vec<RadiomicsVector>> = BTreeMap::new();
    for (method, samples) in sets {
        for s in samples {
            let v = extract_features(&s.volume, &s.mask, &s.id)?;
            cells.entry((s.organ, method.clone())).or_default().push(v);
        }
    }
    if let Some(((o, m), v)) = cells.iter().find(|(_, v)| v.len() < 2) {
        return Err(Error::InsufficientPool(format!("{m}/{o} has {} sample(s), need 2", v.len())));
    }
    let mut out = Vec::new();
    let organs: Vec<Organ> = {
        let mut o: Vec<Organ> = cells.keys().map(|k| k.0).collect();
        o.dedup();
        o
    };
    for organ in organs {
        let pooled: Vec<RadiomicsVector> = cells
            .iter()
            .filter(|(k, _)| k.0 == organ)
            .flat_map(|(_, v)| v.iter().cloned())
            .collect();
        let scaler = Standardizer::fit(&pooled)?;
        for ((o, method), vectors) in cells.iter().filter(|(k, _)| k.0 == organ) {
            let mut r = diversity_stats(vectors, mode, Some(&scaler))?;
            r.method_name = method.clone();
            r.organ = Some(*o);
            out.push(r);
        }
    }
    Ok(out)
}

/// Tab-separated table: one row per method, one `mv±sd` column per organ.
pub fn render_table(reports: &[DiversityReport]) -> String {
    let mut organs: Vec<Organ> = reports.iter().filter_map(|r| r.organ).collect();
    organs.sort();
    organs.dedup();
    let mut methods: Vec<&str> = reports.iter().map(|r| r.method_name.as_str()).collect();
    methods.sort_unstable();
    methods.dedup();
    let mode = reports.first().map(|r| r.mode).unwrap_or_default();
    let mut s = format!(
        "# mode={}\n# features z-scored per organ over all methods\nmethod",
        serde_json::to_value(mode).expect("mode serializes").as_str().unwrap_or_default()
    );
    for o in &organs {
        let _ = write!(s, "\t{o}");
    }
    s.push('\n');
    for m in methods {
        s.push_str(m);
        for o in &organs {
            match reports.iter().find(|r| r.method_name == m && r.organ == Some(*o)) {
                Some(r) => {
                    let _ = write!(s, "\t{:.4}±{:.4}", r.mv, r.sd);
                }
                None => s.push_str("\t-"),
            }
        }
        s.push('\n');
    }
    s
}
