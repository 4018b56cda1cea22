//! Report text handling: descriptor extraction, variant generation,
//! embedding and similarity validation.

mod client;
mod embed;
mod vocab;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use client::{
    ExtractPayload, GeneratePayload, LmClient, LmRequest, LmResponse, MockTransport, Role, Transport,
    EXTRACT_PROMPT, GENERATE_PROMPT,
};
pub use embed::{cosine, embed_text, tokenize, HashingEncoder, TextEmbedding, DEFAULT_EMBED_DIM};
pub use vocab::{Appearance, Category, Term, Vocabulary};

use crate::error::{Error, Result};
use crate::organ::Organ;

/// Acceptance threshold for variant/description cosine similarity.
pub const DEFAULT_SIMILARITY_THRESHOLD: f64 = 0.6;
/// Number of report variants generated per case.
pub const DEFAULT_VARIANTS: usize = 100;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RadiologyReport {
    pub id: String,
    pub organ: Organ,
    pub text: String,
}

impl RadiologyReport {
    pub fn new(id: impl Into<String>, organ: Organ, text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(Error::Invalid("report text is empty".into()));
        }
        Ok(RadiologyReport {
            id: id.into(),
            organ,
            text,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DescriptorSet {
    pub report_id: String,
    pub organ: Organ,
    pub terms: Vec<String>,
    pub cleaned_text: String,
    /// Set when no vocabulary term was found in the report.
    pub no_match: bool,
}

impl DescriptorSet {
    /// Builds a set directly from vocabulary phrases.
    pub fn from_terms(report_id: impl Into<String>, organ: Organ, terms: &[&str]) -> Result<Self> {
        let vocab = Vocabulary::builtin();
        let mut out: Vec<String> = Vec::new();
        for t in terms {
            let t = t.to_ascii_lowercase();
            if vocab.lookup(organ, &t).is_none() {
                return Err(Error::Invalid(format!("`{t}` is not a {organ} vocabulary term")));
            }
            if !out.contains(&t) {
                out.push(t);
            }
        }
        Ok(DescriptorSet {
            report_id: report_id.into(),
            organ,
            cleaned_text: describe_terms(&out, organ),
            no_match: out.is_empty(),
            terms: out,
        })
    }

    pub fn same_terms(&self, other: &DescriptorSet) -> bool {
        let mut a = self.terms.clone();
        let mut b = other.terms.clone();
        a.sort();
        b.sort();
        a == b
    }
}

/// Canonical sentence for a descriptor list, e.g.
/// `a hypodense ill-defined lesion in the liver`.
pub fn describe_terms(terms: &[String], organ: Organ) -> String {
    if terms.is_empty() {
        String::new()
    } else {
        client::render_frame(0, terms, organ)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportVariantSet {
    pub report_id: String,
    pub variants: Vec<String>,
    pub similarity_scores: Vec<f64>,
}

/// How a variant set is turned into a conditioning embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TextConditioning {
    /// One variant drawn uniformly per use.
    #[default]
    SampleOne,
    /// Mean of all variant embeddings.
    Average,
}

impl ReportVariantSet {
    pub fn len(&self) -> usize {
        self.variants.len()
    }

    pub fn is_empty(&self) -> bool {
        self.variants.is_empty()
    }

    pub fn sample<'a, R: Rng + ?Sized>(&'a self, rng: &mut R) -> &'a str {
        &self.variants[rng.random_range(0..self.variants.len())]
    }

    pub fn embedding<R: Rng + ?Sized>(
        &self,
        mode: TextConditioning,
        encoder: &HashingEncoder,
        rng: &mut R,
    ) -> Result<TextEmbedding> {
        match mode {
            TextConditioning::SampleOne => encoder.embed(self.sample(rng)),
            TextConditioning::Average => {
                let all = self
                    .variants
                    .iter()
                    .map(|v| encoder.embed(v))
                    .collect::<Result<Vec<_>>>()?;
                TextEmbedding::average(&all)
            }
        }
    }

    /// A single-variant set holding the original text (text augmentation off).
    pub fn single(report_id: impl Into<String>, text: impl Into<String>) -> Self {
        ReportVariantSet {
            report_id: report_id.into(),
            variants: vec![text.into()],
            similarity_scores: vec![1.0],
        }
    }
}

pub fn validate_similarity(candidate: &str, reference: &str, threshold: f64) -> Result<(f64, bool)> {
    if !(-1.0..=1.0).contains(&threshold) {
        return Err(Error::Invalid(format!("threshold {threshold} outside [-1, 1]")));
    }
    let a = embed_text(candidate)?;
    let b = embed_text(reference)?;
    let score = cosine(&a.vector, &b.vector).clamp(-1.0, 1.0);
    Ok((score, score >= threshold))
}

pub fn extract_descriptors(report: &RadiologyReport, client: &LmClient) -> Result<DescriptorSet> {
    let payload = serde_json::to_string(&ExtractPayload {
        organ: report.organ,
        report: report.text.clone(),
    })
    .expect("payload serializes");
    let reply = client.call(&LmRequest {
        role: Role::Extract,
        prompt: EXTRACT_PROMPT.into(),
        payload,
    })?;
    let vocab = Vocabulary::builtin();
    let mut terms: Vec<String> = Vec::new();
    for line in reply.text.lines() {
        let t = line.trim().to_lowercase();
        if t.is_empty() {
            continue;
        }
        if vocab.lookup(report.organ, &t).is_none() {
            log::warn!("report {}: dropping non-vocabulary term `{t}`", report.id);
            continue;
        }
        if !terms.contains(&t) {
            terms.push(t);
        }
    }
    if terms.is_empty() {
        log::warn!("report {}: no vocabulary term matched", report.id);
    }
    Ok(DescriptorSet {
        report_id: report.id.clone(),
        organ: report.organ,
        cleaned_text: describe_terms(&terms, report.organ),
        no_match: terms.is_empty(),
        terms,
    })
}

/// Generates `n` variants, each validated against the cleaned description.
pub fn generate_variants(
    d: &DescriptorSet,
    n: usize,
    client: &LmClient,
    threshold: f64,
) -> Result<ReportVariantSet> {
    if d.terms.is_empty() {
        return Err(Error::Invalid(format!("descriptor set {} has no terms", d.report_id)));
    }
    if n == 0 {
        return Err(Error::Invalid("variant count must be at least 1".into()));
    }
    let max_attempts = 10 * n;
    let mut variants = Vec::with_capacity(n);
    let mut scores = Vec::with_capacity(n);
    for attempt in 0..max_attempts {
        let payload = serde_json::to_string(&GeneratePayload {
            organ: d.organ,
            terms: d.terms.clone(),
            index: attempt,
        })
        .expect("payload serializes");
        let reply = client.call(&LmRequest {
            role: Role::Generate,
            prompt: GENERATE_PROMPT.into(),
            payload,
        })?;
        let text = reply.text.trim().to_owned();
        if text.is_empty() {
            continue;
        }
        let (score, pass) = validate_similarity(&text, &d.cleaned_text, threshold)?;
        if pass {
            variants.push(text);
            scores.push(score);
            if variants.len() == n {
                return Ok(ReportVariantSet {
                    report_id: d.report_id.clone(),
                    variants,
                    similarity_scores: scores,
                });
            }
        }
    }
    Err(Error::GenerationExhausted {
        attempts: max_attempts,
        accepted: variants.len(),
        wanted: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(organ: Organ, text: &str) -> RadiologyReport {
        RadiologyReport::new("r", organ, text).unwrap()
    }

    #[test]
    fn extracts_terms_from_clinical_sentence() {
        let d = extract_descriptors(
            &report(Organ::Liver, "Slightly enlarged ill-defined hypoenhancing liver lesions"),
            &LmClient::mock(),
        )
        .unwrap();
        assert!(d.terms.contains(&"ill-defined".to_string()));
        assert!(d.terms.contains(&"hypoenhancing".to_string()));
        assert!(!d.no_match);
    }

    #[test]
    fn cystic_pancreas_sentence() {
        let d = extract_descriptors(
            &report(Organ::Pancreas, "a cystic lesion in the pancreas is present"),
            &LmClient::mock(),
        )
        .unwrap();
        assert_eq!(d.terms, vec!["cystic"]);
    }

    #[test]
    fn unremarkable_report_sets_warning() {
        let d = extract_descriptors(&report(Organ::Kidney, "Unremarkable"), &LmClient::mock()).unwrap();
        assert!(d.terms.is_empty());
        assert!(d.no_match);
    }

    #[test]
    fn three_distinct_hypodense_variants() {
        let d = DescriptorSet::from_terms("r", Organ::Liver, &["hypodense"]).unwrap();
        let v = generate_variants(&d, 3, &LmClient::mock(), DEFAULT_SIMILARITY_THRESHOLD).unwrap();
        assert_eq!(v.len(), 3);
        assert!(v.variants.iter().all(|s| s.contains("hypodense")));
        let set: std::collections::HashSet<_> = v.variants.iter().collect();
        assert_eq!(set.len(), 3);
    }

    #[test]
    fn single_variant_is_cleaned_text() {
        let d = DescriptorSet::from_terms("r", Organ::Kidney, &["cystic"]).unwrap();
        let v = generate_variants(&d, 1, &LmClient::mock(), DEFAULT_SIMILARITY_THRESHOLD).unwrap();
        assert_eq!(v.variants, vec![d.cleaned_text.clone()]);
        assert_eq!(v.similarity_scores, vec![1.0]);
    }

    #[test]
    fn hundred_variants() {
        let d = DescriptorSet::from_terms("r", Organ::Liver, &["hypodense", "ill-defined"]).unwrap();
        let v = generate_variants(&d, DEFAULT_VARIANTS, &LmClient::mock(), DEFAULT_SIMILARITY_THRESHOLD).unwrap();
        assert_eq!(v.len(), 100);
        assert!(v.similarity_scores.iter().all(|&s| s >= DEFAULT_SIMILARITY_THRESHOLD));
    }

    #[test]
    fn impossible_threshold_exhausts() {
        let d = DescriptorSet::from_terms("r", Organ::Liver, &["cyst"]).unwrap();
        let e = generate_variants(&d, 5, &LmClient::mock(), 1.0).unwrap_err();
        assert!(matches!(e, Error::GenerationExhausted { attempts: 50, .. }), "{e}");
    }

    #[test]
    fn empty_descriptor_set_rejected() {
        let d = DescriptorSet::from_terms("r", Organ::Liver, &[]).unwrap();
        assert!(generate_variants(&d, 1, &LmClient::mock(), 0.6).is_err());
    }

    #[test]
    fn similarity_edge_cases() {
        let (s, pass) = validate_similarity("a cystic lesion", "a cystic lesion", 0.6).unwrap();
        assert_eq!(s, 1.0);
        assert!(pass);
        let (s, _) = validate_similarity(
            "hypodense liver lesion segment seven margin",
            "renal calculi bilateral nonobstructing stone ureter",
            0.6,
        )
        .unwrap();
        assert!(s.abs() < 0.2, "disjoint score {s}");
    }

    #[test]
    fn threshold_boundary_is_inclusive_only_at_equality() {
        // pick two strings and set the threshold just above their score
        let (s, _) = validate_similarity("a hypodense lesion in the liver", "the liver shows a hypodense lesion, new", 0.0).unwrap();
        let (_, pass) = validate_similarity("a hypodense lesion in the liver", "the liver shows a hypodense lesion, new", s + 0.01).unwrap();
        assert!(!pass);
        let (_, pass) = validate_similarity("a hypodense lesion in the liver", "the liver shows a hypodense lesion, new", s).unwrap();
        assert!(pass);
    }
}
