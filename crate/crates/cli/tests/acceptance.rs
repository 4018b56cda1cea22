//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.
//!
//! The trained-model criteria need a reference run (phantom-gen, train-ae,
//! train-diffusion with `configs/reference.toml`). It is trained into a
//! temporary directory unless `TUMORSYNTH_ACCEPTANCE_RUN` names an output
//! directory holding a finished run of the same configuration.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use clap::Parser;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tumorsynth::autoencoder::Autoencoder;
use tumorsynth::contrastive::{feature_separation, sample_triplet, total_loss_graph, FeatureMode, Triplet, TripletDraw};
use tumorsynth::dataset::{healthy_patches, phantom_training_items, sphere_mask, PhantomSetConfig};
use tumorsynth::diffusion::{
    build_schedule, estimate_z0, forward_noise, ldm_loss_graph, prepare_samples, reverse_step, standard_normal,
    Denoiser, LatentSample, LdmDraw, SamplerMode, Synthesizer,
};
use tumorsynth::nn::{gradcheck, Graph, Tensor};
use tumorsynth::radiomics::{diversity_stats, DiversityMode, RadiomicsVector, Standardizer};
use tumorsynth::targeted_aug::{mine_failures, FailureKind, KindFilter, MiningConfig};
use tumorsynth::text::{
    describe_terms, generate_variants, validate_similarity, DescriptorSet, HashingEncoder, LmClient, Vocabulary,
};
use tumorsynth::turing::{
    assemble_case_set_in, simulate_random_readers, CandidateCase, NextCase, SizeBucket, Source, TuringStudy, Verdict,
};
use tumorsynth::volume::{Dims, Spacing, TumorMask, Volume};
use tumorsynth::Organ;
use tumorsynth_cli::app::{run, Cli};
use tumorsynth_cli::manifest::load_manifest;
use tumorsynth_cli::pipeline::{self, AE, DIFFUSION, PHANTOMS};
use tumorsynth_cli::RunConfig;

const REFERENCE: &str = include_str!("../../../configs/reference.toml");
const RUN_ENV: &str = "TUMORSYNTH_ACCEPTANCE_RUN";

struct Outcome {
    name: &'static str,
    pass: bool,
    detail: String,
    elapsed: Duration,
}

fn check(name: &'static str, limit: Option<Duration>, f: impl FnOnce() -> (bool, String)) -> Outcome {
    let t = Instant::now();
    let r = catch_unwind(AssertUnwindSafe(f));
    let elapsed = t.elapsed();
    let (mut pass, mut detail) = r.unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        (false, format!("panicked: {msg}"))
    });
    if let Some(l) = limit {
        if elapsed > l {
            pass = false;
            detail = format!("{detail}; over the {:.0} s budget", l.as_secs_f64());
        }
    }
    let o = Outcome {
        name,
        pass,
        detail,
        elapsed,
    };
    println!(
        "{} {:<28} {:>8.2}s  {}",
        if o.pass { "PASS" } else { "FAIL" },
        o.name,
        o.elapsed.as_secs_f64(),
        o.detail
    );
    o
}

fn rel(a: &Tensor, b: &Tensor) -> f64 {
    let num: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.data.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(1e-300)
}

fn inversion() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut worst: f64 = 0.0;
    for k in 0..100 {
        let steps = [1, 10, 200][k % 3];
        let s = build_schedule(steps, 1e-4, 0.02).unwrap();
        let t = rng.random_range(1..=steps);
        let z0 = standard_normal(&mut rng, &[4, 8, 8, 8]);
        let eps = standard_normal(&mut rng, &[4, 8, 8, 8]);
        let zt = forward_noise(&z0, t, &eps, &s).unwrap();
        worst = worst.max(rel(&estimate_z0(&zt, &eps, t, &s).unwrap(), &z0));
    }
    (worst < 1e-6, format!("max rel err {worst:.2e} over 100 draws (< 1e-6)"))
}

fn oracle_sampling() -> (bool, String) {
    let s = build_schedule(200, 1e-4, 0.02).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let target = standard_normal(&mut rng, &[4, 8, 8, 8]);
    let mut z = standard_normal(&mut rng, &[4, 8, 8, 8]);
    for t in (1..=200).rev() {
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
    let e = rel(&z, &target);
    (e < 1e-3, format!("rel err {e:.2e} at T=200 (< 1e-3)"))
}

/// Six samples on an 8^3 latent grid, two per description.
fn latent_samples(cfg: &RunConfig, seed: u64) -> Vec<LatentSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = cfg.diffusion.model.latent_channels;
    let enc = HashingEncoder::new(cfg.diffusion.model.text_dim).unwrap();
    let pool = [["hypodense"], ["hyperenhancing"], ["cystic"]];
    (0..6)
        .map(|i| {
            let terms: Vec<String> = pool[i % 3].iter().map(|s| s.to_string()).collect();
            let m = sphere_mask(Dims::cube(8), 2.5 + (i % 2) as f64 * 0.5);
            LatentSample {
                id: format!("g{i}"),
                z0: standard_normal(&mut rng, &[c, 8, 8, 8]),
                z_healthy: standard_normal(&mut rng, &[c, 8, 8, 8]),
                mask_latent: Tensor::new(vec![1, 8, 8, 8], m.data().iter().map(|&b| b as f64).collect()),
                embeddings: vec![
                    enc.embed(&describe_terms(&terms, Organ::Liver)).unwrap(),
                    enc.embed(&format!("{} mass", terms.join(" "))).unwrap(),
                ],
                terms,
            }
        })
        .collect()
}

fn gradchecks(cfg: &RunConfig) -> (bool, String) {
    let mut out = Vec::new();
    let mut ok = true;

    let mut ae = Autoencoder::new(cfg.autoencoder.model.clone()).unwrap();
    let patch = cfg.phantom.patch;
    assert_eq!(patch / cfg.autoencoder.model.downsample, 8);
    let x = healthy_patches(&cfg.phantom, Organ::Liver, 1, 3).unwrap().remove(0);
    let frozen = {
        let mut g = Graph::new();
        let p = ae.params().bind(&mut g, false);
        ae.loss_graph(&mut g, &p, &x, None).unwrap().1.frozen
    };
    let probe = ae.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let r = gradcheck(ae.params_mut(), 16, 1e-6, &mut rng, |store, want| {
        let mut m = probe.clone();
        *m.params_mut() = store.clone();
        let mut g = Graph::new();
        let p = m.params().bind(&mut g, want);
        let (l, _) = m.loss_graph(&mut g, &p, &x, Some(&frozen)).unwrap();
        (g.value(l).item(), want.then(|| p.grads(m.params(), &g.backward(l))))
    });
    ok &= r.max_rel_error < 1e-3 && r.probes.len() >= 16;
    out.push(format!("AE {:.1e}", r.max_rel_error));

    let mut den = Denoiser::new(cfg.diffusion.model.clone()).unwrap();
    let schedule = den.config().schedule.build().unwrap();
    let samples = latent_samples(cfg, 32);
    let draw = LdmDraw::sample(&samples[0], &schedule, &mut rng);
    let probe = den.clone();
    let r = gradcheck(den.params_mut(), 16, 1e-6, &mut rng, |store, want| {
        let mut m = probe.clone();
        *m.params_mut() = store.clone();
        let mut g = Graph::new();
        let p = m.params().bind(&mut g, want);
        let (l, _) = ldm_loss_graph(&mut g, &p, &m, &samples[0], &draw, &schedule).unwrap();
        (g.value(l).item(), want.then(|| p.grads(m.params(), &g.backward(l))))
    });
    ok &= r.max_rel_error < 1e-3 && r.probes.len() >= 16;
    out.push(format!("L_ldm {:.1e}", r.max_rel_error));

    let batch = vec![(1, LdmDraw::sample(&samples[1], &schedule, &mut rng))];
    let tr = sample_triplet(&samples, &[], &mut rng).unwrap();
    let td = TripletDraw::sample(&samples, &schedule, &mut rng);
    // margin large enough that the hinge stays active under perturbation
    let margin = 50.0;
    let r = gradcheck(den.params_mut(), 16, 1e-6, &mut rng, |store, want| {
        let mut m = probe.clone();
        *m.params_mut() = store.clone();
        let mut g = Graph::new();
        let p = m.params().bind(&mut g, want);
        let (l, parts) =
            total_loss_graph(&mut g, &p, &m, &samples, &batch, Some((&tr, &td)), &schedule, 0.1, margin).unwrap();
        assert!(parts.different < margin - 1e-3);
        (g.value(l).item(), want.then(|| p.grads(m.params(), &g.backward(l))))
    });
    ok &= r.max_rel_error < 1e-3 && r.probes.len() >= 16;
    out.push(format!("total(λc=0.1) {:.1e}", r.max_rel_error));
    (ok, format!("16 weights each, 8^3 latents: {} (< 1e-3)", out.join(", ")))
}

fn radiomics_oracle() -> (bool, String) {
    let names: Vec<String> = (0..4).map(|i| format!("f{i}")).collect();
    let rows = [
        [1.0, 2.0, 0.5, 3.0],
        [2.0, 0.5, 1.5, 3.0],
        [0.2, 1.1, 2.2, 3.0],
        [3.0, 3.0, 0.1, 3.0],
        [1.5, 0.3, 0.9, 3.0],
        [0.7, 2.4, 1.8, 3.0],
    ];
    let vecs: Vec<RadiomicsVector> = rows
        .iter()
        .enumerate()
        .map(|(i, r)| RadiomicsVector {
            source_id: format!("v{i}"),
            feature_names: names.clone(),
            features: r.to_vec(),
            degenerate: false,
        })
        .collect();
    let mean_sd = |xs: &[f64]| {
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        (m, (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n).sqrt())
    };
    // brute force: similarity mode on raw features
    let mut dis = Vec::new();
    for i in 0..6 {
        for j in i + 1..6 {
            let (a, b) = (&rows[i], &rows[j]);
            let dot: f64 = (0..4).map(|k| a[k] * b[k]).sum();
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            dis.push(1.0 - dot / (na * nb));
        }
    }
    let want_sim = mean_sd(&dis);
    // brute force: feature variance with a scaler fitted on the first three rows
    let mut mu = [0.0; 4];
    let mut sd = [0.0; 4];
    for k in 0..4 {
        let col: Vec<f64> = rows[..3].iter().map(|r| r[k]).collect();
        let (m, s) = mean_sd(&col);
        mu[k] = m;
        sd[k] = s;
    }
    let vars: Vec<f64> = (0..4)
        .map(|k| {
            let z: Vec<f64> = rows
                .iter()
                .map(|r| if sd[k] > 0.0 { (r[k] - mu[k]) / sd[k] } else { 0.0 })
                .collect();
            mean_sd(&z).1.powi(2)
        })
        .collect();
    let want_var = mean_sd(&vars);

    let scaler = Standardizer::fit(&vecs[..3]).unwrap();
    let sim = diversity_stats(&vecs, DiversityMode::SimilarityStats, None).unwrap();
    let var = diversity_stats(&vecs, DiversityMode::FeatureVariance, Some(&scaler)).unwrap();
    let err = [
        (sim.mv - want_sim.0).abs(),
        (sim.sd - want_sim.1).abs(),
        (var.mv - want_var.0).abs(),
        (var.sd - want_var.1).abs(),
    ]
    .into_iter()
    .fold(0.0, f64::max);
    (err <= 1e-12, format!("max abs diff {err:.1e} over both modes (<= 1e-12)"))
}

fn radiomics_direction(cfg: &RunConfig) -> (bool, String) {
    let mut cfg = cfg.clone();
    cfg.radiomics.samples_per_set = 40;
    cfg.radiomics.mode = DiversityMode::SimilarityStats;
    let m = pipeline::radiomics_compare(&cfg).unwrap();
    let mut ok = true;
    let mut parts = Vec::new();
    for o in &cfg.phantom.organs {
        let v = m.metrics[&format!("mv/varied/{o}")].as_f64().unwrap();
        let f = m.metrics[&format!("mv/fixed/{o}")].as_f64().unwrap();
        ok &= v > f;
        parts.push(format!("{o} {v:.3} > {f:.3}"));
    }
    (ok, format!("varied vs fixed MV, 40 each: {}", parts.join(", ")))
}

fn turing_arithmetic() -> (bool, String) {
    let sources = [Source::Real, Source::Method("m".into())];
    let pool: Vec<CandidateCase> = sources
        .iter()
        .flat_map(|s| {
            (0..20).map(move |k| CandidateCase {
                id: format!("{s}-{k}"),
                organ: Organ::Liver,
                source: s.clone(),
                volume_path: "v.hdr".into(),
                mask_path: "m.hdr".into(),
                report_text: "a hypodense lesion in the liver".into(),
                diameter_mm: 10.0,
            })
        })
        .collect();
    let cases = assemble_case_set_in(&pool, &sources, &[SizeBucket::Small], 20, 3).unwrap();
    let mut st = TuringStudy::open(cases.clone(), Path::new("."), None, 0).unwrap();
    let sid = st.create_session("scripted", Some(1)).unwrap().session_id;
    let (mut synth_real, mut real_synth) = (0, 0);
    while let NextCase::Case(p) = st.next_case(&sid).unwrap() {
        let v = match st.case(&p.case_id).unwrap().source {
            Source::Method(_) if synth_real < 12 => {
                synth_real += 1;
                Verdict::Real
            }
            Source::Real if real_synth < 6 => {
                real_synth += 1;
                Verdict::Synthetic
            }
            Source::Method(_) => Verdict::Synthetic,
            Source::Real => Verdict::Real,
        };
        st.submit_judgment(&sid, &p.case_id, v).unwrap();
    }
    let rate = st.error_report().row(Organ::Liver, SizeBucket::Small, "m").unwrap().error_rate;
    let random = simulate_random_readers(&cases, 1000, 17).unwrap();
    (
        rate == 45.0 && (random - 50.0).abs() <= 5.0,
        format!("scripted {rate:.1}% (45.0 exactly), random readers {random:.2}% over 1000 sessions (50 ± 5)"),
    )
}

fn text_pipeline(cfg: &RunConfig) -> (bool, String) {
    let client = LmClient::mock();
    let vocab = Vocabulary::builtin();
    let mut terms = 0;
    let mut bad = Vec::new();
    for (organ, term) in vocab.iter() {
        terms += 1;
        let d = DescriptorSet::from_terms(format!("{organ}-{}", term.phrase), organ, &[term.phrase.as_str()]).unwrap();
        match generate_variants(&d, 100, &client, cfg.phantom.similarity_threshold) {
            Ok(set) => {
                let lower = term.phrase.to_lowercase();
                if set.variants.len() != 100 || !set.variants.iter().all(|v| v.to_lowercase().contains(&lower)) {
                    bad.push(format!("{organ}/{}", term.phrase));
                }
            }
            Err(e) => bad.push(format!("{organ}/{}: {e}", term.phrase)),
        }
        let (s, pass) = validate_similarity(&d.cleaned_text, &d.cleaned_text, cfg.phantom.similarity_threshold).unwrap();
        if s != 1.0 || !pass {
            bad.push(format!("{organ}/{} self-similarity {s}", term.phrase));
        }
    }
    (
        bad.is_empty() && terms > 0,
        format!("{terms} terms x 100 variants, self-similarity 1.0; failures: {bad:?}"),
    )
}

fn mining_goldens() -> (bool, String) {
    let dims = Dims::cube(12);
    let v = Volume::new(vec![0.5; dims.len()], dims, Spacing::ISOTROPIC_1MM, true).unwrap();
    let cube = |z0: usize, y0: usize, x0: usize, n: usize| {
        TumorMask::from_fn(dims, move |z, y, x| {
            (z0..z0 + n).contains(&z) && (y0..y0 + n).contains(&y) && (x0..x0 + n).contains(&x)
        })
    };
    let cfg = MiningConfig {
        min_voxels: 8,
        patch: Dims::cube(8),
        kinds: KindFilter::Both,
    };
    let kinds = |truth: &TumorMask, pred: &TumorMask| -> Vec<(FailureKind, usize)> {
        mine_failures(pred, truth, &v, Organ::Liver, "g", &cfg)
            .unwrap()
            .into_iter()
            .map(|f| (f.kind, f.voxels))
            .collect()
    };
    let mut fails = Vec::new();

    // 1: exact hit, no failures
    let t = cube(2, 2, 2, 3);
    let got = kinds(&t, &t);
    if !got.is_empty() {
        fails.push(format!("exact hit gave {got:?}"));
    }
    // 2: missed tumour plus a spurious blob plus 1-voxel speckle below min_voxels
    let t = cube(1, 1, 1, 3);
    let pred = cube(7, 7, 7, 2).union(&TumorMask::from_indices(dims, [dims.index(0, 11, 0)])).unwrap();
    let got = kinds(&t, &pred);
    if got != vec![(FailureKind::FalsePositive, 8), (FailureKind::FalseNegative, 27)] {
        fails.push(format!("miss + blob gave {got:?}"));
    }
    // 3: prediction shifted by one slice: one FP slab and one FN slab
    let t = cube(3, 3, 3, 4);
    let pred = cube(4, 3, 3, 4);
    let got = kinds(&t, &pred);
    if got != vec![(FailureKind::FalsePositive, 16), (FailureKind::FalseNegative, 16)] {
        fails.push(format!("shift gave {got:?}"));
    }
    (fails.is_empty(), format!("3 golden grids; mismatches: {fails:?}"))
}

/// Phantom-gen, train-ae and contrastive train-diffusion with the reference config.
fn reference_run(tmp: &Path) -> (RunConfig, PathBuf, Duration) {
    let t = Instant::now();
    let mut cfg = RunConfig::from_toml(REFERENCE).unwrap();
    if let Some(dir) = std::env::var_os(RUN_ENV) {
        let dir = PathBuf::from(dir);
        cfg.output_dir = dir.clone();
        let hash = cfg.hash();
        let reusable = [PHANTOMS, AE, DIFFUSION]
            .iter()
            .all(|s| load_manifest(&dir.join(s)).is_ok_and(|m| m.config_hash == hash));
        if reusable {
            println!("reusing the reference run in {}", dir.display());
            return (cfg, dir, t.elapsed());
        }
    }
    let out = std::env::var_os(RUN_ENV).map(PathBuf::from).unwrap_or_else(|| tmp.join("reference"));
    cfg.output_dir = out.clone();
    let config = tmp.join("reference.toml");
    std::fs::write(&config, REFERENCE).unwrap();
    for args in [&["phantom-gen"][..], &["train-ae"], &["train-diffusion", "--contrastive", "on"]] {
        let mut argv = vec![
            "tumorsynth".to_string(),
            "--config".into(),
            config.display().to_string(),
            "--out".into(),
            out.display().to_string(),
        ];
        argv.extend(args.iter().map(|s| s.to_string()));
        let m = run(&Cli::try_parse_from(argv).unwrap()).unwrap();
        println!("  {} done at {:.0} s: {:?}", m.command, t.elapsed().as_secs_f64(), m.metrics);
    }
    (cfg, out, t.elapsed())
}

fn contrastive_effect(cfg: &RunConfig) -> (bool, String) {
    let ae = pipeline::load_autoencoder(cfg).unwrap();
    let den = pipeline::load_denoiser(cfg).unwrap();
    let held_cfg = PhantomSetConfig {
        per_profile: 3,
        ..cfg.phantom.clone()
    };
    let held = phantom_training_items(&held_cfg, true, &LmClient::mock(), 99).unwrap();
    let enc = HashingEncoder::new(cfg.diffusion.model.text_dim).unwrap();
    let (samples, _) = prepare_samples(&ae, &held, &enc, den.latent_stats()).unwrap();
    let schedule = den.config().schedule.build().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let ts: Vec<Triplet> = (0..50).map(|_| sample_triplet(&samples, &[], &mut rng).unwrap()).collect();
    let r = feature_separation(&den, &samples, &ts, &schedule, FeatureMode::OneStep, &mut rng).unwrap();
    (
        r.mean_intra < r.mean_inter,
        format!(
            "λc={}: intra {:.4} < inter {:.4} on {} held-out triplets",
            cfg.contrastive.lambda_c, r.mean_intra, r.mean_inter, r.triplets
        ),
    )
}

/// Runs the 20 paired comparisons and 10 further syntheses; every call's
/// output is checked for bit-exact preservation outside the mask.
fn text_control_and_inpainting(cfg: &RunConfig) -> ((bool, String), (bool, String)) {
    let ae = pipeline::load_autoencoder(cfg).unwrap();
    let den = pipeline::load_denoiser(cfg).unwrap();
    let synth = Synthesizer::new(&ae, &den).unwrap().with_mode(cfg.synthesis.sampler);
    let organs = &cfg.phantom.organs;
    let mut calls = 0;
    let mut changed_outside = 0;
    let mut keep = |h: &Volume, m: &TumorMask, out: &Volume| {
        calls += 1;
        let moved = (0..h.data().len())
            .any(|i| m.data()[i] == 0 && out.data()[i].to_bits() != h.data()[i].to_bits());
        changed_outside += moved as usize;
    };
    let mut wins = 0;
    let mut means = Vec::new();
    for i in 0..20u64 {
        let o = organs[i as usize % organs.len()];
        let h = healthy_patches(&cfg.phantom, o, 1, 1000 + i).unwrap().remove(0);
        let m = sphere_mask(h.dims(), 4.5);
        let lo = synth.synthesize(&h, &m, &describe_terms(&["hypodense".into()], o), 500 + i).unwrap();
        let hi = synth.synthesize(&h, &m, &describe_terms(&["hyperenhancing".into()], o), 500 + i).unwrap();
        keep(&h, &m, &lo.volume);
        keep(&h, &m, &hi.volume);
        let (a, b) = (lo.volume.mean_where(&m, true).unwrap(), hi.volume.mean_where(&m, true).unwrap());
        means.push((a, b));
        wins += (a < b) as usize;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    for i in 0..10u64 {
        let o = organs[i as usize % organs.len()];
        let h = healthy_patches(&cfg.phantom, o, 1, 2000 + i).unwrap().remove(0);
        let dims = h.dims();
        let c: [f64; 3] = std::array::from_fn(|_| rng.random_range(4.0..12.0));
        let r: [f64; 3] = std::array::from_fn(|_| rng.random_range(1.5..5.0));
        let m = TumorMask::from_fn(dims, |z, y, x| {
            let p = [z as f64, y as f64, x as f64];
            (0..3).map(|a| ((p[a] - c[a]) / r[a]).powi(2)).sum::<f64>() <= 1.0
        });
        let out = synth.synthesize(&h, &m, &describe_terms(&["cystic".into()], o), 900 + i).unwrap();
        keep(&h, &m, &out.volume);
    }
    let n = means.len() as f64;
    let (ma, mb) = means.iter().fold((0.0, 0.0), |s, (a, b)| (s.0 + a / n, s.1 + b / n));
    (
        (
            wins >= 16,
            format!("hypodense darker in {wins}/20 pairs (>= 16); mean in-mask {ma:.3} vs {mb:.3}"),
        ),
        (
            calls == 50 && changed_outside == 0,
            format!("{calls} syntheses, {changed_outside} changed a voxel outside the mask"),
        ),
    )
}

fn main() {
    // `cargo test` passes harness flags; a name filter that does not match skips the run
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if !args.is_empty() && !args.iter().any(|a| "acceptance".contains(a.as_str())) {
        return;
    }
    let cfg = RunConfig::from_toml(REFERENCE).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let mut results = Vec::new();
    let secs = |s: u64| Some(Duration::from_secs(s));

    results.push(check("inversion", secs(5), inversion));
    results.push(check("oracle-sampling", secs(30), oracle_sampling));
    results.push(check("gradient-checks", secs(120), || gradchecks(&cfg)));
    results.push(check("radiomics-oracle", None, radiomics_oracle));
    results.push(check("turing-arithmetic", None, turing_arithmetic));
    results.push(check("text-pipeline", None, || text_pipeline(&cfg)));
    results.push(check("failure-mining", None, mining_goldens));

    println!("reference run (phantom-gen, train-ae, train-diffusion) ...");
    let trained = catch_unwind(AssertUnwindSafe(|| reference_run(tmp.path())));
    match trained {
        Ok((rcfg, _, took)) => {
            println!("reference run ready after {:.0} s (budget 2 h)", took.as_secs_f64());
            let rcfg2 = rcfg.clone();
            results.push(check("radiomics-direction", None, move || radiomics_direction(&rcfg2)));
            results.push(check("contrastive-effect", None, || contrastive_effect(&rcfg)));
            let t = Instant::now();
            let r = catch_unwind(AssertUnwindSafe(|| text_control_and_inpainting(&rcfg)));
            let (tc, ip) = r.unwrap_or_else(|_| ((false, "panicked".into()), (false, "panicked".into())));
            println!("  50 syntheses took {:.0} s", t.elapsed().as_secs_f64());
            results.push(check("text-controllability", None, || tc));
            results.push(check("inpainting-contract", None, || ip));
        }
        Err(_) => {
            for name in ["radiomics-direction", "contrastive-effect", "text-controllability", "inpainting-contract"] {
                results.push(check(name, None, || (false, "reference run failed".into())));
            }
        }
    }

    let failed = results.iter().filter(|r| !r.pass).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
