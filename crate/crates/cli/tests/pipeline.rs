use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command as Proc;
use std::time::Instant;

use clap::Parser;
use tumorsynth::turing::TuringStudy;
use tumorsynth_cli::app::{run, Cli};
use tumorsynth_cli::manifest::{load_manifest, INCOMPLETE_MARKER, MANIFEST_FILE};
use tumorsynth_cli::pipeline::{self, AE, AUGMENT, DIFFUSION, PHANTOMS, RADIOMICS, SYNTH, TURING};
use tumorsynth_cli::{CliError, Manifest, RunConfig, Stage};

const SMOKE: &str = include_str!("../../../configs/smoke.toml");

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("run.toml");
    std::fs::write(&p, text).unwrap();
    p
}

fn cli(config: &Path, out: &Path, args: &[&str]) -> Result<Manifest, CliError> {
    let mut argv = vec![
        "tumorsynth".to_string(),
        "--config".into(),
        config.display().to_string(),
        "--out".into(),
        out.display().to_string(),
    ];
    argv.extend(args.iter().map(|s| s.to_string()));
    run(&Cli::try_parse_from(argv).unwrap())
}

fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_owned(), std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

#[test]
fn full_pipeline_smoke_run() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), SMOKE);
    let out = tmp.path().join("run");
    let t0 = Instant::now();

    let m = cli(&config, &out, &["phantom-gen"]).unwrap();
    assert_eq!(m.command, "phantom-gen");
    assert_eq!(m.metrics["items"], 4);
    let first = tree(&out.join(PHANTOMS));
    cli(&config, &out, &["phantom-gen"]).unwrap();
    assert_eq!(first, tree(&out.join(PHANTOMS)), "phantom-gen is not byte-reproducible");

    let m = cli(&config, &out, &["train-ae"]).unwrap();
    assert!(m.metrics["final_reconstruction"].as_f64().unwrap().is_finite());
    assert!(m.artifacts.iter().any(|a| a.path.extension().is_some_and(|e| e == "ckpt")), "{:?}", m.artifacts);

    let m = cli(&config, &out, &["train-diffusion", "--contrastive", "off"]).unwrap();
    assert_eq!(m.flags["contrastive"], "off");
    assert_eq!(m.metrics["lambda_c"], 0.0);
    assert_eq!(m.config["contrastive"]["lambda_c"], 0.0);
    let m = cli(&config, &out, &["train-diffusion"]).unwrap();
    assert_eq!(m.flags["contrastive"], "on");
    assert_eq!(m.metrics["lambda_c"], 0.1);
    assert!(m.metrics["final_ldm"].as_f64().unwrap().is_finite());

    let m = cli(&config, &out, &["synthesize"]).unwrap();
    assert_eq!(m.metrics["syntheses"], 2);
    let synth = pipeline::load_synth(&RunConfig::load(&config).map(|mut c| {
        c.output_dir = out.clone();
        c
    }).unwrap())
    .unwrap();
    for (k, (rec, v, mask)) in synth.iter().enumerate() {
        assert_eq!(v.dims(), mask.dims());
        assert!(v.data().iter().all(|x| (0.0..=1.0).contains(x)));
        assert_eq!(rec.provenance.seed, 1_000_003 + k as u64);
    }

    let m = cli(&config, &out, &["augment", "--kinds", "fn"]).unwrap();
    assert_eq!(m.flags["kinds"], "false_negative");
    assert_eq!(m.metrics["false_positives"], 0);
    let m = cli(&config, &out, &["augment"]).unwrap();
    let augmented = m.metrics["augmented"].as_u64().unwrap();
    let m = cli(&config, &out, &["train-diffusion", "--targeted-aug"]).unwrap();
    assert_eq!(m.metrics["targeted_samples"].as_u64().unwrap(), augmented);
    assert_ne!(m.flags["targeted_aug"], "off");

    let m = cli(&config, &out, &["radiomics-compare"]).unwrap();
    assert_eq!(m.flags["synthesized_set"], "true");
    for key in ["mv/varied/liver", "mv/fixed/liver", "mv/text-diffusion/liver"] {
        assert!(m.metrics[key].as_f64().unwrap().is_finite(), "{key}");
    }
    assert!(out.join(RADIOMICS).join("table.tsv").exists());

    let m = cli(&config, &out, &["turing-serve", "--prepare-only"]).unwrap();
    assert_eq!(m.metrics["cases"], 2);
    let cases: Vec<tumorsynth::turing::TuringCase> =
        serde_json::from_str(&std::fs::read_to_string(out.join(TURING).join("cases.json")).unwrap()).unwrap();
    let mut study = TuringStudy::open(cases.clone(), &out, None, 1).unwrap();
    for c in &cases {
        let s = study.slice(&c.case_id, 8).unwrap();
        assert_eq!((s.height, s.width), (16, 16));
    }

    for stage in [PHANTOMS, AE, DIFFUSION, SYNTH, AUGMENT, RADIOMICS, TURING] {
        let dir = out.join(stage);
        assert!(!dir.join(INCOMPLETE_MARKER).exists(), "{stage}");
        let m = load_manifest(&dir).unwrap();
        assert_eq!(m.seed, 1);
        for a in &m.artifacts {
            let bytes = std::fs::read(dir.join(&a.path)).unwrap();
            assert_eq!(a.bytes, bytes.len() as u64);
            assert_eq!(a.sha256, tumorsynth::digest::sha256_hex(&[&bytes]));
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    println!("smoke pipeline took {secs:.1} s");
    assert!(secs < 600.0);
}

#[test]
fn interrupted_stage_is_refused_downstream() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("stage");
    {
        let st = Stage::begin(dir.clone(), "phantom-gen").unwrap();
        st.write("items.jsonl", "").unwrap();
    }
    assert!(dir.join(INCOMPLETE_MARKER).exists());
    assert!(!dir.join(MANIFEST_FILE).exists());
    assert!(load_manifest(&dir).is_err());
}

#[test]
fn binary_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let bin = env!("CARGO_BIN_EXE_tumorsynth");

    let bad = write_config(tmp.path(), &SMOKE.replace("lambda_c = 0.1", "lambda_c = 0.1\nweight = 3"));
    let out = tmp.path().join("never");
    let r = Proc::new(bin)
        .args(["--config", bad.to_str().unwrap(), "--out", out.to_str().unwrap(), "phantom-gen"])
        .output()
        .unwrap();
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("config"));
    assert!(!out.exists(), "a config error must not create output");

    let neg = write_config(tmp.path(), &SMOKE.replace("margin = 1.0", "margin = -1.0"));
    let r = Proc::new(bin)
        .args(["--config", neg.to_str().unwrap(), "--out", out.to_str().unwrap(), "phantom-gen"])
        .output()
        .unwrap();
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("[contrastive]"));

    let good = write_config(tmp.path(), SMOKE);
    let r = Proc::new(bin)
        .args(["--config", good.to_str().unwrap(), "--out", out.to_str().unwrap(), "train-ae"])
        .output()
        .unwrap();
    assert_eq!(r.status.code(), Some(3), "missing inputs are a runtime failure");

    let r = Proc::new(bin).args(["--config", "/nonexistent.toml", "phantom-gen"]).output().unwrap();
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn contrastive_on_requires_a_positive_weight() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), &SMOKE.replace("lambda_c = 0.1", "lambda_c = 0.0"));
    let out = tmp.path().join("run");
    let err = cli(&config, &out, &["train-diffusion", "--contrastive", "on"]).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}
