use std::path::Path;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use super::Strategy;
use crate::acoustic::{init_params, AcousticConfig, EMBEDDING};
use crate::corpus::{generate_synthetic, Manifest, RetryPolicy, StubClient, MANIFEST_FILE};
use crate::error::Error;
use crate::flow::{self, FlowConfig};
use crate::params::{is_buffer, Param};
use crate::text::{Script, Vocabulary};

fn vocab(n: usize, base: u32, script: Script) -> Vocabulary {
    Vocabulary::from_symbols((0..n as u32 - 2).map(|i| char::from_u32(base + i).unwrap()), script).unwrap()
}

fn roman(n: usize) -> Vocabulary {
    vocab(n, 'A' as u32, Script::Roman)
}

fn devanagari(n: usize) -> Vocabulary {
    vocab(n, 0x0900, Script::Devanagari)
}

fn acoustic_archive(cfg: &AcousticConfig, v: &Vocabulary, seed: u64) -> ParameterArchive {
    let p = init_params(cfg, v.len(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    ParameterArchive::acoustic(p, cfg, v, "english_pretrain", seed).unwrap()
}

/// Shrunken layers with the full 512-wide embedding.
fn wide_embedding_config() -> AcousticConfig {
    AcousticConfig {
        embed_dim: 512,
        ..AcousticConfig::shrunken()
    }
}

fn random_archive(seed: u64) -> ParameterArchive {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = AcousticConfig {
        encoder_dropout: rng.gen_range(0.0..0.9),
        prenet_dropout: rng.gen::<f64>() * 0.9,
        stop_threshold: rng.gen_range(0.05..0.95),
        stop_pos_weight: rng.gen_range(0.1..100.0),
        ..AcousticConfig::shrunken()
    };
    let v = if rng.gen() { roman(rng.gen_range(4..40)) } else { devanagari(rng.gen_range(4..90)) };
    let mut a = acoustic_archive(&cfg, &v, seed);
    for (name, p) in a.params.iter_mut() {
        for x in p.value.data_mut() {
            *x = rng.gen_range(-1e3..1e3) * 10f64.powi(rng.gen_range(-30..30));
        }
        p.trainable = !is_buffer(name) && rng.gen_bool(0.7);
    }
    a.meta.step_count = rng.gen();
    a.meta.seed = rng.gen();
    a.meta.stage = format!("stage-{}-\u{0939}\"\\", rng.gen::<u32>());
    for i in 0..rng.gen_range(0..4) {
        a.meta.provenance.push(ProvenanceEntry {
            stage: format!("s{i}"),
            fingerprint: format!("{:016x}", rng.gen::<u64>()),
            corpus: "toy".into(),
            vocabulary_fingerprint: rng.gen::<bool>().then(|| format!("{:016x}", rng.gen::<u64>())),
            steps: rng.gen(),
            seed: rng.gen(),
        });
    }
    a.sync_meta();
    a
}

#[test]
fn archive_round_trip_is_byte_identical() {
    for seed in 0..20 {
        let a = random_archive(seed);
        let bytes = a.to_bytes().unwrap();
        let b = ParameterArchive::from_bytes(&bytes).unwrap();
        assert_eq!(a, b, "seed {seed}");
        assert_eq!(b.to_bytes().unwrap(), bytes, "seed {seed}");
    }
}

#[test]
fn archive_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nested").join("a.ttsf");
    let a = random_archive(77);
    a.save(&path).unwrap();
    let b = ParameterArchive::load(&path).unwrap();
    b.save(&path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), a.to_bytes().unwrap());
    let leftovers: Vec<_> = std::fs::read_dir(path.parent().unwrap()).unwrap().collect();
    assert_eq!(leftovers.len(), 1, "temporary file left behind");
}

#[test]
fn vocoder_archive_round_trip() {
    let cfg = FlowConfig::toy();
    let p = flow::init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let a = ParameterArchive::vocoder(p, &cfg, "vocoder", 3).unwrap();
    let bytes = a.to_bytes().unwrap();
    let b = ParameterArchive::from_bytes(&bytes).unwrap();
    assert_eq!(b.to_bytes().unwrap(), bytes);
    assert_eq!(b.meta.kind, ModelKind::Vocoder);
}

#[test]
fn header_layout() {
    let a = random_archive(5);
    let bytes = a.to_bytes().unwrap();
    assert_eq!(&bytes[..4], b"TTSF");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), FORMAT_VERSION);
    let meta_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let meta: serde_json::Value = serde_json::from_slice(&bytes[12..12 + meta_len]).unwrap();
    assert_eq!(meta["tensor_count"], a.params.len());
    let rec = &bytes[12 + meta_len..];
    let name_len = u32::from_le_bytes(rec[..4].try_into().unwrap()) as usize;
    assert_eq!(&rec[4..4 + name_len], EMBEDDING.as_bytes());
    assert_eq!(rec[4 + name_len], DTYPE_F64);
    assert_eq!(rec[5 + name_len], 2);
}

#[test]
fn corrupted_magic_is_rejected() {
    let mut bytes = random_archive(1).to_bytes().unwrap();
    bytes[0] = b'X';
    let err = ParameterArchive::from_bytes(&bytes).unwrap_err().to_string();
    assert!(err.contains("magic"), "{err}");
}

#[test]
fn truncated_archives_are_rejected() {
    let bytes = random_archive(2).to_bytes().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut cuts: Vec<usize> = (0..40).map(|_| rng.gen_range(0..bytes.len())).collect();
    cuts.extend([0, 3, 4, 8, 11, 12, bytes.len() - 1]);
    for cut in cuts {
        let err = ParameterArchive::from_bytes(&bytes[..cut]).unwrap_err().to_string();
        assert!(err.contains("truncated"), "cut {cut}: {err}");
    }
    let mut longer = bytes.clone();
    longer.push(0);
    let err = ParameterArchive::from_bytes(&longer).unwrap_err().to_string();
    assert!(err.contains("trailing"), "{err}");
}

#[test]
fn unsupported_version_is_rejected() {
    let mut bytes = random_archive(3).to_bytes().unwrap();
    bytes[4] = 9;
    let err = ParameterArchive::from_bytes(&bytes).unwrap_err().to_string();
    assert!(err.contains("version"), "{err}");
}

#[test]
fn validation_catches_inconsistent_archives() {
    let cfg = AcousticConfig::shrunken();
    let a = acoustic_archive(&cfg, &roman(10), 0);

    let mut wrong_rows = a.clone();
    wrong_rows.meta.vocabulary = Some(roman(11).to_file_string());
    wrong_rows.meta.vocabulary_fingerprint = Some(roman(11).fingerprint());
    assert!(wrong_rows.validate().unwrap_err().to_string().contains("rows"));

    let mut trainable_buffer = a.clone();
    trainable_buffer.params.get_mut("encoder.conv0.bn.running_mean").unwrap().trainable = true;
    trainable_buffer.sync_meta();
    assert!(trainable_buffer.validate().is_err());

    let mut missing = a.clone();
    missing.params.remove("decoder.stop_proj.bias");
    missing.sync_meta();
    assert!(missing.validate().is_err());

    let mut bad_cfg = a.clone();
    bad_cfg.meta.acoustic_config.as_mut().unwrap().prenet_dropout = 0.25;
    assert!(bad_cfg.validate().unwrap_err().to_string().contains("config fingerprint"));
}

#[test]
fn duplicate_tensor_names_are_rejected_on_load() {
    let a = acoustic_archive(&AcousticConfig::shrunken(), &roman(6), 0);
    let mut bytes = a.to_bytes().unwrap();
    let meta_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let start = 12 + meta_len;
    let name_len = u32::from_le_bytes(bytes[start..start + 4].try_into().unwrap()) as usize;
    let shape_len = 2 * 4;
    let rows = roman(6).len();
    let rec_len = 4 + name_len + 2 + shape_len + rows * 16 * 8;
    let record = bytes[start..start + rec_len].to_vec();
    bytes.splice(start + rec_len..start + rec_len, record);
    let err = ParameterArchive::from_bytes(&bytes).unwrap_err().to_string();
    assert!(err.contains("duplicate"), "{err}");
}

#[test]
fn surgery_copies_everything_but_the_embedding() {
    let cfg = wide_embedding_config();
    let a = acoustic_archive(&cfg, &roman(28), 11);
    assert!(a.params.len() >= 50, "{} tensors", a.params.len());
    let v2 = devanagari(72);
    let b = surgery_reset_embedding(&a, &v2, 99).unwrap();
    assert_eq!(b.params.tensor(EMBEDDING).unwrap().shape(), [72, 512]);
    assert_eq!(b.meta.vocabulary_fingerprint, Some(v2.fingerprint()));
    assert_eq!(
        a.params.names().collect::<Vec<_>>(),
        b.params.names().collect::<Vec<_>>()
    );
    for ((name, x), (_, y)) in a.params.iter().zip(b.params.iter()) {
        if name == EMBEDDING {
            continue;
        }
        let bx: Vec<u64> = x.value.data().iter().map(|v| v.to_bits()).collect();
        let by: Vec<u64> = y.value.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bx, by, "{name}");
        assert_eq!(x.trainable, y.trainable, "{name}");
    }
    let again = surgery_reset_embedding(&a, &v2, 99).unwrap();
    assert_eq!(again.to_bytes().unwrap(), b.to_bytes().unwrap());
    let other = surgery_reset_embedding(&a, &v2, 100).unwrap();
    assert_ne!(other.params.tensor(EMBEDDING).unwrap(), b.params.tensor(EMBEDDING).unwrap());
}

#[test]
fn surgery_with_the_same_vocabulary_still_reinitializes() {
    let v = roman(12);
    let a = acoustic_archive(&AcousticConfig::shrunken(), &v, 4);
    let b = surgery_reset_embedding(&a, &v, 5).unwrap();
    let (x, y) = (a.params.tensor(EMBEDDING).unwrap(), b.params.tensor(EMBEDDING).unwrap());
    assert_eq!(x.shape(), y.shape());
    assert!(x.data().iter().zip(y.data()).all(|(p, q)| p != q));
}

#[test]
fn surgery_needs_exactly_one_embedding() {
    let v = roman(8);
    let a = acoustic_archive(&AcousticConfig::shrunken(), &v, 0);
    let mut none = a.clone();
    none.params.remove(EMBEDDING);
    assert!(surgery_reset_embedding(&none, &v, 0).unwrap_err().to_string().contains("no embedding"));
    let mut two = a.clone();
    two.params.push(
        "decoder.embedding".into(),
        Param {
            value: crate::autodiff::Tensor::zeros(&[2, 2]),
            trainable: true,
        },
    );
    assert!(surgery_reset_embedding(&two, &v, 0).unwrap_err().to_string().contains("2 embedding"));
}

#[test]
fn freeze_policies() {
    let a = acoustic_archive(&AcousticConfig::shrunken(), &roman(8), 0);
    let f = apply_freeze(&a, &FreezePolicy::encoder()).unwrap();
    for (name, p) in f.params.iter() {
        let expect = !name.starts_with("encoder.") && !is_buffer(name);
        assert_eq!(p.trainable, expect, "{name}");
    }
    assert!(f.params.iter().any(|(n, p)| n.starts_with("decoder.attention") && p.trainable));
    let thawed = apply_freeze(&f, &FreezePolicy::default()).unwrap();
    for (name, p) in thawed.params.iter() {
        assert_eq!(p.trainable, !is_buffer(name), "{name}");
    }
    let err = apply_freeze(&a, &FreezePolicy::new(["encoder.", "encodr."])).unwrap_err();
    assert!(err.to_string().contains("encodr."), "{err}");
    let bytes = f.to_bytes().unwrap();
    assert_eq!(ParameterArchive::from_bytes(&bytes).unwrap(), f);
}

#[test]
fn plan_json_resolves_paths_and_defaults() {
    let json = r#"{
        "schema_version": 1,
        "stage": "target_finetune",
        "manifest": "target/manifest.jsonl",
        "init": "ckpt/b.ttsf",
        "output": "ckpt/c.ttsf",
        "freeze": ["encoder."],
        "stop": {"max_steps": 10, "plateau": {"window": 3, "min_delta": 0.001}},
        "seed": 7
    }"#;
    let p = StagePlan::parse(json, Path::new("/work")).unwrap();
    assert_eq!(p.manifest, Path::new("/work/target/manifest.jsonl"));
    assert_eq!(p.init.as_deref(), Some(Path::new("/work/ckpt/b.ttsf")));
    assert_eq!(p.report_path(), Path::new("/work/ckpt/c.ttsf.report.json"));
    assert_eq!(p.batch_size, DEFAULT_BATCH_SIZE);
    assert_eq!(p.optimizer_settings().lr, FINETUNE_LR);
    assert_eq!(p.freeze, FreezePolicy::encoder());
    assert_eq!(p.model.resolve().unwrap(), AcousticConfig::shrunken());
    let back = StagePlan::parse(&serde_json::to_string(&p).unwrap(), Path::new("/elsewhere")).unwrap();
    assert_eq!(back, p);
}

#[test]
fn plan_validation_rules() {
    let base = StagePlan::new(StageId::EnglishPretrain, "m.jsonl", "a.ttsf", 5, 0);
    base.validate().unwrap();
    let mut with_init = base.clone();
    with_init.init = Some("x.ttsf".into());
    assert!(with_init.validate().is_err());
    let b = StagePlan::new(StageId::SyntheticPretrain, "m.jsonl", "b.ttsf", 5, 0);
    assert!(b.validate().is_err());
    let mut c = StagePlan::new(StageId::TargetFinetune, "m.jsonl", "c.ttsf", 5, 0);
    c.validate().unwrap();
    c.freeze = FreezePolicy::encoder();
    assert!(c.validate().is_err());
    let mut v2 = base.clone();
    v2.schema_version = 2;
    assert!(v2.validate().unwrap_err().to_string().contains("schema_version"));
    let mut preset = base.clone();
    preset.model = ModelSpec::Preset("huge".into());
    assert!(preset.validate().is_err());
    let unknown = r#"{"schema_version":1,"stage":"english_pretrain","manifest":"m","output":"o","stop":{"max_steps":1},"seed":0,"lr":1}"#;
    assert!(StagePlan::parse(unknown, Path::new(".")).is_err());
}

fn inputs(dir: &Path) -> StrategyInputs {
    StrategyInputs {
        english: dir.join("en/manifest.jsonl"),
        synthetic: dir.join("syn/manifest.jsonl"),
        target: dir.join("tgt/manifest.jsonl"),
        out_dir: dir.join("out"),
        steps: [3, 3, 3],
        batch_size: 2,
        seed: 1,
        model: ModelSpec::default(),
    }
}

#[test]
fn strategies_expand_to_chained_plans() {
    let inp = inputs(Path::new("/w"));
    let shapes: Vec<Vec<StageId>> = Strategy::ALL
        .iter()
        .map(|s| strategy_plans(*s, &inp).iter().map(|p| p.stage).collect())
        .collect();
    use StageId::*;
    assert_eq!(shapes, vec![
        vec![TargetFinetune],
        vec![EnglishPretrain, TargetFinetune],
        vec![EnglishPretrain, SyntheticPretrain, TargetFinetune],
        vec![EnglishPretrain, SyntheticPretrain, TargetFinetune],
    ]);
    for s in Strategy::ALL {
        let plans = strategy_plans(s, &inp);
        for p in &plans {
            p.validate().unwrap();
        }
        for w in plans.windows(2) {
            assert_eq!(w[1].init.as_ref(), Some(&w[0].output));
        }
    }
    let frozen = strategy_plans(Strategy::AbcFrozen, &inp);
    assert_eq!(frozen[2].freeze, FreezePolicy::encoder());
    assert_eq!(frozen[1].surgery, Surgery::ResetEmbedding);
    assert_eq!(frozen[2].surgery, Surgery::None);
    assert!(strategy_plans(Strategy::AbcFull, &inp)[2].freeze.is_empty());
}

#[test]
fn buckets_group_similar_lengths() {
    let u = |n: usize| Utterance {
        ids: vec![2; n],
        mel: crate::autodiff::Tensor::zeros(&[1, 80]),
    };
    let utts = vec![u(5), u(2), u(9), u(2), u(7)];
    assert_eq!(length_buckets(&utts, 2), vec![vec![1, 3], vec![0, 4], vec![2]]);
}

#[test]
fn example_seeds_differ() {
    let mut seen = std::collections::HashSet::new();
    for step in 0..50 {
        for i in 0..20 {
            assert!(seen.insert(example_seed(3, step, i)));
        }
    }
}

fn toy_corpus(dir: &Path, corpus: &str, texts: &[&str]) -> std::path::PathBuf {
    let out = dir.join(corpus);
    let texts: Vec<String> = texts.iter().map(|t| t.to_string()).collect();
    generate_synthetic(&texts, &StubClient, "stub", &out, corpus, &RetryPolicy::default()).unwrap();
    out.join(MANIFEST_FILE)
}

#[test]
fn padding_frames_do_not_change_the_example_loss() {
    let dir = tempfile::tempdir().unwrap();
    let m = Manifest::load(toy_corpus(dir.path(), "en", &["ab"])).unwrap();
    let v = crate::text::build_vocabulary(&m.texts(), m.script).unwrap();
    let utts = load_utterances(&m, &v).unwrap();
    let cfg = AcousticConfig::shrunken();
    let p = init_params(&cfg, v.len(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let s = utts[0].mel.rows();
    let a = example_gradient(&p, &cfg, &utts[0], s, 9).unwrap();
    let b = example_gradient(&p, &cfg, &utts[0], s + 17, 9).unwrap();
    assert!((a.parts.total() - b.parts.total()).abs() <= 1e-6);
}

#[test]
fn stage_runs_deterministically_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = toy_corpus(dir.path(), "en", &["ab", "ba", "abb"]);
    let run = |name: &str| {
        let mut p = StagePlan::new(StageId::EnglishPretrain, &manifest, dir.path().join(name), 3, 5);
        p.batch_size = 2;
        p.checkpoint_every = Some(2);
        run_stage(&p).unwrap()
    };
    let (a1, r1) = run("a1.ttsf");
    let (a2, r2) = run("a2.ttsf");
    assert_eq!(a1.to_bytes().unwrap(), a2.to_bytes().unwrap());
    assert_eq!(r1.loss_curve, r2.loss_curve);
    assert_eq!(r1.steps, 3);
    assert_eq!(r1.halt, HaltReason::MaxSteps);
    assert_eq!(r1.checkpoints.len(), 1);
    assert_eq!(a1.meta.step_count, 3);
    assert_eq!(a1.meta.provenance.len(), 1);
    assert_eq!(a1.meta.provenance[0].fingerprint, a1.tensor_fingerprint().unwrap());
    let on_disk = ParameterArchive::load(dir.path().join("a1.ttsf")).unwrap();
    assert_eq!(on_disk, a1);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("a1.ttsf.report.json")).unwrap()).unwrap();
    assert_eq!(report["loss_curve"].as_array().unwrap().len(), 3);
    assert_eq!(report["halt"], "max_steps");
    assert!(r1.delta("encoder").unwrap().changed > 0);
}

#[test]
fn frozen_fine_tuning_leaves_the_encoder_alone_and_refuses_mismatched_vocabularies() {
    let dir = tempfile::tempdir().unwrap();
    let en = toy_corpus(dir.path(), "en", &["ab", "ba"]);
    let hi = toy_corpus(dir.path(), "hi", &["\u{0915}\u{0916}", "\u{0916}\u{0915}\u{0915}"]);
    let hi_extra = toy_corpus(dir.path(), "hi2", &["\u{0915}\u{0917}"]);
    let mut a = StagePlan::new(StageId::EnglishPretrain, &en, dir.path().join("a.ttsf"), 2, 1);
    a.batch_size = 2;
    run_stage(&a).unwrap();

    let mut c = StagePlan::new(StageId::TargetFinetune, &hi, dir.path().join("c.ttsf"), 2, 2);
    c.init = Some(a.output.clone());
    c.freeze = FreezePolicy::encoder();
    let err = run_stage(&c).unwrap_err();
    assert!(matches!(err, Error::Plan(_)) && err.to_string().contains("reset_embedding"), "{err}");
    assert!(!c.output.exists(), "refused stage must not write an archive");

    c.surgery = Surgery::ResetEmbedding;
    c.freeze = FreezePolicy::default();
    let (b_arch, _) = run_stage(&c).unwrap();
    assert_eq!(b_arch.meta.provenance.len(), 2);

    let mut d = StagePlan::new(StageId::TargetFinetune, &hi, dir.path().join("d.ttsf"), 3, 3);
    d.init = Some(c.output.clone());
    d.freeze = FreezePolicy::encoder();
    d.batch_size = 1;
    let (d_arch, report) = run_stage(&d).unwrap();
    assert!(report.vocabulary_reused);
    assert_eq!(report.delta("encoder").unwrap().changed, 0);
    assert!(report.delta("decoder").unwrap().changed > 0);
    assert!(report.frozen_changed.is_empty());
    for (name, p) in b_arch.params.iter().filter(|(n, _)| n.starts_with("encoder.")) {
        assert_eq!(p.value, d_arch.params.get(name).unwrap().value, "{name}");
    }
    assert_eq!(d_arch.meta.provenance.len(), 3);

    let mut e = StagePlan::new(StageId::TargetFinetune, &hi_extra, dir.path().join("e.ttsf"), 1, 3);
    e.init = Some(c.output.clone());
    let err = run_stage(&e).unwrap_err().to_string();
    assert!(err.contains("uncovered") && err.contains('\u{0917}'), "{err}");
}

#[test]
fn recipe_rejects_broken_chains() {
    let inp = inputs(Path::new("/nonexistent"));
    let mut plans = strategy_plans(Strategy::AbcFull, &inp);
    plans[2].init = Some("/nonexistent/other.ttsf".into());
    let err = run_recipe(&plans).unwrap_err().to_string();
    assert!(err.contains("broken chain"), "{err}");
    assert!(run_recipe(&[]).is_err());
}

#[test]
fn plateau_halts_and_flags_non_convergence() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = toy_corpus(dir.path(), "tgt", &["ab"]);
    let mut p = StagePlan::new(StageId::TargetFinetune, &manifest, dir.path().join("c.ttsf"), 50, 0);
    p.optimizer = Some(crate::optim::AdamSettings::with_lr(1e-9));
    p.stop.plateau = Some(Plateau {
        window: 2,
        min_delta: 1e-3,
    });
    p.stop.converged_below = Some(0.01);
    let (_, r) = run_stage(&p).unwrap();
    assert_eq!(r.halt, HaltReason::Plateau);
    assert!(r.steps >= 4 && r.steps < 50, "{} steps", r.steps);
    assert_eq!(r.converged, Some(false));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn archive_round_trip_property(seed in any::<u64>()) {
        let a = random_archive(seed);
        let bytes = a.to_bytes().unwrap();
        let b = ParameterArchive::from_bytes(&bytes).unwrap();
        prop_assert_eq!(b.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn surgery_copy_law(seed in any::<u64>(), rows in 3usize..80) {
        let a = random_archive(seed);
        let v = devanagari(rows);
        let b = surgery_reset_embedding(&a, &v, seed).unwrap();
        prop_assert_eq!(b.params.tensor(EMBEDDING).unwrap().shape()[0], rows);
        for ((name, x), (_, y)) in a.params.iter().zip(b.params.iter()) {
            if name != EMBEDDING {
                prop_assert!(x.value.data().iter().zip(y.value.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
            }
        }
    }

    #[test]
    fn freeze_law_flags(mask in proptest::collection::vec(any::<bool>(), 3)) {
        let a = acoustic_archive(&AcousticConfig::shrunken(), &roman(6), 0);
        let prefixes: Vec<&str> = ["encoder.", "decoder.", "postnet."].iter().zip(&mask).filter(|(_, m)| **m).map(|(p, _)| *p).collect();
        let policy = FreezePolicy::new(prefixes.clone());
        let f = apply_freeze(&a, &policy).unwrap();
        for (name, p) in f.params.iter() {
            let frozen = prefixes.iter().any(|q| name.starts_with(q)) || is_buffer(name);
            prop_assert_eq!(p.trainable, !frozen);
        }
    }
}
