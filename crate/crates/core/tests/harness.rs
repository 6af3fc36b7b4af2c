use std::fs;
use std::path::Path;

use specdistill::distill::FilterConfig;
use specdistill::harness::{
    read_records, reevaluate, report, run_ablation, run_baseline, run_comparison, run_pipeline,
    run_variants, Ablation, ExperimentConfig, SeedSession, TaskSpec, Variant, SUMMARY_FILE,
};
use specdistill::tinylm::{LMConfig, TinyLM};
use specdistill::Error;

fn tiny(dir: &Path, name: &str) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::arithmetic_default();
    let vocab = cfg.target.vocab_size;
    cfg.name = name.into();
    cfg.output_dir = dir.to_path_buf();
    cfg.task = TaskSpec::Arithmetic {
        digits: 1,
        steps: 1,
    };
    cfg.n_train = 48;
    cfg.n_eval = 6;
    cfg.seeds = vec![3];
    cfg.target = LMConfig {
        vocab_size: vocab,
        context_len: 32,
        n_layers: 1,
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        tie_embeddings: true,
    };
    cfg.draft = LMConfig {
        context_len: 32,
        ..LMConfig::draft_default(vocab)
    };
    for t in [
        &mut cfg.target_train,
        &mut cfg.reference_train,
        &mut cfg.draft_train,
    ] {
        t.epochs = 1;
        t.batch_size = 16;
    }
    cfg.sd.max_new_tokens = 16;
    cfg
}

fn method<'a>(
    records: &'a [specdistill::harness::RunRecord],
    name: &str,
) -> &'a specdistill::harness::RunRecord {
    records.iter().find(|r| r.method == name).unwrap()
}

#[test]
fn invalid_configs_fail_fast_with_every_problem() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path(), "bad");
    cfg.draft.vocab_size += 1;
    cfg.seeds.clear();
    let msg = cfg.validate().unwrap_err().to_string();
    assert!(msg.contains("vocabulary") && msg.contains("seeds"), "{msg}");
    match run_comparison(&cfg) {
        Err(Error::Stage { stage, .. }) => assert_eq!(stage, "config"),
        other => panic!("expected a config stage error, got {other:?}"),
    }
    assert!(!dir.path().join("bad").exists());
}

#[test]
fn unknown_ablation_is_an_error() {
    assert!(matches!(
        "middle_k".parse::<Ablation>(),
        Err(Error::Config(_))
    ));
    for a in Ablation::ALL {
        assert_eq!(a.name().parse::<Ablation>().unwrap(), a);
    }
}

#[test]
fn missing_corpus_is_tagged_with_the_data_stage() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path(), "jsonl");
    cfg.task = TaskSpec::Jsonl {
        train: dir.path().join("nope.jsonl"),
        eval: dir.path().join("nope.jsonl"),
    };
    cfg.tokenizer = specdistill::datasets::TokenizerMode::Word;
    match SeedSession::open(&cfg, 0) {
        Err(Error::Stage { stage, .. }) => assert_eq!(stage, "data"),
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("expected an error"),
    }
}

#[test]
fn paired_runs_share_stages_and_reruns_hit_the_cache() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), "pair");
    let first = run_comparison(&cfg).unwrap();
    assert_eq!(first.len(), 2);
    let base = method(&first, "baseline");
    let sel = method(&first, "selective");
    assert_eq!(base.stages.len(), 2);
    assert_eq!(sel.stages.len(), 3);
    assert_eq!(base.stages[0], sel.stages[0]);
    assert_eq!(base.stages[1], sel.stages[1]);
    assert_ne!(base.config_hash, sel.config_hash);
    assert!((0.0..=1.0).contains(&base.alpha));
    assert!(base.accept + base.reject > 0);
    assert!(sel.analysis.errors_outside_baseline.is_some());

    let target_bytes = fs::read(&sel.stages[0].checkpoint).unwrap();
    let draft_bytes = fs::read(&sel.stages[2].checkpoint).unwrap();
    let again = run_comparison(&cfg).unwrap();
    for (a, b) in first.iter().zip(&again) {
        assert_eq!(a.method, b.method);
        assert_eq!(a.stages, b.stages);
        assert_eq!(
            (a.alpha, a.accept, a.reject, a.tau, a.speedup, a.c),
            (b.alpha, b.accept, b.reject, b.tau, b.speedup, b.c)
        );
        assert_eq!(a.analysis, b.analysis);
    }
    assert_eq!(fs::read(&sel.stages[0].checkpoint).unwrap(), target_bytes);
    assert_eq!(fs::read(&sel.stages[2].checkpoint).unwrap(), draft_bytes);

    let alone = run_baseline(&cfg).unwrap();
    assert_eq!(alone[0].stages, base.stages);
    let piped = run_pipeline(&cfg).unwrap();
    assert_eq!(piped[0].stages, sel.stages);
}

#[test]
fn fresh_output_roots_reproduce_identical_checkpoints() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = run_pipeline(&tiny(a.path(), "det")).unwrap();
    let rb = run_pipeline(&tiny(b.path(), "det")).unwrap();
    for (x, y) in ra[0].stages.iter().zip(&rb[0].stages) {
        assert_eq!(x.fingerprint, y.fingerprint);
        assert_eq!(x.key, y.key);
    }
    assert_eq!(ra[0].alpha, rb[0].alpha);
}

#[test]
fn unit_filter_draft_retraces_the_reference() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path(), "k1");
    cfg.draft_train.filter = FilterConfig::top(1.0);
    cfg.draft_train.lr = cfg.reference_train.lr;
    cfg.draft_train.lr_scaling = true;
    let records = run_comparison(&cfg).unwrap();
    let sel = method(&records, "selective");
    let reference = TinyLM::load(&sel.stages[1].checkpoint).unwrap();
    let draft = TinyLM::load(&sel.stages[2].checkpoint).unwrap();
    assert_eq!(reference.params(), draft.params());
    assert_eq!(method(&records, "baseline").alpha, sel.alpha);
}

#[test]
fn reports_agree_with_records_and_recomputation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), "rep");
    let records = run_comparison(&cfg).unwrap();
    let out = dir.path().join("out");
    let summary = report(&records[..1], &out).unwrap();
    assert_eq!(summary, out.join(SUMMARY_FILE));
    let text = fs::read_to_string(&summary).unwrap();
    assert_eq!(text.lines().count(), 2);

    let summary = report(&records, &out).unwrap();
    let mut rdr = csv::Reader::from_path(&summary).unwrap();
    let headers = rdr.headers().unwrap().clone();
    let col = |name: &str| headers.iter().position(|h| h == name).unwrap();
    let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), records.len());
    for (row, rec) in rows.iter().zip(&records) {
        assert_eq!(row[col("method")], rec.method);
        assert_eq!(row[col("alpha")].parse::<f64>().unwrap(), rec.alpha);
        assert_eq!(row[col("tau")].parse::<f64>().unwrap(), rec.tau);
        assert_eq!(row[col("speedup")].parse::<f64>().unwrap(), rec.speedup);
    }

    let persisted = read_records(dir.path().join("rep")).unwrap();
    assert_eq!(persisted.len(), records.len());
    for rec in &persisted {
        let same = records.iter().find(|r| r.method == rec.method).unwrap();
        assert_eq!(rec.alpha, same.alpha);
        assert_eq!(reevaluate(&cfg, rec).unwrap(), rec.alpha);
    }
    assert!(report(&[], &out).is_err());
}

#[test]
fn k_sweep_emits_one_record_per_fraction_over_shared_stages() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), "sweep");
    let records = run_ablation(&cfg, Ablation::KSweep).unwrap();
    let ks: Vec<f64> = records.iter().map(|r| r.k).collect();
    assert_eq!(ks, vec![0.2, 0.4, 0.6, 0.8, 1.0]);
    for r in &records {
        assert_eq!(r.stages[..2], records[0].stages[..2]);
    }
}

#[test]
fn divergence_and_objective_ablations_complete() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), "abl");
    for a in [
        Ablation::Rkl,
        Ablation::Tvd,
        Ablation::FinetuneOnly,
        Ablation::BottomK,
    ] {
        let records = run_ablation(&cfg, a).unwrap();
        assert!(!records.is_empty());
        for r in &records {
            assert!((0.0..=1.0).contains(&r.alpha), "{}: {}", r.method, r.alpha);
        }
    }
    let custom = vec![Variant {
        method: "custom".into(),
        reference: cfg.reference_train.clone(),
        draft: Some(cfg.draft_train.clone()),
    }];
    assert_eq!(run_variants(&cfg, &custom).unwrap()[0].method, "custom");
}
