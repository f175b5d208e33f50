use std::fs;
use std::path::Path;

use textgan_core::checkpoint::Checkpoint;
use textgan_core::config::{RunConfig, Scale};
use textgan_core::metrics::{parse_csv, CSV_HEADER};
use textgan_core::report::emit_report;
use textgan_core::runner::{self, Runner, DIAGNOSTIC_CKPT, METRICS_FILE, PRETRAIN_CKPT};
use textgan_core::{Error, Phase, VariantTag};

fn tiny(variant: VariantTag, out: &Path) -> RunConfig {
    let mut c = RunConfig::default();
    c.model.variant = variant;
    c.model.d_model = 8;
    c.model.n_layers = 1;
    c.model.n_heads = 2;
    c.model.d_head = 4;
    c.model.d_ff = 16;
    c.model.max_len = 6;
    c.model.vocab_size = 12;
    c.data.n_train = 64;
    c.data.n_test = 16;
    c.data.oracle_hidden = 8;
    c.train.pretrain_iters = 4;
    c.train.adv_iters = 3;
    c.train.batch_size = 8;
    c.train.batches_per_iter = 2;
    c.train.eval_every = 2;
    c.train.checkpoint_every = 2;
    c.train.eval_samples = 8;
    c.train.eval_batch = 16;
    c.run.seed = 11;
    c.run.out_dir = out.to_path_buf();
    c
}

fn csv(dir: &Path) -> String {
    fs::read_to_string(dir.join(METRICS_FILE)).unwrap()
}

#[test]
fn zero_iterations_emit_only_the_initial_record() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(VariantTag::Lstm, dir.path());
    cfg.train.pretrain_iters = 0;
    let recs = runner::run_pretrain(&cfg).unwrap();
    assert_eq!(recs.len(), 1);
    assert_eq!((recs[0].phase, recs[0].iteration), (Phase::Pretrain, 0));
    assert_eq!(textgan_core::metrics::write_csv(&recs), csv(dir.path()));
    assert!(dir.path().join(PRETRAIN_CKPT).is_file());
}

#[test]
fn same_seed_gives_identical_artifacts() {
    for v in [VariantTag::Lstm, VariantTag::EncDecShiftedTarget] {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        for d in [&a, &b] {
            let mut r = Runner::new(tiny(v, d.path())).unwrap();
            r.pretrain().unwrap();
            r.adversarial().unwrap();
        }
        assert_eq!(csv(a.path()), csv(b.path()), "{v}");
        let samples = |d: &Path| fs::read_to_string(d.join(runner::SAMPLES_FILE)).unwrap();
        assert_eq!(samples(a.path()), samples(b.path()));
        assert!(samples(a.path()).starts_with("# seed=11\n"));
        let other = tempfile::tempdir().unwrap();
        let mut cfg = tiny(v, other.path());
        cfg.run.seed = 12;
        let mut r = Runner::new(cfg).unwrap();
        r.pretrain().unwrap();
        assert_ne!(csv(a.path()).lines().nth(3), csv(other.path()).lines().nth(3));
    }
}

#[test]
fn schedule_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let mut r = Runner::new(tiny(VariantTag::EncoderOnly, dir.path())).unwrap();
    let pre = r.pretrain().unwrap();
    let adv = r.adversarial().unwrap();
    let its = |v: &[textgan_core::MetricsRecord]| v.iter().map(|x| x.iteration).collect::<Vec<_>>();
    assert_eq!(its(&pre), vec![0, 1, 2, 4]);
    assert_eq!(its(&adv), vec![0, 1, 2, 3]);
    assert!(adv.iter().all(|x| x.phase == Phase::Adversarial));
    for f in ["checkpoints/pretrain-0002.ckpt", "checkpoints/pretrain-0004.ckpt", "checkpoints/adversarial-0002.ckpt", "pretrain.ckpt", "adversarial.ckpt", "config.toml", "collapse.csv"] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
    let ck = Checkpoint::load(&dir.path().join("adversarial.ckpt")).unwrap();
    assert_eq!((ck.manifest.phase, ck.manifest.iteration, ck.manifest.seed), (Phase::Adversarial, 3, 11));
    assert!(ck.manifest.baseline.is_some());
    for (name, t) in r.gen.store.iter() {
        let bits = |x: &[f32]| x.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(t.data()), bits(ck.get(name).unwrap().data()), "{name}");
    }
    assert!(RunConfig::load(&dir.path().join("config.toml")).unwrap() == r.cfg);
}

#[test]
fn resume_replays_the_uninterrupted_stream() {
    let full = tempfile::tempdir().unwrap();
    let mut r = Runner::new(tiny(VariantTag::Lstm, full.path())).unwrap();
    r.pretrain().unwrap();
    r.adversarial().unwrap();
    let reference = csv(full.path());

    for (ck, skip) in [("checkpoints/pretrain-0002.ckpt", 4), ("checkpoints/adversarial-0002.ckpt", 8)] {
        let resumed = tempfile::tempdir().unwrap();
        let ck = Checkpoint::load(&full.path().join(ck)).unwrap();
        let recs = runner::run_adversarial(&tiny(VariantTag::Lstm, resumed.path()), &ck).unwrap();
        let tail: Vec<&str> = reference.lines().skip(skip).collect();
        let text = csv(resumed.path());
        let got: Vec<&str> = text.lines().skip(1).collect();
        assert_eq!(got, tail);
        assert!(!recs.is_empty());
    }

    // resuming in place truncates the log at the checkpoint and rebuilds it
    let ck = Checkpoint::load(&full.path().join("checkpoints/pretrain-0002.ckpt")).unwrap();
    runner::run_adversarial(&tiny(VariantTag::Lstm, full.path()), &ck).unwrap();
    assert_eq!(csv(full.path()), reference);
}

#[test]
fn checkpoint_config_mismatch_is_contract_error() {
    let dir = tempfile::tempdir().unwrap();
    runner::run_pretrain(&tiny(VariantTag::Lstm, dir.path())).unwrap();
    let ck = Checkpoint::load(&dir.path().join(PRETRAIN_CKPT)).unwrap();
    let other = tempfile::tempdir().unwrap();
    let err = runner::run_adversarial(&tiny(VariantTag::EncDecShiftedTarget, other.path()), &ck).unwrap_err();
    assert!(matches!(err, Error::Contract(_)), "{err}");
    let mut cfg = tiny(VariantTag::Lstm, other.path());
    cfg.model.d_model = 16;
    assert!(matches!(runner::run_adversarial(&cfg, &ck), Err(Error::Contract(_))));
}

#[test]
fn all_empty_generator_serialises_nan() {
    let dir = tempfile::tempdir().unwrap();
    let mut r = Runner::new(tiny(VariantTag::EncDecEmptyTarget, dir.path())).unwrap();
    r.cfg.train.pretrain_iters = 0;
    let bias = r.gen.head.b;
    r.gen.store.get_mut(bias).data_mut()[textgan_core::data::EOS] = 1e4;
    r.pretrain().unwrap();
    let adv = r.adversarial().unwrap();
    let last = adv.last().unwrap();
    assert_eq!(last.empty_fraction, 1.0);
    assert!(last.bleu.iter().chain(&last.self_bleu).all(Option::is_none));
    assert!(runner::is_collapsed(last));
    let text = csv(dir.path());
    assert!(text.starts_with(CSV_HEADER));
    let row = text.lines().last().unwrap();
    assert_eq!(row.split(',').filter(|c| *c == "nan").count(), 10, "{row}");
    let files = emit_report(dir.path()).unwrap();
    assert!(fs::read_to_string(files.table).unwrap().contains("<empty>"));
}

#[test]
fn numerical_abort_leaves_diagnostic_and_partial_csv() {
    let dir = tempfile::tempdir().unwrap();
    let mut r = Runner::new(tiny(VariantTag::Lstm, dir.path())).unwrap();
    r.cfg.train.pretrain_iters = 2;
    r.pretrain().unwrap();
    r.cfg.train.pretrain_iters = 4;
    let embed = r.gen.embed;
    r.gen.store.get_mut(embed).data_mut().iter_mut().for_each(|x| *x = f32::NAN);
    let err = r.pretrain().unwrap_err();
    assert!(matches!(err, Error::NonFinite { .. }), "{err}");
    let ck = Checkpoint::load(&dir.path().join(DIAGNOSTIC_CKPT)).unwrap();
    assert!(ck.manifest.diagnostic);
    assert_eq!(ck.manifest.iteration, 3);
    let recs = parse_csv(&csv(dir.path())).unwrap();
    assert_eq!(recs.iter().map(|x| x.iteration).collect::<Vec<_>>(), vec![0, 1, 2]);
}

#[test]
fn missing_corpus_is_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let err = runner::run_experiment(2, Scale::Desk, Path::new("/nonexistent"), dir.path(), 1).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
    assert!(matches!(runner::run_experiment(7, Scale::Desk, Path::new("."), dir.path(), 1), Err(Error::Config(_))));
}

#[test]
fn corpus_runs_with_embeddings() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c.txt");
    fs::write(&corpus, "a dog on a hill\na cat on a mat\nthe dog runs\nthe cat sits .\n".repeat(10)).unwrap();
    let emb = dir.path().join("e.txt");
    fs::write(&emb, "2 8\ndog 1 0 0 0 0 0 0 0\ncat 0 1 0 0 0 0 0 0\n").unwrap();
    let mut cfg = tiny(VariantTag::EncDecEmptyTarget, &dir.path().join("run"));
    cfg.data.source = textgan_core::config::DataSource::Corpus;
    cfg.data.corpus = Some(corpus);
    cfg.data.embeddings = Some(emb);
    cfg.model.vocab_size = 50;
    let data = runner::prepare_data(&cfg).unwrap();
    assert_eq!(data.test.len(), 4);
    assert!(data.embeddings.as_ref().unwrap().coverage > 0.0);
    let r = Runner::new(cfg).unwrap();
    let dog = data.vocab.id("dog");
    assert_eq!(&r.gen.store.get(r.gen.embed).data()[dog * 8..dog * 8 + 2], &[1.0, 0.0]);
}
