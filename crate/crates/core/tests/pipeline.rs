use std::fs;
use std::path::Path;

use cae::checkpoint::Checkpoint;
use cae::data::{make_toy_corpus, Corpus, Split};
use cae::embedder::{pretrain_embedder, PretrainConfig, VoiceEmbedder};
use cae::training::{resume_training, train, TrainConfig, TrainedModels, Trainer};
use cae::{Error, ErrorCategory};
use candle_core::{DType, Device};

fn corpus(dir: &Path) -> Corpus {
    let m = make_toy_corpus(dir, 4, 20, 20, 7).unwrap();
    Corpus::load(&m, Split::Train, 16_000).unwrap()
}

fn quick_embedder(c: &Corpus) -> VoiceEmbedder {
    let cfg = PretrainConfig {
        epochs: 1,
        ..PretrainConfig::default()
    };
    pretrain_embedder(&c.labeled_voices(), &cfg, DType::F32, &Device::Cpu)
        .unwrap()
        .0
}

fn short_config() -> TrainConfig {
    TrainConfig {
        max_steps: 6,
        checkpoint_interval: 3,
        plateau_window: 0,
        seed: 21,
        ..TrainConfig::default()
    }
}

#[test]
fn speaker_pretraining_separates_four_speakers_repeatably() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(dir.path());
    let voices = c.labeled_voices();
    assert_eq!(voices.len(), 4 * 16);
    let (a, report) = pretrain_embedder(&voices, &PretrainConfig::default(), DType::F32, &Device::Cpu).unwrap();
    assert_eq!(report.speakers, 4);
    assert!(report.train_accuracy > 0.9, "accuracy {}", report.train_accuracy);
    assert!(a.is_frozen());

    let short = PretrainConfig {
        epochs: 3,
        ..PretrainConfig::default()
    };
    let (b, _) = pretrain_embedder(&voices, &short, DType::F32, &Device::Cpu).unwrap();
    let (c2, _) = pretrain_embedder(&voices, &short, DType::F32, &Device::Cpu).unwrap();
    assert_eq!(b.digest().unwrap(), c2.digest().unwrap());
    let other = PretrainConfig { seed: 1, ..short };
    let (d, _) = pretrain_embedder(&voices, &other, DType::F32, &Device::Cpu).unwrap();
    assert_ne!(b.digest().unwrap(), d.digest().unwrap());
}

#[test]
fn training_writes_losses_and_checkpoints_and_resumes_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(&dir.path().join("corpus"));
    let embedder = quick_embedder(&c);

    let full_dir = dir.path().join("full");
    let outcome = train(&c, embedder.clone(), short_config(), &full_dir).unwrap();
    assert_eq!(outcome.reports.len(), 6);
    for name in ["losses.csv", "step-3.ckpt", "step-6.ckpt", "final.ckpt"] {
        assert!(full_dir.join(name).is_file(), "{name} missing");
    }
    let csv = fs::read_to_string(&outcome.loss_csv).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 7);
    assert_eq!(
        lines[0],
        "step,L_d_real,L_d_fake,L_c,L1_proposal,L1_target,L_c_gen,L_d_gen,L1_cycle"
    );
    assert!(lines[1..].iter().all(|l| l.split(',').count() == 9));

    // resume from the step-3 checkpoint in a copy of the output directory
    let resumed_dir = dir.path().join("resumed");
    fs::create_dir_all(&resumed_dir).unwrap();
    let partial: String = lines[..4].iter().map(|l| format!("{l}\n")).collect();
    fs::write(resumed_dir.join("losses.csv"), partial).unwrap();
    let mut trainer = Trainer::from_checkpoint(&Checkpoint::load(&full_dir.join("step-3.ckpt")).unwrap()).unwrap();
    assert_eq!(trainer.step(), 3);
    let resumed = resume_training(&mut trainer, &c, &resumed_dir).unwrap();
    assert_eq!(resumed.reports[..], outcome.reports[3..]);
    assert_eq!(fs::read_to_string(resumed_dir.join("losses.csv")).unwrap(), csv);
    assert_eq!(
        fs::read(resumed_dir.join("final.ckpt")).unwrap(),
        fs::read(full_dir.join("final.ckpt")).unwrap()
    );

    let models = TrainedModels::load(&full_dir.join("final.ckpt")).unwrap();
    assert_eq!(models.labels, c.labels);
    assert_eq!(models.embedder.digest().unwrap(), embedder.digest().unwrap());
}

#[test]
fn non_finite_objective_aborts_with_diagnostic_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(&dir.path().join("corpus"));
    let cfg = TrainConfig {
        lambda2: 1e308,
        ..short_config()
    };
    let out = dir.path().join("run");
    let err = train(&c, quick_embedder(&c), cfg, &out).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)), "{err}");
    assert_eq!(err.category(), ErrorCategory::Numeric);
    assert!(out.join("diagnostic.ckpt").is_file());
    assert!(!out.join("final.ckpt").exists());
    Trainer::from_checkpoint(&Checkpoint::load(&out.join("diagnostic.ckpt")).unwrap()).unwrap();
}

#[test]
fn training_rejects_mismatched_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(&dir.path().join("a"));
    let m3 = make_toy_corpus(&dir.path().join("b"), 3, 5, 5, 7).unwrap();
    let c3 = Corpus::load(&m3, Split::Train, 16_000).unwrap();
    let mut t = Trainer::new(short_config(), c.labels.clone(), quick_embedder(&c)).unwrap();
    let err = t.run(&c3, 1, |_, _| Ok(())).unwrap_err();
    assert_eq!(err.category(), ErrorCategory::Data);
}
