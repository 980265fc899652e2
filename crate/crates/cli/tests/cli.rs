use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

fn cae(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cae"))
        .args(["--log-level", "warn"])
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = cae(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Corpus, voice checkpoint and a briefly trained model, built once.
struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn manifest(&self) -> PathBuf {
        self.root.join("corpus/manifest.tsv")
    }
    fn voice_ckpt(&self) -> PathBuf {
        self.root.join("voice.ckpt")
    }
    fn model(&self) -> PathBuf {
        self.root.join("run/final.ckpt")
    }
    fn face(&self, id: usize) -> PathBuf {
        self.root.join(format!("corpus/faces/id{id:02}_000.png"))
    }
    fn voice(&self, id: usize) -> PathBuf {
        self.root.join(format!("corpus/voices/id{id:02}_000.wav"))
    }
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let f = Fixture { _dir: dir, root };
        let corpus = f.root.join("corpus");
        ok(&[
            "--seed",
            "7",
            "make-toy-corpus",
            "--out",
            s(&corpus),
            "--identities",
            "3",
            "--faces-per-id",
            "5",
            "--clips-per-id",
            "5",
        ]);
        ok(&[
            "pretrain-voice",
            "--manifest",
            s(&f.manifest()),
            "--out",
            s(&f.voice_ckpt()),
            "--epochs",
            "1",
        ]);
        ok(&[
            "train",
            "--manifest",
            s(&f.manifest()),
            "--voice-ckpt",
            s(&f.voice_ckpt()),
            "--out-dir",
            s(&f.root.join("run")),
            "--max-steps",
            "30",
            // enough movement for different voices to change some output pixels
            "--set",
            "learning_rate=1e-3",
            "--set",
            "plateau_window=0",
        ]);
        f
    })
}

#[test]
fn toy_corpus_has_expected_files() {
    let dir = tempfile::tempdir().unwrap();
    ok(&[
        "--seed",
        "7",
        "make-toy-corpus",
        "--out",
        s(dir.path()),
        "--identities",
        "4",
        "--faces-per-id",
        "10",
        "--clips-per-id",
        "10",
    ]);
    assert_eq!(fs::read_dir(dir.path().join("faces")).unwrap().count(), 40);
    assert_eq!(fs::read_dir(dir.path().join("voices")).unwrap().count(), 40);
    let manifest = fs::read_to_string(dir.path().join("manifest.tsv")).unwrap();
    assert_eq!(manifest.lines().skip(1).filter(|l| !l.trim().is_empty()).count(), 80);
}

#[test]
fn training_writes_loss_log() {
    let f = fixture();
    let csv = fs::read_to_string(f.root.join("run/losses.csv")).unwrap();
    assert_eq!(csv.lines().count(), 31);
}

#[test]
fn infer_is_byte_for_byte_repeatable() {
    let f = fixture();
    let a = f.root.join("infer_a.png");
    let b = f.root.join("infer_b.png");
    for out in [&a, &b] {
        ok(&[
            "infer",
            "--ckpt",
            s(&f.model()),
            "--face",
            s(&f.face(0)),
            "--voice",
            s(&f.voice(1)),
            "--out",
            s(out),
        ]);
    }
    let (a, b) = (fs::read(a).unwrap(), fs::read(b).unwrap());
    assert!(!a.is_empty());
    assert_eq!(a, b);
}

#[test]
fn grid_one_face_three_voices_gives_distinct_images() {
    let f = fixture();
    let out = f.root.join("grid_1x3");
    let (v0, v1, v2) = (f.voice(0), f.voice(1), f.voice(2));
    ok(&[
        "infer",
        "--grid",
        "--ckpt",
        s(&f.model()),
        "--face",
        s(&f.face(0)),
        "--voice",
        s(&v0),
        "--voice",
        s(&v1),
        "--voice",
        s(&v2),
        "--out",
        s(&out),
    ]);
    let images: Vec<Vec<u8>> = (0..3)
        .map(|v| fs::read(out.join(format!("face00_voice{v:02}.png"))).unwrap())
        .collect();
    assert_ne!(images[0], images[1]);
    assert_ne!(images[0], images[2]);
    assert_ne!(images[1], images[2]);
}

#[test]
fn grid_three_faces_one_voice_gives_three_images() {
    let f = fixture();
    let out = f.root.join("grid_3x1");
    let (f0, f1, f2) = (f.face(0), f.face(1), f.face(2));
    ok(&[
        "infer",
        "--grid",
        "--ckpt",
        s(&f.model()),
        "--face",
        s(&f0),
        "--face",
        s(&f1),
        "--face",
        s(&f2),
        "--voice",
        s(&f.voice(0)),
        "--out",
        s(&out),
    ]);
    assert_eq!(fs::read_dir(&out).unwrap().count(), 3);
}

#[test]
fn eval_writes_json_report() {
    let f = fixture();
    let report = f.root.join("eval/report.json");
    ok(&[
        "eval",
        "--ckpt",
        s(&f.model()),
        "--manifest",
        s(&f.manifest()),
        "--report",
        s(&report),
        "--top-k",
        "1",
    ]);
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(report).unwrap()).unwrap();
    assert_eq!(v["identities"], 3);
    assert!(v["similarity"]["cos_g_a"].is_number());
    let rate = v["retrieval_b"]["success_rate"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&rate));
}

#[test]
fn exit_codes_follow_error_category() {
    let f = fixture();
    let run = f.root.join("bad_run");
    let (manifest, voice_ckpt) = (f.manifest(), f.voice_ckpt());
    let train = |extra: &[&str]| {
        let mut args = vec![
            "train",
            "--manifest",
            s(&manifest),
            "--voice-ckpt",
            s(&voice_ckpt),
            "--out-dir",
            s(&run),
            "--max-steps",
            "1",
        ];
        args.extend_from_slice(extra);
        cae(&args).status.code()
    };
    assert_eq!(train(&["--set", "no_such_key=1"]), Some(2));
    assert_eq!(train(&["--set", "learning_rate=-1"]), Some(2));
    assert_eq!(train(&["--set", "lambda2=1e308"]), Some(4));
    assert!(run.join("diagnostic.ckpt").is_file());

    let missing = f.root.join("missing/manifest.tsv");
    let out = cae(&[
        "pretrain-voice",
        "--manifest",
        s(&missing),
        "--out",
        s(&f.root.join("x.ckpt")),
    ]);
    assert_eq!(out.status.code(), Some(3));
    let out = cae(&[
        "infer",
        "--ckpt",
        s(&f.voice_ckpt()),
        "--face",
        s(&f.face(0)),
        "--voice",
        s(&f.voice(0)),
        "--out",
        s(&f.root.join("y.png")),
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let out = cae(&[
        "--seed",
        "1",
        "make-toy-corpus",
        "--out",
        s(&f.root.join("one")),
        "--identities",
        "1",
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}
