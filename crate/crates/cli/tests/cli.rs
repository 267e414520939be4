use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use emojigan::dataset::{Manifest, RgbImage};
use emojigan::embeddings::Vocabulary;
use emojigan::gradsuite;

/// Small networks keep each training run around a second.
const SMALL: [&str; 10] = [
    "--gen-base", "16", "--disc-base", "4", "--embed-proj", "8", "--noise-dim", "8", "--dim", "16",
];

fn run(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_emojigan"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("spawn emojigan")
}

fn ok(args: &[&str], cwd: &Path) -> Output {
    let out = run(args, cwd);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn train_synthetic(dir: &Path, out: &str, extra: &[&str]) {
    let mut args = vec!["train", "--synthetic", "--classes", "8", "--epochs", "50", "--seed", "7", "--out", out];
    args.extend(SMALL);
    args.extend(extra);
    ok(&args, dir);
}

/// A checkpoint trained for a few steps on three classes.
fn quick_checkpoint(dir: &Path) -> &'static str {
    let mut args = vec![
        "train", "--synthetic", "--classes", "3", "--per-class", "2", "--batch", "3", "--epochs", "2",
        "--eval-every", "1", "--out", "run",
    ];
    args.extend(SMALL);
    ok(&args, dir);
    "run/best.ckpt"
}

#[test]
fn synthetic_training_writes_history_and_best_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    train_synthetic(dir.path(), "out", &[]);
    let out = dir.path().join("out");
    for f in ["history.csv", "best.ckpt", "final.ckpt", "vocab.bin"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let history = fs::read_to_string(out.join("history.csv")).unwrap();
    assert!(history.starts_with("step,epoch,d_loss,g_loss,d_real_acc,gen_twice,restored\n"));
}

#[test]
fn same_flags_give_identical_history() {
    let dir = tempfile::tempdir().unwrap();
    train_synthetic(dir.path(), "a", &[]);
    train_synthetic(dir.path(), "b", &[]);
    let read = |d: &str, f: &str| fs::read(dir.path().join(d).join(f)).unwrap();
    assert_eq!(read("a", "history.csv"), read("b", "history.csv"));
    assert_eq!(read("a", "best.ckpt"), read("b", "best.ckpt"));
}

#[test]
fn missing_manifest_is_named() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("e.bin"), b"").unwrap();
    let out = run(&["train", "--manifest", "nowhere/list.csv", "--embeddings", "e.bin"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("nowhere/list.csv"), "{}", stderr(&out));
}

#[test]
fn bad_image_size_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["train", "--synthetic", "--image-size", "48"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn manifest_training_matches_synthetic_training() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["make-synth", "--out", "synth", "--classes", "8", "--per-class", "5", "--seed", "7", "--dim", "16"], dir.path());
    let mut args = vec![
        "train", "--manifest", "synth/manifest.csv", "--embeddings", "synth/embeddings.bin", "--epochs", "50",
        "--seed", "7", "--out", "from_files",
    ];
    args.extend(SMALL);
    ok(&args, dir.path());
    train_synthetic(dir.path(), "direct", &[]);
    let read = |d: &str| fs::read(dir.path().join(d).join("history.csv")).unwrap();
    assert_eq!(read("from_files"), read("direct"));
}

#[test]
fn generate_grid_layout() {
    let dir = tempfile::tempdir().unwrap();
    let ck = quick_checkpoint(dir.path());
    ok(&["generate", "smile", "grin", "--checkpoint", ck, "--count", "4", "--out", "g"], dir.path());
    let img = RgbImage::load(dir.path().join("g/generated.ppm")).unwrap();
    assert_eq!((img.width, img.height), (4 * 32 + 5 * 2, 2 * 32 + 3 * 2));
    assert_eq!((img.width, img.height), (138, 70));
    // gutters are black
    assert_eq!(img.get(0, 0), [0, 0, 0]);
    assert_eq!(img.get(34, 40), [0, 0, 0]);
}

#[test]
fn generate_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let ck = quick_checkpoint(dir.path());
    for out in ["a", "b"] {
        ok(&["generate", "joy", "--checkpoint", ck, "--seed", "3", "--out", out], dir.path());
    }
    ok(&["generate", "joy", "--checkpoint", ck, "--seed", "4", "--out", "c"], dir.path());
    let read = |d: &str| fs::read(dir.path().join(d).join("generated.ppm")).unwrap();
    assert_eq!(read("a"), read("b"));
    assert_ne!(read("a"), read("c"));
}

#[test]
fn generate_rejects_zero_count_and_unknown_words() {
    let dir = tempfile::tempdir().unwrap();
    let ck = quick_checkpoint(dir.path());
    let out = run(&["generate", "smile", "--checkpoint", ck, "--count", "0"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("nothing to generate"));

    let out = run(&["generate", "smile", "unicorn", "--checkpoint", ck], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let msg = stderr(&out);
    assert!(msg.contains("unicorn"), "{msg}");
    for known in ["smile", "grin", "joy"] {
        assert!(msg.contains(known), "{msg}");
    }
    assert!(!dir.path().join("out").exists());
}

fn read_report(path: &Path) -> Vec<Vec<f64>> {
    let mut reader = csv::Reader::from_path(path).unwrap();
    assert_eq!(reader.headers().unwrap(), vec!["column", "d_blend_a", "d_blend_b", "d_a_b"]);
    reader
        .records()
        .map(|r| r.unwrap().iter().skip(1).map(|v| v.parse().unwrap()).collect())
        .collect()
}

#[test]
fn blend_report_shape_on_fresh_model() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["train", "--synthetic", "--classes", "3", "--max-steps", "0", "--batch", "3", "--out", "fresh"];
    args.extend(SMALL);
    ok(&args, dir.path());
    ok(&["blend", "smile", "joy", "--checkpoint", "fresh/final.ckpt", "--count", "5", "--out", "b"], dir.path());
    let rows = read_report(&dir.path().join("b/blend.csv"));
    assert_eq!(rows.len(), 5);
    for r in rows {
        assert_eq!(r.len(), 3);
        assert!(r.iter().all(|d| d.is_finite() && *d >= 0.0));
    }
    let grid = RgbImage::load(dir.path().join("b/blend.ppm")).unwrap();
    assert_eq!((grid.width, grid.height), (5 * 32 + 6 * 2, 3 * 32 + 4 * 2));
}

#[test]
fn blending_a_word_with_itself_repeats_it() {
    let dir = tempfile::tempdir().unwrap();
    let ck = quick_checkpoint(dir.path());
    let out = ok(&["blend", "grin", "grin", "--checkpoint", ck, "--count", "3", "--out", "b"], dir.path());
    assert!(stderr(&out).contains("warning"));
    for r in read_report(&dir.path().join("b/blend.csv")) {
        assert_eq!(r, [0.0, 0.0, 0.0]);
    }
    let grid = RgbImage::load(dir.path().join("b/blend.ppm")).unwrap();
    let row_top = |r: usize| 2 + r * 34;
    for y in 0..32 {
        for x in 0..grid.width {
            let top = grid.get(x, row_top(0) + y);
            assert_eq!(grid.get(x, row_top(1) + y), top);
            assert_eq!(grid.get(x, row_top(2) + y), top);
        }
    }
}

#[test]
fn gradcheck_passes_with_one_row_per_check() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&["gradcheck"], dir.path());
    let text = String::from_utf8(out.stdout).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), gradsuite::registry().len());
    assert!(rows.iter().all(|r| r.ends_with("ok")), "{text}");
}

#[test]
fn gradcheck_fails_naming_the_op() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["gradcheck", "--tolerance", "1e-12"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("conv_transpose2d"), "{}", stderr(&out));
}

#[test]
fn make_synth_counts_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        ok(&["make-synth", "--out", out, "--classes", "8", "--per-class", "5", "--seed", "2", "--dim", "12"], dir.path());
    }
    let a = dir.path().join("a");
    let ppms: Vec<_> = fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "ppm"))
        .collect();
    assert_eq!(ppms.len(), 40);
    let manifest = Manifest::load(a.join("manifest.csv")).unwrap();
    assert_eq!(manifest.rows.len(), 40);
    let vocab = Vocabulary::load_word2vec_binary(a.join("embeddings.bin"), None).unwrap();
    assert_eq!(vocab.dim(), 12);
    for row in &manifest.rows {
        assert!(vocab.get(&row.word).is_some(), "{} unresolved", row.word);
        assert!(a.join(&row.filename).is_file());
    }
    for entry in fs::read_dir(&a).unwrap() {
        let name = entry.unwrap().file_name();
        assert_eq!(
            fs::read(a.join(&name)).unwrap(),
            fs::read(dir.path().join("b").join(&name)).unwrap(),
            "{name:?} differs"
        );
    }
}
