use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use foley_core::curation::read_wav;
use foley_core::curation::synth::{clean_clip, write_labelled_corpus};
use foley_core::curation::write_wav_pcm16;

const SMALL: &str = "[model]\nhidden_dim = 16\nheads = 2\nmmdit_blocks = 1\nunidit_blocks = 1\n[data]\nclip_seconds = 0.2\n";

fn foley(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_foley")).current_dir(dir).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let o = foley(dir, args);
    assert_eq!(code(&o), 0, "{args:?}\n{}", String::from_utf8_lossy(&o.stderr));
    o
}

fn workspace() -> (tempfile::TempDir, PathBuf) {
    let t = tempfile::tempdir().unwrap();
    let p = t.path().to_path_buf();
    write_labelled_corpus(&p.join("corpus"), 0).unwrap();
    fs::write(p.join("small.toml"), SMALL).unwrap();
    (t, p)
}

fn verdicts(manifest: &Path) -> String {
    fs::read_to_string(manifest).unwrap()
}

#[test]
fn curate_empty_dir() {
    let t = tempfile::tempdir().unwrap();
    fs::create_dir(t.path().join("empty")).unwrap();
    ok(t.path(), &["curate", "empty"]);
    assert_eq!(fs::read_to_string(t.path().join("empty/manifest.jsonl")).unwrap(), "");
    assert!(t.path().join("empty/config.toml").is_file());
}

#[test]
fn curate_rerun_is_byte_identical_and_honours_gate() {
    let (_t, p) = workspace();
    ok(&p, &["curate", "corpus", "--out", "a", "--min-effective-sr", "32000"]);
    ok(&p, &["curate", "corpus", "--out", "b", "--min-effective-sr", "32000"]);
    let a = fs::read(p.join("a/manifest.jsonl")).unwrap();
    assert_eq!(a, fs::read(p.join("b/manifest.jsonl")).unwrap());
    let text = String::from_utf8(a).unwrap();
    assert!(text.contains("\"source_path\":\"clean.wav\"") && text.contains("\"verdict\":\"keep\""));

    ok(&p, &["curate", "corpus", "--out", "c", "--min-effective-sr", "60000"]);
    assert!(!verdicts(&p.join("c/manifest.jsonl")).contains("\"verdict\":\"keep\""));
}

#[test]
fn flag_beats_file_beats_default() {
    let (_t, p) = workspace();
    fs::write(p.join("strict_gate.toml"), "[curate]\nmin_effective_sr_hz = 60000.0\n").unwrap();
    ok(&p, &["--config", "strict_gate.toml", "curate", "corpus", "--out", "file"]);
    assert!(!verdicts(&p.join("file/manifest.jsonl")).contains("\"keep\""));
    ok(&p, &["--config", "strict_gate.toml", "curate", "corpus", "--out", "flag", "--min-effective-sr", "32000"]);
    assert!(verdicts(&p.join("flag/manifest.jsonl")).contains("\"keep\""));
    let echoed = fs::read_to_string(p.join("flag/config.toml")).unwrap();
    assert!(echoed.contains("min_effective_sr_hz = 32000.0"));

    fs::write(p.join("bad.toml"), "[curate]\nmin_snr = 3.0\n").unwrap();
    assert_eq!(code(&foley(&p, &["--config", "bad.toml", "curate", "corpus"])), 1);
    assert_eq!(code(&foley(&p, &["curate"])), 1);
    assert_eq!(code(&foley(&p, &["--help"])), 0);
}

#[test]
fn strict_curate_fails_on_unreadable_input() {
    let (_t, p) = workspace();
    fs::write(p.join("corpus/broken.wav"), b"RIFF").unwrap();
    ok(&p, &["curate", "corpus", "--out", "lenient"]);
    assert!(verdicts(&p.join("lenient/manifest.jsonl")).contains("\"kind\":\"error\""));
    assert_eq!(code(&foley(&p, &["curate", "corpus", "--out", "strict", "--strict"])), 2);
    assert_eq!(code(&foley(&p, &["curate", "missing"])), 2);
}

fn train(p: &Path, out: &str, extra: &[&str]) -> Output {
    let mut args = vec!["--config", "small.toml", "train", "--manifest", "corpus/manifest.jsonl", "--out", out, "--batch-size", "2"];
    args.extend_from_slice(extra);
    ok(p, &args)
}

#[test]
fn train_is_seeded_and_resumable() {
    let (_t, p) = workspace();
    ok(&p, &["curate", "corpus"]);
    train(&p, "r1", &["--seed", "7", "--steps", "4"]);
    train(&p, "r2", &["--seed", "7", "--steps", "4"]);
    let csv = fs::read_to_string(p.join("r1/loss.csv")).unwrap();
    assert_eq!(csv, fs::read_to_string(p.join("r2/loss.csv")).unwrap());
    assert_eq!(csv.lines().count(), 5);

    train(&p, "r3", &["--seed", "7", "--steps", "2"]);
    train(&p, "r3", &["--seed", "7", "--steps", "4", "--resume"]);
    assert_eq!(csv, fs::read_to_string(p.join("r3/loss.csv")).unwrap());
    assert_eq!(fs::read(p.join("r1/ckpt_000004.hvfw")).unwrap(), fs::read(p.join("r3/ckpt_000004.hvfw")).unwrap());

    train(&p, "r4", &["--seed", "8", "--steps", "4"]);
    assert_ne!(csv, fs::read_to_string(p.join("r4/loss.csv")).unwrap());
}

#[test]
fn zero_repa_weight_leaves_total_equal_to_flow() {
    let (_t, p) = workspace();
    ok(&p, &["curate", "corpus"]);
    train(&p, "r", &["--steps", "3", "--repa-weight", "0"]);
    for line in fs::read_to_string(p.join("r/loss.csv")).unwrap().lines().skip(1) {
        let f: Vec<f64> = line.split(',').map(|v| v.parse().unwrap()).collect();
        assert_eq!(f[1], f[3], "{line}");
    }
}

#[test]
fn train_errors() {
    let (_t, p) = workspace();
    fs::create_dir(p.join("empty")).unwrap();
    ok(&p, &["curate", "empty"]);
    let o = foley(&p, &["train", "--manifest", "empty/manifest.jsonl", "--out", "r"]);
    assert_eq!(code(&o), 2);
    ok(&p, &["curate", "corpus"]);
    let o = foley(&p, &["--config", "small.toml", "train", "--manifest", "corpus/manifest.jsonl", "--out", "nan", "--steps", "3", "--lr", "1e38"]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn generate_contract() {
    let (_t, p) = workspace();
    ok(&p, &["curate", "corpus"]);
    train(&p, "r", &["--steps", "2"]);
    let gen = |out: &str, extra: &[&str]| {
        let mut args = vec!["--seed", "3", "generate", "--checkpoint", "r/ckpt_000002.hvfw", "--out", out, "--steps", "3"];
        args.extend_from_slice(extra);
        foley(&p, &args)
    };
    assert_eq!(code(&gen("g/a.wav", &["--text", "a bell", "--video-stub", "--duration-s", "2.0"])), 0);
    let a = read_wav(p.join("g/a.wav")).unwrap();
    assert_eq!((a.sample_rate, a.samples.len()), (48_000, 96_000));
    assert_eq!(code(&gen("g/b.wav", &["--text", "a bell", "--video-stub", "--duration-s", "2.0"])), 0);
    assert_eq!(fs::read(p.join("g/a.wav")).unwrap(), fs::read(p.join("g/b.wav")).unwrap());

    assert_eq!(code(&gen("g/c.wav", &["--video-stub"])), 1);
    assert_eq!(code(&gen("g/c.wav", &["--text", "rain"])), 1);
    assert_eq!(code(&gen("g/c.wav", &["--allow-null", "--duration-s", "0.5"])), 0);
    assert_eq!(read_wav(p.join("g/c.wav")).unwrap().samples.len(), 24_000);
    assert_eq!(code(&gen("g/d.wav", &["--text", "a bell", "--video-stub", "--guidance", "1.0"])), 0);
    assert_eq!(code(&foley(&p, &["generate", "--checkpoint", "nope.hvfw", "--out", "x.wav", "--allow-null"])), 2);
}

#[test]
fn evaluate_contract() {
    let t = tempfile::tempdir().unwrap();
    let p = t.path();
    fs::create_dir(p.join("set")).unwrap();
    for (i, name) in ["door", "rain", "steps", "wind"].iter().enumerate() {
        write_wav_pcm16(p.join(format!("set/{name}.wav")), &clean_clip(2.0, 48_000, i as u64), 48_000).unwrap();
    }
    let start = Instant::now();
    ok(p, &["evaluate", "--generated", "set", "--reference", "set", "--out", "e1"]);
    assert!(start.elapsed().as_secs_f64() < 60.0);
    ok(p, &["evaluate", "--generated", "set", "--reference", "set", "--out", "e2"]);
    let report = fs::read_to_string(p.join("e1/report.jsonl")).unwrap();
    assert_eq!(report, fs::read_to_string(p.join("e2/report.jsonl")).unwrap());
    let value = |metric: &str| -> f64 {
        report
            .lines()
            .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap())
            .find(|v| v["metric"] == metric)
            .unwrap()["value"]
            .as_f64()
            .unwrap()
    };
    assert!(value("fd") <= 1e-6);
    assert!(value("kl") <= 1e-9);
    assert!(report.contains("\"metric\":\"desync\",\"record\":\"metric\",\"status\":\"unavailable\""));

    fs::create_dir(p.join("other")).unwrap();
    write_wav_pcm16(p.join("other/door.wav"), &clean_clip(2.0, 48_000, 9), 48_000).unwrap();
    write_wav_pcm16(p.join("other/bird.wav"), &clean_clip(2.0, 48_000, 8), 48_000).unwrap();
    assert_eq!(code(&foley(p, &["evaluate", "--generated", "other", "--reference", "set"])), 2);
    assert_eq!(code(&foley(p, &["evaluate", "--generated", "set", "--reference", "set", "--provider", "passt"])), 1);
}

#[test]
fn inspect_known_formats() {
    let (_t, p) = workspace();
    ok(&p, &["curate", "corpus"]);
    let o = ok(&p, &["inspect", "corpus/clean.wav"]);
    assert!(String::from_utf8_lossy(&o.stdout).contains("48000 Hz"));
    let o = ok(&p, &["inspect", "corpus/manifest.jsonl"]);
    assert!(String::from_utf8_lossy(&o.stdout).contains("3 clips, 1 kept"));
    train(&p, "r", &["--steps", "1"]);
    let o = ok(&p, &["inspect", "r/ckpt_000001.hvfw"]);
    assert!(String::from_utf8_lossy(&o.stdout).contains("out.weight"));
    assert_eq!(code(&foley(&p, &["inspect", "small.toml"])), 2);
}
