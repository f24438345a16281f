//! End-to-end tests of the `la` binary: every subcommand is driven through
//! a real process, checking artifacts, manifests, and exit codes.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn la() -> Command {
    Command::new(env!("CARGO_BIN_EXE_la"))
}

fn smoke_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.json")
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("spawn la")
}

fn assert_exit(out: &Output, code: i32, what: &str) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "{what}: stdout={} stderr={}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn synth(dir: &Path, seed: u64) {
    let out = run(la().args([
        "dataset",
        "synth",
        "--classes",
        "4",
        "--images",
        "12",
        "--size",
        "32",
        "--max-shapes",
        "2",
        "--seed",
        &seed.to_string(),
        "--out",
        dir.to_str().unwrap(),
    ]));
    assert_exit(&out, 0, "dataset synth");
}

#[test]
fn synth_is_byte_reproducible_and_validates_class_count() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    synth(&a, 5);
    synth(&b, 5);
    for name in ["index.json", "manifest.json", "synth.json"] {
        let left = fs::read(a.join(name)).unwrap();
        let right = fs::read(b.join(name)).unwrap();
        // The manifests differ only in argv (paths a vs b); normalize.
        if name == "manifest.json" {
            let l = String::from_utf8(left).unwrap().replace("/a", "/X");
            let r = String::from_utf8(right).unwrap().replace("/b", "/X");
            assert_eq!(l, r, "{name}");
        } else {
            assert_eq!(left, right, "{name}");
        }
    }
    // One concrete asset byte-compared end to end.
    let img: Vec<_> = fs::read_dir(a.join("images")).unwrap().map(|e| e.unwrap().file_name()).collect();
    let first = img.iter().min().unwrap();
    assert_eq!(
        fs::read(a.join("images").join(first)).unwrap(),
        fs::read(b.join("images").join(first)).unwrap()
    );

    let bad = run(la().args(["dataset", "synth", "--classes", "0", "--out"]).arg(tmp.path().join("bad")));
    assert_exit(&bad, 1, "synth with zero classes");
}

#[test]
fn train_resume_and_la_seed_cover_the_config_paths() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, 5);

    // Unknown --set key: exit 1, message names the key.
    let bad = run(la()
        .args(["train", "--config"])
        .arg(smoke_config())
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(tmp.path().join("bad"))
        .args(["--set", "optimizer.bogus=1", "--quiet"]));
    assert_exit(&bad, 1, "unknown config key");
    assert!(
        String::from_utf8_lossy(&bad.stderr).contains("optimizer.bogus"),
        "error names the key: {}",
        String::from_utf8_lossy(&bad.stderr)
    );

    // Short run; LA_SEED overrides the config seed.
    let run1 = tmp.path().join("run1");
    let out = run(la()
        .env("LA_SEED", "77")
        .args(["train", "--config"])
        .arg(smoke_config())
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(&run1)
        .args(["--set", "max_iters=3", "--deterministic", "--quiet"]));
    assert_exit(&out, 0, "train");
    let cfg = fs::read_to_string(run1.join("config.json")).unwrap();
    assert!(cfg.contains("\"seed\": 77"), "LA_SEED reached the effective config");

    // Resume without --config takes the configuration from the checkpoint.
    let out = run(la()
        .env("LA_SEED", "77")
        .args(["train", "--data"])
        .arg(&data)
        .arg("--out")
        .arg(&run1)
        .arg("--resume")
        .arg(run1.join("ckpt_0000003.latn"))
        .args(["--set", "max_iters=5", "--deterministic", "--quiet"]));
    assert_exit(&out, 0, "resume train");
    assert!(run1.join("ckpt_0000005.latn").is_file());

    // Missing both --config and --resume is a usage error.
    let none = run(la()
        .args(["train", "--data"])
        .arg(&data)
        .arg("--out")
        .arg(tmp.path().join("none"))
        .arg("--quiet"));
    assert_exit(&none, 1, "train without config");
}

#[test]
fn eval_writes_reports_and_report_command_verifies_them() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, 5);

    let ev = tmp.path().join("ev");
    let out = run(la()
        .args(["eval", "--data"])
        .arg(&data)
        .args([
            "--model",
            "oracle",
            "--episodes",
            "5",
            "--seeds",
            "2",
            "--split",
            "all",
            "--num-folds",
            "1",
            "--deterministic",
            "--out",
        ])
        .arg(&ev));
    assert_exit(&out, 0, "oracle eval");
    let table = String::from_utf8_lossy(&out.stdout);
    assert!(table.contains("mean    1.0000"), "oracle scores 1.0:\n{table}");
    for f in ["protocol.json", "report.json", "report.csv", "per_class.csv", "report.txt", "manifest.json"] {
        assert!(ev.join(f).is_file(), "{f} written");
    }

    // Re-running the same protocol into a fresh directory gives the same
    // report bytes (manifests differ only by argv path).
    let ev2 = tmp.path().join("ev2");
    let out = run(la()
        .args(["eval", "--data"])
        .arg(&data)
        .args([
            "--model",
            "oracle",
            "--episodes",
            "5",
            "--seeds",
            "2",
            "--split",
            "all",
            "--num-folds",
            "1",
            "--deterministic",
            "--out",
        ])
        .arg(&ev2));
    assert_exit(&out, 0, "oracle eval rerun");
    assert_eq!(
        fs::read(ev.join("report.json")).unwrap(),
        fs::read(ev2.join("report.json")).unwrap()
    );

    // `la report` verifies hashes and echoes the stored table.
    let rep = run(la().args(["report", "--run"]).arg(&ev));
    assert_exit(&rep, 0, "report on eval run");
    let text = String::from_utf8_lossy(&rep.stdout);
    assert!(text.contains("hash verified"), "report verifies hashes:\n{text}");
    assert!(text.contains("mean    1.0000"), "report echoes the table");

    // Tampering with a recorded artifact makes verification fail (exit 3).
    fs::write(ev.join("protocol.json"), b"{}").unwrap();
    let bad = run(la().args(["report", "--run"]).arg(&ev));
    assert_exit(&bad, 3, "report detects tampering");
}

#[test]
fn eval_rejects_contradictory_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, 5);

    // --model with --ckpt is contradictory.
    let out = run(la()
        .args(["eval", "--data"])
        .arg(&data)
        .args(["--model", "oracle", "--ckpt", "x.latn", "--out"])
        .arg(tmp.path().join("e1")));
    assert_exit(&out, 1, "oracle with ckpt");

    // Unknown prompt mode.
    let out = run(la()
        .args(["eval", "--data"])
        .arg(&data)
        .args(["--model", "oracle", "--prompts", "wiggles", "--out"])
        .arg(tmp.path().join("e2")));
    assert_exit(&out, 1, "unknown prompt mode");

    // --set outside --ablation.
    let out = run(la()
        .args(["eval", "--data"])
        .arg(&data)
        .args(["--model", "oracle", "--set", "seed=1", "--out"])
        .arg(tmp.path().join("e3")));
    assert_exit(&out, 1, "--set without --ablation");

    // Unsatisfiable protocol: more ways than classes.
    let out = run(la()
        .args(["eval", "--data"])
        .arg(&data)
        .args([
            "--model",
            "oracle",
            "--n",
            "6",
            "--split",
            "all",
            "--num-folds",
            "1",
            "--out",
        ])
        .arg(tmp.path().join("e4")));
    assert_exit(&out, 1, "too many ways");
}

#[test]
fn gradcheck_passes_and_detects_injected_faults() {
    let ok = run(la().arg("gradcheck"));
    assert_exit(&ok, 0, "gradcheck");
    let table = String::from_utf8_lossy(&ok.stdout);
    for block in ["attention", "two-way transformer", "mask downsampler", "mask decoder", "focal loss"] {
        assert!(table.contains(block), "{block} in table:\n{table}");
    }

    let inj = run(la().args(["gradcheck", "--inject-sign-flip"]));
    assert_exit(&inj, 0, "fault injection detected everywhere");
    assert!(String::from_utf8_lossy(&inj.stdout).contains("detected in every block"));

    let help = run(la().arg("--help"));
    assert_exit(&help, 0, "--help");
    let nothing = run(la().arg("frobnicate"));
    assert_exit(&nothing, 1, "unknown subcommand");
}
