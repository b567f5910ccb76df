//! End-to-end tests of the `rdae` binary: every subcommand is exercised
//! through the real process boundary, checking exit codes, stdout contracts,
//! and artifact bytes.
//!
//! A shared fixture runs generate → train → calibrate once on a miniature
//! corpus; the scoring/streaming/evaluation tests reuse its artifacts.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;
use std::time::Instant;

use rdae_core::detector::ThresholdBand;

fn rdae(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rdae"))
        .args(args)
        .output()
        .expect("binary launches")
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn assert_success(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed (status {:?}):\n{}",
        out.status.code(),
        stderr_of(out)
    );
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("process exited")
}

/// Sorted relative paths + bytes of every file under a directory.
fn dir_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    fn walk(dir: &Path, root: &Path, out: &mut Vec<(String, Vec<u8>)>) {
        let mut entries: Vec<_> =
            fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for path in entries {
            if path.is_dir() {
                walk(&path, root, out);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(root, root, &mut out);
    out
}

/// History CSV minus its wall-clock column.
fn history_without_timing(path: &Path) -> Vec<String> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.rsplitn(2, ',').last().unwrap().to_string())
        .collect()
}

struct Fixture {
    root: PathBuf,
    corpus: PathBuf,
    checkpoint: PathBuf,
    band: PathBuf,
    config: PathBuf,
}

impl Fixture {
    fn test_frames(&self) -> PathBuf {
        self.corpus.join("test")
    }

    fn manifest(&self) -> PathBuf {
        self.corpus.join("manifest.csv")
    }
}

const PLAN: &str = "bleed:3:3:0.9,occlusion:8:2:1.0";

fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let started = Instant::now();
        let root = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("cli-fixture");
        if root.exists() {
            fs::remove_dir_all(&root).unwrap();
        }
        fs::create_dir_all(&root).unwrap();

        let config = root.join("run.toml");
        fs::write(
            &config,
            "[model]\n\
             input_size = 16\n\
             levels = 2\n\
             channels_per_level = [4, 8]\n\
             units_per_level = 1\n\
             filter_size = 3\n\
             [train]\n\
             learning_rate = 0.002\n\
             batch_size = 8\n\
             max_epochs = 2\n\
             seed = 5\n",
        )
        .unwrap();

        let corpus = root.join("corpus");
        let gen = rdae(&[
            "generate",
            "--seed",
            "11",
            "--size",
            "16",
            "--normal-count",
            "24",
            "--test-count",
            "12",
            "--anomaly-plan",
            PLAN,
            "--out",
            corpus.to_str().unwrap(),
        ]);
        assert_success(&gen, "generate");

        let checkpoint = root.join("model.ckpt");
        let train = rdae(&[
            "train",
            "--corpus",
            corpus.to_str().unwrap(),
            "--config",
            config.to_str().unwrap(),
            "--out-checkpoint",
            checkpoint.to_str().unwrap(),
        ]);
        assert_success(&train, "train");
        assert!(
            stdout_of(&train).contains("# resolved configuration"),
            "train echoes its resolved configuration"
        );

        let band = root.join("band.toml");
        let cal = rdae(&[
            "calibrate",
            "--checkpoint",
            checkpoint.to_str().unwrap(),
            "--normal-frames",
            corpus.join("train").to_str().unwrap(),
            "--percentiles",
            "1,99",
            "--mode",
            "two-sided",
            "--out-band",
            band.to_str().unwrap(),
        ]);
        assert_success(&cal, "calibrate");

        // the whole miniature pipeline must stay desk-cheap
        assert!(started.elapsed().as_secs() < 300, "fixture pipeline under five minutes");
        Fixture { root, corpus, checkpoint, band, config }
    })
}

// ---------------------------------------------------------------------------
// generate
// ---------------------------------------------------------------------------

#[test]
fn generate_writes_labeled_corpus() {
    let fx = fixture();
    assert!(fx.manifest().is_file(), "manifest.csv exists");
    assert!(fx.corpus.join("scene.toml").is_file(), "resolved scene persisted");
    assert_eq!(fs::read_dir(fx.corpus.join("train")).unwrap().count(), 24);
    assert_eq!(fs::read_dir(fx.test_frames()).unwrap().count(), 12);
    let manifest = fs::read_to_string(fx.manifest()).unwrap();
    assert_eq!(manifest.lines().count(), 13, "header plus one row per test frame");
    assert_eq!(manifest.lines().filter(|l| l.contains(",bleed")).count(), 3);
    assert_eq!(manifest.lines().filter(|l| l.contains(",occlusion")).count(), 2);
}

#[test]
fn generate_is_deterministic_and_seed_flag_wins_over_spec_file() {
    let fx = fixture();
    let dir_a = fx.root.join("gen-a");
    let dir_b = fx.root.join("gen-b");
    // Spec file carries a decoy seed; the --seed flag must override it.
    let spec = fx.root.join("decoy.toml");
    fs::write(&spec, "seed = 999\nsize = 16\n").unwrap();

    let common = ["--normal-count", "6", "--test-count", "4", "--anomaly-plan", "blur:1:2:0.8"];
    let mut args_a: Vec<&str> = vec!["generate", "--seed", "42", "--size", "16"];
    args_a.extend_from_slice(&common);
    args_a.extend_from_slice(&["--out", dir_a.to_str().unwrap()]);
    let mut args_b: Vec<&str> =
        vec!["generate", "--seed", "42", "--spec", spec.to_str().unwrap()];
    args_b.extend_from_slice(&common);
    args_b.extend_from_slice(&["--out", dir_b.to_str().unwrap()]);

    assert_success(&rdae(&args_a), "generate a");
    assert_success(&rdae(&args_b), "generate b");
    assert_eq!(dir_bytes(&dir_a), dir_bytes(&dir_b), "identical corpora byte for byte");
}

#[test]
fn generate_rejects_overlapping_plan_with_validation_exit() {
    let fx = fixture();
    let out = rdae(&[
        "generate",
        "--normal-count",
        "2",
        "--test-count",
        "10",
        "--anomaly-plan",
        "bleed:0:5:0.8,smoke:3:4:0.7",
        "--out",
        fx.root.join("gen-overlap").to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 1, "overlapping plan is a validation error");
    assert!(stderr_of(&out).contains("overlap"), "names the problem");
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

#[test]
fn train_writes_history_row_per_epoch_and_reruns_reproduce_it() {
    let fx = fixture();
    let history = fx.root.join("model.ckpt.history.csv");
    let lines = fs::read_to_string(&history).unwrap();
    assert_eq!(lines.lines().count(), 3, "header plus one row per epoch");
    assert!(lines.starts_with("epoch,mean_mse,mean_rmse,seconds"));

    // Rerun with identical inputs: checkpoint bytes and the history minus
    // its wall-clock column must match.
    let ckpt2 = fx.root.join("model2.ckpt");
    let rerun = rdae(&[
        "train",
        "--corpus",
        fx.corpus.to_str().unwrap(),
        "--config",
        fx.config.to_str().unwrap(),
        "--out-checkpoint",
        ckpt2.to_str().unwrap(),
    ]);
    assert_success(&rerun, "train rerun");
    assert_eq!(
        fs::read(&fx.checkpoint).unwrap(),
        fs::read(&ckpt2).unwrap(),
        "checkpoint bytes reproduce under the same seed"
    );
    assert_eq!(
        history_without_timing(&history),
        history_without_timing(&fx.root.join("model2.ckpt.history.csv")),
        "history identical apart from wall-clock timing"
    );
}

#[test]
fn train_missing_corpus_is_a_validation_error() {
    let fx = fixture();
    let out = rdae(&[
        "train",
        "--corpus",
        fx.root.join("no-such-corpus").to_str().unwrap(),
        "--config",
        fx.config.to_str().unwrap(),
        "--out-checkpoint",
        fx.root.join("never.ckpt").to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 1);
    assert!(!fx.root.join("never.ckpt").exists(), "no artifact on failure");
}

// ---------------------------------------------------------------------------
// calibrate
// ---------------------------------------------------------------------------

#[test]
fn calibrate_bounds_are_observed_errors_and_upper_only_omits_lower() {
    let fx = fixture();
    let band = ThresholdBand::load(&fx.band).unwrap();
    let lower = band.lower().expect("two-sided band has a lower bound");
    assert!(lower < band.upper());

    // Score the calibration frames themselves: both bounds must be actual
    // observed error values (nearest-rank picks real elements).
    let trace = fx.root.join("calib-self.csv");
    let score = rdae(&[
        "score",
        "--checkpoint",
        fx.checkpoint.to_str().unwrap(),
        "--band",
        fx.band.to_str().unwrap(),
        "--frames",
        fx.corpus.join("train").to_str().unwrap(),
        "--out-csv",
        trace.to_str().unwrap(),
    ]);
    assert_success(&score, "score calibration set");
    let rmses: Vec<f64> = fs::read_to_string(&trace)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    // trace rounds to 6 decimals, so compare with that tolerance
    for (name, bound) in [("lower", lower), ("upper", band.upper())] {
        assert!(
            rmses.iter().any(|r| (r - bound).abs() < 1e-5),
            "{name} bound {bound} is an observed error value"
        );
    }

    let upper_band = fx.root.join("band-upper.toml");
    let cal = rdae(&[
        "calibrate",
        "--checkpoint",
        fx.checkpoint.to_str().unwrap(),
        "--normal-frames",
        fx.corpus.join("train").to_str().unwrap(),
        "--mode",
        "upper-only",
        "--out-band",
        upper_band.to_str().unwrap(),
    ]);
    assert_success(&cal, "calibrate upper-only");
    let text = fs::read_to_string(&upper_band).unwrap();
    assert!(text.contains("upper"), "band file records the upper threshold");
    assert!(!text.contains("lower"), "upper-only band carries no lower threshold");
    assert!(ThresholdBand::load(&upper_band).unwrap().lower().is_none());
}

#[test]
fn calibrate_empty_frame_dir_is_a_validation_error() {
    let fx = fixture();
    let empty = fx.root.join("empty-frames");
    fs::create_dir_all(&empty).unwrap();
    let out = rdae(&[
        "calibrate",
        "--checkpoint",
        fx.checkpoint.to_str().unwrap(),
        "--normal-frames",
        empty.to_str().unwrap(),
        "--out-band",
        fx.root.join("never-band.toml").to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 1);
}

// ---------------------------------------------------------------------------
// score
// ---------------------------------------------------------------------------

fn write_band(path: &Path, lower: f64, upper: f64) {
    fs::write(path, format!("mode = \"two_sided\"\nlower = {lower}\nupper = {upper}\n")).unwrap();
}

#[test]
fn score_writes_one_row_per_frame_and_band_position_drives_verdicts() {
    let fx = fixture();
    // every frame scores far inside this band → all normal
    let wide = fx.root.join("band-wide.toml");
    write_band(&wide, -1.0, 1e9);
    // every frame scores below this band → flagged at the lower bound
    let low = fx.root.join("band-low.toml");
    write_band(&low, 1e8, 1e9);
    // every frame scores above this band → flagged at the upper bound
    let high = fx.root.join("band-high.toml");
    write_band(&high, -2.0, -1.0);

    for (band, verdict, bound) in [
        (&wide, "normal", "none"),
        (&low, "anomalous", "lower"),
        (&high, "anomalous", "upper"),
    ] {
        let trace = fx.root.join(format!("trace-{bound}.csv"));
        let out = rdae(&[
            "score",
            "--checkpoint",
            fx.checkpoint.to_str().unwrap(),
            "--band",
            band.to_str().unwrap(),
            "--frames",
            fx.test_frames().to_str().unwrap(),
            "--out-csv",
            trace.to_str().unwrap(),
        ]);
        assert_success(&out, "score");
        let text = fs::read_to_string(&trace).unwrap();
        let rows: Vec<&str> = text.lines().skip(1).collect();
        assert_eq!(rows.len(), 12, "one row per frame");
        assert!(
            rows.iter().all(|r| r.ends_with(&format!(",{verdict},{bound}"))),
            "all rows are {verdict}/{bound} under {}",
            band.display()
        );
    }
}

#[test]
fn score_skips_unreadable_frames_and_continues() {
    let fx = fixture();
    let dir = fx.root.join("frames-with-junk");
    fs::create_dir_all(&dir).unwrap();
    for entry in fs::read_dir(fx.test_frames()).unwrap() {
        let p = entry.unwrap().path();
        fs::copy(&p, dir.join(p.file_name().unwrap())).unwrap();
    }
    fs::write(dir.join("not_a_frame.ppm"), b"this is not a pixmap").unwrap();

    let trace = fx.root.join("trace-junk.csv");
    let out = rdae(&[
        "score",
        "--checkpoint",
        fx.checkpoint.to_str().unwrap(),
        "--band",
        fx.band.to_str().unwrap(),
        "--frames",
        dir.to_str().unwrap(),
        "--out-csv",
        trace.to_str().unwrap(),
    ]);
    assert_success(&out, "score with junk present");
    assert!(stderr_of(&out).contains("not_a_frame.ppm"), "skip is reported");
    assert_eq!(
        fs::read_to_string(&trace).unwrap().lines().count(),
        13,
        "header plus one row per decodable frame"
    );
}

// ---------------------------------------------------------------------------
// stream
// ---------------------------------------------------------------------------

#[test]
fn stream_emits_verdicts_in_input_order_with_latency_stats() {
    let fx = fixture();
    let stats_path = fx.root.join("latency.toml");
    let stream_trace = fx.root.join("stream-trace.csv");
    let out = rdae(&[
        "stream",
        "--checkpoint",
        fx.checkpoint.to_str().unwrap(),
        "--band",
        fx.band.to_str().unwrap(),
        "--source-dir",
        fx.test_frames().to_str().unwrap(),
        "--stats",
        stats_path.to_str().unwrap(),
        "--out-csv",
        stream_trace.to_str().unwrap(),
    ]);
    assert_success(&out, "stream");

    let stdout = stdout_of(&out);
    let indices: Vec<usize> = stdout
        .lines()
        .filter(|l| l.starts_with("frame "))
        .map(|l| l.split_whitespace().nth(1).unwrap().parse().unwrap())
        .collect();
    assert_eq!(indices, (0..12).collect::<Vec<_>>(), "verdict lines follow input order");

    #[derive(serde::Deserialize)]
    struct Stats {
        frames: usize,
        min_ms: f64,
        median_ms: f64,
        p95_ms: f64,
        max_ms: f64,
        fps: f64,
    }
    let stats: Stats = toml::from_str(&fs::read_to_string(&stats_path).unwrap()).unwrap();
    assert_eq!(stats.frames, 12);
    assert!(stats.min_ms <= stats.median_ms);
    assert!(stats.median_ms <= stats.p95_ms);
    assert!(stats.p95_ms <= stats.max_ms);
    assert!(stats.fps > 0.0);

    // Batch scoring of the same directory with the same band must agree
    // byte-for-byte on the error trace.
    let score_trace = fx.root.join("score-trace.csv");
    let score = rdae(&[
        "score",
        "--checkpoint",
        fx.checkpoint.to_str().unwrap(),
        "--band",
        fx.band.to_str().unwrap(),
        "--frames",
        fx.test_frames().to_str().unwrap(),
        "--out-csv",
        score_trace.to_str().unwrap(),
    ]);
    assert_success(&score, "score for comparison");
    assert_eq!(
        fs::read(&stream_trace).unwrap(),
        fs::read(&score_trace).unwrap(),
        "stream and batch scoring produce identical traces"
    );
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

/// Writes a trace whose verdicts match the manifest labels exactly.
fn write_perfect_trace(path: &Path, manifest_csv: &Path) {
    let manifest = fs::read_to_string(manifest_csv).unwrap();
    let mut text = String::from("frame_index,rmse,verdict,bound\n");
    for line in manifest.lines().skip(1) {
        let mut fields = line.split(',');
        let idx = fields.next().unwrap();
        let label = fields.nth(1).unwrap();
        if label == "normal" {
            text.push_str(&format!("{idx},50.0,normal,none\n"));
        } else {
            text.push_str(&format!("{idx},120.0,anomalous,upper\n"));
        }
    }
    fs::write(path, text).unwrap();
}

#[test]
fn evaluate_perfect_verdicts_score_full_marks_and_csv_roundtrips() {
    let fx = fixture();
    let trace = fx.root.join("perfect-trace.csv");
    write_perfect_trace(&trace, &fx.manifest());

    let report_csv = fx.root.join("perfect-report.csv");
    let confusion_csv = fx.root.join("perfect-confusion.csv");
    let out = rdae(&[
        "evaluate",
        "--scores-csv",
        trace.to_str().unwrap(),
        "--manifest",
        fx.manifest().to_str().unwrap(),
        "--out-report",
        report_csv.to_str().unwrap(),
        "--out-confusion",
        confusion_csv.to_str().unwrap(),
    ]);
    assert_success(&out, "evaluate");

    let stdout = stdout_of(&out);
    let overall = stdout.lines().find(|l| l.starts_with("overall")).unwrap();
    let cols: Vec<&str> = overall.split_whitespace().collect();
    assert_eq!(
        &cols[2..5],
        &["100.0", "100.0", "100.0"],
        "recall, precision and F1 are all perfect"
    );

    // The confusion CSV parses back into the same counts the run printed:
    // 5 anomalous frames caught, 7 normal frames passed, no mistakes.
    let confusion = fs::read_to_string(&confusion_csv).unwrap();
    let rows: Vec<Vec<&str>> =
        confusion.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows[0], vec!["actual_anomalous", "5", "0"]);
    assert_eq!(rows[1], vec!["actual_normal", "0", "7"]);
    assert!(stdout.contains("confusion: tp 5 fp 0 fn 0 tn 7"));

    let report = fs::read_to_string(&report_csv).unwrap();
    assert!(report.lines().any(|l| l == "overall,12,100.0,100.0,100.0"));
}

#[test]
fn evaluate_count_mismatch_is_a_validation_error() {
    let fx = fixture();
    let trace = fx.root.join("short-trace.csv");
    write_perfect_trace(&trace, &fx.manifest());
    let text = fs::read_to_string(&trace).unwrap();
    let shortened: Vec<&str> = text.lines().collect();
    fs::write(&trace, shortened[..shortened.len() - 1].join("\n")).unwrap();

    let out = rdae(&[
        "evaluate",
        "--scores-csv",
        trace.to_str().unwrap(),
        "--manifest",
        fx.manifest().to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 1, "row-count mismatch is a validation error");
}

#[test]
fn evaluate_reports_expected_percentages_for_fixed_counts() {
    let fx = fixture();
    // Known aggregate: 3743 hits, 347 misses, 1031 false alarms, 463 clean.
    // Recall 3743/4090 and precision 3743/4774 round to 91.5% and 78.4%.
    let (tp, fn_, fp, tn) = (3743usize, 347usize, 1031usize, 463usize);
    let mut manifest = String::from("frame_index,filename,label\n");
    let mut trace = String::from("frame_index,rmse,verdict,bound\n");
    let mut idx = 0usize;
    let mut push = |label: &str, verdict: &str, bound: &str, count: usize, idx: &mut usize| {
        for _ in 0..count {
            manifest.push_str(&format!("{idx},test/frame_{idx:05}.ppm,{label}\n"));
            trace.push_str(&format!("{idx},100.0,{verdict},{bound}\n"));
            *idx += 1;
        }
    };
    push("bleed", "anomalous", "upper", tp, &mut idx);
    push("bleed", "normal", "none", fn_, &mut idx);
    push("normal", "anomalous", "upper", fp, &mut idx);
    push("normal", "normal", "none", tn, &mut idx);

    let manifest_path = fx.root.join("counts-manifest.csv");
    let trace_path = fx.root.join("counts-trace.csv");
    fs::write(&manifest_path, manifest).unwrap();
    fs::write(&trace_path, trace).unwrap();

    let out = rdae(&[
        "evaluate",
        "--scores-csv",
        trace_path.to_str().unwrap(),
        "--manifest",
        manifest_path.to_str().unwrap(),
    ]);
    assert_success(&out, "evaluate fixed counts");
    let stdout = stdout_of(&out);
    let overall = stdout.lines().find(|l| l.starts_with("overall")).unwrap();
    let cols: Vec<&str> = overall.split_whitespace().collect();
    assert_eq!(cols[2], "91.5", "overall recall");
    assert_eq!(cols[3], "78.4", "overall precision");
    assert!(stdout.contains("confusion: tp 3743 fp 1031 fn 347 tn 463"));
}

// ---------------------------------------------------------------------------
// argument handling
// ---------------------------------------------------------------------------

#[test]
fn help_exits_zero_and_unknown_flag_exits_one() {
    let help = rdae(&["--help"]);
    assert_eq!(exit_code(&help), 0);
    assert!(stdout_of(&help).contains("generate"));

    let unknown = rdae(&["score", "--no-such-flag"]);
    assert_eq!(exit_code(&unknown), 1);
}
