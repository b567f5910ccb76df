//! Subcommand implementations. Each handler resolves its configuration
//! (file, then flags, then the global seed), echoes what it resolved, does
//! the work, and prints a short summary. Validation failures surface before
//! any artifact is written.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rdae_core::corpus::{
    build_corpus, ingest_directory, parse_plan, ppm, read_manifest, SceneSpec, SkipRecord,
};
use rdae_core::detector::{
    calibrate, classify, frame_error, score_sequence, write_error_trace, read_error_trace,
    FrameScore, ScoredFrame, ThresholdBand,
};
use rdae_core::eval::{per_category_report, write_confusion_csv, write_report_csv};
use rdae_core::model::{checkpoint, Model};
use rdae_core::tensor::{OptimizerKind, Tensor};
use rdae_core::trainer::{fit, frame_batch, write_history};
use rdae_core::{Error, Result, RngState};
use serde::Serialize;

use crate::config::{io_err, parse_err, RunConfig};
use crate::{CalibrateArgs, EvaluateArgs, GenerateArgs, ScoreArgs, StreamArgs, TrainArgs};

// ---------------------------------------------------------------------------
// Shared helpers
// ---------------------------------------------------------------------------

/// `model.ckpt` + `history.csv` → `model.ckpt.history.csv`, keeping derived
/// artifacts next to (and unambiguously tied to) their primary file.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().map(|s| s.to_os_string()).unwrap_or_default();
    name.push(".");
    name.push(suffix);
    path.with_file_name(name)
}

fn warn_skipped(skipped: &[SkipRecord]) {
    for s in skipped {
        eprintln!("warning: skipped {}: {}", s.filename, s.detail);
    }
}

/// The trailing number of a file stem (`frame_00017.ppm` → 17), if any.
fn trailing_number(name: &str) -> Option<usize> {
    let stem = name.rsplit_once('.').map_or(name, |(s, _)| s);
    let prefix = stem.trim_end_matches(|c: char| c.is_ascii_digit());
    let digits = &stem[prefix.len()..];
    if digits.is_empty() {
        None
    } else {
        digits.parse::<usize>().ok()
    }
}

/// Frame indices for a scored file list. When every name carries a distinct
/// trailing number, those numbers become the indices — so traces line up with
/// a corpus manifest. Otherwise files are numbered 0.. in listing order.
fn derive_indices(sources: &[String]) -> Vec<usize> {
    let parsed: Vec<Option<usize>> = sources.iter().map(|s| trailing_number(s)).collect();
    if parsed.iter().all(Option::is_some) {
        let nums: Vec<usize> = parsed.into_iter().flatten().collect();
        let unique: BTreeSet<usize> = nums.iter().copied().collect();
        if unique.len() == nums.len() {
            return nums;
        }
    }
    (0..sources.len()).collect()
}

/// Per-frame reconstruction error of each frame under a frozen model.
fn frame_errors(model: &Model<f32>, frames: &[Tensor<f32>]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(frames.len());
    for f in frames {
        let batch = frame_batch(f)?;
        let recon = model.forward_infer(&batch)?;
        out.push(frame_error(&batch, &recon)?);
    }
    Ok(out)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

/// Rejects a missing input path up front, as a validation failure rather
/// than a mid-run I/O error.
fn require_dir(path: &Path, what: &str) -> Result<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(Error::InvalidArgument {
            op: "input validation",
            detail: format!("{what} {} is not a directory", path.display()),
        })
    }
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::InvalidArgument {
            op: "input validation",
            detail: format!("{what} {} is not a file", path.display()),
        })
    }
}

// ---------------------------------------------------------------------------
// generate
// ---------------------------------------------------------------------------

pub fn generate(args: GenerateArgs, seed: Option<u64>) -> Result<()> {
    let run = RunConfig::load(args.config.as_deref())?;
    let mut scene: SceneSpec = match &args.spec {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| io_err(p, e))?;
            toml::from_str(&text).map_err(|e| parse_err(p.display().to_string(), e))?
        }
        None => run.scene,
    };
    if let Some(v) = args.size {
        scene.size = v;
    }
    if let Some(v) = args.tool_count {
        scene.tool_count = v;
    }
    if let Some(v) = args.drift {
        scene.drift = v;
    }
    if let Some(v) = args.illumination {
        scene.illumination = v;
    }
    if let Some(v) = args.grain {
        scene.grain = v;
    }
    if let Some(s) = seed {
        scene.seed = s;
    }
    let plan = parse_plan(&args.anomaly_plan)?;

    let rows = build_corpus(&scene, args.normal_count, args.test_count, &plan, &args.out)?;

    let scene_toml =
        toml::to_string_pretty(&scene).map_err(|e| parse_err("scene description", e))?;
    // Persist the resolved scene so the corpus can be regenerated or extended.
    write_text(&args.out.join("scene.toml"), &scene_toml)?;
    println!("# resolved scene");
    print!("{scene_toml}");
    println!("# end scene");

    let anomalous = rows.iter().filter(|r| r.label.is_anomalous()).count();
    println!(
        "wrote {} train frames and {} test frames ({} normal, {} anomalous) to {}",
        args.normal_count,
        rows.len(),
        rows.len() - anomalous,
        anomalous,
        args.out.display()
    );
    println!("labels: {}", args.out.join("manifest.csv").display());
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fn parse_channels(text: &str) -> Result<Vec<usize>> {
    text.split(',')
        .map(|part| {
            part.trim()
                .parse::<usize>()
                .map_err(|e| parse_err("channel list", format!("{part:?}: {e}")))
        })
        .collect()
}

fn parse_optimizer(text: &str) -> Result<OptimizerKind> {
    match text.trim().to_ascii_lowercase().as_str() {
        "adam" => Ok(OptimizerKind::Adam),
        "sgd" => Ok(OptimizerKind::Sgd),
        other => Err(parse_err("optimizer", format!("{other:?} is not adam or sgd"))),
    }
}

pub fn train(args: TrainArgs, seed: Option<u64>) -> Result<()> {
    let mut run = RunConfig::load(args.config.as_deref())?;
    if let Some(v) = args.input_size {
        run.model.input_size = v;
    }
    if let Some(v) = args.levels {
        run.model.levels = v;
    }
    if let Some(s) = &args.channels {
        run.model.channels_per_level = parse_channels(s)?;
    }
    if let Some(v) = args.units_per_level {
        run.model.units_per_level = v;
    }
    if let Some(v) = args.filter_size {
        run.model.filter_size = v;
    }
    if let Some(v) = args.learning_rate {
        run.train.learning_rate = v;
    }
    if let Some(v) = args.batch_size {
        run.train.batch_size = v;
    }
    if let Some(v) = args.epochs {
        run.train.max_epochs = v;
    }
    if let Some(s) = &args.optimizer {
        run.train.optimizer = parse_optimizer(s)?;
    }
    if let Some(v) = args.eval_subsample {
        run.train.eval_subsample = Some(v);
    }
    if let Some(s) = seed {
        run.train.seed = s;
    }
    // The model is the single source of truth for frame resolution.
    run.train.input_size = run.model.input_size;
    run.model.validate()?;
    run.train.validate()?;

    let history_path =
        args.out_history.clone().unwrap_or_else(|| sibling(&args.out_checkpoint, "history.csv"));
    run.paths.corpus = Some(args.corpus.clone());
    run.paths.checkpoint = Some(args.out_checkpoint.clone());
    run.paths.history = Some(history_path.clone());
    run.echo()?;

    require_dir(&args.corpus, "corpus")?;
    // A corpus root holds frames under train/; a bare frame directory is
    // accepted as-is.
    let train_dir = args.corpus.join("train");
    let frames_dir = if train_dir.is_dir() { train_dir } else { args.corpus.clone() };
    let ingest = ingest_directory(&frames_dir, run.model.input_size)?;
    warn_skipped(&ingest.skipped);
    println!("loaded {} training frames from {}", ingest.frames.len(), frames_dir.display());

    let mut rng = RngState::new(run.train.seed);
    let model = Model::build(run.model.clone(), &mut rng)?;
    println!(
        "model: {} parameters, input {}x{}x{}",
        model.param_count(),
        run.model.input_channels,
        run.model.input_size,
        run.model.input_size
    );

    let outcome = fit(&ingest.frames, model, &run.train, Some(&args.out_checkpoint))?;
    for e in &outcome.history {
        println!(
            "epoch {:>3}: train_mse {:.6}  eval_rmse {:.3}  ({:.1}s)",
            e.epoch, e.mean_mse, e.mean_rmse, e.seconds
        );
    }
    write_history(&history_path, &outcome.history)?;
    write_text(&sibling(&args.out_checkpoint, "config.toml"), &run.to_toml()?)?;

    let best = outcome
        .history
        .iter()
        .find(|e| e.epoch == outcome.best_epoch)
        .expect("best epoch is in history");
    println!(
        "best epoch {} of {} (eval_rmse {:.3})",
        outcome.best_epoch,
        outcome.history.len(),
        best.mean_rmse
    );
    println!("checkpoint: {}", args.out_checkpoint.display());
    println!("history: {}", history_path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// calibrate
// ---------------------------------------------------------------------------

fn parse_percentiles(text: &str) -> Result<(f64, f64)> {
    let parts: Vec<&str> = text.split(',').collect();
    if parts.len() != 2 {
        return Err(parse_err("percentiles", format!("{text:?} must be lower,upper")));
    }
    let lo = parts[0]
        .trim()
        .parse::<f64>()
        .map_err(|e| parse_err("percentiles", format!("lower {:?}: {e}", parts[0])))?;
    let hi = parts[1]
        .trim()
        .parse::<f64>()
        .map_err(|e| parse_err("percentiles", format!("upper {:?}: {e}", parts[1])))?;
    Ok((lo, hi))
}

pub fn calibrate_cmd(args: CalibrateArgs) -> Result<()> {
    let run = RunConfig::load(args.config.as_deref())?;
    let mut spec = run.calibration;
    if let Some(s) = &args.percentiles {
        let (lo, hi) = parse_percentiles(s)?;
        spec.lower_percentile = lo;
        spec.upper_percentile = hi;
    }
    if let Some(m) = &args.mode {
        spec.mode = m.parse()?;
    }
    spec.validate()?;
    require_file(&args.checkpoint, "checkpoint")?;
    require_dir(&args.normal_frames, "frame directory")?;

    let model = checkpoint::load(&args.checkpoint)?;
    let size = model.config().input_size;
    let ingest = ingest_directory(&args.normal_frames, size)?;
    warn_skipped(&ingest.skipped);

    let errors = frame_errors(&model, &ingest.frames)?;
    let band = calibrate(&errors, &spec)?;
    band.save(&args.out_band)?;

    let mut sorted = errors.clone();
    sorted.sort_by(f64::total_cmp);
    println!(
        "scored {} normal frames: rmse min {:.3} / median {:.3} / max {:.3}",
        sorted.len(),
        sorted[0],
        sorted[sorted.len() / 2],
        sorted[sorted.len() - 1]
    );
    println!("# threshold band ({})", args.out_band.display());
    print!("{}", band.to_toml());
    Ok(())
}

// ---------------------------------------------------------------------------
// score
// ---------------------------------------------------------------------------

/// Lower/upper/total flag counts over scored frames.
fn flag_counts(scored: &[ScoredFrame]) -> (usize, usize, usize) {
    let below = scored.iter().filter(|s| s.verdict.bound_label() == "lower").count();
    let above = scored.iter().filter(|s| s.verdict.bound_label() == "upper").count();
    (below, above, below + above)
}

pub fn score(args: ScoreArgs) -> Result<()> {
    require_file(&args.checkpoint, "checkpoint")?;
    require_file(&args.band, "band")?;
    require_dir(&args.frames, "frame directory")?;
    let model = checkpoint::load(&args.checkpoint)?;
    let band = ThresholdBand::load(&args.band)?;
    let size = model.config().input_size;
    let ingest = ingest_directory(&args.frames, size)?;
    warn_skipped(&ingest.skipped);

    let indices = derive_indices(&ingest.sources);
    let items = indices.into_iter().zip(ingest.frames.into_iter().map(Ok));
    let report = score_sequence(&model, items, &band)?;
    for f in &report.failures {
        eprintln!("warning: frame {} failed: {}", f.frame_index, f.detail);
    }
    write_error_trace(&args.out_csv, &report.scored)?;

    let (below, above, flagged) = flag_counts(&report.scored);
    println!(
        "scored {} frames: {} flagged ({} below band, {} above)",
        report.scored.len(),
        flagged,
        below,
        above
    );
    println!("error trace: {}", args.out_csv.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// stream
// ---------------------------------------------------------------------------

/// Per-frame latency summary. Percentiles are nearest-rank over the observed
/// decode-to-verdict times; fps divides frames by total wall time, so gaps
/// between frames count against it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LatencyStats {
    pub frames: usize,
    pub min_ms: f64,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub max_ms: f64,
    pub fps: f64,
}

impl LatencyStats {
    pub fn from_latencies(latencies_ms: &[f64], wall_seconds: f64) -> Result<Self> {
        if latencies_ms.is_empty() {
            return Err(Error::EmptyInput { op: "latency stats" });
        }
        let mut sorted = latencies_ms.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let rank = |p: f64| sorted[((p / 100.0 * n as f64).ceil() as usize).clamp(1, n) - 1];
        Ok(LatencyStats {
            frames: n,
            min_ms: sorted[0],
            median_ms: rank(50.0),
            p95_ms: rank(95.0),
            max_ms: sorted[n - 1],
            fps: n as f64 / wall_seconds.max(1e-9),
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| parse_err("latency stats", e))
    }
}

impl std::fmt::Display for LatencyStats {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "frames    {}", self.frames)?;
        writeln!(f, "min_ms    {:.3}", self.min_ms)?;
        writeln!(f, "median_ms {:.3}", self.median_ms)?;
        writeln!(f, "p95_ms    {:.3}", self.p95_ms)?;
        writeln!(f, "max_ms    {:.3}", self.max_ms)?;
        writeln!(f, "fps       {:.2}", self.fps)
    }
}

pub fn stream(args: StreamArgs) -> Result<()> {
    require_file(&args.checkpoint, "checkpoint")?;
    require_file(&args.band, "band")?;
    require_dir(&args.source_dir, "source directory")?;
    let model = checkpoint::load(&args.checkpoint)?;
    let band = ThresholdBand::load(&args.band)?;
    let size = model.config().input_size;

    let entries = fs::read_dir(&args.source_dir).map_err(|e| io_err(&args.source_dir, e))?;
    let mut files: BTreeSet<PathBuf> = BTreeSet::new();
    for entry in entries {
        let entry = entry.map_err(|e| io_err(&args.source_dir, e))?;
        if entry.file_type().map_err(|e| io_err(&entry.path(), e))?.is_file() {
            files.insert(entry.path());
        }
    }
    if files.is_empty() {
        return Err(Error::EmptyInput { op: "stream" });
    }
    let files: Vec<PathBuf> = files.into_iter().collect();
    let sources: Vec<String> = files
        .iter()
        .map(|p| p.file_name().unwrap_or_default().to_string_lossy().into_owned())
        .collect();
    let indices = derive_indices(&sources);

    let mut scored: Vec<ScoredFrame> = Vec::with_capacity(files.len());
    let mut stdout = std::io::stdout().lock();
    let wall = Instant::now();
    for ((path, name), &frame_index) in files.iter().zip(&sources).zip(&indices) {
        let started = Instant::now();
        // Decode failures are inline events in a live stream, not fatal.
        let image = match fs::read(path)
            .map_err(|e| io_err(path, e))
            .and_then(|bytes| ppm::decode_ppm(&bytes))
        {
            Ok(image) => image,
            Err(e) => {
                eprintln!("frame {frame_index:>6}  {name}: {e}");
                continue;
            }
        };
        let image = if image.shape()[1] == size && image.shape()[2] == size {
            image
        } else {
            ppm::resize_bilinear(&image, size, size)?
        };
        let batch = frame_batch(&image)?;
        let recon = model.forward_infer(&batch)?;
        let rmse = frame_error(&batch, &recon)?;
        let latency_ms = started.elapsed().as_secs_f64() * 1e3;

        let score = FrameScore { frame_index, rmse, latency_ms };
        let verdict = classify(&score, &band);
        let tag = match verdict.bound {
            Some(bound) => format!("anomalous ({bound})"),
            None => "normal".to_string(),
        };
        writeln!(stdout, "frame {frame_index:>6}  rmse {rmse:>9.3}  {tag}")
            .and_then(|()| stdout.flush())
            .map_err(|e| io_err(Path::new("stdout"), e))?;
        scored.push(ScoredFrame { score, verdict });
    }
    let wall_seconds = wall.elapsed().as_secs_f64();

    if scored.is_empty() {
        return Err(parse_err(
            args.source_dir.display().to_string(),
            format!("none of {} file(s) decoded as P6 pixmaps", files.len()),
        ));
    }
    let latencies: Vec<f64> = scored.iter().map(|s| s.score.latency_ms).collect();
    let stats = LatencyStats::from_latencies(&latencies, wall_seconds)?;
    let (below, above, flagged) = flag_counts(&scored);
    println!("# latency");
    print!("{stats}");
    println!("flagged   {flagged} ({below} below band, {above} above)");
    if let Some(p) = &args.stats {
        write_text(p, &stats.to_toml()?)?;
        println!("stats: {}", p.display());
    }
    if let Some(p) = &args.out_csv {
        write_error_trace(p, &scored)?;
        println!("error trace: {}", p.display());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

pub fn evaluate(args: EvaluateArgs) -> Result<()> {
    require_file(&args.scores_csv, "scores CSV")?;
    require_file(&args.manifest, "manifest")?;
    let trace = read_error_trace(&args.scores_csv)?;
    let manifest = read_manifest(&args.manifest)?;
    if trace.len() != manifest.len() {
        return Err(Error::InvalidArgument {
            op: "evaluate",
            detail: format!(
                "{} scored rows vs {} manifest rows; score exactly the labeled partition",
                trace.len(),
                manifest.len()
            ),
        });
    }
    let mut by_index: HashMap<usize, bool> = HashMap::with_capacity(trace.len());
    for row in &trace {
        if by_index.insert(row.frame_index, row.anomalous).is_some() {
            return Err(Error::InvalidArgument {
                op: "evaluate",
                detail: format!("duplicate frame_index {} in scores", row.frame_index),
            });
        }
    }
    let mut verdicts = Vec::with_capacity(manifest.len());
    let mut truth = Vec::with_capacity(manifest.len());
    for row in &manifest {
        match by_index.get(&row.frame_index) {
            Some(&flagged) => {
                verdicts.push(flagged);
                truth.push(row.label);
            }
            None => {
                return Err(Error::InvalidArgument {
                    op: "evaluate",
                    detail: format!("manifest frame {} has no scored row", row.frame_index),
                })
            }
        }
    }

    let report = per_category_report(&verdicts, &truth)?;
    print!("{report}");
    let cm = &report.confusion;
    println!(
        "confusion: tp {} fp {} fn {} tn {}",
        cm.true_pos, cm.false_pos, cm.false_neg, cm.true_neg
    );

    let report_path =
        args.out_report.clone().unwrap_or_else(|| sibling(&args.scores_csv, "report.csv"));
    let confusion_path =
        args.out_confusion.clone().unwrap_or_else(|| sibling(&args.scores_csv, "confusion.csv"));
    write_report_csv(&report_path, &report)?;
    write_confusion_csv(&confusion_path, &report.confusion)?;
    println!("report: {}", report_path.display());
    println!("confusion: {}", confusion_path.display());
    Ok(())
}
