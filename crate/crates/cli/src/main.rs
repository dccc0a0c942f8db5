//! Single entry point: dataset synthesis, per-component training, threshold
//! calibration, detection over frame directories, and evaluation reports.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use matchlight_core::classifier::{train_classifier, Classifier, ClassifierConfig};
use matchlight_core::finegrain::{train_finegrain, FinegrainConfig, FinegrainModel};
use matchlight_core::labels::{ClassLabel, EventKind, NineClassView};
use matchlight_core::metrics::{
    self, confusion_to_text, curves_to_csv, threshold_sweep, ConfusionCounts, SweepGroup, SweepSample,
};
use matchlight_core::nn::rng::derive_seed;
use matchlight_core::pipeline::{
    read_event_log, run_detection, write_event_log, write_trace, PipelineConfig, PipelineModels,
};
use matchlight_core::synth::{
    self, generate, load_pool, load_split, resize_nearest, DatasetManifest, EntryKind,
    MatchGroundTruth, Split, SynthSpec,
};
use matchlight_core::vae::{calibrate_threshold, train_vae, VaeConfig, VaeModel};
use matchlight_core::Tensor;

#[derive(Parser)]
#[command(name = "matchlight", about = "Soccer event detection cascade", version)]
struct Cli {
    /// Root seed for every stochastic component.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset (and optionally a planted match).
    Synth(SynthArgs),
    /// Train one component on a generated dataset.
    Train(TrainArgs),
    /// Calibrate the gate threshold and the softmax acceptance threshold.
    Calibrate(CalibrateArgs),
    /// Run the detection cascade over a frame directory.
    Detect(DetectArgs),
    /// Evaluate an event log against planted ground truth, or a classifier
    /// against the test split.
    Eval(EvalArgs),
    /// Acceptance-threshold sweep of a trained classifier.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Dataset output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    image_size: usize,
    #[arg(long, default_value_t = 20)]
    train_per_class: usize,
    #[arg(long, default_value_t = 8)]
    val_per_class: usize,
    #[arg(long, default_value_t = 8)]
    test_per_class: usize,
    #[arg(long, default_value_t = 20)]
    pool_per_split: usize,
    #[arg(long, default_value_t = 6)]
    patch_size: usize,
    #[arg(long, default_value_t = 0.03)]
    noise: f64,
    /// Planted-match output directory.
    #[arg(long)]
    match_dir: Option<PathBuf>,
    /// Planted events, comma separated `kind:frame` pairs.
    #[arg(long)]
    events: Option<String>,
    #[arg(long, default_value_t = 600)]
    match_length: usize,
    #[arg(long, default_value_t = 30.0)]
    fps: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Component {
    Vae,
    Classifier,
    Finegrain,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_enum)]
    component: Component,
    /// Dataset root (as written by `synth`).
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch curves CSV.
    #[arg(long)]
    curves: Option<PathBuf>,
    /// Optional TOML config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    input_size: Option<usize>,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    vae: PathBuf,
    #[arg(long)]
    classifier: PathBuf,
    /// Pipeline config TOML to write.
    #[arg(long)]
    out: PathBuf,
    /// Optional CSV report of the calibration sweep.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct DetectArgs {
    /// Frame directory with `frames.txt`.
    #[arg(long)]
    frames: PathBuf,
    #[arg(long)]
    vae: PathBuf,
    #[arg(long)]
    classifier: PathBuf,
    #[arg(long)]
    finegrain: PathBuf,
    /// Pipeline config TOML (as written by `calibrate`); flags override.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long)]
    fps: Option<f64>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    majority: Option<usize>,
    #[arg(long)]
    dedup_seconds: Option<f64>,
    #[arg(long)]
    softmax_tau: Option<f64>,
    #[arg(long)]
    vae_threshold: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    /// Event log produced by `detect` (pairs with --truth).
    #[arg(long)]
    events: Option<PathBuf>,
    /// Planted ground truth file.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Matching tolerance in frames.
    #[arg(long, default_value_t = 15)]
    tolerance_frames: usize,
    /// Dataset root (pairs with --classifier for test-split evaluation).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    classifier: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    classifier: PathBuf,
    /// Comma-separated thresholds, strictly decreasing.
    #[arg(long, default_value = "0.99,0.95,0.9,0.8,0.7,0.6,0.5")]
    thresholds: String,
    /// CSV output path.
    #[arg(long)]
    out: Option<PathBuf>,
}

// ---------------------------------------------------------------------------
// config files
// ---------------------------------------------------------------------------

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainFileConfig {
    epochs: Option<usize>,
    batch_size: Option<usize>,
    learning_rate: Option<f64>,
    input_size: Option<usize>,
    latent_dim: Option<usize>,
    lambda_mamc: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PipelineFileConfig {
    pipeline: PipelineSection,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PipelineSection {
    fps: Option<f64>,
    window: Option<usize>,
    majority: Option<usize>,
    dedup_window_s: Option<f64>,
    vae_threshold: Option<f64>,
    softmax_tau: Option<f64>,
}

fn load_train_config(path: Option<&Path>) -> Result<TrainFileConfig> {
    match path {
        None => Ok(TrainFileConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

// ---------------------------------------------------------------------------
// dataset helpers
// ---------------------------------------------------------------------------

fn event_images(manifest: &DatasetManifest, split: Split, size: usize) -> Result<Vec<Tensor>> {
    let mut out = Vec::new();
    for li in load_split(manifest, split)? {
        if li.label.is_event() {
            out.push(resize_nearest(&li.image, size));
        }
    }
    Ok(out)
}

/// All labeled images of a split under the merged 9-class taxonomy.
fn nine_class_images(
    manifest: &DatasetManifest,
    split: Split,
    size: usize,
) -> Result<Vec<(Tensor, usize)>> {
    let mut out = Vec::new();
    for li in load_split(manifest, split)? {
        let merged = matchlight_core::merge_card_labels(li.label);
        out.push((resize_nearest(&li.image, size), merged.index()));
    }
    Ok(out)
}

fn card_images(manifest: &DatasetManifest, split: Split, size: usize) -> Result<Vec<(Tensor, usize)>> {
    let mut out = Vec::new();
    for li in load_split(manifest, split)? {
        match li.label {
            ClassLabel::YellowCard => out.push((resize_nearest(&li.image, size), 0)),
            ClassLabel::RedCard => out.push((resize_nearest(&li.image, size), 1)),
            _ => {}
        }
    }
    Ok(out)
}

fn nine_class_names() -> Vec<String> {
    NineClassView::ALL.iter().map(|c| c.name().to_string()).collect()
}

fn no_flip_indices() -> Vec<usize> {
    vec![NineClassView::LeftPenaltyArea.index(), NineClassView::RightPenaltyArea.index()]
}

// ---------------------------------------------------------------------------
// commands
// ---------------------------------------------------------------------------

fn cmd_synth(seed: u64, args: &SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        seed,
        image_size: args.image_size,
        train_per_class: args.train_per_class,
        val_per_class: args.val_per_class,
        test_per_class: args.test_per_class,
        pool_per_split: args.pool_per_split,
        patch_size: args.patch_size,
        noise: args.noise,
        ..SynthSpec::default()
    };
    if args.out.is_none() && args.match_dir.is_none() {
        bail!("nothing to do: pass --out and/or --match-dir");
    }
    if let Some(out) = &args.out {
        let manifest = generate(&spec, out)?;
        let mut per_split: BTreeMap<Split, usize> = BTreeMap::new();
        for e in &manifest.entries {
            *per_split.entry(e.split).or_insert(0) += 1;
        }
        for (split, n) in per_split {
            println!("{}: {} images", split, n);
        }
        println!("dataset written to {}", out.display());
    }
    if let Some(match_dir) = &args.match_dir {
        let plan = parse_event_plan(args.events.as_deref().unwrap_or(""))?;
        let truth = synth::plant_match(&spec, &plan, args.match_length, args.fps, match_dir)?;
        println!(
            "planted match: {} frames, {} events -> {}",
            truth.length,
            truth.events.len(),
            match_dir.display()
        );
    }
    Ok(())
}

fn parse_event_plan(text: &str) -> Result<Vec<(EventKind, usize)>> {
    let mut plan = Vec::new();
    for part in text.split(',').filter(|s| !s.is_empty()) {
        let (kind, frame) = part
            .split_once(':')
            .with_context(|| format!("bad event spec {:?}, expected kind:frame", part))?;
        let kind: EventKind =
            kind.parse().map_err(|e| anyhow::anyhow!("bad event kind {:?}: {}", kind, e))?;
        let frame: usize = frame.parse().with_context(|| format!("bad frame index {:?}", frame))?;
        plan.push((kind, frame));
    }
    Ok(plan)
}

fn cmd_train(seed: u64, args: &TrainArgs) -> Result<()> {
    let manifest = DatasetManifest::load(&args.data)?;
    let file = load_train_config(args.config.as_deref())?;
    let epochs = args.epochs.or(file.epochs);
    let batch_size = args.batch_size.or(file.batch_size);
    let learning_rate = args.learning_rate.or(file.learning_rate);
    let input_size = args.input_size.or(file.input_size);
    match args.component {
        Component::Vae => {
            let mut cfg = VaeConfig {
                input_size: input_size.unwrap_or(32),
                latent_dim: file.latent_dim.unwrap_or(16),
                channels: [8, 16, 32, 64],
                ..VaeConfig::default()
            };
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            if let Some(b) = batch_size {
                cfg.batch_size = b;
            }
            if let Some(lr) = learning_rate {
                cfg.learning_rate = lr;
            }
            // the gate trains on event imagery only
            let train = event_images(&manifest, Split::Train, cfg.input_size)?;
            let val = event_images(&manifest, Split::Val, cfg.input_size)?;
            let (model, report) = train_vae(&cfg, &train, &val, derive_seed(seed, &[1]))?;
            model.save(&args.out)?;
            if let Some(curves) = &args.curves {
                fs::write(
                    curves,
                    curves_to_csv(&[
                        ("train_loss", &report.epoch_train_loss),
                        ("val_loss", &report.epoch_val_loss),
                    ]),
                )?;
            }
            println!(
                "vae trained: {} epochs, final val loss {:.3}",
                report.epoch_val_loss.len(),
                report.epoch_val_loss.last().unwrap()
            );
        }
        Component::Classifier => {
            let mut cfg = ClassifierConfig {
                input_size: input_size.unwrap_or(32),
                class_names: nine_class_names(),
                no_flip_classes: no_flip_indices(),
                ..ClassifierConfig::default()
            };
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            if let Some(b) = batch_size {
                cfg.batch_size = b;
            }
            if let Some(lr) = learning_rate {
                cfg.learning_rate = lr;
            }
            let train = nine_class_images(&manifest, Split::Train, cfg.input_size)?;
            let val = nine_class_images(&manifest, Split::Val, cfg.input_size)?;
            let (model, report) = train_classifier(&cfg, &train, &val, derive_seed(seed, &[2]))?;
            model.save(&args.out)?;
            if let Some(curves) = &args.curves {
                fs::write(
                    curves,
                    curves_to_csv(&[
                        ("train_loss", &report.epoch_train_loss),
                        ("val_accuracy", &report.epoch_val_accuracy),
                    ]),
                )?;
            }
            println!(
                "classifier trained: final val accuracy {:.3}",
                report.epoch_val_accuracy.last().unwrap()
            );
        }
        Component::Finegrain => {
            let mut cfg = FinegrainConfig {
                input_size: input_size.unwrap_or(32),
                ..FinegrainConfig::default()
            };
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            if let Some(b) = batch_size {
                cfg.batch_size = b;
            }
            if let Some(lr) = learning_rate {
                cfg.learning_rate = lr;
            }
            if let Some(l) = file.lambda_mamc {
                cfg.lambda_mamc = l;
            }
            let train = card_images(&manifest, Split::Train, cfg.input_size)?;
            let val = card_images(&manifest, Split::Val, cfg.input_size)?;
            let (model, report) = train_finegrain(&cfg, &train, &val, derive_seed(seed, &[3]))?;
            model.save(&args.out)?;
            if let Some(curves) = &args.curves {
                fs::write(
                    curves,
                    curves_to_csv(&[
                        ("ce_loss", &report.epoch_ce_loss),
                        ("mamc_loss", &report.epoch_mamc_loss),
                        ("val_accuracy", &report.epoch_val_accuracy),
                    ]),
                )?;
            }
            println!(
                "finegrain trained: final val accuracy {:.3}",
                report.epoch_val_accuracy.last().unwrap()
            );
        }
    }
    Ok(())
}

fn cmd_calibrate(args: &CalibrateArgs) -> Result<()> {
    let manifest = DatasetManifest::load(&args.data)?;
    let vae = VaeModel::load(&args.vae)?;
    let classifier = Classifier::load(&args.classifier)?;

    // gate threshold: event imagery should pass, the non-soccer pool should not
    let positives = event_images(&manifest, Split::Val, vae.cfg.input_size)?;
    let negatives: Vec<Tensor> = load_pool(&manifest, EntryKind::NonSoccer, Split::Val)?
        .iter()
        .map(|t| resize_nearest(t, vae.cfg.input_size))
        .collect();
    let pos_losses: Vec<f64> =
        positives.iter().map(|img| vae.image_loss(img)).collect::<Result<_, _>>()?;
    let neg_losses: Vec<f64> =
        negatives.iter().map(|img| vae.image_loss(img)).collect::<Result<_, _>>()?;
    let gate = calibrate_threshold(&pos_losses, &neg_losses)?;

    // acceptance threshold: sweep over the classifier's top probabilities
    let (samples, losses) = calibration_samples(&manifest, &classifier, &vae, Split::Val)?;
    let thresholds = [0.99, 0.95, 0.9, 0.8, 0.7, 0.6, 0.5];
    let sweep = threshold_sweep(&samples, &thresholds)?;
    // the operating point is chosen against gate survivors only: deployed, the
    // classifier never sees frames the gate already rejected
    let tau = operating_tau(&samples, &losses, gate.threshold, &thresholds);

    let config_text = format!(
        "[pipeline]\nfps = 30.0\nwindow = 15\nmajority = 8\ndedup_window_s = 10.0\nvae_threshold = {:.6}\nsoftmax_tau = {:.6}\n",
        gate.threshold, tau
    );
    fs::write(&args.out, config_text)?;
    if let Some(report) = &args.report {
        let mut csv = gate.to_csv();
        csv.push_str(&sweep.to_csv());
        fs::write(report, csv)?;
    }
    println!(
        "vae threshold {:.3} (balanced accuracy {:.3}), softmax tau {:.2}",
        gate.threshold, gate.balanced_accuracy, tau
    );
    println!(
        "ungated sweep best: threshold {:.2}, F1+recall {:.3}",
        sweep.best().threshold,
        sweep.best().f1_event.unwrap_or(0.0) + sweep.best().recall_nonsoccer
    );
    println!("pipeline config written to {}", args.out.display());
    Ok(())
}

fn sweep_samples(
    manifest: &DatasetManifest,
    classifier: &Classifier,
    split: Split,
) -> Result<Vec<SweepSample>> {
    let size = classifier.cfg.input_size;
    let mut samples = Vec::new();
    let mut push = |img: &Tensor, group: SweepGroup| -> Result<()> {
        let v = classifier.classify_with_threshold(&resize_nearest(img, size), 0.0)?;
        let (top, p) = v.top();
        samples.push(SweepSample { group, predicted_class: top, top_prob: p });
        Ok(())
    };
    for li in load_split(manifest, split)? {
        let merged = matchlight_core::merge_card_labels(li.label);
        if li.label.is_event() {
            push(&li.image, SweepGroup::Event(merged.index()))?;
        } else {
            // scene classes are trained absorbers, not sweep populations
        }
    }
    for img in load_pool(manifest, EntryKind::OtherSoccer, split)? {
        push(&img, SweepGroup::OtherSoccer)?;
    }
    for img in load_pool(manifest, EntryKind::NonSoccer, split)? {
        push(&img, SweepGroup::NonSoccer)?;
    }
    Ok(samples)
}

/// Like [`sweep_samples`] but also returns each sample's gate loss.
fn calibration_samples(
    manifest: &DatasetManifest,
    classifier: &Classifier,
    vae: &VaeModel,
    split: Split,
) -> Result<(Vec<SweepSample>, Vec<f64>)> {
    let size = classifier.cfg.input_size;
    let gate_size = vae.cfg.input_size;
    let mut samples = Vec::new();
    let mut losses = Vec::new();
    let mut push = |img: &Tensor, group: SweepGroup| -> Result<()> {
        let v = classifier.classify_with_threshold(&resize_nearest(img, size), 0.0)?;
        let (top, p) = v.top();
        samples.push(SweepSample { group, predicted_class: top, top_prob: p });
        losses.push(vae.image_loss(&resize_nearest(img, gate_size))?);
        Ok(())
    };
    for li in load_split(manifest, split)? {
        let merged = matchlight_core::merge_card_labels(li.label);
        if li.label.is_event() {
            push(&li.image, SweepGroup::Event(merged.index()))?;
        }
    }
    for img in load_pool(manifest, EntryKind::OtherSoccer, split)? {
        push(&img, SweepGroup::OtherSoccer)?;
    }
    for img in load_pool(manifest, EntryKind::NonSoccer, split)? {
        push(&img, SweepGroup::NonSoccer)?;
    }
    Ok((samples, losses))
}

/// Chooses the deployed acceptance threshold. Only samples below the gate
/// threshold count; the score is event F1 plus the rejected fraction of the
/// surviving no-highlight samples. Ties go to the lower threshold, which
/// leaves more margin for per-frame jitter under the majority vote.
fn operating_tau(
    samples: &[SweepSample],
    losses: &[f64],
    gate_threshold: f64,
    thresholds: &[f64],
) -> f64 {
    let survivors: Vec<&SweepSample> = samples
        .iter()
        .zip(losses)
        .filter(|(_, &l)| l <= gate_threshold)
        .map(|(s, _)| s)
        .collect();
    let mut best = (f64::NEG_INFINITY, thresholds[0]);
    for &t in thresholds {
        let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
        let (mut nh_total, mut nh_rejected) = (0usize, 0usize);
        for s in &survivors {
            let accepted = s.top_prob > t;
            match s.group {
                SweepGroup::Event(class) => {
                    if accepted && s.predicted_class == class {
                        tp += 1;
                    } else if accepted {
                        fp += 1;
                        fn_ += 1;
                    } else {
                        fn_ += 1;
                    }
                }
                SweepGroup::OtherSoccer | SweepGroup::NonSoccer => {
                    nh_total += 1;
                    if accepted {
                        fp += 1;
                    } else {
                        nh_rejected += 1;
                    }
                }
            }
        }
        let f1 = if 2 * tp + fp + fn_ == 0 {
            0.0
        } else {
            2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
        };
        let reject = if nh_total == 0 { 1.0 } else { nh_rejected as f64 / nh_total as f64 };
        let score = f1 + reject;
        if score > best.0 || (score == best.0 && t < best.1) {
            best = (score, t);
        }
    }
    best.1
}

fn cmd_detect(args: &DetectArgs) -> Result<()> {
    let mut cfg = PipelineConfig::default();
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let file: PipelineFileConfig =
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let s = file.pipeline;
        if let Some(v) = s.fps {
            cfg.fps = v;
        }
        if let Some(v) = s.window {
            cfg.window = v;
        }
        if let Some(v) = s.majority {
            cfg.majority = v;
        }
        if let Some(v) = s.dedup_window_s {
            cfg.dedup_window_s = v;
        }
        if let Some(v) = s.vae_threshold {
            cfg.vae_threshold = v;
        }
        if let Some(v) = s.softmax_tau {
            cfg.softmax_tau = v;
        }
    }
    if let Some(v) = args.fps {
        cfg.fps = v;
    }
    if let Some(v) = args.window {
        cfg.window = v;
    }
    if let Some(v) = args.majority {
        cfg.majority = v;
    }
    if let Some(v) = args.dedup_seconds {
        cfg.dedup_window_s = v;
    }
    if let Some(v) = args.softmax_tau {
        cfg.softmax_tau = v;
    }
    if let Some(v) = args.vae_threshold {
        cfg.vae_threshold = v;
    }
    cfg.validate()?;
    let models = PipelineModels {
        vae: VaeModel::load(&args.vae)?,
        classifier: Classifier::load(&args.classifier)?,
        finegrain: FinegrainModel::load(&args.finegrain)?,
    };
    let run = run_detection(&args.frames, &models, &cfg)?;
    write_event_log(&args.out, &run.occurrences)?;
    if let Some(trace) = &args.trace {
        write_trace(trace, &run.verdicts)?;
    }
    let mut per_kind: BTreeMap<EventKind, usize> = BTreeMap::new();
    for o in &run.occurrences {
        *per_kind.entry(o.kind).or_insert(0) += 1;
    }
    println!("{} frames, {} occurrences", run.verdicts.len(), run.occurrences.len());
    for (kind, n) in per_kind {
        println!("  {}: {}", kind, n);
    }
    println!("event log written to {}", args.out.display());
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    match (&args.events, &args.truth, &args.data, &args.classifier) {
        (Some(events), Some(truth), None, None) => {
            eval_events(events, truth, args.tolerance_frames)
        }
        (None, None, Some(data), Some(classifier)) => eval_classifier(data, classifier),
        _ => bail!("pass either --events with --truth, or --data with --classifier"),
    }
}

fn eval_events(events: &Path, truth: &Path, tolerance: usize) -> Result<()> {
    let occurrences = read_event_log(events)?;
    let planted = MatchGroundTruth::load(truth)?;
    let mut matched_truth = vec![false; planted.len()];
    let mut matched_occ = vec![false; occurrences.len()];
    for (ti, t) in planted.iter().enumerate() {
        for (oi, o) in occurrences.iter().enumerate() {
            if matched_occ[oi] || o.kind != t.kind {
                continue;
            }
            let center = (o.first_frame + o.last_frame) / 2;
            if center.abs_diff(t.frame_index) <= tolerance {
                matched_truth[ti] = true;
                matched_occ[oi] = true;
                break;
            }
        }
    }
    let tp = matched_truth.iter().filter(|&&m| m).count();
    let fn_ = planted.len() - tp;
    let fp = matched_occ.iter().filter(|&&m| !m).count();
    let c = ConfusionCounts { tp, fp, fn_, tn: 0 };
    println!("planted events: {}", planted.len());
    println!("detected occurrences: {}", occurrences.len());
    println!("matched within +-{} frames: {}", tolerance, tp);
    println!("missed: {}", fn_);
    println!("false occurrences: {}", fp);
    match (metrics::precision(&c), metrics::recall(&c)) {
        (Some(p), Some(r)) => println!("precision {:.3}, recall {:.3}", p, r),
        _ => println!("precision/recall undefined (no positives)"),
    }
    Ok(())
}

fn eval_classifier(data: &Path, classifier: &Path) -> Result<()> {
    let manifest = DatasetManifest::load(data)?;
    let model = Classifier::load(classifier)?;
    let test = nine_class_images(&manifest, Split::Test, model.cfg.input_size)?;
    let mut truth = Vec::with_capacity(test.len());
    let mut pred = Vec::with_capacity(test.len());
    for (img, label) in &test {
        let v = model.classify_with_threshold(img, 0.0)?;
        truth.push(*label);
        pred.push(v.top().0);
    }
    let k = model.cfg.num_classes();
    let names: Vec<&str> = model.cfg.class_names.iter().map(|s| s.as_str()).collect();
    let matrix = metrics::confusion_matrix(&truth, &pred, k)?;
    println!("confusion matrix (rows = truth):");
    print!("{}", confusion_to_text(&matrix, &names));
    println!("\nper-class precision:");
    for (i, counts) in metrics::per_class_counts(&truth, &pred, k)?.iter().enumerate() {
        match metrics::precision(counts) {
            Some(p) => println!("  {:>18}: {:.3}", names[i], p),
            None => println!("  {:>18}: -", names[i]),
        }
    }
    let acc = truth.iter().zip(&pred).filter(|(t, p)| t == p).count() as f64 / truth.len() as f64;
    println!("\ntop-1 accuracy: {:.3}", acc);
    Ok(())
}

fn cmd_sweep(args: &SweepArgs) -> Result<()> {
    let manifest = DatasetManifest::load(&args.data)?;
    let classifier = Classifier::load(&args.classifier)?;
    let thresholds: Vec<f64> = args
        .thresholds
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .context("bad --thresholds list")?;
    let samples = sweep_samples(&manifest, &classifier, Split::Test)?;
    let report = threshold_sweep(&samples, &thresholds)?;
    print!("{}", report.to_text());
    if let Some(out) = &args.out {
        fs::write(out, report.to_csv())?;
        println!("report written to {}", out.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth(args) => cmd_synth(cli.seed, args),
        Command::Train(args) => cmd_train(cli.seed, args),
        Command::Calibrate(args) => cmd_calibrate(args),
        Command::Detect(args) => cmd_detect(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Sweep(args) => cmd_sweep(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e);
            ExitCode::FAILURE
        }
    }
}
