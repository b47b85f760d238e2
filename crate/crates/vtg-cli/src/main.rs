//! `vtg`: synthetic data generation, toy training, grounding, batch
//! pipeline runs, and metric evaluation from the command line.
//!
//! Exit codes: 0 ok, 1 domain error (bad data, failed run), 2 usage error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};

use vtg_core::decoder::{decode_candidates, forward};
use vtg_core::decoder::{DecoderConfig, DecoderWeights};
use vtg_core::eval::{
    acc_at_gqa, acc_at_iou_avg, mean_iop, mean_iou, multi_moment_map, recall_at_iou, EvalRecord,
    MetricsReport,
};
use vtg_core::io::{
    load_annotations, load_decoder_weights, load_features, load_predictions, save_annotations,
    save_decoder_weights, save_features, save_predictions, FeaturePack, PredictionRecord,
    RunConfig,
};
use vtg_core::orchestrator::{run_pipeline, HttpBackend, MockBackend, PipelineInput, RoleBackend};
use vtg_core::training::{
    assign_targets, generate_toy_dataset, gradient_check, train_toy, MAX_OFFSET_UNITS,
};
use vtg_core::types::{AnnotationRecord, FeatureSequence, Moment, RegToken, VideoMeta};

#[derive(Parser)]
#[command(name = "vtg", version, about = "Video temporal grounding toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BackendKind {
    Mock,
    Http,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset: annotations plus per-clip feature files
    Synth {
        /// Frames per clip (must divide by 2^(pyramid_levels - 1))
        #[arg(long)]
        t: usize,
        #[arg(long)]
        seed: u64,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        clips: usize,
        /// Optional run-config JSON overriding decoder dimensions
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Fit the decoder on synthetic data with plain gradient descent
    TrainToy {
        #[arg(long)]
        steps: usize,
        #[arg(long)]
        lr: f64,
        #[arg(long)]
        seed: u64,
        /// Weight manifest path to write (e.g. weights.json)
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode candidate moments for one clip's features
    Ground {
        /// Weight manifest written by train-toy
        #[arg(long)]
        weights: PathBuf,
        /// Feature manifest written by synth
        #[arg(long)]
        features: PathBuf,
        /// Query text recorded alongside the candidates
        #[arg(long)]
        query: String,
        #[arg(long, default_value_t = 5)]
        topk: usize,
        /// Video duration in seconds; defaults to the feature file's value
        #[arg(long)]
        duration: Option<f64>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run the full reasoning pipeline over an annotation file
    Pipeline {
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long, value_enum)]
        backend: BackendKind,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute grounding/QA metrics from predictions and ground truth
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Comma-separated subset of: riou, miou, miop, gqa, map, acciou
        #[arg(long, default_value = "riou,miou,miop")]
        metrics: String,
        /// Comma-separated IoU thresholds for riou
        #[arg(long, default_value = "0.3,0.5,0.7")]
        thresholds: String,
        /// Also write the report as JSON ("-" for stdout)
        #[arg(long)]
        json: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Verify decoder gradients against finite differences
    Gradcheck {
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        /// Optional run-config JSON overriding the loss parameters
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

/// Domain failures exit 1; bad invocations exit 2 (clap handles its own).
enum CliError {
    Usage(String),
    Domain(anyhow::Error),
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Domain(e)
    }
}

impl From<vtg_core::Error> for CliError {
    fn from(e: vtg_core::Error) -> Self {
        CliError::Domain(e.into())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Domain(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(CliError::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig, CliError> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            Ok(RunConfig::load(p).with_context(|| format!("loading config {}", p.display()))?)
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth {
            t,
            seed,
            out,
            clips,
            config,
        } => synth(t, seed, &out, clips, &config),
        Command::TrainToy {
            steps,
            lr,
            seed,
            out,
        } => train_toy_cmd(steps, lr, seed, &out),
        Command::Ground {
            weights,
            features,
            query,
            topk,
            duration,
            config,
        } => ground(&weights, &features, &query, topk, duration, &config),
        Command::Pipeline {
            annotations,
            backend,
            config,
            out,
        } => pipeline(&annotations, backend, &config, &out),
        Command::Eval {
            pred,
            gt,
            metrics,
            thresholds,
            json,
            config,
        } => eval(&pred, &gt, &metrics, &thresholds, &json, &config),
        Command::Gradcheck { seed, eps, config } => gradcheck_cmd(seed, eps, &config),
    }
}

fn synth(
    t: usize,
    seed: u64,
    out: &Path,
    clips: usize,
    config: &Option<PathBuf>,
) -> Result<(), CliError> {
    let cfg = match config {
        Some(_) => load_config(config)?.decoder,
        // synthetic data defaults to the toy-scale decoder dimensions
        None => DecoderConfig::tiny(),
    };
    cfg.check_t(t)?;
    if clips == 0 {
        return Err(CliError::Usage("--clips must be at least 1".into()));
    }
    let dataset = generate_toy_dataset(seed, clips, &cfg, t);
    std::fs::create_dir_all(out.join("features")).map_err(|e| anyhow!(e))?;
    let mut annotations = Vec::with_capacity(clips);
    for (i, clip) in dataset.clips.iter().enumerate() {
        let (question, options, answer_index) = if i % 2 == 0 {
            (
                Some("Which half of the clip contains the signature event?".to_string()),
                Some(vec![
                    "the beginning".to_string(),
                    "the middle".to_string(),
                    "the end".to_string(),
                    "it never occurs".to_string(),
                ]),
                Some(i % 4),
            )
        } else {
            (None, None, None)
        };
        annotations.push(AnnotationRecord {
            video_id: clip.video_id.clone(),
            duration: clip.duration,
            query: "the signature pattern appears".to_string(),
            question,
            options,
            answer_index,
            subtitles: None,
            gt_moments: vec![clip.gt],
        });
        let pack = FeaturePack {
            video_id: clip.video_id.clone(),
            duration: clip.duration,
            features: clip.features.clone(),
            reg: clip.reg.clone(),
        };
        save_features(
            &out.join("features").join(format!("{}.json", clip.video_id)),
            &pack,
        )?;
    }
    save_annotations(&out.join("annotations.jsonl"), &annotations)?;
    println!(
        "wrote {} clips to {} (annotations.jsonl + features/)",
        clips,
        out.display()
    );
    Ok(())
}

fn train_toy_cmd(steps: usize, lr: f64, seed: u64, out: &Path) -> Result<(), CliError> {
    let run = train_toy(seed, steps, lr)?;
    save_decoder_weights(out, &run.weights, &run.cfg)?;
    let initial = run.history.first().copied().unwrap_or(f64::NAN);
    let final_loss = run.history.last().copied().unwrap_or(f64::NAN);
    println!(
        "steps={steps} initial_loss={initial:.6} final_loss={final_loss:.6} weights={}",
        out.display()
    );
    Ok(())
}

fn ground(
    weights_path: &Path,
    features_path: &Path,
    query: &str,
    topk: usize,
    duration: Option<f64>,
    config: &Option<PathBuf>,
) -> Result<(), CliError> {
    let run_cfg = load_config(config)?;
    let (weights, cfg) = load_decoder_weights(weights_path)?;
    let pack = load_features(features_path)?;
    let duration = duration.unwrap_or(pack.duration);
    let trace = forward(&pack.features, &pack.reg, &weights, &cfg)?;
    let candidates = decode_candidates(&trace, duration, topk, run_cfg.pipeline.nms_iou)?;
    let triples: Vec<[f64; 3]> = candidates
        .iter()
        .map(|m| [m.start, m.end, m.score.unwrap_or(0.0)])
        .collect();
    let out = serde_json::json!({
        "video_id": pack.video_id,
        "query": query,
        "duration": duration,
        "candidates": triples,
    });
    println!("{out}");
    Ok(())
}

fn pipeline(
    annotations_path: &Path,
    backend_kind: BackendKind,
    config: &Option<PathBuf>,
    out: &Path,
) -> Result<(), CliError> {
    let cfg = load_config(config)?;
    let records = load_annotations(annotations_path)?;
    let mock;
    let http;
    let backend: &dyn RoleBackend = match backend_kind {
        BackendKind::Mock => {
            mock = MockBackend::new(cfg.mock_seed);
            &mock
        }
        BackendKind::Http => {
            http = HttpBackend::new(cfg.backend.clone())?;
            &http
        }
    };
    let mut predictions = Vec::with_capacity(records.len());
    for record in &records {
        let input = PipelineInput {
            video: VideoMeta::new(record.video_id.clone(), record.duration, vec![])?,
            question: record
                .question
                .clone()
                .unwrap_or_else(|| record.query.clone()),
            options: record.options.clone(),
            subtitles: record.subtitles.clone(),
        };
        let result = run_pipeline(&input, backend, &cfg.pipeline)?;
        predictions.push(PredictionRecord::from_result(
            record.video_id.clone(),
            &result,
        ));
    }
    save_predictions(out, &predictions)?;
    println!(
        "wrote {} predictions to {}",
        predictions.len(),
        out.display()
    );
    Ok(())
}

/// First option letter in an answer like "(B)", "B", or "B) because ...".
fn parse_option_letter(answer: &str) -> Option<usize> {
    answer
        .chars()
        .find(|c| c.is_ascii_alphabetic())
        .map(|c| (c.to_ascii_uppercase() as u8 - b'A') as usize)
}

fn parse_thresholds(spec: &str) -> Result<Vec<f64>, CliError> {
    let values: Result<Vec<f64>, _> = spec.split(',').map(|s| s.trim().parse::<f64>()).collect();
    match values {
        Ok(v) if !v.is_empty() => Ok(v),
        _ => Err(CliError::Usage(format!("bad threshold list `{spec}`"))),
    }
}

fn eval(
    pred_path: &Path,
    gt_path: &Path,
    metrics: &str,
    thresholds: &str,
    json_out: &Option<PathBuf>,
    config: &Option<PathBuf>,
) -> Result<(), CliError> {
    let cfg = load_config(config)?;
    let thresholds = parse_thresholds(thresholds)?;
    let predictions = load_predictions(pred_path)?;
    let gt = load_annotations(gt_path)?;
    if predictions.len() != gt.len() {
        return Err(CliError::Domain(anyhow!(
            "prediction count {} != annotation count {}",
            predictions.len(),
            gt.len()
        )));
    }
    let mut records = Vec::with_capacity(gt.len());
    for (i, (pred, ann)) in predictions.iter().zip(&gt).enumerate() {
        if pred.video_id != ann.video_id {
            return Err(CliError::Domain(anyhow!(
                "line {}: prediction video {} != annotation video {}",
                i + 1,
                pred.video_id,
                ann.video_id
            )));
        }
        let mut moments = pred.ranked_moments();
        if moments.is_empty() {
            // degraded/answer-only rows score zero overlap rather than
            // dropping out of the denominator
            moments.push(Moment {
                start: 0.0,
                end: 0.0,
                score: Some(0.0),
            });
        }
        let answer_correct = match (ann.answer_index, &pred.answer) {
            (Some(idx), Some(answer)) => Some(parse_option_letter(answer) == Some(idx)),
            _ => None,
        };
        records.push(EvalRecord::new(
            ann.video_id.clone(),
            moments,
            ann.gt_moments.clone(),
            answer_correct,
        )?);
    }

    let mut report = MetricsReport {
        n_records: records.len(),
        ..Default::default()
    };
    for key in metrics.split(',').map(str::trim).filter(|k| !k.is_empty()) {
        match key {
            "riou" => {
                let values = recall_at_iou(&records, &thresholds)?;
                report.recall_iou = Some(thresholds.iter().copied().zip(values).collect());
            }
            "miou" => report.mean_iou = Some(mean_iou(&records)?),
            "miop" => report.mean_iop = Some(mean_iop(&records)?),
            "gqa" => report.acc_gqa = Some(acc_at_gqa(&records, 0.5)?),
            "map" => report.map = Some(multi_moment_map(&records, &cfg.map_thresholds)?),
            "acciou" => report.acc_iou = Some(acc_at_iou_avg(&records, &cfg.acc_iou_thresholds)?),
            other => return Err(CliError::Usage(format!("unknown metric `{other}`"))),
        }
    }

    println!("{}", report.text_table());
    if let Some(path) = json_out {
        let text = serde_json::to_string_pretty(&report).map_err(|e| anyhow!(e))?;
        if path.as_os_str() == "-" {
            println!("{text}");
        } else {
            std::fs::write(path, text).map_err(|e| anyhow!(e))?;
        }
    }
    Ok(())
}

fn gradcheck_cmd(seed: u64, eps: f64, config: &Option<PathBuf>) -> Result<(), CliError> {
    let loss_params = load_config(config)?.loss;
    let cfg = DecoderConfig::tiny();
    let weights = DecoderWeights::init(&cfg, seed)?;
    let t = 8usize;
    let d = cfg.d_input;
    let mut values = Vec::with_capacity(t * d);
    for ti in 0..t {
        for k in 0..d {
            values.push(((ti * 7 + k * 3) as f64 * 0.11).sin());
        }
    }
    let features = FeatureSequence::new(t, 1, 1, d, values, (0..t).map(|i| i as f64).collect())?;
    let reg = RegToken::new((0..d).map(|i| (i as f64 * 0.31).cos()).collect())?;
    let gt = Moment::new(2.0, 6.0)?;
    let mut rng = {
        use vtg_core::training::seeded_rng;
        seeded_rng(seed)
    };
    let ta = assign_targets(
        &gt,
        t as f64,
        t,
        cfg.pyramid_levels,
        MAX_OFFSET_UNITS,
        &mut rng,
    )?;
    let report = gradient_check(
        &features,
        &reg,
        &weights,
        &cfg,
        &ta,
        &loss_params,
        eps,
    )?;
    println!("max relative error: {:.3e}", report.max_rel_error);
    if report.max_rel_error > 1e-6 {
        return Err(CliError::Domain(anyhow!(
            "gradient check failed: {:.3e} > 1e-6",
            report.max_rel_error
        )));
    }
    Ok(())
}
