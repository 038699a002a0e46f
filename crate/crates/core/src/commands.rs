//! The work behind each command-line subcommand, kept in the library so
//! tests can drive it directly.

use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::dataset::{Dataset, RecordStream, VideoRecord};
use crate::encoder::Predictor;
use crate::error::{Error, Result};
use crate::eval::{evaluate, predict_video, warm_params, EvalReport, StreamingPredictor};
use crate::gradcheck::{run_all, GradcheckReport};
use crate::kinematics::KinematicModel;
use crate::param_vector::{ParamVector, PARAM_DIM};
use crate::synth::build_dataset;
use crate::train::Trainer;

pub const CHECKPOINT_FILE: &str = "checkpoint.tpck";

/// One line of `predictions.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionLine {
    pub video: String,
    pub frame: usize,
    pub params: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
struct LossRow {
    iteration: u64,
    frame: usize,
    batch: usize,
    total: f64,
    l2d: f64,
    l3d: f64,
    l_theta: f64,
    l_adv: f64,
    d_loss: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
struct EpochRow {
    iteration: u64,
    mpjpe: f64,
    pa_mpjpe: f64,
    accel: f64,
}

#[derive(Debug, Clone, Serialize)]
struct EvalRow<'a> {
    run: &'a str,
    dataset: &'a str,
    mpjpe: f64,
    pa_mpjpe: f64,
    accel: f64,
    mpvpe: &'a str,
}

/// Summary written to `run.json` by `train`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSummary {
    pub iterations: u64,
    pub seconds: f64,
    pub dataset: String,
    pub untrained: Option<EvalReport>,
    pub trained: Option<EvalReport>,
    pub final_lr_predictor: f64,
    pub final_lr_discriminator: f64,
    pub config: RunConfig,
}

fn summary_only(r: &EvalReport) -> EvalReport {
    EvalReport {
        videos: Vec::new(),
        ..r.clone()
    }
}

/// Loads `data.dir` when set, otherwise regenerates the synthetic dataset.
pub fn load_dataset(config: &RunConfig) -> Result<(Dataset, String)> {
    match &config.data.dir {
        Some(dir) => Ok((Dataset::load(dir)?, dir.display().to_string())),
        None => Ok((
            build_dataset(&config.synth, &KinematicModel::default_body())?,
            "synthetic".into(),
        )),
    }
}

pub fn cmd_synth(config: &RunConfig, out: &Path) -> Result<Dataset> {
    let data = build_dataset(&config.synth, &KinematicModel::default_body())?;
    data.save(out)?;
    fs::write(out.join("config.toml"), config.to_toml_string()?)?;
    info!("wrote {} videos to {}", data.videos.len(), out.display());
    Ok(data)
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    Ok(csv::Writer::from_writer(fs::File::create(path)?))
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(e) => Error::Io(e),
        k => Error::Record(format!("csv: {k:?}")),
    }
}

/// Trains from scratch, or from `resume` when given, up to
/// `train.iterations`. Writes the checkpoint, `losses.csv`, `metrics.csv`
/// (one row per test evaluation) and `run.json` into `out`.
pub fn cmd_train(config: &RunConfig, out: &Path, resume: Option<&Path>) -> Result<TrainSummary> {
    fs::create_dir_all(out)?;
    let (data, name) = load_dataset(config)?;
    let mut trainer = match resume {
        Some(p) => {
            let (_, state) = checkpoint::load(p)?;
            Trainer::resume(config.clone(), &data, state)?
        }
        None => Trainer::new(config.clone(), &data)?,
    };
    let has_test = !data.test.is_empty();
    let untrained = if has_test { Some(trainer.evaluate_test()?) } else { None };
    if let Some(r) = &untrained {
        info!("start: test mpjpe {:.2} mm", r.mpjpe);
    }
    let started = Instant::now();
    let outcome = trainer.run(config.train.iterations);
    // whatever happened, keep what was logged
    let mut losses = csv_writer(&out.join("losses.csv"))?;
    for l in &trainer.history {
        losses
            .serialize(LossRow {
                iteration: l.iteration,
                frame: l.frame,
                batch: l.batch,
                total: l.loss.total,
                l2d: l.loss.l2d,
                l3d: l.loss.l3d,
                l_theta: l.loss.l_theta,
                l_adv: l.loss.l_adv,
                d_loss: l.d_loss,
            })
            .map_err(csv_err)?;
    }
    losses.flush()?;
    outcome?;
    let seconds = started.elapsed().as_secs_f64();
    let trained = if has_test { Some(trainer.evaluate_test()?) } else { None };
    let mut metrics = csv_writer(&out.join("metrics.csv"))?;
    let final_row = trained.as_ref().map(|r| (trainer.iteration(), r));
    for (it, r) in trainer.evals.iter().map(|(i, r)| (*i, r)).chain(final_row) {
        metrics
            .serialize(EpochRow {
                iteration: it,
                mpjpe: r.mpjpe,
                pa_mpjpe: r.pa_mpjpe,
                accel: r.accel,
            })
            .map_err(csv_err)?;
    }
    metrics.flush()?;
    checkpoint::save(&out.join(CHECKPOINT_FILE), config, &trainer.state())?;
    let summary = TrainSummary {
        iterations: trainer.iteration(),
        seconds,
        dataset: name,
        untrained: untrained.as_ref().map(summary_only),
        trained: trained.as_ref().map(summary_only),
        final_lr_predictor: trainer.opt_predictor.lr,
        final_lr_discriminator: trainer.opt_discriminator.lr,
        config: config.clone(),
    };
    fs::write(out.join("run.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

fn write_prediction<W: Write>(out: &mut W, video: &str, frame: usize, p: &ParamVector) -> Result<()> {
    let line = PredictionLine {
        video: video.to_string(),
        frame,
        params: p.as_slice().to_vec(),
    };
    serde_json::to_writer(&mut *out, &line)?;
    out.write_all(b"\n")?;
    Ok(())
}

/// Frame-by-frame evaluation of the test split. Appends one row to
/// `out/metrics.csv` and writes every prediction to `out/predictions.jsonl`.
pub fn cmd_eval(config: &RunConfig, checkpoint_path: &Path, out: &Path, run: &str) -> Result<EvalReport> {
    fs::create_dir_all(out)?;
    let (_, state) = checkpoint::load(checkpoint_path)?;
    let (data, name) = load_dataset(config)?;
    let predictor = state.predictor;
    check_feature_dim(&predictor, data.feature_dim())?;
    let body = KinematicModel::default_body();
    let past = config.loader.past;
    let videos: Vec<&VideoRecord> = data.test.iter().map(|&i| &data.videos[i]).collect();
    let report = evaluate(&predictor, &body, &videos, past, config.train.warm_start)?;

    let mut preds = std::io::BufWriter::new(fs::File::create(out.join("predictions.jsonl"))?);
    for v in &videos {
        for (k, p) in predict_video(&predictor, v, past, config.train.warm_start)?
            .iter()
            .enumerate()
        {
            write_prediction(&mut preds, &v.id, past + k, p)?;
        }
    }
    preds.flush()?;

    let path = out.join("metrics.csv");
    let fresh = !path.exists();
    let file = OpenOptions::new().create(true).append(true).open(&path)?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    w.serialize(EvalRow {
        run,
        dataset: &name,
        mpjpe: report.mpjpe,
        pa_mpjpe: report.pa_mpjpe,
        accel: report.accel,
        mpvpe: "n/a",
    })
    .map_err(csv_err)?;
    w.flush()?;
    fs::write(out.join("eval.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

fn check_feature_dim(predictor: &Predictor, dim: usize) -> Result<()> {
    if dim != predictor.config.feature_dim {
        return Err(Error::Config(format!(
            "features have dim {dim}, checkpoint expects {}",
            predictor.config.feature_dim
        )));
    }
    Ok(())
}

/// Runs the streaming predictor over `frames` in arrival order, writing a
/// JSON line per prediction as soon as it exists. Returns the number of
/// predictions.
pub fn stream_predictions<W: Write>(
    predictor: Predictor,
    warm: Vec<ParamVector>,
    id: &str,
    mut frames: impl FnMut() -> Result<Option<Vec<f64>>>,
    out: &mut W,
) -> Result<usize> {
    let past = warm.len();
    let mut live = StreamingPredictor::new(predictor, warm)?;
    let mut n = 0;
    while let Some(f) = frames()? {
        let t = live.frames_seen();
        if let Some(p) = live.push(f)? {
            debug_assert!(t >= past);
            write_prediction(out, id, t, &p)?;
            out.flush()?;
            n += 1;
        }
    }
    Ok(n)
}

/// Where `infer` reads frames from.
#[derive(Debug, Clone)]
pub enum InferInput {
    /// A stored video sidecar; warm start follows `train.warm_start`.
    Video(PathBuf),
    /// A `frames x F` feature record (`-` for stdin) with optional
    /// `T x 85` warm-start parameters; the mean is used otherwise.
    Features { path: PathBuf, warm: Option<PathBuf> },
}

fn read_warm(path: &Path, past: usize) -> Result<Vec<ParamVector>> {
    let rec = crate::dataset::Record::load(path)?;
    if rec.dims != [past, PARAM_DIM] {
        return Err(Error::Record(format!(
            "warm start must be {past} x {PARAM_DIM}, got {:?}",
            rec.dims
        )));
    }
    rec.data.chunks(PARAM_DIM).map(ParamVector::from_slice).collect()
}

pub fn cmd_infer<W: Write>(
    config: &RunConfig,
    checkpoint_path: &Path,
    input: &InferInput,
    out: &mut W,
) -> Result<usize> {
    let (_, state) = checkpoint::load(checkpoint_path)?;
    let predictor = state.predictor;
    let past = config.loader.past;
    match input {
        InferInput::Video(sidecar) => {
            let video = crate::dataset::load_video(sidecar)?;
            check_feature_dim(&predictor, video.feature_dim())?;
            let warm = warm_params(&video, config.train.warm_start, &predictor.mean, past);
            let mut it = video.static_feats.iter().cloned();
            stream_predictions(predictor, warm, &video.id, || Ok(it.next()), out)
        }
        InferInput::Features { path, warm } => {
            let warm = match warm {
                Some(p) => read_warm(p, past)?,
                None => vec![predictor.mean.clone(); past],
            };
            let reader: Box<dyn Read> = if path.as_os_str() == "-" {
                Box::new(std::io::stdin().lock())
            } else {
                Box::new(fs::File::open(path)?)
            };
            let mut stream = RecordStream::open(BufReader::new(reader))?;
            if stream.row_len() != predictor.config.feature_dim {
                return Err(Error::Record(format!(
                    "feature rows have {} values, checkpoint expects {}",
                    stream.row_len(),
                    predictor.config.feature_dim
                )));
            }
            let id = path
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("stream")
                .to_string();
            stream_predictions(predictor, warm, &id, || stream.next_row(), out)
        }
    }
}

/// Reads a `predictions.jsonl` file.
pub fn read_predictions(path: &Path) -> Result<Vec<PredictionLine>> {
    BufReader::new(fs::File::open(path)?)
        .lines()
        .filter(|l| !matches!(l, Ok(s) if s.trim().is_empty()))
        .map(|l| Ok(serde_json::from_str(&l?)?))
        .collect()
}

/// Runs every finite-difference suite and writes `gradcheck.json`.
pub fn cmd_gradcheck(config: &RunConfig, out: Option<&Path>) -> Result<GradcheckReport> {
    let report = run_all(&config.gradcheck)?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("gradcheck.json"), serde_json::to_string_pretty(&report)?)?;
    }
    Ok(report)
}
