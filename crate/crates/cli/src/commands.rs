//! Command implementations. Each returns a summary value so tests can
//! inspect results without parsing output files.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use subop::dataio::{
    fit_normalizer, load_checkpoint, read_sample, save_checkpoint, write_fields, write_sample,
};
use subop::dataio::{Checkpoint, CheckpointMeta, Normalizer};
use subop::fom::{build_dataset, DatasetSpec, SampleRecord};
use subop::inference::{evaluate_cells, evaluate_sample, predict_chunked};
use subop::metrics::{pointwise_difference, MetricsReport, RELATIVE_ERROR_FORMULA};
use subop::optim::{LossRecord, Trainer};
use subop::sampler::query_points;
use subop::{build_model, Matrix, Mode, Model};

use crate::config::RunConfig;
use crate::{io_err, CliError, Split};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.snoc";
pub const LOSS_FILE: &str = "loss.csv";
const SPLIT_STREAM: u64 = 0x5eed_5711;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub n_samples: usize,
    /// SHA-256 of the compact JSON form of `spec`.
    pub spec_hash: String,
    pub spec: DatasetSpec,
    pub files: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self, CliError> {
        let path = dir.join(MANIFEST_FILE);
        let text =
            fs::read_to_string(&path).map_err(|e| io_err("cannot read manifest", &path, e))?;
        serde_json::from_str(&text).map_err(|e| io_err("invalid manifest", &path, e))
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn spec_hash(spec: &DatasetSpec) -> String {
    sha256_hex(
        serde_json::to_string(spec)
            .expect("dataset spec serializes")
            .as_bytes(),
    )
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    fs::write(path, text + "\n").map_err(|e| io_err("cannot write", path, e))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| io_err("cannot create directory", dir, e))
}

pub fn gen_data(
    config: Option<&Path>,
    out: &Path,
    samples: usize,
    seed: u64,
) -> Result<Manifest, CliError> {
    if samples == 0 {
        return Err(CliError::Input("--samples must be >= 1".into()));
    }
    let cfg = RunConfig::load_or_default(config)?;
    let spec = cfg.fields;
    create_dir(out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let records = build_dataset(samples, &spec, &mut rng)?;
    let width = samples.to_string().len().max(4);
    let mut files = Vec::with_capacity(samples);
    for (i, rec) in records.iter().enumerate() {
        let file = format!("sample_{i:0width$}.snod");
        let path = out.join(&file);
        write_sample(&path, rec)?;
        let bytes = fs::read(&path).map_err(|e| io_err("cannot read back", &path, e))?;
        files.push(ManifestEntry {
            file,
            sha256: sha256_hex(&bytes),
            bytes: bytes.len() as u64,
        });
    }
    let manifest = Manifest {
        seed,
        n_samples: samples,
        spec_hash: spec_hash(&spec),
        spec,
        files,
    };
    write_json(&out.join(MANIFEST_FILE), &manifest)?;
    println!("wrote {samples} samples to {}", out.display());
    Ok(manifest)
}

/// Deterministic train/test partition of the manifest's files. The shuffle
/// uses its own stream so it never shifts the training RNG.
pub fn split_files(files: &[String], train_fraction: f64, seed: u64) -> (Vec<String>, Vec<String>) {
    let mut order = files.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ SPLIT_STREAM));
    let n = order.len();
    let mut n_train = ((train_fraction * n as f64).round() as usize).clamp(1, n);
    if n_train == n && train_fraction < 1.0 && n > 1 {
        n_train = n - 1;
    }
    let test = order.split_off(n_train);
    (order, test)
}

fn load_samples(dir: &Path, files: &[String]) -> Result<Vec<SampleRecord>, CliError> {
    files
        .iter()
        .map(|f| Ok(read_sample(&dir.join(f))?))
        .collect()
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub history: Vec<LossRecord>,
    pub train_files: Vec<String>,
    pub test_files: Vec<String>,
    pub n_params: usize,
    pub n_macs: usize,
}

fn write_loss_csv(path: &Path, history: &[LossRecord]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err("cannot write", path, e))?;
    for r in history {
        w.serialize(r)
            .map_err(|e| io_err("cannot write", path, e))?;
    }
    w.flush().map_err(|e| io_err("cannot write", path, e))
}

pub fn train(config: Option<&Path>, data: &Path, out: &Path) -> Result<TrainOutcome, CliError> {
    let cfg = RunConfig::load_or_default(config)?;
    let manifest = Manifest::load(data)?;
    let files: Vec<String> = manifest.files.iter().map(|f| f.file.clone()).collect();
    let sched = &cfg.train.schedule;
    let (train_files, test_files) = split_files(&files, cfg.train.train_fraction, sched.seed);
    let train_set = load_samples(data, &train_files)?;
    let norm = fit_normalizer(&train_set)?;

    let model = build_model(&cfg.model)?;
    let n_params = model.count_params();
    let n_macs = model.count_macs();
    println!("parameters: {n_params}");
    println!("macs: {n_macs}");
    println!(
        "train cases: {}, test cases: {}, steps: {} outer + {} inner",
        train_files.len(),
        test_files.len(),
        sched.outer_steps,
        sched.inner_steps
    );

    create_dir(out)?;
    let mut trainer = Trainer::new(model, sched.clone())?;
    let log_every = cfg.train.log_every;
    let result = trainer.run_for(&train_set, &norm, u64::MAX, |r| {
        if log_every > 0 && (r.step % log_every == 0) {
            eprintln!(
                "step {:>7} {:<5} eta {:.3e} mse {:.6e}",
                r.step, r.phase, r.eta, r.mse
            );
        }
    });
    let history = result?;
    write_loss_csv(&out.join(LOSS_FILE), &history)?;

    let rng = trainer.rng_state();
    let step = trainer.step();
    let optim = trainer.optim.clone();
    let mut model = trainer.into_model();
    model.set_mode(Mode::Eval);
    let meta = CheckpointMeta {
        step,
        seed: sched.seed,
        rng: Some(rng),
        extra: json!({
            "spec_hash": manifest.spec_hash,
            "train_files": train_files,
            "test_files": test_files,
            "train": cfg.train,
        }),
    };
    save_checkpoint(
        &out.join(CHECKPOINT_FILE),
        &model,
        Some(&optim),
        &norm,
        &meta,
    )?;
    println!(
        "checkpoint written to {}",
        out.join(CHECKPOINT_FILE).display()
    );
    Ok(TrainOutcome {
        history,
        train_files,
        test_files,
        n_params,
        n_macs,
    })
}

fn open_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    let mut ck = load_checkpoint(path)?;
    ck.model.set_mode(Mode::Eval);
    Ok(ck)
}

fn extra_files(ck: &Checkpoint, key: &str) -> Result<Vec<String>, CliError> {
    serde_json::from_value(ck.meta.extra.get(key).cloned().unwrap_or_default())
        .map_err(|_| CliError::Input(format!("checkpoint does not record its {key}")))
}

pub struct EvalArgs<'a> {
    pub checkpoint: &'a Path,
    pub data: &'a Path,
    pub report: &'a Path,
    pub split: Split,
    pub points: Option<usize>,
    pub points_seed: u64,
    pub difference: Option<&'a Path>,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleReport {
    pub file: String,
    pub well_cell: [usize; 3],
    /// RMSE in normalized target units.
    pub normalized_rmse: f64,
    /// Cell attaining the largest pointwise difference at the final timestamp.
    pub final_argmax_cell: [usize; 3],
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub n_samples: usize,
    pub rmse: f64,
    pub mae: f64,
    pub max_mae: f64,
    pub mean_abs_state: f64,
    pub relative_error: f64,
    pub relative_error_formula: String,
    pub normalized_rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint: String,
    pub split: String,
    /// Cells evaluated per sample (all timestamps each); the full grid unless `--points` was set.
    pub cells_per_sample: usize,
    pub samples: Vec<SampleReport>,
    pub aggregate: AggregateReport,
}

fn normalized_rmse(truth: &Matrix, pred: &Matrix, norm: &Normalizer) -> f64 {
    let sum: f64 = truth
        .data()
        .iter()
        .zip(pred.data())
        .map(|(&t, &p)| {
            let r = norm.target.normalize(p) - norm.target.normalize(t);
            r * r
        })
        .sum();
    (sum / truth.data().len() as f64).sqrt()
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| {
            if x > bv {
                (i, x)
            } else {
                (bi, bv)
            }
        })
        .0
}

pub fn eval(args: &EvalArgs<'_>) -> Result<EvalReport, CliError> {
    if args.batch_size == 0 {
        return Err(CliError::Input("--batch-size must be >= 1".into()));
    }
    if args.points == Some(0) {
        return Err(CliError::Input("--points must be >= 1".into()));
    }
    if args.points.is_some() && args.difference.is_some() {
        return Err(CliError::Input(
            "--difference needs the full grid; drop --points".into(),
        ));
    }
    let ck = open_checkpoint(args.checkpoint)?;
    let manifest = Manifest::load(args.data)?;
    match ck.meta.extra.get("spec_hash").and_then(|v| v.as_str()) {
        Some(h) if h == manifest.spec_hash => {}
        Some(_) => {
            return Err(CliError::Input(
                "checkpoint was trained on a dataset with a different spec".into(),
            ))
        }
        None => {
            return Err(CliError::Input(
                "checkpoint does not record its dataset".into(),
            ))
        }
    }
    let files = match args.split {
        Split::Train => extra_files(&ck, "train_files")?,
        Split::Test => extra_files(&ck, "test_files")?,
        Split::All => manifest.files.iter().map(|f| f.file.clone()).collect(),
    };
    if files.is_empty() {
        return Err(CliError::Input(
            format!("the {:?} split is empty", args.split).to_lowercase(),
        ));
    }
    if let Some(dir) = args.difference {
        create_dir(dir)?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(args.points_seed);
    let mut samples = Vec::with_capacity(files.len());
    let (mut sq, mut abs, mut abs_state, mut n, mut max_mae, mut nsq) =
        (0.0, 0.0, 0.0, 0usize, 0.0f64, 0.0);
    let mut cells_per_sample = 0;
    for file in &files {
        let sample = read_sample(&args.data.join(file))?;
        let g = &sample.grid;
        if g.n_cells() == 0 {
            return Err(CliError::Input(format!("{file} has an empty grid")));
        }
        let (truth, pred, cells) = match args.points {
            None => {
                let (t, p) = evaluate_sample(&ck.model, &sample, &ck.normalizer, args.batch_size)?;
                (t, p, (0..g.n_cells()).collect::<Vec<_>>())
            }
            Some(k) => {
                let cells =
                    rand::seq::index::sample(&mut rng, g.n_cells(), k.min(g.n_cells())).into_vec();
                let (t, p) =
                    evaluate_cells(&ck.model, &sample, &cells, &ck.normalizer, args.batch_size)?;
                (t, p, cells)
            }
        };
        cells_per_sample = cells.len();
        let metrics = MetricsReport::compute(&truth, &pred)?;
        let last = truth.rows() - 1;
        let final_diff = pointwise_difference(truth.row(last), pred.row(last))?;
        let final_argmax_cell = g.cell_coords(cells[argmax(&final_diff)]);
        if let Some(dir) = args.difference {
            let diffs: Vec<Vec<f64>> = (0..truth.rows())
                .map(|t| pointwise_difference(truth.row(t), pred.row(t)))
                .collect::<Result<_, _>>()?;
            let named: Vec<(String, &[f64])> = diffs
                .iter()
                .enumerate()
                .map(|(t, d)| (format!("t{t:04}"), d.as_slice()))
                .collect();
            let stem = Path::new(file)
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or(file);
            write_fields(
                &dir.join(format!("{stem}.diff.snod")),
                g,
                "pointwise_difference",
                &named,
            )?;
        }
        let nrmse = normalized_rmse(&truth, &pred, &ck.normalizer);
        let count = truth.data().len();
        sq += metrics.rmse * metrics.rmse * count as f64;
        nsq += nrmse * nrmse * count as f64;
        abs += metrics.mae * count as f64;
        abs_state += metrics.mean_abs_state * count as f64;
        n += count;
        max_mae = max_mae.max(metrics.max_mae);
        samples.push(SampleReport {
            file: file.clone(),
            well_cell: sample.well_cell,
            normalized_rmse: nrmse,
            final_argmax_cell,
            metrics,
        });
    }
    let rmse = (sq / n as f64).sqrt();
    let mean_abs_state = abs_state / n as f64;
    let report = EvalReport {
        checkpoint: args.checkpoint.display().to_string(),
        split: format!("{:?}", args.split).to_lowercase(),
        cells_per_sample,
        aggregate: AggregateReport {
            n_samples: samples.len(),
            rmse,
            mae: abs / n as f64,
            max_mae,
            mean_abs_state,
            relative_error: rmse / mean_abs_state,
            relative_error_formula: RELATIVE_ERROR_FORMULA.to_string(),
            normalized_rmse: (nsq / n as f64).sqrt(),
        },
        samples,
    };
    write_json(args.report, &report)?;
    println!(
        "{} samples: rmse {:.6e}, relative error {:.4}%",
        report.aggregate.n_samples,
        report.aggregate.rmse,
        100.0 * report.aggregate.relative_error
    );
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct InferSummary {
    pub ok: usize,
    pub out_of_extent: usize,
    pub invalid: usize,
}

impl InferSummary {
    pub fn rows(&self) -> usize {
        self.ok + self.out_of_extent + self.invalid
    }
}

struct PendingRow {
    raw: csv::StringRecord,
    point: Option<[f64; 4]>,
}

fn parse_point(rec: &csv::StringRecord, cols: &[usize; 4]) -> Option<[f64; 4]> {
    let mut p = [0.0f64; 4];
    for (v, &c) in p.iter_mut().zip(cols) {
        *v = rec.get(c)?.trim().parse().ok()?;
        if !v.is_finite() {
            return None;
        }
    }
    Some(p)
}

fn flush_rows(
    rows: &mut Vec<PendingRow>,
    model: &Model,
    sample: &SampleRecord,
    norm: &Normalizer,
    batch_size: usize,
    w: &mut csv::Writer<BufWriter<fs::File>>,
    summary: &mut InferSummary,
) -> Result<(), CliError> {
    let valid: Vec<[f64; 4]> = rows.iter().filter_map(|r| r.point).collect();
    let (batch, slots) = query_points(sample, &valid, norm)?;
    let preds = if !batch.is_empty() {
        predict_chunked(model, &batch, batch_size)?
    } else {
        Vec::new()
    };
    let mut slots = slots.into_iter();
    for row in rows.drain(..) {
        let (pred, status) = match row.point {
            None => {
                summary.invalid += 1;
                (String::new(), "invalid")
            }
            Some(_) => match slots.next().flatten() {
                Some(i) => {
                    summary.ok += 1;
                    (norm.target.denormalize(preds[i]).to_string(), "ok")
                }
                None => {
                    summary.out_of_extent += 1;
                    (String::new(), "out_of_extent")
                }
            },
        };
        let mut rec = row.raw;
        rec.push_field(&pred);
        rec.push_field(status);
        w.write_record(&rec)
            .map_err(|e| CliError::Input(format!("cannot write predictions: {e}")))?;
    }
    Ok(())
}

/// Streams `points` through the model `batch_size` rows at a time, so memory
/// stays bounded by the batch regardless of the number of rows.
pub fn infer(
    checkpoint: &Path,
    sample: &Path,
    points: &Path,
    out: &Path,
    batch_size: usize,
) -> Result<InferSummary, CliError> {
    if batch_size == 0 {
        return Err(CliError::Input("--batch-size must be >= 1".into()));
    }
    let ck = open_checkpoint(checkpoint)?;
    let rec = read_sample(sample)?;
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(points)
        .map_err(|e| io_err("cannot read points", points, e))?;
    let headers = reader
        .headers()
        .map_err(|e| io_err("cannot read points", points, e))?
        .clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| CliError::Input(format!("{} has no `{name}` column", points.display())))
    };
    let cols = [col("t")?, col("x")?, col("y")?, col("z")?];

    let file = fs::File::create(out).map_err(|e| io_err("cannot create", out, e))?;
    let mut w = csv::WriterBuilder::new()
        .flexible(true)
        .from_writer(BufWriter::new(file));
    let mut out_headers = headers.clone();
    out_headers.push_field("prediction");
    out_headers.push_field("status");
    w.write_record(&out_headers)
        .map_err(|e| io_err("cannot write", out, e))?;

    let mut summary = InferSummary::default();
    let mut pending: Vec<PendingRow> = Vec::with_capacity(batch_size);
    for raw in reader.records() {
        let raw = match raw {
            Ok(r) => r,
            Err(e) => {
                // A malformed line still gets an output row so positions line up.
                eprintln!("warning: {e}");
                csv::StringRecord::new()
            }
        };
        let point = parse_point(&raw, &cols);
        pending.push(PendingRow { raw, point });
        if pending.len() == batch_size {
            flush_rows(
                &mut pending,
                &ck.model,
                &rec,
                &ck.normalizer,
                batch_size,
                &mut w,
                &mut summary,
            )?;
        }
    }
    flush_rows(
        &mut pending,
        &ck.model,
        &rec,
        &ck.normalizer,
        batch_size,
        &mut w,
        &mut summary,
    )?;
    w.flush().map_err(|e| io_err("cannot write", out, e))?;
    if summary.ok == 0 && summary.rows() > 0 {
        return Err(CliError::AllRowsFailed(summary.rows()));
    }
    println!(
        "{} rows: {} ok, {} out of extent, {} invalid",
        summary.rows(),
        summary.ok,
        summary.out_of_extent,
        summary.invalid
    );
    Ok(summary)
}

/// Paths written by `train` inside its output directory.
pub fn train_outputs(out: &Path) -> (PathBuf, PathBuf) {
    (out.join(CHECKPOINT_FILE), out.join(LOSS_FILE))
}
