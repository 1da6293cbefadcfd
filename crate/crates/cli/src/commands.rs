use std::fs;
use std::path::Path;
use std::time::Instant;

use anyhow::{Context, Result};
use knnseq::data::{Dataset, NormStats};
use knnseq::eval::{baseline_knn_classify, BaselineMode, Metrics, Predictor};
use knnseq::io::{self, Format, TargetsFile};
use knnseq::knn::{exact_neighbors, ooc_targets, OocConfig};
use knnseq::oversample::{oversample, OversampleConfig};
use knnseq::pca::Projection;
use knnseq::train::{self, AdamConfig, TargetMode, TrainConfig};
use knnseq::Error;

use crate::{
    BaselineArgs, Command, DataArgs, EvalArgs, FileFormat, Mode, OversampleArgs, PrepareArgs, ProjectArgs,
    SearchArgs, SwapArgs, TrainArgs,
};

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Prepare(a) => prepare(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval(a),
        Command::BaselineKnn(a) => baseline(a),
        Command::Oversample(a) => oversample_cmd(a),
        Command::AblateSwap(a) => swap(a),
        Command::Project(a) => project(a),
    }
}

fn format_of(path: &Path, format: Option<FileFormat>) -> Format {
    match format {
        Some(FileFormat::Csv) => Format::Csv,
        Some(FileFormat::Libsvm) => Format::Libsvm,
        None => Format::from_path(path),
    }
}

fn load_train(a: &DataArgs) -> Result<Dataset> {
    let format = format_of(&a.train, a.format);
    let table = io::read_table(&a.train, format, a.dim)?;
    Ok(table.into_dataset()?)
}

fn load_like(path: &Path, a: &DataArgs, like: &Dataset) -> Result<Dataset> {
    let format = format_of(path, a.format);
    Ok(io::load_dataset_with(path, format, like.label_map(), like.dim())?)
}

/// Out-of-core settings, rejecting batch or round flags in full mode.
fn search_mode(s: &SearchArgs) -> Result<Option<OocConfig>> {
    match s.mode {
        Mode::Full => {
            if s.batch.is_some() || s.rounds.is_some() {
                return Err(Error::Usage("--batch and --rounds only apply with --mode ooc".into()).into());
            }
            Ok(None)
        }
        Mode::Ooc => {
            let cfg = OocConfig {
                batch: s.batch.unwrap_or(64),
                rounds: s.rounds.unwrap_or(50),
                seed: s.seed,
            };
            cfg.validate(s.k)?;
            Ok(Some(cfg))
        }
    }
}

fn emit_metrics(metrics: &Metrics, path: Option<&Path>) -> Result<()> {
    let report = metrics.report();
    print!("{report}");
    if let Some(p) = path {
        fs::write(p, &report).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn prepare(a: PrepareArgs) -> Result<()> {
    let ooc = search_mode(&a.search)?;
    let raw = load_train(&a.data)?;
    let norm = NormStats::fit(&raw);
    let data = norm.apply(&raw)?;
    let start = Instant::now();
    let targets = match ooc {
        None => exact_neighbors(&data, a.search.k)?,
        Some(cfg) => ooc_targets(&data, a.search.k, &cfg, 0)?,
    };
    eprintln!("prepare: {} samples in {:.3}s", data.len(), start.elapsed().as_secs_f64());
    TargetsFile {
        targets,
        label_map: raw.label_map().clone(),
        norm,
    }
    .save(&a.out)?;
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let ooc = search_mode(&a.search)?;
    let mut cfg = TrainConfig::new(a.model);
    cfg.epochs = a.epochs;
    cfg.batch_size = a.batch_size;
    cfg.adam = AdamConfig { lr: a.lr, ..AdamConfig::default() };
    cfg.dropout = a.dropout;
    cfg.seed = a.search.seed;
    cfg.tau = a.tau;
    cfg.alpha = a.alpha;
    cfg.lambda = a.lambda;
    cfg.k = a.search.k;
    cfg.hidden = a.hidden;
    cfg.memory_size = a.memory_size;
    cfg.embed_dim = a.embed_dim;
    cfg.batch_norm = !a.no_batch_norm;
    cfg.feed_mode = a.feed;
    cfg.patience = a.patience;
    cfg.validation_fraction = a.validation_fraction;
    if let Some(o) = ooc {
        cfg.mode = TargetMode::Ooc;
        cfg.ooc_batch = o.batch;
        cfg.ooc_rounds = o.rounds;
    }
    eprintln!("train config: {}", serde_json::to_string(&cfg)?);
    let raw = load_train(&a.data)?;
    let (ckpt, report) = match (&a.targets, ooc) {
        (Some(_), Some(_)) => {
            return Err(Error::Usage("--targets and --mode ooc are exclusive; ooc targets are drawn per epoch".into()).into())
        }
        (None, None) => return Err(Error::Usage("--targets is required unless --mode ooc".into()).into()),
        (Some(path), None) => {
            let file = TargetsFile::load(path)?;
            if file.label_map != *raw.label_map() {
                anyhow::bail!(
                    "{}: label classes {:?} differ from the training data {:?}",
                    path.display(),
                    file.label_map.0,
                    raw.label_map().0
                );
            }
            let data = file.norm.apply(&raw)?;
            train::train(&data, &file.norm, &file.targets, &cfg)?
        }
        (None, Some(_)) => {
            let norm = NormStats::fit(&raw);
            let data = norm.apply(&raw)?;
            train::train_ooc(&data, &norm, &cfg)?
        }
    };
    eprintln!(
        "train: best epoch {} of {}, targets {:.3}s, training {:.3}s",
        report.best_epoch,
        report.epoch_losses.len(),
        report.target_seconds,
        report.train_seconds
    );
    io::save_checkpoint(&ckpt, &a.out)?;
    if let Some(p) = &a.report {
        fs::write(p, serde_json::to_string_pretty(&report)?).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let ckpt = io::load_checkpoint(&a.checkpoint)?;
    let train_raw = io::load_dataset_with(
        &a.data.train,
        format_of(&a.data.train, a.data.format),
        &ckpt.label_map,
        ckpt.config.d,
    )?;
    let test_raw = load_like(&a.test, &a.data, &train_raw)?;
    let reference = ckpt.norm.apply(&train_raw)?;
    let test = ckpt.norm.apply(&test_raw)?;
    let model = ckpt.model()?;
    let mut predictor = Predictor::new(&model, &reference, a.seed);
    predictor.memory_draws = a.memory_draws;
    let start = Instant::now();
    let pred = predictor.predict_labels(&test)?;
    eprintln!("eval: {} queries in {:.3}s", test.len(), start.elapsed().as_secs_f64());
    emit_metrics(&Metrics::compute(&pred, test.labels(), test.classes())?, a.metrics.as_deref())
}

fn baseline(a: BaselineArgs) -> Result<()> {
    let mode = match search_mode(&a.search)? {
        None => BaselineMode::Full,
        Some(cfg) => BaselineMode::Ooc(cfg),
    };
    let train_raw = load_train(&a.data)?;
    let test_raw = load_like(&a.test, &a.data, &train_raw)?;
    let norm = NormStats::fit(&train_raw);
    let start = Instant::now();
    let metrics = baseline_knn_classify(&norm.apply(&train_raw)?, &norm.apply(&test_raw)?, a.search.k, mode)?;
    eprintln!("baseline-knn: {} queries in {:.3}s", test_raw.len(), start.elapsed().as_secs_f64());
    emit_metrics(&metrics, a.metrics.as_deref())
}

fn oversample_cmd(a: OversampleArgs) -> Result<()> {
    let ckpt = a.checkpoint.as_deref().map(io::load_checkpoint).transpose()?;
    let train = match &ckpt {
        Some(c) => io::load_dataset_with(&a.data.train, format_of(&a.data.train, a.data.format), &c.label_map, c.config.d)?,
        None => load_train(&a.data)?,
    };
    let cfg = OversampleConfig {
        method: a.method,
        k: a.k,
        smote_k: a.smote_k,
        seed: a.seed,
        ratio: a.ratio,
    };
    let aug = oversample(&train, ckpt.as_ref(), &cfg)?;
    eprintln!("oversample: {} synthetic rows", aug.synthetic_count());
    let origins: Vec<String> = aug.origins.iter().map(|o| o.to_string()).collect();
    io::write_csv(&a.out, &aug.data, Some(&origins))?;
    Ok(())
}

fn swap(a: SwapArgs) -> Result<()> {
    let mut file = TargetsFile::load(&a.targets)?;
    file.targets = file.targets.swap_ranks(a.first, a.second)?;
    file.save(&a.out)?;
    Ok(())
}

fn project(a: ProjectArgs) -> Result<()> {
    let table = io::read_table(&a.data, format_of(&a.data, a.format), a.dim)?;
    let origins = table.origins.clone();
    let data = table.into_dataset()?;
    let proj = Projection::fit(&data)?;
    eprintln!(
        "project: component variances {:.6} and {:.6}",
        proj.variances[0], proj.variances[1]
    );
    let mut w = String::new();
    w.push_str("pc1,pc2,label,origin\n");
    for (i, [x, y]) in proj.project(&data).into_iter().enumerate() {
        let origin = origins.as_ref().map_or("original", |o| o[i].as_str());
        w.push_str(&format!("{x},{y},{},{origin}\n", data.label_map().decode(data.label(i))));
    }
    fs::write(&a.out, w).with_context(|| format!("writing {}", a.out.display()))?;
    Ok(())
}
