use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use seven_core::checkpoint::{load_checkpoint, save_checkpoint};
use seven_core::config::RunConfig;
use seven_core::data::{check_class_disjoint, holdout, ingest_idx, ingest_image_dir, make_pairs, split_label_budget};
use seven_core::data::{LabelDraw, PairManifest, SampleSet, SplitTag};
use seven_core::eval::{ablate, evaluate, evaluate_with_sweep, sweep_alpha, tau_grid, Experiment};
use seven_core::model::SevenModel;
use seven_core::optim::RmsProp;
use seven_core::train::{train, Variant};
use seven_core::SevenError;
use serde_json::json;
use thiserror::Error;

use crate::args::*;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("input not found: {}", .0.display())]
    MissingInput(PathBuf),

    #[error("config {}: {source}", path.display())]
    Config { path: PathBuf, source: SevenError },

    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },

    #[error(transparent)]
    Run(#[from] SevenError),
}

impl CliError {
    /// 2 for anything the caller can fix before computing, 1 otherwise.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Run(SevenError::Io { source, .. }) if source.kind() == io::ErrorKind::NotFound => 2,
            CliError::Run(_) | CliError::Io { .. } => 1,
            CliError::Usage(_) | CliError::MissingInput(_) | CliError::Config { .. } => 2,
        }
    }
}

type Result<T, E = CliError> = std::result::Result<T, E>;

pub fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Ingest(a) => ingest(&cli, a),
        Command::MakePairs(a) => make_pairs_cmd(&cli, a),
        Command::Train(a) => train_cmd(&cli, a),
        Command::Eval(a) => eval_cmd(&cli, a),
        Command::Ablate(a) => ablate_cmd(&cli, a),
        Command::SweepAlpha(a) => sweep_alpha_cmd(&cli, a),
    }
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::MissingInput(path.to_path_buf()))
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|source| CliError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    fs::write(path, contents).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(SevenError::from)?;
    text.push('\n');
    write(path, text)
}

fn out_dir(cli: &Cli) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| PathBuf::from("."))
}

/// Loads the config, applies global overrides, resolves data paths and
/// checks inputs, all before any compute.
fn load_config(cli: &Cli) -> Result<RunConfig> {
    let Some(path) = &cli.config else {
        return Err(CliError::Usage("this command needs --config".into()));
    };
    require(path)?;
    let config_err = |source| CliError::Config {
        path: path.clone(),
        source,
    };
    let mut cfg = RunConfig::load(path).map_err(config_err)?;
    if let Some(seed) = cli.seed {
        cfg.hyper.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    let cwd = std::env::current_dir().map_err(|source| CliError::Io {
        path: ".".into(),
        source,
    })?;
    // Absolute, so the resolved config written beside the outputs stands alone.
    let root = match &cli.data_dir {
        Some(d) => cwd.join(d),
        None => cwd,
    };
    cfg.resolve_paths(&root);
    if let Some(missing) = cfg.missing_paths().into_iter().next() {
        return Err(CliError::MissingInput(missing));
    }
    cfg.validate().map_err(config_err)?;
    Ok(cfg)
}

fn finalize(cli: &Cli, cfg: &RunConfig) -> Result<()> {
    cfg.validate().map_err(|source| CliError::Config {
        path: cli.config.clone().unwrap_or_default(),
        source,
    })
}

fn class_summary(s: &SampleSet) -> BTreeMap<String, usize> {
    s.class_counts().into_iter().map(|(c, n)| (c.to_string(), n)).collect()
}

fn ingest(cli: &Cli, a: &IngestArgs) -> Result<()> {
    let split = SplitTag::from(a.split);
    let (samples, extra) = match a.format {
        SourceFormat::Idx => {
            let (images, labels) = (a.images.as_ref().unwrap(), a.labels.as_ref().unwrap());
            require(images)?;
            require(labels)?;
            let s = ingest_idx(images, labels, split)?;
            (s, json!({"images": images, "labels": labels}))
        }
        SourceFormat::Images => {
            let dir = a.dir.as_ref().unwrap();
            require(dir)?;
            let out = ingest_image_dir(dir, a.size, split)?;
            for p in &out.skipped {
                log::warn!("skipped unreadable image {}", p.display());
            }
            let extra = json!({
                "dir": dir,
                "size": [a.size.0, a.size.1],
                "class_names": out.class_names,
                "skipped": out.skipped,
            });
            (out.samples, extra)
        }
    };
    let dir = out_dir(cli);
    let archive = dir.join(format!("{}.samples", split.as_str()));
    write(&archive, samples.to_archive())?;
    let summary = json!({
        "split": split.as_str(),
        "samples": samples.len(),
        "shape": samples.sample_shape(),
        "classes": class_summary(&samples),
        "source": extra,
    });
    write_json(&dir.join(format!("{}.summary.json", split.as_str())), &summary)?;
    println!("{} samples in {} classes -> {}", samples.len(), samples.class_counts().len(), archive.display());
    Ok(())
}

fn make_pairs_cmd(cli: &Cli, a: &MakePairsArgs) -> Result<()> {
    require(&a.samples)?;
    let samples = SampleSet::load(&a.samples)?;
    if let Some(other) = &a.disjoint_from {
        require(other)?;
        check_class_disjoint(&samples, &SampleSet::load(other)?)?;
    }
    let seed = cli.seed.unwrap_or(0);
    let mut m = make_pairs(&samples, seed)?;
    if let Some(budget) = a.label_budget {
        let draw = if a.strict_uniform {
            LabelDraw::StrictUniform
        } else {
            LabelDraw::Balanced
        };
        m = split_label_budget(&m, budget, seed, draw)?;
    }
    let dir = out_dir(cli);
    let path = dir.join(&a.name);
    write(&path, m.to_text())?;
    write_json(
        &path.with_extension("json"),
        &json!({
            "samples": a.samples,
            "seed": seed,
            "label_budget": a.label_budget,
            "strict_uniform_label_draw": a.strict_uniform,
            "disjoint_from": a.disjoint_from,
            "pairs": m.len(),
            "labeled": m.labeled(),
        }),
    )?;
    println!("{} pairs ({} labeled) -> {}", m.len(), m.labeled(), path.display());
    Ok(())
}

fn train_cmd(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let mut cfg = load_config(cli)?;
    if let Some(v) = a.variant {
        cfg.hyper.variant = v;
    }
    if let Some(e) = a.epochs {
        cfg.hyper.epochs = e;
    }
    if let Some(alpha) = a.alpha {
        cfg.hyper.alpha = alpha;
    }
    if let Some(l) = a.label_budget {
        cfg.pairs.label_budget = Some(l);
    }
    if cfg.hyper.variant == Variant::DisSeven && cfg.hyper.alpha != 0.0 {
        log::warn!("variant disseven forces alpha=0 (configured alpha={})", cfg.hyper.alpha);
        cfg.hyper.alpha = 0.0;
    }
    finalize(cli, &cfg)?;

    let dir = cfg.out_dir.clone();
    write(&dir.join("config.json"), cfg.to_json()? + "\n")?;
    let prepared = cfg.prepare()?;
    prepared.train_pairs.save(&dir.join("train.pairs"))?;
    if let Some((_, test_pairs)) = &prepared.test {
        test_pairs.save(&dir.join("test.pairs"))?;
    }

    let hp = &cfg.hyper;
    let arch = hp.build_arch(prepared.train_samples.sample_shape())?;
    let mut model = SevenModel::new(arch, hp.seed)?;
    let mut optimizer = RmsProp::new(hp.optimizer());
    log::info!(
        "training {} on {} pairs ({} labeled), {} parameters",
        hp.variant,
        prepared.train_pairs.len(),
        prepared.train_pairs.labeled(),
        model.param_count()
    );
    let trace = train(
        &mut model,
        &mut optimizer,
        &prepared.train_pairs,
        &prepared.train_samples,
        hp,
        |record, model, opt| {
            let done = record.epoch + 1;
            if hp.checkpoint_every > 0 && done % hp.checkpoint_every == 0 && done < hp.epochs {
                let path = dir.join("checkpoints").join(format!("epoch-{done:04}.ckpt"));
                fs::create_dir_all(path.parent().unwrap()).map_err(|e| SevenError::Io {
                    path: path.clone(),
                    source: e,
                })?;
                save_checkpoint(&path, model, hp, Some(opt))?;
            }
            Ok(())
        },
    )?;
    save_checkpoint(&dir.join("final.ckpt"), &model, hp, Some(&optimizer))?;
    write(&dir.join("trace.csv"), trace.to_csv()?)?;
    write(&dir.join("timing.csv"), trace.timing_csv()?)?;

    if let Some((test_samples, test_pairs)) = &prepared.test {
        let report = evaluate(&model, test_pairs, test_samples, hp.tau)?;
        write_json(&dir.join("eval.json"), &report)?;
        println!("test accuracy {:.4} on {} pairs", report.accuracy, report.total);
    }
    println!("run written to {}", dir.display());
    Ok(())
}

fn eval_cmd(cli: &Cli, a: &EvalArgs) -> Result<()> {
    require(&a.checkpoint)?;
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let cfg = match &cli.config {
        Some(_) => Some(load_config(cli)?),
        None => None,
    };
    let expected = a.preset.or(cfg.as_ref().map(|c| c.hyper.preset));
    if let Some(expected) = expected {
        if expected != ckpt.preset() {
            return Err(CliError::Usage(format!(
                "checkpoint {} was built for preset {}, expected preset {}",
                a.checkpoint.display(),
                ckpt.preset(),
                expected
            )));
        }
    }

    let (pairs, samples) = match (&a.pairs, &a.samples, &cfg) {
        (Some(p), Some(s), _) => {
            require(p)?;
            require(s)?;
            (PairManifest::load(p)?, SampleSet::load(s)?)
        }
        (_, _, Some(cfg)) => {
            let train = cfg.load_train_samples()?;
            let (s, m) = cfg
                .load_test(&train)?
                .ok_or_else(|| CliError::Usage("config has no test data; pass --pairs and --samples".into()))?;
            (m, s)
        }
        _ => return Err(CliError::Usage("eval needs --pairs and --samples, or --config with test data".into())),
    };
    if pairs.labeled() != pairs.len() {
        return Err(CliError::Usage(format!(
            "{} of {} pairs are unlabeled; evaluation needs a fully labeled manifest",
            pairs.len() - pairs.labeled(),
            pairs.len()
        )));
    }

    let tau = a.tau.unwrap_or(ckpt.hyper.tau);
    let report = match a.tau_sweep {
        Some((lo, hi, n)) => evaluate_with_sweep(&ckpt.model, &pairs, &samples, tau, &tau_grid(lo, hi, n)?)?,
        None => evaluate(&ckpt.model, &pairs, &samples, tau)?,
    };

    let dir = cli
        .out
        .clone()
        .unwrap_or_else(|| a.checkpoint.parent().map(Path::to_path_buf).unwrap_or_default());
    if let Some(sweep) = &report.sweep {
        let mut w = csv::Writer::from_writer(Vec::new());
        for p in sweep {
            w.serialize(p).map_err(SevenError::from)?;
        }
        write(&dir.join("tau_sweep.csv"), w.into_inner().expect("in-memory writer"))?;
    }
    write_json(
        &dir.join("eval.json"),
        &json!({
            "checkpoint": a.checkpoint,
            "pairs": a.pairs,
            "samples": a.samples,
            "config": cli.config,
            "preset": ckpt.preset().as_str(),
            "report": report,
        }),
    )?;
    println!("accuracy {:.4} at tau {} on {} pairs", report.accuracy, report.tau, report.total);
    Ok(())
}

/// Training pairs plus the labeled pairs and samples to score against: the
/// test split when configured and wanted, otherwise a held-out slice of the
/// training pairs.
struct Split {
    train_samples: SampleSet,
    train_pairs: PairManifest,
    eval_samples: SampleSet,
    eval_pairs: PairManifest,
}

fn split_for_scoring(cfg: &RunConfig, use_test: bool) -> Result<Split> {
    let train_samples = cfg.load_train_samples()?;
    let all = make_pairs(&train_samples, cfg.data_seed())?;
    if use_test {
        if let Some((eval_samples, eval_pairs)) = cfg.load_test(&train_samples)? {
            return Ok(Split {
                eval_samples,
                eval_pairs,
                train_pairs: all,
                train_samples,
            });
        }
        log::info!("no test data configured; scoring on a validation split");
    }
    let (rest, held) = holdout(&all, cfg.pairs.validation_fraction, cfg.data_seed())?;
    Ok(Split {
        eval_samples: train_samples.clone(),
        eval_pairs: held,
        train_pairs: rest,
        train_samples,
    })
}

fn ablate_cmd(cli: &Cli, a: &AblateArgs) -> Result<()> {
    let mut cfg = load_config(cli)?;
    if let Some(l) = a.label_budget {
        cfg.pairs.label_budget = Some(l);
    }
    let seeds = if a.seeds.is_empty() {
        vec![cfg.hyper.seed]
    } else {
        a.seeds.clone()
    };
    if a.variants.is_empty() {
        return Err(CliError::Usage("--variants is empty".into()));
    }
    let dir = cfg.out_dir.clone();
    write(&dir.join("config.json"), cfg.to_json()? + "\n")?;

    let split = split_for_scoring(&cfg, true)?;
    let train_pairs = cfg.label_split(&split.train_pairs, cfg.pairs.label_budget)?;
    let exp = Experiment {
        train_pairs: &train_pairs,
        train_samples: &split.train_samples,
        eval_pairs: &split.eval_pairs,
        eval_samples: &split.eval_samples,
    };
    let rows = ablate(&cfg.hyper, &a.variants, &seeds, &exp)?;

    let mut runs = csv::Writer::from_writer(Vec::new());
    let mut table = csv::Writer::from_writer(Vec::new());
    table.write_record(["variant", "accuracy"]).map_err(SevenError::from)?;
    for v in &a.variants {
        let accs: Vec<f64> = rows.iter().filter(|r| r.variant == *v).map(|r| r.accuracy).collect();
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        table
            .write_record([v.as_str().to_string(), mean.to_string()])
            .map_err(SevenError::from)?;
        println!("{v}\t{mean:.4}");
    }
    for r in &rows {
        runs.serialize(r).map_err(SevenError::from)?;
    }
    write(&dir.join("ablation.csv"), table.into_inner().expect("in-memory writer"))?;
    write(&dir.join("ablation_runs.csv"), runs.into_inner().expect("in-memory writer"))?;
    Ok(())
}

fn sweep_alpha_cmd(cli: &Cli, a: &SweepAlphaArgs) -> Result<()> {
    let cfg = load_config(cli)?;
    let budgets: Vec<Option<usize>> = if a.label_budgets.is_empty() {
        vec![cfg.pairs.label_budget]
    } else {
        a.label_budgets.iter().copied().map(Some).collect()
    };
    let dir = cfg.out_dir.clone();
    write(&dir.join("config.json"), cfg.to_json()? + "\n")?;

    let split = split_for_scoring(&cfg, a.on_test)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["alpha", "accuracy", "L"]).map_err(SevenError::from)?;
    for budget in budgets {
        let train_pairs = cfg.label_split(&split.train_pairs, budget)?;
        let exp = Experiment {
            train_pairs: &train_pairs,
            train_samples: &split.train_samples,
            eval_pairs: &split.eval_pairs,
            eval_samples: &split.eval_samples,
        };
        let labeled = train_pairs.labeled();
        for p in sweep_alpha(&cfg.hyper, &a.alphas, &exp)? {
            w.write_record([p.alpha.to_string(), p.accuracy.to_string(), labeled.to_string()])
                .map_err(SevenError::from)?;
            println!("L={labeled}\talpha={}\t{:.4}", p.alpha, p.accuracy);
        }
    }
    write(&dir.join("sweep_alpha.csv"), w.into_inner().expect("in-memory writer"))?;
    Ok(())
}
