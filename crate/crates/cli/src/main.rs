//! `polyreg`: command-line surface over the `tensor_ols` library.
//!
//! Exit codes: 0 success, 2 config error, 3 I/O error, 4 budget exceeded.

mod args;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::Parser;
use nalgebra::DMatrix;
use tensor_ols::approx::{degree_schedule_with, ApproxOptions};
use tensor_ols::data_io::{load_idx_dataset, load_synthetic, save_synthetic, synth_teacher_dataset, SyntheticMeta};
use tensor_ols::harness::{
    execute, load_classifier, load_config, CondNumberConfig, CondRow, ImageData, MnistConfig, NoiseConfig,
    TrainSettings,
};
use tensor_ols::networks::random_teacher;
use tensor_ols::tols::{load_matrix, tols, Predictor};
use tensor_ols::{Error, Experiment, ExperimentConfig, GradedOrder, ImageDataset, MultiplicitiesSet, Result};

use args::{Cli, Command, DatasetCmd, ExperimentCmd, ImagePair, MnistCmd, TolsCmd};

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Precondition(_) | Error::InvalidMeasure(_) | Error::DimensionMismatch { .. } => 2,
        Error::BudgetExceeded { .. } | Error::DegreeBudget { .. } => 4,
        e if e.is_io() => 3,
        Error::Json(_) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if cli.workers == Some(0) {
        return Err(Error::Config("--workers must be at least 1".into()));
    }
    if let Some(w) = cli.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build_global()
            .map_err(|e| Error::Config(format!("cannot build worker pool: {e}")))?;
    }
    match &cli.command {
        Command::Tols(TolsCmd::Fit(a)) => tols_fit(&cli, a),
        Command::Tols(TolsCmd::Predict(a)) => tols_predict(&cli, a),
        Command::Condnum(a) => condnum(&cli, a),
        Command::Experiment(ExperimentCmd::Run { file }) => experiment_run(&cli, file.as_deref()),
        Command::Experiment(ExperimentCmd::Check { file }) => experiment_check(&cli, file.as_deref()),
        Command::Mnist(MnistCmd::Train(a)) => mnist_train(&cli, a),
        Command::Mnist(MnistCmd::Eval { model, data }) => mnist_eval(&cli, model, data),
        Command::Mnist(MnistCmd::Noise {
            model,
            data,
            sigmas,
            areas,
        }) => mnist_noise(&cli, model, data, sigmas, areas),
        Command::Dataset(DatasetCmd::Synth(a)) => dataset_synth(&cli, a),
    }
}

fn out_dir(cli: &Cli, default: &str) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::file(path, e))
}

fn tols_fit(cli: &Cli, a: &args::TolsFitArgs) -> Result<()> {
    let (xs, ys, meta) = load_synthetic(&a.data)?;
    let degree = match (a.degree, a.epsilon) {
        (Some(m), _) => m,
        (None, Some(eps)) => {
            let teacher = meta
                .teacher
                .as_ref()
                .ok_or_else(|| Error::Config("--epsilon needs a dataset with a recorded teacher".into()))?;
            degree_schedule_with(
                teacher.activation(),
                teacher.depth(),
                eps,
                a.divisor,
                &ApproxOptions::default(),
            )?
            .total_degree
        }
        (None, None) => return Err(Error::Config("pass --degree or --epsilon".into())),
    };
    let set = MultiplicitiesSet::build(
        meta.d,
        degree,
        meta.measure.support_cardinality(),
        GradedOrder::GradedDescending,
    )?;
    let p = tols(&xs, &ys, &set)?;
    let fitted = p.predict_rows(&xs)?;
    let train_mse = fitted.iter().zip(&ys).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / ys.len() as f64;
    let path = a
        .model
        .clone()
        .unwrap_or_else(|| out_dir(cli, ".").join("predictor.json"));
    write_file(&path, &serde_json::to_string_pretty(&p)?)?;
    let diag = p.diagnostics.as_ref().expect("fit records diagnostics");
    println!(
        "fitted M = {degree}: {} x {} design, rank {}, condition {:.3e}, train mse {train_mse:.3e} -> {}",
        diag.rows,
        diag.cols,
        diag.rank,
        diag.condition_number,
        path.display()
    );
    Ok(())
}

fn tols_predict(cli: &Cli, a: &args::TolsPredictArgs) -> Result<()> {
    let text = fs::read_to_string(&a.model).map_err(|e| Error::file(&a.model, e))?;
    let p: Predictor = serde_json::from_str(&text)?;
    let p = Predictor::new(p.set, p.coeffs)?;
    let (xs, targets): (DMatrix<f64>, Option<Vec<f64>>) = match (&a.data, &a.inputs) {
        (Some(d), _) => {
            let (xs, ys, _) = load_synthetic(d)?;
            (xs, Some(ys))
        }
        (None, Some(i)) => (load_matrix(i)?, None),
        (None, None) => return Err(Error::Config("pass --data or --inputs".into())),
    };
    let pred = p.predict_rows(&xs)?;
    let mut out = String::from(if targets.is_some() {
        "index,prediction,target\n"
    } else {
        "index,prediction\n"
    });
    for (i, v) in pred.iter().enumerate() {
        match &targets {
            Some(t) => out.push_str(&format!("{i},{v},{}\n", t[i])),
            None => out.push_str(&format!("{i},{v}\n")),
        }
    }
    match &cli.out {
        Some(path) => write_file(path, &out)?,
        None => std::io::stdout().write_all(out.as_bytes())?,
    }
    if let Some(t) = targets {
        let mse = pred.iter().zip(&t).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / t.len() as f64;
        eprintln!("mse {mse:.6e} over {} rows", t.len());
    }
    Ok(())
}

fn condnum(cli: &Cli, a: &args::CondnumArgs) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let cfg: CondNumberConfig = load_config(path)?;
            cfg.validate()?;
            cfg
        }
        None => CondNumberConfig::default(),
    };
    if !a.measure.is_empty() {
        cfg.measures = a.measure.clone();
    }
    if !a.d.is_empty() {
        cfg.ds = a.d.clone();
    }
    if !a.k.is_empty() {
        cfg.ks = a.k.clone();
    }
    let mut exp = ExperimentConfig::new(Experiment::CondNumber(cfg.clone()));
    exp.seed = cli.seed.unwrap_or(0);
    match &cli.out {
        Some(dir) => {
            let outcome = execute(&exp, dir)?;
            println!("{}", outcome.summary);
        }
        None => {
            let r = tensor_ols::harness::run_condnumber(&cfg)?;
            println!("{}", CondRow::CSV_HEADER.join(","));
            for row in &r.rows {
                println!("{}", row.csv_record().join(","));
            }
        }
    }
    Ok(())
}

fn load_experiment(cli: &Cli, positional: Option<&Path>) -> Result<ExperimentConfig> {
    let path = positional
        .or(cli.config.as_deref())
        .ok_or_else(|| Error::Config("no config given".into()))?;
    let mut cfg = ExperimentConfig::from_path(path)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(w) = cli.workers {
        cfg.workers = Some(w);
    }
    if let Some(o) = &cli.out {
        cfg.out = Some(o.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn experiment_run(cli: &Cli, positional: Option<&Path>) -> Result<()> {
    let cfg = load_experiment(cli, positional)?;
    let dir = cfg
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("runs/{}-seed{}", cfg.experiment.kind(), cfg.seed)));
    let outcome = execute(&cfg, &dir)?;
    println!("{}", outcome.summary);
    if let Some(p) = outcome.passed {
        println!("criterion: {}", if p { "PASS" } else { "FAIL" });
    }
    println!("wrote {}", outcome.out_dir.display());
    Ok(())
}

fn experiment_check(cli: &Cli, positional: Option<&Path>) -> Result<()> {
    let cfg = load_experiment(cli, positional)?;
    println!("{}", serde_json::to_string_pretty(&cfg)?);
    Ok(())
}

fn image_data_test(data: &ImagePair) -> ImageData {
    ImageData {
        test_images: Some(data.images.clone()),
        test_labels: Some(data.labels.clone()),
        classes: Some(data.classes),
        max_test: data.max,
        ..Default::default()
    }
}

fn mnist_train(cli: &Cli, a: &args::MnistTrainArgs) -> Result<()> {
    let cfg = MnistConfig {
        data: ImageData {
            train_images: Some(a.train_images.clone()),
            train_labels: Some(a.train_labels.clone()),
            test_images: Some(a.test_images.clone()),
            test_labels: Some(a.test_labels.clone()),
            classes: Some(a.classes),
            max_test: a.max_test,
        },
        train: TrainSettings {
            n_batches: a.batches,
            batch_size: a.batch_size,
            radius: a.radius,
        },
        curve_every: None,
        target_accuracy: None,
        save_model: true,
    };
    let mut exp = ExperimentConfig::new(Experiment::MnistConv(cfg));
    exp.seed = cli.seed.unwrap_or(0);
    exp.workers = cli.workers;
    let outcome = execute(&exp, &out_dir(cli, "runs/mnist"))?;
    println!("{}", outcome.summary);
    println!("wrote {}", outcome.out_dir.display());
    Ok(())
}

fn load_pair(data: &ImagePair) -> Result<ImageDataset> {
    let ds = load_idx_dataset(&data.images, &data.labels, data.classes)?;
    Ok(match data.max {
        Some(m) if m < ds.len() => ds.subset(&(0..m).collect::<Vec<_>>()),
        _ => ds,
    })
}

fn mnist_eval(cli: &Cli, model: &Path, data: &ImagePair) -> Result<()> {
    let clf = load_classifier(model)?;
    let ds = load_pair(data)?;
    let preds = clf.predict_all(&ds)?;
    let hits = preds
        .iter()
        .zip(ds.labels())
        .filter(|(p, l)| **p == **l as usize)
        .count();
    println!("accuracy {:.4} ({hits}/{})", hits as f64 / ds.len() as f64, ds.len());
    if let Some(path) = &cli.out {
        let mut text = String::from("index,label,prediction\n");
        for (i, (p, l)) in preds.iter().zip(ds.labels()).enumerate() {
            text.push_str(&format!("{i},{l},{p}\n"));
        }
        write_file(path, &text)?;
    }
    Ok(())
}

fn mnist_noise(cli: &Cli, model: &Path, data: &ImagePair, sigmas: &[f64], areas: &[f64]) -> Result<()> {
    let cfg = NoiseConfig {
        data: image_data_test(data),
        model: Some(model.to_path_buf()),
        sigmas: sigmas.to_vec(),
        areas: areas.to_vec(),
        ..Default::default()
    };
    let mut exp = ExperimentConfig::new(Experiment::NoiseRobustness(cfg));
    exp.seed = cli.seed.unwrap_or(0);
    exp.workers = cli.workers;
    let outcome = execute(&exp, &out_dir(cli, "runs/noise"))?;
    println!("{}", outcome.summary);
    println!("wrote {}", outcome.out_dir.display());
    Ok(())
}

fn dataset_synth(cli: &Cli, a: &args::SynthArgs) -> Result<()> {
    let seed = cli.seed.unwrap_or(0);
    let teacher = random_teacher(a.d, a.depth, a.width, a.activation.clone(), seed, a.norm.into(), false)?;
    let (xs, ys) = synth_teacher_dataset(&a.measure, &teacher, a.n, seed)?;
    let meta = SyntheticMeta {
        n: a.n,
        d: a.d,
        seed,
        measure: a.measure.clone(),
        teacher: Some(teacher),
        inputs_file: String::new(),
        targets_file: String::new(),
    };
    let sidecar = save_synthetic(&out_dir(cli, "."), &a.stem, &xs, &ys, &meta)?;
    println!("wrote {} ({} x {})", sidecar.display(), a.n, a.d);
    Ok(())
}
