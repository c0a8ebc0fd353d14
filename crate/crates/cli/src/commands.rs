use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::time::Instant;

use gpda_core::baselines::{evaluate_mcda, load_mcda_checkpoint, mcda_report, save_mcda_checkpoint, train_source_only_softmax};
use gpda_core::datagen::DatasetSpec;
use gpda_core::diffmath::Fault;
use gpda_core::experiment::{ablate, compare, mean_target_accuracy, sweep_means, Method, SweepParam, SweepRow};
use gpda_core::gradcheck::{run_suite, GradcheckOptions};
use gpda_core::trainer::checkpoint::MCDA_MAGIC;
use gpda_core::uncertainty::{cohort_median, cohort_report, write_report_csv};
use gpda_core::{
    evaluate, load_checkpoint, save_checkpoint, train, train_mcda, train_source_only, DomainDataset, GpdaModel,
    LabeledSet, McdaModel, TrainConfig, TrainHistory,
};

use crate::args::{AblateArgs, CompareArgs, DataArgs, EvalArgs, GradcheckArgs, ReportArgs, Split, TrainArgs};
use crate::failure::{csv_io, io, CmdResult, Failure, DATA};
use crate::manifest::RunManifest;
use crate::resolve::{load_config, resolve_dataset, resolve_train, ConfigFile};

const DEFAULT_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn make_out(dir: &Path) -> CmdResult {
    std::fs::create_dir_all(dir).map_err(io(dir))
}

fn build(spec: &DatasetSpec) -> CmdResult<DomainDataset> {
    Ok(spec.build()?)
}

/// Dataset and training configuration with the data's shape filled in.
fn setup(hyper: &crate::args::HyperArgs, data: &DataArgs, file: &ConfigFile) -> CmdResult<(TrainConfig, DatasetSpec, DomainDataset)> {
    let spec = resolve_dataset(data, file.dataset.as_ref())?;
    let mut config = resolve_train(hyper, file.train.as_ref())?;
    let dataset = build(&spec)?;
    config.classes = dataset.classes;
    config.input_dim = dataset.input_dim;
    config.validate()?;
    Ok((config, spec, dataset))
}

fn parse_method(name: &str) -> CmdResult<Method> {
    name.parse().map_err(|e| Failure::usage(format!("{e} (gpda|mcda|source-only|source-only-softmax)")))
}

fn write_history(history: &TrainHistory, path: &Path) -> CmdResult {
    let f = File::create(path).map_err(io(path))?;
    history.write_csv(f).map_err(csv_io(path))
}

pub fn train_cmd(args: &TrainArgs) -> CmdResult {
    let started = Instant::now();
    let file = load_config(args.hyper.config.as_deref())?;
    let (config, spec, data) = setup(&args.hyper, &args.data, &file)?;
    let method = parse_method(args.method.as_deref().or(file.method.as_deref()).unwrap_or("gpda"))?;
    make_out(&args.out)?;

    let ckpt = args.out.join("model.ckpt");
    let history = match method {
        Method::Gpda | Method::SourceOnly => {
            let (model, history) = if method == Method::Gpda {
                train(&config, &data)?
            } else {
                train_source_only(&config, &data)?
            };
            save_checkpoint(&model, &config, &ckpt)?;
            history
        }
        Method::Mcda | Method::SourceOnlySoftmax => {
            let (model, history) = if method == Method::Mcda {
                train_mcda(&config, &data)?
            } else {
                train_source_only_softmax(&config, &data)?
            };
            save_mcda_checkpoint(&model, &config, &ckpt)?;
            history
        }
    };
    let hist_path = args.out.join("history.csv");
    write_history(&history, &hist_path)?;
    if let Some(last) = history.last() {
        let show = |v: Option<f64>| v.map_or("-".to_string(), |a| format!("{a:.4}"));
        println!("{method}: source accuracy {} target accuracy {}", show(last.src_acc), show(last.tgt_acc));
    }

    let mut m = RunManifest::new("train", config, spec, data.provenance);
    m.method = Some(method.name().into());
    m.output("checkpoint", &ckpt);
    m.output("history", &hist_path);
    m.finish(&args.out, started)?;
    Ok(())
}

enum Loaded {
    Gpda(GpdaModel),
    Mcda(McdaModel),
}

fn load_any(path: &Path) -> CmdResult<(Loaded, TrainConfig)> {
    let missing = |e: std::io::Error| Failure::new(DATA, anyhow::Error::new(e).context(format!("checkpoint {}", path.display())));
    let mut magic = [0u8; 5];
    File::open(path).and_then(|mut f| f.read_exact(&mut magic)).map_err(missing)?;
    if &magic == MCDA_MAGIC {
        let (m, c) = load_mcda_checkpoint(path)?;
        Ok((Loaded::Mcda(m), c))
    } else {
        // a foreign magic surfaces as the GPDA reader's error
        let (m, c) = load_checkpoint(path)?;
        Ok((Loaded::Gpda(m), c))
    }
}

fn pick(data: &DomainDataset, split: Split) -> &LabeledSet {
    match split {
        Split::Source => &data.source,
        Split::TargetTest => &data.target_test,
    }
}

fn split_name(split: Split) -> &'static str {
    match split {
        Split::Source => "source",
        Split::TargetTest => "target-test",
    }
}

pub fn eval_cmd(args: &EvalArgs) -> CmdResult {
    let file = load_config(args.config.as_deref())?;
    let (model, _) = load_any(&args.checkpoint)?;
    let data = build(&resolve_dataset(&args.data, file.dataset.as_ref())?)?;
    let set = pick(&data, args.split);
    let acc = match &model {
        Loaded::Gpda(m) => evaluate(m, set)?,
        Loaded::Mcda(m) => evaluate_mcda(m, set)?,
    };
    println!("{} accuracy {acc}", split_name(args.split));
    Ok(())
}

pub fn gradcheck_cmd(args: &GradcheckArgs) -> CmdResult {
    if !(args.h > 0.0 && args.h.is_finite()) {
        return Err(Failure::usage("--h must be a positive step"));
    }
    let fault = match args.inject_fault.as_deref() {
        None => None,
        Some("tanh-backward") => Some(Fault::TanhBackward),
        Some(other) => return Err(Failure::usage(format!("unknown fault `{other}`"))),
    };
    let opts = GradcheckOptions {
        points: args.points,
        h: args.h,
        tol: args.tol.unwrap_or((1e4 * args.h * args.h).max(1e-4)),
        seed: args.seed,
        fault,
    };
    let report = run_suite(&opts)?;
    println!("{:<16} {:>12}  status", "term", "worst_rel_err");
    for t in &report.terms {
        println!("{:<16} {:>12.3e}  {}", t.term, t.worst, if t.passed { "ok" } else { "FAIL" });
    }
    println!("worst relative error {:.3e} (tolerance {:.1e}, h {:.1e}, {} points)", report.worst(), opts.tol, opts.h, opts.points);
    if report.passed() {
        return Ok(());
    }
    let offenders: Vec<String> = report
        .terms
        .iter()
        .filter(|t| !t.passed)
        .map(|t| format!("{} (segment `{}`)", t.term, t.segment))
        .collect();
    Err(Failure::check(format!("gradient mismatch in {}", offenders.join(", "))))
}

pub fn report_cmd(args: &ReportArgs) -> CmdResult {
    let started = Instant::now();
    let file = load_config(args.config.as_deref())?;
    let (model, mut config) = load_any(&args.checkpoint)?;
    if let Some(m) = &args.bayes_mode {
        config.bayes_error_mode = m.parse().map_err(|e| Failure::usage(format!("--bayes-mode: {e}")))?;
    }
    let spec = resolve_dataset(&args.data, file.dataset.as_ref())?;
    let data = build(&spec)?;
    let set = pick(&data, args.split);
    make_out(&args.out)?;

    let report_path = args.out.join("report.csv");
    let mut hists: Vec<(String, PathBuf)> = Vec::new();
    let records = match &model {
        Loaded::Gpda(m) => {
            let r = cohort_report(m, set, config.bayes_error_mode)?;
            for (name, h) in [("bd", &r.bd_histogram), ("bayes_err", &r.bayes_histogram)] {
                let p = args.out.join(format!("hist_{name}.csv"));
                h.write_csv(File::create(&p).map_err(io(&p))?).map_err(csv_io(&p))?;
                hists.push((format!("hist_{name}"), p));
            }
            r.records
        }
        Loaded::Mcda(m) => {
            let (records, h) = mcda_report(m, set)?;
            let p = args.out.join("hist_bpd.csv");
            h.write_csv(File::create(&p).map_err(io(&p))?).map_err(csv_io(&p))?;
            hists.push(("hist_bpd".into(), p));
            records
        }
    };
    write_report_csv(&records, File::create(&report_path).map_err(io(&report_path))?).map_err(csv_io(&report_path))?;

    let correct = records.iter().filter(|r| r.correct).count();
    println!("{} samples, {correct} correct", records.len());
    let score: fn(&gpda_core::UncertaintyRecord) -> Option<f64> = match model {
        Loaded::Gpda(_) => |r| r.bd,
        Loaded::Mcda(_) => |r| r.bpd,
    };
    for (label, flag) in [("correct", true), ("incorrect", false)] {
        if let Some(med) = cohort_median(&records, flag, score) {
            println!("median score ({label}) {med:.6}");
        }
    }

    let mut m = RunManifest::new("report", config, spec, data.provenance);
    m.checkpoint = Some(args.checkpoint.clone());
    m.split = Some(split_name(args.split).into());
    m.output("report", &report_path);
    for (name, p) in &hists {
        m.output(name, p);
    }
    m.finish(&args.out, started)?;
    Ok(())
}

pub fn compare_cmd(args: &CompareArgs) -> CmdResult {
    let started = Instant::now();
    let file = load_config(args.hyper.config.as_deref())?;
    let (config, spec, data) = setup(&args.hyper, &args.data, &file)?;
    let seeds = args.seeds.clone().or(file.seeds).unwrap_or(DEFAULT_SEEDS.to_vec());
    let names = args
        .methods
        .clone()
        .or(file.methods)
        .unwrap_or_else(|| ["gpda", "mcda", "source-only"].map(String::from).to_vec());
    let methods = names.iter().map(|n| parse_method(n)).collect::<CmdResult<Vec<_>>>()?;
    make_out(&args.out)?;

    let results = compare(&methods, &config, &data, &seeds)?;
    let path = args.out.join("summary.csv");
    let mut w = csv::Writer::from_path(&path).map_err(csv_io(&path))?;
    w.write_record(["method", "seed", "source_acc", "target_acc"]).map_err(csv_io(&path))?;
    for r in &results {
        w.write_record([r.method.name().to_string(), r.seed.to_string(), r.source_acc.to_string(), r.target_acc.to_string()])
            .map_err(csv_io(&path))?;
    }
    for m in &methods {
        let runs: Vec<_> = results.iter().filter(|r| r.method == *m).collect();
        let mean = |f: fn(&gpda_core::experiment::RunResult) -> f64| runs.iter().map(|r| f(r)).sum::<f64>() / runs.len() as f64;
        w.write_record([m.name().to_string(), "mean".into(), mean(|r| r.source_acc).to_string(), mean(|r| r.target_acc).to_string()])
            .map_err(csv_io(&path))?;
    }
    w.flush().map_err(io(&path))?;
    for (m, acc) in mean_target_accuracy(&results) {
        println!("{m:<20} mean target accuracy {acc:.4}");
    }

    let mut manifest = RunManifest::new("compare", config, spec, data.provenance);
    manifest.seeds = Some(seeds);
    manifest.methods = Some(names);
    manifest.output("summary", &path);
    manifest.finish(&args.out, started)?;
    Ok(())
}

pub fn ablate_cmd(args: &AblateArgs) -> CmdResult {
    let started = Instant::now();
    let file = load_config(args.hyper.config.as_deref())?;
    let lambda_grid = args.lambda_grid.clone().or(file.lambda_grid.clone());
    let alpha_grid = args.alpha_grid.clone().or(file.alpha_grid.clone());
    let sweeps: Vec<(SweepParam, &Vec<f64>)> = [(SweepParam::Lambda, &lambda_grid), (SweepParam::Alpha, &alpha_grid)]
        .into_iter()
        .filter_map(|(p, g)| g.as_ref().map(|g| (p, g)))
        .collect();
    if sweeps.is_empty() || sweeps.iter().any(|(_, g)| g.is_empty()) {
        return Err(Failure::usage("empty grid: pass --lambda-grid and/or --alpha-grid with at least one value"));
    }
    let (config, spec, data) = setup(&args.hyper, &args.data, &file)?;
    let seeds = args.seeds.clone().or(file.seeds).unwrap_or(DEFAULT_SEEDS.to_vec());
    make_out(&args.out)?;

    let mut rows: Vec<SweepRow> = Vec::new();
    for (param, grid) in &sweeps {
        let part = ablate(*param, grid, &config, &data, &seeds)?;
        for (value, acc) in sweep_means(&part) {
            println!("{:<7} {value:<8} mean target accuracy {acc:.4}", param.name());
        }
        rows.extend(part);
    }
    let path = args.out.join("ablation.csv");
    let mut w = csv::Writer::from_path(&path).map_err(csv_io(&path))?;
    w.write_record(["param", "value", "seed", "target_acc"]).map_err(csv_io(&path))?;
    for r in &rows {
        w.write_record([r.param.name().to_string(), r.value.to_string(), r.seed.to_string(), r.target_acc.to_string()])
            .map_err(csv_io(&path))?;
    }
    w.flush().map_err(io(&path))?;

    let mut manifest = RunManifest::new("ablate", config, spec, data.provenance);
    manifest.seeds = Some(seeds);
    manifest.lambda_grid = lambda_grid;
    manifest.alpha_grid = alpha_grid;
    manifest.output("ablation", &path);
    manifest.finish(&args.out, started)?;
    Ok(())
}
