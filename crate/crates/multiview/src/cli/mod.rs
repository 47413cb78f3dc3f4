//! Command-line entry points tying data, model, trainer, fusion and the
//! baselines into reproducible runs.
//!
//! Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.

use crate::baselines::{cca_fit, concat_softmax_fit, default_ridge, mvda_fit, ConcatTrainOpts};
use crate::data::{
    load_dataset, split_dataset, synth, write_dataset, MultiViewDataset, Split, ViewFormat,
};
use crate::error::{Error, Result};
use crate::fusion::{
    append_alpha_history, per_view_losses, write_alpha_csv, PredictWeighting, ViewWeights,
};
use crate::model::checkpoint;
use crate::numerics::gradcheck;
use crate::trainer::{evaluate, fit, TrainConfig};
use serde_json::json;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

const USAGE: &str = "\
multiview <command> [flags]

commands:
  train      --data DIR --out DIR [--config FILE]
  eval       --model FILE --data DIR [--split train|val|test] [--split-file FILE] [--weighting alpha|alpha_gamma]
  gradcheck  [--seed N]
  synth      --out DIR --views M --classes C --samples N [--noise-views K] [--dim D]
             [--separation F] [--seed S] [--format csv|mvbin] [--mode means|product]
  baseline   --method cca|mvda|concat --data DIR [--r R] [--ridge F] [--epochs N] [--lr F] [--seed S]
  sweep      --data DIR --grid FILE --out DIR [--config FILE]
";

/// Parses and dispatches; prints errors to stderr and returns the exit code.
pub fn run(args: &[String]) -> i32 {
    match dispatch(args) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err}");
            err.exit_code()
        }
    }
}

fn dispatch(args: &[String]) -> Result<()> {
    let Some(command) = args.first() else {
        eprint!("{USAGE}");
        return Err(Error::Config("missing command".into()));
    };
    let flags = Flags::parse(&args[1..])?;
    match command.as_str() {
        "train" => cmd_train(&flags),
        "eval" => cmd_eval(&flags),
        "gradcheck" => cmd_gradcheck(&flags),
        "synth" => cmd_synth(&flags),
        "baseline" => cmd_baseline(&flags),
        "sweep" => cmd_sweep(&flags),
        "help" | "--help" | "-h" => {
            print!("{USAGE}");
            Ok(())
        }
        other => Err(Error::Config(format!("unknown command '{other}'"))),
    }
}

struct Flags {
    values: BTreeMap<String, String>,
}

impl Flags {
    fn parse(args: &[String]) -> Result<Flags> {
        let mut values = BTreeMap::new();
        let mut it = args.iter();
        while let Some(arg) = it.next() {
            let Some(key) = arg.strip_prefix("--") else {
                return Err(Error::Config(format!("unexpected argument '{arg}'")));
            };
            let value = it
                .next()
                .ok_or_else(|| Error::Config(format!("flag --{key} needs a value")))?;
            values.insert(key.to_string(), value.clone());
        }
        Ok(Flags { values })
    }

    fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(|s| s.as_str())
    }

    fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::Config(format!("missing required flag --{key}")))
    }

    fn parse_num<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.get(key) {
            None => Ok(default),
            Some(raw) => raw
                .parse()
                .map_err(|_| Error::Config(format!("bad value for --{key}: '{raw}'"))),
        }
    }
}

/// Run-config file: every `TrainConfig` field plus optional `data` and `out`
/// paths. Unknown keys are rejected; missing keys take the documented
/// defaults, and the fully resolved config is echoed into the output
/// directory.
fn read_run_config(
    path: Option<&Path>,
    flags: &Flags,
) -> Result<(TrainConfig, Option<String>, Option<String>)> {
    let mut data = None;
    let mut out = None;
    let cfg = match path {
        None => TrainConfig::default(),
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                Error::Config(format!("cannot read config {}: {e}", path.display()))
            })?;
            let mut value: serde_json::Value = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("bad json in {}: {e}", path.display())))?;
            let obj = value
                .as_object_mut()
                .ok_or_else(|| Error::Config("config must be a json object".into()))?;
            data = obj
                .remove("data")
                .and_then(|v| v.as_str().map(String::from));
            out = obj.remove("out").and_then(|v| v.as_str().map(String::from));
            serde_json::from_value(value).map_err(|e| Error::Config(format!("bad config: {e}")))?
        }
    };
    // CLI flags take precedence over the file
    if let Some(d) = flags.get("data") {
        data = Some(d.to_string());
    }
    if let Some(o) = flags.get("out") {
        out = Some(o.to_string());
    }
    Ok((cfg, data, out))
}

fn resolved_config_json(cfg: &TrainConfig, data: &str, out: &str) -> serde_json::Value {
    let mut value = serde_json::to_value(cfg).expect("config serializes");
    let obj = value.as_object_mut().unwrap();
    obj.insert("data".into(), json!(data));
    obj.insert("out".into(), json!(out));
    value
}

fn cmd_train(flags: &Flags) -> Result<()> {
    let config_path = flags.get("config").map(PathBuf::from);
    let (cfg, data, out) = read_run_config(config_path.as_deref(), flags)?;
    let data =
        data.ok_or_else(|| Error::Config("missing --data (or 'data' in the config)".into()))?;
    let out = out.ok_or_else(|| Error::Config("missing --out (or 'out' in the config)".into()))?;
    let out_dir = PathBuf::from(&out);

    let dataset = load_dataset(Path::new(&data))?;
    cfg.validate(dataset.num_views())?;
    std::fs::create_dir_all(&out_dir)?;
    std::fs::write(
        out_dir.join("resolved_config.json"),
        serde_json::to_string_pretty(&resolved_config_json(&cfg, &data, &out)).unwrap(),
    )?;

    let result = fit(&cfg, &dataset)?;

    // training log: one json line per epoch
    let mut metrics = String::new();
    for report in &result.history {
        let line = serde_json::to_string(report).map_err(|e| Error::Data(e.to_string()))?;
        println!("{line}");
        metrics.push_str(&line);
        metrics.push('\n');
    }
    std::fs::write(out_dir.join("metrics.jsonl"), metrics)?;

    checkpoint::save(
        &out_dir.join("model.ckpt"),
        &result.model,
        &result.weights,
        result.standardizer.as_ref(),
    )?;
    write_alpha_csv(&out_dir.join("alpha.csv"), &result.weights)?;

    let history_path = out_dir.join("alpha_history.csv");
    std::fs::remove_file(&history_path).ok();
    let m = dataset.num_views();
    append_alpha_history(
        &history_path,
        0,
        &ViewWeights::uniform(m, cfg.gamma, cfg.effective_s(m)),
    )?;
    for report in &result.history {
        append_alpha_history(
            &history_path,
            report.epoch,
            &ViewWeights {
                alpha: report.alpha.clone(),
                gamma: cfg.gamma,
                s: cfg.effective_s(m),
            },
        )?;
    }

    // persist the split so eval can reproduce the train/val/test partition
    let split_text: String = result
        .split
        .iter()
        .map(|s| format!("{}\n", s.as_str()))
        .collect();
    std::fs::write(out_dir.join("split.txt"), split_text)?;

    if let Some(reason) = result.aborted {
        return Err(Error::Numeric(format!("training aborted: {reason}")));
    }
    Ok(())
}

fn cmd_eval(flags: &Flags) -> Result<()> {
    let model_path = PathBuf::from(flags.require("model")?);
    let data_dir = PathBuf::from(flags.require("data")?);
    let split = Split::parse(flags.get("split").unwrap_or("test"))?;
    let weighting = match flags.get("weighting").unwrap_or("alpha") {
        "alpha" => PredictWeighting::Alpha,
        "alpha_gamma" => PredictWeighting::AlphaGamma,
        other => return Err(Error::Config(format!("unknown weighting '{other}'"))),
    };

    let (model, weights, standardizer) = checkpoint::load(&model_path)?;
    let mut dataset = load_dataset(&data_dir)?;

    if model.spec.num_views != dataset.num_views() {
        return Err(Error::Data(format!(
            "checkpoint expects {} views, dataset has {}",
            model.spec.num_views,
            dataset.num_views()
        )));
    }
    if model.spec.view_dims != dataset.view_dims() {
        return Err(Error::Data(format!(
            "checkpoint view dims {:?} do not match dataset {:?}",
            model.spec.view_dims,
            dataset.view_dims()
        )));
    }

    if dataset.split.is_none() {
        // fall back to a split file: --split-file, else one next to the model
        let fallback = flags
            .get("split-file")
            .map(PathBuf::from)
            .unwrap_or_else(|| {
                model_path
                    .parent()
                    .unwrap_or(Path::new("."))
                    .join("split.txt")
            });
        let text = std::fs::read_to_string(&fallback).map_err(|_| {
            Error::Data(format!(
                "dataset has no split.txt; pass --split-file (looked at {})",
                fallback.display()
            ))
        })?;
        let assignment: Vec<Split> = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| Split::parse(l.trim()))
            .collect::<Result<_>>()?;
        if assignment.len() != dataset.num_samples() {
            return Err(Error::Data(format!(
                "split file has {} lines, dataset has {} samples",
                assignment.len(),
                dataset.num_samples()
            )));
        }
        dataset.split = Some(assignment);
    }

    let (mut views, labels) = dataset.gather(split)?;
    if let Some(st) = &standardizer {
        st.apply_views(&mut views)?;
    }
    let (top1, top5) = evaluate(&model, &weights, &views, &labels, weighting)?;

    let batch =
        crate::data::gather_batch::<f64>(&views, &labels, &(0..labels.len()).collect::<Vec<_>>());
    let logits = model.forward_eval(&batch.views)?;
    let losses = per_view_losses(&logits, &labels)?;

    let output = json!({
        "top1": top1,
        "top5": top5,
        "per_view_losses": losses,
        "alpha": weights.alpha,
    });
    println!("{}", serde_json::to_string_pretty(&output).unwrap());
    Ok(())
}

fn cmd_gradcheck(flags: &Flags) -> Result<()> {
    let seed: u64 = flags.parse_num("seed", 0)?;
    let step = gradcheck::DEFAULT_STEP;
    let mut all_ok = true;
    for check in gradcheck::check_all_ops(seed, step)? {
        let status = if check.passed() { "ok" } else { "FAIL" };
        println!(
            "{:<24} max_rel_err={:.3e} tolerance={:.0e} {status}",
            check.name, check.max_err, check.tolerance
        );
        all_ok &= check.passed();
    }
    let e2e = crate::model::end_to_end_grad_check(seed, step)?;
    let e2e_ok = e2e <= 1e-4;
    println!(
        "{:<24} max_rel_err={e2e:.3e} tolerance=1e-4 {}",
        "end_to_end",
        if e2e_ok { "ok" } else { "FAIL" }
    );
    all_ok &= e2e_ok;
    if !all_ok {
        return Err(Error::Numeric("gradient checks failed".into()));
    }
    Ok(())
}

fn cmd_synth(flags: &Flags) -> Result<()> {
    let out = PathBuf::from(flags.require("out")?);
    let seed: u64 = flags.parse_num("seed", 0)?;
    let format = match flags.get("format").unwrap_or("csv") {
        "csv" => ViewFormat::Csv,
        "mvbin" => ViewFormat::Mvbin,
        other => return Err(Error::Config(format!("unknown format '{other}'"))),
    };

    let ds = match flags.get("mode").unwrap_or("means") {
        "means" => {
            let views: usize = flags.parse_num("views", 0).and_then(|v: usize| {
                if v == 0 {
                    Err(Error::Config("missing required flag --views".into()))
                } else {
                    Ok(v)
                }
            })?;
            let classes: usize = flags
                .require("classes")?
                .parse()
                .map_err(|_| Error::Config("bad --classes".into()))?;
            let samples: usize = flags
                .require("samples")?
                .parse()
                .map_err(|_| Error::Config("bad --samples".into()))?;
            let noise: usize = flags.parse_num("noise-views", 0)?;
            if noise > views {
                return Err(Error::Config(format!(
                    "--noise-views {noise} exceeds --views {views}"
                )));
            }
            let dim: usize = flags.parse_num("dim", classes.max(8))?;
            let separation: f64 = flags.parse_num("separation", 4.0)?;
            let mut spec = synth::SynthSpec::new(views, classes, samples, dim);
            // the last K views carry no signal
            spec.noise_views = (views - noise..views).collect();
            spec.separation = separation;
            spec.seed = seed;
            synth::generate(&spec)?
        }
        "product" => {
            let samples: usize = flags
                .require("samples")?
                .parse()
                .map_err(|_| Error::Config("bad --samples".into()))?;
            let dim: usize = flags.parse_num("dim", 6)?;
            let margin: f64 = flags.parse_num("margin", 0.2)?;
            synth::generate_product(samples, dim, margin, seed)?
        }
        other => return Err(Error::Config(format!("unknown mode '{other}'"))),
    };

    write_dataset(&out, &ds, format)?;
    println!(
        "{}",
        json!({
            "out": out.display().to_string(),
            "views": ds.num_views(),
            "classes": ds.num_classes,
            "samples": ds.num_samples(),
        })
    );
    Ok(())
}

fn prepared_dataset(data_dir: &Path, seed: u64) -> Result<MultiViewDataset> {
    let mut ds = load_dataset(data_dir)?;
    if ds.split.is_none() {
        split_dataset(&mut ds, (0.7, 0.2, 0.1), seed)?;
    }
    crate::data::standardize_fit_apply(&mut ds)?;
    Ok(ds)
}

fn cmd_baseline(flags: &Flags) -> Result<()> {
    let method = flags.require("method")?.to_string();
    let data_dir = PathBuf::from(flags.require("data")?);
    let seed: u64 = flags.parse_num("seed", 0)?;
    let ds = prepared_dataset(&data_dir, seed)?;
    let (train_views, train_labels) = ds.gather(Split::Train)?;

    let output = match method.as_str() {
        "cca" => {
            if ds.num_views() < 2 {
                return Err(Error::Data("cca needs two views".into()));
            }
            let r: usize = flags.parse_num("r", 1)?;
            let ridge: f64 = match flags.get("ridge") {
                Some(raw) => raw
                    .parse()
                    .map_err(|_| Error::Config("bad --ridge".into()))?,
                None => {
                    let cov = train_views[0].matmul_tn(&train_views[0])?;
                    default_ridge(&cov)
                }
            };
            let sol = cca_fit(&train_views[0], &train_views[1], r, ridge)?;
            json!({
                "method": "cca",
                "r": r,
                "ridge": ridge,
                "correlations": sol.correlations,
            })
        }
        "mvda" => {
            let r: usize = flags.parse_num("r", (ds.num_classes - 1).max(1))?;
            let sol = mvda_fit(&train_views, &train_labels, ds.num_classes, r)?;
            json!({
                "method": "mvda",
                "r": r,
                "objective": sol.objective,
            })
        }
        "concat" => {
            let opts = ConcatTrainOpts {
                epochs: flags.parse_num("epochs", 60)?,
                lr: flags.parse_num("lr", 1e-2)?,
                seed,
                ..ConcatTrainOpts::default()
            };
            let model = concat_softmax_fit(&train_views, &train_labels, ds.num_classes, &opts)?;
            let (test_views, test_labels) = ds.gather(Split::Test)?;
            let (top1, top5) = model.accuracy(&test_views, &test_labels)?;
            json!({
                "method": "concat",
                "epochs": opts.epochs,
                "top1": top1,
                "top5": top5,
            })
        }
        other => return Err(Error::Config(format!("unknown method '{other}'"))),
    };
    println!("{}", serde_json::to_string(&output).unwrap());
    Ok(())
}

#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct SweepGrid {
    #[serde(default)]
    gamma: Vec<f64>,
    #[serde(default)]
    s: Vec<usize>,
    #[serde(default)]
    d_b: Vec<usize>,
}

fn cmd_sweep(flags: &Flags) -> Result<()> {
    let data_dir = PathBuf::from(flags.require("data")?);
    let grid_path = PathBuf::from(flags.require("grid")?);
    let out_dir = PathBuf::from(flags.require("out")?);
    let config_path = flags.get("config").map(PathBuf::from);
    let (base_cfg, _, _) = read_run_config(config_path.as_deref(), flags)?;

    let grid_text = std::fs::read_to_string(&grid_path)
        .map_err(|e| Error::Config(format!("cannot read grid {}: {e}", grid_path.display())))?;
    let grid: SweepGrid = serde_json::from_str(&grid_text)
        .map_err(|e| Error::Config(format!("bad grid file: {e}")))?;
    let gammas = if grid.gamma.is_empty() {
        vec![base_cfg.gamma]
    } else {
        grid.gamma
    };
    let ss: Vec<Option<usize>> = if grid.s.is_empty() {
        vec![base_cfg.s]
    } else {
        grid.s.iter().map(|&s| Some(s)).collect()
    };
    let dbs = if grid.d_b.is_empty() {
        vec![base_cfg.d_b]
    } else {
        grid.d_b
    };

    let dataset = load_dataset(&data_dir)?;
    std::fs::create_dir_all(&out_dir)?;

    let mut rows = Vec::new();
    for &gamma in &gammas {
        for &s in &ss {
            for &d_b in &dbs {
                let cfg = TrainConfig {
                    gamma,
                    s,
                    d_b,
                    ..base_cfg.clone()
                };
                cfg.validate(dataset.num_views())?;
                let result = fit(&cfg, &dataset)?;
                let (top1, topk) = result
                    .history
                    .iter()
                    .max_by(|a, b| a.val_top1.partial_cmp(&b.val_top1).unwrap())
                    .map(|r| (r.val_top1, r.val_topk))
                    .unwrap_or((0.0, 0.0));
                println!(
                    "{}",
                    json!({"gamma": gamma, "s": s, "d_b": d_b, "val_top1": top1, "val_top5": topk})
                );
                rows.push((gamma, s.unwrap_or(dataset.num_views()), d_b, top1, topk));
            }
        }
    }

    let best_idx = rows
        .iter()
        .enumerate()
        .max_by(|a, b| a.1 .3.partial_cmp(&b.1 .3).unwrap())
        .map(|(i, _)| i)
        .unwrap_or(0);
    let mut csv = String::from("gamma,s,d_b,val_top1,val_top5,best\n");
    for (i, (gamma, s, d_b, top1, topk)) in rows.iter().enumerate() {
        csv.push_str(&format!(
            "{gamma},{s},{d_b},{top1},{topk},{}\n",
            if i == best_idx { 1 } else { 0 }
        ));
    }
    std::fs::write(out_dir.join("sweep.csv"), csv)?;
    Ok(())
}
