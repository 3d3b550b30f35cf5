use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;
use tsnas_core::checkpoint::Checkpoint;
use tsnas_core::genotype::Genotype;
use tsnas_core::pipeline::search_and_prune;
use tsnas_core::prune::write_audit;
use tsnas_core::train::{at_geometry, evaluate, naive_baselines, profile, train_genotype, FinalData, Metrics, TrainReport};
use tsnas_core::{CoreError, Network};
use tsnas_tensor::rng::{capture, seeded};

use crate::config::Resolved;
use crate::log::event;

/// Exit code 2 for anything the user can fix in their inputs, 3 for failures while running.
#[derive(Debug)]
pub enum CliError {
    Invalid(Vec<String>),
    Runtime(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Invalid(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Config(_) | CoreError::Genotype(_) | CoreError::Data { .. } => CliError::Invalid(vec![e.to_string()]),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

fn io(what: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", what.display()))
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| io(path, e))
}

fn mkdir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| io(path, e))
}

/// A missing file is a runtime failure; a file that does not parse is invalid input.
pub fn read_genotype(path: &Path) -> Result<Genotype, CliError> {
    let text = fs::read_to_string(path).map_err(|e| io(path, e))?;
    Genotype::from_json(&text).map_err(|e| CliError::Invalid(vec![format!("{}: {e}", path.display())]))
}

pub fn search(r: &Resolved, checkpoints: bool) -> Result<PathBuf, CliError> {
    let h = r.min_horizon();
    let net = r.network(h);
    let data = FinalData::new(&r.data, r.split, r.cfg.lookback, h)?;
    let scfg = r.search_config();
    let out = &r.cfg.output_dir;
    mkdir(out)?;
    let ck = out.join("checkpoints");
    if checkpoints {
        mkdir(&ck)?;
    }
    event("search_start", json!({ "dataset": r.dataset_name, "horizon": h, "seed": scfg.seed, "mode": net.mode }));
    let res = search_and_prune::<f32>(&data, &net, &scfg, &r.cfg.prune, &r.dataset_name, checkpoints.then_some(ck.as_path()), |e| {
        event("search_epoch", serde_json::to_value(e).unwrap_or_default())
    })?;
    let gpath = out.join("genotype.json");
    write(&gpath, &res.genotype.to_json())?;
    write_audit(&out.join("audit.jsonl"), &res.audit)?;
    let log: String = res.log.iter().map(|l| serde_json::to_string(l).unwrap_or_default() + "\n").collect();
    write(&out.join("search_log.jsonl"), &log)?;
    event("search_done", json!({ "genotype": gpath, "hash": res.genotype.hash() }));
    println!("genotype written to {}", gpath.display());
    println!("hash {}", res.genotype.hash());
    print!("{}", res.genotype.describe());
    Ok(gpath)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub horizon: usize,
    pub runs: usize,
    pub mse_mean: f64,
    pub mse_std: f64,
    pub mae_mean: f64,
    pub mae_std: f64,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, 0.0);
    }
    (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
}

pub fn summarize(reports: &[TrainReport]) -> Vec<SummaryRow> {
    let mut by_h: BTreeMap<usize, Vec<&TrainReport>> = BTreeMap::new();
    for r in reports {
        by_h.entry(r.horizon).or_default().push(r);
    }
    by_h.into_iter()
        .map(|(horizon, rs)| {
            let (mse_mean, mse_std) = mean_std(&rs.iter().map(|r| r.test_mse).collect::<Vec<_>>());
            let (mae_mean, mae_std) = mean_std(&rs.iter().map(|r| r.test_mae).collect::<Vec<_>>());
            SummaryRow { horizon, runs: rs.len(), mse_mean, mse_std, mae_mean, mae_std }
        })
        .collect()
}

fn csv_err(path: &Path, e: csv::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

fn model_checkpoint(g: &Genotype, net: &Network<f32>, rep: &TrainReport) -> Checkpoint<f32> {
    let store = &net.store;
    let params = store.ids().map(|id| (store.name(id).to_string(), store.value(id).clone())).collect();
    Checkpoint {
        epoch: rep.best_epoch.unwrap_or(0),
        meta: json!({ "genotype": g, "report": rep }),
        rng: capture(&seeded(rep.seed)),
        adam_steps: 0,
        sections: BTreeMap::from([("params".to_string(), params)]),
    }
}

/// The genotype must describe the configured data.
fn check_compatible(r: &Resolved, g: &Genotype) -> Result<(), CliError> {
    let s = &g.search_space;
    let mut errs = Vec::new();
    if s.n_targets != r.data.n_targets() {
        errs.push(format!("genotype has {} targets but the dataset has {}", s.n_targets, r.data.n_targets()));
    }
    if s.n_features != r.data.n_features() {
        errs.push(format!("genotype has {} features but the dataset has {}", s.n_features, r.data.n_features()));
    }
    if errs.is_empty() {
        Ok(())
    } else {
        Err(CliError::Invalid(errs))
    }
}

/// One report per (horizon, seed), the trained weights, `runs.csv` and `summary.csv`.
pub fn train(r: &Resolved, g: &Genotype) -> Result<Vec<TrainReport>, CliError> {
    check_compatible(r, g)?;
    let l = r.cfg.lookback;
    let out = &r.cfg.output_dir;
    let (rep_dir, model_dir) = (out.join("reports"), out.join("models"));
    mkdir(&rep_dir)?;
    mkdir(&model_dir)?;
    let mut reports = Vec::new();
    for &h in &r.cfg.horizons {
        let data = FinalData::new(&r.data, r.split, l, h)?;
        let gh = at_geometry(g, l, h);
        for &seed in &r.cfg.seeds {
            event("train_start", json!({ "horizon": h, "seed": seed }));
            let (rep, net) = train_genotype::<f32>(&gh, &data, &r.cfg.train, seed, &r.dataset_name)?;
            let stem = format!("h{h}_s{seed}");
            write(&rep_dir.join(format!("{stem}.json")), &serde_json::to_string_pretty(&rep).expect("report serializes"))?;
            model_checkpoint(&gh, &net, &rep).save(&model_dir.join(format!("{stem}.ckpt")))?;
            event(
                "train_done",
                json!({ "horizon": h, "seed": seed, "test_mse": rep.test_mse, "test_mae": rep.test_mae,
                        "best_epoch": rep.best_epoch, "diverged": rep.diverged }),
            );
            reports.push(rep);
        }
    }

    let runs = out.join("runs.csv");
    let mut w = csv::Writer::from_path(&runs).map_err(|e| csv_err(&runs, e))?;
    w.write_record(["dataset", "horizon", "seed", "mse", "mae", "params", "wallclock_s"]).map_err(|e| csv_err(&runs, e))?;
    for rep in &reports {
        w.write_record([
            rep.dataset.clone(),
            rep.horizon.to_string(),
            rep.seed.to_string(),
            rep.test_mse.to_string(),
            rep.test_mae.to_string(),
            rep.params.to_string(),
            format!("{:.3}", rep.wallclock_s),
        ])
        .map_err(|e| csv_err(&runs, e))?;
    }
    w.flush().map_err(|e| io(&runs, e))?;

    let summary = out.join("summary.csv");
    let rows = summarize(&reports);
    let mut w = csv::Writer::from_path(&summary).map_err(|e| csv_err(&summary, e))?;
    for row in &rows {
        w.serialize(row).map_err(|e| csv_err(&summary, e))?;
    }
    w.flush().map_err(|e| io(&summary, e))?;

    println!("{:>8} {:>5} {:>12} {:>10} {:>12} {:>10}", "horizon", "runs", "mse", "±", "mae", "±");
    for row in &rows {
        println!(
            "{:>8} {:>5} {:>12.6} {:>10.6} {:>12.6} {:>10.6}",
            row.horizon, row.runs, row.mse_mean, row.mse_std, row.mae_mean, row.mae_std
        );
    }
    println!("reports in {}", rep_dir.display());
    Ok(reports)
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub model: PathBuf,
    pub horizon: usize,
    pub test: Metrics,
    pub repeat_last: Metrics,
    pub seasonal_naive: Metrics,
    pub period: usize,
}

/// Test metrics of a trained model next to the naive baselines on the same windows.
pub fn eval(r: &Resolved, model: &Path, period: Option<usize>, as_json: bool) -> Result<EvalReport, CliError> {
    let ck = Checkpoint::<f32>::load(model).map_err(|e| CliError::Runtime(format!("{}: {e}", model.display())))?;
    let g = Genotype::from_json(&ck.meta["genotype"].to_string())
        .map_err(|e| CliError::Invalid(vec![format!("{}: {e}", model.display())]))?;
    check_compatible(r, &g)?;
    let (l, h) = (g.search_space.lookback, g.search_space.horizon);
    let period = period.unwrap_or(24.min(l));
    if period == 0 || period > l {
        return Err(CliError::Invalid(vec![format!("--period must lie in 1..={l}")]));
    }
    let mut net = Network::<f32>::from_genotype(&g, 0)?;
    for (name, t) in ck.section("params") {
        let id = net.store.id(name).ok_or_else(|| CliError::Runtime(format!("{}: unknown parameter {name:?}", model.display())))?;
        net.store.set_value(id, t.clone()).map_err(|e| CliError::Runtime(format!("{}: {e}", model.display())))?;
    }
    let data = FinalData::new(&r.data, r.split, l, h)?;
    let test = data.windows(data.test.clone(), l, h, 1)?;
    let m = evaluate(&net, &test, r.cfg.train.batch_size)?;
    let b = naive_baselines(&test, period)?;
    let rep = EvalReport {
        model: model.to_path_buf(),
        horizon: h,
        test: m,
        repeat_last: b.repeat_last,
        seasonal_naive: b.seasonal_naive,
        period,
    };
    if as_json {
        println!("{}", serde_json::to_string_pretty(&rep).expect("serializes"));
    } else {
        println!("horizon {h}, {} test windows", test.len());
        println!("{:<16} {:>12} {:>12}", "", "mse", "mae");
        for (name, x) in [("model", &rep.test), ("repeat-last", &rep.repeat_last), ("seasonal-naive", &rep.seasonal_naive)] {
            println!("{name:<16} {:>12.6} {:>12.6}", x.mse, x.mae);
        }
    }
    Ok(rep)
}

pub fn profile_cmd(g: &Genotype, b: usize, l: usize, h: usize, reps: usize, as_json: bool) -> Result<(), CliError> {
    if b == 0 || l == 0 || h == 0 {
        return Err(CliError::Invalid(vec!["--batch, --lookback and --horizon must be positive".into()]));
    }
    let gh = at_geometry(g, l, h);
    let net = Network::<f32>::from_genotype(&gh, 0)?;
    let p = profile(&net, b, reps)?;
    if as_json {
        println!("{}", serde_json::to_string_pretty(&p).expect("serializes"));
    } else {
        println!("parameters        {}", p.params);
        println!("forward           {:.3} ms (median of {})", p.forward_ms, p.repetitions);
        println!("forward+backward  {:.3} ms", p.forward_backward_ms);
        println!("peak memory       {:.2} MiB", p.peak_bytes as f64 / (1024.0 * 1024.0));
        println!("geometry          B={} L={} H={} N={}", p.batch, p.lookback, p.horizon, p.n_targets);
    }
    Ok(())
}

pub fn show(g: &Genotype, dot: Option<&Path>) -> Result<(), CliError> {
    print!("{}", g.describe());
    if let Some(p) = dot {
        write(p, &g.to_dot())?;
        println!("graph written to {}", p.display());
    }
    Ok(())
}
