use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use pbm_core::bnn::{predict_dataset, program_machine, PredictMode, TrainState};
use pbm_core::calibration::kernel_sweep;
use pbm_core::data::{holdout_class, Dataset};
use pbm_core::uncertainty::{
    disentangle_scatter, mutual_information, optimal_threshold, reject_and_score, roc_auroc,
    scores, PredictionEnsemble, UncertaintyScores,
};
use pbm_core::RandomStream;
use serde::Serialize;

use crate::config::{output_dir, write_json, Common, RunConfig};
use crate::{CliError, Mode};

#[derive(clap::Args)]
pub struct CalibrateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, default_value_t = 25)]
    pub kernels: usize,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn calibrate(a: CalibrateArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::resolve(&a.common, "calibrate")?;
    cfg.note("kernels", a.kernels);
    let out = output_dir(&a.out)?;
    cfg.archive(&out)?;
    let sweep = kernel_sweep(
        a.kernels,
        &cfg.photonic,
        &cfg.calibration,
        &RandomStream::new(cfg.seed, 0),
    )?;
    sweep.write_csv(&out.join("sweep.csv"))?;
    sweep.write_report(&out.join("report.json"))?;
    for w in &sweep.report.warnings {
        eprintln!("warning: {w}");
    }
    let r = &sweep.report;
    println!(
        "{}/{} kernels converged, eps_mu {:.4}, eps_sigma {:.4}",
        r.converged, r.n_kernels, r.eps_mu, r.eps_sigma
    );
    Ok(())
}

#[derive(clap::Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Dataset directory holding `<split>-images*` and `<split>-labels*`.
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, default_value = "train")]
    pub split: String,
    /// Uses only the first N samples.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Drops this class from training.
    #[arg(long)]
    pub holdout: Option<u16>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Continues from a checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Converts a core error and names the file it concerns.
fn at(path: &Path) -> impl FnOnce(pbm_core::Error) -> CliError + '_ {
    move |e| match CliError::from(e) {
        CliError::Io(m) => CliError::Io(format!("{}: {m}", path.display())),
        CliError::Usage(m) => CliError::Usage(format!("{}: {m}", path.display())),
        CliError::Invariant(m) => CliError::Invariant(format!("{}: {m}", path.display())),
    }
}

fn load(dir: &Path, split: &str) -> Result<Dataset, CliError> {
    Dataset::load(dir, split).map_err(|e| CliError::Io(format!("{} ({split}): {e}", dir.display())))
}

pub fn train(a: TrainArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::resolve(&a.common, "train")?;
    cfg.note_path("dataset", &a.dataset);
    cfg.note("split", &a.split);
    let mut data = load(&a.dataset, &a.split)?;
    if let Some(l) = a.holdout {
        cfg.note("holdout", l);
        data = holdout_class(&data, l)?.0;
    }
    if let Some(n) = a.limit {
        cfg.note("limit", n);
        data = data.range(0, n);
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    cfg.network.input_shape = [data.height, data.width, data.channels];
    cfg.network.classes = data.classes();

    let mut state = match &a.resume {
        Some(p) => {
            cfg.note_path("resume", p);
            let mut s = TrainState::load(p).map_err(at(p))?;
            if s.net.cfg.input_shape != cfg.network.input_shape
                || s.net.cfg.classes != cfg.network.classes
            {
                return Err(CliError::Usage(format!(
                    "checkpoint expects {:?} inputs and {} classes, dataset has {:?} and {}",
                    s.net.cfg.input_shape,
                    s.net.cfg.classes,
                    cfg.network.input_shape,
                    cfg.network.classes
                )));
            }
            s.train.epochs = cfg.train.epochs;
            cfg.network = s.net.cfg.clone();
            s
        }
        None => TrainState::new(cfg.network.clone(), cfg.train.clone())?,
    };
    let out = output_dir(&a.out)?;
    cfg.archive(&out)?;
    let ckpt = out.join("checkpoint.json");
    while state.epoch < state.train.epochs {
        let m = state.train_epoch(&data)?;
        state.save(&ckpt)?;
        eprintln!(
            "epoch {}: loss {:.4} ce {:.4} kl {:.2} acc {:.4}",
            m.epoch, m.loss, m.cross_entropy, m.kl, m.accuracy
        );
    }
    state.save(&ckpt)?;
    let mut w = csv::Writer::from_path(out.join("loss.csv")).map_err(csv_error)?;
    for m in &state.metrics {
        w.serialize(m).map_err(csv_error)?;
    }
    w.flush().map_err(|e| CliError::Io(e.to_string()))?;
    Ok(())
}

fn csv_error(e: csv::Error) -> CliError {
    CliError::Io(e.to_string())
}

#[derive(clap::Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// In-domain dataset directory; its test split is scored and the
    /// rejection threshold is tuned on a slice of its train split.
    #[arg(long)]
    pub id: PathBuf,
    #[arg(long)]
    pub ood: Option<PathBuf>,
    #[arg(long)]
    pub ambiguous: Option<PathBuf>,
    /// Treats this class of the ID test set as out of domain.
    #[arg(long)]
    pub holdout: Option<u16>,
    #[arg(long, value_enum, default_value_t = Mode::Photonic)]
    pub mode: Mode,
    /// Ensemble size.
    #[arg(long)]
    pub samples: Option<usize>,
    /// Scores at most N samples per set, spread evenly.
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long, default_value_t = 10_000)]
    pub val_start: usize,
    #[arg(long, default_value_t = 1000)]
    pub val_count: usize,
    #[arg(long)]
    pub out: PathBuf,
}

/// `k` indices spread evenly over `0..len`.
fn spread(len: usize, k: Option<usize>) -> Vec<usize> {
    let k = k.unwrap_or(len).min(len);
    (0..k).map(|i| i * len / k).collect()
}

fn labels(d: &Dataset, idx: &[usize]) -> Vec<usize> {
    idx.iter().map(|&i| d.labels[i] as usize).collect()
}

#[derive(Serialize)]
struct SetSummary {
    samples: usize,
    mean_mi: f64,
    mean_se: f64,
    rejected_fraction: f64,
}

#[derive(Serialize)]
struct Metrics {
    mode: Mode,
    ensemble_size: usize,
    accuracy: f64,
    sets: BTreeMap<String, SetSummary>,
}

#[derive(Serialize)]
struct ThresholdReport {
    threshold: f64,
    tuned_on: String,
    grid: usize,
    base_accuracy: f64,
    retained_accuracy: Option<f64>,
    rejection_rate: f64,
}

fn pick(s: &UncertaintyScores, score: &str) -> f64 {
    match score {
        "mi" => s.mi,
        "se" => s.se,
        _ => s.h,
    }
}

/// Writes `metrics.json`, `threshold.json`, `confusion.csv`, `scatter.csv`,
/// `auroc.json` and one `roc_<set>_<score>.csv` per non-ID set and score.
/// `roc.csv` is the MI curve of the first such set (held-out class, then
/// `--ood`, then `--ambiguous`).
pub fn eval(a: EvalArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::resolve(&a.common, "eval")?;
    if let Some(n) = a.samples {
        cfg.eval.samples = n;
    }
    cfg.note_path("checkpoint", &a.checkpoint);
    cfg.note_path("id", &a.id);
    cfg.note("mode", a.mode.name());
    let state = TrainState::load(&a.checkpoint).map_err(at(&a.checkpoint))?;
    let net = &state.net;
    cfg.network = net.cfg.clone();
    let norm = (state.train.norm_mean, state.train.norm_std);

    let mut id = load(&a.id, "test")?;
    let mut others: Vec<(String, Dataset)> = Vec::new();
    if let Some(l) = a.holdout {
        cfg.note("holdout", l);
        let (kept, held) = holdout_class(&id, l)?;
        id = kept;
        others.push((format!("holdout-{l}"), held));
    }
    for (key, dir) in [("ood", &a.ood), ("ambiguous", &a.ambiguous)] {
        if let Some(dir) = dir {
            cfg.note_path(key, dir);
            others.push((key.to_string(), load(dir, "test")?));
        }
    }
    if id.classes() != net.cfg.classes {
        return Err(CliError::Usage(format!(
            "checkpoint has {} classes, {} has {}",
            net.cfg.classes,
            a.id.display(),
            id.classes()
        )));
    }
    let val = match Dataset::load(&a.id, "train") {
        Ok(train) => {
            let train = match a.holdout {
                Some(l) => holdout_class(&train, l)?.0,
                None => train,
            };
            let v = train.range(a.val_start, a.val_start + a.val_count);
            cfg.note(
                "threshold_split",
                format!("train[{}..{}]", a.val_start, a.val_start + v.len()),
            );
            (!v.is_empty()).then_some(v)
        }
        Err(_) => None,
    };
    if let Some(n) = a.limit {
        cfg.note("limit", n);
    }

    let out = output_dir(&a.out)?;
    cfg.archive(&out)?;
    let rng = RandomStream::new(cfg.seed, 0);
    let machine = match a.mode {
        Mode::Surrogate => None,
        Mode::Photonic => {
            let (m, report) = program_machine(net, &cfg.photonic, &cfg.calibration, &rng.fork(0))?;
            for w in report.warnings.iter().take(5) {
                eprintln!("warning: {w}");
            }
            if report.warnings.len() > 5 {
                eprintln!(
                    "warning: {} more in calibration.json",
                    report.warnings.len() - 5
                );
            }
            eprintln!(
                "calibrated {}/{} kernels, {} taps projected into the measurable envelope",
                report.converged, report.kernels, report.projected_taps
            );
            write_json(&out.join("calibration.json"), &report)?;
            Some(m)
        }
    };
    let mode = match &machine {
        Some(m) => PredictMode::Photonic(m),
        None => PredictMode::Surrogate,
    };
    let n = cfg.eval.samples;
    let predict = |d: &Dataset, idx: &[usize], salt: u64| {
        predict_dataset(net, d, idx, n, &mode, norm, &rng.fork(salt))
    };

    let id_idx = spread(id.len(), a.limit);
    let id_ens = predict(&id, &id_idx, 1)?;
    let id_labels = labels(&id, &id_idx);
    let (threshold, tuned_on) = match &val {
        Some(v) => {
            let idx: Vec<usize> = (0..v.len()).collect();
            let ens = predict(v, &idx, 2)?;
            let t = optimal_threshold(&ens, &labels(v, &idx), cfg.eval.threshold_grid)?;
            (t, cfg.inputs["threshold_split"].clone())
        }
        None => {
            eprintln!(
                "warning: no training split next to the ID test set, tuning the threshold on test"
            );
            let t = optimal_threshold(&id_ens, &id_labels, cfg.eval.threshold_grid)?;
            (t, "test".to_string())
        }
    };
    let outcome = reject_and_score(&id_ens, &id_labels, threshold)?;
    outcome.confusion.write_csv(&out.join("confusion.csv"))?;
    write_json(
        &out.join("threshold.json"),
        &ThresholdReport {
            threshold,
            tuned_on,
            grid: cfg.eval.threshold_grid,
            base_accuracy: outcome.base_accuracy,
            retained_accuracy: outcome.retained_accuracy,
            rejection_rate: outcome.rejection_rate,
        },
    )?;

    let mut sets: Vec<(String, Vec<PredictionEnsemble>)> = vec![("id".into(), id_ens)];
    for (i, (name, d)) in others.iter().enumerate() {
        let idx = spread(d.len(), a.limit);
        sets.push((name.clone(), predict(d, &idx, 3 + i as u64)?));
    }
    let summarize = |ens: &[PredictionEnsemble]| {
        let s: Vec<_> = ens.iter().map(scores).collect();
        let k = ens.len().max(1) as f64;
        SetSummary {
            samples: ens.len(),
            mean_mi: s.iter().map(|x| x.mi).sum::<f64>() / k,
            mean_se: s.iter().map(|x| x.se).sum::<f64>() / k,
            rejected_fraction: ens
                .iter()
                .filter(|e| mutual_information(e) > threshold)
                .count() as f64
                / k,
        }
    };

    let mut auroc: BTreeMap<String, BTreeMap<&str, f64>> = BTreeMap::new();
    let id_scores: Vec<_> = sets[0].1.iter().map(scores).collect();
    for (name, ens) in &sets[1..] {
        let s: Vec<_> = ens.iter().map(scores).collect();
        let mut per = BTreeMap::new();
        for score in ["mi", "se", "h"] {
            let pos: Vec<f64> = s.iter().map(|x| pick(x, score)).collect();
            let neg: Vec<f64> = id_scores.iter().map(|x| pick(x, score)).collect();
            let roc = roc_auroc(&pos, &neg)?;
            per.insert(score, roc.auroc);
            roc.write_csv(&out.join(format!("roc_{name}_{score}.csv")))?;
            if score == "mi" && auroc.is_empty() {
                roc.write_csv(&out.join("roc.csv"))?;
            }
        }
        auroc.insert(name.clone(), per);
    }
    write_json(&out.join("auroc.json"), &auroc)?;

    let named: Vec<(&str, &[PredictionEnsemble])> = sets
        .iter()
        .map(|(k, v)| (k.as_str(), v.as_slice()))
        .collect();
    disentangle_scatter(&named, &out.join("scatter.csv"))?;
    let metrics = Metrics {
        mode: a.mode,
        ensemble_size: n,
        accuracy: outcome.base_accuracy,
        sets: sets
            .iter()
            .map(|(k, v)| (k.clone(), summarize(v)))
            .collect(),
    };
    write_json(&out.join("metrics.json"), &metrics)?;

    println!(
        "accuracy {:.4}, retained {} at MI threshold {:.5} (rejects {:.1}%)",
        outcome.base_accuracy,
        outcome
            .retained_accuracy
            .map_or("n/a".to_string(), |r| format!("{r:.4}")),
        threshold,
        100.0 * outcome.rejection_rate
    );
    for (name, per) in &auroc {
        println!(
            "{name}: AUROC mi {:.4}, se {:.4}, h {:.4}",
            per["mi"], per["se"], per["h"]
        );
    }
    Ok(())
}
