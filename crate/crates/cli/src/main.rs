//! `opcal`: command-line front end for operational confidence calibration.

use std::fmt::Write as _;
use std::fs;
use std::io::{self, Write as _};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use opcal_core::baselines::{BaselineKind, BaselineModel};
use opcal_core::calibrator::{trace_csv, CalibratorConfig, DatasetOracle, DEFAULT_LAMBDA};
use opcal_core::clustering::default_cluster_count;
use opcal_core::config::Sidecar;
use opcal_core::metrics::DEFAULT_BINS;
use opcal_core::simulator::{
    generate_scenario, run_sweep, split_labeled, Method, ScenarioConfig, SweepConfig, SweepResult,
};
use opcal_core::{calibrate, CalibrationReport, CostModel, Dataset, Error};

#[derive(Debug, Parser)]
#[command(name = "opcal", version, about = "Operational confidence calibration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check a dataset file's format, dimensions and label coverage.
    Validate {
        #[arg(long)]
        input: PathBuf,
    },
    /// Run active GP calibration and write calibrated confidences.
    Calibrate(CommonArgs),
    /// Report Brier decomposition, LCE and high-confidence counts.
    Evaluate {
        #[command(flatten)]
        common: CommonArgs,
        /// CSV produced by `calibrate` or `baseline`; default is the uncalibrated model.
        #[arg(long)]
        calibrated: Option<PathBuf>,
    },
    /// Fit a conventional calibrator on the labeled records.
    Baseline(CommonArgs),
    /// Run a labeling-budget sweep on a synthetic scenario or a labeled dataset.
    Simulate {
        #[command(flatten)]
        common: CommonArgs,
        /// Comma-separated, strictly increasing.
        #[arg(long, value_delimiter = ',')]
        budgets: Option<Vec<usize>>,
        /// Number of scenario seeds to average, starting at `--seed`.
        #[arg(long, default_value_t = 1)]
        repeats: usize,
    },
}

#[derive(Debug, Args)]
struct CommonArgs {
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    clusters: Option<usize>,
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long, conflicts_with = "lambda")]
    loss_u: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    bins: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Method name; repeatable or comma-separated for `simulate`.
    #[arg(long, value_delimiter = ',')]
    calibrator: Vec<String>,
    /// Sidecar `key = value` defaults; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
}

/// Flags merged over the sidecar.
struct Settings {
    clusters: Option<usize>,
    budget: Option<usize>,
    cost: Option<CostModel>,
    bins: usize,
    seed: u64,
}

impl CommonArgs {
    fn settings(&self) -> Result<Settings, Error> {
        let sidecar = match &self.config {
            Some(path) => Sidecar::load(path)?,
            None => Sidecar::default(),
        };
        let cost = match (self.loss_u, self.lambda) {
            (Some(u), _) => Some(CostModel::from_loss(u)?),
            (_, Some(l)) => Some(CostModel::from_lambda(l)?),
            _ => match (sidecar.loss_u, sidecar.lambda) {
                (Some(u), _) => Some(CostModel::from_loss(u)?),
                (_, Some(l)) => Some(CostModel::from_lambda(l)?),
                _ => None,
            },
        };
        let bins = self.bins.or(sidecar.bins).unwrap_or(DEFAULT_BINS);
        if bins == 0 {
            return Err(Error::InvalidParameter("bins must be at least 1".into()));
        }
        Ok(Settings {
            clusters: self.clusters.or(sidecar.clusters),
            budget: self.budget.or(sidecar.budget),
            cost,
            bins,
            seed: self.seed.or(sidecar.seed).unwrap_or(0),
        })
    }

    fn input(&self) -> Result<&Path, Error> {
        self.input
            .as_deref()
            .ok_or_else(|| Error::InvalidParameter("--input is required".into()))
    }

    fn output_dir(&self) -> Result<&Path, Error> {
        self.output_dir
            .as_deref()
            .ok_or_else(|| Error::InvalidParameter("--output-dir is required".into()))
    }
}

impl Settings {
    fn cost_or_default(&self) -> CostModel {
        self.cost
            .unwrap_or_else(|| CostModel::from_lambda(DEFAULT_LAMBDA).expect("valid default"))
    }
}

/// Writes `name` under `dir`, refusing to overwrite any of the inputs.
fn write_output(dir: &Path, name: &str, contents: &str, inputs: &[&Path]) -> Result<(), Error> {
    fs::create_dir_all(dir)?;
    let path = dir.join(name);
    if let Ok(target) = path.canonicalize() {
        for input in inputs {
            if input.canonicalize().is_ok_and(|p| p == target) {
                return Err(Error::InvalidParameter(format!(
                    "output {} would overwrite an input file",
                    path.display()
                )));
            }
        }
    }
    fs::write(&path, contents)?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

/// Prints to stdout; a closed pipe (e.g. `| head`) is not an error.
fn emit(text: &str) -> Result<(), Error> {
    match io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() == io::ErrorKind::BrokenPipe => Ok(()),
        other => Ok(other?),
    }
}

fn calibrated_csv(dataset: &Dataset, rows: impl Iterator<Item = (usize, f64)>) -> String {
    let mut s = String::from("id,predicted_class,original_confidence,calibrated_confidence\n");
    for ((record, outputs), (class, conf)) in dataset.records().iter().zip(dataset.outputs()).zip(rows) {
        writeln!(s, "{},{class},{},{conf}", record.id, outputs.original_confidence).unwrap();
    }
    s
}

fn cmd_validate(input: &Path) -> Result<(), Error> {
    let ds = Dataset::read_csv(input)?;
    emit(&format!(
        "records = {}\nnum_classes = {}\nfeature_dim = {}\nlabeled = {}\nunlabeled = {}\n",
        ds.len(),
        ds.num_classes(),
        ds.feature_dim(),
        ds.labeled_count(),
        ds.len() - ds.labeled_count()
    ))
}

fn cmd_calibrate(args: &CommonArgs) -> Result<(), Error> {
    let input = args.input()?;
    let out = args.output_dir()?;
    let settings = args.settings()?;
    let ds = Dataset::read_csv(input)?;
    let clusters = settings
        .clusters
        .unwrap_or_else(|| default_cluster_count(ds.len()));
    let budget = settings
        .budget
        .unwrap_or_else(|| clusters.max(ds.len() / 10));
    let mut config = CalibratorConfig::new(clusters, budget).with_seed(settings.seed);
    if let Some(cost) = settings.cost {
        config = config.with_cost(cost);
    }
    let mut oracle = DatasetOracle::new(&ds);
    let state = calibrate(&ds, &config, &mut oracle)?;
    let confidences = (0..ds.len())
        .map(|p| state.calibrated_confidence(&ds, p))
        .collect::<Result<Vec<_>, _>>()?;
    let classes = ds.predicted_classes();
    let csv = calibrated_csv(&ds, classes.into_iter().zip(confidences));

    write_output(out, "calibrated.csv", &csv, &[input])?;
    write_output(out, "trace.csv", &trace_csv(state.trace()), &[input])?;
    write_output(out, "state.txt", &state.to_kv(&ds), &[input])?;
    eprintln!(
        "labels used: {} of budget {budget}, {clusters} clusters",
        state.labels_used()
    );
    Ok(())
}

/// `id -> (predicted_class, calibrated_confidence)` from a calibrated CSV.
fn read_calibrated(path: &Path) -> Result<Vec<(u64, usize, f64)>, Error> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().ok_or(Error::EmptyDataset)?;
    let cols: Vec<&str> = header.split(',').collect();
    let find = |name: &str| {
        cols.iter()
            .position(|c| *c == name)
            .ok_or_else(|| Error::MalformedHeader(format!("missing column `{name}`")))
    };
    let (id_col, class_col, conf_col) = (find("id")?, find("predicted_class")?, find("calibrated_confidence")?);
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, line)| {
            let fields: Vec<&str> = line.split(',').collect();
            let field = |col: usize, name: &str| -> Result<&str, Error> {
                fields.get(col).copied().ok_or(Error::DimensionMismatch {
                    row: i + 1,
                    expected: cols.len(),
                    found: fields.len(),
                })
                .and_then(|v| if v.is_empty() {
                    Err(Error::ParseField { row: i + 1, column: name.into(), value: v.into() })
                } else {
                    Ok(v)
                })
            };
            let parse_err = |name: &str, v: &str| Error::ParseField {
                row: i + 1,
                column: name.into(),
                value: v.into(),
            };
            let id = field(id_col, "id")?;
            let class = field(class_col, "predicted_class")?;
            let conf = field(conf_col, "calibrated_confidence")?;
            let conf_v: f64 = conf.parse().map_err(|_| parse_err("calibrated_confidence", conf))?;
            if !(0.0..=1.0).contains(&conf_v) {
                return Err(parse_err("calibrated_confidence", conf));
            }
            Ok((
                id.parse().map_err(|_| parse_err("id", id))?,
                class.parse().map_err(|_| parse_err("predicted_class", class))?,
                conf_v,
            ))
        })
        .collect()
}

fn cmd_evaluate(args: &CommonArgs, calibrated: Option<&Path>) -> Result<(), Error> {
    let input = args.input()?;
    let settings = args.settings()?;
    let ds = Dataset::read_csv(input)?;
    let labels: Vec<usize> = ds
        .records()
        .iter()
        .enumerate()
        .map(|(i, r)| r.label.ok_or(Error::Unlabeled(i + 1)))
        .collect::<Result<_, _>>()?;

    let (confidences, correct): (Vec<f64>, Vec<bool>) = match calibrated {
        None => (ds.original_confidences(), ds.correctness()?),
        Some(path) => {
            let rows = read_calibrated(path)?;
            if rows.len() != ds.len() {
                return Err(Error::LengthMismatch {
                    left: ds.len(),
                    right: rows.len(),
                });
            }
            let mut conf = vec![f64::NAN; ds.len()];
            let mut hit = vec![false; ds.len()];
            for (id, class, c) in rows {
                let pos = ds.position_of(id).ok_or(Error::UnknownId(id))?;
                conf[pos] = c;
                hit[pos] = class == labels[pos];
            }
            if let Some(pos) = conf.iter().position(|c| c.is_nan()) {
                return Err(Error::InvalidParameter(format!(
                    "record {} missing from calibrated file",
                    ds.record(pos).id
                )));
            }
            (conf, hit)
        }
    };

    let report =
        CalibrationReport::evaluate(&confidences, &correct, &settings.cost_or_default(), settings.bins)?;
    emit(&format!(
        "{}{}\n{}\n",
        report.to_kv(),
        CalibrationReport::CSV_HEADER,
        report.csv_row()
    ))?;
    if let Some(out) = &args.output_dir {
        let mut inputs = vec![input];
        inputs.extend(calibrated);
        write_output(out, "report.txt", &report.to_kv(), &inputs)?;
        let csv = format!("{}\n{}\n", CalibrationReport::CSV_HEADER, report.csv_row());
        write_output(out, "report.csv", &csv, &inputs)?;
    }
    Ok(())
}

fn baseline_names() -> String {
    BaselineKind::ALL
        .iter()
        .map(|k| k.name())
        .collect::<Vec<_>>()
        .join(", ")
}

fn cmd_baseline(args: &CommonArgs) -> Result<(), Error> {
    let name = match args.calibrator.as_slice() {
        [one] => one.as_str(),
        [] => {
            return Err(Error::InvalidParameter(format!(
                "--calibrator is required; valid names: {}",
                baseline_names()
            )))
        }
        _ => return Err(Error::InvalidParameter("give exactly one --calibrator".into())),
    };
    let kind = BaselineKind::from_name(name).ok_or_else(|| {
        Error::InvalidParameter(format!(
            "unknown calibrator `{name}`; valid names: {}",
            baseline_names()
        ))
    })?;
    let input = args.input()?;
    let out = args.output_dir()?;
    let ds = Dataset::read_csv(input)?;
    let model = BaselineModel::fit(kind, &ds)?;
    let (preds, changed) = model.apply_dataset(&ds)?;
    let csv = calibrated_csv(&ds, preds.iter().map(|p| (p.predicted_class, p.confidence)));
    write_output(out, "model.txt", &model.to_kv(), &[input])?;
    write_output(out, "calibrated.csv", &csv, &[input])?;
    emit(&format!(
        "calibrator = {name}\nfitted_on = {}\nchanged_predictions = {changed}\n",
        ds.labeled_count()
    ))
}

fn cmd_simulate(args: &CommonArgs, budgets: Option<&[usize]>, repeats: usize) -> Result<(), Error> {
    let out = args.output_dir()?;
    let settings = args.settings()?;
    let mut sweep = SweepConfig::reference(settings.seed);
    if let Some(b) = budgets {
        sweep.budgets = b.to_vec();
    }
    if !args.calibrator.is_empty() {
        sweep.methods = args
            .calibrator
            .iter()
            .map(|name| {
                Method::from_name(name).ok_or_else(|| {
                    Error::InvalidParameter(format!(
                        "unknown calibrator `{name}`; valid names: gpr, {}",
                        baseline_names()
                    ))
                })
            })
            .collect::<Result<_, _>>()?;
    }
    if let Some(cost) = settings.cost {
        sweep.cost = cost;
    }
    sweep.clusters = settings.clusters;
    sweep.bins = settings.bins;
    if repeats == 0 {
        return Err(Error::InvalidParameter("repeats must be at least 1".into()));
    }

    let result = match &args.input {
        Some(input) => {
            if repeats > 1 {
                return Err(Error::InvalidParameter(
                    "repeats apply only to generated scenarios".into(),
                ));
            }
            let ds = Dataset::read_csv(input)?;
            let mut split = split_labeled(&ds, ds.len() / 2)?;
            run_sweep(&split.calibration, &mut split.oracle, &split.test, &sweep)?
        }
        None => {
            let mut runs = Vec::with_capacity(repeats);
            for r in 0..repeats as u64 {
                let scenario = ScenarioConfig {
                    seed: settings.seed + r,
                    ..ScenarioConfig::reference()
                };
                let generated = generate_scenario(&scenario)?;
                if r == 0 {
                    eprintln!(
                        "scenario seed {}: origin accuracy {:.3}, operation accuracy {:.3}",
                        scenario.seed,
                        generated.origin_accuracy,
                        generated.operation_accuracy()
                    );
                    let mut csv = Vec::new();
                    generated.labeled_dataset().to_writer(&mut csv)?;
                    write_output(out, "scenario.csv", &String::from_utf8_lossy(&csv), &[])?;
                }
                let mut split = generated.split()?;
                sweep.seed = scenario.seed;
                runs.push(run_sweep(&split.calibration, &mut split.oracle, &split.test, &sweep)?);
            }
            if runs.len() == 1 {
                runs.pop().expect("one run")
            } else {
                SweepResult::average(&runs)?
            }
        }
    };
    let inputs: Vec<&Path> = args.input.as_deref().into_iter().collect();
    write_output(out, "sweep.csv", &result.to_csv(), &inputs)?;
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    match &cli.command {
        Command::Validate { input } => cmd_validate(input),
        Command::Calibrate(args) => cmd_calibrate(args),
        Command::Evaluate { common, calibrated } => cmd_evaluate(common, calibrated.as_deref()),
        Command::Baseline(args) => cmd_baseline(args),
        Command::Simulate {
            common,
            budgets,
            repeats,
        } => cmd_simulate(common, budgets.as_deref(), *repeats),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numerical() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
