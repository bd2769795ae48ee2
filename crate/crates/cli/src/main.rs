//! `embedscale` command-line interface.
//!
//! Results go to stdout (or `--out`), diagnostics to stderr. Exit status is
//! 0 on success, 1 when the input or computation is rejected and 2 on
//! command-line usage errors.

mod render;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{ArgGroup, Args, CommandFactory, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use embedscale::ingest::{load_runs, spearman_loss_vs_score, DataMeasure, FlopCheck, LoadOptions};
use embedscale::isoflop::{build_profiles, data_constrained_profile, frontier, optimal_size_fit, ProfileOptions};
use embedscale::recipe::{plan, plan_freeze, PlannerArtifacts};
use embedscale::scalinglaw::{fit, fit_per_method, InitGrid, Split};
use embedscale::synth::{generate, SynthGrid, SynthSpec};
use embedscale::{
    flop_cost, param_counts, tokens_for_budget, Budget, FineTuneMethod, FitConfig, FittedParams, Formula, MethodClass,
    ModelArch, Registry, RunSet,
};

use render::{Format, Output};

#[derive(Parser, Debug)]
#[command(name = "embedscale", version, about = "Compute-optimal planning for contrastive fine-tuning")]
struct Cli {
    /// Output format.
    #[arg(long, value_enum, global = true, default_value = "json")]
    format: Format,

    /// Architecture registry (JSON); defaults to the bundled Pythia and Gemma descriptors.
    #[arg(long, global = true, value_name = "FILE")]
    registry: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// FLOP cost of fine-tuning an architecture on a number of tokens.
    Flops {
        #[command(flatten)]
        target: Target,
        #[arg(long)]
        tokens: f64,
    },
    /// Tokens that exhaust a FLOP budget.
    Tokens {
        #[command(flatten)]
        target: Target,
        #[arg(long)]
        budget: f64,
    },
    /// Validate a run log and write it back as canonical JSON lines.
    Ingest {
        #[command(flatten)]
        runs: RunsArgs,
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Fit a parametric scaling law to a run log.
    #[command(group(ArgGroup::new("subset").args(["method", "per_method"])))]
    Fit {
        #[command(flatten)]
        runs: RunsArgs,
        #[arg(long, value_parser = parse_formula, default_value = "modified")]
        formula: Formula,
        /// Huber threshold on log residuals.
        #[arg(long, default_value_t = 1e-3)]
        delta: f64,
        #[arg(long, value_enum, default_value = "largest")]
        holdout: Holdout,
        /// Fit only runs of this method class.
        #[arg(long, value_parser = parse_class)]
        method: Option<MethodClass>,
        /// Fit each method class separately.
        #[arg(long)]
        per_method: bool,
        /// Initial-point grid (JSON with alpha, beta, irreducible_fraction, scale).
        #[arg(long, value_name = "FILE")]
        init_grid: Option<PathBuf>,
        #[arg(long)]
        max_iterations: Option<usize>,
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Evaluate fitted parameters at one point.
    Predict {
        /// Fitted parameters or a fit report.
        #[arg(long, value_name = "FILE")]
        params: PathBuf,
        /// Selects an entry of a per-method fit file.
        #[arg(long, value_parser = parse_class)]
        method: Option<MethodClass>,
        #[arg(long)]
        n: f64,
        #[arg(long)]
        d: f64,
        /// Trainable fraction; only the modified formula uses it.
        #[arg(long, default_value_t = 1.0)]
        s: f64,
    },
    /// IsoFLOP profile of one method, or the data-constrained view.
    #[command(group(ArgGroup::new("view").args(["method", "data_constrained"]).required(true)))]
    Isoflop {
        #[command(flatten)]
        runs: RunsArgs,
        #[arg(long, value_parser = parse_class)]
        method: Option<MethodClass>,
        /// Group by token count instead of budget.
        #[arg(long)]
        data_constrained: bool,
        #[command(flatten)]
        grouping: Grouping,
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Per-method frontier lines and their crossovers.
    Frontier {
        #[command(flatten)]
        runs: RunsArgs,
        #[command(flatten)]
        grouping: Grouping,
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
        /// Also write planner artifacts derived from the runs.
        #[arg(long, value_name = "FILE")]
        artifacts_out: Option<PathBuf>,
    },
    /// Training plan for a FLOP budget.
    Plan {
        #[arg(long)]
        budget: f64,
        /// Planner artifacts (JSON); defaults to the built-in frontier.
        #[arg(long, value_name = "FILE")]
        artifacts: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "standard")]
        mode: PlanMode,
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Spearman correlation between final loss and benchmark score.
    Corr {
        #[command(flatten)]
        runs: RunsArgs,
    },
    /// Generate a synthetic run log from a known law.
    Synth {
        /// Truth parameters or a fit report.
        #[arg(long, value_name = "FILE")]
        truth: PathBuf,
        /// Per-class truth override, as CLASS=FILE.
        #[arg(long, value_name = "CLASS=FILE")]
        method_truth: Vec<String>,
        /// Budget, model and method grid (JSON).
        #[arg(long, value_name = "FILE")]
        grid: Option<PathBuf>,
        /// Standard deviation of the multiplicative log-noise.
        #[arg(long, default_value_t = 0.0)]
        sigma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct Target {
    /// Registry name or architecture JSON file.
    #[arg(long)]
    arch: String,
    /// full | freeze:<k> | lora:<rank> | bias
    #[arg(long, value_parser = parse_method)]
    method: FineTuneMethod,
}

#[derive(Args, Debug)]
struct RunsArgs {
    /// Run log (CSV or JSON lines).
    #[arg(long, value_name = "FILE")]
    runs: PathBuf,
    #[arg(long, value_enum, default_value = "strict")]
    flop_check: FlopCheckArg,
    /// Source-to-canonical column names (JSON object).
    #[arg(long, value_name = "FILE")]
    column_map: Option<PathBuf>,
    /// Overrides each row's data measure.
    #[arg(long, value_enum)]
    data_measure: Option<DataMeasureArg>,
}

#[derive(Args, Debug)]
struct Grouping {
    /// Relative FLOP tolerance for grouping runs into one budget.
    #[arg(long, default_value_t = 0.05)]
    tolerance: f64,
    /// Known budget levels, comma separated.
    #[arg(long, value_delimiter = ',')]
    budgets: Option<Vec<f64>>,
}

impl Grouping {
    fn options(&self) -> ProfileOptions {
        ProfileOptions {
            grouping_tolerance: self.tolerance,
            nominal_budgets: self.budgets.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Holdout {
    Largest,
    None,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PlanMode {
    Standard,
    Freeze,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FlopCheckArg {
    Strict,
    Warn,
    Off,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum DataMeasureArg {
    Tokens,
    Steps,
}

fn parse_method(s: &str) -> Result<FineTuneMethod, String> {
    s.parse().map_err(|e: embedscale::Error| e.to_string())
}

fn parse_class(s: &str) -> Result<MethodClass, String> {
    s.parse().map_err(|e: embedscale::Error| e.to_string())
}

fn parse_formula(s: &str) -> Result<Formula, String> {
    s.parse().map_err(|e: embedscale::Error| e.to_string())
}

fn registry(path: Option<&Path>) -> Result<Registry> {
    match path {
        Some(p) => Registry::from_json_file(p).with_context(|| format!("reading registry {}", p.display())),
        None => Ok(Registry::bundled()),
    }
}

fn resolve_arch(reg: &Registry, spec: &str) -> Result<ModelArch> {
    if let Some(a) = reg.get(spec) {
        return Ok(a.clone());
    }
    let path = Path::new(spec);
    if path.is_file() {
        return Ok(ModelArch::from_json_file(path)?);
    }
    Ok(reg.require(spec)?.clone())
}

fn load(args: &RunsArgs, reg: &Registry) -> Result<RunSet> {
    let mut opts = LoadOptions {
        registry: reg.clone(),
        flop_check: match args.flop_check {
            FlopCheckArg::Strict => FlopCheck::Strict,
            FlopCheckArg::Warn => FlopCheck::Warn,
            FlopCheckArg::Off => FlopCheck::Off,
        },
        data_measure: args.data_measure.map(|m| match m {
            DataMeasureArg::Tokens => DataMeasure::Tokens,
            DataMeasureArg::Steps => DataMeasure::Steps,
        }),
        ..LoadOptions::default()
    };
    if let Some(p) = &args.column_map {
        opts = opts.with_column_map_file(p)?;
    }
    let report = load_runs(&args.runs, &opts)?;
    for d in &report.rejected {
        eprintln!("rejected {}: {d}", args.runs.display());
    }
    for d in &report.warnings {
        eprintln!("warning {}: {d}", args.runs.display());
    }
    Ok(report.runs)
}

/// Accepts bare parameters or a fit report; `method` picks from a per-method map.
fn read_params(path: &Path, method: Option<MethodClass>) -> Result<FittedParams> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let v: Value = serde_json::from_str(&text)?;
    let v = match (v.get("formula").is_some(), method) {
        (true, _) => v,
        (false, Some(m)) => v
            .get(m.as_str())
            .cloned()
            .with_context(|| format!("{} has no entry for method `{m}`", path.display()))?,
        (false, None) => bail!("{} holds per-method fits; pass --method", path.display()),
    };
    let params: FittedParams = serde_json::from_value(json!({
        "formula": v.get("formula"),
        "coefficients": v.get("coefficients"),
    }))?;
    params.validate()?;
    Ok(params)
}

fn to_json<T: serde::Serialize>(v: &T) -> Result<Value> {
    Ok(serde_json::to_value(v)?)
}

fn run(cli: Cli) -> Result<Option<(Output, Option<PathBuf>)>> {
    let reg = registry(cli.registry.as_deref())?;
    let out = match cli.command {
        Command::Flops { target, tokens } => {
            let arch = resolve_arch(&reg, &target.arch)?;
            let counts = param_counts(&arch, &target.method)?;
            let flop = flop_cost(&counts, tokens)?;
            let mut v = to_json(&counts)?;
            v["arch"] = json!(arch.name);
            v["method"] = json!(target.method.to_string());
            v["tokens"] = json!(tokens);
            v["flop"] = json!(flop);
            (Output::new(v), None)
        }
        Command::Tokens { target, budget } => {
            let arch = resolve_arch(&reg, &target.arch)?;
            let counts = param_counts(&arch, &target.method)?;
            let tokens = tokens_for_budget(&counts, Budget::new(budget)?)?;
            let mut v = to_json(&counts)?;
            v["arch"] = json!(arch.name);
            v["method"] = json!(target.method.to_string());
            v["budget"] = json!(budget);
            v["tokens"] = json!(tokens);
            (Output::new(v), None)
        }
        Command::Ingest { runs, out } => {
            let set = load(&runs, &reg)?;
            let prov = set.provenance();
            let summary = json!({
                "records": set.len(),
                "method_classes": set.method_classes().iter().map(|c| c.as_str()).collect::<Vec<_>>(),
                "source_digest": prov.source_digest,
                "origin": prov.origin,
            });
            if let Some(p) = out {
                set.save_jsonl(&p)?;
            }
            (Output::new(summary), None)
        }
        Command::Fit {
            runs,
            formula,
            delta,
            holdout,
            method,
            per_method,
            init_grid,
            max_iterations,
            out,
        } => {
            let set = load(&runs, &reg)?;
            let mut cfg = FitConfig {
                huber_delta: delta,
                split: match holdout {
                    Holdout::Largest => Split::LargestModelHoldout,
                    Holdout::None => Split::None,
                },
                ..FitConfig::default()
            };
            if let Some(p) = init_grid {
                let text = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
                cfg.init_grid = serde_json::from_str::<InitGrid>(&text)?;
            }
            if let Some(m) = max_iterations {
                cfg.max_iterations = m;
            }
            let v = if per_method {
                let reports = fit_per_method(&set, formula, &cfg)?;
                for (class, r) in &reports {
                    r.warnings.iter().for_each(|w| eprintln!("warning [{class}]: {w}"));
                }
                to_json(&reports)?
            } else {
                let set = match method {
                    Some(m) => set.filter_class(m).with_context(|| format!("no runs of method `{m}`"))?,
                    None => {
                        if set.method_classes().len() > 1 {
                            eprintln!("note: pooling runs of several method classes into one fit");
                        }
                        set
                    }
                };
                let report = fit(&set, formula, &cfg)?;
                report.warnings.iter().for_each(|w| eprintln!("warning: {w}"));
                to_json(&report)?
            };
            (Output::new(v), out)
        }
        Command::Predict { params, method, n, d, s } => {
            let p = read_params(&params, method)?;
            let loss = p.predict(s, n, d)?;
            (Output::new(json!({ "n": n, "d": d, "s": s, "loss": loss })), None)
        }
        Command::Isoflop {
            runs,
            method,
            data_constrained,
            grouping,
            out,
        } => {
            let set = load(&runs, &reg)?;
            if data_constrained {
                let report = data_constrained_profile(&set, grouping.tolerance)?;
                let rows = report.groups.iter().map(to_json).collect::<Result<Vec<_>>>()?;
                (Output::with_rows(to_json(&report)?, rows), out)
            } else {
                let class = method.expect("clap requires --method or --data-constrained");
                let profile = build_profiles(&set, class, &grouping.options())?;
                for e in &profile.excluded {
                    eprintln!("excluded: {e}");
                }
                let mut v = to_json(&profile)?;
                match optimal_size_fit(&profile) {
                    Ok(f) => v["optimal_size_fit"] = to_json(&f)?,
                    Err(e) => eprintln!("note: no optimal-size fit: {e}"),
                }
                let rows = profile.points.iter().map(to_json).collect::<Result<Vec<_>>>()?;
                (Output::with_rows(v, rows), out)
            }
        }
        Command::Frontier {
            runs,
            grouping,
            out,
            artifacts_out,
        } => {
            let set = load(&runs, &reg)?;
            let opts = grouping.options();
            let profiles = set
                .method_classes()
                .into_iter()
                .map(|c| build_profiles(&set, c, &opts))
                .collect::<embedscale::Result<Vec<_>>>()?;
            let (front, notes) = frontier(&profiles)?;
            notes.iter().for_each(|n| eprintln!("note: {n}"));
            if let Some(p) = artifacts_out {
                let (art, notes) = PlannerArtifacts::from_runs(&set, &reg, &opts)?;
                notes.iter().for_each(|n| eprintln!("note: {n}"));
                write_file(&p, &(serde_json::to_string_pretty(&art)? + "\n"))?;
            }
            let rows = front
                .per_method_fits
                .iter()
                .map(|(c, f)| {
                    json!({
                        "method": c.as_str(),
                        "slope": f.slope,
                        "intercept": f.intercept,
                        "r_squared": f.r_squared,
                        "ln_budget_min": f.domain.map(|d| d[0]),
                        "ln_budget_max": f.domain.map(|d| d[1]),
                    })
                })
                .collect();
            (Output::with_rows(to_json(&front)?, rows), out)
        }
        Command::Plan {
            budget,
            artifacts,
            mode,
            out,
        } => {
            let art = match artifacts {
                Some(p) => {
                    let text = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
                    PlannerArtifacts::from_json_str(&text)?
                }
                None => PlannerArtifacts::defaults(),
            };
            let budget = Budget::new(budget)?;
            let p = match mode {
                PlanMode::Standard => plan(budget, &art)?,
                PlanMode::Freeze => plan_freeze(budget, &art)?,
            };
            if p.extrapolated {
                eprintln!("warning: size law extrapolated beyond its fitted budget range");
            }
            if p.hyper_fallback {
                eprintln!("note: no exact table entry for this size and budget; hyperparameter is a fallback");
            }
            (Output::new(to_json(&p)?), out)
        }
        Command::Corr { runs } => {
            let set = load(&runs, &reg)?;
            let n = set.iter().filter(|r| r.mteb_score.is_some()).count();
            let rho = spearman_loss_vs_score(&set)?;
            (Output::new(json!({ "spearman": rho, "n": n })), None)
        }
        Command::Synth {
            truth,
            method_truth,
            grid,
            sigma,
            seed,
            out,
        } => {
            if cli.format != Format::Json {
                Cli::command()
                    .error(clap::error::ErrorKind::ArgumentConflict, "synth writes JSON lines; --format must be json")
                    .exit();
            }
            let mut overrides = BTreeMap::new();
            for entry in &method_truth {
                let Some((class, file)) = entry.split_once('=') else {
                    Cli::command()
                        .error(clap::error::ErrorKind::ValueValidation, format!("--method-truth expects CLASS=FILE, got `{entry}`"))
                        .exit();
                };
                let class: MethodClass = class.parse()?;
                overrides.insert(class, read_params(Path::new(file), Some(class))?);
            }
            let grid = match grid {
                Some(p) => {
                    let text = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
                    serde_json::from_str::<SynthGrid>(&text)?
                }
                None => SynthGrid::default(),
            };
            let spec = SynthSpec {
                truth: read_params(&truth, None)?,
                method_truth: overrides,
                grid,
                noise_sigma: sigma,
                seed,
            };
            let generated = generate(&spec, &reg)?;
            generated.warnings.iter().for_each(|w| eprintln!("warning: {w}"));
            let text = generated.runs.to_jsonl();
            match out {
                Some(p) => write_file(&p, &text)?,
                None => print!("{text}"),
            }
            return Ok(None);
        }
    };
    Ok(Some(out))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let format = cli.format;
    let result = run(cli).and_then(|out| {
        if let Some((output, path)) = out {
            let text = output.render(format)?;
            match path {
                Some(p) => write_file(&p, &text)?,
                None => print!("{text}"),
            }
        }
        Ok(())
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
