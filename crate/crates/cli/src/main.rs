use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{anyhow, Context as _};
use clap::{Args, Parser, Subcommand, ValueEnum};
use num_rational::Ratio;
use serde_json::{json, Value};

use roivqa::compositor::AlphaPolicy;
use roivqa::corpus::{load_dataset_with, parse_fraction, save_dataset, split_dataset, validate_manifest, LoadOptions, SplitSpec};
use roivqa::fusion::{grad_check, FusionDims};
use roivqa::harness::{run_eval, write_run, AdapterKind, HarnessError, RunConfig};
use roivqa::roiqa::{reconstruct_dataset, GenerationConfig, RoiType};

const EXIT_VALIDATION: u8 = 1;
const EXIT_ABORTED: u8 = 2;
const EXIT_USAGE: u8 = 3;

const EFFECTIVE_CONFIG_FILE: &str = "effective_config.json";

/// Region-of-interest VQA data reconstruction, compositing and evaluation.
///
/// Exit codes: 0 success, 1 validation error, 2 aborted run, 3 usage error.
/// Every flag can also be set through the `ROIVQA_*` variable shown next to it.
#[derive(Debug, Parser)]
#[command(name = "roivqa", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
struct Global {
    /// Seed for every random choice; required by reconstruct, split and eval.
    #[arg(long, global = true, env = "ROIVQA_SEED")]
    seed: Option<u64>,

    /// Reject unknown manifest fields.
    #[arg(long, global = true, env = "ROIVQA_STRICT", default_value_t = true, num_args = 0..=1,
          default_missing_value = "true", action = clap::ArgAction::Set)]
    strict: bool,

    /// Directory receiving every output file.
    #[arg(long, global = true, env = "ROIVQA_OUT_DIR", default_value = "out")]
    out_dir: PathBuf,

    /// One of error, warn, info, debug, trace.
    #[arg(long, global = true, env = "ROIVQA_LOG_LEVEL", default_value = "warn")]
    log_level: log::LevelFilter,

    /// Worker threads; defaults to the number of available processors.
    #[arg(long, global = true, env = "ROIVQA_WORKERS")]
    workers: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check a manifest and print one diagnostic per problem.
    Validate {
        manifest: PathBuf,
    },
    /// Add RoI-aware QA items (and their composited images) to a dataset.
    Reconstruct(ReconstructArgs),
    /// Split a dataset by image into train and test manifests.
    Split {
        manifest: PathBuf,
        /// Train share: `4/5`, `0.8` or `80%`.
        #[arg(long, env = "ROIVQA_FRACTION", default_value = "4/5", value_parser = fraction_arg)]
        fraction: Ratio<u64>,
    },
    /// Run a model over a split and write per-item logs plus reports.
    Eval(EvalArgs),
    /// Compare the fusion projector's analytic gradients to finite differences.
    FuseCheck {
        #[arg(long, env = "ROIVQA_FUSE_D", default_value_t = 8)]
        d: usize,
        /// Hidden width; defaults to 2·d.
        #[arg(long, env = "ROIVQA_FUSE_H")]
        h: Option<usize>,
        /// Output width; defaults to d.
        #[arg(long, env = "ROIVQA_FUSE_O")]
        o: Option<usize>,
        #[arg(long, env = "ROIVQA_FUSE_STEP", default_value_t = 1e-4)]
        step: f64,
        #[arg(long, env = "ROIVQA_FUSE_TOL", default_value_t = 1e-4)]
        tol: f64,
    },
}

#[derive(Debug, Args)]
struct ReconstructArgs {
    manifest: PathBuf,
    /// Comma-separated subset of localization, selection, desc_coords, desc_highlight.
    #[arg(long, env = "ROIVQA_TYPES", value_delimiter = ',', value_parser = roi_type_arg,
          default_value = "localization,selection,desc_coords,desc_highlight")]
    types: Vec<RoiType>,
    /// Marker opacity: 0..255, `dynamic` (96-255) or `dynamic:LO-HI`.
    #[arg(long, env = "ROIVQA_ALPHA", default_value = "dynamic")]
    alpha: AlphaPolicy,
    /// Put box coordinates in description prompts.
    #[arg(long, env = "ROIVQA_BBOX_IN_PROMPT", default_value_t = true, num_args = 0..=1,
          default_missing_value = "true", action = clap::ArgAction::Set)]
    bbox_in_prompt: bool,
    /// Max items per image and type: `N` for every type, or `type=N,...`. 0 is unlimited.
    #[arg(long, env = "ROIVQA_QUOTA", default_value = "0", value_parser = quota_arg)]
    quota: Quota,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AdapterArg {
    Mock,
    Subprocess,
    Http,
}

#[derive(Debug, Args)]
struct EvalArgs {
    split: PathBuf,
    #[arg(long, env = "ROIVQA_ADAPTER", value_enum)]
    adapter: AdapterArg,
    /// JSONL of {"qa_id", "answer"} for the mock adapter.
    #[arg(long, env = "ROIVQA_FIXTURE")]
    fixture: Option<PathBuf>,
    /// Model command for the subprocess adapter, split shell-style.
    #[arg(long, env = "ROIVQA_COMMAND")]
    command: Option<String>,
    /// URL for the http adapter.
    #[arg(long, env = "ROIVQA_ENDPOINT")]
    endpoint: Option<String>,
    /// Concurrent requests; defaults to the worker count.
    #[arg(long, env = "ROIVQA_MAX_IN_FLIGHT")]
    max_in_flight: Option<usize>,
    /// Per-item timeout in seconds.
    #[arg(long, env = "ROIVQA_TIMEOUT", default_value_t = 60.0)]
    timeout: f64,
    /// Report timestamp; the current UTC time when absent.
    #[arg(long, env = "ROIVQA_TIMESTAMP")]
    timestamp: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Quota {
    All(usize),
    PerType(BTreeMap<RoiType, usize>),
}

impl std::fmt::Display for Quota {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Quota::All(n) => write!(f, "{n}"),
            Quota::PerType(m) => {
                let parts: Vec<_> = m.iter().map(|(t, n)| format!("{t}={n}")).collect();
                write!(f, "{}", parts.join(","))
            }
        }
    }
}

fn roi_type_arg(s: &str) -> Result<RoiType, String> {
    RoiType::parse(s).ok_or_else(|| {
        let names: Vec<_> = RoiType::ALL.iter().map(|t| t.as_str()).collect();
        format!("unknown type {s:?}; expected one of {}", names.join(", "))
    })
}

fn quota_arg(s: &str) -> Result<Quota, String> {
    if let Ok(n) = s.trim().parse() {
        return Ok(Quota::All(n));
    }
    let mut m = BTreeMap::new();
    for part in s.split(',') {
        let (t, n) = part.split_once('=').ok_or_else(|| format!("bad quota {part:?}; use N or type=N"))?;
        let n = n.trim().parse().map_err(|_| format!("bad quota count {n:?}"))?;
        m.insert(roi_type_arg(t)?, n);
    }
    Ok(Quota::PerType(m))
}

fn fraction_arg(s: &str) -> Result<Ratio<u64>, String> {
    parse_fraction(s).ok_or_else(|| format!("cannot parse fraction {s:?}"))
}

/// Error carrying the process exit code.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl Failure {
    fn usage(msg: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            error: anyhow!(msg.into()),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        Self {
            code: EXIT_VALIDATION,
            error,
        }
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    env_logger::Builder::new()
        .filter_level(cli.global.log_level)
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> Outcome {
    let g = cli.global;
    let workers = match g.workers {
        Some(0) => return Err(Failure::usage("--workers must be at least 1")),
        Some(n) => n,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    let load_opts = LoadOptions {
        strict: g.strict,
        name: None,
    };
    let require_seed = |cmd: &str| g.seed.ok_or_else(|| Failure::usage(format!("{cmd} requires --seed")));

    match cli.command {
        Command::Validate { manifest } => {
            let diags = validate_manifest(&manifest, &load_opts).map_err(anyhow::Error::from)?;
            if diags.is_empty() {
                println!("{}: ok", manifest.display());
                return Ok(());
            }
            for d in &diags {
                println!("{}: {d}", manifest.display());
            }
            Err(anyhow!("{} problem(s) in {}", diags.len(), manifest.display()).into())
        }

        Command::Reconstruct(a) => {
            let seed = require_seed("reconstruct")?;
            let enabled: BTreeSet<RoiType> = a.types.iter().copied().collect();
            let per_type_quota = match &a.quota {
                Quota::All(n) => enabled.iter().map(|t| (*t, *n)).collect(),
                Quota::PerType(m) => m.clone(),
            };
            let cfg = GenerationConfig {
                enabled_types: enabled.clone(),
                per_type_quota,
                seed,
                alpha_policy: a.alpha,
                bbox_in_prompt: a.bbox_in_prompt,
                ..Default::default()
            };
            let types: Vec<_> = enabled.iter().map(|t| t.as_str()).collect();
            let args = vec![
                "reconstruct".to_string(),
                a.manifest.display().to_string(),
                "--types".into(),
                types.join(","),
                "--alpha".into(),
                a.alpha.to_string(),
                "--bbox-in-prompt".into(),
                a.bbox_in_prompt.to_string(),
                "--quota".into(),
                a.quota.to_string(),
            ];
            announce(&g, Some(seed), workers, &args, json!({ "generation": cfg }))?;

            let d = load_dataset_with(&a.manifest, &load_opts).map_err(anyhow::Error::from)?;
            let mut r = reconstruct_dataset(&d, &cfg, workers).map_err(anyhow::Error::from)?;
            r.write(&g.out_dir, workers).map_err(anyhow::Error::from)?;
            eprintln!(
                "wrote {} items ({} generated, {} skipped) to {}",
                r.dataset.qa.len(),
                r.report.generated(),
                r.report.skipped.len(),
                g.out_dir.display()
            );
            Ok(())
        }

        Command::Split { manifest, fraction } => {
            let seed = require_seed("split")?;
            let spec = SplitSpec::new(seed, fraction).map_err(|e| Failure::usage(e.to_string()))?;
            let args = vec![
                "split".to_string(),
                manifest.display().to_string(),
                "--fraction".into(),
                fraction.to_string(),
            ];
            announce(&g, Some(seed), workers, &args, json!({}))?;

            let d = load_dataset_with(&manifest, &load_opts).map_err(anyhow::Error::from)?;
            let (train, test) = split_dataset(&d, &spec).map_err(anyhow::Error::from)?;
            for part in [&train, &test] {
                let path = g.out_dir.join(format!("{}.jsonl", part.name));
                save_dataset(part, &path).map_err(anyhow::Error::from)?;
                eprintln!("{}: {} images, {} items", path.display(), part.images.len(), part.qa.len());
            }
            Ok(())
        }

        Command::Eval(a) => {
            let seed = require_seed("eval")?;
            let (adapter, adapter_args) = match a.adapter {
                AdapterArg::Mock => {
                    let f = a.fixture.clone().ok_or_else(|| Failure::usage("--adapter mock needs --fixture"))?;
                    let args = vec!["--fixture".into(), f.display().to_string()];
                    (AdapterKind::Mock { fixture: f }, args)
                }
                AdapterArg::Subprocess => {
                    let c = a.command.clone().ok_or_else(|| Failure::usage("--adapter subprocess needs --command"))?;
                    (AdapterKind::Subprocess { command: c.clone() }, vec!["--command".into(), c])
                }
                AdapterArg::Http => {
                    let e = a.endpoint.clone().ok_or_else(|| Failure::usage("--adapter http needs --endpoint"))?;
                    (AdapterKind::Http { endpoint: e.clone() }, vec!["--endpoint".into(), e])
                }
            };
            if !(a.timeout.is_finite() && a.timeout > 0.0) {
                return Err(Failure::usage("--timeout must be a positive number of seconds"));
            }
            let max_in_flight = a.max_in_flight.unwrap_or(workers);
            if max_in_flight == 0 {
                return Err(Failure::usage("--max-in-flight must be at least 1"));
            }
            let timestamp = a.timestamp.clone().unwrap_or_else(now_utc);
            let cfg = RunConfig {
                split: a.split.clone(),
                adapter,
                max_in_flight,
                timeout: Duration::from_secs_f64(a.timeout),
                seed,
                strict: g.strict,
                timestamp: Some(timestamp.clone()),
            };
            let mut args = vec![
                "eval".to_string(),
                a.split.display().to_string(),
                "--adapter".into(),
                format!("{:?}", a.adapter).to_lowercase(),
            ];
            args.extend(adapter_args);
            args.extend([
                "--max-in-flight".into(),
                max_in_flight.to_string(),
                "--timeout".into(),
                a.timeout.to_string(),
                "--timestamp".into(),
                timestamp,
            ]);
            announce(&g, Some(seed), workers, &args, json!({ "run": cfg }))?;

            match run_eval(&cfg) {
                Ok(out) => {
                    write_run(&out, &g.out_dir).map_err(anyhow::Error::from)?;
                    print!("{}", out.report.to_markdown(&out.report.run_meta.split));
                    Ok(())
                }
                Err(HarnessError::Aborted { failed, total, partial }) => {
                    write_run(&partial, &g.out_dir).map_err(anyhow::Error::from)?;
                    Err(Failure {
                        code: EXIT_ABORTED,
                        error: anyhow!(
                            "run aborted: {failed} of {total} items failed; partial report in {}",
                            g.out_dir.display()
                        ),
                    })
                }
                Err(e) => Err(anyhow::Error::from(e).into()),
            }
        }

        Command::FuseCheck { d, h, o, step, tol } => {
            let seed = g.seed.unwrap_or(0);
            let dims = FusionDims {
                d,
                h: h.unwrap_or(2 * d),
                o: o.unwrap_or(d),
            };
            let args = vec![
                "fuse-check".to_string(),
                "--d".into(),
                dims.d.to_string(),
                "--h".into(),
                dims.h.to_string(),
                "--o".into(),
                dims.o.to_string(),
                "--step".into(),
                step.to_string(),
                "--tol".into(),
                tol.to_string(),
            ];
            announce(&g, Some(seed), workers, &args, json!({}))?;
            let report = grad_check(dims, seed, step, tol).map_err(|e| Failure::usage(e.to_string()))?;
            let text = serde_json::to_string_pretty(&report).expect("reports serialize") + "\n";
            write_file(&g.out_dir.join("fuse_check.json"), &text)?;
            print!("{text}");
            if report.pass {
                Ok(())
            } else {
                Err(anyhow!(
                    "gradient check failed: max relative error {:e} exceeds {:e}",
                    report.max_rel_err,
                    tol
                )
                .into())
            }
        }
    }
}

fn now_utc() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

/// Prints the command line that reproduces this run and saves it, with the
/// resolved settings, to `effective_config.json`.
fn announce(g: &Global, seed: Option<u64>, workers: usize, args: &[String], resolved: Value) -> Outcome {
    let mut argv = vec!["roivqa".to_string()];
    if let Some(s) = seed {
        argv.extend(["--seed".into(), s.to_string()]);
    }
    argv.extend([
        "--strict".into(),
        g.strict.to_string(),
        "--out-dir".into(),
        g.out_dir.display().to_string(),
        "--log-level".into(),
        g.log_level.to_string().to_lowercase(),
        "--workers".into(),
        workers.to_string(),
    ]);
    argv.extend(args.iter().cloned());
    let line = argv.iter().map(|a| shell_quote(a)).collect::<Vec<_>>().join(" ");
    eprintln!("# effective config\n{line}");

    let doc = json!({
        "argv": argv,
        "command_line": line,
        "seed": seed,
        "strict": g.strict,
        "out_dir": g.out_dir,
        "workers": workers,
        "resolved": resolved,
    });
    fs::create_dir_all(&g.out_dir)
        .with_context(|| format!("cannot create {}", g.out_dir.display()))
        .map_err(Failure::from)?;
    let text = serde_json::to_string_pretty(&doc).expect("config serializes") + "\n";
    write_file(&g.out_dir.join(EFFECTIVE_CONFIG_FILE), &text)
}

fn shell_quote(s: &str) -> String {
    shlex::try_quote(s).map_or_else(|_| s.to_string(), |q| q.into_owned())
}

fn write_file(path: &Path, text: &str) -> Outcome {
    fs::write(path, text)
        .with_context(|| format!("cannot write {}", path.display()))
        .map_err(Failure::from)
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn quota_forms() {
        assert_eq!(quota_arg("2").unwrap(), Quota::All(2));
        let q = quota_arg("selection=1,localization=3").unwrap();
        assert_eq!(q.to_string(), "localization=3,selection=1");
        assert_eq!(quota_arg(&q.to_string()).unwrap(), q);
        assert!(quota_arg("bogus=1").is_err());
        assert!(quota_arg("selection").is_err());
    }

    #[test]
    fn quoting_round_trips_through_a_shell_reader() {
        for arg in ["plain-arg_1.jsonl", "python3 model.py", "it's", "", "a\"b"] {
            assert_eq!(shlex::split(&shell_quote(arg)).unwrap(), vec![arg.to_string()]);
        }
}
}
