use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command};
use digsp_core::analysis::Mechanism;
use digsp_core::data;
use digsp_core::experiment::{self, AnalysisReport, AnalysisSettings, ExperimentConfig, CONFIG_KEYS};
use digsp_core::Error;

fn cli() -> Command {
    let run = Command::new("run")
        .about("Run an experiment and write per-run reports")
        .arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .value_parser(clap::value_parser!(PathBuf))
                .help("key = value configuration file; flags below override it"),
        )
        .arg(
            Arg::new("print-config")
                .long("print-config")
                .action(ArgAction::SetTrue)
                .help("Print the resolved configuration and exit"),
        )
        .args(CONFIG_KEYS.iter().map(|(key, doc)| {
            Arg::new(*key).long(*key).value_name("VALUE").help(*doc)
        }));
    Command::new("digsp")
        .about("Divide-and-conquer symbolic regression experiments")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(run)
        .subcommand(
            Command::new("analyze")
                .about("Post-hoc statistics over persisted run reports")
                .arg(
                    Arg::new("dir")
                        .required(true)
                        .value_parser(clap::value_parser!(PathBuf))
                        .help("Experiment output directory"),
                )
                .arg(Arg::new("epsilon").long("epsilon").value_parser(clap::value_parser!(f64)))
                .arg(Arg::new("n_boot").long("n_boot").value_parser(clap::value_parser!(usize)))
                .arg(Arg::new("ci_level").long("ci_level").value_parser(clap::value_parser!(f64)))
                .arg(Arg::new("seed").long("seed").value_parser(clap::value_parser!(u64)))
                .arg(
                    Arg::new("out")
                        .long("out")
                        .value_parser(clap::value_parser!(PathBuf))
                        .help("Where to write the JSON analysis (default <dir>/analysis.json)"),
                ),
        )
        .subcommand(
            Command::new("diagnose")
                .about("Descriptive statistics of a dataset CSV")
                .arg(Arg::new("csv").required(true).value_parser(clap::value_parser!(PathBuf)))
                .arg(
                    Arg::new("json")
                        .long("json")
                        .action(ArgAction::SetTrue)
                        .help("Emit JSON instead of a table"),
                ),
        )
        .subcommand(
            Command::new("synth")
                .about("Write the synthetic superposition dataset as CSV")
                .arg(
                    Arg::new("out")
                        .long("out")
                        .required(true)
                        .value_parser(clap::value_parser!(PathBuf)),
                )
                .arg(
                    Arg::new("n")
                        .long("n")
                        .default_value("213")
                        .value_parser(clap::value_parser!(usize)),
                )
                .arg(
                    Arg::new("noise")
                        .long("noise")
                        .default_value("0.3")
                        .value_parser(clap::value_parser!(f64)),
                )
                .arg(
                    Arg::new("seed")
                        .long("seed")
                        .default_value("0")
                        .value_parser(clap::value_parser!(u64)),
                ),
        )
}

/// Exit code per error category.
fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 2,
        Error::Ingest { .. } | Error::Input(_) | Error::Csv(_) | Error::UndefinedElasticity => 3,
        Error::Io(_) | Error::Json(_) => 4,
        Error::Structural(_) => 1,
    }
}

fn resolve_config(m: &ArgMatches) -> Result<ExperimentConfig, Error> {
    let mut cfg = match m.get_one::<PathBuf>("config") {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => ExperimentConfig::default(),
    };
    for (key, _) in CONFIG_KEYS {
        if let Some(v) = m.get_one::<String>(key) {
            cfg.set(key, v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_json(path: &Path, value: &AnalysisReport) -> Result<(), Error> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn print_analysis(a: &AnalysisReport) {
    for m in &a.modes {
        println!(
            "{:<6} runs={:<3} test RMSE median {:.4} [IQR {:.4}] mean {:.4} ± {:.4} | train median {:.4} | nodes median {} terms median {}",
            m.mode.to_string(),
            m.n_completed,
            m.test_rmse.median,
            m.test_rmse.iqr,
            m.test_rmse.mean,
            m.test_rmse.sd,
            m.train_rmse.median,
            m.tree_size_nodes.median,
            m.n_terms.median,
        );
        let shares: Vec<String> = Mechanism::ALL
            .iter()
            .map(|k| format!("{k:?}={:.1}%", m.contributions.mean_share[k]))
            .collect();
        println!("       contributions: {}", shares.join(" "));
        let el: Vec<String> = m
            .elasticities
            .iter()
            .map(|e| format!("{}={:+.3}", e.variable, e.median))
            .collect();
        println!("       elasticity medians: {}", el.join(" "));
    }
    if let Some(p) = &a.paired {
        println!(
            "paired (baseline − multi-population, n={}): W={} p={:.3e} r={:.3} wins={:.1}% mean Δ={:.4} CI{:.0}%=[{:.4}, {:.4}]",
            p.run_indices.len(),
            p.test.w_statistic,
            p.test.p_value,
            p.test.rank_biserial,
            100.0 * p.test.win_fraction,
            p.mean_delta,
            100.0 * p.ci_level,
            p.bootstrap_ci.0,
            p.bootstrap_ci.1,
        );
    }
    for n in &a.notices {
        println!("note: {n}");
    }
}

fn cmd_run(m: &ArgMatches) -> Result<(), Error> {
    let cfg = resolve_config(m)?;
    if m.get_flag("print-config") {
        print!("{}", cfg.to_text());
        return Ok(());
    }
    let reports = experiment::run_experiment(&cfg)?;
    for r in &reports {
        match (&r.result, &r.failure) {
            (Some(res), _) => println!(
                "run {:>3} {:<5} test RMSE {:.4} generations {} activations {} ({:.1}s)",
                r.run_index,
                r.mode.to_string(),
                res.test_rmse,
                res.generations,
                res.ahsam_log.len(),
                res.wall_seconds
            ),
            (None, Some(msg)) => eprintln!("run {} {} failed: {msg}", r.run_index, r.mode),
            (None, None) => {}
        }
    }
    let analysis = experiment::analyze(&reports, &AnalysisSettings::from(&cfg))?;
    if let Some(dir) = &cfg.output_dir {
        write_json(&dir.join("analysis.json"), &analysis)?;
    }
    print_analysis(&analysis);
    Ok(())
}

fn cmd_analyze(m: &ArgMatches) -> Result<(), Error> {
    let dir = m.get_one::<PathBuf>("dir").expect("required");
    let config_path = dir.join("config.txt");
    let mut settings = if config_path.is_file() {
        AnalysisSettings::from(&ExperimentConfig::from_file(&config_path)?)
    } else {
        AnalysisSettings::default()
    };
    if let Some(v) = m.get_one::<f64>("epsilon") {
        settings.epsilon = *v;
    }
    if let Some(v) = m.get_one::<usize>("n_boot") {
        settings.n_boot = *v;
    }
    if let Some(v) = m.get_one::<f64>("ci_level") {
        settings.ci_level = *v;
    }
    if let Some(v) = m.get_one::<u64>("seed") {
        settings.seed = *v;
    }
    let reports = experiment::load_reports(dir)?;
    if reports.is_empty() {
        return Err(Error::Input(format!("no run reports under {}", dir.display())));
    }
    let analysis = experiment::analyze(&reports, &settings)?;
    let out = m
        .get_one::<PathBuf>("out")
        .cloned()
        .unwrap_or_else(|| dir.join("analysis.json"));
    write_json(&out, &analysis)?;
    print_analysis(&analysis);
    Ok(())
}

fn cmd_diagnose(m: &ArgMatches) -> Result<(), Error> {
    let path = m.get_one::<PathBuf>("csv").expect("required");
    let ds = data::load_csv(path)?;
    let stats = data::diagnostics(&ds)?;
    if m.get_flag("json") {
        let obj = serde_json::json!({
            "n": ds.n(),
            "columns": stats.iter().map(|(name, s)| serde_json::json!({"name": name, "stats": s})).collect::<Vec<_>>(),
        });
        println!("{}", serde_json::to_string_pretty(&obj)?);
        return Ok(());
    }
    println!("n = {}", ds.n());
    println!(
        "{:<12} {:>10} {:>10} {:>10} {:>10} {:>10} {:>10} {:>10} {:>9}",
        "variable", "min", "max", "range", "mean", "sd", "median", "skewness", "outl.%"
    );
    for (name, s) in stats {
        println!(
            "{:<12} {:>10.3} {:>10.3} {:>10.3} {:>10.3} {:>10.3} {:>10.3} {:>10.3} {:>9.2}",
            name, s.min, s.max, s.range, s.mean, s.sd, s.median, s.skewness, s.pct_tukey_outliers
        );
    }
    Ok(())
}

fn cmd_synth(m: &ArgMatches) -> Result<(), Error> {
    let out = m.get_one::<PathBuf>("out").expect("required");
    let ds = data::synth_superposition(
        *m.get_one::<usize>("n").expect("default"),
        *m.get_one::<f64>("noise").expect("default"),
        *m.get_one::<u64>("seed").expect("default"),
    )?;
    ds.write_csv(out)?;
    println!("wrote {} rows to {}", ds.n(), out.display());
    Ok(())
}

fn main() -> ExitCode {
    let matches = cli().get_matches();
    let result = match matches.subcommand() {
        Some(("run", m)) => cmd_run(m),
        Some(("analyze", m)) => cmd_analyze(m),
        Some(("diagnose", m)) => cmd_diagnose(m),
        Some(("synth", m)) => cmd_synth(m),
        _ => unreachable!("subcommand required"),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
