use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::parser::ValueSource;
use clap::{Arg, ArgAction, ArgMatches, Command};
use gdmrg_core::config::{GraphMode, RunConfig, KEYS};
use gdmrg_core::datagen::{generate, linear_probe_auc, manifest, write_splits, Generator};
use gdmrg_core::evaluate::{evaluate, EvalOptions};
use gdmrg_core::experiments::{self, Axis};
use gdmrg_core::graphtopo::{build_adjacency, count_cooccurrence, geometric_normalize, matrix_csv};
use gdmrg_core::model::Model;
use gdmrg_core::nodes::DISEASES;
use gdmrg_core::tki::mean_centered_cosine;
use gdmrg_core::train::{objective_gradcheck, train};
use gdmrg_core::{CoreError, Result};
use numcore::{Execution, Tape};

const GRADCHECK_TOL: f64 = 1e-4;

fn flag_name(key: &str) -> String {
    key.replace('_', "-")
}

fn is_bool_key(key: &str) -> bool {
    matches!(RunConfig::default().get(key).as_deref(), Some("true" | "false"))
}

fn with_config_args(mut cmd: Command) -> Command {
    cmd = cmd.arg(
        Arg::new("config")
            .long("config")
            .value_name("PATH")
            .value_parser(clap::value_parser!(PathBuf))
            .help("Load settings from a config file (flags override it)"),
    );
    for (section, key, doc) in KEYS {
        let mut arg = Arg::new(*key)
            .long(flag_name(key))
            .value_name("VALUE")
            .help(format!("[{section}] {doc}"))
            .help_heading("Configuration");
        if is_bool_key(key) {
            arg = arg.num_args(0..=1).default_missing_value("true");
        }
        cmd = cmd.arg(arg);
    }
    cmd
}

fn path_arg(id: &'static str, help: &'static str, required: bool) -> Arg {
    Arg::new(id)
        .long(id)
        .value_name("DIR")
        .value_parser(clap::value_parser!(PathBuf))
        .required(required)
        .help(help)
}

fn switch(id: &'static str, help: &'static str) -> Arg {
    Arg::new(id).long(id).action(ArgAction::SetTrue).help(help)
}

fn cli() -> Command {
    let data = |req| path_arg("data", "Dataset root holding train/, val/ and test/", req);
    Command::new("gdmrg")
        .about("Topology-aware diagnosis and prompt-conditioned report generation on synthetic data")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(
            with_config_args(Command::new("gen-data").about("Generate the synthetic train/val/test splits"))
                .arg(path_arg("out", "Output dataset root", true)),
        )
        .subcommand(
            with_config_args(Command::new("train").about("Two-stage training; writes a run directory"))
                .arg(data(true))
                .arg(path_arg("out", "Run directory to create", true))
                .arg(switch("no-tki", "Use plain classifier weights instead of the graph branch")),
        )
        .subcommand(
            with_config_args(Command::new("evaluate").about("Calibrate thresholds, decode reports, write metrics"))
                .arg(data(true))
                .arg(path_arg("run", "Run directory from `train`", true))
                .arg(path_arg("out", "Where to write outputs (defaults to the run directory)", false))
                .arg(switch("no-ots", "Fix every threshold at 0.5"))
                .arg(switch("dump-attention", "Write attention maps of the first test batch"))
                .arg(switch("show-prompt", "Prefix generated reports with their state prompt")),
        )
        .subcommand(
            with_config_args(Command::new("sweep-phi").about("Train and evaluate once per edge percentile"))
                .arg(data(true))
                .arg(path_arg("out", "Output directory for sweep_phi.csv", true))
                .arg(
                    Arg::new("phis")
                        .long("phis")
                        .value_name("LIST")
                        .value_delimiter(',')
                        .value_parser(clap::value_parser!(f64))
                        .required(true)
                        .help("Comma-separated percentiles in [0, 100)"),
                )
                .arg(switch("no-tki", "Use plain classifier weights instead of the graph branch")),
        )
        .subcommand(
            with_config_args(Command::new("ablate").about("Run one ablation grid"))
                .arg(data(true))
                .arg(path_arg("out", "Output directory for ablate_<axis>.csv", true))
                .arg(
                    Arg::new("axis")
                        .long("axis")
                        .value_name("AXIS")
                        .value_parser(["components", "losses", "prompt_mask", "topology"])
                        .required(true),
                ),
        )
        .subcommand(
            with_config_args(Command::new("viz-topology").about("Dump the co-occurrence prior and learned weight similarity"))
                .arg(data(true))
                .arg(path_arg("run", "Run directory whose weights to analyse", false))
                .arg(path_arg("out", "Output directory", true))
                .arg(switch("pgm", "Also write 8-bit grayscale images"))
                .arg(switch("no-tki", "Use plain classifier weights instead of the graph branch")),
        )
        .subcommand(
            with_config_args(Command::new("gradcheck").about("Finite-difference check of the full objective"))
                .arg(
                    Arg::new("samples")
                        .long("samples")
                        .value_parser(clap::value_parser!(usize))
                        .default_value("4")
                        .help("Batch size of the checked objective"),
                )
                .arg(
                    Arg::new("per-param")
                        .long("per-param")
                        .value_parser(clap::value_parser!(usize))
                        .default_value("3")
                        .help("Entries probed per parameter tensor"),
                )
                .arg(
                    Arg::new("seeds")
                        .long("seeds")
                        .value_parser(clap::value_parser!(u64))
                        .default_value("1")
                        .help("Number of initialization seeds"),
                ),
        )
}

/// Base config (file or fallback), then explicit flags, then shortcut switches.
fn resolve(m: &ArgMatches, fallback: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = match m.get_one::<PathBuf>("config").map(PathBuf::as_path).or(fallback) {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for (_, key, _) in KEYS {
        if m.value_source(key) == Some(ValueSource::CommandLine) {
            if let Some(v) = m.get_one::<String>(key) {
                cfg.set(key, v)?;
            }
        }
    }
    let on = |id: &str| m.try_get_one::<bool>(id).ok().flatten().copied().unwrap_or(false);
    if on("no-tki") {
        cfg.graph = GraphMode::None;
    }
    if on("no-ots") {
        cfg.ots = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| CoreError::Data(format!("{}: {e}", path.display())))
}

fn dir(m: &ArgMatches, id: &str) -> PathBuf {
    m.get_one::<PathBuf>(id).cloned().expect("required by clap")
}

/// Binary PGM of a square matrix, mapping [-1, 1] linearly onto [0, 255].
fn pgm(m: &numcore::Tensor) -> Vec<u8> {
    let n = m.shape()[0];
    let mut out = format!("P5\n{n} {n}\n255\n").into_bytes();
    out.extend(m.data().iter().map(|&v| ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8));
    out
}

fn cmd_gen_data(m: &ArgMatches) -> Result<()> {
    let cfg = resolve(m, None)?;
    let out = dir(m, "out");
    let splits = experiments::splits_for(&cfg)?;
    write_splits(&splits, &out)?;
    let gen = Generator::new(cfg.gen_config())?;
    let probe = linear_probe_auc(&splits.train, &splits.test);
    write(&out.join("manifest.txt"), &manifest(&gen, [cfg.n_train, cfg.n_val, cfg.n_test], &probe))?;
    write(&out.join(experiments::CONFIG_FILE), &cfg.to_text())?;
    println!("wrote {} / {} / {} samples to {}", cfg.n_train, cfg.n_val, cfg.n_test, out.display());
    Ok(())
}

fn cmd_train(m: &ArgMatches) -> Result<()> {
    let cfg = resolve(m, None)?;
    let splits = experiments::load_splits(&cfg, &dir(m, "data"))?;
    let out = dir(m, "out");
    let t = train(&cfg, &splits)?;
    experiments::save_run(&t, &out)?;
    if let Some(last) = t.log.last() {
        println!("{last}");
    }
    println!("run saved to {}", out.display());
    Ok(())
}

fn cmd_evaluate(m: &ArgMatches) -> Result<()> {
    let run = dir(m, "run");
    let cfg = resolve(m, Some(&run.join(experiments::CONFIG_FILE)))?;
    let splits = experiments::load_splits(&cfg, &dir(m, "data"))?;
    let (model, store) = experiments::load_run(&cfg, &splits, &run)?;
    let opts = EvalOptions {
        dump_attention: m.get_flag("dump-attention"),
        ..EvalOptions::from_config(&cfg)
    };
    let e = evaluate(&model, &store, &splits, opts)?;
    let out = m.get_one::<PathBuf>("out").cloned().unwrap_or(run);
    experiments::write_evaluation(&e, &out, m.get_flag("show-prompt"))?;
    let mm = &e.metrics;
    println!(
        "micro P={:.4} R={:.4} F1={:.4} | complex F1={:.4} (n={}) | BLEU-1={:.4} ROUGE-L={:.4}",
        mm.ce.micro.precision,
        mm.ce.micro.recall,
        mm.ce.micro.f1,
        mm.complex.micro.f1,
        mm.complex.n_samples,
        mm.bleu.first().copied().unwrap_or(0.0),
        mm.rouge_l
    );
    println!("outputs written to {}", out.display());
    Ok(())
}

fn cmd_sweep(m: &ArgMatches) -> Result<()> {
    let cfg = resolve(m, None)?;
    let splits = experiments::load_splits(&cfg, &dir(m, "data"))?;
    let phis: Vec<f64> = m.get_many::<f64>("phis").expect("required").copied().collect();
    let csv = experiments::sweep_phi(&cfg, &splits, &phis)?;
    let out = dir(m, "out");
    std::fs::create_dir_all(&out)?;
    write(&out.join("sweep_phi.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn cmd_ablate(m: &ArgMatches) -> Result<()> {
    let cfg = resolve(m, None)?;
    let splits = experiments::load_splits(&cfg, &dir(m, "data"))?;
    let axis: Axis = m.get_one::<String>("axis").expect("required").parse()?;
    let csv = experiments::ablate(&cfg, &splits, axis)?;
    let out = dir(m, "out");
    std::fs::create_dir_all(&out)?;
    write(&out.join(format!("ablate_{axis}.csv")), &csv)?;
    print!("{csv}");
    Ok(())
}

fn cmd_viz(m: &ArgMatches) -> Result<()> {
    let run = m.get_one::<PathBuf>("run").cloned();
    let fallback = run.as_ref().map(|r| r.join(experiments::CONFIG_FILE));
    let cfg = resolve(m, fallback.as_deref())?;
    let splits = experiments::load_splits(&cfg, &dir(m, "data"))?;
    let out = dir(m, "out");
    std::fs::create_dir_all(&out)?;
    let n = cfg.n_nodes;
    let labels: Vec<Vec<u8>> = splits.train.samples.iter().map(|s| s.binary(cfg.unc_positive)[..n].to_vec()).collect();
    let prior = geometric_normalize(&count_cooccurrence(&labels, n)?);
    let adj = build_adjacency(&prior, cfg.phi)?;
    write(&out.join("prior.csv"), &matrix_csv("geometric_prior", &prior, &DISEASES))?;
    write(&out.join("adjacency.csv"), &matrix_csv("normalized_adjacency", &adj.a_tilde, &DISEASES))?;
    let pgm_on = m.get_flag("pgm");
    if pgm_on {
        std::fs::write(out.join("prior.pgm"), pgm(&prior))?;
    }
    if let Some(run) = run {
        let (model, store) = experiments::load_run(&cfg, &splits, &run)?;
        let mut t = Tape::with_execution(Execution::default());
        let w = model.weights(&mut t, &store, None)?;
        let sim = mean_centered_cosine(t.value(w), &cfg.sim_slice.states())?;
        let stage = format!("similarity_{}", cfg.sim_slice);
        write(&out.join("similarity.csv"), &matrix_csv(&stage, &sim, &DISEASES))?;
        if pgm_on {
            std::fs::write(out.join("similarity.pgm"), pgm(&sim))?;
        }
    }
    println!("topology written to {} (edges kept: {})", out.display(), adj.retained_edges);
    Ok(())
}

fn cmd_gradcheck(m: &ArgMatches) -> Result<ExitCode> {
    let cfg = resolve(m, None)?;
    let samples = *m.get_one::<usize>("samples").expect("default");
    let per_param = *m.get_one::<usize>("per-param").expect("default");
    let seeds = *m.get_one::<u64>("seeds").expect("default");
    let gen = Generator::new(cfg.gen_config())?;
    let ds = generate(&gen, 0, samples.max(8), Execution::default());
    let mut worst: f64 = 0.0;
    for k in 0..seeds {
        let c = RunConfig { seed: cfg.seed + k, ..cfg.clone() };
        let model = Model::new(&c, &ds)?;
        let store = model.init_params()?;
        let err = objective_gradcheck(&model, &store, &ds, samples, per_param, c.seed)?;
        println!("seed {}: max relative error {err:.3e}", c.seed);
        worst = worst.max(err);
    }
    let ok = worst < GRADCHECK_TOL;
    println!("{} (worst {worst:.3e}, tolerance {GRADCHECK_TOL:e})", if ok { "PASS" } else { "FAIL" });
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn exit_code(e: &CoreError) -> ExitCode {
    match e {
        CoreError::Config(_) => ExitCode::from(2),
        CoreError::Data(_) | CoreError::Io(_) => ExitCode::from(3),
        CoreError::Num(_) => ExitCode::FAILURE,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let matches = cli().get_matches();
    let (name, m) = matches.subcommand().expect("subcommand required");
    let result = match name {
        "gen-data" => cmd_gen_data(m).map(|_| ExitCode::SUCCESS),
        "train" => cmd_train(m).map(|_| ExitCode::SUCCESS),
        "evaluate" => cmd_evaluate(m).map(|_| ExitCode::SUCCESS),
        "sweep-phi" => cmd_sweep(m).map(|_| ExitCode::SUCCESS),
        "ablate" => cmd_ablate(m).map(|_| ExitCode::SUCCESS),
        "viz-topology" => cmd_viz(m).map(|_| ExitCode::SUCCESS),
        "gradcheck" => cmd_gradcheck(m),
        _ => unreachable!("clap rejects unknown subcommands"),
    };
    result.unwrap_or_else(|e| {
        eprintln!("error: {e}");
        exit_code(&e)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn command_definition_is_consistent() {
        cli().debug_assert();
    }

    #[test]
    fn flags_override_file_and_switches_apply() {
        let m = cli().get_matches_from(["gdmrg", "train", "--data", "d", "--out", "o", "--phi", "70", "--no-tki", "--unc-positive"]);
        let (_, sub) = m.subcommand().unwrap();
        let cfg = resolve(sub, None).unwrap();
        assert_eq!(cfg.phi, 70.0);
        assert_eq!(cfg.graph, GraphMode::None);
        assert!(cfg.unc_positive);
    }
}
