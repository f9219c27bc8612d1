use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fedfr::config::ExperimentConfig;
use fedfr::error::Error;
use fedfr::eval::{personalized_eval, FeatureModel, MetricSet};
use fedfr::experiment::{
    ablate, build_data, format_table, hn_sweep, pct, run_with, save_checkpoints, MetricsTable,
};
use fedfr::gradcheck::run_suites;
use fedfr::model::{ClientCheckpoint, GlobalCheckpoint};
use fedfr::server::evaluate_generic;
use fedfr::{Real, Result};

/// Exit statuses. Usage errors exit with 2 (clap's default).
mod exit {
    pub const OTHER: u8 = 1;
    pub const CONFIG: u8 = 3;
    pub const NUMERIC: u8 = 4;
    pub const IO: u8 = 5;
}

#[derive(Parser)]
#[command(name = "fedfr", version, about = "Desk-scale federated face recognition simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML config file; defaults apply to every omitted key.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed in the config file.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    /// Worker threads for client rounds (0 = all cores).
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Pre-train, federate, and write metrics and checkpoints.
    Run(Common),
    /// Compare the ablation ladder against the pre-trained model and a central upper bound.
    Ablate(Common),
    /// Finite-difference checks of every objective and the backbone.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Sweep the hard-negative threshold.
    HnSweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "0.0,0.2,0.4,0.6")]
        thresholds: Vec<f64>,
    },
    /// Re-evaluate saved checkpoints.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Directory holding global.ckpt and optional client_<i>.ckpt files.
        #[arg(long)]
        checkpoints: Option<PathBuf>,
    },
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::from_file(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn prepare_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Header and row cells in the layout of the ablation table: generic then personalized metrics.
fn summary_header(cfg: &ExperimentConfig) -> Vec<String> {
    let mut h = vec!["model".to_string()];
    for scope in ["gen", "pers"] {
        h.extend(cfg.eval.far_levels.iter().map(|l| format!("{scope} TAR@{l:e}")));
        h.extend(cfg.eval.fpir_levels.iter().map(|l| format!("{scope} TPIR@{l:e}")));
    }
    h
}

fn summary_row(name: &str, cfg: &ExperimentConfig, generic: &MetricSet, personal: &MetricSet) -> Vec<String> {
    let mut r = vec![name.to_string()];
    for m in [generic, personal] {
        r.extend(cfg.eval.far_levels.iter().map(|&l| pct(m.tar.at(l))));
        r.extend(cfg.eval.fpir_levels.iter().map(|&l| pct(m.tpir.at(l))));
    }
    r
}

fn print_table(cfg: &ExperimentConfig, rows: &[Vec<String>]) {
    let header = summary_header(cfg);
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    print!("{}", format_table(&header, rows));
}

fn cmd_run(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    prepare_out(&c.out_dir)?;
    write(&c.out_dir.join("config.toml"), &cfg.to_toml())?;
    let ckpt_dir = c.out_dir.join("checkpoints");
    let every = cfg.federation.checkpoint_every;
    let mut observer = |e: &fedfr::server::RoundEvent<'_, Real>| -> Result<()> {
        if every > 0 && e.round.is_multiple_of(every) {
            prepare_out(&ckpt_dir)?;
            GlobalCheckpoint {
                backbone: e.state.global_backbone.clone(),
                proxies: e.state.global_proxies.clone(),
            }
            .save(&ckpt_dir.join(format!("global_round_{}.ckpt", e.round)))?;
        }
        Ok(())
    };
    let out = run_with(&cfg, build_data(&cfg)?, None, c.threads, &mut observer)?;
    let mut table = MetricsTable::new(&cfg);
    table.run("run", &out.pretrained_generic, &out.pretrained_personalized, &out.history);
    table.write(&c.out_dir.join("metrics.csv"))?;
    save_checkpoints(&ckpt_dir, &out.state)?;

    let mut rows = vec![summary_row("pretrained", &cfg, &out.pretrained_generic, &out.pretrained_personalized)];
    if let Some(last) = out.history.last() {
        rows.push(summary_row("federated", &cfg, &last.generic, &last.personalized));
    }
    print_table(&cfg, &rows);
    println!("config hash {}  seed {}  rounds {}", cfg.hash(), cfg.seed, out.history.len());
    Ok(())
}

fn cmd_ablate(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    prepare_out(&c.out_dir)?;
    let rows = ablate(&cfg, c.threads)?;
    let mut table = MetricsTable::new(&cfg);
    let mut printed = Vec::new();
    for r in &rows {
        let round = if r.history.is_empty() { 0 } else { cfg.federation.rounds };
        table.metric_set(&r.name, round, "generic", &r.generic);
        table.metric_set(&r.name, round, "personalized", &r.personalized);
        printed.push(summary_row(&r.name, &cfg, &r.generic, &r.personalized));
    }
    table.write(&c.out_dir.join("ablation.csv"))?;
    print_table(&cfg, &printed);
    Ok(())
}

fn cmd_gradcheck(instances: usize, seed: u64) -> Result<()> {
    let reports = run_suites(instances, seed)?;
    let mut failed = Vec::new();
    for r in &reports {
        let verdict = if r.passed() { "PASS" } else { "FAIL" };
        println!(
            "{verdict} {:<18} instances {:>4}  coordinates {:>6}  max rel err {:.3e}",
            r.name, r.instances, r.check.coordinates, r.check.max_rel_error
        );
        if !r.passed() {
            failed.push(r.name);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::GradientMismatch(failed.join(", ")))
    }
}

fn cmd_hn_sweep(c: &Common, thresholds: &[f64]) -> Result<()> {
    let cfg = load_config(c)?;
    prepare_out(&c.out_dir)?;
    let rows = hn_sweep(&cfg, thresholds, c.threads)?;
    let level = cfg.eval.far_levels.iter().copied().fold(f64::NAN, f64::max);
    let mut table = MetricsTable::new(&cfg);
    let mut printed = Vec::new();
    for r in &rows {
        let id = format!("hn_sweep_t{}", r.t_hn);
        table.hard_negatives(&id, 0, r.hard_negatives);
        table.metric_set(&id, cfg.federation.rounds, "generic", &r.generic);
        printed.push(vec![
            r.t_hn.to_string(),
            r.hard_negatives.to_string(),
            pct(r.generic.tar.at(level)),
        ]);
    }
    table.write(&c.out_dir.join("hn_sweep.csv"))?;
    let tar = format!("gen TAR@{level:e}");
    print!("{}", format_table(&["t_HN", "|D_HN|", &tar], &printed));
    Ok(())
}

fn cmd_eval(c: &Common, dir: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(c)?;
    let dir = dir.unwrap_or_else(|| c.out_dir.join("checkpoints"));
    let data = build_data(&cfg)?;
    let global = GlobalCheckpoint::<Real>::load(&dir.join("global.ckpt"))?;
    let mut dims = vec![cfg.data.input_dim];
    dims.extend(&cfg.model.hidden_dims);
    dims.push(cfg.model.embed_dim);
    global.check_shapes(&dims, cfg.data.k_global)?;
    let generic = evaluate_generic(&cfg, &data, &global.backbone)?;

    let mut clients = Vec::new();
    for cl in &data.clients {
        let path = dir.join(format!("client_{}.ckpt", cl.id));
        if path.exists() {
            clients.push(ClientCheckpoint::<Real>::load(&path)?);
        }
    }
    let models: Vec<FeatureModel<'_, Real>> = if clients.len() == data.clients.len() {
        clients
            .iter()
            .map(|k| {
                if cfg.ablation.use_dfc {
                    FeatureModel::WithBranch(&k.backbone, &k.dfc)
                } else {
                    FeatureModel::Backbone(&k.backbone)
                }
            })
            .collect()
    } else {
        vec![FeatureModel::Backbone(&global.backbone); data.clients.len()]
    };
    let personal = personalized_eval(
        &models,
        &data,
        &cfg.eval.far_levels,
        &cfg.eval.fpir_levels,
        cfg.eval.imposter_cap,
        cfg.seed,
    )?
    .mean;
    prepare_out(&c.out_dir)?;
    let mut table = MetricsTable::new(&cfg);
    table.metric_set("eval", 0, "generic", &generic);
    table.metric_set("eval", 0, "personalized", &personal);
    table.write(&c.out_dir.join("eval.csv"))?;
    print_table(&cfg, &[summary_row("checkpoint", &cfg, &generic, &personal)]);
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => exit::CONFIG,
        Error::Io { .. } | Error::MalformedHeader(_) | Error::TruncatedPayload { .. } | Error::CheckpointMismatch(_) => {
            exit::IO
        }
        e if e.is_numeric() => exit::NUMERIC,
        _ => exit::OTHER,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(c) => cmd_run(&c),
        Command::Ablate(c) => cmd_ablate(&c),
        Command::Gradcheck { instances, seed } => cmd_gradcheck(instances, seed),
        Command::HnSweep { common, thresholds } => cmd_hn_sweep(&common, &thresholds),
        Command::Eval { common, checkpoints } => cmd_eval(&common, checkpoints),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(exit_code(&e))
        }
    }
}
