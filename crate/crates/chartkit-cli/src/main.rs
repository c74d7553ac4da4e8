//! Batch driver for the chart toolkit. Every subcommand reads one TOML
//! config, applies flag overrides, hashes the effective configuration,
//! and writes JSON reports plus CSV plot data under the output root. The
//! same config, seed, and flags reproduce every artifact byte for byte,
//! regardless of the thread count.

mod config;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use chartkit::chart::{build_full_chart, verify_theorem, AdaptedChart, ChartError};
use chartkit::densities::{
    nu_ball_mass, pullback_density, volume_compare, DensityCfg, DensityError, DensitySpec,
};
use chartkit::fieldspec::{parse_field_expr, Ball, FieldSet};
use chartkit::flows::cc::{CcNet, CcNetCfg};
use chartkit::flows::{flow_controls_with, DEFAULT_FLOW_TOL};
use chartkit::funcspaces::{zygmund_norm_grid, ZygTarget, ZygmundCfg};
use chartkit::grid::GridField;
use chartkit::vectorfield::{commutator_coeffs, CoeffMode};

use config::{ExperimentConfig, NormSection};

/// Environment variable overriding the output root below the `-o` flag.
const OUT_ENV: &str = "CHARTKIT_OUT";
/// Variable count ceiling when inferring the dimension of a bare `-f`
/// expression.
const MAX_INFERRED_DIM: usize = 8;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, unreadable files, or a config that fails validation.
    Config(String),
    /// A numerical stage failed on a valid config.
    Numerical { stage: String, message: String },
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Numerical { stage, message } => {
                write!(f, "numerical failure [stage: {stage}]: {message}")
            }
        }
    }
}

fn io_err(what: &str, e: std::io::Error) -> CliError {
    CliError::Config(format!("{what}: {e}"))
}

fn chart_err(e: ChartError) -> CliError {
    let stage = match &e {
        ChartError::Stage { stage, .. } => stage.to_string(),
        _ => "chart".to_string(),
    };
    CliError::Numerical {
        stage,
        message: e.to_string(),
    }
}

fn density_err(e: DensityError) -> CliError {
    let stage = match &e {
        DensityError::Chart(ChartError::Stage { stage, .. }) => stage.to_string(),
        DensityError::Chart(_) => "chart".to_string(),
        _ => "density".to_string(),
    };
    CliError::Numerical {
        stage,
        message: e.to_string(),
    }
}

fn num_err(stage: &str, e: impl fmt::Display) -> CliError {
    CliError::Numerical {
        stage: stage.to_string(),
        message: e.to_string(),
    }
}

#[derive(Parser, Debug)]
#[command(name = "chartkit", version, about = "Adapted-chart toolkit driver")]
struct Cli {
    /// Config file (TOML).
    #[arg(short = 'c', long, global = true)]
    config: Option<PathBuf>,
    /// Output root; beats the CHARTKIT_OUT variable and the config.
    #[arg(short = 'o', long, global = true)]
    out: Option<PathBuf>,
    /// Seed override for the active stage's sampling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; artifacts are identical for any value.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Resolution override for the active stage's primary grid.
    #[arg(long, global = true)]
    grid: Option<usize>,
    /// Tolerance override for the active stage.
    #[arg(long, global = true)]
    tol: Option<f64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Commutator coefficients of the family at sample points.
    Bracket,
    /// Flow one control vector and record the trajectory.
    Flow,
    /// Control distance between configured point pairs.
    Distance,
    /// Weighted control-ball mass around a point.
    Volume,
    /// Smoothness norm and fitted exponent of an expression.
    Norm {
        /// Expression to measure; overrides the config section.
        #[arg(short = 'f', long = "function")]
        function: Option<String>,
        /// Smoothness order; overrides the config section.
        #[arg(short = 's', long)]
        s: Option<f64>,
    },
    /// Chart construction and verification.
    Chart {
        #[command(subcommand)]
        sub: ChartCmd,
    },
    /// Pull a density back through the configured chart.
    Density,
}

#[derive(Subcommand, Debug)]
enum ChartCmd {
    /// Build the chart and write a bundle directory.
    Build,
    /// Rebuild, run every theorem check, and cross-check a stored bundle.
    Verify {
        /// Bundle directory from a previous build.
        #[arg(long)]
        chart: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let matches = match Cli::command().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprintln!("{e}");
            return ExitCode::from(1);
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ CliError::Config(_)) => {
            eprintln!("{e}");
            ExitCode::from(1)
        }
        Err(e @ CliError::Numerical { .. }) => {
            eprintln!("{e}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(CliError::Config("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    }

    let mut cfg = load_config(&cli)?;
    apply_overrides(&mut cfg, &cli)?;
    let hash = config::config_hash(&cfg);
    let root = out_root(&cli, &cfg);
    fs::create_dir_all(&root).map_err(|e| io_err("output root", e))?;

    match &cli.cmd {
        Cmd::Bracket => cmd_bracket(&cfg, &hash, &root),
        Cmd::Flow => cmd_flow(&cfg, &hash, &root),
        Cmd::Distance => cmd_distance(&cfg, &hash, &root),
        Cmd::Volume => cmd_volume(&cfg, &hash, &root),
        Cmd::Norm { .. } => cmd_norm(&cfg, &hash, &root),
        Cmd::Chart { sub } => match sub {
            ChartCmd::Build => cmd_chart_build(&cli, &cfg, &hash, &root),
            ChartCmd::Verify { chart } => cmd_chart_verify(&cfg, &hash, &root, chart.as_deref()),
        },
        Cmd::Density => cmd_density(&cfg, &hash, &root),
    }
}

/// Reads the config named by `-c`; `chart verify --chart` may instead pull
/// the config a bundle embeds, and bare `norm -f` runs without any file.
fn load_config(cli: &Cli) -> Result<ExperimentConfig, CliError> {
    if let Some(path) = &cli.config {
        let text = fs::read_to_string(path)
            .map_err(|e| io_err(&format!("reading {}", path.display()), e))?;
        return toml::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())));
    }
    if let Cmd::Chart {
        sub: ChartCmd::Verify { chart: Some(dir) },
    } = &cli.cmd
    {
        let path = dir.join("config.json");
        let text = fs::read_to_string(&path)
            .map_err(|e| io_err(&format!("reading {}", path.display()), e))?;
        let doc: BundleConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        return Ok(doc.config);
    }
    match &cli.cmd {
        Cmd::Norm { function: Some(_), .. } => Ok(ExperimentConfig::default()),
        _ => Err(CliError::Config(
            "a config file is required; pass -c <file>".into(),
        )),
    }
}

/// Folds flag overrides into the config so the recorded hash names the
/// effective inputs.
fn apply_overrides(cfg: &mut ExperimentConfig, cli: &Cli) -> Result<(), CliError> {
    match &cli.cmd {
        Cmd::Norm { function, s } => {
            if let Some(f) = function {
                let section = cfg.norm.get_or_insert_with(|| NormSection {
                    expr: String::new(),
                    s: 0.0,
                    radius: None,
                    res: None,
                    k_min: None,
                    max_scales: None,
                });
                section.expr = f.clone();
                if let Some(v) = s {
                    section.s = *v;
                }
            } else if let (Some(v), Some(section)) = (s, cfg.norm.as_mut()) {
                section.s = *v;
            }
            if let (Some(g), Some(section)) = (cli.grid, cfg.norm.as_mut()) {
                section.res = Some(g);
            }
        }
        Cmd::Volume => {
            if let Some(section) = cfg.volume.as_mut() {
                if let Some(seed) = cli.seed {
                    section.cfg.seed = seed;
                }
                if let Some(g) = cli.grid {
                    section.cfg.grid_res = g;
                }
            }
        }
        Cmd::Flow => {
            if let Some(section) = cfg.flow.as_mut() {
                if let Some(t) = cli.tol {
                    section.tol = Some(t);
                }
                if let Some(g) = cli.grid {
                    section.checkpoints = Some(g);
                }
            }
        }
        Cmd::Distance => {
            if let Some(section) = cfg.distance.as_mut() {
                if let Some(t) = cli.tol {
                    section.shoot_tol = Some(t);
                }
                if let (Some(g), Some(f)) = (cli.grid, cfg.fields.as_ref()) {
                    if g == 0 {
                        return Err(CliError::Config("--grid must be positive".into()));
                    }
                    section.cell = Some(f.radius / g as f64);
                }
            }
        }
        Cmd::Chart { sub } => {
            if let Some(section) = cfg.chart.as_mut() {
                if let Some(seed) = cli.seed {
                    section.cfg.seed = seed;
                }
                if let Some(g) = cli.grid {
                    section.cfg.final_res = g;
                }
                if let Some(t) = cli.tol {
                    section.cfg.corrector_tol = t;
                }
            }
            if let ChartCmd::Verify { .. } = sub {
                if let Some(seed) = cli.seed {
                    cfg.verify.get_or_insert_with(Default::default).seed = Some(seed);
                }
            }
        }
        Cmd::Density => {
            if let Some(g) = cli.grid {
                cfg.density.get_or_insert_with(Default::default).res = Some(g);
            }
            if let Some(seed) = cli.seed {
                cfg.volume.get_or_insert_with(Default::default).cfg.seed = seed;
            }
        }
        Cmd::Bracket => {}
    }
    Ok(())
}

fn out_root(cli: &Cli, cfg: &ExperimentConfig) -> PathBuf {
    if let Some(o) = &cli.out {
        return o.clone();
    }
    if let Ok(env) = std::env::var(OUT_ENV) {
        if !env.is_empty() {
            return PathBuf::from(env);
        }
    }
    PathBuf::from(cfg.output.dir.clone().unwrap_or_else(|| "out".to_string()))
}

fn require_fields(cfg: &ExperimentConfig) -> Result<FieldSet, CliError> {
    cfg.fields
        .as_ref()
        .ok_or_else(|| CliError::Config("missing [fields] section".into()))?
        .to_field_set()
}

/// Top-level JSON shape shared by every report artifact.
#[derive(Serialize)]
struct Document<'a, T: Serialize> {
    config_hash: &'a str,
    command: &'static str,
    report: T,
}

fn write_json<T: Serialize>(path: &Path, doc: &Document<'_, T>) -> Result<(), CliError> {
    let mut bytes = serde_json::to_vec_pretty(doc)
        .map_err(|e| CliError::Config(format!("serializing {}: {e}", path.display())))?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| io_err(&format!("writing {}", path.display()), e))
}

fn write_csv(
    path: &Path,
    hash: &str,
    header: &str,
    rows: &[String],
) -> Result<(), CliError> {
    let mut out = String::with_capacity(rows.len() * 32 + 128);
    out.push_str(&format!("# config_hash: {hash}\n{header}\n"));
    for r in rows {
        out.push_str(r);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| io_err(&format!("writing {}", path.display()), e))
}

#[derive(Serialize)]
struct BracketReport {
    n: usize,
    q: usize,
    mode: String,
    points: Vec<Vec<f64>>,
    residual: f64,
    failed_points: usize,
    max_abs: f64,
}

fn cmd_bracket(cfg: &ExperimentConfig, hash: &str, root: &Path) -> Result<(), CliError> {
    let fields = require_fields(cfg)?;
    let section = cfg.bracket.clone().unwrap_or_default();
    let points = section
        .points
        .unwrap_or_else(|| vec![fields.domain.center.clone()]);
    let mode = match section.mode.as_deref() {
        None | Some("minimal-norm") => CoeffMode::MinimalNorm,
        Some("exact-frame") => CoeffMode::ExactFrame,
        Some(other) => {
            return Err(CliError::Config(format!(
                "bracket mode must be minimal-norm or exact-frame, got {other}"
            )))
        }
    };
    let tensor = commutator_coeffs(&fields, &points, mode).map_err(|e| num_err("bracket", e))?;
    let q = fields.q();
    let mut rows = Vec::new();
    for i in 1..=q {
        for j in (i + 1)..=q {
            for k in 1..=q {
                for p in 0..points.len() {
                    rows.push(format!("{i},{j},{k},{p},{}", tensor.coeff(i, j, k, p)));
                }
            }
        }
    }
    let report = BracketReport {
        n: fields.n(),
        q,
        mode: format!("{mode:?}"),
        points: tensor.points.clone(),
        residual: tensor.residual,
        failed_points: tensor.failed_points,
        max_abs: tensor.max_abs(),
    };
    let json = root.join("bracket.json");
    write_json(&json, &Document { config_hash: hash, command: "bracket", report })?;
    write_csv(&root.join("bracket.csv"), hash, "i,j,k,point,coeff", &rows)?;
    println!(
        "bracket: q={q}, residual {:.3e}, max |c| {:.6} -> {}",
        tensor.residual,
        tensor.max_abs(),
        json.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct FlowReport {
    start: Vec<f64>,
    controls: Vec<f64>,
    time: f64,
    end: Vec<f64>,
    exited: bool,
    step_count: usize,
    error_estimate: f64,
    control_defect: f64,
}

fn cmd_flow(cfg: &ExperimentConfig, hash: &str, root: &Path) -> Result<(), CliError> {
    let fields = require_fields(cfg)?;
    let section = cfg
        .flow
        .as_ref()
        .ok_or_else(|| CliError::Config("missing [flow] section".into()))?;
    let time = section.time.unwrap_or(1.0);
    let tol = section.tol.unwrap_or(DEFAULT_FLOW_TOL);
    let checkpoints = section.checkpoints.unwrap_or(64);
    let trace = flow_controls_with(
        &fields,
        &section.controls,
        &section.start,
        time,
        &fields.domain,
        tol,
        checkpoints,
    )
    .map_err(|e| num_err("flow", e))?;
    let report = FlowReport {
        start: section.start.clone(),
        controls: section.controls.clone(),
        time,
        end: trace.end().to_vec(),
        exited: trace.exited,
        step_count: trace.step_count,
        error_estimate: trace.error_estimate,
        control_defect: trace.max_defect(&fields),
    };
    let n = fields.n();
    let mut header = String::from("r");
    for k in 1..=n {
        header.push_str(&format!(",x{k}"));
    }
    for k in 1..=n {
        header.push_str(&format!(",v{k}"));
    }
    let rows: Vec<String> = trace
        .rs
        .iter()
        .zip(trace.points.iter().zip(&trace.velocities))
        .map(|(r, (p, v))| {
            let mut line = format!("{r}");
            for x in p {
                line.push_str(&format!(",{x}"));
            }
            for x in v {
                line.push_str(&format!(",{x}"));
            }
            line
        })
        .collect();
    let json = root.join("flow.json");
    write_json(&json, &Document { config_hash: hash, command: "flow", report })?;
    write_csv(&root.join("flow_trajectory.csv"), hash, &header, &rows)?;
    println!(
        "flow: end {:?}, exited={}, steps {} -> {}",
        trace.end(),
        trace.exited,
        trace.step_count,
        json.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct DistancePair {
    x: Vec<f64>,
    y: Vec<f64>,
    value: f64,
    graph_bound: f64,
    dyadic_gap: f64,
    connected: bool,
}

#[derive(Serialize)]
struct DistanceSummary {
    cell: f64,
    shell: usize,
    nodes: usize,
    edges: usize,
    failed_edges: usize,
    pairs: Vec<DistancePair>,
}

fn cmd_distance(cfg: &ExperimentConfig, hash: &str, root: &Path) -> Result<(), CliError> {
    let fields = require_fields(cfg)?;
    let section = cfg
        .distance
        .as_ref()
        .ok_or_else(|| CliError::Config("missing [distance] section".into()))?;
    if section.pairs.is_empty() {
        return Err(CliError::Config("distance needs at least one pair".into()));
    }
    let cell = section.cell.unwrap_or(fields.domain.radius / 20.0);
    let net_cfg = CcNetCfg {
        cell,
        shell: section.shell.unwrap_or(CcNetCfg::default().shell),
        flow_tol: section.flow_tol.unwrap_or(CcNetCfg::default().flow_tol),
        shoot_tol: section.shoot_tol.unwrap_or(CcNetCfg::default().shoot_tol),
        ..CcNetCfg::default()
    };
    let shell = net_cfg.shell;
    let net = CcNet::build(&fields, net_cfg);
    let mut pairs = Vec::with_capacity(section.pairs.len());
    let mut rows = Vec::with_capacity(section.pairs.len());
    let mut nodes = 0;
    let mut edges = 0;
    let mut failed = 0;
    for (idx, (x, y)) in section.pairs.iter().enumerate() {
        let rep = net.distance(x, y);
        nodes = rep.nodes;
        edges = rep.edges;
        failed = rep.failed_edges;
        rows.push(format!(
            "{idx},{},{},{}",
            rep.value, rep.graph_bound, rep.connected
        ));
        pairs.push(DistancePair {
            x: x.clone(),
            y: y.clone(),
            value: rep.value,
            graph_bound: rep.graph_bound,
            dyadic_gap: rep.dyadic_gap,
            connected: rep.connected,
        });
    }
    let report = DistanceSummary {
        cell,
        shell,
        nodes,
        edges,
        failed_edges: failed,
        pairs,
    };
    let json = root.join("distance.json");
    write_json(&json, &Document { config_hash: hash, command: "distance", report })?;
    write_csv(
        &root.join("distance_pairs.csv"),
        hash,
        "pair,value,graph_bound,connected",
        &rows,
    )?;
    println!(
        "distance: {} pairs over {nodes} nodes -> {}",
        section.pairs.len(),
        json.display()
    );
    Ok(())
}

fn cmd_volume(cfg: &ExperimentConfig, hash: &str, root: &Path) -> Result<(), CliError> {
    let fields = require_fields(cfg)?;
    let section = cfg
        .volume
        .as_ref()
        .ok_or_else(|| CliError::Config("missing [volume] section".into()))?;
    let delta = section
        .delta
        .ok_or_else(|| CliError::Config("volume needs delta".into()))?;
    if !(delta > 0.0) {
        return Err(CliError::Config(format!("delta must be positive, got {delta}")));
    }
    let x0 = section
        .x0
        .clone()
        .unwrap_or_else(|| fields.domain.center.clone());
    let nu = DensitySpec::parse(&section.weight, fields.n())
        .map_err(|e| CliError::Config(format!("volume weight: {e}")))?;
    let summary =
        nu_ball_mass(&fields, &x0, delta, &nu, &section.cfg, None).map_err(density_err)?;
    let json = root.join("volume.json");
    write_json(&json, &Document { config_hash: hash, command: "volume", report: &summary })?;
    println!(
        "volume: delta {delta}, mass {:.6e}, cells {} -> {}",
        summary.mass,
        summary.hit_cells,
        json.display()
    );
    Ok(())
}

fn infer_dim(expr: &str) -> Result<usize, CliError> {
    for n in 1..=MAX_INFERRED_DIM {
        if parse_field_expr(expr, n).is_ok() {
            return Ok(n);
        }
    }
    Err(CliError::Config(format!(
        "could not parse {expr:?} in up to {MAX_INFERRED_DIM} variables"
    )))
}

fn cmd_norm(cfg: &ExperimentConfig, hash: &str, root: &Path) -> Result<(), CliError> {
    let section = cfg
        .norm
        .as_ref()
        .ok_or_else(|| CliError::Config("missing [norm] section (or pass -f/-s)".into()))?;
    if section.expr.is_empty() {
        return Err(CliError::Config("norm needs an expression".into()));
    }
    if section.s == 0.0 {
        return Err(CliError::Config("norm needs a positive order s".into()));
    }
    let n = infer_dim(&section.expr)?;
    let expr = parse_field_expr(&section.expr, n)
        .map_err(|e| CliError::Config(format!("norm expression: {e}")))?;
    let radius = section.radius.unwrap_or(1.0);
    let mut zyg_cfg = ZygmundCfg {
        res: section.res.unwrap_or(ZygmundCfg::default().res),
        ..ZygmundCfg::default()
    };
    if let Some(k) = section.k_min {
        zyg_cfg.k_min = k;
    }
    if let Some(m) = section.max_scales {
        zyg_cfg.max_scales = m;
    }
    let ball = Ball::new(vec![0.0; n], radius);
    let report = zygmund_norm_grid(ZygTarget::Expr(&expr), section.s, &ball, &zyg_cfg)
        .map_err(|e| num_err("norm", e))?;
    let rows: Vec<String> = report
        .scales
        .iter()
        .zip(&report.seminorm_per_scale)
        .map(|(h, v)| format!("{h},{v}"))
        .collect();
    let json = root.join("norm.json");
    write_json(&json, &Document { config_hash: hash, command: "norm", report: &report })?;
    write_csv(&root.join("norm_scales.csv"), hash, "h,seminorm", &rows)?;
    println!(
        "norm: s={}, norm {:.6e}, fitted_exponent {:.4}, capped={} -> {}",
        section.s,
        report.norm,
        report.fitted_exponent,
        report.capped,
        json.display()
    );
    Ok(())
}

/// Shape of a bundle's embedded config document.
#[derive(Serialize, Deserialize)]
struct BundleConfig {
    config_hash: String,
    config: ExperimentConfig,
}

#[derive(Serialize)]
struct Manifest<'a> {
    config_hash: &'a str,
    name: &'a str,
    n: usize,
    q: usize,
    j0: &'a [usize],
    gamma: f64,
    k_scale: f64,
    seed: u64,
    files: ManifestFiles,
}

#[derive(Serialize)]
struct ManifestFiles {
    config: &'static str,
    diagnostics: &'static str,
    a_final: &'static str,
    phi_points: &'static str,
    b_hat: Option<&'static str>,
}

fn build_chart_from(cfg: &ExperimentConfig) -> Result<(AdaptedChart, FieldSet), CliError> {
    let fields = require_fields(cfg)?;
    let section = cfg
        .chart
        .as_ref()
        .ok_or_else(|| CliError::Config("missing [chart] section".into()))?;
    let chart = build_full_chart(&fields, &section.x0, &section.cfg).map_err(chart_err)?;
    Ok((chart, fields))
}

fn bundle_name(cli: &Cli, cfg: &ExperimentConfig) -> String {
    if let Some(name) = cfg.chart.as_ref().and_then(|c| c.name.clone()) {
        return name;
    }
    cli.config
        .as_ref()
        .and_then(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()))
        .unwrap_or_else(|| "chart".to_string())
}

fn cmd_chart_build(
    cli: &Cli,
    cfg: &ExperimentConfig,
    hash: &str,
    root: &Path,
) -> Result<(), CliError> {
    let (chart, fields) = build_chart_from(cfg)?;
    let name = bundle_name(cli, cfg);
    let dir = root.join(&name);
    fs::create_dir_all(&dir).map_err(|e| io_err("bundle directory", e))?;

    chart
        .a_final
        .write_binary(&dir.join("a_final.bin"))
        .map_err(|e| num_err("assembly", e))?;
    chart
        .chart0
        .phi_points
        .write_binary(&dir.join("phi_points.bin"))
        .map_err(|e| num_err("assembly", e))?;
    let b_hat_file = match &chart.b_hat {
        Some(b) => {
            b.write_binary(&dir.join("b_hat.bin"))
                .map_err(|e| num_err("assembly", e))?;
            Some("b_hat.bin")
        }
        None => None,
    };

    let embedded = BundleConfig {
        config_hash: hash.to_string(),
        config: cfg.clone(),
    };
    let mut cfg_bytes = serde_json::to_vec_pretty(&embedded)
        .map_err(|e| CliError::Config(format!("serializing bundle config: {e}")))?;
    cfg_bytes.push(b'\n');
    fs::write(dir.join("config.json"), cfg_bytes)
        .map_err(|e| io_err("writing bundle config", e))?;
    write_json(
        &dir.join("diagnostics.json"),
        &Document { config_hash: hash, command: "chart build", report: &chart.diagnostics },
    )?;
    let manifest = Manifest {
        config_hash: hash,
        name: &name,
        n: fields.n(),
        q: fields.q(),
        j0: &chart.chart0.frame.j0,
        gamma: chart.gamma,
        k_scale: chart.k_scale,
        seed: cfg.chart.as_ref().map(|c| c.cfg.seed).unwrap_or_default(),
        files: ManifestFiles {
            config: "config.json",
            diagnostics: "diagnostics.json",
            a_final: "a_final.bin",
            phi_points: "phi_points.bin",
            b_hat: b_hat_file,
        },
    };
    write_json(
        &dir.join("manifest.json"),
        &Document { config_hash: hash, command: "chart build", report: &manifest },
    )?;
    println!(
        "chart bundle: {} (gamma {}, K {}, frame {:?})",
        dir.display(),
        chart.gamma,
        chart.k_scale,
        chart.chart0.frame.j0
    );
    Ok(())
}

#[derive(Serialize)]
struct BundleCheck {
    path: String,
    hash_match: bool,
    a_final_gap: f64,
}

#[derive(Serialize)]
struct VerifyDocument<'a> {
    bundle: Option<BundleCheck>,
    report: &'a chartkit::chart::VerificationReport,
}

fn grid_gap(a: &GridField, b: &GridField) -> f64 {
    if a.shape() != b.shape() || a.rank() != b.rank() {
        return f64::INFINITY;
    }
    let mut worst = 0.0f64;
    for r in 0..a.rank() {
        for (x, y) in a.component(r).iter().zip(b.component(r)) {
            worst = worst.max((x - y).abs());
        }
    }
    worst
}

fn cmd_chart_verify(
    cfg: &ExperimentConfig,
    hash: &str,
    root: &Path,
    bundle: Option<&Path>,
) -> Result<(), CliError> {
    let (chart, _fields) = build_chart_from(cfg)?;
    let verify_section = cfg.verify.clone().unwrap_or_default();
    let vcfg = verify_section.to_cfg();
    let s_list = verify_section
        .s_list
        .unwrap_or_else(|| vec![cfg.chart.as_ref().map(|c| c.cfg.s0).unwrap_or(1.5)]);
    let report = verify_theorem(&chart, &s_list, &vcfg);

    let bundle_check = match bundle {
        Some(dir) => {
            let stored_cfg_text = fs::read_to_string(dir.join("config.json"))
                .map_err(|e| io_err("bundle config.json", e))?;
            let stored: BundleConfig = serde_json::from_str(&stored_cfg_text)
                .map_err(|e| CliError::Config(format!("bundle config.json: {e}")))?;
            let stored_grid = GridField::read_binary(&dir.join("a_final.bin"))
                .map_err(|e| CliError::Config(format!("bundle a_final.bin: {e}")))?;
            Some(BundleCheck {
                path: dir.display().to_string(),
                hash_match: stored.config_hash == hash,
                a_final_gap: grid_gap(&stored_grid, &chart.a_final),
            })
        }
        None => None,
    };

    for item in &report.items {
        println!(
            "item {}: {} (value {:.3e}, threshold {:.3e}){}",
            item.label,
            if item.pass { "pass" } else { "FAIL" },
            item.value,
            item.threshold,
            if item.note.is_empty() {
                String::new()
            } else {
                format!(" [{}]", item.note)
            }
        );
    }
    println!("all_pass: {}", report.all_pass);

    let exp_rows: Vec<String> = report
        .exponent_table
        .iter()
        .map(|r| {
            format!(
                "{},{},{},{},{},{}",
                r.field, r.s, r.fitted, r.capped, r.norm, r.pass
            )
        })
        .collect();
    let equiv_rows: Vec<String> = report
        .equivalence_table
        .iter()
        .map(|r| {
            format!(
                "{},{},{},{},{}",
                r.function, r.s, r.chart_norm, r.ambient_frame, r.ambient_full
            )
        })
        .collect();
    let json = root.join("verify.json");
    write_json(
        &json,
        &Document {
            config_hash: hash,
            command: "chart verify",
            report: VerifyDocument { bundle: bundle_check, report: &report },
        },
    )?;
    write_csv(
        &root.join("verify_exponents.csv"),
        hash,
        "field,s,fitted,capped,norm,pass",
        &exp_rows,
    )?;
    write_csv(
        &root.join("verify_equivalence.csv"),
        hash,
        "function,s,chart_norm,ambient_frame,ambient_full",
        &equiv_rows,
    )?;
    println!("verify report -> {}", json.display());
    Ok(())
}

#[derive(Serialize)]
struct DensityJson<'a> {
    g_ratio_defined: bool,
    sign_constant: bool,
    jacobian_residual: f64,
    h0_identity_residual: f64,
    g_origin: f64,
    nu_frame_origin: f64,
    g_origin_defect: f64,
    h_min: f64,
    h_max: f64,
    h_fitted: f64,
    h_capped: bool,
    h_norm: f64,
    divergence_rates: Vec<String>,
    volume_table: Option<&'a chartkit::densities::VolumeTable>,
    files: DensityFiles,
}

#[derive(Serialize)]
struct DensityFiles {
    h: &'static str,
    h0: &'static str,
    g_ratio: &'static str,
}

fn cmd_density(cfg: &ExperimentConfig, hash: &str, root: &Path) -> Result<(), CliError> {
    let (chart, fields) = build_chart_from(cfg)?;
    let section = cfg.density.clone().unwrap_or_default();
    let nu = DensitySpec::parse(&section.weight, fields.n())
        .map_err(|e| CliError::Config(format!("density weight: {e}")))?;
    let dcfg = DensityCfg {
        res: section.res.unwrap_or(DensityCfg::default().res),
        s: section
            .s
            .unwrap_or_else(|| cfg.chart.as_ref().map(|c| c.cfg.s0).unwrap_or(1.5)),
        volumes: None,
    };
    let mut report = pullback_density(&chart, &nu, &dcfg).map_err(density_err)?;
    if section.volumes {
        let vcfg = cfg.volume.clone().unwrap_or_default().cfg;
        report.volume_table = Some(volume_compare(&chart, &nu, &vcfg).map_err(density_err)?);
    }

    report
        .h
        .write_binary(&root.join("density_h.bin"))
        .map_err(|e| num_err("density", e))?;
    report
        .h0
        .write_binary(&root.join("density_h0.bin"))
        .map_err(|e| num_err("density", e))?;
    report
        .g_ratio
        .write_binary(&root.join("density_g_ratio.bin"))
        .map_err(|e| num_err("density", e))?;

    let doc = DensityJson {
        g_ratio_defined: report.g_ratio_defined,
        sign_constant: report.sign_constant,
        jacobian_residual: report.jacobian_residual,
        h0_identity_residual: report.h0_identity_residual,
        g_origin: report.g_origin,
        nu_frame_origin: report.nu_frame_origin,
        g_origin_defect: report.g_origin_defect,
        h_min: report.h_min,
        h_max: report.h_max,
        h_fitted: report.h_fitted,
        h_capped: report.h_capped,
        h_norm: report.h_norm,
        divergence_rates: report.f_j.iter().map(|e| e.to_string()).collect(),
        volume_table: report.volume_table.as_ref(),
        files: DensityFiles {
            h: "density_h.bin",
            h0: "density_h0.bin",
            g_ratio: "density_g_ratio.bin",
        },
    };
    let json = root.join("density.json");
    write_json(&json, &Document { config_hash: hash, command: "density", report: doc })?;
    println!(
        "density: sign_constant={}, jacobian residual {:.3e} -> {}",
        report.sign_constant,
        report.jacobian_residual,
        json.display()
    );
    Ok(())
}
