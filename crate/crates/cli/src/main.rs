//! Command-line front end: scenario validation, exact and quadratic solves,
//! quote tables, forward-law KPIs and parameter sweeps.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numerical error, 4 I/O
//! error. Failures print a machine-readable JSON object to stderr:
//! `{"code", "module", "message", "context"}`.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use rfqmm_core::begv;
use rfqmm_core::error::Error;
use rfqmm_core::export;
use rfqmm_core::forward_kpi::{self, SweepAxis};
use rfqmm_core::hamiltonian::{linearization_constants, TableSet};
use rfqmm_core::hjb_exact::{self, InventoryGrid, SolveParams};
use rfqmm_core::quotes::{self, PSource, QuoteMode, QuotePolicy, XiClosure};
use rfqmm_core::scenario::{parse_scenario_str, Scenario};

/// Bundled scenario fixtures, addressable by name through `--scenario`.
pub fn bundled_scenarios() -> Vec<(&'static str, &'static str)> {
    vec![
        ("baseline", include_str!("../scenarios/baseline.toml")),
        ("two-tier", include_str!("../scenarios/two_tier.toml")),
        ("two-bond", include_str!("../scenarios/two_bond.toml")),
        ("asym-toy", include_str!("../scenarios/asym_toy.toml")),
    ]
}

#[derive(Parser)]
#[command(
    name = "rfqmm",
    version,
    about = "Optimal OTC quoting on a size ladder with inventory risk and hit-ratio targets"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse and validate a scenario, printing a summary
    Validate {
        /// Scenario file path or bundled name (baseline, two-tier, two-bond, asym-toy)
        #[arg(long)]
        scenario: String,
    },
    /// Solve the exact dualized HJB backward in time and export value/policy slices
    SolveExact {
        #[arg(long)]
        scenario: String,
        /// Explicit Euler time step in days (default: stability-bounded)
        #[arg(long)]
        dt: Option<f64>,
        /// Output directory
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Time of the exported policy slice (default 0)
        #[arg(long)]
        t: Option<f64>,
    },
    /// Compute the quadratic value objects (A, B, dual closures) and export paths
    SolveBegv {
        #[arg(long)]
        scenario: String,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Build a quote surface in the chosen mode and export CSV plus a single-state JSON query
    Quotes {
        #[arg(long)]
        scenario: String,
        /// exact | begv_exact_map_xi_q | begv_exact_map_xi_quadratic | begv_exact_map_xi_const | linearized
        #[arg(long, default_value = "begv_exact_map_xi_q")]
        mode: String,
        /// Solver time step for exact mode
        #[arg(long)]
        dt: Option<f64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Inventory state for the JSON query, comma-separated millions per bond (default flat)
        #[arg(long)]
        q: Option<String>,
        /// Policy slice time for exact mode (default 0)
        #[arg(long)]
        t: Option<f64>,
    },
    /// Propagate the inventory law under the frozen stationary policy and report KPIs
    Forward {
        #[arg(long)]
        scenario: String,
        /// Policy mode (default: exact for one bond, begv_exact_map_xi_q otherwise)
        #[arg(long)]
        mode: Option<String>,
        /// Propagation time step (default: 0.1 / max outflow rate)
        #[arg(long)]
        dt: Option<f64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Initial inventory, comma-separated millions per bond (default flat)
        #[arg(long)]
        q: Option<String>,
    },
    /// Sweep an axis (kappa | intensity_ratio | correlation), solving and propagating per value
    Sweep {
        #[arg(long)]
        scenario: String,
        #[arg(long)]
        axis: String,
        /// Comma-separated axis values
        #[arg(long)]
        values: String,
        /// Solver time step override for the per-value solves
        #[arg(long)]
        dt: Option<f64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

/// Effective run configuration, embedded in the manifest and hashed.
#[derive(Serialize)]
struct RunConfig {
    command: String,
    scenario: String,
    mode: Option<String>,
    dt: Option<f64>,
    out: String,
    axis: Option<String>,
    values: Option<Vec<f64>>,
    q: Option<Vec<f64>>,
    t: Option<f64>,
    /// Reserved for sampled property checks; commands are deterministic.
    seed: u64,
}

#[derive(Serialize)]
struct Manifest {
    command: String,
    scenario: String,
    scenario_sha256: String,
    config: RunConfig,
    input_hash: String,
    outputs: Vec<String>,
    versions: std::collections::BTreeMap<String, String>,
    wall_time_s: f64,
}

#[derive(Serialize)]
struct ErrorJson<'a> {
    code: i32,
    module: &'a str,
    message: String,
    context: String,
}

fn main() {
    if let Ok(threads) = std::env::var("RFQMM_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            if n >= 1 {
                let _ = rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global();
            }
        }
    }
    let cli = Cli::parse();
    let context = command_name(&cli.command).to_string();
    match run(cli) {
        Ok(()) => {}
        Err(e) => {
            let code = match &e {
                Error::Invalid { .. } => 2,
                Error::Numerical { .. } => 3,
                Error::Io(_) => 4,
            };
            let doc = ErrorJson {
                code,
                module: e.module(),
                message: format!("{e}"),
                context,
            };
            eprintln!("{}", serde_json::to_string(&doc).unwrap());
            std::process::exit(code);
        }
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Validate { .. } => "validate",
        Command::SolveExact { .. } => "solve-exact",
        Command::SolveBegv { .. } => "solve-begv",
        Command::Quotes { .. } => "quotes",
        Command::Forward { .. } => "forward",
        Command::Sweep { .. } => "sweep",
    }
}

/// Resolve `--scenario` against the bundled fixtures, then the filesystem.
fn load(scenario: &str) -> Result<(Scenario, String), Error> {
    for (name, text) in bundled_scenarios() {
        if name == scenario {
            return Ok((parse_scenario_str(text)?, text.to_string()));
        }
    }
    let text = std::fs::read_to_string(Path::new(scenario))?;
    Ok((parse_scenario_str(&text)?, text))
}

fn parse_q(q: &Option<String>, grid: &InventoryGrid) -> Result<usize, Error> {
    let coords: Vec<f64> = match q {
        None => vec![0.0; grid.n_bonds()],
        Some(text) => {
            let parsed: Result<Vec<f64>, _> =
                text.split(',').map(|s| s.trim().parse::<f64>()).collect();
            parsed.map_err(|e| Error::invalid("cli", format!("--q: {e}")))?
        }
    };
    if coords.len() != grid.n_bonds() {
        return Err(Error::invalid(
            "cli",
            format!("--q needs {} comma-separated values", grid.n_bonds()),
        ));
    }
    let steps: Result<Vec<i64>, Error> = coords
        .iter()
        .map(|&x| {
            let s = (x / grid.unit()).round();
            if (s * grid.unit() - x).abs() > 1e-9 * x.abs().max(1.0) {
                Err(Error::invalid(
                    "cli",
                    format!("--q value {x} is not on the {}-unit lattice", grid.unit()),
                ))
            } else {
                Ok(s as i64)
            }
        })
        .collect();
    grid.index_of(&steps?)
}

fn parse_values(text: &str) -> Result<Vec<f64>, Error> {
    let parsed: Result<Vec<f64>, _> = text.split(',').map(|s| s.trim().parse::<f64>()).collect();
    let v = parsed.map_err(|e| Error::invalid("cli", format!("--values: {e}")))?;
    if v.is_empty() {
        return Err(Error::invalid("cli", "--values must not be empty"));
    }
    Ok(v)
}

fn write_outputs(
    out: &Path,
    files: &[(&str, String)],
    config: RunConfig,
    scenario_text: &str,
    started: Instant,
) -> Result<(), Error> {
    std::fs::create_dir_all(out)?;
    let mut outputs = Vec::new();
    for (name, content) in files {
        std::fs::write(out.join(name), content)?;
        outputs.push(name.to_string());
    }
    let scenario_sha256 = hex(&Sha256::digest(scenario_text.as_bytes()));
    let config_json = serde_json::to_string(&config).unwrap();
    let mut hasher = Sha256::new();
    hasher.update(scenario_text.as_bytes());
    hasher.update(config_json.as_bytes());
    let input_hash = hex(&hasher.finalize());
    let mut versions = std::collections::BTreeMap::new();
    versions.insert(
        "rfqmm-core".to_string(),
        env!("CARGO_PKG_VERSION").to_string(),
    );
    versions.insert(
        "rfqmm-cli".to_string(),
        env!("CARGO_PKG_VERSION").to_string(),
    );
    let manifest = Manifest {
        command: config.command.clone(),
        scenario: config.scenario.clone(),
        scenario_sha256,
        config,
        input_hash,
        outputs,
        versions,
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    std::fs::write(
        out.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).unwrap() + "\n",
    )?;
    Ok(())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Per-bond axis slices through the origin (the default quote-table states
/// for multi-bond lattices, where the full lattice is too large to print).
fn axis_states(grid: &InventoryGrid) -> Vec<usize> {
    let mut states: Vec<usize> = Vec::new();
    let n = grid.steps_per_side();
    for m in 0..grid.n_bonds() {
        for c in -n..=n {
            let mut coords = vec![0i64; grid.n_bonds()];
            coords[m] = c;
            states.push(grid.index_of(&coords).unwrap());
        }
    }
    states.sort_unstable();
    states.dedup();
    states
}

fn stationary_quadratic(
    scenario: &Scenario,
    tables: &TableSet,
) -> Result<begv::QuadraticValue, Error> {
    if scenario.spec.risk().phi <= 0.0 {
        return Err(Error::invalid(
            "cli",
            "stationary quote modes require phi > 0; use solve-exact for phi = 0",
        ));
    }
    begv::quadratic_value(&scenario.spec, tables, 2)
}

fn build_policy(
    scenario: &Scenario,
    grid: &InventoryGrid,
    mode: QuoteMode,
    dt: Option<f64>,
    t: Option<f64>,
    states: &[usize],
) -> Result<QuotePolicy, Error> {
    let spec = &scenario.spec;
    match mode {
        QuoteMode::Exact => {
            let params = SolveParams {
                dt,
                store_every: None,
            };
            let (value, tables) = hjb_exact::solve_auto(spec, grid, &params)?;
            let policy = hjb_exact::extract_policy(&value, spec, &tables, t.unwrap_or(0.0))?;
            Ok(policy)
        }
        QuoteMode::BegvXiQ => {
            let tables = TableSet::build_default(spec)?;
            let qv = stationary_quadratic(scenario, &tables)?;
            let b = if qv.coeffs.is_zero() {
                None
            } else {
                Some(qv.b_stat.as_slice())
            };
            let src = PSource::Quadratic {
                a: &qv.a_stat,
                b,
                closure: XiClosure::FixedPoint,
            };
            quotes::quote_from_value(spec, grid, &tables, &src, states)
        }
        QuoteMode::BegvXiConst => {
            let tables = TableSet::build_default(spec)?;
            let qv = stationary_quadratic(scenario, &tables)?;
            let lin = begv::linear_xi_closure(spec, &tables, &qv.coeffs, &qv.a_stat, &qv.b_stat)?;
            let b = if qv.coeffs.is_zero() {
                None
            } else {
                Some(qv.b_stat.as_slice())
            };
            let src = PSource::Quadratic {
                a: &qv.a_stat,
                b,
                closure: XiClosure::AsymLinear(&lin),
            };
            quotes::quote_from_value(spec, grid, &tables, &src, states)
        }
        QuoteMode::BegvXiQuadratic => {
            let tables = TableSet::build_default(spec)?;
            let qv = stationary_quadratic(scenario, &tables)?;
            let lq = begv::xi_local_quadratic(spec, &tables, &qv.a_stat)?;
            let src = PSource::Quadratic {
                a: &qv.a_stat,
                b: None,
                closure: XiClosure::LocalQuadratic(&lq),
            };
            quotes::quote_from_value(spec, grid, &tables, &src, states)
        }
        QuoteMode::Linearized => {
            let tables = TableSet::build_default(spec)?;
            let qv = stationary_quadratic(scenario, &tables)?;
            let consts: Result<Vec<_>, Error> = spec
                .rungs()
                .iter()
                .map(|r| linearization_constants(r.lambda, &r.curve))
                .collect();
            let lin = begv::linear_xi_closure(spec, &tables, &qv.coeffs, &qv.a_stat, &qv.b_stat)?;
            let b = if qv.coeffs.is_zero() {
                None
            } else {
                Some(qv.b_stat.as_slice())
            };
            quotes::quote_linearized(spec, grid, &consts?, &qv.a_stat, b, &lin, states)
        }
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    let started = Instant::now();
    match cli.command {
        Command::Validate { scenario } => {
            let (sc, _) = load(&scenario)?;
            let spec = &sc.spec;
            println!(
                "scenario ok: {} bond(s), {} tier(s), {} active rung(s), ladder unit {} M, q_max {} M, horizon {} day(s), side-symmetric: {}",
                spec.n_bonds(),
                spec.n_tiers(),
                spec.rungs().len(),
                spec.ladder().grid_unit(),
                sc.q_max,
                spec.risk().horizon,
                spec.side_symmetric(),
            );
            for tau in spec.targets().targeted() {
                let t = spec.targets().get(tau).unwrap();
                println!(
                    "target: tier '{}' r_star {} kappa {} (W = {} M/day)",
                    spec.tiers()[tau],
                    t.r_star,
                    t.kappa,
                    spec.notional_scale(tau)?,
                );
            }
            Ok(())
        }

        Command::SolveExact {
            scenario,
            dt,
            out,
            t,
        } => {
            let (sc, text) = load(&scenario)?;
            let grid = InventoryGrid::new(sc.spec.ladder(), sc.spec.n_bonds(), sc.q_max)?;
            let params = SolveParams {
                dt,
                store_every: None,
            };
            let (value, tables) = hjb_exact::solve_auto(&sc.spec, &grid, &params)?;
            let t_slice = t.unwrap_or(0.0);
            let policy = hjb_exact::extract_policy(&value, &sc.spec, &tables, t_slice)?;
            // up to 11 evenly spaced stored slices for the value export
            let n = value.t_stored.len();
            let step = ((n - 1) / 10).max(1);
            let mut slice_indices: Vec<usize> = (0..n).step_by(step).collect();
            if *slice_indices.last().unwrap() != n - 1 {
                slice_indices.push(n - 1);
            }
            let ts: Vec<f64> = slice_indices.iter().map(|&i| value.t_stored[i]).collect();
            let files = vec![
                ("value.csv", export::value_csv(&value, &ts)?),
                (
                    "policy.csv",
                    export::policy_csv(&sc.spec, &grid, &policy, t_slice),
                ),
            ];
            let config = RunConfig {
                command: "solve-exact".into(),
                scenario,
                mode: None,
                dt,
                out: out.display().to_string(),
                axis: None,
                values: None,
                q: None,
                t: Some(t_slice),
                seed: 0,
            };
            write_outputs(&out, &files, config, &text, started)
        }

        Command::SolveBegv { scenario, out } => {
            let (sc, text) = load(&scenario)?;
            let spec = &sc.spec;
            let tables = TableSet::build_default(spec)?;
            let qv = begv::quadratic_value(spec, &tables, 201)?;
            // explicit (asym-aware) dual constant along the path
            let mut xi0 = Vec::with_capacity(qv.t_grid.len());
            for k in 0..qv.t_grid.len() {
                let lin = begv::linear_xi_closure(
                    spec,
                    &tables,
                    &qv.coeffs,
                    &qv.a_path[k],
                    &qv.b_path[k],
                )?;
                xi0.push(lin.constant);
            }
            let mut files = vec![("begv_paths.csv", export::begv_paths_csv(spec, &qv, &xi0))];
            if spec.risk().phi > 0.0 {
                let closures = begv::tier_closures(spec, &tables)?;
                let mut kappa_tilde = vec![0.0; spec.n_tiers()];
                for tc in &closures {
                    kappa_tilde[tc.tier] = tc.kappa_tilde;
                }
                let lin_stat =
                    begv::linear_xi_closure(spec, &tables, &qv.coeffs, &qv.a_stat, &qv.b_stat)?;
                files.push((
                    "begv_stationary.json",
                    export::begv_stationary_json(spec, &qv, &kappa_tilde, &lin_stat.constant)?,
                ));
            }
            let config = RunConfig {
                command: "solve-begv".into(),
                scenario,
                mode: None,
                dt: None,
                out: out.display().to_string(),
                axis: None,
                values: None,
                q: None,
                t: None,
                seed: 0,
            };
            write_outputs(&out, &files, config, &text, started)
        }

        Command::Quotes {
            scenario,
            mode,
            dt,
            out,
            q,
            t,
        } => {
            let (sc, text) = load(&scenario)?;
            let mode_parsed = QuoteMode::parse(&mode)?;
            let grid = InventoryGrid::new(sc.spec.ladder(), sc.spec.n_bonds(), sc.q_max)?;
            // exported states: the whole lattice for one bond, per-bond axis
            // slices (plus the queried state) otherwise — the full multi-bond
            // lattice is too large to print usefully
            let q_state = parse_q(&q, &grid)?;
            let states: Vec<usize> = if sc.spec.n_bonds() == 1 {
                (0..grid.state_count()).collect()
            } else {
                let mut s = axis_states(&grid);
                s.push(q_state);
                s.sort_unstable();
                s.dedup();
                s
            };
            let mut policy = build_policy(&sc, &grid, mode_parsed, dt, t, &states)?;
            if policy.states.len() > states.len() {
                // exact mode extracts the whole lattice; print only the slices
                policy = policy.subset(&states)?;
            }
            let q_vec = grid.q_millions(q_state);
            let files = vec![
                (
                    "quotes.csv",
                    quotes::policy_table(&sc.spec, &grid, &policy)?,
                ),
                (
                    "quotes.json",
                    export::quotes_json(&sc.spec, &grid, &policy, q_state)?,
                ),
            ];
            let config = RunConfig {
                command: "quotes".into(),
                scenario,
                mode: Some(mode),
                dt,
                out: out.display().to_string(),
                axis: None,
                values: None,
                q: Some(q_vec),
                t,
                seed: 0,
            };
            write_outputs(&out, &files, config, &text, started)
        }

        Command::Forward {
            scenario,
            mode,
            dt,
            out,
            q,
        } => {
            let (sc, text) = load(&scenario)?;
            let grid = InventoryGrid::new(sc.spec.ladder(), sc.spec.n_bonds(), sc.q_max)?;
            let (policy, mode_label) = match &mode {
                None => forward_kpi::stationary_policy(&sc.spec, &grid, None)?,
                Some(m) => {
                    let parsed = QuoteMode::parse(m)?;
                    let states: Vec<usize> = (0..grid.state_count()).collect();
                    (
                        build_policy(&sc, &grid, parsed, None, None, &states)?,
                        m.clone(),
                    )
                }
            };
            let worst = forward_kpi::max_outflow(&policy, &sc.spec, &grid)?;
            let dt_prop = dt.unwrap_or((0.1 / worst).min(sc.spec.risk().horizon));
            let q0 = parse_q(&q, &grid)?;
            let law = forward_kpi::forward_propagate(&policy, &sc.spec, &grid, q0, dt_prop, None)?;
            let kpi = forward_kpi::expected_objective(&law, &sc.spec)?;
            let files = vec![
                ("law.csv", export::law_csv(&law, &grid)),
                (
                    "kpi.json",
                    serde_json::to_string_pretty(&kpi).expect("serialization cannot fail") + "\n",
                ),
            ];
            let config = RunConfig {
                command: "forward".into(),
                scenario,
                mode: Some(mode_label),
                dt: Some(dt_prop),
                out: out.display().to_string(),
                axis: None,
                values: None,
                q: Some(grid.q_millions(q0)),
                t: None,
                seed: 0,
            };
            write_outputs(&out, &files, config, &text, started)
        }

        Command::Sweep {
            scenario,
            axis,
            values,
            dt,
            out,
        } => {
            let (sc, text) = load(&scenario)?;
            let axis_parsed = SweepAxis::parse(&axis)?;
            let values_parsed = parse_values(&values)?;
            let table = forward_kpi::sweep(&sc.spec, sc.q_max, axis_parsed, &values_parsed, dt)?;
            for row in &table.rows {
                if let Some(err) = &row.error {
                    eprintln!("sweep value {}: {err}", row.axis_value);
                }
            }
            let files = vec![("sweep.csv", table.to_csv())];
            let config = RunConfig {
                command: "sweep".into(),
                scenario,
                mode: None,
                dt,
                out: out.display().to_string(),
                axis: Some(axis),
                values: Some(values_parsed),
                q: None,
                t: None,
                seed: 0,
            };
            write_outputs(&out, &files, config, &text, started)
        }
    }
}
