use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use anyhow::{bail, Context, Result};
use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use strata::apps::cholesky::{self, CholeskyConfig, CholeskyProgram};
use strata::apps::rk4::{self, CrsMatrix, Rk4Config, Rk4Program};
use strata::datahier::read_matrix;
use strata::observe::{convert_trace, write_stats, write_trace};
use strata::runtime::RankOutcome;
use strata::transport::{RankTable, SocketTransport};
use strata::{run_rank, run_simnet, ExecutorKind, ProcessGrid, Program, RunConfig, RunOutcome};

/// Distributed hierarchical task runtime driver.
#[derive(Parser, Debug)]
#[command(name = "strata", version, about)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Blocked Cholesky factorization of a dense SPD matrix.
    Cholesky(CholeskyArgs),
    /// RK4 time stepping of H' = D·H for a sparse D.
    Rk4(Rk4Args),
    /// Run an application with empty kernels to count messages and work.
    Simulate {
        #[command(subcommand)]
        app: SimApp,
    },
    /// Convert a TSV trace into browser-profiler JSON.
    TraceConvert { input: PathBuf, output: PathBuf },
}

#[derive(Subcommand, Debug)]
enum SimApp {
    Cholesky(CholeskyArgs),
    Rk4(Rk4Args),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum TransportKind {
    /// All ranks in this process over the simulated network.
    Simnet,
    /// One process per rank over TCP.
    Socket,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Executor {
    Threaded,
    Discrete,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Process grid, e.g. 2x2.
    #[arg(long)]
    grid: Option<ProcessGrid>,
    /// Rank count; must equal the grid size.
    #[arg(long)]
    ranks: Option<usize>,
    /// Worker threads per rank.
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Macro steps in flight per rank.
    #[arg(long, default_value_t = 4)]
    window: usize,
    /// Defaults to threaded, or discrete under `simulate`.
    #[arg(long, value_enum)]
    executor: Option<Executor>,
    /// Randomize the discrete executor's schedule from the seed.
    #[arg(long)]
    fuzz: bool,
    #[arg(long, value_enum, default_value_t = TransportKind::Simnet)]
    transport: TransportKind,
    /// `rank address` lines, one per rank (socket transport).
    #[arg(long)]
    rank_table: Option<PathBuf>,
    /// This process's rank (socket transport).
    #[arg(long)]
    rank: Option<usize>,
    /// Seconds to wait for all peers to connect.
    #[arg(long, default_value_t = 30)]
    connect_timeout: u64,
    /// Check the result against a serial reference.
    #[arg(long)]
    verify: bool,
    /// Empty kernels and one-byte messages.
    #[arg(long)]
    sim: bool,
    /// TSV trace output; `{rank}` is replaced under the socket transport.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Stats CSV output; `{rank}` is replaced under the socket transport.
    #[arg(long)]
    stats: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CholeskyArgs {
    /// Matrix edge.
    #[arg(long = "N")]
    size: Option<usize>,
    /// Blocks per edge.
    #[arg(long = "B")]
    blocks: usize,
    /// Tiles per block edge.
    #[arg(long = "b", default_value_t = 1)]
    tiles: usize,
    /// Tile edge; sets N = B·b·n.
    #[arg(long = "n")]
    tile_edge: Option<usize>,
    /// Dense input in the datahier binary format; default is a seeded SPD matrix.
    #[arg(long)]
    input: Option<PathBuf>,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args, Debug)]
struct Rk4Args {
    /// Size of the random D; ignored with --matrix.
    #[arg(long = "N")]
    size: Option<usize>,
    /// Block rows; defaults to the rank count.
    #[arg(long = "B")]
    blocks: Option<usize>,
    /// Sub-rows per block row.
    #[arg(long = "b", default_value_t = 1)]
    tiles: usize,
    /// D in Matrix Market coordinate format.
    #[arg(long)]
    matrix: Option<PathBuf>,
    /// Nonzeros per row of the random D.
    #[arg(long, default_value_t = 10)]
    nnz_per_row: usize,
    #[arg(long, default_value_t = 20)]
    steps: usize,
    #[arg(long, default_value_t = 0.01)]
    dt: f64,
    #[command(flatten)]
    run: RunArgs,
}

fn usage_error(msg: impl std::fmt::Display) -> ! {
    Cli::command().error(ErrorKind::ArgumentConflict, msg).exit()
}

/// Resolves grid and rank count, exiting with a usage error on a mismatch.
fn layout(run: &RunArgs) -> (ProcessGrid, usize) {
    let grid = match (run.grid, run.ranks) {
        (Some(g), _) => g,
        (None, r) => ProcessGrid::column(r.unwrap_or(1)).unwrap_or_else(|e| usage_error(e)),
    };
    let ranks = run.ranks.unwrap_or_else(|| grid.ranks());
    if grid.ranks() != ranks {
        usage_error(format!(
            "--grid {grid} has {} ranks but --ranks is {ranks}",
            grid.ranks()
        ));
    }
    (grid, ranks)
}

fn run_config(run: &RunArgs, simulate: bool) -> RunConfig {
    let sim = simulate || run.sim;
    if sim && run.verify {
        usage_error("--verify needs real kernels; drop --sim or use a non-simulate subcommand");
    }
    let executor = match run.executor {
        Some(Executor::Threaded) => ExecutorKind::Threaded,
        Some(Executor::Discrete) => ExecutorKind::Discrete,
        None if simulate => ExecutorKind::Discrete,
        None => ExecutorKind::Threaded,
    };
    if run.transport == TransportKind::Socket {
        if executor == ExecutorKind::Discrete {
            usage_error("the discrete executor needs --transport simnet");
        }
        if run.rank_table.is_none() || run.rank.is_none() {
            usage_error("--transport socket needs --rank-table and --rank");
        }
    }
    if run.fuzz && executor != ExecutorKind::Discrete {
        usage_error("--fuzz applies to the discrete executor only");
    }
    RunConfig {
        workers: run.workers,
        window: run.window,
        seed: run.seed,
        sim,
        trace: run.trace.is_some(),
        executor,
        fuzz: run.fuzz,
        ..Default::default()
    }
}

/// Result of one launch: every rank under simnet, one rank under sockets.
struct Launch {
    outcome: RunOutcome,
    rank: Option<usize>,
    elapsed: Duration,
}

fn launch(program: Arc<dyn Program>, ranks: usize, run: &RunArgs, cfg: &RunConfig) -> Result<Launch> {
    let start = Instant::now();
    let (outcome, rank) = match run.transport {
        TransportKind::Simnet => (run_simnet(program, ranks, cfg)?, None),
        TransportKind::Socket => {
            let table_path = run.rank_table.as_deref().expect("checked in run_config");
            let rank = run.rank.expect("checked in run_config");
            let table = RankTable::load(table_path).with_context(|| format!("reading {}", table_path.display()))?;
            if table.len() != ranks {
                bail!("rank table lists {} ranks, the run needs {ranks}", table.len());
            }
            if rank >= ranks {
                bail!("--rank {rank} is outside 0..{ranks}");
            }
            let transport =
                SocketTransport::connect(rank as strata::Rank, &table, Duration::from_secs(run.connect_timeout))
                    .context("connecting to peers")?;
            let out: RankOutcome = run_rank(program, Box::new(transport), cfg)?;
            (RunOutcome { ranks: vec![out] }, Some(rank))
        }
    };
    Ok(Launch {
        outcome,
        rank,
        elapsed: start.elapsed(),
    })
}

fn output_path(path: &Path, rank: Option<usize>) -> PathBuf {
    match rank {
        Some(r) => PathBuf::from(path.to_string_lossy().replace("{rank}", &r.to_string())),
        None => path.to_path_buf(),
    }
}

fn write_outputs(l: &Launch, run: &RunArgs) -> Result<()> {
    let stats = l.outcome.stats();
    if let Some(p) = &run.stats {
        let p = output_path(p, l.rank);
        write_stats(&p, &stats.ranks).with_context(|| format!("writing {}", p.display()))?;
    }
    if let Some(p) = &run.trace {
        let p = output_path(p, l.rank);
        write_trace(&p, &l.outcome.trace()).with_context(|| format!("writing {}", p.display()))?;
    }
    let sum = |f: fn(&strata::RankStats) -> u64| stats.ranks.iter().map(f).sum::<u64>();
    println!(
        "tasks: {} level-0, {} level-1; messages: {}; bytes: {}; max pending: {}; work variance: {:.4e}; elapsed: {:.3}s",
        sum(|r| r.tasks_l0),
        sum(|r| r.tasks_l1),
        stats.total_messages(),
        stats.total_bytes(),
        stats.max_pending(),
        stats.work_variance(),
        l.elapsed.as_secs_f64()
    );
    Ok(())
}

fn run_cholesky(args: &CholeskyArgs, simulate: bool) -> Result<bool> {
    let (grid, ranks) = layout(&args.run);
    let cfg_run = run_config(&args.run, simulate);
    let input = args
        .input
        .as_deref()
        .map(|p| read_matrix(p).with_context(|| format!("reading {}", p.display())))
        .transpose()?;
    let n = match (args.size, args.tile_edge, &input) {
        (_, _, Some((meta, _))) => {
            if meta.rows != meta.cols {
                bail!("input matrix is {}x{}, not square", meta.rows, meta.cols);
            }
            meta.rows
        }
        (Some(n), None, None) => n,
        (None, Some(t), None) => args.blocks * args.tiles * t,
        (Some(n), Some(t), None) if n == args.blocks * args.tiles * t => n,
        (Some(n), Some(t), None) => usage_error(format!("--N {n} is not B·b·n = {}", args.blocks * args.tiles * t)),
        (None, None, None) => usage_error("give --N, --n or --input"),
    };
    let cfg = CholeskyConfig::new(n, args.blocks, args.tiles, grid).unwrap_or_else(|e| usage_error(e));
    println!(
        "cholesky: N={n} B={} b={} n={} grid={grid} ranks={ranks} workers={} executor={}{}",
        cfg.blocks,
        cfg.tiles,
        cfg.tile_edge(),
        cfg_run.workers,
        cfg_run.executor,
        if cfg_run.sim { " sim" } else { "" }
    );
    let a = if cfg_run.sim {
        None
    } else {
        Some(Arc::new(match input {
            Some((_, data)) => data,
            None => cholesky::spd_matrix(n, args.run.seed),
        }))
    };
    let program: Arc<dyn Program> = match &a {
        Some(a) => Arc::new(CholeskyProgram::new(cfg, a.clone())?),
        None => Arc::new(CholeskyProgram::symbolic(cfg)?),
    };
    let l = launch(program, ranks, &args.run, &cfg_run)?;
    write_outputs(&l, &args.run)?;
    let Some(a) = a.filter(|_| args.run.verify) else {
        return Ok(true);
    };
    let reference = cholesky::serial_cholesky(&a, n).context("serial reference factorization")?;
    let (blocks, diff) = cholesky::max_block_diff(&l.outcome, &cfg, &reference)?;
    let mut ok = diff <= 1e-10;
    if l.rank.is_none() {
        let factor = cholesky::gather_factor(&l.outcome, &cfg)?;
        let residual = cholesky::relative_residual(&a, &factor, n);
        ok &= residual <= 1e-10;
        println!("verify: residual {residual:.3e}, max diff to serial {diff:.3e} over {blocks} blocks");
    } else {
        println!("verify: max diff to serial {diff:.3e} over {blocks} owned blocks");
    }
    Ok(ok)
}

fn run_rk4(args: &Rk4Args, simulate: bool) -> Result<bool> {
    let (grid, ranks) = layout(&args.run);
    if grid.cols() != 1 {
        usage_error(format!("rk4 distributes block rows over a Px1 grid, not {grid}"));
    }
    let cfg_run = run_config(&args.run, simulate);
    let d = match (&args.matrix, args.size) {
        (Some(p), _) => CrsMatrix::read_matrix_market(p).with_context(|| format!("reading {}", p.display()))?,
        (None, Some(n)) => CrsMatrix::random(n, args.nnz_per_row, args.run.seed).unwrap_or_else(|e| usage_error(e)),
        (None, None) => usage_error("give --N or --matrix"),
    };
    let n = d.dim();
    let cfg = Rk4Config {
        dt: args.dt,
        steps: args.steps,
        blocks: args.blocks.unwrap_or(ranks),
        tiles: args.tiles,
    };
    let h0 = Arc::new(vec![1.0; n]);
    let d = Arc::new(d);
    let program = Arc::new(Rk4Program::new(cfg, d.clone(), h0.clone(), ranks).unwrap_or_else(|e| usage_error(e)));
    println!(
        "rk4: N={n} nnz={} B={} b={} steps={} dt={} ranks={ranks} workers={} executor={}{}",
        d.nnz(),
        cfg.blocks,
        cfg.tiles,
        cfg.steps,
        cfg.dt,
        cfg_run.workers,
        cfg_run.executor,
        if cfg_run.sim { " sim" } else { "" }
    );
    let l = launch(program.clone(), ranks, &args.run, &cfg_run)?;
    write_outputs(&l, &args.run)?;
    if !args.run.verify {
        return Ok(true);
    }
    let reference = rk4::serial_rk4(&d, &h0, cfg.dt, cfg.steps);
    let (blocks, dev) = rk4::max_block_deviation(&l.outcome, &program, &reference);
    println!("verify: max relative deviation from serial {dev:.3e} over {blocks} blocks");
    Ok(dev <= 1e-12)
}

fn main() -> Result<ExitCode> {
    let cli = Cli::parse();
    let ok = match &cli.cmd {
        Cmd::Cholesky(a) => run_cholesky(a, false)?,
        Cmd::Rk4(a) => run_rk4(a, false)?,
        Cmd::Simulate {
            app: SimApp::Cholesky(a),
        } => run_cholesky(a, true)?,
        Cmd::Simulate { app: SimApp::Rk4(a) } => run_rk4(a, true)?,
        Cmd::TraceConvert { input, output } => {
            let n = convert_trace(input, output)?;
            println!("{n} events written to {}", output.display());
            true
        }
    };
    if ok {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("verification failed");
        Ok(ExitCode::FAILURE)
    }
}
