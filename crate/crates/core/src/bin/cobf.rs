use std::fs;
use std::io::{self, BufReader, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cobf::dbsum::{run_dbsum, DbsumOptions};
use cobf::dwmmse::{run_dwmmse, DwmmseOptions};
use cobf::harness::{self, check_heuristic, Algo, ExperimentConfig, OutageValidationConfig};
use cobf::model::{generate_instance, BeamformerSet, ChannelStats, NetworkConfig};
use cobf::polyblock::PoaOptions;
use cobf::relaxed_bound::{upper_bound, RelaxedInstance};
use cobf::utilities::{UtilityKind, UtilitySpec, DEFAULT_LSE_GAMMA};
use cobf::{CobfError, Result};

/// Environment variable that sets the worker thread count.
const WORKERS_ENV: &str = "COBF_WORKERS";

#[derive(Parser)]
#[command(name = "cobf", version, about = "Outage-constrained coordinated beamforming")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct InstanceArgs {
    #[arg(long, default_value_t = 2)]
    users: usize,
    #[arg(long, default_value_t = 4)]
    antennas: usize,
    /// Spatial correlation in (0, 1]; 1 gives full-rank covariances.
    #[arg(long, default_value_t = 1.0)]
    eta: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 10.0)]
    snr_db: f64,
    #[arg(long, default_value_t = 0.1)]
    epsilon: f64,
}

#[derive(Subcommand)]
enum Command {
    /// Generate channel covariances and write them as text.
    Gen {
        #[command(flatten)]
        inst: InstanceArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one algorithm on one instance.
    Run {
        #[command(flatten)]
        inst: InstanceArgs,
        /// Read covariances from this file instead of generating them.
        #[arg(long)]
        stats: Option<PathBuf>,
        #[arg(long, default_value = "dbsum")]
        algo: Algo,
        #[arg(long, default_value = "wsr")]
        utility: UtilityKind,
        #[arg(long, default_value_t = DEFAULT_LSE_GAMMA)]
        gamma: f64,
        /// Comma-separated priority weights; equal weights summing to one by default.
        #[arg(long, value_delimiter = ',')]
        weights: Option<Vec<f64>>,
        #[arg(long, default_value_t = 1e-3)]
        tol: f64,
        #[arg(long)]
        penalty: Option<f64>,
        #[arg(long)]
        max_iters: Option<usize>,
        #[arg(long, default_value_t = 1e-3)]
        delta: f64,
        /// Per-iteration trace CSV; stdout when omitted.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Compare certified outage against Monte Carlo estimates.
    ValidateOutage {
        #[command(flatten)]
        inst: InstanceArgs,
        #[arg(long, default_value = "dbsum")]
        algo: Algo,
        #[arg(long, default_value_t = 10)]
        trials: usize,
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
        /// Minimum fraction of checks inside the binomial interval.
        #[arg(long, default_value_t = 0.95)]
        min_fraction: f64,
    },
    /// Run an experiment sweep described by a TOML file.
    Bench {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn network(inst: &InstanceArgs) -> Result<NetworkConfig> {
    NetworkConfig::from_snr_db(inst.users, inst.antennas, inst.snr_db, inst.epsilon)
}

fn sink(path: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(io::BufWriter::new(fs::File::create(p)?)),
        None => Box::new(io::stdout().lock()),
    })
}

fn env_workers() -> Option<usize> {
    std::env::var(WORKERS_ENV).ok().and_then(|v| v.parse().ok()).filter(|n| *n > 0)
}

fn report(problems: &[String]) -> bool {
    for p in problems {
        eprintln!("invariant violated: {p}");
    }
    problems.is_empty()
}

fn execute(cmd: Command) -> Result<bool> {
    match cmd {
        Command::Gen { inst, out } => {
            let cfg = network(&inst)?;
            let stats = generate_instance(inst.seed, &cfg, inst.eta)?;
            let mut w = sink(&out)?;
            stats.write_text(&mut w)?;
            w.flush()?;
            Ok(true)
        }
        Command::Run { inst, stats, algo, utility, gamma, weights, tol, penalty, max_iters, delta, trace } => {
            let stats = match stats {
                Some(p) => ChannelStats::read_text(BufReader::new(fs::File::open(p)?))?,
                None => generate_instance(inst.seed, &network(&inst)?, inst.eta)?,
            };
            let inst = InstanceArgs { users: stats.num_users(), antennas: stats.num_antennas(), ..inst };
            let weights = weights.unwrap_or_else(|| vec![1.0 / inst.users as f64; inst.users]);
            let cfg = network(&inst)?.with_weights(weights.clone())?;
            let spec = UtilitySpec::new(utility, weights.clone())?.with_gamma(gamma)?;
            let init = BeamformerSet::random_unit(&cfg, harness::init_seed(inst.seed));
            let mut w = sink(&trace)?;
            let mut problems = Vec::new();
            match algo {
                Algo::Dbsum => {
                    let opts = DbsumOptions { penalty, max_iters, rel_tol: tol, ..Default::default() };
                    let out = run_dbsum(&stats, &cfg, &spec, &init, &opts)?;
                    writeln!(w, "iter,user,utility,elapsed_s,messages")?;
                    for p in &out.trace {
                        let user = p.user.map(|u| (u + 1).to_string()).unwrap_or_default();
                        writeln!(w, "{},{},{:.16e},{:.6e},{}", p.iter, user, p.utility, p.elapsed_s, p.messages)?;
                    }
                    problems.extend(check_heuristic(&out.beams, &out.rates, &cfg));
                    eprintln!("dbsum: utility {:.6} after {} updates, {} messages", out.utility, out.iterations, out.messages);
                }
                Algo::Dwmmse => {
                    if utility != UtilityKind::WeightedSumRate {
                        return Err(CobfError::InvalidConfig("dwmmse supports the weighted sum rate only".into()));
                    }
                    let opts = DwmmseOptions { rel_tol: tol, max_iters: max_iters.unwrap_or(1000), workers: env_workers(), schedule: None };
                    let out = run_dwmmse(&stats, &cfg, &weights, &init, &opts)?;
                    writeln!(w, "iter,user,utility,elapsed_s,messages,parallel_width")?;
                    for p in &out.trace {
                        writeln!(w, "{},,{:.16e},{:.6e},{},{}", p.iter, p.utility, p.elapsed_s, p.messages, p.parallel_width)?;
                    }
                    problems.extend(check_heuristic(&out.beams, &out.rates, &cfg));
                    eprintln!("dwmmse: utility {:.6} after {} iterations, {} messages", out.utility, out.iterations, out.messages);
                }
                Algo::Poa => {
                    let rel = RelaxedInstance::new(&stats, &cfg)?;
                    let opts = PoaOptions { delta, max_iters: max_iters.unwrap_or(200), ..Default::default() };
                    let ub = upper_bound(&rel, &spec, &opts)?;
                    writeln!(w, "iter,upper,lower,gap,vertices")?;
                    for (n, it) in ub.trace.iterations.iter().enumerate() {
                        writeln!(w, "{},{:.16e},{:.16e},{:.6e},{}", n, it.upper, it.lower, it.gap, it.vertex_count)?;
                    }
                    if ub.trace.lower() > ub.trace.upper() {
                        problems.push("polyblock lower bound exceeds upper bound".into());
                    }
                    eprintln!("poa: bound {:.6}, {:?} after {} iterations", ub.value, ub.trace.status, ub.trace.iterations.len() - 1);
                }
                Algo::Tdma => {
                    println!("{:.16e}", harness::tdma_baseline(&stats, &cfg));
                }
            }
            w.flush()?;
            Ok(report(&problems))
        }
        Command::ValidateOutage { inst, algo, trials, samples, min_fraction } => {
            let v = OutageValidationConfig {
                num_users: inst.users,
                num_antennas: inst.antennas,
                snr_db: inst.snr_db,
                eta: inst.eta,
                epsilon: inst.epsilon,
                trials,
                samples,
                seed: inst.seed,
                algo,
            };
            let rep = harness::validate_outage(&v)?;
            println!("seed,user,rate,empirical,deviation,halfwidth,within");
            for c in &rep.checks {
                println!("{},{},{:.10e},{:.6e},{:.3e},{:.3e},{}", c.seed, c.user + 1, c.rate, c.empirical, c.deviation, c.halfwidth, c.within());
            }
            let frac = rep.fraction_within();
            eprintln!("{:.1}% of checks within three standard deviations", 100.0 * frac);
            Ok(frac >= min_fraction)
        }
        Command::Bench { config, out } => {
            let mut exp = ExperimentConfig::load(&config)?;
            if exp.workers.is_none() {
                exp.workers = env_workers();
            }
            let result = harness::run_experiment(&exp)?;
            match out.or(exp.output.clone()) {
                Some(p) => harness::emit_csv(&result.records, &p)?,
                None => harness::write_csv(&result.records, io::stdout().lock())?,
            }
            for (seed, algo, msg) in &result.failures {
                eprintln!("seed {seed} {algo} failed: {msg}");
            }
            Ok(report(&result.violations) && result.failures.is_empty())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = env_workers() {
        // a second initialization only fails if a pool already exists
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match execute(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
