use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use tracenet_core::contract::Contract;
use tracenet_core::explorer::{
    build_rg, ExploreError, ExploreOptions, ReachabilityGraph, DEFAULT_BUDGET,
};
use tracenet_core::knowledge::Actor;
use tracenet_core::properties::{
    state_stability, trustless_execution, update_safety, Policy, PropertyError,
};
use tracenet_core::semantics::{FiredTransition, Model, TraceNetState};

/// Exit status when the checked property does not hold.
const EXIT_FAILS: u8 = 1;
/// Exit status for unreadable or invalid input.
const EXIT_INPUT: u8 = 2;
/// Exit status when exploration runs out of state budget.
const EXIT_BUDGET: u8 = 3;

#[derive(Parser)]
#[command(
    name = "tracenet",
    version,
    about = "Model checker for UTXO contract templates"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check trustless execution for the contract's verifier.
    Verify {
        contract: PathBuf,
        #[command(flatten)]
        opts: CheckOpts,
        /// Write the full verdict, including the verifier's strategy.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Write the reachability graph in Graphviz format.
        #[arg(long)]
        dot: Option<PathBuf>,
    },
    /// Explore the reachability graph and print its size.
    Graph {
        contract: PathBuf,
        #[command(flatten)]
        opts: CheckOpts,
        #[arg(long)]
        dot: Option<PathBuf>,
    },
    /// Check whether the state reached by a replay can be left waiting.
    Stability {
        contract: PathBuf,
        #[command(flatten)]
        opts: CheckOpts,
        /// Steps from the initial state: `tx:NAME[@ACTOR]` or `d:BLOCKS`.
        #[arg(long, value_delimiter = ',')]
        replay: Vec<String>,
    },
    /// Check that replacing one contract by another is safe.
    Update {
        old: PathBuf,
        new: PathBuf,
        #[command(flatten)]
        opts: CheckOpts,
    },
}

#[derive(Args, Clone)]
struct CheckOpts {
    #[arg(long)]
    conf_delay_int: Option<u64>,
    #[arg(long)]
    conf_delay_ext: Option<u64>,
    #[arg(long)]
    reorg_depth: Option<u64>,
    /// Overrides the contract policy, e.g. `balance:A:100`.
    #[arg(long)]
    policy: Option<String>,
    /// Maximum number of states to explore.
    #[arg(long, env = "TRACENET_BUDGET")]
    budget: Option<usize>,
}

/// Failure carrying its exit status.
struct Exit(u8, anyhow::Error);

impl From<anyhow::Error> for Exit {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast_ref::<ExploreError>() {
            Some(_) => Exit(EXIT_BUDGET, e),
            None => Exit(EXIT_INPUT, e),
        }
    }
}

struct Loaded {
    contract: Contract,
    model: Model,
    policy: Policy,
    budget: usize,
}

fn load(path: &Path, opts: &CheckOpts) -> Result<Loaded> {
    let contract = Contract::load(path).with_context(|| format!("loading {}", path.display()))?;
    let mut params = contract.model.params.clone();
    if let Some(c) = opts.conf_delay_int {
        params.conf_delay[Actor::Int.index()] = c;
    }
    if let Some(c) = opts.conf_delay_ext {
        params.conf_delay[Actor::Ext.index()] = c;
    }
    if let Some(r) = opts.reorg_depth {
        params.reorg_depth = r;
    }
    let model = contract.model.with_params(params);
    let policy = match &opts.policy {
        Some(p) => Policy::parse(p, |n| contract.file.actor(n))?,
        None => contract.policy.clone(),
    };
    let budget = opts.budget.or(contract.budget).unwrap_or(DEFAULT_BUDGET);
    Ok(Loaded {
        contract,
        model,
        policy,
        budget,
    })
}

fn explore(l: &Loaded, z: &TraceNetState) -> Result<ReachabilityGraph> {
    let opts = ExploreOptions {
        budget: l.budget,
        shuffle_seed: None,
    };
    Ok(build_rg(&l.model, z, &opts)?)
}

/// Writes through a sibling temporary file so readers never see a partial
/// file.
fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| anyhow!("{} is not a file path", path.display()))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(contents.as_bytes())?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        anyhow!("writing {}: {e}", path.display())
    })
}

/// Applies one `tx:NAME[@ACTOR]` or `d:BLOCKS` step. A transaction that
/// reveals something is broadcast first.
fn replay_step(l: &Loaded, z: &TraceNetState, step: &str) -> Result<TraceNetState> {
    let m = &l.model;
    if let Some(d) = step.strip_prefix("d:") {
        let d: u64 = d.parse().with_context(|| format!("bad delay `{step}`"))?;
        return Ok(m.fire(z, &FiredTransition::Delay(d))?);
    }
    let Some(spec) = step.strip_prefix("tx:") else {
        bail!("bad replay step `{step}`, expected tx:NAME[@ACTOR] or d:BLOCKS");
    };
    let (name, actor) = match spec.split_once('@') {
        Some((n, a)) => {
            let a = l
                .contract
                .file
                .actor(a)
                .ok_or_else(|| anyhow!("unknown actor `{a}` in `{step}`"))?;
            (n, Some(a))
        }
        None => (spec, None),
    };
    let t = m
        .transition_id(name)
        .ok_or_else(|| anyhow!("unknown transaction `{name}`"))?;
    let actors: Vec<Actor> = actor.map_or(Actor::BOTH.to_vec(), |a| vec![a]);
    for a in actors {
        if m.fireable_onchain(z).contains(&(a, t)) {
            return Ok(m.fire_onchain(z, a, t)?);
        }
        if m.fireable_broadcasts(z).contains(&(a, t)) {
            let pooled = m.fire_broadcast(z, a, t)?;
            if let Ok(next) = m.fire_onchain(&pooled, a, t) {
                return Ok(next);
            }
            return Ok(pooled);
        }
    }
    bail!("`{step}` cannot fire at height {}", z.height)
}

fn verify(
    path: &Path,
    opts: &CheckOpts,
    report: Option<&Path>,
    dot: Option<&Path>,
) -> Result<bool, Exit> {
    let l = load(path, opts)?;
    let rg = explore(&l, &l.model.initial_state())?;
    let verdict = trustless_execution(&l.model, &rg, &l.policy);
    let full = verdict.render(&l.model, &rg);
    println!("contract: {}", l.contract.file.name);
    println!("policy: {}", l.policy);
    println!("{}", rg.stats());
    for line in full.lines().take_while(|s| *s != "strategy:") {
        println!("{line}");
    }
    if let Some(p) = report {
        let text = format!(
            "contract: {}\npolicy: {}\n{}\n{full}",
            l.contract.file.name,
            l.policy,
            rg.stats()
        );
        write_atomic(p, &text)?;
    }
    if let Some(p) = dot {
        write_atomic(p, &rg.to_dot(&l.model))?;
    }
    Ok(verdict.holds())
}

fn graph(path: &Path, opts: &CheckOpts, dot: Option<&Path>) -> Result<bool, Exit> {
    let l = load(path, opts)?;
    let rg = explore(&l, &l.model.initial_state())?;
    println!("{}", rg.stats());
    if let Some(p) = dot {
        write_atomic(p, &rg.to_dot(&l.model))?;
    }
    Ok(true)
}

fn stability(path: &Path, opts: &CheckOpts, replay: &[String]) -> Result<bool, Exit> {
    let l = load(path, opts)?;
    let mut z = l.model.initial_state();
    for step in replay {
        z = replay_step(&l, &z, step)?;
    }
    let eopts = ExploreOptions {
        budget: l.budget,
        shuffle_seed: None,
    };
    let stable = match state_stability(&l.model, &z, &eopts) {
        Ok(s) => s,
        Err(PropertyError::Explore(e)) => return Err(Exit(EXIT_BUDGET, e.into())),
        Err(e) => return Err(Exit(EXIT_INPUT, e.into())),
    };
    println!("height: {}", z.height);
    let confirmed: Vec<&str> = z
        .history
        .iter()
        .map(|&(t, _)| l.model.transition_label(t))
        .collect();
    println!("confirmed: {}", confirmed.join(" "));
    println!(
        "state stability: {}",
        if stable { "stable" } else { "unstable" }
    );
    Ok(stable)
}

fn update(old: &Path, new: &Path, opts: &CheckOpts) -> Result<bool, Exit> {
    let a = load(old, opts)?;
    let b = load(new, opts)?;
    let ra = explore(&a, &a.model.initial_state())?;
    let rb = explore(&b, &b.model.initial_state())?;
    let r = update_safety((&a.model, &ra), (&b.model, &rb), &a.policy)
        .map_err(|e| Exit(EXIT_INPUT, e.into()))?;
    let verdict = |ok| if ok { "holds" } else { "fails" };
    println!("policy: {}", a.policy);
    println!("updated contract trustless: {}", verdict(r.new_holds));
    println!("safe outcomes lost: {}", r.lost.len());
    println!("safe outcomes gained: {}", r.gained.len());
    println!("update safety: {}", verdict(r.safe));
    Ok(r.safe)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Verify {
            contract,
            opts,
            report,
            dot,
        } => verify(contract, opts, report.as_deref(), dot.as_deref()),
        Command::Graph {
            contract,
            opts,
            dot,
        } => graph(contract, opts, dot.as_deref()),
        Command::Stability {
            contract,
            opts,
            replay,
        } => stability(contract, opts, replay),
        Command::Update { old, new, opts } => update(old, new, opts),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_FAILS),
        Err(Exit(code, e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(code)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_replaces_content() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("out.txt");
        write_atomic(&p, "one").unwrap();
        write_atomic(&p, "two").unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "two");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
        assert!(write_atomic(&dir.path().join("none/out.txt"), "x").is_err());
    }
}
