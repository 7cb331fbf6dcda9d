//! Trustless execution, contract-update safety and state stability.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::explorer::{build_rg, Edge, ExploreError, ExploreOptions, ReachabilityGraph};
use crate::knowledge::{Actor, Knowledge, KnowledgeObject, Universe};
use crate::semantics::{FiredTransition, Model, TraceNetState};
use crate::txmodel::{output_sat, path_owned, OutputRef, Secrets};

type PolicyFn = dyn Fn(&Model, &TraceNetState) -> bool + Send + Sync;

/// Predicate over terminal states deciding whether the verifier is happy.
#[derive(Clone)]
pub enum Policy {
    /// The actor exclusively owns outputs worth at least `min`.
    Balance {
        actor: Actor,
        min: u64,
    },
    Custom {
        name: String,
        f: Arc<PolicyFn>,
    },
    And(Vec<Policy>),
}

impl fmt::Debug for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self}")
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Policy::Balance { actor, min } => write!(f, "balance:{actor}:{min}"),
            Policy::Custom { name, .. } => write!(f, "custom:{name}"),
            Policy::And(ps) => {
                let parts: Vec<String> = ps.iter().map(|p| p.to_string()).collect();
                f.write_str(&parts.join(","))
            }
        }
    }
}

impl PartialEq for Policy {
    fn eq(&self, other: &Self) -> bool {
        self.to_string() == other.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PolicyError {
    #[error("malformed policy `{0}`, expected balance:<actor>:<min>")]
    Syntax(String),
    #[error("unknown actor `{0}` in policy")]
    UnknownActor(String),
}

impl Policy {
    /// Parses `balance:<actor>:<min>` terms separated by commas. `actor` is
    /// `int`, `ext`, or whatever `resolve` maps to one of them.
    pub fn parse(
        text: &str,
        resolve: impl Fn(&str) -> Option<Actor>,
    ) -> Result<Policy, PolicyError> {
        let mut terms = Vec::new();
        for part in text.split(',') {
            let fields: Vec<&str> = part.trim().split(':').collect();
            let [kind, actor, min] = fields[..] else {
                return Err(PolicyError::Syntax(part.to_string()));
            };
            if kind != "balance" {
                return Err(PolicyError::Syntax(part.to_string()));
            }
            let actor = match actor {
                "int" => Actor::Int,
                "ext" => Actor::Ext,
                name => resolve(name).ok_or_else(|| PolicyError::UnknownActor(name.into()))?,
            };
            let min = min
                .parse()
                .map_err(|_| PolicyError::Syntax(part.to_string()))?;
            terms.push(Policy::Balance { actor, min });
        }
        Ok(if terms.len() == 1 {
            terms.pop().unwrap()
        } else {
            Policy::And(terms)
        })
    }

    pub fn eval(&self, model: &Model, z: &TraceNetState) -> bool {
        match self {
            Policy::Balance { actor, min } => balance(model, z, *actor) >= *min,
            Policy::Custom { f, .. } => f(model, z),
            Policy::And(ps) => ps.iter().all(|p| p.eval(model, z)),
        }
    }
}

/// Private keys and preimages in a knowledge set.
pub fn secrets_of(u: &Universe, k: &Knowledge) -> Secrets {
    let mut s = Secrets::default();
    for o in k.iter() {
        match u.object(o) {
            KnowledgeObject::PrivKey(key) => {
                s.keys.insert(key.clone());
            }
            KnowledgeObject::Preimage(d) => {
                s.preimages.insert(d.clone());
            }
            _ => {}
        }
    }
    s
}

/// Value on marked places every producible path of which `a` can satisfy
/// alone.
pub fn balance(model: &Model, z: &TraceNetState, a: Actor) -> u64 {
    let secrets = secrets_of(&model.universe, z.knowledge(a));
    model
        .net
        .places
        .iter()
        .filter(|p| z.is_marked(p.id))
        .filter(|p| {
            let out = crate::txmodel::TxOutput {
                value: p.value,
                script: p.script.clone(),
            };
            let paths: Vec<_> = output_sat(&out)
                .into_iter()
                .filter(|w| w.is_producible())
                .collect();
            !paths.is_empty() && paths.iter().all(|w| path_owned(w, &secrets))
        })
        .map(|p| p.value)
        .sum()
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PropertyError {
    #[error("node {0} is not terminal")]
    NotTerminal(usize),
    #[error("initial states differ on shared places")]
    RootMismatch,
    #[error(transparent)]
    Explore(#[from] ExploreError),
}

/// Policy at a terminal node.
pub fn eval_terminal(
    model: &Model,
    rg: &ReachabilityGraph,
    policy: &Policy,
    n: usize,
) -> Result<bool, PropertyError> {
    if !rg.is_terminal(n) {
        return Err(PropertyError::NotTerminal(n));
    }
    Ok(policy.eval(model, &rg.nodes[n]))
}

fn is_int_or_time(e: &Edge) -> bool {
    e.owner() != Some(Actor::Ext)
}

/// Nothing left for the verifier to do: no verifier or time edge leaves it.
pub fn settled(rg: &ReachabilityGraph, n: usize) -> bool {
    rg.out_edges(n).iter().all(|e| !is_int_or_time(e))
}

/// Greatest set of states from which the verifier, moving and waiting,
/// reaches a settled policy-true state while every adversary move from a
/// visited state stays inside the set.
pub fn safe_states(model: &Model, rg: &ReachabilityGraph, policy: &Policy) -> Vec<bool> {
    let goal: Vec<bool> = (0..rg.len())
        .map(|n| settled(rg, n) && policy.eval(model, &rg.nodes[n]))
        .collect();
    let pred = rg.predecessors();
    let mut s = vec![true; rg.len()];
    loop {
        let next = safe_step(rg, &pred, &goal, &s);
        if next == s {
            return s;
        }
        s = next;
    }
}

/// One removal round of the safe-state fixpoint.
pub fn safe_step(
    rg: &ReachabilityGraph,
    pred: &[Vec<usize>],
    goal: &[bool],
    s: &[bool],
) -> Vec<bool> {
    let guarded: Vec<bool> = (0..rg.len())
        .map(|n| {
            s[n] && rg
                .out_edges(n)
                .iter()
                .filter(|e| e.owner() == Some(Actor::Ext))
                .all(|e| s[e.dst])
        })
        .collect();
    let mut r = vec![false; rg.len()];
    let mut queue: VecDeque<usize> = (0..rg.len()).filter(|&n| guarded[n] && goal[n]).collect();
    for &n in &queue {
        r[n] = true;
    }
    while let Some(n) = queue.pop_front() {
        for &ei in &pred[n] {
            let e = &rg.edges[ei];
            if is_int_or_time(e) && guarded[e.src] && !r[e.src] {
                r[e.src] = true;
                queue.push_back(e.src);
            }
        }
    }
    r
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome {
    /// A cooperative safe trace and the verifier's strategy: its own and
    /// time edges that stay in the safe set.
    Holds {
        trace: Vec<usize>,
        strategy: Vec<usize>,
    },
    /// A trace leaving the safe set and ending in a failing terminal where
    /// one is forced.
    Fails { counterexample: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Verdict {
    pub safe: Vec<bool>,
    pub outcome: Outcome,
}

impl Verdict {
    pub fn holds(&self) -> bool {
        matches!(self.outcome, Outcome::Holds { .. })
    }

    pub fn trace(&self) -> &[usize] {
        match &self.outcome {
            Outcome::Holds { trace, .. } => trace,
            Outcome::Fails { counterexample } => counterexample,
        }
    }

    /// Report in arrow notation.
    pub fn render(&self, model: &Model, rg: &ReachabilityGraph) -> String {
        let labels = |es: &[usize]| -> Vec<FiredTransition> {
            es.iter().map(|&i| rg.edges[i].label.clone()).collect()
        };
        match &self.outcome {
            Outcome::Holds { trace, strategy } => {
                let mut s = format!(
                    "trustless execution: holds\nsafe states: {}/{}\ncooperative trace: {}\nstrategy:\n",
                    self.safe.iter().filter(|&&b| b).count(),
                    rg.len(),
                    model.render_trace(&labels(trace))
                );
                for &i in strategy {
                    let e = &rg.edges[i];
                    s.push_str(&format!(
                        "  n{} --{}--> n{}\n",
                        e.src,
                        model.render(&e.label),
                        e.dst
                    ));
                }
                s
            }
            Outcome::Fails { counterexample } => format!(
                "trustless execution: fails\nsafe states: {}/{}\ncounterexample: {}\n",
                self.safe.iter().filter(|&&b| b).count(),
                rg.len(),
                model.render_trace(&labels(counterexample))
            ),
        }
    }
}

/// Declared templates spending only funding outputs. A cooperative trace
/// confirms all of them before any contract output is spent (both sides
/// fund first, then the contract executes) and exchanges no off-chain
/// messages beyond setup.
struct Cooperation {
    bit: Vec<u64>,
    spends_contract: Vec<bool>,
    need: u64,
}

impl Cooperation {
    fn new(model: &Model) -> Self {
        let u = &model.universe;
        let funding_txs: Vec<_> = u
            .templates()
            .iter()
            .filter(|t| !u.is_derived(&t.id))
            .filter(|t| t.ins.iter().all(|i| u.funding().contains_key(&i.prevout)))
            .map(|t| t.id.clone())
            .take(64)
            .collect();
        let bit = model
            .net
            .transitions
            .iter()
            .map(|t| {
                funding_txs
                    .iter()
                    .position(|id| *id == t.tx)
                    .map_or(0, |i| 1u64 << i)
            })
            .collect();
        let spends_contract = model
            .net
            .transitions
            .iter()
            .map(|t| {
                t.ins
                    .iter()
                    .any(|a| !u.funding().contains_key(&model.net.places[a.place].source))
            })
            .collect();
        let need = (0..funding_txs.len()).fold(0, |m, i| m | 1u64 << i);
        Cooperation {
            bit,
            spends_contract,
            need,
        }
    }

    /// Mask after `e`, or `None` if `e` cannot be part of a cooperative
    /// trace.
    fn step(&self, e: &Edge, m: u64) -> Option<u64> {
        match e.label {
            FiredTransition::OnChain { transition, .. } => {
                if m != self.need && self.spends_contract[transition] {
                    None
                } else {
                    Some(m | self.bit[transition])
                }
            }
            FiredTransition::Message { .. } | FiredTransition::Reorg { .. } => None,
            _ => Some(m),
        }
    }
}

type Pair = (usize, u64);

/// Breadth-first search over (node, cooperation mask), returning the edge
/// path to the first accepted pair.
fn coop_search(
    coop: &Cooperation,
    rg: &ReachabilityGraph,
    follow: impl Fn(&Edge) -> bool,
    mut accept: impl FnMut(usize, u64) -> bool,
) -> Option<Vec<usize>> {
    let root = (ReachabilityGraph::ROOT, 0u64);
    let mut parent: HashMap<Pair, Option<(Pair, usize)>> = HashMap::new();
    parent.insert(root, None);
    let mut queue = VecDeque::from([root]);
    while let Some((n, m)) = queue.pop_front() {
        if accept(n, m) {
            let mut path = Vec::new();
            let mut cur = (n, m);
            while let Some(Some((prev, ei))) = parent.get(&cur) {
                path.push(*ei);
                cur = *prev;
            }
            path.reverse();
            return Some(path);
        }
        for (ei, e) in rg.out_range(n) {
            if !follow(e) {
                continue;
            }
            let Some(nm) = coop.step(e, m) else {
                continue;
            };
            let next = (e.dst, nm);
            if let std::collections::hash_map::Entry::Vacant(v) = parent.entry(next) {
                v.insert(Some(((n, m), ei)));
                queue.push_back(next);
            }
        }
    }
    None
}

/// Whether the verifier has a cooperative trace to a policy-true terminal
/// that never leaves the safe states.
pub fn trustless_execution(model: &Model, rg: &ReachabilityGraph, policy: &Policy) -> Verdict {
    let safe = safe_states(model, rg, policy);
    let coop = Cooperation::new(model);
    let root = ReachabilityGraph::ROOT;
    let witness = if safe[root] {
        coop_search(
            &coop,
            rg,
            |e| !e.label.is_reorg() && safe[e.dst],
            |n, m| m == coop.need && rg.is_terminal(n) && policy.eval(model, &rg.nodes[n]),
        )
    } else {
        None
    };
    let outcome = match witness {
        Some(trace) => {
            let strategy = rg
                .edges
                .iter()
                .enumerate()
                .filter(|(_, e)| is_int_or_time(e) && safe[e.src] && safe[e.dst])
                .map(|(i, _)| i)
                .collect();
            Outcome::Holds { trace, strategy }
        }
        None => Outcome::Fails {
            counterexample: counterexample(model, rg, policy, &safe, &coop),
        },
    };
    Verdict { safe, outcome }
}

fn failing_terminal(model: &Model, rg: &ReachabilityGraph, policy: &Policy, n: usize) -> bool {
    rg.is_terminal(n) && !policy.eval(model, &rg.nodes[n])
}

/// Adversary-and-time continuation from `from` to a failing terminal,
/// preferring one that never re-enters the safe set.
fn forced_loss(
    model: &Model,
    rg: &ReachabilityGraph,
    policy: &Policy,
    safe: &[bool],
    from: usize,
) -> Option<Vec<usize>> {
    let adversarial = |e: &Edge| e.owner() != Some(Actor::Int);
    rg.shortest_path(
        from,
        |e| adversarial(e) && !safe[e.dst],
        |n| failing_terminal(model, rg, policy, n),
    )
    .or_else(|| {
        rg.shortest_path(from, adversarial, |n| {
            failing_terminal(model, rg, policy, n)
        })
    })
}

/// Prefers the shortest cooperative prefix that leaves the safe set and
/// can then be driven to a failing terminal by the adversary and time.
fn counterexample(
    model: &Model,
    rg: &ReachabilityGraph,
    policy: &Policy,
    safe: &[bool],
    coop: &Cooperation,
) -> Vec<usize> {
    let mut tail = Vec::new();
    let prefix = coop_search(
        coop,
        rg,
        |e| !e.label.is_reorg(),
        |n, m| {
            if m != coop.need || safe[n] {
                return false;
            }
            match forced_loss(model, rg, policy, safe, n) {
                Some(t) => {
                    tail = t;
                    true
                }
                None => false,
            }
        },
    );
    if let Some(mut p) = prefix {
        p.extend(tail);
        return p;
    }
    let any = |_: &Edge| true;
    if let Some(mut p) = rg.shortest_path(ReachabilityGraph::ROOT, any, |n| !safe[n]) {
        let end = p
            .last()
            .map_or(ReachabilityGraph::ROOT, |&i| rg.edges[i].dst);
        if let Some(t) = forced_loss(model, rg, policy, safe, end) {
            p.extend(t);
        }
        return p;
    }
    rg.shortest_path(ReachabilityGraph::ROOT, any, |n| {
        failing_terminal(model, rg, policy, n)
    })
    .unwrap_or_default()
}

/// Terminals inside the safe set.
pub fn safe_terminals(rg: &ReachabilityGraph, safe: &[bool]) -> Vec<usize> {
    rg.terminal_states()
        .into_iter()
        .filter(|&n| safe[n])
        .collect()
}

fn projection(
    model: &Model,
    z: &TraceNetState,
    shared: &BTreeSet<OutputRef>,
) -> BTreeSet<OutputRef> {
    model
        .net
        .places
        .iter()
        .filter(|p| z.is_marked(p.id) && shared.contains(&p.source))
        .map(|p| p.source.clone())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UpdateReport {
    pub safe: bool,
    pub new_holds: bool,
    /// Safe terminal outcomes of the old contract, on shared places, that
    /// the update loses.
    pub lost: Vec<BTreeSet<OutputRef>>,
    /// Safe terminal outcomes only the updated contract has.
    pub gained: Vec<BTreeSet<OutputRef>>,
}

/// An update is safe when the new contract is still trustless and keeps
/// every safe terminal outcome of the old one.
pub fn update_safety(
    old: (&Model, &ReachabilityGraph),
    new: (&Model, &ReachabilityGraph),
    policy: &Policy,
) -> Result<UpdateReport, PropertyError> {
    let places = |m: &Model| -> BTreeSet<OutputRef> {
        m.net.places.iter().map(|p| p.source.clone()).collect()
    };
    let shared: BTreeSet<OutputRef> = places(old.0)
        .intersection(&places(new.0))
        .cloned()
        .collect();
    let root = ReachabilityGraph::ROOT;
    if projection(old.0, &old.1.nodes[root], &shared)
        != projection(new.0, &new.1.nodes[root], &shared)
    {
        return Err(PropertyError::RootMismatch);
    }
    let outcomes = |(m, rg): (&Model, &ReachabilityGraph)| -> BTreeSet<BTreeSet<OutputRef>> {
        let safe = safe_states(m, rg, policy);
        safe_terminals(rg, &safe)
            .into_iter()
            .map(|n| projection(m, &rg.nodes[n], &shared))
            .collect()
    };
    let before = outcomes(old);
    let after = outcomes(new);
    let new_holds = trustless_execution(new.0, new.1, policy).holds();
    let lost: Vec<_> = before.difference(&after).cloned().collect();
    let gained: Vec<_> = after.difference(&before).cloned().collect();
    Ok(UpdateReport {
        safe: new_holds && lost.is_empty(),
        new_holds,
        lost,
        gained,
    })
}

/// `z` after a delay longer than every observable gap.
pub fn saturate(model: &Model, z: &TraceNetState) -> TraceNetState {
    let d = z.height + model.horizon() + model.anchor() + 1;
    let mut far = z.clone();
    far.height += d;
    model.normalize(&far)
}

/// Whether deferring the contract indefinitely leaves its reachability
/// graph unchanged.
pub fn state_stability(
    model: &Model,
    z: &TraceNetState,
    opts: &ExploreOptions,
) -> Result<bool, PropertyError> {
    let now = build_rg(model, z, opts)?;
    let later = build_rg(model, &saturate(model, z), opts)?;
    Ok(now.shape() == later.shape())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contract::Contract;

    fn load(text: &str) -> Contract {
        Contract::from_json(text).unwrap()
    }

    fn graph(m: &Model) -> ReachabilityGraph {
        build_rg(m, &m.initial_state(), &ExploreOptions::default()).unwrap()
    }

    fn resolve(name: &str) -> Option<Actor> {
        match name {
            "A" => Some(Actor::Int),
            "B" => Some(Actor::Ext),
            _ => None,
        }
    }

    #[test]
    fn policy_parsing() {
        let p = Policy::parse("balance:A:100", resolve).unwrap();
        assert_eq!(
            p,
            Policy::Balance {
                actor: Actor::Int,
                min: 100
            }
        );
        let p = Policy::parse("balance:int:5, balance:B:1", resolve).unwrap();
        assert_eq!(p.to_string(), "balance:int:5,balance:ext:1");
        assert_eq!(Policy::parse(&p.to_string(), resolve).unwrap(), p);
        assert_eq!(
            Policy::parse("balance:C:1", resolve),
            Err(PolicyError::UnknownActor("C".into()))
        );
        assert!(matches!(
            Policy::parse("owns:A:1", resolve),
            Err(PolicyError::Syntax(_))
        ));
        assert!(matches!(
            Policy::parse("balance:A:x", resolve),
            Err(PolicyError::Syntax(_))
        ));
    }

    #[test]
    fn balance_counts_exclusively_owned_outputs() {
        let c = load(include_str!("../../../contracts/atomic_swap_htlc.json"));
        let m = &c.model;
        let z = m.initial_state();
        assert_eq!(balance(m, &z, Actor::Int), 100);
        assert_eq!(balance(m, &z, Actor::Ext), 100);
        let fund = m.transition_id("fund_A").unwrap();
        let z = m.fire_broadcast(&z, Actor::Int, fund).unwrap();
        let z = m.fire_onchain(&z, Actor::Int, fund).unwrap();
        // the hash lock is shared until one side claims it
        assert_eq!(balance(m, &z, Actor::Int), 0);
        assert_eq!(balance(m, &z, Actor::Ext), 100);
    }

    #[test]
    fn custom_policies_compose() {
        let c = load(include_str!("../../../contracts/one_sided_lock.json"));
        let never = Policy::Custom {
            name: "never".into(),
            f: Arc::new(|_, _| false),
        };
        let both = Policy::And(vec![c.policy.clone(), never]);
        assert!(!both.eval(&c.model, &c.model.initial_state()));
        assert!(c.policy.eval(&c.model, &c.model.initial_state()));
    }

    #[test]
    fn one_sided_lock_is_not_trustless() {
        let c = load(include_str!("../../../contracts/one_sided_lock.json"));
        let rg = graph(&c.model);
        let v = trustless_execution(&c.model, &rg, &c.policy);
        assert!(!v.holds());
        let last = rg.edges[*v.trace().last().unwrap()].dst;
        assert!(rg.is_terminal(last));
        assert_eq!(eval_terminal(&c.model, &rg, &c.policy, last), Ok(false));
        assert!(v
            .render(&c.model, &rg)
            .starts_with("trustless execution: fails"));
    }

    #[test]
    fn eval_terminal_rejects_inner_nodes() {
        let c = load(include_str!("../../../contracts/one_sided_lock.json"));
        let rg = graph(&c.model);
        assert_eq!(
            eval_terminal(&c.model, &rg, &c.policy, ReachabilityGraph::ROOT),
            Err(PropertyError::NotTerminal(0))
        );
    }

    #[test]
    fn safe_set_is_a_fixpoint() {
        let c = load(include_str!("../../../contracts/update_no_abort.json"));
        let rg = graph(&c.model);
        let safe = safe_states(&c.model, &rg, &c.policy);
        let goal: Vec<bool> = (0..rg.len())
            .map(|n| settled(&rg, n) && c.policy.eval(&c.model, &rg.nodes[n]))
            .collect();
        assert_eq!(safe_step(&rg, &rg.predecessors(), &goal, &safe), safe);
        for n in safe_terminals(&rg, &safe) {
            assert!(c.policy.eval(&c.model, &rg.nodes[n]));
        }
    }

    #[test]
    fn holding_verdict_trace_stays_safe() {
        let c = load(include_str!("../../../contracts/update_no_abort.json"));
        let rg = graph(&c.model);
        let v = trustless_execution(&c.model, &rg, &c.policy);
        assert!(v.holds());
        for &i in v.trace() {
            assert!(v.safe[rg.edges[i].src] && v.safe[rg.edges[i].dst]);
        }
    }

    #[test]
    fn terminal_states_are_stable() {
        let c = load(include_str!("../../../contracts/one_sided_lock.json"));
        let m = &c.model;
        let rg = graph(m);
        let opts = ExploreOptions::default();
        for n in rg.terminal_states().into_iter().take(5) {
            assert_eq!(state_stability(m, &rg.nodes[n], &opts), Ok(true));
        }
        // the funded lock can still be refunded once it expires
        let lock = m.transition_id("lock_A").unwrap();
        let z = m.initial_state();
        let z = m.fire_broadcast(&z, Actor::Int, lock).unwrap();
        let z = m.fire_onchain(&z, Actor::Int, lock).unwrap();
        assert_eq!(state_stability(m, &z, &opts), Ok(false));
    }

    #[test]
    fn update_to_itself_is_safe() {
        let c = load(include_str!("../../../contracts/update_no_abort.json"));
        let rg = graph(&c.model);
        let r = update_safety((&c.model, &rg), (&c.model, &rg), &c.policy).unwrap();
        assert!(r.safe && r.lost.is_empty() && r.gained.is_empty());
    }
}
