//! Reachability graph construction with canonical state deduplication.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::fmt;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use thiserror::Error;

use crate::knowledge::Actor;
use crate::semantics::{FiredTransition, Message, Model, ReplayStep, TraceNetState};
use crate::tracenet::escape;

pub const DEFAULT_BUDGET: usize = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExploreOptions {
    /// Maximum number of distinct states.
    pub budget: usize,
    /// Pops the worklist in a seeded random order instead of FIFO.
    pub shuffle_seed: Option<u64>,
}

impl Default for ExploreOptions {
    fn default() -> Self {
        ExploreOptions {
            budget: DEFAULT_BUDGET,
            shuffle_seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExploreError {
    #[error("state budget of {0} exceeded")]
    BudgetExceeded(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Edge {
    pub src: usize,
    pub label: FiredTransition,
    pub dst: usize,
}

impl Edge {
    /// Who controls the step: an actor, or `None` for time.
    pub fn owner(&self) -> Option<Actor> {
        self.label.actor()
    }
}

/// Canonically numbered reachability graph; node 0 is the root.
#[derive(Debug, Clone)]
pub struct ReachabilityGraph {
    pub nodes: Vec<TraceNetState>,
    /// Sorted by `(src, label, dst)`.
    pub edges: Vec<Edge>,
    offsets: Vec<usize>,
    index: HashMap<TraceNetState, usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GraphStats {
    pub nodes: usize,
    pub edges: usize,
    pub by_kind: BTreeMap<&'static str, usize>,
    pub terminals: usize,
}

impl fmt::Display for GraphStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "nodes: {}", self.nodes)?;
        writeln!(f, "edges: {}", self.edges)?;
        for (k, n) in &self.by_kind {
            writeln!(f, "  {k}: {n}")?;
        }
        write!(f, "terminals: {}", self.terminals)
    }
}

pub fn edge_kind(l: &FiredTransition) -> &'static str {
    match l {
        FiredTransition::Message { .. } => "message",
        FiredTransition::Broadcast { .. } => "broadcast",
        FiredTransition::OnChain { .. } => "onchain",
        FiredTransition::Delay(_) => "delay",
        FiredTransition::Reorg { .. } => "reorg",
    }
}

impl ReachabilityGraph {
    pub const ROOT: usize = 0;

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn out_edges(&self, n: usize) -> &[Edge] {
        &self.edges[self.offsets[n]..self.offsets[n + 1]]
    }

    pub fn node_of(&self, z: &TraceNetState) -> Option<usize> {
        self.index.get(z).copied()
    }

    /// No outgoing edges other than reorgs.
    pub fn is_terminal(&self, n: usize) -> bool {
        self.out_edges(n).iter().all(|e| e.label.is_reorg())
    }

    pub fn terminal_states(&self) -> Vec<usize> {
        (0..self.len()).filter(|&n| self.is_terminal(n)).collect()
    }

    /// Incoming edge indices per node.
    pub fn predecessors(&self) -> Vec<Vec<usize>> {
        let mut pred = vec![Vec::new(); self.len()];
        for (i, e) in self.edges.iter().enumerate() {
            pred[e.dst].push(i);
        }
        pred
    }

    pub fn stats(&self) -> GraphStats {
        let mut by_kind = BTreeMap::new();
        for e in &self.edges {
            *by_kind.entry(edge_kind(&e.label)).or_insert(0) += 1;
        }
        GraphStats {
            nodes: self.len(),
            edges: self.edges.len(),
            by_kind,
            terminals: self.terminal_states().len(),
        }
    }

    /// Structure with node contents erased: `(src, label, dst)` under the
    /// canonical numbering.
    pub fn shape(&self) -> Vec<(usize, FiredTransition, usize)> {
        self.edges
            .iter()
            .map(|e| (e.src, e.label.clone(), e.dst))
            .collect()
    }

    /// Breadth-first shortest path from `from` along edges accepted by
    /// `follow` to the first node accepted by `goal`.
    pub fn shortest_path(
        &self,
        from: usize,
        follow: impl Fn(&Edge) -> bool,
        goal: impl Fn(usize) -> bool,
    ) -> Option<Vec<usize>> {
        let mut parent: Vec<Option<usize>> = vec![None; self.len()];
        let mut seen = vec![false; self.len()];
        let mut queue = VecDeque::from([from]);
        seen[from] = true;
        while let Some(n) = queue.pop_front() {
            if goal(n) {
                let mut path = Vec::new();
                let mut cur = n;
                while let Some(ei) = parent[cur] {
                    path.push(ei);
                    cur = self.edges[ei].src;
                }
                path.reverse();
                return Some(path);
            }
            for (i, e) in self.out_range(n) {
                if !seen[e.dst] && follow(e) {
                    seen[e.dst] = true;
                    parent[e.dst] = Some(i);
                    queue.push_back(e.dst);
                }
            }
        }
        None
    }

    pub(crate) fn out_range(&self, n: usize) -> impl Iterator<Item = (usize, &Edge)> {
        (self.offsets[n]..self.offsets[n + 1]).map(move |i| (i, &self.edges[i]))
    }

    pub fn to_dot(&self, model: &Model) -> String {
        let mut s = String::from("digraph rg {\n  node [shape=box];\n");
        for (i, z) in self.nodes.iter().enumerate() {
            let marked: Vec<&str> = z
                .marking
                .iter()
                .enumerate()
                .filter(|(_, m)| m.is_some())
                .map(|(p, _)| model.net.places[p].label.as_str())
                .collect();
            let shape = if self.is_terminal(i) {
                ", peripheries=2"
            } else {
                ""
            };
            s.push_str(&format!(
                "  n{i} [label=\"{}\\nh={}\"{shape}];\n",
                escape(&marked.join(" ")),
                z.height
            ));
        }
        for e in &self.edges {
            s.push_str(&format!(
                "  n{} -> n{} [label=\"{}\"];\n",
                e.src,
                e.dst,
                escape(&model.render(&e.label))
            ));
        }
        s.push_str("}\n");
        s
    }
}

impl Model {
    /// Largest absolute lock, initial height and funding arrival.
    pub(crate) fn anchor(&self) -> u64 {
        let afters = self
            .net
            .transitions
            .iter()
            .flat_map(|t| t.ins.iter().map(|a| a.after as u64));
        let arrivals = self.net.m0.iter().flatten().copied();
        afters.chain(arrivals).fold(self.net.b0, u64::max)
    }

    /// Widest gap between event heights that is still observable.
    pub(crate) fn horizon(&self) -> u64 {
        let olders = self
            .net
            .transitions
            .iter()
            .flat_map(|t| t.ins.iter().map(|a| a.older as u64));
        let m = olders.chain(self.params.conf_delay).max().unwrap_or(0);
        m + self.params.reorg_depth + 1
    }

    /// Canonical representative: gaps between event heights above the
    /// anchor are shrunk to the widest span any event at or below the gap
    /// can still observe: the relative locks on places it produced, the
    /// confirmation delay of a pooled broadcast, plus the reorg depth.
    pub fn normalize(&self, z: &TraceNetState) -> TraceNetState {
        let anchor = self.anchor();
        let slack = self.params.reorg_depth + 1;
        let mut events: Vec<(u64, u64)> = vec![(z.height, 0)];
        for (p, a) in self.net.m0.iter().enumerate() {
            if a.is_some() {
                events.push((anchor, self.place_older(p)));
            }
        }
        for &(t, h) in &z.history {
            let need = self.net.transitions[t]
                .outs
                .iter()
                .map(|&p| self.place_older(p))
                .max()
                .unwrap_or(0);
            events.push((h, need));
        }
        for e in &z.pool {
            events.push((e.height, self.params.conf(e.actor)));
        }
        for (p, a) in z.marking.iter().enumerate() {
            if let Some(a) = a {
                events.push((*a, self.place_older(p)));
            }
        }
        events.sort_unstable();
        let mut map = HashMap::new();
        let (mut prev, mut mapped, mut need) = (anchor, anchor, 0);
        for (h, n) in events {
            if h > prev {
                mapped += (h - prev).min(need + slack);
                prev = h;
                map.insert(h, mapped);
            }
            need = need.max(n);
        }
        let f = |h: u64| map.get(&h).copied().unwrap_or(h);
        let mut out = z.clone();
        out.height = f(z.height);
        for m in out.marking.iter_mut().flatten() {
            *m = f(*m);
        }
        for e in &mut out.history {
            e.1 = f(e.1);
        }
        for e in &mut out.pool {
            e.height = f(e.height);
        }
        out
    }

    /// Messages that let the recipient deduce a transaction the sender
    /// cannot fire itself and whose inputs are all on-chain.
    pub fn relevant_messages(&self, z: &TraceNetState) -> Vec<Message> {
        self.fireable_messages(z)
            .into_iter()
            .filter(|m| {
                let to = m.from.other();
                let before = z.knowledge(to);
                let mut k = before.clone();
                k.insert(m.object);
                let after = self.universe.closure(&k);
                self.net.transitions.iter().any(|t| {
                    t.ins.iter().all(|a| z.is_marked(a.place))
                        && !self.deduces(z, m.from, t.id)
                        && !before.contains_all(&t.requires)
                        && after.contains_all(&t.requires)
                })
            })
            .collect()
    }

    /// Smallest delay after which a new lock or confirmation delay expires.
    pub fn minimal_delay(&self, z: &TraceNetState) -> Option<u64> {
        let mut best: Option<u64> = None;
        let mut consider = |h: u64| {
            if h > z.height {
                best = Some(best.map_or(h, |b| b.min(h)));
            }
        };
        for t in 0..self.net.transitions.len() {
            let relevant =
                z.pooled(t).is_some() || Actor::BOTH.iter().any(|&a| self.deduces(z, a, t));
            if relevant {
                if let Some(r) = self.release_height(z, t) {
                    consider(r);
                }
            }
        }
        for e in &z.pool {
            consider(e.height + self.params.conf(e.actor));
        }
        best.map(|b| b - z.height)
    }

    /// Adversarial rollbacks of depth `1..=reorg_depth`, each followed by
    /// any branch of the adversary's own confirmations and delays ending no
    /// higher than one block above the current height. Branch delays are
    /// the minimal releasing delay or the jump to that bound.
    pub fn reorg_successors(&self, z: &TraceNetState) -> Vec<(FiredTransition, TraceNetState)> {
        let mut out = Vec::new();
        let mut seen: HashSet<TraceNetState> = HashSet::new();
        seen.insert(self.normalize(z));
        let limit = z.height + 1;
        for depth in 1..=self.params.reorg_depth {
            let base = self.fire_reorg(z, depth);
            let mut queue = VecDeque::from([(base, Vec::<ReplayStep>::new())]);
            let mut local: HashSet<TraceNetState> = HashSet::new();
            while let Some((s, replay)) = queue.pop_front() {
                if !local.insert(s.clone()) {
                    continue;
                }
                let norm = self.normalize(&s);
                if seen.insert(norm.clone()) {
                    out.push((
                        FiredTransition::Reorg {
                            depth,
                            replay: replay.clone(),
                        },
                        norm,
                    ));
                }
                for t in 0..self.net.transitions.len() {
                    if let Ok(next) = self.fire_branch_onchain(&s, t) {
                        let mut r = replay.clone();
                        r.push(ReplayStep::OnChain(t));
                        queue.push_back((next, r));
                    }
                }
                let mut delays = vec![limit.saturating_sub(s.height)];
                if let Some(d) = self.minimal_delay(&s) {
                    delays.push(d);
                }
                delays.sort_unstable();
                delays.dedup();
                for d in delays {
                    if d == 0 || s.height + d > limit {
                        continue;
                    }
                    if let Ok(next) = self.fire_delay(&s, d) {
                        let mut r = replay.clone();
                        r.push(ReplayStep::Delay(d));
                        queue.push_back((next, r));
                    }
                }
            }
        }
        out
    }

    /// Labelled successors of a state, normalized, without self-loops.
    pub fn successors(&self, z: &TraceNetState) -> Vec<(FiredTransition, TraceNetState)> {
        let mut out = Vec::new();
        let mut push = |l: FiredTransition, s: Result<TraceNetState, _>| {
            if let Ok(s) = s {
                out.push((l, self.normalize(&s)));
            }
        };
        for (actor, transition) in self.fireable_broadcasts(z) {
            push(
                FiredTransition::Broadcast { actor, transition },
                self.fire_broadcast(z, actor, transition),
            );
        }
        for (actor, transition) in self.fireable_onchain(z) {
            push(
                FiredTransition::OnChain { actor, transition },
                self.fire_onchain(z, actor, transition),
            );
        }
        for m in self.relevant_messages(z) {
            push(
                FiredTransition::Message {
                    from: m.from,
                    object: m.object,
                },
                self.fire_message(z, m),
            );
        }
        if let Some(d) = self.minimal_delay(z) {
            push(FiredTransition::Delay(d), self.fire_delay(z, d));
        }
        out.extend(self.reorg_successors(z));
        let zn = self.normalize(z);
        out.retain(|(_, s)| *s != zn);
        out
    }
}

/// Unfolds every state reachable from `z0`.
pub fn build_rg(
    model: &Model,
    z0: &TraceNetState,
    opts: &ExploreOptions,
) -> Result<ReachabilityGraph, ExploreError> {
    let root = model.normalize(z0);
    let mut index: HashMap<TraceNetState, usize> = HashMap::new();
    let mut nodes = vec![root.clone()];
    index.insert(root, 0);
    let mut raw: Vec<(usize, FiredTransition, usize)> = Vec::new();
    let mut work = vec![0usize];
    let mut rng = opts.shuffle_seed.map(StdRng::seed_from_u64);
    let mut head = 0;
    while head < work.len() {
        let n = match rng.as_mut() {
            Some(r) => {
                let i = r.gen_range(head..work.len());
                work.swap(head, i);
                work[head]
            }
            None => work[head],
        };
        head += 1;
        for (label, s) in model.successors(&nodes[n]) {
            let dst = match index.get(&s) {
                Some(&d) => d,
                None => {
                    if nodes.len() >= opts.budget {
                        return Err(ExploreError::BudgetExceeded(opts.budget));
                    }
                    let d = nodes.len();
                    index.insert(s.clone(), d);
                    nodes.push(s);
                    work.push(d);
                    d
                }
            };
            raw.push((n, label, dst));
        }
    }
    Ok(canonicalize(nodes, raw))
}

/// Renumbers nodes breadth-first from the root, visiting out-edges in
/// `(label, target state)` order, so the numbering is independent of the
/// exploration order.
fn canonicalize(
    nodes: Vec<TraceNetState>,
    raw: Vec<(usize, FiredTransition, usize)>,
) -> ReachabilityGraph {
    let mut out: Vec<Vec<(FiredTransition, usize)>> = vec![Vec::new(); nodes.len()];
    for (s, l, d) in raw {
        out[s].push((l, d));
    }
    for v in &mut out {
        v.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| nodes[a.1].cmp(&nodes[b.1])));
        v.dedup();
    }
    let mut order = vec![usize::MAX; nodes.len()];
    let mut seq = vec![0];
    order[0] = 0;
    let mut i = 0;
    while i < seq.len() {
        for (_, d) in &out[seq[i]] {
            if order[*d] == usize::MAX {
                order[*d] = seq.len();
                seq.push(*d);
            }
        }
        i += 1;
    }
    let mut edges = Vec::new();
    let mut offsets = vec![0];
    for &old in &seq {
        let mut es: Vec<Edge> = out[old]
            .iter()
            .map(|(l, d)| Edge {
                src: order[old],
                label: l.clone(),
                dst: order[*d],
            })
            .collect();
        es.sort();
        edges.extend(es);
        offsets.push(edges.len());
    }
    let mut slots: Vec<Option<TraceNetState>> = nodes.into_iter().map(Some).collect();
    let nodes: Vec<TraceNetState> = seq.iter().map(|&o| slots[o].take().unwrap()).collect();
    let index = nodes
        .iter()
        .cloned()
        .enumerate()
        .map(|(i, z)| (z, i))
        .collect();
    ReachabilityGraph {
        nodes,
        edges,
        offsets,
        index,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contract::Contract;
    use crate::semantics::Params;

    fn load(text: &str) -> Model {
        Contract::from_json(text).unwrap().model
    }

    fn htlc() -> Model {
        load(include_str!("../../../contracts/atomic_swap_htlc.json"))
    }

    fn one_sided() -> Model {
        load(include_str!("../../../contracts/one_sided_lock.json"))
    }

    fn funded(m: &Model) -> TraceNetState {
        let mut z = m.initial_state();
        for (a, l) in [(Actor::Int, "fund_A"), (Actor::Ext, "fund_B")] {
            let t = m.transition_id(l).unwrap();
            z = m.fire_broadcast(&z, a, t).unwrap();
            z = m.fire_onchain(&z, a, t).unwrap();
        }
        z
    }

    #[test]
    fn long_waits_compress_to_the_lock_horizon() {
        let m = htlc();
        let z = funded(&m);
        let at = |d| m.normalize(&m.fire_delay(&z, d).unwrap());
        assert_eq!(at(100), at(16));
        assert_ne!(at(15), at(16));
        assert_eq!(m.normalize(&z), z);
    }

    #[test]
    fn minimal_delay_releases_the_shorter_lock() {
        let m = htlc();
        assert_eq!(m.minimal_delay(&funded(&m)), Some(10));
        let z = m.fire_delay(&funded(&m), 10).unwrap();
        assert_eq!(m.minimal_delay(&z), Some(5));
    }

    #[test]
    fn successors_have_no_self_loops() {
        let m = htlc();
        let z = funded(&m);
        let zn = m.normalize(&z);
        let succ = m.successors(&z);
        assert!(!succ.is_empty());
        assert!(succ.iter().all(|(_, s)| *s != zn));
    }

    #[test]
    fn reorg_successors_keep_knowledge() {
        let m = htlc().with_params(Params {
            reorg_depth: 1,
            ..Params::default()
        });
        let z = m.fire_delay(&funded(&m), 1).unwrap();
        let rs = m.reorg_successors(&z);
        assert!(!rs.is_empty());
        for (l, s) in rs {
            assert!(matches!(l, FiredTransition::Reorg { depth: 1, .. }));
            for a in Actor::BOTH {
                assert!(z.knowledge(a).is_subset(s.knowledge(a)));
            }
        }
    }

    #[test]
    fn graph_is_independent_of_exploration_order() {
        let m = one_sided();
        let base = build_rg(&m, &m.initial_state(), &ExploreOptions::default()).unwrap();
        for seed in [1, 7] {
            let opts = ExploreOptions {
                shuffle_seed: Some(seed),
                ..ExploreOptions::default()
            };
            let rg = build_rg(&m, &m.initial_state(), &opts).unwrap();
            assert_eq!(rg.nodes, base.nodes);
            assert_eq!(rg.shape(), base.shape());
        }
    }

    #[test]
    fn budget_is_enforced() {
        let m = htlc();
        let opts = ExploreOptions {
            budget: 10,
            shuffle_seed: None,
        };
        assert_eq!(
            build_rg(&m, &m.initial_state(), &opts).unwrap_err(),
            ExploreError::BudgetExceeded(10)
        );
    }

    #[test]
    fn graph_structure() {
        let m = one_sided();
        let rg = build_rg(&m, &m.initial_state(), &ExploreOptions::default()).unwrap();
        assert_eq!(
            rg.node_of(&m.initial_state()),
            Some(ReachabilityGraph::ROOT)
        );
        let stats = rg.stats();
        assert_eq!(stats.nodes, rg.len());
        assert_eq!(stats.by_kind.values().sum::<usize>(), rg.edges.len());
        assert!(rg.edges.windows(2).all(|w| w[0] <= w[1]));
        for t in rg.terminal_states() {
            assert!(rg.out_edges(t).is_empty());
        }
        let pred = rg.predecessors();
        assert!(pred[ReachabilityGraph::ROOT].is_empty());
        // refund after the lock expires
        let refund = m.transition_id("refund_A").unwrap();
        let path = rg
            .shortest_path(
                ReachabilityGraph::ROOT,
                |_| true,
                |n| rg.nodes[n].history.iter().any(|&(t, _)| t == refund),
            )
            .unwrap();
        let labels: Vec<String> = path.iter().map(|&i| m.render(&rg.edges[i].label)).collect();
        assert!(labels.contains(&"d(10)".to_string()), "{labels:?}");
        assert!(labels.last().unwrap().starts_with("refund_A"));
        let dot = rg.to_dot(&m);
        assert!(dot.starts_with("digraph rg {"));
        assert_eq!(dot.matches(" -> ").count(), rg.edges.len());
    }
}
