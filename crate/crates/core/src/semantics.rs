//! Contract states and the firing relations: messages, broadcasts, on-chain
//! confirmations, delays and adversarial reorganizations.

use thiserror::Error;

use crate::knowledge::{Actor, Knowledge, KnowledgeObject, ObjId, Universe};
use crate::tracenet::{PlaceId, TraceNet, TransitionId};

/// Exploration parameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Params {
    /// Confirmation delay of broadcast transactions, per actor.
    pub conf_delay: [u64; 2],
    /// Deepest reorganization the adversary may cause.
    pub reorg_depth: u64,
    /// Knowledge kinds that may be sent as messages.
    pub message_kinds: Vec<String>,
}

impl Default for Params {
    fn default() -> Self {
        Params {
            conf_delay: [0, 0],
            reorg_depth: 0,
            message_kinds: ["signature", "preimage", "presignature", "adaptor_priv"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        }
    }
}

impl Params {
    pub fn conf(&self, a: Actor) -> u64 {
        self.conf_delay[a.index()]
    }
}

/// A broadcast awaiting confirmation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PoolEntry {
    pub transition: TransitionId,
    pub actor: Actor,
    pub height: u64,
}

/// Knowledge of both actors, current height, per-place token arrival
/// height, on-chain history and broadcast pool. The relative clock of an
/// arc is `height - arrival` of its input place.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TraceNetState {
    pub k: [Knowledge; 2],
    pub height: u64,
    pub marking: Vec<Option<u64>>,
    pub history: Vec<(TransitionId, u64)>,
    pub pool: Vec<PoolEntry>,
}

impl TraceNetState {
    pub fn knowledge(&self, a: Actor) -> &Knowledge {
        &self.k[a.index()]
    }

    pub fn is_marked(&self, p: PlaceId) -> bool {
        self.marking[p].is_some()
    }

    /// Blocks since the token on `p` arrived; 0 when `p` is empty.
    pub fn h_older(&self, p: PlaceId) -> u64 {
        self.marking[p].map_or(0, |a| self.height - a)
    }

    pub fn pooled(&self, t: TransitionId) -> Option<&PoolEntry> {
        self.pool.iter().find(|e| e.transition == t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Message {
    pub from: Actor,
    pub object: ObjId,
}

/// One step of an adversarial replacement branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ReplayStep {
    OnChain(TransitionId),
    Delay(u64),
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FiredTransition {
    Message {
        from: Actor,
        object: ObjId,
    },
    Broadcast {
        actor: Actor,
        transition: TransitionId,
    },
    OnChain {
        actor: Actor,
        transition: TransitionId,
    },
    Delay(u64),
    Reorg {
        depth: u64,
        replay: Vec<ReplayStep>,
    },
}

impl FiredTransition {
    /// The actor responsible for the step; `None` for the passage of time.
    pub fn actor(&self) -> Option<Actor> {
        match self {
            FiredTransition::Message { from, .. } => Some(*from),
            FiredTransition::Broadcast { actor, .. } | FiredTransition::OnChain { actor, .. } => {
                Some(*actor)
            }
            FiredTransition::Delay(_) => None,
            FiredTransition::Reorg { .. } => Some(Actor::Ext),
        }
    }

    pub fn is_reorg(&self) -> bool {
        matches!(self, FiredTransition::Reorg { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FireError {
    #[error("transition is not fireable: {0}")]
    NotFireable(String),
    #[error("delay must be at least one block")]
    ZeroDelay,
    #[error("output place {0} is already marked")]
    OutputOccupied(PlaceId),
}

/// A built contract: the knowledge universe, the net and the parameters.
#[derive(Debug, Clone)]
pub struct Model {
    pub universe: Universe,
    pub net: TraceNet,
    pub params: Params,
    sendable: Vec<bool>,
    place_older: Vec<u64>,
}

impl Model {
    pub fn new(universe: Universe, net: TraceNet, params: Params) -> Self {
        let sendable = (0..universe.len())
            .map(|o| {
                let kind = universe.object(o).kind();
                params.message_kinds.iter().any(|k| k == kind)
            })
            .collect();
        let mut place_older = vec![0u64; net.places.len()];
        for a in net.transitions.iter().flat_map(|t| t.ins.iter()) {
            place_older[a.place] = place_older[a.place].max(a.older as u64);
        }
        Model {
            universe,
            net,
            params,
            sendable,
            place_older,
        }
    }

    /// Largest relative lock on any arc consuming place `p`.
    pub fn place_older(&self, p: PlaceId) -> u64 {
        self.place_older[p]
    }

    /// Same contract under different parameters.
    pub fn with_params(&self, params: Params) -> Model {
        Model::new(self.universe.clone(), self.net.clone(), params)
    }

    pub fn initial_state(&self) -> TraceNetState {
        TraceNetState {
            k: [
                self.universe
                    .closure(self.universe.initial_knowledge(Actor::Int)),
                self.universe
                    .closure(self.universe.initial_knowledge(Actor::Ext)),
            ],
            height: self.net.b0,
            marking: self.net.m0.clone(),
            history: Vec::new(),
            pool: Vec::new(),
        }
    }

    /// Earliest height at which `t` becomes valid, if all its inputs are
    /// marked and its outputs empty.
    pub fn release_height(&self, z: &TraceNetState, t: TransitionId) -> Option<u64> {
        let tr = &self.net.transitions[t];
        if tr.outs.iter().any(|&p| z.is_marked(p)) {
            return None;
        }
        let mut h = 0;
        for a in &tr.ins {
            let arrival = z.marking[a.place]?;
            h = h.max(arrival + a.older as u64).max(a.after as u64);
        }
        Some(h)
    }

    /// Marking covers the inputs and both clocks have released.
    pub fn is_valid(&self, z: &TraceNetState, t: TransitionId) -> bool {
        self.release_height(z, t).is_some_and(|r| r <= z.height)
    }

    pub fn deduces(&self, z: &TraceNetState, a: Actor, t: TransitionId) -> bool {
        z.knowledge(a)
            .contains_all(&self.net.transitions[t].requires)
    }

    /// What firing `t` by `a` would newly tell the other actor.
    pub fn hidden_reveals(&self, z: &TraceNetState, a: Actor, t: TransitionId) -> Vec<ObjId> {
        let other = z.knowledge(a.other());
        self.net.transitions[t]
            .reveals
            .iter()
            .copied()
            .filter(|&o| !other.contains(o))
            .collect()
    }

    pub fn fireable_messages(&self, z: &TraceNetState) -> Vec<Message> {
        let mut out = Vec::new();
        for from in Actor::BOTH {
            let to = z.knowledge(from.other());
            for object in z.knowledge(from).iter() {
                if self.sendable[object] && !to.contains(object) {
                    out.push(Message { from, object });
                }
            }
        }
        out
    }

    pub fn fire_message(&self, z: &TraceNetState, m: Message) -> Result<TraceNetState, FireError> {
        if !self.fireable_messages(z).contains(&m) {
            return Err(FireError::NotFireable(format!(
                "message {}",
                self.universe.describe(m.object)
            )));
        }
        Ok(self.learn(z, m.from.other(), &[m.object]))
    }

    fn learn(&self, z: &TraceNetState, a: Actor, objs: &[ObjId]) -> TraceNetState {
        let mut next = z.clone();
        let mut k = z.knowledge(a).clone();
        for &o in objs {
            k.insert(o);
        }
        next.k[a.index()] = self.universe.closure(&k);
        next
    }

    pub fn fireable_broadcasts(&self, z: &TraceNetState) -> Vec<(Actor, TransitionId)> {
        let mut out = Vec::new();
        for t in 0..self.net.transitions.len() {
            if z.pooled(t).is_some() || !self.is_valid(z, t) {
                continue;
            }
            for a in Actor::BOTH {
                if self.deduces(z, a, t) && !self.hidden_reveals(z, a, t).is_empty() {
                    out.push((a, t));
                }
            }
        }
        out
    }

    pub fn fire_broadcast(
        &self,
        z: &TraceNetState,
        a: Actor,
        t: TransitionId,
    ) -> Result<TraceNetState, FireError> {
        if !self.fireable_broadcasts(z).contains(&(a, t)) {
            return Err(FireError::NotFireable(format!(
                "broadcast {} by {a}",
                self.net.transitions[t].label
            )));
        }
        let mut next = self.learn(z, a.other(), &self.hidden_reveals(z, a, t));
        next.pool.push(PoolEntry {
            transition: t,
            actor: a,
            height: z.height,
        });
        next.pool.sort();
        Ok(next)
    }

    pub fn fireable_onchain(&self, z: &TraceNetState) -> Vec<(Actor, TransitionId)> {
        let mut out = Vec::new();
        for t in 0..self.net.transitions.len() {
            if !self.is_valid(z, t) {
                continue;
            }
            match z.pooled(t) {
                Some(e) => {
                    if z.height - e.height >= self.params.conf(e.actor) {
                        out.push((e.actor, t));
                        // the adversary orders blocks and may mine it too
                        if e.actor == Actor::Int {
                            out.push((Actor::Ext, t));
                        }
                    }
                }
                None => {
                    for a in Actor::BOTH {
                        if self.deduces(z, a, t) && self.hidden_reveals(z, a, t).is_empty() {
                            out.push((a, t));
                        }
                    }
                }
            }
        }
        out
    }

    pub fn fire_onchain(
        &self,
        z: &TraceNetState,
        a: Actor,
        t: TransitionId,
    ) -> Result<TraceNetState, FireError> {
        if !self.fireable_onchain(z).contains(&(a, t)) {
            return Err(FireError::NotFireable(format!(
                "on-chain {} by {a}",
                self.net.transitions[t].label
            )));
        }
        self.confirm(z, t)
    }

    /// On-chain firing inside an adversarial replacement branch: the
    /// adversary mines its own transaction without broadcasting it, and the
    /// published witness reaches the internal actor with the block.
    pub fn fire_branch_onchain(
        &self,
        z: &TraceNetState,
        t: TransitionId,
    ) -> Result<TraceNetState, FireError> {
        if !self.is_valid(z, t) || !self.deduces(z, Actor::Ext, t) {
            return Err(FireError::NotFireable(format!(
                "branch {}",
                self.net.transitions[t].label
            )));
        }
        let revealed = self.hidden_reveals(z, Actor::Ext, t);
        let z = self.learn(z, Actor::Int, &revealed);
        self.confirm(&z, t)
    }

    fn confirm(&self, z: &TraceNetState, t: TransitionId) -> Result<TraceNetState, FireError> {
        let tr = &self.net.transitions[t];
        let mut next = z.clone();
        for a in &tr.ins {
            if next.marking[a.place].take().is_none() {
                return Err(FireError::NotFireable(format!(
                    "{} input unmarked",
                    tr.label
                )));
            }
        }
        for &p in &tr.outs {
            if next.marking[p].is_some() {
                return Err(FireError::OutputOccupied(p));
            }
            next.marking[p] = Some(z.height);
        }
        next.history.push((t, z.height));
        next.pool
            .retain(|e| e.transition != t && !self.net.conflicts(e.transition, t));
        Ok(next)
    }

    pub fn fire_delay(&self, z: &TraceNetState, d: u64) -> Result<TraceNetState, FireError> {
        if d == 0 {
            return Err(FireError::ZeroDelay);
        }
        let mut next = z.clone();
        next.height += d;
        Ok(next)
    }

    /// Rolls back the top `n` blocks. Confirmations above the cut are
    /// reverted, the height drops by `n` (never below the initial height)
    /// and knowledge is kept.
    pub fn fire_reorg(&self, z: &TraceNetState, n: u64) -> TraceNetState {
        let cut = z.height.saturating_sub(n);
        let mut next = z.clone();
        next.history.retain(|&(_, h)| h <= cut);
        next.marking = self.replay_history(&next.history);
        next.pool.retain(|e| e.height <= cut);
        next.height = cut.max(self.net.b0);
        next
    }

    /// Marking obtained by confirming `history` on top of the initial
    /// marking.
    pub fn replay_history(&self, history: &[(TransitionId, u64)]) -> Vec<Option<u64>> {
        let mut m = self.net.m0.clone();
        for &(t, h) in history {
            let tr = &self.net.transitions[t];
            for a in &tr.ins {
                m[a.place] = None;
            }
            for &p in &tr.outs {
                m[p] = Some(h);
            }
        }
        m
    }

    /// Applies a labelled step.
    pub fn fire(&self, z: &TraceNetState, l: &FiredTransition) -> Result<TraceNetState, FireError> {
        match l {
            FiredTransition::Message { from, object } => self.fire_message(
                z,
                Message {
                    from: *from,
                    object: *object,
                },
            ),
            FiredTransition::Broadcast { actor, transition } => {
                self.fire_broadcast(z, *actor, *transition)
            }
            FiredTransition::OnChain { actor, transition } => {
                self.fire_onchain(z, *actor, *transition)
            }
            FiredTransition::Delay(d) => self.fire_delay(z, *d),
            FiredTransition::Reorg { depth, replay } => {
                let mut s = self.fire_reorg(z, *depth);
                for step in replay {
                    s = match step {
                        ReplayStep::OnChain(t) => self.fire_branch_onchain(&s, *t)?,
                        ReplayStep::Delay(d) => self.fire_delay(&s, *d)?,
                    };
                }
                Ok(s)
            }
        }
    }

    /// Structural invariants every reachable state satisfies.
    pub fn check_invariants(&self, z: &TraceNetState) -> Result<(), String> {
        if z.height < self.net.b0 {
            return Err(format!("height {} below initial {}", z.height, self.net.b0));
        }
        if self.replay_history(&z.history) != z.marking {
            return Err("marking differs from history replay".into());
        }
        if z.history.windows(2).any(|w| w[0].1 > w[1].1) {
            return Err("history heights decrease".into());
        }
        if z.history.iter().any(|&(_, h)| h > z.height) {
            return Err("history above current height".into());
        }
        for (p, m) in z.marking.iter().enumerate() {
            if m.is_some_and(|a| a > z.height) {
                return Err(format!("token on place {p} arrives in the future"));
            }
            if m.is_none() && z.h_older(p) != 0 {
                return Err(format!("clock running on empty place {p}"));
            }
        }
        for a in Actor::BOTH {
            if self.universe.closure(z.knowledge(a)) != *z.knowledge(a) {
                return Err(format!("{a} knowledge not closed"));
            }
        }
        Ok(())
    }

    pub fn transition_label(&self, t: TransitionId) -> &str {
        &self.net.transitions[t].label
    }

    pub fn object_id(&self, o: &KnowledgeObject) -> Option<ObjId> {
        self.universe.id(o)
    }

    /// Object whose rendering is `name`, e.g. `preimage(b32)`.
    pub fn object_by_name(&self, name: &str) -> Option<ObjId> {
        (0..self.universe.len()).find(|&o| self.universe.describe(o) == name)
    }

    pub fn transition_id(&self, label: &str) -> Option<TransitionId> {
        self.net.transition_by_label(label).map(|t| t.id)
    }

    pub fn render(&self, l: &FiredTransition) -> String {
        match l {
            FiredTransition::Message { from, object } => format!(
                "e({from}->{}: {})",
                from.other(),
                self.universe.describe(*object)
            ),
            FiredTransition::Broadcast { actor, transition } => {
                format!("tb({},{actor})", self.transition_label(*transition))
            }
            FiredTransition::OnChain { actor, transition } => {
                format!("{},{actor}", self.transition_label(*transition))
            }
            FiredTransition::Delay(d) => format!("d({d})"),
            FiredTransition::Reorg { depth, replay } => {
                let steps: Vec<String> = replay
                    .iter()
                    .map(|s| match s {
                        ReplayStep::OnChain(t) => self.transition_label(*t).to_string(),
                        ReplayStep::Delay(d) => format!("d({d})"),
                    })
                    .collect();
                format!("r({depth})[{}]", steps.join(" "))
            }
        }
    }

    /// Arrow notation, e.g. `--fund_A,int--> --d(10)-->`.
    pub fn render_trace(&self, trace: &[FiredTransition]) -> String {
        trace
            .iter()
            .map(|l| format!("--{}-->", self.render(l)))
            .collect::<Vec<_>>()
            .join(" ")
    }
}
