//! The timed Petri net over contract outputs: one place per output, one
//! transition per producible witness permutation of every known template.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::knowledge::{Actor, ObjId, Universe};
use crate::miniscript::Miniscript;
use crate::txmodel::{permutations, OutputRef, TxError, TxId, WitnessPermutation};

pub type PlaceId = usize;
pub type TransitionId = usize;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Place {
    pub id: PlaceId,
    pub source: OutputRef,
    pub label: String,
    pub value: u64,
    pub script: Miniscript,
}

/// Input arc with its earliest-firing interval: the input's relative lock
/// and the transaction's absolute lock, each merged with the chosen
/// witness's script locks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InArc {
    pub place: PlaceId,
    pub older: u32,
    pub after: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetTransition {
    pub id: TransitionId,
    pub tx: TxId,
    pub label: String,
    pub perm: WitnessPermutation,
    pub ins: Vec<InArc>,
    pub outs: Vec<PlaceId>,
    /// Objects an actor needs to witness this transition.
    pub requires: Vec<ObjId>,
    /// Objects the witness publishes.
    pub reveals: Vec<ObjId>,
    /// Produced by the sweep rule rather than declared in the contract.
    pub derived: bool,
}

#[derive(Debug, Clone)]
pub struct TraceNet {
    pub places: Vec<Place>,
    pub transitions: Vec<NetTransition>,
    /// Arrival height of every initially confirmed output.
    pub m0: Vec<Option<u64>>,
    pub b0: u64,
    place_of: BTreeMap<OutputRef, PlaceId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NetError {
    #[error(transparent)]
    Tx(#[from] TxError),
    #[error("funding output {0} is not an input of any known template")]
    UnusedFunding(OutputRef),
    #[error("funding output {0} confirms at {1}, after the initial height {2}")]
    FutureFunding(OutputRef, u64, u64),
}

impl TraceNet {
    /// Builds the net from every template in the closure of either actor's
    /// setup knowledge. `confirmed` gives the confirmation heights of the
    /// funding outputs already on chain.
    pub fn build(
        u: &Universe,
        confirmed: &BTreeMap<OutputRef, u64>,
        b0: u64,
    ) -> Result<TraceNet, NetError> {
        let k0 = [
            u.closure(u.initial_knowledge(Actor::Int)),
            u.closure(u.initial_knowledge(Actor::Ext)),
        ];
        let known: Vec<_> = u
            .templates()
            .iter()
            .filter(|t| {
                let id = u
                    .id(&crate::knowledge::KnowledgeObject::Template(t.id.clone()))
                    .expect("templates are interned");
                k0.iter().any(|k| k.contains(id))
            })
            .collect();

        let mut net = TraceNet {
            places: Vec::new(),
            transitions: Vec::new(),
            m0: Vec::new(),
            b0,
            place_of: BTreeMap::new(),
        };
        let label_of = |r: &OutputRef| {
            let name = u
                .template(&r.txid)
                .map_or(r.txid.0.as_str(), |t| t.name.as_str());
            format!("{name}:{}", r.index)
        };
        for t in &known {
            for i in &t.ins {
                net.place(u, &i.prevout, label_of(&i.prevout));
            }
            for (r, _) in t.out_refs() {
                let l = label_of(&r);
                net.place(u, &r, l);
            }
        }
        for (r, &h) in confirmed {
            let Some(&p) = net.place_of.get(r) else {
                return Err(NetError::UnusedFunding(r.clone()));
            };
            if h > b0 {
                return Err(NetError::FutureFunding(r.clone(), h, b0));
            }
            net.m0[p] = Some(h);
        }
        for t in &known {
            let perms: Vec<_> = permutations(t, u.outputs())?
                .into_iter()
                .filter_map(|p| u.requirements(&p).map(|req| (p, req)))
                .collect();
            let many = perms.len() > 1;
            for (perm, requires) in perms {
                let ins = t
                    .ins
                    .iter()
                    .zip(perm.witnesses())
                    .map(|(i, w)| InArc {
                        place: net.place_of[&i.prevout],
                        older: i.older.max(w.older()),
                        after: t.after.max(w.after()),
                    })
                    .collect();
                let outs = t.out_refs().map(|(r, _)| net.place_of[&r]).collect();
                let label = if many {
                    let idx: Vec<String> = perm.choice.iter().map(|(i, _)| i.to_string()).collect();
                    format!("{}/{}", t.name, idx.join("."))
                } else {
                    t.name.clone()
                };
                net.transitions.push(NetTransition {
                    id: net.transitions.len(),
                    tx: t.id.clone(),
                    label,
                    reveals: u.reveal_set(&perm),
                    perm,
                    ins,
                    outs,
                    requires,
                    derived: u.is_derived(&t.id),
                });
            }
        }
        Ok(net)
    }

    fn place(&mut self, u: &Universe, r: &OutputRef, label: String) -> PlaceId {
        if let Some(&p) = self.place_of.get(r) {
            return p;
        }
        let o = &u.outputs()[r];
        let id = self.places.len();
        self.places.push(Place {
            id,
            source: r.clone(),
            label,
            value: o.value,
            script: o.script.clone(),
        });
        self.m0.push(None);
        self.place_of.insert(r.clone(), id);
        id
    }

    pub fn place_of(&self, r: &OutputRef) -> Option<PlaceId> {
        self.place_of.get(r).copied()
    }

    pub fn transition_by_label(&self, label: &str) -> Option<&NetTransition> {
        self.transitions.iter().find(|t| t.label == label)
    }

    /// Token demand of `t`: 1 on each input place, 0 elsewhere.
    pub fn required_tokens(&self, t: TransitionId) -> Vec<u8> {
        let mut v = vec![0; self.places.len()];
        for a in &self.transitions[t].ins {
            v[a.place] = 1;
        }
        v
    }

    /// Transitions that can never fire together with `t` on one chain
    /// because they spend a common output.
    pub fn conflicts(&self, a: TransitionId, b: TransitionId) -> bool {
        let ta = &self.transitions[a];
        let tb = &self.transitions[b];
        ta.ins
            .iter()
            .any(|x| tb.ins.iter().any(|y| x.place == y.place))
    }

    pub fn to_dot(&self) -> String {
        let mut s = String::from("digraph tracenet {\n  rankdir=LR;\n");
        for p in &self.places {
            let marked = if self.m0[p.id].is_some() {
                ",style=filled,fillcolor=gray80"
            } else {
                ""
            };
            let _ = writeln!(
                s,
                "  p{} [shape=circle{marked},label=\"{}\\n{}\"];",
                p.id,
                escape(&p.label),
                p.value
            );
        }
        for t in &self.transitions {
            let _ = writeln!(
                s,
                "  t{} [shape=box,height=0.2,label=\"{}\"];",
                t.id,
                escape(&t.label)
            );
            for a in &t.ins {
                let mut parts = Vec::new();
                if a.older > 0 {
                    parts.push(format!("older {}", a.older));
                }
                if a.after > 0 {
                    parts.push(format!("after {}", a.after));
                }
                let _ = writeln!(
                    s,
                    "  p{} -> t{} [label=\"{}\"];",
                    a.place,
                    t.id,
                    parts.join(", ")
                );
            }
            for o in &t.outs {
                let _ = writeln!(s, "  t{} -> p{};", t.id, o);
            }
        }
        s.push_str("}\n");
        s
    }
}

pub(crate) fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::knowledge::{Context, DeclaredTemplate, Party, RuleSet};
    use crate::miniscript::{parse_miniscript, KeyId};
    use crate::txmodel::{TxInput, TxOutput, TxTemplate};

    fn out(value: u64, s: &str) -> TxOutput {
        TxOutput {
            value,
            script: parse_miniscript(s).unwrap(),
        }
    }

    fn party(name: &str, k: &str) -> Party {
        Party {
            name: name.into(),
            keys: vec![KeyId::new(k)],
            preimages: vec![],
            adaptor_keys: vec![],
            sweep_key: KeyId::new(k),
        }
    }

    fn ctx(funding: Vec<(&str, TxOutput)>, templates: Vec<TxTemplate>) -> Context {
        Context {
            parties: [party("A", "pk_A"), party("B", "pk_B")],
            templates: templates
                .into_iter()
                .map(|template| DeclaredTemplate {
                    template,
                    known_by: vec![Actor::Int, Actor::Ext],
                })
                .collect(),
            funding: funding
                .into_iter()
                .map(|(n, o)| (OutputRef::new(TxId(n.into()), 0), o))
                .collect(),
            presignatures: vec![],
            sweep_names: BTreeMap::new(),
        }
    }

    fn r(n: &str) -> OutputRef {
        OutputRef::new(TxId(n.into()), 0)
    }

    #[test]
    fn minimal_net() {
        // jointly controlled outputs have no sweeps, so exactly one transition
        let joint = "and_v(v(pk(pk_A)),pk(pk_B))";
        let t = TxTemplate::new("pay", vec![TxInput::new(r("f"))], vec![out(5, joint)], 0).unwrap();
        let c = ctx(vec![("f", out(5, joint))], vec![t]);
        let u = Universe::new(&c, &RuleSet::standard()).unwrap();
        let confirmed = [(r("f"), 3)].into_iter().collect();
        let net = TraceNet::build(&u, &confirmed, 5).unwrap();
        assert_eq!(net.places.len(), 2);
        assert_eq!(net.transitions.len(), 1);
        assert_eq!(net.m0, vec![Some(3), None]);
        assert_eq!(net.required_tokens(0), vec![1, 0]);
    }

    #[test]
    fn two_by_two_inputs() {
        let htlc = "andor(and_v(v(pk(pk_A)),pk(pk_B)),sha256(h),and_v(v(pk(pk_A)),and_v(v(pk(pk_B)),older(4))))";
        let t = TxTemplate::new(
            "merge",
            vec![TxInput::new(r("x")), TxInput::new(r("y"))],
            vec![out(2, "pk(pk_A)")],
            0,
        )
        .unwrap();
        let c = ctx(vec![("x", out(1, htlc)), ("y", out(1, htlc))], vec![t]);
        let u = Universe::new(&c, &RuleSet::standard()).unwrap();
        let net = TraceNet::build(&u, &BTreeMap::new(), 0).unwrap();
        // independent count: producible witnesses per input, multiplied
        let per_input = crate::txmodel::output_sat(&out(1, htlc))
            .iter()
            .filter(|w| w.is_producible())
            .count();
        let merge: Vec<_> = net
            .transitions
            .iter()
            .filter(|t| t.label.starts_with("merge"))
            .collect();
        assert_eq!(merge.len(), per_input * per_input);
        assert_eq!(merge.len(), 4);
        for t in &merge {
            assert_eq!(t.ins.len(), 2);
            assert_eq!(t.ins[0].place, merge[0].ins[0].place);
            assert_eq!(t.ins[1].place, merge[0].ins[1].place);
        }
        assert_eq!(
            net.required_tokens(merge[0].id)
                .iter()
                .filter(|&&x| x == 1)
                .count(),
            2
        );
    }

    #[test]
    fn intervals_merge_field_and_script_locks() {
        let mut i = TxInput::new(r("f"));
        i.older = 3;
        let t = TxTemplate::new("t", vec![i], vec![out(1, "pk(pk_B)")], 40).unwrap();
        let c = ctx(
            vec![(
                "f",
                out(
                    1,
                    "and_v(v(pk(pk_A)),and_v(v(pk(pk_B)),and_v(v(older(7)),after(30))))",
                ),
            )],
            vec![t],
        );
        let u = Universe::new(&c, &RuleSet::standard()).unwrap();
        let net = TraceNet::build(&u, &BTreeMap::new(), 0).unwrap();
        let arc = net.transition_by_label("t").unwrap().ins[0];
        assert_eq!((arc.older, arc.after), (7, 40));
    }

    #[test]
    fn dot_is_deterministic() {
        let t = TxTemplate::new(
            "pay",
            vec![TxInput::new(r("f"))],
            vec![out(5, "pk(pk_B)")],
            0,
        )
        .unwrap();
        let c = ctx(vec![("f", out(5, "pk(pk_A)"))], vec![t]);
        let u = Universe::new(&c, &RuleSet::standard()).unwrap();
        let net = TraceNet::build(&u, &BTreeMap::new(), 0).unwrap();
        let d = net.to_dot();
        assert_eq!(
            d,
            TraceNet::build(&u, &BTreeMap::new(), 0).unwrap().to_dot()
        );
        assert_eq!(d.matches("shape=box").count(), net.transitions.len());
        assert_eq!(d.matches("shape=circle").count(), net.places.len());
    }
}
