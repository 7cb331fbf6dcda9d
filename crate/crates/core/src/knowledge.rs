//! Symbolic actor knowledge and its deductive closure.
//!
//! All objects an actor could ever know are interned up front in a
//! [`Universe`], so knowledge sets are bitsets and closure is forward
//! chaining over precomputed ground rule instances. Sweep templates are
//! generated when the universe is built; the `SweepTx` rule only decides
//! which actors learn them.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use bit_set::BitSet;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::miniscript::{Digest, KeyId, Miniscript, SymbolicWitness};
use crate::txmodel::{
    output_sat, path_controlled, OutputRef, Secrets, TxError, TxId, TxInput, TxOutput, TxTemplate,
    WitnessPermutation,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Actor {
    Int,
    Ext,
}

impl Actor {
    pub const BOTH: [Actor; 2] = [Actor::Int, Actor::Ext];

    pub fn index(self) -> usize {
        match self {
            Actor::Int => 0,
            Actor::Ext => 1,
        }
    }

    pub fn other(self) -> Actor {
        match self {
            Actor::Int => Actor::Ext,
            Actor::Ext => Actor::Int,
        }
    }
}

impl fmt::Display for Actor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Actor::Int => "int",
            Actor::Ext => "ext",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum KnowledgeObject {
    PrivKey(KeyId),
    PubKey(KeyId),
    Preimage(Digest),
    Digest(Digest),
    Template(TxId),
    Signature {
        key: KeyId,
        tx: TxId,
    },
    PreSignature {
        signer: KeyId,
        tx: TxId,
        adaptor: KeyId,
    },
    AdaptorPriv(KeyId),
    AdaptorPub(KeyId),
}

impl KnowledgeObject {
    /// Kind name as used in message allowlists.
    pub fn kind(&self) -> &'static str {
        match self {
            KnowledgeObject::PrivKey(_) => "privkey",
            KnowledgeObject::PubKey(_) => "pubkey",
            KnowledgeObject::Preimage(_) => "preimage",
            KnowledgeObject::Digest(_) => "digest",
            KnowledgeObject::Template(_) => "template",
            KnowledgeObject::Signature { .. } => "signature",
            KnowledgeObject::PreSignature { .. } => "presignature",
            KnowledgeObject::AdaptorPriv(_) => "adaptor_priv",
            KnowledgeObject::AdaptorPub(_) => "adaptor_pub",
        }
    }
}

pub type ObjId = usize;

/// A set of interned knowledge objects.
#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Knowledge(BitSet);

impl Knowledge {
    pub fn new() -> Self {
        Knowledge(BitSet::new())
    }

    pub fn contains(&self, id: ObjId) -> bool {
        self.0.contains(id)
    }

    pub fn insert(&mut self, id: ObjId) -> bool {
        self.0.insert(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = ObjId> + '_ {
        self.0.iter()
    }

    pub fn len(&self) -> usize {
        self.0.count()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_subset(&self, other: &Knowledge) -> bool {
        self.0.is_subset(&other.0)
    }

    pub fn contains_all(&self, ids: &[ObjId]) -> bool {
        ids.iter().all(|&i| self.contains(i))
    }
}

impl FromIterator<ObjId> for Knowledge {
    fn from_iter<I: IntoIterator<Item = ObjId>>(iter: I) -> Self {
        Knowledge(iter.into_iter().collect())
    }
}

/// Setup-phase holdings of one party.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Party {
    pub name: String,
    pub keys: Vec<KeyId>,
    pub preimages: Vec<Digest>,
    pub adaptor_keys: Vec<KeyId>,
    /// Key paying the outputs of this party's sweep templates.
    pub sweep_key: KeyId,
}

impl Party {
    pub fn secrets(&self) -> Secrets {
        Secrets {
            keys: self.keys.iter().chain([&self.sweep_key]).cloned().collect(),
            preimages: self.preimages.iter().cloned().collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeclaredTemplate {
    pub template: TxTemplate,
    pub known_by: Vec<Actor>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeclaredPreSig {
    pub signer: KeyId,
    pub tx: TxId,
    pub adaptor: KeyId,
    pub known_by: Vec<Actor>,
}

/// Everything the setup phase produced: the parties, the contract
/// templates, the funding outputs they spend and exchanged pre-signatures.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Context {
    /// Indexed by [`Actor::index`].
    pub parties: [Party; 2],
    pub templates: Vec<DeclaredTemplate>,
    pub funding: BTreeMap<OutputRef, TxOutput>,
    pub presignatures: Vec<DeclaredPreSig>,
    /// Display names for sweep templates, keyed `<tx name>:<index>/<path>`.
    pub sweep_names: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RuleKind {
    SweepTx,
    Sign,
    Adapt,
    Ext,
}

/// A user-registered deduction over declared objects.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CustomRule {
    pub name: String,
    pub premises: Vec<KnowledgeObject>,
    pub conclusion: KnowledgeObject,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RuleSet {
    kinds: Vec<RuleKind>,
    custom: Vec<CustomRule>,
}

impl RuleSet {
    /// `SweepTx` and `Sign`.
    pub fn standard() -> Self {
        RuleSet {
            kinds: vec![RuleKind::SweepTx, RuleKind::Sign],
            custom: Vec::new(),
        }
    }

    /// The standard rules plus adaptor signatures (`Adapt`, `Ext`).
    pub fn with_adaptor() -> Self {
        let mut r = Self::standard();
        r.kinds.extend([RuleKind::Adapt, RuleKind::Ext]);
        r
    }

    pub fn has(&self, k: RuleKind) -> bool {
        self.kinds.contains(&k)
    }

    /// Adds a custom rule; its objects are checked against the universe
    /// when the universe is built.
    pub fn register(&mut self, rule: CustomRule) {
        self.custom.push(rule);
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundRule {
    pub name: String,
    pub premises: Vec<ObjId>,
    pub conclusion: ObjId,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum KnowledgeError {
    #[error(transparent)]
    Tx(#[from] TxError),
    #[error("templates `{0}` and `{1}` have identical content")]
    DuplicateTemplate(String, String),
    #[error("duplicate template name `{0}`")]
    DuplicateName(String),
    #[error("pre-signature refers to unknown template {0}")]
    UnknownTemplate(TxId),
    #[error("`{0}` is not a declared adaptor key")]
    UnknownAdaptor(KeyId),
    #[error("rule `{rule}` refers to undeclared object {object}")]
    UnknownObject { rule: String, object: String },
}

/// The finite set of objects and templates reachable in a contract, with
/// the ground deduction rules over them.
#[derive(Debug, Clone)]
pub struct Universe {
    objects: Vec<KnowledgeObject>,
    index: HashMap<KnowledgeObject, ObjId>,
    templates: Vec<TxTemplate>,
    derived: Vec<bool>,
    by_id: HashMap<TxId, usize>,
    outputs: BTreeMap<OutputRef, TxOutput>,
    funding: BTreeMap<OutputRef, TxOutput>,
    rules: Vec<GroundRule>,
    by_premise: Vec<Vec<usize>>,
    parties: [Party; 2],
    initial: [Knowledge; 2],
}

impl Universe {
    pub fn new(ctx: &Context, rules: &RuleSet) -> Result<Self, KnowledgeError> {
        let mut u = Universe {
            objects: Vec::new(),
            index: HashMap::new(),
            templates: Vec::new(),
            derived: Vec::new(),
            by_id: HashMap::new(),
            outputs: ctx.funding.clone(),
            funding: ctx.funding.clone(),
            rules: Vec::new(),
            by_premise: Vec::new(),
            parties: ctx.parties.clone(),
            initial: [Knowledge::new(), Knowledge::new()],
        };
        let mut names = BTreeSet::new();
        for d in &ctx.templates {
            let t = &d.template;
            if !names.insert(t.name.clone()) {
                return Err(KnowledgeError::DuplicateName(t.name.clone()));
            }
            if let Some(&prev) = u.by_id.get(&t.id) {
                return Err(KnowledgeError::DuplicateTemplate(
                    u.templates[prev].name.clone(),
                    t.name.clone(),
                ));
            }
            u.add_template(t.clone(), false);
        }
        for t in &u.templates {
            for i in &t.ins {
                if !u.outputs.contains_key(&i.prevout) {
                    return Err(TxError::Dangling(i.prevout.clone()).into());
                }
            }
        }
        let sweeps = if rules.has(RuleKind::SweepTx) {
            u.generate_sweeps(ctx)?
        } else {
            Vec::new()
        };

        u.intern_declared(ctx)?;
        u.intern_presigs(ctx)?;

        for (premises, sweep) in sweeps {
            let conclusion = u.intern(KnowledgeObject::Template(sweep));
            for p in premises {
                let p = u.intern(KnowledgeObject::Template(p));
                u.rules.push(GroundRule {
                    name: "SweepTx".into(),
                    premises: vec![p],
                    conclusion,
                });
            }
        }
        if rules.has(RuleKind::Sign) {
            let adaptor_bound = rules.has(RuleKind::Adapt);
            let presigned: BTreeSet<(KeyId, TxId)> = ctx
                .presignatures
                .iter()
                .map(|p| (p.signer.clone(), p.tx.clone()))
                .collect();
            for ti in 0..u.templates.len() {
                let tx = u.templates[ti].id.clone();
                for key in u.signing_keys(ti) {
                    // a key committed to a pre-signature only ever signs via Adapt
                    if adaptor_bound && presigned.contains(&(key.clone(), tx.clone())) {
                        continue;
                    }
                    let tmpl = u.intern(KnowledgeObject::Template(tx.clone()));
                    let sk = u.intern(KnowledgeObject::PrivKey(key.clone()));
                    let sig = u.intern(KnowledgeObject::Signature {
                        key,
                        tx: tx.clone(),
                    });
                    u.rules.push(GroundRule {
                        name: "Sign".into(),
                        premises: vec![tmpl, sk],
                        conclusion: sig,
                    });
                }
            }
        }
        for p in &ctx.presignatures {
            let psig = u.intern(KnowledgeObject::PreSignature {
                signer: p.signer.clone(),
                tx: p.tx.clone(),
                adaptor: p.adaptor.clone(),
            });
            let sig = u.intern(KnowledgeObject::Signature {
                key: p.signer.clone(),
                tx: p.tx.clone(),
            });
            let y = u.intern(KnowledgeObject::AdaptorPriv(p.adaptor.clone()));
            if rules.has(RuleKind::Adapt) {
                u.rules.push(GroundRule {
                    name: "Adapt".into(),
                    premises: vec![psig, y],
                    conclusion: sig,
                });
            }
            if rules.has(RuleKind::Ext) {
                u.rules.push(GroundRule {
                    name: "Ext".into(),
                    premises: vec![psig, sig],
                    conclusion: y,
                });
            }
        }
        for c in &rules.custom {
            let lookup = |o: &KnowledgeObject| {
                u.id(o).ok_or_else(|| KnowledgeError::UnknownObject {
                    rule: c.name.clone(),
                    object: format!("{o:?}"),
                })
            };
            let premises = c
                .premises
                .iter()
                .map(lookup)
                .collect::<Result<Vec<_>, _>>()?;
            let conclusion = lookup(&c.conclusion)?;
            u.rules.push(GroundRule {
                name: c.name.clone(),
                premises,
                conclusion,
            });
        }

        u.by_premise = vec![Vec::new(); u.objects.len()];
        for (ri, r) in u.rules.iter().enumerate() {
            for &p in &r.premises {
                u.by_premise[p].push(ri);
            }
        }
        u.initial = [
            u.setup_knowledge(ctx, Actor::Int),
            u.setup_knowledge(ctx, Actor::Ext),
        ];
        Ok(u)
    }

    fn add_template(&mut self, t: TxTemplate, derived: bool) -> usize {
        let ti = self.templates.len();
        for (r, o) in t.out_refs() {
            self.outputs.insert(r, o.clone());
        }
        self.by_id.insert(t.id.clone(), ti);
        self.templates.push(t);
        self.derived.push(derived);
        ti
    }

    /// One sweep template per (output, path, controlling actor). Sources are
    /// funding outputs spent by declared templates and outputs of declared
    /// templates; sweep outputs themselves are never swept again.
    fn generate_sweeps(&mut self, ctx: &Context) -> Result<Vec<(Vec<TxId>, TxId)>, KnowledgeError> {
        let secrets = [ctx.parties[0].secrets(), ctx.parties[1].secrets()];
        let mut sources: Vec<(OutputRef, String, Vec<TxId>)> = Vec::new();
        let mut seen_funding: BTreeMap<OutputRef, usize> = BTreeMap::new();
        for d in &ctx.templates {
            let t = &d.template;
            for i in &t.ins {
                if let Some(&si) = seen_funding.get(&i.prevout) {
                    sources[si].2.push(t.id.clone());
                } else if self.funding.contains_key(&i.prevout) {
                    seen_funding.insert(i.prevout.clone(), sources.len());
                    let label = format!("{}:{}", i.prevout.txid, i.prevout.index);
                    sources.push((i.prevout.clone(), label, vec![t.id.clone()]));
                }
            }
            for (r, _) in t.out_refs() {
                let label = format!("{}:{}", t.name, r.index);
                sources.push((r, label, vec![t.id.clone()]));
            }
        }
        let sweep_scripts: Vec<Miniscript> = ctx
            .parties
            .iter()
            .map(|p| Miniscript::Pk(p.sweep_key.clone()))
            .collect();
        let mut out = Vec::new();
        for (outref, label, premises) in sources {
            let o = self.outputs[&outref].clone();
            // already paid to a sweep key: final
            if sweep_scripts.contains(&o.script) {
                continue;
            }
            for (p, w) in output_sat(&o).iter().enumerate() {
                for a in Actor::BOTH {
                    if !path_controlled(w, &secrets[a.index()], &secrets[a.other().index()]) {
                        continue;
                    }
                    let key = format!("{label}/{p}");
                    let name = ctx
                        .sweep_names
                        .get(&key)
                        .cloned()
                        .unwrap_or_else(|| format!("sweep[{key}]"));
                    let input = TxInput {
                        prevout: outref.clone(),
                        older: 0,
                        path: Some(p),
                    };
                    let dest = TxOutput {
                        value: o.value,
                        script: Miniscript::Pk(ctx.parties[a.index()].sweep_key.clone()),
                    };
                    let t = TxTemplate::new(name, vec![input], vec![dest], 0)?;
                    let id = t.id.clone();
                    if !self.by_id.contains_key(&id) {
                        self.add_template(t, true);
                    }
                    out.push((premises.clone(), id));
                }
            }
        }
        Ok(out)
    }

    fn intern_declared(&mut self, ctx: &Context) -> Result<(), KnowledgeError> {
        for party in &ctx.parties {
            for k in party.keys.iter().chain([&party.sweep_key]) {
                self.intern(KnowledgeObject::PrivKey(k.clone()));
                self.intern(KnowledgeObject::PubKey(k.clone()));
            }
            for d in &party.preimages {
                self.intern(KnowledgeObject::Preimage(d.clone()));
                self.intern(KnowledgeObject::Digest(d.clone()));
            }
            for y in &party.adaptor_keys {
                self.intern(KnowledgeObject::AdaptorPriv(y.clone()));
                self.intern(KnowledgeObject::AdaptorPub(y.clone()));
            }
        }
        let scripts: Vec<Miniscript> = self.outputs.values().map(|o| o.script.clone()).collect();
        for s in &scripts {
            for k in s.keys() {
                self.intern(KnowledgeObject::PrivKey(k.clone()));
                self.intern(KnowledgeObject::PubKey(k.clone()));
            }
            for d in s.digests() {
                self.intern(KnowledgeObject::Preimage(d.clone()));
                self.intern(KnowledgeObject::Digest(d.clone()));
            }
        }
        for ti in 0..self.templates.len() {
            let tx = self.templates[ti].id.clone();
            self.intern(KnowledgeObject::Template(tx.clone()));
            for key in self.signing_keys(ti) {
                self.intern(KnowledgeObject::Signature {
                    key,
                    tx: tx.clone(),
                });
            }
        }
        Ok(())
    }

    fn intern_presigs(&mut self, ctx: &Context) -> Result<(), KnowledgeError> {
        let adaptors: BTreeSet<&KeyId> = ctx.parties.iter().flat_map(|p| &p.adaptor_keys).collect();
        for p in &ctx.presignatures {
            if !self.by_id.contains_key(&p.tx) {
                return Err(KnowledgeError::UnknownTemplate(p.tx.clone()));
            }
            if !adaptors.contains(&p.adaptor) {
                return Err(KnowledgeError::UnknownAdaptor(p.adaptor.clone()));
            }
            self.intern(KnowledgeObject::PreSignature {
                signer: p.signer.clone(),
                tx: p.tx.clone(),
                adaptor: p.adaptor.clone(),
            });
            self.intern(KnowledgeObject::Signature {
                key: p.signer.clone(),
                tx: p.tx.clone(),
            });
            self.intern(KnowledgeObject::AdaptorPriv(p.adaptor.clone()));
            self.intern(KnowledgeObject::AdaptorPub(p.adaptor.clone()));
        }
        Ok(())
    }

    /// Knowledge right after setup, before closure: the party's own
    /// secrets, every public value, and the templates and pre-signatures
    /// the party was given.
    fn setup_knowledge(&self, ctx: &Context, a: Actor) -> Knowledge {
        let mut k = Knowledge::new();
        let party = &ctx.parties[a.index()];
        let id = |o: KnowledgeObject| self.index[&o];
        for key in party.keys.iter().chain([&party.sweep_key]) {
            k.insert(id(KnowledgeObject::PrivKey(key.clone())));
        }
        for d in &party.preimages {
            k.insert(id(KnowledgeObject::Preimage(d.clone())));
        }
        for y in &party.adaptor_keys {
            k.insert(id(KnowledgeObject::AdaptorPriv(y.clone())));
        }
        for (oid, o) in self.objects.iter().enumerate() {
            if matches!(
                o,
                KnowledgeObject::PubKey(_)
                    | KnowledgeObject::Digest(_)
                    | KnowledgeObject::AdaptorPub(_)
            ) {
                k.insert(oid);
            }
        }
        for d in &ctx.templates {
            if d.known_by.contains(&a) {
                k.insert(id(KnowledgeObject::Template(d.template.id.clone())));
            }
        }
        for p in &ctx.presignatures {
            if p.known_by.contains(&a) {
                k.insert(id(KnowledgeObject::PreSignature {
                    signer: p.signer.clone(),
                    tx: p.tx.clone(),
                    adaptor: p.adaptor.clone(),
                }));
            }
        }
        k
    }

    fn intern(&mut self, o: KnowledgeObject) -> ObjId {
        if let Some(&i) = self.index.get(&o) {
            return i;
        }
        let i = self.objects.len();
        self.index.insert(o.clone(), i);
        self.objects.push(o);
        i
    }

    /// Keys with a signature constraint on some allowed path of some input.
    fn signing_keys(&self, ti: usize) -> Vec<KeyId> {
        let t = &self.templates[ti];
        let mut keys = BTreeSet::new();
        for i in &t.ins {
            let o = &self.outputs[&i.prevout];
            for (p, w) in output_sat(o).iter().enumerate() {
                if i.path.is_none_or(|c| c == p) && w.is_producible() {
                    keys.extend(w.sig_keys().cloned());
                }
            }
        }
        keys.into_iter().collect()
    }

    pub fn id(&self, o: &KnowledgeObject) -> Option<ObjId> {
        self.index.get(o).copied()
    }

    pub fn object(&self, id: ObjId) -> &KnowledgeObject {
        &self.objects[id]
    }

    pub fn len(&self) -> usize {
        self.objects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }

    pub fn rules(&self) -> &[GroundRule] {
        &self.rules
    }

    pub fn templates(&self) -> &[TxTemplate] {
        &self.templates
    }

    pub fn template(&self, id: &TxId) -> Option<&TxTemplate> {
        self.by_id.get(id).map(|&i| &self.templates[i])
    }

    pub fn template_by_name(&self, name: &str) -> Option<&TxTemplate> {
        self.templates.iter().find(|t| t.name == name)
    }

    /// Whether the template was produced by `SweepTx` rather than declared.
    pub fn is_derived(&self, id: &TxId) -> bool {
        self.by_id.get(id).is_some_and(|&i| self.derived[i])
    }

    pub fn outputs(&self) -> &BTreeMap<OutputRef, TxOutput> {
        &self.outputs
    }

    pub fn funding(&self) -> &BTreeMap<OutputRef, TxOutput> {
        &self.funding
    }

    pub fn party(&self, a: Actor) -> &Party {
        &self.parties[a.index()]
    }

    /// Setup knowledge of `a`, not yet closed.
    pub fn initial_knowledge(&self, a: Actor) -> &Knowledge {
        &self.initial[a.index()]
    }

    /// Least fixpoint of the ground rules above `k`.
    pub fn closure(&self, k: &Knowledge) -> Knowledge {
        let mut out = k.clone();
        let mut missing: Vec<usize> = self
            .rules
            .iter()
            .map(|r| r.premises.iter().filter(|&&p| !out.contains(p)).count())
            .collect();
        let mut queue: Vec<usize> = (0..self.rules.len()).filter(|&r| missing[r] == 0).collect();
        while let Some(r) = queue.pop() {
            let c = self.rules[r].conclusion;
            if out.insert(c) {
                for &dep in &self.by_premise[c] {
                    // a rule listing the same premise twice is counted once per slot
                    let n = self.rules[dep].premises.iter().filter(|&&p| p == c).count();
                    missing[dep] -= n;
                    if missing[dep] == 0 {
                        queue.push(dep);
                    }
                }
            }
        }
        out
    }

    /// Objects an actor must hold to produce `perm`'s witnesses: the
    /// template, one signature per signature constraint and one preimage per
    /// hash constraint. `None` when some witness can never be produced.
    pub fn requirements(&self, perm: &WitnessPermutation) -> Option<Vec<ObjId>> {
        if !perm.is_producible() {
            return None;
        }
        let mut req = BTreeSet::new();
        req.insert(self.id(&KnowledgeObject::Template(perm.tx.clone()))?);
        for o in self.witness_objects(perm) {
            req.insert(self.id(&o)?);
        }
        Some(req.into_iter().collect())
    }

    /// Objects published by the witness of `perm`.
    pub fn reveal_set(&self, perm: &WitnessPermutation) -> Vec<ObjId> {
        let set: BTreeSet<ObjId> = self
            .witness_objects(perm)
            .iter()
            .filter_map(|o| self.id(o))
            .collect();
        set.into_iter().collect()
    }

    fn witness_objects(&self, perm: &WitnessPermutation) -> Vec<KnowledgeObject> {
        let mut v = Vec::new();
        for w in perm.witnesses() {
            v.extend(w.sig_keys().map(|k| KnowledgeObject::Signature {
                key: k.clone(),
                tx: perm.tx.clone(),
            }));
            v.extend(w.preimages().map(|d| KnowledgeObject::Preimage(d.clone())));
        }
        v
    }

    /// Readable form using template names.
    pub fn describe(&self, id: ObjId) -> String {
        let name = |tx: &TxId| {
            self.template(tx)
                .map(|t| t.name.clone())
                .unwrap_or_else(|| tx.0.clone())
        };
        match &self.objects[id] {
            KnowledgeObject::PrivKey(k) => format!("priv({k})"),
            KnowledgeObject::PubKey(k) => format!("pub({k})"),
            KnowledgeObject::Preimage(d) => format!("preimage({d})"),
            KnowledgeObject::Digest(d) => format!("digest({d})"),
            KnowledgeObject::Template(t) => format!("tx({})", name(t)),
            KnowledgeObject::Signature { key, tx } => format!("sig({key},{})", name(tx)),
            KnowledgeObject::PreSignature {
                signer,
                tx,
                adaptor,
            } => format!("psig({signer},{},{adaptor})", name(tx)),
            KnowledgeObject::AdaptorPriv(y) => format!("adaptor_priv({y})"),
            KnowledgeObject::AdaptorPub(y) => format!("adaptor_pub({y})"),
        }
    }
}

/// The permutations of `tx` an actor with knowledge `k` can witness.
pub fn can_deduce_tx(
    u: &Universe,
    k: &Knowledge,
    perms: &[WitnessPermutation],
) -> Vec<WitnessPermutation> {
    perms
        .iter()
        .filter(|p| u.requirements(p).is_some_and(|req| k.contains_all(&req)))
        .cloned()
        .collect()
}

/// Witness objects of `perm` the observer does not hold yet.
pub fn witness_reveals(
    u: &Universe,
    perm: &WitnessPermutation,
    observer: &Knowledge,
) -> Vec<ObjId> {
    u.reveal_set(perm)
        .into_iter()
        .filter(|&o| !observer.contains(o))
        .collect()
}

/// Whether all of a witness's signature keys and preimages are in `k`.
pub fn witness_secrets_known(u: &Universe, w: &SymbolicWitness, k: &Knowledge) -> bool {
    w.is_producible()
        && w.sig_keys().all(|key| {
            u.id(&KnowledgeObject::PrivKey(key.clone()))
                .is_some_and(|i| k.contains(i))
        })
        && w.preimages().all(|d| {
            u.id(&KnowledgeObject::Preimage(d.clone()))
                .is_some_and(|i| k.contains(i))
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::miniscript::parse_miniscript;
    use crate::txmodel::permutations;

    fn key(s: &str) -> KeyId {
        KeyId::new(s)
    }

    fn party(name: &str, k: &str, pre: &[&str], adaptor: &[&str]) -> Party {
        Party {
            name: name.into(),
            keys: vec![key(k)],
            preimages: pre.iter().map(|d| Digest::parse(d).unwrap()).collect(),
            adaptor_keys: adaptor.iter().map(|y| key(y)).collect(),
            sweep_key: key(&k.replace("pk_", "sk_")),
        }
    }

    fn out(value: u64, s: &str) -> TxOutput {
        TxOutput {
            value,
            script: parse_miniscript(s).unwrap(),
        }
    }

    fn fund_ref(name: &str) -> OutputRef {
        OutputRef::new(TxId(name.into()), 0)
    }

    /// Hash-lock swap: int = A (holds the preimage), ext = B.
    fn hashlock_ctx() -> Context {
        let mut funding = BTreeMap::new();
        funding.insert(fund_ref("utxo_A"), out(100, "pk(pk_A)"));
        funding.insert(fund_ref("utxo_B"), out(100, "pk(pk_B)"));
        let fund_a = TxTemplate::new(
            "fund_A",
            vec![TxInput::new(fund_ref("utxo_A"))],
            vec![out(
                100,
                "andor(pk(pk_B),sha256(b32),and_v(v(pk(pk_A)),older(15)))",
            )],
            0,
        )
        .unwrap();
        let fund_b = TxTemplate::new(
            "fund_B",
            vec![TxInput::new(fund_ref("utxo_B"))],
            vec![out(
                100,
                "andor(pk(pk_A),sha256(b32),and_v(v(pk(pk_B)),older(10)))",
            )],
            0,
        )
        .unwrap();
        Context {
            parties: [
                party("A", "pk_A", &["b32"], &[]),
                party("B", "pk_B", &[], &[]),
            ],
            templates: vec![
                DeclaredTemplate {
                    template: fund_a,
                    known_by: vec![Actor::Int, Actor::Ext],
                },
                DeclaredTemplate {
                    template: fund_b,
                    known_by: vec![Actor::Int, Actor::Ext],
                },
            ],
            funding,
            presignatures: vec![],
            sweep_names: [
                ("fund_A:0/0", "swap_B"),
                ("fund_A:0/1", "abort_A"),
                ("fund_B:0/0", "swap_A"),
                ("fund_B:0/1", "abort_B"),
                ("utxo_A:0/0", "sweep_A"),
                ("utxo_B:0/0", "sweep_B"),
            ]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect(),
        }
    }

    fn names(u: &Universe, k: &Knowledge, kind: &str) -> BTreeSet<String> {
        k.iter()
            .filter(|&o| u.object(o).kind() == kind)
            .map(|o| u.describe(o))
            .collect()
    }

    #[test]
    fn initial_expansion() {
        let u = Universe::new(&hashlock_ctx(), &RuleSet::standard()).unwrap();
        let k0 = u.initial_knowledge(Actor::Int);
        let k = u.closure(k0);
        let templates = names(&u, &k, "template");
        let expected: BTreeSet<String> = [
            "fund_A", "fund_B", "swap_A", "swap_B", "abort_A", "abort_B", "sweep_A", "sweep_B",
        ]
        .iter()
        .map(|n| format!("tx({n})"))
        .collect();
        assert_eq!(templates, expected);
        let sigs = names(&u, &k, "signature");
        let expected: BTreeSet<String> = ["fund_A", "swap_A", "abort_A", "sweep_A"]
            .iter()
            .map(|n| format!("sig(pk_A,{n})"))
            .collect();
        assert_eq!(sigs, expected);
        assert_eq!(
            u.templates().iter().filter(|t| u.is_derived(&t.id)).count(),
            6
        );
    }

    #[test]
    fn empty_closure() {
        let u = Universe::new(&hashlock_ctx(), &RuleSet::standard()).unwrap();
        assert!(u.closure(&Knowledge::new()).is_empty());
    }

    #[test]
    fn closure_is_idempotent_and_monotone() {
        let u = Universe::new(&hashlock_ctx(), &RuleSet::standard()).unwrap();
        for a in Actor::BOTH {
            let k = u.closure(u.initial_knowledge(a));
            assert_eq!(u.closure(&k), k);
        }
        // every subset of the int setup closes into a subset of the full closure
        let full = u.closure(u.initial_knowledge(Actor::Int));
        let objs: Vec<ObjId> = u.initial_knowledge(Actor::Int).iter().collect();
        for mask in 0u32..(1 << objs.len().min(12)) {
            let sub: Knowledge = objs
                .iter()
                .enumerate()
                .filter(|(i, _)| mask & (1 << i) != 0)
                .map(|(_, &o)| o)
                .collect();
            assert!(u.closure(&sub).is_subset(&full));
        }
        assert!(full.len() <= u.len());
    }

    #[test]
    fn preimage_stays_secret() {
        let u = Universe::new(&hashlock_ctx(), &RuleSet::standard()).unwrap();
        let k_ext = u.closure(u.initial_knowledge(Actor::Ext));
        let pre = u
            .id(&KnowledgeObject::Preimage(Digest::parse("b32").unwrap()))
            .unwrap();
        assert!(!k_ext.contains(pre));
    }

    fn perms_of(u: &Universe, name: &str) -> Vec<WitnessPermutation> {
        permutations(u.template_by_name(name).unwrap(), u.outputs()).unwrap()
    }

    #[test]
    fn deduction_and_reveals() {
        let u = Universe::new(&hashlock_ctx(), &RuleSet::standard()).unwrap();
        let k_int = u.closure(u.initial_knowledge(Actor::Int));
        let k_ext = u.closure(u.initial_knowledge(Actor::Ext));
        let swap_a = perms_of(&u, "swap_A");
        assert_eq!(can_deduce_tx(&u, &k_int, &swap_a).len(), 1);
        assert!(can_deduce_tx(&u, &k_ext, &swap_a).is_empty());
        assert!(can_deduce_tx(&u, &Knowledge::new(), &swap_a).is_empty());

        let revealed: BTreeSet<String> = witness_reveals(&u, &swap_a[0], &k_ext)
            .into_iter()
            .map(|o| u.describe(o))
            .collect();
        let expected: BTreeSet<String> = ["preimage(b32)", "sig(pk_A,swap_A)"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        assert_eq!(revealed, expected);
        assert!(witness_reveals(&u, &swap_a[0], &k_int).is_empty());
    }

    /// Adaptor swap: both swap paths need both parties' signatures; the
    /// coupling is a pair of pre-signatures under int's adaptor key `y`.
    fn adaptor_ctx() -> Context {
        let mut funding = BTreeMap::new();
        funding.insert(fund_ref("utxo_A"), out(100, "pk(pk_A)"));
        funding.insert(fund_ref("utxo_B"), out(100, "pk(pk_B)"));
        let fund_a = TxTemplate::new(
            "fund_A",
            vec![TxInput::new(fund_ref("utxo_A"))],
            vec![out(
                100,
                "andor(pk(pk_B),pk(pk_A),and_v(v(pk(pk_A)),older(15)))",
            )],
            0,
        )
        .unwrap();
        let fund_b = TxTemplate::new(
            "fund_B",
            vec![TxInput::new(fund_ref("utxo_B"))],
            vec![out(
                100,
                "andor(pk(pk_A),pk(pk_B),and_v(v(pk(pk_B)),older(10)))",
            )],
            0,
        )
        .unwrap();
        let swap = |name: &str, from: &TxTemplate, to: &str| {
            let mut i = TxInput::new(from.outref(0));
            i.path = Some(0);
            TxTemplate::new(name, vec![i], vec![out(100, &format!("pk({to})"))], 0).unwrap()
        };
        let swap_a = swap("swap_A", &fund_b, "pk_A");
        let swap_b = swap("swap_B", &fund_a, "pk_B");
        let both = vec![Actor::Int, Actor::Ext];
        Context {
            parties: [
                party("A", "pk_A", &[], &["y"]),
                party("B", "pk_B", &[], &[]),
            ],
            presignatures: vec![
                DeclaredPreSig {
                    signer: key("pk_B"),
                    tx: swap_a.id.clone(),
                    adaptor: key("y"),
                    known_by: both.clone(),
                },
                DeclaredPreSig {
                    signer: key("pk_A"),
                    tx: swap_b.id.clone(),
                    adaptor: key("y"),
                    known_by: both.clone(),
                },
            ],
            templates: [fund_a, fund_b, swap_a, swap_b]
                .into_iter()
                .map(|template| DeclaredTemplate {
                    template,
                    known_by: both.clone(),
                })
                .collect(),
            funding,
            sweep_names: BTreeMap::new(),
        }
    }

    #[test]
    fn adaptor_chain() {
        let u = Universe::new(&adaptor_ctx(), &RuleSet::with_adaptor()).unwrap();
        let k_int = u.closure(u.initial_knowledge(Actor::Int));
        let k_ext = u.closure(u.initial_knowledge(Actor::Ext));
        let obj = |o: KnowledgeObject| u.id(&o).unwrap();
        let swap_a = u.template_by_name("swap_A").unwrap().id.clone();
        let swap_b = u.template_by_name("swap_B").unwrap().id.clone();
        let y = obj(KnowledgeObject::AdaptorPriv(key("y")));
        let sig_b_swap_a = obj(KnowledgeObject::Signature {
            key: key("pk_B"),
            tx: swap_a.clone(),
        });
        let sig_a_swap_b = obj(KnowledgeObject::Signature {
            key: key("pk_A"),
            tx: swap_b.clone(),
        });
        // int adapts ext's pre-signature; ext learns nothing early
        assert!(k_int.contains(sig_b_swap_a));
        assert!(!k_ext.contains(y));
        assert!(!k_ext.contains(sig_b_swap_a));
        assert!(!k_ext.contains(sig_a_swap_b));
        assert_eq!(can_deduce_tx(&u, &k_int, &perms_of(&u, "swap_A")).len(), 1);
        assert!(can_deduce_tx(&u, &k_ext, &perms_of(&u, "swap_B")).is_empty());

        // int's swap broadcast reveals the adapted signature; Ext then Adapt
        let reveals = witness_reveals(&u, &perms_of(&u, "swap_A")[0], &k_ext);
        assert!(reveals.contains(&sig_b_swap_a));
        let mut k = k_ext.clone();
        for r in reveals {
            k.insert(r);
        }
        let k = u.closure(&k);
        assert!(k.contains(y));
        assert!(k.contains(sig_a_swap_b));
        assert_eq!(can_deduce_tx(&u, &k, &perms_of(&u, "swap_B")).len(), 1);
    }

    #[test]
    fn adapt_from_presig_and_secret() {
        let u = Universe::new(&adaptor_ctx(), &RuleSet::with_adaptor()).unwrap();
        let swap_b = u.template_by_name("swap_B").unwrap().id.clone();
        let psig = u
            .id(&KnowledgeObject::PreSignature {
                signer: key("pk_A"),
                tx: swap_b.clone(),
                adaptor: key("y"),
            })
            .unwrap();
        let y = u.id(&KnowledgeObject::AdaptorPriv(key("y"))).unwrap();
        let k = u.closure(&[psig, y].into_iter().collect());
        let sig = u
            .id(&KnowledgeObject::Signature {
                key: key("pk_A"),
                tx: swap_b,
            })
            .unwrap();
        assert!(k.contains(sig));
        assert_eq!(k.len(), 3);
    }

    #[test]
    fn custom_rules_are_validated() {
        let mut rules = RuleSet::standard();
        rules.register(CustomRule {
            name: "leak".into(),
            premises: vec![KnowledgeObject::PubKey(key("nobody"))],
            conclusion: KnowledgeObject::PrivKey(key("pk_A")),
        });
        assert!(matches!(
            Universe::new(&hashlock_ctx(), &rules),
            Err(KnowledgeError::UnknownObject { .. })
        ));
        let mut rules = RuleSet::standard();
        rules.register(CustomRule {
            name: "leak".into(),
            premises: vec![KnowledgeObject::PubKey(key("pk_A"))],
            conclusion: KnowledgeObject::PrivKey(key("pk_A")),
        });
        let u = Universe::new(&hashlock_ctx(), &rules).unwrap();
        let k_ext = u.closure(u.initial_knowledge(Actor::Ext));
        assert!(k_ext.contains(u.id(&KnowledgeObject::PrivKey(key("pk_A"))).unwrap()));
    }
}
