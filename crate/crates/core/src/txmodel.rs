//! Transaction templates, output references, witness permutations and the
//! ownership/control classification of spending paths.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::miniscript::{
    compile_to_script, render_script, sat, type_check, Digest, KeyId, Miniscript, MsType,
    SymbolicWitness,
};

/// Template identifier: the hex SHA-256 of the template's canonical encoding,
/// or a declared name for outputs that exist before the contract.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TxId(pub String);

impl fmt::Display for TxId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct OutputRef {
    pub txid: TxId,
    pub index: u32,
}

impl OutputRef {
    pub fn new(txid: TxId, index: u32) -> Self {
        OutputRef { txid, index }
    }
}

impl fmt::Display for OutputRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.txid, self.index)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TxOutput {
    pub value: u64,
    pub script: Miniscript,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TxInput {
    pub prevout: OutputRef,
    /// Relative lock in blocks; 0 means unset.
    pub older: u32,
    /// When set, the input is committed to this index of the prevout's
    /// satisfying witnesses.
    pub path: Option<usize>,
}

impl TxInput {
    pub fn new(prevout: OutputRef) -> Self {
        TxInput {
            prevout,
            older: 0,
            path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TxTemplate {
    pub id: TxId,
    pub name: String,
    pub ins: Vec<TxInput>,
    pub outs: Vec<TxOutput>,
    /// Absolute lock height; 0 means unset.
    pub after: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TxError {
    #[error("template `{0}` has no inputs")]
    NoInputs(String),
    #[error("template `{0}` has no outputs")]
    NoOutputs(String),
    #[error("template `{tx}` spends {prevout} twice")]
    DuplicatePrevout { tx: String, prevout: OutputRef },
    #[error("output {index} of `{tx}` is not a B expression")]
    OutputType { tx: String, index: usize },
    #[error("dangling prevout {0}")]
    Dangling(OutputRef),
    #[error("no confirmation height for {0}")]
    MissingConfirmation(OutputRef),
    #[error("template `{tx}` moves {ins} in but {outs} out")]
    Conservation { tx: String, ins: u64, outs: u64 },
    #[error("input {input} of `{tx}` commits to path {path} but only {available} exist")]
    BadPath {
        tx: String,
        input: usize,
        path: usize,
        available: usize,
    },
}

impl TxTemplate {
    /// Validates the structural invariants and assigns the content id.
    pub fn new(
        name: impl Into<String>,
        ins: Vec<TxInput>,
        outs: Vec<TxOutput>,
        after: u32,
    ) -> Result<Self, TxError> {
        let name = name.into();
        if ins.is_empty() {
            return Err(TxError::NoInputs(name));
        }
        if outs.is_empty() {
            return Err(TxError::NoOutputs(name));
        }
        let mut seen = BTreeSet::new();
        for i in &ins {
            if !seen.insert(&i.prevout) {
                return Err(TxError::DuplicatePrevout {
                    tx: name,
                    prevout: i.prevout.clone(),
                });
            }
        }
        for (index, o) in outs.iter().enumerate() {
            if type_check(&o.script) != Ok(MsType::B) {
                return Err(TxError::OutputType { tx: name, index });
            }
        }
        let id = template_id(&ins, &outs, after);
        Ok(TxTemplate {
            id,
            name,
            ins,
            outs,
            after,
        })
    }

    pub fn outref(&self, index: u32) -> OutputRef {
        OutputRef::new(self.id.clone(), index)
    }

    pub fn out_refs(&self) -> impl Iterator<Item = (OutputRef, &TxOutput)> {
        self.outs
            .iter()
            .enumerate()
            .map(|(i, o)| (self.outref(i as u32), o))
    }
}

/// Length-prefixed field encoding hashed with SHA-256. The name is not part
/// of the content.
fn template_id(ins: &[TxInput], outs: &[TxOutput], after: u32) -> TxId {
    let mut h = Sha256::new();
    let mut field = |bytes: &[u8]| {
        h.update((bytes.len() as u32).to_le_bytes());
        h.update(bytes);
    };
    field(b"ins");
    field(&(ins.len() as u32).to_le_bytes());
    for i in ins {
        field(i.prevout.txid.0.as_bytes());
        field(&i.prevout.index.to_le_bytes());
        field(&i.older.to_le_bytes());
        match i.path {
            Some(p) => field(&(p as u64 + 1).to_le_bytes()),
            None => field(&0u64.to_le_bytes()),
        }
    }
    field(b"outs");
    field(&(outs.len() as u32).to_le_bytes());
    for o in outs {
        field(&o.value.to_le_bytes());
        field(render_script(&compile_to_script(&o.script)).as_bytes());
    }
    field(b"after");
    field(&after.to_le_bytes());
    TxId(hex::encode(h.finalize()))
}

/// Looks up the output an input spends.
pub trait Resolver {
    fn resolve(&self, r: &OutputRef) -> Option<&TxOutput>;
}

impl Resolver for BTreeMap<OutputRef, TxOutput> {
    fn resolve(&self, r: &OutputRef) -> Option<&TxOutput> {
        self.get(r)
    }
}

/// Satisfying witnesses of an output's script.
pub fn output_sat(out: &TxOutput) -> Vec<SymbolicWitness> {
    sat(&out.script).expect("output scripts are type-checked B expressions")
}

/// One chosen witness per input, with the index of that witness within the
/// spent output's satisfying set.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct WitnessPermutation {
    pub tx: TxId,
    pub choice: Vec<(usize, SymbolicWitness)>,
}

impl WitnessPermutation {
    pub fn is_producible(&self) -> bool {
        self.choice.iter().all(|(_, w)| w.is_producible())
    }

    pub fn witnesses(&self) -> impl Iterator<Item = &SymbolicWitness> {
        self.choice.iter().map(|(_, w)| w)
    }
}

/// Cartesian product of the inputs' witness sets in input-major order.
/// Inputs committed to a path contribute only that witness.
pub fn permutations(
    tx: &TxTemplate,
    resolver: &impl Resolver,
) -> Result<Vec<WitnessPermutation>, TxError> {
    let mut per_input = Vec::with_capacity(tx.ins.len());
    for (n, input) in tx.ins.iter().enumerate() {
        let out = resolver
            .resolve(&input.prevout)
            .ok_or_else(|| TxError::Dangling(input.prevout.clone()))?;
        let all: Vec<(usize, SymbolicWitness)> = output_sat(out).into_iter().enumerate().collect();
        let ws = match input.path {
            None => all,
            Some(p) => {
                let available = all.len();
                let chosen: Vec<_> = all.into_iter().filter(|(i, _)| *i == p).collect();
                if chosen.is_empty() {
                    return Err(TxError::BadPath {
                        tx: tx.name.clone(),
                        input: n,
                        path: p,
                        available,
                    });
                }
                chosen
            }
        };
        per_input.push(ws);
    }
    let mut acc: Vec<Vec<(usize, SymbolicWitness)>> = vec![Vec::new()];
    for ws in per_input {
        acc = acc
            .into_iter()
            .flat_map(|prefix| {
                ws.iter().map(move |w| {
                    let mut p = prefix.clone();
                    p.push(w.clone());
                    p
                })
            })
            .collect();
    }
    Ok(acc
        .into_iter()
        .map(|choice| WitnessPermutation {
            tx: tx.id.clone(),
            choice,
        })
        .collect())
}

/// Secrets an actor holds: private keys (named by their public key) and
/// hash preimages (named by their digest).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Secrets {
    pub keys: BTreeSet<KeyId>,
    pub preimages: BTreeSet<Digest>,
}

/// The actor can produce every witness element the path demands. Time
/// locks are ignored since waiting satisfies them; unmet-lock and
/// hash-mismatch witnesses are never owned.
pub fn path_owned(w: &SymbolicWitness, secrets: &Secrets) -> bool {
    w.is_producible()
        && w.sig_keys().all(|k| secrets.keys.contains(k))
        && w.preimages().all(|d| secrets.preimages.contains(d))
}

/// The actor alone holds the keys for every signature on the path.
pub fn path_controlled(w: &SymbolicWitness, mine: &Secrets, other: &Secrets) -> bool {
    let mut keys = w.sig_keys().peekable();
    keys.peek().is_some()
        && w.is_producible()
        && keys.all(|k| mine.keys.contains(k) && !other.keys.contains(k))
}

/// Height from which `tx` may be included: every `after` and `older` lock
/// has released.
pub fn earliest_broadcast(
    tx: &TxTemplate,
    confirmed_at: impl Fn(&OutputRef) -> Option<u64>,
) -> Result<u64, TxError> {
    let mut h = tx.after as u64;
    for i in &tx.ins {
        let c = confirmed_at(&i.prevout)
            .ok_or_else(|| TxError::MissingConfirmation(i.prevout.clone()))?;
        h = h.max(c + i.older as u64);
    }
    Ok(h)
}

/// Fees are zero, so a template must move exactly the value it spends.
pub fn check_conservation(tx: &TxTemplate, resolver: &impl Resolver) -> Result<(), TxError> {
    let mut ins = 0u64;
    for i in &tx.ins {
        ins += resolver
            .resolve(&i.prevout)
            .ok_or_else(|| TxError::Dangling(i.prevout.clone()))?
            .value;
    }
    let outs: u64 = tx.outs.iter().map(|o| o.value).sum();
    if ins != outs {
        return Err(TxError::Conservation {
            tx: tx.name.clone(),
            ins,
            outs,
        });
    }
    Ok(())
}
