//! Contract description files (JSON, schema version 1) and model building.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::knowledge::{
    Actor, Context, DeclaredPreSig, DeclaredTemplate, KnowledgeError, Party, RuleSet, Universe,
};
use crate::miniscript::{lift_script, parse_asm, parse_miniscript, Digest, KeyId, Miniscript};
use crate::properties::{Policy, PolicyError};
use crate::semantics::{Model, Params};
use crate::tracenet::{NetError, TraceNet};
use crate::txmodel::{check_conservation, OutputRef, TxId, TxInput, TxOutput, TxTemplate};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContractFile {
    pub version: u32,
    pub name: String,
    /// Name of the party whose perspective is verified; it becomes `int`.
    pub verifier: String,
    pub parties: [PartyDecl; 2],
    pub funding: Vec<FundingDecl>,
    pub templates: Vec<TemplateDecl>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub presignatures: Vec<PreSigDecl>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub sweep_names: BTreeMap<String, String>,
    pub initial_height: u64,
    #[serde(default)]
    pub parameters: ParamsDecl,
    pub policy: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartyDecl {
    pub name: String,
    pub keys: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub preimages: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub adaptor_keys: Vec<String>,
    pub sweep_key: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FundingDecl {
    pub txid: String,
    pub index: u32,
    pub value: u64,
    pub script: String,
    /// Absent when the output is not on chain yet.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confirmed_height: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputDecl {
    /// `<template name or funding txid>:<index>`.
    pub prevout: String,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub older: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputDecl {
    pub value: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub script: Option<String>,
    /// Alternative to `script`: opcodes, lifted back to Miniscript.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub script_asm: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplateDecl {
    pub name: String,
    pub ins: Vec<InputDecl>,
    pub outs: Vec<OutputDecl>,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub after: u32,
    pub known_by: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreSigDecl {
    pub signer: String,
    /// Template name.
    pub tx: String,
    pub adaptor: String,
    pub known_by: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsDecl {
    #[serde(default)]
    pub conf_delay_int: u64,
    #[serde(default)]
    pub conf_delay_ext: u64,
    #[serde(default)]
    pub reorg_depth: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget: Option<usize>,
}

fn is_zero(v: &u32) -> bool {
    *v == 0
}

#[derive(Debug, Error)]
pub enum ContractError {
    #[error("cannot read {path}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("line {line}, column {column}: {msg}")]
    Json {
        line: usize,
        column: usize,
        msg: String,
    },
    #[error("unsupported schema version {0}")]
    Version(u32),
    #[error("{0}")]
    Invalid(String),
    #[error("{context}: {msg}")]
    Script { context: String, msg: String },
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Knowledge(#[from] KnowledgeError),
    #[error(transparent)]
    Net(#[from] NetError),
}

impl From<serde_json::Error> for ContractError {
    fn from(e: serde_json::Error) -> Self {
        ContractError::Json {
            line: e.line(),
            column: e.column(),
            msg: e.to_string(),
        }
    }
}

fn invalid(msg: impl Into<String>) -> ContractError {
    ContractError::Invalid(msg.into())
}

/// A loaded contract: the file, the built model and the policy.
#[derive(Debug, Clone)]
pub struct Contract {
    pub file: ContractFile,
    pub context: Context,
    pub model: Model,
    pub policy: Policy,
    pub budget: Option<usize>,
}

impl ContractFile {
    pub fn from_json(text: &str) -> Result<Self, ContractError> {
        let f: ContractFile = serde_json::from_str(text)?;
        if f.version != SCHEMA_VERSION {
            return Err(ContractError::Version(f.version));
        }
        Ok(f)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("contract serializes");
        s.push('\n');
        s
    }

    /// Maps a party name, or `int` / `ext`, to an actor.
    pub fn actor(&self, name: &str) -> Option<Actor> {
        match name {
            "int" => Some(Actor::Int),
            "ext" => Some(Actor::Ext),
            _ if name == self.verifier => Some(Actor::Int),
            _ if self.parties.iter().any(|p| p.name == name) => Some(Actor::Ext),
            _ => None,
        }
    }
}

fn parse_script(context: &str, text: &str) -> Result<Miniscript, ContractError> {
    parse_miniscript(text).map_err(|e| ContractError::Script {
        context: context.to_string(),
        msg: e.to_string(),
    })
}

fn output_script(context: &str, o: &OutputDecl) -> Result<Miniscript, ContractError> {
    match (&o.script, &o.script_asm) {
        (Some(s), None) => parse_script(context, s),
        (None, Some(asm)) => {
            let err = |msg: String| ContractError::Script {
                context: context.to_string(),
                msg,
            };
            let ops = parse_asm(asm).map_err(|e| err(e.to_string()))?;
            lift_script(&ops).map_err(|e| err(e.to_string()))
        }
        _ => Err(invalid(format!(
            "{context}: exactly one of script, script_asm is required"
        ))),
    }
}

fn key_list(keys: &[String]) -> Vec<KeyId> {
    keys.iter().map(KeyId::new).collect()
}

impl Contract {
    pub fn load(path: impl AsRef<Path>) -> Result<Contract, ContractError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ContractError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Contract::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Contract, ContractError> {
        Contract::build(ContractFile::from_json(text)?)
    }

    /// Validates the file and builds universe, net and parameters.
    pub fn build(file: ContractFile) -> Result<Contract, ContractError> {
        let f = &file;
        let verifier = f
            .parties
            .iter()
            .position(|p| p.name == f.verifier)
            .ok_or_else(|| invalid(format!("verifier `{}` is not a party", f.verifier)))?;
        if f.parties[0].name == f.parties[1].name {
            return Err(invalid("party names must differ"));
        }
        let ordered = [&f.parties[verifier], &f.parties[1 - verifier]];

        let mut owner: BTreeMap<&str, &str> = BTreeMap::new();
        for p in &f.parties {
            let secrets = p
                .keys
                .iter()
                .chain(&p.preimages)
                .chain(&p.adaptor_keys)
                .chain([&p.sweep_key]);
            for s in secrets {
                if let Some(prev) = owner.insert(s, &p.name) {
                    return Err(invalid(format!(
                        "secret `{s}` declared by both `{prev}` and `{}`",
                        p.name
                    )));
                }
            }
        }
        let mut parties = Vec::new();
        for p in ordered {
            let preimages = p
                .preimages
                .iter()
                .map(|d| {
                    Digest::parse(d)
                        .map_err(|e| invalid(format!("preimage `{d}` of {}: {e}", p.name)))
                })
                .collect::<Result<Vec<_>, _>>()?;
            parties.push(Party {
                name: p.name.clone(),
                keys: key_list(&p.keys),
                preimages,
                adaptor_keys: key_list(&p.adaptor_keys),
                sweep_key: KeyId::new(&p.sweep_key),
            });
        }
        let parties: [Party; 2] = parties.try_into().expect("two parties");

        let actors = |who: &[String], ctx: &str| -> Result<Vec<Actor>, ContractError> {
            let mut out = Vec::new();
            for w in who {
                let a = f
                    .actor(w)
                    .ok_or_else(|| invalid(format!("{ctx}: unknown party `{w}`")))?;
                if !out.contains(&a) {
                    out.push(a);
                }
            }
            out.sort();
            Ok(out)
        };

        let mut funding = BTreeMap::new();
        let mut confirmed = BTreeMap::new();
        let mut funding_ids = BTreeSet::new();
        for fd in &f.funding {
            let r = OutputRef::new(TxId(fd.txid.clone()), fd.index);
            let script = parse_script(&format!("funding {r}"), &fd.script)?;
            if funding
                .insert(
                    r.clone(),
                    TxOutput {
                        value: fd.value,
                        script,
                    },
                )
                .is_some()
            {
                return Err(invalid(format!("funding output {r} declared twice")));
            }
            funding_ids.insert(fd.txid.clone());
            if let Some(h) = fd.confirmed_height {
                confirmed.insert(r, h);
            }
        }

        // templates are resolved in dependency order
        let mut names: BTreeMap<&str, usize> = BTreeMap::new();
        for (i, t) in f.templates.iter().enumerate() {
            if names.insert(&t.name, i).is_some() {
                return Err(invalid(format!("template `{}` declared twice", t.name)));
            }
            if funding_ids.contains(&t.name) {
                return Err(invalid(format!(
                    "`{}` names both a template and a funding tx",
                    t.name
                )));
            }
        }
        let mut built: Vec<Option<TxTemplate>> = vec![None; f.templates.len()];
        let mut outputs = funding.clone();
        let mut progress = true;
        while progress {
            progress = false;
            for (i, t) in f.templates.iter().enumerate() {
                if built[i].is_some() {
                    continue;
                }
                let mut ins = Vec::new();
                let mut ready = true;
                for inp in &t.ins {
                    let (txname, idx) = inp
                        .prevout
                        .rsplit_once(':')
                        .and_then(|(n, i)| Some((n, i.parse::<u32>().ok()?)))
                        .ok_or_else(|| {
                            invalid(format!("{}: malformed prevout `{}`", t.name, inp.prevout))
                        })?;
                    let txid = match names.get(txname) {
                        Some(&j) => match &built[j] {
                            Some(p) => p.id.clone(),
                            None => {
                                ready = false;
                                break;
                            }
                        },
                        None if funding_ids.contains(txname) => TxId(txname.to_string()),
                        None => {
                            return Err(invalid(format!(
                                "{}: prevout `{}` names no template or funding tx",
                                t.name, inp.prevout
                            )))
                        }
                    };
                    ins.push(TxInput {
                        prevout: OutputRef::new(txid, idx),
                        older: inp.older,
                        path: inp.path,
                    });
                }
                if !ready {
                    continue;
                }
                let outs = t
                    .outs
                    .iter()
                    .enumerate()
                    .map(|(k, o)| {
                        Ok(TxOutput {
                            value: o.value,
                            script: output_script(&format!("{} output {k}", t.name), o)?,
                        })
                    })
                    .collect::<Result<Vec<_>, ContractError>>()?;
                let tx = TxTemplate::new(t.name.clone(), ins, outs, t.after)
                    .map_err(KnowledgeError::from)?;
                check_conservation(&tx, &outputs).map_err(KnowledgeError::from)?;
                for (r, o) in tx.out_refs() {
                    outputs.insert(r, o.clone());
                }
                built[i] = Some(tx);
                progress = true;
            }
        }
        if let Some(i) = built.iter().position(|b| b.is_none()) {
            return Err(invalid(format!(
                "template `{}` depends on itself",
                f.templates[i].name
            )));
        }
        let mut templates = Vec::new();
        for (t, b) in f.templates.iter().zip(built) {
            templates.push(DeclaredTemplate {
                template: b.expect("all built"),
                known_by: actors(&t.known_by, &t.name)?,
            });
        }

        let mut presignatures = Vec::new();
        for p in &f.presignatures {
            let tx = templates
                .iter()
                .find(|d| d.template.name == p.tx)
                .ok_or_else(|| invalid(format!("pre-signature on unknown template `{}`", p.tx)))?;
            presignatures.push(DeclaredPreSig {
                signer: KeyId::new(&p.signer),
                tx: tx.template.id.clone(),
                adaptor: KeyId::new(&p.adaptor),
                known_by: actors(&p.known_by, "pre-signature")?,
            });
        }

        let context = Context {
            parties,
            templates,
            funding,
            presignatures,
            sweep_names: f.sweep_names.clone(),
        };
        let rules = if context.presignatures.is_empty() {
            RuleSet::standard()
        } else {
            RuleSet::with_adaptor()
        };
        let universe = Universe::new(&context, &rules)?;
        let net = TraceNet::build(&universe, &confirmed, f.initial_height)?;
        let params = Params {
            conf_delay: [f.parameters.conf_delay_int, f.parameters.conf_delay_ext],
            reorg_depth: f.parameters.reorg_depth,
            ..Params::default()
        };
        let policy = Policy::parse(&f.policy, |n| f.actor(n))?;
        Ok(Contract {
            budget: f.parameters.budget,
            model: Model::new(universe, net, params),
            policy,
            context,
            file,
        })
    }
}
