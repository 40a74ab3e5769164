//! Trained-network checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "EVONETCK" | version u32 | header length u64 | header (JSON)
//! | parameters f32[] | layer state f32[] | optimizer first f32[] | optimizer second f32[]
//! | training losses f64[] | control losses f64[] | SHA-256 of everything before it
//! ```
//!
//! Array lengths are stored in the header. Loss curves live in the binary
//! part because they may hold non-finite values. The network is rebuilt from the
//! genome and the plan hash must match before the buffers are loaded.

use std::fs;
use std::path::Path;

use evonet_core::engine::{Network, Optimizer, OptimizerConfig, StopReason, TrainReport};
use evonet_core::genome::Genome;
use evonet_core::netbuilder::NetworkPlan;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::DataConfig;
use crate::error::{format_err, IoContext, Result};
use crate::genome_io::{write_atomic, GrammarName};

pub const MAGIC: &[u8; 8] = b"EVONETCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub grammar: GrammarName,
    pub genome: Genome,
    pub plan_hash: String,
    pub data: DataConfig,
    pub optimizer: OptimizerConfig,
    pub updates: u64,
    pub epochs_run: usize,
    pub stop_reason: StopReason,
    pub nonfinite_seen: bool,
    pub steps: u64,
    /// Whether training used a PGD adversary.
    pub adversarial: bool,
    /// Lengths of the six trailing arrays.
    pub lengths: [usize; 6],
}

/// A trained network with its optimizer, ready to resume or evaluate.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub grammar: GrammarName,
    pub genome: Genome,
    pub plan: NetworkPlan,
    pub data: DataConfig,
    pub net: Network<f32>,
    pub optimizer: Optimizer<f32>,
    pub report: TrainReport,
    pub adversarial: bool,
}

/// Parameters then layer state, in node order.
pub fn flatten(net: &Network<f32>) -> (Vec<f32>, Vec<f32>) {
    let params = net.layers().flat_map(|l| l.params.iter().flatten().copied()).collect();
    let state = net.layers().flat_map(|l| l.state.iter().flatten().copied()).collect();
    (params, state)
}

/// Inverse of [`flatten`] for a network of the same architecture.
pub fn unflatten(net: &mut Network<f32>, params: &[f32], state: &[f32]) -> Result<()> {
    let (p0, s0) = flatten(net);
    if p0.len() != params.len() || s0.len() != state.len() {
        return Err(format_err("parameter buffer does not fit the architecture"));
    }
    let (mut p, mut s) = (params, state);
    for layer in net.layers_mut() {
        for t in &mut layer.params {
            let (head, rest) = p.split_at(t.len());
            t.copy_from_slice(head);
            p = rest;
        }
        for t in &mut layer.state {
            let (head, rest) = s.split_at(t.len());
            t.copy_from_slice(head);
            s = rest;
        }
    }
    Ok(())
}

fn unflatten_slots(shape: &[Vec<f32>], flat: &[f32]) -> Result<Vec<Vec<f32>>> {
    if flat.is_empty() {
        return Ok(Vec::new());
    }
    if shape.iter().map(Vec::len).sum::<usize>() != flat.len() {
        return Err(format_err("optimizer buffer does not fit the architecture"));
    }
    let mut rest = flat;
    Ok(shape
        .iter()
        .map(|t| {
            let (head, tail) = rest.split_at(t.len());
            rest = tail;
            head.to_vec()
        })
        .collect())
}

fn push_f32s(out: &mut Vec<u8>, v: &[f32]) {
    out.extend(v.iter().flat_map(|x| x.to_le_bytes()));
}

fn push_f64s(out: &mut Vec<u8>, v: &[f64]) {
    out.extend(v.iter().flat_map(|x| x.to_le_bytes()));
}

struct Reader<'a>(&'a [u8]);

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.0.len() < n {
            return Err(format_err("checkpoint is truncated"));
        }
        let (head, rest) = self.0.split_at(n);
        self.0 = rest;
        Ok(head)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| format_err("bad array length"))?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| format_err("bad array length"))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let (params, state) = flatten(&self.net);
        let first: Vec<f32> = self.optimizer.first.iter().flatten().copied().collect();
        let second: Vec<f32> = self.optimizer.second.iter().flatten().copied().collect();
        let header = Header {
            grammar: self.grammar,
            genome: self.genome.clone(),
            plan_hash: self.plan.hash()?,
            data: self.data.clone(),
            optimizer: self.optimizer.config.clone(),
            updates: self.optimizer.updates,
            epochs_run: self.report.epochs_run,
            stop_reason: self.report.stop_reason,
            nonfinite_seen: self.report.nonfinite_seen,
            steps: self.report.steps,
            adversarial: self.adversarial,
            lengths: [
                params.len(),
                state.len(),
                first.len(),
                second.len(),
                self.report.train_loss.len(),
                self.report.control_loss.len(),
            ],
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend(VERSION.to_le_bytes());
        out.extend((json.len() as u64).to_le_bytes());
        out.extend(json);
        for v in [&params, &state, &first, &second] {
            push_f32s(&mut out, v);
        }
        push_f64s(&mut out, &self.report.train_loss);
        push_f64s(&mut out, &self.report.control_loss);
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 12 + 32 || &bytes[..8] != MAGIC {
            return Err(format_err("not a checkpoint file"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(format_err("checkpoint checksum mismatch"));
        }
        let mut r = Reader(&body[8..]);
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != VERSION {
            return Err(format_err(format!("unsupported checkpoint version {version}")));
        }
        let len = u64::from_le_bytes(r.take(8)?.try_into().unwrap()) as usize;
        let header: Header = serde_json::from_slice(r.take(len)?)?;
        let [np, ns, nf, nsec, ntl, ncl] = header.lengths;
        let (params, state, first, second) = (r.f32s(np)?, r.f32s(ns)?, r.f32s(nf)?, r.f32s(nsec)?);
        let report = TrainReport {
            train_loss: r.f64s(ntl)?,
            control_loss: r.f64s(ncl)?,
            epochs_run: header.epochs_run,
            stop_reason: header.stop_reason,
            nonfinite_seen: header.nonfinite_seen,
            steps: header.steps,
        };
        if !r.0.is_empty() {
            return Err(format_err("trailing bytes in checkpoint"));
        }

        let grammar = header.grammar.grammar()?;
        let plan =
            NetworkPlan::from_genome(&grammar, &header.genome, header.data.input_shape(), header.data.n_classes())?;
        if plan.hash()? != header.plan_hash {
            return Err(format_err("genome does not match the stored plan hash"));
        }
        let mut net = plan.build::<f32, _>(&mut evonet_core::Rng::seed_from_u64(0))?;
        unflatten(&mut net, &params, &state)?;
        let shape: Vec<Vec<f32>> = net.params().into_iter().cloned().collect();
        let optimizer = Optimizer {
            config: header.optimizer,
            first: unflatten_slots(&shape, &first)?,
            second: unflatten_slots(&shape, &second)?,
            updates: header.updates,
        };
        Ok(Checkpoint {
            grammar: header.grammar,
            genome: header.genome,
            plan,
            data: header.data,
            net,
            optimizer,
            report,
            adversarial: header.adversarial,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).at(path)?)
    }
}
