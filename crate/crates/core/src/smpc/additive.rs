//! Apps whose aggregation is a plain sum of per-client vectors, runnable
//! either in the clear ([`PlainAdditive`]) or masked ([`SecureApp`]).
//!
//! Plain statistics payload:
//!
//! ```text
//! "STAT" | version u8 = 1 | tag [4] | round u32 | dim u32 | dim x f64
//! ```
//!
//! integers and floats big-endian. The tag names the model, e.g. `LINR`.

use std::collections::{BTreeMap, VecDeque};
use std::path::{Path, PathBuf};

use rand_chacha::ChaCha20Rng;
use rand_core::SeedableRng;
use serde::{Deserialize, Serialize};

use super::fixed::{decode_fixed, encode_fixed, FixedPointVector, DEFAULT_SCALE};
use super::keys::{keygen, KeyDirectory, KeyPair};
use super::mask::{aggregate, mask_model, sum_received_masks, EncryptedMask, MaskedShare};
use super::payload::{SmpcBody, SmpcMessage};
use super::SmpcError;
use crate::app::{App, AppError, AppResult, Local, RoundAlgorithm, SetupContext, SetupInfo, StatusReport, StepLog};
use crate::protocol::ClientId;

pub const AUDIT_FILE: &str = "smpc_audit.json";
const STAT_MAGIC: &[u8; 4] = b"STAT";

/// A federated model whose per-round aggregation is a sum of vectors.
pub trait AdditiveModel: Send {
    /// Four-byte model tag used in plain payloads.
    fn tag(&self) -> [u8; 4];

    fn load(&mut self, ctx: &SetupContext) -> AppResult<()>;

    /// Local statistics given the latest global payload, or `None` once the
    /// global payload is final. Every client must return vectors of equal
    /// length in a round.
    fn local_stats(&mut self, global: Option<&[u8]>) -> AppResult<Option<Vec<f64>>>;

    /// Coordinator only: turns the summed statistics into the next global
    /// payload.
    fn combine(&mut self, sum: Vec<f64>) -> AppResult<Vec<u8>>;

    fn write_output(&mut self, output_dir: &Path) -> AppResult<()>;
}

pub fn encode_stats(tag: [u8; 4], round: u32, values: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(17 + values.len() * 8);
    out.extend_from_slice(STAT_MAGIC);
    out.push(1);
    out.extend_from_slice(&tag);
    out.extend_from_slice(&round.to_be_bytes());
    out.extend_from_slice(&(values.len() as u32).to_be_bytes());
    for v in values {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out
}

/// Returns `(round, values)`.
pub fn decode_stats(bytes: &[u8], tag: [u8; 4]) -> AppResult<(u32, Vec<f64>)> {
    let bad = |msg: &str| AppError::failure(format!("malformed statistics payload: {msg}"));
    if bytes.len() < 17 || &bytes[..4] != STAT_MAGIC || bytes[4] != 1 {
        return Err(bad("missing header"));
    }
    if bytes[5..9] != tag {
        return Err(bad(&format!("tag {:?}, expected {:?}", String::from_utf8_lossy(&bytes[5..9]), String::from_utf8_lossy(&tag))));
    }
    let round = u32::from_be_bytes(bytes[9..13].try_into().unwrap());
    let dim = u32::from_be_bytes(bytes[13..17].try_into().unwrap()) as usize;
    let body = &bytes[17..];
    if body.len() != dim * 8 {
        return Err(bad(&format!("{dim} values declared, {} bytes present", body.len())));
    }
    Ok((round, body.chunks_exact(8).map(|c| f64::from_be_bytes(c.try_into().unwrap())).collect()))
}

/// Runs an [`AdditiveModel`] without masking.
pub struct PlainAdditive<M> {
    model: M,
    round: u32,
}

impl<M: AdditiveModel> PlainAdditive<M> {
    pub fn new(model: M) -> Self {
        Self { model, round: 0 }
    }

    pub fn model(&self) -> &M {
        &self.model
    }
}

impl<M: AdditiveModel> RoundAlgorithm for PlainAdditive<M> {
    fn load(&mut self, ctx: &SetupContext) -> AppResult<()> {
        self.model.load(ctx)
    }

    fn local(&mut self, global: Option<&[u8]>) -> AppResult<Local> {
        if global.is_some() {
            self.round += 1;
        }
        Ok(match self.model.local_stats(global)? {
            Some(stats) => Local::Send(encode_stats(self.model.tag(), self.round, &stats)),
            None => Local::Done,
        })
    }

    fn aggregate(&mut self, locals: Vec<(ClientId, Vec<u8>)>) -> AppResult<Vec<u8>> {
        let mut sum: Option<Vec<f64>> = None;
        for (client, bytes) in locals {
            let (round, values) = decode_stats(&bytes, self.model.tag())?;
            if round != self.round {
                return Err(AppError::failure(format!("{client} sent round {round} during round {}", self.round)));
            }
            match &mut sum {
                None => sum = Some(values),
                Some(acc) if acc.len() == values.len() => acc.iter_mut().zip(&values).for_each(|(a, v)| *a += v),
                Some(acc) => {
                    return Err(AppError::failure(format!("{client} sent {} values, expected {}", values.len(), acc.len())))
                }
            }
        }
        self.model.combine(sum.ok_or_else(|| AppError::failure("nothing to aggregate"))?)
    }

    fn write_output(&mut self, output_dir: &Path) -> AppResult<()> {
        self.model.write_output(output_dir)
    }
}

/// A client's own encoded statistics for one round, recorded for audits.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub round: u32,
    pub values: Vec<u64>,
}

impl AuditEntry {
    /// The exact bytes the vector would occupy if sent unmasked.
    pub fn wire_bytes(&self) -> Vec<u8> {
        self.values.iter().flat_map(|v| v.to_be_bytes()).collect()
    }
}

/// Runs an [`AdditiveModel`] under secure aggregation.
///
/// Per app step: one key round (public keys up, key directory down), then
/// per aggregation two round trips: shares with encrypted masks up, mask
/// bundles down (one per client), mask sums up, global payload down.
/// The coordinator takes part as an ordinary peer; its own messages never
/// leave its memory.
pub struct SecureApp<M> {
    model: M,
    info: Option<SetupInfo>,
    scale: u32,
    rng: ChaCha20Rng,
    keys: Option<KeyPair>,
    directory: Option<KeyDirectory>,
    round: u32,
    outgoing: VecDeque<(Option<ClientId>, Vec<u8>)>,
    internal: VecDeque<(ClientId, SmpcMessage)>,
    expect: Expect,
    key_inbox: BTreeMap<ClientId, [u8; 32]>,
    shares: BTreeMap<ClientId, (MaskedShare, Vec<EncryptedMask>)>,
    mask_sums: BTreeMap<ClientId, FixedPointVector>,
    dim: Option<u32>,
    done: bool,
    audit: Option<Vec<AuditEntry>>,
    output_dir: PathBuf,
    log: StepLog,
}

/// What a client waits for from the coordinator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Expect {
    Setup,
    Directory,
    Masks,
    Global,
    Nothing,
}

impl<M: AdditiveModel> SecureApp<M> {
    pub fn new(model: M) -> Self {
        Self {
            model,
            info: None,
            scale: DEFAULT_SCALE,
            rng: ChaCha20Rng::from_entropy(),
            keys: None,
            directory: None,
            round: 0,
            outgoing: VecDeque::new(),
            internal: VecDeque::new(),
            expect: Expect::Setup,
            key_inbox: BTreeMap::new(),
            shares: BTreeMap::new(),
            mask_sums: BTreeMap::new(),
            dim: None,
            done: false,
            audit: None,
            output_dir: PathBuf::new(),
            log: StepLog::default(),
        }
    }

    /// Replaces the entropy-seeded generator, for reproducible tests.
    pub fn with_rng(mut self, rng: ChaCha20Rng) -> Self {
        self.rng = rng;
        self
    }

    pub fn model(&self) -> &M {
        &self.model
    }

    /// Completed aggregations.
    pub fn rounds(&self) -> u32 {
        self.round
    }

    fn info(&self) -> &SetupInfo {
        self.info.as_ref().expect("setup completed")
    }

    fn me(&self) -> ClientId {
        self.info().id.clone()
    }

    fn message(&self, dim: u32, body: SmpcBody) -> SmpcMessage {
        SmpcMessage { round: self.round, dim, scale: self.scale as u8, body }
    }

    /// Sends to the coordinator, or queues internally on the coordinator.
    fn to_coordinator(&mut self, msg: SmpcMessage) {
        if self.info().master {
            let me = self.me();
            self.internal.push_back((me, msg));
        } else {
            self.outgoing.push_back((None, msg.encode()));
        }
    }

    fn pump(&mut self) -> AppResult<()> {
        while let Some((from, msg)) = self.internal.pop_front() {
            self.handle(from, msg)?;
        }
        Ok(())
    }

    fn handle(&mut self, from: ClientId, msg: SmpcMessage) -> AppResult<()> {
        let master = self.info().master;
        let from_coordinator = from == self.me() || !master;
        match (&msg.body, master) {
            (SmpcBody::PublicKey(_), true) | (SmpcBody::Share { .. }, true) | (SmpcBody::MaskSum(_), true) => {}
            (SmpcBody::KeyDirectory(_), _) | (SmpcBody::MaskBundle(_), _) | (SmpcBody::Global(_), _) if from_coordinator => {}
            _ => {
                return Err(SmpcError::Protocol(format!("unexpected phase {} from {from}", msg.body.phase())).into());
            }
        }
        if msg.round != self.round {
            return Err(SmpcError::Protocol(format!("{from} sent round {} during round {}", msg.round, self.round)).into());
        }
        if msg.scale as u32 != self.scale {
            return Err(SmpcError::Protocol(format!("{from} uses scale 2^{}, expected 2^{}", msg.scale, self.scale)).into());
        }
        match msg.body {
            SmpcBody::PublicKey(key) => self.on_key(from, key),
            SmpcBody::KeyDirectory(dir) => self.on_directory(dir),
            SmpcBody::Share { share, masks } => self.on_share(from, msg.dim, share, masks),
            SmpcBody::MaskBundle(masks) => self.on_bundle(msg.dim, masks),
            SmpcBody::MaskSum(sum) => self.on_mask_sum(from, msg.dim, sum),
            SmpcBody::Global(global) => self.on_global(global),
        }
    }

    fn check_expect(&self, want: Expect, what: &str) -> AppResult<()> {
        if self.expect != want {
            return Err(SmpcError::Protocol(format!("{what} arrived while waiting for {:?}", self.expect)).into());
        }
        Ok(())
    }

    fn on_key(&mut self, from: ClientId, key: [u8; 32]) -> AppResult<()> {
        if self.directory.is_some() || self.key_inbox.insert(from.clone(), key).is_some() {
            return Err(SmpcError::Protocol(format!("duplicate public key from {from}")).into());
        }
        if self.key_inbox.len() == self.info().n_clients() {
            let dir = KeyDirectory { keys: std::mem::take(&mut self.key_inbox) };
            if self.info().n_clients() > 1 {
                self.outgoing.push_back((None, self.message(0, SmpcBody::KeyDirectory(dir.clone())).encode()));
            }
            self.on_directory(dir)?;
        }
        Ok(())
    }

    fn on_directory(&mut self, dir: KeyDirectory) -> AppResult<()> {
        self.check_expect(Expect::Directory, "key directory")?;
        dir.complete_for(&self.info().clients)?;
        let me = self.me();
        let own = self.keys.as_ref().expect("keys generated at setup").public_bytes();
        if dir.keys.get(&me) != Some(&own) {
            return Err(SmpcError::Protocol(format!("key directory carries a foreign key for {me}")).into());
        }
        self.directory = Some(dir);
        self.contribute(None)
    }

    fn contribute(&mut self, global: Option<&[u8]>) -> AppResult<()> {
        match self.model.local_stats(global)? {
            None => {
                self.expect = Expect::Nothing;
                self.model.write_output(&self.output_dir)?;
                if let Some(entries) = &self.audit {
                    let path = self.output_dir.join(AUDIT_FILE);
                    let json = serde_json::to_vec_pretty(entries).expect("audit serializes");
                    std::fs::write(&path, json).map_err(|e| AppError::io(&path, e))?;
                }
                self.done = true;
                Ok(())
            }
            Some(stats) => {
                let encoded = encode_fixed(&stats, self.scale)?;
                if let Some(audit) = &mut self.audit {
                    audit.push(AuditEntry { round: self.round, values: encoded.values.clone() });
                }
                let me = self.me();
                let clients = self.info().clients.clone();
                let peers = self.directory.as_ref().expect("directory before contributions").peers_of(&me, &clients)?;
                let (share, masks) = mask_model(&encoded, &me, &peers, clients.len(), &mut self.rng)?;
                self.expect = Expect::Masks;
                let dim = stats.len() as u32;
                self.to_coordinator(self.message(dim, SmpcBody::Share { share, masks }));
                Ok(())
            }
        }
    }

    fn on_share(&mut self, from: ClientId, dim: u32, mut share: MaskedShare, masks: Vec<EncryptedMask>) -> AppResult<()> {
        share.owner = from.clone();
        if share.data.dim() != dim as usize {
            return Err(SmpcError::DimensionMismatch { expected: dim as usize, actual: share.data.dim() }.into());
        }
        match self.dim {
            Some(d) if d != dim => {
                return Err(SmpcError::DimensionMismatch { expected: d as usize, actual: dim as usize }.into())
            }
            _ => self.dim = Some(dim),
        }
        let clients = self.info().clients.clone();
        let mut destinations: Vec<&ClientId> = masks.iter().map(|m| &m.destination).collect();
        destinations.sort();
        let mut expected: Vec<&ClientId> = clients.iter().filter(|c| **c != from).collect();
        expected.sort();
        if destinations != expected || masks.iter().any(|m| m.origin != from) {
            return Err(SmpcError::Protocol(format!("{from} did not send exactly one mask per peer")).into());
        }
        if self.shares.insert(from.clone(), (share, masks)).is_some() {
            return Err(SmpcError::Protocol(format!("duplicate share from {from}")).into());
        }
        if self.shares.len() == clients.len() {
            let me = self.me();
            for dest in &clients {
                let bundle: Vec<EncryptedMask> = self
                    .shares
                    .values()
                    .flat_map(|(_, masks)| masks.iter().filter(|m| &m.destination == dest).cloned())
                    .collect();
                let msg = self.message(dim, SmpcBody::MaskBundle(bundle));
                if *dest == me {
                    self.internal.push_back((me.clone(), msg));
                } else {
                    self.outgoing.push_back((Some(dest.clone()), msg.encode()));
                }
            }
        }
        Ok(())
    }

    fn on_bundle(&mut self, dim: u32, masks: Vec<EncryptedMask>) -> AppResult<()> {
        self.check_expect(Expect::Masks, "mask bundle")?;
        let n = self.info().n_clients();
        if masks.len() + 1 != n {
            return Err(SmpcError::Protocol(format!("received {} masks in a session of {n}", masks.len())).into());
        }
        let me = self.me();
        let keys = self.keys.as_ref().expect("keys generated at setup");
        let sum = sum_received_masks(&masks, &me, keys, dim as usize, self.scale)?;
        self.expect = Expect::Global;
        self.to_coordinator(self.message(dim, SmpcBody::MaskSum(sum)));
        Ok(())
    }

    fn on_mask_sum(&mut self, from: ClientId, dim: u32, sum: FixedPointVector) -> AppResult<()> {
        if self.shares.len() != self.info().n_clients() {
            return Err(SmpcError::Protocol(format!("mask sum from {from} before all shares arrived")).into());
        }
        if Some(dim) != self.dim {
            return Err(SmpcError::DimensionMismatch { expected: self.dim.unwrap_or(0) as usize, actual: dim as usize }.into());
        }
        if self.mask_sums.insert(from.clone(), sum).is_some() {
            return Err(SmpcError::Protocol(format!("duplicate mask sum from {from}")).into());
        }
        let clients = self.info().clients.clone();
        if self.mask_sums.len() < clients.len() {
            return Ok(());
        }
        let mut shares = std::mem::take(&mut self.shares);
        let mut sums = std::mem::take(&mut self.mask_sums);
        let ordered_shares: Vec<MaskedShare> = clients.iter().map(|c| shares.remove(c).expect("complete").0).collect();
        let ordered_sums: Vec<FixedPointVector> = clients.iter().map(|c| sums.remove(c).expect("complete")).collect();
        let total = aggregate(&ordered_shares, &ordered_sums, clients.len())?;
        self.dim = None;
        let global = self.model.combine(decode_fixed(&total))?;
        if clients.len() > 1 {
            self.outgoing.push_back((None, self.message(0, SmpcBody::Global(global.clone())).encode()));
        }
        self.round += 1;
        self.expect = Expect::Global;
        self.contribute(Some(&global))
    }

    fn on_global(&mut self, global: Vec<u8>) -> AppResult<()> {
        self.check_expect(Expect::Global, "global payload")?;
        self.round += 1;
        self.contribute(Some(&global))
    }
}

impl<M: AdditiveModel> App for SecureApp<M> {
    fn setup(&mut self, ctx: SetupContext) -> AppResult<()> {
        if self.info.is_some() {
            return Err(AppError::Contract("setup called twice".into()));
        }
        ctx.info.validate()?;
        let scale = ctx.config.u64_or("smpc_scale", DEFAULT_SCALE as u64)?;
        if !(1..=40).contains(&scale) {
            return Err(AppError::Setup(format!("smpc_scale {scale} outside 1..=40")));
        }
        self.scale = scale as u32;
        if ctx.config.bool_or("smpc_audit", false)? {
            self.audit = Some(Vec::new());
        }
        self.model.load(&ctx)?;
        self.output_dir = ctx.output_dir.clone();
        self.log = ctx.log.clone();
        self.log.info(format!("secure aggregation over {} clients, scale 2^{}", ctx.info.n_clients(), self.scale));
        self.info = Some(ctx.info);
        let keys = keygen(&mut self.rng);
        let public = keys.public_bytes();
        self.keys = Some(keys);
        self.expect = Expect::Directory;
        self.to_coordinator(self.message(0, SmpcBody::PublicKey(public)));
        self.pump()
    }

    fn status(&self) -> StatusReport {
        match self.outgoing.front() {
            Some((dest, bytes)) => StatusReport {
                available: true,
                finished: false,
                size: Some(bytes.len() as u64),
                destination: dest.clone(),
            },
            None => StatusReport { available: false, finished: self.done, size: None, destination: None },
        }
    }

    fn fetch_outgoing(&mut self) -> AppResult<Vec<u8>> {
        self.outgoing
            .pop_front()
            .map(|(_, bytes)| bytes)
            .ok_or_else(|| AppError::Contract("fetch_outgoing with no data available".into()))
    }

    fn deliver_incoming(&mut self, data: Vec<u8>, from: Option<ClientId>) -> AppResult<()> {
        let Some(info) = self.info.clone() else {
            return Err(AppError::Contract("deliver_incoming before setup".into()));
        };
        if self.done {
            return Err(AppError::Contract("deliver_incoming after completion".into()));
        }
        let sender = match (info.master, from) {
            (true, Some(id)) if info.clients.contains(&id) && id != info.id => id,
            (true, other) => return Err(AppError::failure(format!("coordinator received data from {other:?}"))),
            // Everything a participant receives comes from the coordinator.
            (false, None) => info.id.clone(),
            (false, Some(_)) => return Err(AppError::failure("participant received data addressed as a participant packet")),
        };
        let msg = SmpcMessage::decode(&data, Some(&sender))?;
        self.handle(sender, msg)?;
        self.pump()
    }
}
