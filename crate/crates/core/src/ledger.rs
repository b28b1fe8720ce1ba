//! Single-validator simulated ledger.
//!
//! Clients submit transactions that carry the content address of a stored
//! model update, authenticated with HMAC-SHA256 under a per-client key. The
//! ledger charges a fixed gas amount per transaction, draws a simulated
//! confirmation latency, and seals one hash-chained block per round. Time is
//! a simulated clock; wall time never enters a hash.
//!
//! # Canonical encoding
//!
//! All integers are big-endian. Byte strings are prefixed with their length
//! as `u32`. Floats are written as the big-endian `u64` of their IEEE-754
//! bits.
//!
//! ```text
//! signed payload = round u32 | client_id u32 | bytes(address digest) | payload_bytes u64
//! transaction    = round u32 | client_id u32 | bytes(address digest) | payload_bytes u64
//!                  | gas_used u64 | bytes(signature) | sim_timestamp f64
//! block body     = index u64 | prev_hash [32] | tx_count u32 | tx_count x bytes(transaction)
//!                  | sim_timestamp f64
//! block_hash     = SHA-256(block body)
//! ```
//!
//! The chain export holds one line per block: lowercase hex of
//! `block body | block_hash`.

use std::collections::BTreeMap;
use std::fmt;

use hmac::{Hmac, Mac};
use sha2::{Digest, Sha256};

use crate::cas::ContentAddress;
use crate::error::{Error, Result};
use crate::rng::{self, Purpose};

type HmacSha256 = Hmac<Sha256>;

pub type Hash = [u8; 32];

/// Gas charged per transaction by default.
pub const DEFAULT_BASE_GAS: u64 = 22_152;
pub const DEFAULT_LATENCY_MEAN_S: f64 = 6.0;
pub const DEFAULT_LATENCY_JITTER_S: f64 = 1.0;
/// Floor applied to simulated latencies.
pub const MIN_LATENCY_S: f64 = 0.001;
pub const GWEI_PER_ETH: f64 = 1e9;

#[derive(Clone, Debug, PartialEq)]
pub struct LedgerConfig {
    pub base_gas: u64,
    pub latency_mean_s: f64,
    pub latency_jitter_s: f64,
    /// Seed of the latency streams.
    pub seed: u64,
}

impl Default for LedgerConfig {
    fn default() -> Self {
        Self {
            base_gas: DEFAULT_BASE_GAS,
            latency_mean_s: DEFAULT_LATENCY_MEAN_S,
            latency_jitter_s: DEFAULT_LATENCY_JITTER_S,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UpdateTransaction {
    pub round: u32,
    pub client_id: u32,
    pub update_address: ContentAddress,
    pub payload_bytes: u64,
    /// Filled in by the ledger on submission.
    pub gas_used: u64,
    pub signature: Vec<u8>,
    /// Simulated confirmation time, filled in by the ledger.
    pub sim_timestamp: f64,
}

fn put_bytes(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u32).to_be_bytes());
    out.extend_from_slice(bytes);
}

fn signing_payload(round: u32, client_id: u32, address: &ContentAddress, payload_bytes: u64) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 4 + 4 + 32 + 8);
    out.extend_from_slice(&round.to_be_bytes());
    out.extend_from_slice(&client_id.to_be_bytes());
    put_bytes(&mut out, address.digest());
    out.extend_from_slice(&payload_bytes.to_be_bytes());
    out
}

fn mac(key: &[u8], message: &[u8]) -> HmacSha256 {
    let mut mac = HmacSha256::new_from_slice(key).expect("HMAC accepts keys of any length");
    mac.update(message);
    mac
}

impl UpdateTransaction {
    /// Builds a transaction signed with `key`. Gas and timestamp are left at
    /// zero for the ledger to fill in.
    pub fn signed(round: u32, client_id: u32, update_address: ContentAddress, payload_bytes: u64, key: &[u8]) -> Self {
        let payload = signing_payload(round, client_id, &update_address, payload_bytes);
        let signature = mac(key, &payload).finalize().into_bytes().to_vec();
        Self {
            round,
            client_id,
            update_address,
            payload_bytes,
            gas_used: 0,
            signature,
            sim_timestamp: 0.0,
        }
    }

    pub fn signing_payload(&self) -> Vec<u8> {
        signing_payload(self.round, self.client_id, &self.update_address, self.payload_bytes)
    }

    pub fn verify_signature(&self, key: &[u8]) -> bool {
        mac(key, &self.signing_payload()).verify_slice(&self.signature).is_ok()
    }

    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = self.signing_payload();
        out.extend_from_slice(&self.gas_used.to_be_bytes());
        put_bytes(&mut out, &self.signature);
        out.extend_from_slice(&self.sim_timestamp.to_bits().to_be_bytes());
        out
    }

    pub fn digest(&self) -> Hash {
        Sha256::digest(self.canonical_bytes()).into()
    }

    fn decode(bytes: &[u8]) -> Result<Self, String> {
        let mut r = Reader::new(bytes);
        let round = r.u32()?;
        let client_id = r.u32()?;
        let digest: Hash = r
            .bytes()?
            .try_into()
            .map_err(|_| "address digest is not 32 bytes".to_string())?;
        let payload_bytes = r.u64()?;
        let gas_used = r.u64()?;
        let signature = r.bytes()?.to_vec();
        let sim_timestamp = f64::from_bits(r.u64()?);
        r.finish()?;
        Ok(Self {
            round,
            client_id,
            update_address: ContentAddress::from_digest(digest),
            payload_bytes,
            gas_used,
            signature,
            sim_timestamp,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub index: u64,
    pub prev_hash: Hash,
    pub transactions: Vec<UpdateTransaction>,
    pub sim_timestamp: f64,
    pub block_hash: Hash,
}

impl Block {
    /// Canonical body, i.e. everything except `block_hash`.
    pub fn body_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.index.to_be_bytes());
        out.extend_from_slice(&self.prev_hash);
        out.extend_from_slice(&(self.transactions.len() as u32).to_be_bytes());
        for tx in &self.transactions {
            put_bytes(&mut out, &tx.canonical_bytes());
        }
        out.extend_from_slice(&self.sim_timestamp.to_bits().to_be_bytes());
        out
    }

    pub fn compute_hash(&self) -> Hash {
        Sha256::digest(self.body_bytes()).into()
    }

    /// Body followed by the stored block hash.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.body_bytes();
        out.extend_from_slice(&self.block_hash);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, String> {
        let mut r = Reader::new(bytes);
        let index = r.u64()?;
        let prev_hash = r.array32()?;
        let count = r.u32()?;
        let mut transactions = Vec::new();
        for _ in 0..count {
            transactions.push(UpdateTransaction::decode(r.bytes()?)?);
        }
        let sim_timestamp = f64::from_bits(r.u64()?);
        let block_hash = r.array32()?;
        r.finish()?;
        Ok(Self {
            index,
            prev_hash,
            transactions,
            sim_timestamp,
            block_hash,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], String> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, String> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, String> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn array32(&mut self) -> Result<Hash, String> {
        Ok(self.take(32)?.try_into().expect("32 bytes"))
    }

    fn bytes(&mut self) -> Result<&'a [u8], String> {
        let n = self.u32()? as usize;
        self.take(n)
    }

    fn finish(self) -> Result<(), String> {
        if self.pos == self.bytes.len() {
            Ok(())
        } else {
            Err(format!("{} trailing bytes", self.bytes.len() - self.pos))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Receipt {
    pub tx_digest: Hash,
    pub gas_used: u64,
    pub latency_s: f64,
    pub block_index: u64,
}

/// First problem found while auditing a chain.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    /// Position of the offending block in the chain.
    pub block: usize,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChainReport {
    pub blocks_checked: usize,
    pub violation: Option<Violation>,
}

impl ChainReport {
    pub fn is_valid(&self) -> bool {
        self.violation.is_none()
    }

    pub fn into_result(self) -> Result<()> {
        match self.violation {
            None => Ok(()),
            Some(v) => Err(Error::ChainInvalid {
                block: v.block,
                reason: v.reason,
            }),
        }
    }
}

impl fmt::Display for ChainReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.violation {
            None => write!(f, "valid ({} blocks)", self.blocks_checked),
            Some(v) => write!(f, "invalid at block {}: {}", v.block, v.reason),
        }
    }
}

fn check_block(
    position: usize,
    block: &Block,
    prev: Option<&Block>,
    keys: Option<&BTreeMap<u32, Vec<u8>>>,
) -> Option<String> {
    if block.index != position as u64 {
        return Some(format!("index {} at position {position}", block.index));
    }
    let expected_prev = prev.map_or([0u8; 32], |p| p.block_hash);
    if block.prev_hash != expected_prev {
        return Some("previous-hash link broken".into());
    }
    if block.compute_hash() != block.block_hash {
        return Some("block hash does not match contents".into());
    }
    if let Some(keys) = keys {
        for (i, tx) in block.transactions.iter().enumerate() {
            match keys.get(&tx.client_id) {
                None => return Some(format!("transaction {i} from unregistered client {}", tx.client_id)),
                Some(key) if !tx.verify_signature(key) => {
                    return Some(format!("transaction {i} has an invalid signature"))
                }
                Some(_) => {}
            }
        }
    }
    None
}

/// Audits hash linkage, block hashes and, when `keys` is given, every
/// transaction signature.
pub fn verify_blocks(blocks: &[Block], keys: Option<&BTreeMap<u32, Vec<u8>>>) -> ChainReport {
    for (i, block) in blocks.iter().enumerate() {
        if let Some(reason) = check_block(i, block, i.checked_sub(1).map(|p| &blocks[p]), keys) {
            return ChainReport {
                blocks_checked: i + 1,
                violation: Some(Violation { block: i, reason }),
            };
        }
    }
    ChainReport {
        blocks_checked: blocks.len(),
        violation: None,
    }
}

/// One hex line per block.
pub fn export_chain(blocks: &[Block]) -> String {
    let mut out = String::new();
    for block in blocks {
        out.push_str(&hex::encode(block.to_bytes()));
        out.push('\n');
    }
    out
}

/// Parses an export, reporting the first undecodable line as a violation at
/// that block position.
pub fn parse_export(text: &str) -> std::result::Result<Vec<Block>, Violation> {
    text.lines()
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(i, line)| {
            let bytes = hex::decode(line.trim()).map_err(|e| Violation {
                block: i,
                reason: format!("bad hex: {e}"),
            })?;
            Block::from_bytes(&bytes).map_err(|reason| Violation { block: i, reason })
        })
        .collect()
}

/// Audits an exported chain without signature keys.
pub fn verify_export(text: &str, keys: Option<&BTreeMap<u32, Vec<u8>>>) -> ChainReport {
    match parse_export(text) {
        Ok(blocks) => verify_blocks(&blocks, keys),
        Err(parse_violation) => {
            // blocks before the undecodable line may already be broken
            let lines: Vec<&str> = text.lines().filter(|l| !l.is_empty()).collect();
            let prefix = parse_export(&lines[..parse_violation.block].join("\n"))
                .expect("lines before the first failure decode");
            let report = verify_blocks(&prefix, keys);
            if report.is_valid() {
                ChainReport {
                    blocks_checked: parse_violation.block + 1,
                    violation: Some(parse_violation),
                }
            } else {
                report
            }
        }
    }
}

/// Transaction fee `gas * price`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TxCost {
    pub gwei: f64,
    pub eth: f64,
}

pub fn tx_cost(gas_used: u64, gas_price_gwei: f64) -> Result<TxCost> {
    if !(gas_price_gwei >= 0.0 && gas_price_gwei.is_finite()) {
        return Err(Error::Argument(format!(
            "gas price {gas_price_gwei} must be non-negative"
        )));
    }
    let gwei = gas_used as f64 * gas_price_gwei;
    Ok(TxCost {
        gwei,
        eth: gwei / GWEI_PER_ETH,
    })
}

/// The simulated chain. Single writer.
#[derive(Debug)]
pub struct Ledger {
    config: LedgerConfig,
    keys: BTreeMap<u32, Vec<u8>>,
    blocks: Vec<Block>,
    pending: Vec<UpdateTransaction>,
    open_round: u32,
    clock_s: f64,
}

impl Ledger {
    /// Empty chain whose first block collects round 1.
    pub fn new(config: LedgerConfig) -> Result<Self> {
        if config.base_gas == 0 {
            return Err(Error::Config("base gas must be positive".into()));
        }
        if !(config.latency_mean_s.is_finite() && config.latency_jitter_s >= 0.0 && config.latency_jitter_s.is_finite())
        {
            return Err(Error::Config(
                "latency model parameters must be finite, jitter non-negative".into(),
            ));
        }
        Ok(Self {
            config,
            keys: BTreeMap::new(),
            blocks: Vec::new(),
            pending: Vec::new(),
            open_round: 1,
            clock_s: 0.0,
        })
    }

    pub fn config(&self) -> &LedgerConfig {
        &self.config
    }

    pub fn register_client(&mut self, client_id: u32, key: Vec<u8>) -> Result<()> {
        if self.keys.contains_key(&client_id) {
            return Err(Error::DuplicateClient(client_id));
        }
        self.keys.insert(client_id, key);
        Ok(())
    }

    pub fn is_registered(&self, client_id: u32) -> bool {
        self.keys.contains_key(&client_id)
    }

    pub fn keys(&self) -> &BTreeMap<u32, Vec<u8>> {
        &self.keys
    }

    pub fn open_round(&self) -> u32 {
        self.open_round
    }

    pub fn clock_s(&self) -> f64 {
        self.clock_s
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn pending(&self) -> &[UpdateTransaction] {
        &self.pending
    }

    fn latency(&self, client_id: u32, round: u32) -> f64 {
        let mut rng = rng::stream(self.config.seed, Purpose::Latency, client_id, round);
        let u = 2.0 * rng::uniform(&mut rng) - 1.0;
        (self.config.latency_mean_s + self.config.latency_jitter_s * u).max(MIN_LATENCY_S)
    }

    /// Queues a signed transaction into the open block.
    pub fn submit_update(&mut self, mut tx: UpdateTransaction) -> Result<Receipt> {
        let key = self.keys.get(&tx.client_id).ok_or(Error::UnknownClient(tx.client_id))?;
        if !tx.verify_signature(key) {
            return Err(Error::BadSignature(tx.client_id));
        }
        if tx.round != self.open_round {
            return Err(Error::RoundMismatch {
                open: self.open_round,
                got: tx.round,
            });
        }
        let latency_s = self.latency(tx.client_id, tx.round);
        self.clock_s += latency_s;
        tx.gas_used = self.config.base_gas;
        tx.sim_timestamp = self.clock_s;
        let receipt = Receipt {
            tx_digest: tx.digest(),
            gas_used: tx.gas_used,
            latency_s,
            block_index: self.blocks.len() as u64,
        };
        self.pending.push(tx);
        Ok(receipt)
    }

    /// Appends the pending transactions as a new block and opens the next
    /// round.
    pub fn seal_block(&mut self) -> Result<&Block> {
        if self.pending.is_empty() {
            return Err(Error::Usage("no pending transactions to seal".into()));
        }
        let mut block = Block {
            index: self.blocks.len() as u64,
            prev_hash: self.blocks.last().map_or([0u8; 32], |b| b.block_hash),
            transactions: std::mem::take(&mut self.pending),
            sim_timestamp: self.clock_s,
            block_hash: [0u8; 32],
        };
        block.block_hash = block.compute_hash();
        self.blocks.push(block);
        self.open_round += 1;
        Ok(self.blocks.last().expect("just pushed"))
    }

    pub fn verify_chain(&self) -> ChainReport {
        verify_blocks(&self.blocks, Some(&self.keys))
    }

    pub fn export(&self) -> String {
        export_chain(&self.blocks)
    }
}

/// Deterministic per-client MAC key derived from the experiment seed.
pub fn derive_client_key(seed: u64, client_id: u32) -> Vec<u8> {
    use rand::RngCore;
    let mut key = vec![0u8; 32];
    rng::stream(seed, Purpose::ClientKey, client_id, 0).fill_bytes(&mut key);
    key
}
