//! Two-party protocols between a key holder and an evaluator.
//!
//! Both parties' state lives in one [`Session`], but they only exchange data
//! through the metered [`Link`]; every value crossing between them is
//! serialized, framed and parsed again. The key holder only ever decrypts
//! values the evaluator has masked, and the evaluator only ever holds
//! ciphertexts of intermediate values.

mod arith;
pub(crate) mod repack;

pub use arith::{
    bipartite_compute, secure_add, secure_mul, secure_poly, BipartiteDecomposition, OperandCase, Reveal, Revealed,
};
pub use repack::{secure_repack, RepackMode};

use std::collections::{HashMap, HashSet};

use num_bigint::BigUint;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::circuit::VarKey;
use crate::error::{ProtocolError, TransportError};
use crate::packing::PackingLayout;
use crate::paillier::{Ciphertext, PublicKey, SecretKey};
use crate::transport::{loopback_pair, socket_pair, Link, Loopback, Message, Socket, Transport};

/// Default fixed-point precision.
pub const DEFAULT_SCALE_BITS: u32 = 23;

/// A value held by one party.
#[derive(Clone, Debug, PartialEq)]
pub enum StoredValue {
    /// Own fixed-point input, encoded modulo `n`.
    Plain { value: BigUint, level: u32 },
    /// Encrypted scalar.
    Cipher { ct: Ciphertext, level: u32 },
    /// Encrypted packed vector.
    Packed { cts: Vec<Ciphertext>, layout: PackingLayout },
}

/// Key-value store of one party's values.
#[derive(Clone, Debug, Default)]
pub struct VarStore {
    values: HashMap<VarKey, StoredValue>,
}

impl VarStore {
    pub fn insert(&mut self, key: VarKey, v: StoredValue) {
        self.values.insert(key, v);
    }

    pub fn get(&self, key: VarKey) -> Result<&StoredValue, ProtocolError> {
        self.values.get(&key).ok_or(ProtocolError::MissingVariable(key))
    }

    pub fn remove(&mut self, key: VarKey) -> Option<StoredValue> {
        self.values.remove(&key)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&VarKey, &StoredValue)> {
        self.values.iter()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn clear(&mut self) {
        self.values.clear();
    }

    pub(crate) fn plain(&self, key: VarKey) -> Result<(&BigUint, u32), ProtocolError> {
        match self.get(key)? {
            StoredValue::Plain { value, level } => Ok((value, *level)),
            _ => Err(ProtocolError::WrongKind(key)),
        }
    }

    pub(crate) fn cipher(&self, key: VarKey) -> Result<(&Ciphertext, u32), ProtocolError> {
        match self.get(key)? {
            StoredValue::Cipher { ct, level } => Ok((ct, *level)),
            _ => Err(ProtocolError::WrongKind(key)),
        }
    }

    pub fn packed(&self, key: VarKey) -> Result<(&[Ciphertext], &PackingLayout), ProtocolError> {
        match self.get(key)? {
            StoredValue::Packed { cts, layout } => Ok((cts, layout)),
            _ => Err(ProtocolError::WrongKind(key)),
        }
    }
}

pub type MaskId = u64;

/// Masks drawn by the evaluator. Each mask blinds exactly one value.
#[derive(Debug, Default)]
pub struct MaskBook {
    next: MaskId,
    live: HashMap<MaskId, BigUint>,
    spent: HashSet<MaskId>,
}

impl MaskBook {
    pub fn issue(&mut self, value: BigUint) -> MaskId {
        let id = self.next;
        self.next += 1;
        self.live.insert(id, value);
        id
    }

    /// Retires a mask; a second retirement is a protocol error.
    pub fn retire(&mut self, id: MaskId) -> Result<BigUint, ProtocolError> {
        match self.live.remove(&id) {
            Some(v) => {
                self.spent.insert(id);
                Ok(v)
            }
            None => Err(ProtocolError::MaskReuse(id)),
        }
    }

    pub fn live(&self) -> usize {
        self.live.len()
    }

    pub fn issued(&self) -> u64 {
        self.next
    }
}

/// The seller: holds the secret key and its own inputs.
pub struct KeyHolder {
    pub(crate) sk: SecretKey,
    pub(crate) store: VarStore,
    pub(crate) inputs: HashMap<VarKey, f64>,
    pub(crate) rng: ChaCha20Rng,
}

impl KeyHolder {
    pub fn public_key(&self) -> &PublicKey {
        self.sk.public()
    }

    pub fn secret_key(&self) -> &SecretKey {
        &self.sk
    }

    pub fn store(&self) -> &VarStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut VarStore {
        &mut self.store
    }

    pub fn set_inputs(&mut self, inputs: HashMap<VarKey, f64>) {
        self.inputs = inputs;
    }

    pub fn rng(&mut self) -> &mut ChaCha20Rng {
        &mut self.rng
    }
}

/// The user: computes on ciphertexts under the key holder's public key.
pub struct Evaluator {
    pub(crate) pk: PublicKey,
    pub(crate) store: VarStore,
    pub(crate) inputs: HashMap<VarKey, f64>,
    pub(crate) masks: MaskBook,
    pub(crate) rng: ChaCha20Rng,
}

impl Evaluator {
    pub fn public_key(&self) -> &PublicKey {
        &self.pk
    }

    pub fn store(&self) -> &VarStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut VarStore {
        &mut self.store
    }

    pub fn masks(&self) -> &MaskBook {
        &self.masks
    }

    pub fn set_inputs(&mut self, inputs: HashMap<VarKey, f64>) {
        self.inputs = inputs;
    }

    pub fn rng(&mut self) -> &mut ChaCha20Rng {
        &mut self.rng
    }

    /// Draws a uniform mask below `bound` and registers it.
    pub(crate) fn draw_mask(&mut self, bound: &BigUint) -> (MaskId, BigUint) {
        let r = crate::paillier::uniform_below(bound, &mut self.rng);
        (self.masks.issue(r.clone()), r)
    }
}

/// Why the key holder decrypted something.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecryptPurpose {
    /// Intermediate value blinded by evaluator masks.
    Masked,
    /// Final result revealed to the key holder by design.
    Output,
    /// Sum of several users' contributions.
    Aggregate,
}

#[derive(Clone, Debug)]
pub struct DecryptionRecord {
    pub plaintext: BigUint,
    pub masks: Vec<MaskId>,
    pub purpose: DecryptPurpose,
}

/// Test-only observer of what the key holder sees. It has no influence on the protocol.
#[derive(Clone, Debug, Default)]
pub struct Audit {
    pub decryptions: Vec<DecryptionRecord>,
    pub holder_received: Vec<Ciphertext>,
    pub holder_sent: Vec<Ciphertext>,
    pub plain_to_holder: Vec<BigUint>,
}

/// One key holder, one evaluator, and the link between them.
pub struct Session<T: Transport = Loopback> {
    pub holder: KeyHolder,
    pub evaluator: Evaluator,
    pub link: Link<T>,
    scale_bits: u32,
    audit: Option<Audit>,
}

fn derive_seed(seed: u64, tag: u64) -> u64 {
    seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

impl Session<Loopback> {
    pub fn loopback(sk: SecretKey, seed: u64) -> Self {
        let (a, b) = loopback_pair();
        Session::new(sk, a, b, seed)
    }
}

impl Session<Socket> {
    pub fn over_tcp(sk: SecretKey, seed: u64) -> Result<Self, TransportError> {
        let (a, b) = socket_pair()?;
        Ok(Session::new(sk, a, b, seed))
    }
}

impl<T: Transport> Session<T> {
    pub fn new(sk: SecretKey, holder_end: T, evaluator_end: T, seed: u64) -> Self {
        let pk = sk.public().clone();
        Session {
            holder: KeyHolder {
                sk,
                store: VarStore::default(),
                inputs: HashMap::new(),
                rng: ChaCha20Rng::seed_from_u64(derive_seed(seed, 1)),
            },
            evaluator: Evaluator {
                pk: pk.clone(),
                store: VarStore::default(),
                inputs: HashMap::new(),
                masks: MaskBook::default(),
                rng: ChaCha20Rng::seed_from_u64(derive_seed(seed, 2)),
            },
            link: Link::new(holder_end, evaluator_end, pk),
            scale_bits: DEFAULT_SCALE_BITS,
            audit: None,
        }
    }

    pub fn public_key(&self) -> &PublicKey {
        self.evaluator.public_key()
    }

    pub fn scale_bits(&self) -> u32 {
        self.scale_bits
    }

    pub fn set_scale_bits(&mut self, bits: u32) {
        self.scale_bits = bits;
    }

    pub fn enable_audit(&mut self) {
        self.audit = Some(Audit::default());
    }

    pub fn audit(&self) -> Option<&Audit> {
        self.audit.as_ref()
    }

    /// Key holder to evaluator, ciphertexts.
    pub fn send_ciphers_to_evaluator(&mut self, cts: Vec<Ciphertext>) -> Result<Vec<Ciphertext>, ProtocolError> {
        let n = cts.len();
        if let Some(a) = self.audit.as_mut() {
            a.holder_sent.extend(cts.iter().cloned());
        }
        let got = self.link.to_evaluator(batch(cts))?.into_ciphers()?;
        expect_len(&got, n)?;
        Ok(got)
    }

    /// Evaluator to key holder, ciphertexts.
    pub fn send_ciphers_to_holder(&mut self, cts: Vec<Ciphertext>) -> Result<Vec<Ciphertext>, ProtocolError> {
        let n = cts.len();
        let got = self.link.to_holder(batch(cts))?.into_ciphers()?;
        expect_len(&got, n)?;
        if let Some(a) = self.audit.as_mut() {
            a.holder_received.extend(got.iter().cloned());
        }
        Ok(got)
    }

    pub fn send_plain_to_evaluator(&mut self, xs: Vec<BigUint>) -> Result<Vec<BigUint>, ProtocolError> {
        let n = xs.len();
        let got = self.link.to_evaluator(Message::Plain(xs))?.into_plain()?;
        expect_len(&got, n)?;
        Ok(got)
    }

    pub fn send_plain_to_holder(&mut self, xs: Vec<BigUint>) -> Result<Vec<BigUint>, ProtocolError> {
        let n = xs.len();
        let got = self.link.to_holder(Message::Plain(xs))?.into_plain()?;
        expect_len(&got, n)?;
        if let Some(a) = self.audit.as_mut() {
            a.plain_to_holder.extend(got.iter().cloned());
        }
        Ok(got)
    }

    /// Key-holder decryption, recorded by the audit when enabled.
    pub fn holder_decrypt(
        &mut self,
        c: &Ciphertext,
        masks: &[MaskId],
        purpose: DecryptPurpose,
    ) -> Result<BigUint, ProtocolError> {
        let v = self.holder.sk.decrypt(c)?;
        if let Some(a) = self.audit.as_mut() {
            a.decryptions.push(DecryptionRecord { plaintext: v.clone(), masks: masks.to_vec(), purpose });
        }
        Ok(v)
    }
}

fn batch(cts: Vec<Ciphertext>) -> Message {
    if cts.len() == 1 {
        Message::Cipher(cts.into_iter().next().expect("one element"))
    } else {
        Message::CipherBatch(cts)
    }
}

fn expect_len<X>(v: &[X], n: usize) -> Result<(), ProtocolError> {
    if v.len() != n {
        return Err(ProtocolError::Transport(TransportError::Malformed(format!(
            "expected {n} units, got {}",
            v.len()
        ))));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_single_use() {
        let mut book = MaskBook::default();
        let id = book.issue(BigUint::from(5u32));
        assert_eq!(book.retire(id).unwrap(), BigUint::from(5u32));
        assert!(matches!(book.retire(id), Err(ProtocolError::MaskReuse(_))));
        assert_eq!(book.live(), 0);
    }
}
