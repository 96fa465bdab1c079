//! Typed messages between the two parties and the ordered in-process channel
//! that carries them.
//!
//! The channel enforces the exchange grammar:
//!
//! ```text
//! Idle --EstimatedReps(RenBatch)--> AwaitEncGrad --EncGradWrtEstimate--> AwaitEncParamGrad
//!      --EncParamGrad--> AwaitDecParamGrad --DecParamGrad--> Idle
//! Idle --EstimatedReps(Correction)--> AwaitPerturbation --Perturbation--> Idle
//! Idle --EstimatedReps(PerturberFit)--> Idle
//! ```
//!
//! Every accepted message is appended to an audit log and, when a
//! [`PrivacyAuditor`] is attached, checked against both parties' raw feature
//! rows before delivery.

use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::he::Ciphertext;
use crate::matrix::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Party {
    A,
    B,
}

impl fmt::Display for Party {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Party::A => f.write_str("A"),
            Party::B => f.write_str("B"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MessageKind {
    EstimatedReps,
    EncGradWrtEstimate,
    EncParamGrad,
    DecParamGrad,
    Perturbation,
}

impl MessageKind {
    pub const ALL: [MessageKind; 5] = [
        MessageKind::EstimatedReps,
        MessageKind::EncGradWrtEstimate,
        MessageKind::EncParamGrad,
        MessageKind::DecParamGrad,
        MessageKind::Perturbation,
    ];

    /// The only direction each kind may travel.
    pub fn route(self) -> (Party, Party) {
        match self {
            MessageKind::EstimatedReps | MessageKind::EncParamGrad => (Party::A, Party::B),
            MessageKind::EncGradWrtEstimate | MessageKind::DecParamGrad | MessageKind::Perturbation => {
                (Party::B, Party::A)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RepsPurpose {
    /// Step 1 of an estimator update; answered by an encrypted gradient.
    RenBatch,
    /// Estimates handed to party B to fit its perturbation generator; no reply.
    PerturberFit,
    /// Estimates to be corrected; answered by a perturbation.
    Correction,
}

/// A vector that is either Paillier ciphertexts or, in mock mode, the
/// fixed-point-quantized plaintext values that would have been encrypted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum EncryptedVector {
    Real(Vec<Ciphertext>),
    Mock(Vec<f64>),
}

impl EncryptedVector {
    pub fn len(&self) -> usize {
        match self {
            EncryptedVector::Real(v) => v.len(),
            EncryptedVector::Mock(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Payload {
    EstimatedReps {
        purpose: RepsPurpose,
        ids: Vec<usize>,
        reps: Matrix,
    },
    /// Row-major `rows x cols` gradient of the estimator loss.
    EncGradWrtEstimate {
        rows: usize,
        cols: usize,
        values: EncryptedVector,
    },
    EncParamGrad(EncryptedVector),
    DecParamGrad(Vec<f64>),
    Perturbation {
        ids: Vec<usize>,
        epsilon: Matrix,
    },
}

impl Payload {
    pub fn kind(&self) -> MessageKind {
        match self {
            Payload::EstimatedReps { .. } => MessageKind::EstimatedReps,
            Payload::EncGradWrtEstimate { .. } => MessageKind::EncGradWrtEstimate,
            Payload::EncParamGrad(_) => MessageKind::EncParamGrad,
            Payload::DecParamGrad(_) => MessageKind::DecParamGrad,
            Payload::Perturbation { .. } => MessageKind::Perturbation,
        }
    }

    /// Canonical byte encoding: little-endian `f64`s for reals and
    /// big-endian magnitudes for ciphertexts.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        fn reals(out: &mut Vec<u8>, v: &[f64]) {
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        fn enc(out: &mut Vec<u8>, v: &EncryptedVector) {
            match v {
                EncryptedVector::Real(cs) => {
                    for c in cs {
                        out.extend_from_slice(&c.value().to_bytes_be());
                    }
                }
                EncryptedVector::Mock(xs) => reals(out, xs),
            }
        }
        let mut out = Vec::new();
        match self {
            Payload::EstimatedReps { reps, .. } => reals(&mut out, reps.as_slice()),
            Payload::EncGradWrtEstimate { values, .. } => enc(&mut out, values),
            Payload::EncParamGrad(v) => enc(&mut out, v),
            Payload::DecParamGrad(v) => reals(&mut out, v),
            Payload::Perturbation { epsilon, .. } => reals(&mut out, epsilon.as_slice()),
        }
        out
    }

    /// Real-valued content that could leak raw rows, if any.
    fn real_values(&self) -> Option<&[f64]> {
        match self {
            Payload::EstimatedReps { reps, .. } => Some(reps.as_slice()),
            Payload::EncGradWrtEstimate {
                values: EncryptedVector::Mock(v),
                ..
            } => Some(v),
            Payload::EncParamGrad(EncryptedVector::Mock(v)) => Some(v),
            Payload::DecParamGrad(v) => Some(v),
            Payload::Perturbation { epsilon, .. } => Some(epsilon.as_slice()),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Message {
    pub seq: u64,
    pub sender: Party,
    pub receiver: Party,
    pub payload: Payload,
}

impl Message {
    pub fn kind(&self) -> MessageKind {
        self.payload.kind()
    }
}

/// One line of the JSON-lines message log.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogEntry {
    pub seq: u64,
    pub direction: String,
    #[serde(rename = "type")]
    pub kind: MessageKind,
    pub digest: String,
    pub bytes: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Phase {
    Idle,
    AwaitEncGrad,
    AwaitEncParamGrad,
    AwaitDecParamGrad,
    AwaitPerturbation,
}

/// Checks payloads against the raw feature rows of both parties.
#[derive(Clone, Debug, Default)]
pub struct PrivacyAuditor {
    rows: Vec<Vec<f64>>,
    by_first: HashMap<u64, Vec<usize>>,
}

impl PrivacyAuditor {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn watch(&mut self, raw: &Matrix) {
        if raw.cols() == 0 {
            return;
        }
        for row in raw.iter_rows() {
            let id = self.rows.len();
            self.by_first.entry(row[0].to_bits()).or_default().push(id);
            self.rows.push(row.to_vec());
        }
    }

    /// True if some contiguous window of `values` equals a watched raw row.
    pub fn reproduces_raw_row(&self, values: &[f64]) -> bool {
        for (start, v) in values.iter().enumerate() {
            let Some(candidates) = self.by_first.get(&v.to_bits()) else {
                continue;
            };
            for &id in candidates {
                let row = &self.rows[id];
                if start + row.len() <= values.len() && values[start..start + row.len()] == row[..] {
                    return true;
                }
            }
        }
        false
    }
}

/// Ordered, reliable, in-process channel between the parties.
#[derive(Debug)]
pub struct Channel {
    queue: VecDeque<Message>,
    phase: Phase,
    next_seq: u64,
    log: Vec<LogEntry>,
    auditor: Option<PrivacyAuditor>,
    transcript: Option<Vec<Message>>,
}

impl Default for Channel {
    fn default() -> Self {
        Self::new()
    }
}

impl Channel {
    pub fn new() -> Self {
        Self {
            queue: VecDeque::new(),
            phase: Phase::Idle,
            next_seq: 0,
            log: Vec::new(),
            auditor: None,
            transcript: None,
        }
    }

    /// Keeps a copy of every sent message for later inspection.
    pub fn recording(mut self) -> Self {
        self.transcript = Some(Vec::new());
        self
    }

    /// Every message sent so far, if recording was enabled.
    pub fn transcript(&self) -> Option<&[Message]> {
        self.transcript.as_deref()
    }

    pub fn with_auditor(auditor: PrivacyAuditor) -> Self {
        Self {
            auditor: Some(auditor),
            ..Self::new()
        }
    }

    pub fn send(&mut self, sender: Party, payload: Payload) -> Result<u64> {
        let kind = payload.kind();
        let (from, to) = kind.route();
        if sender != from {
            return Err(Error::Protocol(format!("{kind:?} must be sent by party {from}, not {sender}")));
        }
        let next = match (self.phase, &payload) {
            (Phase::Idle, Payload::EstimatedReps { purpose, .. }) => match purpose {
                RepsPurpose::RenBatch => Phase::AwaitEncGrad,
                RepsPurpose::Correction => Phase::AwaitPerturbation,
                RepsPurpose::PerturberFit => Phase::Idle,
            },
            (Phase::AwaitEncGrad, Payload::EncGradWrtEstimate { .. }) => Phase::AwaitEncParamGrad,
            (Phase::AwaitEncParamGrad, Payload::EncParamGrad(_)) => Phase::AwaitDecParamGrad,
            (Phase::AwaitDecParamGrad, Payload::DecParamGrad(_)) => Phase::Idle,
            (Phase::AwaitPerturbation, Payload::Perturbation { .. }) => Phase::Idle,
            (phase, _) => {
                return Err(Error::Protocol(format!("{kind:?} not allowed in phase {phase:?}")));
            }
        };
        if let (Some(auditor), Some(values)) = (&self.auditor, payload.real_values()) {
            if auditor.reproduces_raw_row(values) {
                return Err(Error::Privacy(format!("{kind:?} payload reproduces a raw feature row")));
            }
        }
        let bytes = payload.canonical_bytes();
        let seq = self.next_seq;
        self.next_seq += 1;
        self.log.push(LogEntry {
            seq,
            direction: format!("{from}->{to}"),
            kind,
            digest: hex::encode(Sha256::digest(&bytes)),
            bytes: bytes.len(),
        });
        let msg = Message {
            seq,
            sender,
            receiver: to,
            payload,
        };
        if let Some(t) = &mut self.transcript {
            t.push(msg.clone());
        }
        self.queue.push_back(msg);
        self.phase = next;
        Ok(seq)
    }

    /// Takes the next message, which must be addressed to `receiver` and be of `kind`.
    pub fn recv(&mut self, receiver: Party, kind: MessageKind) -> Result<Message> {
        match self.queue.front() {
            None => Err(Error::Protocol(format!("party {receiver} expected {kind:?}, channel empty"))),
            Some(m) if m.receiver != receiver || m.kind() != kind => Err(Error::Protocol(format!(
                "party {receiver} expected {kind:?}, next message is {:?} for party {}",
                m.kind(),
                m.receiver
            ))),
            Some(_) => Ok(self.queue.pop_front().expect("front checked")),
        }
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    pub fn is_idle(&self) -> bool {
        self.phase == Phase::Idle && self.queue.is_empty()
    }

    pub fn log(&self) -> &[LogEntry] {
        &self.log
    }

    pub fn write_log(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for e in &self.log {
            serde_json::to_writer(&mut f, e)?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
        Ok(())
    }
}
