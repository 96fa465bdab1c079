//! The representation estimation network `g^B: r^A -> r~^B`, its
//! encrypted-gradient training protocol, and the underdetermination analysis
//! of what party A learns from the decrypted parameter gradients.
//!
//! One protocol round on a batch of aligned rows:
//!
//! 1. A computes `r~^B = g^B(r^A)` and sends it to B.
//! 2. B computes `u = dL/dr~^B = 2/m (r~^B - r^B)`, encrypts it and sends it to A.
//! 3. A forms `[[dL/dTheta]] = sum_i J_i^T [[u_i]]` in ciphertext space and sends it to B.
//! 4. B decrypts and returns the plaintext gradient; A applies an SGD step.

use num_bigint::BigInt;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::he::{quantize, Ciphertext, FixedPointCodec, HeMode, PublicKey};
use crate::matrix::{mean_row_sq_dist, Matrix};
use crate::nn::{chain, Activation, Gradients, Mlp};
use crate::party::{PartyA, PartyB};
use crate::protocol::{Channel, EncryptedVector, MessageKind, Party, Payload, RepsPurpose};
use crate::training::{check_finite, minibatches, TrainOptions};

/// Hidden widths of the default estimator: four weight layers, 40 units each.
pub const DEFAULT_REN_HIDDEN: [usize; 3] = [40, 40, 40];

/// Largest loss-gradient magnitude party B will encrypt. Party A relies on
/// this bound to check that its ciphertext accumulation cannot wrap.
pub const UPSTREAM_BOUND_BITS: u32 = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenModel {
    net: Mlp,
}

impl RenModel {
    /// `in_dim -> hidden... (tanh) -> out_dim (identity)`.
    pub fn new<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, hidden: &[usize], rng: &mut R) -> Result<Self> {
        let mut dims = Vec::with_capacity(hidden.len() + 2);
        dims.push(in_dim);
        dims.extend_from_slice(hidden);
        dims.push(out_dim);
        let net = Mlp::new(&chain(&dims, Activation::Tanh, Activation::Identity), rng)?;
        Ok(Self { net })
    }

    pub fn from_net(net: Mlp) -> Self {
        Self { net }
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn in_dim(&self) -> usize {
        self.net.in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.net.out_dim()
    }

    pub fn param_count(&self) -> usize {
        self.net.param_count()
    }

    pub fn estimate(&self, r_a: &Matrix) -> Result<Matrix> {
        self.net.predict(r_a)
    }
}

/// `(1/m) * sum_i ||r_i - r~_i||^2`.
pub fn ren_loss(r_true: &Matrix, r_est: &Matrix) -> Result<f64> {
    mean_row_sq_dist(r_true, r_est, "ren_loss")
}

/// `dL/dr~ = (2/m) (r~ - r)`, computed by party B.
pub fn grad_wrt_estimate(r_true: &Matrix, r_est: &Matrix) -> Result<Matrix> {
    let m = r_true.rows().max(1) as f64;
    r_est.zip_map(r_true, |e, t| 2.0 * (e - t) / m)
}

/// Plaintext reference for step 3: `g[k] = sum_i sum_j J_i[j,k] u[i,j]`.
pub fn plaintext_vjp(jacobians: &[Matrix], upstream: &Matrix) -> Result<Vec<f64>> {
    let k = check_jacobians(jacobians, upstream.rows(), upstream.cols())?;
    let mut out = vec![0.0; k];
    for (i, jac) in jacobians.iter().enumerate() {
        for (j, &u) in upstream.row(i).iter().enumerate() {
            if u != 0.0 {
                for (o, &v) in out.iter_mut().zip(jac.row(j)) {
                    *o += v * u;
                }
            }
        }
    }
    Ok(out)
}

fn check_jacobians(jacobians: &[Matrix], m: usize, d: usize) -> Result<usize> {
    if jacobians.len() != m {
        return Err(Error::shape("vjp samples", m, jacobians.len()));
    }
    let k = jacobians.first().map_or(0, Matrix::cols);
    for j in jacobians {
        if j.rows() != d || j.cols() != k {
            return Err(Error::shape("vjp jacobian", format!("{d}x{k}"), format!("{}x{}", j.rows(), j.cols())));
        }
    }
    Ok(k)
}

/// Step 3 in ciphertext space. `enc_upstream` is row-major `m x d`, each
/// entry a fixed-point encryption at `codec.frac_bits`; every output
/// component decrypts to a value at `2 * frac_bits` scale.
pub fn encrypted_vjp(
    jacobians: &[Matrix],
    enc_upstream: &[Ciphertext],
    pk: &PublicKey,
    codec: &FixedPointCodec,
) -> Result<Vec<Ciphertext>> {
    let m = jacobians.len();
    let d = jacobians.first().map_or(0, Matrix::rows);
    if enc_upstream.len() != m * d {
        return Err(Error::shape("encrypted_vjp upstream", m * d, enc_upstream.len()));
    }
    let k = check_jacobians(jacobians, m, d)?;

    // Worst-case accumulated magnitude per component, in bits, must stay
    // below n/2 so the signed residue decodes correctly.
    let scale = 2f64.powi(codec.frac_bits as i32);
    let headroom_bits = pk.n().bits() as f64 - 2.0;
    let mut col_abs = vec![0.0f64; k];
    for jac in jacobians {
        for row in jac.iter_rows() {
            for (s, v) in col_abs.iter_mut().zip(row) {
                *s += (v * scale).abs() + 0.5;
            }
        }
    }
    for &s in &col_abs {
        let bits = s.log2() + (codec.frac_bits + UPSTREAM_BOUND_BITS) as f64;
        if !s.is_finite() || bits >= headroom_bits {
            return Err(Error::FixedPointOverflow { value: s / scale });
        }
    }

    let mut acc = vec![pk.zero_ciphertext(); k];
    for (i, jac) in jacobians.iter().enumerate() {
        for j in 0..d {
            let c = &enc_upstream[i * d + j];
            let c_neg = pk.negate(c)?;
            for (a, &v) in acc.iter_mut().zip(jac.row(j)) {
                let q = codec.encode_signed(v)?;
                if q == BigInt::from(0) {
                    continue;
                }
                let term = pk.scalar_mul_signed(&q, c, &c_neg)?;
                *a = pk.add(a, &term)?;
            }
        }
    }
    Ok(acc)
}

/// Everything exchanged in one estimator update, in protocol order.
#[derive(Clone, Debug, PartialEq)]
pub struct RenBatchTranscript {
    pub batch_index: usize,
    pub ids: Vec<usize>,
    pub estimated_reps: Matrix,
    pub encrypted_grad_wrt_estimate: EncryptedVector,
    pub encrypted_param_grad: EncryptedVector,
    pub decrypted_param_grad: Vec<f64>,
    /// Estimator loss on this batch as measured by party B.
    pub loss: f64,
    pub seqs: [u64; 4],
}

fn estimator_mut(a: &mut PartyA) -> Result<&mut RenModel> {
    a.ren
        .as_mut()
        .ok_or_else(|| Error::Protocol("party A has no estimation network".into()))
}

/// Runs the four-step protocol on the rows `ids` and applies the update.
pub fn run_batch_update(
    a: &mut PartyA,
    b: &mut PartyB,
    batch_index: usize,
    ids: &[usize],
    lr: f64,
    channel: &mut Channel,
) -> Result<RenBatchTranscript> {
    // Step 1 (A): estimates for the batch.
    let r_a = a.codes_for(ids)?;
    let estimates = estimator_mut(a)?.estimate(&r_a)?;
    let s1 = channel.send(
        Party::A,
        Payload::EstimatedReps {
            purpose: RepsPurpose::RenBatch,
            ids: ids.to_vec(),
            reps: estimates,
        },
    )?;

    // Step 2 (B): loss gradient w.r.t. the estimates, encrypted.
    let msg = channel.recv(Party::B, MessageKind::EstimatedReps)?;
    let Payload::EstimatedReps { ids: got_ids, reps, .. } = msg.payload else {
        unreachable!("recv checked the kind")
    };
    let r_b = b.codes_for(&got_ids)?;
    if r_b.cols() != reps.cols() {
        return Err(Error::shape("estimated reps", r_b.cols(), reps.cols()));
    }
    let loss = ren_loss(&r_b, &reps)?;
    let upstream = grad_wrt_estimate(&r_b, &reps)?;
    let bound = 2f64.powi(UPSTREAM_BOUND_BITS as i32);
    if let Some(&big) = upstream.as_slice().iter().find(|v| !(v.abs() < bound)) {
        return Err(Error::FixedPointOverflow { value: big });
    }
    let enc_upstream = match b.he.mode {
        HeMode::Mock => EncryptedVector::Mock(upstream.as_slice().iter().map(|&u| quantize(u, b.codec.frac_bits)).collect()),
        HeMode::Real => {
            let kp = b
                .keys
                .as_ref()
                .ok_or_else(|| Error::Protocol("party B has no key pair".into()))?;
            let mut cts = Vec::with_capacity(upstream.len());
            for &u in upstream.as_slice() {
                let m = b.codec.encode(u, &kp.public)?;
                cts.push(kp.public.encrypt(&m, &mut b.rng)?);
            }
            EncryptedVector::Real(cts)
        }
    };
    let s2 = channel.send(
        Party::B,
        Payload::EncGradWrtEstimate {
            rows: upstream.rows(),
            cols: upstream.cols(),
            values: enc_upstream,
        },
    )?;

    // Step 3 (A): vector-Jacobian product in ciphertext space.
    let msg = channel.recv(Party::A, MessageKind::EncGradWrtEstimate)?;
    let Payload::EncGradWrtEstimate { rows, cols, values } = msg.payload else {
        unreachable!("recv checked the kind")
    };
    if rows != ids.len() || cols != estimator_mut(a)?.out_dim() {
        return Err(Error::shape("encrypted gradient", format!("{}x?", ids.len()), format!("{rows}x{cols}")));
    }
    let ren = a.ren.as_ref().expect("checked above");
    let param_grad = match &values {
        EncryptedVector::Mock(u) => {
            let (_, cache) = ren.net.forward(&r_a)?;
            let grads = ren.net.param_gradients(&cache, &Matrix::new(rows, cols, u.clone())?)?;
            EncryptedVector::Mock(grads.to_flat())
        }
        EncryptedVector::Real(cts) => {
            let pk = a
                .public_key
                .as_ref()
                .ok_or_else(|| Error::Protocol("party A has no public key".into()))?;
            let jacobians = (0..rows)
                .map(|i| ren.net.per_sample_jacobian(r_a.row(i)))
                .collect::<Result<Vec<_>>>()?;
            EncryptedVector::Real(encrypted_vjp(&jacobians, cts, pk, &a.codec)?)
        }
    };
    let s3 = channel.send(Party::A, Payload::EncParamGrad(param_grad.clone()))?;

    // Step 4 (B): decrypt and return.
    let msg = channel.recv(Party::B, MessageKind::EncParamGrad)?;
    let Payload::EncParamGrad(enc) = msg.payload else {
        unreachable!("recv checked the kind")
    };
    let decrypted = match enc {
        EncryptedVector::Mock(v) => v,
        EncryptedVector::Real(cts) => {
            let kp = b
                .keys
                .as_ref()
                .ok_or_else(|| Error::Protocol("party B has no key pair".into()))?;
            let scale = 2 * b.codec.frac_bits;
            cts.iter()
                .map(|c| Ok(b.codec.decode(&kp.private.decrypt(c)?, &kp.public, scale)))
                .collect::<Result<Vec<f64>>>()?
        }
    };
    let s4 = channel.send(Party::B, Payload::DecParamGrad(decrypted.clone()))?;

    // A applies the update.
    let msg = channel.recv(Party::A, MessageKind::DecParamGrad)?;
    let Payload::DecParamGrad(flat) = msg.payload else {
        unreachable!("recv checked the kind")
    };
    let ren = estimator_mut(a)?;
    let grads = Gradients::from_flat(&ren.net, &flat)?;
    ren.net.sgd_step(&grads, lr)?;

    Ok(RenBatchTranscript {
        batch_index,
        ids: got_ids,
        estimated_reps: reps,
        encrypted_grad_wrt_estimate: values,
        encrypted_param_grad: param_grad,
        decrypted_param_grad: decrypted,
        loss,
        seqs: [s1, s2, s3, s4],
    })
}

/// Trains the estimator on the aligned rows `ids`, which must all be present
/// at both parties. Returns the mean batch loss of each epoch.
pub fn train_ren(
    a: &mut PartyA,
    b: &mut PartyB,
    ids: &[usize],
    opts: &TrainOptions,
    channel: &mut Channel,
) -> Result<Vec<f64>> {
    opts.validate()?;
    if let Some(missing) = ids.iter().find(|&&id| !b.has_row(id)) {
        return Err(Error::Alignment(format!("row {missing} is not in party B's data")));
    }
    if ids.is_empty() {
        return Err(Error::Alignment("no aligned rows to train on".into()));
    }
    a.codes_for(ids)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut trace = Vec::with_capacity(opts.epochs);
    for epoch in 0..opts.epochs {
        let batches = minibatches(ids.len(), opts.batch_size, &mut rng);
        let mut total = 0.0;
        for (j, batch) in batches.iter().enumerate() {
            let batch_ids: Vec<usize> = batch.iter().map(|&i| ids[i]).collect();
            let t = run_batch_update(a, b, j, &batch_ids, opts.lr, channel)?;
            total += t.loss * batch.len() as f64;
        }
        let loss = total / ids.len() as f64;
        check_finite("estimator", epoch, loss)?;
        trace.push(loss);
    }
    Ok(trace)
}

/// Size and solution-space dimension of the linear system party A would
/// have to solve to recover the per-coordinate gradients `u` from the
/// decrypted parameter gradient: `sum_i J_i^T u_i = g`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NullspaceReport {
    pub equations: usize,
    pub unknowns: usize,
    /// `unknowns - equations`, floored at zero.
    pub lower_bound: usize,
    /// Numerical rank, when the system was assembled.
    pub rank: Option<usize>,
    pub nullspace_dim: Option<usize>,
}

impl NullspaceReport {
    /// Counts only, without building the system.
    pub fn from_counts(param_count: usize, m: usize, d_b: usize) -> Self {
        let unknowns = m * d_b;
        Self {
            equations: param_count,
            unknowns,
            lower_bound: unknowns.saturating_sub(param_count),
            rank: None,
            nullspace_dim: None,
        }
    }

    pub fn underdetermined(&self) -> bool {
        self.equations < self.unknowns
    }
}

/// Builds the `K x (m*d)` coefficient matrix `M[k, i*d + j] = J_i[j, k]` and
/// returns its nullspace dimension.
pub fn claim1_nullspace_dim(jacobians: &[Matrix]) -> Result<NullspaceReport> {
    let m = jacobians.len();
    let d = jacobians.first().map_or(0, Matrix::rows);
    let k = check_jacobians(jacobians, m, d)?;
    let mut sys = Matrix::zeros(k, m * d);
    for (i, jac) in jacobians.iter().enumerate() {
        for j in 0..d {
            for (kk, &v) in jac.row(j).iter().enumerate() {
                sys.set(kk, i * d + j, v);
            }
        }
    }
    let rank = numerical_rank(&sys, 1e-10);
    let mut report = NullspaceReport::from_counts(k, m, d);
    report.rank = Some(rank);
    report.nullspace_dim = Some(m * d - rank);
    debug_assert!(m * d - rank >= report.lower_bound);
    Ok(report)
}

/// Rank by Gaussian elimination with partial pivoting; pivots below
/// `rel_tol * ||M||_F` count as zero.
pub fn numerical_rank(m: &Matrix, rel_tol: f64) -> usize {
    let (rows, cols) = m.shape();
    let tol = rel_tol * m.frobenius_sq().sqrt();
    let mut a = m.clone();
    let mut rank = 0;
    for c in 0..cols {
        if rank == rows {
            break;
        }
        let (pivot, best) = (rank..rows)
            .map(|r| (r, a.get(r, c).abs()))
            .fold((rank, -1.0), |acc, x| if x.1 > acc.1 { x } else { acc });
        if best <= tol {
            continue;
        }
        if pivot != rank {
            for cc in c..cols {
                let tmp = a.get(rank, cc);
                a.set(rank, cc, a.get(pivot, cc));
                a.set(pivot, cc, tmp);
            }
        }
        let p = a.get(rank, c);
        for r in rank + 1..rows {
            let f = a.get(r, c) / p;
            if f != 0.0 {
                for cc in c..cols {
                    let v = a.get(r, cc) - f * a.get(rank, cc);
                    a.set(r, cc, v);
                }
            }
        }
        rank += 1;
    }
    rank
}
