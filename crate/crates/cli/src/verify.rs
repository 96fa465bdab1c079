//! Self-check suites run by `dynvfl verify`.

use std::collections::BTreeMap;

use dynvfl::classification::{new_classifier, ClassifierObjective};
use dynvfl::estimation::{claim1_nullspace_dim, grad_wrt_estimate, run_batch_update, NullspaceReport, RenModel};
use dynvfl::estimation::DEFAULT_REN_HIDDEN;
use dynvfl::he::{FixedPointCodec, HeMode, KeyMode, KeyPair, MIN_CRYPTO_BITS};
use dynvfl::nn::{chain, finite_diff_check, Activation, MeanSquaredError, Mlp};
use dynvfl::party::{HeSettings, PartyA, PartyB};
use dynvfl::protocol::Channel;
use dynvfl::{Matrix, Result};
use num_bigint::{BigInt, BigUint};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn at_most(name: &str, value: f64, threshold: f64, detail: String) -> Self {
        Self {
            name: name.into(),
            value,
            threshold,
            passed: value <= threshold,
            detail,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub suite: String,
    pub checks: Vec<Check>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("sized")
}

/// Backprop against central differences on random small nets.
pub fn gradcheck(trials: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let smooth = [Activation::Tanh, Activation::Sigmoid, Activation::Identity];
    let mut worst_mse: f64 = 0.0;
    let mut worst_cls: f64 = 0.0;
    for _ in 0..trials {
        let depth = rng.gen_range(1..=3);
        let mut dims = vec![rng.gen_range(1..=6)];
        for _ in 0..depth {
            dims.push(rng.gen_range(1..=6));
        }
        let hidden = smooth[rng.gen_range(0..smooth.len())];
        let output = smooth[rng.gen_range(0..smooth.len())];
        let net = Mlp::new(&chain(&dims, hidden, output), &mut rng)?;
        let n = rng.gen_range(1..=5);
        let x = random_matrix(n, dims[0], &mut rng);
        let target = random_matrix(n, *dims.last().expect("non-empty"), &mut rng);
        worst_mse = worst_mse.max(finite_diff_check(&net, &x, &MeanSquaredError { target: &target })?);

        let classes = rng.gen_range(2..=4);
        let net = new_classifier(dims[0], rng.gen_range(1..=6), classes, rng.gen())?;
        let teacher = random_matrix(n, classes, &mut rng);
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..classes)).collect();
        let weights: Vec<f64> = (0..classes).map(|_| rng.gen_range(0.5..2.0)).collect();
        let obj = ClassifierObjective {
            teacher_logits: Some(&teacher),
            labels: &labels,
            temperature: rng.gen_range(1.0..4.0),
            lambda: rng.gen_range(0.0..1.0),
            class_weights: &weights,
        };
        worst_cls = worst_cls.max(finite_diff_check(&net, &x, &obj)?);
    }
    Ok(SuiteReport {
        suite: "gradcheck".into(),
        checks: vec![
            Check::at_most("mse max relative error", worst_mse, 1e-4, format!("{trials} random nets")),
            Check::at_most(
                "distillation objective max relative error",
                worst_cls,
                1e-4,
                format!("{trials} random classifiers"),
            ),
        ],
    })
}

/// Homomorphic addition and scalar multiplication decrypt exactly;
/// fixed-point dot products match plaintext.
pub fn he(trials: usize, bits: u64, seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mode = if bits >= MIN_CRYPTO_BITS { KeyMode::Crypto } else { KeyMode::Test };
    let kp = KeyPair::generate(bits, mode, &mut rng)?;
    let (pk, sk) = (&kp.public, &kp.private);
    let mut failures = 0usize;
    for _ in 0..trials {
        let (m1, m2, k) = (rng.gen::<u64>(), rng.gen::<u64>(), rng.gen::<u32>());
        let c1 = pk.encrypt(&BigUint::from(m1), &mut rng)?;
        let c2 = pk.encrypt(&BigUint::from(m2), &mut rng)?;
        let sum = sk.decrypt(&pk.add(&c1, &c2)?)?;
        let prod = sk.decrypt(&pk.scalar_mul(&BigUint::from(k), &c1)?)?;
        if sum != BigUint::from(m1) + m2 || prod != BigUint::from(m1) * k {
            failures += 1;
        }
    }
    let codec = FixedPointCodec::new(32);
    let mut worst_dot: f64 = 0.0;
    let dots = (trials / 100).max(5);
    for _ in 0..dots {
        let x: Vec<f64> = (0..100).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let y: Vec<f64> = (0..100).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let mut acc = pk.zero_ciphertext();
        for (&xi, &yi) in x.iter().zip(&y) {
            let c = pk.encrypt(&codec.encode(xi, pk)?, &mut rng)?;
            let k: BigInt = codec.encode_signed(yi)?;
            acc = pk.add(&acc, &pk.scalar_mul_signed(&k, &c, &pk.negate(&c)?)?)?;
        }
        let got = codec.decode(&sk.decrypt(&acc)?, pk, 2 * codec.frac_bits);
        let want: f64 = x.iter().zip(&y).map(|(a, b)| a * b).sum();
        worst_dot = worst_dot.max((got - want).abs());
    }
    Ok(SuiteReport {
        suite: "he".into(),
        checks: vec![
            Check::at_most(
                "add / scalar-mul decryption failures",
                failures as f64,
                0.0,
                format!("{trials} trials, {bits}-bit modulus"),
            ),
            Check::at_most(
                "fixed-point dot product abs error",
                worst_dot,
                1e-6,
                format!("{dots} products of length 100, 32 fractional bits"),
            ),
        ],
    })
}

/// Parameters after `batches` encrypted estimator updates against the same
/// number of plaintext chain-rule updates, on an 8 -> 10 -> 10 -> 8 net.
pub fn protocol(batches: usize, bits: u64, seed: u64) -> Result<SuiteReport> {
    let (n, d, m, lr) = (32, 8, 4, 0.05);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let codes_a = random_matrix(n, d, &mut rng);
    let map = random_matrix(d, d, &mut rng);
    let codes_b = codes_a.matmul(&map)?;
    let ren = RenModel::new(d, d, &[10, 10], &mut rng)?;
    let mut reference = ren.net().clone();

    let he = HeSettings {
        mode: HeMode::Real,
        modulus_bits: bits,
        key_mode: if bits >= MIN_CRYPTO_BITS { KeyMode::Crypto } else { KeyMode::Test },
        frac_bits: 32,
    };
    let labels: BTreeMap<usize, usize> = (0..n).map(|i| (i, i % 2)).collect();
    let mut a = PartyA::new(codes_a.clone(), labels, 2, he.frac_bits)?;
    a.install_codes(codes_a.clone())?;
    a.install_estimator(ren)?;
    let mut b = PartyB::new(d, he, rng.gen());
    let ids: Vec<usize> = (0..n).collect();
    b.receive_arrival(&ids, &codes_b)?;
    b.install_codes(codes_b.clone())?;
    if let Some(pk) = b.generate_keys()? {
        a.install_public_key(pk);
    }
    let mut channel = Channel::new();
    let mut worst: f64 = 0.0;
    for j in 0..batches {
        let batch: Vec<usize> = (0..m).map(|i| (j * m + i) % n).collect();
        run_batch_update(&mut a, &mut b, j, &batch, lr, &mut channel)?;
        let x = codes_a.select_rows(&batch);
        let (out, cache) = reference.forward(&x)?;
        let upstream = grad_wrt_estimate(&codes_b.select_rows(&batch), &out)?;
        let (grads, _) = reference.backward(&cache, &upstream)?;
        reference.sgd_step(&grads, lr)?;
        let got = a.estimator().expect("installed").net().flat_params();
        let diff = got
            .iter()
            .zip(reference.flat_params())
            .map(|(p, q)| (p - q).abs())
            .fold(0.0, f64::max);
        worst = worst.max(diff);
    }
    Ok(SuiteReport {
        suite: "protocol".into(),
        checks: vec![Check::at_most(
            "max parameter gap to plaintext update",
            worst,
            1e-6,
            format!("{batches} batches of {m}, {bits}-bit modulus, {} messages", channel.log().len()),
        )],
    })
}

/// Parameter counts for the default estimator and numerical nullspace
/// dimensions on small systems.
pub fn claim1(batch: usize, rep_dim: usize, seed: u64) -> Result<(SuiteReport, NullspaceReport)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let default = RenModel::new(rep_dim, rep_dim, &DEFAULT_REN_HIDDEN, &mut rng)?;
    let counts = NullspaceReport::from_counts(default.param_count(), batch, rep_dim);
    let mut checks = vec![Check {
        name: "default estimator is underdetermined".into(),
        value: counts.equations as f64,
        threshold: counts.unknowns as f64,
        passed: counts.underdetermined(),
        detail: format!(
            "K = {} vs m*d = {}, nullspace dimension >= {}",
            counts.equations, counts.unknowns, counts.lower_bound
        ),
    }];
    for (m, d, hidden) in [(8, 4, vec![3]), (16, 3, vec![2]), (8, 6, vec![2, 2]), (32, 5, vec![4])] {
        let ren = RenModel::new(d, d, &hidden, &mut rng)?;
        let x = random_matrix(m, d, &mut rng);
        let jacobians = (0..m)
            .map(|i| ren.net().per_sample_jacobian(x.row(i)))
            .collect::<Result<Vec<_>>>()?;
        let r = claim1_nullspace_dim(&jacobians)?;
        let dim = r.nullspace_dim.unwrap_or(0);
        checks.push(Check {
            name: format!("nullspace m={m} d={d} K={}", r.equations),
            value: dim as f64,
            threshold: r.lower_bound as f64,
            passed: r.lower_bound >= 1 && dim >= r.lower_bound,
            detail: format!("rank {}, bound {}", r.rank.unwrap_or(0), r.lower_bound),
        });
    }
    Ok((
        SuiteReport {
            suite: "claim1".into(),
            checks,
        },
        counts,
    ))
}
