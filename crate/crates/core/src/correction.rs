//! Correction of estimated representations by a discrete perturbation:
//! `eps = delta * I(g_p(r~))`, `r^ = r~ + eps`, with `I` the three-level
//! indicator thresholded at +-0.5.
//!
//! `I` has zero derivative almost everywhere, so `g_p` is trained with a
//! straight-through estimator: the backward pass treats `I` as the identity
//! inside `[-1, 1]` and as flat outside it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{mean_row_sq_dist, Matrix};
use crate::nn::{chain, Activation, Mlp};
use crate::party::{PartyA, PartyB};
use crate::protocol::{Channel, MessageKind, Party, Payload, RepsPurpose};
use crate::training::{check_finite, minibatches, TrainOptions};

pub const DEFAULT_PERTURBER_HIDDEN: usize = 100;

const BAND: f64 = 0.5;

/// `-1` below `-0.5`, `1` above `0.5`, `0` on the closed band between.
pub fn indicator(x: &Matrix) -> Matrix {
    x.map(indicator_scalar)
}

fn indicator_scalar(v: f64) -> f64 {
    if v > BAND {
        1.0
    } else if v < -BAND {
        -1.0
    } else {
        0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Perturber {
    net: Mlp,
    delta: f64,
}

impl Perturber {
    /// `dim -> hidden (tanh) -> dim (identity)`. The output layer starts at
    /// zero so the untrained corrector leaves estimates unchanged.
    pub fn new<R: Rng + ?Sized>(dim: usize, hidden: usize, delta: f64, rng: &mut R) -> Result<Self> {
        let mut net = Mlp::new(&chain(&[dim, hidden, dim], Activation::Tanh, Activation::Identity), rng)?;
        let out = net.layers_mut().last_mut().expect("two layers");
        out.weight = Matrix::zeros(out.weight.rows(), out.weight.cols());
        out.bias.iter_mut().for_each(|b| *b = 0.0);
        Self::from_net(net, delta)
    }

    pub fn from_net(net: Mlp, delta: f64) -> Result<Self> {
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(Error::InvalidArgument(format!("perturbation magnitude must be positive, got {delta}")));
        }
        if net.in_dim() != net.out_dim() {
            return Err(Error::shape("Perturber", net.in_dim(), net.out_dim()));
        }
        Ok(Self { net, delta })
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// Returns `(eps, r_est + eps)`.
    pub fn perturb(&self, r_est: &Matrix) -> Result<(Matrix, Matrix)> {
        let eps = self.epsilon(r_est)?;
        let corrected = r_est.add(&eps)?;
        Ok((eps, corrected))
    }

    pub fn epsilon(&self, r_est: &Matrix) -> Result<Matrix> {
        let z = self.net.predict(r_est)?;
        Ok(indicator(&z).scale(self.delta))
    }

    /// Mini-batch SGD with the straight-through gradient. The trace holds the
    /// full-data loss before training and after each epoch; the parameters
    /// kept are those of the lowest entry, so training never makes the
    /// correction worse on the pairs it saw.
    pub fn train(&mut self, r_true: &Matrix, r_est: &Matrix, opts: &TrainOptions) -> Result<Vec<f64>> {
        opts.validate()?;
        r_true.ensure_same_shape("Perturber::train", r_est)?;
        if r_true.cols() != self.net.in_dim() {
            return Err(Error::shape("Perturber::train", self.net.in_dim(), r_true.cols()));
        }
        if r_true.rows() == 0 {
            return Err(Error::InvalidArgument("perturber training data is empty".into()));
        }
        let full_loss = |p: &Perturber| -> Result<f64> { perturber_loss(r_true, &p.perturb(r_est)?.1) };
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut best = (full_loss(self)?, self.net.clone());
        let mut trace = vec![best.0];
        for epoch in 0..opts.epochs {
            for batch in minibatches(r_true.rows(), opts.batch_size, &mut rng) {
                let est = r_est.select_rows(&batch);
                let target = r_true.select_rows(&batch);
                let (z, cache) = self.net.forward(&est)?;
                let n = batch.len() as f64;
                let delta = self.delta;
                // dL/deps = -2 (r - r^) / n, then through eps = delta * I(z)
                let corrected = est.add(&indicator(&z).scale(delta))?;
                let d_eps = corrected.zip_map(&target, |c, t| 2.0 * (c - t) / n)?;
                let upstream = d_eps.zip_map(&z, |g, zv| if zv.abs() <= 1.0 { g * delta } else { 0.0 })?;
                let grads = self.net.param_gradients(&cache, &upstream)?;
                self.net.sgd_step(&grads, opts.lr)?;
            }
            let loss = full_loss(self)?;
            check_finite("perturber", epoch, loss)?;
            trace.push(loss);
            if loss < best.0 {
                best = (loss, self.net.clone());
            }
        }
        self.net = best.1;
        Ok(trace)
    }
}

/// `(1/N) * sum_i ||r_i - r^_i||^2`.
pub fn perturber_loss(r_true: &Matrix, r_corrected: &Matrix) -> Result<f64> {
    mean_row_sq_dist(r_true, r_corrected, "perturber_loss")
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturberSettings {
    pub delta: f64,
    pub hidden: usize,
    pub train: TrainOptions,
}

/// Party A sends estimates for the aligned rows `ids`; party B fits its
/// perturbation generator against its own codes for those rows.
pub fn fit_perturber<R: Rng + ?Sized>(
    a: &PartyA,
    b: &mut PartyB,
    ids: &[usize],
    settings: &PerturberSettings,
    channel: &mut Channel,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let ren = a
        .estimator()
        .ok_or_else(|| Error::Protocol("party A has no estimation network".into()))?;
    let estimates = ren.estimate(&a.codes_for(ids)?)?;
    channel.send(
        Party::A,
        Payload::EstimatedReps {
            purpose: RepsPurpose::PerturberFit,
            ids: ids.to_vec(),
            reps: estimates,
        },
    )?;

    let msg = channel.recv(Party::B, MessageKind::EstimatedReps)?;
    let Payload::EstimatedReps { ids, reps, .. } = msg.payload else {
        unreachable!("recv checked the kind")
    };
    let r_true = b.codes_for(&ids)?;
    let mut perturber = Perturber::new(reps.cols(), settings.hidden, settings.delta, rng)?;
    let trace = perturber.train(&r_true, &reps, &settings.train)?;
    b.perturber = Some(perturber);
    b.received_estimates = Some((ids, reps));
    Ok(trace)
}

/// Corrected representations `r^B` for any rows party A holds. Party B
/// contributes only `eps`; without a fitted perturber it returns zeros.
pub fn correct(a: &PartyA, b: &PartyB, ids: &[usize], channel: &mut Channel) -> Result<Matrix> {
    let ren = a
        .estimator()
        .ok_or_else(|| Error::Protocol("party A has no estimation network".into()))?;
    let estimates = ren.estimate(&a.codes_for(ids)?)?;
    channel.send(
        Party::A,
        Payload::EstimatedReps {
            purpose: RepsPurpose::Correction,
            ids: ids.to_vec(),
            reps: estimates.clone(),
        },
    )?;

    let msg = channel.recv(Party::B, MessageKind::EstimatedReps)?;
    let Payload::EstimatedReps { ids: got, reps, .. } = msg.payload else {
        unreachable!("recv checked the kind")
    };
    let epsilon = match &b.perturber {
        Some(p) => p.epsilon(&reps)?,
        None => Matrix::zeros(reps.rows(), reps.cols()),
    };
    channel.send(Party::B, Payload::Perturbation { ids: got, epsilon })?;

    let msg = channel.recv(Party::A, MessageKind::Perturbation)?;
    let Payload::Perturbation { epsilon, .. } = msg.payload else {
        unreachable!("recv checked the kind")
    };
    estimates.add(&epsilon)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn indicator_thresholds() {
        let x = Matrix::row_vector(&[0.6, -0.7, 0.3, -0.5, 0.5, 0.0]);
        assert_eq!(indicator(&x).as_slice(), &[1.0, -1.0, 0.0, 0.0, 0.0, 0.0]);
        assert!(indicator(&Matrix::zeros(2, 3)).as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn untrained_perturber_is_identity() {
        let p = Perturber::new(4, 8, 1.0, &mut rng(0)).unwrap();
        let r = Matrix::filled(3, 4, 0.9);
        let (eps, corrected) = p.perturb(&r).unwrap();
        assert!(eps.as_slice().iter().all(|&v| v == 0.0));
        assert_eq!(corrected, r);
    }

    #[test]
    fn single_component_shift() {
        // one identity layer with bias 0.9 on component 0
        let mut net = Mlp::zeros(&chain(&[2, 2], Activation::Identity, Activation::Identity)).unwrap();
        net.layers_mut()[0].bias = vec![0.9, 0.0];
        let p = Perturber::from_net(net, 1.0).unwrap();
        let (_, corrected) = p.perturb(&Matrix::row_vector(&[0.25, 0.25])).unwrap();
        assert_eq!(corrected.as_slice(), &[1.25, 0.25]);
    }

    #[test]
    fn nonpositive_delta_rejected() {
        assert!(Perturber::new(2, 2, 0.0, &mut rng(0)).is_err());
        assert!(Perturber::new(2, 2, -1.0, &mut rng(0)).is_err());
    }

    #[test]
    fn loss_examples() {
        let r = Matrix::row_vector(&[1.0, 2.0, 3.0]);
        assert_eq!(perturber_loss(&r, &r).unwrap(), 0.0);
        let shifted = Matrix::row_vector(&[1.6, 2.0, 3.0]);
        assert!((perturber_loss(&r, &shifted).unwrap() - 0.36).abs() < 1e-12);
        let est = Matrix::row_vector(&[0.0, 1.0, 1.0]);
        assert_eq!(
            perturber_loss(&r, &est).unwrap(),
            crate::estimation::ren_loss(&r, &est).unwrap()
        );
    }

    fn sign_pattern_task(seed: u64, n: usize, d: usize, delta: f64) -> (Matrix, Matrix, Vec<f64>) {
        let mut g = rng(seed);
        let pattern: Vec<f64> = (0..d).map(|_| g.gen_range(-1i32..=1) as f64).collect();
        let est = Matrix::new(n, d, (0..n * d).map(|_| g.gen_range(-1.0..1.0)).collect()).unwrap();
        let mut truth = est.clone();
        for row in 0..n {
            for (v, s) in truth.row_mut(row).iter_mut().zip(&pattern) {
                *v += delta * s;
            }
        }
        (truth, est, pattern)
    }

    #[test]
    fn recovers_constructed_sign_pattern() {
        for seed in 0..3 {
            let (truth, est, pattern) = sign_pattern_task(seed, 200, 10, 1.0);
            let mut p = Perturber::new(10, 20, 1.0, &mut rng(seed)).unwrap();
            let opts = TrainOptions {
                epochs: 30,
                batch_size: 32,
                lr: 0.05,
                seed,
            };
            let trace = p.train(&truth, &est, &opts).unwrap();
            let (eps, _) = p.perturb(&est).unwrap();
            let hits = (0..200)
                .flat_map(|i| (0..10).map(move |j| (i, j)))
                .filter(|&(i, j)| eps.get(i, j) == pattern[j])
                .count();
            assert!(hits as f64 >= 0.9 * 2000.0, "seed {seed}: {hits}/2000");
            let last = perturber_loss(&truth, &p.perturb(&est).unwrap().1).unwrap();
            assert!(last <= trace[0]);
        }
    }

    #[test]
    fn zero_lr_keeps_parameters() {
        let (truth, est, _) = sign_pattern_task(1, 20, 3, 1.0);
        let mut p = Perturber::new(3, 5, 1.0, &mut rng(1)).unwrap();
        let before = p.clone();
        let trace = p
            .train(
                &truth,
                &est,
                &TrainOptions {
                    epochs: 3,
                    batch_size: 8,
                    lr: 0.0,
                    seed: 0,
                },
            )
            .unwrap();
        assert_eq!(p, before);
        assert!(trace.windows(2).all(|w| w[0] == w[1]));
    }

    proptest! {
        #[test]
        fn perturbation_bounded_by_delta(
            values in proptest::collection::vec(-5.0f64..5.0, 12),
            delta in 0.01f64..3.0,
            seed in 0u64..1000,
        ) {
            let mut g = rng(seed);
            let net = Mlp::new(&chain(&[4, 6, 4], Activation::Tanh, Activation::Identity), &mut g).unwrap();
            let p = Perturber::from_net(net, delta).unwrap();
            let r = Matrix::new(3, 4, values).unwrap();
            let (eps, corrected) = p.perturb(&r).unwrap();
            prop_assert!(corrected.sub(&r).unwrap().max_abs() <= delta + 1e-12);
            prop_assert!(eps.as_slice().iter().all(|&e| e == 0.0 || e == delta || e == -delta));
        }

        #[test]
        fn indicator_is_stable_on_scaled_patterns(
            signs in proptest::collection::vec(-1i32..=1, 1..20),
            delta in 0.51f64..5.0,
        ) {
            let p = Matrix::row_vector(&signs.iter().map(|&s| s as f64).collect::<Vec<_>>());
            let again = indicator(&indicator(&p.scale(delta)));
            prop_assert_eq!(again, p);
        }
    }
}
