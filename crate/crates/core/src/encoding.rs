//! Per-party autoencoders that turn raw features into fixed-width codes.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{mean_row_sq_dist, Matrix};
use crate::nn::{chain, Activation, Mlp};
use crate::training::{check_finite, minibatches, TrainOptions};

const CHECKPOINT_FORMAT: &str = "dynvfl-autoencoder";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AutoEncoder {
    encoder: Mlp,
    decoder: Mlp,
    rep_dim: usize,
}

impl AutoEncoder {
    /// `input -> hidden (tanh) -> rep_dim (identity)` with a mirrored decoder.
    pub fn new<R: Rng + ?Sized>(input_dim: usize, hidden: usize, rep_dim: usize, rng: &mut R) -> Result<Self> {
        let encoder = Mlp::new(&chain(&[input_dim, hidden, rep_dim], Activation::Tanh, Activation::Identity), rng)?;
        let decoder = Mlp::new(&chain(&[rep_dim, hidden, input_dim], Activation::Tanh, Activation::Identity), rng)?;
        Self::from_parts(encoder, decoder)
    }

    pub fn from_parts(encoder: Mlp, decoder: Mlp) -> Result<Self> {
        let rep_dim = encoder.out_dim();
        if decoder.in_dim() != rep_dim {
            return Err(Error::shape("AutoEncoder decoder input", rep_dim, decoder.in_dim()));
        }
        if decoder.out_dim() != encoder.in_dim() {
            return Err(Error::shape("AutoEncoder decoder output", encoder.in_dim(), decoder.out_dim()));
        }
        Ok(Self {
            encoder,
            decoder,
            rep_dim,
        })
    }

    pub fn rep_dim(&self) -> usize {
        self.rep_dim
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.in_dim()
    }

    pub fn encoder(&self) -> &Mlp {
        &self.encoder
    }

    pub fn decoder(&self) -> &Mlp {
        &self.decoder
    }

    pub fn encode(&self, x: &Matrix) -> Result<Matrix> {
        self.encoder.predict(x)
    }

    pub fn decode(&self, r: &Matrix) -> Result<Matrix> {
        self.decoder.predict(r)
    }

    pub fn reconstruct(&self, x: &Matrix) -> Result<Matrix> {
        self.decode(&self.encode(x)?)
    }

    /// Mini-batch SGD on the reconstruction loss. The returned trace holds the
    /// full-data loss before training followed by one entry per epoch.
    pub fn train(&mut self, data: &Matrix, opts: &TrainOptions) -> Result<Vec<f64>> {
        opts.validate()?;
        if data.rows() == 0 {
            return Err(Error::InvalidArgument("autoencoder training data is empty".into()));
        }
        if data.cols() != self.input_dim() {
            return Err(Error::shape("AutoEncoder::train", self.input_dim(), data.cols()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut trace = Vec::with_capacity(opts.epochs + 1);
        trace.push(ae_loss(data, &self.reconstruct(data)?)?);
        for epoch in 0..opts.epochs {
            for batch in minibatches(data.rows(), opts.batch_size, &mut rng) {
                let x = data.select_rows(&batch);
                let (code, enc_cache) = self.encoder.forward(&x)?;
                let (recon, dec_cache) = self.decoder.forward(&code)?;
                let n = x.rows() as f64;
                let upstream = recon.zip_map(&x, |r, t| 2.0 * (r - t) / n)?;
                let (dec_grads, code_grad) = self.decoder.backward(&dec_cache, &upstream)?;
                let enc_grads = self.encoder.param_gradients(&enc_cache, &code_grad)?;
                self.decoder.sgd_step(&dec_grads, opts.lr)?;
                self.encoder.sgd_step(&enc_grads, opts.lr)?;
            }
            let loss = ae_loss(data, &self.reconstruct(data)?)?;
            check_finite("autoencoder", epoch, loss)?;
            trace.push(loss);
        }
        Ok(trace)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let ckpt = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            model: self.clone(),
        };
        std::fs::write(path, serde_json::to_vec(&ckpt)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_slice(&std::fs::read(path)?)?;
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::InvalidArgument(format!(
                "unsupported checkpoint {} v{}",
                ckpt.format, ckpt.version
            )));
        }
        Self::from_parts(ckpt.model.encoder, ckpt.model.decoder)
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    model: AutoEncoder,
}

/// Mean over samples of the squared reconstruction error.
pub fn ae_loss(x: &Matrix, reconstruction: &Matrix) -> Result<f64> {
    mean_row_sq_dist(x, reconstruction, "ae_loss")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Layer, LayerSpec};

    fn identity_layer(n: usize) -> Mlp {
        Mlp::from_layers(vec![Layer {
            weight: Matrix::identity(n),
            bias: vec![0.0; n],
            activation: Activation::Identity,
        }])
        .unwrap()
    }

    fn opts(epochs: usize, lr: f64) -> TrainOptions {
        TrainOptions {
            epochs,
            batch_size: 16,
            lr,
            seed: 3,
        }
    }

    #[test]
    fn identity_encoder_and_decoder() {
        let ae = AutoEncoder::from_parts(identity_layer(3), identity_layer(3)).unwrap();
        let x = Matrix::new(2, 3, vec![1., -2., 3., 0.5, 0., 9.]).unwrap();
        assert_eq!(ae.encode(&x).unwrap(), x);
        assert_eq!(ae.decode(&x).unwrap(), x);
    }

    #[test]
    fn empty_batch_encodes_to_empty() {
        let ae = AutoEncoder::new(4, 5, 3, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(ae.encode(&Matrix::zeros(0, 4)).unwrap().shape(), (0, 3));
    }

    #[test]
    fn shape_roundtrip_and_mismatch() {
        let ae = AutoEncoder::new(4, 5, 3, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let x = Matrix::filled(6, 4, 0.3);
        assert_eq!(ae.reconstruct(&x).unwrap().shape(), (6, 4));
        assert!(ae.encode(&Matrix::zeros(1, 5)).is_err());
        assert!(AutoEncoder::from_parts(identity_layer(3), identity_layer(2)).is_err());
    }

    #[test]
    fn paper_width_for_bcw() {
        let ae = AutoEncoder::new(32, 500, 200, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(ae.encode(&Matrix::zeros(3, 32)).unwrap().cols(), 200);
    }

    #[test]
    fn loss_examples() {
        let a = Matrix::new(1, 2, vec![1., 0.]).unwrap();
        let b = Matrix::zeros(1, 2);
        assert_eq!(ae_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(ae_loss(&a, &b).unwrap(), 1.0);
        let x = Matrix::new(2, 2, vec![1., 0., 1., 1.41421356237309515]).unwrap();
        assert!((ae_loss(&x, &Matrix::zeros(2, 2)).unwrap() - 2.0).abs() < 1e-12);
        assert!(ae_loss(&a, &Matrix::zeros(1, 3)).is_err());
    }

    #[test]
    fn zero_lr_keeps_parameters() {
        let mut ae = AutoEncoder::new(3, 4, 2, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let before = ae.clone();
        let x = Matrix::filled(10, 3, 0.7);
        let trace = ae.train(&x, &opts(3, 0.0)).unwrap();
        assert_eq!(ae, before);
        assert!(trace.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn overfits_constant_sample() {
        let mut ae = AutoEncoder::new(4, 8, 3, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let row = [0.5, -0.25, 1.0, 0.1];
        let x = Matrix::from_rows(&vec![row; 50]).unwrap();
        let trace = ae.train(&x, &opts(200, 0.05)).unwrap();
        assert!(trace.last().unwrap() < &1e-4, "{:?}", trace.last());
    }

    #[test]
    fn linear_bottleneck_reaches_pca_floor() {
        // 2-D data compressed to 1 dimension: the best linear reconstruction
        // error is the smaller eigenvalue of the population covariance.
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let rows: Vec<[f64; 2]> = (0..400)
            .map(|_| {
                let a: f64 = rng.gen_range(-1.0..1.0);
                let b: f64 = rng.gen_range(-1.0..1.0);
                [1.0 + 1.5 * a + 0.2 * b, -0.5 + 0.6 * a - 0.3 * b]
            })
            .collect();
        let x = Matrix::from_rows(&rows).unwrap();
        let n = rows.len() as f64;
        let mean = [rows.iter().map(|r| r[0]).sum::<f64>() / n, rows.iter().map(|r| r[1]).sum::<f64>() / n];
        let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
        for r in &rows {
            let (dx, dy) = (r[0] - mean[0], r[1] - mean[1]);
            sxx += dx * dx / n;
            sxy += dx * dy / n;
            syy += dy * dy / n;
        }
        let tr = sxx + syy;
        let det = sxx * syy - sxy * sxy;
        let floor = tr / 2.0 - (tr * tr / 4.0 - det).sqrt();

        let specs = |a, b| [LayerSpec::new(a, b, Activation::Identity)];
        let enc = Mlp::new(&specs(2, 1), &mut rng).unwrap();
        let dec = Mlp::new(&specs(1, 2), &mut rng).unwrap();
        let mut ae = AutoEncoder::from_parts(enc, dec).unwrap();
        let trace = ae.train(&x, &TrainOptions { epochs: 300, batch_size: 32, lr: 0.05, seed: 7 }).unwrap();
        let last = *trace.last().unwrap();
        assert!(last >= floor - 1e-9, "below floor: {last} < {floor}");
        assert!(last <= floor * 1.02 + 1e-6, "{last} vs floor {floor}");

        // with a 1-D input and 1-D code the floor is zero
        let ones: Vec<[f64; 1]> = rows.iter().map(|r| [r[0]]).collect();
        let x1 = Matrix::from_rows(&ones).unwrap();
        let mut ae1 = AutoEncoder::from_parts(
            Mlp::new(&specs(1, 1), &mut rng).unwrap(),
            Mlp::new(&specs(1, 1), &mut rng).unwrap(),
        )
        .unwrap();
        let t1 = ae1.train(&x1, &TrainOptions { epochs: 300, batch_size: 32, lr: 0.05, seed: 8 }).unwrap();
        assert!(*t1.last().unwrap() < 1e-6);
    }

    #[test]
    fn training_on_standardized_data_does_not_blow_up() {
        let ds = crate::data::generate_synthetic(&crate::data::SyntheticSpec {
            samples: 300,
            features: 10,
            ..Default::default()
        })
        .unwrap();
        let mut ae = AutoEncoder::new(10, 32, 16, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let trace = ae.train(&ds.features, &opts(30, 0.01)).unwrap();
        assert!(trace.last().unwrap() <= &trace[0]);
        for w in trace.windows(2) {
            assert!(w[1] <= w[0] * 1.10);
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let ae = AutoEncoder::new(3, 4, 2, &mut ChaCha8Rng::seed_from_u64(10)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ae.json");
        ae.save(&p).unwrap();
        assert_eq!(AutoEncoder::load(&p).unwrap(), ae);
    }
}
