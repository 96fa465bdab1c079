//! Private state of the two parties.
//!
//! Party A (active) owns `x^A`, the labels, its autoencoder, the estimation
//! network and the classifier. Party B (passive) owns `x^B` for the rows that
//! have arrived so far, its autoencoder, the perturbation generator and the
//! Paillier key pair. Neither struct has a field that could hold the other
//! party's raw features or models; [`Inventory`] makes that checkable.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classification::ClassifierSnapshot;
use crate::correction::Perturber;
use crate::encoding::AutoEncoder;
use crate::error::{Error, Result};
use crate::estimation::RenModel;
use crate::he::{FixedPointCodec, HeMode, KeyMode, KeyPair, PublicKey};
use crate::matrix::Matrix;
use crate::protocol::Party;
use crate::training::TrainOptions;

/// How the encrypted exchanges are carried out.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeSettings {
    pub mode: HeMode,
    pub modulus_bits: u64,
    pub key_mode: KeyMode,
    pub frac_bits: u32,
}

impl Default for HeSettings {
    fn default() -> Self {
        Self {
            mode: HeMode::Mock,
            modulus_bits: 2048,
            key_mode: KeyMode::Crypto,
            frac_bits: crate::he::DEFAULT_FRAC_BITS,
        }
    }
}

/// What a party currently holds, for structural privacy assertions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Inventory {
    pub role: Party,
    pub rows: usize,
    pub feature_columns: usize,
    pub holds_labels: bool,
    pub holds_public_key: bool,
    pub holds_private_key: bool,
    pub holds_autoencoder: bool,
    pub holds_estimator: bool,
    pub holds_perturber: bool,
    pub holds_classifier: bool,
}

#[derive(Debug)]
pub struct PartyA {
    pub(crate) features: Matrix,
    labels: BTreeMap<usize, usize>,
    class_count: usize,
    pub(crate) autoencoder: Option<AutoEncoder>,
    pub(crate) codes: Option<Matrix>,
    pub(crate) ren: Option<RenModel>,
    pub(crate) public_key: Option<PublicKey>,
    pub(crate) codec: FixedPointCodec,
    pub(crate) classifier: Option<ClassifierSnapshot>,
}

impl PartyA {
    /// `features` covers every example ID (row index); `labels` only the
    /// training rows.
    pub fn new(features: Matrix, labels: BTreeMap<usize, usize>, class_count: usize, frac_bits: u32) -> Result<Self> {
        if let Some((&id, &y)) = labels.iter().find(|(&id, &y)| id >= features.rows() || y >= class_count) {
            return Err(Error::InvalidArgument(format!("label {y} for row {id} out of range")));
        }
        Ok(Self {
            features,
            labels,
            class_count,
            autoencoder: None,
            codes: None,
            ren: None,
            public_key: None,
            codec: FixedPointCodec::new(frac_bits),
            classifier: None,
        })
    }

    pub fn rows(&self) -> usize {
        self.features.rows()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn labels_for(&self, ids: &[usize]) -> Result<Vec<usize>> {
        ids.iter()
            .map(|id| {
                self.labels
                    .get(id)
                    .copied()
                    .ok_or_else(|| Error::Alignment(format!("party A has no label for row {id}")))
            })
            .collect()
    }

    pub fn labelled_ids(&self) -> Vec<usize> {
        self.labels.keys().copied().collect()
    }

    /// Trains `h^A` on `train_rows` and encodes every row.
    pub fn fit_autoencoder<R: Rng + ?Sized>(
        &mut self,
        hidden: usize,
        rep_dim: usize,
        train_rows: &[usize],
        opts: &TrainOptions,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        let mut ae = AutoEncoder::new(self.features.cols(), hidden, rep_dim, rng)?;
        let trace = ae.train(&self.features.select_rows(train_rows), opts)?;
        self.codes = Some(ae.encode(&self.features)?);
        self.autoencoder = Some(ae);
        Ok(trace)
    }

    /// Uses codes produced elsewhere in place of a local autoencoder; one
    /// row per example ID.
    pub fn install_codes(&mut self, codes: Matrix) -> Result<()> {
        if codes.rows() != self.features.rows() {
            return Err(Error::shape("install_codes", self.features.rows(), codes.rows()));
        }
        self.codes = Some(codes);
        Ok(())
    }

    pub fn codes(&self) -> Result<&Matrix> {
        self.codes
            .as_ref()
            .ok_or_else(|| Error::Protocol("party A has not trained its autoencoder".into()))
    }

    pub fn codes_for(&self, ids: &[usize]) -> Result<Matrix> {
        let codes = self.codes()?;
        if let Some(&bad) = ids.iter().find(|&&id| id >= codes.rows()) {
            return Err(Error::Alignment(format!("party A has no row {bad}")));
        }
        Ok(codes.select_rows(ids))
    }

    pub fn install_estimator(&mut self, ren: RenModel) -> Result<()> {
        if let Some(codes) = &self.codes {
            if codes.cols() != ren.in_dim() {
                return Err(Error::shape("install_estimator", codes.cols(), ren.in_dim()));
            }
        }
        self.ren = Some(ren);
        Ok(())
    }

    pub fn estimator(&self) -> Option<&RenModel> {
        self.ren.as_ref()
    }

    pub fn install_public_key(&mut self, pk: PublicKey) {
        self.public_key = Some(pk);
    }

    pub fn classifier(&self) -> Option<&ClassifierSnapshot> {
        self.classifier.as_ref()
    }

    pub fn set_classifier(&mut self, snapshot: ClassifierSnapshot) {
        self.classifier = Some(snapshot);
    }

    pub fn inventory(&self) -> Inventory {
        Inventory {
            role: Party::A,
            rows: self.features.rows(),
            feature_columns: self.features.cols(),
            holds_labels: !self.labels.is_empty(),
            holds_public_key: self.public_key.is_some(),
            holds_private_key: false,
            holds_autoencoder: self.autoencoder.is_some(),
            holds_estimator: self.ren.is_some(),
            holds_perturber: false,
            holds_classifier: self.classifier.is_some(),
        }
    }
}

#[derive(Debug)]
pub struct PartyB {
    ids: Vec<usize>,
    index: HashMap<usize, usize>,
    pub(crate) features: Matrix,
    pub(crate) autoencoder: Option<AutoEncoder>,
    pub(crate) codes: Option<Matrix>,
    pub(crate) perturber: Option<Perturber>,
    pub(crate) keys: Option<KeyPair>,
    pub(crate) he: HeSettings,
    pub(crate) codec: FixedPointCodec,
    pub(crate) rng: ChaCha8Rng,
    /// Estimates received for fitting the perturber, keyed by row ID.
    pub(crate) received_estimates: Option<(Vec<usize>, Matrix)>,
}

impl PartyB {
    pub fn new(feature_columns: usize, he: HeSettings, seed: u64) -> Self {
        Self {
            ids: Vec::new(),
            index: HashMap::new(),
            features: Matrix::zeros(0, feature_columns),
            autoencoder: None,
            codes: None,
            perturber: None,
            keys: None,
            he,
            codec: FixedPointCodec::new(he.frac_bits),
            rng: ChaCha8Rng::seed_from_u64(seed),
            received_estimates: None,
        }
    }

    pub fn he_settings(&self) -> HeSettings {
        self.he
    }

    /// Generates the key pair in real mode and returns the public half.
    pub fn generate_keys(&mut self) -> Result<Option<PublicKey>> {
        if self.he.mode == HeMode::Mock {
            return Ok(None);
        }
        let kp = KeyPair::generate(self.he.modulus_bits, self.he.key_mode, &mut self.rng)?;
        let pk = kp.public.clone();
        self.keys = Some(kp);
        Ok(Some(pk))
    }

    /// Appends newly arrived rows `ΔD_t^B`. Existing codes are extended with
    /// the frozen encoder if one is trained.
    pub fn receive_arrival(&mut self, ids: &[usize], features: &Matrix) -> Result<()> {
        if ids.len() != features.rows() {
            return Err(Error::shape("receive_arrival", ids.len(), features.rows()));
        }
        if let Some(dup) = ids.iter().find(|id| self.index.contains_key(id)) {
            return Err(Error::Alignment(format!("row {dup} already arrived at party B")));
        }
        for &id in ids {
            self.index.insert(id, self.ids.len());
            self.ids.push(id);
        }
        self.features = self.features.vconcat(features)?;
        if let (Some(ae), Some(codes)) = (&self.autoencoder, &self.codes) {
            self.codes = Some(codes.vconcat(&ae.encode(features)?)?);
        }
        Ok(())
    }

    pub fn arrived(&self) -> &[usize] {
        &self.ids
    }

    pub fn has_row(&self, id: usize) -> bool {
        self.index.contains_key(&id)
    }

    pub(crate) fn local_rows(&self, ids: &[usize]) -> Result<Vec<usize>> {
        ids.iter()
            .map(|id| {
                self.index
                    .get(id)
                    .copied()
                    .ok_or_else(|| Error::Alignment(format!("row {id} has not arrived at party B")))
            })
            .collect()
    }

    /// Trains `h^B` on every row that has arrived so far.
    pub fn fit_autoencoder<R: Rng + ?Sized>(
        &mut self,
        hidden: usize,
        rep_dim: usize,
        opts: &TrainOptions,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        let mut ae = AutoEncoder::new(self.features.cols(), hidden, rep_dim, rng)?;
        let trace = ae.train(&self.features, opts)?;
        self.codes = Some(ae.encode(&self.features)?);
        self.autoencoder = Some(ae);
        Ok(trace)
    }

    /// Uses codes produced elsewhere, one row per arrived example in arrival
    /// order. Later arrivals are not encoded.
    pub fn install_codes(&mut self, codes: Matrix) -> Result<()> {
        if codes.rows() != self.ids.len() {
            return Err(Error::shape("install_codes", self.ids.len(), codes.rows()));
        }
        self.codes = Some(codes);
        Ok(())
    }

    pub fn codes_for(&self, ids: &[usize]) -> Result<Matrix> {
        let codes = self
            .codes
            .as_ref()
            .ok_or_else(|| Error::Protocol("party B has not trained its autoencoder".into()))?;
        Ok(codes.select_rows(&self.local_rows(ids)?))
    }

    /// Raw features of arrived rows; used only by the non-federated baselines.
    pub fn features_for(&self, ids: &[usize]) -> Result<Matrix> {
        Ok(self.features.select_rows(&self.local_rows(ids)?))
    }

    pub fn autoencoder(&self) -> Option<&AutoEncoder> {
        self.autoencoder.as_ref()
    }

    pub fn perturber(&self) -> Option<&Perturber> {
        self.perturber.as_ref()
    }

    pub fn inventory(&self) -> Inventory {
        Inventory {
            role: Party::B,
            rows: self.ids.len(),
            feature_columns: self.features.cols(),
            holds_labels: false,
            holds_public_key: self.keys.is_some(),
            holds_private_key: self.keys.is_some(),
            holds_autoencoder: self.autoencoder.is_some(),
            holds_estimator: false,
            holds_perturber: self.perturber.is_some(),
            holds_classifier: false,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arrivals_accumulate_and_reject_duplicates() {
        let mut b = PartyB::new(2, HeSettings::default(), 0);
        b.receive_arrival(&[3, 1], &Matrix::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap())
            .unwrap();
        b.receive_arrival(&[5], &Matrix::row_vector(&[5.0, 6.0])).unwrap();
        assert_eq!(b.arrived(), &[3, 1, 5]);
        assert_eq!(b.features_for(&[5, 3]).unwrap().as_slice(), &[5.0, 6.0, 1.0, 2.0]);
        assert!(b.receive_arrival(&[1], &Matrix::row_vector(&[0.0, 0.0])).is_err());
        assert!(matches!(b.features_for(&[2]), Err(Error::Alignment(_))));
    }

    #[test]
    fn key_material_stays_with_party_b() {
        let he = HeSettings {
            mode: HeMode::Real,
            modulus_bits: 128,
            key_mode: KeyMode::Test,
            frac_bits: 16,
        };
        let mut b = PartyB::new(1, he, 9);
        let pk = b.generate_keys().unwrap().unwrap();
        let mut labels = BTreeMap::new();
        labels.insert(0, 1);
        let mut a = PartyA::new(Matrix::zeros(1, 1), labels, 2, 16).unwrap();
        a.install_public_key(pk);
        let (ia, ib) = (a.inventory(), b.inventory());
        assert!(ia.holds_public_key && !ia.holds_private_key && ia.holds_labels);
        assert!(ib.holds_private_key && !ib.holds_labels && !ib.holds_estimator);
    }

    #[test]
    fn labels_out_of_range_rejected() {
        let mut labels = BTreeMap::new();
        labels.insert(0, 2);
        assert!(PartyA::new(Matrix::zeros(1, 1), labels, 2, 32).is_err());
    }
}
