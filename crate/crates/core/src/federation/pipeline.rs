//! End-to-end orchestration of one federated run.
//!
//! Stages, in order: local autoencoders at both parties, estimator training
//! over the encrypted-gradient protocol on the first overlap, perturber
//! fitting at party B, then one classifier update per timestamp for each
//! requested strategy, evaluated on a fixed held-out set.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classification::{
    concat_reps, fit_classifier, inverse_frequency_weights, new_classifier, train_classifier_t, ClassifierSnapshot,
    DistillConfig,
};
use crate::correction::{correct, fit_perturber, PerturberSettings};
use crate::data::{balanced_holdout, macro_prf, Dataset, EvalReport, Fold, Standardizer};
use crate::error::{Error, Result};
use crate::estimation::{ren_loss, train_ren, RenModel};
use crate::matrix::Matrix;
use crate::party::{Inventory, PartyA, PartyB};
use crate::protocol::{Channel, LogEntry, MessageKind, PrivacyAuditor};
use crate::training::{derive_seed, TrainOptions};

use super::config::{ClassWeighting, PipelineConfig};
use super::split::VerticalSplit;
use super::timeline::{build_timeline, StreamMode, Timeline};

/// How party A's classifier absorbs each new arrival.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Start from the previous classifier and train on the new rows with
    /// distillation against it plus cross-entropy.
    Distill,
    /// Fresh classifier on the new rows only.
    Retrain,
    /// Previous classifier, cross-entropy on the new rows, reduced rate.
    Finetune,
    /// Fresh classifier on every row seen so far.
    Joint,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Distill, Strategy::Retrain, Strategy::Finetune, Strategy::Joint];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Distill => "distill",
            Strategy::Retrain => "retrain",
            Strategy::Finetune => "finetune",
            Strategy::Joint => "joint",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown strategy `{s}`")))
    }
}

/// Standardized data with a fixed train/test partition and arrival schedule.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub dataset: String,
    pub fold: usize,
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub class_count: usize,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub timeline: Timeline,
}

impl Scenario {
    fn standardized(dataset: &Dataset, train: &[usize]) -> Result<Matrix> {
        Standardizer::fit(&dataset.features, train)?.transform(&dataset.features)
    }

    /// Balanced held-out test set, the rest streamed per `mode`.
    pub fn dynamic(dataset: &Dataset, mode: StreamMode, t_max: usize, cfg: &PipelineConfig) -> Result<Self> {
        let (train, test) = balanced_holdout(
            &dataset.labels,
            dataset.class_count,
            cfg.test_fraction,
            derive_seed(cfg.seed, "holdout"),
        )?;
        let timeline = build_timeline(
            mode,
            t_max,
            &train,
            &dataset.labels,
            dataset.class_count,
            derive_seed(cfg.seed, "timeline"),
        )?;
        Ok(Self {
            dataset: dataset.name.clone(),
            fold: 0,
            features: Self::standardized(dataset, &train)?,
            labels: dataset.labels.clone(),
            class_count: dataset.class_count,
            train,
            test,
            timeline,
        })
    }

    /// One cross-validation fold with every training row present at `t = 0`.
    pub fn static_fold(dataset: &Dataset, fold: &Fold, index: usize) -> Result<Self> {
        let timeline = build_timeline(StreamMode::Uniform, 0, &fold.train, &dataset.labels, dataset.class_count, 0)?;
        Ok(Self {
            dataset: dataset.name.clone(),
            fold: index,
            features: Self::standardized(dataset, &fold.train)?,
            labels: dataset.labels.clone(),
            class_count: dataset.class_count,
            train: fold.train.clone(),
            test: fold.test.clone(),
            timeline,
        })
    }

    pub fn test_labels(&self) -> Vec<usize> {
        self.test.iter().map(|&i| self.labels[i]).collect()
    }
}

/// Metrics of one strategy after the update at one timestamp.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategyRecord {
    pub timestamp: usize,
    pub class_ratio: String,
    pub strategy: String,
    /// Rows the update trained on.
    pub train_rows: usize,
    pub update_seconds: f64,
    pub report: EvalReport,
    /// Training objective before the first epoch, then the mean batch loss
    /// of each epoch.
    pub loss_trace: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTraces {
    pub autoencoder_a: Vec<f64>,
    pub autoencoder_b: Vec<f64>,
    pub estimator: Vec<f64>,
    pub perturber: Vec<f64>,
    /// Mean squared gap to party B's codes on the first overlap, before and
    /// after correction.
    pub estimate_gap: f64,
    pub corrected_gap: f64,
}

/// What the run-level privacy check saw.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrivacySummary {
    pub messages: usize,
    pub kinds: BTreeMap<String, usize>,
    pub raw_rows_watched: usize,
    pub party_a_holds_private_key: bool,
    pub party_b_holds_estimator: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunOutcome {
    pub dataset: String,
    pub fold: usize,
    pub seed: u64,
    pub records: Vec<StrategyRecord>,
    pub traces: StageTraces,
    pub privacy: PrivacySummary,
    #[serde(skip)]
    pub messages: Vec<LogEntry>,
    pub inventory_a: Inventory,
    pub inventory_b: Inventory,
}

impl RunOutcome {
    pub fn record(&self, strategy: Strategy, timestamp: usize) -> Option<&StrategyRecord> {
        self.records
            .iter()
            .find(|r| r.timestamp == timestamp && r.strategy == strategy.name())
    }
}

/// Two parties, their channel and the data that drives them.
struct Federation<'a> {
    cfg: &'a PipelineConfig,
    scenario: &'a Scenario,
    b_raw: Matrix,
    a: PartyA,
    b: PartyB,
    channel: Channel,
    traces: StageTraces,
    raw_rows_watched: usize,
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.in_stage(name))
}

impl<'a> Federation<'a> {
    fn opts(&self, epochs: usize, lr: f64, stage: &str) -> TrainOptions {
        TrainOptions {
            epochs,
            batch_size: self.cfg.batch_size,
            lr,
            seed: derive_seed(self.cfg.seed, stage),
        }
    }

    fn setup(cfg: &'a PipelineConfig, scenario: &'a Scenario) -> Result<Self> {
        stage("config", cfg.validate())?;
        let split = stage("split", VerticalSplit::new(scenario.features.cols(), cfg.split_fraction))?;
        let a_raw = split.party_a(&scenario.features);
        let b_raw = split.party_b(&scenario.features);
        let mut auditor = PrivacyAuditor::new();
        auditor.watch(&a_raw);
        auditor.watch(&b_raw);
        let labels: BTreeMap<usize, usize> = scenario.train.iter().map(|&i| (i, scenario.labels[i])).collect();
        let a = PartyA::new(a_raw.clone(), labels, scenario.class_count, cfg.he.frac_bits)?;
        let b = PartyB::new(b_raw.cols(), cfg.he, derive_seed(cfg.seed, "party-b"));
        let mut fed = Self {
            cfg,
            scenario,
            b_raw,
            a,
            b,
            channel: Channel::with_auditor(auditor),
            traces: StageTraces::default(),
            raw_rows_watched: 2 * a_raw.rows(),
        };
        let first = scenario.timeline.delta(0).to_vec();
        fed.b.receive_arrival(&first, &fed.b_raw.select_rows(&first))?;
        if let Some(pk) = stage("keygen", fed.b.generate_keys())? {
            fed.a.install_public_key(pk);
        }
        fed.fit_autoencoders()?;
        fed.fit_estimators(&first)?;
        Ok(fed)
    }

    fn fit_autoencoders(&mut self) -> Result<()> {
        let cfg = self.cfg;
        let opts_a = self.opts(cfg.ae_epochs, cfg.ae_lr(), "autoencoder-a");
        let opts_b = self.opts(cfg.ae_epochs, cfg.ae_lr(), "autoencoder-b");
        let mut rng_a = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "init-autoencoder-a"));
        let mut rng_b = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "init-autoencoder-b"));
        self.traces.autoencoder_a = stage(
            "autoencoder",
            self.a
                .fit_autoencoder(cfg.ae_hidden, cfg.rep_dim, &self.scenario.train, &opts_a, &mut rng_a),
        )?;
        self.traces.autoencoder_b = stage(
            "autoencoder",
            self.b.fit_autoencoder(cfg.ae_hidden, cfg.rep_dim, &opts_b, &mut rng_b),
        )?;
        if !self.channel.log().is_empty() {
            return Err(Error::Protocol("messages exchanged during local autoencoder training".into()));
        }
        Ok(())
    }

    /// Estimator and perturber on the aligned rows `ids`.
    fn fit_estimators(&mut self, ids: &[usize]) -> Result<()> {
        let cfg = self.cfg;
        if self.a.estimator().is_none() {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "init-estimator"));
            let ren = RenModel::new(cfg.rep_dim, cfg.rep_dim, &cfg.ren_hidden, &mut rng)?;
            self.a.install_estimator(ren)?;
        }
        let opts = self.opts(cfg.ren_epochs, cfg.ren_lr(), "estimator");
        let trace = stage("estimator", train_ren(&mut self.a, &mut self.b, ids, &opts, &mut self.channel))?;
        self.traces.estimator.extend(trace);

        let settings = PerturberSettings {
            delta: cfg.delta,
            hidden: cfg.perturber_hidden,
            train: self.opts(cfg.perturber_epochs, cfg.perturber_lr(), "perturber"),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "init-perturber"));
        self.traces.perturber = stage(
            "perturber",
            fit_perturber(&self.a, &mut self.b, ids, &settings, &mut self.channel, &mut rng),
        )?;
        // Simulator-side diagnostic: neither party sees both sides of this.
        let truth = self.b.codes_for(ids)?;
        let est = self.a.estimator().expect("installed").estimate(&self.a.codes_for(ids)?)?;
        self.traces.estimate_gap = ren_loss(&truth, &est)?;
        let corrected = self.b.perturber().expect("fitted").perturb(&est)?.1;
        self.traces.corrected_gap = ren_loss(&truth, &corrected)?;
        Ok(())
    }

    /// `[r^A | r^B-hat]` for `ids`, with the correction exchanged over the channel.
    fn corrected_inputs(&mut self, ids: &[usize]) -> Result<Matrix> {
        let r_b = stage("correction", correct(&self.a, &self.b, ids, &mut self.channel))?;
        concat_reps(&self.a.codes_for(ids)?, &r_b)
    }

    fn class_weights(&self) -> Vec<f64> {
        match self.cfg.class_weighting {
            ClassWeighting::Uniform => vec![1.0; self.scenario.class_count],
            ClassWeighting::InverseFrequency => {
                let y: Vec<usize> = self.scenario.train.iter().map(|&i| self.scenario.labels[i]).collect();
                inverse_frequency_weights(&y, self.scenario.class_count)
            }
        }
    }

    fn privacy_summary(&self) -> Result<PrivacySummary> {
        let mut kinds = BTreeMap::new();
        for e in self.channel.log() {
            *kinds.entry(format!("{:?}", e.kind)).or_insert(0) += 1;
        }
        let allowed: Vec<String> = MessageKind::ALL.iter().map(|k| format!("{k:?}")).collect();
        if let Some(k) = kinds.keys().find(|k| !allowed.contains(k)) {
            return Err(Error::Privacy(format!("disallowed message kind {k}")));
        }
        let (ia, ib) = (self.a.inventory(), self.b.inventory());
        if ia.holds_private_key || ib.holds_estimator || ib.holds_labels {
            return Err(Error::Privacy("party state holds material it must not".into()));
        }
        Ok(PrivacySummary {
            messages: self.channel.log().len(),
            kinds,
            raw_rows_watched: self.raw_rows_watched,
            party_a_holds_private_key: ia.holds_private_key,
            party_b_holds_estimator: ib.holds_estimator,
        })
    }

    fn run(mut self, strategies: &[Strategy]) -> Result<RunOutcome> {
        let cfg = self.cfg;
        let sc = self.scenario;
        if strategies.is_empty() {
            return Err(Error::InvalidArgument("no strategies requested".into()));
        }
        let distill = DistillConfig::new(cfg.temperature, cfg.lambda, self.class_weights())?;
        let test_labels = sc.test_labels();
        let mut test_inputs = self.corrected_inputs(&sc.test)?;
        let mut cache: HashMap<usize, Vec<f64>> = HashMap::new();
        let mut snapshots: BTreeMap<Strategy, ClassifierSnapshot> = BTreeMap::new();
        let mut records = Vec::new();

        for t in 0..=sc.timeline.t_max {
            let delta = sc.timeline.delta(t).to_vec();
            if t > 0 {
                self.b.receive_arrival(&delta, &self.b_raw.select_rows(&delta))?;
                if cfg.retrain_estimators {
                    let overlap = sc.timeline.overlap(t);
                    self.fit_estimators(&overlap)?;
                    cache.clear();
                    test_inputs = self.corrected_inputs(&sc.test)?;
                }
            }
            let overlap = sc.timeline.overlap(t);
            let missing: Vec<usize> = overlap.iter().copied().filter(|i| !cache.contains_key(i)).collect();
            if !missing.is_empty() {
                let x = self.corrected_inputs(&missing)?;
                for (k, &id) in missing.iter().enumerate() {
                    cache.insert(id, x.row(k).to_vec());
                }
            }
            let rows_of = |ids: &[usize]| Matrix::from_rows(&ids.iter().map(|i| &cache[i]).collect::<Vec<_>>());
            let x_delta = rows_of(&delta)?;
            let y_delta = self.a.labels_for(&delta)?;
            let lr = cfg.classifier_lr();
            let batch_seed = derive_seed(cfg.seed, &format!("classifier-batches/{t}"));
            let fresh_seed = derive_seed(cfg.seed, &format!("classifier-init/{t}"));
            let opts = |lr: f64| TrainOptions {
                epochs: cfg.classifier_epochs,
                batch_size: cfg.batch_size,
                lr,
                seed: batch_seed,
            };
            let label = sc.timeline.arrivals[t].ratio_label();

            // Every strategy shares the first classifier.
            let first = if t == 0 {
                let started = Instant::now();
                let fitted = stage(
                    "classifier",
                    train_classifier_t(
                        None,
                        &x_delta,
                        &y_delta,
                        &distill,
                        &TrainOptions {
                            seed: derive_seed(cfg.seed, "classifier-init/0"),
                            ..opts(lr)
                        },
                        cfg.classifier_optimizer,
                        cfg.classifier_hidden,
                        0,
                    ),
                )?;
                Some((fitted, started.elapsed().as_secs_f64()))
            } else {
                None
            };

            for &s in strategies {
                let started = Instant::now();
                let ((snapshot, trace), rows) = if let Some((fitted, _)) = &first {
                    (fitted.clone(), delta.len())
                } else {
                    let prev = &snapshots[&s];
                    let fit = |init, teacher, x: &Matrix, y: &[usize], lr| {
                        fit_classifier(init, teacher, x, y, &distill, &opts(lr), cfg.classifier_optimizer)
                            .map(|(net, trace)| (ClassifierSnapshot { net, timestamp: t }, trace))
                    };
                    let fresh = || new_classifier(x_delta.cols(), cfg.classifier_hidden, sc.class_count, fresh_seed);
                    let snap = match s {
                        Strategy::Distill => train_classifier_t(
                            Some(prev),
                            &x_delta,
                            &y_delta,
                            &distill,
                            &opts(lr),
                            cfg.classifier_optimizer,
                            cfg.classifier_hidden,
                            t,
                        ),
                        Strategy::Finetune => {
                            fit(prev.net.clone(), None, &x_delta, &y_delta, lr * cfg.finetune_lr_factor)
                        }
                        Strategy::Retrain => fit(fresh()?, None, &x_delta, &y_delta, lr),
                        Strategy::Joint => {
                            let x_all = rows_of(&overlap)?;
                            let y_all = self.a.labels_for(&overlap)?;
                            fit(fresh()?, None, &x_all, &y_all, lr)
                        }
                    };
                    let rows = if s == Strategy::Joint { overlap.len() } else { delta.len() };
                    (stage("classifier", snap)?, rows)
                };
                let seconds = match &first {
                    Some((_, secs)) => *secs,
                    None => started.elapsed().as_secs_f64(),
                };
                let mut report = macro_prf(&snapshot.predict(&test_inputs)?, &test_labels, sc.class_count)?;
                report.timestamp = Some(t);
                report.strategy = Some(s.name().to_string());
                records.push(StrategyRecord {
                    timestamp: t,
                    class_ratio: label.clone(),
                    strategy: s.name().to_string(),
                    train_rows: rows,
                    update_seconds: seconds,
                    report,
                    loss_trace: trace,
                });
                if s == Strategy::Distill {
                    self.a.set_classifier(snapshot.clone());
                }
                snapshots.insert(s, snapshot);
            }
        }

        let privacy = self.privacy_summary()?;
        Ok(RunOutcome {
            dataset: sc.dataset.clone(),
            fold: sc.fold,
            seed: cfg.seed,
            records,
            traces: self.traces,
            privacy,
            messages: self.channel.log().to_vec(),
            inventory_a: self.a.inventory(),
            inventory_b: self.b.inventory(),
        })
    }

    /// Non-federated references on the same codes: party A's code alone,
    /// and both parties' codes concatenated in plaintext.
    fn non_federated(&self) -> Result<(EvalReport, EvalReport)> {
        let cfg = self.cfg;
        let sc = self.scenario;
        let distill = DistillConfig::new(cfg.temperature, cfg.lambda, self.class_weights())?;
        let ae_b = self
            .b
            .autoencoder()
            .ok_or_else(|| Error::Protocol("party B has no autoencoder".into()))?;
        let train_a = self.a.codes_for(&sc.train)?;
        let test_a = self.a.codes_for(&sc.test)?;
        let train_b = ae_b.encode(&self.b_raw.select_rows(&sc.train))?;
        let test_b = ae_b.encode(&self.b_raw.select_rows(&sc.test))?;
        let y = self.a.labels_for(&sc.train)?;
        let test_labels = sc.test_labels();
        let opts = TrainOptions {
            epochs: cfg.classifier_epochs,
            batch_size: cfg.batch_size,
            lr: cfg.classifier_lr(),
            seed: derive_seed(cfg.seed, "classifier-init/0"),
        };
        let eval = |train: &Matrix, test: &Matrix, name: &str| -> Result<EvalReport> {
            let (snap, _) = train_classifier_t(
                None,
                train,
                &y,
                &distill,
                &opts,
                cfg.classifier_optimizer,
                cfg.classifier_hidden,
                0,
            )?;
            let mut r = macro_prf(&snap.predict(test)?, &test_labels, sc.class_count)?;
            r.timestamp = Some(0);
            r.strategy = Some(name.to_string());
            Ok(r)
        };
        let without_b = stage("baseline", eval(&train_a, &test_a, "without_b"))?;
        let with_b = stage(
            "baseline",
            eval(&concat_reps(&train_a, &train_b)?, &concat_reps(&test_a, &test_b)?, "with_b"),
        )?;
        Ok((without_b, with_b))
    }
}

/// Runs the pipeline and updates the classifier with every strategy in
/// `strategies` at every timestamp. Representations are shared.
pub fn run_dynamic(cfg: &PipelineConfig, scenario: &Scenario, strategies: &[Strategy]) -> Result<RunOutcome> {
    Federation::setup(cfg, scenario)?.run(strategies)
}

/// The distillation-based pipeline alone.
pub fn run_dvfl(cfg: &PipelineConfig, scenario: &Scenario) -> Result<RunOutcome> {
    run_dynamic(cfg, scenario, &[Strategy::Distill])
}

/// Same representation pipeline with a different classifier-update rule.
pub fn run_baseline(strategy: Strategy, cfg: &PipelineConfig, scenario: &Scenario) -> Result<RunOutcome> {
    run_dynamic(cfg, scenario, &[strategy])
}

#[derive(Clone, Debug, Serialize)]
pub struct StaticOutcome {
    pub without_b: EvalReport,
    pub with_b: EvalReport,
    pub federated: RunOutcome,
}

impl StaticOutcome {
    pub fn federated_report(&self) -> &EvalReport {
        &self.federated.records[0].report
    }
}

/// One static fold: the federated pipeline plus both non-federated baselines.
pub fn run_static(cfg: &PipelineConfig, scenario: &Scenario) -> Result<StaticOutcome> {
    if scenario.timeline.t_max != 0 {
        return Err(Error::InvalidArgument("static runs need a single arrival".into()));
    }
    let fed = Federation::setup(cfg, scenario)?;
    let (without_b, with_b) = fed.non_federated()?;
    let federated = fed.run(&[Strategy::Distill])?;
    Ok(StaticOutcome {
        without_b,
        with_b,
        federated,
    })
}
