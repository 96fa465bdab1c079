//! Dataset ingestion, standardization, splitting and macro-averaged metrics.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub ids: Vec<String>,
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub class_count: usize,
    pub feature_names: Vec<String>,
    /// `label_names[c]` is the raw label mapped to class `c`.
    pub label_names: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        class_counts(&self.labels, self.class_count)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            name: self.name.clone(),
            ids: indices.iter().map(|&i| self.ids[i].clone()).collect(),
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
            feature_names: self.feature_names.clone(),
            label_names: self.label_names.clone(),
        }
    }
}

pub fn class_counts(labels: &[usize], class_count: usize) -> Vec<usize> {
    let mut counts = vec![0; class_count];
    for &l in labels {
        counts[l] += 1;
    }
    counts
}

/// Column roles for [`load_csv`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub id_column: Option<String>,
    pub label_column: String,
    /// When set, the label becomes binary: this value is class 1, all others class 0.
    pub positive_label: Option<String>,
    #[serde(default)]
    pub drop_columns: Vec<String>,
    /// Columns one-hot encoded into `name=value` indicator features (categories sorted).
    #[serde(default)]
    pub categorical_columns: Vec<String>,
}

impl CsvSchema {
    pub fn new(label_column: impl Into<String>) -> Self {
        Self {
            label_column: label_column.into(),
            ..Default::default()
        }
    }

    /// Layout of the bundled Wisconsin diagnostic breast cancer file.
    pub fn bcw() -> Self {
        Self {
            id_column: Some("id".into()),
            label_column: "diagnosis".into(),
            positive_label: Some("M".into()),
            ..Default::default()
        }
    }

    /// Layout written by [`write_csv`] and the synthetic generator.
    pub fn canonical() -> Self {
        Self {
            id_column: Some("id".into()),
            label_column: "label".into(),
            ..Default::default()
        }
    }
}

/// Loads a delimited file with a header row. Rows keep file order. Errors
/// name the 1-based line number (the header is line 1) and the column.
pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Dataset> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if headers.iter().all(|h| h.is_empty()) {
        return Err(Error::Ingestion {
            row: 1,
            column: String::new(),
            reason: "empty file".into(),
        });
    }
    let find = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| Error::Ingestion {
            row: 1,
            column: name.to_string(),
            reason: "missing column".into(),
        })
    };
    let label_col = find(&schema.label_column)?;
    let id_col = schema.id_column.as_deref().map(find).transpose()?;
    let mut skipped: BTreeSet<usize> = BTreeSet::new();
    skipped.insert(label_col);
    skipped.extend(id_col);
    for c in &schema.drop_columns {
        skipped.insert(find(c)?);
    }
    let categorical: BTreeSet<usize> = schema
        .categorical_columns
        .iter()
        .map(|c| find(c))
        .collect::<Result<_>>()?;

    let records: Vec<csv::StringRecord> = reader.records().collect::<std::result::Result<_, _>>()?;
    if records.is_empty() {
        return Err(Error::Ingestion {
            row: 2,
            column: String::new(),
            reason: "empty file: no data rows".into(),
        });
    }

    let mut categories: BTreeMap<usize, BTreeSet<String>> = BTreeMap::new();
    for rec in &records {
        for &c in &categorical {
            categories.entry(c).or_default().insert(rec[c].to_string());
        }
    }

    let mut feature_names = Vec::new();
    for (c, name) in headers.iter().enumerate() {
        if skipped.contains(&c) {
            continue;
        }
        match categories.get(&c) {
            Some(values) => feature_names.extend(values.iter().map(|v| format!("{name}={v}"))),
            None => feature_names.push(name.clone()),
        }
    }

    let raw_labels: Vec<String> = records.iter().map(|r| r[label_col].to_string()).collect();
    let (labels, label_names) = map_labels(&raw_labels, schema.positive_label.as_deref());

    let mut data = Vec::with_capacity(records.len() * feature_names.len());
    let mut ids = Vec::with_capacity(records.len());
    for (i, rec) in records.iter().enumerate() {
        let line = i + 2;
        if rec.len() != headers.len() {
            return Err(Error::Ingestion {
                row: line,
                column: String::new(),
                reason: format!("expected {} fields, found {}", headers.len(), rec.len()),
            });
        }
        ids.push(match id_col {
            Some(c) => rec[c].to_string(),
            None => i.to_string(),
        });
        for (c, cell) in rec.iter().enumerate() {
            if skipped.contains(&c) {
                continue;
            }
            if let Some(values) = categories.get(&c) {
                data.extend(values.iter().map(|v| if v == cell { 1.0 } else { 0.0 }));
                continue;
            }
            let v: f64 = cell.parse().map_err(|_| Error::Ingestion {
                row: line,
                column: headers[c].clone(),
                reason: format!("non-numeric value {cell:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Ingestion {
                    row: line,
                    column: headers[c].clone(),
                    reason: "non-finite value".into(),
                });
            }
            data.push(v);
        }
    }

    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(Dataset {
        name,
        ids,
        features: Matrix::new(records.len(), feature_names.len(), data)?,
        class_count: label_names.len(),
        labels,
        feature_names,
        label_names,
    })
}

fn map_labels(raw: &[String], positive: Option<&str>) -> (Vec<usize>, Vec<String>) {
    if let Some(pos) = positive {
        let labels = raw.iter().map(|l| usize::from(l == pos)).collect();
        return (labels, vec![format!("not-{pos}"), pos.to_string()]);
    }
    let mut names: Vec<String> = raw.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    if names.iter().all(|n| n.parse::<f64>().is_ok()) {
        names.sort_by(|a, b| a.parse::<f64>().unwrap().total_cmp(&b.parse::<f64>().unwrap()));
    }
    let index: BTreeMap<&str, usize> = names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
    let labels = raw.iter().map(|l| index[l.as_str()]).collect();
    (labels, names)
}

/// Writes `id,label,<features...>` with the raw label names; readable with
/// [`CsvSchema::canonical`].
pub fn write_csv(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["id".to_string(), "label".to_string()];
    header.extend(dataset.feature_names.iter().cloned());
    w.write_record(&header)?;
    for (i, row) in dataset.features.iter_rows().enumerate() {
        let mut rec = vec![
            dataset.ids[i].clone(),
            dataset.label_names[dataset.labels[i]].clone(),
        ];
        rec.extend(row.iter().map(|v| format!("{v:?}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Per-column mean and standard deviation fitted on training rows only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    /// Rows the statistics were computed from.
    pub fitted_on: Vec<usize>,
}

impl Standardizer {
    pub fn fit(features: &Matrix, train_rows: &[usize]) -> Result<Self> {
        if train_rows.is_empty() {
            return Err(Error::InvalidArgument("cannot standardize on zero rows".into()));
        }
        let cols = features.cols();
        let n = train_rows.len() as f64;
        let mut means = vec![0.0; cols];
        for &r in train_rows {
            for (m, v) in means.iter_mut().zip(features.row(r)) {
                *m += v;
            }
        }
        means.iter_mut().for_each(|m| *m /= n);
        let mut vars = vec![0.0; cols];
        for &r in train_rows {
            for ((s, v), m) in vars.iter_mut().zip(features.row(r)).zip(&means) {
                *s += (v - m) * (v - m);
            }
        }
        let stds = vars
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self {
            means,
            stds,
            fitted_on: train_rows.to_vec(),
        })
    }

    pub fn transform(&self, features: &Matrix) -> Result<Matrix> {
        if features.cols() != self.means.len() {
            return Err(Error::shape("Standardizer::transform", self.means.len(), features.cols()));
        }
        let mut out = features.clone();
        for r in 0..out.rows() {
            for ((v, m), s) in out.row_mut(r).iter_mut().zip(&self.means).zip(&self.stds) {
                *v = (*v - m) / s;
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Stratified k-fold split. Each class is shuffled and dealt round-robin, the
/// dealing position carrying over between classes so fold sizes stay even.
pub fn kfold_split(labels: &[usize], class_count: usize, k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 {
        return Err(Error::Split(format!("k must be at least 2, got {k}")));
    }
    let counts = class_counts(labels, class_count);
    for (c, &n) in counts.iter().enumerate() {
        if n < k {
            return Err(Error::Split(format!("class {c} has {n} members, fewer than k={k}")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut test_sets: Vec<Vec<usize>> = vec![Vec::new(); k];
    let mut cursor = 0;
    for c in 0..class_count {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        members.shuffle(&mut rng);
        for idx in members {
            test_sets[cursor % k].push(idx);
            cursor += 1;
        }
    }
    Ok(test_sets
        .into_iter()
        .map(|mut test| {
            test.sort_unstable();
            let in_test: BTreeSet<usize> = test.iter().copied().collect();
            let train = (0..labels.len()).filter(|i| !in_test.contains(i)).collect();
            Fold { train, test }
        })
        .collect())
}

/// Holds out a test set with (as near as possible) equal counts per class.
/// Returns `(train, test)` index lists, both sorted.
pub fn balanced_holdout(
    labels: &[usize],
    class_count: usize,
    test_fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&test_fraction) || test_fraction == 0.0 {
        return Err(Error::Split(format!("test_fraction must be in (0,1), got {test_fraction}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per_class = ((labels.len() as f64 * test_fraction) / class_count as f64).round() as usize;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for c in 0..class_count {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        members.shuffle(&mut rng);
        let take = per_class.min(members.len() / 2);
        test.extend_from_slice(&members[..take]);
        train.extend_from_slice(&members[take..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Remaining, not-yet-arrived example indices grouped by class.
#[derive(Clone, Debug)]
pub struct ClassPool {
    remaining: Vec<Vec<usize>>,
}

impl ClassPool {
    pub fn new(indices: &[usize], labels: &[usize], class_count: usize) -> Self {
        let mut remaining = vec![Vec::new(); class_count];
        for &i in indices {
            remaining[labels[i]].push(i);
        }
        Self { remaining }
    }

    pub fn remaining(&self, class: usize) -> usize {
        self.remaining[class].len()
    }

    pub fn total_remaining(&self) -> usize {
        self.remaining.iter().map(Vec::len).sum()
    }

    /// Draws exactly `counts[c]` members of each class without replacement.
    pub fn draw<R: Rng + ?Sized>(&mut self, counts: &[usize], rng: &mut R) -> Result<Vec<usize>> {
        for (c, &want) in counts.iter().enumerate() {
            let have = self.remaining.get(c).map_or(0, Vec::len);
            if want > have {
                return Err(Error::Infeasible(format!(
                    "class {c}: requested {want}, only {have} remaining"
                )));
            }
        }
        let mut out = Vec::new();
        for (c, &want) in counts.iter().enumerate() {
            let pool = &mut self.remaining[c];
            pool.shuffle(rng);
            out.extend(pool.drain(..want));
        }
        out.sort_unstable();
        Ok(out)
    }
}

/// Binary arrival sample: `pos_count` of class 1 and `neg_count` of class 0.
pub fn stratified_stream_sample<R: Rng + ?Sized>(
    pool: &mut ClassPool,
    pos_count: usize,
    neg_count: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    pool.draw(&[neg_count, pos_count], rng)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class: Vec<ClassMetrics>,
    pub macro_p: f64,
    pub macro_r: f64,
    pub macro_f1: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub timestamp: Option<usize>,
    pub strategy: Option<String>,
}

/// Per-class and macro precision/recall/F1. A zero denominator yields 0, and
/// F1 is 0 when precision and recall are both 0.
pub fn macro_prf(predictions: &[usize], labels: &[usize], class_count: usize) -> Result<EvalReport> {
    if predictions.len() != labels.len() {
        return Err(Error::shape("macro_prf", labels.len(), predictions.len()));
    }
    let mut confusion = vec![vec![0usize; class_count]; class_count];
    for (&p, &y) in predictions.iter().zip(labels) {
        if p >= class_count || y >= class_count {
            return Err(Error::InvalidArgument(format!(
                "class index out of range: label {y}, prediction {p}, C={class_count}"
            )));
        }
        confusion[y][p] += 1;
    }
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let per_class: Vec<ClassMetrics> = (0..class_count)
        .map(|c| {
            let tp = confusion[c][c];
            let predicted: usize = (0..class_count).map(|r| confusion[r][c]).sum();
            let support: usize = confusion[c].iter().sum();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassMetrics {
                precision,
                recall,
                f1,
                support,
            }
        })
        .collect();
    let c = class_count as f64;
    Ok(EvalReport {
        macro_p: per_class.iter().map(|m| m.precision).sum::<f64>() / c,
        macro_r: per_class.iter().map(|m| m.recall).sum::<f64>() / c,
        macro_f1: per_class.iter().map(|m| m.f1).sum::<f64>() / c,
        per_class,
        confusion,
        timestamp: None,
        strategy: None,
    })
}

/// Parameters of the Gaussian-mixture binary generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub samples: usize,
    pub features: usize,
    pub latent_dim: usize,
    /// Fraction of class-1 examples.
    pub pos_fraction: f64,
    /// Distance between the two class means in latent space.
    pub separation: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            samples: 2000,
            features: 20,
            latent_dim: 6,
            pos_fraction: 0.5,
            separation: 1.5,
            noise: 0.5,
            seed: 0,
        }
    }
}

/// Two-class Gaussian mixture: a latent `z ~ N(mu_y, I)` mapped linearly to
/// the features plus isotropic noise. The shared latent makes every feature
/// column informative about every other, so any vertical split yields
/// correlated party views.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.samples < 2 || spec.features < 2 || spec.latent_dim == 0 {
        return Err(Error::InvalidArgument("synthetic spec too small".into()));
    }
    if !(0.0..=1.0).contains(&spec.pos_fraction) {
        return Err(Error::InvalidArgument("pos_fraction must be in [0,1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let k = spec.latent_dim;
    let mixing: Vec<f64> = (0..spec.features * k)
        .map(|_| rng.sample::<f64, _>(StandardNormal) / (k as f64).sqrt())
        .collect();
    let mut direction: Vec<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
    let norm = direction.iter().map(|v| v * v).sum::<f64>().sqrt();
    direction.iter_mut().for_each(|v| *v /= norm);

    let n_pos = (spec.samples as f64 * spec.pos_fraction).round() as usize;
    let mut labels: Vec<usize> = (0..spec.samples).map(|i| usize::from(i < n_pos)).collect();
    labels.shuffle(&mut rng);

    let mut data = Vec::with_capacity(spec.samples * spec.features);
    for &y in &labels {
        let shift = if y == 1 { 0.5 } else { -0.5 } * spec.separation;
        let z: Vec<f64> = direction
            .iter()
            .map(|d| rng.sample::<f64, _>(StandardNormal) + shift * d)
            .collect();
        for f in 0..spec.features {
            let w = &mixing[f * k..(f + 1) * k];
            let clean: f64 = w.iter().zip(&z).map(|(a, b)| a * b).sum();
            data.push(clean + spec.noise * rng.sample::<f64, _>(StandardNormal));
        }
    }
    Ok(Dataset {
        name: "synthetic".into(),
        ids: (0..spec.samples).map(|i| i.to_string()).collect(),
        features: Matrix::new(spec.samples, spec.features, data)?,
        labels,
        class_count: 2,
        feature_names: (0..spec.features).map(|f| format!("f{f}")).collect(),
        label_names: vec!["0".into(), "1".into()],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn small_csv_recovered_exactly() {
        let f = write_tmp("id,a,b,y\n1,0.5,2,yes\n2,-1,3.25,no\n3,4,0,yes\n");
        let schema = CsvSchema {
            id_column: Some("id".into()),
            label_column: "y".into(),
            positive_label: Some("yes".into()),
            ..Default::default()
        };
        let ds = load_csv(f.path(), &schema).unwrap();
        assert_eq!(ds.features.as_slice(), &[0.5, 2.0, -1.0, 3.25, 4.0, 0.0]);
        assert_eq!(ds.labels, vec![1, 0, 1]);
        assert_eq!(ds.ids, vec!["1", "2", "3"]);
        assert_eq!(ds.feature_names, vec!["a", "b"]);
        assert_eq!(ds.class_count, 2);
    }

    #[test]
    fn non_numeric_cell_reports_location() {
        let f = write_tmp("a,b,y\n1,2,0\n3,oops,1\n");
        let err = load_csv(f.path(), &CsvSchema::new("y")).unwrap_err();
        match err {
            Error::Ingestion { row, column, .. } => {
                assert_eq!(row, 3);
                assert_eq!(column, "b");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_column_and_empty_file() {
        let f = write_tmp("a,b\n1,2\n");
        assert!(matches!(
            load_csv(f.path(), &CsvSchema::new("y")),
            Err(Error::Ingestion { .. })
        ));
        let empty = write_tmp("a,y\n");
        assert!(matches!(
            load_csv(empty.path(), &CsvSchema::new("y")),
            Err(Error::Ingestion { .. })
        ));
    }

    #[test]
    fn categorical_columns_one_hot() {
        let f = write_tmp("sex,x,y\nm,1,0\nf,2,1\nm,3,2\n");
        let schema = CsvSchema {
            categorical_columns: vec!["sex".into()],
            ..CsvSchema::new("y")
        };
        let ds = load_csv(f.path(), &schema).unwrap();
        assert_eq!(ds.feature_names, vec!["sex=f", "sex=m", "x"]);
        assert_eq!(ds.features.row(1), &[1.0, 0.0, 2.0]);
        assert_eq!(ds.class_count, 3);
    }

    #[test]
    fn numeric_labels_sort_numerically() {
        let f = write_tmp("x,y\n1,10\n2,9\n3,10\n");
        let ds = load_csv(f.path(), &CsvSchema::new("y")).unwrap();
        assert_eq!(ds.label_names, vec!["9", "10"]);
        assert_eq!(ds.labels, vec![1, 0, 1]);
    }

    #[test]
    fn standardizer_uses_train_rows_only() {
        let m = Matrix::new(4, 1, vec![0.0, 2.0, 100.0, 100.0]).unwrap();
        let s = Standardizer::fit(&m, &[0, 1]).unwrap();
        assert_eq!(s.means, vec![1.0]);
        assert_eq!(s.stds, vec![1.0]);
        let t = s.transform(&m).unwrap();
        assert_eq!(t.as_slice(), &[-1.0, 1.0, 99.0, 99.0]);
        let constant = Matrix::new(2, 1, vec![3.0, 3.0]).unwrap();
        assert_eq!(Standardizer::fit(&constant, &[0, 1]).unwrap().stds, vec![1.0]);
    }

    #[test]
    fn kfold_balanced_example() {
        let labels = vec![0, 1, 0, 1, 0, 1, 0, 1, 0, 1];
        let folds = kfold_split(&labels, 2, 5, 3).unwrap();
        assert_eq!(folds.len(), 5);
        for f in &folds {
            let pos = f.test.iter().filter(|&&i| labels[i] == 1).count();
            assert_eq!((f.test.len(), pos), (2, 1));
            assert_eq!(f.train.len(), 8);
        }
        assert_eq!(folds, kfold_split(&labels, 2, 5, 3).unwrap());
    }

    #[test]
    fn kfold_rejects_small_class() {
        let labels = vec![0, 0, 0, 0, 0, 1, 1];
        assert!(matches!(kfold_split(&labels, 2, 5, 0), Err(Error::Split(_))));
    }

    #[test]
    fn macro_prf_hand_computed() {
        let r = macro_prf(&[0, 1, 1, 1], &[0, 0, 1, 1], 2).unwrap();
        assert_eq!(r.per_class[0].precision, 1.0);
        assert_eq!(r.per_class[0].recall, 0.5);
        assert!((r.per_class[1].precision - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.per_class[1].recall, 1.0);
        assert!((r.macro_f1 - 11.0 / 15.0).abs() < 1e-15);
    }

    #[test]
    fn macro_prf_perfect_and_degenerate() {
        let r = macro_prf(&[0, 1, 2], &[0, 1, 2], 3).unwrap();
        assert_eq!((r.macro_p, r.macro_r, r.macro_f1), (1.0, 1.0, 1.0));
        let r = macro_prf(&[1, 1, 1, 1], &[0, 0, 1, 1], 2).unwrap();
        assert_eq!(r.per_class[1].recall, 1.0);
        assert_eq!(r.per_class[0].recall, 0.0);
        assert_eq!(r.per_class[0].f1, 0.0);
        assert_eq!(r.macro_r, 0.5);
        assert!(macro_prf(&[0], &[0, 1], 2).is_err());
    }

    #[test]
    fn stream_sampling_counts() {
        let labels: Vec<usize> = (0..200).map(|i| i % 2).collect();
        let idx: Vec<usize> = (0..200).collect();
        let mut pool = ClassPool::new(&idx, &labels, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(stratified_stream_sample(&mut pool, 0, 0, &mut rng).unwrap().is_empty());
        let s = stratified_stream_sample(&mut pool, 70, 30, &mut rng).unwrap();
        assert_eq!(s.iter().filter(|&&i| labels[i] == 1).count(), 70);
        assert_eq!(s.len(), 100);
        let rest = stratified_stream_sample(&mut pool, 30, 70, &mut rng).unwrap();
        assert_eq!(rest.len(), 100);
        assert_eq!(pool.total_remaining(), 0);
        assert!(matches!(
            stratified_stream_sample(&mut pool, 1, 0, &mut rng),
            Err(Error::Infeasible(_))
        ));
    }

    #[test]
    fn balanced_holdout_is_near_even() {
        let labels: Vec<usize> = (0..1000).map(|i| usize::from(i % 4 == 0)).collect();
        let (train, test) = balanced_holdout(&labels, 2, 0.2, 5).unwrap();
        let pos = test.iter().filter(|&&i| labels[i] == 1).count();
        assert_eq!(pos, 100);
        assert_eq!(test.len(), 200);
        assert_eq!(train.len() + test.len(), 1000);
    }

    #[test]
    fn synthetic_generator_is_deterministic_and_balanced() {
        let spec = SyntheticSpec {
            samples: 400,
            pos_fraction: 0.25,
            ..Default::default()
        };
        let a = generate_synthetic(&spec).unwrap();
        assert_eq!(a, generate_synthetic(&spec).unwrap());
        assert_eq!(a.class_counts(), vec![300, 100]);
        assert!(a.features.all_finite());
    }

    #[test]
    fn csv_write_then_load_is_idempotent() {
        let ds = generate_synthetic(&SyntheticSpec {
            samples: 30,
            features: 4,
            ..Default::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.csv");
        write_csv(&ds, &p1).unwrap();
        let once = load_csv(&p1, &CsvSchema::canonical()).unwrap();
        let p2 = dir.path().join("a2.csv");
        write_csv(&once, &p2).unwrap();
        let twice = load_csv(&p2, &CsvSchema::canonical()).unwrap();
        assert_eq!(once.features, twice.features);
        assert_eq!(once.labels, twice.labels);
        assert_eq!(once.features, ds.features);
        assert_eq!(once.labels, ds.labels);
    }
}
