//! Arrival schedules for party B's data.
//!
//! Each built-in mode assigns every class a sequence of fractions, one per
//! timestamp, summing to 1 over the timeline. A fraction is a share of that
//! class's own pool, so a balanced pool with positive share 7/30 and negative
//! share 3/30 yields a 7:3 arrival. Counts are `round(fraction * class_pool)`
//! with the rounding remainder given to the final timestamp.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{class_counts, ClassPool};
use crate::error::{Error, Result};

/// Class index treated as "positive" in binary schedules.
pub const POSITIVE: usize = 1;
/// Class index treated as "negative" in binary schedules.
pub const NEGATIVE: usize = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamMode {
    /// Random positive:negative ratio at every step.
    Random,
    /// Positive share falls while negative share rises.
    AscVsDes,
    /// A large initial positive share, then equal shares for both classes.
    Parallel,
    /// Every arrival keeps the pool's class balance.
    Uniform,
}

impl StreamMode {
    pub const ALL: [StreamMode; 4] = [
        StreamMode::Random,
        StreamMode::AscVsDes,
        StreamMode::Parallel,
        StreamMode::Uniform,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StreamMode::Random => "random",
            StreamMode::AscVsDes => "asc_vs_des",
            StreamMode::Parallel => "parallel",
            StreamMode::Uniform => "uniform",
        }
    }
}

impl fmt::Display for StreamMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StreamMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StreamMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown stream mode `{s}`")))
    }
}

/// Per-class shares of the five-step random schedule, in thirtieths.
const RANDOM_POS_30: [u32; 6] = [5, 7, 6, 1, 4, 7];
const RANDOM_NEG_30: [u32; 6] = [5, 3, 4, 9, 6, 3];

/// Fractions of each class's pool arriving at `t = 0..=t_max`, indexed
/// `[class][t]`.
pub fn schedule_fractions(mode: StreamMode, t_max: usize, class_count: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if t_max == 0 {
        return Ok(vec![vec![1.0]; class_count]);
    }
    let steps = t_max as f64;
    if mode == StreamMode::Uniform {
        let mut f = vec![0.25];
        f.extend(std::iter::repeat(0.75 / steps).take(t_max));
        return Ok(vec![f; class_count]);
    }
    if class_count != 2 {
        return Err(Error::InvalidArgument(format!(
            "stream mode `{mode}` needs a binary task, got {class_count} classes"
        )));
    }
    let (pos, neg) = match mode {
        StreamMode::Uniform => unreachable!("handled above"),
        StreamMode::Parallel => {
            let mut pos = vec![0.5];
            pos.extend(std::iter::repeat(0.5 / steps).take(t_max));
            let mut neg = vec![0.2];
            neg.extend(std::iter::repeat(0.8 / steps).take(t_max));
            (pos, neg)
        }
        StreamMode::AscVsDes => {
            let sq = steps * steps;
            let mut pos = vec![0.2];
            let mut neg = vec![0.2];
            for t in 1..=t_max {
                pos.push(0.8 * (2.0 * (steps - t as f64) + 1.0) / sq);
                neg.push(0.8 * (2.0 * t as f64 - 1.0) / sq);
            }
            (pos, neg)
        }
        StreamMode::Random if t_max == 5 => (
            RANDOM_POS_30.iter().map(|&v| v as f64 / 30.0).collect(),
            RANDOM_NEG_30.iter().map(|&v| v as f64 / 30.0).collect(),
        ),
        StreamMode::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let first = 1.0 / (steps + 1.0);
            let ks: Vec<f64> = (0..t_max).map(|_| rng.gen_range(1..=9) as f64).collect();
            let pos_total: f64 = ks.iter().sum();
            let neg_total: f64 = ks.iter().map(|k| 10.0 - k).sum();
            let mut pos = vec![first];
            let mut neg = vec![first];
            for k in &ks {
                pos.push((1.0 - first) * k / pos_total);
                neg.push((1.0 - first) * (10.0 - k) / neg_total);
            }
            (pos, neg)
        }
    };
    let mut out = vec![Vec::new(); 2];
    out[POSITIVE] = pos;
    out[NEGATIVE] = neg;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Arrival {
    pub timestamp: usize,
    /// Sorted example IDs of `ΔD_t^B`.
    pub ids: Vec<usize>,
    /// Arrivals per class.
    pub counts: Vec<usize>,
    /// Scheduled share of each class's pool.
    pub fractions: Vec<f64>,
}

impl Arrival {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// `"23.3%:10.0% (70:30)"` for binary tasks (positive first), the raw
    /// per-class counts otherwise.
    pub fn ratio_label(&self) -> String {
        if self.counts.len() == 2 {
            format!(
                "{:.1}%:{:.1}% ({}:{})",
                100.0 * self.fractions[POSITIVE],
                100.0 * self.fractions[NEGATIVE],
                self.counts[POSITIVE],
                self.counts[NEGATIVE]
            )
        } else {
            self.counts.iter().map(usize::to_string).collect::<Vec<_>>().join(":")
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timeline {
    pub mode: StreamMode,
    pub t_max: usize,
    pub arrivals: Vec<Arrival>,
}

/// Splits `pool` into `t_max + 1` disjoint arrivals following `mode`.
pub fn build_timeline(
    mode: StreamMode,
    t_max: usize,
    pool: &[usize],
    labels: &[usize],
    class_count: usize,
    seed: u64,
) -> Result<Timeline> {
    let pool_labels: Vec<usize> = pool.iter().map(|&i| labels[i]).collect();
    let sizes = class_counts(&pool_labels, class_count);
    if let Some(c) = sizes.iter().position(|&n| n == 0) {
        return Err(Error::Infeasible(format!("class {c} is absent from the training pool")));
    }
    let fractions = schedule_fractions(mode, t_max, class_count, seed)?;

    // counts[c][t]
    let mut counts = vec![vec![0usize; t_max + 1]; class_count];
    for c in 0..class_count {
        let mut assigned = 0usize;
        for t in 0..t_max {
            let k = (fractions[c][t] * sizes[c] as f64).round() as usize;
            counts[c][t] = k;
            assigned += k;
        }
        counts[c][t_max] = sizes[c].checked_sub(assigned).ok_or_else(|| {
            Error::Infeasible(format!("class {c} pool of {} too small for the `{mode}` schedule", sizes[c]))
        })?;
    }
    for t in 0..=t_max {
        if (0..class_count).all(|c| counts[c][t] == 0) {
            return Err(Error::Infeasible(format!("timestamp {t} would receive no examples")));
        }
        if t == 0 && (0..class_count).any(|c| counts[c][0] == 0) {
            return Err(Error::Infeasible("the first arrival must contain every class".into()));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_a11c);
    let mut remaining = ClassPool::new(pool, labels, class_count);
    let mut arrivals = Vec::with_capacity(t_max + 1);
    for t in 0..=t_max {
        let want: Vec<usize> = (0..class_count).map(|c| counts[c][t]).collect();
        let ids = remaining.draw(&want, &mut rng)?;
        arrivals.push(Arrival {
            timestamp: t,
            ids,
            counts: want,
            fractions: (0..class_count).map(|c| fractions[c][t]).collect(),
        });
    }
    Ok(Timeline { mode, t_max, arrivals })
}

impl Timeline {
    /// `ΔD_t^B`.
    pub fn delta(&self, t: usize) -> &[usize] {
        &self.arrivals[t].ids
    }

    /// `D_ov,t^A`: every ID that has arrived by `t`, sorted.
    pub fn overlap(&self, t: usize) -> Vec<usize> {
        let set: BTreeSet<usize> = self.arrivals[..=t].iter().flat_map(|a| a.ids.iter().copied()).collect();
        set.into_iter().collect()
    }

    pub fn total(&self) -> usize {
        self.arrivals.iter().map(Arrival::len).sum()
    }
}
