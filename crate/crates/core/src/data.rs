//! Bags, synthetic bag generators and split handling.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use thiserror::Error;

use crate::heads::SurvivalLabel;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TaskKind {
    Classification,
    Survival,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Classification => "classification",
            TaskKind::Survival => "survival",
        })
    }
}

impl FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "classification" => Ok(TaskKind::Classification),
            "survival" => Ok(TaskKind::Survival),
            other => Err(format!("unknown task {other:?} (expected classification or survival)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    Class(usize),
    Survival(SurvivalLabel),
}

impl Label {
    pub fn task(&self) -> TaskKind {
        match self {
            Label::Class(_) => TaskKind::Classification,
            Label::Survival(_) => TaskKind::Survival,
        }
    }
}

/// Where a bag came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Provenance {
    pub config_hash: u64,
    pub seed: u64,
}

/// One bag: N×D_in instance features and its label.
#[derive(Debug, Clone, PartialEq)]
pub struct BagRecord {
    pub id: String,
    pub features: Tensor,
    pub label: Label,
    pub provenance: Provenance,
}

impl BagRecord {
    pub fn new(id: impl Into<String>, features: Tensor, label: Label) -> Result<Self, DataError> {
        let id = id.into();
        if features.shape().len() != 2 {
            return Err(DataError::InvalidBag {
                id,
                reason: format!("features must be 2-d, got {:?}", features.shape()),
            });
        }
        if !features.is_finite() {
            return Err(DataError::InvalidBag {
                id,
                reason: "non-finite feature".into(),
            });
        }
        Ok(Self {
            id,
            features,
            label,
            provenance: Provenance::default(),
        })
    }

    pub fn n_instances(&self) -> usize {
        self.features.rows()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid value for `{key}`: {reason}")]
    InvalidConfig { key: &'static str, reason: String },
    #[error("bag {id}: {reason}")]
    InvalidBag { id: String, reason: String },
    #[error("bad magic at byte {offset}")]
    BadMagic { offset: u64 },
    #[error("unsupported format version {version} at byte {offset}")]
    UnsupportedVersion { version: u16, offset: u64 },
    #[error("file truncated at byte {offset} while reading {what}")]
    Truncated { offset: u64, what: String },
    #[error("corrupt data at byte {offset} in {what}: {reason}")]
    Corrupt { offset: u64, what: String, reason: String },
    #[error("split request invalid: {0}")]
    Split(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn invalid(key: &'static str, reason: impl Into<String>) -> DataError {
    DataError::InvalidConfig {
        key,
        reason: reason.into(),
    }
}

/// 64-bit FNV-1a, stable across platforms and toolchains.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Seed for item `index` of a stream keyed by `seed` (splitmix64 finalizer).
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn normal_vec<R: Rng + ?Sized>(rng: &mut R, d: usize, scale: f64) -> Vec<f64> {
    (0..d).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
    v
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticClassConfig {
    pub bags_per_class: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    pub dim: usize,
    /// Fraction of instances drawn from the witness component in a positive bag.
    pub witness_rate: f64,
    /// Background mixture size.
    pub components: usize,
    /// Spread of the background component means.
    pub mean_scale: f64,
    /// Per-coordinate standard deviation of every component.
    pub std: f64,
    /// Witness mean offset from background component 0, in units of `std`.
    pub separation: f64,
    pub seed: u64,
}

impl Default for SyntheticClassConfig {
    fn default() -> Self {
        Self {
            bags_per_class: 175,
            min_instances: 30,
            max_instances: 80,
            dim: 16,
            witness_rate: 0.05,
            components: 3,
            mean_scale: 1.0,
            std: 1.0,
            separation: 3.0,
            seed: 0,
        }
    }
}

impl SyntheticClassConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        if !(self.witness_rate > 0.0 && self.witness_rate <= 1.0) {
            return Err(invalid("witness_rate", format!("{} not in (0, 1]", self.witness_rate)));
        }
        if !(self.separation > 0.0) {
            return Err(invalid("separation", format!("{} must be positive", self.separation)));
        }
        if self.bags_per_class == 0 {
            return Err(invalid("bags_per_class", "must be at least 1"));
        }
        if self.min_instances == 0 || self.min_instances > self.max_instances {
            return Err(invalid("min_instances", "need 1 <= min_instances <= max_instances"));
        }
        if self.dim < 2 {
            return Err(invalid("dim", "must be at least 2"));
        }
        if self.components == 0 || self.components >= self.dim {
            return Err(invalid("components", "need 1 <= components < dim"));
        }
        if !(self.std > 0.0) {
            return Err(invalid("std", "must be positive"));
        }
        if !(self.mean_scale >= 0.0) {
            return Err(invalid("mean_scale", "must be non-negative"));
        }
        Ok(())
    }

    pub fn hash(&self) -> u64 {
        fnv1a(format!("{self:?}").as_bytes())
    }

    /// Witness instances in a positive bag of `n` instances.
    pub fn witness_count(&self, n: usize) -> usize {
        ((self.witness_rate * n as f64).ceil() as usize).clamp(1, n)
    }
}

/// Background mixture and witness component shared by every bag of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassGeometry {
    pub background_means: Vec<Vec<f64>>,
    pub witness_mean: Vec<f64>,
    /// Unit vector along which the witness is displaced; orthogonal to the
    /// offsets between background means.
    pub direction: Vec<f64>,
}

impl ClassGeometry {
    pub fn new(config: &SyntheticClassConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, u64::MAX));
        let background_means: Vec<Vec<f64>> = (0..config.components)
            .map(|_| normal_vec(&mut rng, config.dim, config.mean_scale))
            .collect();
        let mut basis: Vec<Vec<f64>> = Vec::new();
        for m in &background_means[1..] {
            let mut v: Vec<f64> = m.iter().zip(&background_means[0]).map(|(a, b)| a - b).collect();
            for b in &basis {
                let c: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
            }
            if v.iter().map(|x| x * x).sum::<f64>() > 1e-18 {
                basis.push(unit(v));
            }
        }
        let mut direction = normal_vec(&mut rng, config.dim, 1.0);
        for b in &basis {
            let c: f64 = direction.iter().zip(b).map(|(x, y)| x * y).sum();
            direction.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
        }
        let direction = unit(direction);
        let witness_mean = background_means[0]
            .iter()
            .zip(&direction)
            .map(|(m, d)| m + config.separation * config.std * d)
            .collect();
        Self {
            background_means,
            witness_mean,
            direction,
        }
    }
}

/// Negative bags hold background instances only; positive bags hold
/// `witness_count(N) >= 1` witnesses. Bags alternate negative/positive.
pub fn gen_classification_bags(config: &SyntheticClassConfig) -> Result<Vec<BagRecord>, DataError> {
    config.validate()?;
    let geo = ClassGeometry::new(config);
    let hash = config.hash();
    let total = 2 * config.bags_per_class;
    (0..total)
        .map(|i| {
            let seed = derive_seed(config.seed, i as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.random_range(config.min_instances..=config.max_instances);
            let positive = i % 2 == 1;
            let witnesses = if positive { config.witness_count(n) } else { 0 };
            let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
            for k in 0..n {
                let mean = if k < witnesses {
                    &geo.witness_mean
                } else {
                    &geo.background_means[rng.random_range(0..config.components)]
                };
                rows.push(
                    mean.iter()
                        .map(|m| m + config.std * rng.sample::<f64, _>(StandardNormal))
                        .collect(),
                );
            }
            rows.shuffle(&mut rng);
            let features = Tensor::from_rows(&rows).expect("equal-length rows");
            let label = Label::Class(usize::from(witnesses >= 1));
            let mut bag = BagRecord::new(format!("bag-{i:05}"), features, label)?;
            bag.provenance = Provenance {
                config_hash: hash,
                seed,
            };
            Ok(bag)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSurvConfig {
    pub patients: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    pub dim: usize,
    /// Risk direction; a seeded random unit vector when `None`.
    pub risk_direction: Option<Vec<f64>>,
    /// Standard deviation of the per-patient offset along the risk direction.
    pub risk_spread: f64,
    /// Log-hazard slope per unit of latent risk.
    pub risk_strength: f64,
    pub censor_rate: f64,
    pub bins: usize,
    pub seed: u64,
}

impl Default for SyntheticSurvConfig {
    fn default() -> Self {
        Self {
            patients: 300,
            min_instances: 30,
            max_instances: 80,
            dim: 16,
            risk_direction: None,
            risk_spread: 1.0,
            risk_strength: 1.5,
            censor_rate: 0.3,
            bins: 4,
            seed: 0,
        }
    }
}

impl SyntheticSurvConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        if !(0.0..1.0).contains(&self.censor_rate) {
            return Err(invalid("censor_rate", format!("{} not in [0, 1)", self.censor_rate)));
        }
        if self.bins < 2 {
            return Err(invalid("bins", "need at least 2 bins"));
        }
        if self.patients == 0 {
            return Err(invalid("patients", "must be at least 1"));
        }
        if self.min_instances == 0 || self.min_instances > self.max_instances {
            return Err(invalid("min_instances", "need 1 <= min_instances <= max_instances"));
        }
        if self.dim == 0 {
            return Err(invalid("dim", "must be at least 1"));
        }
        if let Some(d) = &self.risk_direction {
            if d.len() != self.dim || d.iter().all(|&x| x == 0.0) {
                return Err(invalid("risk_direction", "must be a nonzero vector of length dim"));
            }
        }
        Ok(())
    }

    pub fn hash(&self) -> u64 {
        fnv1a(format!("{self:?}").as_bytes())
    }

    pub fn direction(&self) -> Vec<f64> {
        match &self.risk_direction {
            Some(d) => unit(d.clone()),
            None => {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, u64::MAX));
                unit(normal_vec(&mut rng, self.dim, 1.0))
            }
        }
    }
}

/// Exponential event time with log-rate `strength · risk`, from a unit
/// exponential draw. Monotone decreasing in `risk` for a fixed draw.
pub fn event_time(risk: f64, strength: f64, unit_exp: f64) -> f64 {
    unit_exp * (-strength * risk).exp()
}

/// Cut-points splitting sorted `times` into `bins` equal-count groups.
pub fn quantile_cuts(times: &[f64], bins: usize) -> Vec<f64> {
    let mut sorted = times.to_vec();
    sorted.sort_by(f64::total_cmp);
    if sorted.is_empty() {
        return vec![f64::INFINITY; bins - 1];
    }
    (1..bins).map(|k| sorted[k * sorted.len() / bins]).collect()
}

/// Bin index of `t`: the number of cut-points at or below it.
pub fn bin_of(t: f64, cuts: &[f64]) -> usize {
    cuts.iter().filter(|&&c| c <= t).count()
}

/// Generated survival cohort plus the latent quantities behind it.
#[derive(Debug, Clone)]
pub struct SurvivalCohort {
    pub bags: Vec<BagRecord>,
    pub risks: Vec<f64>,
    /// Observed continuous times (event or censoring).
    pub times: Vec<f64>,
    pub cuts: Vec<f64>,
}

pub fn gen_survival_bags(config: &SyntheticSurvConfig) -> Result<Vec<BagRecord>, DataError> {
    Ok(gen_survival_cohort(config)?.bags)
}

/// Each patient's instances share an offset along the risk direction; the
/// risk is the mean instance projection on it. Censored patients are
/// observed at a uniform fraction of their event time. Cut-points are the
/// quantiles of the uncensored times.
pub fn gen_survival_cohort(config: &SyntheticSurvConfig) -> Result<SurvivalCohort, DataError> {
    config.validate()?;
    let dir = config.direction();
    let hash = config.hash();
    let mut feats = Vec::with_capacity(config.patients);
    let mut seeds = Vec::with_capacity(config.patients);
    let mut risks = Vec::with_capacity(config.patients);
    let mut times = Vec::with_capacity(config.patients);
    let mut censored = Vec::with_capacity(config.patients);
    for i in 0..config.patients {
        let seed = derive_seed(config.seed, i as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(config.min_instances..=config.max_instances);
        let offset = config.risk_spread * rng.sample::<f64, _>(StandardNormal);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                dir.iter()
                    .map(|d| offset * d + rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        let risk = rows
            .iter()
            .map(|r| r.iter().zip(&dir).map(|(x, d)| x * d).sum::<f64>())
            .sum::<f64>()
            / n as f64;
        let draw: f64 = Exp1.sample(&mut rng);
        let t_event = event_time(risk, config.risk_strength, draw);
        let is_censored = rng.random_bool(config.censor_rate);
        let t_obs = if is_censored {
            t_event * rng.random::<f64>()
        } else {
            t_event
        };
        feats.push(Tensor::from_rows(&rows).expect("equal-length rows"));
        seeds.push(seed);
        risks.push(risk);
        times.push(t_obs);
        censored.push(is_censored);
    }
    let uncensored: Vec<f64> = times
        .iter()
        .zip(&censored)
        .filter(|(_, &c)| !c)
        .map(|(&t, _)| t)
        .collect();
    let cuts = quantile_cuts(&uncensored, config.bins);
    let bags = feats
        .into_iter()
        .enumerate()
        .map(|(i, f)| {
            let label = Label::Survival(SurvivalLabel {
                time_bin: bin_of(times[i], &cuts),
                censored: censored[i],
            });
            let mut bag = BagRecord::new(format!("patient-{i:05}"), f, label)?;
            bag.provenance = Provenance {
                config_hash: hash,
                seed: seeds[i],
            };
            Ok(bag)
        })
        .collect::<Result<Vec<_>, DataError>>()?;
    Ok(SurvivalCohort {
        bags,
        risks,
        times,
        cuts,
    })
}

#[derive(Debug, Clone, Default)]
pub struct Splits {
    pub train: Vec<BagRecord>,
    pub val: Vec<BagRecord>,
    pub test: Vec<BagRecord>,
}

/// Seeded split into train/val/test of the requested sizes, stratified by
/// class label (survival bags are stratified by censorship).
pub fn split_bags(bags: Vec<BagRecord>, sizes: [usize; 3], seed: u64) -> Result<Splits, DataError> {
    let total: usize = sizes.iter().sum();
    if total > bags.len() {
        return Err(DataError::Split(format!("requested {total} bags from {}", bags.len())));
    }
    let stratum = |b: &BagRecord| match b.label {
        Label::Class(c) => c,
        Label::Survival(s) => usize::from(s.censored),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut strata: Vec<(usize, Vec<BagRecord>)> = Vec::new();
    for b in bags {
        let key = stratum(&b);
        match strata.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(b),
            None => strata.push((key, vec![b])),
        }
    }
    strata.sort_by_key(|(k, _)| *k);
    let pool_total: usize = strata.iter().map(|(_, v)| v.len()).sum();
    // Floor of the proportional share, then largest remainders first, never
    // drawing more from a stratum than it holds.
    let mut quota: Vec<[usize; 3]> = vec![[0; 3]; strata.len()];
    for part in 0..3 {
        let exact: Vec<f64> = strata
            .iter()
            .map(|(_, v)| sizes[part] as f64 * v.len() as f64 / pool_total as f64)
            .collect();
        for (q, e) in quota.iter_mut().zip(&exact) {
            q[part] = e.floor() as usize;
        }
        let mut order: Vec<usize> = (0..strata.len()).collect();
        order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())));
        let mut missing = sizes[part] - quota.iter().map(|q| q[part]).sum::<usize>();
        while missing > 0 {
            let room = |si: usize| strata[si].1.len() > quota[si].iter().sum::<usize>();
            let Some(&si) = order.iter().find(|&&si| room(si)) else {
                return Err(DataError::Split("stratum too small for requested split".into()));
            };
            quota[si][part] += 1;
            order.retain(|&o| o != si);
            order.push(si);
            missing -= 1;
        }
    }
    let mut out: [Vec<BagRecord>; 3] = Default::default();
    for ((_, mut members), q) in strata.into_iter().zip(quota) {
        if q.iter().sum::<usize>() > members.len() {
            return Err(DataError::Split("stratum too small for requested split".into()));
        }
        members.shuffle(&mut rng);
        let mut iter = members.into_iter();
        for part in 0..3 {
            out[part].extend(iter.by_ref().take(q[part]));
        }
    }
    for part in out.iter_mut() {
        part.shuffle(&mut rng);
    }
    let [train, val, test] = out;
    Ok(Splits { train, val, test })
}

/// One bag id per line.
pub fn manifest(bags: &[BagRecord]) -> String {
    bags.iter().map(|b| format!("{}\n", b.id)).collect()
}

/// Selects the bags listed in a manifest, in manifest order.
pub fn select_by_manifest(bags: &[BagRecord], text: &str) -> Result<Vec<BagRecord>, DataError> {
    let mut seen = HashSet::new();
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|id| {
            if !seen.insert(id.to_string()) {
                return Err(DataError::Split(format!("duplicate id {id} in manifest")));
            }
            bags.iter()
                .find(|b| b.id == id)
                .cloned()
                .ok_or_else(|| DataError::Split(format!("manifest id {id} not found")))
        })
        .collect()
}

/// `count` bags with classes as balanced as possible, chosen by seed.
pub fn balanced_sample(bags: &[BagRecord], count: usize, seed: u64) -> Result<Vec<BagRecord>, DataError> {
    if count > bags.len() {
        return Err(DataError::Split(format!(
            "asked for {count} bags, only {} available",
            bags.len()
        )));
    }
    let mut by_class: Vec<(usize, Vec<&BagRecord>)> = Vec::new();
    for b in bags {
        let key = match b.label {
            Label::Class(c) => c,
            Label::Survival(s) => usize::from(s.censored),
        };
        match by_class.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(b),
            None => by_class.push((key, vec![b])),
        }
    }
    by_class.sort_by_key(|(k, _)| *k);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, v) in by_class.iter_mut() {
        v.shuffle(&mut rng);
    }
    let mut picked = Vec::with_capacity(count);
    let mut round = 0;
    while picked.len() < count {
        for (_, v) in &by_class {
            if picked.len() < count && round < v.len() {
                picked.push(v[round].clone());
            }
        }
        round += 1;
    }
    Ok(picked)
}
