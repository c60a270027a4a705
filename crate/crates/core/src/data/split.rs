use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::manifest::{Label, LensClass, RelabelPolicy, SampleRecord, Split};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolKind {
    /// One sensor, half for training and half for testing.
    Intra,
    /// Every record of the training sensors against every record of the test sensors.
    Inter,
    /// Half of the union of the named sensors (all sensors when none are named).
    Combined,
    /// Like inter, with several training sensors and an unseen test sensor.
    CrossDatabase,
    /// Combined split of the target sensors, initialized from a checkpoint.
    Incremental,
    /// Combined split with the lens class as the target.
    LensDetection,
}

impl ProtocolKind {
    pub fn name(self) -> &'static str {
        match self {
            ProtocolKind::Intra => "intra",
            ProtocolKind::Inter => "inter",
            ProtocolKind::Combined => "combined",
            ProtocolKind::CrossDatabase => "cross_database",
            ProtocolKind::Incremental => "incremental",
            ProtocolKind::LensDetection => "lens_detection",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProtocolSpec {
    pub kind: ProtocolKind,
    pub train_sensors: Vec<String>,
    pub test_sensors: Vec<String>,
    /// Dataset filters; empty keeps every dataset.
    pub train_datasets: Vec<String>,
    pub test_datasets: Vec<String>,
    pub relabel: RelabelPolicy,
    /// Starting weights for incremental runs.
    pub checkpoint: Option<PathBuf>,
    /// Keep only this many test records, drawn with `seed`.
    pub test_subsample: Option<usize>,
    pub seed: u64,
}

impl Default for ProtocolSpec {
    fn default() -> Self {
        ProtocolSpec {
            kind: ProtocolKind::Combined,
            train_sensors: Vec::new(),
            test_sensors: Vec::new(),
            train_datasets: Vec::new(),
            test_datasets: Vec::new(),
            relabel: RelabelPolicy::default(),
            checkpoint: None,
            test_subsample: None,
            seed: 0,
        }
    }
}

impl ProtocolSpec {
    pub fn intra(sensor: &str) -> Self {
        ProtocolSpec {
            kind: ProtocolKind::Intra,
            train_sensors: vec![sensor.to_string()],
            ..Default::default()
        }
    }

    pub fn inter(train: &str, test: &str) -> Self {
        ProtocolSpec {
            kind: ProtocolKind::Inter,
            train_sensors: vec![train.to_string()],
            test_sensors: vec![test.to_string()],
            ..Default::default()
        }
    }

    pub fn cross_database(train: &[&str], test: &str) -> Self {
        ProtocolSpec {
            kind: ProtocolKind::CrossDatabase,
            train_sensors: train.iter().map(|s| s.to_string()).collect(),
            test_sensors: vec![test.to_string()],
            ..Default::default()
        }
    }

    /// Checks the spec on its own and against the sensors present in `records`.
    pub fn validate(&self, records: &[SampleRecord]) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(format!("{} protocol: {msg}", self.kind.name())));
        match self.kind {
            ProtocolKind::Intra if self.train_sensors.len() != 1 => {
                return bad("needs exactly one training sensor".into())
            }
            ProtocolKind::Inter | ProtocolKind::CrossDatabase => {
                if self.train_sensors.is_empty() || self.test_sensors.is_empty() {
                    return bad("needs training and test sensors".into());
                }
                if let Some(s) = self.test_sensors.iter().find(|s| self.train_sensors.contains(s)) {
                    return bad(format!("sensor {s} is on both sides"));
                }
            }
            ProtocolKind::Incremental if self.checkpoint.is_none() => return bad("needs a checkpoint".into()),
            _ => {}
        }
        for s in self.train_sensors.iter().chain(&self.test_sensors) {
            if !records.iter().any(|r| &r.sensor == s) {
                return Err(Error::Data(format!("sensor {s} not found in manifest")));
            }
        }
        for d in self.train_datasets.iter().chain(&self.test_datasets) {
            if !records.iter().any(|r| &r.dataset == d) {
                return Err(Error::Data(format!("dataset {d} not found in manifest")));
            }
        }
        Ok(())
    }

    fn uses_fixed_sides(&self) -> bool {
        matches!(self.kind, ProtocolKind::Inter | ProtocolKind::CrossDatabase)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Vec<SampleRecord>,
    pub test: Vec<SampleRecord>,
}

fn keep(r: &SampleRecord, sensors: &[String], datasets: &[String]) -> bool {
    (sensors.is_empty() || sensors.contains(&r.sensor)) && (datasets.is_empty() || datasets.contains(&r.dataset))
}

/// Builds the train and test sides of a protocol. Records carrying a provided
/// split are placed by it; the rest are divided by a stratified, seeded holdout.
pub fn make_protocol_splits(records: &[SampleRecord], spec: &ProtocolSpec) -> Result<Splits> {
    spec.validate(records)?;
    let (train, mut test) = if spec.uses_fixed_sides() {
        let train: Vec<_> = records
            .iter()
            .filter(|r| keep(r, &spec.train_sensors, &spec.train_datasets))
            .cloned()
            .collect();
        let test: Vec<_> = records
            .iter()
            .filter(|r| keep(r, &spec.test_sensors, &spec.test_datasets))
            .cloned()
            .collect();
        (train, test)
    } else {
        let pool: Vec<SampleRecord> = records
            .iter()
            .filter(|r| keep(r, &spec.train_sensors, &spec.train_datasets))
            .cloned()
            .collect();
        let (given, open): (Vec<_>, Vec<_>) = pool.into_iter().partition(|r| r.split != Split::Unassigned);
        let (mut train, mut test) = holdout(&open, spec.seed);
        for r in given {
            if r.split == Split::Train {
                train.push(r);
            } else {
                test.push(r);
            }
        }
        (train, test)
    };
    if let Some(n) = spec.test_subsample {
        test = subsample(&test, n, spec.seed ^ 0x7e57);
    }
    if train.is_empty() || test.is_empty() {
        return Err(Error::Data(format!(
            "{} protocol produced an empty side ({} train, {} test)",
            spec.kind.name(),
            train.len(),
            test.len()
        )));
    }
    Ok(Splits { train, test })
}

type Stratum = (Label, LensClass);

fn strata(records: &[SampleRecord]) -> BTreeMap<Stratum, Vec<usize>> {
    let mut groups: BTreeMap<Stratum, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        groups.entry((r.label, r.lens_class)).or_default().push(i);
    }
    groups
}

/// Stratified split of `records` taking `quota(group_size)` from each group for
/// the first side, then topping up from groups with leftover rounding until the
/// first side holds `total` records. Both sides keep manifest order.
fn stratified(records: &[SampleRecord], total: usize, quota: impl Fn(usize) -> usize, seed: u64) -> (Vec<SampleRecord>, Vec<SampleRecord>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut groups: Vec<Vec<usize>> = strata(records).into_values().collect();
    for g in &mut groups {
        g.shuffle(&mut rng);
    }
    let mut take: Vec<usize> = groups.iter().map(|g| quota(g.len()).min(g.len())).collect();
    let mut have: usize = take.iter().sum();
    for (t, g) in take.iter_mut().zip(&groups) {
        if have >= total {
            break;
        }
        if *t < g.len() {
            *t += 1;
            have += 1;
        }
    }
    let mut first = vec![false; records.len()];
    for (g, t) in groups.iter().zip(&take) {
        for &i in &g[..*t] {
            first[i] = true;
        }
    }
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for (r, f) in records.iter().zip(first) {
        if f {
            a.push(r.clone());
        } else {
            b.push(r.clone());
        }
    }
    (a, b)
}

/// Seeded 50/50 holdout, stratified by label and lens class. The training side
/// receives the extra record when the count is odd.
pub fn holdout(records: &[SampleRecord], seed: u64) -> (Vec<SampleRecord>, Vec<SampleRecord>) {
    let n = records.len();
    stratified(records, n - n / 2, |g| g / 2, seed)
}

/// Stratified validation slice of `fraction` of the training records; returns
/// `(train, validation)`.
pub fn validation_split(records: &[SampleRecord], fraction: f64, seed: u64) -> Result<(Vec<SampleRecord>, Vec<SampleRecord>)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::InvalidArgument(format!("validation fraction {fraction} outside [0,1)")));
    }
    let n = records.len();
    let want = ((n as f64 * fraction).round() as usize).max(usize::from(fraction > 0.0 && n >= 2));
    let (val, train) = stratified(records, want, |g| (g as f64 * fraction).floor() as usize, seed ^ 0xa11d);
    Ok((train, val))
}

/// Seeded draw of `n` records without replacement, kept in manifest order.
pub fn subsample(records: &[SampleRecord], n: usize, seed: u64) -> Vec<SampleRecord> {
    if n >= records.len() {
        return records.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, records.len(), n).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| records[i].clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(i: usize, sensor: &str, class: LensClass) -> SampleRecord {
        SampleRecord {
            path: PathBuf::from(format!("{sensor}/{i}.png")),
            label: RelabelPolicy::default().label(class),
            lens_class: class,
            sensor: sensor.into(),
            dataset: "d".into(),
            split: Split::Unassigned,
        }
    }

    #[test]
    fn holdout_halves_with_odd_strata() {
        let recs: Vec<_> = (0..100)
            .map(|i| rec(i, "A", if i < 33 { LensClass::Normal } else { LensClass::Textured }))
            .collect();
        let (a, b) = holdout(&recs, 4);
        assert_eq!((a.len(), b.len()), (50, 50));
        let normals = a.iter().filter(|r| r.lens_class == LensClass::Normal).count();
        assert!(normals == 16 || normals == 17);
    }

    #[test]
    fn validation_slice_is_stratified() {
        let recs: Vec<_> = (0..200)
            .map(|i| rec(i, "A", if i % 4 == 0 { LensClass::Normal } else { LensClass::Print }))
            .collect();
        let (train, val) = validation_split(&recs, 0.1, 1).unwrap();
        assert_eq!((train.len(), val.len()), (180, 20));
        assert_eq!(val.iter().filter(|r| r.lens_class == LensClass::Normal).count(), 5);
        assert!(validation_split(&recs, 1.0, 0).is_err());
    }

    #[test]
    fn subsample_is_seeded_and_ordered() {
        let recs: Vec<_> = (0..50).map(|i| rec(i, "A", LensClass::Normal)).collect();
        let s = subsample(&recs, 9, 2);
        assert_eq!(s.len(), 9);
        assert_eq!(s, subsample(&recs, 9, 2));
        let pos: Vec<usize> = s.iter().map(|r| recs.iter().position(|q| q == r).unwrap()).collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn incremental_needs_checkpoint() {
        let recs = vec![rec(0, "A", LensClass::Normal), rec(1, "A", LensClass::Soft)];
        let spec = ProtocolSpec {
            kind: ProtocolKind::Incremental,
            ..Default::default()
        };
        assert!(make_protocol_splits(&recs, &spec).is_err());
    }
}
