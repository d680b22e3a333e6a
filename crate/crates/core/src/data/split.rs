use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use chrono::{Datelike, NaiveDateTime};
use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::Magnetogram;
use crate::error::{Error, Result};
use crate::rng::{derive_labeled, rng_from};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct YearMonth {
    pub year: i32,
    pub month: u32,
}

impl YearMonth {
    pub fn of(t: NaiveDateTime) -> Self {
        YearMonth {
            year: t.year(),
            month: t.month(),
        }
    }
}

impl fmt::Display for YearMonth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04}-{:02}", self.year, self.month)
    }
}

impl FromStr for YearMonth {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Schema(format!("expected YYYY-MM, got {s:?}"));
        let (y, m) = s.split_once('-').ok_or_else(bad)?;
        let year = y.parse().map_err(|_| bad())?;
        let month: u32 = m.parse().map_err(|_| bad())?;
        if !(1..=12).contains(&month) {
            return Err(bad());
        }
        Ok(YearMonth { year, month })
    }
}

impl Serialize for YearMonth {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for YearMonth {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Val,
    Test,
}

/// (year, month) → partition, serialized as
/// `{"seed": …, "entries": {"YYYY-MM": "train|val|test"}}`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub seed: u64,
    pub entries: BTreeMap<YearMonth, Partition>,
}

impl SplitAssignment {
    pub fn partition_of(&self, ym: YearMonth) -> Option<Partition> {
        self.entries.get(&ym).copied()
    }

    pub fn count(&self, part: Partition) -> usize {
        self.entries.values().filter(|p| **p == part).count()
    }

    /// Magnetograms whose month falls in `part`, in input order.
    pub fn select<'a>(&self, magnetograms: &'a [Magnetogram], part: Partition) -> Vec<&'a Magnetogram> {
        magnetograms
            .iter()
            .filter(|m| m.year_month().and_then(|ym| self.partition_of(ym)) == Some(part))
            .collect()
    }
}

/// Months with data, grouped by year.
pub fn available_months(magnetograms: &[Magnetogram]) -> BTreeMap<i32, BTreeSet<u32>> {
    let mut out: BTreeMap<i32, BTreeSet<u32>> = BTreeMap::new();
    for ym in magnetograms.iter().filter_map(Magnetogram::year_month) {
        out.entry(ym.year).or_default().insert(ym.month);
    }
    out
}

/// Per year: one month to test, a different month to validation, the rest
/// to training. Each year draws from its own stream keyed by (seed, year),
/// test month first.
pub fn make_temporal_split(
    years: &BTreeMap<i32, BTreeSet<u32>>,
    seed: u64,
) -> Result<SplitAssignment> {
    let mut entries = BTreeMap::new();
    for (&year, months) in years {
        if months.len() < 2 {
            return Err(Error::invalid(format!(
                "year {year} has {} month(s) of data; at least 2 are needed",
                months.len()
            )));
        }
        let mut pool: Vec<u32> = months.iter().copied().collect();
        let mut rng = rng_from(derive_labeled(seed, "split", year as i64 as u64));
        let test = pool.remove(rng.random_range(0..pool.len()));
        let val = pool.remove(rng.random_range(0..pool.len()));
        entries.insert(YearMonth { year, month: test }, Partition::Test);
        entries.insert(YearMonth { year, month: val }, Partition::Val);
        for month in pool {
            entries.insert(YearMonth { year, month }, Partition::Train);
        }
    }
    Ok(SplitAssignment { seed, entries })
}
