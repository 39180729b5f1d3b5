//! Append-only forecast store persisted as sorted JSON lines plus a manifest.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::distributions::DistSpec;
use crate::dmlp::DayForecast;

use super::{io_err, HarnessError, Result};

pub const STORE_FORMAT_VERSION: u32 = 1;
pub const FORECASTS_FILE: &str = "forecasts.jsonl";
pub const GAPS_FILE: &str = "gaps.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

pub type StoreKey = (String, usize, NaiveDate);

/// A (model, run, day) without a forecast and the reason.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gap {
    pub model: String,
    pub run: usize,
    pub day: NaiveDate,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub models: Vec<String>,
    pub n_forecasts: usize,
    pub n_gaps: usize,
    pub forecasts_sha256: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ForecastStore {
    records: BTreeMap<StoreKey, Vec<DistSpec<f64>>>,
    gaps: BTreeMap<StoreKey, String>,
}

fn key(model: &str, run: usize, day: NaiveDate) -> StoreKey {
    (model.to_string(), run, day)
}

impl ForecastStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn check_free(&self, k: &StoreKey) -> Result<()> {
        if self.records.contains_key(k) || self.gaps.contains_key(k) {
            return Err(HarnessError::DuplicateKey {
                model: k.0.clone(),
                run: k.1,
                day: k.2,
            });
        }
        Ok(())
    }

    pub fn insert(&mut self, f: DayForecast) -> Result<()> {
        let k = key(&f.model, f.run, f.day);
        self.check_free(&k)?;
        self.records.insert(k, f.hours);
        Ok(())
    }

    pub fn insert_gap(&mut self, g: Gap) -> Result<()> {
        let k = key(&g.model, g.run, g.day);
        self.check_free(&k)?;
        self.gaps.insert(k, g.reason);
        Ok(())
    }

    pub fn get(&self, model: &str, run: usize, day: NaiveDate) -> Option<&[DistSpec<f64>]> {
        self.records.get(&key(model, run, day)).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &StoreKey> {
        self.records.keys()
    }

    /// Distinct (model, run) pairs with forecasts or gaps, sorted.
    pub fn series(&self) -> Vec<(String, usize)> {
        let mut out: Vec<(String, usize)> = self
            .records
            .keys()
            .chain(self.gaps.keys())
            .map(|(m, r, _)| (m.clone(), *r))
            .collect();
        out.sort();
        out.dedup();
        out
    }

    pub fn gaps(&self) -> impl Iterator<Item = Gap> + '_ {
        self.gaps.iter().map(|((model, run, day), reason)| Gap {
            model: model.clone(),
            run: *run,
            day: *day,
            reason: reason.clone(),
        })
    }

    pub fn n_gaps(&self) -> usize {
        self.gaps.len()
    }

    /// Adds every record and gap of `other`; keys must not collide.
    pub fn merge(&mut self, other: ForecastStore) -> Result<()> {
        for (k, v) in other.records {
            self.check_free(&k)?;
            self.records.insert(k, v);
        }
        for (k, v) in other.gaps {
            self.check_free(&k)?;
            self.gaps.insert(k, v);
        }
        Ok(())
    }

    /// Forecast records as JSON lines, sorted by (model, run, day).
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for ((model, run, day), hours) in &self.records {
            let rec = DayForecast {
                day: *day,
                model: model.clone(),
                run: *run,
                hours: hours.clone(),
            };
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n")?;
        }
        out.flush()
    }

    fn write_gaps<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for g in self.gaps() {
            serde_json::to_writer(&mut out, &g)?;
            out.write_all(b"\n")?;
        }
        out.flush()
    }

    /// Writes forecasts, gaps and the manifest into `dir`.
    pub fn save(&self, dir: &Path, config_hash: &str, seed: u64) -> Result<Manifest> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let mut bytes = Vec::new();
        self.write_jsonl(&mut bytes).expect("in-memory write");
        let fpath = dir.join(FORECASTS_FILE);
        std::fs::write(&fpath, &bytes).map_err(io_err(&fpath))?;
        let gpath = dir.join(GAPS_FILE);
        let gfile = File::create(&gpath).map_err(io_err(&gpath))?;
        self.write_gaps(BufWriter::new(gfile))
            .map_err(io_err(&gpath))?;
        let mut models: Vec<String> = self.series().into_iter().map(|(m, _)| m).collect();
        models.dedup();
        let manifest = Manifest {
            format_version: STORE_FORMAT_VERSION,
            config_hash: config_hash.to_string(),
            seed,
            models,
            n_forecasts: self.len(),
            n_gaps: self.n_gaps(),
            forecasts_sha256: format!("{:x}", Sha256::digest(&bytes)),
        };
        let mpath = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        std::fs::write(&mpath, text + "\n").map_err(io_err(&mpath))?;
        Ok(manifest)
    }

    /// Reads a saved store and checks it against its manifest.
    pub fn load(dir: &Path) -> Result<(Self, Manifest)> {
        let mpath = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| HarnessError::Format {
            path: mpath.clone(),
            message: e.to_string(),
        })?;
        if manifest.format_version != STORE_FORMAT_VERSION {
            return Err(HarnessError::Manifest(format!(
                "unsupported format version {}",
                manifest.format_version
            )));
        }
        let fpath = dir.join(FORECASTS_FILE);
        let bytes = std::fs::read(&fpath).map_err(io_err(&fpath))?;
        if format!("{:x}", Sha256::digest(&bytes)) != manifest.forecasts_sha256 {
            return Err(HarnessError::Manifest(format!(
                "{} does not match its checksum",
                fpath.display()
            )));
        }
        let mut store = Self::new();
        for (i, line) in bytes
            .split(|&b| b == b'\n')
            .enumerate()
            .filter(|(_, l)| !l.is_empty())
        {
            let rec: DayForecast =
                serde_json::from_slice(line).map_err(|e| HarnessError::Format {
                    path: fpath.clone(),
                    message: format!("line {}: {e}", i + 1),
                })?;
            store.insert(rec)?;
        }
        let gpath = dir.join(GAPS_FILE);
        if gpath.exists() {
            let file = File::open(&gpath).map_err(io_err(&gpath))?;
            for line in BufReader::new(file).lines() {
                let line = line.map_err(io_err(&gpath))?;
                if line.is_empty() {
                    continue;
                }
                let g: Gap = serde_json::from_str(&line).map_err(|e| HarnessError::Format {
                    path: gpath.clone(),
                    message: e.to_string(),
                })?;
                store.insert_gap(g)?;
            }
        }
        if store.len() != manifest.n_forecasts || store.n_gaps() != manifest.n_gaps {
            return Err(HarnessError::Manifest(
                "record counts differ from the manifest".into(),
            ));
        }
        Ok((store, manifest))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn day(i: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(2020, 1, i).unwrap()
    }

    fn rec(model: &str, run: usize, d: u32) -> DayForecast {
        DayForecast {
            day: day(d),
            model: model.into(),
            run,
            hours: (0..24)
                .map(|h| DistSpec::jsu(h as f64 * 0.1 + 1.0 / 3.0, 2.0, -0.5, 1.5))
                .collect(),
        }
    }

    #[test]
    fn duplicates_rejected() {
        let mut s = ForecastStore::new();
        s.insert(rec("a", 1, 1)).unwrap();
        assert!(matches!(
            s.insert(rec("a", 1, 1)),
            Err(HarnessError::DuplicateKey { .. })
        ));
        let g = Gap {
            model: "a".into(),
            run: 1,
            day: day(1),
            reason: "x".into(),
        };
        assert!(s.insert_gap(g).is_err());
    }

    #[test]
    fn save_load_roundtrip_is_sorted_and_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = ForecastStore::new();
        for (m, r, d) in [("b", 0, 2), ("a", 2, 1), ("a", 1, 3), ("a", 1, 1)] {
            s.insert(rec(m, r, d)).unwrap();
        }
        s.insert_gap(Gap {
            model: "b".into(),
            run: 0,
            day: day(3),
            reason: "diverged".into(),
        })
        .unwrap();
        let m = s.save(dir.path(), "abc", 9).unwrap();
        assert_eq!(m.n_forecasts, 4);
        assert_eq!(m.models, vec!["a".to_string(), "b".into()]);
        let text = std::fs::read_to_string(dir.path().join(FORECASTS_FILE)).unwrap();
        let order: Vec<DayForecast> = text
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        let keys: Vec<_> = order
            .iter()
            .map(|r| (r.model.clone(), r.run, r.day))
            .collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
        let (back, m2) = ForecastStore::load(dir.path()).unwrap();
        assert_eq!(back, s);
        assert_eq!(m2, m);
    }

    #[test]
    fn tampered_store_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = ForecastStore::new();
        s.insert(rec("a", 1, 1)).unwrap();
        s.save(dir.path(), "abc", 0).unwrap();
        let p = dir.path().join(FORECASTS_FILE);
        let text = std::fs::read_to_string(&p)
            .unwrap()
            .replace("\"run\":1", "\"run\":2");
        std::fs::write(&p, text).unwrap();
        assert!(matches!(
            ForecastStore::load(dir.path()),
            Err(HarnessError::Manifest(_))
        ));
    }
}
