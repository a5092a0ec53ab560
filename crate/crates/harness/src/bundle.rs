//! On-disk run bundle: config snapshot plus one directory per seed.
//!
//! Every artifact is stored next to the key of the inputs that produced it;
//! a stage whose key matches is loaded instead of recomputed.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use decaf_core::process::Trajectory;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;

pub const CONFIG_FILE: &str = "config.json";
pub const RESULTS_FILE: &str = "results.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const PLOT_FILE: &str = "plot.csv";

#[derive(Debug, Clone)]
pub struct Bundle {
    root: PathBuf,
}

#[derive(Serialize, Deserialize)]
struct Keyed<T> {
    key: String,
    value: T,
}

impl Bundle {
    /// Opens `root`, creating it and writing the config snapshot.
    pub fn create(root: &Path, config: &ExperimentConfig) -> Result<Self> {
        fs::create_dir_all(root).with_context(|| format!("creating bundle {}", root.display()))?;
        let bundle = Bundle { root: root.to_path_buf() };
        bundle.write_text(&bundle.root.join(CONFIG_FILE), &serde_json::to_string_pretty(config)?)?;
        Ok(bundle)
    }

    /// Opens an existing bundle and its config snapshot.
    pub fn open(root: &Path) -> Result<(Self, ExperimentConfig)> {
        let cfg = ExperimentConfig::load(&root.join(CONFIG_FILE))
            .with_context(|| format!("{} is not a run bundle", root.display()))?;
        Ok((Bundle { root: root.to_path_buf() }, cfg))
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.root.join(format!("seed-{seed}"))
    }

    pub fn path(&self, seed: u64, name: &str) -> PathBuf {
        self.seed_dir(seed).join(name)
    }

    pub fn write_text(&self, path: &Path, text: &str) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, text).with_context(|| format!("writing {}", path.display()))
    }

    pub fn write_json<T: Serialize>(&self, seed: u64, name: &str, key: &str, value: &T) -> Result<()> {
        let path = self.path(seed, &format!("{name}.json"));
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let file = fs::File::create(&path).with_context(|| format!("writing {}", path.display()))?;
        let mut w = BufWriter::new(file);
        serde_json::to_writer(&mut w, &Keyed { key: key.to_string(), value })?;
        w.flush()?;
        Ok(())
    }

    /// The stored value of `name` if its key equals `key`.
    pub fn read_json<T: DeserializeOwned>(&self, seed: u64, name: &str, key: &str) -> Result<Option<T>> {
        let path = self.path(seed, &format!("{name}.json"));
        if !path.exists() {
            return Ok(None);
        }
        let file = fs::File::open(&path)?;
        let stored: Keyed<T> = serde_json::from_reader(BufReader::new(file))
            .with_context(|| format!("reading {}", path.display()))?;
        Ok((stored.key == key).then_some(stored.value))
    }

    pub fn cached_json<T, G>(&self, seed: u64, name: &str, key: &str, compute: G) -> Result<T>
    where
        T: Serialize + DeserializeOwned,
        G: FnOnce() -> Result<T>,
    {
        if let Some(v) = self.read_json(seed, name, key)? {
            log::debug!("seed={seed} artifact={name} cached");
            return Ok(v);
        }
        let v = compute()?;
        self.write_json(seed, name, key, &v)?;
        Ok(v)
    }

    pub fn cached_trajectory<G>(&self, seed: u64, name: &str, key: &str, compute: G) -> Result<Trajectory<f64>>
    where
        G: FnOnce() -> Result<Trajectory<f64>>,
    {
        let data = self.path(seed, &format!("{name}.traj"));
        let key_path = self.path(seed, &format!("{name}.traj.key"));
        if data.exists() && fs::read_to_string(&key_path).ok().as_deref() == Some(key) {
            let file = fs::File::open(&data)?;
            return Trajectory::read_binary(BufReader::new(file))
                .with_context(|| format!("reading {}", data.display()));
        }
        let traj = compute()?;
        fs::create_dir_all(self.seed_dir(seed))?;
        let mut w = BufWriter::new(fs::File::create(&data)?);
        traj.write_binary(&mut w)?;
        w.flush()?;
        fs::write(&key_path, key)?;
        Ok(traj)
    }

    /// Appends one line to the seed's event log.
    pub fn log_event(&self, seed: u64, line: &str) -> Result<()> {
        fs::create_dir_all(self.seed_dir(seed))?;
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.path(seed, "events.log"))?;
        writeln!(f, "{line}")?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keyed_cache_recomputes_on_key_change() {
        let dir = tempfile::tempdir().unwrap();
        let b = Bundle::create(dir.path(), &ExperimentConfig::default()).unwrap();
        let mut calls = 0;
        let v: Vec<u32> = b
            .cached_json(1, "x", "k1", || {
                calls += 1;
                Ok(vec![1, 2])
            })
            .unwrap();
        assert_eq!(v, vec![1, 2]);
        let v: Vec<u32> = b.cached_json(1, "x", "k1", || unreachable!()).unwrap();
        assert_eq!(v, vec![1, 2]);
        let v: Vec<u32> = b
            .cached_json(1, "x", "k2", || {
                calls += 1;
                Ok(vec![3])
            })
            .unwrap();
        assert_eq!((v, calls), (vec![3], 2));
    }

    #[test]
    fn open_reads_the_snapshot() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig {
            seeds: vec![4, 5],
            ..Default::default()
        };
        Bundle::create(dir.path(), &cfg).unwrap();
        let (_, back) = Bundle::open(dir.path()).unwrap();
        assert_eq!(back, cfg);
        assert!(Bundle::open(&dir.path().join("nope")).is_err());
    }
}
