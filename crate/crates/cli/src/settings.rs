//! Run-wide settings: the line-based `key = value` config file, global
//! flags, the run log, and the checkpoint-directory lock.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use anyhow::{anyhow, Context, Result};
use sha2::{Digest, Sha256};

/// Parsed `key = value` configuration. '#' starts a comment line.
#[derive(Debug, Clone, Default)]
pub struct Config {
    map: BTreeMap<String, String>,
    /// Canonical text used for the run-log digest.
    canonical: String,
}

impl Config {
    pub fn parse(text: &str) -> Result<Config> {
        let mut map = BTreeMap::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("config line {}: expected 'key = value'", ln + 1))?;
            map.insert(key.trim().to_string(), value.trim().to_string());
        }
        let canonical = map
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect::<String>();
        Ok(Config { map, canonical })
    }

    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Config::parse(&text)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(|s| s.as_str())
    }

    pub fn get_parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.map.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse::<T>()
                .map(Some)
                .map_err(|_| anyhow!("config key '{key}': cannot parse '{raw}'")),
        }
    }

    /// Flag value if present, else config value, else default.
    pub fn resolve<T: FromStr + Clone>(
        &self,
        flag: Option<T>,
        key: &str,
        default: T,
    ) -> Result<T> {
        if let Some(v) = flag {
            return Ok(v);
        }
        Ok(self.get_parsed(key)?.unwrap_or(default))
    }

    pub fn digest(&self, seed: u64) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.canonical.as_bytes());
        hasher.update(seed.to_le_bytes());
        let out = hasher.finalize();
        out.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

/// Global run state shared by every command.
pub struct Run {
    pub config: Config,
    pub seed: u64,
    pub threads: usize,
    pub dry_run: bool,
    pub runlog_path: PathBuf,
    command: String,
    started: Instant,
    outputs: Vec<PathBuf>,
}

impl Run {
    pub fn new(
        command: &str,
        config_path: Option<&Path>,
        seed: Option<u64>,
        threads: Option<usize>,
        dry_run: bool,
    ) -> Result<Run> {
        let config = match config_path {
            Some(p) => Config::load(p)?,
            None => Config::default(),
        };
        let seed = match seed {
            Some(s) => s,
            None => config.get_parsed::<u64>("seed")?.unwrap_or(1),
        };
        let threads = match threads {
            Some(t) => t,
            None => config.get_parsed::<usize>("threads")?.unwrap_or(1),
        };
        let runlog_path = PathBuf::from(
            config.get("runlog").unwrap_or("mmdfr-runs.log"),
        );
        Ok(Run {
            config,
            seed,
            threads,
            dry_run,
            runlog_path,
            command: command.to_string(),
            started: Instant::now(),
            outputs: Vec::new(),
        })
    }

    pub fn record_output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    /// Appends the one-line JSON run entry. Skipped in dry-run mode (a
    /// dry run writes nothing).
    pub fn finish(&self) -> Result<()> {
        if self.dry_run {
            return Ok(());
        }
        let entry = serde_json::json!({
            "command": self.command,
            "config_digest": self.config.digest(self.seed),
            "seed": self.seed,
            "elapsed_ms": self.started.elapsed().as_millis() as u64,
            "outputs": self.outputs.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
        });
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.runlog_path)
            .with_context(|| format!("opening run log {}", self.runlog_path.display()))?;
        writeln!(file, "{entry}")?;
        Ok(())
    }
}

/// Declared file traffic for dry-run auditing.
#[derive(Debug, Default)]
pub struct IoPlan {
    pub reads: Vec<PathBuf>,
    pub writes: Vec<PathBuf>,
}

impl IoPlan {
    pub fn read(&mut self, p: &Path) {
        self.reads.push(p.to_path_buf());
    }

    pub fn write(&mut self, p: &Path) {
        self.writes.push(p.to_path_buf());
    }

    pub fn print(&self) {
        for p in &self.reads {
            println!("read {}", p.display());
        }
        for p in &self.writes {
            println!("write {}", p.display());
        }
    }
}

/// Exclusive lock on a checkpoint directory held by training commands.
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<DirLock> {
        std::fs::create_dir_all(dir)
            .with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(".mmdfr-lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(DirLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(anyhow!(
                "another training run holds the lock {} (remove it if stale)",
                path.display()
            )),
            Err(e) => Err(e).with_context(|| format!("creating lock {}", path.display())),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}
