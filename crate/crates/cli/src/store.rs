//! Output directory with config-hash stamps.
//!
//! JSON files wrap their payload as `{"config_hash": .., "data": ..}`.
//! JSONL files start with a header line carrying the hash. TSV files start
//! with a `# config_hash <hash>` comment line.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;

pub const STAMP_FILE: &str = "stamp.json";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stamped<T> {
    pub config_hash: String,
    pub data: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct JsonlHeader {
    config_hash: String,
    kind: String,
}

#[derive(Debug, Clone)]
pub struct Store {
    root: PathBuf,
    hash: String,
}

impl Store {
    /// Opens `root` for `cfg`, stamping a fresh directory.
    ///
    /// A directory stamped by another config is refused unless `clean`,
    /// in which case it is deleted first.
    pub fn open(root: &Path, cfg: &ExperimentConfig, clean: bool) -> Result<Self> {
        let hash = cfg.hash();
        if clean && root.exists() {
            fs::remove_dir_all(root).with_context(|| format!("cleaning {}", root.display()))?;
        }
        let store = Self { root: root.to_path_buf(), hash };
        match store.stamped_hash()? {
            Some(h) if h == store.hash => return Ok(store),
            Some(h) => bail!(
                "{} holds results of config {h}, not {}; rerun with --clean to discard them",
                root.display(),
                store.hash
            ),
            None => {}
        }
        if root.exists() && fs::read_dir(root)?.next().is_some() {
            bail!("{} is not empty and carries no stamp; rerun with --clean to discard it", root.display());
        }
        fs::create_dir_all(root)?;
        let snapshot = format!("# config_hash {}\n{}", store.hash, cfg.to_toml()?);
        store.write_raw(CONFIG_FILE, snapshot.as_bytes())?;
        store.write_json(STAMP_FILE, &())?;
        Ok(store)
    }

    /// Attaches to a directory already stamped with `cfg`'s hash.
    pub fn attach(root: &Path, cfg: &ExperimentConfig) -> Result<Self> {
        let store = Self { root: root.to_path_buf(), hash: cfg.hash() };
        match store.stamped_hash()? {
            Some(h) if h == store.hash => Ok(store),
            _ => bail!("{} is not stamped with config {}", root.display(), store.hash),
        }
    }

    fn stamped_hash(&self) -> Result<Option<String>> {
        let path = self.path(STAMP_FILE);
        if !path.exists() {
            return Ok(None);
        }
        let s: Stamped<()> = serde_json::from_str(&fs::read_to_string(&path)?)
            .with_context(|| format!("reading {}", path.display()))?;
        Ok(Some(s.config_hash))
    }

    pub fn hash(&self) -> &str {
        &self.hash
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.root.join(rel)
    }

    pub fn exists(&self, rel: impl AsRef<Path>) -> bool {
        self.path(rel).exists()
    }

    /// Writes through a temporary file and a rename, so readers never see
    /// a half-written file.
    pub fn write_raw(&self, rel: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
        let path = self.path(rel);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
        fs::rename(&tmp, &path)?;
        Ok(())
    }

    pub fn write_json<T: Serialize>(&self, rel: impl AsRef<Path>, data: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(&Stamped { config_hash: self.hash.clone(), data })?;
        text.push('\n');
        self.write_raw(rel, text.as_bytes())
    }

    /// `None` when the file is missing; an error when it carries another hash.
    pub fn read_json<T: DeserializeOwned>(&self, rel: impl AsRef<Path>) -> Result<Option<T>> {
        let path = self.path(rel);
        if !path.exists() {
            return Ok(None);
        }
        let s: Stamped<T> = serde_json::from_str(&fs::read_to_string(&path)?)
            .with_context(|| format!("reading {}", path.display()))?;
        self.check(&s.config_hash, &path)?;
        Ok(Some(s.data))
    }

    fn check(&self, found: &str, path: &Path) -> Result<()> {
        if found != self.hash {
            bail!("{} was written by config {found}, expected {}", path.display(), self.hash);
        }
        Ok(())
    }

    pub fn write_jsonl<T: Serialize>(&self, rel: impl AsRef<Path>, kind: &str, records: &[T]) -> Result<()> {
        let mut body = Vec::new();
        for r in records {
            serde_json::to_writer(&mut body, r)?;
            body.push(b'\n');
        }
        self.write_jsonl_body(rel, kind, &body)
    }

    /// Writes the header followed by already serialized lines.
    pub fn write_jsonl_body(&self, rel: impl AsRef<Path>, kind: &str, body: &[u8]) -> Result<()> {
        let mut buf = serde_json::to_vec(&JsonlHeader { config_hash: self.hash.clone(), kind: kind.into() })?;
        buf.push(b'\n');
        buf.extend_from_slice(body);
        self.write_raw(rel, &buf)
    }

    /// Body lines of a JSONL file after its header has been checked.
    pub fn open_jsonl(&self, rel: impl AsRef<Path>, kind: &str) -> Result<impl BufRead> {
        let path = self.path(rel);
        let mut reader = BufReader::new(fs::File::open(&path).with_context(|| format!("opening {}", path.display()))?);
        let mut first = String::new();
        reader.read_line(&mut first)?;
        let header: JsonlHeader =
            serde_json::from_str(&first).with_context(|| format!("header of {}", path.display()))?;
        self.check(&header.config_hash, &path)?;
        if header.kind != kind {
            bail!("{} holds {:?} records, expected {kind:?}", path.display(), header.kind);
        }
        Ok(reader)
    }

    pub fn read_jsonl<T: DeserializeOwned>(&self, rel: impl AsRef<Path>, kind: &str) -> Result<Vec<T>> {
        let reader = self.open_jsonl(rel, kind)?;
        let mut out = Vec::new();
        for line in reader.lines() {
            let line = line?;
            if !line.trim().is_empty() {
                out.push(serde_json::from_str(&line)?);
            }
        }
        Ok(out)
    }

    pub fn write_tsv(&self, rel: impl AsRef<Path>, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
        let mut buf = Vec::new();
        writeln!(buf, "# config_hash {}", self.hash)?;
        writeln!(buf, "{}", header.join("\t"))?;
        for row in rows {
            debug_assert_eq!(row.len(), header.len());
            writeln!(buf, "{}", row.join("\t"))?;
        }
        self.write_raw(rel, &buf)
    }
}

/// Table cell for an optional number.
pub fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".into(), |x| x.to_string())
}

/// Parses a TSV written by [`Store::write_tsv`] into its header and rows.
pub fn parse_tsv(text: &str) -> Result<(String, Vec<String>, Vec<Vec<String>>)> {
    let mut lines = text.lines();
    let hash = lines
        .next()
        .and_then(|l| l.strip_prefix("# config_hash "))
        .context("missing config hash line")?
        .to_string();
    let header: Vec<String> = lines.next().context("missing header")?.split('\t').map(String::from).collect();
    let rows = lines.map(|l| l.split('\t').map(String::from).collect()).collect();
    Ok((hash, header, rows))
}
