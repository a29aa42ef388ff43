//! Subject inventory written by `asldn phantom` and read by every later
//! stage. Same `key = value` syntax as the config file.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::config::{parse_kv_lines, VolumeFormat};
use crate::CliError;

pub const MANIFEST_NAME: &str = "manifest.txt";

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectEntry {
    pub id: usize,
    /// Directory under the data dir holding this subject's volumes.
    pub dir: String,
    /// Per-subject seed everything for this subject derives from.
    pub seed: u64,
    /// Indices of deliberately corrupted repetitions, sorted.
    pub outliers: Vec<usize>,
    /// Jittered perfusion levels actually used for the ground truth.
    pub gm_cbf: f64,
    pub wm_cbf: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub format: VolumeFormat,
    pub subjects: Vec<SubjectEntry>,
}

impl Manifest {
    pub fn render(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("n_subjects = {}\n", self.subjects.len()));
        s.push_str(&format!("format = {}\n", self.format.name()));
        for e in &self.subjects {
            let outliers: Vec<String> = e.outliers.iter().map(|i| i.to_string()).collect();
            s.push_str(&format!("subject.{}.dir = {}\n", e.id, e.dir));
            s.push_str(&format!("subject.{}.seed = {}\n", e.id, e.seed));
            s.push_str(&format!("subject.{}.outliers = {}\n", e.id, outliers.join(",")));
            s.push_str(&format!("subject.{}.gm_cbf = {}\n", e.id, e.gm_cbf));
            s.push_str(&format!("subject.{}.wm_cbf = {}\n", e.id, e.wm_cbf));
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        fs::write(path, self.render())
            .map_err(|e| CliError::Runtime(format!("cannot write manifest {}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Manifest, CliError> {
        let text = fs::read_to_string(path).map_err(|e| {
            CliError::Runtime(format!(
                "cannot read manifest {}: {e}; run `asldn phantom` first",
                path.display()
            ))
        })?;
        Manifest::parse(&text, &path.display().to_string())
    }

    pub fn parse(text: &str, origin: &str) -> Result<Manifest, CliError> {
        let mut map = BTreeMap::new();
        for (line, key, value) in parse_kv_lines(text, origin)? {
            if map.insert(key.clone(), value).is_some() {
                return Err(CliError::Runtime(format!("{origin} line {line}: duplicate key '{key}'")));
            }
        }
        let mut take = |key: &str| {
            map.remove(key)
                .ok_or_else(|| CliError::Runtime(format!("{origin}: missing key '{key}'")))
        };
        let n: usize = take("n_subjects")?
            .parse()
            .map_err(|e| CliError::Runtime(format!("{origin}: bad n_subjects: {e}")))?;
        let format = VolumeFormat::parse(&take("format")?)
            .map_err(|e| CliError::Runtime(format!("{origin}: {e}")))?;
        let mut subjects = Vec::with_capacity(n);
        for id in 0..n {
            let num = |key: String, v: String| -> Result<f64, CliError> {
                v.parse()
                    .map_err(|e| CliError::Runtime(format!("{origin}: bad {key}: {e}")))
            };
            let dir = take(&format!("subject.{id}.dir"))?;
            let seed: u64 = take(&format!("subject.{id}.seed"))?
                .parse()
                .map_err(|e| CliError::Runtime(format!("{origin}: bad subject.{id}.seed: {e}")))?;
            let outliers_raw = take(&format!("subject.{id}.outliers"))?;
            let mut outliers = Vec::new();
            if !outliers_raw.is_empty() {
                for part in outliers_raw.split(',') {
                    let v: usize = part.trim().parse().map_err(|e| {
                        CliError::Runtime(format!("{origin}: bad subject.{id}.outliers: {e}"))
                    })?;
                    outliers.push(v);
                }
            }
            let gm_cbf = num(format!("subject.{id}.gm_cbf"), take(&format!("subject.{id}.gm_cbf"))?)?;
            let wm_cbf = num(format!("subject.{id}.wm_cbf"), take(&format!("subject.{id}.wm_cbf"))?)?;
            subjects.push(SubjectEntry { id, dir, seed, outliers, gm_cbf, wm_cbf });
        }
        if let Some(stray) = map.keys().next() {
            return Err(CliError::Runtime(format!("{origin}: unexpected key '{stray}'")));
        }
        Ok(Manifest { format, subjects })
    }
}
