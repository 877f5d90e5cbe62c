//! Plain-text persistence for conformations and ensembles.
//!
//! Structure file: one header line `bins=<B> beads_per_bin=<K>` followed by
//! `B` lines of `8 * K` space-separated values in packed row order.
//! Coordinates are written with 9 significant digits, masks as integer 0/1.
//!
//! Ensemble: a directory of structure files plus a JSON manifest listing the
//! member paths (relative to the directory), their stored scale factors and
//! the condition id.

use super::{Conformation, Ensemble, GeomError, ROW_COLS_PER_BEAD};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

/// Formats one packed row table value: coordinates at 9 significant digits,
/// mask columns as bare integers.
fn format_value(col: usize, v: f64) -> String {
    if col % 4 == 3 {
        format!("{}", v as i64)
    } else {
        format!("{v:.8e}")
    }
}

pub fn structure_to_string(conf: &Conformation) -> String {
    let cols = ROW_COLS_PER_BEAD * conf.beads_per_bin();
    let table = conf.pack_rows();
    let mut out = String::new();
    let _ = writeln!(
        out,
        "bins={} beads_per_bin={}",
        conf.bins(),
        conf.beads_per_bin()
    );
    for row in 0..conf.bins() {
        let mut line = String::new();
        for c in 0..cols {
            if c > 0 {
                line.push(' ');
            }
            line.push_str(&format_value(c, table[row * cols + c]));
        }
        out.push_str(&line);
        out.push('\n');
    }
    out
}

pub fn write_structure(path: &Path, conf: &Conformation) -> Result<(), GeomError> {
    fs::write(path, structure_to_string(conf))?;
    Ok(())
}

pub fn parse_structure(text: &str, origin: &str) -> Result<Conformation, GeomError> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| GeomError::Parse {
        path: origin.to_string(),
        line: 1,
        msg: "empty file".into(),
    })?;
    let parse_kv = |tok: Option<&str>, key: &str| -> Result<usize, GeomError> {
        let tok = tok.ok_or_else(|| GeomError::Parse {
            path: origin.to_string(),
            line: 1,
            msg: format!("missing {key}"),
        })?;
        let val = tok.strip_prefix(&format!("{key}=")).ok_or_else(|| {
            GeomError::Parse {
                path: origin.to_string(),
                line: 1,
                msg: format!("expected {key}=<n>, got {tok}"),
            }
        })?;
        val.parse().map_err(|_| GeomError::Parse {
            path: origin.to_string(),
            line: 1,
            msg: format!("bad {key} value {val}"),
        })
    };
    let mut toks = header.split_whitespace();
    let bins = parse_kv(toks.next(), "bins")?;
    let beads_per_bin = parse_kv(toks.next(), "beads_per_bin")?;
    let cols = ROW_COLS_PER_BEAD * beads_per_bin;

    let mut table = Vec::with_capacity(bins * cols);
    let mut rows = 0usize;
    for (lineno, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let values: Vec<&str> = line.split_whitespace().collect();
        if values.len() != cols {
            return Err(GeomError::Parse {
                path: origin.to_string(),
                line: lineno + 1,
                msg: format!("expected {cols} columns, got {}", values.len()),
            });
        }
        for v in values {
            table.push(v.parse::<f64>().map_err(|_| GeomError::Parse {
                path: origin.to_string(),
                line: lineno + 1,
                msg: format!("bad number {v}"),
            })?);
        }
        rows += 1;
    }
    if rows != bins {
        return Err(GeomError::Parse {
            path: origin.to_string(),
            line: rows + 1,
            msg: format!("expected {bins} data rows, got {rows}"),
        });
    }
    Conformation::unpack_rows(bins, beads_per_bin, &table)
}

pub fn read_structure(path: &Path) -> Result<Conformation, GeomError> {
    let text = fs::read_to_string(path)?;
    parse_structure(&text, &path.display().to_string())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EnsembleManifest {
    pub condition_id: String,
    pub members: Vec<MemberEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MemberEntry {
    pub path: String,
    pub scale: f64,
}

pub const ENSEMBLE_MANIFEST: &str = "ensemble.json";

/// Writes an ensemble as `dir/members/NNNN.txt` plus `dir/ensemble.json`.
pub fn write_ensemble(dir: &Path, ens: &Ensemble) -> Result<(), GeomError> {
    let members_dir = dir.join("members");
    fs::create_dir_all(&members_dir)?;
    let mut entries = Vec::with_capacity(ens.len());
    for (i, conf) in ens.members().iter().enumerate() {
        let rel = format!("members/{i:04}.txt");
        write_structure(&dir.join(&rel), conf)?;
        entries.push(MemberEntry {
            path: rel,
            scale: conf.scale(),
        });
    }
    let manifest = EnsembleManifest {
        condition_id: ens.condition_id().to_string(),
        members: entries,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| GeomError::Manifest(e.to_string()))?;
    fs::write(dir.join(ENSEMBLE_MANIFEST), json)?;
    Ok(())
}

/// Reads an ensemble directory written by [`write_ensemble`]. Member scale
/// factors come from the manifest (the structure file itself stores geometry
/// only).
pub fn read_ensemble(dir: &Path) -> Result<Ensemble, GeomError> {
    let manifest_path = dir.join(ENSEMBLE_MANIFEST);
    let json = fs::read_to_string(&manifest_path)?;
    let manifest: EnsembleManifest =
        serde_json::from_str(&json).map_err(|e| GeomError::Manifest(e.to_string()))?;
    let mut members = Vec::with_capacity(manifest.members.len());
    for entry in &manifest.members {
        let mut conf = read_structure(&member_path(dir, &entry.path))?;
        conf.set_scale(entry.scale);
        members.push(conf);
    }
    Ensemble::new(members, manifest.condition_id)
}

fn member_path(dir: &Path, rel: &str) -> PathBuf {
    dir.join(rel)
}
