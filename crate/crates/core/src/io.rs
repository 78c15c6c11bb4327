//! CSV/JSON emission for simulation artifacts, plus content hashing for run
//! manifests.

use crate::error::Result;
use crate::pde::FieldOnGrid;
use crate::sde::PathBundle;
use crate::simplex::SimplexGrid;
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

/// Writes a path bundle as long-format CSV: one row per (path, slice,
/// coordinate) with the P value and, when tracked, the Q value.
pub fn write_bundle_csv(path: &Path, bundle: &PathBundle) -> Result<()> {
    let mut out = String::from("path,t,coord,p,q\n");
    for (pid, traj) in bundle.paths_p.iter().enumerate() {
        for (s, point) in traj.iter().enumerate() {
            for i in 0..point.dim() {
                let q = bundle
                    .paths_q
                    .as_ref()
                    .map(|qs| qs[pid][s][i].to_string())
                    .unwrap_or_default();
            let _ = writeln!(
                    out,
                    "{pid},{t},{i},{p},{q}",
                    t = bundle.times[s],
                    p = point.get(i)
                );
            }
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Writes a space-time field as CSV: one row per (time, node) with the grid
/// labels and the value.
pub fn write_field_csv(path: &Path, field: &FieldOnGrid, grid: &SimplexGrid) -> Result<()> {
    let mut out = String::from("t,node,label,value\n");
    for (k, slice) in field.values.iter().enumerate() {
        for (node, &v) in slice.iter().enumerate() {
            let label: Vec<String> =
                grid.label(node).iter().map(|x| x.to_string()).collect();
            let _ = writeln!(
                out,
                "{t},{node},{label},{v}",
                t = field.times[k],
                label = label.join("-")
            );
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Pretty-printed JSON dump of any serializable report.
pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n")?;
    Ok(())
}

/// SHA-256 of a file's contents, hex-encoded.
pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    Ok(sha256_hex(&bytes))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        let _ = write!(out, "{b:02x}");
    }
    out
}
