//! Field files: one JSON header line, then the rows as little-endian `f64`.

use std::io::{BufRead, Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::velocity::Profile;

pub fn write_field(path: &Path, header: &serde_json::Value, rows: &[Profile]) -> Result<()> {
    let cols = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != cols) {
        return Err(Error::Grid("ragged field rows".into()));
    }
    let mut head = header.clone();
    if let serde_json::Value::Object(m) = &mut head {
        m.insert("rows".into(), rows.len().into());
        m.insert("cols".into(), cols.into());
    } else {
        return Err(Error::Io("field header must be a JSON object".into()));
    }
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    let line = serde_json::to_string(&head).map_err(|e| Error::Io(e.to_string()))?;
    writeln!(w, "{line}")?;
    for r in rows {
        for x in r {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_field(path: &Path) -> Result<(serde_json::Value, Vec<Profile>)> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut line = String::new();
    r.read_line(&mut line)?;
    let head: serde_json::Value =
        serde_json::from_str(line.trim_end()).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let dim = |k: &str| -> Result<usize> {
        head.get(k)
            .and_then(|v| v.as_u64())
            .map(|v| v as usize)
            .ok_or_else(|| Error::Io(format!("{}: header lacks `{k}`", path.display())))
    };
    let (rows, cols) = (dim("rows")?, dim("cols")?);
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != rows * cols * 8 {
        return Err(Error::Io(format!(
            "{}: expected {} values, found {} bytes",
            path.display(),
            rows * cols,
            bytes.len()
        )));
    }
    let vals: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((head, vals.chunks(cols.max(1)).take(rows).map(|c| c.to_vec()).collect()))
}

/// Hex SHA-256 of a configuration text.
pub fn config_hash(text: &str) -> String {
    Sha256::digest(text.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let s = serde_json::to_string_pretty(value).map_err(|e| Error::Io(e.to_string()))?;
    std::fs::write(path, s + "\n")?;
    Ok(())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let s = std::fs::read_to_string(path)?;
    serde_json::from_str(&s).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn field_roundtrip_is_exact() {
        let dir = std::env::temp_dir().join(format!("hs-field-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("f.bin");
        let rows = vec![vec![0.1, -2.5e-300, std::f64::consts::PI], vec![1.0 / 3.0, 0.0, -0.0]];
        write_field(&path, &serde_json::json!({"eps": 0.01}), &rows).unwrap();
        let (h, back) = read_field(&path).unwrap();
        assert_eq!(h["eps"], 0.01);
        assert_eq!(h["rows"], 2);
        for (a, b) in rows.iter().flatten().zip(back.iter().flatten()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn hash_is_stable() {
        assert_eq!(config_hash("abc").len(), 64);
        assert_eq!(
            &config_hash("abc")[..16],
            "ba7816bf8f01cfea"
        );
    }
}
