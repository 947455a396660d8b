//! File output: provenance header, JSON and CSV writers.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::CliError;

/// Identifies the configuration and seed that produced a file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Header {
    pub tool: &'static str,
    pub version: &'static str,
    pub config_sha256: String,
    pub seed: u64,
}

impl Header {
    pub fn new(config_sha256: &str, seed: u64) -> Self {
        Self {
            tool: "netmarl",
            version: env!("CARGO_PKG_VERSION"),
            config_sha256: config_sha256.to_string(),
            seed,
        }
    }

    /// First line of every CSV file.
    pub fn csv_line(&self) -> String {
        format!(
            "# {} {} config_sha256={} seed={}\n",
            self.tool, self.version, self.config_sha256, self.seed
        )
    }
}

#[derive(Serialize)]
struct WithHeader<'a, T: Serialize> {
    header: &'a Header,
    #[serde(flatten)]
    body: &'a T,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

/// Writes `{"header": ..., <body fields>}` as pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, header: &Header, body: &T) -> Result<PathBuf, CliError> {
    if let Some(parent) = path.parent() {
        ensure_dir(parent)?;
    }
    let mut text = serde_json::to_string_pretty(&WithHeader { header, body })
        .map_err(|e| CliError::Runtime(format!("serializing {}: {e}", path.display())))?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))?;
    Ok(path.to_path_buf())
}

/// Writes the header line, the column line and `rows` (already comma-joined), LF-terminated.
pub fn write_csv(path: &Path, header: &Header, columns: &[&str], rows: &[String]) -> Result<PathBuf, CliError> {
    if let Some(parent) = path.parent() {
        ensure_dir(parent)?;
    }
    let mut text = header.csv_line();
    text.push_str(&columns.join(","));
    text.push('\n');
    for r in rows {
        text.push_str(r);
        text.push('\n');
    }
    fs::write(path, text).map_err(io_err(path))?;
    Ok(path.to_path_buf())
}

/// Shortest round-trip decimal form; non-finite values as `nan`, `inf`, `-inf`.
pub fn num(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else if x.is_infinite() {
        if x > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{x}")
    }
}

/// 0-based ids to 1-based.
pub fn one_based(ids: &[usize]) -> Vec<usize> {
    ids.iter().map(|i| i + 1).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let h = Header::new("abc", 7);
        let p = write_csv(&dir.path().join("a/b.csv"), &h, &["x", "y"], &["1,2".into()]).unwrap();
        let text = fs::read_to_string(p).unwrap();
        assert_eq!(text, format!("# netmarl {} config_sha256=abc seed=7\nx,y\n1,2\n", env!("CARGO_PKG_VERSION")));
    }

    #[test]
    fn json_has_header_first() {
        let dir = tempfile::tempdir().unwrap();
        #[derive(Serialize)]
        struct Body {
            value: u32,
        }
        let p = write_json(&dir.path().join("r.json"), &Header::new("h", 1), &Body { value: 3 }).unwrap();
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap();
        assert_eq!(v["header"]["seed"], 1);
        assert_eq!(v["value"], 3);
    }

    #[test]
    fn number_format_round_trips() {
        assert_eq!(num(0.1), "0.1");
        assert_eq!(num(-2.0), "-2");
        assert_eq!(num(f64::INFINITY), "inf");
        assert_eq!(num(f64::NAN), "nan");
        let x = 1.0 / 3.0;
        assert_eq!(num(x).parse::<f64>().unwrap(), x);
    }
}
