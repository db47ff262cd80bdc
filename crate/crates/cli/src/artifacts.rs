use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::Result;

/// Output directory plus the header comment stamped on every file.
#[derive(Debug, Clone)]
pub struct Artifacts {
    dir: PathBuf,
    header: String,
}

impl Artifacts {
    pub fn create(dir: &Path, header: String) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            header,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn header(&self) -> &str {
        &self.header
    }

    /// Writes `body` prefixed with `# `-commented header lines.
    pub fn write(&self, name: &str, extra_header: &str, body: &str) -> Result<PathBuf> {
        let mut text = String::new();
        for line in self.header.lines().chain(extra_header.lines()) {
            let _ = writeln!(text, "# {line}");
        }
        text.push_str(body);
        let path = self.dir.join(name);
        fs::write(&path, text)?;
        Ok(path)
    }

    /// Writes a table from a header row and numeric rows.
    pub fn write_table(
        &self,
        name: &str,
        extra_header: &str,
        columns: &[&str],
        rows: &[Vec<f64>],
    ) -> Result<PathBuf> {
        self.write(name, extra_header, &table(columns, rows))
    }
}

/// CSV text; integral values print without an exponent, the rest in `{:e}`.
pub fn table(columns: &[&str], rows: &[Vec<f64>]) -> String {
    let mut out = columns.join(",");
    out.push('\n');
    for row in rows {
        let cells: Vec<String> = row.iter().map(|v| cell(*v)).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

pub fn cell(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v:e}")
    }
}

/// `key,value` listing.
pub fn key_values(pairs: &[(&str, String)]) -> String {
    let mut out = String::from("key,value\n");
    for (k, v) in pairs {
        let _ = writeln!(out, "{k},{v}");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_lines_are_commented() {
        let dir = tempfile::tempdir().unwrap();
        let a = Artifacts::create(dir.path(), "seed=3\nconfig_sha256=ab".into()).unwrap();
        let p = a
            .write_table("t.csv", "note=x", &["a", "b"], &[vec![1.0, 0.5]])
            .unwrap();
        let text = fs::read_to_string(p).unwrap();
        assert_eq!(
            text,
            "# seed=3\n# config_sha256=ab\n# note=x\na,b\n1,5e-1\n"
        );
    }
}
