use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::cloud::io::parse_pose_line;
use crate::cloud::RigidTransform;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Format(format!("unknown split tag {s:?}"))),
        }
    }
}

/// One registration pair: `target ≈ gt · source`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSpec {
    pub source: PathBuf,
    pub target: PathBuf,
    pub gt: RigidTransform,
    pub split: Split,
    /// Filled in once the clouds have been loaded.
    pub overlap: Option<f64>,
}

/// Parses a tab-separated manifest: source, target, the twelve row-major
/// `[R | t]` numbers, split. Blank lines are skipped. Relative paths are
/// resolved against `base`.
pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<PairSpec>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 15 {
            return Err(Error::Format(format!(
                "manifest line {}: expected 15 tab-separated fields, got {}",
                n + 1,
                fields.len()
            )));
        }
        let gt = parse_pose_line(&fields[2..14].join(" "))
            .map_err(|e| Error::Format(format!("manifest line {}: {e}", n + 1)))?;
        let split = fields[14]
            .trim()
            .parse()
            .map_err(|e| Error::Format(format!("manifest line {}: {e}", n + 1)))?;
        out.push(PairSpec {
            source: base.join(fields[0]),
            target: base.join(fields[1]),
            gt,
            split,
            overlap: None,
        });
    }
    Ok(out)
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<PairSpec>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    parse_manifest(&text, path.parent().unwrap_or(Path::new("")))
}

/// Writes pairs in manifest form; paths are written as given.
pub fn write_manifest(w: &mut impl Write, pairs: &[PairSpec]) -> Result<()> {
    for p in pairs {
        let gt: Vec<String> = p.gt.to_row_major_3x4().iter().map(|v| format!("{v:e}")).collect();
        writeln!(
            w,
            "{}\t{}\t{}\t{}",
            p.source.display(),
            p.target.display(),
            gt.join("\t"),
            p.split
        )?;
    }
    Ok(())
}
