//! Text lists: corpus manifests, trial lists and score files.
//!
//! All are UTF-8, one record per line, fields separated by whitespace.
//! Blank lines are skipped.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::codec;
use crate::error::{Error, Result};

/// `<utterance-id> <speaker-id> <relative-path>`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub utt: String,
    pub spk: String,
    pub path: PathBuf,
}

/// `<enroll-id> <test-id> <target|nontarget>`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trial {
    pub enroll: String,
    pub test: String,
    pub target: bool,
}

/// `<enroll-id> <test-id> <score>`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredTrial {
    pub enroll: String,
    pub test: String,
    pub score: f64,
}

fn fields<'a>(path: &Path, line_no: usize, line: &'a str, n: usize) -> Result<Vec<&'a str>> {
    let f: Vec<&str> = line.split_whitespace().collect();
    if f.len() != n {
        return Err(Error::Line {
            path: path.to_path_buf(),
            line: line_no,
            msg: format!("expected {n} fields, found {}", f.len()),
        });
    }
    Ok(f)
}

fn records(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| !l.trim().is_empty())
}

pub fn parse_manifest(text: &str, path: &Path) -> Result<Vec<ManifestEntry>> {
    records(text)
        .map(|(n, line)| {
            let f = fields(path, n, line, 3)?;
            Ok(ManifestEntry {
                utt: f[0].to_string(),
                spk: f[1].to_string(),
                path: PathBuf::from(f[2]),
            })
        })
        .collect()
}

pub fn parse_trials(text: &str, path: &Path) -> Result<Vec<Trial>> {
    records(text)
        .map(|(n, line)| {
            let f = fields(path, n, line, 3)?;
            let target = match f[2] {
                "target" => true,
                "nontarget" => false,
                other => {
                    return Err(Error::Line {
                        path: path.to_path_buf(),
                        line: n,
                        msg: format!("label must be target or nontarget, got '{other}'"),
                    })
                }
            };
            Ok(Trial {
                enroll: f[0].to_string(),
                test: f[1].to_string(),
                target,
            })
        })
        .collect()
}

pub fn parse_scores(text: &str, path: &Path) -> Result<Vec<ScoredTrial>> {
    records(text)
        .map(|(n, line)| {
            let f = fields(path, n, line, 3)?;
            let score: f64 = f[2].parse().map_err(|_| Error::Line {
                path: path.to_path_buf(),
                line: n,
                msg: format!("bad score '{}'", f[2]),
            })?;
            Ok(ScoredTrial {
                enroll: f[0].to_string(),
                test: f[1].to_string(),
                score,
            })
        })
        .collect()
}

pub fn format_manifest(entries: &[ManifestEntry]) -> String {
    let mut s = String::new();
    for e in entries {
        let _ = writeln!(s, "{} {} {}", e.utt, e.spk, e.path.display());
    }
    s
}

pub fn format_trials(trials: &[Trial]) -> String {
    let mut s = String::new();
    for t in trials {
        let label = if t.target { "target" } else { "nontarget" };
        let _ = writeln!(s, "{} {} {label}", t.enroll, t.test);
    }
    s
}

/// Scores use ten significant digits in scientific notation.
pub fn format_scores(scores: &[ScoredTrial]) -> String {
    let mut s = String::new();
    for t in scores {
        let _ = writeln!(s, "{} {} {:.9e}", t.enroll, t.test, t.score);
    }
    s
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    parse_manifest(&codec::read_text(path)?, path)
}

pub fn read_trials(path: &Path) -> Result<Vec<Trial>> {
    parse_trials(&codec::read_text(path)?, path)
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoredTrial>> {
    parse_scores(&codec::read_text(path)?, path)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    codec::write_file(path, format_manifest(entries).as_bytes())
}

pub fn write_trials(path: &Path, trials: &[Trial]) -> Result<()> {
    codec::write_file(path, format_trials(trials).as_bytes())
}

pub fn write_scores(path: &Path, scores: &[ScoredTrial]) -> Result<()> {
    codec::write_file(path, format_scores(scores).as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_reports_line_numbers() {
        let p = Path::new("lists");
        let m = parse_manifest("a s1 feats/a.saef\n\n b  s2 feats/b.saef \n", p).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m[1].utt, "b");
        assert_eq!(m[1].path, PathBuf::from("feats/b.saef"));

        let err = parse_manifest("a s1 x\nb s2\n", p).unwrap_err();
        assert!(matches!(err, Error::Line { line: 2, .. }), "{err}");

        let t = parse_trials("a b target\na c nontarget\n", p).unwrap();
        assert_eq!(t.iter().map(|t| t.target).collect::<Vec<_>>(), vec![true, false]);
        assert!(matches!(
            parse_trials("a b maybe\n", p),
            Err(Error::Line { line: 1, .. })
        ));

        assert!(matches!(parse_scores("a b x1\n", p), Err(Error::Line { line: 1, .. })));
    }

    #[test]
    fn scores_keep_nine_significant_digits() {
        let v = 0.123_456_789_123_f64;
        let s = format_scores(&[ScoredTrial {
            enroll: "a".into(),
            test: "b".into(),
            score: v,
        }]);
        let back = parse_scores(&s, Path::new("s")).unwrap()[0].score;
        assert!(((back - v) / v).abs() < 1e-9);
        let neg = format_scores(&[ScoredTrial {
            enroll: "a".into(),
            test: "b".into(),
            score: -1.0,
        }]);
        assert_eq!(neg, "a b -1.000000000e0\n");
    }
}
