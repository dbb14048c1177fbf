use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{ItemFeatures, ScoredPair, Triplet};
use crate::error::{Error, Result};

/// On-disk layout of a scored-pair file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairFormat {
    /// `sentence1<TAB>sentence2<TAB>score`, no header.
    Tsv,
    /// One `{"s", "s_prime", "gs", "source"?}` object per line.
    Jsonl,
}

impl PairFormat {
    /// Guesses from the file extension; anything but `.tsv` is JSONL.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("tsv") | Some("txt") => PairFormat::Tsv,
            _ => PairFormat::Jsonl,
        }
    }
}

impl std::str::FromStr for PairFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tsv" => Ok(PairFormat::Tsv),
            "jsonl" => Ok(PairFormat::Jsonl),
            other => Err(Error::invalid(format!("unknown pair format {other:?}"))),
        }
    }
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_error(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn parse_tsv_line(path: &Path, lineno: usize, line: &str) -> Result<ScoredPair> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 3 {
        return Err(parse_error(
            path,
            lineno,
            format!("expected 3 tab-separated columns, found {}", fields.len()),
        ));
    }
    let gs: f64 = fields[2]
        .trim()
        .parse()
        .map_err(|_| parse_error(path, lineno, format!("score {:?} is not a number", fields[2])))?;
    if !gs.is_finite() {
        return Err(parse_error(path, lineno, format!("score {gs} is not finite")));
    }
    Ok(ScoredPair::new(fields[0], fields[1], gs))
}

fn parse_jsonl_numbered<T: DeserializeOwned>(path: &Path, text: &str) -> Result<Vec<(usize, T)>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map(|v| (i + 1, v))
                .map_err(|e| parse_error(path, i + 1, e.to_string()))
        })
        .collect()
}

fn parse_jsonl<T: DeserializeOwned>(path: &Path, text: &str) -> Result<Vec<T>> {
    Ok(parse_jsonl_numbered(path, text)?.into_iter().map(|(_, v)| v).collect())
}

pub fn load_pairs(path: &Path, format: PairFormat) -> Result<Vec<ScoredPair>> {
    let text = read_to_string(path)?;
    let pairs: Vec<ScoredPair> = match format {
        PairFormat::Tsv => text
            .split('\n')
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| parse_tsv_line(path, i + 1, l.strip_suffix('\r').unwrap_or(l)))
            .collect::<Result<_>>()?,
        PairFormat::Jsonl => parse_jsonl_numbered::<ScoredPair>(path, &text)?
            .into_iter()
            .map(|(lineno, p)| {
                if p.gs.is_finite() {
                    Ok(p)
                } else {
                    Err(parse_error(path, lineno, "score is not finite"))
                }
            })
            .collect::<Result<_>>()?,
    };
    Ok(pairs)
}

fn write_lines(path: &Path, lines: impl Iterator<Item = Result<String>>) -> Result<()> {
    let mut buf = Vec::new();
    for line in lines {
        buf.extend_from_slice(line?.as_bytes());
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

fn to_json_line<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string(value).map_err(|e| Error::Serialization(e.to_string()))
}

pub fn write_pairs(path: &Path, pairs: &[ScoredPair], format: PairFormat) -> Result<()> {
    match format {
        PairFormat::Tsv => write_lines(
            path,
            pairs.iter().map(|p| {
                if [&p.s, &p.s_prime].iter().any(|t| t.contains(['\t', '\n'])) {
                    return Err(Error::invalid(format!(
                        "text contains a tab or newline and cannot be written as TSV: {:?}",
                        p.s
                    )));
                }
                Ok(format!("{}\t{}\t{}", p.s, p.s_prime, p.gs))
            }),
        ),
        PairFormat::Jsonl => write_lines(path, pairs.iter().map(to_json_line)),
    }
}

pub fn load_triplets(path: &Path) -> Result<Vec<Triplet>> {
    parse_jsonl_numbered::<Triplet>(path, &read_to_string(path)?)?
        .into_iter()
        .map(|(lineno, t)| {
            let empty = t.anchor.is_empty()
                || t.positive.is_empty()
                || t.hard_negative.as_deref() == Some("");
            if empty {
                Err(parse_error(path, lineno, "triplet fields must be non-empty"))
            } else {
                Ok(t)
            }
        })
        .collect()
}

pub fn write_triplets(path: &Path, triplets: &[Triplet]) -> Result<()> {
    write_lines(path, triplets.iter().map(to_json_line))
}

pub fn load_items(path: &Path) -> Result<Vec<ItemFeatures>> {
    parse_jsonl(path, &read_to_string(path)?)
}

pub fn write_items(path: &Path, items: &[ItemFeatures]) -> Result<()> {
    write_lines(path, items.iter().map(to_json_line))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tsv_three_rows_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.tsv");
        fs::write(&path, "a b\tc d\t4.2\nx\ty\t0\nm\tn\t5\n").unwrap();
        let pairs = load_pairs(&path, PairFormat::Tsv).unwrap();
        assert_eq!(pairs.len(), 3);
        assert_eq!(pairs[0], ScoredPair::new("a b", "c d", 4.2));
        assert_eq!(pairs[2].gs, 5.0);
    }

    #[test]
    fn tsv_missing_score_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.tsv");
        fs::write(&path, "a\tb\t1\nc\td\n").unwrap();
        match load_pairs(&path, PairFormat::Tsv) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn tsv_non_finite_score_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.tsv");
        fs::write(&path, "a\tb\tNaN\n").unwrap();
        assert!(matches!(load_pairs(&path, PairFormat::Tsv), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn jsonl_bad_line_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.jsonl");
        fs::write(&path, "{\"s\":\"a\",\"s_prime\":\"b\",\"gs\":1.0}\n{\"s\":\"a\"}\n").unwrap();
        assert!(matches!(load_pairs(&path, PairFormat::Jsonl), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn round_trip_both_formats() {
        let dir = tempfile::tempdir().unwrap();
        let pairs = vec![
            ScoredPair::new("one", "two", 0.1 + 0.2),
            ScoredPair::new("three", "four", 4.999999999).with_source("stsb-train"),
        ];
        let jp = dir.path().join("p.jsonl");
        write_pairs(&jp, &pairs, PairFormat::Jsonl).unwrap();
        assert_eq!(load_pairs(&jp, PairFormat::Jsonl).unwrap(), pairs);

        let tp = dir.path().join("p.tsv");
        write_pairs(&tp, &pairs, PairFormat::Tsv).unwrap();
        let back = load_pairs(&tp, PairFormat::Tsv).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].gs.to_bits(), pairs[0].gs.to_bits());
        assert_eq!(back[1].s_prime, "four");
    }

    #[test]
    fn triplets_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        let t = vec![
            Triplet { anchor: "a".into(), positive: "b".into(), hard_negative: Some("c".into()) },
            Triplet { anchor: "d".into(), positive: "e".into(), hard_negative: None },
        ];
        write_triplets(&path, &t).unwrap();
        assert_eq!(load_triplets(&path).unwrap(), t);
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("{\"anchor\":\"a\",\"positive\":\"b\",\"hard_negative\":\"c\"}"));
    }
}
