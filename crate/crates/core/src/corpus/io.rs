//! JSONL readers and writers for triplets, labeled sentences, and author
//! pairs. One object per line, UTF-8, LF terminators. Loaders are total
//! inverses of the writers on valid data; unknown keys are ignored.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::{AuthorPair, CorpusError, LabeledSentence, Result, Triplet};

fn load_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path)?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
            line: i + 1,
            detail: e.to_string(),
        })?;
        out.push(record);
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(records: &[T], path: &Path) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| CorpusError::Malformed {
            line: 0,
            detail: e.to_string(),
        })?;
        w.write_all(line.as_bytes())?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_triplets(path: &Path) -> Result<Vec<Triplet>> {
    load_jsonl(path)
}

pub fn load_labeled(path: &Path) -> Result<Vec<LabeledSentence>> {
    load_jsonl(path)
}

pub fn load_pairs(path: &Path) -> Result<Vec<AuthorPair>> {
    load_jsonl(path)
}

pub fn write_triplets(records: &[Triplet], path: &Path) -> Result<()> {
    write_jsonl(records, path)
}

pub fn write_labeled(records: &[LabeledSentence], path: &Path) -> Result<()> {
    write_jsonl(records, path)
}

pub fn write_pairs(records: &[AuthorPair], path: &Path) -> Result<()> {
    write_jsonl(records, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Polarity;

    #[test]
    fn empty_file_loads_empty() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        std::fs::write(&path, "").unwrap();
        assert!(load_triplets(&path).unwrap().is_empty());
        assert!(load_labeled(&path).unwrap().is_empty());
        assert!(load_pairs(&path).unwrap().is_empty());
    }

    #[test]
    fn round_trip_single_records() {
        let dir = tempfile::tempdir().unwrap();
        let t = Triplet {
            anchor: "A B".into(),
            positive: "C D".into(),
            negative: "E F".into(),
            style: Some("uppercase".into()),
            polarity: Some(Polarity::Pos),
        };
        let tp = dir.path().join("t.jsonl");
        write_triplets(std::slice::from_ref(&t), &tp).unwrap();
        assert_eq!(load_triplets(&tp).unwrap(), vec![t]);

        let l = LabeledSentence { text: "x".into(), style: "emoji".into(), polarity: Polarity::Neg };
        let lp = dir.path().join("l.jsonl");
        write_labeled(std::slice::from_ref(&l), &lp).unwrap();
        assert_eq!(load_labeled(&lp).unwrap(), vec![l]);

        let p = AuthorPair { a: "one".into(), b: "two".into(), same: true };
        let pp = dir.path().join("p.jsonl");
        write_pairs(std::slice::from_ref(&p), &pp).unwrap();
        assert_eq!(load_pairs(&pp).unwrap(), vec![p]);
    }

    #[test]
    fn bad_json_names_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(
            &path,
            "{\"a\":\"x\",\"b\":\"y\",\"same\":true}\n{\"a\":\"x\",\"b\":\"y\",\"same\":false}\nnot json\n",
        )
        .unwrap();
        match load_pairs(&path) {
            Err(CorpusError::Malformed { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected malformed error, got {other:?}"),
        }
    }

    #[test]
    fn missing_key_errors_and_extra_keys_ignored() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.jsonl");
        std::fs::write(&path, "{\"text\":\"t\",\"style\":\"s\"}\n").unwrap();
        assert!(load_labeled(&path).is_err());
        std::fs::write(
            &path,
            "{\"text\":\"t\",\"style\":\"s\",\"polarity\":\"pos\",\"bonus\":1}\n",
        )
        .unwrap();
        let got = load_labeled(&path).unwrap();
        assert_eq!(got[0].style, "s");
    }
}
