//! Newline-delimited JSON datasets, one [`Sample`] per line. Paths ending
//! in `.gz` are gzip-compressed.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use super::Sample;
use crate::error::{Error, Result};

fn is_gz(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "gz")
}

pub fn write_dataset(path: &Path, data: &[Sample]) -> Result<()> {
    let file = File::create(path)?;
    let mut w: Box<dyn Write> = if is_gz(path) {
        Box::new(GzEncoder::new(BufWriter::new(file), Compression::default()))
    } else {
        Box::new(BufWriter::new(file))
    };
    for s in data {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<Sample>> {
    let file = File::open(path)?;
    let r: Box<dyn Read> = if is_gz(path) {
        Box::new(GzDecoder::new(file))
    } else {
        Box::new(file)
    };
    let mut out = Vec::new();
    for (n, line) in BufReader::new(r).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: Sample = serde_json::from_str(&line)
            .map_err(|e| Error::Schema(format!("{}:{}: {}", path.display(), n + 1, e)))?;
        s.validate(usize::MAX)
            .map_err(|e| Error::Schema(format!("{}:{}: {}", path.display(), n + 1, e)))?;
        out.push(s);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inputs::{generate_dataset, GeneratorConfig};

    #[test]
    fn jsonl_and_gzip_round_trip() {
        let cfg = GeneratorConfig {
            n_users: 5,
            samples_per_user: 2,
            l_max: 16,
            min_events: 0,
            ..GeneratorConfig::default()
        };
        let data = generate_dataset(&cfg, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        for name in ["d.jsonl", "d.jsonl.gz"] {
            let p = dir.path().join(name);
            write_dataset(&p, &data).unwrap();
            assert_eq!(read_dataset(&p).unwrap(), data);
        }
    }

    #[test]
    fn field_names_are_stable() {
        let line = r#"{"events":[{"item_id":3,"action_type":1,"timestamp":5}],"user_features":{"uid":2,"profile_bucket":0},"candidate":{"item_id":4,"timestamp":9},"label":1}"#;
        let s: Sample = serde_json::from_str(line).unwrap();
        assert_eq!(serde_json::to_string(&s).unwrap(), line);
    }
}
