//! Output files: CSV tables, PGM images and atomically committed bundles.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::latent::Latent;

/// Formats a real with 17 significant digits, enough to round-trip any f64.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

/// A CSV table assembled in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header).map_err(csv_err)?;
        for r in &self.rows {
            w.write_record(r).map_err(csv_err)?;
        }
        w.into_inner().map_err(|e| Error::Io(e.into_error()))
    }

    pub fn from_csv(bytes: &[u8]) -> Result<Self> {
        let mut r = csv::Reader::from_reader(bytes);
        let header = r.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
        let rows = r
            .records()
            .map(|rec| rec.map(|r| r.iter().map(str::to_string).collect()).map_err(csv_err))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { header, rows })
    }

    /// Values of one column, by header name.
    pub fn column(&self, name: &str) -> Option<Vec<&str>> {
        let idx = self.header.iter().position(|h| h == name)?;
        Some(self.rows.iter().map(|r| r[idx].as_str()).collect())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

/// Binary greyscale PGM of a 2-D latent, min-max normalised to 0..=255.
/// A constant latent renders as mid-grey.
pub fn latent_pgm(latent: &Latent) -> Result<Vec<u8>> {
    let (h, w) = match latent.shape() {
        [h, w] => (*h, *w),
        other => return Err(Error::invalid(format!("PGM needs a 2-D latent, got shape {other:?}"))),
    };
    latent.ensure_finite("image latent")?;
    let (lo, hi) = (latent.min(), latent.max());
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(latent.as_slice().iter().map(|&v| {
        if hi > lo {
            ((v - lo) / (hi - lo) * 255.0).round().clamp(0.0, 255.0) as u8
        } else {
            128
        }
    }));
    Ok(out)
}

/// Parses a binary PGM written by [`latent_pgm`] into (width, height, pixels).
pub fn parse_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let bad = || Error::invalid("malformed PGM");
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad());
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad())?.to_string());
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad());
    }
    let w: usize = fields[1].parse().map_err(|_| bad())?;
    let h: usize = fields[2].parse().map_err(|_| bad())?;
    let pixels = bytes.get(pos + 1..).ok_or_else(bad)?.to_vec();
    if pixels.len() != w * h {
        return Err(bad());
    }
    Ok((w, h, pixels))
}

/// Named files that are written together. Nothing touches the destination
/// until [`OutputBundle::commit`], which writes each file to a temporary
/// sibling and renames it into place, removing everything it wrote if any
/// step fails.
#[derive(Debug, Default)]
pub struct OutputBundle {
    files: Vec<(String, Vec<u8>)>,
}

impl OutputBundle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, bytes: Vec<u8>) {
        self.files.push((name.into(), bytes));
    }

    pub fn names(&self) -> Vec<String> {
        self.files.iter().map(|(n, _)| n.clone()).collect()
    }

    pub fn get(&self, name: &str) -> Option<&[u8]> {
        self.files.iter().find(|(n, _)| n == name).map(|(_, b)| b.as_slice())
    }

    pub fn commit(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        let result = (|| -> Result<()> {
            for (name, bytes) in &self.files {
                let dest = dir.join(name);
                let tmp = dir.join(format!(".{name}.tmp"));
                fs::write(&tmp, bytes)?;
                if let Err(e) = fs::rename(&tmp, &dest) {
                    let _ = fs::remove_file(&tmp);
                    return Err(e.into());
                }
                written.push(dest);
            }
            Ok(())
        })();
        match result {
            Ok(()) => Ok(written),
            Err(e) => {
                for p in &written {
                    let _ = fs::remove_file(p);
                }
                Err(e)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_round_trip_through_text() {
        for v in [0.1, 1.0 / 3.0, -2.5e-300, 123456.789, f64::MIN_POSITIVE] {
            assert_eq!(fmt_f64(v).parse::<f64>().unwrap(), v);
        }
    }

    #[test]
    fn pgm_round_trip_and_constant() {
        let l = Latent::grid(2, 3, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let (w, h, px) = parse_pgm(&latent_pgm(&l).unwrap()).unwrap();
        assert_eq!((w, h), (3, 2));
        assert_eq!(px, vec![0, 51, 102, 153, 204, 255]);
        let c = Latent::grid(2, 2, vec![7.0; 4]).unwrap();
        assert_eq!(parse_pgm(&latent_pgm(&c).unwrap()).unwrap().2, vec![128; 4]);
        assert!(latent_pgm(&Latent::from_vec(vec![1.0])).is_err());
    }

    #[test]
    fn table_round_trip() {
        let mut t = Table::new(&["a", "b"]);
        t.push(vec!["1".into(), "x, \"y\"".into()]);
        let back = Table::from_csv(&t.to_csv().unwrap()).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.column("b").unwrap(), vec!["x, \"y\""]);
    }

    #[test]
    fn bundle_commits_all_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut b = OutputBundle::new();
        b.add("a.txt", b"1".to_vec());
        b.add("b.txt", b"2".to_vec());
        b.commit(dir.path()).unwrap();
        assert_eq!(fs::read(dir.path().join("b.txt")).unwrap(), b"2");
        let leftovers: Vec<_> = fs::read_dir(dir.path())
            .unwrap()
            .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().ends_with(".tmp"))
            .collect();
        assert!(leftovers.is_empty());
    }

    #[test]
    fn failed_commit_removes_partial_output() {
        let dir = tempfile::tempdir().unwrap();
        let mut b = OutputBundle::new();
        b.add("ok.txt", b"1".to_vec());
        // A directory in the way makes the second rename fail.
        fs::create_dir_all(dir.path().join("blocked").join("inner")).unwrap();
        b.add("blocked", b"2".to_vec());
        assert!(b.commit(dir.path()).is_err());
        assert!(!dir.path().join("ok.txt").exists());
    }
}
