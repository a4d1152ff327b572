//! One-row-per-hole CSV: `hole_id,grid_id,square_id,patch_id,x,y,ctf`.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::atlas::{Dataset, HoleRecord};
use crate::error::{Error, Result};

pub const HEADER: [&str; 7] = ["hole_id", "grid_id", "square_id", "patch_id", "x", "y", "ctf"];

pub fn write_csv<W: Write>(ds: &Dataset, out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(true).from_writer(out);
    for r in ds.to_records() {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<R: Read>(input: R) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header = rdr.headers().map_err(csv_err)?.clone();
    if header.iter().ne(HEADER.iter().copied()) {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected header `{}`", HEADER.join(",")),
        });
    }

    let mut records = Vec::new();
    let mut hole_line: HashMap<String, u64> = HashMap::new();
    let mut patch_parent: HashMap<String, (String, u64)> = HashMap::new();
    let mut square_parent: HashMap<String, (String, u64)> = HashMap::new();
    for row in rdr.records() {
        let raw = row.map_err(csv_err)?;
        let line = raw.position().map_or(0, |p| p.line());
        let rec: HoleRecord = raw.deserialize(Some(&header)).map_err(|e| Error::Parse {
            line,
            message: format!("{:?}", e.kind()),
        })?;
        if let Some(first) = hole_line.insert(rec.hole_id.clone(), line) {
            return Err(Error::Parse {
                line,
                message: format!("duplicate hole id `{}` (first seen on line {first})", rec.hole_id),
            });
        }
        if rec.patch_id.trim().is_empty() || rec.square_id.trim().is_empty() {
            return Err(Error::Parse {
                line,
                message: format!("hole `{}` has no patch/square lineage", rec.hole_id),
            });
        }
        parent_consistent(&mut patch_parent, "patch", &rec.patch_id, &rec.square_id, line)?;
        parent_consistent(&mut square_parent, "square", &rec.square_id, &rec.grid_id, line)?;
        records.push(rec);
    }
    Dataset::from_records(records).map_err(|e| match e {
        Error::InvalidDataset(m) => Error::Parse { line: 0, message: m },
        Error::InvalidCtf(v) => Error::Parse {
            line: 0,
            message: format!("invalid CTF value {v}"),
        },
        other => other,
    })
}

fn parent_consistent(
    map: &mut HashMap<String, (String, u64)>,
    what: &str,
    child: &str,
    parent: &str,
    line: u64,
) -> Result<()> {
    match map.get(child) {
        Some((p, first)) if p != parent => Err(Error::Parse {
            line,
            message: format!(
                "orphaned {what} `{child}`: parent `{parent}` conflicts with `{p}` from line {first}"
            ),
        }),
        Some(_) => Ok(()),
        None => {
            map.insert(child.to_string(), (parent.to_string(), line));
            Ok(())
        }
    }
}

fn csv_err(e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        kind => Error::Parse {
            line,
            message: format!("{kind:?}"),
        },
    }
}

pub fn save(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let f = File::create(path)?;
    let mut w = BufWriter::new(f);
    write_csv(ds, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Dataset> {
    read_csv(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate, GenConfig};

    #[test]
    fn round_trip() {
        let ds = generate(&GenConfig {
            total_holes: Some(300),
            total_squares: Some(6),
            n_grids: 2,
            ..GenConfig::y1(11)
        })
        .unwrap();
        let mut buf = Vec::new();
        write_csv(&ds, &mut buf).unwrap();
        assert!(buf.starts_with(b"hole_id,grid_id,square_id,patch_id,x,y,ctf\n"));
        let back = read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn duplicate_hole_reports_line() {
        let text = "hole_id,grid_id,square_id,patch_id,x,y,ctf\n\
                    h0,g0,s0,p0,1,2,4.5\n\
                    h1,g0,s0,p0,1,2,7.5\n\
                    h0,g0,s0,p0,1,2,3.5\n";
        match read_csv(text.as_bytes()) {
            Err(Error::Parse { line, message }) => {
                assert_eq!(line, 4);
                assert!(message.contains("duplicate"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn orphan_patch_reports_line() {
        let text = "hole_id,grid_id,square_id,patch_id,x,y,ctf\n\
                    h0,g0,s0,p0,1,2,4.5\n\
                    h1,g0,s1,p0,1,2,7.5\n";
        match read_csv(text.as_bytes()) {
            Err(Error::Parse { line, message }) => {
                assert_eq!(line, 3);
                assert!(message.contains("orphaned patch"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_number_reports_line() {
        let text = "hole_id,grid_id,square_id,patch_id,x,y,ctf\n\
                    h0,g0,s0,p0,1,2,4.5\n\
                    h1,g0,s0,p0,1,2,abc\n";
        assert!(matches!(read_csv(text.as_bytes()), Err(Error::Parse { line: 3, .. })));
    }

    #[test]
    fn bad_header() {
        let text = "id,grid,square,patch,x,y,ctf\nh0,g0,s0,p0,1,2,4.5\n";
        assert!(matches!(read_csv(text.as_bytes()), Err(Error::Parse { line: 1, .. })));
    }
}
