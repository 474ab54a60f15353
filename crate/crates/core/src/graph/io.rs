use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Graph;
use crate::engine::Matrix;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub n: usize,
    pub d: usize,
    pub c: usize,
    pub name: String,
}

fn open_csv(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(file))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    Error::format(path, line, e.to_string())
}

fn parse<T: std::str::FromStr>(path: &Path, line: usize, field: &str) -> Result<T> {
    field.trim().parse().map_err(|_| Error::format(path, line, format!("cannot parse {field:?}")))
}

/// Reads a canonical dataset directory (`meta.json`, `features.csv`,
/// `labels.csv`, `edges.csv`).
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Graph> {
    let dir = dir.as_ref();
    let meta_path = dir.join("meta.json");
    let meta_file = File::open(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: DatasetMeta =
        serde_json::from_reader(meta_file).map_err(|e| Error::format(&meta_path, e.line(), e.to_string()))?;

    let path = dir.join("features.csv");
    let mut data = Vec::with_capacity(meta.n * meta.d);
    let mut rows = 0;
    for (i, rec) in open_csv(&path)?.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(&path, e))?;
        let line = i + 1;
        if rows == meta.n {
            return Err(Error::format(&path, line, format!("more than n = {} rows", meta.n)));
        }
        if rec.len() != meta.d {
            return Err(Error::format(&path, line, format!("{} columns, expected d = {}", rec.len(), meta.d)));
        }
        for field in &rec {
            let x: f64 = parse(&path, line, field)?;
            if !x.is_finite() {
                return Err(Error::format(&path, line, "non-finite feature"));
            }
            data.push(x);
        }
        rows += 1;
    }
    if rows != meta.n {
        return Err(Error::format(&path, rows, format!("{rows} rows, expected n = {}", meta.n)));
    }

    let path = dir.join("labels.csv");
    let mut labels = Vec::with_capacity(meta.n);
    for (i, rec) in open_csv(&path)?.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(&path, e))?;
        let line = i + 1;
        if rec.len() != 1 {
            return Err(Error::format(&path, line, "expected one label per line"));
        }
        let y: usize = parse(&path, line, &rec[0])?;
        if y >= meta.c {
            return Err(Error::format(&path, line, format!("label {y} out of range for c = {}", meta.c)));
        }
        labels.push(y);
    }
    if labels.len() != meta.n {
        return Err(Error::format(&path, labels.len(), format!("{} labels, expected n = {}", labels.len(), meta.n)));
    }

    let path = dir.join("edges.csv");
    let mut seen = std::collections::HashSet::new();
    let mut edges = Vec::new();
    for (i, rec) in open_csv(&path)?.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(&path, e))?;
        let line = i + 1;
        if rec.len() != 2 {
            return Err(Error::format(&path, line, "expected \"u,v\""));
        }
        let u: usize = parse(&path, line, &rec[0])?;
        let v: usize = parse(&path, line, &rec[1])?;
        if u >= meta.n || v >= meta.n {
            return Err(Error::format(&path, line, format!("endpoint out of range for n = {}", meta.n)));
        }
        if u == v {
            return Err(Error::format(&path, line, format!("self-loop on node {u}")));
        }
        let e = (u.min(v), u.max(v));
        if !seen.insert(e) {
            return Err(Error::format(&path, line, format!("duplicate edge {e:?}")));
        }
        edges.push(e);
    }

    let features = Matrix::from_vec(meta.n, meta.d, data);
    Graph::new(meta.name, features, labels, meta.c, edges)
}

/// Writes `graph` in the canonical format.
pub fn write_dataset(graph: &Graph, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta = DatasetMeta { n: graph.n(), d: graph.d(), c: graph.c(), name: graph.name().to_string() };
    let path = dir.join("meta.json");
    std::fs::write(&path, serde_json::to_string(&meta)? + "\n").map_err(|e| Error::io(&path, e))?;

    let write = |name: &str, body: &dyn Fn(&mut BufWriter<File>) -> std::io::Result<()>| -> Result<()> {
        let path = dir.join(name);
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(file);
        body(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(&path, e))
    };
    write("features.csv", &|w| {
        for i in 0..graph.n() {
            let row: Vec<String> = graph.features().row(i).iter().map(|x| x.to_string()).collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    })?;
    write("labels.csv", &|w| graph.labels().iter().try_for_each(|y| writeln!(w, "{y}")))?;
    write("edges.csv", &|w| graph.edges().iter().try_for_each(|(u, v)| writeln!(w, "{u},{v}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture(name: &str) -> std::path::PathBuf {
        Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
    }

    #[test]
    fn toy_triangle() {
        let g = load_dataset(fixture("toy")).unwrap();
        assert_eq!((g.n(), g.d(), g.c()), (3, 2, 2));
        assert_eq!(g.edges().len(), 3);
    }

    #[test]
    fn round_trip() {
        let g = load_dataset(fixture("toy")).unwrap();
        let tmp = tempfile::tempdir().unwrap();
        write_dataset(&g, tmp.path()).unwrap();
        let h = load_dataset(tmp.path()).unwrap();
        assert_eq!(g.features(), h.features());
        assert_eq!(g.labels(), h.labels());
        assert_eq!(g.edges(), h.edges());
    }

    fn corrupt(file: &str, body: &str) -> Error {
        let tmp = tempfile::tempdir().unwrap();
        let g = load_dataset(fixture("toy")).unwrap();
        write_dataset(&g, tmp.path()).unwrap();
        std::fs::write(tmp.path().join(file), body).unwrap();
        load_dataset(tmp.path()).unwrap_err()
    }

    #[test]
    fn errors_carry_file_and_line() {
        let e = corrupt("edges.csv", "0,1\n1,9999\n");
        assert!(matches!(&e, Error::Format { file, line: 2, .. } if file.ends_with("edges.csv")), "{e}");
        let e = corrupt("edges.csv", "0,1\n1,0\n");
        assert!(matches!(&e, Error::Format { line: 2, msg, .. } if msg.contains("duplicate")), "{e}");
        let e = corrupt("labels.csv", "0\n5\n1\n");
        assert!(matches!(&e, Error::Format { file, line: 2, .. } if file.ends_with("labels.csv")), "{e}");
        let e = corrupt("features.csv", "1,0\n0,1,1\n0,0\n");
        assert!(matches!(&e, Error::Format { line: 2, .. }), "{e}");
        let e = corrupt("labels.csv", "0\n1\n");
        assert!(matches!(&e, Error::Format { .. }), "{e}");
    }

    #[test]
    fn missing_file() {
        let tmp = tempfile::tempdir().unwrap();
        assert!(matches!(load_dataset(tmp.path()), Err(Error::Io { .. })));
    }
}
