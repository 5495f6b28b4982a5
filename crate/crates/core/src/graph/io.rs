//! Plain-text graph and dataset files.
//!
//! A bundle directory holds `edges.txt` (one `i j` pair per line, 0-based,
//! each undirected edge once), `features.csv` (header `f0,f1,...`),
//! `labels.csv` (header `class` or `target`) and `splits.csv`
//! (header `train,val,test`, 0/1 entries).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

use super::{Graph, Labels, LabeledDataset, SplitMasks};

pub fn write_edge_list(graph: &Graph) -> String {
    let mut out = String::new();
    for (i, j) in graph.edges() {
        let _ = writeln!(out, "{i} {j}");
    }
    out
}

/// Parses an edge list. Blank lines and lines starting with `#` are
/// skipped. The node count is `num_nodes` if given, else one past the
/// largest index seen.
pub fn parse_edge_list(text: &str, num_nodes: Option<usize>) -> Result<Graph> {
    let mut edges = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let mut next = || -> Result<usize> {
            parts
                .next()
                .ok_or_else(|| Error::Format(format!("line {}: expected two indices", lineno + 1)))?
                .parse()
                .map_err(|e| Error::Format(format!("line {}: {e}", lineno + 1)))
        };
        let (i, j) = (next()?, next()?);
        if parts.next().is_some() {
            return Err(Error::Format(format!("line {}: trailing tokens", lineno + 1)));
        }
        edges.push((i, j));
    }
    let inferred = edges.iter().map(|&(i, j)| i.max(j) + 1).max().unwrap_or(0);
    let n = num_nodes.unwrap_or(inferred);
    Graph::from_edges(n, &edges)
}

fn csv_reader(text: &str) -> csv::Reader<&[u8]> {
    csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes())
}

fn csv_writer() -> csv::Writer<Vec<u8>> {
    csv::WriterBuilder::new().from_writer(Vec::new())
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_features(x: &Matrix) -> Result<String> {
    let mut w = csv_writer();
    w.write_record((0..x.cols()).map(|k| format!("f{k}")))?;
    for i in 0..x.rows() {
        w.write_record(x.row(i).iter().map(|v| format!("{v:?}")))?;
    }
    finish(w)
}

pub fn parse_features(text: &str) -> Result<Matrix> {
    let mut rdr = csv_reader(text);
    let cols = rdr.headers()?.len();
    let mut data = Vec::new();
    let mut rows = 0;
    for rec in rdr.records() {
        let rec = rec?;
        for field in rec.iter() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|e| Error::Format(format!("feature row {rows}: {e}")))?;
            if !v.is_finite() {
                return Err(Error::Format(format!("feature row {rows}: non-finite value")));
            }
            data.push(v);
        }
        rows += 1;
    }
    Matrix::from_vec(rows, cols, data)
}

pub fn write_labels(labels: &Labels) -> Result<String> {
    let mut w = csv_writer();
    match labels {
        Labels::Classes { labels, .. } => {
            w.write_record(["class"])?;
            for c in labels {
                w.write_record([c.to_string()])?;
            }
        }
        Labels::Targets(t) => {
            w.write_record(["target"])?;
            for y in t {
                w.write_record([format!("{y:?}")])?;
            }
        }
    }
    finish(w)
}

pub fn parse_labels(text: &str) -> Result<Labels> {
    let mut rdr = csv_reader(text);
    let header = rdr.headers()?.get(0).unwrap_or("").trim().to_string();
    let fields: Vec<String> =
        rdr.records().map(|r| r.map(|r| r.get(0).unwrap_or("").trim().to_string())).collect::<Result<_, _>>()?;
    match header.as_str() {
        "class" => {
            let labels: Vec<usize> = fields
                .iter()
                .map(|f| f.parse().map_err(|e| Error::Format(format!("class label {f:?}: {e}"))))
                .collect::<Result<_>>()?;
            let num_classes = labels.iter().max().map_or(0, |m| m + 1);
            Ok(Labels::Classes { labels, num_classes })
        }
        "target" => Ok(Labels::Targets(
            fields
                .iter()
                .map(|f| f.parse().map_err(|e| Error::Format(format!("target {f:?}: {e}"))))
                .collect::<Result<_>>()?,
        )),
        other => Err(Error::Format(format!("labels header must be `class` or `target`, found {other:?}"))),
    }
}

pub fn write_splits(splits: &SplitMasks) -> Result<String> {
    let mut w = csv_writer();
    w.write_record(["train", "val", "test"])?;
    for i in 0..splits.train.len() {
        w.write_record([splits.train[i], splits.val[i], splits.test[i]].map(|b| (b as u8).to_string()))?;
    }
    finish(w)
}

pub fn parse_splits(text: &str) -> Result<SplitMasks> {
    let mut rdr = csv_reader(text);
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    if header != ["train", "val", "test"] {
        return Err(Error::Format(format!("splits header must be train,val,test, found {header:?}")));
    }
    let mut masks = SplitMasks { train: Vec::new(), val: Vec::new(), test: Vec::new() };
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let flag = |k: usize| -> Result<bool> {
            match rec.get(k).map(str::trim) {
                Some("0") => Ok(false),
                Some("1") => Ok(true),
                other => Err(Error::Format(format!("splits row {row}: expected 0 or 1, found {other:?}"))),
            }
        };
        let (a, b, c) = (flag(0)?, flag(1)?, flag(2)?);
        masks.train.push(a);
        masks.val.push(b);
        masks.test.push(c);
    }
    Ok(masks)
}

pub fn save_bundle(ds: &LabeledDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("edges.txt"), write_edge_list(&ds.graph))?;
    fs::write(dir.join("features.csv"), write_features(&ds.features)?)?;
    fs::write(dir.join("labels.csv"), write_labels(&ds.labels)?)?;
    fs::write(dir.join("splits.csv"), write_splits(&ds.splits)?)?;
    Ok(())
}

pub fn load_bundle(dir: &Path) -> Result<LabeledDataset> {
    let features = parse_features(&fs::read_to_string(dir.join("features.csv"))?)?;
    let graph = parse_edge_list(&fs::read_to_string(dir.join("edges.txt"))?, Some(features.rows()))?;
    let labels = parse_labels(&fs::read_to_string(dir.join("labels.csv"))?)?;
    let splits = parse_splits(&fs::read_to_string(dir.join("splits.csv"))?)?;
    let ds = LabeledDataset { graph, features, labels, splits };
    ds.validate()?;
    Ok(ds)
}
