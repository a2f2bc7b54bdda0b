//! On-disk dataset directories.
//!
//! A dataset is a directory holding `meta.json` (num_nodes, feat_dim,
//! num_classes), `edges.tsv` (one `src<TAB>dst` pair per line), `features.csv`
//! (one comma-separated row per node), and optionally `labels.csv` (one
//! integer per node). All files are UTF-8 with LF line endings.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Graph, GraphError};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("missing dataset file: {0}")]
    MissingFile(String),
    #[error("{file}:{line}: {msg}")]
    Malformed { file: String, line: usize, msg: String },
    #[error("{file}: expected {expected} rows, found {got}")]
    RowCountMismatch { file: String, expected: usize, got: usize },
    #[error("invalid meta.json: {0}")]
    BadMeta(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    num_nodes: usize,
    feat_dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    num_classes: Option<usize>,
}

fn read_file(dir: &Path, name: &str) -> Result<String, DataError> {
    let path = dir.join(name);
    if !path.is_file() {
        return Err(DataError::MissingFile(path.display().to_string()));
    }
    Ok(fs::read_to_string(path)?)
}

/// Loads a dataset directory into a [`Graph`]. Edges are symmetrized and
/// deduplicated by construction.
pub fn load_graph(dir: &Path) -> Result<Graph, DataError> {
    let meta: Meta = serde_json::from_str(&read_file(dir, "meta.json")?)
        .map_err(|e| DataError::BadMeta(e.to_string()))?;

    let mut edges = Vec::new();
    for (idx, line) in read_file(dir, "edges.tsv")?.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        let parse = |s: Option<&str>| -> Result<usize, DataError> {
            s.and_then(|t| t.trim().parse::<usize>().ok()).ok_or(DataError::Malformed {
                file: "edges.tsv".into(),
                line: idx + 1,
                msg: format!("expected `src<TAB>dst`, got {line:?}"),
            })
        };
        let src = parse(parts.next())?;
        let dst = parse(parts.next())?;
        if parts.next().is_some() {
            return Err(DataError::Malformed {
                file: "edges.tsv".into(),
                line: idx + 1,
                msg: "more than two fields".into(),
            });
        }
        edges.push((src, dst));
    }

    let feat_text = read_file(dir, "features.csv")?;
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(meta.num_nodes);
    for (idx, line) in feat_text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let row: Result<Vec<f64>, _> =
            line.split(',').map(|t| t.trim().parse::<f64>()).collect();
        let row = row.map_err(|e| DataError::Malformed {
            file: "features.csv".into(),
            line: idx + 1,
            msg: e.to_string(),
        })?;
        if row.len() != meta.feat_dim {
            return Err(DataError::Malformed {
                file: "features.csv".into(),
                line: idx + 1,
                msg: format!("expected {} values, got {}", meta.feat_dim, row.len()),
            });
        }
        rows.push(row);
    }
    if rows.len() != meta.num_nodes {
        return Err(DataError::RowCountMismatch {
            file: "features.csv".into(),
            expected: meta.num_nodes,
            got: rows.len(),
        });
    }
    let mut features = Array2::<f64>::zeros((meta.num_nodes, meta.feat_dim));
    for (i, row) in rows.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            features[(i, j)] = *v;
        }
    }

    let labels_path = dir.join("labels.csv");
    let labels = if labels_path.is_file() {
        let text = fs::read_to_string(labels_path)?;
        let mut ys = Vec::with_capacity(meta.num_nodes);
        for (idx, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let y = line.trim().parse::<usize>().map_err(|e| DataError::Malformed {
                file: "labels.csv".into(),
                line: idx + 1,
                msg: e.to_string(),
            })?;
            ys.push(y);
        }
        if ys.len() != meta.num_nodes {
            return Err(DataError::RowCountMismatch {
                file: "labels.csv".into(),
                expected: meta.num_nodes,
                got: ys.len(),
            });
        }
        Some(ys)
    } else {
        None
    };

    Ok(Graph::new(meta.num_nodes, &edges, features, labels, meta.num_classes)?)
}

/// Writes a [`Graph`] as a dataset directory (the inverse of [`load_graph`]).
pub fn save_graph(g: &Graph, dir: &Path) -> Result<(), DataError> {
    fs::create_dir_all(dir)?;
    let meta = Meta {
        num_nodes: g.num_nodes(),
        feat_dim: g.feat_dim(),
        num_classes: g.num_classes(),
    };
    let mut meta_json = serde_json::to_string_pretty(&meta).expect("meta serializes");
    meta_json.push('\n');
    fs::write(dir.join("meta.json"), meta_json)?;

    let mut edges = String::new();
    for (i, j) in g.edge_list() {
        edges.push_str(&format!("{i}\t{j}\n"));
    }
    fs::write(dir.join("edges.tsv"), edges)?;

    let mut feats = String::new();
    for row in g.features().rows() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        feats.push_str(&cells.join(","));
        feats.push('\n');
    }
    fs::write(dir.join("features.csv"), feats)?;

    if let Some(labels) = g.labels() {
        let mut text = String::new();
        for y in labels {
            text.push_str(&format!("{y}\n"));
        }
        fs::write(dir.join("labels.csv"), text)?;
    }
    Ok(())
}
