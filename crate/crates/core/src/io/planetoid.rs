//! Planetoid-style `.content` / `.cites` citation graphs.
//!
//! `.content`: `node_id f_1 ... f_d label` per line. `.cites`: `cited citing`
//! per line. Fields are whitespace separated (tabs in the original files).

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::graph::SparseGraph;

#[derive(Debug, Clone)]
pub struct LoadedGraph {
    pub graph: SparseGraph,
    /// Label strings, indexed by class ID.
    pub class_names: Vec<String>,
    /// Raw node IDs, indexed by dense node index.
    pub node_ids: Vec<String>,
    /// Citations skipped because an endpoint is not in the content file.
    pub dangling_citations: usize,
}

fn parse_error(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

pub fn load_planetoid(content_path: &Path, cites_path: &Path) -> Result<LoadedGraph> {
    let content = fs::read_to_string(content_path)?;
    let mut node_ids: Vec<String> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut raw_labels: Vec<String> = Vec::new();
    let mut width: Option<usize> = None;

    for (i, line) in content.lines().enumerate() {
        let lineno = i + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() < 3 {
            return Err(parse_error(content_path, lineno, "expected `id features... label`"));
        }
        let d = fields.len() - 2;
        match width {
            None => width = Some(d),
            Some(w) if w != d => {
                return Err(parse_error(
                    content_path,
                    lineno,
                    format!("{d} features, earlier lines have {w}"),
                ))
            }
            _ => {}
        }
        let id = fields[0].to_string();
        if index.contains_key(&id) {
            return Err(parse_error(content_path, lineno, format!("duplicate node id {id:?}")));
        }
        let feats = fields[1..=d]
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| parse_error(content_path, lineno, format!("bad feature {f:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        index.insert(id.clone(), node_ids.len());
        node_ids.push(id);
        rows.push(feats);
        raw_labels.push(fields[d + 1].to_string());
    }
    let d = width.ok_or_else(|| parse_error(content_path, 0, "no nodes"))?;

    let class_names: Vec<String> = raw_labels
        .iter()
        .cloned()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let labels: Vec<usize> = raw_labels
        .iter()
        .map(|l| class_names.binary_search(l).expect("collected above"))
        .collect();
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    let features = Array2::from_shape_vec((node_ids.len(), d), flat).expect("rows checked");

    let cites = fs::read_to_string(cites_path)?;
    let mut edges = Vec::new();
    let mut dangling = 0;
    for (i, line) in cites.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.as_slice() {
            [] => continue,
            [cited, citing] => match (index.get(*cited), index.get(*citing)) {
                (Some(&a), Some(&b)) => edges.push((a, b)),
                _ => dangling += 1,
            },
            _ => return Err(parse_error(cites_path, i + 1, "expected `cited citing`")),
        }
    }
    let graph = SparseGraph::from_edges(features, labels, edges)?;
    Ok(LoadedGraph {
        graph,
        class_names,
        node_ids,
        dangling_citations: dangling,
    })
}

/// `<dir>/<name>.content` and `<dir>/<name>.cites`.
pub fn dataset_paths(dir: &Path, name: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{name}.content")), dir.join(format!("{name}.cites")))
}

/// Looks for the pair directly in `dir`, then in `dir/<name>/` (the layout
/// of the original archives).
pub fn find_dataset(dir: &Path, name: &str) -> Result<(PathBuf, PathBuf)> {
    for base in [dir.to_path_buf(), dir.join(name)] {
        let (content, cites) = dataset_paths(&base, name);
        if content.is_file() && cites.is_file() {
            return Ok((content, cites));
        }
    }
    Err(Error::Io(std::io::Error::new(
        std::io::ErrorKind::NotFound,
        format!(
            "dataset {name:?} not found: expected {name}.content and {name}.cites in {} or {}",
            dir.display(),
            dir.join(name).display()
        ),
    )))
}

/// Writes `g` in the same format, with node IDs `0..n` and labels `c<k>`
/// (zero-padded so lexicographic order equals numeric order).
pub fn write_planetoid(g: &SparseGraph, content_path: &Path, cites_path: &Path) -> Result<()> {
    use std::fmt::Write as _;
    let width = g.num_classes().saturating_sub(1).to_string().len();
    let mut content = String::new();
    for (v, row) in g.features().rows().into_iter().enumerate() {
        write!(content, "{v}").unwrap();
        for x in row {
            write!(content, "\t{x}").unwrap();
        }
        writeln!(content, "\tc{:0width$}", g.labels()[v]).unwrap();
    }
    let mut cites = String::new();
    for v in 0..g.num_nodes() {
        for u in g.neighbours(v).filter(|&u| u > v) {
            writeln!(cites, "{v}\t{u}").unwrap();
        }
    }
    fs::write(content_path, content)?;
    fs::write(cites_path, cites)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, content: &str, cites: &str) -> (PathBuf, PathBuf) {
        let (c, e) = dataset_paths(dir, "toy");
        fs::write(&c, content).unwrap();
        fs::write(&e, cites).unwrap();
        (c, e)
    }

    #[test]
    fn three_node_fixture_with_dangling_citation() {
        let dir = tempfile::tempdir().unwrap();
        let (c, e) = write(
            dir.path(),
            "p9\t1\t0\tTheory\np2\t0\t1\tAI\np5\t1\t1\tTheory\n",
            "p9\tp2\np2\tp5\nghost\tp5\n",
        );
        let g = load_planetoid(&c, &e).unwrap();
        assert_eq!(g.graph.num_nodes(), 3);
        assert_eq!(g.dangling_citations, 1);
        assert_eq!(g.graph.num_edges(), 2);
        assert_eq!(g.node_ids, vec!["p9", "p2", "p5"]);
        assert_eq!(g.class_names, vec!["AI", "Theory"]);
        assert_eq!(g.graph.labels(), &[1, 0, 1]);
        assert!(g.graph.has_edge(1, 0) && g.graph.has_edge(0, 1));
    }

    #[test]
    fn malformed_lines_report_their_number() {
        let dir = tempfile::tempdir().unwrap();
        let (c, e) = write(dir.path(), "a 1 0 x\nb 0 1 y\nc 1 0 0 x\n", "");
        match load_planetoid(&c, &e) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let (c, e) = write(dir.path(), "a 1 0 x\nb 1 nan x\n", "");
        assert!(matches!(load_planetoid(&c, &e), Err(Error::Parse { line: 2, .. })));
        let (c, e) = write(dir.path(), "a 1 x\n", "a a a\n");
        assert!(matches!(load_planetoid(&c, &e), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn find_dataset_checks_both_layouts() {
        let dir = tempfile::tempdir().unwrap();
        assert!(find_dataset(dir.path(), "toy").is_err());
        let nested = dir.path().join("toy");
        fs::create_dir(&nested).unwrap();
        write(&nested, "a 1 x\n", "");
        assert_eq!(find_dataset(dir.path(), "toy").unwrap().0, nested.join("toy.content"));
        write(dir.path(), "a 1 x\n", "");
        assert_eq!(
            find_dataset(dir.path(), "toy").unwrap().0,
            dir.path().join("toy.content")
        );
    }

    #[test]
    fn write_then_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let g = crate::graph::generate_sbm(&crate::graph::SbmSpec::new(11, 4), 1).unwrap();
        let (c, e) = dataset_paths(dir.path(), "sbm");
        write_planetoid(&g, &c, &e).unwrap();
        let back = load_planetoid(&c, &e).unwrap();
        assert_eq!(back.graph.labels(), g.labels());
        assert_eq!(back.graph.features(), g.features());
        assert_eq!(back.graph.adjacency(), g.adjacency());
    }
}
