//! Discrete cell descriptions.
//!
//! A [`Genotype`] fixes, for each of the four nodes of the normal and the
//! reduce cell, two incoming branches `(source, operator)`; the node output
//! is the sum of its branches and the cell output concatenates all four
//! nodes. [`derive`] turns learned coefficients into a genotype: keep the
//! best operator on every edge, then keep the two strongest edges per node.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::search_space::{
    edge_row, softmax_coefficients, AlphaParams, CellKind, OperatorKind, OperatorMask, NUM_EDGES, NUM_NODES,
};
use crate::tensor::Real;

pub const FORMAT_VERSION: u32 = 1;

/// Node ids listed in `concat`: every node output joins the cell output.
pub const CONCAT: [usize; NUM_NODES] = [2, 3, 4, 5];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Branch {
    pub source: usize,
    pub op: OperatorKind,
}

impl Branch {
    pub fn new(source: usize, op: OperatorKind) -> Self {
        Branch { source, op }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct CellGenotype {
    pub nodes: Vec<[Branch; 2]>,
}

impl CellGenotype {
    pub fn branches(&self) -> impl Iterator<Item = &Branch> {
        self.nodes.iter().flatten()
    }

    /// Every node reads from `(0, 1), (0, 1), ...` with one operator.
    pub fn uniform(op: OperatorKind) -> Self {
        CellGenotype {
            nodes: vec![[Branch::new(0, op), Branch::new(1, op)]; NUM_NODES],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Genotype {
    pub format_version: u32,
    pub normal: CellGenotype,
    pub reduce: CellGenotype,
    pub concat: Vec<usize>,
}

impl Genotype {
    pub fn new(normal: CellGenotype, reduce: CellGenotype) -> Self {
        Genotype {
            format_version: FORMAT_VERSION,
            normal,
            reduce,
            concat: CONCAT.to_vec(),
        }
    }

    pub fn cell(&self, kind: CellKind) -> &CellGenotype {
        match kind {
            CellKind::Normal => &self.normal,
            CellKind::Reduce => &self.reduce,
        }
    }

    pub fn operators(&self) -> impl Iterator<Item = OperatorKind> + '_ {
        self.normal.branches().chain(self.reduce.branches()).map(|b| b.op)
    }

    pub fn has_atrous(&self) -> bool {
        self.operators().any(OperatorKind::is_atrous)
    }

    /// Human-readable JSON with a fixed layout and a trailing newline.
    pub fn to_json(&self) -> String {
        let mut out = String::new();
        out.push_str("{\n");
        let _ = writeln!(out, "  \"format_version\": {},", self.format_version);
        for (kind, cell) in [("normal", &self.normal), ("reduce", &self.reduce)] {
            let _ = writeln!(out, "  \"{kind}\": [");
            for (i, node) in cell.nodes.iter().enumerate() {
                let sep = if i + 1 == cell.nodes.len() { "" } else { "," };
                let _ = writeln!(
                    out,
                    "    [[{}, \"{}\"], [{}, \"{}\"]]{sep}",
                    node[0].source, node[0].op, node[1].source, node[1].op
                );
            }
            out.push_str("  ],\n");
        }
        let concat: Vec<String> = self.concat.iter().map(|c| c.to_string()).collect();
        let _ = writeln!(out, "  \"concat\": [{}]", concat.join(", "));
        out.push_str("}\n");
        out
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: RawGenotype = serde_json::from_str(text).map_err(json_parse_error)?;
        let mut issues = Vec::new();
        let mut convert = |kind: &str, nodes: Vec<Vec<(usize, String)>>| {
            let mut out = Vec::new();
            for (i, node) in nodes.into_iter().enumerate() {
                if node.len() != 2 {
                    issues.push(format!("{kind}[{i}]: expected 2 branches, found {}", node.len()));
                    continue;
                }
                let mut branches = [Branch::new(0, OperatorKind::Skip); 2];
                for (b, (source, name)) in node.into_iter().enumerate() {
                    match name.parse::<OperatorKind>() {
                        Ok(op) => branches[b] = Branch::new(source, op),
                        Err(_) => issues.push(format!("{kind}[{i}][{b}]: unknown operator name {name:?}")),
                    }
                }
                out.push(branches);
            }
            CellGenotype { nodes: out }
        };
        let normal = convert("normal", raw.normal);
        let reduce = convert("reduce", raw.reduce);
        let genotype = Genotype {
            format_version: raw.format_version,
            normal,
            reduce,
            concat: raw.concat,
        };
        if let Err(more) = validate(&genotype) {
            issues.extend(more);
        }
        if issues.is_empty() {
            Ok(genotype)
        } else {
            Err(Error::InvalidGenotype(issues))
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::from_json(&text).map_err(|e| Error::file(path, e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::file(path, e))
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGenotype {
    format_version: u32,
    normal: Vec<Vec<(usize, String)>>,
    reduce: Vec<Vec<(usize, String)>>,
    concat: Vec<usize>,
}

fn json_parse_error(e: serde_json::Error) -> Error {
    Error::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    }
}

/// Structural checks: node count, source ranges, distinct sources, concat list.
pub fn validate(g: &Genotype) -> std::result::Result<(), Vec<String>> {
    let mut issues = Vec::new();
    if g.format_version != FORMAT_VERSION {
        issues.push(format!("unsupported format_version {}", g.format_version));
    }
    for (kind, cell) in [("normal", &g.normal), ("reduce", &g.reduce)] {
        if cell.nodes.len() != NUM_NODES {
            issues.push(format!(
                "{kind}: expected {NUM_NODES} nodes, found {}",
                cell.nodes.len()
            ));
        }
        for (i, node) in cell.nodes.iter().enumerate() {
            for (b, branch) in node.iter().enumerate() {
                if branch.source >= i + 2 {
                    issues.push(format!(
                        "{kind}[{i}][{b}]: source must precede node (source {}, node {})",
                        branch.source,
                        i + 2
                    ));
                }
            }
            if node[0].source == node[1].source {
                issues.push(format!("{kind}[{i}]: duplicate branch source {}", node[0].source));
            }
        }
    }
    if g.concat != CONCAT {
        issues.push(format!("concat must be {CONCAT:?}, found {:?}", g.concat));
    }
    if issues.is_empty() {
        Ok(())
    } else {
        Err(issues)
    }
}

/// Serialized coefficient matrices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlphasFile {
    pub normal: Vec<Vec<f64>>,
    pub reduce: Vec<Vec<f64>>,
    pub mask: OperatorMask,
    pub seed: u64,
}

impl AlphasFile {
    pub fn from_params<T: Real>(alphas: &AlphaParams<T>, seed: u64) -> Self {
        AlphasFile {
            normal: alphas.rows_f64(CellKind::Normal),
            reduce: alphas.rows_f64(CellKind::Reduce),
            mask: alphas.mask().clone(),
            seed,
        }
    }

    pub fn to_params<T: Real>(&self) -> Result<AlphaParams<T>> {
        self.check()?;
        AlphaParams::from_rows(self.mask.clone(), &self.normal, &self.reduce)
    }

    pub fn rows(&self, kind: CellKind) -> &[Vec<f64>] {
        match kind {
            CellKind::Normal => &self.normal,
            CellKind::Reduce => &self.reduce,
        }
    }

    fn check(&self) -> Result<()> {
        for (kind, rows) in [("normal", &self.normal), ("reduce", &self.reduce)] {
            if rows.len() != NUM_EDGES {
                return Err(Error::InvalidArgument(format!(
                    "{kind}: expected {NUM_EDGES} rows, found {}",
                    rows.len()
                )));
            }
            for (r, row) in rows.iter().enumerate() {
                if row.len() != self.mask.len() {
                    return Err(Error::InvalidArgument(format!(
                        "{kind}[{r}]: {} entries for a mask of {} operators",
                        row.len(),
                        self.mask.len()
                    )));
                }
                if row.iter().any(|v| !v.is_finite()) {
                    return Err(Error::InvalidArgument(format!("{kind}[{r}]: non-finite entry")));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("plain data serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: AlphasFile = serde_json::from_str(text).map_err(json_parse_error)?;
        file.check()?;
        Ok(file)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::from_json(&text).map_err(|e| Error::file(path, e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::file(path, e))
    }
}

/// Discretizes one cell's coefficient rows.
///
/// Edge strength is the largest softmax coefficient of the row. Each node
/// keeps its two strongest sources and, on each, the operator with the
/// largest coefficient; ties go to the lower source / operator index.
/// Kept branches are listed by increasing source.
pub fn derive_cell(rows: &[Vec<f64>], mask: &OperatorMask) -> Result<CellGenotype> {
    if rows.len() != NUM_EDGES {
        return Err(Error::InvalidArgument(format!(
            "expected {NUM_EDGES} rows, found {}",
            rows.len()
        )));
    }
    let mut nodes = Vec::with_capacity(NUM_NODES);
    for node in 0..NUM_NODES {
        let mut scored = Vec::with_capacity(node + 2);
        for source in 0..node + 2 {
            let row = &rows[edge_row(node, source)];
            if row.len() != mask.len() {
                return Err(Error::InvalidArgument(format!(
                    "row of {} entries for a mask of {} operators",
                    row.len(),
                    mask.len()
                )));
            }
            let coeffs = softmax_coefficients(row)?;
            let (best_col, &strength) = coeffs
                .iter()
                .enumerate()
                .fold(None, |best: Option<(usize, &f64)>, (i, c)| match best {
                    Some((_, b)) if *c <= *b => best,
                    _ => Some((i, c)),
                })
                .expect("non-empty row");
            scored.push((source, strength, mask.kinds()[best_col]));
        }
        // stable sort keeps lower sources first among equal strengths
        scored.sort_by(|a, b| b.1.total_cmp(&a.1));
        let mut kept = [scored[0], scored[1]];
        kept.sort_by_key(|s| s.0);
        if kept[0].0 == kept[1].0 {
            return Err(Error::Invariant(format!("node {node} kept the same source twice")));
        }
        nodes.push(kept.map(|(source, _, op)| Branch::new(source, op)));
    }
    Ok(CellGenotype { nodes })
}

pub fn derive(alphas: &AlphasFile) -> Result<Genotype> {
    alphas.check()?;
    Ok(Genotype::new(
        derive_cell(&alphas.normal, &alphas.mask)?,
        derive_cell(&alphas.reduce, &alphas.mask)?,
    ))
}

pub fn derive_params<T: Real>(alphas: &AlphaParams<T>) -> Result<Genotype> {
    derive(&AlphasFile::from_params(alphas, 0))
}

/// Replaces every atrous convolution by the separable convolution of the
/// same kernel size.
pub fn ablate_replace_atrous(g: &Genotype) -> Genotype {
    let swap = |cell: &CellGenotype| CellGenotype {
        nodes: cell
            .nodes
            .iter()
            .map(|node| {
                node.map(|b| Branch {
                    source: b.source,
                    op: match b.op {
                        OperatorKind::AtrousConv3 => OperatorKind::SepConv3,
                        OperatorKind::AtrousConv5 => OperatorKind::SepConv5,
                        op => op,
                    },
                })
            })
            .collect(),
    };
    Genotype {
        format_version: g.format_version,
        normal: swap(&g.normal),
        reduce: swap(&g.reduce),
        concat: g.concat.clone(),
    }
}

/// Operator set without atrous convolutions, for searches that exclude them.
pub fn atrous_free_mask() -> OperatorMask {
    OperatorMask::atrous_free()
}

fn dot_node_name(source: usize) -> String {
    match source {
        0 => "c_{k-2}".into(),
        1 => "c_{k-1}".into(),
        j => format!("sum_{}", j - 2),
    }
}

/// Graphviz text with one `digraph` per cell kind.
pub fn export_dot(g: &Genotype) -> String {
    let mut out = String::new();
    for kind in [CellKind::Normal, CellKind::Reduce] {
        let cell = g.cell(kind);
        let _ = writeln!(out, "digraph {} {{", kind.name());
        out.push_str("  rankdir=LR;\n");
        out.push_str("  node [shape=box, style=rounded];\n");
        for input in 0..2 {
            let _ = writeln!(out, "  \"{}\" [shape=ellipse];", dot_node_name(input));
        }
        for node in 0..cell.nodes.len() {
            let _ = writeln!(out, "  \"sum_{node}\" [label=\"sum\"];");
        }
        out.push_str("  \"out\" [shape=ellipse];\n");
        for (node, branches) in cell.nodes.iter().enumerate() {
            for b in branches {
                let _ = writeln!(
                    out,
                    "  \"{}\" -> \"sum_{node}\" [label=\"{}\"];",
                    dot_node_name(b.source),
                    b.op
                );
            }
        }
        for node in 0..cell.nodes.len() {
            let _ = writeln!(out, "  \"sum_{node}\" -> \"out\";");
        }
        out.push_str("}\n");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn all_skip() -> Genotype {
        Genotype::new(
            CellGenotype::uniform(OperatorKind::Skip),
            CellGenotype::uniform(OperatorKind::Skip),
        )
    }

    #[test]
    fn all_skip_round_trip() {
        let g = all_skip();
        let text = g.to_json();
        assert!(text.ends_with("}\n"));
        assert_eq!(Genotype::from_json(&text).unwrap(), g);
    }

    #[test]
    fn source_must_precede_node() {
        let text = all_skip()
            .to_json()
            .replacen("[[0, \"skip\"], [1, \"skip\"]]", "[[0, \"skip\"], [2, \"skip\"]]", 1);
        let err = Genotype::from_json(&text).unwrap_err();
        let Error::InvalidGenotype(issues) = err else {
            panic!("{err}")
        };
        assert!(issues[0].contains("source must precede node"), "{issues:?}");
    }

    #[test]
    fn unknown_names_and_duplicates_are_reported() {
        let text = all_skip()
            .to_json()
            .replacen("[[0, \"skip\"], [1, \"skip\"]]", "[[0, \"zero\"], [1, \"skip\"]]", 1)
            .replacen("[[0, \"skip\"], [1, \"skip\"]]", "[[1, \"skip\"], [1, \"skip\"]]", 1);
        let Error::InvalidGenotype(issues) = Genotype::from_json(&text).unwrap_err() else {
            panic!()
        };
        assert!(issues.iter().any(|i| i.contains("unknown operator name \"zero\"")));
        assert!(issues.iter().any(|i| i.contains("duplicate branch source")));
    }

    #[test]
    fn malformed_text_reports_position() {
        let err = Genotype::from_json("{\n  \"format_version\": 1,\n  oops\n}").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        let err =
            Genotype::from_json(r#"{"format_version":1,"normal":[],"reduce":[],"concat":[],"extra":1}"#).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }));
    }

    #[test]
    fn uniform_alphas_pick_lowest_indices() {
        let file = AlphasFile {
            normal: vec![vec![0.0; 7]; NUM_EDGES],
            reduce: vec![vec![0.25; 7]; NUM_EDGES],
            mask: OperatorMask::full(),
            seed: 0,
        };
        let g = derive(&file).unwrap();
        let expected = CellGenotype::uniform(OperatorKind::SepConv3);
        assert_eq!(g.normal, expected);
        assert_eq!(g.reduce, expected);
    }

    #[test]
    fn dot_counts() {
        let dot = export_dot(&all_skip());
        assert_eq!(dot.matches("digraph").count(), 2);
        assert_eq!(dot.matches("[label=\"skip\"]").count(), 16);
        assert_eq!(dot.matches("[label=\"sum\"]").count(), 8);
    }

    #[test]
    fn replace_atrous() {
        let g = Genotype::new(
            CellGenotype::uniform(OperatorKind::AtrousConv3),
            CellGenotype::uniform(OperatorKind::AtrousConv5),
        );
        let r = ablate_replace_atrous(&g);
        assert_eq!(r.normal, CellGenotype::uniform(OperatorKind::SepConv3));
        assert_eq!(r.reduce, CellGenotype::uniform(OperatorKind::SepConv5));
        let plain = all_skip();
        assert_eq!(ablate_replace_atrous(&plain), plain);
    }

    #[test]
    fn alphas_file_checks_width() {
        let file = AlphasFile {
            normal: vec![vec![0.0; 7]; NUM_EDGES],
            reduce: vec![vec![0.0; 7]; NUM_EDGES],
            mask: atrous_free_mask(),
            seed: 1,
        };
        assert!(AlphasFile::from_json(&file.to_json()).is_err());
    }
}
