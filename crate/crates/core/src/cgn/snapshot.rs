//! Plain-text class graph snapshot.
//!
//! ```text
//! class-graph v1
//! nodes <count> dim <dim>
//! node <label> <session> <v_0> ... <v_dim-1>
//! edges
//! <row of count cosine values>
//! ```
//!
//! Numbers are written with 6 decimals. Import rebuilds edges from the node
//! values, so the edge block is only checked for shape.

use std::io::{BufRead, Write};

use ndarray::Array1;

use super::{ClassGraph, ClassNode};
use crate::protocol::ClassId;
use crate::{Error, Result};

const HEADER: &str = "class-graph v1";

fn bad(detail: impl Into<String>) -> Error {
    Error::format("graph snapshot", detail)
}

impl ClassGraph {
    pub fn write_snapshot(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "{HEADER}")?;
        writeln!(w, "nodes {} dim {}", self.len(), self.dim().unwrap_or(0))?;
        for n in &self.nodes {
            write!(w, "node {} {}", n.label, n.session)?;
            for v in &n.values {
                write!(w, " {v:.6}")?;
            }
            writeln!(w)?;
        }
        writeln!(w, "edges")?;
        for row in self.edges.rows() {
            let line: Vec<String> = row.iter().map(|e| format!("{e:.6}")).collect();
            writeln!(w, "{}", line.join(" "))?;
        }
        Ok(())
    }

    pub fn read_snapshot(r: impl BufRead) -> Result<Self> {
        let mut lines = r.lines();
        let mut next = || -> Result<String> {
            lines
                .next()
                .ok_or_else(|| bad("unexpected end of input"))?
                .map_err(Error::from)
        };
        if next()?.trim() != HEADER {
            return Err(bad("missing header"));
        }
        let dims = next()?;
        let parts: Vec<&str> = dims.split_whitespace().collect();
        let (count, dim) = match parts.as_slice() {
            ["nodes", n, "dim", d] => (
                n.parse::<usize>().map_err(|_| bad("bad node count"))?,
                d.parse::<usize>().map_err(|_| bad("bad dim"))?,
            ),
            _ => return Err(bad("expected `nodes <n> dim <d>`")),
        };
        let mut nodes = Vec::with_capacity(count);
        for _ in 0..count {
            let line = next()?;
            let mut it = line.split_whitespace();
            if it.next() != Some("node") {
                return Err(bad("expected node line"));
            }
            let label = it.next().and_then(|t| t.parse().ok()).ok_or_else(|| bad("bad label"))?;
            let session = it
                .next()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| bad("bad session"))?;
            let values = it
                .map(|t| t.parse::<f64>().map_err(|_| bad(format!("bad value {t:?}"))))
                .collect::<Result<Vec<_>>>()?;
            if values.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: values.len(),
                });
            }
            nodes.push(ClassNode {
                label: ClassId(label),
                session,
                values: Array1::from(values),
            });
        }
        if next()?.trim() != "edges" {
            return Err(bad("expected edges block"));
        }
        for _ in 0..count {
            if next()?.split_whitespace().count() != count {
                return Err(bad("edge row has wrong length"));
            }
        }
        ClassGraph::from_nodes(nodes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cgn::build_base_graph;
    use ndarray::array;

    #[test]
    fn snapshot_round_trip() {
        let g = build_base_graph(&[
            (ClassId(3), array![1.25, -0.5, 2.0]),
            (ClassId(1), array![0.1, 0.2, -0.3]),
        ])
        .unwrap();
        let mut buf = Vec::new();
        g.write_snapshot(&mut buf).unwrap();
        let back = ClassGraph::read_snapshot(buf.as_slice()).unwrap();
        assert_eq!(back.labels(), g.labels());
        for (a, b) in g.nodes().iter().zip(back.nodes()) {
            assert_eq!(a.session, b.session);
            assert!(a.values.iter().zip(&b.values).all(|(x, y)| (x - y).abs() <= 1e-6));
        }
        assert!(g.edges().iter().zip(back.edges()).all(|(x, y)| (x - y).abs() <= 1e-6));
    }

    #[test]
    fn snapshot_rejects_garbage() {
        assert!(ClassGraph::read_snapshot("nope\n".as_bytes()).is_err());
        let truncated = "class-graph v1\nnodes 1 dim 2\nnode 0 0 1.0\n";
        assert!(ClassGraph::read_snapshot(truncated.as_bytes()).is_err());
    }
}
