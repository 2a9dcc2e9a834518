use crate::error::{Error, Result};

use super::ops::OpKind;

/// Incoming edge of an intermediate node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Edge {
    pub source: usize,
    pub op: OpKind,
}

impl Edge {
    pub fn new(source: usize, op: OpKind) -> Self {
        Edge { source, op }
    }
}

/// Discrete cell: nodes 0 and 1 are inputs, `2..2 + n_in` intermediate,
/// and the output concatenates every intermediate node.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct CellTopology {
    nodes: Vec<Vec<Edge>>,
}

pub const EDGES_PER_NODE: usize = 2;

impl CellTopology {
    /// `nodes[t]` lists the incoming edges of node `t + 2`.
    pub fn new(nodes: Vec<Vec<Edge>>) -> Result<Self> {
        let t = CellTopology { nodes };
        t.validate()?;
        Ok(t)
    }

    /// Every intermediate node reads `op` from both cell inputs.
    pub fn uniform(n_in: usize, op: OpKind) -> Self {
        CellTopology {
            nodes: (0..n_in)
                .map(|_| vec![Edge::new(0, op), Edge::new(1, op)])
                .collect(),
        }
    }

    pub fn n_in(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[Vec<Edge>] {
        &self.nodes
    }

    /// Target index of intermediate node `t`.
    pub fn target(t: usize) -> usize {
        t + 2
    }

    /// `(target, source, op)` triples in node order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, Edge)> + '_ {
        self.nodes
            .iter()
            .enumerate()
            .flat_map(|(t, es)| es.iter().map(move |&e| (Self::target(t), e)))
    }

    pub fn validate(&self) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Genotype("cell has no intermediate nodes".into()));
        }
        for (t, edges) in self.nodes.iter().enumerate() {
            let target = Self::target(t);
            if edges.len() != EDGES_PER_NODE {
                return Err(Error::Genotype(format!(
                    "node {target} has {} incoming edges, expected {EDGES_PER_NODE}",
                    edges.len()
                )));
            }
            for e in edges {
                if e.source >= target {
                    return Err(Error::Genotype(format!(
                        "edge {} -> {target} is not acyclic (source must precede target)",
                        e.source
                    )));
                }
            }
            if edges[0].source == edges[1].source {
                return Err(Error::Genotype(format!(
                    "node {target} reads source {} twice",
                    edges[0].source
                )));
            }
        }
        Ok(())
    }
}

/// Output widths of the four indirect knowledge-embedding sites of one
/// mini BCNN.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StageEmbeddings {
    pub deep_out: usize,
    pub broad_out: usize,
    pub deep_enh: usize,
    pub broad_enh: usize,
}

/// Discrete architecture: shared convolution-cell topology (deep and broad
/// cells), enhancement-cell topology, and optional searched embedding widths.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Genotype {
    pub conv_cell: CellTopology,
    pub enh_cell: CellTopology,
    /// `None` means hand-crafted quarter-width embeddings.
    pub embedding_channels: Option<Vec<StageEmbeddings>>,
}

impl Genotype {
    pub fn new(conv_cell: CellTopology, enh_cell: CellTopology) -> Result<Self> {
        if conv_cell.n_in() != enh_cell.n_in() {
            return Err(Error::Genotype(format!(
                "convolution cell has {} intermediate nodes, enhancement cell {}",
                conv_cell.n_in(),
                enh_cell.n_in()
            )));
        }
        Ok(Genotype {
            conv_cell,
            enh_cell,
            embedding_channels: None,
        })
    }

    pub fn uniform(n_in: usize, op: OpKind) -> Self {
        Genotype {
            conv_cell: CellTopology::uniform(n_in, op),
            enh_cell: CellTopology::uniform(n_in, op),
            embedding_channels: None,
        }
    }

    pub fn n_in(&self) -> usize {
        self.conv_cell.n_in()
    }

    pub fn with_embeddings(mut self, e: Vec<StageEmbeddings>) -> Self {
        self.embedding_channels = Some(e);
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_cycles_and_wrong_degree() {
        assert!(CellTopology::new(vec![vec![Edge::new(2, OpKind::Conv3x3), Edge::new(0, OpKind::Zero)]]).is_err());
        assert!(CellTopology::new(vec![vec![Edge::new(0, OpKind::Conv3x3)]]).is_err());
        assert!(CellTopology::new(vec![vec![Edge::new(0, OpKind::Conv3x3), Edge::new(0, OpKind::Zero)]]).is_err());
        assert!(CellTopology::new(vec![
            vec![Edge::new(0, OpKind::Conv3x3), Edge::new(1, OpKind::Zero)],
            vec![Edge::new(2, OpKind::SkipConnect), Edge::new(0, OpKind::MaxPool3x3)],
        ])
        .is_ok());
    }

    #[test]
    fn genotype_cells_must_agree_on_node_count() {
        assert!(Genotype::new(CellTopology::uniform(2, OpKind::Zero), CellTopology::uniform(3, OpKind::Zero)).is_err());
    }
}
