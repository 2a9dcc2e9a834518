use std::fmt::Write as _;

use crate::autodiff::softmax;
use crate::space::{CellTopology, Edge, Genotype, OpKind, StageEmbeddings, EDGES_PER_NODE};

/// Incoming edges of every intermediate node in a cell with `n_in` of them.
pub fn num_edges(n_in: usize) -> usize {
    (n_in + 1) * (n_in + 2) / 2 - 1
}

/// Position of edge `source → target` in canonical order (by target, then
/// source).
pub fn edge_index(target: usize, source: usize) -> usize {
    debug_assert!(source < target && target >= 2);
    (target - 1) * target / 2 - 1 + source
}

/// Raw architecture weights of one cell type.
#[derive(Clone, Debug, PartialEq)]
pub struct CellWeights {
    /// `alphas[edge_index(t, j)][o]`.
    pub alphas: Vec<Vec<f32>>,
    /// `betas[t - 2][j]`.
    pub betas: Vec<Vec<f32>>,
}

/// Best non-zero op of an edge given `softmax(α)`: `(op position, weight)`.
/// Ties keep the earlier kind.
fn best_op(kinds: &[OpKind], alpha_sm: &[f32]) -> Option<(usize, f32)> {
    let mut best: Option<(usize, f32)> = None;
    for (o, (&kind, &w)) in kinds.iter().zip(alpha_sm).enumerate() {
        if kind == OpKind::Zero {
            continue;
        }
        if best.is_none_or(|(_, bw)| w > bw) {
            best = Some((o, w));
        }
    }
    best
}

/// Per node, keeps the two sources with the highest
/// `softmax(α)_o · softmax(β)_j` over non-zero ops; ties go to the lower
/// source index, then to the earlier op kind.
pub fn discretize_cell(weights: &CellWeights, kinds: &[OpKind]) -> CellTopology {
    let n_in = weights.betas.len();
    let mut nodes = Vec::with_capacity(n_in);
    for t in 0..n_in {
        let target = CellTopology::target(t);
        let beta_sm = softmax(&weights.betas[t]);
        let mut scored: Vec<(f32, usize, OpKind)> = (0..target)
            .filter_map(|j| {
                let alpha_sm = softmax(&weights.alphas[edge_index(target, j)]);
                best_op(kinds, &alpha_sm).map(|(o, w)| (w * beta_sm[j], j, kinds[o]))
            })
            .collect();
        // stable sort keeps ascending source order among equal scores
        scored.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mut chosen: Vec<Edge> = scored.iter().take(EDGES_PER_NODE).map(|&(_, j, op)| Edge::new(j, op)).collect();
        chosen.sort_by_key(|e| e.source);
        nodes.push(chosen);
    }
    CellTopology::new(nodes).expect("discretization yields a valid topology")
}

/// What discretization would currently emit; compared epoch to epoch for
/// early stopping.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ArchRank {
    pub conv: CellTopology,
    pub enh: CellTopology,
    /// Argmax embedding widths per stage, empty unless KES is active.
    pub embeddings: Vec<StageEmbeddings>,
}

impl ArchRank {
    pub fn genotype(&self) -> Genotype {
        Genotype {
            conv_cell: self.conv.clone(),
            enh_cell: self.enh.clone(),
            embedding_channels: (!self.embeddings.is_empty()).then(|| self.embeddings.clone()),
        }
    }

    /// Cell part of the rank (convolution and enhancement topologies).
    pub fn cells(&self) -> (&CellTopology, &CellTopology) {
        (&self.conv, &self.enh)
    }

    pub fn canonical(&self) -> String {
        let mut s = String::new();
        for (name, cell) in [("conv", &self.conv), ("enh", &self.enh)] {
            s.push_str(name);
            for (t, e) in cell.edges() {
                let _ = write!(s, " {t}<{}:{}", e.source, e.op);
            }
            s.push('|');
        }
        s.push_str("emb");
        for e in &self.embeddings {
            let _ = write!(s, " {},{},{},{}", e.deep_out, e.broad_out, e.deep_enh, e.broad_enh);
        }
        s
    }

    /// 64-bit FNV-1a of the canonical form.
    pub fn fingerprint(&self) -> u64 {
        fnv1a(self.canonical().as_bytes())
    }
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}
