//! Genotype files: JSON with edges as `[target, source, op_name]`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::space::{CellTopology, Edge, Genotype, OpKind, StageEmbeddings};

use super::fs::write_atomic;

pub const GENOTYPE_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EmbeddingFile {
    deep_out: usize,
    broad_out: usize,
    deep_enh: usize,
    broad_enh: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GenotypeFile {
    format_version: u32,
    #[serde(rename = "N_in")]
    n_in: usize,
    conv_cell: Vec<(usize, usize, String)>,
    enh_cell: Vec<(usize, usize, String)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    embedding_channels: Option<Vec<EmbeddingFile>>,
}

fn edges_out(cell: &CellTopology) -> Vec<(usize, usize, String)> {
    cell.edges().map(|(t, e)| (t, e.source, e.op.name().to_string())).collect()
}

fn edges_in(which: &str, n_in: usize, raw: &[(usize, usize, String)]) -> Result<CellTopology> {
    let mut nodes = vec![Vec::new(); n_in];
    for (target, source, op) in raw {
        let kind = OpKind::from_name(op).ok_or_else(|| Error::Genotype(format!("{which}: unknown op \"{op}\"")))?;
        let t = target
            .checked_sub(2)
            .filter(|&t| t < n_in)
            .ok_or_else(|| Error::Genotype(format!("{which}: target {target} is not an intermediate node (2..{})", n_in + 2)))?;
        nodes[t].push(Edge::new(*source, kind));
    }
    CellTopology::new(nodes).map_err(|e| match e {
        Error::Genotype(m) => Error::Genotype(format!("{which}: {m}")),
        e => e,
    })
}

pub fn genotype_to_json(g: &Genotype) -> String {
    let file = GenotypeFile {
        format_version: GENOTYPE_FORMAT_VERSION,
        n_in: g.n_in(),
        conv_cell: edges_out(&g.conv_cell),
        enh_cell: edges_out(&g.enh_cell),
        embedding_channels: g.embedding_channels.as_ref().map(|es| {
            es.iter()
                .map(|e| EmbeddingFile {
                    deep_out: e.deep_out,
                    broad_out: e.broad_out,
                    deep_enh: e.deep_enh,
                    broad_enh: e.broad_enh,
                })
                .collect()
        }),
    };
    serde_json::to_string_pretty(&file).expect("plain data serializes") + "\n"
}

/// Parses and validates a genotype; a missing `embedding_channels` means
/// hand-crafted quarter-width embeddings.
pub fn genotype_from_json(text: &str) -> Result<Genotype> {
    let file: GenotypeFile = serde_json::from_str(text).map_err(|e| Error::Genotype(e.to_string()))?;
    if file.format_version != GENOTYPE_FORMAT_VERSION {
        return Err(Error::Genotype(format!(
            "format_version {} is not supported (expected {GENOTYPE_FORMAT_VERSION})",
            file.format_version
        )));
    }
    if file.n_in == 0 {
        return Err(Error::Genotype("N_in must be at least 1".into()));
    }
    let conv = edges_in("conv_cell", file.n_in, &file.conv_cell)?;
    let enh = edges_in("enh_cell", file.n_in, &file.enh_cell)?;
    let mut g = Genotype::new(conv, enh)?;
    if let Some(es) = file.embedding_channels {
        // zero marks a site removed by a fusion toggle; the network builder
        // rejects zero on a site that exists
        g.embedding_channels = Some(
            es.into_iter()
                .map(|e| StageEmbeddings {
                    deep_out: e.deep_out,
                    broad_out: e.broad_out,
                    deep_enh: e.deep_enh,
                    broad_enh: e.broad_enh,
                })
                .collect(),
        );
    }
    Ok(g)
}

pub fn save_genotype(path: impl AsRef<Path>, g: &Genotype) -> Result<()> {
    write_atomic(path, genotype_to_json(g).as_bytes())
}

pub fn load_genotype(path: impl AsRef<Path>) -> Result<Genotype> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    genotype_from_json(&text).map_err(|e| match e {
        Error::Genotype(m) => Error::Genotype(format!("{}: {m}", path.display())),
        e => e,
    })
}
