use crate::autodiff::{ParamStore, Var};
use crate::error::{Error, Result};

use super::genotype::CellTopology;
use super::layers::{Ctx, InitRng, ReluConvBn};
use super::ops::OpModule;

/// Role a cell plays inside a mini BCNN.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CellRole {
    Deep,
    Broad,
    Enhancement,
}

impl CellRole {
    pub fn name(self) -> &'static str {
        match self {
            CellRole::Deep => "deep",
            CellRole::Broad => "broad",
            CellRole::Enhancement => "enh",
        }
    }

    /// Deep and broad cells share the convolution-cell topology.
    pub fn is_convolution(self) -> bool {
        self != CellRole::Enhancement
    }
}

/// Everything a cell builder needs to know about one cell position.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CellSpec {
    pub name: String,
    pub stage: usize,
    pub role: CellRole,
    pub c_prev_prev: usize,
    pub c_prev: usize,
    pub c_node: usize,
    pub n_in: usize,
    pub stride: usize,
}

impl CellSpec {
    pub fn out_channels(&self) -> usize {
        self.c_node * self.n_in
    }
}

/// Two-input cell as seen by the network graph.
pub trait CellModule {
    fn forward(&self, cx: &mut Ctx, s0: Var, s1: Var) -> Result<Var>;
}

/// Input preprocessing shared by discrete and supernet cells: both inputs
/// are mapped to `c_node` channels by ReLU–1×1 conv–BN.
#[derive(Clone, Debug)]
pub struct Preprocess {
    pub pre0: ReluConvBn,
    pub pre1: ReluConvBn,
}

impl Preprocess {
    pub fn new(spec: &CellSpec, store: &mut ParamStore, rng: &mut InitRng) -> Self {
        Preprocess {
            pre0: ReluConvBn::pointwise(store, rng, &format!("{}.pre0", spec.name), spec.c_prev_prev, spec.c_node, 1),
            pre1: ReluConvBn::pointwise(store, rng, &format!("{}.pre1", spec.name), spec.c_prev, spec.c_node, 1),
        }
    }

    pub fn forward(&self, cx: &mut Ctx, s0: Var, s1: Var) -> Result<(Var, Var)> {
        let (a, b) = (cx.tape.shape(s0), cx.tape.shape(s1));
        if (a.h, a.w) != (b.h, b.w) {
            return Err(Error::shape(
                "cell",
                format!("inputs disagree on spatial size: {}x{} vs {}x{}", a.h, a.w, b.h, b.w),
            ));
        }
        Ok((self.pre0.forward(cx, s0)?, self.pre1.forward(cx, s1)?))
    }
}

/// Stride of an edge: reduction happens only on edges leaving an input node.
pub fn edge_stride(source: usize, cell_stride: usize) -> usize {
    if source < 2 {
        cell_stride
    } else {
        1
    }
}

/// Discrete cell instantiated from a topology.
#[derive(Clone, Debug)]
pub struct Cell {
    pub pre: Preprocess,
    /// Per intermediate node: `(source, op)` pairs.
    pub nodes: Vec<Vec<(usize, OpModule)>>,
}

impl Cell {
    pub fn build(topology: &CellTopology, spec: &CellSpec, store: &mut ParamStore, rng: &mut InitRng) -> Result<Self> {
        topology.validate()?;
        if topology.n_in() != spec.n_in {
            return Err(Error::Genotype(format!(
                "{}: topology has {} intermediate nodes, plan expects {}",
                spec.name,
                topology.n_in(),
                spec.n_in
            )));
        }
        let pre = Preprocess::new(spec, store, rng);
        let nodes = topology
            .nodes()
            .iter()
            .enumerate()
            .map(|(t, edges)| {
                edges
                    .iter()
                    .map(|e| {
                        let name = format!("{}.n{}.e{}", spec.name, CellTopology::target(t), e.source);
                        let op = OpModule::build(e.op, spec.c_node, edge_stride(e.source, spec.stride), store, rng, &name);
                        (e.source, op)
                    })
                    .collect()
            })
            .collect();
        Ok(Cell { pre, nodes })
    }
}

impl CellModule for Cell {
    fn forward(&self, cx: &mut Ctx, s0: Var, s1: Var) -> Result<Var> {
        let (p0, p1) = self.pre.forward(cx, s0, s1)?;
        let mut states = vec![p0, p1];
        for edges in &self.nodes {
            let mut terms = Vec::with_capacity(edges.len());
            for (source, op) in edges {
                terms.push(op.forward(cx, states[*source])?);
            }
            states.push(cx.tape.add_n(&terms)?);
        }
        cx.tape.concat_channels(&states[2..])
    }
}
