//! Over-parameterized stacked network: partial-channel mixed edges with
//! edge normalization, shared architecture weights per cell type, optional
//! searched embeddings, and discretization back to a genotype.

mod discretize;
mod mixed;

use rand::Rng;

use crate::autodiff::{Group, ParamId, ParamStore, Shape, Tape, Tensor, Var};
use crate::error::Result;
use crate::kes::{overparam_width, OverparamEmbedding, SiteEmbedding};
use crate::space::{
    channel_plan_with, edge_stride, quarter, CellModule, CellRole, CellSpec, CellTopology, Ctx, InitRng, OpKind,
    PartsFactory, Preprocess, ReluConvBn, Site, SiteSpec, StackedBcnn, StackedBcnnConfig, StageEmbeddings,
};

pub use discretize::{discretize_cell, edge_index, fnv1a, num_edges, ArchRank, CellWeights};
pub use mixed::{mixed_op_forward, node_aggregate, sample_mask, selected_channels, ChannelMask, MixedEdge};

pub const ALPHA_INIT_STD: f32 = 1e-3;

/// α (one vector per edge) and β (one vector per intermediate node) of one
/// cell type, shared by every cell of that type.
#[derive(Clone, Debug)]
pub struct ArchParams {
    pub alphas: Vec<ParamId>,
    pub betas: Vec<ParamId>,
}

impl ArchParams {
    pub fn new(store: &mut ParamStore, rng: &mut InitRng, name: &str, n_in: usize, n_ops: usize) -> Self {
        let alphas = (0..num_edges(n_in))
            .map(|e| {
                store.add(
                    format!("{name}.alpha{e}"),
                    Group::Arch,
                    Tensor::randn(Shape::vector(n_ops), ALPHA_INIT_STD, rng),
                )
            })
            .collect();
        let betas = (0..n_in)
            .map(|t| store.add(format!("{name}.beta{}", t + 2), Group::Arch, Tensor::zeros(Shape::vector(t + 2))))
            .collect();
        ArchParams { alphas, betas }
    }

    pub fn n_in(&self) -> usize {
        self.betas.len()
    }

    pub fn weights(&self, store: &ParamStore) -> CellWeights {
        CellWeights {
            alphas: self.alphas.iter().map(|&id| store.value(id).data().to_vec()).collect(),
            betas: self.betas.iter().map(|&id| store.value(id).data().to_vec()).collect(),
        }
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.alphas.iter().chain(&self.betas).copied()
    }
}

/// Cell whose every ordered node pair carries a mixed edge.
#[derive(Clone, Debug)]
pub struct SupernetCell {
    pub pre: Preprocess,
    /// Canonical order, see [`edge_index`].
    pub edges: Vec<MixedEdge>,
    pub arch: ArchParams,
}

impl SupernetCell {
    pub fn build(
        spec: &CellSpec,
        arch: ArchParams,
        kinds: &[OpKind],
        k_divisor: usize,
        store: &mut ParamStore,
        rng: &mut InitRng,
    ) -> Result<Self> {
        let pre = Preprocess::new(spec, store, rng);
        let mut edges = Vec::with_capacity(num_edges(spec.n_in));
        for t in 0..spec.n_in {
            let target = CellTopology::target(t);
            for j in 0..target {
                let name = format!("{}.n{target}.e{j}", spec.name);
                edges.push(MixedEdge::new(kinds, spec.c_node, k_divisor, edge_stride(j, spec.stride), store, rng, &name)?);
            }
        }
        Ok(SupernetCell { pre, edges, arch })
    }
}

impl CellModule for SupernetCell {
    fn forward(&self, cx: &mut Ctx, s0: Var, s1: Var) -> Result<Var> {
        let (p0, p1) = self.pre.forward(cx, s0, s1)?;
        let mut states = vec![p0, p1];
        for t in 0..self.arch.n_in() {
            let target = CellTopology::target(t);
            let beta = cx.param(self.arch.betas[t]);
            let beta_w = cx.tape.softmax(beta);
            let mut outs = Vec::with_capacity(target);
            for (j, &state) in states.iter().enumerate().take(target) {
                let e = edge_index(target, j);
                let alpha = cx.param(self.arch.alphas[e]);
                let alpha_w = cx.tape.softmax(alpha);
                outs.push(mixed_op_forward(cx, state, alpha_w, &self.edges[e])?);
            }
            states.push(node_aggregate(cx, &outs, beta_w)?);
        }
        cx.tape.concat_channels(&states[2..])
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SupernetConfig {
    /// Partial-channel divisor K.
    pub k_divisor: usize,
    pub kes: bool,
    pub kinds: Vec<OpKind>,
}

impl Default for SupernetConfig {
    fn default() -> Self {
        SupernetConfig {
            k_divisor: 4,
            kes: false,
            kinds: OpKind::ALL.to_vec(),
        }
    }
}

struct SupernetParts<'a> {
    config: &'a SupernetConfig,
    conv: Option<ArchParams>,
    enh: Option<ArchParams>,
}

impl PartsFactory for SupernetParts<'_> {
    type Cell = SupernetCell;
    type Embed = SiteEmbedding;

    fn cell(&mut self, spec: &CellSpec, store: &mut ParamStore, rng: &mut InitRng) -> Result<SupernetCell> {
        let n_ops = self.config.kinds.len();
        let (slot, name) = if spec.role.is_convolution() {
            (&mut self.conv, "arch.conv")
        } else {
            (&mut self.enh, "arch.enh")
        };
        let arch = slot.get_or_insert_with(|| ArchParams::new(store, rng, name, spec.n_in, n_ops)).clone();
        SupernetCell::build(spec, arch, &self.config.kinds, self.config.k_divisor, store, rng)
    }

    fn embedding(&mut self, spec: &SiteSpec, store: &mut ParamStore, rng: &mut InitRng) -> Result<SiteEmbedding> {
        let p = spec.plan;
        if self.config.kes && spec.site.is_indirect() {
            Ok(SiteEmbedding::Searched(OverparamEmbedding::from_plan(store, rng, &spec.name, &p)?))
        } else {
            Ok(SiteEmbedding::Fixed(ReluConvBn::pointwise(store, rng, &spec.name, p.in_ch, p.out_ch, p.stride)))
        }
    }
}

#[derive(Clone, Debug)]
pub struct Supernet {
    pub net: StackedBcnn<SupernetCell, SiteEmbedding>,
    pub config: SupernetConfig,
    pub conv_arch: ArchParams,
    pub enh_arch: ArchParams,
}

impl Supernet {
    /// During KES, consumers of a searched site see the summed candidate
    /// width; otherwise indirect sites use the quarter rule.
    pub fn new(space: &StackedBcnnConfig, config: SupernetConfig, seed: u64) -> Result<Self> {
        let kes = config.kes;
        let plan = channel_plan_with(space, |_, site, in_ch| match (site.is_indirect(), kes) {
            (false, _) => Ok(in_ch),
            (true, true) => overparam_width(in_ch),
            (true, false) => Ok(quarter(in_ch)),
        })?;
        let mut parts = SupernetParts {
            config: &config,
            conv: None,
            enh: None,
        };
        let net = StackedBcnn::build(space, plan, &mut parts, seed)?;
        let conv_arch = parts.conv.take().expect("every mini BCNN has a broad cell");
        let enh_arch = parts.enh.take().expect("every mini BCNN has an enhancement cell");
        Ok(Supernet {
            net,
            config,
            conv_arch,
            enh_arch,
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.net.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.net.store
    }

    /// Θ: α and β of both cell types, plus γ of every searched embedding.
    pub fn arch_ids(&self) -> Vec<ParamId> {
        self.net.store.architecture_ids()
    }

    pub fn weight_ids(&self) -> Vec<ParamId> {
        self.net.store.ids_in(Group::Weight).collect()
    }

    pub fn arch_for(&self, role: CellRole) -> &ArchParams {
        if role.is_convolution() {
            &self.conv_arch
        } else {
            &self.enh_arch
        }
    }

    /// Draws a fresh mask for every mixed edge, in block order.
    pub fn resample_masks(&mut self, rng: &mut impl Rng) {
        for (_, cell) in self.net.cells_mut() {
            for edge in &mut cell.edges {
                edge.resample(rng);
            }
        }
    }

    pub fn forward(&mut self, tape: &mut Tape, x: Var, train: bool) -> Result<Var> {
        self.net.forward(tape, x, train)
    }

    /// Mean cross-entropy of `images` against `labels`.
    pub fn loss(&mut self, tape: &mut Tape, images: &Tensor, labels: &[usize], train: bool) -> Result<Var> {
        let logits = self.net.forward_tensor(tape, images.clone(), train)?;
        tape.softmax_cross_entropy(logits, labels)
    }

    pub fn embedding_choices(&self) -> Vec<StageEmbeddings> {
        if !self.config.kes {
            return Vec::new();
        }
        let store = &self.net.store;
        let mut out = vec![
            StageEmbeddings {
                deep_out: 0,
                broad_out: 0,
                deep_enh: 0,
                broad_enh: 0,
            };
            self.net.plan.stages.len()
        ];
        for (stage, site, module) in self.net.embeddings() {
            if let Some(m) = module.searched() {
                let e = &mut out[stage - 1];
                let w = m.discretize(store);
                match site {
                    Site::DeepOut => e.deep_out = w,
                    Site::BroadOut => e.broad_out = w,
                    Site::DeepEnh => e.deep_enh = w,
                    Site::BroadEnh => e.broad_enh = w,
                    Site::EnhOut => unreachable!("direct site is never searched"),
                }
            }
        }
        out
    }

    pub fn arch_rank(&self) -> ArchRank {
        let store = &self.net.store;
        ArchRank {
            conv: discretize_cell(&self.conv_arch.weights(store), &self.config.kinds),
            enh: discretize_cell(&self.enh_arch.weights(store), &self.config.kinds),
            embeddings: self.embedding_choices(),
        }
    }

    pub fn discretize(&self) -> crate::space::Genotype {
        self.arch_rank().genotype()
    }
}
