//! Discrete search space: operations, cells, channel-flow planning and the
//! stacked network built from a genotype.

mod cell;
mod genotype;
mod layers;
mod network;
mod ops;
mod plan;

pub use cell::{edge_stride, Cell, CellModule, CellRole, CellSpec, Preprocess};
pub use genotype::{CellTopology, Edge, Genotype, StageEmbeddings, EDGES_PER_NODE};
pub use layers::{BatchNorm, Conv, Ctx, InitRng, Linear, ReluConvBn, BN_MOMENTUM};
pub use network::{
    build_stacked_bcnn, count_params_flops, Block, BlockKind, DiscreteNet, DiscreteParts, EmbeddingModule, PartsFactory,
    SiteSpec, StackedBcnn,
};
pub use ops::{OpKind, OpModule};
pub use plan::{
    channel_plan, channel_plan_for, channel_plan_with, deep_width, quarter, ChannelPlan, Site, SitePlan, StackedBcnnConfig,
    StagePlan,
};
