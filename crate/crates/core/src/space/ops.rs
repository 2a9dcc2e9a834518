use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvGeom, ParamStore, PoolKind, Shape, Tensor, Var};
use crate::error::Result;

use super::layers::{Ctx, InitRng, ReluConvBn};

/// Candidate operation on a cell edge.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Zero,
    SkipConnect,
    Conv1x1,
    Conv3x3,
    DilConv3x3,
    MaxPool3x3,
    AvgPool3x3,
}

impl OpKind {
    /// Declaration order; also the tie-break order during discretization.
    pub const ALL: [OpKind; 7] = [
        OpKind::Zero,
        OpKind::SkipConnect,
        OpKind::Conv1x1,
        OpKind::Conv3x3,
        OpKind::DilConv3x3,
        OpKind::MaxPool3x3,
        OpKind::AvgPool3x3,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Zero => "zero",
            OpKind::SkipConnect => "skip_connect",
            OpKind::Conv1x1 => "conv_1x1",
            OpKind::Conv3x3 => "conv_3x3",
            OpKind::DilConv3x3 => "dil_conv_3x3",
            OpKind::MaxPool3x3 => "max_pool_3x3",
            OpKind::AvgPool3x3 => "avg_pool_3x3",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        OpKind::ALL.into_iter().find(|k| k.name() == name)
    }

    pub fn index(self) -> usize {
        OpKind::ALL.iter().position(|&k| k == self).expect("listed")
    }
}

impl std::fmt::Display for OpKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Instantiated operation mapping `channels` to `channels` at `stride`.
#[derive(Clone, Debug)]
pub enum OpModule {
    Zero { stride: usize },
    Identity,
    /// Skip connection at stride 2: ReLU → 1×1 stride-2 conv → BN.
    Reduce(ReluConvBn),
    Conv(ReluConvBn),
    Pool { kind: PoolKind, stride: usize },
}

impl OpModule {
    pub fn build(kind: OpKind, channels: usize, stride: usize, store: &mut ParamStore, rng: &mut InitRng, name: &str) -> Self {
        let name = format!("{name}.{}", kind.name());
        match kind {
            OpKind::Zero => OpModule::Zero { stride },
            OpKind::SkipConnect if stride == 1 => OpModule::Identity,
            OpKind::SkipConnect => OpModule::Reduce(ReluConvBn::pointwise(store, rng, &name, channels, channels, stride)),
            OpKind::Conv1x1 => OpModule::Conv(ReluConvBn::pointwise(store, rng, &name, channels, channels, stride)),
            OpKind::Conv3x3 => OpModule::Conv(ReluConvBn::new(store, rng, &name, channels, channels, 3, ConvGeom::new(stride, 1))),
            OpKind::DilConv3x3 => OpModule::Conv(ReluConvBn::new(
                store,
                rng,
                &name,
                channels,
                channels,
                3,
                ConvGeom::new(stride, 2).dilated(2),
            )),
            OpKind::MaxPool3x3 => OpModule::Pool {
                kind: PoolKind::Max,
                stride,
            },
            OpKind::AvgPool3x3 => OpModule::Pool {
                kind: PoolKind::Avg,
                stride,
            },
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, OpModule::Zero { .. })
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        match self {
            OpModule::Zero { stride } => {
                let s = cx.tape.shape(x);
                let shape = Shape::new(s.n, s.c, s.h.div_ceil(*stride), s.w.div_ceil(*stride));
                Ok(cx.tape.constant(Tensor::zeros(shape)))
            }
            OpModule::Identity => Ok(x),
            OpModule::Reduce(m) | OpModule::Conv(m) => m.forward(cx, x),
            OpModule::Pool { kind, stride } => cx.tape.pool2d(x, *kind, 3, *stride, 1),
        }
    }
}
