use rand::Rng;

use crate::autodiff::{ParamStore, PoolKind, Shape, Tensor, Var};
use crate::error::{Error, Result};
use crate::space::{Ctx, InitRng, OpKind, OpModule};

/// Contiguous block of `len` selected channels starting at `offset`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ChannelMask {
    pub channels: usize,
    pub offset: usize,
    pub len: usize,
}

impl ChannelMask {
    pub fn full(channels: usize) -> Self {
        ChannelMask {
            channels,
            offset: 0,
            len: channels,
        }
    }

    pub fn ones(&self) -> Vec<bool> {
        (0..self.channels).map(|c| c >= self.offset && c < self.offset + self.len).collect()
    }

    pub fn is_full(&self) -> bool {
        self.len == self.channels
    }
}

/// Selected channel count `⌈C/K⌉`.
pub fn selected_channels(channels: usize, k: usize) -> Result<usize> {
    if k == 0 || k > channels {
        return Err(Error::Config(format!("partial-channel divisor K = {k} must be in [1, {channels}]")));
    }
    Ok(channels.div_ceil(k))
}

/// Draws a contiguous-block mask with `⌈C/K⌉` ones at a random offset.
pub fn sample_mask(channels: usize, k: usize, rng: &mut impl Rng) -> Result<ChannelMask> {
    let len = selected_channels(channels, k)?;
    let offset = rng.random_range(0..=channels - len);
    Ok(ChannelMask { channels, offset, len })
}

/// Continuously relaxed edge: every candidate operation applied to the
/// masked channels and mixed by `softmax(α)`; unselected channels bypass.
#[derive(Clone, Debug)]
pub struct MixedEdge {
    pub kinds: Vec<OpKind>,
    pub ops: Vec<OpModule>,
    pub channels: usize,
    pub stride: usize,
    pub mask: ChannelMask,
}

impl MixedEdge {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        kinds: &[OpKind],
        channels: usize,
        k: usize,
        stride: usize,
        store: &mut ParamStore,
        rng: &mut InitRng,
        name: &str,
    ) -> Result<Self> {
        let len = selected_channels(channels, k)?;
        let ops = kinds.iter().map(|&kind| OpModule::build(kind, len, stride, store, rng, name)).collect();
        Ok(MixedEdge {
            kinds: kinds.to_vec(),
            ops,
            channels,
            stride,
            mask: ChannelMask {
                channels,
                offset: 0,
                len,
            },
        })
    }

    pub fn set_mask(&mut self, mask: ChannelMask) -> Result<()> {
        if mask.channels != self.channels || mask.len != self.mask.len || mask.offset + mask.len > mask.channels {
            return Err(Error::shape(
                "mixed_op",
                format!("mask {mask:?} does not fit an edge of {} channels", self.channels),
            ));
        }
        self.mask = mask;
        Ok(())
    }

    pub fn resample(&mut self, rng: &mut impl Rng) {
        let len = self.mask.len;
        self.mask.offset = rng.random_range(0..=self.channels - len);
    }
}

/// `Σ_o w_o · o(M∗x) + (1−M)∗x`, where `weights` holds `softmax(α)`.
pub fn mixed_op_forward(cx: &mut Ctx, x: Var, weights: Var, edge: &MixedEdge) -> Result<Var> {
    let s = cx.tape.shape(x);
    let mask = edge.mask;
    if s.c != mask.channels {
        return Err(Error::shape(
            "mixed_op",
            format!("mask covers {} channels, input has {}", mask.channels, s.c),
        ));
    }
    let selected = if mask.is_full() {
        x
    } else {
        cx.tape.slice_channels(x, mask.offset, mask.len)?
    };
    let mut terms = Vec::with_capacity(edge.ops.len());
    for (i, op) in edge.ops.iter().enumerate() {
        if op.is_zero() {
            continue;
        }
        let y = op.forward(cx, selected)?;
        terms.push(cx.tape.scale_by(y, weights, i)?);
    }
    let mixed = if terms.is_empty() {
        let h = s.h.div_ceil(edge.stride);
        let w = s.w.div_ceil(edge.stride);
        cx.tape.constant(Tensor::zeros(Shape::new(s.n, mask.len, h, w)))
    } else {
        cx.tape.add_n(&terms)?
    };
    if mask.is_full() {
        return Ok(mixed);
    }
    let mut parts = Vec::with_capacity(3);
    let tail = mask.offset + mask.len;
    if mask.offset > 0 {
        let head = cx.tape.slice_channels(x, 0, mask.offset)?;
        parts.push(bypass(cx, head, edge.stride)?);
    }
    parts.push(mixed);
    if tail < mask.channels {
        let rest = cx.tape.slice_channels(x, tail, mask.channels - tail)?;
        parts.push(bypass(cx, rest, edge.stride)?);
    }
    cx.tape.concat_channels(&parts)
}

fn bypass(cx: &mut Ctx, x: Var, stride: usize) -> Result<Var> {
    if stride == 1 {
        Ok(x)
    } else {
        cx.tape.pool2d(x, PoolKind::Max, 3, stride, 1)
    }
}

/// `Σ_j softmax(β)_j · candidates_j`.
pub fn node_aggregate(cx: &mut Ctx, candidates: &[Var], beta_weights: Var) -> Result<Var> {
    if candidates.is_empty() {
        return Err(Error::EmptyOutput {
            op: "node_aggregate",
            detail: "no incoming edges".into(),
        });
    }
    let mut terms = Vec::with_capacity(candidates.len());
    for (j, &c) in candidates.iter().enumerate() {
        terms.push(cx.tape.scale_by(c, beta_weights, j)?);
    }
    cx.tape.add_n(&terms)
}
