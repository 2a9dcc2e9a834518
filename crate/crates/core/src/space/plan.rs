//! Channel-flow arithmetic of the stacked network.
//!
//! For mini BCNN `i` (1-based) the deep cells emit `n_in · 2^(i-1) · c`
//! channels and the broad and enhancement cells twice that. Hand-crafted
//! knowledge embeddings on indirect edges keep a quarter of their input
//! width; the direct enhancement→output embedding keeps all of it.

use serde::{Deserialize, Serialize};

use crate::autodiff::out_extent;
use crate::error::{Error, Result};

use super::genotype::StageEmbeddings;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StackedBcnnConfig {
    /// Number of mini BCNNs.
    pub u: usize,
    /// Deep cells per mini BCNN.
    pub k: usize,
    /// Stem output width, i.e. the input width of the first mini BCNN.
    pub c: usize,
    /// Intermediate nodes per cell.
    pub n_in: usize,
    pub num_classes: usize,
    pub input_size: usize,
    pub input_channels: usize,
    pub stem_stride: usize,
    /// Broad cell → output embedding. Off, together with `d2e`, gives the
    /// vanilla BCNN fusion.
    #[serde(default = "on")]
    pub b2o: bool,
    /// Deep cell → enhancement cell embedding. Off, the enhancement cell
    /// reads the broad cell twice.
    #[serde(default = "on")]
    pub d2e: bool,
}

fn on() -> bool {
    true
}

impl Default for StackedBcnnConfig {
    fn default() -> Self {
        StackedBcnnConfig {
            u: 2,
            k: 1,
            c: 16,
            n_in: 4,
            num_classes: 10,
            input_size: 32,
            input_channels: 3,
            stem_stride: 1,
            b2o: true,
            d2e: true,
        }
    }
}

/// Knowledge-embedding positions of a mini BCNN.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Site {
    DeepOut,
    BroadOut,
    EnhOut,
    DeepEnh,
    BroadEnh,
}

impl Site {
    pub const ALL: [Site; 5] = [Site::DeepOut, Site::BroadOut, Site::EnhOut, Site::DeepEnh, Site::BroadEnh];
    pub const INDIRECT: [Site; 4] = [Site::DeepOut, Site::BroadOut, Site::DeepEnh, Site::BroadEnh];

    pub fn is_indirect(self) -> bool {
        self != Site::EnhOut
    }

    pub fn name(self) -> &'static str {
        match self {
            Site::DeepOut => "deep_out",
            Site::BroadOut => "broad_out",
            Site::EnhOut => "enh_out",
            Site::DeepEnh => "deep_enh",
            Site::BroadEnh => "broad_enh",
        }
    }

    /// Embeddings fed by the deep branch run at the deep resolution and
    /// downsample to the broad/enhancement resolution.
    pub fn stride(self) -> usize {
        match self {
            Site::DeepOut | Site::DeepEnh => 2,
            _ => 1,
        }
    }

    pub fn of(self, e: &StageEmbeddings) -> Option<usize> {
        match self {
            Site::DeepOut => Some(e.deep_out),
            Site::BroadOut => Some(e.broad_out),
            Site::DeepEnh => Some(e.deep_enh),
            Site::BroadEnh => Some(e.broad_enh),
            Site::EnhOut => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SitePlan {
    pub in_ch: usize,
    pub out_ch: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StagePlan {
    /// 1-based stage index.
    pub index: usize,
    pub c_in: usize,
    pub c_deep: usize,
    pub c_broad: usize,
    pub c_enh: usize,
    /// Width of the last deep output `y_k` (the stage input when `k = 0`).
    pub deep_src: usize,
    pub deep_out: SitePlan,
    pub broad_out: SitePlan,
    pub enh_out: SitePlan,
    pub deep_enh: SitePlan,
    pub broad_enh: SitePlan,
    /// Width of the channel concat of the output embeddings.
    pub concat: usize,
    /// Width handed to the GAP layer and the next stage.
    pub out: usize,
    pub spatial_in: usize,
    pub spatial_out: usize,
}

impl StagePlan {
    pub fn site(&self, site: Site) -> &SitePlan {
        match site {
            Site::DeepOut => &self.deep_out,
            Site::BroadOut => &self.broad_out,
            Site::EnhOut => &self.enh_out,
            Site::DeepEnh => &self.deep_enh,
            Site::BroadEnh => &self.broad_enh,
        }
    }

    /// Per-node width of the deep cells.
    pub fn c_node_deep(&self, n_in: usize) -> usize {
        self.c_deep / n_in
    }

    pub fn c_node_wide(&self, n_in: usize) -> usize {
        self.c_broad / n_in
    }

    /// Sites present in this stage; disabled ones have zero width.
    pub fn sites(&self) -> impl Iterator<Item = Site> + '_ {
        Site::ALL.into_iter().filter(|&s| self.site(s).out_ch > 0)
    }

    pub fn is_compressed(&self) -> bool {
        self.out != self.concat
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChannelPlan {
    pub n_in: usize,
    pub k: usize,
    pub stem_out: usize,
    pub stem_spatial: usize,
    pub stages: Vec<StagePlan>,
    pub gap_width: usize,
}

/// `n_in · 2^(i-1) · c`.
pub fn deep_width(n_in: usize, c: usize, stage: usize) -> usize {
    n_in * (1 << (stage - 1)) * c
}

/// Hand-crafted indirect embedding width: a quarter of the input, rounded
/// up when the input is not a multiple of four.
pub fn quarter(in_ch: usize) -> usize {
    in_ch.div_ceil(4)
}

impl StackedBcnnConfig {
    /// Whether `site` exists under the fusion toggles.
    pub fn uses(&self, site: Site) -> bool {
        match site {
            Site::BroadOut => self.b2o,
            Site::DeepEnh => self.d2e,
            _ => true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("u", self.u),
            ("c", self.c),
            ("n_in", self.n_in),
            ("input_size", self.input_size),
            ("input_channels", self.input_channels),
            ("stem_stride", self.stem_stride),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        if self.u > 16 {
            return Err(Error::Config(format!("u = {} is unreasonably large", self.u)));
        }
        Ok(())
    }
}

/// Channel plan with hand-crafted embeddings.
pub fn channel_plan(config: &StackedBcnnConfig) -> Result<ChannelPlan> {
    channel_plan_with(config, |_, site, in_ch| Ok(if site.is_indirect() { quarter(in_ch) } else { in_ch }))
}

/// Channel plan whose embeddings follow a genotype's searched widths, or
/// the hand-crafted rule when it carries none.
pub fn channel_plan_for(config: &StackedBcnnConfig, embeddings: Option<&[StageEmbeddings]>) -> Result<ChannelPlan> {
    match embeddings {
        None => channel_plan(config),
        Some(e) => {
            if e.len() != config.u {
                return Err(Error::Config(format!(
                    "genotype has embedding widths for {} mini BCNNs, config has u = {}",
                    e.len(),
                    config.u
                )));
            }
            channel_plan_with(config, |stage, site, in_ch| {
                Ok(site.of(&e[stage - 1]).unwrap_or(in_ch))
            })
        }
    }
}

/// Channel plan with embedding widths chosen by `width(stage, site, in_ch)`.
pub fn channel_plan_with<F>(config: &StackedBcnnConfig, mut width: F) -> Result<ChannelPlan>
where
    F: FnMut(usize, Site, usize) -> Result<usize>,
{
    config.validate()?;
    let n_in = config.n_in;
    let stem_spatial = out_extent(config.input_size, 3, config.stem_stride, 1, 1)
        .ok_or_else(|| Error::Config(format!("input size {} too small for the stem", config.input_size)))?;
    let mut stages = Vec::with_capacity(config.u);
    let mut c_in = config.c;
    let mut spatial = stem_spatial;
    let mut gap_width = 0;
    for i in 1..=config.u {
        if spatial < 2 {
            return Err(Error::SpatialUnderflow { stage: i, size: spatial });
        }
        let c_deep = deep_width(n_in, config.c, i);
        let c_broad = 2 * c_deep;
        let c_enh = 2 * c_deep;
        let deep_src = if config.k == 0 { c_in } else { c_deep };
        let mut site = |s: Site, in_ch: usize| -> Result<SitePlan> {
            if !config.uses(s) {
                return Ok(SitePlan {
                    in_ch,
                    out_ch: 0,
                    stride: s.stride(),
                });
            }
            let out_ch = width(i, s, in_ch)?;
            if out_ch == 0 {
                return Err(Error::Config(format!("stage {i} {} embedding has zero width", s.name())));
            }
            Ok(SitePlan {
                in_ch,
                out_ch,
                stride: s.stride(),
            })
        };
        let deep_out = site(Site::DeepOut, deep_src)?;
        let broad_out = site(Site::BroadOut, c_broad)?;
        let enh_out = site(Site::EnhOut, c_enh)?;
        let deep_enh = site(Site::DeepEnh, deep_src)?;
        let broad_enh = site(Site::BroadEnh, c_broad)?;
        let concat = deep_out.out_ch + broad_out.out_ch + enh_out.out_ch;
        let out = if i < config.u { 2 * c_in } else { concat };
        let spatial_out = spatial.div_ceil(2);
        gap_width += out;
        stages.push(StagePlan {
            index: i,
            c_in,
            c_deep,
            c_broad,
            c_enh,
            deep_src,
            deep_out,
            broad_out,
            enh_out,
            deep_enh,
            broad_enh,
            concat,
            out,
            spatial_in: spatial,
            spatial_out,
        });
        c_in = out;
        spatial = spatial_out;
    }
    Ok(ChannelPlan {
        n_in,
        k: config.k,
        stem_out: config.c,
        stem_spatial,
        stages,
        gap_width,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(n_in: usize, c: usize, u: usize) -> StackedBcnnConfig {
        StackedBcnnConfig {
            u,
            k: 1,
            c,
            n_in,
            num_classes: 10,
            input_size: 64,
            input_channels: 3,
            stem_stride: 1,
            ..StackedBcnnConfig::default()
        }
    }

    #[test]
    fn first_stage_widths_for_c16() {
        let p = channel_plan(&cfg(4, 16, 2)).unwrap();
        let s = &p.stages[0];
        assert_eq!((s.c_deep, s.c_broad, s.c_enh), (64, 128, 128));
        assert_eq!((s.deep_out.out_ch, s.broad_out.out_ch, s.enh_out.out_ch), (16, 32, 128));
        assert_eq!(p.stages[1].c_deep, 128);
    }

    #[test]
    fn unit_factors() {
        let p = channel_plan(&cfg(1, 1, 1)).unwrap();
        assert_eq!(p.stages[0].c_deep, 1);
    }

    #[test]
    fn stage_input_width_doubles() {
        let p = channel_plan(&cfg(4, 8, 3)).unwrap();
        let ins: Vec<usize> = p.stages.iter().map(|s| s.c_in).collect();
        assert_eq!(ins, vec![8, 16, 32]);
        assert_eq!(p.stages[2].out, p.stages[2].concat);
        assert_eq!(p.gap_width, 16 + 32 + p.stages[2].concat);
    }

    #[test]
    fn spatial_underflow_names_the_stage() {
        let mut c = cfg(4, 8, 3);
        c.input_size = 4;
        match channel_plan(&c) {
            Err(Error::SpatialUnderflow { stage, size }) => assert_eq!((stage, size), (3, 1)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn zero_deep_cells_embed_the_stage_input() {
        let mut c = cfg(4, 8, 2);
        c.k = 0;
        let p = channel_plan(&c).unwrap();
        assert_eq!(p.stages[0].deep_src, 8);
        assert_eq!(p.stages[0].deep_out.out_ch, 2);
    }
}
