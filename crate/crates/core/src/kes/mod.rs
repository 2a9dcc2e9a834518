//! Knowledge Embedding Search: over-parameterized 1×1 embeddings whose
//! candidate widths are mixed by softmax-normalized weights γ.

use crate::autodiff::{Group, ParamId, ParamStore, Shape, Tensor, Var};
use crate::error::{Error, Result};
use crate::space::{Ctx, EmbeddingModule, InitRng, ReluConvBn, SitePlan};

/// Candidate output widths for an embedding reading `c_e` channels:
/// `2, 4, …, 2^n, c_e` with `2^n < c_e`, or `c_e, c_e` when `c_e` is a
/// power of two.
pub fn candidate_channels(c_e: usize) -> Result<Vec<usize>> {
    if c_e < 2 {
        return Err(Error::Config(format!("embedding input width {c_e} has no candidates (need at least 2)")));
    }
    if c_e.is_power_of_two() {
        return Ok(vec![c_e, c_e]);
    }
    let mut out: Vec<usize> = std::iter::successors(Some(2usize), |p| Some(p * 2)).take_while(|&p| p < c_e).collect();
    out.push(c_e);
    Ok(out)
}

/// Width an over-parameterized site emits during search.
pub fn overparam_width(c_e: usize) -> Result<usize> {
    Ok(candidate_channels(c_e)?.iter().sum())
}

#[derive(Clone, Debug)]
pub struct OverparamEmbedding {
    pub c_e: usize,
    pub widths: Vec<usize>,
    pub candidates: Vec<ReluConvBn>,
    pub gamma: ParamId,
}

impl OverparamEmbedding {
    pub fn new(store: &mut ParamStore, rng: &mut InitRng, name: &str, c_e: usize, stride: usize) -> Result<Self> {
        let widths = candidate_channels(c_e)?;
        let candidates = widths
            .iter()
            .enumerate()
            .map(|(l, &w)| ReluConvBn::pointwise(store, rng, &format!("{name}.cand{l}"), c_e, w, stride))
            .collect();
        let gamma = store.add(format!("{name}.gamma"), Group::Embedding, Tensor::zeros(Shape::vector(widths.len())));
        Ok(OverparamEmbedding {
            c_e,
            widths,
            candidates,
            gamma,
        })
    }

    pub fn from_plan(store: &mut ParamStore, rng: &mut InitRng, name: &str, plan: &SitePlan) -> Result<Self> {
        let m = Self::new(store, rng, name, plan.in_ch, plan.stride)?;
        if m.out_width() != plan.out_ch {
            return Err(Error::Config(format!(
                "{name}: plan expects {} channels, candidates sum to {}",
                plan.out_ch,
                m.out_width()
            )));
        }
        Ok(m)
    }

    pub fn out_width(&self) -> usize {
        self.widths.iter().sum()
    }

    /// `softmax(γ)` as currently stored.
    pub fn weights(&self, store: &ParamStore) -> Vec<f32> {
        crate::autodiff::softmax(store.value(self.gamma).data())
    }

    /// Width of the candidate with the largest γ; ties go to the narrower one.
    pub fn discretize(&self, store: &ParamStore) -> usize {
        discretize_embedding(&self.widths, store.value(self.gamma).data())
    }
}

/// Argmax over `gamma`, ties broken towards the smaller width.
pub fn discretize_embedding(widths: &[usize], gamma: &[f32]) -> usize {
    let mut best = 0;
    for l in 1..widths.len() {
        if gamma[l] > gamma[best] || (gamma[l] == gamma[best] && widths[l] < widths[best]) {
            best = l;
        }
    }
    widths[best]
}

impl EmbeddingModule for OverparamEmbedding {
    fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let c = cx.tape.shape(x).c;
        if c != self.c_e {
            return Err(Error::shape("embedding", format!("expected {} input channels, got {c}", self.c_e)));
        }
        let g = cx.param(self.gamma);
        let w = cx.tape.softmax(g);
        let mut parts = Vec::with_capacity(self.candidates.len());
        for (l, cand) in self.candidates.iter().enumerate() {
            let y = cand.forward(cx, x)?;
            parts.push(cx.tape.scale_by(y, w, l)?);
        }
        cx.tape.concat_channels(&parts)
    }
}

/// Embedding at a site of the supernet: searched, or fixed when KES is off
/// or the site is the direct one.
#[derive(Clone, Debug)]
pub enum SiteEmbedding {
    Fixed(ReluConvBn),
    Searched(OverparamEmbedding),
}

impl SiteEmbedding {
    pub fn searched(&self) -> Option<&OverparamEmbedding> {
        match self {
            SiteEmbedding::Searched(m) => Some(m),
            SiteEmbedding::Fixed(_) => None,
        }
    }
}

impl EmbeddingModule for SiteEmbedding {
    fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        match self {
            SiteEmbedding::Fixed(m) => m.forward(cx, x),
            SiteEmbedding::Searched(m) => m.forward(cx, x),
        }
    }
}
