//! The stacked network as an ordered block graph.
//!
//! Every block names its inputs by index into the block list, so the list is
//! simultaneously the forward program and the information-flow graph. The
//! same graph is instantiated with discrete cells for retraining and with
//! mixed cells for the supernet.

use std::collections::BTreeSet;

use rand::SeedableRng;

use crate::autodiff::{ConvGeom, Group, ParamStore, Shape, Tape, Tensor, Var};
use crate::data::Dataset;
use crate::error::{Error, Result};

use super::cell::{Cell, CellModule, CellRole, CellSpec};
use super::genotype::Genotype;
use super::layers::{BatchNorm, Conv, Ctx, InitRng, Linear, ReluConvBn};
use super::plan::{channel_plan_for, ChannelPlan, Site, SitePlan, StackedBcnnConfig};

/// Knowledge embedding as seen by the network graph.
pub trait EmbeddingModule {
    fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var>;
}

impl EmbeddingModule for ReluConvBn {
    fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        ReluConvBn::forward(self, cx, x)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SiteSpec {
    pub name: String,
    pub stage: usize,
    pub site: Site,
    pub plan: SitePlan,
}

/// Supplies the cells and embeddings for a network skeleton.
pub trait PartsFactory {
    type Cell: CellModule;
    type Embed: EmbeddingModule;

    fn cell(&mut self, spec: &CellSpec, store: &mut ParamStore, rng: &mut InitRng) -> Result<Self::Cell>;
    fn embedding(&mut self, spec: &SiteSpec, store: &mut ParamStore, rng: &mut InitRng) -> Result<Self::Embed>;
}

#[derive(Clone, Debug)]
pub enum BlockKind<C, E> {
    Input,
    Stem { conv: Conv, bn: BatchNorm },
    Cell { role: CellRole, module: C },
    Embed { site: Site, module: E },
    Concat,
    Compress(ReluConvBn),
    Gap,
    Classifier(Linear),
}

#[derive(Clone, Debug)]
pub struct Block<C, E> {
    pub label: String,
    pub stage: usize,
    pub inputs: Vec<usize>,
    pub kind: BlockKind<C, E>,
}

#[derive(Clone, Debug)]
pub struct StackedBcnn<C, E> {
    pub config: StackedBcnnConfig,
    pub plan: ChannelPlan,
    pub blocks: Vec<Block<C, E>>,
    pub store: ParamStore,
}

struct Builder<'a, C, E, F> {
    blocks: Vec<Block<C, E>>,
    store: ParamStore,
    rng: InitRng,
    factory: &'a mut F,
}

impl<C, E, F> Builder<'_, C, E, F>
where
    F: PartsFactory<Cell = C, Embed = E>,
{
    fn push(&mut self, label: String, stage: usize, inputs: Vec<usize>, kind: BlockKind<C, E>) -> usize {
        self.blocks.push(Block {
            label,
            stage,
            inputs,
            kind,
        });
        self.blocks.len() - 1
    }

    fn cell(&mut self, spec: CellSpec, inputs: [usize; 2]) -> Result<usize> {
        let module = self.factory.cell(&spec, &mut self.store, &mut self.rng)?;
        Ok(self.push(
            spec.name.clone(),
            spec.stage,
            inputs.to_vec(),
            BlockKind::Cell { role: spec.role, module },
        ))
    }

    fn embed(&mut self, stage: usize, site: Site, plan: SitePlan, input: usize) -> Result<usize> {
        let spec = SiteSpec {
            name: format!("s{stage}.{}", site.name()),
            stage,
            site,
            plan,
        };
        let module = self.factory.embedding(&spec, &mut self.store, &mut self.rng)?;
        Ok(self.push(spec.name, stage, vec![input], BlockKind::Embed { site, module }))
    }
}

impl<C: CellModule, E: EmbeddingModule> StackedBcnn<C, E> {
    /// Lays out stem → `u` mini BCNNs → per-stage GAP → fusion → classifier.
    pub fn build<F>(config: &StackedBcnnConfig, plan: ChannelPlan, factory: &mut F, seed: u64) -> Result<Self>
    where
        F: PartsFactory<Cell = C, Embed = E>,
    {
        let n_in = config.n_in;
        let mut b = Builder {
            blocks: Vec::new(),
            store: ParamStore::new(),
            rng: InitRng::seed_from_u64(seed),
            factory,
        };
        let image = b.push("image".into(), 0, vec![], BlockKind::Input);
        let conv = Conv::new(
            &mut b.store,
            &mut b.rng,
            "stem.conv",
            config.input_channels,
            config.c,
            3,
            ConvGeom::new(config.stem_stride, 1),
        );
        let bn = BatchNorm::new(&mut b.store, "stem.bn", config.c);
        let mut stage_in = b.push("stem".into(), 0, vec![image], BlockKind::Stem { conv, bn });
        let mut gaps = Vec::with_capacity(plan.stages.len());

        for sp in &plan.stages {
            let i = sp.index;
            // (block, width) of y_{-1}, y_0, y_1, ...
            let mut ys = vec![(stage_in, sp.c_in), (stage_in, sp.c_in)];
            for j in 1..=config.k {
                let (pp, p) = (ys[ys.len() - 2], ys[ys.len() - 1]);
                let spec = CellSpec {
                    name: format!("s{i}.deep{j}"),
                    stage: i,
                    role: CellRole::Deep,
                    c_prev_prev: pp.1,
                    c_prev: p.1,
                    c_node: sp.c_node_deep(n_in),
                    n_in,
                    stride: 1,
                };
                ys.push((b.cell(spec, [pp.0, p.0])?, sp.c_deep));
            }
            let (pp, yk) = (ys[ys.len() - 2], ys[ys.len() - 1]);
            debug_assert_eq!(yk.1, sp.deep_src);
            let broad = b.cell(
                CellSpec {
                    name: format!("s{i}.broad"),
                    stage: i,
                    role: CellRole::Broad,
                    c_prev_prev: pp.1,
                    c_prev: yk.1,
                    c_node: sp.c_node_wide(n_in),
                    n_in,
                    stride: 2,
                },
                [pp.0, yk.0],
            )?;
            let broad_enh = b.embed(i, Site::BroadEnh, sp.broad_enh, broad)?;
            let (deep_enh, c_deep_enh) = if config.d2e {
                (b.embed(i, Site::DeepEnh, sp.deep_enh, yk.0)?, sp.deep_enh.out_ch)
            } else {
                (broad_enh, sp.broad_enh.out_ch)
            };
            let enh = b.cell(
                CellSpec {
                    name: format!("s{i}.enh"),
                    stage: i,
                    role: CellRole::Enhancement,
                    c_prev_prev: c_deep_enh,
                    c_prev: sp.broad_enh.out_ch,
                    c_node: sp.c_node_wide(n_in),
                    n_in,
                    stride: 1,
                },
                [deep_enh, broad_enh],
            )?;
            let mut parts = vec![b.embed(i, Site::DeepOut, sp.deep_out, yk.0)?];
            if config.b2o {
                parts.push(b.embed(i, Site::BroadOut, sp.broad_out, broad)?);
            }
            parts.push(b.embed(i, Site::EnhOut, sp.enh_out, enh)?);
            let mut out = b.push(format!("s{i}.out"), i, parts, BlockKind::Concat);
            if sp.is_compressed() {
                let m = ReluConvBn::pointwise(&mut b.store, &mut b.rng, &format!("s{i}.compress"), sp.concat, sp.out, 1);
                out = b.push(format!("s{i}.compress"), i, vec![out], BlockKind::Compress(m));
            }
            gaps.push(b.push(format!("s{i}.gap"), i, vec![out], BlockKind::Gap));
            stage_in = out;
        }
        let fusion = b.push("fusion".into(), 0, gaps, BlockKind::Concat);
        let head = Linear::new(&mut b.store, &mut b.rng, "classifier", plan.gap_width, config.num_classes);
        b.push("classifier".into(), 0, vec![fusion], BlockKind::Classifier(head));

        Ok(StackedBcnn {
            config: config.clone(),
            plan,
            blocks: b.blocks,
            store: b.store,
        })
    }

    /// Logits `(batch, num_classes, 1, 1)` for `x`.
    pub fn forward(&mut self, tape: &mut Tape, x: Var, train: bool) -> Result<Var> {
        let vals = self.forward_all(tape, x, train)?;
        Ok(*vals.last().expect("classifier block"))
    }

    /// Output of every block, indexed like `blocks`.
    pub fn forward_all(&mut self, tape: &mut Tape, x: Var, train: bool) -> Result<Vec<Var>> {
        let s = tape.shape(x);
        let cfg = &self.config;
        if (s.c, s.h, s.w) != (cfg.input_channels, cfg.input_size, cfg.input_size) {
            return Err(Error::shape(
                "network",
                format!(
                    "expected input (_, {}, {}, {}), got {s:?}",
                    cfg.input_channels, cfg.input_size, cfg.input_size
                ),
            ));
        }
        let mut cx = Ctx::new(tape, &mut self.store, train);
        let mut vals: Vec<Var> = Vec::with_capacity(self.blocks.len());
        for (idx, block) in self.blocks.iter().enumerate() {
            let ins: Vec<Var> = block
                .inputs
                .iter()
                .map(|&j| {
                    if j < idx {
                        Ok(vals[j])
                    } else {
                        Err(Error::shape("network", format!("block {} reads a later block", block.label)))
                    }
                })
                .collect::<Result<_>>()?;
            let v = match &block.kind {
                BlockKind::Input => x,
                BlockKind::Stem { conv, bn } => {
                    let y = conv.forward(&mut cx, ins[0])?;
                    bn.forward(&mut cx, y)?
                }
                BlockKind::Cell { module, .. } => module.forward(&mut cx, ins[0], ins[1])?,
                BlockKind::Embed { module, .. } => module.forward(&mut cx, ins[0])?,
                BlockKind::Concat => cx.tape.concat_channels(&ins)?,
                BlockKind::Compress(m) => m.forward(&mut cx, ins[0])?,
                BlockKind::Gap => cx.tape.global_avg_pool(ins[0])?,
                BlockKind::Classifier(l) => l.forward(&mut cx, ins[0])?,
            };
            vals.push(v);
        }
        Ok(vals)
    }

    /// Forward on a constant input tensor.
    pub fn forward_tensor(&mut self, tape: &mut Tape, x: Tensor, train: bool) -> Result<Var> {
        let x = tape.constant(x);
        self.forward(tape, x, train)
    }

    /// Distinct `(source, target)` label pairs of the information flow.
    pub fn wiring(&self) -> BTreeSet<(String, String)> {
        self.blocks
            .iter()
            .flat_map(|b| b.inputs.iter().map(|&j| (self.blocks[j].label.clone(), b.label.clone())))
            .collect()
    }

    /// Kahn topological order over the block graph.
    pub fn topological_order(&self) -> Result<Vec<usize>> {
        let n = self.blocks.len();
        let mut indegree = vec![0usize; n];
        let mut consumers = vec![Vec::new(); n];
        for (t, b) in self.blocks.iter().enumerate() {
            for &s in &b.inputs {
                if s >= n {
                    return Err(Error::shape("network", format!("block {} reads missing block {s}", b.label)));
                }
                indegree[t] += 1;
                consumers[s].push(t);
            }
        }
        let mut ready: Vec<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(i) = ready.pop() {
            order.push(i);
            for &t in &consumers[i] {
                indegree[t] -= 1;
                if indegree[t] == 0 {
                    ready.push(t);
                }
            }
        }
        if order.len() != n {
            return Err(Error::shape("network", "block graph has a cycle"));
        }
        Ok(order)
    }

    pub fn block(&self, label: &str) -> Option<&Block<C, E>> {
        self.blocks.iter().find(|b| b.label == label)
    }

    pub fn cells(&self) -> impl Iterator<Item = (&Block<C, E>, CellRole, &C)> {
        self.blocks.iter().filter_map(|b| match &b.kind {
            BlockKind::Cell { role, module } => Some((b, *role, module)),
            _ => None,
        })
    }

    pub fn cells_mut(&mut self) -> impl Iterator<Item = (CellRole, &mut C)> {
        self.blocks.iter_mut().filter_map(|b| match &mut b.kind {
            BlockKind::Cell { role, module } => Some((*role, module)),
            _ => None,
        })
    }

    /// `(stage, site, module)` for every knowledge embedding.
    pub fn embeddings(&self) -> impl Iterator<Item = (usize, Site, &E)> {
        self.blocks.iter().filter_map(|b| match &b.kind {
            BlockKind::Embed { site, module } => Some((b.stage, *site, module)),
            _ => None,
        })
    }

    /// Trainable network weights (convolutions, batch-norm affines, classifier).
    pub fn weight_count(&self) -> usize {
        self.store.count(Group::Weight)
    }

    /// Top-1 accuracy of eval-mode predictions on `data`.
    pub fn accuracy(&mut self, data: &Dataset, batch_size: usize) -> Result<f64> {
        let idx: Vec<usize> = (0..data.len()).collect();
        let mut correct = 0usize;
        for chunk in idx.chunks(batch_size.max(1)) {
            let batch = data.batch(chunk);
            let mut tape = Tape::new();
            let logits = self.forward_tensor(&mut tape, batch.images, false)?;
            let t = tape.value(logits);
            let classes = t.shape().c;
            for (row, &label) in t.data().chunks(classes).zip(&batch.labels) {
                let pred = (0..classes).fold(0, |b, c| if row[c] > row[b] { c } else { b });
                correct += (pred == label) as usize;
            }
        }
        Ok(correct as f64 / data.len().max(1) as f64)
    }

    /// Multiply-accumulates of one batch-1 inference pass at the configured
    /// input size.
    pub fn macs(&mut self) -> Result<u64> {
        let c = &self.config;
        let x = Tensor::zeros(Shape::new(1, c.input_channels, c.input_size, c.input_size));
        let mut tape = Tape::new();
        self.forward_tensor(&mut tape, x, false)?;
        Ok(tape.macs())
    }
}

/// `(parameter count, multiply-accumulate count)` of a network.
pub fn count_params_flops<C: CellModule, E: EmbeddingModule>(net: &mut StackedBcnn<C, E>) -> Result<(usize, u64)> {
    Ok((net.weight_count(), net.macs()?))
}

/// Discrete cells and fixed 1×1 embeddings from a genotype.
pub struct DiscreteParts<'g> {
    pub genotype: &'g Genotype,
}

impl PartsFactory for DiscreteParts<'_> {
    type Cell = Cell;
    type Embed = ReluConvBn;

    fn cell(&mut self, spec: &CellSpec, store: &mut ParamStore, rng: &mut InitRng) -> Result<Cell> {
        let topology = if spec.role.is_convolution() {
            &self.genotype.conv_cell
        } else {
            &self.genotype.enh_cell
        };
        Cell::build(topology, spec, store, rng)
    }

    fn embedding(&mut self, spec: &SiteSpec, store: &mut ParamStore, rng: &mut InitRng) -> Result<ReluConvBn> {
        let p = spec.plan;
        Ok(ReluConvBn::pointwise(store, rng, &spec.name, p.in_ch, p.out_ch, p.stride))
    }
}

pub type DiscreteNet = StackedBcnn<Cell, ReluConvBn>;

/// Builds the retrainable network for `genotype`. Searched embedding widths
/// must come from the candidate set of their site.
pub fn build_stacked_bcnn(config: &StackedBcnnConfig, genotype: &Genotype, seed: u64) -> Result<DiscreteNet> {
    if genotype.n_in() != config.n_in {
        return Err(Error::Genotype(format!(
            "genotype has N_in = {}, config has n_in = {}",
            genotype.n_in(),
            config.n_in
        )));
    }
    let plan = channel_plan_for(config, genotype.embedding_channels.as_deref())?;
    if genotype.embedding_channels.is_some() {
        for sp in &plan.stages {
            for site in Site::INDIRECT.into_iter().filter(|&s| config.uses(s)) {
                let s = sp.site(site);
                let allowed = crate::kes::candidate_channels(s.in_ch)?;
                if !allowed.contains(&s.out_ch) {
                    return Err(Error::Genotype(format!(
                        "stage {} {} width {} is not a candidate for {} input channels ({allowed:?})",
                        sp.index,
                        site.name(),
                        s.out_ch,
                        s.in_ch
                    )));
                }
            }
        }
    }
    StackedBcnn::build(config, plan, &mut DiscreteParts { genotype }, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::ops::OpKind;

    fn tiny(u: usize, k: usize) -> StackedBcnnConfig {
        StackedBcnnConfig {
            u,
            k,
            c: 4,
            n_in: 2,
            num_classes: 4,
            input_size: 8,
            input_channels: 3,
            stem_stride: 1,
            ..StackedBcnnConfig::default()
        }
    }

    #[test]
    fn logits_have_class_width() {
        let g = Genotype::uniform(2, OpKind::Conv3x3);
        let mut net = build_stacked_bcnn(&tiny(1, 1), &g, 0).unwrap();
        let mut tape = Tape::new();
        let mut rng = InitRng::seed_from_u64(1);
        let y = net.forward_tensor(&mut tape, Tensor::randn(Shape::new(2, 3, 8, 8), 1.0, &mut rng), true).unwrap();
        assert_eq!(tape.shape(y), Shape::new(2, 4, 1, 1));
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let g = Genotype::uniform(2, OpKind::SkipConnect);
        let mut net = build_stacked_bcnn(&tiny(1, 1), &g, 0).unwrap();
        let mut tape = Tape::new();
        assert!(net.forward_tensor(&mut tape, Tensor::zeros(Shape::new(2, 3, 6, 6)), true).is_err());
    }

    #[test]
    fn topological_order_covers_every_block() {
        let g = Genotype::uniform(2, OpKind::MaxPool3x3);
        let net = build_stacked_bcnn(&tiny(2, 2), &g, 0).unwrap();
        assert_eq!(net.topological_order().unwrap().len(), net.blocks.len());
    }
}
