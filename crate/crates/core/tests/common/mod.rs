//! Test-only oracles shared by the integration suites. Nothing here calls
//! back into the code path it checks beyond the forward pass.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stacked_bnas::autodiff::{Shape, Tape, Tensor, Var};

pub const FD_STEP: f32 = 1e-3;
pub const FD_TOL: f64 = 1e-3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform entries in `[-1, 1]` whose magnitude stays at least `gap` away
/// from zero, so ReLU kinks are never crossed by the finite-difference step.
pub fn random_tensor(shape: Shape, gap: f32, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..shape.numel())
        .map(|_| {
            let mag = gap + (1.0 - gap) * rng.random::<f32>();
            if rng.random::<bool>() {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Entries drawn without replacement from a grid with spacing 0.05, so
/// max-pool windows never hold near-ties.
pub fn distinct_tensor(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.numel();
    let mut grid: Vec<f32> = (0..n).map(|i| i as f32 * 0.05 - n as f32 * 0.025).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        grid.swap(i, j);
    }
    Tensor::from_vec(shape, grid).unwrap()
}

/// Result of one gradient comparison.
#[derive(Debug)]
pub struct GradCheck {
    pub worst_rel_err: f64,
}

/// Compares reverse-mode gradients of `Σ r ⊙ f(inputs)` against central
/// differences for every input. `r` is a fixed random projection; the
/// numeric side evaluates the projection in f64.
pub fn check_gradients<F>(inputs: &[Tensor], seed: u64, f: F) -> GradCheck
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let forward = |values: &[Tensor]| -> Tensor {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars);
        tape.value(out).clone()
    };
    let probe = forward(inputs);
    let mut r = rng(seed ^ 0x5eed);
    let proj: Vec<f32> = (0..probe.len()).map(|_| r.random_range(-1.0..1.0)).collect();
    let proj_t = Tensor::from_vec(probe.shape(), proj.clone()).unwrap();

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars);
    let p = tape.constant(proj_t);
    let prod = tape.mul(out, p).unwrap();
    let loss = tape.sum(prod);
    let grads = tape.backward(loss).unwrap();

    let objective = |values: &[Tensor]| -> f64 {
        forward(values)
            .data()
            .iter()
            .zip(&proj)
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum()
    };

    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[i])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape()));
        let mut numeric = vec![0.0f64; input.len()];
        for (k, slot) in numeric.iter_mut().enumerate() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[k] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[k] -= FD_STEP;
            let h = (plus[i].data()[k] - minus[i].data()[k]) as f64;
            *slot = (objective(&plus) - objective(&minus)) / h;
        }
        let diff: f64 = analytic
            .data()
            .iter()
            .zip(&numeric)
            .map(|(&a, n)| (a as f64 - n).powi(2))
            .sum::<f64>()
            .sqrt();
        let na = analytic.data().iter().map(|&a| (a as f64).powi(2)).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|n| n.powi(2)).sum::<f64>().sqrt();
        let rel = diff / na.max(nn).max(1e-6);
        worst = worst.max(rel);
    }
    GradCheck { worst_rel_err: worst }
}

pub type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Var>;

/// One autodiff primitive under test: a generator of random inputs (at
/// most 64 elements each) and the graph applying the primitive.
pub struct PrimitiveCase {
    pub name: &'static str,
    pub inputs: fn(&mut ChaCha8Rng) -> Vec<Tensor>,
    pub build: fn() -> Build,
}

use stacked_bnas::autodiff::{ConvGeom, PoolKind};

pub fn primitive_cases() -> Vec<PrimitiveCase> {
    vec![
        PrimitiveCase {
            name: "conv2d 3x3 pad1",
            inputs: |r| vec![random_tensor(Shape::new(2, 2, 4, 4), 0.0, r), random_tensor(Shape::new(2, 2, 3, 3), 0.0, r)],
            build: || Box::new(|t, v| t.conv2d(v[0], v[1], ConvGeom::new(1, 1)).unwrap()),
        },
        PrimitiveCase {
            name: "conv2d 3x3 stride2",
            inputs: |r| vec![random_tensor(Shape::new(1, 3, 5, 4), 0.0, r), random_tensor(Shape::new(2, 3, 3, 3), 0.0, r)],
            build: || Box::new(|t, v| t.conv2d(v[0], v[1], ConvGeom::new(2, 1)).unwrap()),
        },
        PrimitiveCase {
            name: "conv2d dilated",
            inputs: |r| vec![random_tensor(Shape::new(1, 2, 5, 5), 0.0, r), random_tensor(Shape::new(2, 2, 3, 3), 0.0, r)],
            build: || Box::new(|t, v| t.conv2d(v[0], v[1], ConvGeom::new(1, 2).dilated(2)).unwrap()),
        },
        PrimitiveCase {
            name: "conv2d grouped 1x1",
            inputs: |r| vec![random_tensor(Shape::new(2, 4, 3, 3), 0.0, r), random_tensor(Shape::new(4, 2, 1, 1), 0.0, r)],
            build: || Box::new(|t, v| t.conv2d(v[0], v[1], ConvGeom::new(1, 0).grouped(2)).unwrap()),
        },
        PrimitiveCase {
            name: "max_pool 3x3",
            inputs: |r| vec![distinct_tensor(Shape::new(1, 2, 4, 4), r)],
            build: || Box::new(|t, v| t.pool2d(v[0], PoolKind::Max, 3, 1, 1).unwrap()),
        },
        PrimitiveCase {
            name: "avg_pool 3x3 stride2",
            inputs: |r| vec![random_tensor(Shape::new(2, 2, 4, 4), 0.0, r)],
            build: || Box::new(|t, v| t.pool2d(v[0], PoolKind::Avg, 3, 2, 1).unwrap()),
        },
        PrimitiveCase {
            name: "batch_norm train",
            inputs: |r| {
                vec![
                    random_tensor(Shape::new(3, 2, 2, 3), 0.0, r),
                    random_tensor(Shape::vector(2), 0.3, r),
                    random_tensor(Shape::vector(2), 0.0, r),
                ]
            },
            build: || {
                Box::new(|t, v| {
                    let (y, _, _) = t.batch_norm_train(v[0], v[1], v[2]).unwrap();
                    y
                })
            },
        },
        PrimitiveCase {
            name: "batch_norm eval",
            inputs: |r| {
                vec![
                    random_tensor(Shape::new(2, 2, 2, 2), 0.0, r),
                    random_tensor(Shape::vector(2), 0.3, r),
                    random_tensor(Shape::vector(2), 0.0, r),
                ]
            },
            build: || Box::new(|t, v| t.batch_norm_eval(v[0], v[1], v[2], &[0.1, -0.2], &[0.5, 2.0]).unwrap()),
        },
        PrimitiveCase {
            name: "relu",
            inputs: |r| vec![random_tensor(Shape::new(2, 3, 2, 2), 0.01, r)],
            build: || Box::new(|t, v| t.relu(v[0])),
        },
        PrimitiveCase {
            name: "linear",
            inputs: |r| {
                vec![
                    random_tensor(Shape::new(3, 4, 1, 1), 0.0, r),
                    random_tensor(Shape::new(5, 4, 1, 1), 0.0, r),
                    random_tensor(Shape::vector(5), 0.0, r),
                ]
            },
            build: || Box::new(|t, v| t.linear(v[0], v[1], Some(v[2])).unwrap()),
        },
        PrimitiveCase {
            name: "concat_channels",
            inputs: |r| vec![random_tensor(Shape::new(2, 1, 2, 2), 0.0, r), random_tensor(Shape::new(2, 3, 2, 2), 0.0, r)],
            build: || Box::new(|t, v| t.concat_channels(&[v[0], v[1]]).unwrap()),
        },
        PrimitiveCase {
            name: "slice_channels",
            inputs: |r| vec![random_tensor(Shape::new(2, 4, 2, 2), 0.0, r)],
            build: || Box::new(|t, v| t.slice_channels(v[0], 1, 2).unwrap()),
        },
        PrimitiveCase {
            name: "global_avg_pool",
            inputs: |r| vec![random_tensor(Shape::new(2, 3, 3, 3), 0.0, r)],
            build: || Box::new(|t, v| t.global_avg_pool(v[0]).unwrap()),
        },
        PrimitiveCase {
            name: "add_n",
            inputs: |r| (0..3).map(|_| random_tensor(Shape::new(1, 2, 3, 3), 0.0, r)).collect(),
            build: || Box::new(|t, v| t.add_n(v).unwrap()),
        },
        PrimitiveCase {
            name: "mul",
            inputs: |r| vec![random_tensor(Shape::new(1, 2, 3, 3), 0.0, r), random_tensor(Shape::new(1, 2, 3, 3), 0.0, r)],
            build: || Box::new(|t, v| t.mul(v[0], v[1]).unwrap()),
        },
        PrimitiveCase {
            name: "scale_by",
            inputs: |r| vec![random_tensor(Shape::new(1, 2, 3, 3), 0.0, r), random_tensor(Shape::vector(4), 0.0, r)],
            build: || Box::new(|t, v| t.scale_by(v[0], v[1], 2).unwrap()),
        },
        PrimitiveCase {
            name: "scale",
            inputs: |r| vec![random_tensor(Shape::new(1, 2, 3, 3), 0.0, r)],
            build: || Box::new(|t, v| t.scale(v[0], -1.5)),
        },
        PrimitiveCase {
            name: "softmax",
            inputs: |r| vec![random_tensor(Shape::vector(7), 0.0, r)],
            build: || Box::new(|t, v| t.softmax(v[0])),
        },
        PrimitiveCase {
            name: "sum",
            inputs: |r| vec![random_tensor(Shape::new(2, 2, 2, 2), 0.0, r)],
            build: || Box::new(|t, v| t.sum(v[0])),
        },
        PrimitiveCase {
            name: "softmax_cross_entropy",
            inputs: |r| vec![random_tensor(Shape::new(4, 5, 1, 1), 0.0, r)],
            build: || Box::new(|t, v| t.softmax_cross_entropy(v[0], &[0, 3, 4, 1]).unwrap()),
        },
    ]
}

use stacked_bnas::space::{CellTopology, Genotype, OpKind, StackedBcnnConfig};

fn relu_conv_bn(in_ch: usize, out_ch: usize, kernel: usize) -> usize {
    in_ch * out_ch * kernel * kernel + 2 * out_ch
}

fn op_params(op: OpKind, c: usize, stride: usize) -> usize {
    match op {
        OpKind::Zero | OpKind::MaxPool3x3 | OpKind::AvgPool3x3 => 0,
        OpKind::SkipConnect if stride == 1 => 0,
        OpKind::SkipConnect | OpKind::Conv1x1 => relu_conv_bn(c, c, 1),
        OpKind::Conv3x3 | OpKind::DilConv3x3 => relu_conv_bn(c, c, 3),
    }
}

fn cell_params(t: &CellTopology, c_pp: usize, c_p: usize, c_node: usize, stride: usize) -> usize {
    let pre = relu_conv_bn(c_pp, c_node, 1) + relu_conv_bn(c_p, c_node, 1);
    pre + t
        .edges()
        .map(|(_, e)| op_params(e.op, c_node, if e.source < 2 { stride } else { 1 }))
        .sum::<usize>()
}

/// Trainable parameter count of the discrete network written out layer by
/// layer from the channel-flow formulas, without the library's plan.
pub fn closed_form_params(cfg: &StackedBcnnConfig, g: &Genotype) -> usize {
    let n = cfg.n_in;
    let mut total = relu_conv_bn(cfg.input_channels, cfg.c, 3); // stem has no ReLU but the same shapes
    let mut c_in = cfg.c;
    let mut gap = 0;
    for i in 1..=cfg.u {
        let c_deep = n * (1 << (i - 1)) * cfg.c;
        let c_wide = 2 * c_deep;
        let emb = g.embedding_channels.as_ref().map(|e| e[i - 1]);
        let q = |x: usize| x.div_ceil(4);
        let mut ys = vec![c_in, c_in];
        for _ in 0..cfg.k {
            total += cell_params(&g.conv_cell, ys[ys.len() - 2], ys[ys.len() - 1], c_deep / n, 1);
            ys.push(c_deep);
        }
        let y_k = ys[ys.len() - 1];
        total += cell_params(&g.conv_cell, ys[ys.len() - 2], y_k, c_wide / n, 2);
        let deep_out = emb.map_or(q(y_k), |e| e.deep_out);
        let broad_out = emb.map_or(q(c_wide), |e| e.broad_out);
        let deep_enh = emb.map_or(q(y_k), |e| e.deep_enh);
        let broad_enh = emb.map_or(q(c_wide), |e| e.broad_enh);
        total += relu_conv_bn(y_k, deep_out, 1) + relu_conv_bn(c_wide, c_wide, 1) + relu_conv_bn(c_wide, broad_enh, 1);
        let mut concat = deep_out + c_wide;
        if cfg.b2o {
            total += relu_conv_bn(c_wide, broad_out, 1);
            concat += broad_out;
        }
        let enh_first = if cfg.d2e {
            total += relu_conv_bn(y_k, deep_enh, 1);
            deep_enh
        } else {
            broad_enh
        };
        total += cell_params(&g.enh_cell, enh_first, broad_enh, c_wide / n, 1);
        let out = if i < cfg.u {
            total += relu_conv_bn(concat, 2 * c_in, 1);
            2 * c_in
        } else {
            concat
        };
        gap += out;
        c_in = out;
    }
    total + gap * cfg.num_classes + cfg.num_classes
}

pub fn random_topology(n_in: usize, rng: &mut ChaCha8Rng) -> CellTopology {
    use stacked_bnas::space::Edge;
    let nodes = (0..n_in)
        .map(|t| {
            let target = t + 2;
            let a = rng.random_range(0..target);
            let mut b = rng.random_range(0..target - 1);
            if b >= a {
                b += 1;
            }
            let mut pick = || OpKind::ALL[rng.random_range(0..OpKind::ALL.len())];
            let (oa, ob) = (pick(), pick());
            let mut e = vec![Edge::new(a.min(b), oa), Edge::new(a.max(b), ob)];
            e.sort_by_key(|e| e.source);
            e
        })
        .collect();
    CellTopology::new(nodes).unwrap()
}

pub fn random_genotype(n_in: usize, rng: &mut ChaCha8Rng) -> Genotype {
    Genotype::new(random_topology(n_in, rng), random_topology(n_in, rng)).unwrap()
}

/// The synthetic four-class 8×8 search preset.
pub fn toy_space() -> StackedBcnnConfig {
    StackedBcnnConfig {
        u: 2,
        k: 1,
        c: 8,
        n_in: 4,
        num_classes: 4,
        input_size: 8,
        input_channels: 3,
        ..StackedBcnnConfig::default()
    }
}

use stacked_bnas::autodiff::ParamStore;
use stacked_bnas::space::{Ctx, Edge, InitRng};
use stacked_bnas::supernet::{edge_index, mixed_op_forward, num_edges, CellWeights, MixedEdge};

pub fn softmax64(xs: &[f32]) -> Vec<f64> {
    let m = xs.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x as f64));
    let e: Vec<f64> = xs.iter().map(|&x| (x as f64 - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

pub fn f32_softmax(a: &[f32]) -> Vec<f32> {
    softmax64(a).into_iter().map(|v| v as f32).collect()
}

/// Largest relative deviation between a K = 1 partial-channel mixed edge and
/// `Σ_o softmax(α)_o · o(x)` computed op by op in f64, for one random draw.
pub fn k1_mixture_deviation(draw: u64) -> f64 {
    let mut r = rng(draw);
    let stride = 1 + (draw % 2) as usize;
    let mut store = ParamStore::new();
    let mut init = InitRng::seed_from_u64(draw);
    let edge = MixedEdge::new(&OpKind::ALL, 4, 1, stride, &mut store, &mut init, "e").unwrap();
    let alpha: Vec<f32> = (0..OpKind::ALL.len()).map(|_| r.random_range(-2.0..2.0)).collect();
    let x = random_tensor(Shape::new(2, 4, 6, 6), 0.0, &mut r);

    let mut tape = Tape::new();
    let mut cx = Ctx::new(&mut tape, &mut store, false);
    let xv = cx.tape.constant(x.clone());
    let sm = f32_softmax(&alpha);
    let w = cx.tape.constant(Tensor::from_vec(Shape::vector(sm.len()), sm).unwrap());
    let mixed = mixed_op_forward(&mut cx, xv, w, &edge).unwrap();
    let got = cx.tape.value(mixed).data().to_vec();

    let sm = softmax64(&alpha);
    let mut want = vec![0.0f64; got.len()];
    for (op, &p) in edge.ops.iter().zip(&sm) {
        if op.is_zero() {
            continue;
        }
        let xo = cx.tape.constant(x.clone());
        let y = op.forward(&mut cx, xo).unwrap();
        for (acc, &v) in want.iter_mut().zip(cx.tape.value(y).data()) {
            *acc += p * v as f64;
        }
    }
    got.iter()
        .zip(&want)
        .map(|(g, w)| (*g as f64 - w).abs() / w.abs().max(1.0))
        .fold(0.0, f64::max)
}

pub fn random_cell_weights(n_in: usize, r: &mut impl Rng) -> CellWeights {
    CellWeights {
        alphas: (0..num_edges(n_in)).map(|_| (0..7).map(|_| r.random_range(-2.0..2.0)).collect()).collect(),
        betas: (0..n_in).map(|t| (0..t + 2).map(|_| r.random_range(-2.0..2.0)).collect()).collect(),
    }
}

/// Exhaustive search over every pair of distinct sources and every
/// non-zero op per source, maximizing the summed score. Ties go to the
/// lexicographically smallest (source pair, op pair).
pub fn exhaustive_discretize(w: &CellWeights) -> Vec<Vec<Edge>> {
    let n_in = w.betas.len();
    (0..n_in)
        .map(|t| {
            let target = t + 2;
            let beta = softmax64(&w.betas[t]);
            let score = |j: usize, o: usize| softmax64(&w.alphas[edge_index(target, j)])[o] * beta[j];
            let mut best: Option<(f64, [usize; 4])> = None;
            for j1 in 0..target {
                for j2 in j1 + 1..target {
                    for o1 in 1..7 {
                        for o2 in 1..7 {
                            let s = score(j1, o1) + score(j2, o2);
                            let key = [j1, j2, o1, o2];
                            if best.is_none_or(|(bs, bk)| s > bs || (s == bs && key < bk)) {
                                best = Some((s, key));
                            }
                        }
                    }
                }
            }
            let [j1, j2, o1, o2] = best.unwrap().1;
            vec![Edge::new(j1, OpKind::ALL[o1]), Edge::new(j2, OpKind::ALL[o2])]
        })
        .collect()
}

/// First 1-based epoch whose trailing `p` ranks are identical.
pub fn brute_force_stop<T: PartialEq>(seq: &[T], p: usize) -> Option<usize> {
    (p..=seq.len()).find(|&e| seq[e - p..e].iter().all(|r| *r == seq[e - 1]))
}
