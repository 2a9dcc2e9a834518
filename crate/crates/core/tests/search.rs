mod common;

use common::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stacked_bnas::autodiff::{Group, OptimizerState, ParamId, ParamStore, Shape, Tape, Tensor, Var};
use stacked_bnas::data::{split_train_val, synth_dataset, Dataset, SynthSpec};
use stacked_bnas::search::{
    arch_gradient, arch_step, early_stop_check, run_search, weight_step, BilevelModel, SearchConfig, SearchState,
};
use stacked_bnas::space::{CellTopology, Edge, OpKind, StackedBcnnConfig, StageEmbeddings};
use stacked_bnas::supernet::{ArchRank, Supernet, SupernetConfig};

/// Scalar bilevel problem: `L_train = ½(w − θ)²`, `L_val = ½(w − 1)² + ½θ²`.
struct Quadratic {
    store: ParamStore,
    w: ParamId,
    theta: ParamId,
}

enum Split {
    Train,
    Val,
}

impl Quadratic {
    fn new(w: f32, theta: f32) -> Self {
        let mut store = ParamStore::new();
        let w = store.add("w", Group::Weight, Tensor::from_vec(Shape::vector(1), vec![w]).unwrap());
        let theta = store.add("theta", Group::Arch, Tensor::from_vec(Shape::vector(1), vec![theta]).unwrap());
        Quadratic { store, w, theta }
    }

    fn get(&self, id: ParamId) -> f32 {
        self.store.value(id).data()[0]
    }
}

fn half_square(tape: &mut Tape, x: Var) -> Var {
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq);
    tape.scale(s, 0.5)
}

impl BilevelModel for Quadratic {
    type Batch = Split;

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn weight_ids(&self) -> Vec<ParamId> {
        vec![self.w]
    }

    fn arch_ids(&self) -> Vec<ParamId> {
        vec![self.theta]
    }

    fn loss(&mut self, tape: &mut Tape, batch: &Split) -> stacked_bnas::Result<Var> {
        let w = tape.param(&self.store, self.w);
        let th = tape.param(&self.store, self.theta);
        Ok(match batch {
            Split::Train => {
                let neg = tape.scale(th, -1.0);
                let d = tape.add(w, neg)?;
                half_square(tape, d)
            }
            Split::Val => {
                let one = tape.constant(Tensor::from_vec(Shape::vector(1), vec![-1.0]).unwrap());
                let d = tape.add(w, one)?;
                let a = half_square(tape, d);
                let b = half_square(tape, th);
                tape.add(a, b)?
            }
        })
    }
}

#[test]
fn virtual_step_matches_closed_form() {
    for (w, th, xi) in [(0.3f32, -0.7f32, 0.1f32), (2.0, 0.5, 0.05), (-1.0, 1.5, 0.5)] {
        let mut m = Quadratic::new(w, th);
        let (_, g) = arch_gradient(&mut m, &Split::Train, &Split::Val, xi).unwrap();
        // w' = w − ξ(w − θ);  dL_val/dθ = ξ(w' − 1) + θ
        let w1 = w - xi * (w - th);
        let want = xi * (w1 - 1.0) + th;
        assert!((g[0].data()[0] - want).abs() < 1e-3, "got {} want {want}", g[0].data()[0]);
        assert_eq!(m.get(m.w), w, "weights restored");
    }
}

#[test]
fn first_order_gradient_is_the_direct_one() {
    let mut m = Quadratic::new(0.3, -0.7);
    let (loss, g) = arch_gradient(&mut m, &Split::Train, &Split::Val, 0.0).unwrap();
    assert!((g[0].data()[0] + 0.7).abs() < 1e-7);
    assert!((loss - (0.5 * 0.49 + 0.5 * 0.49)).abs() < 1e-6);
    assert!(arch_gradient(&mut m, &Split::Train, &Split::Val, -1.0).is_err());
}

#[test]
fn quadratic_steps_touch_only_their_own_group() {
    let mut m = Quadratic::new(0.3, -0.7);
    let mut sgd = OptimizerState::sgd(0.1, 0.9, 0.0);
    let mut adam = OptimizerState::adam(0.1, 0.0);
    for _ in 0..5 {
        let th = m.get(m.theta).to_bits();
        weight_step(&mut m, &Split::Train, &mut sgd, None).unwrap();
        assert_eq!(m.get(m.theta).to_bits(), th);
        let w = m.get(m.w).to_bits();
        arch_step(&mut m, &Split::Train, &Split::Val, 0.1, &mut adam).unwrap();
        assert_eq!(m.get(m.w).to_bits(), w);
    }
    let mut frozen = OptimizerState::sgd(0.0, 0.0, 0.0);
    let w = m.get(m.w);
    weight_step(&mut m, &Split::Train, &mut frozen, None).unwrap();
    assert_eq!(m.get(m.w), w, "zero learning rate leaves w alone");
}

fn tiny_space() -> StackedBcnnConfig {
    StackedBcnnConfig {
        u: 1,
        k: 1,
        c: 4,
        n_in: 2,
        num_classes: 4,
        input_size: 4,
        input_channels: 3,
        ..StackedBcnnConfig::default()
    }
}

fn tiny_data() -> Dataset {
    synth_dataset(
        &SynthSpec {
            classes: 4,
            per_class: 8,
            size: 4,
            channels: 3,
            noise: 0.5,
        },
        0,
    )
    .unwrap()
}

fn snapshot(store: &ParamStore, ids: &[ParamId]) -> Vec<Vec<u32>> {
    ids.iter().map(|&id| store.value(id).data().iter().map(|v| v.to_bits()).collect()).collect()
}

#[test]
fn supernet_alternation_is_pure() {
    for kes in [false, true] {
        let data = tiny_data();
        let mut net = Supernet::new(&tiny_space(), SupernetConfig { kes, ..SupernetConfig::default() }, 1).unwrap();
        let batch = data.batch(&(0..16).collect::<Vec<_>>());
        let val = data.batch(&(16..32).collect::<Vec<_>>());
        let (w_ids, a_ids) = (net.weight_ids(), net.arch_ids());
        assert!(!a_ids.is_empty() && !w_ids.is_empty());
        let mut sgd = OptimizerState::sgd(0.05, 0.9, 3e-4);
        let mut adam = OptimizerState::adam(6e-4, 1e-3);
        for _ in 0..2 {
            let theta = snapshot(net.store(), &a_ids);
            weight_step(&mut net, &batch, &mut sgd, Some(5.0)).unwrap();
            assert_eq!(snapshot(net.store(), &a_ids), theta);
            let w = snapshot(net.store(), &w_ids);
            let buffers = net.store().buffers_snapshot();
            arch_step(&mut net, &batch, &val, 0.05, &mut adam).unwrap();
            assert_eq!(snapshot(net.store(), &w_ids), w);
            assert_eq!(net.store().buffers_snapshot(), buffers);
            assert_ne!(snapshot(net.store(), &a_ids), theta);
        }
    }
}

#[test]
fn training_loss_trends_down_over_twenty_steps() {
    let data = synth_dataset(&SynthSpec::separable(16), 0).unwrap();
    let mut net = Supernet::new(&toy_space(), SupernetConfig::default(), 0).unwrap();
    let mut sgd = OptimizerState::sgd(0.05, 0.9, 3e-4);
    let mut r = ChaCha8Rng::seed_from_u64(0);
    net.resample_masks(&mut r);
    let mut losses = Vec::new();
    while losses.len() < 20 {
        for idx in data.batches(32, &mut r) {
            losses.push(weight_step(&mut net, &data.batch(&idx), &mut sgd, Some(5.0)).unwrap());
        }
    }
    let first = losses[0];
    let best = losses[..20].iter().cloned().fold(f32::INFINITY, f32::min);
    let late: f32 = losses[15..20].iter().sum::<f32>() / 5.0;
    assert!(best < first && late < first, "losses {losses:?}");
}

#[test]
fn frozen_architecture_stops_at_patience() {
    for p in [1, 3] {
        let cfg = SearchConfig {
            max_epochs: 10,
            batch_size: 8,
            arch_lr: 0.0,
            arch_weight_decay: 0.0,
            patience: p,
            ..SearchConfig::default()
        };
        let out = run_search(&tiny_space(), &cfg, &tiny_data(), |_| {}).unwrap();
        assert!(out.early_stopped);
        assert_eq!(out.trajectory.len(), p);
        assert_eq!(out.trajectory.last().unwrap().q, p);
    }
}

#[test]
fn search_reports_no_early_stop_at_the_epoch_cap() {
    let cfg = SearchConfig {
        max_epochs: 2,
        batch_size: 8,
        arch_lr: 0.0,
        patience: 5,
        ..SearchConfig::default()
    };
    let out = run_search(&tiny_space(), &cfg, &tiny_data(), |_| {}).unwrap();
    assert!(!out.early_stopped);
    assert_eq!(out.trajectory.len(), 2);
    assert_eq!(out.genotype, out.ranks[1].genotype());
}

#[test]
fn search_with_no_deep_cells_emits_a_valid_genotype() {
    let space = StackedBcnnConfig { k: 0, ..tiny_space() };
    let cfg = SearchConfig {
        max_epochs: 2,
        batch_size: 8,
        first_order: true,
        ..SearchConfig::default()
    };
    let out = run_search(&space, &cfg, &tiny_data(), |_| {}).unwrap();
    out.genotype.conv_cell.validate().unwrap();
    out.genotype.enh_cell.validate().unwrap();
    stacked_bnas::space::build_stacked_bcnn(&space, &out.genotype, 0).unwrap();
}

#[test]
fn identical_seeds_give_identical_searches() {
    let cfg = SearchConfig {
        max_epochs: 3,
        batch_size: 8,
        arch_lr: 0.05,
        seed: 7,
        ..SearchConfig::default()
    };
    let a = run_search(&tiny_space(), &cfg, &tiny_data(), |_| {}).unwrap();
    let b = run_search(&tiny_space(), &cfg, &tiny_data(), |_| {}).unwrap();
    assert_eq!(a.genotype, b.genotype);
    assert_eq!(a.trajectory, b.trajectory);
}

#[test]
fn split_examples() {
    let (a, b) = split_train_val(50_000, 0).unwrap();
    assert_eq!((a.len(), b.len()), (25_000, 25_000));
    let (a, b) = split_train_val(2, 0).unwrap();
    assert_eq!((a.len(), b.len()), (1, 1));
    assert_eq!(split_train_val(101, 9).unwrap(), split_train_val(101, 9).unwrap());
    assert!(split_train_val(1, 0).is_err());
}

fn stop_epoch(seq: &[u8], p: usize) -> Option<(usize, usize)> {
    let mut s = SearchState::default();
    for &r in seq {
        early_stop_check(&mut s, r, p);
        if s.stopped {
            return Some((s.epoch, s.q));
        }
    }
    None
}

#[test]
fn stop_after_twelve_epochs_with_three_stable() {
    let seq = b"ABBCDDEFGHHH";
    assert_eq!(stop_epoch(seq, 3), Some((12, 3)));
    assert_eq!(brute_force_stop(seq, 3), Some(12));
}

fn topo(op: OpKind) -> CellTopology {
    CellTopology::new(vec![vec![Edge::new(0, op), Edge::new(1, op)]]).unwrap()
}

fn rank(op: OpKind, width: usize) -> ArchRank {
    ArchRank {
        conv: topo(op),
        enh: topo(OpKind::Conv3x3),
        embeddings: vec![StageEmbeddings {
            deep_out: width,
            broad_out: 8,
            deep_enh: 8,
            broad_enh: 8,
        }],
    }
}

#[test]
fn kes_stop_needs_cells_and_embeddings_both_stable() {
    let run = |ranks: Vec<ArchRank>| {
        let mut s = SearchState::default();
        for r in ranks {
            early_stop_check(&mut s, r, 3);
            if s.stopped {
                return Some(s.epoch);
            }
        }
        None
    };
    let cells_stable: Vec<_> = (0..10).map(|i| rank(OpKind::Conv3x3, 2 << (i % 2))).collect();
    assert_eq!(run(cells_stable), None);
    let widths_stable: Vec<_> = (0..10)
        .map(|i| rank(if i % 2 == 0 { OpKind::Conv1x1 } else { OpKind::Conv3x3 }, 4))
        .collect();
    assert_eq!(run(widths_stable), None);
    let both: Vec<_> = (0..10).map(|i| rank(OpKind::Conv1x1, if i < 4 { 2 << (i % 2) } else { 16 })).collect();
    assert_eq!(run(both), Some(7));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn early_stop_equals_brute_force(seq in proptest::collection::vec(0u8..3, 1..40), p in 1usize..5) {
        prop_assert_eq!(stop_epoch(&seq, p).map(|(e, _)| e), brute_force_stop(&seq, p));
        if let Some((_, q)) = stop_epoch(&seq, p) {
            prop_assert_eq!(q, p);
        }
    }

    #[test]
    fn q_is_the_current_run_length(seq in proptest::collection::vec(0u8..3, 1..40)) {
        let mut s = SearchState::default();
        for (i, &r) in seq.iter().enumerate() {
            early_stop_check(&mut s, r, usize::MAX);
            let run = seq[..=i].iter().rev().take_while(|&&x| x == r).count();
            prop_assert_eq!(s.q, run);
        }
    }
}
