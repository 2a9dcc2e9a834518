//! Retraining a discrete genotype from scratch.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{LrSchedule, OptimizerState, ParamId, ParamStore, Tape, Var};
use crate::data::{Batch, Dataset};
use crate::error::{Error, Result};
use crate::search::{weight_step, BilevelModel};
use crate::space::{build_stacked_bcnn, count_params_flops, DiscreteNet, Genotype, StackedBcnnConfig};

use super::config::EvalConfig;
use super::records::{MetricRecord, Phase};

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub records: Vec<MetricRecord>,
    pub test_accuracy: f64,
    pub params: usize,
    pub macs: u64,
}

/// The discrete network has no architecture parameters; reusing the bilevel
/// trait lets retraining share the weight step with the search.
struct Retrain<'a>(&'a mut DiscreteNet);

impl BilevelModel for Retrain<'_> {
    type Batch = Batch;

    fn store(&self) -> &ParamStore {
        &self.0.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.0.store
    }

    fn weight_ids(&self) -> Vec<ParamId> {
        self.0.store.ids().collect()
    }

    fn arch_ids(&self) -> Vec<ParamId> {
        Vec::new()
    }

    fn loss(&mut self, tape: &mut Tape, batch: &Batch) -> Result<Var> {
        let logits = self.0.forward_tensor(tape, batch.images.clone(), true)?;
        tape.softmax_cross_entropy(logits, &batch.labels)
    }
}

/// Trains the network of `genotype` on `train` with SGD and a cosine
/// schedule, reporting test accuracy after every epoch.
pub fn evaluate(
    genotype: &Genotype,
    space: &StackedBcnnConfig,
    cfg: &EvalConfig,
    train: &Dataset,
    test: &Dataset,
    mut on_epoch: impl FnMut(&MetricRecord),
) -> Result<EvalReport> {
    for d in [train, test] {
        if (d.channels, d.height, d.width) != (space.input_channels, space.input_size, space.input_size) {
            return Err(Error::Config(format!(
                "dataset is {}x{}x{}, network expects {}x{}x{}",
                d.channels, d.height, d.width, space.input_channels, space.input_size, space.input_size
            )));
        }
        if d.classes > space.num_classes {
            return Err(Error::Config(format!("dataset has {} classes, network only {}", d.classes, space.num_classes)));
        }
    }
    let mut net = build_stacked_bcnn(space, genotype, cfg.seed)?;
    let (params, macs) = count_params_flops(&mut net)?;
    let schedule = LrSchedule::cosine(cfg.lr, cfg.epochs);
    let mut opt = OptimizerState::sgd(cfg.lr, cfg.momentum, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(3));
    let start = Instant::now();
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut test_accuracy = 0.0;
    for epoch in 0..cfg.epochs {
        let lr = schedule.rate(epoch)?;
        opt.lr = lr;
        let mut losses = Vec::new();
        for idx in train.batches(cfg.batch_size, &mut rng) {
            let batch = train.batch(&idx);
            losses.push(weight_step(&mut Retrain(&mut net), &batch, &mut opt, cfg.grad_clip)? as f64);
        }
        test_accuracy = net.accuracy(test, cfg.batch_size)?;
        let rec = MetricRecord {
            phase: Phase::Eval,
            epoch: epoch + 1,
            loss: (losses.iter().sum::<f64>() / losses.len().max(1) as f64) as f32,
            accuracy: test_accuracy,
            lr,
            params,
            macs,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        on_epoch(&rec);
        records.push(rec);
    }
    Ok(EvalReport {
        records,
        test_accuracy,
        params,
        macs,
    })
}
