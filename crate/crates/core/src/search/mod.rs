//! The search loop: per batch a weight step on training data then an
//! architecture step on validation data, with rank-stability early stopping
//! once per epoch.

mod bilevel;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{LrSchedule, OptimizerState, ParamId, ParamStore, Tape, Var};
use crate::data::{split_train_val, Batch, Dataset};
use crate::error::{Error, Result};
use crate::space::{Genotype, StackedBcnnConfig};
use crate::supernet::{ArchRank, Supernet, SupernetConfig};

pub use bilevel::{arch_gradient, loss_and_grads, set_grads, BilevelModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    /// Base network learning rate (cosine-annealed).
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub arch_lr: f32,
    pub arch_weight_decay: f32,
    /// Virtual step; `None` follows the current network learning rate.
    pub xi: Option<f32>,
    pub first_order: bool,
    /// Stop once the rank has been identical for this many epochs.
    pub patience: usize,
    pub kes: bool,
    pub k_divisor: usize,
    /// Global gradient-norm bound for weight steps; `None` disables it.
    pub grad_clip: Option<f32>,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            max_epochs: 50,
            batch_size: 64,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 3e-4,
            arch_lr: 6e-4,
            arch_weight_decay: 1e-3,
            xi: None,
            first_order: false,
            patience: 3,
            kes: false,
            k_divisor: 4,
            grad_clip: Some(5.0),
            seed: 0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patience < 1 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if self.max_epochs < 1 || self.batch_size < 2 {
            return Err(Error::Config("max_epochs must be ≥ 1 and batch_size ≥ 2".into()));
        }
        if let Some(xi) = self.xi {
            if !(xi >= 0.0 && xi.is_finite()) {
                return Err(Error::Config(format!("xi must be finite and nonnegative, got {xi}")));
            }
        }
        for (name, v) in [
            ("lr", self.lr),
            ("arch_lr", self.arch_lr),
            ("weight_decay", self.weight_decay),
            ("arch_weight_decay", self.arch_weight_decay),
            ("momentum", self.momentum),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and nonnegative, got {v}")));
            }
        }
        if self.k_divisor < 1 {
            return Err(Error::Config("k_divisor must be at least 1".into()));
        }
        Ok(())
    }

    pub fn supernet(&self) -> SupernetConfig {
        SupernetConfig {
            k_divisor: self.k_divisor,
            kes: self.kes,
            ..SupernetConfig::default()
        }
    }
}

/// Stability bookkeeping for early stopping.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SearchState<R> {
    pub epoch: usize,
    /// Length of the current run of identical consecutive ranks.
    pub q: usize,
    pub arch_prev: Option<R>,
    pub stopped: bool,
}

impl<R> Default for SearchState<R> {
    fn default() -> Self {
        SearchState {
            epoch: 0,
            q: 0,
            arch_prev: None,
            stopped: false,
        }
    }
}

/// Compares `arch_curr` with the previous epoch's rank before recording it.
pub fn early_stop_check<R: PartialEq>(state: &mut SearchState<R>, arch_curr: R, p: usize) {
    state.epoch += 1;
    state.q = if state.arch_prev.as_ref() == Some(&arch_curr) {
        state.q + 1
    } else {
        1
    };
    state.arch_prev = Some(arch_curr);
    state.stopped = state.q >= p;
}

impl BilevelModel for Supernet {
    type Batch = Batch;

    fn store(&self) -> &ParamStore {
        Supernet::store(self)
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        Supernet::store_mut(self)
    }

    fn weight_ids(&self) -> Vec<ParamId> {
        Supernet::weight_ids(self)
    }

    fn arch_ids(&self) -> Vec<ParamId> {
        Supernet::arch_ids(self)
    }

    fn loss(&mut self, tape: &mut Tape, batch: &Batch) -> Result<Var> {
        Supernet::loss(self, tape, &batch.images, &batch.labels, true)
    }
}

/// One optimizer step on the network weights; Θ is left untouched.
pub fn weight_step<M: BilevelModel + ?Sized>(
    model: &mut M,
    batch: &M::Batch,
    opt: &mut OptimizerState,
    grad_clip: Option<f32>,
) -> Result<f32> {
    let ids = model.weight_ids();
    let (loss, mut grads) = loss_and_grads(model, batch, &ids)?;
    if let Some(bound) = grad_clip {
        let n = grads
            .iter()
            .flat_map(|g| g.data())
            .map(|&v| (v as f64).powi(2))
            .sum::<f64>()
            .sqrt() as f32;
        if n > bound {
            let k = bound / n;
            grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= k));
        }
    }
    let store = model.store_mut();
    set_grads(store, &ids, &grads);
    opt.step(store, &ids)?;
    Ok(loss)
}

/// One optimizer step on Θ from the (virtual-step) validation gradient;
/// network weights are restored bitwise. Returns the validation loss.
pub fn arch_step<M: BilevelModel + ?Sized>(
    model: &mut M,
    train: &M::Batch,
    val: &M::Batch,
    xi: f32,
    opt: &mut OptimizerState,
) -> Result<f32> {
    let (loss, grads) = arch_gradient(model, train, val, xi)?;
    let ids = model.arch_ids();
    let store = model.store_mut();
    set_grads(store, &ids, &grads);
    opt.step(store, &ids)?;
    Ok(loss)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryRow {
    pub epoch: usize,
    pub train_loss: f32,
    pub val_loss: f32,
    pub fingerprint: u64,
    pub q: usize,
    pub lr: f32,
    /// Eval-mode accuracy on the validation half; not part of the CSV.
    pub val_accuracy: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct SearchOutcome {
    pub genotype: Genotype,
    pub trajectory: Vec<TrajectoryRow>,
    pub ranks: Vec<ArchRank>,
    /// Whether the rank criterion fired before `max_epochs`.
    pub early_stopped: bool,
}

impl SearchOutcome {
    /// Best validation loss seen up to each epoch.
    pub fn best_so_far_val(&self) -> Vec<f32> {
        self.trajectory
            .iter()
            .scan(f32::INFINITY, |best, r| {
                *best = best.min(r.val_loss);
                Some(*best)
            })
            .collect()
    }
}

fn mean(xs: &[f32]) -> f32 {
    (xs.iter().map(|&v| v as f64).sum::<f64>() / xs.len().max(1) as f64) as f32
}

/// Runs the bilevel search on `data` split into equal train/validation
/// halves. `on_epoch` sees each trajectory row as it is produced.
pub fn run_search(
    space: &StackedBcnnConfig,
    cfg: &SearchConfig,
    data: &Dataset,
    mut on_epoch: impl FnMut(&TrajectoryRow),
) -> Result<SearchOutcome> {
    cfg.validate()?;
    if data.channels != space.input_channels || data.height != space.input_size || data.width != space.input_size {
        return Err(Error::Config(format!(
            "dataset is {}x{}x{}, network expects {}x{}x{}",
            data.channels, data.height, data.width, space.input_channels, space.input_size, space.input_size
        )));
    }
    if data.classes > space.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, network only {}",
            data.classes, space.num_classes
        )));
    }
    let (train_idx, val_idx) = split_train_val(data.len(), cfg.seed.wrapping_add(1))?;
    let (train, val) = (data.subset(&train_idx), data.subset(&val_idx));

    let mut model = Supernet::new(space, cfg.supernet(), cfg.seed)?;
    let schedule = LrSchedule::cosine(cfg.lr, cfg.max_epochs);
    let mut w_opt = OptimizerState::sgd(cfg.lr, cfg.momentum, cfg.weight_decay);
    let mut a_opt = OptimizerState::adam(cfg.arch_lr, cfg.arch_weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
    let mut state = SearchState::default();
    let mut trajectory = Vec::new();
    let mut ranks = Vec::new();

    for epoch in 0..cfg.max_epochs {
        let lr = schedule.rate(epoch)?;
        w_opt.lr = lr;
        let xi = if cfg.first_order { 0.0 } else { cfg.xi.unwrap_or(lr) };
        model.resample_masks(&mut rng);
        let tb = train.batches(cfg.batch_size, &mut rng);
        let vb = val.batches(cfg.batch_size, &mut rng);
        if tb.is_empty() || vb.is_empty() {
            return Err(Error::Data("not enough samples for one training and one validation batch".into()));
        }
        let (mut tl, mut vl) = (Vec::new(), Vec::new());
        for (ti, vi) in tb.iter().zip(&vb) {
            let (t, v) = (train.batch(ti), val.batch(vi));
            tl.push(weight_step(&mut model, &t, &mut w_opt, cfg.grad_clip)?);
            vl.push(arch_step(&mut model, &t, &v, xi, &mut a_opt)?);
        }
        let rank = model.arch_rank();
        early_stop_check(&mut state, rank.clone(), cfg.patience);
        let row = TrajectoryRow {
            epoch: epoch + 1,
            train_loss: mean(&tl),
            val_loss: mean(&vl),
            fingerprint: rank.fingerprint(),
            q: state.q,
            lr,
            val_accuracy: Some(model.net.accuracy(&val, cfg.batch_size)?),
        };
        on_epoch(&row);
        trajectory.push(row);
        ranks.push(rank);
        if state.stopped {
            break;
        }
    }
    let genotype = ranks.last().expect("at least one epoch").genotype();
    Ok(SearchOutcome {
        genotype,
        trajectory,
        ranks,
        early_stopped: state.stopped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_identical_ranks_stop() {
        let mut s = SearchState::default();
        for (i, r) in ["a", "a", "a"].into_iter().enumerate() {
            assert!(!s.stopped, "stopped early at {i}");
            early_stop_check(&mut s, r, 3);
        }
        assert!(s.stopped);
        assert_eq!((s.epoch, s.q), (3, 3));
    }

    #[test]
    fn alternating_never_stops() {
        let mut s = SearchState::default();
        for i in 0..40 {
            early_stop_check(&mut s, i % 2, 3);
            assert!(!s.stopped);
            assert_eq!(s.q, 1);
        }
    }
}
