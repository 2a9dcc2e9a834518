//! Alternating updates of network weights `w` and architecture weights Θ.

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// A model with separable weight and architecture parameters whose loss can
/// be recorded on a tape.
pub trait BilevelModel {
    type Batch: ?Sized;

    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
    fn weight_ids(&self) -> Vec<ParamId>;
    fn arch_ids(&self) -> Vec<ParamId>;
    /// Training-mode loss on `batch`.
    fn loss(&mut self, tape: &mut Tape, batch: &Self::Batch) -> Result<Var>;
}

/// Loss value and gradients w.r.t. `ids`, in order. Parameters the loss
/// does not reach get zero gradients.
pub fn loss_and_grads<M: BilevelModel + ?Sized>(model: &mut M, batch: &M::Batch, ids: &[ParamId]) -> Result<(f32, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let loss = model.loss(&mut tape, batch)?;
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("loss is {value}")));
    }
    let grads = tape.backward(loss)?;
    let store = model.store_mut();
    store.zero_grads();
    grads.accumulate_into(store);
    Ok((value, ids.iter().map(|&id| store.grad(id).clone()).collect()))
}

fn axpy(store: &mut ParamStore, ids: &[ParamId], base: &[Tensor], k: f32, dir: &[Tensor]) {
    for ((&id, b), d) in ids.iter().zip(base).zip(dir) {
        let v = store.value_mut(id);
        for ((v, &b), &d) in v.data_mut().iter_mut().zip(b.data()).zip(d.data()) {
            *v = b + k * d;
        }
    }
}

fn norm(ts: &[Tensor]) -> f32 {
    ts.iter()
        .flat_map(|t| t.data())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt() as f32
}

/// Gradient of the validation loss w.r.t. Θ.
///
/// With `xi = 0` this is `∇_Θ L_val(w, Θ)`. Otherwise the loss is taken at
/// the virtual weights `w' = w − ξ ∇_w L_train(w, Θ)` and the implicit term
/// `−ξ ∇²_{Θ,w} L_train · ∇_{w'} L_val` is added via a central difference
/// at `w ± ε ∇_{w'} L_val`. Weights and buffers are restored bitwise.
/// Returns `(L_val, gradient)`.
pub fn arch_gradient<M: BilevelModel + ?Sized>(
    model: &mut M,
    train: &M::Batch,
    val: &M::Batch,
    xi: f32,
) -> Result<(f32, Vec<Tensor>)> {
    if !(xi >= 0.0 && xi.is_finite()) {
        return Err(Error::Config(format!("virtual step must be finite and nonnegative, got {xi}")));
    }
    let theta = model.arch_ids();
    if xi == 0.0 {
        return loss_and_grads(model, val, &theta);
    }
    let w_ids = model.weight_ids();
    let w0 = model.store().snapshot(&w_ids);
    let buffers = model.store().buffers_snapshot();
    let result = (|| {
        let (_, gw) = loss_and_grads(model, train, &w_ids)?;
        axpy(model.store_mut(), &w_ids, &w0, -xi, &gw);

        let mut both = theta.clone();
        both.extend(&w_ids);
        let (val_loss, mut g) = loss_and_grads(model, val, &both)?;
        let dw = g.split_off(theta.len());
        let mut d_theta = g;

        let n = norm(&dw);
        if n > 0.0 {
            let eps = 0.01 / n;
            axpy(model.store_mut(), &w_ids, &w0, eps, &dw);
            let (_, gp) = loss_and_grads(model, train, &theta)?;
            axpy(model.store_mut(), &w_ids, &w0, -eps, &dw);
            let (_, gm) = loss_and_grads(model, train, &theta)?;
            let k = xi / (2.0 * eps);
            for ((d, p), m) in d_theta.iter_mut().zip(&gp).zip(&gm) {
                for ((d, &p), &m) in d.data_mut().iter_mut().zip(p.data()).zip(m.data()) {
                    *d -= k * (p - m);
                }
            }
        }
        Ok((val_loss, d_theta))
    })();
    model.store_mut().restore(&w_ids, &w0);
    model.store_mut().restore_buffers(buffers);
    result
}

/// Loads `grads` into the store's gradient slots for `ids` only.
pub fn set_grads(store: &mut ParamStore, ids: &[ParamId], grads: &[Tensor]) {
    store.zero_grads();
    for (&id, g) in ids.iter().zip(grads) {
        store.accumulate_grad(id, g);
    }
}
