//! Parameterized building blocks shared by the discrete network and the
//! supernet.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ConvGeom, Group, ParamId, ParamStore, Shape, Tape, Tensor, Var, BufferId};
use crate::error::Result;

pub type InitRng = ChaCha8Rng;

pub const BN_MOMENTUM: f32 = 0.1;

/// Forward-pass context: the tape being recorded, the parameter store and
/// whether batch statistics (training) or running statistics are used.
pub struct Ctx<'a> {
    pub tape: &'a mut Tape,
    pub store: &'a mut ParamStore,
    pub train: bool,
}

impl<'a> Ctx<'a> {
    pub fn new(tape: &'a mut Tape, store: &'a mut ParamStore, train: bool) -> Self {
        Ctx { tape, store, train }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.tape.param(self.store, id)
    }
}

/// Convolution without bias; weights drawn from a fan-in scaled normal.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub geom: ConvGeom,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut InitRng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        geom: ConvGeom,
    ) -> Self {
        let fan_in = (in_ch / geom.groups) * kernel * kernel;
        let std = (2.0 / fan_in as f32).sqrt();
        let shape = Shape::new(out_ch, in_ch / geom.groups, kernel, kernel);
        let weight = store.add(name, Group::Weight, Tensor::randn(shape, std, rng));
        Conv {
            weight,
            geom,
            in_ch,
            out_ch,
            kernel,
        }
    }

    pub fn pointwise(store: &mut ParamStore, rng: &mut InitRng, name: &str, in_ch: usize, out_ch: usize, stride: usize) -> Self {
        Conv::new(store, rng, name, in_ch, out_ch, 1, ConvGeom::new(stride, 0))
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let w = cx.param(self.weight);
        cx.tape.conv2d(x, w, self.geom)
    }
}

/// Batch normalization with trainable scale/shift and running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub channels: usize,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let s = Shape::vector(channels);
        BatchNorm {
            gamma: store.add(format!("{name}.gamma"), Group::Weight, Tensor::full(s, 1.0)),
            beta: store.add(format!("{name}.beta"), Group::Weight, Tensor::zeros(s)),
            running_mean: store.add_buffer(Tensor::zeros(s)),
            running_var: store.add_buffer(Tensor::full(s, 1.0)),
            channels,
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let g = cx.param(self.gamma);
        let b = cx.param(self.beta);
        if cx.train {
            let (y, mean, var) = cx.tape.batch_norm_train(x, g, b)?;
            let s = cx.tape.shape(x);
            let m = (s.n * s.plane()) as f32;
            let unbias = m / (m - 1.0);
            let rm = cx.store.buffer_mut(self.running_mean).data_mut();
            for (r, v) in rm.iter_mut().zip(&mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
            }
            let rv = cx.store.buffer_mut(self.running_var).data_mut();
            for (r, v) in rv.iter_mut().zip(&var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * unbias;
            }
            Ok(y)
        } else {
            let mean = cx.store.buffer(self.running_mean).data().to_vec();
            let var = cx.store.buffer(self.running_var).data().to_vec();
            cx.tape.batch_norm_eval(x, g, b, &mean, &var)
        }
    }
}

/// ReLU → Conv → BatchNorm.
#[derive(Clone, Debug)]
pub struct ReluConvBn {
    pub conv: Conv,
    pub bn: BatchNorm,
}

impl ReluConvBn {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut InitRng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        geom: ConvGeom,
    ) -> Self {
        let conv = Conv::new(store, rng, &format!("{name}.conv"), in_ch, out_ch, kernel, geom);
        let bn = BatchNorm::new(store, &format!("{name}.bn"), out_ch);
        ReluConvBn { conv, bn }
    }

    pub fn pointwise(store: &mut ParamStore, rng: &mut InitRng, name: &str, in_ch: usize, out_ch: usize, stride: usize) -> Self {
        ReluConvBn::new(store, rng, name, in_ch, out_ch, 1, ConvGeom::new(stride, 0))
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let r = cx.tape.relu(x);
        let y = self.conv.forward(cx, r)?;
        self.bn.forward(cx, y)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut InitRng, name: &str, in_features: usize, out_features: usize) -> Self {
        let std = (1.0 / in_features as f32).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            Group::Weight,
            Tensor::randn(Shape::new(out_features, in_features, 1, 1), std, rng),
        );
        let bias = store.add(format!("{name}.bias"), Group::Weight, Tensor::zeros(Shape::vector(out_features)));
        Linear {
            weight,
            bias,
            in_features,
            out_features,
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let w = cx.param(self.weight);
        let b = cx.param(self.bias);
        cx.tape.linear(x, w, Some(b))
    }
}
