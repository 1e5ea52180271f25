use ndarray::{Array2, ArrayView2};
use rand::Rng;

use super::layers::{BatchNorm, BatchNormCache, Dense};

/// Feedforward net: affine -> batch norm -> ReLU for each hidden layer, then a
/// plain affine output. An optional batch norm can precede the first layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub input_norm: Option<BatchNorm>,
    pub hidden: Vec<(Dense, BatchNorm)>,
    pub output: Dense,
}

/// Activations kept from a training-mode forward pass.
#[derive(Debug, Clone)]
pub(crate) struct MlpTape {
    input_norm: Option<BatchNormCache>,
    /// Input of every affine layer, output layer last.
    inputs: Vec<Array2<f64>>,
    norms: Vec<BatchNormCache>,
    /// Post-normalization pre-activation of each hidden layer (ReLU mask).
    pre_relu: Vec<Array2<f64>>,
}

impl Mlp {
    pub fn new(d_in: usize, widths: &[usize], d_out: usize, input_norm: bool) -> Self {
        let mut hidden = Vec::with_capacity(widths.len());
        let mut prev = d_in;
        for &w in widths {
            hidden.push((Dense::zeros(prev, w), BatchNorm::new(w)));
            prev = w;
        }
        Self {
            input_norm: input_norm.then(|| BatchNorm::new(d_in)),
            hidden,
            output: Dense::zeros(prev, d_out),
        }
    }

    pub fn d_in(&self) -> usize {
        self.hidden.first().map_or(self.output.d_in(), |(d, _)| d.d_in())
    }

    pub fn d_out(&self) -> usize {
        self.output.d_out()
    }

    pub fn widths(&self) -> Vec<usize> {
        self.hidden.iter().map(|(d, _)| d.d_out()).collect()
    }

    pub fn xavier<R: Rng>(&mut self, rng: &mut R) {
        if let Some(bn) = &mut self.input_norm {
            bn.reset();
        }
        for (dense, bn) in &mut self.hidden {
            dense.xavier(rng);
            bn.reset();
        }
        self.output.xavier(rng);
    }

    /// Weights and biases of the affine maps only.
    pub fn affine_parameter_count(&self) -> usize {
        self.hidden
            .iter()
            .map(|(d, _)| d.weight.len() + d.bias.len())
            .sum::<usize>()
            + self.output.weight.len()
            + self.output.bias.len()
    }

    /// Trainable parameters, including batch-norm scales and shifts.
    pub fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.len());
        n
    }

    pub(crate) fn forward_train(&mut self, x: ArrayView2<f64>) -> (Array2<f64>, MlpTape) {
        let mut tape = MlpTape {
            input_norm: None,
            inputs: Vec::with_capacity(self.hidden.len() + 1),
            norms: Vec::with_capacity(self.hidden.len()),
            pre_relu: Vec::with_capacity(self.hidden.len()),
        };
        let mut h = match &mut self.input_norm {
            Some(bn) => {
                let (y, cache) = bn.forward_train(x);
                tape.input_norm = Some(cache);
                y
            }
            None => x.to_owned(),
        };
        for (dense, bn) in &mut self.hidden {
            let z = dense.forward(h.view());
            let (zn, cache) = bn.forward_train(z.view());
            tape.inputs.push(h);
            tape.norms.push(cache);
            h = zn.mapv(relu);
            tape.pre_relu.push(zn);
        }
        let out = self.output.forward(h.view());
        tape.inputs.push(h);
        (out, tape)
    }

    pub fn forward_eval(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut h = match &self.input_norm {
            Some(bn) => bn.forward_eval(x),
            None => x.to_owned(),
        };
        for (dense, bn) in &self.hidden {
            let z = dense.forward(h.view());
            h = bn.forward_eval(z.view()).mapv(relu);
        }
        self.output.forward(h.view())
    }

    /// Writes parameter gradients into `grads` in `visit_params` order.
    pub(crate) fn backward(&self, tape: &MlpTape, d_out: ArrayView2<f64>, grads: &mut [f64]) {
        debug_assert_eq!(grads.len(), self.parameter_count());
        let offsets = self.offsets();
        let n_hidden = self.hidden.len();
        let (dw, db, dh) = self.output.backward(tape.inputs[n_hidden].view(), d_out, n_hidden > 0 || self.input_norm.is_some());
        let out_slot = 1 + 4 * n_hidden;
        copy_into(&mut grads[offsets[out_slot]..], dw.iter());
        copy_into(&mut grads[offsets[out_slot + 1]..], db.iter());

        let mut dh = dh;
        for l in (0..n_hidden).rev() {
            let (dense, bn) = &self.hidden[l];
            let mut dzn = dh.expect("upstream gradient present");
            dzn.zip_mut_with(&tape.pre_relu[l], |g, &z| {
                if z <= 0.0 {
                    *g = 0.0;
                }
            });
            let (dz, dgamma, dbeta) = bn.backward(&tape.norms[l], dzn.view());
            let want_dx = l > 0 || self.input_norm.is_some();
            let (dw, db, dx) = dense.backward(tape.inputs[l].view(), dz.view(), want_dx);
            let slot = 1 + 4 * l;
            copy_into(&mut grads[offsets[slot]..], dw.iter());
            copy_into(&mut grads[offsets[slot + 1]..], db.iter());
            copy_into(&mut grads[offsets[slot + 2]..], dgamma.iter());
            copy_into(&mut grads[offsets[slot + 3]..], dbeta.iter());
            dh = dx;
        }
        if let (Some(bn), Some(cache)) = (&self.input_norm, &tape.input_norm) {
            let (_, dgamma, dbeta) = bn.backward(cache, dh.expect("upstream gradient present").view());
            copy_into(&mut grads[offsets[0]..], dgamma.iter());
            copy_into(&mut grads[offsets[0] + bn.width()..], dbeta.iter());
        }
    }

    /// Start offset of each parameter slot: slot 0 is the input norm (gamma and
    /// beta, possibly empty), then `(W, b, gamma, beta)` per hidden layer, then
    /// the output `W, b`.
    fn offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(3 + 4 * self.hidden.len());
        let mut at = 0;
        offsets.push(at);
        at += self.input_norm.as_ref().map_or(0, |bn| 2 * bn.width());
        for (dense, bn) in &self.hidden {
            for len in [dense.weight.len(), dense.bias.len(), bn.width(), bn.width()] {
                offsets.push(at);
                at += len;
            }
        }
        offsets.push(at);
        at += self.output.weight.len();
        offsets.push(at);
        offsets
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(&[f64])) {
        if let Some(bn) = &self.input_norm {
            f(bn.gamma.as_slice().expect("contiguous"));
            f(bn.beta.as_slice().expect("contiguous"));
        }
        for (dense, bn) in &self.hidden {
            f(dense.weight.as_slice().expect("contiguous"));
            f(dense.bias.as_slice().expect("contiguous"));
            f(bn.gamma.as_slice().expect("contiguous"));
            f(bn.beta.as_slice().expect("contiguous"));
        }
        f(self.output.weight.as_slice().expect("contiguous"));
        f(self.output.bias.as_slice().expect("contiguous"));
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        if let Some(bn) = &mut self.input_norm {
            f(bn.gamma.as_slice_mut().expect("contiguous"));
            f(bn.beta.as_slice_mut().expect("contiguous"));
        }
        for (dense, bn) in &mut self.hidden {
            f(dense.weight.as_slice_mut().expect("contiguous"));
            f(dense.bias.as_slice_mut().expect("contiguous"));
            f(bn.gamma.as_slice_mut().expect("contiguous"));
            f(bn.beta.as_slice_mut().expect("contiguous"));
        }
        f(self.output.weight.as_slice_mut().expect("contiguous"));
        f(self.output.bias.as_slice_mut().expect("contiguous"));
    }

    pub(crate) fn norms(&self) -> impl Iterator<Item = &BatchNorm> {
        self.input_norm.iter().chain(self.hidden.iter().map(|(_, bn)| bn))
    }

    pub fn norms_mut(&mut self) -> impl Iterator<Item = &mut BatchNorm> {
        self.input_norm.iter_mut().chain(self.hidden.iter_mut().map(|(_, bn)| bn))
    }
}

#[inline]
fn relu(v: f64) -> f64 {
    v.max(0.0)
}

fn copy_into<'a>(dst: &mut [f64], src: impl Iterator<Item = &'a f64>) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = *s;
    }
}
