//! Fully connected network with a smooth activation.
//!
//! Parameter layout, layer by layer: the weight matrix `W_l` (row-major,
//! `out x in`) followed by the bias `b_l` (`out`). The last layer is linear
//! and produces the logits.

use serde::{Deserialize, Serialize};

use super::dual::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Tanh,
    Sigmoid,
}

impl Activation {
    #[inline]
    fn apply<S: Scalar>(self, z: S) -> S {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Sigmoid => z.sigmoid(),
        }
    }

    /// Derivative expressed through the activation's output.
    #[inline]
    fn derivative_from_output<S: Scalar>(self, a: S) -> S {
        let one = S::from_f64(1.0);
        match self {
            Activation::Tanh => one - a * a,
            Activation::Sigmoid => a * (one - a),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    /// Layer widths including input and output, e.g. `[2, 8, 1]`.
    pub widths: Vec<usize>,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().expect("validated widths")
    }

    pub fn param_dim(&self) -> usize {
        self.widths
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    /// `(weight offset, bias offset, fan_in, fan_out)` per layer.
    pub(crate) fn layers(&self) -> Vec<(usize, usize, usize, usize)> {
        let mut off = 0;
        self.widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let layer = (off, off + fan_in * fan_out, fan_in, fan_out);
                off += fan_in * fan_out + fan_out;
                layer
            })
            .collect()
    }
}

/// Activations kept from the forward pass. `acts[0]` is the input,
/// `acts[l]` the output of hidden layer `l`; the last entry holds the logits.
pub(crate) struct Forward<S> {
    acts: Vec<Vec<S>>,
}

impl<S: Scalar> Forward<S> {
    pub(crate) fn logits(&self) -> &[S] {
        self.acts.last().expect("at least one layer")
    }
}

pub(crate) fn forward<S: Scalar>(spec: &MlpSpec, params: &[S], x: &[f64]) -> Forward<S> {
    let layers = spec.layers();
    let mut acts: Vec<Vec<S>> = Vec::with_capacity(layers.len() + 1);
    acts.push(x.iter().map(|&v| S::from_f64(v)).collect());
    for (l, &(w_off, b_off, fan_in, fan_out)) in layers.iter().enumerate() {
        let input = &acts[l];
        let last = l + 1 == layers.len();
        let out: Vec<S> = (0..fan_out)
            .map(|r| {
                let row = &params[w_off + r * fan_in..w_off + (r + 1) * fan_in];
                let mut z = params[b_off + r];
                for (w, a) in row.iter().zip(input) {
                    z += *w * *a;
                }
                if last {
                    z
                } else {
                    spec.activation.apply(z)
                }
            })
            .collect();
        acts.push(out);
    }
    Forward { acts }
}

/// Pulls a cotangent on the logits back to the parameters.
pub(crate) fn backward<S: Scalar>(
    spec: &MlpSpec,
    params: &[S],
    fwd: &Forward<S>,
    dlogits: Vec<S>,
) -> Vec<S> {
    let layers = spec.layers();
    let mut grad = vec![S::zero(); params.len()];
    let mut delta = dlogits;
    for (l, &(w_off, b_off, fan_in, fan_out)) in layers.iter().enumerate().rev() {
        let input = &fwd.acts[l];
        for r in 0..fan_out {
            let d = delta[r];
            grad[b_off + r] = d;
            let g_row = &mut grad[w_off + r * fan_in..w_off + (r + 1) * fan_in];
            for (g, a) in g_row.iter_mut().zip(input) {
                *g = d * *a;
            }
        }
        if l > 0 {
            let mut prev = vec![S::zero(); fan_in];
            for (r, &d) in delta.iter().enumerate().take(fan_out) {
                let row = &params[w_off + r * fan_in..w_off + (r + 1) * fan_in];
                for (p, w) in prev.iter_mut().zip(row) {
                    *p += *w * d;
                }
            }
            for (p, a) in prev.iter_mut().zip(input) {
                *p = *p * spec.activation.derivative_from_output(*a);
            }
            delta = prev;
        }
    }
    grad
}
