//! Small reusable layers built on the tape.

use rand::Rng;

use super::{NodeId, ParamId, Params, Tape, Tensor};

/// Affine map `W x + b`.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(params: &mut Params, name: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let std = (1.0 / in_dim as f64).sqrt();
        let w = params.add(&format!("{name}.w"), Tensor::randn(out_dim, in_dim, std, rng));
        let b = params.add(&format!("{name}.b"), Tensor::zeros(out_dim, 1));
        Linear { w, b }
    }

    pub fn forward(&self, tape: &mut Tape, x: NodeId) -> NodeId {
        let wx = tape.matvec(self.w, x);
        let b = tape.param(self.b);
        tape.add(wx, b)
    }
}

/// Gated recurrent unit cell.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct GruCell {
    update: Linear,
    reset: Linear,
    candidate: Linear,
    pub hidden_dim: usize,
}

impl GruCell {
    pub fn new(params: &mut Params, name: &str, in_dim: usize, hidden_dim: usize, rng: &mut impl Rng) -> Self {
        let gate_in = in_dim + hidden_dim;
        GruCell {
            update: Linear::new(params, &format!("{name}.z"), gate_in, hidden_dim, rng),
            reset: Linear::new(params, &format!("{name}.r"), gate_in, hidden_dim, rng),
            candidate: Linear::new(params, &format!("{name}.h"), gate_in, hidden_dim, rng),
            hidden_dim,
        }
    }

    /// One step: `h' = (1-z) * h + z * tanh(W_h [x; r*h])`.
    pub fn step(&self, tape: &mut Tape, x: NodeId, h: NodeId) -> NodeId {
        let xh = tape.concat(&[x, h]);
        let z_pre = self.update.forward(tape, xh);
        let z = tape.sigmoid(z_pre);
        let r_pre = self.reset.forward(tape, xh);
        let r = tape.sigmoid(r_pre);
        let rh = tape.mul(r, h);
        let xrh = tape.concat(&[x, rh]);
        let cand_pre = self.candidate.forward(tape, xrh);
        let cand = tape.tanh(cand_pre);
        let zneg = tape.neg(z);
        let one_minus_z = tape.add_const(zneg, 1.0);
        let keep = tape.mul(one_minus_z, h);
        let new = tape.mul(z, cand);
        tape.add(keep, new)
    }
}
