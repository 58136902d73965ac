use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::nn::{ParamSet, Tape, Tensor, Var};
use crate::Result;

/// Zero-mean normal with variance `2 / fan_in`.
pub(crate) fn he_normal<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("shape matches")
}

pub(crate) const PRELU_INIT: f64 = 0.25;

/// Conv kernel `[co, ci, k, k, k]`, bias, and optionally a PReLU slope.
pub(crate) fn push_conv<R: Rng>(ps: &mut ParamSet, rng: &mut R, name: &str, ci: usize, co: usize, k: usize, act: bool) {
    ps.push(format!("{name}.w"), he_normal(rng, &[co, ci, k, k, k], ci * k * k * k), true);
    ps.push(format!("{name}.b"), Tensor::zeros(&[co]), false);
    if act {
        ps.push(format!("{name}.a"), Tensor::full(&[co], PRELU_INIT), false);
    }
}

/// Deconv kernel `[ci, co, k, k, k]` with stride `k`.
pub(crate) fn push_deconv<R: Rng>(ps: &mut ParamSet, rng: &mut R, name: &str, ci: usize, co: usize, k: usize) {
    ps.push(format!("{name}.w"), he_normal(rng, &[ci, co, k, k, k], ci), true);
    ps.push(format!("{name}.b"), Tensor::zeros(&[co]), false);
    ps.push(format!("{name}.a"), Tensor::full(&[co], PRELU_INIT), false);
}

/// Walks bound parameter handles in construction order.
pub(crate) struct Cursor<'a> {
    vars: &'a [Var],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(vars: &'a [Var]) -> Self {
        Cursor { vars, pos: 0 }
    }

    pub(crate) fn next(&mut self) -> Var {
        let v = self.vars[self.pos];
        self.pos += 1;
        v
    }

    pub(crate) fn finish(self) {
        debug_assert_eq!(self.pos, self.vars.len(), "unused parameters");
    }
}

pub(crate) fn conv(tape: &mut Tape, cur: &mut Cursor, x: Var, stride: usize, pad: usize, act: bool) -> Result<Var> {
    let (w, b) = (cur.next(), cur.next());
    let y = tape.conv3d(x, w, Some(b), stride, pad)?;
    if act {
        let a = cur.next();
        tape.prelu(y, a)
    } else {
        Ok(y)
    }
}

pub(crate) fn deconv(tape: &mut Tape, cur: &mut Cursor, x: Var, stride: usize) -> Result<Var> {
    let (w, b, a) = (cur.next(), cur.next(), cur.next());
    let y = tape.deconv3d(x, w, Some(b), stride, 0)?;
    tape.prelu(y, a)
}
