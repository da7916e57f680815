//! Small composite layers built from tape primitives.

use crate::element::Element;
use crate::error::Result;
use crate::tape::{Tape, Var};

/// `x · w + b` for row vectors `x: [m, in]`, `w: [in, out]`, `b: [out]`.
pub fn linear<T: Element>(tape: &mut Tape<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add(y, b)
}

/// Two-layer perceptron with a GELU between the layers.
pub fn mlp<T: Element>(tape: &mut Tape<T>, x: Var, w1: Var, b1: Var, w2: Var, b2: Var) -> Result<Var> {
    let h = linear(tape, x, w1, b1)?;
    let h = tape.gelu(h);
    linear(tape, h, w2, b2)
}

/// Pointwise (1x1) convolution over `[N, C, H, W]`.
pub fn pointwise<T: Element>(tape: &mut Tape<T>, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    tape.conv2d(x, w, b, 1, 0)
}
