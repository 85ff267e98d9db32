use std::sync::Arc;

use super::tape::{SetLayout, Tape, Var};
use crate::error::Result;

/// Low-rank update `scale · B(Ax)` with `a: [r×in]`, `b: [out×r]`.
#[derive(Clone, Copy, Debug)]
pub struct LoraVars {
    pub a: Var,
    pub b: Var,
    pub scale: f64,
}

/// Tape handles of one linear layer (`w: [out×in]`).
#[derive(Clone, Copy, Debug)]
pub struct LinearVars {
    pub w: Var,
    pub b: Option<Var>,
    pub lora: Option<LoraVars>,
}

impl LinearVars {
    pub fn new(w: Var, b: Option<Var>) -> Self {
        LinearVars { w, b, lora: None }
    }

    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let base = tape.linear(x, self.w, self.b)?;
        let Some(lora) = self.lora else {
            return Ok(base);
        };
        let down = tape.linear(x, lora.a, None)?;
        let up = tape.linear(down, lora.b, None)?;
        let up = tape.affine(up, lora.scale, 0.0);
        tape.add(base, up)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionWeights {
    pub q: LinearVars,
    pub k: LinearVars,
    pub v: LinearVars,
    pub out: LinearVars,
}

/// Multi-head self-attention over every set of `layout` at once.
///
/// `tokens` is `[sets·len × C]`. Padding tokens never act as keys or values
/// and their output rows are zero.
pub fn mhsa(
    tape: &mut Tape,
    tokens: Var,
    layout: &SetLayout,
    weights: &AttentionWeights,
    heads: usize,
) -> Result<Var> {
    let q = weights.q.apply(tape, tokens)?;
    let k = weights.k.apply(tape, tokens)?;
    let v = weights.v.apply(tape, tokens)?;
    let mixed = tape.attention(q, k, v, layout, heads)?;
    let projected = weights.out.apply(tape, mixed)?;
    let keep: Arc<[Option<usize>]> = layout
        .mask
        .iter()
        .enumerate()
        .map(|(r, &m)| m.then_some(r))
        .collect();
    tape.gather_rows(projected, keep)
}
