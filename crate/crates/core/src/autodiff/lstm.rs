use super::graph::Var;
use crate::error::{Error, Result};

/// Weights of one LSTM cell; gate blocks are ordered input, forget, candidate, output.
#[derive(Clone, Copy, Debug)]
pub struct LstmWeights<'g> {
    /// `[input, 4·hidden]`
    pub w_ih: Var<'g>,
    /// `[hidden, 4·hidden]`
    pub w_hh: Var<'g>,
    /// `[4·hidden]`
    pub bias: Var<'g>,
}

impl LstmWeights<'_> {
    pub fn hidden(&self) -> usize {
        self.w_hh.shape()[0]
    }
}

/// One LSTM step on `[batch, input]` input with `[batch, hidden]` state.
pub fn lstm_cell<'g>(
    x: &Var<'g>,
    h_prev: &Var<'g>,
    c_prev: &Var<'g>,
    w: &LstmWeights<'g>,
) -> Result<(Var<'g>, Var<'g>)> {
    let hidden = w.hidden();
    let ih = w.w_ih.shape();
    let hh = w.w_hh.shape();
    if ih.len() != 2 || ih[1] != 4 * hidden || hh != [hidden, 4 * hidden] || w.bias.shape().iter().product::<usize>() != 4 * hidden {
        return Err(Error::ShapeMismatch {
            op: "lstm_cell weights",
            lhs: ih,
            rhs: hh,
        });
    }
    let hs = h_prev.shape();
    if hs != c_prev.shape() || hs.last() != Some(&hidden) {
        return Err(Error::ShapeMismatch {
            op: "lstm_cell state",
            lhs: hs,
            rhs: c_prev.shape(),
        });
    }
    let gates = x.matmul(&w.w_ih)?.add(&h_prev.matmul(&w.w_hh)?)?.add_row(&w.bias)?;
    let i = gates.slice(1, 0, hidden)?.sigmoid();
    let f = gates.slice(1, hidden, hidden)?.sigmoid();
    let g = gates.slice(1, 2 * hidden, hidden)?.tanh();
    let o = gates.slice(1, 3 * hidden, hidden)?.sigmoid();
    let c = f.mul(c_prev)?.add(&i.mul(&g)?)?;
    let h = o.mul(&c.tanh())?;
    Ok((h, c))
}
