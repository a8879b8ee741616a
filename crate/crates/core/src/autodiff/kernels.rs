use ndarray::{s, Array2, Axis};

use super::{Matrix, NodeId, Op};

/// `log(1 + e^x)` without overflow for large `|x|`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Forward value of a non-input op. `get` resolves parent payloads.
pub(crate) fn evaluate<'a, F>(op: Op, get: F) -> Matrix
where
    F: Fn(NodeId) -> &'a Matrix,
{
    match op {
        Op::Leaf | Op::Constant => unreachable!("inputs carry their own value"),
        Op::Add(a, b) => get(a) + get(b),
        Op::Sub(a, b) => get(a) - get(b),
        Op::Mul(a, b) => get(a) * get(b),
        Op::Neg(a) => get(a).mapv(|v| -v),
        Op::Scale(a, c) => get(a).mapv(|v| v * c),
        Op::Shift(a, c) => get(a).mapv(|v| v + c),
        Op::Exp(a) => get(a).mapv(f64::exp),
        Op::Log(a) => get(a).mapv(f64::ln),
        Op::Recip(a) => get(a).mapv(f64::recip),
        Op::Powi(a, n) => get(a).mapv(|v| v.powi(n)),
        Op::Softplus(a) => get(a).mapv(softplus),
        Op::Sigmoid(a) => get(a).mapv(sigmoid),
        Op::Tanh(a) => get(a).mapv(f64::tanh),
        Op::Relu(a) => get(a).mapv(|v| if v > 0.0 { v } else { 0.0 }),
        Op::MatMul(a, b) => get(a).dot(get(b)),
        Op::Transpose(a) => get(a).t().to_owned(),
        Op::Sum(a) => Array2::from_elem((1, 1), get(a).sum()),
        Op::SumRows(a) => get(a).sum_axis(Axis(0)).insert_axis(Axis(0)),
        Op::SumCols(a) => get(a).sum_axis(Axis(1)).insert_axis(Axis(1)),
        Op::Broadcast(a, r, c) => Array2::from_elem((r, c), get(a)[[0, 0]]),
        Op::BroadcastRows(a, r) => {
            let row = get(a);
            row.broadcast((r, row.ncols())).expect("row broadcast").to_owned()
        }
        Op::BroadcastCols(a, c) => {
            let col = get(a);
            col.broadcast((col.nrows(), c)).expect("column broadcast").to_owned()
        }
        Op::SliceCols(a, start, end) => get(a).slice(s![.., start..end]).to_owned(),
        Op::PadCols(a, start, total) => {
            let src = get(a);
            let mut out = Array2::zeros((src.nrows(), total));
            out.slice_mut(s![.., start..start + src.ncols()]).assign(src);
            out
        }
    }
}
