//! Backward pass. Each adjoint is built from ordinary tape ops, so the
//! returned gradients can be differentiated again.

use ndarray::Array2;

use super::{AutodiffError, NodeId, Op, Result, Tape, Var};

impl Tape {
    /// Gradient of the scalar `output` with respect to each node in `wrt`.
    ///
    /// `wrt` may hold leaves or intermediate nodes; an intermediate is treated
    /// as an independent input. A node `output` does not depend on gets a
    /// zero gradient of its own shape.
    pub fn gradient<'t>(&'t self, output: Var<'t>, wrt: &[Var<'t>]) -> Result<Vec<Var<'t>>> {
        let (rows, cols) = output.shape();
        if (rows, cols) != (1, 1) {
            return Err(AutodiffError::NonScalarOutput {
                node: output.id.0,
                rows,
                cols,
            });
        }
        let last = output.id.0;

        // needs[i]: node i depends on at least one requested input.
        let mut needs = vec![false; last + 1];
        for w in wrt {
            if w.id.0 <= last {
                needs[w.id.0] = true;
            }
        }
        {
            let nodes = self.nodes.borrow();
            for i in 0..=last {
                if !needs[i] && nodes[i].op.parents().any(|p| needs[p.0]) {
                    needs[i] = true;
                }
            }
        }

        let mut adj: Vec<Option<NodeId>> = vec![None; last + 1];
        if needs[last] {
            adj[last] = Some(self.scalar(1.0).id);
        }
        for i in (0..=last).rev() {
            let Some(g) = adj[i] else { continue };
            let op = self.op(NodeId(i));
            if matches!(op, Op::Leaf | Op::Constant) {
                continue;
            }
            let mut acc = Accumulator {
                tape: self,
                adj: &mut adj,
                needs: &needs,
            };
            acc.backprop(op, NodeId(i), self.var(g));
        }

        Ok(wrt
            .iter()
            .map(|w| match adj.get(w.id.0).copied().flatten() {
                Some(g) => self.var(g),
                None => {
                    let (r, c) = w.shape();
                    self.constant(Array2::zeros((r, c)))
                }
            })
            .collect())
    }
}

struct Accumulator<'a, 't> {
    tape: &'t Tape,
    adj: &'a mut [Option<NodeId>],
    needs: &'a [bool],
}

impl<'t> Accumulator<'_, 't> {
    fn add<F>(&mut self, parent: NodeId, contribution: F)
    where
        F: FnOnce() -> Var<'t>,
    {
        if !self.needs[parent.0] {
            return;
        }
        let c = contribution();
        let next = match self.adj[parent.0] {
            Some(prev) => self.tape.var(prev) + c,
            None => c,
        };
        self.adj[parent.0] = Some(next.id);
    }

    fn backprop(&mut self, op: Op, node: NodeId, g: Var<'t>) {
        let tape = self.tape;
        let v = |id: NodeId| tape.var(id);
        let y = v(node);
        match op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                self.add(a, || g);
                self.add(b, || g);
            }
            Op::Sub(a, b) => {
                self.add(a, || g);
                self.add(b, || -g);
            }
            Op::Mul(a, b) => {
                self.add(a, || g * v(b));
                self.add(b, || g * v(a));
            }
            Op::Neg(a) => self.add(a, || -g),
            Op::Scale(a, c) => self.add(a, || g.scale(c)),
            Op::Shift(a, _) => self.add(a, || g),
            Op::Exp(a) => self.add(a, || g * y),
            Op::Log(a) => self.add(a, || g * v(a).recip()),
            Op::Recip(a) => self.add(a, || -(g * y.square())),
            Op::Powi(a, n) => self.add(a, || g * v(a).powi(n - 1).scale(n as f64)),
            Op::Softplus(a) => self.add(a, || g * v(a).sigmoid()),
            Op::Sigmoid(a) => self.add(a, || g * (y - y.square())),
            Op::Tanh(a) => self.add(a, || g * (-y.square()).shift(1.0)),
            Op::Relu(a) => self.add(a, || {
                let mask = tape
                    .value_rc(a)
                    .mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                g * tape.constant(mask)
            }),
            Op::MatMul(a, b) => {
                self.add(a, || g.matmul(v(b).t()));
                self.add(b, || v(a).t().matmul(g));
            }
            Op::Transpose(a) => self.add(a, || g.t()),
            Op::Sum(a) => {
                let (r, c) = tape.shape(a);
                self.add(a, || g.broadcast(r, c));
            }
            Op::SumRows(a) => {
                let (r, _) = tape.shape(a);
                self.add(a, || g.broadcast_rows(r));
            }
            Op::SumCols(a) => {
                let (_, c) = tape.shape(a);
                self.add(a, || g.broadcast_cols(c));
            }
            Op::Broadcast(a, ..) => self.add(a, || g.sum()),
            Op::BroadcastRows(a, _) => self.add(a, || g.sum_rows()),
            Op::BroadcastCols(a, _) => self.add(a, || g.sum_cols()),
            Op::SliceCols(a, start, _) => {
                let (_, total) = tape.shape(a);
                self.add(a, || g.pad_cols(start, total));
            }
            Op::PadCols(a, start, _) => {
                let (_, w) = tape.shape(a);
                self.add(a, || g.slice_cols(start, start + w));
            }
        }
    }
}
