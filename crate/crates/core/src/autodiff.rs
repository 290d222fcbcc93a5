//! Matrix-valued reverse-mode tape.
//!
//! Only the operations the score network needs are provided. Every node
//! holds a dense `Array2<f64>`; parameters are registered as leaves with a
//! slot index so gradients can be collected in a fixed order.

use std::rc::Rc;

use ndarray::{s, Array2, Axis};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(usize),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `a (r x c) + b (1 x c)`
    AddRow(Var, Var),
    /// `a (r x c) * b (r x 1)`
    MulCol(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    ConcatCols(Var, Var),
    GatherRows(Var, Rc<[usize]>),
    ScatterAddRows(Var, Rc<[usize]>),
    /// Column-wise softmax over the rows sharing a segment id.
    SegmentSoftmax(Var, Rc<[usize]>),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// A constant: no gradient is propagated into it.
    pub fn input(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Input)
    }

    pub fn param(&mut self, value: Array2<f64>, slot: usize) -> Var {
        self.push(value, Op::Param(slot))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1, "add_row expects a 1 x c operand");
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row))
    }

    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        assert_eq!(self.value(col).ncols(), 1, "mul_col expects an r x 1 operand");
        let v = self.value(a) * self.value(col);
        self.push(v, Op::MulCol(a, col))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) * k;
        self.push(v, Op::Scale(a, k))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let v = ndarray::concatenate(Axis(1), &[self.value(a).view(), self.value(b).view()])
            .expect("concat_cols row mismatch");
        self.push(v, Op::ConcatCols(a, b))
    }

    pub fn gather_rows(&mut self, a: Var, idx: Rc<[usize]>) -> Var {
        let src = self.value(a);
        let mut v = Array2::<f64>::zeros((idx.len(), src.ncols()));
        for (r, &i) in idx.iter().enumerate() {
            v.row_mut(r).assign(&src.row(i));
        }
        self.push(v, Op::GatherRows(a, idx))
    }

    /// Sums row `r` of `a` into output row `idx[r]`; the output has `n_out` rows.
    pub fn scatter_add_rows(&mut self, a: Var, idx: Rc<[usize]>, n_out: usize) -> Var {
        let src = self.value(a);
        let mut v = Array2::<f64>::zeros((n_out, src.ncols()));
        for (r, &i) in idx.iter().enumerate() {
            let mut row = v.row_mut(i);
            row += &src.row(r);
        }
        self.push(v, Op::ScatterAddRows(a, idx))
    }

    pub fn segment_softmax(&mut self, a: Var, segments: Rc<[usize]>) -> Var {
        let x = self.value(a);
        let n_seg = segments.iter().copied().max().map_or(0, |m| m + 1);
        let mut max = Array2::<f64>::from_elem((n_seg, x.ncols()), f64::NEG_INFINITY);
        for (r, &g) in segments.iter().enumerate() {
            for (c, &val) in x.row(r).iter().enumerate() {
                if val > max[(g, c)] {
                    max[(g, c)] = val;
                }
            }
        }
        let mut y = Array2::<f64>::zeros(x.raw_dim());
        let mut denom = Array2::<f64>::zeros((n_seg, x.ncols()));
        for (r, &g) in segments.iter().enumerate() {
            for c in 0..x.ncols() {
                let e = (x[(r, c)] - max[(g, c)]).exp();
                y[(r, c)] = e;
                denom[(g, c)] += e;
            }
        }
        for (r, &g) in segments.iter().enumerate() {
            for c in 0..x.ncols() {
                y[(r, c)] /= denom[(g, c)];
            }
        }
        self.push(y, Op::SegmentSoftmax(a, segments))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    /// Reverse sweep from a scalar node. Returns the gradient of every
    /// parameter slot (zeros for slots that did not influence `loss`).
    pub fn backward(&self, loss: Var, n_slots: usize) -> Vec<Option<Array2<f64>>> {
        assert_eq!(self.value(loss).dim(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Array2<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones((1, 1)));
        let mut slots: Vec<Option<Array2<f64>>> = vec![None; n_slots];

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Input => {}
                Op::Param(slot) => accumulate(&mut slots[*slot], g),
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], g.clone());
                    accumulate(&mut grads[b.0], g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads[b.0], -&g);
                    accumulate(&mut grads[a.0], g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::AddRow(a, row) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads[row.0], gr);
                    accumulate(&mut grads[a.0], g);
                }
                Op::MulCol(a, col) => {
                    let gc = (&g * self.value(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                    let ga = &g * self.value(*col);
                    accumulate(&mut grads[col.0], gc);
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Scale(a, k) => accumulate(&mut grads[a.0], g * *k),
                Op::Relu(a) => {
                    let mut ga = g;
                    ga.zip_mut_with(self.value(*a), |d, &x| {
                        if x <= 0.0 {
                            *d = 0.0
                        }
                    });
                    accumulate(&mut grads[a.0], ga);
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.value(*a).ncols();
                    accumulate(&mut grads[a.0], g.slice(s![.., ..ca]).to_owned());
                    accumulate(&mut grads[b.0], g.slice(s![.., ca..]).to_owned());
                }
                Op::GatherRows(a, idx) => {
                    let mut ga = Array2::<f64>::zeros(self.value(*a).raw_dim());
                    for (r, &i) in idx.iter().enumerate() {
                        let mut row = ga.row_mut(i);
                        row += &g.row(r);
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::ScatterAddRows(a, idx) => {
                    let mut ga = Array2::<f64>::zeros(self.value(*a).raw_dim());
                    for (r, &i) in idx.iter().enumerate() {
                        ga.row_mut(r).assign(&g.row(i));
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::SegmentSoftmax(a, segments) => {
                    let y = &node.value;
                    let n_seg = segments.iter().copied().max().map_or(0, |m| m + 1);
                    let mut dot = Array2::<f64>::zeros((n_seg, y.ncols()));
                    for (r, &seg) in segments.iter().enumerate() {
                        for c in 0..y.ncols() {
                            dot[(seg, c)] += y[(r, c)] * g[(r, c)];
                        }
                    }
                    let mut ga = Array2::<f64>::zeros(y.raw_dim());
                    for (r, &seg) in segments.iter().enumerate() {
                        for c in 0..y.ncols() {
                            ga[(r, c)] = y[(r, c)] * (g[(r, c)] - dot[(seg, c)]);
                        }
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Sum(a) => {
                    let ga = Array2::from_elem(self.value(*a).raw_dim(), g[(0, 0)]);
                    accumulate(&mut grads[a.0], ga);
                }
            }
        }
        slots
    }
}

fn accumulate(slot: &mut Option<Array2<f64>>, g: Array2<f64>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    /// Builds a graph touching every op and returns the scalar output.
    fn graph(tape: &mut Tape, p: &[Array2<f64>]) -> Var {
        let w = tape.param(p[0].clone(), 0);
        let b = tape.param(p[1].clone(), 1);
        let x = tape.param(p[2].clone(), 2);
        let c = tape.param(p[3].clone(), 3);
        let h = tape.matmul(x, w);
        let h = tape.add_row(h, b);
        let h = tape.relu(h);
        let gathered = tape.gather_rows(h, Rc::from(vec![0, 2, 1, 1, 3]));
        let seg = tape.segment_softmax(gathered, Rc::from(vec![0, 0, 1, 1, 1]));
        let scat = tape.scatter_add_rows(seg, Rc::from(vec![1, 0, 0, 2, 1]), 3);
        let col = tape.gather_rows(c, Rc::from(vec![0, 1, 2]));
        let m = tape.mul_col(scat, col);
        let cat = tape.concat_cols(m, scat);
        let sq = tape.mul(cat, cat);
        let d = tape.sub(sq, cat);
        let e = tape.scale(d, 0.7);
        let f = tape.add(e, cat);
        tape.sum(f)
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = vec![random(&mut rng, 3, 2), random(&mut rng, 1, 2), random(&mut rng, 4, 3), random(&mut rng, 3, 1)];
        let mut tape = Tape::new();
        let out = graph(&mut tape, &params);
        let grads = tape.backward(out, params.len());
        let eval = |p: &[Array2<f64>]| {
            let mut t = Tape::new();
            let o = graph(&mut t, p);
            t.value(o)[(0, 0)]
        };
        let h = 1e-6;
        for (slot, g) in grads.iter().enumerate() {
            let g = g.as_ref().unwrap();
            for idx in 0..params[slot].len() {
                let (r, c) = (idx / params[slot].ncols(), idx % params[slot].ncols());
                let mut plus = params.clone();
                plus[slot][(r, c)] += h;
                let mut minus = params.clone();
                minus[slot][(r, c)] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                assert!((fd - g[(r, c)]).abs() < 1e-6 * (1.0 + fd.abs()), "slot {slot} ({r},{c}): {fd} vs {}", g[(r, c)]);
            }
        }
    }

    #[test]
    fn softmax_segments_sum_to_one() {
        let mut tape = Tape::new();
        let x = tape.input(array![[1.0, -3.0], [2.0, 0.5], [100.0, 7.0], [-1.0, 2.0], [0.0, 0.0]]);
        let y = tape.segment_softmax(x, Rc::from(vec![0, 0, 1, 1, 1]));
        let v = tape.value(y);
        for c in 0..2 {
            assert!((v[(0, c)] + v[(1, c)] - 1.0).abs() < 1e-15);
            assert!((v[(2, c)] + v[(3, c)] + v[(4, c)] - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn linear_regression_gradient_closed_form() {
        // loss = ||x W - t||^2  =>  dW = 2 x^T (x W - t)
        let x = array![[1.0, 2.0], [0.5, -1.0]];
        let w = array![[0.3], [-0.2]];
        let t = array![[1.0], [0.0]];
        let mut tape = Tape::new();
        let xv = tape.input(x.clone());
        let wv = tape.param(w.clone(), 0);
        let tv = tape.input(t.clone());
        let p = tape.matmul(xv, wv);
        let e = tape.sub(p, tv);
        let sq = tape.mul(e, e);
        let loss = tape.sum(sq);
        let g = tape.backward(loss, 1).remove(0).unwrap();
        let expected = x.t().dot(&(x.dot(&w) - &t)) * 2.0;
        assert!((g - expected).iter().all(|d| d.abs() < 1e-15));
    }

    #[test]
    fn constant_loss_gives_no_gradient() {
        let mut tape = Tape::new();
        let w = tape.param(array![[1.0, 2.0]], 0);
        let zero = tape.scale(w, 0.0);
        let loss = tape.sum(zero);
        let g = tape.backward(loss, 2);
        assert!(g[0].as_ref().unwrap().iter().all(|&d| d == 0.0));
        assert!(g[1].is_none());
    }
}
