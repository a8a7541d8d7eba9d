//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Nodes hold `f64` tensors (`ndarray::ArrayD`); every operation records,
//! per input, a closure mapping the output adjoint to that input's adjoint
//! contribution. `backward` walks the tape in reverse creation order, so a
//! single pass yields gradients for every node, including leaves inserted
//! with [`Graph::leaf`]. All tensors are 64-bit; the tape is single-threaded
//! and allocation order is deterministic.

use ndarray::{ArrayD, ArrayViewD, Axis, Ix1, Ix2, IxDyn};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

type GradFn = Box<dyn Fn(&ArrayD<f64>) -> ArrayD<f64>>;

struct Node {
    value: ArrayD<f64>,
    edges: Vec<(NodeId, GradFn)>,
}

/// Gradients of one scalar root with respect to every tape node.
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    /// Gradient for `id`, or `None` if the node does not influence the root.
    pub fn get(&self, id: NodeId) -> Option<&ArrayD<f64>> {
        self.grads[id.0].as_ref()
    }

    /// Gradient as a dense array, zeros if the node is off the path.
    pub fn dense(&self, id: NodeId, shape: &[usize]) -> ArrayD<f64> {
        match self.get(id) {
            Some(g) => g.clone(),
            None => ArrayD::zeros(IxDyn(shape)),
        }
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn as2(a: &ArrayD<f64>) -> ndarray::ArrayView2<'_, f64> {
    a.view().into_dimensionality::<Ix2>().expect("2-d tensor expected")
}

fn as1(a: &ArrayD<f64>) -> ndarray::ArrayView1<'_, f64> {
    a.view().into_dimensionality::<Ix1>().expect("1-d tensor expected")
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: ArrayD<f64>, edges: Vec<(NodeId, GradFn)>) -> NodeId {
        self.nodes.push(Node { value, edges });
        NodeId(self.nodes.len() - 1)
    }

    /// Node with no inputs. Gradients do not propagate past it.
    pub fn constant(&mut self, value: ArrayD<f64>) -> NodeId {
        self.push(value, Vec::new())
    }

    /// Same as [`Graph::constant`]; the name marks nodes whose gradient the
    /// caller intends to read after `backward`.
    pub fn leaf(&mut self, value: ArrayD<f64>) -> NodeId {
        self.constant(value)
    }

    pub fn scalar_const(&mut self, x: f64) -> NodeId {
        self.constant(ndarray::arr0(x).into_dyn())
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<f64> {
        &self.nodes[id.0].value
    }

    pub fn value_view(&self, id: NodeId) -> ArrayViewD<'_, f64> {
        self.nodes[id.0].value.view()
    }

    /// Value of a scalar (single-element) node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = &self.nodes[id.0].value;
        assert_eq!(v.len(), 1, "scalar() on tensor of {} elements", v.len());
        *v.iter().next().unwrap()
    }

    // ---- elementwise, same shape -------------------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) + self.value(b);
        self.push(
            v,
            vec![
                (a, Box::new(|g: &ArrayD<f64>| g.clone()) as GradFn),
                (b, Box::new(|g: &ArrayD<f64>| g.clone())),
            ],
        )
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) - self.value(b);
        self.push(
            v,
            vec![
                (a, Box::new(|g: &ArrayD<f64>| g.clone()) as GradFn),
                (b, Box::new(|g: &ArrayD<f64>| -g)),
            ],
        )
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        let v = &av * &bv;
        self.push(
            v,
            vec![
                (a, Box::new(move |g: &ArrayD<f64>| g * &bv) as GradFn),
                (b, Box::new(move |g: &ArrayD<f64>| g * &av)),
            ],
        )
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        let v = &av / &bv;
        let bv2 = bv.clone();
        self.push(
            v,
            vec![
                (a, Box::new(move |g: &ArrayD<f64>| g / &bv) as GradFn),
                (b, Box::new(move |g: &ArrayD<f64>| -(g * &av) / (&bv2 * &bv2))),
            ],
        )
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a) * c;
        self.push(v, vec![(a, Box::new(move |g: &ArrayD<f64>| g * c) as GradFn)])
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a) + c;
        self.push(v, vec![(a, Box::new(|g: &ArrayD<f64>| g.clone()) as GradFn)])
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.scale(a, -1.0)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a).clone();
        let v = &av * &av;
        self.push(v, vec![(a, Box::new(move |g: &ArrayD<f64>| g * &av * 2.0) as GradFn)])
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(f64::sqrt);
        let out = v.clone();
        self.push(
            v,
            vec![(a, Box::new(move |g: &ArrayD<f64>| g / (&out * 2.0)) as GradFn)],
        )
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(f64::tanh);
        let out = v.clone();
        self.push(
            v,
            vec![(a, Box::new(move |g: &ArrayD<f64>| g * (1.0 - &out * &out)) as GradFn)],
        )
    }

    // ---- linear algebra (2-d) ----------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = as2(self.value(a)).to_owned();
        let bv = as2(self.value(b)).to_owned();
        let v = av.dot(&bv).into_dyn();
        let av2 = av.clone();
        let bv2 = bv.clone();
        self.push(
            v,
            vec![
                (
                    a,
                    Box::new(move |g: &ArrayD<f64>| as2(g).dot(&bv2.t()).into_dyn()) as GradFn,
                ),
                (b, Box::new(move |g: &ArrayD<f64>| av2.t().dot(&as2(g)).into_dyn())),
            ],
        )
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = as2(self.value(a)).t().to_owned().into_dyn();
        self.push(
            v,
            vec![(
                a,
                Box::new(|g: &ArrayD<f64>| as2(g).t().to_owned().into_dyn()) as GradFn,
            )],
        )
    }

    /// Row-wise softmax of a 2-d tensor (normalizes along axis 1).
    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let x = as2(self.value(a)).to_owned();
        let mut y = x.clone();
        for mut row in y.rows_mut() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - m).exp());
            let s: f64 = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        let yc = y.clone();
        self.push(
            y.into_dyn(),
            vec![(
                a,
                Box::new(move |g: &ArrayD<f64>| {
                    let g2 = as2(g);
                    let gy = &g2 * &yc;
                    let dot = gy.sum_axis(Axis(1)).insert_axis(Axis(1));
                    (&gy - &(&yc * &dot)).into_dyn()
                }) as GradFn,
            )],
        )
    }

    // ---- reductions and broadcasts -----------------------------------------

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let shape: Vec<usize> = self.value(a).shape().to_vec();
        let v = ndarray::arr0(self.value(a).sum()).into_dyn();
        self.push(
            v,
            vec![(
                a,
                Box::new(move |g: &ArrayD<f64>| {
                    ArrayD::from_elem(IxDyn(&shape), *g.iter().next().unwrap())
                }) as GradFn,
            )],
        )
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum along axis 1 of a 2-d tensor, keeping shape `(n, 1)`.
    pub fn row_sum(&mut self, a: NodeId) -> NodeId {
        let x = as2(self.value(a));
        let cols = x.ncols();
        let v = x.sum_axis(Axis(1)).insert_axis(Axis(1)).into_dyn();
        self.push(
            v,
            vec![(
                a,
                Box::new(move |g: &ArrayD<f64>| {
                    let gc = as2(g);
                    let mut out = ndarray::Array2::<f64>::zeros((gc.nrows(), cols));
                    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
                        row.fill(gc[(i, 0)]);
                    }
                    out.into_dyn()
                }) as GradFn,
            )],
        )
    }

    pub fn row_mean(&mut self, a: NodeId) -> NodeId {
        let cols = as2(self.value(a)).ncols() as f64;
        let s = self.row_sum(a);
        self.scale(s, 1.0 / cols)
    }

    /// `mat (n, d) - col (n, 1)`, broadcasting the column over axis 1.
    pub fn sub_col(&mut self, mat: NodeId, col: NodeId) -> NodeId {
        let m = as2(self.value(mat)).to_owned();
        let c = as2(self.value(col)).to_owned();
        let v = (&m - &c).into_dyn();
        self.push(
            v,
            vec![
                (mat, Box::new(|g: &ArrayD<f64>| g.clone()) as GradFn),
                (
                    col,
                    Box::new(|g: &ArrayD<f64>| {
                        (-as2(g).sum_axis(Axis(1)).insert_axis(Axis(1))).into_dyn()
                    }),
                ),
            ],
        )
    }

    /// `mat (n, d) / col (n, 1)`, broadcasting the column over axis 1.
    pub fn div_col(&mut self, mat: NodeId, col: NodeId) -> NodeId {
        let m = as2(self.value(mat)).to_owned();
        let c = as2(self.value(col)).to_owned();
        let v = (&m / &c).into_dyn();
        let c1 = c.clone();
        self.push(
            v,
            vec![
                (
                    mat,
                    Box::new(move |g: &ArrayD<f64>| (&as2(g).to_owned() / &c1).into_dyn())
                        as GradFn,
                ),
                (
                    col,
                    Box::new(move |g: &ArrayD<f64>| {
                        let num = &as2(g).to_owned() * &m;
                        let per = (&num / &(&c * &c)).sum_axis(Axis(1)).insert_axis(Axis(1));
                        (-per).into_dyn()
                    }),
                ),
            ],
        )
    }

    /// `mat (n, d) * row (d,)`, broadcasting the row over axis 0.
    pub fn mul_row(&mut self, mat: NodeId, row: NodeId) -> NodeId {
        let m = as2(self.value(mat)).to_owned();
        let r = as1(self.value(row)).to_owned();
        let v = (&m * &r).into_dyn();
        let r1 = r.clone();
        self.push(
            v,
            vec![
                (
                    mat,
                    Box::new(move |g: &ArrayD<f64>| (&as2(g).to_owned() * &r1).into_dyn())
                        as GradFn,
                ),
                (
                    row,
                    Box::new(move |g: &ArrayD<f64>| {
                        (&as2(g).to_owned() * &m).sum_axis(Axis(0)).into_dyn()
                    }),
                ),
            ],
        )
    }

    /// `mat (n, d) + row (d,)`, broadcasting the row over axis 0.
    pub fn add_row(&mut self, mat: NodeId, row: NodeId) -> NodeId {
        let m = as2(self.value(mat)).to_owned();
        let r = as1(self.value(row)).to_owned();
        let v = (&m + &r).into_dyn();
        self.push(
            v,
            vec![
                (mat, Box::new(|g: &ArrayD<f64>| g.clone()) as GradFn),
                (row, Box::new(|g: &ArrayD<f64>| as2(g).sum_axis(Axis(0)).into_dyn())),
            ],
        )
    }

    // ---- indexing ------------------------------------------------------------

    /// Row `i` of a 2-d tensor as a 1-d tensor.
    pub fn row(&mut self, a: NodeId, i: usize) -> NodeId {
        let x = as2(self.value(a));
        let (n, d) = (x.nrows(), x.ncols());
        assert!(i < n, "row {i} out of bounds for {n} rows");
        let v = x.row(i).to_owned().into_dyn();
        self.push(
            v,
            vec![(
                a,
                Box::new(move |g: &ArrayD<f64>| {
                    let mut out = ndarray::Array2::<f64>::zeros((n, d));
                    out.row_mut(i).assign(&as1(g));
                    out.into_dyn()
                }) as GradFn,
            )],
        )
    }

    /// Rows of a 2-d tensor gathered in the given order; duplicates allowed.
    pub fn select_rows(&mut self, a: NodeId, indices: &[usize]) -> NodeId {
        let x = as2(self.value(a));
        let (n, d) = (x.nrows(), x.ncols());
        assert!(indices.iter().all(|&i| i < n), "row index out of bounds");
        let mut out = ndarray::Array2::<f64>::zeros((indices.len(), d));
        for (r, &i) in indices.iter().enumerate() {
            out.row_mut(r).assign(&x.row(i));
        }
        let idx: Vec<usize> = indices.to_vec();
        self.push(
            out.into_dyn(),
            vec![(
                a,
                Box::new(move |g: &ArrayD<f64>| {
                    let g2 = as2(g);
                    let mut acc = ndarray::Array2::<f64>::zeros((n, d));
                    for (r, &i) in idx.iter().enumerate() {
                        let updated = &acc.row(i) + &g2.row(r);
                        acc.row_mut(i).assign(&updated);
                    }
                    acc.into_dyn()
                }) as GradFn,
            )],
        )
    }

    /// Element at flat index `i` as a scalar node.
    pub fn index(&mut self, a: NodeId, i: usize) -> NodeId {
        let shape: Vec<usize> = self.value(a).shape().to_vec();
        let flat: Vec<f64> = self.value(a).iter().cloned().collect();
        assert!(i < flat.len());
        let v = ndarray::arr0(flat[i]).into_dyn();
        self.push(
            v,
            vec![(
                a,
                Box::new(move |g: &ArrayD<f64>| {
                    let mut out = ArrayD::zeros(IxDyn(&shape));
                    *out.iter_mut().nth(i).unwrap() = *g.iter().next().unwrap();
                    out
                }) as GradFn,
            )],
        )
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = as1(self.value(a)).to_owned();
        let bv = as1(self.value(b)).to_owned();
        let v = ndarray::arr0(av.dot(&bv)).into_dyn();
        let av2 = av.clone();
        self.push(
            v,
            vec![
                (
                    a,
                    Box::new(move |g: &ArrayD<f64>| (&bv * *g.iter().next().unwrap()).into_dyn())
                        as GradFn,
                ),
                (b, Box::new(move |g: &ArrayD<f64>| (&av2 * *g.iter().next().unwrap()).into_dyn())),
            ],
        )
    }

    /// Copy of `base` with every row in `span` replaced by the 1-d node `v`.
    /// Gradients reaching replaced rows accumulate into `v`; `base` is data,
    /// not a node, so nothing flows into it.
    pub fn inject_rows(
        &mut self,
        base: &ndarray::Array2<f64>,
        v: NodeId,
        span: std::ops::Range<usize>,
    ) -> NodeId {
        assert!(span.end <= base.nrows(), "span beyond sequence length");
        let row = as1(self.value(v)).to_owned();
        assert_eq!(row.len(), base.ncols(), "embedding width mismatch");
        let mut out = base.clone();
        for i in span.clone() {
            out.row_mut(i).assign(&row);
        }
        let span2 = span.clone();
        self.push(
            out.into_dyn(),
            vec![(
                v,
                Box::new(move |g: &ArrayD<f64>| {
                    let g2 = as2(g);
                    let mut acc = ndarray::Array1::<f64>::zeros(g2.ncols());
                    for i in span2.clone() {
                        acc = acc + g2.row(i);
                    }
                    acc.into_dyn()
                }) as GradFn,
            )],
        )
    }

    // ---- backward -------------------------------------------------------------

    /// Gradients of the scalar node `root` with respect to every node.
    pub fn backward(&self, root: NodeId) -> Gradients {
        assert_eq!(
            self.nodes[root.0].value.len(),
            1,
            "backward root must be scalar"
        );
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(ArrayD::from_elem(
            self.nodes[root.0].value.raw_dim(),
            1.0,
        ));
        for i in (0..=root.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            for (parent, f) in &self.nodes[i].edges {
                let contrib = f(&g);
                match &mut grads[parent.0] {
                    Some(acc) => *acc = &*acc + &contrib,
                    slot => *slot = Some(contrib),
                }
            }
            grads[i] = Some(g);
        }
        Gradients { grads }
    }
}
