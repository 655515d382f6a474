//! Eager tape: every operation computes its value immediately and records
//! how to build the vector-Jacobian product of each parent from tape ops.

use ndarray::{concatenate, Array2, Array4, ArrayD, Axis, Ix2, Ix3, Ix4, IxDyn};

use super::conv;

/// Element type the tape is generic over. Training runs in `f32`; gradient
/// verification against finite differences runs in `f64`.
pub trait Scalar:
    ndarray::NdFloat + ndarray::LinalgScalar + Send + Sync + std::iter::Sum<Self>
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Clone)]
enum Op<F: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, F),
    AddScalar(Var),
    Recip(Var),
    Sqrt(Var),
    Exp(Var),
    Ln(Var),
    Tanh(Var),
    LeakyRelu(Var, F),
    Abs(Var),
    MatMul(Var, Var),
    Transpose2(Var),
    BatchMatMul(Var, Var),
    BatchTranspose(Var),
    Conv2d {
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
    },
    ConvInputGrad {
        g: Var,
        w: Var,
        stride: usize,
        pad: usize,
    },
    ConvWeightGrad {
        x: Var,
        g: Var,
        stride: usize,
        pad: usize,
    },
    ChanBroadcast(Var),
    SumNhw(Var),
    SumHw(Var),
    BroadcastHw(Var),
    SumRows(Var),
    BroadcastRow(Var),
    SumPerSample(Var),
    BroadcastPerSample(Var),
    SumAll(Var),
    BroadcastAll(Var),
    SelectClasses {
        a: Var,
        idx: std::rc::Rc<Vec<usize>>,
    },
    ScatterClasses {
        a: Var,
        idx: std::rc::Rc<Vec<usize>>,
    },
    ConcatChan(Var, Var),
    SliceChan {
        a: Var,
        from: usize,
        to: usize,
    },
    Reshape(Var),
}

struct Node<F: Scalar> {
    value: ArrayD<F>,
    op: Op<F>,
}

/// Eager computation tape. Nodes are append-only; a node's parents always
/// have smaller indices, which makes reverse sweeps a single pass.
pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: ArrayD<F>, op: Op<F>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Register an input/parameter/constant node.
    pub fn leaf(&mut self, value: ArrayD<F>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Copy a node's current value into a fresh leaf, cutting gradient flow.
    pub fn detach(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.clone();
        self.leaf(v)
    }

    pub fn value(&self, a: Var) -> &ArrayD<F> {
        &self.nodes[a.0].value
    }

    /// Value of a single-element node.
    pub fn scalar_value(&self, a: Var) -> F {
        let v = &self.nodes[a.0].value;
        debug_assert_eq!(v.len(), 1, "scalar_value on non-scalar node");
        *v.iter().next().expect("non-empty")
    }

    pub fn shape(&self, a: Var) -> &[usize] {
        self.nodes[a.0].value.shape()
    }

    // ---- elementwise -------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        debug_assert_eq!(self.shape(a), self.shape(b), "add shapes");
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        debug_assert_eq!(self.shape(a), self.shape(b), "sub shapes");
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        debug_assert_eq!(self.shape(a), self.shape(b), "mul shapes");
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(v, Op::Mul(a, b))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| -x);
        self.push(v, Op::Neg(a))
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: F) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x + c);
        self.push(v, Op::AddScalar(a))
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| F::one() / x);
        self.push(v, Op::Recip(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.sqrt());
        self.push(v, Op::Sqrt(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.exp());
        self.push(v, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.ln());
        self.push(v, Op::Ln(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.tanh());
        self.push(v, Op::Tanh(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: F) -> Var {
        let v = self.nodes[a.0]
            .value
            .mapv(|x| if x > F::zero() { x } else { x * slope });
        self.push(v, Op::LeakyRelu(a, slope))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.leaky_relu(a, F::zero())
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.abs());
        self.push(v, Op::Abs(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a)
    }

    // ---- linear algebra ----------------------------------------------

    /// 2-D matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = self.nodes[a.0]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("matmul lhs 2-d");
        let bv = self.nodes[b.0]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("matmul rhs 2-d");
        assert_eq!(av.ncols(), bv.nrows(), "matmul inner dims");
        let mut out = Array2::<F>::zeros((av.nrows(), bv.ncols()));
        ndarray::linalg::general_mat_mul(F::one(), &av, &bv, F::zero(), &mut out);
        self.push(out.into_dyn(), Op::MatMul(a, b))
    }

    pub fn transpose2(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("transpose2 2-d")
            .t()
            .to_owned();
        self.push(v.into_dyn(), Op::Transpose2(a))
    }

    /// Batched matrix product: (N,P,D) x (N,D,Q) -> (N,P,Q).
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Var {
        let av = self.nodes[a.0]
            .value
            .view()
            .into_dimensionality::<Ix3>()
            .expect("bmm lhs 3-d");
        let bv = self.nodes[b.0]
            .value
            .view()
            .into_dimensionality::<Ix3>()
            .expect("bmm rhs 3-d");
        let (n, p, d) = av.dim();
        let (n2, d2, q) = bv.dim();
        assert_eq!(n, n2, "bmm batch");
        assert_eq!(d, d2, "bmm inner dims");
        let mut out = ndarray::Array3::<F>::zeros((n, p, q));
        for i in 0..n {
            let ai = av.index_axis(Axis(0), i);
            let bi = bv.index_axis(Axis(0), i);
            let mut oi = out.index_axis_mut(Axis(0), i);
            ndarray::linalg::general_mat_mul(F::one(), &ai, &bi, F::zero(), &mut oi);
        }
        self.push(out.into_dyn(), Op::BatchMatMul(a, b))
    }

    pub fn batch_transpose(&mut self, a: Var) -> Var {
        let av = self.nodes[a.0]
            .value
            .view()
            .into_dimensionality::<Ix3>()
            .expect("batch_transpose 3-d");
        let v = av.permuted_axes([0, 2, 1]).to_owned();
        self.push(v.into_dyn(), Op::BatchTranspose(a))
    }

    // ---- convolution --------------------------------------------------

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let xv = self.view4(x, "conv2d input");
        let wv = self.view4(w, "conv2d weight");
        let out = conv::conv2d(&xv, &wv, stride, pad);
        self.push(out.into_dyn(), Op::Conv2d { x, w, stride, pad })
    }

    /// Transposed convolution / adjoint of [`Tape::conv2d`] in its first
    /// argument. `out_hw` resolves the output-size ambiguity.
    pub fn conv2d_input_grad(
        &mut self,
        g: Var,
        w: Var,
        stride: usize,
        pad: usize,
        out_hw: (usize, usize),
    ) -> Var {
        let gv = self.view4(g, "conv2d_input_grad input");
        let wv = self.view4(w, "conv2d_input_grad weight");
        let out = conv::conv2d_input_grad(&gv, &wv, stride, pad, out_hw);
        self.push(out.into_dyn(), Op::ConvInputGrad { g, w, stride, pad })
    }

    pub fn conv2d_weight_grad(
        &mut self,
        x: Var,
        g: Var,
        stride: usize,
        pad: usize,
        khw: (usize, usize),
    ) -> Var {
        let xv = self.view4(x, "conv2d_weight_grad input");
        let gv = self.view4(g, "conv2d_weight_grad grad");
        let out = conv::conv2d_weight_grad(&xv, &gv, stride, pad, khw);
        self.push(out.into_dyn(), Op::ConvWeightGrad { x, g, stride, pad })
    }

    fn view4(&self, a: Var, what: &str) -> ndarray::ArrayView4<'_, F> {
        self.nodes[a.0]
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .unwrap_or_else(|_| panic!("{what}: expected 4-d tensor"))
    }

    // ---- broadcasts and reductions -------------------------------------

    /// (C) -> (N,C,H,W), replicating per channel.
    pub fn chan_broadcast(&mut self, b: Var, like: [usize; 4]) -> Var {
        let bv = &self.nodes[b.0].value;
        assert_eq!(bv.len(), like[1], "chan_broadcast channel count");
        let mut out = Array4::<F>::zeros((like[0], like[1], like[2], like[3]));
        let bs = bv.as_slice().expect("contiguous");
        for mut sample in out.outer_iter_mut() {
            for (c, mut plane) in sample.outer_iter_mut().enumerate() {
                plane.fill(bs[c]);
            }
        }
        self.push(out.into_dyn(), Op::ChanBroadcast(b))
    }

    /// (N,C,H,W) -> (C): sum over batch and spatial dims.
    pub fn sum_nhw(&mut self, a: Var) -> Var {
        let av = self.view4(a, "sum_nhw");
        let c = av.dim().1;
        let mut out = ndarray::Array1::<F>::zeros(c);
        for sample in av.outer_iter() {
            for (ci, plane) in sample.outer_iter().enumerate() {
                out[ci] = out[ci] + plane.sum();
            }
        }
        self.push(out.into_dyn(), Op::SumNhw(a))
    }

    /// (N,C,H,W) -> (N,C): sum over spatial dims.
    pub fn sum_hw(&mut self, a: Var) -> Var {
        let av = self.view4(a, "sum_hw");
        let (n, c, _, _) = av.dim();
        let mut out = Array2::<F>::zeros((n, c));
        for (ni, sample) in av.outer_iter().enumerate() {
            for (ci, plane) in sample.outer_iter().enumerate() {
                out[[ni, ci]] = plane.sum();
            }
        }
        self.push(out.into_dyn(), Op::SumHw(a))
    }

    /// (N,C) -> (N,C,H,W).
    pub fn broadcast_hw(&mut self, a: Var, hw: (usize, usize)) -> Var {
        let av = self.nodes[a.0]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("broadcast_hw 2-d");
        let (n, c) = av.dim();
        let mut out = Array4::<F>::zeros((n, c, hw.0, hw.1));
        for (ni, mut sample) in out.outer_iter_mut().enumerate() {
            for (ci, mut plane) in sample.outer_iter_mut().enumerate() {
                plane.fill(av[[ni, ci]]);
            }
        }
        self.push(out.into_dyn(), Op::BroadcastHw(a))
    }

    /// (N,K) -> (N): sum along rows.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let av = self.nodes[a.0]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("sum_rows 2-d");
        let out = av.sum_axis(Axis(1));
        self.push(out.into_dyn(), Op::SumRows(a))
    }

    /// (N) -> (N,K).
    pub fn broadcast_row(&mut self, a: Var, k: usize) -> Var {
        let av = &self.nodes[a.0].value;
        let n = av.len();
        let mut out = Array2::<F>::zeros((n, k));
        let asl = av.as_slice().expect("contiguous");
        for (i, mut row) in out.outer_iter_mut().enumerate() {
            row.fill(asl[i]);
        }
        self.push(out.into_dyn(), Op::BroadcastRow(a))
    }

    /// (N, ...) -> (N): sum everything per leading index.
    pub fn sum_per_sample(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let n = av.shape()[0];
        let flat = av
            .view()
            .into_shape_with_order((n, av.len() / n))
            .expect("contiguous");
        let out = flat.sum_axis(Axis(1));
        self.push(out.into_dyn(), Op::SumPerSample(a))
    }

    /// (N) -> arbitrary shape with leading dim N.
    pub fn broadcast_per_sample(&mut self, a: Var, shape: &[usize]) -> Var {
        let av = &self.nodes[a.0].value;
        let n = av.len();
        assert_eq!(shape[0], n, "broadcast_per_sample leading dim");
        let per: usize = shape[1..].iter().product();
        let asl = av.as_slice().expect("contiguous");
        let mut data = Vec::with_capacity(n * per);
        for &v in asl {
            data.extend(std::iter::repeat(v).take(per));
        }
        let out = ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape consistent");
        self.push(out, Op::BroadcastPerSample(a))
    }

    /// Any shape -> scalar (0-d).
    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: F = self.nodes[a.0].value.iter().copied().sum();
        let out = ArrayD::from_elem(IxDyn(&[]), s);
        self.push(out, Op::SumAll(a))
    }

    /// 0-d scalar -> arbitrary shape.
    pub fn broadcast_all(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self.scalar_value(a);
        let out = ArrayD::from_elem(IxDyn(shape), v);
        self.push(out, Op::BroadcastAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len();
        let s = self.sum_all(a);
        self.scale(s, F::from_f64(1.0 / n as f64))
    }

    /// (N,K), indices -> (N): out[i] = a[i, idx[i]].
    pub fn select_classes(&mut self, a: Var, idx: &[usize]) -> Var {
        let av = self.nodes[a.0]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("select_classes 2-d");
        let (n, k) = av.dim();
        assert_eq!(n, idx.len(), "select_classes index count");
        assert!(idx.iter().all(|&j| j < k), "select_classes index range");
        let out = ndarray::Array1::from_iter(idx.iter().enumerate().map(|(i, &j)| av[[i, j]]));
        self.push(
            out.into_dyn(),
            Op::SelectClasses {
                a,
                idx: std::rc::Rc::new(idx.to_vec()),
            },
        )
    }

    /// (N), indices -> (N,K): scatter values into one-hot positions.
    pub fn scatter_classes(&mut self, a: Var, idx: &[usize], k: usize) -> Var {
        let av = &self.nodes[a.0].value;
        let n = av.len();
        assert_eq!(n, idx.len(), "scatter_classes index count");
        let asl = av.as_slice().expect("contiguous");
        let mut out = Array2::<F>::zeros((n, k));
        for i in 0..n {
            out[[i, idx[i]]] = asl[i];
        }
        self.push(
            out.into_dyn(),
            Op::ScatterClasses {
                a,
                idx: std::rc::Rc::new(idx.to_vec()),
            },
        )
    }

    /// Concatenate along the channel axis of NCHW tensors.
    pub fn concat_chan(&mut self, a: Var, b: Var) -> Var {
        let av = self.view4(a, "concat_chan lhs");
        let bv = self.view4(b, "concat_chan rhs");
        let out = concatenate(Axis(1), &[av, bv]).expect("concat_chan shapes");
        self.push(out.into_dyn(), Op::ConcatChan(a, b))
    }

    /// Select a channel range of an NCHW tensor.
    pub fn slice_chan(&mut self, a: Var, from: usize, to: usize) -> Var {
        let av = self.view4(a, "slice_chan");
        let out = av.slice(ndarray::s![.., from..to, .., ..]).to_owned();
        self.push(out.into_dyn(), Op::SliceChan { a, from, to })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self.nodes[a.0]
            .value
            .view()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: incompatible size")
            .to_owned();
        self.push(v, Op::Reshape(a))
    }

    // ---- differentiation -----------------------------------------------

    /// Reverse-mode gradients of a scalar `output` with respect to `wrt`.
    ///
    /// The returned vars live on this tape, so they can be differentiated
    /// again (everything the backward pass does is itself tape ops).
    pub fn grad(&mut self, output: Var, wrt: &[Var]) -> Vec<Var> {
        assert_eq!(
            self.nodes[output.0].value.len(),
            1,
            "grad: output must be scalar"
        );
        let n = output.0 + 1;

        // A node matters only if some path leads down to a wrt leaf.
        let mut relevant = vec![false; n];
        for w in wrt {
            assert!(w.0 < n, "grad: wrt created after output");
            relevant[w.0] = true;
        }
        for id in 0..n {
            if !relevant[id] {
                relevant[id] = self.parents(id).iter().any(|p| relevant[p.0]);
            }
        }

        let mut cot: Vec<Option<Var>> = vec![None; n];
        let one = ArrayD::from_elem(self.nodes[output.0].value.raw_dim(), F::one());
        cot[output.0] = Some(self.leaf(one));

        for id in (0..n).rev() {
            if !relevant[id] {
                continue;
            }
            let Some(g) = cot[id] else { continue };
            let op = self.nodes[id].op.clone();
            let out_var = Var(id);
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    self.accumulate(&mut cot, &relevant, a, g);
                    self.accumulate(&mut cot, &relevant, b, g);
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut cot, &relevant, a, g);
                    if relevant[b.0] {
                        let nb = self.neg(g);
                        self.accumulate(&mut cot, &relevant, b, nb);
                    }
                }
                Op::Mul(a, b) => {
                    if relevant[a.0] {
                        let c = self.mul(g, b);
                        self.accumulate(&mut cot, &relevant, a, c);
                    }
                    if relevant[b.0] {
                        let c = self.mul(g, a);
                        self.accumulate(&mut cot, &relevant, b, c);
                    }
                }
                Op::Neg(a) => {
                    if relevant[a.0] {
                        let c = self.neg(g);
                        self.accumulate(&mut cot, &relevant, a, c);
                    }
                }
                Op::Scale(a, s) => {
                    if relevant[a.0] {
                        let c = self.scale(g, s);
                        self.accumulate(&mut cot, &relevant, a, c);
                    }
                }
                Op::AddScalar(a) => {
                    self.accumulate(&mut cot, &relevant, a, g);
                }
                Op::Recip(a) => {
                    if relevant[a.0] {
                        let o2 = self.mul(out_var, out_var);
                        let go2 = self.mul(g, o2);
                        let c = self.neg(go2);
                        self.accumulate(&mut cot, &relevant, a, c);
                    }
                }
                Op::Sqrt(a) => {
                    if relevant[a.0] {
                        let inv = self.recip(out_var);
                        let gi = self.mul(g, inv);
                        let c = self.scale(gi, F::from_f64(0.5));
                        self.accumulate(&mut cot, &relevant, a, c);
                    }
                }
                Op::Exp(a) => {
                    if relevant[a.0] {
                        let c = self.mul(g, out_var);
                        self.accumulate(&mut cot, &relevant, a, c);
                    }
                }
                Op::Ln(a) => {
                    if relevant[a.0] {
                        let inv = self.recip(a);
                        let c = self.mul(g, inv);
                        self.accumulate(&mut cot, &relevant, a, c);
                    }
                }
                Op::Tanh(a) => {
                    if relevant[a.0] {
                        let o2 = self.mul(out_var, out_var);
                        let go2 = self.mul(g, o2);
                        let c = self.sub(g, go2);
                        self.accumulate(&mut cot, &relevant, a, c);
                    }
                }
                Op::LeakyRelu(a, slope) => {
                    if relevant[a.0] {
                        // The derivative mask is piecewise constant, so it
                        // enters the graph as a constant leaf.
                        let mask = self.nodes[a.0]
                            .value
                            .mapv(|x| if x > F::zero() { F::one() } else { slope });
                        let m = self.leaf(mask);
                        let c = self.mul(g, m);
                        self.accumulate(&mut cot, &relevant, a, c);
                    }
                }
                Op::Abs(a) => {
                    if relevant[a.0] {
                        let sign = self.nodes[a.0].value.mapv(|x| {
                            if x > F::zero() {
                                F::one()
                            } else if x < F::zero() {
                                -F::one()
                            } else {
                                F::zero()
                            }
                        });
                        let m = self.leaf(sign);
                        let c = self.mul(g, m);
                        self.accumulate(&mut cot, &relevant, a, c);
                    }
                }
                Op::MatMul(a, b) => {
                    if relevant[a.0] {
                        let bt = self.transpose2(b);
                        let c = self.matmul(g, bt);
                        self.accumulate(&mut cot, &relevant, a, c);
                    }
                    if relevant[b.0] {
                        let at = self.transpose2(a);
                        let c = self.matmul(at, g);
                        self.accumulate(&mut cot, &relevant, b, c);
                    }
                }
                Op::Transpose2(a) => {
                    if relevant[a.0] {
                        let c = self.transpose2(g);
                        self.accumulate(&mut cot, &relevant, a, c);
                    }
                }
                Op::BatchMatMul(a, b) => {
                    if relevant[a.0] {
                        let bt = self.batch_transpose(b);
                        let c = self.batch_matmul(g, bt);
                        self.accumulate(&mut cot, &relevant, a, c);
                    }
                    if relevant[b.0] {
                        let at = self.batch_transpose(a);
                        let c = self.batch_matmul(at, g);
                        self.accumulate(&mut cot, &relevant, b, c);
                    }
                }
                Op::BatchTranspose(a) => {
                    if relevant[a.0] {
                        let c = self.batch_transpose(g);
                        self.accumulate(&mut cot, &relevant, a, c);
                    }
                }
                Op::Conv2d { x, w, stride, pad } => {
                    if relevant[x.0] {
                        let hw = (self.shape(x)[2], self.shape(x)[3]);
                        let c = self.conv2d_input_grad(g, w, stride, pad, hw);
                        self.accumulate(&mut cot, &relevant, x, c);
                    }
                    if relevant[w.0] {
                        let khw = (self.shape(w)[2], self.shape(w)[3]);
                        let c = self.conv2d_weight_grad(x, g, stride, pad, khw);
                        self.accumulate(&mut cot, &relevant, w, c);
                    }
                }
                Op::ConvInputGrad { g: g0, w, stride, pad } => {
                    if relevant[g0.0] {
                        let c = self.conv2d(g, w, stride, pad);
                        self.accumulate(&mut cot, &relevant, g0, c);
                    }
                    if relevant[w.0] {
                        let khw = (self.shape(w)[2], self.shape(w)[3]);
                        let c = self.conv2d_weight_grad(g, g0, stride, pad, khw);
                        self.accumulate(&mut cot, &relevant, w, c);
                    }
                }
                Op::ConvWeightGrad { x, g: g0, stride, pad } => {
                    if relevant[x.0] {
                        let hw = (self.shape(x)[2], self.shape(x)[3]);
                        let c = self.conv2d_input_grad(g0, g, stride, pad, hw);
                        self.accumulate(&mut cot, &relevant, x, c);
                    }
                    if relevant[g0.0] {
                        let c = self.conv2d(x, g, stride, pad);
                        self.accumulate(&mut cot, &relevant, g0, c);
                    }
                }
                Op::ChanBroadcast(b) => {
                    if relevant[b.0] {
                        let c = self.sum_nhw(g);
                        self.accumulate(&mut cot, &relevant, b, c);
                    }
                }
                Op::SumNhw(a) => {
                    if relevant[a.0] {
                        let like = {
                            let s = self.shape(a);
                            [s[0], s[1], s[2], s[3]]
                        };
                        let c = self.chan_broadcast(g, like);
                        self.accumulate(&mut cot, &relevant, a, c);
                    }
                }
                Op::SumHw(a) => {
                    if relevant[a.0] {
                        let hw = (self.shape(a)[2], self.shape(a)[3]);
                        let c = self.broadcast_hw(g, hw);
                        self.accumulate(&mut cot, &relevant, a, c);
                    }
                }
                Op::BroadcastHw(a) => {
                    if relevant[a.0] {
                        let c = self.sum_hw(g);
                        self.accumulate(&mut cot, &relevant, a, c);
                    }
                }
                Op::SumRows(a) => {
                    if relevant[a.0] {
                        let k = self.shape(a)[1];
                        let c = self.broadcast_row(g, k);
                        self.accumulate(&mut cot, &relevant, a, c);
                    }
                }
                Op::BroadcastRow(a) => {
                    if relevant[a.0] {
                        let c = self.sum_rows(g);
                        self.accumulate(&mut cot, &relevant, a, c);
                    }
                }
                Op::SumPerSample(a) => {
                    if relevant[a.0] {
                        let shape = self.shape(a).to_vec();
                        let c = self.broadcast_per_sample(g, &shape);
                        self.accumulate(&mut cot, &relevant, a, c);
                    }
                }
                Op::BroadcastPerSample(a) => {
                    if relevant[a.0] {
                        let c = self.sum_per_sample(g);
                        self.accumulate(&mut cot, &relevant, a, c);
                    }
                }
                Op::SumAll(a) => {
                    if relevant[a.0] {
                        let shape = self.shape(a).to_vec();
                        let c = self.broadcast_all(g, &shape);
                        self.accumulate(&mut cot, &relevant, a, c);
                    }
                }
                Op::BroadcastAll(a) => {
                    if relevant[a.0] {
                        let c = self.sum_all(g);
                        self.accumulate(&mut cot, &relevant, a, c);
                    }
                }
                Op::SelectClasses { a, idx } => {
                    if relevant[a.0] {
                        let k = self.shape(a)[1];
                        let c = self.scatter_classes(g, &idx, k);
                        self.accumulate(&mut cot, &relevant, a, c);
                    }
                }
                Op::ScatterClasses { a, idx } => {
                    if relevant[a.0] {
                        let c = self.select_classes(g, &idx);
                        self.accumulate(&mut cot, &relevant, a, c);
                    }
                }
                Op::ConcatChan(a, b) => {
                    let ca = self.shape(a)[1];
                    let cb = self.shape(b)[1];
                    if relevant[a.0] {
                        let c = self.slice_chan(g, 0, ca);
                        self.accumulate(&mut cot, &relevant, a, c);
                    }
                    if relevant[b.0] {
                        let c = self.slice_chan(g, ca, ca + cb);
                        self.accumulate(&mut cot, &relevant, b, c);
                    }
                }
                Op::SliceChan { a, from, to } => {
                    if relevant[a.0] {
                        let (n, c_all, h, w) = {
                            let s = self.shape(a);
                            (s[0], s[1], s[2], s[3])
                        };
                        let mut parts: Vec<Var> = Vec::with_capacity(3);
                        if from > 0 {
                            let z = ArrayD::zeros(IxDyn(&[n, from, h, w]));
                            parts.push(self.leaf(z));
                        }
                        parts.push(g);
                        if to < c_all {
                            let z = ArrayD::zeros(IxDyn(&[n, c_all - to, h, w]));
                            parts.push(self.leaf(z));
                        }
                        let mut acc = parts[0];
                        for p in &parts[1..] {
                            acc = self.concat_chan(acc, *p);
                        }
                        self.accumulate(&mut cot, &relevant, a, acc);
                    }
                }
                Op::Reshape(a) => {
                    if relevant[a.0] {
                        let shape = self.shape(a).to_vec();
                        let c = self.reshape(g, &shape);
                        self.accumulate(&mut cot, &relevant, a, c);
                    }
                }
            }
        }

        wrt.iter()
            .map(|w| match cot[w.0] {
                Some(v) => v,
                None => {
                    let z = ArrayD::zeros(self.nodes[w.0].value.raw_dim());
                    self.leaf(z)
                }
            })
            .collect()
    }

    fn accumulate(&mut self, cot: &mut [Option<Var>], relevant: &[bool], p: Var, c: Var) {
        if !relevant[p.0] {
            return;
        }
        cot[p.0] = Some(match cot[p.0] {
            Some(existing) => self.add(existing, c),
            None => c,
        });
    }

    fn parents(&self, id: usize) -> Vec<Var> {
        match &self.nodes[id].op {
            Op::Leaf => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::MatMul(a, b)
            | Op::BatchMatMul(a, b)
            | Op::ConcatChan(a, b) => vec![*a, *b],
            Op::Conv2d { x: a, w: b, .. }
            | Op::ConvInputGrad { g: a, w: b, .. }
            | Op::ConvWeightGrad { x: a, g: b, .. } => vec![*a, *b],
            Op::Neg(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Recip(a)
            | Op::Sqrt(a)
            | Op::Exp(a)
            | Op::Ln(a)
            | Op::Tanh(a)
            | Op::LeakyRelu(a, _)
            | Op::Abs(a)
            | Op::Transpose2(a)
            | Op::BatchTranspose(a)
            | Op::ChanBroadcast(a)
            | Op::SumNhw(a)
            | Op::SumHw(a)
            | Op::BroadcastHw(a)
            | Op::SumRows(a)
            | Op::BroadcastRow(a)
            | Op::SumPerSample(a)
            | Op::BroadcastPerSample(a)
            | Op::SumAll(a)
            | Op::BroadcastAll(a)
            | Op::SelectClasses { a, .. }
            | Op::ScatterClasses { a, .. }
            | Op::SliceChan { a, .. }
            | Op::Reshape(a) => vec![*a],
        }
    }
}
