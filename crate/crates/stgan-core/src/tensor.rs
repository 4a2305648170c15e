//! Reverse-mode automatic differentiation over a flat tape of `f64` matrices.
//!
//! Every value is an `Array2<f64>`; scalars are 1×1. Sequence batches are
//! stacked row-blocks of a fixed height, and the `Bmm*` / `Block*` ops act
//! per block so attention and recurrent layers batch without 3-D tensors.
//!
//! [`Tape::backward`] appends the gradient computation to the tape as ordinary
//! nodes, which makes gradients differentiable in turn. The critic's gradient
//! penalty needs exactly that: its loss contains `∇_x D(x)`, and the optimizer
//! differentiates through it a second time.

use std::rc::Rc;

use ndarray::{s, Array2};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(usize);

#[derive(Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    MatMulTN(Var, Var),
    Affine(Var, Var, Var),
    Transpose(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Sqrt(Var),
    Recip(Var),
    SumAll(Var),
    SumRows(Var),
    SumCols(Var),
    BcastRow(Var),
    BcastCol(Var),
    BcastScalar(Var),
    Softmax(Var),
    ConcatCols(Rc<Vec<Var>>),
    SliceCols(Var, usize, usize),
    PadCols(Var, usize),
    ConcatRows(Rc<Vec<Var>>),
    SliceRows(Var, usize, usize),
    PadRows(Var, usize),
    BlockShiftDown(Var, usize, usize),
    BlockShiftUp(Var, usize, usize),
    BmmNT(Var, Var, usize),
    BmmNN(Var, Var, usize),
    BmmTN(Var, Var, usize),
    BlockSumRows(Var, usize),
    BlockRepeatRows(Var, usize),
    GraphMix {
        x: Var,
        mats: Rc<Vec<Array2<f64>>>,
        transposed: bool,
    },
    WindowSum(Var, WindowDims),
    WindowBcast(Var, WindowDims),
    Gather(Var, Rc<Vec<usize>>),
    ScatterAdd(Var, Rc<Vec<usize>>, usize, usize),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normed: Rc<Array2<f64>>,
        inv_sd: Rc<Array2<f64>>,
    },
}

/// Row layout of a step-major window stack: `steps` blocks, each holding
/// `windows` sub-blocks of `rows_per_window` rows.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct WindowDims {
    pub steps: usize,
    pub windows: usize,
    pub rows_per_window: usize,
}

impl WindowDims {
    pub fn total_rows(&self) -> usize {
        self.steps * self.windows * self.rows_per_window
    }
}

struct Node {
    value: Array2<f64>,
    grad: bool,
    op: Op,
}

/// Append-only computation graph with eager evaluation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        // Training tapes churn through megabyte-sized buffers; keep them on
        // the reusable heap instead of per-allocation mmap.
        #[cfg(target_env = "gnu")]
        {
            static ALLOC_TUNE: std::sync::Once = std::sync::Once::new();
            ALLOC_TUNE.call_once(|| unsafe {
                libc::mallopt(libc::M_MMAP_THRESHOLD, 256 * 1024 * 1024);
            });
        }
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value of a node. The reference is valid until the next node is pushed.
    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].grad
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        assert_eq!(val.dim(), (1, 1), "scalar() on non-scalar node");
        val[(0, 0)]
    }

    fn push(&mut self, value: Array2<f64>, grad: bool, op: Op) -> Var {
        self.nodes.push(Node { value, grad, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Array2<f64>, grad: bool) -> Var {
        self.push(value, grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar_leaf(&mut self, x: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), x))
    }

    /// Detached copy: same value, no gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.leaf(value, false)
    }

    fn grad2(&self, a: Var, b: Var) -> bool {
        self.nodes[a.0].grad || self.nodes[b.0].grad
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "add shape");
        let v = self.value(a) + self.value(b);
        self.push(v, self.grad2(a, b), Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "sub shape");
        let v = self.value(a) - self.value(b);
        self.push(v, self.grad2(a, b), Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "mul shape");
        let v = self.value(a) * self.value(b);
        self.push(v, self.grad2(a, b), Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "div shape");
        let v = self.value(a) / self.value(b);
        self.push(v, self.grad2(a, b), Op::Div(a, b))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| -x);
        self.push(v, self.nodes[a.0].grad, Op::Neg(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).mapv(|x| c * x);
        self.push(v, self.nodes[a.0].grad, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).mapv(|x| x + c);
        self.push(v, self.nodes[a.0].grad, Op::AddScalar(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(
            self.value(a).ncols(),
            self.value(b).nrows(),
            "matmul inner dim"
        );
        let v = self.value(a).dot(self.value(b));
        self.push(v, self.grad2(a, b), Op::MatMul(a, b))
    }

    /// `A·Bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (am, ak) = self.value(a).dim();
        let (bm, bk) = self.value(b).dim();
        assert_eq!(ak, bk, "matmul_nt inner dim");
        let mut v = Array2::zeros((am, bm));
        ndarray::linalg::general_mat_mul(1.0, self.value(a), &self.value(b).t(), 0.0, &mut v);
        self.push(v, self.grad2(a, b), Op::MatMulNT(a, b))
    }

    /// `Aᵀ·B` without materializing the transpose.
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Var {
        let (am, ak) = self.value(a).dim();
        let (bm, bp) = self.value(b).dim();
        assert_eq!(am, bm, "matmul_tn inner dim");
        let mut v = Array2::zeros((ak, bp));
        ndarray::linalg::general_mat_mul(1.0, &self.value(a).t(), self.value(b), 0.0, &mut v);
        self.push(v, self.grad2(a, b), Op::MatMulTN(a, b))
    }

    /// `X·W + bias` with the 1×c bias broadcast over rows, in one node.
    pub fn affine(&mut self, x: Var, w: Var, bias: Var) -> Var {
        assert_eq!(self.value(x).ncols(), self.value(w).nrows(), "affine dims");
        assert_eq!(
            self.value(bias).dim(),
            (1, self.value(w).ncols()),
            "affine bias shape"
        );
        let mut v = self.value(x).dot(self.value(w));
        let b = self.value(bias).row(0).to_owned();
        for mut row in v.outer_iter_mut() {
            row += &b;
        }
        let grad = self.grad2(x, w) || self.nodes[bias.0].grad;
        self.push(v, grad, Op::Affine(x, w, bias))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        self.push(v, self.nodes[a.0].grad, Op::Transpose(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, self.nodes[a.0].grad, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(v, self.nodes[a.0].grad, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        self.push(v, self.nodes[a.0].grad, Op::Tanh(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::sqrt);
        self.push(v, self.nodes[a.0].grad, Op::Sqrt(a))
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| 1.0 / x);
        self.push(v, self.nodes[a.0].grad, Op::Recip(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(v, self.nodes[a.0].grad, Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum over rows: r×c → 1×c.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let v = self
            .value(a)
            .sum_axis(ndarray::Axis(0))
            .insert_axis(ndarray::Axis(0));
        self.push(v, self.nodes[a.0].grad, Op::SumRows(a))
    }

    /// Sum over columns: r×c → r×1.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let v = self
            .value(a)
            .sum_axis(ndarray::Axis(1))
            .insert_axis(ndarray::Axis(1));
        self.push(v, self.nodes[a.0].grad, Op::SumCols(a))
    }

    /// Tile a 1×c row to r×c.
    pub fn bcast_row(&mut self, a: Var, rows: usize) -> Var {
        assert_eq!(self.value(a).nrows(), 1, "bcast_row input must be 1×c");
        let v = self
            .value(a)
            .broadcast((rows, self.value(a).ncols()))
            .unwrap()
            .to_owned();
        self.push(v, self.nodes[a.0].grad, Op::BcastRow(a))
    }

    /// Tile an r×1 column to r×c.
    pub fn bcast_col(&mut self, a: Var, cols: usize) -> Var {
        assert_eq!(self.value(a).ncols(), 1, "bcast_col input must be r×1");
        let rows = self.value(a).nrows();
        let v = self
            .value(a)
            .broadcast((rows, cols))
            .expect("column broadcast")
            .to_owned();
        self.push(v, self.nodes[a.0].grad, Op::BcastCol(a))
    }

    /// Tile a 1×1 scalar to r×c.
    pub fn bcast_scalar(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let v = Array2::from_elem((rows, cols), self.scalar(a));
        self.push(v, self.nodes[a.0].grad, Op::BcastScalar(a))
    }

    /// Row-wise softmax with max-subtraction stabilization.
    pub fn softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut v = x.clone();
        for mut row in v.outer_iter_mut() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|e| (e - m).exp());
            let s = row.sum();
            row.mapv_inplace(|e| e / s);
        }
        self.push(v, self.nodes[a.0].grad, Op::Softmax(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).nrows();
        let cols: usize = parts.iter().map(|&p| self.value(p).ncols()).sum();
        let mut v = Array2::zeros((rows, cols));
        let mut off = 0;
        let mut grad = false;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.nrows(), rows, "concat_cols row mismatch");
            v.slice_mut(s![.., off..off + pv.ncols()]).assign(pv);
            off += pv.ncols();
            grad |= self.nodes[p.0].grad;
        }
        self.push(v, grad, Op::ConcatCols(Rc::new(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push(v, self.nodes[a.0].grad, Op::SliceCols(a, start, len))
    }

    pub fn pad_cols(&mut self, a: Var, before: usize, after: usize) -> Var {
        let (r, c) = self.value(a).dim();
        let mut v = Array2::zeros((r, before + c + after));
        v.slice_mut(s![.., before..before + c]).assign(self.value(a));
        self.push(v, self.nodes[a.0].grad, Op::PadCols(a, before))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).ncols();
        let rows: usize = parts.iter().map(|&p| self.value(p).nrows()).sum();
        let mut v = Array2::zeros((rows, cols));
        let mut off = 0;
        let mut grad = false;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.ncols(), cols, "concat_rows col mismatch");
            v.slice_mut(s![off..off + pv.nrows(), ..]).assign(pv);
            off += pv.nrows();
            grad |= self.nodes[p.0].grad;
        }
        self.push(v, grad, Op::ConcatRows(Rc::new(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![start..start + len, ..]).to_owned();
        self.push(v, self.nodes[a.0].grad, Op::SliceRows(a, start, len))
    }

    pub fn pad_rows(&mut self, a: Var, before: usize, after: usize) -> Var {
        let (r, c) = self.value(a).dim();
        let mut v = Array2::zeros((before + r + after, c));
        v.slice_mut(s![before..before + r, ..]).assign(self.value(a));
        self.push(v, self.nodes[a.0].grad, Op::PadRows(a, before))
    }

    /// Within each row-block of height `block`, shift rows down by `offset`
    /// and zero-fill the vacated leading rows.
    pub fn block_shift_down(&mut self, a: Var, block: usize, offset: usize) -> Var {
        let v = shift_blocks(self.value(a), block, offset, true);
        self.push(
            v,
            self.nodes[a.0].grad,
            Op::BlockShiftDown(a, block, offset),
        )
    }

    /// Adjoint of [`Tape::block_shift_down`].
    pub fn block_shift_up(&mut self, a: Var, block: usize, offset: usize) -> Var {
        let v = shift_blocks(self.value(a), block, offset, false);
        self.push(v, self.nodes[a.0].grad, Op::BlockShiftUp(a, block, offset))
    }

    /// Per row-block product `A_s · B_sᵀ`; blocks of `a` and `b` are block×k.
    pub fn bmm_nt(&mut self, a: Var, b: Var, block: usize) -> Var {
        let v = bmm(self.value(a), self.value(b), block, BmmKind::NT);
        self.push(v, self.grad2(a, b), Op::BmmNT(a, b, block))
    }

    /// Per row-block product `A_s · B_s`; blocks of `a` are block×block.
    pub fn bmm_nn(&mut self, a: Var, b: Var, block: usize) -> Var {
        let v = bmm(self.value(a), self.value(b), block, BmmKind::NN);
        self.push(v, self.grad2(a, b), Op::BmmNN(a, b, block))
    }

    /// Per row-block product `A_sᵀ · B_s`; blocks of `a` are block×block.
    pub fn bmm_tn(&mut self, a: Var, b: Var, block: usize) -> Var {
        let v = bmm(self.value(a), self.value(b), block, BmmKind::TN);
        self.push(v, self.grad2(a, b), Op::BmmTN(a, b, block))
    }

    /// Sum rows within each block: (S·block)×d → S×d.
    pub fn block_sum_rows(&mut self, a: Var, block: usize) -> Var {
        let x = self.value(a);
        assert_eq!(x.nrows() % block, 0, "block_sum_rows row count");
        let blocks = x.nrows() / block;
        let mut v = Array2::zeros((blocks, x.ncols()));
        for i in 0..blocks {
            let blk = x.slice(s![i * block..(i + 1) * block, ..]);
            v.row_mut(i).assign(&blk.sum_axis(ndarray::Axis(0)));
        }
        self.push(v, self.nodes[a.0].grad, Op::BlockSumRows(a, block))
    }

    /// Repeat each row `block` times: S×d → (S·block)×d.
    pub fn block_repeat_rows(&mut self, a: Var, block: usize) -> Var {
        let x = self.value(a);
        let mut v = Array2::zeros((x.nrows() * block, x.ncols()));
        for i in 0..x.nrows() {
            for j in 0..block {
                v.row_mut(i * block + j).assign(&x.row(i));
            }
        }
        self.push(v, self.nodes[a.0].grad, Op::BlockRepeatRows(a, block))
    }

    /// Mean of rows within each block: (S·block)×d → S×d.
    pub fn block_mean_rows(&mut self, a: Var, block: usize) -> Var {
        let s = self.block_sum_rows(a, block);
        self.scale(s, 1.0 / block as f64)
    }

    /// Left-multiply each row-block by the matching adjacency matrix.
    ///
    /// `x` is a step-major stack of blocks of height `mats[0].nrows()`; block
    /// `j` is multiplied by `mats[j % mats.len()]`, so a per-window matrix is
    /// reused across all steps of that window.
    pub fn graph_mix(&mut self, x: Var, mats: Rc<Vec<Array2<f64>>>) -> Var {
        let v = graph_mix_value(self.value(x), &mats, false);
        self.push(
            v,
            self.nodes[x.0].grad,
            Op::GraphMix {
                x,
                mats,
                transposed: false,
            },
        )
    }

    /// Sum every row of each window across all steps: (steps·windows·rpw)×c → windows×c.
    pub fn window_sum(&mut self, a: Var, dims: WindowDims) -> Var {
        let x = self.value(a);
        assert_eq!(x.nrows(), dims.total_rows(), "window_sum rows");
        let mut v = Array2::zeros((dims.windows, x.ncols()));
        for t in 0..dims.steps {
            for w in 0..dims.windows {
                let base = (t * dims.windows + w) * dims.rows_per_window;
                for i in 0..dims.rows_per_window {
                    for c in 0..x.ncols() {
                        v[(w, c)] += x[(base + i, c)];
                    }
                }
            }
        }
        self.push(v, self.nodes[a.0].grad, Op::WindowSum(a, dims))
    }

    /// Adjoint of [`Tape::window_sum`]: windows×c → (steps·windows·rpw)×c.
    pub fn window_bcast(&mut self, a: Var, dims: WindowDims) -> Var {
        let x = self.value(a);
        assert_eq!(x.nrows(), dims.windows, "window_bcast rows");
        let mut v = Array2::zeros((dims.total_rows(), x.ncols()));
        for t in 0..dims.steps {
            for w in 0..dims.windows {
                let base = (t * dims.windows + w) * dims.rows_per_window;
                for i in 0..dims.rows_per_window {
                    for c in 0..x.ncols() {
                        v[(base + i, c)] = x[(w, c)];
                    }
                }
            }
        }
        self.push(v, self.nodes[a.0].grad, Op::WindowBcast(a, dims))
    }

    /// Rearrange elements: `out.flat[k] = in.flat[idx[k]]` with row-major
    /// flattening; `shape` is the output shape. Used to move values between
    /// the step-major window layout and the per-sequence block layout.
    pub fn gather(&mut self, a: Var, idx: Rc<Vec<usize>>, shape: (usize, usize)) -> Var {
        let x = self.value(a);
        assert_eq!(idx.len(), shape.0 * shape.1, "gather index count");
        let flat: Vec<f64> = {
            let xs = x.as_standard_layout();
            let sl = xs.as_slice().expect("standard layout");
            idx.iter().map(|&i| sl[i]).collect()
        };
        let v = Array2::from_shape_vec(shape, flat).expect("gather reshape");
        self.push(v, self.nodes[a.0].grad, Op::Gather(a, idx))
    }

    /// Adjoint of [`Tape::gather`]: `out.flat[idx[k]] += in.flat[k]`.
    pub fn scatter_add(
        &mut self,
        a: Var,
        idx: Rc<Vec<usize>>,
        shape: (usize, usize),
    ) -> Var {
        let x = self.value(a);
        assert_eq!(idx.len(), x.len(), "scatter index count");
        let mut flat = vec![0.0; shape.0 * shape.1];
        {
            let xs = x.as_standard_layout();
            let sl = xs.as_slice().expect("standard layout");
            for (k, &i) in idx.iter().enumerate() {
                flat[i] += sl[k];
            }
        }
        let v = Array2::from_shape_vec(shape, flat).expect("scatter reshape");
        let (r, c) = self.value(a).dim();
        self.push(v, self.nodes[a.0].grad, Op::ScatterAdd(a, idx, r, c))
    }

    /// Row-wise layer normalization with affine rescale, as one fused node.
    /// Returns `(output, pre-affine normed rows)`.
    ///
    /// The backward pass uses the standard closed-form first-order gradient
    /// with the row statistics treated as cached constants, so this op must
    /// not appear inside graphs that are differentiated twice (the critic
    /// path uses no normalization).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> (Var, Rc<Array2<f64>>) {
        let (rows, d) = self.value(x).dim();
        assert_eq!(self.value(gamma).dim(), (1, d), "layer_norm gamma shape");
        assert_eq!(self.value(beta).dim(), (1, d), "layer_norm beta shape");
        let mut normed = Array2::zeros((rows, d));
        let mut inv_sd = Array2::zeros((rows, 1));
        let mut out = Array2::zeros((rows, d));
        {
            let xv = self.value(x);
            let gv = self.value(gamma);
            let bv = self.value(beta);
            for r in 0..rows {
                let row = xv.row(r);
                let mean = row.sum() / d as f64;
                let mut var = 0.0;
                for &v in row.iter() {
                    var += (v - mean) * (v - mean);
                }
                var /= d as f64;
                let inv = 1.0 / (var + eps).sqrt();
                inv_sd[(r, 0)] = inv;
                for c in 0..d {
                    let nv = (xv[(r, c)] - mean) * inv;
                    normed[(r, c)] = nv;
                    out[(r, c)] = nv * gv[(0, c)] + bv[(0, c)];
                }
            }
        }
        let normed = Rc::new(normed);
        let inv_sd = Rc::new(inv_sd);
        let grad =
            self.grad2(x, gamma) || self.nodes[beta.0].grad;
        let node = self.push(
            out,
            grad,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normed: Rc::clone(&normed),
                inv_sd: Rc::clone(&inv_sd),
            },
        );
        (node, normed)
    }

    /// Mean squared error between two same-shape nodes, as a 1×1 scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        self.mean_all(sq)
    }

    /// True if every element of the node is finite.
    pub fn is_finite(&self, v: Var) -> bool {
        self.value(v).iter().all(|x| x.is_finite())
    }

    /// Reverse-mode sweep from scalar `root`. Gradients are appended to the
    /// tape as new nodes, so they can be differentiated again. Returns one
    /// gradient per entry of `wrt` (a zero node when no path exists).
    pub fn backward(&mut self, root: Var, wrt: &[Var]) -> Vec<Var> {
        assert_eq!(self.value(root).dim(), (1, 1), "backward root must be 1×1");
        let limit = root.0 + 1;
        let mut adj: Vec<Option<Var>> = vec![None; limit];
        adj[root.0] = Some(self.leaf(Array2::ones((1, 1)), false));

        for i in (0..limit).rev() {
            let g = match adj[i] {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[i].grad {
                continue;
            }
            let op = self.nodes[i].op.clone();
            self.propagate(Var(i), op, g, &mut adj);
        }

        wrt.iter()
            .map(|&v| match adj.get(v.0).copied().flatten() {
                Some(g) => g,
                None => {
                    let z = Array2::zeros(self.value(v).dim());
                    self.leaf(z, false)
                }
            })
            .collect()
    }

    fn accumulate(&mut self, adj: &mut [Option<Var>], target: Var, contrib: Var) {
        if !self.nodes[target.0].grad {
            return;
        }
        adj[target.0] = Some(match adj[target.0] {
            Some(existing) => self.add(existing, contrib),
            None => contrib,
        });
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].grad
    }

    fn propagate(&mut self, node: Var, op: Op, g: Var, adj: &mut [Option<Var>]) {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(adj, a, g);
                self.accumulate(adj, b, g);
            }
            Op::Sub(a, b) => {
                self.accumulate(adj, a, g);
                if self.wants(b) {
                    let n = self.neg(g);
                    self.accumulate(adj, b, n);
                }
            }
            Op::Mul(a, b) => {
                if self.wants(a) {
                    let da = self.mul(g, b);
                    self.accumulate(adj, a, da);
                }
                if self.wants(b) {
                    let db = self.mul(g, a);
                    self.accumulate(adj, b, db);
                }
            }
            Op::Div(a, b) => {
                if self.wants(a) {
                    let da = self.div(g, b);
                    self.accumulate(adj, a, da);
                }
                if self.wants(b) {
                    let gy = self.mul(g, node);
                    let gyb = self.div(gy, b);
                    let db = self.neg(gyb);
                    self.accumulate(adj, b, db);
                }
            }
            Op::Neg(a) => {
                let n = self.neg(g);
                self.accumulate(adj, a, n);
            }
            Op::Scale(a, c) => {
                let sg = self.scale(g, c);
                self.accumulate(adj, a, sg);
            }
            Op::AddScalar(a) => self.accumulate(adj, a, g),
            Op::MatMul(a, b) => {
                if self.wants(a) {
                    let da = self.matmul_nt(g, b);
                    self.accumulate(adj, a, da);
                }
                if self.wants(b) {
                    let db = self.matmul_tn(a, g);
                    self.accumulate(adj, b, db);
                }
            }
            Op::MatMulNT(a, b) => {
                if self.wants(a) {
                    let da = self.matmul(g, b);
                    self.accumulate(adj, a, da);
                }
                if self.wants(b) {
                    let db = self.matmul_tn(g, a);
                    self.accumulate(adj, b, db);
                }
            }
            Op::MatMulTN(a, b) => {
                if self.wants(a) {
                    let da = self.matmul_nt(b, g);
                    self.accumulate(adj, a, da);
                }
                if self.wants(b) {
                    let db = self.matmul(a, g);
                    self.accumulate(adj, b, db);
                }
            }
            Op::Affine(x, w, bias) => {
                if self.wants(x) {
                    let dx = self.matmul_nt(g, w);
                    self.accumulate(adj, x, dx);
                }
                if self.wants(w) {
                    let dw = self.matmul_tn(x, g);
                    self.accumulate(adj, w, dw);
                }
                if self.wants(bias) {
                    let db = self.sum_rows(g);
                    self.accumulate(adj, bias, db);
                }
            }
            Op::Transpose(a) => {
                let gt = self.transpose(g);
                self.accumulate(adj, a, gt);
            }
            Op::Relu(a) => {
                // Subgradient: mask is constant, zero at x ≤ 0.
                let mask = self.value(a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                let m = self.constant(mask);
                let da = self.mul(g, m);
                self.accumulate(adj, a, da);
            }
            Op::Sigmoid(a) => {
                let one_minus = self.add_scalar_neg(node);
                let yy = self.mul(node, one_minus);
                let da = self.mul(g, yy);
                self.accumulate(adj, a, da);
            }
            Op::Tanh(a) => {
                let y2 = self.mul(node, node);
                let neg_y2 = self.neg(y2);
                let one_minus = self.add_scalar(neg_y2, 1.0);
                let da = self.mul(g, one_minus);
                self.accumulate(adj, a, da);
            }
            Op::Sqrt(a) => {
                let inv = self.recip(node);
                let half = self.scale(inv, 0.5);
                let da = self.mul(g, half);
                self.accumulate(adj, a, da);
            }
            Op::Recip(a) => {
                let y2 = self.mul(node, node);
                let gy = self.mul(g, y2);
                let da = self.neg(gy);
                self.accumulate(adj, a, da);
            }
            Op::SumAll(a) => {
                let (r, c) = self.value(a).dim();
                let da = self.bcast_scalar(g, r, c);
                self.accumulate(adj, a, da);
            }
            Op::SumRows(a) => {
                let rows = self.value(a).nrows();
                let da = self.bcast_row(g, rows);
                self.accumulate(adj, a, da);
            }
            Op::SumCols(a) => {
                let cols = self.value(a).ncols();
                let da = self.bcast_col(g, cols);
                self.accumulate(adj, a, da);
            }
            Op::BcastRow(a) => {
                let da = self.sum_rows(g);
                self.accumulate(adj, a, da);
            }
            Op::BcastCol(a) => {
                let da = self.sum_cols(g);
                self.accumulate(adj, a, da);
            }
            Op::BcastScalar(a) => {
                let da = self.sum_all(g);
                self.accumulate(adj, a, da);
            }
            Op::Softmax(a) => {
                // dx = y ⊙ (g − rowsum(g ⊙ y))
                let gy = self.mul(g, node);
                let srow = self.sum_cols(gy);
                let cols = self.value(node).ncols();
                let sb = self.bcast_col(srow, cols);
                let centered = self.sub(g, sb);
                let da = self.mul(node, centered);
                self.accumulate(adj, a, da);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts.iter() {
                    let w = self.value(p).ncols();
                    if self.wants(p) {
                        let gp = self.slice_cols(g, off, w);
                        self.accumulate(adj, p, gp);
                    }
                    off += w;
                }
            }
            Op::SliceCols(a, start, len) => {
                let total = self.value(a).ncols();
                let da = self.pad_cols(g, start, total - start - len);
                self.accumulate(adj, a, da);
            }
            Op::PadCols(a, before) => {
                let len = self.value(a).ncols();
                let da = self.slice_cols(g, before, len);
                self.accumulate(adj, a, da);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts.iter() {
                    let h = self.value(p).nrows();
                    if self.wants(p) {
                        let gp = self.slice_rows(g, off, h);
                        self.accumulate(adj, p, gp);
                    }
                    off += h;
                }
            }
            Op::SliceRows(a, start, len) => {
                let total = self.value(a).nrows();
                let da = self.pad_rows(g, start, total - start - len);
                self.accumulate(adj, a, da);
            }
            Op::PadRows(a, before) => {
                let len = self.value(a).nrows();
                let da = self.slice_rows(g, before, len);
                self.accumulate(adj, a, da);
            }
            Op::BlockShiftDown(a, block, off) => {
                let da = self.block_shift_up(g, block, off);
                self.accumulate(adj, a, da);
            }
            Op::BlockShiftUp(a, block, off) => {
                let da = self.block_shift_down(g, block, off);
                self.accumulate(adj, a, da);
            }
            Op::BmmNT(a, b, blk) => {
                if self.wants(a) {
                    let da = self.bmm_nn(g, b, blk);
                    self.accumulate(adj, a, da);
                }
                if self.wants(b) {
                    let db = self.bmm_tn(g, a, blk);
                    self.accumulate(adj, b, db);
                }
            }
            Op::BmmNN(a, b, blk) => {
                if self.wants(a) {
                    let da = self.bmm_nt(g, b, blk);
                    self.accumulate(adj, a, da);
                }
                if self.wants(b) {
                    let db = self.bmm_tn(a, g, blk);
                    self.accumulate(adj, b, db);
                }
            }
            Op::BmmTN(a, b, blk) => {
                if self.wants(a) {
                    let da = self.bmm_nt(b, g, blk);
                    self.accumulate(adj, a, da);
                }
                if self.wants(b) {
                    let db = self.bmm_nn(a, g, blk);
                    self.accumulate(adj, b, db);
                }
            }
            Op::BlockSumRows(a, block) => {
                let da = self.block_repeat_rows(g, block);
                self.accumulate(adj, a, da);
            }
            Op::BlockRepeatRows(a, block) => {
                let da = self.block_sum_rows(g, block);
                self.accumulate(adj, a, da);
            }
            Op::GraphMix {
                x,
                mats,
                transposed,
            } => {
                let v = graph_mix_value(self.value(g), &mats, !transposed);
                let dx = self.push(
                    v,
                    self.nodes[g.0].grad,
                    Op::GraphMix {
                        x: g,
                        mats,
                        transposed: !transposed,
                    },
                );
                self.accumulate(adj, x, dx);
            }
            Op::WindowSum(a, dims) => {
                let da = self.window_bcast(g, dims);
                self.accumulate(adj, a, da);
            }
            Op::WindowBcast(a, dims) => {
                let da = self.window_sum(g, dims);
                self.accumulate(adj, a, da);
            }
            Op::Gather(a, idx) => {
                let shape = self.value(a).dim();
                let da = self.scatter_add(g, idx, shape);
                self.accumulate(adj, a, da);
            }
            Op::ScatterAdd(a, idx, r, c) => {
                let da = self.gather(g, idx, (r, c));
                self.accumulate(adj, a, da);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normed,
                inv_sd,
            } => {
                let (rows, d) = self.value(g).dim();
                let normed_leaf = self.constant(normed.as_ref().clone());
                if self.wants(x) {
                    // dx = inv_sd ⊙ (gγ − mean(gγ) − x̂ ⊙ mean(gγ ⊙ x̂))
                    let gb = self.bcast_row(gamma, rows);
                    let ggamma = self.mul(g, gb);
                    let m1s = self.sum_cols(ggamma);
                    let m1 = self.scale(m1s, 1.0 / d as f64);
                    let gn = self.mul(ggamma, normed_leaf);
                    let m2s = self.sum_cols(gn);
                    let m2 = self.scale(m2s, 1.0 / d as f64);
                    let m1b = self.bcast_col(m1, d);
                    let m2b = self.bcast_col(m2, d);
                    let nm2 = self.mul(normed_leaf, m2b);
                    let centered = self.sub(ggamma, m1b);
                    let core = self.sub(centered, nm2);
                    let inv_leaf = self.constant(inv_sd.as_ref().clone());
                    let invb = self.bcast_col(inv_leaf, d);
                    let dx = self.mul(core, invb);
                    self.accumulate(adj, x, dx);
                }
                if self.wants(gamma) {
                    let gn = self.mul(g, normed_leaf);
                    let dgamma = self.sum_rows(gn);
                    self.accumulate(adj, gamma, dgamma);
                }
                if self.wants(beta) {
                    let dbeta = self.sum_rows(g);
                    self.accumulate(adj, beta, dbeta);
                }
            }
        }
    }

    // 1 − y, used by the sigmoid backward.
    fn add_scalar_neg(&mut self, y: Var) -> Var {
        let n = self.neg(y);
        self.add_scalar(n, 1.0)
    }
}

fn shift_blocks(x: &Array2<f64>, block: usize, offset: usize, down: bool) -> Array2<f64> {
    assert_eq!(x.nrows() % block, 0, "shift block size");
    assert!(offset <= block, "shift offset exceeds block");
    let blocks = x.nrows() / block;
    let mut v = Array2::zeros(x.dim());
    for b in 0..blocks {
        let base = b * block;
        for r in 0..block - offset {
            let (dst, src) = if down {
                (base + r + offset, base + r)
            } else {
                (base + r, base + r + offset)
            };
            v.row_mut(dst).assign(&x.row(src));
        }
    }
    v
}

enum BmmKind {
    NT,
    NN,
    TN,
}

fn bmm(a: &Array2<f64>, b: &Array2<f64>, block: usize, kind: BmmKind) -> Array2<f64> {
    assert_eq!(a.nrows() % block, 0, "bmm left rows");
    assert_eq!(b.nrows() % block, 0, "bmm right rows");
    let blocks = a.nrows() / block;
    assert_eq!(blocks, b.nrows() / block, "bmm block count");
    let out_cols = match kind {
        BmmKind::NT => block,
        BmmKind::NN | BmmKind::TN => b.ncols(),
    };
    let mut v = Array2::zeros((blocks * block, out_cols));
    for i in 0..blocks {
        let ab = a.slice(s![i * block..(i + 1) * block, ..]);
        let bb = b.slice(s![i * block..(i + 1) * block, ..]);
        let mut ob = v.slice_mut(s![i * block..(i + 1) * block, ..]);
        match kind {
            BmmKind::NT => {
                assert_eq!(ab.ncols(), bb.ncols(), "bmm_nt inner dim");
                ndarray::linalg::general_mat_mul(1.0, &ab, &bb.t(), 0.0, &mut ob);
            }
            BmmKind::NN => {
                assert_eq!(ab.ncols(), block, "bmm_nn left must be square blocks");
                ndarray::linalg::general_mat_mul(1.0, &ab, &bb, 0.0, &mut ob);
            }
            BmmKind::TN => {
                assert_eq!(ab.ncols(), block, "bmm_tn left must be square blocks");
                ndarray::linalg::general_mat_mul(1.0, &ab.t(), &bb, 0.0, &mut ob);
            }
        }
    }
    v
}

fn graph_mix_value(x: &Array2<f64>, mats: &[Array2<f64>], transposed: bool) -> Array2<f64> {
    assert!(!mats.is_empty(), "graph_mix needs matrices");
    let n = mats[0].nrows();
    assert_eq!(x.nrows() % n, 0, "graph_mix rows");
    let blocks = x.nrows() / n;
    let mut v = Array2::zeros(x.dim());
    for j in 0..blocks {
        let m = &mats[j % mats.len()];
        assert_eq!(m.dim(), (n, n), "graph_mix matrix must be N×N");
        let xb = x.slice(s![j * n..(j + 1) * n, ..]);
        let mut ob = v.slice_mut(s![j * n..(j + 1) * n, ..]);
        if transposed {
            ndarray::linalg::general_mat_mul(1.0, &m.t(), &xb, 0.0, &mut ob);
        } else {
            ndarray::linalg::general_mat_mul(1.0, m, &xb, 0.0, &mut ob);
        }
    }
    v
}
