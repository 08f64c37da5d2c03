//! Reverse-mode automatic differentiation on an eager tape.
//!
//! Every backward pass is emitted as new operations on the same graph, so
//! the result of [`Graph::backward`] is itself differentiable. This is what
//! lets the explanation objective differentiate through a saliency map that
//! is built from a gradient (GradCAM's channel weights), i.e. double
//! backpropagation.
//!
//! Values are computed eagerly at op-construction time and stored as
//! standard-layout [`ArrayD`]. The op set is deliberately small and closed
//! under differentiation: each op's vector-Jacobian product is expressed in
//! terms of other ops in the set (plus constants such as ReLU masks and
//! pooling indices, which carry no gradient, matching the almost-everywhere
//! derivative).

use std::rc::Rc;

use ndarray::{ArrayD, Ix1, Ix2, Ix4, IxDyn};

use crate::Scalar;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(usize);

/// Precomputed sparse interpolation table for bilinear resizing.
///
/// Each output pixel is a fixed convex combination of (up to) four input
/// pixels; `taps[4*p..4*p+4]` holds the flattened source index and weight
/// for output pixel `p`. Uses half-pixel centre alignment.
#[derive(Debug)]
pub struct BilinearMap {
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    taps: Vec<(u32, f64)>,
}

impl BilinearMap {
    pub fn new(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Self {
        let mut taps = Vec::with_capacity(out_h * out_w * 4);
        let sy = in_h as f64 / out_h as f64;
        let sx = in_w as f64 / out_w as f64;
        for oy in 0..out_h {
            let fy = ((oy as f64 + 0.5) * sy - 0.5).max(0.0).min(in_h as f64 - 1.0);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(in_h - 1);
            let wy = fy - y0 as f64;
            for ox in 0..out_w {
                let fx = ((ox as f64 + 0.5) * sx - 0.5).max(0.0).min(in_w as f64 - 1.0);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(in_w - 1);
                let wx = fx - x0 as f64;
                taps.push(((y0 * in_w + x0) as u32, (1.0 - wy) * (1.0 - wx)));
                taps.push(((y0 * in_w + x1) as u32, (1.0 - wy) * wx));
                taps.push(((y1 * in_w + x0) as u32, wy * (1.0 - wx)));
                taps.push(((y1 * in_w + x1) as u32, wy * wx));
            }
        }
        Self { in_h, in_w, out_h, out_w, taps }
    }
}

#[derive(Clone, Debug)]
enum Op<T: Scalar> {
    Leaf,
    /// Elementwise; both shapes equal.
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Exp(Var),
    Ln(Var),
    Relu(Var),
    ScalarMul(Var, T),
    /// `C = op(A) . op(B)` with optional transposes.
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    /// `[m,n] + [n]` broadcast over rows.
    AddBias2 { a: Var, bias: Var },
    Reshape(Var),
    Permute { a: Var, axes: Vec<usize> },
    /// `[B,C,H,W] -> [B*H*W, C*k*k]`, stride 1, zero padding.
    Im2Col { a: Var, k: usize, pad: usize },
    /// Adjoint of `Im2Col`: scatter-add columns back into an image.
    Col2Im { a: Var, k: usize, pad: usize, shape: [usize; 4] },
    /// 2x2 max pooling; `indices` are flat argmax positions in the input.
    MaxPool2 { a: Var, indices: Rc<Vec<u32>> },
    /// Scatter `[B,C,H/2,W/2]` values to saved positions in a zeroed `[B,C,H,W]`.
    PoolScatter { a: Var, indices: Rc<Vec<u32>>, shape: [usize; 4] },
    /// Gather at saved positions; adjoint of `PoolScatter`.
    PoolGather { a: Var, indices: Rc<Vec<u32>> },
    SumAll(Var),
    BroadcastScalar { a: Var, shape: Vec<usize> },
    /// `[m,n] -> [m,1]`.
    SumAxis1(Var),
    /// `[m,1] -> [m,n]`.
    BroadcastCols { a: Var, n: usize },
    /// `[m,n] -> [n]`.
    SumAxis0(Var),
    /// `[n] -> [m,n]`.
    BroadcastRows { a: Var, m: usize },
    /// `[B,C,H,W] -> [B,H,W]`.
    SumChannels(Var),
    /// `[B,H,W] -> [B,C,H,W]`.
    BroadcastChannels { a: Var, c: usize },
    /// `[B,C,H,W] -> [B,C]`.
    SumSpatial(Var),
    /// `[B,C] -> [B,C,H,W]`.
    BroadcastSpatial { a: Var, h: usize, w: usize },
    /// `[m,n] * [m,1]` broadcast over columns.
    MulCol { a: Var, b: Var },
    /// `[m,n] / [m,1]`.
    DivCol { a: Var, b: Var },
    /// `[m,n] - [m,1]`.
    SubCol { a: Var, b: Var },
    /// `[B,C,H,W] * [B,C]` per-channel scaling.
    MulChan { a: Var, s: Var },
    /// Row maxima `[m,n] -> [m,1]` with saved argmax columns.
    MaxAxis1 { a: Var, indices: Rc<Vec<u32>> },
    MinAxis1 { a: Var, indices: Rc<Vec<u32>> },
    /// `out[i,0] = a[i, indices[i]]`.
    GatherCols { a: Var, indices: Rc<Vec<u32>> },
    /// `out[i, indices[i]] = a[i,0]`, zero elsewhere.
    ScatterCols { a: Var, indices: Rc<Vec<u32>>, n: usize },
    /// Batched bilinear resize `[B,hi,wi] -> [B,ho,wo]`.
    Bilinear { a: Var, map: Rc<BilinearMap> },
    /// Adjoint resize `[B,ho,wo] -> [B,hi,wi]`.
    BilinearT { a: Var, map: Rc<BilinearMap> },
    AddN(Vec<Var>),
}

impl<T: Scalar> Op<T> {
    fn parents(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) => vec![*a, *b],
            Neg(a) | Exp(a) | Ln(a) | Relu(a) | ScalarMul(a, _) | Reshape(a) | SumAll(a)
            | SumAxis1(a) | SumAxis0(a) | SumChannels(a) | SumSpatial(a) => vec![*a],
            MatMul { a, b, .. } => vec![*a, *b],
            AddBias2 { a, bias } => vec![*a, *bias],
            Permute { a, .. }
            | Im2Col { a, .. }
            | Col2Im { a, .. }
            | MaxPool2 { a, .. }
            | PoolScatter { a, .. }
            | PoolGather { a, .. }
            | BroadcastScalar { a, .. }
            | BroadcastCols { a, .. }
            | BroadcastRows { a, .. }
            | BroadcastChannels { a, .. }
            | BroadcastSpatial { a, .. }
            | MaxAxis1 { a, .. }
            | MinAxis1 { a, .. }
            | GatherCols { a, .. }
            | ScatterCols { a, .. }
            | Bilinear { a, .. }
            | BilinearT { a, .. } => vec![*a],
            MulCol { a, b } | DivCol { a, b } | SubCol { a, b } => vec![*a, *b],
            MulChan { a, s } => vec![*a, *s],
            AddN(vs) => vs.clone(),
        }
    }
}

struct Node<T: Scalar> {
    value: ArrayD<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Eager computation tape.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn view2<T: Scalar>(a: &ArrayD<T>) -> ndarray::ArrayView2<'_, T> {
    a.view().into_dimensionality::<Ix2>().expect("rank-2 value")
}

fn view4<T: Scalar>(a: &ArrayD<T>) -> ndarray::ArrayView4<'_, T> {
    a.view().into_dimensionality::<Ix4>().expect("rank-4 value")
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::with_capacity(256) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &ArrayD<T> {
        &self.nodes[v.0].value
    }

    /// Extracts the value of a single-element node.
    pub fn scalar_value(&self, v: Var) -> T {
        let a = &self.nodes[v.0].value;
        assert_eq!(a.len(), 1, "scalar_value on non-scalar node");
        *a.iter().next().unwrap()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: ArrayD<T>, op: Op<T>) -> Var {
        debug_assert!(value.is_standard_layout(), "node values must be standard layout");
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Leaf with no gradient.
    pub fn constant(&mut self, value: ArrayD<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn constant_scalar(&mut self, value: T) -> Var {
        self.constant(ArrayD::from_elem(IxDyn(&[]), value))
    }

    /// Leaf that participates in gradients.
    pub fn parameter(&mut self, value: ArrayD<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        debug_assert_eq!(self.value(a).shape(), self.value(b).shape());
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        debug_assert_eq!(self.value(a).shape(), self.value(b).shape());
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        debug_assert_eq!(self.value(a).shape(), self.value(b).shape());
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(v, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        debug_assert_eq!(self.value(a).shape(), self.value(b).shape());
        let v = &self.nodes[a.0].value / &self.nodes[b.0].value;
        self.push(v, Op::Div(a, b))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| -x);
        self.push(v, Op::Neg(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.exp());
        self.push(v, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.ln());
        self.push(v, Op::Ln(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let z = T::zero();
        let v = self.nodes[a.0].value.mapv(|x| if x > z { x } else { z });
        self.push(v, Op::Relu(a))
    }

    pub fn scalar_mul(&mut self, a: Var, c: T) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x * c);
        self.push(v, Op::ScalarMul(a, c))
    }

    /// General matrix product with optional transposes on either operand.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let av = view2(&self.nodes[a.0].value);
        let bv = view2(&self.nodes[b.0].value);
        let am = if ta { av.t() } else { av };
        let bm = if tb { bv.t() } else { bv };
        assert_eq!(am.ncols(), bm.nrows(), "matmul inner dimensions");
        let v = am.dot(&bm);
        // dot of two transposed views yields a reverse-strided result
        let v = if v.is_standard_layout() { v } else { v.as_standard_layout().to_owned() };
        self.push(v.into_dyn(), Op::MatMul { a, b, ta, tb })
    }

    pub fn add_bias2(&mut self, a: Var, bias: Var) -> Var {
        let av = view2(&self.nodes[a.0].value);
        let bv = self.nodes[bias.0].value.view().into_dimensionality::<Ix1>().expect("bias rank 1");
        assert_eq!(av.ncols(), bv.len());
        let v = (&av + &bv).into_dyn();
        self.push(v, Op::AddBias2 { a, bias })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self.nodes[a.0]
            .value
            .clone()
            .into_shape(IxDyn(shape))
            .expect("reshape preserves element count");
        self.push(v, Op::Reshape(a))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Var {
        let v = self.nodes[a.0].value.clone().permuted_axes(IxDyn(axes));
        let v = v.as_standard_layout().to_owned();
        self.push(v, Op::Permute { a, axes: axes.to_vec() })
    }

    pub fn im2col(&mut self, a: Var, k: usize, pad: usize) -> Var {
        let v = im2col_value(&self.nodes[a.0].value, k, pad);
        self.push(v, Op::Im2Col { a, k, pad })
    }

    pub fn col2im(&mut self, a: Var, k: usize, pad: usize, shape: [usize; 4]) -> Var {
        let v = col2im_value(&self.nodes[a.0].value, k, pad, shape);
        self.push(v, Op::Col2Im { a, k, pad, shape })
    }

    pub fn maxpool2(&mut self, a: Var) -> Var {
        let (v, indices) = maxpool2_value(&self.nodes[a.0].value);
        self.push(v, Op::MaxPool2 { a, indices: Rc::new(indices) })
    }

    fn pool_scatter(&mut self, a: Var, indices: Rc<Vec<u32>>, shape: [usize; 4]) -> Var {
        let src = &self.nodes[a.0].value;
        let mut out = ArrayD::zeros(IxDyn(&shape));
        {
            let o = out.as_slice_mut().unwrap();
            for (x, &i) in src.iter().zip(indices.iter()) {
                o[i as usize] += *x;
            }
        }
        self.push(out, Op::PoolScatter { a, indices, shape })
    }

    fn pool_gather(&mut self, a: Var, indices: Rc<Vec<u32>>, out_shape: &[usize]) -> Var {
        let src = self.nodes[a.0].value.as_slice().expect("standard layout");
        let vals: Vec<T> = indices.iter().map(|&i| src[i as usize]).collect();
        let v = ArrayD::from_shape_vec(IxDyn(out_shape), vals).unwrap();
        self.push(v, Op::PoolGather { a, indices })
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = ArrayD::from_elem(IxDyn(&[]), self.nodes[a.0].value.sum());
        self.push(v, Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len();
        let s = self.sum_all(a);
        self.scalar_mul(s, T::one() / T::from_f64_lossy(n as f64))
    }

    fn broadcast_scalar(&mut self, a: Var, shape: Vec<usize>) -> Var {
        let c = self.scalar_value(a);
        let v = ArrayD::from_elem(IxDyn(&shape), c);
        self.push(v, Op::BroadcastScalar { a, shape })
    }

    pub fn sum_axis1(&mut self, a: Var) -> Var {
        let av = view2(&self.nodes[a.0].value);
        let m = av.nrows();
        let v = av.sum_axis(ndarray::Axis(1)).into_shape(IxDyn(&[m, 1])).unwrap();
        self.push(v, Op::SumAxis1(a))
    }

    fn broadcast_cols(&mut self, a: Var, n: usize) -> Var {
        let av = view2(&self.nodes[a.0].value);
        let m = av.nrows();
        let mut v = ArrayD::zeros(IxDyn(&[m, n]));
        {
            let mut vv = v.view_mut().into_dimensionality::<Ix2>().unwrap();
            for i in 0..m {
                let x = av[(i, 0)];
                vv.row_mut(i).fill(x);
            }
        }
        self.push(v, Op::BroadcastCols { a, n })
    }

    pub fn sum_axis0(&mut self, a: Var) -> Var {
        let av = view2(&self.nodes[a.0].value);
        let v = av.sum_axis(ndarray::Axis(0)).into_dyn();
        self.push(v, Op::SumAxis0(a))
    }

    fn broadcast_rows(&mut self, a: Var, m: usize) -> Var {
        let av = self.nodes[a.0].value.view().into_dimensionality::<Ix1>().unwrap();
        let n = av.len();
        let v = ndarray::Array2::from_shape_fn((m, n), |(_, j)| av[j]).into_dyn();
        self.push(v, Op::BroadcastRows { a, m })
    }

    pub fn sum_channels(&mut self, a: Var) -> Var {
        let av = view4(&self.nodes[a.0].value);
        let v = av.sum_axis(ndarray::Axis(1)).into_dyn();
        self.push(v, Op::SumChannels(a))
    }

    fn broadcast_channels(&mut self, a: Var, c: usize) -> Var {
        let av = &self.nodes[a.0].value;
        let (b, h, w) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        let s = av.as_slice().unwrap();
        let mut v = Vec::with_capacity(b * c * h * w);
        for bi in 0..b {
            let plane = &s[bi * h * w..(bi + 1) * h * w];
            for _ in 0..c {
                v.extend_from_slice(plane);
            }
        }
        let v = ArrayD::from_shape_vec(IxDyn(&[b, c, h, w]), v).unwrap();
        self.push(v, Op::BroadcastChannels { a, c })
    }

    pub fn sum_spatial(&mut self, a: Var) -> Var {
        let av = view4(&self.nodes[a.0].value);
        let v = av.sum_axis(ndarray::Axis(3)).sum_axis(ndarray::Axis(2)).into_dyn();
        self.push(v, Op::SumSpatial(a))
    }

    pub fn mean_spatial(&mut self, a: Var) -> Var {
        let sh = self.nodes[a.0].value.shape();
        let hw = sh[2] * sh[3];
        let s = self.sum_spatial(a);
        self.scalar_mul(s, T::one() / T::from_f64_lossy(hw as f64))
    }

    fn broadcast_spatial(&mut self, a: Var, h: usize, w: usize) -> Var {
        let av = view2(&self.nodes[a.0].value);
        let (b, c) = (av.nrows(), av.ncols());
        let mut v = Vec::with_capacity(b * c * h * w);
        for bi in 0..b {
            for ci in 0..c {
                let x = av[(bi, ci)];
                v.extend(std::iter::repeat(x).take(h * w));
            }
        }
        let v = ArrayD::from_shape_vec(IxDyn(&[b, c, h, w]), v).unwrap();
        self.push(v, Op::BroadcastSpatial { a, h, w })
    }

    pub fn mul_col(&mut self, a: Var, b: Var) -> Var {
        let v = col_broadcast_value(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x * y);
        self.push(v, Op::MulCol { a, b })
    }

    pub fn div_col(&mut self, a: Var, b: Var) -> Var {
        let v = col_broadcast_value(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x / y);
        self.push(v, Op::DivCol { a, b })
    }

    pub fn sub_col(&mut self, a: Var, b: Var) -> Var {
        let v = col_broadcast_value(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x - y);
        self.push(v, Op::SubCol { a, b })
    }

    pub fn mul_chan(&mut self, a: Var, s: Var) -> Var {
        let av = view4(&self.nodes[a.0].value);
        let sv = view2(&self.nodes[s.0].value);
        let (b, c, _, _) = av.dim();
        assert_eq!((b, c), sv.dim());
        let mut v = av.to_owned();
        for bi in 0..b {
            for ci in 0..c {
                let f = sv[(bi, ci)];
                v.slice_mut(ndarray::s![bi, ci, .., ..]).mapv_inplace(|x| x * f);
            }
        }
        self.push(v.into_dyn(), Op::MulChan { a, s })
    }

    pub fn max_axis1(&mut self, a: Var) -> Var {
        let (v, idx) = row_extreme_value(&self.nodes[a.0].value, true);
        self.push(v, Op::MaxAxis1 { a, indices: Rc::new(idx) })
    }

    pub fn min_axis1(&mut self, a: Var) -> Var {
        let (v, idx) = row_extreme_value(&self.nodes[a.0].value, false);
        self.push(v, Op::MinAxis1 { a, indices: Rc::new(idx) })
    }

    pub fn gather_cols(&mut self, a: Var, indices: &[u32]) -> Var {
        let av = view2(&self.nodes[a.0].value);
        assert_eq!(av.nrows(), indices.len());
        let m = av.nrows();
        let mut v = ndarray::Array2::zeros((m, 1));
        for i in 0..m {
            v[(i, 0)] = av[(i, indices[i] as usize)];
        }
        self.push(v.into_dyn(), Op::GatherCols { a, indices: Rc::new(indices.to_vec()) })
    }

    fn gather_cols_rc(&mut self, a: Var, indices: Rc<Vec<u32>>) -> Var {
        let av = view2(&self.nodes[a.0].value);
        let m = av.nrows();
        let mut v = ndarray::Array2::zeros((m, 1));
        for i in 0..m {
            v[(i, 0)] = av[(i, indices[i] as usize)];
        }
        self.push(v.into_dyn(), Op::GatherCols { a, indices })
    }

    fn scatter_cols(&mut self, a: Var, indices: Rc<Vec<u32>>, n: usize) -> Var {
        let av = view2(&self.nodes[a.0].value);
        let m = av.nrows();
        let mut v = ndarray::Array2::zeros((m, n));
        for i in 0..m {
            v[(i, indices[i] as usize)] = av[(i, 0)];
        }
        self.push(v.into_dyn(), Op::ScatterCols { a, indices, n })
    }

    pub fn bilinear(&mut self, a: Var, map: Rc<BilinearMap>) -> Var {
        let av = &self.nodes[a.0].value;
        let b = av.shape()[0];
        assert_eq!(&av.shape()[1..], &[map.in_h, map.in_w]);
        let src = av.as_slice().unwrap();
        let (ih, iw) = (map.in_h * map.in_w, map.out_h * map.out_w);
        let mut out = Vec::with_capacity(b * iw);
        for bi in 0..b {
            let plane = &src[bi * ih..(bi + 1) * ih];
            for p in 0..iw {
                let mut acc = T::zero();
                for &(si, wt) in &map.taps[4 * p..4 * p + 4] {
                    acc = acc + plane[si as usize] * T::from_f64_lossy(wt);
                }
                out.push(acc);
            }
        }
        let v = ArrayD::from_shape_vec(IxDyn(&[b, map.out_h, map.out_w]), out).unwrap();
        self.push(v, Op::Bilinear { a, map })
    }

    fn bilinear_t(&mut self, a: Var, map: Rc<BilinearMap>) -> Var {
        let av = &self.nodes[a.0].value;
        let b = av.shape()[0];
        let src = av.as_slice().unwrap();
        let (ih, ow) = (map.in_h * map.in_w, map.out_h * map.out_w);
        let mut out = vec![T::zero(); b * ih];
        for bi in 0..b {
            let plane = &src[bi * ow..(bi + 1) * ow];
            let dst = &mut out[bi * ih..(bi + 1) * ih];
            for p in 0..ow {
                let x = plane[p];
                for &(si, wt) in &map.taps[4 * p..4 * p + 4] {
                    dst[si as usize] += x * T::from_f64_lossy(wt);
                }
            }
        }
        let v = ArrayD::from_shape_vec(IxDyn(&[b, map.in_h, map.in_w]), out).unwrap();
        self.push(v, Op::BilinearT { a, map })
    }

    pub fn add_n(&mut self, vs: &[Var]) -> Var {
        assert!(!vs.is_empty());
        if vs.len() == 1 {
            return vs[0];
        }
        let mut acc = self.nodes[vs[0].0].value.clone();
        for v in &vs[1..] {
            acc = acc + &self.nodes[v.0].value;
        }
        self.push(acc, Op::AddN(vs.to_vec()))
    }

    /// Emits the vector-Jacobian product of `node` given its output cotangent,
    /// returning `(parent, contribution)` pairs for parents on an active path.
    fn emit_vjp(&mut self, node: Var, cot: Var, active: &[bool]) -> Vec<(Var, Var)> {
        let op = self.nodes[node.0].op.clone();
        let mut out = Vec::with_capacity(2);
        let needs = |_g: &Self, v: Var| active[v.0];
        use Op::*;
        match op {
            Leaf => {}
            Add(a, b) => {
                if needs(self, a) {
                    out.push((a, cot));
                }
                if needs(self, b) {
                    out.push((b, cot));
                }
            }
            Sub(a, b) => {
                if needs(self, a) {
                    out.push((a, cot));
                }
                if needs(self, b) {
                    let nb = self.neg(cot);
                    out.push((b, nb));
                }
            }
            Mul(a, b) => {
                if needs(self, a) {
                    let da = self.mul(cot, b);
                    out.push((a, da));
                }
                if needs(self, b) {
                    let db = self.mul(cot, a);
                    out.push((b, db));
                }
            }
            Div(a, b) => {
                if needs(self, a) {
                    let da = self.div(cot, b);
                    out.push((a, da));
                }
                if needs(self, b) {
                    // d/db (a/b) = -a/b^2 = -out/b
                    let t = self.mul(cot, node);
                    let t = self.div(t, b);
                    let db = self.neg(t);
                    out.push((b, db));
                }
            }
            Neg(a) => {
                if needs(self, a) {
                    let da = self.neg(cot);
                    out.push((a, da));
                }
            }
            Exp(a) => {
                if needs(self, a) {
                    let da = self.mul(cot, node);
                    out.push((a, da));
                }
            }
            Ln(a) => {
                if needs(self, a) {
                    let da = self.div(cot, a);
                    out.push((a, da));
                }
            }
            Relu(a) => {
                if needs(self, a) {
                    // Almost-everywhere derivative: constant 0/1 mask.
                    let z = T::zero();
                    let o = T::one();
                    let mask = self.nodes[a.0].value.mapv(|x| if x > z { o } else { z });
                    let mask = self.constant(mask);
                    let da = self.mul(cot, mask);
                    out.push((a, da));
                }
            }
            ScalarMul(a, c) => {
                if needs(self, a) {
                    let da = self.scalar_mul(cot, c);
                    out.push((a, da));
                }
            }
            MatMul { a, b, ta, tb } => {
                if needs(self, a) {
                    let da = match (ta, tb) {
                        (false, false) => self.matmul(cot, b, false, true),
                        (false, true) => self.matmul(cot, b, false, false),
                        (true, false) => self.matmul(b, cot, false, true),
                        (true, true) => self.matmul(b, cot, true, true),
                    };
                    out.push((a, da));
                }
                if needs(self, b) {
                    let db = match (ta, tb) {
                        (false, false) => self.matmul(a, cot, true, false),
                        (false, true) => self.matmul(cot, a, true, false),
                        (true, false) => self.matmul(a, cot, false, false),
                        (true, true) => self.matmul(cot, a, true, true),
                    };
                    out.push((b, db));
                }
            }
            AddBias2 { a, bias } => {
                if needs(self, a) {
                    out.push((a, cot));
                }
                if needs(self, bias) {
                    let db = self.sum_axis0(cot);
                    out.push((bias, db));
                }
            }
            Reshape(a) => {
                if needs(self, a) {
                    let shape = self.nodes[a.0].value.shape().to_vec();
                    let da = self.reshape(cot, &shape);
                    out.push((a, da));
                }
            }
            Permute { a, axes } => {
                if needs(self, a) {
                    let mut inv = vec![0usize; axes.len()];
                    for (i, &ax) in axes.iter().enumerate() {
                        inv[ax] = i;
                    }
                    let da = self.permute(cot, &inv);
                    out.push((a, da));
                }
            }
            Im2Col { a, k, pad } => {
                if needs(self, a) {
                    let shape: [usize; 4] =
                        self.nodes[a.0].value.shape().try_into().expect("rank 4");
                    let da = self.col2im(cot, k, pad, shape);
                    out.push((a, da));
                }
            }
            Col2Im { a, k, pad, .. } => {
                if needs(self, a) {
                    let da = self.im2col(cot, k, pad);
                    out.push((a, da));
                }
            }
            MaxPool2 { a, indices } => {
                if needs(self, a) {
                    let shape: [usize; 4] =
                        self.nodes[a.0].value.shape().try_into().expect("rank 4");
                    let da = self.pool_scatter(cot, indices, shape);
                    out.push((a, da));
                }
            }
            PoolScatter { a, indices, .. } => {
                if needs(self, a) {
                    let shape = self.nodes[a.0].value.shape().to_vec();
                    let da = self.pool_gather(cot, indices, &shape);
                    out.push((a, da));
                }
            }
            PoolGather { a, indices } => {
                if needs(self, a) {
                    let shape: [usize; 4] =
                        self.nodes[a.0].value.shape().try_into().expect("rank 4");
                    let da = self.pool_scatter(cot, indices, shape);
                    out.push((a, da));
                }
            }
            SumAll(a) => {
                if needs(self, a) {
                    let shape = self.nodes[a.0].value.shape().to_vec();
                    let da = self.broadcast_scalar(cot, shape);
                    out.push((a, da));
                }
            }
            BroadcastScalar { a, .. } => {
                if needs(self, a) {
                    let da = self.sum_all(cot);
                    out.push((a, da));
                }
            }
            SumAxis1(a) => {
                if needs(self, a) {
                    let n = self.nodes[a.0].value.shape()[1];
                    let da = self.broadcast_cols(cot, n);
                    out.push((a, da));
                }
            }
            BroadcastCols { a, .. } => {
                if needs(self, a) {
                    let da = self.sum_axis1(cot);
                    out.push((a, da));
                }
            }
            SumAxis0(a) => {
                if needs(self, a) {
                    let m = self.nodes[a.0].value.shape()[0];
                    let da = self.broadcast_rows(cot, m);
                    out.push((a, da));
                }
            }
            BroadcastRows { a, .. } => {
                if needs(self, a) {
                    let da = self.sum_axis0(cot);
                    out.push((a, da));
                }
            }
            SumChannels(a) => {
                if needs(self, a) {
                    let c = self.nodes[a.0].value.shape()[1];
                    let da = self.broadcast_channels(cot, c);
                    out.push((a, da));
                }
            }
            BroadcastChannels { a, .. } => {
                if needs(self, a) {
                    let da = self.sum_channels(cot);
                    out.push((a, da));
                }
            }
            SumSpatial(a) => {
                if needs(self, a) {
                    let sh = self.nodes[a.0].value.shape();
                    let (h, w) = (sh[2], sh[3]);
                    let da = self.broadcast_spatial(cot, h, w);
                    out.push((a, da));
                }
            }
            BroadcastSpatial { a, .. } => {
                if needs(self, a) {
                    let da = self.sum_spatial(cot);
                    out.push((a, da));
                }
            }
            MulCol { a, b } => {
                if needs(self, a) {
                    let da = self.mul_col(cot, b);
                    out.push((a, da));
                }
                if needs(self, b) {
                    let t = self.mul(cot, a);
                    let db = self.sum_axis1(t);
                    out.push((b, db));
                }
            }
            DivCol { a, b } => {
                if needs(self, a) {
                    let da = self.div_col(cot, b);
                    out.push((a, da));
                }
                if needs(self, b) {
                    // d/db (a/b) = -a/b^2 = -out/b per row
                    let t = self.mul(cot, node);
                    let t = self.sum_axis1(t);
                    let t = self.div(t, b);
                    let db = self.neg(t);
                    out.push((b, db));
                }
            }
            SubCol { a, b } => {
                if needs(self, a) {
                    out.push((a, cot));
                }
                if needs(self, b) {
                    let t = self.sum_axis1(cot);
                    let db = self.neg(t);
                    out.push((b, db));
                }
            }
            MulChan { a, s } => {
                if needs(self, a) {
                    let da = self.mul_chan(cot, s);
                    out.push((a, da));
                }
                if needs(self, s) {
                    let t = self.mul(cot, a);
                    let ds = self.sum_spatial(t);
                    out.push((s, ds));
                }
            }
            MaxAxis1 { a, indices } | MinAxis1 { a, indices } => {
                if needs(self, a) {
                    let n = self.nodes[a.0].value.shape()[1];
                    let da = self.scatter_cols(cot, indices, n);
                    out.push((a, da));
                }
            }
            GatherCols { a, indices } => {
                if needs(self, a) {
                    let n = self.nodes[a.0].value.shape()[1];
                    let da = self.scatter_cols(cot, indices, n);
                    out.push((a, da));
                }
            }
            ScatterCols { a, indices, .. } => {
                if needs(self, a) {
                    let da = self.gather_cols_rc(cot, indices);
                    out.push((a, da));
                }
            }
            Bilinear { a, map } => {
                if needs(self, a) {
                    let da = self.bilinear_t(cot, map);
                    out.push((a, da));
                }
            }
            BilinearT { a, map } => {
                if needs(self, a) {
                    let da = self.bilinear(cot, map);
                    out.push((a, da));
                }
            }
            AddN(vs) => {
                for v in vs {
                    if needs(self, v) {
                        out.push((v, cot));
                    }
                }
            }
        }
        out
    }

    /// Reverse-mode differentiation of a scalar `output` with respect to
    /// `wrt`. The returned cotangents are graph nodes, so they can feed
    /// further computation (and further `backward` calls).
    ///
    /// Only nodes on a path from a `wrt` node to the output are visited, so
    /// differentiating a class score with respect to an intermediate
    /// activation never descends below that activation. Entries are `None`
    /// for `wrt` nodes the output does not depend on.
    pub fn backward(&mut self, output: Var, wrt: &[Var]) -> Vec<Option<Var>> {
        assert_eq!(self.nodes[output.0].value.len(), 1, "backward needs a scalar output");
        let limit = output.0 + 1;
        let mut active = vec![false; limit];
        for v in wrt {
            if v.0 < limit {
                active[v.0] = true;
            }
        }
        for id in 0..limit {
            if !active[id] {
                active[id] = self.nodes[id].op.parents().iter().any(|p| active[p.0]);
            }
        }
        let mut pending: Vec<Vec<Var>> = vec![Vec::new(); limit];
        let mut settled: Vec<Option<Var>> = vec![None; limit];
        let seed = self.constant(ArrayD::from_elem(
            self.nodes[output.0].value.raw_dim(),
            T::one(),
        ));
        pending[output.0].push(seed);
        for id in (0..limit).rev() {
            if pending[id].is_empty() {
                continue;
            }
            let contributions = std::mem::take(&mut pending[id]);
            let cot = self.add_n(&contributions);
            settled[id] = Some(cot);
            for (parent, contrib) in self.emit_vjp(Var(id), cot, &active) {
                pending[parent.0].push(contrib);
            }
        }
        wrt.iter().map(|v| settled.get(v.0).copied().flatten()).collect()
    }
}

fn col_broadcast_value<T: Scalar>(
    a: &ArrayD<T>,
    b: &ArrayD<T>,
    f: impl Fn(T, T) -> T,
) -> ArrayD<T> {
    let av = view2(a);
    let bv = view2(b);
    let (m, n) = av.dim();
    assert_eq!(bv.dim(), (m, 1), "column operand must be [m,1]");
    let mut out = ndarray::Array2::zeros((m, n));
    for i in 0..m {
        let y = bv[(i, 0)];
        for j in 0..n {
            out[(i, j)] = f(av[(i, j)], y);
        }
    }
    out.into_dyn()
}

fn row_extreme_value<T: Scalar>(a: &ArrayD<T>, max: bool) -> (ArrayD<T>, Vec<u32>) {
    let av = view2(a);
    let (m, n) = av.dim();
    assert!(n > 0);
    let mut out = ndarray::Array2::zeros((m, 1));
    let mut idx = Vec::with_capacity(m);
    for i in 0..m {
        let mut best = av[(i, 0)];
        let mut bj = 0usize;
        for j in 1..n {
            let x = av[(i, j)];
            if (max && x > best) || (!max && x < best) {
                best = x;
                bj = j;
            }
        }
        out[(i, 0)] = best;
        idx.push(bj as u32);
    }
    (out.into_dyn(), idx)
}

fn im2col_value<T: Scalar>(a: &ArrayD<T>, k: usize, pad: usize) -> ArrayD<T> {
    let av = view4(a);
    let (b, c, h, w) = av.dim();
    let src = av.as_slice().expect("standard layout");
    let kk = k * k;
    let mut out = vec![T::zero(); b * h * w * c * kk];
    let row_len = c * kk;
    for bi in 0..b {
        for ci in 0..c {
            let plane = &src[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
            for di in 0..k {
                for dj in 0..k {
                    let col = ci * kk + di * k + dj;
                    for i in 0..h {
                        let si = (i + di) as isize - pad as isize;
                        if si < 0 || si >= h as isize {
                            continue;
                        }
                        let srow = &plane[si as usize * w..(si as usize + 1) * w];
                        let obase = (bi * h * w + i * w) * row_len + col;
                        for j in 0..w {
                            let sj = (j + dj) as isize - pad as isize;
                            if sj < 0 || sj >= w as isize {
                                continue;
                            }
                            out[obase + j * row_len] = srow[sj as usize];
                        }
                    }
                }
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[b * h * w, row_len]), out).unwrap()
}

fn col2im_value<T: Scalar>(a: &ArrayD<T>, k: usize, pad: usize, shape: [usize; 4]) -> ArrayD<T> {
    let av = view2(a);
    let [b, c, h, w] = shape;
    let kk = k * k;
    let row_len = c * kk;
    assert_eq!(av.dim(), (b * h * w, row_len));
    let src = av.as_slice().expect("standard layout");
    let mut out = vec![T::zero(); b * c * h * w];
    for bi in 0..b {
        for ci in 0..c {
            let plane = &mut out[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
            for di in 0..k {
                for dj in 0..k {
                    let col = ci * kk + di * k + dj;
                    for i in 0..h {
                        let si = (i + di) as isize - pad as isize;
                        if si < 0 || si >= h as isize {
                            continue;
                        }
                        let obase = (bi * h * w + i * w) * row_len + col;
                        for j in 0..w {
                            let sj = (j + dj) as isize - pad as isize;
                            if sj < 0 || sj >= w as isize {
                                continue;
                            }
                            plane[si as usize * w + sj as usize] += src[obase + j * row_len];
                        }
                    }
                }
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&shape), out).unwrap()
}

fn maxpool2_value<T: Scalar>(a: &ArrayD<T>) -> (ArrayD<T>, Vec<u32>) {
    let av = view4(a);
    let (b, c, h, w) = av.dim();
    assert!(h % 2 == 0 && w % 2 == 0, "maxpool2 needs even spatial dims");
    let src = av.as_slice().expect("standard layout");
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(b * c * oh * ow);
    let mut idx = Vec::with_capacity(b * c * oh * ow);
    for p in 0..b * c {
        let base = p * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let i0 = base + 2 * i * w + 2 * j;
                let cands = [i0, i0 + 1, i0 + w, i0 + w + 1];
                let mut best = src[cands[0]];
                let mut bi = cands[0];
                for &ci in &cands[1..] {
                    if src[ci] > best {
                        best = src[ci];
                        bi = ci;
                    }
                }
                out.push(best);
                idx.push(bi as u32);
            }
        }
    }
    (ArrayD::from_shape_vec(IxDyn(&[b, c, oh, ow]), out).unwrap(), idx)
}
