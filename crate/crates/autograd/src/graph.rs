use crate::gemm::gemm;
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of a 2-D convolution with square stride and symmetric zero padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    in_ch: usize,
    h: usize,
    w: usize,
    out_ch: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    fn out_pixels(&self) -> usize {
        self.oh * self.ow
    }

    fn im2col(&self, img: &[f64], cols: &mut [f64]) {
        let p = self.out_pixels();
        for c in 0..self.in_ch {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oi in 0..self.oh {
                        let y = (oi * self.stride + ki) as isize - self.pad as isize;
                        for oj in 0..self.ow {
                            let x = (oj * self.stride + kj) as isize - self.pad as isize;
                            dst[oi * self.ow + oj] = if y >= 0
                                && (y as usize) < self.h
                                && x >= 0
                                && (x as usize) < self.w
                            {
                                img[(c * self.h + y as usize) * self.w + x as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], img: &mut [f64]) {
        let p = self.out_pixels();
        for c in 0..self.in_ch {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * p..(row + 1) * p];
                    for oi in 0..self.oh {
                        let y = (oi * self.stride + ki) as isize - self.pad as isize;
                        if y < 0 || y as usize >= self.h {
                            continue;
                        }
                        for oj in 0..self.ow {
                            let x = (oj * self.stride + kj) as isize - self.pad as isize;
                            if x < 0 || x as usize >= self.w {
                                continue;
                            }
                            img[(c * self.h + y as usize) * self.w + x as usize] +=
                                src[oi * self.ow + oj];
                        }
                    }
                }
            }
        }
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Vec<f64>),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Gelu(Var),
    Reshape(Var),
    Transpose(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    LayerNormRows {
        x: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    MeanRows(Var),
    SumAll(Var),
    SoftmaxRows(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
        total_weight: f64,
    },
    BceWithLogits {
        x: Var,
        targets: Vec<f64>,
    },
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    GatherRows {
        x: Var,
        index: Vec<usize>,
    },
    Index {
        x: Var,
        at: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// A tape of tensor operations.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A constant: gradients never flow into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that receives a gradient in [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape().len(), 2, "matmul lhs must be 2-D");
        assert_eq!(bv.shape().len(), 2, "matmul rhs must be 2-D");
        let (m, k) = (av.shape()[0], av.shape()[1]);
        let (k2, n) = (bv.shape()[0], bv.shape()[1]);
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), false, bv.data(), false, &mut out, 0.0);
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::new([m, n], out).unwrap(), Op::MatMul(a, b), ng)
    }

    fn zip_same(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "elementwise shape mismatch");
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(av.shape().to_vec(), data).unwrap();
        let ng = self.ng(a) || self.ng(b);
        self.push(out, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn row_broadcast(&mut self, a: Var, row: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        let c = av.cols();
        assert_eq!(rv.len(), c, "row broadcast width mismatch");
        let mut data = av.data().to_vec();
        for chunk in data.chunks_mut(c.max(1)) {
            for (x, &r) in chunk.iter_mut().zip(rv.data()) {
                *x = f(*x, r);
            }
        }
        let out = Tensor::new(av.shape().to_vec(), data).unwrap();
        let ng = self.ng(a) || self.ng(row);
        self.push(out, op, ng)
    }

    /// Adds a `[m]` vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        self.row_broadcast(a, row, |x, r| x + r, Op::AddRow(a, row))
    }

    /// Multiplies every row of `a` elementwise by a `[m]` vector.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        self.row_broadcast(a, row, |x, r| x * r, Op::MulRow(a, row))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    /// Elementwise product with a constant mask (e.g. dropout).
    pub fn mul_const(&mut self, a: Var, mask: Vec<f64>) -> Var {
        let av = self.value(a);
        assert_eq!(av.len(), mask.len(), "mask length mismatch");
        let data = av.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let out = Tensor::new(av.shape().to_vec(), data).unwrap();
        let ng = self.ng(a);
        self.push(out, Op::MulConst(a, mask), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        let ng = self.ng(a);
        self.push(out, Op::Relu(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        let ng = self.ng(a);
        self.push(out, Op::Tanh(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let ng = self.ng(a);
        self.push(out, Op::Sigmoid(a), ng)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self
            .value(a)
            .map(|x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()));
        let ng = self.ng(a);
        self.push(out, Op::Gelu(a), ng)
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Var {
        let out = self.value(a).clone().reshape(shape).expect("reshape");
        let ng = self.ng(a);
        self.push(out, Op::Reshape(a), ng)
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&mut self, a: Var) -> Var {
        let av = self.value(a);
        assert_eq!(av.shape().len(), 2, "transpose needs a matrix");
        let (r, c) = (av.shape()[0], av.shape()[1]);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = av.data()[i * c + j];
            }
        }
        let ng = self.ng(a);
        self.push(Tensor::new([c, r], data).unwrap(), Op::Transpose(a), ng)
    }

    /// `x: [B, C, H, W]`, `w: [O, C, kh, kw]`, `b: [O]` -> `[B, O, H', W']`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, spec: Conv2dSpec) -> Var {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        assert_eq!(xv.shape().len(), 4, "conv2d input must be [B, C, H, W]");
        assert_eq!(wv.shape().len(), 4, "conv2d weight must be [O, C, kh, kw]");
        let (batch, in_ch, h, wd) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let (out_ch, wc, kh, kw) = (wv.shape()[0], wv.shape()[1], wv.shape()[2], wv.shape()[3]);
        assert_eq!(in_ch, wc, "conv2d channel mismatch");
        assert_eq!(bv.len(), out_ch, "conv2d bias length");
        assert!(spec.stride >= 1);
        let oh = (h + 2 * spec.padding - kh) / spec.stride + 1;
        let ow = (wd + 2 * spec.padding - kw) / spec.stride + 1;
        let geom = ConvGeom {
            batch,
            in_ch,
            h,
            w: wd,
            out_ch,
            kh,
            kw,
            oh,
            ow,
            stride: spec.stride,
            pad: spec.padding,
        };
        let patch = geom.patch();
        let p = geom.out_pixels();
        let img_len = in_ch * h * wd;
        let mut cols = vec![0.0; batch * patch * p];
        let mut out = vec![0.0; batch * out_ch * p];
        for bi in 0..batch {
            let col = &mut cols[bi * patch * p..(bi + 1) * patch * p];
            geom.im2col(&xv.data()[bi * img_len..(bi + 1) * img_len], col);
            let dst = &mut out[bi * out_ch * p..(bi + 1) * out_ch * p];
            for (o, chunk) in dst.chunks_mut(p).enumerate() {
                chunk.fill(bv.data()[o]);
            }
            gemm(out_ch, patch, p, wv.data(), false, col, false, dst, 1.0);
        }
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        let t = Tensor::new([batch, out_ch, oh, ow], out).unwrap();
        self.push(t, Op::Conv2d { x, w, b, geom, cols }, ng)
    }

    /// Normalizes each leading-dimension slice to zero mean and unit variance.
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let av = self.value(a);
        let (r, c) = (av.rows(), av.cols());
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        for i in 0..r {
            let row = av.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                xhat[i * c + j] = (row[j] - mean) * is;
            }
        }
        let out = Tensor::new(av.shape().to_vec(), xhat.clone()).unwrap();
        let ng = self.ng(a);
        self.push(out, Op::LayerNormRows { x: a, xhat, inv_std }, ng)
    }

    /// Mean of each leading-dimension slice: `[r, ...] -> [r]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (r, c) = (av.rows(), av.cols());
        let data = (0..r).map(|i| av.row(i).iter().sum::<f64>() / c as f64).collect();
        let ng = self.ng(a);
        self.push(Tensor::new([r], data).unwrap(), Op::MeanRows(a), ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Softmax over each row of a matrix.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (r, c) = (av.rows(), av.cols());
        let mut data = av.data().to_vec();
        for i in 0..r {
            let row = &mut data[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let out = Tensor::new(av.shape().to_vec(), data).unwrap();
        let ng = self.ng(a);
        self.push(out, Op::SoftmaxRows(a), ng)
    }

    /// Weighted mean cross-entropy of `logits: [n, c]` against class indices.
    ///
    /// Returns `sum_i w_i * CE_i / sum_i w_i`, or `0` (with zero gradient) when
    /// every weight is zero.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Var {
        let lv = self.value(logits);
        let (n, c) = (lv.rows(), lv.cols());
        assert_eq!(targets.len(), n, "cross_entropy target count");
        assert_eq!(weights.len(), n, "cross_entropy weight count");
        let total_weight: f64 = weights.iter().sum();
        let mut probs = vec![0.0; n * c];
        let mut loss = 0.0;
        for i in 0..n {
            let row = lv.row(i);
            assert!(targets[i] < c, "target {} out of range {c}", targets[i]);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for j in 0..c {
                probs[i * c + j] = (row[j] - lse).exp();
            }
            if weights[i] != 0.0 {
                loss += weights[i] * (lse - row[targets[i]]);
            }
        }
        let value = if total_weight > 0.0 {
            loss / total_weight
        } else {
            0.0
        };
        let ng = self.ng(logits) && total_weight > 0.0;
        self.push(
            Tensor::scalar(value),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
                total_weight,
            },
            ng,
        )
    }

    /// Mean binary cross-entropy of `sigmoid(x)` against `targets`.
    pub fn bce_with_logits(&mut self, x: Var, targets: &[f64]) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.len(), targets.len(), "bce target count");
        let n = targets.len().max(1) as f64;
        let loss: f64 = xv
            .data()
            .iter()
            .zip(targets)
            .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .sum();
        let ng = self.ng(x);
        self.push(
            Tensor::scalar(loss / n),
            Op::BceWithLogits {
                x,
                targets: targets.to_vec(),
            },
            ng,
        )
    }

    /// Scales each row of a matrix to unit L2 norm. Panics on a zero row.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (r, c) = (av.rows(), av.cols());
        let mut norms = vec![0.0; r];
        let mut data = av.data().to_vec();
        for i in 0..r {
            let row = &mut data[i * c..(i + 1) * c];
            let nrm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(nrm > 0.0, "normalize_rows: zero-norm row {i}");
            norms[i] = nrm;
            row.iter_mut().for_each(|v| *v /= nrm);
        }
        let out = Tensor::new(av.shape().to_vec(), data).unwrap();
        let ng = self.ng(a);
        self.push(out, Op::NormalizeRows { x: a, norms }, ng)
    }

    /// Stacks tensors along the leading dimension; trailing shapes must agree.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let tail = self.value(parts[0]).shape()[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(&pv.shape()[1..], &tail[..], "concat_rows trailing shape");
            rows += pv.rows();
            data.extend_from_slice(pv.data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Tensor::new(shape, data).unwrap(), Op::ConcatRows(parts.to_vec()), ng)
    }

    /// Rows `start..end` of the leading dimension.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let av = self.value(a);
        assert!(start <= end && end <= av.rows(), "slice_rows out of range");
        let c = av.cols();
        let data = av.data()[start * c..end * c].to_vec();
        let mut shape = av.shape().to_vec();
        shape[0] = end - start;
        let ng = self.ng(a);
        self.push(Tensor::new(shape, data).unwrap(), Op::SliceRows { x: a, start }, ng)
    }

    /// Selects rows by index (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Var {
        let av = self.value(a);
        let c = av.cols();
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in index {
            data.extend_from_slice(av.row(i));
        }
        let mut shape = av.shape().to_vec();
        shape[0] = index.len();
        let ng = self.ng(a);
        self.push(
            Tensor::new(shape, data).unwrap(),
            Op::GatherRows {
                x: a,
                index: index.to_vec(),
            },
            ng,
        )
    }

    /// A single element (flat index) as a scalar.
    pub fn index(&mut self, a: Var, at: usize) -> Var {
        let v = self.value(a).data()[at];
        let ng = self.ng(a);
        self.push(Tensor::scalar(v), Op::Index { x: a, at }, ng)
    }

    /// Reverse pass from a scalar node, seeded with gradient 1.
    pub fn backward(&self, root: Var) -> Gradients {
        let root_val = self.value(root);
        assert_eq!(root_val.len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(root_val.shape().to_vec(), 1.0));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.propagate(node, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        Gradients { grads }
    }

    fn accum(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn like(&self, v: Var, data: Vec<f64>) -> Tensor {
        Tensor::new(self.value(v).shape().to_vec(), data).unwrap()
    }

    fn propagate(&self, node: &Node, gy: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.ng(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, gy.data(), false, bv.data(), true, &mut ga, 0.0);
                    self.accum(grads, *a, self.like(*a, ga));
                }
                if self.ng(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, av.data(), true, gy.data(), false, &mut gb, 0.0);
                    self.accum(grads, *b, self.like(*b, gb));
                }
            }
            Op::Add(a, b) => {
                self.accum(grads, *a, gy.clone());
                self.accum(grads, *b, gy.clone());
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, gy.clone());
                if self.ng(*b) {
                    self.accum(grads, *b, gy.map(|g| -g));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let d = gy.data().iter().zip(bv.data()).map(|(g, x)| g * x).collect();
                    self.accum(grads, *a, self.like(*a, d));
                }
                if self.ng(*b) {
                    let d = gy.data().iter().zip(av.data()).map(|(g, x)| g * x).collect();
                    self.accum(grads, *b, self.like(*b, d));
                }
            }
            Op::AddRow(a, r) => {
                self.accum(grads, *a, gy.clone());
                if self.ng(*r) {
                    let c = gy.cols();
                    let mut gr = vec![0.0; c];
                    for chunk in gy.data().chunks(c.max(1)) {
                        for (s, g) in gr.iter_mut().zip(chunk) {
                            *s += g;
                        }
                    }
                    self.accum(grads, *r, self.like(*r, gr));
                }
            }
            Op::MulRow(a, r) => {
                let (av, rv) = (self.value(*a), self.value(*r));
                let c = gy.cols();
                if self.ng(*a) {
                    let mut d = gy.data().to_vec();
                    for chunk in d.chunks_mut(c.max(1)) {
                        for (g, s) in chunk.iter_mut().zip(rv.data()) {
                            *g *= s;
                        }
                    }
                    self.accum(grads, *a, self.like(*a, d));
                }
                if self.ng(*r) {
                    let mut gr = vec![0.0; c];
                    for (gchunk, achunk) in gy.data().chunks(c.max(1)).zip(av.data().chunks(c.max(1))) {
                        for j in 0..c {
                            gr[j] += gchunk[j] * achunk[j];
                        }
                    }
                    self.accum(grads, *r, self.like(*r, gr));
                }
            }
            Op::Scale(a, s) => self.accum(grads, *a, gy.map(|g| g * s)),
            Op::MulConst(a, mask) => {
                let d = gy.data().iter().zip(mask).map(|(g, m)| g * m).collect();
                self.accum(grads, *a, self.like(*a, d));
            }
            Op::Relu(a) => {
                let av = self.value(*a);
                let d = gy
                    .data()
                    .iter()
                    .zip(av.data())
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                self.accum(grads, *a, self.like(*a, d));
            }
            Op::Tanh(a) => {
                let d = gy.data().iter().zip(y.data()).map(|(g, t)| g * (1.0 - t * t)).collect();
                self.accum(grads, *a, self.like(*a, d));
            }
            Op::Sigmoid(a) => {
                let d = gy.data().iter().zip(y.data()).map(|(g, s)| g * s * (1.0 - s)).collect();
                self.accum(grads, *a, self.like(*a, d));
            }
            Op::Gelu(a) => {
                let av = self.value(*a);
                let d = gy
                    .data()
                    .iter()
                    .zip(av.data())
                    .map(|(g, &x)| {
                        let u = GELU_C * (x + 0.044715 * x * x * x);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                        g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                    })
                    .collect();
                self.accum(grads, *a, self.like(*a, d));
            }
            Op::Reshape(a) => self.accum(grads, *a, self.like(*a, gy.data().to_vec())),
            Op::Transpose(a) => {
                let (r, c) = (gy.shape()[0], gy.shape()[1]);
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        d[j * r + i] = gy.data()[i * c + j];
                    }
                }
                self.accum(grads, *a, self.like(*a, d));
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let patch = geom.patch();
                let p = geom.out_pixels();
                let oc = geom.out_ch;
                let wv = self.value(*w);
                if self.ng(*b) {
                    let mut gb = vec![0.0; oc];
                    for bi in 0..geom.batch {
                        for (o, s) in gb.iter_mut().enumerate() {
                            let off = (bi * oc + o) * p;
                            *s += gy.data()[off..off + p].iter().sum::<f64>();
                        }
                    }
                    self.accum(grads, *b, self.like(*b, gb));
                }
                if self.ng(*w) {
                    let mut gw = vec![0.0; oc * patch];
                    for bi in 0..geom.batch {
                        let g = &gy.data()[bi * oc * p..(bi + 1) * oc * p];
                        let col = &cols[bi * patch * p..(bi + 1) * patch * p];
                        gemm(oc, p, patch, g, false, col, true, &mut gw, 1.0);
                    }
                    self.accum(grads, *w, self.like(*w, gw));
                }
                if self.ng(*x) {
                    let img_len = geom.in_ch * geom.h * geom.w;
                    let mut gx = vec![0.0; geom.batch * img_len];
                    let mut dcol = vec![0.0; patch * p];
                    for bi in 0..geom.batch {
                        let g = &gy.data()[bi * oc * p..(bi + 1) * oc * p];
                        gemm(patch, oc, p, wv.data(), true, g, false, &mut dcol, 0.0);
                        geom.col2im(&dcol, &mut gx[bi * img_len..(bi + 1) * img_len]);
                    }
                    self.accum(grads, *x, self.like(*x, gx));
                }
            }
            Op::LayerNormRows { x, xhat, inv_std } => {
                let (r, c) = (gy.rows(), gy.cols());
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    let g = &gy.data()[i * c..(i + 1) * c];
                    let xh = &xhat[i * c..(i + 1) * c];
                    let mg = g.iter().sum::<f64>() / c as f64;
                    let mgx = g.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for j in 0..c {
                        d[i * c + j] = inv_std[i] * (g[j] - mg - xh[j] * mgx);
                    }
                }
                self.accum(grads, *x, self.like(*x, d));
            }
            Op::MeanRows(a) => {
                let av = self.value(*a);
                let (r, c) = (av.rows(), av.cols());
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    let g = gy.data()[i] / c as f64;
                    d[i * c..(i + 1) * c].fill(g);
                }
                self.accum(grads, *a, self.like(*a, d));
            }
            Op::SumAll(a) => {
                let n = self.value(*a).len();
                self.accum(grads, *a, self.like(*a, vec![gy.item(); n]));
            }
            Op::SoftmaxRows(a) => {
                let (r, c) = (y.rows(), y.cols());
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    let yr = &y.data()[i * c..(i + 1) * c];
                    let g = &gy.data()[i * c..(i + 1) * c];
                    let dot: f64 = yr.iter().zip(g).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        d[i * c + j] = yr[j] * (g[j] - dot);
                    }
                }
                self.accum(grads, *a, self.like(*a, d));
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
                total_weight,
            } => {
                let lv = self.value(*logits);
                let (n, c) = (lv.rows(), lv.cols());
                let scale = gy.item() / total_weight;
                let mut d = vec![0.0; n * c];
                for i in 0..n {
                    if weights[i] == 0.0 {
                        continue;
                    }
                    let w = weights[i] * scale;
                    for j in 0..c {
                        let onehot = if j == targets[i] { 1.0 } else { 0.0 };
                        d[i * c + j] = w * (probs[i * c + j] - onehot);
                    }
                }
                self.accum(grads, *logits, self.like(*logits, d));
            }
            Op::BceWithLogits { x, targets } => {
                let xv = self.value(*x);
                let n = targets.len().max(1) as f64;
                let g = gy.item() / n;
                let d = xv
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&z, &t)| g * (sigmoid(z) - t))
                    .collect();
                self.accum(grads, *x, self.like(*x, d));
            }
            Op::NormalizeRows { x, norms } => {
                let (r, c) = (y.rows(), y.cols());
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    let yr = &y.data()[i * c..(i + 1) * c];
                    let g = &gy.data()[i * c..(i + 1) * c];
                    let dot: f64 = yr.iter().zip(g).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        d[i * c + j] = (g[j] - yr[j] * dot) / norms[i];
                    }
                }
                self.accum(grads, *x, self.like(*x, d));
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if self.ng(p) {
                        let d = gy.data()[off..off + len].to_vec();
                        self.accum(grads, p, self.like(p, d));
                    }
                    off += len;
                }
            }
            Op::SliceRows { x, start } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut d = vec![0.0; xv.len()];
                d[start * c..start * c + gy.len()].copy_from_slice(gy.data());
                self.accum(grads, *x, self.like(*x, d));
            }
            Op::GatherRows { x, index } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut d = vec![0.0; xv.len()];
                for (k, &i) in index.iter().enumerate() {
                    for j in 0..c {
                        d[i * c + j] += gy.data()[k * c + j];
                    }
                }
                self.accum(grads, *x, self.like(*x, d));
            }
            Op::Index { x, at } => {
                let mut d = vec![0.0; self.value(*x).len()];
                d[*at] = gy.item();
                self.accum(grads, *x, self.like(*x, d));
            }
        }
    }
}
