use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use super::kernels::{self, ConvGeom};
use super::{shape_err, Scalar, Tensor, TensorError};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch normalisation behaviour for one call.
#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a, T> {
    /// Normalise with statistics of the current batch.
    Train { eps: T },
    /// Normalise with supplied running statistics.
    Eval { eps: T, mean: &'a [T], var: &'a [T] },
}

/// Per-channel statistics observed by a train-mode batchnorm call.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased (n-1) variance, the convention for running estimates.
    pub var_unbiased: Vec<T>,
}

impl<T: Scalar> BatchStats<T> {
    /// Exponential moving update `running = (1-m)·running + m·batch`.
    pub fn update_running(&self, running_mean: &mut [T], running_var: &mut [T], momentum: T) {
        let keep = T::one() - momentum;
        for (r, &b) in running_mean.iter_mut().zip(&self.mean) {
            *r = keep * *r + momentum * b;
        }
        for (r, &b) in running_var.iter_mut().zip(&self.var_unbiased) {
            *r = keep * *r + momentum * b;
        }
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeom,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<u32>,
    },
    Upsample2 {
        input: Var,
    },
    Relu {
        input: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Mse {
        pred: Var,
        target: Var,
    },
    Sum {
        input: Var,
    },
    Scale {
        input: Var,
        factor: T,
    },
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
    /// Accumulated gradient; only leaves keep one.
    grad: Option<Vec<T>>,
}

/// Append-only computation tape.
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    scope: String,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn dims4(shape: &[usize], op: &'static str, what: &str) -> Result<[usize; 4], TensorError> {
    match shape {
        &[n, c, h, w] => Ok([n, c, h, w]),
        _ => Err(shape_err(op, format!("{what} must be rank 4, got {shape:?}"))),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            scope: String::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Label attached to non-finite errors raised by subsequent ops.
    pub fn set_scope(&mut self, scope: impl Into<String>) {
        self.scope = scope.into();
    }

    pub fn scope(&self) -> &str {
        &self.scope
    }

    fn push(
        &mut self,
        op_name: &'static str,
        shape: Vec<usize>,
        value: Vec<T>,
        op: Op<T>,
        requires_grad: bool,
    ) -> Result<Var, TensorError> {
        if let Some(index) = value.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite {
                op: op_name,
                scope: self.scope.clone(),
                index,
            });
        }
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    /// Places a tensor on the tape. It is differentiable iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Result<Var, TensorError> {
        self.push(
            "leaf",
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf,
            t.requires_grad(),
        )
    }

    pub fn constant(&mut self, t: &Tensor<T>) -> Result<Var, TensorError> {
        self.push("constant", t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    /// Accumulated gradient of a differentiable leaf.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.node(v).grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shapes are valid")
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var, TensorError> {
        const OP: &str = "conv2d";
        let [n, c, h, w] = dims4(self.shape(input), OP, "input")?;
        let [f, kc, kh, kw] = dims4(self.shape(kernel), OP, "kernel")?;
        if kc != c {
            return Err(shape_err(OP, format!("input has {c} channels but kernel expects {kc}")));
        }
        if self.shape(bias) != [f] {
            return Err(shape_err(
                OP,
                format!("bias shape {:?} does not match {f} filters", self.shape(bias)),
            ));
        }
        if stride == 0 {
            return Err(shape_err(OP, "stride must be positive"));
        }
        let (ph, pw) = (h + 2 * padding, w + 2 * padding);
        if kh > ph || kw > pw {
            return Err(shape_err(
                OP,
                format!("kernel {kh}x{kw} exceeds padded input {ph}x{pw}"),
            ));
        }
        if (ph - kh) % stride != 0 || (pw - kw) % stride != 0 {
            return Err(shape_err(
                OP,
                format!("padded extent {ph}x{pw} with kernel {kh}x{kw} is not divisible by stride {stride}"),
            ));
        }
        let geom = ConvGeom {
            n,
            c,
            h,
            w,
            f,
            kh,
            kw,
            stride,
            pad: padding,
            oh: (ph - kh) / stride + 1,
            ow: (pw - kw) / stride + 1,
        };
        let mut out = vec![T::zero(); n * f * geom.oh * geom.ow];
        kernels::conv2d_forward(&geom, self.value(input), self.value(kernel), self.value(bias), &mut out);
        let rg = self.requires_grad(input) || self.requires_grad(kernel) || self.requires_grad(bias);
        self.push(
            OP,
            vec![n, f, geom.oh, geom.ow],
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
            rg,
        )
    }

    pub fn maxpool2(&mut self, input: Var) -> Result<Var, TensorError> {
        const OP: &str = "maxpool2";
        let [n, c, h, w] = dims4(self.shape(input), OP, "input")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(shape_err(OP, format!("spatial extent {h}x{w} must be even")));
        }
        let len = n * c * (h / 2) * (w / 2);
        let mut out = vec![T::zero(); len];
        let mut argmax = vec![0u32; len];
        kernels::maxpool2_forward(n * c, h, w, self.value(input), &mut out, &mut argmax);
        let rg = self.requires_grad(input);
        self.push(OP, vec![n, c, h / 2, w / 2], out, Op::MaxPool2 { input, argmax }, rg)
    }

    pub fn upsample_nearest2(&mut self, input: Var) -> Result<Var, TensorError> {
        const OP: &str = "upsample_nearest2";
        let [n, c, h, w] = dims4(self.shape(input), OP, "input")?;
        let mut out = vec![T::zero(); n * c * 4 * h * w];
        kernels::upsample2_forward(n * c, h, w, self.value(input), &mut out);
        let rg = self.requires_grad(input);
        self.push(OP, vec![n, c, 2 * h, 2 * w], out, Op::Upsample2 { input }, rg)
    }

    pub fn relu(&mut self, input: Var) -> Result<Var, TensorError> {
        let out = self
            .value(input)
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        let shape = self.shape(input).to_vec();
        let rg = self.requires_grad(input);
        self.push("relu", shape, out, Op::Relu { input }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("add", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push("add", shape, out, Op::Add { a, b }, rg)
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Result<Var, TensorError> {
        let out = self.value(input).iter().map(|&v| v * factor).collect();
        let shape = self.shape(input).to_vec();
        let rg = self.requires_grad(input);
        self.push("scale", shape, out, Op::Scale { input, factor }, rg)
    }

    pub fn sum(&mut self, input: Var) -> Result<Var, TensorError> {
        let s = self.value(input).iter().copied().sum();
        let rg = self.requires_grad(input);
        self.push("sum", vec![1], vec![s], Op::Sum { input }, rg)
    }

    /// Per-channel batch normalisation over N, H and W.
    ///
    /// In train mode the observed batch statistics are returned so the caller
    /// can fold them into its running estimates.
    pub fn batchnorm2d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_, T>,
    ) -> Result<(Var, Option<BatchStats<T>>), TensorError> {
        const OP: &str = "batchnorm2d";
        let [n, c, h, w] = dims4(self.shape(input), OP, "input")?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err(
                OP,
                format!(
                    "gamma {:?} / beta {:?} must both be [{c}]",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let plane = h * w;
        let count = n * plane;
        let x = self.value(input);
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        let mut inv_std = vec![T::zero(); c];
        let mut stats = None;
        let (means, vars, eps, train) = match mode {
            BnMode::Train { eps } => {
                let m = T::lit(count as f64);
                let mut means = vec![T::zero(); c];
                let mut vars = vec![T::zero(); c];
                for ch in 0..c {
                    let mut s = T::zero();
                    for b in 0..n {
                        let off = (b * c + ch) * plane;
                        s = s + x[off..off + plane].iter().copied().sum::<T>();
                    }
                    let mean = s / m;
                    let mut ss = T::zero();
                    for b in 0..n {
                        let off = (b * c + ch) * plane;
                        for &v in &x[off..off + plane] {
                            let d = v - mean;
                            ss = ss + d * d;
                        }
                    }
                    means[ch] = mean;
                    vars[ch] = ss / m;
                }
                let unbiased = if count > 1 {
                    let corr = T::lit(count as f64 / (count - 1) as f64);
                    vars.iter().map(|&v| v * corr).collect()
                } else {
                    vars.clone()
                };
                stats = Some(BatchStats {
                    mean: means.clone(),
                    var_unbiased: unbiased,
                });
                (means, vars, eps, true)
            }
            BnMode::Eval { eps, mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(shape_err(OP, "running statistics must have one entry per channel"));
                }
                (mean.to_vec(), var.to_vec(), eps, false)
            }
        };
        for ch in 0..c {
            let is = T::one() / (vars[ch] + eps).sqrt();
            inv_std[ch] = is;
            for b in 0..n {
                let off = (b * c + ch) * plane;
                for i in off..off + plane {
                    let xh = (x[i] - means[ch]) * is;
                    xhat[i] = xh;
                    out[i] = gv[ch] * xh + bv[ch];
                }
            }
        }
        let rg = self.requires_grad(input) || self.requires_grad(gamma) || self.requires_grad(beta);
        let var = self.push(
            OP,
            vec![n, c, h, w],
            out,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            rg,
        )?;
        Ok((var, stats))
    }

    /// Mean of squared differences; a scalar node.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var, TensorError> {
        if self.shape(pred) != self.shape(target) {
            return Err(shape_err(
                "mse_loss",
                format!("{:?} vs {:?}", self.shape(pred), self.shape(target)),
            ));
        }
        let p = self.value(pred);
        let t = self.value(target);
        let s: T = p.iter().zip(t).map(|(&a, &b)| (a - b) * (a - b)).sum();
        let v = s / T::lit(p.len() as f64);
        let rg = self.requires_grad(pred) || self.requires_grad(target);
        self.push("mse_loss", vec![1], vec![v], Op::Mse { pred, target }, rg)
    }

    /// Reverse sweep from a scalar `loss`. Leaf gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.node(loss).value.len() != 1 {
            return Err(TensorError::NonScalarLoss(self.node(loss).shape.clone()));
        }
        if !self.node(loss).requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut leaf_grads = Vec::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let nodes = &self.nodes;
            let rg = |v: Var| nodes[v.0].requires_grad;
            let len_of = |v: Var| nodes[v.0].value.len();
            match &node.op {
                Op::Leaf => leaf_grads.push((i, g)),
                Op::Conv2d {
                    input,
                    kernel,
                    bias,
                    geom,
                } => {
                    let x = &nodes[input.0].value;
                    let k = &nodes[kernel.0].value;
                    let mut gi = rg(*input).then(|| vec![T::zero(); x.len()]);
                    let mut gk = rg(*kernel).then(|| vec![T::zero(); k.len()]);
                    let mut gb = rg(*bias).then(|| vec![T::zero(); geom.f]);
                    kernels::conv2d_backward(geom, x, k, &g, gi.as_deref_mut(), gk.as_deref_mut(), gb.as_deref_mut());
                    for (v, buf) in [(*input, gi), (*kernel, gk), (*bias, gb)] {
                        if let Some(buf) = buf {
                            add_into(slot(&mut grads, v, len_of(v)), &buf);
                        }
                    }
                }
                Op::MaxPool2 { input, argmax } => {
                    if rg(*input) {
                        let s = slot(&mut grads, *input, len_of(*input));
                        for (&src, &gv) in argmax.iter().zip(&g) {
                            s[src as usize] = s[src as usize] + gv;
                        }
                    }
                }
                Op::Upsample2 { input } => {
                    if rg(*input) {
                        let [n, c, h, w] = dims4(&nodes[input.0].shape, "upsample", "input")?;
                        let s = slot(&mut grads, *input, len_of(*input));
                        kernels::upsample2_backward(n * c, h, w, &g, s);
                    }
                }
                Op::Relu { input } => {
                    if rg(*input) {
                        let x = &nodes[input.0].value;
                        let s = slot(&mut grads, *input, x.len());
                        for ((acc, &xv), &gv) in s.iter_mut().zip(x).zip(&g) {
                            if xv > T::zero() {
                                *acc = *acc + gv;
                            }
                        }
                    }
                }
                Op::Add { a, b } => {
                    for v in [*a, *b] {
                        if rg(v) {
                            add_into(slot(&mut grads, v, g.len()), &g);
                        }
                    }
                }
                Op::Scale { input, factor } => {
                    if rg(*input) {
                        let s = slot(&mut grads, *input, g.len());
                        for (acc, &gv) in s.iter_mut().zip(&g) {
                            *acc = *acc + gv * *factor;
                        }
                    }
                }
                Op::Sum { input } => {
                    if rg(*input) {
                        let s = slot(&mut grads, *input, len_of(*input));
                        s.iter_mut().for_each(|acc| *acc = *acc + g[0]);
                    }
                }
                Op::Mse { pred, target } => {
                    let p = &nodes[pred.0].value;
                    let t = &nodes[target.0].value;
                    let k = T::lit(2.0) * g[0] / T::lit(p.len() as f64);
                    if rg(*pred) {
                        let s = slot(&mut grads, *pred, p.len());
                        for ((acc, &pv), &tv) in s.iter_mut().zip(p).zip(t) {
                            *acc = *acc + k * (pv - tv);
                        }
                    }
                    if rg(*target) {
                        let s = slot(&mut grads, *target, t.len());
                        for ((acc, &pv), &tv) in s.iter_mut().zip(p).zip(t) {
                            *acc = *acc - k * (pv - tv);
                        }
                    }
                }
                Op::BatchNorm {
                    input,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    train,
                } => {
                    let [n, c, h, w] = dims4(&node.shape, "batchnorm2d", "input")?;
                    let plane = h * w;
                    let m = T::lit((n * plane) as f64);
                    let gam = &nodes[gamma.0].value;
                    let mut dgamma = vec![T::zero(); c];
                    let mut dbeta = vec![T::zero(); c];
                    for ch in 0..c {
                        for b in 0..n {
                            let off = (b * c + ch) * plane;
                            for i in off..off + plane {
                                dgamma[ch] = dgamma[ch] + g[i] * xhat[i];
                                dbeta[ch] = dbeta[ch] + g[i];
                            }
                        }
                    }
                    if rg(*input) {
                        let s = slot(&mut grads, *input, g.len());
                        for ch in 0..c {
                            // dxhat = g·gamma; sums of dxhat and dxhat·xhat are gamma·dbeta, gamma·dgamma
                            let sum_d = gam[ch] * dbeta[ch];
                            let sum_dx = gam[ch] * dgamma[ch];
                            for b in 0..n {
                                let off = (b * c + ch) * plane;
                                for i in off..off + plane {
                                    let dxh = g[i] * gam[ch];
                                    let dx = if *train {
                                        inv_std[ch] / m * (m * dxh - sum_d - xhat[i] * sum_dx)
                                    } else {
                                        dxh * inv_std[ch]
                                    };
                                    s[i] = s[i] + dx;
                                }
                            }
                        }
                    }
                    if rg(*gamma) {
                        add_into(slot(&mut grads, *gamma, c), &dgamma);
                    }
                    if rg(*beta) {
                        add_into(slot(&mut grads, *beta, c), &dbeta);
                    }
                }
            }
        }

        for (i, g) in leaf_grads {
            match &mut self.nodes[i].grad {
                Some(acc) => add_into(acc, &g),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    /// Fingerprint of every discrete branch taken in the forward pass
    /// (relu sign pattern, max-pool winners). Two evaluations with equal
    /// signatures lie in the same differentiable piece.
    pub fn branch_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (i, node) in self.nodes.iter().enumerate() {
            match &node.op {
                Op::Relu { input } => {
                    i.hash(&mut h);
                    for &v in &self.nodes[input.0].value {
                        (v > T::zero()).hash(&mut h);
                    }
                }
                Op::MaxPool2 { argmax, .. } => {
                    i.hash(&mut h);
                    argmax.hash(&mut h);
                }
                _ => {}
            }
        }
        h.finish()
    }
}

/// Gradient buffer of `v`, allocated as zeros on first touch.
fn slot<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn add_into<T: Scalar>(acc: &mut [T], g: &[T]) {
    for (a, &b) in acc.iter_mut().zip(g) {
        *a = *a + b;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identity_conv_returns_input() {
        let mut g = Graph::<f64>::new();
        let x = g
            .leaf(&Tensor::from_fn([1, 1, 3, 4], |i| i as f64 * 0.5 - 1.0))
            .unwrap();
        let k = g.leaf(&t(&[1, 1, 1, 1], &[1.0])).unwrap();
        let b = g.leaf(&t(&[1], &[0.0])).unwrap();
        let y = g.conv2d(x, k, b, 1, 0).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn ones_kernel_counts_neighbours() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&Tensor::full([1, 1, 3, 3], 1.0)).unwrap();
        let k = g.leaf(&Tensor::full([1, 1, 3, 3], 1.0)).unwrap();
        let b = g.leaf(&t(&[1], &[0.0])).unwrap();
        let y = g.conv2d(x, k, b, 1, 1).unwrap();
        let v = g.value(y);
        assert_eq!(v[4], 9.0);
        for corner in [0, 2, 6, 8] {
            assert_eq!(v[corner], 4.0);
        }
    }

    #[test]
    fn conv_rejects_bad_shapes() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&Tensor::zeros([1, 2, 4, 4])).unwrap();
        let k = g.leaf(&Tensor::zeros([1, 3, 3, 3])).unwrap();
        let b = g.leaf(&Tensor::zeros([1])).unwrap();
        assert!(matches!(g.conv2d(x, k, b, 1, 1), Err(TensorError::Shape { .. })));

        let k2 = g.leaf(&Tensor::zeros([1, 2, 3, 3])).unwrap();
        // (4 + 0 - 3) / 2 is not exact
        let err = g.conv2d(x, k2, b, 2, 0).unwrap_err();
        assert!(err.to_string().contains("divisible"), "{err}");
        let big = g.leaf(&Tensor::zeros([1, 2, 7, 7])).unwrap();
        assert!(g.conv2d(x, big, b, 1, 1).is_err());
    }

    #[test]
    fn maxpool_routes_gradient_to_winner() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).with_grad()).unwrap();
        let y = g.maxpool2(x).unwrap();
        assert_eq!(g.value(y), &[4.0]);
        let s = g.scale(y, 2.5).unwrap();
        let l = g.sum(s).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0, 0.0, 2.5]);
    }

    #[test]
    fn maxpool_ties_prefer_first_and_odd_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&Tensor::full([1, 1, 2, 2], 3.0).with_grad()).unwrap();
        let y = g.maxpool2(x).unwrap();
        let l = g.sum(y).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
        let odd = g.leaf(&Tensor::zeros([1, 1, 3, 2])).unwrap();
        assert!(g.maxpool2(odd).is_err());
    }

    #[test]
    fn constant_pool_is_constant() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&Tensor::full([2, 3, 4, 6], -1.5)).unwrap();
        let y = g.maxpool2(x).unwrap();
        assert!(g.value(y).iter().all(|&v| v == -1.5));
        assert_eq!(g.shape(y), &[2, 3, 2, 3]);
    }

    #[test]
    fn upsample_replicates_and_sums_back() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&t(&[1, 1, 1, 1], &[5.0]).with_grad()).unwrap();
        let y = g.upsample_nearest2(x).unwrap();
        assert_eq!(g.value(y), &[5.0; 4]);
        let l = g.sum(y).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[4.0]);

        let x = g.leaf(&Tensor::from_fn([2, 2, 3, 2], |i| (i * 7 % 5) as f64)).unwrap();
        let up = g.upsample_nearest2(x).unwrap();
        let down = g.maxpool2(up).unwrap();
        assert_eq!(g.value(down), g.value(x));
    }

    #[test]
    fn relu_and_add() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&t(&[2], &[-1.0, 2.0])).unwrap();
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(r), &[0.0, 2.0]);
        let y = g.leaf(&t(&[3], &[0.0; 3])).unwrap();
        assert!(g.add(x, y).is_err());
    }

    #[test]
    fn batchnorm_zero_variance_gives_beta() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&Tensor::full([2, 2, 3, 3], 7.0)).unwrap();
        let gamma = g.leaf(&t(&[2], &[1.3, 0.4])).unwrap();
        let beta = g.leaf(&t(&[2], &[0.25, -2.0])).unwrap();
        let (y, stats) = g.batchnorm2d(x, gamma, beta, BnMode::Train { eps: 1e-5 }).unwrap();
        let v = g.value(y);
        assert!(v[..9].iter().all(|&a| a == 0.25));
        assert!(v[9..18].iter().all(|&a| a == -2.0));
        assert_eq!(stats.unwrap().mean, vec![7.0, 7.0]);
        let bad = g.leaf(&t(&[3], &[1.0; 3])).unwrap();
        assert!(g.batchnorm2d(x, bad, beta, BnMode::Train { eps: 1e-5 }).is_err());
    }

    #[test]
    fn mse_values_and_shape_check() {
        let mut g = Graph::<f64>::new();
        let p = g.leaf(&t(&[2], &[1.0, 0.0])).unwrap();
        let z = g.leaf(&t(&[2], &[0.0, 0.0])).unwrap();
        let l = g.mse_loss(p, z).unwrap();
        assert_eq!(g.value(l), &[0.5]);
        let l0 = g.mse_loss(p, p).unwrap();
        assert_eq!(g.value(l0), &[0.0]);
        let q = g.leaf(&t(&[1, 2], &[0.0, 0.0])).unwrap();
        assert!(g.mse_loss(p, q).is_err());
    }

    #[test]
    fn sum_grad_is_ones_and_accumulates() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&Tensor::from_fn([2, 3], |i| i as f64).with_grad()).unwrap();
        let l = g.sum(x).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0; 6]);
        g.zero_grads();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn non_scalar_backward_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&Tensor::zeros([2]).with_grad()).unwrap();
        assert!(matches!(g.backward(x), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn diamond_sums_both_paths() {
        // y = relu(x) + 3x, loss = sum(y) with x > 0 -> d/dx = 1 + 3
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&t(&[3], &[0.5, 1.0, 2.0]).with_grad()).unwrap();
        let a = g.relu(x).unwrap();
        let b = g.scale(x, 3.0).unwrap();
        let y = g.add(a, b).unwrap();
        let l = g.sum(y).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[4.0; 3]);
    }

    #[test]
    fn non_finite_names_scope() {
        let mut g = Graph::<f64>::new();
        g.set_scope("unit0.head");
        let x = g.leaf(&t(&[1], &[f64::MAX])).unwrap();
        let err = g.scale(x, 10.0).unwrap_err();
        match err {
            TensorError::NonFinite { scope, op, .. } => {
                assert_eq!(scope, "unit0.head");
                assert_eq!(op, "scale");
            }
            other => panic!("unexpected {other}"),
        }
    }
}
