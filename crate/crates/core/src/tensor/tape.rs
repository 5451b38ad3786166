use super::kernels::{col2im_add, gemm_nn, gemm_nt, gemm_tn, im2col, ConvGeom};
use super::pool::{pool_values, PoolKind, PoolingConfig};
use super::Tensor;
use crate::error::{Error, Result};
use crate::stn;

/// Clamp applied to probabilities before taking logs in cross-entropy.
pub const LOG_CLAMP: f64 = 1e-12;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    ChannelBias {
        input: Var,
        bias: Var,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Relu {
        input: Var,
    },
    Identity {
        input: Var,
    },
    Softmax {
        input: Var,
    },
    GlobalPool {
        input: Var,
        config: PoolingConfig,
        argmax: Vec<usize>,
    },
    Sum {
        input: Var,
    },
    Square {
        input: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Combine {
        terms: Vec<(Var, f64)>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Option<Vec<f64>>,
        probs: Vec<f64>,
    },
    CrossEntropyProbs {
        probs: Var,
        labels: Vec<f64>,
        weights: Option<Vec<f64>>,
    },
    SimilarityToAffine {
        params: Var,
    },
    AffineGrid {
        theta: Var,
        height: usize,
        width: usize,
    },
    GridSample {
        image: Var,
        grid: Var,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Records a forward computation in topological order for reverse-mode
/// differentiation. Every op appends one node whose inputs already exist.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every leaf that requires them.
#[derive(Debug)]
pub struct Gradients {
    leaves: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.leaves.get(var.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `var` onto `tensor.grad`.
    pub fn accumulate_into(&self, var: Var, tensor: &mut Tensor) -> Result<()> {
        match self.get(var) {
            Some(g) => tensor.accumulate_grad(g),
            None => {
                let zeros = vec![0.0; tensor.numel()];
                tensor.accumulate_grad(&zeros)
            }
        }
    }
}

fn shape2(shape: &[usize], op: &'static str, what: &str) -> Result<(usize, usize)> {
    match shape {
        [a, b] => Ok((*a, *b)),
        other => Err(Error::dim(
            op,
            format!("{what} must be rank 2, got {other:?}"),
        )),
    }
}

fn shape4(shape: &[usize], op: &'static str, what: &str) -> Result<(usize, usize, usize, usize)> {
    match shape {
        [a, b, c, d] => Ok((*a, *b, *c, *d)),
        other => Err(Error::dim(
            op,
            format!("{what} must be rank 4, got {other:?}"),
        )),
    }
}

fn validate_weights(weights: Option<&[f64]>, classes: usize, op: &'static str) -> Result<()> {
    if let Some(w) = weights {
        if w.len() != classes {
            return Err(Error::dim(
                op,
                format!("{} class weights for {classes} classes", w.len()),
            ));
        }
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape nodes hold consistent shapes")
    }

    /// Records a copy of `tensor` as a leaf; it is differentiated only if
    /// `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: &Tensor) -> Var {
        self.push(
            tensor.shape().to_vec(),
            tensor.data().to_vec(),
            tensor.requires_grad(),
            Op::Leaf,
        )
    }

    pub fn constant(&mut self, tensor: &Tensor) -> Var {
        self.push(
            tensor.shape().to_vec(),
            tensor.data().to_vec(),
            false,
            Op::Leaf,
        )
    }

    pub fn constant_from(&mut self, shape: Vec<usize>, value: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, value)?;
        Ok(self.constant(&t))
    }

    /// Cross-correlation of an `N×C×H×W` input with `O×C×K×K` kernels.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        const OP: &str = "conv2d";
        let (n, c, h, w) = shape4(self.shape(input), OP, "input")?;
        let (o, kc, kh, kw) = shape4(self.shape(kernel), OP, "kernels")?;
        if kc != c {
            return Err(Error::dim(
                OP,
                format!("input channels {c} vs kernel channels {kc} (axis 1)"),
            ));
        }
        if kh != kw {
            return Err(Error::dim(
                OP,
                format!("kernels must be square, got {kh}×{kw} (axes 2, 3)"),
            ));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be positive".into()));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::dim(
                OP,
                format!(
                    "kernel {kh}×{kw} larger than padded input {}×{} (axes 2, 3)",
                    h + 2 * padding,
                    w + 2 * padding
                ),
            ));
        }
        let geom = ConvGeom {
            channels: c,
            height: h,
            width: w,
            kernel: kh,
            stride,
            padding,
            out_h: (h + 2 * padding - kh) / stride + 1,
            out_w: (w + 2 * padding - kw) / stride + 1,
        };
        let patch = geom.patch_len();
        let out_len = geom.out_len();
        let mut cols = vec![0.0; n * patch * out_len];
        let mut out = vec![0.0; n * o * out_len];
        {
            let x = self.value(input);
            let k = self.value(kernel);
            for b in 0..n {
                let img = &x[b * c * h * w..(b + 1) * c * h * w];
                let col = &mut cols[b * patch * out_len..(b + 1) * patch * out_len];
                im2col(img, &geom, col);
                gemm_nn(
                    k,
                    col,
                    &mut out[b * o * out_len..(b + 1) * o * out_len],
                    o,
                    patch,
                    out_len,
                );
            }
        }
        let rg = self.needs(input) || self.needs(kernel);
        Ok(self.push(
            vec![n, o, geom.out_h, geom.out_w],
            out,
            rg,
            Op::Conv2d {
                input,
                kernel,
                geom,
                cols,
            },
        ))
    }

    /// Adds a per-channel bias to an `N×C×H×W` tensor.
    pub fn channel_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let (n, c, h, w) = shape4(self.shape(input), "channel_bias", "input")?;
        if self.shape(bias) != [c] {
            return Err(Error::dim(
                "channel_bias",
                format!("bias {:?} for {c} channels", self.shape(bias)),
            ));
        }
        let mut out = self.value(input).to_vec();
        let b = self.value(bias);
        for (i, plane) in out.chunks_exact_mut(h * w).enumerate() {
            let bv = b[i % c];
            plane.iter_mut().for_each(|v| *v += bv);
        }
        let _ = n;
        let rg = self.needs(input) || self.needs(bias);
        Ok(self.push(
            self.shape(input).to_vec(),
            out,
            rg,
            Op::ChannelBias { input, bias },
        ))
    }

    /// `input · weight + bias` with `input: N×D`, `weight: D×K`, `bias: K`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        const OP: &str = "linear";
        let (n, d) = shape2(self.shape(input), OP, "input")?;
        let (wd, k) = shape2(self.shape(weight), OP, "weights")?;
        if wd != d {
            return Err(Error::dim(
                OP,
                format!("input inner dim {d} (axis 1) vs weight rows {wd} (axis 0)"),
            ));
        }
        let mut out = vec![0.0; n * k];
        if let Some(b) = bias {
            if self.shape(b) != [k] {
                return Err(Error::dim(
                    OP,
                    format!("bias {:?} for {k} outputs", self.shape(b)),
                ));
            }
            let bv = self.value(b);
            for row in out.chunks_exact_mut(k) {
                row.copy_from_slice(bv);
            }
        }
        gemm_nn(self.value(input), self.value(weight), &mut out, n, d, k);
        let rg = self.needs(input) || self.needs(weight) || bias.is_some_and(|b| self.needs(b));
        Ok(self.push(
            vec![n, k],
            out,
            rg,
            Op::Linear {
                input,
                weight,
                bias,
            },
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        // NaN passes through so divergence stays visible in the loss
        let out = self
            .value(input)
            .iter()
            .map(|&v| if v < 0.0 { 0.0 } else { v })
            .collect();
        let rg = self.needs(input);
        self.push(self.shape(input).to_vec(), out, rg, Op::Relu { input })
    }

    pub fn reshape(&mut self, input: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(input).len() {
            return Err(Error::dim(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape(input)),
            ));
        }
        let out = self.value(input).to_vec();
        let rg = self.needs(input);
        Ok(self.push(shape, out, rg, Op::Identity { input }))
    }

    /// Collapses all but the leading axis.
    pub fn flatten(&mut self, input: Var) -> Result<Var> {
        let n = self.shape(input)[0];
        let rest = self.value(input).len() / n;
        self.reshape(input, vec![n, rest])
    }

    /// Placeholder where a dropout layer would sit; passes values through.
    pub fn dropout_hook(&mut self, input: Var) -> Var {
        let out = self.value(input).to_vec();
        let rg = self.needs(input);
        self.push(self.shape(input).to_vec(), out, rg, Op::Identity { input })
    }

    /// Row-wise softmax of an `N×C` tensor, max-shifted.
    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        let (_, c) = shape2(self.shape(input), "softmax", "logits")?;
        let mut out = self.value(input).to_vec();
        for row in out.chunks_exact_mut(c) {
            softmax_row(row);
        }
        let rg = self.needs(input);
        Ok(self.push(self.shape(input).to_vec(), out, rg, Op::Softmax { input }))
    }

    /// Pools each channel of an `N×D×H×W` tensor over space, giving `N×D`.
    pub fn global_pool(&mut self, input: Var, config: PoolingConfig) -> Result<Var> {
        config.validate()?;
        let (n, d, h, w) = shape4(self.shape(input), "global_pool", "maps")?;
        let mut out = Vec::with_capacity(n * d);
        let mut argmax = Vec::with_capacity(n * d);
        for plane in self.value(input).chunks_exact(h * w) {
            let (v, i) = pool_values(plane, &config);
            out.push(v);
            argmax.push(i);
        }
        let rg = self.needs(input);
        Ok(self.push(
            vec![n, d],
            out,
            rg,
            Op::GlobalPool {
                input,
                config,
                argmax,
            },
        ))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).iter().sum();
        let rg = self.needs(input);
        self.push(vec![1], vec![s], rg, Op::Sum { input })
    }

    pub fn mean(&mut self, input: Var) -> Var {
        let n = self.value(input).len() as f64;
        let s = self.sum(input);
        self.combine(&[(s, 1.0 / n)]).expect("scalar combine")
    }

    pub fn square(&mut self, input: Var) -> Var {
        let out = self.value(input).iter().map(|v| v * v).collect();
        let rg = self.needs(input);
        self.push(self.shape(input).to_vec(), out, rg, Op::Square { input })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                "mul",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(self.shape(a).to_vec(), out, rg, Op::Mul { a, b }))
    }

    /// Linear combination `Σ coefᵢ·varᵢ` of equally shaped values.
    pub fn combine(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let (first, _) = *terms
            .first()
            .ok_or_else(|| Error::Usage("combine needs at least one term".into()))?;
        let shape = self.shape(first).to_vec();
        let mut out = vec![0.0; self.value(first).len()];
        for &(v, coef) in terms {
            if self.shape(v) != shape.as_slice() {
                return Err(Error::dim(
                    "combine",
                    format!("{:?} vs {shape:?}", self.shape(v)),
                ));
            }
            for (o, x) in out.iter_mut().zip(self.value(v)) {
                *o += coef * x;
            }
        }
        let rg = terms.iter().any(|&(v, _)| self.needs(v));
        Ok(self.push(
            shape,
            out,
            rg,
            Op::Combine {
                terms: terms.to_vec(),
            },
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.combine(&[(a, 1.0), (b, 1.0)])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.combine(&[(a, 1.0), (b, -1.0)])
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.combine(&[(a, k)]).expect("single-term combine")
    }

    /// Batch-mean (optionally class-weighted) cross-entropy of `softmax(logits)`
    /// against class indices, computed from the log-softmax.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: Option<&[f64]>,
    ) -> Result<Var> {
        const OP: &str = "softmax_cross_entropy";
        let (n, c) = shape2(self.shape(logits), OP, "logits")?;
        if targets.len() != n {
            return Err(Error::dim(
                OP,
                format!("{} targets for {n} rows", targets.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Label(format!(
                "target class {bad} out of range for {c} classes"
            )));
        }
        validate_weights(weights, c, OP)?;
        let mut probs = self.value(logits).to_vec();
        let mut total = 0.0;
        let floor = LOG_CLAMP.ln();
        for (row, &t) in probs.chunks_exact_mut(c).zip(targets) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            let log_p = clamp_below(row[t] - lse, floor);
            let w = weights.map_or(1.0, |w| w[t]);
            total += -(w * log_p);
            softmax_row(row);
        }
        let rg = self.needs(logits);
        Ok(self.push(
            vec![1],
            vec![total / n as f64],
            rg,
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.map(<[f64]>::to_vec),
                probs,
            },
        ))
    }

    /// Batch-mean cross-entropy `−Σ w_j·y_j·log(ŷ_j)` on probabilities with a
    /// one-hot label matrix; `weights = None` is the unweighted form.
    pub fn cross_entropy_probs(
        &mut self,
        probs: Var,
        labels: &Tensor,
        weights: Option<&[f64]>,
    ) -> Result<Var> {
        const OP: &str = "cross_entropy";
        let (n, c) = shape2(self.shape(probs), OP, "probabilities")?;
        if labels.shape() != [n, c] {
            return Err(Error::dim(
                OP,
                format!("labels {:?} vs probabilities {:?}", labels.shape(), [n, c]),
            ));
        }
        for (i, row) in labels.data().chunks_exact(c).enumerate() {
            let ones = row.iter().filter(|&&v| v == 1.0).count();
            let zeros = row.iter().filter(|&&v| v == 0.0).count();
            if ones != 1 || zeros != c - 1 {
                return Err(Error::Label(format!("row {i} is not one-hot: {row:?}")));
            }
        }
        validate_weights(weights, c, OP)?;
        let p = self.value(probs);
        let mut total = 0.0;
        for (prow, yrow) in p.chunks_exact(c).zip(labels.data().chunks_exact(c)) {
            for j in 0..c {
                let log_p = clamp_below(prow[j], LOG_CLAMP).ln();
                total += match weights {
                    Some(w) => -(w[j] * yrow[j] * log_p),
                    None => -(yrow[j] * log_p),
                };
            }
        }
        let rg = self.needs(probs);
        Ok(self.push(
            vec![1],
            vec![total / n as f64],
            rg,
            Op::CrossEntropyProbs {
                probs,
                labels: labels.data().to_vec(),
                weights: weights.map(<[f64]>::to_vec),
            },
        ))
    }

    /// Maps `N×3` similarity rows `(t_r, t_c, s)` to `N×6` affine rows.
    pub fn similarity_to_affine(&mut self, params: Var) -> Result<Var> {
        let (n, k) = shape2(self.shape(params), "similarity_to_affine", "params")?;
        if k != 3 {
            return Err(Error::dim(
                "similarity_to_affine",
                format!("expected 3 columns, got {k}"),
            ));
        }
        let mut out = Vec::with_capacity(6 * n);
        for row in self.value(params).chunks_exact(3) {
            let (t_r, t_c, s) = (row[0], row[1], row[2]);
            out.extend_from_slice(&[s, 0.0, t_r, 0.0, s, t_c]);
        }
        let rg = self.needs(params);
        Ok(self.push(vec![n, 6], out, rg, Op::SimilarityToAffine { params }))
    }

    /// Source coordinates `N×H×W×2` of the target lattice under each `N×6` warp.
    pub fn affine_grid(&mut self, theta: Var, height: usize, width: usize) -> Result<Var> {
        let (n, k) = shape2(self.shape(theta), "affine_grid", "theta")?;
        if k != 6 {
            return Err(Error::dim(
                "affine_grid",
                format!("expected 6 columns, got {k}"),
            ));
        }
        if height < 2 || width < 2 {
            return Err(Error::Config(format!(
                "grid needs at least 2 points per axis, got {height}×{width}"
            )));
        }
        let mut out = vec![0.0; n * height * width * 2];
        for (row, dst) in self
            .value(theta)
            .chunks_exact(6)
            .zip(out.chunks_exact_mut(height * width * 2))
        {
            stn::check_det(row)?;
            stn::affine_coords(row, height, width, dst);
        }
        let rg = self.needs(theta);
        Ok(self.push(
            vec![n, height, width, 2],
            out,
            rg,
            Op::AffineGrid {
                theta,
                height,
                width,
            },
        ))
    }

    /// Bilinear sampling of `N×C×H×W` images at `N×h×w×2` coordinates, zero
    /// padded, giving `N×C×h×w`.
    pub fn grid_sample(&mut self, image: Var, grid: Var) -> Result<Var> {
        const OP: &str = "grid_sample";
        let (n, c, h, w) = shape4(self.shape(image), OP, "image")?;
        let (gn, gh, gw, two) = shape4(self.shape(grid), OP, "grid")?;
        if gn != n || two != 2 {
            return Err(Error::dim(
                OP,
                format!("grid {:?} for images {:?}", self.shape(grid), [n, c, h, w]),
            ));
        }
        if h < 2 || w < 2 {
            return Err(Error::dim(OP, "image needs at least 2 pixels per axis"));
        }
        let cells = gh * gw;
        let mut out = vec![0.0; n * c * cells];
        {
            let img = self.value(image);
            let g = self.value(grid);
            for b in 0..n {
                stn::sample_forward(
                    &img[b * c * h * w..(b + 1) * c * h * w],
                    c,
                    h,
                    w,
                    &g[b * cells * 2..(b + 1) * cells * 2],
                    &mut out[b * c * cells..(b + 1) * c * cells],
                );
            }
        }
        let rg = self.needs(image) || self.needs(grid);
        Ok(self.push(vec![n, c, gh, gw], out, rg, Op::GridSample { image, grid }))
    }

    /// Reverse pass from a scalar `loss`, visiting each recorded node once in
    /// reverse order.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_node = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| Error::Usage("loss is not recorded on this tape".into()))?;
        if loss_node.value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_node.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut leaves: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if loss_node.requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.backward_node(node, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                leaves[idx] = Some(g);
            }
        }
        Ok(Gradients { leaves })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut [f64]> {
        if !self.needs(v) {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(
            grads[v.0]
                .get_or_insert_with(|| vec![0.0; len])
                .as_mut_slice(),
        )
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                geom,
                cols,
            } => {
                let n = node.shape[0];
                let o = node.shape[1];
                let patch = geom.patch_len();
                let out_len = geom.out_len();
                let img_len = geom.channels * geom.height * geom.width;
                if let Some(dk) = self.slot(grads, *kernel) {
                    for b in 0..n {
                        gemm_nt(
                            &g[b * o * out_len..(b + 1) * o * out_len],
                            &cols[b * patch * out_len..(b + 1) * patch * out_len],
                            dk,
                            o,
                            out_len,
                            patch,
                        );
                    }
                }
                if self.needs(*input) {
                    let kv = self.value(*kernel);
                    let mut dcol = vec![0.0; patch * out_len];
                    let dx = self.slot(grads, *input).expect("input needs grad");
                    for b in 0..n {
                        dcol.fill(0.0);
                        gemm_tn(
                            kv,
                            &g[b * o * out_len..(b + 1) * o * out_len],
                            &mut dcol,
                            patch,
                            o,
                            out_len,
                        );
                        col2im_add(&dcol, geom, &mut dx[b * img_len..(b + 1) * img_len]);
                    }
                }
            }
            Op::ChannelBias { input, bias } => {
                let c = node.shape[1];
                let hw = node.shape[2] * node.shape[3];
                if let Some(dx) = self.slot(grads, *input) {
                    add_into(dx, g);
                }
                if let Some(db) = self.slot(grads, *bias) {
                    for (i, plane) in g.chunks_exact(hw).enumerate() {
                        db[i % c] += plane.iter().sum::<f64>();
                    }
                }
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let (n, k) = (node.shape[0], node.shape[1]);
                let d = self.shape(*input)[1];
                if let Some(dx) = self.slot(grads, *input) {
                    gemm_nt(g, self.value(*weight), dx, n, k, d);
                }
                if let Some(dw) = self.slot(grads, *weight) {
                    gemm_tn(self.value(*input), g, dw, d, n, k);
                }
                if let Some(b) = bias {
                    if let Some(db) = self.slot(grads, *b) {
                        for row in g.chunks_exact(k) {
                            add_into(db, row);
                        }
                    }
                }
            }
            Op::Relu { input } => {
                let x = self.value(*input);
                if let Some(dx) = self.slot(grads, *input) {
                    for ((d, &gv), &xv) in dx.iter_mut().zip(g).zip(x) {
                        if xv > 0.0 {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Identity { input } => {
                if let Some(dx) = self.slot(grads, *input) {
                    add_into(dx, g);
                }
            }
            Op::Softmax { input } => {
                let c = node.shape[1];
                if let Some(dx) = self.slot(grads, *input) {
                    for ((drow, grow), yrow) in dx
                        .chunks_exact_mut(c)
                        .zip(g.chunks_exact(c))
                        .zip(node.value.chunks_exact(c))
                    {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            drow[j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                }
            }
            Op::GlobalPool {
                input,
                config,
                argmax,
            } => {
                let x = self.value(*input);
                let hw = self.shape(*input)[2] * self.shape(*input)[3];
                if let Some(dx) = self.slot(grads, *input) {
                    for (p, (dplane, xplane)) in
                        dx.chunks_exact_mut(hw).zip(x.chunks_exact(hw)).enumerate()
                    {
                        let gp = g[p];
                        match config.kind {
                            PoolKind::Avg => {
                                let share = gp / hw as f64;
                                dplane.iter_mut().for_each(|d| *d += share);
                            }
                            PoolKind::Max => dplane[argmax[p]] += gp,
                            PoolKind::Lse => {
                                let r = config.lse_sharpness;
                                let m = xplane[argmax[p]];
                                let z: f64 = xplane.iter().map(|&v| (r * (v - m)).exp()).sum();
                                for (d, &v) in dplane.iter_mut().zip(xplane) {
                                    *d += gp * (r * (v - m)).exp() / z;
                                }
                            }
                        }
                    }
                }
            }
            Op::Sum { input } => {
                if let Some(dx) = self.slot(grads, *input) {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Square { input } => {
                let x = self.value(*input);
                if let Some(dx) = self.slot(grads, *input) {
                    for ((d, &gv), &xv) in dx.iter_mut().zip(g).zip(x) {
                        *d += 2.0 * xv * gv;
                    }
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(da) = self.slot(grads, *a) {
                    for ((d, &gv), &y) in da.iter_mut().zip(g).zip(bv) {
                        *d += gv * y;
                    }
                }
                if let Some(db) = self.slot(grads, *b) {
                    for ((d, &gv), &x) in db.iter_mut().zip(g).zip(av) {
                        *d += gv * x;
                    }
                }
            }
            Op::Combine { terms } => {
                for &(v, coef) in terms {
                    if let Some(dx) = self.slot(grads, v) {
                        for (d, &gv) in dx.iter_mut().zip(g) {
                            *d += coef * gv;
                        }
                    }
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let c = self.shape(*logits)[1];
                let n = targets.len() as f64;
                let floor = LOG_CLAMP.ln();
                let z = self.value(*logits);
                if let Some(dz) = self.slot(grads, *logits) {
                    for (((drow, prow), &t), zrow) in dz
                        .chunks_exact_mut(c)
                        .zip(probs.chunks_exact(c))
                        .zip(targets)
                        .zip(z.chunks_exact(c))
                    {
                        let max = zrow.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        let lse = max + zrow.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                        if zrow[t] - lse < floor {
                            continue;
                        }
                        let scale = g[0] * weights.as_ref().map_or(1.0, |w| w[t]) / n;
                        for j in 0..c {
                            let y = if j == t { 1.0 } else { 0.0 };
                            drow[j] += scale * (prow[j] - y);
                        }
                    }
                }
            }
            Op::CrossEntropyProbs {
                probs,
                labels,
                weights,
            } => {
                let c = self.shape(*probs)[1];
                let n = (labels.len() / c) as f64;
                let p = self.value(*probs);
                if let Some(dp) = self.slot(grads, *probs) {
                    for (i, (d, (&pv, &y))) in dp.iter_mut().zip(p.iter().zip(labels)).enumerate() {
                        if y == 0.0 || pv <= LOG_CLAMP {
                            continue;
                        }
                        let w = weights.as_ref().map_or(1.0, |w| w[i % c]);
                        *d += -g[0] * w * y / (pv * n);
                    }
                }
            }
            Op::SimilarityToAffine { params } => {
                if let Some(dp) = self.slot(grads, *params) {
                    for (drow, grow) in dp.chunks_exact_mut(3).zip(g.chunks_exact(6)) {
                        drow[0] += grow[2];
                        drow[1] += grow[5];
                        drow[2] += grow[0] + grow[4];
                    }
                }
            }
            Op::AffineGrid {
                theta,
                height,
                width,
            } => {
                if let Some(dt) = self.slot(grads, *theta) {
                    for (drow, grow) in dt
                        .chunks_exact_mut(6)
                        .zip(g.chunks_exact(height * width * 2))
                    {
                        stn::affine_coords_backward(grow, *height, *width, drow);
                    }
                }
            }
            Op::GridSample { image, grid } => {
                let (n, c, h, w) = {
                    let s = self.shape(*image);
                    (s[0], s[1], s[2], s[3])
                };
                let cells = node.shape[2] * node.shape[3];
                let img = self.value(*image);
                let coords = self.value(*grid);
                let need_img = self.needs(*image);
                let need_grid = self.needs(*grid);
                let mut dimg = need_img.then(|| vec![0.0; img.len()]);
                let mut dgrid = need_grid.then(|| vec![0.0; coords.len()]);
                for b in 0..n {
                    stn::sample_backward(
                        &img[b * c * h * w..(b + 1) * c * h * w],
                        c,
                        h,
                        w,
                        &coords[b * cells * 2..(b + 1) * cells * 2],
                        &g[b * c * cells..(b + 1) * c * cells],
                        dimg.as_mut()
                            .map(|d| &mut d[b * c * h * w..(b + 1) * c * h * w]),
                        dgrid
                            .as_mut()
                            .map(|d| &mut d[b * cells * 2..(b + 1) * cells * 2]),
                    );
                }
                if let (Some(src), Some(dst)) = (dimg, self.slot(grads, *image)) {
                    add_into(dst, &src);
                }
                if let (Some(src), Some(dst)) = (dgrid, self.slot(grads, *grid)) {
                    add_into(dst, &src);
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// `max(v, floor)` that keeps NaN.
fn clamp_below(v: f64, floor: f64) -> f64 {
    if v < floor {
        floor
    } else {
        v
    }
}

pub(crate) fn softmax_row(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}
