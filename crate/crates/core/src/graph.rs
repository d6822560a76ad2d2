//! Tape-style reverse-mode automatic differentiation.
//!
//! A [`Graph`] is an append-only arena of nodes. Every operator validates its
//! input shapes, computes its forward value eagerly and records what its
//! backward rule needs. [`Graph::backward`] walks the arena in exact reverse
//! insertion order, which is a reverse topological order because inputs must
//! exist before their consumers, and adds the resulting adjoints into the
//! gradient buffers of the leaves that requested them.

use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, shape_err, ConvGeometry, Tensor, TensorError};

/// Handle to a node inside one [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf {
        requires_grad: bool,
    },
    MatMul {
        a: NodeId,
        b: NodeId,
    },
    Transpose {
        x: NodeId,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        geo: ConvGeometry,
        cols: Vec<f64>,
    },
    Relu {
        x: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    BiasAdd {
        x: NodeId,
        bias: NodeId,
    },
    ScaleShift {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
    },
    MaxPool {
        x: NodeId,
        argmax: Vec<usize>,
    },
    Flatten {
        x: NodeId,
    },
    Sum {
        x: NodeId,
    },
    SoftmaxCrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    /// Some trainable leaf is reachable through this node.
    needs_grad: bool,
}

impl Op {
    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf { .. } => vec![],
            Op::MatMul { a, b } | Op::Add { a, b } | Op::Mul { a, b } => vec![*a, *b],
            Op::Conv2d { x, w, .. } => vec![*x, *w],
            Op::BiasAdd { x, bias } => vec![*x, *bias],
            Op::ScaleShift { x, gamma, beta } => vec![*x, *gamma, *beta],
            Op::Transpose { x }
            | Op::Relu { x }
            | Op::MaxPool { x, .. }
            | Op::Flatten { x }
            | Op::Sum { x } => vec![*x],
            Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

/// Arena of recorded operations.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        let needs_grad = match op {
            Op::Leaf { requires_grad } => requires_grad,
            _ => op.inputs().iter().any(|&i| self.needs(i)),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Trainable leaf: receives a gradient buffer on [`backward`](Self::backward).
    pub fn param(&mut self, mut value: Tensor) -> NodeId {
        value.zero_grad();
        self.push(
            value,
            Op::Leaf {
                requires_grad: true,
            },
        )
    }

    /// Constant leaf: never receives a gradient.
    pub fn constant(&mut self, mut value: Tensor) -> NodeId {
        value.zero_grad();
        self.push(
            value,
            Op::Leaf {
                requires_grad: false,
            },
        )
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].value.grad()
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.value.zero_grad();
        }
    }

    fn data(&self, id: NodeId) -> &[f64] {
        self.nodes[id.0].value.data()
    }

    // -----------------------------------------------------------------------
    // operators
    // -----------------------------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err(
                "matmul",
                format!("cannot multiply {sa:?} by {sb:?}"),
            ));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm_nn(self.data(a), self.data(b), &mut out, m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b }))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(shape_err("transpose", format!("expected 2-D, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let src = self.data(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose { x }))
    }

    /// Cross-correlation of `x[N×C×H×W]` with `w[OC×C×kh×kw]`.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId, TensorError> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 {
            return Err(shape_err(
                "conv2d",
                format!("expected 4-D input and kernel, got {sx:?} and {sw:?}"),
            ));
        }
        if sx[1] != sw[1] {
            return Err(shape_err(
                "conv2d",
                format!("input has {} channels, kernel expects {}", sx[1], sw[1]),
            ));
        }
        let geo = ConvGeometry::new(sx[1], sx[2], sx[3], sw[2], sw[3], stride, padding)?;
        let (batch, oc) = (sx[0], sw[0]);
        let (patch, positions) = (geo.patch_len(), geo.out_positions());
        let image_len = sx[1] * sx[2] * sx[3];
        // one wide column matrix for the whole batch: row r of sample n lives at
        // cols[r·wide + n·positions..]
        let wide = batch * positions;
        let mut cols = vec![0.0; patch * wide];
        let mut out = Vec::with_capacity(batch * oc * positions);
        {
            let xd = self.data(x);
            for n in 0..batch {
                let image = &xd[n * image_len..(n + 1) * image_len];
                geo.im2col_strided(image, &mut cols[n * positions..], wide);
            }
            let mut tmp = vec![0.0; oc * wide];
            gemm_nn(self.data(w), &cols, &mut tmp, oc, patch, wide);
            for n in 0..batch {
                for o in 0..oc {
                    out.extend_from_slice(&tmp[o * wide + n * positions..][..positions]);
                }
            }
        }
        let value = Tensor::new(vec![batch, oc, geo.out_h, geo.out_w], out)?;
        Ok(self.push(value, Op::Conv2d { x, w, geo, cols }))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let src = &self.nodes[x.0].value;
        let out = src.data().iter().map(|&v| v.max(0.0)).collect();
        let value = Tensor::new(src.shape().to_vec(), out)?;
        Ok(self.push(value, Op::Relu { x }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.same_shape("add", a, b)?;
        let out = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        Ok(self.push(value, Op::Add { a, b }))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.same_shape("mul", a, b)?;
        let out = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        Ok(self.push(value, Op::Mul { a, b }))
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    /// Adds `bias[C]` along axis 1 of an `N×C` or `N×C×H×W` tensor.
    pub fn bias_add(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId, TensorError> {
        let (batch, channels, inner) = self.channel_layout("bias_add", x, &[bias])?;
        let mut out = self.data(x).to_vec();
        let b = self.data(bias);
        for sample in out.chunks_mut(channels * inner).take(batch) {
            for (plane, &bc) in sample.chunks_mut(inner).zip(b) {
                plane.iter_mut().for_each(|v| *v += bc);
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(value, Op::BiasAdd { x, bias }))
    }

    /// Per-channel affine map `γ_c·x + β_c` along axis 1.
    pub fn scale_shift(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
    ) -> Result<NodeId, TensorError> {
        let (batch, channels, inner) = self.channel_layout("scale_shift", x, &[gamma, beta])?;
        let mut out = self.data(x).to_vec();
        let (g, b) = (self.data(gamma), self.data(beta));
        for n in 0..batch {
            for c in 0..channels {
                let start = (n * channels + c) * inner;
                out[start..start + inner]
                    .iter_mut()
                    .for_each(|v| *v = g[c] * *v + b[c]);
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(value, Op::ScaleShift { x, gamma, beta }))
    }

    fn channel_layout(
        &self,
        op: &'static str,
        x: NodeId,
        per_channel: &[NodeId],
    ) -> Result<(usize, usize, usize), TensorError> {
        let s = self.shape(x);
        if s.len() != 2 && s.len() != 4 {
            return Err(shape_err(
                op,
                format!("expected 2-D or 4-D input, got {s:?}"),
            ));
        }
        let channels = s[1];
        for &p in per_channel {
            if self.shape(p) != [channels] {
                return Err(shape_err(
                    op,
                    format!(
                        "per-channel parameter has shape {:?}, input has {channels} channels",
                        self.shape(p)
                    ),
                ));
            }
        }
        Ok((s[0], channels, s[2..].iter().product()))
    }

    /// Non-overlapping `size×size` max pooling (stride = size, trailing rows/cols dropped).
    /// Ties go to the lowest flat index.
    pub fn maxpool2d(&mut self, x: NodeId, size: usize) -> Result<NodeId, TensorError> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(shape_err(
                "maxpool2d",
                format!("expected 4-D input, got {s:?}"),
            ));
        }
        if size == 0 || s[2] < size || s[3] < size {
            return Err(shape_err(
                "maxpool2d",
                format!("window {size} does not fit {}×{}", s[2], s[3]),
            ));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (oh, ow) = (h / size, w / size);
        let src = self.data(x);
        let mut out = Vec::with_capacity(planes * oh * ow);
        let mut argmax = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            let base = p * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * size * w + ox * size;
                    for ky in 0..size {
                        for kx in 0..size {
                            let idx = base + (oy * size + ky) * w + ox * size + kx;
                            if src[idx] > src[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(vec![s[0], s[1], oh, ow], out)?;
        Ok(self.push(value, Op::MaxPool { x, argmax }))
    }

    /// `N×C×H×W → N×(C·H·W)`, channel-major.
    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let s = self.shape(x);
        if s.len() < 2 {
            return Err(shape_err(
                "flatten",
                format!("expected batch axis, got {s:?}"),
            ));
        }
        let shape = vec![s[0], s[1..].iter().product()];
        let value = Tensor::new(shape, self.data(x).to_vec())?;
        Ok(self.push(value, Op::Flatten { x }))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let total = self.data(x).iter().sum();
        Ok(self.push(Tensor::scalar(total), Op::Sum { x }))
    }

    /// Mean softmax cross-entropy over the batch, stabilised by subtracting each row's max.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: NodeId,
        labels: &[usize],
    ) -> Result<NodeId, TensorError> {
        let s = self.shape(logits);
        if s.len() != 2 {
            return Err(shape_err(
                "softmax_cross_entropy",
                format!("expected N×K logits, got {s:?}"),
            ));
        }
        let (batch, classes) = (s[0], s[1]);
        if labels.len() != batch {
            return Err(shape_err(
                "softmax_cross_entropy",
                format!("{} labels for batch of {batch}", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(TensorError::Input {
                op: "softmax_cross_entropy",
                detail: format!("label {bad} out of range for {classes} classes"),
            });
        }
        let z = self.data(logits);
        let mut probs = vec![0.0; batch * classes];
        let mut loss = 0.0;
        for n in 0..batch {
            let row = &z[n * classes..(n + 1) * classes];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                probs[n * classes + j] = e;
                denom += e;
            }
            probs[n * classes..(n + 1) * classes]
                .iter_mut()
                .for_each(|p| *p /= denom);
            loss += denom.ln() - (row[labels[n]] - max);
        }
        loss /= batch as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    // -----------------------------------------------------------------------
    // reverse pass
    // -----------------------------------------------------------------------

    /// Propagates `d loss / d node` to every trainable leaf, adding into
    /// existing gradient buffers. Leaves the loss does not depend on get a
    /// zero buffer.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), TensorError> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarRoot(self.shape(loss).to_vec()));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(upstream) = adj[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf { requires_grad } => {
                    if *requires_grad {
                        self.nodes[idx].value.accumulate_grad(&upstream);
                    }
                }
                Op::MatMul { a, b } => {
                    let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                    let n = self.shape(*b)[1];
                    if self.needs(*a) {
                        let mut da = vec![0.0; m * k];
                        gemm_nt(&upstream, self.data(*b), &mut da, m, n, k);
                        accumulate(&mut adj, *a, da);
                    }
                    if self.needs(*b) {
                        let mut db = vec![0.0; k * n];
                        gemm_tn(self.data(*a), &upstream, &mut db, k, m, n);
                        accumulate(&mut adj, *b, db);
                    }
                }
                Op::Transpose { x } => {
                    let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                    let mut dx = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            dx[i * c + j] = upstream[j * r + i];
                        }
                    }
                    accumulate(&mut adj, *x, dx);
                }
                Op::Conv2d { x, w, geo, cols } => {
                    let batch = self.shape(*x)[0];
                    let oc = self.shape(*w)[0];
                    let (patch, positions) = (geo.patch_len(), geo.out_positions());
                    let image_len = geo.channels * geo.height * geo.width;
                    let wide = batch * positions;
                    let mut dout = Vec::with_capacity(oc * wide);
                    for o in 0..oc {
                        for n in 0..batch {
                            dout.extend_from_slice(
                                &upstream[(n * oc + o) * positions..][..positions],
                            );
                        }
                    }
                    if self.needs(*w) {
                        let mut dw = vec![0.0; oc * patch];
                        gemm_nt(&dout, cols, &mut dw, oc, wide, patch);
                        accumulate(&mut adj, *w, dw);
                    }
                    if self.needs(*x) {
                        let mut dcols = vec![0.0; patch * wide];
                        gemm_tn(self.data(*w), &dout, &mut dcols, patch, oc, wide);
                        let mut dx = vec![0.0; batch * image_len];
                        for n in 0..batch {
                            let image = &mut dx[n * image_len..(n + 1) * image_len];
                            geo.col2im_strided(&dcols[n * positions..], image, wide);
                        }
                        accumulate(&mut adj, *x, dx);
                    }
                }
                Op::Relu { x } => {
                    let dx = self
                        .data(*x)
                        .iter()
                        .zip(&upstream)
                        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                        .collect();
                    accumulate(&mut adj, *x, dx);
                }
                Op::Add { a, b } => {
                    accumulate(&mut adj, *a, upstream.clone());
                    accumulate(&mut adj, *b, upstream);
                }
                Op::Mul { a, b } => {
                    let da = self.data(*b).iter().zip(&upstream).map(|(v, g)| v * g);
                    let da = da.collect();
                    let db = self.data(*a).iter().zip(&upstream).map(|(v, g)| v * g);
                    let db = db.collect();
                    accumulate(&mut adj, *a, da);
                    accumulate(&mut adj, *b, db);
                }
                Op::BiasAdd { x, bias } => {
                    let db = per_channel_sum(self.shape(*x), &upstream, None);
                    accumulate(&mut adj, *bias, db);
                    accumulate(&mut adj, *x, upstream);
                }
                Op::ScaleShift { x, gamma, beta } => {
                    let shape = self.shape(*x).to_vec();
                    let dgamma = per_channel_sum(&shape, &upstream, Some(self.data(*x)));
                    let dbeta = per_channel_sum(&shape, &upstream, None);
                    let (channels, inner) = (shape[1], shape[2..].iter().product::<usize>());
                    let g = self.data(*gamma);
                    let dx = upstream
                        .iter()
                        .enumerate()
                        .map(|(i, &u)| u * g[(i / inner) % channels])
                        .collect();
                    accumulate(&mut adj, *x, dx);
                    accumulate(&mut adj, *gamma, dgamma);
                    accumulate(&mut adj, *beta, dbeta);
                }
                Op::MaxPool { x, argmax } => {
                    let mut dx = vec![0.0; self.value(*x).numel()];
                    for (&src, &g) in argmax.iter().zip(&upstream) {
                        dx[src] += g;
                    }
                    accumulate(&mut adj, *x, dx);
                }
                Op::Flatten { x } => accumulate(&mut adj, *x, upstream),
                Op::Sum { x } => {
                    let dx = vec![upstream[0]; self.value(*x).numel()];
                    accumulate(&mut adj, *x, dx);
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let batch = labels.len();
                    let classes = probs.len() / batch;
                    let scale = upstream[0] / batch as f64;
                    let mut dz: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                    for (n, &label) in labels.iter().enumerate() {
                        dz[n * classes + label] -= scale;
                    }
                    accumulate(&mut adj, *logits, dz);
                }
            }
        }

        for node in &mut self.nodes {
            if let Op::Leaf {
                requires_grad: true,
            } = node.op
            {
                node.value.ensure_grad();
            }
        }
        Ok(())
    }
}

fn accumulate(adj: &mut [Option<Vec<f64>>], id: NodeId, delta: Vec<f64>) {
    match &mut adj[id.0] {
        Some(existing) => existing.iter_mut().zip(&delta).for_each(|(e, d)| *e += d),
        slot @ None => *slot = Some(delta),
    }
}

/// Sums `upstream` (optionally weighted by `weight`) over every axis but 1.
fn per_channel_sum(shape: &[usize], upstream: &[f64], weight: Option<&[f64]>) -> Vec<f64> {
    let (channels, inner) = (shape[1], shape[2..].iter().product::<usize>());
    let mut out = vec![0.0; channels];
    for (i, &u) in upstream.iter().enumerate() {
        let w = weight.map_or(1.0, |w| w[i]);
        out[(i / inner) % channels] += u * w;
    }
    out
}
