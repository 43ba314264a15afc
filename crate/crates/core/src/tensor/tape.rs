use std::collections::BTreeMap;

use crate::error::{dim_error, Error, Result};
use crate::tensor::{row_major_strides, ParamStore, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActivationKind {
    Identity,
    Sigmoid,
    Relu,
}

impl ActivationKind {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "identity" => Ok(ActivationKind::Identity),
            "sigmoid" => Ok(ActivationKind::Sigmoid),
            "relu" => Ok(ActivationKind::Relu),
            other => Err(Error::Config(format!("unknown activation kind `{other}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ActivationKind::Identity => "identity",
            ActivationKind::Sigmoid => "sigmoid",
            ActivationKind::Relu => "relu",
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    ConvCircular {
        input: NodeId,
        kernel: NodeId,
        stride: Vec<usize>,
        offset: Vec<usize>,
    },
    Affine {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    BiasAdd {
        input: NodeId,
        bias: NodeId,
    },
    Activation {
        input: NodeId,
        kind: ActivationKind,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        input: NodeId,
        factor: f64,
    },
    Reshape {
        input: NodeId,
    },
    BlockToLattice {
        input: NodeId,
        t: usize,
        s: usize,
        dims: usize,
        channels: usize,
    },
    Mse {
        a: NodeId,
        b: NodeId,
    },
}

struct Node {
    values: Vec<f64>,
    shape: Vec<usize>,
    requires_grad: bool,
    op: Op,
}

/// Gradients produced by one backward pass, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. a node, if the node participates.
    pub fn wrt(&self, id: NodeId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }
}

/// Records operations in execution order; every node's inputs precede it,
/// so one reverse sweep is a valid topological backward pass.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
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

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn values(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].values
    }

    pub fn value_scalar(&self, id: NodeId) -> Result<f64> {
        let n = &self.nodes[id.0];
        if n.values.len() != 1 {
            return Err(Error::Usage(format!(
                "expected scalar node, found shape {:?}",
                n.shape
            )));
        }
        Ok(n.values[0])
    }

    pub fn tensor(&self, id: NodeId) -> Tensor {
        let n = &self.nodes[id.0];
        Tensor::new(n.shape.clone(), n.values.clone()).expect("node shape is consistent")
    }

    pub fn leaf(&mut self, tensor: &Tensor) -> NodeId {
        self.push(
            tensor.values().to_vec(),
            tensor.shape().to_vec(),
            tensor.requires_grad(),
            Op::Leaf,
        )
    }

    /// Leaf that never receives a gradient regardless of the tensor flag.
    pub fn constant(&mut self, tensor: &Tensor) -> NodeId {
        self.push(
            tensor.values().to_vec(),
            tensor.shape().to_vec(),
            false,
            Op::Leaf,
        )
    }

    fn push(&mut self, values: Vec<f64>, shape: Vec<usize>, requires_grad: bool, op: Op) -> NodeId {
        self.nodes.push(Node {
            values,
            shape,
            requires_grad,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Circular convolution over 1-3 axes with trailing channels.
    ///
    /// `input` is `[e_1, .., e_A, c_in]`, `kernel` is `[k_1, .., k_A, c_in, c_out]`
    /// and the output is `[e_1/s_1, .., e_A/s_A, c_out]`. All axes index
    /// periodically. Stride-1 axes center the kernel (`[0,1,0]` is the
    /// identity); strided axes read non-overlapping windows starting at
    /// `o * stride`, so stride == kernel extent partitions the lattice
    /// into aligned blocks.
    pub fn conv_circular(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        stride: &[usize],
    ) -> Result<NodeId> {
        let in_shape = self.nodes[input.0].shape.clone();
        let k_shape = self.nodes[kernel.0].shape.clone();
        let axes = stride.len();
        if axes == 0 || axes > 3 {
            return Err(Error::Config(format!(
                "conv_circular supports 1-3 axes, got stride {stride:?}"
            )));
        }
        if in_shape.len() != axes + 1 {
            return Err(dim_error(
                format!("input with {} axes + channels", axes),
                &in_shape,
            ));
        }
        if k_shape.len() != axes + 2 {
            return Err(dim_error(
                format!("kernel with {} axes + in/out channels", axes),
                &k_shape,
            ));
        }
        let c_in = in_shape[axes];
        if k_shape[axes] != c_in {
            return Err(dim_error(&in_shape, &k_shape));
        }
        let c_out = k_shape[axes + 1];
        let mut out_shape = Vec::with_capacity(axes + 1);
        let mut offset = Vec::with_capacity(axes);
        for a in 0..axes {
            let (extent, k, s) = (in_shape[a], k_shape[a], stride[a]);
            if k > extent {
                return Err(dim_error(
                    format!("kernel extent <= input extent on axis {a} ({extent})"),
                    &k_shape,
                ));
            }
            if s == 0 || extent % s != 0 {
                return Err(Error::Config(format!(
                    "stride {s} does not divide extent {extent} on axis {a}"
                )));
            }
            out_shape.push(extent / s);
            offset.push(if s == 1 { (k - 1) / 2 } else { 0 });
        }
        out_shape.push(c_out);

        let values = conv_forward(
            &self.nodes[input.0].values,
            &in_shape,
            &self.nodes[kernel.0].values,
            &k_shape,
            stride,
            &offset,
            &out_shape,
        );
        let rg = self.needs_grad(&[input, kernel]);
        Ok(self.push(
            values,
            out_shape,
            rg,
            Op::ConvCircular {
                input,
                kernel,
                stride: stride.to_vec(),
                offset,
            },
        ))
    }

    /// `input [.., c_in] x weight [c_in, c_out] + bias [c_out]`, applied at
    /// every leading position (broadcast over lattice sites).
    pub fn affine(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let in_shape = self.nodes[input.0].shape.clone();
        let w_shape = self.nodes[weight.0].shape.clone();
        let b_shape = self.nodes[bias.0].shape.clone();
        if in_shape.is_empty() || w_shape.len() != 2 {
            return Err(dim_error("input [.., c_in], weight [c_in, c_out]", &w_shape));
        }
        let c_in = *in_shape.last().expect("non-empty shape");
        let (w_in, c_out) = (w_shape[0], w_shape[1]);
        if w_in != c_in {
            return Err(dim_error(&in_shape, &w_shape));
        }
        if b_shape != [c_out] {
            return Err(dim_error(vec![c_out], &b_shape));
        }
        let sites = self.nodes[input.0].values.len() / c_in;
        let mut values = vec![0.0; sites * c_out];
        {
            let x = &self.nodes[input.0].values;
            let w = &self.nodes[weight.0].values;
            let b = &self.nodes[bias.0].values;
            for site in 0..sites {
                for co in 0..c_out {
                    let mut acc = b[co];
                    for ci in 0..c_in {
                        acc += x[site * c_in + ci] * w[ci * c_out + co];
                    }
                    values[site * c_out + co] = acc;
                }
            }
        }
        let mut out_shape = in_shape;
        *out_shape.last_mut().expect("non-empty shape") = c_out;
        let rg = self.needs_grad(&[input, weight, bias]);
        Ok(self.push(values, out_shape, rg, Op::Affine { input, weight, bias }))
    }

    /// Adds a per-channel bias over the trailing axis.
    pub fn bias_add(&mut self, input: NodeId, bias: NodeId) -> Result<NodeId> {
        let in_shape = self.nodes[input.0].shape.clone();
        let channels = *in_shape
            .last()
            .ok_or_else(|| dim_error("input with channels", &in_shape))?;
        let b_shape = self.nodes[bias.0].shape.clone();
        if b_shape != [channels] {
            return Err(dim_error(vec![channels], &b_shape));
        }
        let mut values = self.nodes[input.0].values.clone();
        let b = &self.nodes[bias.0].values;
        for (i, v) in values.iter_mut().enumerate() {
            *v += b[i % channels];
        }
        let rg = self.needs_grad(&[input, bias]);
        Ok(self.push(values, in_shape, rg, Op::BiasAdd { input, bias }))
    }

    pub fn activation(&mut self, input: NodeId, kind: ActivationKind) -> NodeId {
        let values: Vec<f64> = self.nodes[input.0]
            .values
            .iter()
            .map(|&x| match kind {
                ActivationKind::Identity => x,
                ActivationKind::Sigmoid => sigmoid(x),
                ActivationKind::Relu => x.max(0.0),
            })
            .collect();
        let shape = self.nodes[input.0].shape.clone();
        let rg = self.needs_grad(&[input]);
        self.push(values, shape, rg, Op::Activation { input, kind })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(dim_error(&self.nodes[a.0].shape, &self.nodes[b.0].shape));
        }
        let values: Vec<f64> = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(values, shape, rg, Op::Add { a, b }))
    }

    pub fn scale(&mut self, input: NodeId, factor: f64) -> NodeId {
        let values: Vec<f64> = self.nodes[input.0].values.iter().map(|v| v * factor).collect();
        let shape = self.nodes[input.0].shape.clone();
        let rg = self.needs_grad(&[input]);
        self.push(values, shape, rg, Op::Scale { input, factor })
    }

    pub fn reshape(&mut self, input: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[input.0].values.len() {
            return Err(dim_error(&self.nodes[input.0].shape, &shape));
        }
        let values = self.nodes[input.0].values.clone();
        let rg = self.needs_grad(&[input]);
        Ok(self.push(values, shape, rg, Op::Reshape { input }))
    }

    /// Scatters per-cell block vectors onto the fine lattice.
    ///
    /// `input [m_1, .., m_d, t*s^d*ch]` -> `output [t, m_1*s, .., m_d*s, ch]`.
    /// The block vector is indexed row-major as `[t, s, .., s, ch]`, matching
    /// the layout an encoder kernel of the same factors reads.
    pub fn block_to_lattice(
        &mut self,
        input: NodeId,
        t: usize,
        s: usize,
        channels: usize,
    ) -> Result<NodeId> {
        let in_shape = self.nodes[input.0].shape.clone();
        if in_shape.len() < 2 {
            return Err(dim_error("[macro sites.., block values]", &in_shape));
        }
        let dims = in_shape.len() - 1;
        let block_len = t * s.pow(dims as u32) * channels;
        if *in_shape.last().expect("non-empty") != block_len {
            return Err(dim_error(
                format!("block vector of length {block_len}"),
                &in_shape,
            ));
        }
        let mut out_shape = Vec::with_capacity(dims + 2);
        out_shape.push(t);
        for &m in &in_shape[..dims] {
            out_shape.push(m * s);
        }
        out_shape.push(channels);
        let values = block_scatter(
            &self.nodes[input.0].values,
            &in_shape[..dims],
            t,
            s,
            channels,
        );
        let rg = self.needs_grad(&[input]);
        Ok(self.push(
            values,
            out_shape,
            rg,
            Op::BlockToLattice {
                input,
                t,
                s,
                dims,
                channels,
            },
        ))
    }

    /// Mean squared difference; returns a scalar node.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(dim_error(&self.nodes[a.0].shape, &self.nodes[b.0].shape));
        }
        let n = self.nodes[a.0].values.len() as f64;
        let mut acc = 0.0;
        for (x, y) in self.nodes[a.0].values.iter().zip(&self.nodes[b.0].values) {
            let d = x - y;
            acc += d * d;
        }
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(vec![acc / n], vec![1], rg, Op::Mse { a, b }))
    }

    /// Mean of several scalar nodes (batch loss).
    pub fn mean_of(&mut self, terms: &[NodeId]) -> Result<NodeId> {
        let mut iter = terms.iter();
        let mut acc = *iter
            .next()
            .ok_or_else(|| Error::Usage("mean_of needs at least one term".into()))?;
        for &t in iter {
            acc = self.add(acc, t)?;
        }
        Ok(self.scale(acc, 1.0 / terms.len() as f64))
    }

    /// Reverse sweep from a scalar loss. Returns one gradient per
    /// participating node; leaves without `requires_grad` get none.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients> {
        if self.nodes[loss.0].values.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, found shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(out_grad) = grads[idx].take() else {
                continue;
            };
            self.accumulate(idx, &out_grad, &mut grads);
            grads[idx] = Some(out_grad);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, idx: usize, out_grad: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::ConvCircular {
                input,
                kernel,
                stride,
                offset,
            } => {
                let in_node = &self.nodes[input.0];
                let k_node = &self.nodes[kernel.0];
                let gi = in_node.requires_grad;
                let gk = k_node.requires_grad;
                let mut in_grad = if gi { Some(self.grad_buf(grads, *input)) } else { None };
                let mut k_grad = if gk { Some(self.grad_buf(grads, *kernel)) } else { None };
                conv_backward(
                    &in_node.values,
                    &in_node.shape,
                    &k_node.values,
                    &k_node.shape,
                    stride,
                    offset,
                    &node.shape,
                    out_grad,
                    in_grad.as_deref_mut(),
                    k_grad.as_deref_mut(),
                );
                if let Some(g) = in_grad {
                    grads[input.0] = Some(g);
                }
                if let Some(g) = k_grad {
                    grads[kernel.0] = Some(g);
                }
            }
            Op::Affine { input, weight, bias } => {
                let c_in = *self.nodes[input.0].shape.last().expect("non-empty");
                let c_out = *node.shape.last().expect("non-empty");
                let sites = node.values.len() / c_out;
                let x = &self.nodes[input.0].values;
                let w = &self.nodes[weight.0].values;
                if self.nodes[input.0].requires_grad {
                    let mut g = self.grad_buf(grads, *input);
                    for site in 0..sites {
                        for ci in 0..c_in {
                            let mut acc = 0.0;
                            for co in 0..c_out {
                                acc += out_grad[site * c_out + co] * w[ci * c_out + co];
                            }
                            g[site * c_in + ci] += acc;
                        }
                    }
                    grads[input.0] = Some(g);
                }
                if self.nodes[weight.0].requires_grad {
                    let mut g = self.grad_buf(grads, *weight);
                    for site in 0..sites {
                        for ci in 0..c_in {
                            let xv = x[site * c_in + ci];
                            for co in 0..c_out {
                                g[ci * c_out + co] += xv * out_grad[site * c_out + co];
                            }
                        }
                    }
                    grads[weight.0] = Some(g);
                }
                if self.nodes[bias.0].requires_grad {
                    let mut g = self.grad_buf(grads, *bias);
                    for site in 0..sites {
                        for co in 0..c_out {
                            g[co] += out_grad[site * c_out + co];
                        }
                    }
                    grads[bias.0] = Some(g);
                }
            }
            Op::BiasAdd { input, bias } => {
                if self.nodes[input.0].requires_grad {
                    let mut g = self.grad_buf(grads, *input);
                    for (gi, go) in g.iter_mut().zip(out_grad) {
                        *gi += go;
                    }
                    grads[input.0] = Some(g);
                }
                if self.nodes[bias.0].requires_grad {
                    let channels = self.nodes[bias.0].values.len();
                    let mut g = self.grad_buf(grads, *bias);
                    for (i, go) in out_grad.iter().enumerate() {
                        g[i % channels] += go;
                    }
                    grads[bias.0] = Some(g);
                }
            }
            Op::Activation { input, kind } => {
                if self.nodes[input.0].requires_grad {
                    let mut g = self.grad_buf(grads, *input);
                    match kind {
                        ActivationKind::Identity => {
                            for (gi, go) in g.iter_mut().zip(out_grad) {
                                *gi += go;
                            }
                        }
                        ActivationKind::Sigmoid => {
                            for i in 0..g.len() {
                                let y = node.values[i];
                                g[i] += out_grad[i] * y * (1.0 - y);
                            }
                        }
                        ActivationKind::Relu => {
                            let x = &self.nodes[input.0].values;
                            for i in 0..g.len() {
                                if x[i] > 0.0 {
                                    g[i] += out_grad[i];
                                }
                            }
                        }
                    }
                    grads[input.0] = Some(g);
                }
            }
            Op::Add { a, b } => {
                for id in [a, b] {
                    if self.nodes[id.0].requires_grad {
                        let mut g = self.grad_buf(grads, *id);
                        for (gi, go) in g.iter_mut().zip(out_grad) {
                            *gi += go;
                        }
                        grads[id.0] = Some(g);
                    }
                }
            }
            Op::Scale { input, factor } => {
                if self.nodes[input.0].requires_grad {
                    let mut g = self.grad_buf(grads, *input);
                    for (gi, go) in g.iter_mut().zip(out_grad) {
                        *gi += go * factor;
                    }
                    grads[input.0] = Some(g);
                }
            }
            Op::Reshape { input } => {
                if self.nodes[input.0].requires_grad {
                    let mut g = self.grad_buf(grads, *input);
                    for (gi, go) in g.iter_mut().zip(out_grad) {
                        *gi += go;
                    }
                    grads[input.0] = Some(g);
                }
            }
            Op::BlockToLattice {
                input,
                t,
                s,
                dims,
                channels,
            } => {
                if self.nodes[input.0].requires_grad {
                    let mut g = self.grad_buf(grads, *input);
                    let macro_extents = &self.nodes[input.0].shape[..*dims];
                    block_gather_into(out_grad, macro_extents, *t, *s, *channels, &mut g);
                    grads[input.0] = Some(g);
                }
            }
            Op::Mse { a, b } => {
                let n = self.nodes[a.0].values.len() as f64;
                let scale = 2.0 * out_grad[0] / n;
                let av = &self.nodes[a.0].values;
                let bv = &self.nodes[b.0].values;
                if self.nodes[a.0].requires_grad {
                    let mut g = self.grad_buf(grads, *a);
                    for i in 0..av.len() {
                        g[i] += scale * (av[i] - bv[i]);
                    }
                    grads[a.0] = Some(g);
                }
                if self.nodes[b.0].requires_grad {
                    let mut g = self.grad_buf(grads, *b);
                    for i in 0..bv.len() {
                        g[i] -= scale * (av[i] - bv[i]);
                    }
                    grads[b.0] = Some(g);
                }
            }
        }
    }

    fn grad_buf(&self, grads: &mut [Option<Vec<f64>>], id: NodeId) -> Vec<f64> {
        grads[id.0]
            .take()
            .unwrap_or_else(|| vec![0.0; self.nodes[id.0].values.len()])
    }
}

/// Parameter leaves bound into a tape, keyed by store name.
pub struct BoundParams {
    ids: BTreeMap<String, NodeId>,
}

impl BoundParams {
    /// Adds every tensor of the store as a leaf. `trainable` overrides the
    /// per-tensor flag, letting stage 2 freeze an entire store.
    pub fn bind(tape: &mut Tape, store: &ParamStore, trainable: bool) -> Self {
        let mut ids = BTreeMap::new();
        for (name, tensor) in store.iter() {
            let id = if trainable {
                tape.leaf(&tensor.clone().with_grad())
            } else {
                tape.constant(tensor)
            };
            ids.insert(name.clone(), id);
        }
        BoundParams { ids }
    }

    pub fn id(&self, name: &str) -> Result<NodeId> {
        self.ids
            .get(name)
            .copied()
            .ok_or_else(|| Error::Usage(format!("parameter `{name}` not bound")))
    }

    /// Extracts gradients per parameter name (zeros where a parameter did
    /// not participate in the loss).
    pub fn gradients(&self, tape: &Tape, grads: &Gradients) -> BTreeMap<String, Vec<f64>> {
        self.ids
            .iter()
            .map(|(name, &id)| {
                let g = grads
                    .wrt(id)
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![0.0; tape.values(id).len()]);
                (name.clone(), g)
            })
            .collect()
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_forward(
    x: &[f64],
    in_shape: &[usize],
    k: &[f64],
    k_shape: &[usize],
    stride: &[usize],
    offset: &[usize],
    out_shape: &[usize],
) -> Vec<f64> {
    let axes = stride.len();
    let c_in = in_shape[axes];
    let c_out = out_shape[axes];
    let in_site_strides = row_major_strides(&in_shape[..axes]);
    let out_sites: usize = out_shape[..axes].iter().product();
    let taps: usize = k_shape[..axes].iter().product();
    let mut out = vec![0.0; out_sites * c_out];

    let mut ocoord = [0usize; 3];
    let mut tcoord = [0usize; 3];
    for out_site in 0..out_sites {
        unravel(out_site, &out_shape[..axes], &mut ocoord);
        for tap in 0..taps {
            unravel(tap, &k_shape[..axes], &mut tcoord);
            let mut in_site = 0;
            for a in 0..axes {
                let e = in_shape[a];
                let pos = (ocoord[a] * stride[a] + tcoord[a] + e - offset[a]) % e;
                in_site += pos * in_site_strides[a];
            }
            let x_base = in_site * c_in;
            let k_base = tap * c_in * c_out;
            let o_base = out_site * c_out;
            for ci in 0..c_in {
                let xv = x[x_base + ci];
                let kb = k_base + ci * c_out;
                for co in 0..c_out {
                    out[o_base + co] += xv * k[kb + co];
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    x: &[f64],
    in_shape: &[usize],
    k: &[f64],
    k_shape: &[usize],
    stride: &[usize],
    offset: &[usize],
    out_shape: &[usize],
    out_grad: &[f64],
    mut in_grad: Option<&mut [f64]>,
    mut k_grad: Option<&mut [f64]>,
) {
    let axes = stride.len();
    let c_in = in_shape[axes];
    let c_out = out_shape[axes];
    let in_site_strides = row_major_strides(&in_shape[..axes]);
    let out_sites: usize = out_shape[..axes].iter().product();
    let taps: usize = k_shape[..axes].iter().product();

    let mut ocoord = [0usize; 3];
    let mut tcoord = [0usize; 3];
    for out_site in 0..out_sites {
        unravel(out_site, &out_shape[..axes], &mut ocoord);
        for tap in 0..taps {
            unravel(tap, &k_shape[..axes], &mut tcoord);
            let mut in_site = 0;
            for a in 0..axes {
                let e = in_shape[a];
                let pos = (ocoord[a] * stride[a] + tcoord[a] + e - offset[a]) % e;
                in_site += pos * in_site_strides[a];
            }
            let x_base = in_site * c_in;
            let k_base = tap * c_in * c_out;
            let o_base = out_site * c_out;
            for ci in 0..c_in {
                let kb = k_base + ci * c_out;
                if let Some(gk) = k_grad.as_deref_mut() {
                    let xv = x[x_base + ci];
                    for co in 0..c_out {
                        gk[kb + co] += xv * out_grad[o_base + co];
                    }
                }
                if let Some(gx) = in_grad.as_deref_mut() {
                    let mut acc = 0.0;
                    for co in 0..c_out {
                        acc += k[kb + co] * out_grad[o_base + co];
                    }
                    gx[x_base + ci] += acc;
                }
            }
        }
    }
}

fn unravel(mut flat: usize, shape: &[usize], coord: &mut [usize; 3]) {
    for a in (0..shape.len()).rev() {
        coord[a] = flat % shape[a];
        flat /= shape[a];
    }
}

/// `input [macro sites, block]` -> fine lattice `[t, sites*s.., ch]`.
fn block_scatter(
    x: &[f64],
    macro_extents: &[usize],
    t: usize,
    s: usize,
    channels: usize,
) -> Vec<f64> {
    let dims = macro_extents.len();
    let block_len = t * s.pow(dims as u32) * channels;
    let macro_sites: usize = macro_extents.iter().product();
    let fine_extents: Vec<usize> = macro_extents.iter().map(|m| m * s).collect();
    let fine_site_strides = row_major_strides(&fine_extents);
    let fine_sites: usize = fine_extents.iter().product();
    let mut out = vec![0.0; t * fine_sites * channels];

    let mut mcoord = [0usize; 3];
    let mut rcoord = [0usize; 3];
    let within = vec![s; dims];
    let s_pow = s.pow(dims as u32);
    for msite in 0..macro_sites {
        unravel(msite, macro_extents, &mut mcoord);
        for frame in 0..t {
            for rem in 0..s_pow {
                unravel(rem, &within, &mut rcoord);
                let mut fine_site = 0;
                for a in 0..dims {
                    fine_site += (mcoord[a] * s + rcoord[a]) * fine_site_strides[a];
                }
                let block_idx = (frame * s_pow + rem) * channels;
                let out_base = (frame * fine_sites + fine_site) * channels;
                let in_base = msite * block_len + block_idx;
                for ch in 0..channels {
                    out[out_base + ch] = x[in_base + ch];
                }
            }
        }
    }
    out
}

/// Adjoint of [`block_scatter`]: gathers fine-lattice gradients back into
/// per-cell block vectors.
fn block_gather_into(
    out_grad: &[f64],
    macro_extents: &[usize],
    t: usize,
    s: usize,
    channels: usize,
    in_grad: &mut [f64],
) {
    let dims = macro_extents.len();
    let block_len = t * s.pow(dims as u32) * channels;
    let macro_sites: usize = macro_extents.iter().product();
    let fine_extents: Vec<usize> = macro_extents.iter().map(|m| m * s).collect();
    let fine_site_strides = row_major_strides(&fine_extents);
    let fine_sites: usize = fine_extents.iter().product();

    let mut mcoord = [0usize; 3];
    let mut rcoord = [0usize; 3];
    let within = vec![s; dims];
    let s_pow = s.pow(dims as u32);
    for msite in 0..macro_sites {
        unravel(msite, macro_extents, &mut mcoord);
        for frame in 0..t {
            for rem in 0..s_pow {
                unravel(rem, &within, &mut rcoord);
                let mut fine_site = 0;
                for a in 0..dims {
                    fine_site += (mcoord[a] * s + rcoord[a]) * fine_site_strides[a];
                }
                let block_idx = (frame * s_pow + rem) * channels;
                let grad_base = (frame * fine_sites + fine_site) * channels;
                let in_base = msite * block_len + block_idx;
                for ch in 0..channels {
                    in_grad[in_base + ch] += out_grad[grad_base + ch];
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t1(values: &[f64]) -> Tensor {
        Tensor::new(vec![values.len(), 1], values.to_vec()).unwrap()
    }

    fn k1(taps: &[f64]) -> Tensor {
        Tensor::new(vec![taps.len(), 1, 1], taps.to_vec()).unwrap()
    }

    #[test]
    fn conv_box_sum_of_delta() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t1(&[0.0, 0.0, 1.0, 0.0, 0.0]));
        let k = tape.leaf(&k1(&[1.0, 1.0, 1.0]));
        let y = tape.conv_circular(x, k, &[1]).unwrap();
        assert_eq!(tape.values(y), &[0.0, 1.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn conv_identity_kernel() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t1(&[0.3, -1.2, 4.0, 0.5]));
        let k = tape.leaf(&k1(&[0.0, 1.0, 0.0]));
        let y = tape.conv_circular(x, k, &[1]).unwrap();
        assert_eq!(tape.values(y), tape.values(x));
    }

    #[test]
    fn conv_strided_non_overlapping_windows() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t1(&[1.0, 2.0, 3.0, 4.0]));
        let k = tape.leaf(&k1(&[1.0, 1.0]));
        let y = tape.conv_circular(x, k, &[2]).unwrap();
        assert_eq!(tape.values(y), &[3.0, 7.0]);
        assert_eq!(tape.shape(y), &[2, 1]);
    }

    #[test]
    fn conv_rejects_bad_stride_and_shapes() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t1(&[1.0, 2.0, 3.0, 4.0, 5.0]));
        let k = tape.leaf(&k1(&[1.0, 1.0]));
        match tape.conv_circular(x, k, &[2]) {
            Err(Error::Config(_)) => {}
            other => panic!("expected Config error, got {other:?}"),
        }
        let k_bad = tape.leaf(&Tensor::new(vec![3, 2, 1], vec![0.0; 6]).unwrap());
        match tape.conv_circular(x, k_bad, &[1]) {
            Err(Error::Dimension { .. }) => {}
            other => panic!("expected Dimension error, got {other:?}"),
        }
    }

    #[test]
    fn affine_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::new(vec![2], vec![1.0, 0.0]).unwrap());
        let w = tape.leaf(&Tensor::new(vec![2, 1], vec![1.0, 0.0]).unwrap());
        let b = tape.leaf(&Tensor::new(vec![1], vec![0.0]).unwrap());
        let y = tape.affine(x, w, b).unwrap();
        assert_eq!(tape.values(y), &[1.0]);

        let x2 = tape.leaf(&Tensor::new(vec![2], vec![2.0, 3.0]).unwrap());
        let w2 = tape.leaf(&Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap());
        let b2 = tape.leaf(&Tensor::new(vec![1], vec![1.0]).unwrap());
        let y2 = tape.affine(x2, w2, b2).unwrap();
        assert_eq!(tape.values(y2), &[6.0]);

        // zero weight, bias b -> constant b everywhere
        let x3 = tape.leaf(&Tensor::new(vec![3, 2], vec![5.0; 6]).unwrap());
        let w3 = tape.leaf(&Tensor::new(vec![2, 1], vec![0.0, 0.0]).unwrap());
        let b3 = tape.leaf(&Tensor::new(vec![1], vec![7.5]).unwrap());
        let y3 = tape.affine(x3, w3, b3).unwrap();
        assert_eq!(tape.values(y3), &[7.5, 7.5, 7.5]);
    }

    #[test]
    fn activation_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::new(vec![3], vec![0.0, -3.0, 2.5]).unwrap());
        let s = tape.activation(x, ActivationKind::Sigmoid);
        assert_eq!(tape.values(s)[0], 0.5);
        let r = tape.activation(x, ActivationKind::Relu);
        assert_eq!(tape.values(r), &[0.0, 0.0, 2.5]);
        let i = tape.activation(x, ActivationKind::Identity);
        assert_eq!(tape.values(i), tape.values(x));
        // stability at extreme inputs
        let ext = tape.leaf(&Tensor::new(vec![2], vec![-1e4, 1e4]).unwrap());
        let se = tape.activation(ext, ActivationKind::Sigmoid);
        assert!(tape.values(se).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn mse_examples() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
        let b = tape.leaf(&Tensor::new(vec![2], vec![1.0, 1.0]).unwrap());
        let ab = tape.mse(a, b).unwrap();
        assert_eq!(tape.value_scalar(ab).unwrap(), 1.0);
        let c = tape.leaf(&Tensor::new(vec![2], vec![0.0, 2.0]).unwrap());
        let d = tape.leaf(&Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
        let cd = tape.mse(c, d).unwrap();
        assert_eq!(tape.value_scalar(cd).unwrap(), 2.0);
        let aa = tape.mse(a, a).unwrap();
        assert_eq!(tape.value_scalar(aa).unwrap(), 0.0);
    }

    #[test]
    fn backward_of_quadratic() {
        // loss = mse(x, 0) with x=[1] -> grad 2
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::new(vec![1], vec![1.0]).unwrap().with_grad());
        let zero = tape.leaf(&Tensor::new(vec![1], vec![0.0]).unwrap());
        let loss = tape.mse(x, zero).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).unwrap(), &[2.0]);
        // detached leaf -> no gradient recorded
        assert!(grads.wrt(zero).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().with_grad());
        match tape.backward(x) {
            Err(Error::Usage(_)) => {}
            other => panic!("expected Usage error, got {other:?}"),
        }
    }

    #[test]
    fn block_to_lattice_round_trips_through_gradient() {
        // 1D: 2 macro cells, t=2, s=2, ch=1 -> block length 4
        let mut tape = Tape::new();
        let x = tape.leaf(
            &Tensor::new(vec![2, 4], (0..8).map(|v| v as f64).collect())
                .unwrap()
                .with_grad(),
        );
        let y = tape.block_to_lattice(x, 2, 2, 1).unwrap();
        assert_eq!(tape.shape(y), &[2, 4, 1]);
        // cell 0 block [0,1,2,3] -> frame0 sites 0,1 ; frame1 sites 0,1
        assert_eq!(tape.values(y), &[0.0, 1.0, 4.0, 5.0, 2.0, 3.0, 6.0, 7.0]);
        let target = tape.leaf(&Tensor::zeros(vec![2, 4, 1]));
        let loss = tape.mse(y, target).unwrap();
        let grads = tape.backward(loss).unwrap();
        // d/dx mean(x_perm^2) = 2*x/8 elementwise, permutation preserved
        let gx = grads.wrt(x).unwrap();
        for (i, g) in gx.iter().enumerate() {
            assert!((g - 2.0 * i as f64 / 8.0).abs() < 1e-15);
        }
    }

    #[test]
    fn translation_equivariance_of_stride1_conv_is_bitwise() {
        let mut base = vec![0.0; 16];
        let mut state = 0x9e3779b97f4a7c15u64;
        for v in base.iter_mut() {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
            *v = (state >> 11) as f64 / (1u64 << 53) as f64;
        }
        let kernel = [0.25, -0.5, 1.5];
        let conv = |input: &[f64]| {
            let mut tape = Tape::new();
            let x = tape.leaf(&t1(input));
            let k = tape.leaf(&k1(&kernel));
            let y = tape.conv_circular(x, k, &[1]).unwrap();
            tape.values(y).to_vec()
        };
        let out = conv(&base);
        for shift in 1..16 {
            let mut rotated = base.clone();
            rotated.rotate_right(shift);
            let out_rot = conv(&rotated);
            let mut expected = out.clone();
            expected.rotate_right(shift);
            for (a, b) in out_rot.iter().zip(&expected) {
                assert_eq!(a.to_bits(), b.to_bits(), "shift {shift}");
            }
        }
    }
}

