//! Minimal reverse-mode differentiation over the fixed operator set needed by
//! the motion and segmentation networks.
//!
//! A [`Graph`] is a tape of eagerly evaluated nodes; operators append a node
//! holding its forward values and provenance, and [`Graph::backward`]
//! accumulates adjoints in reverse creation order. The node set is
//! deliberately closed: dense 3^3 convolution, leaky ReLU, nearest 2x
//! upsampling, channel concat, channel softmax, trilinear warping, elementwise
//! add/mul/scale, L1 mean, a forward-difference smoothness reduction, a fused
//! segmentation loss, and scalar linear combination. There is no broadcasting.
//!
//! Tensors are generic over [`Scalar`]: `f32` for training, `f64` for
//! finite-difference gradient checks.

mod adam;
mod gradcheck;
pub(crate) mod kernels;
mod scalar;

pub use adam::AdamState;
pub use gradcheck::{gradcheck, random_buffer, GradCheckReport};
pub use scalar::Scalar;

use crate::error::{Error, Result};
use crate::volume::Dims;
use kernels::conv3d_out_dims;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

/// Tensor extents. Volumes are `[channels, nx, ny, nz]` (stored channel-major,
/// x-fastest), convolution weights `[c_out, c_in, 3, 3, 3]`, biases `[c]`,
/// scalars `[1]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Shape(pub Vec<usize>);

impl Shape {
    pub fn scalar() -> Shape {
        Shape(vec![1])
    }

    pub fn vol(channels: usize, d: Dims) -> Shape {
        Shape(vec![channels, d.nx, d.ny, d.nz])
    }

    pub fn conv_weight(c_out: usize, c_in: usize) -> Shape {
        Shape(vec![c_out, c_in, 3, 3, 3])
    }

    pub fn count(&self) -> usize {
        self.0.iter().product()
    }

    pub fn is_scalar(&self) -> bool {
        self.count() == 1
    }

    /// Interpret as `[channels, nx, ny, nz]`.
    pub fn as_vol(&self) -> Option<(usize, Dims)> {
        match self.0.as_slice() {
            [c, nx, ny, nz] => Some((*c, Dims::new(*nx, *ny, *nz))),
            _ => None,
        }
    }
}

#[derive(Clone)]
enum OpKind<S: Scalar> {
    Leaf,
    Conv3d {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
    },
    LeakyRelu {
        input: NodeId,
        slope: S,
    },
    Upsample2x {
        input: NodeId,
    },
    ConcatChannels {
        a: NodeId,
        b: NodeId,
    },
    SoftmaxChannels {
        input: NodeId,
    },
    L1Mean {
        a: NodeId,
        b: NodeId,
    },
    AddElem {
        a: NodeId,
        b: NodeId,
    },
    MulElem {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        input: NodeId,
        k: S,
    },
    Warp {
        image: NodeId,
        field: NodeId,
    },
    SmoothnessPsi {
        field: NodeId,
    },
    ScalarComb {
        terms: Vec<(NodeId, S)>,
    },
    SegLoss {
        probs: NodeId,
        labels: std::sync::Arc<Vec<u8>>,
        num_classes: usize,
        alpha: S,
    },
}

struct Node<S: Scalar> {
    shape: Shape,
    values: Vec<S>,
    grad: Option<Vec<S>>,
    needs_grad: bool,
    op: OpKind<S>,
}

/// Tape of eagerly evaluated tensor nodes; append-only, so node inputs always
/// precede their consumers and a single reverse sweep implements backprop.
pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Graph<S> {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn values(&self, id: NodeId) -> &[S] {
        &self.nodes[id.0].values
    }

    pub fn shape(&self, id: NodeId) -> &Shape {
        &self.nodes[id.0].shape
    }

    pub fn grad(&self, id: NodeId) -> Option<&[S]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// Gradient of a node, all zeros if nothing flowed into it.
    pub fn grad_or_zeros(&self, id: NodeId) -> Vec<S> {
        match self.grad(id) {
            Some(g) => g.to_vec(),
            None => vec![S::ZERO; self.nodes[id.0].shape.count()],
        }
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn push(&mut self, shape: Shape, values: Vec<S>, needs_grad: bool, op: OpKind<S>) -> NodeId {
        debug_assert_eq!(values.len(), shape.count());
        self.nodes.push(Node {
            shape,
            values,
            grad: None,
            needs_grad,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    // -- construction ------------------------------------------------------

    pub fn leaf(&mut self, shape: Shape, values: Vec<S>, requires_grad: bool) -> NodeId {
        assert_eq!(
            values.len(),
            shape.count(),
            "leaf data does not match its shape"
        );
        self.push(shape, values, requires_grad, OpKind::Leaf)
    }

    pub fn zeros_leaf(&mut self, shape: Shape) -> NodeId {
        let n = shape.count();
        self.leaf(shape, vec![S::ZERO; n], false)
    }

    pub fn scalar_leaf(&mut self, v: S) -> NodeId {
        self.leaf(Shape::scalar(), vec![v], false)
    }

    fn vol_of(&self, id: NodeId, what: &str) -> Result<(usize, Dims)> {
        self.shape(id).as_vol().ok_or_else(|| {
            Error::ShapeMismatch(format!("{what} must be a [c,x,y,z] volume, got {:?}", self.shape(id)))
        })
    }

    /// Dense 3^3 convolution. Weight `[c_out, c_in, 3, 3, 3]`, bias `[c_out]`,
    /// stride 1 or 2, padding fixed at 1.
    pub fn conv3d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let (cin, id) = self.vol_of(input, "conv3d input")?;
        if padding != 1 {
            return Err(Error::Invalid(format!("conv3d supports padding 1, got {padding}")));
        }
        if stride != 1 && stride != 2 {
            return Err(Error::Invalid(format!("conv3d supports stride 1 or 2, got {stride}")));
        }
        let wshape = &self.shape(weight).0;
        let (cout, wcin) = match wshape.as_slice() {
            [co, ci, 3, 3, 3] => (*co, *ci),
            _ => {
                return Err(Error::ShapeMismatch(format!(
                    "conv3d weight must be [c_out, c_in, 3, 3, 3], got {wshape:?}"
                )))
            }
        };
        if wcin != cin {
            return Err(Error::ShapeMismatch(format!(
                "conv3d weight expects {wcin} input channels, input has {cin}"
            )));
        }
        if self.shape(bias).0 != vec![cout] {
            return Err(Error::ShapeMismatch(format!(
                "conv3d bias must be [{cout}], got {:?}",
                self.shape(bias)
            )));
        }
        let od = conv3d_out_dims(id, stride, 1);
        let mut out = vec![S::ZERO; cout * od.voxel_count()];
        kernels::conv3d_forward(
            self.values(input),
            cin,
            id,
            self.values(weight),
            cout,
            self.values(bias),
            stride,
            &mut out,
            od,
        );
        let needs = self.needs(input) || self.needs(weight) || self.needs(bias);
        Ok(self.push(
            Shape::vol(cout, od),
            out,
            needs,
            OpKind::Conv3d {
                input,
                weight,
                bias,
                stride,
            },
        ))
    }

    /// Elementwise `max(x, slope·x)` for `slope < 1`.
    pub fn leaky_relu(&mut self, input: NodeId, slope: f64) -> NodeId {
        let s = S::from_f64(slope);
        let values = self
            .values(input)
            .iter()
            .map(|&x| x.maximum(s * x))
            .collect();
        let needs = self.needs(input);
        let shape = self.shape(input).clone();
        self.push(shape, values, needs, OpKind::LeakyRelu { input, slope: s })
    }

    /// Nearest-neighbor 2x upsampling on all three spatial axes.
    pub fn upsample_nearest2x(&mut self, input: NodeId) -> Result<NodeId> {
        let (c, d) = self.vol_of(input, "upsample input")?;
        let od = Dims::new(2 * d.nx, 2 * d.ny, 2 * d.nz);
        let mut out = vec![S::ZERO; c * od.voxel_count()];
        kernels::upsample2x_forward(self.values(input), c, d, &mut out);
        let needs = self.needs(input);
        Ok(self.push(Shape::vol(c, od), out, needs, OpKind::Upsample2x { input }))
    }

    /// Channel concatenation of two volumes with equal spatial extents.
    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ca, da) = self.vol_of(a, "concat lhs")?;
        let (cb, db) = self.vol_of(b, "concat rhs")?;
        if da != db {
            return Err(Error::ShapeMismatch(format!(
                "concat spatial extents differ: {da:?} vs {db:?}"
            )));
        }
        let mut out = Vec::with_capacity((ca + cb) * da.voxel_count());
        out.extend_from_slice(self.values(a));
        out.extend_from_slice(self.values(b));
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Shape::vol(ca + cb, da),
            out,
            needs,
            OpKind::ConcatChannels { a, b },
        ))
    }

    /// Per-voxel softmax across channels (max-subtracted).
    pub fn softmax_channels(&mut self, input: NodeId) -> Result<NodeId> {
        let (c, d) = self.vol_of(input, "softmax input")?;
        let n = d.voxel_count();
        let mut out = vec![S::ZERO; c * n];
        kernels::softmax_forward(self.values(input), c, n, &mut out);
        let needs = self.needs(input);
        Ok(self.push(Shape::vol(c, d), out, needs, OpKind::SoftmaxChannels { input }))
    }

    /// Mean absolute difference, reduced to a scalar.
    pub fn l1_mean(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch(format!(
                "l1_mean shapes differ: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut acc = 0.0f64;
        for (&x, &y) in self.values(a).iter().zip(self.values(b)) {
            acc += (x - y).to_f64().abs();
        }
        let mean = acc / self.values(a).len() as f64;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Shape::scalar(),
            vec![S::from_f64(mean)],
            needs,
            OpKind::L1Mean { a, b },
        ))
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch(format!(
                "add shapes differ: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let values = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        let shape = self.shape(a).clone();
        Ok(self.push(shape, values, needs, OpKind::AddElem { a, b }))
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch(format!(
                "mul shapes differ: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let values = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        let shape = self.shape(a).clone();
        Ok(self.push(shape, values, needs, OpKind::MulElem { a, b }))
    }

    /// Elementwise multiplication by a constant.
    pub fn scale(&mut self, input: NodeId, k: f64) -> NodeId {
        let ks = S::from_f64(k);
        let values = self.values(input).iter().map(|&x| ks * x).collect();
        let needs = self.needs(input);
        let shape = self.shape(input).clone();
        self.push(shape, values, needs, OpKind::Scale { input, k: ks })
    }

    /// Trilinear backward warp of a `c`-channel image by a 3-channel
    /// displacement field (voxel units), clamp-to-edge. Differentiable w.r.t.
    /// both the image values and the field components.
    pub fn warp(&mut self, image: NodeId, field: NodeId) -> Result<NodeId> {
        let (c, d) = self.vol_of(image, "warp image")?;
        let (fc, fd) = self.vol_of(field, "warp field")?;
        if fc != 3 {
            return Err(Error::ShapeMismatch(format!(
                "warp field must have 3 channels, got {fc}"
            )));
        }
        if fd != d {
            return Err(Error::ShapeMismatch(format!(
                "warp extents differ: image {d:?} vs field {fd:?}"
            )));
        }
        let mut out = vec![S::ZERO; c * d.voxel_count()];
        kernels::warp_forward(self.values(image), c, d, self.values(field), &mut out);
        let needs = self.needs(image) || self.needs(field);
        Ok(self.push(Shape::vol(c, d), out, needs, OpKind::Warp { image, field }))
    }

    /// Smoothness reduction: mean over voxels and field components of the
    /// summed absolute forward differences along x, y and z. Far faces reuse
    /// their one-sided (backward) difference; an axis of extent 1 contributes
    /// zero.
    pub fn smoothness_psi(&mut self, field: NodeId) -> Result<NodeId> {
        let (c, d) = self.vol_of(field, "smoothness field")?;
        if c != 3 {
            return Err(Error::ShapeMismatch(format!(
                "smoothness expects a 3-channel field, got {c} channels"
            )));
        }
        let psi = smoothness_forward(self.values(field), d);
        let needs = self.needs(field);
        Ok(self.push(
            Shape::scalar(),
            vec![S::from_f64(psi)],
            needs,
            OpKind::SmoothnessPsi { field },
        ))
    }

    /// Weighted sum of scalar nodes: `Σ coeff·term`.
    pub fn scalar_comb(&mut self, terms: &[(NodeId, f64)]) -> Result<NodeId> {
        let mut acc = 0.0f64;
        for &(id, k) in terms {
            if !self.shape(id).is_scalar() {
                return Err(Error::ShapeMismatch(format!(
                    "scalar_comb term has shape {:?}, expected scalar",
                    self.shape(id)
                )));
            }
            acc += k * self.values(id)[0].to_f64();
        }
        let needs = terms.iter().any(|&(id, _)| self.needs(id));
        let terms: Vec<(NodeId, S)> = terms.iter().map(|&(id, k)| (id, S::from_f64(k))).collect();
        Ok(self.push(
            Shape::scalar(),
            vec![S::from_f64(acc)],
            needs,
            OpKind::ScalarComb { terms },
        ))
    }

    /// Fused segmentation loss on per-voxel class probabilities:
    /// `alpha·(1 − mean foreground soft-Dice) + (1−alpha)·cross-entropy`,
    /// with additive smoothing 1e-5 in the Dice numerator and denominator.
    pub fn segmentation_loss(
        &mut self,
        probs: NodeId,
        labels: &[u8],
        num_classes: usize,
        alpha: f64,
    ) -> Result<NodeId> {
        let (c, d) = self.vol_of(probs, "segmentation probabilities")?;
        if c != num_classes || num_classes < 2 {
            return Err(Error::ShapeMismatch(format!(
                "probabilities have {c} channels for {num_classes} classes"
            )));
        }
        let n = d.voxel_count();
        if labels.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "{} labels for {n} voxels",
                labels.len()
            )));
        }
        if let Some(i) = labels.iter().position(|&l| l as usize >= num_classes) {
            return Err(Error::LabelOutOfRange {
                label: labels[i],
                num_classes: num_classes as u8,
                index: i,
            });
        }
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Invalid(format!("alpha must be in [0,1], got {alpha}")));
        }
        let loss = seg_loss_forward(self.values(probs), labels, num_classes, n, alpha);
        let needs = self.needs(probs);
        Ok(self.push(
            Shape::scalar(),
            vec![S::from_f64(loss)],
            needs,
            OpKind::SegLoss {
                probs,
                labels: std::sync::Arc::new(labels.to_vec()),
                num_classes,
                alpha: S::from_f64(alpha),
            },
        ))
    }

    // -- backward ----------------------------------------------------------

    /// Accumulate `contrib` into the gradient of `id`.
    fn accumulate(&mut self, id: NodeId, contrib: Vec<S>) {
        let node = &mut self.nodes[id.0];
        match &mut node.grad {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contrib) {
                    *gi += ci;
                }
            }
            None => node.grad = Some(contrib),
        }
    }

    /// Reverse sweep from a scalar loss. Gradients of every reachable node
    /// whose subgraph contains a `requires_grad` leaf are populated; leaves
    /// without `requires_grad` are untouched.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if !self.nodes[loss.0].shape.is_scalar() {
            return Err(Error::Invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        if !self.nodes[loss.0].needs_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![S::ONE]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad || self.nodes[idx].grad.is_none() {
                continue;
            }
            self.adjoint(idx);
        }
        Ok(())
    }

    fn adjoint(&mut self, idx: usize) {
        let op = self.nodes[idx].op.clone();
        // Move the output gradient out for the duration of the adjoint; the
        // buffers involved are large enough that cloning would dominate.
        let gout = match self.nodes[idx].grad.take() {
            Some(g) => g,
            None => return,
        };
        self.adjoint_inner(idx, op, &gout);
        self.nodes[idx].grad = Some(gout);
    }

    fn adjoint_inner(&mut self, idx: usize, op: OpKind<S>, gout: &[S]) {
        match op {
            OpKind::Leaf => {}
            OpKind::Conv3d {
                input,
                weight,
                bias,
                stride,
            } => {
                let (cin, id) = self.shape(input).as_vol().expect("validated");
                let (cout, od) = self.shape(NodeId(idx)).as_vol().expect("validated");
                if self.needs(weight) || self.needs(bias) {
                    let mut dw = vec![S::ZERO; self.shape(weight).count()];
                    let mut db = vec![S::ZERO; cout];
                    kernels::conv3d_backward_weights(
                        self.values(input),
                        cin,
                        id,
                        gout,
                        cout,
                        od,
                        stride,
                        &mut dw,
                        &mut db,
                    );
                    if self.needs(weight) {
                        self.accumulate(weight, dw);
                    }
                    if self.needs(bias) {
                        self.accumulate(bias, db);
                    }
                }
                if self.needs(input) {
                    let mut din = vec![S::ZERO; self.shape(input).count()];
                    kernels::conv3d_backward_input(
                        self.values(weight),
                        cin,
                        cout,
                        id,
                        gout,
                        od,
                        stride,
                        &mut din,
                    );
                    self.accumulate(input, din);
                }
            }
            OpKind::LeakyRelu { input, slope } => {
                if self.needs(input) {
                    let din: Vec<S> = self
                        .values(input)
                        .iter()
                        .zip(gout)
                        .map(|(&x, &g)| if x >= S::ZERO { g } else { slope * g })
                        .collect();
                    self.accumulate(input, din);
                }
            }
            OpKind::Upsample2x { input } => {
                if self.needs(input) {
                    let (c, d) = self.shape(input).as_vol().expect("validated");
                    let mut din = vec![S::ZERO; self.shape(input).count()];
                    kernels::upsample2x_backward(gout, c, d, &mut din);
                    self.accumulate(input, din);
                }
            }
            OpKind::ConcatChannels { a, b } => {
                let na = self.shape(a).count();
                if self.needs(a) {
                    self.accumulate(a, gout[..na].to_vec());
                }
                if self.needs(b) {
                    self.accumulate(b, gout[na..].to_vec());
                }
            }
            OpKind::SoftmaxChannels { input } => {
                if self.needs(input) {
                    let (c, d) = self.shape(input).as_vol().expect("validated");
                    let n = d.voxel_count();
                    let mut din = vec![S::ZERO; c * n];
                    let own_values = std::mem::take(&mut self.nodes[idx].values);
                    kernels::softmax_backward(&own_values, c, n, gout, &mut din);
                    self.nodes[idx].values = own_values;
                    self.accumulate(input, din);
                }
            }
            OpKind::L1Mean { a, b } => {
                let g = gout[0];
                let inv_n = S::from_f64(1.0 / self.values(a).len() as f64);
                // Subgradient at zero is zero.
                let signs: Vec<S> = self
                    .values(a)
                    .iter()
                    .zip(self.values(b))
                    .map(|(&x, &y)| {
                        if x > y {
                            g * inv_n
                        } else if x < y {
                            -g * inv_n
                        } else {
                            S::ZERO
                        }
                    })
                    .collect();
                if a == b {
                    // d|x-x| = 0
                } else {
                    if self.needs(a) {
                        self.accumulate(a, signs.clone());
                    }
                    if self.needs(b) {
                        self.accumulate(b, signs.iter().map(|&s| -s).collect());
                    }
                }
            }
            OpKind::AddElem { a, b } => {
                if a == b {
                    if self.needs(a) {
                        self.accumulate(a, gout.iter().map(|&g| g + g).collect());
                    }
                } else {
                    if self.needs(a) {
                        self.accumulate(a, gout.to_vec());
                    }
                    if self.needs(b) {
                        self.accumulate(b, gout.to_vec());
                    }
                }
            }
            OpKind::MulElem { a, b } => {
                if a == b {
                    if self.needs(a) {
                        let din: Vec<S> = self
                            .values(a)
                            .iter()
                            .zip(gout)
                            .map(|(&x, &g)| (x + x) * g)
                            .collect();
                        self.accumulate(a, din);
                    }
                } else {
                    if self.needs(a) {
                        let din: Vec<S> = self
                            .values(b)
                            .iter()
                            .zip(gout)
                            .map(|(&y, &g)| y * g)
                            .collect();
                        self.accumulate(a, din);
                    }
                    if self.needs(b) {
                        let din: Vec<S> = self
                            .values(a)
                            .iter()
                            .zip(gout)
                            .map(|(&x, &g)| x * g)
                            .collect();
                        self.accumulate(b, din);
                    }
                }
            }
            OpKind::Scale { input, k } => {
                if self.needs(input) {
                    self.accumulate(input, gout.iter().map(|&g| k * g).collect());
                }
            }
            OpKind::Warp { image, field } => {
                let (c, d) = self.shape(image).as_vol().expect("validated");
                let needs_img = self.needs(image);
                let needs_field = self.needs(field);
                let mut dimg = needs_img.then(|| vec![S::ZERO; self.shape(image).count()]);
                let mut dfield = needs_field.then(|| vec![S::ZERO; self.shape(field).count()]);
                kernels::warp_backward(
                    self.values(image),
                    c,
                    d,
                    self.values(field),
                    gout,
                    dimg.as_deref_mut(),
                    dfield.as_deref_mut(),
                );
                if image == field {
                    // Warping a field by itself: both contributions add.
                    let mut total = dimg.expect("needs_grad");
                    for (t, f) in total.iter_mut().zip(dfield.expect("needs_grad")) {
                        *t += f;
                    }
                    self.accumulate(image, total);
                } else {
                    if let Some(di) = dimg {
                        self.accumulate(image, di);
                    }
                    if let Some(df) = dfield {
                        self.accumulate(field, df);
                    }
                }
            }
            OpKind::SmoothnessPsi { field } => {
                if self.needs(field) {
                    let (_, d) = self.shape(field).as_vol().expect("validated");
                    let mut din = vec![S::ZERO; self.shape(field).count()];
                    smoothness_backward(self.values(field), d, gout[0], &mut din);
                    self.accumulate(field, din);
                }
            }
            OpKind::ScalarComb { terms } => {
                let g = gout[0];
                // A node may appear several times; accumulate handles it.
                for (id, k) in terms {
                    if self.needs(id) {
                        self.accumulate(id, vec![k * g]);
                    }
                }
            }
            OpKind::SegLoss {
                probs,
                labels,
                num_classes,
                alpha,
            } => {
                if self.needs(probs) {
                    let (_, d) = self.shape(probs).as_vol().expect("validated");
                    let n = d.voxel_count();
                    let mut din = vec![S::ZERO; self.shape(probs).count()];
                    seg_loss_backward(
                        self.values(probs),
                        &labels,
                        num_classes,
                        n,
                        alpha.to_f64(),
                        gout[0],
                        &mut din,
                    );
                    self.accumulate(probs, din);
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Fused reductions
// ---------------------------------------------------------------------------

fn smoothness_forward<S: Scalar>(field: &[S], d: Dims) -> f64 {
    let n = d.voxel_count();
    let mut total = 0.0f64;
    for comp in 0..3 {
        let ch = &field[comp * n..(comp + 1) * n];
        total += axis_abs_diff_sum(ch, d, Axis::X)
            + axis_abs_diff_sum(ch, d, Axis::Y)
            + axis_abs_diff_sum(ch, d, Axis::Z);
    }
    total / (3 * n) as f64
}

#[derive(Clone, Copy)]
enum Axis {
    X,
    Y,
    Z,
}

fn axis_geometry(d: Dims, axis: Axis) -> (usize, usize) {
    // (extent along axis, stride along axis)
    match axis {
        Axis::X => (d.nx, 1),
        Axis::Y => (d.ny, d.nx),
        Axis::Z => (d.nz, d.nx * d.ny),
    }
}

/// Sum of |forward differences| along one axis, with the far face reusing its
/// backward difference so every voxel contributes one term. Extent-1 axes
/// contribute zero.
fn axis_abs_diff_sum<S: Scalar>(ch: &[S], d: Dims, axis: Axis) -> f64 {
    let (ext, stride) = axis_geometry(d, axis);
    if ext < 2 {
        return 0.0;
    }
    let mut acc = 0.0f64;
    for_each_line(d, axis, |line_start| {
        for t in 0..ext {
            let (lo, hi) = if t < ext - 1 { (t, t + 1) } else { (ext - 2, ext - 1) };
            let a = ch[line_start + lo * stride].to_f64();
            let b = ch[line_start + hi * stride].to_f64();
            acc += (b - a).abs();
        }
    });
    acc
}

fn smoothness_backward<S: Scalar>(field: &[S], d: Dims, gout: S, d_field: &mut [S]) {
    let n = d.voxel_count();
    let w = gout * S::from_f64(1.0 / (3 * n) as f64);
    for comp in 0..3 {
        let ch = &field[comp * n..(comp + 1) * n];
        let dch = &mut d_field[comp * n..(comp + 1) * n];
        for axis in [Axis::X, Axis::Y, Axis::Z] {
            let (ext, stride) = axis_geometry(d, axis);
            if ext < 2 {
                continue;
            }
            for_each_line(d, axis, |line_start| {
                for t in 0..ext {
                    let (lo, hi) = if t < ext - 1 { (t, t + 1) } else { (ext - 2, ext - 1) };
                    let i_lo = line_start + lo * stride;
                    let i_hi = line_start + hi * stride;
                    let diff = ch[i_hi] - ch[i_lo];
                    if diff > S::ZERO {
                        dch[i_hi] += w;
                        dch[i_lo] -= w;
                    } else if diff < S::ZERO {
                        dch[i_hi] -= w;
                        dch[i_lo] += w;
                    }
                }
            });
        }
    }
}

/// Visit the linear start index of every grid line along `axis`.
fn for_each_line(d: Dims, axis: Axis, mut f: impl FnMut(usize)) {
    match axis {
        Axis::X => {
            for z in 0..d.nz {
                for y in 0..d.ny {
                    f((z * d.ny + y) * d.nx);
                }
            }
        }
        Axis::Y => {
            for z in 0..d.nz {
                for x in 0..d.nx {
                    f(z * d.ny * d.nx + x);
                }
            }
        }
        Axis::Z => {
            for y in 0..d.ny {
                for x in 0..d.nx {
                    f(y * d.nx + x);
                }
            }
        }
    }
}

const DICE_SMOOTH: f64 = 1e-5;
const LOG_FLOOR: f64 = 1e-12;

fn seg_loss_forward<S: Scalar>(
    probs: &[S],
    labels: &[u8],
    num_classes: usize,
    n: usize,
    alpha: f64,
) -> f64 {
    // Cross-entropy on probabilities of the true class.
    let mut ce = 0.0f64;
    for (i, &y) in labels.iter().enumerate() {
        let p = probs[y as usize * n + i].to_f64().max(LOG_FLOOR);
        ce -= p.ln();
    }
    ce /= n as f64;

    // Soft Dice over foreground classes.
    let mut dice_sum = 0.0f64;
    for c in 1..num_classes {
        let ch = &probs[c * n..(c + 1) * n];
        let mut inter = 0.0f64;
        let mut p_sum = 0.0f64;
        let mut y_sum = 0.0f64;
        for (i, &y) in labels.iter().enumerate() {
            let p = ch[i].to_f64();
            p_sum += p;
            if y as usize == c {
                inter += p;
                y_sum += 1.0;
            }
        }
        dice_sum += (2.0 * inter + DICE_SMOOTH) / (p_sum + y_sum + DICE_SMOOTH);
    }
    let dice = dice_sum / (num_classes - 1) as f64;
    alpha * (1.0 - dice) + (1.0 - alpha) * ce
}

#[allow(clippy::too_many_arguments)]
fn seg_loss_backward<S: Scalar>(
    probs: &[S],
    labels: &[u8],
    num_classes: usize,
    n: usize,
    alpha: f64,
    gout: S,
    d_probs: &mut [S],
) {
    let g = gout.to_f64();
    let ce_w = (1.0 - alpha) * g / n as f64;
    for (i, &y) in labels.iter().enumerate() {
        let idx = y as usize * n + i;
        let p = probs[idx].to_f64();
        if p > LOG_FLOOR {
            d_probs[idx] -= S::from_f64(ce_w / p);
        }
    }
    let dice_w = alpha * g / (num_classes - 1) as f64;
    for c in 1..num_classes {
        let ch = &probs[c * n..(c + 1) * n];
        let mut inter = 0.0f64;
        let mut p_sum = 0.0f64;
        let mut y_sum = 0.0f64;
        for (i, &y) in labels.iter().enumerate() {
            let p = ch[i].to_f64();
            p_sum += p;
            if y as usize == c {
                inter += p;
                y_sum += 1.0;
            }
        }
        let denom = p_sum + y_sum + DICE_SMOOTH;
        let num = 2.0 * inter + DICE_SMOOTH;
        let dch = &mut d_probs[c * n..(c + 1) * n];
        for (i, &y) in labels.iter().enumerate() {
            let y_c = if y as usize == c { 1.0 } else { 0.0 };
            // d(1 - D_c)/dp = -(2·y·denom - num)/denom².
            let dd = (2.0 * y_c * denom - num) / (denom * denom);
            dch[i] -= S::from_f64(dice_w * dd);
        }
    }
}

#[cfg(test)]
mod tests;
