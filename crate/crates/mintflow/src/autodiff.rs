//! Minimal reverse-mode differentiation over the tensor kernels.
//!
//! One tape per training step: forward values are computed eagerly when an op
//! is recorded, and `backward` walks the nodes once in strict reverse order.
//! Activations carry their second derivative analytically because the
//! log-determinant term differentiates `h'`; nothing deeper is needed, so
//! there is no nested-tape machinery.

use crate::error::{Error, Result};
use crate::tensor::{self, ConvWeight, Tensor4};

/// Monotone activation with analytic first and second derivatives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Elu,
    Tanh,
}

impl Activation {
    pub fn h(self, u: f64) -> f64 {
        match self {
            Activation::Elu => {
                if u > 0.0 {
                    u
                } else {
                    u.exp() - 1.0
                }
            }
            Activation::Tanh => u.tanh(),
        }
    }

    /// First derivative; nonnegative for both kinds (monotonicity).
    pub fn h_prime(self, u: f64) -> f64 {
        match self {
            Activation::Elu => {
                if u > 0.0 {
                    1.0
                } else {
                    u.exp()
                }
            }
            Activation::Tanh => {
                let t = u.tanh();
                1.0 - t * t
            }
        }
    }

    pub fn h_second(self, u: f64) -> f64 {
        match self {
            Activation::Elu => {
                if u > 0.0 {
                    0.0
                } else {
                    u.exp()
                }
            }
            Activation::Tanh => {
                let t = u.tanh();
                -2.0 * t * (1.0 - t * t)
            }
        }
    }
}

/// Tape node id. Ids are dense indices into the tape's node list.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Exp(NodeId),
    Log(NodeId),
    Act(NodeId, Activation),
    ActPrime(NodeId, Activation),
    /// Same-shape conv; `w`'s value is interpreted as `(c_out, c_in, r, r)`.
    Conv { x: NodeId, w: NodeId, pad: usize },
    AddChan { x: NodeId, v: NodeId },
    MulChan { x: NodeId, v: NodeId },
    Gather { x: NodeId, idx: Vec<usize> },
    SliceChan { x: NodeId, start: usize },
    GroupRepeat { x: NodeId, k: usize },
    GroupSum { x: NodeId, k: usize },
    SumAll(NodeId),
    Squeeze { x: NodeId, k: usize },
}

struct Node {
    op: Op,
    value: Tensor4,
    needs_grad: bool,
}

/// Append-only record of tensor operations with eager forward values.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients per node after a backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor4>>,
}

impl Gradients {
    pub fn wrt(&self, id: NodeId) -> Option<&Tensor4> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor4> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor4, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { op, value, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id.0 >= self.nodes.len() {
            return Err(Error::UnknownNode(id.0));
        }
        Ok(())
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    /// Differentiable leaf (a parameter).
    pub fn leaf(&mut self, value: Tensor4) -> NodeId {
        self.push(Op::Leaf, value, true)
    }

    /// Non-differentiable input (data, masks, frozen sign factors).
    pub fn constant(&mut self, value: Tensor4) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    pub fn value(&self, id: NodeId) -> Result<&Tensor4> {
        self.check(id)?;
        Ok(&self.nodes[id.0].value)
    }

    pub fn scalar_value(&self, id: NodeId) -> Result<f64> {
        let v = self.value(id)?;
        if !v.is_scalar() {
            return Err(Error::NonScalarOutput { got: v.shape_str() });
        }
        Ok(v.data()[0])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let v = tensor::add(&self.nodes[a.0].value, &self.nodes[b.0].value)?;
        Ok(self.push(Op::Add(a, b), v, self.needs(&[a, b])))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let v = tensor::sub(&self.nodes[a.0].value, &self.nodes[b.0].value)?;
        Ok(self.push(Op::Sub(a, b), v, self.needs(&[a, b])))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let v = tensor::mul(&self.nodes[a.0].value, &self.nodes[b.0].value)?;
        Ok(self.push(Op::Mul(a, b), v, self.needs(&[a, b])))
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> Result<NodeId> {
        self.check(a)?;
        let v = tensor::scale(&self.nodes[a.0].value, k);
        Ok(self.push(Op::Scale(a, k), v, self.needs(&[a])))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let v = self.nodes[a.0].value.map(f64::exp);
        Ok(self.push(Op::Exp(a), v, self.needs(&[a])))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let v = self.nodes[a.0].value.map(f64::ln);
        Ok(self.push(Op::Log(a), v, self.needs(&[a])))
    }

    pub fn act(&mut self, a: NodeId, kind: Activation) -> Result<NodeId> {
        self.check(a)?;
        let v = self.nodes[a.0].value.map(|u| kind.h(u));
        Ok(self.push(Op::Act(a, kind), v, self.needs(&[a])))
    }

    /// `h'` as a forward quantity; its backward uses `h''`.
    pub fn act_prime(&mut self, a: NodeId, kind: Activation) -> Result<NodeId> {
        self.check(a)?;
        let v = self.nodes[a.0].value.map(|u| kind.h_prime(u));
        Ok(self.push(Op::ActPrime(a, kind), v, self.needs(&[a])))
    }

    pub fn conv(&mut self, x: NodeId, w: NodeId, pad: usize) -> Result<NodeId> {
        self.check(x)?;
        self.check(w)?;
        let wt = ConvWeight::from_tensor(&self.nodes[w.0].value)?;
        let v = tensor::conv2d(&self.nodes[x.0].value, &wt, None, pad)?;
        Ok(self.push(Op::Conv { x, w, pad }, v, self.needs(&[x, w])))
    }

    pub fn add_chan(&mut self, x: NodeId, v: NodeId) -> Result<NodeId> {
        self.check(x)?;
        self.check(v)?;
        let val = tensor::add_channel(&self.nodes[x.0].value, self.nodes[v.0].value.data())?;
        Ok(self.push(Op::AddChan { x, v }, val, self.needs(&[x, v])))
    }

    pub fn mul_chan(&mut self, x: NodeId, v: NodeId) -> Result<NodeId> {
        self.check(x)?;
        self.check(v)?;
        let val = tensor::mul_channel(&self.nodes[x.0].value, self.nodes[v.0].value.data())?;
        Ok(self.push(Op::MulChan { x, v }, val, self.needs(&[x, v])))
    }

    pub fn gather(&mut self, x: NodeId, idx: Vec<usize>) -> Result<NodeId> {
        self.check(x)?;
        let v = tensor::gather_flat(&self.nodes[x.0].value, &idx)?;
        let needs = self.needs(&[x]);
        Ok(self.push(Op::Gather { x, idx }, v, needs))
    }

    pub fn slice_chan(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        self.check(x)?;
        let v = tensor::slice_channels(&self.nodes[x.0].value, start, len)?;
        let needs = self.needs(&[x]);
        Ok(self.push(Op::SliceChan { x, start }, v, needs))
    }

    pub fn group_repeat(&mut self, x: NodeId, k: usize) -> Result<NodeId> {
        self.check(x)?;
        let v = tensor::group_repeat(&self.nodes[x.0].value, k)?;
        let needs = self.needs(&[x]);
        Ok(self.push(Op::GroupRepeat { x, k }, v, needs))
    }

    pub fn group_sum(&mut self, x: NodeId, k: usize) -> Result<NodeId> {
        self.check(x)?;
        let v = tensor::group_sum(&self.nodes[x.0].value, k)?;
        let needs = self.needs(&[x]);
        Ok(self.push(Op::GroupSum { x, k }, v, needs))
    }

    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let v = Tensor4::new(1, 1, 1, 1, vec![tensor::sum_all(&self.nodes[x.0].value)])?;
        Ok(self.push(Op::SumAll(x), v, self.needs(&[x])))
    }

    pub fn squeeze(&mut self, x: NodeId, k: usize) -> Result<NodeId> {
        self.check(x)?;
        let v = tensor::squeeze(&self.nodes[x.0].value, k)?;
        let needs = self.needs(&[x]);
        Ok(self.push(Op::Squeeze { x, k }, v, needs))
    }

    /// Reverse pass from a scalar output. Gradients are produced for every
    /// node on a path from a differentiable leaf to `out`.
    pub fn backward(&self, out: NodeId) -> Result<Gradients> {
        self.check(out)?;
        let ov = &self.nodes[out.0].value;
        if !ov.is_scalar() {
            return Err(Error::NonScalarOutput { got: ov.shape_str() });
        }
        let mut grads: Vec<Option<Tensor4>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Tensor4::full(1, 1, 1, 1, 1.0));

        for i in (0..=out.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = Some(g);
                continue;
            }
            self.accumulate(&node.op, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn bump(&self, grads: &mut [Option<Tensor4>], id: NodeId, delta: Tensor4) -> Result<()> {
        if !self.nodes[id.0].needs_grad {
            return Ok(());
        }
        grads[id.0] = Some(match grads[id.0].take() {
            Some(g) => tensor::add(&g, &delta)?,
            None => delta,
        });
        Ok(())
    }

    fn accumulate(&self, op: &Op, g: &Tensor4, grads: &mut [Option<Tensor4>]) -> Result<()> {
        let val = |id: NodeId| &self.nodes[id.0].value;
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.bump(grads, a, g.clone())?;
                self.bump(grads, b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.bump(grads, a, g.clone())?;
                self.bump(grads, b, tensor::scale(g, -1.0))?;
            }
            Op::Mul(a, b) => {
                self.bump(grads, a, tensor::mul(g, val(b))?)?;
                self.bump(grads, b, tensor::mul(g, val(a))?)?;
            }
            Op::Scale(a, k) => self.bump(grads, a, tensor::scale(g, k))?,
            Op::Exp(a) => {
                let ev = val(a).map(f64::exp);
                self.bump(grads, a, tensor::mul(g, &ev)?)?;
            }
            Op::Log(a) => {
                let inv = val(a).map(|u| 1.0 / u);
                self.bump(grads, a, tensor::mul(g, &inv)?)?;
            }
            Op::Act(a, kind) => {
                let d = val(a).map(|u| kind.h_prime(u));
                self.bump(grads, a, tensor::mul(g, &d)?)?;
            }
            Op::ActPrime(a, kind) => {
                let d = val(a).map(|u| kind.h_second(u));
                self.bump(grads, a, tensor::mul(g, &d)?)?;
            }
            Op::Conv { x, w, pad } => {
                let wt = ConvWeight::from_tensor(val(w))?;
                if self.nodes[x.0].needs_grad {
                    let gx = tensor::conv2d_grad_input(&wt, g, pad)?;
                    self.bump(grads, x, gx)?;
                }
                if self.nodes[w.0].needs_grad {
                    let gw = tensor::conv2d_grad_weight(val(x), g, wt.r(), pad)?;
                    self.bump(grads, w, gw.as_tensor())?;
                }
            }
            Op::AddChan { x, v } => {
                self.bump(grads, x, g.clone())?;
                self.bump(grads, v, Tensor4::from_channel_vec(&tensor::sum_channels(g)))?;
            }
            Op::MulChan { x, v } => {
                if self.nodes[x.0].needs_grad {
                    let gx = tensor::mul_channel(g, val(v).data())?;
                    self.bump(grads, x, gx)?;
                }
                if self.nodes[v.0].needs_grad {
                    let gv = tensor::sum_channels(&tensor::mul(g, val(x))?);
                    self.bump(grads, v, Tensor4::from_channel_vec(&gv))?;
                }
            }
            Op::Gather { x, ref idx } => {
                let gx = tensor::scatter_add_flat(val(x), idx, g)?;
                self.bump(grads, x, gx)?;
            }
            Op::SliceChan { x, start, .. } => {
                let gx = tensor::pad_channels(g, start, val(x).c())?;
                self.bump(grads, x, gx)?;
            }
            Op::GroupRepeat { x, k } => {
                self.bump(grads, x, tensor::group_sum(g, k)?)?;
            }
            Op::GroupSum { x, k } => {
                self.bump(grads, x, tensor::group_repeat(g, k)?)?;
            }
            Op::SumAll(a) => {
                let v = val(a);
                self.bump(grads, a, Tensor4::full(v.n(), v.c(), v.h(), v.w(), g.data()[0]))?;
            }
            Op::Squeeze { x, k } => {
                self.bump(grads, x, tensor::unsqueeze(g, k)?)?;
            }
        }
        Ok(())
    }
}

/// Compare a tape-built scalar objective against central finite differences.
///
/// `f` must rebuild the objective from leaf nodes created from `params`; it is
/// evaluated once for the analytic gradient and twice per coordinate for the
/// differences. Returns the max over coordinates of
/// `|analytic - cd| / (|analytic| + |cd| + 1e-8)`.
pub fn grad_check(
    f: impl Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
    params: &[Tensor4],
    eps: f64,
) -> Result<f64> {
    let eval = |ps: &[Tensor4]| -> Result<(f64, Option<Gradients>, Vec<NodeId>)> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = ps.iter().map(|p| tape.leaf(p.clone())).collect();
        let out = f(&mut tape, &ids)?;
        let v = tape.scalar_value(out)?;
        if !v.is_finite() {
            return Err(Error::NonFinite { context: "grad_check objective".into() });
        }
        Ok((v, Some(tape.backward(out)?), ids))
    };

    let (_, grads, ids) = eval(params)?;
    let grads = grads.unwrap();

    let mut max_err = 0.0f64;
    let mut work: Vec<Tensor4> = params.to_vec();
    for (pi, param) in params.iter().enumerate() {
        let analytic = grads.wrt(ids[pi]);
        for ci in 0..param.len() {
            let orig = param.data()[ci];
            work[pi].data_mut()[ci] = orig + eps;
            let mut tape = Tape::new();
            let leaf_ids: Vec<NodeId> = work.iter().map(|p| tape.constant(p.clone())).collect();
            let out = f(&mut tape, &leaf_ids)?;
            let plus = tape.scalar_value(out)?;
            work[pi].data_mut()[ci] = orig - eps;
            let mut tape = Tape::new();
            let leaf_ids: Vec<NodeId> = work.iter().map(|p| tape.constant(p.clone())).collect();
            let out = f(&mut tape, &leaf_ids)?;
            let minus = tape.scalar_value(out)?;
            work[pi].data_mut()[ci] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite { context: "grad_check perturbation".into() });
            }
            let cd = (plus - minus) / (2.0 * eps);
            let an = analytic.map_or(0.0, |t| t.data()[ci]);
            let err = (an - cd).abs() / (an.abs() + cd.abs() + 1e-8);
            max_err = max_err.max(err);
        }
    }
    Ok(max_err)
}
