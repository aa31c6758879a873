//! The Mint layer: a residual-style invertible block built from three masked
//! convolutions.
//!
//! Forward map: `y = t (.) x + conv3(h(conv2(h(conv1(x) + b1)) + b2)) + b3`
//! with all three weights used only through `mask (.) weight` and the middle
//! weight sign-fixed (see [`MintParams::effective_w2`]) so that the product of
//! center diagonals is nonnegative for every filter-group pair. Together with
//! `t = exp(log_t) > 0` this makes the Jacobian diagonal strictly positive,
//! which is the invertibility condition the fixed-point solver relies on.
//!
//! The Jacobian of the layer is triangular (in the layer's orientation), so
//! its log-determinant is the sum of `log` of an analytically-known diagonal:
//! at channel `c` and pixel `p`,
//!
//! ```text
//! diag(J)(c,p) = sum_i d3[i,c] * A_i(c,p) * sum_j d2'[i,j,c] * B_j(c,p) * d1[j,c]  +  t_c
//! ```
//!
//! where `A_i`, `B_j` are `h'` of the second and first pre-activations and
//! `d*` are the center same-channel weights per filter group. No estimation is
//! involved anywhere.

use crate::autodiff::{Activation, NodeId, Tape};
use crate::error::{Error, Result};
use crate::masks::{grouped_mask, Mask, Orientation};
use crate::tensor::{self, ConvWeight, Tensor4};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Weights, biases, scale, orientation and group count of one Mint layer.
#[derive(Clone, Debug)]
pub struct MintParams {
    pub w1: ConvWeight,
    pub w2: ConvWeight,
    pub w3: ConvWeight,
    pub b1: Vec<f64>,
    pub b2: Vec<f64>,
    pub b3: Vec<f64>,
    pub log_t: Vec<f64>,
    channels: usize,
    k_groups: usize,
    kernel: usize,
    orientation: Orientation,
    activation: Activation,
    m1: Mask,
    m2: Mask,
    m3: Mask,
}

/// Center same-channel weights of the three convolutions, the `diag(W)`
/// factors of the Jacobian diagonal.
#[derive(Clone, Debug)]
pub struct CenterDiags {
    /// `d1[j*C + c] = w1(j*C+c, c, r/2, r/2)`
    pub d1: Vec<f64>,
    /// `d2[(i*K + j)*C + c] = w2(i*C+c, j*C+c, r/2, r/2)`
    pub d2: Vec<f64>,
    /// `d3[i*C + c] = w3(c, i*C+c, r/2, r/2)`
    pub d3: Vec<f64>,
}

/// Initialization settings for [`MintParams::init`].
#[derive(Clone, Copy, Debug)]
pub struct MintInit {
    pub channels: usize,
    pub k_groups: usize,
    pub kernel: usize,
    pub orientation: Orientation,
    pub activation: Activation,
    /// Weight std is `weight_scale / sqrt(fan_in)`; 0.05 gives a
    /// near-identity start with `t = 1`.
    pub weight_scale: f64,
}

impl MintInit {
    pub fn new(channels: usize, k_groups: usize, kernel: usize, orientation: Orientation) -> Self {
        Self {
            channels,
            k_groups,
            kernel,
            orientation,
            activation: Activation::Elu,
            weight_scale: 0.05,
        }
    }
}

impl MintParams {
    pub fn new(
        w1: ConvWeight,
        w2: ConvWeight,
        w3: ConvWeight,
        b1: Vec<f64>,
        b2: Vec<f64>,
        b3: Vec<f64>,
        log_t: Vec<f64>,
        k_groups: usize,
        orientation: Orientation,
        activation: Activation,
    ) -> Result<Self> {
        let c = w1.c_in();
        let k = k_groups;
        let r = w1.r();
        let expect = |cond: bool, what: &str, got: String| -> Result<()> {
            if cond {
                Ok(())
            } else {
                Err(Error::ShapeMismatch {
                    context: "MintParams::new",
                    expected: what.to_string(),
                    got,
                })
            }
        };
        expect(k >= 1, "k_groups >= 1", format!("{k}"))?;
        expect(
            w1.c_out() == k * c,
            "w1 of shape (K*C, C, R, R)",
            format!("({},{},{},{})", w1.c_out(), w1.c_in(), w1.r(), w1.r()),
        )?;
        expect(
            w2.c_out() == k * c && w2.c_in() == k * c && w2.r() == r,
            "w2 of shape (K*C, K*C, R, R)",
            format!("({},{},{},{})", w2.c_out(), w2.c_in(), w2.r(), w2.r()),
        )?;
        expect(
            w3.c_out() == c && w3.c_in() == k * c && w3.r() == r,
            "w3 of shape (C, K*C, R, R)",
            format!("({},{},{},{})", w3.c_out(), w3.c_in(), w3.r(), w3.r()),
        )?;
        expect(b1.len() == k * c, "b1 of length K*C", format!("{}", b1.len()))?;
        expect(b2.len() == k * c, "b2 of length K*C", format!("{}", b2.len()))?;
        expect(b3.len() == c, "b3 of length C", format!("{}", b3.len()))?;
        expect(log_t.len() == c, "log_t of length C", format!("{}", log_t.len()))?;
        let m1 = grouped_mask(c, k, 1, r, orientation)?;
        let m2 = grouped_mask(c, k, k, r, orientation)?;
        let m3 = grouped_mask(c, 1, k, r, orientation)?;
        Ok(Self {
            w1,
            w2,
            w3,
            b1,
            b2,
            b3,
            log_t,
            channels: c,
            k_groups: k,
            kernel: r,
            orientation,
            activation,
            m1,
            m2,
            m3,
        })
    }

    /// Near-identity initialization: scaled-normal weights, zero biases,
    /// `log_t = 0` so `t = 1`.
    pub fn init(cfg: &MintInit, rng: &mut impl Rng) -> Result<Self> {
        let (c, k, r) = (cfg.channels, cfg.k_groups, cfg.kernel);
        let mut draw = |c_out: usize, c_in: usize| -> Result<ConvWeight> {
            let fan_in = (c_in * r * r) as f64;
            let normal = Normal::new(0.0, cfg.weight_scale / fan_in.sqrt())
                .map_err(|e| Error::InvalidArg(format!("bad init scale: {e}")))?;
            let data = (0..c_out * c_in * r * r).map(|_| normal.sample(rng)).collect();
            ConvWeight::new(c_out, c_in, r, data)
        };
        let w1 = draw(k * c, c)?;
        let w2 = draw(k * c, k * c)?;
        let w3 = draw(c, k * c)?;
        Self::new(
            w1,
            w2,
            w3,
            vec![0.0; k * c],
            vec![0.0; k * c],
            vec![0.0; c],
            vec![0.0; c],
            k,
            cfg.orientation,
            cfg.activation,
        )
    }

    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn k_groups(&self) -> usize {
        self.k_groups
    }
    pub fn kernel(&self) -> usize {
        self.kernel
    }
    pub fn orientation(&self) -> Orientation {
        self.orientation
    }
    pub fn activation(&self) -> Activation {
        self.activation
    }
    pub fn pad(&self) -> usize {
        self.kernel / 2
    }

    /// Per-channel scale `t = exp(log_t)`, strictly positive by construction.
    pub fn t(&self) -> Vec<f64> {
        self.log_t.iter().map(|&v| v.exp()).collect()
    }

    fn center(&self) -> usize {
        self.kernel / 2
    }

    /// Flat indices of `d1` entries in `w1`, ordered by `j*C + c`.
    pub(crate) fn d1_indices(&self) -> Vec<usize> {
        let (c, k, ctr) = (self.channels, self.k_groups, self.center());
        let mut out = Vec::with_capacity(k * c);
        for j in 0..k {
            for ch in 0..c {
                out.push(self.w1.idx(j * c + ch, ch, ctr, ctr));
            }
        }
        out
    }

    /// Flat indices of `d2` entries for input group `j` in `w2`, ordered by
    /// `i*C + c`.
    pub(crate) fn d2_indices(&self, j: usize) -> Vec<usize> {
        let (c, k, ctr) = (self.channels, self.k_groups, self.center());
        let mut out = Vec::with_capacity(k * c);
        for i in 0..k {
            for ch in 0..c {
                out.push(self.w2.idx(i * c + ch, j * c + ch, ctr, ctr));
            }
        }
        out
    }

    /// Flat indices of `d3` entries in `w3`, ordered by `i*C + c`.
    pub(crate) fn d3_indices(&self) -> Vec<usize> {
        let (c, k, ctr) = (self.channels, self.k_groups, self.center());
        let mut out = Vec::with_capacity(k * c);
        for i in 0..k {
            for ch in 0..c {
                out.push(self.w3.idx(ch, i * c + ch, ctr, ctr));
            }
        }
        out
    }

    /// Center diagonals of the raw weights (mask is 1 at every center
    /// same-channel position, so raw and masked agree here).
    pub fn center_diags(&self) -> CenterDiags {
        let (c, k, ctr) = (self.channels, self.k_groups, self.center());
        let mut d1 = vec![0.0; k * c];
        let mut d2 = vec![0.0; k * k * c];
        let mut d3 = vec![0.0; k * c];
        for j in 0..k {
            for ch in 0..c {
                d1[j * c + ch] = self.w1.at(j * c + ch, ch, ctr, ctr);
                d3[j * c + ch] = self.w3.at(ch, j * c + ch, ctr, ctr);
            }
        }
        for i in 0..k {
            for j in 0..k {
                for ch in 0..c {
                    d2[(i * k + j) * c + ch] = self.w2.at(i * c + ch, j * c + ch, ctr, ctr);
                }
            }
        }
        CenterDiags { d1, d2, d3 }
    }

    fn sign(v: f64) -> f64 {
        if v > 0.0 {
            1.0
        } else if v < 0.0 {
            -1.0
        } else {
            0.0
        }
    }

    /// Per-(group-pair, channel) sign factors
    /// `s[i,j,c] = sign(d2[i,j,c]) * sign(d3[i,c] * d1[j,c])`,
    /// indexed `(i*K + j)*C + c`. `sign(0) = 0`, which zeroes the offending
    /// column instead of leaving the constraint unresolved at ties.
    pub fn sign_factors(&self) -> Vec<f64> {
        let CenterDiags { d1, d2, d3 } = self.center_diags();
        let (c, k) = (self.channels, self.k_groups);
        let mut s = vec![0.0; k * k * c];
        for i in 0..k {
            for j in 0..k {
                for ch in 0..c {
                    s[(i * k + j) * c + ch] = Self::sign(d2[(i * k + j) * c + ch])
                        * Self::sign(d3[i * c + ch] * d1[j * c + ch]);
                }
            }
        }
        s
    }

    /// Expand the sign factors to the shape of `w2`: every weight reading
    /// input channel `j*C+c` inside output group `i` is scaled by `s[i,j,c]`
    /// (a column scaling of the dense operator of each group block).
    pub fn sign_scale_tensor(&self) -> Tensor4 {
        let s = self.sign_factors();
        let (c, k, r) = (self.channels, self.k_groups, self.kernel);
        Tensor4::from_fn(k * c, k * c, r, r, |co, ci, _, _| {
            let i = co / c;
            let j = ci / c;
            let ch = ci % c;
            s[(i * k + j) * c + ch]
        })
    }

    /// Sign-fixed middle weight `V2` (unmasked). Treated as a function of the
    /// raw `w2` with the sign factors held constant in backward.
    pub fn effective_w2(&self) -> ConvWeight {
        let s = self.sign_scale_tensor();
        let data = self
            .w2
            .data()
            .iter()
            .zip(s.data())
            .map(|(w, s)| w * s)
            .collect();
        ConvWeight::new(self.w2.c_out(), self.w2.c_in(), self.kernel, data)
            .expect("same shape as w2")
    }

    /// Reparameterized center diagonals `d2'` with
    /// `d3[i,c] * d2'[i,j,c] * d1[j,c] >= 0` for all `i, j, c`.
    pub fn reparam_center_d2(&self) -> Vec<f64> {
        let s = self.sign_factors();
        let d2 = self.center_diags().d2;
        d2.iter().zip(&s).map(|(d, s)| d * s).collect()
    }

    /// Precompute masked weights and center diagonals for repeated evaluation
    /// (the solver calls `forward`/`jac_diag` many times per inversion).
    pub fn compiled(&self) -> Result<CompiledMint> {
        let w1m = self.m1.apply(&self.w1)?;
        let v2m = self.m2.apply(&self.effective_w2())?;
        let w3m = self.m3.apply(&self.w3)?;
        let CenterDiags { d1, d3, .. } = self.center_diags();
        let d2p = self.reparam_center_d2();
        Ok(CompiledMint {
            w1m,
            v2m,
            w3m,
            b1: self.b1.clone(),
            b2: self.b2.clone(),
            b3: self.b3.clone(),
            t: self.t(),
            d1,
            d2p,
            d3,
            channels: self.channels,
            k_groups: self.k_groups,
            pad: self.pad(),
            activation: self.activation,
        })
    }

    pub fn forward(&self, x: &Tensor4) -> Result<Tensor4> {
        self.compiled()?.forward(x)
    }

    pub fn jac_diag(&self, x: &Tensor4) -> Result<Tensor4> {
        self.compiled()?.jac_diag(x)
    }

    /// Exact log-determinant of the Jacobian, one value per batch element.
    pub fn log_det(&self, x: &Tensor4) -> Result<Vec<f64>> {
        self.compiled()?.log_det(x)
    }

    /// Default solver initialization `x0 = z (.) 1/t`.
    pub fn default_x0(&self, z: &Tensor4) -> Result<Tensor4> {
        let inv_t: Vec<f64> = self.t().iter().map(|&v| 1.0 / v).collect();
        tensor::mul_channel(z, &inv_t)
    }

    /// Stable ordering of the learnable tensors, shared by the optimizer and
    /// the checkpoint format.
    pub fn tensor_names() -> [&'static str; 7] {
        ["w1", "w2", "w3", "b1", "b2", "b3", "log_t"]
    }

    pub fn tensors(&self) -> Vec<(&'static str, &[f64])> {
        vec![
            ("w1", self.w1.data()),
            ("w2", self.w2.data()),
            ("w3", self.w3.data()),
            ("b1", &self.b1),
            ("b2", &self.b2),
            ("b3", &self.b3),
            ("log_t", &self.log_t),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        vec![
            ("w1", self.w1.data_mut()),
            ("w2", self.w2.data_mut()),
            ("w3", self.w3.data_mut()),
            ("b1", self.b1.as_mut_slice()),
            ("b2", self.b2.as_mut_slice()),
            ("b3", self.b3.as_mut_slice()),
            ("log_t", self.log_t.as_mut_slice()),
        ]
    }
}

/// Masked, sign-fixed weights ready for repeated evaluation.
pub struct CompiledMint {
    w1m: ConvWeight,
    v2m: ConvWeight,
    w3m: ConvWeight,
    b1: Vec<f64>,
    b2: Vec<f64>,
    b3: Vec<f64>,
    t: Vec<f64>,
    d1: Vec<f64>,
    d2p: Vec<f64>,
    d3: Vec<f64>,
    channels: usize,
    k_groups: usize,
    pad: usize,
    activation: Activation,
}

impl CompiledMint {
    fn check_input(&self, x: &Tensor4) -> Result<()> {
        if x.c() != self.channels {
            return Err(Error::ShapeMismatch {
                context: "mint forward",
                expected: format!("{} channels", self.channels),
                got: x.shape_str(),
            });
        }
        Ok(())
    }

    fn preactivations(&self, x: &Tensor4) -> Result<(Tensor4, Tensor4)> {
        let act = self.activation;
        let u1 = tensor::conv2d(x, &self.w1m, Some(&self.b1), self.pad)?;
        let a1 = u1.map(|u| act.h(u));
        let u2 = tensor::conv2d(&a1, &self.v2m, Some(&self.b2), self.pad)?;
        Ok((u1, u2))
    }

    pub fn forward(&self, x: &Tensor4) -> Result<Tensor4> {
        self.check_input(x)?;
        let act = self.activation;
        let (_, u2) = self.preactivations(x)?;
        let a2 = u2.map(|u| act.h(u));
        let res = tensor::conv2d(&a2, &self.w3m, Some(&self.b3), self.pad)?;
        tensor::add(&tensor::mul_channel(x, &self.t)?, &res)
    }

    pub fn jac_diag(&self, x: &Tensor4) -> Result<Tensor4> {
        self.check_input(x)?;
        let (u1, u2) = self.preactivations(x)?;
        Ok(self.jac_diag_from_preacts(&u1, &u2))
    }

    fn jac_diag_from_preacts(&self, u1: &Tensor4, u2: &Tensor4) -> Tensor4 {
        let act = self.activation;
        let (c, k) = (self.channels, self.k_groups);
        let (n, _, h, w) = u1.shape();
        let hw = h * w;
        let mut out = Tensor4::zeros(n, c, h, w);
        for bn in 0..n {
            for ch in 0..c {
                for p in 0..hw {
                    let mut total = self.t[ch];
                    for i in 0..k {
                        let a_fac = act.h_prime(u2.data()[(bn * k * c + i * c + ch) * hw + p]);
                        if a_fac == 0.0 {
                            continue;
                        }
                        let mut inner = 0.0;
                        for j in 0..k {
                            let b_fac =
                                act.h_prime(u1.data()[(bn * k * c + j * c + ch) * hw + p]);
                            inner += self.d2p[(i * k + j) * c + ch] * b_fac * self.d1[j * c + ch];
                        }
                        total += self.d3[i * c + ch] * a_fac * inner;
                    }
                    out.data_mut()[(bn * c + ch) * hw + p] = total;
                }
            }
        }
        out
    }

    /// Forward value and Jacobian diagonal sharing one pass over the convs.
    pub fn forward_and_jac(&self, x: &Tensor4) -> Result<(Tensor4, Tensor4)> {
        self.check_input(x)?;
        let act = self.activation;
        let (u1, u2) = self.preactivations(x)?;
        let a2 = u2.map(|u| act.h(u));
        let res = tensor::conv2d(&a2, &self.w3m, Some(&self.b3), self.pad)?;
        let y = tensor::add(&tensor::mul_channel(x, &self.t)?, &res)?;
        Ok((y, self.jac_diag_from_preacts(&u1, &u2)))
    }

    pub fn log_det(&self, x: &Tensor4) -> Result<Vec<f64>> {
        let jd = self.jac_diag(x)?;
        Ok(tensor::sum_per_element(&jd.map(f64::ln)))
    }
}

/// Leaf node ids for one layer's parameters on a tape.
#[derive(Clone, Copy, Debug)]
pub struct MintNodes {
    pub w1: NodeId,
    pub w2: NodeId,
    pub w3: NodeId,
    pub b1: NodeId,
    pub b2: NodeId,
    pub b3: NodeId,
    pub log_t: NodeId,
}

impl MintNodes {
    /// Same order as [`MintParams::tensor_names`].
    pub fn in_order(&self) -> [NodeId; 7] {
        [self.w1, self.w2, self.w3, self.b1, self.b2, self.b3, self.log_t]
    }
}

/// Register the layer's parameters as differentiable leaves.
pub fn register(tape: &mut Tape, params: &MintParams) -> MintNodes {
    MintNodes {
        w1: tape.leaf(params.w1.as_tensor()),
        w2: tape.leaf(params.w2.as_tensor()),
        w3: tape.leaf(params.w3.as_tensor()),
        b1: tape.leaf(Tensor4::from_channel_vec(&params.b1)),
        b2: tape.leaf(Tensor4::from_channel_vec(&params.b2)),
        b3: tape.leaf(Tensor4::from_channel_vec(&params.b3)),
        log_t: tape.leaf(Tensor4::from_channel_vec(&params.log_t)),
    }
}

/// Taped outputs of one layer: the mapped tensor and the log-determinant
/// summed over the whole batch.
pub struct MintTapeOut {
    pub y: NodeId,
    pub log_det_sum: NodeId,
}

/// Build the layer's forward map and exact log-determinant on the tape.
///
/// Masks and the sign factors of the middle weight enter as constants; the
/// sign factors are recomputed from the current raw weights each time
/// (straight-through: constant in backward, so gradients pass to `w2`).
pub fn build_tape(
    tape: &mut Tape,
    params: &MintParams,
    nodes: &MintNodes,
    x: NodeId,
) -> Result<MintTapeOut> {
    let (c, k, pad) = (params.channels, params.k_groups, params.pad());
    let act = params.activation;

    let m1c = tape.constant(mask_as_tensor(&params.m1));
    let m3c = tape.constant(mask_as_tensor(&params.m3));
    let m2s = {
        let signs = params.sign_scale_tensor();
        let m2 = mask_as_tensor(&params.m2);
        tape.constant(tensor::mul(&m2, &signs)?)
    };

    let mw1 = tape.mul(nodes.w1, m1c)?;
    let mv2 = tape.mul(nodes.w2, m2s)?;
    let mw3 = tape.mul(nodes.w3, m3c)?;

    let c1 = tape.conv(x, mw1, pad)?;
    let u1 = tape.add_chan(c1, nodes.b1)?;
    let bfac = tape.act_prime(u1, act)?;
    let a1 = tape.act(u1, act)?;

    let c2 = tape.conv(a1, mv2, pad)?;
    let u2 = tape.add_chan(c2, nodes.b2)?;
    let afac = tape.act_prime(u2, act)?;
    let a2 = tape.act(u2, act)?;

    let t = tape.exp(nodes.log_t)?;
    let c3 = tape.conv(a2, mw3, pad)?;
    let res = tape.add_chan(c3, nodes.b3)?;
    let tx = tape.mul_chan(x, t)?;
    let y = tape.add(tx, res)?;

    // Jacobian diagonal from the same pre-activations.
    let d1 = tape.gather(mw1, params.d1_indices())?;
    let d3 = tape.gather(mw3, params.d3_indices())?;
    let bw = tape.mul_chan(bfac, d1)?;
    let mut inner: Option<NodeId> = None;
    for j in 0..k {
        let d2j = tape.gather(mv2, params.d2_indices(j))?;
        let bj = tape.slice_chan(bw, j * c, c)?;
        let rep = tape.group_repeat(bj, k)?;
        let term = tape.mul_chan(rep, d2j)?;
        inner = Some(match inner {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    let inner = inner.expect("k_groups >= 1");
    let aw = tape.mul_chan(afac, d3)?;
    let prod = tape.mul(aw, inner)?;
    let gs = tape.group_sum(prod, k)?;
    let jd = tape.add_chan(gs, t)?;
    let ljd = tape.log(jd)?;
    let log_det_sum = tape.sum_all(ljd)?;

    Ok(MintTapeOut { y, log_det_sum })
}

fn mask_as_tensor(m: &Mask) -> Tensor4 {
    Tensor4::new(m.c_out(), m.c_in(), m.r(), m.r(), m.data().to_vec()).expect("mask data is dense")
}
