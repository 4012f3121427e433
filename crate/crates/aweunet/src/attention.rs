//! Position/channel attention and weight excitation blocks.
//!
//! PAB builds a softmax affinity over spatial positions, CAB over channels,
//! and WEB derives per-channel gains from a convolution's own weights via a
//! bottleneck MLP. PAWE = PAB + WEB gating, CAWE = CAB + WEB gating; both
//! reduce to the identity at initialization because the attention scale
//! starts at zero.

use ndarray::{Array1, Array2, Array3, Array4, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{as1, as3, ArrD, Tape, Var};
use crate::error::{Error, Result};
use crate::kernels;

/// C×H×W activation tensor.
pub type FeatureMap = Array3<f64>;

/// Spatial affinity matrix. `data[j][i]` is the attention weight of source
/// position `i` for target position `j`; every row sums to 1.
#[derive(Debug, Clone)]
pub struct SpatialAttentionMap {
    pub data: Array2<f64>,
}

/// Channel affinity matrix, row-stochastic like [`SpatialAttentionMap`].
#[derive(Debug, Clone)]
pub struct ChannelAttentionMap {
    pub data: Array2<f64>,
}

/// Non-negative per-output-channel gains produced by WEB.
#[derive(Debug, Clone)]
pub struct ExcitationVector {
    pub gains: Array1<f64>,
}

/// Bottleneck MLP applied to channel-averaged convolution weights.
#[derive(Debug, Clone)]
pub struct WebParams {
    pub fc1_w: Array2<f64>,
    pub fc1_b: Array1<f64>,
    pub fc2_w: Array2<f64>,
    pub fc2_b: Array1<f64>,
}

/// Parameters of one PAWE block. `main_conv` is the block's feature
/// convolution; its weight tensor is what WEB excites.
#[derive(Debug, Clone)]
pub struct PaweParams {
    pub proj_a_w: Array4<f64>,
    pub proj_a_b: Array1<f64>,
    pub proj_b_w: Array4<f64>,
    pub proj_b_b: Array1<f64>,
    pub proj_c_w: Array4<f64>,
    pub proj_c_b: Array1<f64>,
    pub alpha: f64,
    pub main_conv_w: Array4<f64>,
    pub main_conv_b: Array1<f64>,
    pub web: WebParams,
}

/// Parameters of one CAWE block; `skip_conv` plays the WEB weight-source
/// role that `main_conv` plays in PAWE.
#[derive(Debug, Clone)]
pub struct CaweParams {
    pub alpha: f64,
    pub skip_conv_w: Array4<f64>,
    pub skip_conv_b: Array1<f64>,
    pub web: WebParams,
}

/// Channel count of the attention projections: ⌈C/8⌉, never below 1.
pub fn reduced_channels(c: usize) -> usize {
    c.div_ceil(8).max(1)
}

/// Kaiming-uniform fan-in initialization.
pub fn kaiming_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> ArrD {
    let bound = (6.0 / fan_in as f64).sqrt();
    ArrD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-bound..bound))
}

impl WebParams {
    /// Zero-bias web MLP for `c_out` channels with reduction ratio `r`.
    pub fn init(rng: &mut ChaCha8Rng, c_out: usize, r: usize) -> Self {
        let hidden = c_out.div_ceil(r).max(1);
        WebParams {
            fc1_w: kaiming_uniform(rng, &[hidden, c_out], c_out)
                .into_dimensionality()
                .unwrap(),
            fc1_b: Array1::zeros(hidden),
            fc2_w: kaiming_uniform(rng, &[c_out, hidden], hidden)
                .into_dimensionality()
                .unwrap(),
            fc2_b: Array1::zeros(c_out),
        }
    }
}

impl PaweParams {
    /// Block with a 3×3 main convolution `c_in → c_out` and 1×1 attention
    /// projections over `c_out` channels.
    pub fn init(rng: &mut ChaCha8Rng, c_in: usize, c_out: usize, web_ratio: usize) -> Self {
        let r = reduced_channels(c_out);
        PaweParams {
            proj_a_w: kaiming_uniform(rng, &[r, c_out, 1, 1], c_out)
                .into_dimensionality()
                .unwrap(),
            proj_a_b: Array1::zeros(r),
            proj_b_w: kaiming_uniform(rng, &[r, c_out, 1, 1], c_out)
                .into_dimensionality()
                .unwrap(),
            proj_b_b: Array1::zeros(r),
            proj_c_w: kaiming_uniform(rng, &[c_out, c_out, 1, 1], c_out)
                .into_dimensionality()
                .unwrap(),
            proj_c_b: Array1::zeros(c_out),
            alpha: 0.0,
            main_conv_w: kaiming_uniform(rng, &[c_out, c_in, 3, 3], c_in * 9)
                .into_dimensionality()
                .unwrap(),
            main_conv_b: Array1::zeros(c_out),
            web: WebParams::init(rng, c_out, web_ratio),
        }
    }
}

impl CaweParams {
    pub fn init(rng: &mut ChaCha8Rng, c: usize, web_ratio: usize) -> Self {
        CaweParams {
            alpha: 0.0,
            skip_conv_w: kaiming_uniform(rng, &[c, c, 3, 3], c * 9)
                .into_dimensionality()
                .unwrap(),
            skip_conv_b: Array1::zeros(c),
            web: WebParams::init(rng, c, web_ratio),
        }
    }
}

// ---- tape-level building blocks (shared by the standalone API and the model) ----

/// Tape handles for one PAWE block's parameters.
pub struct PaweVars {
    pub proj_a_w: Var,
    pub proj_a_b: Var,
    pub proj_b_w: Var,
    pub proj_b_b: Var,
    pub proj_c_w: Var,
    pub proj_c_b: Var,
    pub alpha: Var,
    pub main_conv_w: Var,
    pub web: WebVars,
}

pub struct WebVars {
    pub fc1_w: Var,
    pub fc1_b: Var,
    pub fc2_w: Var,
    pub fc2_b: Var,
}

pub struct CaweVars {
    pub alpha: Var,
    pub skip_conv_w: Var,
    pub web: WebVars,
}

/// WEB excitation on the tape: mean-pool the weight tensor per output
/// channel, then FC1 → ReLU → FC2 → ReLU.
pub fn web_op(tape: &mut Tape, conv_w: Var, web: &WebVars) -> Var {
    let ap = tape.mean_over_tail(conv_w);
    let h = tape.linear(web.fc1_w, ap, web.fc1_b);
    let h = tape.relu(h);
    let e = tape.linear(web.fc2_w, h, web.fc2_b);
    tape.relu(e)
}

/// Position attention branch: residual plus alpha-scaled aggregation of the
/// value projection under the softmax spatial affinity.
pub fn pab_op(tape: &mut Tape, y: Var, v: &PaweVars) -> Var {
    let (c, h, w) = as3(tape.value(y)).dim();
    let n = h * w;
    let a = tape.conv2d(y, v.proj_a_w, v.proj_a_b, 0);
    let b = tape.conv2d(y, v.proj_b_w, v.proj_b_b, 0);
    let cf = tape.conv2d(y, v.proj_c_w, v.proj_c_b, 0);
    let r = as3(tape.value(a)).dim().0;
    let a2 = tape.reshape(a, &[r, n]);
    let b2 = tape.reshape(b, &[r, n]);
    let c2 = tape.reshape(cf, &[c, n]);
    let agg = tape.attention_aggregate(a2, b2, c2);
    let agg = tape.reshape(agg, &[c, h, w]);
    let scaled = tape.scale(agg, v.alpha);
    tape.add(scaled, y)
}

/// Full PAWE operator: PAB output plus the WEB-gated input.
pub fn pawe_op(tape: &mut Tape, y: Var, v: &PaweVars) -> Var {
    let pab = pab_op(tape, y, v);
    let e = web_op(tape, v.main_conv_w, &v.web);
    let gated = tape.channel_scale(y, e);
    tape.add(pab, gated)
}

/// Channel attention branch: residual plus alpha-scaled channel mixing
/// under the softmax Gram affinity.
pub fn cab_op(tape: &mut Tape, y: Var, alpha: Var) -> Var {
    let (c, h, w) = as3(tape.value(y)).dim();
    let n = h * w;
    let yf = tape.reshape(y, &[c, n]);
    let gram = tape.matmul_nt(yf, yf);
    let e = tape.softmax_cols(gram);
    let agg = tape.matmul_tn(e, yf);
    let agg = tape.reshape(agg, &[c, h, w]);
    let scaled = tape.scale(agg, alpha);
    tape.add(scaled, y)
}

/// Full CAWE operator: CAB output plus the WEB-gated input.
pub fn cawe_op(tape: &mut Tape, y: Var, v: &CaweVars) -> Var {
    let cab = cab_op(tape, y, v.alpha);
    let e = web_op(tape, v.skip_conv_w, &v.web);
    let gated = tape.channel_scale(y, e);
    tape.add(cab, gated)
}

// ---- standalone (evaluation) API ----

fn check_finite(y: &FeatureMap, what: &str) -> Result<()> {
    if y.iter().any(|x| !x.is_finite()) {
        return Err(Error::contract(format!("{what}: non-finite entries")));
    }
    Ok(())
}

/// Softmax affinity between two projected feature maps (Eq. form:
/// normalized over source positions). Returns the row-stochastic map.
pub fn spatial_attention(a: &FeatureMap, b: &FeatureMap) -> Result<SpatialAttentionMap> {
    if a.dim() != b.dim() {
        return Err(Error::contract(format!(
            "spatial_attention: shape mismatch {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    check_finite(a, "spatial_attention")?;
    let (r, h, w) = a.dim();
    let n = h * w;
    let af = a.to_shape((r, n)).unwrap().to_owned();
    let bf = b.to_shape((r, n)).unwrap().to_owned();
    // logits[i][j] = A_i · B_j, normalized over i (columns sum to 1)
    let logits = af.t().dot(&bf);
    let d = kernels::softmax_cols(logits.view());
    // store transposed: row j is the distribution over sources for target j
    Ok(SpatialAttentionMap {
        data: d.t().as_standard_layout().to_owned(),
    })
}

/// Channel affinity of a feature map with itself (Gram softmax), stored
/// row-stochastic like [`spatial_attention`].
pub fn channel_attention(y: &FeatureMap) -> Result<ChannelAttentionMap> {
    check_finite(y, "channel_attention")?;
    let (c, h, w) = y.dim();
    let yf = y.to_shape((c, h * w)).unwrap().to_owned();
    let gram = yf.dot(&yf.t());
    let e = kernels::softmax_cols(gram.view());
    Ok(ChannelAttentionMap {
        data: e.t().as_standard_layout().to_owned(),
    })
}

/// WEB excitation of a convolution weight tensor through the given MLP.
pub fn web_excitation(conv_weights: &ArrD, web: &WebParams) -> Result<ExcitationVector> {
    let c_out = conv_weights.shape()[0];
    if web.fc1_w.dim().1 != c_out || web.fc2_w.dim().1 != web.fc1_w.dim().0 {
        return Err(Error::contract(format!(
            "web_excitation: fc dims {:?}/{:?} incompatible with {} channels",
            web.fc1_w.dim(),
            web.fc2_w.dim(),
            c_out
        )));
    }
    let mut tape = Tape::eval();
    let w = tape.leaf(conv_weights.clone());
    let vars = bind_web(&mut tape, web);
    let e = web_op(&mut tape, w, &vars);
    Ok(ExcitationVector {
        gains: as1(tape.value(e)),
    })
}

fn bind_web(tape: &mut Tape, web: &WebParams) -> WebVars {
    WebVars {
        fc1_w: tape.leaf(web.fc1_w.clone().into_dyn()),
        fc1_b: tape.leaf(web.fc1_b.clone().into_dyn()),
        fc2_w: tape.leaf(web.fc2_w.clone().into_dyn()),
        fc2_b: tape.leaf(web.fc2_b.clone().into_dyn()),
    }
}

/// Binds a full parameter set onto a tape; used by the standalone forward
/// functions and by gradient-check tests.
pub fn bind_pawe(tape: &mut Tape, p: &PaweParams) -> PaweVars {
    PaweVars {
        proj_a_w: tape.leaf(p.proj_a_w.clone().into_dyn()),
        proj_a_b: tape.leaf(p.proj_a_b.clone().into_dyn()),
        proj_b_w: tape.leaf(p.proj_b_w.clone().into_dyn()),
        proj_b_b: tape.leaf(p.proj_b_b.clone().into_dyn()),
        proj_c_w: tape.leaf(p.proj_c_w.clone().into_dyn()),
        proj_c_b: tape.leaf(p.proj_c_b.clone().into_dyn()),
        alpha: tape.leaf(ArrD::from_elem(IxDyn(&[1]), p.alpha)),
        main_conv_w: tape.leaf(p.main_conv_w.clone().into_dyn()),
        web: bind_web(tape, &p.web),
    }
}

pub fn bind_cawe(tape: &mut Tape, p: &CaweParams) -> CaweVars {
    CaweVars {
        alpha: tape.leaf(ArrD::from_elem(IxDyn(&[1]), p.alpha)),
        skip_conv_w: tape.leaf(p.skip_conv_w.clone().into_dyn()),
        web: bind_web(tape, &p.web),
    }
}

fn check_pawe_channels(y: &FeatureMap, params: &PaweParams) -> Result<()> {
    let c = y.dim().0;
    if params.proj_a_w.dim().1 != c || params.proj_c_w.dim().1 != c {
        return Err(Error::contract(format!(
            "pawe: parameters built for {} channels, input has {}",
            params.proj_a_w.dim().1,
            c
        )));
    }
    Ok(())
}

fn run_eval(
    y: &FeatureMap,
    build: impl FnOnce(&mut Tape, Var) -> Var,
) -> FeatureMap {
    let mut tape = Tape::eval();
    let yv = tape.leaf(y.clone().into_dyn());
    let out = build(&mut tape, yv);
    as3(tape.value(out))
}

/// Position attention block forward (residual form).
pub fn pab_forward(y: &FeatureMap, params: &PaweParams) -> Result<FeatureMap> {
    check_finite(y, "pab_forward")?;
    check_pawe_channels(y, params)?;
    Ok(run_eval(y, |tape, yv| {
        let vars = bind_pawe(tape, params);
        pab_op(tape, yv, &vars)
    }))
}

/// Full PAWE forward.
pub fn pawe_forward(y: &FeatureMap, params: &PaweParams) -> Result<FeatureMap> {
    check_finite(y, "pawe_forward")?;
    check_pawe_channels(y, params)?;
    Ok(run_eval(y, |tape, yv| {
        let vars = bind_pawe(tape, params);
        pawe_op(tape, yv, &vars)
    }))
}

/// Channel attention block forward (residual form).
pub fn cab_forward(y: &FeatureMap, params: &CaweParams) -> Result<FeatureMap> {
    check_finite(y, "cab_forward")?;
    Ok(run_eval(y, |tape, yv| {
        let alpha = tape.leaf(ArrD::from_elem(IxDyn(&[1]), params.alpha));
        cab_op(tape, yv, alpha)
    }))
}

/// Full CAWE forward.
pub fn cawe_forward(y: &FeatureMap, params: &CaweParams) -> Result<FeatureMap> {
    check_finite(y, "cawe_forward")?;
    if params.skip_conv_w.dim().0 != y.dim().0 {
        return Err(Error::contract(format!(
            "cawe: parameters built for {} channels, input has {}",
            params.skip_conv_w.dim().0,
            y.dim().0
        )));
    }
    Ok(run_eval(y, |tape, yv| {
        let vars = bind_cawe(tape, params);
        cawe_op(tape, yv, &vars)
    }))
}
