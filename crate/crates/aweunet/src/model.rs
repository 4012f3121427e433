//! AWEU-Net: a four-level U-Net whose encoder/decoder stages are PAWE
//! blocks and whose skip connections pass through CAWE blocks.
//!
//! Skip wiring: encoder outputs at the three deeper levels are bilinearly
//! upsampled and concatenated into the next-shallower skip before CAWE
//! (Up1/Up3/Up5); CAWE outputs at those levels are upsampled again and
//! concatenated into the next-shallower decoder stage input (Up2/Up4/Up6).
//! Channel counts are reconciled by each decoder stage's 3×3 convolution.

use std::collections::BTreeMap;

use ndarray::{Array2, Array3, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    self, kaiming_uniform, CaweVars, FeatureMap, PaweVars, WebVars,
};
use crate::autograd::{as3, ArrD, Tape, Var};
use crate::error::{Error, Result};

pub const DEPTH: usize = 4;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub base_width: usize,
    pub web_ratio: usize,
    pub input_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 1,
            num_classes: 2,
            base_width: 64,
            web_ratio: 4,
            input_size: 224,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_size % (1 << DEPTH) != 0 {
            return Err(Error::Config(format!(
                "input_size {} must be divisible by {}",
                self.input_size,
                1 << DEPTH
            )));
        }
        if self.base_width < 1 {
            return Err(Error::Config("base_width must be >= 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be >= 2".into()));
        }
        Ok(())
    }

    /// Channel widths of encoder stages 0..=3 plus the bottleneck.
    pub fn stage_widths(&self) -> [usize; DEPTH + 1] {
        let mut w = [0; DEPTH + 1];
        for (i, wi) in w.iter_mut().enumerate() {
            *wi = self.base_width << i;
        }
        w
    }
}

/// Flat named-tensor parameter table; the checkpoint payload.
#[derive(Debug, Clone, Default)]
pub struct ParamTable {
    pub tensors: BTreeMap<String, ArrD>,
}

impl ParamTable {
    pub fn get(&self, name: &str) -> &ArrD {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrD) {
        self.tensors.insert(name.into(), value);
    }
}

pub struct AweUNet {
    pub config: ModelConfig,
    pub params: ParamTable,
}

/// Records which tape leaf each named parameter was bound to in one
/// forward pass, so gradients can be read back by name.
pub struct Bindings {
    pub vars: Vec<(String, Var)>,
}

impl Bindings {
    fn bind(&mut self, tape: &mut Tape, params: &ParamTable, name: &str) -> Var {
        let v = tape.leaf(params.get(name).clone());
        self.vars.push((name.to_string(), v));
        v
    }
}

fn init_pawe_stage(
    params: &mut ParamTable,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    c_in: usize,
    c_out: usize,
    web_ratio: usize,
) {
    let p = attention::PaweParams::init(rng, c_in, c_out, web_ratio);
    params.insert(format!("{prefix}.conv.w"), p.main_conv_w.into_dyn());
    params.insert(format!("{prefix}.conv.b"), p.main_conv_b.into_dyn());
    params.insert(format!("{prefix}.proj_a.w"), p.proj_a_w.into_dyn());
    params.insert(format!("{prefix}.proj_a.b"), p.proj_a_b.into_dyn());
    params.insert(format!("{prefix}.proj_b.w"), p.proj_b_w.into_dyn());
    params.insert(format!("{prefix}.proj_b.b"), p.proj_b_b.into_dyn());
    params.insert(format!("{prefix}.proj_c.w"), p.proj_c_w.into_dyn());
    params.insert(format!("{prefix}.proj_c.b"), p.proj_c_b.into_dyn());
    params.insert(format!("{prefix}.alpha"), ArrD::zeros(IxDyn(&[1])));
    params.insert(format!("{prefix}.web.fc1.w"), p.web.fc1_w.into_dyn());
    params.insert(format!("{prefix}.web.fc1.b"), p.web.fc1_b.into_dyn());
    params.insert(format!("{prefix}.web.fc2.w"), p.web.fc2_w.into_dyn());
    params.insert(format!("{prefix}.web.fc2.b"), p.web.fc2_b.into_dyn());
}

fn init_cawe_stage(
    params: &mut ParamTable,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    c: usize,
    web_ratio: usize,
) {
    let p = attention::CaweParams::init(rng, c, web_ratio);
    params.insert(format!("{prefix}.conv.w"), p.skip_conv_w.into_dyn());
    params.insert(format!("{prefix}.conv.b"), p.skip_conv_b.into_dyn());
    params.insert(format!("{prefix}.alpha"), ArrD::zeros(IxDyn(&[1])));
    params.insert(format!("{prefix}.web.fc1.w"), p.web.fc1_w.into_dyn());
    params.insert(format!("{prefix}.web.fc1.b"), p.web.fc1_b.into_dyn());
    params.insert(format!("{prefix}.web.fc2.w"), p.web.fc2_w.into_dyn());
    params.insert(format!("{prefix}.web.fc2.b"), p.web.fc2_b.into_dyn());
}

impl AweUNet {
    /// Channel count entering each CAWE skip block.
    fn skip_channels(widths: &[usize; DEPTH + 1], d: usize) -> usize {
        if d == DEPTH - 1 {
            widths[d]
        } else {
            widths[d] + widths[d + 1]
        }
    }

    /// Channel count entering each decoder stage's convolution.
    fn decoder_in_channels(widths: &[usize; DEPTH + 1], d: usize) -> usize {
        let mut c = widths[d] + Self::skip_channels(widths, d);
        if d < DEPTH - 1 {
            c += Self::skip_channels(widths, d + 1);
        }
        c
    }

    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = config.stage_widths();
        let mut params = ParamTable::default();
        let mut c_in = config.in_channels;
        for d in 0..DEPTH {
            init_pawe_stage(&mut params, &mut rng, &format!("enc{d}"), c_in, w[d], config.web_ratio);
            c_in = w[d];
        }
        init_pawe_stage(
            &mut params,
            &mut rng,
            "bottleneck",
            w[DEPTH - 1],
            w[DEPTH],
            config.web_ratio,
        );
        for d in 0..DEPTH {
            init_cawe_stage(
                &mut params,
                &mut rng,
                &format!("skip{d}"),
                Self::skip_channels(&w, d),
                config.web_ratio,
            );
        }
        for d in 0..DEPTH {
            // 2×2 transposed conv from the deeper feature into width w[d]
            let deeper = w[d + 1];
            params.insert(
                format!("up{d}.w"),
                kaiming_uniform(&mut rng, &[deeper, w[d], 2, 2], deeper * 4),
            );
            params.insert(format!("up{d}.b"), ArrD::zeros(IxDyn(&[w[d]])));
            init_pawe_stage(
                &mut params,
                &mut rng,
                &format!("dec{d}"),
                Self::decoder_in_channels(&w, d),
                w[d],
                config.web_ratio,
            );
        }
        params.insert(
            "head.w",
            kaiming_uniform(&mut rng, &[config.num_classes, w[0], 1, 1], w[0]),
        );
        params.insert("head.b", ArrD::zeros(IxDyn(&[config.num_classes])));
        Ok(AweUNet { config, params })
    }

    pub fn from_params(config: ModelConfig, params: ParamTable) -> Result<Self> {
        config.validate()?;
        // compare the table against a reference initialization: every
        // expected tensor must be present with the right shape, nothing extra
        let reference = AweUNet::new(config.clone(), 0)?;
        for (name, value) in &reference.params.tensors {
            match params.tensors.get(name) {
                None => {
                    return Err(Error::contract(format!(
                        "parameter table is missing '{name}'"
                    )))
                }
                Some(p) if p.shape() != value.shape() => {
                    return Err(Error::contract(format!(
                        "parameter '{name}' has shape {:?}, expected {:?}",
                        p.shape(),
                        value.shape()
                    )))
                }
                _ => {}
            }
        }
        if let Some(extra) = params.tensors.keys().find(|k| !reference.params.tensors.contains_key(*k)) {
            return Err(Error::contract(format!("unexpected parameter '{extra}'")));
        }
        Ok(AweUNet { config, params })
    }

    fn bind_pawe_vars(&self, tape: &mut Tape, b: &mut Bindings, prefix: &str) -> PaweVars {
        PaweVars {
            proj_a_w: b.bind(tape, &self.params, &format!("{prefix}.proj_a.w")),
            proj_a_b: b.bind(tape, &self.params, &format!("{prefix}.proj_a.b")),
            proj_b_w: b.bind(tape, &self.params, &format!("{prefix}.proj_b.w")),
            proj_b_b: b.bind(tape, &self.params, &format!("{prefix}.proj_b.b")),
            proj_c_w: b.bind(tape, &self.params, &format!("{prefix}.proj_c.w")),
            proj_c_b: b.bind(tape, &self.params, &format!("{prefix}.proj_c.b")),
            alpha: b.bind(tape, &self.params, &format!("{prefix}.alpha")),
            main_conv_w: b.bind(tape, &self.params, &format!("{prefix}.conv.w")),
            web: WebVars {
                fc1_w: b.bind(tape, &self.params, &format!("{prefix}.web.fc1.w")),
                fc1_b: b.bind(tape, &self.params, &format!("{prefix}.web.fc1.b")),
                fc2_w: b.bind(tape, &self.params, &format!("{prefix}.web.fc2.w")),
                fc2_b: b.bind(tape, &self.params, &format!("{prefix}.web.fc2.b")),
            },
        }
    }

    /// One "PAWE block with 3×3 conv": conv → ReLU → PAWE; the PAWE WEB
    /// reads that convolution's weights.
    fn pawe_stage(&self, tape: &mut Tape, b: &mut Bindings, prefix: &str, x: Var) -> Var {
        let vars = self.bind_pawe_vars(tape, b, prefix);
        let cb = b.bind(tape, &self.params, &format!("{prefix}.conv.b"));
        let h = tape.conv2d(x, vars.main_conv_w, cb, 1);
        let h = tape.relu(h);
        attention::pawe_op(tape, h, &vars)
    }

    /// CAWE skip block: conv → ReLU → CAWE, WEB fed by the skip conv.
    fn cawe_stage(&self, tape: &mut Tape, b: &mut Bindings, prefix: &str, x: Var) -> Var {
        let w = b.bind(tape, &self.params, &format!("{prefix}.conv.w"));
        let cb = b.bind(tape, &self.params, &format!("{prefix}.conv.b"));
        let vars = CaweVars {
            alpha: b.bind(tape, &self.params, &format!("{prefix}.alpha")),
            skip_conv_w: w,
            web: WebVars {
                fc1_w: b.bind(tape, &self.params, &format!("{prefix}.web.fc1.w")),
                fc1_b: b.bind(tape, &self.params, &format!("{prefix}.web.fc1.b")),
                fc2_w: b.bind(tape, &self.params, &format!("{prefix}.web.fc2.w")),
                fc2_b: b.bind(tape, &self.params, &format!("{prefix}.web.fc2.b")),
            },
        };
        let h = tape.conv2d(x, w, cb, 1);
        let h = tape.relu(h);
        attention::cawe_op(tape, h, &vars)
    }

    /// Builds the whole network on `tape`. Returns the logits node and the
    /// parameter bindings of this pass.
    pub fn forward_on_tape(&self, tape: &mut Tape, image: Var) -> Result<(Var, Bindings)> {
        let dim = as3(tape.value(image)).dim();
        if dim.0 != self.config.in_channels
            || dim.1 != self.config.input_size
            || dim.2 != self.config.input_size
        {
            return Err(Error::contract(format!(
                "forward: expected {}x{}x{} input, got {:?}",
                self.config.in_channels, self.config.input_size, self.config.input_size, dim
            )));
        }
        let mut b = Bindings { vars: Vec::new() };

        // encoder
        let mut enc_out = Vec::with_capacity(DEPTH);
        let mut x = image;
        for d in 0..DEPTH {
            let y = self.pawe_stage(tape, &mut b, &format!("enc{d}"), x);
            enc_out.push(y);
            x = tape.maxpool2(y);
        }
        x = self.pawe_stage(tape, &mut b, "bottleneck", x);

        // CAWE skips; Up1/Up3/Up5 feed the deeper encoder output into the
        // next-shallower skip input
        let mut skip_out = vec![x; DEPTH]; // placeholder, overwritten below
        for d in (0..DEPTH).rev() {
            let input = if d == DEPTH - 1 {
                enc_out[d]
            } else {
                let (_, hh, ww) = as3(tape.value(enc_out[d])).dim();
                let up = tape.resize_bilinear(enc_out[d + 1], hh, ww);
                tape.concat_channels(&[enc_out[d], up])
            };
            skip_out[d] = self.cawe_stage(tape, &mut b, &format!("skip{d}"), input);
        }

        // decoder; Up2/Up4/Up6 feed the deeper CAWE output into the
        // next-shallower decoder input
        for d in (0..DEPTH).rev() {
            let uw = b.bind(tape, &self.params, &format!("up{d}.w"));
            let ub = b.bind(tape, &self.params, &format!("up{d}.b"));
            let up = tape.conv_transpose2(x, uw, ub);
            let mut parts = vec![up, skip_out[d]];
            if d < DEPTH - 1 {
                let (_, hh, ww) = as3(tape.value(up)).dim();
                parts.push(tape.resize_bilinear(skip_out[d + 1], hh, ww));
            }
            let cat = tape.concat_channels(&parts);
            x = self.pawe_stage(tape, &mut b, &format!("dec{d}"), cat);
        }

        let hw = b.bind(tape, &self.params, "head.w");
        let hb = b.bind(tape, &self.params, "head.b");
        let logits = tape.conv2d(x, hw, hb, 0);
        Ok((logits, b))
    }

    /// Plain forward pass: logits of shape num_classes×H×W.
    pub fn forward(&self, image: &FeatureMap) -> Result<Array3<f64>> {
        let mut tape = Tape::eval();
        let iv = tape.leaf(image.clone().into_dyn());
        let (logits, _) = self.forward_on_tape(&mut tape, iv)?;
        Ok(as3(tape.value(logits)))
    }

    /// Per-pixel class probabilities (softmax over the class axis).
    pub fn class_probabilities(&self, image: &FeatureMap) -> Result<Array3<f64>> {
        let logits = self.forward(image)?;
        Ok(softmax_classes(&logits))
    }

    /// Nodule-class probability plane.
    pub fn nodule_probability(&self, image: &FeatureMap) -> Result<Array2<f64>> {
        let p = self.class_probabilities(image)?;
        Ok(p.index_axis(ndarray::Axis(0), 1).to_owned())
    }

    /// Binary mask: nodule probability ≥ threshold.
    pub fn predict_mask(&self, image: &FeatureMap, threshold: f64) -> Result<Array2<u8>> {
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(Error::contract(format!(
                "threshold must lie in (0,1), got {threshold}"
            )));
        }
        let p = self.nodule_probability(image)?;
        Ok(p.mapv(|v| u8::from(v >= threshold)))
    }
}

/// Softmax over the leading (class) axis of a logits tensor.
pub fn softmax_classes(logits: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = logits.dim();
    let mut out = logits.clone();
    for y in 0..h {
        for x in 0..w {
            let mut col: Vec<f64> = (0..c).map(|k| logits[[k, y, x]]).collect();
            crate::kernels::softmax_slice(&mut col);
            for k in 0..c {
                out[[k, y, x]] = col[k];
            }
        }
    }
    out
}

/// Convenience for build-time inspection in tests and the CLI.
pub fn build_model(config: ModelConfig, seed: u64) -> Result<AweUNet> {
    AweUNet::new(config, seed)
}
