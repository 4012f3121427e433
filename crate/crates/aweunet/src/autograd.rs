//! Minimal reverse-mode autodiff over f64 `ndarray` tensors.
//!
//! A [`Tape`] records the forward computation; [`Tape::backward`] replays it
//! in reverse. Nodes are append-only, so every parent index precedes its
//! consumers and a single reverse sweep suffices. Evaluation-only tapes
//! (`Tape::eval`) skip recording backward closures.

use ndarray::{Array1, Array2, Array3, Array4, ArrayD, Axis, Ix1, Ix2, Ix3, Ix4, IxDyn};

use crate::kernels;

pub type ArrD = ArrayD<f64>;

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub usize);

type BackwardFn = Box<dyn Fn(&ArrD, &ArrD, &[&ArrD]) -> Vec<ArrD> + Send + Sync>;

struct Node {
    value: ArrD,
    parents: Vec<Var>,
    backward: Option<BackwardFn>,
}

pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

/// Gradients produced by a backward sweep, indexed by `Var`.
pub struct Grads {
    inner: Vec<Option<ArrD>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&ArrD> {
        self.inner.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a leaf; zero-filled if the leaf did not influence the loss.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> ArrD {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| ArrD::zeros(IxDyn(shape)))
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// Tape that records values only; `backward` on it is an error.
    pub fn eval() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn value(&self, v: Var) -> &ArrD {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: ArrD) -> Var {
        self.push(value, vec![], None)
    }

    fn push(&mut self, value: ArrD, parents: Vec<Var>, backward: Option<BackwardFn>) -> Var {
        let node = if self.grad_enabled {
            Node {
                value,
                parents,
                backward,
            }
        } else {
            Node {
                value,
                parents: vec![],
                backward: None,
            }
        };
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar loss node. Intermediate gradients are
    /// dropped as soon as they are consumed; leaf gradients are kept.
    pub fn backward(&self, loss: Var) -> Grads {
        assert!(self.grad_enabled, "backward on an eval-only tape");
        assert_eq!(self.value(loss).len(), 1, "loss must be a scalar");
        let mut grads: Vec<Option<ArrD>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(ArrD::ones(self.value(loss).raw_dim()));
        for i in (0..=loss.0).rev() {
            if grads[i].is_none() {
                continue;
            }
            let node = &self.nodes[i];
            let Some(back) = &node.backward else { continue };
            let parent_vals: Vec<&ArrD> =
                node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
            let g = grads[i].as_ref().unwrap();
            let pgrads = back(g, &node.value, &parent_vals);
            assert_eq!(pgrads.len(), node.parents.len());
            for (p, pg) in node.parents.iter().zip(pgrads) {
                match &mut grads[p.0] {
                    Some(acc) => *acc += &pg,
                    slot @ None => *slot = Some(pg),
                }
            }
            // free non-leaf gradient storage
            grads[i] = None;
        }
        Grads { inner: grads }
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let v = self.value(a) + self.value(b);
        self.push(
            v,
            vec![a, b],
            Some(Box::new(|g, _, _| vec![g.clone(), g.clone()])),
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(
            v,
            vec![a],
            Some(Box::new(|g, _, p| {
                let mut dx = g.clone();
                dx.zip_mut_with(p[0], |gv, &xv| {
                    if xv <= 0.0 {
                        *gv = 0.0;
                    }
                });
                vec![dx]
            })),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(
            v,
            vec![a],
            Some(Box::new(|g, out, _| {
                let mut dx = g.clone();
                dx.zip_mut_with(out, |gv, &s| *gv *= s * (1.0 - s));
                vec![dx]
            })),
        )
    }

    /// out = alpha · t, with `alpha` a one-element node.
    pub fn scale(&mut self, t: Var, alpha: Var) -> Var {
        assert_eq!(self.value(alpha).len(), 1);
        let av = self.value(alpha)[[0].as_ref()];
        let v = self.value(t) * av;
        self.push(
            v,
            vec![t, alpha],
            Some(Box::new(|g, _, p| {
                let a = p[1][[0].as_ref()];
                let dt = g * a;
                let da = (g * p[0]).sum();
                vec![dt, ArrD::from_elem(IxDyn(&[1]), da)]
            })),
        )
    }

    pub fn scale_const(&mut self, t: Var, c: f64) -> Var {
        let v = self.value(t) * c;
        self.push(
            v,
            vec![t],
            Some(Box::new(move |g, _, _| vec![g * c])),
        )
    }

    pub fn reshape(&mut self, t: Var, shape: &[usize]) -> Var {
        let in_shape: Vec<usize> = self.value(t).shape().to_vec();
        let v = self
            .value(t)
            .clone()
            .into_shape(IxDyn(shape))
            .expect("reshape: element count mismatch");
        self.push(
            v,
            vec![t],
            Some(Box::new(move |g, _, _| {
                vec![g.clone().into_shape(IxDyn(&in_shape)).unwrap()]
            })),
        )
    }

    // ---- linear algebra ----

    /// Matrix product a·b for 2-D nodes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = as2(self.value(a));
        let bv = as2(self.value(b));
        let v = av.dot(&bv).into_dyn();
        self.push(
            v,
            vec![a, b],
            Some(Box::new(|g, _, p| {
                let g2 = as2(g);
                let a2 = as2(p[0]);
                let b2 = as2(p[1]);
                vec![
                    g2.dot(&b2.t()).into_dyn(),
                    a2.t().dot(&g2).into_dyn(),
                ]
            })),
        )
    }

    /// aᵀ·b for 2-D nodes.
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Var {
        let av = as2(self.value(a));
        let bv = as2(self.value(b));
        let v = av.t().dot(&bv).into_dyn();
        self.push(
            v,
            vec![a, b],
            Some(Box::new(|g, _, p| {
                let g2 = as2(g);
                let a2 = as2(p[0]);
                let b2 = as2(p[1]);
                vec![
                    b2.dot(&g2.t()).into_dyn(),
                    a2.dot(&g2).into_dyn(),
                ]
            })),
        )
    }

    /// a·bᵀ for 2-D nodes.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let av = as2(self.value(a));
        let bv = as2(self.value(b));
        let v = av.dot(&bv.t()).into_dyn();
        self.push(
            v,
            vec![a, b],
            Some(Box::new(|g, _, p| {
                let g2 = as2(g);
                let a2 = as2(p[0]);
                let b2 = as2(p[1]);
                vec![
                    g2.dot(&b2).into_dyn(),
                    g2.t().dot(&a2).into_dyn(),
                ]
            })),
        )
    }

    /// Column-normalized softmax of a 2-D node (each column sums to 1).
    pub fn softmax_cols(&mut self, l: Var) -> Var {
        let v = kernels::softmax_cols(as2(self.value(l)).view()).into_dyn();
        self.push(
            v,
            vec![l],
            Some(Box::new(|g, out, _| {
                let g2 = as2(g);
                let y = as2(out);
                let (m, n) = y.dim();
                let mut dl = Array2::<f64>::zeros((m, n));
                for j in 0..n {
                    let mut s = 0.0;
                    for i in 0..m {
                        s += y[[i, j]] * g2[[i, j]];
                    }
                    for i in 0..m {
                        dl[[i, j]] = y[[i, j]] * (g2[[i, j]] - s);
                    }
                }
                vec![dl.into_dyn()]
            })),
        )
    }

    /// Fused spatial-attention aggregation (see `kernels::attention_aggregate`).
    pub fn attention_aggregate(&mut self, a: Var, b: Var, c: Var) -> Var {
        let v = kernels::attention_aggregate(
            as2(self.value(a)).view(),
            as2(self.value(b)).view(),
            as2(self.value(c)).view(),
        )
        .into_dyn();
        self.push(
            v,
            vec![a, b, c],
            Some(Box::new(|g, _, p| {
                let (da, db, dc) = kernels::attention_aggregate_grads(
                    as2(p[0]).view(),
                    as2(p[1]).view(),
                    as2(p[2]).view(),
                    as2(g).view(),
                );
                vec![da.into_dyn(), db.into_dyn(), dc.into_dyn()]
            })),
        )
    }

    // ---- convolution / pooling / resampling ----

    /// 2-D convolution of a C×H×W node, stride 1, zero padding `pad`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, pad: usize) -> Var {
        let v = kernels::conv2d(
            as3(self.value(x)).view(),
            as4(self.value(w)).view(),
            &as1(self.value(b)),
            pad,
        )
        .into_dyn();
        self.push(
            v,
            vec![x, w, b],
            Some(Box::new(move |g, _, p| {
                let g3 = as3(g);
                let x3 = as3(p[0]);
                let w4 = as4(p[1]);
                let (_, _, kh, kw) = w4.dim();
                let dx = kernels::conv2d_input_grad(w4.view(), g3.view(), pad);
                let dw = kernels::conv2d_weight_grad(x3.view(), g3.view(), kh, kw, pad);
                let db = kernels::conv2d_bias_grad(g3.view());
                vec![dx.into_dyn(), dw.into_dyn(), db.into_dyn()]
            })),
        )
    }

    /// 2×2 stride-2 transposed convolution (spatial dims double).
    pub fn conv_transpose2(&mut self, x: Var, w: Var, b: Var) -> Var {
        let v = kernels::conv_transpose2(
            as3(self.value(x)).view(),
            as4(self.value(w)).view(),
            &as1(self.value(b)),
        )
        .into_dyn();
        self.push(
            v,
            vec![x, w, b],
            Some(Box::new(|g, _, p| {
                let (dx, dw, db) = kernels::conv_transpose2_grads(
                    as3(p[0]).view(),
                    as4(p[1]).view(),
                    as3(g).view(),
                );
                vec![dx.into_dyn(), dw.into_dyn(), db.into_dyn()]
            })),
        )
    }

    pub fn maxpool2(&mut self, x: Var) -> Var {
        let x3 = as3(self.value(x));
        let in_dim = x3.dim();
        let (v, arg) = kernels::maxpool2(x3.view());
        self.push(
            v.into_dyn(),
            vec![x],
            Some(Box::new(move |g, _, _| {
                vec![kernels::maxpool2_grad(as3(g).view(), &arg, in_dim).into_dyn()]
            })),
        )
    }

    /// Parameter-free bilinear resize of a C×H×W node.
    pub fn resize_bilinear(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let x3 = as3(self.value(x));
        let in_dim = x3.dim();
        let v = kernels::resize_bilinear(x3.view(), oh, ow).into_dyn();
        self.push(
            v,
            vec![x],
            Some(Box::new(move |g, _, _| {
                vec![kernels::resize_bilinear_adjoint(as3(g).view(), in_dim).into_dyn()]
            })),
        )
    }

    /// Channel concatenation of C×H×W nodes.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<Array3<f64>> = parts.iter().map(|&p| as3(self.value(p))).collect();
        let splits: Vec<usize> = views.iter().map(|v| v.dim().0).collect();
        let v = ndarray::concatenate(
            Axis(0),
            &views.iter().map(|v| v.view()).collect::<Vec<_>>(),
        )
        .expect("concat_channels: spatial shape mismatch")
        .into_dyn();
        self.push(
            v,
            parts.to_vec(),
            Some(Box::new(move |g, _, _| {
                let g3 = as3(g);
                let mut out = Vec::with_capacity(splits.len());
                let mut start = 0;
                for &c in &splits {
                    out.push(
                        g3.slice(ndarray::s![start..start + c, .., ..])
                            .to_owned()
                            .into_dyn(),
                    );
                    start += c;
                }
                out
            })),
        )
    }

    /// Per-channel gain: out[c, h, w] = e[c] · y[c, h, w].
    pub fn channel_scale(&mut self, y: Var, e: Var) -> Var {
        let y3 = as3(self.value(y));
        let e1 = as1(self.value(e));
        assert_eq!(y3.dim().0, e1.len(), "channel_scale: channel mismatch");
        let mut v = y3.clone();
        for (ch, mut plane) in v.outer_iter_mut().enumerate() {
            plane.mapv_inplace(|x| x * e1[ch]);
        }
        self.push(
            v.into_dyn(),
            vec![y, e],
            Some(Box::new(|g, _, p| {
                let g3 = as3(g);
                let y3 = as3(p[0]);
                let e1 = as1(p[1]);
                let mut dy = g3.clone();
                for (ch, mut plane) in dy.outer_iter_mut().enumerate() {
                    plane.mapv_inplace(|x| x * e1[ch]);
                }
                let de: Array1<f64> = g3
                    .outer_iter()
                    .zip(y3.outer_iter())
                    .map(|(gp, yp)| (&gp * &yp).sum())
                    .collect();
                vec![dy.into_dyn(), de.into_dyn()]
            })),
        )
    }

    /// Mean over all axes but the first (average pooling of a weight tensor
    /// to one value per output channel).
    pub fn mean_over_tail(&mut self, w: Var) -> Var {
        let wv = self.value(w);
        let shape = wv.shape().to_vec();
        let o = shape[0];
        let tail: usize = shape[1..].iter().product::<usize>().max(1);
        let flat = wv.clone().into_shape(IxDyn(&[o, tail])).unwrap();
        let v: Array1<f64> = as2(&flat).mean_axis(Axis(1)).unwrap();
        self.push(
            v.into_dyn(),
            vec![w],
            Some(Box::new(move |g, _, _| {
                let g1 = as1(g);
                let mut dw = ArrD::zeros(IxDyn(&shape));
                let scale = 1.0 / tail as f64;
                for (ch, mut lane) in dw.outer_iter_mut().enumerate() {
                    lane.fill(g1[ch] * scale);
                }
                vec![dw]
            })),
        )
    }

    /// Fully connected layer on a vector node: out = w·x + b.
    pub fn linear(&mut self, w: Var, x: Var, b: Var) -> Var {
        let w2 = as2(self.value(w));
        let x1 = as1(self.value(x));
        let b1 = as1(self.value(b));
        assert_eq!(w2.dim().1, x1.len(), "linear: dimension mismatch");
        assert_eq!(w2.dim().0, b1.len(), "linear: bias mismatch");
        let v = w2.dot(&x1) + &b1;
        self.push(
            v.into_dyn(),
            vec![w, x, b],
            Some(Box::new(|g, _, p| {
                let g1 = as1(g);
                let w2 = as2(p[0]);
                let x1 = as1(p[1]);
                let dw = g1
                    .view()
                    .into_shape((g1.len(), 1))
                    .unwrap()
                    .dot(&x1.view().into_shape((1, x1.len())).unwrap());
                let dx = w2.t().dot(&g1);
                vec![dw.into_dyn(), dx.into_dyn(), g1.clone().into_dyn()]
            })),
        )
    }

    // ---- losses ----

    /// Numerically stable binary cross-entropy from logits against a
    /// constant target, averaged over elements.
    pub fn bce_with_logits(&mut self, z: Var, target: ArrD) -> Var {
        let zv = self.value(z);
        assert_eq!(zv.shape(), target.shape());
        let n = zv.len() as f64;
        let mut loss = 0.0;
        for (&zi, &ti) in zv.iter().zip(target.iter()) {
            // softplus(z) - t*z, with softplus(z) = max(z,0) + ln(1+exp(-|z|))
            loss += zi.max(0.0) + (-zi.abs()).exp().ln_1p() - ti * zi;
        }
        let v = ArrD::from_elem(IxDyn(&[1]), loss / n);
        self.push(
            v,
            vec![z],
            Some(Box::new(move |g, _, p| {
                let gs = g[[0].as_ref()] / n;
                let mut dz = p[0].clone();
                dz.zip_mut_with(&target, |z, &t| {
                    *z = gs * (1.0 / (1.0 + (-*z).exp()) - t);
                });
                vec![dz]
            })),
        )
    }

    /// Soft IoU loss against a constant target:
    /// 1 − (Σpt + ε) / (Σp + Σt − Σpt + ε).
    pub fn soft_iou(&mut self, p: Var, target: ArrD, eps: f64) -> Var {
        let pv = self.value(p);
        assert_eq!(pv.shape(), target.shape());
        let inter: f64 = pv.iter().zip(target.iter()).map(|(&a, &b)| a * b).sum();
        let sum_p: f64 = pv.sum();
        let sum_t: f64 = target.sum();
        let i = inter + eps;
        let u = sum_p + sum_t - inter + eps;
        let v = ArrD::from_elem(IxDyn(&[1]), 1.0 - i / u);
        self.push(
            v,
            vec![p],
            Some(Box::new(move |g, _, p| {
                let gs = g[[0].as_ref()];
                let pv = p[0];
                let inter: f64 = pv.iter().zip(target.iter()).map(|(&a, &b)| a * b).sum();
                let sum_p: f64 = pv.sum();
                let sum_t: f64 = target.sum();
                let i = inter + eps;
                let u = sum_p + sum_t - inter + eps;
                let mut dp = target.clone();
                // d(1 - I/U)/dp_k = -(t_k·U - I·(1 - t_k)) / U²
                dp.mapv_inplace(|t| -(t * u - i * (1.0 - t)) / (u * u));
                dp.mapv_inplace(|x| x * gs);
                vec![dp]
            })),
        )
    }

    /// Weighted sum of the output against a constant projection; turns a
    /// tensor node into a scalar loss for gradient checking.
    pub fn project(&mut self, t: Var, weights: ArrD) -> Var {
        let tv = self.value(t);
        assert_eq!(tv.shape(), weights.shape());
        let s: f64 = tv.iter().zip(weights.iter()).map(|(&a, &b)| a * b).sum();
        let v = ArrD::from_elem(IxDyn(&[1]), s);
        self.push(
            v,
            vec![t],
            Some(Box::new(move |g, _, _| {
                vec![&weights * g[[0].as_ref()]]
            })),
        )
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

pub fn as1(a: &ArrD) -> Array1<f64> {
    a.view().into_dimensionality::<Ix1>().unwrap().to_owned()
}

pub fn as2(a: &ArrD) -> Array2<f64> {
    a.view()
        .into_dimensionality::<Ix2>()
        .unwrap()
        .as_standard_layout()
        .to_owned()
}

pub fn as3(a: &ArrD) -> Array3<f64> {
    a.view()
        .into_dimensionality::<Ix3>()
        .unwrap()
        .as_standard_layout()
        .to_owned()
}

pub fn as4(a: &ArrD) -> Array4<f64> {
    a.view()
        .into_dimensionality::<Ix4>()
        .unwrap()
        .as_standard_layout()
        .to_owned()
}
