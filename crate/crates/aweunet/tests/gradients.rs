//! Central-difference gradient checks for every differentiable operator
//! and for the full attention blocks.

use ndarray::{IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use aweunet::attention::{bind_cawe, bind_pawe, cawe_op, pawe_op, CaweParams, PaweParams};
use aweunet::autograd::{ArrD, Tape, Var};

const FD_STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rand_arr(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrD {
    ArrD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
}

/// Runs `build` to produce a scalar loss from leaves created out of
/// `params`, then compares tape gradients against central differences.
fn check_grads<F>(params: &[ArrD], build: F, what: &str)
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let eval = |params: &[ArrD]| -> f64 {
        let mut tape = Tape::eval();
        let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
        let loss = build(&mut tape, &vars);
        tape.value(loss)[IxDyn(&[0])]
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = build(&mut tape, &vars);
    let grads = tape.backward(loss);

    let mut worst = 0.0_f64;
    for (pi, p) in params.iter().enumerate() {
        let g = grads.get_or_zeros(vars[pi], p.shape());
        for idx in 0..p.len() {
            let mut plus = params.to_vec();
            plus[pi].as_slice_mut().unwrap()[idx] += FD_STEP;
            let mut minus = params.to_vec();
            minus[pi].as_slice_mut().unwrap()[idx] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            let analytic = g.as_slice().unwrap()[idx];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0);
            worst = worst.max(rel);
            assert!(
                rel < TOL,
                "{what}: param {pi} elem {idx}: analytic {analytic} vs numeric {numeric} (rel {rel})"
            );
        }
    }
    println!("{what}: max rel err {worst:.3e}");
}

fn project_loss(tape: &mut Tape, out: Var, rng: &mut ChaCha8Rng) -> Var {
    let shape = tape.value(out).shape().to_vec();
    let w = rand_arr(rng, &shape);
    tape.project(out, w)
}

#[test]
fn grad_elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand_arr(&mut rng, &[3, 4]);
    let y = rand_arr(&mut rng, &[3, 4]);
    let prng = ChaCha8Rng::seed_from_u64(2);
    check_grads(
        &[x, y],
        |tape, v| {
            let s = tape.add(v[0], v[1]);
            let s = tape.sigmoid(s);
            let s = tape.relu(s);
            let s = tape.scale_const(s, 1.7);
            project_loss(tape, s, &mut prng.clone())
        },
        "elementwise",
    );
}

#[test]
fn grad_matmul_family() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = rand_arr(&mut rng, &[3, 5]);
    let b = rand_arr(&mut rng, &[5, 4]);
    let prng = ChaCha8Rng::seed_from_u64(4);
    check_grads(
        &[a.clone(), b.clone()],
        |tape, v| {
            let m = tape.matmul(v[0], v[1]);
            project_loss(tape, m, &mut prng.clone())
        },
        "matmul",
    );
    let at = rand_arr(&mut rng, &[5, 3]);
    check_grads(
        &[at, b],
        |tape, v| {
            let m = tape.matmul_tn(v[0], v[1]);
            project_loss(tape, m, &mut prng.clone())
        },
        "matmul_tn",
    );
    let bt = rand_arr(&mut rng, &[4, 5]);
    check_grads(
        &[a, bt],
        |tape, v| {
            let m = tape.matmul_nt(v[0], v[1]);
            project_loss(tape, m, &mut prng.clone())
        },
        "matmul_nt",
    );
}

#[test]
fn grad_softmax_and_attention_aggregate() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let l = rand_arr(&mut rng, &[6, 6]);
    let prng = ChaCha8Rng::seed_from_u64(6);
    check_grads(
        &[l],
        |tape, v| {
            let s = tape.softmax_cols(v[0]);
            project_loss(tape, s, &mut prng.clone())
        },
        "softmax_cols",
    );
    let a = rand_arr(&mut rng, &[2, 9]);
    let b = rand_arr(&mut rng, &[2, 9]);
    let c = rand_arr(&mut rng, &[4, 9]);
    check_grads(
        &[a, b, c],
        |tape, v| {
            let f = tape.attention_aggregate(v[0], v[1], v[2]);
            project_loss(tape, f, &mut prng.clone())
        },
        "attention_aggregate",
    );
}

#[test]
fn grad_conv_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let prng = ChaCha8Rng::seed_from_u64(8);
    let x = rand_arr(&mut rng, &[2, 5, 5]);
    let w = rand_arr(&mut rng, &[3, 2, 3, 3]);
    let b = rand_arr(&mut rng, &[3]);
    check_grads(
        &[x.clone(), w, b],
        |tape, v| {
            let c = tape.conv2d(v[0], v[1], v[2], 1);
            project_loss(tape, c, &mut prng.clone())
        },
        "conv2d_pad1",
    );
    let w0 = rand_arr(&mut rng, &[3, 2, 1, 1]);
    let b0 = rand_arr(&mut rng, &[3]);
    check_grads(
        &[x.clone(), w0, b0],
        |tape, v| {
            let c = tape.conv2d(v[0], v[1], v[2], 0);
            project_loss(tape, c, &mut prng.clone())
        },
        "conv2d_1x1",
    );
    let wt = rand_arr(&mut rng, &[2, 3, 2, 2]);
    let bt = rand_arr(&mut rng, &[3]);
    check_grads(
        &[x, wt, bt],
        |tape, v| {
            let c = tape.conv_transpose2(v[0], v[1], v[2]);
            project_loss(tape, c, &mut prng.clone())
        },
        "conv_transpose2",
    );
}

#[test]
fn grad_pool_resize_concat() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let prng = ChaCha8Rng::seed_from_u64(10);
    // distinct values so the pooling argmax is stable under the FD step
    let mut x = rand_arr(&mut rng, &[2, 4, 4]);
    for (i, v) in x.iter_mut().enumerate() {
        *v += i as f64 * 0.01;
    }
    check_grads(
        &[x],
        |tape, v| {
            let p = tape.maxpool2(v[0]);
            project_loss(tape, p, &mut prng.clone())
        },
        "maxpool2",
    );
    let y = rand_arr(&mut rng, &[2, 3, 3]);
    check_grads(
        &[y],
        |tape, v| {
            let r = tape.resize_bilinear(v[0], 6, 6);
            project_loss(tape, r, &mut prng.clone())
        },
        "resize_bilinear",
    );
    let a = rand_arr(&mut rng, &[2, 3, 3]);
    let b = rand_arr(&mut rng, &[3, 3, 3]);
    check_grads(
        &[a, b],
        |tape, v| {
            let c = tape.concat_channels(&[v[0], v[1]]);
            project_loss(tape, c, &mut prng.clone())
        },
        "concat_channels",
    );
}

#[test]
fn grad_web_building_blocks() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let prng = ChaCha8Rng::seed_from_u64(12);
    let w = rand_arr(&mut rng, &[4, 2, 3, 3]);
    check_grads(
        &[w],
        |tape, v| {
            let m = tape.mean_over_tail(v[0]);
            project_loss(tape, m, &mut prng.clone())
        },
        "mean_over_tail",
    );
    let fw = rand_arr(&mut rng, &[3, 4]);
    let x = rand_arr(&mut rng, &[4]);
    let fb = rand_arr(&mut rng, &[3]);
    check_grads(
        &[fw, x, fb],
        |tape, v| {
            let l = tape.linear(v[0], v[1], v[2]);
            project_loss(tape, l, &mut prng.clone())
        },
        "linear",
    );
    let y = rand_arr(&mut rng, &[3, 4, 4]);
    let e = rand_arr(&mut rng, &[3]);
    check_grads(
        &[y, e],
        |tape, v| {
            let s = tape.channel_scale(v[0], v[1]);
            project_loss(tape, s, &mut prng.clone())
        },
        "channel_scale",
    );
}

#[test]
fn grad_losses() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let z = rand_arr(&mut rng, &[1, 16]).mapv(|v| v * 3.0);
    let t = ArrD::from_shape_fn(IxDyn(&[1, 16]), |_| f64::from(rng.gen_range(0..2u8)));
    let t2 = t.clone();
    check_grads(
        &[z.clone()],
        |tape, v| tape.bce_with_logits(v[0], t.clone()),
        "bce_with_logits",
    );
    check_grads(
        &[z],
        |tape, v| {
            let p = tape.sigmoid(v[0]);
            tape.soft_iou(p, t2.clone(), 1e-6)
        },
        "soft_iou",
    );
}

#[test]
fn grad_full_pawe_block() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let c = 4;
    let mut params = PaweParams::init(&mut rng, c, c, 4);
    params.alpha = 0.3; // away from the identity point
    // keep the web MLP away from its relu kinks so central differences
    // see the same linear piece as the analytic gradient
    params.web.fc1_b.fill(0.2);
    params.web.fc2_b.fill(0.2);
    let y = rand_arr(&mut rng, &[c, 5, 5]);
    let prng = ChaCha8Rng::seed_from_u64(22);
    let p = params.clone();
    check_grads(
        &[
            y,
            p.proj_a_w.clone().into_dyn(),
            p.proj_a_b.clone().into_dyn(),
            p.proj_b_w.clone().into_dyn(),
            p.proj_b_b.clone().into_dyn(),
            p.proj_c_w.clone().into_dyn(),
            p.proj_c_b.clone().into_dyn(),
            ArrD::from_elem(IxDyn(&[1]), p.alpha),
            p.main_conv_w.clone().into_dyn(),
            p.web.fc1_w.clone().into_dyn(),
            p.web.fc1_b.clone().into_dyn(),
            p.web.fc2_w.clone().into_dyn(),
            p.web.fc2_b.clone().into_dyn(),
        ],
        |tape, v| {
            let vars = aweunet::attention::PaweVars {
                proj_a_w: v[1],
                proj_a_b: v[2],
                proj_b_w: v[3],
                proj_b_b: v[4],
                proj_c_w: v[5],
                proj_c_b: v[6],
                alpha: v[7],
                main_conv_w: v[8],
                web: aweunet::attention::WebVars {
                    fc1_w: v[9],
                    fc1_b: v[10],
                    fc2_w: v[11],
                    fc2_b: v[12],
                },
            };
            let out = pawe_op(tape, v[0], &vars);
            project_loss(tape, out, &mut prng.clone())
        },
        "pawe_block",
    );
    let _ = bind_pawe(&mut Tape::eval(), &params);
}

#[test]
fn grad_full_cawe_block() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let c = 4;
    let mut params = CaweParams::init(&mut rng, c, 4);
    params.alpha = -0.4;
    params.web.fc1_b.fill(0.2);
    params.web.fc2_b.fill(0.2);
    let y = rand_arr(&mut rng, &[c, 5, 5]);
    let prng = ChaCha8Rng::seed_from_u64(24);
    let p = params.clone();
    check_grads(
        &[
            y,
            ArrD::from_elem(IxDyn(&[1]), p.alpha),
            p.skip_conv_w.clone().into_dyn(),
            p.web.fc1_w.clone().into_dyn(),
            p.web.fc1_b.clone().into_dyn(),
            p.web.fc2_w.clone().into_dyn(),
            p.web.fc2_b.clone().into_dyn(),
        ],
        |tape, v| {
            let vars = aweunet::attention::CaweVars {
                alpha: v[1],
                skip_conv_w: v[2],
                web: aweunet::attention::WebVars {
                    fc1_w: v[3],
                    fc1_b: v[4],
                    fc2_w: v[5],
                    fc2_b: v[6],
                },
            };
            let out = cawe_op(tape, v[0], &vars);
            project_loss(tape, out, &mut prng.clone())
        },
        "cawe_block",
    );
    let _ = bind_cawe(&mut Tape::eval(), &params);
}
