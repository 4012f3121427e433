//! Independent dense-loop reimplementations of the attention blocks,
//! used as oracles against the streaming/tape implementations.

use ndarray::{Array1, Array2, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use aweunet::attention::{
    self, cab_forward, cawe_forward, channel_attention, pab_forward, pawe_forward,
    spatial_attention, web_excitation, CaweParams, FeatureMap, PaweParams, WebParams,
};

fn rand_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> FeatureMap {
    Array3::from_shape_fn((c, h, w), |_| rng.gen_range(-1.0..1.0))
}

fn max_abs_diff(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// 1x1 convolution as an explicit per-position matrix product.
fn conv1x1_oracle(y: &FeatureMap, w: &Array4<f64>, b: &Array1<f64>) -> Array2<f64> {
    let (c, h, wd) = y.dim();
    let n = h * wd;
    let r = w.dim().0;
    let mut out = Array2::zeros((r, n));
    for o in 0..r {
        for j in 0..n {
            let mut acc = b[o];
            for i in 0..c {
                acc += w[[o, i, 0, 0]] * y[[i, j / wd, j % wd]];
            }
            out[[o, j]] = acc;
        }
    }
    out
}

/// Softmax affinity normalized over the source index, as explicit loops.
fn affinity_oracle(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let n = a.dim().1;
    let mut d = Array2::zeros((n, n));
    for j in 0..n {
        let mut col = vec![0.0; n];
        let mut denom = 0.0;
        for i in 0..n {
            let logit: f64 = (0..a.dim().0).map(|k| a[[k, i]] * b[[k, j]]).sum();
            col[i] = logit.exp();
            denom += col[i];
        }
        for i in 0..n {
            d[[i, j]] = col[i] / denom;
        }
    }
    d
}

fn pab_oracle(y: &FeatureMap, p: &PaweParams) -> FeatureMap {
    let (c, h, wd) = y.dim();
    let n = h * wd;
    let a = conv1x1_oracle(y, &p.proj_a_w, &p.proj_a_b);
    let b = conv1x1_oracle(y, &p.proj_b_w, &p.proj_b_b);
    let cf = conv1x1_oracle(y, &p.proj_c_w, &p.proj_c_b);
    let d = affinity_oracle(&a, &b);
    let mut out = y.clone();
    for k in 0..c {
        for j in 0..n {
            let agg: f64 = (0..n).map(|i| d[[i, j]] * cf[[k, i]]).sum();
            out[[k, j / wd, j % wd]] += p.alpha * agg;
        }
    }
    out
}

fn web_oracle(w: &Array4<f64>, web: &WebParams) -> Array1<f64> {
    let (co, ci, kh, kw) = w.dim();
    let mut ap = Array1::zeros(co);
    for o in 0..co {
        let mut s = 0.0;
        for i in 0..ci {
            for a in 0..kh {
                for b in 0..kw {
                    s += w[[o, i, a, b]];
                }
            }
        }
        ap[o] = s / (ci * kh * kw) as f64;
    }
    let hidden = web.fc1_w.dim().0;
    let mut h = Array1::zeros(hidden);
    for j in 0..hidden {
        let mut acc = web.fc1_b[j];
        for i in 0..co {
            acc += web.fc1_w[[j, i]] * ap[i];
        }
        h[j] = acc.max(0.0);
    }
    let mut e = Array1::zeros(co);
    for j in 0..co {
        let mut acc = web.fc2_b[j];
        for i in 0..hidden {
            acc += web.fc2_w[[j, i]] * h[i];
        }
        e[j] = acc.max(0.0);
    }
    e
}

fn pawe_oracle(y: &FeatureMap, p: &PaweParams) -> FeatureMap {
    let mut out = pab_oracle(y, p);
    let e = web_oracle(&p.main_conv_w, &p.web);
    let (c, h, wd) = y.dim();
    for k in 0..c {
        for a in 0..h {
            for b in 0..wd {
                out[[k, a, b]] += e[k] * y[[k, a, b]];
            }
        }
    }
    out
}

fn cab_oracle(y: &FeatureMap, alpha: f64) -> FeatureMap {
    let (c, h, wd) = y.dim();
    let n = h * wd;
    let mut gram = Array2::zeros((c, c));
    for i in 0..c {
        for j in 0..c {
            gram[[i, j]] = (0..n)
                .map(|t| y[[i, t / wd, t % wd]] * y[[j, t / wd, t % wd]])
                .sum::<f64>();
        }
    }
    let mut x = Array2::zeros((c, c));
    for j in 0..c {
        let denom: f64 = (0..c).map(|i| gram[[i, j]].exp()).sum();
        for i in 0..c {
            x[[i, j]] = gram[[i, j]].exp() / denom;
        }
    }
    let mut out = y.clone();
    for j in 0..c {
        for t in 0..n {
            let agg: f64 = (0..c).map(|i| x[[i, j]] * y[[i, t / wd, t % wd]]).sum();
            out[[j, t / wd, t % wd]] += alpha * agg;
        }
    }
    out
}

fn cawe_oracle(y: &FeatureMap, p: &CaweParams) -> FeatureMap {
    let mut out = cab_oracle(y, p.alpha);
    let e = web_oracle(&p.skip_conv_w, &p.web);
    let (c, h, wd) = y.dim();
    for k in 0..c {
        for a in 0..h {
            for b in 0..wd {
                out[[k, a, b]] += e[k] * y[[k, a, b]];
            }
        }
    }
    out
}

#[test]
fn pab_pawe_match_oracle_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for case in 0..20 {
        let c = [1, 4, 8, 16][case % 4];
        let (h, w) = [(1, 1), (3, 5), (5, 5), (7, 3), (4, 6)][case % 5];
        let mut params = PaweParams::init(&mut rng, c, c, 4);
        params.alpha = rng.gen_range(-1.0..1.0);
        let y = rand_map(&mut rng, c, h, w);
        let got_pab = pab_forward(&y, &params).unwrap();
        let want_pab = pab_oracle(&y, &params);
        assert!(
            max_abs_diff(&got_pab, &want_pab) < 1e-10,
            "pab case {case}: diff {}",
            max_abs_diff(&got_pab, &want_pab)
        );
        let got = pawe_forward(&y, &params).unwrap();
        let want = pawe_oracle(&y, &params);
        assert!(max_abs_diff(&got, &want) < 1e-10, "pawe case {case}");
    }
}

#[test]
fn cab_cawe_match_oracle_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    for case in 0..20 {
        let c = [1, 4, 8, 16][case % 4];
        let (h, w) = [(1, 1), (3, 5), (5, 5), (7, 3), (4, 6)][case % 5];
        let mut params = CaweParams::init(&mut rng, c, 4);
        params.alpha = rng.gen_range(-1.0..1.0);
        let y = rand_map(&mut rng, c, h, w);
        let got_cab = cab_forward(&y, &params).unwrap();
        let want_cab = cab_oracle(&y, params.alpha);
        assert!(max_abs_diff(&got_cab, &want_cab) < 1e-10, "cab case {case}");
        let got = cawe_forward(&y, &params).unwrap();
        let want = cawe_oracle(&y, &params);
        assert!(max_abs_diff(&got, &want) < 1e-10, "cawe case {case}");
    }
}

#[test]
fn web_matches_oracle_and_is_nonnegative() {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    for case in 0..20 {
        let c = [1, 3, 8, 16, 32][case % 5];
        let ci = [1, 2, 4][case % 3];
        let web = WebParams::init(&mut rng, c, 4);
        let w = Array4::from_shape_fn((c, ci, 3, 3), |_| rng.gen_range(-1.0..1.0));
        let got = web_excitation(&w.clone().into_dyn(), &web).unwrap();
        let want = web_oracle(&w, &web);
        for (g, e) in got.gains.iter().zip(want.iter()) {
            assert!((g - e).abs() < 1e-10, "web case {case}");
            assert!(*g >= 0.0);
        }
    }
}

#[test]
fn attention_maps_are_row_stochastic() {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    for case in 0..100 {
        let c = [1, 2, 4, 8][case % 4];
        let (h, w) = [(1, 1), (2, 3), (4, 4), (5, 7)][case % 4];
        let a = rand_map(&mut rng, c, h, w);
        let b = rand_map(&mut rng, c, h, w);
        let s = spatial_attention(&a, &b).unwrap();
        assert_eq!(s.data.dim(), (h * w, h * w));
        for row in s.data.rows() {
            let sum: f64 = row.sum();
            assert!((sum - 1.0).abs() < 1e-5, "spatial row sum {sum}");
            assert!(row.iter().all(|x| *x >= 0.0));
        }
        let y = rand_map(&mut rng, c, h, w);
        let m = channel_attention(&y).unwrap();
        assert_eq!(m.data.dim(), (c, c));
        for row in m.data.rows() {
            let sum: f64 = row.sum();
            assert!((sum - 1.0).abs() < 1e-5, "channel row sum {sum}");
        }
    }
}

#[test]
fn blocks_reduce_to_identity_at_zero_alpha() {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let c = 6;
    let y = rand_map(&mut rng, c, 5, 4);
    let pawe = PaweParams::init(&mut rng, c, c, 4);
    assert_eq!(pawe.alpha, 0.0);
    let cawe = CaweParams::init(&mut rng, c, 4);
    let pab = pab_forward(&y, &pawe).unwrap();
    let cab = cab_forward(&y, &cawe).unwrap();
    assert!(max_abs_diff(&pab, &y) < 1e-12);
    assert!(max_abs_diff(&cab, &y) < 1e-12);
}

#[test]
fn single_position_attention_is_trivial() {
    // with one spatial position the affinity is the 1x1 matrix [1]
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let y = rand_map(&mut rng, 4, 1, 1);
    let s = spatial_attention(&y, &y).unwrap();
    assert_eq!(s.data.dim(), (1, 1));
    assert!((s.data[[0, 0]] - 1.0).abs() < 1e-15);
}

#[test]
fn shape_mismatch_is_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let a = rand_map(&mut rng, 2, 3, 3);
    let b = rand_map(&mut rng, 2, 3, 4);
    assert!(spatial_attention(&a, &b).is_err());
    let p = PaweParams::init(&mut rng, 4, 4, 4);
    let y = rand_map(&mut rng, 3, 3, 3);
    assert!(pawe_forward(&y, &p).is_err());
}

#[test]
fn non_finite_input_is_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let mut y = rand_map(&mut rng, 2, 2, 2);
    y[[0, 0, 0]] = f64::NAN;
    let p = CaweParams::init(&mut rng, 2, 4);
    assert!(cawe_forward(&y, &p).is_err());
    assert!(channel_attention(&y).is_err());
}

#[test]
fn reduced_channels_rounds_up() {
    assert_eq!(attention::reduced_channels(1), 1);
    assert_eq!(attention::reduced_channels(8), 1);
    assert_eq!(attention::reduced_channels(9), 2);
    assert_eq!(attention::reduced_channels(64), 8);
}
