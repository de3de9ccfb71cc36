mod common;

use std::rc::Rc;

use common::*;
use mcmap_core::sampling::{calibration_block, elliptical_support};
use mcmap_diffkit::{Array, Graph, ParamStore, Var};
use mcmap_recon::admm::{admm_iterate, admm_unrolled, masked_adjoint, reconstruct_slice, SliceData};
use mcmap_recon::forward::{cg_sense, images_to_array, masks_to_array, ForwardModel, MultiCoilData};
use mcmap_recon::mask::{MaskDrawOp, MaskProbOp, MaskSpec};
use mcmap_recon::network::{denoise, fuse_features, init_params, NetConfig};
use num_complex::Complex64;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn small_net(out_std: f64) -> NetConfig {
    NetConfig { n_features: 4, widths: [4, 8], unrolls: 2, cg_iterations: 3, rho_init: 0.1, out_init_std: out_std }
}

fn randomize_biases(store: &mut ParamStore, r: &mut ChaCha8Rng) {
    let names: Vec<String> = store.params.keys().filter(|k| k.ends_with(".b")).cloned().collect();
    for n in names {
        for v in store.get_mut(&n).unwrap().re_mut() {
            *v = r.random_range(-0.5..0.5);
        }
    }
}

/// Same-padded cross-correlation over `[cin, h, w]`.
fn conv_ref(x: &[f64], cin: usize, h: usize, w: usize, kernel: &[f64], bias: &[f64], k: usize) -> Vec<f64> {
    let cout = bias.len();
    let p = (k / 2) as isize;
    let mut out = vec![0.0; cout * h * w];
    for o in 0..cout {
        for i in 0..h {
            for j in 0..w {
                let mut acc = bias[o];
                for c in 0..cin {
                    for di in 0..k {
                        for dj in 0..k {
                            let (ii, jj) = (i as isize + di as isize - p, j as isize + dj as isize - p);
                            if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < w {
                                acc += kernel[((o * cin + c) * k + di) * k + dj] * x[(c * h + ii as usize) * w + jj as usize];
                            }
                        }
                    }
                }
                out[(o * h + i) * w + j] = acc;
            }
        }
    }
    out
}

fn relu(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|x| x.max(0.0)).collect()
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// Plain-vector feature extraction; `exchange` toggles the cross-contrast update.
fn features_ref(store: &ParamStore, s: &[Vec<f64>], n_echoes: usize, h: usize, w: usize, fusion: bool, exchange: bool) -> Vec<Vec<f64>> {
    let p = |n: &str| store.get(n).unwrap().re().to_vec();
    let nf = p("fusion.nm.b").len();
    let conv = |x: &[f64], cin: usize, name: &str| conv_ref(x, cin, h, w, &p(&format!("{name}.w")), &p(&format!("{name}.b")), 3);
    let mut out = Vec::new();
    let mut prev: Vec<f64> = p("fusion.nh.b").iter().flat_map(|&b| std::iter::repeat_n(b, h * w)).collect();
    for sj in &s[..n_echoes] {
        let m = conv(sj, 2, "fusion.nm");
        let hj = if fusion { relu(add(&m, &prev)) } else { relu(m) };
        prev = conv(&hj, nf, "fusion.nh");
        out.push(hj);
    }
    for sj in &s[n_echoes..] {
        out.push(conv(sj, 2, "fusion.ns"));
    }
    if fusion && exchange {
        let singles = add(&add(&out[n_echoes], &out[n_echoes + 1]), &out[n_echoes + 2]);
        let first = out[0].clone();
        for (j, hj) in out.iter_mut().enumerate() {
            *hj = add(hj, if j < n_echoes { &singles } else { &first });
        }
    }
    out
}

fn packed(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
}

fn run_fusion(store: &ParamStore, s: &[Vec<f64>], n_echoes: usize, h: usize, w: usize, fusion: bool) -> Vec<Vec<f64>> {
    let mut g = Graph::new();
    let b = store.bind(&mut g, &|_| true);
    let vars: Vec<Var> = s.iter().map(|x| g.constant(Array::real(&[2, h, w], x.clone()))).collect();
    let f = fuse_features(&mut g, &b, &vars, n_echoes, fusion).unwrap();
    f.iter().map(|&v| g.value(v).re().to_vec()).collect()
}

fn max_gap(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter().flatten().zip(b.iter().flatten()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn fusion_matches_plain_recurrence() {
    let (h, w, ne) = (8, 6, 3);
    let mut r = rng(20);
    let mut store = init_params(&small_net(1e-3), ne + 3, 20);
    randomize_biases(&mut store, &mut r);
    let s: Vec<Vec<f64>> = (0..ne + 3).map(|_| packed(&mut r, 2 * h * w)).collect();
    for fusion in [true, false] {
        let got = run_fusion(&store, &s, ne, h, w, fusion);
        let want = features_ref(&store, &s, ne, h, w, fusion, true);
        assert!(max_gap(&got, &want) < 1e-12, "fusion={fusion}");
    }
}

#[test]
fn zero_inputs_give_zero_features() {
    let (h, w, ne) = (8, 8, 4);
    let store = init_params(&small_net(1e-3), ne + 3, 21);
    let s = vec![vec![0.0; 2 * h * w]; ne + 3];
    for fusion in [true, false] {
        assert!(run_fusion(&store, &s, ne, h, w, fusion).iter().flatten().all(|&v| v == 0.0));
    }
}

#[test]
fn zero_hidden_kernel_reduces_to_per_echo_features() {
    let (h, w, ne) = (8, 8, 4);
    let mut r = rng(22);
    let mut store = init_params(&small_net(1e-3), ne + 3, 22);
    store.get_mut("fusion.nh.w").unwrap().re_mut().iter_mut().for_each(|v| *v = 0.0);
    let mut s: Vec<Vec<f64>> = (0..ne).map(|_| packed(&mut r, 2 * h * w)).collect();
    s.extend(vec![vec![0.0; 2 * h * w]; 3]);
    let fused = run_fusion(&store, &s, ne, h, w, true);
    let plain = run_fusion(&store, &s, ne, h, w, false);
    assert!(max_gap(&fused[..ne], &plain[..ne]) == 0.0);
}

#[test]
fn zero_single_echo_images_leave_echo_features_unchanged() {
    let (h, w, ne) = (8, 8, 4);
    let mut r = rng(23);
    let store = init_params(&small_net(1e-3), ne + 3, 23);
    let mut s: Vec<Vec<f64>> = (0..ne).map(|_| packed(&mut r, 2 * h * w)).collect();
    s.extend(vec![vec![0.0; 2 * h * w]; 3]);
    let fused = run_fusion(&store, &s, ne, h, w, true);
    let recurrence = features_ref(&store, &s, ne, h, w, true, false);
    assert!(max_gap(&fused[..ne], &recurrence[..ne]) < 1e-12);
    assert!(recurrence[..ne].iter().flatten().any(|&v| v != 0.0));
}

#[test]
fn echo_order_matters() {
    let (h, w, ne) = (8, 8, 3);
    let mut r = rng(24);
    let store = init_params(&small_net(1e-3), ne + 3, 24);
    let s: Vec<Vec<f64>> = (0..ne + 3).map(|_| packed(&mut r, 2 * h * w)).collect();
    let mut swapped = s.clone();
    swapped.swap(0, 1);
    let a = run_fusion(&store, &s, ne, h, w, true);
    let b = run_fusion(&store, &swapped, ne, h, w, true);
    // a permutation-covariant map would give b[1] == a[0]
    assert!(max_gap(&b[1..2], &a[0..1]) > 1e-3);
    assert!(max_gap(&b[ne..], &a[ne..]) > 1e-3);
}

#[test]
fn wrong_contrast_count_is_rejected() {
    let store = init_params(&small_net(1e-3), 7, 25);
    let mut g = Graph::new();
    let b = store.bind(&mut g, &|_| true);
    let v: Vec<Var> = (0..5).map(|_| g.constant(Array::real(&[2, 8, 8], vec![0.0; 128]))).collect();
    assert!(fuse_features(&mut g, &b, &v, 4, true).is_err());
}

fn full_problem(ny: usize, nz: usize, nc: usize, n_contrasts: usize, seed: u64) -> (SliceData, Vec<Vec<Complex64>>, ForwardModel) {
    let mut r = rng(seed);
    let c = coils(ny, nz, nc, seed);
    let model = ForwardModel::new(c.clone(), vec![vec![1.0; ny * nz]; n_contrasts]).unwrap();
    let x = images(&mut r, n_contrasts, ny * nz);
    let y = model.forward(&x).unwrap();
    (SliceData { coils: c, kspace: Rc::new(y) }, x, model)
}

#[test]
fn zero_unrolls_return_the_adjoint() {
    let (ny, nz) = (12, 12);
    let mut r = rng(30);
    let (data, _, _) = full_problem(ny, nz, 4, 3, 30);
    let masks = binary_masks(&mut r, 3, ny * nz, 0.3);
    let mut g = Graph::new();
    let u = g.constant(masks_to_array(&masks, ny, nz));
    let lr = g.constant(Array::real(&[1], vec![0.0]));
    let z = admm_iterate(&mut g, &data, u, lr, 0, 5, |_, _| panic!("no denoising expected")).unwrap();
    let model = ForwardModel::new(data.coils.clone(), masks).unwrap();
    let want = model.adjoint(&data.kspace).unwrap();
    assert_eq!(g.value(z).cx(), images_to_array(&want, ny, nz).cx());
}

#[test]
fn identity_denoiser_approaches_least_squares() {
    let (ny, nz) = (16, 16);
    let (data, _, model) = full_problem(ny, nz, 8, 2, 31);
    let mut g = Graph::new();
    let u = g.constant(masks_to_array(&model.masks, ny, nz));
    let lr = g.constant(Array::real(&[10], vec![10f64.ln(); 10]));
    let z = admm_iterate(&mut g, &data, u, lr, 10, 5, |_, v| Ok(v)).unwrap();
    let ls = cg_sense(&data.kspace, &model, 0.0, 20, 1e-14).unwrap();
    let got = mcmap_recon::forward::array_to_images(g.value(z));
    assert!(diff_norm(&got, &ls) < 1e-2 * norm(&ls));
}

#[test]
fn silent_denoiser_is_exact_identity() {
    let (ny, nz, ne) = (16, 16, 4);
    let store = init_params(&small_net(0.0), ne + 3, 32);
    let mut r = rng(32);
    let x = images_to_array(&images(&mut r, ne + 3, ny * nz), ny, nz);
    for fusion in [true, false] {
        let mut g = Graph::new();
        let b = store.bind(&mut g, &|_| true);
        let v = g.constant(x.clone());
        let z = denoise(&mut g, &b, v, ne, fusion).unwrap();
        assert_eq!(g.value(z).cx(), x.cx());
    }
}

#[test]
fn untrained_network_on_full_data_matches_cg_sense() {
    let (ny, nz, ne) = (16, 16, 4);
    let net = NetConfig { out_init_std: 0.0, ..NetConfig::default() };
    let store = init_params(&net, ne + 3, 33);
    let (data, _, model) = full_problem(ny, nz, 8, ne + 3, 33);
    let ls = cg_sense(&data.kspace, &model, 0.0, 20, 1e-14).unwrap();
    for fusion in [true, false] {
        let got = reconstruct_slice(&store, &net, ne, &data, &model.masks, fusion).unwrap();
        assert!(diff_norm(&got, &ls) < 1e-3 * norm(&ls), "fusion={fusion}");
    }
}

struct FdSetup {
    store: ParamStore,
    net: NetConfig,
    spec: MaskSpec,
    data: SliceData,
    reference: Vec<Vec<Complex64>>,
    n_echoes: usize,
}

fn fd_setup() -> FdSetup {
    let (ny, nz, ne) = (16, 16, 2);
    let net = small_net(0.1);
    let mut store = init_params(&net, ne + 3, 40);
    let mut r = rng(40);
    randomize_biases(&mut store, &mut r);
    let w: Vec<f64> = (0..(ne + 3) * ny * nz).map(|_| r.random_range(-6.0..6.0)).collect();
    store.insert("mask.w", Array::real(&[ne + 3, ny, nz], w), "mask_weights");
    let spec = MaskSpec {
        ny,
        nz,
        slope: 0.25,
        ratio: 0.25,
        support: elliptical_support(ny, nz).cells,
        forced: calibration_block(ny, nz, 4),
    };
    let (data, x, _) = full_problem(ny, nz, 4, ne + 3, 40);
    FdSetup { store, net, spec, data, reference: x, n_echoes: ne }
}

fn ssim_loss(g: &mut Graph, z: Var, reference: &[Vec<Complex64>], ny: usize, nz: usize) -> Var {
    let zp = g.pack(z).unwrap();
    let rv = g.constant(images_to_array(reference, ny, nz));
    let rp = g.pack(rv).unwrap();
    let s = g.ssim(zp, rp).unwrap();
    g.scale(s, -1.0)
}

/// `-SSIM` through the relaxed mask `U = P(w)` and its gradients.
fn relaxed_loss(s: &FdSetup, store: &ParamStore, fusion: bool) -> (f64, std::collections::BTreeMap<String, Vec<f64>>) {
    let mut g = Graph::new();
    let b = store.bind(&mut g, &|_| false);
    let u = g.custom(Box::new(MaskProbOp::new(&s.spec)), &[b.var("mask.w")]).unwrap();
    let z = admm_unrolled(&mut g, &b, &s.net, s.n_echoes, &s.data, u, fusion).unwrap();
    let l = ssim_loss(&mut g, z, &s.reference, s.spec.ny, s.spec.nz);
    let value = g.value(l).re()[0];
    let mut grads = g.backward(l).unwrap();
    (value, b.collect(&mut grads))
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    let s = fd_setup();
    let h = 1e-5;
    let mut r = rng(41);
    let free: Vec<usize> = (0..s.store.get("mask.w").unwrap().len())
        .filter(|&i| {
            let cell = i % (s.spec.ny * s.spec.nz);
            s.spec.support[cell] && !s.spec.forced[cell]
        })
        .collect();
    for fusion in [true, false] {
        let (_, grads) = relaxed_loss(&s, &s.store, fusion);
        let mut worst: (f64, String) = (0.0, String::new());
        let names: Vec<String> = s.store.params.keys().cloned().collect();
        for name in names {
            if !fusion && name.starts_with("fusion.nh") {
                continue;
            }
            let n = s.store.get(&name).unwrap().len();
            for _ in 0..5 {
                let i = if name == "mask.w" { free[r.random_range(0..free.len())] } else { r.random_range(0..n) };
                let eval = |delta: f64| {
                    let mut st = s.store.clone();
                    st.get_mut(&name).unwrap().re_mut()[i] += delta;
                    relaxed_loss(&s, &st, fusion).0
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let an = grads.get(&name).map_or(0.0, |g| g[i]);
                let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-7);
                if err > worst.0 {
                    worst = (err, format!("{name}[{i}] fd {fd:e} an {an:e}"));
                }
            }
        }
        assert!(worst.0 < 1e-3, "fusion={fusion}: {}", worst.1);
    }
}

#[test]
fn straight_through_draw_backpropagates_the_mask_gradient() {
    let s = fd_setup();
    let (ny, nz) = (s.spec.ny, s.spec.nz);
    let w = s.store.get("mask.w").unwrap().clone();
    let op = MaskDrawOp::new(&w, &s.spec, &mut rng(42));
    let drawn = op.masks().clone();
    let probs: Vec<_> = op.probabilities().to_vec();

    let mut g = Graph::new();
    let b = s.store.bind(&mut g, &|_| false);
    let u = g.custom(Box::new(op), &[b.var("mask.w")]).unwrap();
    let z = admm_unrolled(&mut g, &b, &s.net, s.n_echoes, &s.data, u, true).unwrap();
    let l = ssim_loss(&mut g, z, &s.reference, ny, nz);
    let gw = b.collect(&mut g.backward(l).unwrap()).remove("mask.w").unwrap();

    let mut g = Graph::new();
    let b = s.store.bind(&mut g, &|n| n == "mask.w");
    let u = g.param(drawn);
    let z = admm_unrolled(&mut g, &b, &s.net, s.n_echoes, &s.data, u, true).unwrap();
    let l = ssim_loss(&mut g, z, &s.reference, ny, nz);
    let gu = g.backward(l).unwrap().get(u).unwrap().re().to_vec();
    let want: Vec<f64> = gu.chunks(ny * nz).zip(&probs).flat_map(|(gj, pm)| pm.backward(gj)).collect();
    let scale = want.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(gw.iter().zip(&want).all(|(a, b)| (a - b).abs() <= 1e-10 * scale.max(1.0)));
    assert!(scale > 0.0);
}

#[test]
fn unroll_count_must_fit_the_penalties() {
    let (data, _, model) = full_problem(8, 8, 2, 1, 50);
    let mut g = Graph::new();
    let u = g.constant(masks_to_array(&model.masks, 8, 8));
    let lr = g.constant(Array::real(&[2], vec![0.0; 2]));
    assert!(admm_iterate(&mut g, &data, u, lr, 3, 2, |_, v| Ok(v)).is_err());
    let bad = SliceData { coils: data.coils.clone(), kspace: Rc::new(MultiCoilData::from(vec![vec![vec![Complex64::new(0.0, 0.0); 10]; 2]])) };
    let u = g.constant(masks_to_array(&model.masks, 8, 8));
    assert!(masked_adjoint(&mut g, &bad, u).is_err());
    assert!(admm_iterate(&mut g, &bad, u, lr, 1, 2, |_, v| Ok(v)).is_err());
}
