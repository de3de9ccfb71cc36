use mcmap_core::metrics::*;
use mcmap_core::phantom::Region;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn noise(h: usize, w: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..h * w).map(|_| rng.random::<f64>()).collect()
}

fn gaussian_blur(img: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-r..=r).map(|t| (-(t * t) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let pass = |src: &[f64], vertical: bool| {
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let (mut s, mut n) = (0.0, 0.0);
                for (k, t) in (-r..=r).enumerate() {
                    let (yy, xx) = if vertical { (y as isize + t, x as isize) } else { (y as isize, x as isize + t) };
                    if yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize {
                        s += taps[k] * src[yy as usize * w + xx as usize];
                        n += taps[k];
                    }
                }
                out[y * w + x] = s / n;
            }
        }
        out
    };
    pass(&pass(img, true), false)
}

fn box3(img: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let (mut s, mut n) = (0.0, 0.0);
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let (yy, xx) = (y as isize + dy, x as isize + dx);
                    if yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize {
                        s += img[yy as usize * w + xx as usize];
                        n += 1.0;
                    }
                }
            }
            out[y * w + x] = s / n;
        }
    }
    out
}

/// Piecewise-constant disks on a gradient background.
fn natural_image(h: usize, w: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let disks: Vec<(f64, f64, f64, f64)> = (0..6)
        .map(|_| (rng.random::<f64>() * h as f64, rng.random::<f64>() * w as f64, 3.0 + 8.0 * rng.random::<f64>(), rng.random::<f64>()))
        .collect();
    (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as f64, (i % w) as f64);
            let mut v = 0.2 * x / w as f64;
            for &(cy, cx, r, a) in &disks {
                if (y - cy).powi(2) + (x - cx).powi(2) <= r * r {
                    v += a;
                }
            }
            v
        })
        .collect()
}

#[test]
fn bland_altman_examples() {
    let r = bland_altman(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
    assert_eq!((r.bias, r.sd, r.loa_low, r.loa_high), (0.0, 0.0, 0.0, 0.0));
    let r = bland_altman(&[0.0, 2.0], &[1.0, 1.0]).unwrap();
    assert!(r.bias.abs() < 1e-15);
    assert!((r.sd - 2f64.sqrt()).abs() < 1e-12);
    assert!((r.loa_low + 2.771_86).abs() < 1e-5 && (r.loa_high - 2.771_86).abs() < 1e-5);
    assert_eq!(r.pairs, vec![(0.5, -1.0), (1.5, 1.0)]);
    let a = [3.0, 7.5, -2.0, 11.0];
    let b: Vec<f64> = a.iter().map(|v| v + 5.0).collect();
    let r = bland_altman(&b, &a).unwrap();
    assert!((r.bias - 5.0).abs() < 1e-12 && r.sd < 1e-12);
    assert!(bland_altman(&[1.0], &[1.0]).is_err());
    assert!(bland_altman(&[1.0, 2.0], &[1.0]).is_err());
}

proptest! {
    #[test]
    fn bland_altman_is_antisymmetric(pairs in prop::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 2..40)) {
        let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let ab = bland_altman(&a, &b).unwrap();
        let ba = bland_altman(&b, &a).unwrap();
        prop_assert!((ab.bias + ba.bias).abs() < 1e-9);
        prop_assert!((ab.loa_low + ba.loa_high).abs() < 1e-9);
        prop_assert!(ab.loa_low <= ab.bias && ab.bias <= ab.loa_high && ab.sd >= 0.0);
        let aa = bland_altman(&a, &a).unwrap();
        prop_assert_eq!((aa.bias, aa.sd), (0.0, 0.0));
    }

    #[test]
    fn roi_mean_is_linear(vals in prop::collection::vec(-100f64..100.0, 12), alpha in -5f64..5.0) {
        let grid: Vec<u16> = (0..12).map(|i| 2 + (i % 2) as u16).collect();
        let regions = vec![Region { id: 2, name: "a".into(), label: 1 }, Region { id: 3, name: "b".into(), label: 1 }];
        let valid = vec![true; 12];
        let scaled: Vec<f64> = vals.iter().map(|v| alpha * v).collect();
        let r1 = roi_stats(&vals, &valid, &grid, &regions).unwrap();
        let r2 = roi_stats(&scaled, &valid, &grid, &regions).unwrap();
        for (x, y) in r1.iter().zip(&r2) {
            prop_assert!((alpha * x.mean - y.mean).abs() < 1e-9);
        }
    }
}

#[test]
fn roi_examples() {
    let grid = vec![2u16, 2, 3, 3, 0];
    let regions = vec![Region { id: 2, name: "wm_left".into(), label: 1 }, Region { id: 3, name: "wm_right".into(), label: 1 }];
    let t = roi_stats(&[5.0; 5], &[true; 5], &grid, &regions).unwrap();
    assert!(t.iter().all(|r| r.mean == 5.0 && r.sd == 0.0 && r.count == 2));
    let t = roi_stats(&[1.0, 1.0, 4.0, 4.0, 9.0], &[true; 5], &grid, &regions).unwrap();
    assert_eq!((t[0].mean, t[1].mean), (1.0, 4.0));
    assert!(matches!(
        roi_stats(&[1.0; 5], &[true, true, false, false, true], &grid, &regions),
        Err(mcmap_core::Error::EmptyRegion(_))
    ));
}

#[test]
fn white_noise_is_sharp_and_blur_raises_score() {
    for seed in 0..10 {
        let img = noise(64, 64, seed);
        let s0 = blurriness(&img, 64, 64).unwrap();
        assert!(s0 < 0.3, "noise score {s0}");
        let s1 = blurriness(&gaussian_blur(&img, 64, 64, 2.0), 64, 64).unwrap();
        assert!(s1 > s0);
    }
}

#[test]
fn blurriness_monotone_under_repeated_box_blur() {
    for seed in 0..5 {
        let mut img = natural_image(64, 64, seed);
        let mut prev = blurriness(&img, 64, 64).unwrap();
        for _ in 0..5 {
            img = box3(&img, 64, 64);
            let s = blurriness(&img, 64, 64).unwrap();
            assert!(s >= prev - 1e-12, "{s} < {prev}");
            assert!((0.0..=1.0).contains(&s));
            prev = s;
        }
    }
}

/// Direct windowed SSIM: explicit 2D Gaussian weights at every valid position.
fn ssim_direct(x: &[f64], y: &[f64], h: usize, w: usize) -> f64 {
    let g: Vec<f64> = (0..11).map(|i| (-((i as f64 - 5.0).powi(2)) / 4.5).exp()).collect();
    let gs: f64 = g.iter().sum();
    let (lo, hi) = y.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
    let l = hi - lo;
    let (c1, c2) = ((0.01 * l).powi(2), (0.03 * l).powi(2));
    let mut total = 0.0;
    let mut count = 0.0;
    for oy in 0..=h - 11 {
        for ox in 0..=w - 11 {
            let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for a in 0..11 {
                for b in 0..11 {
                    let wgt = g[a] * g[b] / (gs * gs);
                    let (p, q) = (x[(oy + a) * w + ox + b], y[(oy + a) * w + ox + b]);
                    mx += wgt * p;
                    my += wgt * q;
                    sxx += wgt * p * p;
                    syy += wgt * q * q;
                    sxy += wgt * p * q;
                }
            }
            let (vx, vy, cxy) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
            total += (2.0 * mx * my + c1) * (2.0 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1.0;
        }
    }
    total / count
}

#[test]
fn ssim_matches_direct_window_evaluation() {
    let (h, w) = (20, 17);
    for seed in 0..3 {
        let x = noise(h, w, seed);
        let y = noise(h, w, seed + 100);
        let s = ssim_eval(&[x.clone()], &[y.clone()], h, w).unwrap();
        assert!((s - ssim_direct(&x, &y, h, w)).abs() < 1e-12);
    }
    let x = noise(16, 16, 1);
    let shifted: Vec<f64> = x.iter().map(|v| v + 10.0).collect();
    assert!(ssim_eval(&[shifted], &[x.clone()], 16, 16).unwrap() < 1.0);
    let anti: Vec<f64> = x.iter().map(|v| 1.0 - v).collect();
    assert!(ssim_eval(&[anti], &[x.clone()], 16, 16).unwrap() < 0.0);
    assert!(ssim_eval(&[x.clone()], &[x.clone(), x], 16, 16).is_err());
}
