use super::*;
use candle_core::{Device, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DEV: Device = Device::Cpu;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randv(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
}

fn randmask(r: &mut ChaCha8Rng, n: usize) -> Vec<bool> {
    let mut m: Vec<bool> = (0..n).map(|_| r.random_bool(0.5)).collect();
    m[0] = true;
    m
}

fn t1(v: &[f64]) -> Tensor {
    Tensor::from_vec(v.to_vec(), v.len(), &DEV).unwrap()
}

fn t3(v: &[f64], b: usize, t: usize, c: usize) -> Tensor {
    Tensor::from_vec(v.to_vec(), (b, t, c), &DEV).unwrap()
}

fn m1(m: &[bool]) -> Tensor {
    t1(&m.iter().map(|&x| x as u8 as f64).collect::<Vec<_>>())
}

fn m2(m: &[Vec<bool>]) -> Tensor {
    mask_from(m, DType::F64, &DEV).unwrap()
}

fn val(t: &Tensor) -> f64 {
    scalar(t).unwrap()
}

/// Central-difference check of d f / d x against autodiff.
fn grad_check(x0: &[f64], shape: &[usize], f: impl Fn(&Tensor) -> Tensor) {
    let var = Var::from_tensor(&Tensor::from_vec(x0.to_vec(), shape, &DEV).unwrap()).unwrap();
    let loss = f(var.as_tensor());
    let grads = loss.backward().unwrap();
    let analytic = grads.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
    let h = 1e-5;
    let mut numeric = vec![0.0; x0.len()];
    for i in 0..x0.len() {
        let mut xp = x0.to_vec();
        let mut xm = x0.to_vec();
        xp[i] += h;
        xm[i] -= h;
        let fp = val(&f(&Tensor::from_vec(xp, shape, &DEV).unwrap()));
        let fm = val(&f(&Tensor::from_vec(xm, shape, &DEV).unwrap()));
        numeric[i] = (fp - fm) / (2.0 * h);
    }
    let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let rel = diff / na.max(nn).max(1e-12);
    assert!(rel < 1e-4, "relative gradient error {rel}");
}

#[test]
fn masked_l2_basics() {
    let a = t1(&[0.3, -0.2, 0.9]);
    assert_eq!(val(&masked_l2(&a, &a, &m1(&[true, true, false])).unwrap()), 0.0);
    let p = t1(&[2.0, 3.0]);
    let q = t1(&[1.0, 2.0]);
    assert_eq!(val(&masked_l2(&p, &q, &m1(&[true, true])).unwrap()), 1.0);
    assert!(matches!(
        masked_l2(&p, &q, &m1(&[false, false])),
        Err(Error::EmptyMask(_))
    ));
}

#[test]
fn masked_l2_matches_loop_oracle() {
    let mut r = rng(1);
    for _ in 0..20 {
        let n = r.random_range(1..40);
        let (p, q, m) = (randv(&mut r, n), randv(&mut r, n), randmask(&mut r, n));
        let mut s = 0.0;
        let mut k = 0.0;
        for i in 0..n {
            if m[i] {
                s += (p[i] - q[i]) * (p[i] - q[i]);
                k += 1.0;
            }
        }
        let got = val(&masked_l2(&t1(&p), &t1(&q), &m1(&m)).unwrap());
        assert!((got - s / k).abs() <= 1e-12);
    }
}

#[test]
fn l1_mel_basics_and_oracle() {
    let (b, t, c) = (2, 7, 5);
    let mut r = rng(2);
    let p = randv(&mut r, b * t * c);
    let mask = vec![randmask(&mut r, t), randmask(&mut r, t)];
    let pt = t3(&p, b, t, c);
    assert_eq!(val(&l1_mel(&pt, &pt, &m2(&mask)).unwrap()), 0.0);
    let shifted = (&pt + 0.5).unwrap();
    assert!((val(&l1_mel(&shifted, &pt, &m2(&mask)).unwrap()) - 0.5).abs() < 1e-12);

    let q = randv(&mut r, b * t * c);
    let mut s = 0.0;
    let mut k = 0.0;
    for bi in 0..b {
        for ti in 0..t {
            if mask[bi][ti] {
                for ci in 0..c {
                    let i = (bi * t + ti) * c + ci;
                    s += (p[i] - q[i]).abs();
                    k += 1.0;
                }
            }
        }
    }
    let got = val(&l1_mel(&pt, &t3(&q, b, t, c), &m2(&mask)).unwrap());
    assert!((got - s / k).abs() <= 1e-12);
    assert!(matches!(
        l1_mel(&pt, &pt, &m2(&[vec![false; t], vec![false; t]])),
        Err(Error::EmptyMask(_))
    ));
}

/// Direct sliding-window SSIM over a `[h][w]` image.
fn naive_ssim(x: &[Vec<f64>], y: &[Vec<f64>], cfg: &SsimConfig) -> f64 {
    let g = cfg.taps();
    let k = cfg.window;
    let (h, w) = (x.len(), x[0].len());
    let (c1, c2) = (cfg.c1(), cfg.c2());
    let mut acc = 0.0;
    let mut count = 0.0;
    for i in 0..=h - k {
        for j in 0..=w - k {
            let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for a in 0..k {
                for b in 0..k {
                    let wgt = g[a] * g[b];
                    let (u, v) = (x[i + a][j + b], y[i + a][j + b]);
                    mx += wgt * u;
                    my += wgt * v;
                    xx += wgt * u * u;
                    yy += wgt * v * v;
                    xy += wgt * u * v;
                }
            }
            let (sx, sy, sxy) = (xx - mx * mx, yy - my * my, xy - mx * my);
            acc += ((2.0 * mx * my + c1) * (2.0 * sxy + c2)) / ((mx * mx + my * my + c1) * (sx + sy + c2));
            count += 1.0;
        }
    }
    acc / count
}

#[test]
fn ssim_identity_symmetry_and_oracle() {
    let cfg = SsimConfig::default();
    let (t, c) = (20, 14);
    let mut r = rng(3);
    let a = randv(&mut r, t * c);
    let b = randv(&mut r, t * c);
    let mut mask = vec![false; t];
    for m in mask.iter_mut().take(17).skip(2) {
        *m = true;
    }
    mask[0] = true;
    let (at, bt, mt) = (t3(&a, 1, t, c), t3(&b, 1, t, c), m2(&[mask.clone()]));
    assert!(val(&ssim_loss(&at, &at, &mt, &cfg).unwrap()).abs() < 1e-9);
    let ab = val(&ssim_loss(&at, &bt, &mt, &cfg).unwrap());
    let ba = val(&ssim_loss(&bt, &at, &mt, &cfg).unwrap());
    assert!((ab - ba).abs() < 1e-12);
    assert!((0.0..=2.0).contains(&ab));

    let rows: Vec<usize> = (0..t).filter(|&i| mask[i]).collect();
    let img = |v: &[f64]| rows.iter().map(|&i| v[i * c..(i + 1) * c].to_vec()).collect::<Vec<_>>();
    let oracle = 1.0 - naive_ssim(&img(&a), &img(&b), &cfg);
    assert!((ab - oracle).abs() < 1e-9, "{ab} vs {oracle}");
}

#[test]
fn ssim_range_and_region_checks() {
    let cfg = SsimConfig::default();
    let mut r = rng(4);
    for _ in 0..10 {
        let a = randv(&mut r, 12 * 12);
        let b: Vec<f64> = randv(&mut r, 12 * 12).iter().map(|v| -v * 3.0).collect();
        let l = val(&ssim_loss(&t3(&a, 1, 12, 12), &t3(&b, 1, 12, 12), &m2(&[vec![true; 12]]), &cfg).unwrap());
        assert!((0.0..=2.0).contains(&l), "{l}");
    }
    let x = t3(&randv(&mut r, 20 * 12), 1, 20, 12);
    let mut small = vec![false; 20];
    for m in small.iter_mut().take(10) {
        *m = true;
    }
    assert!(matches!(
        ssim_loss(&x, &x, &m2(&[small]), &cfg),
        Err(Error::RegionTooSmall { width: 10, window: 11 })
    ));
    assert!(matches!(ssim_loss(&x, &x, &m2(&[vec![false; 20]]), &cfg), Err(Error::EmptyMask(_))));
}

#[test]
fn outside_mask_perturbation_changes_nothing() {
    let cfg = SsimConfig::default();
    let (t, c) = (24, 12);
    let mut r = rng(5);
    let a = randv(&mut r, t * c);
    let b = randv(&mut r, t * c);
    let mask: Vec<bool> = (0..t).map(|i| i % 2 == 0).collect();
    let mut a2 = a.clone();
    for ti in 0..t {
        if !mask[ti] {
            for ci in 0..c {
                a2[ti * c + ci] += r.random_range(-5.0..5.0);
            }
        }
    }
    let mt = m2(&[mask.clone()]);
    let (x, x2, y) = (t3(&a, 1, t, c), t3(&a2, 1, t, c), t3(&b, 1, t, c));
    assert_eq!(val(&l1_mel(&x, &y, &mt).unwrap()), val(&l1_mel(&x2, &y, &mt).unwrap()));
    assert_eq!(val(&ssim_loss(&x, &y, &mt, &cfg).unwrap()), val(&ssim_loss(&x2, &y, &mt, &cfg).unwrap()));
    let flat: Vec<f64> = a[..t].to_vec();
    let moved: Vec<f64> = flat.iter().zip(&mask).map(|(v, &m)| if m { *v } else { v + 7.0 }).collect();
    let fm = m1(&mask);
    assert_eq!(
        val(&masked_l2(&t1(&flat), &t1(&b[..t]), &fm).unwrap()),
        val(&masked_l2(&t1(&moved), &t1(&b[..t]), &fm).unwrap())
    );
}

#[test]
fn framewise_ce_cases() {
    let (t, v) = (6, 5);
    let labels = Tensor::from_vec(vec![0u32, 1, 2, 3, 4, 0], (1, t), &DEV).unwrap();
    let mask = m2(&[vec![true; t]]);
    let uniform = Tensor::zeros((1, t, v), DType::F64, &DEV).unwrap();
    let ce = val(&framewise_ce(&uniform, &labels, &mask).unwrap());
    assert!((ce - (v as f64).ln()).abs() < 1e-12);

    let lab = labels.to_vec2::<u32>().unwrap()[0].clone();
    let mut onehot = vec![0.0; t * v];
    for (i, &l) in lab.iter().enumerate() {
        onehot[i * v + l as usize] = 60.0;
    }
    let ce = val(&framewise_ce(&t3(&onehot, 1, t, v), &labels, &mask).unwrap());
    assert!(ce < 1e-20);

    let mut r = rng(6);
    let logits = randv(&mut r, t * v).iter().map(|x| x * 4.0).collect::<Vec<_>>();
    let mk = randmask(&mut r, t);
    let mut s = 0.0;
    let mut k = 0.0;
    for i in 0..t {
        if mk[i] {
            let row = &logits[i * v..(i + 1) * v];
            let lse = row.iter().map(|x| x.exp()).sum::<f64>().ln();
            s += lse - row[lab[i] as usize];
            k += 1.0;
        }
    }
    let got = val(&framewise_ce(&t3(&logits, 1, t, v), &labels, &m2(&[mk])).unwrap());
    assert!((got - s / k).abs() < 1e-9);

    let bad = Tensor::from_vec(vec![0u32, 1, 2, 3, 4, 5], (1, t), &DEV).unwrap();
    assert!(matches!(framewise_ce(&uniform, &bad, &mask), Err(Error::Invalid(_))));
    assert!(matches!(
        framewise_ce(&uniform, &labels, &m2(&[vec![false; t]])),
        Err(Error::EmptyMask(_))
    ));
}

fn s(v: f64) -> Tensor {
    Tensor::new(v, &DEV).unwrap()
}

#[test]
fn train_loss_weighting() {
    let zero = LossWeights {
        lambda_dur: 0.0,
        lambda_pitch: 0.0,
        lambda_diff: 0.0,
        lambda_ssim: 0.0,
        ..LossWeights::default()
    };
    let unit = || TrainTerms {
        dur: s(1.0),
        pitch: s(1.0),
        diff: s(1.0),
        ssim: s(1.0),
    };
    let o = train_loss(unit(), &zero).unwrap();
    assert_eq!(o.report.total, 0.0);
    assert_eq!(val(&o.total), 0.0);
    let o = train_loss(unit(), &LossWeights::default()).unwrap();
    assert_eq!(o.report.total, 3.0);
    assert_eq!(val(&o.total), 3.0);

    let mut r = rng(7);
    for _ in 0..10 {
        let tv = randv(&mut r, 4).iter().map(|x| x.abs() * 3.0).collect::<Vec<_>>();
        let w = LossWeights {
            lambda_dur: r.random_range(0.0..2.0),
            lambda_pitch: r.random_range(0.0..2.0),
            lambda_diff: r.random_range(0.0..2.0),
            lambda_ssim: r.random_range(0.0..2.0),
            ..LossWeights::default()
        };
        let o = train_loss(
            TrainTerms {
                dur: s(tv[0]),
                pitch: s(tv[1]),
                diff: s(tv[2]),
                ssim: s(tv[3]),
            },
            &w,
        )
        .unwrap();
        let hand = w.lambda_dur * tv[0] + w.lambda_pitch * tv[1] + w.lambda_diff * tv[2] + w.lambda_ssim * tv[3];
        assert!((o.report.total - hand).abs() <= 1e-12);
        assert!((val(&o.total) - hand).abs() <= 1e-12);
        let line = serde_json::to_string(&o.report).unwrap();
        let back: LossReport = serde_json::from_str(&line).unwrap();
        assert_eq!(back, o.report);
    }
}

fn log_row(d: &[f64]) -> Vec<f64> {
    d.iter().map(|x| (x + 1.0).ln()).collect()
}

#[test]
fn dp_loss_cases() {
    let w = LossWeights::default();
    let durations = [4u32, 6, 3, 5, 7];
    let edit = [false, true, true, false, false];
    let mask_p = m2(&[vec![true, false, false, true, false]]);
    let target = DpTarget {
        durations: &durations,
        edit: &edit,
        target_frames: 9.0,
        domain: DurationDomain::Log,
    };
    assert_eq!(target.sentence_frames(), 25.0);
    let exact = log_row(&[4.0, 6.0, 3.0, 5.0, 7.0]);
    let o = ttt_dp_loss(&Tensor::from_vec(exact, (1, 5), &DEV).unwrap(), &mask_p, &target, &w).unwrap();
    assert!(o.report.total.abs() < 1e-18, "{}", o.report.total);

    let only_m = LossWeights {
        lambda_p: 0.0,
        lambda_s: 0.0,
        ..w
    };
    let over = log_row(&[4.0, 6.0, 5.0, 5.0, 7.0]);
    let o = ttt_dp_loss(&Tensor::from_vec(over, (1, 5), &DEV).unwrap(), &mask_p, &target, &only_m).unwrap();
    assert!((o.report.total - 4.0).abs() < 1e-9);

    let no_edit = DpTarget {
        edit: &[false; 5],
        ..target
    };
    let z = Tensor::zeros((1, 5), DType::F64, &DEV).unwrap();
    assert!(matches!(ttt_dp_loss(&z, &mask_p, &no_edit, &w), Err(Error::EmptyMask(_))));
    let clash = m2(&[vec![false, true, false, false, false]]);
    assert!(matches!(ttt_dp_loss(&z, &clash, &target, &w), Err(Error::MaskOverlap(1))));
}

#[test]
fn dp_loss_matches_three_term_oracle() {
    let mut r = rng(8);
    for domain in [DurationDomain::Log, DurationDomain::Linear] {
        for _ in 0..10 {
            let (b, n) = (3, 9);
            let durations: Vec<u32> = (0..n).map(|_| r.random_range(1..12)).collect();
            let mut edit = vec![false; n];
            edit[3] = true;
            edit[4] = true;
            let masks: Vec<Vec<bool>> = (0..b)
                .map(|_| {
                    let mut m: Vec<bool> = (0..n).map(|i| !edit[i] && r.random_bool(0.6)).collect();
                    m[0] = true;
                    m
                })
                .collect();
            let pred: Vec<f64> = (0..b * n).map(|_| r.random_range(0.0..2.5)).collect();
            let w = LossWeights {
                lambda_p: r.random_range(0.1..2.0),
                lambda_m: r.random_range(0.1..2.0),
                lambda_s: r.random_range(0.1..2.0),
                ..LossWeights::default()
            };
            let m_target = r.random_range(2.0..20.0);
            let target = DpTarget {
                durations: &durations,
                edit: &edit,
                target_frames: m_target,
                domain,
            };
            let o = ttt_dp_loss(&Tensor::from_vec(pred.clone(), (b, n), &DEV).unwrap(), &m2(&masks), &target, &w)
                .unwrap();

            let (mut lp, mut cnt, mut lm, mut ls) = (0.0, 0.0, 0.0, 0.0);
            let kept: f64 = (0..n).filter(|&i| !edit[i]).map(|i| durations[i] as f64).sum();
            for bi in 0..b {
                let (mut es, mut all) = (0.0, 0.0);
                for i in 0..n {
                    let p = pred[bi * n + i];
                    let frames = p.exp() - 1.0;
                    if masks[bi][i] {
                        let d = durations[i] as f64;
                        let e = match domain {
                            DurationDomain::Log => p - (d + 1.0).ln(),
                            DurationDomain::Linear => frames - d,
                        };
                        lp += e * e;
                        cnt += 1.0;
                    }
                    if edit[i] {
                        es += frames;
                    }
                    all += frames;
                }
                lm += (es - m_target).powi(2) / b as f64;
                ls += (all - kept - m_target).powi(2) / b as f64;
            }
            let hand = w.lambda_p * lp / cnt + w.lambda_m * lm + w.lambda_s * ls;
            assert!((o.report.total - hand).abs() <= 1e-9 * hand.max(1.0), "{} vs {hand}", o.report.total);
        }
    }
}

fn sd_case(seed: u64) -> (Tensor, Tensor, Vec<bool>, Vec<bool>, Tensor, Tensor, Vec<f64>, Vec<f64>, Vec<f64>, Vec<u32>) {
    let (t, c, v) = (30, 12, 6);
    let mut r = rng(seed);
    let p = randv(&mut r, t * c);
    let q = randv(&mut r, t * c);
    let mask_new: Vec<bool> = (0..t).map(|i| i < 13).collect();
    let mask_edit: Vec<bool> = (0..t).map(|i| (18..24).contains(&i)).collect();
    let lg: Vec<f64> = randv(&mut r, t * v).iter().map(|x| x * 3.0).collect();
    let lab: Vec<u32> = (0..t).map(|_| r.random_range(0..v as u32)).collect();
    (
        t3(&p, 1, t, c),
        t3(&q, 1, t, c),
        mask_new,
        mask_edit,
        t3(&lg, 1, t, v),
        Tensor::from_vec(lab.clone(), (1, t), &DEV).unwrap(),
        p,
        q,
        lg,
        lab,
    )
}

#[test]
fn sd_loss_cases() {
    let w = LossWeights::default();
    let cfg = SsimConfig::default();
    let (p, q, mn, me, _, labels, _, _, _, lab) = sd_case(9);
    let (t, v) = (30, 6);
    let mut confident = vec![0.0; t * v];
    for (i, &l) in lab.iter().enumerate() {
        confident[i * v + l as usize] = 60.0;
    }
    let o = ttt_sd_loss(&p, &p, &m2(&[mn.clone()]), &m2(&[me.clone()]), &t3(&confident, 1, t, v), &labels, &w, &cfg)
        .unwrap();
    assert!(o.report.total.abs() < 1e-9);

    let uniform = Tensor::zeros((1, t, v), DType::F64, &DEV).unwrap();
    let o = ttt_sd_loss(&p, &q, &m2(&[mn.clone()]), &m2(&[me.clone()]), &uniform, &labels, &w, &cfg).unwrap();
    assert!((o.report.get("ce").unwrap() - (v as f64).ln()).abs() < 1e-12);

    let mut clash = me.clone();
    clash[0] = true;
    clash[1] = true;
    assert!(matches!(
        ttt_sd_loss(&p, &q, &m2(&[mn]), &m2(&[clash]), &uniform, &labels, &w, &cfg),
        Err(Error::MaskOverlap(2))
    ));
}

#[test]
fn sd_loss_matches_three_term_oracle() {
    let cfg = SsimConfig::default();
    let w = LossWeights {
        lambda_diff: 0.7,
        lambda_ssim: 0.3,
        lambda_ce: 1.3,
        ..LossWeights::default()
    };
    let (p, q, mn, me, lg_t, labels, pv, qv, lg, lab) = sd_case(10);
    let (c, v) = (12, 6);
    let o = ttt_sd_loss(&p, &q, &m2(&[mn.clone()]), &m2(&[me.clone()]), &lg_t, &labels, &w, &cfg).unwrap();

    let rows: Vec<usize> = (0..mn.len()).filter(|&i| mn[i]).collect();
    let mut l1 = 0.0;
    for &i in &rows {
        for k in 0..c {
            l1 += (pv[i * c + k] - qv[i * c + k]).abs();
        }
    }
    l1 /= (rows.len() * c) as f64;
    let img = |x: &[f64]| rows.iter().map(|&i| x[i * c..(i + 1) * c].to_vec()).collect::<Vec<_>>();
    let ssim = 1.0 - naive_ssim(&img(&pv), &img(&qv), &cfg);
    let mut ce = 0.0;
    let mut k = 0.0;
    for i in 0..me.len() {
        if me[i] {
            let row = &lg[i * v..(i + 1) * v];
            ce += row.iter().map(|x| x.exp()).sum::<f64>().ln() - row[lab[i] as usize];
            k += 1.0;
        }
    }
    let hand = w.lambda_diff * l1 + w.lambda_ssim * ssim + w.lambda_ce * ce / k;
    assert!((o.report.total - hand).abs() < 1e-9);
    assert!((val(&o.total) - hand).abs() < 1e-9);
}

#[test]
fn gradients_match_finite_differences() {
    let mut r = rng(11);
    let target = randv(&mut r, 8);
    let mask = randmask(&mut r, 8);
    grad_check(&randv(&mut r, 8), &[8], |x| masked_l2(x, &t1(&target), &m1(&mask)).unwrap());

    let (t, c) = (14, 12);
    let y = t3(&randv(&mut r, t * c), 1, t, c);
    let mf = m2(&[(0..t).map(|i| i != 5).collect()]);
    grad_check(&randv(&mut r, t * c), &[1, t, c], |x| l1_mel(x, &y, &mf).unwrap());
    let cfg = SsimConfig::default();
    grad_check(&randv(&mut r, t * c), &[1, t, c], |x| ssim_loss(x, &y, &mf, &cfg).unwrap());

    let labels = Tensor::from_vec(vec![0u32, 2, 1, 3], (1, 4), &DEV).unwrap();
    let cm = m2(&[vec![true, false, true, true]]);
    grad_check(&randv(&mut r, 16), &[1, 4, 4], |x| framewise_ce(x, &labels, &cm).unwrap());

    let durations = [3u32, 5, 2, 6];
    let edit = [false, true, false, false];
    let target = DpTarget {
        durations: &durations,
        edit: &edit,
        target_frames: 4.0,
        domain: DurationDomain::Log,
    };
    let mp = m2(&[vec![true, false, false, true], vec![false, false, true, true]]);
    let w = LossWeights::default();
    let x0: Vec<f64> = (0..8).map(|_| r.random_range(0.5..2.0)).collect();
    grad_check(&x0, &[2, 4], |x| ttt_dp_loss(x, &mp, &target, &w).unwrap().total);
}

#[test]
fn weights_validate() {
    assert!(LossWeights::default().validate().is_ok());
    let bad = LossWeights {
        lambda_ce: -1.0,
        ..LossWeights::default()
    };
    assert!(bad.validate().is_err());
}
