//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as part of `cargo test`. The two training criteria (10 and 11) take
//! most of the time; set `HAUSLOC_ACCEPT=1,2,5` to run a subset.

use std::path::Path;
use std::time::Instant;

use hausloc::dataset::{synthesize, write_dataset, SynthPlan};
use hausloc::metrics::{count_errors, evaluate, f1_score, image_ahd, mahd, match_points, precision_recall_f1, MatchParams, MetricsReport};
use hausloc::net::{init_params, loss_and_grad_with, transfer_encoder, ModelParams, NetConfig};
use hausloc::postprocess::{em_gmm, extract_centers, otsu_cut, WeightedPoint, HISTOGRAM_BINS};
use hausloc::train::{predict, train, TrainConfig};
use hausloc::whd::{generalized_mean, whd, whd_gradient, WhdParams};
use hausloc::{Exec, GridDomain, LabeledSample, Point, PointSet, ProbMap};
use hausloc_cli::{cmd_train, TrainArgs, WEIGHTS_FILE};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Training recipe used by the end-to-end criteria.
const DESK_ALPHA: f64 = -9.0;
const DESK_LR: f64 = 5e-4;
const E2E_EPOCHS: usize = 40;
const PRETRAIN_EPOCHS: usize = 20;
const SMALL_EPOCHS: usize = 60;
const FINE_TUNE_LR: f64 = 5e-4;
const TRANSFER_SEEDS: [u64; 3] = [11, 12, 13];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Denominator floor for a central difference of `loss` with step `h`: an
/// entry only counts as wrong when its error exceeds both `tol` relative
/// and the rounding resolution `eps |loss| / h` of the difference itself.
fn fd_floor(loss: f64, h: f64, tol: f64) -> f64 {
    f64::EPSILON * loss.abs() / h / tol
}

fn random_map(rng: &mut ChaCha8Rng, w: usize, h: usize, lo: f64, hi: f64) -> ProbMap {
    let dom = GridDomain::new(w, h).unwrap();
    let values = (0..dom.len()).map(|_| rng.gen_range(lo..hi)).collect();
    ProbMap::new(dom, values).unwrap()
}

fn random_points(rng: &mut ChaCha8Rng, n: usize, w: usize, h: usize) -> PointSet {
    (0..n)
        .map(|_| Point::new(rng.gen_range(0.0..(w - 1) as f64), rng.gen_range(0.0..(h - 1) as f64)))
        .collect()
}

fn c1_whd_gradient() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let params = WhdParams::default();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let (w, ht) = (rng.gen_range(2..=16), rng.gen_range(2..=16));
        let map = random_map(&mut rng, w, ht, 0.05, 0.95);
        let k = rng.gen_range(1..=4);
        let gt = random_points(&mut rng, k, w, ht);
        let (loss, grad) = whd_gradient(&map, &gt, &params).unwrap();
        let floor = fd_floor(loss, h, 1e-4);
        for i in 0..map.values().len() {
            let mut v = map.values().to_vec();
            v[i] += h;
            let up = whd(&ProbMap::new(map.domain(), v.clone()).unwrap(), &gt, &params).unwrap();
            v[i] -= 2.0 * h;
            let down = whd(&ProbMap::new(map.domain(), v).unwrap(), &gt, &params).unwrap();
            let fd = (up - down) / (2.0 * h);
            worst = worst.max(rel_err(fd, grad.values[i], floor));
        }
    }
    let secs = t.elapsed().as_secs_f64();
    outcome(worst < 1e-4 && secs < 10.0, format!("max rel err {worst:.2e}, {secs:.2} s"))
}

/// Direct summation of both terms with plain loops.
fn whd_oracle(map: &ProbMap, gt: &PointSet, alpha: f64, eps: f64, floor: f64) -> f64 {
    let dom = map.domain();
    let d_max = ((dom.width * dom.width + dom.height * dom.height) as f64).sqrt();
    let mut s = 0.0;
    let mut t1 = 0.0;
    for i in 0..dom.height {
        for j in 0..dom.width {
            let p = map.get(j, i);
            s += p;
            let mut m = f64::INFINITY;
            for y in gt.iter() {
                let d = ((j as f64 - y.x).powi(2) + (i as f64 - y.y).powi(2)).sqrt();
                m = m.min(d);
            }
            t1 += p * m;
        }
    }
    t1 /= s + eps;
    let mut t2 = 0.0;
    for y in gt.iter() {
        let mut acc = 0.0;
        for i in 0..dom.height {
            for j in 0..dom.width {
                let p = map.get(j, i);
                let d = ((j as f64 - y.x).powi(2) + (i as f64 - y.y).powi(2)).sqrt();
                let v: f64 = (p * d + (1.0 - p) * d_max).max(floor);
                acc += v.powf(alpha);
            }
        }
        t2 += (acc / dom.len() as f64).powf(1.0 / alpha);
    }
    t1 + t2 / gt.len() as f64
}

fn c2_whd_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (w, h) = (rng.gen_range(1..=12), rng.gen_range(1..=12));
        let map = random_map(&mut rng, w, h, 0.0, 1.0);
        let k = rng.gen_range(1..=5);
        let gt: PointSet = (0..k)
            .map(|_| Point::new(rng.gen_range(0.0..w as f64), rng.gen_range(0.0..h as f64)))
            .collect();
        let alpha = [-1.0, -2.0, -5.0][rng.gen_range(0..3)];
        let params = WhdParams { alpha, ..WhdParams::default() };
        let ours = whd(&map, &gt, &params).unwrap();
        let oracle = whd_oracle(&map, &gt, alpha, params.epsilon, params.value_floor);
        worst = worst.max(rel_err(ours, oracle, 1e-300));
    }
    outcome(worst < 1e-12, format!("max rel diff {worst:.2e}"))
}

fn c3_alpha_limit() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst: f64 = 0.0;
    let mut within_bound = true;
    for _ in 0..100 {
        let n = rng.gen_range(2..=20);
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..50.0)).collect();
        let min = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let m = generalized_mean(&v, -20.0, 1e-6).unwrap();
        worst = worst.max((m - min).abs() / min);
        within_bound &= min <= m && m <= min * (n as f64).powf(1.0 / 20.0) * (1.0 + 1e-12);
    }
    outcome(
        worst <= 0.05,
        format!(
            "max deviation from min {:.2}% (min <= M <= n^(1/20) min on every list: {within_bound})",
            100.0 * worst
        ),
    )
}

/// Initial weights with small random biases, so that no unit sits exactly on
/// a rectifier kink where the finite difference is one-sided.
fn generic_params(config: NetConfig, seed: u64) -> ModelParams {
    let mut p = init_params(config, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb1a5);
    for t in p.tensors_mut() {
        if t.name.ends_with(".bias") {
            t.data.iter_mut().for_each(|b| *b = rng.gen_range(-0.1..0.1));
        }
    }
    p
}

fn random_sample(rng: &mut ChaCha8Rng, size: usize, k: usize) -> LabeledSample {
    let dom = GridDomain::square(size).unwrap();
    let mut ch = || (0..dom.len()).map(|_| rng.gen_range(0.0..1.0)).collect::<Vec<f64>>();
    let image = hausloc::RgbImage::new(dom, [ch(), ch(), ch()]).unwrap();
    let centers = random_points(rng, k, size, size);
    LabeledSample::new(image, centers).unwrap()
}

fn c4_network_gradient() -> Outcome {
    let t = Instant::now();
    let cfg = NetConfig {
        input_size: 16,
        encoder_blocks: 2,
        base_channels: 2,
        channel_cap: 4,
        count_head_hidden: 4,
    };
    let whd = WhdParams::default();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
        let p = generic_params(cfg, seed);
        let batch = vec![random_sample(&mut rng, 16, 2), random_sample(&mut rng, 16, 3)];
        let loss = |q: &ModelParams| loss_and_grad_with(q, &batch, &whd, 1.0, Exec::Sequential).unwrap();
        let (l0, g) = loss(&p);
        let floor = fd_floor(l0, h, 1e-3);
        for ti in 0..p.tensors().len() {
            for k in 0..p.tensors()[ti].data.len() {
                let mut q = p.clone();
                q.tensors_mut()[ti].data[k] += h;
                let up = loss(&q).0;
                q.tensors_mut()[ti].data[k] -= 2.0 * h;
                let down = loss(&q).0;
                let fd = (up - down) / (2.0 * h);
                worst = worst.max(rel_err(fd, g.tensors()[ti].data[k], floor));
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    outcome(worst < 1e-3 && secs < 300.0, format!("max rel err {worst:.2e}, {secs:.1} s"))
}

fn c5_free_map() -> Outcome {
    let dom = GridDomain::square(32).unwrap();
    let gt: PointSet = [(5.0, 7.0), (20.0, 13.0), (15.0, 26.0)]
        .into_iter()
        .map(|(x, y)| Point::new(x, y))
        .collect();
    let params = WhdParams::default();
    let mut map = ProbMap::filled(dom, 0.5).unwrap();
    let initial = whd(&map, &gt, &params).unwrap();
    let step = 10.0;
    for _ in 0..500 {
        let (_, g) = whd_gradient(&map, &gt, &params).unwrap();
        let next = map
            .values()
            .iter()
            .zip(&g.values)
            .map(|(p, d)| (p - step * d).clamp(0.0, 1.0))
            .collect();
        map = ProbMap::new(dom, next).unwrap();
    }
    let last = whd(&map, &gt, &params).unwrap();
    let reduction = 1.0 - last / initial;
    let centers = extract_centers(&map, Some(3.0));
    let m = match_points(&centers, &gt, &MatchParams { r: 3.0, ..MatchParams::default() });
    let (_, _, f1) = precision_recall_f1(&m);
    outcome(
        reduction >= 0.9 && f1 == 1.0,
        format!("loss {initial:.3} -> {last:.4} ({:.2}% reduction), F1 {f1:.3}", 100.0 * reduction),
    )
}

/// Exhaustive between-class variance over every cut, from bin means.
fn otsu_oracle(hist: &[u64; HISTOGRAM_BINS]) -> Option<usize> {
    let n: f64 = hist.iter().map(|&c| c as f64).sum();
    let mut best: Option<(usize, f64)> = None;
    for k in 1..HISTOGRAM_BINS {
        let (lo, hi) = hist.split_at(k);
        let w0: f64 = lo.iter().map(|&c| c as f64).sum::<f64>() / n;
        let w1 = 1.0 - w0;
        let c0: u64 = lo.iter().sum();
        let c1: u64 = hi.iter().sum();
        if c0 == 0 || c1 == 0 {
            continue;
        }
        let mu0 = lo.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum::<f64>() / c0 as f64;
        let mu1 = hi.iter().enumerate().map(|(i, &c)| (i + k) as f64 * c as f64).sum::<f64>() / c1 as f64;
        let var = w0 * w1 * (mu0 - mu1).powi(2);
        if best.map_or(true, |(_, b)| var > b) {
            best = Some((k, var));
        }
    }
    best.map(|(k, _)| k)
}

fn c6_otsu() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let mut mismatches = 0;
    for _ in 0..200 {
        let mut hist = [0u64; HISTOGRAM_BINS];
        let occupied = rng.gen_range(2..=HISTOGRAM_BINS);
        for _ in 0..occupied {
            hist[rng.gen_range(0..HISTOGRAM_BINS)] += rng.gen_range(1..5000);
        }
        if otsu_cut(&hist) != otsu_oracle(&hist) {
            mismatches += 1;
        }
    }
    outcome(mismatches == 0, format!("{mismatches}/200 mismatches"))
}

fn c7_em() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let mut worst_drop: f64 = 0.0;
    for run in 0..100u64 {
        let k = rng.gen_range(1..=4);
        let mut pts = Vec::new();
        for _ in 0..k {
            let (cx, cy) = (rng.gen_range(5.0..59.0), rng.gen_range(5.0..59.0));
            for _ in 0..rng.gen_range(10..40) {
                pts.push(WeightedPoint {
                    x: (cx + rng.gen_range(-4.0f64..4.0)).round(),
                    y: (cy + rng.gen_range(-4.0f64..4.0)).round(),
                    w: rng.gen_range(0.3..1.0),
                });
            }
        }
        let state = em_gmm(&pts, k, run, 100, 0.0).unwrap();
        for w in state.trace.windows(2) {
            worst_drop = worst_drop.max(w[0] - w[1]);
        }
    }
    let mut worst_centroid: f64 = 0.0;
    for run in 0..20u64 {
        let pts: Vec<WeightedPoint> = (0..rng.gen_range(5..60))
            .map(|_| WeightedPoint {
                x: rng.gen_range(0.0..64.0),
                y: rng.gen_range(0.0..64.0),
                w: rng.gen_range(0.1..1.0),
            })
            .collect();
        let sw: f64 = pts.iter().map(|p| p.w).sum();
        let cx = pts.iter().map(|p| p.w * p.x).sum::<f64>() / sw;
        let cy = pts.iter().map(|p| p.w * p.y).sum::<f64>() / sw;
        let m = em_gmm(&pts, 1, run, 100, 1e-12).unwrap().means[0];
        worst_centroid = worst_centroid.max((m.x - cx).abs().max((m.y - cy).abs()));
    }
    outcome(
        worst_drop <= 1e-9 && worst_centroid <= 1e-9,
        format!("max log-likelihood drop {worst_drop:.2e}, K=1 centroid error {worst_centroid:.2e}"),
    )
}

fn c8_f1_convention() -> Outcome {
    let a = f1_score(0.826, 0.989);
    let b = f1_score(0.141, 0.0049);
    outcome(
        (a - 0.900).abs() <= 0.001 && (b - 0.0094).abs() <= 0.0005,
        format!("F1(0.826, 0.989) = {a:.4}, F1(0.141, 0.0049) = {b:.5}"),
    )
}

fn c9_metric_oracles() -> Outcome {
    let mut ok = true;
    let mut close = |got: f64, want: f64| ok &= rel_err(got, want, 1e-300) < 1e-9;
    let e = count_errors(&[1.0, 2.0, 4.0, 0.0], &[2.0, 2.0, 1.0, 1.0]).unwrap();
    close(e.mae, 5.0 / 4.0);
    close(e.rmse, (11.0f64 / 4.0).sqrt());
    close(e.mape.unwrap(), 100.0 * (1.0 + 0.0 + 0.75) / 3.0);
    let p = |v: &[(f64, f64)]| v.iter().map(|&(x, y)| Point::new(x, y)).collect::<PointSet>();
    // (0,0) vs (3,4): 5 each way.
    close(image_ahd(&p(&[(0.0, 0.0)]), &p(&[(3.0, 4.0)]), 90.0), 10.0);
    // {(0,0),(6,8)} vs {(0,0)}: 5 + 0.
    close(image_ahd(&p(&[(0.0, 0.0), (6.0, 8.0)]), &p(&[(0.0, 0.0)]), 90.0), 5.0);
    close(image_ahd(&PointSet::empty(), &p(&[(1.0, 1.0)]), 90.0), 90.0);
    let pairs = vec![
        (p(&[(0.0, 0.0)]), p(&[(3.0, 4.0)])),
        (p(&[(0.0, 0.0), (6.0, 8.0)]), p(&[(0.0, 0.0)])),
        (PointSet::empty(), p(&[(1.0, 1.0)])),
    ];
    close(mahd(&pairs, 90.0).unwrap(), (10.0 + 5.0 + 90.0) / 3.0);

    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let mut ordered = true;
    for _ in 0..1000 {
        let n = rng.gen_range(1..50);
        let t: Vec<f64> = (0..n).map(|_| rng.gen_range(0..30) as f64).collect();
        let est: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..30.0)).collect();
        let e = count_errors(&t, &est).unwrap();
        ordered &= e.rmse >= e.mae;
    }
    outcome(ok && ordered, format!("hand oracles {}, rmse >= mae on 1000 vectors: {ordered}", if ok { "match" } else { "differ" }))
}

fn desk_config(epochs: usize, lr: f64, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig {
        learning_rate: lr,
        epochs,
        seed,
        ..TrainConfig::default()
    };
    cfg.whd_params.alpha = DESK_ALPHA;
    cfg
}

fn score(params: &ModelParams, test: &[LabeledSample]) -> MetricsReport {
    let preds: Vec<(PointSet, f64)> = test
        .iter()
        .map(|s| {
            let c = predict(params, &s.image).unwrap().centers;
            let n = c.len() as f64;
            (c, n)
        })
        .collect();
    evaluate(test, &preds, &MatchParams::default()).unwrap()
}

fn plan(domain: &str, train: usize, val: usize, test: usize) -> SynthPlan {
    SynthPlan {
        domain: domain.into(),
        train,
        val,
        test,
        ..SynthPlan::default()
    }
}

fn c10_end_to_end() -> Outcome {
    let t = Instant::now();
    let [tr, va, te] = synthesize(&plan("light-soil", 500, 100, 100), 1, Exec::default()).unwrap();
    let p0 = init_params(NetConfig::default(), 0).unwrap();
    let (best, hist) = train(&p0, &tr.samples, &va.samples, &desk_config(E2E_EPOCHS, DESK_LR, 0)).unwrap();
    let r = score(&best, &te.samples);
    let secs = t.elapsed().as_secs_f64();
    outcome(
        r.f1 >= 0.90 && r.mae <= 1.0 && secs <= 1200.0,
        format!(
            "F1 {:.3}, MAE {:.2}, best epoch {}/{E2E_EPOCHS}, {:.1} min",
            r.f1,
            r.mae,
            hist.best_epoch().unwrap_or(0),
            secs / 60.0
        ),
    )
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}

fn c11_transfer() -> Outcome {
    let t = Instant::now();
    let [dark_tr, dark_va, _] = synthesize(&plan("dark-soil", 1000, 100, 10), 2, Exec::default()).unwrap();
    let [light_tr, light_va, light_te] = synthesize(&plan("light-soil", 50, 50, 100), 3, Exec::default()).unwrap();
    let cfg = NetConfig::default();
    let p0 = init_params(cfg, 100).unwrap();
    let (pretrained, _) = train(&p0, &dark_tr.samples, &dark_va.samples, &desk_config(PRETRAIN_EPOCHS, DESK_LR, 100)).unwrap();
    let (mut ft, mut sc) = (Vec::new(), Vec::new());
    for seed in TRANSFER_SEEDS {
        let fresh = init_params(cfg, seed).unwrap();
        let start = transfer_encoder(&pretrained, &fresh).unwrap();
        let (a, _) = train(&start, &light_tr.samples, &light_va.samples, &desk_config(SMALL_EPOCHS, FINE_TUNE_LR, seed)).unwrap();
        let (b, _) = train(&fresh, &light_tr.samples, &light_va.samples, &desk_config(SMALL_EPOCHS, DESK_LR, seed)).unwrap();
        ft.push(score(&a, &light_te.samples));
        sc.push(score(&b, &light_te.samples));
    }
    let f1 = |v: &[MetricsReport]| median(v.iter().map(|r| r.f1).collect());
    let mae = |v: &[MetricsReport]| median(v.iter().map(|r| r.mae).collect());
    let secs = t.elapsed().as_secs_f64();
    outcome(
        f1(&ft) >= f1(&sc) && mae(&ft) <= mae(&sc) && secs <= 2700.0,
        format!(
            "median F1 fine-tuned {:.3} vs scratch {:.3}, median MAE {:.2} vs {:.2}, {:.1} min",
            f1(&ft),
            f1(&sc),
            mae(&ft),
            mae(&sc),
            secs / 60.0
        ),
    )
}

fn run_train(data: &Path, out: &Path) -> Vec<u8> {
    let args = TrainArgs {
        train_dir: data.join("train"),
        val_dir: data.join("val"),
        config: desk_config(2, DESK_LR, 5),
        net: NetConfig {
            base_channels: 4,
            channel_cap: 8,
            ..NetConfig::default()
        },
        out: out.to_path_buf(),
    };
    cmd_train(&args).unwrap();
    std::fs::read(out.join(WEIGHTS_FILE)).unwrap()
}

fn c12_reproducibility() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let [tr, va, _] = synthesize(&plan("light-soil", 32, 8, 1), 4, Exec::default()).unwrap();
    write_dataset(&tr, dir.path().join("data/train")).unwrap();
    write_dataset(&va, dir.path().join("data/val")).unwrap();
    let a = run_train(&dir.path().join("data"), &dir.path().join("a"));
    let b = run_train(&dir.path().join("data"), &dir.path().join("b"));
    outcome(a == b, format!("{} bytes, identical: {}", a.len(), a == b))
}

type Criterion = (usize, &'static str, fn() -> Outcome);

const CRITERIA: [Criterion; 12] = [
    (1, "WHD gradient vs finite differences", c1_whd_gradient),
    (2, "WHD vs direct-summation oracle", c2_whd_oracle),
    (3, "generalized mean at alpha=-20 near minimum", c3_alpha_limit),
    (4, "network gradient vs finite differences", c4_network_gradient),
    (5, "free-map optimization", c5_free_map),
    (6, "Otsu vs exhaustive search", c6_otsu),
    (7, "EM monotonicity and K=1 centroid", c7_em),
    (8, "F1 factor-2 convention", c8_f1_convention),
    (9, "metric hand oracles", c9_metric_oracles),
    (10, "end-to-end light-soil training", c10_end_to_end),
    (11, "encoder transfer vs scratch", c11_transfer),
    (12, "byte-identical retraining", c12_reproducibility),
];

fn selected() -> Option<Vec<usize>> {
    let v = std::env::var("HAUSLOC_ACCEPT").ok()?;
    Some(v.split(',').filter_map(|s| s.trim().parse().ok()).collect())
}

fn main() {
    let only = selected();
    let mut failed = 0;
    for (id, name, f) in CRITERIA {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let o = f();
        if !o.pass {
            failed += 1;
        }
        println!("[{}] {id:>2}. {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
