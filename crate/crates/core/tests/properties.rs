use hausloc::dataset::{synthesize, SynthPlan};
use hausloc::metrics::{evaluate, MatchMode, MatchParams};
use hausloc::net::{forward, init_params, transfer_encoder, NetConfig};
use hausloc::postprocess::extract_centers;
use hausloc::synth::{crop_placement, generate_field, random_crops, split_regions, Band, CropSpec, FieldDomainConfig};
use hausloc::train::{adam_step, OptimizerState};
use hausloc::whd::{average_hausdorff, generalized_mean, whd, WhdParams};
use hausloc::{Exec, GridDomain, Point, PointSet, ProbMap, Rect, RgbImage};
use proptest::prelude::*;

fn arb_map(max: usize) -> impl Strategy<Value = ProbMap> {
    (1..=max, 1..=max).prop_flat_map(|(w, h)| {
        proptest::collection::vec(0.0f64..=1.0, w * h)
            .prop_map(move |v| ProbMap::new(GridDomain::new(w, h).unwrap(), v).unwrap())
    })
}

fn arb_points(n: std::ops::Range<usize>) -> impl Strategy<Value = PointSet> {
    proptest::collection::vec((0.0f64..32.0, 0.0f64..32.0), n)
        .prop_map(|v| v.into_iter().map(|(x, y)| Point::new(x, y)).collect())
}

fn cross(o: Point, a: Point, b: Point) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

/// Andrew's monotone chain, counter-clockwise, collinear points dropped.
fn convex_hull(mut pts: Vec<Point>) -> Vec<Point> {
    pts.sort_by(|a, b| a.x.partial_cmp(&b.x).unwrap().then(a.y.partial_cmp(&b.y).unwrap()));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<Point> = Vec::new();
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &Point>> = if pass == 0 { Box::new(pts.iter()) } else { Box::new(pts.iter().rev()) };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

fn inside_hull(hull: &[Point], p: Point, tol: f64) -> bool {
    match hull.len() {
        0 => false,
        1 => p.distance(&hull[0]) <= tol,
        2 => {
            let (a, b) = (hull[0], hull[1]);
            let len = a.distance(&b);
            cross(a, b, p).abs() / len <= tol
                && (p.x - a.x) * (b.x - a.x) + (p.y - a.y) * (b.y - a.y) >= -tol * len
                && (p.x - b.x) * (a.x - b.x) + (p.y - b.y) * (a.y - b.y) >= -tol * len
        }
        n => (0..n).all(|i| {
            let (a, b) = (hull[i], hull[(i + 1) % n]);
            cross(a, b, p) / a.distance(&b) >= -tol
        }),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn whd_is_nonnegative(map in arb_map(12), gt in arb_points(0..5), alpha in -10.0f64..-0.5) {
        let d = map.domain();
        let gt: PointSet = gt.iter().map(|p| Point::new(p.x % d.width as f64, p.y % d.height as f64)).collect();
        let params = WhdParams { alpha, ..WhdParams::default() };
        prop_assert!(whd(&map, &gt, &params).unwrap() >= 0.0);
    }

    #[test]
    fn generalized_mean_tightens_toward_min(v in proptest::collection::btree_set(1u32..100_000, 2..20)) {
        let v: Vec<f64> = v.into_iter().map(|x| x as f64 / 100.0).collect();
        let min = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let gaps: Vec<f64> = [-1.0, -5.0, -20.0]
            .iter()
            .map(|&a| (generalized_mean(&v, a, 1e-6).unwrap() - min).abs())
            .collect();
        prop_assert!(gaps[0] > gaps[1] && gaps[1] > gaps[2], "{:?}", gaps);
    }

    #[test]
    fn average_hausdorff_is_symmetric(a in arb_points(1..10), b in arb_points(1..10)) {
        prop_assert_eq!(average_hausdorff(&a, &b).unwrap(), average_hausdorff(&b, &a).unwrap());
    }

    #[test]
    fn centers_follow_count_and_stay_in_foreground_hull(
        blobs in proptest::collection::vec((2.0f64..29.0, 2.0f64..29.0, 0.6f64..1.0), 1..5),
        count in 0.0f64..6.0,
    ) {
        let dom = GridDomain::square(32).unwrap();
        let map = ProbMap::from_fn(dom, |x, y| {
            let v: f64 = blobs
                .iter()
                .map(|&(bx, by, a)| a * (-((x as f64 - bx).powi(2) + (y as f64 - by).powi(2)) / 4.0).exp())
                .sum();
            v.min(1.0) * 0.98 + 0.01
        })
        .unwrap();
        let threshold = hausloc::postprocess::otsu_threshold(&map);
        let mask = hausloc::postprocess::binarize(&map, threshold.value);
        let fg: Vec<Point> = (0..dom.len()).filter(|&i| mask.bits[i]).map(|i| dom.pixel_point(i)).collect();
        let centers = extract_centers(&map, Some(count));
        let expected = (count.round() as usize).min(fg.len());
        prop_assert_eq!(centers.len(), expected);
        let hull = convex_hull(fg);
        for c in centers.iter() {
            prop_assert!(inside_hull(&hull, *c, 1e-9), "{:?} outside hull", c);
        }
        let by_components = extract_centers(&map, None);
        prop_assert_eq!(by_components.len(), hausloc::postprocess::connected_components(&mask).len());
    }

    #[test]
    fn adam_with_zero_lr_is_identity(seed in 0u64..1000, gscale in -5.0f64..5.0) {
        let cfg = NetConfig { input_size: 16, encoder_blocks: 1, base_channels: 2, channel_cap: 2, count_head_hidden: 2 };
        let p0 = init_params(cfg, seed).unwrap();
        let mut grads = init_params(cfg, seed + 1).unwrap();
        grads.scale(gscale);
        let mut p = p0.clone();
        let mut state = OptimizerState::new(&p);
        for _ in 0..3 {
            adam_step(&mut p, &grads, &mut state, 0.0).unwrap();
        }
        prop_assert_eq!(p, p0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn forward_is_logistic_and_shape_preserving(
        blocks in 1usize..=4,
        base in 1usize..=4,
        seed in 0u64..100,
        shade in 0.0f64..1.0,
    ) {
        let size = 1 << (blocks + 1);
        let cfg = NetConfig { input_size: size, encoder_blocks: blocks, base_channels: base, channel_cap: 2 * base, count_head_hidden: 3 };
        let p = init_params(cfg, seed).unwrap();
        let dom = GridDomain::square(size).unwrap();
        let img = RgbImage::new(dom, [
            (0..dom.len()).map(|i| (i as f64 * 0.37 + shade).fract()).collect(),
            vec![shade; dom.len()],
            (0..dom.len()).map(|i| ((i * 7) % 11) as f64 / 10.0).collect(),
        ]).unwrap();
        let out = forward(&p, &img).unwrap();
        prop_assert_eq!(out.prob_map.domain(), dom);
        prop_assert!(out.prob_map.values().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn transfer_preserves_tensor_layout(blocks in 1usize..=4, base in 1usize..=4, hidden in 1usize..8) {
        let src = init_params(NetConfig { encoder_blocks: blocks, base_channels: base, channel_cap: 4 * base, ..NetConfig::default() }, 1).unwrap();
        let dst = init_params(NetConfig { encoder_blocks: blocks, base_channels: base, channel_cap: 4 * base, count_head_hidden: hidden, ..NetConfig::default() }, 2).unwrap();
        let out = transfer_encoder(&src, &dst).unwrap();
        prop_assert_eq!(out.tensors().len(), dst.tensors().len());
        for (a, b) in out.tensors().iter().zip(dst.tensors()) {
            prop_assert_eq!(&a.name, &b.name);
            prop_assert_eq!(&a.shape, &b.shape);
        }
    }
}

#[test]
fn ground_truth_as_prediction_is_a_perfect_report() {
    for seed in 0..100u64 {
        let plan = SynthPlan { domain: if seed % 2 == 0 { "light-soil" } else { "dark-soil" }.into(), train: 1, val: 1, test: 3, ..SynthPlan::default() };
        let [_, _, test] = synthesize(&plan, seed, Exec::default()).unwrap();
        let preds: Vec<(PointSet, f64)> = test.samples.iter().map(|s| (s.centers.clone(), s.count as f64)).collect();
        for mode in [MatchMode::ManyToOne, MatchMode::OneToOne] {
            let r = evaluate(&test.samples, &preds, &MatchParams { r: 5.0, mode }).unwrap();
            let any_points = test.samples.iter().any(|s| s.count > 0);
            if any_points {
                assert_eq!((r.precision, r.recall, r.f1), (1.0, 1.0, 1.0), "seed {seed}");
            }
            assert_eq!((r.mahd, r.mae, r.rmse), (0.0, 0.0, 0.0), "seed {seed}");
            assert!(r.mape.map_or(true, |m| m == 0.0));
        }
    }
}

#[test]
fn resampled_points_stay_inside_their_crops() {
    for name in ["dark-soil", "light-soil"] {
        let cfg = FieldDomainConfig::preset(name).unwrap();
        let field = generate_field(&cfg, 9).unwrap();
        let region = Rect::new(0, 0, cfg.field_width, cfg.field_height);
        let spec = CropSpec::default();
        for s in random_crops(&field, region, 300, &spec, 4).unwrap() {
            for p in s.centers.iter() {
                assert!(p.x >= -1e-6 && p.y >= -1e-6);
                assert!(p.x < spec.out_size as f64 + 1e-6 && p.y < spec.out_size as f64 + 1e-6);
            }
        }
    }
}

#[test]
fn crops_from_different_bands_never_overlap() {
    let cfg = FieldDomainConfig::preset("dark-soil").unwrap();
    let split = split_regions(cfg.field_width, cfg.field_height, [0.8, 0.1, 0.1], 160).unwrap();
    let rects: Vec<(Band, Rect)> = Band::ALL
        .iter()
        .flat_map(|&b| (0..200).map(move |i| (b, crop_placement(split.get(b), [48, 160], 17, i).rect)))
        .collect();
    for (ba, ra) in &rects {
        assert!(split.get(*ba).contains_rect(ra));
        for (bb, rb) in &rects {
            if ba != bb {
                assert!(!ra.intersects(rb), "{ra:?} in {ba:?} meets {rb:?} in {bb:?}");
            }
        }
    }
}

#[test]
fn crop_sides_are_uniform() {
    let [lo, hi] = CropSpec::default().side_range;
    let bins = hi - lo + 1;
    let region = Rect::new(0, 0, 2048, 512);
    let mut counts = vec![0usize; bins];
    let n = 10_000;
    for i in 0..n {
        let r = crop_placement(region, [lo, hi], 3, i as u64).rect;
        counts[r.width - lo] += 1;
    }
    let expected = n as f64 / bins as f64;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    // 95th percentile of chi-square with 112 degrees of freedom.
    assert_eq!(bins, 113);
    assert!(chi2 < 137.70, "chi-square {chi2:.1}");
}
