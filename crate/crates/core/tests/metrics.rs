mod common;

use alldepth::depthmap::{DepthMap, Sample, SparseDepthMap, Tag};
use alldepth::metrics::{
    compute_metrics, compute_metrics_capped, evaluate_samples, parse_csv, quartile_means,
    report_csv, report_markdown, spearman, write_error_map, write_sigma_map, EvalConfig,
    MetricAccumulator, MetricSet,
};
use common::*;
use proptest::prelude::*;
use rand::Rng;

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-300)
}

fn assert_metrics_close(a: &MetricSet, b: &MetricSet, tol: f64) {
    assert_eq!(a.n_pixels, b.n_pixels);
    for (x, y) in [
        (a.mae_mm, b.mae_mm),
        (a.rmse_mm, b.rmse_mm),
        (a.imae_inv_km, b.imae_inv_km),
        (a.irmse_inv_km, b.irmse_inv_km),
    ] {
        assert!(close(x, y, tol), "{a:?} vs {b:?}");
    }
}

/// Direct per-pixel oracle over valid ground truth up to `cap`.
fn oracle(d: &[f64], gt: &[f64], valid: &[bool], cap: f64) -> MetricSet {
    let (mut n, mut a, mut s, mut ia, mut is) = (0u64, 0.0, 0.0, 0.0, 0.0);
    for i in 0..d.len() {
        if !valid[i] || gt[i] > cap {
            continue;
        }
        let e_mm = (d[i] - gt[i]) * 1000.0;
        let inv_d = 1.0 / d[i].max(1e-3);
        let ie_km = (inv_d - 1.0 / gt[i]) * 1000.0;
        n += 1;
        a += e_mm.abs();
        s += e_mm * e_mm;
        ia += ie_km.abs();
        is += ie_km * ie_km;
    }
    let nf = n as f64;
    MetricSet {
        mae_mm: a / nf,
        rmse_mm: (s / nf).sqrt(),
        imae_inv_km: ia / nf,
        irmse_inv_km: (is / nf).sqrt(),
        n_pixels: n,
    }
}

fn hconcat(a: &DepthMap, b: &DepthMap) -> DepthMap {
    let (h, wa, wb) = (a.height(), a.width(), b.width());
    let mut values = Vec::new();
    let mut valid = Vec::new();
    for y in 0..h {
        for (m, w) in [(a, wa), (b, wb)] {
            values.extend_from_slice(&m.values()[y * w..(y + 1) * w]);
            valid.extend_from_slice(&m.valid()[y * w..(y + 1) * w]);
        }
    }
    DepthMap::new(h, wa + wb, values, valid).unwrap()
}

fn gt_with_holes(h: usize, w: usize, r: &mut rand_chacha::ChaCha8Rng) -> DepthMap {
    let values: Vec<f64> = (0..h * w).map(|_| r.random_range(0.5..100.0)).collect();
    let valid: Vec<bool> = (0..h * w).map(|_| r.random_bool(0.7)).collect();
    DepthMap::new(h, w, values, valid).unwrap()
}

#[test]
fn matches_per_pixel_oracle() {
    let mut r = rng(1);
    for _ in 0..50 {
        let gt = gt_with_holes(9, 13, &mut r);
        // zeros stand for pixels without a prediction
        let d: Vec<f64> = (0..9 * 13)
            .map(|_| r.random_range(-1.0f64..90.0).max(0.0))
            .collect();
        let dm = DepthMap::from_values(9, 13, d.clone()).unwrap();
        let got = compute_metrics(&dm, &gt).unwrap();
        let want = oracle(&d, gt.values(), gt.valid(), 80.0);
        assert_metrics_close(&got, &want, 1e-12);
    }
}

#[test]
fn two_pixel_hand_calculation() {
    // errors of 1 m and 3 m at 10 m and 20 m ground truth
    let d = DepthMap::dense(1, 2, vec![11.0, 17.0]).unwrap();
    let gt = DepthMap::dense(1, 2, vec![10.0, 20.0]).unwrap();
    let m = compute_metrics(&d, &gt).unwrap();
    assert!((m.mae_mm - 2000.0).abs() < 1e-9);
    assert!((m.rmse_mm - 5.0f64.sqrt() * 1000.0).abs() < 1e-9);
    let (ie1, ie2): (f64, f64) = (1.0 / 11.0 - 0.1, 1.0 / 17.0 - 0.05);
    assert!((m.imae_inv_km - 500.0 * (ie1.abs() + ie2.abs())).abs() < 1e-9);
    assert!((m.irmse_inv_km - 1000.0 * ((ie1 * ie1 + ie2 * ie2) / 2.0).sqrt()).abs() < 1e-9);
}

#[test]
fn inverse_depth_hand_example() {
    // inverse-depth errors of 500 and 50 per km
    let d = DepthMap::dense(1, 2, vec![2.0, 4.0]).unwrap();
    let gt = DepthMap::dense(1, 2, vec![1.0, 5.0]).unwrap();
    let m = compute_metrics(&d, &gt).unwrap();
    assert!((m.mae_mm - 1000.0).abs() < 1e-9);
    assert!((m.rmse_mm - 1000.0).abs() < 1e-9);
    assert!((m.imae_inv_km - 275.0).abs() < 1e-9);
    assert!((m.irmse_inv_km - 126_250.0f64.sqrt()).abs() < 1e-9);
    assert!((m.irmse_inv_km - 355.32).abs() < 0.01);
}

#[test]
fn invalid_ground_truth_pixels_are_ignored() {
    let mut r = rng(10);
    let gt = gt_with_holes(7, 7, &mut r);
    let d = random_depth(7, 7, &mut r);
    let base = compute_metrics(&d, &gt).unwrap();
    let scrambled: Vec<f64> = (0..49)
        .map(|i| {
            if gt.valid()[i] {
                d.values()[i]
            } else {
                r.random_range(0.1..500.0)
            }
        })
        .collect();
    let again = compute_metrics(&DepthMap::dense(7, 7, scrambled).unwrap(), &gt).unwrap();
    assert_eq!(base, again);
}

#[test]
fn ground_truth_beyond_the_cap_is_ignored() {
    let d = DepthMap::dense(1, 2, vec![50.0, 1.0]).unwrap();
    let gt = DepthMap::dense(1, 2, vec![81.0, 90.0]).unwrap();
    assert!(compute_metrics(&d, &gt).is_err());
    let d = DepthMap::dense(1, 2, vec![12.0, 50.0]).unwrap();
    let gt = DepthMap::dense(1, 2, vec![10.0, 81.0]).unwrap();
    assert_eq!(compute_metrics(&d, &gt).unwrap().n_pixels, 1);
    assert_eq!(compute_metrics_capped(&d, &gt, 100.0).unwrap().n_pixels, 2);
}

#[test]
fn non_positive_predictions_stay_finite() {
    let mut acc = MetricAccumulator::default();
    acc.add_pixel(0.0, 5.0);
    acc.add_pixel(-3.0, 5.0);
    let m = acc.finish().unwrap();
    assert!(m.imae_inv_km.is_finite() && m.irmse_inv_km.is_finite());
    assert!((m.imae_inv_km - 1000.0 * (1000.0 - 0.2)).abs() < 1e-6);
}

#[test]
fn scaling_depths_scales_errors_inversely() {
    let mut r = rng(2);
    let gt = DepthMap::dense(6, 6, (0..36).map(|_| r.random_range(1.0..20.0)).collect()).unwrap();
    let d = random_depth(6, 6, &mut r);
    let k = 2.5;
    let scale = |m: &DepthMap| {
        DepthMap::new(
            6,
            6,
            m.values().iter().map(|v| v * k).collect(),
            m.valid().to_vec(),
        )
        .unwrap()
    };
    let base = compute_metrics_capped(&d, &gt, f64::INFINITY).unwrap();
    let scaled = compute_metrics_capped(&scale(&d), &scale(&gt), f64::INFINITY).unwrap();
    assert!(close(scaled.mae_mm, k * base.mae_mm, 1e-12));
    assert!(close(scaled.rmse_mm, k * base.rmse_mm, 1e-12));
    assert!(close(scaled.imae_inv_km, base.imae_inv_km / k, 1e-12));
    assert!(close(scaled.irmse_inv_km, base.irmse_inv_km / k, 1e-12));
}

#[test]
fn accumulation_is_pixel_weighted_and_order_free() {
    let mut r = rng(3);
    let gts: Vec<DepthMap> = (0..3).map(|i| gt_with_holes(5, 3 + i, &mut r)).collect();
    let ds: Vec<DepthMap> = gts
        .iter()
        .map(|g| random_depth(g.height(), g.width(), &mut r))
        .collect();
    let acc = |i: usize| {
        let mut a = MetricAccumulator::default();
        a.add_maps(&ds[i], &gts[i], 80.0).unwrap();
        a
    };
    let mut left = acc(0);
    left.merge(&acc(1));
    left.merge(&acc(2));
    let mut right = acc(2);
    let mut tail = acc(1);
    tail.merge(&acc(0));
    right.merge(&tail);
    assert_metrics_close(&left.finish().unwrap(), &right.finish().unwrap(), 1e-12);

    // merged equals the metric of the concatenated maps
    let concat_d = hconcat(&hconcat(&ds[0], &ds[1]), &ds[2]);
    let concat_gt = hconcat(&hconcat(&gts[0], &gts[1]), &gts[2]);
    assert_metrics_close(
        &left.finish().unwrap(),
        &compute_metrics(&concat_d, &concat_gt).unwrap(),
        1e-12,
    );
}

fn sample_with_gt(gt: &DepthMap, tag: Tag) -> Sample {
    let mut r = rng(0);
    Sample::new(
        random_image(gt.height(), gt.width(), &mut r),
        SparseDepthMap::empty(gt.height(), gt.width()).unwrap(),
        gt.clone(),
        tag,
    )
    .unwrap()
}

#[test]
fn duplicated_samples_do_not_change_the_metrics() {
    let mut r = rng(4);
    let gt = gt_with_holes(8, 8, &mut r);
    let d = random_depth(8, 8, &mut r);
    let s = sample_with_gt(&gt, Tag::Night);
    let cfg = EvalConfig {
        crop: None,
        ..Default::default()
    };
    let once = evaluate_samples("m", [Ok(s.clone())], &cfg, |_| Ok(d.clone())).unwrap();
    let twice = evaluate_samples("m", [Ok(s.clone()), Ok(s)], &cfg, |_| Ok(d.clone())).unwrap();
    let (a, b) = (once.night.unwrap(), twice.night.unwrap());
    assert_eq!(b.metrics.n_pixels, 2 * a.metrics.n_pixels);
    assert_eq!(b.samples, 2);
    for (x, y) in [
        (a.metrics.mae_mm, b.metrics.mae_mm),
        (a.metrics.irmse_inv_km, b.metrics.irmse_inv_km),
    ] {
        assert!(close(x, y, 1e-12));
    }
}

#[test]
fn missing_tags_are_reported_as_absent() {
    let mut r = rng(5);
    let samples: Vec<Sample> = (0..3).map(|_| random_sample(8, 8, &mut r)).collect();
    let cfg = EvalConfig {
        crop: None,
        ..Default::default()
    };
    let report = evaluate_samples("gt", samples.into_iter().map(Ok), &cfg, |s| {
        Ok(s.gt.clone())
    })
    .unwrap();
    assert!(report.night.is_none());
    assert_eq!(report.all, report.day);
    let md = report_markdown(&[report]);
    assert!(md.contains("n/a"));
}

#[test]
fn csv_report_round_trips() {
    let mut r = rng(6);
    let mut samples: Vec<Sample> = (0..4).map(|_| random_sample(8, 8, &mut r)).collect();
    samples[1].tag = Tag::Night;
    let cfg = EvalConfig {
        crop: None,
        ..Default::default()
    };
    let reports: Vec<_> = ["a", "b"]
        .iter()
        .map(|m| {
            evaluate_samples(m, samples.iter().cloned().map(Ok), &cfg, |s| {
                Ok(s.gt.clone())
            })
            .unwrap()
        })
        .collect();
    let text = report_csv(&reports);
    let rows = parse_csv(&text).unwrap();
    assert_eq!(rows.len(), 6);
    let day_a = reports[0].day.as_ref().unwrap().metrics;
    assert_eq!(rows[0].method, "a");
    assert_eq!(rows[0].split, "day");
    assert_eq!(rows[0].mae_mm, day_a.mae_mm);
    assert_eq!(rows[0].n_pixels, day_a.n_pixels);
    assert_eq!(report_csv(&reports), text);
}

#[test]
fn diagnostic_maps_have_the_input_size() {
    let dir = tempfile::tempdir().unwrap();
    let mut r = rng(7);
    let gt = gt_with_holes(12, 20, &mut r);
    let d = random_depth(12, 20, &mut r);
    let err_path = dir.path().join("err.png");
    let sigma_path = dir.path().join("sigma.png");
    write_error_map(&d, &gt, 10.0, &err_path).unwrap();
    write_sigma_map(&random_sigma(12, 20, &mut r), &sigma_path).unwrap();
    for p in [err_path, sigma_path] {
        let decoder = png::Decoder::new(std::io::BufReader::new(std::fs::File::open(p).unwrap()));
        let info = decoder.read_info().unwrap();
        assert_eq!((info.info().width, info.info().height), (20, 12));
    }
}

#[test]
fn rank_statistics() {
    let a = [1.0, 2.0, 3.0, 4.0, 5.0];
    assert!((spearman(&a, &[10.0, 20.0, 30.0, 40.0, 50.0]).unwrap() - 1.0).abs() < 1e-12);
    assert!((spearman(&a, &[5.0, 4.0, 3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
    assert!(spearman(&a, &[1.0; 5]).is_err());
    let q = quartile_means(
        &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0],
        &[1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0],
    )
    .unwrap();
    assert_eq!(q, [1.0, 2.0, 3.0, 4.0]);
}

proptest! {
    #[test]
    fn root_mean_square_dominates_mean_absolute(
        d in prop::collection::vec(0.0f64..120.0, 1..64),
        gt in prop::collection::vec(0.5f64..80.0, 64),
    ) {
        let n = d.len();
        let m = compute_metrics(
            &DepthMap::from_values(1, n, d).unwrap(),
            &DepthMap::dense(1, n, gt[..n].to_vec()).unwrap(),
        ).unwrap();
        prop_assert!(m.rmse_mm >= m.mae_mm * (1.0 - 1e-12));
        prop_assert!(m.irmse_inv_km >= m.imae_inv_km * (1.0 - 1e-12));
        prop_assert!(m.mae_mm >= 0.0 && m.imae_inv_km >= 0.0);
    }
}
