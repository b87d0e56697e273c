//! Brute-force references shared by the integration tests.
#![allow(dead_code)]

use mepoi_core::geo::{haversine_km, haversine_m, point_in_polygon, LatLon};
use mepoi_core::geodata::{GpsPoint, World};
use mepoi_core::pipeline::StayParams;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const T: usize = 168;

/// Scans every `(start, end)` window: a window is admissible when every
/// point lies within the radius of its first point. Starting at the
/// earliest unconsumed point, the longest admissible window is taken if
/// it lasts long enough.
pub fn exhaustive_staypoints(pts: &[GpsPoint], params: StayParams) -> Vec<(i64, i64, f64, f64)> {
    let n = pts.len();
    let admissible = |i: usize, j: usize| {
        (i..=j).all(|k| haversine_m(pts[i].location(), pts[k].location()) <= params.radius_m)
    };
    let mut out = Vec::new();
    let mut i = 0;
    while i < n {
        let best = (i..n).filter(|&j| admissible(i, j)).max().unwrap();
        if pts[best].timestamp - pts[i].timestamp >= params.min_duration_s {
            let w = &pts[i..=best];
            let k = w.len() as f64;
            out.push((
                pts[i].timestamp,
                pts[best].timestamp,
                w.iter().map(|p| p.lat).sum::<f64>() / k,
                w.iter().map(|p| p.lon).sum::<f64>() / k,
            ));
            i = best + 1;
        } else {
            i += 1;
        }
    }
    out
}

pub fn linear_scan(world: &World, p: LatLon, snap_m: f64) -> Option<u32> {
    let poly = world
        .pois
        .iter()
        .filter(|q| q.polygon.as_ref().is_some_and(|r| point_in_polygon(p, r)))
        .map(|q| q.id)
        .min();
    poly.or_else(|| {
        world
            .pois
            .iter()
            .map(|q| (haversine_m(p, q.location), q.id))
            .filter(|&(d, _)| d <= snap_m)
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
            .map(|(_, id)| id)
    })
}

pub fn naive_prior(at: LatLon, anchors: &[(LatLon, Vec<f64>)], bandwidths: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; T];
    for &sigma in bandwidths {
        let raw: Vec<f64> = anchors
            .iter()
            .map(|(l, _)| {
                let d = haversine_km(at, *l);
                (-d * d / (2.0 * sigma * sigma)).exp()
            })
            .collect();
        let s: f64 = raw.iter().sum();
        for (w, (_, r)) in raw.iter().zip(anchors) {
            for t in 0..T {
                out[t] += w / s * r[t] / bandwidths.len() as f64;
            }
        }
    }
    let s: f64 = out.iter().sum();
    out.into_iter().map(|x| x / s).collect()
}

pub fn random_distribution(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let raw: Vec<f64> = (0..T).map(|_| (2.0 * rng.random::<f64>()).exp()).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / s).collect()
}

/// Fraction of (positive, negative) pairs ranked correctly, ties count half.
pub fn pairwise_auroc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut num, mut pairs) = (0.0, 0.0);
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] && !labels[j] {
                pairs += 1.0;
                num += if scores[i] > scores[j] {
                    1.0
                } else if scores[i] == scores[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / pairs
}

/// Average precision from a sweep over every distinct score used as a
/// threshold, highest first.
pub fn sweep_auprc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let positives = labels.iter().filter(|&&l| l).count() as f64;
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for t in thresholds {
        let tp = scores.iter().zip(labels).filter(|&(&s, &l)| s >= t && l).count() as f64;
        let predicted = scores.iter().filter(|&&s| s >= t).count() as f64;
        let recall = tp / positives;
        ap += (recall - prev_recall) * tp / predicted;
        prev_recall = recall;
    }
    ap
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}
