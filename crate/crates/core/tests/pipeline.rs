use std::collections::BTreeMap;

use mepoi_core::geo::{BBox, LatLon};
use mepoi_core::geodata::{generate_world, GpsPoint, GroundTruth, Poi, WeekMask, World, WorldConfig};
use mepoi_core::pipeline::*;
use mepoi_core::timebin::{DEFAULT_START, HOURS_PER_WEEK};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;
use common::{exhaustive_staypoints, linear_scan};

const BASE: LatLon = LatLon { lat: 29.76, lon: -95.37 };

fn pt(device_id: u32, timestamp: i64, p: LatLon) -> GpsPoint {
    GpsPoint { device_id, timestamp, lat: p.lat, lon: p.lon }
}

fn poi(id: u32, location: LatLon, polygon: Option<Vec<LatLon>>) -> Poi {
    Poi {
        id,
        location,
        polygon,
        category: "cafe".into(),
        name: format!("poi {id}"),
        address: String::new(),
        neighborhood: 0,
        truth: GroundTruth {
            open_hours: WeekMask(vec![true; HOURS_PER_WEEK]),
            price_level: 0,
            visit_intent: 0,
            busyness: vec![0.0; HOURS_PER_WEEK],
            closed: false,
            closed_at: None,
            usage_profile: vec![1.0 / HOURS_PER_WEEK as f64; HOURS_PER_WEEK],
            popularity: 1.0,
            dwell_median_min: 30.0,
        },
    }
}

fn square(c: LatLon, half_m: f64) -> Vec<LatLon> {
    vec![
        c.offset_km(-half_m / 1e3, -half_m / 1e3),
        c.offset_km(half_m / 1e3, -half_m / 1e3),
        c.offset_km(half_m / 1e3, half_m / 1e3),
        c.offset_km(-half_m / 1e3, half_m / 1e3),
    ]
}

/// A trace alternating between planted stays and travel legs.
fn planted_trace(rng: &mut ChaCha8Rng, stays: usize, n: usize) -> Vec<GpsPoint> {
    let per = n / (2 * stays);
    let mut t = DEFAULT_START;
    let mut at = BASE;
    let mut pts = Vec::new();
    for s in 0..stays {
        for _ in 0..per {
            let j = at.offset_km(rng.random_range(-0.02..0.02), rng.random_range(-0.02..0.02));
            pts.push(pt(1, t, j));
            t += 60;
        }
        let target = BASE.offset_km(2.0 * (s + 1) as f64, 1.5 * (s % 2) as f64);
        for k in 0..per {
            let f = (k + 1) as f64 / (per + 1) as f64;
            let p = LatLon::new(at.lat + f * (target.lat - at.lat), at.lon + f * (target.lon - at.lon));
            pts.push(pt(1, t, p));
            t += 60;
        }
        at = target;
    }
    pts
}

#[test]
fn three_points_six_minutes_make_one_staypoint() {
    let pts: Vec<GpsPoint> = (0..3).map(|k| pt(1, DEFAULT_START + 180 * k, BASE)).collect();
    let s = detect_staypoints(&pts, StayParams::default()).unwrap();
    assert_eq!(s.len(), 1);
    assert!((s[0].lat - BASE.lat).abs() < 1e-12 && (s[0].lon - BASE.lon).abs() < 1e-12);
    assert_eq!((s[0].arrival, s[0].departure), (DEFAULT_START, DEFAULT_START + 360));
}

#[test]
fn points_far_apart_make_no_staypoint() {
    let pts = vec![pt(1, DEFAULT_START, BASE), pt(1, DEFAULT_START + 900, BASE.offset_km(0.4, 0.0))];
    assert!(detect_staypoints(&pts, StayParams::default()).unwrap().is_empty());
}

#[test]
fn planted_stays_match_exhaustive_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let pts = planted_trace(&mut rng, 4, 200);
    let params = StayParams::default();
    let fast = detect_staypoints(&pts, params).unwrap();
    let oracle = exhaustive_staypoints(&pts, params);
    assert_eq!(fast.len(), 4);
    assert_eq!(fast.len(), oracle.len());
    for (a, b) in fast.iter().zip(&oracle) {
        assert_eq!((a.arrival, a.departure), (b.0, b.1));
        assert!((a.lat - b.2).abs() < 1e-12 && (a.lon - b.3).abs() < 1e-12);
    }
}

#[test]
fn random_walks_match_exhaustive_scan() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(2..500);
        let mut at = BASE;
        let mut t = DEFAULT_START;
        let mut pts = Vec::with_capacity(n);
        for _ in 0..n {
            let step = if rng.random_bool(0.2) { 0.3 } else { 0.03 };
            at = at.offset_km(rng.random_range(-step..step), rng.random_range(-step..step));
            t += rng.random_range(20..200);
            pts.push(pt(3, t, at));
        }
        let params = StayParams { radius_m: 80.0, min_duration_s: 240 };
        let fast = detect_staypoints(&pts, params).unwrap();
        let oracle = exhaustive_staypoints(&pts, params);
        let fast: Vec<(i64, i64)> = fast.iter().map(|s| (s.arrival, s.departure)).collect();
        let oracle: Vec<(i64, i64)> = oracle.iter().map(|s| (s.0, s.1)).collect();
        assert_eq!(fast, oracle, "seed {seed}");
    }
}

#[test]
fn unsorted_traces_are_rejected() {
    let pts = vec![pt(1, 10, BASE), pt(1, 5, BASE)];
    assert!(detect_staypoints(&pts, StayParams::default()).is_err());
    let pts = vec![pt(1, 10, BASE), pt(2, 11, BASE), pt(1, 12, BASE)];
    assert!(detect_staypoints(&pts, StayParams::default()).is_err());
}

#[test]
fn polygon_takes_precedence_over_nearer_centroid() {
    let a_center = BASE.offset_km(0.06, 0.0);
    let world = World {
        pois: vec![poi(1, a_center, Some(square(a_center, 70.0))), poi(2, BASE.offset_km(-0.01, 0.0), None)],
    };
    let index = PoiIndex::new(&world, 100.0);
    assert_eq!(index.attribute(BASE), Some(1));
}

#[test]
fn far_staypoint_is_unknown() {
    let world = World {
        pois: vec![poi(1, BASE.offset_km(0.15, 0.0), None), poi(2, BASE.offset_km(0.0, -0.15), None)],
    };
    assert_eq!(PoiIndex::new(&world, 100.0).attribute(BASE), None);
}

#[test]
fn attribution_matches_linear_scan() {
    let cfg = WorldConfig { poi_count: 300, device_count: 1, seed: 5, ..WorldConfig::default() };
    let world = generate_world(&cfg).unwrap();
    let index = PoiIndex::new(&world, 100.0);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut hits = 0;
    for k in 0..400 {
        // Half near a POI, half anywhere in the box.
        let p = if k % 2 == 0 {
            let q = &world.pois[rng.random_range(0..world.len())];
            q.location.offset_km(rng.random_range(-0.12..0.12), rng.random_range(-0.12..0.12))
        } else {
            LatLon::new(
                rng.random_range(cfg.bbox.min_lat..cfg.bbox.max_lat),
                rng.random_range(cfg.bbox.min_lon..cfg.bbox.max_lon),
            )
        };
        let expect = linear_scan(&world, p, 100.0);
        hits += expect.is_some() as usize;
        assert_eq!(index.attribute(p), expect, "point {p:?}");
    }
    assert!(hits > 100);
}

fn visit(device_id: u32, poi_id: Option<u32>, t_a: i64) -> Visit {
    Visit { device_id, poi_id, t_a, t_d: t_a + 600, lat: BASE.lat, lon: BASE.lon }
}

#[test]
fn sequence_length_boundary() {
    let mut v: Vec<Visit> = (0..4).map(|k| visit(1, Some(1), DEFAULT_START + 3600 * k)).collect();
    v.extend((0..5).map(|k| visit(2, Some(1), DEFAULT_START + 3600 * k)));
    let seqs = build_sequences(&v, 5);
    assert_eq!(seqs.len(), 1);
    assert_eq!(seqs[0].device_id, 2);
}

#[test]
fn sequences_are_time_ordered() {
    let v = vec![
        visit(1, Some(2), DEFAULT_START + 7200),
        visit(1, None, DEFAULT_START),
        visit(1, Some(1), DEFAULT_START + 3600),
    ];
    let seqs = build_sequences(&v, 1);
    let order: Vec<Option<u32>> = seqs[0].visits.iter().map(|v| v.poi_id).collect();
    assert_eq!(order, vec![None, Some(1), Some(2)]);
}

#[test]
fn counts_match_group_by() {
    let world = World { pois: (1..=20).map(|id| poi(id, BASE.offset_km(id as f64, 0.0), None)).collect() };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut visits = Vec::new();
    for d in 0..30u32 {
        for k in 0..rng.random_range(3..12) {
            let p = if rng.random_bool(0.1) { None } else { Some(rng.random_range(1..=20)) };
            visits.push(visit(d, p, DEFAULT_START + 5000 * k));
        }
    }
    let cfg = PreprocessConfig { anchor_threshold: 1, ..PreprocessConfig::default() };
    let seqs = build_sequences(&visits, cfg.min_sequence_len);
    let kept: std::collections::HashSet<u32> = seqs.iter().map(|s| s.device_id).collect();
    let pre = from_sequences(&world, seqs, &cfg).unwrap();
    let mut oracle: BTreeMap<u32, usize> = (1..=20).map(|id| (id, 0)).collect();
    for v in visits.iter().filter(|v| kept.contains(&v.device_id)) {
        if let Some(id) = v.poi_id {
            *oracle.get_mut(&id).unwrap() += 1;
        }
    }
    assert_eq!(pre.counts, oracle);
    for d in pre.distributions.values() {
        assert!((d.bins.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn normalization_conventions() {
    let b = BBox::houston();
    let n = Normalizer::new(b);
    assert_eq!(n.location(LatLon::new(b.min_lat, b.min_lon)), [0.0, 0.0]);
    assert_eq!(n.location(LatLon::new(b.max_lat, b.max_lon)), [1.0, 1.0]);
    assert_eq!(Normalizer::time(DEFAULT_START), (0.0, 0.0));
    assert_eq!(Normalizer::time(DEFAULT_START + 12 * 3600).0, 0.5);
}

#[test]
fn histogram_by_hand() {
    let h = |x: i64| DEFAULT_START + x * 3600 + 120;
    let d = empirical_distribution(&[h(9), h(9), h(17)]).unwrap();
    assert!((d.bins[9] - 2.0 / 3.0).abs() < 1e-15);
    assert!((d.bins[17] - 1.0 / 3.0).abs() < 1e-15);
    let one = empirical_distribution(&[h(30)]).unwrap();
    assert_eq!(one.bins.iter().filter(|&&b| b == 1.0).count(), 1);
    assert!(empirical_distribution(&[]).is_err());
}

#[test]
fn partition_by_threshold() {
    let counts = BTreeMap::from([(1, 120), (2, 40)]);
    let p = partition_pois(&counts, PartitionMode::Threshold(50)).unwrap();
    assert_eq!(p.anchors.into_iter().collect::<Vec<_>>(), vec![1]);
    assert_eq!(p.sparse.into_iter().collect::<Vec<_>>(), vec![2]);
    let low = BTreeMap::from([(1, 10), (2, 40)]);
    assert!(partition_pois(&low, PartitionMode::Threshold(50)).is_err());
}

#[test]
fn preprocessed_round_trip() {
    let cfg = WorldConfig { poi_count: 80, device_count: 30, duration_days: 7, seed: 2, ..WorldConfig::default() };
    let world = generate_world(&cfg).unwrap();
    let sim = mepoi_core::geodata::simulate_traces(&world, &cfg).unwrap();
    let pcfg = PreprocessConfig { anchor_top_k: Some(5), ..PreprocessConfig::default() };
    let pre = preprocess(&sim.points, &world, &pcfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_preprocessed(dir.path(), &pre).unwrap();
    assert_eq!(read_preprocessed(dir.path(), &world).unwrap(), pre);
}
