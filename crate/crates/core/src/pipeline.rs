//! Raw GPS → visit sequences and per-POI visit statistics.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::geo::{haversine_m, point_in_polygon, BBox, LatLon};
use crate::geodata::{read_jsonl, write_jsonl, GpsPoint, World};
use crate::par;
use crate::timebin::{day_of_week, seconds_into_day, weekly_hour_bin, HOURS_PER_WEEK, SECONDS_PER_DAY};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StayParams {
    pub radius_m: f64,
    pub min_duration_s: i64,
}

impl Default for StayParams {
    fn default() -> Self {
        StayParams { radius_m: 100.0, min_duration_s: 300 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Staypoint {
    pub device_id: u32,
    pub lat: f64,
    pub lon: f64,
    pub arrival: i64,
    pub departure: i64,
}

impl Staypoint {
    pub fn centroid(&self) -> LatLon {
        LatLon::new(self.lat, self.lon)
    }
}

/// One stay; `poi_id == None` marks an UNKNOWN visit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Visit {
    pub device_id: u32,
    pub poi_id: Option<u32>,
    pub t_a: i64,
    pub t_d: i64,
    pub lat: f64,
    pub lon: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisitSequence {
    pub device_id: u32,
    pub visits: Vec<Visit>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisitDistribution {
    pub bins: Vec<f64>,
    pub count: usize,
}

impl VisitDistribution {
    pub fn uniform() -> Self {
        VisitDistribution { bins: vec![1.0 / HOURS_PER_WEEK as f64; HOURS_PER_WEEK], count: 0 }
    }
}

/// Splits points into contiguous per-device runs, checking that each
/// device appears once and its timestamps strictly increase.
pub fn split_devices(points: &[GpsPoint]) -> Result<Vec<&[GpsPoint]>> {
    let mut runs = Vec::new();
    let mut seen = BTreeSet::new();
    let mut start = 0;
    for i in 1..=points.len() {
        if i == points.len() || points[i].device_id != points[start].device_id {
            if !seen.insert(points[start].device_id) {
                return contract(format!("points of device {} are not contiguous", points[start].device_id));
            }
            runs.push(&points[start..i]);
            start = i;
        } else if points[i].timestamp <= points[i - 1].timestamp {
            return contract(format!(
                "device {} timestamps not strictly increasing at {}",
                points[i].device_id, points[i].timestamp
            ));
        }
    }
    Ok(runs)
}

/// Greedy distance–time staypoint detection over every device.
pub fn detect_staypoints(points: &[GpsPoint], params: StayParams) -> Result<Vec<Staypoint>> {
    let runs = split_devices(points)?;
    Ok(par::map(&runs, |run| detect_device(run, params)).concat())
}

fn detect_device(pts: &[GpsPoint], params: StayParams) -> Vec<Staypoint> {
    let mut out = Vec::new();
    let n = pts.len();
    let mut i = 0;
    while i < n {
        let anchor = pts[i].location();
        let mut j = i + 1;
        while j < n && haversine_m(anchor, pts[j].location()) <= params.radius_m {
            j += 1;
        }
        if pts[j - 1].timestamp - pts[i].timestamp >= params.min_duration_s {
            let w = &pts[i..j];
            let k = w.len() as f64;
            out.push(Staypoint {
                device_id: pts[i].device_id,
                lat: w.iter().map(|p| p.lat).sum::<f64>() / k,
                lon: w.iter().map(|p| p.lon).sum::<f64>() / k,
                arrival: pts[i].timestamp,
                departure: pts[j - 1].timestamp,
            });
            i = j;
        } else {
            i += 1;
        }
    }
    out
}

/// Grid index over POI centroids and polygons.
pub struct PoiIndex<'w> {
    world: &'w World,
    cell_deg: f64,
    reach_m: f64,
    snap_radius_m: f64,
    cells: HashMap<(i64, i64), Vec<usize>>,
}

impl<'w> PoiIndex<'w> {
    pub fn new(world: &'w World, snap_radius_m: f64) -> Self {
        let poly_reach = world
            .pois
            .iter()
            .filter_map(|p| {
                p.polygon
                    .as_ref()
                    .map(|ring| ring.iter().map(|&v| haversine_m(p.location, v)).fold(0.0, f64::max))
            })
            .fold(0.0, f64::max);
        let reach_m = snap_radius_m.max(poly_reach).max(1.0);
        // One degree of longitude is shorter than one of latitude, so
        // size cells by the longitude scale at the world's latitude.
        let max_abs_lat = world.pois.iter().map(|p| p.location.lat.abs()).fold(0.0, f64::max).min(89.0);
        let cell_deg = reach_m / (111_320.0 * max_abs_lat.to_radians().cos());
        let mut cells: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for (i, p) in world.pois.iter().enumerate() {
            cells.entry(Self::cell(cell_deg, p.location)).or_default().push(i);
        }
        PoiIndex { world, cell_deg, reach_m, snap_radius_m, cells }
    }

    fn cell(cell_deg: f64, p: LatLon) -> (i64, i64) {
        ((p.lat / cell_deg).floor() as i64, (p.lon / cell_deg).floor() as i64)
    }

    /// POI positions whose centroid may lie within `reach_m` of `p`.
    fn candidates(&self, p: LatLon) -> impl Iterator<Item = usize> + '_ {
        let (ci, cj) = Self::cell(self.cell_deg, p);
        (-1..=1).flat_map(move |di| {
            (-1..=1).flat_map(move |dj| self.cells.get(&(ci + di, cj + dj)).into_iter().flatten().copied())
        })
    }

    /// Polygon containment first (lowest id wins), then the nearest
    /// centroid within the snap radius (ties to the lower id).
    pub fn attribute(&self, p: LatLon) -> Option<u32> {
        let pois = &self.world.pois;
        let mut in_poly: Option<u32> = None;
        let mut nearest: Option<(f64, u32)> = None;
        for i in self.candidates(p) {
            let poi = &pois[i];
            if poi.polygon.as_ref().is_some_and(|ring| point_in_polygon(p, ring)) {
                in_poly = Some(in_poly.map_or(poi.id, |id| id.min(poi.id)));
            }
            let d = haversine_m(p, poi.location);
            if d <= self.snap_radius_m
                && nearest.is_none_or(|(bd, bid)| d < bd || (d == bd && poi.id < bid))
            {
                nearest = Some((d, poi.id));
            }
        }
        debug_assert!(self.reach_m >= self.snap_radius_m);
        in_poly.or(nearest.map(|(_, id)| id))
    }
}

pub fn attribute_pois(staypoints: &[Staypoint], index: &PoiIndex<'_>) -> Vec<Visit> {
    par::map(staypoints, |s| Visit {
        device_id: s.device_id,
        poi_id: index.attribute(s.centroid()),
        t_a: s.arrival,
        t_d: s.departure,
        lat: s.lat,
        lon: s.lon,
    })
}

/// Groups visits by device in arrival order and drops short sequences.
pub fn build_sequences(visits: &[Visit], min_len: usize) -> Vec<VisitSequence> {
    let mut by_device: BTreeMap<u32, Vec<Visit>> = BTreeMap::new();
    for v in visits {
        by_device.entry(v.device_id).or_default().push(*v);
    }
    by_device
        .into_iter()
        .filter(|(_, v)| v.len() >= min_len)
        .map(|(device_id, mut visits)| {
            visits.sort_by_key(|v| (v.t_a, v.t_d));
            VisitSequence { device_id, visits }
        })
        .collect()
}

/// Maps coordinates and timestamps onto unit-interval features.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Normalizer {
    pub bbox: BBox,
}

impl Normalizer {
    pub fn new(bbox: BBox) -> Self {
        Normalizer { bbox }
    }

    /// `(x, y)` in `[0, 1]²` with x along longitude; out-of-box values clamp.
    pub fn location(&self, p: LatLon) -> [f64; 2] {
        let x = (p.lon - self.bbox.min_lon) / (self.bbox.max_lon - self.bbox.min_lon);
        let y = (p.lat - self.bbox.min_lat) / (self.bbox.max_lat - self.bbox.min_lat);
        if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
            log::debug!("coordinate {p:?} outside bounding box; clamped");
        }
        [x.clamp(0.0, 1.0), y.clamp(0.0, 1.0)]
    }

    /// `(hour_frac, day_frac)` with Monday as day 0.
    pub fn time(ts: i64) -> (f64, f64) {
        (
            seconds_into_day(ts) as f64 / SECONDS_PER_DAY as f64,
            day_of_week(ts) as f64 / 7.0,
        )
    }
}

/// Normalized arrival histogram over weekly-hour bins.
pub fn empirical_distribution(arrivals: &[i64]) -> Result<VisitDistribution> {
    if arrivals.is_empty() {
        return Err(Error::Contract("empirical distribution of a POI with no visits".into()));
    }
    let mut bins = vec![0.0; HOURS_PER_WEEK];
    for &t in arrivals {
        bins[weekly_hour_bin(t)] += 1.0;
    }
    let n = arrivals.len() as f64;
    bins.iter_mut().for_each(|b| *b /= n);
    Ok(VisitDistribution { bins, count: arrivals.len() })
}

/// Attributed arrival times per POI, for every POI in `world`.
pub fn arrivals_by_poi(world: &World, sequences: &[VisitSequence]) -> BTreeMap<u32, Vec<i64>> {
    let mut out: BTreeMap<u32, Vec<i64>> = world.pois.iter().map(|p| (p.id, Vec::new())).collect();
    for v in sequences.iter().flat_map(|s| &s.visits) {
        if let Some(id) = v.poi_id {
            out.entry(id).or_default().push(v.t_a);
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionMode {
    Threshold(usize),
    TopK(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub anchors: BTreeSet<u32>,
    pub sparse: BTreeSet<u32>,
    pub threshold: usize,
}

impl Partition {
    pub fn anchor_share(&self) -> f64 {
        self.anchors.len() as f64 / (self.anchors.len() + self.sparse.len()).max(1) as f64
    }
}

pub fn partition_pois(counts: &BTreeMap<u32, usize>, mode: PartitionMode) -> Result<Partition> {
    let threshold = match mode {
        PartitionMode::Threshold(m) => m,
        PartitionMode::TopK(k) => {
            if k == 0 {
                return Err(Error::Config("top-k partition needs k >= 1".into()));
            }
            let mut c: Vec<usize> = counts.values().copied().collect();
            c.sort_unstable_by(|a, b| b.cmp(a));
            c.get(k - 1).copied().unwrap_or(0).max(1)
        }
    };
    let anchors: BTreeSet<u32> = counts.iter().filter(|(_, &c)| c >= threshold).map(|(&id, _)| id).collect();
    if anchors.is_empty() {
        return Err(Error::Config(format!(
            "no POI has at least {threshold} visits; lower the anchor threshold"
        )));
    }
    let sparse = counts.keys().filter(|id| !anchors.contains(id)).copied().collect();
    Ok(Partition { anchors, sparse, threshold })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessConfig {
    pub radius_m: f64,
    pub min_duration_s: i64,
    pub snap_radius_m: f64,
    pub min_sequence_len: usize,
    pub anchor_threshold: usize,
    /// When set, anchors are the `k` most visited POIs instead.
    pub anchor_top_k: Option<usize>,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            radius_m: 100.0,
            min_duration_s: 300,
            snap_radius_m: 100.0,
            min_sequence_len: 5,
            anchor_threshold: 50,
            anchor_top_k: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistributionRecord {
    pub poi_id: u32,
    pub count: usize,
    pub bins: Vec<f64>,
}

/// Everything the later stages need from the raw traces.
#[derive(Clone, Debug, PartialEq)]
pub struct Preprocessed {
    pub sequences: Vec<VisitSequence>,
    pub counts: BTreeMap<u32, usize>,
    /// Empirical distributions of every POI with at least one visit.
    pub distributions: BTreeMap<u32, VisitDistribution>,
    pub partition: Partition,
}

impl Preprocessed {
    pub fn visit_count(&self) -> usize {
        self.sequences.iter().map(|s| s.visits.len()).sum()
    }
}

pub fn preprocess(points: &[GpsPoint], world: &World, cfg: &PreprocessConfig) -> Result<Preprocessed> {
    let stays = detect_staypoints(
        points,
        StayParams { radius_m: cfg.radius_m, min_duration_s: cfg.min_duration_s },
    )?;
    let index = PoiIndex::new(world, cfg.snap_radius_m);
    let visits = attribute_pois(&stays, &index);
    let sequences = build_sequences(&visits, cfg.min_sequence_len);
    from_sequences(world, sequences, cfg)
}

/// Statistics and partition from already-built sequences.
pub fn from_sequences(world: &World, sequences: Vec<VisitSequence>, cfg: &PreprocessConfig) -> Result<Preprocessed> {
    let arrivals = arrivals_by_poi(world, &sequences);
    let counts: BTreeMap<u32, usize> = arrivals.iter().map(|(&id, a)| (id, a.len())).collect();
    let distributions = arrivals
        .iter()
        .filter(|(_, a)| !a.is_empty())
        .map(|(&id, a)| empirical_distribution(a).map(|d| (id, d)))
        .collect::<Result<_>>()?;
    let mode = match cfg.anchor_top_k {
        Some(k) => PartitionMode::TopK(k),
        None => PartitionMode::Threshold(cfg.anchor_threshold),
    };
    let partition = partition_pois(&counts, mode)?;
    Ok(Preprocessed { sequences, counts, distributions, partition })
}

pub const VISITS_FILE: &str = "visits.jsonl";
pub const DISTRIBUTIONS_FILE: &str = "distributions.jsonl";
pub const PARTITION_FILE: &str = "partition.json";

pub fn write_preprocessed(dir: &Path, pre: &Preprocessed) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_jsonl(&dir.join(VISITS_FILE), pre.sequences.iter().flat_map(|s| &s.visits))?;
    write_jsonl(
        &dir.join(DISTRIBUTIONS_FILE),
        pre.distributions.iter().map(|(&poi_id, d)| DistributionRecord {
            poi_id,
            count: d.count,
            bins: d.bins.clone(),
        }),
    )?;
    std::fs::write(dir.join(PARTITION_FILE), serde_json::to_vec_pretty(&pre.partition)?)?;
    Ok(())
}

/// Reloads a preprocessing output directory. Sequences are rebuilt from
/// the visits file without re-applying the length filter.
pub fn read_preprocessed(dir: &Path, world: &World) -> Result<Preprocessed> {
    let visits: Vec<Visit> = read_jsonl(&dir.join(VISITS_FILE))?;
    let sequences = build_sequences(&visits, 0);
    let records: Vec<DistributionRecord> = read_jsonl(&dir.join(DISTRIBUTIONS_FILE))?;
    let distributions = records
        .into_iter()
        .map(|r| (r.poi_id, VisitDistribution { bins: r.bins, count: r.count }))
        .collect();
    let path = dir.join(PARTITION_FILE);
    let bytes = std::fs::read(&path).map_err(|source| Error::File { path: path.display().to_string(), source })?;
    let partition = serde_json::from_slice(&bytes)?;
    let counts = arrivals_by_poi(world, &sequences).into_iter().map(|(id, a)| (id, a.len())).collect();
    Ok(Preprocessed { sequences, counts, distributions, partition })
}
