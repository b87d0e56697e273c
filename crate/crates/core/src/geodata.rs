//! Synthetic mobility worlds with known ground truth.
//!
//! A world is a set of POIs placed in clustered neighborhoods. Every POI
//! carries a weekly usage profile mixed from a neighborhood profile and
//! a category-driven idiosyncratic profile; all task labels are derived
//! from that profile and a few latent attributes, so every downstream
//! signal has a known source. [`simulate_traces`] turns the world into
//! raw GPS points by sampling stays per device.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, LogNormal, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{haversine_km, haversine_m, BBox, LatLon};
use crate::par;
use crate::seed::rng_for;
use crate::timebin::{DEFAULT_START, HOURS_PER_WEEK, SECONDS_PER_DAY, SECONDS_PER_WEEK};

/// Class shares for visit intent, lowest intent first.
pub const INTENT_PRIORS: [f64; 4] = [0.574, 0.0615, 0.2528, 0.1117];
/// Class shares for price level, cheapest first.
pub const PRICE_PRIORS: [f64; 4] = [0.5034, 0.4539, 0.0356, 0.0071];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    pub bbox: BBox,
    pub poi_count: usize,
    pub device_count: usize,
    pub duration_days: usize,
    /// Simulation start (seconds since epoch, should be a Monday 00:00 UTC).
    pub start: i64,
    pub seed: u64,
    /// 0 selects one neighborhood per 50 POIs.
    pub neighborhood_count: usize,
    pub neighborhood_spread_km: f64,
    /// Weight of the shared neighborhood profile in each POI's usage (0..=1).
    pub neighborhood_correlation: f64,
    /// Zipf exponent of POI visit rates.
    pub popularity_exponent: f64,
    /// Share of POIs in the high-traffic head.
    pub head_share: f64,
    /// Visit-rate multiplier applied to the head.
    pub head_boost: f64,
    pub stays_per_day: f64,
    pub dwell_median_min: f64,
    pub dwell_sigma: f64,
    pub sample_interval_s: i64,
    pub jitter_m: f64,
    pub travel_speed_kmh: f64,
    pub closed_share: f64,
    pub polygon_share: f64,
    /// Maximum per-POI shift of opening time, in hours.
    pub schedule_jitter_hours: i64,
    pub min_spacing_m: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            bbox: BBox::houston(),
            poi_count: 1000,
            device_count: 500,
            duration_days: 28,
            start: DEFAULT_START,
            seed: 7,
            neighborhood_count: 0,
            neighborhood_spread_km: 0.8,
            neighborhood_correlation: 0.5,
            popularity_exponent: 1.0,
            head_share: 0.08,
            head_boost: 2.0,
            stays_per_day: 5.0,
            dwell_median_min: 25.0,
            dwell_sigma: 0.6,
            sample_interval_s: 120,
            jitter_m: 20.0,
            travel_speed_kmh: 25.0,
            closed_share: 0.10,
            polygon_share: 0.5,
            schedule_jitter_hours: 2,
            min_spacing_m: 15.0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("world: {m}")));
        if !self.bbox.is_valid() {
            return bad("bounding box is degenerate");
        }
        if self.poi_count == 0 || self.device_count == 0 || self.duration_days == 0 {
            return bad("poi_count, device_count and duration_days must be positive");
        }
        if !(0.0..=1.0).contains(&self.neighborhood_correlation) {
            return bad("neighborhood_correlation must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.closed_share) || !(0.0..=1.0).contains(&self.head_share) {
            return bad("shares must lie in [0, 1]");
        }
        if self.sample_interval_s <= 0 || self.stays_per_day <= 0.0 || self.dwell_median_min <= 0.0 {
            return bad("sampling interval, stay rate and dwell must be positive");
        }
        Ok(())
    }

    pub fn neighborhoods(&self) -> usize {
        if self.neighborhood_count > 0 {
            self.neighborhood_count
        } else {
            (self.poi_count / 50).max(1)
        }
    }

    pub fn end(&self) -> i64 {
        self.start + self.duration_days as i64 * SECONDS_PER_DAY
    }
}

/// 168 open/closed flags, serialized as a string of `0`/`1`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct WeekMask(pub Vec<bool>);

impl TryFrom<String> for WeekMask {
    type Error = String;
    fn try_from(s: String) -> Result<Self, String> {
        if s.len() != HOURS_PER_WEEK {
            return Err(format!("week mask needs {HOURS_PER_WEEK} characters, got {}", s.len()));
        }
        s.chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(format!("invalid week mask character {other:?}")),
            })
            .collect::<Result<Vec<_>, _>>()
            .map(WeekMask)
    }
}

impl From<WeekMask> for String {
    fn from(m: WeekMask) -> String {
        m.0.iter().map(|&b| if b { '1' } else { '0' }).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub open_hours: WeekMask,
    pub price_level: u8,
    pub visit_intent: u8,
    pub busyness: Vec<f64>,
    pub closed: bool,
    pub closed_at: Option<i64>,
    pub usage_profile: Vec<f64>,
    /// Relative visit rate used by the simulator.
    pub popularity: f64,
    pub dwell_median_min: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Poi {
    pub id: u32,
    pub location: LatLon,
    pub polygon: Option<Vec<LatLon>>,
    pub category: String,
    pub name: String,
    pub address: String,
    pub neighborhood: usize,
    pub truth: GroundTruth,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct World {
    pub pois: Vec<Poi>,
}

impl World {
    pub fn len(&self) -> usize {
        self.pois.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pois.is_empty()
    }

    pub fn ids(&self) -> Vec<u32> {
        self.pois.iter().map(|p| p.id).collect()
    }

    /// Map from POI id to position in `pois`.
    pub fn index(&self) -> HashMap<u32, usize> {
        self.pois.iter().enumerate().map(|(i, p)| (p.id, i)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpsPoint {
    pub device_id: u32,
    pub timestamp: i64,
    pub lat: f64,
    pub lon: f64,
}

impl GpsPoint {
    pub fn location(&self) -> LatLon {
        LatLon::new(self.lat, self.lon)
    }
}

/// A stay planted by the simulator (the ground truth for staypoint tests).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedStay {
    pub device_id: u32,
    pub poi_id: u32,
    pub arrival: i64,
    pub departure: i64,
}

#[derive(Clone, Debug, Default)]
pub struct Simulation {
    pub points: Vec<GpsPoint>,
    pub stays: Vec<PlantedStay>,
}

struct Category {
    name: &'static str,
    weight: f64,
    /// Bit d set when open on weekday d (Monday = bit 0).
    days: u8,
    open: i64,
    len: i64,
    peaks: &'static [f64],
    width: f64,
    price: f64,
    dwell: f64,
    closure: f64,
    words: &'static [&'static str],
}

const ALL: u8 = 0b111_1111;
const WEEKDAYS: u8 = 0b001_1111;

const CATEGORIES: &[Category] = &[
    Category { name: "cafe", weight: 0.13, days: ALL, open: 6, len: 12, peaks: &[8.5], width: 1.5, price: 0.3, dwell: 0.8, closure: 0.2, words: &["Cafe", "Coffee House", "Espresso Bar"] },
    Category { name: "restaurant", weight: 0.16, days: ALL, open: 11, len: 11, peaks: &[12.5, 19.0], width: 1.2, price: 1.0, dwell: 1.3, closure: 0.4, words: &["Grill", "Kitchen", "Bistro", "Taqueria"] },
    Category { name: "bar", weight: 0.08, days: ALL, open: 17, len: 9, peaks: &[22.0], width: 2.0, price: 1.2, dwell: 1.5, closure: 0.5, words: &["Tavern", "Pub", "Lounge"] },
    Category { name: "nightclub", weight: 0.03, days: 0b111_0000 | 0b000_1000, open: 21, len: 7, peaks: &[24.5], width: 1.5, price: 1.8, dwell: 1.8, closure: 0.6, words: &["Club", "Nightclub"] },
    Category { name: "office", weight: 0.12, days: WEEKDAYS, open: 8, len: 10, peaks: &[9.0, 14.0], width: 2.5, price: 0.0, dwell: 2.0, closure: 0.1, words: &["Offices", "Tower", "Business Center"] },
    Category { name: "grocery", weight: 0.12, days: ALL, open: 7, len: 15, peaks: &[17.5], width: 2.5, price: 0.4, dwell: 0.7, closure: 0.1, words: &["Market", "Grocery", "Foods"] },
    Category { name: "gym", weight: 0.07, days: ALL, open: 5, len: 17, peaks: &[7.0, 18.5], width: 1.3, price: 0.8, dwell: 1.2, closure: 0.3, words: &["Fitness", "Gym", "Athletic Club"] },
    Category { name: "retail", weight: 0.15, days: ALL, open: 10, len: 10, peaks: &[15.0], width: 3.0, price: 0.9, dwell: 0.9, closure: 0.5, words: &["Boutique", "Outlet", "Store"] },
    Category { name: "bakery", weight: 0.06, days: ALL, open: 5, len: 8, peaks: &[7.5], width: 1.2, price: 0.2, dwell: 0.5, closure: 0.3, words: &["Bakery", "Donuts", "Pastries"] },
    Category { name: "church", weight: 0.03, days: 0b100_0000 | 0b000_0100, open: 8, len: 6, peaks: &[10.0], width: 1.0, price: 0.0, dwell: 2.0, closure: 0.05, words: &["Church", "Chapel"] },
    Category { name: "fuel", weight: 0.05, days: ALL, open: 0, len: 24, peaks: &[8.0, 17.0], width: 2.0, price: 0.1, dwell: 0.3, closure: 0.1, words: &["Gas", "Fuel Stop", "Service Station"] },
];

const ADJECTIVES: &[&str] = &[
    "Golden", "Blue", "Red", "Lucky", "Silver", "Green", "Old", "New", "Happy", "Bright", "Royal",
    "Little", "Grand", "Sunny", "Urban", "Rustic", "Wild", "Quiet", "Bayou", "Lone", "Copper",
    "Velvet", "Cedar", "Maple",
];
const NOUNS: &[&str] = &[
    "Oak", "Star", "Lantern", "River", "Pine", "Harbor", "Anchor", "Willow", "Stone", "Bridge",
    "Garden", "Falcon", "Crown", "Comet", "Meadow", "Bison", "Magnolia", "Cypress", "Pecan",
    "Armadillo", "Rocket", "Cactus",
];
const STREETS: &[&str] = &[
    "Main", "Elm", "Westheimer", "Montrose", "Kirby", "Shepherd", "Richmond", "Bellaire",
    "Fannin", "Travis", "Louisiana", "Bissonnet", "Alabama", "Fairview", "Washington", "Yale",
    "Heights", "Airline", "Navigation", "Harrisburg", "Telephone", "Gessner", "Hillcroft",
    "Fondren", "Bellfort", "Almeda", "Cullen", "Scott", "Lyons", "Jensen", "Tidwell", "Aldine",
    "Wirt", "Antoine", "Hammerly", "Clay", "Memorial", "Voss", "Post Oak", "Sage", "Chimney Rock",
    "Braeswood", "Holcombe", "Greenbriar", "Stella Link", "Buffalo Speedway", "Weslayan", "Dunlavy",
];
const SUFFIXES: &[&str] = &["St", "Blvd", "Ave", "Rd", "Dr"];

struct Neighborhood {
    center: LatLon,
    profile: Vec<f64>,
    wealth: f64,
    streets: Vec<&'static str>,
}

/// Weekly profile of a schedule: intensity inside the opening window,
/// zero elsewhere, normalized to sum to one.
fn schedule_profile(cat: &Category, shift: i64, len_delta: i64, closed_day: Option<usize>) -> Vec<f64> {
    let mut p = vec![0.0; HOURS_PER_WEEK];
    let len = (cat.len + len_delta).clamp(3, 24);
    for d in 0..7usize {
        if cat.days & (1 << d) == 0 || closed_day == Some(d) {
            continue;
        }
        for k in 0..len {
            let hour = cat.open + shift + k;
            let bin = (d as i64 * 24 + hour).rem_euclid(HOURS_PER_WEEK as i64) as usize;
            let centre = (hour as f64) + 0.5;
            let bump: f64 = cat
                .peaks
                .iter()
                .map(|&pk| {
                    let z = (centre - (pk + shift as f64)) / cat.width;
                    (-0.5 * z * z).exp()
                })
                .sum();
            p[bin] += 0.25 + bump;
        }
    }
    normalize(&mut p);
    p
}

fn normalize(p: &mut [f64]) {
    let s: f64 = p.iter().sum();
    if s > 0.0 {
        p.iter_mut().for_each(|v| *v /= s);
    }
}

/// Bins whose usage is at least this share of the peak count as open.
pub const OPEN_THRESHOLD: f64 = 0.08;

/// Derives (open hours, usage profile, busyness) from a raw mixture.
fn derive_labels(raw: &[f64]) -> (Vec<bool>, Vec<f64>, Vec<f64>) {
    let max = raw.iter().copied().fold(0.0, f64::max);
    let open: Vec<bool> = raw.iter().map(|&v| max > 0.0 && v >= OPEN_THRESHOLD * max).collect();
    let mut usage: Vec<f64> = raw.iter().zip(&open).map(|(&v, &o)| if o { v } else { 0.0 }).collect();
    normalize(&mut usage);
    let n = usage.len();
    let smooth: Vec<f64> = (0..n)
        .map(|t| (usage[(t + n - 1) % n] + 2.0 * usage[t] + usage[(t + 1) % n]) / 4.0)
        .collect();
    let smax = smooth.iter().copied().fold(0.0, f64::max);
    let busy = smooth
        .iter()
        .zip(&open)
        .map(|(&v, &o)| if o && smax > 0.0 { (v / smax).clamp(0.0, 1.0) } else { 0.0 })
        .collect();
    (open, usage, busy)
}

/// Assigns ordinal classes by ranking `latent` and cutting at the
/// cumulative `priors`.
fn quantile_classes(latent: &[f64], priors: &[f64]) -> Vec<u8> {
    let mut order: Vec<usize> = (0..latent.len()).collect();
    order.sort_by(|&a, &b| latent[a].total_cmp(&latent[b]).then(a.cmp(&b)));
    let n = latent.len() as f64;
    let mut cum = Vec::with_capacity(priors.len());
    let mut acc = 0.0;
    for p in priors {
        acc += p;
        cum.push(acc);
    }
    let mut out = vec![0u8; latent.len()];
    for (rank, &i) in order.iter().enumerate() {
        let q = (rank as f64 + 0.5) / n;
        out[i] = cum.iter().position(|&c| q < c).unwrap_or(priors.len() - 1) as u8;
    }
    out
}

/// Generates POIs with ground truth. Deterministic in `cfg.seed`.
pub fn generate_world(cfg: &WorldConfig) -> Result<World> {
    cfg.validate()?;
    let mut rng = rng_for(cfg.seed, "world", 0);
    let cat_weights = WeightedIndex::new(CATEGORIES.iter().map(|c| c.weight))
        .map_err(|e| Error::Generation(e.to_string()))?;
    // Neighborhood rhythms come from schedules with a closing time.
    let rhythm_weights = WeightedIndex::new(CATEGORIES.iter().map(|c| if c.len < 24 { c.weight } else { 0.0 }))
        .map_err(|e| Error::Generation(e.to_string()))?;
    let (ew_km, ns_km) = cfg.bbox.extent_km();
    let inset = (2.0f64).min(ew_km.min(ns_km) / 4.0);
    let corner = LatLon::new(cfg.bbox.min_lat, cfg.bbox.min_lon);

    let neighborhoods: Vec<Neighborhood> = (0..cfg.neighborhoods())
        .map(|_| {
            let east = rng.random_range(inset..=(ew_km - inset).max(inset));
            let north = rng.random_range(inset..=(ns_km - inset).max(inset));
            let cat = &CATEGORIES[rhythm_weights.sample(&mut rng)];
            let shift = rng.random_range(-3..=3);
            let mut streets = STREETS.to_vec();
            streets.shuffle(&mut rng);
            streets.truncate(3);
            Neighborhood {
                center: corner.offset_km(east, north),
                profile: schedule_profile(cat, shift, 0, None),
                wealth: rng.sample::<f64, _>(Normal::new(0.0, 0.35).expect("valid")),
                streets,
            }
        })
        .collect();

    let n = cfg.poi_count;
    let spread = Normal::new(0.0, cfg.neighborhood_spread_km).map_err(|e| Error::Generation(e.to_string()))?;
    let cell_deg = (cfg.min_spacing_m / 111_320.0).max(1e-6);
    let mut occupied: HashMap<(i64, i64), Vec<LatLon>> = HashMap::new();
    let cell_of = |p: LatLon| ((p.lat / cell_deg).floor() as i64, (p.lon / cell_deg).floor() as i64);

    let mut locations = Vec::with_capacity(n);
    let mut hoods = Vec::with_capacity(n);
    for i in 0..n {
        let nb = rng.random_range(0..neighborhoods.len());
        let mut placed = None;
        for _ in 0..500 {
            let p = neighborhoods[nb]
                .center
                .offset_km(spread.sample(&mut rng), spread.sample(&mut rng));
            if !cfg.bbox.contains(p) {
                continue;
            }
            let (ci, cj) = cell_of(p);
            let crowded = (-1..=1).any(|di| {
                (-1..=1).any(|dj| {
                    occupied
                        .get(&(ci + di, cj + dj))
                        .is_some_and(|v| v.iter().any(|&q| haversine_m(p, q) < cfg.min_spacing_m))
                })
            });
            if !crowded {
                placed = Some(p);
                break;
            }
        }
        let Some(p) = placed else {
            return Err(Error::Generation(format!(
                "placement capacity exceeded after {i} POIs; lower poi_count or min_spacing_m"
            )));
        };
        occupied.entry(cell_of(p)).or_default().push(p);
        locations.push(p);
        hoods.push(nb);
    }

    let cats: Vec<usize> = (0..n).map(|_| cat_weights.sample(&mut rng)).collect();

    // Visit rates: Zipf over a random rank order, with a boosted head.
    let mut ranks: Vec<usize> = (1..=n).collect();
    ranks.shuffle(&mut rng);
    let head = (cfg.head_share * n as f64).round() as usize;
    let popularity: Vec<f64> = ranks
        .iter()
        .map(|&r| {
            let w = (r as f64).powf(-cfg.popularity_exponent);
            if r <= head {
                w * cfg.head_boost
            } else {
                w
            }
        })
        .collect();

    let noise = Normal::new(0.0, 1.0).expect("valid");
    let intent_latent: Vec<f64> = popularity.iter().map(|w| w.ln() + 0.5 * noise.sample(&mut rng)).collect();
    let intents = quantile_classes(&intent_latent, &INTENT_PRIORS);
    let price_latent: Vec<f64> = (0..n)
        .map(|i| CATEGORIES[cats[i]].price + neighborhoods[hoods[i]].wealth + 0.3 * noise.sample(&mut rng))
        .collect();
    let prices = quantile_classes(&price_latent, &PRICE_PRIORS);
    let price_mean = price_latent.iter().sum::<f64>() / n as f64;

    let closed_count = (cfg.closed_share * n as f64).round() as usize;
    let closure_score: Vec<f64> = (0..n)
        .map(|i| CATEGORIES[cats[i]].closure + 0.8 * ranks[i] as f64 / n as f64 + 0.3 * noise.sample(&mut rng))
        .collect();
    let mut by_closure: Vec<usize> = (0..n).collect();
    by_closure.sort_by(|&a, &b| closure_score[b].total_cmp(&closure_score[a]).then(a.cmp(&b)));
    let mut closed = vec![false; n];
    for &i in by_closure.iter().take(closed_count) {
        closed[i] = true;
    }

    let c = cfg.neighborhood_correlation;
    let duration_s = cfg.duration_days as i64 * SECONDS_PER_DAY;
    let mut pois = Vec::with_capacity(n);
    for i in 0..n {
        let cat = &CATEGORIES[cats[i]];
        let nb = &neighborhoods[hoods[i]];
        let jitter = cfg.schedule_jitter_hours;
        let shift = if jitter > 0 { rng.random_range(-jitter..=jitter) } else { 0 };
        let len_delta = rng.random_range(-1..=1);
        let closed_day = if cat.len < 24 && rng.random_bool(0.25) {
            Some(rng.random_range(0..7usize))
        } else {
            None
        };
        let mut idio = schedule_profile(cat, shift, len_delta, closed_day);
        if idio.iter().all(|&v| v == 0.0) {
            idio = schedule_profile(cat, shift, len_delta, None);
        }
        let raw: Vec<f64> = nb.profile.iter().zip(&idio).map(|(&a, &b)| c * a + (1.0 - c) * b).collect();
        let (open, usage, busyness) = derive_labels(&raw);

        let closed_at = closed[i].then(|| cfg.start + (rng.random_range(0.1..0.5) * duration_s as f64) as i64);
        let dwell = cfg.dwell_median_min * cat.dwell * (0.35 * (price_latent[i] - price_mean)).exp();

        let location = locations[i];
        let polygon = rng.random_bool(cfg.polygon_share.clamp(0.0, 1.0)).then(|| {
            let half_m = rng.random_range(12.0..35.0);
            let k = half_m / 1000.0;
            vec![
                location.offset_km(-k, -k),
                location.offset_km(k, -k),
                location.offset_km(k, k),
                location.offset_km(-k, k),
            ]
        });
        let word = cat.words[rng.random_range(0..cat.words.len())];
        let name = format!(
            "{} {} {}",
            ADJECTIVES[rng.random_range(0..ADJECTIVES.len())],
            NOUNS[rng.random_range(0..NOUNS.len())],
            word
        );
        let address = format!(
            "{} {} {}, Houston, TX {}",
            rng.random_range(100..9900),
            nb.streets[rng.random_range(0..nb.streets.len())],
            SUFFIXES[rng.random_range(0..SUFFIXES.len())],
            77001 + hoods[i]
        );
        pois.push(Poi {
            id: i as u32,
            location,
            polygon,
            category: cat.name.to_string(),
            name,
            address,
            neighborhood: hoods[i],
            truth: GroundTruth {
                open_hours: WeekMask(open),
                price_level: prices[i],
                visit_intent: intents[i],
                busyness,
                closed: closed[i],
                closed_at,
                usage_profile: usage,
                popularity: popularity[i],
                dwell_median_min: dwell,
            },
        });
    }
    Ok(World { pois })
}

/// The category names known to the generator.
pub fn category_names() -> Vec<&'static str> {
    CATEGORIES.iter().map(|c| c.name).collect()
}

struct SimTables {
    popularity: WeightedIndex<f64>,
    arrival_bins: Vec<Option<WeightedIndex<f64>>>,
}

/// Samples stays per device and emits GPS points for stays and the
/// travel between them. Devices are simulated independently from
/// per-device seeds; output is ordered by (device_id, timestamp).
pub fn simulate_traces(world: &World, cfg: &WorldConfig) -> Result<Simulation> {
    if world.is_empty() {
        return Err(Error::Contract("cannot simulate an empty world".into()));
    }
    cfg.validate()?;
    let tables = SimTables {
        popularity: WeightedIndex::new(world.pois.iter().map(|p| p.truth.popularity))
            .map_err(|e| Error::Generation(format!("popularity weights: {e}")))?,
        arrival_bins: world
            .pois
            .iter()
            .map(|p| WeightedIndex::new(p.truth.usage_profile.iter().copied()).ok())
            .collect(),
    };
    let devices: Vec<u32> = (0..cfg.device_count as u32).collect();
    let per_device = par::map(&devices, |&d| simulate_device(world, cfg, &tables, d));
    let mut sim = Simulation::default();
    for (points, stays) in per_device {
        sim.points.extend(points);
        sim.stays.extend(stays);
    }
    Ok(sim)
}

fn simulate_device(
    world: &World,
    cfg: &WorldConfig,
    tables: &SimTables,
    device: u32,
) -> (Vec<GpsPoint>, Vec<PlantedStay>) {
    let mut rng = rng_for(cfg.seed, "device", u64::from(device));
    let end = cfg.end();
    let weeks = cfg.duration_days.div_ceil(7) as i64;
    let per_week = Poisson::new(7.0 * cfg.stays_per_day).expect("positive rate");
    let mut candidates: Vec<(i64, usize)> = Vec::new();
    for w in 0..weeks {
        let count = per_week.sample(&mut rng) as usize;
        for _ in 0..count {
            let poi = tables.popularity.sample(&mut rng);
            let Some(bins) = &tables.arrival_bins[poi] else { continue };
            let bin = bins.sample(&mut rng) as i64;
            let arrival = cfg.start + w * SECONDS_PER_WEEK + bin * 3600 + rng.random_range(0..3600);
            if arrival >= end {
                continue;
            }
            if world.pois[poi].truth.closed_at.is_some_and(|c| arrival >= c) {
                continue;
            }
            candidates.push((arrival, poi));
        }
    }
    candidates.sort_unstable();

    let dt = cfg.sample_interval_s;
    let mut stays: Vec<PlantedStay> = Vec::new();
    let mut last: Option<(i64, usize)> = None;
    for (arrival, poi) in candidates {
        let truth = &world.pois[poi].truth;
        let dwell_dist = LogNormal::new(truth.dwell_median_min.ln(), cfg.dwell_sigma).expect("valid dwell");
        let dwell_min = dwell_dist.sample(&mut rng).clamp(5.0, 180.0);
        let departure = arrival + (dwell_min * 60.0).round() as i64;
        if let Some((dep, prev)) = last {
            let travel = travel_seconds(world.pois[prev].location, world.pois[poi].location, cfg);
            if arrival < dep + travel + 2 * dt {
                continue;
            }
        }
        stays.push(PlantedStay {
            device_id: device,
            poi_id: world.pois[poi].id,
            arrival,
            departure,
        });
        last = Some((departure, poi));
    }

    let disk = |rng: &mut rand_chacha::ChaCha8Rng, centre: LatLon| {
        let r = cfg.jitter_m * rng.random::<f64>().sqrt() / 1000.0;
        let theta = rng.random_range(0.0..std::f64::consts::TAU);
        centre.offset_km(r * theta.cos(), r * theta.sin())
    };
    let index = world.index();
    let mut points = Vec::new();
    let mut prev: Option<(i64, LatLon)> = None;
    for stay in &stays {
        let loc = world.pois[index[&stay.poi_id]].location;
        if let Some((dep, from)) = prev {
            let travel = travel_seconds(from, loc, cfg);
            let mut t = dep + dt;
            while t < dep + travel {
                let f = (t - dep) as f64 / travel as f64;
                let p = LatLon::new(from.lat + f * (loc.lat - from.lat), from.lon + f * (loc.lon - from.lon));
                if haversine_m(p, from) > 150.0 && haversine_m(p, loc) > 150.0 {
                    points.push(GpsPoint { device_id: device, timestamp: t, lat: p.lat, lon: p.lon });
                }
                t += dt;
            }
        }
        let mut t = stay.arrival;
        while t < stay.departure {
            let p = disk(&mut rng, loc);
            points.push(GpsPoint { device_id: device, timestamp: t, lat: p.lat, lon: p.lon });
            t += dt;
        }
        let p = disk(&mut rng, loc);
        points.push(GpsPoint { device_id: device, timestamp: stay.departure, lat: p.lat, lon: p.lon });
        prev = Some((stay.departure, loc));
    }
    (points, stays)
}

fn travel_seconds(a: LatLon, b: LatLon, cfg: &WorldConfig) -> i64 {
    let hours = haversine_km(a, b) / cfg.travel_speed_kmh;
    ((hours * 3600.0).ceil() as i64).max(cfg.sample_interval_s)
}

/// Per-POI task labels, one JSON object per line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub poi_id: u32,
    pub open_hours: Vec<u8>,
    pub closed: bool,
    pub visit_intent: u8,
    pub busyness: Vec<f64>,
    pub price_level: u8,
}

impl LabelRecord {
    pub fn from_poi(p: &Poi) -> Self {
        LabelRecord {
            poi_id: p.id,
            open_hours: p.truth.open_hours.0.iter().map(|&b| u8::from(b)).collect(),
            closed: p.truth.closed,
            visit_intent: p.truth.visit_intent,
            busyness: p.truth.busyness.clone(),
            price_level: p.truth.price_level,
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|source| Error::File { path: path.display().to_string(), source })
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|source| Error::File { path: path.display().to_string(), source })
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = create(path)?;
    for item in items {
        serde_json::to_writer(&mut w, &item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for line in open(path)?.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

pub fn write_world(path: &Path, world: &World) -> Result<()> {
    write_jsonl(path, &world.pois)
}

pub fn read_world(path: &Path) -> Result<World> {
    Ok(World { pois: read_jsonl(path)? })
}

pub fn write_labels(path: &Path, world: &World) -> Result<()> {
    write_jsonl(path, world.pois.iter().map(LabelRecord::from_poi))
}

pub fn read_labels(path: &Path) -> Result<Vec<LabelRecord>> {
    read_jsonl(path)
}

pub fn write_traces(path: &Path, points: &[GpsPoint]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    for p in points {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_traces(path: &Path) -> Result<Vec<GpsPoint>> {
    let mut r = csv::Reader::from_reader(open(path)?);
    let mut out = Vec::new();
    for rec in r.deserialize() {
        out.push(rec?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> WorldConfig {
        WorldConfig {
            poi_count: 60,
            device_count: 10,
            duration_days: 7,
            seed,
            ..WorldConfig::default()
        }
    }

    #[test]
    fn single_poi_without_correlation_uses_idiosyncratic_profile() {
        let cfg = WorldConfig { poi_count: 1, neighborhood_correlation: 0.0, ..small(1) };
        let w = generate_world(&cfg).unwrap();
        assert_eq!(w.len(), 1);
        let p = &w.pois[0];
        let s: f64 = p.truth.usage_profile.iter().sum();
        assert!((s - 1.0).abs() < 1e-9);
        for t in 0..HOURS_PER_WEEK {
            assert_eq!(p.truth.open_hours.0[t], p.truth.usage_profile[t] > 0.0);
        }
    }

    #[test]
    fn full_correlation_shares_profiles_within_neighborhood() {
        let cfg = WorldConfig { neighborhood_correlation: 1.0, ..small(2) };
        let w = generate_world(&cfg).unwrap();
        let mut by_hood: HashMap<usize, &Vec<f64>> = HashMap::new();
        for p in &w.pois {
            if let Some(prev) = by_hood.insert(p.neighborhood, &p.truth.usage_profile) {
                assert_eq!(prev, &p.truth.usage_profile);
            }
        }
    }

    #[test]
    fn same_seed_same_world_file() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
        write_world(&a, &generate_world(&small(5)).unwrap()).unwrap();
        write_world(&b, &generate_world(&small(5)).unwrap()).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        let back = read_world(&a).unwrap();
        assert_eq!(back, generate_world(&small(5)).unwrap());
    }

    #[test]
    fn ground_truth_invariants() {
        let w = generate_world(&small(3)).unwrap();
        let cfg = small(3);
        for p in &w.pois {
            assert!(cfg.bbox.contains(p.location));
            if let Some(poly) = &p.polygon {
                assert!(crate::geo::point_in_polygon(p.location, poly));
            }
            for t in 0..HOURS_PER_WEEK {
                if !p.truth.open_hours.0[t] {
                    assert_eq!(p.truth.busyness[t], 0.0);
                    assert_eq!(p.truth.usage_profile[t], 0.0);
                }
                assert!((0.0..=1.0).contains(&p.truth.busyness[t]));
            }
            assert!(p.truth.price_level < 4 && p.truth.visit_intent < 4);
        }
        let closed = w.pois.iter().filter(|p| p.truth.closed).count();
        assert_eq!(closed, 6);
    }

    #[test]
    fn capacity_error_when_overcrowded() {
        let cfg = WorldConfig {
            poi_count: 500,
            neighborhood_count: 1,
            neighborhood_spread_km: 0.01,
            min_spacing_m: 50.0,
            ..small(1)
        };
        assert!(matches!(generate_world(&cfg), Err(Error::Generation(_))));
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = WorldConfig { bbox: BBox::new(1.0, 1.0, 1.0, 2.0), ..small(1) };
        assert!(matches!(generate_world(&cfg), Err(Error::Config(_))));
        let cfg = WorldConfig { poi_count: 0, ..small(1) };
        assert!(generate_world(&cfg).is_err());
    }

    #[test]
    fn quantile_classes_follow_priors() {
        let latent: Vec<f64> = (0..1000).map(|i| i as f64).collect();
        let c = quantile_classes(&latent, &[0.5, 0.25, 0.25]);
        assert_eq!(c.iter().filter(|&&x| x == 0).count(), 500);
        assert_eq!(c.iter().filter(|&&x| x == 2).count(), 250);
        assert_eq!(c[999], 2);
    }

    #[test]
    fn week_mask_serde() {
        let m = WeekMask((0..168).map(|i| i % 3 == 0).collect());
        let s = serde_json::to_string(&m).unwrap();
        assert_eq!(serde_json::from_str::<WeekMask>(&s).unwrap(), m);
        assert!(serde_json::from_str::<WeekMask>("\"0101\"").is_err());
    }
}
