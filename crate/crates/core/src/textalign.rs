//! Prompt construction, text embedding providers and the projection
//! alignment objective between prototypes and text embeddings.

use std::collections::{BTreeMap, HashMap};
use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};

use mepoi_numcore::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{bearing_deg, haversine_km};
use crate::geodata::{read_jsonl, Poi, World};
use crate::par;
use crate::seed::fnv1a;
use crate::seqmodel::init_linear;

pub const NEIGHBORS: usize = 10;
pub const TEXT_DIM: usize = 768;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Compass {
    N,
    NE,
    E,
    SE,
    S,
    SW,
    W,
    NW,
}

impl Compass {
    const ALL: [Compass; 8] = [
        Compass::N,
        Compass::NE,
        Compass::E,
        Compass::SE,
        Compass::S,
        Compass::SW,
        Compass::W,
        Compass::NW,
    ];

    /// 45° sectors centred on each point; N covers `[-22.5°, 22.5°)`.
    pub fn from_bearing(deg: f64) -> Self {
        let sector = ((deg + 22.5).rem_euclid(360.0) / 45.0).floor() as usize;
        Self::ALL[sector.min(7)]
    }
}

impl fmt::Display for Compass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Compass::N => "N",
            Compass::NE => "NE",
            Compass::E => "E",
            Compass::SE => "SE",
            Compass::S => "S",
            Compass::SW => "SW",
            Compass::W => "W",
            Compass::NW => "NW",
        };
        f.write_str(s)
    }
}

/// The `k` closest other POIs by distance, ties broken by id.
pub fn nearest_pois(poi: &Poi, world: &World, k: usize) -> Vec<(f64, usize)> {
    let mut d: Vec<(f64, usize)> = world
        .pois
        .iter()
        .enumerate()
        .filter(|(_, p)| p.id != poi.id)
        .map(|(i, p)| (haversine_km(poi.location, p.location), i))
        .collect();
    let key = |a: &(f64, usize), b: &(f64, usize)| {
        a.0.total_cmp(&b.0).then(world.pois[a.1].id.cmp(&world.pois[b.1].id))
    };
    if d.len() > k {
        d.select_nth_unstable_by(k, key);
        d.truncate(k);
    }
    d.sort_by(key);
    d
}

pub fn build_prompt(poi: &Poi, world: &World) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "Coordinates: ({:.5}, {:.5})", poi.location.lat, poi.location.lon);
    let _ = writeln!(s, "Name: {}", poi.name);
    let _ = writeln!(s, "Category: {}", poi.category);
    let _ = writeln!(s, "Address: {}", poi.address);
    let _ = writeln!(s, "Nearby Places:");
    for (rank, (d, i)) in nearest_pois(poi, world, NEIGHBORS).into_iter().enumerate() {
        let other = &world.pois[i];
        let dir = Compass::from_bearing(bearing_deg(poi.location, other.location));
        let _ = writeln!(s, "{}. {:.1} km {}: {}", rank + 1, d, dir, other.name);
    }
    s
}

/// Lower-cased alphanumeric word tokens.
fn tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric() && c != '.')
        .map(|t| t.trim_matches('.').to_lowercase())
        .filter(|t| !t.is_empty())
        .collect()
}

/// Feature-hashing embedder over unigrams and bigrams.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HashEmbedder {
    pub dim: usize,
}

impl Default for HashEmbedder {
    fn default() -> Self {
        HashEmbedder { dim: TEXT_DIM }
    }
}

impl HashEmbedder {
    pub fn embed(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        let toks = tokens(text);
        let mut add = |feature: &str| {
            let h = fnv1a(feature.as_bytes());
            let bucket = (h % self.dim as u64) as usize;
            v[bucket] += if h >> 63 == 0 { 1.0 } else { -1.0 };
        };
        for t in &toks {
            add(t);
        }
        for w in toks.windows(2) {
            add(&format!("{} {}", w[0], w[1]));
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            v.iter_mut().for_each(|x| *x /= n);
        }
        v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TextProvider {
    Hashed { dim: usize },
    File { path: PathBuf },
}

impl Default for TextProvider {
    fn default() -> Self {
        TextProvider::Hashed { dim: TEXT_DIM }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub poi_id: u32,
    pub vector: Vec<f64>,
}

/// Text embeddings for every POI of `world`, in world order.
pub fn embed_world(world: &World, provider: &TextProvider) -> Result<Vec<Vec<f64>>> {
    match provider {
        TextProvider::Hashed { dim } => {
            let e = HashEmbedder { dim: *dim };
            Ok(par::map(&world.pois, |p| e.embed(&build_prompt(p, world))))
        }
        TextProvider::File { path } => {
            let recs: Vec<EmbeddingRecord> = read_jsonl(path)?;
            let mut by_id: HashMap<u32, Vec<f64>> = recs.into_iter().map(|r| (r.poi_id, r.vector)).collect();
            let missing: Vec<u32> = world.pois.iter().map(|p| p.id).filter(|id| !by_id.contains_key(id)).collect();
            if !missing.is_empty() {
                return Err(Error::MissingEmbedding(missing));
            }
            let out: Vec<Vec<f64>> = world.pois.iter().map(|p| by_id.remove(&p.id).expect("checked")).collect();
            let dim = out[0].len();
            if out.iter().any(|v| v.len() != dim || v.iter().any(|x| !x.is_finite())) {
                return Err(Error::Contract("precomputed embeddings must be finite and of one dimension".into()));
            }
            Ok(out)
        }
    }
}

/// Writes one prompt file per POI (`<id>.txt`).
pub fn export_prompts(dir: &Path, world: &World) -> Result<usize> {
    std::fs::create_dir_all(dir)?;
    let prompts: BTreeMap<u32, String> = world.pois.iter().map(|p| (p.id, build_prompt(p, world))).collect();
    for (id, text) in &prompts {
        std::fs::write(dir.join(format!("{id}.txt")), text)?;
    }
    Ok(prompts.len())
}

/// Linear map `W` from text space into prototype space.
#[derive(Clone, Copy, Debug)]
pub struct TextAlign {
    pub w: ParamId,
}

impl TextAlign {
    pub fn register<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        d_h: usize,
        d_u: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(TextAlign { w: store.add("text.w", init_linear(d_h, d_u, rng))? })
    }

    /// Mean `1 − cos(z_p, W u_p)` over the rows; `z` is `[n, d_h]`,
    /// `text` is `[n, d_u]`.
    pub fn loss<T: Scalar>(&self, g: &mut Graph<'_, T>, z: Var, text: Tensor<T>) -> Result<Var> {
        let u = g.constant(text);
        let w = g.param(self.w);
        let proj = g.matmul_t(u, false, w, true)?;
        let zn = g.normalize_rows(z);
        let pn = g.normalize_rows(proj);
        let cos = g.row_dot(zn, pn)?;
        let m = g.mean(cos);
        Ok(g.affine(m, -1.0, 1.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compass_boundaries() {
        assert_eq!(Compass::from_bearing(0.0), Compass::N);
        assert_eq!(Compass::from_bearing(337.5), Compass::N);
        assert_eq!(Compass::from_bearing(22.5), Compass::NE);
        assert_eq!(Compass::from_bearing(22.49), Compass::N);
        assert_eq!(Compass::from_bearing(180.0), Compass::S);
        assert_eq!(Compass::from_bearing(270.0).to_string(), "W");
    }

    #[test]
    fn hashed_embedding_is_unit_and_stable() {
        let e = HashEmbedder::default();
        let a = e.embed("Name: Golden Oak Cafe\nCategory: cafe");
        assert_eq!(a, e.embed("Name: Golden Oak Cafe\nCategory: cafe"));
        let n: f64 = a.iter().map(|x| x * x).sum();
        assert!((n - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tokens_keep_decimals() {
        assert_eq!(tokens("1. 0.3 km N: Blue Star"), vec!["1", "0.3", "km", "n", "blue", "star"]);
    }
}
