//! Learnable POI prototypes and the in-batch contrastive objective.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use mepoi_numcore::checkpoint::{decode_le, encode_le};
use mepoi_numcore::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The prototype matrix `Z` (one row per POI) and its id map.
#[derive(Clone, Debug)]
pub struct Prototypes {
    pub z: ParamId,
    pub ids: Vec<u32>,
    rows: HashMap<u32, usize>,
}

impl Prototypes {
    /// Registers `Z` with rows drawn from N(0, 1/d).
    pub fn register<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        ids: &[u32],
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let z = store.add("prototypes", Tensor::randn(vec![ids.len(), dim], 1.0 / (dim as f64).sqrt(), rng))?;
        Ok(Self::attach(z, ids))
    }

    /// Wraps an already registered matrix.
    pub fn attach(z: ParamId, ids: &[u32]) -> Self {
        Prototypes {
            z,
            ids: ids.to_vec(),
            rows: ids.iter().enumerate().map(|(r, &id)| (id, r)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row(&self, id: u32) -> Result<usize> {
        self.rows.get(&id).copied().ok_or(Error::UnknownPoi(id))
    }

    pub fn lookup<T: Scalar>(&self, store: &ParamStore<T>, id: u32) -> Result<Vec<T>> {
        Ok(store.get(self.z).row(self.row(id)?).to_vec())
    }
}

/// Mean InfoNCE of visit embeddings `h` (`[n, d]`) against the
/// prototypes of the POIs present in the batch. `rows[i]` is the
/// prototype row of visit `i`. Returns `None` when fewer than two
/// distinct POIs are present.
pub fn info_nce<T: Scalar>(
    g: &mut Graph<'_, T>,
    h: Var,
    rows: &[usize],
    z: Var,
    tau: f64,
) -> Result<Option<Var>> {
    if tau <= 0.0 {
        return Err(Error::Config("temperature must be positive".into()));
    }
    let unique: Vec<usize> = rows.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    if unique.len() < 2 {
        return Ok(None);
    }
    let pos: HashMap<usize, usize> = unique.iter().enumerate().map(|(i, &r)| (r, i)).collect();
    let targets: Vec<usize> = rows.iter().map(|r| pos[r]).collect();
    let zb = g.gather_rows(z, &unique)?;
    let hn = g.normalize_rows(h);
    let zn = g.normalize_rows(zb);
    let sims = g.matmul_t(hn, false, zn, true)?;
    let logits = g.scale(sims, 1.0 / tau);
    Ok(Some(g.cross_entropy(logits, &targets)?))
}

pub const EMBEDDINGS_MANIFEST: &str = "embeddings.json";
pub const EMBEDDINGS_FILE: &str = "embeddings.bin";
pub const EMBEDDINGS_CSV: &str = "embeddings.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingManifest {
    pub format: String,
    pub poi_ids: Vec<u32>,
    pub dim: usize,
    pub dtype: String,
    pub endianness: String,
    pub file: String,
}

/// Row-major embedding matrix keyed by POI id.
#[derive(Clone, Debug, PartialEq)]
pub struct Embeddings<T> {
    pub poi_ids: Vec<u32>,
    pub dim: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Embeddings<T> {
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn from_store(store: &ParamStore<T>, protos: &Prototypes) -> Self {
        let z = store.get(protos.z);
        Embeddings { poi_ids: protos.ids.clone(), dim: z.last_dim(), data: z.data().to_vec() }
    }

    pub fn to_f64(&self) -> Embeddings<f64> {
        Embeddings { poi_ids: self.poi_ids.clone(), dim: self.dim, data: self.data.iter().map(|v| v.f()).collect() }
    }
}

pub fn write_embeddings<T: Scalar>(dir: &Path, emb: &Embeddings<T>, csv: bool) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let manifest = EmbeddingManifest {
        format: "mepoi-embeddings".into(),
        poi_ids: emb.poi_ids.clone(),
        dim: emb.dim,
        dtype: T::DTYPE.into(),
        endianness: "little".into(),
        file: EMBEDDINGS_FILE.into(),
    };
    std::fs::write(dir.join(EMBEDDINGS_MANIFEST), serde_json::to_vec_pretty(&manifest)?)?;
    std::fs::write(dir.join(EMBEDDINGS_FILE), encode_le(&emb.data))?;
    if csv {
        let mut w = csv::Writer::from_path(dir.join(EMBEDDINGS_CSV))?;
        for (i, id) in emb.poi_ids.iter().enumerate() {
            let mut rec = vec![id.to_string()];
            rec.extend(emb.row(i).iter().map(|v| v.f().to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
    }
    Ok(())
}

pub fn read_embeddings<T: Scalar>(dir: &Path) -> Result<Embeddings<T>> {
    let path = dir.join(EMBEDDINGS_MANIFEST);
    let bytes = std::fs::read(&path).map_err(|source| Error::File { path: path.display().to_string(), source })?;
    let m: EmbeddingManifest = serde_json::from_slice(&bytes)?;
    let raw_path = dir.join(&m.file);
    let raw = std::fs::read(&raw_path).map_err(|source| Error::File { path: raw_path.display().to_string(), source })?;
    let data: Vec<T> = decode_le(&raw, &m.dtype)?;
    if data.len() != m.poi_ids.len() * m.dim {
        return Err(Error::Contract(format!(
            "embedding file holds {} values, manifest implies {}",
            data.len(),
            m.poi_ids.len() * m.dim
        )));
    }
    Ok(Embeddings { poi_ids: m.poi_ids, dim: m.dim, data })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn closed_form_two_prototypes() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let h = g.constant(Tensor::from_f64(vec![1, 2], &[1.0, 0.0]).unwrap());
        let z = g.constant(Tensor::from_f64(vec![2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap());
        let l = info_nce(&mut g, h, &[0], z, 1.0).unwrap();
        assert!(l.is_none(), "a single POI in the batch is skipped");
        let h2 = g.constant(Tensor::from_f64(vec![2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap());
        let l = info_nce(&mut g, h2, &[0, 1], z, 1.0).unwrap().unwrap();
        let want = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((g.value(l).item() - want).abs() < 1e-12);
    }

    #[test]
    fn embeddings_round_trip() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f32>::new();
        let p = Prototypes::register(&mut store, &[4, 9, 11], 5, &mut rng).unwrap();
        let e = Embeddings::from_store(&store, &p);
        let dir = tempfile::tempdir().unwrap();
        write_embeddings(dir.path(), &e, true).unwrap();
        assert_eq!(read_embeddings::<f32>(dir.path()).unwrap(), e);
        assert_eq!(e.row(1), p.lookup(&store, 9).unwrap().as_slice());
        assert!(matches!(p.lookup(&store, 5), Err(Error::UnknownPoi(5))));
    }
}
