//! Multi-scale Gaussian transfer of visit distributions from anchor to
//! sparse POIs, and the shared KL objective over predicted distributions.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use mepoi_numcore::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{haversine_km, LatLon};
use crate::geodata::{read_jsonl, write_jsonl, World};
use crate::par;
use crate::pipeline::{Partition, VisitDistribution};
use crate::seqmodel::init_linear;
use crate::timebin::HOURS_PER_WEEK;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelConfig {
    pub bandwidths_km: Vec<f64>,
    /// Keep only the nearest `k` anchors per sparse POI. Off by default.
    pub nearest_anchors: Option<usize>,
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig { bandwidths_km: vec![0.3, 1.0, 3.0], nearest_anchors: None }
    }
}

impl KernelConfig {
    pub fn validate(&self) -> Result<()> {
        let b = &self.bandwidths_km;
        if b.is_empty() || b.iter().any(|&s| !(s > 0.0)) || b.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(
                "kernel bandwidths must be positive and strictly increasing".into(),
            ));
        }
        if self.nearest_anchors == Some(0) {
            return Err(Error::Config("nearest_anchors must be at least 1".into()));
        }
        Ok(())
    }
}

/// Normalized Gaussian weights `exp(-d²/2σ²)`, evaluated in log space.
pub fn kernel_weights(dists_km: &[f64], sigma_km: f64) -> Result<Vec<f64>> {
    if dists_km.is_empty() {
        return Err(Error::Config("kernel weights need at least one anchor".into()));
    }
    let logits: Vec<f64> = dists_km.iter().map(|d| -d * d / (2.0 * sigma_km * sigma_km)).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let s: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / s).collect())
}

/// An anchor as seen by the transfer: position and empirical distribution.
#[derive(Clone, Copy, Debug)]
pub struct AnchorRef<'a> {
    pub location: LatLon,
    pub bins: &'a [f64],
}

/// `(1/M) Σ_m Σ_a α⁽ᵐ⁾ r_a`, renormalized.
pub fn transfer_prior(at: LatLon, anchors: &[AnchorRef<'_>], cfg: &KernelConfig) -> Result<Vec<f64>> {
    let mut chosen: Vec<(f64, usize)> = anchors
        .iter()
        .enumerate()
        .map(|(i, a)| (haversine_km(at, a.location), i))
        .collect();
    if let Some(k) = cfg.nearest_anchors {
        if k < chosen.len() {
            chosen.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            chosen.truncate(k);
            chosen.sort_by_key(|c| c.1);
        }
    }
    let dists: Vec<f64> = chosen.iter().map(|c| c.0).collect();
    let t = anchors.first().map_or(HOURS_PER_WEEK, |a| a.bins.len());
    let mut prior = vec![0.0; t];
    let m = cfg.bandwidths_km.len() as f64;
    for &sigma in &cfg.bandwidths_km {
        let alpha = kernel_weights(&dists, sigma)?;
        for (w, &(_, i)) in alpha.iter().zip(&chosen) {
            for (p, &r) in prior.iter_mut().zip(anchors[i].bins) {
                *p += w * r / m;
            }
        }
    }
    let s: f64 = prior.iter().sum();
    if s > 0.0 {
        prior.iter_mut().for_each(|p| *p /= s);
    }
    Ok(prior)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorRecord {
    pub poi_id: u32,
    pub bins: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Precomputed {
    pub priors: BTreeMap<u32, Vec<f64>>,
    pub seconds: f64,
    /// `M · |anchors| · |sparse|` kernel evaluations.
    pub kernel_evaluations: u64,
}

/// Transferred priors for every sparse POI.
pub fn precompute_transfer(
    world: &World,
    partition: &Partition,
    distributions: &BTreeMap<u32, VisitDistribution>,
    cfg: &KernelConfig,
) -> Result<Precomputed> {
    cfg.validate()?;
    let index = world.index();
    let loc = |id: u32| -> Result<LatLon> { Ok(world.pois[*index.get(&id).ok_or(Error::UnknownPoi(id))?].location) };
    let mut anchors = Vec::with_capacity(partition.anchors.len());
    for &id in &partition.anchors {
        let d = distributions.get(&id).ok_or_else(|| {
            Error::Contract(format!("anchor {id} has no empirical distribution"))
        })?;
        anchors.push(AnchorRef { location: loc(id)?, bins: &d.bins });
    }
    if anchors.is_empty() {
        return Err(Error::Config("transfer needs at least one anchor".into()));
    }
    let sparse: Vec<(u32, LatLon)> = partition
        .sparse
        .iter()
        .map(|&id| loc(id).map(|l| (id, l)))
        .collect::<Result<_>>()?;
    let start = Instant::now();
    let out = par::map(&sparse, |&(id, at)| transfer_prior(at, &anchors, cfg).map(|p| (id, p)));
    let priors = out.into_iter().collect::<Result<BTreeMap<_, _>>>()?;
    Ok(Precomputed {
        priors,
        seconds: start.elapsed().as_secs_f64(),
        kernel_evaluations: (cfg.bandwidths_km.len() * anchors.len() * sparse.len()) as u64,
    })
}

pub fn write_priors(path: &Path, priors: &BTreeMap<u32, Vec<f64>>) -> Result<()> {
    write_jsonl(path, priors.iter().map(|(&poi_id, b)| PriorRecord { poi_id, bins: b.clone() }))
}

pub fn read_priors(path: &Path) -> Result<BTreeMap<u32, Vec<f64>>> {
    let recs: Vec<PriorRecord> = read_jsonl(path)?;
    Ok(recs.into_iter().map(|r| (r.poi_id, r.bins)).collect())
}

/// `softmax(W₂ relu(W₁ z + b₁) + b₂)`, shared by anchor and sparse POIs.
#[derive(Clone, Copy, Debug)]
pub struct DistributionHead {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl DistributionHead {
    pub fn register<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        d_in: usize,
        hidden: usize,
        bins: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(DistributionHead {
            w1: store.add("dist_head.w1", init_linear(d_in, hidden, rng))?,
            b1: store.add("dist_head.b1", Tensor::zeros(vec![hidden]))?,
            w2: store.add("dist_head.w2", init_linear(hidden, bins, rng))?,
            b2: store.add("dist_head.b2", Tensor::zeros(vec![bins]))?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, z: Var) -> Result<Var> {
        let (w1, b1, w2, b2) = (g.param(self.w1), g.param(self.b1), g.param(self.w2), g.param(self.b2));
        let h = g.matmul(z, w1)?;
        let h = g.add_row(h, b1)?;
        let h = g.relu(h);
        let o = g.matmul(h, w2)?;
        let o = g.add_row(o, b2)?;
        Ok(g.softmax(o))
    }
}

/// Mean `KL(target ‖ q)` over the given prototype rows. Used for both
/// the anchor (empirical targets) and sparse (transferred targets) terms.
pub fn kl_loss<T: Scalar>(
    g: &mut Graph<'_, T>,
    head: &DistributionHead,
    z: Var,
    rows: &[usize],
    targets: &[&[f64]],
) -> Result<Var> {
    let t = targets.first().map_or(HOURS_PER_WEEK, |r| r.len());
    let flat: Vec<f64> = targets.iter().flat_map(|r| r.iter().copied()).collect();
    let target = Tensor::from_f64(vec![rows.len(), t], &flat)?;
    let zr = g.gather_rows(z, rows)?;
    let q = head.forward(g, zr)?;
    Ok(g.kl_div(target, q)?)
}
