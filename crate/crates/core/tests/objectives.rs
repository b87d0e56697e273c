use mepoi_core::geo::{haversine_km, LatLon};
use mepoi_core::geodata::{generate_world, WorldConfig};
use mepoi_core::pipeline::{partition_pois, PartitionMode, VisitDistribution};
use mepoi_core::prototypes::{info_nce, Prototypes};
use mepoi_core::textalign::{build_prompt, nearest_pois, Compass, HashEmbedder, TextAlign};
use mepoi_core::transfer::*;
use mepoi_core::Result;
use mepoi_numcore::gradcheck::{check_params, max_rel_err, FD_STEP};
use mepoi_numcore::{AdamConfig, Graph, OptimizerState, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

mod common;
use common::{median, naive_prior, random_distribution, T};

/// Runs Adam on `loss` and returns the loss of every step.
fn optimise(store: &mut ParamStore<f64>, steps: usize, lr: f64, loss: impl Fn(&mut Graph<'_, f64>, usize) -> Result<Var>) -> Vec<f64> {
    let mut opt = OptimizerState::new(AdamConfig::adam(lr), store);
    let mut out = Vec::with_capacity(steps);
    for s in 0..steps {
        let grads = {
            let mut g = Graph::new(store);
            let l = loss(&mut g, s).unwrap();
            out.push(g.value(l).item());
            g.backward(l).unwrap()
        };
        opt.step(store, &grads).unwrap();
    }
    out
}

fn head_of_tail(losses: &[f64]) -> (f64, f64) {
    let k = 10.min(losses.len());
    let first = losses[..k].iter().sum::<f64>() / k as f64;
    let last = losses[losses.len() - k..].iter().sum::<f64>() / k as f64;
    (first, last)
}

#[test]
fn identical_prototypes_give_log_batch_size() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let row = Tensor::<f64>::randn(vec![1, 6], 1.0, &mut rng);
    let z = Tensor::from_rows(&vec![row.data().to_vec(); 5]).unwrap();
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let h = g.constant(Tensor::randn(vec![7, 6], 1.0, &mut rng));
    let zv = g.constant(z);
    let l = info_nce(&mut g, h, &[0, 1, 2, 0, 1, 2, 4], zv, 0.1).unwrap().unwrap();
    assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-12);
    let single = info_nce(&mut g, h, &[3; 7], zv, 0.1).unwrap();
    assert!(single.is_none());
}

/// Visits of four POIs around fixed centres, encoded by a learnable map.
struct Toy {
    centres: Tensor<f64>,
}

impl Toy {
    fn visits(&self, rng: &mut ChaCha8Rng, n: usize) -> (Tensor<f64>, Vec<usize>) {
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
        let noise = Tensor::<f64>::randn(vec![n, 6], 0.5, rng);
        let mut x = noise.clone();
        for (i, &l) in labels.iter().enumerate() {
            for (v, c) in x.row_mut(i).iter_mut().zip(self.centres.row(l)) {
                *v += c;
            }
        }
        (x, labels)
    }
}

#[test]
fn contrastive_toy_learns_prototypes() {
    let mut drops = Vec::new();
    let mut accuracies = Vec::new();
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let toy = Toy { centres: Tensor::randn(vec![4, 6], 1.0, &mut rng) };
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", Tensor::randn(vec![6, 8], 0.4, &mut rng)).unwrap();
        let protos = Prototypes::register(&mut store, &[10, 11, 12, 13], 8, &mut rng).unwrap();
        let batches: Vec<(Tensor<f64>, Vec<usize>)> = (0..100).map(|_| toy.visits(&mut rng, 16)).collect();
        let losses = optimise(&mut store, 100, 0.05, |g, s| {
            let x = g.constant(batches[s].0.clone());
            let wv = g.param(w);
            let h = g.matmul(x, wv)?;
            let z = g.param(protos.z);
            Ok(info_nce(g, h, &batches[s].1, z, 0.1)?.expect("several POIs"))
        });
        assert!(losses.iter().all(|&l| l >= 0.0));
        let (first, last) = head_of_tail(&losses);
        drops.push(first - last);
        let (x, labels) = toy.visits(&mut rng, 200);
        let h = x.matmul(store.get(w)).unwrap();
        let z = store.get(protos.z);
        let cos = |a: &[f64], b: &[f64]| {
            let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            d / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
        };
        let correct = labels
            .iter()
            .enumerate()
            .filter(|&(i, &p)| (0..4).filter(|&q| q != p).all(|q| cos(h.row(i), z.row(p)) > cos(h.row(i), z.row(q))))
            .count();
        accuracies.push(correct as f64 / 200.0);
    }
    assert!(median(drops) > 0.0);
    assert!(median(accuracies.clone()) >= 0.9, "{accuracies:?}");
}

#[test]
fn prototype_lookup_is_seeded_and_per_row() {
    let build = |seed| {
        let mut store = ParamStore::<f64>::new();
        let p = Prototypes::register(&mut store, &[3, 9], 4, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        (p.lookup(&store, 3).unwrap(), p.lookup(&store, 9).unwrap(), p.lookup(&store, 4).is_err())
    };
    let (a, b, missing) = build(5);
    assert_eq!(build(5).0, a);
    assert_ne!(a, b);
    assert!(missing);
}

#[test]
fn two_anchor_kernel_weights() {
    let a = kernel_weights(&[1.0, 2.0], 1.0).unwrap();
    assert!((a[0] - 0.8176).abs() < 1e-4 && (a[1] - 0.1824).abs() < 1e-4);
    assert_eq!(kernel_weights(&[3.7], 0.3).unwrap(), vec![1.0]);
}

#[test]
fn transfer_matches_naive_double_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let base = LatLon::new(29.76, -95.37);
    let cfg = KernelConfig::default();
    for _ in 0..10 {
        let anchors: Vec<(LatLon, Vec<f64>)> = (0..12)
            .map(|_| (base.offset_km(rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0)), random_distribution(&mut rng)))
            .collect();
        let refs: Vec<AnchorRef<'_>> = anchors.iter().map(|(l, r)| AnchorRef { location: *l, bins: r }).collect();
        let at = base.offset_km(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
        let fast = transfer_prior(at, &refs, &cfg).unwrap();
        let slow = naive_prior(at, &anchors, &cfg.bandwidths_km);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!((fast.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn shared_distribution_is_a_fixed_point() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let r = random_distribution(&mut rng);
    let base = LatLon::new(29.7, -95.4);
    let refs: Vec<AnchorRef<'_>> = (0..5).map(|k| AnchorRef { location: base.offset_km(k as f64, 0.5), bins: &r }).collect();
    let p = transfer_prior(base.offset_km(0.3, 2.0), &refs, &KernelConfig::default()).unwrap();
    for (a, b) in p.iter().zip(&r) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn equidistant_one_hot_anchors_split_evenly() {
    let mut a = vec![0.0; T];
    let mut b = vec![0.0; T];
    a[9] = 1.0;
    b[17] = 1.0;
    let c = LatLon::new(29.7, -95.4);
    let refs = [
        AnchorRef { location: c.offset_km(1.0, 0.0), bins: &a },
        AnchorRef { location: c.offset_km(-1.0, 0.0), bins: &b },
    ];
    for sigma in [0.1, 1.0, 10.0] {
        let p = transfer_prior(c, &refs, &KernelConfig { bandwidths_km: vec![sigma], nearest_anchors: None }).unwrap();
        assert!((p[9] - 0.5).abs() < 1e-9 && (p[17] - 0.5).abs() < 1e-9);
    }
}

fn head_store(d: usize, hidden: usize, rng: &mut ChaCha8Rng) -> (ParamStore<f64>, DistributionHead) {
    let mut store = ParamStore::new();
    let head = DistributionHead::register(&mut store, d, hidden, T, rng).unwrap();
    (store, head)
}

#[test]
fn zero_head_predicts_uniform_and_kl_closed_forms() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut store, head) = head_store(4, 8, &mut rng);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let s = store.get(id).shape().to_vec();
        *store.get_mut(id) = Tensor::zeros(s);
    }
    let mut g = Graph::new(&store);
    let z = g.constant(Tensor::randn(vec![3, 4], 1.0, &mut rng));
    let q = head.forward(&mut g, z).unwrap();
    for &v in g.value(q).data() {
        assert!((v - 1.0 / T as f64).abs() < 1e-15);
    }
    let mut one_hot = vec![0.0; T];
    one_hot[42] = 1.0;
    let l = kl_loss(&mut g, &head, z, &[1], &[&one_hot]).unwrap();
    assert!((g.value(l).item() - (T as f64).ln()).abs() < 1e-9);
    let uniform = vec![1.0 / T as f64; T];
    let l = kl_loss(&mut g, &head, z, &[0, 2], &[&uniform, &uniform]).unwrap();
    assert!(g.value(l).item().abs() < 1e-12);
}

#[test]
fn head_outputs_are_distributions_and_gradients_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..3 {
        let (mut store, head) = head_store(5, 6, &mut rng);
        let z = store.add("z", Tensor::randn(vec![4, 5], 1.0, &mut rng)).unwrap();
        let targets: Vec<Vec<f64>> = (0..2).map(|_| random_distribution(&mut rng)).collect();
        {
            let mut g = Graph::new(&store);
            let zv = g.param(z);
            let q = head.forward(&mut g, zv).unwrap();
            for r in 0..4 {
                assert!((g.value(q).row(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
        let checks = check_params(&store, FD_STEP, |g| -> Result<_> {
            let zv = g.param(z);
            kl_loss(g, &head, zv, &[3, 1], &[&targets[0], &targets[1]])
        })
        .unwrap();
        assert!(max_rel_err(&checks) < 1e-4);
    }
}

#[test]
fn sparse_toy_kl_decreases() {
    let mut drops = Vec::new();
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut store, head) = head_store(8, 32, &mut rng);
        let protos = Prototypes::register(&mut store, &(0..10).collect::<Vec<u32>>(), 8, &mut rng).unwrap();
        let targets: Vec<Vec<f64>> = (0..10).map(|_| random_distribution(&mut rng)).collect();
        let rows: Vec<usize> = (0..10).collect();
        let losses = optimise(&mut store, 200, 0.01, |g, _| {
            let z = g.param(protos.z);
            let t: Vec<&[f64]> = targets.iter().map(Vec::as_slice).collect();
            kl_loss(g, &head, z, &rows, &t)
        });
        let (first, last) = head_of_tail(&losses);
        drops.push(first - last);
    }
    assert!(median(drops) > 0.0);
}

#[test]
fn single_anchor_is_fitted() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (mut store, head) = head_store(8, 32, &mut rng);
    let protos = Prototypes::register(&mut store, &[1], 8, &mut rng).unwrap();
    let target = random_distribution(&mut rng);
    let losses = optimise(&mut store, 500, 0.01, |g, _| {
        let z = g.param(protos.z);
        kl_loss(g, &head, z, &[0], &[&target])
    });
    assert!(losses.iter().any(|&l| l < 0.05), "{}", losses.last().unwrap());
}

#[test]
fn precompute_is_deterministic_and_matches_oracle() {
    let cfg = WorldConfig { poi_count: 150, device_count: 1, seed: 3, ..WorldConfig::default() };
    let world = generate_world(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let counts: BTreeMap<u32, usize> = world.pois.iter().map(|p| (p.id, if rng.random_bool(0.1) { 60 } else { 3 })).collect();
    let partition = partition_pois(&counts, PartitionMode::Threshold(50)).unwrap();
    let dists: BTreeMap<u32, VisitDistribution> = partition
        .anchors
        .iter()
        .map(|&id| (id, VisitDistribution { bins: random_distribution(&mut rng), count: 60 }))
        .collect();
    let kc = KernelConfig::default();
    let a = precompute_transfer(&world, &partition, &dists, &kc).unwrap();
    let b = precompute_transfer(&world, &partition, &dists, &kc).unwrap();
    assert_eq!(a.priors, b.priors);
    assert_eq!(a.priors.len(), partition.sparse.len());
    let loc = |id: u32| world.pois.iter().find(|p| p.id == id).unwrap().location;
    let anchors: Vec<(LatLon, Vec<f64>)> = partition.anchors.iter().map(|&id| (loc(id), dists[&id].bins.clone())).collect();
    let sparse: Vec<u32> = partition.sparse.iter().copied().collect();
    for _ in 0..10 {
        let id = sparse[rng.random_range(0..sparse.len())];
        let slow = naive_prior(loc(id), &anchors, &kc.bandwidths_km);
        for (x, y) in a.priors[&id].iter().zip(&slow) {
            assert!((x - y).abs() < 1e-9);
        }
    }
}

#[test]
fn lone_poi_prompt_has_no_neighbours() {
    let cfg = WorldConfig { poi_count: 1, device_count: 1, ..WorldConfig::default() };
    let world = generate_world(&cfg).unwrap();
    let p = build_prompt(&world.pois[0], &world);
    assert!(p.ends_with("Nearby Places:\n"), "{p}");
    assert!(p.starts_with("Coordinates: ("));
}

#[test]
fn neighbours_match_brute_force_and_directions() {
    let cfg = WorldConfig { poi_count: 60, device_count: 1, seed: 8, ..WorldConfig::default() };
    let world = generate_world(&cfg).unwrap();
    for poi in world.pois.iter().take(10) {
        let mut all: Vec<(f64, u32)> = world
            .pois
            .iter()
            .filter(|q| q.id != poi.id)
            .map(|q| (haversine_km(poi.location, q.location), q.id))
            .collect();
        all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let fast: Vec<u32> = nearest_pois(poi, &world, 10).into_iter().map(|(_, i)| world.pois[i].id).collect();
        let slow: Vec<u32> = all.into_iter().take(10).map(|x| x.1).collect();
        assert_eq!(fast, slow);
    }
    let o = LatLon::new(29.7, -95.4);
    assert_eq!(Compass::from_bearing(mepoi_core::geo::bearing_deg(o, o.offset_km(0.0, 1.0))), Compass::N);
}

#[test]
fn one_neighbour_name_changes_embedding_slightly() {
    let base = "Coordinates: (29.76000, -95.37000)\nName: Blue Oak Cafe\nCategory: cafe\n\
                Address: 12 Main St, Houston, TX 77001\nNearby Places:\n1. 0.2 km N: Quiet Pine Bakery\n\
                2. 0.4 km E: Golden Elm Gym\n3. 0.5 km SW: Silver Birch Bar\n";
    let other = base.replace("Golden Elm Gym", "Rapid Cedar Church");
    let e = HashEmbedder::default();
    let (a, b) = (e.embed(base), e.embed(&other));
    let cos: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    assert!(cos < 1.0 && cos > 0.5, "{cos}");
}

#[test]
fn text_alignment_closed_forms_and_toy() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut store = ParamStore::<f64>::new();
    let ta = TextAlign::register(&mut store, 5, 7, &mut rng).unwrap();
    let u = Tensor::<f64>::randn(vec![3, 7], 1.0, &mut rng);
    let zt = u.matmul(&transpose(store.get(ta.w))).unwrap();
    {
        let mut g = Graph::new(&store);
        let z = g.constant(zt.clone());
        let l = ta.loss(&mut g, z, u.clone()).unwrap();
        assert!(g.value(l).item().abs() < 1e-12);
    }
    // z orthogonal to the projection.
    let mut orth = zt.clone();
    for r in 0..3 {
        let p = zt.row(r).to_vec();
        let v = [p[1], -p[0], 0.0, 0.0, 0.0];
        orth.row_mut(r).copy_from_slice(&v);
    }
    {
        let mut g = Graph::new(&store);
        let z = g.constant(orth);
        let l = ta.loss(&mut g, z, u.clone()).unwrap();
        assert!((g.value(l).item() - 1.0).abs() < 1e-12);
    }

    let mut drops = Vec::new();
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::<f64>::new();
        let ta = TextAlign::register(&mut store, 8, 12, &mut rng).unwrap();
        let z = store.add("z", Tensor::randn(vec![4, 8], 1.0, &mut rng)).unwrap();
        let text = Tensor::<f64>::randn(vec![4, 12], 1.0, &mut rng);
        let losses = optimise(&mut store, 200, 0.01, |g, _| {
            let zv = g.param(z);
            ta.loss(g, zv, text.clone())
        });
        assert!(losses.iter().all(|&l| (0.0..=2.0).contains(&l)));
        let (first, last) = head_of_tail(&losses);
        drops.push(first - last);
    }
    assert!(median(drops) > 0.0);
}

fn transpose(t: &Tensor<f64>) -> Tensor<f64> {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = t.row(i)[j];
        }
    }
    Tensor::new(vec![c, r], out).unwrap()
}
