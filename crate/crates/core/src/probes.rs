//! Frozen-embedding probes for the five downstream tasks: stratified
//! splits, lightweight heads, early-stopped training and reports.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::Path;

use mepoi_numcore::{sigmoid, AdamConfig, Graph, OptimizerState, ParamId, ParamStore, Scalar, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geodata::World;
use crate::metrics;
use crate::par;
use crate::prototypes::Embeddings;
use crate::seed::rng_for;
use crate::seqmodel::init_linear;
use crate::timebin::HOURS_PER_WEEK;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    OpenHours,
    Closure,
    Intent,
    Busyness,
    Price,
}

impl Task {
    pub const ALL: [Task; 5] = [Task::OpenHours, Task::Closure, Task::Intent, Task::Busyness, Task::Price];

    pub fn name(self) -> &'static str {
        match self {
            Task::OpenHours => "open_hours",
            Task::Closure => "closure",
            Task::Intent => "intent",
            Task::Busyness => "busyness",
            Task::Price => "price",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown task `{s}`")))
    }

    pub fn output_dim(self) -> usize {
        match self {
            Task::OpenHours | Task::Busyness => HOURS_PER_WEEK,
            Task::Closure => 1,
            Task::Intent | Task::Price => 4,
        }
    }

    /// Names of the reported metric pair.
    pub fn metric_names(self) -> [&'static str; 2] {
        match self {
            Task::OpenHours => ["f1", "auroc"],
            Task::Closure => ["f1", "auprc"],
            Task::Intent => ["f1", "auprc"],
            Task::Busyness => ["mae", "cosine"],
            Task::Price => ["accuracy", "f1"],
        }
    }

    /// Index into the metric pair used for model selection and
    /// comparisons. Closure uses AUPRC since F1 at 0.5 collapses under
    /// the class imbalance.
    pub fn primary(self) -> usize {
        match self {
            Task::Closure => 1,
            _ => 0,
        }
    }

    pub fn higher_is_better(self) -> bool {
        self != Task::Busyness
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProbeMode {
    Combined,
    MobilityOnly,
    TextOnly,
}

impl ProbeMode {
    pub const ALL: [ProbeMode; 3] = [ProbeMode::TextOnly, ProbeMode::MobilityOnly, ProbeMode::Combined];

    pub fn name(self) -> &'static str {
        match self {
            ProbeMode::Combined => "combined",
            ProbeMode::MobilityOnly => "mobility-only",
            ProbeMode::TextOnly => "text-only",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        ProbeMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown probe mode `{s}`")))
    }

    fn uses_mobility(self) -> bool {
        self != ProbeMode::TextOnly
    }

    fn uses_text(self) -> bool {
        self != ProbeMode::MobilityOnly
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub hidden: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            hidden: 256,
            learning_rate: 1e-5,
            weight_decay: 0.01,
            max_epochs: 100,
            patience: 10,
            batch_size: 32,
        }
    }
}

impl ProbeConfig {
    /// Faster schedule for small synthetic worlds.
    pub fn desk() -> Self {
        ProbeConfig { learning_rate: 1e-3, ..ProbeConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.max_epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("probe: hidden, max_epochs and batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config("probe: learning_rate must be > 0 and weight_decay >= 0".into()));
        }
        Ok(())
    }
}

/// Frozen inputs, one row per POI in world order.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeInputs {
    pub poi_ids: Vec<u32>,
    pub mobility: Vec<f64>,
    pub mobility_dim: usize,
    pub text: Option<Vec<f64>>,
    pub text_dim: usize,
}

impl ProbeInputs {
    pub fn new<T: Scalar>(world: &World, emb: &Embeddings<T>, text: Option<&[Vec<f64>]>) -> Result<Self> {
        if emb.poi_ids != world.ids() {
            return Err(Error::Contract("embedding ids do not match the world's POIs".into()));
        }
        let mobility: Vec<f64> = emb.data.iter().map(|v| v.f()).collect();
        Self::from_rows(emb.poi_ids.clone(), mobility, emb.dim, text)
    }

    pub fn from_rows(poi_ids: Vec<u32>, mobility: Vec<f64>, mobility_dim: usize, text: Option<&[Vec<f64>]>) -> Result<Self> {
        let n = poi_ids.len();
        if mobility_dim == 0 || mobility.len() != n * mobility_dim {
            return Err(Error::Config(format!(
                "mobility inputs hold {} values for {n} POIs of width {mobility_dim}",
                mobility.len()
            )));
        }
        let (text, text_dim) = match text {
            Some(rows) => {
                let du = rows.first().map_or(0, Vec::len);
                if rows.len() != n || du == 0 || rows.iter().any(|r| r.len() != du) {
                    return Err(Error::Config(format!("text inputs must be {n} rows of one positive width")));
                }
                (Some(rows.concat()), du)
            }
            None => (None, 1),
        };
        Ok(ProbeInputs { poi_ids, mobility, mobility_dim, text, text_dim })
    }

    /// Same shape, mobility replaced by frozen `N(0, 1/d)` draws.
    pub fn random_control(&self, seed: u64) -> Self {
        let mut rng = rng_for(seed, "random-control", 0);
        let normal = Normal::new(0.0, 1.0 / (self.mobility_dim as f64).sqrt()).expect("positive std");
        let mobility = (0..self.mobility.len()).map(|_| normal.sample(&mut rng)).collect();
        ProbeInputs { mobility, ..self.clone() }
    }

    pub fn len(&self) -> usize {
        self.poi_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poi_ids.is_empty()
    }

    fn batch<T: Scalar>(&self, rows: &[usize], mode: ProbeMode) -> Result<(Tensor<T>, Tensor<T>)> {
        let (dm, dt) = (self.mobility_dim, self.text_dim);
        let mut m = Vec::with_capacity(rows.len() * dm);
        let mut t = Vec::with_capacity(rows.len() * dt);
        if mode.uses_text() && self.text.is_none() {
            return Err(Error::Config(format!("probe mode {} needs text embeddings", mode.name())));
        }
        for &r in rows {
            if mode.uses_mobility() {
                m.extend(self.mobility[r * dm..(r + 1) * dm].iter().map(|&v| T::c(v)));
            } else {
                m.extend(std::iter::repeat_n(T::zero(), dm));
            }
            match (&self.text, mode.uses_text()) {
                (Some(text), true) => t.extend(text[r * dt..(r + 1) * dt].iter().map(|&v| T::c(v))),
                _ => t.extend(std::iter::repeat_n(T::zero(), dt)),
            }
        }
        Ok((Tensor::new(vec![rows.len(), dm], m)?, Tensor::new(vec![rows.len(), dt], t)?))
    }
}

/// Labels of one task for every POI in world order.
#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    MultiLabel(Vec<Vec<bool>>),
    Binary(Vec<bool>),
    Classes { labels: Vec<usize>, classes: usize },
    Regression(Vec<Vec<f64>>),
}

impl Targets {
    pub fn of(task: Task, world: &World) -> Self {
        let t = world.pois.iter().map(|p| &p.truth);
        match task {
            Task::OpenHours => Targets::MultiLabel(t.map(|g| g.open_hours.0.clone()).collect()),
            Task::Closure => Targets::Binary(t.map(|g| g.closed).collect()),
            Task::Intent => Targets::Classes { labels: t.map(|g| g.visit_intent as usize).collect(), classes: 4 },
            Task::Busyness => Targets::Regression(t.map(|g| g.busyness.clone()).collect()),
            Task::Price => Targets::Classes { labels: t.map(|g| g.price_level as usize).collect(), classes: 4 },
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Targets::MultiLabel(v) => v.len(),
            Targets::Binary(v) => v.len(),
            Targets::Classes { labels, .. } => labels.len(),
            Targets::Regression(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Stratum of each row: the class for classification tasks, a
    /// quartile of the row mean otherwise.
    pub fn strata(&self) -> Vec<usize> {
        let quartiles = |values: Vec<f64>| {
            let mut idx: Vec<usize> = (0..values.len()).collect();
            idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
            let mut out = vec![0; values.len()];
            for (rank, i) in idx.into_iter().enumerate() {
                out[i] = rank * 4 / values.len();
            }
            out
        };
        match self {
            Targets::Binary(v) => v.iter().map(|&b| b as usize).collect(),
            Targets::Classes { labels, .. } => labels.clone(),
            Targets::MultiLabel(v) => quartiles(v.iter().map(|r| r.iter().filter(|&&b| b).count() as f64).collect()),
            Targets::Regression(v) => quartiles(v.iter().map(|r| r.iter().sum::<f64>()).collect()),
        }
    }

    fn tensor<T: Scalar>(&self, rows: &[usize]) -> Result<Tensor<T>> {
        let flat: Vec<f64> = match self {
            Targets::MultiLabel(v) => rows.iter().flat_map(|&r| v[r].iter().map(|&b| b as u8 as f64)).collect(),
            Targets::Binary(v) => rows.iter().map(|&r| v[r] as u8 as f64).collect(),
            Targets::Regression(v) => rows.iter().flat_map(|&r| v[r].iter().copied()).collect(),
            Targets::Classes { .. } => unreachable!("class targets are indices"),
        };
        let width = flat.len() / rows.len().max(1);
        Ok(Tensor::from_f64(vec![rows.len(), width], &flat)?)
    }
}

/// Disjoint row sets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Deals the members of every stratum round-robin into `k` folds after a
/// seeded shuffle.
pub fn stratified_folds(strata: &[usize], k: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &s) in strata.iter().enumerate() {
        groups.entry(s).or_default().push(i);
    }
    let mut rng = rng_for(seed, "folds", 0);
    let mut folds = vec![Vec::new(); k];
    let mut next = 0;
    for members in groups.values_mut() {
        members.shuffle(&mut rng);
        for &m in members.iter() {
            folds[next % k].push(m);
            next += 1;
        }
    }
    folds.iter_mut().for_each(|f| f.sort_unstable());
    folds
}

/// 60/20/20 split from five folds: fold `r` tests, fold `r + 1`
/// validates, the rest trains.
pub fn rotation_split(folds: &[Vec<usize>], r: usize) -> Split {
    let k = folds.len();
    let mut train: Vec<usize> = (0..k)
        .filter(|&f| f != r % k && f != (r + 1) % k)
        .flat_map(|f| folds[f].iter().copied())
        .collect();
    train.sort_unstable();
    Split { train, val: folds[(r + 1) % k].clone(), test: folds[r % k].clone() }
}

pub fn stratified_split(targets: &Targets, seed: u64) -> Result<Split> {
    let split = rotation_split(&stratified_folds(&targets.strata(), 5, seed), 0);
    check_classes(targets, &split)?;
    Ok(split)
}

fn check_classes(targets: &Targets, split: &Split) -> Result<()> {
    let strata = match targets {
        Targets::Binary(_) | Targets::Classes { .. } => targets.strata(),
        _ => return Ok(()),
    };
    let all: std::collections::BTreeSet<usize> = strata.iter().copied().collect();
    let train: std::collections::BTreeSet<usize> = split.train.iter().map(|&r| strata[r]).collect();
    let missing: Vec<usize> = all.difference(&train).copied().collect();
    if !missing.is_empty() {
        return Err(Error::Stratification(format!("classes {missing:?} have no training example")));
    }
    Ok(())
}

/// Linear, ReLU, linear.
#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl Mlp {
    pub fn register<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dims: [usize; 3],
        rng: &mut R,
    ) -> Result<Self> {
        let [i, h, o] = dims;
        Ok(Mlp {
            w1: store.add(format!("{name}.w1"), init_linear(i, h, rng))?,
            b1: store.add(format!("{name}.b1"), Tensor::zeros(vec![h]))?,
            w2: store.add(format!("{name}.w2"), init_linear(h, o, rng))?,
            b2: store.add(format!("{name}.b2"), Tensor::zeros(vec![o]))?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (w1, b1, w2, b2) = (g.param(self.w1), g.param(self.b1), g.param(self.w2), g.param(self.b2));
        let h = g.matmul(x, w1)?;
        let h = g.add_row(h, b1)?;
        let h = g.relu(h);
        let o = g.matmul(h, w2)?;
        Ok(g.add_row(o, b2)?)
    }
}

/// `MLP_head([MLP_p(z) ‖ MLP_t(u)])` over frozen inputs.
#[derive(Clone, Debug)]
pub struct ProbeHead<T: Scalar> {
    pub store: ParamStore<T>,
    pub mobility: Mlp,
    pub text: Mlp,
    pub head: Mlp,
}

impl<T: Scalar> ProbeHead<T> {
    pub fn new(mobility_dim: usize, text_dim: usize, hidden: usize, out: usize, seed: u64) -> Result<Self> {
        let mut rng = rng_for(seed, "probe-init", 0);
        let mut store = ParamStore::new();
        let mobility = Mlp::register(&mut store, "probe.mobility", [mobility_dim, hidden, hidden], &mut rng)?;
        let text = Mlp::register(&mut store, "probe.text", [text_dim, hidden, hidden], &mut rng)?;
        let head = Mlp::register(&mut store, "probe.head", [2 * hidden, hidden, out], &mut rng)?;
        Ok(ProbeHead { store, mobility, text, head })
    }

    /// Raw outputs (logits or regression values), `[n, out]`.
    pub fn forward(&self, g: &mut Graph<'_, T>, z: Tensor<T>, u: Tensor<T>) -> Result<Var> {
        let z = g.constant(z);
        let u = g.constant(u);
        let a = self.mobility.forward(g, z)?;
        let b = self.text.forward(g, u)?;
        let c = g.concat(&[a, b])?;
        self.head.forward(g, c)
    }
}

pub fn task_loss<T: Scalar>(g: &mut Graph<'_, T>, task: Task, out: Var, targets: &Targets, rows: &[usize]) -> Result<Var> {
    Ok(match (task, targets) {
        (Task::OpenHours | Task::Closure, _) => g.bce_with_logits(out, targets.tensor(rows)?)?,
        (Task::Busyness, _) => g.mse(out, targets.tensor(rows)?)?,
        (_, Targets::Classes { labels, .. }) => {
            let t: Vec<usize> = rows.iter().map(|&r| labels[r]).collect();
            g.cross_entropy(out, &t)?
        }
        _ => return Err(Error::Config(format!("targets do not fit task {task}"))),
    })
}

/// Converts raw outputs to probabilities (or values for regression).
fn activate(task: Task, raw: &[f64], width: usize) -> Vec<Vec<f64>> {
    raw.chunks(width)
        .map(|r| match task {
            Task::OpenHours | Task::Closure => r.iter().map(|&x| sigmoid(x)).collect(),
            Task::Intent | Task::Price => {
                let m = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = r.iter().map(|x| (x - m).exp()).collect();
                let s: f64 = e.iter().sum();
                e.into_iter().map(|x| x / s).collect()
            }
            Task::Busyness => r.to_vec(),
        })
        .collect()
}

/// Metric pair of a task; `None` where undefined.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub names: [String; 2],
    pub values: [Option<f64>; 2],
}

impl TaskMetrics {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.names.iter().position(|n| n == name).and_then(|i| self.values[i])
    }
}

/// Evaluates task outputs (already activated) against the targets of `rows`.
pub fn evaluate(task: Task, outputs: &[Vec<f64>], targets: &Targets, rows: &[usize]) -> TaskMetrics {
    let values = match targets {
        Targets::MultiLabel(v) => {
            let l: Vec<Vec<bool>> = rows.iter().map(|&r| v[r].clone()).collect();
            [metrics::multilabel_f1(outputs, &l), metrics::multilabel(outputs, &l, metrics::auroc)]
        }
        Targets::Binary(v) => {
            let l: Vec<bool> = rows.iter().map(|&r| v[r]).collect();
            let s: Vec<f64> = outputs.iter().map(|o| o[0]).collect();
            let p: Vec<bool> = s.iter().map(|&x| x >= 0.5).collect();
            [Some(metrics::f1(&p, &l).unwrap_or(0.0)), metrics::auprc(&s, &l)]
        }
        Targets::Classes { labels, classes } => {
            let l: Vec<usize> = rows.iter().map(|&r| labels[r]).collect();
            let p: Vec<usize> = outputs.iter().map(|o| metrics::argmax(o)).collect();
            let f1 = metrics::macro_f1(&p, &l, *classes);
            if task == Task::Price {
                [Some(metrics::accuracy(&p, &l)), Some(f1)]
            } else {
                [Some(f1), metrics::macro_auprc(outputs, &l, *classes)]
            }
        }
        Targets::Regression(v) => {
            let t: Vec<Vec<f64>> = rows.iter().map(|&r| v[r].clone()).collect();
            [Some(metrics::mae(outputs, &t)), Some(metrics::mean_cosine(outputs, &t))]
        }
    };
    TaskMetrics { names: task.metric_names().map(String::from), values }
}

/// Model-selection score: the primary metric oriented so that larger is
/// better.
fn selection_score(task: Task, m: &TaskMetrics) -> f64 {
    match m.values[task.primary()] {
        Some(v) if task.higher_is_better() => v,
        Some(v) => -v,
        None => f64::NEG_INFINITY,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRun {
    pub task: Task,
    pub mode: ProbeMode,
    pub seed: u64,
    pub metrics: TaskMetrics,
    pub best_epoch: usize,
    pub epochs: usize,
    pub test_rows: Vec<usize>,
    #[serde(skip)]
    pub test_outputs: Vec<Vec<f64>>,
}

impl ProbeRun {
    pub fn primary(&self) -> Option<f64> {
        self.metrics.values[self.task.primary()]
    }
}

impl<T: Scalar> ProbeHead<T> {
    pub fn predict(&self, task: Task, inputs: &ProbeInputs, rows: &[usize], mode: ProbeMode) -> Result<Vec<Vec<f64>>> {
        if rows.is_empty() {
            return Ok(Vec::new());
        }
        let (z, u) = inputs.batch::<T>(rows, mode)?;
        let mut g = Graph::new(&self.store);
        let out = self.forward(&mut g, z, u)?;
        Ok(activate(task, &g.value(out).to_f64_vec(), task.output_dim()))
    }
}

/// Trains a head on `split.train`, early-stops on the validation primary
/// metric and reports test metrics of the best epoch.
pub fn finetune<T: Scalar>(
    task: Task,
    inputs: &ProbeInputs,
    targets: &Targets,
    split: &Split,
    mode: ProbeMode,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<(ProbeRun, ProbeHead<T>)> {
    cfg.validate()?;
    if targets.len() != inputs.len() {
        return Err(Error::Config(format!("{} targets for {} POIs", targets.len(), inputs.len())));
    }
    check_classes(targets, split)?;
    let mut probe = ProbeHead::<T>::new(inputs.mobility_dim, inputs.text_dim, cfg.hidden, task.output_dim(), seed)?;
    let mut opt = OptimizerState::new(AdamConfig::adamw(cfg.learning_rate, cfg.weight_decay), &probe.store);
    let mut best = (f64::NEG_INFINITY, 0usize, probe.store.clone());
    let mut order = split.train.clone();
    let mut epochs = 0;
    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng_for(seed, "probe-epoch", epoch as u64));
        for rows in order.chunks(cfg.batch_size) {
            let (z, u) = inputs.batch::<T>(rows, mode)?;
            let grads = {
                let mut g = Graph::new(&probe.store);
                let out = probe.forward(&mut g, z, u)?;
                let loss = task_loss(&mut g, task, out, targets, rows)?;
                g.backward(loss)?
            };
            opt.step(&mut probe.store, &grads)?;
        }
        epochs = epoch + 1;
        let val = evaluate(task, &probe.predict(task, inputs, &split.val, mode)?, targets, &split.val);
        let score = selection_score(task, &val);
        if score > best.0 || epoch == 0 {
            best = (score, epoch, probe.store.clone());
        } else if epoch - best.1 >= cfg.patience {
            break;
        }
    }
    probe.store = best.2;
    let test_outputs = probe.predict(task, inputs, &split.test, mode)?;
    let metrics = evaluate(task, &test_outputs, targets, &split.test);
    let run = ProbeRun {
        task,
        mode,
        seed,
        metrics,
        best_epoch: best.1 + 1,
        epochs,
        test_rows: split.test.clone(),
        test_outputs,
    };
    Ok((run, probe))
}

/// Out-of-fold outputs for every row: five rotations of the 60/20/20
/// split so that each row is tested exactly once.
pub fn cross_fit<T: Scalar>(
    task: Task,
    inputs: &ProbeInputs,
    targets: &Targets,
    mode: ProbeMode,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let folds = stratified_folds(&targets.strata(), 5, seed);
    let runs = par::map(&[0usize, 1, 2, 3, 4], |&r| {
        finetune::<T>(task, inputs, targets, &rotation_split(&folds, r), mode, cfg, seed ^ r as u64).map(|x| x.0)
    });
    let mut out = vec![Vec::new(); inputs.len()];
    for run in runs {
        let run = run?;
        for (row, o) in run.test_rows.iter().zip(run.test_outputs) {
            out[*row] = o;
        }
    }
    Ok(out)
}

/// Every `(task, mode, seed)` combination, run in parallel. Each seed
/// fixes its own split and head initialisation.
pub fn run_suite<T: Scalar>(
    world: &World,
    inputs: &ProbeInputs,
    tasks: &[Task],
    modes: &[ProbeMode],
    seeds: &[u64],
    cfg: &ProbeConfig,
) -> Result<Vec<ProbeRun>> {
    let targets: BTreeMap<Task, Targets> = tasks.iter().map(|&t| (t, Targets::of(t, world))).collect();
    let mut jobs = Vec::new();
    for &t in tasks {
        for &m in modes {
            for &s in seeds {
                jobs.push((t, m, s));
            }
        }
    }
    let runs = par::map(&jobs, |&(t, m, s)| {
        let tg = &targets[&t];
        let split = stratified_split(tg, s)?;
        finetune::<T>(t, inputs, tg, &split, m, cfg, s).map(|r| r.0)
    });
    runs.into_iter().collect()
}

/// Mean of each metric per `(task, mode)` over seeds.
pub fn summarize(runs: &[ProbeRun]) -> BTreeMap<(Task, ProbeMode), [Option<f64>; 2]> {
    let mut acc: BTreeMap<(Task, ProbeMode), Vec<&ProbeRun>> = BTreeMap::new();
    for r in runs {
        acc.entry((r.task, r.mode)).or_default().push(r);
    }
    acc.into_iter()
        .map(|(k, rs)| {
            let mean = |i: usize| metrics::macro_mean(rs.iter().map(|r| r.metrics.values[i]));
            (k, [mean(0), mean(1)])
        })
        .collect()
}

/// Markdown table with one row per mode and a metric pair per task.
pub fn markdown_summary(runs: &[ProbeRun]) -> String {
    let summary = summarize(runs);
    let tasks: Vec<Task> = Task::ALL.into_iter().filter(|t| summary.keys().any(|k| k.0 == *t)).collect();
    let modes: Vec<ProbeMode> = ProbeMode::ALL.into_iter().filter(|m| summary.keys().any(|k| k.1 == *m)).collect();
    let mut s = String::from("| Embedding |");
    for t in &tasks {
        let [a, b] = t.metric_names();
        let _ = write!(s, " {t} {a} | {t} {b} |");
    }
    s.push_str("\n|---|");
    s.push_str(&"---|---|".repeat(tasks.len()));
    s.push('\n');
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
    for m in modes {
        let _ = write!(s, "| {} |", m.name());
        for t in &tasks {
            let [a, b] = summary.get(&(*t, m)).copied().unwrap_or([None, None]);
            let _ = write!(s, " {} | {} |", fmt(a), fmt(b));
        }
        s.push('\n');
    }
    s
}

pub const REPORT_JSON: &str = "metrics.json";
pub const REPORT_MD: &str = "summary.md";

pub fn write_report(dir: &Path, runs: &[ProbeRun]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(REPORT_JSON), serde_json::to_string_pretty(runs)?)?;
    std::fs::write(dir.join(REPORT_MD), markdown_summary(runs))?;
    Ok(())
}

pub fn read_report(dir: &Path) -> Result<Vec<ProbeRun>> {
    let path = dir.join(REPORT_JSON);
    let text = std::fs::read_to_string(&path).map_err(|source| Error::File { path: path.display().to_string(), source })?;
    Ok(serde_json::from_str(&text)?)
}
