//! The optimization loop, LR scheduling, and evaluation metrics.
//!
//! A run owns the student (or teacher-in-training) parameters plus the
//! distiller's auxiliaries, and steps them jointly. The teacher passed into
//! a distillation run is immutable here; its per-sample artifacts are
//! captured once up front and reassembled per shuffled batch, since frozen
//! weights on fixed data make every epoch's teacher values identical.

use crate::data::Dataset;
use crate::distill::{DistillConfig, Distiller, Method, TeacherBatch};
use crate::graph::{Gradients, Graph, NodeId};
use crate::network::{Network, Param};
use crate::scalar::Scalar;
use crate::tensor::{Result, Tensor, TensorError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Consecutive non-improving epochs tolerated before the LR halves.
    pub patience: usize,
    pub factor: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm ceiling.
    pub clip: f64,
    pub seed: u64,
    pub kd: DistillConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch: 64,
            lr: 1e-3,
            patience: 10,
            factor: 0.5,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            clip: 1.0,
            seed: 0,
            kd: DistillConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |detail: String| TensorError::BadParam { op: "train_config", detail };
        if self.epochs == 0 || self.batch == 0 {
            return Err(bad("epochs and batch must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.clip > 0.0) {
            return Err(bad(format!("lr {} and clip {} must be positive", self.lr, self.clip)));
        }
        if !(0.0 < self.factor && self.factor < 1.0) {
            return Err(bad(format!("factor {} outside (0, 1)", self.factor)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(bad(format!("{name} {b} outside [0, 1)")));
            }
        }
        self.kd.validate()
    }
}

// ---- optimizer ---------------------------------------------------------------

pub struct Adam<S> {
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
    t: u64,
    beta1: S,
    beta2: S,
    eps: S,
}

impl<S: Scalar> Adam<S> {
    pub fn new(params: &[Param<S>], cfg: &TrainConfig) -> Self {
        Self {
            m: params.iter().map(|p| Tensor::zeros(p.value.shape().to_vec())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.value.shape().to_vec())).collect(),
            t: 0,
            beta1: S::from_f64(cfg.beta1),
            beta2: S::from_f64(cfg.beta2),
            eps: S::from_f64(cfg.adam_eps),
        }
    }

    /// One update over parameters and same-order gradients.
    pub fn step(&mut self, params: &mut [&mut Param<S>], grads: &[Tensor<S>], lr: f64) {
        self.t += 1;
        let one = S::ONE;
        let b1 = self.beta1;
        let b2 = self.beta2;
        let c1 = one / (one - pow_s(b1, self.t));
        let c2 = one / (one - pow_s(b2, self.t));
        let lr = S::from_f64(lr);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(&mut self.v)) {
            for ((pv, &gv), (mv, vv)) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut()))
            {
                *mv = b1 * *mv + (one - b1) * gv;
                *vv = b2 * *vv + (one - b2) * gv * gv;
                let mhat = *mv * c1;
                let vhat = *vv * c2;
                *pv -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

fn pow_s<S: Scalar>(b: S, n: u64) -> S {
    let mut out = S::ONE;
    for _ in 0..n {
        out *= b;
    }
    out
}

/// Scale gradients so the global Euclidean norm is at most `clip`; returns
/// the pre-clip norm.
pub fn clip_global<S: Scalar>(grads: &mut [Tensor<S>], clip: f64) -> f64 {
    let mut sq = 0.0f64;
    for g in grads.iter() {
        for &v in g.data() {
            let v = v.to_f64();
            sq += v * v;
        }
    }
    let norm = sq.sqrt();
    if norm > clip {
        let s = S::from_f64(clip / norm);
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

// ---- scheduler ---------------------------------------------------------------

/// Halve-on-plateau: strictly lower validation loss counts as improvement;
/// more than `patience` consecutive non-improvements halves the rate and
/// resets the counter.
#[derive(Debug, Clone)]
pub struct Plateau {
    pub lr: f64,
    best: f64,
    bad: usize,
    patience: usize,
    factor: f64,
}

impl Plateau {
    pub fn new(lr: f64, patience: usize, factor: f64) -> Self {
        Self { lr, best: f64::INFINITY, bad: 0, patience, factor }
    }

    pub fn step(&mut self, val_loss: f64) -> f64 {
        if val_loss < self.best {
            self.best = val_loss;
            self.bad = 0;
        } else {
            self.bad += 1;
            if self.bad > self.patience {
                self.lr *= self.factor;
                self.bad = 0;
            }
        }
        self.lr
    }
}

// ---- metrics -----------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub n: usize,
    pub accuracy: f64,
    /// Support-weighted mean of per-class F1.
    pub f1_weighted: f64,
    pub f1_macro: f64,
    /// `confusion[true_class][predicted_class]` counts.
    pub confusion: Vec<Vec<usize>>,
}

/// Metrics from (true, predicted) class pairs.
pub fn metrics_from(pairs: &[(usize, usize)], classes: usize) -> Result<Metrics> {
    if pairs.is_empty() {
        return Err(TensorError::BadParam { op: "metrics", detail: "no samples".into() });
    }
    let mut confusion = vec![vec![0usize; classes]; classes];
    for &(t, p) in pairs {
        if t >= classes || p >= classes {
            return Err(TensorError::BadLabel { label: t.max(p), classes });
        }
        confusion[t][p] += 1;
    }
    let n = pairs.len();
    let correct: usize = (0..classes).map(|c| confusion[c][c]).sum();
    let mut f1_weighted = 0.0;
    let mut f1_macro = 0.0;
    for c in 0..classes {
        let support: usize = confusion[c].iter().sum();
        let predicted: usize = (0..classes).map(|r| confusion[r][c]).sum();
        let tp = confusion[c][c];
        let f1 = if tp == 0 {
            0.0
        } else {
            let precision = tp as f64 / predicted as f64;
            let recall = tp as f64 / support as f64;
            2.0 * precision * recall / (precision + recall)
        };
        f1_weighted += f1 * support as f64 / n as f64;
        f1_macro += f1 / classes as f64;
    }
    Ok(Metrics { n, accuracy: correct as f64 / n as f64, f1_weighted, f1_macro, confusion })
}

fn argmax_rows<S: Scalar>(logits: &Tensor<S>) -> Vec<usize> {
    let c = logits.last_dim();
    logits
        .data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

fn data_err(e: crate::data::DataError) -> TensorError {
    TensorError::BadParam { op: "dataset", detail: e.to_string() }
}

/// Task loss and (true, predicted) pairs over a dataset, batched forward.
fn score<S: Scalar>(
    net: &Network<S>,
    ds: &Dataset,
    batch: usize,
) -> Result<(f64, Vec<(usize, usize)>)> {
    let n = ds.len();
    let mut pairs = Vec::with_capacity(n);
    let mut loss_sum = 0.0f64;
    let mut at = 0;
    while at < n {
        let hi = (at + batch).min(n);
        let idx: Vec<usize> = (at..hi).collect();
        let (b, classes) = ds.batch::<S>(&idx).map_err(data_err)?;
        let mut g = Graph::new();
        let fwd = net.forward(&mut g, &b, false)?;
        let task = g.cross_entropy(fwd.logits, &classes)?;
        loss_sum += g.value(task).data()[0].to_f64() * idx.len() as f64;
        for (t, p) in classes.iter().zip(argmax_rows(g.value(fwd.logits))) {
            pairs.push((*t, p));
        }
        at = hi;
    }
    Ok((loss_sum / n as f64, pairs))
}

pub fn evaluate<S: Scalar>(net: &Network<S>, ds: &Dataset, batch: usize) -> Result<Metrics> {
    let (_, pairs) = score(net, ds, batch)?;
    metrics_from(&pairs, net.cfg.classes)
}

// ---- teacher cache -----------------------------------------------------------

/// Per-sample teacher artifacts for one dataset, captured once.
pub struct TeacherCache<S> {
    samples: Vec<TeacherBatch<S>>,
}

fn slice_rows<S: Scalar>(t: &Tensor<S>, i: usize) -> Tensor<S> {
    let row: usize = t.shape()[1..].iter().product();
    let mut shape = t.shape().to_vec();
    shape[0] = 1;
    Tensor::new(shape, t.data()[i * row..(i + 1) * row].to_vec()).unwrap()
}

fn stack_rows<S: Scalar>(parts: &[&Tensor<S>]) -> Tensor<S> {
    let mut shape = parts[0].shape().to_vec();
    shape[0] = parts.iter().map(|p| p.shape()[0]).sum();
    let mut data = Vec::with_capacity(shape.iter().product());
    for p in parts {
        data.extend_from_slice(p.data());
    }
    Tensor::new(shape, data).unwrap()
}

impl<S: Scalar> TeacherCache<S> {
    pub fn build(
        distiller: &Distiller<S>,
        teacher: &Network<S>,
        ds: &Dataset,
        chunk: usize,
    ) -> Result<Self> {
        let n = ds.len();
        let mut samples = Vec::with_capacity(n);
        let mut at = 0;
        while at < n {
            let hi = (at + chunk).min(n);
            let idx: Vec<usize> = (at..hi).collect();
            let (b, _) = ds.batch::<S>(&idx).map_err(data_err)?;
            let captured = distiller.capture(teacher, &b)?;
            for i in 0..idx.len() {
                samples.push(match &captured {
                    TeacherBatch::Feature(t) => TeacherBatch::Feature(slice_rows(t, i)),
                    TeacherBatch::PerPairLayer(pp) => TeacherBatch::PerPairLayer(
                        pp.iter()
                            .map(|layers| layers.iter().map(|t| slice_rows(t, i)).collect())
                            .collect(),
                    ),
                });
            }
            at = hi;
        }
        Ok(Self { samples })
    }

    pub fn assemble(&self, idx: &[usize]) -> Result<TeacherBatch<S>> {
        let first = idx.first().ok_or_else(|| TensorError::BadParam {
            op: "teacher_cache",
            detail: "empty batch".into(),
        })?;
        Ok(match &self.samples[*first] {
            TeacherBatch::Feature(_) => {
                let rows: Vec<&Tensor<S>> = idx
                    .iter()
                    .map(|&i| match &self.samples[i] {
                        TeacherBatch::Feature(t) => t,
                        _ => unreachable!(),
                    })
                    .collect();
                TeacherBatch::Feature(stack_rows(&rows))
            }
            TeacherBatch::PerPairLayer(pp0) => {
                let pairs = pp0.len();
                let layers = pp0[0].len();
                let mut out = Vec::with_capacity(pairs);
                for pi in 0..pairs {
                    let mut per_layer = Vec::with_capacity(layers);
                    for li in 0..layers {
                        let rows: Vec<&Tensor<S>> = idx
                            .iter()
                            .map(|&i| match &self.samples[i] {
                                TeacherBatch::PerPairLayer(pp) => &pp[pi][li],
                                _ => unreachable!(),
                            })
                            .collect();
                        per_layer.push(stack_rows(&rows));
                    }
                    out.push(per_layer);
                }
                TeacherBatch::PerPairLayer(out)
            }
        })
    }
}

// ---- history -----------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_task: f64,
    pub train_kd: f64,
    pub train_total: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val: f64,
}

impl History {
    /// One JSON object per line, append-friendly.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(e).expect("record serializes"));
            out.push('\n');
        }
        out
    }
}

// ---- the loop ------------------------------------------------------------------

/// Shuffled batch index lists for one epoch; a trailing singleton is dropped
/// because in-batch contrast is undefined on one sample.
pub fn epoch_batches(n: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    let mut out: Vec<Vec<usize>> = idx.chunks(batch).map(|c| c.to_vec()).collect();
    if out.last().map(|c| c.len()) == Some(1) && out.len() > 1 {
        out.pop();
    }
    out
}

fn gather_grads<S: Scalar>(
    grads: &Gradients<S>,
    nodes: &[NodeId],
    params: &[Param<S>],
) -> Vec<Tensor<S>> {
    nodes
        .iter()
        .zip(params)
        .map(|(&n, p)| grads.get_or_zeros(n, p.value.shape()))
        .collect()
}

/// Trains `net` in place semantics-wise (returned by value), distilling from
/// `teacher` when the config names a method. Weights from the epoch with the
/// lowest validation task loss are the ones returned.
pub fn train<S: Scalar>(
    mut net: Network<S>,
    teacher: Option<&Network<S>>,
    train_ds: &Dataset,
    val_ds: &Dataset,
    cfg: &TrainConfig,
) -> Result<(Network<S>, Distiller<S>, History)> {
    cfg.validate()?;
    let mut distiller = Distiller::new(cfg.kd.clone(), &net, teacher, cfg.seed)?;
    let cache = match (cfg.kd.method, teacher) {
        (Method::None, _) => None,
        (_, Some(t)) => Some(TeacherCache::build(&distiller, t, train_ds, cfg.batch)?),
        (_, None) => unreachable!("distiller creation requires the teacher"),
    };

    let mut adam = {
        let mut all: Vec<Param<S>> = net.params.clone();
        all.extend(distiller.aux.iter().cloned());
        Adam::new(&all, cfg)
    };
    let mut sched = Plateau::new(cfg.lr, cfg.patience, cfg.factor);
    let mut history = History { epochs: Vec::with_capacity(cfg.epochs), best_epoch: 0, best_val: f64::INFINITY };
    let mut best_params: Option<Vec<Param<S>>> = None;

    for epoch in 0..cfg.epochs {
        let lr = sched.lr;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1 + epoch as u64));
        let batches = epoch_batches(train_ds.len(), cfg.batch, &mut rng);
        let (mut task_sum, mut kd_sum, mut total_sum, mut seen) = (0.0, 0.0, 0.0, 0usize);
        for idx in &batches {
            let (b, classes) = train_ds.batch::<S>(idx).map_err(data_err)?;
            let teacher_batch = match &cache {
                Some(c) => Some(c.assemble(idx)?),
                None => None,
            };
            let mut g = Graph::new();
            let fwd = net.forward(&mut g, &b, true)?;
            let aux_nodes = distiller.bind_aux(&mut g)?;
            let nodes = distiller.loss(&mut g, &fwd, &classes, teacher_batch.as_ref(), &aux_nodes)?;
            let grads = g.backward(nodes.total)?;

            let mut flat = gather_grads(&grads, &fwd.param_nodes, &net.params);
            flat.extend(gather_grads(&grads, &aux_nodes, &distiller.aux));
            clip_global(&mut flat, cfg.clip);
            let mut refs: Vec<&mut Param<S>> = net
                .params
                .iter_mut()
                .chain(distiller.aux.iter_mut())
                .collect();
            adam.step(&mut refs, &flat, lr);

            let bsz = idx.len() as f64;
            task_sum += g.value(nodes.task).data()[0].to_f64() * bsz;
            kd_sum += nodes.kd.map_or(0.0, |k| g.value(k).data()[0].to_f64()) * bsz;
            total_sum += g.value(nodes.total).data()[0].to_f64() * bsz;
            seen += idx.len();
        }

        let (val_loss, val_pairs) = score(&net, val_ds, cfg.batch)?;
        let val_accuracy =
            val_pairs.iter().filter(|(t, p)| t == p).count() as f64 / val_pairs.len() as f64;
        let denom = (seen.max(1)) as f64;
        history.epochs.push(EpochRecord {
            epoch,
            train_task: task_sum / denom,
            train_kd: kd_sum / denom,
            train_total: total_sum / denom,
            val_loss,
            val_accuracy,
            lr,
        });
        if val_loss < history.best_val {
            history.best_val = val_loss;
            history.best_epoch = epoch;
            best_params = Some(net.params.clone());
        }
        sched.step(val_loss);
    }

    if let Some(p) = best_params {
        net.params = p;
    }
    Ok((net, distiller, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, SyntheticSpec};
    use crate::network::{Alignment, ModalityDims, NetworkConfig, StudentConfig, TeacherKind};

    fn tiny_cfg() -> NetworkConfig {
        NetworkConfig {
            d_model: 8,
            n_h: 2,
            l: 1,
            head_hidden: 8,
            ffn_mult: 2,
            classes: 7,
            kernels: [3, 3, 3],
            dims: ModalityDims { d_v: 8, d_a: 12, d_l: 16, t_v: 24, t_a: 12, t_l: 6 },
        }
    }

    fn tiny_data(n: usize, seed: u64) -> Dataset {
        generate(&SyntheticSpec::desk(n, seed)).unwrap()
    }

    fn quick_train_cfg(epochs: usize, method: Method) -> TrainConfig {
        TrainConfig {
            epochs,
            batch: 16,
            seed: 7,
            kd: DistillConfig { method, ..Default::default() },
            ..Default::default()
        }
    }

    #[test]
    fn plateau_halves_after_patience_plus_one_bad_epochs() {
        let mut s = Plateau::new(1e-3, 10, 0.5);
        assert_eq!(s.step(1.0), 1e-3); // first value improves on +inf
        for _ in 0..10 {
            assert_eq!(s.step(1.0), 1e-3);
        }
        assert_eq!(s.step(1.0), 5e-4); // 11th bad epoch
    }

    #[test]
    fn plateau_never_moves_while_improving() {
        let mut s = Plateau::new(1e-3, 10, 0.5);
        let mut v = 10.0;
        for _ in 0..50 {
            assert_eq!(s.step(v), 1e-3);
            v *= 0.99;
        }
    }

    #[test]
    fn plateau_two_plateaus_quarter_the_rate() {
        let mut s = Plateau::new(1e-3, 10, 0.5);
        s.step(1.0);
        for _ in 0..11 {
            s.step(1.0);
        }
        assert_eq!(s.lr, 5e-4);
        for _ in 0..11 {
            s.step(1.0);
        }
        assert_eq!(s.lr, 2.5e-4);
    }

    #[test]
    fn plateau_equal_loss_is_not_improvement() {
        let mut s = Plateau::new(1.0, 1, 0.5);
        s.step(2.0);
        s.step(2.0); // equal: bad 1
        s.step(2.0); // bad 2 > patience 1 -> halve
        assert_eq!(s.lr, 0.5);
    }

    #[test]
    fn adam_first_step_matches_hand_computation() {
        let cfg = TrainConfig::default();
        let params = vec![Param { name: "p".into(), value: Tensor::<f64>::filled(vec![2], 1.0) }];
        let mut adam = Adam::new(&params, &cfg);
        let mut p = params;
        let g = vec![Tensor::new(vec![2], vec![0.5, -2.0]).unwrap()];
        let mut refs: Vec<&mut Param<f64>> = p.iter_mut().collect();
        adam.step(&mut refs, &g, 1e-3);
        // Bias-corrected first step is lr * g / (|g| + eps).
        for (got, gv) in p[0].value.data().iter().zip([0.5f64, -2.0]) {
            let want = 1.0 - 1e-3 * gv / (gv.abs() + 1e-8);
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let cfg = TrainConfig::default();
        let mut p = vec![Param { name: "x".into(), value: Tensor::<f64>::filled(vec![1], 4.0) }];
        let mut adam = Adam::new(&p, &cfg);
        for _ in 0..3000 {
            let x = p[0].value.data()[0];
            let g = vec![Tensor::new(vec![1], vec![2.0 * (x - 1.5)]).unwrap()];
            let mut refs: Vec<&mut Param<f64>> = p.iter_mut().collect();
            adam.step(&mut refs, &g, 5e-3);
        }
        assert!((p[0].value.data()[0] - 1.5).abs() < 1e-2);
    }

    #[test]
    fn clip_rescales_only_above_the_ceiling() {
        let mut g = vec![Tensor::new(vec![2], vec![3.0f64, 4.0]).unwrap()];
        let norm = clip_global(&mut g, 1.0);
        assert_eq!(norm, 5.0);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-12);
        assert!((g[0].data()[1] - 0.8).abs() < 1e-12);
        let mut small = vec![Tensor::new(vec![2], vec![0.3f64, 0.4]).unwrap()];
        clip_global(&mut small, 1.0);
        assert_eq!(small[0].data(), &[0.3, 0.4]);
    }

    #[test]
    fn metrics_perfect_and_constant_predictors() {
        let perfect: Vec<(usize, usize)> = (0..70).map(|i| (i % 7, i % 7)).collect();
        let m = metrics_from(&perfect, 7).unwrap();
        assert_eq!(m.accuracy, 1.0);
        assert!((m.f1_weighted - 1.0).abs() < 1e-12);
        assert!((m.f1_macro - 1.0).abs() < 1e-12);

        let constant: Vec<(usize, usize)> = (0..70).map(|i| (i % 7, 0)).collect();
        let m = metrics_from(&constant, 7).unwrap();
        assert!((m.accuracy - 1.0 / 7.0).abs() < 1e-12);
        // Class 0: precision 1/7, recall 1 -> f1 = 0.25; all others 0.
        assert!((m.f1_weighted - 0.25 / 7.0).abs() < 1e-12);
        assert!((m.f1_macro - 0.25 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn metrics_match_a_hand_computed_fixture() {
        // 20 samples over three active classes.
        // true 0: 6 samples -> predicted 0,0,0,0,1,2
        // true 1: 9 samples -> predicted 1,1,1,1,1,1,0,0,2
        // true 2: 5 samples -> predicted 2,2,2,1,0
        let pairs = vec![
            (0, 0), (0, 0), (0, 0), (0, 0), (0, 1), (0, 2),
            (1, 1), (1, 1), (1, 1), (1, 1), (1, 1), (1, 1), (1, 0), (1, 0), (1, 2),
            (2, 2), (2, 2), (2, 2), (2, 1), (2, 0),
        ];
        let m = metrics_from(&pairs, 7).unwrap();
        assert_eq!(m.n, 20);
        assert!((m.accuracy - 13.0 / 20.0).abs() < 1e-12);
        // Hand computation:
        // class 0: tp=4, predicted=7, support=6 -> p=4/7, r=4/6, f1=8/13
        // class 1: tp=6, predicted=8, support=9 -> p=6/8, r=6/9, f1=12/17
        // class 2: tp=3, predicted=5, support=5 -> p=3/5, r=3/5, f1=3/5
        let f0: f64 = 8.0 / 13.0;
        let f1: f64 = 12.0 / 17.0;
        let f2: f64 = 3.0 / 5.0;
        let weighted = (6.0 * f0 + 9.0 * f1 + 5.0 * f2) / 20.0;
        let macro_ = (f0 + f1 + f2) / 7.0;
        assert!((m.f1_weighted - weighted).abs() < 1e-12);
        assert!((m.f1_macro - macro_).abs() < 1e-12);
        assert_eq!(m.confusion[1][0], 2);
    }

    #[test]
    fn epoch_batches_cover_everything_and_drop_singletons() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batches = epoch_batches(65, 16, &mut rng);
        // 65 = 16*4 + 1: the singleton tail goes away.
        assert_eq!(batches.len(), 4);
        let mut seen: Vec<usize> = batches.concat();
        assert_eq!(seen.len(), 64);
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 64);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let exact = epoch_batches(32, 16, &mut rng);
        assert_eq!(exact.iter().map(|b| b.len()).sum::<usize>(), 32);
    }

    #[test]
    fn teacher_cache_assembles_bit_identical_batches() {
        let cfg = tiny_cfg();
        let ds = tiny_data(12, 4);
        let teacher = Network::<f32>::teacher(cfg.clone(), TeacherKind::Complete, 1).unwrap();
        let student = Network::<f32>::student(cfg, StudentConfig::C5, Alignment::SDown, 2).unwrap();
        let dcfg = DistillConfig { method: Method::EdamSDown, ..Default::default() };
        let distiller = Distiller::new(dcfg, &student, Some(&teacher), 3).unwrap();
        let cache = TeacherCache::build(&distiller, &teacher, &ds, 5).unwrap();
        let idx = vec![7usize, 0, 11, 3];
        let (b, _) = ds.batch::<f32>(&idx).unwrap();
        let direct = distiller.capture(&teacher, &b).unwrap();
        let assembled = cache.assemble(&idx).unwrap();
        match (direct, assembled) {
            (TeacherBatch::PerPairLayer(a), TeacherBatch::PerPairLayer(b)) => {
                for (pa, pb) in a.iter().zip(&b) {
                    for (la, lb) in pa.iter().zip(pb) {
                        assert_eq!(la.shape(), lb.shape());
                        assert_eq!(la.data(), lb.data());
                    }
                }
            }
            _ => panic!("variant mismatch"),
        }
    }

    #[test]
    fn short_teacher_run_decreases_training_loss() {
        let cfg = tiny_cfg();
        let ds = tiny_data(64, 5);
        let (tr, va) = (ds.subset(&(0..48).collect::<Vec<_>>()), ds.subset(&(48..64).collect::<Vec<_>>()));
        let net = Network::<f32>::teacher(cfg, TeacherKind::Complete, 11).unwrap();
        let (_, _, h) = train(net, None, &tr, &va, &quick_train_cfg(3, Method::None)).unwrap();
        assert_eq!(h.epochs.len(), 3);
        assert!(
            h.epochs[2].train_total < h.epochs[0].train_total,
            "{} !< {}",
            h.epochs[2].train_total,
            h.epochs[0].train_total
        );
    }

    #[test]
    fn same_seed_reproduces_history_and_weights() {
        let cfg = tiny_cfg();
        let ds = tiny_data(40, 6);
        let (tr, va) = (ds.subset(&(0..32).collect::<Vec<_>>()), ds.subset(&(32..40).collect::<Vec<_>>()));
        let run = || {
            let teacher = Network::<f32>::teacher(cfg.clone(), TeacherKind::Complete, 1).unwrap();
            let student =
                Network::<f32>::student(cfg.clone(), StudentConfig::C5, Alignment::SDown, 2).unwrap();
            train(student, Some(&teacher), &tr, &va, &quick_train_cfg(2, Method::EdamSDown)).unwrap()
        };
        let (n1, _, h1) = run();
        let (n2, _, h2) = run();
        assert_eq!(h1, h2);
        for (a, b) in n1.params.iter().zip(&n2.params) {
            assert_eq!(a.value.data(), b.value.data(), "{}", a.name);
        }
    }

    #[test]
    fn teacher_stays_bit_identical_through_a_student_run() {
        let cfg = tiny_cfg();
        let ds = tiny_data(40, 8);
        let (tr, va) = (ds.subset(&(0..32).collect::<Vec<_>>()), ds.subset(&(32..40).collect::<Vec<_>>()));
        let teacher = Network::<f32>::teacher(cfg.clone(), TeacherKind::Complete, 1).unwrap();
        let before: Vec<Vec<f32>> = teacher.params.iter().map(|p| p.value.data().to_vec()).collect();
        let student = Network::<f32>::student(cfg, StudentConfig::C5, Alignment::SDown, 2).unwrap();
        let _ = train(student, Some(&teacher), &tr, &va, &quick_train_cfg(2, Method::EdamSDown)).unwrap();
        for (p, want) in teacher.params.iter().zip(&before) {
            assert_eq!(p.value.data(), want.as_slice(), "{}", p.name);
        }
    }

    #[test]
    fn kd_without_teacher_is_a_configuration_error() {
        let cfg = tiny_cfg();
        let ds = tiny_data(20, 9);
        let (tr, va) = (ds.subset(&(0..16).collect::<Vec<_>>()), ds.subset(&(16..20).collect::<Vec<_>>()));
        let student = Network::<f32>::student(cfg, StudentConfig::C5, Alignment::SDown, 2).unwrap();
        let err = train(student, None, &tr, &va, &quick_train_cfg(1, Method::EdamSDown)).unwrap_err();
        assert!(err.to_string().contains("teacher"));
    }

    #[test]
    fn beta_zero_matches_a_plain_run_exactly() {
        let cfg = tiny_cfg();
        let ds = tiny_data(24, 10);
        let (tr, va) = (ds.subset(&(0..16).collect::<Vec<_>>()), ds.subset(&(16..24).collect::<Vec<_>>()));
        let teacher = Network::<f32>::teacher(cfg.clone(), TeacherKind::Complete, 1).unwrap();
        let student = |seed| Network::<f32>::student(cfg.clone(), StudentConfig::C5, Alignment::SDown, seed).unwrap();
        let mut with_kd = quick_train_cfg(2, Method::EdamSDown);
        with_kd.kd.beta = 0.0;
        let (n1, _, _) = train(student(2), Some(&teacher), &tr, &va, &with_kd).unwrap();
        let (n2, _, _) = train(student(2), None, &tr, &va, &quick_train_cfg(2, Method::None)).unwrap();
        for (a, b) in n1.params.iter().zip(&n2.params) {
            assert_eq!(a.value.data(), b.value.data(), "{}", a.name);
        }
    }

    #[test]
    fn best_validation_weights_are_returned() {
        // Train long enough that the last epoch is usually not the best;
        // check the returned weights evaluate to the recorded best val loss.
        let cfg = tiny_cfg();
        let ds = tiny_data(48, 12);
        let (tr, va) = (ds.subset(&(0..40).collect::<Vec<_>>()), ds.subset(&(40..48).collect::<Vec<_>>()));
        let net = Network::<f32>::teacher(cfg, TeacherKind::Complete, 3).unwrap();
        let (best, _, h) = train(net, None, &tr, &va, &quick_train_cfg(4, Method::None)).unwrap();
        let (val_loss, _) = score(&best, &va, 16).unwrap();
        assert!((val_loss - h.best_val).abs() < 1e-6, "{val_loss} vs {}", h.best_val);
        assert_eq!(h.best_val, h.epochs[h.best_epoch].val_loss);
    }

    #[test]
    fn history_serializes_one_record_per_line() {
        let h = History {
            epochs: vec![
                EpochRecord { epoch: 0, train_task: 2.0, train_kd: 0.5, train_total: 2.5, val_loss: 1.9, val_accuracy: 0.2, lr: 1e-3 },
                EpochRecord { epoch: 1, train_task: 1.8, train_kd: 0.4, train_total: 2.2, val_loss: 1.7, val_accuracy: 0.3, lr: 1e-3 },
            ],
            best_epoch: 1,
            best_val: 1.7,
        };
        let text = h.to_jsonl();
        assert_eq!(text.lines().count(), 2);
        for line in text.lines() {
            let back: EpochRecord = serde_json::from_str(line).unwrap();
            assert!(back.lr > 0.0);
        }
    }
}
