//! Distillation losses tying a student run to a frozen teacher.
//!
//! Two families: contrastive representation distillation (CRD) applied at
//! four sites (final logits, penultimate head features, per-layer
//! post-attention features, attention-map rows), and EDAM, a cross-entropy
//! between paired attention maps re-softmaxed at a shared temperature.
//!
//! The teacher never joins the student's tape. Its forward runs on a scratch
//! graph and only the captured values enter the student graph, as constant
//! leaves, so no gradient can reach teacher weights by construction. The
//! learned upsampling maps of the T-up variant and all CRD projections are
//! auxiliary parameters owned by the student run and train alongside it.

use crate::graph::{Graph, NodeId};
use crate::network::{
    pair_map, Alignment, Batch, Forward, Network, Param, Role, StackId,
};
use crate::nn::AttnTap;
use crate::scalar::Scalar;
use crate::tensor::{self, Result, Tensor, TensorError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Keeps `log` finite when a student attention cell underflows to zero.
pub const LOG_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Site {
    Final,
    Penultimate,
    PostAttention,
    AttentionMap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Plain task training, no teacher.
    #[default]
    None,
    CrdFinal,
    CrdPenultimate,
    #[serde(rename = "crd_postattn")]
    CrdPostAttn,
    #[serde(rename = "crd_attnmap")]
    CrdAttnMap,
    EdamSDown,
    EdamTUp,
}

impl Method {
    pub fn needs_teacher(self) -> bool {
        self != Method::None
    }

    pub fn site(self) -> Option<Site> {
        match self {
            Method::CrdFinal => Some(Site::Final),
            Method::CrdPenultimate => Some(Site::Penultimate),
            Method::CrdPostAttn => Some(Site::PostAttention),
            Method::CrdAttnMap => Some(Site::AttentionMap),
            _ => None,
        }
    }

    /// Student front-end regime the method assumes. Everything except T-up
    /// runs the downsampled student; CRD on maps reuses the S-down shapes.
    pub fn alignment(self) -> Alignment {
        match self {
            Method::EdamTUp => Alignment::TUp,
            _ => Alignment::SDown,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub method: Method,
    /// Task-loss weight, in [0, 1].
    pub alpha: f64,
    /// Distillation weight, in [0, 1].
    pub beta: f64,
    /// CRD temperature.
    pub tau: f64,
    /// EDAM re-softmax temperature.
    pub temp: f64,
    /// CRD embedding width.
    pub d_crd: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self { method: Method::None, alpha: 1.0, beta: 1.0, tau: 0.1, temp: 1.0, d_crd: 32 }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |detail: String| TensorError::BadParam { op: "distill_config", detail };
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(0.0..=1.0).contains(&v) || !v.is_finite() {
                return Err(bad(format!("{name} {v} outside [0, 1]")));
            }
        }
        for (name, v) in [("tau", self.tau), ("temp", self.temp)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(bad(format!("{name} {v} is not positive")));
            }
        }
        if self.d_crd == 0 {
            return Err(bad("d_crd must be positive".into()));
        }
        Ok(())
    }
}

// ---- plain-value reference forms -------------------------------------------

/// Contrastive loss for one sample:
/// `-log( exp(s.t⁺/τ) / (exp(s.t⁺/τ) + Σ_k exp(s.n_k/τ)) )`.
pub fn crd_loss(s: &[f64], t_pos: &[f64], t_negs: &[Vec<f64>], tau: f64) -> Result<f64> {
    if t_negs.is_empty() {
        return Err(TensorError::BadParam {
            op: "crd_loss",
            detail: "contrast needs at least one negative".into(),
        });
    }
    if !(tau > 0.0) {
        return Err(TensorError::BadParam {
            op: "crd_loss",
            detail: format!("temperature {tau} is not positive"),
        });
    }
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let pos = dot(s, t_pos) / tau;
    let mut logits = vec![pos];
    logits.extend(t_negs.iter().map(|n| dot(s, n) / tau));
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + logits.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
    Ok(lse - pos)
}

/// Map-row cross entropy `F(a, b) = -Σ_k a_k log(b_k + ε)`.
pub fn edam_f(a: &[f64], b: &[f64], eps: f64) -> f64 {
    a.iter().zip(b).map(|(&ai, &bi)| -ai * (bi + eps).ln()).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_c: f64,
    pub l_kd: f64,
    pub total: f64,
}

pub fn total_loss(l_c: f64, l_kd: f64, alpha: f64, beta: f64) -> Result<LossBreakdown> {
    for (name, v) in [("alpha", alpha), ("beta", beta)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(TensorError::BadParam {
                op: "total_loss",
                detail: format!("{name} {v} outside [0, 1]"),
            });
        }
    }
    Ok(LossBreakdown { l_c, l_kd, total: alpha * l_c + beta * l_kd })
}

// ---- graph-side helpers ------------------------------------------------------

/// Head-averaged attention map rebuilt at temperature `temp` from the raw
/// per-head scores.
pub fn map_at_temp<S: Scalar>(g: &mut Graph<S>, tap: &AttnTap, temp: S) -> Result<NodeId> {
    let heads: Vec<NodeId> = tap
        .head_logits
        .iter()
        .map(|&h| g.row_softmax(h, temp))
        .collect::<Result<_>>()?;
    g.mean_of(&heads)
}

fn map_value_at_temp<S: Scalar>(g: &Graph<S>, tap: &AttnTap, temp: S) -> Tensor<S> {
    let softmaxed: Vec<Tensor<S>> = tap
        .head_logits
        .iter()
        .map(|&h| tensor::row_softmax_value(g.value(h), temp))
        .collect();
    tensor::mean_of(&softmaxed.iter().collect::<Vec<_>>())
}

fn mean_time_value<S: Scalar>(t: &Tensor<S>) -> Tensor<S> {
    let (b, tt, d) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let inv = S::ONE / S::from_f64(tt as f64);
    let mut out = Tensor::zeros(vec![b, d]);
    for bi in 0..b {
        for ti in 0..tt {
            for di in 0..d {
                out.data_mut()[bi * d + di] += t.data()[(bi * tt + ti) * d + di] * inv;
            }
        }
    }
    out
}

/// Per-pair EDAM term: mean over layers of `(1/(B·m)) Σ F(teacher_row,
/// student_row)`, rows spanning the batch. Teacher maps may be nodes (T-up
/// feeds gradients into its upsamplers) or constants.
pub fn edam_pair_loss<S: Scalar>(
    g: &mut Graph<S>,
    s_maps: &[NodeId],
    t_maps: &[NodeId],
) -> Result<NodeId> {
    let mut layer_terms = Vec::with_capacity(s_maps.len());
    for (&sm, &tm) in s_maps.iter().zip(t_maps) {
        let shape = g.shape(sm).to_vec();
        let rows = shape[..shape.len() - 1].iter().product::<usize>();
        let lb = g.add_const(sm, S::from_f64(LOG_FLOOR))?;
        let lb = g.ln(lb)?;
        let prod = g.mul(tm, lb)?;
        let total = g.sum_all(prod)?;
        layer_terms.push(g.scale(total, S::from_f64(-1.0 / rows as f64))?);
    }
    g.mean_of(&layer_terms)
}

/// Interpolation matrix `[n_out, n_in]` whose rows are the hat-function
/// weights of linear resampling; each row sums to one.
fn interp_matrix<S: Scalar>(n_out: usize, n_in: usize) -> Tensor<S> {
    let mut m = Tensor::zeros(vec![n_out, n_in]);
    for i in 0..n_out {
        let p = if n_out == 1 {
            (n_in - 1) as f64 / 2.0
        } else {
            i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64
        };
        let lo = p.floor() as usize;
        let hi = (lo + 1).min(n_in - 1);
        let frac = p - lo as f64;
        m.data_mut()[i * n_in + lo] += S::from_f64(1.0 - frac);
        m.data_mut()[i * n_in + hi] += S::from_f64(frac);
    }
    m
}

fn transpose_2d<S: Scalar>(t: &Tensor<S>) -> Tensor<S> {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    Tensor::from_fn(vec![c, r], |i| t.data()[(i % r) * c + i / r])
}

// ---- teacher capture ---------------------------------------------------------

/// Values pulled out of one frozen teacher forward, just enough for the
/// active method.
#[derive(Debug, Clone)]
pub enum TeacherBatch<S> {
    /// `[B, F]` head feature for the final / penultimate CRD sites.
    Feature(Tensor<S>),
    /// `pairs x layers` of either pooled features `[B, d]` or maps `[B, m, n]`.
    PerPairLayer(Vec<Vec<Tensor<S>>>),
}

// ---- the distiller -----------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Distiller<S> {
    pub cfg: DistillConfig,
    /// (student stack, teacher stack) in distillation order.
    pub pairs: Vec<(StackId, StackId)>,
    /// Trainable auxiliaries: CRD projections or T-up resamplers.
    pub aux: Vec<Param<S>>,
}

/// Loss nodes from one composed step. `teacher_nodes` lists every constant
/// leaf carrying teacher values, so tests can assert no gradient lands there.
#[derive(Debug)]
pub struct LossNodes {
    pub task: NodeId,
    pub kd: Option<NodeId>,
    pub total: NodeId,
    pub teacher_nodes: Vec<NodeId>,
}

impl<S: Scalar> Distiller<S> {
    pub fn new(
        cfg: DistillConfig,
        student: &Network<S>,
        teacher: Option<&Network<S>>,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        let bad = |detail: String| TensorError::BadParam { op: "distiller", detail };
        if cfg.method == Method::None {
            return Ok(Self { cfg, pairs: Vec::new(), aux: Vec::new() });
        }
        let teacher = teacher.ok_or_else(|| bad("method needs a teacher network".into()))?;
        let sc = match student.role {
            Role::Student(sc) => sc,
            Role::Teacher(_) => return Err(bad("distillation target must be a student".into())),
        };
        if student.alignment != cfg.method.alignment() {
            return Err(bad(format!(
                "student built for {:?} but method wants {:?}",
                student.alignment,
                cfg.method.alignment()
            )));
        }
        if student.cfg.l != teacher.cfg.l {
            return Err(bad(format!(
                "student depth {} != teacher depth {}",
                student.cfg.l, teacher.cfg.l
            )));
        }
        let pairs = pair_map(sc);
        for (s, t) in &pairs {
            if !student.has_stack(*s) {
                return Err(bad(format!("student lacks stack {s}")));
            }
            if !teacher.has_stack(*t) {
                return Err(bad(format!("teacher lacks stack {t}")));
            }
        }

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut aux: Vec<Param<S>> = Vec::new();
        let mut affine = |name: &str, d_in: usize, d_out: usize, rng: &mut ChaCha8Rng| {
            let bound = 1.0 / (d_in as f64).sqrt();
            aux.push(Param {
                name: format!("{name}.w"),
                value: Tensor::from_fn(vec![d_in, d_out], |_| S::from_f64(rng.gen_range(-bound..bound))),
            });
            aux.push(Param {
                name: format!("{name}.b"),
                value: Tensor::from_fn(vec![d_out], |_| S::from_f64(rng.gen_range(-bound..bound))),
            });
        };

        match cfg.method {
            Method::CrdFinal => {
                affine("crd.final.s", student.cfg.classes, cfg.d_crd, &mut rng);
                affine("crd.final.t", teacher.cfg.classes, cfg.d_crd, &mut rng);
            }
            Method::CrdPenultimate => {
                affine("crd.penult.s", student.cfg.head_hidden, cfg.d_crd, &mut rng);
                affine("crd.penult.t", teacher.cfg.head_hidden, cfg.d_crd, &mut rng);
            }
            Method::CrdPostAttn => {
                affine("crd.postattn.s", student.cfg.d_model, cfg.d_crd, &mut rng);
                affine("crd.postattn.t", teacher.cfg.d_model, cfg.d_crd, &mut rng);
            }
            Method::CrdAttnMap => {
                for (s, t) in &pairs {
                    let (_, n_s) = student.map_shape(*s).unwrap();
                    let (_, n_t) = teacher.map_shape(*t).unwrap();
                    Self::check_aligned(student, teacher, *s, *t)?;
                    affine(&format!("crd.map.{s}.s"), n_s, cfg.d_crd, &mut rng);
                    affine(&format!("crd.map.{s}.t"), n_t, cfg.d_crd, &mut rng);
                }
            }
            Method::EdamSDown => {
                for (s, t) in &pairs {
                    Self::check_aligned(student, teacher, *s, *t)?;
                }
            }
            Method::EdamTUp => {
                for (s, t) in &pairs {
                    let (m_s, n_s) = student.map_shape(*s).unwrap();
                    let (m_t, n_t) = teacher.map_shape(*t).unwrap();
                    aux.push(Param {
                        name: format!("tup.{s}.u"),
                        value: interp_matrix(m_s, m_t),
                    });
                    aux.push(Param {
                        name: format!("tup.{s}.w"),
                        value: transpose_2d(&interp_matrix::<S>(n_s, n_t)),
                    });
                }
            }
            Method::None => unreachable!(),
        }
        Ok(Self { cfg, pairs, aux })
    }

    fn check_aligned(
        student: &Network<S>,
        teacher: &Network<S>,
        s: StackId,
        t: StackId,
    ) -> Result<()> {
        let ss = student.map_shape(s).unwrap();
        let ts = teacher.map_shape(t).unwrap();
        if ss != ts {
            return Err(TensorError::BadShape {
                op: "distiller",
                shape: vec![ss.0, ss.1],
                detail: format!(
                    "pair {s}: student map {}x{} vs teacher {}x{}",
                    ss.0, ss.1, ts.0, ts.1
                ),
            });
        }
        Ok(())
    }

    /// Binds the auxiliaries as trainable leaves; order matches `self.aux`.
    pub fn bind_aux(&self, g: &mut Graph<S>) -> Result<Vec<NodeId>> {
        self.aux.iter().map(|p| g.leaf(p.value.clone(), true)).collect()
    }

    fn aux_node(&self, aux_nodes: &[NodeId], name: &str) -> NodeId {
        let i = self
            .aux
            .iter()
            .position(|p| p.name == name)
            .unwrap_or_else(|| panic!("auxiliary {name} missing"));
        aux_nodes[i]
    }

    /// Runs the teacher on a scratch tape and keeps only the values the
    /// method will contrast against.
    pub fn capture(&self, teacher: &Network<S>, batch: &Batch<S>) -> Result<TeacherBatch<S>> {
        let mut g = Graph::new();
        let fwd = teacher.forward(&mut g, batch, false)?;
        let per_pair = |of_tap: &dyn Fn(&Graph<S>, &AttnTap) -> Tensor<S>| -> Result<Vec<Vec<Tensor<S>>>> {
            self.pairs
                .iter()
                .map(|(_, t)| {
                    let (_, taps) = fwd
                        .stacks
                        .iter()
                        .find(|(id, _)| id == t)
                        .ok_or_else(|| TensorError::BadParam {
                            op: "capture",
                            detail: format!("teacher trace lacks stack {t}"),
                        })?;
                    Ok(taps.iter().map(|tap| of_tap(&g, tap)).collect())
                })
                .collect()
        };
        Ok(match self.cfg.method {
            Method::None => {
                return Err(TensorError::BadParam {
                    op: "capture",
                    detail: "no teacher values needed without a method".into(),
                })
            }
            Method::CrdFinal => TeacherBatch::Feature(g.value(fwd.logits).clone()),
            Method::CrdPenultimate => TeacherBatch::Feature(g.value(fwd.penultimate).clone()),
            Method::CrdPostAttn => TeacherBatch::PerPairLayer(per_pair(&|g, tap| {
                mean_time_value(g.value(tap.post_attention))
            })?),
            Method::CrdAttnMap => {
                TeacherBatch::PerPairLayer(per_pair(&|g, tap| g.value(tap.map).clone())?)
            }
            Method::EdamSDown | Method::EdamTUp => {
                let temp = S::from_f64(self.cfg.temp);
                TeacherBatch::PerPairLayer(per_pair(&|g, tap| map_value_at_temp(g, tap, temp))?)
            }
        })
    }

    /// Assembles `α·task + β·kd` on the student tape.
    pub fn loss(
        &self,
        g: &mut Graph<S>,
        fwd: &Forward,
        labels: &[usize],
        teacher: Option<&TeacherBatch<S>>,
        aux_nodes: &[NodeId],
    ) -> Result<LossNodes> {
        let task = g.cross_entropy(fwd.logits, labels)?;
        let alpha = S::from_f64(self.cfg.alpha);
        if self.cfg.method == Method::None {
            let total = g.scale(task, alpha)?;
            return Ok(LossNodes { task, kd: None, total, teacher_nodes: Vec::new() });
        }
        let teacher = teacher.ok_or_else(|| TensorError::BadParam {
            op: "loss",
            detail: "method needs captured teacher values".into(),
        })?;
        if aux_nodes.len() != self.aux.len() {
            return Err(TensorError::BadParam {
                op: "loss",
                detail: format!("{} aux nodes for {} params", aux_nodes.len(), self.aux.len()),
            });
        }
        let mut teacher_nodes = Vec::new();
        let kd = match (self.cfg.method, teacher) {
            (Method::CrdFinal, TeacherBatch::Feature(t)) => {
                let tn = g.constant(t.clone())?;
                teacher_nodes.push(tn);
                self.crd_batched(g, fwd.logits, tn, "crd.final", aux_nodes)?
            }
            (Method::CrdPenultimate, TeacherBatch::Feature(t)) => {
                let tn = g.constant(t.clone())?;
                teacher_nodes.push(tn);
                self.crd_batched(g, fwd.penultimate, tn, "crd.penult", aux_nodes)?
            }
            (Method::CrdPostAttn, TeacherBatch::PerPairLayer(vals)) => {
                let mut pair_losses = Vec::with_capacity(self.pairs.len());
                for ((sid, _), t_layers) in self.pairs.iter().zip(vals) {
                    let taps = self.taps_of(fwd, *sid)?;
                    self.expect_layers(t_layers.len(), taps.len())?;
                    let mut layer_losses = Vec::with_capacity(taps.len());
                    for (tap, t_val) in taps.iter().zip(t_layers) {
                        let s_feat = g.mean_time(tap.post_attention)?;
                        let tn = g.constant(t_val.clone())?;
                        teacher_nodes.push(tn);
                        layer_losses.push(self.crd_batched(g, s_feat, tn, "crd.postattn", aux_nodes)?);
                    }
                    pair_losses.push(g.mean_of(&layer_losses)?);
                }
                g.mean_of(&pair_losses)?
            }
            (Method::CrdAttnMap, TeacherBatch::PerPairLayer(vals)) => {
                let mut pair_losses = Vec::with_capacity(self.pairs.len());
                for ((sid, _), t_layers) in self.pairs.iter().zip(vals) {
                    let taps = self.taps_of(fwd, *sid)?;
                    self.expect_layers(t_layers.len(), taps.len())?;
                    let prefix = format!("crd.map.{sid}");
                    let mut row_losses = Vec::new();
                    for (tap, t_val) in taps.iter().zip(t_layers) {
                        let m = g.shape(tap.map)[1];
                        let tn = g.constant(t_val.clone())?;
                        teacher_nodes.push(tn);
                        for j in 0..m {
                            let s_row = g.select_time(tap.map, j)?;
                            let t_row = g.select_time(tn, j)?;
                            row_losses.push(self.crd_batched(g, s_row, t_row, &prefix, aux_nodes)?);
                        }
                    }
                    // One flat mean covers the 1/(m·l) normalization.
                    pair_losses.push(g.mean_of(&row_losses)?);
                }
                g.mean_of(&pair_losses)?
            }
            (Method::EdamSDown | Method::EdamTUp, TeacherBatch::PerPairLayer(vals)) => {
                let temp = S::from_f64(self.cfg.temp);
                let t_up = self.cfg.method == Method::EdamTUp;
                let mut pair_losses = Vec::with_capacity(self.pairs.len());
                for ((sid, _), t_layers) in self.pairs.iter().zip(vals) {
                    let taps = self.taps_of(fwd, *sid)?;
                    self.expect_layers(t_layers.len(), taps.len())?;
                    let mut s_maps = Vec::with_capacity(taps.len());
                    let mut t_maps = Vec::with_capacity(taps.len());
                    for (tap, t_val) in taps.iter().zip(t_layers) {
                        s_maps.push(map_at_temp(g, tap, temp)?);
                        let tn = g.constant(t_val.clone())?;
                        teacher_nodes.push(tn);
                        t_maps.push(if t_up {
                            let u = self.aux_node(aux_nodes, &format!("tup.{sid}.u"));
                            let w = self.aux_node(aux_nodes, &format!("tup.{sid}.w"));
                            let um = g.matmul(u, tn)?;
                            let umw = g.matmul(um, w)?;
                            g.row_renorm(umw, S::from_f64(LOG_FLOOR))?
                        } else {
                            tn
                        });
                    }
                    pair_losses.push(edam_pair_loss(g, &s_maps, &t_maps)?);
                }
                g.mean_of(&pair_losses)?
            }
            _ => {
                return Err(TensorError::BadParam {
                    op: "loss",
                    detail: "captured teacher values do not fit the method".into(),
                })
            }
        };
        let task_w = g.scale(task, alpha)?;
        let kd_w = g.scale(kd, S::from_f64(self.cfg.beta))?;
        let total = g.add(task_w, kd_w)?;
        Ok(LossNodes { task, kd: Some(kd), total, teacher_nodes })
    }

    fn taps_of<'f>(&self, fwd: &'f Forward, sid: StackId) -> Result<&'f [AttnTap]> {
        fwd.stacks
            .iter()
            .find(|(id, _)| *id == sid)
            .map(|(_, taps)| taps.as_slice())
            .ok_or_else(|| TensorError::BadParam {
                op: "loss",
                detail: format!("student trace lacks stack {sid}"),
            })
    }

    fn expect_layers(&self, got: usize, want: usize) -> Result<()> {
        if got != want {
            return Err(TensorError::BadParam {
                op: "loss",
                detail: format!("teacher captured {got} layers, student has {want}"),
            });
        }
        Ok(())
    }

    /// In-batch contrast: project both sides to the unit sphere, take all
    /// pairwise similarities, and label the diagonal as positive.
    fn crd_batched(
        &self,
        g: &mut Graph<S>,
        s_feat: NodeId,
        t_feat: NodeId,
        prefix: &str,
        aux_nodes: &[NodeId],
    ) -> Result<NodeId> {
        let b = g.shape(s_feat)[0];
        if b < 2 {
            return Err(TensorError::BadParam {
                op: "crd",
                detail: format!("in-batch negatives need at least 2 samples, got {b}"),
            });
        }
        let project = |g: &mut Graph<S>, x: NodeId, side: &str| -> Result<NodeId> {
            let w = self.aux_node(aux_nodes, &format!("{prefix}.{side}.w"));
            let bias = self.aux_node(aux_nodes, &format!("{prefix}.{side}.b"));
            let y = g.matmul(x, w)?;
            let y = g.add_broadcast(y, bias)?;
            g.l2_normalize(y)
        };
        let se = project(g, s_feat, "s")?;
        let te = project(g, t_feat, "t")?;
        let tt = g.transpose(te)?;
        let sim = g.matmul(se, tt)?;
        let scaled = g.scale(sim, S::ONE / S::from_f64(self.cfg.tau))?;
        let labels: Vec<usize> = (0..b).collect();
        g.cross_entropy(scaled, &labels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{teacher_for, ModalityDims, NetworkConfig, StudentConfig, TeacherKind};

    fn lcg(seed: &mut u64) -> f64 {
        *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*seed >> 33) as f64 / (1u64 << 31) as f64) - 1.0
    }

    fn unit(seed: &mut u64, d: usize) -> Vec<f64> {
        let v: Vec<f64> = (0..d).map(|_| lcg(seed)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect()
    }

    fn simplex(seed: &mut u64, d: usize) -> Vec<f64> {
        let v: Vec<f64> = (0..d).map(|_| lcg(seed).abs() + 1e-3).collect();
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect()
    }

    fn tiny_cfg() -> NetworkConfig {
        NetworkConfig {
            d_model: 8,
            n_h: 2,
            l: 2,
            head_hidden: 10,
            ffn_mult: 2,
            classes: 7,
            kernels: [3, 3, 3],
            dims: ModalityDims { d_v: 4, d_a: 5, d_l: 6, t_v: 8, t_a: 4, t_l: 2 },
        }
    }

    fn tiny_batch(seed: &mut u64, cfg: &NetworkConfig, b: usize) -> Batch<f64> {
        let d = cfg.dims;
        Batch {
            video: Tensor::from_fn(vec![b, d.t_v, d.d_v], |_| lcg(seed)),
            audio: Some(Tensor::from_fn(vec![b, d.t_a, d.d_a], |_| lcg(seed))),
            language: Some(Tensor::from_fn(vec![b, d.t_l, d.d_l], |_| lcg(seed))),
        }
    }

    fn run_pipeline(
        method: Method,
        sc: StudentConfig,
        seed: u64,
    ) -> (f64, f64, Graph<f64>, crate::graph::Gradients<f64>, LossNodes, Distiller<f64>, Vec<NodeId>, Forward) {
        let cfg = tiny_cfg();
        let dcfg = DistillConfig { method, ..DistillConfig::default() };
        let student =
            Network::<f64>::student(cfg.clone(), sc, method.alignment(), seed).unwrap();
        let teacher = Network::<f64>::teacher(cfg.clone(), teacher_for(sc), seed + 1).unwrap();
        let distiller = Distiller::new(dcfg, &student, Some(&teacher), seed + 2).unwrap();
        let mut data_seed = seed + 3;
        let batch = tiny_batch(&mut data_seed, &cfg, 3);
        let captured = distiller.capture(&teacher, &batch).unwrap();
        let mut g = Graph::new();
        let fwd = student.forward(&mut g, &batch, true).unwrap();
        let aux_nodes = distiller.bind_aux(&mut g).unwrap();
        let labels = [0usize, 3, 6];
        let nodes = distiller.loss(&mut g, &fwd, &labels, Some(&captured), &aux_nodes).unwrap();
        let grads = g.backward(nodes.total).unwrap();
        let task = g.value(nodes.task).data()[0];
        let kd = g.value(nodes.kd.unwrap()).data()[0];
        (task, kd, g, grads, nodes, distiller, aux_nodes, fwd)
    }

    #[test]
    fn crd_aligned_positive_with_orthogonal_negative() {
        let s = vec![1.0, 0.0];
        let neg = vec![vec![0.0, 1.0]];
        let got = crd_loss(&s, &s, &neg, 1.0).unwrap();
        let want = -(std::f64::consts::E / (std::f64::consts::E + 1.0)).ln();
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn crd_symmetric_logits_give_ln2() {
        let s = vec![0.0, 0.0, 1.0];
        let pos = vec![1.0, 0.0, 0.0];
        let neg = vec![vec![0.0, 1.0, 0.0]];
        let got = crd_loss(&s, &pos, &neg, 1.0).unwrap();
        assert!((got - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn crd_without_negatives_is_an_error() {
        let s = vec![1.0, 0.0];
        assert!(crd_loss(&s, &s, &[], 1.0).is_err());
        assert!(crd_loss(&s, &s, &[vec![0.0, 1.0]], 0.0).is_err());
    }

    #[test]
    fn crd_strictly_decreases_as_the_positive_aligns() {
        // Move s along the component of t_pos orthogonal to every negative:
        // negative similarities stay fixed while s.t_pos strictly grows.
        let mut seed = 41u64;
        for trial in 0..100 {
            let d = 8;
            let s = unit(&mut seed, d);
            let t_pos = unit(&mut seed, d);
            let negs: Vec<Vec<f64>> = (0..4).map(|_| unit(&mut seed, d)).collect();
            let mut basis: Vec<Vec<f64>> = Vec::new();
            for n in &negs {
                let mut v = n.clone();
                for b in &basis {
                    let c: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                    for (vi, bi) in v.iter_mut().zip(b) {
                        *vi -= c * bi;
                    }
                }
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 1e-9 {
                    basis.push(v.into_iter().map(|x| x / norm).collect());
                }
            }
            let mut w = t_pos.clone();
            for b in &basis {
                let c: f64 = w.iter().zip(b).map(|(x, y)| x * y).sum();
                for (wi, bi) in w.iter_mut().zip(b) {
                    *wi -= c * bi;
                }
            }
            if w.iter().map(|x| x * x).sum::<f64>().sqrt() < 1e-6 {
                continue;
            }
            let s2: Vec<f64> = s.iter().zip(&w).map(|(si, wi)| si + 0.05 * wi).collect();
            let before = crd_loss(&s, &t_pos, &negs, 0.5).unwrap();
            let after = crd_loss(&s2, &t_pos, &negs, 0.5).unwrap();
            assert!(after < before, "trial {trial}: {after} !< {before}");
        }
    }

    #[test]
    fn crd_strictly_increases_when_a_negative_closes_in() {
        let mut seed = 77u64;
        for _ in 0..50 {
            let d = 6;
            let s = unit(&mut seed, d);
            let pos = unit(&mut seed, d);
            let mut negs: Vec<Vec<f64>> = (0..3).map(|_| unit(&mut seed, d)).collect();
            let before = crd_loss(&s, &pos, &negs, 1.0).unwrap();
            for (ni, si) in negs[1].iter_mut().zip(&s) {
                *ni += 0.1 * si;
            }
            let after = crd_loss(&s, &pos, &negs, 1.0).unwrap();
            assert!(after > before);
        }
    }

    #[test]
    fn edam_f_uniform_and_onehot_examples() {
        let ln2 = std::f64::consts::LN_2;
        let f1 = edam_f(&[0.5, 0.5], &[0.5, 0.5], 0.0);
        assert!((f1 - ln2).abs() < 1e-12);
        let f2 = edam_f(&[1.0, 0.0], &[0.5, 0.5], 0.0);
        assert!((f2 - ln2).abs() < 1e-12);
    }

    #[test]
    fn edam_gibbs_inequality_on_random_simplex_points() {
        let mut seed = 9u64;
        for _ in 0..200 {
            let d = 2 + (lcg(&mut seed).abs() * 6.0) as usize;
            let a = simplex(&mut seed, d);
            let b = simplex(&mut seed, d);
            let self_f = edam_f(&a, &a, LOG_FLOOR);
            let cross_f = edam_f(&a, &b, LOG_FLOOR);
            assert!(cross_f >= self_f - 1e-6, "F(a,b)={cross_f} < F(a,a)={self_f}");
        }
    }

    #[test]
    fn edam_pair_loss_on_identical_maps_is_mean_row_entropy() {
        let mut seed = 13u64;
        let (b, m, n, l) = (3usize, 4usize, 5usize, 2usize);
        let mut g = Graph::<f64>::new();
        let mut s_maps = Vec::new();
        let mut t_maps = Vec::new();
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for _ in 0..l {
            let mut map = Tensor::zeros(vec![b, m, n]);
            for r in 0..b * m {
                let row = simplex(&mut seed, n);
                map.data_mut()[r * n..(r + 1) * n]
                    .copy_from_slice(&row);
                rows.push(row);
            }
            s_maps.push(g.constant(map.clone()).unwrap());
            t_maps.push(g.constant(map).unwrap());
        }
        let loss = edam_pair_loss(&mut g, &s_maps, &t_maps).unwrap();
        let got = g.value(loss).data()[0];
        let want =
            rows.iter().map(|r| edam_f(r, r, LOG_FLOOR)).sum::<f64>() / rows.len() as f64;
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }

    #[test]
    fn edam_gradient_descent_matches_the_target_row() {
        let p = [0.4, 0.3, 0.15, 0.1, 0.05];
        let mut z = Tensor::<f64>::zeros(vec![1, 5]);
        for _ in 0..4000 {
            let mut g = Graph::new();
            let zn = g.leaf(z.clone(), true).unwrap();
            let bn = g.row_softmax(zn, 1.0).unwrap();
            let pn = g.constant(Tensor::new(vec![1, 5], p.to_vec()).unwrap()).unwrap();
            let f = edam_pair_loss(&mut g, &[bn], &[pn]).unwrap();
            let grads = g.backward(f).unwrap();
            let gz = grads.get(zn).unwrap();
            for (zi, gi) in z.data_mut().iter_mut().zip(gz.data()) {
                *zi -= 0.5 * gi;
            }
        }
        let mut g = Graph::new();
        let zn = g.leaf(z, true).unwrap();
        let bn = g.row_softmax(zn, 1.0).unwrap();
        let b = g.value(bn).data();
        let worst = b.iter().zip(&p).map(|(bi, pi)| (bi - pi).abs()).fold(0.0, f64::max);
        assert!(worst < 1e-3, "max deviation {worst}");
    }

    #[test]
    fn total_loss_examples_and_range_checks() {
        assert_eq!(total_loss(2.0, 4.0, 1.0, 0.0).unwrap().total, 2.0);
        assert_eq!(total_loss(2.0, 4.0, 0.0, 1.0).unwrap().total, 4.0);
        assert_eq!(total_loss(2.0, 4.0, 0.5, 0.5).unwrap().total, 3.0);
        assert!(total_loss(1.0, 1.0, 1.5, 0.0).is_err());
        assert!(total_loss(1.0, 1.0, 0.5, -0.1).is_err());
    }

    #[test]
    fn resoftmax_preserves_per_head_argmax() {
        let mut seed = 23u64;
        for temp in [0.25, 1.0, 4.0] {
            let logits = Tensor::<f64>::from_fn(vec![2, 3, 6], |_| 3.0 * lcg(&mut seed));
            let base = tensor::row_softmax_value(&logits, 1.0);
            let hot = tensor::row_softmax_value(&logits, temp);
            for r in 0..6 {
                let row_a = &base.data()[r * 6..(r + 1) * 6];
                let row_b = &hot.data()[r * 6..(r + 1) * 6];
                let am = |row: &[f64]| {
                    row.iter().enumerate().max_by(|a, b| a.1.partial_cmp(b.1).unwrap()).unwrap().0
                };
                assert_eq!(am(row_a), am(row_b));
            }
        }
    }

    #[test]
    fn interp_matrix_upsamples_uniform_maps_to_uniform() {
        let mut g = Graph::<f64>::new();
        let t_map = g.constant(Tensor::filled(vec![1, 2, 2], 0.5)).unwrap();
        let u = g.leaf(interp_matrix(4, 2), true).unwrap();
        let w = g.leaf(transpose_2d(&interp_matrix::<f64>(4, 2)), true).unwrap();
        let um = g.matmul(u, t_map).unwrap();
        let umw = g.matmul(um, w).unwrap();
        let out = g.row_renorm(umw, 1e-8).unwrap();
        assert_eq!(g.shape(out), &[1, 4, 4]);
        for &v in g.value(out).data() {
            assert!((v - 0.25).abs() < 1e-9, "{v}");
        }
    }

    #[test]
    fn interp_matrix_rows_are_convex_weights() {
        for (n_out, n_in) in [(1, 5), (3, 3), (7, 3), (4, 9)] {
            let m = interp_matrix::<f64>(n_out, n_in);
            for r in 0..n_out {
                let row = &m.data()[r * n_in..(r + 1) * n_in];
                let s: f64 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
                assert!(row.iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn batched_crd_matches_the_per_sample_form() {
        let mut seed = 31u64;
        let (b, f, d_crd) = (5usize, 6usize, 4usize);
        let cfg = tiny_cfg();
        let student = Network::<f64>::student(cfg.clone(), StudentConfig::C5, Alignment::SDown, 0).unwrap();
        let teacher = Network::<f64>::teacher(cfg, TeacherKind::Complete, 1).unwrap();
        let dcfg = DistillConfig { method: Method::CrdFinal, tau: 0.3, d_crd, ..Default::default() };
        dcfg.validate().unwrap();
        let mut distiller = Distiller::new(dcfg, &student, Some(&teacher), 5).unwrap();
        // Rebuild the projections at width f to exercise arbitrary features.
        for p in distiller.aux.iter_mut() {
            if p.name.ends_with(".w") {
                p.value = Tensor::from_fn(vec![f, d_crd], |_| lcg(&mut seed));
            }
        }
        let s_feat = Tensor::from_fn(vec![b, f], |_| lcg(&mut seed));
        let t_feat = Tensor::from_fn(vec![b, f], |_| lcg(&mut seed));
        let mut g = Graph::new();
        let sn = g.leaf(s_feat.clone(), true).unwrap();
        let tn = g.constant(t_feat.clone()).unwrap();
        let aux_nodes = distiller.bind_aux(&mut g).unwrap();
        let loss = distiller.crd_batched(&mut g, sn, tn, "crd.final", &aux_nodes).unwrap();
        let got = g.value(loss).data()[0];

        // Plain route: project, normalize, then one crd_loss per sample with
        // the other teacher embeddings as negatives.
        let project = |x: &Tensor<f64>, w: &Tensor<f64>, bias: &Tensor<f64>| -> Vec<Vec<f64>> {
            (0..b)
                .map(|i| {
                    let mut row = vec![0.0; d_crd];
                    for (j, r) in row.iter_mut().enumerate() {
                        for k in 0..f {
                            *r += x.data()[i * f + k] * w.data()[k * d_crd + j];
                        }
                        *r += bias.data()[j];
                    }
                    let n = (row.iter().map(|v| v * v).sum::<f64>() + 1e-12).sqrt();
                    row.into_iter().map(|v| v / n).collect()
                })
                .collect()
        };
        let by_name = |n: &str| distiller.aux.iter().find(|p| p.name == n).unwrap().value.clone();
        let se = project(&s_feat, &by_name("crd.final.s.w"), &by_name("crd.final.s.b"));
        let te = project(&t_feat, &by_name("crd.final.t.w"), &by_name("crd.final.t.b"));
        let mut want = 0.0;
        for i in 0..b {
            let negs: Vec<Vec<f64>> =
                (0..b).filter(|&j| j != i).map(|j| te[j].clone()).collect();
            want += crd_loss(&se[i], &te[i], &negs, 0.3).unwrap();
        }
        want /= b as f64;
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }

    #[test]
    fn every_method_runs_and_stays_finite() {
        for method in [
            Method::CrdFinal,
            Method::CrdPenultimate,
            Method::CrdPostAttn,
            Method::CrdAttnMap,
            Method::EdamSDown,
            Method::EdamTUp,
        ] {
            let (task, kd, ..) = run_pipeline(method, StudentConfig::C5, 11);
            assert!(task.is_finite() && kd.is_finite(), "{method:?}");
            assert!(kd > 0.0, "{method:?} kd {kd}");
        }
    }

    #[test]
    fn teacher_values_never_receive_gradient() {
        for method in [Method::CrdFinal, Method::EdamSDown, Method::EdamTUp] {
            let (_, _, _, grads, nodes, ..) = run_pipeline(method, StudentConfig::C5, 19);
            assert!(!nodes.teacher_nodes.is_empty());
            for tn in &nodes.teacher_nodes {
                assert!(grads.get(*tn).is_none(), "{method:?} teacher leaf got a gradient");
            }
        }
    }

    #[test]
    fn auxiliaries_receive_gradient() {
        for method in [Method::CrdFinal, Method::CrdAttnMap, Method::EdamTUp] {
            let (_, _, _, grads, _, distiller, aux_nodes, _) =
                run_pipeline(method, StudentConfig::C5, 23);
            assert!(!aux_nodes.is_empty());
            for (p, n) in distiller.aux.iter().zip(&aux_nodes) {
                let gn = grads.get(*n).unwrap_or_else(|| panic!("{} has no gradient", p.name));
                assert!(gn.is_finite());
            }
        }
    }

    #[test]
    fn student_front_end_receives_gradient_through_kd_alone() {
        // Zero task weight: any gradient reaching the first conv must have
        // come through the distillation term.
        let cfg = tiny_cfg();
        let dcfg = DistillConfig { method: Method::EdamSDown, alpha: 0.0, ..Default::default() };
        let student = Network::<f64>::student(cfg.clone(), StudentConfig::C5, Alignment::SDown, 2).unwrap();
        let teacher = Network::<f64>::teacher(cfg.clone(), TeacherKind::Complete, 3).unwrap();
        let distiller = Distiller::new(dcfg, &student, Some(&teacher), 4).unwrap();
        let mut seed = 6u64;
        let batch = tiny_batch(&mut seed, &cfg, 2);
        let captured = distiller.capture(&teacher, &batch).unwrap();
        let mut g = Graph::new();
        let fwd = student.forward(&mut g, &batch, true).unwrap();
        let aux_nodes = distiller.bind_aux(&mut g).unwrap();
        let nodes = distiller.loss(&mut g, &fwd, &[0, 1], Some(&captured), &aux_nodes).unwrap();
        let grads = g.backward(nodes.total).unwrap();
        let i = student.params.iter().position(|p| p.name == "front.A.w").unwrap();
        let gfront = grads.get(fwd.param_nodes[i]).expect("front-end missing gradient");
        assert!(gfront.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn pair_order_does_not_change_the_kd_value() {
        let (_, kd_forward, _, _, _, mut distiller, _, _) =
            run_pipeline(Method::EdamSDown, StudentConfig::C5, 29);
        distiller.pairs.reverse();
        let cfg = tiny_cfg();
        let student =
            Network::<f64>::student(cfg.clone(), StudentConfig::C5, Alignment::SDown, 29).unwrap();
        let teacher = Network::<f64>::teacher(cfg.clone(), TeacherKind::Complete, 30).unwrap();
        let mut data_seed = 32u64;
        let batch = tiny_batch(&mut data_seed, &cfg, 3);
        let captured = distiller.capture(&teacher, &batch).unwrap();
        let mut g = Graph::new();
        let fwd = student.forward(&mut g, &batch, true).unwrap();
        let aux_nodes = distiller.bind_aux(&mut g).unwrap();
        let nodes = distiller.loss(&mut g, &fwd, &[0, 3, 6], Some(&captured), &aux_nodes).unwrap();
        let kd_reversed = g.value(nodes.kd.unwrap()).data()[0];
        assert_eq!(kd_forward, kd_reversed);
    }

    #[test]
    fn beta_zero_leaves_total_equal_to_task() {
        let cfg = tiny_cfg();
        let dcfg = DistillConfig { method: Method::CrdFinal, beta: 0.0, ..Default::default() };
        let student = Network::<f64>::student(cfg.clone(), StudentConfig::C5, Alignment::SDown, 2).unwrap();
        let teacher = Network::<f64>::teacher(cfg.clone(), TeacherKind::Complete, 3).unwrap();
        let distiller = Distiller::new(dcfg, &student, Some(&teacher), 4).unwrap();
        let mut seed = 51u64;
        let batch = tiny_batch(&mut seed, &cfg, 2);
        let captured = distiller.capture(&teacher, &batch).unwrap();
        let mut g = Graph::new();
        let fwd = student.forward(&mut g, &batch, true).unwrap();
        let aux_nodes = distiller.bind_aux(&mut g).unwrap();
        let nodes = distiller.loss(&mut g, &fwd, &[2, 5], Some(&captured), &aux_nodes).unwrap();
        let task = g.value(nodes.task).data()[0];
        let total = g.value(nodes.total).data()[0];
        assert!((task - total).abs() < 1e-12);
    }

    #[test]
    fn singleton_batches_are_rejected_for_crd() {
        let cfg = tiny_cfg();
        let dcfg = DistillConfig { method: Method::CrdFinal, ..Default::default() };
        let student = Network::<f64>::student(cfg.clone(), StudentConfig::C5, Alignment::SDown, 2).unwrap();
        let teacher = Network::<f64>::teacher(cfg.clone(), TeacherKind::Complete, 3).unwrap();
        let distiller = Distiller::new(dcfg, &student, Some(&teacher), 4).unwrap();
        let mut seed = 61u64;
        let batch = tiny_batch(&mut seed, &cfg, 1);
        let captured = distiller.capture(&teacher, &batch).unwrap();
        let mut g = Graph::new();
        let fwd = student.forward(&mut g, &batch, true).unwrap();
        let aux_nodes = distiller.bind_aux(&mut g).unwrap();
        let err = distiller.loss(&mut g, &fwd, &[2], Some(&captured), &aux_nodes).unwrap_err();
        assert!(err.to_string().contains("negatives"));
    }

    #[test]
    fn config_validation_rejects_bad_weights_and_temps() {
        let mut c = DistillConfig::default();
        c.alpha = 1.2;
        assert!(c.validate().is_err());
        c = DistillConfig { temp: 0.0, ..Default::default() };
        assert!(c.validate().is_err());
        c = DistillConfig { tau: -1.0, ..Default::default() };
        assert!(c.validate().is_err());
        c = DistillConfig { d_crd: 0, ..Default::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn mismatched_teacher_depth_is_rejected() {
        let cfg = tiny_cfg();
        let mut deep = cfg.clone();
        deep.l = 3;
        let student = Network::<f64>::student(cfg, StudentConfig::C5, Alignment::SDown, 2).unwrap();
        let teacher = Network::<f64>::teacher(deep, TeacherKind::Complete, 3).unwrap();
        let dcfg = DistillConfig { method: Method::EdamSDown, ..Default::default() };
        let err = Distiller::new(dcfg, &student, Some(&teacher), 4).unwrap_err();
        assert!(err.to_string().contains("depth"));
    }

    #[test]
    fn misaligned_map_shapes_are_rejected() {
        let cfg = tiny_cfg();
        let mut squashed = cfg.clone();
        squashed.dims.t_a = 2; // teacher audio stream shorter than student's
        let student = Network::<f64>::student(cfg, StudentConfig::C5, Alignment::SDown, 2).unwrap();
        let teacher = Network::<f64>::teacher(squashed, TeacherKind::Complete, 3).unwrap();
        let dcfg = DistillConfig { method: Method::EdamSDown, ..Default::default() };
        let err = Distiller::new(dcfg, &student, Some(&teacher), 4).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("4x8") && msg.contains("2x8"), "{msg}");
    }

    #[test]
    fn alignment_mismatch_between_student_and_method_is_rejected() {
        let cfg = tiny_cfg();
        let student = Network::<f64>::student(cfg.clone(), StudentConfig::C5, Alignment::TUp, 2).unwrap();
        let teacher = Network::<f64>::teacher(cfg, TeacherKind::Complete, 3).unwrap();
        let dcfg = DistillConfig { method: Method::EdamSDown, ..Default::default() };
        assert!(Distiller::new(dcfg, &student, Some(&teacher), 4).is_err());
    }

    #[test]
    fn postattn_two_pair_value_is_the_mean_of_single_pair_values() {
        let (_, kd_both, _, _, _, distiller, _, _) =
            run_pipeline(Method::CrdPostAttn, StudentConfig::C5, 37);
        let cfg = tiny_cfg();
        let student =
            Network::<f64>::student(cfg.clone(), StudentConfig::C5, Alignment::SDown, 37).unwrap();
        let teacher = Network::<f64>::teacher(cfg.clone(), TeacherKind::Complete, 38).unwrap();
        let mut data_seed = 40u64;
        let batch = tiny_batch(&mut data_seed, &cfg, 3);
        let mut singles = Vec::new();
        for keep in 0..2 {
            let mut d = distiller.clone();
            d.pairs = vec![distiller.pairs[keep]];
            let captured = d.capture(&teacher, &batch).unwrap();
            let mut g = Graph::new();
            let fwd = student.forward(&mut g, &batch, true).unwrap();
            let aux_nodes = d.bind_aux(&mut g).unwrap();
            let nodes = d.loss(&mut g, &fwd, &[0, 3, 6], Some(&captured), &aux_nodes).unwrap();
            singles.push(g.value(nodes.kd.unwrap()).data()[0]);
        }
        let want = (singles[0] + singles[1]) / 2.0;
        assert!((kd_both - want).abs() < 1e-9, "{kd_both} vs {want}");
    }

    #[test]
    fn config1_distills_all_nine_pairs() {
        let (_, kd, _, _, _, distiller, _, _) =
            run_pipeline(Method::EdamSDown, StudentConfig::C1, 43);
        assert_eq!(distiller.pairs.len(), 9);
        assert!(kd.is_finite());
    }
}
