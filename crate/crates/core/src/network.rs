//! Teacher and student assemblies.
//!
//! A teacher reads all three modalities; its six cross stacks pair every
//! ordered modality combination and each branch fuses its two cross outputs
//! with a self-attention stack. A student reads video alone, replicated
//! through three convolutional front-ends that stand in for the three
//! modality streams. Arrow notation `Y<-X` means queries come from `X`
//! while `Y` supplies keys and values, so the output keeps `X`'s length.

use crate::graph::{Graph, NodeId, Padding};
use crate::nn::{self, AttnTap, KvSource, LayerNodes, MhaNodes};
use crate::scalar::Scalar;
use crate::tensor::{fmt_shape, Result, Tensor, TensorError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Video,
    Audio,
    Language,
}

pub const MODALITIES: [Modality; 3] = [Modality::Video, Modality::Audio, Modality::Language];

impl Modality {
    pub fn letter(self) -> &'static str {
        match self {
            Modality::Video => "V",
            Modality::Audio => "A",
            Modality::Language => "L",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Video => "video",
            Modality::Audio => "audio",
            Modality::Language => "language",
        }
    }
}

/// One transformer stack's identity within a network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StackId {
    /// `target <- source`: queries from `source`, keys/values from `target`.
    Cross { target: Modality, source: Modality },
    /// Self-attention over the fused pair output of `branch`'s cross stacks.
    Fusion { branch: Modality },
}

impl std::fmt::Display for StackId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            StackId::Cross { target, source } => {
                write!(f, "{}<-{}", target.letter(), source.letter())
            }
            StackId::Fusion { branch } => write!(f, "fusion.{}", branch.letter()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TeacherKind {
    Complete,
    Branch(Modality),
}

/// Student wiring from the ablation ladder; 1 mirrors the complete teacher,
/// 2 through 5 keep three stacks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum StudentConfig {
    C1,
    C2,
    C3,
    C4,
    C5,
}

impl StudentConfig {
    pub fn index(self) -> u8 {
        match self {
            StudentConfig::C1 => 1,
            StudentConfig::C2 => 2,
            StudentConfig::C3 => 3,
            StudentConfig::C4 => 4,
            StudentConfig::C5 => 5,
        }
    }
}

impl From<StudentConfig> for u8 {
    fn from(c: StudentConfig) -> u8 {
        c.index()
    }
}

impl TryFrom<u8> for StudentConfig {
    type Error = String;
    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            1 => Ok(StudentConfig::C1),
            2 => Ok(StudentConfig::C2),
            3 => Ok(StudentConfig::C3),
            4 => Ok(StudentConfig::C4),
            5 => Ok(StudentConfig::C5),
            _ => Err(format!("student config {v} out of range 1..=5")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Teacher(TeacherKind),
    Student(StudentConfig),
}

/// How a student's non-video front-ends treat sequence length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alignment {
    /// Strided student front-ends shrink video to the teacher's lengths.
    /// Also the student's base design when no distillation runs.
    #[default]
    SDown,
    /// Full-length student; teacher maps are upsampled by learned affine
    /// maps on the loss side.
    TUp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalityDims {
    pub d_v: usize,
    pub d_a: usize,
    pub d_l: usize,
    pub t_v: usize,
    pub t_a: usize,
    pub t_l: usize,
}

impl ModalityDims {
    pub fn d(&self, m: Modality) -> usize {
        match m {
            Modality::Video => self.d_v,
            Modality::Audio => self.d_a,
            Modality::Language => self.d_l,
        }
    }

    pub fn t(&self, m: Modality) -> usize {
        match m {
            Modality::Video => self.t_v,
            Modality::Audio => self.t_a,
            Modality::Language => self.t_l,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub d_model: usize,
    pub n_h: usize,
    pub l: usize,
    pub head_hidden: usize,
    pub ffn_mult: usize,
    pub classes: usize,
    /// Front-end kernel widths in modality order video, audio, language.
    pub kernels: [usize; 3],
    pub dims: ModalityDims,
}

impl NetworkConfig {
    /// Small enough to train on one core in minutes.
    pub fn desk() -> Self {
        Self {
            d_model: 16,
            n_h: 4,
            l: 2,
            head_hidden: 32,
            ffn_mult: 4,
            classes: 7,
            kernels: [3, 3, 3],
            dims: ModalityDims { d_v: 8, d_a: 12, d_l: 16, t_v: 24, t_a: 12, t_l: 6 },
        }
    }

    /// Feature widths from the reference corpus; 4 layers, 8 heads.
    pub fn full_scale() -> Self {
        Self {
            d_model: 40,
            n_h: 8,
            l: 4,
            head_hidden: 512,
            ffn_mult: 4,
            classes: 7,
            kernels: [3, 3, 3],
            dims: ModalityDims { d_v: 35, d_a: 74, d_l: 300, t_v: 24, t_a: 12, t_l: 6 },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |detail: String| TensorError::BadParam { op: "network_config", detail };
        if self.d_model == 0 || self.d_model % 2 != 0 {
            return Err(bad(format!("d_model {} must be positive and even", self.d_model)));
        }
        if self.n_h == 0 || self.d_model % self.n_h != 0 {
            return Err(bad(format!("d_model {} not divisible into {} heads", self.d_model, self.n_h)));
        }
        if self.l == 0 || self.head_hidden == 0 || self.ffn_mult == 0 {
            return Err(bad("layer count, head width and ffn multiplier must be positive".into()));
        }
        if self.classes < 2 {
            return Err(bad(format!("{} classes", self.classes)));
        }
        let d = &self.dims;
        for (name, v) in [
            ("d_v", d.d_v), ("d_a", d.d_a), ("d_l", d.d_l),
            ("t_v", d.t_v), ("t_a", d.t_a), ("t_l", d.t_l),
        ] {
            if v == 0 {
                return Err(bad(format!("dimension {name} must be positive")));
            }
        }
        if self.kernels.iter().any(|&k| k == 0) {
            return Err(bad("kernel widths must be positive".into()));
        }
        Ok(())
    }
}

// ---- architecture plan -----------------------------------------------------

#[derive(Debug, Clone)]
pub struct FrontEnd {
    /// Stream this front-end produces (the namespace letter).
    pub tag: Modality,
    /// Dataset modality it reads; students read video everywhere.
    pub reads: Modality,
    pub kernel: usize,
    pub stride: usize,
    pub t_in: usize,
    pub t_out: usize,
    pub d_in: usize,
}

#[derive(Debug, Clone)]
pub struct StackSpec {
    pub id: StackId,
    /// Query length, which is also the stack's output length.
    pub t_out: usize,
}

#[derive(Debug, Clone)]
pub struct Arch {
    pub fronts: Vec<FrontEnd>,
    pub stacks: Vec<StackSpec>,
    /// Streams whose stack outputs feed the head, in concat order.
    pub head_inputs: Vec<StackId>,
    pub head_in_width: usize,
}

fn branch_targets(branch: Modality) -> [Modality; 2] {
    let mut out = [Modality::Video; 2];
    let mut i = 0;
    for m in MODALITIES {
        if m != branch {
            out[i] = m;
            i += 1;
        }
    }
    out
}

/// The nine-stack layout shared by the complete teacher and student 1:
/// per branch, two cross stacks then the branch fusion.
fn nine_stack_ids() -> Vec<StackId> {
    let mut ids = Vec::with_capacity(9);
    for branch in MODALITIES {
        for target in branch_targets(branch) {
            ids.push(StackId::Cross { target, source: branch });
        }
        ids.push(StackId::Fusion { branch });
    }
    ids
}

pub fn student_stack_ids(sc: StudentConfig) -> Vec<StackId> {
    use Modality::{Audio as A, Language as L, Video as V};
    let cross = |target, source| StackId::Cross { target, source };
    match sc {
        StudentConfig::C1 => nine_stack_ids(),
        StudentConfig::C2 => vec![cross(V, V), cross(A, V), cross(L, V)],
        StudentConfig::C3 => vec![cross(V, V), cross(V, L), cross(A, L)],
        StudentConfig::C4 => vec![cross(V, V), cross(V, A), cross(L, A)],
        StudentConfig::C5 => vec![cross(V, V), cross(V, L), cross(V, A)],
    }
}

pub fn teacher_stack_ids(kind: TeacherKind) -> Vec<StackId> {
    match kind {
        TeacherKind::Complete => nine_stack_ids(),
        TeacherKind::Branch(branch) => {
            let mut ids = Vec::with_capacity(3);
            for target in branch_targets(branch) {
                ids.push(StackId::Cross { target, source: branch });
            }
            ids.push(StackId::Fusion { branch });
            ids
        }
    }
}

/// Smallest teacher whose stacks cover a student config's distillation pairs.
pub fn teacher_for(sc: StudentConfig) -> TeacherKind {
    match sc {
        StudentConfig::C1 | StudentConfig::C5 => TeacherKind::Complete,
        StudentConfig::C2 => TeacherKind::Branch(Modality::Video),
        StudentConfig::C3 => TeacherKind::Branch(Modality::Language),
        StudentConfig::C4 => TeacherKind::Branch(Modality::Audio),
    }
}

/// Distillation pairs as (student stack, teacher stack). Modality roles
/// always match across the pair; the self-attention stack `V<-V` of
/// configs 2 through 5 is never distilled.
pub fn pair_map(sc: StudentConfig) -> Vec<(StackId, StackId)> {
    use Modality::{Audio as A, Language as L, Video as V};
    let cross = |target, source| StackId::Cross { target, source };
    let same = |ids: Vec<StackId>| ids.into_iter().map(|id| (id, id)).collect();
    match sc {
        StudentConfig::C1 => same(nine_stack_ids()),
        StudentConfig::C2 => same(vec![cross(A, V), cross(L, V)]),
        StudentConfig::C3 => same(vec![cross(V, L), cross(A, L)]),
        StudentConfig::C4 => same(vec![cross(V, A), cross(L, A)]),
        StudentConfig::C5 => same(vec![cross(V, A), cross(V, L)]),
    }
}

// ---- the network -----------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Param<S> {
    pub name: String,
    pub value: Tensor<S>,
}

#[derive(Debug, Clone)]
pub struct Network<S> {
    pub cfg: NetworkConfig,
    pub role: Role,
    pub alignment: Alignment,
    pub arch: Arch,
    pub params: Vec<Param<S>>,
    pub seed: u64,
}

/// Inputs for one forward pass; rank-3 `[B, T, D]` per modality.
#[derive(Debug, Clone)]
pub struct Batch<S> {
    pub video: Tensor<S>,
    pub audio: Option<Tensor<S>>,
    pub language: Option<Tensor<S>>,
}

/// Everything one forward pass exposes.
#[derive(Debug)]
pub struct Forward {
    pub logits: NodeId,
    pub penultimate: NodeId,
    pub stacks: Vec<(StackId, Vec<AttnTap>)>,
    /// Leaf ids aligned index-for-index with `Network::params`.
    pub param_nodes: Vec<NodeId>,
}

struct ParamBuilder<S> {
    rng: ChaCha8Rng,
    params: Vec<Param<S>>,
}

impl<S: Scalar> ParamBuilder<S> {
    fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed), params: Vec::new() }
    }

    fn uniform(&mut self, name: String, shape: Vec<usize>, fan_in: usize) {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let t = Tensor::from_fn(shape, |_| S::from_f64(self.rng.gen_range(-bound..bound)));
        self.params.push(Param { name, value: t });
    }

    fn constant(&mut self, name: String, shape: Vec<usize>, v: S) {
        self.params.push(Param { name, value: Tensor::filled(shape, v) });
    }

    fn layer(&mut self, prefix: &str, d: usize, ffn_mult: usize) {
        let f = d * ffn_mult;
        self.constant(format!("{prefix}.ln1.g"), vec![d], S::ONE);
        self.constant(format!("{prefix}.ln1.b"), vec![d], S::ZERO);
        for w in ["wq", "wk", "wv", "wo"] {
            self.uniform(format!("{prefix}.{w}"), vec![d, d], d);
            self.uniform(format!("{prefix}.b{}", &w[1..]), vec![d], d);
        }
        self.constant(format!("{prefix}.ln2.g"), vec![d], S::ONE);
        self.constant(format!("{prefix}.ln2.b"), vec![d], S::ZERO);
        self.uniform(format!("{prefix}.ffn.w1"), vec![d, f], d);
        self.uniform(format!("{prefix}.ffn.b1"), vec![f], d);
        self.uniform(format!("{prefix}.ffn.w2"), vec![f, d], f);
        self.uniform(format!("{prefix}.ffn.b2"), vec![d], f);
    }
}

impl<S: Scalar> Network<S> {
    pub fn teacher(cfg: NetworkConfig, kind: TeacherKind, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let fronts = MODALITIES
            .iter()
            .enumerate()
            .map(|(i, &m)| FrontEnd {
                tag: m,
                reads: m,
                kernel: cfg.kernels[i],
                stride: 1,
                t_in: cfg.dims.t(m),
                t_out: cfg.dims.t(m),
                d_in: cfg.dims.d(m),
            })
            .collect();
        Self::assemble(cfg, Role::Teacher(kind), Alignment::SDown, fronts, teacher_stack_ids(kind), seed)
    }

    pub fn student(cfg: NetworkConfig, sc: StudentConfig, alignment: Alignment, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let t_v = cfg.dims.t_v;
        let mut fronts = Vec::with_capacity(3);
        for (i, &m) in MODALITIES.iter().enumerate() {
            let t_target = cfg.dims.t(m);
            let stride = match alignment {
                Alignment::TUp => 1,
                Alignment::SDown => {
                    if t_v % t_target != 0 {
                        return Err(TensorError::BadParam {
                            op: "student",
                            detail: format!(
                                "video length {t_v} is not an integer multiple of {} length {t_target}",
                                m.name()
                            ),
                        });
                    }
                    t_v / t_target
                }
            };
            fronts.push(FrontEnd {
                tag: m,
                reads: Modality::Video,
                kernel: cfg.kernels[i],
                stride,
                t_in: t_v,
                t_out: t_v.div_ceil(stride),
                d_in: cfg.dims.d_v,
            });
        }
        Self::assemble(cfg, Role::Student(sc), alignment, fronts, student_stack_ids(sc), seed)
    }

    fn assemble(
        cfg: NetworkConfig,
        role: Role,
        alignment: Alignment,
        fronts: Vec<FrontEnd>,
        ids: Vec<StackId>,
        seed: u64,
    ) -> Result<Self> {
        let t_of = |m: Modality| fronts.iter().find(|f| f.tag == m).map(|f| f.t_out).unwrap();
        let stacks: Vec<StackSpec> = ids
            .iter()
            .map(|&id| {
                let t_out = match id {
                    StackId::Cross { source, .. } => t_of(source),
                    StackId::Fusion { branch } => t_of(branch),
                };
                StackSpec { id, t_out }
            })
            .collect();
        let head_inputs: Vec<StackId> = match role {
            Role::Teacher(TeacherKind::Complete) | Role::Student(StudentConfig::C1) => MODALITIES
                .iter()
                .map(|&m| StackId::Fusion { branch: m })
                .collect(),
            Role::Teacher(TeacherKind::Branch(b)) => vec![StackId::Fusion { branch: b }],
            Role::Student(_) => stacks.iter().map(|s| s.id).collect(),
        };
        let head_in_width = head_inputs.len() * cfg.d_model;

        let mut b = ParamBuilder::<S>::new(seed);
        for f in &fronts {
            let fan = f.kernel * f.d_in;
            b.uniform(format!("front.{}.w", f.tag.letter()), vec![f.kernel, f.d_in, cfg.d_model], fan);
            b.uniform(format!("front.{}.b", f.tag.letter()), vec![cfg.d_model], fan);
        }
        for s in &stacks {
            if matches!(s.id, StackId::Fusion { .. }) {
                b.uniform(format!("{}.in_proj.w", s.id), vec![2 * cfg.d_model, cfg.d_model], 2 * cfg.d_model);
                b.uniform(format!("{}.in_proj.b", s.id), vec![cfg.d_model], 2 * cfg.d_model);
            }
            for j in 0..cfg.l {
                b.layer(&format!("{}.l{}", s.id, j), cfg.d_model, cfg.ffn_mult);
            }
        }
        b.uniform("head.w1".into(), vec![head_in_width, cfg.head_hidden], head_in_width);
        b.uniform("head.b1".into(), vec![cfg.head_hidden], head_in_width);
        b.uniform("head.w2".into(), vec![cfg.head_hidden, cfg.classes], cfg.head_hidden);
        b.uniform("head.b2".into(), vec![cfg.classes], cfg.head_hidden);

        Ok(Self {
            cfg,
            role,
            alignment,
            arch: Arch { fronts, stacks, head_inputs, head_in_width },
            params: b.params,
            seed,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn stack_ids(&self) -> Vec<StackId> {
        self.arch.stacks.iter().map(|s| s.id).collect()
    }

    pub fn has_stack(&self, id: StackId) -> bool {
        self.arch.stacks.iter().any(|s| s.id == id)
    }

    /// Attention-map shape (query length, key/value length) for one stack.
    pub fn map_shape(&self, id: StackId) -> Option<(usize, usize)> {
        let t_of = |m: Modality| self.arch.fronts.iter().find(|f| f.tag == m).map(|f| f.t_out);
        match id {
            StackId::Cross { target, source } => Some((t_of(source)?, t_of(target)?)),
            StackId::Fusion { branch } => t_of(branch).map(|t| (t, t)),
        }
    }

    /// Per-component parameter subtotals in a stable order.
    pub fn param_breakdown(&self) -> Vec<(String, usize)> {
        let mut out: Vec<(String, usize)> = Vec::new();
        for p in &self.params {
            let comp = match p.name.rfind('.') {
                Some(_) if p.name.starts_with("front.") => {
                    p.name.split('.').take(2).collect::<Vec<_>>().join(".")
                }
                Some(_) if p.name.starts_with("head.") => "head".to_string(),
                _ => p.name.split(".l").next().unwrap_or(&p.name).to_string(),
            };
            match out.iter_mut().find(|(c, _)| *c == comp) {
                Some((_, n)) => *n += p.value.numel(),
                None => out.push((comp, p.value.numel())),
            }
        }
        out
    }

    fn param_index(&self, name: &str) -> usize {
        self.params
            .iter()
            .position(|p| p.name == name)
            .unwrap_or_else(|| panic!("parameter {name} missing"))
    }

    /// Binds every parameter as a tape leaf and runs the forward pass.
    /// `trainable=false` detaches the whole network, so backward skips it.
    pub fn forward(&self, g: &mut Graph<S>, batch: &Batch<S>, trainable: bool) -> Result<Forward> {
        let param_nodes: Vec<NodeId> = self
            .params
            .iter()
            .map(|p| g.leaf(p.value.clone(), trainable))
            .collect::<Result<_>>()?;
        self.forward_with(g, batch, &param_nodes)
    }

    /// Forward pass against an existing set of parameter leaves; used by the
    /// gradient checker to perturb parameters without rebuilding the struct.
    pub fn forward_with(&self, g: &mut Graph<S>, batch: &Batch<S>, param_nodes: &[NodeId]) -> Result<Forward> {
        let node = |name: &str| param_nodes[self.param_index(name)];
        let d = self.cfg.d_model;

        // Front-ends: convolution, then the sinusoidal position table.
        let mut streams: Vec<(Modality, NodeId)> = Vec::with_capacity(3);
        for f in &self.arch.fronts {
            let x = match f.reads {
                Modality::Video => &batch.video,
                Modality::Audio => batch.audio.as_ref().ok_or_else(|| TensorError::BadParam {
                    op: "forward",
                    detail: "audio input missing".into(),
                })?,
                Modality::Language => batch.language.as_ref().ok_or_else(|| TensorError::BadParam {
                    op: "forward",
                    detail: "language input missing".into(),
                })?,
            };
            if x.rank() != 3 || x.shape()[1] != f.t_in || x.shape()[2] != f.d_in {
                return Err(TensorError::BadShape {
                    op: "forward",
                    shape: x.shape().to_vec(),
                    detail: format!(
                        "front-end {} expects [B, {}, {}], got {}",
                        f.tag.letter(),
                        f.t_in,
                        f.d_in,
                        fmt_shape(x.shape())
                    ),
                });
            }
            let xn = g.constant(x.clone())?;
            let w = node(&format!("front.{}.w", f.tag.letter()));
            let bias = node(&format!("front.{}.b", f.tag.letter()));
            let conv = g.conv1d(xn, w, bias, f.stride, Padding::Same)?;
            let pe = g.constant(nn::sinusoidal_pos_emb::<S>(f.t_out, d)?)?;
            let with_pos = g.add_broadcast(conv, pe)?;
            streams.push((f.tag, with_pos));
        }
        let stream = |m: Modality| streams.iter().find(|(t, _)| *t == m).unwrap().1;

        let layer_nodes = |id: StackId, j: usize| -> LayerNodes {
            let p = format!("{id}.l{j}");
            LayerNodes {
                ln1_g: node(&format!("{p}.ln1.g")),
                ln1_b: node(&format!("{p}.ln1.b")),
                mha: MhaNodes {
                    wq: node(&format!("{p}.wq")),
                    bq: node(&format!("{p}.bq")),
                    wk: node(&format!("{p}.wk")),
                    bk: node(&format!("{p}.bk")),
                    wv: node(&format!("{p}.wv")),
                    bv: node(&format!("{p}.bv")),
                    wo: node(&format!("{p}.wo")),
                    bo: node(&format!("{p}.bo")),
                },
                ln2_g: node(&format!("{p}.ln2.g")),
                ln2_b: node(&format!("{p}.ln2.b")),
                w1: node(&format!("{p}.ffn.w1")),
                b1: node(&format!("{p}.ffn.b1")),
                w2: node(&format!("{p}.ffn.w2")),
                b2: node(&format!("{p}.ffn.b2")),
            }
        };

        let mut outs: Vec<(StackId, NodeId)> = Vec::with_capacity(self.arch.stacks.len());
        let mut traces: Vec<(StackId, Vec<AttnTap>)> = Vec::with_capacity(self.arch.stacks.len());
        for spec in &self.arch.stacks {
            let layers: Vec<LayerNodes> = (0..self.cfg.l).map(|j| layer_nodes(spec.id, j)).collect();
            let (y, taps) = match spec.id {
                StackId::Cross { target, source } => {
                    let q = stream(source);
                    if target == source {
                        nn::stack_forward(g, q, KvSource::SelfStream, &layers, self.cfg.n_h)?
                    } else {
                        nn::stack_forward(g, q, KvSource::Fixed(stream(target)), &layers, self.cfg.n_h)?
                    }
                }
                StackId::Fusion { branch } => {
                    let [t1, t2] = branch_targets(branch);
                    let find = |target: Modality| {
                        outs.iter()
                            .find(|(id, _)| *id == StackId::Cross { target, source: branch })
                            .unwrap()
                            .1
                    };
                    let fused = g.concat_last(&[find(t1), find(t2)])?;
                    let proj = g.matmul(fused, node(&format!("{}.in_proj.w", spec.id)))?;
                    let proj = g.add_broadcast(proj, node(&format!("{}.in_proj.b", spec.id)))?;
                    nn::stack_forward(g, proj, KvSource::SelfStream, &layers, self.cfg.n_h)?
                }
            };
            outs.push((spec.id, y));
            traces.push((spec.id, taps));
        }

        // Head: last sequence element of each designated stack, concatenated,
        // then two affine layers with a rectifier between.
        let mut lasts = Vec::with_capacity(self.arch.head_inputs.len());
        for id in &self.arch.head_inputs {
            let (spec, out) = self
                .arch
                .stacks
                .iter()
                .zip(&outs)
                .find(|(s, _)| s.id == *id)
                .map(|(s, (_, o))| (s, *o))
                .unwrap();
            lasts.push(g.select_time(out, spec.t_out - 1)?);
        }
        let cat = g.concat_last(&lasts)?;
        let h = g.matmul(cat, node("head.w1"))?;
        let penultimate = g.add_broadcast(h, node("head.b1"))?;
        let act = g.relu(penultimate)?;
        let out = g.matmul(act, node("head.w2"))?;
        let logits = g.add_broadcast(out, node("head.b2"))?;

        Ok(Forward {
            logits,
            penultimate,
            stacks: traces,
            param_nodes: param_nodes.to_vec(),
        })
    }
}

/// Closed-form parameter total for one transformer layer of width `d`.
pub fn layer_param_formula(d: usize, ffn_mult: usize) -> usize {
    let f = d * ffn_mult;
    // Four projections with biases, two norms, two affine FFN stages.
    4 * (d * d + d) + 2 * (2 * d) + (d * f + f) + (f * d + d)
}
