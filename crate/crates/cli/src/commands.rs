//! One function per subcommand. Each returns a serializable report that the
//! binary prints as JSON, so the same code drives tests and the shell.

use crate::checkpoint;
use crate::config::{resolve_seed, RunConfig};
use crate::error::{CliError, Result};
use mmkd_core::data::{self, Dataset, SyntheticSpec};
use mmkd_core::network::{Batch, Network, NetworkConfig, Role, TeacherKind};
use mmkd_core::train::{evaluate, train, Metrics};
use mmkd_core::Graph;
use serde::Serialize;
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Debug, Serialize)]
pub struct GenReport {
    pub out: PathBuf,
    pub n: usize,
    pub seed: u64,
    pub class_counts: Vec<usize>,
}

pub fn cmd_gen_data(spec: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<GenReport> {
    let mut sp = match spec {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
            serde_json::from_str::<SyntheticSpec>(&text)
                .map_err(|e| CliError::Config(format!("data spec: {e}")))?
        }
        None => SyntheticSpec::desk(2000, 0),
    };
    sp.seed = resolve_seed(seed, sp.seed)?;
    let ds = data::generate(&sp)?;
    data::save(&ds, out)?;
    let mut class_counts = vec![0usize; ds.meta.classes];
    for i in 0..ds.len() {
        class_counts[ds.class_of(i)?] += 1;
    }
    Ok(GenReport { out: out.to_path_buf(), n: ds.len(), seed: sp.seed, class_counts })
}

#[derive(Debug, Serialize)]
pub struct TrainReport {
    pub checkpoint: PathBuf,
    pub history: PathBuf,
    pub seed: u64,
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    /// Metrics of the returned (best validation) weights on the test split.
    pub test: Metrics,
}

fn check_dims(net: &NetworkConfig, ds: &Dataset) -> Result<()> {
    if net.dims != ds.meta.dims || net.classes != ds.meta.classes {
        return Err(CliError::Config(format!(
            "network expects dims {:?} / {} classes, dataset has {:?} / {}",
            net.dims, net.classes, ds.meta.dims, ds.meta.classes
        )));
    }
    Ok(())
}

fn load_teacher(
    path: &Path,
    expected: TeacherKind,
    netcfg: &NetworkConfig,
) -> Result<Network<f32>> {
    let t = checkpoint::load(path, false)?;
    match t.role {
        Role::Teacher(kind) if kind == expected => {}
        other => {
            return Err(CliError::Config(format!(
                "{} holds {other:?}, this run distills from {expected:?}",
                path.display()
            )))
        }
    }
    if t.cfg != *netcfg {
        return Err(CliError::Config(format!(
            "teacher checkpoint {} was built with a different network preset",
            path.display()
        )));
    }
    Ok(t)
}

pub fn cmd_train(
    config: &Path,
    out: &Path,
    teacher_path: Option<&Path>,
    seed: Option<u64>,
) -> Result<TrainReport> {
    let rc = RunConfig::load(config)?;
    let seed = resolve_seed(seed, rc.seed)?;
    let netcfg = rc.network();
    let ds = data::load(&rc.data)?;
    check_dims(&netcfg, &ds)?;
    let (tr, va, te) = data::split(&ds, (rc.split.train, rc.split.val, rc.split.test), seed)?;

    let teacher = match (rc.expected_teacher(), teacher_path) {
        (None, None) => None,
        (None, Some(_)) => {
            return Err(CliError::Config(
                "a teacher checkpoint was given but the method does not distill".into(),
            ))
        }
        (Some(_), None) => {
            return Err(CliError::Config(format!(
                "method {:?} distills from a teacher; pass --teacher",
                rc.method
            )))
        }
        (Some(kind), Some(p)) => Some(load_teacher(p, kind, &netcfg)?),
    };

    let net = rc.build_network(seed)?;
    let tc = rc.train_config(seed);
    let (net, _, history) = train(net, teacher.as_ref(), &tr, &va, &tc)?;

    std::fs::create_dir_all(out).map_err(|e| CliError::Io(format!("{}: {e}", out.display())))?;
    let ckpt = out.join("checkpoint.mmkc");
    let hist = out.join("history.jsonl");
    checkpoint::save(&net, &ckpt)?;
    std::fs::write(&hist, history.to_jsonl())
        .map_err(|e| CliError::Io(format!("{}: {e}", hist.display())))?;
    let test = evaluate(&net, &te, tc.batch)?;
    Ok(TrainReport {
        checkpoint: ckpt,
        history: hist,
        seed,
        epochs: history.epochs.len(),
        best_epoch: history.best_epoch,
        best_val_loss: history.best_val,
        test,
    })
}

pub fn cmd_eval(ckpt: &Path, data_dir: &Path, force: bool) -> Result<Metrics> {
    let net = checkpoint::load(ckpt, force)?;
    let ds = data::load(data_dir)?;
    check_dims(&net.cfg, &ds)?;
    Ok(evaluate(&net, &ds, 64)?)
}

#[derive(Debug, Serialize)]
pub struct StackDump {
    pub stack: String,
    /// One head-averaged map per layer, rows over the query positions.
    pub layers: Vec<Vec<Vec<f32>>>,
}

#[derive(Debug, Serialize)]
pub struct AttnDump {
    pub sample: usize,
    pub role: Role,
    pub stacks: Vec<StackDump>,
}

pub fn dump_attn(net: &Network<f32>, ds: &Dataset, sample: usize) -> Result<AttnDump> {
    if sample >= ds.len() {
        return Err(CliError::Config(format!(
            "sample {sample} out of range for {} rows",
            ds.len()
        )));
    }
    let (batch, _) = ds.batch::<f32>(&[sample]).map_err(CliError::from)?;
    let mut g = Graph::new();
    let fwd = net.forward(&mut g, &batch, false)?;
    let mut stacks = Vec::new();
    for (id, taps) in &fwd.stacks {
        let mut layers = Vec::with_capacity(taps.len());
        for tap in taps {
            let t = g.value(tap.map);
            let (m, n) = (t.shape()[1], t.shape()[2]);
            let rows: Vec<Vec<f32>> = (0..m).map(|r| t.data()[r * n..(r + 1) * n].to_vec()).collect();
            layers.push(rows);
        }
        stacks.push(StackDump { stack: id.to_string(), layers });
    }
    Ok(AttnDump { sample, role: net.role, stacks })
}

#[derive(Debug, Serialize)]
pub struct DumpReport {
    pub out: PathBuf,
    pub stacks: usize,
    pub layers_per_stack: usize,
}

pub fn cmd_dump_attn(ckpt: &Path, data_dir: &Path, sample: usize, out: &Path) -> Result<DumpReport> {
    let net = checkpoint::load(ckpt, false)?;
    let ds = data::load(data_dir)?;
    check_dims(&net.cfg, &ds)?;
    let dump = dump_attn(&net, &ds, sample)?;
    let text = serde_json::to_string_pretty(&dump).expect("dump serializes");
    std::fs::write(out, text).map_err(|e| CliError::Io(format!("{}: {e}", out.display())))?;
    Ok(DumpReport {
        out: out.to_path_buf(),
        stacks: dump.stacks.len(),
        layers_per_stack: dump.stacks.first().map_or(0, |s| s.layers.len()),
    })
}

#[derive(Debug, Serialize)]
pub struct Component {
    pub name: String,
    pub count: usize,
}

#[derive(Debug, Serialize)]
pub struct ParamsReport {
    pub role: Role,
    pub components: Vec<Component>,
    pub total: usize,
    pub complete_teacher_total: usize,
    /// Complete-teacher size over this network's size.
    pub reduction: f64,
}

/// Groups parameter names into human-sized components: front-ends, one entry
/// per stack, fusion projections, the head.
fn component_of(name: &str) -> String {
    if let Some(at) = name.find(".l").filter(|&i| {
        name[i + 2..].chars().next().is_some_and(|c| c.is_ascii_digit())
    }) {
        return name[..at].to_string();
    }
    if let Some(at) = name.find(".in_proj") {
        return name[..at + ".in_proj".len()].to_string();
    }
    let mut parts = name.split('.');
    match (parts.next(), parts.next()) {
        (Some("front"), Some(m)) => format!("front.{m}"),
        (Some(first), _) => first.to_string(),
        _ => name.to_string(),
    }
}

pub fn cmd_params(config: &Path) -> Result<ParamsReport> {
    let rc = RunConfig::load(config)?;
    let net = rc.build_network(0)?;
    let mut components: Vec<Component> = Vec::new();
    for p in &net.params {
        let name = component_of(&p.name);
        let count = p.value.data().len();
        match components.iter_mut().find(|c| c.name == name) {
            Some(c) => c.count += count,
            None => components.push(Component { name, count }),
        }
    }
    let total = net.param_count();
    debug_assert_eq!(total, components.iter().map(|c| c.count).sum::<usize>());
    let teacher = Network::<f32>::teacher(rc.network(), TeacherKind::Complete, 0)?;
    let complete_teacher_total = teacher.param_count();
    Ok(ParamsReport {
        role: net.role,
        components,
        total,
        complete_teacher_total,
        reduction: complete_teacher_total as f64 / total as f64,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchStats {
    pub median_us: f64,
    pub q1_us: f64,
    pub q3_us: f64,
}

#[derive(Debug, Serialize)]
pub struct BenchReport {
    pub repeats: usize,
    pub batch: usize,
    pub subject: BenchStats,
    pub baseline: Option<BenchStats>,
    /// subject median / baseline median, when a baseline is timed.
    pub ratio: Option<f64>,
}

fn forward_once(net: &Network<f32>, batch: &Batch<f32>) -> Result<f64> {
    let mut g = Graph::new();
    let fwd = net.forward(&mut g, batch, false)?;
    // Touch the output so the work cannot be optimized away.
    Ok(g.value(fwd.logits).data()[0] as f64)
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - pos.floor())
}

fn stats(mut us: Vec<f64>) -> BenchStats {
    us.sort_by(|a, b| a.partial_cmp(b).unwrap());
    BenchStats {
        median_us: percentile(&us, 0.5),
        q1_us: percentile(&us, 0.25),
        q3_us: percentile(&us, 0.75),
    }
}

/// Times `subject` (and `baseline`, interleaved, when present) over `repeats`
/// forwards of one fixed batch. Warm-up iterations are not recorded.
pub fn bench_pair(
    subject: &Network<f32>,
    baseline: Option<&Network<f32>>,
    ds: &Dataset,
    batch: usize,
    repeats: usize,
) -> Result<BenchReport> {
    if repeats < 10 {
        return Err(CliError::Config(format!("repeats {repeats} below the minimum of 10")));
    }
    let idx: Vec<usize> = (0..batch.min(ds.len())).collect();
    let (b, _) = ds.batch::<f32>(&idx).map_err(CliError::from)?;
    let mut sink = 0.0;
    for _ in 0..3 {
        sink += forward_once(subject, &b)?;
        if let Some(base) = baseline {
            sink += forward_once(base, &b)?;
        }
    }
    let mut subj = Vec::with_capacity(repeats);
    let mut base_t = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t0 = Instant::now();
        sink += forward_once(subject, &b)?;
        subj.push(t0.elapsed().as_secs_f64() * 1e6);
        if let Some(base) = baseline {
            let t0 = Instant::now();
            sink += forward_once(base, &b)?;
            base_t.push(t0.elapsed().as_secs_f64() * 1e6);
        }
    }
    std::hint::black_box(sink);
    let subject_stats = stats(subj);
    let baseline_stats = baseline.map(|_| stats(base_t));
    let ratio = baseline_stats.as_ref().map(|bs| subject_stats.median_us / bs.median_us);
    Ok(BenchReport {
        repeats,
        batch: idx.len(),
        subject: subject_stats,
        baseline: baseline_stats,
        ratio,
    })
}

pub fn cmd_bench(
    ckpt: &Path,
    data_dir: &Path,
    repeats: usize,
    baseline: Option<&Path>,
    batch: usize,
) -> Result<BenchReport> {
    let net = checkpoint::load(ckpt, false)?;
    let ds = data::load(data_dir)?;
    check_dims(&net.cfg, &ds)?;
    let base = match baseline {
        Some(p) => {
            let b = checkpoint::load(p, false)?;
            check_dims(&b.cfg, &ds)?;
            Some(b)
        }
        None => None,
    };
    bench_pair(&net, base.as_ref(), &ds, batch, repeats)
}
