//! Shared fixtures for the criterion benches: a deterministic batch and the
//! desk-scale teacher/student pair, so every run times the same work.

use mmkd_core::data::{generate, SyntheticSpec};
use mmkd_core::network::{Alignment, Batch, Network, NetworkConfig, StudentConfig, TeacherKind};
use mmkd_core::Graph;

pub fn desk_batch(n: usize) -> Batch<f32> {
    let ds = generate(&SyntheticSpec::desk(n, 11)).expect("desk spec generates");
    let idx: Vec<usize> = (0..n).collect();
    ds.batch(&idx).expect("batch assembles").0
}

pub fn desk_teacher() -> Network<f32> {
    Network::teacher(NetworkConfig::desk(), TeacherKind::Complete, 1).expect("teacher builds")
}

pub fn desk_student() -> Network<f32> {
    Network::student(NetworkConfig::desk(), StudentConfig::C5, Alignment::SDown, 2)
        .expect("student builds")
}

pub fn forward_logit(net: &Network<f32>, batch: &Batch<f32>) -> f32 {
    let mut g = Graph::new();
    let fwd = net.forward(&mut g, batch, false).expect("forward runs");
    g.value(fwd.logits).data()[0]
}
