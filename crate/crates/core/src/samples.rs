//! Bundled sample networks and random graph generators used by tests,
//! the self-test and the benchmarks.

use crate::mapper::{plan, DeviceProfile, MappingPlan, ReusePolicy, Strategy};
use crate::netir::{load_graph, GraphBuilder, LayerKind, NetworkGraph, NodeId, TensorShape};
use crate::rng::Rng;
use crate::transform::{insert_exits, insert_mcd, ExitPolicy, McdPolicy};

pub const LENET_LIKE_DOC: &str = include_str!("../samples/lenet_like.json");
pub const ZCU102_LIKE_DOC: &str = include_str!("../samples/zcu102_like.json");

/// Two conv/pool blocks followed by a dense classifier; nine nodes.
pub fn lenet_like() -> NetworkGraph {
    load_graph(LENET_LIKE_DOC).expect("bundled sample is valid")
}

/// [`lenet_like`] with an exit after each pool block and one dropout layer
/// per exit at keep rate 0.75; no weights.
pub fn lenet_three_exit() -> NetworkGraph {
    let me = insert_exits(&lenet_like(), &ExitPolicy::AfterEachPoolBlock).expect("pool anchors exist");
    insert_mcd(&me, &McdPolicy::new(1, 0.75)).expect("one layer per exit fits")
}

/// Mid-size FPGA profile: 2520 DSP slices, 4104 KB of block RAM, 200 MHz.
pub fn zcu102_like() -> DeviceProfile {
    DeviceProfile::from_json(ZCU102_LIKE_DOC).expect("bundled profile is valid")
}

/// `input -> (dense -> relu)* -> dense(classes) -> exit`.
pub fn mlp(name: &str, input_dim: usize, hidden: &[usize], classes: usize) -> NetworkGraph {
    let mut b = GraphBuilder::new(name, classes, TensorShape::vector(input_dim));
    for &h in hidden {
        b.push(LayerKind::Dense { out_features: h });
        b.push(LayerKind::ReLU);
    }
    b.push(LayerKind::Dense { out_features: classes });
    b.push_exit();
    b.build().expect("mlp is valid")
}

/// Ids of the ReLU nodes of an [`mlp`], one per hidden layer.
pub fn mlp_hidden_outputs(graph: &NetworkGraph) -> Vec<NodeId> {
    graph
        .path_to(graph.final_exit())
        .into_iter()
        .filter(|&id| graph.node(id).is_some_and(|n| n.kind == LayerKind::ReLU))
        .collect()
}

/// Small random single-exit CNN/MLP backbone with valid shapes.
pub fn random_backbone(rng: &mut Rng) -> NetworkGraph {
    let classes = 2 + rng.below(4);
    let side = 4 + rng.below(9);
    let mut shape = TensorShape::new(1 + rng.below(3), side, side);
    let mut b = GraphBuilder::new("random", classes, shape);
    for _ in 0..rng.below(4) {
        let kernel = if rng.below(2) == 0 { 1 } else { 3 };
        let out_channels = 1 + rng.below(6);
        b.push(LayerKind::Conv2D {
            kernel,
            stride: 1,
            out_channels,
            padding: kernel / 2,
        });
        shape.channels = out_channels;
        if rng.below(3) != 0 {
            b.push(LayerKind::ReLU);
        }
        if shape.height >= 2 && rng.below(2) == 0 {
            b.push(LayerKind::MaxPool { kernel: 2, stride: 2 });
            shape.height /= 2;
            shape.width /= 2;
        }
    }
    for _ in 0..rng.below(3) {
        b.push(LayerKind::Dense {
            out_features: 2 + rng.below(9),
        });
        b.push(LayerKind::ReLU);
    }
    b.push(LayerKind::Dense { out_features: classes });
    b.push_exit();
    b.build().expect("generator emits valid graphs")
}

/// Random multi-exit network with dropout layers (possibly none).
pub fn random_bayesian(rng: &mut Rng) -> NetworkGraph {
    let backbone = random_backbone(rng);
    let policy = if rng.below(2) == 0 {
        ExitPolicy::AfterEachPoolBlock
    } else {
        let path = backbone.path_to(backbone.final_exit());
        let candidates = &path[1..path.len() - 1];
        let picks = candidates.iter().copied().filter(|_| rng.below(3) == 0).collect();
        ExitPolicy::ExplicitIds(picks)
    };
    let me = insert_exits(&backbone, &policy).expect("anchors are on the backbone");
    let max_layers = me
        .exits()
        .iter()
        .map(|&e| {
            me.path_to(e)
                .iter()
                .filter(|&&id| me.node(id).is_some_and(|n| n.kind.is_weighted()))
                .count()
        })
        .min()
        .unwrap_or(0);
    let layers = rng.below(max_layers.min(3) + 1);
    let keep = [0.875, 0.75, 0.625, 0.5][rng.below(4)];
    insert_mcd(&me, &McdPolicy::new(layers, keep)).expect("layer count within bounds")
}

/// Random network with at least one dropout layer plus a random mapping:
/// strategy, engine count, sample count and per-layer reuse requests.
pub fn random_mapping(rng: &mut Rng) -> (NetworkGraph, MappingPlan) {
    let graph = loop {
        let g = random_bayesian(rng);
        if !g.mcd_nodes().is_empty() {
            break g;
        }
    };
    let n_pass = 1 + rng.below(8);
    let strategy = match rng.below(3) {
        0 => Strategy::Spatial,
        1 => Strategy::Temporal,
        _ => Strategy::Mixed(1 + rng.below(n_pass)),
    };
    let factors = [1, 2, 3, 4, 8, 16];
    let reuse = if rng.below(2) == 0 {
        ReusePolicy::Uniform(factors[rng.below(factors.len())])
    } else {
        let layers = graph
            .nodes()
            .iter()
            .filter(|n| n.kind.is_weighted())
            .map(|n| (n.id, factors[rng.below(factors.len())]))
            .collect();
        ReusePolicy::PerLayer { default: 1, layers }
    };
    let p = plan(&graph, n_pass * graph.n_exit(), strategy, &reuse).expect("random plan is valid");
    (graph, p)
}
