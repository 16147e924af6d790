//! Graph documents: canonical UTF-8 JSON with sorted keys, nodes sorted by
//! id and numbers in shortest round-trip form.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::{
    Granularity, GraphError, LayerKind, LayerNode, NetworkGraph, NodeId, QuantAnnotation, TensorShape, Weights,
};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphDoc {
    name: String,
    num_classes: usize,
    input_shape: [usize; 3],
    nodes: Vec<NodeDoc>,
    edges: Vec<[NodeId; 2]>,
    exits: Vec<NodeId>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeDoc {
    id: NodeId,
    kind: String,
    #[serde(default)]
    params: Map<String, Value>,
    #[serde(default)]
    weights: Option<Weights>,
    #[serde(default)]
    quant: Option<QuantAnnotation>,
    #[serde(default)]
    branch: bool,
}

/// Parses and validates a graph document, then infers shapes.
pub fn load_graph(text: &str) -> Result<NetworkGraph, GraphError> {
    let doc: GraphDoc = serde_json::from_str(text).map_err(|e| match e.classify() {
        serde_json::error::Category::Data => GraphError::Schema {
            field: format!("line {}", e.line()),
            message: e.to_string(),
        },
        _ => GraphError::Parse {
            line: e.line(),
            message: e.to_string(),
        },
    })?;
    let mut nodes = Vec::with_capacity(doc.nodes.len());
    for n in doc.nodes {
        let kind = parse_kind(n.id, &n.kind, &n.params)?;
        let mut node = LayerNode::new(n.id, kind);
        if let Some(w) = &n.weights {
            if w.kernel.iter().chain(&w.bias).any(|v| !v.is_finite()) {
                return Err(GraphError::schema(
                    format!("nodes[{}].weights", n.id),
                    "non-finite value",
                ));
            }
        }
        node.weights = n.weights;
        node.quant = n.quant;
        node.exit_branch = n.branch;
        nodes.push(node);
    }
    let [c, h, w] = doc.input_shape;
    NetworkGraph::new(
        doc.name,
        doc.num_classes,
        TensorShape::new(c, h, w),
        nodes,
        doc.edges.into_iter().map(|[s, d]| (s, d)).collect(),
        doc.exits,
    )
}

fn parse_kind(id: NodeId, kind: &str, params: &Map<String, Value>) -> Result<LayerKind, GraphError> {
    let field = |f: &str| format!("nodes[{id}].params.{f}");
    let uint = |f: &str| -> Result<usize, GraphError> {
        params
            .get(f)
            .and_then(Value::as_u64)
            .map(|v| v as usize)
            .ok_or_else(|| GraphError::schema(field(f), "expected a non-negative integer"))
    };
    let expect_keys = |keys: &[&str]| -> Result<(), GraphError> {
        match params.keys().find(|k| !keys.contains(&k.as_str())) {
            Some(k) => Err(GraphError::schema(field(k), format!("unknown parameter for `{kind}`"))),
            None => Ok(()),
        }
    };
    let parsed = match kind {
        "input" => {
            expect_keys(&[])?;
            LayerKind::Input
        }
        "conv2d" => {
            expect_keys(&["kernel", "stride", "out_channels", "padding"])?;
            LayerKind::Conv2D {
                kernel: uint("kernel")?,
                stride: uint("stride")?,
                out_channels: uint("out_channels")?,
                padding: uint("padding")?,
            }
        }
        "dense" => {
            expect_keys(&["out_features"])?;
            LayerKind::Dense {
                out_features: uint("out_features")?,
            }
        }
        "relu" => {
            expect_keys(&[])?;
            LayerKind::ReLU
        }
        "maxpool" => {
            expect_keys(&["kernel", "stride"])?;
            LayerKind::MaxPool {
                kernel: uint("kernel")?,
                stride: uint("stride")?,
            }
        }
        "global_avg_pool" => {
            expect_keys(&[])?;
            LayerKind::GlobalAvgPool
        }
        "softmax" => {
            expect_keys(&[])?;
            LayerKind::Softmax
        }
        "mc_dropout" => {
            expect_keys(&["keep_rate", "granularity"])?;
            let keep_rate = params
                .get("keep_rate")
                .and_then(Value::as_f64)
                .ok_or_else(|| GraphError::schema(field("keep_rate"), "expected a number"))?;
            let granularity = match params.get("granularity") {
                None => Granularity::ElementWise,
                Some(v) => serde_json::from_value(v.clone())
                    .map_err(|_| GraphError::schema(field("granularity"), "expected \"element\" or \"channel\""))?,
            };
            LayerKind::McDropout { keep_rate, granularity }
        }
        "exit_head" => {
            expect_keys(&["num_classes"])?;
            LayerKind::ExitHead {
                num_classes: uint("num_classes")?,
            }
        }
        other => {
            return Err(GraphError::schema(
                format!("nodes[{id}].kind"),
                format!("unknown layer kind `{other}`"),
            ))
        }
    };
    Ok(parsed)
}

fn kind_params(kind: &LayerKind) -> Map<String, Value> {
    let mut m = Map::new();
    match *kind {
        LayerKind::Conv2D {
            kernel,
            stride,
            out_channels,
            padding,
        } => {
            m.insert("kernel".into(), kernel.into());
            m.insert("stride".into(), stride.into());
            m.insert("out_channels".into(), out_channels.into());
            m.insert("padding".into(), padding.into());
        }
        LayerKind::Dense { out_features } => {
            m.insert("out_features".into(), out_features.into());
        }
        LayerKind::MaxPool { kernel, stride } => {
            m.insert("kernel".into(), kernel.into());
            m.insert("stride".into(), stride.into());
        }
        LayerKind::McDropout { keep_rate, granularity } => {
            m.insert("keep_rate".into(), keep_rate.into());
            m.insert(
                "granularity".into(),
                serde_json::to_value(granularity).expect("unit enum serializes"),
            );
        }
        LayerKind::ExitHead { num_classes } => {
            m.insert("num_classes".into(), num_classes.into());
        }
        LayerKind::Input | LayerKind::ReLU | LayerKind::GlobalAvgPool | LayerKind::Softmax => {}
    }
    m
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("plain data serializes")
}

pub(crate) fn graph_to_value(graph: &NetworkGraph) -> Value {
    let mut nodes: Vec<&LayerNode> = graph.nodes.iter().collect();
    nodes.sort_by_key(|n| n.id);
    let nodes: Vec<Value> = nodes
        .into_iter()
        .map(|n| {
            let mut m = Map::new();
            m.insert("id".into(), n.id.into());
            m.insert("kind".into(), n.kind.name().into());
            m.insert("params".into(), Value::Object(kind_params(&n.kind)));
            if let Some(w) = &n.weights {
                m.insert("weights".into(), to_value(w));
            }
            if let Some(q) = &n.quant {
                m.insert("quant".into(), to_value(q));
            }
            if n.exit_branch {
                m.insert("branch".into(), true.into());
            }
            Value::Object(m)
        })
        .collect();
    let mut edges = graph.edges.clone();
    edges.sort_unstable();
    let mut m = Map::new();
    m.insert("name".into(), graph.name.clone().into());
    m.insert("num_classes".into(), graph.num_classes.into());
    let s = graph.input_shape;
    m.insert("input_shape".into(), to_value(&[s.channels, s.height, s.width]));
    m.insert("nodes".into(), Value::Array(nodes));
    m.insert(
        "edges".into(),
        to_value(&edges.iter().map(|&(a, b)| [a, b]).collect::<Vec<_>>()),
    );
    m.insert("exits".into(), to_value(&graph.exits));
    Value::Object(m)
}

/// Canonical document text for `graph`.
pub fn save_graph(graph: &NetworkGraph) -> String {
    to_canonical_string(&graph_to_value(graph))
}

/// Pretty-prints with sorted keys and two-space indentation; arrays holding
/// only scalars stay on one line.
pub fn to_canonical_string(value: &Value) -> String {
    let mut out = String::new();
    write_value(&mut out, value, 0);
    out.push('\n');
    out
}

fn is_scalar(v: &Value) -> bool {
    !matches!(v, Value::Array(_) | Value::Object(_))
}

fn write_value(out: &mut String, value: &Value, indent: usize) {
    match value {
        Value::Object(map) => {
            if map.is_empty() {
                out.push_str("{}");
                return;
            }
            let sorted: BTreeMap<&String, &Value> = map.iter().collect();
            out.push_str("{\n");
            let last = sorted.len() - 1;
            for (i, (k, v)) in sorted.into_iter().enumerate() {
                push_indent(out, indent + 1);
                out.push_str(&Value::String(k.clone()).to_string());
                out.push_str(": ");
                write_value(out, v, indent + 1);
                if i != last {
                    out.push(',');
                }
                out.push('\n');
            }
            push_indent(out, indent);
            out.push('}');
        }
        Value::Array(items) if items.iter().all(is_scalar) => {
            out.push('[');
            for (i, v) in items.iter().enumerate() {
                if i > 0 {
                    out.push_str(", ");
                }
                out.push_str(&v.to_string());
            }
            out.push(']');
        }
        Value::Array(items) => {
            out.push_str("[\n");
            for (i, v) in items.iter().enumerate() {
                push_indent(out, indent + 1);
                write_value(out, v, indent + 1);
                if i + 1 != items.len() {
                    out.push(',');
                }
                out.push('\n');
            }
            push_indent(out, indent);
            out.push(']');
        }
        scalar => out.push_str(&scalar.to_string()),
    }
}

fn push_indent(out: &mut String, level: usize) {
    for _ in 0..level {
        out.push_str("  ");
    }
}
