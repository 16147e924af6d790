use super::{GraphError, LayerKind, LayerNode, NetworkGraph, TensorShape};

/// Propagates shapes from the input through every node and checks weight
/// array lengths against them. Idempotent.
pub fn infer_shapes(graph: &NetworkGraph) -> Result<NetworkGraph, GraphError> {
    let mut out = graph.clone();
    let order = super::topo_sort(&graph.nodes, &graph.edges)?;
    for id in order {
        let input = match graph.producer(id) {
            None => graph.input_shape,
            Some(p) => out
                .node(p)
                .and_then(|n| n.output_shape)
                .ok_or_else(|| GraphError::Invalid(format!("node {p} has no shape")))?,
        };
        let node = out.node_mut(id).expect("id from topo order");
        let output = output_shape(node, input)?;
        node.input_shape = Some(input);
        node.output_shape = Some(output);
        check_weights(node)?;
    }
    Ok(out)
}

fn mismatch(node: &LayerNode, expected: impl Into<String>, found: impl Into<String>) -> GraphError {
    GraphError::ShapeMismatch {
        node: node.id,
        expected: expected.into(),
        found: found.into(),
    }
}

fn output_shape(node: &LayerNode, input: TensorShape) -> Result<TensorShape, GraphError> {
    if !input.is_valid() {
        return Err(mismatch(node, "dimensions >= 1", input.to_string()));
    }
    let shape = match node.kind {
        LayerKind::Input => input,
        LayerKind::Conv2D {
            kernel,
            stride,
            out_channels,
            padding,
        } => {
            let h = input.height + 2 * padding;
            let w = input.width + 2 * padding;
            if h < kernel || w < kernel {
                return Err(mismatch(
                    node,
                    format!("padded spatial size >= kernel {kernel}"),
                    input.to_string(),
                ));
            }
            TensorShape::new(out_channels, (h - kernel) / stride + 1, (w - kernel) / stride + 1)
        }
        LayerKind::Dense { out_features } => TensorShape::vector(out_features),
        LayerKind::ReLU | LayerKind::Softmax | LayerKind::McDropout { .. } => input,
        LayerKind::MaxPool { kernel, stride } => {
            if input.height < kernel || input.width < kernel {
                return Err(mismatch(
                    node,
                    format!("spatial size >= pool {kernel}"),
                    input.to_string(),
                ));
            }
            TensorShape::new(
                input.channels,
                (input.height - kernel) / stride + 1,
                (input.width - kernel) / stride + 1,
            )
        }
        LayerKind::GlobalAvgPool => TensorShape::vector(input.channels),
        LayerKind::ExitHead { num_classes } => {
            if input.numel() != num_classes {
                return Err(mismatch(node, format!("{num_classes} logits"), input.to_string()));
            }
            TensorShape::vector(num_classes)
        }
    };
    Ok(shape)
}

fn check_weights(node: &LayerNode) -> Result<(), GraphError> {
    let (Some(w), Some((k_len, b_len))) = (&node.weights, node.weight_lens()) else {
        return Ok(());
    };
    if w.kernel.len() != k_len || w.bias.len() != b_len {
        return Err(mismatch(
            node,
            format!("weights kernel={k_len} bias={b_len}"),
            format!("kernel={} bias={}", w.kernel.len(), w.bias.len()),
        ));
    }
    Ok(())
}
