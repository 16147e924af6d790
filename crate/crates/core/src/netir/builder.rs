use super::{GraphError, LayerKind, LayerNode, NetworkGraph, NodeId, TensorShape};

/// Incremental constructor for [`NetworkGraph`].
///
/// Node 0 is the input. `push` appends after the most recently added node;
/// `push_after` starts a new branch from an earlier node.
#[derive(Debug, Clone)]
pub struct GraphBuilder {
    name: String,
    num_classes: usize,
    input_shape: TensorShape,
    nodes: Vec<LayerNode>,
    edges: Vec<(NodeId, NodeId)>,
    exits: Vec<NodeId>,
    tail: NodeId,
    in_branch: bool,
}

impl GraphBuilder {
    pub fn new(name: impl Into<String>, num_classes: usize, input_shape: TensorShape) -> Self {
        Self {
            name: name.into(),
            num_classes,
            input_shape,
            nodes: vec![LayerNode::new(0, LayerKind::Input)],
            edges: Vec::new(),
            exits: Vec::new(),
            tail: 0,
            in_branch: false,
        }
    }

    pub fn input(&self) -> NodeId {
        0
    }

    pub fn push(&mut self, kind: LayerKind) -> NodeId {
        self.push_after_inner(self.tail, kind, self.in_branch)
    }

    pub fn push_after(&mut self, parent: NodeId, kind: LayerKind) -> NodeId {
        self.push_after_inner(parent, kind, false)
    }

    /// Starts an exit branch; subsequent `push` calls stay in the branch
    /// until the next `push_after`.
    pub fn push_branch_after(&mut self, parent: NodeId, kind: LayerKind) -> NodeId {
        self.push_after_inner(parent, kind, true)
    }

    /// Terminates the current chain with an exit head.
    pub fn push_exit(&mut self) -> NodeId {
        let id = self.push(LayerKind::ExitHead {
            num_classes: self.num_classes,
        });
        self.exits.push(id);
        id
    }

    fn push_after_inner(&mut self, parent: NodeId, kind: LayerKind, branch: bool) -> NodeId {
        let id = self.nodes.len() as NodeId;
        let mut node = LayerNode::new(id, kind);
        node.exit_branch = branch;
        self.nodes.push(node);
        self.edges.push((parent, id));
        self.tail = id;
        self.in_branch = branch;
        id
    }

    /// Mutable access to an already pushed node, e.g. to attach weights.
    pub fn node_mut(&mut self, id: NodeId) -> Option<&mut LayerNode> {
        self.nodes.get_mut(id as usize)
    }

    pub(crate) fn build_unchecked(self) -> NetworkGraph {
        NetworkGraph {
            name: self.name,
            num_classes: self.num_classes,
            input_shape: self.input_shape,
            nodes: self.nodes,
            edges: self.edges,
            exits: self.exits,
        }
    }

    /// Validates, orders exits shallowest first and infers shapes.
    pub fn build(self) -> Result<NetworkGraph, GraphError> {
        let mut g = self.build_unchecked();
        let mut keyed: Vec<(usize, NodeId)> = g.exits.iter().map(|&e| (g.exit_depth(e), e)).collect();
        keyed.sort_by_key(|&(d, _)| d);
        g.exits = keyed.into_iter().map(|(_, e)| e).collect();
        NetworkGraph::new(g.name, g.num_classes, g.input_shape, g.nodes, g.edges, g.exits)
    }
}
