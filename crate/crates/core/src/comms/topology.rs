use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pattern {
    ParameterServer,
    Ring,
}

/// Node layout. Workers are `0..nodes`; in parameter-server mode the master
/// is the extra endpoint `nodes`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topology {
    nodes: usize,
    pattern: Pattern,
    ring_order: Vec<usize>,
}

impl Topology {
    pub fn parameter_server(nodes: usize) -> Result<Self> {
        Self::check_nodes(nodes)?;
        Ok(Self {
            nodes,
            pattern: Pattern::ParameterServer,
            ring_order: Vec::new(),
        })
    }

    pub fn ring(nodes: usize) -> Result<Self> {
        Self::ring_with_order((0..nodes).collect())
    }

    pub fn ring_with_order(order: Vec<usize>) -> Result<Self> {
        let nodes = order.len();
        Self::check_nodes(nodes)?;
        let mut seen = vec![false; nodes];
        for &n in &order {
            if n >= nodes || std::mem::replace(&mut seen[n], true) {
                return Err(Error::invalid(format!("ring order {order:?} is not a permutation")));
            }
        }
        Ok(Self {
            nodes,
            pattern: Pattern::Ring,
            ring_order: order,
        })
    }

    fn check_nodes(nodes: usize) -> Result<()> {
        if nodes == 0 {
            return Err(Error::invalid("topology needs at least one node"));
        }
        if nodes > u16::MAX as usize {
            return Err(Error::invalid(format!("{nodes} nodes do not fit a 16-bit node id")));
        }
        Ok(())
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn pattern(&self) -> Pattern {
        self.pattern
    }

    pub fn master_id(&self) -> Option<usize> {
        (self.pattern == Pattern::ParameterServer).then_some(self.nodes)
    }

    /// Number of transport endpoints, including the master.
    pub fn endpoints(&self) -> usize {
        match self.pattern {
            Pattern::ParameterServer => self.nodes + 1,
            Pattern::Ring => self.nodes,
        }
    }

    /// Node ids in ring position order; empty outside ring mode.
    pub fn ring_order(&self) -> &[usize] {
        &self.ring_order
    }
}
