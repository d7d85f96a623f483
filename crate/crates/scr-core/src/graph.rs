//! Search graph construction: a prefix-shared trie over per-command
//! emission-state sequences. Self-loops are implicit (the decoder may
//! re-consume a node's own state); finals carry the command id. For a finite
//! command list with one pronunciation each, this trie is the deterministic
//! minimal prefix machine, so no generic transducer algebra is needed.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::lexicon::CommandSet;

/// Sentinel for the non-emitting root.
pub const START: usize = usize::MAX;

#[derive(Debug, Clone)]
pub struct GraphNode {
    pub id: usize,
    /// Emission-state id; `START` for the root only.
    pub emit_state: usize,
    /// Child node ids, ordered by the child's emit_state.
    pub arcs: Vec<usize>,
    /// Command id when this node ends exactly one command.
    pub final_command: Option<usize>,
    /// States consumed from the root.
    pub depth: usize,
}

#[derive(Debug, Clone)]
pub struct DecodingGraph {
    pub nodes: Vec<GraphNode>,
    /// Longest command state sequence; sizes the decoder's output arrays.
    pub max_command_states: usize,
    pub command_count: usize,
    /// Output unit count (emission states + blank) of the matching model.
    pub num_units: usize,
    /// Blank unit id.
    pub blank_id: usize,
}

impl DecodingGraph {
    pub fn root(&self) -> &GraphNode {
        &self.nodes[0]
    }

    pub fn num_finals(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| n.final_command.is_some())
            .count()
    }
}

/// Builds the trie. Commands are inserted in id order; node ids are assigned
/// in creation order, so two builds over one command set are identical.
/// Duplicate state sequences and strict-prefix collisions are rejected: a
/// final node with outgoing arcs cannot be disambiguated by the one-pass
/// trigger decoder.
pub fn build_graph(command_set: &CommandSet) -> Result<DecodingGraph> {
    if command_set.commands.is_empty() {
        return Err(Error::Config("command set is empty".into()));
    }
    let mut nodes = vec![GraphNode {
        id: 0,
        emit_state: START,
        arcs: Vec::new(),
        final_command: None,
        depth: 0,
    }];

    for cmd in &command_set.commands {
        let mut node = 0usize;
        for (pos, &state) in cmd.states.iter().enumerate() {
            if nodes[node].final_command.is_some() {
                // Passing through somebody's final: that command is a strict
                // prefix of this one.
                let prefix = nodes[node].final_command.unwrap();
                return Err(Error::PrefixCollision {
                    prefix,
                    longer: cmd.id,
                });
            }
            let existing = nodes[node]
                .arcs
                .iter()
                .copied()
                .find(|&c| nodes[c].emit_state == state);
            node = match existing {
                Some(child) => child,
                None => {
                    let id = nodes.len();
                    nodes.push(GraphNode {
                        id,
                        emit_state: state,
                        arcs: Vec::new(),
                        final_command: None,
                        depth: pos + 1,
                    });
                    nodes[node].arcs.push(id);
                    // Keep children ordered by emit_state for determinism.
                    let mut arcs = std::mem::take(&mut nodes[node].arcs);
                    arcs.sort_by_key(|&c| nodes[c].emit_state);
                    nodes[node].arcs = arcs;
                    id
                }
            };
        }
        if let Some(existing) = nodes[node].final_command {
            return Err(Error::DuplicateStateSequence {
                a: existing,
                b: cmd.id,
            });
        }
        if !nodes[node].arcs.is_empty() {
            // This command ends at an interior node: it is a strict prefix
            // of some earlier command.
            let longer = descend_to_any_final(&nodes, node);
            return Err(Error::PrefixCollision {
                prefix: cmd.id,
                longer,
            });
        }
        nodes[node].final_command = Some(cmd.id);
    }

    Ok(DecodingGraph {
        nodes,
        max_command_states: command_set.max_command_states(),
        command_count: command_set.commands.len(),
        num_units: command_set.num_output_units(),
        blank_id: command_set.blank_id(),
    })
}

fn descend_to_any_final(nodes: &[GraphNode], mut node: usize) -> usize {
    loop {
        if let Some(cmd) = nodes[node].final_command {
            return cmd;
        }
        node = nodes[node].arcs[0];
    }
}

/// Structure statistics of a built graph.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct GraphStats {
    pub nodes: usize,
    pub finals: usize,
    pub max_depth: usize,
    /// 1 - nodes / (1 + Σ command state lengths): fraction of states saved
    /// by prefix sharing.
    pub sharing_ratio: f64,
}

pub fn graph_stats(graph: &DecodingGraph, command_set: &CommandSet) -> GraphStats {
    let total_states: usize = command_set.commands.iter().map(|c| c.states.len()).sum();
    let max_depth = graph.nodes.iter().map(|n| n.depth).max().unwrap_or(0);
    GraphStats {
        nodes: graph.nodes.len(),
        finals: graph.num_finals(),
        max_depth,
        sharing_ratio: 1.0 - graph.nodes.len() as f64 / (1 + total_states) as f64,
    }
}

/// All root-to-final emitting-state sequences with their command ids, in
/// lexicographic order of the state sequences.
pub fn enumerate_paths(graph: &DecodingGraph) -> Vec<(Vec<usize>, usize)> {
    let mut out = Vec::new();
    let mut stack = Vec::new();
    walk(graph, 0, &mut stack, &mut out);
    out
}

fn walk(
    graph: &DecodingGraph,
    node: usize,
    prefix: &mut Vec<usize>,
    out: &mut Vec<(Vec<usize>, usize)>,
) {
    let n = &graph.nodes[node];
    if let Some(cmd) = n.final_command {
        out.push((prefix.clone(), cmd));
    }
    for &child in &n.arcs {
        prefix.push(graph.nodes[child].emit_state);
        walk(graph, child, prefix, out);
        prefix.pop();
    }
}

/// Debug dump: `node_id emit_state [final:command_id] -> child,child,...`.
pub fn format_graph_dump(graph: &DecodingGraph) -> String {
    let mut out = String::new();
    for n in &graph.nodes {
        let state = if n.emit_state == START {
            "START".to_string()
        } else {
            n.emit_state.to_string()
        };
        let _ = write!(out, "{} {}", n.id, state);
        if let Some(cmd) = n.final_command {
            let _ = write!(out, " final:{cmd}");
        }
        let children: Vec<String> = n.arcs.iter().map(|c| c.to_string()).collect();
        let _ = writeln!(out, " -> {}", children.join(","));
    }
    out
}
