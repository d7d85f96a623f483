//! Streaming one-pass token-passing Viterbi search over a [`DecodingGraph`]
//! with beam pruning and average-score trigger thresholding.
//!
//! Hypotheses are tokens: (graph node, accumulated log-score, fixed-length
//! output array). Each frame every token self-loops on its node's state
//! (optionally absorbing blank) and advances to each child; recombination
//! keeps the best-scoring token per node. The root acts as the background
//! model: its self-loop consumes frames at the blank score and it is never
//! pruned, so a command may start at any frame and every live token has paid
//! for the same frame span (which is what makes the relative beam
//! meaningful). The trigger averages a final token's score over the states
//! it entered. There is no backtracking: the output array is filled as
//! states are entered, and two preallocated token lists are swapped between
//! frames — steady-state decoding allocates nothing.

use crate::error::{Error, Result};
use crate::graph::DecodingGraph;
use crate::numerics::Matrix;

/// Search and trigger knobs.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct DecoderConfig {
    /// Maximum allowed gap to the frame's best accumulated score.
    pub beam: f64,
    /// Minimum average per-state log-score θ for a final to trigger.
    pub trigger_threshold: f64,
    /// Score self-loops with max(own state, blank): tolerates the peaky
    /// posteriors sequence-trained models produce.
    pub blank_absorb: bool,
    /// Hard cap on live tokens per frame.
    pub max_tokens: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            beam: 12.0,
            trigger_threshold: -1.0,
            blank_absorb: true,
            max_tokens: 2000,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beam > 0.0) {
            return Err(Error::Config(format!("beam must be > 0, got {}", self.beam)));
        }
        if self.max_tokens == 0 {
            return Err(Error::Config("max_tokens must be >= 1".into()));
        }
        Ok(())
    }
}

/// A recognized command.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct TriggerEvent {
    pub command: usize,
    /// Average per-state log-score of the winning path.
    pub score: f64,
    /// 1-based index of the frame on which the trigger fired.
    pub end_frame: usize,
    /// The recorded output array: the command's emission states in order.
    pub states_path: Vec<usize>,
}

#[derive(Debug, Clone, Copy)]
struct Token {
    node: u32,
    depth: u32,
    /// Sum of per-frame log-scores along the best path into this node,
    /// including any background (root self-loop) frames before entry.
    acc: f64,
}

/// Fixed-capacity token storage with one output-label row per slot.
struct TokenList {
    tokens: Vec<Token>,
    outputs: Vec<u32>,
    width: usize,
}

impl TokenList {
    fn with_capacity(capacity: usize, width: usize) -> TokenList {
        TokenList {
            tokens: Vec::with_capacity(capacity),
            outputs: vec![0; capacity * width.max(1)],
            width: width.max(1),
        }
    }

    #[inline]
    fn row(&self, i: usize) -> &[u32] {
        &self.outputs[i * self.width..(i + 1) * self.width]
    }

    fn clear(&mut self) {
        self.tokens.clear();
    }
}

/// One decoding stream over a shared graph.
pub struct DecoderState<'g> {
    graph: &'g DecodingGraph,
    config: DecoderConfig,
    cur: TokenList,
    next: TokenList,
    /// Per-node slot in `next` (+1; 0 = empty). Reset each frame.
    node_best: Vec<u32>,
    /// Scratch for top-k selection.
    order: Vec<u32>,
    frames: usize,
}

/// Creates a decoder with a single root token. All buffers are sized here;
/// stepping never allocates.
pub fn decoder_new<'g>(graph: &'g DecodingGraph, config: DecoderConfig) -> Result<DecoderState<'g>> {
    config.validate()?;
    let capacity = graph.nodes.len();
    let width = graph.max_command_states;
    let mut state = DecoderState {
        graph,
        config,
        cur: TokenList::with_capacity(capacity, width),
        next: TokenList::with_capacity(capacity, width),
        node_best: vec![0; capacity],
        order: Vec::with_capacity(capacity),
        frames: 0,
    };
    state.reset();
    Ok(state)
}

impl<'g> DecoderState<'g> {
    /// Returns to the fresh post-construction state.
    pub fn reset(&mut self) {
        self.frames = 0;
        self.reseed_root();
    }

    fn reseed_root(&mut self) {
        self.cur.clear();
        self.next.clear();
        self.cur.tokens.push(Token {
            node: 0,
            depth: 0,
            acc: 0.0,
        });
    }

    pub fn num_tokens(&self) -> usize {
        self.cur.tokens.len()
    }

    pub fn frames_processed(&self) -> usize {
        self.frames
    }

    /// Best (command, average per-state score) among tokens currently on
    /// final nodes, ignoring the trigger threshold. Ties go to the smaller
    /// command id.
    pub fn best_final(&self) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for tok in &self.cur.tokens {
            let node = &self.graph.nodes[tok.node as usize];
            if let Some(cmd) = node.final_command {
                let avg = tok.acc / tok.depth as f64;
                let better = match best {
                    None => true,
                    Some((bc, bs)) => avg > bs || (avg == bs && cmd < bc),
                };
                if better {
                    best = Some((cmd, avg));
                }
            }
        }
        best
    }

    /// Consumes one frame of log-posteriors (length = output units).
    /// Returns a trigger event if a final path passed the threshold, in which
    /// case the token lists have been reset (the frame counter continues).
    pub fn decode_step(&mut self, frame: &[f64]) -> Result<Option<TriggerEvent>> {
        self.advance(frame)?;

        // Trigger: best final at or above θ, ties to the smaller command id.
        let mut fired: Option<(usize, f64, usize)> = None;
        for (i, tok) in self.cur.tokens.iter().enumerate() {
            let node = &self.graph.nodes[tok.node as usize];
            if let Some(cmd) = node.final_command {
                let avg = tok.acc / tok.depth as f64;
                if avg >= self.config.trigger_threshold {
                    let better = match fired {
                        None => true,
                        Some((bc, bs, _)) => avg > bs || (avg == bs && cmd < bc),
                    };
                    if better {
                        fired = Some((cmd, avg, i));
                    }
                }
            }
        }

        if let Some((command, score, slot)) = fired {
            let depth = self.cur.tokens[slot].depth as usize;
            let states_path: Vec<usize> =
                self.cur.row(slot)[..depth].iter().map(|&s| s as usize).collect();
            let event = TriggerEvent {
                command,
                score,
                end_frame: self.frames,
                states_path,
            };
            self.reseed_root();
            return Ok(Some(event));
        }
        Ok(None)
    }

    /// Expands, recombines and prunes one frame without evaluating the
    /// trigger rule.
    fn advance(&mut self, frame: &[f64]) -> Result<()> {
        if frame.len() != self.graph.num_units {
            return Err(Error::ShapeMismatch(format!(
                "frame has {} units, graph expects {}",
                frame.len(),
                self.graph.num_units
            )));
        }
        self.frames += 1;
        let blank_score = frame[self.graph.blank_id];

        self.next.clear();
        self.node_best.fill(0);

        // Expand: self-loop and child advances, recombining per node.
        for i in 0..self.cur.tokens.len() {
            let tok = self.cur.tokens[i];
            let node = &self.graph.nodes[tok.node as usize];

            // Self-loop: the root absorbs the frame as background at the
            // blank score; other nodes re-score their own state, or the
            // better of it and blank when absorption is on.
            let self_score = if tok.node == 0 {
                blank_score
            } else if self.config.blank_absorb {
                frame[node.emit_state].max(blank_score)
            } else {
                frame[node.emit_state]
            };
            self.push_candidate(tok.node, tok.depth, tok.acc + self_score, i, None);

            for &child_id in &node.arcs {
                let child = &self.graph.nodes[child_id];
                let emit = frame[child.emit_state];
                self.push_candidate(
                    child_id as u32,
                    tok.depth + 1,
                    tok.acc + emit,
                    i,
                    Some(child.emit_state as u32),
                );
            }
        }

        self.prune();
        std::mem::swap(&mut self.cur, &mut self.next);
        Ok(())
    }

    fn push_candidate(
        &mut self,
        node: u32,
        depth: u32,
        acc: f64,
        src_slot: usize,
        appended: Option<u32>,
    ) {
        let token = Token { node, depth, acc };
        let slot = self.node_best[node as usize];
        let target = if slot == 0 {
            let idx = self.next.tokens.len();
            self.next.tokens.push(token);
            self.node_best[node as usize] = idx as u32 + 1;
            idx
        } else {
            let idx = (slot - 1) as usize;
            // Viterbi max; ties keep the incumbent (deterministic order).
            if acc <= self.next.tokens[idx].acc {
                return;
            }
            self.next.tokens[idx] = token;
            idx
        };
        // Record the output labels: source row plus the entered state.
        let width = self.cur.width;
        let src_depth = self.cur.tokens[src_slot].depth as usize;
        let (src_rows, dst_rows) = (&self.cur.outputs, &mut self.next.outputs);
        let src = &src_rows[src_slot * width..src_slot * width + src_depth];
        let dst = &mut dst_rows[target * width..(target + 1) * width];
        dst[..src_depth].copy_from_slice(src);
        if let Some(state) = appended {
            dst[src_depth] = state;
        }
    }

    fn prune(&mut self) {
        let n = self.next.tokens.len();
        if n == 0 {
            return;
        }
        let best = self
            .next
            .tokens
            .iter()
            .map(|t| t.acc)
            .fold(f64::MIN, f64::max);
        let floor = best - self.config.beam;

        // The root (the restart hypothesis) is exempt from both prunes.
        self.order.clear();
        for (i, tok) in self.next.tokens.iter().enumerate() {
            if tok.node == 0 || tok.acc >= floor {
                self.order.push(i as u32);
            }
        }
        if self.order.len() > self.config.max_tokens {
            let tokens = &self.next.tokens;
            self.order.sort_unstable_by(|&a, &b| {
                let (ta, tb) = (&tokens[a as usize], &tokens[b as usize]);
                (tb.node == 0)
                    .cmp(&(ta.node == 0))
                    .then_with(|| tb.acc.total_cmp(&ta.acc))
                    .then_with(|| ta.node.cmp(&tb.node))
            });
            self.order.truncate(self.config.max_tokens);
            self.order.sort_unstable();
        }

        // Compact tokens and output rows to the front, in index order.
        let width = self.next.width;
        for (write, &read) in self.order.iter().enumerate() {
            let read = read as usize;
            if write != read {
                self.next.tokens[write] = self.next.tokens[read];
                let (lo, hi) = self.next.outputs.split_at_mut(read * width);
                lo[write * width..(write + 1) * width].copy_from_slice(&hi[..width]);
            }
        }
        self.next.tokens.truncate(self.order.len());
    }
}

/// Decodes a whole utterance of per-frame log-posteriors from a fresh state,
/// collecting every trigger event (the decoder resets after each).
pub fn decode_utterance(state: &mut DecoderState, log_post: &Matrix) -> Result<Vec<TriggerEvent>> {
    state.reset();
    let mut events = Vec::new();
    for t in 0..log_post.rows() {
        if let Some(event) = state.decode_step(log_post.row(t))? {
            events.push(event);
        }
    }
    Ok(events)
}

/// Forced decision over one utterance: the peak of the final-node average
/// score across all frames, with no triggering and no resets. Ties prefer
/// the earlier frame, then the smaller command id.
///
/// Because the scan is threshold-free, "would a decoder with threshold θ
/// accept this utterance" is exactly `peak >= θ`, so recorded peaks can be
/// re-thresholded into an ROC curve without re-decoding.
pub fn peak_decode(state: &mut DecoderState, log_post: &Matrix) -> Result<Option<PeakDecision>> {
    state.reset();
    let mut best: Option<PeakDecision> = None;
    for t in 0..log_post.rows() {
        state.advance(log_post.row(t))?;
        if let Some((command, score)) = state.best_final() {
            let better = match &best {
                None => true,
                Some(prev) => score > prev.score || (score == prev.score && command < prev.command),
            };
            if better {
                best = Some(PeakDecision {
                    command,
                    score,
                    frame: state.frames,
                });
            }
        }
    }
    Ok(best)
}

/// Result of [`peak_decode`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PeakDecision {
    pub command: usize,
    pub score: f64,
    /// 1-based frame index where the peak was reached.
    pub frame: usize,
}
