//! Episode-segment replay storage.
//!
//! Episodes are stored whole, in contiguous per-step arrays, with hidden
//! state snapshots at fixed segment boundaries so truncated recurrent
//! unrolls can start mid-episode. Eviction is FIFO by whole episode;
//! sampling picks uniformly among segments.

use rand::Rng;
use std::collections::VecDeque;

/// Everything one training episode recorded, step-indexed.
#[derive(Debug, Clone)]
pub struct EpisodeRecord {
    /// `[T + 1][n][obs_dim]`, including the terminal observation.
    pub obs: Vec<Vec<Vec<f64>>>,
    /// `[T][n][2]` executed (exploration-noised) actions.
    pub actions: Vec<Vec<[f64; 2]>>,
    /// `[T][n]`
    pub rewards: Vec<Vec<f64>>,
    /// `[T][n]` scheduler weights of each round.
    pub weights: Vec<Vec<f64>>,
    /// `[T][n]` utilities of each round.
    pub utilities: Vec<Vec<f64>>,
    /// `[T][n]` Gumbel noise drawn in each round (training rollouts).
    pub gumbel: Vec<Vec<f64>>,
    /// `[T][n][p]` aggregated message each agent received.
    pub agg_msgs: Vec<Vec<Vec<f64>>>,
    /// `[T][n]` bandwidth grants.
    pub budgets: Vec<Vec<usize>>,
    /// `(h, c)` per agent at the start of each segment:
    /// `[num_segments][n]`.
    pub hidden_snaps: Vec<Vec<(Vec<f64>, Vec<f64>)>>,
    pub segment_len: usize,
}

impl EpisodeRecord {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn num_segments(&self) -> usize {
        self.len().div_ceil(self.segment_len)
    }

    /// Step range `[start, end)` of a segment.
    pub fn segment_bounds(&self, segment: usize) -> (usize, usize) {
        let start = segment * self.segment_len;
        let end = (start + self.segment_len).min(self.len());
        (start, end)
    }
}

/// Ring buffer of whole episodes with a transition-count capacity.
#[derive(Debug, Default)]
pub struct ReplayBuffer {
    episodes: VecDeque<EpisodeRecord>,
    transitions: usize,
    capacity: usize,
}

/// Stable handle to one sampled segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegmentRef {
    pub episode: usize,
    pub segment: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            episodes: VecDeque::new(),
            transitions: 0,
            capacity,
        }
    }

    pub fn transitions(&self) -> usize {
        self.transitions
    }

    pub fn num_episodes(&self) -> usize {
        self.episodes.len()
    }

    pub fn episode(&self, idx: usize) -> &EpisodeRecord {
        &self.episodes[idx]
    }

    pub fn push(&mut self, episode: EpisodeRecord) {
        self.transitions += episode.len();
        self.episodes.push_back(episode);
        while self.transitions > self.capacity && self.episodes.len() > 1 {
            if let Some(old) = self.episodes.pop_front() {
                self.transitions -= old.len();
            }
        }
    }

    /// Uniform sample over all segments of all stored episodes.
    pub fn sample_segments<R: Rng>(&self, rng: &mut R, count: usize) -> Vec<SegmentRef> {
        let totals: Vec<usize> = self.episodes.iter().map(|e| e.num_segments()).collect();
        let total: usize = totals.iter().sum();
        if total == 0 {
            return Vec::new();
        }
        (0..count)
            .map(|_| {
                let mut pick = rng.gen_range(0..total);
                for (episode, &segs) in totals.iter().enumerate() {
                    if pick < segs {
                        return SegmentRef {
                            episode,
                            segment: pick,
                        };
                    }
                    pick -= segs;
                }
                unreachable!("segment index within total")
            })
            .collect()
    }
}
