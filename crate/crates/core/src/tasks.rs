//! Synthetic sequence tasks probing long-range memory.
//!
//! `copy` reproduces a prefix at marked output positions inside a single
//! segment, so any attention layer can solve it. `recall` stores key-value
//! pairs in the first segment and queries them from the last segment:
//! segment-local attention provably cannot see the keys, so only a layer
//! that carries state across segments can answer.
//!
//! Inputs are d-dimensional vectors. Dims 0 and 1 are marker channels
//! (store / query), the rest carry content embeddings drawn from a
//! per-task codebook that is fixed across instances of the same seed.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::{seeded_rng, Rng as LabRng};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    Copy,
    Recall,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Copy => "copy",
            TaskKind::Recall => "recall",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(TaskKind::Copy),
            "recall" => Ok(TaskKind::Recall),
            _ => Err(Error::config(format!("unknown task '{s}'"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub t: usize,
    pub d: usize,
    /// Stored key-value pairs (recall) or prefix length (copy).
    pub n_pairs: usize,
    /// Value alphabet size for recall; chance accuracy is its reciprocal.
    pub n_values: usize,
    /// Queries per recall instance.
    pub n_queries: usize,
    /// Segment lengths; they must tile [0, t).
    pub segment_layout: Vec<usize>,
    pub seed: u64,
}

impl TaskSpec {
    pub fn copy(prefix: usize, d: usize, seed: u64) -> Self {
        let t = 2 * prefix + 1;
        TaskSpec {
            kind: TaskKind::Copy,
            t,
            d,
            n_pairs: prefix,
            n_values: 0,
            n_queries: prefix,
            segment_layout: vec![t],
            seed,
        }
    }

    pub fn recall(t: usize, d: usize, n_pairs: usize, n_values: usize, n_queries: usize, segment_layout: Vec<usize>, seed: u64) -> Self {
        TaskSpec { kind: TaskKind::Recall, t, d, n_pairs, n_values, n_queries, segment_layout, seed }
    }

    pub fn segments(&self) -> Vec<std::ops::Range<usize>> {
        let mut out = Vec::with_capacity(self.segment_layout.len());
        let mut start = 0;
        for &len in &self.segment_layout {
            out.push(start..start + len);
            start += len;
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.d < 4 {
            return Err(Error::config("tasks need d >= 4 (2 marker dims + content)"));
        }
        let total: usize = self.segment_layout.iter().sum();
        if total != self.t || self.segment_layout.iter().any(|&l| l == 0) {
            return Err(Error::config(format!(
                "segment layout {:?} does not tile T={}",
                self.segment_layout, self.t
            )));
        }
        match self.kind {
            TaskKind::Copy => {
                if self.t < 2 * self.n_pairs + 1 {
                    return Err(Error::config(format!(
                        "layout overflow: copy needs T >= 2*prefix+1, got T={} prefix={}",
                        self.t, self.n_pairs
                    )));
                }
            }
            TaskKind::Recall => {
                if self.segment_layout.len() < 2 {
                    return Err(Error::config("recall needs at least two segments"));
                }
                if self.segment_layout[0] < self.n_pairs {
                    return Err(Error::config(format!(
                        "layout overflow: first segment holds {} tokens but {} pairs requested",
                        self.segment_layout[0], self.n_pairs
                    )));
                }
                if *self.segment_layout.last().unwrap() < self.n_queries {
                    return Err(Error::config(format!(
                        "layout overflow: last segment holds {} tokens but {} queries requested",
                        self.segment_layout.last().unwrap(),
                        self.n_queries
                    )));
                }
                if self.n_values < 2 {
                    return Err(Error::config("recall needs n_values >= 2"));
                }
                if self.n_queries < 1 || self.n_queries > self.n_pairs {
                    return Err(Error::config("need 1 <= n_queries <= n_pairs"));
                }
            }
        }
        Ok(())
    }

    pub fn chance_accuracy(&self) -> f64 {
        match self.kind {
            TaskKind::Copy => 1.0 / self.n_pairs.max(1) as f64,
            TaskKind::Recall => 1.0 / self.n_values as f64,
        }
    }
}

/// Per-task embeddings, fixed across instances so models can learn them.
#[derive(Clone, Debug)]
pub struct Codebook {
    /// Unit-norm content rows of width d-2.
    pub keys: Vec<Vec<f64>>,
    pub values: Vec<Vec<f64>>,
}

fn unit_row(width: usize, rng: &mut impl Rng) -> Vec<f64> {
    let t = Tensor::randn(&[width], 1.0, rng);
    let norm = t.data().iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-9);
    t.data().iter().map(|v| v / norm).collect()
}

impl Codebook {
    pub fn build(spec: &TaskSpec) -> Self {
        // codebook stream is separated from instance streams
        let mut rng = seeded_rng(spec.seed ^ 0x5eed_c0de);
        let content = spec.d - 2;
        let n_keys = match spec.kind {
            TaskKind::Copy => spec.n_pairs,
            TaskKind::Recall => (spec.n_pairs * 2).max(spec.n_values),
        };
        Codebook {
            keys: (0..n_keys).map(|_| unit_row(content, &mut rng)).collect(),
            values: (0..spec.n_values.max(1)).map(|_| unit_row(content, &mut rng)).collect(),
        }
    }
}

/// One generated sequence with its supervision targets.
#[derive(Clone, Debug)]
pub struct TaskInstance {
    pub x: Tensor,
    pub target: Tensor,
    /// Positions where the loss and metric are evaluated.
    pub loss_mask: Vec<bool>,
    /// (position, class index) ground truth at masked positions.
    pub answers: Vec<(usize, usize)>,
}

impl TaskInstance {
    pub fn masked_count(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }

    /// 0/1-mask as a [T, d] tensor for building masked losses.
    pub fn mask_tensor(&self, d: usize) -> Tensor {
        let t = self.loss_mask.len();
        let mut m = Tensor::zeros(&[t, d]);
        for (i, &on) in self.loss_mask.iter().enumerate() {
            if on {
                for j in 0..d {
                    m.data_mut()[i * d + j] = 1.0;
                }
            }
        }
        m
    }
}

/// A dataset: its spec, codebook, and instance generator.
pub struct Task {
    pub spec: TaskSpec,
    pub codebook: Codebook,
}

impl Task {
    pub fn new(spec: TaskSpec) -> Result<Self> {
        spec.validate()?;
        let codebook = Codebook::build(&spec);
        Ok(Task { spec, codebook })
    }

    /// Deterministic instance stream: instance `i` of seed `s` is identical
    /// across runs.
    pub fn instance(&self, index: u64) -> TaskInstance {
        let mut rng = seeded_rng(self.spec.seed.wrapping_mul(0x9e37_79b9).wrapping_add(index));
        match self.spec.kind {
            TaskKind::Copy => self.gen_copy(&mut rng),
            TaskKind::Recall => self.gen_recall(&mut rng),
        }
    }

    pub fn batch(&self, start: u64, n: usize) -> Vec<TaskInstance> {
        (0..n as u64).map(|i| self.instance(start + i)).collect()
    }

    fn content_dims(&self) -> usize {
        self.spec.d - 2
    }

    fn write_content(x: &mut Tensor, pos: usize, d: usize, content: &[f64]) {
        for (j, &v) in content.iter().enumerate() {
            x.data_mut()[pos * d + 2 + j] += v;
        }
    }

    /// Copy: prefix tokens carry position-keyed content; each output slot
    /// carries the position key of the token it must reproduce.
    fn gen_copy(&self, rng: &mut LabRng) -> TaskInstance {
        let spec = &self.spec;
        let (t, d, p) = (spec.t, spec.d, spec.n_pairs);
        let cd = self.content_dims();
        let mut x = Tensor::zeros(&[t, d]);
        let mut target = Tensor::zeros(&[t, d]);
        let mut loss_mask = vec![false; t];
        let mut answers = Vec::with_capacity(p);

        // fresh content per instance; position keys from the fixed codebook
        let contents: Vec<Vec<f64>> = (0..p).map(|_| unit_row(cd, rng)).collect();
        for i in 0..p {
            x.data_mut()[i * d] = 1.0; // store marker
            Self::write_content(&mut x, i, d, &self.codebook.keys[i]);
            Self::write_content(&mut x, i, d, &contents[i]);
        }
        // delimiter token: both markers on
        x.data_mut()[p * d] = 1.0;
        x.data_mut()[p * d + 1] = 1.0;
        for i in 0..p {
            let pos = p + 1 + i;
            x.data_mut()[pos * d + 1] = 1.0; // query marker
            Self::write_content(&mut x, pos, d, &self.codebook.keys[i]);
            Self::write_content(&mut target, pos, d, &contents[i]);
            loss_mask[pos] = true;
            answers.push((pos, i));
        }
        TaskInstance { x, target, loss_mask, answers }
    }

    /// Recall: pairs in segment one, queries in the final segment, filler
    /// noise elsewhere.
    fn gen_recall(&self, rng: &mut LabRng) -> TaskInstance {
        let spec = &self.spec;
        let (t, d) = (spec.t, spec.d);
        let cd = self.content_dims();
        let segments = spec.segments();
        let first = segments.first().unwrap().clone();
        let last = segments.last().unwrap().clone();

        let mut x = Tensor::zeros(&[t, d]);
        let mut target = Tensor::zeros(&[t, d]);
        let mut loss_mask = vec![false; t];
        let mut answers = Vec::with_capacity(spec.n_queries);

        // choose distinct keys and a value class per pair
        let mut key_ids: Vec<usize> = (0..self.codebook.keys.len()).collect();
        key_ids.shuffle(rng);
        key_ids.truncate(spec.n_pairs);
        let classes: Vec<usize> =
            (0..spec.n_pairs).map(|_| rng.gen_range(0..spec.n_values)).collect();

        for (i, (&kid, &cls)) in key_ids.iter().zip(&classes).enumerate() {
            let pos = first.start + i;
            x.data_mut()[pos * d] = 1.0;
            Self::write_content(&mut x, pos, d, &self.codebook.keys[kid]);
            Self::write_content(&mut x, pos, d, &self.codebook.values[cls]);
        }
        // unused slots of the first segment and all middle segments: filler
        for pos in (first.start + spec.n_pairs)..first.end {
            Self::write_content(&mut x, pos, d, &unit_row(cd, rng).iter().map(|v| v * 0.1).collect::<Vec<_>>());
        }
        for seg in &segments[1..segments.len() - 1] {
            for pos in seg.clone() {
                Self::write_content(&mut x, pos, d, &unit_row(cd, rng).iter().map(|v| v * 0.1).collect::<Vec<_>>());
            }
        }

        // queries over a subset of the stored pairs
        let mut order: Vec<usize> = (0..spec.n_pairs).collect();
        order.shuffle(rng);
        for (q, &pair_idx) in order.iter().take(spec.n_queries).enumerate() {
            let pos = last.start + q;
            x.data_mut()[pos * d + 1] = 1.0;
            Self::write_content(&mut x, pos, d, &self.codebook.keys[key_ids[pair_idx]]);
            let cls = classes[pair_idx];
            Self::write_content(&mut target, pos, d, &self.codebook.values[cls]);
            loss_mask[pos] = true;
            answers.push((pos, cls));
        }
        TaskInstance { x, target, loss_mask, answers }
    }

    /// Nearest-codebook classification of model outputs at the masked
    /// positions; returns (correct, total).
    pub fn score(&self, outputs: &Tensor, instance: &TaskInstance) -> (usize, usize) {
        let mut correct = 0;
        for &(pos, cls) in &instance.answers {
            let row = &outputs.row(pos)[2..];
            let pred = match self.spec.kind {
                TaskKind::Recall => nearest(row, &self.codebook.values),
                TaskKind::Copy => {
                    // copy scores against the instance's own contents
                    let contents: Vec<Vec<f64>> = instance
                        .answers
                        .iter()
                        .map(|&(p, _)| instance.target.row(p)[2..].to_vec())
                        .collect();
                    nearest(row, &contents)
                }
            };
            if pred == cls {
                correct += 1;
            }
        }
        (correct, instance.answers.len())
    }

    /// Storage/query placement statistics for enumeration checks:
    /// (pair positions, query positions, token distance per query).
    pub fn stats(&self, instance: &TaskInstance) -> TaskStats {
        let t = self.spec.t;
        let stores: Vec<usize> =
            (0..t).filter(|&p| instance.x.at2(p, 0) == 1.0 && instance.x.at2(p, 1) == 0.0).collect();
        let queries: Vec<usize> = (0..t).filter(|&p| instance.loss_mask[p]).collect();
        let min_distance = queries
            .iter()
            .flat_map(|&q| stores.iter().map(move |&s| q.abs_diff(s)))
            .min()
            .unwrap_or(0);
        TaskStats { n_stored: stores.len(), n_queries: queries.len(), min_distance }
    }
}

fn nearest(row: &[f64], codebook: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_dot = f64::NEG_INFINITY;
    for (i, v) in codebook.iter().enumerate() {
        let dot: f64 = row.iter().zip(v).map(|(a, b)| a * b).sum();
        if dot > best_dot {
            best_dot = dot;
            best = i;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TaskStats {
    pub n_stored: usize,
    pub n_queries: usize,
    pub min_distance: usize,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn copy_reproduces_prefix_verbatim() {
        let spec = TaskSpec::copy(5, 8, 42);
        assert_eq!(spec.t, 11);
        let task = Task::new(spec).unwrap();
        let inst = task.instance(0);
        // target at output slot i equals the content stored at prefix slot i
        for i in 0..5 {
            let src = &inst.x.row(i)[2..];
            let key = &task.codebook.keys[i];
            let content: Vec<f64> = src.iter().zip(key).map(|(s, k)| s - k).collect();
            let out = &inst.target.row(5 + 1 + i)[2..];
            let diff = content
                .iter()
                .zip(out)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(diff < 1e-12, "slot {i}");
        }
        assert_eq!(inst.masked_count(), 5);
    }

    #[test]
    fn recall_single_pair_targets_its_value() {
        let spec = TaskSpec::recall(8, 8, 1, 4, 1, vec![4, 4], 7);
        let task = Task::new(spec).unwrap();
        let inst = task.instance(3);
        assert_eq!(inst.answers.len(), 1);
        let (pos, cls) = inst.answers[0];
        assert!(pos >= 4, "query sits in the last segment");
        let want = &task.codebook.values[cls];
        let got = &inst.target.row(pos)[2..];
        for (a, b) in want.iter().zip(got) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        let spec = TaskSpec::recall(16, 8, 4, 4, 3, vec![8, 8], 99);
        let t1 = Task::new(spec.clone()).unwrap();
        let t2 = Task::new(spec).unwrap();
        for i in 0..5 {
            let a = t1.instance(i);
            let b = t2.instance(i);
            assert!(a.x.bit_equal(&b.x));
            assert!(a.target.bit_equal(&b.target));
            assert_eq!(a.answers, b.answers);
        }
    }

    #[test]
    fn placement_statistics_enumerate_exactly() {
        let spec = TaskSpec::recall(32, 8, 6, 4, 4, vec![10, 12, 10], 5);
        let task = Task::new(spec).unwrap();
        for i in 0..10 {
            let inst = task.instance(i);
            let stats = task.stats(&inst);
            assert_eq!(stats, TaskStats { n_stored: 6, n_queries: 4, min_distance: stats.min_distance });
            // pairs all in segment one, queries all in the last segment
            for &(pos, _) in &inst.answers {
                assert!(pos >= 22);
            }
            // min distance: query slots start at 22, last store slot is 5
            assert!(stats.min_distance >= 22 - 5);
        }
    }

    #[test]
    fn memorizing_oracle_scores_one() {
        let spec = TaskSpec::recall(16, 8, 4, 4, 3, vec![8, 8], 11);
        let task = Task::new(spec).unwrap();
        for i in 0..5 {
            let inst = task.instance(i);
            let (correct, total) = task.score(&inst.target, &inst);
            assert_eq!((correct, total), (3, 3), "target itself must score 1.0");
        }
    }

    #[test]
    fn layout_overflow_is_an_error() {
        assert!(Task::new(TaskSpec::recall(8, 8, 6, 4, 1, vec![4, 4], 0)).is_err());
        assert!(Task::new(TaskSpec::recall(8, 8, 2, 4, 3, vec![6, 2], 0)).is_err());
        let mut bad = TaskSpec::copy(4, 8, 0);
        bad.t = 6; // too short for 2*4+1
        bad.segment_layout = vec![6];
        assert!(Task::new(bad).is_err());
    }
}
