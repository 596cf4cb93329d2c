//! Leakage-model labeling, guessing entropy, convergence detection, and the
//! GE-based early-stopping policy.

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::forge::TraceSet;
use crate::network::TruncatedModel;
use crate::ops::PROB_FLOOR;
use crate::rng;
use crate::tensor::Tensor;

/// AES forward S-box.
#[rustfmt::skip]
const SBOX: [u8; 256] = [
    0x63, 0x7c, 0x77, 0x7b, 0xf2, 0x6b, 0x6f, 0xc5, 0x30, 0x01, 0x67, 0x2b, 0xfe, 0xd7, 0xab, 0x76,
    0xca, 0x82, 0xc9, 0x7d, 0xfa, 0x59, 0x47, 0xf0, 0xad, 0xd4, 0xa2, 0xaf, 0x9c, 0xa4, 0x72, 0xc0,
    0xb7, 0xfd, 0x93, 0x26, 0x36, 0x3f, 0xf7, 0xcc, 0x34, 0xa5, 0xe5, 0xf1, 0x71, 0xd8, 0x31, 0x15,
    0x04, 0xc7, 0x23, 0xc3, 0x18, 0x96, 0x05, 0x9a, 0x07, 0x12, 0x80, 0xe2, 0xeb, 0x27, 0xb2, 0x75,
    0x09, 0x83, 0x2c, 0x1a, 0x1b, 0x6e, 0x5a, 0xa0, 0x52, 0x3b, 0xd6, 0xb3, 0x29, 0xe3, 0x2f, 0x84,
    0x53, 0xd1, 0x00, 0xed, 0x20, 0xfc, 0xb1, 0x5b, 0x6a, 0xcb, 0xbe, 0x39, 0x4a, 0x4c, 0x58, 0xcf,
    0xd0, 0xef, 0xaa, 0xfb, 0x43, 0x4d, 0x33, 0x85, 0x45, 0xf9, 0x02, 0x7f, 0x50, 0x3c, 0x9f, 0xa8,
    0x51, 0xa3, 0x40, 0x8f, 0x92, 0x9d, 0x38, 0xf5, 0xbc, 0xb6, 0xda, 0x21, 0x10, 0xff, 0xf3, 0xd2,
    0xcd, 0x0c, 0x13, 0xec, 0x5f, 0x97, 0x44, 0x17, 0xc4, 0xa7, 0x7e, 0x3d, 0x64, 0x5d, 0x19, 0x73,
    0x60, 0x81, 0x4f, 0xdc, 0x22, 0x2a, 0x90, 0x88, 0x46, 0xee, 0xb8, 0x14, 0xde, 0x5e, 0x0b, 0xdb,
    0xe0, 0x32, 0x3a, 0x0a, 0x49, 0x06, 0x24, 0x5c, 0xc2, 0xd3, 0xac, 0x62, 0x91, 0x95, 0xe4, 0x79,
    0xe7, 0xc8, 0x37, 0x6d, 0x8d, 0xd5, 0x4e, 0xa9, 0x6c, 0x56, 0xf4, 0xea, 0x65, 0x7a, 0xae, 0x08,
    0xba, 0x78, 0x25, 0x2e, 0x1c, 0xa6, 0xb4, 0xc6, 0xe8, 0xdd, 0x74, 0x1f, 0x4b, 0xbd, 0x8b, 0x8a,
    0x70, 0x3e, 0xb5, 0x66, 0x48, 0x03, 0xf6, 0x0e, 0x61, 0x35, 0x57, 0xb9, 0x86, 0xc1, 0x1d, 0x9e,
    0xe1, 0xf8, 0x98, 0x11, 0x69, 0xd9, 0x8e, 0x94, 0x9b, 0x1e, 0x87, 0xe9, 0xce, 0x55, 0x28, 0xdf,
    0x8c, 0xa1, 0x89, 0x0d, 0xbf, 0xe6, 0x42, 0x68, 0x41, 0x99, 0x2d, 0x0f, 0xb0, 0x54, 0xbb, 0x16,
];

pub fn sbox(x: u8) -> u8 {
    SBOX[x as usize]
}

/// Maps a plaintext byte and a key candidate to the class a classifier is
/// trained to predict. Implementations with many-to-one labels (Hamming
/// weight) produce rank ties; the stable tie-break below resolves them.
pub trait Labeler: Sync {
    fn n_candidates(&self) -> usize;
    fn n_classes(&self) -> usize;
    fn label(&self, plaintext: u8, candidate: usize) -> usize;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    /// Class = `Sbox(p XOR k)`, 256 classes.
    SboxIdentity,
    /// Class = `HW(Sbox(p XOR k))`, 9 classes.
    SboxHammingWeight,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LeakageModel {
    pub kind: ModelKind,
    /// Which key byte of the full key this model targets; metadata carried
    /// through reports.
    pub target_byte: usize,
}

impl LeakageModel {
    pub fn identity(target_byte: usize) -> Self {
        LeakageModel {
            kind: ModelKind::SboxIdentity,
            target_byte,
        }
    }

    pub fn hamming_weight(target_byte: usize) -> Self {
        LeakageModel {
            kind: ModelKind::SboxHammingWeight,
            target_byte,
        }
    }
}

impl Labeler for LeakageModel {
    fn n_candidates(&self) -> usize {
        256
    }

    fn n_classes(&self) -> usize {
        match self.kind {
            ModelKind::SboxIdentity => 256,
            ModelKind::SboxHammingWeight => 9,
        }
    }

    fn label(&self, plaintext: u8, candidate: usize) -> usize {
        let v = sbox(plaintext ^ candidate as u8);
        match self.kind {
            ModelKind::SboxIdentity => v as usize,
            ModelKind::SboxHammingWeight => u32::from(v).count_ones() as usize,
        }
    }
}

/// Accumulated log-likelihood per key candidate over a set of traces:
/// `sum_i log P_i[label(p_i, k)]`, probabilities clamped at `1e-12`.
pub fn guessing_vector(
    probs: &Tensor,
    plaintexts: &[u8],
    labeler: &dyn Labeler,
) -> Result<Vec<f64>> {
    let (n, k) = prob_shape(probs, labeler)?;
    if plaintexts.len() != n {
        return Err(Error::dimension(format!(
            "{} plaintexts for {n} probability vectors",
            plaintexts.len()
        )));
    }
    let mut ll = vec![0.0f64; labeler.n_candidates()];
    for (i, &p) in plaintexts.iter().enumerate() {
        add_trace(&mut ll, probs, k, i, p, labeler);
    }
    Ok(ll)
}

/// Rank of `candidate` in the descending-sorted guessing vector, ties
/// broken by ascending candidate value (stable). Rank 0 = most likely.
pub fn rank_of(ll: &[f64], candidate: usize) -> usize {
    let target = ll[candidate];
    let mut rank = 0;
    for (k, &v) in ll.iter().enumerate() {
        if v > target || (v == target && k < candidate) {
            rank += 1;
        }
    }
    rank
}

/// Guessing-entropy curve: mean rank of the true key after 1..=n attack
/// traces, averaged over shuffled experiments.
#[derive(Clone, Debug)]
pub struct GeVector {
    /// `ranks[t - 1]` is the mean rank after `t` traces, in `[0, K-1]`.
    pub ranks: Vec<f64>,
    pub n_experiments: usize,
}

impl GeVector {
    pub fn n_traces(&self) -> usize {
        self.ranks.len()
    }

    pub fn final_rank(&self) -> f64 {
        *self.ranks.last().expect("never empty")
    }

    /// `traces,mean_rank` CSV rows.
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "traces,mean_rank")?;
        for (i, r) in self.ranks.iter().enumerate() {
            writeln!(w, "{},{}", i + 1, r)?;
        }
        Ok(())
    }
}

/// Trace order of experiment `exp` under `seed`: a seeded permutation of
/// `0..n`, one independent draw per experiment. Exposed so oracles can
/// replay the exact shuffles.
pub fn experiment_order(seed: u64, exp: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::child(seed, exp as u64));
    order
}

/// Integer rank of the true key after each prefix of one experiment's
/// shuffled trace order.
pub fn experiment_ranks(
    probs: &Tensor,
    plaintexts: &[u8],
    true_key: usize,
    labeler: &dyn Labeler,
    order: &[usize],
) -> Vec<usize> {
    let k = labeler.n_classes();
    let mut ll = vec![0.0f64; labeler.n_candidates()];
    let mut ranks = Vec::with_capacity(order.len());
    for &idx in order {
        add_trace(&mut ll, probs, k, idx, plaintexts[idx], labeler);
        ranks.push(rank_of(&ll, true_key));
    }
    ranks
}

/// Guessing entropy over `n_experiments` independent shuffles of the attack
/// order. Experiments run in parallel and are reduced in index order, so the
/// result does not depend on scheduling.
pub fn guessing_entropy(
    probs: &Tensor,
    plaintexts: &[u8],
    true_key: usize,
    labeler: &dyn Labeler,
    n_experiments: usize,
    seed: u64,
) -> Result<GeVector> {
    let (n, _) = prob_shape(probs, labeler)?;
    if n == 0 || plaintexts.is_empty() {
        return Err(Error::Data("guessing entropy needs a non-empty attack set".to_string()));
    }
    if plaintexts.len() != n {
        return Err(Error::dimension(format!(
            "{} plaintexts for {n} probability vectors",
            plaintexts.len()
        )));
    }
    if n_experiments == 0 {
        return Err(Error::Data("need at least one experiment".to_string()));
    }
    if true_key >= labeler.n_candidates() {
        return Err(Error::domain(format!(
            "true key {true_key} outside the {}-candidate keyspace",
            labeler.n_candidates()
        )));
    }

    let per_exp: Vec<Vec<usize>> = (0..n_experiments)
        .into_par_iter()
        .map(|e| {
            let order = experiment_order(seed, e, n);
            experiment_ranks(probs, plaintexts, true_key, labeler, &order)
        })
        .collect();

    let mut ranks = vec![0.0f64; n];
    for exp in &per_exp {
        for (acc, &r) in ranks.iter_mut().zip(exp) {
            *acc += r as f64;
        }
    }
    for r in &mut ranks {
        *r /= n_experiments as f64;
    }
    Ok(GeVector {
        ranks,
        n_experiments,
    })
}

/// Smallest trace count `t` (1-based) such that every entry from `t` on
/// stays at or below `rank_threshold` and the converged span covers at
/// least `persistence_fraction` of the curve. `None` when the curve never
/// settles.
pub fn converged_at(ge: &GeVector, rank_threshold: f64, persistence_fraction: f64) -> Option<usize> {
    debug_assert!(persistence_fraction > 0.0 && persistence_fraction <= 1.0);
    let n = ge.ranks.len();
    let mut start = None;
    for t in (0..n).rev() {
        if ge.ranks[t] <= rank_threshold {
            start = Some(t + 1);
        } else {
            break;
        }
    }
    let t = start?;
    if (n - t + 1) as f64 / n as f64 >= persistence_fraction {
        Some(t)
    } else {
        None
    }
}

/// Convergence policy for GE-based early stopping.
#[derive(Clone, Copy, Debug)]
pub struct StopPolicy {
    pub rank_threshold: f64,
    pub persistence_fraction: f64,
    /// Epochs without improving the convergence trace count before stopping.
    /// Zero stops at the first convergent epoch.
    pub patience_epochs: usize,
}

impl Default for StopPolicy {
    fn default() -> Self {
        StopPolicy {
            rank_threshold: 0.5,
            persistence_fraction: 0.5,
            patience_epochs: 10,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct StopDecision {
    pub converged_at: Option<usize>,
    pub stop: bool,
}

/// Tracks convergence across epochs, evaluating only the truncated model.
pub struct GeStopper {
    pub policy: StopPolicy,
    pub n_experiments: usize,
    seed: u64,
    best_traces: Option<usize>,
    best_epoch: Option<usize>,
    epochs_since_improvement: usize,
}

impl GeStopper {
    pub fn new(policy: StopPolicy, n_experiments: usize, seed: u64) -> Self {
        GeStopper {
            policy,
            n_experiments,
            seed,
            best_traces: None,
            best_epoch: None,
            epochs_since_improvement: 0,
        }
    }

    /// Epoch of the best (smallest) convergence trace count seen so far.
    pub fn best_epoch(&self) -> Option<usize> {
        self.best_epoch
    }

    pub fn best_traces(&self) -> Option<usize> {
        self.best_traces
    }

    /// Runs the validation attack through the truncated model and updates
    /// the stopping state. Call once per epoch.
    pub fn observe(
        &mut self,
        epoch: usize,
        truncated: &TruncatedModel<'_>,
        validation: &TraceSet,
        model: &LeakageModel,
    ) -> Result<(GeVector, StopDecision)> {
        let key = validation.key.ok_or_else(|| {
            Error::Data("validation set has no key; cannot compute guessing entropy".to_string())
        })?;
        let probs = predict_in_chunks(truncated, validation)?;
        let ge = guessing_entropy(
            &probs,
            &validation.plaintexts,
            key as usize,
            model,
            self.n_experiments,
            rng::derive_seed(self.seed, epoch as u64),
        )?;
        let decision = self.update(epoch, &ge);
        Ok((ge, decision))
    }

    /// State update given an already-computed GE curve.
    pub fn update(&mut self, epoch: usize, ge: &GeVector) -> StopDecision {
        let conv = converged_at(ge, self.policy.rank_threshold, self.policy.persistence_fraction);
        match conv {
            Some(t) if self.best_traces.map_or(true, |best| t < best) => {
                self.best_traces = Some(t);
                self.best_epoch = Some(epoch);
                self.epochs_since_improvement = 0;
            }
            _ => {
                if self.best_traces.is_some() {
                    self.epochs_since_improvement += 1;
                }
            }
        }
        let stop = self.best_traces.is_some()
            && conv.is_some()
            && self.epochs_since_improvement >= self.policy.patience_epochs;
        StopDecision {
            converged_at: conv,
            stop,
        }
    }
}

/// Truncated-model inference over a whole trace set, parallel over row
/// chunks; rows land at their trace index regardless of scheduling.
pub fn predict_in_chunks(truncated: &TruncatedModel<'_>, set: &TraceSet) -> Result<Tensor> {
    const CHUNK: usize = 64;
    let indices: Vec<usize> = (0..set.n_traces).collect();
    let chunks: Vec<Result<Tensor>> = indices
        .par_chunks(CHUNK)
        .map(|chunk| truncated.predict(&set.batch(chunk)))
        .collect();
    let classes = truncated.classifier.output_len;
    let mut data = Vec::with_capacity(set.n_traces * classes);
    for c in chunks {
        data.extend_from_slice(c?.data());
    }
    Tensor::new(vec![set.n_traces, classes], data)
}

fn add_trace(
    ll: &mut [f64],
    probs: &Tensor,
    n_classes: usize,
    trace_idx: usize,
    plaintext: u8,
    labeler: &dyn Labeler,
) {
    let row = &probs.data()[trace_idx * n_classes..(trace_idx + 1) * n_classes];
    for (k, acc) in ll.iter_mut().enumerate() {
        *acc += row[labeler.label(plaintext, k)].max(PROB_FLOOR).ln();
    }
}

fn prob_shape(probs: &Tensor, labeler: &dyn Labeler) -> Result<(usize, usize)> {
    match *probs.shape() {
        [n, k] if k == labeler.n_classes() => Ok((n, k)),
        [_, k] => Err(Error::dimension(format!(
            "probability vectors have {k} classes, model expects {}",
            labeler.n_classes()
        ))),
        _ => Err(Error::dimension(format!(
            "expected (n_traces, n_classes) probabilities, got {:?}",
            probs.shape()
        ))),
    }
}
