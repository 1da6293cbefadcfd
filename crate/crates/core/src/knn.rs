//! Exact and out-of-core K-nearest-neighbor targets under the Euclidean metric.

use rand::seq::index;
use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng;

/// One neighbor of a query: source row, its label and Euclidean distance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Candidate {
    pub index: usize,
    pub label: usize,
    pub distance: f64,
}

impl Candidate {
    fn before(&self, other: &Candidate) -> bool {
        self.distance < other.distance
            || (self.distance == other.distance && self.index < other.index)
    }
}

/// Squared Euclidean distance with a fixed summation order.
pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            let d = x[l] - y[l];
            acc[l] += d * d;
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += (x - y) * (x - y);
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Bounded ascending list of the best `k` candidates seen so far.
struct TopK {
    k: usize,
    items: Vec<Candidate>,
    bound_sq: f64,
}

impl TopK {
    fn new(k: usize) -> Self {
        TopK {
            k,
            items: Vec::with_capacity(k + 1),
            bound_sq: f64::INFINITY,
        }
    }

    #[inline]
    fn offer_sq(&mut self, index: usize, label: usize, sq: f64) {
        if sq > self.bound_sq * (1.0 + 1e-12) {
            return;
        }
        self.offer(Candidate {
            index,
            label,
            distance: sq.sqrt(),
        });
    }

    fn offer(&mut self, c: Candidate) {
        if self.items.len() == self.k && !c.before(&self.items[self.k - 1]) {
            return;
        }
        if self.items.iter().any(|x| x.index == c.index) {
            return;
        }
        let pos = self.items.iter().position(|x| c.before(x)).unwrap_or(self.items.len());
        self.items.insert(pos, c);
        if self.items.len() > self.k {
            self.items.pop();
        }
        if self.items.len() == self.k {
            let d = self.items[self.k - 1].distance;
            self.bound_sq = d * d;
        }
    }
}

fn available(reference: &Dataset, exclude: Option<usize>) -> usize {
    reference.len() - usize::from(exclude.is_some_and(|e| e < reference.len()))
}

/// The `k` nearest rows of `reference` to `query`, ascending by distance,
/// ties by smaller index, never returning `exclude`.
pub fn query_neighbors(
    reference: &Dataset,
    query: &[f64],
    k: usize,
    exclude: Option<usize>,
) -> Result<Vec<Candidate>> {
    if query.len() != reference.dim() {
        return Err(Error::dim("query_neighbors", &[reference.dim()], &[query.len()]));
    }
    let avail = available(reference, exclude);
    if k == 0 || avail < k {
        return Err(Error::InsufficientCandidates {
            required: k.max(1),
            available: avail,
        });
    }
    let mut top = TopK::new(k);
    for j in 0..reference.len() {
        if Some(j) != exclude {
            top.offer_sq(j, reference.label(j), squared_distance(query, reference.row(j)));
        }
    }
    Ok(top.items)
}

/// Ordered neighbor targets of every training sample.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborTargets {
    k: usize,
    dim: usize,
    labels: Vec<usize>,
    vectors: Vec<f64>,
    distances: Vec<f64>,
    indices: Option<Vec<usize>>,
}

impl NeighborTargets {
    /// Builds targets from per-sample ordered candidate lists.
    pub fn from_candidates(train: &Dataset, k: usize, lists: &[Vec<Candidate>]) -> Result<Self> {
        let n = lists.len();
        let d = train.dim();
        let mut labels = Vec::with_capacity(n * k);
        let mut vectors = Vec::with_capacity(n * k * d);
        let mut distances = Vec::with_capacity(n * k);
        let mut indices = Vec::with_capacity(n * k);
        for list in lists {
            if list.len() != k {
                return Err(Error::InsufficientCandidates {
                    required: k,
                    available: list.len(),
                });
            }
            for c in list {
                labels.push(c.label);
                vectors.extend_from_slice(train.row(c.index));
                distances.push(c.distance);
                indices.push(c.index);
            }
        }
        Ok(NeighborTargets {
            k,
            dim: d,
            labels,
            vectors,
            distances,
            indices: Some(indices),
        })
    }

    /// Builds targets from raw arrays, as read back from a targets file.
    pub fn from_parts(
        k: usize,
        dim: usize,
        labels: Vec<usize>,
        vectors: Vec<f64>,
        distances: Vec<f64>,
    ) -> Result<Self> {
        let n = labels.len() / k.max(1);
        if k == 0 || labels.len() != n * k || distances.len() != n * k || vectors.len() != n * k * dim {
            return Err(Error::Validation("inconsistent neighbor target arrays".into()));
        }
        Ok(NeighborTargets {
            k,
            dim,
            labels,
            vectors,
            distances,
            indices: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len() / self.k
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn labels_of(&self, i: usize) -> &[usize] {
        &self.labels[i * self.k..(i + 1) * self.k]
    }

    /// `K×d` row-major neighbor vectors of sample `i`.
    pub fn vectors_of(&self, i: usize) -> &[f64] {
        let w = self.k * self.dim;
        &self.vectors[i * w..(i + 1) * w]
    }

    pub fn distances_of(&self, i: usize) -> &[f64] {
        &self.distances[i * self.k..(i + 1) * self.k]
    }

    /// Source indices, when known (not stored in targets files).
    pub fn indices_of(&self, i: usize) -> Option<&[usize]> {
        self.indices.as_ref().map(|v| &v[i * self.k..(i + 1) * self.k])
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn vectors(&self) -> &[f64] {
        &self.vectors
    }

    pub fn distances(&self) -> &[f64] {
        &self.distances
    }

    /// Targets of the listed samples, in the order given.
    pub fn subset(&self, rows: &[usize]) -> Self {
        let w = self.k * self.dim;
        let mut out = NeighborTargets {
            k: self.k,
            dim: self.dim,
            labels: Vec::with_capacity(rows.len() * self.k),
            vectors: Vec::with_capacity(rows.len() * w),
            distances: Vec::with_capacity(rows.len() * self.k),
            indices: self.indices.as_ref().map(|_| Vec::with_capacity(rows.len() * self.k)),
        };
        for &i in rows {
            out.labels.extend_from_slice(self.labels_of(i));
            out.vectors.extend_from_slice(self.vectors_of(i));
            out.distances.extend_from_slice(self.distances_of(i));
            if let (Some(dst), Some(src)) = (out.indices.as_mut(), self.indices_of(i)) {
                dst.extend_from_slice(src);
            }
        }
        out
    }

    /// Swaps the rank-`i` and rank-`j` entries (1-based) of every sample.
    pub fn swap_ranks(&self, i: usize, j: usize) -> Result<Self> {
        let k = self.k;
        if i == 0 || j == 0 || i > k || j > k {
            return Err(Error::Parameter(format!(
                "ranks must lie in 1..={k}, got {i} and {j}"
            )));
        }
        let (a, b) = (i - 1, j - 1);
        let mut out = self.clone();
        if a == b {
            return Ok(out);
        }
        for s in 0..self.len() {
            out.labels.swap(s * k + a, s * k + b);
            out.distances.swap(s * k + a, s * k + b);
            if let Some(idx) = out.indices.as_mut() {
                idx.swap(s * k + a, s * k + b);
            }
            let base = s * k * self.dim;
            for c in 0..self.dim {
                out.vectors.swap(base + a * self.dim + c, base + b * self.dim + c);
            }
        }
        Ok(out)
    }

    /// Same targets with the neighbor order reversed per sample.
    pub fn reversed(&self) -> Self {
        let mut out = self.clone();
        for i in 0..self.len() {
            let r = i * self.k..(i + 1) * self.k;
            out.labels[r.clone()].reverse();
            out.distances[r.clone()].reverse();
            if let Some(idx) = out.indices.as_mut() {
                idx[r].reverse();
            }
            let w = self.k * self.dim;
            let block = &mut out.vectors[i * w..(i + 1) * w];
            let rows: Vec<f64> = block
                .chunks(self.dim)
                .rev()
                .flatten()
                .copied()
                .collect();
            block.copy_from_slice(&rows);
        }
        out
    }
}

const QUERY_BLOCK: usize = 64;

fn check_size(train: &Dataset, k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::Parameter("K must be at least 1".into()));
    }
    if train.len() <= k {
        return Err(Error::InsufficientCandidates {
            required: k + 1,
            available: train.len(),
        });
    }
    Ok(())
}

/// Brute-force self-excluded neighbors of every row. Query rows are
/// scanned in blocks so each pass over the reference serves many queries.
pub fn exact_neighbor_lists(train: &Dataset, k: usize) -> Result<Vec<Vec<Candidate>>> {
    check_size(train, k)?;
    let n = train.len();
    let blocks: Vec<usize> = (0..n).step_by(QUERY_BLOCK).collect();
    let lists: Vec<Vec<Vec<Candidate>>> = blocks
        .par_iter()
        .map(|&start| {
            let end = (start + QUERY_BLOCK).min(n);
            let mut tops: Vec<TopK> = (start..end).map(|_| TopK::new(k)).collect();
            for j in 0..n {
                let r = train.row(j);
                let label = train.label(j);
                for (q, top) in (start..end).zip(tops.iter_mut()) {
                    if q != j {
                        top.offer_sq(j, label, squared_distance(train.row(q), r));
                    }
                }
            }
            tops.into_iter().map(|t| t.items).collect()
        })
        .collect();
    Ok(lists.into_iter().flatten().collect())
}

pub fn exact_neighbors(train: &Dataset, k: usize) -> Result<NeighborTargets> {
    let lists = exact_neighbor_lists(train, k)?;
    NeighborTargets::from_candidates(train, k, &lists)
}

/// Union of two candidate lists, keeping the `k` best with one entry per source index.
pub fn merge_top_k(current: &[Candidate], new: &[Candidate], k: usize) -> Vec<Candidate> {
    let mut all: Vec<Candidate> = current.iter().chain(new).copied().collect();
    all.sort_by(|a, b| a.distance.total_cmp(&b.distance).then(a.index.cmp(&b.index)));
    let mut out: Vec<Candidate> = Vec::with_capacity(k);
    for c in all {
        if out.len() == k {
            break;
        }
        if !out.iter().any(|x| x.index == c.index) {
            out.push(c);
        }
    }
    out
}

/// Bounded-memory neighbor search parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct OocConfig {
    /// Maximum number of samples held per round.
    pub batch: usize,
    pub rounds: usize,
    pub seed: u64,
}

impl OocConfig {
    pub fn validate(&self, k: usize) -> Result<()> {
        if self.batch <= k {
            return Err(Error::Parameter(format!(
                "batch capacity {} must exceed K = {k}",
                self.batch
            )));
        }
        if self.rounds == 0 {
            return Err(Error::Parameter("rounds must be at least 1".into()));
        }
        Ok(())
    }
}

/// Out-of-core search for an arbitrary query using the supplied stream.
/// Each round draws `batch` distinct rows (the whole set when `batch ≥ N`),
/// independently of earlier rounds, and merges the batch's best `k`.
pub fn ooc_query<R: rand::Rng>(
    reference: &Dataset,
    query: &[f64],
    exclude: Option<usize>,
    k: usize,
    cfg: &OocConfig,
    rng: &mut R,
) -> Result<Vec<Candidate>> {
    cfg.validate(k)?;
    let n = reference.len();
    let mut running = TopK::new(k);
    for _ in 0..cfg.rounds {
        if cfg.batch >= n {
            for j in (0..n).filter(|j| Some(*j) != exclude) {
                running.offer_sq(j, reference.label(j), squared_distance(query, reference.row(j)));
            }
        } else {
            for j in index::sample(rng, n, cfg.batch).into_iter() {
                if Some(j) != exclude {
                    running.offer_sq(j, reference.label(j), squared_distance(query, reference.row(j)));
                }
            }
        }
    }
    if running.items.len() < k {
        return Err(Error::InsufficientCandidates {
            required: k,
            available: running.items.len(),
        });
    }
    Ok(running.items)
}

/// Out-of-core neighbors of training sample `i` for a given epoch.
pub fn ooc_neighbors_at(
    train: &Dataset,
    k: usize,
    cfg: &OocConfig,
    i: usize,
    epoch: u64,
) -> Result<Vec<Candidate>> {
    let mut r = rng::stream(cfg.seed, "ooc", &[epoch, i as u64]);
    ooc_query(train, train.row(i), Some(i), k, cfg, &mut r)
}

pub fn ooc_neighbors(train: &Dataset, k: usize, cfg: &OocConfig, i: usize) -> Result<Vec<Candidate>> {
    ooc_neighbors_at(train, k, cfg, i, 0)
}

/// Out-of-core targets for every training sample, computed in parallel.
pub fn ooc_targets(train: &Dataset, k: usize, cfg: &OocConfig, epoch: u64) -> Result<NeighborTargets> {
    let rows: Vec<usize> = (0..train.len()).collect();
    ooc_targets_for_rows(train, k, cfg, epoch, &rows)
}

/// Out-of-core targets of the listed training rows, in the order given.
pub fn ooc_targets_for_rows(
    train: &Dataset,
    k: usize,
    cfg: &OocConfig,
    epoch: u64,
    rows: &[usize],
) -> Result<NeighborTargets> {
    check_size(train, k)?;
    cfg.validate(k)?;
    let lists = rows
        .par_iter()
        .map(|&i| ooc_neighbors_at(train, k, cfg, i, epoch))
        .collect::<Result<Vec<_>>>()?;
    NeighborTargets::from_candidates(train, k, &lists)
}

/// Mean fraction of exact neighbor indices recovered by `approx`.
pub fn recall_at_k(approx: &[Vec<Candidate>], exact: &[Vec<Candidate>]) -> f64 {
    if exact.is_empty() {
        return 1.0;
    }
    let total: f64 = approx
        .iter()
        .zip(exact)
        .map(|(a, e)| {
            let hit = e.iter().filter(|c| a.iter().any(|x| x.index == c.index)).count();
            hit as f64 / e.len().max(1) as f64
        })
        .sum();
    total / exact.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth;

    fn line(xs: &[f64]) -> Dataset {
        let labels = (0..xs.len()).map(|i| i % 2).collect();
        Dataset::from_classes(xs.to_vec(), 1, labels, 2).unwrap()
    }

    fn cand(index: usize, distance: f64) -> Candidate {
        Candidate {
            index,
            label: 0,
            distance,
        }
    }

    #[test]
    fn query_excludes_self() {
        let ds = Dataset::from_classes(vec![0.0, 0.0, 1.0, 0.0, 3.0, 0.0], 2, vec![0, 1, 0], 2).unwrap();
        let r = query_neighbors(&ds, &[0.0, 0.0], 2, Some(0)).unwrap();
        assert_eq!(r.iter().map(|c| c.index).collect::<Vec<_>>(), vec![1, 2]);
        assert_eq!(r.iter().map(|c| c.distance).collect::<Vec<_>>(), vec![1.0, 3.0]);
        match query_neighbors(&ds, &[0.0, 0.0], 3, Some(0)) {
            Err(Error::InsufficientCandidates { required: 3, available: 2 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn query_whole_reference_and_duplicates() {
        let ds = line(&[5.0, 1.0, 1.0, 3.0]);
        let r = query_neighbors(&ds, &[0.0], 4, None).unwrap();
        assert_eq!(r.iter().map(|c| c.index).collect::<Vec<_>>(), vec![1, 2, 3, 0]);
    }

    #[test]
    fn exact_collinear_tie() {
        let ds = line(&[0.0, 1.0, 2.0, 4.0]);
        let t = exact_neighbors(&ds, 2).unwrap();
        assert_eq!(t.indices_of(1).unwrap(), &[0, 2]);
        assert_eq!(t.distances_of(1), &[1.0, 1.0]);
        assert_eq!(t.vectors_of(1), &[0.0, 2.0]);
        assert_eq!(t.labels_of(1), &[0, 0]);
        assert!(exact_neighbors(&line(&[0.0, 1.0]), 2).is_err());
    }

    #[test]
    fn duplicate_samples_are_first_neighbors() {
        let ds = line(&[2.0, 7.0, 2.0]);
        let t = exact_neighbors(&ds, 1).unwrap();
        assert_eq!(t.indices_of(2).unwrap(), &[0]);
        assert_eq!(t.distances_of(2), &[0.0]);
    }

    #[test]
    fn exact_matches_per_sample_query_across_blocks() {
        let ds = synth::gaussian_points(150, 3, 2, 2);
        let t = exact_neighbors(&ds, 4).unwrap();
        for i in 0..ds.len() {
            let q = query_neighbors(&ds, ds.row(i), 4, Some(i)).unwrap();
            assert_eq!(t.indices_of(i).unwrap(), q.iter().map(|c| c.index).collect::<Vec<_>>().as_slice());
            assert!(!t.indices_of(i).unwrap().contains(&i));
        }
    }

    #[test]
    fn merge_examples() {
        let new = vec![cand(3, 2.0), cand(1, 1.0), cand(2, 5.0)];
        let m = merge_top_k(&[], &new, 5);
        assert_eq!(m.iter().map(|c| c.index).collect::<Vec<_>>(), vec![1, 3, 2]);
        assert_eq!(merge_top_k(&m, &m, 5), m);

        let cur = vec![cand(10, 1.0), cand(11, 4.0)];
        let new = vec![cand(12, 2.0), cand(13, 3.0), cand(14, 9.0)];
        let m = merge_top_k(&cur, &new, 3);
        assert_eq!(m.iter().map(|c| c.distance).collect::<Vec<_>>(), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn merge_two_rounds() {
        let round1 = vec![cand(0, 5.0), cand(1, 6.0)];
        let round2 = vec![cand(2, 1.0), cand(3, 7.0)];
        let m = merge_top_k(&round1, &round2, 2);
        assert_eq!(m.iter().map(|c| c.distance).collect::<Vec<_>>(), vec![1.0, 5.0]);
    }

    #[test]
    fn full_batch_matches_exact() {
        let ds = synth::gaussian_points(80, 3, 2, 5);
        let exact = exact_neighbor_lists(&ds, 3).unwrap();
        let cfg = OocConfig {
            batch: ds.len(),
            rounds: 1,
            seed: 1,
        };
        for (i, e) in exact.iter().enumerate() {
            assert_eq!(&ooc_neighbors(&ds, 3, &cfg, i).unwrap(), e);
        }
    }

    #[test]
    fn ooc_config_validation() {
        let ds = synth::gaussian_points(20, 2, 2, 5);
        let bad = OocConfig {
            batch: 3,
            rounds: 1,
            seed: 0,
        };
        assert!(ooc_neighbors(&ds, 3, &bad, 0).is_err());
        let none = OocConfig {
            batch: 10,
            rounds: 0,
            seed: 0,
        };
        assert!(ooc_neighbors(&ds, 3, &none, 0).is_err());
    }

    #[test]
    fn ooc_is_deterministic_and_self_free() {
        let ds = synth::gaussian_points(200, 3, 2, 6);
        let cfg = OocConfig {
            batch: 20,
            rounds: 3,
            seed: 11,
        };
        let a = ooc_targets(&ds, 4, &cfg, 0).unwrap();
        let b = ooc_targets(&ds, 4, &cfg, 0).unwrap();
        assert_eq!(a, b);
        for i in 0..ds.len() {
            assert!(!a.indices_of(i).unwrap().contains(&i));
            assert!(a.distances_of(i).windows(2).all(|w| w[0] <= w[1]));
        }
        assert_ne!(a, ooc_targets(&ds, 4, &cfg, 1).unwrap());
    }

    #[test]
    fn reversed_flips_order() {
        let ds = line(&[0.0, 1.0, 2.0, 4.0]);
        let t = exact_neighbors(&ds, 2).unwrap();
        let r = t.reversed();
        assert_eq!(r.indices_of(0).unwrap(), &[2, 1]);
        assert_eq!(r.vectors_of(0), &[2.0, 1.0]);
        assert_eq!(r.reversed(), t);
    }

    #[test]
    fn swap_ranks_examples() {
        let ds = synth::gaussian_points(30, 3, 3, 8);
        let t = exact_neighbors(&ds, 4).unwrap();
        assert_eq!(t.swap_ranks(2, 2).unwrap(), t);
        let s = t.swap_ranks(1, 3).unwrap();
        assert_eq!(s.swap_ranks(3, 1).unwrap(), t);
        assert_eq!(s.labels_of(5)[0], t.labels_of(5)[2]);
        assert_eq!(&s.vectors_of(5)[..3], &t.vectors_of(5)[6..9]);
        assert_eq!(s.distances_of(5)[2], t.distances_of(5)[0]);
        assert!(t.swap_ranks(0, 2).is_err());
        assert!(t.swap_ranks(1, 5).is_err());
    }

    #[test]
    fn subset_selects_rows() {
        let ds = synth::gaussian_points(30, 2, 2, 8);
        let t = exact_neighbors(&ds, 3).unwrap();
        let s = t.subset(&[4, 1]);
        assert_eq!(s.len(), 2);
        assert_eq!(s.vectors_of(0), t.vectors_of(4));
        assert_eq!(s.indices_of(1), t.indices_of(1));
    }

    #[test]
    fn squared_distance_matches_naive() {
        let a: Vec<f64> = (0..11).map(|i| i as f64 * 0.3).collect();
        let b: Vec<f64> = (0..11).map(|i| 1.0 - i as f64).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum();
        assert!((squared_distance(&a, &b) - naive).abs() < 1e-9);
    }
}
