//! Sum all-reduce over `k` equal-length buffers.
//!
//! The ring variant splits each buffer into `k` chunks and runs `k - 1`
//! scatter-reduce phases followed by `k - 1` all-gather phases. In phase `p`
//! of scatter-reduce worker `r` sends chunk `(r - p) mod k` to its right
//! neighbour and adds chunk `(r - 1 - p) mod k` received from its left one.
//! Every addition is fixed by the schedule, so results do not depend on
//! thread timing.

use std::ops::Range;
use std::sync::{Barrier, Mutex};

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReduceKind {
    #[default]
    Ring,
    Naive,
}

/// Range of chunk `i` when `len` elements are cut into `k` chunks; the first
/// `len % k` chunks are one element longer.
pub fn chunk_range(len: usize, k: usize, i: usize) -> Range<usize> {
    let base = len / k;
    let extra = len % k;
    let start = i * base + i.min(extra);
    start..start + base + usize::from(i < extra)
}

fn wrap(v: isize, k: usize) -> usize {
    v.rem_euclid(k as isize) as usize
}

fn check_lengths<T>(vectors: &[Vec<T>]) -> Result<()> {
    if let Some(first) = vectors.first() {
        if vectors.iter().any(|v| v.len() != first.len()) {
            return shape_err("all-reduce buffers differ in length");
        }
    }
    Ok(())
}

/// Ring all-reduce executed in a single context; leaves the sum in every
/// vector. Performs exactly the arithmetic of the threaded [`Collective`].
pub fn ring_allreduce<T: Scalar>(vectors: &mut [Vec<T>]) -> Result<()> {
    check_lengths(vectors)?;
    let k = vectors.len();
    if k <= 1 {
        return Ok(());
    }
    let len = vectors[0].len();
    for p in 0..k - 1 {
        let sent: Vec<Vec<T>> = (0..k)
            .map(|r| vectors[r][chunk_range(len, k, wrap(r as isize - p as isize, k))].to_vec())
            .collect();
        for r in 0..k {
            let idx = wrap(r as isize - 1 - p as isize, k);
            let from = &sent[wrap(r as isize - 1, k)];
            for (d, &s) in vectors[r][chunk_range(len, k, idx)].iter_mut().zip(from) {
                *d = *d + s;
            }
        }
    }
    for p in 0..k - 1 {
        let sent: Vec<Vec<T>> = (0..k)
            .map(|r| vectors[r][chunk_range(len, k, wrap(r as isize + 1 - p as isize, k))].to_vec())
            .collect();
        for r in 0..k {
            let idx = wrap(r as isize - p as isize, k);
            vectors[r][chunk_range(len, k, idx)].copy_from_slice(&sent[wrap(r as isize - 1, k)]);
        }
    }
    Ok(())
}

/// Sequential sum in worker order, copied to every vector.
pub fn naive_allreduce<T: Scalar>(vectors: &mut [Vec<T>]) -> Result<()> {
    check_lengths(vectors)?;
    let Some(first) = vectors.first() else { return Ok(()) };
    let mut acc = first.clone();
    for v in &vectors[1..] {
        for (a, &b) in acc.iter_mut().zip(v) {
            *a = *a + b;
        }
    }
    for v in vectors.iter_mut() {
        v.copy_from_slice(&acc);
    }
    Ok(())
}

/// Shared state through which `k` worker threads all-reduce their buffers.
/// Every worker must call [`Collective::allreduce`] the same number of times.
pub struct Collective<T> {
    k: usize,
    kind: ReduceKind,
    deterministic: bool,
    barrier: Barrier,
    slots: Vec<Mutex<Vec<T>>>,
    arrival: Mutex<(Vec<T>, usize)>,
}

impl<T: Scalar> Collective<T> {
    pub fn new(k: usize, kind: ReduceKind, deterministic: bool) -> Self {
        Self {
            k,
            kind,
            deterministic,
            barrier: Barrier::new(k.max(1)),
            slots: (0..k).map(|_| Mutex::new(Vec::new())).collect(),
            arrival: Mutex::new((Vec::new(), 0)),
        }
    }

    pub fn workers(&self) -> usize {
        self.k
    }

    pub fn barrier(&self) {
        if self.k > 1 {
            self.barrier.wait();
        }
    }

    /// Replaces `buf` with the elementwise sum over all workers' buffers.
    /// Buffers must have equal length on every worker.
    pub fn allreduce(&self, rank: usize, buf: &mut [T]) {
        if self.k <= 1 {
            return;
        }
        match (self.kind, self.deterministic) {
            (ReduceKind::Ring, _) => self.ring(rank, buf),
            (ReduceKind::Naive, true) => self.naive_ordered(rank, buf),
            (ReduceKind::Naive, false) => self.naive_arrival(buf),
        }
    }

    /// Publishes `data` in this worker's slot and returns every worker's
    /// copy, in rank order.
    pub fn all_gather(&self, rank: usize, data: &[T]) -> Vec<Vec<T>> {
        if self.k <= 1 {
            return vec![data.to_vec()];
        }
        self.post(rank, data);
        self.barrier.wait();
        let out = self.slots.iter().map(|s| s.lock().unwrap().clone()).collect();
        self.barrier.wait();
        out
    }

    fn post(&self, rank: usize, data: &[T]) {
        let mut s = self.slots[rank].lock().unwrap();
        s.clear();
        s.extend_from_slice(data);
    }

    fn ring(&self, rank: usize, buf: &mut [T]) {
        let k = self.k;
        let len = buf.len();
        let r = rank as isize;
        let left = wrap(r - 1, k);
        for p in 0..k as isize - 1 {
            self.post(rank, &buf[chunk_range(len, k, wrap(r - p, k))]);
            self.barrier.wait();
            {
                let recv = self.slots[left].lock().unwrap();
                for (d, &s) in buf[chunk_range(len, k, wrap(r - 1 - p, k))].iter_mut().zip(recv.iter()) {
                    *d = *d + s;
                }
            }
            self.barrier.wait();
        }
        for p in 0..k as isize - 1 {
            self.post(rank, &buf[chunk_range(len, k, wrap(r + 1 - p, k))]);
            self.barrier.wait();
            {
                let recv = self.slots[left].lock().unwrap();
                buf[chunk_range(len, k, wrap(r - p, k))].copy_from_slice(&recv);
            }
            self.barrier.wait();
        }
    }

    fn naive_ordered(&self, rank: usize, buf: &mut [T]) {
        self.post(rank, buf);
        self.barrier.wait();
        {
            let first = self.slots[0].lock().unwrap();
            buf.copy_from_slice(&first);
        }
        for s in &self.slots[1..] {
            let s = s.lock().unwrap();
            for (d, &v) in buf.iter_mut().zip(s.iter()) {
                *d = *d + v;
            }
        }
        self.barrier.wait();
    }

    fn naive_arrival(&self, buf: &mut [T]) {
        {
            let mut acc = self.arrival.lock().unwrap();
            if acc.1 % self.k == 0 {
                acc.0.clear();
                acc.0.extend_from_slice(buf);
            } else {
                for (d, &v) in acc.0.iter_mut().zip(buf.iter()) {
                    *d = *d + v;
                }
            }
            acc.1 += 1;
        }
        self.barrier.wait();
        buf.copy_from_slice(&self.arrival.lock().unwrap().0);
        self.barrier.wait();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_vectors(k: usize, len: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..k).map(|_| (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
    }

    fn ordered_sum(v: &[Vec<f64>]) -> Vec<f64> {
        let mut out = vec![0.0; v[0].len()];
        for x in v {
            for (o, a) in out.iter_mut().zip(x) {
                *o += a;
            }
        }
        out
    }

    fn rel_inf(a: &[f64], b: &[f64]) -> f64 {
        let d = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        let s = b.iter().map(|v| v.abs()).fold(0.0, f64::max);
        d / s.max(f64::MIN_POSITIVE)
    }

    fn threaded(v: &[Vec<f64>], kind: ReduceKind, deterministic: bool) -> Vec<Vec<f64>> {
        let coll = Collective::new(v.len(), kind, deterministic);
        std::thread::scope(|s| {
            let hs: Vec<_> = v
                .iter()
                .enumerate()
                .map(|(r, x)| {
                    let coll = &coll;
                    let mut buf = x.clone();
                    s.spawn(move || {
                        coll.allreduce(r, &mut buf);
                        buf
                    })
                })
                .collect();
            hs.into_iter().map(|h| h.join().unwrap()).collect()
        })
    }

    #[test]
    fn small_examples() {
        let mut one = vec![vec![1.0, 2.0]];
        ring_allreduce(&mut one).unwrap();
        assert_eq!(one, vec![vec![1.0, 2.0]]);
        let mut two = vec![vec![1.0, 2.0], vec![3.0, 4.0]];
        ring_allreduce(&mut two).unwrap();
        assert_eq!(two, vec![vec![4.0, 6.0], vec![4.0, 6.0]]);
        let mut bad = vec![vec![1.0], vec![1.0, 2.0]];
        assert!(ring_allreduce(&mut bad).is_err());
    }

    #[test]
    fn chunks_cover() {
        for len in 0..20 {
            for k in 1..9 {
                let mut next = 0;
                for i in 0..k {
                    let r = chunk_range(len, k, i);
                    assert_eq!(r.start, next);
                    next = r.end;
                }
                assert_eq!(next, len);
            }
        }
    }

    #[test]
    fn threaded_matches_sequential_bitwise() {
        for k in [1, 2, 3, 4, 8] {
            for len in [1, 5, 1024] {
                let v = random_vectors(k, len, (k * 31 + len) as u64);
                let mut seq = v.clone();
                ring_allreduce(&mut seq).unwrap();
                let thr = threaded(&v, ReduceKind::Ring, true);
                assert_eq!(thr, seq);
                let oracle = ordered_sum(&v);
                for row in &seq {
                    assert!(rel_inf(row, &oracle) < 1e-12);
                }
                let naive = threaded(&v, ReduceKind::Naive, true);
                for row in &naive {
                    assert_eq!(row, &oracle);
                }
                let arrival = threaded(&v, ReduceKind::Naive, false);
                for row in &arrival {
                    assert!(rel_inf(row, &oracle) < 1e-12);
                }
            }
        }
    }

    #[test]
    fn repeated_runs_identical() {
        let v = random_vectors(4, 999, 5);
        let first = threaded(&v, ReduceKind::Ring, true);
        for _ in 0..5 {
            assert_eq!(threaded(&v, ReduceKind::Ring, true), first);
        }
    }

    proptest! {
        #[test]
        fn permutation_invariant(k in 1usize..7, len in 1usize..64, seed in any::<u64>()) {
            let v = random_vectors(k, len, seed);
            let mut a = v.clone();
            ring_allreduce(&mut a).unwrap();
            let mut b: Vec<Vec<f64>> = v.iter().rev().cloned().collect();
            ring_allreduce(&mut b).unwrap();
            prop_assert!(rel_inf(&a[0], &b[0]) < 1e-12);
            for row in &a {
                prop_assert_eq!(row, &a[0]);
            }
        }
    }
}
