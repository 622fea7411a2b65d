//! Tile permutations and the jigsaw label space.
//!
//! A [`PermutationSet`] is built greedily: starting from the identity, each
//! step appends the candidate whose minimum Hamming distance to the already
//! selected permutations is largest. Ties go to the lexicographically smallest
//! candidate, so the result is fully deterministic. Candidates are all
//! `n_tiles!` orderings when that count is at most [`ENUMERATION_LIMIT`],
//! otherwise a seeded sample of that many distinct orderings.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::error::{invalid, Error, Result};
use crate::seeding;

/// Largest candidate pool that is enumerated or sampled.
pub const ENUMERATION_LIMIT: usize = 500_000;

/// A bijection on `{0, .., n_tiles - 1}`.
///
/// Position `i` holds the tile index placed there; see
/// [`crate::transforms::reassemble`] for the destination-to-source convention.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Permutation(Vec<usize>);

impl Permutation {
    pub fn new(mapping: Vec<usize>) -> Result<Self> {
        let n = mapping.len();
        let mut seen = vec![false; n];
        for &m in &mapping {
            if m >= n || seen[m] {
                return invalid(format!("{mapping:?} is not a bijection on 0..{n}"));
            }
            seen[m] = true;
        }
        Ok(Self(mapping))
    }

    pub fn identity(n: usize) -> Self {
        Self((0..n).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn mapping(&self) -> &[usize] {
        &self.0
    }

    pub fn is_identity(&self) -> bool {
        self.0.iter().enumerate().all(|(i, &m)| i == m)
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.0.len()];
        for (i, &m) in self.0.iter().enumerate() {
            inv[m] = i;
        }
        Self(inv)
    }
}

impl fmt::Display for Permutation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, m) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{m}")?;
        }
        Ok(())
    }
}

pub fn hamming_distance(a: &Permutation, b: &Permutation) -> Result<usize> {
    if a.len() != b.len() {
        return invalid(format!("length mismatch: {} vs {}", a.len(), b.len()));
    }
    Ok(a.0.iter().zip(&b.0).filter(|(x, y)| x != y).count())
}

/// The jigsaw label space: `perms[0]` is always the identity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PermutationSet {
    n_tiles: usize,
    perms: Vec<Permutation>,
}

impl PermutationSet {
    /// Validates the set invariants: identity first, equal lengths, no duplicates.
    pub fn new(perms: Vec<Permutation>) -> Result<Self> {
        let Some(first) = perms.first() else {
            return invalid("empty permutation set");
        };
        let n_tiles = first.len();
        if !first.is_identity() {
            return invalid("first permutation must be the identity");
        }
        let mut seen = HashSet::with_capacity(perms.len());
        for (i, p) in perms.iter().enumerate() {
            if p.len() != n_tiles {
                return invalid(format!("permutation {i} has {} tiles, expected {n_tiles}", p.len()));
            }
            if !seen.insert(p) {
                return invalid(format!("permutation {i} is a duplicate"));
            }
        }
        Ok(Self { n_tiles, perms })
    }

    pub fn n_tiles(&self) -> usize {
        self.n_tiles
    }

    /// Number of jigsaw classes `P`.
    pub fn len(&self) -> usize {
        self.perms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perms.is_empty()
    }

    pub fn get(&self, index: usize) -> Option<&Permutation> {
        self.perms.get(index)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Permutation> {
        self.perms.iter()
    }

    /// Serialized form: one comma-separated row per permutation, `\n` terminated.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for p in &self.perms {
            out.push_str(&p.to_string());
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut perms: Vec<Permutation> = Vec::new();
        let mut seen = HashSet::new();
        for (line_no, line) in text.lines().enumerate() {
            let fmt_err = |message: String| Error::Format { line: line_no, message };
            let mapping = line
                .split(',')
                .map(|tok| tok.trim().parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| fmt_err(format!("malformed row `{line}`: {e}")))?;
            let perm = Permutation::new(mapping)
                .map_err(|_| fmt_err(format!("row `{line}` is not a bijection")))?;
            if line_no == 0 && !perm.is_identity() {
                return Err(fmt_err("first row must be the identity".into()));
            }
            if let Some(first) = perms.first() {
                if perm.len() != first.len() {
                    return Err(fmt_err(format!("expected {} tiles, found {}", first.len(), perm.len())));
                }
            }
            if !seen.insert(perm.clone()) {
                return Err(fmt_err(format!("duplicate row `{line}`")));
            }
            perms.push(perm);
        }
        if perms.is_empty() {
            return Err(Error::Format { line: 0, message: "empty permutation file".into() });
        }
        Self::new(perms)
    }
}

pub fn save_set(set: &PermutationSet, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, set.to_text())?;
    Ok(())
}

pub fn load_set(path: impl AsRef<Path>) -> Result<PermutationSet> {
    PermutationSet::from_text(&fs::read_to_string(path)?)
}

/// Minimum Hamming distance over all unordered pairs of the set.
pub fn min_pairwise_distance(set: &PermutationSet) -> Result<usize> {
    if set.len() < 2 {
        return invalid("need at least two permutations");
    }
    let mut best = usize::MAX;
    for (i, a) in set.perms.iter().enumerate() {
        for b in &set.perms[i + 1..] {
            best = best.min(hamming_distance(a, b)?);
        }
    }
    Ok(best)
}

fn factorial_capped(n: usize, cap: usize) -> usize {
    (1..=n).try_fold(1usize, |acc, k| acc.checked_mul(k)).map_or(usize::MAX, |f| f.min(cap.saturating_add(1)))
}

/// Candidate pool laid out as `count` rows of `n` tile indices, in lexicographic order.
struct Pool {
    n: usize,
    rows: Vec<u8>,
}

impl Pool {
    fn count(&self) -> usize {
        self.rows.len() / self.n
    }

    fn row(&self, i: usize) -> &[u8] {
        &self.rows[i * self.n..(i + 1) * self.n]
    }

    fn enumerate_all(n: usize) -> Self {
        let mut current: Vec<u8> = (0..n as u8).collect();
        let mut rows = current.clone();
        // Standard next-permutation walk yields lexicographic order.
        loop {
            let Some(i) = (0..n - 1).rev().find(|&i| current[i] < current[i + 1]) else {
                break;
            };
            let j = (i + 1..n).rev().find(|&j| current[j] > current[i]).unwrap();
            current.swap(i, j);
            current[i + 1..].reverse();
            rows.extend_from_slice(&current);
        }
        Self { n, rows }
    }

    fn sample(n: usize, count: usize, seed: u64) -> Self {
        let mut rng = seeding::stream(seed, &[seeding::tag("permutation-pool")]);
        let mut seen: HashSet<Vec<u8>> = HashSet::with_capacity(count);
        let identity: Vec<u8> = (0..n as u8).collect();
        seen.insert(identity.clone());
        while seen.len() < count {
            let mut p = identity.clone();
            p.shuffle(&mut rng);
            seen.insert(p);
        }
        let mut sorted: Vec<Vec<u8>> = seen.into_iter().collect();
        sorted.sort_unstable();
        Self { n, rows: sorted.concat() }
    }
}

/// Greedy max-min Hamming selection of `count` permutations of `n_tiles` tiles.
pub fn generate_permutation_set(n_tiles: usize, count: usize, seed: u64) -> Result<PermutationSet> {
    if n_tiles < 2 {
        return invalid(format!("n_tiles must be at least 2, got {n_tiles}"));
    }
    if n_tiles > u8::MAX as usize {
        return invalid(format!("n_tiles {n_tiles} exceeds 255"));
    }
    if count < 2 {
        return invalid(format!("permutation count must be at least 2, got {count}"));
    }
    let total = factorial_capped(n_tiles, ENUMERATION_LIMIT);
    if count > total {
        return Err(Error::Infeasible(format!("{count} permutations requested but {n_tiles}! = {total}")));
    }
    let pool = if total <= ENUMERATION_LIMIT {
        Pool::enumerate_all(n_tiles)
    } else {
        if count > ENUMERATION_LIMIT {
            return Err(Error::Infeasible(format!(
                "{count} permutations exceed the candidate pool of {ENUMERATION_LIMIT}"
            )));
        }
        Pool::sample(n_tiles, ENUMERATION_LIMIT, seed)
    };

    let identity: Vec<u8> = (0..n_tiles as u8).collect();
    let distance = |a: &[u8], b: &[u8]| a.iter().zip(b).filter(|(x, y)| x != y).count() as u32;

    // min distance from each candidate to the selected set; selected rows sit at 0
    let mut min_dist: Vec<u32> = (0..pool.count()).map(|i| distance(pool.row(i), &identity)).collect();
    let mut selected = vec![Permutation::identity(n_tiles)];
    while selected.len() < count {
        let mut best = 0usize;
        for (i, &d) in min_dist.iter().enumerate() {
            if d > min_dist[best] {
                best = i;
            }
        }
        debug_assert!(min_dist[best] > 0);
        let chosen = pool.row(best).to_vec();
        for (i, d) in min_dist.iter_mut().enumerate() {
            if *d > 0 {
                *d = (*d).min(distance(pool.row(i), &chosen));
            }
        }
        selected.push(Permutation(chosen.into_iter().map(usize::from).collect()));
    }
    PermutationSet::new(selected)
}
