//! Hierarchical spherical k-means tokenization of code vectors.
//!
//! Every identity's code vector is routed from the root through `l - 1`
//! levels of recursive k-means (`k = v`) and finally receives a leaf token by
//! similarity rank inside its last cluster. The concatenated node indices
//! form the identity code.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{GifError, Result};
use crate::sphere::{dot, norm, normalize_in_place, CodeVectorMatrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KMeansConfig {
    pub max_iters: usize,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self { max_iters: 100, restarts: 8, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    pub assignment: Vec<usize>,
    /// Unit-norm centroid per cluster.
    pub centroids: Vec<Vec<f64>>,
    /// Sum over points of the cosine similarity to their centroid.
    pub objective: f64,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn add_into(acc: &mut [f64], x: &[f64], sign: f64) {
    for (a, b) in acc.iter_mut().zip(x) {
        *a += sign * b;
    }
}

/// Unit direction of a cluster sum, falling back to `fallback` when the sum
/// cancels out.
fn direction(sum: &[f64], fallback: &[f64]) -> Vec<f64> {
    let mut c = sum.to_vec();
    if normalize_in_place(&mut c).is_none() {
        c = fallback.to_vec();
        normalize_in_place(&mut c);
    }
    c
}

struct Run {
    assignment: Vec<usize>,
    sums: Vec<Vec<f64>>,
    sizes: Vec<usize>,
}

impl Run {
    fn objective(&self) -> f64 {
        self.sums.iter().map(|s| norm(s)).sum()
    }
}

fn seed_centers<P: AsRef<[f64]>>(points: &[P], k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = points.len();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut best = vec![f64::INFINITY; n];
    while chosen.len() < k {
        let last = points[*chosen.last().unwrap()].as_ref();
        for (i, p) in points.iter().enumerate() {
            let dist = (1.0 - dot(p.as_ref(), last)).max(0.0);
            best[i] = best[i].min(dist);
        }
        for &c in &chosen {
            best[c] = 0.0;
        }
        let total: f64 = best.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in best.iter().enumerate() {
                if w > 0.0 && target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            while chosen.contains(&pick) {
                pick = (pick + 1) % n;
            }
            pick
        } else {
            let free: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen.push(next);
    }
    chosen
}

fn lloyd<P: AsRef<[f64]>>(points: &[P], k: usize, iters: usize, rng: &mut ChaCha8Rng) -> Run {
    let n = points.len();
    let d = points[0].as_ref().len();
    let mut centroids: Vec<Vec<f64>> =
        seed_centers(points, k, rng).into_iter().map(|i| points[i].as_ref().to_vec()).collect();
    let mut assignment = vec![usize::MAX; n];

    for _ in 0..iters.max(1) {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let mut best = 0;
            let mut best_sim = f64::NEG_INFINITY;
            for (c, centroid) in centroids.iter().enumerate() {
                let s = dot(p.as_ref(), centroid);
                if s > best_sim {
                    best_sim = s;
                    best = c;
                }
            }
            if assignment[i] != best {
                assignment[i] = best;
                changed = true;
            }
        }
        repair_empty(points, k, &mut assignment, &centroids);
        let mut sums = vec![vec![0.0; d]; k];
        for (i, p) in points.iter().enumerate() {
            add_into(&mut sums[assignment[i]], p.as_ref(), 1.0);
        }
        for c in 0..k {
            let first = assignment.iter().position(|&a| a == c).unwrap();
            centroids[c] = direction(&sums[c], points[first].as_ref());
        }
        if !changed {
            break;
        }
    }

    let mut sums = vec![vec![0.0; d]; k];
    let mut sizes = vec![0; k];
    for (i, p) in points.iter().enumerate() {
        add_into(&mut sums[assignment[i]], p.as_ref(), 1.0);
        sizes[assignment[i]] += 1;
    }
    Run { assignment, sums, sizes }
}

/// Moves the point farthest from its own centroid into each empty cluster.
fn repair_empty<P: AsRef<[f64]>>(
    points: &[P],
    k: usize,
    assignment: &mut [usize],
    centroids: &[Vec<f64>],
) {
    loop {
        let mut sizes = vec![0usize; k];
        for &a in assignment.iter() {
            sizes[a] += 1;
        }
        let Some(empty) = sizes.iter().position(|&s| s == 0) else { return };
        let mut pick = None;
        let mut worst = f64::INFINITY;
        for (i, p) in points.iter().enumerate() {
            if sizes[assignment[i]] < 2 {
                continue;
            }
            let s = dot(p.as_ref(), &centroids[assignment[i]]);
            if s < worst {
                worst = s;
                pick = Some(i);
            }
        }
        match pick {
            Some(i) => assignment[i] = empty,
            None => return,
        }
    }
}

/// Single-point moves that strictly raise the objective, until none remain.
fn refine<P: AsRef<[f64]>>(points: &[P], run: &mut Run, max_passes: usize) {
    let k = run.sums.len();
    for _ in 0..max_passes {
        let mut moved = false;
        for (i, p) in points.iter().enumerate() {
            let x = p.as_ref();
            let a = run.assignment[i];
            if run.sizes[a] < 2 {
                continue;
            }
            let norm_a = norm(&run.sums[a]);
            let without: Vec<f64> = run.sums[a].iter().zip(x).map(|(s, v)| s - v).collect();
            let loss = norm_a - norm(&without);
            let mut best = None;
            let mut best_gain = 1e-12;
            for b in 0..k {
                if b == a {
                    continue;
                }
                let with: f64 = run.sums[b]
                    .iter()
                    .zip(x)
                    .map(|(s, v)| (s + v) * (s + v))
                    .sum::<f64>()
                    .sqrt();
                let gain = with - norm(&run.sums[b]) - loss;
                if gain > best_gain {
                    best_gain = gain;
                    best = Some(b);
                }
            }
            if let Some(b) = best {
                add_into(&mut run.sums[a], x, -1.0);
                add_into(&mut run.sums[b], x, 1.0);
                run.sizes[a] -= 1;
                run.sizes[b] += 1;
                run.assignment[i] = b;
                moved = true;
            }
        }
        if !moved {
            break;
        }
    }
}

/// Spherical k-means: Lloyd iterations on cosine similarity with k-means++
/// seeding, single-point refinement and `restarts` independent runs, keeping
/// the best objective.
pub fn spherical_kmeans<P: AsRef<[f64]> + Sync>(
    points: &[P],
    k: usize,
    cfg: &KMeansConfig,
) -> Result<Clustering> {
    if k == 0 {
        return Err(GifError::config("k must be at least 1"));
    }
    if points.is_empty() {
        return Err(GifError::Degenerate("cannot cluster an empty point set".into()));
    }
    if k > points.len() {
        return Err(GifError::config(format!(
            "k={k} exceeds the number of points {}",
            points.len()
        )));
    }
    let restarts = cfg.restarts.max(1);
    let best = (0..restarts)
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(splitmix(cfg.seed ^ splitmix(r as u64)));
            let mut run = lloyd(points, k, cfg.max_iters, &mut rng);
            refine(points, &mut run, cfg.max_iters.max(1));
            run
        })
        .fold(None::<Run>, |acc, run| match acc {
            Some(a) if a.objective() >= run.objective() => Some(a),
            _ => Some(run),
        })
        .unwrap();

    let centroids = (0..k)
        .map(|c| {
            let first = best.assignment.iter().position(|&a| a == c).unwrap_or(0);
            direction(&best.sums[c], points[first].as_ref())
        })
        .collect::<Vec<_>>();
    let objective = points
        .iter()
        .zip(&best.assignment)
        .map(|(p, &a)| dot(p.as_ref(), &centroids[a]))
        .sum();
    Ok(Clustering { assignment: best.assignment, centroids, objective })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenizerConfig {
    /// Code length.
    pub l: usize,
    /// Token range.
    pub v: usize,
    pub seed: u64,
    pub kmeans_iters: usize,
    pub restarts: usize,
}

impl TokenizerConfig {
    pub fn new(l: usize, v: usize) -> Self {
        Self { l, v, seed: 0, kmeans_iters: 100, restarts: 8 }
    }

    /// Configuration with `(l, v)` picked by [`suggest_length`].
    pub fn auto(m: usize) -> Self {
        let s = suggest_length(m);
        Self::new(s.l, s.v)
    }

    pub fn capacity(&self) -> u128 {
        capacity(self.v, self.l)
    }
}

fn capacity(v: usize, l: usize) -> u128 {
    let mut c: u128 = 1;
    for _ in 0..l {
        c = c.saturating_mul(v as u128);
    }
    c
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TreeChild {
    Node(TreeNode),
    Leaf(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    /// Unit-norm direction of the node's members.
    pub centroid: Vec<f64>,
    /// Number of identities below this node.
    pub size: usize,
    /// Children keyed by token, in ascending token order.
    pub children: Vec<(u32, TreeChild)>,
}

/// Code tree over `m` identities with depth `l` and branching `v`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodeTree {
    l: usize,
    v: usize,
    m: usize,
    root: TreeNode,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdentityCode {
    pub identity: usize,
    pub tokens: Vec<u32>,
}

/// Identity codes indexed by identity label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeBook {
    pub l: usize,
    pub v: usize,
    codes: Vec<Vec<u32>>,
}

impl CodeBook {
    pub fn from_codes(l: usize, v: usize, codes: Vec<Vec<u32>>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for (y, c) in codes.iter().enumerate() {
            if c.len() != l {
                return Err(GifError::DimensionMismatch { expected: l, got: c.len() });
            }
            for (position, &token) in c.iter().enumerate() {
                if token as usize >= v {
                    return Err(GifError::TokenRange { position, token, v });
                }
            }
            if !seen.insert(c.clone()) {
                return Err(GifError::Inconsistent(format!("identity {y} repeats a code")));
            }
        }
        Ok(Self { l, v, codes })
    }

    pub fn m(&self) -> usize {
        self.codes.len()
    }

    pub fn get(&self, identity: usize) -> Option<&[u32]> {
        self.codes.get(identity).map(|c| c.as_slice())
    }

    pub fn code(&self, identity: usize) -> Option<IdentityCode> {
        self.get(identity).map(|t| IdentityCode { identity, tokens: t.to_vec() })
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &[u32])> {
        self.codes.iter().enumerate().map(|(y, c)| (y, c.as_slice()))
    }
}

struct BuildCtx<'a, P> {
    points: &'a [P],
    cfg: &'a TokenizerConfig,
}

impl<P: AsRef<[f64]> + Sync> BuildCtx<'_, P> {
    fn centroid(&self, members: &[usize]) -> Vec<f64> {
        let d = self.points[members[0]].as_ref().len();
        let mut sum = vec![0.0; d];
        for &i in members {
            add_into(&mut sum, self.points[i].as_ref(), 1.0);
        }
        direction(&sum, self.points[members[0]].as_ref())
    }

    fn build(&self, members: Vec<usize>, depth: usize, path_seed: u64) -> Result<TreeNode> {
        let l = self.cfg.l;
        let v = self.cfg.v;
        let centroid = self.centroid(&members);
        let size = members.len();

        if depth + 1 == l {
            // Leaf tokens by descending similarity to the node centroid.
            let mut ranked: Vec<(f64, usize)> =
                members.iter().map(|&i| (dot(self.points[i].as_ref(), &centroid), i)).collect();
            ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let children = ranked
                .into_iter()
                .enumerate()
                .map(|(token, (_, i))| (token as u32, TreeChild::Leaf(i)))
                .collect();
            return Ok(TreeNode { centroid, size, children });
        }

        let child_cap = capacity(v, l - depth - 1);
        let k = v.min(size);
        let local: Vec<&[f64]> = members.iter().map(|&i| self.points[i].as_ref()).collect();
        let kcfg = KMeansConfig {
            max_iters: self.cfg.kmeans_iters,
            restarts: self.cfg.restarts,
            seed: path_seed,
        };
        let mut clustering = spherical_kmeans(&local, k, &kcfg)?;
        rebalance(&local, &mut clustering, child_cap);

        let mut groups: Vec<Vec<usize>> = vec![Vec::new(); k];
        for (pos, &c) in clustering.assignment.iter().enumerate() {
            groups[c].push(members[pos]);
        }
        let children = groups
            .into_par_iter()
            .enumerate()
            .filter(|(_, g)| !g.is_empty())
            .map(|(token, group)| {
                let seed = splitmix(path_seed ^ splitmix(token as u64 + 1));
                self.build(group, depth + 1, seed).map(|n| (token as u32, TreeChild::Node(n)))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TreeNode { centroid, size, children })
    }
}

/// Moves members out of clusters above `cap`, always choosing the member most
/// similar to a centroid that still has room.
fn rebalance(points: &[&[f64]], clustering: &mut Clustering, cap: u128) {
    let k = clustering.centroids.len();
    let mut sizes = vec![0u128; k];
    for &a in &clustering.assignment {
        sizes[a] += 1;
    }
    if sizes.iter().all(|&s| s <= cap) {
        return;
    }
    while sizes.iter().any(|&s| s > cap) {
        let mut best: Option<(f64, usize, usize)> = None;
        for (i, &a) in clustering.assignment.iter().enumerate() {
            if sizes[a] <= cap {
                continue;
            }
            for b in 0..k {
                if sizes[b] >= cap {
                    continue;
                }
                let s = dot(points[i], &clustering.centroids[b]);
                if best.is_none_or(|(bs, _, _)| s > bs) {
                    best = Some((s, i, b));
                }
            }
        }
        let Some((_, i, b)) = best else { break };
        sizes[clustering.assignment[i]] -= 1;
        sizes[b] += 1;
        clustering.assignment[i] = b;
    }
    let d = points[0].len();
    let mut sums = vec![vec![0.0; d]; k];
    for (i, &a) in clustering.assignment.iter().enumerate() {
        add_into(&mut sums[a], points[i], 1.0);
    }
    for (c, s) in sums.iter().enumerate() {
        if let Some(first) = clustering.assignment.iter().position(|&a| a == c) {
            clustering.centroids[c] = direction(s, points[first]);
        }
    }
    clustering.objective =
        points.iter().zip(&clustering.assignment).map(|(p, &a)| dot(p, &clustering.centroids[a])).sum();
}

/// Builds the code tree over the rows of `h`.
pub fn build_code_tree(h: &CodeVectorMatrix, cfg: &TokenizerConfig) -> Result<CodeTree> {
    let rows: Vec<&[f64]> = h.rows().collect();
    CodeTree::build(&rows, cfg)
}

impl CodeTree {
    /// Builds a tree over arbitrary unit-norm points; identity `i` is
    /// `points[i]`.
    pub fn build<P: AsRef<[f64]> + Sync>(points: &[P], cfg: &TokenizerConfig) -> Result<Self> {
        let m = points.len();
        if cfg.l == 0 {
            return Err(GifError::config("code length l must be at least 1"));
        }
        if cfg.v < 2 {
            return Err(GifError::config("token range v must be at least 2"));
        }
        if m == 0 {
            return Err(GifError::Degenerate("no identities to tokenize".into()));
        }
        if (m as u128) > cfg.capacity() {
            return Err(GifError::Capacity { m, v: cfg.v, l: cfg.l });
        }
        let ctx = BuildCtx { points, cfg };
        let root = ctx.build((0..m).collect(), 0, splitmix(cfg.seed))?;
        Self::from_root(cfg.l, cfg.v, m, root)
    }

    /// Wraps a root node after checking the structural invariants: uniform
    /// depth `l`, per-node capacity, tokens in range and every identity in
    /// exactly one leaf.
    pub fn from_root(l: usize, v: usize, m: usize, root: TreeNode) -> Result<Self> {
        let mut seen = vec![false; m];
        validate_node(&root, 0, l, v, &mut seen)?;
        if let Some(y) = seen.iter().position(|s| !s) {
            return Err(GifError::Inconsistent(format!("identity {y} has no leaf")));
        }
        Ok(Self { l, v, m, root })
    }

    pub fn l(&self) -> usize {
        self.l
    }

    pub fn v(&self) -> usize {
        self.v
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn root(&self) -> &TreeNode {
        &self.root
    }

    /// Same tree with leaf identity `y` replaced by `perm[y]`.
    pub fn permute_identities(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.m {
            return Err(GifError::DimensionMismatch { expected: self.m, got: perm.len() });
        }
        fn walk(node: &mut TreeNode, perm: &[usize]) {
            for (_, child) in node.children.iter_mut() {
                match child {
                    TreeChild::Node(n) => walk(n, perm),
                    TreeChild::Leaf(y) => *y = perm[*y],
                }
            }
        }
        let mut root = self.root.clone();
        walk(&mut root, perm);
        Self::from_root(self.l, self.v, self.m, root)
    }

    /// Every internal node with its depth, in depth-first order.
    pub fn nodes(&self) -> Vec<(usize, &TreeNode)> {
        fn walk<'a>(n: &'a TreeNode, depth: usize, out: &mut Vec<(usize, &'a TreeNode)>) {
            out.push((depth, n));
            for (_, c) in &n.children {
                if let TreeChild::Node(child) = c {
                    walk(child, depth + 1, out);
                }
            }
        }
        let mut out = Vec::new();
        walk(&self.root, 0, &mut out);
        out
    }
}

fn validate_node(node: &TreeNode, depth: usize, l: usize, v: usize, seen: &mut [bool]) -> Result<usize> {
    let cap = capacity(v, l - depth);
    if node.children.len() > v {
        return Err(GifError::Inconsistent(format!(
            "node at depth {depth} has {} children, more than v={v}",
            node.children.len()
        )));
    }
    let mut size = 0;
    let mut last: Option<u32> = None;
    for (token, child) in &node.children {
        if *token as usize >= v {
            return Err(GifError::TokenRange { position: depth, token: *token, v });
        }
        if last.is_some_and(|t| t >= *token) {
            return Err(GifError::Inconsistent(format!("unsorted or repeated token at depth {depth}")));
        }
        last = Some(*token);
        match child {
            TreeChild::Node(n) if depth + 1 < l => size += validate_node(n, depth + 1, l, v, seen)?,
            TreeChild::Leaf(y) if depth + 1 == l => {
                if *y >= seen.len() {
                    return Err(GifError::IndexOutOfRange { index: *y, len: seen.len() });
                }
                if std::mem::replace(&mut seen[*y], true) {
                    return Err(GifError::Inconsistent(format!("identity {y} appears twice")));
                }
                size += 1;
            }
            _ => {
                return Err(GifError::Inconsistent(format!(
                    "root-to-leaf path length differs from l={l} at depth {depth}"
                )))
            }
        }
    }
    if size as u128 > cap {
        return Err(GifError::NodeOverCapacity { depth, size, cap: cap as usize });
    }
    if size != node.size {
        return Err(GifError::Inconsistent(format!(
            "node at depth {depth} records size {} but holds {size}",
            node.size
        )));
    }
    Ok(size)
}

/// Collects the root-to-leaf token path of every identity.
pub fn assign_codes(tree: &CodeTree) -> CodeBook {
    fn walk(node: &TreeNode, prefix: &mut Vec<u32>, out: &mut [Vec<u32>]) {
        for (token, child) in &node.children {
            prefix.push(*token);
            match child {
                TreeChild::Node(n) => walk(n, prefix, out),
                TreeChild::Leaf(y) => out[*y] = prefix.clone(),
            }
            prefix.pop();
        }
    }
    let mut codes = vec![Vec::new(); tree.m];
    walk(&tree.root, &mut Vec::with_capacity(tree.l), &mut codes);
    CodeBook { l: tree.l, v: tree.v, codes }
}

/// Identity at the end of `tokens`, or `None` when the path leaves the
/// populated part of the tree.
pub fn decode(tokens: &[u32], tree: &CodeTree) -> Result<Option<usize>> {
    if tokens.len() != tree.l {
        return Err(GifError::DimensionMismatch { expected: tree.l, got: tokens.len() });
    }
    for (position, &token) in tokens.iter().enumerate() {
        if token as usize >= tree.v {
            return Err(GifError::TokenRange { position, token, v: tree.v });
        }
    }
    let mut node = &tree.root;
    for &token in tokens {
        let Ok(idx) = node.children.binary_search_by_key(&token, |(t, _)| *t) else {
            return Ok(None);
        };
        match &node.children[idx].1 {
            TreeChild::Node(n) => node = n,
            TreeChild::Leaf(y) => return Ok(Some(*y)),
        }
    }
    Ok(None)
}

/// Band of preferred token ranges, `low < v <= high`.
pub const TOKEN_RANGE_BAND: (usize, usize) = (5, 20);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LengthChoice {
    pub l: usize,
    pub v: usize,
    /// False when no code length puts `v` inside the band and the closest
    /// length was returned instead.
    pub in_band: bool,
}

/// Smallest `v` with `v^l >= m`.
pub fn min_token_range(m: usize, l: usize) -> usize {
    let guess = (m as f64).powf(1.0 / l as f64).round().max(1.0) as usize;
    let mut v = guess.saturating_sub(1).max(1);
    while capacity(v, l) < m as u128 {
        v += 1;
    }
    v
}

/// Picks the shortest code length `l >= 2` whose minimal token range falls in
/// [`TOKEN_RANGE_BAND`]; otherwise the length whose range is nearest to it.
pub fn suggest_length(m: usize) -> LengthChoice {
    let (low, high) = TOKEN_RANGE_BAND;
    let m = m.max(2);
    let mut best: Option<(usize, LengthChoice)> = None;
    let mut l = 2;
    loop {
        let v = min_token_range(m, l).max(2);
        if v > low && v <= high {
            return LengthChoice { l, v, in_band: true };
        }
        let gap = if v <= low { low + 1 - v } else { v - high };
        if best.is_none_or(|(g, _)| gap < g) {
            best = Some((gap, LengthChoice { l, v, in_band: false }));
        }
        if v <= 2 {
            break;
        }
        l += 1;
    }
    let choice = best.unwrap().1;
    log::warn!("no code length puts v in ({low}, {high}] for m={m}; using l={}, v={}", choice.l, choice.v);
    choice
}
