//! Leiden modularity optimization: fast local moving, refinement within
//! communities, aggregation on the refined partition, repeated until a
//! pass no longer improves quality. Small graphs get an extra polish and
//! several seeded restarts; the best partition wins.

use std::collections::{BTreeSet, VecDeque};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Partition, ProximityGraph};

const EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LeidenConfig {
    pub resolution: f64,
    pub seed: u64,
    /// Temperature of the randomized merge in the refinement phase, in
    /// edge-weight units.
    pub randomness: f64,
    pub max_passes: usize,
    /// Independent runs from the singleton partition; the best is kept.
    pub restarts: usize,
    /// Graphs up to this many nodes are polished with single-node sweeps and
    /// merge probes. Both are superlinear, so large graphs skip them.
    pub fine_tune_max_nodes: usize,
}

impl Default for LeidenConfig {
    fn default() -> Self {
        LeidenConfig {
            resolution: 1.0,
            seed: 0,
            randomness: 0.01,
            max_passes: 50,
            restarts: 8,
            fine_tune_max_nodes: 64,
        }
    }
}

#[derive(Debug, Clone)]
struct Net {
    adj: Vec<Vec<(usize, f64)>>,
    /// Weight of edges collapsed inside the node, each counted once.
    self_loop: Vec<f64>,
    degree: Vec<f64>,
    two_m: f64,
}

impl Net {
    fn from_graph(graph: &ProximityGraph) -> Self {
        let n = graph.node_count();
        let mut adj = vec![Vec::new(); n];
        for &(a, b, w) in &graph.edges {
            if w > 0.0 && a != b {
                adj[a].push((b, w));
                adj[b].push((a, w));
            }
        }
        Self::finish(adj, vec![0.0; n])
    }

    fn finish(mut adj: Vec<Vec<(usize, f64)>>, self_loop: Vec<f64>) -> Self {
        for list in &mut adj {
            list.sort_unstable_by_key(|&(u, _)| u);
        }
        let degree: Vec<f64> = adj
            .iter()
            .zip(&self_loop)
            .map(|(list, s)| list.iter().map(|&(_, w)| w).sum::<f64>() + 2.0 * s)
            .collect();
        let two_m = degree.iter().sum();
        Net {
            adj,
            self_loop,
            degree,
            two_m,
        }
    }

    fn n(&self) -> usize {
        self.adj.len()
    }

    fn aggregate(&self, labels: &[usize], count: usize) -> Net {
        let mut self_loop = vec![0.0; count];
        let mut acc: Vec<std::collections::BTreeMap<usize, f64>> = vec![Default::default(); count];
        for v in 0..self.n() {
            let cv = labels[v];
            self_loop[cv] += self.self_loop[v];
            for &(u, w) in &self.adj[v] {
                if u < v {
                    continue;
                }
                let cu = labels[u];
                if cu == cv {
                    self_loop[cv] += w;
                } else {
                    *acc[cv].entry(cu).or_default() += w;
                    *acc[cu].entry(cv).or_default() += w;
                }
            }
        }
        let adj = acc.into_iter().map(|m| m.into_iter().collect()).collect();
        Net::finish(adj, self_loop)
    }

    fn quality(&self, labels: &[usize], gamma: f64) -> f64 {
        if self.two_m <= 0.0 {
            return 0.0;
        }
        let count = labels.iter().max().map_or(0, |m| m + 1);
        let mut internal = vec![0.0; count];
        let mut total = vec![0.0; count];
        for v in 0..self.n() {
            let c = labels[v];
            total[c] += self.degree[v];
            internal[c] += 2.0 * self.self_loop[v];
            for &(u, w) in &self.adj[v] {
                if labels[u] == c {
                    internal[c] += w;
                }
            }
        }
        internal
            .iter()
            .zip(&total)
            .map(|(i, t)| i / self.two_m - gamma * (t / self.two_m).powi(2))
            .sum()
    }
}

/// Relabels to `0..count` in order of first appearance.
fn densify(labels: &mut [usize]) -> usize {
    let mut map = vec![usize::MAX; labels.len().max(1) + labels.iter().copied().max().unwrap_or(0) + 1];
    let mut next = 0;
    for l in labels.iter_mut() {
        if map[*l] == usize::MAX {
            map[*l] = next;
            next += 1;
        }
        *l = map[*l];
    }
    next
}

/// Queue-based local moving. Returns true if any node moved.
fn move_nodes_fast(net: &Net, comm: &mut [usize], gamma: f64, rng: &mut ChaCha8Rng) -> bool {
    let n = net.n();
    if net.two_m <= 0.0 || n == 0 {
        return false;
    }
    let mut tot = vec![0.0; n];
    let mut size = vec![0usize; n];
    for v in 0..n {
        tot[comm[v]] += net.degree[v];
        size[comm[v]] += 1;
    }
    let mut empty: Vec<usize> = (0..n).filter(|&c| size[c] == 0).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut queue: VecDeque<usize> = order.into();
    let mut in_queue = vec![true; n];
    let mut weight_to = vec![0.0; n];
    let mut seen = vec![false; n];
    let mut touched = Vec::new();
    let mut moved = false;

    while let Some(v) = queue.pop_front() {
        in_queue[v] = false;
        let old = comm[v];
        for &(u, w) in &net.adj[v] {
            let c = comm[u];
            if !seen[c] {
                seen[c] = true;
                touched.push(c);
            }
            weight_to[c] += w;
        }
        tot[old] -= net.degree[v];
        size[old] -= 1;
        let scale = gamma * net.degree[v] / net.two_m;

        let stay_gain = weight_to[old] - scale * tot[old];
        let mut best = old;
        let mut best_gain = stay_gain;
        let mut ties = 0u32;
        for &c in &touched {
            if c == old {
                continue;
            }
            let gain = weight_to[c] - scale * tot[c];
            if gain <= stay_gain + EPS {
                continue;
            }
            if best == old || gain > best_gain + EPS {
                best = c;
                best_gain = gain;
                ties = 1;
            } else if gain >= best_gain - EPS {
                // uniform choice among equally good targets
                ties += 1;
                if rng.random_range(0..ties) == 0 {
                    best = c;
                }
            }
        }
        if best_gain < -EPS && size[old] > 0 {
            if let Some(c) = empty.pop() {
                best = c;
            }
        }

        tot[best] += net.degree[v];
        size[best] += 1;
        comm[v] = best;
        if best != old {
            moved = true;
            if size[old] == 0 {
                empty.push(old);
            }
            for &(u, _) in &net.adj[v] {
                if comm[u] != best && !in_queue[u] {
                    in_queue[u] = true;
                    queue.push_back(u);
                }
            }
        }
        for c in touched.drain(..) {
            weight_to[c] = 0.0;
            seen[c] = false;
        }
    }
    moved
}

/// Splits every community of `comm` into well-connected sub-communities by
/// randomized greedy merging of singletons.
fn refine(net: &Net, comm: &[usize], count: usize, cfg: &LeidenConfig, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = net.n();
    let gamma = cfg.resolution;
    let mut refined: Vec<usize> = (0..n).collect();
    let mut rtot = net.degree.clone();
    let mut rsize = vec![1usize; n];
    let mut community_tot = vec![0.0; count];
    let mut ext = vec![0.0; n];
    for v in 0..n {
        community_tot[comm[v]] += net.degree[v];
        ext[v] = net.adj[v]
            .iter()
            .filter(|&&(u, _)| comm[u] == comm[v])
            .map(|&(_, w)| w)
            .sum();
    }
    if net.two_m <= 0.0 {
        return refined;
    }
    let mut rext = ext.clone();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut weight_to = vec![0.0; n];
    let mut seen = vec![false; n];
    let mut touched = Vec::new();

    for v in order {
        let s = comm[v];
        let k_s = community_tot[s];
        if rsize[refined[v]] != 1 {
            continue;
        }
        if ext[v] < gamma * net.degree[v] * (k_s - net.degree[v]) / net.two_m - EPS {
            continue;
        }
        for &(u, w) in &net.adj[v] {
            if comm[u] != s || u == v {
                continue;
            }
            let c = refined[u];
            if !seen[c] {
                seen[c] = true;
                touched.push(c);
            }
            weight_to[c] += w;
        }
        let own = refined[v];
        let scale = gamma * net.degree[v] / net.two_m;
        let mut options: Vec<(usize, f64)> = vec![(own, 0.0)];
        for &c in &touched {
            if c == own {
                continue;
            }
            let well_connected = rext[c] >= gamma * rtot[c] * (k_s - rtot[c]) / net.two_m - EPS;
            let gain = weight_to[c] - scale * rtot[c];
            if well_connected && gain >= 0.0 {
                options.push((c, gain));
            }
        }
        let chosen = if options.len() == 1 {
            own
        } else {
            let top = options.iter().map(|o| o.1).fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = options
                .iter()
                .map(|&(_, g)| ((g - top) / cfg.randomness).exp())
                .collect();
            let total: f64 = weights.iter().sum();
            let mut r = rng.random::<f64>() * total;
            let mut pick = options[options.len() - 1].0;
            for (&(c, _), w) in options.iter().zip(&weights) {
                if r < *w {
                    pick = c;
                    break;
                }
                r -= w;
            }
            pick
        };
        if chosen != own {
            rext[chosen] = rext[chosen] + ext[v] - 2.0 * weight_to[chosen];
            rtot[chosen] += net.degree[v];
            rsize[chosen] += 1;
            rsize[own] = 0;
            refined[v] = chosen;
        }
        for c in touched.drain(..) {
            weight_to[c] = 0.0;
            seen[c] = false;
        }
    }
    refined
}

fn leiden_pass(base: &Net, init: &[usize], cfg: &LeidenConfig, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut net = base.clone();
    let mut comm = init.to_vec();
    let mut members: Vec<Vec<usize>> = (0..base.n()).map(|v| vec![v]).collect();
    loop {
        move_nodes_fast(&net, &mut comm, cfg.resolution, rng);
        let count = densify(&mut comm);
        if count == net.n() {
            break;
        }
        let mut refined = refine(&net, &comm, count, cfg, rng);
        let mut rcount = densify(&mut refined);
        if rcount == net.n() {
            // refinement found nothing to merge; fall back to the unrefined
            // partition so the level still shrinks
            refined = comm.clone();
            rcount = count;
        }
        let next = net.aggregate(&refined, rcount);
        let mut next_comm = vec![0; rcount];
        let mut next_members = vec![Vec::new(); rcount];
        for v in 0..net.n() {
            next_comm[refined[v]] = comm[v];
            next_members[refined[v]].extend_from_slice(&members[v]);
        }
        net = next;
        comm = next_comm;
        members = next_members;
    }
    let mut labels = vec![0; base.n()];
    for (agg, originals) in members.iter().enumerate() {
        for &v in originals {
            labels[v] = comm[agg];
        }
    }
    labels
}

/// Kernighan-Lin style sweeps: every node moves once to its best target
/// (possibly lowering quality), then the sweep is rolled back to its best
/// prefix. Repeats while a sweep gains.
fn fine_tune(net: &Net, labels: &mut [usize], gamma: f64, rng: &mut ChaCha8Rng) {
    let n = net.n();
    if n < 2 || net.two_m <= 0.0 {
        return;
    }
    let two_m = net.two_m;
    let mut count = densify(labels);
    for _sweep in 0..50 {
        // one spare label so a node can always split off on its own
        let cap = count.max(1) + n;
        let mut tot = vec![0.0; cap];
        let mut size = vec![0usize; cap];
        for v in 0..n {
            tot[labels[v]] += net.degree[v];
            size[labels[v]] += 1;
        }
        let start = labels.to_vec();
        let mut moved = vec![false; n];
        let mut moves: Vec<(usize, usize)> = Vec::new();
        let mut gain = 0.0;
        let mut best_gain = 0.0;
        let mut best_len = 0;
        let mut weight_to = vec![0.0; cap];
        for _ in 0..n {
            let mut pick: Option<(f64, usize, usize)> = None;
            let mut ties = 0u32;
            let mut offer = |d: f64, v: usize, b: usize, pick: &mut Option<(f64, usize, usize)>| match pick {
                Some(p) if d < p.0 - EPS => {}
                Some(p) if d <= p.0 + EPS => {
                    ties += 1;
                    if rng.random_range(0..ties) == 0 {
                        *pick = Some((d, v, b));
                    }
                }
                _ => {
                    ties = 1;
                    *pick = Some((d, v, b));
                }
            };
            let empty = (0..cap).find(|&c| size[c] == 0);
            for v in (0..n).filter(|&v| !moved[v]) {
                let a = labels[v];
                let k = net.degree[v];
                let mut targets = Vec::new();
                for &(u, w) in &net.adj[v] {
                    if weight_to[labels[u]] == 0.0 {
                        targets.push(labels[u]);
                    }
                    weight_to[labels[u]] += w;
                }
                let w_a = weight_to[a];
                let delta =
                    |b: usize, w_b: f64| (2.0 * (w_b - w_a) - 2.0 * gamma * k * (tot[b] - tot[a] + k) / two_m) / two_m;
                if size[a] > 1 {
                    if let Some(e) = empty {
                        offer(delta(e, 0.0), v, e, &mut pick);
                    }
                }
                for &b in &targets {
                    if b != a {
                        offer(delta(b, weight_to[b]), v, b, &mut pick);
                    }
                }
                for &b in &targets {
                    weight_to[b] = 0.0;
                }
            }
            let Some((d, v, b)) = pick else { break };
            let a = labels[v];
            tot[a] -= net.degree[v];
            size[a] -= 1;
            tot[b] += net.degree[v];
            size[b] += 1;
            labels[v] = b;
            moved[v] = true;
            moves.push((v, b));
            gain += d;
            if gain > best_gain + EPS {
                best_gain = gain;
                best_len = moves.len();
            }
        }
        labels.copy_from_slice(&start);
        for &(v, b) in &moves[..best_len] {
            labels[v] = b;
        }
        count = densify(labels);
        if best_len == 0 {
            break;
        }
    }
}

/// Tries merging each adjacent pair of communities followed by fine-tuning;
/// keeps the first merge that raises quality and starts over.
fn merge_probe(net: &Net, labels: &mut Vec<usize>, gamma: f64, rng: &mut ChaCha8Rng) {
    let mut quality = net.quality(labels, gamma);
    loop {
        densify(labels);
        let mut pairs = BTreeSet::new();
        for v in 0..net.n() {
            for &(u, _) in &net.adj[v] {
                let (a, b) = (labels[v], labels[u]);
                if a < b {
                    pairs.insert((a, b));
                }
            }
        }
        let mut improved = false;
        for (a, b) in pairs {
            let mut cand: Vec<usize> = labels.iter().map(|&l| if l == b { a } else { l }).collect();
            fine_tune(net, &mut cand, gamma, rng);
            let q = net.quality(&cand, gamma);
            if q > quality + EPS {
                *labels = cand;
                quality = q;
                improved = true;
                break;
            }
        }
        if !improved {
            return;
        }
    }
}

/// Splits communities that are not connected through positive edges.
fn split_disconnected(net: &Net, labels: &[usize]) -> Vec<usize> {
    let n = net.n();
    let mut out = vec![usize::MAX; n];
    let mut next = 0;
    for start in 0..n {
        if out[start] != usize::MAX {
            continue;
        }
        out[start] = next;
        let mut stack = vec![start];
        while let Some(v) = stack.pop() {
            for &(u, _) in &net.adj[v] {
                if out[u] == usize::MAX && labels[u] == labels[start] {
                    out[u] = next;
                    stack.push(u);
                }
            }
        }
        next += 1;
    }
    out
}

pub fn detect_communities(graph: &ProximityGraph, resolution: f64, seed: u64) -> Partition {
    detect_communities_with(
        graph,
        &LeidenConfig {
            resolution,
            seed,
            ..Default::default()
        },
    )
}

pub fn detect_communities_with(graph: &ProximityGraph, cfg: &LeidenConfig) -> Partition {
    let net = Net::from_graph(graph);
    let n = net.n();
    if n == 0 {
        return Partition::singletons(0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(f64, Vec<usize>)> = None;
    for _ in 0..cfg.restarts.max(1) {
        let mut labels: Vec<usize> = (0..n).collect();
        let mut quality = net.quality(&labels, cfg.resolution);
        let mut passes = 0;
        loop {
            while passes < cfg.max_passes.max(1) {
                passes += 1;
                let mut candidate = leiden_pass(&net, &labels, cfg, &mut rng);
                densify(&mut candidate);
                let q = net.quality(&candidate, cfg.resolution);
                if q > quality + EPS {
                    labels = candidate;
                    quality = q;
                } else {
                    break;
                }
            }
            if n > cfg.fine_tune_max_nodes || passes >= cfg.max_passes.max(1) {
                break;
            }
            fine_tune(&net, &mut labels, cfg.resolution, &mut rng);
            merge_probe(&net, &mut labels, cfg.resolution, &mut rng);
            let q = net.quality(&labels, cfg.resolution);
            if q > quality + EPS {
                quality = q;
            } else {
                break;
            }
        }
        let labels = split_disconnected(&net, &labels);
        let quality = net.quality(&labels, cfg.resolution);
        if best.as_ref().is_none_or(|(q, _)| quality > q + EPS) {
            best = Some((quality, labels));
        }
    }
    let (_, labels) = best.expect("at least one run");
    Partition::from_labels(&labels)
}
