//! Primal-dual min-cost flow: Dijkstra on reduced costs, then blocking
//! augmentation along zero-reduced-cost paths.
//!
//! Arc costs must be nonnegative when added, so zero potentials are feasible
//! from the start. Ties in Dijkstra are broken by node index and arcs are
//! scanned in insertion order, which makes the result a deterministic function
//! of the order in which arcs were added.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

#[derive(Debug, Clone)]
struct Arc {
    to: usize,
    cap: i64,
    cost: i64,
    rev: usize,
}

#[derive(Debug, Clone)]
pub struct MinCostFlow {
    adj: Vec<Vec<Arc>>,
    arc_pos: Vec<(usize, usize)>,
    original_cap: Vec<i64>,
}

impl MinCostFlow {
    pub fn new(n_nodes: usize) -> Self {
        Self {
            adj: vec![Vec::new(); n_nodes],
            arc_pos: Vec::new(),
            original_cap: Vec::new(),
        }
    }

    /// Adds an arc and returns its handle.
    pub fn add_arc(&mut self, from: usize, to: usize, cap: i64, cost: i64) -> usize {
        assert!(cost >= 0, "arc costs must be nonnegative");
        assert!(from != to, "self loops are not supported");
        let fwd = self.adj[from].len();
        let bwd = self.adj[to].len();
        self.adj[from].push(Arc {
            to,
            cap,
            cost,
            rev: bwd,
        });
        self.adj[to].push(Arc {
            to: from,
            cap: 0,
            cost: -cost,
            rev: fwd,
        });
        self.arc_pos.push((from, fwd));
        self.original_cap.push(cap);
        self.arc_pos.len() - 1
    }

    /// Flow currently carried by an arc.
    pub fn flow_on(&self, handle: usize) -> i64 {
        let (u, i) = self.arc_pos[handle];
        self.original_cap[handle] - self.adj[u][i].cap
    }

    /// Sends up to `limit` units from `source` to `sink` at minimum cost.
    /// Returns `(flow, cost)`.
    ///
    /// Each phase runs one Dijkstra, updates the potentials, then augments
    /// along every path of zero reduced cost it can find by depth-first
    /// search before searching again.
    pub fn run(&mut self, source: usize, sink: usize, limit: i64) -> (i64, i64) {
        let n = self.adj.len();
        let mut potential = vec![0i64; n];
        let mut dist = vec![i64::MAX; n];
        let mut heap = BinaryHeap::new();
        let (mut flow, mut cost) = (0i64, 0i64);

        while flow < limit {
            dist.fill(i64::MAX);
            dist[source] = 0;
            heap.clear();
            heap.push(Reverse((0i64, source)));
            while let Some(Reverse((d, u))) = heap.pop() {
                if d > dist[u] {
                    continue;
                }
                for arc in &self.adj[u] {
                    if arc.cap <= 0 {
                        continue;
                    }
                    let nd = d + arc.cost + potential[u] - potential[arc.to];
                    if nd < dist[arc.to] {
                        dist[arc.to] = nd;
                        heap.push(Reverse((nd, arc.to)));
                    }
                }
            }
            if dist[sink] == i64::MAX {
                break;
            }
            // Capping at dist[sink] keeps reduced costs nonnegative for
            // nodes that were not settled before the sink.
            let reach = dist[sink];
            for v in 0..n {
                potential[v] += dist[v].min(reach);
            }
            let (pushed, paid) = self.augment_admissible(source, sink, &potential, limit - flow);
            flow += pushed;
            cost += paid;
        }
        (flow, cost)
    }

    fn augment_admissible(
        &mut self,
        source: usize,
        sink: usize,
        potential: &[i64],
        mut budget: i64,
    ) -> (i64, i64) {
        let n = self.adj.len();
        let mut next_arc = vec![0usize; n];
        let mut dead = vec![false; n];
        let mut on_path = vec![false; n];
        let mut path: Vec<(usize, usize)> = Vec::new();
        let (mut flow, mut cost) = (0i64, 0i64);
        let mut u = source;
        on_path[source] = true;
        while budget > 0 && !dead[source] {
            if u == sink {
                let push = path
                    .iter()
                    .map(|&(v, i)| self.adj[v][i].cap)
                    .min()
                    .expect("path is nonempty")
                    .min(budget);
                for &(v, i) in &path {
                    let (to, rev) = (self.adj[v][i].to, self.adj[v][i].rev);
                    self.adj[v][i].cap -= push;
                    self.adj[to][rev].cap += push;
                    cost += push * self.adj[v][i].cost;
                }
                flow += push;
                budget -= push;
                for &(v, _) in &path {
                    on_path[v] = false;
                }
                on_path[sink] = false;
                path.clear();
                u = source;
                on_path[source] = true;
                continue;
            }
            let mut advanced = false;
            while next_arc[u] < self.adj[u].len() {
                let arc = &self.adj[u][next_arc[u]];
                let v = arc.to;
                if arc.cap > 0
                    && !dead[v]
                    && !on_path[v]
                    && arc.cost + potential[u] - potential[v] == 0
                {
                    path.push((u, next_arc[u]));
                    on_path[v] = true;
                    u = v;
                    advanced = true;
                    break;
                }
                next_arc[u] += 1;
            }
            if !advanced {
                dead[u] = true;
                on_path[u] = false;
                match path.pop() {
                    Some((prev, _)) => {
                        next_arc[prev] += 1;
                        u = prev;
                    }
                    None => break,
                }
            }
        }
        (flow, cost)
    }
}
