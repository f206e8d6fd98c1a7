//! Selection diagrams: parsing, d-separation, backdoor adjustment sets and
//! transportability checks, plus a finite discrete SCM for numeric checks.

mod discrete;
mod dsl;
mod transport;

use std::collections::{BTreeMap, VecDeque};

use crate::error::{Error, Result};

pub use discrete::{eval_discrete_scm, DiscreteScm, JointTable, MAX_JOINT_STATES};
pub use dsl::parse_graph_dsl;
pub use transport::{
    find_transport, s_admissible, transport_formula, TransportStatus, TransportVerdict,
    MAX_SEARCH_NODES,
};

/// A DAG whose nodes may be latent, with optional selection, treatment and
/// outcome roles. Bidirected input edges become explicit latent parents.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectionDiagram {
    names: Vec<String>,
    index: BTreeMap<String, usize>,
    parents: Vec<Vec<usize>>,
    children: Vec<Vec<usize>>,
    latent: Vec<bool>,
    selection: Option<usize>,
    treatment: Option<usize>,
    outcome: Option<usize>,
}

impl Default for SelectionDiagram {
    fn default() -> Self {
        Self::new()
    }
}

impl SelectionDiagram {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            index: BTreeMap::new(),
            parents: Vec::new(),
            children: Vec::new(),
            latent: Vec::new(),
            selection: None,
            treatment: None,
            outcome: None,
        }
    }

    /// Builds a validated diagram from plain directed edges.
    pub fn from_edges(nodes: &[&str], edges: &[(&str, &str)]) -> Result<Self> {
        let mut g = Self::new();
        for n in nodes {
            g.add_node(n);
        }
        for (a, b) in edges {
            g.add_node(a);
            g.add_node(b);
            g.add_edge(a, b)?;
        }
        g.check_acyclic()?;
        Ok(g)
    }

    /// Adds a node if absent and returns its id.
    pub fn add_node(&mut self, name: &str) -> usize {
        if let Some(&i) = self.index.get(name) {
            return i;
        }
        let i = self.names.len();
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), i);
        self.parents.push(Vec::new());
        self.children.push(Vec::new());
        self.latent.push(false);
        i
    }

    /// Adds `from -> to`. Both nodes must exist. Acyclicity is checked by
    /// [`SelectionDiagram::check_acyclic`].
    pub fn add_edge(&mut self, from: &str, to: &str) -> Result<()> {
        let (a, b) = (self.id(from)?, self.id(to)?);
        if a == b {
            return Err(Error::CycleDetected(from.to_string()));
        }
        if self.children[a].contains(&b) {
            return Err(Error::DuplicateEdge(from.to_string(), to.to_string()));
        }
        self.children[a].push(b);
        self.parents[b].push(a);
        Ok(())
    }

    pub fn set_latent(&mut self, name: &str, latent: bool) -> Result<()> {
        let i = self.id(name)?;
        self.latent[i] = latent;
        Ok(())
    }

    pub fn set_selection(&mut self, name: &str) -> Result<()> {
        self.selection = Some(self.id(name)?);
        Ok(())
    }

    pub fn set_treatment(&mut self, name: &str) -> Result<()> {
        self.treatment = Some(self.id(name)?);
        Ok(())
    }

    pub fn set_outcome(&mut self, name: &str) -> Result<()> {
        self.outcome = Some(self.id(name)?);
        Ok(())
    }

    pub fn id(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownNode(name.to_string()))
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Node names in insertion order.
    pub fn nodes(&self) -> &[String] {
        &self.names
    }

    pub fn edges(&self) -> Vec<(&str, &str)> {
        let mut out = Vec::new();
        for (a, ch) in self.children.iter().enumerate() {
            for &b in ch {
                out.push((self.name(a), self.name(b)));
            }
        }
        out
    }

    pub fn has_edge(&self, from: &str, to: &str) -> bool {
        match (self.index.get(from), self.index.get(to)) {
            (Some(&a), Some(&b)) => self.children[a].contains(&b),
            _ => false,
        }
    }

    pub fn parents_of(&self, id: usize) -> &[usize] {
        &self.parents[id]
    }

    pub fn children_of(&self, id: usize) -> &[usize] {
        &self.children[id]
    }

    pub fn is_latent(&self, id: usize) -> bool {
        self.latent[id]
    }

    pub fn selection(&self) -> Option<&str> {
        self.selection.map(|i| self.name(i))
    }

    pub fn treatment(&self) -> Option<&str> {
        self.treatment.map(|i| self.name(i))
    }

    pub fn outcome(&self) -> Option<&str> {
        self.outcome.map(|i| self.name(i))
    }

    /// True when the selection node has parents, i.e. it models sample
    /// selection bias rather than a population difference.
    pub fn selection_has_parents(&self) -> bool {
        self.selection.is_some_and(|s| !self.parents[s].is_empty())
    }

    /// Topological order; fails with the name of a node on a cycle.
    pub fn topological_order(&self) -> Result<Vec<usize>> {
        let mut indeg: Vec<usize> = self.parents.iter().map(Vec::len).collect();
        let mut queue: VecDeque<usize> = (0..self.len()).filter(|&i| indeg[i] == 0).collect();
        let mut order = Vec::with_capacity(self.len());
        while let Some(v) = queue.pop_front() {
            order.push(v);
            for &c in &self.children[v] {
                indeg[c] -= 1;
                if indeg[c] == 0 {
                    queue.push_back(c);
                }
            }
        }
        if order.len() < self.len() {
            let stuck = (0..self.len())
                .find(|&i| indeg[i] > 0)
                .expect("a node left on the cycle");
            return Err(Error::CycleDetected(self.name(stuck).to_string()));
        }
        Ok(order)
    }

    pub fn check_acyclic(&self) -> Result<()> {
        self.topological_order().map(|_| ())
    }

    fn closure(&self, start: &[usize], up: bool) -> Vec<bool> {
        let mut seen = vec![false; self.len()];
        let mut stack: Vec<usize> = start.to_vec();
        while let Some(v) = stack.pop() {
            if std::mem::replace(&mut seen[v], true) {
                continue;
            }
            let next = if up {
                &self.parents[v]
            } else {
                &self.children[v]
            };
            stack.extend(next.iter().copied().filter(|&u| !seen[u]));
        }
        seen
    }

    /// Membership mask of `start` and all its ancestors.
    pub fn ancestors(&self, start: &[usize]) -> Vec<bool> {
        self.closure(start, true)
    }

    /// Membership mask of `start` and all its descendants.
    pub fn descendants(&self, start: &[usize]) -> Vec<bool> {
        self.closure(start, false)
    }

    /// Copy without the edges into `node`.
    pub fn without_incoming(&self, node: usize) -> Self {
        let mut g = self.clone();
        for p in std::mem::take(&mut g.parents[node]) {
            g.children[p].retain(|&c| c != node);
        }
        g
    }

    /// Copy without the edges out of `node`.
    pub fn without_outgoing(&self, node: usize) -> Self {
        let mut g = self.clone();
        for c in std::mem::take(&mut g.children[node]) {
            g.parents[c].retain(|&p| p != node);
        }
        g
    }

    fn ids(&self, names: &[&str]) -> Result<Vec<usize>> {
        names.iter().map(|n| self.id(n)).collect()
    }

    /// Nodes reachable from `sources` along active trails given `z`
    /// (Bayes-ball). Sources themselves count as reachable.
    fn reachable(&self, sources: &[usize], z: &[bool]) -> Vec<bool> {
        let anc = self.ancestors(&(0..self.len()).filter(|&i| z[i]).collect::<Vec<_>>());
        // Direction flag: true when the ball arrived from a child.
        let mut visited = vec![[false; 2]; self.len()];
        let mut reach = vec![false; self.len()];
        let mut queue: VecDeque<(usize, bool)> = sources.iter().map(|&s| (s, true)).collect();
        while let Some((v, from_child)) = queue.pop_front() {
            if std::mem::replace(&mut visited[v][from_child as usize], true) {
                continue;
            }
            if !z[v] {
                reach[v] = true;
            }
            if from_child {
                if !z[v] {
                    queue.extend(self.parents[v].iter().map(|&p| (p, true)));
                    queue.extend(self.children[v].iter().map(|&c| (c, false)));
                }
            } else {
                if !z[v] {
                    queue.extend(self.children[v].iter().map(|&c| (c, false)));
                }
                if anc[v] {
                    queue.extend(self.parents[v].iter().map(|&p| (p, true)));
                }
            }
        }
        reach
    }

    pub(crate) fn d_separated_ids(&self, a: &[usize], b: &[usize], z: &[usize]) -> bool {
        let mut zmask = vec![false; self.len()];
        for &v in z {
            zmask[v] = true;
        }
        let reach = self.reachable(a, &zmask);
        !b.iter().any(|&v| reach[v])
    }

    /// Whether `path` (consecutive nodes adjacent in the skeleton) is active
    /// given `z`.
    pub(crate) fn path_active(&self, path: &[usize], z: &[bool], anc_z: &[bool]) -> bool {
        path.windows(3).all(|w| {
            let (u, v, x) = (w[0], w[1], w[2]);
            let collider = self.children[u].contains(&v) && self.children[x].contains(&v);
            if collider {
                anc_z[v]
            } else {
                !z[v]
            }
        })
    }

    /// Renders a trail with arrows showing edge orientation.
    pub(crate) fn render_path(&self, path: &[usize]) -> String {
        let mut out = self.name(path[0]).to_string();
        for w in path.windows(2) {
            let arrow = if self.children[w[0]].contains(&w[1]) {
                " → "
            } else {
                " ← "
            };
            out.push_str(arrow);
            out.push_str(self.name(w[1]));
        }
        out
    }
}

/// Index subsets of 0..k with at most `max` elements, by size and then
/// lexicographically.
pub(crate) struct Subsets {
    k: usize,
    max: usize,
    current: Option<Vec<usize>>,
}

impl Subsets {
    pub(crate) fn new(k: usize, max: Option<usize>) -> Self {
        Self {
            k,
            max: max.unwrap_or(k).min(k),
            current: Some(Vec::new()),
        }
    }
}

impl Iterator for Subsets {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        let out = self.current.take()?;
        let size = out.len();
        let mut idx = out.clone();
        self.current = match (0..size).rev().find(|&i| idx[i] != i + self.k - size) {
            Some(pos) => {
                idx[pos] += 1;
                for j in pos + 1..size {
                    idx[j] = idx[j - 1] + 1;
                }
                Some(idx)
            }
            None if size < self.max => Some((0..size + 1).collect()),
            None => None,
        };
        Some(out)
    }
}

/// True when every trail between `a` and `b` is blocked by `z`.
pub fn d_separated(g: &SelectionDiagram, a: &[&str], b: &[&str], z: &[&str]) -> Result<bool> {
    let (ia, ib, iz) = (g.ids(a)?, g.ids(b)?, g.ids(z)?);
    let overlap =
        ia.iter().any(|v| ib.contains(v) || iz.contains(v)) || ib.iter().any(|v| iz.contains(v));
    if overlap {
        return Err(Error::InvalidData(
            "d-separation sets must be disjoint".into(),
        ));
    }
    Ok(g.d_separated_ids(&ia, &ib, &iz))
}

/// Observed sets of non-descendants of `a` (at most `max_size` nodes) that
/// block every backdoor path from `a` to `y`. Ordered by size, then
/// lexicographically by sorted names. The selection node is never a
/// candidate.
pub fn backdoor_admissible_sets(
    g: &SelectionDiagram,
    a: &str,
    y: &str,
    max_size: Option<usize>,
) -> Result<Vec<Vec<String>>> {
    let (ia, iy) = (g.id(a)?, g.id(y)?);
    let desc = g.descendants(&[ia]);
    let mut cands: Vec<usize> = (0..g.len())
        .filter(|&v| v != iy && !desc[v] && !g.latent[v] && Some(v) != g.selection)
        .collect();
    cands.sort_by(|&u, &v| g.name(u).cmp(g.name(v)));
    let cut = g.without_outgoing(ia);
    let out = Subsets::new(cands.len(), max_size)
        .map(|idx| idx.iter().map(|&i| cands[i]).collect::<Vec<_>>())
        .filter(|z| cut.d_separated_ids(&[ia], &[iy], z))
        .map(|z| z.iter().map(|&v| g.name(v).to_string()).collect())
        .collect();
    Ok(out)
}
