//! Flow-dependency tree over the valid pixels of a DEM.
//!
//! Edges point from lower terrain to higher terrain: a node may be flooded
//! only if every one of its parents is flooded. The tree is a merge tree of
//! the DEM's sublevel sets. Pixels are visited in ascending
//! `(elevation, row-major index)` order, and a newly visited pixel takes as
//! parents the highest node seen so far in every previously visited
//! component it touches. Consequently `{n} ∪ ancestors(n)` is exactly the
//! connected set of pixels at or below `n` (in the same total order) that
//! contains `n`, which is the set that must be under water if `n` is.
//!
//! Each node has at most one child, so every connected component of valid
//! pixels forms one tree whose root is the component's highest pixel and
//! whose leaves (the sources) are its local minima.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use thiserror::Error;

use crate::raster::Grid;

#[derive(Debug, Error)]
pub enum TreeError {
    #[error("the DEM has no valid pixels")]
    NoValidPixels,
    #[error("invalid tree structure: {0}")]
    Structure(String),
}

/// Pixel adjacency used for tree construction and flood filling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Connectivity {
    #[default]
    Four,
    Eight,
}

impl Connectivity {
    pub fn from_count(n: u32) -> Option<Self> {
        match n {
            4 => Some(Self::Four),
            8 => Some(Self::Eight),
            _ => None,
        }
    }

    pub fn count(self) -> u32 {
        match self {
            Self::Four => 4,
            Self::Eight => 8,
        }
    }

    fn offsets(self) -> &'static [(isize, isize)] {
        const FOUR: [(isize, isize); 4] = [(-1, 0), (0, -1), (0, 1), (1, 0)];
        const EIGHT: [(isize, isize); 8] = [
            (-1, -1),
            (-1, 0),
            (-1, 1),
            (0, -1),
            (0, 1),
            (1, -1),
            (1, 0),
            (1, 1),
        ];
        match self {
            Self::Four => &FOUR,
            Self::Eight => &EIGHT,
        }
    }

    /// Row-major indices of the in-bounds neighbours of `(row, col)`.
    pub fn neighbors(
        self,
        nrows: usize,
        ncols: usize,
        row: usize,
        col: usize,
    ) -> impl Iterator<Item = usize> {
        self.offsets().iter().filter_map(move |&(dr, dc)| {
            let r = row.checked_add_signed(dr)?;
            let c = col.checked_add_signed(dc)?;
            (r < nrows && c < ncols).then_some(r * ncols + c)
        })
    }
}

/// Disjoint sets over visited pixels, each tracking its most recently
/// visited member.
struct MergeSets {
    parent: Vec<u32>,
    rank: Vec<u8>,
    top: Vec<u32>,
}

impl MergeSets {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n as u32).collect(),
            rank: vec![0; n],
            top: (0..n as u32).collect(),
        }
    }

    fn find(&mut self, mut x: u32) -> u32 {
        let mut root = x;
        while self.parent[root as usize] != root {
            root = self.parent[root as usize];
        }
        while self.parent[x as usize] != root {
            let next = self.parent[x as usize];
            self.parent[x as usize] = root;
            x = next;
        }
        root
    }

    fn union(&mut self, a: u32, b: u32) -> u32 {
        let (mut a, mut b) = (self.find(a), self.find(b));
        if a == b {
            return a;
        }
        if self.rank[a as usize] < self.rank[b as usize] {
            std::mem::swap(&mut a, &mut b);
        }
        self.parent[b as usize] = a;
        if self.rank[a as usize] == self.rank[b as usize] {
            self.rank[a as usize] += 1;
        }
        a
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowTree {
    nrows: usize,
    ncols: usize,
    pixel_of_node: Vec<usize>,
    node_of_pixel: Vec<Option<usize>>,
    elevation: Vec<f64>,
    parent_offsets: Vec<usize>,
    parent_ids: Vec<usize>,
    child: Vec<Option<usize>>,
    topo_order: Vec<usize>,
    topo_position: Vec<usize>,
    /// Parent lists by topological position, holding parent positions.
    topo_offsets: Vec<usize>,
    topo_parents: Vec<u32>,
    sources: Vec<usize>,
    roots: Vec<usize>,
}

impl FlowTree {
    pub fn node_count(&self) -> usize {
        self.pixel_of_node.len()
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    /// Row-major pixel index of a node.
    pub fn pixel_index(&self, node: usize) -> usize {
        self.pixel_of_node[node]
    }

    pub fn pixel_of_node(&self, node: usize) -> (usize, usize) {
        let p = self.pixel_of_node[node];
        (p / self.ncols, p % self.ncols)
    }

    pub fn node_of_pixel(&self, row: usize, col: usize) -> Option<usize> {
        if row >= self.nrows || col >= self.ncols {
            return None;
        }
        self.node_of_pixel[row * self.ncols + col]
    }

    pub fn node_at_index(&self, pixel: usize) -> Option<usize> {
        self.node_of_pixel.get(pixel).copied().flatten()
    }

    pub fn elevation(&self, node: usize) -> f64 {
        self.elevation[node]
    }

    pub fn parents(&self, node: usize) -> &[usize] {
        &self.parent_ids[self.parent_offsets[node]..self.parent_offsets[node + 1]]
    }

    pub fn children(&self, node: usize) -> &[usize] {
        self.child[node].as_slice()
    }

    pub fn child(&self, node: usize) -> Option<usize> {
        self.child[node]
    }

    pub fn is_source(&self, node: usize) -> bool {
        self.parent_offsets[node] == self.parent_offsets[node + 1]
    }

    /// Nodes ordered so that every parent precedes its children.
    pub fn topo_order(&self) -> &[usize] {
        &self.topo_order
    }

    /// Index of `node` in `topo_order`.
    pub fn topo_position(&self, node: usize) -> usize {
        self.topo_position[node]
    }

    /// Topological positions of the parents of the node at position `pos`.
    pub fn parent_positions(&self, pos: usize) -> &[u32] {
        &self.topo_parents[self.topo_offsets[pos]..self.topo_offsets[pos + 1]]
    }

    /// Nodes without parents (local minima), ascending by id.
    pub fn sources(&self) -> &[usize] {
        &self.sources
    }

    /// Nodes without a child (one per connected component), ascending by id.
    pub fn roots(&self) -> &[usize] {
        &self.roots
    }

    pub fn edge_count(&self) -> usize {
        self.parent_ids.len()
    }

    /// Build a tree directly from parent lists, for callers that construct
    /// structures outside a DEM. Nodes are laid out as a single raster row
    /// and node `i` gets elevation equal to its position in topological order.
    pub fn from_parents(parents: &[Vec<usize>]) -> Result<Self, TreeError> {
        let n = parents.len();
        if n == 0 {
            return Err(TreeError::NoValidPixels);
        }
        let mut child = vec![None; n];
        for (node, ps) in parents.iter().enumerate() {
            let distinct: BTreeSet<_> = ps.iter().collect();
            if distinct.len() != ps.len() {
                return Err(TreeError::Structure(format!(
                    "node {node} lists a parent twice"
                )));
            }
            for &p in ps {
                if p >= n || p == node {
                    return Err(TreeError::Structure(format!(
                        "node {node} has invalid parent {p}"
                    )));
                }
                if child[p].replace(node).is_some() {
                    return Err(TreeError::Structure(format!(
                        "node {p} would have more than one child"
                    )));
                }
            }
        }
        // Kahn's algorithm; a node becomes ready once all its parents are placed.
        let mut pending: Vec<usize> = parents.iter().map(Vec::len).collect();
        let mut topo: Vec<usize> = (0..n).filter(|&i| pending[i] == 0).collect();
        let mut head = 0;
        while head < topo.len() {
            let node = topo[head];
            head += 1;
            if let Some(c) = child[node] {
                pending[c] -= 1;
                if pending[c] == 0 {
                    topo.push(c);
                }
            }
        }
        if topo.len() != n {
            return Err(TreeError::Structure("parent relation has a cycle".into()));
        }
        let mut elevation = vec![0.0; n];
        for (rank, &node) in topo.iter().enumerate() {
            elevation[node] = rank as f64;
        }
        let mut offsets = Vec::with_capacity(n + 1);
        let mut ids = Vec::with_capacity(n);
        offsets.push(0);
        for &node in &topo {
            let start = ids.len();
            ids.extend_from_slice(&parents[node]);
            ids[start..].sort_unstable();
            offsets.push(ids.len());
        }
        Ok(Self::assemble(
            1,
            n,
            (0..n).collect(),
            elevation,
            topo,
            offsets,
            ids,
        ))
    }

    /// The same tree with node `i` being the node at topological position
    /// `i`, so that sweeps in topological order touch memory sequentially.
    /// Parent lists keep their original order.
    pub fn topo_relabeled(&self) -> FlowTree {
        let pixel_of_node = self
            .topo_order
            .iter()
            .map(|&v| self.pixel_of_node[v])
            .collect();
        let elevation = self.topo_order.iter().map(|&v| self.elevation[v]).collect();
        let ids = self.topo_parents.iter().map(|&p| p as usize).collect();
        Self::assemble(
            self.nrows,
            self.ncols,
            pixel_of_node,
            elevation,
            (0..self.node_count()).collect(),
            self.topo_offsets.clone(),
            ids,
        )
    }

    /// `topo_offsets`/`topo_ids` list each node's parents (as node ids) in
    /// topological order.
    fn assemble(
        nrows: usize,
        ncols: usize,
        pixel_of_node: Vec<usize>,
        elevation: Vec<f64>,
        topo_order: Vec<usize>,
        topo_offsets: Vec<usize>,
        topo_ids: Vec<usize>,
    ) -> Self {
        let n = pixel_of_node.len();
        let mut node_of_pixel = vec![None; nrows * ncols];
        for (node, &p) in pixel_of_node.iter().enumerate() {
            node_of_pixel[p] = Some(node);
        }
        let mut topo_position = vec![0; n];
        for (pos, &node) in topo_order.iter().enumerate() {
            topo_position[node] = pos;
        }
        let mut parent_offsets = vec![0; n + 1];
        let mut child = vec![None; n];
        for (pos, &node) in topo_order.iter().enumerate() {
            parent_offsets[node + 1] = topo_offsets[pos + 1] - topo_offsets[pos];
            for &p in &topo_ids[topo_offsets[pos]..topo_offsets[pos + 1]] {
                child[p] = Some(node);
            }
        }
        for i in 0..n {
            parent_offsets[i + 1] += parent_offsets[i];
        }
        let mut parent_ids = vec![0; topo_ids.len()];
        for (pos, &node) in topo_order.iter().enumerate() {
            let o = parent_offsets[node];
            let ps = &topo_ids[topo_offsets[pos]..topo_offsets[pos + 1]];
            parent_ids[o..o + ps.len()].copy_from_slice(ps);
        }
        let topo_parents = topo_ids.iter().map(|&p| topo_position[p] as u32).collect();
        let sources = (0..n)
            .filter(|&i| parent_offsets[i] == parent_offsets[i + 1])
            .collect();
        let roots = (0..n).filter(|&i| child[i].is_none()).collect();
        Self {
            nrows,
            ncols,
            pixel_of_node,
            node_of_pixel,
            elevation,
            parent_offsets,
            parent_ids,
            child,
            topo_order,
            topo_position,
            topo_offsets,
            topo_parents,
            sources,
            roots,
        }
    }
}

/// Build the flow-dependency tree of a DEM. Node ids number the valid pixels
/// in row-major order.
pub fn build_flow_tree(dem: &Grid, connectivity: Connectivity) -> Result<FlowTree, TreeError> {
    let (nrows, ncols) = (dem.nrows, dem.ncols);
    let pixel_of_node: Vec<usize> = (0..dem.len()).filter(|&i| dem.is_valid_at(i)).collect();
    let n = pixel_of_node.len();
    if n == 0 {
        return Err(TreeError::NoValidPixels);
    }
    assert!(n <= u32::MAX as usize, "too many pixels for a flow tree");
    let mut node_of_pixel = vec![u32::MAX; dem.len()];
    for (node, &p) in pixel_of_node.iter().enumerate() {
        node_of_pixel[p] = node as u32;
    }
    let elevation: Vec<f64> = pixel_of_node.iter().map(|&p| dem.values[p]).collect();

    // Node ids are increasing in pixel index, so sorting by (elevation, id)
    // is the (elevation, row-major index) order.
    let mut keyed: Vec<(u64, u32)> = elevation
        .iter()
        .enumerate()
        .map(|(i, &z)| (order_key(z), i as u32))
        .collect();
    keyed.sort_unstable();

    // The merge sets work on topological positions: a neighbour has been
    // visited exactly when its position is below the current one.
    let mut position = vec![0u32; n];
    for (pos, &(_, node)) in keyed.iter().enumerate() {
        position[node as usize] = pos as u32;
    }
    let mut sets = MergeSets::new(n);
    let mut topo_offsets = Vec::with_capacity(n + 1);
    let mut topo_ids: Vec<usize> = Vec::with_capacity(n);
    let mut roots_seen: Vec<u32> = Vec::with_capacity(8);
    topo_offsets.push(0);

    for (pos, &(_, node)) in keyed.iter().enumerate() {
        let pos = pos as u32;
        let p = pixel_of_node[node as usize];
        let (row, col) = (p / ncols, p % ncols);
        roots_seen.clear();
        for q in connectivity.neighbors(nrows, ncols, row, col) {
            let other = node_of_pixel[q];
            if other == u32::MAX || position[other as usize] >= pos {
                continue;
            }
            let root = sets.find(position[other as usize]);
            if !roots_seen.contains(&root) {
                roots_seen.push(root);
            }
        }
        let start = topo_ids.len();
        topo_ids.extend(
            roots_seen
                .iter()
                .map(|&r| keyed[sets.top[r as usize] as usize].1 as usize),
        );
        topo_ids[start..].sort_unstable();
        topo_offsets.push(topo_ids.len());
        let mut merged = pos;
        for &root in &roots_seen {
            merged = sets.union(merged, root);
        }
        sets.top[merged as usize] = pos;
    }

    let topo_order = keyed.into_iter().map(|(_, v)| v as usize).collect();
    Ok(FlowTree::assemble(
        nrows,
        ncols,
        pixel_of_node,
        elevation,
        topo_order,
        topo_offsets,
        topo_ids,
    ))
}

/// Unsigned key whose order matches `f64::total_cmp`.
fn order_key(z: f64) -> u64 {
    let b = z.to_bits();
    if b >> 63 == 1 {
        !b
    } else {
        b | (1 << 63)
    }
}

/// All nodes reachable from `node` by following parent links.
pub fn ancestors(tree: &FlowTree, node: usize) -> BTreeSet<usize> {
    let mut out = BTreeSet::new();
    let mut stack: Vec<usize> = tree.parents(node).to_vec();
    while let Some(n) = stack.pop() {
        if out.insert(n) {
            stack.extend_from_slice(tree.parents(n));
        }
    }
    out
}

/// Number of flooded nodes that have at least one dry parent.
pub fn validate_partial_order(tree: &FlowTree, labels: &[u8]) -> usize {
    (0..tree.node_count())
        .filter(|&n| labels[n] == 1 && tree.parents(n).iter().any(|&p| labels[p] == 0))
        .count()
}

/// Line-oriented dump: `node_id row col elevation parent_ids`, with parent
/// ids comma-separated or `-` for sources.
pub fn dump_tree(tree: &FlowTree) -> String {
    let mut out = String::with_capacity(tree.node_count() * 24);
    for node in 0..tree.node_count() {
        let (row, col) = tree.pixel_of_node(node);
        let _ = write!(out, "{node} {row} {col} {} ", tree.elevation(node));
        let ps = tree.parents(node);
        if ps.is_empty() {
            out.push('-');
        } else {
            for (i, p) in ps.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                let _ = write!(out, "{p}");
            }
        }
        out.push('\n');
    }
    out
}

/// Class map (0/1/nodata) for a per-node labeling.
pub fn labels_to_grid(tree: &FlowTree, template: &Grid, labels: &[u8]) -> Grid {
    let mut grid = template.filled_like(template.nodata_value);
    for (node, &l) in labels.iter().enumerate() {
        grid.values[tree.pixel_index(node)] = f64::from(l);
    }
    grid
}

/// Per-node values laid out on a grid, nodata elsewhere.
pub fn node_values_to_grid(tree: &FlowTree, template: &Grid, values: &[f64]) -> Grid {
    let mut grid = template.filled_like(template.nodata_value);
    for (node, &v) in values.iter().enumerate() {
        grid.values[tree.pixel_index(node)] = v;
    }
    grid
}

/// Per-node labels read from a class grid; nodata cells map to `None`.
pub fn grid_to_labels(tree: &FlowTree, grid: &Grid) -> Vec<Option<u8>> {
    (0..tree.node_count())
        .map(|n| {
            let v = grid.values[tree.pixel_index(n)];
            (!grid.is_nodata(v)).then_some(u8::from(v == 1.0))
        })
        .collect()
}
