//! Multi-magnification image graph: a king-graph grid per level, inter-level
//! edges to child blocks, and pyramid projection of pixel features onto
//! nodes.
//!
//! Level 0 has one node per pixel. Each coarser level shrinks the grid by a
//! fixed integer factor. Edge topology is fixed at construction; only node
//! positions move afterwards.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Flat index of a node in a [`MagnificationGraph`].
pub type NodeId = u32;

/// Per-node state: projected color feature, normalized magnification, and a
/// position in the unit cube.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeState {
    /// Per-channel mean color in [0,1].
    pub color: [f64; 3],
    /// m / (L-1), or 0 when L = 1.
    pub magnification: f64,
    /// (x, y, z) in [0,1]^3: normalized image coordinates plus height.
    pub position: [f64; 3],
    /// Set when the last projection or refresh could not derive a feature
    /// (empty footprint, or no claimed children).
    pub flagged: bool,
}

/// Pixel coverage of the square base of the pyramid projected from a node
/// position.
#[derive(Debug, Clone, PartialEq)]
pub struct PyramidFootprint {
    /// Center in pixel coordinates.
    pub center: (f64, f64),
    /// Half of the square's side, in pixels.
    pub half_side: f64,
    /// Covered in-image pixels as (row, col) pairs, row-major order.
    pub pixels: Vec<(u32, u32)>,
}

impl PyramidFootprint {
    /// Number of covered in-image pixels.
    pub fn valid_count(&self) -> usize {
        self.pixels.len()
    }

    /// Unclipped square area in pixels squared.
    pub fn nominal_area(&self) -> f64 {
        (2.0 * self.half_side) * (2.0 * self.half_side)
    }
}

/// Image RGB buffer in [0,1], row-major, `h x w x 3`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuf {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl ImageBuf {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width * 3],
        }
    }

    pub fn from_data(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::InvalidArgument {
                what: "ImageBuf",
                detail: format!("{} values for {height}x{width}x3", data.len()),
            });
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    #[inline]
    pub fn pixel(&self, row: usize, col: usize) -> [f64; 3] {
        let o = (row * self.width + col) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, row: usize, col: usize, rgb: [f64; 3]) {
        let o = (row * self.width + col) * 3;
        self.data[o..o + 3].copy_from_slice(&rgb);
    }
}

/// Nodes across `levels` magnification levels with fixed edge topology and
/// mutable positions.
#[derive(Debug, Clone)]
pub struct MagnificationGraph {
    levels: usize,
    factor: usize,
    /// Grid side length per level; `grids[0]` is the pixel resolution.
    grids: Vec<usize>,
    /// Node index offset per level.
    offsets: Vec<u32>,
    pub nodes: Vec<NodeState>,
    /// Undirected edges as (a, b) with a < b.
    edges: Vec<(NodeId, NodeId)>,
    /// Directed arcs (src, dst) including one self-arc per node, sorted by
    /// (dst, src) so arcs of one destination are contiguous.
    arcs: Vec<(NodeId, NodeId)>,
}

/// Undirected king-graph edges of a `rows x cols` grid: all pairs at
/// Chebyshev distance 1 (orthogonal and diagonal neighbors).
pub fn king_edges(rows: usize, cols: usize) -> Vec<(u32, u32)> {
    let idx = |r: usize, c: usize| (r * cols + c) as u32;
    let mut edges = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            let a = idx(r, c);
            // right, down-left, down, down-right: each undirected pair once
            if c + 1 < cols {
                edges.push((a, idx(r, c + 1)));
            }
            if r + 1 < rows {
                if c > 0 {
                    edges.push((a, idx(r + 1, c - 1)));
                }
                edges.push((a, idx(r + 1, c)));
                if c + 1 < cols {
                    edges.push((a, idx(r + 1, c + 1)));
                }
            }
        }
    }
    edges
}

impl MagnificationGraph {
    /// Construct the base graph for a square `size x size` image with
    /// `levels` magnification levels downsampled by `factor` between levels.
    ///
    /// Intra-level edges form a king graph; each level-(m+1) node connects to
    /// its `factor x factor` child block at level m. Default positions put a
    /// node at the center of its child block with `z = factor^m / size`.
    pub fn build(height: usize, width: usize, levels: usize, factor: usize) -> Result<Self> {
        if height != width || height == 0 {
            return Err(Error::InvalidArgument {
                what: "build_base_graph",
                detail: format!("input must be square and nonempty, got {height}x{width}"),
            });
        }
        if !(1..=5).contains(&levels) {
            return Err(Error::InvalidArgument {
                what: "build_base_graph",
                detail: format!("levels {levels} outside 1..=5"),
            });
        }
        if factor < 2 && levels > 1 {
            return Err(Error::InvalidArgument {
                what: "build_base_graph",
                detail: format!("factor {factor} must be >= 2"),
            });
        }
        let size = height;
        let mut grids = Vec::with_capacity(levels);
        let mut n = size;
        for m in 0..levels {
            grids.push(n);
            if m + 1 < levels {
                if n % factor != 0 {
                    return Err(Error::InvalidArgument {
                        what: "build_base_graph",
                        detail: format!(
                            "factor {factor} does not divide level-{m} grid {n}"
                        ),
                    });
                }
                n /= factor;
            }
        }

        let mut offsets = Vec::with_capacity(levels);
        let mut total = 0u32;
        for &g in &grids {
            offsets.push(total);
            total += (g * g) as u32;
        }

        let mut nodes = Vec::with_capacity(total as usize);
        let base = size as f64;
        for (m, &g) in grids.iter().enumerate() {
            let block = factor.pow(m as u32) as f64;
            let mag = if levels == 1 {
                0.0
            } else {
                m as f64 / (levels - 1) as f64
            };
            for i in 0..g {
                for j in 0..g {
                    nodes.push(NodeState {
                        color: [0.0; 3],
                        magnification: mag,
                        position: [
                            (j as f64 + 0.5) * block / base,
                            (i as f64 + 0.5) * block / base,
                            block / base,
                        ],
                        flagged: false,
                    });
                }
            }
        }

        let mut edges = Vec::new();
        for (m, &g) in grids.iter().enumerate() {
            let off = offsets[m];
            for (a, b) in king_edges(g, g) {
                edges.push((off + a, off + b));
            }
        }
        // Inter-level: level-(m+1) node (i, j) to its factor x factor child
        // block at level m.
        for m in 0..levels.saturating_sub(1) {
            let g_child = grids[m];
            let g_parent = grids[m + 1];
            let off_child = offsets[m];
            let off_parent = offsets[m + 1];
            for i in 0..g_parent {
                for j in 0..g_parent {
                    let parent = off_parent + (i * g_parent + j) as u32;
                    for di in 0..factor {
                        for dj in 0..factor {
                            let ci = i * factor + di;
                            let cj = j * factor + dj;
                            let child = off_child + (ci * g_child + cj) as u32;
                            edges.push((child.min(parent), child.max(parent)));
                        }
                    }
                }
            }
        }

        let mut arcs = Vec::with_capacity(edges.len() * 2 + total as usize);
        for &(a, b) in &edges {
            arcs.push((a, b));
            arcs.push((b, a));
        }
        for v in 0..total {
            arcs.push((v, v));
        }
        arcs.sort_unstable_by_key(|&(src, dst)| (dst, src));

        Ok(Self {
            levels,
            factor,
            grids,
            offsets,
            nodes,
            edges,
            arcs,
        })
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn factor(&self) -> usize {
        self.factor
    }

    /// Pixels per row/column at level `m`.
    pub fn grid(&self, m: usize) -> usize {
        self.grids[m]
    }

    /// Side length of the base (level 0) grid.
    pub fn base_size(&self) -> usize {
        self.grids[0]
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Flat node index of (level, row, col).
    pub fn node_id(&self, m: usize, i: usize, j: usize) -> NodeId {
        self.offsets[m] + (i * self.grids[m] + j) as u32
    }

    /// Magnification level of a flat node index.
    pub fn level_of(&self, id: NodeId) -> usize {
        let mut m = self.levels - 1;
        while self.offsets[m] > id {
            m -= 1;
        }
        m
    }

    /// Flat index range of one level's nodes.
    pub fn level_range(&self, m: usize) -> std::ops::Range<usize> {
        let start = self.offsets[m] as usize;
        let end = if m + 1 < self.levels {
            self.offsets[m + 1] as usize
        } else {
            self.nodes.len()
        };
        start..end
    }

    /// Undirected edges, each once with the smaller index first.
    pub fn edges(&self) -> &[(NodeId, NodeId)] {
        &self.edges
    }

    /// Directed arcs including self-arcs, sorted by (dst, src); this is the
    /// attention view used by the network.
    pub fn arcs(&self) -> &[(NodeId, NodeId)] {
        &self.arcs
    }

    /// Square pyramid footprint of an arbitrary position on this graph's
    /// base grid: side `z * size` pixels centered at `(x, y) * size`. A pixel
    /// is covered when its center lies within the square (inclusive bounds),
    /// clipped to the image.
    pub fn footprint_at(&self, position: [f64; 3]) -> PyramidFootprint {
        let size = self.base_size();
        let [x, y, z] = position;
        let cx = x * size as f64;
        let cy = y * size as f64;
        let half = z * size as f64 / 2.0;
        let mut pixels = Vec::new();
        if half >= 0.0 {
            let row_lo = ((cy - half - 0.5).ceil().max(0.0)) as i64;
            let row_hi = ((cy + half - 0.5).floor().min(size as f64 - 1.0)) as i64;
            let col_lo = ((cx - half - 0.5).ceil().max(0.0)) as i64;
            let col_hi = ((cx + half - 0.5).floor().min(size as f64 - 1.0)) as i64;
            for r in row_lo..=row_hi {
                for c in col_lo..=col_hi {
                    if r >= 0 && c >= 0 {
                        pixels.push((r as u32, c as u32));
                    }
                }
            }
        }
        PyramidFootprint {
            center: (cx, cy),
            half_side: half,
            pixels,
        }
    }

    /// Footprint of a node's current position.
    pub fn footprint(&self, id: NodeId) -> PyramidFootprint {
        self.footprint_at(self.nodes[id as usize].position)
    }

    /// Project image colors onto every node: each node's color becomes the
    /// mean over its footprint pixels. Nodes with empty footprints get color
    /// (0,0,0) and are flagged.
    pub fn project_features(&mut self, image: &ImageBuf) -> Result<()> {
        let size = self.base_size();
        if image.height != size || image.width != size {
            return Err(Error::InvalidArgument {
                what: "project_features",
                detail: format!(
                    "image {}x{} does not match graph base {size}x{size}",
                    image.height, image.width
                ),
            });
        }
        for id in 0..self.nodes.len() {
            let fp = self.footprint_at(self.nodes[id].position);
            let node = &mut self.nodes[id];
            if fp.pixels.is_empty() {
                node.color = [0.0; 3];
                node.flagged = true;
                continue;
            }
            let mut acc = [0.0f64; 3];
            for &(r, c) in &fp.pixels {
                let p = image.pixel(r as usize, c as usize);
                for k in 0..3 {
                    acc[k] += p[k];
                }
            }
            let n = fp.pixels.len() as f64;
            node.color = [acc[0] / n, acc[1] / n, acc[2] / n];
            node.flagged = false;
        }
        Ok(())
    }

    /// Fixed-order 7-vector for a node: [c1, c2, c3, m, x, y, z].
    pub fn node_feature_vector(&self, id: NodeId) -> [f64; 7] {
        let n = &self.nodes[id as usize];
        [
            n.color[0],
            n.color[1],
            n.color[2],
            n.magnification,
            n.position[0],
            n.position[1],
            n.position[2],
        ]
    }

    /// Network input features, one row per node: [c1, c2, c3, m]. Positions
    /// reach the network only through the attention slots and the loss
    /// field, so they are not part of the embedding input.
    pub fn input_features(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.nodes.len() * 4);
        for n in &self.nodes {
            out.extend_from_slice(&[n.color[0], n.color[1], n.color[2], n.magnification]);
        }
        out
    }

    /// Flat positions buffer, one row of (x, y, z) per node.
    pub fn positions(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.nodes.len() * 3);
        for n in &self.nodes {
            out.extend_from_slice(&n.position);
        }
        out
    }

    /// Overwrite positions of nodes at levels m > 0 from a flat buffer of
    /// (x, y, z) rows covering only those nodes, in index order. Level-0
    /// positions are immutable.
    pub fn set_mobile_positions(&mut self, mobile: &[f64]) -> Result<()> {
        let start = self.level_range(0).end;
        let expect = (self.nodes.len() - start) * 3;
        if mobile.len() != expect {
            return Err(Error::InvalidArgument {
                what: "set_mobile_positions",
                detail: format!("{} values, expected {expect}", mobile.len()),
            });
        }
        for (k, node) in self.nodes[start..].iter_mut().enumerate() {
            node.position = [mobile[k * 3], mobile[k * 3 + 1], mobile[k * 3 + 2]];
        }
        Ok(())
    }

    /// Serialize to the documented JSON layout.
    pub fn to_json(&self) -> GraphJson {
        GraphJson {
            schema_version: GRAPH_SCHEMA_VERSION,
            levels: self.levels,
            factor: self.factor,
            grids: self.grids.clone(),
            nodes: self
                .nodes
                .iter()
                .enumerate()
                .map(|(id, n)| {
                    let m = self.level_of(id as u32);
                    let g = self.grids[m];
                    let local = id - self.offsets[m] as usize;
                    NodeJson {
                        level: m,
                        row: local / g,
                        col: local % g,
                        color: n.color,
                        magnification: n.magnification,
                        position: n.position,
                        flagged: n.flagged,
                    }
                })
                .collect(),
            edges: self.edges.clone(),
        }
    }

    /// Rebuild a graph from its JSON form, restoring node state verbatim.
    pub fn from_json(json: &GraphJson) -> Result<Self> {
        if json.schema_version != GRAPH_SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                found: json.schema_version,
                expected: GRAPH_SCHEMA_VERSION,
            });
        }
        let size = *json.grids.first().ok_or(Error::InvalidArgument {
            what: "graph json",
            detail: "empty grids".into(),
        })?;
        let mut graph = Self::build(size, size, json.levels, json.factor)?;
        if json.nodes.len() != graph.nodes.len() {
            return Err(Error::InvalidArgument {
                what: "graph json",
                detail: format!(
                    "{} node records for {} nodes",
                    json.nodes.len(),
                    graph.nodes.len()
                ),
            });
        }
        for nj in &json.nodes {
            let id = graph.node_id(nj.level, nj.row, nj.col) as usize;
            graph.nodes[id] = NodeState {
                color: nj.color,
                magnification: nj.magnification,
                position: nj.position,
                flagged: nj.flagged,
            };
        }
        Ok(graph)
    }
}

pub const GRAPH_SCHEMA_VERSION: u32 = 1;

/// Documented JSON layout for graph interop and test fixtures.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraphJson {
    pub schema_version: u32,
    pub levels: usize,
    pub factor: usize,
    /// Grid side per level, level 0 first.
    pub grids: Vec<usize>,
    pub nodes: Vec<NodeJson>,
    /// Undirected edges as flat-index pairs, smaller index first.
    pub edges: Vec<(u32, u32)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NodeJson {
    pub level: usize,
    pub row: usize,
    pub col: usize,
    pub color: [f64; 3],
    pub magnification: f64,
    pub position: [f64; 3],
    pub flagged: bool,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_force_edges(size: usize, levels: usize, factor: usize) -> Vec<(u32, u32)> {
        // Independent reconstruction: Chebyshev distance 1 within a level,
        // child-block membership across adjacent levels.
        let mut grids = vec![size];
        for _ in 1..levels {
            grids.push(grids.last().unwrap() / factor);
        }
        let mut offsets = vec![0u32];
        for g in &grids[..levels - 1] {
            offsets.push(offsets.last().unwrap() + (g * g) as u32);
        }
        let coords: Vec<(usize, usize, usize)> = grids
            .iter()
            .enumerate()
            .flat_map(|(m, &g)| (0..g).flat_map(move |i| (0..g).map(move |j| (m, i, j))))
            .collect();
        let id = |m: usize, i: usize, j: usize| offsets[m] + (i * grids[m] + j) as u32;
        let mut edges = Vec::new();
        for a in 0..coords.len() {
            for b in (a + 1)..coords.len() {
                let (ma, ia, ja) = coords[a];
                let (mb, ib, jb) = coords[b];
                let connected = if ma == mb {
                    ia.abs_diff(ib).max(ja.abs_diff(jb)) == 1
                } else if ma.abs_diff(mb) == 1 {
                    let ((cm, ci, cj), (_, pi, pj)) = if ma < mb {
                        (coords[a], coords[b])
                    } else {
                        (coords[b], coords[a])
                    };
                    let _ = cm;
                    ci / factor == pi && cj / factor == pj
                } else {
                    false
                };
                if connected {
                    let (x, y) = (id(ma, ia, ja), id(mb, ib, jb));
                    edges.push((x.min(y), x.max(y)));
                }
            }
        }
        edges.sort_unstable();
        edges
    }

    #[test]
    fn node_and_edge_counts_8x8_l3() {
        let g = MagnificationGraph::build(8, 8, 3, 2).unwrap();
        assert_eq!(g.node_count(), 84);
        assert_eq!(g.edges().len(), 338);
    }

    #[test]
    fn degenerate_1x1() {
        let g = MagnificationGraph::build(1, 1, 1, 2).unwrap();
        assert_eq!(g.node_count(), 1);
        assert_eq!(g.edges().len(), 0);
        // singleton still has its self-arc for attention
        assert_eq!(g.arcs(), &[(0, 0)]);
    }

    #[test]
    fn king_edge_counts() {
        assert_eq!(king_edges(4, 4).len(), 42);
        assert_eq!(king_edges(2, 2).len(), 6);
        for n in 1..8 {
            assert_eq!(king_edges(1, n).len(), n - 1);
        }
    }

    #[test]
    fn king_matches_formula() {
        for rows in 1..=6 {
            for cols in 1..=6 {
                let expect = rows * (cols - 1) + cols * (rows - 1) + 2 * (rows - 1) * (cols - 1);
                assert_eq!(king_edges(rows, cols).len(), expect, "{rows}x{cols}");
            }
        }
    }

    #[test]
    fn edges_match_brute_force() {
        for (size, levels) in [(4usize, 1usize), (4, 2), (8, 2), (8, 3), (16, 3)] {
            let g = MagnificationGraph::build(size, size, levels, 2).unwrap();
            let mut got = g.edges().to_vec();
            got.sort_unstable();
            let want = brute_force_edges(size, levels, 2);
            assert_eq!(got, want, "size {size} levels {levels}");
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(MagnificationGraph::build(8, 6, 2, 2).is_err());
        assert!(MagnificationGraph::build(6, 6, 3, 2).is_err()); // 4 does not divide 6
        assert!(MagnificationGraph::build(8, 8, 0, 2).is_err());
        assert!(MagnificationGraph::build(64, 64, 6, 2).is_err());
    }

    #[test]
    fn base_footprint_is_own_pixel() {
        let g = MagnificationGraph::build(8, 8, 3, 2).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                let fp = g.footprint(g.node_id(0, i, j));
                assert_eq!(fp.pixels, vec![(i as u32, j as u32)]);
            }
        }
    }

    #[test]
    fn level1_footprint_is_child_block() {
        let g = MagnificationGraph::build(8, 8, 3, 2).unwrap();
        let fp = g.footprint(g.node_id(1, 1, 2));
        let mut expect = vec![];
        for r in 2..4 {
            for c in 4..6 {
                expect.push((r, c));
            }
        }
        assert_eq!(fp.pixels, expect);
    }

    #[test]
    fn corner_footprint_clips() {
        let g = MagnificationGraph::build(8, 8, 1, 2).unwrap();
        let fp = g.footprint_at([0.0, 0.0, 0.25]);
        assert_eq!(fp.valid_count(), 1);
        assert_eq!(fp.pixels, vec![(0, 0)]);
    }

    #[test]
    fn projection_uniform_image() {
        let mut g = MagnificationGraph::build(8, 8, 3, 2).unwrap();
        let img = ImageBuf::from_data(8, 8, vec![0.5; 8 * 8 * 3]).unwrap();
        g.project_features(&img).unwrap();
        for n in &g.nodes {
            assert_eq!(n.color, [0.5, 0.5, 0.5]);
            assert!(!n.flagged);
        }
    }

    #[test]
    fn projection_block_mean() {
        let mut g = MagnificationGraph::build(2, 2, 2, 2).unwrap();
        let mut img = ImageBuf::new(2, 2);
        for (k, v) in [0.0, 0.2, 0.4, 0.6].iter().enumerate() {
            img.set_pixel(k / 2, k % 2, [*v; 3]);
        }
        g.project_features(&img).unwrap();
        let parent = g.node_id(1, 0, 0);
        for k in 0..3 {
            assert!((g.nodes[parent as usize].color[k] - 0.3).abs() < 1e-12);
        }
    }

    #[test]
    fn projection_single_pixel_exact() {
        let mut g = MagnificationGraph::build(4, 4, 1, 2).unwrap();
        let mut img = ImageBuf::new(4, 4);
        img.set_pixel(2, 1, [0.1, 0.9, 0.3]);
        g.project_features(&img).unwrap();
        assert_eq!(g.nodes[g.node_id(0, 2, 1) as usize].color, [0.1, 0.9, 0.3]);
    }

    #[test]
    fn projection_mean_preserving_per_level() {
        let mut g = MagnificationGraph::build(8, 8, 3, 2).unwrap();
        let mut img = ImageBuf::new(8, 8);
        let mut acc = 0.0;
        for r in 0..8 {
            for c in 0..8 {
                let v = ((r * 31 + c * 17) % 13) as f64 / 13.0;
                img.set_pixel(r, c, [v; 3]);
                acc += v;
            }
        }
        let image_mean = acc / 64.0;
        g.project_features(&img).unwrap();
        for m in 0..3 {
            let range = g.level_range(m);
            let count = range.len() as f64;
            let level_mean: f64 =
                g.nodes[range].iter().map(|n| n.color[0]).sum::<f64>() / count;
            assert!(
                (level_mean - image_mean).abs() < 1e-9,
                "level {m}: {level_mean} vs {image_mean}"
            );
        }
    }

    #[test]
    fn feature_vector_layout() {
        let mut g = MagnificationGraph::build(8, 8, 3, 2).unwrap();
        let top = g.node_id(2, 0, 0);
        assert_eq!(g.node_feature_vector(top)[3], 1.0);

        let id = g.node_id(1, 0, 0) as usize;
        g.nodes[id].color = [0.5; 3];
        g.nodes[id].position = [0.25, 0.75, 0.25];
        assert_eq!(
            g.node_feature_vector(id as u32),
            [0.5, 0.5, 0.5, 0.5, 0.25, 0.75, 0.25]
        );

        let zero = NodeState {
            color: [0.0; 3],
            magnification: 0.0,
            position: [0.0; 3],
            flagged: false,
        };
        g.nodes[id] = zero;
        assert_eq!(g.node_feature_vector(id as u32), [0.0; 7]);
    }

    #[test]
    fn construction_is_deterministic() {
        let a = MagnificationGraph::build(8, 8, 3, 2).unwrap();
        let b = MagnificationGraph::build(8, 8, 3, 2).unwrap();
        assert_eq!(a.edges(), b.edges());
        assert_eq!(a.arcs(), b.arcs());
        assert_eq!(a.nodes, b.nodes);
    }

    #[test]
    fn parent_edge_counts() {
        let g = MagnificationGraph::build(8, 8, 3, 2).unwrap();
        // every level-0 node has exactly one edge to level 1
        for i in 0..8 {
            for j in 0..8 {
                let id = g.node_id(0, i, j);
                let parents = g
                    .edges()
                    .iter()
                    .filter(|&&(a, b)| {
                        (a == id && g.level_of(b) == 1) || (b == id && g.level_of(a) == 1)
                    })
                    .count();
                assert_eq!(parents, 1);
            }
        }
        // every node above level 0 touches at least one inter-level edge
        for id in g.level_range(1).start..g.node_count() {
            let id = id as u32;
            let m = g.level_of(id);
            let inter = g
                .edges()
                .iter()
                .filter(|&&(a, b)| {
                    (a == id && g.level_of(b) != m) || (b == id && g.level_of(a) != m)
                })
                .count();
            assert!(inter >= 1);
        }
    }

    #[test]
    fn json_roundtrip() {
        let mut g = MagnificationGraph::build(8, 8, 2, 2).unwrap();
        let img = ImageBuf::from_data(8, 8, vec![0.25; 8 * 8 * 3]).unwrap();
        g.project_features(&img).unwrap();
        g.nodes[70].position = [0.3, 0.4, 0.5];
        let json = g.to_json();
        let text = serde_json::to_string(&json).unwrap();
        let parsed: GraphJson = serde_json::from_str(&text).unwrap();
        let back = MagnificationGraph::from_json(&parsed).unwrap();
        assert_eq!(back.nodes, g.nodes);
        assert_eq!(back.edges(), g.edges());
    }

    #[test]
    fn json_rejects_wrong_version() {
        let g = MagnificationGraph::build(4, 4, 1, 2).unwrap();
        let mut json = g.to_json();
        json.schema_version = 99;
        assert!(MagnificationGraph::from_json(&json).is_err());
    }
}
