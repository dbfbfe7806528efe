//! Learnable mutation of node positions: a small dense network moves every
//! node above level 0, constraint repair keeps footprints useful, and a
//! feature refresh re-derives coarse-level colors from the children each
//! node now claims.
//!
//! Level-0 positions never move. Topology never changes.

use crate::autodiff::{Tape, TapeTensor};
use crate::error::{Error, Result};
use crate::graph::MagnificationGraph;
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Three dense layers (7 -> h -> h -> 3), sigmoid activation throughout, so
/// the output position always lands in (0,1)^3.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MutationNet {
    pub hidden: usize,
    /// 7 x hidden, row-major.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// hidden x hidden.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    /// hidden x 3.
    pub w3: Vec<f64>,
    pub b3: Vec<f64>,
}

pub(crate) fn glorot(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, n: usize) -> Vec<f64> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound);
    (0..n).map(|_| dist.sample(rng)).collect()
}

impl MutationNet {
    /// Glorot-uniform weights, zero biases, deterministic per seed.
    pub fn init(hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            hidden,
            w1: glorot(&mut rng, 7, hidden, 7 * hidden),
            b1: vec![0.0; hidden],
            w2: glorot(&mut rng, hidden, hidden, hidden * hidden),
            b2: vec![0.0; hidden],
            w3: glorot(&mut rng, hidden, 3, hidden * 3),
            b3: vec![0.0; 3],
        }
    }

    /// All-zero network: maps every input to sigmoid(0) = (0.5, 0.5, 0.5).
    pub fn zeros(hidden: usize) -> Self {
        Self {
            hidden,
            w1: vec![0.0; 7 * hidden],
            b1: vec![0.0; hidden],
            w2: vec![0.0; hidden * hidden],
            b2: vec![0.0; hidden],
            w3: vec![0.0; hidden * 3],
            b3: vec![0.0; 3],
        }
    }

    /// Flat views over all parameter buffers, fixed order.
    pub fn param_buffers_mut(&mut self) -> [&mut Vec<f64>; 6] {
        [
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.w3,
            &mut self.b3,
        ]
    }

    pub fn param_buffers(&self) -> [&Vec<f64>; 6] {
        [&self.w1, &self.b1, &self.w2, &self.b2, &self.w3, &self.b3]
    }

    /// Copy parameters onto a tape for a differentiable application.
    pub fn to_tape(&self, tape: &mut Tape) -> Result<MutationTapeParams> {
        let h = self.hidden;
        Ok(MutationTapeParams {
            w1: tape.leaf(7, h, &self.w1)?,
            b1: tape.leaf(1, h, &self.b1)?,
            w2: tape.leaf(h, h, &self.w2)?,
            b2: tape.leaf(1, h, &self.b2)?,
            w3: tape.leaf(h, 3, &self.w3)?,
            b3: tape.leaf(1, 3, &self.b3)?,
        })
    }
}

/// Tape handles of one [`MutationNet`] parameter set.
#[derive(Debug, Clone, Copy)]
pub struct MutationTapeParams {
    pub w1: TapeTensor,
    pub b1: TapeTensor,
    pub w2: TapeTensor,
    pub b2: TapeTensor,
    pub w3: TapeTensor,
    pub b3: TapeTensor,
}

impl MutationTapeParams {
    pub fn tensors(&self) -> [TapeTensor; 6] {
        [self.w1, self.b1, self.w2, self.b2, self.w3, self.b3]
    }
}

/// Mutation schedule knobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MutationConfig {
    /// Applications of the network per mutation step.
    pub iterations: usize,
    /// Minimum fraction of the nominal footprint area that must remain
    /// covered by in-image pixels.
    pub min_valid_fraction: f64,
    /// Re-derive coarse colors from claimed children after movement.
    pub refresh_features: bool,
}

impl Default for MutationConfig {
    fn default() -> Self {
        Self {
            iterations: 1,
            min_valid_fraction: 0.25,
            refresh_features: true,
        }
    }
}

/// Differentiable position update for the mobile (level > 0) nodes.
///
/// `features` carries one `[c1, c2, c3, m]` row per mobile node and
/// `positions` the matching `(x, y, z)` rows. Each iteration feeds the
/// 7-vector `[features || position]` through the network; the recursion
/// re-enters the updated position, keeping the color context fixed.
pub fn mutate_on_tape(
    tape: &mut Tape,
    params: &MutationTapeParams,
    features: TapeTensor,
    positions: TapeTensor,
    iterations: usize,
) -> Result<TapeTensor> {
    if iterations == 0 {
        return Err(Error::InvalidArgument {
            what: "mutate_on_tape",
            detail: "iterations must be >= 1".into(),
        });
    }
    if features.cols() != 4 || positions.cols() != 3 || features.rows() != positions.rows() {
        return Err(Error::ShapeMismatch {
            op: "mutate_on_tape",
            detail: format!(
                "features {}x{}, positions {}x{}",
                features.rows(),
                features.cols(),
                positions.rows(),
                positions.cols()
            ),
        });
    }
    let mut pos = positions;
    for _ in 0..iterations {
        let input = tape.concat_cols(&[features, pos])?;
        let h1 = tape.matmul(input, params.w1)?;
        let h1 = tape.add(h1, params.b1)?;
        let h1 = tape.sigmoid(h1);
        let h2 = tape.matmul(h1, params.w2)?;
        let h2 = tape.add(h2, params.b2)?;
        let h2 = tape.sigmoid(h2);
        let out = tape.matmul(h2, params.w3)?;
        let out = tape.add(out, params.b3)?;
        pos = tape.sigmoid(out);
    }
    Ok(pos)
}

/// Apply the mutation network to every node above level 0 and write the new
/// positions back into the graph. Level-0 nodes are untouched.
pub fn mutate_positions(
    graph: &mut MagnificationGraph,
    net: &MutationNet,
    config: &MutationConfig,
) -> Result<()> {
    let start = graph.level_range(0).end;
    let count = graph.node_count() - start;
    if count == 0 {
        return Ok(());
    }
    let mut features = Vec::with_capacity(count * 4);
    let mut positions = Vec::with_capacity(count * 3);
    for node in &graph.nodes[start..] {
        features.extend_from_slice(&[
            node.color[0],
            node.color[1],
            node.color[2],
            node.magnification,
        ]);
        positions.extend_from_slice(&node.position);
    }
    let mut tape = Tape::new();
    let params = net.to_tape(&mut tape)?;
    let f = tape.leaf(count, 4, &features)?;
    let p = tape.leaf(count, 3, &positions)?;
    let out = mutate_on_tape(&mut tape, &params, f, p, config.iterations)?;
    let new_positions = tape.values(out).to_vec();
    graph.set_mobile_positions(&new_positions)
}

/// One repaired node in a [`ViolationReport`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Repair {
    pub node: u32,
    pub old_z: f64,
    pub new_z: f64,
    pub valid_pixels: usize,
    pub required: f64,
}

/// Machine-readable constraint repair outcome.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ViolationReport {
    pub repairs: Vec<Repair>,
}

impl ViolationReport {
    pub fn is_empty(&self) -> bool {
        self.repairs.is_empty()
    }
}

fn footprint_ok(graph: &MagnificationGraph, position: [f64; 3], fraction: f64) -> bool {
    let size = graph.base_size() as f64;
    let valid = graph.footprint_at(position).valid_count() as f64;
    let nominal = (position[2] * size) * (position[2] * size);
    valid > fraction * nominal
}

/// Repair positions that violate the footprint constraints: clamp every
/// coordinate into [0,1], then raise `z` of any level>0 node whose in-image
/// footprint covers no more than `min_valid_fraction` of its nominal area.
/// The smallest satisfying `z` is located by a coarse scan plus bisection to
/// 1e-6 resolution. Idempotent: a repaired graph reports no further repairs.
pub fn enforce_constraints(
    graph: &mut MagnificationGraph,
    config: &MutationConfig,
) -> ViolationReport {
    let mut report = ViolationReport::default();
    let fraction = config.min_valid_fraction;
    let size = graph.base_size() as f64;
    let start = graph.level_range(0).end;
    for id in start..graph.node_count() {
        let mut pos = graph.nodes[id].position;
        let mut touched = false;
        for c in &mut pos {
            let clamped = c.clamp(0.0, 1.0);
            if clamped != *c {
                *c = clamped;
                touched = true;
            }
        }
        let old_z = graph.nodes[id].position[2];
        if !footprint_ok(graph, pos, fraction) {
            // Coarse upward scan in half-pixel steps of the footprint
            // half-side, then bisect the bracketing interval. Within one
            // bracket the covered count jumps at most once, so the
            // predicate has a single false->true crossing.
            let step = 1.0 / (2.0 * size);
            let mut lo = pos[2];
            let mut hi = lo;
            let mut found = false;
            while hi < 1.0 {
                hi = (hi + step).min(1.0);
                let cand = [pos[0], pos[1], hi];
                if footprint_ok(graph, cand, fraction) {
                    found = true;
                    break;
                }
                lo = hi;
            }
            let new_z = if found {
                let mut lo = lo;
                let mut hi = hi;
                while hi - lo > 1e-6 {
                    let mid = 0.5 * (lo + hi);
                    if footprint_ok(graph, [pos[0], pos[1], mid], fraction) {
                        hi = mid;
                    } else {
                        lo = mid;
                    }
                }
                hi
            } else {
                1.0
            };
            let valid = graph.footprint_at([pos[0], pos[1], new_z]).valid_count();
            report.repairs.push(Repair {
                node: id as u32,
                old_z,
                new_z,
                valid_pixels: valid,
                required: fraction * (new_z * size) * (new_z * size),
            });
            pos[2] = new_z;
            touched = true;
        }
        if touched {
            graph.nodes[id].position = pos;
        }
    }
    report
}

/// Re-derive each coarse node's color as the mean color of the finer-level
/// nodes for which it is the nearest next-level node (Euclidean distance on
/// (x, y); ties break toward the lower node index). Nodes claiming no
/// children keep their color and are flagged. Runs bottom-up so level m+1
/// uses the refreshed colors of level m. Carries no gradient.
pub fn refresh_features(graph: &mut MagnificationGraph) {
    for m in 0..graph.levels().saturating_sub(1) {
        let child_range = graph.level_range(m);
        let parent_range = graph.level_range(m + 1);
        let parents: Vec<usize> = parent_range.clone().collect();
        let mut sums = vec![[0.0f64; 3]; parents.len()];
        let mut counts = vec![0usize; parents.len()];
        for child in child_range {
            let cp = graph.nodes[child].position;
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (k, &p) in parents.iter().enumerate() {
                let pp = graph.nodes[p].position;
                let dx = cp[0] - pp[0];
                let dy = cp[1] - pp[1];
                let d = dx * dx + dy * dy;
                if d < best_d {
                    best_d = d;
                    best = k;
                }
            }
            let c = graph.nodes[child].color;
            for k in 0..3 {
                sums[best][k] += c[k];
            }
            counts[best] += 1;
        }
        for (k, &p) in parents.iter().enumerate() {
            if counts[k] == 0 {
                graph.nodes[p].flagged = true;
            } else {
                let n = counts[k] as f64;
                graph.nodes[p].color = [sums[k][0] / n, sums[k][1] / n, sums[k][2] / n];
                graph.nodes[p].flagged = false;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::ImageBuf;
    use rand::Rng;

    fn graph_8x8_l3() -> MagnificationGraph {
        let mut g = MagnificationGraph::build(8, 8, 3, 2).unwrap();
        let mut img = ImageBuf::new(8, 8);
        for r in 0..8 {
            for c in 0..8 {
                let v = ((r * 5 + c * 3) % 11) as f64 / 11.0;
                img.set_pixel(r, c, [v, v * 0.5, 1.0 - v]);
            }
        }
        g.project_features(&img).unwrap();
        g
    }

    #[test]
    fn single_level_graph_never_moves() {
        let mut g = MagnificationGraph::build(4, 4, 1, 2).unwrap();
        let before: Vec<_> = g.nodes.iter().map(|n| n.position).collect();
        let net = MutationNet::init(8, 3);
        mutate_positions(&mut g, &net, &MutationConfig::default()).unwrap();
        let after: Vec<_> = g.nodes.iter().map(|n| n.position).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn zero_net_moves_to_center() {
        let mut g = graph_8x8_l3();
        let net = MutationNet::zeros(8);
        mutate_positions(&mut g, &net, &MutationConfig::default()).unwrap();
        for id in g.level_range(1).start..g.node_count() {
            assert_eq!(g.nodes[id].position, [0.5, 0.5, 0.5]);
        }
        for id in g.level_range(0) {
            // level 0 keeps its pixel-center default
            assert_ne!(g.nodes[id].position, [0.5, 0.5, 0.5]);
        }
    }

    #[test]
    fn two_iterations_compose() {
        let net = MutationNet::init(8, 9);
        let mut once_twice = graph_8x8_l3();
        let cfg1 = MutationConfig {
            iterations: 1,
            ..Default::default()
        };
        mutate_positions(&mut once_twice, &net, &cfg1).unwrap();
        mutate_positions(&mut once_twice, &net, &cfg1).unwrap();

        let mut k2 = graph_8x8_l3();
        let cfg2 = MutationConfig {
            iterations: 2,
            ..Default::default()
        };
        mutate_positions(&mut k2, &net, &cfg2).unwrap();

        for (a, b) in once_twice.nodes.iter().zip(&k2.nodes) {
            for k in 0..3 {
                assert!(
                    (a.position[k] - b.position[k]).abs() < 1e-15,
                    "{:?} vs {:?}",
                    a.position,
                    b.position
                );
            }
        }
    }

    #[test]
    fn default_graph_needs_no_repairs() {
        let mut g = graph_8x8_l3();
        let report = enforce_constraints(&mut g, &MutationConfig::default());
        assert!(report.is_empty());
    }

    #[test]
    fn corner_node_gets_raised() {
        let mut g = graph_8x8_l3();
        let id = g.node_id(1, 0, 0) as usize;
        g.nodes[id].position = [0.0, 0.0, 0.25];
        let before = g.footprint(id as u32).valid_count();
        let report = enforce_constraints(&mut g, &MutationConfig::default());
        assert_eq!(report.repairs.len(), 1);
        let repair = &report.repairs[0];
        assert_eq!(repair.node, id as u32);
        assert!(repair.new_z > 0.25, "z {}", repair.new_z);
        let after = g.footprint(id as u32).valid_count();
        assert!(after > before, "footprint {before} -> {after}");
    }

    #[test]
    fn oversized_z_clamped() {
        let mut g = graph_8x8_l3();
        let id = g.node_id(2, 0, 0) as usize;
        g.nodes[id].position = [0.5, 0.5, 1.3];
        enforce_constraints(&mut g, &MutationConfig::default());
        assert_eq!(g.nodes[id].position[2], 1.0);
    }

    #[test]
    fn repair_is_idempotent() {
        let mut g = graph_8x8_l3();
        let id = g.node_id(1, 0, 0) as usize;
        g.nodes[id].position = [0.0, 0.0, 0.25];
        let cfg = MutationConfig::default();
        enforce_constraints(&mut g, &cfg);
        let snapshot: Vec<_> = g.nodes.iter().map(|n| n.position).collect();
        let second = enforce_constraints(&mut g, &cfg);
        assert!(second.is_empty(), "{:?}", second.repairs);
        let after: Vec<_> = g.nodes.iter().map(|n| n.position).collect();
        assert_eq!(snapshot, after);
    }

    #[test]
    fn refresh_matches_projection_at_defaults() {
        let g = graph_8x8_l3();
        let mut refreshed = g.clone();
        refresh_features(&mut refreshed);
        for (a, b) in g.nodes.iter().zip(&refreshed.nodes) {
            for k in 0..3 {
                assert!(
                    (a.color[k] - b.color[k]).abs() < 1e-12,
                    "{:?} vs {:?}",
                    a.color,
                    b.color
                );
            }
        }
    }

    #[test]
    fn refresh_reassigns_children_of_distant_parent() {
        let mut g = graph_8x8_l3();
        // Push parent (1, 0, 0) far away; its former children must move to
        // the nearest remaining level-1 node.
        let moved = g.node_id(1, 0, 0) as usize;
        g.nodes[moved].position = [1.0, 1.0, 0.25];
        refresh_features(&mut g);

        // Brute-force assignment oracle over the same positions.
        let child_range = g.level_range(0);
        let parent_range = g.level_range(1);
        let mut sums = vec![[0.0f64; 3]; parent_range.len()];
        let mut counts = vec![0usize; parent_range.len()];
        for child in child_range {
            let cp = g.nodes[child].position;
            let (mut best, mut best_d) = (0usize, f64::INFINITY);
            for (k, p) in parent_range.clone().enumerate() {
                let pp = g.nodes[p].position;
                let d = (cp[0] - pp[0]).powi(2) + (cp[1] - pp[1]).powi(2);
                if d < best_d {
                    best_d = d;
                    best = k;
                }
            }
            for k in 0..3 {
                sums[best][k] += g.nodes[child].color[k];
            }
            counts[best] += 1;
        }
        for (k, p) in parent_range.clone().enumerate() {
            if counts[k] > 0 {
                for c in 0..3 {
                    let expect = sums[k][c] / counts[k] as f64;
                    assert!(
                        (g.nodes[p].color[c] - expect).abs() < 1e-12,
                        "parent {p} channel {c}"
                    );
                }
            }
        }
    }

    #[test]
    fn refresh_single_parent_takes_global_mean() {
        let mut g = MagnificationGraph::build(2, 2, 2, 2).unwrap();
        let mut img = ImageBuf::new(2, 2);
        for (k, v) in [0.1, 0.3, 0.5, 0.7].iter().enumerate() {
            img.set_pixel(k / 2, k % 2, [*v; 3]);
        }
        g.project_features(&img).unwrap();
        refresh_features(&mut g);
        let parent = g.node_id(1, 0, 0) as usize;
        assert!((g.nodes[parent].color[0] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn positions_stay_in_unit_cube_randomized() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let cfg = MutationConfig::default();
        for trial in 0..50u64 {
            let net = MutationNet::init(6, 1000 + trial);
            let mut g = graph_8x8_l3();
            for _ in 0..4 {
                match rng.gen_range(0..3) {
                    0 => mutate_positions(&mut g, &net, &cfg).unwrap(),
                    1 => {
                        enforce_constraints(&mut g, &cfg);
                    }
                    _ => refresh_features(&mut g),
                }
                for n in &g.nodes {
                    for c in n.position {
                        assert!((0.0..=1.0).contains(&c), "position {:?}", n.position);
                    }
                }
            }
        }
    }

    #[test]
    fn level0_bit_identical_across_ops() {
        let mut g = graph_8x8_l3();
        let before: Vec<u64> = g.level_range(0).fold(Vec::new(), |mut acc, id| {
            for c in g.nodes[id].position {
                acc.push(c.to_bits());
            }
            acc
        });
        let net = MutationNet::init(8, 21);
        let cfg = MutationConfig::default();
        for _ in 0..3 {
            mutate_positions(&mut g, &net, &cfg).unwrap();
            enforce_constraints(&mut g, &cfg);
            refresh_features(&mut g);
        }
        let after: Vec<u64> = g.level_range(0).fold(Vec::new(), |mut acc, id| {
            for c in g.nodes[id].position {
                acc.push(c.to_bits());
            }
            acc
        });
        assert_eq!(before, after);
    }
}
