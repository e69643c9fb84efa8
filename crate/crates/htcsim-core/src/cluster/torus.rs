//! Node coordinates on a 3D torus and the two placement policies.
//!
//! Transparent placement takes the lowest-id free nodes. Topology-aware
//! placement returns the free subset whose wraparound bounding box has the
//! smallest volume, breaking ties by the lexicographically smallest id set,
//! and refuses allocations whose best volume is not strictly below
//! `compactness_limit * nodes_requested`.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::ids::NodeId;

/// Torus extents; node ids map to coordinates with x varying fastest:
/// `id = x + X * (y + Y * z)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TorusDims {
    pub x: u32,
    pub y: u32,
    pub z: u32,
}

impl TorusDims {
    pub fn new(x: u32, y: u32, z: u32) -> Self {
        assert!(x > 0 && y > 0 && z > 0, "torus dims must be positive");
        TorusDims { x, y, z }
    }

    pub fn len(&self) -> u32 {
        self.x * self.y * self.z
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn coord_of(&self, id: NodeId) -> (u32, u32, u32) {
        let i = id.0;
        (i % self.x, (i / self.x) % self.y, i / (self.x * self.y))
    }

    pub fn id_of(&self, x: u32, y: u32, z: u32) -> NodeId {
        debug_assert!(x < self.x && y < self.y && z < self.z);
        NodeId(x + self.x * (y + self.y * z))
    }

    /// Near-cubic factorization of `n` into torus extents `x >= y >= z`.
    pub fn for_nodes(n: u32) -> TorusDims {
        assert!(n > 0);
        let mut best: Option<(u32, u32, u32)> = None;
        let mut z = 1;
        while z * z * z <= n {
            if n % z == 0 {
                let m = n / z;
                let mut y = z;
                while y * y <= m {
                    if m % y == 0 {
                        let x = m / y;
                        let cand = (x, y, z);
                        let better = match best {
                            None => true,
                            // prefer smallest spread, then smallest max extent
                            Some((bx, _, bz)) => (x - z, x) < (bx - bz, bx),
                        };
                        if better {
                            best = Some(cand);
                        }
                    }
                    y += 1;
                }
            }
            z += 1;
        }
        let (x, y, z) = best.expect("n > 0 always factors");
        TorusDims { x, y, z }
    }
}

/// Result of a placement attempt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PlaceOutcome {
    /// Node set of exactly the requested size, sorted ascending.
    Placed(Vec<NodeId>),
    /// Enough free nodes exist but no subset is compact enough.
    NoFit,
    /// Fewer free nodes than requested.
    Insufficient,
}

pub fn place_transparent(count: u32, free: &BTreeSet<NodeId>) -> PlaceOutcome {
    if (free.len() as u32) < count {
        return PlaceOutcome::Insufficient;
    }
    PlaceOutcome::Placed(free.iter().copied().take(count as usize).collect())
}

/// Exact minimum-bounding-volume search.
///
/// Any subset's bounding box is an axis-aligned (possibly wrapping) box, so
/// scanning boxes in ascending volume and picking the `count` lowest free
/// ids inside the first feasible volume class yields the optimal subset.
pub fn place_topology_aware(
    dims: TorusDims,
    count: u32,
    free: &BTreeSet<NodeId>,
    compactness_limit: f64,
) -> PlaceOutcome {
    if (free.len() as u32) < count {
        return PlaceOutcome::Insufficient;
    }
    if count == 0 {
        return PlaceOutcome::Placed(Vec::new());
    }
    let feasible = |vol: u32| (vol as f64) < compactness_limit * count as f64;

    // Candidate shapes, ascending by volume.
    let mut shapes: Vec<(u32, u32, u32, u32)> = Vec::new();
    for dx in 1..=dims.x {
        for dy in 1..=dims.y {
            for dz in 1..=dims.z {
                let vol = dx * dy * dz;
                if vol >= count && feasible(vol) {
                    shapes.push((vol, dx, dy, dz));
                }
            }
        }
    }
    shapes.sort_unstable();

    let n = dims.len() as usize;
    let mut mask = vec![0u16; n];
    for id in free {
        mask[id.0 as usize] = 1;
    }

    let mut best: Option<Vec<NodeId>> = None;
    let mut best_vol: Option<u32> = None;
    for &(vol, dx, dy, dz) in &shapes {
        if let Some(bv) = best_vol {
            if vol > bv {
                break;
            }
        }
        let counts = window_counts(dims, &mask, dx, dy, dz);
        let xs = if dx == dims.x { 1 } else { dims.x };
        let ys = if dy == dims.y { 1 } else { dims.y };
        let zs = if dz == dims.z { 1 } else { dims.z };
        for z0 in 0..zs {
            for y0 in 0..ys {
                for x0 in 0..xs {
                    let at = dims.id_of(x0, y0, z0).0 as usize;
                    if u32::from(counts[at]) < count {
                        continue;
                    }
                    let cand = lowest_ids_in_box(dims, free, (x0, y0, z0), (dx, dy, dz), count);
                    if best.as_ref().is_none_or(|b| cand < *b) {
                        best = Some(cand);
                        best_vol = Some(vol);
                    }
                }
            }
        }
    }
    match best {
        Some(ids) => PlaceOutcome::Placed(ids),
        None => PlaceOutcome::NoFit,
    }
}

/// Free-node count of every (dx,dy,dz) window via three circular sliding sums.
fn window_counts(dims: TorusDims, mask: &[u16], dx: u32, dy: u32, dz: u32) -> Vec<u16> {
    let (nx, ny, nz) = (dims.x as usize, dims.y as usize, dims.z as usize);
    let idx = |x: usize, y: usize, z: usize| x + nx * (y + ny * z);

    let mut cur = mask.to_vec();
    // x direction
    if dx > 1 {
        let mut out = vec![0u16; cur.len()];
        for z in 0..nz {
            for y in 0..ny {
                let mut sum: u16 = (0..dx as usize).map(|i| cur[idx(i % nx, y, z)]).sum();
                for x in 0..nx {
                    out[idx(x, y, z)] = sum;
                    sum -= cur[idx(x, y, z)];
                    sum += cur[idx((x + dx as usize) % nx, y, z)];
                }
            }
        }
        cur = out;
    }
    // y direction
    if dy > 1 {
        let mut out = vec![0u16; cur.len()];
        for z in 0..nz {
            for x in 0..nx {
                let mut sum: u16 = (0..dy as usize).map(|i| cur[idx(x, i % ny, z)]).sum();
                for y in 0..ny {
                    out[idx(x, y, z)] = sum;
                    sum -= cur[idx(x, y, z)];
                    sum += cur[idx(x, (y + dy as usize) % ny, z)];
                }
            }
        }
        cur = out;
    }
    // z direction
    if dz > 1 {
        let mut out = vec![0u16; cur.len()];
        for y in 0..ny {
            for x in 0..nx {
                let mut sum: u16 = (0..dz as usize).map(|i| cur[idx(x, y, i % nz)]).sum();
                for z in 0..nz {
                    out[idx(x, y, z)] = sum;
                    sum -= cur[idx(x, y, z)];
                    sum += cur[idx(x, y, (z + dz as usize) % nz)];
                }
            }
        }
        cur = out;
    }
    cur
}

fn lowest_ids_in_box(
    dims: TorusDims,
    free: &BTreeSet<NodeId>,
    anchor: (u32, u32, u32),
    extent: (u32, u32, u32),
    count: u32,
) -> Vec<NodeId> {
    let mut ids: Vec<NodeId> = Vec::new();
    for iz in 0..extent.2 {
        for iy in 0..extent.1 {
            for ix in 0..extent.0 {
                let id = dims.id_of(
                    (anchor.0 + ix) % dims.x,
                    (anchor.1 + iy) % dims.y,
                    (anchor.2 + iz) % dims.z,
                );
                if free.contains(&id) {
                    ids.push(id);
                }
            }
        }
    }
    ids.sort_unstable();
    ids.truncate(count as usize);
    ids
}

/// Wraparound-aware bounding-box volume of a node set.
pub fn bounding_volume(dims: TorusDims, nodes: &[NodeId]) -> u32 {
    assert!(!nodes.is_empty());
    let coords: Vec<(u32, u32, u32)> = nodes.iter().map(|n| dims.coord_of(*n)).collect();
    let ext = |pick: fn(&(u32, u32, u32)) -> u32, dim: u32| -> u32 {
        let mut cs: Vec<u32> = coords.iter().map(pick).collect();
        cs.sort_unstable();
        cs.dedup();
        if cs.len() as u32 == dim {
            return dim;
        }
        // extent = dim minus the longest empty circular run
        let mut max_run = 0;
        for i in 0..cs.len() {
            let next = if i + 1 == cs.len() { cs[0] + dim } else { cs[i + 1] };
            max_run = max_run.max(next - cs[i] - 1);
        }
        dim - max_run
    };
    ext(|c| c.0, dims.x) * ext(|c| c.1, dims.y) * ext(|c| c.2, dims.z)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(v: &[u32]) -> Vec<NodeId> {
        v.iter().map(|i| NodeId(*i)).collect()
    }

    fn free_set(v: &[u32]) -> BTreeSet<NodeId> {
        v.iter().map(|i| NodeId(*i)).collect()
    }

    #[test]
    fn for_nodes_factors_near_cubic() {
        assert_eq!(TorusDims::for_nodes(500), TorusDims { x: 10, y: 10, z: 5 });
        assert_eq!(TorusDims::for_nodes(8), TorusDims { x: 2, y: 2, z: 2 });
        assert_eq!(TorusDims::for_nodes(100), TorusDims { x: 5, y: 5, z: 4 });
        assert_eq!(TorusDims::for_nodes(7), TorusDims { x: 7, y: 1, z: 1 });
        assert_eq!(TorusDims::for_nodes(1), TorusDims { x: 1, y: 1, z: 1 });
    }

    #[test]
    fn coord_roundtrip() {
        let dims = TorusDims::new(4, 3, 2);
        for i in 0..dims.len() {
            let (x, y, z) = dims.coord_of(NodeId(i));
            assert_eq!(dims.id_of(x, y, z), NodeId(i));
        }
    }

    #[test]
    fn transparent_takes_lowest_ids() {
        let free = free_set(&[1, 3, 4, 6]);
        assert_eq!(place_transparent(2, &free), PlaceOutcome::Placed(ids(&[1, 3])));
        assert_eq!(place_transparent(5, &free), PlaceOutcome::Insufficient);
    }

    #[test]
    fn topology_picks_compact_block_on_cube() {
        // all 8 nodes free on a 2x2x2 torus, request 4 -> a 2x2x1 block, volume 4
        let dims = TorusDims::new(2, 2, 2);
        let free: BTreeSet<NodeId> = (0..8).map(NodeId).collect();
        match place_topology_aware(dims, 4, &free, 2.0) {
            PlaceOutcome::Placed(set) => {
                assert_eq!(bounding_volume(dims, &set), 4);
                // lexicographically smallest min-volume subset is the z=0 plane
                assert_eq!(set, ids(&[0, 1, 2, 3]));
            }
            other => panic!("expected placement, got {other:?}"),
        }
    }

    #[test]
    fn topology_rejects_scattered_corners() {
        // free nodes at 4 pairwise non-adjacent corners of a 2x2x2 torus:
        // minimum bounding volume is 8, not strictly below 2 * 4
        let dims = TorusDims::new(2, 2, 2);
        let free = free_set(&[0, 3, 5, 6]);
        assert_eq!(place_topology_aware(dims, 4, &free, 2.0), PlaceOutcome::NoFit);
    }

    #[test]
    fn wrap_extent_counts_cells() {
        let dims = TorusDims::new(8, 1, 1);
        assert_eq!(bounding_volume(dims, &ids(&[0, 1])), 2);
        // 7 and 0 are adjacent across the wrap
        assert_eq!(bounding_volume(dims, &ids(&[0, 7])), 2);
        assert_eq!(bounding_volume(dims, &ids(&[3])), 1);
        assert_eq!(bounding_volume(dims, &ids(&[0, 4])), 5);
    }

    #[test]
    fn wrapping_block_found() {
        // free cells 6,7,0,1 on an 8-ring: a wrap block of volume 4
        let dims = TorusDims::new(8, 1, 1);
        let free = free_set(&[0, 1, 6, 7]);
        match place_topology_aware(dims, 4, &free, 1.5) {
            PlaceOutcome::Placed(set) => {
                assert_eq!(set, ids(&[0, 1, 6, 7]));
                assert_eq!(bounding_volume(dims, &set), 4);
            }
            other => panic!("expected placement, got {other:?}"),
        }
    }
}
