//! Morton ordering and the bounding volume hierarchy.

use serde::{Deserialize, Serialize};

use crate::geometry::Aabb;
use crate::{Error, Result, Vec3};

// ---------------------------------------------------------------------------
// Morton codes
// ---------------------------------------------------------------------------

pub const MORTON_BITS: u32 = 21;
const MORTON_MAX: u32 = (1 << MORTON_BITS) - 1;

/// 63-bit Z-order index; `x` occupies bit 0, `y` bit 1, `z` bit 2, repeating.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MortonCode(pub u64);

fn spread_bits(v: u32) -> u64 {
    let mut x = v as u64 & 0x1f_ffff;
    x = (x | (x << 32)) & 0x001f_0000_0000_ffff;
    x = (x | (x << 16)) & 0x001f_0000_ff00_00ff;
    x = (x | (x << 8)) & 0x100f_00f0_0f00_f00f;
    x = (x | (x << 4)) & 0x10c3_0c30_c30c_30c3;
    x = (x | (x << 2)) & 0x1249_2492_4924_9249;
    x
}

fn compact_bits(code: u64) -> u32 {
    let mut x = code & 0x1249_2492_4924_9249;
    x = (x | (x >> 2)) & 0x10c3_0c30_c30c_30c3;
    x = (x | (x >> 4)) & 0x100f_00f0_0f00_f00f;
    x = (x | (x >> 8)) & 0x001f_0000_ff00_00ff;
    x = (x | (x >> 16)) & 0x001f_0000_0000_ffff;
    x = (x | (x >> 32)) & 0x1f_ffff;
    x as u32
}

pub fn morton_encode(p: [u32; 3]) -> Result<MortonCode> {
    if let Some(&bad) = p.iter().find(|&&v| v > MORTON_MAX) {
        return Err(Error::MortonRange(bad));
    }
    Ok(MortonCode(spread_bits(p[0]) | spread_bits(p[1]) << 1 | spread_bits(p[2]) << 2))
}

pub fn morton_decode(code: MortonCode) -> [u32; 3] {
    [compact_bits(code.0), compact_bits(code.0 >> 1), compact_bits(code.0 >> 2)]
}

/// Normalises `p` to `[0, 1)` within `bounds` per axis and scales to the
/// 21-bit lattice. Degenerate axes map to 0.
pub fn quantize(p: &Vec3, bounds: &Aabb) -> [u32; 3] {
    let scale = (1u64 << MORTON_BITS) as f64;
    let mut out = [0u32; 3];
    for i in 0..3 {
        let extent = bounds.max[i] - bounds.min[i];
        if extent > 0.0 {
            let u = ((p[i] - bounds.min[i]) / extent).clamp(0.0, 1.0);
            out[i] = ((u * scale) as u64).min(MORTON_MAX as u64) as u32;
        }
    }
    out
}

/// Permutation sorting `points` by ascending Morton code within `bounds`;
/// `perm[new_position] = old_index`. Ties keep their original order.
pub fn morton_order(points: &[Vec3], bounds: &Aabb) -> Vec<usize> {
    let codes: Vec<MortonCode> = points
        .iter()
        .map(|p| morton_encode(quantize(p, bounds)).expect("quantize stays in range"))
        .collect();
    let mut perm: Vec<usize> = (0..points.len()).collect();
    perm.sort_by_key(|&i| codes[i]);
    perm
}

// ---------------------------------------------------------------------------
// Ray-ellipsoid intersection
// ---------------------------------------------------------------------------

/// Intersection of the line `o + t·d` with the unit sphere, where `o` and
/// `d` are already expressed in the ellipsoid's normalised frame (so the
/// ellipsoid is the unit ball and `d` is not unit length).
///
/// The discriminant is evaluated as `a·(1 - |o⊥|²)` with `o⊥` the component
/// of `o` orthogonal to `d`, and the two roots are recovered as `q/a` and
/// `c/q`, which avoids cancellation for grazing and distant rays.
pub fn unit_sphere_interval(o: &Vec3, d: &Vec3) -> Option<(f64, f64)> {
    let a = d.norm_squared();
    if a == 0.0 {
        return None;
    }
    let b = o.dot(d);
    let c = o.norm_squared() - 1.0;
    let perp = o - d * (b / a);
    let disc = a * (1.0 - perp.norm_squared());
    if disc < 0.0 {
        return None;
    }
    let q = -(b + b.signum() * disc.sqrt());
    if q == 0.0 {
        return Some((0.0, 0.0));
    }
    let (t0, t1) = (q / a, c / q);
    Some(if t0 <= t1 { (t0, t1) } else { (t1, t0) })
}

// ---------------------------------------------------------------------------
// BVH
// ---------------------------------------------------------------------------

pub const MAX_LEAF_SIZE: usize = 4;
const SAH_BINS: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NodeKind {
    Inner { left: u32, right: u32 },
    Leaf { first: u32, count: u32 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BvhNode {
    pub bounds: Aabb,
    pub kind: NodeKind,
}

/// Counters gathered during traversal.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraversalStats {
    pub node_visits: u64,
    pub aabb_hits: u64,
    pub ellipsoid_hits: u64,
}

impl std::ops::AddAssign for TraversalStats {
    fn add_assign(&mut self, o: Self) {
        self.node_visits += o.node_visits;
        self.aabb_hits += o.aabb_hits;
        self.ellipsoid_hits += o.ellipsoid_hits;
    }
}

/// Binary BVH over item boxes, built with binned SAH. Items are referred to
/// by their position in the slice passed to [`Bvh::build`].
#[derive(Clone, Debug)]
pub struct Bvh {
    nodes: Vec<BvhNode>,
    items: Vec<u32>,
    item_bounds: Vec<Aabb>,
}

struct BuildItem {
    index: u32,
    bounds: Aabb,
    centroid: Vec3,
}

impl Bvh {
    pub fn build(boxes: &[Aabb]) -> Result<Bvh> {
        if boxes.is_empty() {
            return Err(Error::EmptyScene);
        }
        let mut work: Vec<BuildItem> = boxes
            .iter()
            .enumerate()
            .map(|(i, b)| BuildItem { index: i as u32, bounds: *b, centroid: b.center() })
            .collect();
        let mut bvh = Bvh { nodes: Vec::with_capacity(2 * boxes.len()), items: Vec::new(), item_bounds: boxes.to_vec() };
        bvh.build_range(&mut work, 0);
        bvh.items = work.iter().map(|w| w.index).collect();
        Ok(bvh)
    }

    /// Builds the subtree for `work` (reordered in place) and returns its
    /// node index. Leaf ranges are offsets into the final item order.
    fn build_range(&mut self, work: &mut [BuildItem], offset: usize) -> u32 {
        let bounds = work.iter().fold(Aabb::empty(), |acc, w| acc.union(&w.bounds));
        let node_index = self.nodes.len() as u32;
        self.nodes.push(BvhNode { bounds, kind: NodeKind::Leaf { first: offset as u32, count: work.len() as u32 } });
        if work.len() <= MAX_LEAF_SIZE {
            return node_index;
        }
        let mid = split_items(work);
        let (left_items, right_items) = work.split_at_mut(mid);
        let left = self.build_range(left_items, offset);
        let right = self.build_range(right_items, offset + mid);
        self.nodes[node_index as usize].kind = NodeKind::Inner { left, right };
        node_index
    }

    pub fn nodes(&self) -> &[BvhNode] {
        &self.nodes
    }

    pub fn root_bounds(&self) -> Aabb {
        self.nodes[0].bounds
    }

    pub fn len(&self) -> usize {
        self.item_bounds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.item_bounds.is_empty()
    }

    pub fn item_bounds(&self) -> &[Aabb] {
        &self.item_bounds
    }

    /// Items in each leaf, in leaf order.
    pub fn leaf_items(&self, node: &BvhNode) -> &[u32] {
        match node.kind {
            NodeKind::Leaf { first, count } => &self.items[first as usize..(first + count) as usize],
            NodeKind::Inner { .. } => &[],
        }
    }

    /// Items whose boxes contain `p`.
    pub fn point_query(&self, p: &Vec3) -> Vec<u32> {
        let mut out = Vec::new();
        let mut stack = vec![0u32];
        while let Some(n) = stack.pop() {
            let node = &self.nodes[n as usize];
            if !node.bounds.contains_point(p) {
                continue;
            }
            match node.kind {
                NodeKind::Inner { left, right } => {
                    stack.push(right);
                    stack.push(left);
                }
                NodeKind::Leaf { .. } => {
                    out.extend(self.leaf_items(node).iter().filter(|&&i| self.item_bounds[i as usize].contains_point(p)));
                }
            }
        }
        out
    }

    /// Smallest `t` in `[lo, hi]` reported by `entry` over items whose boxes
    /// the ray reaches before the current best. `entry(item, lo, hi)` returns
    /// the first parameter in `[lo, hi]` at which the ray is inside the
    /// item's true surface, if any.
    pub fn closest_hit<F>(&self, origin: &Vec3, dir: &Vec3, lo: f64, hi: f64, stats: &mut TraversalStats, mut entry: F) -> Option<f64>
    where
        F: FnMut(u32, f64, f64) -> Option<f64>,
    {
        let mut best = hi;
        let mut found = false;
        let mut stack: Vec<(u32, f64)> = Vec::with_capacity(64);
        if let Some((t0, t1)) = self.nodes[0].bounds.ray_interval(origin, dir) {
            if t0 <= hi && t1 >= lo {
                stack.push((0, t0.max(lo)));
            }
        }
        while let Some((n, t_enter)) = stack.pop() {
            if t_enter > best {
                continue;
            }
            stats.node_visits += 1;
            let node = &self.nodes[n as usize];
            match node.kind {
                NodeKind::Leaf { .. } => {
                    for &item in self.leaf_items(node) {
                        if !self.item_bounds[item as usize].overlaps_segment(origin, dir, lo, best) {
                            continue;
                        }
                        stats.aabb_hits += 1;
                        if let Some(t) = entry(item, lo, best) {
                            stats.ellipsoid_hits += 1;
                            if t <= best {
                                best = t;
                                found = true;
                            }
                        }
                    }
                }
                NodeKind::Inner { left, right } => {
                    let l = self.child_entry(left, origin, dir, lo, best);
                    let r = self.child_entry(right, origin, dir, lo, best);
                    match (l, r) {
                        (Some(tl), Some(tr)) => {
                            if tl <= tr {
                                stack.push((right, tr));
                                stack.push((left, tl));
                            } else {
                                stack.push((left, tl));
                                stack.push((right, tr));
                            }
                        }
                        (Some(tl), None) => stack.push((left, tl)),
                        (None, Some(tr)) => stack.push((right, tr)),
                        (None, None) => {}
                    }
                }
            }
        }
        found.then_some(best)
    }

    fn child_entry(&self, n: u32, origin: &Vec3, dir: &Vec3, lo: f64, hi: f64) -> Option<f64> {
        let (t0, t1) = self.nodes[n as usize].bounds.ray_interval(origin, dir)?;
        (t0 <= hi && t1 >= lo).then(|| t0.max(lo))
    }

    /// Visits every item whose box overlaps the ray over `[lo, hi]` by slab
    /// intervals, so a segment lying entirely inside a box is still reported.
    pub fn for_each_overlap<F>(&self, origin: &Vec3, dir: &Vec3, lo: f64, hi: f64, stats: &mut TraversalStats, mut visit: F) -> Result<()>
    where
        F: FnMut(u32) -> Result<()>,
    {
        let mut stack: Vec<u32> = Vec::with_capacity(64);
        stack.push(0);
        while let Some(n) = stack.pop() {
            let node = &self.nodes[n as usize];
            if !node.bounds.overlaps_segment(origin, dir, lo, hi) {
                continue;
            }
            stats.node_visits += 1;
            match node.kind {
                NodeKind::Inner { left, right } => {
                    stack.push(right);
                    stack.push(left);
                }
                NodeKind::Leaf { .. } => {
                    for &item in self.leaf_items(node) {
                        if self.item_bounds[item as usize].overlaps_segment(origin, dir, lo, hi) {
                            stats.aabb_hits += 1;
                            visit(item)?;
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Checks the structural invariants: parents contain children and every
    /// item appears in exactly one leaf.
    pub fn validate(&self) -> std::result::Result<(), String> {
        let mut seen = vec![0u32; self.item_bounds.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            match node.kind {
                NodeKind::Inner { left, right } => {
                    for c in [left, right] {
                        if !node.bounds.contains_box(&self.nodes[c as usize].bounds) {
                            return Err(format!("node {i} does not contain child {c}"));
                        }
                    }
                }
                NodeKind::Leaf { count, .. } => {
                    if count as usize > MAX_LEAF_SIZE {
                        return Err(format!("leaf {i} holds {count} items"));
                    }
                    for &item in self.leaf_items(node) {
                        if !node.bounds.contains_box(&self.item_bounds[item as usize]) {
                            return Err(format!("leaf {i} does not contain item {item}"));
                        }
                        seen[item as usize] += 1;
                    }
                }
            }
        }
        match seen.iter().position(|&c| c != 1) {
            Some(i) => Err(format!("item {i} appears in {} leaves", seen[i])),
            None => Ok(()),
        }
    }
}

/// Builds a BVH over a nonempty list of boxes.
pub fn bvh_build(aabbs: &[Aabb]) -> Result<Bvh> {
    Bvh::build(aabbs)
}

/// Partitions `work` by the cheapest binned-SAH plane and returns the split
/// position. Falls back to a median split on the widest centroid axis when
/// centroids coincide or no plane separates the items.
fn split_items(work: &mut [BuildItem]) -> usize {
    let centroid_bounds = work.iter().fold(Aabb::empty(), |mut acc, w| {
        acc.grow(&w.centroid);
        acc
    });
    let extent = centroid_bounds.extent();
    let mut best: Option<(f64, usize, usize)> = None;
    for axis in 0..3 {
        if !(extent[axis] > 0.0) {
            continue;
        }
        let lo = centroid_bounds.min[axis];
        let scale = SAH_BINS as f64 / extent[axis];
        let bin_of = |c: f64| (((c - lo) * scale) as usize).min(SAH_BINS - 1);
        let mut bins = [(Aabb::empty(), 0usize); SAH_BINS];
        for w in work.iter() {
            let b = &mut bins[bin_of(w.centroid[axis])];
            b.0 = b.0.union(&w.bounds);
            b.1 += 1;
        }
        let mut right_area = [0.0; SAH_BINS];
        let mut right_count = [0usize; SAH_BINS];
        let mut acc = (Aabb::empty(), 0usize);
        for i in (1..SAH_BINS).rev() {
            acc.0 = acc.0.union(&bins[i].0);
            acc.1 += bins[i].1;
            right_area[i] = acc.0.surface_area();
            right_count[i] = acc.1;
        }
        let mut left = (Aabb::empty(), 0usize);
        for split in 1..SAH_BINS {
            left.0 = left.0.union(&bins[split - 1].0);
            left.1 += bins[split - 1].1;
            if left.1 == 0 || right_count[split] == 0 {
                continue;
            }
            let cost = left.0.surface_area() * left.1 as f64 + right_area[split] * right_count[split] as f64;
            if best.map_or(true, |(c, _, _)| cost < c) {
                best = Some((cost, axis, split));
            }
        }
    }
    if let Some((_, axis, split)) = best {
        let lo = centroid_bounds.min[axis];
        let scale = SAH_BINS as f64 / extent[axis];
        let bin_of = |c: f64| (((c - lo) * scale) as usize).min(SAH_BINS - 1);
        let mid = partition_in_place(work, |w| bin_of(w.centroid[axis]) < split);
        if mid > 0 && mid < work.len() {
            return mid;
        }
    }
    let axis = extent.imax();
    work.sort_by(|a, b| a.centroid[axis].total_cmp(&b.centroid[axis]).then(a.index.cmp(&b.index)));
    work.len() / 2
}

fn partition_in_place<T, F: Fn(&T) -> bool>(v: &mut [T], pred: F) -> usize {
    let mut i = 0;
    for j in 0..v.len() {
        if pred(&v[j]) {
            v.swap(i, j);
            i += 1;
        }
    }
    i
}

// ---------------------------------------------------------------------------
// Hit buffer
// ---------------------------------------------------------------------------

/// Fixed-capacity list of primitive indices collected for one segment.
#[derive(Clone, Debug)]
pub struct HitBuffer {
    indices: Vec<u32>,
    capacity: usize,
}

pub const DEFAULT_HIT_CAPACITY: usize = 64;

impl HitBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "hit buffer capacity must be positive");
        Self { indices: Vec::with_capacity(capacity.min(1 << 16)), capacity }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn clear(&mut self) {
        self.indices.clear();
    }

    pub fn push(&mut self, index: u32) -> Result<()> {
        if self.indices.len() >= self.capacity {
            return Err(Error::BufferOverflow { capacity: self.capacity });
        }
        self.indices.push(index);
        Ok(())
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.indices
    }

    pub fn as_mut_slice(&mut self) -> &mut [u32] {
        &mut self.indices
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::{random_unit, rng, uniform_in_box};
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn morton_examples() {
        assert_eq!(morton_encode([0, 0, 0]).unwrap(), MortonCode(0));
        assert_eq!(morton_encode([1, 1, 1]).unwrap(), MortonCode(7));
        assert_eq!(morton_encode([3, 1, 0]).unwrap(), MortonCode(0b001011));
        assert_eq!(morton_decode(MortonCode(11)), [3, 1, 0]);
        assert!(morton_encode([1 << 21, 0, 0]).is_err());
    }

    #[test]
    fn morton_boundary_roundtrip() {
        for p in [[MORTON_MAX, 0, 0], [0, MORTON_MAX, 0], [0, 0, MORTON_MAX], [MORTON_MAX; 3], [1 << 20, 12345, 7]] {
            assert_eq!(morton_decode(morton_encode(p).unwrap()), p);
        }
        assert_eq!(morton_encode([MORTON_MAX; 3]).unwrap().0, (1u64 << 63) - 1);
    }

    proptest! {
        #[test]
        fn morton_roundtrip(x in 0..=MORTON_MAX, y in 0..=MORTON_MAX, z in 0..=MORTON_MAX) {
            prop_assert_eq!(morton_decode(morton_encode([x, y, z]).unwrap()), [x, y, z]);
        }

        #[test]
        fn sphere_interval_roots_lie_on_surface(
            ox in -5.0..5.0f64, oy in -5.0..5.0f64, oz in -5.0..5.0f64,
            dx in -1.0..1.0f64, dy in -1.0..1.0f64, dz in -1.0..1.0f64,
        ) {
            let d = Vec3::new(dx, dy, dz);
            prop_assume!(d.norm() > 1e-3);
            let o = Vec3::new(ox, oy, oz);
            if let Some((t0, t1)) = unit_sphere_interval(&o, &d) {
                prop_assert!(t0 <= t1);
                for t in [t0, t1] {
                    prop_assert!(((o + d * t).norm() - 1.0).abs() < 1e-9);
                }
            } else {
                let perp = o - d * (o.dot(&d) / d.norm_squared());
                prop_assert!(perp.norm() > 1.0 - 1e-12);
            }
        }
    }

    #[test]
    fn grazing_far_ray_stays_accurate() {
        // Origin 1e6 away; chord at distance 0.999 from the center.
        let o = Vec3::new(-1e6, 0.999, 0.0);
        let (t0, t1) = unit_sphere_interval(&o, &Vec3::x()).unwrap();
        let half = (1.0f64 - 0.999 * 0.999).sqrt();
        assert!((t1 - t0 - 2.0 * half).abs() < 1e-9);
    }

    fn random_boxes(n: usize, seed: u64) -> Vec<Aabb> {
        let mut r = rng(seed);
        (0..n)
            .map(|_| {
                let c = uniform_in_box(&mut r, Vec3::repeat(-10.0), Vec3::repeat(10.0));
                let h = Vec3::new(r.gen_range(0.01..1.0), r.gen_range(0.01..1.0), r.gen_range(0.01..1.0));
                Aabb::from_center_half(c, h)
            })
            .collect()
    }

    #[test]
    fn single_and_pair() {
        let one = Bvh::build(&random_boxes(1, 1)).unwrap();
        assert_eq!(one.nodes().len(), 1);
        assert!(matches!(one.nodes()[0].kind, NodeKind::Leaf { count: 1, .. }));

        let a = Aabb::new(Vec3::zeros(), Vec3::repeat(1.0));
        let b = Aabb::new(Vec3::repeat(5.0), Vec3::repeat(6.0));
        let boxes = vec![a, b, a, b, b];
        let bvh = Bvh::build(&boxes).unwrap();
        assert_eq!(bvh.root_bounds(), a.union(&b));
        bvh.validate().unwrap();

        let two = Bvh::build(&[a, b]).unwrap();
        assert_eq!(two.root_bounds(), a.union(&b));
        assert!(Bvh::build(&[]).is_err());
    }

    #[test]
    fn point_queries_match_brute_force() {
        let boxes = random_boxes(10_000, 2);
        let bvh = Bvh::build(&boxes).unwrap();
        bvh.validate().unwrap();
        let mut r = rng(3);
        for _ in 0..2_000 {
            let p = uniform_in_box(&mut r, Vec3::repeat(-11.0), Vec3::repeat(11.0));
            let mut got = bvh.point_query(&p);
            got.sort_unstable();
            let want: Vec<u32> = (0..boxes.len() as u32).filter(|&i| boxes[i as usize].contains_point(&p)).collect();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn overlap_queries_match_brute_force() {
        let boxes = random_boxes(2_000, 4);
        let bvh = Bvh::build(&boxes).unwrap();
        let mut r = rng(5);
        for _ in 0..500 {
            let o = uniform_in_box(&mut r, Vec3::repeat(-15.0), Vec3::repeat(15.0));
            let d = random_unit(&mut r);
            let lo = r.gen_range(0.0..20.0);
            let hi = lo + r.gen_range(0.0..5.0);
            let mut got = Vec::new();
            bvh.for_each_overlap(&o, &d, lo, hi, &mut TraversalStats::default(), |i| {
                got.push(i);
                Ok(())
            })
            .unwrap();
            got.sort_unstable();
            let want: Vec<u32> =
                (0..boxes.len() as u32).filter(|&i| boxes[i as usize].overlaps_segment(&o, &d, lo, hi)).collect();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn coincident_centroids_still_split() {
        let boxes = vec![Aabb::new(Vec3::repeat(-1.0), Vec3::repeat(1.0)); 37];
        let bvh = Bvh::build(&boxes).unwrap();
        bvh.validate().unwrap();
    }

    #[test]
    fn hit_buffer_overflow() {
        let mut buf = HitBuffer::new(2);
        buf.push(1).unwrap();
        buf.push(2).unwrap();
        assert!(matches!(buf.push(3), Err(Error::BufferOverflow { capacity: 2 })));
    }
}
