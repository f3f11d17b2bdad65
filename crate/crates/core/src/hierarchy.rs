//! Multilevel octree node structure and the diagonal Gram-weight recursion.
//!
//! Level `L` holds the occupied voxels; each coarser level holds the unique
//! parents of the level below. Nodes are Morton-sorted, so the children of
//! one parent form a contiguous run and per-level arrays can be indexed by
//! rank. The Gram matrix of the level-`l` basis is diagonal for disjoint
//! first-order supports; its weights follow the recursion
//! `g[l][i] = sum_j w(d_ij)^2 g[l+1][j]` over the children of node `i`.

use crate::cloud_io::VoxelizedCloud;
use crate::error::{Error, Result};
use crate::morton;

/// One analysis or synthesis kernel: 8 weights indexed by the child octant
/// `(dx << 2) | (dy << 1) | dz`. All-ones is the classical transform.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AKernel(pub [f64; 8]);

impl AKernel {
    pub fn unit() -> Self {
        AKernel([1.0; 8])
    }

    pub fn validate_positive(&self) -> Result<()> {
        if self.0.iter().any(|w| !(*w > 0.0) || !w.is_finite()) {
            return Err(Error::Parameter(format!(
                "kernel entries must be strictly positive, got {:?}",
                self.0
            )));
        }
        Ok(())
    }
}

impl Default for AKernel {
    fn default() -> Self {
        Self::unit()
    }
}

/// Contiguous child range of one parent node at the next finer level.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Block {
    /// Index of the parent in `nodes[l]`; equals the block's own rank.
    pub parent: usize,
    /// Child range `[child_start, child_end)` in `nodes[l+1]`.
    pub child_start: usize,
    pub child_end: usize,
}

impl Block {
    pub fn len(&self) -> usize {
        self.child_end - self.child_start
    }

    pub fn is_empty(&self) -> bool {
        self.child_end == self.child_start
    }
}

/// Morton-ordered occupied-node sets for levels `l0..=L` plus the
/// parent-to-children block maps between consecutive levels.
#[derive(Debug, Clone)]
pub struct LevelHierarchy {
    pub depth: u8,
    pub root_level: u8,
    /// `nodes[i]` is the sorted Morton-code list for level `root_level + i`.
    pub nodes: Vec<Vec<u64>>,
    /// `blocks[i]` maps level `root_level + i` parents to their children.
    pub blocks: Vec<Vec<Block>>,
}

impl LevelHierarchy {
    /// Number of stored levels (`L - l0 + 1`).
    pub fn level_count(&self) -> usize {
        self.nodes.len()
    }

    /// Node count at level index `i` (0 = root level).
    pub fn node_count(&self, level_index: usize) -> usize {
        self.nodes[level_index].len()
    }

    pub fn point_count(&self) -> usize {
        self.nodes.last().map_or(0, |n| n.len())
    }

    /// Child octant index of node `j` at level index `i` (i >= 1).
    pub fn octant_of(&self, level_index: usize, j: usize) -> usize {
        morton::octant(self.nodes[level_index][j])
    }

    /// High-pass coefficient count per channel emitted between level index
    /// `i` and `i+1`: `N_{l+1} - N_l`.
    pub fn highpass_count(&self, level_index: usize) -> usize {
        self.node_count(level_index + 1) - self.node_count(level_index)
    }
}

/// Builds the level hierarchy of a cloud down to root level `l0`.
pub fn build_hierarchy(cloud: &VoxelizedCloud, l0: u8) -> Result<LevelHierarchy> {
    if cloud.is_empty() {
        return Err(Error::EmptyInput("cannot build hierarchy of empty cloud".into()));
    }
    if l0 >= cloud.depth {
        return Err(Error::Parameter(format!(
            "root level {l0} must be below depth {}",
            cloud.depth
        )));
    }
    let depth = cloud.depth;
    let n_levels = (depth - l0) as usize + 1;
    let mut nodes: Vec<Vec<u64>> = Vec::with_capacity(n_levels);
    nodes.push(cloud.morton_codes());
    debug_assert!(nodes[0].windows(2).all(|w| w[0] < w[1]));

    for _ in 0..(depth - l0) {
        let finer = nodes.last().unwrap();
        let mut coarser: Vec<u64> = Vec::with_capacity(finer.len());
        for &code in finer {
            let parent = code >> 3;
            if coarser.last() != Some(&parent) {
                coarser.push(parent);
            }
        }
        nodes.push(coarser);
    }
    nodes.reverse();

    let mut blocks: Vec<Vec<Block>> = Vec::with_capacity(n_levels - 1);
    for i in 0..n_levels - 1 {
        let parents = &nodes[i];
        let children = &nodes[i + 1];
        let mut level_blocks = Vec::with_capacity(parents.len());
        let mut start = 0usize;
        for (pi, &p) in parents.iter().enumerate() {
            let mut end = start;
            while end < children.len() && (children[end] >> 3) == p {
                end += 1;
            }
            debug_assert!(end > start, "parent without children");
            level_blocks.push(Block {
                parent: pi,
                child_start: start,
                child_end: end,
            });
            start = end;
        }
        debug_assert_eq!(start, children.len());
        blocks.push(level_blocks);
    }

    Ok(LevelHierarchy {
        depth,
        root_level: l0,
        nodes,
        blocks,
    })
}

/// Per-level diagonal Gram weights, `g[i]` for level `root_level + i`.
#[derive(Debug, Clone)]
pub struct GramDiagonal {
    pub g: Vec<Vec<f64>>,
}

/// Runs the Gram recursion from the all-ones leaf diagonal down to the root.
/// `kernels[i]` is the analysis kernel between level `root_level + i` and
/// the level below it, so `kernels.len() == h.level_count() - 1`.
pub fn gram_recursion(h: &LevelHierarchy, kernels: &[AKernel]) -> Result<GramDiagonal> {
    if kernels.len() != h.level_count() - 1 {
        return Err(Error::Parameter(format!(
            "expected {} kernels, got {}",
            h.level_count() - 1,
            kernels.len()
        )));
    }
    for k in kernels {
        k.validate_positive()?;
    }
    let n_levels = h.level_count();
    let mut g: Vec<Vec<f64>> = vec![Vec::new(); n_levels];
    g[n_levels - 1] = vec![1.0; h.point_count()];
    for i in (0..n_levels - 1).rev() {
        let child_g = std::mem::take(&mut g[i + 1]);
        let kernel = &kernels[i].0;
        let mut level = vec![0.0; h.node_count(i)];
        for block in &h.blocks[i] {
            let mut acc = 0.0;
            for j in block.child_start..block.child_end {
                let w = kernel[h.octant_of(i + 1, j)];
                acc += w * w * child_g[j];
            }
            level[block.parent] = acc;
        }
        g[i + 1] = child_g;
        g[i] = level;
    }
    Ok(GramDiagonal { g })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud_from(depth: u8, pts: &[[u32; 3]]) -> VoxelizedCloud {
        let points = pts.iter().map(|p| (*p, vec![0.0])).collect();
        VoxelizedCloud::from_points(depth, points, 1).unwrap()
    }

    #[test]
    fn two_siblings() {
        let cloud = cloud_from(1, &[[0, 0, 0], [1, 0, 0]]);
        let h = build_hierarchy(&cloud, 0).unwrap();
        assert_eq!(h.nodes[1].len(), 2);
        assert_eq!(h.nodes[0], vec![0]);
        assert_eq!(h.blocks[0].len(), 1);
        assert_eq!(h.blocks[0][0].len(), 2);
        assert_eq!(h.octant_of(1, 0), 0b000);
        assert_eq!(h.octant_of(1, 1), 0b100);
    }

    #[test]
    fn isolated_points() {
        let cloud = cloud_from(2, &[[0, 0, 0], [2, 2, 2]]);
        let h = build_hierarchy(&cloud, 0).unwrap();
        assert_eq!(h.nodes[1], vec![morton::encode(0, 0, 0), morton::encode(1, 1, 1)]);
        assert_eq!(h.nodes[0], vec![0]);
        for b in &h.blocks[1] {
            assert_eq!(b.len(), 1);
        }
    }

    #[test]
    fn empty_and_bad_l0_errors() {
        let empty = VoxelizedCloud::from_points(3, Vec::new(), 1).unwrap();
        assert!(matches!(build_hierarchy(&empty, 0), Err(Error::EmptyInput(_))));
        let cloud = cloud_from(2, &[[0, 0, 0]]);
        assert!(matches!(build_hierarchy(&cloud, 2), Err(Error::Parameter(_))));
    }

    #[test]
    fn blocks_partition_children() {
        let cloud = cloud_from(6, &random_positions(500, 6, 99));
        let h = build_hierarchy(&cloud, 0).unwrap();
        for i in 0..h.level_count() - 1 {
            let mut covered = 0usize;
            for (bi, b) in h.blocks[i].iter().enumerate() {
                assert_eq!(b.parent, bi);
                assert_eq!(b.child_start, covered);
                covered = b.child_end;
            }
            assert_eq!(covered, h.node_count(i + 1));
        }
    }

    #[test]
    fn unit_kernel_gram_counts_subtree_points() {
        let positions = random_positions(300, 6, 7);
        let cloud = cloud_from(6, &positions);
        let h = build_hierarchy(&cloud, 0).unwrap();
        let kernels = vec![AKernel::unit(); h.level_count() - 1];
        let gram = gram_recursion(&h, &kernels).unwrap();
        // Root accumulates every point; each level sums to N_L.
        for level in &gram.g {
            assert_eq!(level.iter().sum::<f64>() as usize, cloud.len());
        }
        // Exhaustive subtree count at an intermediate level.
        let li = 3usize;
        let shift = 3 * (h.level_count() - 1 - li);
        for (ni, &node) in h.nodes[li].iter().enumerate() {
            let count = h.nodes[h.level_count() - 1]
                .iter()
                .filter(|&&leaf| (leaf >> shift) == node)
                .count();
            assert_eq!(gram.g[li][ni], count as f64);
        }
    }

    #[test]
    fn weighted_kernel_hand_value() {
        let cloud = cloud_from(1, &[[0, 0, 0], [1, 0, 0]]);
        let h = build_hierarchy(&cloud, 0).unwrap();
        let mut k = AKernel::unit();
        k.0[0b100] = 0.5; // d = (1,0,0)
        let gram = gram_recursion(&h, &[k]).unwrap();
        assert!((gram.g[0][0] - 1.25).abs() < 1e-15);
    }

    #[test]
    fn nonpositive_kernel_rejected() {
        let cloud = cloud_from(1, &[[0, 0, 0], [1, 0, 0]]);
        let h = build_hierarchy(&cloud, 0).unwrap();
        let mut k = AKernel::unit();
        k.0[3] = 0.0;
        assert!(matches!(gram_recursion(&h, &[k]), Err(Error::Parameter(_))));
    }

    fn random_positions(n: usize, depth: u8, seed: u64) -> Vec<[u32; 3]> {
        let mut state = seed | 1;
        let mask = (1u32 << depth) - 1;
        (0..n)
            .map(|_| {
                let mut next = || {
                    state ^= state << 13;
                    state ^= state >> 7;
                    state ^= state << 17;
                    state as u32
                };
                [next() & mask, next() & mask, next() & mask]
            })
            .collect()
    }
}
