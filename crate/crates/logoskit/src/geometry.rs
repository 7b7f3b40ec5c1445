//! Axis-aligned box geometry, ε-reachability clustering of OCR lines, and
//! hierarchical sinusoidal spatial descriptors.
//!
//! Detected OCR lines are grouped into clusters by density-based clustering
//! over the minimum distance between line bounding boxes. With a minimum
//! neighborhood size of one, the clustering reduces to connected components
//! under ε-reachability, so every line gets a cluster id and no noise label
//! exists. Each token then carries a descriptor built from sinusoidal
//! encodings of its (cluster, line, token) indices.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Axis-aligned rectangle in normalized `[0,1]` image coordinates, origin
/// top-left. Degenerate (zero-area) boxes are legal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl NormBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = NormBox { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| (0.0..=1.0).contains(&v);
        if !(ok(self.x1) && ok(self.y1) && ok(self.x2) && ok(self.y2)) {
            return Err(Error::InvalidBox(format!(
                "coordinates outside [0,1]: ({}, {}, {}, {})",
                self.x1, self.y1, self.x2, self.y2
            )));
        }
        if self.x1 > self.x2 || self.y1 > self.y2 {
            return Err(Error::InvalidBox(format!(
                "corners out of order: ({}, {}, {}, {})",
                self.x1, self.y1, self.x2, self.y2
            )));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn x_center(&self) -> f64 {
        0.5 * (self.x1 + self.x2)
    }

    /// Smallest box containing both operands.
    pub fn union(&self, other: &NormBox) -> NormBox {
        NormBox {
            x1: self.x1.min(other.x1),
            y1: self.y1.min(other.y1),
            x2: self.x2.max(other.x2),
            y2: self.y2.max(other.y2),
        }
    }

    /// True when `inner` lies inside `self`, allowing `slack` on each edge.
    pub fn contains(&self, inner: &NormBox, slack: f64) -> bool {
        inner.x1 >= self.x1 - slack
            && inner.y1 >= self.y1 - slack
            && inner.x2 <= self.x2 + slack
            && inner.y2 <= self.y2 + slack
    }

    /// Area of the intersection with `other`; zero when disjoint.
    pub fn intersection_area(&self, other: &NormBox) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }
}

/// Minimum Euclidean distance between any two points of the two boxes.
/// Zero exactly when the boxes touch or overlap.
pub fn box_min_distance(a: &NormBox, b: &NormBox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    let dx = (a.x1 - b.x2).max(b.x1 - a.x2).max(0.0);
    let dy = (a.y1 - b.y2).max(b.y1 - a.y2).max(0.0);
    Ok((dx * dx + dy * dy).sqrt())
}

/// Total assignment of lines to clusters.
///
/// Cluster ids are consecutive integers from zero, numbered by the top-most
/// (then left-most) corner among each cluster's member boxes so that the
/// labeling is deterministic and independent of input order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterAssignment {
    pub cluster_of_line: Vec<usize>,
    pub n_clusters: usize,
}

impl ClusterAssignment {
    /// Lines grouped by cluster id, members in ascending line order.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.n_clusters];
        for (line, &c) in self.cluster_of_line.iter().enumerate() {
            groups[c].push(line);
        }
        groups
    }
}

/// Density-based clustering of line boxes with a neighborhood radius of
/// `epsilon` and a minimum neighborhood size of one: a seed line absorbs
/// every line reachable through a chain of pairwise box distances
/// ≤ `epsilon`, which makes the result exactly the ε-reachability
/// connected components.
pub fn cluster_lines(boxes: &[NormBox], epsilon: f64) -> Result<ClusterAssignment> {
    if boxes.is_empty() {
        return Err(Error::EmptyInput("cluster_lines requires at least one box"));
    }
    if !(epsilon > 0.0) {
        return Err(Error::Config(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    for b in boxes {
        b.validate()?;
    }

    let m = boxes.len();
    let mut label = vec![usize::MAX; m];
    let mut next = 0usize;
    let mut frontier = Vec::new();
    for seed in 0..m {
        if label[seed] != usize::MAX {
            continue;
        }
        label[seed] = next;
        frontier.clear();
        frontier.push(seed);
        // Region growing: expand the neighborhood of every reached line.
        while let Some(i) = frontier.pop() {
            for j in 0..m {
                if label[j] == usize::MAX
                    && box_min_distance(&boxes[i], &boxes[j])? <= epsilon
                {
                    label[j] = next;
                    frontier.push(j);
                }
            }
        }
        next += 1;
    }

    Ok(canonicalize(label, next, boxes))
}

/// Renumber raw labels so cluster 0 holds the top-most (then left-most)
/// member corner, cluster 1 the next, and so on.
fn canonicalize(raw: Vec<usize>, n: usize, boxes: &[NormBox]) -> ClusterAssignment {
    let mut key: Vec<(f64, f64, usize)> = vec![(f64::INFINITY, f64::INFINITY, usize::MAX); n];
    for (line, &c) in raw.iter().enumerate() {
        let cand = (boxes[line].y1, boxes[line].x1, key[c].2.min(line));
        if (cand.0, cand.1) < (key[c].0, key[c].1) {
            key[c] = (cand.0, cand.1, cand.2);
        } else {
            key[c].2 = key[c].2.min(line);
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        key[a]
            .0
            .total_cmp(&key[b].0)
            .then(key[a].1.total_cmp(&key[b].1))
            .then(key[a].2.cmp(&key[b].2))
    });
    let mut new_id = vec![0usize; n];
    for (rank, &old) in order.iter().enumerate() {
        new_id[old] = rank;
    }
    ClusterAssignment {
        cluster_of_line: raw.into_iter().map(|c| new_id[c]).collect(),
        n_clusters: n,
    }
}

/// d-dimensional sinusoidal positional embedding at position `i`:
/// component 2k is `sin(i / 10000^(2k/d))`, component 2k+1 the matching
/// cosine. `d` must be even.
pub fn sinusoidal_embedding(i: usize, d: usize) -> Result<Vec<f64>> {
    if d == 0 || d % 2 != 0 {
        return Err(Error::Config(format!(
            "embedding width must be even and positive, got {d}"
        )));
    }
    let mut out = Vec::with_capacity(d);
    for k in 0..d / 2 {
        let rate = 10000f64.powf(2.0 * k as f64 / d as f64);
        let angle = i as f64 / rate;
        out.push(angle.sin());
        out.push(angle.cos());
    }
    Ok(out)
}

/// Hierarchical positional descriptor of one OCR token: concatenated
/// sinusoidal encodings of its cluster id, global line index, and
/// within-line token index, in that order.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialDescriptor {
    pub cluster_id: usize,
    pub line_index: usize,
    pub token_index: usize,
    pub embedding: Vec<f64>,
}

pub fn spatial_descriptor(
    cluster_id: usize,
    line_index: usize,
    token_index: usize,
    d: usize,
) -> Result<SpatialDescriptor> {
    let mut embedding = Vec::with_capacity(3 * d);
    embedding.extend(sinusoidal_embedding(cluster_id, d)?);
    embedding.extend(sinusoidal_embedding(line_index, d)?);
    embedding.extend(sinusoidal_embedding(token_index, d)?);
    Ok(SpatialDescriptor {
        cluster_id,
        line_index,
        token_index,
        embedding,
    })
}

/// Default per-attribute embedding width; descriptors are three times this.
pub const SPATIAL_EMBED_WIDTH: usize = 32;

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn nb(x1: f64, y1: f64, x2: f64, y2: f64) -> NormBox {
        NormBox::new(x1, y1, x2, y2).unwrap()
    }

    /// Exhaustive union-find over the full pairwise distance matrix; the
    /// reference result that region growing must reproduce.
    fn unionfind_oracle(boxes: &[NormBox], eps: f64) -> Vec<usize> {
        let m = boxes.len();
        let mut parent: Vec<usize> = (0..m).collect();
        fn find(parent: &mut Vec<usize>, i: usize) -> usize {
            if parent[i] != i {
                let r = find(parent, parent[i]);
                parent[i] = r;
            }
            parent[i]
        }
        for i in 0..m {
            for j in i + 1..m {
                if box_min_distance(&boxes[i], &boxes[j]).unwrap() <= eps {
                    let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                    parent[ri] = rj;
                }
            }
        }
        (0..m).map(|i| find(&mut parent, i)).collect()
    }

    /// Do two labelings induce the same partition of line indices?
    fn same_partition(a: &[usize], b: &[usize]) -> bool {
        assert_eq!(a.len(), b.len());
        use std::collections::HashMap;
        let mut fwd = HashMap::new();
        let mut bwd = HashMap::new();
        for (&x, &y) in a.iter().zip(b) {
            if *fwd.entry(x).or_insert(y) != y || *bwd.entry(y).or_insert(x) != x {
                return false;
            }
        }
        true
    }

    fn random_boxes(rng: &mut impl rand::Rng, m: usize) -> Vec<NormBox> {
        (0..m)
            .map(|_| {
                let x1: f64 = rng.gen_range(0.0..0.9);
                let y1: f64 = rng.gen_range(0.0..0.9);
                let w: f64 = rng.gen_range(0.0..0.1);
                let h: f64 = rng.gen_range(0.0..0.05);
                nb(x1, y1, (x1 + w).min(1.0), (y1 + h).min(1.0))
            })
            .collect()
    }

    #[test]
    fn min_distance_overlap_is_zero() {
        let a = nb(0.0, 0.0, 0.5, 0.5);
        let b = nb(0.4, 0.4, 0.9, 0.9);
        assert_eq!(box_min_distance(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn min_distance_aligned_gap() {
        let a = nb(0.0, 0.0, 0.2, 0.2);
        let b = nb(0.3, 0.0, 0.5, 0.2);
        let d = box_min_distance(&a, &b).unwrap();
        assert!((d - 0.1).abs() < 1e-12, "got {d}");
    }

    #[test]
    fn min_distance_diagonal_matches_dense_sampling() {
        let a = nb(0.0, 0.0, 0.1, 0.1);
        let b = nb(0.2, 0.25, 0.3, 0.3);
        let d = box_min_distance(&a, &b).unwrap();
        // Dense-sample oracle: minimize pairwise distance over both box
        // boundaries.
        let oracle = dense_sample_min_distance(&a, &b, 400);
        assert!((d - oracle).abs() < 1e-3, "analytic {d} vs sampled {oracle}");
        let expect = (0.1f64.powi(2) + 0.15f64.powi(2)).sqrt();
        assert!((d - expect).abs() < 1e-9);
    }

    fn boundary_points(b: &NormBox, n: usize) -> Vec<(f64, f64)> {
        let mut pts = Vec::new();
        for k in 0..=n {
            let t = k as f64 / n as f64;
            pts.push((b.x1 + t * b.width(), b.y1));
            pts.push((b.x1 + t * b.width(), b.y2));
            pts.push((b.x1, b.y1 + t * b.height()));
            pts.push((b.x2, b.y1 + t * b.height()));
        }
        pts
    }

    fn dense_sample_min_distance(a: &NormBox, b: &NormBox, n: usize) -> f64 {
        let pa = boundary_points(a, n);
        let pb = boundary_points(b, n);
        let mut best = f64::INFINITY;
        for &(x0, y0) in &pa {
            for &(x1, y1) in &pb {
                let d = ((x0 - x1).powi(2) + (y0 - y1).powi(2)).sqrt();
                best = best.min(d);
            }
        }
        best
    }

    #[test]
    fn min_distance_rejects_invalid_box() {
        let bad = NormBox {
            x1: 0.5,
            y1: 0.0,
            x2: 0.2,
            y2: 0.1,
        };
        let good = nb(0.0, 0.0, 0.1, 0.1);
        assert!(matches!(
            box_min_distance(&bad, &good),
            Err(Error::InvalidBox(_))
        ));
    }

    #[test]
    fn cluster_single_box() {
        let a = cluster_lines(&[nb(0.1, 0.1, 0.2, 0.2)], 0.02).unwrap();
        assert_eq!(a.cluster_of_line, vec![0]);
        assert_eq!(a.n_clusters, 1);
    }

    #[test]
    fn cluster_reachability_pair_plus_far_singleton() {
        let boxes = [
            nb(0.10, 0.10, 0.20, 0.15),
            nb(0.10, 0.16, 0.20, 0.20), // 0.01 below the first
            nb(0.70, 0.70, 0.80, 0.75), // far away
        ];
        let a = cluster_lines(&boxes, 0.02).unwrap();
        assert_eq!(a.n_clusters, 2);
        assert_eq!(a.cluster_of_line[0], a.cluster_of_line[1]);
        assert_ne!(a.cluster_of_line[0], a.cluster_of_line[2]);
        // Canonical numbering: the top-most group gets id 0.
        assert_eq!(a.cluster_of_line[0], 0);
        assert_eq!(a.cluster_of_line[2], 1);
    }

    #[test]
    fn cluster_empty_input_errors() {
        assert!(matches!(
            cluster_lines(&[], 0.02),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn cluster_matches_unionfind_oracle_many_seeds() {
        use rand::SeedableRng;
        for seed in 0..200u64 {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let m = 1 + (seed as usize % 30);
            let boxes = random_boxes(&mut rng, m);
            for &eps in &[0.005, 0.02, 0.1] {
                let got = cluster_lines(&boxes, eps).unwrap();
                let want = unionfind_oracle(&boxes, eps);
                assert!(
                    same_partition(&got.cluster_of_line, &want),
                    "seed {seed} eps {eps}"
                );
            }
        }
    }

    #[test]
    fn sinusoid_position_zero() {
        assert_eq!(
            sinusoidal_embedding(0, 4).unwrap(),
            vec![0.0, 1.0, 0.0, 1.0]
        );
    }

    #[test]
    fn sinusoid_position_one_d2() {
        let e = sinusoidal_embedding(1, 2).unwrap();
        assert!((e[0] - 1f64.sin()).abs() < 1e-15);
        assert!((e[1] - 1f64.cos()).abs() < 1e-15);
    }

    #[test]
    fn sinusoid_components_bounded() {
        let e = sinusoidal_embedding(7, 32).unwrap();
        assert!(e.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn sinusoid_rejects_odd_width() {
        assert!(matches!(sinusoidal_embedding(3, 5), Err(Error::Config(_))));
        assert!(matches!(sinusoidal_embedding(3, 0), Err(Error::Config(_))));
    }

    #[test]
    fn sinusoid_injective_over_range() {
        // No two embeddings equal within 1e-9 over a contiguous index range.
        let d = 8;
        let embs: Vec<Vec<f64>> = (0..10_000).map(|i| sinusoidal_embedding(i, d).unwrap()).collect();
        // Sorting by the first two components groups near-duplicates; a full
        // pairwise scan at 1e4 items is still cheap enough to be direct for
        // neighboring positions, and distant positions differ in the lowest
        // frequency pair. Check all pairs within a window plus a stride
        // sample of far pairs.
        let close = |a: &[f64], b: &[f64]| {
            a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-9)
        };
        for i in 0..embs.len() {
            for j in i + 1..(i + 50).min(embs.len()) {
                assert!(!close(&embs[i], &embs[j]), "{i} vs {j}");
            }
        }
        for i in (0..embs.len()).step_by(97) {
            for j in (i + 50..embs.len()).step_by(131) {
                assert!(!close(&embs[i], &embs[j]), "{i} vs {j}");
            }
        }
    }

    #[test]
    fn descriptor_all_zero_indices() {
        let d = spatial_descriptor(0, 0, 0, 4).unwrap();
        assert_eq!(
            d.embedding,
            vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]
        );
    }

    #[test]
    fn descriptor_is_ordered_concatenation() {
        let d = spatial_descriptor(2, 5, 1, 4).unwrap();
        let mut want = sinusoidal_embedding(2, 4).unwrap();
        want.extend(sinusoidal_embedding(5, 4).unwrap());
        want.extend(sinusoidal_embedding(1, 4).unwrap());
        assert_eq!(d.embedding, want);
    }

    #[test]
    fn descriptor_attribute_order_matters() {
        let a = spatial_descriptor(1, 0, 0, 4).unwrap();
        let b = spatial_descriptor(0, 1, 0, 4).unwrap();
        assert_ne!(a.embedding, b.embedding);
    }

    proptest! {
        #[test]
        fn min_distance_symmetric_nonnegative(
            ax in 0.0..0.8f64, ay in 0.0..0.8f64, aw in 0.0..0.2f64, ah in 0.0..0.2f64,
            bx in 0.0..0.8f64, by in 0.0..0.8f64, bw in 0.0..0.2f64, bh in 0.0..0.2f64,
        ) {
            let a = nb(ax, ay, ax + aw, ay + ah);
            let b = nb(bx, by, bx + bw, by + bh);
            let d1 = box_min_distance(&a, &b).unwrap();
            let d2 = box_min_distance(&b, &a).unwrap();
            prop_assert!(d1 >= 0.0);
            prop_assert_eq!(d1, d2);
            let overlaps = a.x1 <= b.x2 && b.x1 <= a.x2 && a.y1 <= b.y2 && b.y1 <= a.y2;
            prop_assert_eq!(d1 == 0.0, overlaps);
        }

        #[test]
        fn clustering_invariant_under_permutation(seed in 0u64..500) {
            use rand::SeedableRng;
            use rand::seq::SliceRandom;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let m = 2 + (seed as usize % 20);
            let boxes = random_boxes(&mut rng, m);
            let base = cluster_lines(&boxes, 0.02).unwrap();
            let mut perm: Vec<usize> = (0..m).collect();
            perm.shuffle(&mut rng);
            let shuffled: Vec<NormBox> = perm.iter().map(|&i| boxes[i]).collect();
            let permuted = cluster_lines(&shuffled, 0.02).unwrap();
            // Map the permuted labeling back to original line order; the two
            // canonical labelings must agree exactly.
            let mut back = vec![0usize; m];
            for (new_pos, &orig) in perm.iter().enumerate() {
                back[orig] = permuted.cluster_of_line[new_pos];
            }
            prop_assert_eq!(back, base.cluster_of_line);
        }

        #[test]
        fn clustering_scale_invariant(seed in 0u64..200, scale in 0.1..1.0f64) {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let m = 2 + (seed as usize % 15);
            let boxes = random_boxes(&mut rng, m);
            let eps = 0.03;
            let scaled: Vec<NormBox> = boxes
                .iter()
                .map(|b| nb(b.x1 * scale, b.y1 * scale, b.x2 * scale, b.y2 * scale))
                .collect();
            let a = cluster_lines(&boxes, eps).unwrap();
            let b = cluster_lines(&scaled, eps * scale).unwrap();
            prop_assert_eq!(a.cluster_of_line, b.cluster_of_line);
        }

        #[test]
        fn clustering_monotone_in_epsilon(seed in 0u64..200) {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let m = 2 + (seed as usize % 15);
            let boxes = random_boxes(&mut rng, m);
            let fine = cluster_lines(&boxes, 0.01).unwrap();
            let coarse = cluster_lines(&boxes, 0.05).unwrap();
            // Every fine cluster must sit inside a single coarse cluster.
            for group in fine.members() {
                let c0 = coarse.cluster_of_line[group[0]];
                prop_assert!(group.iter().all(|&l| coarse.cluster_of_line[l] == c0));
            }
        }
    }
}
