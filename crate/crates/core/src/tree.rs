//! Combinatorics of the complete binary tree: vertex addressing in Neveu
//! bit-string notation, breadth-first order, past sets `Δ(u,k)`, shapes,
//! and block subtrees.
//!
//! Vertices are addressed by the bit path from the root (`""` is the root,
//! `"01"` is the right child of the left child, and so on). The
//! breadth-first order compares heights first and breaks ties
//! lexicographically, which is the total order all past sets are built from.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use smallvec::SmallVec;

use crate::error::{HmtError, Result};

/// A vertex of the complete binary tree, addressed by its bit path from the
/// root. The root is the empty path.
#[derive(Clone, PartialEq, Eq, Hash, Default)]
pub struct VertexId {
    bits: SmallVec<[u8; 24]>,
}

impl VertexId {
    pub fn root() -> Self {
        VertexId { bits: SmallVec::new() }
    }

    pub fn from_bits(bits: &[u8]) -> Self {
        debug_assert!(bits.iter().all(|&b| b <= 1));
        VertexId { bits: SmallVec::from_slice(bits) }
    }

    /// Parse an ASCII bit string; the empty string is the root.
    pub fn parse(s: &str) -> Result<Self> {
        let mut bits = SmallVec::new();
        for c in s.chars() {
            match c {
                '0' => bits.push(0),
                '1' => bits.push(1),
                _ => {
                    return Err(HmtError::InvalidInput(format!(
                        "invalid vertex path {s:?}: expected only '0'/'1'"
                    )))
                }
            }
        }
        Ok(VertexId { bits })
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    /// Height of the vertex, i.e. the number of edges to the root.
    pub fn height(&self) -> usize {
        self.bits.len()
    }

    pub fn is_root(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn parent(&self) -> Result<VertexId> {
        if self.is_root() {
            return Err(HmtError::RootHasNoParent);
        }
        let mut bits = self.bits.clone();
        bits.pop();
        Ok(VertexId { bits })
    }

    /// `k`-th ancestor; requires `k <= height`.
    pub fn ancestor(&self, k: usize) -> Result<VertexId> {
        if k > self.height() {
            return Err(HmtError::InvalidInput(format!(
                "ancestor {k} of a vertex at height {} does not exist in the tree",
                self.height()
            )));
        }
        Ok(VertexId::from_bits(&self.bits[..self.height() - k]))
    }

    pub fn child(&self, bit: u8) -> VertexId {
        debug_assert!(bit <= 1);
        let mut bits = self.bits.clone();
        bits.push(bit);
        VertexId { bits }
    }

    pub fn is_ancestor_of(&self, v: &VertexId) -> bool {
        v.bits.len() >= self.bits.len() && v.bits[..self.bits.len()] == self.bits[..]
    }

    /// Path of `self` relative to an ancestor `w`.
    pub fn relative_to(&self, w: &VertexId) -> Result<VertexId> {
        if !w.is_ancestor_of(self) {
            return Err(HmtError::InvalidInput(format!(
                "{w} is not an ancestor of {self}"
            )));
        }
        Ok(VertexId::from_bits(&self.bits[w.height()..]))
    }

    /// Concatenate: the vertex reached from `self` by following `suffix`.
    pub fn join(&self, suffix: &VertexId) -> VertexId {
        let mut bits = self.bits.clone();
        bits.extend_from_slice(&suffix.bits);
        VertexId { bits }
    }

    /// Rank of the vertex in the breadth-first enumeration with the root at
    /// rank 0. Only defined for heights < 64.
    pub fn bfs_rank(&self) -> usize {
        assert!(self.height() < 64, "bfs_rank overflows above height 63");
        let mut lex = 0usize;
        for &b in &self.bits {
            lex = (lex << 1) | b as usize;
        }
        (1usize << self.height()) - 1 + lex
    }
}

impl PartialOrd for VertexId {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Breadth-first order: lower height first, lexicographic within a height.
impl Ord for VertexId {
    fn cmp(&self, other: &Self) -> Ordering {
        self.height()
            .cmp(&other.height())
            .then_with(|| self.bits.cmp(&other.bits))
    }
}

impl fmt::Display for VertexId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &b in &self.bits {
            write!(f, "{}", b)?;
        }
        Ok(())
    }
}

impl fmt::Debug for VertexId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "\"{self}\"")
    }
}

impl std::str::FromStr for VertexId {
    type Err = HmtError;
    fn from_str(s: &str) -> Result<Self> {
        VertexId::parse(s)
    }
}

impl Serialize for VertexId {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for VertexId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        VertexId::parse(&s).map_err(serde::de::Error::custom)
    }
}

/// `true` iff `u` strictly precedes `v` in breadth-first order.
pub fn bfs_less(u: &VertexId, v: &VertexId) -> bool {
    u.cmp(v) == Ordering::Less
}

/// Most recent common ancestor together with the graph distance
/// `d(u,v) = h(u) + h(v) - 2 h(u ∧ v)`.
pub fn mrca_and_distance(u: &VertexId, v: &VertexId) -> (VertexId, usize) {
    let mut common = 0;
    while common < u.height() && common < v.height() && u.bits[common] == v.bits[common] {
        common += 1;
    }
    let mrca = VertexId::from_bits(&u.bits[..common]);
    let dist = u.height() + v.height() - 2 * common;
    (mrca, dist)
}

/// Role tag recording which set-former produced a [`VertexSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RoleTag {
    /// `T_n`, the tree up to generation n.
    TreeUpTo,
    /// `G_n`, one generation.
    Generation,
    /// `T(u,k)`, a subtree truncated at depth k.
    Subtree,
    /// `Δ(u,k)`, the past of u including u.
    Delta,
    /// `Δ*(u,k)`, the past of u excluding u.
    DeltaStar,
    /// `Δ*(T(u,m),k)`, the block past of a subtree block.
    BlockPast,
    /// `Δ(T(u,m),k)`, the block past together with the block itself.
    BlockDelta,
    /// `A_j = Δ(v_j) \ T_{k-1}`, a breadth-first prefix region.
    PrefixRegion,
}

/// An ordered set of vertices, strictly increasing in breadth-first order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VertexSet {
    vertices: Vec<VertexId>,
    role: RoleTag,
}

impl VertexSet {
    /// Build from a list of vertices; sorts and checks for duplicates.
    pub fn new(mut vertices: Vec<VertexId>, role: RoleTag) -> Result<Self> {
        vertices.sort();
        for w in vertices.windows(2) {
            if w[0] == w[1] {
                return Err(HmtError::InvalidInput(format!(
                    "duplicate vertex {} in vertex set",
                    w[0]
                )));
            }
        }
        Ok(VertexSet { vertices, role })
    }

    pub fn vertices(&self) -> &[VertexId] {
        &self.vertices
    }

    pub fn role(&self) -> RoleTag {
        self.role
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn contains(&self, v: &VertexId) -> bool {
        self.vertices.binary_search(v).is_ok()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, VertexId> {
        self.vertices.iter()
    }
}

impl<'a> IntoIterator for &'a VertexSet {
    type Item = &'a VertexId;
    type IntoIter = std::slice::Iter<'a, VertexId>;
    fn into_iter(self) -> Self::IntoIter {
        self.vertices.iter()
    }
}

/// Number of vertices of `T_n`: `2^(n+1) - 1`.
pub fn tree_size(n: usize) -> usize {
    assert!(n < 63, "tree_size overflows above depth 62");
    (1usize << (n + 1)) - 1
}

/// Number of vertices of `G_n`: `2^n`.
pub fn generation_size(n: usize) -> usize {
    assert!(n < 63);
    1usize << n
}

fn level_below(level: &[VertexId]) -> Vec<VertexId> {
    let mut next = Vec::with_capacity(level.len() * 2);
    for v in level {
        next.push(v.child(0));
        next.push(v.child(1));
    }
    next
}

/// All vertices of `T(u, k)` in breadth-first order.
pub fn subtree(u: &VertexId, k: usize) -> VertexSet {
    let mut vertices = Vec::with_capacity(tree_size(k));
    let mut level = vec![u.clone()];
    for _ in 0..=k {
        vertices.extend(level.iter().cloned());
        level = level_below(&level);
    }
    VertexSet { vertices, role: RoleTag::Subtree }
}

/// `T_n` in breadth-first order.
pub fn tree_up_to(n: usize) -> VertexSet {
    let mut s = subtree(&VertexId::root(), n);
    s.role = RoleTag::TreeUpTo;
    s
}

/// `G_n` in lexicographic order.
pub fn generation(n: usize) -> VertexSet {
    let mut level = vec![VertexId::root()];
    for _ in 0..n {
        level = level_below(&level);
    }
    VertexSet { vertices: level, role: RoleTag::Generation }
}

/// The `j`-th vertex `v_j` of the breadth-first enumeration (`v_0` is the
/// root).
pub fn bfs_vertex(j: usize) -> VertexId {
    let h = (usize::BITS - (j + 1).leading_zeros() - 1) as usize;
    let lex = j + 1 - (1usize << h);
    let mut bits = SmallVec::new();
    for i in (0..h).rev() {
        bits.push(((lex >> i) & 1) as u8);
    }
    VertexId { bits }
}

/// The random backward spine extending the tree above the root.
///
/// `bits[j]` records whether the `j`-th ancestor of the root is the left (0)
/// or right (1) child of its own parent.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Spine {
    bits: Vec<u8>,
}

impl Spine {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if bits.iter().any(|&b| b > 1) {
            return Err(HmtError::InvalidInput("spine bits must be 0 or 1".into()));
        }
        Ok(Spine { bits })
    }

    pub fn random<R: rand::Rng>(len: usize, rng: &mut R) -> Self {
        Spine { bits: (0..len).map(|_| rng.random_range(0..2u8)).collect() }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    /// Relative path of the original root under the virtual anchor placed
    /// `steps` generations above it.
    pub fn root_path_below_anchor(&self, steps: usize) -> Result<VertexId> {
        if steps > self.len() {
            return Err(HmtError::SpineRequired { needed: steps, got: self.len() });
        }
        let bits: SmallVec<[u8; 24]> = (0..steps).rev().map(|j| self.bits[j]).collect();
        Ok(VertexId { bits })
    }
}

/// Coordinates used by a past set: either absolute tree paths (the anchor
/// `p^k(u)` is a tree vertex) or paths relative to a virtual anchor above
/// the root, reached through a spine.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PastCoords {
    Absolute { anchor: VertexId },
    Virtual { spine_steps: usize, root_below_anchor: VertexId },
}

/// `Δ(u,k)` (or `Δ*(u,k)`) together with the coordinate system its vertices
/// are expressed in.
#[derive(Clone, Debug)]
pub struct PastSet {
    pub set: VertexSet,
    pub coords: PastCoords,
    /// The vertex `u` in the set's own coordinates.
    pub u_local: VertexId,
}

fn past_set(u: &VertexId, k: usize, spine: Option<&Spine>, include_u: bool) -> Result<PastSet> {
    let (coords, u_local) = if k <= u.height() {
        let anchor = u.ancestor(k)?;
        (PastCoords::Absolute { anchor }, u.relative_to(&u.ancestor(k)?)?)
    } else {
        let steps = k - u.height();
        let spine = spine.ok_or(HmtError::SpineRequired { needed: steps, got: 0 })?;
        let root_rel = spine.root_path_below_anchor(steps)?;
        (
            PastCoords::Virtual { spine_steps: steps, root_below_anchor: root_rel.clone() },
            root_rel.join(u),
        )
    };
    // Enumerate T(anchor, k) in anchor-local coordinates and keep the strict
    // past of u.
    let mut vertices = Vec::new();
    let mut level = vec![VertexId::root()];
    for _ in 0..=k {
        for v in &level {
            if bfs_less(v, &u_local) {
                vertices.push(v.clone());
            }
        }
        if level[0].height() >= u_local.height() {
            break;
        }
        level = level_below(&level);
    }
    if include_u {
        vertices.push(u_local.clone());
    }
    // In the in-tree case the set is reported in absolute paths.
    let (vertices, u_local) = match &coords {
        PastCoords::Absolute { anchor } => (
            vertices.iter().map(|v| anchor.join(v)).collect::<Vec<_>>(),
            u.clone(),
        ),
        PastCoords::Virtual { .. } => (vertices, u_local),
    };
    let role = if include_u { RoleTag::Delta } else { RoleTag::DeltaStar };
    Ok(PastSet { set: VertexSet::new(vertices, role)?, coords, u_local })
}

/// `Δ(u,k) = Δ*(u,k) ∪ {u}`, the past of `u` within the subtree rooted at
/// its `k`-th ancestor.
///
/// For `k <= h(u)` vertices are absolute tree paths; for `k > h(u)` a spine
/// of length at least `k - h(u)` is required and vertices are paths relative
/// to the virtual anchor `p^k(u)`.
pub fn delta(u: &VertexId, k: usize, spine: Option<&Spine>) -> Result<PastSet> {
    past_set(u, k, spine, true)
}

/// `Δ*(u,k)`, the past of `u` excluding `u` itself.
pub fn delta_star(u: &VertexId, k: usize, spine: Option<&Spine>) -> Result<PastSet> {
    past_set(u, k, spine, false)
}

/// The shape of a past set `Δ(u,k)`: within level `k` shapes are
/// characterized by their size.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    pub size: usize,
    pub level: usize,
}

impl Shape {
    /// The canonical vertex `v ∈ G_k` with `|Δ(v)| = size`.
    pub fn canonical_vertex(&self) -> VertexId {
        let k = self.level;
        assert!(k < 63);
        let j = self.size - ((1usize << k) - 1) - 1;
        let mut bits = SmallVec::new();
        for i in (0..k).rev() {
            bits.push(((j >> i) & 1) as u8);
        }
        VertexId { bits }
    }
}

/// The `2^k` shapes of level `k`, in increasing size order.
pub fn shapes(k: usize) -> Vec<Shape> {
    assert!(k < 63);
    let base = (1usize << k) - 1;
    (0..(1usize << k)).map(|j| Shape { size: base + j + 1, level: k }).collect()
}

/// The shape of `Δ(u,k)`; spine rules as in [`delta`].
pub fn shape_of(u: &VertexId, k: usize, spine: Option<&Spine>) -> Result<Shape> {
    let d = delta(u, k, spine)?;
    let shape = Shape { size: d.set.len(), level: k };
    debug_assert!(shapes(k).contains(&shape));
    Ok(shape)
}

/// `Δ*(T(u,m),k)`: the union of the height-`m` block subtrees preceding the
/// block rooted at `u`, whose roots lie in `Δ*(u, k(m+1))` at heights
/// congruent to `h(u)` modulo `m+1`.
pub fn block_past(u: &VertexId, m: usize, k: usize, spine: Option<&Spine>) -> Result<PastSet> {
    if u.height() % (m + 1) != 0 {
        return Err(HmtError::BlockMisaligned { height: u.height(), m });
    }
    let big_k = k * (m + 1);
    let star = delta_star(u, big_k, spine)?;
    let u_local = star.u_local.clone();
    let mut vertices = Vec::new();
    for v in star.set.iter() {
        // Block roots sit at heights congruent to h(u) mod m+1, which in
        // both coordinate systems means heights divisible by m+1; membership
        // in the strict past already orders the blocks.
        if v.height() % (m + 1) == 0 {
            vertices.extend(subtree(v, m).vertices().iter().cloned());
        }
    }
    Ok(PastSet {
        set: VertexSet::new(vertices, RoleTag::BlockPast)?,
        coords: star.coords,
        u_local,
    })
}

/// `Δ(T(u,m),k) = Δ*(T(u,m),k) ∪ T(u,m)`.
pub fn block_delta(u: &VertexId, m: usize, k: usize, spine: Option<&Spine>) -> Result<PastSet> {
    let past = block_past(u, m, k, spine)?;
    let mut vertices: Vec<VertexId> = past.set.vertices().to_vec();
    vertices.extend(subtree(&past.u_local, m).vertices().iter().cloned());
    Ok(PastSet {
        set: VertexSet::new(vertices, RoleTag::BlockDelta)?,
        coords: past.coords,
        u_local: past.u_local,
    })
}

/// `A_j = Δ(v_j) \ T_{k-1}`: the breadth-first prefix up to `v_j` with the
/// first `k` generations removed (`v_0` is the root).
pub fn prefix_region(j: usize, k: usize) -> Result<VertexSet> {
    let first = if k == 0 { 0 } else { tree_size(k - 1) };
    if j < first {
        return Err(HmtError::InvalidInput(format!(
            "prefix region needs j >= |T_(k-1)| = {first}, got {j}"
        )));
    }
    let vertices = (first..=j).map(bfs_vertex).collect();
    Ok(VertexSet { vertices, role: RoleTag::PrefixRegion })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(s: &str) -> VertexId {
        VertexId::parse(s).unwrap()
    }

    #[test]
    fn parent_of_nonroot() {
        assert_eq!(v("01").parent().unwrap(), v("0"));
        assert_eq!(v("1").parent().unwrap(), VertexId::root());
        assert!(matches!(VertexId::root().parent(), Err(HmtError::RootHasNoParent)));
    }

    #[test]
    fn mrca_and_distances() {
        assert_eq!(mrca_and_distance(&v("00"), &v("01")), (v("0"), 2));
        assert_eq!(mrca_and_distance(&v("011"), &v("011")), (v("011"), 0));
        assert_eq!(mrca_and_distance(&v("00"), &v("11")), (VertexId::root(), 4));
    }

    #[test]
    fn bfs_order() {
        assert!(bfs_less(&v("1"), &v("00")));
        assert!(!bfs_less(&v("01"), &v("00")));
        assert!(!bfs_less(&v("00"), &v("00")));
        // Telescoping of pasts: Δ(v_{j-1}) = Δ*(v_j).
        for j in 1..40 {
            let prev = delta(&bfs_vertex(j - 1), bfs_vertex(j - 1).height(), None).unwrap();
            let star = delta_star(&bfs_vertex(j), bfs_vertex(j).height(), None).unwrap();
            assert_eq!(prev.set.vertices(), star.set.vertices(), "j = {j}");
        }
    }

    #[test]
    fn bfs_vertex_roundtrip() {
        for j in 0..200 {
            assert_eq!(bfs_vertex(j).bfs_rank(), j);
        }
    }

    #[test]
    fn delta_examples() {
        let d = delta(&v("01"), 1, None).unwrap();
        assert_eq!(d.set.vertices(), &[v("0"), v("00"), v("01")]);
        assert_eq!(d.coords, PastCoords::Absolute { anchor: v("0") });

        let d0 = delta(&VertexId::root(), 0, None).unwrap();
        assert_eq!(d0.set.vertices(), &[VertexId::root()]);

        let d2 = delta(&v("11"), 2, None).unwrap();
        assert_eq!(d2.set.len(), tree_size(2));
    }

    #[test]
    fn delta_inclusions() {
        // T(p^k(u), k-1) ⊆ Δ(u,k) ⊆ T(p^k(u), k) for k <= h(u).
        for n in 0..5usize {
            for u in generation(n).iter() {
                for k in 0..=n {
                    let d = delta(u, k, None).unwrap();
                    let anchor = u.ancestor(k).unwrap();
                    let inner = subtree(&anchor, k.saturating_sub(1));
                    let outer = subtree(&anchor, k);
                    for w in (k > 0).then(|| inner.iter()).into_iter().flatten() {
                        assert!(d.set.contains(w), "inner inclusion at u={u} k={k}");
                    }
                    for w in d.set.iter() {
                        assert!(outer.contains(w), "outer inclusion at u={u} k={k}");
                    }
                }
            }
        }
    }

    #[test]
    fn spine_required_and_extension() {
        assert!(matches!(
            delta(&v("0"), 3, None),
            Err(HmtError::SpineRequired { .. })
        ));
        // 𝔻(∂,1) has 2 vertices when the root is a left child, 3 when right.
        let left = Spine::new(vec![0]).unwrap();
        let right = Spine::new(vec![1]).unwrap();
        assert_eq!(delta(&VertexId::root(), 1, Some(&left)).unwrap().set.len(), 2);
        assert_eq!(delta(&VertexId::root(), 1, Some(&right)).unwrap().set.len(), 3);
    }

    #[test]
    fn shape_sizes() {
        let sizes: Vec<usize> = shapes(2).iter().map(|s| s.size).collect();
        assert_eq!(sizes, vec![4, 5, 6, 7]);
        assert_eq!(shape_of(&v("01"), 1, None).unwrap(), Shape { size: 3, level: 1 });
        assert_eq!(shapes(0), vec![Shape { size: 1, level: 0 }]);
        for k in 0..5 {
            for s in shapes(k) {
                assert_eq!(shape_of(&s.canonical_vertex(), k, None).unwrap(), s);
            }
        }
    }

    #[test]
    fn shape_histogram_uniform_over_generations() {
        for k in 0..4usize {
            for n in k..8 {
                let mut counts = std::collections::HashMap::new();
                for u in generation(n).iter() {
                    *counts.entry(shape_of(u, k, None).unwrap().size).or_insert(0usize) += 1;
                }
                assert_eq!(counts.len(), 1 << k);
                for (_, c) in counts {
                    assert_eq!(c, generation_size(n) / (1 << k), "k={k} n={n}");
                }
            }
        }
    }

    #[test]
    fn block_past_examples() {
        let empty = block_past(&VertexId::root(), 1, 0, None).unwrap();
        assert!(empty.set.is_empty());

        let p01 = block_past(&v("01"), 1, 1, None).unwrap();
        let expected: Vec<VertexId> =
            vec![v(""), v("0"), v("1"), v("00"), v("000"), v("001")];
        assert_eq!(p01.set.vertices(), &expected[..]);

        let p11 = block_past(&v("11"), 1, 1, None).unwrap();
        let mut expected: Vec<VertexId> = tree_up_to(1).vertices().to_vec();
        for r in ["00", "01", "10"] {
            expected.extend(subtree(&v(r), 1).vertices().iter().cloned());
        }
        expected.sort();
        assert_eq!(p11.set.vertices(), &expected[..]);

        assert!(matches!(
            block_past(&v("0"), 1, 0, None),
            Err(HmtError::BlockMisaligned { .. })
        ));
    }

    #[test]
    fn block_telescoping_covers_tree() {
        // The blocks of T_{n(m+1)-1} partition it, so the last block's delta
        // must equal the whole tree.
        let m = 1;
        let n_blocks = 2;
        let depth = n_blocks * (m + 1) - 1;
        let last = generation(depth - m).vertices().last().unwrap().clone();
        let d = block_delta(&last, m, (last.height()) / (m + 1), None).unwrap();
        assert_eq!(d.set.len(), tree_size(depth));
    }

    #[test]
    fn prefix_region_matches_definition() {
        let k = 1;
        let j = 6;
        let region = prefix_region(j, k).unwrap();
        let expected: Vec<VertexId> = (1..=j).map(bfs_vertex).collect();
        assert_eq!(region.vertices(), &expected[..]);
        assert!(prefix_region(0, 2).is_err());
    }
}
