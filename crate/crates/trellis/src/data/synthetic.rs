//! Synthetic tree generators for tests, demos, and benchmarks.
//!
//! Trees are drawn either with a fixed deterministic topology (a complete
//! tree whenever the leaf count is a power of two) or uniformly at random
//! over all binary tree shapes with the requested number of leaves. The
//! sentiment generator labels every node with a compositional rule so a
//! model can be trained and checked against ground truth.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::host::HostValue;

/// Number of classes produced by [`sentiment_examples`] labels.
pub const SENTIMENT_CLASSES: usize = 5;

/// How [`tree_shape`] picks a topology for a given leaf count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeMode {
    /// Deterministic halving splits; a complete tree at powers of two.
    Fixed,
    /// Uniform over all binary tree shapes with that many leaves.
    Random,
}

/// A binary tree topology with data-free nodes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TreeShape {
    Leaf,
    Branch(Box<TreeShape>, Box<TreeShape>),
}

impl TreeShape {
    pub fn leaves(&self) -> usize {
        match self {
            TreeShape::Leaf => 1,
            TreeShape::Branch(l, r) => l.leaves() + r.leaves(),
        }
    }

    /// Longest root-to-leaf edge count; a lone leaf has depth 0.
    pub fn depth(&self) -> usize {
        match self {
            TreeShape::Leaf => 0,
            TreeShape::Branch(l, r) => 1 + l.depth().max(r.depth()),
        }
    }

    pub fn node_count(&self) -> usize {
        match self {
            TreeShape::Leaf => 1,
            TreeShape::Branch(l, r) => 1 + l.node_count() + r.node_count(),
        }
    }
}

/// Builds a tree shape over `leaves` leaves.
///
/// `Fixed` mode ignores the generator and splits each group of n leaves
/// into ceil(n/2) on the left and the rest on the right. `Random` mode
/// samples uniformly over shapes by weighting each split with the number
/// of shapes it can produce; weights are formed in log space so large leaf
/// counts stay finite.
pub fn tree_shape<R: Rng + ?Sized>(leaves: usize, mode: ShapeMode, rng: &mut R) -> TreeShape {
    assert!(leaves >= 1, "a tree needs at least one leaf");
    match mode {
        ShapeMode::Fixed => fixed_shape(leaves),
        ShapeMode::Random => {
            let ln_fact = ln_factorials(2 * leaves);
            random_shape(leaves, &ln_fact, rng)
        }
    }
}

fn fixed_shape(leaves: usize) -> TreeShape {
    if leaves == 1 {
        return TreeShape::Leaf;
    }
    let left = (leaves + 1) / 2;
    TreeShape::Branch(Box::new(fixed_shape(left)), Box::new(fixed_shape(leaves - left)))
}

fn ln_factorials(up_to: usize) -> Vec<f64> {
    let mut table = vec![0.0; up_to + 1];
    for i in 1..=up_to {
        table[i] = table[i - 1] + (i as f64).ln();
    }
    table
}

/// ln of the number of binary tree shapes with `m + 1` leaves.
fn ln_catalan(ln_fact: &[f64], m: usize) -> f64 {
    ln_fact[2 * m] - 2.0 * ln_fact[m] - ((m + 1) as f64).ln()
}

fn random_shape<R: Rng + ?Sized>(leaves: usize, ln_fact: &[f64], rng: &mut R) -> TreeShape {
    if leaves == 1 {
        return TreeShape::Leaf;
    }
    let log_weights: Vec<f64> = (1..leaves)
        .map(|k| ln_catalan(ln_fact, k - 1) + ln_catalan(ln_fact, leaves - k - 1))
        .collect();
    let max = log_weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = log_weights.iter().map(|lw| (lw - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut draw = rng.gen_range(0.0..total);
    let mut left = leaves - 1;
    for (i, w) in weights.iter().enumerate() {
        if draw < *w {
            left = i + 1;
            break;
        }
        draw -= w;
    }
    TreeShape::Branch(
        Box::new(random_shape(left, ln_fact, rng)),
        Box::new(random_shape(leaves - left, ln_fact, rng)),
    )
}

/// The word list used by the sentiment generator.
pub fn vocab() -> Vec<String> {
    (0..16).map(|i| format!("w{i}")).collect()
}

/// Sentiment of word `i` on the scale -2..=2.
pub fn word_valence(i: usize) -> i64 {
    (i % 5) as i64 - 2
}

fn clamp_sentiment(s: i64) -> i64 {
    s.clamp(-2, 2)
}

/// Fills `shape` with random vocabulary words and labels every node.
///
/// A leaf's sentiment is its word's valence; an interior node's sentiment
/// is the clamped sum of its children's. Each node stores the label
/// `sentiment + 2`, so labels range over 0..=4. Returns the tree and the
/// root sentiment.
pub fn sentiment_tree<R: Rng + ?Sized>(shape: &TreeShape, rng: &mut R) -> (HostValue, i64) {
    match shape {
        TreeShape::Leaf => {
            let w = rng.gen_range(0..16usize);
            let s = word_valence(w);
            let node = HostValue::map(vec![
                ("word", HostValue::Str(format!("w{w}"))),
                ("label", HostValue::Int(s + 2)),
            ]);
            (node, s)
        }
        TreeShape::Branch(l, r) => {
            let (left, s_l) = sentiment_tree(l, rng);
            let (right, s_r) = sentiment_tree(r, rng);
            let s = clamp_sentiment(s_l + s_r);
            let node = HostValue::map(vec![
                ("left", left),
                ("right", right),
                ("label", HostValue::Int(s + 2)),
            ]);
            (node, s)
        }
    }
}

/// Generates `count` labeled training examples of the form
/// `{"tree": ..., "label": root label}` with random topologies whose leaf
/// counts are drawn from `min_leaves..=max_leaves`.
pub fn sentiment_examples(
    count: usize,
    min_leaves: usize,
    max_leaves: usize,
    seed: u64,
) -> Vec<HostValue> {
    assert!(1 <= min_leaves && min_leaves <= max_leaves);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let leaves = rng.gen_range(min_leaves..=max_leaves);
            let shape = tree_shape(leaves, ShapeMode::Random, &mut rng);
            let (tree, s) = sentiment_tree(&shape, &mut rng);
            HostValue::map(vec![("tree", tree), ("label", HostValue::Int(s + 2))])
        })
        .collect()
}

/// Fills `shape` with integer tokens drawn from `0..vocab_size`, producing
/// leaves of the form `{"word": token}` for embedding-based models.
pub fn token_tree<R: Rng + ?Sized>(
    shape: &TreeShape,
    vocab_size: usize,
    rng: &mut R,
) -> HostValue {
    match shape {
        TreeShape::Leaf => HostValue::map(vec![(
            "word",
            HostValue::Int(rng.gen_range(0..vocab_size as i64)),
        )]),
        TreeShape::Branch(l, r) => HostValue::map(vec![
            ("left", token_tree(l, vocab_size, rng)),
            ("right", token_tree(r, vocab_size, rng)),
        ]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn fixed_shapes_halve_the_leaves() {
        let mut r = rng(0);
        assert_eq!(tree_shape(1, ShapeMode::Fixed, &mut r), TreeShape::Leaf);
        for leaves in [2usize, 4, 8, 32] {
            let shape = tree_shape(leaves, ShapeMode::Fixed, &mut r);
            assert_eq!(shape.leaves(), leaves);
            assert_eq!(shape.depth(), leaves.trailing_zeros() as usize);
            assert_eq!(shape.node_count(), 2 * leaves - 1);
        }
        let lopsided = tree_shape(5, ShapeMode::Fixed, &mut r);
        assert_eq!(lopsided.leaves(), 5);
        assert_eq!(lopsided.depth(), 3);
    }

    #[test]
    fn random_shapes_are_seed_deterministic() {
        let a = tree_shape(24, ShapeMode::Random, &mut rng(7));
        let b = tree_shape(24, ShapeMode::Random, &mut rng(7));
        let c = tree_shape(24, ShapeMode::Random, &mut rng(8));
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.leaves(), 24);
    }

    #[test]
    fn random_shapes_reach_every_small_topology() {
        let mut r = rng(3);
        let mut seen = std::collections::HashSet::new();
        for _ in 0..600 {
            seen.insert(format!("{:?}", tree_shape(4, ShapeMode::Random, &mut r)));
        }
        assert_eq!(seen.len(), 5);
    }

    #[test]
    fn large_random_shapes_stay_finite() {
        let shape = tree_shape(300, ShapeMode::Random, &mut rng(11));
        assert_eq!(shape.leaves(), 300);
    }

    #[test]
    fn sentiment_labels_follow_the_clamped_sum_rule() {
        fn check(node: &HostValue) -> i64 {
            let label = node.field("label").unwrap().as_int().unwrap();
            let s = if let Ok(word) = node.field("word") {
                let name = match word {
                    HostValue::Str(s) => s,
                    other => panic!("leaf word should be a string, got {other:?}"),
                };
                word_valence(name[1..].parse::<usize>().unwrap())
            } else {
                clamp_sentiment(
                    check(node.field("left").unwrap()) + check(node.field("right").unwrap()),
                )
            };
            assert_eq!(label, s + 2);
            s
        }
        for example in sentiment_examples(20, 1, 9, 42) {
            let root = check(example.field("tree").unwrap());
            assert_eq!(example.field("label").unwrap().as_int().unwrap(), root + 2);
        }
    }

    #[test]
    fn examples_are_seed_deterministic() {
        let a = sentiment_examples(6, 2, 8, 9);
        let b = sentiment_examples(6, 2, 8, 9);
        assert_eq!(format!("{a:?}"), format!("{b:?}"));
    }

    #[test]
    fn token_trees_match_their_shape() {
        fn count(node: &HostValue, vocab_size: i64) -> usize {
            if let Ok(word) = node.field("word") {
                let w = word.as_int().unwrap();
                assert!((0..vocab_size).contains(&w));
                1
            } else {
                count(node.field("left").unwrap(), vocab_size)
                    + count(node.field("right").unwrap(), vocab_size)
            }
        }
        let mut r = rng(2);
        let shape = tree_shape(17, ShapeMode::Random, &mut r);
        let tree = token_tree(&shape, 50, &mut r);
        assert_eq!(count(&tree, 50), 17);
    }
}
