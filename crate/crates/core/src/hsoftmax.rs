//! Binary trees that replace the wide softmax over a subcategory's apps.
//!
//! Each subcategory whose children are apps gets its own strictly binary
//! tree. An app's probability within the subcategory is the product of
//! left/right sigmoid decisions along the unique root-to-leaf route, so only
//! about log2(n) internal nodes are touched per app instead of all n apps.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ids::{AppId, HsNodeId, NodeId};
use crate::taxonomy::CategoryTree;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    Left,
    Right,
}

impl Direction {
    /// +1 for left, -1 for right.
    #[inline]
    pub fn sign(self) -> f64 {
        match self {
            Direction::Left => 1.0,
            Direction::Right => -1.0,
        }
    }

    /// 1 for left, 0 for right.
    #[inline]
    pub fn indicator(self) -> f64 {
        match self {
            Direction::Left => 1.0,
            Direction::Right => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HsStrategy {
    /// Complete tree over apps in load order, left half rounded up.
    #[default]
    Balanced,
    /// Huffman coding over adoption counts.
    Huffman,
}

impl FromStr for HsStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "balanced" => Ok(HsStrategy::Balanced),
            "huffman" => Ok(HsStrategy::Huffman),
            other => Err(Error::InvalidConfig(format!("unknown tree strategy `{other}`"))),
        }
    }
}

impl fmt::Display for HsStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HsStrategy::Balanced => "balanced",
            HsStrategy::Huffman => "huffman",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HsChild {
    /// Local index of another internal node of the same tree.
    Node(u32),
    App(AppId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HsInternal {
    pub left: HsChild,
    pub right: HsChild,
}

/// Root-to-leaf route as (local node index, direction) pairs.
pub type LocalPath = Vec<(u32, Direction)>;

/// Binary tree over the apps of one subcategory. Internal node 0 is the root;
/// nodes are numbered in preorder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HsTree {
    owner: NodeId,
    nodes: Vec<HsInternal>,
    leaves: Vec<AppId>,
}

fn check_apps(apps: &[AppId]) -> Result<()> {
    if apps.is_empty() {
        return Err(Error::EmptyAppList);
    }
    let mut seen = HashSet::with_capacity(apps.len());
    for &a in apps {
        if !seen.insert(a) {
            return Err(Error::DuplicateApp(a.to_string()));
        }
    }
    Ok(())
}

impl HsTree {
    pub fn balanced(owner: NodeId, apps: &[AppId]) -> Result<Self> {
        check_apps(apps)?;
        let mut nodes = Vec::with_capacity(apps.len() - 1);
        fn split(apps: &[AppId], nodes: &mut Vec<HsInternal>) -> HsChild {
            if apps.len() == 1 {
                return HsChild::App(apps[0]);
            }
            let slot = nodes.len();
            nodes.push(HsInternal { left: HsChild::Node(u32::MAX), right: HsChild::Node(u32::MAX) });
            let mid = apps.len().div_ceil(2);
            let left = split(&apps[..mid], nodes);
            let right = split(&apps[mid..], nodes);
            nodes[slot] = HsInternal { left, right };
            HsChild::Node(slot as u32)
        }
        split(apps, &mut nodes);
        Ok(HsTree { owner, nodes, leaves: apps.to_vec() })
    }

    /// Huffman tree over `freq` (aligned with `apps`). The two lightest
    /// subtrees merge first; ties go to the subtree holding the smallest app
    /// id, and the lighter subtree becomes the left child.
    pub fn huffman(owner: NodeId, apps: &[AppId], freq: &[u64]) -> Result<Self> {
        check_apps(apps)?;
        if freq.len() != apps.len() {
            return Err(Error::InvalidConfig(format!("{} frequencies for {} apps", freq.len(), apps.len())));
        }
        enum Part {
            Leaf(AppId),
            Join(usize, usize),
        }
        let mut parts: Vec<Part> = apps.iter().map(|&a| Part::Leaf(a)).collect();
        let mut heap: BinaryHeap<Reverse<(u64, AppId, usize)>> =
            apps.iter().zip(freq).enumerate().map(|(h, (&a, &f))| Reverse((f, a, h))).collect();
        while heap.len() > 1 {
            let Reverse((fa, ma, a)) = heap.pop().unwrap();
            let Reverse((fb, mb, b)) = heap.pop().unwrap();
            parts.push(Part::Join(a, b));
            heap.push(Reverse((fa.saturating_add(fb), ma.min(mb), parts.len() - 1)));
        }
        let Reverse((_, _, top)) = heap.pop().unwrap();

        fn emit(parts: &[Part], h: usize, nodes: &mut Vec<HsInternal>) -> HsChild {
            match parts[h] {
                Part::Leaf(a) => HsChild::App(a),
                Part::Join(l, r) => {
                    let slot = nodes.len();
                    nodes.push(HsInternal { left: HsChild::Node(u32::MAX), right: HsChild::Node(u32::MAX) });
                    let left = emit(parts, l, nodes);
                    let right = emit(parts, r, nodes);
                    nodes[slot] = HsInternal { left, right };
                    HsChild::Node(slot as u32)
                }
            }
        }
        let mut nodes = Vec::with_capacity(apps.len() - 1);
        emit(&parts, top, &mut nodes);
        Ok(HsTree { owner, nodes, leaves: apps.to_vec() })
    }

    /// Reassembles a tree from stored parts, checking that it is strictly
    /// binary, preorder-numbered, and covers `leaves` exactly once.
    pub fn from_parts(owner: NodeId, leaves: Vec<AppId>, nodes: Vec<HsInternal>) -> Result<Self> {
        check_apps(&leaves)?;
        if nodes.len() + 1 != leaves.len() {
            return Err(Error::CorruptFile(format!(
                "binary tree with {} internal nodes over {} apps",
                nodes.len(),
                leaves.len()
            )));
        }
        let tree = HsTree { owner, nodes, leaves };
        let paths = tree.local_paths_checked()?;
        let mut reached: Vec<AppId> = paths.iter().map(|(a, _)| *a).collect();
        let mut expected = tree.leaves.clone();
        reached.sort();
        expected.sort();
        if reached != expected {
            return Err(Error::CorruptFile("binary tree leaves do not match its app list".into()));
        }
        Ok(tree)
    }

    pub fn owner(&self) -> NodeId {
        self.owner
    }

    pub fn nodes(&self) -> &[HsInternal] {
        &self.nodes
    }

    pub fn leaves(&self) -> &[AppId] {
        &self.leaves
    }

    pub fn num_internal(&self) -> usize {
        self.nodes.len()
    }

    /// Every leaf with its route of (local node, direction) steps, in
    /// left-to-right leaf order.
    pub fn local_paths(&self) -> Vec<(AppId, LocalPath)> {
        self.local_paths_checked().expect("trees are validated on construction")
    }

    fn local_paths_checked(&self) -> Result<Vec<(AppId, LocalPath)>> {
        let mut out = Vec::with_capacity(self.leaves.len());
        if self.nodes.is_empty() {
            out.push((self.leaves[0], Vec::new()));
            return Ok(out);
        }
        let mut visited = vec![false; self.nodes.len()];
        let mut stack = vec![(0u32, Vec::new())];
        while let Some((n, prefix)) = stack.pop() {
            let node = self
                .nodes
                .get(n as usize)
                .ok_or_else(|| Error::CorruptFile(format!("binary tree child {n} out of range")))?;
            if std::mem::replace(&mut visited[n as usize], true) {
                return Err(Error::CorruptFile("binary tree node reached twice".into()));
            }
            // Right pushed first so the left subtree is emitted first.
            for (child, dir) in [(node.right, Direction::Right), (node.left, Direction::Left)] {
                let mut route: Vec<(u32, Direction)> = prefix.clone();
                route.push((n, dir));
                match child {
                    HsChild::App(a) => out.push((a, route)),
                    HsChild::Node(c) => stack.push((c, route)),
                }
            }
        }
        // Leaves were pushed in an interleaved order; restore left-to-right.
        out.sort_by(|a, b| {
            let key = |r: &Vec<(u32, Direction)>| r.iter().map(|&(_, d)| d == Direction::Right).collect::<Vec<_>>();
            key(&a.1).cmp(&key(&b.1))
        });
        if visited.iter().any(|v| !v) {
            return Err(Error::CorruptFile("unreachable binary tree node".into()));
        }
        Ok(out)
    }
}

/// Builds one subcategory tree with the given strategy. `freq` is required
/// for Huffman and ignored otherwise.
pub fn build_hs_tree(owner: NodeId, apps: &[AppId], strategy: HsStrategy, freq: Option<&[u64]>) -> Result<HsTree> {
    match strategy {
        HsStrategy::Balanced => HsTree::balanced(owner, apps),
        HsStrategy::Huffman => {
            let freq = freq.ok_or_else(|| Error::InvalidConfig("huffman trees need per-app frequencies".into()))?;
            HsTree::huffman(owner, apps, freq)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HsStep {
    pub node: HsNodeId,
    pub dir: Direction,
}

/// An app's route through its subcategory's binary tree, with global node ids.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct HsPath {
    pub steps: Vec<HsStep>,
}

impl HsPath {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// One binary tree per subcategory, with internal nodes numbered globally
/// (tree by tree, in subcategory load order).
#[derive(Debug, Clone)]
pub struct HsForest {
    trees: Vec<HsTree>,
    offsets: Vec<u32>,
    by_owner: HashMap<NodeId, usize>,
    app_paths: Vec<HsPath>,
    total: usize,
}

impl HsForest {
    /// `app_freq` is indexed by app id and is only consulted for Huffman.
    pub fn build(tree: &CategoryTree, strategy: HsStrategy, app_freq: Option<&[u64]>) -> Result<Self> {
        let mut trees = Vec::with_capacity(tree.subcategories().len());
        for &z in tree.subcategories() {
            let apps = tree.apps_under(z)?;
            let freq: Option<Vec<u64>> = app_freq.map(|f| apps.iter().map(|a| f[a.index()]).collect());
            trees.push(build_hs_tree(z, &apps, strategy, freq.as_deref())?);
        }
        Self::from_trees(tree, trees)
    }

    /// Assembles a forest, checking one tree per subcategory covering exactly its apps.
    pub fn from_trees(tree: &CategoryTree, trees: Vec<HsTree>) -> Result<Self> {
        let subcats = tree.subcategories();
        if trees.len() != subcats.len() {
            return Err(Error::CorruptFile(format!(
                "{} binary trees for {} subcategories",
                trees.len(),
                subcats.len()
            )));
        }
        let mut offsets = Vec::with_capacity(trees.len());
        let mut by_owner = HashMap::with_capacity(trees.len());
        let mut app_paths = vec![None; tree.num_apps()];
        let mut total = 0usize;
        for (t, (&z, hs)) in subcats.iter().zip(&trees).enumerate() {
            if hs.owner != z {
                return Err(Error::CorruptFile("binary tree owner mismatch".into()));
            }
            let mut apps = tree.apps_under(z)?;
            let mut leaves = hs.leaves.clone();
            apps.sort();
            leaves.sort();
            if apps != leaves {
                return Err(Error::CorruptFile(format!(
                    "binary tree for `{}` does not cover its apps",
                    tree.key_of(z)
                )));
            }
            offsets.push(total as u32);
            by_owner.insert(z, t);
            for (app, route) in hs.local_paths() {
                app_paths[app.index()] = Some(HsPath {
                    steps: route.into_iter().map(|(n, dir)| HsStep { node: HsNodeId(total as u32 + n), dir }).collect(),
                });
            }
            total += hs.num_internal();
        }
        let app_paths =
            app_paths.into_iter().map(|p| p.expect("every app lives under exactly one subcategory")).collect();
        Ok(HsForest { trees, offsets, by_owner, app_paths, total })
    }

    pub fn hs_path(&self, app: AppId) -> Result<&HsPath> {
        self.app_paths.get(app.index()).ok_or_else(|| Error::UnknownApp(app.to_string()))
    }

    pub fn trees(&self) -> &[HsTree] {
        &self.trees
    }

    pub fn tree_of(&self, owner: NodeId) -> Option<&HsTree> {
        self.by_owner.get(&owner).map(|&t| &self.trees[t])
    }

    /// Global id of local node `local` in the tree owned by `owner`.
    pub fn global_id(&self, owner: NodeId, local: u32) -> Option<HsNodeId> {
        self.by_owner.get(&owner).map(|&t| HsNodeId(self.offsets[t] + local))
    }

    /// Total internal binary-tree nodes across the forest.
    pub fn num_nodes(&self) -> usize {
        self.total
    }
}
