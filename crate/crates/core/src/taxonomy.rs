//! The category tree: categories and subcategories as internal nodes, apps as leaves.
//!
//! Nodes keep the order in which they were loaded. Every iteration over
//! children, competitors and subcategories follows that order, which is what
//! makes seeded training runs reproducible.
//!
//! An internal node with no app anywhere below it is kept in the structure
//! but is *inactive*: it never appears in a choice set, so it cannot absorb
//! probability mass that no app could ever claim.

use std::collections::{HashMap, VecDeque};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ids::{AppId, NodeId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Internal,
    App,
}

impl NodeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            NodeKind::Internal => "internal",
            NodeKind::App => "app",
        }
    }
}

/// One line of a taxonomy description: a node and the key of its parent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaxonomyEntry {
    pub key: String,
    pub parent: Option<String>,
    pub kind: NodeKind,
    pub name: String,
}

impl TaxonomyEntry {
    pub fn new(key: impl Into<String>, parent: Option<&str>, kind: NodeKind, name: impl Into<String>) -> Self {
        Self { key: key.into(), parent: parent.map(str::to_string), kind, name: name.into() }
    }
}

#[derive(Debug, Clone)]
pub struct Node {
    pub key: String,
    pub name: String,
    pub kind: NodeKind,
    pub parent: Option<NodeId>,
    pub children: Vec<NodeId>,
    pub level: u32,
    pub app: Option<AppId>,
}

/// Root-to-app route through the taxonomy.
///
/// `nodes` starts with the root and ends with the subcategory whose children
/// are apps; the decisions are `nodes[1..]` followed by the app itself.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChoicePath {
    pub nodes: Vec<NodeId>,
    pub app: AppId,
}

impl ChoicePath {
    /// Category-level decisions z_1..z_M (the root is the origin, not a choice).
    pub fn decisions(&self) -> &[NodeId] {
        &self.nodes[1..]
    }

    /// The subcategory whose children compete for the final app choice.
    pub fn subcategory(&self) -> NodeId {
        *self.nodes.last().expect("path always contains the root")
    }

    /// Number of category-level decisions, M.
    pub fn depth(&self) -> usize {
        self.nodes.len() - 1
    }
}

#[derive(Debug, Clone)]
pub struct CategoryTree {
    nodes: Vec<Node>,
    root: NodeId,
    key_index: HashMap<String, NodeId>,
    apps: Vec<NodeId>,
    app_paths: Vec<ChoicePath>,
    internal: Vec<NodeId>,
    internal_slot: Vec<Option<u32>>,
    active: Vec<bool>,
    choice_sets: Vec<Vec<NodeId>>,
    subcategories: Vec<NodeId>,
}

impl CategoryTree {
    /// Validates `entries` (in load order) and builds the tree.
    pub fn build(entries: &[TaxonomyEntry]) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::InvalidTaxonomy("no nodes".into()));
        }

        let mut key_index = HashMap::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            if key_index.insert(e.key.clone(), NodeId::from(i)).is_some() {
                return Err(match e.kind {
                    NodeKind::App => Error::DuplicateApp(e.key.clone()),
                    NodeKind::Internal => Error::DuplicateNode(e.key.clone()),
                });
            }
        }

        let mut nodes: Vec<Node> = entries
            .iter()
            .map(|e| Node {
                key: e.key.clone(),
                name: e.name.clone(),
                kind: e.kind,
                parent: None,
                children: Vec::new(),
                level: 0,
                app: None,
            })
            .collect();

        let mut root: Option<NodeId> = None;
        for (i, e) in entries.iter().enumerate() {
            let id = NodeId::from(i);
            match &e.parent {
                None => {
                    if let Some(prev) = root {
                        return Err(Error::MultipleRoots(nodes[prev.index()].key.clone(), e.key.clone()));
                    }
                    root = Some(id);
                }
                Some(pkey) => {
                    let parent = *key_index
                        .get(pkey)
                        .ok_or_else(|| Error::OrphanNode { node: e.key.clone(), parent: pkey.clone() })?;
                    if nodes[parent.index()].kind == NodeKind::App {
                        return Err(Error::AppHasChildren(pkey.clone()));
                    }
                    nodes[i].parent = Some(parent);
                    nodes[parent.index()].children.push(id);
                }
            }
        }
        // Every node has a parent, so following parents must loop.
        let root = root.ok_or_else(|| Error::CycleDetected(entries[0].key.clone()))?;
        if nodes[root.index()].kind == NodeKind::App {
            return Err(Error::InvalidTaxonomy("the root must be an internal node".into()));
        }

        // Breadth-first levels; anything unreachable from the root sits on a cycle.
        let mut seen = vec![false; nodes.len()];
        let mut order = Vec::with_capacity(nodes.len());
        let mut queue = VecDeque::from([root]);
        seen[root.index()] = true;
        while let Some(id) = queue.pop_front() {
            order.push(id);
            let level = nodes[id.index()].level;
            for c in nodes[id.index()].children.clone() {
                if seen[c.index()] {
                    return Err(Error::CycleDetected(nodes[c.index()].key.clone()));
                }
                seen[c.index()] = true;
                nodes[c.index()].level = level + 1;
                queue.push_back(c);
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::CycleDetected(nodes[i].key.clone()));
        }

        for n in &nodes {
            let mut kinds = n.children.iter().map(|c| nodes[c.index()].kind);
            if let Some(first) = kinds.next() {
                if kinds.any(|k| k != first) {
                    return Err(Error::MixedChildKinds(n.key.clone()));
                }
            }
        }

        let mut apps = Vec::new();
        let mut internal = Vec::new();
        let mut internal_slot = vec![None; nodes.len()];
        for (i, n) in nodes.iter_mut().enumerate() {
            match n.kind {
                NodeKind::App => {
                    n.app = Some(AppId::from(apps.len()));
                    apps.push(NodeId::from(i));
                }
                NodeKind::Internal => {
                    internal_slot[i] = Some(internal.len() as u32);
                    internal.push(NodeId::from(i));
                }
            }
        }
        if apps.is_empty() {
            return Err(Error::InvalidTaxonomy("no apps".into()));
        }

        let mut active = vec![false; nodes.len()];
        for &id in order.iter().rev() {
            let n = &nodes[id.index()];
            active[id.index()] = n.kind == NodeKind::App || n.children.iter().any(|c| active[c.index()]);
        }

        let choice_sets =
            nodes.iter().map(|n| n.children.iter().copied().filter(|c| active[c.index()]).collect()).collect();

        let subcategories = internal
            .iter()
            .copied()
            .filter(|z| nodes[z.index()].children.first().is_some_and(|c| nodes[c.index()].kind == NodeKind::App))
            .collect();

        let mut tree = CategoryTree {
            nodes,
            root,
            key_index,
            apps,
            app_paths: Vec::new(),
            internal,
            internal_slot,
            active,
            choice_sets,
            subcategories,
        };
        tree.app_paths = tree.trace_paths();
        Ok(tree)
    }

    /// Top-down depth-first walk collecting the route to every app.
    fn trace_paths(&self) -> Vec<ChoicePath> {
        let mut paths: Vec<Option<ChoicePath>> = vec![None; self.apps.len()];
        let mut prefix = Vec::new();
        self.walk(self.root, &mut prefix, &mut paths);
        paths.into_iter().map(|p| p.expect("every app is reachable from the root")).collect()
    }

    fn walk(&self, id: NodeId, prefix: &mut Vec<NodeId>, out: &mut [Option<ChoicePath>]) {
        let node = &self.nodes[id.index()];
        if let Some(app) = node.app {
            out[app.index()] = Some(ChoicePath { nodes: prefix.clone(), app });
            return;
        }
        prefix.push(id);
        for &c in &node.children {
            self.walk(c, prefix, out);
        }
        prefix.pop();
    }

    pub fn root(&self) -> NodeId {
        self.root
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_apps(&self) -> usize {
        self.apps.len()
    }

    pub fn num_internal(&self) -> usize {
        self.internal.len()
    }

    pub fn node(&self, id: NodeId) -> Result<&Node> {
        self.nodes.get(id.index()).ok_or_else(|| Error::UnknownNode(id.to_string()))
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn parent(&self, id: NodeId) -> Result<Option<NodeId>> {
        Ok(self.node(id)?.parent)
    }

    pub fn children(&self, id: NodeId) -> Result<&[NodeId]> {
        Ok(&self.node(id)?.children)
    }

    /// Other children of this node's parent, in load order.
    pub fn siblings(&self, id: NodeId) -> Result<Vec<NodeId>> {
        match self.parent(id)? {
            None => Ok(Vec::new()),
            Some(p) => Ok(self.nodes[p.index()].children.iter().copied().filter(|&c| c != id).collect()),
        }
    }

    pub fn level(&self, id: NodeId) -> Result<u32> {
        Ok(self.node(id)?.level)
    }

    /// Deepest level of any node.
    pub fn depth(&self) -> u32 {
        self.nodes.iter().map(|n| n.level).max().unwrap_or(0)
    }

    pub fn is_active(&self, id: NodeId) -> bool {
        self.active[id.index()]
    }

    /// Children of `parent` that can actually be chosen (those with apps below).
    pub fn choice_set(&self, parent: NodeId) -> &[NodeId] {
        &self.choice_sets[parent.index()]
    }

    /// The set `id` competes in, itself included.
    pub fn competitors(&self, id: NodeId) -> Result<&[NodeId]> {
        match self.parent(id)? {
            None => Err(Error::RootHasNoChoice),
            Some(p) => Ok(self.choice_set(p)),
        }
    }

    pub fn key_of(&self, id: NodeId) -> &str {
        &self.nodes[id.index()].key
    }

    pub fn node_by_key(&self, key: &str) -> Result<NodeId> {
        self.key_index.get(key).copied().ok_or_else(|| Error::UnknownNode(key.to_string()))
    }

    pub fn app_by_key(&self, key: &str) -> Result<AppId> {
        self.key_index
            .get(key)
            .and_then(|id| self.nodes[id.index()].app)
            .ok_or_else(|| Error::UnknownApp(key.to_string()))
    }

    pub fn app_key(&self, app: AppId) -> &str {
        self.key_of(self.apps[app.index()])
    }

    pub fn app_node(&self, app: AppId) -> Result<NodeId> {
        self.apps.get(app.index()).copied().ok_or_else(|| Error::UnknownApp(app.to_string()))
    }

    pub fn choice_path(&self, app: AppId) -> Result<&ChoicePath> {
        self.app_paths.get(app.index()).ok_or_else(|| Error::UnknownApp(app.to_string()))
    }

    /// Internal nodes in load order; position doubles as the parameter slot.
    pub fn internal_nodes(&self) -> &[NodeId] {
        &self.internal
    }

    pub fn internal_slot(&self, id: NodeId) -> Option<usize> {
        self.internal_slot.get(id.index()).copied().flatten().map(|s| s as usize)
    }

    /// Internal nodes whose children are apps, in load order.
    pub fn subcategories(&self) -> &[NodeId] {
        &self.subcategories
    }

    pub fn apps_under(&self, subcategory: NodeId) -> Result<Vec<AppId>> {
        Ok(self.children(subcategory)?.iter().filter_map(|c| self.nodes[c.index()].app).collect())
    }

    /// Load-order description that rebuilds an identical tree.
    pub fn entries(&self) -> Vec<TaxonomyEntry> {
        self.nodes
            .iter()
            .map(|n| TaxonomyEntry {
                key: n.key.clone(),
                parent: n.parent.map(|p| self.nodes[p.index()].key.clone()),
                kind: n.kind,
                name: n.name.clone(),
            })
            .collect()
    }
}

/// Parses the tab-separated taxonomy format:
/// `node_id<TAB>parent_id<TAB>kind<TAB>name`, root parent `-`, `#` comments.
pub fn parse_taxonomy<R: BufRead>(reader: R) -> Result<CategoryTree> {
    let mut entries = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = n + 1;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected 4 tab-separated fields, found {}", fields.len()),
            });
        }
        let kind = match fields[2] {
            "internal" => NodeKind::Internal,
            "app" => NodeKind::App,
            other => return Err(Error::Parse { line: lineno, msg: format!("unknown node kind `{other}`") }),
        };
        if fields[0].is_empty() {
            return Err(Error::Parse { line: lineno, msg: "empty node id".into() });
        }
        let parent = (fields[1] != "-").then_some(fields[1]);
        entries.push(TaxonomyEntry::new(fields[0], parent, kind, fields[3]));
    }
    CategoryTree::build(&entries)
}

pub fn read_taxonomy(path: impl AsRef<Path>) -> Result<CategoryTree> {
    parse_taxonomy(BufReader::new(File::open(path)?))
}

pub fn write_taxonomy<W: Write>(tree: &CategoryTree, mut out: W) -> Result<()> {
    writeln!(out, "# node_id\tparent_id\tkind\tname")?;
    for e in tree.entries() {
        writeln!(out, "{}\t{}\t{}\t{}", e.key, e.parent.as_deref().unwrap_or("-"), e.kind.as_str(), e.name)?;
    }
    Ok(())
}
