//! Self-describing binary model files.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic        8 bytes  "TRCHOICE"
//! version      u32
//! kind         u8       0 sucm, 1 llfm, 2 pmf-neg, 3 bpr, 4 ccf
//! dim          u32
//! n_nodes      u32
//! n_users      u32
//! n_apps       u32
//! config       str      JSON echo of the training configuration
//! taxonomy     n_nodes × { key str, parent u32 (u32::MAX for root), kind u8, name str }
//! users        n_users × str
//! train        n_users × { count u32, count × app u32 }
//! body (sucm)  sigma f64,
//!              per subcategory in load order:
//!                owner u32, n_leaves u32, leaves u32…,
//!                (n_leaves − 1) × { left child, right child }   child = tag u8 (0 node, 1 app) + u32
//!              f64 arrays: user, node_vec, node_bias, hs_vec, hs_bias
//! body (flat)  f64 arrays: user, item, bias
//! checksum     32 bytes SHA-256 of everything above
//! ```
//!
//! `str` is a u32 byte length followed by UTF-8 bytes. Array lengths are
//! implied by the counts and `dim`.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::AdoptionDataset;
use crate::error::{Error, Result};
use crate::hsoftmax::{HsChild, HsForest, HsInternal, HsTree};
use crate::ids::{AppId, NodeId, UserIndex};
use crate::model::{FlatParams, Model, ModelParams};
use crate::taxonomy::{CategoryTree, NodeKind, TaxonomyEntry};

pub const MODEL_MAGIC: &[u8; 8] = b"TRCHOICE";
pub const MODEL_VERSION: u32 = 1;
const CHECKSUM_LEN: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FlatKind {
    Llfm,
    PmfNeg,
    Bpr,
    Ccf,
}

impl FlatKind {
    pub const ALL: [FlatKind; 4] = [FlatKind::Llfm, FlatKind::PmfNeg, FlatKind::Bpr, FlatKind::Ccf];

    pub fn as_str(self) -> &'static str {
        match self {
            FlatKind::Llfm => "llfm",
            FlatKind::PmfNeg => "pmf-neg",
            FlatKind::Bpr => "bpr",
            FlatKind::Ccf => "ccf",
        }
    }

    fn tag(self) -> u8 {
        match self {
            FlatKind::Llfm => 1,
            FlatKind::PmfNeg => 2,
            FlatKind::Bpr => 3,
            FlatKind::Ccf => 4,
        }
    }
}

impl fmt::Display for FlatKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FlatKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FlatKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown baseline `{s}`")))
    }
}

/// Everything needed to score users again: the model, the taxonomy it was
/// trained against, and the training adoptions (for exclusion at ranking time).
#[derive(Debug, Clone)]
pub enum SavedModel {
    Structural { model: Model, train: AdoptionDataset, config: String },
    Flat { kind: FlatKind, tree: CategoryTree, params: FlatParams, train: AdoptionDataset, config: String },
}

impl SavedModel {
    pub fn name(&self) -> &'static str {
        match self {
            SavedModel::Structural { .. } => "sucm",
            SavedModel::Flat { kind, .. } => kind.as_str(),
        }
    }

    pub fn tree(&self) -> &CategoryTree {
        match self {
            SavedModel::Structural { model, .. } => &model.tree,
            SavedModel::Flat { tree, .. } => tree,
        }
    }

    pub fn train(&self) -> &AdoptionDataset {
        match self {
            SavedModel::Structural { train, .. } | SavedModel::Flat { train, .. } => train,
        }
    }

    pub fn config(&self) -> &str {
        match self {
            SavedModel::Structural { config, .. } | SavedModel::Flat { config, .. } => config,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            SavedModel::Structural { model, .. } => model.params.dim,
            SavedModel::Flat { params, .. } => params.dim,
        }
    }
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn len(&mut self, n: usize) -> Result<()> {
        let v = u32::try_from(n).map_err(|_| Error::InvalidConfig(format!("count {n} exceeds u32")))?;
        self.u32(v);
        Ok(())
    }
    fn str(&mut self, s: &str) -> Result<()> {
        self.len(s.len())?;
        self.buf.extend_from_slice(s.as_bytes());
        Ok(())
    }
    fn f64s(&mut self, vs: &[f64]) {
        for &v in vs {
            self.f64(v);
        }
    }
    fn child(&mut self, c: HsChild) {
        match c {
            HsChild::Node(n) => {
                self.u8(0);
                self.u32(n);
            }
            HsChild::App(a) => {
                self.u8(1);
                self.u32(a.0);
            }
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptFile(msg.into())
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| corrupt("truncated"))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| corrupt("invalid UTF-8"))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| corrupt("array too large"))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
    fn child(&mut self) -> Result<HsChild> {
        match self.u8()? {
            0 => Ok(HsChild::Node(self.u32()?)),
            1 => Ok(HsChild::App(AppId(self.u32()?))),
            t => Err(corrupt(format!("bad child tag {t}"))),
        }
    }
}

/// Serializes `saved` to bytes (including the trailing checksum).
pub fn encode_model(saved: &SavedModel) -> Result<Vec<u8>> {
    let tree = saved.tree();
    let train = saved.train();
    let mut w = Writer { buf: Vec::new() };
    w.buf.extend_from_slice(MODEL_MAGIC);
    w.u32(MODEL_VERSION);
    w.u8(match saved {
        SavedModel::Structural { .. } => 0,
        SavedModel::Flat { kind, .. } => kind.tag(),
    });
    w.len(saved.dim())?;
    w.len(tree.num_nodes())?;
    w.len(train.n_users())?;
    w.len(tree.num_apps())?;
    w.str(saved.config())?;
    for n in tree.nodes() {
        w.str(&n.key)?;
        w.u32(n.parent.map_or(u32::MAX, |p| p.0));
        w.u8(match n.kind {
            NodeKind::Internal => 0,
            NodeKind::App => 1,
        });
        w.str(&n.name)?;
    }
    for key in train.users().keys() {
        w.str(key)?;
    }
    for apps in train.per_user() {
        w.len(apps.len())?;
        for a in apps {
            w.u32(a.0);
        }
    }
    match saved {
        SavedModel::Structural { model, .. } => {
            if model.params.n_users() != train.n_users() {
                return Err(Error::InvalidConfig("model and training users disagree".into()));
            }
            w.f64(model.params.sigma);
            for hs in model.forest.trees() {
                w.u32(hs.owner().0);
                w.len(hs.leaves().len())?;
                for a in hs.leaves() {
                    w.u32(a.0);
                }
                for n in hs.nodes() {
                    w.child(n.left);
                    w.child(n.right);
                }
            }
            let p = &model.params;
            for arr in [&p.user, &p.node_vec, &p.node_bias, &p.hs_vec, &p.hs_bias] {
                w.f64s(arr);
            }
        }
        SavedModel::Flat { params, .. } => {
            if params.n_users() != train.n_users() || params.n_apps() != tree.num_apps() {
                return Err(Error::InvalidConfig("flat parameters do not match the data".into()));
            }
            for arr in [&params.user, &params.item, &params.bias] {
                w.f64s(arr);
            }
        }
    }
    let digest = Sha256::digest(&w.buf);
    w.buf.extend_from_slice(&digest);
    Ok(w.buf)
}

pub fn decode_model(bytes: &[u8]) -> Result<SavedModel> {
    if bytes.len() < MODEL_MAGIC.len() + 4 || &bytes[..MODEL_MAGIC.len()] != MODEL_MAGIC {
        return Err(corrupt("missing magic header"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != MODEL_VERSION {
        return Err(Error::VersionMismatch { found: version, expected: MODEL_VERSION });
    }
    if bytes.len() < 12 + CHECKSUM_LEN {
        return Err(corrupt("truncated"));
    }
    let (body, checksum) = bytes.split_at(bytes.len() - CHECKSUM_LEN);
    if Sha256::digest(body).as_slice() != checksum {
        return Err(corrupt("checksum mismatch (truncated or damaged)"));
    }

    let mut r = Reader { buf: body, pos: 12 };
    let kind = r.u8()?;
    let dim = r.u32()? as usize;
    let n_nodes = r.u32()? as usize;
    let n_users = r.u32()? as usize;
    let n_apps = r.u32()? as usize;
    if dim == 0 {
        return Err(corrupt("zero dimension"));
    }
    let config = r.str()?;

    let mut raw = Vec::with_capacity(n_nodes.min(1 << 20));
    for _ in 0..n_nodes {
        let key = r.str()?;
        let parent = r.u32()?;
        let kind = match r.u8()? {
            0 => NodeKind::Internal,
            1 => NodeKind::App,
            t => return Err(corrupt(format!("bad node kind {t}"))),
        };
        let name = r.str()?;
        raw.push((key, parent, kind, name));
    }
    let mut entries = Vec::with_capacity(raw.len());
    for (key, parent, kind, name) in &raw {
        let parent = match *parent {
            u32::MAX => None,
            p => Some(raw.get(p as usize).ok_or_else(|| corrupt("parent out of range"))?.0.as_str()),
        };
        entries.push(TaxonomyEntry::new(key, parent, *kind, name));
    }
    let tree = CategoryTree::build(&entries).map_err(|e| corrupt(format!("taxonomy: {e}")))?;
    if tree.num_apps() != n_apps {
        return Err(corrupt("app count does not match taxonomy"));
    }

    let mut users = UserIndex::new();
    for _ in 0..n_users {
        users.intern(r.str()?);
    }
    if users.len() != n_users {
        return Err(corrupt("duplicate user keys"));
    }
    let mut per_user = Vec::with_capacity(n_users);
    for _ in 0..n_users {
        let count = r.u32()? as usize;
        let mut apps = Vec::with_capacity(count.min(n_apps));
        for _ in 0..count {
            apps.push(AppId(r.u32()?));
        }
        per_user.push(apps);
    }
    let train = AdoptionDataset::new(users, n_apps, per_user).map_err(|e| corrupt(format!("training set: {e}")))?;

    let saved = match kind {
        0 => {
            let sigma = r.f64()?;
            let mut trees = Vec::with_capacity(tree.subcategories().len());
            for _ in 0..tree.subcategories().len() {
                let owner = NodeId(r.u32()?);
                let n_leaves = r.u32()? as usize;
                if n_leaves == 0 || n_leaves > n_apps {
                    return Err(corrupt("bad binary tree size"));
                }
                let mut leaves = Vec::with_capacity(n_leaves);
                for _ in 0..n_leaves {
                    leaves.push(AppId(r.u32()?));
                }
                let mut nodes = Vec::with_capacity(n_leaves - 1);
                for _ in 0..n_leaves - 1 {
                    nodes.push(HsInternal { left: r.child()?, right: r.child()? });
                }
                trees.push(HsTree::from_parts(owner, leaves, nodes)?);
            }
            let forest = HsForest::from_trees(&tree, trees)?;
            let n_int = tree.num_internal();
            let n_hs = forest.num_nodes();
            let params = ModelParams {
                dim,
                sigma,
                user: r.f64s(n_users * dim)?,
                node_vec: r.f64s(n_int * dim)?,
                node_bias: r.f64s(n_int)?,
                hs_vec: r.f64s(n_hs * dim)?,
                hs_bias: r.f64s(n_hs)?,
            };
            SavedModel::Structural { model: Model::new(tree, forest, params)?, train, config }
        }
        1..=4 => {
            let kind = FlatKind::ALL[kind as usize - 1];
            let params =
                FlatParams { dim, user: r.f64s(n_users * dim)?, item: r.f64s(n_apps * dim)?, bias: r.f64s(n_apps)? };
            SavedModel::Flat { kind, tree, params, train, config }
        }
        t => return Err(corrupt(format!("unknown model kind {t}"))),
    };
    if r.pos != body.len() {
        return Err(corrupt("trailing bytes"));
    }
    Ok(saved)
}

pub fn save_model(saved: &SavedModel, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_model(saved)?)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<SavedModel> {
    decode_model(&fs::read(path)?)
}
