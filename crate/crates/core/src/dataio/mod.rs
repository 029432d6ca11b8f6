//! Adoption records, dataset statistics, synthetic data and model files.

mod modelfile;
mod synth;

pub use modelfile::{
    decode_model, encode_model, load_model, save_model, FlatKind, SavedModel, MODEL_MAGIC, MODEL_VERSION,
};
pub use synth::{generate_synthetic, SynthData, SynthSpec};

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ids::{AppId, UserId, UserIndex};
use crate::taxonomy::CategoryTree;

/// Deduplicated positive (user, app) pairs, grouped by user.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdoptionDataset {
    users: UserIndex,
    n_apps: usize,
    per_user: Vec<Vec<AppId>>,
}

impl AdoptionDataset {
    /// `per_user[u]` lists user u's apps; order and repeats do not matter.
    pub fn new(users: UserIndex, n_apps: usize, mut per_user: Vec<Vec<AppId>>) -> Result<Self> {
        if per_user.len() != users.len() {
            return Err(Error::InvalidConfig(format!("{} adoption lists for {} users", per_user.len(), users.len())));
        }
        for apps in &mut per_user {
            apps.sort_unstable();
            apps.dedup();
            if let Some(a) = apps.last().filter(|a| a.index() >= n_apps) {
                return Err(Error::UnknownApp(a.to_string()));
            }
        }
        Ok(AdoptionDataset { users, n_apps, per_user })
    }

    pub fn users(&self) -> &UserIndex {
        &self.users
    }

    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn n_apps(&self) -> usize {
        self.n_apps
    }

    pub fn n_obs(&self) -> usize {
        self.per_user.iter().map(Vec::len).sum()
    }

    /// Sorted apps adopted by `u`.
    pub fn adopted(&self, u: UserId) -> &[AppId] {
        &self.per_user[u.index()]
    }

    pub fn has_adopted(&self, u: UserId, app: AppId) -> bool {
        self.adopted(u).binary_search(&app).is_ok()
    }

    pub fn per_user(&self) -> &[Vec<AppId>] {
        &self.per_user
    }

    /// All pairs, user-major with apps ascending.
    pub fn instances(&self) -> impl Iterator<Item = (UserId, AppId)> + '_ {
        self.per_user.iter().enumerate().flat_map(|(u, apps)| apps.iter().map(move |&a| (UserId::from(u), a)))
    }

    /// Number of adopters per app.
    pub fn app_counts(&self) -> Vec<u64> {
        let mut counts = vec![0u64; self.n_apps];
        for (_, a) in self.instances() {
            counts[a.index()] += 1;
        }
        counts
    }

    pub fn stats(&self) -> DatasetStats {
        DatasetStats::from_counts(self.n_users(), self.n_apps, self.n_obs())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub n_users: usize,
    pub n_apps: usize,
    pub n_obs: usize,
    /// 1 − n_obs / (n_users · n_apps).
    pub sparsity: f64,
    pub mean_adoptions: f64,
}

impl DatasetStats {
    pub fn from_counts(n_users: usize, n_apps: usize, n_obs: usize) -> Self {
        let cells = n_users as f64 * n_apps as f64;
        DatasetStats {
            n_users,
            n_apps,
            n_obs,
            sparsity: if cells > 0.0 { 1.0 - n_obs as f64 / cells } else { 0.0 },
            mean_adoptions: if n_users > 0 { n_obs as f64 / n_users as f64 } else { 0.0 },
        }
    }
}

impl fmt::Display for DatasetStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "#users\t#apps\t#observations\tsparsity\tmean_adoptions")?;
        write!(
            f,
            "{}\t{}\t{}\t{:.2}%\t{:.2}",
            self.n_users,
            self.n_apps,
            self.n_obs,
            self.sparsity * 100.0,
            self.mean_adoptions
        )
    }
}

/// Filtering rules applied while loading adoption records.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoadOptions {
    /// Records rated below this are not adoptions.
    pub rating_threshold: f64,
    /// Users with fewer adoptions are dropped entirely.
    pub min_adoptions: usize,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions { rating_threshold: 3.0, min_adoptions: 40 }
    }
}

/// Reads `user<TAB>app[<TAB>rating]` lines. Users are numbered in order of
/// first appearance among those that survive filtering.
pub fn parse_adoptions<R: BufRead>(reader: R, tree: &CategoryTree, opts: LoadOptions) -> Result<AdoptionDataset> {
    let mut raw_users = UserIndex::new();
    let mut raw: Vec<Vec<AppId>> = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = n + 1;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if !(2..=3).contains(&fields.len()) || fields[0].is_empty() {
            return Err(Error::Parse { line: lineno, msg: "expected `user<TAB>app[<TAB>rating]`".into() });
        }
        let app = tree
            .app_by_key(fields[1])
            .map_err(|_| Error::UnknownAppInRecord { line: lineno, app: fields[1].to_string() })?;
        let adopted = match fields.get(2) {
            None => true,
            Some(r) => {
                let rating: f64 =
                    r.trim().parse().map_err(|_| Error::Parse { line: lineno, msg: format!("bad rating `{r}`") })?;
                rating >= opts.rating_threshold
            }
        };
        if !adopted {
            continue;
        }
        let u = raw_users.intern(fields[0].to_string());
        if u.index() == raw.len() {
            raw.push(Vec::new());
        }
        raw[u.index()].push(app);
    }

    let mut users = UserIndex::new();
    let mut per_user = Vec::new();
    for (key, mut apps) in raw_users.keys().iter().zip(raw) {
        apps.sort_unstable();
        apps.dedup();
        if apps.len() >= opts.min_adoptions {
            users.intern(key.clone());
            per_user.push(apps);
        }
    }
    if users.is_empty() {
        return Err(Error::EmptyAfterFiltering);
    }
    AdoptionDataset::new(users, tree.num_apps(), per_user)
}

pub fn load_adoptions(path: impl AsRef<Path>, tree: &CategoryTree, opts: LoadOptions) -> Result<AdoptionDataset> {
    parse_adoptions(BufReader::new(File::open(path)?), tree, opts)
}

/// Writes one `user<TAB>app` line per adoption.
pub fn write_adoptions<W: Write>(data: &AdoptionDataset, tree: &CategoryTree, mut out: W) -> Result<()> {
    for (u, a) in data.instances() {
        writeln!(out, "{}\t{}", data.users().key(u), tree.app_key(a))?;
    }
    Ok(())
}

/// Re-keys `data` onto the user numbering of `users`, failing on strangers.
pub fn align_users(data: &AdoptionDataset, users: &UserIndex) -> Result<AdoptionDataset> {
    let mut per_user = vec![Vec::new(); users.len()];
    let mut lookup = HashMap::with_capacity(data.n_users());
    for (i, key) in data.users().keys().iter().enumerate() {
        lookup.insert(i, users.get(key)?);
    }
    for (u, a) in data.instances() {
        per_user[lookup[&u.index()].index()].push(a);
    }
    AdoptionDataset::new(users.clone(), data.n_apps(), per_user)
}
