//! Dense integer handles for taxonomy nodes, apps, users and binary-tree nodes.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

macro_rules! dense_id {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        pub struct $name(pub u32);

        impl $name {
            #[inline]
            pub fn index(self) -> usize {
                self.0 as usize
            }
        }

        impl From<usize> for $name {
            fn from(i: usize) -> Self {
                $name(i as u32)
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}", self.0)
            }
        }
    };
}

dense_id!(
    /// Position of a node in the taxonomy, in load order.
    NodeId
);
dense_id!(
    /// Position of an app among the taxonomy's leaves, in load order.
    AppId
);
dense_id!(UserId);
dense_id!(
    /// Global index of an internal node of the per-subcategory binary trees.
    HsNodeId
);

/// Bidirectional map between external user keys and dense [`UserId`]s.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct UserIndex {
    keys: Vec<String>,
    lookup: HashMap<String, UserId>,
}

impl UserIndex {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_keys<I, S>(keys: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut index = Self::new();
        for key in keys {
            index.intern(key.into());
        }
        index
    }

    /// Returns the id for `key`, assigning the next dense id if it is new.
    pub fn intern(&mut self, key: String) -> UserId {
        if let Some(&id) = self.lookup.get(&key) {
            return id;
        }
        let id = UserId::from(self.keys.len());
        self.lookup.insert(key.clone(), id);
        self.keys.push(key);
        id
    }

    pub fn get(&self, key: &str) -> Result<UserId> {
        self.lookup.get(key).copied().ok_or_else(|| Error::UnknownUser(key.to_string()))
    }

    pub fn key(&self, id: UserId) -> &str {
        &self.keys[id.index()]
    }

    pub fn keys(&self) -> &[String] {
        &self.keys
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }
}
