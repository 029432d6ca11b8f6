use std::io;

use thiserror::Error;

/// Errors surfaced by every module of the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("cycle detected involving node `{0}`")]
    CycleDetected(String),
    #[error("multiple root nodes: `{0}` and `{1}`")]
    MultipleRoots(String, String),
    #[error("node `{0}` mixes internal and app children")]
    MixedChildKinds(String),
    #[error("node `{node}` references missing parent `{parent}`")]
    OrphanNode { node: String, parent: String },
    #[error("app `{0}` appears more than once")]
    DuplicateApp(String),
    #[error("node id `{0}` appears more than once")]
    DuplicateNode(String),
    #[error("app `{0}` cannot have children")]
    AppHasChildren(String),
    #[error("invalid taxonomy: {0}")]
    InvalidTaxonomy(String),
    #[error("unknown app `{0}`")]
    UnknownApp(String),
    #[error("unknown node {0}")]
    UnknownNode(String),
    #[error("unknown user `{0}`")]
    UnknownUser(String),

    #[error("cannot build a binary tree over an empty app list")]
    EmptyAppList,

    #[error("the root node is not chosen by any decision")]
    RootHasNoChoice,
    #[error("subcategory has no apps")]
    EmptySubcategory,
    #[error("dataset is empty")]
    EmptyDataset,

    #[error("node {0} is not on the choice path or among its competitors")]
    NodeNotInCompetingSet(String),
    #[error("binary-tree step {index} out of range for path of {len} steps")]
    IndexOutOfPath { index: usize, len: usize },
    #[error("training split is empty")]
    EmptyTrainingSet,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("objective became non-finite at epoch {0}")]
    Diverged(usize),

    #[error("user {0} has adopted every app; no negatives available")]
    UserHasAdoptedEverything(String),

    #[error("test set is empty")]
    EmptyTestSet,
    #[error("no user has a non-empty test set")]
    NoEvaluableUsers,

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: app `{app}` is not in the taxonomy")]
    UnknownAppInRecord { line: usize, app: String },
    #[error("no users left after filtering")]
    EmptyAfterFiltering,
    #[error("infeasible synthetic spec: {0}")]
    SpecInfeasible(String),
    #[error("model file version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt model file: {0}")]
    CorruptFile(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// Stable machine-readable name of the variant.
    pub fn code(&self) -> &'static str {
        match self {
            Error::CycleDetected(_) => "CycleDetected",
            Error::MultipleRoots(..) => "MultipleRoots",
            Error::MixedChildKinds(_) => "MixedChildKinds",
            Error::OrphanNode { .. } => "OrphanNode",
            Error::DuplicateApp(_) => "DuplicateApp",
            Error::DuplicateNode(_) => "DuplicateNode",
            Error::AppHasChildren(_) => "AppHasChildren",
            Error::InvalidTaxonomy(_) => "InvalidTaxonomy",
            Error::UnknownApp(_) => "UnknownApp",
            Error::UnknownNode(_) => "UnknownNode",
            Error::UnknownUser(_) => "UnknownUser",
            Error::EmptyAppList => "EmptyAppList",
            Error::RootHasNoChoice => "RootHasNoChoice",
            Error::EmptySubcategory => "EmptySubcategory",
            Error::EmptyDataset => "EmptyDataset",
            Error::NodeNotInCompetingSet(_) => "NodeNotInCompetingSet",
            Error::IndexOutOfPath { .. } => "IndexOutOfPath",
            Error::EmptyTrainingSet => "EmptyTrainingSet",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::Diverged(_) => "Diverged",
            Error::UserHasAdoptedEverything(_) => "UserHasAdoptedEverything",
            Error::EmptyTestSet => "EmptyTestSet",
            Error::NoEvaluableUsers => "NoEvaluableUsers",
            Error::Parse { .. } => "ParseError",
            Error::UnknownAppInRecord { .. } => "UnknownAppInRecord",
            Error::EmptyAfterFiltering => "EmptyAfterFiltering",
            Error::SpecInfeasible(_) => "SpecInfeasible",
            Error::VersionMismatch { .. } => "VersionMismatch",
            Error::CorruptFile(_) => "CorruptFile",
            Error::Io(_) => "Io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
