//! Interaction logs, the item catalog, leave-one-out splits and the planted
//! cluster generator used for desk-scale experiments.
//!
//! The on-disk format is one line per user: `user_id item1 item2 ...`,
//! whitespace separated, in interaction order.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng;

/// Fewest interactions a user may have: one for training, one validation
/// target and one test target.
pub const MIN_ITEMS_PER_USER: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserHistory {
    pub user_id: String,
    pub items: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InteractionLog {
    pub dataset_name: String,
    pub users: Vec<UserHistory>,
}

impl InteractionLog {
    /// Validates the per-user minimum and user id uniqueness.
    pub fn new(dataset_name: impl Into<String>, users: Vec<UserHistory>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(users.len());
        for user in &users {
            if user.items.len() < MIN_ITEMS_PER_USER {
                return Err(Error::invalid(format!(
                    "user {} has {} items; minimum {}",
                    user.user_id,
                    user.items.len(),
                    MIN_ITEMS_PER_USER
                )));
            }
            if !seen.insert(user.user_id.as_str()) {
                return Err(Error::invalid(format!("duplicate user {}", user.user_id)));
            }
        }
        Ok(InteractionLog {
            dataset_name: dataset_name.into(),
            users,
        })
    }

    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn n_interactions(&self) -> usize {
        self.users.iter().map(|u| u.items.len()).sum()
    }

    /// Canonical text form: single spaces, LF endings, trailing newline.
    pub fn to_canonical_string(&self) -> String {
        let mut out = String::new();
        for user in &self.users {
            out.push_str(&user.user_id);
            for item in &user.items {
                out.push(' ');
                out.push_str(item);
            }
            out.push('\n');
        }
        out
    }
}

pub fn parse_interactions(text: &str, dataset_name: &str, source: &str) -> Result<InteractionLog> {
    let mut users = Vec::new();
    let mut line_of: HashMap<String, usize> = HashMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        let mut fields = line.split_whitespace();
        let Some(user_id) = fields.next() else {
            continue;
        };
        let items: Vec<String> = fields.map(str::to_owned).collect();
        let parse_err = |message: String| Error::Parse {
            path: source.to_owned(),
            line: lineno,
            message,
        };
        if items.len() < MIN_ITEMS_PER_USER {
            return Err(parse_err(format!(
                "user {user_id} has {} items; minimum {MIN_ITEMS_PER_USER}",
                items.len()
            )));
        }
        if let Some(first) = line_of.insert(user_id.to_owned(), lineno) {
            return Err(parse_err(format!(
                "duplicate user {user_id} (first seen on line {first})"
            )));
        }
        users.push(UserHistory {
            user_id: user_id.to_owned(),
            items,
        });
    }
    InteractionLog::new(dataset_name, users)
}

/// Reads an interaction file; the dataset name is the file stem.
pub fn load_interactions(path: &Path) -> Result<InteractionLog> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let name = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::invalid(format!("no usable file stem in {}", path.display())))?;
    parse_interactions(&text, name, &path.display().to_string())
}

pub fn write_interactions(log: &InteractionLog, path: &Path) -> Result<()> {
    std::fs::write(path, log.to_canonical_string())
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Dense item indices assigned in order of first appearance in the log.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ItemCatalog {
    ids: Vec<String>,
    index: HashMap<String, usize>,
}

impl ItemCatalog {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn index_of(&self, item_id: &str) -> Option<usize> {
        self.index.get(item_id).copied()
    }

    pub fn id_of(&self, index: usize) -> Option<&str> {
        self.ids.get(index).map(String::as_str)
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    fn insert(&mut self, item_id: &str) -> usize {
        if let Some(&idx) = self.index.get(item_id) {
            return idx;
        }
        let idx = self.ids.len();
        self.ids.push(item_id.to_owned());
        self.index.insert(item_id.to_owned(), idx);
        idx
    }

    pub fn to_manifest_string(&self) -> String {
        let mut out = String::new();
        for (idx, id) in self.ids.iter().enumerate() {
            let _ = writeln!(out, "{idx}\t{id}");
        }
        out
    }
}

pub fn build_catalog(log: &InteractionLog) -> ItemCatalog {
    let mut catalog = ItemCatalog::default();
    for user in &log.users {
        for item in &user.items {
            catalog.insert(item);
        }
    }
    catalog
}

/// One user's leave-one-out partition, in catalog indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserSplit {
    pub train_items: Vec<usize>,
    pub val_target: usize,
    pub test_target: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EvalTarget {
    Val,
    Test,
}

impl UserSplit {
    /// History the model sees when predicting the validation or test target.
    pub fn eval_history(&self, which: EvalTarget) -> Vec<usize> {
        let mut history = self.train_items.clone();
        if which == EvalTarget::Test {
            history.push(self.val_target);
        }
        history
    }

    pub fn eval_target(&self, which: EvalTarget) -> usize {
        match which {
            EvalTarget::Val => self.val_target,
            EvalTarget::Test => self.test_target,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit {
    pub users: Vec<UserSplit>,
    pub n_items: usize,
}

impl DatasetSplit {
    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn to_manifest_string(&self) -> String {
        let join = |items: &[usize]| {
            items
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(",")
        };
        let mut out = String::new();
        for (u, split) in self.users.iter().enumerate() {
            let _ = writeln!(
                out,
                "{u}\t{}\t{}\t{}",
                join(&split.train_items),
                split.val_target,
                split.test_target
            );
        }
        out
    }
}

/// Last item is the test target, second to last the validation target, the
/// remainder is training history.
pub fn leave_one_out_split(log: &InteractionLog, catalog: &ItemCatalog) -> Result<DatasetSplit> {
    let mut users = Vec::with_capacity(log.users.len());
    for user in &log.users {
        let n = user.items.len();
        if n < MIN_ITEMS_PER_USER {
            return Err(Error::invalid(format!(
                "user {} has {n} items; minimum {MIN_ITEMS_PER_USER}",
                user.user_id
            )));
        }
        let indices = user
            .items
            .iter()
            .map(|id| {
                catalog
                    .index_of(id)
                    .ok_or_else(|| Error::invalid(format!("item {id} missing from catalog")))
            })
            .collect::<Result<Vec<_>>>()?;
        users.push(UserSplit {
            train_items: indices[..n - 2].to_vec(),
            val_target: indices[n - 2],
            test_target: indices[n - 1],
        });
    }
    Ok(DatasetSplit {
        users,
        n_items: catalog.len(),
    })
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub n_clusters: usize,
    pub items_per_user: usize,
    pub noise_rate: f64,
    pub seed: u64,
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_clusters == 0 || self.n_items < self.n_clusters {
            return Err(Error::invalid(format!(
                "need 1 <= n_clusters <= n_items, got {} clusters over {} items",
                self.n_clusters, self.n_items
            )));
        }
        if self.items_per_user < MIN_ITEMS_PER_USER {
            return Err(Error::invalid(format!(
                "items_per_user must be >= {MIN_ITEMS_PER_USER}"
            )));
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return Err(Error::invalid(format!(
                "noise_rate {} outside [0, 1]",
                self.noise_rate
            )));
        }
        Ok(())
    }

    /// Item block `[start, end)` owned by a cluster. Blocks are contiguous and
    /// differ in size by at most one when `n_items` is not a multiple of
    /// `n_clusters`.
    pub fn cluster_block(&self, cluster: usize) -> (usize, usize) {
        let start = cluster * self.n_items / self.n_clusters;
        let end = (cluster + 1) * self.n_items / self.n_clusters;
        (start, end)
    }

    pub fn cluster_of_user(&self, user: usize) -> usize {
        user % self.n_clusters
    }
}

pub fn synthetic_user_id(user: usize) -> String {
    format!("u{user}")
}

pub fn synthetic_item_id(item: usize) -> String {
    format!("i{item}")
}

/// Users are assigned to clusters round-robin. Each interaction is uniform
/// over the user's cluster block with probability `1 - noise_rate`, and
/// uniform over the whole catalog otherwise.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<InteractionLog> {
    use rand::Rng as _;

    cfg.validate()?;
    let mut rng = rng::stream(cfg.seed, 0x5e_0001);
    let users = (0..cfg.n_users)
        .map(|u| {
            let (start, end) = cfg.cluster_block(cfg.cluster_of_user(u));
            let items = (0..cfg.items_per_user)
                .map(|_| {
                    let item = if rng.random::<f64>() < cfg.noise_rate {
                        rng.random_range(0..cfg.n_items)
                    } else {
                        rng.random_range(start..end)
                    };
                    synthetic_item_id(item)
                })
                .collect();
            UserHistory {
                user_id: synthetic_user_id(u),
                items,
            }
        })
        .collect();
    InteractionLog::new("synthetic", users)
}
