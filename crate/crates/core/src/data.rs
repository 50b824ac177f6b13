//! Interaction datasets: loading, splitting, negative sampling and
//! synthetic noise injection.
//!
//! Users and items are dense 0-based indices. A [`Dataset`] always carries
//! the full universe size (`num_users`, `num_items`) so that splits of the
//! same source share one index space.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Slack added before flooring a fractional count so that products such as
/// `0.29 * 100` land on the intended integer.
const FLOOR_SLACK: f64 = 1e-9;

/// Rejection attempts in [`sample_negative`] before falling back to an
/// explicit scan of the complement.
pub const NEGATIVE_REJECTION_ATTEMPTS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Interaction {
    pub user: usize,
    pub item: usize,
}

impl Interaction {
    pub fn new(user: usize, item: usize) -> Self {
        Self { user, item }
    }
}

/// Implicit-feedback interaction set over a fixed user/item universe.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    num_users: usize,
    num_items: usize,
    user_pos: Vec<Vec<usize>>,
    count: usize,
}

impl Dataset {
    /// Builds a dataset, collapsing duplicate pairs.
    pub fn new(
        num_users: usize,
        num_items: usize,
        pairs: impl IntoIterator<Item = Interaction>,
    ) -> Result<Self> {
        let mut user_pos = vec![Vec::new(); num_users];
        for Interaction { user, item } in pairs {
            if user >= num_users || item >= num_items {
                return Err(Error::Config(format!(
                    "interaction ({user}, {item}) outside universe {num_users}x{num_items}"
                )));
            }
            user_pos[user].push(item);
        }
        let mut count = 0;
        for items in &mut user_pos {
            items.sort_unstable();
            items.dedup();
            count += items.len();
        }
        Ok(Self {
            num_users,
            num_items,
            user_pos,
            count,
        })
    }

    /// An interaction-free dataset over the given universe.
    pub fn empty(num_users: usize, num_items: usize) -> Self {
        Self {
            num_users,
            num_items,
            user_pos: vec![Vec::new(); num_users],
            count: 0,
        }
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    /// Sorted positive items of `user`.
    pub fn user_items(&self, user: usize) -> &[usize] {
        &self.user_pos[user]
    }

    pub fn contains(&self, user: usize, item: usize) -> bool {
        user < self.num_users && self.user_pos[user].binary_search(&item).is_ok()
    }

    /// Interactions in canonical `(user, item)` order.
    pub fn interactions(&self) -> impl Iterator<Item = Interaction> + '_ {
        self.user_pos
            .iter()
            .enumerate()
            .flat_map(|(u, items)| items.iter().map(move |&i| Interaction::new(u, i)))
    }

    pub fn to_vec(&self) -> Vec<Interaction> {
        self.interactions().collect()
    }

    /// Per-item user lists (sorted), i.e. the transpose of `user_items`.
    pub fn item_users(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_items];
        for Interaction { user, item } in self.interactions() {
            out[item].push(user);
        }
        out
    }

    /// Union with another dataset over the same universe.
    pub fn union(&self, other: &Dataset) -> Result<Dataset> {
        if self.num_users != other.num_users || self.num_items != other.num_items {
            return Err(Error::Shape(format!(
                "cannot union {}x{} with {}x{}",
                self.num_users, self.num_items, other.num_users, other.num_items
            )));
        }
        Dataset::new(
            self.num_users,
            self.num_items,
            self.interactions().chain(other.interactions()),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InteractionFormat {
    /// `user item`
    TsvUi,
    /// `user item rating timestamp`; rating and timestamp are ignored.
    TsvUirt,
}

impl FromStr for InteractionFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tsv-ui" => Ok(Self::TsvUi),
            "tsv-uirt" => Ok(Self::TsvUirt),
            other => Err(Error::Config(format!("unknown interaction format '{other}'"))),
        }
    }
}

impl fmt::Display for InteractionFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::TsvUi => "tsv-ui",
            Self::TsvUirt => "tsv-uirt",
        })
    }
}

/// Reads a whitespace-separated interaction file.
///
/// Raw ids are remapped to dense indices in order of first appearance.
/// Every observed row counts as a positive regardless of its rating.
pub fn load_interactions(path: impl AsRef<Path>, format: InteractionFormat) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_interactions(&text, format)
}

pub fn parse_interactions(text: &str, format: InteractionFormat) -> Result<Dataset> {
    let mut users: HashMap<&str, usize> = HashMap::new();
    let mut items: HashMap<&str, usize> = HashMap::new();
    let mut pairs = Vec::new();

    for (lineno, line) in text.lines().enumerate() {
        let line_number = lineno + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let expected = match format {
            InteractionFormat::TsvUi => 2,
            InteractionFormat::TsvUirt => 4,
        };
        if fields.len() != expected {
            return Err(Error::Parse {
                line: line_number,
                message: format!("expected {expected} fields for {format}, found {}", fields.len()),
            });
        }
        if format == InteractionFormat::TsvUirt {
            for (name, value) in [("rating", fields[2]), ("timestamp", fields[3])] {
                if value.parse::<f64>().is_err() {
                    return Err(Error::Parse {
                        line: line_number,
                        message: format!("{name} '{value}' is not numeric"),
                    });
                }
            }
        }
        let next_user = users.len();
        let user = *users.entry(fields[0]).or_insert(next_user);
        let next_item = items.len();
        let item = *items.entry(fields[1]).or_insert(next_item);
        pairs.push(Interaction::new(user, item));
    }

    if pairs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Dataset::new(users.len(), items.len(), pairs)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetStats {
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    pub sparsity: f64,
}

impl DatasetStats {
    pub const CSV_HEADER: &'static str = "m,n,count,sparsity";

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{:.5}",
            self.users, self.items, self.interactions, self.sparsity
        )
    }
}

pub fn stats(d: &Dataset) -> DatasetStats {
    let cells = (d.num_users() as f64) * (d.num_items() as f64);
    let sparsity = if cells > 0.0 {
        1.0 - d.len() as f64 / cells
    } else {
        1.0
    };
    DatasetStats {
        users: d.num_users(),
        items: d.num_items(),
        interactions: d.len(),
        sparsity,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub ratios: [f64; 3],
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(train: f64, valid: f64, test: f64, seed: u64) -> Self {
        Self {
            ratios: [train, valid, test],
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ratios.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return Err(Error::Config(format!(
                "split ratios must be non-negative, got {:?}",
                self.ratios
            )));
        }
        let total: f64 = self.ratios.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!(
                "split ratios must sum to 1, got {total}"
            )));
        }
        Ok(())
    }
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self::new(0.8, 0.1, 0.1, 42)
    }
}

fn floor_count(x: f64) -> usize {
    (x + FLOOR_SLACK).floor().max(0.0) as usize
}

/// Sizes `(train, valid, test)` for `total` interactions: valid and test
/// are floored, the remainder goes to train.
pub fn split_sizes(total: usize, spec: &SplitSpec) -> (usize, usize, usize) {
    let valid = floor_count(total as f64 * spec.ratios[1]).min(total);
    let test = floor_count(total as f64 * spec.ratios[2]).min(total - valid);
    (total - valid - test, valid, test)
}

/// Random global split into train/valid/test.
///
/// After the shuffle, any user left without a training interaction swaps
/// one held-out interaction with a training interaction of a user that can
/// spare one, so sizes are preserved exactly.
pub fn split(d: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset, Dataset)> {
    spec.validate()?;
    if d.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut all = d.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    all.shuffle(&mut rng);

    let (n_train, n_valid, _) = split_sizes(all.len(), spec);
    // Layout: [train | valid | test]
    let mut train_count = vec![0usize; d.num_users()];
    for x in &all[..n_train] {
        train_count[x.user] += 1;
    }
    for pos in n_train..all.len() {
        let user = all[pos].user;
        if train_count[user] > 0 {
            continue;
        }
        // Donor: the last training interaction whose user keeps one after the swap.
        let donor = (0..n_train).rev().find(|&j| train_count[all[j].user] >= 2);
        if let Some(j) = donor {
            train_count[all[j].user] -= 1;
            train_count[user] += 1;
            all.swap(pos, j);
        }
    }

    let (m, n) = (d.num_users(), d.num_items());
    let train = Dataset::new(m, n, all[..n_train].iter().copied())?;
    let valid = Dataset::new(m, n, all[n_train..n_train + n_valid].iter().copied())?;
    let test = Dataset::new(m, n, all[n_train + n_valid..].iter().copied())?;
    Ok((train, valid, test))
}

/// Draws an item uniformly from the items `user` has not interacted with.
pub fn sample_negative<R: Rng + ?Sized>(train: &Dataset, user: usize, rng: &mut R) -> Result<usize> {
    let n = train.num_items();
    let positives = train.user_items(user);
    let free = n - positives.len();
    if free == 0 {
        return Err(Error::NoNegative { user });
    }
    for _ in 0..NEGATIVE_REJECTION_ATTEMPTS {
        let item = rng.random_range(0..n);
        if positives.binary_search(&item).is_err() {
            return Ok(item);
        }
    }
    // Uniform pick of the `target`-th free item, walking the sorted positives.
    let mut target = rng.random_range(0..free);
    let mut cursor = 0usize;
    for &p in positives.iter().chain(std::iter::once(&n)) {
        let gap = p - cursor;
        if target < gap {
            return Ok(cursor + target);
        }
        target -= gap;
        cursor = p + 1;
    }
    unreachable!("free count matches the complement size")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    pub delta: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn new(delta: f64, seed: u64) -> Self {
        Self { delta, seed }
    }
}

/// Number of pairs to add so the injected share of the result is `delta`.
pub fn noise_count(train_len: usize, delta: f64) -> Result<usize> {
    if !(0.0..1.0).contains(&delta) {
        return Err(Error::Config(format!(
            "noise ratio must lie in [0, 1), got {delta}"
        )));
    }
    Ok(floor_count(delta * train_len as f64 / (1.0 - delta)))
}

/// Samples the pairs [`inject_noise`] would add, in draw order.
///
/// Pairs are uniform without replacement over unobserved `(user, item)`
/// cells.
pub fn sample_noise_pairs(train: &Dataset, spec: &NoiseSpec) -> Result<Vec<Interaction>> {
    let wanted = noise_count(train.len(), spec.delta)?;
    sample_unobserved(train, wanted, spec.seed)
}

fn sample_unobserved(blocked: &Dataset, wanted: usize, seed: u64) -> Result<Vec<Interaction>> {
    if wanted == 0 {
        return Ok(Vec::new());
    }
    let (m, n) = (blocked.num_users(), blocked.num_items());
    let available = m * n - blocked.len();
    if wanted > available {
        return Err(Error::Capacity {
            requested: wanted,
            available,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    if wanted * 2 <= available {
        let mut chosen = HashSet::with_capacity(wanted);
        let mut out = Vec::with_capacity(wanted);
        while out.len() < wanted {
            let pair = Interaction::new(rng.random_range(0..m), rng.random_range(0..n));
            if !blocked.contains(pair.user, pair.item) && chosen.insert(pair) {
                out.push(pair);
            }
        }
        Ok(out)
    } else {
        let mut free: Vec<Interaction> = (0..m)
            .flat_map(|u| (0..n).map(move |i| Interaction::new(u, i)))
            .filter(|p| !blocked.contains(p.user, p.item))
            .collect();
        let (picked, _) = free.partial_shuffle(&mut rng, wanted);
        Ok(picked.to_vec())
    }
}

/// Returns `train` plus uniformly drawn unobserved pairs making up a
/// `delta` share of the result.
pub fn inject_noise(train: &Dataset, spec: &NoiseSpec) -> Result<Dataset> {
    let extra = sample_noise_pairs(train, spec)?;
    Dataset::new(
        train.num_users(),
        train.num_items(),
        train.interactions().chain(extra),
    )
}

/// [`inject_noise`] that also keeps noise off the pairs in `avoid`, such as
/// held-out positives. The noise count still follows `train.len()`.
pub fn inject_noise_avoiding(train: &Dataset, avoid: &Dataset, spec: &NoiseSpec) -> Result<Dataset> {
    let wanted = noise_count(train.len(), spec.delta)?;
    let blocked = train.union(avoid)?;
    let extra = sample_unobserved(&blocked, wanted, spec.seed)?;
    Dataset::new(
        train.num_users(),
        train.num_items(),
        train.interactions().chain(extra),
    )
}
