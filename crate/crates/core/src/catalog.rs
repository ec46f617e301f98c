//! Item/category/interaction data model, file ingestion, synthetic corpus
//! generation, and leave-one-out splitting.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ItemId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CategoryId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UserId(pub u32);

impl ItemId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl CategoryId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl UserId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("interaction references item {0:?} with no metadata")]
    MissingItem(String),
    #[error("unknown item id {0}")]
    UnknownItem(u32),
    #[error("catalog is empty")]
    Empty,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Item {
    pub id: ItemId,
    pub title: String,
    /// Non-empty; sorted ascending so membership and "lowest id" rules are
    /// deterministic.
    pub categories: Vec<CategoryId>,
}

impl Item {
    pub fn in_category(&self, c: CategoryId) -> bool {
        self.categories.binary_search(&c).is_ok()
    }

    /// Lowest category id; used when a single control category must be
    /// chosen from a multi-category item.
    pub fn primary_category(&self) -> CategoryId {
        self.categories[0]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Catalog {
    pub items: Vec<Item>,
    /// Category id -> display name. Index equals `CategoryId`.
    pub categories: Vec<String>,
    /// User sequences in interaction order. Index equals `UserId`.
    pub users: Vec<Vec<ItemId>>,
    /// External user ids preserved for reporting; parallel to `users`.
    pub user_names: Vec<String>,
}

impl Catalog {
    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    pub fn n_categories(&self) -> usize {
        self.categories.len()
    }

    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn item(&self, id: ItemId) -> Result<&Item, CatalogError> {
        self.items.get(id.index()).ok_or(CatalogError::UnknownItem(id.0))
    }

    /// The item's category set; all `item ∈ C_target` tests go through here.
    pub fn categories_of(&self, id: ItemId) -> Result<&[CategoryId], CatalogError> {
        Ok(&self.item(id)?.categories)
    }

    pub fn item_in_category(&self, id: ItemId, c: CategoryId) -> bool {
        self.items
            .get(id.index())
            .map(|it| it.in_category(c))
            .unwrap_or(false)
    }

    pub fn category_name(&self, c: CategoryId) -> &str {
        &self.categories[c.index()]
    }

    /// Items carrying category `c`, ascending by id.
    pub fn items_in_category(&self, c: CategoryId) -> Vec<ItemId> {
        self.items
            .iter()
            .filter(|it| it.in_category(c))
            .map(|it| it.id)
            .collect()
    }

    /// Category with the most items, skipping any in `exclude` (ties -> lowest id).
    pub fn most_popular_category_excluding(&self, exclude: &[CategoryId]) -> Option<CategoryId> {
        let mut counts = vec![0usize; self.n_categories()];
        for it in &self.items {
            for c in &it.categories {
                counts[c.index()] += 1;
            }
        }
        counts
            .iter()
            .enumerate()
            .filter(|(c, _)| !exclude.contains(&CategoryId(*c as u32)))
            .max_by(|(ca, na), (cb, nb)| na.cmp(nb).then(cb.cmp(ca)))
            .filter(|(_, n)| **n > 0)
            .map(|(c, _)| CategoryId(c as u32))
    }

    /// Resolve a title to an item id. Titles are not required to be unique;
    /// collisions resolve to the lowest id.
    pub fn item_by_title(&self, title: &str) -> Option<ItemId> {
        self.items.iter().find(|it| it.title == title).map(|it| it.id)
    }

    pub fn save_json(&self, path: &Path) -> Result<(), CatalogError> {
        let mut f = std::fs::File::create(path)?;
        serde_json::to_writer(&mut f, self).map_err(std::io::Error::other)?;
        f.write_all(b"\n")?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self, CatalogError> {
        let f = std::fs::File::open(path)?;
        serde_json::from_reader(BufReader::new(f)).map_err(|e| CatalogError::Parse {
            line: 0,
            msg: e.to_string(),
        })
    }
}

/// Interactions file layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InteractionsFormat {
    /// `user_id <TAB> item_id <TAB> timestamp`, one record per line.
    Tabular,
    /// One JSON object per line with fields `user_id`, `item_id`, `timestamp`.
    JsonLines,
}

#[derive(Debug, Deserialize)]
struct MetaRecord {
    id: String,
    title: String,
    categories: Vec<String>,
}

#[derive(Debug, Deserialize)]
struct JsonInteraction {
    user_id: String,
    item_id: String,
    timestamp: i64,
}

/// Load a catalog from an item-metadata file (json-lines: `id`, `title`,
/// `categories`) plus an interactions file.
///
/// Internal item ids follow metadata file order; category ids follow first
/// appearance in the metadata; user ids follow first appearance in the
/// interactions. Records are sorted per user by timestamp (stable, so equal
/// timestamps keep file order).
pub fn load_interactions(
    interactions_path: &Path,
    metadata_path: &Path,
    format: InteractionsFormat,
) -> Result<Catalog, CatalogError> {
    let meta_file = std::fs::File::open(metadata_path)?;
    let mut items = Vec::new();
    let mut categories: Vec<String> = Vec::new();
    let mut cat_index: HashMap<String, CategoryId> = HashMap::new();
    let mut item_index: HashMap<String, ItemId> = HashMap::new();

    for (lineno, line) in BufReader::new(meta_file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: MetaRecord = serde_json::from_str(&line).map_err(|e| CatalogError::Parse {
            line: lineno + 1,
            msg: format!("bad item metadata: {e}"),
        })?;
        if rec.title.is_empty() || rec.categories.is_empty() {
            return Err(CatalogError::Parse {
                line: lineno + 1,
                msg: "item needs a non-empty title and at least one category".into(),
            });
        }
        let id = ItemId(items.len() as u32);
        if item_index.insert(rec.id.clone(), id).is_some() {
            return Err(CatalogError::Parse {
                line: lineno + 1,
                msg: format!("duplicate item id {}", rec.id),
            });
        }
        let mut cats: Vec<CategoryId> = rec
            .categories
            .iter()
            .map(|name| {
                *cat_index.entry(name.clone()).or_insert_with(|| {
                    categories.push(name.clone());
                    CategoryId((categories.len() - 1) as u32)
                })
            })
            .collect();
        cats.sort_unstable();
        cats.dedup();
        items.push(Item { id, title: rec.title, categories: cats });
    }

    let inter_file = std::fs::File::open(interactions_path)?;
    let mut events: Vec<(UserId, i64, usize, ItemId)> = Vec::new();
    let mut user_index: HashMap<String, UserId> = HashMap::new();
    let mut user_names: Vec<String> = Vec::new();

    for (lineno, line) in BufReader::new(inter_file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (user_raw, item_raw, ts) = match format {
            InteractionsFormat::Tabular => {
                let mut parts = line.split('\t');
                let u = parts.next().unwrap_or("");
                let i = parts.next().ok_or(CatalogError::Parse {
                    line: lineno + 1,
                    msg: "expected user<TAB>item<TAB>timestamp".into(),
                })?;
                let t = parts
                    .next()
                    .ok_or(CatalogError::Parse {
                        line: lineno + 1,
                        msg: "missing timestamp field".into(),
                    })?
                    .trim()
                    .parse::<i64>()
                    .map_err(|e| CatalogError::Parse {
                        line: lineno + 1,
                        msg: format!("bad timestamp: {e}"),
                    })?;
                (u.to_string(), i.to_string(), t)
            }
            InteractionsFormat::JsonLines => {
                let rec: JsonInteraction =
                    serde_json::from_str(&line).map_err(|e| CatalogError::Parse {
                        line: lineno + 1,
                        msg: format!("bad interaction record: {e}"),
                    })?;
                (rec.user_id, rec.item_id, rec.timestamp)
            }
        };
        let item = *item_index
            .get(&item_raw)
            .ok_or_else(|| CatalogError::MissingItem(item_raw.clone()))?;
        let user = *user_index.entry(user_raw.clone()).or_insert_with(|| {
            user_names.push(user_raw.clone());
            UserId((user_names.len() - 1) as u32)
        });
        events.push((user, ts, lineno, item));
    }

    if items.is_empty() {
        return Err(CatalogError::Empty);
    }

    let mut users: Vec<Vec<(i64, usize, ItemId)>> = vec![Vec::new(); user_names.len()];
    for (u, ts, ord, it) in events {
        users[u.index()].push((ts, ord, it));
    }
    let users = users
        .into_iter()
        .map(|mut seq| {
            seq.sort_by_key(|(ts, ord, _)| (*ts, *ord));
            seq.into_iter().map(|(_, _, it)| it).collect()
        })
        .collect();

    Ok(Catalog { items, categories, users, user_names })
}

/// One user's leave-one-out assignment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserSplit {
    pub user: UserId,
    /// Items 1..n-2 in interaction order.
    pub train: Vec<ItemId>,
    pub valid: ItemId,
    pub test: ItemId,
}

/// Leave-one-out split with truncated history windows.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitDataset {
    pub users: Vec<UserSplit>,
    pub max_history: usize,
    /// Users dropped for having fewer than 3 interactions.
    pub skipped: usize,
}

impl SplitDataset {
    /// History window for predicting the validation item: the most recent
    /// `max_history` items of the train prefix.
    pub fn valid_history<'u>(&self, u: &'u UserSplit) -> &'u [ItemId] {
        tail(&u.train, self.max_history)
    }

    /// History window for predicting the test item: train prefix plus the
    /// validation item, truncated.
    pub fn test_history(&self, u: &UserSplit) -> Vec<ItemId> {
        let mut seq = u.train.clone();
        seq.push(u.valid);
        tail(&seq, self.max_history).to_vec()
    }

    /// `(window, next)` pairs inside the train prefix, for teacher training.
    pub fn train_pairs(&self, u: &UserSplit) -> Vec<(Vec<ItemId>, ItemId)> {
        let mut out = Vec::new();
        for t in 1..u.train.len() {
            let lo = t.saturating_sub(self.max_history);
            out.push((u.train[lo..t].to_vec(), u.train[t]));
        }
        out
    }
}

fn tail(seq: &[ItemId], n: usize) -> &[ItemId] {
    &seq[seq.len().saturating_sub(n)..]
}

/// Last item is the test label, second-to-last the validation label, the rest
/// the train prefix. Users with fewer than 3 interactions are skipped.
pub fn leave_one_out_split(catalog: &Catalog, max_history: usize) -> SplitDataset {
    let mut users = Vec::new();
    let mut skipped = 0;
    for (uid, seq) in catalog.users.iter().enumerate() {
        if seq.len() < 3 {
            skipped += 1;
            continue;
        }
        let n = seq.len();
        users.push(UserSplit {
            user: UserId(uid as u32),
            train: seq[..n - 2].to_vec(),
            valid: seq[n - 2],
            test: seq[n - 1],
        });
    }
    SplitDataset { users, max_history, skipped }
}

/// Specification for the synthetic corpus.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_items: usize,
    pub n_categories: usize,
    pub n_users: usize,
    pub seed: u64,
    /// Sequence length bounds, inclusive.
    pub min_seq: usize,
    pub max_seq: usize,
}

impl SynthSpec {
    pub fn new(n_items: usize, n_categories: usize, n_users: usize, seed: u64) -> Self {
        SynthSpec { n_items, n_categories, n_users, seed, min_seq: 12, max_seq: 28 }
    }
}

/// Deterministic synthetic catalog with real sequential structure.
///
/// Each user mixes a personal category preference with a global first-order
/// category transition kernel, and items within a category are drawn by a
/// zipf-like popularity, so a sequence-aware ranker has signal that a pure
/// popularity ranker cannot capture.
pub fn synth_catalog(spec: &SynthSpec) -> Result<Catalog, CatalogError> {
    if spec.n_items == 0 || spec.n_categories == 0 || spec.n_users == 0 {
        return Err(CatalogError::InvalidArgument("counts must be positive".into()));
    }
    if spec.n_items < spec.n_categories || spec.n_categories < 2 {
        return Err(CatalogError::InvalidArgument(
            "need n_items >= n_categories >= 2".into(),
        ));
    }
    if spec.min_seq < 3 || spec.min_seq > spec.max_seq {
        return Err(CatalogError::InvalidArgument("bad sequence length bounds".into()));
    }

    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    let n_c = spec.n_categories;

    let categories: Vec<String> = (0..n_c).map(|c| format!("Genre-{c:02}")).collect();

    // Primary category round-robin guarantees every category owns >= 1 item.
    let mut items = Vec::with_capacity(spec.n_items);
    for i in 0..spec.n_items {
        let primary = CategoryId((i % n_c) as u32);
        let mut cats = BTreeSet::new();
        cats.insert(primary);
        let extra = rng.gen_range(0..3);
        for _ in 0..extra {
            cats.insert(CategoryId(rng.gen_range(0..n_c) as u32));
        }
        items.push(Item {
            id: ItemId(i as u32),
            title: format!("Item {i:04}"),
            categories: cats.into_iter().collect(),
        });
    }

    // Popularity weights per item inside each category (zipf-ish by id order).
    let per_category: Vec<Vec<ItemId>> = (0..n_c)
        .map(|c| {
            items
                .iter()
                .filter(|it| it.in_category(CategoryId(c as u32)))
                .map(|it| it.id)
                .collect()
        })
        .collect();
    let pop_weight = |rank: usize| 1.0 / (rank as f64 + 1.5);

    // Each category has a preferred successor so last-item category is
    // predictive of the next item.
    let succ: Vec<usize> = (0..n_c).map(|c| (c + 1 + (c % 3)) % n_c).collect();

    let mut users = Vec::with_capacity(spec.n_users);
    let mut user_names = Vec::with_capacity(spec.n_users);
    for u in 0..spec.n_users {
        let mut urng = ChaCha20Rng::seed_from_u64(
            spec.seed ^ 0x9e37_79b9_7f4a_7c15u64.wrapping_mul(u as u64 + 1),
        );
        let fav_a = urng.gen_range(0..n_c);
        let mut fav_b = urng.gen_range(0..n_c);
        if fav_b == fav_a {
            fav_b = (fav_b + 1) % n_c;
        }
        let len = urng.gen_range(spec.min_seq..=spec.max_seq);
        let mut seq: Vec<ItemId> = Vec::with_capacity(len);
        let mut last_cat = fav_a;
        for t in 0..len {
            let cat = if t == 0 {
                fav_a
            } else {
                let r: f64 = urng.gen();
                if r < 0.62 {
                    succ[last_cat]
                } else if r < 0.85 {
                    fav_a
                } else {
                    fav_b
                }
            };
            let pool = &per_category[cat];
            let total: f64 = (0..pool.len()).map(pop_weight).sum();
            let mut pickv = urng.gen_range(0.0..total);
            let mut chosen = pool[pool.len() - 1];
            for (rank, &it) in pool.iter().enumerate() {
                pickv -= pop_weight(rank);
                if pickv <= 0.0 {
                    chosen = it;
                    break;
                }
            }
            seq.push(chosen);
            last_cat = items[chosen.index()].primary_category().index();
        }
        users.push(seq);
        user_names.push(format!("user-{u:05}"));
    }

    Ok(Catalog { items, categories, users, user_names })
}

/// Backwards-count popularity of each item inside a split's train prefixes.
pub fn train_popularity(catalog: &Catalog, split: &SplitDataset) -> Vec<u64> {
    let mut counts = vec![0u64; catalog.n_items()];
    for u in &split.users {
        for it in &u.train {
            counts[it.index()] += 1;
        }
    }
    counts
}

/// Category histogram over a list of items (each item contributes one count
/// per category it carries).
pub fn category_histogram(catalog: &Catalog, items: &[ItemId]) -> BTreeMap<CategoryId, usize> {
    let mut hist = BTreeMap::new();
    for &it in items {
        if let Ok(cats) = catalog.categories_of(it) {
            for &c in cats {
                *hist.entry(c).or_insert(0) += 1;
            }
        }
    }
    hist
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write as _;

    fn write_file(dir: &Path, name: &str, contents: &str) -> std::path::PathBuf {
        let path = dir.join(name);
        let mut f = std::fs::File::create(&path).unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        path
    }

    #[test]
    fn load_orders_by_timestamp() {
        let dir = tempfile::tempdir().unwrap();
        let meta = write_file(
            dir.path(),
            "items.jsonl",
            r#"{"id":"a","title":"Alpha","categories":["X"]}
{"id":"b","title":"Beta","categories":["X","Y"]}
{"id":"c","title":"Gamma","categories":["Y"]}
"#,
        );
        let inter = write_file(
            dir.path(),
            "inter.tsv",
            "u1\tb\t20\nu1\ta\t10\nu1\tc\t30\n",
        );
        let cat = load_interactions(&inter, &meta, InteractionsFormat::Tabular).unwrap();
        assert_eq!(cat.n_users(), 1);
        assert_eq!(cat.users[0], vec![ItemId(0), ItemId(1), ItemId(2)]);
        assert_eq!(cat.categories, vec!["X", "Y"]);
    }

    #[test]
    fn empty_interactions_is_fine_if_items_exist() {
        let dir = tempfile::tempdir().unwrap();
        let meta = write_file(
            dir.path(),
            "items.jsonl",
            r#"{"id":"a","title":"Alpha","categories":["X"]}
"#,
        );
        let inter = write_file(dir.path(), "inter.tsv", "");
        let cat = load_interactions(&inter, &meta, InteractionsFormat::Tabular).unwrap();
        assert_eq!(cat.n_users(), 0);
        assert_eq!(cat.n_items(), 1);
    }

    #[test]
    fn empty_everything_errors() {
        let dir = tempfile::tempdir().unwrap();
        let meta = write_file(dir.path(), "items.jsonl", "");
        let inter = write_file(dir.path(), "inter.tsv", "");
        let err = load_interactions(&inter, &meta, InteractionsFormat::Tabular).unwrap_err();
        assert!(matches!(err, CatalogError::Empty));
    }

    #[test]
    fn missing_item_metadata_names_the_id() {
        let dir = tempfile::tempdir().unwrap();
        let meta = write_file(
            dir.path(),
            "items.jsonl",
            r#"{"id":"a","title":"Alpha","categories":["X"]}
"#,
        );
        let inter = write_file(dir.path(), "inter.tsv", "u1\tzz\t10\n");
        let err = load_interactions(&inter, &meta, InteractionsFormat::Tabular).unwrap_err();
        match err {
            CatalogError::MissingItem(id) => assert_eq!(id, "zz"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn parse_error_carries_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let meta = write_file(
            dir.path(),
            "items.jsonl",
            r#"{"id":"a","title":"Alpha","categories":["X"]}
"#,
        );
        let inter = write_file(dir.path(), "inter.tsv", "u1\ta\t10\nu1\ta\n");
        let err = load_interactions(&inter, &meta, InteractionsFormat::Tabular).unwrap_err();
        match err {
            CatalogError::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn split_follows_definition() {
        let catalog = Catalog {
            items: (0..5)
                .map(|i| Item {
                    id: ItemId(i),
                    title: format!("t{i}"),
                    categories: vec![CategoryId(0)],
                })
                .collect(),
            categories: vec!["X".into()],
            users: vec![vec![ItemId(0), ItemId(1), ItemId(2), ItemId(3), ItemId(4)]],
            user_names: vec!["u".into()],
        };
        let split = leave_one_out_split(&catalog, 10);
        let u = &split.users[0];
        assert_eq!(u.train, vec![ItemId(0), ItemId(1), ItemId(2)]);
        assert_eq!(u.valid, ItemId(3));
        assert_eq!(u.test, ItemId(4));
    }

    #[test]
    fn short_sequences_are_skipped() {
        let catalog = Catalog {
            items: (0..3)
                .map(|i| Item {
                    id: ItemId(i),
                    title: format!("t{i}"),
                    categories: vec![CategoryId(0)],
                })
                .collect(),
            categories: vec!["X".into()],
            users: vec![vec![ItemId(0), ItemId(1)]],
            user_names: vec!["u".into()],
        };
        let split = leave_one_out_split(&catalog, 10);
        assert_eq!(split.users.len(), 0);
        assert_eq!(split.skipped, 1);
    }

    #[test]
    fn history_truncates_to_most_recent() {
        let seq: Vec<ItemId> = (0..15).map(ItemId).collect();
        let catalog = Catalog {
            items: (0..15)
                .map(|i| Item {
                    id: ItemId(i),
                    title: format!("t{i}"),
                    categories: vec![CategoryId(0)],
                })
                .collect(),
            categories: vec!["X".into()],
            users: vec![seq],
            user_names: vec!["u".into()],
        };
        let split = leave_one_out_split(&catalog, 10);
        let u = &split.users[0];
        // Test label is item 14; the ten most recent before it are 4..=13.
        let hist = split.test_history(u);
        assert_eq!(hist, (4..14).map(ItemId).collect::<Vec<_>>());
    }

    #[test]
    fn split_reconstructs_sequence() {
        let spec = SynthSpec::new(50, 5, 20, 9);
        let catalog = synth_catalog(&spec).unwrap();
        let split = leave_one_out_split(&catalog, 10);
        for u in &split.users {
            let mut rebuilt = u.train.clone();
            rebuilt.push(u.valid);
            rebuilt.push(u.test);
            assert_eq!(rebuilt, catalog.users[u.user.index()]);
        }
    }

    #[test]
    fn synth_is_deterministic() {
        let spec = SynthSpec::new(120, 8, 30, 1234);
        let a = synth_catalog(&spec).unwrap();
        let b = synth_catalog(&spec).unwrap();
        assert_eq!(a, b);
        let json_a = serde_json::to_vec(&a).unwrap();
        let json_b = serde_json::to_vec(&b).unwrap();
        assert_eq!(json_a, json_b);
    }

    #[test]
    fn synth_covers_every_category() {
        let spec = SynthSpec::new(500, 10, 5, 7);
        let catalog = synth_catalog(&spec).unwrap();
        for c in 0..catalog.n_categories() {
            assert!(
                !catalog.items_in_category(CategoryId(c as u32)).is_empty(),
                "category {c} owns no items"
            );
        }
    }

    #[test]
    fn synth_rejects_bad_counts() {
        assert!(synth_catalog(&SynthSpec::new(0, 2, 1, 0)).is_err());
        assert!(synth_catalog(&SynthSpec::new(5, 10, 1, 0)).is_err());
    }

    #[test]
    fn categories_of_unknown_id_errors() {
        let spec = SynthSpec::new(20, 4, 2, 3);
        let catalog = synth_catalog(&spec).unwrap();
        assert!(catalog.categories_of(ItemId(999)).is_err());
        let cats = catalog.categories_of(ItemId(0)).unwrap();
        assert!(!cats.is_empty());
        for &c in cats {
            assert!(catalog.item_in_category(ItemId(0), c));
        }
    }

    #[test]
    fn catalog_json_roundtrip() {
        let spec = SynthSpec::new(60, 6, 10, 99);
        let catalog = synth_catalog(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("catalog.json");
        catalog.save_json(&path).unwrap();
        let back = Catalog::load_json(&path).unwrap();
        assert_eq!(catalog, back);
    }
}
