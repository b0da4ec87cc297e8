use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use super::{Corpus, DataError, Post, Result};

/// Task name of the relabeled cross-market corpus.
pub const CROSS_MARKET: &str = "CROSS";

/// Accounts known to belong to one person, keyed `(market, author)`.
///
/// Always transitively closed: every account in a group maps to the same
/// unified label.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CrossLabelMap {
    labels: BTreeMap<(String, String), String>,
}

impl CrossLabelMap {
    /// Merges linked account pairs with union-find; groups are labeled
    /// `cross-<k>` in order of their smallest member.
    pub fn from_pairs(pairs: &[((String, String), (String, String))]) -> Self {
        let mut ids: BTreeMap<(String, String), usize> = BTreeMap::new();
        for (a, b) in pairs {
            for k in [a, b] {
                let n = ids.len();
                ids.entry(k.clone()).or_insert(n);
            }
        }
        let mut parent: Vec<usize> = (0..ids.len()).collect();
        fn find(parent: &mut [usize], mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        for (a, b) in pairs {
            let (ra, rb) = (find(&mut parent, ids[a]), find(&mut parent, ids[b]));
            if ra != rb {
                parent[ra.max(rb)] = ra.min(rb);
            }
        }
        let mut group_label: BTreeMap<usize, String> = BTreeMap::new();
        let mut labels = BTreeMap::new();
        // ids iterate in key order, so groups are numbered by smallest member
        for (key, &id) in &ids {
            let root = find(&mut parent, id);
            let n = group_label.len();
            let label = group_label.entry(root).or_insert_with(|| format!("cross-{n}")).clone();
            labels.insert(key.clone(), label);
        }
        Self { labels }
    }

    /// Builds from explicit `(market, author) → label` assignments.
    pub fn from_assignments(labels: BTreeMap<(String, String), String>) -> Self {
        Self { labels }
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn label(&self, market: &str, author: &str) -> Option<&str> {
        self.labels.get(&(market.to_string(), author.to_string())).map(String::as_str)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&(String, String), &String)> {
        self.labels.iter()
    }

    /// Groups of accounts sharing a label.
    pub fn groups(&self) -> BTreeMap<&str, Vec<(&str, &str)>> {
        let mut out: BTreeMap<&str, Vec<(&str, &str)>> = BTreeMap::new();
        for ((m, a), l) in &self.labels {
            out.entry(l.as_str()).or_default().push((m.as_str(), a.as_str()));
        }
        out
    }

    /// Parses lines of `market:author unified_label`. `#` starts a comment.
    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        let mut labels = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut cols = line.split_whitespace();
            let (Some(key), Some(label), None) = (cols.next(), cols.next(), cols.next()) else {
                return Err(format!("line {}: expected `market:author label`", n + 1));
            };
            let Some((market, author)) = key.split_once(':') else {
                return Err(format!("line {}: missing ':' in {key:?}", n + 1));
            };
            labels.insert((market.to_string(), author.to_string()), label.to_string());
        }
        Ok(Self { labels })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::parse(&text).map_err(|reason| DataError::Parse {
            path: path.to_path_buf(),
            line: 0,
            reason,
        })
    }

    pub fn to_text(&self) -> String {
        self.labels
            .iter()
            .map(|((m, a), l)| format!("{m}:{a} {l}\n"))
            .collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }
}

/// Collects the mapped accounts' posts under their unified labels.
///
/// Posts keep their original market so episode sets never mix markets;
/// sub-forums become `market/subforum`, a context space of its own.
pub fn apply_cross_labels(corpora: &[Corpus], map: &CrossLabelMap) -> Result<Corpus> {
    let mut known: BTreeSet<(&str, &str)> = BTreeSet::new();
    for c in corpora {
        for p in c.posts() {
            known.insert((p.market.as_str(), p.author.as_str()));
        }
    }
    let missing: Vec<String> = map
        .entries()
        .filter(|((m, a), _)| !known.contains(&(m.as_str(), a.as_str())))
        .map(|((m, a), _)| format!("{m}:{a}"))
        .collect();
    if !missing.is_empty() {
        return Err(DataError::UnknownAuthors(missing));
    }
    let mut posts = Vec::new();
    for c in corpora {
        for p in c.posts() {
            if let Some(label) = map.label(&p.market, &p.author) {
                posts.push(Post {
                    author: label.to_string(),
                    subforum: format!("{}/{}", p.market, p.subforum),
                    ..p.clone()
                });
            }
        }
    }
    Corpus::new(posts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key(m: &str, a: &str) -> (String, String) {
        (m.to_string(), a.to_string())
    }

    fn corpus(market: &str, authors: &[&str]) -> Corpus {
        Corpus::new(
            authors
                .iter()
                .enumerate()
                .map(|(i, a)| Post {
                    market: market.into(),
                    author: a.to_string(),
                    timestamp: i as u64,
                    subforum: "s".into(),
                    thread: "t".into(),
                    text: "x".into(),
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn pair_shares_one_label() {
        let map = CrossLabelMap::from_pairs(&[(key("M1", "u1"), key("M2", "u9"))]);
        let corpora = [corpus("M1", &["u1", "u2"]), corpus("M2", &["u9"])];
        let cross = apply_cross_labels(&corpora, &map).unwrap();
        assert_eq!(cross.len(), 2);
        assert_eq!(cross.authors().len(), 1);
        assert_eq!(cross.subforums(), &["M1/s".to_string(), "M2/s".to_string()]);
    }

    #[test]
    fn empty_map_gives_empty_corpus() {
        let cross = apply_cross_labels(&[corpus("M1", &["u1"])], &CrossLabelMap::default()).unwrap();
        assert!(cross.is_empty());
    }

    #[test]
    fn chains_are_closed_transitively() {
        let map = CrossLabelMap::from_pairs(&[(key("A", "u1"), key("B", "u2")), (key("B", "u2"), key("C", "u3"))]);
        let l = map.label("A", "u1").unwrap();
        assert_eq!(map.label("B", "u2"), Some(l));
        assert_eq!(map.label("C", "u3"), Some(l));
        assert_eq!(map.groups().len(), 1);
    }

    #[test]
    fn unknown_authors_are_listed() {
        let map = CrossLabelMap::from_pairs(&[(key("M1", "u1"), key("M2", "ghost"))]);
        let err = apply_cross_labels(&[corpus("M1", &["u1"]), corpus("M2", &["u2"])], &map).unwrap_err();
        match err {
            DataError::UnknownAuthors(v) => assert_eq!(v, vec!["M2:ghost".to_string()]),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn text_format_round_trips() {
        let map = CrossLabelMap::from_pairs(&[(key("M1", "a"), key("M2", "b"))]);
        assert_eq!(CrossLabelMap::parse(&map.to_text()).unwrap(), map);
        assert!(CrossLabelMap::parse("M1-a label").is_err());
    }
}
