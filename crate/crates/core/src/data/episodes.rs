use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Corpus, DataError, Result};
use crate::encoder::tokenize_bytes;

/// One post as seen by the encoder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub tokens: Vec<u32>,
    pub day_of_week: u8,
    pub context_id: usize,
}

/// `L` chronologically consecutive episodes by one author in one market.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeSet {
    pub episodes: Vec<Episode>,
    pub author_label: usize,
    pub market: String,
    /// Indices of the source posts in the corpus.
    pub posts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Episodes {
    pub sets: Vec<EpisodeSet>,
    /// `authors[label]` is the author behind a label.
    pub authors: Vec<String>,
}

impl Episodes {
    pub fn labels(&self) -> Vec<usize> {
        self.sets.iter().map(|s| s.author_label).collect()
    }
}

/// Cuts each qualifying author's posts into consecutive windows of `length`.
///
/// Authors with fewer than `min_posts` posts are dropped; a trailing partial
/// window is discarded. Context ids index into `corpus.subforums()`.
pub fn build_episodes(corpus: &Corpus, length: usize, min_posts: usize, max_len: usize) -> Episodes {
    assert!(length >= 1, "episode length must be positive");
    let mut groups: BTreeMap<(&str, &str), Vec<usize>> = BTreeMap::new();
    for (i, p) in corpus.posts().iter().enumerate() {
        groups.entry((p.author.as_str(), p.market.as_str())).or_default().push(i);
    }
    let mut per_author: BTreeMap<&str, usize> = BTreeMap::new();
    for ((author, _), idx) in &groups {
        *per_author.entry(author).or_default() += idx.len();
    }
    let authors: Vec<String> = per_author
        .iter()
        .filter(|(_, &n)| n >= min_posts)
        .map(|(a, _)| a.to_string())
        .collect();
    let label_of: BTreeMap<&str, usize> = authors.iter().enumerate().map(|(l, a)| (a.as_str(), l)).collect();

    let mut sets = Vec::new();
    for ((author, market), mut idx) in groups {
        let Some(&label) = label_of.get(author) else {
            continue;
        };
        idx.sort_by_key(|&i| (corpus.posts()[i].timestamp, i));
        for window in idx.chunks_exact(length) {
            let episodes = window
                .iter()
                .map(|&i| {
                    let p = &corpus.posts()[i];
                    Episode {
                        tokens: tokenize_bytes(&p.text, max_len),
                        day_of_week: p.day_of_week(),
                        context_id: corpus.subforum_id(&p.subforum).expect("indexed subforum"),
                    }
                })
                .collect();
            sets.push(EpisodeSet {
                episodes,
                author_label: label,
                market: market.to_string(),
                posts: window.to_vec(),
            });
        }
    }
    Episodes { sets, authors }
}

/// Splits at the lower timestamp median: train gets every post at or before
/// the split time, test everything after. Ties at the split go to train.
///
/// Both halves keep the parent's author and sub-forum indices.
pub fn temporal_split(corpus: &Corpus) -> Result<(Corpus, Corpus)> {
    let n = corpus.len();
    if n < 2 {
        return Err(DataError::TooFewPosts(n));
    }
    let mut times: Vec<u64> = corpus.posts().iter().map(|p| p.timestamp).collect();
    times.sort_unstable();
    let (first, last) = (times[0], times[n - 1]);
    if first == last {
        return Err(DataError::DegenerateTimestamps);
    }
    let mut split = times[(n - 1) / 2];
    if split == last {
        // everything from the median up is tied at the maximum
        split = *times.iter().rev().find(|&&t| t < last).expect("two distinct timestamps");
    }
    let (train, test): (Vec<_>, Vec<_>) = corpus.posts().iter().cloned().partition(|p| p.timestamp <= split);
    let child = |posts| Corpus {
        posts,
        authors: corpus.authors.clone(),
        subforums: corpus.subforums.clone(),
    };
    Ok((child(train), child(test)))
}
