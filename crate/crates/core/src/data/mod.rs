//! Corpus handling: preprocessing, episode construction, temporal split,
//! cross-market relabeling and the synthetic corpus generator.

mod cross;
mod episodes;
mod preprocess;
mod synth;

pub use cross::{apply_cross_labels, CrossLabelMap, CROSS_MARKET};
pub use episodes::{build_episodes, temporal_split, Episode, EpisodeSet, Episodes};
pub use preprocess::{preprocess_post, SPECIAL_TOKENS};
pub use synth::{generate_author_posts, generate_synthetic_corpus, AuthorStyle, SynthConfig, SyntheticData, ALPHABET};

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("post {index}: {reason}")]
    InvalidPost { index: usize, reason: String },
    #[error("{path}:{line}: {reason}")]
    Parse { path: PathBuf, line: usize, reason: String },
    #[error("all posts share one timestamp; cannot split")]
    DegenerateTimestamps,
    #[error("temporal split needs at least 2 posts, got {0}")]
    TooFewPosts(usize),
    #[error("unknown authors in cross-label map: {0:?}")]
    UnknownAuthors(Vec<String>),
    #[error("invalid synthetic corpus parameters: {0}")]
    InvalidSynth(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Post {
    pub market: String,
    pub author: String,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
    pub subforum: String,
    pub thread: String,
    pub text: String,
}

impl Post {
    /// Day of week with Monday = 0.
    pub fn day_of_week(&self) -> u8 {
        day_of_week(self.timestamp)
    }
}

/// 1970-01-01 was a Thursday (index 3 with Monday = 0).
pub fn day_of_week(timestamp: u64) -> u8 {
    ((timestamp / 86_400 + 3) % 7) as u8
}

/// Posts plus sorted author and sub-forum indices.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Corpus {
    posts: Vec<Post>,
    authors: Vec<String>,
    subforums: Vec<String>,
}

impl Corpus {
    pub fn new(posts: Vec<Post>) -> Result<Self> {
        for (index, p) in posts.iter().enumerate() {
            if p.market.is_empty() || p.author.is_empty() {
                return Err(DataError::InvalidPost {
                    index,
                    reason: "empty market or author id".into(),
                });
            }
        }
        let mut authors: Vec<String> = posts.iter().map(|p| p.author.clone()).collect();
        authors.sort();
        authors.dedup();
        let mut subforums: Vec<String> = posts.iter().map(|p| p.subforum.clone()).collect();
        subforums.sort();
        subforums.dedup();
        Ok(Self {
            posts,
            authors,
            subforums,
        })
    }

    pub fn posts(&self) -> &[Post] {
        &self.posts
    }

    pub fn into_posts(self) -> Vec<Post> {
        self.posts
    }

    pub fn len(&self) -> usize {
        self.posts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.posts.is_empty()
    }

    pub fn authors(&self) -> &[String] {
        &self.authors
    }

    pub fn subforums(&self) -> &[String] {
        &self.subforums
    }

    pub fn author_id(&self, name: &str) -> Option<usize> {
        self.authors.binary_search_by(|a| a.as_str().cmp(name)).ok()
    }

    pub fn subforum_id(&self, name: &str) -> Option<usize> {
        self.subforums.binary_search_by(|s| s.as_str().cmp(name)).ok()
    }

    /// Market of the first post, if any.
    pub fn market(&self) -> Option<&str> {
        self.posts.first().map(|p| p.market.as_str())
    }

    pub fn posts_by_author(&self) -> BTreeMap<&str, Vec<usize>> {
        let mut out: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, p) in self.posts.iter().enumerate() {
            out.entry(p.author.as_str()).or_default().push(i);
        }
        out
    }

    /// Applies [`preprocess_post`] to every post text.
    pub fn preprocessed(&self) -> Self {
        let posts = self
            .posts
            .iter()
            .map(|p| Post {
                text: preprocess_post(&p.text),
                ..p.clone()
            })
            .collect();
        Self {
            posts,
            authors: self.authors.clone(),
            subforums: self.subforums.clone(),
        }
    }

    /// Reads one JSON object per line; blank lines are skipped.
    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let reader = BufReader::new(File::open(path)?);
        let mut posts = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let post: Post = serde_json::from_str(&line).map_err(|e| DataError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                reason: e.to_string(),
            })?;
            posts.push(post);
        }
        Self::new(posts)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for p in &self.posts {
            serde_json::to_writer(&mut w, p).map_err(std::io::Error::other)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }
}
